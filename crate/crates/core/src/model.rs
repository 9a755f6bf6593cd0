//! Model assembly: parameter layout, initialization, and the forward
//! context shared by training and inference.

use rand_chacha::ChaCha8Rng;

use crate::config::{EncoderConfig, FlowConfig};
use crate::error::{Error, Result};
use crate::graph::{BoundParams, Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::util::{derive_seed, normal, seeded_rng};

/// Sizes fixed by the dataset rather than the config file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub num_domains: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub dims: ModelDims,
    pub encoder: EncoderConfig,
    pub flow: FlowConfig,
    pub params: ParamStore,
}

fn init_normal(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal(rng) * std).collect();
    Tensor::new(shape, data).unwrap()
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    init_normal(rng, vec![rows, cols], std)
}

impl Model {
    /// Head MLP input width: fused latent ++ domain-aligned prior ++ timestep
    /// encoding.
    pub fn head_input_dim(&self) -> usize {
        2 * self.encoder.dim + self.flow.time_enc_dim
    }

    pub fn head_hidden_dim(&self) -> usize {
        4 * self.encoder.dim
    }

    pub fn init(
        dims: ModelDims,
        encoder: EncoderConfig,
        flow: FlowConfig,
        seed: u64,
    ) -> Result<Model> {
        if dims.vocab_size == 0 || dims.num_domains == 0 {
            return Err(Error::Config("model: empty vocabulary".into()));
        }
        if encoder.dim % encoder.heads != 0 {
            return Err(Error::Config("model: heads must divide dim".into()));
        }
        let d = encoder.dim;
        let dh = d / encoder.heads;
        let mut rng = seeded_rng(derive_seed(seed, "init", 0));
        let mut p = ParamStore::new();

        p.insert("emb.item", init_normal(&mut rng, vec![dims.vocab_size, d], 0.02));
        p.insert("emb.domain", init_normal(&mut rng, vec![dims.num_domains, d], 0.02));
        p.insert("emb.pos", init_normal(&mut rng, vec![dims.max_len, d], 0.02));

        for l in 0..encoder.layers {
            p.insert(&format!("enc.l{l}.ln1.g"), Tensor::vector(vec![1.0; d]));
            p.insert(&format!("enc.l{l}.ln1.b"), Tensor::vector(vec![0.0; d]));
            for h in 0..encoder.heads {
                p.insert(&format!("enc.l{l}.attn.h{h}.wq"), xavier(&mut rng, d, dh));
                p.insert(&format!("enc.l{l}.attn.h{h}.wk"), xavier(&mut rng, d, dh));
                p.insert(&format!("enc.l{l}.attn.h{h}.wv"), xavier(&mut rng, d, dh));
            }
            p.insert(&format!("enc.l{l}.attn.wo"), xavier(&mut rng, d, d));
            p.insert(&format!("enc.l{l}.attn.bo"), Tensor::vector(vec![0.0; d]));
            p.insert(&format!("enc.l{l}.ln2.g"), Tensor::vector(vec![1.0; d]));
            p.insert(&format!("enc.l{l}.ln2.b"), Tensor::vector(vec![0.0; d]));
            p.insert(&format!("enc.l{l}.ffn.w1"), xavier(&mut rng, d, 4 * d));
            p.insert(&format!("enc.l{l}.ffn.b1"), Tensor::vector(vec![0.0; 4 * d]));
            p.insert(&format!("enc.l{l}.ffn.w2"), xavier(&mut rng, 4 * d, d));
            p.insert(&format!("enc.l{l}.ffn.b2"), Tensor::vector(vec![0.0; d]));
        }
        p.insert("enc.final.g", Tensor::vector(vec![1.0; d]));
        p.insert("enc.final.b", Tensor::vector(vec![0.0; d]));

        let model = Model {
            dims,
            encoder,
            flow,
            params: p,
        };
        let (hin, hid, k) = (
            model.head_input_dim(),
            model.head_hidden_dim(),
            model.flow.components,
        );
        let mut p = model.params;
        p.insert("head.w1", xavier(&mut rng, hin, hid));
        p.insert("head.b1", Tensor::vector(vec![0.0; hid]));
        p.insert("head.w2", xavier(&mut rng, hid, hid));
        p.insert("head.b2", Tensor::vector(vec![0.0; hid]));
        p.insert("head.alpha.w", xavier(&mut rng, hid, k));
        p.insert("head.alpha.b", Tensor::vector(vec![0.0; k]));
        p.insert("head.mu.w", xavier(&mut rng, hid, k * d));
        p.insert("head.mu.b", Tensor::vector(vec![0.0; k * d]));
        p.insert("head.sigma.w", xavier(&mut rng, hid, k));
        p.insert("head.sigma.b", Tensor::vector(vec![0.0; k]));

        Ok(Model { params: p, ..model })
    }

    /// Replace the parameter store, shape-checking against the current one.
    pub fn load_params(&mut self, loaded: ParamStore) -> Result<()> {
        if loaded.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                loaded.len(),
                self.params.len()
            )));
        }
        for (name, tensor) in self.params.iter() {
            let other = loaded.get(name)?;
            if other.shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: checkpoint shape {:?}, model expects {:?}",
                    other.shape(),
                    tensor.shape()
                )));
            }
        }
        self.params = loaded;
        Ok(())
    }
}

/// Dropout state for a forward pass. Training draws keep-masks from a
/// dedicated stream; inference and gradient checking run with `Off`.
pub enum DropoutMode<'r> {
    Off,
    On { rate: f64, rng: &'r mut ChaCha8Rng },
}

/// One forward pass over a graph with the model parameters bound as leaves.
pub struct Forward<'g, 'r> {
    pub graph: &'g mut Graph,
    pub bound: &'g BoundParams,
    pub model: &'g Model,
    pub dropout: DropoutMode<'r>,
}

impl<'g, 'r> Forward<'g, 'r> {
    pub fn new(
        graph: &'g mut Graph,
        bound: &'g BoundParams,
        model: &'g Model,
        dropout: DropoutMode<'r>,
    ) -> Self {
        Forward {
            graph,
            bound,
            model,
            dropout,
        }
    }

    /// Node id of a named parameter leaf.
    pub fn p(&self, name: &str) -> Result<NodeId> {
        Ok(self.bound.ids[self.model.params.position(name)?])
    }

    pub fn maybe_dropout(&mut self, x: NodeId) -> Result<NodeId> {
        match &mut self.dropout {
            DropoutMode::Off => Ok(x),
            DropoutMode::On { rate, rng } => {
                let keep = 1.0 - *rate;
                let t = self.graph.value(x);
                let mask: Vec<f64> = (0..t.len())
                    .map(|_| {
                        if rand::Rng::random_range(&mut **rng, 0.0..1.0) < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let m = self
                    .graph
                    .leaf(Tensor::new(t.shape().to_vec(), mask)?);
                self.graph.mul(x, m)
            }
        }
    }
}
