//! Loss assembly, the Adam optimizer, and the training loop with
//! early stopping on validation NDCG@10.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::{LossWeights, TrainConfig};
use crate::data::{SplitDataset, TrainInstance, Vocab};
use crate::encoder::{build_di_mask, build_ds_mask};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_instances, ndcg};
use crate::gmflow::{fuse_node, interpolate_node, SolverConfig};
use crate::graph::{Graph, NodeId};
use crate::model::{DropoutMode, Forward, Model};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::util::{derive_seed, seeded_rng};

// ── Losses ───────────────────────────────────────────────────────────

/// Cross-entropy of `target` under a softmax over the full vocabulary of
/// its domain, with logits `z · Emb(j)`.
fn domain_cross_entropy(
    fw: &mut Forward,
    z: NodeId,
    target: u32,
    target_domain: u16,
    vocab: &Vocab,
) -> Result<NodeId> {
    let range = vocab.domain_items(target_domain);
    if !range.contains(&target) {
        return Err(Error::DomainMismatch(format!(
            "item {target} not in domain {target_domain}"
        )));
    }
    let indices: Vec<usize> = range.map(|g| g as usize).collect();
    let table = fw.p("emb.item")?;
    let domain_rows = fw.graph.gather(table, &indices)?;
    let logits = fw.graph.matmul_nt(z, domain_rows)?;
    let lse = fw.graph.logsumexp(logits)?;
    let pos_row = fw.graph.gather(table, &[target as usize])?;
    let dot = fw.graph.matmul_nt(z, pos_row)?;
    let dot = fw.graph.reshape(dot, vec![1])?;
    fw.graph.sub(lse, dot)
}

/// Next-item prediction loss of the domain-aligned prior.
pub fn prior_loss_node(
    fw: &mut Forward,
    h_da: NodeId,
    target: u32,
    target_domain: u16,
    vocab: &Vocab,
) -> Result<NodeId> {
    domain_cross_entropy(fw, h_da, target, target_domain, vocab)
}

/// Next-item prediction loss of the mixture mean; identical contract with
/// z = mu.
pub fn rec_loss_node(
    fw: &mut Forward,
    mu: NodeId,
    target: u32,
    target_domain: u16,
    vocab: &Vocab,
) -> Result<NodeId> {
    domain_cross_entropy(fw, mu, target, target_domain, vocab)
}

pub struct InstanceLossNodes {
    pub rec: NodeId,
    pub prior: NodeId,
    pub gmm: NodeId,
    pub total: NodeId,
}

/// Full per-instance objective at one sampled timestep, in training order:
/// dual-masked encoding, domain-aligned prior, interpolation, fusion, head,
/// then the three losses.
pub fn instance_loss(
    fw: &mut Forward,
    inst: &TrainInstance,
    vocab: &Vocab,
    weights: &LossWeights,
    t: f64,
) -> Result<InstanceLossNodes> {
    let m = inst.items.len();
    let x = fw.embed_sequence(&inst.items, &inst.domains)?;
    let h_di = fw.encode(x, &build_di_mask(m))?;
    let h_ds = fw.encode(x, &build_ds_mask(&inst.domains))?;
    let x1 = fw.last_state(h_di)?;
    let h_da = fw.domain_aligned_prior(h_ds, &inst.domains, inst.target_domain)?;
    let table = fw.p("emb.item")?;
    let x0 = fw.graph.gather(table, &[inst.target as usize])?;
    let xt = interpolate_node(fw.graph, x0, x1, t)?;
    let xbar = fuse_node(fw.graph, xt, x1, fw.model.flow.lambda)?;
    let head = fw.gmm_head_nodes(xbar, h_da, t)?;

    let rec = rec_loss_node(fw, head.mixture_mean, inst.target, inst.target_domain, vocab)?;
    let prior = prior_loss_node(fw, h_da, inst.target, inst.target_domain, vocab)?;
    let gmm = fw.gmm_nll_node(&head, x0)?;

    let scaled_prior = fw.graph.scalar_affine(prior, weights.alpha, 0.0)?;
    let scaled_gmm = fw.graph.scalar_affine(gmm, weights.beta, 0.0)?;
    let partial = fw.graph.add(rec, scaled_prior)?;
    let total = fw.graph.add(partial, scaled_gmm)?;
    Ok(InstanceLossNodes {
        rec,
        prior,
        gmm,
        total,
    })
}

pub struct BatchLoss {
    pub node: NodeId,
    pub rec: f64,
    pub prior: f64,
    pub gmm: f64,
    pub total: f64,
}

/// Mean of per-instance objectives over a batch; each instance is scored
/// with its own target-domain vocabulary and its own timestep.
pub fn total_loss(
    fw: &mut Forward,
    batch: &[TrainInstance],
    vocab: &Vocab,
    weights: &LossWeights,
    ts: &[f64],
) -> Result<BatchLoss> {
    if batch.is_empty() || batch.len() != ts.len() {
        return Err(Error::Shape("total_loss: empty batch or t mismatch".into()));
    }
    let mut acc: Option<NodeId> = None;
    let (mut rec, mut prior, mut gmm) = (0.0, 0.0, 0.0);
    for (inst, &t) in batch.iter().zip(ts) {
        let losses = instance_loss(fw, inst, vocab, weights, t)?;
        rec += fw.graph.value(losses.rec).item();
        prior += fw.graph.value(losses.prior).item();
        gmm += fw.graph.value(losses.gmm).item();
        acc = Some(match acc {
            None => losses.total,
            Some(a) => fw.graph.add(a, losses.total)?,
        });
    }
    let n = batch.len() as f64;
    let node = fw.graph.scalar_affine(acc.unwrap(), 1.0 / n, 0.0)?;
    let total = fw.graph.value(node).item();
    Ok(BatchLoss {
        node,
        rec: rec / n,
        prior: prior / n,
        gmm: gmm / n,
        total,
    })
}

// ── Optimizer ────────────────────────────────────────────────────────

/// Adam with bias correction; moment tensors line up with the parameter
/// store order.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |_: usize| {
            (0..store.len())
                .map(|i| Tensor::zeros(store.at(i).shape().to_vec()))
                .collect::<Vec<_>>()
        };
        Adam {
            m: zeros(0),
            v: zeros(0),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. `grads[i]` pairs with store position i; `None` means no
    /// gradient flowed (treated as zero).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        debug_assert_eq!(grads.len(), store.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..store.len() {
            let p = store.at_mut(i).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            match &grads[i] {
                Some(g) => {
                    for j in 0..p.len() {
                        let gj = g.data()[j];
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        p[j] -= lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
                None => {
                    for j in 0..p.len() {
                        m[j] *= self.beta1;
                        v[j] *= self.beta2;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        p[j] -= lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

// ── Training loop ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub loss_rec: f64,
    pub loss_prior: f64,
    pub loss_gmm: f64,
    pub loss_total: f64,
    pub seconds: f64,
    pub batches: usize,
}

/// One pass over the training set: shuffle, then per batch sample
/// timesteps, build the objective graph, backpropagate, and apply the
/// optimizer update.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &mut Model,
    opt: &mut Adam,
    train: &[TrainInstance],
    vocab: &Vocab,
    weights: &LossWeights,
    cfg: &TrainConfig,
    epoch: usize,
    seed: u64,
) -> Result<EpochStats> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let start = std::time::Instant::now();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = seeded_rng(derive_seed(seed, "shuffle", epoch as u64));
    order.shuffle(&mut shuffle_rng);
    let mut t_rng = seeded_rng(derive_seed(seed, "timestep", epoch as u64));
    let mut drop_rng = seeded_rng(derive_seed(seed, "dropout", epoch as u64));

    let mut stats = EpochStats {
        loss_rec: 0.0,
        loss_prior: 0.0,
        loss_gmm: 0.0,
        loss_total: 0.0,
        seconds: 0.0,
        batches: 0,
    };
    let mut seen = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<TrainInstance> = chunk.iter().map(|&i| train[i].clone()).collect();
        let ts: Vec<f64> = (0..batch.len())
            .map(|_| t_rng.random_range(0.0..1.0))
            .collect();

        let mut g = Graph::new();
        let bound = g.bind(&model.params);
        let dropout = if model.encoder.dropout > 0.0 {
            DropoutMode::On {
                rate: model.encoder.dropout,
                rng: &mut drop_rng,
            }
        } else {
            DropoutMode::Off
        };
        let mut fw = Forward::new(&mut g, &bound, model, dropout);
        let loss = total_loss(&mut fw, &batch, vocab, weights, &ts)?;
        let mut grads = g.backward(loss.node)?;
        let per_param: Vec<Option<Tensor>> = bound
            .ids
            .iter()
            .map(|&id| grads.take(id))
            .collect();
        drop(g);
        opt.step(&mut model.params, &per_param, cfg.learning_rate);

        let w = batch.len() as f64;
        stats.loss_rec += loss.rec * w;
        stats.loss_prior += loss.prior * w;
        stats.loss_gmm += loss.gmm * w;
        stats.loss_total += loss.total * w;
        stats.batches += 1;
        seen += batch.len();
    }
    let n = seen as f64;
    stats.loss_rec /= n;
    stats.loss_prior /= n;
    stats.loss_gmm /= n;
    stats.loss_total /= n;
    stats.seconds = start.elapsed().as_secs_f64();
    Ok(stats)
}

#[derive(Debug, Clone, Copy)]
pub struct StopDecision {
    pub stop: bool,
    /// Index of the best entry (first maximum on ties).
    pub best_index: usize,
}

/// Stop when the metric has not improved for `patience` consecutive
/// evaluations.
pub fn early_stop(history: &[f64], patience: usize) -> StopDecision {
    assert!(!history.is_empty(), "early_stop on empty history");
    let mut best_index = 0;
    for (i, &v) in history.iter().enumerate() {
        if v > history[best_index] {
            best_index = i;
        }
    }
    StopDecision {
        stop: history.len() - 1 - best_index >= patience,
        best_index,
    }
}

#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss_rec: f64,
    pub loss_prior: f64,
    pub loss_gmm: f64,
    pub val_ndcg10: f64,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct FitOutcome {
    pub best_params: ParamStore,
    pub best_epoch: usize,
    pub rows: Vec<EpochRow>,
    pub stopped_early: bool,
}

/// Train with per-epoch validation and early stopping; returns the best
/// checkpoint by validation NDCG@10. A numeric failure mid-epoch rolls the
/// parameters back to the last completed epoch before the error surfaces.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    model: &mut Model,
    split: &SplitDataset,
    vocab: &Vocab,
    weights: &LossWeights,
    cfg: &TrainConfig,
    solver: &SolverConfig,
    threads: usize,
    seed: u64,
) -> Result<FitOutcome> {
    let mut opt = Adam::new(&model.params);
    let mut best_params = model.params.clone();
    let mut best_epoch = 0usize;
    let mut history: Vec<f64> = Vec::new();
    let mut rows = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let snapshot = model.params.clone();
        let stats = match train_epoch(
            model,
            &mut opt,
            &split.train,
            vocab,
            weights,
            cfg,
            epoch,
            seed,
        ) {
            Ok(s) => s,
            Err(e @ Error::Numerics(_)) => {
                model.params = snapshot;
                return Err(e);
            }
            Err(e) => return Err(e),
        };

        let ranks = evaluate_instances(model, &split.validation, solver, threads)?;
        let rank_values: Vec<usize> = ranks.iter().map(|r| r.rank).collect();
        let val = ndcg(&rank_values, 10)?;
        history.push(val);
        rows.push(EpochRow {
            epoch,
            loss_rec: stats.loss_rec,
            loss_prior: stats.loss_prior,
            loss_gmm: stats.loss_gmm,
            val_ndcg10: val,
            seconds: stats.seconds,
        });
        let decision = early_stop(&history, cfg.patience);
        if decision.best_index + 1 == epoch {
            best_params = model.params.clone();
            best_epoch = epoch;
        }
        if decision.stop {
            stopped_early = true;
            break;
        }
    }
    Ok(FitOutcome {
        best_params,
        best_epoch,
        rows,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EncoderConfig, FlowConfig};
    use crate::data::{
        build_sequences, filter_core, leave_one_out_split, synth_generate, SplitConfig,
        SynthConfig,
    };
    use crate::model::ModelDims;

    fn toy_vocab() -> Vocab {
        let mut records = Vec::new();
        for d in 0..2u16 {
            for i in 0..6 {
                records.push(crate::data::InteractionRecord {
                    user_id: "u".into(),
                    item_id: format!("i{i}"),
                    domain_id: d,
                    timestamp: i as i64,
                });
            }
        }
        Vocab::from_records(&records).unwrap()
    }

    fn toy_model(vocab: &Vocab, seed: u64) -> Model {
        Model::init(
            ModelDims {
                vocab_size: vocab.num_items(),
                num_domains: vocab.num_domains,
                max_len: 10,
            },
            EncoderConfig {
                dim: 8,
                layers: 1,
                heads: 2,
                dropout: 0.0,
            },
            FlowConfig {
                components: 2,
                time_enc_dim: 4,
                ..FlowConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    fn toy_instance(vocab: &Vocab) -> TrainInstance {
        let d0: Vec<u32> = vocab.domain_items(0).collect();
        let d1: Vec<u32> = vocab.domain_items(1).collect();
        TrainInstance {
            user: 0,
            items: vec![d0[0], d1[1], d0[2]],
            domains: vec![0, 1, 0],
            target: d0[3],
            target_domain: 0,
        }
    }

    #[test]
    fn softmax_arithmetic_for_two_item_domain() {
        // logits (1, 0), target first -> -log(e / (e + 1))
        let mut g = Graph::new();
        let z = g.leaf(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let lse = g.logsumexp(z).unwrap();
        let first = g.leaf(Tensor::scalar(1.0));
        let loss = g.sub(lse, first).unwrap();
        let expect = -((1f64).exp() / ((1f64).exp() + 1.0)).ln();
        assert!((g.value(loss).item() - expect).abs() < 1e-12);
        assert!((g.value(loss).item() - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn prior_loss_matches_closed_form_and_shift_invariance() {
        let vocab = toy_vocab();
        let model = toy_model(&vocab, 42);
        let d = model.encoder.dim;
        let n = vocab.domain_size(0);
        let target = vocab.domain_items(0).next().unwrap();

        // uniform logits: z = 0 -> loss = log n
        let mut g = Graph::new();
        let bound = g.bind(&model.params);
        let mut fw = Forward::new(&mut g, &bound, &model, DropoutMode::Off);
        let z = fw.graph.leaf(Tensor::matrix(1, d, vec![0.0; d]).unwrap());
        let loss = prior_loss_node(&mut fw, z, target, 0, &vocab).unwrap();
        assert!((g.value(loss).item() - (n as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_shift_invariant() {
        // adding a constant to every logit leaves lse(x) - x[target] unchanged
        let logits = [0.4, -1.2, 2.0, 0.7];
        let loss_of = |shift: f64| {
            let mut g = Graph::new();
            let z = g.leaf(Tensor::matrix(
                1,
                4,
                logits.iter().map(|l| l + shift).collect(),
            )
            .unwrap());
            let lse = g.logsumexp(z).unwrap();
            let target = g.leaf(Tensor::scalar(logits[2] + shift));
            let loss = g.sub(lse, target).unwrap();
            g.value(loss).item()
        };
        assert!((loss_of(0.0) - loss_of(13.5)).abs() < 1e-12);
        assert!((loss_of(0.0) - loss_of(-7.25)).abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_target_outside_domain() {
        let vocab = toy_vocab();
        let model = toy_model(&vocab, 42);
        let other_domain_item = vocab.domain_items(1).next().unwrap();
        let mut g = Graph::new();
        let bound = g.bind(&model.params);
        let mut fw = Forward::new(&mut g, &bound, &model, DropoutMode::Off);
        let z = g_leaf(&mut fw, model.encoder.dim);
        let err = prior_loss_node(&mut fw, z, other_domain_item, 0, &vocab).unwrap_err();
        assert!(matches!(err, Error::DomainMismatch(_)));
    }

    fn g_leaf(fw: &mut Forward, d: usize) -> NodeId {
        fw.graph.leaf(Tensor::matrix(1, d, vec![0.1; d]).unwrap())
    }

    #[test]
    fn zero_weights_reduce_total_to_rec_mean_bitwise() {
        let vocab = toy_vocab();
        let model = toy_model(&vocab, 7);
        let inst = toy_instance(&vocab);
        let batch = vec![inst.clone(), inst];
        let ts = vec![0.3, 0.8];
        let weights = LossWeights {
            alpha: 0.0,
            beta: 0.0,
        };
        let mut g = Graph::new();
        let bound = g.bind(&model.params);
        let mut fw = Forward::new(&mut g, &bound, &model, DropoutMode::Off);
        let loss = total_loss(&mut fw, &batch, &vocab, &weights, &ts).unwrap();
        assert_eq!(loss.total.to_bits(), loss.rec.to_bits());
    }

    #[test]
    fn single_instance_batch_is_exact_weighted_sum() {
        let vocab = toy_vocab();
        let model = toy_model(&vocab, 7);
        let inst = toy_instance(&vocab);
        let weights = LossWeights {
            alpha: 0.37,
            beta: 0.011,
        };
        let mut g = Graph::new();
        let bound = g.bind(&model.params);
        let mut fw = Forward::new(&mut g, &bound, &model, DropoutMode::Off);
        let loss = total_loss(&mut fw, std::slice::from_ref(&inst), &vocab, &weights, &[0.4]).unwrap();
        let expect = loss.rec + weights.alpha * loss.prior + weights.beta * loss.gmm;
        assert!((loss.total - expect).abs() < 1e-12);
    }

    #[test]
    fn per_domain_regrouping_matches_instance_mean() {
        let vocab = toy_vocab();
        let model = toy_model(&vocab, 19);
        let d0: Vec<u32> = vocab.domain_items(0).collect();
        let d1: Vec<u32> = vocab.domain_items(1).collect();
        let batch = vec![
            TrainInstance {
                user: 0,
                items: vec![d0[0], d0[1]],
                domains: vec![0, 0],
                target: d0[2],
                target_domain: 0,
            },
            TrainInstance {
                user: 1,
                items: vec![d1[0], d0[1]],
                domains: vec![1, 0],
                target: d1[2],
                target_domain: 1,
            },
            TrainInstance {
                user: 2,
                items: vec![d1[3], d1[0]],
                domains: vec![1, 1],
                target: d1[4],
                target_domain: 1,
            },
        ];
        let ts = [0.2, 0.5, 0.9];
        let weights = LossWeights {
            alpha: 0.5,
            beta: 0.01,
        };
        // instance-mean computation
        let mut g = Graph::new();
        let bound = g.bind(&model.params);
        let mut fw = Forward::new(&mut g, &bound, &model, DropoutMode::Off);
        let mean = total_loss(&mut fw, &batch, &vocab, &weights, &ts).unwrap().total;
        // per-domain grouped sums, then normalized by the batch size
        let mut grouped = 0.0;
        for dom in 0..2u16 {
            for (inst, &t) in batch.iter().zip(&ts) {
                if inst.target_domain != dom {
                    continue;
                }
                let mut g = Graph::new();
                let bound = g.bind(&model.params);
                let mut fw = Forward::new(&mut g, &bound, &model, DropoutMode::Off);
                let l = instance_loss(&mut fw, inst, &vocab, &weights, t).unwrap();
                grouped += g.value(l.total).item();
            }
        }
        grouped /= batch.len() as f64;
        assert!((mean - grouped).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let vocab = toy_vocab();
        let model = toy_model(&vocab, 77);
        let mut store = model.params.clone();
        let before = store.clone();
        let mut opt = Adam::new(&store);
        let zeros: Vec<Option<Tensor>> = (0..store.len())
            .map(|i| Some(Tensor::zeros(store.at(i).shape().to_vec())))
            .collect();
        opt.step(&mut store, &zeros, 0.01);
        for i in 0..store.len() {
            assert_eq!(store.at(i).data(), before.at(i).data());
        }
    }

    #[test]
    fn zero_learning_rate_is_bitwise_identity() {
        let vocab = toy_vocab();
        let mut model = toy_model(&vocab, 5);
        let before = model.params.clone();
        let mut opt = Adam::new(&model.params);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            batch_size: 2,
            max_epochs: 1,
            patience: 1,
        };
        let train = vec![toy_instance(&vocab), toy_instance(&vocab)];
        train_epoch(&mut model, &mut opt, &train, &vocab, &LossWeights::default(), &cfg, 1, 3)
            .unwrap();
        for i in 0..before.len() {
            let (a, b) = (before.at(i).data(), model.params.at(i).data());
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn fixed_seed_training_is_deterministic() {
        let vocab = toy_vocab();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 2,
            max_epochs: 1,
            patience: 1,
        };
        let run = || {
            let mut model = toy_model(&vocab, 5);
            model.encoder.dropout = 0.2; // exercise the dropout stream too
            let mut opt = Adam::new(&model.params);
            let train = vec![toy_instance(&vocab), toy_instance(&vocab)];
            let stats = train_epoch(
                &mut model,
                &mut opt,
                &train,
                &vocab,
                &LossWeights::default(),
                &cfg,
                1,
                3,
            )
            .unwrap();
            (stats.loss_total, model.params)
        };
        let (l1, p1) = run();
        let (l2, p2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        for i in 0..p1.len() {
            assert!(p1
                .at(i)
                .data()
                .iter()
                .zip(p2.at(i).data())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        // d=8, L=1, K=2, 2 instances; every parameter tensor, strided coords
        let vocab = toy_vocab();
        let model = toy_model(&vocab, 11);
        let inst_a = toy_instance(&vocab);
        let d1: Vec<u32> = vocab.domain_items(1).collect();
        let inst_b = TrainInstance {
            user: 1,
            items: vec![d1[0], d1[4]],
            domains: vec![1, 1],
            target: d1[2],
            target_domain: 1,
        };
        let weights = LossWeights {
            alpha: 0.5,
            beta: 0.1,
        };
        let build = move |g: &mut Graph, bound: &crate::graph::BoundParams| {
            let mut fw = Forward::new(g, bound, &model, DropoutMode::Off);
            let loss = total_loss(
                &mut fw,
                &[inst_a.clone(), inst_b.clone()],
                &vocab,
                &weights,
                &[0.35, 0.72],
            )?;
            Ok(loss.node)
        };
        let model2 = toy_model(&toy_vocab(), 11);
        let mut store = model2.params.clone();
        for i in 0..store.len() {
            let name = store.name_at(i).to_string();
            let err =
                crate::graph::finite_difference_check(&mut store, &name, 1e-5, 24, &build)
                    .unwrap();
            assert!(err < 1e-4, "{name}: fd error {err}");
        }
    }

    #[test]
    fn early_stop_rule_examples() {
        let d = early_stop(&[0.2, 0.3, 0.29, 0.28, 0.27], 3);
        assert!(d.stop);
        assert_eq!(d.best_index, 1);
        let d = early_stop(&[0.1, 0.2, 0.3, 0.4], 3);
        assert!(!d.stop);
        let d = early_stop(&[0.2, 0.19], 1);
        assert!(d.stop);
        assert_eq!(d.best_index, 0);
    }

    fn small_synth_split() -> (Vocab, SplitDataset) {
        let cfg = SynthConfig {
            num_users: 50,
            num_domains: 2,
            items_per_domain: 12,
            seq_len_min: 5,
            seq_len_max: 8,
            transition: vec![vec![0.7, 0.3], vec![0.3, 0.7]],
            zipf_exponent: vec![0.8, 0.8],
            intent_dim: 3,
            intent_weight: 0.7,
        };
        let records = synth_generate(&cfg, 17).unwrap();
        let (records, vocab) = filter_core(records, 1, 1).unwrap();
        let sequences = build_sequences(&records, &vocab, 10).unwrap();
        let split = leave_one_out_split(
            &sequences,
            &vocab,
            &SplitConfig {
                max_len: 10,
                num_negatives: 8,
                max_windows_per_user: 0,
            },
            17,
        )
        .unwrap();
        (vocab, split)
    }

    #[test]
    fn loss_decreases_over_epochs_on_synthetic_data() {
        let (vocab, split) = small_synth_split();
        let mut model = Model::init(
            ModelDims {
                vocab_size: vocab.num_items(),
                num_domains: vocab.num_domains,
                max_len: 10,
            },
            EncoderConfig {
                dim: 8,
                layers: 1,
                heads: 2,
                dropout: 0.0,
            },
            FlowConfig {
                components: 2,
                time_enc_dim: 4,
                ..FlowConfig::default()
            },
            23,
        )
        .unwrap();
        let mut opt = Adam::new(&model.params);
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            batch_size: 32,
            max_epochs: 5,
            patience: 5,
        };
        let mut first = 0.0;
        let mut last = 0.0;
        for epoch in 1..=5 {
            let stats = train_epoch(
                &mut model,
                &mut opt,
                &split.train,
                &vocab,
                &LossWeights::default(),
                &cfg,
                epoch,
                23,
            )
            .unwrap();
            if epoch == 1 {
                first = stats.loss_total;
            }
            last = stats.loss_total;
        }
        assert!(
            last < first,
            "mean loss after epoch 5 ({last}) should beat epoch 1 ({first})"
        );
    }

    #[test]
    fn numeric_failure_rolls_back_to_pre_epoch_params() {
        let (vocab, split) = small_synth_split();
        let mut model = Model::init(
            ModelDims {
                vocab_size: vocab.num_items(),
                num_domains: vocab.num_domains,
                max_len: 10,
            },
            EncoderConfig {
                dim: 8,
                layers: 1,
                heads: 2,
                dropout: 0.0,
            },
            FlowConfig {
                components: 2,
                time_enc_dim: 4,
                ..FlowConfig::default()
            },
            29,
        )
        .unwrap();
        let before = model.params.clone();
        let cfg = TrainConfig {
            learning_rate: 1e25, // forces an overflow within the epoch
            batch_size: 8,
            max_epochs: 3,
            patience: 3,
        };
        let solver = SolverConfig::from_flow(&model.flow.clone());
        let err = fit(
            &mut model,
            &split,
            &vocab,
            &LossWeights::default(),
            &cfg,
            &solver,
            1,
            29,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numerics(_)));
        for i in 0..before.len() {
            assert!(before
                .at(i)
                .data()
                .iter()
                .zip(model.params.at(i).data())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
