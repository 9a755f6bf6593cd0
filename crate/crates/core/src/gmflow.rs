//! Generative core: straight-line interpolation, fused latents, the
//! Gaussian-mixture head, mixture NLL, and the first-order GM-ODE sampler.
//!
//! The head exists in two forms that share every kernel: a graph builder for
//! training (gradients flow through it) and a plain-tensor evaluator used by
//! the ODE solver at inference. A parity test pins them bitwise-equal.

use crate::config::{FlowConfig, VelocityMode};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{Forward, Model};
use crate::tensor::{self, Tensor};

/// The flow-matching tuple around one training instance.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub t: f64,
    pub x0: Tensor,
    pub x1: Tensor,
    pub xt: Tensor,
    pub xbar: Tensor,
    pub lambda: f64,
}

/// K-component spherical mixture emitted by the head.
#[derive(Debug, Clone)]
pub struct GaussianMixtureOutput {
    /// Raw component logits alpha_k.
    pub logits: Vec<f64>,
    /// softmax(alpha); sums to 1.
    pub weights: Vec<f64>,
    /// K x d component means.
    pub means: Tensor,
    /// Positive per-component standard deviations.
    pub scales: Vec<f64>,
    /// Mixture mean: sum_k A_k mu_k.
    pub mean: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    /// Step count T; the step size is 1/T.
    pub steps: usize,
    pub lambda: f64,
    pub velocity: VelocityMode,
}

impl SolverConfig {
    pub fn from_flow(flow: &FlowConfig) -> Self {
        SolverConfig {
            steps: flow.solver_steps,
            lambda: flow.lambda,
            velocity: flow.velocity,
        }
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }
}

// ── Plain-tensor operations ──────────────────────────────────────────

/// `x_t = (1 - t) x_0 + t x_1`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("interpolation time {t} outside [0, 1]")));
    }
    if x0.shape() != x1.shape() {
        return Err(Error::Shape(format!(
            "interpolate: {:?} vs {:?}",
            x0.shape(),
            x1.shape()
        )));
    }
    let data = x0
        .data()
        .iter()
        .zip(x1.data())
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// `x̄ = λ x_t + (1 - λ) x_1`.
pub fn fuse_latent(xt: &Tensor, x1: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!("lambda {lambda} outside [0, 1]")));
    }
    if xt.shape() != x1.shape() {
        return Err(Error::Shape(format!(
            "fuse_latent: {:?} vs {:?}",
            xt.shape(),
            x1.shape()
        )));
    }
    let data = xt
        .data()
        .iter()
        .zip(x1.data())
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    Tensor::new(xt.shape().to_vec(), data)
}

/// Convenience constructor holding the interpolation identities.
pub fn flow_state(x0: &Tensor, x1: &Tensor, t: f64, lambda: f64) -> Result<FlowState> {
    let xt = interpolate(x0, x1, t)?;
    let xbar = fuse_latent(&xt, x1, lambda)?;
    Ok(FlowState {
        t,
        x0: x0.clone(),
        x1: x1.clone(),
        xt,
        xbar,
        lambda,
    })
}

/// Sinusoidal features of the timestep, fed to the head alongside the
/// latent inputs.
pub fn time_encoding(t: f64, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let w = std::f64::consts::PI * (1u64 << i) as f64;
        out.push((w * t).sin());
        out.push((w * t).cos());
    }
    out
}

/// `μ = Σ_k A_k μ_k`.
pub fn mixture_mean(weights: &[f64], means: &Tensor) -> Result<Tensor> {
    let (k, d) = (means.shape()[0], means.shape()[1]);
    if weights.len() != k {
        return Err(Error::Shape("mixture_mean: weights vs means".into()));
    }
    let data = tensor::matmul(weights, means.data(), 1, k, d, false);
    Tensor::new(vec![d], data)
}

/// Plain-tensor head evaluation; mirrors [`gmm_head_nodes`] kernel for
/// kernel so the two stay bitwise identical.
pub fn gmm_head(model: &Model, xbar: &Tensor, h_da: &Tensor, t: f64) -> Result<GaussianMixtureOutput> {
    let d = model.encoder.dim;
    if xbar.len() != d || h_da.len() != d {
        return Err(Error::Shape(format!(
            "gmm_head: expected {d}-vectors, got {:?} and {:?}",
            xbar.shape(),
            h_da.shape()
        )));
    }
    let k = model.flow.components;
    let hin = model.head_input_dim();
    let hid = model.head_hidden_dim();
    let p = &model.params;

    let mut input = Vec::with_capacity(hin);
    input.extend_from_slice(xbar.data());
    input.extend_from_slice(h_da.data());
    input.extend(time_encoding(t, model.flow.time_enc_dim));

    let linear = |x: &[f64], w: &Tensor, b: &Tensor, cols: usize| -> Vec<f64> {
        let mut out = tensor::matmul(x, w.data(), 1, x.len(), cols, false);
        for (o, bv) in out.iter_mut().zip(b.data()) {
            *o += bv;
        }
        out
    };

    let mut h1 = linear(&input, p.get("head.w1")?, p.get("head.b1")?, hid);
    for v in h1.iter_mut() {
        *v = tensor::gelu(*v);
    }
    let mut h2 = linear(&h1, p.get("head.w2")?, p.get("head.b2")?, hid);
    for v in h2.iter_mut() {
        *v = tensor::gelu(*v);
    }
    let logits = linear(&h2, p.get("head.alpha.w")?, p.get("head.alpha.b")?, k);
    let mu = linear(&h2, p.get("head.mu.w")?, p.get("head.mu.b")?, k * d);
    let mut scales = linear(&h2, p.get("head.sigma.w")?, p.get("head.sigma.b")?, k);
    for v in scales.iter_mut() {
        *v = v.exp().clamp(model.flow.sigma_min, model.flow.sigma_max);
    }
    let ones = vec![1.0; k];
    let weights = tensor::masked_softmax_rows(&logits, &ones, 1, k)?;
    let means = Tensor::new(vec![k, d], mu)?;
    let mean = mixture_mean(&weights, &means)?;
    let out = GaussianMixtureOutput {
        logits,
        weights,
        means,
        scales,
        mean,
    };
    if !out.mean.all_finite() || !out.means.all_finite() {
        return Err(Error::Numerics("gmm_head".into()));
    }
    Ok(out)
}

/// Mixture negative log-likelihood of `target` under the head output:
/// `-log Σ_k A_k N(target; μ_k, σ_k² I)`, computed as
/// `lse(α) - lse(α + log N)` so it is overflow-safe.
pub fn gmm_nll(mix: &GaussianMixtureOutput, target: &Tensor) -> Result<f64> {
    let (k, d) = (mix.means.shape()[0], mix.means.shape()[1]);
    if target.len() != d {
        return Err(Error::Shape(format!(
            "gmm_nll: target {:?} vs means {:?}",
            target.shape(),
            mix.means.shape()
        )));
    }
    let log_n = tensor::gaussian_log_density(target.data(), mix.means.data(), &mix.scales, k, d);
    let shifted: Vec<f64> = mix.logits.iter().zip(&log_n).map(|(a, l)| a + l).collect();
    let lse_joint = tensor::logsumexp_rows(&shifted, 1, k)[0];
    let lse_alpha = tensor::logsumexp_rows(&mix.logits, 1, k)[0];
    Ok(lse_alpha - lse_joint)
}

/// First-order GM-ODE sampler over an arbitrary head oracle. Starting from
/// `x1` at t = 1, each step fuses the current latent with `x1`, queries the
/// head, converts the mixture mean into a velocity, and advances by 1/T.
///
/// In `Derived` mode the update is computed as
/// `x̂ ← (1 - Δt/t) x̂ + (Δt/t) μ`, which is algebraically
/// `x̂ + Δt (μ - x̂)/t` and exact on straight-line paths: the final step has
/// t = Δt, so the coefficient on `x̂` vanishes.
pub fn gm_ode_solve_with<F>(x1: &Tensor, cfg: &SolverConfig, mut head: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<GaussianMixtureOutput>,
{
    if cfg.steps < 1 {
        return Err(Error::Domain("solver needs at least one step".into()));
    }
    let t_steps = cfg.steps;
    let dt = cfg.dt();
    let mut xhat = x1.clone();
    for i in 0..t_steps {
        let t = (t_steps - i) as f64 / t_steps as f64;
        let xbar = fuse_latent(&xhat, x1, cfg.lambda)?;
        let mix = head(&xbar, t)?;
        match cfg.velocity {
            VelocityMode::Derived => {
                let w = dt / t;
                for (x, &m) in xhat.data_mut().iter_mut().zip(mix.mean.data()) {
                    *x = (1.0 - w) * *x + w * m;
                }
            }
            VelocityMode::Literal => {
                for (x, &m) in xhat.data_mut().iter_mut().zip(mix.mean.data()) {
                    *x += dt * m;
                }
            }
        }
    }
    if !xhat.all_finite() {
        return Err(Error::Numerics("gm_ode_solve".into()));
    }
    Ok(xhat)
}

/// Solve with the trained head conditioned on the domain-aligned prior.
pub fn gm_ode_solve(
    model: &Model,
    x1: &Tensor,
    h_da: &Tensor,
    cfg: &SolverConfig,
) -> Result<Tensor> {
    gm_ode_solve_with(x1, cfg, |xbar, t| gmm_head(model, xbar, h_da, t))
}

// ── Scoring ──────────────────────────────────────────────────────────

/// Inner-product scores for an explicit candidate list.
pub fn score_candidates(xhat0: &Tensor, item_emb: &Tensor, candidates: &[u32]) -> Result<Vec<f64>> {
    let d = item_emb.shape()[1];
    if xhat0.len() != d {
        return Err(Error::Shape(format!(
            "score: state {:?} vs embeddings {:?}",
            xhat0.shape(),
            item_emb.shape()
        )));
    }
    let mut out = Vec::with_capacity(candidates.len());
    for &c in candidates {
        let row = &item_emb.data()[c as usize * d..(c as usize + 1) * d];
        out.push(xhat0.data().iter().zip(row).map(|(a, b)| a * b).sum());
    }
    Ok(out)
}

/// Score every item of one domain, sorted by descending score with ties
/// broken toward the lower item index.
pub fn score_items(
    xhat0: &Tensor,
    item_emb: &Tensor,
    vocab: &Vocab,
    domain: u16,
) -> Result<Vec<(u32, f64)>> {
    let range = vocab.domain_items(domain);
    if range.is_empty() {
        return Err(Error::EmptyDomain(domain as usize));
    }
    let candidates: Vec<u32> = range.collect();
    let scores = score_candidates(xhat0, item_emb, &candidates)?;
    let mut ranked: Vec<(u32, f64)> = candidates.into_iter().zip(scores).collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(ranked)
}

/// Rank of the positive among `1 + negatives.len()` candidates, ties counted
/// against the positive.
pub fn rank_of_positive(positive_score: f64, negative_scores: &[f64]) -> usize {
    1 + negative_scores
        .iter()
        .filter(|&&s| s >= positive_score)
        .count()
}

// ── Graph builders (training path) ───────────────────────────────────

/// Graph node ids for one head evaluation.
pub struct HeadNodes {
    pub logits: NodeId,
    pub weights: NodeId,
    pub means: NodeId,
    pub scales: NodeId,
    pub mixture_mean: NodeId,
}

pub fn interpolate_node(g: &mut Graph, x0: NodeId, x1: NodeId, t: f64) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("interpolation time {t} outside [0, 1]")));
    }
    let a = g.scalar_affine(x0, 1.0 - t, 0.0)?;
    let b = g.scalar_affine(x1, t, 0.0)?;
    g.add(a, b)
}

pub fn fuse_node(g: &mut Graph, xt: NodeId, x1: NodeId, lambda: f64) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!("lambda {lambda} outside [0, 1]")));
    }
    let a = g.scalar_affine(xt, lambda, 0.0)?;
    let b = g.scalar_affine(x1, 1.0 - lambda, 0.0)?;
    g.add(a, b)
}

impl Forward<'_, '_> {
    /// Head evaluation on the graph. `xbar` and `h_da` are `1 x d` rows.
    pub fn gmm_head_nodes(&mut self, xbar: NodeId, h_da: NodeId, t: f64) -> Result<HeadNodes> {
        let d = self.model.encoder.dim;
        let k = self.model.flow.components;
        let tenc = time_encoding(t, self.model.flow.time_enc_dim);
        let tenc = self
            .graph
            .leaf(Tensor::matrix(1, self.model.flow.time_enc_dim, tenc)?);
        let input = self.graph.concat(&[xbar, h_da, tenc])?;

        let w1 = self.p("head.w1")?;
        let b1 = self.p("head.b1")?;
        let h1 = self.graph.matmul(input, w1)?;
        let h1 = self.graph.add(h1, b1)?;
        let h1 = self.graph.gelu(h1)?;
        let w2 = self.p("head.w2")?;
        let b2 = self.p("head.b2")?;
        let h2 = self.graph.matmul(h1, w2)?;
        let h2 = self.graph.add(h2, b2)?;
        let h2 = self.graph.gelu(h2)?;

        let wa = self.p("head.alpha.w")?;
        let ba = self.p("head.alpha.b")?;
        let logits = self.graph.matmul(h2, wa)?;
        let logits = self.graph.add(logits, ba)?;

        let wm = self.p("head.mu.w")?;
        let bm = self.p("head.mu.b")?;
        let mu = self.graph.matmul(h2, wm)?;
        let mu = self.graph.add(mu, bm)?;
        let means = self.graph.reshape(mu, vec![k, d])?;

        let ws = self.p("head.sigma.w")?;
        let bs = self.p("head.sigma.b")?;
        let ls = self.graph.matmul(h2, ws)?;
        let ls = self.graph.add(ls, bs)?;
        let ls = self.graph.reshape(ls, vec![k])?;
        let es = self.graph.exp(ls)?;
        let scales = self
            .graph
            .clamp(es, self.model.flow.sigma_min, self.model.flow.sigma_max)?;

        let weights = self.graph.softmax(logits)?;
        let mixture_mean = self.graph.matmul(weights, means)?;
        Ok(HeadNodes {
            logits,
            weights,
            means,
            scales,
            mixture_mean,
        })
    }

    /// Mixture NLL node: `lse(α) - lse(α + log N(target))`.
    pub fn gmm_nll_node(&mut self, head: &HeadNodes, target: NodeId) -> Result<NodeId> {
        let k = self.model.flow.components;
        let alpha = self.graph.reshape(head.logits, vec![k])?;
        let log_n = self
            .graph
            .gaussian_log_density(target, head.means, head.scales)?;
        let joint = self.graph.add(alpha, log_n)?;
        let lse_joint = self.graph.logsumexp(joint)?;
        let lse_alpha = self.graph.logsumexp(alpha)?;
        self.graph.sub(lse_alpha, lse_joint)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EncoderConfig;
    use crate::graph::Graph;
    use crate::model::{DropoutMode, Model, ModelDims};
    use crate::tensor::LOG_TWO_PI;
    use crate::util::seeded_rng;
    use rand::Rng;

    fn toy_model(k: usize, seed: u64) -> Model {
        Model::init(
            ModelDims {
                vocab_size: 10,
                num_domains: 2,
                max_len: 8,
            },
            EncoderConfig {
                dim: 6,
                layers: 1,
                heads: 2,
                dropout: 0.0,
            },
            FlowConfig {
                components: k,
                time_enc_dim: 4,
                ..FlowConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    fn mix_from(weights: Vec<f64>, means: Tensor, scales: Vec<f64>) -> GaussianMixtureOutput {
        let logits = weights.iter().map(|w| w.ln()).collect();
        let mean = mixture_mean(&weights, &means).unwrap();
        GaussianMixtureOutput {
            logits,
            weights,
            means,
            scales,
            mean,
        }
    }

    #[test]
    fn interpolate_boundaries_are_exact() {
        let x0 = Tensor::vector(vec![0.3, -1.7, 2.2]);
        let x1 = Tensor::vector(vec![4.0, 8.0, -0.5]);
        assert_eq!(interpolate(&x0, &x1, 0.0).unwrap().data(), x0.data());
        assert_eq!(interpolate(&x0, &x1, 1.0).unwrap().data(), x1.data());
        let mid = interpolate(
            &Tensor::vector(vec![0.0, 0.0]),
            &Tensor::vector(vec![4.0, 8.0]),
            0.25,
        )
        .unwrap();
        assert_eq!(mid.data(), &[1.0, 2.0]);
        assert!(matches!(
            interpolate(&x0, &x1, 1.5),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn fuse_boundaries_are_exact() {
        let xt = Tensor::vector(vec![2.0, 0.0]);
        let x1 = Tensor::vector(vec![0.0, 2.0]);
        assert_eq!(fuse_latent(&xt, &x1, 1.0).unwrap().data(), xt.data());
        assert_eq!(fuse_latent(&xt, &x1, 0.0).unwrap().data(), x1.data());
        assert_eq!(fuse_latent(&xt, &x1, 0.5).unwrap().data(), &[1.0, 1.0]);
        assert!(matches!(
            fuse_latent(&xt, &x1, -0.1),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn flow_state_identities_hold() {
        let mut rng = seeded_rng(5);
        for _ in 0..50 {
            let x0 = Tensor::vector((0..6).map(|_| rng.random_range(-2.0..2.0)).collect());
            let x1 = Tensor::vector((0..6).map(|_| rng.random_range(-2.0..2.0)).collect());
            let t: f64 = rng.random_range(0.0..1.0);
            let lambda: f64 = rng.random_range(0.0..1.0);
            let fs = flow_state(&x0, &x1, t, lambda).unwrap();
            for j in 0..6 {
                let xt = (1.0 - t) * x0.data()[j] + t * x1.data()[j];
                assert!((fs.xt.data()[j] - xt).abs() <= 1e-12);
                let xbar = lambda * fs.xt.data()[j] + (1.0 - lambda) * x1.data()[j];
                assert!((fs.xbar.data()[j] - xbar).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn head_weights_normalize_and_scales_positive() {
        for seed in 0..5 {
            let model = toy_model(4, seed);
            let mut rng = seeded_rng(seed + 100);
            let d = model.encoder.dim;
            let xbar = Tensor::vector((0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
            let hda = Tensor::vector((0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
            let mix = gmm_head(&model, &xbar, &hda, rng.random_range(0.0..1.0)).unwrap();
            let sum: f64 = mix.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(mix.scales.iter().all(|&s| s > 0.0));
        }
    }

    #[test]
    fn single_component_weight_is_exactly_one() {
        let model = toy_model(1, 3);
        let d = model.encoder.dim;
        let xbar = Tensor::vector(vec![0.1; d]);
        let hda = Tensor::vector(vec![-0.2; d]);
        let mix = gmm_head(&model, &xbar, &hda, 0.4).unwrap();
        assert_eq!(mix.weights, vec![1.0]);
    }

    #[test]
    fn mixture_mean_weighted_sum() {
        let means = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        let mu = mixture_mean(&[0.5, 0.5], &means).unwrap();
        assert_eq!(mu.data(), &[1.0, 1.0]);
    }

    #[test]
    fn nll_of_standard_normal_at_its_mean() {
        let mix = mix_from(
            vec![1.0],
            Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(),
            vec![1.0],
        );
        let nll = gmm_nll(&mix, &Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert!((nll - LOG_TWO_PI).abs() < 1e-12);
        assert!((nll - 1.837877).abs() < 1e-6);
    }

    #[test]
    fn duplicate_components_collapse_to_single() {
        let single = mix_from(
            vec![1.0],
            Tensor::matrix(1, 3, vec![0.3, -0.1, 0.7]).unwrap(),
            vec![0.8],
        );
        let double = mix_from(
            vec![0.5, 0.5],
            Tensor::matrix(2, 3, vec![0.3, -0.1, 0.7, 0.3, -0.1, 0.7]).unwrap(),
            vec![0.8, 0.8],
        );
        let target = Tensor::vector(vec![0.5, 0.0, 0.5]);
        let a = gmm_nll(&single, &target).unwrap();
        let b = gmm_nll(&double, &target).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn worked_two_component_value() {
        // 0.5 N(0; 0, 1) + 0.5 N(0; 2, 1) -> NLL about 1.4852
        let mix = mix_from(
            vec![0.5, 0.5],
            Tensor::matrix(2, 1, vec![0.0, 2.0]).unwrap(),
            vec![1.0, 1.0],
        );
        let nll = gmm_nll(&mix, &Tensor::vector(vec![0.0])).unwrap();
        assert!((nll - 1.4852).abs() < 1e-3, "nll {nll}");
    }

    #[test]
    fn nll_matches_brute_force_density_sum() {
        let mut rng = seeded_rng(77);
        for _ in 0..40 {
            let k = rng.random_range(1..=8usize);
            let d = rng.random_range(1..=4usize);
            let weights_raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
            let z: f64 = weights_raw.iter().sum();
            let weights: Vec<f64> = weights_raw.iter().map(|w| w / z).collect();
            let means = Tensor::new(
                vec![k, d],
                (0..k * d).map(|_| rng.random_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let scales: Vec<f64> = (0..k).map(|_| rng.random_range(0.3..2.0)).collect();
            let target = Tensor::vector((0..d).map(|_| rng.random_range(-2.0..2.0)).collect());
            let mix = mix_from(weights.clone(), means.clone(), scales.clone());

            // brute force: explicit density sum
            let mut density = 0.0;
            for i in 0..k {
                let mut sq = 0.0;
                for j in 0..d {
                    let diff = target.data()[j] - means.data()[i * d + j];
                    sq += diff * diff;
                }
                let norm = (2.0 * std::f64::consts::PI).powf(d as f64 / 2.0)
                    * scales[i].powi(d as i32);
                density += weights[i] * (-sq / (2.0 * scales[i] * scales[i])).exp() / norm;
            }
            let expect = -density.ln();
            let got = gmm_nll(&mix, &target).unwrap();
            assert!((got - expect).abs() < 1e-10, "got {got}, expect {expect}");
        }
    }

    #[test]
    fn single_component_reduces_to_mse_form() {
        let mut rng = seeded_rng(13);
        for _ in 0..20 {
            let d = rng.random_range(1..=4usize);
            let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let sigma: f64 = rng.random_range(0.2..3.0);
            let target: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mix = mix_from(
                vec![1.0],
                Tensor::new(vec![1, d], mu.clone()).unwrap(),
                vec![sigma],
            );
            let got = gmm_nll(&mix, &Tensor::vector(target.clone())).unwrap();
            let sq: f64 = target
                .iter()
                .zip(&mu)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let expect = d as f64 * (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln()
                + sq / (2.0 * sigma * sigma);
            assert!((got - expect).abs() < 1e-10);
        }
    }

    fn oracle_head(x0: &Tensor) -> impl FnMut(&Tensor, f64) -> Result<GaussianMixtureOutput> + '_ {
        move |_xbar, _t| {
            let d = x0.len();
            Ok(mix_from(
                vec![1.0],
                Tensor::new(vec![1, d], x0.data().to_vec()).unwrap(),
                vec![1.0],
            ))
        }
    }

    #[test]
    fn one_step_solver_returns_mu_exactly() {
        let model = toy_model(3, 9);
        let d = model.encoder.dim;
        let mut rng = seeded_rng(8);
        let x1 = Tensor::vector((0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
        let hda = Tensor::vector((0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
        let cfg = SolverConfig {
            steps: 1,
            lambda: 0.5,
            velocity: VelocityMode::Derived,
        };
        let got = gm_ode_solve(&model, &x1, &hda, &cfg).unwrap();
        // the single head call sees xbar = fuse(x1, x1, lambda) = x1 at t = 1
        let mix = gmm_head(&model, &x1, &hda, 1.0).unwrap();
        for j in 0..d {
            assert_eq!(got.data()[j].to_bits(), mix.mean.data()[j].to_bits());
        }
    }

    #[test]
    fn oracle_head_recovers_x0_for_all_step_counts() {
        let mut rng = seeded_rng(21);
        let d = 5;
        let x0 = Tensor::vector((0..d).map(|_| rng.random_range(-2.0..2.0)).collect());
        let x1 = Tensor::vector((0..d).map(|_| rng.random_range(-2.0..2.0)).collect());
        for steps in [1usize, 2, 4, 8, 16] {
            let cfg = SolverConfig {
                steps,
                lambda: 0.5,
                velocity: VelocityMode::Derived,
            };
            let got = gm_ode_solve_with(&x1, &cfg, oracle_head(&x0)).unwrap();
            for j in 0..d {
                assert!(
                    (got.data()[j] - x0.data()[j]).abs() < 1e-9,
                    "T={steps} coord {j}"
                );
            }
        }
    }

    #[test]
    fn straight_line_consistency_between_step_counts() {
        let mut rng = seeded_rng(22);
        let d = 4;
        let x0 = Tensor::vector((0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
        let x1 = Tensor::vector((0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
        let run = |steps| {
            let cfg = SolverConfig {
                steps,
                lambda: 0.5,
                velocity: VelocityMode::Derived,
            };
            gm_ode_solve_with(&x1, &cfg, oracle_head(&x0)).unwrap()
        };
        let a = run(2);
        let b = run(8);
        for j in 0..d {
            assert!((a.data()[j] - b.data()[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn literal_velocity_mode_is_a_different_field() {
        let model = toy_model(2, 99);
        let d = model.encoder.dim;
        let x1 = Tensor::vector(vec![0.25; d]);
        let hda = Tensor::vector(vec![-0.5; d]);
        let derived = gm_ode_solve(
            &model,
            &x1,
            &hda,
            &SolverConfig {
                steps: 4,
                lambda: 0.5,
                velocity: VelocityMode::Derived,
            },
        )
        .unwrap();
        let literal = gm_ode_solve(
            &model,
            &x1,
            &hda,
            &SolverConfig {
                steps: 4,
                lambda: 0.5,
                velocity: VelocityMode::Literal,
            },
        )
        .unwrap();
        assert_ne!(derived.data(), literal.data());
    }

    #[test]
    fn timestep_draws_are_uniform() {
        let mut rng = seeded_rng(4242);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| rng.random_range(0.0..1.0)).sum::<f64>() / n as f64;
        assert!((0.497..=0.503).contains(&mean), "mean {mean}");
    }

    #[test]
    fn graph_and_plain_head_agree_bitwise() {
        let model = toy_model(3, 55);
        let d = model.encoder.dim;
        let mut rng = seeded_rng(56);
        let xbar = Tensor::vector((0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
        let hda = Tensor::vector((0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
        let t = 0.37;

        let plain = gmm_head(&model, &xbar, &hda, t).unwrap();

        let mut g = Graph::new();
        let bound = g.bind(&model.params);
        let mut fw = Forward::new(&mut g, &bound, &model, DropoutMode::Off);
        let xb = fw.graph.leaf(Tensor::matrix(1, d, xbar.data().to_vec()).unwrap());
        let hd = fw.graph.leaf(Tensor::matrix(1, d, hda.data().to_vec()).unwrap());
        let head = fw.gmm_head_nodes(xb, hd, t).unwrap();

        let eq_bits = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        };
        assert!(eq_bits(fw.graph.value(head.logits).data(), &plain.logits));
        assert!(eq_bits(fw.graph.value(head.weights).data(), &plain.weights));
        assert!(eq_bits(fw.graph.value(head.means).data(), plain.means.data()));
        assert!(eq_bits(fw.graph.value(head.scales).data(), &plain.scales));
        assert!(eq_bits(
            fw.graph.value(head.mixture_mean).data(),
            plain.mean.data()
        ));

        // and the NLL route agrees too
        let target = Tensor::vector((0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
        let tgt = fw.graph.leaf(Tensor::matrix(1, d, target.data().to_vec()).unwrap());
        let nll_node = fw.gmm_nll_node(&head, tgt).unwrap();
        let plain_nll = gmm_nll(&plain, &target).unwrap();
        assert_eq!(
            fw.graph.value(nll_node).item().to_bits(),
            plain_nll.to_bits()
        );
    }

    #[test]
    fn scoring_ranks_matching_candidate_first() {
        // orthonormal embeddings: candidate 1 matches xhat0 exactly
        let emb = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let xhat = Tensor::vector(vec![0.0, 1.0, 0.0]);
        let scores = score_candidates(&xhat, &emb, &[0, 1, 2]).unwrap();
        assert_eq!(scores, vec![0.0, 1.0, 0.0]);
        // positive scaling leaves the ranking unchanged
        let scaled = Tensor::vector(vec![0.0, 7.5, 0.0]);
        let s2 = score_candidates(&scaled, &emb, &[0, 1, 2]).unwrap();
        let order = |s: &[f64]| {
            let mut idx: Vec<usize> = (0..s.len()).collect();
            idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
            idx
        };
        assert_eq!(order(&scores), order(&s2));
    }

    #[test]
    fn ties_break_toward_lower_index_in_top_k() {
        use crate::data::InteractionRecord;
        let records: Vec<InteractionRecord> = (0..3)
            .map(|i| InteractionRecord {
                user_id: "u".into(),
                item_id: format!("i{i}"),
                domain_id: 0,
                timestamp: i as i64,
            })
            .collect();
        let vocab = Vocab::from_records(&records).unwrap();
        // identical embeddings for items 1 and 2
        let emb = Tensor::matrix(3, 2, vec![0.1, 0.0, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let xhat = Tensor::vector(vec![1.0, 1.0]);
        let ranked = score_items(&xhat, &emb, &vocab, 0).unwrap();
        assert_eq!(ranked[0].0, 1);
        assert_eq!(ranked[1].0, 2);
    }

    #[test]
    fn pessimistic_rank_for_positive() {
        assert_eq!(rank_of_positive(2.0, &[1.0, 0.5, 0.1]), 1);
        assert_eq!(rank_of_positive(0.0, &[1.0, 0.5, 0.1]), 4);
        assert_eq!(rank_of_positive(0.5, &[1.0, 0.5, 0.1]), 3); // tie counts against
    }
}
