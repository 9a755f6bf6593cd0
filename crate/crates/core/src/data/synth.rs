//! Synthetic multi-domain interaction generator.
//!
//! Users walk a Markov chain over domains; within a domain, items are drawn
//! from a blend of a per-user intent affinity (softmax of intent dot
//! products) and Zipf popularity. Per-user RNG streams are derived
//! independently from the root seed, so generation order never matters.

use serde::{Deserialize, Serialize};

use crate::data::ingest::InteractionRecord;
use crate::error::{Error, Result};
use crate::util::{categorical, derive_seed, normal, seeded_rng};

fn default_intent_weight() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_domains: usize,
    pub items_per_domain: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    /// D x D row-stochastic domain-transition matrix.
    pub transition: Vec<Vec<f64>>,
    /// Per-domain Zipf popularity exponent.
    pub zipf_exponent: Vec<f64>,
    /// Dimension of the latent intent vectors.
    pub intent_dim: usize,
    /// Mixing weight of the intent affinity vs. Zipf popularity.
    #[serde(default = "default_intent_weight")]
    pub intent_weight: f64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 || self.num_domains == 0 || self.items_per_domain == 0 {
            return Err(Error::Config("synth: counts must be positive".into()));
        }
        if self.seq_len_min == 0 || self.seq_len_min > self.seq_len_max {
            return Err(Error::Config(format!(
                "synth: bad sequence-length range [{}, {}]",
                self.seq_len_min, self.seq_len_max
            )));
        }
        if self.transition.len() != self.num_domains {
            return Err(Error::Config(format!(
                "synth: transition matrix has {} rows, expected {}",
                self.transition.len(),
                self.num_domains
            )));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != self.num_domains {
                return Err(Error::Config(format!(
                    "synth: transition row {i} has {} entries, expected {}",
                    row.len(),
                    self.num_domains
                )));
            }
            if row.iter().any(|&p| p < 0.0) {
                return Err(Error::Config(format!(
                    "synth: transition row {i} has a negative entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "synth: transition row {i} sums to {sum}, expected 1"
                )));
            }
        }
        if self.zipf_exponent.len() != self.num_domains {
            return Err(Error::Config(format!(
                "synth: zipf_exponent has {} entries, expected {}",
                self.zipf_exponent.len(),
                self.num_domains
            )));
        }
        if self.intent_dim == 0 {
            return Err(Error::Config("synth: intent_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.intent_weight) {
            return Err(Error::Config(format!(
                "synth: intent_weight {} outside [0, 1]",
                self.intent_weight
            )));
        }
        Ok(())
    }
}

pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<Vec<InteractionRecord>> {
    cfg.validate()?;
    let d = cfg.num_domains;
    let n = cfg.items_per_domain;

    // item intent vectors, one stream per domain
    let mut item_intents = Vec::with_capacity(d);
    for dom in 0..d {
        let mut rng = seeded_rng(derive_seed(seed, "synth-items", dom as u64));
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            rows.push((0..cfg.intent_dim).map(|_| normal(&mut rng)).collect::<Vec<f64>>());
        }
        item_intents.push(rows);
    }

    // zipf popularity by within-domain index (index 0 most popular)
    let zipf: Vec<Vec<f64>> = (0..d)
        .map(|dom| {
            let s = cfg.zipf_exponent[dom];
            let raw: Vec<f64> = (0..n).map(|i| ((i + 1) as f64).powf(-s)).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|w| w / total).collect()
        })
        .collect();

    let mut records = Vec::new();
    let mut probs = vec![0.0; n];
    for u in 0..cfg.num_users {
        let mut rng = seeded_rng(derive_seed(seed, "synth-user", u as u64));
        let intent: Vec<f64> = (0..cfg.intent_dim).map(|_| normal(&mut rng)).collect();
        let len = rng.random_range(cfg.seq_len_min..=cfg.seq_len_max);
        let mut dom = rng.random_range(0..d);
        for step in 0..len {
            if step > 0 {
                dom = categorical(&mut rng, &cfg.transition[dom]);
            }
            // blend: w * softmax(u . v) + (1 - w) * zipf
            let logits: Vec<f64> = item_intents[dom]
                .iter()
                .map(|v| v.iter().zip(&intent).map(|(a, b)| a * b).sum())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &l) in probs.iter_mut().zip(&logits) {
                *p = (l - max).exp();
                z += *p;
            }
            for (i, p) in probs.iter_mut().enumerate() {
                *p = cfg.intent_weight * (*p / z) + (1.0 - cfg.intent_weight) * zipf[dom][i];
            }
            let item = categorical(&mut rng, &probs);
            records.push(InteractionRecord {
                user_id: format!("u{u:05}"),
                item_id: format!("d{dom}_i{item:04}"),
                domain_id: dom as u16,
                timestamp: step as i64,
            });
        }
    }
    Ok(records)
}

use rand::Rng;
