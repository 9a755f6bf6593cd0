//! Ranking evaluation: candidate-list ranking, HR@K / NDCG@K, grouping
//! analyses, and the wall-clock timing harness.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;
use crate::data::{EvalInstance, SplitDataset, Vocab};
use crate::encoder::{build_di_mask, build_ds_mask};
use crate::error::{Error, Result};
use crate::gmflow::{gm_ode_solve, rank_of_positive, score_candidates, SolverConfig};
use crate::graph::Graph;
use crate::model::{DropoutMode, Forward, Model};

/// Outcome of ranking one evaluation instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedList {
    pub instance: usize,
    pub user: u32,
    pub domain: u16,
    /// 1-based rank of the positive among `candidates` items, ties resolved
    /// against the positive.
    pub rank: usize,
    pub candidates: usize,
}

/// Rank a single instance: encode, solve the reverse flow, score.
pub fn evaluate_instance(
    model: &Model,
    instance_index: usize,
    inst: &EvalInstance,
    solver: &SolverConfig,
) -> Result<RankedList> {
    let mut out = evaluate_chunk(model, instance_index, std::slice::from_ref(inst), solver)?;
    Ok(out.pop().unwrap())
}

/// Rank a block of instances sharing one graph (parameters bound once).
fn evaluate_chunk(
    model: &Model,
    base_index: usize,
    chunk: &[EvalInstance],
    solver: &SolverConfig,
) -> Result<Vec<RankedList>> {
    let mut g = Graph::new();
    let bound = g.bind(&model.params);
    let item_emb = model.params.get("emb.item")?;
    let mut out = Vec::with_capacity(chunk.len());
    for (offset, inst) in chunk.iter().enumerate() {
        let mut fw = Forward::new(&mut g, &bound, model, DropoutMode::Off);
        let m = inst.items.len();
        let x = fw.embed_sequence(&inst.items, &inst.domains)?;
        let h_di = fw.encode(x, &build_di_mask(m))?;
        let h_ds = fw.encode(x, &build_ds_mask(&inst.domains))?;
        let x1 = fw.last_state(h_di)?;
        let h_da = fw.domain_aligned_prior(h_ds, &inst.domains, inst.target_domain)?;
        let x1 = g.value(x1).clone();
        let h_da = g.value(h_da).clone();
        let xhat0 = gm_ode_solve(model, &x1, &h_da, solver)?;
        let pos_score = score_candidates(&xhat0, item_emb, &[inst.positive])?[0];
        let neg_scores = score_candidates(&xhat0, item_emb, &inst.negatives)?;
        out.push(RankedList {
            instance: base_index + offset,
            user: inst.user,
            domain: inst.target_domain,
            rank: rank_of_positive(pos_score, &neg_scores),
            candidates: 1 + inst.negatives.len(),
        });
    }
    Ok(out)
}

const EVAL_CHUNK: usize = 256;

/// Rank every instance. With `threads > 1`, chunks are evaluated in
/// parallel against read-only parameters; results keep instance order, so
/// downstream metric sums are bitwise reproducible.
pub fn evaluate_instances(
    model: &Model,
    instances: &[EvalInstance],
    solver: &SolverConfig,
    threads: usize,
) -> Result<Vec<RankedList>> {
    if instances.is_empty() {
        return Err(Error::EmptyEval);
    }
    let chunks: Vec<(usize, &[EvalInstance])> = instances
        .chunks(EVAL_CHUNK)
        .enumerate()
        .map(|(i, c)| (i * EVAL_CHUNK, c))
        .collect();
    let results: Vec<Vec<RankedList>> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            chunks
                .par_iter()
                .map(|(base, c)| evaluate_chunk(model, *base, c, solver))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        chunks
            .iter()
            .map(|(base, c)| evaluate_chunk(model, *base, c, solver))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(results.into_iter().flatten().collect())
}

// ── Metrics ──────────────────────────────────────────────────────────

/// Fraction of instances ranked within the top K.
pub fn hit_rate(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptyEval);
    }
    if k == 0 {
        return Err(Error::Domain("hit_rate: K must be >= 1".into()));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Single-relevant-item NDCG@K for one rank.
pub fn instance_ndcg(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Mean NDCG@K over instances; with one relevant item the ideal DCG is 1.
pub fn ndcg(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptyEval);
    }
    if k == 0 {
        return Err(Error::Domain("ndcg: K must be >= 1".into()));
    }
    Ok(ranks.iter().map(|&r| instance_ndcg(r, k)).sum::<f64>() / ranks.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub domain: u16,
    pub instances: usize,
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bucket {
    pub label: String,
    pub size: usize,
    /// Mean NDCG@10 of the bucket; absent when the bucket is empty.
    pub ndcg10: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupingReport {
    pub target_transition: Vec<Bucket>,
    pub transition_rate: Vec<Bucket>,
    pub domain_count: Vec<Bucket>,
    pub few_shot: Vec<Bucket>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepTiming {
    pub solver_steps: usize,
    pub seconds_per_batch: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingReport {
    pub runs: usize,
    pub batch_size: usize,
    pub train_epoch_seconds: f64,
    pub inference: Vec<StepTiming>,
}

/// Full evaluation report; serialized as JSON by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub config_hash: String,
    pub num_instances: usize,
    pub candidates_per_instance: usize,
    pub per_domain: Vec<DomainMetrics>,
    /// Unweighted mean of per-domain NDCG@10 over domains with instances.
    pub group_ndcg10: f64,
    pub overall_ndcg10: f64,
    pub overall_hr10: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub groupings: Option<GroupingReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingReport>,
}

/// Per-domain and group metrics from ranked instances.
pub fn compute_report(
    ranks: &[RankedList],
    num_domains: usize,
    seed: u64,
    config_hash: &str,
) -> Result<MetricsReport> {
    if ranks.is_empty() {
        return Err(Error::EmptyEval);
    }
    let mut per_domain = Vec::new();
    let mut group_sum = 0.0;
    let mut group_n = 0usize;
    for d in 0..num_domains {
        let rs: Vec<usize> = ranks
            .iter()
            .filter(|r| r.domain as usize == d)
            .map(|r| r.rank)
            .collect();
        if rs.is_empty() {
            continue;
        }
        let m = DomainMetrics {
            domain: d as u16,
            instances: rs.len(),
            hr5: hit_rate(&rs, 5)?,
            hr10: hit_rate(&rs, 10)?,
            ndcg5: ndcg(&rs, 5)?,
            ndcg10: ndcg(&rs, 10)?,
        };
        group_sum += m.ndcg10;
        group_n += 1;
        per_domain.push(m);
    }
    let all: Vec<usize> = ranks.iter().map(|r| r.rank).collect();
    Ok(MetricsReport {
        seed,
        config_hash: config_hash.to_string(),
        num_instances: ranks.len(),
        candidates_per_instance: ranks[0].candidates,
        per_domain,
        group_ndcg10: group_sum / group_n as f64,
        overall_ndcg10: ndcg(&all, 10)?,
        overall_hr10: hit_rate(&all, 10)?,
        groupings: None,
        timing: None,
    })
}

// ── Grouping analyses ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKind {
    /// Last prefix item's domain differs from the target domain.
    TargetTransition,
    /// Fraction of adjacent prefix pairs that change domain.
    TransitionRate,
    /// Distinct domains in the prefix.
    DomainCount,
    /// Fewer than `threshold` in-domain interactions in the prefix.
    FewShot,
}

#[derive(Debug, Clone)]
pub struct GroupSpec {
    pub kind: GroupKind,
    pub transition_low: f64,
    pub transition_high: f64,
    pub few_shot_threshold: usize,
}

impl GroupSpec {
    pub fn new(kind: GroupKind, cfg: &EvalConfig) -> Self {
        GroupSpec {
            kind,
            transition_low: cfg.transition_low,
            transition_high: cfg.transition_high,
            few_shot_threshold: cfg.few_shot_threshold,
        }
    }
}

/// Fraction of adjacent pairs whose domains differ; 0 for single-item
/// sequences.
pub fn transition_rate(domains: &[u16]) -> f64 {
    if domains.len() < 2 {
        return 0.0;
    }
    let changes = domains.windows(2).filter(|w| w[0] != w[1]).count();
    changes as f64 / (domains.len() - 1) as f64
}

fn bucket_labels(spec: &GroupSpec) -> Vec<String> {
    match spec.kind {
        GroupKind::TargetTransition => vec!["w/o transition".into(), "w/ transition".into()],
        GroupKind::TransitionRate => vec!["low".into(), "mid".into(), "high".into()],
        GroupKind::DomainCount => vec!["1".into(), "2".into(), "3".into(), "4+".into()],
        GroupKind::FewShot => vec!["few-shot".into(), "many-shot".into()],
    }
}

fn bucket_of(inst: &EvalInstance, spec: &GroupSpec) -> usize {
    match spec.kind {
        GroupKind::TargetTransition => {
            let last = *inst.domains.last().expect("non-empty prefix");
            usize::from(last != inst.target_domain)
        }
        GroupKind::TransitionRate => {
            let r = transition_rate(&inst.domains);
            if r < spec.transition_low {
                0
            } else if r < spec.transition_high {
                1
            } else {
                2
            }
        }
        GroupKind::DomainCount => {
            let mut seen = std::collections::BTreeSet::new();
            for &d in &inst.domains {
                seen.insert(d);
            }
            match seen.len() {
                1 => 0,
                2 => 1,
                3 => 2,
                _ => 3,
            }
        }
        GroupKind::FewShot => {
            let in_domain = inst
                .domains
                .iter()
                .filter(|&&d| d == inst.target_domain)
                .count();
            usize::from(in_domain >= spec.few_shot_threshold)
        }
    }
}

/// Bucketed NDCG@10. Buckets partition the instances: sizes always sum to
/// the instance count.
pub fn group_metrics(
    instances: &[EvalInstance],
    ranks: &[RankedList],
    spec: &GroupSpec,
) -> Result<Vec<Bucket>> {
    if instances.len() != ranks.len() {
        return Err(Error::Shape(format!(
            "group_metrics: {} instances vs {} ranks",
            instances.len(),
            ranks.len()
        )));
    }
    let labels = bucket_labels(spec);
    let mut sums = vec![0.0; labels.len()];
    let mut counts = vec![0usize; labels.len()];
    for (inst, rank) in instances.iter().zip(ranks) {
        let b = bucket_of(inst, spec);
        sums[b] += instance_ndcg(rank.rank, 10);
        counts[b] += 1;
    }
    Ok(labels
        .into_iter()
        .zip(sums)
        .zip(counts)
        .map(|((label, sum), size)| Bucket {
            label,
            size,
            ndcg10: (size > 0).then(|| sum / size as f64),
        })
        .collect())
}

pub fn grouping_report(
    instances: &[EvalInstance],
    ranks: &[RankedList],
    cfg: &EvalConfig,
) -> Result<GroupingReport> {
    Ok(GroupingReport {
        target_transition: group_metrics(
            instances,
            ranks,
            &GroupSpec::new(GroupKind::TargetTransition, cfg),
        )?,
        transition_rate: group_metrics(
            instances,
            ranks,
            &GroupSpec::new(GroupKind::TransitionRate, cfg),
        )?,
        domain_count: group_metrics(
            instances,
            ranks,
            &GroupSpec::new(GroupKind::DomainCount, cfg),
        )?,
        few_shot: group_metrics(instances, ranks, &GroupSpec::new(GroupKind::FewShot, cfg))?,
    })
}

/// Per-domain popularity baseline: candidates scored by how often the item
/// occurs as a training target. Shares the pessimistic tie rule with the
/// model path, so popular-but-wrong ties never flatter the baseline.
pub fn popularity_ranks(
    train: &[crate::data::TrainInstance],
    instances: &[EvalInstance],
    vocab: &Vocab,
) -> Result<Vec<RankedList>> {
    if instances.is_empty() {
        return Err(Error::EmptyEval);
    }
    let mut counts = vec![0u32; vocab.num_items()];
    for inst in train {
        counts[inst.target as usize] += 1;
    }
    Ok(instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let pos = counts[inst.positive as usize] as f64;
            let negs: Vec<f64> = inst
                .negatives
                .iter()
                .map(|&n| counts[n as usize] as f64)
                .collect();
            RankedList {
                instance: i,
                user: inst.user,
                domain: inst.target_domain,
                rank: rank_of_positive(pos, &negs),
                candidates: 1 + inst.negatives.len(),
            }
        })
        .collect())
}

// ── Timing harness ───────────────────────────────────────────────────

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

/// Wall-clock medians: one training epoch (on a scratch copy of the model)
/// and per-batch inference at each requested solver step count.
pub fn timing_report(
    model: &Model,
    split: &SplitDataset,
    vocab: &Vocab,
    weights: &crate::config::LossWeights,
    train_cfg: &crate::config::TrainConfig,
    base_solver: &SolverConfig,
    solver_steps: &[usize],
    runs: usize,
) -> Result<TimingReport> {
    if split.test.is_empty() {
        return Err(Error::EmptyEval);
    }
    let runs = runs.max(3);

    let mut epoch_times = Vec::with_capacity(runs);
    for run in 0..runs {
        let mut scratch = model.clone();
        let mut opt = crate::training::Adam::new(&scratch.params);
        let start = std::time::Instant::now();
        crate::training::train_epoch(
            &mut scratch,
            &mut opt,
            &split.train,
            vocab,
            weights,
            train_cfg,
            run,
            split.seed,
        )?;
        epoch_times.push(start.elapsed().as_secs_f64());
    }

    let n_batches = split.test.len().div_ceil(train_cfg.batch_size).max(1);
    let mut inference = Vec::new();
    for &steps in solver_steps {
        let solver = SolverConfig {
            steps,
            ..*base_solver
        };
        let mut times = Vec::with_capacity(runs);
        for _ in 0..runs {
            let start = std::time::Instant::now();
            evaluate_instances(model, &split.test, &solver, 1)?;
            times.push(start.elapsed().as_secs_f64() / n_batches as f64);
        }
        inference.push(StepTiming {
            solver_steps: steps,
            seconds_per_batch: median(times),
        });
    }

    Ok(TimingReport {
        runs,
        batch_size: train_cfg.batch_size,
        train_epoch_seconds: median(epoch_times),
        inference,
    })
}
