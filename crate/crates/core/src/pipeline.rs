//! End-to-end orchestration: the five pipeline stages behind the CLI and
//! the Python bindings.
//!
//! Split directory layout:
//!   manifest.json  — counts, seed, config hash, user ids, vocabulary
//!   split.bin      — binary-packed instances (layout below)
//!
//! split.bin (little-endian):
//!   magic b"FLOWSPL1", version u32 = 1
//!   num_negatives u32, seed u64
//!   train count u32, then per instance:
//!     user u32, len u32, items u32*len, domains u16*len,
//!     target u32, target_domain u16
//!   validation count u32, test count u32, then per eval instance:
//!     user u32, len u32, items u32*len, domains u16*len,
//!     positive u32, target_domain u16, negatives u32 count + u32 each

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{
    build_sequences, filter_core, ingest, leave_one_out_split, records_to_csv, synth_generate,
    EvalInstance, IngestFormat, SplitConfig, SplitDataset, TrainInstance, Vocab,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    compute_report, evaluate_instances, grouping_report, timing_report, MetricsReport, RankedList,
};
use crate::gmflow::SolverConfig;
use crate::model::{Model, ModelDims};
use crate::training::fit;

pub struct PreparedData {
    pub vocab: Vocab,
    pub split: SplitDataset,
}

// ── Synthesis ────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub config_hash: String,
    pub num_records: usize,
    pub num_users: usize,
    pub num_domains: usize,
}

/// Generate a synthetic interaction log: `interactions.csv` plus a JSON
/// manifest, both under `out_dir`.
pub fn run_synth(cfg: &RunConfig, out_dir: &Path) -> Result<SynthManifest> {
    let synth = cfg
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config("missing [synth] section".into()))?;
    let records = synth_generate(synth, cfg.seed)?;
    std::fs::create_dir_all(out_dir)?;
    records_to_csv(&records, &out_dir.join("interactions.csv"))?;
    let manifest = SynthManifest {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        num_records: records.len(),
        num_users: synth.num_users,
        num_domains: synth.num_domains,
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

// ── Preprocessing ────────────────────────────────────────────────────

/// Ingest the raw log, run the k-core fixed point, build sequences, and
/// split.
pub fn prepare_from_raw(cfg: &RunConfig, raw_path: &Path) -> Result<PreparedData> {
    let format = match raw_path.extension().and_then(|e| e.to_str()) {
        Some("tsv") => IngestFormat::Tsv,
        _ => IngestFormat::Csv,
    };
    let (records, stats) = ingest(raw_path, format)?;
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if stats.malformed > 0 {
        eprintln!(
            "warning: skipped {} malformed rows in {}",
            stats.malformed,
            raw_path.display()
        );
    }
    let (records, vocab) = filter_core(records, cfg.data.user_core, cfg.data.item_core)?;
    let sequences = build_sequences(&records, &vocab, cfg.data.max_len)?;
    let split_cfg = SplitConfig {
        max_len: cfg.data.max_len,
        num_negatives: cfg.data.num_negatives,
        max_windows_per_user: cfg.data.max_windows_per_user,
    };
    let split = leave_one_out_split(&sequences, &vocab, &split_cfg, cfg.seed)?;
    if split.skipped_short > 0 {
        eprintln!(
            "warning: excluded {} sequences shorter than 3",
            split.skipped_short
        );
    }
    Ok(PreparedData { vocab, split })
}

/// Resolve the data source: an explicit split directory, or a raw log from
/// the config (preprocessing runs inline).
pub fn load_or_prepare(cfg: &RunConfig, split_dir: Option<&Path>) -> Result<PreparedData> {
    match split_dir {
        Some(dir) => load_split(dir),
        None => {
            let raw = cfg
                .data
                .raw_path
                .as_ref()
                .ok_or_else(|| Error::Config("no data.raw_path and no split directory".into()))?;
            prepare_from_raw(cfg, Path::new(raw))
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitCounts {
    users: usize,
    train: usize,
    validation: usize,
    test: usize,
    skipped_short: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitManifest {
    seed: u64,
    config_hash: String,
    num_negatives: usize,
    counts: SplitCounts,
    users: Vec<String>,
    /// Item ids per domain, in global-index order.
    vocab: Vec<Vec<String>>,
}

const SPLIT_MAGIC: &[u8; 8] = b"FLOWSPL1";

pub fn save_split(dir: &Path, data: &PreparedData, config_hash: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let vocab_domains: Vec<Vec<String>> = (0..data.vocab.num_domains)
        .map(|d| {
            data.vocab
                .domain_items(d as u16)
                .map(|g| data.vocab.item_ids[g as usize].clone())
                .collect()
        })
        .collect();
    let manifest = SplitManifest {
        seed: data.split.seed,
        config_hash: config_hash.to_string(),
        num_negatives: data.split.num_negatives,
        counts: SplitCounts {
            users: data.split.users.len(),
            train: data.split.train.len(),
            validation: data.split.validation.len(),
            test: data.split.test.len(),
            skipped_short: data.split.skipped_short,
        },
        users: data.split.users.clone(),
        vocab: vocab_domains,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;

    let mut w = BufWriter::new(File::create(dir.join("split.bin"))?);
    w.write_all(SPLIT_MAGIC)?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&(data.split.num_negatives as u32).to_le_bytes())?;
    w.write_all(&data.split.seed.to_le_bytes())?;
    w.write_all(&(data.split.train.len() as u32).to_le_bytes())?;
    for inst in &data.split.train {
        write_prefix(&mut w, inst.user, &inst.items, &inst.domains)?;
        w.write_all(&inst.target.to_le_bytes())?;
        w.write_all(&inst.target_domain.to_le_bytes())?;
    }
    w.write_all(&(data.split.validation.len() as u32).to_le_bytes())?;
    w.write_all(&(data.split.test.len() as u32).to_le_bytes())?;
    for inst in data.split.validation.iter().chain(&data.split.test) {
        write_prefix(&mut w, inst.user, &inst.items, &inst.domains)?;
        w.write_all(&inst.positive.to_le_bytes())?;
        w.write_all(&inst.target_domain.to_le_bytes())?;
        w.write_all(&(inst.negatives.len() as u32).to_le_bytes())?;
        for &n in &inst.negatives {
            w.write_all(&n.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_split(dir: &Path) -> Result<PreparedData> {
    let manifest: SplitManifest = read_json(&dir.join("manifest.json"))?;
    let vocab = Vocab::from_domain_items(&manifest.vocab)?;

    let mut r = BufReader::new(File::open(dir.join("split.bin"))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != SPLIT_MAGIC {
        return Err(Error::Format(format!("bad split file in {}", dir.display())));
    }
    let version = read_u32(&mut r)?;
    if version != 1 {
        return Err(Error::Format(format!("unsupported split version {version}")));
    }
    let num_negatives = read_u32(&mut r)? as usize;
    let seed = read_u64(&mut r)?;
    let train_count = read_u32(&mut r)? as usize;
    let mut train = Vec::with_capacity(train_count);
    for _ in 0..train_count {
        let (user, items, domains) = read_prefix(&mut r)?;
        let target = read_u32(&mut r)?;
        let target_domain = read_u16(&mut r)?;
        train.push(TrainInstance {
            user,
            items,
            domains,
            target,
            target_domain,
        });
    }
    let val_count = read_u32(&mut r)? as usize;
    let test_count = read_u32(&mut r)? as usize;
    let mut eval = Vec::with_capacity(val_count + test_count);
    for _ in 0..val_count + test_count {
        let (user, items, domains) = read_prefix(&mut r)?;
        let positive = read_u32(&mut r)?;
        let target_domain = read_u16(&mut r)?;
        let neg_count = read_u32(&mut r)? as usize;
        let mut negatives = Vec::with_capacity(neg_count);
        for _ in 0..neg_count {
            negatives.push(read_u32(&mut r)?);
        }
        eval.push(EvalInstance {
            user,
            items,
            domains,
            positive,
            target_domain,
            negatives,
        });
    }
    let test = eval.split_off(val_count);
    Ok(PreparedData {
        vocab,
        split: SplitDataset {
            users: manifest.users,
            train,
            validation: eval,
            test,
            num_negatives,
            seed,
            skipped_short: manifest.counts.skipped_short,
        },
    })
}

// ── Training ─────────────────────────────────────────────────────────

pub fn model_from_config(cfg: &RunConfig, vocab: &Vocab) -> Result<Model> {
    Model::init(
        ModelDims {
            vocab_size: vocab.num_items(),
            num_domains: vocab.num_domains,
            max_len: cfg.data.max_len,
        },
        cfg.encoder.clone(),
        cfg.flow.clone(),
        cfg.seed,
    )
}

pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub report_path: PathBuf,
    pub report: MetricsReport,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Train, keep the best checkpoint by validation NDCG@10, and evaluate it
/// on the test split. Writes `model.ckpt`, `train_log.csv`, `report.json`.
pub fn run_train(cfg: &RunConfig, data: &PreparedData, out_dir: &Path) -> Result<TrainArtifacts> {
    std::fs::create_dir_all(out_dir)?;
    let mut model = model_from_config(cfg, &data.vocab)?;
    let solver = SolverConfig::from_flow(&cfg.flow);
    let threads = cfg.threads.max(1);

    let outcome = fit(
        &mut model,
        &data.split,
        &data.vocab,
        &cfg.loss,
        &cfg.train,
        &solver,
        threads,
        cfg.seed,
    )?;
    model.params = outcome.best_params.clone();

    let checkpoint_path = out_dir.join("model.ckpt");
    checkpoint::save(&model.params, &checkpoint_path)?;

    let log_path = out_dir.join("train_log.csv");
    {
        let mut w = BufWriter::new(File::create(&log_path)?);
        writeln!(w, "epoch,loss_rec,loss_prior,loss_gmm,val_ndcg10,seconds")?;
        for row in &outcome.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                row.epoch, row.loss_rec, row.loss_prior, row.loss_gmm, row.val_ndcg10, row.seconds
            )?;
        }
    }

    let ranks = evaluate_instances(&model, &data.split.test, &solver, threads)?;
    let mut report = compute_report(&ranks, data.vocab.num_domains, cfg.seed, &cfg.hash())?;
    report.groupings = Some(grouping_report(&data.split.test, &ranks, &cfg.eval)?);
    let report_path = out_dir.join("report.json");
    write_json(&report_path, &report)?;

    Ok(TrainArtifacts {
        checkpoint: checkpoint_path,
        log: log_path,
        report_path,
        report,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.rows.len(),
    })
}

// ── Evaluation ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Default)]
pub struct EvalFlags {
    pub group: bool,
    pub few_shot: bool,
    pub timing: bool,
    pub steps: Option<usize>,
    pub dump_ranks: Option<PathBuf>,
}

pub fn load_model(cfg: &RunConfig, vocab: &Vocab, checkpoint: &Path) -> Result<Model> {
    let mut model = model_from_config(cfg, vocab)?;
    model.load_params(checkpoint::load(checkpoint)?)?;
    Ok(model)
}

/// Evaluate a model on the test split with the requested report sections.
pub fn run_eval(
    cfg: &RunConfig,
    model: &Model,
    data: &PreparedData,
    flags: &EvalFlags,
) -> Result<MetricsReport> {
    let mut solver = SolverConfig::from_flow(&cfg.flow);
    if let Some(steps) = flags.steps {
        if steps == 0 {
            return Err(Error::Config("--steps must be >= 1".into()));
        }
        solver.steps = steps;
    }
    let threads = cfg.threads.max(1);
    let ranks = evaluate_instances(model, &data.split.test, &solver, threads)?;
    let mut report = compute_report(&ranks, data.vocab.num_domains, cfg.seed, &cfg.hash())?;
    if flags.group || flags.few_shot {
        report.groupings = Some(grouping_report(&data.split.test, &ranks, &cfg.eval)?);
    }
    if flags.timing {
        report.timing = Some(timing_report(
            model,
            &data.split,
            &data.vocab,
            &cfg.loss,
            &cfg.train,
            &solver,
            &[1, solver.steps],
            cfg.eval.timing_runs,
        )?);
    }
    if let Some(path) = &flags.dump_ranks {
        dump_ranks(path, &ranks)?;
    }
    Ok(report)
}

/// Per-instance ranks as CSV `instance_id,domain,rank`.
pub fn dump_ranks(path: &Path, ranks: &[RankedList]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "instance_id,domain,rank")?;
    for r in ranks {
        writeln!(w, "{},{},{}", r.instance, r.domain, r.rank)?;
    }
    w.flush()?;
    Ok(())
}

// ── Small IO helpers ─────────────────────────────────────────────────

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path)?;
    serde_json::from_str(&s).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_prefix(w: &mut impl Write, user: u32, items: &[u32], domains: &[u16]) -> Result<()> {
    w.write_all(&user.to_le_bytes())?;
    w.write_all(&(items.len() as u32).to_le_bytes())?;
    for &i in items {
        w.write_all(&i.to_le_bytes())?;
    }
    for &d in domains {
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

fn read_prefix(r: &mut impl Read) -> Result<(u32, Vec<u32>, Vec<u16>)> {
    let user = read_u32(r)?;
    let len = read_u32(r)? as usize;
    let mut items = Vec::with_capacity(len);
    for _ in 0..len {
        items.push(read_u32(r)?);
    }
    let mut domains = Vec::with_capacity(len);
    for _ in 0..len {
        domains.push(read_u16(r)?);
    }
    Ok((user, items, domains))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
