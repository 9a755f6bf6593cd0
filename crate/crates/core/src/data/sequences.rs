//! Per-user sequences and the leave-one-out split.

use std::collections::BTreeMap;

use rand::Rng;

use crate::data::ingest::InteractionRecord;
use crate::data::vocab::Vocab;
use crate::error::{Error, Result};
use crate::util::{derive_seed, seeded_rng};

/// A time-ordered multi-domain interaction sequence for one user.
/// `items[m]` is a global vocabulary index, `domains[m]` its domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user_id: String,
    pub items: Vec<u32>,
    pub domains: Vec<u16>,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// One training window: predict `target` (in `target_domain`) from the
/// preceding `items`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainInstance {
    pub user: u32,
    pub items: Vec<u32>,
    pub domains: Vec<u16>,
    pub target: u32,
    pub target_domain: u16,
}

/// One ranking instance: the positive plus same-domain negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalInstance {
    pub user: u32,
    pub items: Vec<u32>,
    pub domains: Vec<u16>,
    pub positive: u32,
    pub target_domain: u16,
    pub negatives: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct SplitDataset {
    /// Dense user index → user id, for all users that produced instances.
    pub users: Vec<String>,
    pub train: Vec<TrainInstance>,
    pub validation: Vec<EvalInstance>,
    pub test: Vec<EvalInstance>,
    pub num_negatives: usize,
    pub seed: u64,
    /// Sequences shorter than 3, excluded with a warning.
    pub skipped_short: usize,
}

#[derive(Debug, Clone)]
pub struct SplitConfig {
    pub max_len: usize,
    pub num_negatives: usize,
    /// Keep only the most recent `n` training windows per user (0 = all).
    pub max_windows_per_user: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            max_len: 50,
            num_negatives: 999,
            max_windows_per_user: 0,
        }
    }
}

/// Chronological per-user sequences, keeping the most recent `max_len`
/// interactions. Ties in timestamp are broken by input order.
pub fn build_sequences(
    records: &[InteractionRecord],
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<UserSequence>> {
    if max_len < 3 {
        return Err(Error::Domain(format!(
            "max_len must be >= 3, got {max_len}"
        )));
    }
    let mut per_user: BTreeMap<&str, Vec<(i64, usize, u32, u16)>> = BTreeMap::new();
    for (order, r) in records.iter().enumerate() {
        let global = vocab.global_index(r.domain_id, &r.item_id).ok_or_else(|| {
            Error::Index(format!(
                "item ({}, {}) not in vocabulary",
                r.domain_id, r.item_id
            ))
        })?;
        per_user
            .entry(r.user_id.as_str())
            .or_default()
            .push((r.timestamp, order, global, r.domain_id));
    }
    let mut sequences = Vec::with_capacity(per_user.len());
    for (user, mut rows) in per_user {
        rows.sort_by_key(|&(ts, order, _, _)| (ts, order));
        let start = rows.len().saturating_sub(max_len);
        let rows = &rows[start..];
        sequences.push(UserSequence {
            user_id: user.to_string(),
            items: rows.iter().map(|&(_, _, g, _)| g).collect(),
            domains: rows.iter().map(|&(_, _, _, d)| d).collect(),
        });
    }
    Ok(sequences)
}

/// Sample `n` distinct items from the positive's domain, excluding the
/// positive, via partial Fisher-Yates over the domain range.
fn sample_negatives(
    vocab: &Vocab,
    positive: u32,
    domain: u16,
    n: usize,
    seed: u64,
) -> Result<Vec<u32>> {
    let range = vocab.domain_items(domain);
    let mut candidates: Vec<u32> = range.filter(|&g| g != positive).collect();
    if candidates.len() < n {
        return Err(Error::InsufficientCandidates(format!(
            "domain {} has {} candidates, need {}",
            domain,
            candidates.len(),
            n
        )));
    }
    let mut rng = seeded_rng(seed);
    for i in 0..n {
        let j = rng.random_range(i..candidates.len());
        candidates.swap(i, j);
    }
    candidates.truncate(n);
    Ok(candidates)
}

/// Leave-one-out: last interaction → test, second-to-last → validation,
/// sliding windows over the remaining prefix → training. Negatives are
/// drawn per (user, split) with seeds independent of processing order.
pub fn leave_one_out_split(
    sequences: &[UserSequence],
    vocab: &Vocab,
    cfg: &SplitConfig,
    seed: u64,
) -> Result<SplitDataset> {
    let mut out = SplitDataset {
        users: Vec::new(),
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        num_negatives: cfg.num_negatives,
        seed,
        skipped_short: 0,
    };
    for seq in sequences {
        if seq.len() < 3 {
            out.skipped_short += 1;
            continue;
        }
        let uidx = out.users.len() as u32;
        out.users.push(seq.user_id.clone());
        let m = seq.len();
        let user_key = derive_seed(seed, "user", crate::util::fnv1a64(seq.user_id.as_bytes()));

        // test: predict the last item from everything before it
        let clip = |end: usize| end.saturating_sub(cfg.max_len);
        out.test.push(EvalInstance {
            user: uidx,
            items: seq.items[clip(m - 1)..m - 1].to_vec(),
            domains: seq.domains[clip(m - 1)..m - 1].to_vec(),
            positive: seq.items[m - 1],
            target_domain: seq.domains[m - 1],
            negatives: sample_negatives(
                vocab,
                seq.items[m - 1],
                seq.domains[m - 1],
                cfg.num_negatives,
                derive_seed(user_key, "neg-test", 0),
            )?,
        });

        // validation: predict the second-to-last
        out.validation.push(EvalInstance {
            user: uidx,
            items: seq.items[clip(m - 2)..m - 2].to_vec(),
            domains: seq.domains[clip(m - 2)..m - 2].to_vec(),
            positive: seq.items[m - 2],
            target_domain: seq.domains[m - 2],
            negatives: sample_negatives(
                vocab,
                seq.items[m - 2],
                seq.domains[m - 2],
                cfg.num_negatives,
                derive_seed(user_key, "neg-val", 0),
            )?,
        });

        // training: one window per target position inside the prefix
        let prefix = m - 2;
        let first = out.train.len();
        for target_pos in 1..prefix {
            out.train.push(TrainInstance {
                user: uidx,
                items: seq.items[clip(target_pos)..target_pos].to_vec(),
                domains: seq.domains[clip(target_pos)..target_pos].to_vec(),
                target: seq.items[target_pos],
                target_domain: seq.domains[target_pos],
            });
        }
        if cfg.max_windows_per_user > 0 {
            let emitted = out.train.len() - first;
            if emitted > cfg.max_windows_per_user {
                out.train.drain(first..out.train.len() - cfg.max_windows_per_user);
            }
        }
    }
    if out.test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    

    fn rec(user: &str, item: &str, domain: u16, ts: i64) -> InteractionRecord {
        InteractionRecord {
            user_id: user.into(),
            item_id: item.into(),
            domain_id: domain,
            timestamp: ts,
        }
    }

    /// Vocab over two domains with enough items for small negative pools.
    fn toy_vocab(items_per_domain: usize) -> Vocab {
        let mut records = Vec::new();
        for d in 0..2u16 {
            for i in 0..items_per_domain {
                records.push(rec("u", &format!("i{i:03}"), d, i as i64));
            }
        }
        Vocab::from_records(&records).unwrap()
    }

    fn seq(vocab: &Vocab, user: &str, spec: &[(u16, usize)]) -> UserSequence {
        UserSequence {
            user_id: user.into(),
            items: spec
                .iter()
                .map(|&(d, i)| vocab.global_index(d, &format!("i{i:03}")).unwrap())
                .collect(),
            domains: spec.iter().map(|&(d, _)| d).collect(),
        }
    }

    #[test]
    fn sequences_are_sorted_and_truncated() {
        let mut records = vec![
            rec("u1", "b", 0, 20),
            rec("u1", "a", 0, 10),
            rec("u1", "c", 0, 30),
        ];
        for u in 0..1 {
            let _ = u;
        }
        // u2 gets 60 interactions, max_len 50 keeps the latest 50
        for i in 0..60 {
            records.push(rec("u2", &format!("x{i:02}"), 0, i as i64));
        }
        let vocab = Vocab::from_records(&records).unwrap();
        let seqs = build_sequences(&records, &vocab, 50).unwrap();
        let u1 = seqs.iter().find(|s| s.user_id == "u1").unwrap();
        assert_eq!(u1.len(), 3);
        assert_eq!(u1.items[0], vocab.global_index(0, "a").unwrap());
        assert_eq!(u1.items[2], vocab.global_index(0, "c").unwrap());
        let u2 = seqs.iter().find(|s| s.user_id == "u2").unwrap();
        assert_eq!(u2.len(), 50);
        assert_eq!(u2.items[0], vocab.global_index(0, "x10").unwrap());
    }

    #[test]
    fn shuffled_input_rows_give_identical_sequences() {
        let records = vec![
            rec("u1", "a", 0, 10),
            rec("u1", "b", 0, 20),
            rec("u1", "c", 0, 30),
        ];
        let shuffled = vec![records[2].clone(), records[0].clone(), records[1].clone()];
        let vocab = Vocab::from_records(&records).unwrap();
        assert_eq!(
            build_sequences(&records, &vocab, 50).unwrap(),
            build_sequences(&shuffled, &vocab, 50).unwrap()
        );
    }

    #[test]
    fn split_assigns_last_and_second_to_last() {
        let vocab = toy_vocab(10);
        let s = seq(&vocab, "u1", &[(0, 0), (0, 1), (0, 2), (0, 3)]);
        let cfg = SplitConfig {
            num_negatives: 5,
            ..SplitConfig::default()
        };
        let split = leave_one_out_split(&[s], &vocab, &cfg, 7).unwrap();
        let d = vocab.global_index(0, "i003").unwrap();
        let c = vocab.global_index(0, "i002").unwrap();
        let b = vocab.global_index(0, "i001").unwrap();
        assert_eq!(split.test[0].positive, d);
        assert_eq!(split.validation[0].positive, c);
        // train targets come from the prefix [a, b] only
        assert_eq!(split.train.len(), 1);
        assert_eq!(split.train[0].target, b);
        assert_eq!(split.train[0].items.len(), 1);
    }

    #[test]
    fn same_seed_gives_identical_negatives() {
        let vocab = toy_vocab(30);
        let s = seq(&vocab, "u1", &[(0, 0), (1, 1), (0, 2), (1, 3), (0, 4)]);
        let cfg = SplitConfig {
            num_negatives: 10,
            ..SplitConfig::default()
        };
        let a = leave_one_out_split(std::slice::from_ref(&s), &vocab, &cfg, 42).unwrap();
        let b = leave_one_out_split(&[s], &vocab, &cfg, 42).unwrap();
        assert_eq!(a.test[0].negatives, b.test[0].negatives);
        assert_eq!(a.validation[0].negatives, b.validation[0].negatives);
    }

    #[test]
    fn too_few_candidates_for_999_negatives() {
        let vocab = toy_vocab(400);
        let s = seq(&vocab, "u1", &[(0, 0), (0, 1), (0, 2)]);
        let cfg = SplitConfig::default(); // 999 negatives
        assert!(matches!(
            leave_one_out_split(&[s], &vocab, &cfg, 7),
            Err(Error::InsufficientCandidates(_))
        ));
    }

    #[test]
    fn short_sequences_are_excluded_with_tally() {
        let vocab = toy_vocab(10);
        let short = seq(&vocab, "u0", &[(0, 0), (0, 1)]);
        let ok = seq(&vocab, "u1", &[(0, 0), (0, 1), (0, 2)]);
        let cfg = SplitConfig {
            num_negatives: 5,
            ..SplitConfig::default()
        };
        let split = leave_one_out_split(&[short, ok], &vocab, &cfg, 7).unwrap();
        assert_eq!(split.skipped_short, 1);
        assert_eq!(split.test.len(), 1);
    }

    #[test]
    fn negatives_share_domain_and_exclude_positive() {
        let vocab = toy_vocab(25);
        let s = seq(
            &vocab,
            "u1",
            &[(1, 0), (0, 1), (1, 2), (0, 3), (1, 4), (1, 5)],
        );
        let cfg = SplitConfig {
            num_negatives: 20,
            ..SplitConfig::default()
        };
        let split = leave_one_out_split(&[s], &vocab, &cfg, 9).unwrap();
        for inst in split.test.iter().chain(split.validation.iter()) {
            assert_eq!(inst.negatives.len(), 20);
            let mut seen = std::collections::HashSet::new();
            for &n in &inst.negatives {
                assert_ne!(n, inst.positive);
                assert_eq!(vocab.domain_of[n as usize], inst.target_domain);
                assert!(seen.insert(n), "duplicate negative");
            }
        }
    }

    #[test]
    fn training_targets_never_touch_heldout_positions() {
        let vocab = toy_vocab(12);
        let s = seq(
            &vocab,
            "u1",
            &[(0, 0), (0, 1), (0, 2), (0, 3), (0, 4), (0, 5)],
        );
        let cfg = SplitConfig {
            num_negatives: 5,
            ..SplitConfig::default()
        };
        let split = leave_one_out_split(&[s.clone()], &vocab, &cfg, 3).unwrap();
        let test_pos = s.items[s.len() - 1];
        let val_pos = s.items[s.len() - 2];
        for t in &split.train {
            assert_ne!(t.target, test_pos);
            assert_ne!(t.target, val_pos);
        }
    }

    #[test]
    fn window_cap_keeps_most_recent() {
        let vocab = toy_vocab(12);
        let s = seq(
            &vocab,
            "u1",
            &[(0, 0), (0, 1), (0, 2), (0, 3), (0, 4), (0, 5), (0, 6), (0, 7)],
        );
        let cfg = SplitConfig {
            num_negatives: 5,
            max_windows_per_user: 2,
            ..SplitConfig::default()
        };
        let split = leave_one_out_split(&[s], &vocab, &cfg, 3).unwrap();
        assert_eq!(split.train.len(), 2);
        // the latest in-prefix targets are positions 4 and 5
        assert_eq!(split.train[0].target, vocab.global_index(0, "i004").unwrap());
        assert_eq!(split.train[1].target, vocab.global_index(0, "i005").unwrap());
    }
}
