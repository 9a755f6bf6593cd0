//! k-core filtering and vocabulary construction.

use std::collections::{HashMap, HashSet};
use std::ops::Range;

use crate::data::ingest::InteractionRecord;
use crate::error::{Error, Result};

/// Dense item indexing. Items are keyed by (domain, raw id): domain
/// vocabularies are disjoint by construction, and global indices are laid
/// out domain-by-domain so each domain occupies one contiguous range.
#[derive(Debug, Clone)]
pub struct Vocab {
    pub num_domains: usize,
    /// global item index → owning domain
    pub domain_of: Vec<u16>,
    /// per-domain contiguous global index range
    pub domain_ranges: Vec<Range<u32>>,
    /// global item index → raw item id
    pub item_ids: Vec<String>,
    index: HashMap<(u16, String), u32>,
}

impl Vocab {
    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn global_index(&self, domain: u16, item_id: &str) -> Option<u32> {
        self.index.get(&(domain, item_id.to_string())).copied()
    }

    pub fn domain_items(&self, domain: u16) -> Range<u32> {
        self.domain_ranges[domain as usize].clone()
    }

    pub fn domain_size(&self, domain: u16) -> usize {
        let r = &self.domain_ranges[domain as usize];
        (r.end - r.start) as usize
    }

    /// Rebuild from per-domain item-id lists already in global-index order
    /// (the split manifest layout).
    pub fn from_domain_items(domains: &[Vec<String>]) -> Result<Self> {
        if domains.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut domain_of = Vec::new();
        let mut domain_ranges = Vec::with_capacity(domains.len());
        let mut item_ids = Vec::new();
        let mut index = HashMap::new();
        for (d, items) in domains.iter().enumerate() {
            let start = item_ids.len() as u32;
            for id in items {
                index.insert((d as u16, id.clone()), item_ids.len() as u32);
                item_ids.push(id.clone());
                domain_of.push(d as u16);
            }
            domain_ranges.push(start..item_ids.len() as u32);
        }
        Ok(Vocab {
            num_domains: domains.len(),
            domain_of,
            domain_ranges,
            item_ids,
            index,
        })
    }

    /// Build from records; items sorted lexicographically within each domain
    /// so the layout is independent of row order.
    pub fn from_records(records: &[InteractionRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let num_domains = records.iter().map(|r| r.domain_id).max().unwrap() as usize + 1;
        let mut per_domain: Vec<HashSet<&str>> = vec![HashSet::new(); num_domains];
        for r in records {
            per_domain[r.domain_id as usize].insert(&r.item_id);
        }
        let mut domain_of = Vec::new();
        let mut domain_ranges = Vec::with_capacity(num_domains);
        let mut item_ids = Vec::new();
        let mut index = HashMap::new();
        for (d, set) in per_domain.iter().enumerate() {
            let start = item_ids.len() as u32;
            let mut items: Vec<&str> = set.iter().copied().collect();
            items.sort_unstable();
            for id in items {
                index.insert((d as u16, id.to_string()), item_ids.len() as u32);
                item_ids.push(id.to_string());
                domain_of.push(d as u16);
            }
            domain_ranges.push(start..item_ids.len() as u32);
        }
        Ok(Vocab {
            num_domains,
            domain_of,
            domain_ranges,
            item_ids,
            index,
        })
    }
}

/// Alternate user-core (keep users with >= `user_min` interactions) and
/// item-core (drop items with < `item_min` interactions) filtering until a
/// fixed point, then build the vocabulary from the survivors.
pub fn filter_core(
    records: Vec<InteractionRecord>,
    user_min: usize,
    item_min: usize,
) -> Result<(Vec<InteractionRecord>, Vocab)> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut current = records;
    loop {
        let before = current.len();

        let mut user_count: HashMap<&str, usize> = HashMap::new();
        for r in &current {
            *user_count.entry(r.user_id.as_str()).or_default() += 1;
        }
        let keep_users: HashSet<String> = user_count
            .iter()
            .filter(|(_, &c)| c >= user_min)
            .map(|(u, _)| u.to_string())
            .collect();
        current.retain(|r| keep_users.contains(&r.user_id));

        let mut item_count: HashMap<(u16, &str), usize> = HashMap::new();
        for r in &current {
            *item_count.entry((r.domain_id, r.item_id.as_str())).or_default() += 1;
        }
        let keep_items: HashSet<(u16, String)> = item_count
            .iter()
            .filter(|(_, &c)| c >= item_min)
            .map(|((d, i), _)| (*d, i.to_string()))
            .collect();
        current.retain(|r| keep_items.contains(&(r.domain_id, r.item_id.clone())));

        if current.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if current.len() == before {
            break;
        }
    }
    let vocab = Vocab::from_records(&current)?;
    Ok((current, vocab))
}
