//! Corpus filtering, session splits, meta-pair extraction and cold-start splits.

use std::collections::{BTreeSet, HashMap, HashSet};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, ItemId, Session};
use crate::error::{Error, Result};

/// Drops rare items and short sessions, repeating until neither rule fires.
pub fn filter_corpus(corpus: &Corpus, min_item_count: usize, min_session_len: usize) -> Result<Corpus> {
    if min_item_count == 0 || min_session_len == 0 {
        return Err(Error::Config("filter thresholds must be >= 1".into()));
    }
    let mut sessions: Vec<Session> = corpus.sessions().to_vec();
    loop {
        let mut counts: HashMap<ItemId, usize> = HashMap::new();
        for s in &sessions {
            for &i in &s.items {
                *counts.entry(i).or_default() += 1;
            }
        }
        let mut changed = false;
        for s in &mut sessions {
            let before = s.items.len();
            s.items.retain(|i| counts[i] >= min_item_count);
            changed |= s.items.len() != before;
        }
        let before = sessions.len();
        sessions.retain(|s| s.items.len() >= min_session_len);
        changed |= sessions.len() != before;
        if !changed {
            break;
        }
    }
    let used: HashSet<ItemId> = sessions.iter().flat_map(|s| s.items.iter().copied()).collect();
    let items = corpus
        .items()
        .iter()
        .filter(|i| used.contains(&i.id))
        .cloned()
        .collect::<Vec<_>>();
    if items.is_empty() {
        warn!("filtering removed every item and session");
    }
    Corpus::new(items, sessions)
}

/// Session-id partition. `cold_items` is set only by [`cold_split`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<u64>,
    pub valid: Vec<u64>,
    pub test: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cold_items: Option<Vec<ItemId>>,
}

impl Splits {
    /// Test sessions whose prediction target is a cold item.
    pub fn cold_test(&self, corpus: &Corpus) -> Vec<u64> {
        let Some(cold) = &self.cold_items else {
            return Vec::new();
        };
        let cold: HashSet<ItemId> = cold.iter().copied().collect();
        corpus
            .sessions_by_id(&self.test)
            .into_iter()
            .filter(|s| s.items.last().is_some_and(|t| cold.contains(t)))
            .map(|s| s.sid)
            .collect()
    }
}

/// Seeded random partition of sessions by `ratios` (train, valid, test).
pub fn split_sessions(corpus: &Corpus, ratios: (u32, u32, u32), seed: u64) -> Result<Splits> {
    let (a, b, c) = ratios;
    if a == 0 || b == 0 || c == 0 {
        return Err(Error::Config("split ratios must be positive".into()));
    }
    let n = corpus.num_sessions();
    if n < 3 {
        return Err(Error::Split(format!("{n} sessions cannot fill 3 partitions")));
    }
    let mut ids: Vec<u64> = corpus.sessions().iter().map(|s| s.sid).collect();
    ids.sort_unstable();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let total = (a + b + c) as f64;
    let n_train = ((n as f64 * a as f64 / total).round() as usize).clamp(1, n - 2);
    let n_valid = ((n as f64 * b as f64 / total).round() as usize).clamp(1, n - n_train - 1);
    Ok(Splits {
        train: ids[..n_train].to_vec(),
        valid: ids[n_train..n_train + n_valid].to_vec(),
        test: ids[n_train + n_valid..].to_vec(),
        cold_items: None,
    })
}

/// A κ-order transition record: `query` (κ consecutive items) → `target`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MetaPair {
    pub order: usize,
    pub query: Vec<ItemId>,
    pub target: ItemId,
}

pub const MAX_ORDER: usize = 2;

/// Sliding-window κ-order meta pairs; duplicates across sessions are kept.
pub fn extract_meta_pairs<'a, I>(sessions: I, order: usize) -> Result<Vec<MetaPair>>
where
    I: IntoIterator<Item = &'a Session>,
{
    if !(1..=MAX_ORDER).contains(&order) {
        return Err(Error::Config(format!("meta-pair order {order} not in 1..={MAX_ORDER}")));
    }
    let mut out = Vec::new();
    for s in sessions {
        for m in order..s.items.len() {
            out.push(MetaPair {
                order,
                query: s.items[m - order..m].to_vec(),
                target: s.items[m],
            });
        }
    }
    Ok(out)
}

/// Removes pairs whose target is the meta target of exactly one pair.
pub fn filter_meta_pairs(pairs: &[MetaPair]) -> Vec<MetaPair> {
    let mut counts: HashMap<(usize, ItemId), usize> = HashMap::new();
    for p in pairs {
        *counts.entry((p.order, p.target)).or_default() += 1;
    }
    pairs
        .iter()
        .filter(|p| counts[&(p.order, p.target)] != 1)
        .cloned()
        .collect()
}

/// Warm split, then `cold_frac` of items become cold: train sessions touching a
/// cold item leave train (to test when their target is cold, else to valid).
pub fn cold_split(corpus: &Corpus, cold_frac: f64, ratios: (u32, u32, u32), seed: u64) -> Result<Splits> {
    if !(cold_frac > 0.0 && cold_frac < 1.0) {
        return Err(Error::Config(format!("cold_frac {cold_frac} not in (0, 1)")));
    }
    let mut ids: Vec<ItemId> = corpus.items().iter().map(|i| i.id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC01D_5EED);
    ids.shuffle(&mut rng);
    let k = (ids.len() as f64 * cold_frac).round() as usize;
    let cold: BTreeSet<ItemId> = ids[..k].iter().copied().collect();
    cold_split_with_items(corpus, &cold, ratios, seed)
}

pub fn cold_split_with_items(
    corpus: &Corpus,
    cold: &BTreeSet<ItemId>,
    ratios: (u32, u32, u32),
    seed: u64,
) -> Result<Splits> {
    let warm = split_sessions(corpus, ratios, seed)?;
    let mut out = Splits {
        train: Vec::new(),
        valid: warm.valid,
        test: warm.test,
        cold_items: Some(cold.iter().copied().collect()),
    };
    for s in corpus.sessions_by_id(&warm.train) {
        if !s.items.iter().any(|i| cold.contains(i)) {
            out.train.push(s.sid);
        } else if s.items.last().is_some_and(|t| cold.contains(t)) {
            out.test.push(s.sid);
        } else {
            out.valid.push(s.sid);
        }
    }
    if out.train.is_empty() {
        return Err(Error::Split("cold item selection leaves no training sessions".into()));
    }
    Ok(out)
}
