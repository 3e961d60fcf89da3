use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{InteractionLog, ItemId};
use crate::error::{Error, Result};

pub const DEFAULT_COLD_WARM_FRACTION: f64 = 0.35;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColdWarmPartition {
    pub cold: BTreeSet<ItemId>,
    pub warm: BTreeSet<ItemId>,
    pub frequency: BTreeMap<ItemId, usize>,
}

impl ColdWarmPartition {
    pub fn is_cold(&self, item: &ItemId) -> bool {
        self.cold.contains(item)
    }

    pub fn is_warm(&self, item: &ItemId) -> bool {
        self.warm.contains(item)
    }
}

/// Ranks items by `(frequency desc, id asc)`; the first
/// `floor(fraction * |Q|)` are warm and the last as many are cold.
pub fn partition_cold_warm(log: &InteractionLog, fraction: f64) -> Result<ColdWarmPartition> {
    if !(fraction > 0.0 && fraction <= 0.5) {
        return Err(Error::config(
            "eval.cold_warm_fraction",
            "must lie in (0, 0.5]",
        ));
    }
    let frequency = log.item_frequency();
    if frequency.len() < 2 {
        return Err(Error::Partition(format!(
            "need at least 2 distinct items, found {}",
            frequency.len()
        )));
    }
    let mut ranked: Vec<(&ItemId, usize)> = frequency.iter().map(|(q, &c)| (q, c)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let n = ranked.len();
    let size = (fraction * n as f64).floor() as usize;
    let warm = ranked[..size].iter().map(|(q, _)| (*q).clone()).collect();
    let cold = ranked[n - size..]
        .iter()
        .map(|(q, _)| (*q).clone())
        .collect();
    Ok(ColdWarmPartition {
        cold,
        warm,
        frequency,
    })
}
