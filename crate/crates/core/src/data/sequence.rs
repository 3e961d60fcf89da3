use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{InteractionLog, ItemId, UserId};
use crate::error::{Error, Result};

/// A user's items in chronological order; position `k` (1-based) is the
/// relative time index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user: UserId,
    pub items: Vec<ItemId>,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Groups events per user and orders them by `(timestamp, item id)`.
pub fn build_sequences(log: &InteractionLog) -> BTreeMap<UserId, UserSequence> {
    let mut per_user: BTreeMap<UserId, Vec<(i64, &ItemId)>> = BTreeMap::new();
    for e in &log.events {
        per_user
            .entry(e.user.clone())
            .or_default()
            .push((e.timestamp, &e.item));
    }
    per_user
        .into_iter()
        .map(|(user, mut evs)| {
            evs.sort();
            let items = evs.into_iter().map(|(_, q)| q.clone()).collect();
            (user.clone(), UserSequence { user, items })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub train: Vec<ItemId>,
    pub validation: ItemId,
    pub test: ItemId,
}

impl UserSplit {
    /// The full sequence `train ++ [validation, test]`.
    pub fn full_sequence(&self) -> Vec<ItemId> {
        let mut s = self.train.clone();
        s.push(self.validation.clone());
        s.push(self.test.clone());
        s
    }

    /// Everything before the test item.
    pub fn test_history(&self) -> Vec<ItemId> {
        let mut s = self.train.clone();
        s.push(self.validation.clone());
        s
    }
}

/// Leave-one-out partition keyed by user id.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitDataset {
    pub users: BTreeMap<UserId, UserSplit>,
}

impl SplitDataset {
    pub fn train(&self, user: &UserId) -> Option<&[ItemId]> {
        self.users.get(user).map(|s| s.train.as_slice())
    }

    pub fn validation(&self, user: &UserId) -> Option<&ItemId> {
        self.users.get(user).map(|s| &s.validation)
    }

    pub fn test(&self, user: &UserId) -> Option<&ItemId> {
        self.users.get(user).map(|s| &s.test)
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Full per-user sequences, reconstructed.
    pub fn sequences(&self) -> BTreeMap<UserId, UserSequence> {
        self.users
            .iter()
            .map(|(u, s)| {
                (
                    u.clone(),
                    UserSequence {
                        user: u.clone(),
                        items: s.full_sequence(),
                    },
                )
            })
            .collect()
    }

    /// Items that occur in at least one training prefix, sorted by id.
    pub fn train_items(&self) -> Vec<ItemId> {
        let mut items: Vec<ItemId> = self
            .users
            .values()
            .flat_map(|s| s.train.iter().cloned())
            .collect();
        items.sort();
        items.dedup();
        items
    }

    /// Every item in any split region, sorted by id.
    pub fn all_items(&self) -> Vec<ItemId> {
        let mut items: Vec<ItemId> = self
            .users
            .values()
            .flat_map(|s| s.full_sequence())
            .collect();
        items.sort();
        items.dedup();
        items
    }
}

/// Last item to test, second-to-last to validation, the rest to train.
pub fn leave_one_out_split(sequences: &BTreeMap<UserId, UserSequence>) -> Result<SplitDataset> {
    let mut users = BTreeMap::new();
    for (user, seq) in sequences {
        let n = seq.items.len();
        if n < 3 {
            return Err(Error::Split {
                user: user.0.clone(),
                len: n,
            });
        }
        users.insert(
            user.clone(),
            UserSplit {
                train: seq.items[..n - 2].to_vec(),
                validation: seq.items[n - 2].clone(),
                test: seq.items[n - 1].clone(),
            },
        );
    }
    Ok(SplitDataset { users })
}
