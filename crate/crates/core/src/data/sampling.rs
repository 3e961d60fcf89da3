use std::collections::{BTreeMap, HashMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ItemId, SplitDataset, UserId, UserSequence};
use crate::error::{Error, Result};

/// `(user, history, candidate, label)`: does `candidate` follow `history`?
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub user: UserId,
    pub history: Vec<ItemId>,
    pub candidate: ItemId,
    pub label: bool,
}

/// Uniform sampler over `universe \ S^p`.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    universe: Vec<ItemId>,
    seen: HashMap<UserId, HashSet<ItemId>>,
}

impl NegativeSampler {
    /// `universe` is deduplicated and sorted so the draw order does not
    /// depend on how it was collected.
    pub fn new(mut universe: Vec<ItemId>, sequences: &BTreeMap<UserId, UserSequence>) -> Self {
        universe.sort();
        universe.dedup();
        let seen = sequences
            .iter()
            .map(|(u, s)| (u.clone(), s.items.iter().cloned().collect()))
            .collect();
        Self { universe, seen }
    }

    pub fn universe(&self) -> &[ItemId] {
        &self.universe
    }

    pub fn sample<R: Rng + ?Sized>(&self, user: &UserId, rng: &mut R) -> Result<ItemId> {
        let empty = HashSet::new();
        let seen = self.seen.get(user).unwrap_or(&empty);
        let n = self.universe.len();
        let excluded = self.universe.iter().filter(|q| seen.contains(*q)).count();
        if excluded >= n {
            return Err(Error::NoNegative {
                user: user.0.clone(),
            });
        }
        if excluded * 2 <= n {
            // rejection sampling stays uniform over the eligible set
            loop {
                let q = &self.universe[rng.random_range(0..n)];
                if !seen.contains(q) {
                    return Ok(q.clone());
                }
            }
        }
        let eligible: Vec<&ItemId> = self
            .universe
            .iter()
            .filter(|q| !seen.contains(*q))
            .collect();
        Ok(eligible[rng.random_range(0..eligible.len())].clone())
    }
}

/// One uniform draw from the items of `sequences` that `user` has not
/// interacted with.
pub fn sample_negative<R: Rng + ?Sized>(
    user: &UserId,
    sequences: &BTreeMap<UserId, UserSequence>,
    rng: &mut R,
) -> Result<ItemId> {
    let universe = sequences
        .values()
        .flat_map(|s| s.items.iter().cloned())
        .collect();
    NegativeSampler::new(universe, sequences).sample(user, rng)
}

/// For every user and every prefix `S_{1:k}` of the training region, one
/// positive instance for the true next item and `negatives_per_positive`
/// sampled negatives.
///
/// Negatives come from the items seen in training prefixes and exclude the
/// user's whole sequence, validation and test items included.
pub fn build_training_instances<R: Rng + ?Sized>(
    split: &SplitDataset,
    negatives_per_positive: usize,
    rng: &mut R,
) -> Result<Vec<TrainingInstance>> {
    if negatives_per_positive == 0 {
        return Err(Error::config(
            "cf.negatives_per_positive",
            "must be at least 1",
        ));
    }
    let sampler = NegativeSampler::new(split.train_items(), &split.sequences());
    let mut out = Vec::new();
    for (user, s) in &split.users {
        for k in 1..s.train.len() {
            let history = s.train[..k].to_vec();
            out.push(TrainingInstance {
                user: user.clone(),
                history: history.clone(),
                candidate: s.train[k].clone(),
                label: true,
            });
            for _ in 0..negatives_per_positive {
                out.push(TrainingInstance {
                    user: user.clone(),
                    history: history.clone(),
                    candidate: sampler.sample(user, rng)?,
                    label: false,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{leave_one_out_split, UserSplit};
    use crate::rng::seeded;

    fn ids(xs: &[&str]) -> Vec<ItemId> {
        xs.iter().map(|s| ItemId::from(*s)).collect()
    }

    fn seq_map(entries: &[(&str, &[&str])]) -> BTreeMap<UserId, UserSequence> {
        entries
            .iter()
            .map(|(u, xs)| {
                (
                    UserId::from(*u),
                    UserSequence {
                        user: UserId::from(*u),
                        items: ids(xs),
                    },
                )
            })
            .collect()
    }

    #[test]
    fn forced_negative() {
        let seqs = seq_map(&[("u", &["a"]), ("v", &["b"])]);
        let mut rng = seeded(1);
        for _ in 0..20 {
            assert_eq!(
                sample_negative(&UserId::from("u"), &seqs, &mut rng).unwrap(),
                ItemId::from("b")
            );
        }
    }

    #[test]
    fn exhausted_user_errors() {
        let seqs = seq_map(&[("u", &["a", "b"]), ("v", &["b"])]);
        assert!(matches!(
            sample_negative(&UserId::from("u"), &seqs, &mut seeded(0)),
            Err(Error::NoNegative { .. })
        ));
    }

    #[test]
    fn same_seed_same_draws() {
        let universe: Vec<String> = (0..50).map(|i| format!("i{i}")).collect();
        let refs: Vec<&str> = universe.iter().map(|s| s.as_str()).collect();
        let seqs = seq_map(&[("u", &refs[..5]), ("v", &refs[..])]);
        let draw = |seed| {
            let mut rng = seeded(seed);
            (0..100)
                .map(|_| sample_negative(&UserId::from("u"), &seqs, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }

    #[test]
    fn draws_are_uniform_over_eligible_items() {
        // 1000 items, the user has seen 10; 1e5 draws.
        let names: Vec<String> = (0..1000).map(|i| format!("i{i:04}")).collect();
        let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        let seqs = seq_map(&[("u", &refs[..10]), ("all", &refs[..])]);
        let sampler = NegativeSampler::new(ids(&refs), &seqs);
        let mut rng = seeded(2024);
        let mut counts: HashMap<ItemId, usize> = HashMap::new();
        let draws = 100_000usize;
        for _ in 0..draws {
            *counts
                .entry(sampler.sample(&UserId::from("u"), &mut rng).unwrap())
                .or_default() += 1;
        }
        let eligible = 990.0;
        let p = 1.0 / eligible;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for q in &refs[..10] {
            assert!(!counts.contains_key(&ItemId::from(*q)));
        }
        let mut chi2 = 0.0;
        let mut within_3 = 0usize;
        for q in &refs[10..] {
            let c = *counts.get(&ItemId::from(*q)).unwrap_or(&0) as f64;
            // 990 cells: about 2.7 of them land outside 3 sigma by chance alone
            assert!((c - mean).abs() <= 5.0 * sigma, "{q}: {c} vs {mean}");
            if (c - mean).abs() <= 3.0 * sigma {
                within_3 += 1;
            }
            chi2 += (c - mean).powi(2) / mean;
        }
        assert!(
            within_3 as f64 >= 0.99 * eligible,
            "{within_3} cells within 3 sigma"
        );
        // chi-square with 989 dof: mean 989, sd ~44.5; accept within 4 sd
        assert!(
            (chi2 - 989.0).abs() < 4.0 * (2.0f64 * 989.0).sqrt(),
            "chi2 = {chi2}"
        );
    }

    #[test]
    fn instances_enumerate_prefixes() {
        let seqs = seq_map(&[
            ("u", &["a", "b", "c", "d", "e"]),
            ("v", &["x", "y", "z", "w", "a"]),
        ]);
        let split = leave_one_out_split(&seqs).unwrap();
        let inst = build_training_instances(&split, 1, &mut seeded(3)).unwrap();
        let mine: Vec<_> = inst
            .iter()
            .filter(|i| i.user == UserId::from("u"))
            .collect();
        assert_eq!(mine.len(), 4);
        let pos: Vec<_> = mine.iter().filter(|i| i.label).collect();
        assert_eq!(pos[0].history, ids(&["a"]));
        assert_eq!(pos[1].history, ids(&["a", "b"]));
        let shifted: Vec<ItemId> = pos.iter().map(|i| i.candidate.clone()).collect();
        assert_eq!(shifted, ids(&["b", "c"]));
        let full: HashSet<ItemId> = ids(&["a", "b", "c", "d", "e"]).into_iter().collect();
        for n in mine.iter().filter(|i| !i.label) {
            assert!(!full.contains(&n.candidate));
        }
    }

    #[test]
    fn negatives_avoid_full_sequence_property() {
        let mut users = BTreeMap::new();
        let mut rng = seeded(9);
        for u in 0..40 {
            let len = rng.random_range(3..12);
            let items: Vec<ItemId> = (0..len)
                .map(|_| ItemId::new(format!("i{}", rng.random_range(0..30))))
                .collect();
            let n = items.len();
            users.insert(
                UserId::new(format!("u{u}")),
                UserSplit {
                    train: items[..n - 2].to_vec(),
                    validation: items[n - 2].clone(),
                    test: items[n - 1].clone(),
                },
            );
        }
        let split = SplitDataset { users };
        let inst = build_training_instances(&split, 2, &mut rng).unwrap();
        for i in &inst {
            let s = &split.users[&i.user];
            if i.label {
                let k = i.history.len();
                assert_eq!(i.history, s.train[..k]);
                assert_eq!(i.candidate, s.train[k]);
            } else {
                assert!(!s.full_sequence().contains(&i.candidate));
            }
        }
    }
}
