//! Planted synthetic datasets.
//!
//! Items are grouped into clusters. Every user belongs to one cluster and
//! walks its items in a noisy cyclic order, so both the cluster and the next
//! step are learnable. Titles and descriptions repeat the cluster's theme
//! words, which gives text embedders a semantic signal per cluster.
//!
//! Optionally a few items per cluster are *held out*: they never appear in a
//! training prefix and only show up as the final (test) interaction of some
//! users of their cluster.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::Rng;

use super::{CatalogEntry, Event, InteractionLog, ItemId, UserId, UserItemText};
use crate::rng::derive;

const THEMES: [&str; 12] = [
    "trail", "studio", "harbor", "summit", "garden", "arcade", "canyon", "orbit", "meadow",
    "forge", "glacier", "prairie",
];
const MOODS: [&str; 12] = [
    "rugged", "vivid", "breezy", "lofty", "leafy", "retro", "dusty", "stellar", "sunny", "molten",
    "frosty", "golden",
];
const ADJECTIVES: [&str; 8] = [
    "swift", "quiet", "bold", "bright", "sturdy", "sleek", "compact", "classic",
];
const NOUNS: [&str; 8] = [
    "kit", "pack", "set", "tool", "lamp", "case", "band", "bottle",
];

#[derive(Debug, Clone)]
pub struct PlantedSpec {
    pub users: usize,
    pub clusters: usize,
    pub items_per_cluster: usize,
    /// Items per cluster that only ever appear as a test target.
    pub held_out_per_cluster: usize,
    /// Users whose last interaction is replaced by each held-out item.
    pub users_per_held_out: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of stepping one position forward in the cluster cycle.
    pub p_next: f64,
    /// Probability of skipping one position; the remainder jumps uniformly.
    pub p_skip: f64,
    pub seed: u64,
}

impl PlantedSpec {
    /// 200 users, 100 items in two blocks.
    pub fn two_block(seed: u64) -> Self {
        Self {
            users: 200,
            clusters: 2,
            items_per_cluster: 50,
            held_out_per_cluster: 0,
            users_per_held_out: 0,
            min_len: 10,
            max_len: 16,
            p_next: 0.75,
            p_skip: 0.15,
            seed,
        }
    }

    /// Ten clusters of twelve items, two per cluster held out of training.
    pub fn with_cold_items(seed: u64) -> Self {
        Self {
            users: 300,
            clusters: 10,
            items_per_cluster: 12,
            held_out_per_cluster: 2,
            users_per_held_out: 5,
            min_len: 10,
            max_len: 16,
            p_next: 0.75,
            p_skip: 0.15,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub events: Vec<Event>,
    pub catalog: BTreeMap<ItemId, CatalogEntry>,
    /// One short review summary per event, keyed by `(user, item)`.
    pub reviews: Vec<UserItemText>,
    pub cluster_of: BTreeMap<ItemId, usize>,
    pub held_out: BTreeSet<ItemId>,
}

impl SyntheticDataset {
    pub fn log(&self) -> InteractionLog {
        InteractionLog::from_events(self.events.clone(), self.catalog.clone())
    }

    /// The same dataset with every item id replaced by `prefix` + old id.
    /// Users are renamed the same way so the two domains never share ids.
    pub fn renamed(&self, prefix: &str) -> SyntheticDataset {
        let item = |q: &ItemId| ItemId::new(format!("{prefix}{q}"));
        let user = |u: &UserId| UserId::new(format!("{prefix}{u}"));
        SyntheticDataset {
            events: self
                .events
                .iter()
                .map(|e| Event {
                    user: user(&e.user),
                    item: item(&e.item),
                    timestamp: e.timestamp,
                    rating: e.rating,
                })
                .collect(),
            catalog: self
                .catalog
                .iter()
                .map(|(q, c)| (item(q), c.clone()))
                .collect(),
            reviews: self
                .reviews
                .iter()
                .map(|r| UserItemText {
                    user: user(&r.user),
                    item: item(&r.item),
                    text: r.text.clone(),
                })
                .collect(),
            cluster_of: self.cluster_of.iter().map(|(q, c)| (item(q), *c)).collect(),
            held_out: self.held_out.iter().map(item).collect(),
        }
    }

    /// Keeps only the events (and reviews) of `users`.
    pub fn restricted_to(&self, users: &BTreeSet<UserId>) -> SyntheticDataset {
        SyntheticDataset {
            events: self
                .events
                .iter()
                .filter(|e| users.contains(&e.user))
                .cloned()
                .collect(),
            catalog: self.catalog.clone(),
            reviews: self
                .reviews
                .iter()
                .filter(|r| users.contains(&r.user))
                .cloned()
                .collect(),
            cluster_of: self.cluster_of.clone(),
            held_out: self.held_out.clone(),
        }
    }
}

fn item_id(global: usize) -> ItemId {
    ItemId::new(format!("i{global:04}"))
}

fn theme(c: usize) -> &'static str {
    THEMES[c % THEMES.len()]
}

fn mood(c: usize) -> &'static str {
    MOODS[c % MOODS.len()]
}

pub fn planted(spec: &PlantedSpec) -> SyntheticDataset {
    assert!(spec.clusters >= 1 && spec.items_per_cluster > spec.held_out_per_cluster);
    assert!(spec.min_len >= 3 && spec.max_len >= spec.min_len);
    let mut rng = derive(spec.seed, "synthetic");

    let mut catalog = BTreeMap::new();
    let mut cluster_of = BTreeMap::new();
    let mut held_out = BTreeSet::new();
    let mut warm_by_cluster: Vec<Vec<ItemId>> = vec![Vec::new(); spec.clusters];
    let mut cold_by_cluster: Vec<Vec<ItemId>> = vec![Vec::new(); spec.clusters];
    for c in 0..spec.clusters {
        for j in 0..spec.items_per_cluster {
            let g = c * spec.items_per_cluster + j;
            let q = item_id(g);
            let adj = ADJECTIVES[(g * 7 + c) % ADJECTIVES.len()];
            let noun = NOUNS[(g * 3 + j) % NOUNS.len()];
            let title = format!("{} {} {} x{:03}", theme(c), adj, noun, g);
            let description = format!(
                "{} {} {noun} with a {} {} feel for {} lovers",
                mood(c),
                theme(c),
                mood(c),
                theme(c),
                theme(c)
            );
            catalog.insert(q.clone(), CatalogEntry::new(title, description));
            cluster_of.insert(q.clone(), c);
            if j >= spec.items_per_cluster - spec.held_out_per_cluster {
                held_out.insert(q.clone());
                cold_by_cluster[c].push(q);
            } else {
                warm_by_cluster[c].push(q);
            }
        }
    }

    // users of each cluster, in id order, reserved for held-out targets
    let mut cold_target: BTreeMap<usize, ItemId> = BTreeMap::new();
    for (c, held) in cold_by_cluster.iter().enumerate().take(spec.clusters) {
        let members: Vec<usize> = (0..spec.users).filter(|u| u % spec.clusters == c).collect();
        let mut slots = members.iter();
        for q in held {
            for _ in 0..spec.users_per_held_out {
                if let Some(&u) = slots.next() {
                    cold_target.insert(u, q.clone());
                }
            }
        }
    }

    let mut events = Vec::new();
    let mut reviews = Vec::new();
    for u in 0..spec.users {
        let c = u % spec.clusters;
        let warm = &warm_by_cluster[c];
        let m = warm.len();
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut pos = rng.random_range(0..m);
        let mut seq = Vec::with_capacity(len);
        for _ in 0..len {
            seq.push(warm[pos].clone());
            let r: f64 = rng.random();
            pos = if r < spec.p_next {
                (pos + 1) % m
            } else if r < spec.p_next + spec.p_skip {
                (pos + 2) % m
            } else {
                rng.random_range(0..m)
            };
        }
        if let Some(q) = cold_target.get(&u) {
            *seq.last_mut().expect("non-empty") = q.clone();
        }
        let user = UserId::new(format!("u{u:04}"));
        for (t, q) in seq.into_iter().enumerate() {
            let entry = &catalog[&q];
            let adj = entry.title.split(' ').nth(1).unwrap_or("fine");
            let phrases = ["fits my love of", "great pick for", "perfect for any"];
            let phrase = phrases.choose(&mut rng).expect("non-empty");
            reviews.push(UserItemText {
                user: user.clone(),
                item: q.clone(),
                text: format!("{adj} and {} {phrase} {} gear", mood(c), theme(c)),
            });
            events.push(Event {
                user: user.clone(),
                item: q,
                timestamp: 1_600_000_000 + (u as i64) * 10_000 + (t as i64) * 60,
                rating: 5.0,
            });
        }
    }

    SyntheticDataset {
        events,
        catalog,
        reviews,
        cluster_of,
        held_out,
    }
}
