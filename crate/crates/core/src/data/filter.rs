use std::collections::{HashMap, HashSet};

use super::{InteractionLog, ItemId, UserId};
use crate::error::{Error, Result};

pub const DEFAULT_MIN_USER_EVENTS: usize = 5;
pub const DEFAULT_MIN_ITEM_POPULARITY: usize = 5;

/// Drops items with fewer than `min_item_popularity` events and users with
/// fewer than `min_user_events` events, repeating until neither rule removes
/// anything. The result does not depend on which rule is applied first.
pub fn filter_dataset(
    log: &InteractionLog,
    min_user_events: usize,
    min_item_popularity: usize,
) -> Result<InteractionLog> {
    if min_user_events == 0 || min_item_popularity == 0 {
        return Err(Error::config(
            "data.min_user_events",
            "filter thresholds must be at least 1",
        ));
    }
    let mut dropped_users: HashSet<UserId> = HashSet::new();
    let mut dropped_items: HashSet<ItemId> = HashSet::new();
    loop {
        let mut user_count: HashMap<&UserId, usize> = HashMap::new();
        let mut item_count: HashMap<&ItemId, usize> = HashMap::new();
        for e in &log.events {
            if dropped_users.contains(&e.user) || dropped_items.contains(&e.item) {
                continue;
            }
            *user_count.entry(&e.user).or_default() += 1;
            *item_count.entry(&e.item).or_default() += 1;
        }
        let weak_items: Vec<ItemId> = item_count
            .iter()
            .filter(|(_, &c)| c < min_item_popularity)
            .map(|(q, _)| (*q).clone())
            .collect();
        let weak_users: Vec<UserId> = user_count
            .iter()
            .filter(|(_, &c)| c < min_user_events)
            .map(|(u, _)| (*u).clone())
            .collect();
        if weak_items.is_empty() && weak_users.is_empty() {
            break;
        }
        dropped_items.extend(weak_items);
        dropped_users.extend(weak_users);
    }
    let events: Vec<_> = log
        .events
        .iter()
        .filter(|e| !dropped_users.contains(&e.user) && !dropped_items.contains(&e.item))
        .cloned()
        .collect();
    if events.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(InteractionLog::from_events(events, log.catalog.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CatalogEntry, Event};
    use std::collections::BTreeMap;

    fn log_from(pairs: &[(&str, &str)]) -> InteractionLog {
        let events: Vec<Event> = pairs
            .iter()
            .enumerate()
            .map(|(t, (u, q))| Event {
                user: UserId::from(*u),
                item: ItemId::from(*q),
                timestamp: t as i64,
                rating: 1.0,
            })
            .collect();
        let catalog: BTreeMap<_, _> = pairs
            .iter()
            .map(|(_, q)| (ItemId::from(*q), CatalogEntry::new(*q, "")))
            .collect();
        InteractionLog::from_events(events, catalog)
    }

    /// Oracle: apply one rule per pass, rebuilding counts from scratch, until
    /// a pass changes nothing.
    fn naive_filter(log: &InteractionLog, mu: usize, mi: usize) -> Vec<Event> {
        let mut events = log.events.clone();
        loop {
            let before = events.len();
            let mut ic: HashMap<ItemId, usize> = HashMap::new();
            for e in &events {
                *ic.entry(e.item.clone()).or_default() += 1;
            }
            events.retain(|e| ic[&e.item] >= mi);
            let mut uc: HashMap<UserId, usize> = HashMap::new();
            for e in &events {
                *uc.entry(e.user.clone()).or_default() += 1;
            }
            events.retain(|e| uc[&e.user] >= mu);
            if events.len() == before {
                return events;
            }
        }
    }

    #[test]
    fn dense_log_is_a_fixed_point() {
        let mut pairs = Vec::new();
        for u in ["a", "b", "c", "d", "e"] {
            for q in ["1", "2", "3", "4", "5"] {
                pairs.push((u, q));
            }
        }
        let log = log_from(&pairs);
        let out = filter_dataset(&log, 5, 5).unwrap();
        assert_eq!(out, log);
    }

    #[test]
    fn user_with_four_events_is_removed() {
        let mut pairs = Vec::new();
        for u in ["a", "b", "c", "d", "e"] {
            for q in ["1", "2", "3", "4", "5"] {
                pairs.push((u, q));
            }
        }
        for q in ["1", "2", "3", "4"] {
            pairs.push(("short", q));
        }
        let out = filter_dataset(&log_from(&pairs), 5, 5).unwrap();
        assert!(!out.users.contains(&UserId::from("short")));
        assert_eq!(out.events.len(), 25);
    }

    #[test]
    fn chain_removal_matches_iterated_oracle() {
        // Six users; item x sits exactly at the popularity threshold, so
        // dropping the short user u6 drags x below it, which in turn leaves
        // u5 with four events.
        let mut pairs = Vec::new();
        for u in ["u1", "u2", "u3", "u4"] {
            for q in ["p", "q", "r", "s", "p", "q", "r", "s"] {
                pairs.push((u, q));
            }
        }
        for q in ["p", "q", "r", "s", "x"] {
            pairs.push(("u5", q));
        }
        for q in ["x", "x", "x", "x"] {
            pairs.push(("u6", q));
        }
        let log = log_from(&pairs);
        let out = filter_dataset(&log, 5, 5).unwrap();
        let oracle = naive_filter(&log, 5, 5);
        assert_eq!(out.events, oracle);
        assert!(!out.users.contains(&UserId::from("u5")));
        assert!(!out.users.contains(&UserId::from("u6")));
        assert!(!out.items.contains(&ItemId::from("x")));
        assert_eq!(out.users.len(), 4);
        assert_eq!(out.events.len(), 32);
    }

    #[test]
    fn filtering_everything_is_an_error() {
        let log = log_from(&[("a", "1"), ("a", "2")]);
        assert!(matches!(
            filter_dataset(&log, 5, 5),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn zero_threshold_rejected() {
        let log = log_from(&[("a", "1")]);
        assert!(filter_dataset(&log, 0, 1).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn idempotent_and_matches_oracle(raw in prop::collection::vec((0u8..8, 0u8..8), 0..120)) {
                let owned: Vec<(String, String)> = raw.iter().map(|(u, q)| (format!("u{u}"), format!("i{q}"))).collect();
                let pairs: Vec<(&str, &str)> = owned.iter().map(|(u, q)| (u.as_str(), q.as_str())).collect();
                let log = log_from(&pairs);
                match filter_dataset(&log, 3, 3) {
                    Ok(once) => {
                        prop_assert_eq!(&once.events, &naive_filter(&log, 3, 3));
                        let twice = filter_dataset(&once, 3, 3).unwrap();
                        prop_assert_eq!(twice, once);
                    }
                    Err(Error::EmptyDataset) => prop_assert!(naive_filter(&log, 3, 3).is_empty()),
                    Err(e) => prop_assert!(false, "unexpected {e}"),
                }
            }
        }
    }
}
