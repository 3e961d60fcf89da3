use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ItemId, UserId};
use crate::error::{Error, Result};
use crate::tsv;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub user: UserId,
    pub item: ItemId,
    pub timestamp: i64,
    pub rating: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub title: String,
    pub description: String,
}

impl CatalogEntry {
    pub fn new(title: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            description: description.into(),
        }
    }

    /// Title and description joined, the text every embedder sees.
    pub fn text(&self) -> String {
        if self.description.is_empty() {
            self.title.clone()
        } else {
            format!("{} {}", self.title, self.description)
        }
    }
}

/// Events plus item text. `users` and `items` list ids in first-seen order,
/// which doubles as their dense index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InteractionLog {
    pub users: Vec<UserId>,
    pub items: Vec<ItemId>,
    pub events: Vec<Event>,
    pub catalog: BTreeMap<ItemId, CatalogEntry>,
}

impl InteractionLog {
    /// Builds a log from events, deriving the id lists in first-seen order.
    pub fn from_events(events: Vec<Event>, catalog: BTreeMap<ItemId, CatalogEntry>) -> Self {
        let mut users = Vec::new();
        let mut items = Vec::new();
        let mut seen_u = HashSet::new();
        let mut seen_i = HashSet::new();
        for e in &events {
            if seen_u.insert(e.user.clone()) {
                users.push(e.user.clone());
            }
            if seen_i.insert(e.item.clone()) {
                items.push(e.item.clone());
            }
        }
        Self {
            users,
            items,
            events,
            catalog,
        }
    }

    pub fn user_index(&self) -> HashMap<UserId, usize> {
        self.users
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, u)| (u, i))
            .collect()
    }

    pub fn item_index(&self) -> HashMap<ItemId, usize> {
        self.items
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, q)| (q, i))
            .collect()
    }

    /// Number of events per item, counting re-interactions.
    pub fn item_frequency(&self) -> BTreeMap<ItemId, usize> {
        let mut freq = BTreeMap::new();
        for e in &self.events {
            *freq.entry(e.item.clone()).or_insert(0) += 1;
        }
        freq
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Reads a catalog file: `item_id<TAB>title<TAB>description` per line.
pub fn load_catalog(path: &Path) -> Result<BTreeMap<ItemId, CatalogEntry>> {
    let mut catalog = BTreeMap::new();
    for (ln, line) in tsv::read_records(path)? {
        let f = tsv::split_fields(path, ln, &line, 3)?;
        if f[0].is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: ln,
                message: "empty item id".into(),
            });
        }
        catalog.insert(
            ItemId::new(f[0]),
            CatalogEntry::new(tsv::unescape(f[1]), tsv::unescape(f[2])),
        );
    }
    Ok(catalog)
}

/// Reads `user_id<TAB>item_id<TAB>timestamp<TAB>rating` records and joins
/// them with the catalog. Duplicate events are kept.
pub fn load_interactions(interactions: &Path, catalog: &Path) -> Result<InteractionLog> {
    let catalog = load_catalog(catalog)?;
    let mut events = Vec::new();
    for (ln, line) in tsv::read_records(interactions)? {
        let f = tsv::split_fields(interactions, ln, &line, 4)?;
        let parse_err = |message: String| Error::Parse {
            path: interactions.to_path_buf(),
            line: ln,
            message,
        };
        let (user, item) = (f[0].trim(), f[1].trim());
        if user.is_empty() || item.is_empty() {
            return Err(parse_err("empty user or item id".into()));
        }
        let timestamp: i64 = f[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("timestamp `{}` is not an integer", f[2].trim())))?;
        let rating: f64 = f[3]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("rating `{}` is not a number", f[3].trim())))?;
        let item = ItemId::new(item);
        if !catalog.contains_key(&item) {
            return Err(Error::Referential {
                path: interactions.to_path_buf(),
                line: ln,
                item: item.0,
            });
        }
        events.push(Event {
            user: UserId::new(user),
            item,
            timestamp,
            rating,
        });
    }
    Ok(InteractionLog::from_events(events, catalog))
}

/// A free-text record attached to a `(user, item)` pair: review summaries
/// used as explanation references, or stored explanations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserItemText {
    pub user: UserId,
    pub item: ItemId,
    pub text: String,
}

/// Reads `user_id<TAB>item_id<TAB>text` records; the text field is
/// tab-escaped. Later records for the same pair win.
pub fn load_user_item_texts(path: &Path) -> Result<BTreeMap<(UserId, ItemId), String>> {
    let mut out = BTreeMap::new();
    for (ln, line) in tsv::read_records(path)? {
        let f = tsv::split_fields(path, ln, &line, 3)?;
        out.insert((UserId::new(f[0]), ItemId::new(f[1])), tsv::unescape(f[2]));
    }
    Ok(out)
}

pub fn write_user_item_texts(path: &Path, records: &[UserItemText]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "{}\t{}\t{}", r.user, r.item, tsv::escape(&r.text));
    }
    tsv::write_atomic(path, out.as_bytes())
}

pub fn write_interactions(path: &Path, events: &[Event]) -> Result<()> {
    let mut out = String::new();
    for e in events {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:?}",
            e.user, e.item, e.timestamp, e.rating
        );
    }
    tsv::write_atomic(path, out.as_bytes())
}

pub fn render_catalog(catalog: &BTreeMap<ItemId, CatalogEntry>) -> String {
    let mut out = String::new();
    for (id, c) in catalog {
        let _ = writeln!(
            out,
            "{}\t{}\t{}",
            id,
            tsv::escape(&c.title),
            tsv::escape(&c.description)
        );
    }
    out
}

pub fn write_catalog(path: &Path, catalog: &BTreeMap<ItemId, CatalogEntry>) -> Result<()> {
    tsv::write_atomic(path, render_catalog(catalog).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn empty_file_gives_empty_log() {
        let d = tempfile::tempdir().unwrap();
        let i = write(d.path(), "i.tsv", "");
        let c = write(d.path(), "c.tsv", "");
        let log = load_interactions(&i, &c).unwrap();
        assert_eq!(
            (log.users.len(), log.items.len(), log.events.len()),
            (0, 0, 0)
        );
    }

    #[test]
    fn single_line_log() {
        let d = tempfile::tempdir().unwrap();
        let i = write(d.path(), "i.tsv", "u1\ti1\t100\t5.0\n");
        let c = write(d.path(), "c.tsv", "i1\tTitle\tDesc\n");
        let log = load_interactions(&i, &c).unwrap();
        assert_eq!(
            (log.users.len(), log.items.len(), log.events.len()),
            (1, 1, 1)
        );
        assert_eq!(log.events[0].timestamp, 100);
    }

    #[test]
    fn duplicate_events_are_kept() {
        let d = tempfile::tempdir().unwrap();
        let i = write(
            d.path(),
            "i.tsv",
            "u1\ti1\t100\t5.0\nu1\ti2\t101\t4.0\nu1\ti1\t100\t5.0\nu2\ti2\t50\t3.0\n",
        );
        let c = write(d.path(), "c.tsv", "i1\tA\ta\ni2\tB\tb\n");
        let log = load_interactions(&i, &c).unwrap();
        assert_eq!(log.events.len(), 4);
        assert_eq!(log.users, vec![UserId::from("u1"), UserId::from("u2")]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let d = tempfile::tempdir().unwrap();
        let i = write(d.path(), "i.tsv", "u1\ti1\t100\t5.0\nu1\ti1\tnoon\t5.0\n");
        let c = write(d.path(), "c.tsv", "i1\tA\ta\n");
        match load_interactions(&i, &c) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn item_without_catalog_entry_is_referential_error() {
        let d = tempfile::tempdir().unwrap();
        let i = write(d.path(), "i.tsv", "u1\ti9\t100\t5.0\n");
        let c = write(d.path(), "c.tsv", "i1\tA\ta\n");
        assert!(matches!(
            load_interactions(&i, &c),
            Err(Error::Referential { .. })
        ));
    }
}
