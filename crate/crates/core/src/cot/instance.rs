use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::{CatalogEntry, ItemId, UserId};
use crate::error::{Error, Result};

pub const TASK_INSTRUCTION: &str = "Given the user's purchase history, the target item and the collaborative \
prior, reason step by step about the user profile, the target item and their consistency, then decide whether \
the user will interact with the target item.";

/// The four-part prompt `x` and its label `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionInstance {
    pub user: UserId,
    pub target: ItemId,
    pub instruction: String,
    /// Oldest first, one rendered line per history entry.
    pub history: Vec<String>,
    pub target_text: String,
    pub prior_text: String,
    /// Recommender scores of the candidates considered alongside the target,
    /// used to check which item a reasoning text favours.
    pub candidate_scores: Vec<(ItemId, f64)>,
    pub label: bool,
}

impl InstructionInstance {
    /// The prompt `x`.
    pub fn render(&self) -> String {
        format!(
            "{}\nHistory:\n{}\nTarget: {}\nPrior: {}",
            self.instruction,
            self.history.join("\n"),
            self.target_text,
            self.prior_text
        )
    }

    pub fn profile_text(&self) -> String {
        self.history.join(" ")
    }

    /// The candidate the recommender scores highest, ties by id.
    pub fn cf_top(&self) -> Option<&ItemId> {
        self.candidate_scores
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
            .map(|(q, _)| q)
    }
}

fn item_text(catalog: &BTreeMap<ItemId, CatalogEntry>, q: &ItemId) -> Result<String> {
    catalog
        .get(q)
        .map(|c| format!("{q}: {}", c.text()))
        .ok_or_else(|| Error::Data(format!("item `{q}` has no catalog text")))
}

/// Assembles instruction, the last `k_prompt` history items (repeats marked
/// as re-watches), the target text and the verbalised prior.
#[allow(clippy::too_many_arguments)]
pub fn build_instruction_instance(
    user: &UserId,
    history: &[ItemId],
    target: &ItemId,
    prior_text: &str,
    candidate_scores: Vec<(ItemId, f64)>,
    label: bool,
    catalog: &BTreeMap<ItemId, CatalogEntry>,
    k_prompt: usize,
) -> Result<InstructionInstance> {
    if history.is_empty() {
        return Err(Error::contract(format!(
            "instruction instance for `{user}` has no history"
        )));
    }
    if k_prompt == 0 {
        return Err(Error::config("cot.k_prompt", "must be at least 1"));
    }
    let start = history.len().saturating_sub(k_prompt);
    let mut seen: HashSet<&ItemId> = history[..start].iter().collect();
    let mut lines = Vec::with_capacity(history.len() - start);
    for q in &history[start..] {
        if seen.insert(q) {
            lines.push(item_text(catalog, q)?);
        } else {
            lines.push(format!("{q}: (re-watch)"));
        }
    }
    Ok(InstructionInstance {
        user: user.clone(),
        target: target.clone(),
        instruction: TASK_INSTRUCTION.to_string(),
        history: lines,
        target_text: item_text(catalog, target)?,
        prior_text: prior_text.to_string(),
        candidate_scores,
        label,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn peter_catalog() -> BTreeMap<ItemId, CatalogEntry> {
        [
            ("q5", "Spider-Man", "superhero action"),
            ("q8", "Captain America", "superhero military action"),
            ("q10", "Iron Man", "superhero tech action"),
            (
                "q12",
                "Edge of Tomorrow",
                "sci-fi, time-loop, military, high pace",
            ),
            ("q20", "Oblivion", "sci-fi, dystopian, tech, med-high pace"),
            ("q27", "District 9", "sci-fi, aliens, docu-style, med pace"),
        ]
        .into_iter()
        .map(|(q, t, d)| (ItemId::from(q), CatalogEntry::new(t, d)))
        .collect()
    }

    pub(crate) fn peter() -> InstructionInstance {
        let history: Vec<ItemId> = ["q5", "q8", "q10", "q5"]
            .iter()
            .map(|s| ItemId::from(*s))
            .collect();
        let scores = vec![
            (ItemId::from("q12"), 0.88),
            (ItemId::from("q20"), 0.82),
            (ItemId::from("q27"), 0.76),
        ];
        build_instruction_instance(
            &UserId::from("Peter"),
            &history,
            &ItemId::from("q12"),
            "likelihood 88%",
            scores,
            true,
            &peter_catalog(),
            10,
        )
        .unwrap()
    }

    #[test]
    fn peter_prompt() {
        let x = peter();
        let text = x.render();
        assert!(text.contains("likelihood 88%"));
        assert_eq!(x.history.len(), 4);
        assert_eq!(x.history[3], "q5: (re-watch)");
        assert!(x.history[0].starts_with("q5: Spider-Man"));
        assert!(text.find("History:").unwrap() < text.find("Target:").unwrap());
        assert!(text.find("Target:").unwrap() < text.find("Prior:").unwrap());
        assert_eq!(x.cf_top().unwrap().as_str(), "q12");
    }

    #[test]
    fn long_history_is_truncated() {
        let catalog: BTreeMap<ItemId, CatalogEntry> = (0..61)
            .map(|i| {
                (
                    ItemId::new(format!("i{i}")),
                    CatalogEntry::new(format!("t{i}"), ""),
                )
            })
            .collect();
        let history: Vec<ItemId> = (0..60).map(|i| ItemId::new(format!("i{i}"))).collect();
        let x = build_instruction_instance(
            &UserId::from("u"),
            &history,
            &ItemId::from("i60"),
            "likelihood 50%",
            vec![],
            false,
            &catalog,
            10,
        )
        .unwrap();
        assert_eq!(x.history.len(), 10);
        assert!(x.history[0].starts_with("i50:"));
        assert!(x.history[9].starts_with("i59:"));
    }

    #[test]
    fn missing_text_names_the_item() {
        let err = build_instruction_instance(
            &UserId::from("u"),
            &[ItemId::from("q5")],
            &ItemId::from("nope"),
            "likelihood 1%",
            vec![],
            true,
            &peter_catalog(),
            10,
        )
        .unwrap_err();
        assert!(err.to_string().contains("nope"));
    }
}
