use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::InstructionInstance;
use crate::data::ItemId;
use crate::error::{Error, Result};
use crate::semantic::{mapped_similarity, tokenize, TextEmbedder};
use crate::tsv;

pub const DEFAULT_THRESHOLD: f64 = 0.6;
pub const DEFAULT_WEIGHTS: [f64; 4] = [0.25; 4];

const LEXICON_SRC: &str = include_str!("../../data/polarity.txt");

fn lexicon() -> &'static HashMap<String, f64> {
    static LEX: OnceLock<HashMap<String, f64>> = OnceLock::new();
    LEX.get_or_init(|| {
        LEXICON_SRC
            .lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
            .filter_map(|l| {
                let (w, p) = l.split_once('\t')?;
                Some((w.trim().to_lowercase(), p.trim().parse().ok()?))
            })
            .collect()
    })
}

/// Splits on `.`, `?` or `!` followed by whitespace (or the end of text).
pub fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '?' | '!') {
            let boundary = match chars.peek() {
                None => true,
                Some((_, n)) => n.is_whitespace(),
            };
            if boundary {
                let end = i + c.len_utf8();
                let s = text[start..end].trim();
                if !s.is_empty() {
                    out.push(s);
                }
                start = end;
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Mean lexicon polarity of the matched words; 0 when none match.
fn polarity(tokens: &[String]) -> f64 {
    let lex = lexicon();
    let hits: Vec<f64> = tokens.iter().filter_map(|t| lex.get(t).copied()).collect();
    if hits.is_empty() {
        0.0
    } else {
        hits.iter().sum::<f64>() / hits.len() as f64
    }
}

/// `clamp(1 - V/2 - R/2, 0, 1)` with `V` the population variance of sentence
/// polarities and `R` the share of duplicate (overlapping) 3-grams.
pub fn coherence(cot: &str) -> f64 {
    let tokens = tokenize(cot);
    if tokens.is_empty() {
        return 0.0;
    }
    let pols: Vec<f64> = sentences(cot)
        .iter()
        .map(|s| polarity(&tokenize(s)))
        .collect();
    let mean = pols.iter().sum::<f64>() / pols.len() as f64;
    let var = pols.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / pols.len() as f64;
    let rep = if tokens.len() < 3 {
        0.0
    } else {
        let grams: Vec<&[String]> = tokens.windows(3).collect();
        let distinct: HashSet<&[String]> = grams.iter().copied().collect();
        (grams.len() - distinct.len()) as f64 / grams.len() as f64
    };
    (1.0 - 0.5 * var - 0.5 * rep).clamp(0.0, 1.0)
}

/// Label sentence the last sentence of a reasoning text is compared with.
pub fn label_sentence(label: bool) -> &'static str {
    if label {
        "the user will interact with the target item"
    } else {
        "the user will not interact with the target item"
    }
}

fn stated_percent(raw: &str) -> Option<f64> {
    let t = raw.trim_start_matches(|c: char| !c.is_ascii_digit());
    let num: String = t
        .chars()
        .take_while(|c| c.is_ascii_digit() || *c == '.')
        .collect();
    let rest = &t[num.len()..];
    if num.is_empty() || !rest.starts_with('%') {
        return None;
    }
    num.trim_end_matches('.').parse().ok()
}

/// Which candidate the text favours, compared with the recommender's top
/// candidate: 1 on agreement, 0 on disagreement, 0.5 when the text favours
/// no named candidate.
///
/// A mention's scope runs from the id to the next mention or the end of the
/// sentence. A candidate is endorsed when some mention scope has
/// non-negative polarity; the favoured one is the endorsed candidate with
/// the highest stated percentage, earliest mention first on ties.
pub fn rank_agreement(cot: &str, instance: &InstructionInstance) -> f64 {
    let ids: HashMap<String, &ItemId> = instance
        .candidate_scores
        .iter()
        .map(|(q, _)| (q.as_str().to_lowercase(), q))
        .collect();
    // candidate -> (best stated percent, first mention order)
    let mut endorsed: Vec<(&ItemId, f64, usize)> = Vec::new();
    let mut order = 0;
    for s in sentences(cot) {
        let raw: Vec<&str> = s.split_whitespace().collect();
        let clean: Vec<String> = raw
            .iter()
            .map(|t| {
                t.trim_matches(|c: char| !c.is_alphanumeric())
                    .to_lowercase()
            })
            .collect();
        let mentions: Vec<(usize, &ItemId)> = clean
            .iter()
            .enumerate()
            .filter_map(|(i, t)| ids.get(t).map(|q| (i, *q)))
            .collect();
        for (m, &(pos, q)) in mentions.iter().enumerate() {
            let end = mentions.get(m + 1).map(|(p, _)| *p).unwrap_or(raw.len());
            let scope: Vec<String> = clean[pos + 1..end]
                .iter()
                .filter(|t| !t.is_empty())
                .cloned()
                .collect();
            order += 1;
            if polarity(&scope) < 0.0 {
                continue;
            }
            let pct = raw[pos + 1..end]
                .iter()
                .find_map(|t| stated_percent(t))
                .unwrap_or(-1.0);
            match endorsed.iter_mut().find(|(c, _, _)| *c == q) {
                Some(e) => e.1 = e.1.max(pct),
                None => endorsed.push((q, pct, order)),
            }
        }
    }
    let favoured = endorsed
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.2.cmp(&a.2)))
        .map(|(q, _, _)| *q);
    match (favoured, instance.cf_top()) {
        (None, _) => 0.5,
        (Some(f), Some(top)) if f == top => 1.0,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticDimension {
    Completeness,
    Relevance,
    Consistency,
}

fn sim(embedder: &dyn TextEmbedder, a: &str, b: &str) -> f64 {
    mapped_similarity(embedder.embed(a).view(), embedder.embed(b).view()).unwrap_or(0.0)
}

pub fn score_semantic_dimension(
    dim: SemanticDimension,
    cot: &str,
    instance: &InstructionInstance,
    embedder: &dyn TextEmbedder,
) -> f64 {
    if cot.trim().is_empty() {
        return 0.0;
    }
    match dim {
        SemanticDimension::Completeness => {
            let headers = format!(
                "{} {} {}",
                instance.profile_text(),
                instance.target_text,
                instance.prior_text
            );
            sim(embedder, cot, &headers)
        }
        SemanticDimension::Relevance => sim(embedder, cot, &instance.render()),
        SemanticDimension::Consistency => {
            let last = sentences(cot).last().copied().unwrap_or(cot);
            0.5 * sim(embedder, last, label_sentence(instance.label))
                + 0.5 * rank_agreement(cot, instance)
        }
    }
}

/// `sum_j weights[j] * dims[j]`; the weights must sum to 1 within 1e-9.
pub fn composite_score(dims: [f64; 4], weights: [f64; 4]) -> Result<f64> {
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::config(
            "cot.weights",
            format!("must sum to 1, got {total}"),
        ));
    }
    if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(Error::config(
            "cot.weights",
            "each weight must lie in [0, 1]",
        ));
    }
    Ok(dims.iter().zip(weights.iter()).map(|(d, w)| d * w).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotRecord {
    pub instance: InstructionInstance,
    pub cot: String,
    /// Coherence, completeness, relevance, consistency.
    pub dims: [f64; 4],
    pub score: f64,
    pub retained: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CotScorer {
    pub weights: [f64; 4],
    pub threshold: f64,
}

impl Default for CotScorer {
    fn default() -> Self {
        Self {
            weights: DEFAULT_WEIGHTS,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl CotScorer {
    pub fn score(
        &self,
        instance: InstructionInstance,
        cot: String,
        embedder: &dyn TextEmbedder,
    ) -> Result<CotRecord> {
        let dims = [
            coherence(&cot),
            score_semantic_dimension(SemanticDimension::Completeness, &cot, &instance, embedder),
            score_semantic_dimension(SemanticDimension::Relevance, &cot, &instance, embedder),
            score_semantic_dimension(SemanticDimension::Consistency, &cot, &instance, embedder),
        ];
        let score = composite_score(dims, self.weights)?;
        Ok(CotRecord {
            instance,
            cot,
            dims,
            score,
            retained: score >= self.threshold,
        })
    }
}

/// Records with `score >= threshold`, and their share of all records.
pub fn filter_cots(records: &[CotRecord], threshold: f64) -> Result<(Vec<CotRecord>, f64)> {
    if records.is_empty() {
        return Err(Error::CoverageUndefined);
    }
    let retained: Vec<CotRecord> = records
        .iter()
        .filter(|r| r.score >= threshold)
        .cloned()
        .map(|mut r| {
            r.retained = true;
            r
        })
        .collect();
    let coverage = retained.len() as f64 / records.len() as f64;
    Ok((retained, coverage))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub coverage: f64,
    pub hr1: Option<f64>,
    pub rouge_l: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn render(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
        let mut out = String::from("threshold\tcoverage\thr@1\trouge_l\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:.4}\t{:.6}\t{}\t{}",
                r.threshold,
                r.coverage,
                opt(r.hr1),
                opt(r.rouge_l)
            );
        }
        out
    }
}

/// Coverage per threshold, plus HR@1 and, when available, ROUGE-L from
/// `downstream` on each retained set.
pub fn threshold_sweep(
    records: &[CotRecord],
    thresholds: &[f64],
    downstream: Option<&dyn Fn(&[CotRecord]) -> Result<(f64, Option<f64>)>>,
) -> Result<SweepReport> {
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::contract("sweep thresholds must be sorted ascending"));
    }
    let mut rows = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let (retained, coverage) = filter_cots(records, t)?;
        let (hr1, rouge_l) = match downstream {
            Some(f) => {
                let (h, r) = f(&retained)?;
                (Some(h), r)
            }
            None => (None, None),
        };
        rows.push(SweepRow {
            threshold: t,
            coverage,
            hr1,
            rouge_l,
        });
    }
    Ok(SweepReport { rows })
}

/// One JSON object per line, in input order.
pub fn render_cot_records(records: &[CotRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialise"));
        out.push('\n');
    }
    out
}

pub fn write_cot_records(path: &Path, records: &[CotRecord]) -> Result<()> {
    tsv::write_atomic(path, render_cot_records(records).as_bytes())
}

pub fn load_cot_records(path: &Path) -> Result<Vec<CotRecord>> {
    tsv::read_records(path)?
        .into_iter()
        .map(|(ln, line)| {
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: ln,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cot::instance::tests::peter;
    use crate::semantic::FallbackEmbedder;
    use approx::assert_abs_diff_eq;

    const GOOD: &str = "Profile favors high-pace, tech/military sci-fi. Edge of Tomorrow (q12) matches genre, pace, and motif via exosuit time-loop combat; likelihood 88%. Oblivion (q20) is a close alternative at 82% with a steadier tempo. District 9 (q27) is exploratory at 76% given its semi-documentary tone.";
    const BAD: &str = "Re-watch suggests fatigue, shifting toward slower, character-led sci-fi. Edge of Tomorrow (q12) is framed as briefings that dampen pace; the likelihood 88% is viewed cautiously. Oblivion (q20) is de-emphasized for steadier tempo, while District 9 (q27) is exploratory at 76% with grounded tone.";

    #[test]
    fn sentence_split() {
        assert_eq!(
            sentences("One. Two? Three!"),
            vec!["One.", "Two?", "Three!"]
        );
        assert_eq!(sentences("v1.5 is out. ok"), vec!["v1.5 is out.", "ok"]);
        assert!(sentences("").is_empty());
    }

    #[test]
    fn coherence_degenerate_cases() {
        assert_eq!(coherence("the kit arrived on monday"), 1.0);
        assert_eq!(coherence(""), 0.0);
        // seven identical tokens: five identical 3-grams, four duplicates
        assert_abs_diff_eq!(
            coherence("go go go go go go go"),
            1.0 - 0.5 * 0.8,
            epsilon = 1e-12
        );
        // polarities +1 and -1 need lexicon words at the extremes; scale instead
        let c = coherence("it is great. it is awful.");
        let (pg, pa) = (0.8, -0.9);
        let mean = (pg + pa) / 2.0;
        let var = ((pg - mean) * (pg - mean) + (pa - mean) * (pa - mean)) / 2.0;
        assert_abs_diff_eq!(c, 1.0 - 0.5 * var, epsilon = 1e-12);
    }

    #[test]
    fn rank_agreement_on_the_worked_pair() {
        let x = peter();
        assert_eq!(rank_agreement(GOOD, &x), 1.0);
        assert_eq!(rank_agreement(BAD, &x), 0.0);
        assert_eq!(rank_agreement("Nothing specific here.", &x), 0.5);
        assert_eq!(rank_agreement("q20 is the best fit at 90%.", &x), 0.0);
    }

    #[test]
    fn good_reasoning_is_more_consistent() {
        let x = peter();
        let e = FallbackEmbedder;
        let g = score_semantic_dimension(SemanticDimension::Consistency, GOOD, &x, &e);
        let b = score_semantic_dimension(SemanticDimension::Consistency, BAD, &x, &e);
        assert!(g > b, "{g} vs {b}");
    }

    #[test]
    fn prompt_as_reasoning_is_fully_relevant() {
        let x = peter();
        let r = score_semantic_dimension(
            SemanticDimension::Relevance,
            &x.render(),
            &x,
            &FallbackEmbedder,
        );
        assert_abs_diff_eq!(r, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn composite_worked_examples() {
        assert_eq!(
            composite_score([0.77, 0.74, 0.76, 0.73], DEFAULT_WEIGHTS).unwrap(),
            0.75
        );
        assert_abs_diff_eq!(
            composite_score([0.41, 0.43, 0.39, 0.38], DEFAULT_WEIGHTS).unwrap(),
            0.4025,
            epsilon = 1e-12
        );
        assert_eq!(composite_score([0.0; 4], DEFAULT_WEIGHTS).unwrap(), 0.0);
        assert!(matches!(
            composite_score([0.5; 4], [0.3, 0.3, 0.3, 0.3]),
            Err(Error::Config { .. })
        ));
    }

    fn record(score: f64) -> CotRecord {
        CotRecord {
            instance: peter(),
            cot: String::new(),
            dims: [score; 4],
            score,
            retained: false,
        }
    }

    #[test]
    fn filtering_the_worked_pair() {
        let rs = vec![record(0.75), record(0.4025)];
        let (kept, cov) = filter_cots(&rs, 0.6).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.75);
        assert_eq!(cov, 0.5);
        assert_eq!(filter_cots(&rs, 0.0).unwrap().1, 1.0);
        assert_eq!(filter_cots(&rs, 0.9).unwrap().1, 0.0);
        assert!(matches!(
            filter_cots(&[], 0.6),
            Err(Error::CoverageUndefined)
        ));
    }

    #[test]
    fn sweep_below_minimum_is_full_coverage() {
        let rs: Vec<CotRecord> = [0.43, 0.5, 0.65, 0.8].iter().map(|s| record(*s)).collect();
        let rep = threshold_sweep(&rs, &[0.0, 0.2, 0.4, 0.5, 0.6, 0.7], None).unwrap();
        let cov: Vec<f64> = rep.rows.iter().map(|r| r.coverage).collect();
        assert_eq!(cov, vec![1.0, 1.0, 1.0, 0.75, 0.5, 0.25]);
        assert!(rep.render().starts_with("threshold\tcoverage"));
        assert!(threshold_sweep(&rs, &[0.5, 0.2], None).is_err());
    }

    #[test]
    fn sweep_with_downstream_callback() {
        let rs: Vec<CotRecord> = [0.5, 0.7].iter().map(|s| record(*s)).collect();
        let cb = |kept: &[CotRecord]| Ok((kept.len() as f64 / 10.0, Some(0.5)));
        let rep = threshold_sweep(&rs, &[0.0, 0.6], Some(&cb)).unwrap();
        assert_eq!(rep.rows[0].hr1, Some(0.2));
        assert_eq!(rep.rows[1].hr1, Some(0.1));
    }

    #[test]
    fn records_roundtrip() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("cots.jsonl");
        let mut keep = record(0.1 + 0.2);
        keep.retained = true;
        keep.cot = "tab\there\nand a newline".into();
        let rs = vec![keep, record(0.1)];
        write_cot_records(&p, &rs).unwrap();
        assert_eq!(load_cot_records(&p).unwrap(), rs);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn composite_is_monotone(dims in prop::array::uniform4(0.0f64..1.0), j in 0usize..4, bump in 0.0f64..1.0) {
                let base = composite_score(dims, DEFAULT_WEIGHTS).unwrap();
                let mut up = dims;
                up[j] = (up[j] + bump).min(1.0);
                prop_assert!(composite_score(up, DEFAULT_WEIGHTS).unwrap() >= base);
            }

            #[test]
            fn dimensions_stay_in_unit_interval(text in "[a-z .!?%0-9]{0,120}") {
                let x = peter();
                prop_assert!((0.0..=1.0).contains(&coherence(&text)));
                for d in [SemanticDimension::Completeness, SemanticDimension::Relevance, SemanticDimension::Consistency] {
                    let s = score_semantic_dimension(d, &text, &x, &FallbackEmbedder);
                    prop_assert!((0.0..=1.0).contains(&s));
                }
            }

            #[test]
            fn filtering_is_order_free_and_idempotent(scores in prop::collection::vec(0.0f64..1.0, 1..20), t in 0.0f64..1.0) {
                let rs: Vec<CotRecord> = scores.iter().map(|s| record(*s)).collect();
                let (a, _) = filter_cots(&rs, t).unwrap();
                let mut rev = rs.clone();
                rev.reverse();
                let (mut b, _) = filter_cots(&rev, t).unwrap();
                b.reverse();
                prop_assert_eq!(&a, &b);
                if !a.is_empty() {
                    let (again, cov) = filter_cots(&a, t).unwrap();
                    prop_assert_eq!(&again, &a);
                    prop_assert_eq!(cov, 1.0);
                }
            }
        }
    }
}
