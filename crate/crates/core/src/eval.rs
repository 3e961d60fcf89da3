//! Ranking and text metrics, and the evaluation protocols built on them.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::EmbeddingSource;
use crate::data::{CatalogEntry, ColdWarmPartition, ItemId, SplitDataset, UserId};
use crate::error::{Error, Result};
use crate::pipeline::Pipeline;
use crate::projection::CotSignals;
use crate::rng::derive;
use crate::semantic::{tokenize, SemanticStore};

pub const DEFAULT_POOL_SIZE: usize = 100;

fn check_rankings(rankings: &[Vec<ItemId>], targets: &[ItemId], k: usize) -> Result<()> {
    if rankings.is_empty() || rankings.len() != targets.len() {
        return Err(Error::contract(
            "one ranking and one target per user are required",
        ));
    }
    if k == 0 {
        return Err(Error::contract("k must be at least 1"));
    }
    if let Some(r) = rankings.iter().find(|r| r.len() < k) {
        return Err(Error::contract(format!(
            "ranking of {} items is shorter than k = {k}",
            r.len()
        )));
    }
    Ok(())
}

fn rank_of(ranking: &[ItemId], target: &ItemId, k: usize) -> Option<usize> {
    ranking
        .iter()
        .take(k)
        .position(|q| q == target)
        .map(|i| i + 1)
}

/// Share of users whose target is among their first `k` items.
pub fn hit_rate_at_k(rankings: &[Vec<ItemId>], targets: &[ItemId], k: usize) -> Result<f64> {
    check_rankings(rankings, targets, k)?;
    let hits = rankings
        .iter()
        .zip(targets)
        .filter(|(r, t)| rank_of(r, t, k).is_some())
        .count();
    Ok(hits as f64 / rankings.len() as f64)
}

/// Mean of `1 / log2(rank + 1)` over users (0 outside the top `k`); with a
/// single relevant item the ideal DCG is 1.
pub fn ndcg_at_k(rankings: &[Vec<ItemId>], targets: &[ItemId], k: usize) -> Result<f64> {
    check_rankings(rankings, targets, k)?;
    let sum: f64 = rankings
        .iter()
        .zip(targets)
        .filter_map(|(r, t)| rank_of(r, t, k))
        .map(|j| 1.0 / ((j + 1) as f64).log2())
        .sum();
    Ok(sum / rankings.len() as f64)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

fn clipped_overlap(candidate: &[String], reference: &[String], n: usize) -> usize {
    let r = ngram_counts(reference, n);
    ngram_counts(candidate, n)
        .iter()
        .map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0)))
        .sum()
}

/// Unsmoothed BLEU with uniform weights over orders `1..=max_n` and the
/// brevity penalty `exp(1 - l/m)` for candidates no longer than the reference.
pub fn bleu(candidate: &[String], reference: &[String], max_n: usize) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::contract("BLEU needs a non-empty reference"));
    }
    if max_n == 0 {
        return Err(Error::contract("BLEU needs max_n >= 1"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let total = candidate.len().saturating_sub(n - 1);
        let matched = clipped_overlap(candidate, reference, n);
        if total == 0 || matched == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln() / max_n as f64;
    }
    let (m, l) = (candidate.len() as f64, reference.len() as f64);
    let bp = if m > l { 1.0 } else { (1.0 - l / m).exp() };
    Ok(bp * log_sum.exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RougeVariant {
    /// Clipped unigram recall.
    Rouge1,
    /// F1 of the longest common subsequence.
    RougeL,
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge(candidate: &[String], reference: &[String], variant: RougeVariant) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::contract("ROUGE needs a non-empty reference"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    Ok(match variant {
        RougeVariant::Rouge1 => {
            clipped_overlap(candidate, reference, 1) as f64 / reference.len() as f64
        }
        RougeVariant::RougeL => {
            let l = lcs_len(candidate, reference) as f64;
            if l == 0.0 {
                0.0
            } else {
                let p = l / candidate.len() as f64;
                let r = l / reference.len() as f64;
                2.0 * p * r / (p + r)
            }
        }
    })
}

/// Ranks candidate pools for users.
pub trait Ranker: Sync {
    /// `candidates` reordered best first.
    fn rank(&self, user: &UserId, history: &[ItemId], candidates: &[ItemId])
        -> Result<Vec<ItemId>>;
}

/// Produces an explanation for recommending `item` to `user`.
pub trait Explainer: Sync {
    fn explain(&self, user: &UserId, history: &[ItemId], item: &ItemId) -> Result<String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Standard,
    Cold,
    Warm,
    ZeroShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub protocol: Protocol,
    pub n_users: usize,
    /// Users without a usable test item.
    pub skipped: usize,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    /// Text metrics over users with a reference explanation; `None` when
    /// no explanations were evaluated.
    pub bleu4: Option<f64>,
    pub rouge1: Option<f64>,
    pub rouge_l: Option<f64>,
    pub n_explained: usize,
    pub seed: u64,
    pub config_digest: String,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialise");
        s.push('\n');
        s
    }

    /// Fixed-width summary table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12}{:>10}",
            "protocol",
            format!("{:?}", self.protocol).to_lowercase()
        );
        let _ = writeln!(out, "{:<12}{:>10}", "users", self.n_users);
        for (k, v) in &self.hr {
            let _ = writeln!(out, "{:<12}{:>10.4}", format!("HR@{k}"), v);
        }
        for (k, v) in &self.ndcg {
            let _ = writeln!(out, "{:<12}{:>10.4}", format!("NDCG@{k}"), v);
        }
        for (name, v) in [
            ("BLEU-4", self.bleu4),
            ("ROUGE-1", self.rouge1),
            ("ROUGE-L", self.rouge_l),
        ] {
            if let Some(v) = v {
                let _ = writeln!(out, "{name:<12}{v:>10.4}");
            }
        }
        out
    }
}

/// Evaluation settings shared by every protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSetup {
    pub ks: Vec<usize>,
    pub pool_size: usize,
    pub seed: u64,
    pub config_digest: String,
}

impl EvalSetup {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::config("eval.ks", "must list positive cut-offs"));
        }
        let max_k = self.ks.iter().copied().max().unwrap_or(0);
        if self.pool_size < max_k {
            return Err(Error::config(
                "eval.pool_size",
                format!("must be at least max(ks) = {max_k}"),
            ));
        }
        Ok(())
    }
}

/// The target plus `pool_size - 1` distinct items drawn uniformly from
/// `universe \ {target}`, sorted by id. History items may be drawn.
pub fn sample_pool(
    target: &ItemId,
    universe: &[ItemId],
    pool_size: usize,
    seed: u64,
    user: &UserId,
) -> Result<Vec<ItemId>> {
    let others: Vec<&ItemId> = universe.iter().filter(|q| *q != target).collect();
    if others.len() + 1 < pool_size {
        return Err(Error::contract(format!(
            "pool of {pool_size} needs {} other items, only {} exist",
            pool_size - 1,
            others.len()
        )));
    }
    let mut rng = derive(seed, &format!("pool\t{user}"));
    let mut pool: Vec<ItemId> = others
        .choose_multiple(&mut rng, pool_size - 1)
        .map(|q| (*q).clone())
        .collect();
    pool.push(target.clone());
    pool.sort();
    Ok(pool)
}

struct UserOutcome {
    ranking: Vec<ItemId>,
    target: ItemId,
    text: Option<(f64, f64, f64)>,
}

/// Ranks a pool for every selected test user and aggregates the metrics.
/// `universe` is the item set negatives are drawn from; targets outside it
/// are still evaluated. Explanations are scored against `references` when
/// both are given.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_users(
    ranker: &dyn Ranker,
    explainer: Option<&dyn Explainer>,
    references: Option<&BTreeMap<(UserId, ItemId), String>>,
    split: &SplitDataset,
    users: &[UserId],
    universe: &[ItemId],
    protocol: Protocol,
    setup: &EvalSetup,
) -> Result<MetricReport> {
    setup.validate()?;
    let outcomes: Vec<Option<UserOutcome>> = users
        .par_iter()
        .map(|u| -> Result<Option<UserOutcome>> {
            let Some(s) = split.users.get(u) else {
                return Ok(None);
            };
            let pool = sample_pool(&s.test, universe, setup.pool_size, setup.seed, u)?;
            let history = s.test_history();
            let ranking = ranker.rank(u, &history, &pool)?;
            let text = match (
                explainer,
                references.and_then(|r| r.get(&(u.clone(), s.test.clone()))),
            ) {
                (Some(e), Some(reference)) => {
                    let cand = tokenize(&e.explain(u, &history, &s.test)?);
                    let refr = tokenize(reference);
                    if refr.is_empty() {
                        None
                    } else {
                        Some((
                            bleu(&cand, &refr, 4)?,
                            rouge(&cand, &refr, RougeVariant::Rouge1)?,
                            rouge(&cand, &refr, RougeVariant::RougeL)?,
                        ))
                    }
                }
                _ => None,
            };
            Ok(Some(UserOutcome {
                ranking,
                target: s.test.clone(),
                text,
            }))
        })
        .collect::<Result<_>>()?;
    let skipped = outcomes.iter().filter(|o| o.is_none()).count();
    let done: Vec<UserOutcome> = outcomes.into_iter().flatten().collect();
    if done.is_empty() {
        return Err(Error::EmptyCohort(
            format!("{protocol:?} evaluation has no users").to_lowercase(),
        ));
    }
    let rankings: Vec<Vec<ItemId>> = done.iter().map(|o| o.ranking.clone()).collect();
    let targets: Vec<ItemId> = done.iter().map(|o| o.target.clone()).collect();
    let mut hr = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &k in &setup.ks {
        hr.insert(k, hit_rate_at_k(&rankings, &targets, k)?);
        ndcg.insert(k, ndcg_at_k(&rankings, &targets, k)?);
    }
    let texts: Vec<(f64, f64, f64)> = done.iter().filter_map(|o| o.text).collect();
    let mean = |f: fn(&(f64, f64, f64)) -> f64| {
        (!texts.is_empty()).then(|| texts.iter().map(f).sum::<f64>() / texts.len() as f64)
    };
    Ok(MetricReport {
        protocol,
        n_users: done.len(),
        skipped,
        hr,
        ndcg,
        bleu4: mean(|t| t.0),
        rouge1: mean(|t| t.1),
        rouge_l: mean(|t| t.2),
        n_explained: texts.len(),
        seed: setup.seed,
        config_digest: setup.config_digest.clone(),
    })
}

/// Standard leave-one-out evaluation of every user in `split`.
pub fn evaluate_split(
    ranker: &dyn Ranker,
    explainer: Option<&dyn Explainer>,
    references: Option<&BTreeMap<(UserId, ItemId), String>>,
    split: &SplitDataset,
    universe: &[ItemId],
    setup: &EvalSetup,
) -> Result<MetricReport> {
    let users: Vec<UserId> = split.users.keys().cloned().collect();
    evaluate_users(
        ranker,
        explainer,
        references,
        split,
        &users,
        universe,
        Protocol::Standard,
        setup,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColdWarmReport {
    pub warm: MetricReport,
    pub cold: MetricReport,
    /// `(warm - cold) / warm` of HR at each k; `None` when warm HR is 0.
    pub gap: BTreeMap<usize, Option<f64>>,
}

/// Separate reports for users whose test item is warm and cold.
pub fn cold_warm_report(
    ranker: &dyn Ranker,
    split: &SplitDataset,
    partition: &ColdWarmPartition,
    universe: &[ItemId],
    setup: &EvalSetup,
) -> Result<ColdWarmReport> {
    let cohort = |cold: bool| -> Vec<UserId> {
        split
            .users
            .iter()
            .filter(|(_, s)| {
                if cold {
                    partition.is_cold(&s.test)
                } else {
                    partition.is_warm(&s.test)
                }
            })
            .map(|(u, _)| u.clone())
            .collect()
    };
    let (warm_users, cold_users) = (cohort(false), cohort(true));
    if warm_users.is_empty() {
        return Err(Error::EmptyCohort("no test user has a warm target".into()));
    }
    if cold_users.is_empty() {
        return Err(Error::EmptyCohort("no test user has a cold target".into()));
    }
    let warm = evaluate_users(
        ranker,
        None,
        None,
        split,
        &warm_users,
        universe,
        Protocol::Warm,
        setup,
    )?;
    let cold = evaluate_users(
        ranker,
        None,
        None,
        split,
        &cold_users,
        universe,
        Protocol::Cold,
        setup,
    )?;
    let gap = warm
        .hr
        .iter()
        .map(|(k, w)| (*k, (*w > 0.0).then(|| (w - cold.hr[k]) / w)))
        .collect();
    Ok(ColdWarmReport { warm, cold, gap })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub report: MetricReport,
    /// Share of target-domain item embeddings that took the semantic path.
    pub semantic_share: f64,
    pub n_items: usize,
}

/// Evaluates the frozen `source` pipeline on another domain. Nothing is
/// retrained; target items reach the prompt through the semantic path.
pub fn zero_shot_eval(
    source: &Pipeline,
    catalog: &BTreeMap<ItemId, CatalogEntry>,
    semantic: SemanticStore,
    split: &SplitDataset,
    cots: CotSignals,
    setup: &EvalSetup,
) -> Result<ZeroShotReport> {
    let target = source.transfer(catalog, semantic, cots)?;
    let n_items = target.routing().len();
    let semantic_items = target
        .routing()
        .values()
        .filter(|s| **s == EmbeddingSource::SemanticPath)
        .count();
    let universe: Vec<ItemId> = catalog.keys().cloned().collect();
    let users: Vec<UserId> = split.users.keys().cloned().collect();
    let ranker = target.ranker()?;
    let report = evaluate_users(
        &ranker,
        None,
        None,
        split,
        &users,
        &universe,
        Protocol::ZeroShot,
        setup,
    )?;
    Ok(ZeroShotReport {
        report,
        semantic_share: semantic_items as f64 / n_items.max(1) as f64,
        n_items,
    })
}
