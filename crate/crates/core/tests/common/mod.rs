//! Brute-force references for the ranking and text metrics. They share no
//! code with the library: counts are done by linear scans and the longest
//! common subsequence by enumerating every subsequence of the candidate.

#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;
use xrec_core::data::ItemId;

pub fn hr_oracle(rankings: &[Vec<ItemId>], targets: &[ItemId], k: usize) -> f64 {
    let mut hits = 0.0;
    for (r, t) in rankings.iter().zip(targets) {
        for x in r.iter().take(k) {
            if x == t {
                hits += 1.0;
            }
        }
    }
    hits / rankings.len() as f64
}

pub fn ndcg_oracle(rankings: &[Vec<ItemId>], targets: &[ItemId], k: usize) -> f64 {
    let mut total = 0.0;
    for (r, t) in rankings.iter().zip(targets) {
        let rel: Vec<f64> = (0..k).map(|j| if &r[j] == t { 1.0 } else { 0.0 }).collect();
        let dcg: f64 = rel
            .iter()
            .enumerate()
            .map(|(j, g)| (2f64.powf(*g) - 1.0) / ((j + 2) as f64).log2())
            .sum();
        // one relevant item exists in the catalog, so the ideal list starts with it
        let mut ideal = vec![0.0; k];
        ideal[0] = 1.0;
        let idcg: f64 = ideal
            .iter()
            .enumerate()
            .map(|(j, g)| (2f64.powf(*g) - 1.0) / ((j + 2) as f64).log2())
            .sum();
        total += dcg / idcg;
    }
    total / rankings.len() as f64
}

fn count_of(tokens: &[String], gram: &[String]) -> usize {
    let n = gram.len();
    if tokens.len() < n {
        return 0;
    }
    (0..=tokens.len() - n)
        .filter(|&i| &tokens[i..i + n] == gram)
        .count()
}

pub fn bleu_oracle(c: &[String], r: &[String], max_n: usize) -> f64 {
    if c.is_empty() {
        return 0.0;
    }
    let mut product = 1.0;
    for n in 1..=max_n {
        if c.len() < n {
            return 0.0;
        }
        let grams: Vec<&[String]> = (0..=c.len() - n).map(|i| &c[i..i + n]).collect();
        let mut seen: Vec<&[String]> = Vec::new();
        let mut clipped = 0usize;
        for g in &grams {
            if seen.contains(g) {
                continue;
            }
            seen.push(g);
            clipped += count_of(c, g).min(count_of(r, g));
        }
        if clipped == 0 {
            return 0.0;
        }
        product *= (clipped as f64 / grams.len() as f64).powf(1.0 / max_n as f64);
    }
    let bp = if c.len() > r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    };
    bp * product
}

pub fn rouge1_oracle(c: &[String], r: &[String]) -> f64 {
    if c.is_empty() {
        return 0.0;
    }
    let mut seen: Vec<&String> = Vec::new();
    let mut overlap = 0usize;
    for w in r {
        if seen.contains(&w) {
            continue;
        }
        seen.push(w);
        let in_c = c.iter().filter(|x| *x == w).count();
        let in_r = r.iter().filter(|x| *x == w).count();
        overlap += in_c.min(in_r);
    }
    overlap as f64 / r.len() as f64
}

fn is_subsequence(a: &[&String], b: &[String]) -> bool {
    let mut it = b.iter();
    a.iter().all(|x| it.any(|y| y == *x))
}

/// Candidates are kept short, so all `2^|c|` subsequences are tried.
pub fn rouge_l_oracle(c: &[String], r: &[String]) -> f64 {
    assert!(
        c.len() <= 16,
        "oracle is exponential in the candidate length"
    );
    let mut best = 0usize;
    for mask in 0u32..(1u32 << c.len()) {
        let sub: Vec<&String> = (0..c.len())
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| &c[i])
            .collect();
        if sub.len() > best && is_subsequence(&sub, r) {
            best = sub.len();
        }
    }
    if best == 0 {
        return 0.0;
    }
    let p = best as f64 / c.len() as f64;
    let rec = best as f64 / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

pub fn random_tokens<R: Rng>(rng: &mut R, min: usize, max: usize) -> Vec<String> {
    const VOCAB: [&str; 5] = ["a", "b", "c", "d", "e"];
    let n = rng.random_range(min..=max);
    (0..n)
        .map(|_| VOCAB[rng.random_range(0..VOCAB.len())].to_string())
        .collect()
}

/// Between one and five users, each with a ranking of 5 to 15 distinct items
/// and a target that may fall outside it, plus a valid `k`.
pub fn random_ranking_case<R: Rng>(rng: &mut R) -> (Vec<Vec<ItemId>>, Vec<ItemId>, usize) {
    let pool: Vec<ItemId> = (0..20).map(|i| ItemId::new(format!("i{i}"))).collect();
    let users = rng.random_range(1..=5);
    let len = rng.random_range(5..=15);
    let mut rankings = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..users {
        let mut p = pool.clone();
        p.shuffle(rng);
        p.truncate(len);
        rankings.push(p);
        targets.push(pool[rng.random_range(0..pool.len())].clone());
    }
    let k = rng.random_range(1..=len);
    (rankings, targets, k)
}
