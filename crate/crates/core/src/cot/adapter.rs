use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use super::InstructionInstance;
use crate::data::{CatalogEntry, ItemId, UserId};
use crate::error::{Error, Result};
use crate::rng::stable_hash;
use crate::semantic::tokenize;
use crate::tsv;

/// Reasoning texts are cut to this many whitespace tokens.
pub const MAX_COT_TOKENS: usize = 180;

/// Separates the predicted title from the explanation in a single-pass
/// response.
pub const EXPLANATION_DELIMITER: &str = "<<EXPLANATION>>";

/// Zero-shot reasoning prompt; `{label}` and `{prompt}` are substituted.
pub const COT_TEMPLATE: &str =
    "Step 1, user profile: summarise the preferences shown by the history.
Step 2, target item: relate the target item to that profile.
Step 3, consistency: check the conclusion against the collaborative prior and the label.
Label: {label}

{prompt}";

/// Keeps the first `max` whitespace tokens of `text`, preserving the
/// original spacing between them.
pub fn truncate_tokens(text: &str, max: usize) -> String {
    let mut count = 0;
    let mut in_token = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            in_token = false;
        } else if !in_token {
            in_token = true;
            count += 1;
            if count > max {
                return text[..i].trim_end().to_string();
            }
        }
    }
    text.to_string()
}

/// A model endpoint that answers one prompt with one text.
pub trait Transport: Send + Sync {
    fn send(&self, prompt: &str) -> std::result::Result<String, String>;
}

/// JSON over HTTP: posts `{"prompt": ...}` and reads the `text` field of
/// the reply.
pub struct HttpTransport {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            agent,
        }
    }
}

impl Transport for HttpTransport {
    fn send(&self, prompt: &str) -> std::result::Result<String, String> {
        let body = serde_json::json!({ "prompt": prompt }).to_string();
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(|e| e.to_string())?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| e.to_string())?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        value
            .get("text")
            .and_then(|t| t.as_str())
            .map(str::to_string)
            .ok_or_else(|| "response has no `text` field".to_string())
    }
}

pub struct RemoteAdapter {
    transport: Box<dyn Transport>,
    retries: usize,
}

impl RemoteAdapter {
    pub fn new(transport: Box<dyn Transport>, retries: usize) -> Self {
        Self { transport, retries }
    }

    fn call(&self, prompt: &str) -> Result<String> {
        let mut last = String::new();
        for _ in 0..=self.retries {
            match self.transport.send(prompt) {
                Ok(text) => return Ok(text),
                Err(e) => last = e,
            }
        }
        Err(Error::Transport {
            retries: self.retries,
            message: last,
        })
    }
}

/// Stored texts keyed by `(user, item)`, optionally backed by deterministic
/// template expansion for pairs that have no entry.
#[derive(Debug, Clone, Default)]
pub struct FixtureAdapter {
    pub cots: BTreeMap<(UserId, ItemId), String>,
    pub explanations: BTreeMap<(UserId, ItemId), String>,
    /// When set, missing pairs are expanded from templates using this
    /// catalog instead of failing.
    pub synthesize: Option<BTreeMap<ItemId, CatalogEntry>>,
    /// Percentage of synthesized reasoning texts that use the well-formed
    /// template; the rest use a deliberately poor one.
    pub good_percent: u64,
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "the", "of", "for", "with", "to", "in", "on", "re-watch", "feel", "lovers",
    "x",
];

/// The three most frequent content words of `lines`, ties alphabetical.
fn keywords(lines: &[String]) -> Vec<String> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for line in lines {
        // skip the leading item id
        let body = line.split_once(": ").map(|(_, b)| b).unwrap_or(line);
        for t in tokenize(body) {
            if STOPWORDS.contains(&t.as_str()) || t.chars().any(|c| c.is_ascii_digit()) {
                continue;
            }
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.into_iter().take(3).map(|(w, _)| w).collect()
}

impl FixtureAdapter {
    fn synth_cot(&self, x: &InstructionInstance) -> String {
        let key = format!("{}\t{}", x.user, x.target);
        let good = stable_hash(&key) % 100 < self.good_percent;
        let kw = keywords(&x.history).join(", ");
        let title = x
            .target_text
            .split_once(": ")
            .map(|(_, b)| b)
            .unwrap_or(&x.target_text);
        let title: String = title
            .split_whitespace()
            .take(4)
            .collect::<Vec<_>>()
            .join(" ");
        let q = &x.target;
        match (good, x.label) {
            (true, true) => format!(
                "Profile favors {kw}. {q} matches this profile with {title}; {}. \
                 The history supports the choice, so the user will interact with the target item.",
                x.prior_text
            ),
            (true, false) => format!(
                "Profile favors {kw}. {q} drifts away from this profile as {title}; {} is weak. \
                 The user will not interact with the target item.",
                x.prior_text
            ),
            (false, _) => format!(
                "Fatigue fatigue, awful and great. {q} {q} {q} maybe maybe maybe maybe maybe. \
                 Great awful, boring exciting!"
            ),
        }
    }

    fn synth_explanation(
        &self,
        item: &ItemId,
        catalog: &BTreeMap<ItemId, CatalogEntry>,
    ) -> Result<String> {
        let entry = catalog
            .get(item)
            .ok_or_else(|| Error::Data(format!("item `{item}` has no catalog text")))?;
        let title: Vec<&str> = entry.title.split_whitespace().collect();
        let desc: Vec<&str> = entry.description.split_whitespace().take(2).collect();
        Ok(format!(
            "{} and {} pick for {} gear",
            title.get(1).copied().unwrap_or("fine"),
            desc.join(" "),
            title.first().copied().unwrap_or("everyday")
        ))
    }
}

pub struct Explanation {
    /// The predicted title, when the adapter returns one.
    pub prediction: Option<String>,
    pub text: String,
}

/// Where reasoning texts and explanations come from.
pub enum GenerationAdapter {
    Fixture(FixtureAdapter),
    Remote(RemoteAdapter),
}

/// Counts adapter invocations across threads.
static CALLS: AtomicUsize = AtomicUsize::new(0);

impl GenerationAdapter {
    /// Total adapter calls made by this process; tests compare differences.
    pub fn calls() -> usize {
        CALLS.load(Ordering::SeqCst)
    }

    pub fn generate_cot(&self, instance: &InstructionInstance, template: &str) -> Result<String> {
        CALLS.fetch_add(1, Ordering::SeqCst);
        let text = match self {
            GenerationAdapter::Fixture(f) => {
                let key = (instance.user.clone(), instance.target.clone());
                match (f.cots.get(&key), &f.synthesize) {
                    (Some(t), _) => t.clone(),
                    (None, Some(_)) => f.synth_cot(instance),
                    (None, None) => {
                        return Err(Error::MissingFixture {
                            user: instance.user.0.clone(),
                            item: instance.target.0.clone(),
                        })
                    }
                }
            }
            GenerationAdapter::Remote(r) => {
                let label = if instance.label { "1" } else { "0" };
                let prompt = template
                    .replace("{label}", label)
                    .replace("{prompt}", &instance.render());
                r.call(&prompt)?
            }
        };
        Ok(truncate_tokens(&text, MAX_COT_TOKENS))
    }

    /// One call per `(user, item)`: remote responses carry the predicted
    /// title and the explanation separated by [`EXPLANATION_DELIMITER`].
    pub fn explain(&self, user: &UserId, item: &ItemId, prompt: &str) -> Result<Explanation> {
        CALLS.fetch_add(1, Ordering::SeqCst);
        match self {
            GenerationAdapter::Fixture(f) => {
                let key = (user.clone(), item.clone());
                let text = match (f.explanations.get(&key), &f.synthesize) {
                    (Some(t), _) => t.clone(),
                    (None, Some(catalog)) => f.synth_explanation(item, catalog)?,
                    (None, None) => {
                        return Err(Error::MissingFixture {
                            user: user.0.clone(),
                            item: item.0.clone(),
                        })
                    }
                };
                Ok(Explanation {
                    prediction: None,
                    text,
                })
            }
            GenerationAdapter::Remote(r) => {
                let request = format!(
                    "{prompt}\nAnswer with the title of the next item, then {EXPLANATION_DELIMITER}, then a short explanation."
                );
                parse_single_pass(&r.call(&request)?)
            }
        }
    }
}

pub fn parse_single_pass(response: &str) -> Result<Explanation> {
    let (title, text) = response
        .split_once(EXPLANATION_DELIMITER)
        .ok_or_else(|| Error::Response(format!("missing `{EXPLANATION_DELIMITER}` delimiter")))?;
    Ok(Explanation {
        prediction: Some(title.trim().to_string()),
        text: text.trim().to_string(),
    })
}

/// `user_id<TAB>item_id<TAB>label<TAB>cot_text` records.
pub fn load_cot_fixture(path: &Path) -> Result<BTreeMap<(UserId, ItemId), (bool, String)>> {
    let mut out = BTreeMap::new();
    for (ln, line) in tsv::read_records(path)? {
        let f = tsv::split_fields(path, ln, &line, 4)?;
        let label = match f[2].trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: ln,
                    message: format!("label `{other}` is not 0 or 1"),
                })
            }
        };
        out.insert(
            (UserId::new(f[0]), ItemId::new(f[1])),
            (label, tsv::unescape(f[3])),
        );
    }
    Ok(out)
}

/// `user_id<TAB>item_id<TAB>explanation` records.
pub fn load_explanation_fixture(path: &Path) -> Result<BTreeMap<(UserId, ItemId), String>> {
    crate::data::load_user_item_texts(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cot::instance::tests::peter;
    use std::sync::Mutex;

    const GOOD: &str = "Profile favors high-pace, tech/military sci-fi. Edge of Tomorrow (q12) matches genre, pace, and motif via exosuit time-loop combat; likelihood 88%. Oblivion (q20) is a close alternative at 82% with a steadier tempo. District 9 (q27) is exploratory at 76% given its semi-documentary tone.";

    fn fixture() -> GenerationAdapter {
        let mut f = FixtureAdapter::default();
        f.cots.insert(
            (UserId::from("Peter"), ItemId::from("q12")),
            GOOD.to_string(),
        );
        f.explanations.insert(
            (UserId::from("Peter"), ItemId::from("q12")),
            "Fast tech sci-fi like his favourites.".to_string(),
        );
        GenerationAdapter::Fixture(f)
    }

    #[test]
    fn fixture_returns_stored_text() {
        let a = fixture();
        let x = peter();
        assert_eq!(a.generate_cot(&x, COT_TEMPLATE).unwrap(), GOOD);
        assert_eq!(
            a.generate_cot(&x, COT_TEMPLATE).unwrap(),
            a.generate_cot(&x, COT_TEMPLATE).unwrap()
        );
        let e = a
            .explain(&UserId::from("Peter"), &ItemId::from("q12"), "")
            .unwrap();
        assert_eq!(e.text, "Fast tech sci-fi like his favourites.");
    }

    #[test]
    fn fixture_miss_is_an_error() {
        let a = GenerationAdapter::Fixture(FixtureAdapter::default());
        assert!(matches!(
            a.generate_cot(&peter(), COT_TEMPLATE),
            Err(Error::MissingFixture { .. })
        ));
    }

    #[test]
    fn long_fixture_is_truncated() {
        let long: String = (0..200)
            .map(|i| format!("w{i}"))
            .collect::<Vec<_>>()
            .join(" ");
        let mut f = FixtureAdapter::default();
        f.cots
            .insert((UserId::from("Peter"), ItemId::from("q12")), long);
        let out = GenerationAdapter::Fixture(f)
            .generate_cot(&peter(), COT_TEMPLATE)
            .unwrap();
        assert_eq!(out.split_whitespace().count(), 180);
        assert!(out.ends_with("w179"));
    }

    #[test]
    fn synthesized_texts_are_deterministic() {
        let f = FixtureAdapter {
            synthesize: Some(crate::cot::instance::tests::peter_catalog()),
            good_percent: 50,
            ..Default::default()
        };
        let a = GenerationAdapter::Fixture(f);
        let x = peter();
        assert_eq!(
            a.generate_cot(&x, COT_TEMPLATE).unwrap(),
            a.generate_cot(&x, COT_TEMPLATE).unwrap()
        );
        assert!(a.explain(&x.user, &x.target, "").is_ok());
    }

    struct Flaky {
        fail_first: usize,
        seen: Mutex<Vec<String>>,
        reply: String,
    }

    impl Transport for Flaky {
        fn send(&self, prompt: &str) -> std::result::Result<String, String> {
            let mut s = self.seen.lock().unwrap();
            s.push(prompt.to_string());
            if s.len() <= self.fail_first {
                Err("connection refused".into())
            } else {
                Ok(self.reply.clone())
            }
        }
    }

    fn remote(fail_first: usize, reply: &str, retries: usize) -> GenerationAdapter {
        GenerationAdapter::Remote(RemoteAdapter::new(
            Box::new(Flaky {
                fail_first,
                seen: Mutex::new(Vec::new()),
                reply: reply.into(),
            }),
            retries,
        ))
    }

    #[test]
    fn remote_retries_then_succeeds() {
        let a = remote(2, "reasoning", 2);
        assert_eq!(a.generate_cot(&peter(), COT_TEMPLATE).unwrap(), "reasoning");
    }

    #[test]
    fn remote_failure_reports_retries() {
        let a = remote(10, "x", 2);
        match a.generate_cot(&peter(), COT_TEMPLATE) {
            Err(Error::Transport { retries, .. }) => assert_eq!(retries, 2),
            other => panic!("{:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn single_pass_parsing() {
        let a = remote(0, "Edge of Tomorrow <<EXPLANATION>> Fast and tense.", 0);
        let e = a
            .explain(&UserId::from("Peter"), &ItemId::from("q12"), "prompt")
            .unwrap();
        assert_eq!(e.prediction.as_deref(), Some("Edge of Tomorrow"));
        assert_eq!(e.text, "Fast and tense.");
        let bad = remote(0, "Edge of Tomorrow. Fast and tense.", 0);
        assert!(matches!(
            bad.explain(&UserId::from("Peter"), &ItemId::from("q12"), "p"),
            Err(Error::Response(_))
        ));
    }

    #[test]
    fn cot_fixture_file_roundtrip() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("cot.tsv");
        std::fs::write(&p, "Peter\tq12\t1\tline one\\tcontinued\n").unwrap();
        let m = load_cot_fixture(&p).unwrap();
        let (label, text) = &m[&(UserId::from("Peter"), ItemId::from("q12"))];
        assert!(*label);
        assert_eq!(text, "line one\tcontinued");
    }
}
