//! Completion backends: a deterministic offline mock and an HTTP
//! chat-completion client.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde_json::json;

use super::templates::PromptTemplates;

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("{message}")]
pub struct BackendError {
    /// Transport failures and server-side errors may succeed on retry.
    pub retriable: bool,
    pub message: String,
}

pub trait LlmBackend: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, BackendError>;
    fn identity(&self) -> String;
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercased alphanumeric words.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "of", "in", "on", "at", "to", "and", "is", "are", "with", "by", "near",
    "into", "from",
];

fn content_words(text: &str) -> BTreeSet<String> {
    words(text)
        .into_iter()
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
        .collect()
}

/// Offline stand-in for a language model. It recognizes the three prompt
/// shapes by their leading template and answers each in kind:
///
/// * summaries pick the most distinctive input sentence, cut to 30 words;
/// * annotations score the query by word evidence: each query word that
///   occurs in the labelled context votes with the mean label of the items
///   containing it, and votes far from the context mean count more;
/// * generations splice the head of one example onto the tail of another.
///
/// Anything else is echoed back, cut to 30 words. The output depends only
/// on the seed and the prompt bytes.
#[derive(Clone, Debug)]
pub struct MockBackend {
    pub seed: u64,
    pub templates: PromptTemplates,
    /// Pseudo-count pulling each word's mean label toward the context mean.
    pub smoothing: f64,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            templates: PromptTemplates::default(),
            smoothing: 1.0,
        }
    }

    fn summarize(&self, lines: &[&str]) -> String {
        if lines.is_empty() {
            return String::new();
        }
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for l in lines {
            for w in content_words(l) {
                *freq.entry(w).or_default() += 1;
            }
        }
        // lowest mean word frequency wins; earlier lines win ties
        let rarity = |l: &str| {
            let ws = content_words(l);
            if ws.is_empty() {
                f64::INFINITY
            } else {
                ws.iter().map(|w| freq[w] as f64).sum::<f64>() / ws.len() as f64
            }
        };
        let mut best = 0;
        for i in 1..lines.len() {
            if rarity(lines[i]) < rarity(lines[best]) {
                best = i;
            }
        }
        truncate_words(lines[best], 30)
    }

    fn annotate(&self, body: &[&str]) -> Option<String> {
        let t = &self.templates;
        let mut context = Vec::new();
        let mut i = 0;
        while i + 3 < body.len() && body[i] == t.video_description && body[i + 2] == t.anomaly_score
        {
            let y: f64 = body[i + 3].trim().parse().ok()?;
            context.push((content_words(body[i + 1]), y));
            i += 4;
        }
        let query = content_words(body.get(i)?);
        if context.is_empty() {
            return None;
        }
        let prior = context.iter().map(|(_, y)| y).sum::<f64>() / context.len() as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for w in &query {
            let hits: Vec<f64> = context
                .iter()
                .filter(|(c, _)| c.contains(w))
                .map(|(_, y)| *y)
                .collect();
            if hits.is_empty() {
                continue;
            }
            let mean = (hits.iter().sum::<f64>() + self.smoothing * prior)
                / (hits.len() as f64 + self.smoothing);
            let dev = mean - prior;
            num += dev * dev.abs();
            den += dev.abs();
        }
        let score = if den > 0.0 { prior + num / den } else { prior };
        Some(format!("{score:.2}"))
    }

    fn generate(&self, body: &[&str], prompt: &str) -> Option<String> {
        let ex = self.templates.example.as_str();
        let examples: Vec<&str> = body
            .chunks(2)
            .filter(|c| c.len() == 2 && c[0] == ex)
            .map(|c| c[1])
            .collect();
        if examples.is_empty() {
            return None;
        }
        let h = fnv1a(prompt.as_bytes(), self.seed);
        let a = words_of(examples[(h % examples.len() as u64) as usize]);
        let b = words_of(examples[((h >> 20) % examples.len() as u64) as usize]);
        let cut_a = a.len().div_ceil(2);
        let cut_b = b.len() / 2;
        let mut out: Vec<&str> = a[..cut_a].to_vec();
        out.extend_from_slice(&b[cut_b..]);
        let mut s = out.join(" ");
        s = s.trim_end_matches('.').to_string();
        s.push('.');
        Some(s)
    }
}

fn words_of(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn truncate_words(s: &str, n: usize) -> String {
    words_of(s)
        .into_iter()
        .take(n)
        .collect::<Vec<_>>()
        .join(" ")
}

impl LlmBackend for MockBackend {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let lines: Vec<&str> = prompt.split('\n').collect();
        let t = &self.templates;
        let out = match lines[0] {
            head if head == t.summarize => Some(self.summarize(&lines[1..])),
            head if head == t.annotate => self.annotate(&lines[1..]),
            head if head == t.generate => self.generate(&lines[1..], prompt),
            _ => None,
        };
        Ok(out.unwrap_or_else(|| truncate_words(prompt, 30)))
    }

    fn identity(&self) -> String {
        format!("mock(seed={})", self.seed)
    }
}

pub const ENV_ENDPOINT: &str = "MVAD_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "MVAD_LLM_API_KEY";
pub const ENV_MODEL: &str = "MVAD_LLM_MODEL";

/// OpenAI-style `/chat/completions` client.
pub struct RemoteBackend {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub retries: u32,
    pub backoff: Duration,
    agent: ureq::Agent,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .finish_non_exhaustive()
    }
}

impl RemoteBackend {
    pub fn new(
        endpoint: impl Into<String>,
        api_key: Option<String>,
        model: impl Into<String>,
    ) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            api_key,
            model: model.into(),
            retries: 1,
            backoff: Duration::from_millis(500),
            agent,
        }
    }

    pub fn from_env() -> Result<Self, BackendError> {
        let endpoint = std::env::var(ENV_ENDPOINT).map_err(|_| BackendError {
            retriable: false,
            message: format!("{ENV_ENDPOINT} is not set"),
        })?;
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| "llama-3-8b-instruct".into());
        Ok(Self::new(endpoint, std::env::var(ENV_API_KEY).ok(), model))
    }

    pub fn request_body(&self, prompt: &str) -> serde_json::Value {
        json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
        })
    }

    fn attempt(&self, prompt: &str) -> Result<String, BackendError> {
        let mut req = self
            .agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(self.request_body(prompt)).map_err(|e| {
            let retriable = match &e {
                ureq::Error::StatusCode(code) => *code == 429 || *code >= 500,
                _ => true,
            };
            BackendError {
                retriable,
                message: format!("{}: {e}", self.endpoint),
            }
        })?;
        let body: serde_json::Value = resp.body_mut().read_json().map_err(|e| BackendError {
            retriable: false,
            message: format!("unreadable completion body: {e}"),
        })?;
        parse_chat_response(&body)
    }
}

/// Pulls `choices[0].message.content` out of a chat-completion response.
pub fn parse_chat_response(body: &serde_json::Value) -> Result<String, BackendError> {
    body.pointer("/choices/0/message/content")
        .and_then(|v| v.as_str())
        .map(str::to_owned)
        .ok_or_else(|| BackendError {
            retriable: false,
            message: "completion response has no choices[0].message.content".into(),
        })
}

impl LlmBackend for RemoteBackend {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let mut delay = self.backoff;
        let mut attempt = 0;
        loop {
            match self.attempt(prompt) {
                Err(e) if e.retriable && attempt < self.retries => {
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn identity(&self) -> String {
        format!("remote({}, {})", self.endpoint, self.model)
    }
}
