//! Multi-stage text augmentation: summarize each video's captions, annotate
//! every caption by in-context scoring against the summaries, then generate
//! new anomalous captions until the classes balance.

mod backend;
mod embed;
mod head;
pub mod templates;

use std::collections::HashSet;
use std::sync::OnceLock;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::config::{GeneratedCount, MstaConfig};
use crate::{Error, Result};

pub use backend::{
    fnv1a, parse_chat_response, words, BackendError, LlmBackend, MockBackend, RemoteBackend,
    ENV_API_KEY, ENV_ENDPOINT, ENV_MODEL,
};
pub use embed::{FileEmbedder, HashingEmbedder, TextEmbedder};
pub use head::TextHead;
pub use templates::PromptTemplates;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Original,
    Summary,
    Annotated,
    Generated,
}

/// One caption record as stored in JSON lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionSample {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snippet_index: Option<usize>,
    pub text: String,
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<f64>,
    /// Set on generated samples kept after exhausting regeneration tries.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub duplicate: bool,
}

impl CaptionSample {
    pub fn original(video_id: &str, snippet_index: usize, text: impl Into<String>) -> Self {
        Self {
            video_id: Some(video_id.into()),
            snippet_index: Some(snippet_index),
            text: text.into(),
            stage: Stage::Original,
            label: None,
            duplicate: false,
        }
    }
}

/// The captions of one training video with its video-level label.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoCaptions {
    pub video_id: String,
    pub label: f64,
    pub captions: Vec<String>,
}

/// First decimal literal in `text`, clamped to `[0, 1]`.
pub fn parse_score(text: &str) -> Option<f64> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?").expect("static pattern")
    });
    let v: f64 = re.find(text)?.as_str().parse().ok()?;
    v.is_finite().then(|| v.clamp(0.0, 1.0))
}

/// Mean of the parsed scores, clamped to `[0, 1]`; `None` when empty.
pub fn mean_score(scores: &[f64]) -> Option<f64> {
    (!scores.is_empty()).then(|| (scores.iter().sum::<f64>() / scores.len() as f64).clamp(0.0, 1.0))
}

/// Samples counted as anomalous: label strictly above `delta`.
pub fn is_positive(sample: &CaptionSample, delta: f64) -> bool {
    sample.label.is_some_and(|y| y > delta)
}

/// Fraction of labelled samples that are positive.
pub fn positive_fraction(samples: &[CaptionSample], delta: f64) -> f64 {
    let labelled: Vec<_> = samples.iter().filter(|s| s.label.is_some()).collect();
    if labelled.is_empty() {
        return 0.0;
    }
    labelled.iter().filter(|s| is_positive(s, delta)).count() as f64 / labelled.len() as f64
}

/// The anomaly pool: annotated captions whose score exceeds `delta`.
pub fn anomaly_pool(annotated: &[CaptionSample], delta: f64) -> Vec<CaptionSample> {
    annotated
        .iter()
        .filter(|s| is_positive(s, delta))
        .cloned()
        .collect()
}

/// Stage-III sample count: fixed, or `#normal - #anomalous` over the
/// labelled samples (never negative).
pub fn generated_count(cfg: &MstaConfig, labelled: &[CaptionSample]) -> usize {
    match cfg.generated {
        GeneratedCount::Fixed(n) => n,
        GeneratedCount::Deficit => {
            let with_label = labelled.iter().filter(|s| s.label.is_some());
            let pos = with_label
                .clone()
                .filter(|s| is_positive(s, cfg.delta))
                .count();
            let neg = with_label.count() - pos;
            neg.saturating_sub(pos)
        }
    }
}

/// How many times a duplicate generation is redrawn before it is kept.
pub const GENERATION_TRIES: usize = 3;

/// Runs the three stages against one backend.
pub struct Msta<'a> {
    pub backend: &'a dyn LlmBackend,
    pub templates: &'a PromptTemplates,
    pub config: &'a MstaConfig,
    pub seed: u64,
}

impl<'a> Msta<'a> {
    fn call(&self, prompt: &str, context: &str) -> Result<String> {
        self.backend.complete(prompt).map_err(|e| Error::Backend {
            video_id: Some(context.to_string()),
            retriable: e.retriable,
            message: e.message,
        })
    }

    fn rng(&self, stage: u64, stream: u64) -> ChaCha8Rng {
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed ^ stage.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        rng.set_stream(stream);
        rng
    }

    /// Stage I for one video. The summary inherits the video label.
    pub fn summarize(&self, video: &VideoCaptions) -> Result<CaptionSample> {
        if video.captions.is_empty() {
            return Err(Error::Contract(format!(
                "video {} has no captions",
                video.video_id
            )));
        }
        let prompt = self.templates.summarize_prompt(&video.captions);
        let text = self.call(&prompt, &video.video_id)?;
        Ok(CaptionSample {
            video_id: Some(video.video_id.clone()),
            snippet_index: None,
            text: templates::one_line(text.trim()),
            stage: Stage::Summary,
            label: Some(video.label),
            duplicate: false,
        })
    }

    pub fn summarize_all(&self, videos: &[VideoCaptions]) -> Result<Vec<CaptionSample>> {
        videos.iter().map(|v| self.summarize(v)).collect()
    }

    /// The prompts Stage II issues for one caption, one per sampling.
    pub fn annotation_prompts(
        &self,
        caption: &str,
        index: usize,
        pool: &[CaptionSample],
    ) -> Result<Vec<String>> {
        let n_r = self.config.context_samples;
        if pool.len() < n_r {
            return Err(Error::Config(format!(
                "summary pool has {} samples, context_samples is {n_r}",
                pool.len()
            )));
        }
        let mut rng = self.rng(2, index as u64);
        (0..self.config.samplings)
            .map(|_| {
                let context: Vec<(&str, f64)> = sample(&mut rng, pool.len(), n_r)
                    .into_iter()
                    .map(|i| {
                        let s = &pool[i];
                        let y = s.label.ok_or_else(|| {
                            Error::Contract(format!("context sample {:?} has no label", s.text))
                        })?;
                        Ok((s.text.as_str(), y))
                    })
                    .collect::<Result<_>>()?;
                Ok(self.templates.annotate_prompt(&context, caption))
            })
            .collect()
    }

    /// Stage II for one caption: mean of the parsed per-sampling scores.
    /// An unparseable completion is asked once more, then skipped; `None`
    /// when every sampling was skipped.
    pub fn annotate(
        &self,
        caption: &CaptionSample,
        index: usize,
        pool: &[CaptionSample],
    ) -> Result<Option<f64>> {
        let who = caption.video_id.as_deref().unwrap_or("<caption>");
        let mut scores = Vec::new();
        for prompt in self.annotation_prompts(&caption.text, index, pool)? {
            for _ in 0..2 {
                if let Some(s) = parse_score(&self.call(&prompt, who)?) {
                    scores.push(s);
                    break;
                }
            }
        }
        Ok(mean_score(&scores))
    }

    /// Stage II over every caption, in input order.
    pub fn annotate_all(
        &self,
        captions: &[CaptionSample],
        pool: &[CaptionSample],
    ) -> Result<Vec<CaptionSample>> {
        captions
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let label = self.annotate(c, i, pool)?;
                Ok(CaptionSample {
                    stage: Stage::Annotated,
                    label,
                    ..c.clone()
                })
            })
            .collect()
    }

    /// Stage III: `count` new anomalous captions from the anomaly pool.
    /// Exact repeats of the pool or of earlier generations are redrawn with
    /// a fresh context up to [`GENERATION_TRIES`] times, then kept flagged.
    pub fn generate(&self, pool: &[CaptionSample], count: usize) -> Result<Vec<CaptionSample>> {
        if count == 0 {
            return Ok(Vec::new());
        }
        let n_r = self.config.context_samples;
        if pool.len() < n_r {
            return Err(Error::Config(format!(
                "anomaly pool has {} samples, context_samples is {n_r}",
                pool.len()
            )));
        }
        let mut seen: HashSet<String> = pool.iter().map(|s| s.text.clone()).collect();
        let mut rng = self.rng(3, 0);
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let mut tries = 0;
            let text = loop {
                let examples: Vec<&str> = sample(&mut rng, pool.len(), n_r)
                    .into_iter()
                    .map(|j| pool[j].text.as_str())
                    .collect();
                let prompt = self.templates.generate_prompt(&examples);
                let text = first_sentence(&self.call(&prompt, &format!("generated#{i}"))?);
                tries += 1;
                if !seen.contains(&text) || tries >= GENERATION_TRIES {
                    break text;
                }
            };
            let duplicate = !seen.insert(text.clone());
            out.push(CaptionSample {
                video_id: None,
                snippet_index: None,
                text,
                stage: Stage::Generated,
                label: Some(1.0),
                duplicate,
            });
        }
        Ok(out)
    }
}

/// Text up to and including the first sentence terminator, trimmed and on
/// one line.
pub fn first_sentence(text: &str) -> String {
    let t = templates::one_line(text.trim());
    let end = t.find(['.', '!', '?']).map_or(t.len(), |i| i + 1);
    t[..end].trim().to_string()
}

/// Output of a full three-stage run.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub summaries: Vec<CaptionSample>,
    pub annotated: Vec<CaptionSample>,
    pub generated: Vec<CaptionSample>,
}

impl PipelineOutput {
    /// Every labelled sample: annotated captions, summaries, generations.
    pub fn labelled(&self) -> Vec<CaptionSample> {
        self.annotated
            .iter()
            .chain(&self.summaries)
            .chain(&self.generated)
            .filter(|s| s.label.is_some())
            .cloned()
            .collect()
    }
}

/// Stages I to III in sequence over a caption corpus.
pub fn run_pipeline(msta: &Msta<'_>, videos: &[VideoCaptions]) -> Result<PipelineOutput> {
    msta.config.validate()?;
    let summaries = msta.summarize_all(videos)?;
    let captions: Vec<CaptionSample> = videos
        .iter()
        .flat_map(|v| {
            v.captions
                .iter()
                .enumerate()
                .map(|(j, c)| CaptionSample::original(&v.video_id, j, c.clone()))
        })
        .collect();
    let annotated = msta.annotate_all(&captions, &summaries)?;
    let labelled: Vec<CaptionSample> = annotated
        .iter()
        .chain(&summaries)
        .filter(|s| s.label.is_some())
        .cloned()
        .collect();
    let count = generated_count(msta.config, &labelled);
    let pool = anomaly_pool(&annotated, msta.config.delta);
    let generated = msta.generate(&pool, count)?;
    Ok(PipelineOutput {
        summaries,
        annotated,
        generated,
    })
}
