//! Synthetic multimodal video corpus with a planted, learnable anomaly.
//!
//! Every snippet's features are standard normal noise. An abnormal video has
//! one contiguous span of snippets where every non-text modality is shifted
//! by `strength` on a fixed half of its coordinates. Captions describe one
//! scene per video; inside the span they switch to an anomalous action with
//! probability `1 - exp(-strength)`.
//! Text features are the hashing embeddings of the captions plus noise.

use std::collections::BTreeMap;
use std::path::Path;

use mvad_autograd::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::io::{self, FeatureFile, Manifest, Split, VideoRecord};
use crate::modality::ModalityId;
use crate::msta::{CaptionSample, HashingEmbedder, TextEmbedder};
use crate::{Error, Result};

const SUBJECTS: &[&str] = &[
    "a man",
    "a woman",
    "a person",
    "two people",
    "a child",
    "an old man",
    "a group of people",
    "a driver",
];
const NORMAL_ACTIONS: &[&str] = &[
    "walks along",
    "stands near",
    "talks quietly near",
    "waits at",
    "sits beside",
    "jogs past",
    "shops near",
    "reads a newspaper at",
];
const ANOMALOUS_ACTIONS: &[&str] = &[
    "smashes the window of",
    "sets fire to",
    "fights violently near",
    "robs a victim at",
    "crashes a car into",
    "steals a bag at",
    "fires a gun at",
    "vandalizes",
];
const PLACES: &[&str] = &[
    "the store entrance",
    "the parking lot",
    "the bus stop",
    "the street corner",
    "the gas station",
    "the park bench",
    "the office lobby",
    "the train platform",
];

/// A caption sentence; anomalous ones use a violent or criminal action.
pub fn caption(rng: &mut impl Rng, anomalous: bool) -> String {
    let actions = if anomalous {
        ANOMALOUS_ACTIONS
    } else {
        NORMAL_ACTIONS
    };
    format!(
        "{} {} {}.",
        SUBJECTS.choose(rng).expect("non-empty"),
        actions.choose(rng).expect("non-empty"),
        PLACES.choose(rng).expect("non-empty")
    )
}

/// The recurring content of one video: a single place, a few people and a
/// few routine activities.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub place: &'static str,
    pub subjects: Vec<&'static str>,
    pub routines: Vec<&'static str>,
}

impl Scene {
    pub fn draw(rng: &mut impl Rng) -> Self {
        Self {
            place: PLACES.choose(rng).expect("non-empty"),
            subjects: SUBJECTS.choose_multiple(rng, 2).copied().collect(),
            routines: NORMAL_ACTIONS.choose_multiple(rng, 2).copied().collect(),
        }
    }

    /// A caption set in this scene; anomalous ones use any violent or
    /// criminal action.
    pub fn caption(&self, rng: &mut impl Rng, anomalous: bool) -> String {
        let action = if anomalous {
            ANOMALOUS_ACTIONS.choose(rng)
        } else {
            self.routines.choose(rng)
        };
        format!(
            "{} {} {}.",
            self.subjects.choose(rng).expect("non-empty"),
            action.expect("non-empty"),
            self.place
        )
    }
}

/// True when a caption uses the anomalous vocabulary.
pub fn is_anomalous_caption(text: &str) -> bool {
    ANOMALOUS_ACTIONS.iter().any(|a| text.contains(a))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub train_normal: usize,
    pub train_abnormal: usize,
    pub test_normal: usize,
    pub test_abnormal: usize,
    /// Inclusive range of snippets per video.
    pub snippets: (usize, usize),
    /// Range of the anomalous span length as a fraction of the video.
    pub span_fraction: (f64, f64),
    /// Feature width per modality; the text width is the embedder width.
    pub dims: BTreeMap<ModalityId, usize>,
    pub strength: f64,
    pub frames_per_snippet: u32,
    /// Noise added to text embeddings.
    pub text_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            train_normal: 20,
            train_abnormal: 20,
            test_normal: 10,
            test_abnormal: 10,
            snippets: (12, 16),
            span_fraction: (0.5, 0.75),
            dims: [
                (ModalityId::Text, 64),
                (ModalityId::Rgb, 32),
                (ModalityId::Flow, 32),
                (ModalityId::Audio, 16),
            ]
            .into_iter()
            .collect(),
            strength: 1.5,
            frames_per_snippet: 16,
            text_noise: 0.05,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if [
            self.train_normal,
            self.train_abnormal,
            self.test_normal,
            self.test_abnormal,
        ]
        .iter()
        .any(|&n| n < 2)
        {
            return Err(Error::Config(
                "synthetic data needs at least two videos per class and split".into(),
            ));
        }
        let (lo, hi) = self.snippets;
        if lo < 2 || lo > hi {
            return Err(Error::Config(format!(
                "snippet range {lo}..={hi} must satisfy 2 <= lo <= hi"
            )));
        }
        let (a, b) = self.span_fraction;
        if !(a > 0.0 && a <= b && b <= 1.0) {
            return Err(Error::Config(format!(
                "span fraction range {a}..={b} must lie in (0, 1]"
            )));
        }
        if self.dims.is_empty() || self.dims.values().any(|&d| d == 0) {
            return Err(Error::Config(
                "every modality needs a positive feature width".into(),
            ));
        }
        if self.frames_per_snippet == 0 {
            return Err(Error::Config("frames_per_snippet must be positive".into()));
        }
        let bad = |v: f64| !v.is_finite() || v < 0.0;
        if bad(self.strength) || bad(self.text_noise) {
            return Err(Error::Config(
                "strength and text_noise must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthVideo {
    pub id: String,
    pub split: Split,
    pub label: u8,
    /// Anomalous snippet span `[start, end)`, empty for normal videos.
    pub span: (usize, usize),
    pub features: BTreeMap<ModalityId, Tensor>,
    pub captions: Vec<String>,
    pub frames_per_snippet: u32,
}

impl SynthVideo {
    pub fn snippets(&self) -> usize {
        self.captions.len()
    }

    pub fn snippet_labels(&self) -> Vec<bool> {
        (0..self.snippets())
            .map(|i| i >= self.span.0 && i < self.span.1)
            .collect()
    }

    pub fn frame_labels(&self) -> Vec<bool> {
        self.snippet_labels()
            .into_iter()
            .flat_map(|l| std::iter::repeat_n(l, self.frames_per_snippet as usize))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub videos: Vec<SynthVideo>,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // shifted coordinates, fixed per modality
    let shifted: BTreeMap<ModalityId, Vec<usize>> = spec
        .dims
        .iter()
        .map(|(&m, &d)| {
            let mut idx: Vec<usize> = (0..d).collect();
            idx.shuffle(&mut rng);
            idx.truncate(d.div_ceil(2));
            idx.sort_unstable();
            (m, idx)
        })
        .collect();
    let embedder = spec
        .dims
        .get(&ModalityId::Text)
        .map(|&d| HashingEmbedder::new(d, spec.seed))
        .transpose()?;
    let caption_p = 1.0 - (-spec.strength).exp();
    let plan = [
        (Split::Train, 0u8, spec.train_normal),
        (Split::Train, 1, spec.train_abnormal),
        (Split::Test, 0, spec.test_normal),
        (Split::Test, 1, spec.test_abnormal),
    ];
    let mut videos = Vec::new();
    for (split, label, count) in plan {
        for i in 0..count {
            let n = rng.gen_range(spec.snippets.0..=spec.snippets.1);
            let span = if label == 1 {
                let frac = |f: f64| ((f * n as f64).round() as usize).clamp(1, n);
                let len = rng.gen_range(frac(spec.span_fraction.0)..=frac(spec.span_fraction.1));
                let start = rng.gen_range(0..=n - len);
                (start, start + len)
            } else {
                (0, 0)
            };
            let in_span = |t: usize| t >= span.0 && t < span.1;
            let scene = Scene::draw(&mut rng);
            let captions: Vec<String> = (0..n)
                .map(|t| {
                    let anomalous = in_span(t) && rng.gen_bool(caption_p);
                    scene.caption(&mut rng, anomalous)
                })
                .collect();
            let mut features = BTreeMap::new();
            for (&m, &d) in &spec.dims {
                let mut data = Vec::with_capacity(n * d);
                for (t, caption) in captions.iter().enumerate() {
                    if m == ModalityId::Text {
                        let e = embedder
                            .as_ref()
                            .expect("text width present")
                            .embed(caption)?;
                        data.extend(
                            e.into_iter().map(|v| {
                                v + spec.text_noise * rng.sample::<f64, _>(StandardNormal)
                            }),
                        );
                    } else {
                        let start = data.len();
                        data.extend((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
                        if in_span(t) {
                            for &c in &shifted[&m] {
                                data[start + c] += spec.strength;
                            }
                        }
                    }
                }
                // round through f32 so in-memory and on-disk copies agree
                let data = data.into_iter().map(|v| v as f32 as f64).collect();
                features.insert(m, Tensor::matrix(n, d, data)?);
            }
            let prefix = match split {
                Split::Train => "train",
                Split::Test => "test",
            };
            let kind = if label == 1 { "abn" } else { "nrm" };
            videos.push(SynthVideo {
                id: format!("{prefix}_{kind}_{i:03}"),
                split,
                label,
                span,
                features,
                captions,
                frames_per_snippet: spec.frames_per_snippet,
            });
        }
    }
    Ok(SynthDataset {
        spec: spec.clone(),
        videos,
    })
}

impl SynthDataset {
    /// Writes features, captions, frame labels and `manifest.json` under
    /// `dir`, returning the manifest.
    pub fn write(&self, dir: &Path) -> Result<Manifest> {
        let mut records = Vec::new();
        for v in &self.videos {
            let mut features = BTreeMap::new();
            for (m, t) in &v.features {
                let rel = Path::new("features").join(format!("{}.{m}.feat", v.id));
                FeatureFile::from_tensor(t, v.frames_per_snippet)?.write(&dir.join(&rel))?;
                features.insert(*m, rel);
            }
            let rel_caps = Path::new("captions").join(format!("{}.jsonl", v.id));
            let caps: Vec<CaptionSample> = v
                .captions
                .iter()
                .enumerate()
                .map(|(j, c)| CaptionSample::original(&v.id, j, c.clone()))
                .collect();
            io::write_jsonl(&dir.join(&rel_caps), &caps)?;
            let frame_labels = match v.split {
                Split::Test => {
                    let rel = Path::new("labels").join(format!("{}.txt", v.id));
                    io::write_frame_labels(&dir.join(&rel), &v.frame_labels())?;
                    Some(rel)
                }
                Split::Train => None,
            };
            records.push(VideoRecord {
                id: v.id.clone(),
                split: v.split,
                label: v.label,
                features,
                captions: Some(rel_caps),
                frame_labels,
            });
        }
        let manifest = Manifest {
            videos: records,
            root: dir.to_path_buf(),
        };
        manifest.save(&dir.join("manifest.json"))?;
        Ok(manifest)
    }
}
