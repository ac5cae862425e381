use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use mvad_core::config::{GeneratedCount, RunConfig};
use mvad_core::detection::{
    self, expand_to_frames, frame_ap, frame_auc, snippet_means, Detector, ModelConfig, ScoreTriple,
    TrainVideo, VideoFeatures,
};
use mvad_core::io::{self, Checkpoint, FeatureFile, Manifest, ScoreRow, Split, VideoRecord};
use mvad_core::msta::{
    anomaly_pool, generated_count, CaptionSample, FileEmbedder, HashingEmbedder, LlmBackend,
    MockBackend, Msta, PromptTemplates, RemoteBackend, TextEmbedder, TextHead, VideoCaptions,
};
use mvad_core::synth::{self, SynthSpec};
use mvad_core::{Error, ModalityId, Result};

use crate::{BackendArgs, BackendKind, ConfigArgs};

const KIND_KEY: &str = "kind";
const DIM_PREFIX: &str = "dim.";

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn make_backend(args: &BackendArgs, seed: u64) -> Result<Box<dyn LlmBackend>> {
    Ok(match args.backend {
        BackendKind::Mock => Box::new(MockBackend::new(seed)),
        BackendKind::Remote => Box::new(RemoteBackend::from_env().map_err(|e| Error::Backend {
            video_id: None,
            retriable: e.retriable,
            message: e.message,
        })?),
    })
}

fn read_captions(manifest: &Manifest, video: &VideoRecord) -> Result<Vec<CaptionSample>> {
    let rel = video
        .captions
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("video `{}` has no caption file", video.id)))?;
    let mut caps: Vec<CaptionSample> = io::read_jsonl(&manifest.resolve(rel))?;
    caps.sort_by_key(|c| c.snippet_index);
    for c in &mut caps {
        c.video_id.get_or_insert_with(|| video.id.clone());
    }
    Ok(caps)
}

fn train_captions(manifest: &Manifest) -> Result<Vec<(VideoRecord, Vec<CaptionSample>)>> {
    manifest
        .split(Split::Train)
        .map(|v| Ok((v.clone(), read_captions(manifest, v)?)))
        .collect()
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory; receives `manifest.json` and the data files.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Mean shift of the anomalous span; 0 makes the classes identical.
    #[arg(long, default_value_t = 1.5)]
    pub strength: f64,
    #[arg(long, default_value_t = 20)]
    pub train_normal: usize,
    #[arg(long, default_value_t = 20)]
    pub train_abnormal: usize,
    #[arg(long, default_value_t = 10)]
    pub test_normal: usize,
    #[arg(long, default_value_t = 10)]
    pub test_abnormal: usize,
    #[arg(long, default_value_t = 12)]
    pub min_snippets: usize,
    #[arg(long, default_value_t = 16)]
    pub max_snippets: usize,
    /// Shortest anomalous span as a fraction of the video.
    #[arg(long, default_value_t = 0.5)]
    pub min_span: f64,
    /// Longest anomalous span as a fraction of the video.
    #[arg(long, default_value_t = 0.75)]
    pub max_span: f64,
    /// Feature widths, e.g. `T=64,R=32,F=32,A=16`.
    #[arg(long, default_value = "T=64,R=32,F=32,A=16")]
    pub dims: String,
    #[arg(long, default_value_t = 16)]
    pub frames_per_snippet: u32,
}

fn parse_dims(text: &str) -> Result<BTreeMap<ModalityId, usize>> {
    text.split(',')
        .map(|item| {
            let (m, d) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("dims entry `{item}` is not M=WIDTH")))?;
            let d = d
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("dims entry `{item}`: bad width")))?;
            Ok((m.trim().parse()?, d))
        })
        .collect()
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        train_normal: a.train_normal,
        train_abnormal: a.train_abnormal,
        test_normal: a.test_normal,
        test_abnormal: a.test_abnormal,
        snippets: (a.min_snippets, a.max_snippets),
        span_fraction: (a.min_span, a.max_span),
        dims: parse_dims(&a.dims)?,
        strength: a.strength,
        frames_per_snippet: a.frames_per_snippet,
        seed: a.seed,
        ..SynthSpec::default()
    };
    let data = synth::generate(&spec)?;
    let manifest = data.write(&a.out)?;
    eprintln!(
        "wrote {} videos to {}",
        manifest.videos.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct SummarizeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output JSON lines of summaries.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

pub fn summarize(a: &SummarizeArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let manifest = Manifest::load(&a.manifest)?;
    let backend = make_backend(&a.backend, cfg.seed)?;
    let templates = PromptTemplates::default();
    let msta = Msta {
        backend: backend.as_ref(),
        templates: &templates,
        config: &cfg.msta,
        seed: cfg.seed,
    };
    let videos: Vec<VideoCaptions> = train_captions(&manifest)?
        .into_iter()
        .map(|(v, caps)| VideoCaptions {
            video_id: v.id,
            label: f64::from(v.label),
            captions: caps.into_iter().map(|c| c.text).collect(),
        })
        .collect();
    let summaries = msta.summarize_all(&videos)?;
    io::write_jsonl(&a.out, &summaries)?;
    eprintln!("wrote {} summaries to {}", summaries.len(), a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Summaries from `msta-summarize`.
    #[arg(long)]
    pub summaries: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

pub fn annotate(a: &AnnotateArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let manifest = Manifest::load(&a.manifest)?;
    let summaries: Vec<CaptionSample> = io::read_jsonl(&a.summaries)?;
    let backend = make_backend(&a.backend, cfg.seed)?;
    let templates = PromptTemplates::default();
    let msta = Msta {
        backend: backend.as_ref(),
        templates: &templates,
        config: &cfg.msta,
        seed: cfg.seed,
    };
    let captions: Vec<CaptionSample> = train_captions(&manifest)?
        .into_iter()
        .flat_map(|(_, c)| c)
        .collect();
    let annotated = msta.annotate_all(&captions, &summaries)?;
    let unlabelled = annotated.iter().filter(|c| c.label.is_none()).count();
    io::write_jsonl(&a.out, &annotated)?;
    eprintln!(
        "wrote {} annotated captions ({unlabelled} unlabelled) to {}",
        annotated.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Annotated captions from `msta-annotate`.
    #[arg(long)]
    pub annotated: PathBuf,
    /// Summaries; counted toward the class balance.
    #[arg(long)]
    pub summaries: Option<PathBuf>,
    /// Number of samples; defaults to the configured `generated` setting.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(n) = a.count {
        cfg.msta.generated = GeneratedCount::Fixed(n);
    }
    let annotated: Vec<CaptionSample> = io::read_jsonl(&a.annotated)?;
    let mut labelled: Vec<CaptionSample> = annotated
        .iter()
        .filter(|c| c.label.is_some())
        .cloned()
        .collect();
    if let Some(path) = &a.summaries {
        let summaries: Vec<CaptionSample> = io::read_jsonl(path)?;
        labelled.extend(summaries.into_iter().filter(|c| c.label.is_some()));
    }
    let count = generated_count(&cfg.msta, &labelled);
    let pool = anomaly_pool(&annotated, cfg.msta.delta);
    let backend = make_backend(&a.backend, cfg.seed)?;
    let templates = PromptTemplates::default();
    let msta = Msta {
        backend: backend.as_ref(),
        templates: &templates,
        config: &cfg.msta,
        seed: cfg.seed,
    };
    let generated = msta.generate(&pool, count)?;
    io::write_jsonl(&a.out, &generated)?;
    eprintln!(
        "wrote {} generated captions from a pool of {} to {}",
        generated.len(),
        pool.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainTextHeadArgs {
    /// Labelled caption files (summaries, annotated, generated).
    #[arg(long = "samples", required = true, num_args = 1..)]
    pub samples: Vec<PathBuf>,
    /// Precomputed embeddings (JSON lines of `{text, embedding}`); the
    /// hashing embedder is used when absent.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

/// The embedder a text head was trained with, rebuilt from its metadata.
fn embedder_for(
    meta: &BTreeMap<String, String>,
    file: Option<&Path>,
) -> Result<Box<dyn TextEmbedder>> {
    let get = |k: &str| {
        meta.get(k)
            .ok_or_else(|| Error::Config(format!("text head checkpoint lacks `{k}`")))
    };
    let dim: usize = get("text_dim")?
        .parse()
        .map_err(|_| Error::Config("bad text_dim in checkpoint".into()))?;
    match get("embedder")?.as_str() {
        "hashing" => {
            let seed = get("embed_seed")?
                .parse()
                .map_err(|_| Error::Config("bad embed_seed in checkpoint".into()))?;
            Ok(Box::new(HashingEmbedder::new(dim, seed)?))
        }
        "file" => {
            let path = file.ok_or_else(|| {
                Error::Config(
                    "this text head was trained on file embeddings; pass --embeddings".into(),
                )
            })?;
            let e = FileEmbedder::load(path)?;
            if e.dim() != dim {
                return Err(Error::Config(format!(
                    "embedding file has width {}, text head expects {dim}",
                    e.dim()
                )));
            }
            Ok(Box::new(e))
        }
        other => Err(Error::Config(format!(
            "unknown embedder `{other}` in checkpoint"
        ))),
    }
}

pub fn train_text_head(a: &TrainTextHeadArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let mut samples = Vec::new();
    for path in &a.samples {
        let items: Vec<CaptionSample> = io::read_jsonl(path)?;
        samples.extend(items.into_iter().filter(|c| c.label.is_some()));
    }
    let mut meta = BTreeMap::new();
    meta.insert(KIND_KEY.to_string(), "text_head".to_string());
    meta.insert("text_hidden".to_string(), cfg.text.hidden.to_string());
    let embedder: Box<dyn TextEmbedder> = match &a.embeddings {
        Some(path) => {
            meta.insert("embedder".into(), "file".into());
            Box::new(FileEmbedder::load(path)?)
        }
        None => {
            meta.insert("embedder".into(), "hashing".into());
            meta.insert("embed_seed".into(), cfg.seed.to_string());
            Box::new(HashingEmbedder::new(cfg.text.text_dim, cfg.seed)?)
        }
    };
    meta.insert("text_dim".to_string(), embedder.dim().to_string());
    let embs = samples
        .iter()
        .map(|s| embedder.embed(&s.text))
        .collect::<Result<Vec<_>>>()?;
    let ys: Vec<f64> = samples
        .iter()
        .map(|s| s.label.expect("filtered to labelled"))
        .collect();
    let mut head = TextHead::new(embedder.dim(), cfg.text.hidden, cfg.seed)?;
    let losses = head.train(&embs, &ys, &cfg.text, cfg.seed)?;
    Checkpoint::from_store(meta, &head.store).write(&a.out)?;
    eprintln!(
        "trained text head on {} samples, final loss {:.4}; wrote {}",
        samples.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn load_text_head(
    path: &Path,
    embeddings: Option<&Path>,
) -> Result<(TextHead, Box<dyn TextEmbedder>)> {
    let ck = Checkpoint::read(path)?;
    if ck.meta.get(KIND_KEY).map(String::as_str) != Some("text_head") {
        return Err(Error::Config(format!(
            "{} is not a text head checkpoint",
            path.display()
        )));
    }
    let embedder = embedder_for(&ck.meta, embeddings)?;
    let hidden = ck
        .meta
        .get("text_hidden")
        .and_then(|h| h.parse().ok())
        .ok_or_else(|| Error::Config("text head checkpoint lacks `text_hidden`".into()))?;
    let mut head = TextHead::new(embedder.dim(), hidden, 0)?;
    ck.load_into(&mut head.store)?;
    Ok((head, embedder))
}

struct LoadedVideo {
    record: VideoRecord,
    features: VideoFeatures,
}

fn load_split(manifest: &Manifest, split: Split, cfg: &RunConfig) -> Result<Vec<LoadedVideo>> {
    manifest
        .split(split)
        .map(|v| {
            let (feats, _) = manifest.load_features(v, cfg.modalities.iter())?;
            Ok(LoadedVideo {
                record: v.clone(),
                features: VideoFeatures::new(feats)?,
            })
        })
        .collect()
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Detector checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional CSV of `step,loss,grad_norm`.
    #[arg(long)]
    pub losses: Option<PathBuf>,
    /// Print progress every this many steps; 0 disables it.
    #[arg(long, default_value_t = 25)]
    pub log_every: usize,
    #[command(flatten)]
    pub config: ConfigArgs,
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let manifest = Manifest::load(&a.manifest)?;
    let loaded = load_split(&manifest, Split::Train, &cfg)?;
    let first = loaded.first().ok_or_else(|| {
        Error::Contract(format!("{} has no training videos", a.manifest.display()))
    })?;
    let dims: BTreeMap<ModalityId, usize> = first
        .features
        .iter()
        .map(|f| (f.modality, f.dim()))
        .collect();
    let mut model = Detector::new(ModelConfig::from_run(&cfg, dims.clone())?, cfg.seed)?;
    let videos: Vec<TrainVideo> = loaded
        .into_iter()
        .map(|v| TrainVideo {
            id: v.record.id,
            label: f64::from(v.record.label),
            features: v.features,
        })
        .collect();
    let mut log = String::from("step,loss,grad_norm\n");
    let report = detection::train(&mut model, &videos, &cfg.train, cfg.seed, |r| {
        log.push_str(&format!("{},{},{}\n", r.step, r.loss, r.grad_norm));
        if a.log_every > 0 && (r.step % a.log_every == 0 || r.step + 1 == cfg.train.steps) {
            eprintln!(
                "step {:>5}  loss {:.5}  grad {:.5}",
                r.step, r.loss, r.grad_norm
            );
        }
    })?;
    if let Some(path) = &a.losses {
        io::write_locked(path, log.as_bytes())?;
    }
    let mut meta: BTreeMap<String, String> = cfg
        .entries()
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    meta.insert(KIND_KEY.into(), "detector".into());
    for (m, d) in &dims {
        meta.insert(format!("{DIM_PREFIX}{m}"), d.to_string());
    }
    Checkpoint::from_store(meta, &model.store).write(&a.out)?;
    eprintln!(
        "trained {} steps, final loss {:.4}; wrote {}",
        report.losses.len(),
        report.losses.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn load_detector(path: &Path) -> Result<(Detector, RunConfig)> {
    let ck = Checkpoint::read(path)?;
    if ck.meta.get(KIND_KEY).map(String::as_str) != Some("detector") {
        return Err(Error::Config(format!(
            "{} is not a detector checkpoint",
            path.display()
        )));
    }
    let mut cfg = RunConfig::default();
    let mut dims = BTreeMap::new();
    for (k, v) in &ck.meta {
        if k == KIND_KEY {
            continue;
        }
        match k.strip_prefix(DIM_PREFIX) {
            Some(m) => {
                let d = v
                    .parse()
                    .map_err(|_| Error::Config(format!("bad width `{v}` for {k} in checkpoint")))?;
                dims.insert(m.parse()?, d);
            }
            None => cfg.set(k, v)?,
        }
    }
    let mut model = Detector::new(ModelConfig::from_run(&cfg, dims)?, cfg.seed)?;
    ck.load_into(&mut model.store)?;
    Ok((model, cfg))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Detector checkpoint from `train`.
    #[arg(long)]
    pub detector: PathBuf,
    /// Text head checkpoint; without it the final score is the fused score.
    #[arg(long)]
    pub text_head: Option<PathBuf>,
    /// Embedding file, for text heads trained on file embeddings.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Blend weight of the fused score; defaults to the trained `alpha`.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn score(a: &ScoreArgs) -> Result<()> {
    let (model, cfg) = load_detector(&a.detector)?;
    let alpha = a.alpha.unwrap_or(cfg.train.alpha);
    let text = a
        .text_head
        .as_deref()
        .map(|p| load_text_head(p, a.embeddings.as_deref()))
        .transpose()?;
    let manifest = Manifest::load(&a.manifest)?;
    let mut rows = Vec::new();
    for v in load_split(&manifest, a.split.into(), &cfg)? {
        let s = model.scores(&v.features)?;
        let p = match &text {
            Some((head, embedder)) => {
                let caps = read_captions(&manifest, &v.record)?;
                let embs = caps
                    .iter()
                    .map(|c| embedder.embed(&c.text))
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&[f64]> = embs.iter().map(Vec::as_slice).collect();
                let probs = head.probabilities(&refs)?;
                let indexed = caps.iter().zip(probs).map(|(c, p)| {
                    c.snippet_index.map(|i| (i, p)).ok_or_else(|| {
                        Error::Contract(format!(
                            "caption of `{}` lacks a snippet index",
                            v.record.id
                        ))
                    })
                });
                Some(
                    snippet_means(s.len(), indexed.collect::<Result<Vec<_>>>()?).map_err(|e| {
                        match e {
                            Error::Alignment(m) => {
                                Error::Alignment(format!("video `{}`: {m}", v.record.id))
                            }
                            other => other,
                        }
                    })?,
                )
            }
            None => None,
        };
        let t = ScoreTriple::new(s, p, alpha)?;
        for i in 0..t.s.len() {
            rows.push(ScoreRow {
                video_id: v.record.id.clone(),
                snippet_index: i,
                s: t.s[i],
                p: t.p.as_ref().map(|p| p[i]),
                s_hat: t.s_hat[i],
            });
        }
    }
    io::write_scores(&a.out, &rows)?;
    eprintln!("wrote {} snippet scores to {}", rows.len(), a.out.display());
    Ok(())
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Column {
    S,
    P,
    SHat,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Auc,
    Ap,
    Both,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Score CSV from `score`.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long, value_enum, default_value = "s-hat")]
    pub column: Column,
    #[arg(long, value_enum, default_value = "both")]
    pub metric: Metric,
}

/// Frame-level scores and labels over the test split, videos in manifest
/// order.
pub fn frame_level(
    manifest: &Manifest,
    rows: &[ScoreRow],
    column: Column,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut by_video: BTreeMap<&str, Vec<(usize, f64)>> = BTreeMap::new();
    for r in rows {
        let value = match column {
            Column::S => r.s,
            Column::SHat => r.s_hat,
            Column::P => r.p.ok_or_else(|| {
                Error::Contract(format!("no text probability for `{}`", r.video_id))
            })?,
        };
        by_video
            .entry(&r.video_id)
            .or_default()
            .push((r.snippet_index, value));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for v in manifest.split(Split::Test) {
        let mut snippets = by_video
            .remove(v.id.as_str())
            .ok_or_else(|| Error::Alignment(format!("no scores for test video `{}`", v.id)))?;
        snippets.sort_by_key(|&(i, _)| i);
        if snippets.iter().enumerate().any(|(j, &(i, _))| i != j) {
            return Err(Error::Alignment(format!(
                "scores for `{}` do not cover snippets 0..{} exactly once",
                v.id,
                snippets.len()
            )));
        }
        let rel = v.frame_labels.as_ref().expect("validated manifest");
        let frame_labels = io::read_frame_labels(&manifest.resolve(rel))?;
        let feature = v.features.values().next().expect("validated manifest");
        let fps = FeatureFile::read(&manifest.resolve(feature))?.frames_per_snippet;
        let values: Vec<f64> = snippets.into_iter().map(|(_, s)| s).collect();
        let expanded =
            expand_to_frames(&values, fps as usize, frame_labels.len()).map_err(|e| match e {
                Error::Alignment(m) => Error::Alignment(format!("video `{}`: {m}", v.id)),
                other => other,
            })?;
        scores.extend(expanded);
        labels.extend(frame_labels);
    }
    if let Some(extra) = by_video.keys().next() {
        return Err(Error::Alignment(format!(
            "scores name `{extra}`, which is not a test video"
        )));
    }
    Ok((scores, labels))
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let rows = io::read_scores(&a.scores)?;
    let (scores, labels) = frame_level(&manifest, &rows, a.column)?;
    if matches!(a.metric, Metric::Auc | Metric::Both) {
        println!("AUC={:.4}", frame_auc(&scores, &labels)?);
    }
    if matches!(a.metric, Metric::Ap | Metric::Both) {
        println!("AP={:.4}", frame_ap(&scores, &labels)?);
    }
    Ok(())
}
