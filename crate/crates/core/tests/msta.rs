mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use mvad_core::config::{GeneratedCount, MstaConfig, TextHeadConfig};
use mvad_core::io;
use mvad_core::msta::{
    self, anomaly_pool, generated_count, parse_score, positive_fraction, run_pipeline,
    BackendError, CaptionSample, HashingEmbedder, LlmBackend, MockBackend, Msta, PromptTemplates,
    Stage, TextEmbedder, TextHead, VideoCaptions,
};
use mvad_core::synth::{self, SynthSpec};
use mvad_core::Error;
use proptest::prelude::*;
use rand::Rng;

struct Constant(String);

impl LlmBackend for Constant {
    fn complete(&self, _: &str) -> Result<String, BackendError> {
        Ok(self.0.clone())
    }
    fn identity(&self) -> String {
        "constant".into()
    }
}

/// Replays canned completions in order and counts calls.
struct Scripted {
    replies: Mutex<Vec<String>>,
    calls: AtomicUsize,
}

impl Scripted {
    fn new(replies: &[&str]) -> Self {
        Self {
            replies: Mutex::new(replies.iter().rev().map(|s| s.to_string()).collect()),
            calls: AtomicUsize::new(0),
        }
    }
}

impl LlmBackend for Scripted {
    fn complete(&self, _: &str) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(self.replies.lock().unwrap().pop().unwrap_or_default())
    }
    fn identity(&self) -> String {
        "scripted".into()
    }
}

struct Down;

impl LlmBackend for Down {
    fn complete(&self, _: &str) -> Result<String, BackendError> {
        Err(BackendError {
            retriable: true,
            message: "connection refused".into(),
        })
    }
    fn identity(&self) -> String {
        "down".into()
    }
}

fn summary(text: &str, y: f64) -> CaptionSample {
    CaptionSample {
        video_id: None,
        snippet_index: None,
        text: text.into(),
        stage: Stage::Summary,
        label: Some(y),
        duplicate: false,
    }
}

fn small_config(samplings: usize, context: usize) -> MstaConfig {
    MstaConfig {
        samplings,
        context_samples: context,
        ..MstaConfig::default()
    }
}

fn video(id: &str, label: f64, caps: &[&str]) -> VideoCaptions {
    VideoCaptions {
        video_id: id.into(),
        label,
        captions: caps.iter().map(|s| s.to_string()).collect(),
    }
}

#[test]
fn single_caption_video_is_summarized() {
    let t = PromptTemplates::default();
    let cfg = MstaConfig::default();
    let mock = MockBackend::new(1);
    let m = Msta {
        backend: &mock,
        templates: &t,
        config: &cfg,
        seed: 0,
    };
    let s = m
        .summarize(&video("v", 0.0, &["a person waits at the bus stop."]))
        .unwrap();
    assert_eq!(s.text, "a person waits at the bus stop.");
    assert_eq!(s.label, Some(0.0));
    assert_eq!(s.stage, Stage::Summary);
    assert!(m.summarize(&video("v", 0.0, &[])).is_err());
}

#[test]
fn summaries_inherit_video_label_and_are_deterministic() {
    let t = PromptTemplates::default();
    let cfg = MstaConfig::default();
    let mock = MockBackend::new(3);
    let m = Msta {
        backend: &mock,
        templates: &t,
        config: &cfg,
        seed: 0,
    };
    let v = video(
        "abn",
        1.0,
        &[
            "a man walks along the parking lot.",
            "a man walks along the parking lot.",
            "a man sets fire to the parking lot.",
        ],
    );
    let a = m.summarize(&v).unwrap();
    assert_eq!(a.label, Some(1.0));
    assert_eq!(a, m.summarize(&v).unwrap());
    assert_eq!(a.text, "a man sets fire to the parking lot.");
}

#[test]
fn echo_is_first_thirty_words() {
    let mock = MockBackend::new(0);
    let long: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
    let out = mock.complete(&long.join(" ")).unwrap();
    assert_eq!(out, long[..30].join(" "));
}

#[test]
fn backend_failure_names_video() {
    let t = PromptTemplates::default();
    let cfg = MstaConfig::default();
    let m = Msta {
        backend: &Down,
        templates: &t,
        config: &cfg,
        seed: 0,
    };
    match m.summarize(&video("clip_7", 1.0, &["x."])) {
        Err(Error::Backend {
            video_id,
            retriable,
            ..
        }) => {
            assert_eq!(video_id.as_deref(), Some("clip_7"));
            assert!(retriable);
        }
        other => panic!("expected backend error, got {other:?}"),
    }
}

#[test]
fn constant_backend_scores_every_caption() {
    let t = PromptTemplates::default();
    let cfg = small_config(4, 3);
    let backend = Constant("0.7".into());
    let m = Msta {
        backend: &backend,
        templates: &t,
        config: &cfg,
        seed: 9,
    };
    let pool: Vec<_> = (0..5)
        .map(|i| summary(&format!("s{i}"), (i % 2) as f64))
        .collect();
    for (i, text) in ["anything", "a car crashes into the pole."]
        .iter()
        .enumerate()
    {
        let y = m
            .annotate(&CaptionSample::original("v", i, *text), i, &pool)
            .unwrap();
        assert_eq!(y, Some(0.7));
    }
}

#[test]
fn unparseable_sampling_is_retried_once_then_skipped() {
    let t = PromptTemplates::default();
    let cfg = small_config(3, 2);
    let pool: Vec<_> = (0..4).map(|i| summary(&format!("s{i}"), 0.0)).collect();
    let cap = CaptionSample::original("v", 0, "x");

    // sampling 1 parses; sampling 2 fails twice (skipped); sampling 3 parses on retry
    let b = Scripted::new(&["0.2", "??", "none", "hmm", "0.6"]);
    let m = Msta {
        backend: &b,
        templates: &t,
        config: &cfg,
        seed: 0,
    };
    let y = m.annotate(&cap, 0, &pool).unwrap().unwrap();
    assert!((y - 0.4).abs() < 1e-12);
    assert_eq!(b.calls.load(Ordering::SeqCst), 5);

    let silent = Constant("I cannot say.".into());
    let m = Msta {
        backend: &silent,
        templates: &t,
        config: &cfg,
        seed: 0,
    };
    assert_eq!(m.annotate(&cap, 0, &pool).unwrap(), None);
}

#[test]
fn canned_transcripts_parse_to_first_decimal() {
    let cases = [
        ("Anomaly score: 0.85.", Some(0.85)),
        ("0.3", Some(0.3)),
        (
            "The score is 0.9 because of the fire (confidence 0.2)",
            Some(0.9),
        ),
        ("Score: 1", Some(1.0)),
        ("Score: 1.5", Some(1.0)),
        ("score = -3", Some(0.0)),
        ("  .25\n", Some(0.25)),
        ("1e-1", Some(0.1)),
        ("Anomaly score: high", None),
        ("", None),
    ];
    for (text, want) in cases {
        assert_eq!(parse_score(text), want, "{text:?}");
    }
}

#[test]
fn annotation_needs_a_large_enough_pool() {
    let t = PromptTemplates::default();
    let cfg = small_config(2, 5);
    let mock = MockBackend::new(0);
    let m = Msta {
        backend: &mock,
        templates: &t,
        config: &cfg,
        seed: 0,
    };
    let pool: Vec<_> = (0..4).map(|i| summary(&format!("s{i}"), 0.0)).collect();
    assert!(matches!(
        m.annotation_prompts("x", 0, &pool),
        Err(Error::Config(_))
    ));
}

#[test]
fn annotation_contexts_sample_without_replacement() {
    let t = PromptTemplates::default();
    let cfg = small_config(6, 7);
    let mock = MockBackend::new(0);
    let m = Msta {
        backend: &mock,
        templates: &t,
        config: &cfg,
        seed: 5,
    };
    let pool: Vec<_> = (0..10)
        .map(|i| summary(&format!("summary number {i}"), 0.0))
        .collect();
    let prompts = m.annotation_prompts("query", 3, &pool).unwrap();
    assert_eq!(prompts.len(), 6);
    for p in &prompts {
        let mut seen: Vec<&str> = p
            .lines()
            .filter(|l| l.starts_with("summary number"))
            .collect();
        assert_eq!(seen.len(), 7);
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 7);
    }
    assert_eq!(prompts, m.annotation_prompts("query", 3, &pool).unwrap());
    assert_ne!(prompts, m.annotation_prompts("query", 4, &pool).unwrap());
}

fn anomaly_samples(n: usize) -> Vec<CaptionSample> {
    let mut rng = common::rng(11);
    let mut seen = std::collections::BTreeSet::new();
    while seen.len() < n {
        seen.insert(synth::caption(&mut rng, true));
    }
    seen.into_iter()
        .map(|t| CaptionSample {
            label: Some(0.9),
            ..summary(&t, 0.9)
        })
        .collect()
}

#[test]
fn zero_generation_is_empty() {
    let t = PromptTemplates::default();
    let cfg = small_config(1, 50);
    let mock = MockBackend::new(0);
    let m = Msta {
        backend: &mock,
        templates: &t,
        config: &cfg,
        seed: 0,
    };
    assert!(m.generate(&[], 0).unwrap().is_empty());
}

#[test]
fn generation_is_reproducible_and_labelled_anomalous() {
    let t = PromptTemplates::default();
    let cfg = small_config(1, 6);
    let pool = anomaly_samples(12);
    let run = |seed| {
        let mock = MockBackend::new(seed);
        let m = Msta {
            backend: &mock,
            templates: &t,
            config: &cfg,
            seed,
        };
        m.generate(&pool, 100).unwrap()
    };
    let a = run(4);
    assert_eq!(a.len(), 100);
    assert!(a
        .iter()
        .all(|s| s.label == Some(1.0) && s.stage == Stage::Generated));
    assert!(a
        .iter()
        .all(|s| s.text.ends_with('.') && !s.text.contains('\n')));
    assert_eq!(io::format_jsonl(&a), io::format_jsonl(&run(4)));
    assert_ne!(a, run(5));
    // repeats are only kept once the tries are exhausted, and are flagged
    let mut seen: std::collections::HashSet<&str> = pool.iter().map(|s| s.text.as_str()).collect();
    for s in &a {
        assert_eq!(!seen.insert(&s.text), s.duplicate);
    }
}

#[test]
fn generation_needs_a_large_enough_pool() {
    let t = PromptTemplates::default();
    let cfg = small_config(1, 6);
    let mock = MockBackend::new(0);
    let m = Msta {
        backend: &mock,
        templates: &t,
        config: &cfg,
        seed: 0,
    };
    let err = m.generate(&anomaly_samples(4), 3).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("has 4 samples"));
}

#[test]
fn duplicate_only_backend_flags_every_sample() {
    let t = PromptTemplates::default();
    let cfg = small_config(1, 2);
    let pool = anomaly_samples(3);
    let b = Constant(format!("{} And more.", pool[0].text));
    let m = Msta {
        backend: &b,
        templates: &t,
        config: &cfg,
        seed: 0,
    };
    let out = m.generate(&pool, 2).unwrap();
    assert!(out.iter().all(|s| s.duplicate && s.text == pool[0].text));
}

fn corpus(seed: u64, videos: usize, anomalous_rate: f64) -> Vec<VideoCaptions> {
    let mut rng = common::rng(seed);
    (0..videos)
        .map(|v| {
            let label = (v % 2) as f64;
            let captions = (0..8)
                .map(|_| {
                    let anom = label == 1.0 && rng.gen_bool(anomalous_rate);
                    synth::caption(&mut rng, anom)
                })
                .collect();
            VideoCaptions {
                video_id: format!("v{v:02}"),
                label,
                captions,
            }
        })
        .collect()
}

#[test]
fn pipeline_balances_classes_exactly() {
    let t = PromptTemplates::default();
    let cfg = small_config(3, 6);
    let mock = MockBackend::new(2);
    let m = Msta {
        backend: &mock,
        templates: &t,
        config: &cfg,
        seed: 2,
    };
    let out = run_pipeline(&m, &corpus(1, 24, 0.5)).unwrap();
    let before: Vec<_> = out
        .annotated
        .iter()
        .chain(&out.summaries)
        .cloned()
        .collect();
    assert!(positive_fraction(&before, cfg.delta) < 0.5);
    assert_eq!(out.generated.len(), generated_count(&cfg, &before));
    let after = out.labelled();
    let pos = after
        .iter()
        .filter(|s| msta::is_positive(s, cfg.delta))
        .count();
    assert_eq!(2 * pos, after.len());
}

#[test]
fn mock_annotations_separate_the_vocabularies() {
    let t = PromptTemplates::default();
    let cfg = small_config(3, 30);
    let mock = MockBackend::new(0);
    let m = Msta {
        backend: &mock,
        templates: &t,
        config: &cfg,
        seed: 0,
    };
    let data = synth::generate(&SynthSpec {
        strength: 3.0,
        ..SynthSpec::default()
    })
    .unwrap();
    let videos: Vec<VideoCaptions> = data
        .videos
        .iter()
        .map(|v| VideoCaptions {
            video_id: v.id.clone(),
            label: v.label as f64,
            captions: v.captions.clone(),
        })
        .collect();
    let out = run_pipeline(&m, &videos).unwrap();
    let mean = |anom: bool| {
        let ys: Vec<f64> = out
            .annotated
            .iter()
            .filter(|s| synth::is_anomalous_caption(&s.text) == anom)
            .map(|s| s.label.unwrap())
            .collect();
        ys.iter().sum::<f64>() / ys.len() as f64
    };
    assert!(
        mean(true) > mean(false) + 0.2,
        "{} vs {}",
        mean(true),
        mean(false)
    );
}

#[test]
fn fixed_generation_count_is_honoured() {
    let cfg = MstaConfig {
        generated: GeneratedCount::Fixed(7),
        ..MstaConfig::default()
    };
    assert_eq!(generated_count(&cfg, &[]), 7);
    let deficit = MstaConfig::default();
    let labelled = vec![summary("a", 0.1), summary("b", 0.2), summary("c", 0.9)];
    assert_eq!(generated_count(&deficit, &labelled), 1);
    assert_eq!(generated_count(&deficit, &[summary("c", 0.9)]), 0);
}

fn separable(n: usize, dim: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = common::rng(seed);
    (0..n)
        .map(|i| {
            let y = (i % 2) as f64;
            let mut e: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            e[0] = if y == 1.0 { 1.0 } else { -1.0 };
            (e, y)
        })
        .unzip()
}

#[test]
fn text_head_learns_separable_set() {
    let (embs, ys) = separable(200, 8, 3);
    let mut head = TextHead::new(8, 16, 0).unwrap();
    let cfg = TextHeadConfig {
        text_dim: 8,
        hidden: 16,
        steps: 200,
        ..TextHeadConfig::default()
    };
    let losses = head.train(&embs, &ys, &cfg, 1).unwrap();
    assert_eq!(losses.len(), 200);
    let rows: Vec<&[f64]> = embs.iter().map(|e| e.as_slice()).collect();
    let p = head.probabilities(&rows).unwrap();
    let correct = p
        .iter()
        .zip(&ys)
        .filter(|(p, y)| (**p > 0.5) == (**y == 1.0))
        .count();
    assert!(
        correct as f64 / 200.0 >= 0.99,
        "accuracy {}",
        correct as f64 / 200.0
    );
    assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn half_target_drives_probability_to_half() {
    let emb = vec![vec![0.3, -0.7, 0.5, 0.1]];
    let mut head = TextHead::new(4, 4, 2).unwrap();
    let cfg = TextHeadConfig {
        text_dim: 4,
        hidden: 4,
        steps: 400,
        batch_size: 1,
        ..TextHeadConfig::default()
    };
    head.train(&emb, &[0.5], &cfg, 0).unwrap();
    assert!((head.probability(&emb[0]).unwrap() - 0.5).abs() < 1e-3);
}

#[test]
fn zero_head_outputs_half() {
    let mut head = TextHead::new(5, 3, 0).unwrap();
    let ids: Vec<_> = head.store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        head.store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    let p = head
        .probabilities(&[&[1.0, 2.0, 3.0, 4.0, 5.0], &[-9.0; 5]])
        .unwrap();
    assert_eq!(p, vec![0.5, 0.5]);
}

#[test]
fn text_head_rejects_wrong_width() {
    let head = TextHead::new(4, 3, 0).unwrap();
    assert!(matches!(
        head.probability(&[1.0, 2.0]),
        Err(Error::Config(_))
    ));
    let mut head = head;
    let cfg = TextHeadConfig::default();
    assert!(matches!(
        head.train(&[vec![0.0; 3]], &[1.0], &cfg, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn text_head_rejects_labels_outside_unit_interval() {
    let mut head = TextHead::new(2, 3, 0).unwrap();
    let cfg = TextHeadConfig::default();
    let x = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
    let err = head.train(&x, &[0.5, 5.0], &cfg, 0).unwrap_err();
    assert!(
        matches!(&err, Error::Contract(m) if m.contains("sample 1")),
        "{err}"
    );
    assert!(head.train(&x, &[0.0, f64::NAN], &cfg, 0).is_err());
}

#[test]
fn trained_head_ranks_anomalous_caption_higher() {
    let emb = HashingEmbedder::new(64, 0).unwrap();
    let mut rng = common::rng(8);
    let mut embs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..200 {
        let anom = i % 2 == 0;
        embs.push(emb.embed(&synth::caption(&mut rng, anom)).unwrap());
        ys.push(if anom { 1.0 } else { 0.0 });
    }
    let mut head = TextHead::new(64, 32, 1).unwrap();
    let cfg = TextHeadConfig {
        hidden: 32,
        ..TextHeadConfig::default()
    };
    head.train(&embs, &ys, &cfg, 0).unwrap();
    let p_anom = head
        .probability(&emb.embed("a child sets fire to the office lobby.").unwrap())
        .unwrap();
    let p_norm = head
        .probability(&emb.embed("a child waits at the office lobby.").unwrap())
        .unwrap();
    assert!(p_anom > p_norm, "{p_anom} <= {p_norm}");
    let again = head
        .probability(&emb.embed("a child waits at the office lobby.").unwrap())
        .unwrap();
    assert_eq!(again, p_norm);
}

proptest! {
    #[test]
    fn raising_delta_never_grows_pool(ys in proptest::collection::vec(0.0f64..=1.0, 0..60), a in 0.01f64..0.99, b in 0.01f64..0.99) {
        let samples: Vec<_> = ys.iter().map(|&y| summary("x", y)).collect();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(anomaly_pool(&samples, hi).len() <= anomaly_pool(&samples, lo).len());
    }

    #[test]
    fn stage_two_output_stays_in_unit_interval(reply in ".{0,40}") {
        let t = PromptTemplates::default();
        let cfg = small_config(2, 1);
        let b = Constant(reply);
        let m = Msta { backend: &b, templates: &t, config: &cfg, seed: 0 };
        let pool = vec![summary("s", 1.0)];
        if let Some(y) = m.annotate(&CaptionSample::original("v", 0, "c"), 0, &pool).unwrap() {
            prop_assert!((0.0..=1.0).contains(&y));
        }
    }

    #[test]
    fn mock_completion_is_pure(prompt in ".{0,80}", seed in any::<u64>()) {
        let m = MockBackend::new(seed);
        prop_assert_eq!(m.complete(&prompt).unwrap(), m.complete(&prompt).unwrap());
    }
}
