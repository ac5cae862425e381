mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;

use mvad_autograd::{ParamStore, Tensor};
use mvad_core::config::RunConfig;
use mvad_core::io::{
    self, Checkpoint, FeatureFile, Manifest, ScoreRow, Split, VideoRecord, FEATURE_HEADER_LEN,
};
use mvad_core::msta::{CaptionSample, Stage};
use mvad_core::{Error, FeatureFileError, ModalityId};
use proptest::prelude::*;

fn sample_file() -> FeatureFile {
    FeatureFile {
        rows: 3,
        cols: 2,
        frames_per_snippet: 16,
        data: vec![0.5, -1.25, f32::MIN_POSITIVE, 3.0e7, -0.0, 1.0 / 3.0],
    }
}

#[test]
fn feature_file_header_layout() {
    let bytes = sample_file().encode();
    assert_eq!(&bytes[..8], b"MVADFEAT");
    assert_eq!(bytes[8..12], 1u32.to_le_bytes());
    assert_eq!(bytes[12..16], 3u32.to_le_bytes());
    assert_eq!(bytes[16..20], 2u32.to_le_bytes());
    assert_eq!(bytes[20..24], 16u32.to_le_bytes());
    assert_eq!(bytes.len(), FEATURE_HEADER_LEN + 6 * 4);
    assert_eq!(bytes[24..28], 0.5f32.to_le_bytes());
}

#[test]
fn feature_file_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/x.feat");
    let f = sample_file();
    f.write(&path).unwrap();
    let back = FeatureFile::read(&path).unwrap();
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back.data), bits(&f.data));
    assert_eq!(std::fs::read(&path).unwrap(), back.encode());
}

#[test]
fn truncated_payload_names_byte_counts() {
    let mut bytes = sample_file().encode();
    bytes.truncate(bytes.len() - 5);
    let err = FeatureFile::decode(&bytes).unwrap_err();
    assert_eq!(
        err,
        FeatureFileError::TruncatedPayload {
            offset: 24,
            expected: 24,
            actual: 19
        }
    );
    let msg = err.to_string();
    assert!(
        msg.contains("expected 24 bytes") && msg.contains("got 19"),
        "{msg}"
    );
}

#[test]
fn zero_rows_rejected() {
    let mut bytes = sample_file().encode();
    bytes[12..16].copy_from_slice(&0u32.to_le_bytes());
    assert_eq!(
        FeatureFile::decode(&bytes).unwrap_err(),
        FeatureFileError::Zero {
            field: "rows",
            offset: 12
        }
    );
}

#[test]
fn header_errors_are_distinct() {
    let good = sample_file().encode();
    let mut magic = good.clone();
    magic[0] = b'X';
    assert!(matches!(
        FeatureFile::decode(&magic),
        Err(FeatureFileError::BadMagic { .. })
    ));
    let mut version = good.clone();
    version[8..12].copy_from_slice(&7u32.to_le_bytes());
    assert_eq!(
        FeatureFile::decode(&version).unwrap_err(),
        FeatureFileError::UnsupportedVersion {
            found: 7,
            expected: 1
        }
    );
    assert!(matches!(
        FeatureFile::decode(&good[..20]),
        Err(FeatureFileError::TruncatedHeader {
            expected: 24,
            actual: 20
        })
    ));
    let mut trailing = good.clone();
    trailing.push(0);
    assert_eq!(
        FeatureFile::decode(&trailing).unwrap_err(),
        FeatureFileError::TrailingBytes {
            offset: 48,
            extra: 1
        }
    );
    let mut huge = good;
    huge[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
    huge[16..20].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(FeatureFile::decode(&huge).is_err());
}

#[test]
fn read_error_carries_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.feat");
    std::fs::write(&path, b"nope").unwrap();
    let err = FeatureFile::read(&path).unwrap_err();
    assert!(matches!(err, Error::Feature { .. }));
    assert!(err.to_string().contains("bad.feat"));
}

fn record(id: &str, split: Split) -> VideoRecord {
    VideoRecord {
        id: id.into(),
        split,
        label: 0,
        features: [(ModalityId::Rgb, PathBuf::from(format!("{id}.R.feat")))]
            .into_iter()
            .collect(),
        captions: None,
        frame_labels: (split == Split::Test).then(|| PathBuf::from(format!("{id}.txt"))),
    }
}

#[test]
fn manifest_round_trip_and_validation() {
    let m = Manifest {
        videos: vec![record("a", Split::Train), record("b", Split::Test)],
        root: PathBuf::from("/data"),
    };
    let text = m.to_json();
    let back = Manifest::parse(&text, &PathBuf::from("/data")).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.to_json(), text);
    assert_eq!(
        back.resolve(&PathBuf::from("a.R.feat")),
        PathBuf::from("/data/a.R.feat")
    );

    let mut dup = m.clone();
    dup.videos.push(record("a", Split::Train));
    assert!(dup.validate().unwrap_err().contains("duplicate"));
    let mut unlabeled = m.clone();
    unlabeled.videos[1].frame_labels = None;
    assert!(unlabeled.validate().unwrap_err().contains("frame labels"));
    let mut bad_label = m;
    bad_label.videos[0].label = 2;
    assert!(bad_label.validate().is_err());
    assert!(Manifest::parse("{\"videos\": [{\"id\": 1}]}", &PathBuf::new()).is_err());
}

#[test]
fn manifest_load_reports_missing_path() {
    let err = Manifest::load(&PathBuf::from("/definitely/not/here/manifest.json")).unwrap_err();
    assert!(err
        .to_string()
        .contains("/definitely/not/here/manifest.json"));
}

#[test]
fn load_features_checks_frame_rate_agreement() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    FeatureFile::from_tensor(&t, 16)
        .unwrap()
        .write(&dir.path().join("v.R.feat"))
        .unwrap();
    FeatureFile::from_tensor(&t, 8)
        .unwrap()
        .write(&dir.path().join("v.F.feat"))
        .unwrap();
    let mut rec = record("v", Split::Train);
    rec.features
        .insert(ModalityId::Flow, PathBuf::from("v.F.feat"));
    let m = Manifest {
        videos: vec![rec.clone()],
        root: dir.path().to_path_buf(),
    };
    let (feats, fps) = m.load_features(&rec, [ModalityId::Rgb]).unwrap();
    assert_eq!((feats.len(), fps), (1, 16));
    assert!(matches!(
        m.load_features(&rec, [ModalityId::Rgb, ModalityId::Flow]),
        Err(Error::Alignment(_))
    ));
    assert!(matches!(
        m.load_features(&rec, [ModalityId::Audio]),
        Err(Error::Config(_))
    ));
}

#[test]
fn frame_labels_format() {
    let labels = vec![false, true, true, false];
    let text = io::format_frame_labels(&labels);
    assert_eq!(text, "0\n1\n1\n0\n");
    assert_eq!(io::parse_frame_labels(&text).unwrap(), labels);
    assert_eq!(
        io::parse_frame_labels("0\n\n1\n").unwrap(),
        vec![false, true]
    );
    assert_eq!(io::parse_frame_labels("0\n2\n").unwrap_err().0, 2);
    assert!(io::parse_frame_labels("\n").is_err());
}

#[test]
fn caption_jsonl_round_trip() {
    let items = vec![
        CaptionSample::original("v1", 0, "a man walks\nhome"),
        CaptionSample {
            video_id: None,
            snippet_index: None,
            text: "synthetic".into(),
            stage: Stage::Generated,
            label: Some(1.0),
            duplicate: true,
        },
    ];
    let text = io::format_jsonl(&items);
    assert_eq!(text.lines().count(), 2);
    let back: Vec<CaptionSample> = io::parse_jsonl(&text).unwrap();
    assert_eq!(back, items);
    assert_eq!(io::format_jsonl(&back), text);
    let err = io::parse_jsonl::<CaptionSample>("{\"text\": \"x\"}\nnot json\n").unwrap_err();
    assert!(err.0 >= 1);
}

#[test]
fn score_csv_round_trip() {
    let rows = vec![
        ScoreRow {
            video_id: "v,1".into(),
            snippet_index: 0,
            s: 0.25,
            p: Some(0.75),
            s_hat: 0.5,
        },
        ScoreRow {
            video_id: "v2".into(),
            snippet_index: 3,
            s: 0.1,
            p: None,
            s_hat: 0.1,
        },
    ];
    let text = io::format_scores(&rows);
    assert!(text.starts_with("video_id,snippet_index,s,p,s_hat\n"));
    let back = io::parse_scores(&text).unwrap();
    assert_eq!(back, rows);
    assert_eq!(io::format_scores(&back), text);
    assert_eq!(io::parse_scores(&io::format_scores(&[])).unwrap(), vec![]);
    assert!(io::parse_scores("a,b\n1,2\n").is_err());
    assert_eq!(
        io::parse_scores("video_id,snippet_index,s,p,s_hat\nv,x,1,,1\n")
            .unwrap_err()
            .0,
        2
    );
}

fn sample_checkpoint() -> Checkpoint {
    let mut store = ParamStore::new();
    store.add(
        "w",
        Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
    );
    store.add("b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
    let meta: BTreeMap<String, String> = [("embed_dim".to_string(), "8".to_string())]
        .into_iter()
        .collect();
    Checkpoint::from_store(meta, &store)
}

#[test]
fn checkpoint_round_trip_and_load() {
    let ck = sample_checkpoint();
    let bytes = ck.encode();
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.encode(), bytes);

    let mut store = ParamStore::new();
    store.add("w", Tensor::zeros(&[2, 3]));
    store.add("b", Tensor::zeros(&[3]));
    back.load_into(&mut store).unwrap();
    assert_eq!(store.get(store.find("w").unwrap()).data()[5], 1e300);

    let mut wrong = ParamStore::new();
    wrong.add("w", Tensor::zeros(&[3, 2]));
    wrong.add("b", Tensor::zeros(&[3]));
    assert!(matches!(
        back.load_into(&mut wrong),
        Err(Error::Contract(_))
    ));
}

#[test]
fn checkpoint_metadata_keeps_carriage_returns() {
    let mut ck = sample_checkpoint();
    ck.meta.insert("note".into(), "a=b\r".into());
    let back = Checkpoint::decode(&ck.encode()).unwrap();
    assert_eq!(back.meta["note"], "a=b\r");
    assert_eq!(back.encode(), ck.encode());
}

#[test]
fn checkpoint_decode_errors_report_offsets() {
    let bytes = sample_checkpoint().encode();
    match Checkpoint::decode(&bytes[..bytes.len() - 3]) {
        Err(Error::Decode {
            what: "checkpoint",
            offset,
            ..
        }) => assert!(offset <= bytes.len()),
        other => panic!("expected decode error, got {other:?}"),
    }
    let mut magic = bytes.clone();
    magic[1] = 0;
    assert!(matches!(
        Checkpoint::decode(&magic),
        Err(Error::Decode { offset: 0, .. })
    ));
    let mut trailing = bytes;
    trailing.push(1);
    assert!(Checkpoint::decode(&trailing).is_err());
}

#[test]
fn run_config_ini_round_trip() {
    let cfg = RunConfig::default();
    let text = cfg.to_ini();
    let back = RunConfig::parse_ini(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.to_ini(), text);
    assert!(RunConfig::parse_ini("bogus = 1\n")
        .unwrap_err()
        .to_string()
        .contains("bogus"));
}

#[test]
fn concurrent_writers_never_interleave() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("shared.bin");
    let payloads: Vec<Vec<u8>> = (0..8u8).map(|i| vec![i; 64 * 1024 + i as usize]).collect();
    std::thread::scope(|s| {
        for p in &payloads {
            let path = &path;
            s.spawn(move || {
                for _ in 0..5 {
                    io::write_locked(path, p).unwrap();
                }
            });
        }
    });
    let out = std::fs::read(&path).unwrap();
    assert!(payloads.contains(&out));
}

proptest! {
    #[test]
    fn feature_decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..96)) {
        let _ = FeatureFile::decode(&bytes);
    }

    #[test]
    fn feature_encode_decode_identity(rows in 1u32..6, cols in 1u32..6, fps in 1u32..32, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let t = common::random_matrix(rows as usize, cols as usize, &mut rng);
        let f = FeatureFile::from_tensor(&t, fps).unwrap();
        let bytes = f.encode();
        let back = FeatureFile::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn checkpoint_decode_never_panics(cut in 0usize..200, flip in 0usize..200, v in any::<u8>()) {
        let mut bytes = sample_checkpoint().encode();
        if flip < bytes.len() {
            bytes[flip] = v;
        }
        bytes.truncate(cut.min(bytes.len()));
        let _ = Checkpoint::decode(&bytes);
    }

    #[test]
    fn caption_labels_survive_jsonl_bitwise(label in 0.0f64..=1.0) {
        let sample = CaptionSample {
            label: Some(label),
            ..CaptionSample::original("v", 0, "a caption")
        };
        let back: Vec<CaptionSample> = io::parse_jsonl(&io::format_jsonl(&[sample])).unwrap();
        prop_assert_eq!(back[0].label.unwrap().to_bits(), label.to_bits());
    }
}
