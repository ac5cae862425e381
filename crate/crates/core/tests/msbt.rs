mod common;

use std::collections::BTreeMap;

use common::*;
use mvad_autograd::{Activation, ParamStore, Tape, Tensor, Var};
use mvad_core::config::{EncoderConfig, MsbtConfig, WeightActivation};
use mvad_core::msbt::Msbt;
use mvad_core::{Error, ModalityId, ModalitySet};

fn build(
    store: &mut ParamStore,
    enc: &EncoderConfig,
    cfg: &MsbtConfig,
    mods: &str,
    seed: u64,
) -> Msbt {
    let set: ModalitySet = mods.parse().unwrap();
    Msbt::new(&mut init(store, seed), cfg, enc, &set, 16, Activation::Relu).unwrap()
}

fn tiny() -> (EncoderConfig, MsbtConfig) {
    let enc = tiny_encoder(8, 2, 1);
    let cfg = MsbtConfig {
        fusion_layers: 2,
        bottleneck_tokens: 2,
        ..MsbtConfig::default()
    };
    (enc, cfg)
}

fn token_leaves(
    tape: &mut Tape<'_>,
    msbt: &Msbt,
    n_t: usize,
    seed: u64,
) -> BTreeMap<ModalityId, Var> {
    let mut r = rng(seed);
    msbt.modalities
        .iter()
        .map(|m| (m, tape.constant(random_matrix(n_t, msbt.embed_dim, &mut r))))
        .collect()
}

#[test]
fn default_pair_fusion_shape_and_ladder() {
    let mut store = ParamStore::new();
    let msbt = build(
        &mut store,
        &EncoderConfig::default(),
        &MsbtConfig::default(),
        "T,R",
        1,
    );
    let mut tape = Tape::with_params(&store);
    let z = token_leaves(&mut tape, &msbt, 6, 2);
    let out = msbt
        .fuse_pair(&mut tape, 0, z[&ModalityId::Text], z[&ModalityId::Rgb])
        .unwrap();
    assert_eq!(tape.value(out.fused).shape(), &[6, 128]);
    assert_eq!(tape.value(out.final_tokens).shape(), &[1, 128]);
    assert_eq!(out.token_counts, vec![16, 8, 4, 2, 1]);
}

#[test]
fn fusion_is_asymmetric() {
    let mut store = ParamStore::new();
    let (enc, cfg) = tiny();
    let msbt = build(&mut store, &enc, &cfg, "T,R", 3);
    let mut tape = Tape::with_params(&store);
    let z = token_leaves(&mut tape, &msbt, 5, 4);
    let (t, r) = (z[&ModalityId::Text], z[&ModalityId::Rgb]);
    let tr = msbt.fuse_pair(&mut tape, 0, t, r).unwrap();
    let rt = msbt.fuse_pair(&mut tape, 1, r, t).unwrap();
    assert!(tape.value(tr.fused).max_abs_diff(tape.value(rt.fused)) > 1e-6);
}

#[test]
fn mismatched_snippet_counts_are_alignment_errors() {
    let mut store = ParamStore::new();
    let (enc, cfg) = tiny();
    let msbt = build(&mut store, &enc, &cfg, "T,R", 3);
    let mut tape = Tape::with_params(&store);
    let a = tape.constant(Tensor::zeros(&[4, 8]));
    let b = tape.constant(Tensor::zeros(&[5, 8]));
    assert!(matches!(
        msbt.fuse_pair(&mut tape, 0, a, b),
        Err(Error::Alignment(_))
    ));
}

#[test]
fn cross_transformer_shape() {
    let mut store = ParamStore::new();
    let (enc, cfg) = tiny();
    let msbt = build(&mut store, &enc, &cfg, "T,R", 3);
    let mut tape = Tape::with_params(&store);
    let new = tape.constant(random_matrix(1, 8, &mut rng(1)));
    let prev = tape.constant(random_matrix(2, 8, &mut rng(2)));
    let out = msbt.fusions[0]
        .cross_transformer(&mut tape, 0, new, prev)
        .unwrap();
    assert_eq!(tape.value(out).shape(), &[1, 8]);
}

fn layer_norm_rows(x: &Tensor) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..x.rows())
        .map(|r| {
            let row = x.row(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .map(|v| (v - mean) / (var + 1e-5).sqrt())
                .collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn blind_queries_attend_uniformly() {
    let mut store = ParamStore::new();
    let (enc, cfg) = tiny();
    let msbt = build(&mut store, &enc, &cfg, "T,R", 3);
    let block = msbt.fusions[0].cross_blocks[0].clone();
    for h in &block.heads {
        store.get_mut(h.query).data_mut().fill(0.0);
        store.get_mut(h.key).data_mut().fill(0.0);
    }
    for (l, _) in &block.ffn.layers {
        store.get_mut(l.weight).data_mut().fill(0.0);
    }
    let x = random_matrix(2, 8, &mut rng(5));
    let y = random_matrix(3, 8, &mut rng(6));
    let mut tape = Tape::with_params(&store);
    let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let got = block.forward_cross(&mut tape, xv, yv).unwrap();
    let got = tape.value(got).clone();

    // every query sees the mean of the normalized context
    let ny = layer_norm_rows(&y);
    let mean: Vec<f64> = (0..8)
        .map(|c| (0..3).map(|r| ny.row(r)[c]).sum::<f64>() / 3.0)
        .collect();
    let mean = Tensor::matrix(1, 8, mean).unwrap();
    let heads: Vec<f64> = block
        .heads
        .iter()
        .flat_map(|h| mean.matmul(store.get(h.value)).unwrap().into_data())
        .collect();
    let merged = Tensor::matrix(1, 8, heads)
        .unwrap()
        .matmul(store.get(block.out.weight))
        .unwrap();
    for r in 0..2 {
        for c in 0..8 {
            let want = merged.data()[c] + store.get(block.out.bias).data()[c] + x.row(r)[c];
            assert!((got.row(r)[c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn chained_cross_transformers_gradcheck() {
    let mut store = ParamStore::new();
    let enc = tiny_encoder(8, 2, 1);
    let cfg = MsbtConfig {
        fusion_layers: 3,
        bottleneck_tokens: 4,
        ..MsbtConfig::default()
    };
    let msbt = build(&mut store, &enc, &cfg, "T,R", 3);
    let f = &msbt.fusions[0];
    let x = random_matrix(4, 8, &mut rng(7));
    let run = |tape: &mut Tape<'_>, x: Var| {
        let t1 = tape.param(f.next_tokens[0]);
        let h = f.cross_transformer(tape, 0, t1, x).unwrap();
        let t2 = tape.param(f.next_tokens[1]);
        let out = f.cross_transformer(tape, 1, t2, h).unwrap();
        tape.sum(out)
    };
    let mut tape = Tape::with_params(&store);
    let xv = tape.leaf(x.clone());
    let s = run(&mut tape, xv);
    let analytic = tape.backward(s).unwrap().get(xv).unwrap().clone();
    let numeric = numeric_grad(&x, 1e-4, |p| {
        let mut tape = Tape::with_params(&store);
        let xv = tape.constant(p.clone());
        let s = run(&mut tape, xv);
        tape.value(s).item().unwrap()
    });
    assert!(rel_err(&analytic, &numeric) < 1e-3);
}

#[test]
fn forced_weights() {
    let mut store = ParamStore::new();
    let (enc, cfg) = tiny();
    let msbt = build(&mut store, &enc, &cfg, "T,R,F", 3);
    let mut tape = Tape::with_params(&store);
    let z = token_leaves(&mut tape, &msbt, 4, 1);
    let pairs = msbt.fuse_all(&mut tape, &z).unwrap();
    let plain = msbt.apply_weights(&mut tape, &pairs, None).unwrap();
    let ones = tape.constant(Tensor::ones(&[6, 1]));
    let weighted = msbt.apply_weights(&mut tape, &pairs, Some(ones)).unwrap();
    assert_eq!(tape.value(plain), tape.value(weighted));
    let manual: Vec<Var> = pairs.iter().map(|p| p.fused).collect();
    let manual = tape.concat_cols(&manual).unwrap();
    assert_eq!(tape.value(plain), tape.value(manual));

    let mut w = vec![0.7; 6];
    w[2] = 0.0;
    let w = tape.constant(Tensor::matrix(6, 1, w).unwrap());
    let out = msbt.apply_weights(&mut tape, &pairs, Some(w)).unwrap();
    let t = tape.value(out);
    for r in 0..4 {
        assert!(t.row(r)[16..24].iter().all(|&v| v == 0.0));
        assert!(t.row(r)[8..16].iter().any(|&v| v != 0.0));
    }
}

#[test]
fn saturated_sigmoid_recovers_plain_concatenation() {
    let mut store = ParamStore::new();
    let (enc, cfg) = tiny();
    let msbt = build(&mut store, &enc, &cfg, "T,R", 3);
    let last = msbt
        .weighting
        .as_ref()
        .unwrap()
        .regressor
        .layers
        .last()
        .unwrap()
        .0
        .bias;
    store.get_mut(last).data_mut().fill(1e3);
    let mut tape = Tape::with_params(&store);
    let z = token_leaves(&mut tape, &msbt, 3, 1);
    let pairs = msbt.fuse_all(&mut tape, &z).unwrap();
    let plain = msbt.apply_weights(&mut tape, &pairs, None).unwrap();
    let out = msbt.weight_and_concat(&mut tape, pairs).unwrap();
    assert!(tape
        .value(out.weights.unwrap())
        .data()
        .iter()
        .all(|&w| w == 1.0));
    assert_eq!(tape.value(out.weighted), tape.value(plain));
}

#[test]
fn default_four_modality_width() {
    let mut store = ParamStore::new();
    let cfg = MsbtConfig {
        fusion_layers: 1,
        shared_pair_weights: true,
        ..MsbtConfig::default()
    };
    let msbt = build(&mut store, &EncoderConfig::default(), &cfg, "T,R,F,A", 3);
    assert_eq!(msbt.pairs.len(), 12);
    assert_eq!(msbt.fused_width(), 1536);
}

#[test]
fn weighted_shape_over_modality_counts_and_lengths() {
    let (enc, cfg) = tiny();
    for mods in ["T,R", "T,R,F", "T,R,F,A"] {
        let mut store = ParamStore::new();
        let msbt = build(&mut store, &enc, &cfg, mods, 9);
        let k = msbt.modalities.len();
        for n_t in [1, 3, 50] {
            let mut tape = Tape::with_params(&store);
            let z = token_leaves(&mut tape, &msbt, n_t, n_t as u64);
            let pairs = msbt.fuse_all(&mut tape, &z).unwrap();
            let out = msbt.weight_and_concat(&mut tape, pairs).unwrap();
            assert_eq!(tape.value(out.weighted).shape(), &[n_t, k * (k - 1) * 8]);
            let w = tape.value(out.weights.unwrap());
            assert_eq!(w.numel(), k * (k - 1));
            assert!(w.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}

#[test]
fn softmax_weights_sum_to_one() {
    let (enc, mut cfg) = tiny();
    cfg.weight_activation = WeightActivation::Softmax;
    let mut store = ParamStore::new();
    let msbt = build(&mut store, &enc, &cfg, "T,R,F", 2);
    let mut tape = Tape::with_params(&store);
    let z = token_leaves(&mut tape, &msbt, 3, 1);
    let pairs = msbt.fuse_all(&mut tape, &z).unwrap();
    let out = msbt.weight_and_concat(&mut tape, pairs).unwrap();
    let w = tape.value(out.weights.unwrap());
    assert!((w.sum() - 1.0).abs() < 1e-12);
}

#[test]
fn pairs_out_of_order_are_rejected() {
    let mut store = ParamStore::new();
    let (enc, cfg) = tiny();
    let msbt = build(&mut store, &enc, &cfg, "T,R", 3);
    let mut tape = Tape::with_params(&store);
    let z = token_leaves(&mut tape, &msbt, 3, 1);
    let mut pairs = msbt.fuse_all(&mut tape, &z).unwrap();
    pairs.swap(0, 1);
    assert!(matches!(
        msbt.weight_and_concat(&mut tape, pairs),
        Err(Error::Contract(_))
    ));
}

#[test]
fn cross_transformer_off_and_fixed_schedule_build() {
    let (enc, mut cfg) = tiny();
    cfg.cross_transformer = false;
    cfg.token_schedule = mvad_core::config::TokenSchedule::Fixed;
    let mut store = ParamStore::new();
    let msbt = build(&mut store, &enc, &cfg, "T,R", 3);
    assert!(msbt.fusions[0].cross_blocks.is_empty());
    let mut tape = Tape::with_params(&store);
    let z = token_leaves(&mut tape, &msbt, 3, 1);
    let pairs = msbt.fuse_all(&mut tape, &z).unwrap();
    assert_eq!(pairs[0].token_counts, vec![2, 2]);
    assert_eq!(tape.value(pairs[0].final_tokens).rows(), 2);
}
