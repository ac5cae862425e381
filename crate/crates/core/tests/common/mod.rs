#![allow(dead_code)]

use std::collections::BTreeMap;

use mvad_autograd::{ParamStore, Tensor};
use mvad_core::config::EncoderConfig;
use mvad_core::encoders::SnippetFeatures;
use mvad_core::nn::Init;
use mvad_core::ModalityId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn init(store: &mut ParamStore, seed: u64) -> Init<'_> {
    Init::new(store, rng(seed))
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn features(m: ModalityId, rows: usize, cols: usize, seed: u64) -> SnippetFeatures {
    SnippetFeatures::new(m, random_matrix(rows, cols, &mut rng(seed))).unwrap()
}

pub fn tiny_encoder(embed_dim: usize, heads: usize, layers: usize) -> EncoderConfig {
    EncoderConfig {
        embed_dim,
        heads,
        unimodal_layers: layers,
        ..EncoderConfig::default()
    }
}

pub fn dims(pairs: &[(ModalityId, usize)]) -> BTreeMap<ModalityId, usize> {
    pairs.iter().copied().collect()
}

/// Central-difference gradient of a scalar function of one tensor.
pub fn numeric_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * h);
    }
    g
}

/// Largest elementwise relative error, with a floor on the denominator so
/// near-zero gradients are compared absolutely.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
        .fold(0.0, f64::max)
}
