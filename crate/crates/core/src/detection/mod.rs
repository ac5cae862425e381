//! Global encoder, score regressor, top-K MIL objective, score blending and
//! frame-level metrics.

mod metrics;
mod scoring;
mod train;

use std::collections::BTreeMap;

use mvad_autograd::{Activation, ParamGrads, ParamStore, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DetectorConfig, EncoderConfig, MsbtConfig, RunConfig};
use crate::encoders::{SnippetFeatures, TransformerBlock, UnimodalEncoder};
use crate::modality::{ModalityId, ModalitySet};
use crate::msbt::{FusedPair, FusionOutput, FusionVars, Msbt};
use crate::nn::{Init, Mlp};
use crate::{Error, Result};

pub use metrics::{expand_to_frames, frame_ap, frame_auc};
pub use scoring::{blend_scores, mil_loss, snippet_means, topk_mean, ScoreTriple};
pub use train::{train, StepReport, TrainReport, TrainVideo};

/// Everything needed to rebuild a [`Detector`]'s parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub modalities: ModalitySet,
    pub input_dims: BTreeMap<ModalityId, usize>,
    pub encoder: EncoderConfig,
    pub msbt: MsbtConfig,
    pub detector: DetectorConfig,
}

impl ModelConfig {
    pub fn from_run(run: &RunConfig, input_dims: BTreeMap<ModalityId, usize>) -> Result<Self> {
        for m in run.modalities.iter() {
            if !input_dims.contains_key(&m) {
                return Err(Error::Config(format!(
                    "no feature width known for modality {m}"
                )));
            }
        }
        let input_dims = input_dims
            .into_iter()
            .filter(|(m, _)| run.modalities.contains(*m))
            .collect();
        Ok(Self {
            modalities: run.modalities.clone(),
            input_dims,
            encoder: run.encoder.clone(),
            msbt: run.msbt.clone(),
            detector: run.detector.clone(),
        })
    }
}

/// Aligned snippet features of one video, keyed by modality.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    inner: BTreeMap<ModalityId, SnippetFeatures>,
}

impl VideoFeatures {
    pub fn new(features: impl IntoIterator<Item = SnippetFeatures>) -> Result<Self> {
        let inner: BTreeMap<_, _> = features.into_iter().map(|f| (f.modality, f)).collect();
        let mut counts = inner.values().map(SnippetFeatures::snippets);
        if let Some(first) = counts.next() {
            if counts.any(|n| n != first) {
                let desc: Vec<String> = inner
                    .values()
                    .map(|f| format!("{}={}", f.modality, f.snippets()))
                    .collect();
                return Err(Error::Alignment(format!(
                    "modalities disagree on snippet count: {}",
                    desc.join(", ")
                )));
            }
        }
        Ok(Self { inner })
    }

    pub fn snippets(&self) -> usize {
        self.inner
            .values()
            .next()
            .map_or(0, SnippetFeatures::snippets)
    }

    pub fn get(&self, m: ModalityId) -> Option<&SnippetFeatures> {
        self.inner.get(&m)
    }

    pub fn iter(&self) -> impl Iterator<Item = &SnippetFeatures> {
        self.inner.values()
    }
}

/// Graph handles produced by [`Detector::forward`].
pub struct ForwardVars {
    pub tokens: BTreeMap<ModalityId, Var>,
    pub fusion: FusionVars,
    /// `N_T x 1` fused anomaly scores in `(0, 1)`.
    pub scores: Var,
}

/// The full fused-feature anomaly scorer.
#[derive(Clone, Debug)]
pub struct Detector {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: UnimodalEncoder,
    pub msbt: Msbt,
    pub global: Vec<TransformerBlock>,
    pub score_head: Mlp,
}

impl Detector {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, ChaCha8Rng::seed_from_u64(seed));
        let enc = &config.encoder;
        let encoder = UnimodalEncoder::new(&mut init, enc, &config.input_dims)?;
        let det = &config.detector;
        let msbt = Msbt::new(
            &mut init,
            &config.msbt,
            enc,
            &config.modalities,
            det.regressor_hidden,
            det.regressor_activation,
        )?;
        let width = msbt.fused_width();
        let global = (0..det.global_layers)
            .map(|l| {
                TransformerBlock::new(
                    &mut init,
                    &format!("global.layer{l}"),
                    width,
                    enc.heads,
                    enc.ffn_mult,
                )
            })
            .collect();
        let h = det.regressor_hidden;
        let act = det.regressor_activation;
        let score_head = init.mlp(
            "global.regressor",
            &[width, h, h, 1],
            &[act, act, Activation::Sigmoid],
        );
        Ok(Self {
            config,
            store,
            encoder,
            msbt,
            global,
            score_head,
        })
    }

    pub fn fused_width(&self) -> usize {
        self.msbt.fused_width()
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, video: &VideoFeatures) -> Result<ForwardVars> {
        let mut inputs = BTreeMap::new();
        for m in self.config.modalities.iter() {
            let f = video
                .get(m)
                .ok_or_else(|| Error::Contract(format!("video lacks {m} features")))?;
            inputs.insert(m, tape.constant(f.matrix.clone()));
        }
        self.forward_inputs(tape, &inputs)
    }

    /// Forward pass from raw feature matrices already on the tape.
    pub fn forward_inputs<'a>(
        &self,
        tape: &mut Tape<'a>,
        inputs: &BTreeMap<ModalityId, Var>,
    ) -> Result<ForwardVars> {
        let mut tokens = BTreeMap::new();
        for m in self.config.modalities.iter() {
            let x = *inputs
                .get(&m)
                .ok_or_else(|| Error::Contract(format!("video lacks {m} features")))?;
            let z = self.encoder.project_var(tape, m, x)?;
            tokens.insert(m, self.encoder.contextualize(tape, z)?);
        }
        let pairs = self.msbt.fuse_all(tape, &tokens)?;
        let fusion = self.msbt.weight_and_concat(tape, pairs)?;
        let scores = self.global_encode_and_score(tape, fusion.weighted)?;
        Ok(ForwardVars {
            tokens,
            fusion,
            scores,
        })
    }

    /// Global Transformer over snippets, then the three-layer regressor.
    pub fn global_encode_and_score<'a>(&self, tape: &mut Tape<'a>, z_hat: Var) -> Result<Var> {
        let width = tape.value(z_hat).cols();
        if width != self.fused_width() {
            return Err(Error::Config(format!(
                "fused width {width} does not match configured {}",
                self.fused_width()
            )));
        }
        let mut h = z_hat;
        for block in &self.global {
            h = block.forward(tape, h)?;
        }
        self.score_head.forward(tape, h)
    }

    pub fn scores(&self, video: &VideoFeatures) -> Result<Vec<f64>> {
        let mut tape = Tape::with_params(&self.store);
        let out = self.forward(&mut tape, video)?;
        Ok(tape.value(out.scores).data().to_vec())
    }

    pub fn fusion_output(&self, video: &VideoFeatures) -> Result<FusionOutput> {
        let mut tape = Tape::with_params(&self.store);
        let out = self.forward(&mut tape, video)?;
        let pairs = out
            .fusion
            .pairs
            .iter()
            .map(|p| FusedPair {
                pair: p.pair,
                fused: tape.value(p.fused).clone(),
                final_tokens: tape.value(p.final_tokens).clone(),
            })
            .collect();
        let weights = match out.fusion.weights {
            Some(w) => tape.value(w).data().to_vec(),
            None => vec![1.0; self.msbt.pairs.len()],
        };
        Ok(FusionOutput {
            pairs,
            weights,
            weighted: tape.value(out.fusion.weighted).clone(),
        })
    }

    /// Top-K MIL loss of one video as a graph node.
    pub fn mil_objective<'a>(
        &self,
        tape: &mut Tape<'a>,
        video: &VideoFeatures,
        label: f64,
        k: usize,
    ) -> Result<Var> {
        let out = self.forward(tape, video)?;
        let s_bar = tape.topk_mean(out.scores, k)?;
        Ok(tape.bce(s_bar, &[label])?)
    }

    pub fn loss_and_grads(
        &self,
        video: &VideoFeatures,
        label: f64,
        k: usize,
    ) -> Result<(f64, ParamGrads)> {
        let mut tape = Tape::with_params(&self.store);
        let loss = self.mil_objective(&mut tape, video, label, k)?;
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?.into_param_grads(&tape);
        Ok((value, grads))
    }
}
