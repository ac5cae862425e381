//! Multi-scale bottleneck Transformer: asymmetric pairwise fusion through a
//! shrinking ladder of bottleneck tokens, plus bottleneck-token weighting of
//! the fused features.

use std::collections::BTreeMap;

use mvad_autograd::{Activation, ParamId, Tape, Tensor, Var};

use crate::config::{EncoderConfig, MsbtConfig, TokenSchedule, WeightActivation};
use crate::encoders::TransformerBlock;
use crate::modality::{ModalityId, ModalitySet};
use crate::nn::{Init, Mlp};
use crate::{Error, Result};

/// Ordered modality pair `(a, b)`: information flows from `a` into `b`.
pub type Pair = (ModalityId, ModalityId);

/// Token counts per fusion layer: `n1`, then repeated floor-halving.
pub fn halving_schedule(n1: usize, layers: usize) -> Result<Vec<usize>> {
    if layers == 0 {
        return Err(Error::Config("fusion_layers must be >= 1".into()));
    }
    let min = 1usize
        .checked_shl((layers - 1) as u32)
        .filter(|m| *m > 0)
        .ok_or_else(|| Error::Config(format!("{layers} fusion layers cannot be halved")))?;
    if n1 < min {
        return Err(Error::Config(format!(
            "bottleneck_tokens {n1} reaches zero before layer {layers}; need at least {min}"
        )));
    }
    let mut out = Vec::with_capacity(layers);
    let mut n = n1;
    for _ in 0..layers {
        out.push(n);
        n /= 2;
    }
    Ok(out)
}

pub fn token_schedule(cfg: &MsbtConfig) -> Result<Vec<usize>> {
    match cfg.token_schedule {
        TokenSchedule::Reduced => halving_schedule(cfg.bottleneck_tokens, cfg.fusion_layers),
        TokenSchedule::Fixed => {
            if cfg.fusion_layers == 0 || cfg.bottleneck_tokens == 0 {
                return Err(Error::Config(
                    "fusion_layers and bottleneck_tokens must be >= 1".into(),
                ));
            }
            Ok(vec![cfg.bottleneck_tokens; cfg.fusion_layers])
        }
    }
}

/// All ordered pairs of distinct modalities: for each `i < j` in canonical
/// order, `(m_i, m_j)` then `(m_j, m_i)`. For `{T,R,F,A}` this gives
/// TR, RT, TF, FT, TA, AT, RF, FR, RA, AR, FA, AF.
pub fn enumerate_pairs(modalities: &ModalitySet) -> Result<Vec<Pair>> {
    let m = modalities.as_slice();
    if m.len() < 2 {
        return Err(Error::Config(format!(
            "fusion needs at least two modalities, got {}",
            modalities
        )));
    }
    let mut pairs = Vec::with_capacity(m.len() * (m.len() - 1));
    for i in 0..m.len() {
        for j in i + 1..m.len() {
            pairs.push((m[i], m[j]));
            pairs.push((m[j], m[i]));
        }
    }
    Ok(pairs)
}

pub fn pair_name(pair: Pair) -> String {
    format!("{}{}", pair.0, pair.1)
}

/// Parameters fusing one modality into another.
#[derive(Clone, Debug)]
pub struct PairFusion {
    pub initial_tokens: ParamId,
    /// Refines bottleneck tokens against the source stream, one per layer.
    pub source_blocks: Vec<TransformerBlock>,
    /// Injects refined tokens into the target stream, one per layer.
    pub target_blocks: Vec<TransformerBlock>,
    /// Fresh token blocks for layers `2..=L_M`.
    pub next_tokens: Vec<ParamId>,
    pub cross_blocks: Vec<TransformerBlock>,
}

impl PairFusion {
    fn new(
        init: &mut Init<'_>,
        name: &str,
        schedule: &[usize],
        enc: &EncoderConfig,
        cross: bool,
    ) -> Self {
        let d = enc.embed_dim;
        let block = |init: &mut Init<'_>, n: String| {
            TransformerBlock::new(init, &n, d, enc.heads, enc.ffn_mult)
        };
        let initial_tokens = init.tokens(&format!("{name}.tokens0"), schedule[0], d);
        let mut source_blocks = Vec::new();
        let mut target_blocks = Vec::new();
        let mut next_tokens = Vec::new();
        let mut cross_blocks = Vec::new();
        for (l, _) in schedule.iter().enumerate() {
            source_blocks.push(block(init, format!("{name}.layer{l}.source")));
            target_blocks.push(block(init, format!("{name}.layer{l}.target")));
            if let Some(&next) = schedule.get(l + 1) {
                next_tokens.push(init.tokens(&format!("{name}.tokens{}", l + 1), next, d));
                if cross {
                    cross_blocks.push(block(init, format!("{name}.layer{l}.cross")));
                }
            }
        }
        Self {
            initial_tokens,
            source_blocks,
            target_blocks,
            next_tokens,
            cross_blocks,
        }
    }

    /// Passes fresh tokens through the cross-Transformer attending to the
    /// previous layer's refined tokens.
    pub fn cross_transformer<'a>(
        &self,
        tape: &mut Tape<'a>,
        layer: usize,
        new_tokens: Var,
        prev_tokens: Var,
    ) -> Result<Var> {
        self.cross_blocks[layer].forward_cross(tape, new_tokens, prev_tokens)
    }
}

/// Graph handles for one fused pair.
#[derive(Clone, Debug)]
pub struct FusedPairVars {
    pub pair: Pair,
    /// `N_T x D_E` target stream after the last layer.
    pub fused: Var,
    /// Refined bottleneck tokens of the last layer.
    pub final_tokens: Var,
    /// Bottleneck token count fed to each layer.
    pub token_counts: Vec<usize>,
}

/// Graph handles for the weighted concatenation.
#[derive(Clone, Debug)]
pub struct FusionVars {
    pub pairs: Vec<FusedPairVars>,
    /// `N_F x 1`; `None` when weighting is disabled.
    pub weights: Option<Var>,
    /// `N_T x (N_F * D_E)`
    pub weighted: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedPair {
    pub pair: Pair,
    pub fused: Tensor,
    pub final_tokens: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutput {
    pub pairs: Vec<FusedPair>,
    pub weights: Vec<f64>,
    pub weighted: Tensor,
}

#[derive(Clone, Debug)]
pub struct WeightingHead {
    pub blocks: Vec<TransformerBlock>,
    pub regressor: Mlp,
}

#[derive(Clone, Debug)]
pub struct Msbt {
    pub config: MsbtConfig,
    pub embed_dim: usize,
    pub modalities: ModalitySet,
    pub pairs: Vec<Pair>,
    pub schedule: Vec<usize>,
    /// One entry per pair, or a single entry when pair weights are shared.
    pub fusions: Vec<PairFusion>,
    pub weighting: Option<WeightingHead>,
}

impl Msbt {
    pub fn new(
        init: &mut Init<'_>,
        config: &MsbtConfig,
        encoder: &EncoderConfig,
        modalities: &ModalitySet,
        regressor_hidden: usize,
        regressor_activation: Activation,
    ) -> Result<Self> {
        let pairs = enumerate_pairs(modalities)?;
        let schedule = token_schedule(config)?;
        let cross = config.cross_transformer;
        let fusions = if config.shared_pair_weights {
            vec![PairFusion::new(
                init,
                "msbt.shared",
                &schedule,
                encoder,
                cross,
            )]
        } else {
            pairs
                .iter()
                .map(|&p| {
                    PairFusion::new(
                        init,
                        &format!("msbt.{}", pair_name(p)),
                        &schedule,
                        encoder,
                        cross,
                    )
                })
                .collect()
        };
        let d = encoder.embed_dim;
        let weighting = config.weighting.then(|| {
            let blocks = if config.weight_transformer {
                (0..config.weighting_layers)
                    .map(|l| {
                        TransformerBlock::new(
                            init,
                            &format!("msbt.weighting.layer{l}"),
                            d,
                            encoder.heads,
                            encoder.ffn_mult,
                        )
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let h = regressor_hidden;
            let regressor = init.mlp(
                "msbt.weighting.regressor",
                &[d, h, h, 1],
                &[
                    regressor_activation,
                    regressor_activation,
                    Activation::Identity,
                ],
            );
            WeightingHead { blocks, regressor }
        });
        Ok(Self {
            config: config.clone(),
            embed_dim: d,
            modalities: modalities.clone(),
            pairs,
            schedule,
            fusions,
            weighting,
        })
    }

    pub fn fused_width(&self) -> usize {
        self.pairs.len() * self.embed_dim
    }

    fn fusion_for(&self, index: usize) -> &PairFusion {
        if self.fusions.len() == 1 {
            &self.fusions[0]
        } else {
            &self.fusions[index]
        }
    }

    /// Fuses `z_a` into `z_b` through every fusion layer.
    pub fn fuse_pair<'a>(
        &self,
        tape: &mut Tape<'a>,
        pair_index: usize,
        z_a: Var,
        z_b: Var,
    ) -> Result<FusedPairVars> {
        let pair = self.pairs[pair_index];
        let (ta, tb) = (tape.value(z_a), tape.value(z_b));
        if ta.rows() != tb.rows() {
            return Err(Error::Alignment(format!(
                "{} has {} snippets but {} has {}",
                pair.0,
                ta.rows(),
                pair.1,
                tb.rows()
            )));
        }
        if ta.cols() != self.embed_dim || tb.cols() != self.embed_dim {
            return Err(Error::Config(format!(
                "fusion expects width {}, got {} and {}",
                self.embed_dim,
                ta.cols(),
                tb.cols()
            )));
        }
        let n_t = ta.rows();
        let params = self.fusion_for(pair_index);
        let layers = self.schedule.len();
        let mut za = z_a;
        let mut zb = z_b;
        let mut tokens = tape.param(params.initial_tokens);
        let mut refined = tokens;
        for l in 0..layers {
            let n_bt = self.schedule[l];
            let joint = tape.concat_rows(&[za, tokens])?;
            let joint = params.source_blocks[l].forward(tape, joint)?;
            za = tape.slice_rows(joint, 0, n_t)?;
            refined = tape.slice_rows(joint, n_t, n_bt)?;

            let joint = tape.concat_rows(&[zb, refined])?;
            let joint = params.target_blocks[l].forward(tape, joint)?;
            // the trailing token rows of the target pass are not used downstream
            zb = tape.slice_rows(joint, 0, n_t)?;

            if l + 1 < layers {
                let fresh = tape.param(params.next_tokens[l]);
                tokens = if self.config.cross_transformer {
                    params.cross_transformer(tape, l, fresh, refined)?
                } else {
                    fresh
                };
            }
        }
        Ok(FusedPairVars {
            pair,
            fused: zb,
            final_tokens: refined,
            token_counts: self.schedule.clone(),
        })
    }

    /// Fuses every ordered pair in canonical order.
    pub fn fuse_all<'a>(
        &self,
        tape: &mut Tape<'a>,
        tokens: &BTreeMap<ModalityId, Var>,
    ) -> Result<Vec<FusedPairVars>> {
        self.pairs
            .iter()
            .enumerate()
            .map(|(i, (a, b))| {
                let za = *tokens
                    .get(a)
                    .ok_or_else(|| Error::Contract(format!("missing tokens for {a}")))?;
                let zb = *tokens
                    .get(b)
                    .ok_or_else(|| Error::Contract(format!("missing tokens for {b}")))?;
                self.fuse_pair(tape, i, za, zb)
            })
            .collect()
    }

    /// Per-pair weights from the last-layer bottleneck tokens, `N_F x 1`.
    ///
    /// Each pair's tokens are mean-pooled to one row (a no-op when the last
    /// layer holds a single token), the `N_F` rows pass through the weighting
    /// Transformer and then the regressor.
    pub fn pair_weights<'a>(
        &self,
        tape: &mut Tape<'a>,
        pairs: &[FusedPairVars],
    ) -> Result<Option<Var>> {
        let Some(head) = &self.weighting else {
            return Ok(None);
        };
        let pooled = pairs
            .iter()
            .map(|p| {
                if tape.value(p.final_tokens).rows() == 1 {
                    p.final_tokens
                } else {
                    tape.mean_rows(p.final_tokens)
                }
            })
            .collect::<Vec<_>>();
        let mut h = tape.concat_rows(&pooled)?;
        for block in &head.blocks {
            h = block.forward(tape, h)?;
        }
        let logits = head.regressor.forward(tape, h)?;
        let w = match self.config.weight_activation {
            WeightActivation::Sigmoid => tape.sigmoid(logits),
            WeightActivation::Softmax => {
                let n = pairs.len();
                let row = tape.reshape(logits, &[1, n])?;
                let row = tape.softmax_rows(row)?;
                tape.reshape(row, &[n, 1])?
            }
        };
        Ok(Some(w))
    }

    /// `[w_1 Z^{p_1} || ... || w_NF Z^{p_NF}]`, or the plain concatenation
    /// when `weights` is `None`.
    pub fn apply_weights<'a>(
        &self,
        tape: &mut Tape<'a>,
        pairs: &[FusedPairVars],
        weights: Option<Var>,
    ) -> Result<Var> {
        self.check_order(pairs)?;
        let blocks = match weights {
            None => pairs.iter().map(|p| p.fused).collect::<Vec<_>>(),
            Some(w) => {
                let n = tape.value(w).numel();
                if n != pairs.len() {
                    return Err(Error::Contract(format!(
                        "{} weights for {} pairs",
                        n,
                        pairs.len()
                    )));
                }
                let flat = tape.reshape(w, &[n, 1])?;
                let mut out = Vec::with_capacity(n);
                for (i, p) in pairs.iter().enumerate() {
                    let wi = tape.slice_rows(flat, i, 1)?;
                    out.push(tape.scale_by(p.fused, wi)?);
                }
                out
            }
        };
        Ok(tape.concat_cols(&blocks)?)
    }

    pub fn weight_and_concat<'a>(
        &self,
        tape: &mut Tape<'a>,
        pairs: Vec<FusedPairVars>,
    ) -> Result<FusionVars> {
        self.check_order(&pairs)?;
        let weights = self.pair_weights(tape, &pairs)?;
        let weighted = self.apply_weights(tape, &pairs, weights)?;
        Ok(FusionVars {
            pairs,
            weights,
            weighted,
        })
    }

    fn check_order(&self, pairs: &[FusedPairVars]) -> Result<()> {
        let got: Vec<Pair> = pairs.iter().map(|p| p.pair).collect();
        if got != self.pairs {
            let fmt = |v: &[Pair]| {
                v.iter()
                    .map(|&p| pair_name(p))
                    .collect::<Vec<_>>()
                    .join(",")
            };
            return Err(Error::Contract(format!(
                "fused pairs must be in canonical order [{}], got [{}]",
                fmt(&self.pairs),
                fmt(&got)
            )));
        }
        Ok(())
    }
}
