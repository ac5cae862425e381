//! Per-modality projection and the modality-shared Transformer.

use std::collections::BTreeMap;

use mvad_autograd::{Activation, ParamId, ParamStore, Tape, Tensor, Var};

use crate::config::{EncoderConfig, PositionalEmbedding, MAX_POSITIONS};
use crate::modality::ModalityId;
use crate::nn::{Init, LayerNorm, Linear, Mlp};
use crate::{Error, Result};

/// Snippet-level features of one modality, `N_T x D_m`.
#[derive(Clone, Debug, PartialEq)]
pub struct SnippetFeatures {
    pub modality: ModalityId,
    pub matrix: Tensor,
}

impl SnippetFeatures {
    pub fn new(modality: ModalityId, matrix: Tensor) -> Result<Self> {
        if matrix.shape().len() != 2 || matrix.rows() == 0 {
            return Err(Error::Contract(format!(
                "{modality} features must be a non-empty matrix, got shape {:?}",
                matrix.shape()
            )));
        }
        Ok(Self { modality, matrix })
    }

    pub fn snippets(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }
}

/// Encoded tokens of one modality, `N_T x D_E`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub modality: ModalityId,
    pub tokens: Tensor,
}

#[derive(Clone, Debug)]
pub struct AttentionHead {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

/// Pre-norm Transformer layer with multi-head attention and a two-layer FFN.
///
/// The same block runs as self-attention ([`TransformerBlock::forward`]) or
/// as cross-attention with queries from one stream and keys/values from
/// another ([`TransformerBlock::forward_cross`]).
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub width: usize,
    pub ln_attn: LayerNorm,
    pub heads: Vec<AttentionHead>,
    pub out: Linear,
    pub ln_ffn: LayerNorm,
    pub ffn: Mlp,
}

impl TransformerBlock {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        width: usize,
        heads: usize,
        ffn_mult: usize,
    ) -> Self {
        let head_dim = width / heads;
        let heads = (0..heads)
            .map(|h| AttentionHead {
                query: init.matrix(&format!("{name}.head{h}.query"), width, head_dim),
                key: init.matrix(&format!("{name}.head{h}.key"), width, head_dim),
                value: init.matrix(&format!("{name}.head{h}.value"), width, head_dim),
            })
            .collect();
        Self {
            width,
            ln_attn: init.layer_norm(&format!("{name}.ln_attn"), width),
            heads,
            out: init.linear(&format!("{name}.out"), width, width),
            ln_ffn: init.layer_norm(&format!("{name}.ln_ffn"), width),
            ffn: init.mlp(
                &format!("{name}.ffn"),
                &[width, width * ffn_mult, width],
                &[Activation::Gelu, Activation::Identity],
            ),
        }
    }

    /// Multi-head dot-product attention. Logits are scaled by `1/sqrt(width)`
    /// (the model width, not the per-head width); heads are concatenated and
    /// passed through the output projection. Also returns each head's
    /// attention matrix.
    pub fn attention_with_maps<'a>(
        &self,
        tape: &mut Tape<'a>,
        queries: Var,
        context: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let scale = 1.0 / (self.width as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut maps = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let wq = tape.param(head.query);
            let wk = tape.param(head.key);
            let wv = tape.param(head.value);
            let q = tape.matmul(queries, wq)?;
            let k = tape.matmul(context, wk)?;
            let v = tape.matmul(context, wv)?;
            let logits = tape.matmul_nt(q, k)?;
            let logits = tape.scale(logits, scale);
            let attn = tape.softmax_rows(logits)?;
            outs.push(tape.matmul(attn, v)?);
            maps.push(attn);
        }
        let merged = tape.concat_cols(&outs)?;
        Ok((self.out.forward(tape, merged)?, maps))
    }

    pub fn attention<'a>(&self, tape: &mut Tape<'a>, queries: Var, context: Var) -> Result<Var> {
        Ok(self.attention_with_maps(tape, queries, context)?.0)
    }

    /// Multi-head self-attention on `x`.
    pub fn msa<'a>(&self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        self.attention(tape, x, x)
    }

    /// `h = MSA(LN(z)) + z; out = FFN(LN(h)) + h`
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, z: Var) -> Result<Var> {
        self.check_width(tape, z)?;
        let n = self.ln_attn.forward(tape, z)?;
        let a = self.msa(tape, n)?;
        let h = tape.add(a, z)?;
        self.feed_forward(tape, h)
    }

    /// Same structure as [`TransformerBlock::forward`], attending from `x`
    /// to `y`. Residuals run on the `x` stream.
    pub fn forward_cross<'a>(&self, tape: &mut Tape<'a>, x: Var, y: Var) -> Result<Var> {
        self.check_width(tape, x)?;
        self.check_width(tape, y)?;
        let nx = self.ln_attn.forward(tape, x)?;
        let ny = self.ln_attn.forward(tape, y)?;
        let a = self.attention(tape, nx, ny)?;
        let h = tape.add(a, x)?;
        self.feed_forward(tape, h)
    }

    fn feed_forward<'a>(&self, tape: &mut Tape<'a>, h: Var) -> Result<Var> {
        let n = self.ln_ffn.forward(tape, h)?;
        let f = self.ffn.forward(tape, n)?;
        Ok(tape.add(f, h)?)
    }

    fn check_width(&self, tape: &Tape<'_>, x: Var) -> Result<()> {
        let cols = tape.value(x).cols();
        if cols != self.width {
            return Err(Error::Config(format!(
                "transformer expects width {}, got {cols}",
                self.width
            )));
        }
        Ok(())
    }
}

/// Per-modality affine projections into `D_E` followed by a stack of
/// Transformer layers shared by every modality.
#[derive(Clone, Debug)]
pub struct UnimodalEncoder {
    pub config: EncoderConfig,
    pub input_dims: BTreeMap<ModalityId, usize>,
    pub projections: BTreeMap<ModalityId, Linear>,
    pub positional: Option<ParamId>,
    pub layers: Vec<TransformerBlock>,
}

impl UnimodalEncoder {
    pub fn new(
        init: &mut Init<'_>,
        config: &EncoderConfig,
        input_dims: &BTreeMap<ModalityId, usize>,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let projections = input_dims
            .iter()
            .map(|(&m, &dim)| {
                if dim == 0 {
                    return Err(Error::Config(format!("{m} feature width is zero")));
                }
                Ok((m, init.linear(&format!("encoder.project.{m}"), dim, d)))
            })
            .collect::<Result<_>>()?;
        let positional = match config.positional {
            PositionalEmbedding::Learned => {
                Some(init.tokens("encoder.positional", MAX_POSITIONS, d))
            }
            PositionalEmbedding::None => None,
        };
        let layers = (0..config.unimodal_layers)
            .map(|l| {
                TransformerBlock::new(
                    init,
                    &format!("encoder.layer{l}"),
                    d,
                    config.heads,
                    config.ffn_mult,
                )
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            input_dims: input_dims.clone(),
            projections,
            positional,
            layers,
        })
    }

    /// Maps each snippet row independently to `D_E`, then adds the
    /// positional row for its index (clamped to the table size).
    pub fn project<'a>(&self, tape: &mut Tape<'a>, features: &SnippetFeatures) -> Result<Var> {
        let x = tape.constant(features.matrix.clone());
        self.project_var(tape, features.modality, x)
    }

    /// [`UnimodalEncoder::project`] on features already on the tape.
    pub fn project_var<'a>(&self, tape: &mut Tape<'a>, m: ModalityId, x: Var) -> Result<Var> {
        let proj = self
            .projections
            .get(&m)
            .ok_or_else(|| Error::Config(format!("no projection for modality {m}")))?;
        let expected = self.input_dims[&m];
        let (rows, cols) = (tape.value(x).rows(), tape.value(x).cols());
        if cols != expected {
            return Err(Error::Config(format!(
                "{m} features have width {cols}, projection expects {expected}"
            )));
        }
        let h = proj.forward(tape, x)?;
        match self.positional {
            Some(table) => {
                let table = tape.param(table);
                let idx: Vec<usize> = (0..rows).map(|i| i.min(MAX_POSITIONS - 1)).collect();
                let pos = tape.gather_rows(table, &idx)?;
                Ok(tape.add(h, pos)?)
            }
            None => Ok(h),
        }
    }

    /// Runs the shared Transformer stack on already projected tokens.
    pub fn contextualize<'a>(&self, tape: &mut Tape<'a>, mut z: Var) -> Result<Var> {
        for layer in &self.layers {
            z = layer.forward(tape, z)?;
        }
        Ok(z)
    }

    pub fn encode<'a>(&self, tape: &mut Tape<'a>, features: &SnippetFeatures) -> Result<Var> {
        let z = self.project(tape, features)?;
        self.contextualize(tape, z)
    }

    /// Convenience: encode outside of any training graph.
    pub fn encode_tokens(
        &self,
        store: &ParamStore,
        features: &SnippetFeatures,
    ) -> Result<TokenSequence> {
        let mut tape = Tape::with_params(store);
        let z = self.encode(&mut tape, features)?;
        Ok(TokenSequence {
            modality: features.modality,
            tokens: tape.value(z).clone(),
        })
    }
}
