//! Parameter bundles for the layers the network is built from.

use mvad_autograd::{init, Activation, MlpLayer, ParamId, ParamStore, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::Result;

/// Registers freshly initialized parameters under a name prefix.
pub struct Init<'s> {
    pub store: &'s mut ParamStore,
    pub rng: ChaCha8Rng,
}

impl<'s> Init<'s> {
    pub fn new(store: &'s mut ParamStore, rng: ChaCha8Rng) -> Self {
        Self { store, rng }
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let weight = init::xavier_uniform(fan_in, fan_out, &mut self.rng);
        Linear {
            weight: self.store.add(format!("{name}.weight"), weight),
            bias: self
                .store
                .add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    /// Bias-free projection.
    pub fn matrix(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let weight = init::xavier_uniform(fan_in, fan_out, &mut self.rng);
        self.store.add(name, weight)
    }

    pub fn layer_norm(&mut self, name: &str, width: usize) -> LayerNorm {
        LayerNorm {
            gain: self
                .store
                .add(format!("{name}.gain"), Tensor::ones(&[width])),
            bias: self
                .store
                .add(format!("{name}.bias"), Tensor::zeros(&[width])),
        }
    }

    /// `dims = [in, h1, ..., out]`, one activation per layer.
    pub fn mlp(&mut self, name: &str, dims: &[usize], activations: &[Activation]) -> Mlp {
        assert_eq!(dims.len(), activations.len() + 1);
        let layers = dims
            .windows(2)
            .zip(activations)
            .enumerate()
            .map(|(i, (w, &act))| (self.linear(&format!("{name}.{i}"), w[0], w[1]), act))
            .collect();
        Mlp { layers }
    }

    /// Randomly initialized token block (Xavier range over its two extents).
    pub fn tokens(&mut self, name: &str, count: usize, width: usize) -> ParamId {
        let t = init::xavier_uniform(count, width, &mut self.rng);
        self.store.add(name, t)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        Ok(tape.linear(x, w, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        Ok(tape.layer_norm(x, g, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<(Linear, Activation)>,
}

impl Mlp {
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        let layers: Vec<MlpLayer> = self
            .layers
            .iter()
            .map(|(l, act)| MlpLayer {
                weight: tape.param(l.weight),
                bias: tape.param(l.bias),
                activation: *act,
            })
            .collect();
        Ok(tape.mlp(x, &layers)?)
    }

    pub fn input_dim(&self, store: &ParamStore) -> usize {
        store.get(self.layers[0].0.weight).rows()
    }
}
