//! Text anomaly head: two-layer MLP with a sigmoid output.

use mvad_autograd::{Activation, ParamGrads, ParamStore, Sgd, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TextHeadConfig;
use crate::nn::{Init, Mlp};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct TextHead {
    pub input_dim: usize,
    pub store: ParamStore,
    pub mlp: Mlp,
}

impl TextHead {
    pub fn new(input_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden == 0 {
            return Err(Error::Config("text head widths must be positive".into()));
        }
        let mut store = ParamStore::new();
        let mlp = Init::new(&mut store, ChaCha8Rng::seed_from_u64(seed)).mlp(
            "text_head",
            &[input_dim, hidden, 1],
            &[Activation::Relu, Activation::Sigmoid],
        );
        Ok(Self {
            input_dim,
            store,
            mlp,
        })
    }

    fn batch(&self, rows: &[&[f64]]) -> Result<Tensor> {
        if let Some(bad) = rows.iter().find(|r| r.len() != self.input_dim) {
            return Err(Error::Config(format!(
                "text embedding has {} values, head expects {}",
                bad.len(),
                self.input_dim
            )));
        }
        Ok(Tensor::from_rows(rows)?)
    }

    pub fn probabilities(&self, embeddings: &[&[f64]]) -> Result<Vec<f64>> {
        if embeddings.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.batch(embeddings)?;
        let mut tape = Tape::with_params(&self.store);
        let x = tape.constant(x);
        let p = self.mlp.forward(&mut tape, x)?;
        Ok(tape.value(p).data().to_vec())
    }

    pub fn probability(&self, embedding: &[f64]) -> Result<f64> {
        Ok(self.probabilities(&[embedding])?[0])
    }

    /// Mini-batch SGD on mean BCE. Targets may be fractional. Returns the
    /// loss of every step.
    pub fn train(
        &mut self,
        embeddings: &[Vec<f64>],
        targets: &[f64],
        cfg: &TextHeadConfig,
        seed: u64,
    ) -> Result<Vec<f64>> {
        if embeddings.len() != targets.len() {
            return Err(Error::Alignment(format!(
                "{} embeddings but {} labels",
                embeddings.len(),
                targets.len()
            )));
        }
        if embeddings.is_empty() {
            return Err(Error::Contract("no labelled text samples".into()));
        }
        if cfg.batch_size == 0 {
            return Err(Error::Config("text_batch_size must be >= 1".into()));
        }
        if let Some((i, y)) = targets
            .iter()
            .enumerate()
            .find(|(_, y)| !(0.0..=1.0).contains(*y))
        {
            return Err(Error::Contract(format!(
                "text sample {i} has label {y}, expected [0, 1]"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sgd = Sgd::new(cfg.learning_rate);
        let mut order: Vec<usize> = (0..embeddings.len()).collect();
        let batch = cfg.batch_size.min(order.len());
        let mut losses = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            let picked = order.partial_shuffle(&mut rng, batch).0.to_vec();
            let rows: Vec<&[f64]> = picked.iter().map(|&i| embeddings[i].as_slice()).collect();
            let ys: Vec<f64> = picked.iter().map(|&i| targets[i]).collect();
            let x = self.batch(&rows)?;
            let grads: ParamGrads = {
                let mut tape = Tape::with_params(&self.store);
                let x = tape.constant(x);
                let p = self.mlp.forward(&mut tape, x)?;
                let loss = tape.bce(p, &ys)?;
                let l = tape.value(loss).data()[0];
                if !l.is_finite() {
                    return Err(Error::Numeric(format!(
                        "text head loss is {l} at step {step}"
                    )));
                }
                losses.push(l);
                tape.backward(loss)?.into_param_grads(&tape)
            };
            sgd.step(&mut self.store, &grads);
        }
        Ok(losses)
    }
}
