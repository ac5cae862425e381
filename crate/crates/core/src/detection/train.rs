use mvad_autograd::{ParamGrads, Sgd};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Detector, VideoFeatures};
use crate::config::TrainConfig;
use crate::{Error, Result};

/// One labelled training video.
#[derive(Clone, Debug)]
pub struct TrainVideo {
    pub id: String,
    pub label: f64,
    pub features: VideoFeatures,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    /// Mean MIL loss over the batch, before the update.
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

/// Draws a batch of distinct videos per step (the whole set if it is
/// smaller than the batch), sums per-video gradients in id order and takes
/// one SGD step on the batch mean.
pub fn train(
    model: &mut Detector,
    videos: &[TrainVideo],
    cfg: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepReport),
) -> Result<TrainReport> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if !videos.iter().any(|v| v.label >= 0.5) || !videos.iter().any(|v| v.label < 0.5) {
        return Err(Error::Contract(
            "training needs at least one normal and one abnormal video".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sgd = Sgd::with_momentum(cfg.learning_rate, cfg.momentum);
    let batch = cfg.batch_size.min(videos.len());
    let mut indices: Vec<usize> = (0..videos.len()).collect();
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let mut picked: Vec<usize> = indices.partial_shuffle(&mut rng, batch).0.to_vec();
        picked.sort_by(|&a, &b| videos[a].id.cmp(&videos[b].id).then(a.cmp(&b)));
        let mut total = ParamGrads::new(model.store.len());
        let mut loss = 0.0;
        for &i in &picked {
            let v = &videos[i];
            let (l, g) = model.loss_and_grads(&v.features, v.label, cfg.top_k)?;
            if !l.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss is {l} at step {step} on video {}",
                    v.id
                )));
            }
            loss += l;
            total.accumulate(g);
        }
        let scale = 1.0 / picked.len() as f64;
        loss *= scale;
        total.scale(scale);
        if !total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at step {step}"
            )));
        }
        let rep = StepReport {
            step,
            loss,
            grad_norm: total.l2_norm(),
        };
        on_step(&rep);
        report.losses.push(loss);
        sgd.step(&mut model.store, &total);
    }
    Ok(report)
}
