use mvad_autograd::top_k_indices;

use crate::{Error, Result};

/// Mean of the `min(k, len)` largest scores.
pub fn topk_mean(scores: &[f64], k: usize) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Contract("topk_mean of an empty score list".into()));
    }
    if k == 0 {
        return Err(Error::Contract("topk_mean needs k >= 1".into()));
    }
    let idx = top_k_indices(scores, k);
    Ok(idx.iter().map(|&i| scores[i]).sum::<f64>() / idx.len() as f64)
}

/// Binary cross-entropy of the top-K mean against the video label, with
/// the mean clamped to `[1e-7, 1 - 1e-7]`.
pub fn mil_loss(s_bar: f64, y: f64) -> f64 {
    let s = s_bar.clamp(mvad_autograd::BCE_CLAMP, 1.0 - mvad_autograd::BCE_CLAMP);
    -y * s.ln() - (1.0 - y) * (1.0 - s).ln()
}

/// Elementwise `alpha * s + (1 - alpha) * p`.
pub fn blend_scores(s: &[f64], p: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if s.len() != p.len() {
        return Err(Error::Alignment(format!(
            "{} fused scores but {} text probabilities",
            s.len(),
            p.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(s.iter()
        .zip(p)
        .map(|(s, p)| alpha * s + (1.0 - alpha) * p)
        .collect())
}

/// Per-snippet mean of `(snippet_index, value)` pairs, for snippets that
/// carry several captions. Every snippet needs at least one value.
pub fn snippet_means(
    snippets: usize,
    values: impl IntoIterator<Item = (usize, f64)>,
) -> Result<Vec<f64>> {
    let mut sums = vec![(0.0, 0usize); snippets];
    for (i, v) in values {
        let slot = sums.get_mut(i).ok_or_else(|| {
            Error::Alignment(format!(
                "snippet index {i} out of range for {snippets} snippets"
            ))
        })?;
        slot.0 += v;
        slot.1 += 1;
    }
    sums.into_iter()
        .enumerate()
        .map(|(i, (sum, n))| {
            if n == 0 {
                Err(Error::Alignment(format!("snippet {i} has no caption")))
            } else {
                Ok(sum / n as f64)
            }
        })
        .collect()
}

/// Per-snippet fused score, text probability and final score.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTriple {
    pub s: Vec<f64>,
    pub p: Option<Vec<f64>>,
    pub s_hat: Vec<f64>,
}

impl ScoreTriple {
    /// Without text probabilities the final score is the fused score.
    pub fn new(s: Vec<f64>, p: Option<Vec<f64>>, alpha: f64) -> Result<Self> {
        let s_hat = match &p {
            Some(p) => blend_scores(&s, p, alpha)?,
            None => s.clone(),
        };
        Ok(Self { s, p, s_hat })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snippet_means_average_and_check_coverage() {
        let m = snippet_means(3, [(0, 0.2), (2, 1.0), (1, 0.5), (0, 0.4)]).unwrap();
        assert!((m[0] - 0.3).abs() < 1e-15);
        assert_eq!(&m[1..], &[0.5, 1.0]);
        assert!(matches!(
            snippet_means(2, [(0, 0.1)]),
            Err(Error::Alignment(_))
        ));
        assert!(matches!(
            snippet_means(1, [(0, 0.1), (1, 0.2)]),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn topk_examples() {
        assert!((topk_mean(&[0.9, 0.1, 0.8], 2).unwrap() - 0.85).abs() < 1e-15);
        let s = [0.3, 0.2, 0.7];
        assert_eq!(topk_mean(&s, 9).unwrap(), s.iter().sum::<f64>() / 3.0);
        assert!(topk_mean(&[], 3).is_err());
    }

    #[test]
    fn mil_loss_examples() {
        assert!((mil_loss(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(mil_loss(0.0, 0.0) < 1e-6);
        assert!(mil_loss(1.0, 1.0) < 1e-6);
        assert!(mil_loss(0.0, 1.0).is_finite());
        let h = 1e-6;
        let d = (mil_loss(0.5 + h, 1.0) - mil_loss(0.5 - h, 1.0)) / (2.0 * h);
        assert!((d + 2.0).abs() < 1e-6);
    }

    #[test]
    fn blend_examples() {
        assert!((blend_scores(&[0.6], &[0.8], 0.5).unwrap()[0] - 0.7).abs() < 1e-15);
        assert_eq!(
            blend_scores(&[0.6, 0.1], &[0.8, 0.9], 1.0).unwrap(),
            vec![0.6, 0.1]
        );
        assert_eq!(
            blend_scores(&[0.6, 0.1], &[0.8, 0.9], 0.0).unwrap(),
            vec![0.8, 0.9]
        );
        assert!(matches!(
            blend_scores(&[0.1], &[0.1, 0.2], 0.5),
            Err(Error::Alignment(_))
        ));
        let t = ScoreTriple::new(vec![0.2, 0.4], None, 0.5).unwrap();
        assert_eq!(t.s_hat, t.s);
    }
}
