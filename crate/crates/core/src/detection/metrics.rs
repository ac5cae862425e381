use crate::{Error, Result};

fn check(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Alignment(format!(
            "{} frame scores but {} frame labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("frame score {i} is {}", scores[i])));
    }
    Ok(())
}

/// Area under the ROC curve as the Mann-Whitney statistic, tied pairs
/// counting one half.
///
/// Ranks are kept doubled so midranks stay integral and the only rounding
/// is the final division.
pub fn frame_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::MetricUndefined(
            "AUC needs both positive and negative frames".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j share the doubled midrank i + j + 1.
        let mid2 = (i + j + 1) as u128;
        let tied_pos = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        rank_sum2 += mid2 * tied_pos;
        i = j;
    }
    let u2 = rank_sum2 - pos * (pos + 1);
    Ok(u2 as f64 / (2 * pos * neg) as f64)
}

/// Average precision over frames ranked by descending score. Equal scores
/// keep their input order.
pub fn frame_ap(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::MetricUndefined(
            "AP needs at least one positive frame".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &k) in order.iter().enumerate() {
        if labels[k] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / pos as f64)
}

/// Repeats each snippet score over its frames. A final partial snippet is
/// allowed: `frame_count` may differ from `snippets * frames_per_snippet`
/// by less than one snippet, in which case the tail is cut or padded with
/// the last score.
pub fn expand_to_frames(
    scores: &[f64],
    frames_per_snippet: usize,
    frame_count: usize,
) -> Result<Vec<f64>> {
    if frames_per_snippet == 0 {
        return Err(Error::Config("frames_per_snippet must be positive".into()));
    }
    let full = scores.len() * frames_per_snippet;
    if scores.is_empty() || frame_count.abs_diff(full) >= frames_per_snippet {
        return Err(Error::Alignment(format!(
            "{} snippets of {frames_per_snippet} frames cannot cover {frame_count} frames",
            scores.len()
        )));
    }
    let last = scores[scores.len() - 1];
    Ok(scores
        .iter()
        .flat_map(|&s| std::iter::repeat_n(s, frames_per_snippet))
        .chain(std::iter::repeat(last))
        .take(frame_count)
        .collect())
}
