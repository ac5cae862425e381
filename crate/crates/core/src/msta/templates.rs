//! Prompt templates and byte-exact prompt assembly.
//!
//! Pieces are joined with a single `\n`; no trailing newline is added.
//! Newlines inside caption text are replaced by spaces so every joined
//! piece stays one line.

pub const SUMMARIZE: &str = "Please summarize the following sentences into a single sentence of no more than 30 words. Please just output the summarized sentence without additional details or introductions, just one sentence.";
pub const VIDEO_DESCRIPTION: &str = "Video description:";
pub const ANOMALY_SCORE: &str = "Anomaly score:";
pub const ANNOTATE: &str = "Each element in the following list contains a description of a video and the corresponding anomaly score. The anomaly score indicates the probability of an anomalous event occurring in the video. Just complete the last space of the correct anomaly score.";
pub const EXAMPLE: &str = "Example:";
pub const GENERATE: &str = "Each element in the following list contains a description of a video snippet whose category is abnormal events. Just generate one sentence in the same category as the above sentences.";

pub const JOINER: &str = "\n";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplates {
    pub summarize: String,
    pub video_description: String,
    pub anomaly_score: String,
    pub annotate: String,
    pub example: String,
    pub generate: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            summarize: SUMMARIZE.into(),
            video_description: VIDEO_DESCRIPTION.into(),
            anomaly_score: ANOMALY_SCORE.into(),
            annotate: ANNOTATE.into(),
            example: EXAMPLE.into(),
            generate: GENERATE.into(),
        }
    }
}

/// Collapses a text to one line.
pub fn one_line(text: &str) -> String {
    text.replace(['\r', '\n'], " ")
}

/// Labels print as plain integers when integral (`0`, `1`), otherwise with
/// the shortest round-tripping decimal.
pub fn format_label(y: f64) -> String {
    if y.fract() == 0.0 && y.abs() < 1e15 {
        format!("{}", y as i64)
    } else {
        format!("{y}")
    }
}

impl PromptTemplates {
    /// `P_S ⋄ C_1 ⋄ ... ⋄ C_N`
    pub fn summarize_prompt<S: AsRef<str>>(&self, captions: &[S]) -> String {
        let mut parts = vec![one_line(&self.summarize)];
        parts.extend(captions.iter().map(|c| one_line(c.as_ref())));
        parts.join(JOINER)
    }

    /// `P_VD ⋄ C ⋄ P_AS ⋄ y`
    pub fn context_item(&self, description: &str, label: f64) -> String {
        [
            one_line(&self.video_description),
            one_line(description),
            one_line(&self.anomaly_score),
            format_label(label),
        ]
        .join(JOINER)
    }

    /// `P_A ⋄ item_1 ⋄ ... ⋄ item_NR ⋄ C ⋄ P_AS`
    pub fn annotate_prompt<S: AsRef<str>>(&self, context: &[(S, f64)], caption: &str) -> String {
        let mut parts = vec![one_line(&self.annotate)];
        parts.extend(
            context
                .iter()
                .map(|(d, y)| self.context_item(d.as_ref(), *y)),
        );
        parts.push(one_line(caption));
        parts.push(one_line(&self.anomaly_score));
        parts.join(JOINER)
    }

    /// `P_G ⋄ (P_EX ⋄ C_1) ⋄ ... ⋄ (P_EX ⋄ C_NR) ⋄ P_EX`
    pub fn generate_prompt<S: AsRef<str>>(&self, examples: &[S]) -> String {
        let ex = one_line(&self.example);
        let mut parts = vec![one_line(&self.generate)];
        for c in examples {
            parts.push(ex.clone());
            parts.push(one_line(c.as_ref()));
        }
        parts.push(ex);
        parts.join(JOINER)
    }
}
