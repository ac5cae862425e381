use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Input channel of a video.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModalityId {
    #[serde(rename = "T")]
    Text,
    #[serde(rename = "R")]
    Rgb,
    #[serde(rename = "F")]
    Flow,
    #[serde(rename = "A")]
    Audio,
}

impl ModalityId {
    pub const ALL: [ModalityId; 4] = [Self::Text, Self::Rgb, Self::Flow, Self::Audio];

    pub fn letter(self) -> char {
        match self {
            Self::Text => 'T',
            Self::Rgb => 'R',
            Self::Flow => 'F',
            Self::Audio => 'A',
        }
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for ModalityId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "T" | "TEXT" => Ok(Self::Text),
            "R" | "RGB" => Ok(Self::Rgb),
            "F" | "FLOW" => Ok(Self::Flow),
            "A" | "AUDIO" => Ok(Self::Audio),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

/// Non-empty set of modalities, kept in canonical `T, R, F, A` order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModalitySet(Vec<ModalityId>);

impl ModalitySet {
    pub fn new(items: impl IntoIterator<Item = ModalityId>) -> Result<Self> {
        let mut v: Vec<ModalityId> = items.into_iter().collect();
        v.sort();
        v.dedup();
        if v.is_empty() {
            return Err(Error::Config("modality set is empty".into()));
        }
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[ModalityId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, m: ModalityId) -> bool {
        self.0.contains(&m)
    }

    pub fn iter(&self) -> impl Iterator<Item = ModalityId> + '_ {
        self.0.iter().copied()
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let letters: Vec<String> = self.0.iter().map(|m| m.to_string()).collect();
        f.write_str(&letters.join(","))
    }
}

impl FromStr for ModalitySet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let items = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        Self::new(items)
    }
}
