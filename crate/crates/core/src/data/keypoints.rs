use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Handedness, VERTEX_COUNT};

/// Training label: self-reported positives, everyone else unlabeled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Unlabeled,
}

/// Ground truth, known only for synthetic data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrueLabel {
    Positive,
    Negative,
}

impl TrueLabel {
    pub fn is_positive(self) -> bool {
        self == TrueLabel::Positive
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Positive => "positive",
            Label::Unlabeled => "unlabeled",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(Label::Positive),
            "unlabeled" => Ok(Label::Unlabeled),
            other => Err(Error::Data(format!("unknown label `{other}`"))),
        }
    }
}

/// `(x, y, confidence)`, coordinates in normalized image space.
pub type Landmark = [f64; 3];

/// One recorded hand: per-frame landmarks, `None` where no hand was found.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSequence {
    pub participant_id: String,
    pub hand: Handedness,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_label: Option<TrueLabel>,
    pub fps: f64,
    pub frames: Vec<Option<Vec<Landmark>>>,
}

impl KeypointSequence {
    pub fn validate(&self) -> Result<()> {
        if self.participant_id.is_empty() {
            return Err(Error::Data("empty participant_id".into()));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::Data(format!("fps must be positive, got {}", self.fps)));
        }
        for (i, frame) in self.frames.iter().enumerate() {
            let Some(points) = frame else { continue };
            if points.len() != VERTEX_COUNT {
                return Err(Error::Data(format!("frame {i}: expected {VERTEX_COUNT} landmarks, got {}", points.len())));
            }
            for (j, p) in points.iter().enumerate() {
                if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(Error::Data(format!("frame {i}, landmark {j}: value {bad} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }

    pub fn valid_frame_count(&self) -> usize {
        self.frames.iter().filter(|f| f.is_some()).count()
    }
}

/// Parses JSON-lines text, one sequence per non-blank line. `origin` names
/// the source in error messages.
pub fn parse_keypoints(text: &str, origin: &str) -> Result<Vec<KeypointSequence>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { path: origin.into(), line: i + 1, msg };
        let seq: KeypointSequence = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        seq.validate().map_err(|e| err(e.to_string()))?;
        out.push(seq);
    }
    Ok(out)
}

pub fn parse_keypoint_file(path: impl AsRef<Path>) -> Result<Vec<KeypointSequence>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_keypoints(&text, &path.display().to_string())
}

pub fn to_jsonl(seqs: &[KeypointSequence]) -> Result<String> {
    let mut out = String::new();
    for s in seqs {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_keypoint_file(path: impl AsRef<Path>, seqs: &[KeypointSequence]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(to_jsonl(seqs)?.as_bytes())?;
    Ok(())
}
