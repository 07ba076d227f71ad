use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::keypoints::{KeypointSequence, Label, TrueLabel};
use crate::error::{Error, Result};
use crate::graph::{Handedness, VERTEX_COUNT};
use crate::numeric::Tensor;

/// Frames whose mean landmark confidence falls below this are dropped.
pub const MIN_MEAN_CONFIDENCE: f64 = 0.5;

/// Frames per clip.
pub const CLIP_FRAMES: usize = 80;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CleanReport {
    pub frames_in: usize,
    pub invalid_dropped: usize,
    pub low_confidence_dropped: usize,
    /// Nothing survived cleaning.
    pub empty: bool,
}

/// Drops missing frames and frames with mean confidence below
/// [`MIN_MEAN_CONFIDENCE`], keeping the order of the rest.
pub fn clean_sequence(seq: &KeypointSequence) -> (KeypointSequence, CleanReport) {
    let mut report = CleanReport { frames_in: seq.frames.len(), ..CleanReport::default() };
    let mut frames = Vec::with_capacity(seq.frames.len());
    for frame in &seq.frames {
        match frame {
            None => report.invalid_dropped += 1,
            Some(points) => {
                let conf = points.iter().map(|p| p[2]).sum::<f64>() / points.len().max(1) as f64;
                if conf < MIN_MEAN_CONFIDENCE {
                    report.low_confidence_dropped += 1;
                } else {
                    frames.push(frame.clone());
                }
            }
        }
    }
    report.empty = frames.is_empty();
    (KeypointSequence { frames, ..seq.clone() }, report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augmentation {
    Id,
    H,
    V,
    Hv,
}

impl Augmentation {
    pub const ALL: [Augmentation; 4] = [Augmentation::Id, Augmentation::H, Augmentation::V, Augmentation::Hv];

    pub fn flips(self) -> (bool, bool) {
        match self {
            Augmentation::Id => (false, false),
            Augmentation::H => (true, false),
            Augmentation::V => (false, true),
            Augmentation::Hv => (true, true),
        }
    }
}

impl fmt::Display for Augmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Augmentation::Id => "id",
            Augmentation::H => "h",
            Augmentation::V => "v",
            Augmentation::Hv => "hv",
        })
    }
}

/// An 80-frame window as a `2 x T x V` tensor (x then y channel).
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub data: Tensor<f64>,
    pub participant_id: String,
    pub hand: Handedness,
    pub clip_index: usize,
    /// First source frame of the window, after cleaning.
    pub start_frame: usize,
    pub augmentation: Augmentation,
    pub label: Label,
    pub true_label: Option<TrueLabel>,
}

impl Clip {
    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    /// Ground truth when known, otherwise the training label.
    pub fn truth(&self) -> bool {
        match self.true_label {
            Some(t) => t.is_positive(),
            None => self.label == Label::Positive,
        }
    }
}

/// Non-overlapping windows of `frames` frames over the valid frames of a
/// cleaned sequence; the tail shorter than a window is discarded. Left hands
/// are mirrored (`x -> 1 - x`) so every clip shares the right-hand layout.
pub fn segment_clips(seq: &KeypointSequence, frames: usize) -> Vec<Clip> {
    let valid: Vec<&Vec<[f64; 3]>> = seq.frames.iter().flatten().collect();
    if frames == 0 {
        return Vec::new();
    }
    let mirror = seq.hand == Handedness::Left;
    let v = VERTEX_COUNT;
    valid
        .chunks_exact(frames)
        .enumerate()
        .map(|(k, window)| {
            let mut data = vec![0.0; 2 * frames * v];
            for (t, points) in window.iter().enumerate() {
                for (j, p) in points.iter().enumerate() {
                    data[t * v + j] = if mirror { 1.0 - p[0] } else { p[0] };
                    data[(frames + t) * v + j] = p[1];
                }
            }
            Clip {
                data: Tensor::new([2, frames, v], data).expect("clip layout"),
                participant_id: seq.participant_id.clone(),
                hand: seq.hand,
                clip_index: k,
                start_frame: k * frames,
                augmentation: Augmentation::Id,
                label: seq.label,
                true_label: seq.true_label,
            }
        })
        .collect()
}

/// Applies one flip to a clip's coordinates.
pub fn flip_clip(clip: &Clip, aug: Augmentation) -> Clip {
    let (h, v) = aug.flips();
    let half = clip.data.len() / 2;
    let mut data = clip.data.clone();
    for (i, x) in data.data_mut().iter_mut().enumerate() {
        if (i < half && h) || (i >= half && v) {
            *x = 1.0 - *x;
        }
    }
    Clip { data, augmentation: aug, ..clip.clone() }
}

/// The identity, horizontal, vertical and combined flips of a clip.
pub fn augment_clip(clip: &Clip) -> [Clip; 4] {
    Augmentation::ALL.map(|a| flip_clip(clip, a))
}

pub fn augment_all(clips: &[Clip]) -> Vec<Clip> {
    clips.iter().flat_map(augment_clip).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub sequences: usize,
    pub frames_in: usize,
    pub frames_dropped: usize,
    pub clips_emitted: usize,
    /// Sequences yielding no clip, with the number of frames left after cleaning.
    pub sequences_skipped: Vec<(String, usize)>,
}

/// Cleans and segments every sequence.
pub fn prepare_clips(seqs: &[KeypointSequence], frames: usize) -> (Vec<Clip>, DatasetReport) {
    let mut report = DatasetReport { sequences: seqs.len(), ..DatasetReport::default() };
    let mut clips = Vec::new();
    for seq in seqs {
        let (clean, r) = clean_sequence(seq);
        report.frames_in += r.frames_in;
        report.frames_dropped += r.invalid_dropped + r.low_confidence_dropped;
        let got = segment_clips(&clean, frames);
        if got.is_empty() {
            report.sequences_skipped.push((seq.participant_id.clone(), clean.frames.len()));
        }
        clips.extend(got);
    }
    report.clips_emitted = clips.len();
    (clips, report)
}

/// Splits sequences into (train, validation) by participant. Participants
/// are stratified by whether any of their sequences is labeled positive, and
/// the validation share of each stratum follows largest-remainder rounding.
pub fn split_by_participant(
    seqs: &[KeypointSequence],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<KeypointSequence>, Vec<KeypointSequence>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("validation fraction {val_fraction} outside [0, 1)")));
    }
    let mut positive: BTreeMap<&str, bool> = BTreeMap::new();
    for s in seqs {
        *positive.entry(&s.participant_id).or_default() |= s.label == Label::Positive;
    }
    let n = positive.len();
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 participants to split, got {n}")));
    }
    let target = ((val_fraction * n as f64).round() as usize).clamp(usize::from(val_fraction > 0.0), n - 1);

    let strata: Vec<Vec<&str>> = [true, false]
        .iter()
        .map(|&p| positive.iter().filter(|(_, &v)| v == p).map(|(k, _)| *k).collect())
        .collect();
    let exact: Vec<f64> = strata.iter().map(|s| s.len() as f64 * target as f64 / n as f64).collect();
    let mut take: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..strata.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let short = target - take.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        take[i] += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val_ids = BTreeSet::new();
    for (stratum, k) in strata.into_iter().zip(take) {
        let mut ids = stratum;
        ids.shuffle(&mut rng);
        val_ids.extend(ids.into_iter().take(k));
    }
    let (val, train): (Vec<_>, Vec<_>) = seqs.iter().cloned().partition(|s| val_ids.contains(s.participant_id.as_str()));
    Ok((train, val))
}

/// Stacks clips into an `N x 2 x T x V` batch, in the given order.
pub fn stack(clips: &[&Clip]) -> Result<Tensor<f64>> {
    let first = clips.first().ok_or_else(|| Error::Data("cannot stack an empty clip list".into()))?;
    let shape = first.data.shape().to_vec();
    let mut data = Vec::with_capacity(clips.len() * first.data.len());
    for c in clips {
        if c.data.shape() != shape.as_slice() {
            return Err(Error::shape("stack", format!("{:?} vs {shape:?}", c.data.shape())));
        }
        data.extend_from_slice(c.data.data());
    }
    let mut full = vec![clips.len()];
    full.extend(shape);
    Tensor::new(full, data)
}
