use super::clips::Clip;
use super::keypoints::Label;
use crate::error::{Error, Result};
use crate::graph::{build_hand_graph, Handedness};
use crate::numeric::{Real, Tensor};
use crate::streams::{derive_stream, StreamKind};

/// Clips of one feature stream stacked into `N x C x T x V`, with the
/// training label, ground truth and owner of every row.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSet {
    pub stream: StreamKind,
    pub x: Tensor<f64>,
    pub labeled_positive: Vec<bool>,
    pub truth: Vec<bool>,
    pub participants: Vec<String>,
}

impl ClipSet {
    pub fn from_clips(clips: &[Clip], stream: StreamKind) -> Result<Self> {
        let first = clips.first().ok_or_else(|| Error::Data("no clips to stack".into()))?;
        let shape = first.data.shape().to_vec();
        // clips are already mirrored to the right-hand layout
        let graph = build_hand_graph(Handedness::Right);
        let mut data = Vec::with_capacity(clips.len() * first.data.len());
        for c in clips {
            if c.data.shape() != shape.as_slice() {
                return Err(Error::shape("clip_set", format!("{:?} vs {shape:?}", c.data.shape())));
            }
            data.extend_from_slice(derive_stream(stream, &c.data, &graph)?.data());
        }
        let mut full = vec![clips.len()];
        full.extend(shape);
        Ok(ClipSet {
            stream,
            x: Tensor::new(full, data)?,
            labeled_positive: clips.iter().map(|c| c.label == Label::Positive).collect(),
            truth: clips.iter().map(Clip::truth).collect(),
            participants: clips.iter().map(|c| c.participant_id.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    /// Elements per clip.
    pub fn row_len(&self) -> usize {
        self.x.shape()[1..].iter().product()
    }

    /// Rows `idx` as a batch in precision `F`.
    pub fn gather<F: Real>(&self, idx: &[usize]) -> Tensor<F> {
        let per = self.row_len();
        let src = self.x.data();
        let mut out = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            out.extend(src[i * per..(i + 1) * per].iter().map(|&v| F::from_f64_lossy(v)));
        }
        let mut shape = self.x.shape().to_vec();
        shape[0] = idx.len();
        Tensor::new(shape, out).expect("gathered rows keep the clip layout")
    }

    /// The whole set in precision `F`.
    pub fn all<F: Real>(&self) -> Tensor<F> {
        self.x.cast()
    }
}
