//! Bone, velocity and acceleration streams derived from joint coordinates.
//!
//! All derivations are linear, keep the `C x T x V` shape, and zero-fill the
//! boundary frames that have no neighbour to difference against.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::HandGraph;
use crate::numeric::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Joint,
    Bone,
    Velocity,
    Acceleration,
}

impl StreamKind {
    pub const ALL: [StreamKind; 4] = [StreamKind::Joint, StreamKind::Bone, StreamKind::Velocity, StreamKind::Acceleration];

    pub fn name(self) -> &'static str {
        match self {
            StreamKind::Joint => "joint",
            StreamKind::Bone => "bone",
            StreamKind::Velocity => "velocity",
            StreamKind::Acceleration => "acceleration",
        }
    }
}

impl fmt::Display for StreamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StreamKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StreamKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stream `{s}`")))
    }
}

fn dims3<F: Real>(op: &'static str, x: &Tensor<F>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, t, v] => Ok((c, t, v)),
        ref s => Err(Error::shape(op, format!("expected C x T x V, got {s:?}"))),
    }
}

/// `bone[c, t, v] = joint[c, t, v] - joint[c, t, parent(v)]`; the wrist bone is zero.
pub fn derive_bone<F: Real>(joints: &Tensor<F>, graph: &HandGraph) -> Result<Tensor<F>> {
    let (c, t, v) = dims3("derive_bone", joints)?;
    if v != graph.vertex_count() {
        return Err(Error::shape("derive_bone", format!("{v} vertices, graph has {}", graph.vertex_count())));
    }
    let x = joints.data();
    let mut out = vec![F::zero(); x.len()];
    for row in 0..c * t {
        let base = row * v;
        for j in 0..v {
            out[base + j] = x[base + j] - x[base + graph.parent_of(j)];
        }
    }
    Tensor::new([c, t, v], out)
}

/// Forward difference over frames; the last frame is zero.
pub fn derive_velocity<F: Real>(joints: &Tensor<F>) -> Result<Tensor<F>> {
    let (c, t, v) = dims3("derive_velocity", joints)?;
    if t < 2 {
        return Err(Error::shape("derive_velocity", format!("need at least 2 frames, got {t}")));
    }
    let x = joints.data();
    let mut out = vec![F::zero(); x.len()];
    for ch in 0..c {
        for f in 0..t - 1 {
            let (cur, next) = ((ch * t + f) * v, (ch * t + f + 1) * v);
            for j in 0..v {
                out[cur + j] = x[next + j] - x[cur + j];
            }
        }
    }
    Tensor::new([c, t, v], out)
}

/// Central second difference; first and last frames are zero.
pub fn derive_acceleration<F: Real>(joints: &Tensor<F>) -> Result<Tensor<F>> {
    let (c, t, v) = dims3("derive_acceleration", joints)?;
    if t < 3 {
        return Err(Error::shape("derive_acceleration", format!("need at least 3 frames, got {t}")));
    }
    let x = joints.data();
    let two = F::one() + F::one();
    let mut out = vec![F::zero(); x.len()];
    for ch in 0..c {
        for f in 1..t - 1 {
            let (prev, cur, next) = ((ch * t + f - 1) * v, (ch * t + f) * v, (ch * t + f + 1) * v);
            for j in 0..v {
                out[cur + j] = x[next + j] - two * x[cur + j] + x[prev + j];
            }
        }
    }
    Tensor::new([c, t, v], out)
}

pub fn derive_stream<F: Real>(kind: StreamKind, joints: &Tensor<F>, graph: &HandGraph) -> Result<Tensor<F>> {
    match kind {
        StreamKind::Joint => {
            dims3("derive_stream", joints)?;
            Ok(joints.clone())
        }
        StreamKind::Bone => derive_bone(joints, graph),
        StreamKind::Velocity => derive_velocity(joints),
        StreamKind::Acceleration => derive_acceleration(joints),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_hand_graph, Handedness};
    use proptest::prelude::*;

    fn from_fn(c: usize, t: usize, v: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor<f64> {
        let mut d = Vec::with_capacity(c * t * v);
        for ch in 0..c {
            for fr in 0..t {
                for j in 0..v {
                    d.push(f(ch, fr, j));
                }
            }
        }
        Tensor::new([c, t, v], d).unwrap()
    }

    #[test]
    fn bone_is_offset_to_parent() {
        let g = build_hand_graph(Handedness::Right);
        let mut x = Tensor::<f64>::zeros([2, 1, 21]);
        for ch in 0..2 {
            x.data_mut()[ch * 21 + 4] = 0.5;
            x.data_mut()[ch * 21 + 3] = 0.4;
        }
        let b = derive_bone(&x, &g).unwrap();
        assert!((b.data()[4] - 0.1).abs() < 1e-12 && (b.data()[21 + 4] - 0.1).abs() < 1e-12);

        let x = from_fn(2, 5, 21, |c, t, v| (c + t * v) as f64 * 0.01);
        let b = derive_bone(&x, &g).unwrap();
        for ch in 0..2 {
            for t in 0..5 {
                assert_eq!(b.data()[(ch * 5 + t) * 21], 0.0);
            }
        }
        let same = from_fn(2, 3, 21, |_, _, _| 0.3);
        assert!(derive_bone(&same, &g).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(derive_bone(&Tensor::<f64>::zeros([2, 3, 20]), &g).is_err());
    }

    #[test]
    fn velocity_of_linear_motion() {
        let x = from_fn(2, 6, 21, |c, t, _| t as f64 * if c == 0 { 0.02 } else { -0.01 });
        let vel = derive_velocity(&x).unwrap();
        for t in 0..5 {
            assert!((vel.data()[t * 21] - 0.02).abs() < 1e-15);
            assert!((vel.data()[(6 + t) * 21 + 7] + 0.01).abs() < 1e-15);
        }
        assert!(vel.data()[5 * 21..6 * 21].iter().all(|&v| v == 0.0));
        let c = from_fn(2, 6, 21, |_, _, v| v as f64);
        assert!(derive_velocity(&c).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(derive_velocity(&Tensor::<f64>::zeros([2, 1, 21])).is_err());
    }

    #[test]
    fn acceleration_of_polynomials() {
        let lin = from_fn(1, 7, 1, |_, t, _| 3.0 * t as f64);
        assert!(derive_acceleration(&lin).unwrap().data().iter().all(|&v| v == 0.0));
        let quad = from_fn(1, 7, 1, |_, t, _| (t * t) as f64);
        let a = derive_acceleration(&quad).unwrap();
        assert_eq!(a.data(), &[0.0, 2.0, 2.0, 2.0, 2.0, 2.0, 0.0]);
        assert!(derive_acceleration(&Tensor::<f64>::zeros([1, 2, 1])).is_err());
    }

    fn arb_clip() -> impl Strategy<Value = Tensor<f64>> {
        prop::collection::vec(-1.0f64..1.0, 2 * 6 * 21).prop_map(|d| Tensor::new([2, 6, 21], d).unwrap())
    }

    proptest! {
        #[test]
        fn derivations_are_linear(x in arb_clip(), y in arb_clip(), a in -3i32..3, b in -3i32..3) {
            let g = build_hand_graph(Handedness::Right);
            let (a, b) = (a as f64, b as f64);
            let combo = Tensor::new([2, 6, 21], x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
            for kind in StreamKind::ALL {
                let lhs = derive_stream(kind, &combo, &g).unwrap();
                let dx = derive_stream(kind, &x, &g).unwrap();
                let dy = derive_stream(kind, &y, &g).unwrap();
                prop_assert_eq!(lhs.shape(), x.shape());
                for ((l, p), q) in lhs.data().iter().zip(dx.data()).zip(dy.data()) {
                    prop_assert!((l - (a * p + b * q)).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn acceleration_is_repeated_velocity_inside(x in arb_clip()) {
            let acc = derive_acceleration(&x).unwrap();
            let vv = derive_velocity(&derive_velocity(&x).unwrap()).unwrap();
            // a[t] = v2[t - 1] on interior frames
            for c in 0..2 {
                for t in 1..5 {
                    for j in 0..21 {
                        let lhs = acc.data()[(c * 6 + t) * 21 + j];
                        let rhs = vv.data()[(c * 6 + t - 1) * 21 + j];
                        prop_assert!((lhs - rhs).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
