//! The 21-landmark hand skeleton and its partitioned, normalized adjacency.
//!
//! Vertex layout: 0 is the wrist; fingers follow in blocks of four from base
//! to tip (thumb 1-4, index 5-8, middle 9-12, ring 13-16, pinky 17-20), so
//! vertex `4k` is the tip of finger `k`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Real, Tensor};

pub const VERTEX_COUNT: usize = 21;
pub const WRIST: usize = 0;
pub const THUMB_TIP: usize = 4;
pub const INDEX_TIP: usize = 8;
const FINGERS: usize = 5;

pub type Edge = (usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Handedness {
    Right,
    Left,
}

/// Hand skeleton with natural (bone) edges and three augmented edge families.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HandGraph {
    pub handedness: Handedness,
    pub natural_edges: Vec<Edge>,
    /// Fingertip to the base of the neighbouring finger.
    pub tip_to_next_base: Vec<Edge>,
    /// Fingertip to the middle joint of the same finger.
    pub tip_to_middle: Vec<Edge>,
    /// Thumb tip to index fingertip.
    pub thumb_index_tips: Vec<Edge>,
    pub parent_of: Vec<usize>,
}

fn finger_base(f: usize) -> usize {
    4 * f + 1
}

fn finger_tip(f: usize) -> usize {
    4 * f + 4
}

/// Builds the hand graph. Both hands share one topology; left hands are
/// mirrored in coordinate space instead.
pub fn build_hand_graph(handedness: Handedness) -> HandGraph {
    let mut natural_edges = Vec::with_capacity(VERTEX_COUNT - 1);
    let mut parent_of = vec![WRIST; VERTEX_COUNT];
    for f in 0..FINGERS {
        let base = finger_base(f);
        natural_edges.push((WRIST, base));
        for j in base..base + 3 {
            natural_edges.push((j, j + 1));
            parent_of[j + 1] = j;
        }
    }
    let tip_to_next_base = (0..FINGERS - 1).map(|f| (finger_tip(f), finger_base(f + 1))).collect();
    let tip_to_middle = (0..FINGERS).map(|f| (finger_tip(f), finger_tip(f) - 2)).collect();
    HandGraph {
        handedness,
        natural_edges,
        tip_to_next_base,
        tip_to_middle,
        thumb_index_tips: vec![(THUMB_TIP, INDEX_TIP)],
        parent_of,
    }
}

impl HandGraph {
    pub fn vertex_count(&self) -> usize {
        self.parent_of.len()
    }

    pub fn parent_of(&self, v: usize) -> usize {
        self.parent_of[v]
    }

    pub fn augmented_edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.tip_to_next_base
            .iter()
            .chain(&self.tip_to_middle)
            .chain(&self.thumb_index_tips)
            .copied()
    }

    pub fn all_edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.natural_edges.iter().copied().chain(self.augmented_edges())
    }

    /// Hop distance from the wrist along natural edges.
    pub fn hop_distance(&self) -> Vec<usize> {
        (0..self.vertex_count())
            .map(|mut v| {
                let mut d = 0;
                while v != WRIST {
                    v = self.parent_of[v];
                    d += 1;
                }
                d
            })
            .collect()
    }

    /// Checks the structural invariants: 21 vertices, a 20-edge natural tree
    /// rooted at the wrist, and pairwise disjoint edge families.
    pub fn validate(&self) -> Result<()> {
        let n = self.vertex_count();
        if n != VERTEX_COUNT || self.natural_edges.len() != n - 1 {
            return Err(Error::Data(format!("hand graph has {n} vertices and {} natural edges", self.natural_edges.len())));
        }
        for (v, &p) in self.parent_of.iter().enumerate() {
            let tree_edge = v == WRIST || self.natural_edges.iter().any(|&(a, b)| (a, b) == (p, v) || (a, b) == (v, p));
            if (v == WRIST) != (p == v) || !tree_edge {
                return Err(Error::Data(format!("vertex {v} has inconsistent parent {p}")));
            }
        }
        let key = |(a, b): Edge| (a.min(b), a.max(b));
        let mut seen = BTreeSet::new();
        for e in self.all_edges() {
            if e.0 == e.1 || e.0 >= n || e.1 >= n || !seen.insert(key(e)) {
                return Err(Error::Data(format!("edge {e:?} is invalid or repeated")));
            }
        }
        Ok(())
    }
}

/// How neighbours are grouped into the `K_v` adjacency subsets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionStrategy {
    /// One subset holding self-loops and all neighbours.
    Uniform,
    /// Self-loops, then neighbours.
    Distance,
    /// Self-loops, centripetal neighbours (closer to the wrist), centrifugal
    /// neighbours (farther or equally far).
    #[default]
    Spatial,
}

impl PartitionStrategy {
    pub fn subset_count(self) -> usize {
        match self {
            PartitionStrategy::Uniform => 1,
            PartitionStrategy::Distance => 2,
            PartitionStrategy::Spatial => 3,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            PartitionStrategy::Uniform => "uniform",
            PartitionStrategy::Distance => "distance",
            PartitionStrategy::Spatial => "spatial",
        }
    }
}

impl FromStr for PartitionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(PartitionStrategy::Uniform),
            "distance" => Ok(PartitionStrategy::Distance),
            "spatial" => Ok(PartitionStrategy::Spatial),
            other => Err(Error::Config(format!("unknown partition strategy `{other}`"))),
        }
    }
}

impl fmt::Display for PartitionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// `K_v` row-normalized adjacency matrices `A_k = Λ_k^{-1} Â_k`, each `V x V`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PartitionedAdjacency {
    pub strategy: PartitionStrategy,
    pub vertices: usize,
    /// Row-major `V x V` matrices.
    pub matrices: Vec<Vec<f64>>,
}

impl PartitionedAdjacency {
    pub fn subset_count(&self) -> usize {
        self.matrices.len()
    }

    pub fn entry(&self, k: usize, row: usize, col: usize) -> f64 {
        self.matrices[k][row * self.vertices + col]
    }

    pub fn tensor<F: Real>(&self, k: usize) -> Tensor<F> {
        Tensor::new(
            [self.vertices, self.vertices],
            self.matrices[k].iter().map(|&v| F::from_f64_lossy(v)).collect(),
        )
        .expect("square adjacency")
    }

    /// Directed (row, col) pairs with a nonzero entry in any subset.
    pub fn support(&self) -> BTreeSet<Edge> {
        let v = self.vertices;
        self.matrices
            .iter()
            .flat_map(|m| m.iter().enumerate().filter(|(_, &x)| x != 0.0).map(move |(i, _)| (i / v, i % v)))
            .collect()
    }
}

pub fn partition_adjacency(graph: &HandGraph, strategy: PartitionStrategy) -> PartitionedAdjacency {
    let v = graph.vertex_count();
    let hop = graph.hop_distance();
    let k_v = strategy.subset_count();
    let mut binary = vec![vec![0.0f64; v * v]; k_v];
    for i in 0..v {
        binary[0][i * v + i] = 1.0;
    }
    for (a, b) in graph.all_edges() {
        for (i, j) in [(a, b), (b, a)] {
            let k = match strategy {
                PartitionStrategy::Uniform => 0,
                PartitionStrategy::Distance => 1,
                PartitionStrategy::Spatial if hop[j] < hop[i] => 1,
                PartitionStrategy::Spatial => 2,
            };
            binary[k][i * v + j] = 1.0;
        }
    }
    for m in &mut binary {
        for row in m.chunks_mut(v) {
            let deg: f64 = row.iter().sum();
            if deg > 0.0 {
                row.iter_mut().for_each(|x| *x /= deg);
            }
        }
    }
    PartitionedAdjacency { strategy, vertices: v, matrices: binary }
}

/// JSON view of a graph and its partition, for debugging.
#[derive(Serialize)]
pub struct GraphDump<'a> {
    pub vertices: usize,
    pub handedness: Handedness,
    pub natural_edges: &'a [Edge],
    pub augmented_edges: AugmentedDump<'a>,
    pub parent_of: &'a [usize],
    pub partition: &'a PartitionedAdjacency,
}

#[derive(Serialize)]
pub struct AugmentedDump<'a> {
    pub type1: &'a [Edge],
    pub type2: &'a [Edge],
    pub type3: &'a [Edge],
}

pub fn graph_dump<'a>(graph: &'a HandGraph, adjacency: &'a PartitionedAdjacency) -> GraphDump<'a> {
    GraphDump {
        vertices: graph.vertex_count(),
        handedness: graph.handedness,
        natural_edges: &graph.natural_edges,
        augmented_edges: AugmentedDump {
            type1: &graph.tip_to_next_base,
            type2: &graph.tip_to_middle,
            type3: &graph.thumb_index_tips,
        },
        parent_of: &graph.parent_of,
        partition: adjacency,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_match_the_edge_rules() {
        let g = build_hand_graph(Handedness::Right);
        assert_eq!(g.vertex_count(), 21);
        assert_eq!(g.natural_edges.len(), 20);
        assert_eq!(g.tip_to_next_base, vec![(4, 5), (8, 9), (12, 13), (16, 17)]);
        assert_eq!(g.tip_to_middle, vec![(4, 2), (8, 6), (12, 10), (16, 14), (20, 18)]);
        assert_eq!(g.thumb_index_tips, vec![(4, 8)]);
        assert_eq!(g.augmented_edges().count(), 10);
        g.validate().unwrap();
    }

    #[test]
    fn parents_point_toward_the_wrist() {
        let g = build_hand_graph(Handedness::Right);
        assert_eq!(g.parent_of(8), 7);
        assert_eq!(g.parent_of(5), 0);
        assert_eq!(g.parent_of(0), 0);
        assert_eq!(g.hop_distance()[20], 4);
    }

    #[test]
    fn left_and_right_share_topology() {
        let (r, l) = (build_hand_graph(Handedness::Right), build_hand_graph(Handedness::Left));
        assert_eq!(r.all_edges().collect::<Vec<_>>(), l.all_edges().collect::<Vec<_>>());
        assert_eq!(partition_adjacency(&r, PartitionStrategy::Spatial), partition_adjacency(&l, PartitionStrategy::Spatial));
    }

    #[test]
    fn spatial_partition_layout() {
        let g = build_hand_graph(Handedness::Right);
        let a = partition_adjacency(&g, PartitionStrategy::Spatial);
        assert_eq!(a.subset_count(), 3);
        for i in 0..21 {
            for j in 0..21 {
                assert_eq!(a.entry(0, i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
        // wrist -> index base is centrifugal, the reverse centripetal
        assert!(a.entry(2, 0, 5) > 0.0 && a.entry(1, 0, 5) == 0.0);
        assert!(a.entry(1, 5, 0) > 0.0 && a.entry(2, 5, 0) == 0.0);
        // equidistant tips land in the centrifugal subset both ways
        assert!(a.entry(2, 4, 8) > 0.0 && a.entry(2, 8, 4) > 0.0);
        let nnz: usize = a.matrices.iter().map(|m| m.iter().filter(|&&x| x != 0.0).count()).sum();
        assert_eq!(nnz, 81);
    }

    #[test]
    fn rows_are_stochastic_or_empty() {
        let g = build_hand_graph(Handedness::Right);
        for s in [PartitionStrategy::Uniform, PartitionStrategy::Distance, PartitionStrategy::Spatial] {
            let a = partition_adjacency(&g, s);
            for m in &a.matrices {
                for row in m.chunks(21) {
                    let sum: f64 = row.iter().sum();
                    assert!(sum.abs() < 1e-12 || (sum - 1.0).abs() < 1e-12, "{s}: row sum {sum}");
                    assert!(row.iter().all(|&x| x >= 0.0));
                }
            }
        }
    }

    #[test]
    fn support_is_edges_plus_self_loops() {
        let g = build_hand_graph(Handedness::Right);
        let mut want: BTreeSet<Edge> = (0..21).map(|i| (i, i)).collect();
        for (a, b) in g.all_edges() {
            want.insert((a, b));
            want.insert((b, a));
        }
        for s in [PartitionStrategy::Uniform, PartitionStrategy::Distance, PartitionStrategy::Spatial] {
            assert_eq!(partition_adjacency(&g, s).support(), want);
        }
    }

    #[test]
    fn unknown_strategy_tag_is_rejected() {
        assert!("spatial".parse::<PartitionStrategy>().is_ok());
        assert!(matches!("hexagonal".parse::<PartitionStrategy>(), Err(Error::Config(_))));
    }
}
