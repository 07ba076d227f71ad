//! Spatio-temporal graph convolution blocks and the single-logit classifier.
//!
//! A block is `spatial GCN -> BN -> ReLU -> dropout -> temporal conv -> BN`,
//! plus a residual path, followed by a ReLU. The spatial GCN aggregates
//! over `A_k ⊙ M_k` (fixed graph) or `A_k + B_k + C_k` (adaptive graph) and
//! mixes channels with one `W_k` per adjacency subset.

mod params;

use serde::{Deserialize, Serialize};

pub use params::{
    expected_running, expected_shapes, init_params, BlockWeights, BnWeights, GraphWeights, NetWeights, NetworkParams,
    RunningStats,
};

use crate::error::{Error, Result};
use crate::graph::{build_hand_graph, partition_adjacency, Handedness, PartitionStrategy, PartitionedAdjacency};
use crate::numeric::{BatchStats, BnAxes, BnMode, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub frames: usize,
    pub vertices: usize,
    pub strategy: PartitionStrategy,
    pub temporal_kernel: usize,
    /// Output channels of each block.
    pub channels: Vec<usize>,
    pub dropout: f64,
    pub adaptive: bool,
    /// Embedding width behind the data-dependent adjacency.
    pub embed_channels: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_channels: 2,
            frames: 80,
            vertices: 21,
            strategy: PartitionStrategy::Spatial,
            temporal_kernel: 9,
            channels: vec![16, 32],
            dropout: 0.5,
            adaptive: true,
            embed_channels: 4,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn mode(&self) -> GraphMode {
        if self.adaptive {
            GraphMode::Adaptive
        } else {
            GraphMode::Baseline
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_channels == 0 || self.frames == 0 || self.embed_channels == 0 {
            return bad("input channels, frames and embedding channels must be positive".into());
        }
        if self.vertices != crate::graph::VERTEX_COUNT {
            return bad(format!("the hand graph has 21 vertices, config says {}", self.vertices));
        }
        if self.channels.is_empty() {
            return bad("channel plan is empty".into());
        }
        let mut prev = self.input_channels;
        for &c in &self.channels {
            if c <= prev {
                return bad(format!("channel plan must strictly increase, got {} -> {:?}", self.input_channels, self.channels));
            }
            prev = c;
        }
        if self.temporal_kernel % 2 == 0 {
            return bad(format!("temporal kernel must be odd, got {}", self.temporal_kernel));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("batch-norm epsilon must be positive and momentum in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphMode {
    Baseline,
    Adaptive,
}

impl std::str::FromStr for GraphMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(GraphMode::Baseline),
            "adaptive" => Ok(GraphMode::Adaptive),
            other => Err(Error::Config(format!("unknown graph mode `{other}`"))),
        }
    }
}

/// Per-block settings shared by every call of [`block_forward`].
#[derive(Clone, Copy, Debug)]
pub struct BlockSettings {
    pub mode: GraphMode,
    pub dropout: f64,
    pub bn_eps: f64,
    pub train: bool,
}

/// Running statistics handed to a batch norm in eval mode.
pub type Running<'a, F> = Option<&'a RunningStats<F>>;

fn bn_mode<'a, F: Real>(running: Running<'a, F>, eps: f64, train: bool) -> Result<BnMode<'a, F>> {
    let eps = F::from_f64_lossy(eps);
    if train {
        return Ok(BnMode::Train { eps });
    }
    let r = running.ok_or_else(|| Error::Config("eval-mode batch norm needs running statistics".into()))?;
    Ok(BnMode::Eval { mean: r.mean.data(), var: r.var.data(), eps })
}

/// Data-dependent adjacency `C_k`: softmax over the last axis of the
/// vertex similarity of two 1x1 embeddings, scaled by the embedding size.
pub fn compute_ck<F: Real>(tape: &mut Tape<F>, x: Var, theta: Var, phi: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("compute_ck", format!("expected N x C x T x V, got {shape:?}")));
    }
    let te = tape.channel_mix(x, theta, None)?;
    let pe = tape.channel_mix(x, phi, None)?;
    let ce = tape.value(te).shape()[1];
    let scale = F::one() / F::from_usize(ce * shape[2]).unwrap();
    let sim = tape.vertex_similarity(te, pe, scale)?;
    tape.softmax(sim, 2)
}

/// Graph aggregation plus per-subset channel maps, summed over subsets.
pub fn spatial_gcn<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    w: &BlockWeights<Var>,
    adjacency: &[Var],
    mode: GraphMode,
) -> Result<Var> {
    if adjacency.len() != w.spatial.len() {
        return Err(Error::shape("spatial_gcn", format!("{} adjacency subsets, {} channel maps", adjacency.len(), w.spatial.len())));
    }
    let mut acc: Option<Var> = None;
    for (k, (&a_k, &w_k)) in adjacency.iter().zip(&w.spatial).enumerate() {
        let agg = match (&w.graph, mode) {
            (GraphWeights::Masked { mask }, GraphMode::Baseline) => {
                let adj = tape.mul(a_k, mask[k])?;
                tape.graph_aggregate(x, adj)?
            }
            (GraphWeights::Adaptive { free, theta, phi }, GraphMode::Adaptive) => {
                let adj = tape.add(a_k, free[k])?;
                let fixed = tape.graph_aggregate(x, adj)?;
                let c_k = compute_ck(tape, x, theta[k], phi[k])?;
                let learned = tape.graph_aggregate(x, c_k)?;
                tape.add(fixed, learned)?
            }
            _ => return Err(Error::Config(format!("block weights do not match {mode:?} graph mode"))),
        };
        let y = tape.channel_mix(agg, w_k, None)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, y)?,
            None => y,
        });
    }
    Ok(acc.expect("at least one adjacency subset"))
}

/// One spatio-temporal block. Returns the output and, in training mode,
/// the batch statistics of its two batch norms.
pub fn block_forward<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    w: &BlockWeights<Var>,
    adjacency: &[Var],
    running: [Running<'_, F>; 2],
    settings: BlockSettings,
) -> Result<(Var, Vec<BatchStats<F>>)> {
    let s = spatial_gcn(tape, x, w, adjacency, settings.mode)?;
    let mode = bn_mode(running[0], settings.bn_eps, settings.train)?;
    let (s, st1) = tape.batch_norm(s, w.bn_spatial.gamma, w.bn_spatial.beta, BnAxes::Channel, mode)?;
    let s = tape.relu(s)?;
    let s = tape.dropout(s, settings.dropout, settings.train)?;
    let t = tape.temporal_conv(s, w.temporal, None)?;
    let mode = bn_mode(running[1], settings.bn_eps, settings.train)?;
    let (t, st2) = tape.batch_norm(t, w.bn_temporal.gamma, w.bn_temporal.beta, BnAxes::Channel, mode)?;
    let res = match w.residual {
        Some((rw, rb)) => tape.channel_mix(x, rw, Some(rb))?,
        None => x,
    };
    let sum = tape.add(t, res)?;
    let out = tape.relu(sum)?;
    Ok((out, st1.into_iter().chain(st2).collect()))
}

/// Output of [`Network::forward`].
pub struct Forward<F> {
    /// `N x 1` logits.
    pub logits: Var,
    /// Tape leaves holding each learnable array.
    pub bound: NetWeights<Var>,
    /// Batch statistics per batch-norm layer (training mode only).
    pub batch_stats: Vec<BatchStats<F>>,
}

/// Classifier for one feature stream: input BN, the blocks, global average
/// pooling and an affine map to one logit per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<F: Real = f64> {
    pub config: ModelConfig,
    pub adjacency: PartitionedAdjacency,
    pub params: NetworkParams<F>,
}

impl<F: Real> Network<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed);
        Self::with_params(config, params)
    }

    pub fn with_params(config: ModelConfig, params: NetworkParams<F>) -> Result<Self> {
        config.validate()?;
        let graph = build_hand_graph(Handedness::Right);
        let adjacency = partition_adjacency(&graph, config.strategy);
        let shapes = expected_shapes(&config);
        let mut mismatch = None;
        let mut slots = params.weights.slots().into_iter();
        shapes.visit(|name, shape| match slots.next() {
            Some(t) if t.shape() == shape.as_slice() => {}
            got => {
                mismatch.get_or_insert(format!("{name}: expected {shape:?}, got {:?}", got.map(|t| t.shape().to_vec())));
            }
        });
        if slots.next().is_some() {
            mismatch.get_or_insert("more parameter arrays than the configuration defines".into());
        }
        let running = expected_running(&config);
        if params.running.len() != running.len()
            || params.running.iter().zip(&running).any(|(r, &n)| r.mean.len() != n || r.var.len() != n)
        {
            mismatch.get_or_insert("batch-norm running statistics do not match the configuration".into());
        }
        match mismatch {
            Some(m) => Err(Error::Checkpoint(format!("shape validation failed: {m}"))),
            None => Ok(Network { config, adjacency, params }),
        }
    }

    /// Records the forward pass of a `N x C x T x V` batch on `tape`.
    pub fn forward(&self, tape: &mut Tape<F>, input: Var, train: bool) -> Result<Forward<F>> {
        let cfg = &self.config;
        let shape = tape.value(input).shape().to_vec();
        if shape.len() != 4 || shape[1] != cfg.input_channels || shape[2] != cfg.frames || shape[3] != cfg.vertices {
            return Err(Error::shape(
                "network_forward",
                format!("input {shape:?}, expected [N, {}, {}, {}]", cfg.input_channels, cfg.frames, cfg.vertices),
            ));
        }
        let bound = self.params.weights.map(|_, t| tape.param(t.clone()));
        self.forward_with(tape, input, bound, train)
    }

    /// Like [`Network::forward`], with the learnable arrays already on the
    /// tape as `bound` (the stored parameters only supply running stats).
    pub fn forward_with(&self, tape: &mut Tape<F>, input: Var, bound: NetWeights<Var>, train: bool) -> Result<Forward<F>> {
        let cfg = &self.config;
        let adjacency: Vec<Var> =
            (0..self.adjacency.subset_count()).map(|k| tape.constant(self.adjacency.tensor(k))).collect();
        let running = &self.params.running;
        let mut stats = Vec::new();

        let mode = bn_mode(running.first(), cfg.bn_eps, train)?;
        let (mut x, st) =
            tape.batch_norm(input, bound.input_bn.gamma, bound.input_bn.beta, BnAxes::ChannelVertex, mode)?;
        stats.extend(st);
        let settings = BlockSettings { mode: cfg.mode(), dropout: cfg.dropout, bn_eps: cfg.bn_eps, train };
        for (i, bw) in bound.blocks.iter().enumerate() {
            let r = [running.get(1 + 2 * i), running.get(2 + 2 * i)];
            let (y, st) = block_forward(tape, x, bw, &adjacency, r, settings)?;
            stats.extend(st);
            x = y;
        }
        let pooled = tape.global_avg_pool(x)?;
        let logits = tape.affine(pooled, bound.fc_w, bound.fc_b)?;
        Ok(Forward { logits, bound, batch_stats: stats })
    }

    /// Folds training-mode batch statistics into the running estimates.
    /// Variance uses the unbiased estimate. The weight of the new batch is
    /// `max(momentum, 1 / updates)`, a plain average until the exponential
    /// window takes over, so the initial unit variance does not linger.
    pub fn update_running(&mut self, stats: &[BatchStats<F>]) -> Result<()> {
        if stats.len() != self.params.running.len() {
            return Err(Error::shape("update_running", format!("{} batch stats for {} layers", stats.len(), self.params.running.len())));
        }
        self.params.updates += 1;
        let m = F::from_f64_lossy(self.config.bn_momentum.max(1.0 / self.params.updates as f64));
        let one = F::one();
        for (r, s) in self.params.running.iter_mut().zip(stats) {
            let n = F::from_usize(s.count).unwrap();
            let unbias = if s.count > 1 { n / (n - one) } else { one };
            for (rm, &bm) in r.mean.data_mut().iter_mut().zip(&s.mean) {
                *rm = (one - m) * *rm + m * bm;
            }
            for (rv, &bv) in r.var.data_mut().iter_mut().zip(&s.var) {
                *rv = (one - m) * *rv + m * bv * unbias;
            }
        }
        Ok(())
    }

    /// Eval-mode logits for a `N x C x T x V` batch, processed in chunks.
    pub fn predict(&self, batch: &Tensor<F>, chunk: usize) -> Result<Vec<f64>> {
        let shape = batch.shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("predict", format!("expected N x C x T x V, got {shape:?}")));
        }
        let per = shape[1..].iter().product::<usize>();
        let mut out = Vec::with_capacity(shape[0]);
        for part in batch.data().chunks(per * chunk.max(1)) {
            let n = part.len() / per;
            let mut tape = Tape::new(0);
            let x = tape.constant(Tensor::new([n, shape[1], shape[2], shape[3]], part.to_vec())?);
            let fwd = self.forward(&mut tape, x, false)?;
            out.extend(tape.value(fwd.logits).to_f64_vec());
        }
        Ok(out)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.weights.slots().iter().map(|t| t.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> Network<G> {
        Network {
            config: self.config.clone(),
            adjacency: self.adjacency.clone(),
            params: NetworkParams {
                weights: self.params.weights.map(|_, t| t.cast()),
                running: self
                    .params
                    .running
                    .iter()
                    .map(|r| RunningStats { mean: r.mean.cast(), var: r.var.cast() })
                    .collect(),
                updates: self.params.updates,
            },
        }
    }
}
