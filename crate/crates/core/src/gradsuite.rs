//! Finite-difference checks of every differentiable primitive and of both
//! block modes, on small random shapes at 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::graph::{build_hand_graph, partition_adjacency, Handedness, PartitionStrategy, VERTEX_COUNT};
use crate::network::{block_forward, BlockSettings, BlockWeights, BnWeights, GraphMode, GraphWeights, ModelConfig, Network};
use crate::numeric::gradcheck::{check, project, CheckOptions, CheckReport};
use crate::numeric::{BnAxes, BnMode, OpKind, Tape, Tensor, Var};

/// Relative-error bound every case must meet.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct SuiteReport {
    pub seed: u64,
    pub tolerance: f64,
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.cases.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }
}

/// Uniform values in `[-1, 1)` kept at least `gap` away from zero, so ReLU
/// kinks sit far from the finite-difference stencil.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(gap..1.0);
            if rng.gen::<bool>() { v } else { -v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), 1.0, rng)
}

struct Runner {
    rng: ChaCha8Rng,
    opts: CheckOptions,
    cases: Vec<CaseResult>,
}

impl Runner {
    /// Checks `sum(build(inputs) * w)` for a random projection `w` of the
    /// output shape.
    fn case(
        &mut self,
        name: &str,
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    ) -> Result<()> {
        // probe once for the output shape
        let mut probe = Tape::new(self.opts.tape_seed);
        let vars: Vec<Var> = inputs.iter().map(|t| probe.param(t.clone())).collect();
        let out = build(&mut probe, &vars)?;
        let weights = rand_t(probe.value(out).shape(), &mut self.rng);
        let report = check(
            &inputs,
            |tape, vars| {
                let out = build(tape, vars)?;
                project(tape, out, &weights)
            },
            &self.opts,
            &mut self.rng,
        )?;
        self.push(name, report);
        Ok(())
    }

    fn push(&mut self, name: &str, r: CheckReport) {
        self.cases.push(CaseResult {
            name: name.to_string(),
            max_rel_err: r.max_rel_err,
            max_abs_err: r.max_abs_err,
            checked: r.checked,
            passed: r.max_rel_err < TOLERANCE,
        });
    }
}

/// Slot order: spatial maps, graph weights, first BN, temporal kernel,
/// second BN, then the residual map if present.
fn block_weights(v: &[Var], adaptive: bool, k: usize, residual: bool) -> BlockWeights<Var> {
    let mut it = v.iter().copied();
    let mut take = |n: usize| (0..n).map(|_| it.next().expect("enough inputs")).collect::<Vec<_>>();
    let spatial = take(k);
    let graph = if adaptive {
        GraphWeights::Adaptive { free: take(k), theta: take(k), phi: take(k) }
    } else {
        GraphWeights::Masked { mask: take(k) }
    };
    let bn = take(2);
    let temporal = take(1)[0];
    let bn2 = take(2);
    let res = residual.then(|| {
        let r = take(2);
        (r[0], r[1])
    });
    BlockWeights {
        spatial,
        graph,
        bn_spatial: BnWeights { gamma: bn[0], beta: bn[1] },
        temporal,
        bn_temporal: BnWeights { gamma: bn2[0], beta: bn2[1] },
        residual: res,
    }
}

/// Random block parameters in the slot order [`block_weights`] expects.
/// Masks and free adjacency get random values so their gradients are
/// exercised away from the initialization point.
fn block_inputs(rng: &mut ChaCha8Rng, adaptive: bool, k: usize, ci: usize, co: usize, kt: usize, ce: usize) -> Vec<Tensor<f64>> {
    let v = VERTEX_COUNT;
    let mut out = Vec::new();
    for _ in 0..k {
        out.push(rand_t(&[co, ci], rng));
    }
    if adaptive {
        for _ in 0..k {
            out.push(rand_t(&[v, v], rng).map(|x| 0.1 * x));
        }
        for _ in 0..2 * k {
            out.push(rand_t(&[ce, ci], rng));
        }
    } else {
        for _ in 0..k {
            out.push(rand_t(&[v, v], rng).map(|x| 1.0 + 0.5 * x));
        }
    }
    out.push(rand_t(&[co], rng).map(|x| 1.0 + 0.3 * x));
    out.push(rand_t(&[co], rng));
    out.push(rand_t(&[co, co, kt], rng));
    out.push(rand_t(&[co], rng).map(|x| 1.0 + 0.3 * x));
    out.push(rand_t(&[co], rng));
    if ci != co {
        out.push(rand_t(&[co, ci], rng));
        out.push(rand_t(&[co], rng));
    }
    out
}

fn block_case(r: &mut Runner, name: &str, mode: GraphMode) -> Result<()> {
    let (n, ci, co, t, kt, ce) = (2, 2, 3, 5, 3, 2);
    let adaptive = mode == GraphMode::Adaptive;
    let adjacency = partition_adjacency(&build_hand_graph(Handedness::Right), PartitionStrategy::Spatial);
    let k = adjacency.subset_count();
    let mut inputs = vec![rand_t(&[n, ci, t, VERTEX_COUNT], &mut r.rng)];
    inputs.extend(block_inputs(&mut r.rng, adaptive, k, ci, co, kt, ce));
    let settings = BlockSettings { mode, dropout: 0.5, bn_eps: 1e-5, train: true };
    r.case(name, inputs, move |tape, v| {
        let adj: Vec<Var> = (0..k).map(|i| tape.constant(adjacency.tensor(i))).collect();
        let w = block_weights(&v[1..], adaptive, k, true);
        Ok(block_forward(tape, v[0], &w, &adj, [None, None], settings)?.0)
    })
}

fn network_case(r: &mut Runner, adaptive: bool) -> Result<()> {
    let cfg = ModelConfig { frames: 5, channels: vec![3, 4], temporal_kernel: 3, embed_channels: 2, adaptive, ..Default::default() };
    let net: Network<f64> = Network::new(cfg.clone(), r.rng.gen())?;
    // perturb the initialization so masks, free adjacency and biases are generic
    let mut weights = net.params.weights.clone();
    for t in weights.slots_mut() {
        let noise = rand_t(t.shape(), &mut r.rng);
        for (a, b) in t.data_mut().iter_mut().zip(noise.data()) {
            *a += 0.2 * b;
        }
    }
    let mut inputs = vec![rand_t(&[2, cfg.input_channels, cfg.frames, cfg.vertices], &mut r.rng)];
    inputs.extend(weights.slots().into_iter().cloned());
    let name = if adaptive { "network_adaptive" } else { "network_baseline" };
    r.case(name, inputs, move |tape, v| network_on_vars(tape, &net, v[0], &v[1..]))
}

/// Training-mode forward pass of `net` with each learnable array taken from `vars`.
fn network_on_vars(tape: &mut Tape<f64>, net: &Network<f64>, x: Var, vars: &[Var]) -> Result<Var> {
    let mut it = vars.iter().copied();
    let bound = net.params.weights.map(|_, _| it.next().expect("one var per slot"));
    Ok(net.forward_with(tape, x, bound, true)?.logits)
}

/// Runs every case with inputs drawn from `seed`. `fault` doubles the
/// adjoint of one primitive (a negative control for the checker itself).
pub fn run_suite(seed: u64, fault: Option<OpKind>) -> Result<SuiteReport> {
    let opts = CheckOptions { tape_seed: seed, fault, ..CheckOptions::default() };
    let mut r = Runner { rng: ChaCha8Rng::seed_from_u64(seed), opts, cases: Vec::new() };

    let a = rand_t(&[3, 4], &mut r.rng);
    let b = rand_t(&[3, 4], &mut r.rng);
    r.case("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]))?;
    r.case("sub", vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]))?;
    r.case("mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]))?;
    r.case("scale", vec![a.clone()], |t, v| t.scale(v[0], -1.7))?;
    r.case("sum", vec![a.clone()], |t, v| t.sum(v[0]))?;
    let m = rand_t(&[4, 2], &mut r.rng);
    r.case("matmul", vec![a.clone(), m], |t, v| t.matmul(v[0], v[1]))?;

    let x = rand_t(&[2, 3, 4, 5], &mut r.rng);
    let w = rand_t(&[2, 3], &mut r.rng);
    let bias = rand_t(&[2], &mut r.rng);
    r.case("channel_mix", vec![x.clone(), w, bias], |t, v| t.channel_mix(v[0], v[1], Some(v[2])))?;

    let adj = rand_t(&[5, 5], &mut r.rng);
    r.case("graph_aggregate", vec![x.clone(), adj], |t, v| t.graph_aggregate(v[0], v[1]))?;
    let adj_n = rand_t(&[2, 5, 5], &mut r.rng);
    r.case("graph_aggregate_per_sample", vec![x.clone(), adj_n], |t, v| t.graph_aggregate(v[0], v[1]))?;

    let kw = rand_t(&[2, 3, 3], &mut r.rng);
    let kb = rand_t(&[2], &mut r.rng);
    r.case("temporal_conv", vec![x.clone(), kw, kb], |t, v| t.temporal_conv(v[0], v[1], Some(v[2])))?;

    let g = rand_t(&[3], &mut r.rng).map(|v| 1.0 + 0.5 * v);
    let be = rand_t(&[3], &mut r.rng);
    r.case("batch_norm_train", vec![x.clone(), g.clone(), be.clone()], |t, v| {
        Ok(t.batch_norm(v[0], v[1], v[2], BnAxes::Channel, BnMode::Train { eps: 1e-5 })?.0)
    })?;
    let gv = rand_t(&[3, 5], &mut r.rng).map(|v| 1.0 + 0.5 * v);
    let bv = rand_t(&[3, 5], &mut r.rng);
    r.case("batch_norm_train_per_vertex", vec![x.clone(), gv, bv], |t, v| {
        Ok(t.batch_norm(v[0], v[1], v[2], BnAxes::ChannelVertex, BnMode::Train { eps: 1e-5 })?.0)
    })?;
    let mean: Vec<f64> = (0..3).map(|_| r.rng.gen_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..3).map(|_| r.rng.gen_range(0.5..2.0)).collect();
    r.case("batch_norm_eval", vec![x.clone(), g, be], move |t, v| {
        Ok(t.batch_norm(v[0], v[1], v[2], BnAxes::Channel, BnMode::Eval { mean: &mean, var: &var, eps: 1e-5 })?.0)
    })?;

    let xr = away_from_zero(&[3, 4], 0.05, &mut r.rng);
    r.case("relu", vec![xr], |t, v| t.relu(v[0]))?;
    let xs = rand_t(&[2, 4, 3], &mut r.rng).map(|v| 3.0 * v);
    r.case("softmax", vec![xs], |t, v| t.softmax(v[0], 1))?;
    r.case("dropout", vec![x.clone()], |t, v| t.dropout(v[0], 0.3, true))?;
    r.case("global_avg_pool", vec![x.clone()], |t, v| t.global_avg_pool(v[0]))?;

    let xa = rand_t(&[4, 3], &mut r.rng);
    let wa = rand_t(&[2, 3], &mut r.rng);
    let ba = rand_t(&[2], &mut r.rng);
    r.case("affine", vec![xa, wa, ba], |t, v| t.affine(v[0], v[1], v[2]))?;

    let th = rand_t(&[2, 3, 4, 5], &mut r.rng);
    let ph = rand_t(&[2, 3, 4, 5], &mut r.rng);
    r.case("vertex_similarity", vec![th, ph], |t, v| t.vertex_similarity(v[0], v[1], 0.25))?;

    let xq = rand_t(&[5], &mut r.rng);
    r.case("scalar_fn", vec![xq], |t, v| {
        let x = t.value(v[0]).clone();
        let value = x.data().iter().map(|a| a * a * a).sum();
        let grad = x.map(|a| 3.0 * a * a);
        t.scalar_fn(v[0], value, grad)
    })?;

    block_case(&mut r, "block_baseline", GraphMode::Baseline)?;
    block_case(&mut r, "block_adaptive", GraphMode::Adaptive)?;
    network_case(&mut r, false)?;
    network_case(&mut r, true)?;

    Ok(SuiteReport { seed, tolerance: TOLERANCE, cases: r.cases })
}
