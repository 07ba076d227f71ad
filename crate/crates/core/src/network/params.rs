use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::numeric::{Real, Tensor};

/// Learnable scale and shift of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnWeights<P> {
    pub gamma: P,
    pub beta: P,
}

/// Graph-side weights of a block: the vertex mask of the fixed-graph
/// convolution, or the free adjacency and embeddings of the adaptive one.
#[derive(Clone, Debug, PartialEq)]
pub enum GraphWeights<P> {
    /// `M_k`, one `V x V` mask per subset.
    Masked { mask: Vec<P> },
    /// `B_k` (`V x V`) plus the two `C_e x C_in` embeddings behind `C_k`.
    Adaptive { free: Vec<P>, theta: Vec<P>, phi: Vec<P> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<P> {
    /// `W_k`, one `C_out x C_in` channel map per subset.
    pub spatial: Vec<P>,
    pub graph: GraphWeights<P>,
    pub bn_spatial: BnWeights<P>,
    /// `C_out x C_out x K_t`.
    pub temporal: P,
    pub bn_temporal: BnWeights<P>,
    /// 1x1 map on the residual path when the channel count changes.
    pub residual: Option<(P, P)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetWeights<P> {
    pub input_bn: BnWeights<P>,
    pub blocks: Vec<BlockWeights<P>>,
    pub fc_w: P,
    pub fc_b: P,
}

impl<P> BnWeights<P> {
    fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> BnWeights<Q> {
        BnWeights { gamma: f(&format!("{prefix}.gamma"), &self.gamma), beta: f(&format!("{prefix}.beta"), &self.beta) }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

fn map_list<P, Q>(items: &[P], prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> Vec<Q> {
    items.iter().enumerate().map(|(k, p)| f(&format!("{prefix}.{k}"), p)).collect()
}

fn visit_list<P>(items: &mut [P], prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
    for (k, p) in items.iter_mut().enumerate() {
        f(&format!("{prefix}.{k}"), p);
    }
}

impl<P> BlockWeights<P> {
    fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> BlockWeights<Q> {
        let spatial = map_list(&self.spatial, &format!("{prefix}.spatial"), f);
        let graph = match &self.graph {
            GraphWeights::Masked { mask } => GraphWeights::Masked { mask: map_list(mask, &format!("{prefix}.mask"), f) },
            GraphWeights::Adaptive { free, theta, phi } => GraphWeights::Adaptive {
                free: map_list(free, &format!("{prefix}.free_adjacency"), f),
                theta: map_list(theta, &format!("{prefix}.theta"), f),
                phi: map_list(phi, &format!("{prefix}.phi"), f),
            },
        };
        BlockWeights {
            spatial,
            graph,
            bn_spatial: self.bn_spatial.map(&format!("{prefix}.bn_spatial"), f),
            temporal: f(&format!("{prefix}.temporal"), &self.temporal),
            bn_temporal: self.bn_temporal.map(&format!("{prefix}.bn_temporal"), f),
            residual: self
                .residual
                .as_ref()
                .map(|(w, b)| (f(&format!("{prefix}.residual.w"), w), f(&format!("{prefix}.residual.b"), b))),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        visit_list(&mut self.spatial, &format!("{prefix}.spatial"), f);
        match &mut self.graph {
            GraphWeights::Masked { mask } => visit_list(mask, &format!("{prefix}.mask"), f),
            GraphWeights::Adaptive { free, theta, phi } => {
                visit_list(free, &format!("{prefix}.free_adjacency"), f);
                visit_list(theta, &format!("{prefix}.theta"), f);
                visit_list(phi, &format!("{prefix}.phi"), f);
            }
        }
        self.bn_spatial.visit_mut(&format!("{prefix}.bn_spatial"), f);
        f(&format!("{prefix}.temporal"), &mut self.temporal);
        self.bn_temporal.visit_mut(&format!("{prefix}.bn_temporal"), f);
        if let Some((w, b)) = &mut self.residual {
            f(&format!("{prefix}.residual.w"), w);
            f(&format!("{prefix}.residual.b"), b);
        }
    }
}

impl<P> NetWeights<P> {
    /// Structure-preserving map; `f` sees every slot in a fixed order with
    /// its dotted name.
    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> NetWeights<Q> {
        let input_bn = self.input_bn.map("input_bn", &mut f);
        let blocks = self.blocks.iter().enumerate().map(|(i, b)| b.map(&format!("block{}", i + 1), &mut f)).collect();
        NetWeights { input_bn, blocks, fc_w: f("fc.w", &self.fc_w), fc_b: f("fc.b", &self.fc_b) }
    }

    pub fn try_map<Q: Clone, E>(&self, mut f: impl FnMut(&str, &P) -> Result<Q, E>) -> Result<NetWeights<Q>, E> {
        let mut err = None;
        let out = self.map(|name, p| match f(name, p) {
            Ok(q) => Some(q),
            Err(e) => {
                err.get_or_insert(e);
                None
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(out.map(|_, q| q.clone().expect("every slot mapped"))),
        }
    }

    pub fn visit(&self, mut f: impl FnMut(&str, &P)) {
        self.map(|name, p| f(name, p));
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut P)) {
        self.input_bn.visit_mut("input_bn", &mut f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("block{}", i + 1), &mut f);
        }
        f("fc.w", &mut self.fc_w);
        f("fc.b", &mut self.fc_b);
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(|name, _| out.push(name.to_string()));
        out
    }

    pub fn slots(&self) -> Vec<&P> {
        let mut out = vec![&self.input_bn.gamma, &self.input_bn.beta];
        for b in &self.blocks {
            out.extend(&b.spatial);
            match &b.graph {
                GraphWeights::Masked { mask } => out.extend(mask),
                GraphWeights::Adaptive { free, theta, phi } => out.extend(free.iter().chain(theta).chain(phi)),
            }
            out.extend([&b.bn_spatial.gamma, &b.bn_spatial.beta, &b.temporal, &b.bn_temporal.gamma, &b.bn_temporal.beta]);
            if let Some((w, bias)) = &b.residual {
                out.extend([w, bias]);
            }
        }
        out.extend([&self.fc_w, &self.fc_b]);
        out
    }

    pub fn slots_mut(&mut self) -> Vec<&mut P> {
        let mut out = vec![&mut self.input_bn.gamma, &mut self.input_bn.beta];
        for b in &mut self.blocks {
            out.extend(&mut b.spatial);
            match &mut b.graph {
                GraphWeights::Masked { mask } => out.extend(mask),
                GraphWeights::Adaptive { free, theta, phi } => {
                    out.extend(free.iter_mut().chain(theta.iter_mut()).chain(phi.iter_mut()))
                }
            }
            out.extend([
                &mut b.bn_spatial.gamma,
                &mut b.bn_spatial.beta,
                &mut b.temporal,
                &mut b.bn_temporal.gamma,
                &mut b.bn_temporal.beta,
            ]);
            if let Some((w, bias)) = &mut b.residual {
                out.extend([w, bias]);
            }
        }
        out.extend([&mut self.fc_w, &mut self.fc_b]);
        out
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<F> {
    pub mean: Tensor<F>,
    pub var: Tensor<F>,
}

/// All learnable arrays plus the running batch-norm statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<F: Real = f64> {
    pub weights: NetWeights<Tensor<F>>,
    /// Input layer first, then (spatial, temporal) per block.
    pub running: Vec<RunningStats<F>>,
    /// Batches folded into the running statistics so far.
    pub updates: u64,
}

/// Shape of every slot for a configuration, used to validate loaded arrays.
pub fn expected_shapes(cfg: &ModelConfig) -> NetWeights<Vec<usize>> {
    let (v, k_v, ce, kt) = (cfg.vertices, cfg.strategy.subset_count(), cfg.embed_channels, cfg.temporal_kernel);
    let mut blocks = Vec::new();
    let mut cin = cfg.input_channels;
    for &cout in &cfg.channels {
        let graph = if cfg.adaptive {
            GraphWeights::Adaptive {
                free: vec![vec![v, v]; k_v],
                theta: vec![vec![ce, cin]; k_v],
                phi: vec![vec![ce, cin]; k_v],
            }
        } else {
            GraphWeights::Masked { mask: vec![vec![v, v]; k_v] }
        };
        blocks.push(BlockWeights {
            spatial: vec![vec![cout, cin]; k_v],
            graph,
            bn_spatial: BnWeights { gamma: vec![cout], beta: vec![cout] },
            temporal: vec![cout, cout, kt],
            bn_temporal: BnWeights { gamma: vec![cout], beta: vec![cout] },
            residual: (cin != cout).then(|| (vec![cout, cin], vec![cout])),
        });
        cin = cout;
    }
    NetWeights {
        input_bn: BnWeights { gamma: vec![cfg.input_channels, v], beta: vec![cfg.input_channels, v] },
        blocks,
        fc_w: vec![1, cin],
        fc_b: vec![1],
    }
}

/// Running-statistics lengths, in layer order.
pub fn expected_running(cfg: &ModelConfig) -> Vec<usize> {
    let mut out = vec![cfg.input_channels * cfg.vertices];
    for &c in &cfg.channels {
        out.extend([c, c]);
    }
    out
}

/// Deterministic initialization: fan-in scaled uniform weights, unit masks,
/// zero free adjacency, zero biases, identity batch norms.
pub fn init_params<F: Real>(cfg: &ModelConfig, seed: u64) -> NetworkParams<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = expected_shapes(cfg);
    let weights = shapes.map(|name, shape| {
        let leaf = name.rsplit('.').find(|s| s.parse::<usize>().is_err()).unwrap_or(name);
        match leaf {
            "gamma" | "mask" => Tensor::ones(shape.clone()),
            "beta" | "b" | "free_adjacency" => Tensor::zeros(shape.clone()),
            _ => {
                let fan_in: usize = shape[1..].iter().product();
                Tensor::uniform(shape.clone(), 1.0 / (fan_in as f64).sqrt(), &mut rng)
            }
        }
    });
    let running = expected_running(cfg)
        .into_iter()
        .map(|n| RunningStats { mean: Tensor::zeros([n]), var: Tensor::ones([n]) })
        .collect();
    NetworkParams { weights, running, updates: 0 }
}
