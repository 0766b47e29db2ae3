//! Neighborhood aggregation: the multi-aggregator/degree-scaler combination
//! and its normalization constant.

use crate::error::{Error, Result};
use crate::graph::EntityGraph;
use crate::tensor::Tensor;

/// Aggregators (mean, std, max, min) times scalers (identity, amplify,
/// attenuate).
pub const PNA_BLOCKS: usize = 12;
/// Epsilon under the square root of the population variance; keeps the
/// std aggregator differentiable at zero variance.
pub const STD_EPS: f64 = 1e-8;

/// Degree-scaler normalization constant: the training-corpus mean of
/// `ln(degree + 1)`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DeltaStats {
    pub delta: f64,
    pub sample_count: usize,
}

/// Computes the scaler normalization over every node of the given graphs
/// (call once per entity level). Errors when every node is isolated, since
/// the attenuation scaler would divide by zero downstream.
pub fn compute_delta<'a>(graphs: impl IntoIterator<Item = &'a EntityGraph>) -> Result<DeltaStats> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for g in graphs {
        for d in g.degrees() {
            sum += ((d + 1) as f64).ln();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("delta needs at least one node"));
    }
    let delta = sum / count as f64;
    if delta == 0.0 {
        return Err(Error::invalid(
            "degenerate delta: every training node is isolated (delta = ln 1 = 0)",
        ));
    }
    Ok(DeltaStats { delta, sample_count: count })
}

/// Neighbor lists plus degrees, the topology view used by the layers.
#[derive(Clone, Debug)]
pub struct Adjacency {
    pub neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn from_edges(node_count: usize, edges: &[(usize, usize)]) -> Self {
        let mut neighbors = vec![Vec::new(); node_count];
        for &(u, v) in edges {
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        Adjacency { neighbors }
    }

    pub fn from_graph(g: &EntityGraph) -> Self {
        Self::from_edges(g.node_count, &g.edges)
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn degree(&self, v: usize) -> usize {
        self.neighbors[v].len()
    }
}

/// Cache for [`pna_aggregate_backward`].
pub struct PnaAggCache {
    mean: Tensor,
    std: Tensor,
    /// Neighbor node id attaining the max/min per (node, feature); usize::MAX
    /// for isolated nodes.
    argmax: Vec<usize>,
    argmin: Vec<usize>,
    /// `(amplify, attenuate)` per node; (0, 0) for isolated nodes.
    scalers: Vec<(f64, f64)>,
}

/// Multi-aggregator neighborhood statistics scaled by degree.
///
/// Per node: neighbor mean, population std (epsilon under the root),
/// elementwise max and min, each multiplied by the scalers
/// `[1, ln(d+1)/delta, delta/ln(d+1)]` and concatenated aggregator-major
/// into `N x 12d`. Isolated nodes contribute all-zero blocks.
pub fn pna_aggregate(
    h: &Tensor,
    adj: &Adjacency,
    delta: f64,
) -> Result<(Tensor, PnaAggCache)> {
    if !(delta > 0.0) {
        return Err(Error::invalid(format!("delta must be positive, got {delta}")));
    }
    let (n, d) = (h.rows(), h.cols());
    if adj.node_count() != n {
        return Err(Error::shape(format!(
            "adjacency over {} nodes against {} feature rows",
            adj.node_count(),
            n
        )));
    }
    let mut out = Tensor::zeros(&[n, PNA_BLOCKS * d]);
    let mut mean = Tensor::zeros(&[n, d]);
    let mut std = Tensor::zeros(&[n, d]);
    let mut argmax = vec![usize::MAX; n * d];
    let mut argmin = vec![usize::MAX; n * d];
    let mut scalers = vec![(0.0, 0.0); n];

    for v in 0..n {
        let nbrs = &adj.neighbors[v];
        if nbrs.is_empty() {
            continue;
        }
        let deg = nbrs.len() as f64;
        let log_deg = (deg + 1.0).ln();
        let (amp, att) = (log_deg / delta, delta / log_deg);
        scalers[v] = (amp, att);
        for k in 0..d {
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            let mut max_v = f64::NEG_INFINITY;
            let mut min_v = f64::INFINITY;
            let (mut arg_max, mut arg_min) = (usize::MAX, usize::MAX);
            for &u in nbrs {
                let x = h.at(u, k);
                sum += x;
                sum_sq += x * x;
                if x > max_v {
                    max_v = x;
                    arg_max = u;
                }
                if x < min_v {
                    min_v = x;
                    arg_min = u;
                }
            }
            let mu = sum / deg;
            let var = (sum_sq / deg - mu * mu).max(0.0);
            let sigma = (var + STD_EPS).sqrt();
            mean.set(v, k, mu);
            std.set(v, k, sigma);
            argmax[v * d + k] = arg_max;
            argmin[v * d + k] = arg_min;
            // Aggregator-major block layout.
            let aggs = [mu, sigma, max_v, min_v];
            let scales = [1.0, amp, att];
            for (a, &av) in aggs.iter().enumerate() {
                for (s, &sv) in scales.iter().enumerate() {
                    out.set(v, (a * 3 + s) * d + k, av * sv);
                }
            }
        }
    }
    Ok((out, PnaAggCache { mean, std, argmax, argmin, scalers }))
}

/// Gradient of [`pna_aggregate`] w.r.t. the node features.
pub fn pna_aggregate_backward(
    cache: &PnaAggCache,
    h: &Tensor,
    adj: &Adjacency,
    d_out: &Tensor,
) -> Result<Tensor> {
    let (n, d) = (h.rows(), h.cols());
    if d_out.shape() != [n, PNA_BLOCKS * d] {
        return Err(Error::shape(format!(
            "aggregate upstream gradient {:?}, expected [{n}, {}]",
            d_out.shape(),
            PNA_BLOCKS * d
        )));
    }
    let mut dh = Tensor::zeros(&[n, d]);
    for v in 0..n {
        let nbrs = &adj.neighbors[v];
        if nbrs.is_empty() {
            continue;
        }
        let deg = nbrs.len() as f64;
        let (amp, att) = cache.scalers[v];
        let scales = [1.0, amp, att];
        for k in 0..d {
            // Collapse the three scaled copies of each aggregator.
            let mut g = [0.0; 4];
            for (a, gv) in g.iter_mut().enumerate() {
                for (s, &sv) in scales.iter().enumerate() {
                    *gv += sv * d_out.at(v, (a * 3 + s) * d + k);
                }
            }
            let mu = cache.mean.at(v, k);
            let sigma = cache.std.at(v, k);
            for &u in nbrs {
                let x = h.at(u, k);
                let mut acc = g[0] / deg; // mean
                acc += g[1] * (x - mu) / (deg * sigma); // std
                dh.set(u, k, dh.at(u, k) + acc);
            }
            let am = cache.argmax[v * d + k];
            if am != usize::MAX {
                dh.set(am, k, dh.at(am, k) + g[2]);
            }
            let an = cache.argmin[v * d + k];
            if an != usize::MAX {
                dh.set(an, k, dh.at(an, k) + g[3]);
            }
        }
    }
    Ok(dh)
}
