//! The hierarchical two-branch network: cell-level message passing,
//! jumping knowledge, cell-to-tissue hand-off, tissue-level message
//! passing, sum readout and an MLP classifier.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::HactGraph;
use crate::nn::mlp::MlpCache;
use crate::nn::norm::{BnCache, BnStats};
use crate::nn::{softmax_cross_entropy, AdamState, GradMap, LstmParams, Mlp};
use crate::tensor::Tensor;

use super::aggregate::Adjacency;
use super::jk::{JkCache, JkMode, JkParams};
use super::layers::{GnnLayer, LayerCache, LayerKind};

/// Which part of the hierarchy the model consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Cell branch feeding tissue initialization, tissue branch, readout.
    Hact,
    /// Cell branch and readout only.
    CellOnly,
    /// Tissue branch over raw tissue features only.
    TissueOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HactNetConfig {
    pub layer_type: LayerKind,
    pub jk_mode: JkMode,
    pub model_kind: ModelKind,
    pub cg_layers: usize,
    pub tg_layers: usize,
    pub channels: usize,
    pub mlp_layers: usize,
    pub embed_dim: usize,
    pub classifier_layers: usize,
    pub classifier_channels: usize,
    pub classes: usize,
    pub cell_feat_dim: usize,
    pub tissue_feat_dim: usize,
    pub gin_epsilon: f64,
}

impl Default for HactNetConfig {
    fn default() -> Self {
        HactNetConfig {
            layer_type: LayerKind::Pna,
            jk_mode: JkMode::Lstm,
            model_kind: ModelKind::Hact,
            cg_layers: 3,
            tg_layers: 3,
            channels: 64,
            mlp_layers: 2,
            embed_dim: 128,
            classifier_layers: 2,
            classifier_channels: 128,
            classes: 2,
            cell_feat_dim: 2,
            tissue_feat_dim: 2,
            gin_epsilon: 0.0,
        }
    }
}

/// Per-dimension standardization statistics fitted on the training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn identity(dim: usize) -> Self {
        FeatureStats { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Fits mean and population std per dimension over all rows.
    pub fn fit(rows: &[&Vec<f64>]) -> Option<Self> {
        let dim = rows.first()?.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, &v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = vec![0.0; dim];
        for r in rows {
            for (s, (&v, m)) in std.iter_mut().zip(r.iter().zip(&mean)) {
                *s += (v - m) * (v - m);
            }
        }
        std.iter_mut().for_each(|s| *s = (*s / n).sqrt());
        Some(FeatureStats { mean, std })
    }

    pub fn standardize(&self, rows: &[Vec<f64>]) -> Result<Tensor> {
        let dim = self.mean.len();
        let mut out = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::shape(format!(
                    "feature row {i} has {} values, statistics expect {dim}",
                    r.len()
                )));
            }
            for (j, &v) in r.iter().enumerate() {
                out.push((v - self.mean[j]) / self.std[j].max(1e-8));
            }
        }
        Tensor::from_vec(&[rows.len(), dim], out)
    }
}

/// Standardized tensors plus topology views for one graph, ready for the
/// network.
#[derive(Clone, Debug)]
pub struct PreparedGraph {
    pub cell_x: Tensor,
    pub tissue_x: Tensor,
    pub cell_adj: Adjacency,
    pub tissue_adj: Adjacency,
    /// One-hot region per cell; `None` severs the hierarchy for that cell.
    pub assignment: Vec<Option<usize>>,
}

impl PreparedGraph {
    pub fn new(g: &HactGraph, cell_stats: &FeatureStats, tissue_stats: &FeatureStats) -> Result<Self> {
        Ok(PreparedGraph {
            cell_x: cell_stats.standardize(&g.cell.features)?,
            tissue_x: tissue_stats.standardize(&g.tissue.features)?,
            cell_adj: Adjacency::from_graph(&g.cell),
            tissue_adj: Adjacency::from_graph(&g.tissue),
            assignment: g.assignment.iter().map(|&r| Some(r)).collect(),
        })
    }

    pub fn raw(g: &HactGraph) -> Result<Self> {
        Self::new(
            g,
            &FeatureStats::identity(g.cell.feature_dim()),
            &FeatureStats::identity(g.tissue.feature_dim()),
        )
    }
}

/// Tissue-node initialization: raw tissue features concatenated with the
/// sum of the jumping-knowledge embeddings of the cells assigned to each
/// region (zero vector for empty regions).
pub fn tissue_init(
    h_tg_raw: &Tensor,
    cell_jk: &Tensor,
    assignment: &[Option<usize>],
) -> Result<Tensor> {
    let m = h_tg_raw.rows();
    if assignment.len() != cell_jk.rows() {
        return Err(Error::shape(format!(
            "{} assignment rows for {} cell embeddings",
            assignment.len(),
            cell_jk.rows()
        )));
    }
    let djk = cell_jk.cols();
    let mut sum = Tensor::zeros(&[m, djk]);
    for (v, a) in assignment.iter().enumerate() {
        if let Some(w) = a {
            if *w >= m {
                return Err(Error::invalid(format!(
                    "cell {v} assigned to region {w}, tissue graph has {m}"
                )));
            }
            for k in 0..djk {
                sum.set(*w, k, sum.at(*w, k) + cell_jk.at(v, k));
            }
        }
    }
    Tensor::concat_cols(&[h_tg_raw, &sum])
}

/// Splits the tissue-input gradient into the raw-feature part (returned
/// first) and the per-cell embedding gradient (scattered by assignment).
pub fn tissue_init_backward(
    d_input: &Tensor,
    d_tg_cols: usize,
    assignment: &[Option<usize>],
    cell_jk_cols: usize,
) -> (Tensor, Tensor) {
    let d_raw = d_input.slice_cols(0, d_tg_cols);
    let d_sum = d_input.slice_cols(d_tg_cols, d_input.cols());
    let mut d_cell = Tensor::zeros(&[assignment.len(), cell_jk_cols]);
    for (v, a) in assignment.iter().enumerate() {
        if let Some(w) = a {
            for k in 0..cell_jk_cols {
                d_cell.set(v, k, d_sum.at(*w, k));
            }
        }
    }
    (d_raw, d_cell)
}

/// Permutation-invariant graph readout: the column sum of the node
/// embeddings. Errors on an empty graph.
pub fn readout_sum(h: &Tensor) -> Result<Tensor> {
    if h.rows() == 0 {
        return Err(Error::invalid("readout over an empty graph"));
    }
    let mut out = Tensor::zeros(&[h.cols()]);
    for r in 0..h.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(h.row(r)) {
            *o += v;
        }
    }
    Ok(out)
}

/// One message-passing branch plus its jumping-knowledge head.
#[derive(Clone, Debug, PartialEq)]
pub struct GnnBranch {
    pub layers: Vec<GnnLayer>,
    pub jk: JkParams,
}

pub(crate) struct LayerBatch {
    graph_caches: Vec<LayerCache>,
    bn_cache: Option<BnCache>,
    pub(crate) stats: Option<BnStats>,
}

pub(crate) struct BranchCache {
    per_layer: Vec<LayerBatch>,
    jk_cache: JkCache,
    sizes: Vec<usize>,
}

impl GnnBranch {
    fn forward(
        &self,
        inputs: Vec<Tensor>,
        adjs: &[&Adjacency],
        delta: f64,
        mode: Mode,
    ) -> Result<(Tensor, BranchCache)> {
        let sizes: Vec<usize> = inputs.iter().map(|t| t.rows()).collect();
        let mut h = inputs;
        let mut per_layer = Vec::with_capacity(self.layers.len());
        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut gns = Vec::with_capacity(h.len());
            let mut caches = Vec::with_capacity(h.len());
            for (hg, adj) in h.iter().zip(adjs) {
                let (gn, c) = layer.pre_norm_forward(hg, adj, delta)?;
                gns.push(gn);
                caches.push(c);
            }
            let stacked = Tensor::vstack(&gns.iter().collect::<Vec<_>>())?;
            let (y, bn_cache, stats) = match mode {
                Mode::Train => {
                    let (y, c, s) = layer.bn.forward_train(&stacked)?;
                    (y, Some(c), Some(s))
                }
                Mode::Eval => (layer.bn.forward_eval(&stacked)?, None, None),
            };
            h = y.split_rows(&sizes)?;
            layer_outputs.push(y);
            per_layer.push(LayerBatch { graph_caches: caches, bn_cache, stats });
        }
        let (jk_out, jk_cache) = self.jk.forward(&layer_outputs)?;
        Ok((jk_out, BranchCache { per_layer, jk_cache, sizes }))
    }

    /// Backward from the jumping-knowledge output gradient. Parameter
    /// gradients accumulate into `grads` under `prefix`; returns per-graph
    /// gradients w.r.t. the branch inputs.
    fn backward(
        &self,
        cache: &BranchCache,
        adjs: &[&Adjacency],
        d_jk: &Tensor,
        prefix: &str,
        grads: &mut GradMap,
    ) -> Result<Vec<Tensor>> {
        let (d_per_layer, lstm_grads) = self.jk.backward(&cache.jk_cache, d_jk)?;
        if let Some(lg) = lstm_grads {
            for g in 0..crate::nn::lstm::GATES {
                grads.add(format!("{prefix}.jk.lstm.wx{g}"), lg.wx[g].clone());
                grads.add(format!("{prefix}.jk.lstm.wh{g}"), lg.wh[g].clone());
                grads.add(format!("{prefix}.jk.lstm.b{g}"), lg.b[g].clone());
            }
        }
        let mut d_next: Option<Vec<Tensor>> = None;
        for (t, layer) in self.layers.iter().enumerate().rev() {
            let mut d_out = d_per_layer[t].clone();
            if let Some(parts) = &d_next {
                d_out.add_assign(&Tensor::vstack(&parts.iter().collect::<Vec<_>>())?)?;
            }
            let batch = &cache.per_layer[t];
            let bn_cache = batch
                .bn_cache
                .as_ref()
                .ok_or_else(|| Error::invalid("backward requires a training-mode forward"))?;
            let (dx, dgamma, dbeta) = layer.bn.backward(bn_cache, &d_out)?;
            grads.add(format!("{prefix}.layer{t}.bn.gamma"), dgamma);
            grads.add(format!("{prefix}.layer{t}.bn.beta"), dbeta);
            let dx_parts = dx.split_rows(&cache.sizes)?;
            let mut d_prev = Vec::with_capacity(dx_parts.len());
            for ((part, gc), adj) in dx_parts.iter().zip(&batch.graph_caches).zip(adjs) {
                let (dh, mlp_grads) = layer.pre_norm_backward(gc, adj, part)?;
                for (l, (dw, db)) in mlp_grads.layers.into_iter().enumerate() {
                    grads.add(format!("{prefix}.layer{t}.mlp{l}.w"), dw);
                    grads.add(format!("{prefix}.layer{t}.mlp{l}.b"), db);
                }
                d_prev.push(dh);
            }
            d_next = Some(d_prev);
        }
        d_next.ok_or_else(|| Error::invalid("branch has no layers"))
    }
}

/// The full hierarchical network.
#[derive(Clone, Debug, PartialEq)]
pub struct HactNet {
    pub config: HactNetConfig,
    pub cg: GnnBranch,
    pub tg: GnnBranch,
    pub classifier: Mlp,
    pub delta_cg: f64,
    pub delta_tg: f64,
}

pub struct ForwardCache {
    cg: Option<BranchCache>,
    tg: Option<BranchCache>,
    cell_jk_cols: usize,
    readout_sizes: Vec<usize>,
    classifier_cache: MlpCache,
}

fn mlp_dims(input: usize, hidden: usize, layers: usize, output: usize) -> Vec<usize> {
    let mut dims = vec![input];
    for _ in 0..layers.saturating_sub(1) {
        dims.push(hidden);
    }
    dims.push(output);
    dims
}

impl HactNet {
    pub fn new(config: HactNetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.cg_layers == 0 && config.model_kind != ModelKind::TissueOnly {
            return Err(Error::invalid("cell branch needs at least one layer"));
        }
        if config.tg_layers == 0 && config.model_kind != ModelKind::CellOnly {
            return Err(Error::invalid("tissue branch needs at least one layer"));
        }
        let factor = |d: usize| match config.layer_type {
            LayerKind::Pna => 13 * d,
            LayerKind::Gin => d,
        };
        let ch = config.channels;

        let build_branch = |rng: &mut ChaCha8Rng,
                            layers: usize,
                            input_dim: usize,
                            lstm_hidden: usize|
         -> GnnBranch {
            let mut ls = Vec::with_capacity(layers);
            for t in 0..layers {
                let d_in = if t == 0 { input_dim } else { ch };
                let dims = mlp_dims(factor(d_in), ch, config.mlp_layers, ch);
                let mut layer = GnnLayer::new(config.layer_type, &dims, rng);
                layer.epsilon = config.gin_epsilon;
                ls.push(layer);
            }
            let jk = match config.jk_mode {
                JkMode::None => JkParams::none(),
                JkMode::Concat => JkParams::concat(),
                JkMode::Lstm => JkParams::lstm(LstmParams::new(ch, lstm_hidden, rng)),
            };
            GnnBranch { layers: ls, jk }
        };

        // The branch feeding the readout carries the graph-embedding width
        // in its LSTM head; the cell branch inside the full hierarchy keeps
        // the layer width.
        let (cg, cell_jk_dim) = if config.model_kind == ModelKind::TissueOnly {
            (GnnBranch { layers: Vec::new(), jk: JkParams::none() }, 0)
        } else {
            let hidden =
                if config.model_kind == ModelKind::CellOnly { config.embed_dim } else { ch };
            let b = build_branch(rng, config.cg_layers, config.cell_feat_dim, hidden);
            let dim = b.jk.out_dim(config.cg_layers, ch);
            (b, dim)
        };
        let (tg, tissue_jk_dim) = if config.model_kind == ModelKind::CellOnly {
            (GnnBranch { layers: Vec::new(), jk: JkParams::none() }, 0)
        } else {
            let input = match config.model_kind {
                ModelKind::Hact => config.tissue_feat_dim + cell_jk_dim,
                _ => config.tissue_feat_dim,
            };
            let b = build_branch(rng, config.tg_layers, input, config.embed_dim);
            let dim = b.jk.out_dim(config.tg_layers, ch);
            (b, dim)
        };
        let readout_dim =
            if config.model_kind == ModelKind::CellOnly { cell_jk_dim } else { tissue_jk_dim };
        let cls_dims = mlp_dims(
            readout_dim,
            config.classifier_channels,
            config.classifier_layers,
            config.classes,
        );
        let classifier = Mlp::new(&cls_dims, rng);
        Ok(HactNet { config, cg, tg, classifier, delta_cg: 1.0, delta_tg: 1.0 })
    }

    pub fn set_deltas(&mut self, delta_cg: f64, delta_tg: f64) {
        self.delta_cg = delta_cg;
        self.delta_tg = delta_tg;
    }

    /// Logits for a batch of prepared graphs.
    pub fn forward_batch(
        &self,
        graphs: &[&PreparedGraph],
        mode: Mode,
    ) -> Result<(Tensor, ForwardCache)> {
        if graphs.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let kind = self.config.model_kind;
        let cell_sizes: Vec<usize> = graphs.iter().map(|g| g.cell_x.rows()).collect();
        let tissue_sizes: Vec<usize> = graphs.iter().map(|g| g.tissue_x.rows()).collect();

        let mut cg_cache = None;
        let mut cell_jk_parts: Vec<Tensor> = Vec::new();
        let mut cell_jk_cols = 0;
        if kind != ModelKind::TissueOnly {
            let adjs: Vec<&Adjacency> = graphs.iter().map(|g| &g.cell_adj).collect();
            let inputs: Vec<Tensor> = graphs.iter().map(|g| g.cell_x.clone()).collect();
            let (jk, cache) = self.cg.forward(inputs, &adjs, self.delta_cg, mode)?;
            cell_jk_cols = jk.cols();
            cell_jk_parts = jk.split_rows(&cell_sizes)?;
            cg_cache = Some(cache);
        }

        let mut tg_cache = None;
        let readout_inputs: Vec<Tensor>;
        if kind == ModelKind::CellOnly {
            readout_inputs = cell_jk_parts;
        } else {
            let tissue_inputs: Vec<Tensor> = match kind {
                ModelKind::Hact => graphs
                    .iter()
                    .zip(&cell_jk_parts)
                    .map(|(g, jk)| tissue_init(&g.tissue_x, jk, &g.assignment))
                    .collect::<Result<_>>()?,
                _ => graphs.iter().map(|g| g.tissue_x.clone()).collect(),
            };
            let adjs: Vec<&Adjacency> = graphs.iter().map(|g| &g.tissue_adj).collect();
            let (jk, cache) = self.tg.forward(tissue_inputs, &adjs, self.delta_tg, mode)?;
            readout_inputs = jk.split_rows(&tissue_sizes)?;
            tg_cache = Some(cache);
        }

        let readout_sizes: Vec<usize> = readout_inputs.iter().map(|t| t.rows()).collect();
        let mut h_rows = Vec::with_capacity(readout_inputs.len());
        for t in &readout_inputs {
            h_rows.push(readout_sum(t)?.data().to_vec());
        }
        let d_ro = h_rows[0].len();
        let h_hact = Tensor::from_rows(&h_rows, d_ro)?;
        let (logits, classifier_cache) = self.classifier.forward(&h_hact)?;
        Ok((
            logits,
            ForwardCache { cg: cg_cache, tg: tg_cache, cell_jk_cols, readout_sizes, classifier_cache },
        ))
    }

    /// Convenience single-graph forward.
    pub fn forward(&self, graph: &PreparedGraph, mode: Mode) -> Result<Tensor> {
        let (logits, _) = self.forward_batch(&[graph], mode)?;
        Ok(Tensor::from_vec(&[self.config.classes], logits.row(0).to_vec())?)
    }

    /// Parameter gradients for a training-mode forward.
    pub fn backward(
        &self,
        graphs: &[&PreparedGraph],
        cache: &ForwardCache,
        d_logits: &Tensor,
    ) -> Result<GradMap> {
        let kind = self.config.model_kind;
        let mut grads = GradMap::new();
        let (d_h_hact, cls_grads) = self.classifier.backward(&cache.classifier_cache, d_logits)?;
        for (l, (dw, db)) in cls_grads.layers.into_iter().enumerate() {
            grads.add(format!("classifier.mlp{l}.w"), dw);
            grads.add(format!("classifier.mlp{l}.b"), db);
        }

        // Readout backward: broadcast each graph's row over its nodes.
        let d_ro = d_h_hact.cols();
        let total: usize = cache.readout_sizes.iter().sum();
        let mut d_readout = Tensor::zeros(&[total, d_ro]);
        let mut offset = 0;
        for (g, &rows) in cache.readout_sizes.iter().enumerate() {
            for r in 0..rows {
                for k in 0..d_ro {
                    d_readout.set(offset + r, k, d_h_hact.at(g, k));
                }
            }
            offset += rows;
        }

        let d_cell_jk_stacked: Option<Tensor> = if kind == ModelKind::CellOnly {
            Some(d_readout)
        } else {
            let tg_cache = cache.tg.as_ref().expect("tissue cache");
            let adjs: Vec<&Adjacency> = graphs.iter().map(|g| &g.tissue_adj).collect();
            let d_tissue_inputs =
                self.tg.backward(tg_cache, &adjs, &d_readout, "tg", &mut grads)?;
            match kind {
                ModelKind::Hact => {
                    let d_tg_cols = graphs[0].tissue_x.cols();
                    let mut parts = Vec::with_capacity(graphs.len());
                    for (g, d_in) in graphs.iter().zip(&d_tissue_inputs) {
                        let (_, d_cell) = tissue_init_backward(
                            d_in,
                            d_tg_cols,
                            &g.assignment,
                            cache.cell_jk_cols,
                        );
                        parts.push(d_cell);
                    }
                    Some(Tensor::vstack(&parts.iter().collect::<Vec<_>>())?)
                }
                _ => None,
            }
        };

        if kind != ModelKind::TissueOnly {
            let d_jk = d_cell_jk_stacked.expect("cell jk gradient");
            let cg_cache = cache.cg.as_ref().expect("cell cache");
            let adjs: Vec<&Adjacency> = graphs.iter().map(|g| &g.cell_adj).collect();
            self.cg.backward(cg_cache, &adjs, &d_jk, "cg", &mut grads)?;
        }
        Ok(grads)
    }

    /// Folds the batch statistics captured during a training forward into
    /// the running batch-norm estimates.
    pub fn apply_bn_stats(&mut self, cache: &ForwardCache) {
        if let Some(c) = &cache.cg {
            for (layer, batch) in self.cg.layers.iter_mut().zip(&c.per_layer) {
                if let Some(stats) = &batch.stats {
                    layer.bn.update_running(stats);
                }
            }
        }
        if let Some(c) = &cache.tg {
            for (layer, batch) in self.tg.layers.iter_mut().zip(&c.per_layer) {
                if let Some(stats) = &batch.stats {
                    layer.bn.update_running(stats);
                }
            }
        }
    }

    /// Canonical trainable-parameter traversal. `params_mut` must visit in
    /// the identical order (asserted in tests).
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (prefix, branch) in [("cg", &self.cg), ("tg", &self.tg)] {
            for (t, layer) in branch.layers.iter().enumerate() {
                for (l, lin) in layer.mlp.layers.iter().enumerate() {
                    out.push((format!("{prefix}.layer{t}.mlp{l}.w"), &lin.w));
                    out.push((format!("{prefix}.layer{t}.mlp{l}.b"), &lin.b));
                }
                out.push((format!("{prefix}.layer{t}.bn.gamma"), &layer.bn.gamma));
                out.push((format!("{prefix}.layer{t}.bn.beta"), &layer.bn.beta));
            }
            if let Some(lstm) = &branch.jk.lstm {
                for g in 0..crate::nn::lstm::GATES {
                    out.push((format!("{prefix}.jk.lstm.wx{g}"), &lstm.wx[g]));
                    out.push((format!("{prefix}.jk.lstm.wh{g}"), &lstm.wh[g]));
                    out.push((format!("{prefix}.jk.lstm.b{g}"), &lstm.b[g]));
                }
            }
        }
        for (l, lin) in self.classifier.layers.iter().enumerate() {
            out.push((format!("classifier.mlp{l}.w"), &lin.w));
            out.push((format!("classifier.mlp{l}.b"), &lin.b));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (prefix, branch) in [("cg", &mut self.cg), ("tg", &mut self.tg)] {
            for (t, layer) in branch.layers.iter_mut().enumerate() {
                for (l, lin) in layer.mlp.layers.iter_mut().enumerate() {
                    out.push((format!("{prefix}.layer{t}.mlp{l}.w"), &mut lin.w));
                    out.push((format!("{prefix}.layer{t}.mlp{l}.b"), &mut lin.b));
                }
                out.push((format!("{prefix}.layer{t}.bn.gamma"), &mut layer.bn.gamma));
                out.push((format!("{prefix}.layer{t}.bn.beta"), &mut layer.bn.beta));
            }
            if let Some(lstm) = &mut branch.jk.lstm {
                for (g, ((wx, wh), b)) in lstm
                    .wx
                    .iter_mut()
                    .zip(lstm.wh.iter_mut())
                    .zip(lstm.b.iter_mut())
                    .enumerate()
                {
                    out.push((format!("{prefix}.jk.lstm.wx{g}"), wx));
                    out.push((format!("{prefix}.jk.lstm.wh{g}"), wh));
                    out.push((format!("{prefix}.jk.lstm.b{g}"), b));
                }
            }
        }
        for (l, lin) in self.classifier.layers.iter_mut().enumerate() {
            out.push((format!("classifier.mlp{l}.w"), &mut lin.w));
            out.push((format!("classifier.mlp{l}.b"), &mut lin.b));
        }
        out
    }

    /// Batch-norm running statistics, keyed for checkpointing.
    pub fn buffers(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, branch) in [("cg", &self.cg), ("tg", &self.tg)] {
            for (t, layer) in branch.layers.iter().enumerate() {
                out.push((format!("{prefix}.layer{t}.bn.running_mean"), &layer.bn.running_mean));
                out.push((format!("{prefix}.layer{t}.bn.running_var"), &layer.bn.running_var));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (prefix, branch) in [("cg", &mut self.cg), ("tg", &mut self.tg)] {
            for (t, layer) in branch.layers.iter_mut().enumerate() {
                out.push((
                    format!("{prefix}.layer{t}.bn.running_mean"),
                    &mut layer.bn.running_mean,
                ));
                out.push((format!("{prefix}.layer{t}.bn.running_var"), &mut layer.bn.running_var));
            }
        }
        out
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for (_, t) in self.params() {
            v.extend_from_slice(t.data());
        }
        v
    }

    pub fn set_flat_params(&mut self, theta: &[f64]) {
        let mut off = 0;
        for (_, t) in self.params_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&theta[off..off + n]);
            off += n;
        }
        assert_eq!(off, theta.len(), "flat parameter length mismatch");
    }

    /// Gradients in canonical parameter order; zeros where a parameter
    /// received no gradient.
    pub fn flatten_grads(&self, grads: &GradMap) -> Vec<f64> {
        let mut v = Vec::new();
        for (name, t) in self.params() {
            match grads.get(&name) {
                Some(g) => v.extend_from_slice(g.data()),
                None => v.extend(std::iter::repeat(0.0).take(t.len())),
            }
        }
        v
    }
}

/// One optimization step over a batch: mean cross-entropy, exact
/// gradients, one Adam update, and a running-statistics refresh.
pub fn train_step(
    model: &mut HactNet,
    adam: &mut AdamState,
    graphs: &[&PreparedGraph],
    labels: &[usize],
) -> Result<f64> {
    if graphs.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} graphs with {} labels",
            graphs.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.config.classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {} classes",
            model.config.classes
        )));
    }
    let (logits, cache) = model.forward_batch(graphs, Mode::Train)?;
    let (loss, d_logits) = softmax_cross_entropy(&logits, labels)?;
    let grads = model.backward(graphs, &cache, &d_logits)?;
    model.apply_bn_stats(&cache);

    let owned: Vec<Tensor> = {
        let params = model.params();
        params
            .iter()
            .map(|(name, t)| match grads.get(name) {
                Some(g) => g.clone(),
                None => Tensor::zeros(t.shape()),
            })
            .collect()
    };
    let refs: Vec<&Tensor> = owned.iter().collect();
    let mut pm = model.params_mut();
    adam.step(&mut pm, &refs)?;
    Ok(loss)
}

/// Adam state sized for a model's canonical parameter list.
pub fn adam_for(model: &HactNet, lr: f64) -> AdamState {
    let shapes: Vec<Vec<usize>> = model.params().iter().map(|(_, t)| t.shape().to_vec()).collect();
    AdamState::new(lr, &shapes)
}
