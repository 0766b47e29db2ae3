//! Training loop with best-validation selection, resumable checkpoints and
//! evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::gnn::{
    adam_for, compute_delta, train_step, DeltaStats, FeatureStats, HactNet, HactNetConfig, JkMode,
    LayerKind, Mode, ModelKind, PreparedGraph,
};
use crate::graph::HactGraph;
use crate::metrics::{weighted_f1, Confusion, Metrics};
use crate::nn::AdamState;
use crate::tensor::Tensor;

/// Training hyperparameters; the defaults are the reference configuration
/// (3 message-passing layers, 2-layer 64-channel update MLPs, 128-dim
/// graph embedding, 2-layer 128-channel classifier, Adam at 1e-3 with
/// batch size 16).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub layer_type: LayerKind,
    pub jk_mode: JkMode,
    pub model_kind: ModelKind,
    pub layers: usize,
    pub mlp_layers: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub classifier_layers: usize,
    pub classifier_channels: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            layer_type: LayerKind::Pna,
            jk_mode: JkMode::Lstm,
            model_kind: ModelKind::Hact,
            layers: 3,
            mlp_layers: 2,
            channels: 64,
            embed_dim: 128,
            classifier_layers: 2,
            classifier_channels: 128,
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    fn arch(&self, cell_feat_dim: usize, tissue_feat_dim: usize, classes: usize) -> HactNetConfig {
        HactNetConfig {
            layer_type: self.layer_type,
            jk_mode: self.jk_mode,
            model_kind: self.model_kind,
            cg_layers: self.layers,
            tg_layers: self.layers,
            channels: self.channels,
            mlp_layers: self.mlp_layers,
            embed_dim: self.embed_dim,
            classifier_layers: self.classifier_layers,
            classifier_channels: self.classifier_channels,
            classes,
            cell_feat_dim,
            tissue_feat_dim,
            gin_epsilon: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_weighted_f1: f64,
}

/// Serializable training snapshot: the current (resume) state plus the
/// best-validation parameters selected so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub arch: HactNetConfig,
    pub class_names: Vec<String>,
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
    pub adam: AdamState,
    pub cell_stats: FeatureStats,
    pub tissue_stats: FeatureStats,
    pub delta_cg: DeltaStats,
    pub delta_tg: DeltaStats,
    pub epochs_done: usize,
    pub best_val_f1: f64,
    pub best_epoch: usize,
    pub best_params: BTreeMap<String, Tensor>,
    pub best_buffers: BTreeMap<String, Tensor>,
    pub history: Vec<EpochLog>,
}

impl Checkpoint {
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ckpt.version != 1 {
            return Err(Error::invalid(format!("unsupported checkpoint version {}", ckpt.version)));
        }
        Ok(ckpt)
    }

    /// Rebuilds the model carrying the best-validation parameters.
    pub fn best_model(&self) -> Result<HactNet> {
        build_model(&self.arch, &self.best_params, &self.best_buffers, &self.delta_cg, &self.delta_tg)
    }

    /// Rebuilds the model in its latest (resume) state.
    pub fn current_model(&self) -> Result<HactNet> {
        build_model(&self.arch, &self.params, &self.buffers, &self.delta_cg, &self.delta_tg)
    }
}

fn build_model(
    arch: &HactNetConfig,
    params: &BTreeMap<String, Tensor>,
    buffers: &BTreeMap<String, Tensor>,
    delta_cg: &DeltaStats,
    delta_tg: &DeltaStats,
) -> Result<HactNet> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = HactNet::new(arch.clone(), &mut rng)?;
    for (name, tensor) in model.params_mut() {
        let stored = params
            .get(&name)
            .ok_or_else(|| Error::invalid(format!("checkpoint missing parameter {name}")))?;
        if stored.shape() != tensor.shape() {
            return Err(Error::shape(format!(
                "checkpoint parameter {name} has shape {:?}, model expects {:?}",
                stored.shape(),
                tensor.shape()
            )));
        }
        *tensor = stored.clone();
    }
    for (name, tensor) in model.buffers_mut() {
        let stored = buffers
            .get(&name)
            .ok_or_else(|| Error::invalid(format!("checkpoint missing buffer {name}")))?;
        if stored.shape() != tensor.shape() {
            return Err(Error::shape(format!(
                "checkpoint buffer {name} has shape {:?}, model expects {:?}",
                stored.shape(),
                tensor.shape()
            )));
        }
        *tensor = stored.clone();
    }
    model.set_deltas(delta_cg.delta, delta_tg.delta);
    Ok(model)
}

fn snapshot_params(model: &HactNet) -> BTreeMap<String, Tensor> {
    model.params().into_iter().map(|(n, t)| (n, t.clone())).collect()
}

fn snapshot_buffers(model: &HactNet) -> BTreeMap<String, Tensor> {
    model.buffers().into_iter().map(|(n, t)| (n, t.clone())).collect()
}

/// In-memory training state between epochs.
#[derive(Debug)]
pub struct TrainState {
    pub model: HactNet,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub class_names: Vec<String>,
    pub cell_stats: FeatureStats,
    pub tissue_stats: FeatureStats,
    pub delta_cg: DeltaStats,
    pub delta_tg: DeltaStats,
    pub epochs_done: usize,
    pub best_val_f1: f64,
    pub best_epoch: usize,
    pub best_params: BTreeMap<String, Tensor>,
    pub best_buffers: BTreeMap<String, Tensor>,
    pub history: Vec<EpochLog>,
}

impl TrainState {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: 1,
            config: self.config.clone(),
            arch: self.model.config.clone(),
            class_names: self.class_names.clone(),
            params: snapshot_params(&self.model),
            buffers: snapshot_buffers(&self.model),
            adam: self.adam.clone(),
            cell_stats: self.cell_stats.clone(),
            tissue_stats: self.tissue_stats.clone(),
            delta_cg: self.delta_cg,
            delta_tg: self.delta_tg,
            epochs_done: self.epochs_done,
            best_val_f1: self.best_val_f1,
            best_epoch: self.best_epoch,
            best_params: self.best_params.clone(),
            best_buffers: self.best_buffers.clone(),
            history: self.history.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(TrainState {
            model: ckpt.current_model()?,
            adam: ckpt.adam.clone(),
            config: ckpt.config.clone(),
            class_names: ckpt.class_names.clone(),
            cell_stats: ckpt.cell_stats.clone(),
            tissue_stats: ckpt.tissue_stats.clone(),
            delta_cg: ckpt.delta_cg,
            delta_tg: ckpt.delta_tg,
            epochs_done: ckpt.epochs_done,
            best_val_f1: ckpt.best_val_f1,
            best_epoch: ckpt.best_epoch,
            best_params: ckpt.best_params.clone(),
            best_buffers: ckpt.best_buffers.clone(),
            history: ckpt.history.clone(),
        })
    }
}

fn check_feature_dims(graphs: &[(HactGraph, usize)]) -> Result<(usize, usize)> {
    let first = &graphs[0].0;
    let (cd, td) = (first.cell.feature_dim(), first.tissue.feature_dim());
    for (i, (g, _)) in graphs.iter().enumerate() {
        // Graphs without cells report feature dim 0; they adopt the corpus dim.
        let gc = g.cell.feature_dim();
        if g.cell.node_count > 0 && gc != cd {
            return Err(Error::shape(format!(
                "graph {i} has cell feature dim {gc}, corpus uses {cd}"
            )));
        }
        let gt = g.tissue.feature_dim();
        if gt != td {
            return Err(Error::shape(format!(
                "graph {i} has tissue feature dim {gt}, corpus uses {td}"
            )));
        }
    }
    Ok((cd, td))
}

/// Builds the initial training state: feature statistics and scaler
/// normalization from the training corpus, seeded parameter init.
pub fn init_training(
    train: &[(HactGraph, usize)],
    class_names: &[String],
    config: &TrainConfig,
) -> Result<TrainState> {
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let (cell_dim, tissue_dim) = check_feature_dims(train)?;
    if let Some(&bad) = train.iter().map(|(_, l)| l).find(|&&l| l >= class_names.len()) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {} classes",
            class_names.len()
        )));
    }

    let cell_rows: Vec<&Vec<f64>> = train.iter().flat_map(|(g, _)| g.cell.features.iter()).collect();
    let tissue_rows: Vec<&Vec<f64>> =
        train.iter().flat_map(|(g, _)| g.tissue.features.iter()).collect();
    let cell_stats = FeatureStats::fit(&cell_rows).unwrap_or_else(|| FeatureStats::identity(cell_dim));
    let tissue_stats =
        FeatureStats::fit(&tissue_rows).unwrap_or_else(|| FeatureStats::identity(tissue_dim));

    let (delta_cg, delta_tg) = if config.layer_type == LayerKind::Pna {
        (
            compute_delta(train.iter().map(|(g, _)| &g.cell))?,
            compute_delta(train.iter().map(|(g, _)| &g.tissue))?,
        )
    } else {
        // GIN layers never evaluate the scalers.
        (DeltaStats { delta: 1.0, sample_count: 0 }, DeltaStats { delta: 1.0, sample_count: 0 })
    };

    let arch = config.arch(cell_dim, tissue_dim, class_names.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = HactNet::new(arch, &mut rng)?;
    model.set_deltas(delta_cg.delta, delta_tg.delta);
    let adam = adam_for(&model, config.learning_rate);
    let best_params = snapshot_params(&model);
    let best_buffers = snapshot_buffers(&model);
    Ok(TrainState {
        model,
        adam,
        config: config.clone(),
        class_names: class_names.to_vec(),
        cell_stats,
        tissue_stats,
        delta_cg,
        delta_tg,
        epochs_done: 0,
        best_val_f1: f64::NEG_INFINITY,
        best_epoch: 0,
        best_params,
        best_buffers,
        history: Vec::new(),
    })
}

fn prepare_all(
    graphs: &[(HactGraph, usize)],
    cell_stats: &FeatureStats,
    tissue_stats: &FeatureStats,
) -> Result<Vec<(PreparedGraph, usize)>> {
    graphs
        .iter()
        .map(|(g, l)| Ok((PreparedGraph::new(g, cell_stats, tissue_stats)?, *l)))
        .collect()
}

/// Epoch-e shuffle order: a pure function of the seed and epoch index, so
/// a resumed run replays the identical batch sequence.
fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Argmax with ties to the smaller class id.
pub fn predict(model: &HactNet, graph: &PreparedGraph) -> Result<usize> {
    let logits = model.forward(graph, Mode::Eval)?;
    let mut best = 0usize;
    for (k, &v) in logits.data().iter().enumerate() {
        if v > logits.data()[best] {
            best = k;
        }
    }
    Ok(best)
}

fn eval_prepared(model: &HactNet, data: &[(PreparedGraph, usize)], classes: usize) -> Result<Metrics> {
    let mut confusion = Confusion::new(classes);
    for (g, label) in data {
        confusion.add(*label, predict(model, g)?);
    }
    weighted_f1(&confusion)
}

/// Runs epochs `state.epochs_done..target_epochs`, updating the
/// best-validation snapshot after each epoch.
pub fn train_epochs(
    state: &mut TrainState,
    train: &[(HactGraph, usize)],
    val: &[(HactGraph, usize)],
    target_epochs: usize,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<()> {
    let prepared_train = prepare_all(train, &state.cell_stats, &state.tissue_stats)?;
    let prepared_val = prepare_all(val, &state.cell_stats, &state.tissue_stats)?;
    let classes = state.class_names.len();
    while state.epochs_done < target_epochs {
        let epoch = state.epochs_done;
        let order = epoch_order(state.config.seed, epoch, prepared_train.len());
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(state.config.batch_size.max(1)) {
            let graphs: Vec<&PreparedGraph> = chunk.iter().map(|&i| &prepared_train[i].0).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| prepared_train[i].1).collect();
            loss_sum += train_step(&mut state.model, &mut state.adam, &graphs, &labels)?;
            batches += 1;
        }
        let val_metrics = eval_prepared(&state.model, &prepared_val, classes)?;
        state.epochs_done = epoch + 1;
        if val_metrics.weighted_f1 > state.best_val_f1 {
            state.best_val_f1 = val_metrics.weighted_f1;
            state.best_epoch = epoch;
            state.best_params = snapshot_params(&state.model);
            state.best_buffers = snapshot_buffers(&state.model);
        }
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            val_weighted_f1: val_metrics.weighted_f1,
        };
        on_epoch(&log);
        state.history.push(log);
    }
    Ok(())
}

/// End-to-end training over in-memory graphs; returns the final
/// checkpoint holding both the resume state and the best-validation
/// parameters.
pub fn train_graphs(
    train: &[(HactGraph, usize)],
    val: &[(HactGraph, usize)],
    class_names: &[String],
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<Checkpoint> {
    let mut state = init_training(train, class_names, config)?;
    train_epochs(&mut state, train, val, config.epochs, on_epoch)?;
    Ok(state.checkpoint())
}

/// Manifest-based training entry point used by the command line.
pub fn train_manifests(
    train: &DatasetManifest,
    val: &DatasetManifest,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<Checkpoint> {
    crate::dataset::check_split_hygiene(&[train, val])?;
    let train_graphs_v = train.load_graphs()?;
    let val_graphs = val.load_graphs()?;
    train_graphs(&train_graphs_v, &val_graphs, &train.class_names, config, on_epoch)
}

/// Evaluates a checkpoint's best model over labeled graphs.
pub fn evaluate_graphs(ckpt: &Checkpoint, test: &[(HactGraph, usize)]) -> Result<Metrics> {
    let model = ckpt.best_model()?;
    let prepared = prepare_all(test, &ckpt.cell_stats, &ckpt.tissue_stats)?;
    eval_prepared(&model, &prepared, ckpt.class_names.len())
}

pub fn evaluate_manifest(ckpt: &Checkpoint, test: &DatasetManifest) -> Result<Metrics> {
    evaluate_graphs(ckpt, &test.load_graphs()?)
}

/// Mean and standard deviation of the test weighted F1 over repeated
/// seeded runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedsReport {
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
    pub std: f64,
}

pub fn train_seeds(
    train: &[(HactGraph, usize)],
    val: &[(HactGraph, usize)],
    test: &[(HactGraph, usize)],
    class_names: &[String],
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<SeedsReport> {
    if seeds.is_empty() {
        return Err(Error::invalid("need at least one seed"));
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut cfg = config.clone();
        cfg.seed = seed;
        let ckpt = train_graphs(train, val, class_names, &cfg, |_| {})?;
        let metrics = evaluate_graphs(&ckpt, test)?;
        per_seed.push((seed, metrics.weighted_f1));
    }
    let n = per_seed.len() as f64;
    let mean = per_seed.iter().map(|(_, f)| f).sum::<f64>() / n;
    let var = per_seed.iter().map(|(_, f)| (f - mean).powi(2)).sum::<f64>() / n;
    Ok(SeedsReport { per_seed, mean, std: var.sqrt() })
}
