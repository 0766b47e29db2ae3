//! Command-line pipeline: stain normalization, graph construction,
//! synthetic data, training, evaluation, gradient checking and the
//! ablation grid.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hactnet_core::dataset::{
    check_split_hygiene, default_recipes, generate_synthetic_dataset, DatasetManifest,
    ManifestEntry, Split, SynthConfig,
};
use hactnet_core::entity::{
    detect_nuclei_blob, load_nuclei_centroids, DEFAULT_COMPACTNESS, DEFAULT_MERGE_THRESHOLD,
    DEFAULT_SLIC_ITERATIONS,
};
use hactnet_core::features::{FeatureMode, FeatureSpec};
use hactnet_core::gnn::{JkMode, LayerKind, ModelKind};
use hactnet_core::graph::{build_graph_from_image, GraphBuildParams, HactGraph};
use hactnet_core::metrics::format_confusion_table;
use hactnet_core::stain::{normalize_image, StainBasis};
use hactnet_core::train::{
    evaluate_manifest, train_graphs, train_manifests, train_seeds, Checkpoint, TrainConfig,
    TrainState,
};
use hactnet_core::RgbImage;

/// Environment variable overriding every seed-bearing subcommand.
const SEED_ENV: &str = "HACTNET_SEED";

#[derive(Parser)]
#[command(name = "hactnet", version, about = "Hierarchical cell-to-tissue graph classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Re-express an image in a target stain basis.
    StainNormalize(StainNormalizeArgs),
    /// Build a hierarchical graph from an image and a nuclei file.
    BuildGraph(BuildGraphArgs),
    /// Generate a reproducible synthetic dataset with train/val/test splits.
    SynthData(SynthDataArgs),
    /// Train a model and write the best-validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test manifest.
    Eval(EvalArgs),
    /// Verify model gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Run the feature x layer-type x jumping-knowledge ablation grid.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct StainNormalizeArgs {
    #[arg(long)]
    input: PathBuf,
    /// JSON file holding `stain_vectors` (row-major 3x2) and
    /// `max_concentrations`.
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct BuildGraphArgs {
    #[arg(long)]
    image: PathBuf,
    /// CSV of `x,y` nuclei centroids; omitted = run the blob detector.
    #[arg(long)]
    nuclei: Option<PathBuf>,
    #[arg(long)]
    features_cell: Option<PathBuf>,
    #[arg(long)]
    features_tissue: Option<PathBuf>,
    /// Node feature mode: none, handcrafted or external.
    #[arg(long, default_value = "handcrafted")]
    feature_mode: String,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 50.0)]
    d_min: f64,
    #[arg(long, default_value_t = 64)]
    n_segments: usize,
    #[arg(long, default_value_t = DEFAULT_COMPACTNESS)]
    compactness: f64,
    #[arg(long, default_value_t = DEFAULT_SLIC_ITERATIONS)]
    slic_iterations: usize,
    #[arg(long, default_value_t = DEFAULT_MERGE_THRESHOLD)]
    merge_threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    n_train: usize,
    #[arg(long, default_value_t = 25)]
    n_val: usize,
    #[arg(long, default_value_t = 25)]
    n_test: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Optional held-out manifest; with --seeds this reports mean/std.
    #[arg(long)]
    test: Option<PathBuf>,
    /// JSON hyperparameter file; missing keys fall back to the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Class-name JSON array; inferred as class_<i> when absent.
    #[arg(long)]
    classes: Option<PathBuf>,
    /// Comma-separated seeds for repeated runs.
    #[arg(long)]
    seeds: Option<String>,
    /// Resume from an epoch checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Metrics JSON destination; the confusion table prints to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 3)]
    graphs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    classes: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::StainNormalize(args) => stain_normalize(args),
        Command::BuildGraph(args) => build_graph(args),
        Command::SynthData(args) => synth_data(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Gradcheck(args) => gradcheck(args),
        Command::Ablate(args) => ablate(args),
    }
}

fn seed_override(seed: u64) -> u64 {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.parse().unwrap_or(seed),
        Err(_) => seed,
    }
}

fn stain_normalize(args: StainNormalizeArgs) -> Result<()> {
    let image = RgbImage::load_png(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let target = StainBasis::load_json(&args.target)
        .with_context(|| format!("reading {}", args.target.display()))?;
    let out = normalize_image(&image, &target)?;
    out.save_png(&args.output)?;
    println!("normalized {} -> {}", args.input.display(), args.output.display());
    Ok(())
}

fn build_graph(args: BuildGraphArgs) -> Result<()> {
    let image = RgbImage::load_png(&args.image)
        .with_context(|| format!("reading {}", args.image.display()))?;
    let nuclei = match &args.nuclei {
        Some(path) => load_nuclei_centroids(path, image.dims())
            .with_context(|| format!("reading {}", path.display()))?,
        None => detect_nuclei_blob(&image, 0.25, 9, 2500)?,
    };
    let mode = match args.feature_mode.as_str() {
        "none" => FeatureMode::None,
        "handcrafted" => FeatureMode::Handcrafted,
        "external" => FeatureMode::External,
        other => bail!("unknown feature mode `{other}` (none|handcrafted|external)"),
    };
    let params = GraphBuildParams {
        k: args.k,
        d_min: args.d_min,
        n_segments: args.n_segments,
        compactness: args.compactness,
        slic_iterations: args.slic_iterations,
        merge_threshold: args.merge_threshold,
        features: FeatureSpec {
            mode,
            external_cell: args.features_cell,
            external_tissue: args.features_tissue,
            ..FeatureSpec::default()
        },
    };
    let graph = build_graph_from_image(&image, &nuclei, &params)?;
    graph.save_json(&args.out)?;
    println!(
        "built graph: {} cells ({} edges), {} regions ({} edges) -> {}",
        graph.cell.node_count,
        graph.cell.edges.len(),
        graph.tissue.node_count,
        graph.tissue.edges.len(),
        args.out.display()
    );
    Ok(())
}

fn synth_data(args: SynthDataArgs) -> Result<()> {
    let seed = seed_override(args.seed);
    std::fs::create_dir_all(&args.out_dir)?;
    let cfg = SynthConfig::default();
    let recipes = default_recipes();
    let class_names: Vec<String> = recipes.iter().map(|r| r.name.clone()).collect();
    std::fs::write(
        args.out_dir.join("classes.json"),
        serde_json::to_string_pretty(&class_names)?,
    )?;
    for (split, n, offset) in [
        ("train", args.n_train, 0u64),
        ("val", args.n_val, 1),
        ("test", args.n_test, 2),
    ] {
        let graphs = generate_synthetic_dataset(seed.wrapping_add(offset), n, &recipes, &cfg)?;
        let mut manifest = String::new();
        for (i, (g, label)) in graphs.iter().enumerate() {
            let name = format!("{split}_{i:04}.json");
            g.save_json(args.out_dir.join(&name))?;
            manifest.push_str(&serde_json::to_string(&ManifestEntry {
                graph: PathBuf::from(&name),
                label: *label,
            })?);
            manifest.push('\n');
        }
        std::fs::write(args.out_dir.join(format!("{split}.jsonl")), manifest)?;
        println!("wrote {} {split} graphs", n * recipes.len());
    }
    Ok(())
}

fn load_classes(path: &Option<PathBuf>, manifest_path: &PathBuf) -> Result<Vec<String>> {
    if let Some(p) = path {
        let names: Vec<String> = serde_json::from_str(&std::fs::read_to_string(p)?)?;
        return Ok(names);
    }
    // Fall back to class_<i> names inferred from the manifest labels.
    let text = std::fs::read_to_string(manifest_path)?;
    let mut max_label = 0usize;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let entry: ManifestEntry = serde_json::from_str(line)?;
        max_label = max_label.max(entry.label);
    }
    Ok((0..=max_label).map(|i| format!("class_{i}")).collect())
}

fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    spec.split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|e| anyhow::anyhow!("bad seed `{s}`: {e}")))
        .collect()
}

fn train(args: TrainArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(p) => TrainConfig::load_json(p)?,
        None => TrainConfig::default(),
    };
    config.seed = seed_override(config.seed);
    let class_names = load_classes(&args.classes, &args.train)?;
    let train_manifest = DatasetManifest::load(&args.train, class_names.clone(), Split::Train)?;
    let val_manifest = DatasetManifest::load(&args.val, class_names.clone(), Split::Val)?;

    if let Some(seed_spec) = &args.seeds {
        let seeds = parse_seeds(seed_spec)?;
        let test_path = args
            .test
            .as_ref()
            .context("--seeds needs --test to report mean/std over runs")?;
        let test_manifest = DatasetManifest::load(test_path, class_names.clone(), Split::Test)?;
        check_split_hygiene(&[&train_manifest, &val_manifest, &test_manifest])?;
        let report = train_seeds(
            &train_manifest.load_graphs()?,
            &val_manifest.load_graphs()?,
            &test_manifest.load_graphs()?,
            &class_names,
            &config,
            &seeds,
        )?;
        for (seed, f1) in &report.per_seed {
            println!("seed {seed}: test weighted F1 {f1:.4}");
        }
        println!("test weighted F1 over seeds: {:.4} +/- {:.4}", report.mean, report.std);
        std::fs::write(&args.out, serde_json::to_string_pretty(&report)?)?;
        return Ok(());
    }

    let on_epoch = |log: &hactnet_core::train::EpochLog| {
        println!(
            "epoch {:>3}: train loss {:.4}, val weighted F1 {:.4}",
            log.epoch, log.train_loss, log.val_weighted_f1
        );
    };
    let ckpt = match &args.resume {
        Some(path) => {
            let prior = Checkpoint::load_json(path)?;
            let mut state = TrainState::from_checkpoint(&prior)?;
            let target = state.config.epochs;
            hactnet_core::train::train_epochs(
                &mut state,
                &train_manifest.load_graphs()?,
                &val_manifest.load_graphs()?,
                target,
                on_epoch,
            )?;
            state.checkpoint()
        }
        None => train_manifests(&train_manifest, &val_manifest, &config, on_epoch)?,
    };
    println!(
        "best validation weighted F1 {:.4} at epoch {}",
        ckpt.best_val_f1, ckpt.best_epoch
    );
    if let Some(test_path) = &args.test {
        let test_manifest = DatasetManifest::load(test_path, class_names, Split::Test)?;
        check_split_hygiene(&[&train_manifest, &val_manifest, &test_manifest])?;
        let metrics = evaluate_manifest(&ckpt, &test_manifest)?;
        println!("test weighted F1 {:.4}", metrics.weighted_f1);
    }
    ckpt.save_json(&args.out)?;
    println!("checkpoint -> {}", args.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load_json(&args.checkpoint)?;
    let manifest = DatasetManifest::load(&args.test, ckpt.class_names.clone(), Split::Test)?;
    let metrics = evaluate_manifest(&ckpt, &manifest)?;
    print!("{}", format_confusion_table(&metrics, &ckpt.class_names));
    let json = serde_json::to_string_pretty(&metrics)?;
    match &args.out {
        Some(path) => std::fs::write(path, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<()> {
    use hactnet_core::gnn::{HactNet, HactNetConfig, Mode, PreparedGraph};
    use hactnet_core::nn::{central_diff_error, softmax_cross_entropy};
    use rand::SeedableRng;

    let seed = seed_override(args.seed);
    let cfg = SynthConfig { morph_dim: 2, arena: 128.0, k: 3, d_min: 40.0, tissue_k: 2 };
    let mut recipes = default_recipes();
    recipes[0].cells = (4, 15);
    recipes[1].cells = (5, 15);
    recipes[0].regions = (2, 4);
    recipes[1].regions = (2, 4);
    let data = generate_synthetic_dataset(seed, args.graphs.div_ceil(2).max(1), &recipes, &cfg)?;

    let arch = HactNetConfig {
        cg_layers: 2,
        tg_layers: 2,
        channels: 6,
        embed_dim: 8,
        classifier_channels: 8,
        classes: 2,
        cell_feat_dim: 4,
        tissue_feat_dim: 4,
        ..HactNetConfig::default()
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let model = HactNet::new(arch, &mut rng)?;
    let mut worst = 0.0f64;
    for (i, (g, label)) in data.iter().take(args.graphs).enumerate() {
        let pg = PreparedGraph::raw(g)?;
        let (logits, cache) = model.forward_batch(&[&pg], Mode::Train)?;
        let (_, d_logits) = softmax_cross_entropy(&logits, &[*label])?;
        let grads = model.backward(&[&pg], &cache, &d_logits)?;
        let analytic = model.flatten_grads(&grads);
        let theta = model.flatten_params();
        let shared = std::cell::RefCell::new(model.clone());
        let loss = |t: &[f64]| -> f64 {
            let mut m = shared.borrow_mut();
            m.set_flat_params(t);
            let (logits, _) = m.forward_batch(&[&pg], Mode::Train).unwrap();
            softmax_cross_entropy(&logits, &[*label]).unwrap().0
        };
        let err = central_diff_error(loss, &theta, &analytic);
        println!(
            "graph {i} ({} cells, {} regions): max relative error {err:.3e}",
            g.cell.node_count, g.tissue.node_count
        );
        worst = worst.max(err);
    }
    println!("worst relative error {worst:.3e}");
    if worst >= 1e-4 {
        bail!("gradient check failed: {worst:.3e} >= 1e-4");
    }
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(p) => TrainConfig::load_json(p)?,
        None => TrainConfig::default(),
    };
    config.seed = seed_override(config.seed);
    let class_names = load_classes(&args.classes, &args.train)?;
    let train_m = DatasetManifest::load(&args.train, class_names.clone(), Split::Train)?;
    let val_m = DatasetManifest::load(&args.val, class_names.clone(), Split::Val)?;
    let test_m = DatasetManifest::load(&args.test, class_names.clone(), Split::Test)?;
    check_split_hygiene(&[&train_m, &val_m, &test_m])?;
    let train_graphs_v = train_m.load_graphs()?;
    let val_graphs = val_m.load_graphs()?;
    let test_graphs = test_m.load_graphs()?;

    // Spatial-only variant: keep the trailing normalized-coordinate pair.
    let strip = |graphs: &[(HactGraph, usize)]| -> Vec<(HactGraph, usize)> {
        graphs
            .iter()
            .map(|(g, l)| {
                let mut g = g.clone();
                for rows in [&mut g.cell.features, &mut g.tissue.features] {
                    for row in rows.iter_mut() {
                        let keep = row.split_off(row.len().saturating_sub(2));
                        *row = keep;
                    }
                }
                (g, *l)
            })
            .collect()
    };
    let spatial_train = strip(&train_graphs_v);
    let spatial_val = strip(&val_graphs);
    let spatial_test = strip(&test_graphs);

    let mut rows = Vec::new();
    for (feat_name, tr, va, te) in [
        ("stored", &train_graphs_v, &val_graphs, &test_graphs),
        ("spatial-only", &spatial_train, &spatial_val, &spatial_test),
    ] {
        for layer in [LayerKind::Pna, LayerKind::Gin] {
            for jk in [JkMode::None, JkMode::Concat, JkMode::Lstm] {
                let cfg = TrainConfig {
                    layer_type: layer,
                    jk_mode: jk,
                    model_kind: ModelKind::Hact,
                    ..config.clone()
                };
                let ckpt = train_graphs(tr, va, &class_names, &cfg, |_| {})?;
                let metrics = hactnet_core::train::evaluate_graphs(&ckpt, te)?;
                println!(
                    "features={feat_name} layer={layer:?} jk={jk:?}: test weighted F1 {:.4}",
                    metrics.weighted_f1
                );
                rows.push(serde_json::json!({
                    "features": feat_name,
                    "layer": format!("{layer:?}").to_lowercase(),
                    "jk": format!("{jk:?}").to_lowercase(),
                    "test_weighted_f1": metrics.weighted_f1,
                    "best_val_f1": ckpt.best_val_f1,
                }));
            }
        }
    }
    std::fs::write(&args.out, serde_json::to_string_pretty(&rows)?)?;
    println!("ablation grid -> {}", args.out.display());
    Ok(())
}
