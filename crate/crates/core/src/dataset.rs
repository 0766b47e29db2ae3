//! Dataset manifests, label-hierarchy mappings and the synthetic graph
//! generator.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_cell_topology, EntityGraph, GraphKind, HactGraph};

/// The seven-subtype label spectrum used by the built-in label maps.
pub const SEVEN_CLASS_NAMES: [&str; 7] =
    ["normal", "benign", "udh", "adh", "fea", "dcis", "invasive"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub graph: PathBuf,
    pub label: usize,
}

/// Ordered list of (graph file, label) pairs for one split.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl DatasetManifest {
    /// Reads a JSON-lines manifest (`{"graph": path, "label": id}` per
    /// line). Labels are validated against `class_names`; graph paths are
    /// checked for existence.
    pub fn load(path: impl AsRef<Path>, class_names: Vec<String>, split: Split) -> Result<Self> {
        let text = std::fs::read_to_string(&path)?;
        let base = path.as_ref().parent().map(Path::to_path_buf).unwrap_or_default();
        let mut entries = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line)
                .map_err(|e| Error::Parse { line: idx + 1, message: e.to_string() })?;
            let resolved =
                if entry.graph.is_relative() { base.join(&entry.graph) } else { entry.graph };
            if entry.label >= class_names.len() {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!(
                        "label {} out of range for {} classes",
                        entry.label,
                        class_names.len()
                    ),
                });
            }
            if !resolved.exists() {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!("graph file {} does not exist", resolved.display()),
                });
            }
            entries.push(ManifestEntry { graph: resolved, label: entry.label });
        }
        if entries.is_empty() {
            return Err(Error::invalid("manifest contains no entries"));
        }
        Ok(DatasetManifest { entries, class_names, split })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load_graphs(&self) -> Result<Vec<(HactGraph, usize)>> {
        self.entries
            .iter()
            .map(|e| Ok((HactGraph::load_json(&e.graph)?, e.label)))
            .collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }
}

/// Rejects any graph path that appears in more than one split.
pub fn check_split_hygiene(manifests: &[&DatasetManifest]) -> Result<()> {
    let mut seen: BTreeSet<&Path> = BTreeSet::new();
    for m in manifests {
        for e in &m.entries {
            if !seen.insert(e.graph.as_path()) {
                return Err(Error::invalid(format!(
                    "graph {} appears in more than one split",
                    e.graph.display()
                )));
            }
        }
    }
    Ok(())
}

/// Fine-label to task-label mapping; `None` drops the class from the task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMap {
    pub mapping: Vec<Option<usize>>,
    pub task_class_names: Vec<String>,
}

impl LabelMap {
    pub fn identity(class_names: &[String]) -> Self {
        LabelMap {
            mapping: (0..class_names.len()).map(Some).collect(),
            task_class_names: class_names.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.task_class_names.len();
        let mut hit = vec![false; k];
        for m in self.mapping.iter().flatten() {
            if *m >= k {
                return Err(Error::invalid(format!("task label {m} out of range for {k}")));
            }
            hit[*m] = true;
        }
        if let Some(missing) = hit.iter().position(|&h| !h) {
            return Err(Error::invalid(format!(
                "label map is not surjective: task label {missing} unused"
            )));
        }
        Ok(())
    }

    /// Relabels a manifest, dropping excluded entries.
    pub fn apply(&self, manifest: &DatasetManifest) -> Result<DatasetManifest> {
        self.validate()?;
        let mut entries = Vec::new();
        for e in &manifest.entries {
            let fine = e.label;
            let mapped = self.mapping.get(fine).ok_or_else(|| {
                Error::invalid(format!("label {fine} has no entry in the label map"))
            })?;
            if let Some(task) = mapped {
                entries.push(ManifestEntry { graph: e.graph.clone(), label: *task });
            }
        }
        if entries.is_empty() {
            return Err(Error::invalid("label map drops every manifest entry"));
        }
        Ok(DatasetManifest {
            entries,
            class_names: self.task_class_names.clone(),
            split: manifest.split,
        })
    }
}

/// Seven-class spectrum grouped by cancer risk: normal / non-cancerous
/// (benign, usual hyperplasia) / precancerous (atypias) / cancerous.
pub fn four_class_map() -> LabelMap {
    LabelMap {
        mapping: vec![Some(0), Some(1), Some(1), Some(2), Some(2), Some(3), Some(3)],
        task_class_names: vec![
            "normal".into(),
            "non-cancerous".into(),
            "precancerous".into(),
            "cancerous".into(),
        ],
    }
}

/// The six binary decision-tree tasks over the seven-class spectrum, from
/// the root (invasive vs. rest) down to the leaf sibling pairs.
pub fn binary_task_maps() -> Vec<(String, LabelMap)> {
    let names = |a: &str, b: &str| vec![a.to_string(), b.to_string()];
    // indices: 0 normal, 1 benign, 2 udh, 3 adh, 4 fea, 5 dcis, 6 invasive
    vec![
        (
            "invasive-vs-rest".into(),
            LabelMap {
                mapping: vec![Some(1), Some(1), Some(1), Some(1), Some(1), Some(1), Some(0)],
                task_class_names: names("invasive", "rest"),
            },
        ),
        (
            "benign-vs-atypical-dcis".into(),
            LabelMap {
                mapping: vec![Some(0), Some(0), Some(0), Some(1), Some(1), Some(1), None],
                task_class_names: names("normal-benign-udh", "adh-fea-dcis"),
            },
        ),
        (
            "normal-vs-benign-udh".into(),
            LabelMap {
                mapping: vec![Some(0), Some(1), Some(1), None, None, None, None],
                task_class_names: names("normal", "benign-udh"),
            },
        ),
        (
            "benign-vs-udh".into(),
            LabelMap {
                mapping: vec![None, Some(0), Some(1), None, None, None, None],
                task_class_names: names("benign", "udh"),
            },
        ),
        (
            "atypical-vs-dcis".into(),
            LabelMap {
                mapping: vec![None, None, None, Some(0), Some(0), Some(1), None],
                task_class_names: names("adh-fea", "dcis"),
            },
        ),
        (
            "adh-vs-fea".into(),
            LabelMap {
                mapping: vec![None, None, None, Some(0), Some(1), None, None],
                task_class_names: names("adh", "fea"),
            },
        ),
    ]
}

/// Generative recipe for one synthetic class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRecipe {
    pub name: String,
    /// Inclusive cell-count range; samples are log-spaced across it so the
    /// extremes always occur.
    pub cells: (usize, usize),
    /// Spatial clusters the cells condense around.
    pub clusters: usize,
    /// Inclusive tissue-region count range.
    pub regions: (usize, usize),
    /// Mean shift of the cell morphological features.
    pub cell_feature_shift: f64,
    /// Mean shift of the tissue morphological features.
    pub tissue_feature_shift: f64,
}

/// Generator-wide geometry and topology settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub morph_dim: usize,
    pub arena: f64,
    pub k: usize,
    pub d_min: f64,
    pub tissue_k: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { morph_dim: 6, arena: 512.0, k: 5, d_min: 50.0, tissue_k: 3 }
    }
}

/// Two spatial-density/region-count classes with signal planted at both
/// hierarchy levels.
pub fn default_recipes() -> Vec<ClassRecipe> {
    vec![
        ClassRecipe {
            name: "sparse".into(),
            cells: (14, 60),
            clusters: 2,
            regions: (2, 4),
            cell_feature_shift: 0.0,
            tissue_feature_shift: 0.0,
        },
        ClassRecipe {
            name: "dense".into(),
            cells: (40, 170),
            clusters: 5,
            regions: (4, 8),
            cell_feature_shift: 0.6,
            tissue_feature_shift: 0.6,
        },
    ]
}

fn log_spaced(lo: usize, hi: usize, i: usize, n: usize) -> usize {
    if n <= 1 || lo == hi {
        return lo;
    }
    let t = i as f64 / (n - 1) as f64;
    let v = ((lo as f64).ln() * (1.0 - t) + (hi as f64).ln() * t).exp();
    (v.round() as usize).clamp(lo, hi)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn synth_graph(rng: &mut ChaCha8Rng, recipe: &ClassRecipe, cfg: &SynthConfig, index: usize, per_class: usize) -> HactGraph {
    let n_cells = log_spaced(recipe.cells.0, recipe.cells.1, index, per_class);
    let n_regions = log_spaced(recipe.regions.0, recipe.regions.1, index % per_class.max(1), per_class)
        .clamp(recipe.regions.0, recipe.regions.1);

    // Cell positions condense around cluster centers.
    let centers: Vec<(f64, f64)> = (0..recipe.clusters)
        .map(|_| (rng.gen_range(0.0..cfg.arena), rng.gen_range(0.0..cfg.arena)))
        .collect();
    let spread = cfg.arena / 10.0;
    let cell_pts: Vec<(f64, f64)> = (0..n_cells)
        .map(|_| {
            let c = centers[rng.gen_range(0..centers.len())];
            let x = (c.0 + normal(rng) * spread).clamp(0.0, cfg.arena - 1.0);
            let y = (c.1 + normal(rng) * spread).clamp(0.0, cfg.arena - 1.0);
            (x, y)
        })
        .collect();
    let cell_features: Vec<Vec<f64>> = cell_pts
        .iter()
        .map(|&(x, y)| {
            let mut f: Vec<f64> =
                (0..cfg.morph_dim).map(|_| recipe.cell_feature_shift + normal(rng)).collect();
            f.push(x / cfg.arena);
            f.push(y / cfg.arena);
            f
        })
        .collect();
    let cell_edges = build_cell_topology(&cell_pts, cfg.k, cfg.d_min).expect("valid topology");
    let cell = EntityGraph {
        kind: GraphKind::Cell,
        node_count: n_cells,
        edges: cell_edges,
        features: cell_features,
        centroids: cell_pts.clone(),
    };

    let region_pts: Vec<(f64, f64)> = (0..n_regions)
        .map(|_| (rng.gen_range(0.0..cfg.arena), rng.gen_range(0.0..cfg.arena)))
        .collect();
    let tissue_features: Vec<Vec<f64>> = region_pts
        .iter()
        .map(|&(x, y)| {
            let mut f: Vec<f64> =
                (0..cfg.morph_dim).map(|_| recipe.tissue_feature_shift + normal(rng)).collect();
            f.push(x / cfg.arena);
            f.push(y / cfg.arena);
            f
        })
        .collect();
    // Region adjacency stands in for a merged-superpixel map: nearest
    // neighbors without a pruning radius.
    let tissue_edges =
        build_cell_topology(&region_pts, cfg.tissue_k.min(n_regions.saturating_sub(1)).max(1), cfg.arena * 4.0)
            .expect("valid topology");
    let tissue = EntityGraph {
        kind: GraphKind::Tissue,
        node_count: n_regions,
        edges: tissue_edges,
        features: tissue_features,
        centroids: region_pts.clone(),
    };

    // Each cell joins its nearest region.
    let assignment: Vec<usize> = cell_pts
        .iter()
        .map(|&(x, y)| {
            let mut best = (f64::INFINITY, 0usize);
            for (r, &(rx, ry)) in region_pts.iter().enumerate() {
                let d = (rx - x).powi(2) + (ry - y).powi(2);
                if d < best.0 {
                    best = (d, r);
                }
            }
            best.1
        })
        .collect();

    let g = HactGraph { cell, tissue, assignment };
    g.validate().expect("generator emits valid graphs");
    g
}

/// Reproducible labeled graphs: `n_per_class` per recipe, generated
/// class-major. Node counts are log-spaced over each recipe's range, so
/// the extremes always appear.
pub fn generate_synthetic_dataset(
    seed: u64,
    n_per_class: usize,
    recipes: &[ClassRecipe],
    cfg: &SynthConfig,
) -> Result<Vec<(HactGraph, usize)>> {
    if recipes.len() < 2 {
        return Err(Error::invalid("need at least two class recipes"));
    }
    if recipes.windows(2).all(|w| {
        let (a, b) = (&w[0], &w[1]);
        a.cells == b.cells
            && a.clusters == b.clusters
            && a.regions == b.regions
            && a.cell_feature_shift == b.cell_feature_shift
            && a.tissue_feature_shift == b.tissue_feature_shift
    }) {
        return Err(Error::invalid("recipes must differ in at least one generative parameter"));
    }
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(recipes.len() * n_per_class);
    for (label, recipe) in recipes.iter().enumerate() {
        for i in 0..n_per_class {
            out.push((synth_graph(&mut rng, recipe, cfg, i, n_per_class), label));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names7() -> Vec<String> {
        SEVEN_CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    }

    fn write_manifest(dir: &Path, entries: &[(&str, usize)]) -> PathBuf {
        let path = dir.join("manifest.jsonl");
        let mut text = String::new();
        for (g, l) in entries {
            let gpath = dir.join(g);
            std::fs::write(&gpath, "{}").unwrap();
            text.push_str(&format!("{{\"graph\": \"{g}\", \"label\": {l}}}\n"));
        }
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), &[("a.json", 0), ("b.json", 6)]);
        let m = DatasetManifest::load(&path, names7(), Split::Train).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.labels(), vec![0, 6]);
        // Out-of-range label rejected.
        std::fs::write(&path, "{\"graph\": \"a.json\", \"label\": 9}\n").unwrap();
        assert!(DatasetManifest::load(&path, names7(), Split::Train).is_err());
    }

    #[test]
    fn split_hygiene_rejects_shared_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), &[("a.json", 0), ("b.json", 1)]);
        let train = DatasetManifest::load(&path, names7(), Split::Train).unwrap();
        let mut val = train.clone();
        val.split = Split::Val;
        val.entries.truncate(1);
        assert!(check_split_hygiene(&[&train, &val]).is_err());
        let dir2 = tempfile::tempdir().unwrap();
        let path2 = write_manifest(dir2.path(), &[("c.json", 0)]);
        let other = DatasetManifest::load(&path2, names7(), Split::Val).unwrap();
        check_split_hygiene(&[&train, &other]).unwrap();
    }

    #[test]
    fn four_class_grouping() {
        let dir = tempfile::tempdir().unwrap();
        let entries: Vec<(String, usize)> =
            (0..7).map(|l| (format!("g{l}.json"), l)).collect();
        let refs: Vec<(&str, usize)> =
            entries.iter().map(|(g, l)| (g.as_str(), *l)).collect();
        let path = write_manifest(dir.path(), &refs);
        let m = DatasetManifest::load(&path, names7(), Split::Test).unwrap();
        let mapped = four_class_map().apply(&m).unwrap();
        assert_eq!(mapped.labels(), vec![0, 1, 1, 2, 2, 3, 3]);
        assert_eq!(mapped.class_names.len(), 4);
        assert!(mapped.labels().iter().all(|&l| l < 4));
    }

    #[test]
    fn identity_map_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), &[("a.json", 2), ("b.json", 5)]);
        let m = DatasetManifest::load(&path, names7(), Split::Val).unwrap();
        let mapped = LabelMap::identity(&names7()).apply(&m).unwrap();
        assert_eq!(mapped, m);
    }

    #[test]
    fn adh_vs_fea_drops_other_classes() {
        let dir = tempfile::tempdir().unwrap();
        let entries: Vec<(String, usize)> =
            (0..7).map(|l| (format!("g{l}.json"), l)).collect();
        let refs: Vec<(&str, usize)> =
            entries.iter().map(|(g, l)| (g.as_str(), *l)).collect();
        let path = write_manifest(dir.path(), &refs);
        let m = DatasetManifest::load(&path, names7(), Split::Test).unwrap();
        let (name, map) =
            binary_task_maps().into_iter().find(|(n, _)| n == "adh-vs-fea").unwrap();
        assert_eq!(name, "adh-vs-fea");
        let mapped = map.apply(&m).unwrap();
        assert_eq!(mapped.entries.len(), 2);
        assert_eq!(mapped.labels(), vec![0, 1]);
    }

    #[test]
    fn all_binary_maps_validate() {
        for (_, map) in binary_task_maps() {
            map.validate().unwrap();
        }
        four_class_map().validate().unwrap();
    }

    #[test]
    fn generator_is_deterministic() {
        let cfg = SynthConfig::default();
        let a = generate_synthetic_dataset(9, 6, &default_recipes(), &cfg).unwrap();
        let b = generate_synthetic_dataset(9, 6, &default_recipes(), &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(10, 6, &default_recipes(), &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generator_respects_ranges_and_spans_sizes() {
        let cfg = SynthConfig::default();
        let recipes = default_recipes();
        let data = generate_synthetic_dataset(3, 10, &recipes, &cfg).unwrap();
        let mut max_cells = 0usize;
        let mut min_cells = usize::MAX;
        for (g, label) in &data {
            let r = &recipes[*label];
            assert!(g.cell.node_count >= r.cells.0 && g.cell.node_count <= r.cells.1);
            assert!(g.tissue.node_count >= r.regions.0 && g.tissue.node_count <= r.regions.1);
            assert!(g.cell.edges.len() <= g.cell.node_count * cfg.k);
            max_cells = max_cells.max(g.cell.node_count);
            min_cells = min_cells.min(g.cell.node_count);
        }
        // Log-spaced counts force the extremes, spanning a 10x ratio.
        assert!(max_cells as f64 / min_cells as f64 >= 10.0);
    }

    /// Single-threshold classifier on a scalar statistic; returns the best
    /// training accuracy over all cut points.
    pub(crate) fn threshold_separability(values: &[(f64, usize)]) -> f64 {
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let n = sorted.len() as f64;
        let mut best = 0.0f64;
        for cut in 0..=sorted.len() {
            let correct: usize = sorted[..cut].iter().filter(|(_, l)| *l == 0).count()
                + sorted[cut..].iter().filter(|(_, l)| *l == 1).count();
            let acc = (correct as f64 / n).max(1.0 - correct as f64 / n);
            best = best.max(acc);
        }
        best
    }

    #[test]
    fn density_only_recipes_are_separable_by_cell_statistics() {
        let cfg = SynthConfig::default();
        let mut recipes = default_recipes();
        // Differ only in cell density.
        recipes[0].regions = (3, 3);
        recipes[1].regions = (3, 3);
        recipes[0].cell_feature_shift = 0.0;
        recipes[1].cell_feature_shift = 0.0;
        recipes[0].tissue_feature_shift = 0.0;
        recipes[1].tissue_feature_shift = 0.0;
        recipes[0].clusters = 3;
        recipes[1].clusters = 3;
        recipes[0].cells = (14, 40);
        recipes[1].cells = (80, 170);
        let data = generate_synthetic_dataset(4, 20, &recipes, &cfg).unwrap();
        let counts: Vec<(f64, usize)> =
            data.iter().map(|(g, l)| (g.cell.node_count as f64, *l)).collect();
        assert!(threshold_separability(&counts) >= 0.95);
    }

    #[test]
    fn region_only_recipes_are_separable_by_tissue_statistics() {
        let cfg = SynthConfig::default();
        let mut recipes = default_recipes();
        for r in &mut recipes {
            r.cells = (30, 60);
            r.clusters = 3;
            r.cell_feature_shift = 0.0;
            r.tissue_feature_shift = 0.0;
        }
        recipes[0].regions = (2, 3);
        recipes[1].regions = (7, 10);
        let data = generate_synthetic_dataset(5, 20, &recipes, &cfg).unwrap();
        let counts: Vec<(f64, usize)> =
            data.iter().map(|(g, l)| (g.tissue.node_count as f64, *l)).collect();
        assert!(threshold_separability(&counts) >= 0.95);
    }

    #[test]
    fn identical_recipes_are_rejected() {
        let cfg = SynthConfig::default();
        let r = default_recipes()[0].clone();
        let twin = ClassRecipe { name: "twin".into(), ..r.clone() };
        assert!(generate_synthetic_dataset(1, 4, &[r, twin], &cfg).is_err());
    }
}
