//! Entity graphs, the hierarchical cell-to-tissue container, topology
//! builders and the JSON interchange format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::entity::{region_membership, slic_superpixels, NucleiSet, SuperpixelMap};
use crate::error::{Error, Result};
use crate::features::{
    handcrafted_features, region_feature_average, spatial_features, window_pixels, FeatureMode,
    FeatureSpec,
};
use crate::image::RgbImage;

/// Default neighbor count for the cell topology.
pub const DEFAULT_K: usize = 5;
/// Default pruning distance (pixels) for the cell topology.
pub const DEFAULT_D_MIN: f64 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Cell,
    Tissue,
}

/// Undirected attributed graph over one entity level.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityGraph {
    pub kind: GraphKind,
    pub node_count: usize,
    /// Canonical edge list: `u < v`, sorted, deduplicated.
    pub edges: Vec<(usize, usize)>,
    /// One feature row per node; all rows share a length.
    pub features: Vec<Vec<f64>>,
    /// Pixel coordinates of each node.
    pub centroids: Vec<(f64, f64)>,
}

impl EntityGraph {
    pub fn new(
        kind: GraphKind,
        edges: Vec<(usize, usize)>,
        features: Vec<Vec<f64>>,
        centroids: Vec<(f64, f64)>,
    ) -> Result<Self> {
        let g = EntityGraph { kind, node_count: centroids.len(), edges, features, centroids };
        g.validate()?;
        Ok(g)
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, |f| f.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.node_count || self.centroids.len() != self.node_count {
            return Err(Error::shape(format!(
                "graph with {} nodes has {} feature rows and {} centroids",
                self.node_count,
                self.features.len(),
                self.centroids.len()
            )));
        }
        let dim = self.feature_dim();
        if self.features.iter().any(|f| f.len() != dim) {
            return Err(Error::shape("feature rows have unequal lengths"));
        }
        let mut prev = None;
        for &(u, v) in &self.edges {
            if u >= v {
                return Err(Error::invalid(format!("edge ({u},{v}) is not canonical (u < v)")));
            }
            if v >= self.node_count {
                return Err(Error::invalid(format!(
                    "edge ({u},{v}) endpoint out of range for {} nodes",
                    self.node_count
                )));
            }
            if prev == Some((u, v)) {
                return Err(Error::invalid(format!("duplicate edge ({u},{v})")));
            }
            if let Some(p) = prev {
                if p > (u, v) {
                    return Err(Error::invalid("edge list is not sorted"));
                }
            }
            prev = Some((u, v));
        }
        Ok(())
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0usize; self.node_count];
        for &(u, v) in &self.edges {
            d[u] += 1;
            d[v] += 1;
        }
        d
    }

    /// Neighbor lists in ascending id order.
    pub fn neighbor_lists(&self) -> Vec<Vec<usize>> {
        let mut n = vec![Vec::new(); self.node_count];
        for &(u, v) in &self.edges {
            n[u].push(v);
            n[v].push(u);
        }
        for l in &mut n {
            l.sort_unstable();
        }
        n
    }
}

/// Cell graph + tissue graph + one-hot cell-to-region assignment. Row `i`
/// of the conceptual binary matrix is one-hot at `assignment[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HactGraph {
    pub cell: EntityGraph,
    pub tissue: EntityGraph,
    pub assignment: Vec<usize>,
}

impl HactGraph {
    pub fn validate(&self) -> Result<()> {
        self.cell.validate()?;
        self.tissue.validate()?;
        if self.assignment.len() != self.cell.node_count {
            return Err(Error::shape(format!(
                "{} assignment rows for {} cells",
                self.assignment.len(),
                self.cell.node_count
            )));
        }
        if let Some(&bad) = self.assignment.iter().find(|&&r| r >= self.tissue.node_count) {
            return Err(Error::invalid(format!(
                "assignment targets region {bad}, tissue graph has {} regions",
                self.tissue.node_count
            )));
        }
        Ok(())
    }
}

/// Thresholded k-nearest-neighbor topology over centroids: an edge joins
/// `v` and `u` when either selects the other among its `k` nearest
/// neighbors (L2) at distance strictly below `d_min`. Distance ties break
/// toward the smaller node id.
pub fn build_cell_topology(
    centroids: &[(f64, f64)],
    k: usize,
    d_min: f64,
) -> Result<Vec<(usize, usize)>> {
    if k < 1 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if !(d_min > 0.0) {
        return Err(Error::invalid("d_min must be positive"));
    }
    let n = centroids.len();
    let d_min_sq = d_min * d_min;
    let mut edges = std::collections::BTreeSet::new();
    for v in 0..n {
        let (vx, vy) = centroids[v];
        let mut candidates: Vec<(f64, usize)> = (0..n)
            .filter(|&u| u != v)
            .map(|u| {
                let (ux, uy) = centroids[u];
                ((ux - vx).powi(2) + (uy - vy).powi(2), u)
            })
            .collect();
        candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for &(dist_sq, u) in candidates.iter().take(k) {
            if dist_sq < d_min_sq {
                edges.insert((v.min(u), v.max(u)));
            }
        }
    }
    Ok(edges.into_iter().collect())
}

/// Region adjacency graph: an edge joins two regions when any of their
/// pixels are 4-adjacent.
pub fn build_tissue_topology(map: &SuperpixelMap) -> Vec<(usize, usize)> {
    let mut edges = std::collections::BTreeSet::new();
    for y in 0..map.height {
        for x in 0..map.width {
            let l = map.label(x, y) as usize;
            if x + 1 < map.width {
                let r = map.label(x + 1, y) as usize;
                if r != l {
                    edges.insert((l.min(r), l.max(r)));
                }
            }
            if y + 1 < map.height {
                let d = map.label(x, y + 1) as usize;
                if d != l {
                    edges.insert((l.min(d), l.max(d)));
                }
            }
        }
    }
    edges.into_iter().collect()
}

/// One-hot cell-to-region assignment. With instance labels, a nucleus goes
/// to the region of maximal pixel overlap (ties to the smaller region id);
/// otherwise to the region containing its centroid.
pub fn build_assignment(nuclei: &NucleiSet, map: &SuperpixelMap) -> Result<Vec<usize>> {
    let mut assignment = Vec::with_capacity(nuclei.centroids.len());
    for (i, &(cx, cy)) in nuclei.centroids.iter().enumerate() {
        let (px, py) = (cx.floor() as i64, cy.floor() as i64);
        if px < 0 || py < 0 || px >= map.width as i64 || py >= map.height as i64 {
            return Err(Error::invalid(format!(
                "centroid {i} at ({cx},{cy}) lies outside the {}x{} label map",
                map.width, map.height
            )));
        }
        let by_centroid = map.label(px as usize, py as usize) as usize;
        let region = match &nuclei.instance_labels {
            Some(inst) => {
                let id = (i + 1) as u32;
                let mut overlap = vec![0usize; map.region_count];
                let mut any = false;
                for y in 0..inst.height.min(map.height) {
                    for x in 0..inst.width.min(map.width) {
                        if inst.label(x, y) == id {
                            overlap[map.label(x, y) as usize] += 1;
                            any = true;
                        }
                    }
                }
                if any {
                    // max overlap, ties to the smaller region id
                    let mut best = 0usize;
                    for r in 1..map.region_count {
                        if overlap[r] > overlap[best] {
                            best = r;
                        }
                    }
                    best
                } else {
                    by_centroid
                }
            }
            None => by_centroid,
        };
        assignment.push(region);
    }
    Ok(assignment)
}

/// Reads an external feature CSV: one row of comma-separated floats per
/// entity, in entity order.
pub fn load_feature_csv(path: impl AsRef<Path>, expected_rows: usize) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(&path)?;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        rows.push(row.map_err(|e| Error::Parse { line: idx + 1, message: e.to_string() })?);
    }
    if rows.len() != expected_rows {
        return Err(Error::invalid(format!(
            "feature file {} has {} rows, expected {}",
            path.as_ref().display(),
            rows.len(),
            expected_rows
        )));
    }
    if let Some(first) = rows.first() {
        let dim = first.len();
        if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::Parse {
                line: bad + 1,
                message: format!("row has {} values, expected {dim}", rows[bad].len()),
            });
        }
    }
    Ok(rows)
}

/// Per-entity morphological feature rows for one level, per the feature
/// mode. `masks` yields the instance mask of each entity.
fn morphological_rows(
    image: &RgbImage,
    masks: &[Vec<(usize, usize)>],
    mode: &FeatureMode,
    external: Option<&Path>,
) -> Result<Option<Vec<Vec<f64>>>> {
    match mode {
        FeatureMode::None => Ok(None),
        FeatureMode::Handcrafted => {
            let mut rows = Vec::with_capacity(masks.len());
            for mask in masks {
                rows.push(handcrafted_features(image, mask)?.to_vec());
            }
            Ok(Some(rows))
        }
        FeatureMode::External => {
            let path = external
                .ok_or_else(|| Error::invalid("external feature mode without a feature file"))?;
            Ok(Some(load_feature_csv(path, masks.len())?))
        }
    }
}

fn concat_features(
    morph: Option<&Vec<Vec<f64>>>,
    centroids: &[(f64, f64)],
    dims: (usize, usize),
) -> Vec<Vec<f64>> {
    centroids
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let mut row = morph.map_or_else(Vec::new, |m| m[i].clone());
            row.extend_from_slice(&spatial_features(c, dims));
            row
        })
        .collect()
}

/// Instance mask of nucleus `i`: its instance pixels clipped to the patch
/// window, or the whole window when no instance map exists.
fn cell_mask(
    nuclei: &NucleiSet,
    i: usize,
    patch: usize,
    dims: (usize, usize),
) -> Vec<(usize, usize)> {
    let window = window_pixels(nuclei.centroids[i], patch, dims);
    match &nuclei.instance_labels {
        Some(inst) => {
            let id = (i + 1) as u32;
            let clipped: Vec<(usize, usize)> =
                window.iter().copied().filter(|&(x, y)| inst.label(x, y) == id).collect();
            if clipped.is_empty() {
                window
            } else {
                clipped
            }
        }
        None => window,
    }
}

/// Assembles a hierarchical graph from detected entities and a merged
/// region map. Cell node features are morphological descriptors from
/// `patch_size_cell` windows (or external rows, or nothing) concatenated
/// with normalized spatial coordinates; tissue nodes are treated
/// analogously with `patch_size_tissue` and per-region feature averaging.
pub fn assemble_hact(
    image: &RgbImage,
    nuclei: &NucleiSet,
    map: &SuperpixelMap,
    spec: &FeatureSpec,
    k: usize,
    d_min: f64,
) -> Result<HactGraph> {
    spec.validate()?;
    let dims = image.dims();
    let cell_masks: Vec<Vec<(usize, usize)>> = (0..nuclei.centroids.len())
        .map(|i| cell_mask(nuclei, i, spec.patch_size_cell, dims))
        .collect();
    let cell_morph =
        morphological_rows(image, &cell_masks, &spec.mode, spec.external_cell.as_deref())?;

    let region_centroids = map.centroids();
    let region_masks: Vec<Vec<(usize, usize)>> = map
        .region_pixels()
        .into_iter()
        .enumerate()
        .map(|(r, pixels)| {
            let window: std::collections::HashSet<(usize, usize)> =
                window_pixels(region_centroids[r], spec.patch_size_tissue, dims)
                    .into_iter()
                    .collect();
            let clipped: Vec<(usize, usize)> =
                pixels.iter().copied().filter(|p| window.contains(p)).collect();
            if clipped.is_empty() {
                pixels
            } else {
                clipped
            }
        })
        .collect();
    let tissue_morph = match morphological_rows(
        image,
        &region_masks,
        &spec.mode,
        spec.external_tissue.as_deref(),
    )? {
        // Every merged region is its own single constituent here; the
        // image pipeline passes real superpixel memberships instead.
        Some(rows) => {
            let identity: Vec<Vec<usize>> = (0..rows.len()).map(|r| vec![r]).collect();
            Some(region_feature_average(&rows, &identity)?)
        }
        None => None,
    };

    assemble_from_parts(image, nuclei, map, cell_morph, tissue_morph, k, d_min)
}

/// Shared assembler over precomputed morphological rows.
pub(crate) fn assemble_from_parts(
    image: &RgbImage,
    nuclei: &NucleiSet,
    map: &SuperpixelMap,
    cell_morph: Option<Vec<Vec<f64>>>,
    tissue_morph: Option<Vec<Vec<f64>>>,
    k: usize,
    d_min: f64,
) -> Result<HactGraph> {
    let dims = image.dims();
    if let Some(m) = &cell_morph {
        if m.len() != nuclei.centroids.len() {
            return Err(Error::invalid(format!(
                "{} cell feature rows for {} nuclei",
                m.len(),
                nuclei.centroids.len()
            )));
        }
    }
    if let Some(m) = &tissue_morph {
        if m.len() != map.region_count {
            return Err(Error::invalid(format!(
                "{} tissue feature rows for {} regions",
                m.len(),
                map.region_count
            )));
        }
    }
    let cell = EntityGraph::new(
        GraphKind::Cell,
        build_cell_topology(&nuclei.centroids, k, d_min)?,
        concat_features(cell_morph.as_ref(), &nuclei.centroids, dims),
        nuclei.centroids.clone(),
    )?;
    let region_centroids = map.centroids();
    let tissue = EntityGraph::new(
        GraphKind::Tissue,
        build_tissue_topology(map),
        concat_features(tissue_morph.as_ref(), &region_centroids, dims),
        region_centroids,
    )?;
    let assignment = build_assignment(nuclei, map)?;
    let g = HactGraph { cell, tissue, assignment };
    g.validate()?;
    Ok(g)
}

/// End-to-end graph construction parameters for [`build_graph_from_image`].
#[derive(Clone, Debug)]
pub struct GraphBuildParams {
    pub k: usize,
    pub d_min: f64,
    pub n_segments: usize,
    pub compactness: f64,
    pub slic_iterations: usize,
    pub merge_threshold: f64,
    pub features: FeatureSpec,
}

impl Default for GraphBuildParams {
    fn default() -> Self {
        GraphBuildParams {
            k: DEFAULT_K,
            d_min: DEFAULT_D_MIN,
            n_segments: 64,
            compactness: crate::entity::DEFAULT_COMPACTNESS,
            slic_iterations: crate::entity::DEFAULT_SLIC_ITERATIONS,
            merge_threshold: crate::entity::DEFAULT_MERGE_THRESHOLD,
            features: FeatureSpec::default(),
        }
    }
}

/// Full image-to-graph pipeline: superpixel oversegmentation, color-driven
/// region merging, per-superpixel features pooled onto merged regions, and
/// hierarchical assembly.
pub fn build_graph_from_image(
    image: &RgbImage,
    nuclei: &NucleiSet,
    params: &GraphBuildParams,
) -> Result<HactGraph> {
    params.features.validate()?;
    let dims = image.dims();
    let over = slic_superpixels(image, params.n_segments, params.compactness, params.slic_iterations)?;
    let merged = crate::entity::merge_superpixels(image, &over, params.merge_threshold)?;

    let cell_masks: Vec<Vec<(usize, usize)>> = (0..nuclei.centroids.len())
        .map(|i| cell_mask(nuclei, i, params.features.patch_size_cell, dims))
        .collect();
    let cell_morph =
        morphological_rows(image, &cell_masks, &params.features.mode, params.features.external_cell.as_deref())?;

    let tissue_morph = match params.features.mode {
        FeatureMode::None => None,
        FeatureMode::External => {
            let path = params
                .features
                .external_tissue
                .as_deref()
                .ok_or_else(|| Error::invalid("external feature mode without a tissue feature file"))?;
            Some(load_feature_csv(path, merged.region_count)?)
        }
        FeatureMode::Handcrafted => {
            // Hand-crafted descriptors per oversegmented superpixel,
            // averaged over each merged region's constituents.
            let sp_centroids = over.centroids();
            let sp_masks: Vec<Vec<(usize, usize)>> = over
                .region_pixels()
                .into_iter()
                .enumerate()
                .map(|(r, pixels)| {
                    let window: std::collections::HashSet<(usize, usize)> = window_pixels(
                        sp_centroids[r],
                        params.features.patch_size_tissue,
                        dims,
                    )
                    .into_iter()
                    .collect();
                    let clipped: Vec<(usize, usize)> =
                        pixels.iter().copied().filter(|p| window.contains(p)).collect();
                    if clipped.is_empty() {
                        pixels
                    } else {
                        clipped
                    }
                })
                .collect();
            let mut rows = Vec::with_capacity(sp_masks.len());
            for mask in &sp_masks {
                rows.push(handcrafted_features(image, mask)?.to_vec());
            }
            let membership = region_membership(&over, &merged)?;
            Some(region_feature_average(&rows, &membership)?)
        }
    };

    assemble_from_parts(image, nuclei, &merged, cell_morph, tissue_morph, params.k, params.d_min)
}

// --- JSON interchange -----------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LevelJson {
    centroids: Vec<(f64, f64)>,
    edges: Vec<(usize, usize)>,
    features: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct HactJson {
    cell: LevelJson,
    tissue: LevelJson,
    /// Row-major bits of the |cell| x |tissue| assignment matrix.
    assignment: Vec<u8>,
}

impl HactGraph {
    pub fn to_json(&self) -> Result<String> {
        let n_t = self.tissue.node_count;
        let mut bits = vec![0u8; self.cell.node_count * n_t];
        for (i, &r) in self.assignment.iter().enumerate() {
            bits[i * n_t + r] = 1;
        }
        let doc = HactJson {
            cell: LevelJson {
                centroids: self.cell.centroids.clone(),
                edges: self.cell.edges.clone(),
                features: self.cell.features.clone(),
            },
            tissue: LevelJson {
                centroids: self.tissue.centroids.clone(),
                edges: self.tissue.edges.clone(),
                features: self.tissue.features.clone(),
            },
            assignment: bits,
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: HactJson = serde_json::from_str(text)?;
        let cell = EntityGraph::new(GraphKind::Cell, doc.cell.edges, doc.cell.features, doc.cell.centroids)?;
        let tissue =
            EntityGraph::new(GraphKind::Tissue, doc.tissue.edges, doc.tissue.features, doc.tissue.centroids)?;
        let n_t = tissue.node_count;
        if doc.assignment.len() != cell.node_count * n_t {
            return Err(Error::shape(format!(
                "assignment holds {} bits for {}x{}",
                doc.assignment.len(),
                cell.node_count,
                n_t
            )));
        }
        let mut assignment = Vec::with_capacity(cell.node_count);
        for i in 0..cell.node_count {
            let row = &doc.assignment[i * n_t..(i + 1) * n_t];
            let ones: Vec<usize> =
                row.iter().enumerate().filter(|(_, &b)| b != 0).map(|(j, _)| j).collect();
            if ones.len() != 1 {
                return Err(Error::invalid(format!(
                    "assignment row {i} has {} set bits, expected exactly 1",
                    ones.len()
                )));
            }
            assignment.push(ones[0]);
        }
        let g = HactGraph { cell, tissue, assignment };
        g.validate()?;
        Ok(g)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::HANDCRAFTED_DIM;

    #[test]
    fn single_node_has_no_edges() {
        assert!(build_cell_topology(&[(5.0, 5.0)], 3, 10.0).unwrap().is_empty());
    }

    #[test]
    fn knn_threshold_prunes_far_nodes() {
        let pts = [(0.0, 0.0), (10.0, 0.0), (1000.0, 0.0)];
        let edges = build_cell_topology(&pts, 2, 50.0).unwrap();
        assert_eq!(edges, vec![(0, 1)]);
    }

    #[test]
    fn knn_k_larger_than_population() {
        let pts = [(0.0, 0.0), (10.0, 0.0)];
        let edges = build_cell_topology(&pts, 5, 50.0).unwrap();
        assert_eq!(edges, vec![(0, 1)]);
    }

    #[test]
    fn duplicate_coordinates_connect() {
        let pts = [(3.0, 3.0), (3.0, 3.0)];
        let edges = build_cell_topology(&pts, 1, 1.0).unwrap();
        assert_eq!(edges, vec![(0, 1)]);
    }

    /// Brute-force filter over all ordered pairs: u qualifies for v when
    /// its (distance, id) rank is within k and the distance beats d_min.
    pub(crate) fn knn_oracle(pts: &[(f64, f64)], k: usize, d_min: f64) -> Vec<(usize, usize)> {
        let n = pts.len();
        let mut edges = std::collections::BTreeSet::new();
        for v in 0..n {
            let mut by_rank: Vec<(f64, usize)> = (0..n)
                .filter(|&u| u != v)
                .map(|u| {
                    let d = ((pts[u].0 - pts[v].0).powi(2) + (pts[u].1 - pts[v].1).powi(2)).sqrt();
                    (d, u)
                })
                .collect();
            by_rank.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for &(d, u) in by_rank.iter().take(k) {
                if d < d_min {
                    edges.insert((v.min(u), v.max(u)));
                }
            }
        }
        edges.into_iter().collect()
    }

    #[test]
    fn knn_matches_brute_force_on_random_sets() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        for case in 0..100 {
            let n = rng.gen_range(1..=200);
            let pts: Vec<(f64, f64)> =
                (0..n).map(|_| (rng.gen_range(0.0..300.0), rng.gen_range(0.0..300.0))).collect();
            let k = rng.gen_range(1..=8);
            let d_min = rng.gen_range(5.0..150.0);
            assert_eq!(
                build_cell_topology(&pts, k, d_min).unwrap(),
                knn_oracle(&pts, k, d_min),
                "case {case} n={n} k={k} d_min={d_min}"
            );
        }
    }

    fn map_from(labels: &[u32], w: usize, h: usize) -> SuperpixelMap {
        let count = 1 + *labels.iter().max().unwrap() as usize;
        SuperpixelMap::new(w, h, labels.to_vec(), count).unwrap()
    }

    #[test]
    fn rag_simple_cases() {
        assert_eq!(build_tissue_topology(&map_from(&[0, 1], 2, 1)), vec![(0, 1)]);
        assert_eq!(build_tissue_topology(&map_from(&[0, 0, 0, 0], 2, 2)), vec![]);
        let ring = map_from(&[0, 0, 0, 0, 1, 0, 0, 0, 0], 3, 3);
        assert_eq!(build_tissue_topology(&ring), vec![(0, 1)]);
    }

    /// Exhaustive pixel-pair scan over the whole raster.
    pub(crate) fn rag_oracle(map: &SuperpixelMap) -> Vec<(usize, usize)> {
        let mut edges = std::collections::BTreeSet::new();
        for ay in 0..map.height {
            for ax in 0..map.width {
                for by in 0..map.height {
                    for bx in 0..map.width {
                        let manhattan =
                            (ax as i64 - bx as i64).abs() + (ay as i64 - by as i64).abs();
                        if manhattan == 1 {
                            let (a, b) = (map.label(ax, ay) as usize, map.label(bx, by) as usize);
                            if a != b {
                                edges.insert((a.min(b), a.max(b)));
                            }
                        }
                    }
                }
            }
        }
        edges.into_iter().collect()
    }

    #[test]
    fn rag_matches_pixel_scan_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let (w, h) = (rng.gen_range(2..32), rng.gen_range(2..32));
            let regions = rng.gen_range(2..8u32);
            // Random voronoi-ish labels, then compress ids to contiguous.
            let seeds: Vec<(f64, f64)> = (0..regions)
                .map(|_| (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64)))
                .collect();
            let mut labels = vec![0u32; w * h];
            for y in 0..h {
                for x in 0..w {
                    let mut best = (f64::INFINITY, 0u32);
                    for (i, s) in seeds.iter().enumerate() {
                        let d = (s.0 - x as f64).powi(2) + (s.1 - y as f64).powi(2);
                        if d < best.0 {
                            best = (d, i as u32);
                        }
                    }
                    labels[y * w + x] = best.1;
                }
            }
            let mut renumber = std::collections::BTreeMap::new();
            let mut next = 0u32;
            for l in labels.iter_mut() {
                let id = *renumber.entry(*l).or_insert_with(|| {
                    let i = next;
                    next += 1;
                    i
                });
                *l = id;
            }
            let map = SuperpixelMap::new(w, h, labels, next as usize).unwrap();
            assert_eq!(build_tissue_topology(&map), rag_oracle(&map));
        }
    }

    #[test]
    fn assignment_by_centroid_containment() {
        let map = map_from(&[0, 0, 1, 1], 2, 2);
        let nuclei = NucleiSet { centroids: vec![(1.2, 1.7)], instance_labels: None };
        assert_eq!(build_assignment(&nuclei, &map).unwrap(), vec![1]);
    }

    #[test]
    fn assignment_prefers_max_overlap() {
        use crate::entity::InstanceMap;
        // 5x1 raster: regions [0,0,0,1,1]; nucleus covers pixels 1..=3 with
        // 2 pixels in region 0 and 1 in region 1.
        let map = map_from(&[0, 0, 0, 1, 1], 5, 1);
        let inst = InstanceMap { width: 5, height: 1, labels: vec![0, 1, 1, 1, 0] };
        let nuclei = NucleiSet {
            centroids: vec![(3.0, 0.0)], // centroid sits in region 1
            instance_labels: Some(inst),
        };
        assert_eq!(build_assignment(&nuclei, &map).unwrap(), vec![0]);
    }

    #[test]
    fn assignment_rows_are_one_hot_by_construction() {
        let map = map_from(&[0, 1, 2, 0, 1, 2], 3, 2);
        let nuclei = NucleiSet {
            centroids: vec![(0.0, 0.0), (1.0, 1.0), (2.0, 0.0)],
            instance_labels: None,
        };
        let a = build_assignment(&nuclei, &map).unwrap();
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|&r| r < 3));
    }

    fn tiny_image() -> RgbImage {
        let mut img = RgbImage::filled(16, 16, [230, 230, 230]).unwrap();
        for y in 4..8 {
            for x in 4..8 {
                img.set(x, y, [60, 50, 120]);
            }
        }
        img
    }

    #[test]
    fn assemble_spatial_only_has_dim_two() {
        let img = tiny_image();
        let nuclei = NucleiSet { centroids: vec![(5.0, 5.0), (10.0, 10.0)], instance_labels: None };
        let map = map_from(&vec![0u32; 256], 16, 16);
        let spec = FeatureSpec { mode: FeatureMode::None, ..FeatureSpec::default() };
        let g = assemble_hact(&img, &nuclei, &map, &spec, 2, 100.0).unwrap();
        assert_eq!(g.cell.feature_dim(), 2);
        assert_eq!(g.tissue.feature_dim(), 2);
    }

    #[test]
    fn assemble_handcrafted_dims() {
        let img = tiny_image();
        let nuclei = NucleiSet { centroids: vec![(5.0, 5.0)], instance_labels: None };
        let map = map_from(&vec![0u32; 256], 16, 16);
        let spec = FeatureSpec { mode: FeatureMode::Handcrafted, ..FeatureSpec::default() };
        let g = assemble_hact(&img, &nuclei, &map, &spec, 2, 100.0).unwrap();
        assert_eq!(g.cell.feature_dim(), HANDCRAFTED_DIM + 2);
        assert_eq!(g.tissue.feature_dim(), HANDCRAFTED_DIM + 2);
    }

    #[test]
    fn assemble_degenerate_no_nuclei() {
        let img = tiny_image();
        let nuclei = NucleiSet { centroids: vec![], instance_labels: None };
        let map = map_from(&vec![0u32; 256], 16, 16);
        let spec = FeatureSpec { mode: FeatureMode::None, ..FeatureSpec::default() };
        let g = assemble_hact(&img, &nuclei, &map, &spec, 2, 100.0).unwrap();
        assert_eq!(g.cell.node_count, 0);
        assert!(g.assignment.is_empty());
        assert_eq!(g.tissue.node_count, 1);
    }

    #[test]
    fn json_round_trip_restores_equal_graph() {
        let img = tiny_image();
        let nuclei = NucleiSet { centroids: vec![(5.0, 5.0), (10.0, 10.0)], instance_labels: None };
        let labels: Vec<u32> = (0..256).map(|p| if p % 16 < 8 { 0 } else { 1 }).collect();
        let map = map_from(&labels, 16, 16);
        let spec = FeatureSpec { mode: FeatureMode::Handcrafted, ..FeatureSpec::default() };
        let g = assemble_hact(&img, &nuclei, &map, &spec, 2, 100.0).unwrap();
        let back = HactGraph::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn external_row_mismatch_names_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cells.csv");
        std::fs::write(&path, "1.0,2.0\n").unwrap();
        let img = tiny_image();
        let nuclei = NucleiSet { centroids: vec![(5.0, 5.0), (10.0, 10.0)], instance_labels: None };
        let map = map_from(&vec![0u32; 256], 16, 16);
        let spec = FeatureSpec {
            mode: FeatureMode::External,
            external_cell: Some(path.clone()),
            external_tissue: Some(path),
            ..FeatureSpec::default()
        };
        let err = assemble_hact(&img, &nuclei, &map, &spec, 2, 100.0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('1') && msg.contains('2'), "message should name counts: {msg}");
    }

    #[test]
    fn image_pipeline_produces_valid_graph() {
        let mut img = RgbImage::filled(40, 40, [235, 225, 235]).unwrap();
        for (cx, cy) in [(8usize, 8usize), (20, 24), (30, 12)] {
            for y in cy - 2..cy + 2 {
                for x in cx - 2..cx + 2 {
                    img.set(x, y, [70, 40, 110]);
                }
            }
        }
        let nuclei = crate::entity::detect_nuclei_blob(&img, 0.25, 4, 100).unwrap();
        assert_eq!(nuclei.centroids.len(), 3);
        let params = GraphBuildParams { n_segments: 9, ..GraphBuildParams::default() };
        let g = build_graph_from_image(&img, &nuclei, &params).unwrap();
        g.validate().unwrap();
        assert_eq!(g.cell.node_count, 3);
        assert!(g.tissue.node_count >= 1);
        assert_eq!(g.cell.feature_dim(), HANDCRAFTED_DIM + 2);
        assert_eq!(g.tissue.feature_dim(), HANDCRAFTED_DIM + 2);
    }
}
