//! Node feature extraction: hand-crafted texture/shape descriptors and
//! normalized spatial coordinates.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::image::RgbImage;

/// Length of the hand-crafted descriptor returned by
/// [`handcrafted_features`].
pub const HANDCRAFTED_DIM: usize = 16;
/// Gray levels used for co-occurrence and entropy quantization.
pub const GLCM_LEVELS: usize = 32;
/// Co-occurrence offsets `(dx, dy)`; counts are symmetrized and features
/// averaged over the offsets that have at least one pixel pair.
pub const GLCM_OFFSETS: [(i64, i64); 4] = [(1, 0), (0, 1), (1, 1), (1, -1)];

/// How node features are initialized when assembling graphs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FeatureMode {
    /// Spatial coordinates only.
    None,
    /// Hand-crafted texture + shape descriptors.
    Handcrafted,
    /// Rows read from externally produced CSV files.
    External,
}

/// Feature configuration for graph assembly.
#[derive(Clone, Debug)]
pub struct FeatureSpec {
    pub mode: FeatureMode,
    pub patch_size_cell: usize,
    pub patch_size_tissue: usize,
    pub external_cell: Option<PathBuf>,
    pub external_tissue: Option<PathBuf>,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            mode: FeatureMode::Handcrafted,
            patch_size_cell: 72,
            patch_size_tissue: 144,
            external_cell: None,
            external_tissue: None,
        }
    }
}

impl FeatureSpec {
    pub fn validate(&self) -> Result<()> {
        let have_paths = self.external_cell.is_some() || self.external_tissue.is_some();
        match self.mode {
            FeatureMode::External if self.external_cell.is_none() => {
                Err(Error::invalid("external feature mode requires a cell feature file"))
            }
            FeatureMode::External => Ok(()),
            _ if have_paths => {
                Err(Error::invalid("external feature paths given but mode is not external"))
            }
            _ => Ok(()),
        }
    }
}

/// Normalized spatial coordinates `(x/w, y/h)`, each in `[0, 1]`.
pub fn spatial_features(centroid: (f64, f64), image_dims: (usize, usize)) -> [f64; 2] {
    [centroid.0 / image_dims.0 as f64, centroid.1 / image_dims.1 as f64]
}

/// Mean of the constituent feature vectors per merged region.
pub fn region_feature_average(
    superpixel_features: &[Vec<f64>],
    membership: &[Vec<usize>],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(membership.len());
    for (region, members) in membership.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::invalid(format!("region {region} has no constituents")));
        }
        let dim = superpixel_features
            .get(members[0])
            .ok_or_else(|| Error::invalid(format!("constituent {} out of range", members[0])))?
            .len();
        let mut acc = vec![0.0; dim];
        for &m in members {
            let f = superpixel_features
                .get(m)
                .ok_or_else(|| Error::invalid(format!("constituent {m} out of range")))?;
            if f.len() != dim {
                return Err(Error::shape(format!(
                    "constituent {m} has {} features, expected {dim}",
                    f.len()
                )));
            }
            for (a, v) in acc.iter_mut().zip(f) {
                *a += v;
            }
        }
        let n = members.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        out.push(acc);
    }
    Ok(out)
}

/// Hand-crafted 16-dim descriptor of one entity instance, in fixed order:
///
/// texture (over the mask's bounding box, grayscale):
///   0 mean foreground-background intensity difference
///   1 foreground intensity standard deviation
///   2 foreground intensity skewness
///   3 mean local entropy (3x3 window, 32-level, bits)
///   4 GLCM dissimilarity  5 GLCM homogeneity
///   6 GLCM energy         7 GLCM angular second moment
/// shape (over the mask):
///   8 eccentricity  9 area  10 major-axis length  11 minor-axis length
///   12 perimeter    13 solidity  14 orientation
/// plus:
///   15 mask pixel count
pub fn handcrafted_features(image: &RgbImage, instance_mask: &[(usize, usize)]) -> Result<[f64; 16]> {
    if instance_mask.is_empty() {
        return Err(Error::invalid("instance mask must be nonempty"));
    }
    let (w, h) = image.dims();
    for &(x, y) in instance_mask {
        if x >= w || y >= h {
            return Err(Error::invalid(format!("mask pixel ({x},{y}) outside {w}x{h} image")));
        }
    }
    let gray = image.to_gray();

    // Bounding box = the texture patch.
    let x0 = instance_mask.iter().map(|p| p.0).min().unwrap();
    let x1 = instance_mask.iter().map(|p| p.0).max().unwrap();
    let y0 = instance_mask.iter().map(|p| p.1).min().unwrap();
    let y1 = instance_mask.iter().map(|p| p.1).max().unwrap();
    let (bw, bh) = (x1 - x0 + 1, y1 - y0 + 1);

    let mut in_mask = vec![false; bw * bh];
    for &(x, y) in instance_mask {
        in_mask[(y - y0) * bw + (x - x0)] = true;
    }
    let patch_gray =
        |bx: usize, by: usize| -> f64 { gray[(by + y0) * w + (bx + x0)] };
    let quantize = |g: f64| -> usize { ((g / 256.0 * GLCM_LEVELS as f64) as usize).min(GLCM_LEVELS - 1) };

    // Intensity statistics over the foreground.
    let fg: Vec<f64> =
        (0..bw * bh).filter(|&p| in_mask[p]).map(|p| patch_gray(p % bw, p / bw)).collect();
    let bg: Vec<f64> =
        (0..bw * bh).filter(|&p| !in_mask[p]).map(|p| patch_gray(p % bw, p / bw)).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let fg_mean = mean(&fg);
    let fg_bg_diff = if bg.is_empty() { 0.0 } else { fg_mean - mean(&bg) };
    let var = fg.iter().map(|v| (v - fg_mean).powi(2)).sum::<f64>() / fg.len() as f64;
    let std = var.sqrt();
    let skewness = if std < 1e-12 {
        0.0
    } else {
        fg.iter().map(|v| ((v - fg_mean) / std).powi(3)).sum::<f64>() / fg.len() as f64
    };

    // Mean local entropy: Shannon entropy (bits) of the quantized 3x3
    // neighborhood around each foreground pixel, clipped to the patch.
    let mut entropy_sum = 0.0;
    for &(x, y) in instance_mask {
        let (bx, by) = (x - x0, y - y0);
        let mut hist = [0usize; GLCM_LEVELS];
        let mut total = 0usize;
        for ny in by.saturating_sub(1)..=(by + 1).min(bh - 1) {
            for nx in bx.saturating_sub(1)..=(bx + 1).min(bw - 1) {
                hist[quantize(patch_gray(nx, ny))] += 1;
                total += 1;
            }
        }
        let mut e = 0.0;
        for &c in &hist {
            if c > 0 {
                let p = c as f64 / total as f64;
                e -= p * p.log2();
            }
        }
        entropy_sum += e;
    }
    let mean_entropy = entropy_sum / instance_mask.len() as f64;

    let glcm = glcm_features(bw, bh, &in_mask, |bx, by| quantize(patch_gray(bx, by)));

    // Shape statistics from centroid-centered moments of the mask pixels.
    let n = instance_mask.len() as f64;
    let cx = instance_mask.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let cy = instance_mask.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let (mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0);
    for &(x, y) in instance_mask {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        mxx += dx * dx;
        myy += dy * dy;
        mxy += dx * dy;
    }
    mxx /= n;
    myy /= n;
    mxy /= n;
    let tr = mxx + myy;
    let det = mxx * myy - mxy * mxy;
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let (l1, l2) = (tr / 2.0 + disc, (tr / 2.0 - disc).max(0.0));
    let eccentricity = if l1 > 1e-12 { (1.0 - l2 / l1).max(0.0).sqrt() } else { 0.0 };
    let major_axis = 4.0 * l1.sqrt();
    let minor_axis = 4.0 * l2.sqrt();
    let orientation =
        if mxy.abs() < 1e-12 && (mxx - myy).abs() < 1e-12 { 0.0 } else { 0.5 * (2.0 * mxy).atan2(mxx - myy) };

    let perimeter = mask_perimeter(bw, bh, &in_mask);
    let hull = convex_hull_area(instance_mask);
    let solidity = if hull > 1e-12 { n / hull } else { 1.0 };

    Ok([
        fg_bg_diff,
        std,
        skewness,
        mean_entropy,
        glcm[0],
        glcm[1],
        glcm[2],
        glcm[3],
        eccentricity,
        n,
        major_axis,
        minor_axis,
        perimeter,
        solidity,
        orientation,
        n,
    ])
}

/// Symmetric, normalized co-occurrence features over pixel pairs that are
/// both inside the mask: `[dissimilarity, homogeneity, energy, asm]`,
/// averaged over the offsets with at least one pair (zeros if none).
fn glcm_features(
    bw: usize,
    bh: usize,
    in_mask: &[bool],
    level: impl Fn(usize, usize) -> usize,
) -> [f64; 4] {
    let mut feature_sum = [0.0; 4];
    let mut used = 0usize;
    for &(dx, dy) in &GLCM_OFFSETS {
        let mut counts = vec![0.0f64; GLCM_LEVELS * GLCM_LEVELS];
        let mut total = 0.0;
        for y in 0..bh as i64 {
            for x in 0..bw as i64 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= bw as i64 || ny >= bh as i64 {
                    continue;
                }
                let (p, q) = ((y as usize) * bw + x as usize, (ny as usize) * bw + nx as usize);
                if in_mask[p] && in_mask[q] {
                    let (a, b) = (level(x as usize, y as usize), level(nx as usize, ny as usize));
                    counts[a * GLCM_LEVELS + b] += 1.0;
                    counts[b * GLCM_LEVELS + a] += 1.0;
                    total += 2.0;
                }
            }
        }
        if total == 0.0 {
            continue;
        }
        used += 1;
        let (mut dissim, mut homog, mut asm) = (0.0, 0.0, 0.0);
        for i in 0..GLCM_LEVELS {
            for j in 0..GLCM_LEVELS {
                let p = counts[i * GLCM_LEVELS + j] / total;
                if p == 0.0 {
                    continue;
                }
                let d = (i as f64 - j as f64).abs();
                dissim += p * d;
                homog += p / (1.0 + d * d);
                asm += p * p;
            }
        }
        feature_sum[0] += dissim;
        feature_sum[1] += homog;
        feature_sum[2] += asm.sqrt();
        feature_sum[3] += asm;
    }
    if used == 0 {
        return [0.0; 4];
    }
    feature_sum.map(|f| f / used as f64)
}

/// Perimeter as the length of the closed boundary walk through pixel
/// centers (Moore tracing), summed over the mask's 4-connected components.
/// A single pixel has perimeter 0.
fn mask_perimeter(bw: usize, bh: usize, in_mask: &[bool]) -> f64 {
    let idx = |x: usize, y: usize| y * bw + x;
    let inside = |x: i64, y: i64| {
        x >= 0 && y >= 0 && x < bw as i64 && y < bh as i64 && in_mask[idx(x as usize, y as usize)]
    };

    // Component labeling (4-connectivity) restricted to the mask.
    let mut comp = vec![usize::MAX; bw * bh];
    let mut n_comp = 0;
    for start in 0..bw * bh {
        if !in_mask[start] || comp[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        comp[start] = n_comp;
        while let Some(p) = stack.pop() {
            let (x, y) = (p % bw, p / bw);
            let mut push = |q: usize| {
                if in_mask[q] && comp[q] == usize::MAX {
                    comp[q] = n_comp;
                    stack.push(q);
                }
            };
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < bw {
                push(p + 1);
            }
            if y > 0 {
                push(p - bw);
            }
            if y + 1 < bh {
                push(p + bw);
            }
        }
        n_comp += 1;
    }

    // Moore neighborhood in clockwise order starting from west.
    let moore: [(i64, i64); 8] =
        [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)];

    let mut total = 0.0;
    for c in 0..n_comp {
        // Start pixel: smallest scan-order pixel of the component.
        let start = (0..bw * bh).find(|&p| comp[p] == c).unwrap();
        let (sx, sy) = ((start % bw) as i64, (start / bw) as i64);
        // Single-pixel component: zero perimeter.
        if !moore.iter().any(|&(dx, dy)| inside(sx + dx, sy + dy)) {
            continue;
        }
        // Moore boundary tracing with Jacob's stopping criterion.
        let mut boundary: Vec<(i64, i64)> = Vec::new();
        let (px, py) = (sx, sy);
        // Backtrack starts west of the start pixel (outside, since start is
        // the scan-order minimum).
        let mut back = 0usize; // direction index pointing at the backtrack
        let first_dir;
        {
            // Find the first neighbor clockwise from the backtrack.
            let mut d = back;
            loop {
                d = (d + 1) % 8;
                let (dx, dy) = moore[d];
                if inside(px + dx, py + dy) {
                    break;
                }
                if d == back {
                    break;
                }
            }
            first_dir = d;
        }
        boundary.push((px, py));
        let mut dir = first_dir;
        let (fx, fy) = (px + moore[dir].0, py + moore[dir].1);
        let mut guard = 0usize;
        let limit = 8 * bw * bh + 16;
        let (mut cx, mut cy) = (fx, fy);
        // Walk until we re-enter the start pixel moving in the initial
        // direction again.
        loop {
            boundary.push((cx, cy));
            // Backtrack = direction opposite of the arrival move.
            back = (dir + 4) % 8;
            let mut d = back;
            loop {
                d = (d + 1) % 8;
                let (dx, dy) = moore[d];
                if inside(cx + dx, cy + dy) {
                    break;
                }
            }
            dir = d;
            cx += moore[dir].0;
            cy += moore[dir].1;
            guard += 1;
            if (cx, cy) == (fx, fy) && boundary.last() == Some(&(px, py)) {
                break;
            }
            if guard > limit {
                break;
            }
        }
        // Sum Euclidean steps along the closed boundary polygon.
        let mut perim = 0.0;
        for w2 in boundary.windows(2) {
            let (ax, ay) = w2[0];
            let (bx2, by2) = w2[1];
            perim += (((ax - bx2).pow(2) + (ay - by2).pow(2)) as f64).sqrt();
        }
        // Close the loop back to the first boundary pixel.
        if let (Some(&(lx, ly)), Some(&(bx2, by2))) = (boundary.last(), boundary.first()) {
            perim += (((lx - bx2).pow(2) + (ly - by2).pow(2)) as f64).sqrt();
        }
        total += perim;
    }
    total
}

/// Area of the convex hull over the pixel *squares* (each pixel contributes
/// its four corners), so a filled rectangle has hull area equal to its
/// pixel count.
fn convex_hull_area(mask: &[(usize, usize)]) -> f64 {
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(mask.len() * 4);
    for &(x, y) in mask {
        let (x, y) = (x as f64, y as f64);
        pts.push((x - 0.5, y - 0.5));
        pts.push((x + 0.5, y - 0.5));
        pts.push((x - 0.5, y + 0.5));
        pts.push((x + 0.5, y + 0.5));
    }
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() < 3 {
        return if pts.is_empty() { 0.0 } else { 1.0 };
    }
    // Andrew monotone chain.
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev() {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    // Shoelace.
    let mut area = 0.0;
    for i in 0..hull.len() {
        let (x1, y1) = hull[i];
        let (x2, y2) = hull[(i + 1) % hull.len()];
        area += x1 * y2 - x2 * y1;
    }
    area.abs() / 2.0
}

/// Square window of pixels centered on `centroid`, clipped to the image.
pub fn window_pixels(
    centroid: (f64, f64),
    patch_size: usize,
    dims: (usize, usize),
) -> Vec<(usize, usize)> {
    let (w, h) = dims;
    let half = patch_size as f64 / 2.0;
    let span = |c: f64, limit: usize| -> (usize, usize) {
        let lo_raw = (c - half).ceil() as i64;
        let hi_raw = lo_raw + patch_size as i64 - 1;
        let lo = lo_raw.clamp(0, limit as i64 - 1) as usize;
        let hi = hi_raw.clamp(0, limit as i64 - 1) as usize;
        (lo, hi)
    };
    let (x_lo, x_hi) = span(centroid.0, w);
    let (y_lo, y_hi) = span(centroid.1, h);
    let mut out = Vec::new();
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            out.push((x, y));
        }
    }
    out
}
