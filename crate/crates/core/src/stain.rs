//! Reference-free two-stain normalization of H&E-style RGB images.
//!
//! Pixel color is modeled as a nonnegative linear combination of two stain
//! vectors in optical-density space. The basis is estimated per image from
//! the singular plane of the foreground OD cloud, concentrations are solved
//! per pixel and rescaled so their 99th percentiles match a target basis.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;

/// OD threshold below which a pixel counts as background.
pub const DEFAULT_BACKGROUND_THRESHOLD: f64 = 0.15;
/// Percentile used for the extreme angles of the projected OD cloud.
pub const DEFAULT_ANGLE_PERCENTILE: f64 = 1.0;
/// Percentile used to normalize per-stain concentrations.
pub const CONCENTRATION_PERCENTILE: f64 = 99.0;

/// Two stain vectors (unit columns of a 3x2 matrix in OD space) plus the
/// per-stain concentration scale of the image they were estimated from.
/// Column 0 is hematoxylin, column 1 eosin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StainBasis {
    /// Row-major 3x2: `stain_vectors[channel][stain]`.
    pub stain_vectors: [[f64; 2]; 3],
    pub max_concentrations: [f64; 2],
}

impl StainBasis {
    pub fn column(&self, stain: usize) -> [f64; 3] {
        [
            self.stain_vectors[0][stain],
            self.stain_vectors[1][stain],
            self.stain_vectors[2][stain],
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for s in 0..2 {
            let c = self.column(s);
            let norm = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!(
                    "stain column {s} has norm {norm}, expected unit length"
                )));
            }
            if c.iter().any(|&v| v < 0.0) {
                return Err(Error::invalid(format!("stain column {s} has negative entries")));
            }
            if self.max_concentrations[s] <= 0.0 {
                return Err(Error::invalid(format!(
                    "max concentration for stain {s} must be positive"
                )));
            }
        }
        Ok(())
    }

    /// Classic H&E reference basis (Ruifrok & Johnston absorption vectors),
    /// with unit concentration scales.
    pub fn he_reference() -> Self {
        fn unit(v: [f64; 3]) -> [f64; 3] {
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            [v[0] / n, v[1] / n, v[2] / n]
        }
        let h = unit([0.65, 0.70, 0.29]);
        let e = unit([0.07, 0.99, 0.11]);
        StainBasis {
            stain_vectors: [[h[0], e[0]], [h[1], e[1]], [h[2], e[2]]],
            max_concentrations: [1.0, 1.0],
        }
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let basis: StainBasis = serde_json::from_str(&text)?;
        basis.validate()?;
        Ok(basis)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Optical density of one 8-bit channel: `-log10((byte + 1) / 256)`.
pub fn optical_density(byte: u8) -> f64 {
    -((byte as f64 + 1.0) / 256.0).log10()
}

fn od_of_pixel(rgb: [u8; 3]) -> [f64; 3] {
    [optical_density(rgb[0]), optical_density(rgb[1]), optical_density(rgb[2])]
}

/// Per-pixel optical density and foreground mask.
///
/// A pixel is foreground iff all three OD channels exceed
/// `background_threshold`; the returned matrix holds only foreground rows in
/// scan order. Errors if no pixel qualifies.
pub fn od_transform(
    image: &RgbImage,
    background_threshold: f64,
) -> Result<(Vec<[f64; 3]>, Vec<bool>)> {
    if background_threshold <= 0.0 {
        return Err(Error::invalid("background threshold must be positive"));
    }
    let mut rows = Vec::new();
    let mut mask = Vec::with_capacity(image.pixel_count());
    for p in image.data().chunks_exact(3) {
        let od = od_of_pixel([p[0], p[1], p[2]]);
        let fg = od.iter().all(|&v| v > background_threshold);
        mask.push(fg);
        if fg {
            rows.push(od);
        }
    }
    if rows.is_empty() {
        return Err(Error::AllBackground { threshold: background_threshold });
    }
    Ok((rows, mask))
}

/// Linear-interpolation percentile of an unsorted sample.
pub(crate) fn percentile(values: &[f64], p: f64) -> f64 {
    debug_assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let t = pos - lo as f64;
        sorted[lo] * (1.0 - t) + sorted[hi] * t
    }
}

/// Nonnegative least-squares concentrations of one OD pixel against two
/// stain columns: unregularized 2x2 normal equations, clamped at zero.
pub(crate) fn solve_concentrations(h: [f64; 3], e: [f64; 3], od: [f64; 3]) -> [f64; 2] {
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let (a, b, c) = (dot(h, h), dot(h, e), dot(e, e));
    let (rh, re) = (dot(h, od), dot(e, od));
    let det = a * c - b * b;
    let (c1, c2) = if det.abs() < 1e-12 {
        // Near-parallel columns: fall back to independent projections.
        (rh / a.max(1e-12), re / c.max(1e-12))
    } else {
        ((c * rh - b * re) / det, (a * re - b * rh) / det)
    };
    [c1.max(0.0), c2.max(0.0)]
}

/// Estimates the two stain vectors of an OD cloud from the extreme-angle
/// percentiles of its projection onto the top-2 singular plane.
pub fn estimate_stain_basis(od_matrix: &[[f64; 3]], angle_percentile: f64) -> Result<StainBasis> {
    if od_matrix.len() < 3 {
        return Err(Error::invalid(format!(
            "stain estimation needs at least 3 OD samples, got {}",
            od_matrix.len()
        )));
    }
    if !(0.0 < angle_percentile && angle_percentile < 50.0) {
        return Err(Error::invalid("angle percentile must lie in (0, 50)"));
    }

    // Scatter matrix of the (origin-anchored) OD cloud; its top-2
    // eigenvectors span the singular plane.
    let mut scatter = nalgebra::Matrix3::<f64>::zeros();
    for od in od_matrix {
        for i in 0..3 {
            for j in 0..3 {
                scatter[(i, j)] += od[i] * od[j];
            }
        }
    }
    let eig = nalgebra::SymmetricEigen::new(scatter);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let l1 = eig.eigenvalues[order[0]].max(0.0);
    let l2 = eig.eigenvalues[order[1]].max(0.0);
    if l1 <= 0.0 || l2 / l1 < 1e-9 {
        return Err(Error::DegenerateStains(
            "optical-density cloud is rank-deficient (single direction)".into(),
        ));
    }
    let mut e1 = [0.0; 3];
    let mut e2 = [0.0; 3];
    for i in 0..3 {
        e1[i] = eig.eigenvectors[(i, order[0])];
        e2[i] = eig.eigenvectors[(i, order[1])];
    }
    // Fix eigenvector signs so both point toward the positive OD octant.
    for e in [&mut e1, &mut e2] {
        if e.iter().sum::<f64>() < 0.0 {
            e.iter_mut().for_each(|v| *v = -*v);
        }
    }

    let angles: Vec<f64> = od_matrix
        .iter()
        .map(|od| {
            let a = od[0] * e1[0] + od[1] * e1[1] + od[2] * e1[2];
            let b = od[0] * e2[0] + od[1] * e2[1] + od[2] * e2[2];
            b.atan2(a)
        })
        .collect();
    let phi_lo = percentile(&angles, angle_percentile);
    let phi_hi = percentile(&angles, 100.0 - angle_percentile);
    if (phi_hi - phi_lo).abs() < 1e-6 {
        return Err(Error::DegenerateStains(
            "projected OD angles collapse to a single direction".into(),
        ));
    }

    let direction = |phi: f64| -> Result<[f64; 3]> {
        let mut v = [0.0; 3];
        for i in 0..3 {
            v[i] = phi.cos() * e1[i] + phi.sin() * e2[i];
        }
        // Absorption cannot be negative: clamp, then renormalize.
        v.iter_mut().for_each(|x| *x = x.max(0.0));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n < 1e-9 {
            return Err(Error::DegenerateStains(
                "stain direction vanished after nonnegativity clamp".into(),
            ));
        }
        v.iter_mut().for_each(|x| *x /= n);
        Ok(v)
    };
    let va = direction(phi_lo)?;
    let vb = direction(phi_hi)?;

    // Hematoxylin is the column with the larger blue-channel OD component.
    let (h, e) = if va[2] >= vb[2] { (va, vb) } else { (vb, va) };

    let mut ch = Vec::with_capacity(od_matrix.len());
    let mut ce = Vec::with_capacity(od_matrix.len());
    for od in od_matrix {
        let c = solve_concentrations(h, e, *od);
        ch.push(c[0]);
        ce.push(c[1]);
    }
    let max_concentrations = [
        percentile(&ch, CONCENTRATION_PERCENTILE).max(1e-6),
        percentile(&ce, CONCENTRATION_PERCENTILE).max(1e-6),
    ];

    Ok(StainBasis {
        stain_vectors: [[h[0], e[0]], [h[1], e[1]], [h[2], e[2]]],
        max_concentrations,
    })
}

fn od_to_byte(od: f64) -> u8 {
    let v = (256.0 * 10f64.powf(-od) - 1.0).round();
    v.clamp(0.0, 255.0) as u8
}

/// Re-expresses an image in the target stain basis. Background pixels are
/// copied unchanged; output dimensions equal input dimensions.
pub fn normalize_image(image: &RgbImage, target: &StainBasis) -> Result<RgbImage> {
    target.validate()?;
    let (od_rows, mask) = od_transform(image, DEFAULT_BACKGROUND_THRESHOLD)?;
    let source = estimate_stain_basis(&od_rows, DEFAULT_ANGLE_PERCENTILE)?;

    let (sh, se) = (source.column(0), source.column(1));
    let (th, te) = (target.column(0), target.column(1));
    let scale = [
        target.max_concentrations[0] / source.max_concentrations[0],
        target.max_concentrations[1] / source.max_concentrations[1],
    ];

    let mut out = image.clone();
    let (w, h) = image.dims();
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let od = od_of_pixel(image.get(x, y));
            let c = solve_concentrations(sh, se, od);
            let (c1, c2) = (c[0] * scale[0], c[1] * scale[1]);
            let rgb = [
                od_to_byte(th[0] * c1 + te[0] * c2),
                od_to_byte(th[1] * c1 + te[1] * c2),
                od_to_byte(th[2] * c1 + te[2] * c2),
            ];
            out.set(x, y, rgb);
        }
    }
    Ok(out)
}
