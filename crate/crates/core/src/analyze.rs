//! Evaluation machinery: automated circular-ROI detection (Hough transform),
//! region statistics with a configurable one-pixel margin, relative-error,
//! repeatability (CV, mean absolute percentage error), and Bland-Altman
//! agreement.
//!
//! ROIs live in coronal planes: an image pixel (u, v) maps to volume indices
//! (i, j = slice_index, k) = (u, j, v), matching the phantom convention of
//! circular vial faces in the x-z plane.

use crate::error::{Error, Result};
use crate::volgrid::Volume3D;

/// A detected circular region in one coronal slice.
#[derive(Debug, Clone, PartialEq)]
pub struct CircleROI {
    /// Pixel center (u, v) in the slice.
    pub center: (usize, usize),
    pub radius_px: usize,
    pub slice_index: usize,
    pub label: char,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ROIStats {
    pub mean: f64,
    pub sd: f64,
    pub n_voxels: usize,
}

/// Repeatability metrics of one (ROI, method) pair across repeated runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepeatabilityStats {
    pub mean_t2_ms: f64,
    pub cv_percent: f64,
    pub mean_abs_diff_ms: f64,
    pub mape_percent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlandAltmanStats {
    /// Mean difference (measured - reference).
    pub bias: f64,
    pub sd_diff: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    /// ((measured + reference)/2, measured - reference) per pair.
    pub points: Vec<(f64, f64)>,
}

/// Extracts coronal slice `j` of a volume as an (image, (nu, nv)) pair with
/// u = x index, v = z index.
pub fn coronal_slice(vol: &Volume3D, j: usize) -> (Vec<f64>, (usize, usize)) {
    let [nx, ny, nz] = vol.grid().dims;
    assert!(j < ny, "slice index {j} out of range {ny}");
    let mut img = Vec::with_capacity(nx * nz);
    for k in 0..nz {
        for i in 0..nx {
            img.push(vol.get(i, j, k));
        }
    }
    (img, (nx, nz))
}

/// Extracts in-plane slice `l` of a multi-slice stack volume (slices along
/// the third index, as LR series volumes are stored).
pub fn stack_slice(vol: &Volume3D, l: usize) -> (Vec<f64>, (usize, usize)) {
    let [nx, ny, nz] = vol.grid().dims;
    assert!(l < nz, "slice index {l} out of range {nz}");
    let plane = nx * ny;
    (vol.data()[l * plane..(l + 1) * plane].to_vec(), (nx, ny))
}

/// Sobel gradient magnitude; border pixels carry zero gradient.
fn sobel_magnitude(img: &[f64], nu: usize, nv: usize) -> Vec<f64> {
    let mut mag = vec![0.0; nu * nv];
    if nu < 3 || nv < 3 {
        return mag;
    }
    for v in 1..nv - 1 {
        for u in 1..nu - 1 {
            let px = |du: isize, dv: isize| {
                img[(u as isize + du) as usize + nu * (v as isize + dv) as usize]
            };
            let gx = px(1, -1) + 2.0 * px(1, 0) + px(1, 1)
                - px(-1, -1)
                - 2.0 * px(-1, 0)
                - px(-1, 1);
            let gy = px(-1, 1) + 2.0 * px(0, 1) + px(1, 1)
                - px(-1, -1)
                - 2.0 * px(0, -1)
                - px(1, -1);
            mag[u + nu * v] = (gx * gx + gy * gy).sqrt();
        }
    }
    mag
}

/// Unique integer offsets on the circle of radius `r` (midpoint circle).
fn circle_offsets(r: usize) -> Vec<(i32, i32)> {
    let r = r as i32;
    let mut pts = std::collections::BTreeSet::new();
    let mut x = r;
    let mut y = 0;
    let mut err = 1 - r;
    while x >= y {
        for &(a, b) in &[(x, y), (y, x)] {
            pts.insert((a, b));
            pts.insert((-a, b));
            pts.insert((a, -b));
            pts.insert((-a, -b));
        }
        y += 1;
        if err < 0 {
            err += 2 * y + 1;
        } else {
            x -= 1;
            err += 2 * (y - x) + 1;
        }
    }
    pts.into_iter().collect()
}

/// Mean intensity over the full circle interior; NaN-free (empty gives 0).
fn interior_mean(img: &[f64], nu: usize, nv: usize, c: (usize, usize), r: usize) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    let r2 = (r * r) as i64;
    for v in c.1.saturating_sub(r)..(c.1 + r + 1).min(nv) {
        for u in c.0.saturating_sub(r)..(c.0 + r + 1).min(nu) {
            let du = u as i64 - c.0 as i64;
            let dv = v as i64 - c.1 as i64;
            if du * du + dv * dv <= r2 {
                acc += img[u + nu * v];
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

/// Detects the `n_expected` strongest non-overlapping circles in a slice via
/// a Sobel-edge Hough accumulator over (cx, cy, r).
///
/// Edges are thresholded at half the maximum gradient; peaks below 25% of
/// the accumulator maximum stop the search. Returned circles are sorted by
/// descending mean interior intensity and labeled 'a', 'b', 'c', ... in that
/// order; `slice_index` is left at 0 for the caller to assign.
pub fn hough_circles(
    image: &[f64],
    dims: (usize, usize),
    r_min: usize,
    r_max: usize,
    n_expected: usize,
) -> Result<Vec<CircleROI>> {
    let (nu, nv) = dims;
    if image.len() != nu * nv {
        return Err(Error::InvalidArgument("image length does not match dims".into()));
    }
    if r_min > r_max || r_min == 0 {
        return Err(Error::InvalidArgument(format!("bad radius range [{r_min}, {r_max}]")));
    }
    if n_expected < 1 {
        return Err(Error::InvalidArgument("n_expected must be >= 1".into()));
    }

    let mag = sobel_magnitude(image, nu, nv);
    let g_max = mag.iter().copied().fold(0.0f64, f64::max);
    if g_max <= 0.0 {
        return Err(Error::DetectionFailure { found: 0, expected: n_expected });
    }
    let threshold = 0.5 * g_max;
    let edges: Vec<(usize, usize)> = (0..nv)
        .flat_map(|v| (0..nu).map(move |u| (u, v)))
        .filter(|&(u, v)| mag[u + nu * v] >= threshold)
        .collect();

    let radii: Vec<usize> = (r_min..=r_max).collect();
    let nr = radii.len();
    let mut acc = vec![0u32; nu * nv * nr];
    for (ri, &r) in radii.iter().enumerate() {
        let offsets = circle_offsets(r);
        let base = ri * nu * nv;
        for &(eu, ev) in &edges {
            for &(du, dv) in &offsets {
                let cu = eu as i32 - du;
                let cv = ev as i32 - dv;
                if cu >= 0 && (cu as usize) < nu && cv >= 0 && (cv as usize) < nv {
                    acc[base + cu as usize + nu * cv as usize] += 1;
                }
            }
        }
    }

    let acc_max = *acc.iter().max().unwrap() as f64;
    if acc_max <= 0.0 {
        return Err(Error::DetectionFailure { found: 0, expected: n_expected });
    }
    let floor = 0.25 * acc_max;
    let mut found: Vec<CircleROI> = Vec::new();
    for _ in 0..n_expected {
        // Global max with deterministic (lowest-index) tie-breaking.
        let mut best = 0usize;
        let mut best_v = 0u32;
        for (i, &v) in acc.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        if (best_v as f64) < floor || best_v == 0 {
            break;
        }
        let ri = best / (nu * nv);
        let rem = best % (nu * nv);
        let (cu, cv) = (rem % nu, rem / nu);
        found.push(CircleROI {
            center: (cu, cv),
            radius_px: radii[ri],
            slice_index: 0,
            label: '?',
        });
        // Suppress every center within r_min of the accepted one.
        let sup2 = (r_min * r_min) as i64;
        for v in cv.saturating_sub(r_min)..(cv + r_min + 1).min(nv) {
            for u in cu.saturating_sub(r_min)..(cu + r_min + 1).min(nu) {
                let du = u as i64 - cu as i64;
                let dv = v as i64 - cv as i64;
                if du * du + dv * dv <= sup2 {
                    for r in 0..nr {
                        acc[r * nu * nv + u + nu * v] = 0;
                    }
                }
            }
        }
    }
    if found.len() < n_expected {
        return Err(Error::DetectionFailure { found: found.len(), expected: n_expected });
    }

    // Brightest interior first: at fixed TE the longest-T2 structure is the
    // brightest, which makes labels follow descending T2.
    found.sort_by(|a, b| {
        let ia = interior_mean(image, nu, nv, a.center, a.radius_px);
        let ib = interior_mean(image, nu, nv, b.center, b.radius_px);
        ib.partial_cmp(&ia).unwrap_or(std::cmp::Ordering::Equal)
    });
    for (i, roi) in found.iter_mut().enumerate() {
        roi.label = (b'a' + i as u8) as char;
    }
    Ok(found)
}

fn population_stats(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and population SD of a 2D image over the circle shrunk (or grown)
/// by `margin_px` pixels.
pub fn roi_stats_image(
    roi: &CircleROI,
    image: &[f64],
    dims: (usize, usize),
    margin_px: i32,
) -> Result<ROIStats> {
    let (nu, nv) = dims;
    if image.len() != nu * nv {
        return Err(Error::InvalidArgument("image length does not match dims".into()));
    }
    let r_eff = roi.radius_px as i64 + margin_px as i64;
    if r_eff < 0 {
        return Err(Error::InvalidArgument("ROI margin removes the entire selection".into()));
    }
    let r2 = r_eff * r_eff;
    let mut values = Vec::new();
    for v in 0..nv {
        for u in 0..nu {
            let du = u as i64 - roi.center.0 as i64;
            let dv = v as i64 - roi.center.1 as i64;
            if du * du + dv * dv <= r2 {
                values.push(image[u + nu * v]);
            }
        }
    }
    if values.is_empty() {
        return Err(Error::InvalidArgument("empty ROI selection".into()));
    }
    let (mean, sd) = population_stats(&values);
    Ok(ROIStats { mean, sd, n_voxels: values.len() })
}

/// Mean and population SD of a map over the ROI interior shrunk (or grown)
/// by `margin_px` pixels; the ROI lives in coronal plane `slice_index`.
/// The default evaluation uses -1 (a one-pixel inward margin) to keep
/// partial-volume boundary voxels out of the statistics.
pub fn roi_stats_with_margin(roi: &CircleROI, map: &Volume3D, margin_px: i32) -> Result<ROIStats> {
    let ny = map.grid().dims[1];
    if roi.slice_index >= ny {
        return Err(Error::InvalidArgument(format!(
            "ROI slice {} outside volume (ny = {ny})",
            roi.slice_index
        )));
    }
    let (img, dims) = coronal_slice(map, roi.slice_index);
    roi_stats_image(roi, &img, dims, margin_px)
}

/// ROI statistics with the default one-pixel inward margin.
pub fn erode_then_stat(roi: &CircleROI, map: &Volume3D) -> Result<ROIStats> {
    roi_stats_with_margin(roi, map, -1)
}

/// Signed relative error in percent: 100 * (measured - reference)/reference.
/// The reference must be positive.
pub fn relative_error(measured: f64, reference: f64) -> f64 {
    debug_assert!(reference > 0.0);
    100.0 * (measured - reference) / reference
}

/// Coefficient of variation in percent: 100 * population SD / mean.
pub fn cv_percent(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument("cv needs at least 2 values".into()));
    }
    let (mean, sd) = population_stats(values);
    if !(mean > 0.0) {
        return Err(Error::InvalidArgument("cv needs a positive mean".into()));
    }
    Ok(100.0 * sd / mean)
}

/// Mean absolute percentage error over all ordered pairs (i, j), i != j,
/// of 100 * |v_i - v_j| / v_j: every measurement serves in turn as the
/// reference.
pub fn mape_percent(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument("mape needs at least 2 values".into()));
    }
    if values.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument("mape needs positive values".into()));
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for (i, &vi) in values.iter().enumerate() {
        for (j, &vj) in values.iter().enumerate() {
            if i != j {
                acc += 100.0 * (vi - vj).abs() / vj;
                n += 1;
            }
        }
    }
    Ok(acc / n as f64)
}

/// Mean absolute difference (ms) over all unordered pairs.
pub fn mean_abs_diff(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument("mean_abs_diff needs at least 2 values".into()));
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            acc += (values[i] - values[j]).abs();
            n += 1;
        }
    }
    Ok(acc / n as f64)
}

/// All repeatability metrics of one value series.
pub fn repeatability_stats(values: &[f64]) -> Result<RepeatabilityStats> {
    let (mean, _) = population_stats(values);
    Ok(RepeatabilityStats {
        mean_t2_ms: mean,
        cv_percent: cv_percent(values)?,
        mean_abs_diff_ms: mean_abs_diff(values)?,
        mape_percent: mape_percent(values)?,
    })
}

/// Bland-Altman agreement of (measured, reference) pairs: bias, population
/// SD of the differences, and 1.96-SD limits of agreement.
pub fn bland_altman(pairs: &[(f64, f64)]) -> Result<BlandAltmanStats> {
    if pairs.len() < 2 {
        return Err(Error::InvalidArgument("bland_altman needs at least 2 pairs".into()));
    }
    let diffs: Vec<f64> = pairs.iter().map(|(m, r)| m - r).collect();
    let (bias, sd_diff) = population_stats(&diffs);
    let points = pairs.iter().map(|(m, r)| ((m + r) / 2.0, m - r)).collect();
    Ok(BlandAltmanStats {
        bias,
        sd_diff,
        loa_low: bias - 1.96 * sd_diff,
        loa_high: bias + 1.96 * sd_diff,
        points,
    })
}
