//! Oriented 3D volumes, resampling primitives, and NIfTI-1 file I/O.
//!
//! Data is stored row-major with x fastest: `idx = i + nx*(j + ny*k)`. This is
//! also the on-disk order. The boundary policy for interpolation and
//! convolution is clamp-to-edge everywhere.

mod nifti;

pub use nifti::{read_volume, write_volume};

use crate::error::{Error, Result};

/// Conversion between Gaussian FWHM and standard deviation, 2*sqrt(2*ln 2).
pub const FWHM_TO_SIGMA: f64 = 2.3548;

/// An oriented, anisotropic voxel grid.
///
/// `axes[a]` is the physical direction of increasing index along axis `a`;
/// the three directions must be orthonormal. `origin` is the physical
/// position (mm) of the center of voxel (0, 0, 0).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3D {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub axes: [[f64; 3]; 3],
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl Grid3D {
    pub const ORTHONORMAL_TOL: f64 = 1e-9;

    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        axes: [[f64; 3]; 3],
    ) -> Result<Self> {
        if dims.iter().any(|&n| n < 1) {
            return Err(Error::InvalidArgument(format!("all dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "all spacings must be positive, got {spacing:?}"
            )));
        }
        for a in 0..3 {
            for b in a..3 {
                let d = dot(axes[a], axes[b]);
                let want = if a == b { 1.0 } else { 0.0 };
                if (d - want).abs() > Self::ORTHONORMAL_TOL {
                    return Err(Error::InvalidArgument(format!(
                        "axes not orthonormal: <axes[{a}], axes[{b}]> = {d}"
                    )));
                }
            }
        }
        Ok(Grid3D { dims, spacing, origin, axes })
    }

    /// Grid with identity axes.
    pub fn axis_aligned(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        Self::new(dims, spacing, origin, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Identity-axes grid whose center of mass sits at the physical origin.
    pub fn centered(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let origin = [
            -0.5 * (dims[0] as f64 - 1.0) * spacing[0],
            -0.5 * (dims[1] as f64 - 1.0) * spacing[1],
            -0.5 * (dims[2] as f64 - 1.0) * spacing[2],
        ];
        Self::axis_aligned(dims, spacing, origin)
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.dims[0] && j < self.dims[1] && k < self.dims[2]);
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// Physical position of a (possibly fractional) index triple.
    pub fn point_of(&self, idx: [f64; 3]) -> [f64; 3] {
        let mut p = self.origin;
        for a in 0..3 {
            let t = idx[a] * self.spacing[a];
            for c in 0..3 {
                p[c] += t * self.axes[a][c];
            }
        }
        p
    }

    /// Continuous index coordinates of a physical point (unclamped).
    pub fn index_of(&self, p: [f64; 3]) -> [f64; 3] {
        let rel = [p[0] - self.origin[0], p[1] - self.origin[1], p[2] - self.origin[2]];
        [
            dot(rel, self.axes[0]) / self.spacing[0],
            dot(rel, self.axes[1]) / self.spacing[1],
            dot(rel, self.axes[2]) / self.spacing[2],
        ]
    }

    /// Physical extent (mm) along one axis, counting a full cell per voxel.
    pub fn extent(&self, axis: usize) -> f64 {
        self.dims[axis] as f64 * self.spacing[axis]
    }

    /// Grids compare equal within `tol` so that values round-tripped through
    /// float32 file headers still match.
    pub fn approx_eq(&self, other: &Grid3D, tol: f64) -> bool {
        if self.dims != other.dims {
            return false;
        }
        let close = |a: f64, b: f64| (a - b).abs() <= tol;
        for a in 0..3 {
            if !close(self.spacing[a], other.spacing[a]) || !close(self.origin[a], other.origin[a]) {
                return false;
            }
            for c in 0..3 {
                if !close(self.axes[a][c], other.axes[a][c]) {
                    return false;
                }
            }
        }
        true
    }
}

/// A scalar field on a [`Grid3D`]. Values are finite by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    grid: Grid3D,
    data: Vec<f64>,
}

impl Volume3D {
    pub fn new(grid: Grid3D, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match grid dims {:?}",
                data.len(),
                grid.dims
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("volume data contains non-finite values".into()));
        }
        Ok(Volume3D { grid, data })
    }

    pub fn zeros(grid: Grid3D) -> Self {
        let n = grid.len();
        Volume3D { grid, data: vec![0.0; n] }
    }

    pub fn constant(grid: Grid3D, value: f64) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![value; n])
    }

    pub fn grid(&self) -> &Grid3D {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.idx(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.grid.idx(i, j, k);
        self.data[idx] = v;
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Per-axis interpolation stencil: lower index, upper index, and the
/// fractional weight on the upper index.
#[inline]
pub(crate) fn linear_stencil(coord: f64, n: usize) -> (usize, usize, f64) {
    // Clamp-to-edge: outside coordinates collapse onto the boundary sample.
    let c = coord.clamp(0.0, (n - 1) as f64);
    let i0 = c.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, c - i0 as f64)
}

/// Trilinear interpolation of `vol` at a physical point (mm).
///
/// Points outside the grid use clamp-to-edge coordinates; this is a total
/// function on finite inputs.
pub fn trilinear_sample(vol: &Volume3D, p: [f64; 3]) -> f64 {
    let g = vol.grid();
    let c = g.index_of(p);
    let (i0, i1, fx) = linear_stencil(c[0], g.dims[0]);
    let (j0, j1, fy) = linear_stencil(c[1], g.dims[1]);
    let (k0, k1, fz) = linear_stencil(c[2], g.dims[2]);
    let d = vol.data();
    let mut acc = 0.0;
    for (k, wk) in [(k0, 1.0 - fz), (k1, fz)] {
        for (j, wj) in [(j0, 1.0 - fy), (j1, fy)] {
            let base = g.idx(0, j, k);
            let w = wj * wk;
            acc += w * ((1.0 - fx) * d[base + i0] + fx * d[base + i1]);
        }
    }
    acc
}

/// Discrete Gaussian kernel for a given FWHM, sampled at voxel pitch
/// `spacing_mm`, truncated at ±4σ and normalized to sum 1.
///
/// Returns the half-width `r` and the `2r+1` weights. FWHM 0 gives the
/// identity kernel.
pub fn gaussian_kernel(fwhm_mm: f64, spacing_mm: f64) -> (usize, Vec<f64>) {
    assert!(fwhm_mm >= 0.0 && spacing_mm > 0.0);
    let sigma = fwhm_mm / FWHM_TO_SIGMA;
    if sigma == 0.0 {
        return (0, vec![1.0]);
    }
    let r = (4.0 * sigma / spacing_mm).floor() as usize;
    let mut w = Vec::with_capacity(2 * r + 1);
    for t in -(r as isize)..=(r as isize) {
        let x = t as f64 * spacing_mm;
        w.push((-x * x / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    (r, w)
}

/// Sparse 1D convolution rows under clamp-to-edge boundary:
/// `rows[i]` lists `(source_index, weight)` pairs with weights summing to 1.
pub(crate) fn conv_rows(n: usize, r: usize, kernel: &[f64]) -> Vec<Vec<(usize, f64)>> {
    let mut rows = vec![Vec::new(); n];
    for (i, row) in rows.iter_mut().enumerate() {
        for (t, &w) in kernel.iter().enumerate() {
            let src = (i as isize + t as isize - r as isize).clamp(0, n as isize - 1) as usize;
            // Clamp merges out-of-range taps onto the boundary sample.
            match row.iter_mut().find(|(s, _)| *s == src) {
                Some((_, acc)) => *acc += w,
                None => row.push((src, w)),
            }
        }
    }
    rows
}

/// Transpose of a sparse row table over `n` source samples.
pub(crate) fn transpose_rows(rows: &[Vec<(usize, f64)>], n: usize) -> Vec<Vec<(usize, f64)>> {
    let mut cols = vec![Vec::new(); n];
    for (i, row) in rows.iter().enumerate() {
        for &(src, w) in row {
            cols[src].push((i, w));
        }
    }
    cols
}

/// Applies a sparse per-index gather table along one axis of a volume.
pub(crate) fn apply_rows_along_axis(vol: &Volume3D, axis: usize, rows: &[Vec<(usize, f64)>]) -> Volume3D {
    use rayon::prelude::*;
    let g = vol.grid().clone();
    let [nx, ny, _nz] = g.dims;
    assert_eq!(rows.len(), g.dims[axis]);
    let plane = nx * ny;
    let src = vol.data();
    let mut out = vec![0.0; src.len()];
    out.par_chunks_mut(plane).enumerate().for_each(|(k, out_plane)| {
        match axis {
            0 => {
                for j in 0..ny {
                    let base = j * nx + k * plane;
                    for i in 0..nx {
                        let mut acc = 0.0;
                        for &(s, w) in &rows[i] {
                            acc += w * src[s + base];
                        }
                        out_plane[i + j * nx] = acc;
                    }
                }
            }
            1 => {
                for j in 0..ny {
                    for i in 0..nx {
                        let mut acc = 0.0;
                        for &(s, w) in &rows[j] {
                            acc += w * src[i + s * nx + k * plane];
                        }
                        out_plane[i + j * nx] = acc;
                    }
                }
            }
            2 => {
                for &(s, w) in &rows[k] {
                    let sp = &src[s * plane..(s + 1) * plane];
                    for (o, &v) in out_plane.iter_mut().zip(sp) {
                        *o += w * v;
                    }
                }
            }
            _ => panic!("axis out of range"),
        }
    });
    Volume3D { grid: g, data: out }
}

/// 1D discrete Gaussian blur along one axis: σ = fwhm/2.3548, kernel
/// truncated at ±4σ, normalized to sum 1, clamp-to-edge boundary.
pub fn gaussian_blur_axis(vol: &Volume3D, axis: usize, fwhm_mm: f64) -> Volume3D {
    assert!(axis < 3, "axis must be 0, 1, or 2");
    assert!(fwhm_mm >= 0.0, "fwhm must be non-negative");
    let (r, kernel) = gaussian_kernel(fwhm_mm, vol.grid().spacing[axis]);
    if r == 0 {
        return vol.clone();
    }
    let rows = conv_rows(vol.grid().dims[axis], r, &kernel);
    apply_rows_along_axis(vol, axis, &rows)
}

/// Exact transpose of [`gaussian_blur_axis`] with the same kernel.
pub fn gaussian_blur_axis_adjoint(vol: &Volume3D, axis: usize, fwhm_mm: f64) -> Volume3D {
    assert!(axis < 3, "axis must be 0, 1, or 2");
    let n = vol.grid().dims[axis];
    let (r, kernel) = gaussian_kernel(fwhm_mm, vol.grid().spacing[axis]);
    if r == 0 {
        return vol.clone();
    }
    let rows = transpose_rows(&conv_rows(n, r, &kernel), n);
    apply_rows_along_axis(vol, axis, &rows)
}
