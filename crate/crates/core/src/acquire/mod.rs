//! Forward acquisition model: mono-exponential contrast, slice-profile blur,
//! in-plane downsampling, and optional Gibbs ringing, first-echo offset, and
//! Rician noise, producing low-resolution multi-slice series from
//! high-resolution (M0, T2) volumes.

mod kspace;
mod rng;

pub use kspace::truncate_phase_encode;
pub use rng::CounterRng;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volgrid::{
    gaussian_blur_axis, gaussian_blur_axis_adjoint, linear_stencil, Grid3D, Volume3D,
};

/// Grid compatibility tolerance: survives float32 file headers.
pub const GRID_TOL: f64 = 1e-3;

/// Exponential decay signal: `m0 * exp(-te / t2)`.
#[inline]
pub fn ideal_signal(m0: f64, t2_ms: f64, te_ms: f64) -> f64 {
    m0 * (-te_ms / t2_ms).exp()
}

/// `n` echo times uniformly spanning [te_min, te_max].
pub fn te_schedule(n: usize, te_min_ms: f64, te_max_ms: f64) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("te_schedule needs n >= 2, got {n}")));
    }
    if !(te_max_ms > te_min_ms) || !(te_min_ms > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "te range must satisfy 0 < te_min < te_max, got [{te_min_ms}, {te_max_ms}]"
        )));
    }
    let step = (te_max_ms - te_min_ms) / (n - 1) as f64;
    Ok((0..n).map(|i| te_min_ms + i as f64 * step).collect())
}

/// Per-voxel exponential contrast at one echo time. Voxels with t2 <= 0
/// produce zero signal.
pub fn contrast_volume(m0: &Volume3D, t2: &Volume3D, te_ms: f64) -> Result<Volume3D> {
    if !m0.grid().approx_eq(t2.grid(), GRID_TOL) {
        return Err(Error::GridMismatch("m0 and t2 volumes are on different grids".into()));
    }
    let data: Vec<f64> = m0
        .data()
        .iter()
        .zip(t2.data())
        .map(|(&m, &t)| if t > 0.0 { ideal_signal(m, t, te_ms) } else { 0.0 })
        .collect();
    Volume3D::new(m0.grid().clone(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Orientation {
    Axial,
    Coronal,
    Sagittal,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Orientation::Axial, Orientation::Coronal, Orientation::Sagittal];

    /// Volume axis perpendicular to the slice plane.
    pub fn slice_axis(self) -> usize {
        match self {
            Orientation::Axial => 2,
            Orientation::Coronal => 1,
            Orientation::Sagittal => 0,
        }
    }

    /// The two in-plane axes in ascending order.
    pub fn in_plane_axes(self) -> (usize, usize) {
        match self.slice_axis() {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Orientation::Axial => "axial",
            Orientation::Coronal => "coronal",
            Orientation::Sagittal => "sagittal",
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(Orientation::Axial),
            "coronal" => Ok(Orientation::Coronal),
            "sagittal" => Ok(Orientation::Sagittal),
            other => Err(Error::InvalidArgument(format!("unknown orientation `{other}`"))),
        }
    }
}

/// Geometry of one low-resolution multi-slice stack.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesGeometry {
    pub in_plane_spacing_mm: (f64, f64),
    pub slice_thickness_mm: f64,
    pub gap_fraction: f64,
    pub matrix: (usize, usize),
    pub n_slices: usize,
    pub orientation: Orientation,
}

impl SeriesGeometry {
    /// Distance between adjacent slice centers.
    pub fn slice_spacing_mm(&self) -> f64 {
        self.slice_thickness_mm * (1.0 + self.gap_fraction)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.in_plane_spacing_mm.0 > 0.0 && self.in_plane_spacing_mm.1 > 0.0) {
            return Err(Error::InvalidArgument("in-plane spacing must be positive".into()));
        }
        if !(self.slice_thickness_mm > 0.0) {
            return Err(Error::InvalidArgument("slice thickness must be positive".into()));
        }
        if !(self.gap_fraction >= 0.0) {
            return Err(Error::InvalidArgument("gap fraction must be >= 0".into()));
        }
        if self.matrix.0 < 1 || self.matrix.1 < 1 || self.n_slices < 1 {
            return Err(Error::InvalidArgument("matrix and n_slices must be >= 1".into()));
        }
        Ok(())
    }

    /// Whether the slice stack spans the HR grid extent along its slice axis.
    pub fn covers(&self, grid: &Grid3D) -> bool {
        let extent = grid.extent(self.orientation.slice_axis());
        self.n_slices as f64 * self.slice_spacing_mm() >= extent - 1e-6
    }

    /// Geometry whose matrix and slice count tile the given HR grid.
    pub fn covering(
        grid: &Grid3D,
        orientation: Orientation,
        in_plane_spacing_mm: (f64, f64),
        slice_thickness_mm: f64,
        gap_fraction: f64,
    ) -> Self {
        let (au, av) = orientation.in_plane_axes();
        let cells = |extent: f64, pitch: f64| ((extent / pitch) - 1e-9).ceil().max(1.0) as usize;
        let slice_spacing = slice_thickness_mm * (1.0 + gap_fraction);
        SeriesGeometry {
            in_plane_spacing_mm,
            slice_thickness_mm,
            gap_fraction,
            matrix: (
                cells(grid.extent(au), in_plane_spacing_mm.0),
                cells(grid.extent(av), in_plane_spacing_mm.1),
            ),
            n_slices: cells(grid.extent(orientation.slice_axis()), slice_spacing),
            orientation,
        }
    }
}

/// Acquisition settings shared by one simulated experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionProtocol {
    pub te_list_ms: Vec<f64>,
    pub geometries: Vec<SeriesGeometry>,
    pub noise_sigma: f64,
    /// Fraction of phase-encode lines retained; 1.0 disables Gibbs simulation.
    pub kspace_truncation: f64,
    /// Multiplicative offset applied to the first echo only.
    pub first_echo_offset: f64,
    pub seed: u64,
}

impl AcquisitionProtocol {
    pub fn validate(&self, grid: &Grid3D) -> Result<()> {
        if self.te_list_ms.len() < 2 {
            return Err(Error::InvalidArgument("protocol needs at least 2 echo times".into()));
        }
        if !self.te_list_ms.windows(2).all(|w| w[1] > w[0]) || self.te_list_ms[0] <= 0.0 {
            return Err(Error::InvalidArgument(
                "te list must be strictly increasing and positive".into(),
            ));
        }
        if !(self.kspace_truncation > 0.0 && self.kspace_truncation <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "kspace_truncation must lie in (0, 1], got {}",
                self.kspace_truncation
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument("noise sigma must be >= 0".into()));
        }
        if !(self.first_echo_offset > -1.0) {
            return Err(Error::InvalidArgument("first-echo offset must exceed -1".into()));
        }
        for g in &self.geometries {
            g.validate()?;
            if !g.covers(grid) {
                return Err(Error::InvalidArgument(format!(
                    "{} stack ({} slices at {} mm) does not cover the HR grid",
                    g.orientation.label(),
                    g.n_slices,
                    g.slice_spacing_mm()
                )));
            }
        }
        Ok(())
    }

    /// Default three-orientation protocol tiling the grid.
    pub fn orthogonal(
        grid: &Grid3D,
        te_list_ms: Vec<f64>,
        in_plane_spacing_mm: (f64, f64),
        slice_thickness_mm: f64,
        gap_fraction: f64,
    ) -> Self {
        let geometries = Orientation::ALL
            .iter()
            .map(|&o| {
                SeriesGeometry::covering(grid, o, in_plane_spacing_mm, slice_thickness_mm, gap_fraction)
            })
            .collect();
        AcquisitionProtocol {
            te_list_ms,
            geometries,
            noise_sigma: 0.0,
            kspace_truncation: 1.0,
            first_echo_offset: 0.0,
            seed: 0,
        }
    }
}

/// One low-resolution stack: `matrix.0 * matrix.1` pixels per slice, stored
/// u-fastest, slices last.
#[derive(Debug, Clone, PartialEq)]
pub struct LRSeries {
    pub geometry: SeriesGeometry,
    pub te_ms: f64,
    pub series_index: usize,
    data: Vec<f64>,
}

impl LRSeries {
    pub fn new(geometry: SeriesGeometry, te_ms: f64, series_index: usize, data: Vec<f64>) -> Result<Self> {
        geometry.validate()?;
        let n = geometry.matrix.0 * geometry.matrix.1 * geometry.n_slices;
        if data.len() != n {
            return Err(Error::InvalidArgument(format!(
                "series data length {} does not match geometry ({} expected)",
                data.len(),
                n
            )));
        }
        if !data.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::InvalidArgument("series values must be finite and >= 0".into()));
        }
        Ok(LRSeries { geometry, te_ms, series_index, data })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixels_per_slice(&self) -> usize {
        self.geometry.matrix.0 * self.geometry.matrix.1
    }

    pub fn slice(&self, l: usize) -> &[f64] {
        let n = self.pixels_per_slice();
        &self.data[l * n..(l + 1) * n]
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize, l: usize) -> f64 {
        self.data[u + self.geometry.matrix.0 * (v + self.geometry.matrix.1 * l)]
    }

    /// The stack as an oriented volume on its own grid, for file interchange.
    pub fn to_volume(&self, hr_grid: &Grid3D) -> Result<Volume3D> {
        let op = ForwardOperator::new(hr_grid.clone(), self.geometry.clone())?;
        Volume3D::new(op.lr_grid(), self.data.clone())
    }

    pub fn from_volume(
        vol: &Volume3D,
        geometry: SeriesGeometry,
        te_ms: f64,
        series_index: usize,
    ) -> Result<Self> {
        let dims = vol.grid().dims;
        if dims != [geometry.matrix.0, geometry.matrix.1, geometry.n_slices] {
            return Err(Error::GridMismatch(format!(
                "volume dims {:?} do not match series geometry {:?}x{}",
                dims, geometry.matrix, geometry.n_slices
            )));
        }
        LRSeries::new(geometry, te_ms, series_index, vol.data().to_vec())
    }
}

/// Rigid motion (rotation about the grid center plus translation).
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation_mm: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation_mm: [0.0, 0.0, 0.0],
        }
    }

    pub fn is_identity(&self) -> bool {
        self == &Self::identity()
    }

    fn apply_about(&self, p: [f64; 3], center: [f64; 3]) -> [f64; 3] {
        let rel = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
        let mut out = [0.0; 3];
        for (c, row) in self.rotation.iter().enumerate() {
            out[c] = row[0] * rel[0] + row[1] * rel[1] + row[2] * rel[2]
                + center[c]
                + self.translation_mm[c];
        }
        out
    }
}

/// Sparse 1D row table: for each output cell, the contributing source cells
/// and weights (normalized to sum 1).
type SparseRows = Vec<Vec<(usize, f64)>>;

/// Area-overlap (box average) weights from an HR axis with `n` cells of pitch
/// `s` onto `m` LR cells of pitch `l`, both center-aligned on the HR extent.
fn box_rows(n: usize, s: f64, m: usize, l: f64) -> SparseRows {
    let center = (n as f64 - 1.0) * s / 2.0;
    let mut rows = Vec::with_capacity(m);
    for u in 0..m {
        let t = center + (u as f64 - (m as f64 - 1.0) / 2.0) * l;
        let (lo, hi) = (t - l / 2.0, t + l / 2.0);
        let i_lo = (((lo + s / 2.0) / s).floor().max(0.0)) as usize;
        let i_hi = ((((hi + s / 2.0) / s).ceil()) as usize).min(n);
        let mut row = Vec::new();
        let mut total = 0.0;
        for i in i_lo..i_hi {
            let (cl, ch) = (i as f64 * s - s / 2.0, i as f64 * s + s / 2.0);
            let ov = (hi.min(ch) - lo.max(cl)).max(0.0);
            if ov > 0.0 {
                row.push((i, ov));
                total += ov;
            }
        }
        if row.is_empty() {
            // LR cell entirely outside the HR grid: clamp to the nearest cell.
            let i = if t < 0.0 { 0 } else { n - 1 };
            row.push((i, 1.0));
            total = 1.0;
        }
        for (_, w) in &mut row {
            *w /= total;
        }
        rows.push(row);
    }
    rows
}

/// Linear-interpolation weights selecting slice-center planes along the HR
/// slice axis.
fn slice_rows(n: usize, s: f64, n_slices: usize, slice_spacing: f64) -> SparseRows {
    let center = (n as f64 - 1.0) * s / 2.0;
    (0..n_slices)
        .map(|l| {
            let t = center + (l as f64 - (n_slices as f64 - 1.0) / 2.0) * slice_spacing;
            let (i0, i1, f) = linear_stencil(t / s, n);
            if i0 == i1 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - f), (i1, f)]
            }
        })
        .collect()
}

/// The linear acquisition operator for one series: per slice, rigid motion
/// (identity by default), Gaussian slice-profile blur along the slice axis
/// (FWHM = slice thickness), then in-plane box averaging and slice-center
/// selection. Carries an exact adjoint.
#[derive(Debug, Clone)]
pub struct ForwardOperator {
    hr_grid: Grid3D,
    geometry: SeriesGeometry,
    motion: Vec<RigidTransform>,
    u_rows: SparseRows,
    v_rows: SparseRows,
    l_rows: SparseRows,
    axes: (usize, usize, usize),
}

impl ForwardOperator {
    pub fn new(hr_grid: Grid3D, geometry: SeriesGeometry) -> Result<Self> {
        geometry.validate()?;
        let (au, av) = geometry.orientation.in_plane_axes();
        let asl = geometry.orientation.slice_axis();
        let u_rows = box_rows(
            hr_grid.dims[au],
            hr_grid.spacing[au],
            geometry.matrix.0,
            geometry.in_plane_spacing_mm.0,
        );
        let v_rows = box_rows(
            hr_grid.dims[av],
            hr_grid.spacing[av],
            geometry.matrix.1,
            geometry.in_plane_spacing_mm.1,
        );
        let l_rows = slice_rows(
            hr_grid.dims[asl],
            hr_grid.spacing[asl],
            geometry.n_slices,
            geometry.slice_spacing_mm(),
        );
        let motion = vec![RigidTransform::identity(); geometry.n_slices];
        Ok(ForwardOperator { hr_grid, geometry, motion, u_rows, v_rows, l_rows, axes: (au, av, asl) })
    }

    pub fn with_motion(mut self, motion: Vec<RigidTransform>) -> Result<Self> {
        if motion.len() != self.geometry.n_slices {
            return Err(Error::InvalidArgument(format!(
                "motion list length {} != slice count {}",
                motion.len(),
                self.geometry.n_slices
            )));
        }
        self.motion = motion;
        Ok(self)
    }

    pub fn hr_grid(&self) -> &Grid3D {
        &self.hr_grid
    }

    pub fn geometry(&self) -> &SeriesGeometry {
        &self.geometry
    }

    pub fn range_len(&self) -> usize {
        self.geometry.matrix.0 * self.geometry.matrix.1 * self.geometry.n_slices
    }

    pub fn domain_len(&self) -> usize {
        self.hr_grid.len()
    }

    /// Grid of the LR stack this operator produces.
    pub fn lr_grid(&self) -> Grid3D {
        let (au, av, asl) = self.axes;
        let g = &self.hr_grid;
        let spacing = [
            self.geometry.in_plane_spacing_mm.0,
            self.geometry.in_plane_spacing_mm.1,
            self.geometry.slice_spacing_mm(),
        ];
        let dims = [self.geometry.matrix.0, self.geometry.matrix.1, self.geometry.n_slices];
        // First pixel center in HR axis coordinates.
        let first = |n_hr: usize, s: f64, m: usize, pitch: f64| {
            (n_hr as f64 - 1.0) * s / 2.0 - (m as f64 - 1.0) / 2.0 * pitch
        };
        let t = [
            first(g.dims[au], g.spacing[au], dims[0], spacing[0]),
            first(g.dims[av], g.spacing[av], dims[1], spacing[1]),
            first(g.dims[asl], g.spacing[asl], dims[2], spacing[2]),
        ];
        let mut origin = g.origin;
        for c in 0..3 {
            origin[c] += t[0] * g.axes[au][c] + t[1] * g.axes[av][c] + t[2] * g.axes[asl][c];
        }
        let axes = [g.axes[au], g.axes[av], g.axes[asl]];
        Grid3D::new(dims, spacing, origin, axes).expect("LR grid inherits orthonormal axes")
    }

    #[inline]
    fn hr_idx(&self, cu: usize, cv: usize, cs: usize) -> usize {
        let (au, av, asl) = self.axes;
        let mut c = [0usize; 3];
        c[au] = cu;
        c[av] = cv;
        c[asl] = cs;
        self.hr_grid.idx(c[0], c[1], c[2])
    }

    fn identity_motion(&self) -> bool {
        self.motion.iter().all(|m| m.is_identity())
    }

    /// Resamples `x` at motion-transformed voxel centers (trilinear gather).
    fn motion_resample(&self, x: &[f64], t: &RigidTransform) -> Vec<f64> {
        let g = &self.hr_grid;
        let center = g.point_of([
            (g.dims[0] as f64 - 1.0) / 2.0,
            (g.dims[1] as f64 - 1.0) / 2.0,
            (g.dims[2] as f64 - 1.0) / 2.0,
        ]);
        let mut out = vec![0.0; x.len()];
        for k in 0..g.dims[2] {
            for j in 0..g.dims[1] {
                for i in 0..g.dims[0] {
                    let p = t.apply_about(g.point_of([i as f64, j as f64, k as f64]), center);
                    let c = g.index_of(p);
                    let (i0, i1, fx) = linear_stencil(c[0], g.dims[0]);
                    let (j0, j1, fy) = linear_stencil(c[1], g.dims[1]);
                    let (k0, k1, fz) = linear_stencil(c[2], g.dims[2]);
                    let mut acc = 0.0;
                    for (kk, wk) in [(k0, 1.0 - fz), (k1, fz)] {
                        for (jj, wj) in [(j0, 1.0 - fy), (j1, fy)] {
                            let base = g.idx(0, jj, kk);
                            acc += wj * wk * ((1.0 - fx) * x[base + i0] + fx * x[base + i1]);
                        }
                    }
                    out[g.idx(i, j, k)] = acc;
                }
            }
        }
        out
    }

    /// Exact transpose of [`Self::motion_resample`] (trilinear scatter).
    fn motion_resample_adjoint(&self, y: &[f64], t: &RigidTransform) -> Vec<f64> {
        let g = &self.hr_grid;
        let center = g.point_of([
            (g.dims[0] as f64 - 1.0) / 2.0,
            (g.dims[1] as f64 - 1.0) / 2.0,
            (g.dims[2] as f64 - 1.0) / 2.0,
        ]);
        let mut out = vec![0.0; y.len()];
        for k in 0..g.dims[2] {
            for j in 0..g.dims[1] {
                for i in 0..g.dims[0] {
                    let val = y[g.idx(i, j, k)];
                    if val == 0.0 {
                        continue;
                    }
                    let p = t.apply_about(g.point_of([i as f64, j as f64, k as f64]), center);
                    let c = g.index_of(p);
                    let (i0, i1, fx) = linear_stencil(c[0], g.dims[0]);
                    let (j0, j1, fy) = linear_stencil(c[1], g.dims[1]);
                    let (k0, k1, fz) = linear_stencil(c[2], g.dims[2]);
                    for (kk, wk) in [(k0, 1.0 - fz), (k1, fz)] {
                        for (jj, wj) in [(j0, 1.0 - fy), (j1, fy)] {
                            let base = g.idx(0, jj, kk);
                            out[base + i0] += wj * wk * (1.0 - fx) * val;
                            out[base + i1] += wj * wk * fx * val;
                        }
                    }
                }
            }
        }
        out
    }

    fn blur(&self, x: &[f64]) -> Vec<f64> {
        let vol = Volume3D::new(self.hr_grid.clone(), x.to_vec()).expect("finite blur input");
        gaussian_blur_axis(&vol, self.axes.2, self.geometry.slice_thickness_mm).into_data()
    }

    fn blur_adjoint(&self, x: &[f64]) -> Vec<f64> {
        let vol = Volume3D::new(self.hr_grid.clone(), x.to_vec()).expect("finite blur input");
        gaussian_blur_axis_adjoint(&vol, self.axes.2, self.geometry.slice_thickness_mm).into_data()
    }

    /// Downsampling of one blurred HR volume into one LR slice.
    fn project_slice(&self, xb: &[f64], l: usize, out: &mut [f64]) {
        let (mu, _mv) = self.geometry.matrix;
        for (v, vrow) in self.v_rows.iter().enumerate() {
            for (u, urow) in self.u_rows.iter().enumerate() {
                let mut acc = 0.0;
                for &(cs, wl) in &self.l_rows[l] {
                    for &(cv, wv) in vrow {
                        let mut line = 0.0;
                        for &(cu, wu) in urow {
                            line += wu * xb[self.hr_idx(cu, cv, cs)];
                        }
                        acc += wl * wv * line;
                    }
                }
                out[u + v * mu] = acc;
            }
        }
    }

    /// Transpose of [`Self::project_slice`], accumulating into `acc`.
    fn project_slice_adjoint(&self, y: &[f64], l: usize, acc: &mut [f64]) {
        let (mu, _mv) = self.geometry.matrix;
        for (v, vrow) in self.v_rows.iter().enumerate() {
            for (u, urow) in self.u_rows.iter().enumerate() {
                let val = y[u + v * mu];
                if val == 0.0 {
                    continue;
                }
                for &(cs, wl) in &self.l_rows[l] {
                    for &(cv, wv) in vrow {
                        let w = val * wl * wv;
                        for &(cu, wu) in urow {
                            acc[self.hr_idx(cu, cv, cs)] += w * wu;
                        }
                    }
                }
            }
        }
    }

    /// Maps an HR volume (as a flat slice) to LR stack data.
    pub fn apply_raw(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.domain_len());
        let per_slice = self.geometry.matrix.0 * self.geometry.matrix.1;
        let mut out = vec![0.0; self.range_len()];
        if self.identity_motion() {
            let xb = self.blur(x);
            out.par_chunks_mut(per_slice).enumerate().for_each(|(l, slice)| {
                self.project_slice(&xb, l, slice);
            });
        } else {
            for (l, slice) in out.chunks_mut(per_slice).enumerate() {
                let xm = if self.motion[l].is_identity() {
                    x.to_vec()
                } else {
                    self.motion_resample(x, &self.motion[l])
                };
                let xb = self.blur(&xm);
                self.project_slice(&xb, l, slice);
            }
        }
        out
    }

    /// Exact transpose of [`Self::apply_raw`].
    pub fn adjoint_raw(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.range_len());
        let per_slice = self.geometry.matrix.0 * self.geometry.matrix.1;
        if self.identity_motion() {
            let mut acc = vec![0.0; self.domain_len()];
            for (l, slice) in y.chunks(per_slice).enumerate() {
                self.project_slice_adjoint(slice, l, &mut acc);
            }
            self.blur_adjoint(&acc)
        } else {
            let mut total = vec![0.0; self.domain_len()];
            for (l, slice) in y.chunks(per_slice).enumerate() {
                let mut acc = vec![0.0; self.domain_len()];
                self.project_slice_adjoint(slice, l, &mut acc);
                let bt = self.blur_adjoint(&acc);
                let mt = if self.motion[l].is_identity() {
                    bt
                } else {
                    self.motion_resample_adjoint(&bt, &self.motion[l])
                };
                for (t, v) in total.iter_mut().zip(&mt) {
                    *t += v;
                }
            }
            total
        }
    }

    /// Applies the operator to a volume, checking grid compatibility.
    pub fn apply(&self, x: &Volume3D) -> Result<Vec<f64>> {
        if !x.grid().approx_eq(&self.hr_grid, GRID_TOL) {
            return Err(Error::GridMismatch("input volume is not on the operator's HR grid".into()));
        }
        Ok(self.apply_raw(x.data()))
    }

    /// Adjoint of [`Self::apply`] as an HR volume.
    pub fn adjoint(&self, y: &[f64]) -> Result<Volume3D> {
        if y.len() != self.range_len() {
            return Err(Error::InvalidArgument(format!(
                "adjoint input length {} != operator range {}",
                y.len(),
                self.range_len()
            )));
        }
        Volume3D::new(self.hr_grid.clone(), self.adjoint_raw(y))
    }
}

/// Simulation knobs beyond the linear operator itself.
#[derive(Debug, Clone, PartialEq)]
pub struct SimKnobs {
    pub noise_sigma: f64,
    pub kspace_truncation: f64,
    pub first_echo_offset: f64,
    pub is_first_echo: bool,
    pub seed: u64,
}

impl Default for SimKnobs {
    fn default() -> Self {
        SimKnobs {
            noise_sigma: 0.0,
            kspace_truncation: 1.0,
            first_echo_offset: 0.0,
            is_first_echo: false,
            seed: 0,
        }
    }
}

/// Simulates one LR series at a given echo time: exponential contrast,
/// optional first-echo offset, the forward operator, optional k-space
/// truncation (Gibbs ringing), and Rician noise.
///
/// Noise is the magnitude of (s + σ·g1, σ·g2) with g1, g2 standard normal
/// from a counter generator keyed by (seed, series, slice, pixel); σ = 0 is
/// bit-exact with the noiseless path.
pub fn simulate_series(
    m0: &Volume3D,
    t2: &Volume3D,
    op: &ForwardOperator,
    series_index: usize,
    te_ms: f64,
    knobs: &SimKnobs,
) -> Result<LRSeries> {
    if !(knobs.kspace_truncation > 0.0 && knobs.kspace_truncation <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "kspace_truncation must lie in (0, 1], got {}",
            knobs.kspace_truncation
        )));
    }
    if !(knobs.noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument("noise sigma must be >= 0".into()));
    }
    let mut contrast = contrast_volume(m0, t2, te_ms)?;
    if knobs.is_first_echo && knobs.first_echo_offset != 0.0 {
        let scale = 1.0 + knobs.first_echo_offset;
        for v in contrast.data_mut() {
            *v *= scale;
        }
    }
    let mut data = op.apply(&contrast)?;

    let (mu, mv) = op.geometry().matrix;
    let per_slice = mu * mv;
    if knobs.kspace_truncation < 1.0 {
        data.par_chunks_mut(per_slice).for_each(|slice| {
            truncate_phase_encode(slice, mu, mv, knobs.kspace_truncation);
        });
    }
    if knobs.noise_sigma > 0.0 {
        let sigma = knobs.noise_sigma;
        let seed = knobs.seed;
        data.par_chunks_mut(per_slice).enumerate().for_each(|(l, slice)| {
            for (pix, s) in slice.iter_mut().enumerate() {
                let mut rng =
                    CounterRng::from_key(&[seed, series_index as u64, l as u64, pix as u64]);
                let (g1, g2) = rng.next_normal_pair();
                let re = *s + sigma * g1;
                let im = sigma * g2;
                *s = (re * re + im * im).sqrt();
            }
        });
    } else {
        // Magnitude convention even without noise: values must be >= 0.
        for v in data.iter_mut() {
            *v = v.abs();
        }
    }
    LRSeries::new(op.geometry().clone(), te_ms, series_index, data)
}
