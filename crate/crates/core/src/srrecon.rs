//! Total-variation regularized super-resolution: fuses orthogonal LR series
//! into one isotropic HR volume by minimizing
//!
//! ```text
//!   (lambda/2) * sum_k ||H_k x - y_k||^2  +  ||x||_TV
//! ```
//!
//! with a Chambolle-Pock primal-dual splitting. The TV term uses exact
//! (non-smoothed) isotropic total variation via its dual projection; forward
//! differences with replicate boundary and the matching negative-adjoint
//! divergence keep <grad x, p> = -<x, div p> to machine precision.

use rayon::prelude::*;

use crate::acquire::{CounterRng, ForwardOperator, LRSeries, GRID_TOL};
use crate::error::{Error, Result};
use crate::volgrid::{Grid3D, Volume3D};

/// Parameters of the primal-dual solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Weight on the data-fidelity term (the TV term has unit weight).
    pub lambda: f64,
    pub max_iters: usize,
    /// Stop when the relative iterate change falls below this.
    pub rel_tol: f64,
    pub operator_norm_iters: usize,
    /// Internal numerical floor for relative-change denominators.
    pub tv_epsilon: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            lambda: 0.75,
            max_iters: 300,
            rel_tol: 1e-5,
            operator_norm_iters: 30,
            tv_epsilon: 1e-12,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidArgument("lambda must be > 0".into()));
        }
        if self.max_iters < 1 {
            return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::InvalidArgument("rel_tol must be > 0".into()));
        }
        if self.operator_norm_iters < 1 {
            return Err(Error::InvalidArgument("operator_norm_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// One super-resolution problem: series sharing a TE plus the target grid.
#[derive(Debug, Clone)]
pub struct SRProblem {
    pub series: Vec<(LRSeries, ForwardOperator)>,
    pub target_grid: Grid3D,
    pub config: SolverConfig,
}

impl SRProblem {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.series.is_empty() {
            return Err(Error::InvalidArgument("SR problem has no series".into()));
        }
        let te = self.series[0].0.te_ms;
        for (s, op) in &self.series {
            if (s.te_ms - te).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "series mix echo times {te} and {}",
                    s.te_ms
                )));
            }
            if !op.hr_grid().approx_eq(&self.target_grid, GRID_TOL) {
                return Err(Error::GridMismatch(
                    "operator HR grid differs from the target grid".into(),
                ));
            }
            if s.data().len() != op.range_len() {
                return Err(Error::InvalidArgument(
                    "series length does not match its operator range".into(),
                ));
            }
            if s.geometry != *op.geometry() {
                return Err(Error::InvalidArgument(
                    "series geometry differs from its operator".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Per-iteration solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationStat {
    pub iteration: usize,
    pub objective: f64,
    pub fidelity: f64,
    pub tv: f64,
    /// Relative iterate change; absent for the initial point.
    pub rel_change: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ConvergenceReport {
    pub stats: Vec<IterationStat>,
    pub operator_norm: f64,
    pub converged: bool,
}

impl ConvergenceReport {
    pub fn initial_objective(&self) -> f64 {
        self.stats.first().map(|s| s.objective).unwrap_or(f64::NAN)
    }

    pub fn final_objective(&self) -> f64 {
        self.stats.last().map(|s| s.objective).unwrap_or(f64::NAN)
    }

    pub fn final_fidelity(&self) -> f64 {
        self.stats.last().map(|s| s.fidelity).unwrap_or(f64::NAN)
    }

    pub fn iterations(&self) -> usize {
        self.stats.last().map(|s| s.iteration).unwrap_or(0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,objective,fidelity,tv,rel_change\n");
        for s in &self.stats {
            let rc = s.rel_change.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.iteration, s.objective, s.fidelity, s.tv, rc
            ));
        }
        out
    }
}

/// A real linear operator with an explicit adjoint.
pub trait LinOp: Sync {
    fn domain_len(&self) -> usize;
    fn range_len(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn adjoint(&self, y: &[f64]) -> Vec<f64>;
}

impl LinOp for ForwardOperator {
    fn domain_len(&self) -> usize {
        ForwardOperator::domain_len(self)
    }
    fn range_len(&self) -> usize {
        ForwardOperator::range_len(self)
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.apply_raw(x)
    }
    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        self.adjoint_raw(y)
    }
}

/// `scale * inner`.
pub struct ScaledOp<'a> {
    pub inner: &'a dyn LinOp,
    pub scale: f64,
}

impl LinOp for ScaledOp<'_> {
    fn domain_len(&self) -> usize {
        self.inner.domain_len()
    }
    fn range_len(&self) -> usize {
        self.inner.range_len()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.inner.apply(x);
        for v in &mut y {
            *v *= self.scale;
        }
        y
    }
    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        let mut x = self.inner.adjoint(y);
        for v in &mut x {
            *v *= self.scale;
        }
        x
    }
}

/// Forward-difference gradient with replicate boundary as a [`LinOp`]
/// (range is the three stacked components).
pub struct GradOp {
    pub dims: [usize; 3],
}

impl LinOp for GradOp {
    fn domain_len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }
    fn range_len(&self) -> usize {
        3 * self.domain_len()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.range_len()];
        gradient_into(self.dims, x, &mut g);
        g
    }
    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        // grad^T = -div.
        let mut d = divergence(self.dims, y);
        for v in &mut d {
            *v = -*v;
        }
        d
    }
}

/// Forward differences along each axis (zero at the far boundary), stacked
/// as [gx | gy | gz].
pub(crate) fn gradient_into(dims: [usize; 3], x: &[f64], g: &mut [f64]) {
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    assert_eq!(x.len(), n);
    assert_eq!(g.len(), 3 * n);
    let plane = nx * ny;
    let (gx, rest) = g.split_at_mut(n);
    let (gy, gz) = rest.split_at_mut(n);
    gx.par_chunks_mut(plane)
        .zip(gy.par_chunks_mut(plane))
        .zip(gz.par_chunks_mut(plane))
        .enumerate()
        .for_each(|(k, ((gxp, gyp), gzp))| {
            let base = k * plane;
            for j in 0..ny {
                for i in 0..nx {
                    let idx = i + j * nx;
                    let v = x[base + idx];
                    gxp[idx] = if i + 1 < nx { x[base + idx + 1] - v } else { 0.0 };
                    gyp[idx] = if j + 1 < ny { x[base + idx + nx] - v } else { 0.0 };
                    gzp[idx] = if k + 1 < nz { x[base + idx + plane] - v } else { 0.0 };
                }
            }
        });
}

/// Discrete divergence, the exact negative adjoint of [`gradient_into`]:
/// `<grad x, p> = -<x, div p>`.
pub(crate) fn divergence(dims: [usize; 3], p: &[f64]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    assert_eq!(p.len(), 3 * n);
    let plane = nx * ny;
    let (px, rest) = p.split_at(n);
    let (py, pz) = rest.split_at(n);
    let mut out = vec![0.0; n];
    out.par_chunks_mut(plane).enumerate().for_each(|(k, op)| {
        let base = k * plane;
        for j in 0..ny {
            for i in 0..nx {
                let idx = i + j * nx;
                let mut d = 0.0;
                if i + 1 < nx {
                    d += px[base + idx];
                }
                if i > 0 {
                    d -= px[base + idx - 1];
                }
                if j + 1 < ny {
                    d += py[base + idx];
                }
                if j > 0 {
                    d -= py[base + idx - nx];
                }
                if k + 1 < nz {
                    d += pz[base + idx];
                }
                if k > 0 {
                    d -= pz[base + idx - plane];
                }
                op[idx] = d;
            }
        }
    });
    out
}

/// Order-deterministic parallel dot product: fixed-size chunk partials
/// combined sequentially, so results do not depend on thread scheduling.
pub(crate) fn det_dot(a: &[f64], b: &[f64]) -> f64 {
    const CHUNK: usize = 8192;
    assert_eq!(a.len(), b.len());
    if a.len() <= CHUNK {
        return a.iter().zip(b).map(|(x, y)| x * y).sum();
    }
    let partials: Vec<f64> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(ca, cb)| ca.iter().zip(cb).map(|(x, y)| x * y).sum::<f64>())
        .collect();
    partials.iter().sum()
}

fn det_norm(v: &[f64]) -> f64 {
    det_dot(v, v).sqrt()
}

/// Isotropic discrete total variation: sum over voxels of
/// sqrt(dx^2 + dy^2 + dz^2) with forward differences and replicate boundary.
pub fn tv_seminorm(x: &Volume3D) -> f64 {
    let [nx, ny, nz] = x.grid().dims;
    let d = x.data();
    let plane = nx * ny;
    let partials: Vec<f64> = (0..nz)
        .into_par_iter()
        .map(|k| {
            let base = k * plane;
            let mut acc = 0.0;
            for j in 0..ny {
                for i in 0..nx {
                    let idx = base + i + j * nx;
                    let v = d[idx];
                    let dx = if i + 1 < nx { d[idx + 1] - v } else { 0.0 };
                    let dy = if j + 1 < ny { d[idx + nx] - v } else { 0.0 };
                    let dz = if k + 1 < nz { d[idx + plane] - v } else { 0.0 };
                    acc += (dx * dx + dy * dy + dz * dz).sqrt();
                }
            }
            acc
        })
        .collect();
    partials.iter().sum()
}

/// Value of the SR objective at `x`.
pub fn objective(x: &Volume3D, prob: &SRProblem) -> Result<f64> {
    if !x.grid().approx_eq(&prob.target_grid, GRID_TOL) {
        return Err(Error::GridMismatch("objective input is not on the target grid".into()));
    }
    let mut fidelity = 0.0;
    for (series, op) in &prob.series {
        let r = op.apply_raw(x.data());
        let mut acc = 0.0;
        for (a, b) in r.iter().zip(series.data()) {
            let d = a - b;
            acc += d * d;
        }
        fidelity += acc;
    }
    Ok(prob.config.lambda / 2.0 * fidelity + tv_seminorm(x))
}

/// Power-iteration estimate of the norm of the stacked operator
/// `K = [ops[0]; ops[1]; ...]`. The estimate is non-decreasing in `iters`
/// and uses a fixed deterministic start vector.
pub fn estimate_operator_norm(ops: &[&dyn LinOp], iters: usize) -> f64 {
    assert!(iters >= 1, "power iteration needs at least one iteration");
    assert!(!ops.is_empty());
    let n = ops[0].domain_len();
    assert!(ops.iter().all(|o| o.domain_len() == n));

    let mut rng = CounterRng::from_seed(POWER_ITERATION_SEED);
    let mut v: Vec<f64> = (0..n).map(|_| rng.next_f64() - 0.5).collect();
    let nv = det_norm(&v);
    if nv == 0.0 {
        return 0.0;
    }
    for x in &mut v {
        *x /= nv;
    }
    let mut est = 0.0;
    for _ in 0..iters {
        // w = K^T K v, est = sqrt(<v, w>) (Rayleigh quotient on K^T K).
        let mut w = vec![0.0; n];
        for op in ops {
            let kv = op.apply(&v);
            let ktkv = op.adjoint(&kv);
            for (acc, val) in w.iter_mut().zip(&ktkv) {
                *acc += val;
            }
        }
        let rq = det_dot(&v, &w).max(0.0);
        est = rq.sqrt();
        let nw = det_norm(&w);
        if nw == 0.0 {
            return 0.0;
        }
        for (x, y) in v.iter_mut().zip(&w) {
            *x = y / nw;
        }
    }
    est
}

/// Fixed start-vector seed so norm estimates are deterministic.
const POWER_ITERATION_SEED: u64 = 0x7332_0041;

/// Solves the TV super-resolution problem with primal-dual splitting.
///
/// Initialization is the normalized adjoint average
/// `sum_k H_k^T y_k / sum_k H_k^T 1` (denominator guarded); steps are
/// `tau = sigma = 0.99 / ||K||` with `K` the stacked scaled operator; the
/// iteration stops at `max_iters` or when the relative change of the iterate
/// drops below `rel_tol`.
pub fn sr_reconstruct(prob: &SRProblem) -> Result<(Volume3D, ConvergenceReport)> {
    prob.validate()?;
    let cfg = &prob.config;
    let lambda = cfg.lambda;
    let sqrt_lambda = lambda.sqrt();
    let n = prob.target_grid.len();
    let dims = prob.target_grid.dims;
    let tiny = cfg.tv_epsilon.max(f64::MIN_POSITIVE);

    // Step sizes from the stacked operator norm.
    let grad = GradOp { dims };
    let mut ops: Vec<ScaledOp> = prob
        .series
        .iter()
        .map(|(_, op)| ScaledOp { inner: op as &dyn LinOp, scale: sqrt_lambda })
        .collect();
    ops.push(ScaledOp { inner: &grad, scale: 1.0 });
    let op_refs: Vec<&dyn LinOp> = ops.iter().map(|o| o as &dyn LinOp).collect();
    let norm = estimate_operator_norm(&op_refs, cfg.operator_norm_iters);
    if !(norm > 0.0) {
        return Err(Error::Numeric {
            iteration: 0,
            detail: "stacked operator norm estimate is zero".into(),
        });
    }
    let tau = 0.99 / norm;
    let sigma = tau;

    // x0: normalized adjoint average.
    let mut num = vec![0.0; n];
    let mut den = vec![0.0; n];
    for (series, op) in &prob.series {
        let at_y = op.adjoint_raw(series.data());
        let at_1 = op.adjoint_raw(&vec![1.0; op.range_len()]);
        for i in 0..n {
            num[i] += at_y[i];
            den[i] += at_1[i];
        }
    }
    let den_max = den.iter().copied().fold(0.0f64, f64::max);
    let mut x: Vec<f64> = if den_max > 0.0 {
        let floor = 1e-6 * den_max;
        num.iter().zip(&den).map(|(a, b)| a / b.max(floor)).collect()
    } else {
        vec![0.0; n]
    };

    let mut report = ConvergenceReport { operator_norm: norm, ..Default::default() };
    let record = |x: &[f64], prob: &SRProblem, hx: &[Vec<f64>], iteration: usize, rel: Option<f64>| {
        let mut fid = 0.0;
        for ((series, _), pred) in prob.series.iter().zip(hx) {
            let mut acc = 0.0;
            for (a, b) in pred.iter().zip(series.data()) {
                let d = a - b;
                acc += d * d;
            }
            fid += acc;
        }
        let fidelity = lambda / 2.0 * fid;
        let tvv = tv_of_slice(dims, x);
        IterationStat { iteration, objective: fidelity + tvv, fidelity, tv: tvv, rel_change: rel }
    };

    let mut hx: Vec<Vec<f64>> = prob.series.iter().map(|(_, op)| op.apply_raw(&x)).collect();
    let mut hx_old = hx.clone();
    let mut x_old = x.clone();

    let stat0 = record(&x, prob, &hx, 0, None);
    if !stat0.objective.is_finite() {
        return Err(Error::Numeric { iteration: 0, detail: "initial objective non-finite".into() });
    }
    report.stats.push(stat0);

    let mut q: Vec<Vec<f64>> =
        prob.series.iter().map(|(_, op)| vec![0.0; op.range_len()]).collect();
    let mut p = vec![0.0; 3 * n];
    let mut xbar = x.clone();
    let mut grad_buf = vec![0.0; 3 * n];

    for iteration in 1..=cfg.max_iters {
        // Dual update for each data term: uses H x_bar via the cached
        // applications (H x_bar = 2 H x - H x_old).
        for (k, (series, _)) in prob.series.iter().enumerate() {
            let y = series.data();
            let qk = &mut q[k];
            let hxk = &hx[k];
            let hxok = &hx_old[k];
            qk.par_iter_mut().enumerate().for_each(|(i, qv)| {
                let hbar = 2.0 * hxk[i] - hxok[i];
                *qv = (*qv + sigma * sqrt_lambda * (hbar - y[i])) / (1.0 + sigma);
            });
        }

        // Dual update for the TV term: projection onto the unit ball of
        // pointwise 3-vector norms.
        xbar.par_iter_mut().enumerate().for_each(|(i, xv)| {
            *xv = 2.0 * x[i] - x_old[i];
        });
        gradient_into(dims, &xbar, &mut grad_buf);
        {
            let (px, rest) = p.split_at_mut(n);
            let (py, pz) = rest.split_at_mut(n);
            let (gx, grest) = grad_buf.split_at(n);
            let (gy, gz) = grest.split_at(n);
            px.par_iter_mut()
                .zip(py.par_iter_mut())
                .zip(pz.par_iter_mut())
                .enumerate()
                .for_each(|(i, ((vx, vy), vz))| {
                    let ax = *vx + sigma * gx[i];
                    let ay = *vy + sigma * gy[i];
                    let az = *vz + sigma * gz[i];
                    let scale = (ax * ax + ay * ay + az * az).sqrt().max(1.0);
                    *vx = ax / scale;
                    *vy = ay / scale;
                    *vz = az / scale;
                });
        }

        // Primal update: x <- x - tau * (sqrt(lambda) sum_k H_k^T q_k - div p).
        let mut back = vec![0.0; n];
        let adjoints: Vec<Vec<f64>> =
            prob.series.par_iter().zip(q.par_iter()).map(|((_, op), qk)| op.adjoint_raw(qk)).collect();
        for a in &adjoints {
            for (acc, v) in back.iter_mut().zip(a) {
                *acc += sqrt_lambda * v;
            }
        }
        let div_p = divergence(dims, &p);
        std::mem::swap(&mut x_old, &mut x);
        x.par_iter_mut().enumerate().for_each(|(i, xv)| {
            *xv = x_old[i] - tau * (back[i] - div_p[i]);
        });

        // Refresh cached applications for the objective and the next x_bar.
        std::mem::swap(&mut hx_old, &mut hx);
        for (k, (_, op)) in prob.series.iter().enumerate() {
            hx[k] = op.apply_raw(&x);
        }

        let diff_sq: f64 = {
            let partials: Vec<f64> = x
                .par_chunks(8192)
                .zip(x_old.par_chunks(8192))
                .map(|(ca, cb)| {
                    ca.iter().zip(cb).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                })
                .collect();
            partials.iter().sum()
        };
        let rel = diff_sq.sqrt() / det_norm(&x_old).max(tiny);
        let stat = record(&x, prob, &hx, iteration, Some(rel));
        if !stat.objective.is_finite() {
            return Err(Error::Numeric {
                iteration,
                detail: "objective became non-finite".into(),
            });
        }
        report.stats.push(stat);
        if rel < cfg.rel_tol {
            report.converged = true;
            break;
        }
    }

    let vol = Volume3D::new(prob.target_grid.clone(), x)?;
    Ok((vol, report))
}

/// TV of raw data on the given dims (internal; avoids a Volume3D round trip).
fn tv_of_slice(dims: [usize; 3], x: &[f64]) -> f64 {
    let [nx, ny, nz] = dims;
    let plane = nx * ny;
    let partials: Vec<f64> = (0..nz)
        .into_par_iter()
        .map(|k| {
            let base = k * plane;
            let mut acc = 0.0;
            for j in 0..ny {
                for i in 0..nx {
                    let idx = base + i + j * nx;
                    let v = x[idx];
                    let dx = if i + 1 < nx { x[idx + 1] - v } else { 0.0 };
                    let dy = if j + 1 < ny { x[idx + nx] - v } else { 0.0 };
                    let dz = if k + 1 < nz { x[idx + plane] - v } else { 0.0 };
                    acc += (dx * dx + dy * dy + dz * dz).sqrt();
                }
            }
            acc
        })
        .collect();
    partials.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquire::{Orientation, SeriesGeometry};

    #[test]
    fn tv_constant_is_zero() {
        let g = Grid3D::centered([6, 5, 4], [1.0; 3]).unwrap();
        let vol = Volume3D::constant(g, 9.5).unwrap();
        assert_eq!(tv_seminorm(&vol), 0.0);
    }

    #[test]
    fn tv_single_difference() {
        let g = Grid3D::centered([2, 1, 1], [1.0; 3]).unwrap();
        let vol = Volume3D::new(g, vec![0.0, 3.0]).unwrap();
        assert!((tv_seminorm(&vol) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn tv_central_impulse_matches_brute_force() {
        let h = 2.5;
        let g = Grid3D::centered([3, 3, 1], [1.0; 3]).unwrap();
        let mut vol = Volume3D::zeros(g.clone());
        vol.set(1, 1, 0, h);

        // Brute-force oracle: enumerate every forward difference directly.
        let dims = g.dims;
        let val = |i: isize, j: isize| -> f64 {
            if i == 1 && j == 1 {
                h
            } else {
                0.0
            }
        };
        let mut oracle = 0.0;
        for j in 0..dims[1] as isize {
            for i in 0..dims[0] as isize {
                let dx = if i + 1 < dims[0] as isize { val(i + 1, j) - val(i, j) } else { 0.0 };
                let dy = if j + 1 < dims[1] as isize { val(i, j + 1) - val(i, j) } else { 0.0 };
                oracle += (dx * dx + dy * dy).sqrt();
            }
        }
        assert!((tv_seminorm(&vol) - oracle).abs() < 1e-12);
        assert!((oracle - (2.0 + std::f64::consts::SQRT_2) * h).abs() < 1e-12);
    }

    #[test]
    fn gradient_divergence_adjoint_to_machine_precision() {
        let dims = [7, 6, 5];
        let n = dims[0] * dims[1] * dims[2];
        let mut rng = CounterRng::from_seed(11);
        let x: Vec<f64> = (0..n).map(|_| rng.next_f64() - 0.5).collect();
        let p: Vec<f64> = (0..3 * n).map(|_| rng.next_f64() - 0.5).collect();
        let mut g = vec![0.0; 3 * n];
        gradient_into(dims, &x, &mut g);
        let div_p = divergence(dims, &p);
        let lhs: f64 = g.iter().zip(&p).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&div_p).map(|(a, b)| a * b).sum();
        assert!((lhs + rhs).abs() < 1e-12 * lhs.abs().max(1.0), "<grad x,p>={lhs}, <x,div p>={rhs}");
    }

    struct DenseOp {
        rows: usize,
        cols: usize,
        a: Vec<f64>,
    }

    impl LinOp for DenseOp {
        fn domain_len(&self) -> usize {
            self.cols
        }
        fn range_len(&self) -> usize {
            self.rows
        }
        fn apply(&self, x: &[f64]) -> Vec<f64> {
            (0..self.rows)
                .map(|r| (0..self.cols).map(|c| self.a[r * self.cols + c] * x[c]).sum())
                .collect()
        }
        fn adjoint(&self, y: &[f64]) -> Vec<f64> {
            (0..self.cols)
                .map(|c| (0..self.rows).map(|r| self.a[r * self.cols + c] * y[r]).sum())
                .collect()
        }
    }

    fn identity_op(n: usize, scale: f64) -> DenseOp {
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n + i] = scale;
        }
        DenseOp { rows: n, cols: n, a }
    }

    #[test]
    fn operator_norm_identity_and_scaling() {
        let id = identity_op(8, 1.0);
        let est = estimate_operator_norm(&[&id], 10);
        assert!((est - 1.0).abs() < 1e-6, "estimate {est}");
        let two = identity_op(8, 2.0);
        let est = estimate_operator_norm(&[&two], 10);
        assert!((est - 2.0).abs() < 1e-6, "estimate {est}");
    }

    #[test]
    fn operator_norm_matches_dense_eigen_oracle() {
        let (rows, cols) = (12, 8);
        let mut rng = CounterRng::from_seed(5);
        let a: Vec<f64> = (0..rows * cols).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
        let op = DenseOp { rows, cols, a: a.clone() };
        let est = estimate_operator_norm(&[&op], 200);

        // Oracle: largest eigenvalue of the Gram matrix A^T A.
        let m = nalgebra::DMatrix::from_row_slice(rows, cols, &a);
        let gram = m.transpose() * &m;
        let eig = gram.symmetric_eigen();
        let want = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max).sqrt();
        assert!((est - want).abs() <= 1e-4 * want, "estimate {est} vs oracle {want}");
    }

    #[test]
    fn operator_norm_nondecreasing_in_iters() {
        let (rows, cols) = (10, 10);
        let mut rng = CounterRng::from_seed(9);
        let a: Vec<f64> = (0..rows * cols).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
        let op = DenseOp { rows, cols, a };
        let mut prev = 0.0;
        for iters in [1, 2, 4, 8, 16, 32, 64] {
            let est = estimate_operator_norm(&[&op], iters);
            assert!(est + 1e-12 >= prev, "estimate decreased: {est} < {prev}");
            prev = est;
        }
    }

    fn near_identity_operator(grid: &Grid3D) -> ForwardOperator {
        // Slice spacing equals HR spacing with sub-voxel slice profile, so
        // the forward map is exactly the identity on the grid.
        let s = grid.spacing[2];
        let geometry = SeriesGeometry {
            in_plane_spacing_mm: (grid.spacing[0], grid.spacing[1]),
            slice_thickness_mm: 0.4 * s,
            gap_fraction: 1.5,
            matrix: (grid.dims[0], grid.dims[1]),
            n_slices: grid.dims[2],
            orientation: Orientation::Axial,
        };
        ForwardOperator::new(grid.clone(), geometry).unwrap()
    }

    #[test]
    fn identity_operator_limit_recovers_data() {
        let g = Grid3D::centered([8, 8, 8], [1.0; 3]).unwrap();
        let op = near_identity_operator(&g);
        // Verify the operator really is the identity.
        let mut rng = CounterRng::from_seed(3);
        let probe: Vec<f64> = (0..g.len()).map(|_| rng.next_f64()).collect();
        let out = op.apply_raw(&probe);
        for (a, b) in probe.iter().zip(&out) {
            assert!((a - b).abs() < 1e-12);
        }

        // Smooth target.
        let mut y = Vec::with_capacity(g.len());
        for k in 0..8 {
            for j in 0..8 {
                for i in 0..8 {
                    y.push(10.0 + (i as f64 * 0.3).sin() + (j as f64 * 0.2).cos() + k as f64 * 0.05);
                }
            }
        }
        let series = LRSeries::new(op.geometry().clone(), 100.0, 0, y.clone()).unwrap();
        let prob = SRProblem {
            series: vec![(series, op)],
            target_grid: g,
            config: SolverConfig { lambda: 500.0, max_iters: 600, rel_tol: 1e-10, ..Default::default() },
        };
        let (x, report) = sr_reconstruct(&prob).unwrap();
        let num: f64 = x.data().iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let den: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num / den < 1e-3, "relative error {} too large", num / den);
        assert!(report.final_objective() <= report.initial_objective());
    }

    #[test]
    fn empty_series_rejected() {
        let g = Grid3D::centered([4, 4, 4], [1.0; 3]).unwrap();
        let prob =
            SRProblem { series: vec![], target_grid: g, config: SolverConfig::default() };
        assert!(matches!(sr_reconstruct(&prob), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn objective_zero_for_zero_problem() {
        let g = Grid3D::centered([6, 6, 6], [1.0; 3]).unwrap();
        let op = near_identity_operator(&g);
        let series = LRSeries::new(op.geometry().clone(), 50.0, 0, vec![0.0; op.range_len()]).unwrap();
        let prob = SRProblem {
            series: vec![(series, op)],
            target_grid: g.clone(),
            config: SolverConfig::default(),
        };
        let x = Volume3D::zeros(g);
        assert_eq!(objective(&x, &prob).unwrap(), 0.0);
    }

    #[test]
    fn objective_constant_consistency() {
        let g = Grid3D::centered([6, 6, 6], [1.0; 3]).unwrap();
        let op = near_identity_operator(&g);
        let c = 7.5;
        let series =
            LRSeries::new(op.geometry().clone(), 50.0, 0, vec![c; op.range_len()]).unwrap();
        let prob = SRProblem {
            series: vec![(series, op)],
            target_grid: g.clone(),
            config: SolverConfig::default(),
        };
        let x = Volume3D::constant(g, c).unwrap();
        assert!(objective(&x, &prob).unwrap().abs() < 1e-18);
    }

    #[test]
    fn objective_matches_dense_hand_sum() {
        // 2x2x1 toy problem against an explicitly built dense operator.
        let g = Grid3D::centered([2, 2, 1], [1.0; 3]).unwrap();
        let op = near_identity_operator_2d(&g);
        let n = g.len();
        // Build the dense matrix by probing basis vectors.
        let mut dense = vec![vec![0.0; n]; op.range_len()];
        for c in 0..n {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            let col = op.apply_raw(&e);
            for (r, &v) in col.iter().enumerate() {
                dense[r][c] = v;
            }
        }
        let x_data = vec![1.0, -2.0, 3.0, 0.5];
        let y_data = vec![0.2, 0.4, 0.1, 2.0];
        let lambda = 0.75;
        // Hand-summed objective from the dense matrix.
        let mut fid = 0.0;
        for (r, row) in dense.iter().enumerate() {
            let pred: f64 = row.iter().zip(&x_data).map(|(a, b)| a * b).sum();
            fid += (pred - y_data[r]).powi(2);
        }
        let x = Volume3D::new(g.clone(), x_data).unwrap();
        let hand = lambda / 2.0 * fid + tv_seminorm(&x);

        let series = LRSeries::new(op.geometry().clone(), 50.0, 0, y_data).unwrap();
        let prob = SRProblem {
            series: vec![(series, op)],
            target_grid: g,
            config: SolverConfig { lambda, ..Default::default() },
        };
        let got = objective(&x, &prob).unwrap();
        assert!((got - hand).abs() < 1e-12, "{got} vs {hand}");
    }

    fn near_identity_operator_2d(grid: &Grid3D) -> ForwardOperator {
        let s = grid.spacing[2];
        let geometry = SeriesGeometry {
            in_plane_spacing_mm: (grid.spacing[0], grid.spacing[1]),
            slice_thickness_mm: 0.4 * s,
            gap_fraction: 1.5,
            matrix: (grid.dims[0], grid.dims[1]),
            n_slices: grid.dims[2],
            orientation: Orientation::Axial,
        };
        ForwardOperator::new(grid.clone(), geometry).unwrap()
    }
}
