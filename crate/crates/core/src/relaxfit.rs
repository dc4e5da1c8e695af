//! Voxel-wise T2 estimation: Levenberg-Marquardt fits of the exponential
//! decay model `s(te) = m0 * exp(-te/t2)` across echo times, with optional
//! exclusion of the first echoes and a log-linear initializer.

use rayon::prelude::*;

use crate::acquire::GRID_TOL;
use crate::error::{Error, Result};
use crate::volgrid::Volume3D;

/// Sentinel stored in SD and R^2 maps where the estimate is undefined,
/// keeping volumes free of NaN.
pub const UNSET_SENTINEL: f64 = -1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    /// Echoes dropped from the start of the TE list before fitting.
    pub skip_first_n: usize,
    pub t2_bounds_ms: (f64, f64),
    pub m0_bounds: (f64, f64),
    pub max_iters: usize,
    /// Relative RSS improvement below which the iteration stops.
    pub ftol: f64,
    /// Samples at or below this level are unusable for the log initializer.
    pub signal_floor: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            skip_first_n: 1,
            t2_bounds_ms: (1.0, 5000.0),
            m0_bounds: (0.0, 1e9),
            max_iters: 50,
            ftol: 1e-10,
            signal_floor: 1e-6,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t2_bounds_ms.0 > 0.0 && self.t2_bounds_ms.0 < self.t2_bounds_ms.1) {
            return Err(Error::InvalidArgument("t2 bounds must be ordered and positive".into()));
        }
        if !(self.m0_bounds.0 >= 0.0 && self.m0_bounds.0 < self.m0_bounds.1) {
            return Err(Error::InvalidArgument("m0 bounds must be ordered".into()));
        }
        if self.max_iters < 1 {
            return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// Result of one voxel fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelFit {
    pub m0: f64,
    pub t2_ms: f64,
    /// LM covariance estimate sqrt(RSS/(n-2) * [(J^T J)^-1]_t2,t2);
    /// [`UNSET_SENTINEL`] when unavailable.
    pub t2_sd_ms: f64,
    /// Coefficient of determination; [`UNSET_SENTINEL`] when undefined.
    pub r2: f64,
    pub converged: bool,
}

impl VoxelFit {
    fn failed() -> Self {
        VoxelFit { m0: 0.0, t2_ms: 0.0, t2_sd_ms: UNSET_SENTINEL, r2: UNSET_SENTINEL, converged: false }
    }
}

/// Voxel-wise maps produced by [`fit_volume`].
#[derive(Debug, Clone)]
pub struct T2FitResult {
    pub t2_map: Volume3D,
    pub m0_map: Volume3D,
    pub t2_sd_map: Volume3D,
    pub r2_map: Volume3D,
    pub converged_mask: Vec<bool>,
}

impl T2FitResult {
    pub fn n_converged(&self) -> usize {
        self.converged_mask.iter().filter(|&&c| c).count()
    }
}

/// Ordinary least squares of ln(signal) against TE over samples above the
/// floor; the slope gives t2 = -1/slope (clamped into bounds), the intercept
/// gives m0.
pub fn loglinear_init(
    signal: &[f64],
    te_ms: &[f64],
    cfg: &FitConfig,
) -> Result<(f64, f64)> {
    let usable: Vec<(f64, f64)> = signal
        .iter()
        .zip(te_ms)
        .filter(|(&s, _)| s > cfg.signal_floor)
        .map(|(&s, &t)| (t, s.ln()))
        .collect();
    if usable.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "log-linear init needs >= 2 samples above the floor, found {}",
            usable.len()
        )));
    }
    let n = usable.len() as f64;
    let mean_t: f64 = usable.iter().map(|(t, _)| t).sum::<f64>() / n;
    let mean_y: f64 = usable.iter().map(|(_, y)| y).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (t, y) in &usable {
        sxx += (t - mean_t) * (t - mean_t);
        sxy += (t - mean_t) * (y - mean_y);
    }
    if sxx <= 0.0 {
        return Err(Error::InvalidArgument("log-linear init needs distinct echo times".into()));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_t;
    let t2 = if slope < 0.0 { -1.0 / slope } else { cfg.t2_bounds_ms.1 };
    let t2 = t2.clamp(cfg.t2_bounds_ms.0, cfg.t2_bounds_ms.1);
    let m0 = intercept.exp().clamp(cfg.m0_bounds.0, cfg.m0_bounds.1);
    Ok((m0, t2))
}

#[inline]
fn rss_at(signal: &[f64], te: &[f64], m0: f64, t2: f64) -> f64 {
    signal
        .iter()
        .zip(te)
        .map(|(&s, &t)| {
            let r = m0 * (-t / t2).exp() - s;
            r * r
        })
        .sum()
}

/// Fits one voxel's decay. Preconditions (matching lengths, enough samples)
/// produce errors; numerically degenerate voxels come back with
/// `converged = false` and sentinel SD/R^2 values.
pub fn fit_voxel(signal: &[f64], te_ms: &[f64], cfg: &FitConfig) -> Result<VoxelFit> {
    cfg.validate()?;
    if signal.len() != te_ms.len() {
        return Err(Error::InvalidArgument(format!(
            "signal length {} != te length {}",
            signal.len(),
            te_ms.len()
        )));
    }
    if signal.len() < cfg.skip_first_n + 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least skip_first_n + 2 = {} samples, got {}",
            cfg.skip_first_n + 2,
            signal.len()
        )));
    }
    let s = &signal[cfg.skip_first_n..];
    let te = &te_ms[cfg.skip_first_n..];

    let (mut m0, mut t2) = match loglinear_init(s, te, cfg) {
        Ok(init) => init,
        Err(_) => return Ok(VoxelFit::failed()),
    };

    let mut rss = rss_at(s, te, m0, t2);
    let mut mu = 1e-3;
    let mut converged = false;
    let mut singular = false;

    for _ in 0..cfg.max_iters {
        // Normal equations with the analytic Jacobian:
        // d r / d m0 = exp(-te/t2), d r / d t2 = m0 * te / t2^2 * exp(-te/t2).
        let mut a11 = 0.0;
        let mut a12 = 0.0;
        let mut a22 = 0.0;
        let mut g1 = 0.0;
        let mut g2 = 0.0;
        for (&sv, &tv) in s.iter().zip(te) {
            let e = (-tv / t2).exp();
            let j1 = e;
            let j2 = m0 * tv / (t2 * t2) * e;
            let r = m0 * e - sv;
            a11 += j1 * j1;
            a12 += j1 * j2;
            a22 += j2 * j2;
            g1 += j1 * r;
            g2 += j2 * r;
        }
        if rss == 0.0 || (g1.abs() < 1e-14 && g2.abs() < 1e-14) {
            converged = true;
            break;
        }
        let mut accepted = false;
        loop {
            let d11 = a11 * (1.0 + mu);
            let d22 = a22 * (1.0 + mu);
            let det = d11 * d22 - a12 * a12;
            if det.abs() < 1e-300 || a11 == 0.0 || a22 == 0.0 {
                singular = true;
                break;
            }
            let dm0 = -(d22 * g1 - a12 * g2) / det;
            let dt2 = -(d11 * g2 - a12 * g1) / det;
            let cand_m0 = (m0 + dm0).clamp(cfg.m0_bounds.0, cfg.m0_bounds.1);
            let cand_t2 = (t2 + dt2).clamp(cfg.t2_bounds_ms.0, cfg.t2_bounds_ms.1);
            let cand_rss = rss_at(s, te, cand_m0, cand_t2);
            if cand_rss < rss {
                let improvement = (rss - cand_rss) / rss.max(f64::MIN_POSITIVE);
                m0 = cand_m0;
                t2 = cand_t2;
                rss = cand_rss;
                mu = (mu / 3.0).max(1e-12);
                accepted = true;
                if improvement <= cfg.ftol {
                    converged = true;
                }
                break;
            }
            mu *= 10.0;
            if mu > 1e12 {
                // No downhill step exists at this scale; treat as converged.
                converged = true;
                break;
            }
        }
        if singular || converged || !accepted {
            break;
        }
    }

    if singular {
        return Ok(VoxelFit { m0, t2_ms: t2, t2_sd_ms: UNSET_SENTINEL, r2: UNSET_SENTINEL, converged: false });
    }

    // Covariance estimate from the undamped normal matrix at the optimum.
    let n = s.len() as f64;
    let mut a11 = 0.0;
    let mut a12 = 0.0;
    let mut a22 = 0.0;
    for &tv in te {
        let e = (-tv / t2).exp();
        let j1 = e;
        let j2 = m0 * tv / (t2 * t2) * e;
        a11 += j1 * j1;
        a12 += j1 * j2;
        a22 += j2 * j2;
    }
    let det = a11 * a22 - a12 * a12;
    let t2_sd = if s.len() > 2 && det > 1e-300 {
        let var = rss / (n - 2.0) * (a11 / det);
        var.max(0.0).sqrt()
    } else if det > 1e-300 && rss <= 1e-20 {
        0.0
    } else {
        UNSET_SENTINEL
    };

    let mean_s: f64 = s.iter().sum::<f64>() / n;
    let tss: f64 = s.iter().map(|&v| (v - mean_s) * (v - mean_s)).sum();
    let r2 = if tss > 1e-300 { 1.0 - rss / tss } else { UNSET_SENTINEL };

    Ok(VoxelFit { m0, t2_ms: t2, t2_sd_ms: t2_sd, r2, converged })
}

/// Applies [`fit_voxel`] independently to every masked voxel across a stack
/// of per-TE volumes. Unmasked voxels carry zeros in all maps.
pub fn fit_volume(
    volumes: &[Volume3D],
    te_ms: &[f64],
    mask: &[bool],
    cfg: &FitConfig,
) -> Result<T2FitResult> {
    cfg.validate()?;
    if volumes.len() != te_ms.len() {
        return Err(Error::InvalidArgument(format!(
            "{} volumes but {} echo times",
            volumes.len(),
            te_ms.len()
        )));
    }
    if volumes.is_empty() {
        return Err(Error::InvalidArgument("no volumes to fit".into()));
    }
    let grid = volumes[0].grid().clone();
    for v in volumes {
        if !v.grid().approx_eq(&grid, GRID_TOL) {
            return Err(Error::GridMismatch("fit volumes are on different grids".into()));
        }
    }
    if mask.len() != grid.len() {
        return Err(Error::GridMismatch("mask length does not match the grid".into()));
    }

    let results: Vec<Option<VoxelFit>> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            if !mask[idx] {
                return None;
            }
            let signal: Vec<f64> = volumes.iter().map(|v| v.data()[idx]).collect();
            Some(fit_voxel(&signal, te_ms, cfg).expect("preconditions checked at volume level"))
        })
        .collect();

    let n = grid.len();
    let mut t2 = vec![0.0; n];
    let mut m0 = vec![0.0; n];
    let mut sd = vec![0.0; n];
    let mut r2 = vec![0.0; n];
    let mut converged = vec![false; n];
    for (idx, r) in results.into_iter().enumerate() {
        if let Some(f) = r {
            t2[idx] = f.t2_ms;
            m0[idx] = f.m0;
            sd[idx] = f.t2_sd_ms;
            r2[idx] = f.r2;
            converged[idx] = f.converged;
        }
    }
    Ok(T2FitResult {
        t2_map: Volume3D::new(grid.clone(), t2)?,
        m0_map: Volume3D::new(grid.clone(), m0)?,
        t2_sd_map: Volume3D::new(grid.clone(), sd)?,
        r2_map: Volume3D::new(grid, r2)?,
        converged_mask: converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquire::{ideal_signal, te_schedule, CounterRng};
    use crate::volgrid::Grid3D;

    fn decay(m0: f64, t2: f64, te: &[f64]) -> Vec<f64> {
        te.iter().map(|&t| ideal_signal(m0, t2, t)).collect()
    }

    #[test]
    fn loglinear_exact_on_exact_data() {
        let te = [90.0, 140.0, 190.0, 240.0];
        let s = decay(1000.0, 200.0, &te);
        let (m0, t2) = loglinear_init(&s, &te, &FitConfig::default()).unwrap();
        assert!((m0 - 1000.0).abs() / 1000.0 < 1e-9);
        assert!((t2 - 200.0).abs() / 200.0 < 1e-9);
    }

    #[test]
    fn loglinear_two_point_analytic() {
        let te = [0.0, 100.0];
        let s = [1000.0, 367.879441171];
        let (m0, t2) = loglinear_init(&s, &te, &FitConfig::default()).unwrap();
        assert!((t2 - 100.0).abs() < 1e-6);
        assert!((m0 - 1000.0).abs() < 1e-4);
    }

    #[test]
    fn loglinear_fails_below_floor() {
        let te = [90.0, 140.0, 190.0];
        let s = [1e-9, 1e-9, 1e-9];
        assert!(loglinear_init(&s, &te, &FitConfig::default()).is_err());
    }

    #[test]
    fn exact_model_recovery() {
        let te = te_schedule(6, 90.0, 298.0).unwrap();
        for t2_true in [428.3, 258.4, 186.1] {
            let s = decay(1000.0, t2_true, &te);
            let cfg = FitConfig { skip_first_n: 1, ..Default::default() };
            let fit = fit_voxel(&s, &te, &cfg).unwrap();
            assert!(fit.converged);
            assert!(
                (fit.t2_ms - t2_true).abs() / t2_true < 1e-6,
                "t2 {t2_true}: got {}",
                fit.t2_ms
            );
            assert!((fit.r2 - 1.0).abs() < 1e-12, "r2 {}", fit.r2);
            assert!(fit.t2_sd_ms.abs() < 1e-9, "sd {}", fit.t2_sd_ms);
        }
    }

    #[test]
    fn first_echo_offset_excluded_by_skip() {
        let te = te_schedule(6, 90.0, 298.0).unwrap();
        let mut s = decay(1000.0, 258.4, &te);
        s[0] *= 1.10;
        let cfg = FitConfig { skip_first_n: 1, ..Default::default() };
        let fit = fit_voxel(&s, &te, &cfg).unwrap();
        assert!((fit.t2_ms - 258.4).abs() / 258.4 < 1e-6, "got {}", fit.t2_ms);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        // Central differences at random interior parameter points.
        let te = te_schedule(8, 90.0, 298.0).unwrap();
        let mut rng = CounterRng::from_seed(17);
        for _ in 0..25 {
            let m0 = 500.0 + rng.next_f64() * 1000.0;
            let t2 = 100.0 + rng.next_f64() * 300.0;
            for &tv in &te {
                let model = |m: f64, t: f64| m * (-tv / t).exp();
                let e = (-tv / t2).exp();
                let j1 = e;
                let j2 = m0 * tv / (t2 * t2) * e;
                let hm = 1e-6 * m0;
                let ht = 1e-6 * t2;
                let fd1 = (model(m0 + hm, t2) - model(m0 - hm, t2)) / (2.0 * hm);
                let fd2 = (model(m0, t2 + ht) - model(m0, t2 - ht)) / (2.0 * ht);
                assert!((j1 - fd1).abs() <= 1e-5 * fd1.abs().max(1e-12), "{j1} vs {fd1}");
                assert!((j2 - fd2).abs() <= 1e-5 * fd2.abs().max(1e-12), "{j2} vs {fd2}");
            }
        }
    }

    #[test]
    fn fit_invariant_to_signal_scaling() {
        let te = te_schedule(6, 90.0, 298.0).unwrap();
        let mut s = decay(800.0, 310.0, &te);
        // Perturb so the fit is not trivially exact.
        let mut rng = CounterRng::from_seed(4);
        for v in &mut s {
            *v *= 1.0 + 0.01 * (rng.next_f64() - 0.5);
        }
        let cfg = FitConfig::default();
        let base = fit_voxel(&s, &te, &cfg).unwrap();
        let alpha = 3.5;
        let scaled: Vec<f64> = s.iter().map(|v| alpha * v).collect();
        let fit = fit_voxel(&scaled, &te, &cfg).unwrap();
        assert!((fit.t2_ms - base.t2_ms).abs() / base.t2_ms < 1e-9);
        assert!((fit.m0 - alpha * base.m0).abs() / (alpha * base.m0) < 1e-9);
    }

    #[test]
    fn fit_invariant_to_sample_permutation() {
        let te = te_schedule(6, 90.0, 298.0).unwrap();
        let mut s = decay(900.0, 250.0, &te);
        let mut rng = CounterRng::from_seed(8);
        for v in &mut s {
            *v *= 1.0 + 0.02 * (rng.next_f64() - 0.5);
        }
        let cfg = FitConfig { skip_first_n: 0, ..Default::default() };
        let base = fit_voxel(&s, &te, &cfg).unwrap();
        // Reverse both lists jointly.
        let te_r: Vec<f64> = te.iter().rev().copied().collect();
        let s_r: Vec<f64> = s.iter().rev().copied().collect();
        let fit = fit_voxel(&s_r, &te_r, &cfg).unwrap();
        assert!((fit.t2_ms - base.t2_ms).abs() < 1e-9);
        assert!((fit.m0 - base.m0).abs() < 1e-9);
    }

    #[test]
    fn lm_never_worse_than_init() {
        let te = te_schedule(6, 90.0, 298.0).unwrap();
        let mut rng = CounterRng::from_seed(23);
        for _ in 0..50 {
            let t2_true = 150.0 + rng.next_f64() * 250.0;
            let mut s = decay(1000.0, t2_true, &te);
            for v in &mut s {
                *v *= 1.0 + 0.05 * (rng.next_f64() - 0.5);
            }
            let cfg = FitConfig { skip_first_n: 0, ..Default::default() };
            let (m0_i, t2_i) = loglinear_init(&s, &te, &cfg).unwrap();
            let rss_init = rss_at(&s, &te, m0_i, t2_i);
            let fit = fit_voxel(&s, &te, &cfg).unwrap();
            let rss_fit = rss_at(&s, &te, fit.m0, fit.t2_ms);
            assert!(rss_fit <= rss_init + 1e-12, "{rss_fit} > {rss_init}");
        }
    }

    #[test]
    fn mc_noise_sd_matches_reported_sd() {
        // 500 Monte-Carlo draws at 1% Gaussian noise: the sample SD of the
        // fitted t2 should match the mean reported covariance SD within 20%.
        let te = te_schedule(6, 90.0, 298.0).unwrap();
        let (m0_true, t2_true) = (1000.0, 258.4);
        let clean = decay(m0_true, t2_true, &te);
        let sigma = 0.01 * m0_true;
        let cfg = FitConfig { skip_first_n: 0, ..Default::default() };
        let mut t2s = Vec::new();
        let mut sds = Vec::new();
        for draw in 0..500u64 {
            let mut rng = CounterRng::from_key(&[42, draw]);
            let s: Vec<f64> = clean
                .iter()
                .map(|&v| {
                    let (g, _) = rng.next_normal_pair();
                    v + sigma * g
                })
                .collect();
            let fit = fit_voxel(&s, &te, &cfg).unwrap();
            assert!(fit.converged);
            t2s.push(fit.t2_ms);
            sds.push(fit.t2_sd_ms);
        }
        let mean_t2: f64 = t2s.iter().sum::<f64>() / t2s.len() as f64;
        let sample_sd: f64 = (t2s.iter().map(|v| (v - mean_t2) * (v - mean_t2)).sum::<f64>()
            / t2s.len() as f64)
            .sqrt();
        let mean_sd: f64 = sds.iter().sum::<f64>() / sds.len() as f64;
        assert!(
            (sample_sd - mean_sd).abs() / sample_sd < 0.20,
            "sample SD {sample_sd} vs mean reported SD {mean_sd}"
        );
    }

    #[test]
    fn fit_volume_empty_mask_is_zero() {
        let g = Grid3D::centered([3, 3, 2], [1.0; 3]).unwrap();
        let te = te_schedule(4, 90.0, 298.0).unwrap();
        let vols: Vec<Volume3D> =
            te.iter().map(|&t| Volume3D::constant(g.clone(), ideal_signal(100.0, 50.0, t)).unwrap()).collect();
        let mask = vec![false; g.len()];
        let out = fit_volume(&vols, &te, &mask, &FitConfig::default()).unwrap();
        assert!(out.t2_map.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.n_converged(), 0);
    }

    #[test]
    fn fit_volume_single_voxel_matches_fit_voxel() {
        let g = Grid3D::centered([2, 2, 2], [1.0; 3]).unwrap();
        let te = te_schedule(5, 90.0, 298.0).unwrap();
        let idx = 5;
        let mut vols = Vec::new();
        for &t in &te {
            let mut v = Volume3D::zeros(g.clone());
            v.data_mut()[idx] = ideal_signal(750.0, 180.0, t) * 1.01;
            vols.push(v);
        }
        let mut mask = vec![false; g.len()];
        mask[idx] = true;
        let cfg = FitConfig::default();
        let out = fit_volume(&vols, &te, &mask, &cfg).unwrap();
        let signal: Vec<f64> = vols.iter().map(|v| v.data()[idx]).collect();
        let single = fit_voxel(&signal, &te, &cfg).unwrap();
        assert_eq!(out.t2_map.data()[idx], single.t2_ms);
        assert_eq!(out.m0_map.data()[idx], single.m0);
        assert_eq!(out.t2_sd_map.data()[idx], single.t2_sd_ms);
        assert_eq!(out.r2_map.data()[idx], single.r2);
    }

    #[test]
    fn volume_te_mismatch_rejected() {
        let g = Grid3D::centered([2, 2, 2], [1.0; 3]).unwrap();
        let vols = vec![Volume3D::zeros(g.clone()), Volume3D::zeros(g.clone())];
        let mask = vec![true; g.len()];
        assert!(fit_volume(&vols, &[90.0, 120.0, 150.0], &mask, &FitConfig::default()).is_err());
    }
}
