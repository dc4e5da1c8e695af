//! Gibbs-ringing simulation by k-space truncation along the phase-encode
//! direction of a 2D slice.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// Indices of the `n_keep` lowest-frequency DFT lines out of `n`, ordering
/// ties deterministically (negative frequency first at equal magnitude).
fn kept_lines(n: usize, n_keep: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| {
        let f = if i <= n / 2 { i as i64 } else { i as i64 - n as i64 };
        (f.abs(), f)
    });
    let mut keep = vec![false; n];
    for &i in &order[..n_keep] {
        keep[i] = true;
    }
    keep
}

/// Takes the 2D DFT of one slice (`nu` fastest), zeroes the outer
/// `1 - keep_fraction` of phase-encode lines (the second in-plane axis),
/// inverse-transforms, and returns the voxel-wise magnitude.
pub fn truncate_phase_encode(slice: &mut [f64], nu: usize, nv: usize, keep_fraction: f64) {
    assert_eq!(slice.len(), nu * nv);
    assert!(keep_fraction > 0.0 && keep_fraction <= 1.0);
    let n_keep = ((keep_fraction * nv as f64).round() as usize).clamp(1, nv);
    if n_keep == nv {
        return;
    }

    let mut planner = FftPlanner::<f64>::new();
    let fft_u = planner.plan_fft_forward(nu);
    let fft_v = planner.plan_fft_forward(nv);
    let ifft_u = planner.plan_fft_inverse(nu);
    let ifft_v = planner.plan_fft_inverse(nv);

    let mut buf: Vec<Complex64> = slice.iter().map(|&v| Complex64::new(v, 0.0)).collect();

    // Forward 2D DFT: rows along u, then columns along v.
    for row in buf.chunks_exact_mut(nu) {
        fft_u.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); nv];
    for u in 0..nu {
        for v in 0..nv {
            col[v] = buf[u + v * nu];
        }
        fft_v.process(&mut col);
        for v in 0..nv {
            buf[u + v * nu] = col[v];
        }
    }

    let keep = kept_lines(nv, n_keep);
    for v in 0..nv {
        if !keep[v] {
            for u in 0..nu {
                buf[u + v * nu] = Complex64::new(0.0, 0.0);
            }
        }
    }

    for u in 0..nu {
        for v in 0..nv {
            col[v] = buf[u + v * nu];
        }
        ifft_v.process(&mut col);
        for v in 0..nv {
            buf[u + v * nu] = col[v];
        }
    }
    for row in buf.chunks_exact_mut(nu) {
        ifft_u.process(row);
    }

    let scale = 1.0 / (nu * nv) as f64;
    for (out, c) in slice.iter_mut().zip(&buf) {
        *out = (c * scale).norm();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_fraction_is_identity() {
        let mut data: Vec<f64> = (0..30).map(|i| (i as f64 * 0.7).sin() + 2.0).collect();
        let orig = data.clone();
        truncate_phase_encode(&mut data, 5, 6, 1.0);
        assert_eq!(data, orig);
    }

    #[test]
    fn constant_image_survives_truncation() {
        // All energy sits in the DC line, which is always kept.
        let mut data = vec![3.0; 8 * 8];
        truncate_phase_encode(&mut data, 8, 8, 0.5);
        for &v in &data {
            assert!((v - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn step_edge_rings_after_truncation() {
        // A sharp edge along the phase-encode axis gains over/undershoot.
        let (nu, nv) = (4, 64);
        let mut data = vec![0.0; nu * nv];
        for v in 0..nv / 2 {
            for u in 0..nu {
                data[u + v * nu] = 100.0;
            }
        }
        let flat = data.clone();
        truncate_phase_encode(&mut data, nu, nv, 0.6);
        let overshoot = data
            .iter()
            .zip(&flat)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(overshoot > 1.0, "expected ringing > 1% of edge step, got {overshoot}");
    }

    #[test]
    fn kept_lines_are_centered_on_dc() {
        let keep = kept_lines(8, 3);
        assert_eq!(keep, vec![true, true, false, false, false, false, false, true]);
    }
}
