//! Digital quantitative phantom: circular vials with known (M0, T2) in a
//! plate, rasterized onto a voxel grid as exact ground truth.
//!
//! Convention: the plate plane is x-z (so vials show their circular faces in
//! coronal views) and the plate normal is y, centered on y = 0. Vial centers
//! and the field of view are expressed in centered plate-plane coordinates,
//! i.e. (x_mm, z_mm) with (0, 0) at the plate center.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volgrid::{Grid3D, Volume3D};

/// One cylindrical vial with uniform relaxometry properties.
#[derive(Debug, Clone, PartialEq)]
pub struct Vial {
    /// Plate-plane center (x_mm, z_mm).
    pub center: (f64, f64),
    pub radius_mm: f64,
    pub t2_ms: f64,
    pub m0: f64,
}

/// Geometric description of the phantom region of interest.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub vials: Vec<Vial>,
    pub plate_thickness_mm: f64,
    pub background_m0: f64,
    pub background_t2_ms: f64,
    /// Plate-plane extent (x_mm, z_mm), centered on the origin.
    pub field_of_view_mm: (f64, f64),
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in self.vials.iter().enumerate() {
            if !(v.radius_mm > 0.0) {
                return Err(Error::InvalidArgument(format!("vial {n}: radius must be > 0")));
            }
            if !(v.t2_ms > 0.0) {
                return Err(Error::InvalidArgument(format!("vial {n}: t2 must be > 0")));
            }
            if !(v.m0 >= 0.0) {
                return Err(Error::InvalidArgument(format!("vial {n}: m0 must be >= 0")));
            }
            let (hx, hz) = (self.field_of_view_mm.0 / 2.0, self.field_of_view_mm.1 / 2.0);
            if v.center.0.abs() + v.radius_mm > hx || v.center.1.abs() + v.radius_mm > hz {
                return Err(Error::InvalidArgument(format!("vial {n}: outside field of view")));
            }
        }
        for a in 0..self.vials.len() {
            for b in a + 1..self.vials.len() {
                let (va, vb) = (&self.vials[a], &self.vials[b]);
                let d = ((va.center.0 - vb.center.0).powi(2) + (va.center.1 - vb.center.1).powi(2))
                    .sqrt();
                if d <= va.radius_mm + vb.radius_mm {
                    return Err(Error::InvalidArgument(format!("vials {a} and {b} overlap")));
                }
            }
        }
        if !(self.background_t2_ms > 0.0) {
            return Err(Error::InvalidArgument("background t2 must be > 0".into()));
        }
        if !(self.background_m0 >= 0.0) {
            return Err(Error::InvalidArgument("background m0 must be >= 0".into()));
        }
        if !(self.plate_thickness_mm > 0.0) {
            return Err(Error::InvalidArgument("plate thickness must be > 0".into()));
        }
        Ok(())
    }

    /// (m0, t2) at a physical point.
    pub fn properties_at(&self, p: [f64; 3]) -> (f64, f64) {
        if p[1].abs() <= self.plate_thickness_mm / 2.0 {
            for v in &self.vials {
                let dx = p[0] - v.center.0;
                let dz = p[2] - v.center.1;
                if dx * dx + dz * dz <= v.radius_mm * v.radius_mm {
                    return (v.m0, v.t2_ms);
                }
            }
        }
        (self.background_m0, self.background_t2_ms)
    }
}

/// Three-vial phantom with T2 values spanning the 180-430 ms range of
/// interest, labeled (a), (b), (c) from longest to shortest T2.
pub fn default_phantom() -> PhantomSpec {
    let vial = |x: f64, t2: f64| Vial { center: (x, 0.0), radius_mm: 8.0, t2_ms: t2, m0: 1000.0 };
    PhantomSpec {
        vials: vec![vial(-24.0, 428.3), vial(0.0, 258.4), vial(24.0, 186.1)],
        plate_thickness_mm: 10.0,
        background_m0: 100.0,
        background_t2_ms: 50.0,
        field_of_view_mm: (96.0, 96.0),
    }
}

/// Rasterizes a phantom onto a grid by averaging `supersample`^3 sub-samples
/// per voxel. A voxel fully inside vial `v` carries exactly (v.m0, v.t2);
/// boundary voxels carry the sub-sample average of both fields.
pub fn rasterize(
    spec: &PhantomSpec,
    grid: &Grid3D,
    supersample: usize,
) -> Result<(Volume3D, Volume3D)> {
    if !(1..=8).contains(&supersample) {
        return Err(Error::InvalidArgument(format!(
            "supersample must be in [1, 8], got {supersample}"
        )));
    }
    spec.validate()?;

    let s = supersample;
    let fracs: Vec<f64> = (0..s).map(|a| (a as f64 + 0.5) / s as f64 - 0.5).collect();
    let inv = 1.0 / (s * s * s) as f64;
    let [nx, ny, _nz] = grid.dims;
    let plane = nx * ny;

    let mut m0 = vec![0.0; grid.len()];
    let mut t2 = vec![0.0; grid.len()];
    m0.par_chunks_mut(plane).zip(t2.par_chunks_mut(plane)).enumerate().for_each(
        |(k, (m0_plane, t2_plane))| {
            for j in 0..ny {
                for i in 0..nx {
                    let mut acc_m0 = 0.0;
                    let mut acc_t2 = 0.0;
                    let mut first = None;
                    let mut uniform = true;
                    for fz in &fracs {
                        for fy in &fracs {
                            for fx in &fracs {
                                let p = grid.point_of([
                                    i as f64 + fx,
                                    j as f64 + fy,
                                    k as f64 + fz,
                                ]);
                                let props = spec.properties_at(p);
                                acc_m0 += props.0;
                                acc_t2 += props.1;
                                match first {
                                    None => first = Some(props),
                                    Some(f) if f != props => uniform = false,
                                    _ => {}
                                }
                            }
                        }
                    }
                    // Voxels whose sub-samples all agree carry that value
                    // exactly, free of averaging round-off.
                    let (vm0, vt2) = if uniform {
                        first.unwrap()
                    } else {
                        (acc_m0 * inv, acc_t2 * inv)
                    };
                    m0_plane[i + j * nx] = vm0;
                    t2_plane[i + j * nx] = vt2;
                }
            }
        },
    );
    Ok((Volume3D::new(grid.clone(), m0)?, Volume3D::new(grid.clone(), t2)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_phantom_reference_values() {
        let p = default_phantom();
        assert_eq!(p.vials[0].t2_ms, 428.3);
        assert_eq!(p.vials[1].t2_ms, 258.4);
        assert_eq!(p.vials[2].t2_ms, 186.1);
        p.validate().unwrap();
        // 24 mm center spacing > 2 * 8 mm radius.
        let d = (p.vials[0].center.0 - p.vials[1].center.0).abs();
        assert!(d > p.vials[0].radius_mm + p.vials[1].radius_mm);
    }

    #[test]
    fn overlapping_vials_rejected() {
        let mut p = default_phantom();
        p.vials[1].center = (-20.0, 0.0);
        assert!(p.validate().is_err());
    }

    #[test]
    fn interior_voxel_is_exact() {
        let spec = default_phantom();
        let grid = Grid3D::centered([49, 9, 49], [2.0, 1.0, 2.0]).unwrap();
        let (m0, t2) = rasterize(&spec, &grid, 2).unwrap();
        // Voxel at the center of vial (b): center (0,0), physical origin.
        let (ci, cj, ck) = (24, 4, 24);
        assert_eq!(t2.get(ci, cj, ck), 258.4);
        assert_eq!(m0.get(ci, cj, ck), 1000.0);
        // Far corner is pure background.
        assert_eq!(t2.get(0, 0, 0), 50.0);
        assert_eq!(m0.get(0, 0, 0), 100.0);
    }

    #[test]
    fn boundary_voxel_matches_subsample_count() {
        // Put one voxel center exactly on the plate face at y = +5 mm; half
        // of the supersample points along y fall inside the plate.
        let spec = default_phantom();
        let grid = Grid3D::axis_aligned([1, 1, 1], [1.0, 1.0, 1.0], [0.0, 5.0, 0.0]).unwrap();
        let s = 4;
        let (m0, _t2) = rasterize(&spec, &grid, s).unwrap();

        // Brute-force oracle: count sub-sample membership directly.
        let mut inside = 0usize;
        let total = s * s * s;
        for a in 0..s {
            for b in 0..s {
                for c in 0..s {
                    let frac = |q: usize| (q as f64 + 0.5) / s as f64 - 0.5;
                    let p = [frac(a), 5.0 + frac(b), frac(c)];
                    let (vm0, _) = spec.properties_at(p);
                    if vm0 == 1000.0 {
                        inside += 1;
                    }
                }
            }
        }
        assert_eq!(inside * 2, total, "expected exactly half the sub-samples inside");
        let expected = (inside as f64 * 1000.0 + (total - inside) as f64 * 100.0) / total as f64;
        assert!((m0.get(0, 0, 0) - expected).abs() < 1e-12);
        assert!((m0.get(0, 0, 0) - 550.0).abs() < 1e-12);
    }

    #[test]
    fn t2_values_stay_in_convex_range() {
        let spec = default_phantom();
        let grid = Grid3D::centered([32, 8, 32], [3.0, 2.0, 3.0]).unwrap();
        let (_m0, t2) = rasterize(&spec, &grid, 3).unwrap();
        let lo = 50.0;
        let hi = 428.3;
        for &v in t2.data() {
            assert!((lo - 1e-12..=hi + 1e-12).contains(&v), "t2 {v} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn m0_integral_converges_with_supersampling() {
        let spec = default_phantom();
        let grid = Grid3D::centered([96, 16, 96], [1.0, 1.0, 1.0]).unwrap();
        let (m0_4, _) = rasterize(&spec, &grid, 4).unwrap();
        let (m0_8, _) = rasterize(&spec, &grid, 8).unwrap();
        let s4: f64 = m0_4.data().iter().sum();
        let s8: f64 = m0_8.data().iter().sum();
        assert!((s4 - s8).abs() / s8 < 1e-3, "integrals {s4} vs {s8}");
    }
}
