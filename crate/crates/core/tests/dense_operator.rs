//! Dense-matrix oracle for the forward acquisition operator: on a small grid
//! the operator and its adjoint are materialized column by column and checked
//! for exact transposition, and an impulse column is checked against the
//! expected footprint bound.

use srt2_core::acquire::{ForwardOperator, Orientation, SeriesGeometry};
use srt2_core::volgrid::{gaussian_kernel, Grid3D};

fn dense_geometry(orientation: Orientation) -> SeriesGeometry {
    SeriesGeometry {
        in_plane_spacing_mm: (2.0, 2.0),
        slice_thickness_mm: 2.0,
        gap_fraction: 0.1,
        matrix: (4, 4),
        n_slices: 4,
        orientation,
    }
}

fn build_dense(op: &ForwardOperator) -> Vec<Vec<f64>> {
    let (n, m) = (op.domain_len(), op.range_len());
    let mut h = vec![vec![0.0; n]; m];
    for c in 0..n {
        let mut e = vec![0.0; n];
        e[c] = 1.0;
        let col = op.apply_raw(&e);
        for (r, &v) in col.iter().enumerate() {
            h[r][c] = v;
        }
    }
    h
}

#[test]
fn adjoint_is_exact_transpose_on_dense_grid() {
    let grid = Grid3D::centered([8, 8, 8], [1.0; 3]).unwrap();
    for orientation in Orientation::ALL {
        let op = ForwardOperator::new(grid.clone(), dense_geometry(orientation)).unwrap();
        let h = build_dense(&op);
        let (n, m) = (op.domain_len(), op.range_len());

        // Materialize the adjoint row by row and compare with H^T.
        let mut worst: f64 = 0.0;
        for r in 0..m {
            let mut e = vec![0.0; m];
            e[r] = 1.0;
            let row = op.adjoint_raw(&e);
            for c in 0..n {
                worst = worst.max((row[c] - h[r][c]).abs());
            }
        }
        assert!(worst <= 1e-10, "{orientation:?}: max adjoint deviation {worst}");
    }
}

#[test]
fn impulse_footprint_bounded_by_blur_plus_one_cell() {
    let grid = Grid3D::centered([8, 8, 8], [1.0; 3]).unwrap();
    let geometry = dense_geometry(Orientation::Axial);
    let op = ForwardOperator::new(grid.clone(), geometry.clone()).unwrap();

    // Impulse at voxel (4, 4, 4): axis coordinates (4, 4, 4) in mm.
    let mut e = vec![0.0; op.domain_len()];
    let impulse = [4usize, 4, 4];
    e[grid.idx(impulse[0], impulse[1], impulse[2])] = 1.0;
    let col = op.apply_raw(&e);

    let (r_blur, _) = gaussian_kernel(geometry.slice_thickness_mm, grid.spacing[2]);
    let blur_extent = r_blur as f64 * grid.spacing[2];
    let slice_spacing = geometry.slice_spacing_mm();
    let (mu, mv) = geometry.matrix;

    // Center-aligned LR cell coordinates along each axis.
    let lr_pos = |idx: usize, m: usize, pitch: f64, n_hr: usize, s: f64| {
        (n_hr as f64 - 1.0) * s / 2.0 + (idx as f64 - (m as f64 - 1.0) / 2.0) * pitch
    };
    let mut nonzero = 0;
    for (lin, &v) in col.iter().enumerate() {
        if v.abs() < 1e-15 {
            continue;
        }
        nonzero += 1;
        let u = lin % mu;
        let w = (lin / mu) % mv;
        let l = lin / (mu * mv);
        let tu = lr_pos(u, mu, 2.0, 8, 1.0);
        let tv = lr_pos(w, mv, 2.0, 8, 1.0);
        let tl = lr_pos(l, geometry.n_slices, slice_spacing, 8, 1.0);
        assert!(
            (tu - impulse[0] as f64).abs() <= 2.0 + 1e-9,
            "in-plane u reach violated at ({u},{w},{l})"
        );
        assert!(
            (tv - impulse[1] as f64).abs() <= 2.0 + 1e-9,
            "in-plane v reach violated at ({u},{w},{l})"
        );
        assert!(
            (tl - impulse[2] as f64).abs() <= blur_extent + slice_spacing + 1e-9,
            "slice reach violated at ({u},{w},{l}): |{tl} - 4| > {blur_extent} + {slice_spacing}"
        );
    }
    assert!(nonzero > 0, "impulse column must not vanish");

    // The same column must appear in the dense matrix (consistency of the
    // two construction paths).
    let h = build_dense(&op);
    let cidx = grid.idx(impulse[0], impulse[1], impulse[2]);
    for (r, hr) in h.iter().enumerate() {
        assert_eq!(hr[cidx], col[r]);
    }
}
