//! Pipeline stages: simulate, reconstruct, fit, analyze, sweep. Each stage
//! communicates with the next purely through files under the experiment
//! root, so stages can be rerun or replaced independently.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use srt2_core::acquire::{
    simulate_series, te_schedule, ForwardOperator, LRSeries, Orientation, SeriesGeometry, SimKnobs,
};
use srt2_core::analyze::{
    bland_altman, coronal_slice, hough_circles, mean_abs_diff, relative_error, repeatability_stats,
    roi_stats_image, stack_slice, CircleROI,
};
use srt2_core::error::{Error, Result};
use srt2_core::phantom::rasterize;
use srt2_core::relaxfit::{fit_volume, FitConfig, T2FitResult};
use srt2_core::srrecon::{sr_reconstruct, SRProblem};
use srt2_core::volgrid::{read_volume, write_volume, Grid3D, Volume3D};

use crate::config::PipelineConfig;
use crate::manifest::Manifest;
use crate::sidecar::{read_te_list, write_te_list, Sidecar, SeriesMeta};

pub const SE_N_TE: usize = 25;
pub const SE_TE_RANGE: (f64, f64) = (10.0, 400.0);
pub const MESE_N_TE: usize = 32;
pub const MESE_TE_RANGE: (f64, f64) = (13.0, 416.0);
const HASTE_TR_MS: f64 = 1200.0;
const REFERENCE_TR_MS: f64 = 5000.0;

/// The isotropic reconstruction grid, centered on the phantom.
pub fn hr_grid(cfg: &PipelineConfig) -> Result<Grid3D> {
    Grid3D::centered(cfg.grid_dims, cfg.grid_spacing)
}

fn mkdirs(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reference scan arms: dense-TE single coronal slice without the
/// first-echo offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReferenceKind {
    SingleEcho,
    MultiEcho,
}

impl ReferenceKind {
    pub fn stem(self) -> &'static str {
        match self {
            ReferenceKind::SingleEcho => "se",
            ReferenceKind::MultiEcho => "mese",
        }
    }

    pub fn te_list(self) -> Result<Vec<f64>> {
        match self {
            ReferenceKind::SingleEcho => te_schedule(SE_N_TE, SE_TE_RANGE.0, SE_TE_RANGE.1),
            ReferenceKind::MultiEcho => te_schedule(MESE_N_TE, MESE_TE_RANGE.0, MESE_TE_RANGE.1),
        }
    }

    fn series_index_base(self) -> usize {
        match self {
            ReferenceKind::SingleEcho => 1000,
            ReferenceKind::MultiEcho => 2000,
        }
    }
}

/// Single coronal slice through the plate center at reference resolution.
pub fn reference_geometry(cfg: &PipelineConfig, grid: &Grid3D) -> SeriesGeometry {
    let covering = SeriesGeometry::covering(
        grid,
        Orientation::Coronal,
        cfg.reference.in_plane_spacing_mm,
        cfg.reference.slice_thickness_mm,
        0.0,
    );
    SeriesGeometry { n_slices: 1, ..covering }
}

fn orthogonal_geometries(cfg: &PipelineConfig, grid: &Grid3D) -> Vec<SeriesGeometry> {
    Orientation::ALL
        .iter()
        .map(|&o| {
            SeriesGeometry::covering(
                grid,
                o,
                cfg.in_plane_spacing_mm,
                cfg.slice_thickness_mm,
                cfg.gap_fraction,
            )
        })
        .collect()
}

/// Stage 1: rasterize the phantom, simulate every LR series (and reference
/// scans), and write the hashed manifest.
pub fn run_simulate(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let root = cfg.output_dir.clone();
    let grid = hr_grid(cfg)?;
    let te_list = cfg.te_list()?;
    let seeds = cfg.repeat_seeds();

    let geometries = orthogonal_geometries(cfg, &grid);
    let protocol = srt2_core::acquire::AcquisitionProtocol {
        te_list_ms: te_list.clone(),
        geometries: geometries.clone(),
        noise_sigma: cfg.noise_sigma,
        kspace_truncation: cfg.kspace_truncation,
        first_echo_offset: cfg.echo_offsets.first().copied().unwrap_or(0.0),
        seed: cfg.seed,
    };
    protocol.validate(&grid)?;

    mkdirs(&root)?;
    let (m0, t2) = rasterize(&cfg.phantom, &grid, cfg.supersample)?;
    let mut manifest = Manifest::new(grid.clone(), te_list.clone(), seeds.clone(), cfg.reference.enabled);

    let truth_m0 = root.join("truth_m0.nii");
    let truth_t2 = root.join("truth_t2.nii");
    write_volume(&m0, &truth_m0)?;
    write_volume(&t2, &truth_t2)?;
    manifest.add_file(&root, &truth_m0)?;
    manifest.add_file(&root, &truth_t2)?;

    let ops: Vec<ForwardOperator> = geometries
        .iter()
        .map(|g| ForwardOperator::new(grid.clone(), g.clone()))
        .collect::<Result<_>>()?;

    for (rep, &seed) in seeds.iter().enumerate() {
        let rep_dir = root.join(Manifest::rep_dir(rep));
        mkdirs(&rep_dir)?;

        // One unit of work per (TE, orientation); simulate in parallel with
        // per-unit outputs, then write sequentially in a fixed order.
        let mut units: Vec<(usize, usize)> = Vec::new();
        for ti in 0..te_list.len() {
            for oi in 0..ops.len() {
                units.push((ti, oi));
            }
        }
        let results: Vec<(PathBuf, LRSeries, SeriesMeta)> = units
            .par_iter()
            .map(|&(ti, oi)| {
                let te = te_list[ti];
                let series_index = ti * ops.len() + oi;
                // The k-space window alternates with the echo index, like
                // HASTE's TE-dependent sampling; the reference scans below
                // keep one TE-consistent window.
                let truncation = if ti % 2 == 0 {
                    cfg.kspace_truncation
                } else {
                    cfg.kspace_truncation_alt
                };
                let offset = cfg.echo_offsets.get(ti).copied().unwrap_or(0.0);
                let knobs = SimKnobs {
                    noise_sigma: cfg.noise_sigma,
                    kspace_truncation: truncation,
                    first_echo_offset: offset,
                    is_first_echo: offset != 0.0,
                    seed,
                };
                let series = simulate_series(&m0, &t2, &ops[oi], series_index, te, &knobs)?;
                let meta = SeriesMeta {
                    te_ms: te,
                    te_index: ti,
                    series_index,
                    geometry: geometries[oi].clone(),
                    knobs,
                    tr_ms: HASTE_TR_MS,
                };
                let stem = Manifest::series_stem(ti, geometries[oi].orientation.label());
                Ok((rep_dir.join(stem), series, meta))
            })
            .collect::<Result<_>>()?;
        for (stem, series, meta) in results {
            let nii = stem.with_extension("nii");
            let txt = stem.with_extension("txt");
            write_volume(&series.to_volume(&grid)?, &nii)?;
            meta.to_sidecar().write(&txt)?;
            manifest.add_file(&root, &nii)?;
            manifest.add_file(&root, &txt)?;
        }

        if cfg.reference.enabled {
            for kind in [ReferenceKind::SingleEcho, ReferenceKind::MultiEcho] {
                let geometry = reference_geometry(cfg, &grid);
                let op = ForwardOperator::new(grid.clone(), geometry.clone())?;
                let tes = kind.te_list()?;
                let te_path = rep_dir.join(format!("ref_{}_tes.txt", kind.stem()));
                write_te_list(&te_path, &tes)?;
                manifest.add_file(&root, &te_path)?;
                let results: Vec<(PathBuf, LRSeries, SeriesMeta)> = tes
                    .par_iter()
                    .enumerate()
                    .map(|(ti, &te)| {
                        let series_index = kind.series_index_base() + ti;
                        let knobs = SimKnobs {
                            noise_sigma: cfg.noise_sigma,
                            kspace_truncation: cfg.kspace_truncation,
                            first_echo_offset: 0.0,
                            is_first_echo: false,
                            seed,
                        };
                        let series = simulate_series(&m0, &t2, &op, series_index, te, &knobs)?;
                        let meta = SeriesMeta {
                            te_ms: te,
                            te_index: ti,
                            series_index,
                            geometry: geometry.clone(),
                            knobs,
                            tr_ms: REFERENCE_TR_MS,
                        };
                        let stem = rep_dir.join(format!("ref_{}_t{ti:02}", kind.stem()));
                        Ok((stem, series, meta))
                    })
                    .collect::<Result<_>>()?;
                for (stem, series, meta) in results {
                    let nii = stem.with_extension("nii");
                    let txt = stem.with_extension("txt");
                    write_volume(&series.to_volume(&grid)?, &nii)?;
                    meta.to_sidecar().write(&txt)?;
                    manifest.add_file(&root, &nii)?;
                    manifest.add_file(&root, &txt)?;
                }
            }
        }
    }
    manifest.write(&root)
}

fn missing_series(rep_dir: &Path, stem: &str) -> Error {
    Error::Format {
        field: stem.to_string(),
        detail: format!("series missing under {}", rep_dir.display()),
    }
}

/// Loads one series (volume + sidecar) back into an [`LRSeries`] with its
/// operator.
fn load_series(
    rep_dir: &Path,
    stem: &str,
    grid: &Grid3D,
) -> Result<(LRSeries, ForwardOperator, SeriesMeta)> {
    let nii = rep_dir.join(format!("{stem}.nii"));
    let txt = rep_dir.join(format!("{stem}.txt"));
    if !nii.exists() || !txt.exists() {
        return Err(missing_series(rep_dir, stem));
    }
    let meta = SeriesMeta::from_sidecar(&Sidecar::read(&txt)?)?;
    let vol = read_volume(&nii)?;
    let series = LRSeries::from_volume(&vol, meta.geometry.clone(), meta.te_ms, meta.series_index)?;
    let op = ForwardOperator::new(grid.clone(), meta.geometry.clone())?;
    Ok((series, op, meta))
}

/// Stage 2: per repeat and TE, fuse the three orthogonal series into one
/// isotropic volume; writes the SR volumes, convergence CSVs, and TE list.
pub fn run_reconstruct(cfg: &PipelineConfig, root: &Path) -> Result<()> {
    let manifest = Manifest::read(root)?;
    manifest.verify(root)?;
    let grid = manifest.grid.clone();
    for rep in 0..manifest.seeds.len() {
        let rep_dir = root.join(Manifest::rep_dir(rep));
        let recon_dir = rep_dir.join("recon");
        mkdirs(&recon_dir)?;
        let n_te = manifest.te_list_ms.len();

        let outputs: Vec<()> = (0..n_te)
            .into_par_iter()
            .map(|ti| {
                let mut series = Vec::new();
                for orientation in &manifest.orientations {
                    let stem = Manifest::series_stem(ti, orientation);
                    let (s, op, _) = load_series(&rep_dir, &stem, &grid)?;
                    series.push((s, op));
                }
                let prob = SRProblem {
                    series,
                    target_grid: grid.clone(),
                    config: cfg.solver.clone(),
                };
                let (x, report) = sr_reconstruct(&prob)?;
                write_volume(&x, &recon_dir.join(format!("sr_t{ti:02}.nii")))?;
                write_text(
                    &recon_dir.join(format!("sr_t{ti:02}_convergence.csv")),
                    &report.to_csv(),
                )?;
                Ok(())
            })
            .collect::<Result<_>>()?;
        let _ = outputs;
        write_te_list(&recon_dir.join("tes.txt"), &manifest.te_list_ms)?;
    }
    Ok(())
}

fn write_fit_result(dir: &Path, fit: &T2FitResult, te: &[f64], cfg: &FitConfig) -> Result<()> {
    mkdirs(dir)?;
    write_volume(&fit.t2_map, &dir.join("t2_map.nii"))?;
    write_volume(&fit.m0_map, &dir.join("m0_map.nii"))?;
    write_volume(&fit.t2_sd_map, &dir.join("t2_sd_map.nii"))?;
    write_volume(&fit.r2_map, &dir.join("r2_map.nii"))?;
    let mut s = Sidecar::new();
    s.push("n_te", te.len());
    for (i, t) in te.iter().enumerate() {
        s.push(&format!("te.{i}"), t);
    }
    s.push("skip_first_n", cfg.skip_first_n);
    s.push("t2_bounds", format!("{},{}", cfg.t2_bounds_ms.0, cfg.t2_bounds_ms.1));
    s.push("m0_bounds", format!("{},{}", cfg.m0_bounds.0, cfg.m0_bounds.1));
    s.push("max_iters", cfg.max_iters);
    s.push("ftol", cfg.ftol);
    s.push("signal_floor", cfg.signal_floor);
    s.push("n_converged", fit.n_converged());
    s.write(&dir.join("fit.txt"))
}

/// Fits a stack of per-TE volumes with an all-true mask.
fn fit_stack(volumes: &[Volume3D], te: &[f64], cfg: &FitConfig) -> Result<T2FitResult> {
    let mask = vec![true; volumes[0].grid().len()];
    fit_volume(volumes, te, &mask, cfg)
}

/// Stage 3: voxel-wise T2 fits of all four arms (SR, single-series HASTE,
/// SE, MESE) for every repeat.
pub fn run_fit(cfg: &PipelineConfig, root: &Path) -> Result<()> {
    let manifest = Manifest::read(root)?;
    let n_te = manifest.te_list_ms.len();
    if n_te < cfg.fit.skip_first_n + 2 {
        return Err(Error::InvalidArgument(format!(
            "{} echoes cannot support skip_first_n = {}",
            n_te, cfg.fit.skip_first_n
        )));
    }

    for rep in 0..manifest.seeds.len() {
        let rep_dir = root.join(Manifest::rep_dir(rep));
        let recon_dir = rep_dir.join("recon");

        // SR arm.
        let te = read_te_list(&recon_dir.join("tes.txt"))?;
        let sr_vols: Vec<Volume3D> = (0..n_te)
            .map(|ti| read_volume(&recon_dir.join(format!("sr_t{ti:02}.nii"))))
            .collect::<Result<_>>()?;
        let fit = fit_stack(&sr_vols, &te, &cfg.fit)?;
        write_fit_result(&rep_dir.join("sr_fit"), &fit, &te, &cfg.fit)?;

        // Single-series HASTE arm: the coronal stack fitted directly.
        let haste_vols: Vec<Volume3D> = (0..n_te)
            .map(|ti| {
                let stem = Manifest::series_stem(ti, "coronal");
                let p = rep_dir.join(format!("{stem}.nii"));
                if !p.exists() {
                    return Err(missing_series(&rep_dir, &stem));
                }
                read_volume(&p)
            })
            .collect::<Result<_>>()?;
        let fit = fit_stack(&haste_vols, &te, &cfg.fit)?;
        write_fit_result(&rep_dir.join("haste_fit"), &fit, &te, &cfg.fit)?;

        // Reference arms: no stimulated-echo offset was simulated, so no
        // echoes are excluded.
        if manifest.reference_enabled {
            let ref_fit_cfg = FitConfig { skip_first_n: 0, ..cfg.fit.clone() };
            for kind in [ReferenceKind::SingleEcho, ReferenceKind::MultiEcho] {
                let tes = read_te_list(&rep_dir.join(format!("ref_{}_tes.txt", kind.stem())))?;
                let vols: Vec<Volume3D> = (0..tes.len())
                    .map(|ti| read_volume(&rep_dir.join(format!("ref_{}_t{ti:02}.nii", kind.stem()))))
                    .collect::<Result<_>>()?;
                let fit = fit_stack(&vols, &tes, &ref_fit_cfg)?;
                write_fit_result(
                    &rep_dir.join(format!("{}_fit", kind.stem())),
                    &fit,
                    &tes,
                    &ref_fit_cfg,
                )?;
            }
        }
    }
    Ok(())
}

/// ROI set detected on one image family.
struct FamilyRois {
    rois: Vec<CircleROI>,
    /// Index of the in-stack slice the ROIs live in.
    slice: usize,
}

/// Central coronal slice index of an HR volume (y closest to 0).
fn hr_mid_slice(grid: &Grid3D) -> usize {
    grid.index_of([0.0, 0.0, 0.0])[1].round().clamp(0.0, (grid.dims[1] - 1) as f64) as usize
}

/// Central slice of an LR stack volume (stack axis is the third index).
fn stack_mid_slice(grid: &Grid3D) -> usize {
    grid.index_of([0.0, 0.0, 0.0])[2].round().clamp(0.0, (grid.dims[2] - 1) as f64) as usize
}

fn detect_on_image(
    cfg: &PipelineConfig,
    image: &[f64],
    dims: (usize, usize),
    slice: usize,
) -> Result<FamilyRois> {
    let rois = hough_circles(
        image,
        dims,
        cfg.analysis.r_min,
        cfg.analysis.r_max,
        cfg.analysis.n_expected,
    )?;
    let rois = rois.into_iter().map(|r| CircleROI { slice_index: slice, ..r }).collect();
    Ok(FamilyRois { rois, slice })
}

struct CsvTable {
    header: &'static str,
    rows: Vec<String>,
}

impl CsvTable {
    fn new(header: &'static str) -> Self {
        CsvTable { header, rows: Vec::new() }
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::from(self.header);
        text.push('\n');
        for r in &self.rows {
            text.push_str(r);
            text.push('\n');
        }
        write_text(path, &text)
    }
}

/// Stage 4: ROI detection and the quantitative report CSVs.
pub fn run_analyze(cfg: &PipelineConfig, root: &Path) -> Result<()> {
    let manifest = Manifest::read(root)?;
    let n_te = manifest.te_list_ms.len();
    let n_reps = manifest.seeds.len();
    let analysis_dir = root.join("analysis");
    mkdirs(&analysis_dir)?;

    // Ground truth: vial T2 values in descending order line up with the
    // brightness-ordered labels a, b, c, ...
    let mut truth_t2: Vec<f64> = cfg.phantom.vials.iter().map(|v| v.t2_ms).collect();
    truth_t2.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if truth_t2.len() < cfg.analysis.n_expected {
        return Err(Error::InvalidArgument(format!(
            "analysis expects {} ROIs but the phantom has {} vials",
            cfg.analysis.n_expected,
            truth_t2.len()
        )));
    }

    // ROI detection on the first-TE image of each family (rep 0).
    let rep0 = root.join(Manifest::rep_dir(0));
    let sr_first = read_volume(&rep0.join("recon").join("sr_t00.nii"))?;
    let sr_mid = hr_mid_slice(sr_first.grid());
    let (sr_img, sr_dims) = coronal_slice(&sr_first, sr_mid);
    let sr_rois = detect_on_image(cfg, &sr_img, sr_dims, sr_mid)?;

    let haste_first = read_volume(&rep0.join(format!("{}.nii", Manifest::series_stem(0, "coronal"))))?;
    let haste_mid = stack_mid_slice(haste_first.grid());
    let (h_img, h_dims) = stack_slice(&haste_first, haste_mid);
    let haste_rois = detect_on_image(cfg, &h_img, h_dims, haste_mid)?;

    let ref_rois = if manifest.reference_enabled {
        let se_first = read_volume(&rep0.join("ref_se_t00.nii"))?;
        let (img, dims) = stack_slice(&se_first, 0);
        Some(detect_on_image(cfg, &img, dims, 0)?)
    } else {
        None
    };

    // Record the detected geometry.
    let mut roi_csv = CsvTable::new("family,label,center_u,center_v,radius_px,slice_index");
    let push_rois = |family: &str, fr: &FamilyRois, csv: &mut CsvTable| {
        for r in &fr.rois {
            csv.rows.push(format!(
                "{},{},{},{},{},{}",
                family, r.label, r.center.0, r.center.1, r.radius_px, r.slice_index
            ));
        }
    };
    push_rois("sr", &sr_rois, &mut roi_csv);
    push_rois("haste", &haste_rois, &mut roi_csv);
    if let Some(fr) = &ref_rois {
        push_rois("se", fr, &mut roi_csv);
    }
    roi_csv.write(&analysis_dir.join("rois.csv"))?;

    // ROI means per (method, roi, rep).
    let n_rois = cfg.analysis.n_expected;
    let margin = cfg.analysis.roi_margin;
    let mut means: std::collections::BTreeMap<&'static str, Vec<Vec<f64>>> = Default::default();
    let methods: Vec<&'static str> = if manifest.reference_enabled {
        vec!["sr", "haste", "se", "mese"]
    } else {
        vec!["sr", "haste"]
    };
    for &m in &methods {
        means.insert(m, vec![Vec::with_capacity(n_reps); n_rois]);
    }

    for rep in 0..n_reps {
        let rep_dir = root.join(Manifest::rep_dir(rep));
        for &method in &methods {
            let map = read_volume(&rep_dir.join(format!("{method}_fit")).join("t2_map.nii"))?;
            let (fam, image, dims): (&FamilyRois, Vec<f64>, (usize, usize)) = match method {
                "sr" => {
                    let (img, dims) = coronal_slice(&map, sr_rois.slice);
                    (&sr_rois, img, dims)
                }
                "haste" => {
                    let (img, dims) = stack_slice(&map, haste_rois.slice);
                    (&haste_rois, img, dims)
                }
                _ => {
                    let fam = ref_rois.as_ref().expect("reference ROIs exist");
                    let (img, dims) = stack_slice(&map, fam.slice);
                    (fam, img, dims)
                }
            };
            for (ri, roi) in fam.rois.iter().enumerate() {
                let stats = roi_stats_image(roi, &image, dims, margin)?;
                means.get_mut(method).unwrap()[ri].push(stats.mean);
            }
        }
    }

    // Relative error vs ground truth and vs the SE reference (Fig. 4 style).
    let mut rel_csv = CsvTable::new(
        "method,n_te,roi,rep,t2_ms,reference_t2_ms,relative_error_percent,reference",
    );
    for &method in &methods {
        let n_te_for = |m: &str| match m {
            "se" => SE_N_TE,
            "mese" => MESE_N_TE,
            _ => n_te,
        };
        for ri in 0..n_rois {
            let label = (b'a' + ri as u8) as char;
            for rep in 0..n_reps {
                let measured = means[method][ri][rep];
                rel_csv.rows.push(format!(
                    "{},{},{},{},{},{},{},truth",
                    method,
                    n_te_for(method),
                    label,
                    rep,
                    measured,
                    truth_t2[ri],
                    relative_error(measured, truth_t2[ri]),
                ));
                if manifest.reference_enabled && method != "se" {
                    let se_val = means["se"][ri][rep];
                    rel_csv.rows.push(format!(
                        "{},{},{},{},{},{},{},se",
                        method,
                        n_te_for(method),
                        label,
                        rep,
                        measured,
                        se_val,
                        relative_error(measured, se_val),
                    ));
                }
            }
        }
    }
    rel_csv.write(&analysis_dir.join("relative_error.csv"))?;

    // Repeatability (Table 1 style); metric columns need >= 2 repeats.
    let mut rep_csv =
        CsvTable::new("method,roi,n_te,mean_t2_ms,cv_percent,mean_abs_diff_ms,mape_percent");
    for &method in &methods {
        let n_te_for = match method {
            "se" => SE_N_TE,
            "mese" => MESE_N_TE,
            _ => n_te,
        };
        for ri in 0..n_rois {
            let label = (b'a' + ri as u8) as char;
            let values = &means[method][ri];
            if values.len() >= 2 {
                let stats = repeatability_stats(values)?;
                debug_assert!((stats.mean_abs_diff_ms - mean_abs_diff(values).unwrap()).abs() < 1e-12);
                rep_csv.rows.push(format!(
                    "{},{},{},{},{},{},{}",
                    method,
                    label,
                    n_te_for,
                    stats.mean_t2_ms,
                    stats.cv_percent,
                    stats.mean_abs_diff_ms,
                    stats.mape_percent
                ));
            } else {
                rep_csv.rows.push(format!("{},{},{},{},,,", method, label, n_te_for, values[0]));
            }
        }
    }
    rep_csv.write(&analysis_dir.join("repeatability.csv"))?;

    // Bland-Altman agreement against SE (Fig. 3 style).
    if manifest.reference_enabled {
        let mut ba_csv = CsvTable::new(
            "method,n_te,roi,rep,mean,difference,bias,sd_diff,loa_low,loa_high",
        );
        for &method in &methods {
            if method == "se" {
                continue;
            }
            let n_te_for = if method == "mese" { MESE_N_TE } else { n_te };
            let mut pairs = Vec::new();
            let mut keys = Vec::new();
            for ri in 0..n_rois {
                for rep in 0..n_reps {
                    pairs.push((means[method][ri][rep], means["se"][ri][rep]));
                    keys.push(((b'a' + ri as u8) as char, rep));
                }
            }
            if pairs.len() < 2 {
                continue;
            }
            let ba = bland_altman(&pairs)?;
            for ((label, rep), point) in keys.iter().zip(&ba.points) {
                ba_csv.rows.push(format!(
                    "{},{},{},{},{},{},{},{},{},{}",
                    method, n_te_for, label, rep, point.0, point.1, ba.bias, ba.sd_diff,
                    ba.loa_low, ba.loa_high
                ));
            }
        }
        ba_csv.write(&analysis_dir.join("bland_altman.csv"))?;
    }
    Ok(())
}

/// All four stages in sequence under `cfg.output_dir`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<()> {
    run_simulate(cfg)?;
    let root = cfg.output_dir.clone();
    run_reconstruct(cfg, &root)?;
    run_fit(cfg, &root)?;
    run_analyze(cfg, &root)
}

/// Runs the pipeline once per TE count and aggregates the relative-error
/// rows; failures abort only their own branch and are recorded.
pub fn run_sweep(cfg: &PipelineConfig, n_list: &[usize]) -> Result<()> {
    if n_list.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one TE count".into()));
    }
    let root = cfg.output_dir.clone();
    mkdirs(&root)?;
    let mut errors = Vec::new();
    let mut aggregated =
        String::from("method,n_te,roi,rep,t2_ms,reference_t2_ms,relative_error_percent,reference\n");
    for &n in n_list {
        let mut sub = cfg.clone();
        sub.n_te = n;
        sub.output_dir = root.join(format!("nte{n:02}"));
        match run_pipeline(&sub) {
            Ok(()) => {
                let rel = sub.output_dir.join("analysis").join("relative_error.csv");
                let text = fs::read_to_string(&rel).map_err(|e| Error::io(&rel, e))?;
                for line in text.lines().skip(1) {
                    aggregated.push_str(line);
                    aggregated.push('\n');
                }
            }
            Err(e) => {
                errors.push(format!("n_te={n}: {e}"));
            }
        }
    }
    write_text(&root.join("sweep.csv"), &aggregated)?;
    if !errors.is_empty() {
        write_text(&root.join("sweep_errors.txt"), &(errors.join("\n") + "\n"))?;
    }
    if errors.len() == n_list.len() {
        return Err(Error::InvalidArgument(format!(
            "every sweep branch failed; see {}",
            root.join("sweep_errors.txt").display()
        )));
    }
    Ok(())
}
