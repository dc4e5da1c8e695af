//! Line-oriented `key = value` configuration with dotted section prefixes.
//! Unknown keys are errors so typos surface immediately; every key has a
//! default, so an empty (or absent) file is a valid configuration.

use std::path::PathBuf;

use srt2_core::error::{Error, Result};
use srt2_core::phantom::{default_phantom, PhantomSpec, Vial};
use srt2_core::relaxfit::FitConfig;
use srt2_core::srrecon::SolverConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    /// Pixel margin applied to detected ROIs; -1 shrinks by one pixel.
    pub roi_margin: i32,
    pub r_min: usize,
    pub r_max: usize,
    pub n_expected: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig { roi_margin: -1, r_min: 5, r_max: 10, n_expected: 3 }
    }
}

/// Geometry of the single-slice reference scans.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceConfig {
    pub enabled: bool,
    pub in_plane_spacing_mm: (f64, f64),
    pub slice_thickness_mm: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig { enabled: true, in_plane_spacing_mm: (0.98, 0.98), slice_thickness_mm: 6.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub phantom: PhantomSpec,
    pub supersample: usize,
    pub grid_dims: [usize; 3],
    pub grid_spacing: [f64; 3],
    pub n_te: usize,
    pub te_min_ms: f64,
    pub te_max_ms: f64,
    pub in_plane_spacing_mm: (f64, f64),
    pub slice_thickness_mm: f64,
    pub gap_fraction: f64,
    pub noise_sigma: f64,
    pub kspace_truncation: f64,
    /// Truncation fraction used on odd echo indices. HASTE resamples k-space
    /// differently at every TE, so its truncation alternates; the reference
    /// scans keep one TE-consistent fraction.
    pub kspace_truncation_alt: f64,
    /// Stimulated-echo contamination: multiplicative offset of echo i is
    /// echo_offsets[i] (echoes beyond the list are clean). The default
    /// (+10%, +1%) puts a large offset on the first echo and a small
    /// residual on the second.
    pub echo_offsets: Vec<f64>,
    pub seed: u64,
    pub repeats: usize,
    /// One seed per repeat; empty means derive from `seed`.
    pub seeds: Vec<u64>,
    pub reference: ReferenceConfig,
    pub solver: SolverConfig,
    pub fit: FitConfig,
    pub analysis: AnalysisConfig,
    pub output_dir: PathBuf,
    pub threads: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            phantom: default_phantom(),
            supersample: 4,
            grid_dims: [96, 96, 48],
            grid_spacing: [1.1, 1.1, 1.1],
            n_te: 6,
            te_min_ms: 90.0,
            te_max_ms: 298.0,
            in_plane_spacing_mm: (1.13, 1.13),
            slice_thickness_mm: 3.0,
            gap_fraction: 0.1,
            noise_sigma: 0.0,
            kspace_truncation: 0.7,
            kspace_truncation_alt: 0.62,
            echo_offsets: vec![0.1, 0.01],
            seed: 42,
            repeats: 1,
            seeds: Vec::new(),
            reference: ReferenceConfig::default(),
            solver: SolverConfig::default(),
            fit: FitConfig::default(),
            analysis: AnalysisConfig::default(),
            output_dir: PathBuf::from("out"),
            threads: 0,
        }
    }
}

impl PipelineConfig {
    /// Effective per-repeat seeds.
    pub fn repeat_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..self.repeats as u64).map(|r| self.seed.wrapping_add(r)).collect()
        } else {
            self.seeds.clone()
        }
    }

    pub fn te_list(&self) -> Result<Vec<f64>> {
        srt2_core::acquire::te_schedule(self.n_te, self.te_min_ms, self.te_max_ms)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.solver.validate()?;
        self.fit.validate()?;
        if !(1..=8).contains(&self.supersample) {
            return Err(Error::InvalidArgument("phantom.supersample must be in [1, 8]".into()));
        }
        if self.repeats < 1 {
            return Err(Error::InvalidArgument("run.repeats must be >= 1".into()));
        }
        if !self.seeds.is_empty() && self.seeds.len() != self.repeats {
            return Err(Error::InvalidArgument(format!(
                "run.seeds lists {} seeds but run.repeats = {}",
                self.seeds.len(),
                self.repeats
            )));
        }
        if !(self.kspace_truncation_alt > 0.0 && self.kspace_truncation_alt <= 1.0) {
            return Err(Error::InvalidArgument(
                "protocol.kspace_truncation_alt must lie in (0, 1]".into(),
            ));
        }
        if self.echo_offsets.iter().any(|&o| !(o > -1.0) || !o.is_finite()) {
            return Err(Error::InvalidArgument(
                "protocol.echo_offsets entries must be finite and exceed -1".into(),
            ));
        }
        if self.analysis.r_min == 0 || self.analysis.r_min > self.analysis.r_max {
            return Err(Error::InvalidArgument("analysis radius range is invalid".into()));
        }
        if self.analysis.n_expected < 1 {
            return Err(Error::InvalidArgument("analysis.n_expected must be >= 1".into()));
        }
        self.te_list()?;
        Ok(())
    }
}

fn bad(key: &str, detail: impl Into<String>) -> Error {
    Error::Format { field: key.to_string(), detail: detail.into() }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.trim().parse().map_err(|_| bad(key, format!("expected a number, got `{v}`")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.trim().parse().map_err(|_| bad(key, format!("expected an integer, got `{v}`")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.trim().parse().map_err(|_| bad(key, format!("expected an integer, got `{v}`")))
}

fn parse_i32(key: &str, v: &str) -> Result<i32> {
    v.trim().parse().map_err(|_| bad(key, format!("expected an integer, got `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(bad(key, format!("expected true or false, got `{other}`"))),
    }
}

fn parse_pair(key: &str, v: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = v.split(',').collect();
    if parts.len() != 2 {
        return Err(bad(key, format!("expected `a,b`, got `{v}`")));
    }
    Ok((parse_f64(key, parts[0])?, parse_f64(key, parts[1])?))
}

fn parse_triple_f64(key: &str, v: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = v.split(',').collect();
    if parts.len() != 3 {
        return Err(bad(key, format!("expected `a,b,c`, got `{v}`")));
    }
    Ok([parse_f64(key, parts[0])?, parse_f64(key, parts[1])?, parse_f64(key, parts[2])?])
}

fn parse_triple_usize(key: &str, v: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = v.split(',').collect();
    if parts.len() != 3 {
        return Err(bad(key, format!("expected `a,b,c`, got `{v}`")));
    }
    Ok([parse_usize(key, parts[0])?, parse_usize(key, parts[1])?, parse_usize(key, parts[2])?])
}

fn parse_u64_list(key: &str, v: &str) -> Result<Vec<u64>> {
    v.split(',').map(|p| parse_u64(key, p)).collect()
}

fn vial_mut<'a>(cfg: &'a mut PipelineConfig, key: &str, idx: usize) -> Result<&'a mut Vial> {
    if idx > cfg.phantom.vials.len() {
        return Err(bad(key, format!("vial index {idx} skips existing vials")));
    }
    if idx == cfg.phantom.vials.len() {
        cfg.phantom.vials.push(Vial { center: (0.0, 0.0), radius_mm: 8.0, t2_ms: 100.0, m0: 1000.0 });
    }
    Ok(&mut cfg.phantom.vials[idx])
}

/// Applies one `key = value` assignment.
fn apply_key(cfg: &mut PipelineConfig, key: &str, value: &str) -> Result<()> {
    // Vial keys carry an index segment: phantom.vial.<i>.<field>
    if let Some(rest) = key.strip_prefix("phantom.vial.") {
        let mut it = rest.splitn(2, '.');
        let idx: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(key, "expected phantom.vial.<index>.<field>"))?;
        let field = it.next().ok_or_else(|| bad(key, "expected phantom.vial.<index>.<field>"))?;
        let vial = vial_mut(cfg, key, idx)?;
        match field {
            "center" => vial.center = parse_pair(key, value)?,
            "radius" => vial.radius_mm = parse_f64(key, value)?,
            "t2" => vial.t2_ms = parse_f64(key, value)?,
            "m0" => vial.m0 = parse_f64(key, value)?,
            other => return Err(bad(key, format!("unknown vial field `{other}`"))),
        }
        return Ok(());
    }

    match key {
        "phantom.background_m0" => cfg.phantom.background_m0 = parse_f64(key, value)?,
        "phantom.background_t2" => cfg.phantom.background_t2_ms = parse_f64(key, value)?,
        "phantom.plate_thickness" => cfg.phantom.plate_thickness_mm = parse_f64(key, value)?,
        "phantom.field_of_view" => {
            cfg.phantom.field_of_view_mm = parse_pair(key, value)?;
        }
        "phantom.supersample" => cfg.supersample = parse_usize(key, value)?,
        "grid.dims" => cfg.grid_dims = parse_triple_usize(key, value)?,
        "grid.spacing" => cfg.grid_spacing = parse_triple_f64(key, value)?,
        "protocol.n_te" => cfg.n_te = parse_usize(key, value)?,
        "protocol.te_min" => cfg.te_min_ms = parse_f64(key, value)?,
        "protocol.te_max" => cfg.te_max_ms = parse_f64(key, value)?,
        "protocol.in_plane_spacing" => cfg.in_plane_spacing_mm = parse_pair(key, value)?,
        "protocol.slice_thickness" => cfg.slice_thickness_mm = parse_f64(key, value)?,
        "protocol.gap_fraction" => cfg.gap_fraction = parse_f64(key, value)?,
        "protocol.noise_sigma" => cfg.noise_sigma = parse_f64(key, value)?,
        "protocol.kspace_truncation" => cfg.kspace_truncation = parse_f64(key, value)?,
        "protocol.kspace_truncation_alt" => cfg.kspace_truncation_alt = parse_f64(key, value)?,
        "protocol.first_echo_offset" => {
            // Shorthand: contamination on the first echo only.
            cfg.echo_offsets = vec![parse_f64(key, value)?];
        }
        "protocol.echo_offsets" => {
            cfg.echo_offsets = value
                .split(',')
                .map(|p| parse_f64(key, p))
                .collect::<Result<Vec<f64>>>()?;
        }
        "protocol.seed" => cfg.seed = parse_u64(key, value)?,
        "reference.enable" => cfg.reference.enabled = parse_bool(key, value)?,
        "reference.in_plane_spacing" => cfg.reference.in_plane_spacing_mm = parse_pair(key, value)?,
        "reference.slice_thickness" => cfg.reference.slice_thickness_mm = parse_f64(key, value)?,
        "solver.lambda" => cfg.solver.lambda = parse_f64(key, value)?,
        "solver.max_iters" => cfg.solver.max_iters = parse_usize(key, value)?,
        "solver.rel_tol" => cfg.solver.rel_tol = parse_f64(key, value)?,
        "solver.operator_norm_iters" => cfg.solver.operator_norm_iters = parse_usize(key, value)?,
        "solver.tv_epsilon" => cfg.solver.tv_epsilon = parse_f64(key, value)?,
        "fit.skip_first_n" => cfg.fit.skip_first_n = parse_usize(key, value)?,
        "fit.t2_bounds" => {
            let p = parse_pair(key, value)?;
            cfg.fit.t2_bounds_ms = p;
        }
        "fit.m0_bounds" => {
            let p = parse_pair(key, value)?;
            cfg.fit.m0_bounds = p;
        }
        "fit.max_iters" => cfg.fit.max_iters = parse_usize(key, value)?,
        "fit.ftol" => cfg.fit.ftol = parse_f64(key, value)?,
        "fit.signal_floor" => cfg.fit.signal_floor = parse_f64(key, value)?,
        "analysis.roi_margin" => cfg.analysis.roi_margin = parse_i32(key, value)?,
        "analysis.r_min" => cfg.analysis.r_min = parse_usize(key, value)?,
        "analysis.r_max" => cfg.analysis.r_max = parse_usize(key, value)?,
        "analysis.n_expected" => cfg.analysis.n_expected = parse_usize(key, value)?,
        "run.repeats" => cfg.repeats = parse_usize(key, value)?,
        "run.seeds" => cfg.seeds = parse_u64_list(key, value)?,
        "run.output_dir" => cfg.output_dir = PathBuf::from(value.trim()),
        "run.threads" => cfg.threads = parse_usize(key, value)?,
        other => return Err(bad(other, "unknown configuration key")),
    }
    Ok(())
}

/// Parses configuration text over the defaults.
pub fn parse_config(text: &str, mut cfg: PipelineConfig) -> Result<PipelineConfig> {
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Format {
                field: format!("line {}", lineno + 1),
                detail: format!("expected `key = value`, got `{line}`"),
            });
        };
        apply_key(&mut cfg, key.trim(), value.trim())?;
    }
    Ok(cfg)
}

pub fn load_config(path: &std::path::Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, PipelineConfig::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn parses_dotted_keys() {
        let text = "\
# comment
solver.lambda = 1.5
protocol.n_te = 8
phantom.vial.1.t2 = 300.5
run.seeds = 7,8,9
run.repeats = 3
";
        let cfg = parse_config(text, PipelineConfig::default()).unwrap();
        assert_eq!(cfg.solver.lambda, 1.5);
        assert_eq!(cfg.n_te, 8);
        assert_eq!(cfg.phantom.vials[1].t2_ms, 300.5);
        assert_eq!(cfg.repeat_seeds(), vec![7, 8, 9]);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = parse_config("solver.lamda = 1.0\n", PipelineConfig::default()).unwrap_err();
        match err {
            Error::Format { field, .. } => assert_eq!(field, "solver.lamda"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn seeds_length_mismatch_rejected() {
        let cfg =
            parse_config("run.seeds = 1,2\nrun.repeats = 3\n", PipelineConfig::default()).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn derived_seeds_follow_base() {
        let mut cfg = PipelineConfig::default();
        cfg.seed = 100;
        cfg.repeats = 3;
        assert_eq!(cfg.repeat_seeds(), vec![100, 101, 102]);
    }
}
