//! Key-value sidecar files accompanying NIfTI volumes: series metadata
//! (TE, orientation, geometry, simulation knobs) and fit metadata.

use std::path::Path;

use srt2_core::acquire::{Orientation, SeriesGeometry, SimKnobs};
use srt2_core::error::{Error, Result};

/// Ordered key-value block with typed accessors.
#[derive(Debug, Clone, Default)]
pub struct Sidecar {
    entries: Vec<(String, String)>,
}

impl Sidecar {
    pub fn new() -> Self {
        Sidecar::default()
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format {
                field: key.to_string(),
                detail: "missing sidecar key".into(),
            })
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        self.get(key)?.parse().map_err(|_| Error::Format {
            field: key.to_string(),
            detail: "expected a number".into(),
        })
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.get(key)?.parse().map_err(|_| Error::Format {
            field: key.to_string(),
            detail: "expected an integer".into(),
        })
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.get(key)?.parse().map_err(|_| Error::Format {
            field: key.to_string(),
            detail: "expected an integer".into(),
        })
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.get(key)? {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(Error::Format { field: key.to_string(), detail: "expected a bool".into() }),
        }
    }

    pub fn get_pair(&self, key: &str) -> Result<(f64, f64)> {
        let v = self.get(key)?;
        let parts: Vec<&str> = v.split(',').collect();
        if parts.len() != 2 {
            return Err(Error::Format { field: key.to_string(), detail: "expected a,b".into() });
        }
        let a = parts[0].trim().parse().map_err(|_| Error::Format {
            field: key.to_string(),
            detail: "expected numbers".into(),
        })?;
        let b = parts[1].trim().parse().map_err(|_| Error::Format {
            field: key.to_string(),
            detail: "expected numbers".into(),
        })?;
        Ok((a, b))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Format {
                    field: path.display().to_string(),
                    detail: format!("bad sidecar line `{line}`"),
                });
            };
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(Sidecar { entries })
    }
}

/// Everything needed to rebuild one series' forward operator and noise
/// stream from disk.
#[derive(Debug, Clone)]
pub struct SeriesMeta {
    pub te_ms: f64,
    pub te_index: usize,
    pub series_index: usize,
    pub geometry: SeriesGeometry,
    pub knobs: SimKnobs,
    pub tr_ms: f64,
}

impl SeriesMeta {
    pub fn to_sidecar(&self) -> Sidecar {
        let mut s = Sidecar::new();
        s.push("te_ms", self.te_ms);
        s.push("te_index", self.te_index);
        s.push("series_index", self.series_index);
        s.push("orientation", self.geometry.orientation.label());
        s.push(
            "in_plane_spacing",
            format!("{},{}", self.geometry.in_plane_spacing_mm.0, self.geometry.in_plane_spacing_mm.1),
        );
        s.push("slice_thickness", self.geometry.slice_thickness_mm);
        s.push("gap_fraction", self.geometry.gap_fraction);
        s.push("matrix", format!("{},{}", self.geometry.matrix.0, self.geometry.matrix.1));
        s.push("n_slices", self.geometry.n_slices);
        s.push("noise_sigma", self.knobs.noise_sigma);
        s.push("kspace_truncation", self.knobs.kspace_truncation);
        s.push("first_echo_offset", self.knobs.first_echo_offset);
        s.push("is_first_echo", self.knobs.is_first_echo);
        s.push("seed", self.knobs.seed);
        s.push("tr_ms", self.tr_ms);
        s
    }

    pub fn from_sidecar(s: &Sidecar) -> Result<Self> {
        let matrix = s.get_pair("matrix")?;
        let geometry = SeriesGeometry {
            in_plane_spacing_mm: s.get_pair("in_plane_spacing")?,
            slice_thickness_mm: s.get_f64("slice_thickness")?,
            gap_fraction: s.get_f64("gap_fraction")?,
            matrix: (matrix.0 as usize, matrix.1 as usize),
            n_slices: s.get_usize("n_slices")?,
            orientation: Orientation::from_label(s.get("orientation")?)?,
        };
        Ok(SeriesMeta {
            te_ms: s.get_f64("te_ms")?,
            te_index: s.get_usize("te_index")?,
            series_index: s.get_usize("series_index")?,
            geometry,
            knobs: SimKnobs {
                noise_sigma: s.get_f64("noise_sigma")?,
                kspace_truncation: s.get_f64("kspace_truncation")?,
                first_echo_offset: s.get_f64("first_echo_offset")?,
                is_first_echo: s.get_bool("is_first_echo")?,
                seed: s.get_u64("seed")?,
            },
            tr_ms: s.get_f64("tr_ms")?,
        })
    }
}

/// Writes a TE list as `te.<i> = <ms>` lines plus a count.
pub fn write_te_list(path: &Path, te: &[f64]) -> Result<()> {
    let mut s = Sidecar::new();
    s.push("n_te", te.len());
    for (i, t) in te.iter().enumerate() {
        s.push(&format!("te.{i}"), t);
    }
    s.write(path)
}

pub fn read_te_list(path: &Path) -> Result<Vec<f64>> {
    let s = Sidecar::read(path)?;
    let n = s.get_usize("n_te")?;
    (0..n).map(|i| s.get_f64(&format!("te.{i}"))).collect()
}
