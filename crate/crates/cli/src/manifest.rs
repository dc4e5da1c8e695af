//! Experiment manifest: the HR grid, protocol echoes, repeat seeds, and a
//! content-hashed listing of every artifact a simulation wrote. Downstream
//! stages locate their inputs through the manifest alone.

use std::path::Path;

use sha2::{Digest, Sha256};
use srt2_core::error::{Error, Result};
use srt2_core::volgrid::Grid3D;

use crate::sidecar::Sidecar;

pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Debug, Clone)]
pub struct Manifest {
    pub grid: Grid3D,
    pub te_list_ms: Vec<f64>,
    pub seeds: Vec<u64>,
    pub orientations: Vec<String>,
    pub reference_enabled: bool,
    /// (relative path, sha256 hex), sorted by path.
    pub files: Vec<(String, String)>,
}

pub fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

impl Manifest {
    pub fn new(
        grid: Grid3D,
        te_list_ms: Vec<f64>,
        seeds: Vec<u64>,
        reference_enabled: bool,
    ) -> Self {
        Manifest {
            grid,
            te_list_ms,
            seeds,
            orientations: vec!["axial".into(), "coronal".into(), "sagittal".into()],
            reference_enabled,
            files: Vec::new(),
        }
    }

    /// Hashes and records one artifact under its path relative to `root`.
    pub fn add_file(&mut self, root: &Path, path: &Path) -> Result<()> {
        let rel = path
            .strip_prefix(root)
            .map_err(|_| Error::InvalidArgument(format!("{} is outside {}", path.display(), root.display())))?
            .to_string_lossy()
            .replace('\\', "/");
        let hash = sha256_hex(path)?;
        self.files.push((rel, hash));
        Ok(())
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let mut s = Sidecar::new();
        s.push("format", "srt2-manifest-v1");
        s.push("grid.dims", format!("{},{},{}", self.grid.dims[0], self.grid.dims[1], self.grid.dims[2]));
        s.push(
            "grid.spacing",
            format!("{},{},{}", self.grid.spacing[0], self.grid.spacing[1], self.grid.spacing[2]),
        );
        s.push(
            "grid.origin",
            format!("{},{},{}", self.grid.origin[0], self.grid.origin[1], self.grid.origin[2]),
        );
        s.push("n_te", self.te_list_ms.len());
        for (i, te) in self.te_list_ms.iter().enumerate() {
            s.push(&format!("te.{i}"), te);
        }
        s.push("repeats", self.seeds.len());
        s.push(
            "seeds",
            self.seeds.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        );
        s.push("orientations", self.orientations.join(","));
        s.push("reference_enabled", self.reference_enabled);
        let mut files = self.files.clone();
        files.sort();
        for (rel, hash) in &files {
            s.push("file", format!("{rel} sha256={hash}"));
        }
        s.write(&root.join(MANIFEST_NAME))
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut grid_dims = None;
        let mut grid_spacing = None;
        let mut grid_origin = None;
        let mut n_te = None;
        let mut tes: Vec<(usize, f64)> = Vec::new();
        let mut seeds = Vec::new();
        let mut orientations = Vec::new();
        let mut reference_enabled = false;
        let mut files = Vec::new();
        let bad = |field: &str, detail: &str| Error::Format {
            field: field.to_string(),
            detail: detail.to_string(),
        };
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(bad("manifest", "expected key = value"));
            };
            let (key, value) = (key.trim(), value.trim());
            match key {
                "format" => {
                    if value != "srt2-manifest-v1" {
                        return Err(bad("format", "unsupported manifest version"));
                    }
                }
                "grid.dims" => {
                    let p: Vec<usize> =
                        value.split(',').map(|v| v.trim().parse().unwrap_or(0)).collect();
                    if p.len() != 3 || p.contains(&0) {
                        return Err(bad("grid.dims", "expected three positive integers"));
                    }
                    grid_dims = Some([p[0], p[1], p[2]]);
                }
                "grid.spacing" | "grid.origin" => {
                    let p: Result<Vec<f64>> = value
                        .split(',')
                        .map(|v| {
                            v.trim().parse().map_err(|_| bad(key, "expected three numbers"))
                        })
                        .collect();
                    let p = p?;
                    if p.len() != 3 {
                        return Err(bad(key, "expected three numbers"));
                    }
                    let arr = [p[0], p[1], p[2]];
                    if key == "grid.spacing" {
                        grid_spacing = Some(arr);
                    } else {
                        grid_origin = Some(arr);
                    }
                }
                "n_te" => {
                    n_te = Some(value.parse().map_err(|_| bad("n_te", "expected an integer"))?)
                }
                "repeats" => {}
                "seeds" => {
                    seeds = value
                        .split(',')
                        .map(|v| v.trim().parse().map_err(|_| bad("seeds", "expected integers")))
                        .collect::<Result<Vec<u64>>>()?;
                }
                "orientations" => {
                    orientations = value.split(',').map(|v| v.trim().to_string()).collect();
                }
                "reference_enabled" => reference_enabled = value == "true",
                "file" => {
                    let Some((rel, hash)) = value.rsplit_once(" sha256=") else {
                        return Err(bad("file", "expected `<path> sha256=<hex>`"));
                    };
                    files.push((rel.trim().to_string(), hash.trim().to_string()));
                }
                k if k.starts_with("te.") => {
                    let idx: usize =
                        k[3..].parse().map_err(|_| bad(k, "bad te index"))?;
                    let te: f64 = value.parse().map_err(|_| bad(k, "expected a number"))?;
                    tes.push((idx, te));
                }
                other => return Err(bad(other, "unknown manifest key")),
            }
        }
        let dims = grid_dims.ok_or_else(|| bad("grid.dims", "missing"))?;
        let spacing = grid_spacing.ok_or_else(|| bad("grid.spacing", "missing"))?;
        let origin = grid_origin.ok_or_else(|| bad("grid.origin", "missing"))?;
        let n = n_te.ok_or_else(|| bad("n_te", "missing"))?;
        tes.sort_by_key(|(i, _)| *i);
        if tes.len() != n {
            return Err(bad("te", "echo count does not match n_te"));
        }
        let grid = Grid3D::axis_aligned(dims, spacing, origin)?;
        Ok(Manifest {
            grid,
            te_list_ms: tes.into_iter().map(|(_, t)| t).collect(),
            seeds,
            orientations,
            reference_enabled,
            files,
        })
    }

    pub fn rep_dir(rep: usize) -> String {
        format!("rep{rep:02}")
    }

    pub fn series_stem(te_index: usize, orientation: &str) -> String {
        format!("series_t{te_index:02}_{orientation}")
    }

    /// Verifies that every listed file exists with its recorded hash.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for (rel, hash) in &self.files {
            let p = root.join(rel);
            let actual = sha256_hex(&p)?;
            if actual != *hash {
                return Err(Error::Format {
                    field: rel.clone(),
                    detail: "content hash mismatch".into(),
                });
            }
        }
        Ok(())
    }
}
