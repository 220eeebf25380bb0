//! TOML run configuration.
//!
//! Schema:
//! ```toml
//! [geometry]
//! base = "P2"        # P2, P3, P4
//! center = "point"   # point, or line (for P3/P4)
//!
//! [run]
//! bound = 6          # -K.d budget on the blowup
//! order_margin = 2   # extra window margin
//!
//! [output]
//! out_dir = "out"
//!
//! [cache]
//! dir = ".cache"
//!
//! # optional extra oracle seeds with provenance notes
//! [[seeds]]
//! d = [1, -1]
//! insertions = ["pt"]
//! value = "1"
//! note = "line through the center and one generic point"
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;

use blowup_core::cohring::BlowupGeometry;
use blowup_core::gwdata::Seed;
use blowup_core::{Error, Result};

#[derive(Debug, Deserialize, Default)]
struct FileConfig {
    geometry: Option<GeometrySection>,
    run: Option<RunSection>,
    output: Option<OutputSection>,
    cache: Option<CacheSection>,
    #[serde(default)]
    seeds: Vec<SeedSection>,
}

#[derive(Debug, Deserialize)]
struct GeometrySection {
    base: Option<String>,
    center: Option<String>,
}

#[derive(Debug, Deserialize)]
struct RunSection {
    bound: Option<i64>,
    order_margin: Option<i64>,
}

#[derive(Debug, Deserialize)]
struct OutputSection {
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
struct CacheSection {
    dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize, Clone)]
pub struct SeedSection {
    pub d: Vec<i64>,
    pub insertions: Vec<String>,
    pub value: String,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug)]
pub struct RunConfig {
    pub base: String,
    pub center: String,
    pub bound: i64,
    pub order_margin: i64,
    pub out_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub extra_seeds: Vec<SeedSection>,
}

impl RunConfig {
    pub fn load(
        path: Option<&Path>,
        bound_override: Option<i64>,
        margin_override: Option<i64>,
    ) -> Result<RunConfig> {
        let file: FileConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{e}")))?
            }
            None => FileConfig::default(),
        };
        let geometry = file.geometry;
        let base = geometry
            .as_ref()
            .and_then(|g| g.base.clone())
            .unwrap_or_else(|| "P2".to_string());
        let center = geometry
            .as_ref()
            .and_then(|g| g.center.clone())
            .unwrap_or_else(|| "point".to_string());
        let bound = bound_override
            .or(file.run.as_ref().and_then(|r| r.bound))
            .unwrap_or(6);
        let order_margin = margin_override
            .or(file.run.as_ref().and_then(|r| r.order_margin))
            .unwrap_or(2);
        if bound < 1 {
            return Err(Error::Config("bound must be positive".into()));
        }
        Ok(RunConfig {
            base,
            center,
            bound,
            order_margin,
            out_dir: file.output.and_then(|o| o.out_dir),
            cache_dir: file.cache.and_then(|c| c.dir),
            extra_seeds: file.seeds,
        })
    }

    /// Extra seeds for the blowup oracle, resolved against the geometry's
    /// basis names.
    pub fn extra_seeds_parsed(&self, geom: &BlowupGeometry) -> Result<Vec<Seed>> {
        self.extra_seeds
            .iter()
            .map(|s| {
                let mut ins = Vec::new();
                for name in &s.insertions {
                    let idx = resolve_class(geom, name)?;
                    ins.push(idx);
                }
                let value = parse_value(geom, &s.value)?;
                Ok(Seed {
                    d: s.d.iter().copied().collect(),
                    ins: ins.iter().copied().collect(),
                    value,
                    note: s.note.clone(),
                })
            })
            .collect()
    }
}

fn resolve_class(geom: &BlowupGeometry, name: &str) -> Result<u8> {
    // "pt" means the point class of the blowup; otherwise a basis name
    if name == "pt" {
        return Ok(geom.xt_point_index as u8);
    }
    geom.xt
        .basis_names
        .iter()
        .position(|n| n == name)
        .map(|i| i as u8)
        .ok_or_else(|| Error::Config(format!("unknown class name {name}")))
}

fn parse_value(geom: &BlowupGeometry, s: &str) -> Result<blowup_core::coeff::Scalar> {
    let s = s.trim();
    let (num, den): (i64, i64) = if let Some((a, b)) = s.split_once('/') {
        (
            a.parse().map_err(|_| Error::Config(format!("bad value {s}")))?,
            b.parse().map_err(|_| Error::Config(format!("bad value {s}")))?,
        )
    } else {
        (
            s.parse().map_err(|_| Error::Config(format!("bad value {s}")))?,
            1,
        )
    };
    Ok(geom.field.rational(num, den))
}
