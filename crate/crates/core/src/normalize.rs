//! Structure-preserving color normalization.
//!
//! A template is the mean stain matrix of a set of training tiles plus
//! the 99th-percentile concentration of each stain under that matrix.
//! A test tile is factorized, its concentration rows are rescaled so
//! their 99th percentiles match the template, and it is re-rendered with
//! the template's stain matrix. Concentration geometry is untouched, so
//! only color changes.

use std::path::{Path, PathBuf};

use rand::seq::index;
use rayon::prelude::*;

use crate::color::{od_to_rgb, reconstruct, OdParams, OdTile, TilePixels};
use crate::error::{Error, Result};
use crate::external::ExternalToolSpec;
use crate::manifest::{write_csv, TileManifest, TileRecord};
use crate::seed;
use crate::stain::{
    canonical_order, concentrations_for, factorize, percentile, ConcentrationMap,
    FactorizationConfig, StainMatrix,
};

pub const ROBUST_MAX_QUANTILE: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct StainTemplate {
    pub stains: StainMatrix,
    /// Robust maximum concentration per stain, `[hematoxylin, eosin]`.
    pub scale: [f64; 2],
    pub source_tile_count: usize,
}

/// Training tiles of one slide.
#[derive(Debug, Clone)]
pub struct SlideTiles {
    pub slide_id: String,
    /// `(tile_id, pixels)`.
    pub tiles: Vec<(String, TilePixels)>,
}

impl StainTemplate {
    pub fn validate(&self) -> Result<()> {
        if !self.scale.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "template scale must be positive, got {:?}",
                self.scale
            )));
        }
        Ok(())
    }

    /// Writes `<prefix>.stains` and `<prefix>.scale`.
    pub fn write(&self, prefix: &Path) -> Result<()> {
        let stains = with_ext(prefix, "stains");
        let scale = with_ext(prefix, "scale");
        if let Some(dir) = stains.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        self.stains.write(&stains)?;
        let text = format!(
            "# robust max concentration per stain (hematoxylin eosin), {} source tiles\n{} {}\n",
            self.source_tile_count, self.scale[0], self.scale[1]
        );
        std::fs::write(&scale, text).map_err(|e| Error::io(&scale, e))
    }

    pub fn read(prefix: &Path) -> Result<Self> {
        let stains = StainMatrix::read(&with_ext(prefix, "stains"))?;
        let scale_path = with_ext(prefix, "scale");
        let text = std::fs::read_to_string(&scale_path).map_err(|e| Error::io(&scale_path, e))?;
        let mut count = 0;
        let mut values = Vec::new();
        for line in text.lines() {
            if let Some(comment) = line.trim().strip_prefix('#') {
                if let Some(n) = comment
                    .split(',')
                    .nth(1)
                    .and_then(|s| s.split_whitespace().next())
                    .and_then(|s| s.parse().ok())
                {
                    count = n;
                }
                continue;
            }
            for tok in line.split_whitespace() {
                values.push(tok.parse::<f64>().map_err(|e| Error::Parse {
                    path: scale_path.display().to_string(),
                    message: e.to_string(),
                })?);
            }
        }
        if values.len() != 2 {
            return Err(Error::Parse {
                path: scale_path.display().to_string(),
                message: format!("expected 2 values, got {}", values.len()),
            });
        }
        let t = StainTemplate {
            stains,
            scale: [values[0], values[1]],
            source_tile_count: count,
        };
        t.validate()?;
        Ok(t)
    }
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Arithmetic mean of the columns, renormalized to unit length.
pub fn mean_stain_matrix(matrices: &[StainMatrix]) -> Result<StainMatrix> {
    if matrices.is_empty() {
        return Err(Error::NoUsableTiles);
    }
    let mut sum = [[0.0; 3]; 2];
    for m in matrices {
        for (s, col) in m.columns().iter().enumerate() {
            for c in 0..3 {
                sum[s][c] += col[c];
            }
        }
    }
    canonical_order(sum)
}

/// Pick at most `per_slide` tiles of a slide, seeded by slide id.
pub fn sample_slide_tiles(n: usize, per_slide: usize, seed: u64, slide_id: &str) -> Vec<usize> {
    if n <= per_slide {
        return (0..n).collect();
    }
    let mut rng = seed::rng_for(seed, slide_id);
    let mut picked = index::sample(&mut rng, n, per_slide).into_vec();
    picked.sort_unstable();
    picked
}

pub fn build_template(
    slides: &[SlideTiles],
    tiles_per_slide: usize,
    cfg: &FactorizationConfig,
    od: OdParams,
) -> Result<StainTemplate> {
    cfg.validate()?;
    let mut chosen: Vec<(&str, &str, &TilePixels)> = Vec::new();
    for slide in slides {
        for i in sample_slide_tiles(slide.tiles.len(), tiles_per_slide, cfg.seed, &slide.slide_id)
        {
            let (id, px) = &slide.tiles[i];
            chosen.push((&slide.slide_id, id, px));
        }
    }
    // Deterministic reduction order regardless of scheduling.
    chosen.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

    let fitted: Vec<Option<(OdTile, StainMatrix)>> = chosen
        .par_iter()
        .map(|(slide, tile, px)| {
            let odt = od.to_od(px).ok()?;
            match factorize(&odt, cfg) {
                Ok(f) => Some((odt, f.stains)),
                Err(e) => {
                    log::info!("template: skipping tile {slide}/{tile}: {e}");
                    None
                }
            }
        })
        .collect();
    let fitted: Vec<(OdTile, StainMatrix)> = fitted.into_iter().flatten().collect();
    if fitted.is_empty() {
        return Err(Error::NoUsableTiles);
    }
    let stains =
        mean_stain_matrix(&fitted.iter().map(|(_, w)| *w).collect::<Vec<_>>())?;

    let maps: Vec<ConcentrationMap> = fitted
        .par_iter()
        .map(|(odt, _)| concentrations_for(odt, &stains, cfg))
        .collect::<Result<_>>()?;
    let mut scale = [0.0; 2];
    for (s, slot) in scale.iter_mut().enumerate() {
        let pooled: Vec<f64> = maps.iter().flat_map(|m| m.row(s)).collect();
        *slot = percentile(&pooled, ROBUST_MAX_QUANTILE);
    }
    let template = StainTemplate {
        stains,
        scale,
        source_tile_count: fitted.len(),
    };
    template.validate().map_err(|_| {
        Error::InvalidArgument(format!(
            "a stain is absent from every training tile (robust maxima {:?})",
            template.scale
        ))
    })?;
    Ok(template)
}

/// Intermediate products of normalizing one tile, in optical density.
#[derive(Debug, Clone)]
pub struct NormalizedOd {
    pub source_stains: StainMatrix,
    pub source_concentrations: ConcentrationMap,
    /// Per-stain multipliers applied to the source concentrations.
    pub factors: [f64; 2],
    pub od: OdTile,
}

impl NormalizedOd {
    pub fn concentrations(&self) -> ConcentrationMap {
        self.source_concentrations.scale_rows(self.factors)
    }
}

pub fn normalize_od(
    od: &OdTile,
    template: &StainTemplate,
    cfg: &FactorizationConfig,
) -> Result<NormalizedOd> {
    template.validate()?;
    let f = factorize(od, cfg)?;
    let mut factors = [1.0; 2];
    for (s, factor) in factors.iter_mut().enumerate() {
        let p = percentile(&f.concentrations.row(s), ROBUST_MAX_QUANTILE);
        if p > 0.0 {
            *factor = template.scale[s] / p;
        }
    }
    let scaled = f.concentrations.scale_rows(factors);
    let out = reconstruct(od.width(), od.height(), &template.stains, &scaled, od.i0())?;
    Ok(NormalizedOd {
        source_stains: f.stains,
        source_concentrations: f.concentrations,
        factors,
        od: out,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizedTile {
    pub pixels: TilePixels,
    /// The tile had too little tissue to factorize and was passed through.
    pub passed_through: bool,
}

pub fn normalize_tile(
    tile: &TilePixels,
    template: &StainTemplate,
    cfg: &FactorizationConfig,
    od: OdParams,
) -> Result<NormalizedTile> {
    let odt = od.to_od(tile)?;
    match normalize_od(&odt, template, cfg) {
        Ok(n) => Ok(NormalizedTile {
            pixels: od_to_rgb(&n.od),
            passed_through: false,
        }),
        Err(Error::InsufficientTissue { .. }) => Ok(NormalizedTile {
            pixels: tile.clone(),
            passed_through: true,
        }),
        Err(e) => Err(e),
    }
}

pub const EXTERNAL_MANIFEST_HEADER: [&str; 3] = ["tile_id", "slide_id", "path"];

/// Hand a manifest to an external normalizer and collect its outputs.
///
/// `workdir/input_manifest.csv` lists every tile; the tool is run in
/// `workdir` as `<command> --manifest input_manifest.csv --out out` and
/// must write `out/<tile_id>.png` for each row, keeping dimensions.
pub fn run_external_normalizer(
    manifest: &TileManifest,
    tool: &ExternalToolSpec,
    workdir: &Path,
    provenance: &str,
) -> Result<TileManifest> {
    let out_dir = workdir.join("out");
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let abs = |p: PathBuf| std::path::absolute(&p).unwrap_or(p);
    let rows = manifest.tiles.iter().map(|r| {
        vec![
            r.tile_id.clone(),
            r.slide_id.clone(),
            abs(manifest.resolve(r)).display().to_string(),
        ]
    });
    write_csv(
        &workdir.join("input_manifest.csv"),
        &EXTERNAL_MANIFEST_HEADER,
        rows,
        provenance,
    )?;
    tool.run(workdir, &["--manifest", "input_manifest.csv", "--out", "out"])?;

    let mut missing = Vec::new();
    let mut changed = Vec::new();
    let mut tiles = Vec::with_capacity(manifest.len());
    for rec in &manifest.tiles {
        let produced = out_dir.join(format!("{}.png", rec.tile_id));
        if !produced.is_file() {
            missing.push(rec.tile_id.clone());
            continue;
        }
        let before = image::image_dimensions(manifest.resolve(rec)).map_err(|source| {
            Error::Image {
                path: manifest.resolve(rec),
                source,
            }
        })?;
        match image::image_dimensions(&produced) {
            Ok(after) if after == before => {}
            _ => changed.push(rec.tile_id.clone()),
        }
        tiles.push(TileRecord {
            path: PathBuf::from("out").join(format!("{}.png", rec.tile_id)),
            ..rec.clone()
        });
    }
    if !missing.is_empty() {
        return Err(Error::MissingOutputs(missing));
    }
    if !changed.is_empty() {
        return Err(Error::DimensionChanged(changed));
    }
    Ok(TileManifest::new(tiles, workdir))
}
