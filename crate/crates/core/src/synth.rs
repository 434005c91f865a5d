//! Synthetic two-batch, two-class tile datasets.
//!
//! Every patient has a latent concentration geometry per tile: round
//! hematoxylin nuclei on an eosin stroma field with empty lumen regions.
//! Class membership changes nuclear density and size. The stroma
//! fraction varies per patient independently of class and acts as a
//! nuisance that a color-based classifier has to learn to ignore.
//!
//! Batch A renders `W_A * (g_A * H)` and batch B renders `W_B * (g_B * H)`
//! from the same `H`, each with independent additive OD noise, so the two
//! batches share morphology exactly and differ only in color.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::color::{od_to_rgb, reconstruct, OdTile, TilePixels, DEFAULT_I0};
use crate::error::{Error, Result};
use crate::manifest::{Batch, TileManifest, TileRecord};
use crate::seed;
use crate::stain::{canonical_order, ConcentrationMap, StainMatrix};

/// Plateau concentrations; fixed so that the 99th percentile of each
/// stain is the same for every tile.
pub const NUCLEUS_HEMATOXYLIN: f64 = 0.9;
pub const STROMA_EOSIN: f64 = 0.8;
/// Nucleus cores are pure hematoxylin so the stain model is identifiable.
pub const NUCLEUS_EOSIN: f64 = 0.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub tiles_per_slide: usize,
    pub tile_size: usize,
    /// Fraction of patients with outcome 1.
    pub positive_fraction: f64,
    pub class_signal_strength: f64,
    pub stains_a: StainMatrix,
    pub stains_b: StainMatrix,
    pub gain_a: f64,
    pub gain_b: f64,
    pub noise_sigma: f64,
    /// Mean nuclei per 1000 pixels at zero class signal.
    pub nuclei_per_kilopixel: f64,
    pub nucleus_radius: f64,
    /// Range of the per-patient stroma fraction.
    pub stroma_fraction: (f64, f64),
    pub seed: u64,
}

/// Default batch-B stain matrix: both columns turned well away from the
/// reference H&E vectors.
pub fn shifted_stains() -> StainMatrix {
    canonical_order([[0.80, 0.52, 0.30], [0.40, 0.88, 0.25]]).expect("valid stains")
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 154,
            tiles_per_slide: 8,
            tile_size: 64,
            positive_fraction: 63.0 / 154.0,
            class_signal_strength: 0.5,
            stains_a: StainMatrix::reference_he(),
            stains_b: shifted_stains(),
            gain_a: 1.0,
            gain_b: 1.3,
            noise_sigma: 0.02,
            nuclei_per_kilopixel: 2.0,
            nucleus_radius: 3.0,
            stroma_fraction: (0.05, 1.0),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synth: {m}")));
        if self.n_patients < 2 {
            return bad("n_patients must be >= 2");
        }
        if self.tiles_per_slide == 0 {
            return bad("tiles_per_slide must be >= 1");
        }
        if self.tile_size < 16 {
            return bad("tile_size must be >= 16");
        }
        if !(0.0..=1.0).contains(&self.class_signal_strength) {
            return bad("class_signal_strength must be in [0, 1]");
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return bad("positive_fraction must be in (0, 1)");
        }
        if !(self.gain_a > 0.0 && self.gain_b > 0.0) {
            return bad("gains must be positive");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0");
        }
        if !(self.nuclei_per_kilopixel > 0.0 && self.nucleus_radius > 0.0) {
            return bad("nuclei density and radius must be positive");
        }
        let (lo, hi) = self.stroma_fraction;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return bad("stroma_fraction must satisfy 0 < lo <= hi <= 1");
        }
        Ok(())
    }

    pub fn stains(&self, batch: Batch) -> &StainMatrix {
        match batch {
            Batch::A => &self.stains_a,
            Batch::B => &self.stains_b,
        }
    }

    pub fn gain(&self, batch: Batch) -> f64 {
        match batch {
            Batch::A => self.gain_a,
            Batch::B => self.gain_b,
        }
    }

    /// Outcome per patient (index 1..=n), a seeded assignment with
    /// `round(n * positive_fraction)` positives.
    pub fn outcomes(&self) -> Vec<u8> {
        let n = self.n_patients;
        let pos = ((n as f64 * self.positive_fraction).round() as usize).clamp(1, n - 1);
        let mut labels: Vec<u8> = (0..n).map(|i| (i < pos) as u8).collect();
        labels.shuffle(&mut seed::rng_for(self.seed, "outcomes"));
        labels
    }
}

pub fn slide_id(patient: usize, batch: Batch) -> String {
    format!("P{patient:04}-{batch}")
}

pub fn tile_id(patient: usize, batch: Batch, tile: usize) -> String {
    format!("P{patient:04}-{batch}-t{tile:03}")
}

#[derive(Debug, Clone, Copy)]
struct PatientTraits {
    density: f64,
    radius: f64,
    stroma_fraction: f64,
}

fn patient_traits(cfg: &SynthConfig, patient: usize, outcome: u8) -> PatientTraits {
    let mut rng = seed::rng_for(cfg.seed, &format!("patient-{patient}"));
    let sign = if outcome == 1 { 1.0 } else { -1.0 };
    let s = cfg.class_signal_strength;
    let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(&mut rng);
    let (lo, hi) = cfg.stroma_fraction;
    let stroma_fraction = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    PatientTraits {
        density: cfg.nuclei_per_kilopixel * (0.45 * s * sign + 0.12 * z).exp(),
        radius: cfg.nucleus_radius * (1.0 + 0.15 * s * sign),
        stroma_fraction,
    }
}

/// Smooth random field in [0, 1]: bilinear interpolation of a coarse grid.
fn value_noise(rng: &mut impl Rng, size: usize, cells: usize) -> Vec<f64> {
    let g = cells + 1;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.gen()).collect();
    let step = size as f64 / cells as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = ((x as f64 + 0.5) / step, (y as f64 + 0.5) / step);
            let (x0, y0) = ((fx.floor() as usize).min(cells - 1), (fy.floor() as usize).min(cells - 1));
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            let v = grid[y0 * g + x0] * (1.0 - tx) * (1.0 - ty)
                + grid[y0 * g + x0 + 1] * tx * (1.0 - ty)
                + grid[(y0 + 1) * g + x0] * (1.0 - tx) * ty
                + grid[(y0 + 1) * g + x0 + 1] * tx * ty;
            out.push(v);
        }
    }
    out
}

/// Latent concentrations of one tile before batch gain.
pub fn latent_concentrations(cfg: &SynthConfig, patient: usize, tile: usize) -> ConcentrationMap {
    let outcome = cfg.outcomes()[patient - 1];
    latent_with(cfg, patient, tile, patient_traits(cfg, patient, outcome))
}

fn latent_with(cfg: &SynthConfig, patient: usize, tile: usize, t: PatientTraits) -> ConcentrationMap {
    let n = cfg.tile_size;
    let mut rng = seed::rng_for(cfg.seed, &format!("latent-{patient}-{tile}"));

    let field = value_noise(&mut rng, n, 4);
    let mut sorted = field.clone();
    sorted.sort_by(f64::total_cmp);
    let cut_index = ((1.0 - t.stroma_fraction) * (n * n) as f64) as usize;
    let cut = if cut_index == 0 { f64::NEG_INFINITY } else { sorted[cut_index.min(n * n - 1)] };
    let stroma: Vec<bool> = field.iter().map(|&v| v >= cut).collect();

    let mut h = vec![0.0f64; n * n];
    let expected = t.density * (n * n) as f64 / 1000.0;
    let count = (expected * rng.gen_range(0.85..1.15)).round().max(1.0) as usize;
    for _ in 0..count {
        let cx = rng.gen_range(0.0..n as f64);
        let cy = rng.gen_range(0.0..n as f64);
        let r = t.radius * rng.gen_range(0.8..1.2);
        let (x0, x1) = ((cx - r - 1.0).floor().max(0.0) as usize, ((cx + r + 1.0).ceil() as usize).min(n));
        let (y0, y1) = ((cy - r - 1.0).floor().max(0.0) as usize, ((cy + r + 1.0).ceil() as usize).min(n));
        for y in y0..y1 {
            for x in x0..x1 {
                let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                let cover = (r + 0.5 - d).clamp(0.0, 1.0);
                let v = NUCLEUS_HEMATOXYLIN * cover;
                if v > h[y * n + x] {
                    h[y * n + x] = v;
                }
            }
        }
    }
    let pixels = h
        .iter()
        .zip(&stroma)
        .map(|(&hv, &st)| {
            let e = if !st {
                0.0
            } else {
                let frac = hv / NUCLEUS_HEMATOXYLIN;
                STROMA_EOSIN * (1.0 - frac) + NUCLEUS_EOSIN * frac
            };
            [hv, e]
        })
        .collect();
    ConcentrationMap::from_pixels(pixels).expect("nonnegative by construction")
}

/// Optical density of one rendered tile, noise included.
pub fn render_od(
    cfg: &SynthConfig,
    latent: &ConcentrationMap,
    patient: usize,
    tile: usize,
    batch: Batch,
) -> Result<OdTile> {
    let n = cfg.tile_size;
    let h = latent.scale_rows([cfg.gain(batch); 2]);
    let clean = reconstruct(n, n, cfg.stains(batch), &h, DEFAULT_I0)?;
    if cfg.noise_sigma == 0.0 {
        return Ok(clean);
    }
    let mut rng = seed::rng_for(cfg.seed, &format!("noise-{patient}-{tile}-{batch}"));
    let normal = Normal::new(0.0, cfg.noise_sigma)
        .map_err(|e| Error::InvalidArgument(format!("noise_sigma: {e}")))?;
    let data = clean
        .data()
        .iter()
        .map(|p| p.map(|v| (v + normal.sample(&mut rng)).max(0.0)))
        .collect();
    OdTile::new(n, n, data, DEFAULT_I0)
}

pub fn render_tile(cfg: &SynthConfig, patient: usize, tile: usize, batch: Batch) -> Result<TilePixels> {
    let latent = latent_concentrations(cfg, patient, tile);
    Ok(od_to_rgb(&render_od(cfg, &latent, patient, tile, batch)?))
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub batch_a: TileManifest,
    pub batch_b: TileManifest,
    /// Outcome of patient `i + 1`.
    pub outcomes: Vec<u8>,
}

impl SynthDataset {
    /// Both batches in one manifest, batch A first.
    pub fn combined(&self) -> TileManifest {
        let mut tiles = self.batch_a.tiles.clone();
        tiles.extend(self.batch_b.tiles.iter().cloned());
        TileManifest::new(tiles, self.batch_a.root.clone())
    }
}

/// Render every tile of both batches into `out_dir/tiles/` and return
/// manifests whose paths are relative to `out_dir`.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthDataset> {
    cfg.validate()?;
    let tiles_dir = out_dir.join("tiles");
    std::fs::create_dir_all(&tiles_dir).map_err(|e| Error::io(&tiles_dir, e))?;
    let outcomes = cfg.outcomes();
    let jobs: Vec<(usize, usize)> = (1..=cfg.n_patients)
        .flat_map(|p| (0..cfg.tiles_per_slide).map(move |t| (p, t)))
        .collect();
    let records: Vec<[TileRecord; 2]> = jobs
        .par_iter()
        .map(|&(p, t)| {
            let traits = patient_traits(cfg, p, outcomes[p - 1]);
            let latent = latent_with(cfg, p, t, traits);
            let mut out = Vec::with_capacity(2);
            for batch in [Batch::A, Batch::B] {
                let px = od_to_rgb(&render_od(cfg, &latent, p, t, batch)?);
                let id = tile_id(p, batch, t);
                let rel = PathBuf::from("tiles").join(format!("{id}.png"));
                px.write_png(&out_dir.join(&rel))?;
                out.push(TileRecord {
                    tile_id: id,
                    slide_id: slide_id(p, batch),
                    patient_index: p,
                    batch,
                    outcome: outcomes[p - 1],
                    x: (t * cfg.tile_size) as u64,
                    y: 0,
                    path: rel,
                });
            }
            let b = out.pop().expect("two records");
            let a = out.pop().expect("two records");
            Ok([a, b])
        })
        .collect::<Result<_>>()?;
    let (a, b): (Vec<_>, Vec<_>) = records.into_iter().map(|[a, b]| (a, b)).unzip();
    Ok(SynthDataset {
        batch_a: TileManifest::new(a, out_dir),
        batch_b: TileManifest::new(b, out_dir),
        outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stain::{concentrations_for, FactorizationConfig};

    fn small() -> SynthConfig {
        SynthConfig {
            n_patients: 6,
            tiles_per_slide: 2,
            tile_size: 48,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn default_shift_is_strong() {
        let a = StainMatrix::reference_he();
        let b = shifted_stains();
        for s in 0..2 {
            assert!(crate::stain::angle_deg(&a.columns()[s], &b.columns()[s]) >= 10.0);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = small();
        c.class_signal_strength = 1.5;
        assert!(c.validate().is_err());
        let mut c = small();
        c.n_patients = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn outcomes_have_requested_balance() {
        let c = SynthConfig {
            n_patients: 154,
            ..SynthConfig::default()
        };
        let o = c.outcomes();
        assert_eq!(o.iter().filter(|&&l| l == 1).count(), 63);
        assert_eq!(o, c.outcomes());
    }

    #[test]
    fn batches_share_morphology() {
        let mut c = small();
        c.noise_sigma = 0.0;
        let latent = latent_concentrations(&c, 3, 1);
        let cfg = FactorizationConfig {
            sparsity_lambda: 0.0,
            ..Default::default()
        };
        let ha = concentrations_for(&render_od(&c, &latent, 3, 1, Batch::A).unwrap(), &c.stains_a, &cfg)
            .unwrap();
        let hb = concentrations_for(&render_od(&c, &latent, 3, 1, Batch::B).unwrap(), &c.stains_b, &cfg)
            .unwrap();
        let g = c.gain_b / c.gain_a;
        for ((a, b), l) in ha.pixels().iter().zip(hb.pixels()).zip(latent.pixels()) {
            for s in 0..2 {
                assert!((a[s] - l[s] * c.gain_a).abs() < 1e-9);
                assert!((b[s] - a[s] * g).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn generation_is_byte_identical() {
        let c = small();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = generate(&c, d1.path()).unwrap();
        let b = generate(&c, d2.path()).unwrap();
        assert_eq!(a.batch_a.tiles, b.batch_a.tiles);
        assert_eq!(a.batch_a.len(), 12);
        for rec in a.combined().tiles {
            let x = std::fs::read(d1.path().join(&rec.path)).unwrap();
            let y = std::fs::read(d2.path().join(&rec.path)).unwrap();
            assert_eq!(x, y, "{}", rec.tile_id);
        }
    }

    #[test]
    fn plateaus_fix_the_robust_maximum() {
        let c = small();
        for p in 1..=c.n_patients {
            let l = latent_concentrations(&c, p, 0);
            assert_eq!(crate::stain::percentile(&l.row(0), 0.99), NUCLEUS_HEMATOXYLIN);
            assert_eq!(crate::stain::percentile(&l.row(1), 0.99), STROMA_EOSIN);
        }
    }
}
