//! Built-in baseline tile classifier: handcrafted color and texture
//! features with L2-regularized logistic regression.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::color::{OdParams, TilePixels};
use crate::error::{Error, Result};
use crate::normalize::{build_template, SlideTiles};
use crate::stain::{concentrations_for, percentile, FactorizationConfig, StainMatrix};

/// Length of the feature vector, in the order of [`FEATURE_NAMES`].
pub const FEATURE_COUNT: usize = 20;

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "od_mean_r",
    "od_mean_g",
    "od_mean_b",
    "od_var_r",
    "od_var_g",
    "od_var_b",
    "h_mean",
    "h_std",
    "h_p90",
    "e_mean",
    "e_std",
    "e_p90",
    "grad_orient_0",
    "grad_orient_1",
    "grad_orient_2",
    "grad_orient_3",
    "grad_orient_4",
    "grad_orient_5",
    "grad_orient_6",
    "grad_orient_7",
];

const MODEL_HEADER: &str = "# stainbench builtin classifier v1";

pub type Features = [f64; FEATURE_COUNT];

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    /// L2 penalty on the weights of standardized features (intercept free).
    pub l2: f64,
    pub max_iters: usize,
    /// Tiles per training slide used to fit the feature stain model.
    pub stain_tiles_per_slide: usize,
    pub factorization: FactorizationConfig,
    pub od: OdParams,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            l2: 1.0,
            max_iters: 100,
            stain_tiles_per_slide: 2,
            factorization: FactorizationConfig::default(),
            od: OdParams::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LabeledTile {
    pub slide_id: String,
    pub tile_id: String,
    pub pixels: TilePixels,
    pub label: u8,
}

/// Per-tile feature vector; concentrations are solved under `stains`.
pub fn features(tile: &TilePixels, stains: &StainMatrix, cfg: &ClassifierConfig) -> Result<Features> {
    let od = cfg.od.to_od(tile)?;
    let n = od.pixel_count() as f64;
    let mut f = [0.0; FEATURE_COUNT];
    for c in 0..3 {
        let mean = od.data().iter().map(|p| p[c]).sum::<f64>() / n;
        let var = od.data().iter().map(|p| (p[c] - mean).powi(2)).sum::<f64>() / n;
        f[c] = mean;
        f[3 + c] = var;
    }
    let h = concentrations_for(&od, stains, &cfg.factorization)?;
    for s in 0..2 {
        let row = h.row(s);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        f[6 + 3 * s] = mean;
        f[7 + 3 * s] = var.sqrt();
        f[8 + 3 * s] = percentile(&row, 0.9);
    }
    f[12..].copy_from_slice(&orientation_histogram(tile));
    Ok(f)
}

/// Magnitude-weighted histogram of luminance gradient directions over
/// interior pixels, normalized to sum 1 (uniform when the tile is flat).
pub fn orientation_histogram(tile: &TilePixels) -> [f64; 8] {
    let (w, h) = (tile.width(), tile.height());
    let lum: Vec<f64> = tile.luminance().into_iter().map(f64::from).collect();
    let mut bins = [0.0; 8];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let gx = lum[y * w + x + 1] - lum[y * w + x - 1];
            let gy = lum[(y + 1) * w + x] - lum[(y - 1) * w + x];
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let t = (gy.atan2(gx) + std::f64::consts::PI) / std::f64::consts::TAU;
            bins[((t * 8.0) as usize).min(7)] += mag;
        }
    }
    let total: f64 = bins.iter().sum();
    if total > 0.0 {
        bins.iter_mut().for_each(|b| *b /= total);
    } else {
        bins = [0.125; 8];
    }
    bins
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Newton's method for L2-regularized logistic regression on rows of `x`.
/// Returns `(weights, bias)`; the bias is unpenalized.
pub fn fit_logistic(x: &[Vec<f64>], y: &[u8], l2: f64, max_iters: usize) -> Result<(Vec<f64>, f64)> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Dimension(format!("{} rows vs {} labels", x.len(), y.len())));
    }
    if y.iter().all(|&l| l == y[0]) {
        return Err(Error::SingleClass);
    }
    let d = x[0].len();
    let k = d + 1;
    let mut beta = DVector::<f64>::zeros(k);
    for _ in 0..max_iters {
        let mut grad = DVector::<f64>::zeros(k);
        let mut hess = DMatrix::<f64>::zeros(k, k);
        for (row, &label) in x.iter().zip(y) {
            let z = beta[d] + row.iter().zip(beta.iter()).map(|(a, b)| a * b).sum::<f64>();
            let p = sigmoid(z);
            let r = p - f64::from(label);
            let wgt = (p * (1.0 - p)).max(1e-12);
            for i in 0..k {
                let xi = if i < d { row[i] } else { 1.0 };
                grad[i] += r * xi;
                for j in 0..=i {
                    let xj = if j < d { row[j] } else { 1.0 };
                    hess[(i, j)] += wgt * xi * xj;
                }
            }
        }
        for i in 0..d {
            grad[i] += l2 * beta[i];
            hess[(i, i)] += l2;
        }
        hess[(d, d)] += 1e-9;
        for i in 0..k {
            for j in 0..i {
                hess[(j, i)] = hess[(i, j)];
            }
        }
        let step = hess
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("logistic Hessian not positive definite".into()))?
            .solve(&grad);
        beta -= &step;
        if step.amax() < 1e-10 {
            break;
        }
    }
    Ok((beta.iter().take(d).copied().collect(), beta[d]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuiltinModel {
    pub stains: StainMatrix,
    pub mean: Features,
    pub std: Features,
    pub weights: Features,
    pub bias: f64,
}

impl BuiltinModel {
    pub fn train(tiles: &[LabeledTile], seed: u64, cfg: &ClassifierConfig) -> Result<BuiltinModel> {
        if tiles.is_empty() {
            return Err(Error::EmptyInput);
        }
        if tiles.iter().all(|t| t.label == tiles[0].label) {
            return Err(Error::SingleClass);
        }
        let mut slides: Vec<SlideTiles> = Vec::new();
        for t in tiles {
            match slides.iter_mut().find(|s| s.slide_id == t.slide_id) {
                Some(s) => s.tiles.push((t.tile_id.clone(), t.pixels.clone())),
                None => slides.push(SlideTiles {
                    slide_id: t.slide_id.clone(),
                    tiles: vec![(t.tile_id.clone(), t.pixels.clone())],
                }),
            }
        }
        let fcfg = FactorizationConfig {
            seed,
            ..cfg.factorization.clone()
        };
        let stains = build_template(&slides, cfg.stain_tiles_per_slide, &fcfg, cfg.od)?.stains;

        let raw: Vec<Features> = tiles
            .par_iter()
            .map(|t| features(&t.pixels, &stains, cfg))
            .collect::<Result<_>>()?;
        let n = raw.len() as f64;
        let mut mean = [0.0; FEATURE_COUNT];
        let mut std = [1.0; FEATURE_COUNT];
        for i in 0..FEATURE_COUNT {
            mean[i] = raw.iter().map(|f| f[i]).sum::<f64>() / n;
            let var = raw.iter().map(|f| (f[i] - mean[i]).powi(2)).sum::<f64>() / n;
            if var.sqrt() > 1e-12 {
                std[i] = var.sqrt();
            }
        }
        let x: Vec<Vec<f64>> = raw
            .iter()
            .map(|f| (0..FEATURE_COUNT).map(|i| (f[i] - mean[i]) / std[i]).collect())
            .collect();
        let y: Vec<u8> = tiles.iter().map(|t| t.label).collect();
        let (w, bias) = fit_logistic(&x, &y, cfg.l2, cfg.max_iters)?;
        let mut weights = [0.0; FEATURE_COUNT];
        weights.copy_from_slice(&w);
        Ok(BuiltinModel {
            stains,
            mean,
            std,
            weights,
            bias,
        })
    }

    /// Linear decision value before the sigmoid.
    pub fn decision(&self, f: &Features) -> f64 {
        self.bias
            + (0..FEATURE_COUNT)
                .map(|i| self.weights[i] * (f[i] - self.mean[i]) / self.std[i])
                .sum::<f64>()
    }

    pub fn score_features(&self, f: &Features) -> f64 {
        sigmoid(self.decision(f))
    }

    pub fn score(&self, tile: &TilePixels, cfg: &ClassifierConfig) -> Result<f64> {
        Ok(self.score_features(&features(tile, &self.stains, cfg)?))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MODEL_HEADER}\n");
        let cols = self.stains.columns();
        let _ = writeln!(out, "stain_h {} {} {}", cols[0][0], cols[0][1], cols[0][2]);
        let _ = writeln!(out, "stain_e {} {} {}", cols[1][0], cols[1][1], cols[1][2]);
        let _ = writeln!(out, "bias {}", self.bias);
        for (i, name) in FEATURE_NAMES.iter().enumerate() {
            let _ = writeln!(
                out,
                "{} {} {} {}",
                name, self.mean[i], self.std[i], self.weights[i]
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<BuiltinModel> {
        let bad = |m: String| Error::InvalidArgument(format!("model file: {m}"));
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        let mut next = |key: &str, count: usize| -> Result<Vec<f64>> {
            let line = lines.next().ok_or_else(|| bad(format!("missing {key}")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(bad(format!("expected {key}, found {line:?}")));
            }
            let vals: Vec<f64> = parts
                .map(|p| p.parse::<f64>().map_err(|e| bad(format!("{key}: {e}"))))
                .collect::<Result<_>>()?;
            if vals.len() != count || vals.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("{key}: expected {count} finite values")));
            }
            Ok(vals)
        };
        let h = next("stain_h", 3)?;
        let e = next("stain_e", 3)?;
        let stains = StainMatrix::parse(&format!(
            "{} {}\n{} {}\n{} {}\n",
            h[0], e[0], h[1], e[1], h[2], e[2]
        ))?;
        let bias = next("bias", 1)?[0];
        let mut model = BuiltinModel {
            stains,
            mean: [0.0; FEATURE_COUNT],
            std: [1.0; FEATURE_COUNT],
            weights: [0.0; FEATURE_COUNT],
            bias,
        };
        for (i, name) in FEATURE_NAMES.iter().enumerate() {
            let v = next(name, 3)?;
            if v[1] <= 0.0 {
                return Err(bad(format!("{name}: std must be positive")));
            }
            model.mean[i] = v[0];
            model.std[i] = v[1];
            model.weights[i] = v[2];
        }
        Ok(model)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<BuiltinModel> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separable_data_is_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..200 {
            let a: f64 = rng.gen_range(-1.0..1.0);
            let b: f64 = rng.gen_range(-1.0..1.0);
            if (a + 0.5 * b).abs() < 0.05 {
                continue;
            }
            x.push(vec![a, b]);
            y.push(u8::from(a + 0.5 * b > 0.0));
        }
        let (w, b) = fit_logistic(&x, &y, 1e-3, 100).unwrap();
        let correct = x
            .iter()
            .zip(&y)
            .filter(|(r, &l)| u8::from(w[0] * r[0] + w[1] * r[1] + b > 0.0) == l)
            .count();
        assert!(correct as f64 / x.len() as f64 >= 0.99);
    }

    #[test]
    fn single_class_rejected() {
        let x = vec![vec![0.0], vec![1.0]];
        assert!(matches!(fit_logistic(&x, &[1, 1], 1.0, 10), Err(Error::SingleClass)));
    }

    #[test]
    fn orientation_of_horizontal_ramp() {
        let mut data = Vec::new();
        for _y in 0..8 {
            for x in 0..8u8 {
                data.extend_from_slice(&[x * 20, x * 20, x * 20]);
            }
        }
        let t = TilePixels::new(8, 8, data).unwrap();
        let h = orientation_histogram(&t);
        // Gradient points along +x, angle 0, which lands in bin 4.
        assert!((h[4] - 1.0).abs() < 1e-12);
        let flat = TilePixels::filled(8, 8, [9, 9, 9]).unwrap();
        assert_eq!(orientation_histogram(&flat), [0.125; 8]);
    }

    #[test]
    fn model_text_round_trip() {
        let mut m = BuiltinModel {
            stains: StainMatrix::reference_he(),
            mean: [0.1; FEATURE_COUNT],
            std: [0.7; FEATURE_COUNT],
            weights: [-0.3; FEATURE_COUNT],
            bias: 0.123456789,
        };
        m.weights[4] = 1.0 / 3.0;
        let back = BuiltinModel::parse(&m.to_text()).unwrap();
        assert_eq!(back, m);
    }
}
