//! Two-stain separation by sparse non-negative matrix factorization.
//!
//! An optical-density tile `V` (3 x N) is approximated as `W * H` with a
//! 3 x 2 nonnegative stain matrix `W` of unit-norm columns and a 2 x N
//! nonnegative concentration map `H`, minimizing
//!
//! ```text
//! 0.5 * ||V - W H||_F^2 + lambda * sum(H)
//! ```
//!
//! Both factors have only two unknowns per row or column, so each half
//! of the alternating scheme is solved exactly with a closed-form
//! two-variable nonnegative quadratic program: `H` per pixel (a lasso
//! with nonnegativity), `W` per color channel. After every `W` step the
//! columns are renormalized and the matching `H` rows rescaled, which
//! leaves the reconstruction unchanged. A step that would raise the
//! objective is rejected, so accepted iterates never increase it.
//!
//! The concentrations handed back to callers are debiased: the sparse
//! code only selects which stains are active at a pixel, and the
//! amounts are then refit without the penalty. This keeps the sparsity
//! pattern while removing the uniform shrinkage an `l1` penalty would
//! otherwise leave in reconstructed colors.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::color::OdTile;
use crate::error::{Error, Result};

const RED: usize = 0;

/// Conventional H&E optical-density signatures, used as a fallback when
/// the data cannot seed the factorization.
pub const REFERENCE_HEMATOXYLIN: [f64; 3] = [0.65, 0.70, 0.29];
pub const REFERENCE_EOSIN: [f64; 3] = [0.07, 0.99, 0.11];

/// 3 x 2 stain matrix, columns `[hematoxylin, eosin]`, unit-norm and
/// nonnegative. Hematoxylin is the column with the larger red OD.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StainMatrix {
    cols: [[f64; 3]; 2],
}

impl StainMatrix {
    pub fn reference_he() -> Self {
        canonical_order([REFERENCE_HEMATOXYLIN, REFERENCE_EOSIN])
            .expect("reference stains are valid")
    }

    /// `cols[s][c]`: channel `c` of stain `s`.
    pub fn columns(&self) -> [[f64; 3]; 2] {
        self.cols
    }

    pub fn hematoxylin(&self) -> [f64; 3] {
        self.cols[0]
    }

    pub fn eosin(&self) -> [f64; 3] {
        self.cols[1]
    }

    /// Largest per-column angle to `other`, in degrees.
    pub fn max_angle_deg(&self, other: &StainMatrix) -> f64 {
        (0..2)
            .map(|s| angle_deg(&self.cols[s], &other.cols[s]))
            .fold(0.0, f64::max)
    }

    /// Parse the `.stains` text format: three rows (R, G, B) of two
    /// whitespace-separated reals, `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    path: ".stains".into(),
                    message: format!("line {}: {e}", lineno + 1),
                })?;
            if vals.len() != 2 {
                return Err(Error::Parse {
                    path: ".stains".into(),
                    message: format!("line {}: expected 2 values, got {}", lineno + 1, vals.len()),
                });
            }
            rows.push([vals[0], vals[1]]);
        }
        if rows.len() != 3 {
            return Err(Error::Parse {
                path: ".stains".into(),
                message: format!("expected 3 rows, got {}", rows.len()),
            });
        }
        canonical_order([
            [rows[0][0], rows[1][0], rows[2][0]],
            [rows[0][1], rows[1][1], rows[2][1]],
        ])
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# stain matrix: rows R G B, columns hematoxylin eosin\n");
        for c in 0..3 {
            let _ = writeln!(out, "{} {}", self.cols[0][c], self.cols[1][c]);
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        StainMatrix::parse(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

pub fn angle_deg(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let cos = dot3(a, b) / (norm3(a) * norm3(b));
    cos.clamp(-1.0, 1.0).acos().to_degrees()
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm3(a: &[f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

/// Normalize both columns and put hematoxylin (larger red OD) first.
pub fn canonical_order(raw: [[f64; 3]; 2]) -> Result<StainMatrix> {
    let mut cols = raw;
    for col in cols.iter_mut() {
        if col.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "stain vectors must be finite and nonnegative".into(),
            ));
        }
        let n = norm3(col);
        if n <= f64::MIN_POSITIVE {
            return Err(Error::DegenerateStainVector);
        }
        // Already unit length: leave the bits alone so the map is idempotent.
        if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
            continue;
        }
        for v in col.iter_mut() {
            *v /= n;
        }
    }
    if cols[1][RED] > cols[0][RED] {
        cols.swap(0, 1);
    }
    Ok(StainMatrix { cols })
}

/// Per-pixel stain concentrations, stored pixel-major as `[h, e]` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationMap {
    h: Vec<[f64; 2]>,
}

impl ConcentrationMap {
    pub fn zeros(n: usize) -> Self {
        ConcentrationMap {
            h: vec![[0.0; 2]; n],
        }
    }

    pub fn from_pixels(h: Vec<[f64; 2]>) -> Result<Self> {
        if h.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "concentrations must be finite and nonnegative".into(),
            ));
        }
        Ok(ConcentrationMap { h })
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    pub fn pixels(&self) -> &[[f64; 2]] {
        &self.h
    }

    /// One stain's concentrations across all pixels.
    pub fn row(&self, stain: usize) -> Vec<f64> {
        self.h.iter().map(|p| p[stain]).collect()
    }

    pub fn scale_rows(&self, factors: [f64; 2]) -> ConcentrationMap {
        ConcentrationMap {
            h: self
                .h
                .iter()
                .map(|p| [p[0] * factors[0], p[1] * factors[1]])
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorizationConfig {
    pub sparsity_lambda: f64,
    pub max_iters: usize,
    pub rel_tolerance: f64,
    pub seed: u64,
    /// Pixels whose OD Euclidean norm is below this are left out of
    /// dictionary fitting.
    pub background_cutoff: f64,
    pub min_foreground: usize,
}

impl Default for FactorizationConfig {
    fn default() -> Self {
        FactorizationConfig {
            sparsity_lambda: 0.1,
            max_iters: 200,
            rel_tolerance: 1e-6,
            seed: 0,
            background_cutoff: 0.15,
            min_foreground: 100,
        }
    }
}

impl FactorizationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
        }
        if !(self.rel_tolerance > 0.0) {
            return Err(Error::InvalidArgument("rel_tolerance must be > 0".into()));
        }
        if !(self.sparsity_lambda >= 0.0) || !self.sparsity_lambda.is_finite() {
            return Err(Error::InvalidArgument(
                "sparsity_lambda must be a nonnegative real".into(),
            ));
        }
        if !(self.background_cutoff >= 0.0) {
            return Err(Error::InvalidArgument(
                "background_cutoff must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Factorization {
    pub stains: StainMatrix,
    pub concentrations: ConcentrationMap,
    /// Objective of every accepted iterate, starting with the initial one.
    pub objective: Vec<f64>,
    pub converged: bool,
    /// True when the data-driven initialization degenerated and the
    /// reference H&E vectors were used instead.
    pub used_fallback_init: bool,
}

/// Minimize `0.5 x'Gx - q'x` over `x >= 0` for a 2 x 2 PSD `g`.
/// `allowed[i] == false` pins `x[i]` to zero.
fn nnqp2(g: [[f64; 2]; 2], q: [f64; 2], allowed: [bool; 2]) -> [f64; 2] {
    let obj = |x: [f64; 2]| {
        0.5 * (g[0][0] * x[0] * x[0] + 2.0 * g[0][1] * x[0] * x[1] + g[1][1] * x[1] * x[1])
            - q[0] * x[0]
            - q[1] * x[1]
    };
    if allowed[0] && allowed[1] {
        let det = g[0][0] * g[1][1] - g[0][1] * g[0][1];
        if det > 1e-14 * (g[0][0] * g[1][1]).max(f64::MIN_POSITIVE) {
            let a = (g[1][1] * q[0] - g[0][1] * q[1]) / det;
            let b = (g[0][0] * q[1] - g[0][1] * q[0]) / det;
            if a >= 0.0 && b >= 0.0 {
                return [a, b];
            }
        }
    }
    let mut best = [0.0, 0.0];
    let mut best_obj = 0.0;
    for i in 0..2 {
        if !allowed[i] || g[i][i] <= 0.0 {
            continue;
        }
        let v = (q[i] / g[i][i]).max(0.0);
        let mut x = [0.0, 0.0];
        x[i] = v;
        let o = obj(x);
        if o < best_obj {
            best_obj = o;
            best = x;
        }
    }
    best
}

fn gram(cols: &[[f64; 3]; 2]) -> [[f64; 2]; 2] {
    let g01 = dot3(&cols[0], &cols[1]);
    [[dot3(&cols[0], &cols[0]), g01], [g01, dot3(&cols[1], &cols[1])]]
}

/// Sparse nonnegative code for one pixel against a fixed dictionary.
fn code_pixel(g: [[f64; 2]; 2], cols: &[[f64; 3]; 2], v: &[f64; 3], lambda: f64) -> [f64; 2] {
    let wv = [dot3(&cols[0], v), dot3(&cols[1], v)];
    nnqp2(g, [wv[0] - lambda, wv[1] - lambda], [true, true])
}

/// Sparse code, then an unpenalized refit on the selected stains.
fn debiased_code_pixel(
    g: [[f64; 2]; 2],
    cols: &[[f64; 3]; 2],
    v: &[f64; 3],
    lambda: f64,
) -> [f64; 2] {
    let sparse = code_pixel(g, cols, v, lambda);
    if lambda == 0.0 {
        return sparse;
    }
    let support = [sparse[0] > 0.0, sparse[1] > 0.0];
    if !support[0] && !support[1] {
        return [0.0, 0.0];
    }
    let wv = [dot3(&cols[0], v), dot3(&cols[1], v)];
    nnqp2(g, wv, support)
}

fn objective(cols: &[[f64; 3]; 2], v: &[[f64; 3]], h: &[[f64; 2]], lambda: f64) -> f64 {
    let mut fit = 0.0;
    let mut l1 = 0.0;
    for (p, hp) in v.iter().zip(h) {
        for c in 0..3 {
            let r = p[c] - cols[0][c] * hp[0] - cols[1][c] * hp[1];
            fit += r * r;
        }
        l1 += hp[0] + hp[1];
    }
    0.5 * fit + lambda * l1
}

/// Solve for concentrations with the stain matrix held fixed.
pub fn concentrations_for(
    od: &OdTile,
    w: &StainMatrix,
    cfg: &FactorizationConfig,
) -> Result<ConcentrationMap> {
    cfg.validate()?;
    let cols = w.columns();
    let g = gram(&cols);
    let h = od
        .data()
        .iter()
        .map(|v| debiased_code_pixel(g, &cols, v, cfg.sparsity_lambda))
        .collect();
    Ok(ConcentrationMap { h })
}

/// Frobenius norm of `V - W H`.
pub fn residual(od: &OdTile, w: &StainMatrix, h: &ConcentrationMap) -> f64 {
    let cols = w.columns();
    (2.0 * objective(&cols, od.data(), h.pixels(), 0.0)).sqrt()
}

/// Pixels that take part in dictionary fitting.
pub fn foreground(od: &OdTile, cutoff: f64) -> Vec<[f64; 3]> {
    od.data()
        .iter()
        .filter(|v| norm3(v) >= cutoff)
        .copied()
        .collect()
}

/// Seed the stain matrix from the plane of the two leading principal
/// directions of the foreground OD cloud: the extreme (1st and 99th
/// percentile) pixel angles within that plane, projected onto the
/// nonnegative orthant. `None` when the plane or the projection
/// degenerates.
fn principal_init(v: &[[f64; 3]]) -> Option<[[f64; 3]; 2]> {
    let mut m = Matrix3::<f64>::zeros();
    for p in v {
        let x = Vector3::new(p[0], p[1], p[2]);
        m += x * x.transpose();
    }
    m /= v.len() as f64;
    let eig = SymmetricEigen::new(m);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (l1, l2) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if !(l1 > 0.0) || l2 <= 1e-8 * l1 {
        return None;
    }
    let col = |i: usize| {
        let c = eig.eigenvectors.column(order[i]);
        [c[0], c[1], c[2]]
    };
    let mut e1 = col(0);
    let e2 = col(1);
    if e1.iter().sum::<f64>() < 0.0 {
        e1 = e1.map(|x| -x);
    }
    let mut angles: Vec<f64> = v
        .iter()
        .map(|p| dot3(p, &e2).atan2(dot3(p, &e1)))
        .collect();
    angles.sort_by(f64::total_cmp);
    let lo = angles[percentile_rank(angles.len(), 0.01)];
    let hi = angles[percentile_rank(angles.len(), 0.99)];
    let dir = |phi: f64| {
        let (s, c) = phi.sin_cos();
        let mut d = [0.0; 3];
        for k in 0..3 {
            d[k] = (c * e1[k] + s * e2[k]).max(0.0);
        }
        d
    };
    let (a, b) = (dir(lo), dir(hi));
    if norm3(&a) < 1e-6 || norm3(&b) < 1e-6 || angle_deg(&a, &b) < 1.0 {
        return None;
    }
    Some([a, b])
}

/// Nearest-rank index for quantile `q` in a sorted array of length `n`.
pub(crate) fn percentile_rank(n: usize, q: f64) -> usize {
    let rank = (q * n as f64).ceil() as usize;
    rank.clamp(1, n) - 1
}

/// Nearest-rank percentile (`q` in (0, 1]) of a slice.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    let k = percentile_rank(v.len(), q);
    let (_, kth, _) = v.select_nth_unstable_by(k, f64::total_cmp);
    *kth
}

/// Exact nonnegative least-squares update of the stain matrix, one color
/// channel at a time. A stain that carries no concentration keeps its
/// previous column.
fn update_stains(cols: &[[f64; 3]; 2], v: &[[f64; 3]], h: &[[f64; 2]]) -> [[f64; 3]; 2] {
    let mut hh = [[0.0; 2]; 2];
    let mut vh = [[0.0; 2]; 3];
    for (p, hp) in v.iter().zip(h) {
        hh[0][0] += hp[0] * hp[0];
        hh[0][1] += hp[0] * hp[1];
        hh[1][1] += hp[1] * hp[1];
        for c in 0..3 {
            vh[c][0] += p[c] * hp[0];
            vh[c][1] += p[c] * hp[1];
        }
    }
    hh[1][0] = hh[0][1];
    let active = [hh[0][0] > 1e-12, hh[1][1] > 1e-12];
    let mut out = *cols;
    for c in 0..3 {
        // Inactive stains are pinned to their old value and moved into q.
        let mut q = vh[c];
        for s in 0..2 {
            if !active[s] {
                q[1 - s] -= hh[1 - s][s] * cols[s][c];
            }
        }
        let x = nnqp2(hh, q, active);
        for s in 0..2 {
            if active[s] {
                out[s][c] = x[s];
            }
        }
    }
    out
}

pub fn factorize(od: &OdTile, cfg: &FactorizationConfig) -> Result<Factorization> {
    cfg.validate()?;
    let v = foreground(od, cfg.background_cutoff);
    if v.len() < cfg.min_foreground.max(1) {
        return Err(Error::InsufficientTissue {
            foreground: v.len(),
            required: cfg.min_foreground.max(1),
        });
    }
    let lambda = cfg.sparsity_lambda;

    let (mut cols, used_fallback_init) = match principal_init(&v) {
        Some(c) => (normalize_cols(c), false),
        None => (normalize_cols([REFERENCE_HEMATOXYLIN, REFERENCE_EOSIN]), true),
    };
    let code_all = |cols: &[[f64; 3]; 2]| -> Vec<[f64; 2]> {
        let g = gram(cols);
        v.iter().map(|p| code_pixel(g, cols, p, lambda)).collect()
    };
    let mut h = code_all(&cols);
    let mut obj = objective(&cols, &v, &h, lambda);
    let mut history = vec![obj];
    let mut converged = false;
    let floor = 1e-14 * v.len() as f64;

    for _ in 0..cfg.max_iters {
        let raw = update_stains(&cols, &v, &h);
        let candidate = match try_normalize_cols(raw) {
            Some(c) => c,
            None => {
                converged = true;
                break;
            }
        };
        let h_new = code_all(&candidate);
        let obj_new = objective(&candidate, &v, &h_new, lambda);
        if !(obj_new <= obj) {
            converged = true;
            break;
        }
        let decrease = obj - obj_new;
        cols = candidate;
        h = h_new;
        obj = obj_new;
        history.push(obj);
        if decrease <= cfg.rel_tolerance * obj || obj <= floor {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("stain factorization did not converge in {} iterations", cfg.max_iters);
    }

    let stains = canonical_order(cols)?;
    let concentrations = concentrations_for(od, &stains, cfg)?;
    Ok(Factorization {
        stains,
        concentrations,
        objective: history,
        converged,
        used_fallback_init,
    })
}

fn normalize_cols(c: [[f64; 3]; 2]) -> [[f64; 3]; 2] {
    try_normalize_cols(c).expect("nonzero columns")
}

fn try_normalize_cols(mut c: [[f64; 3]; 2]) -> Option<[[f64; 3]; 2]> {
    for col in c.iter_mut() {
        let n = norm3(col);
        if !(n > 1e-12) {
            return None;
        }
        for x in col.iter_mut() {
            *x /= n;
        }
    }
    Some(c)
}
