//! Beer-Lambert color math: RGB intensities to optical density and back,
//! and recombination of stain factors into an optical-density tile.
//!
//! Optical density uses base-10 logarithms and a white point of 255 by
//! default, `od = -log10((I + eps) / (i0 + eps))`, clamped at zero.

use std::path::Path;

use crate::error::{Error, Result};
use crate::stain::{ConcentrationMap, StainMatrix};

pub const DEFAULT_I0: f64 = 255.0;
pub const DEFAULT_EPS: f64 = 1.0;

/// Beer-Lambert conversion constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdParams {
    pub i0: f64,
    pub eps: f64,
}

impl Default for OdParams {
    fn default() -> Self {
        OdParams {
            i0: DEFAULT_I0,
            eps: DEFAULT_EPS,
        }
    }
}

impl OdParams {
    pub fn to_od(&self, tile: &TilePixels) -> Result<OdTile> {
        rgb_to_od(tile, self.i0, self.eps)
    }
}

/// An 8-bit RGB tile, row-major, three interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePixels {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl TilePixels {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyInput);
        }
        if data.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "{}x{} tile needs {} bytes, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(TilePixels {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        TilePixels::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// BT.601 luma, rounded.
    pub fn luminance(&self) -> Vec<u8> {
        self.pixels().map(luminance).collect()
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        TilePixels::new(w as usize, h as usize, rgb.into_raw())
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        image::save_buffer_with_format(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Copy out a `w x h` window with its top-left corner at `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<TilePixels> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::Dimension(format!(
                "crop {}x{}+{}+{} outside {}x{} image",
                w, h, x, y, self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        TilePixels::new(w, h, data)
    }
}

pub fn luminance(p: [u8; 3]) -> u8 {
    let l = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
    l.round().clamp(0.0, 255.0) as u8
}

/// Optical densities for every pixel of a tile, three channels per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct OdTile {
    width: usize,
    height: usize,
    data: Vec<[f64; 3]>,
    i0: f64,
}

impl OdTile {
    pub fn new(width: usize, height: usize, data: Vec<[f64; 3]>, i0: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyInput);
        }
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "{}x{} OD tile needs {} pixels, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        if !(i0 > 0.0) {
            return Err(Error::InvalidArgument(format!("i0 must be positive, got {i0}")));
        }
        if data
            .iter()
            .flatten()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::InvalidArgument(
                "optical densities must be finite and nonnegative".into(),
            ));
        }
        Ok(OdTile {
            width,
            height,
            data,
            i0,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        OdTile::new(width, height, vec![[0.0; 3]; width * height], DEFAULT_I0)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.data.len()
    }

    pub fn i0(&self) -> f64 {
        self.i0
    }

    pub fn data(&self) -> &[[f64; 3]] {
        &self.data
    }

    /// Multiply every optical density by `c >= 0`.
    pub fn scaled(&self, c: f64) -> OdTile {
        OdTile {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|p| [p[0] * c, p[1] * c, p[2] * c])
                .collect(),
            i0: self.i0,
        }
    }
}

pub fn rgb_to_od(tile: &TilePixels, i0: f64, eps: f64) -> Result<OdTile> {
    if !(i0 > 0.0) || !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "i0 and eps must be positive (i0={i0}, eps={eps})"
        )));
    }
    let denom = i0 + eps;
    // 256 entry lookup; every channel value is an integer intensity.
    let lut: Vec<f64> = (0..256)
        .map(|i| (-((i as f64 + eps) / denom).log10()).max(0.0))
        .collect();
    let data = tile
        .pixels()
        .map(|p| [lut[p[0] as usize], lut[p[1] as usize], lut[p[2] as usize]])
        .collect();
    Ok(OdTile {
        width: tile.width,
        height: tile.height,
        data,
        i0,
    })
}

pub fn od_to_rgb(od: &OdTile) -> TilePixels {
    let data = od
        .data
        .iter()
        .flat_map(|p| p.map(|v| od_value_to_intensity(v, od.i0)))
        .collect();
    TilePixels {
        width: od.width,
        height: od.height,
        data,
    }
}

pub(crate) fn od_value_to_intensity(v: f64, i0: f64) -> u8 {
    (i0 * 10f64.powf(-v)).round().clamp(0.0, 255.0) as u8
}

/// Recombine stains and concentrations: pixel `p` channel `c` is
/// `sum_s w[c, s] * h[s, p]`.
pub fn reconstruct(
    width: usize,
    height: usize,
    w: &StainMatrix,
    h: &ConcentrationMap,
    i0: f64,
) -> Result<OdTile> {
    if h.len() != width * height {
        return Err(Error::Dimension(format!(
            "concentration map has {} pixels, tile {}x{} has {}",
            h.len(),
            width,
            height,
            width * height
        )));
    }
    let cols = w.columns();
    let data = h
        .pixels()
        .iter()
        .map(|hp| {
            let mut v = [0.0; 3];
            for (c, vc) in v.iter_mut().enumerate() {
                *vc = cols[0][c] * hp[0] + cols[1][c] * hp[1];
            }
            v
        })
        .collect();
    OdTile::new(width, height, data, i0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn white_has_zero_density() {
        let t = TilePixels::filled(4, 3, [255, 255, 255]).unwrap();
        let od = rgb_to_od(&t, DEFAULT_I0, DEFAULT_EPS).unwrap();
        assert!(od.data().iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn one_decade_of_attenuation() {
        // I + eps = 26 against i0 + eps = 256 is one decade to within 0.01.
        let t = TilePixels::filled(2, 2, [25, 25, 25]).unwrap();
        let od = rgb_to_od(&t, DEFAULT_I0, DEFAULT_EPS).unwrap();
        assert!(od.data().iter().flatten().all(|v| (v - 1.0).abs() < 0.01));
        // The nearest integer to 25.5 lands within 0.025.
        let t = TilePixels::filled(2, 2, [26, 26, 26]).unwrap();
        let od = rgb_to_od(&t, DEFAULT_I0, DEFAULT_EPS).unwrap();
        assert!(od.data().iter().flatten().all(|v| (v - 1.0).abs() < 0.025));
    }

    #[test]
    fn empty_tile_rejected() {
        assert!(matches!(TilePixels::new(0, 4, vec![]), Err(Error::EmptyInput)));
    }

    #[test]
    fn deep_absorbance_saturates() {
        let od = OdTile::new(1, 1, vec![[3.0, 0.0, 3.0]], DEFAULT_I0).unwrap();
        assert_eq!(od_to_rgb(&od).data(), &[0, 255, 0]);
    }

    #[test]
    fn round_trip_within_one_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<u8> = (0..3 * 10_000).map(|_| rng.gen()).collect();
        let t = TilePixels::new(100, 100, data).unwrap();
        let back = od_to_rgb(&rgb_to_od(&t, DEFAULT_I0, DEFAULT_EPS).unwrap());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
    }

    #[test]
    fn density_strictly_decreasing_in_intensity() {
        let data: Vec<u8> = (0..=255u8).flat_map(|i| [i, i, i]).collect();
        let t = TilePixels::new(256, 1, data).unwrap();
        let od = rgb_to_od(&t, DEFAULT_I0, DEFAULT_EPS).unwrap();
        for pair in od.data().windows(2) {
            assert!(pair[1][0] < pair[0][0]);
        }
    }

    #[test]
    fn zero_concentrations_reconstruct_to_white() {
        let w = StainMatrix::reference_he();
        let h = ConcentrationMap::zeros(6);
        let od = reconstruct(3, 2, &w, &h, DEFAULT_I0).unwrap();
        assert!(od_to_rgb(&od).data().iter().all(|v| *v == 255));
    }

    #[test]
    fn single_stain_is_rank_one() {
        let w = StainMatrix::reference_he();
        let h = ConcentrationMap::from_pixels(vec![[0.3, 0.0], [1.2, 0.0], [0.0, 0.0]]).unwrap();
        let od = reconstruct(3, 1, &w, &h, DEFAULT_I0).unwrap();
        let col = w.columns()[0];
        for (p, hp) in od.data().iter().zip(h.pixels()) {
            for c in 0..3 {
                assert!((p[c] - col[c] * hp[0]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn reconstruct_dimension_mismatch() {
        let w = StainMatrix::reference_he();
        let h = ConcentrationMap::zeros(5);
        assert!(matches!(
            reconstruct(3, 2, &w, &h, DEFAULT_I0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn reconstruct_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = StainMatrix::reference_he();
        let n = 64;
        let h1: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen(), rng.gen()]).collect();
        let h2: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen(), rng.gen()]).collect();
        let (a, b) = (0.7, 2.5);
        let mix: Vec<[f64; 2]> = h1
            .iter()
            .zip(&h2)
            .map(|(x, y)| [a * x[0] + b * y[0], a * x[1] + b * y[1]])
            .collect();
        let r = |h: Vec<[f64; 2]>| {
            reconstruct(8, 8, &w, &ConcentrationMap::from_pixels(h).unwrap(), DEFAULT_I0).unwrap()
        };
        let (o1, o2, om) = (r(h1), r(h2), r(mix));
        for i in 0..n {
            for c in 0..3 {
                let lhs = om.data()[i][c];
                let rhs = a * o1.data()[i][c] + b * o2.data()[i][c];
                assert!((lhs - rhs).abs() < 1e-9);
            }
        }
    }
}
