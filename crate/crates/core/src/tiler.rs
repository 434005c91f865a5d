//! Region-of-interest masks and tile sampling for slide rasters.
//!
//! The annotated polygon is intersected with an Otsu foreground mask
//! computed from BT.601 luminance of the pixels inside the polygon.
//! Tile positions are drawn uniformly from every placement whose
//! footprint is sufficiently covered by the mask.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::color::{luminance, TilePixels};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OtsuThreshold {
    /// Pixels with value `<= threshold` form the lower (dark) class.
    pub threshold: u8,
    /// All mass sits in a single bin; the threshold is that bin.
    pub degenerate: bool,
}

/// Relative slack under which two between-class variances count as tied.
const TIE_TOLERANCE: f64 = 1e-12;

/// Otsu's threshold: maximize `w0 * w1 * (mu0 - mu1)^2` over `t`, where
/// class 0 holds bins `0..=t`. Ties go to the smallest `t`.
pub fn otsu_threshold(histogram: &[u64; 256]) -> Result<OtsuThreshold> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(Error::EmptyInput);
    }
    let nonzero: Vec<usize> = (0..256).filter(|&i| histogram[i] > 0).collect();
    if nonzero.len() == 1 {
        return Ok(OtsuThreshold {
            threshold: nonzero[0] as u8,
            degenerate: true,
        });
    }
    let total_sum: u128 = histogram
        .iter()
        .enumerate()
        .map(|(i, &c)| i as u128 * c as u128)
        .sum();
    let n = total as f64;
    let mut scores = [0.0f64; 256];
    let (mut n0, mut s0) = (0u64, 0u128);
    for t in 0..256 {
        n0 += histogram[t];
        s0 += t as u128 * histogram[t] as u128;
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        // s0 * n1 - s1 * n0 == s0 * N - S * n0, exactly in integers.
        let d = s0 as i128 * total as i128 - total_sum as i128 * n0 as i128;
        let d = d as f64;
        scores[t] = d * d / (n0 as f64 * n1 as f64 * n * n);
    }
    Ok(OtsuThreshold {
        threshold: argmax_smallest(&scores) as u8,
        degenerate: false,
    })
}

fn argmax_smallest(scores: &[f64]) -> usize {
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    scores
        .iter()
        .position(|&s| s >= best - TIE_TOLERANCE * best.abs())
        .unwrap_or(0)
}

pub fn histogram(values: impl IntoIterator<Item = u8>) -> [u64; 256] {
    let mut h = [0u64; 256];
    for v in values {
        h[v as usize] += 1;
    }
    h
}

/// Closed polygon in raster coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub points: Vec<(f64, f64)>,
}

impl Polygon {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::DegeneratePolygon(format!(
                "need at least 3 points, got {}",
                points.len()
            )));
        }
        let p = Polygon { points };
        if p.area().abs() < 1e-12 {
            return Err(Error::DegeneratePolygon("zero area".into()));
        }
        Ok(p)
    }

    /// One `x y` pair per line; blank lines and `#` comments ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    path: "polygon".into(),
                    message: format!("line {}: {e}", i + 1),
                })?;
            if vals.len() != 2 {
                return Err(Error::Parse {
                    path: "polygon".into(),
                    message: format!("line {}: expected \"x y\"", i + 1),
                });
            }
            points.push((vals[0], vals[1]));
        }
        Polygon::new(points)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Polygon::parse(&text)
    }

    pub fn scaled(&self, factor: f64) -> Polygon {
        Polygon {
            points: self.points.iter().map(|(x, y)| (x * factor, y * factor)).collect(),
        }
    }

    fn area(&self) -> f64 {
        let n = self.points.len();
        (0..n)
            .map(|i| {
                let (x0, y0) = self.points[i];
                let (x1, y1) = self.points[(i + 1) % n];
                x0 * y1 - x1 * y0
            })
            .sum::<f64>()
            / 2.0
    }

    /// Even-odd rule.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let mut inside = false;
        let n = self.points.len();
        let mut j = n - 1;
        for i in 0..n {
            let (xi, yi) = self.points[i];
            let (xj, yj) = self.points[j];
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl RoiMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Dimension(format!(
                "mask {}x{} needs {} bits, got {}",
                width,
                height,
                width * height,
                bits.len()
            )));
        }
        Ok(RoiMask {
            width,
            height,
            bits,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let data: Vec<u8> = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        image::save_buffer_with_format(
            path,
            &data,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
            image::ImageFormat::Png,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Summed-area table with a zero border, `(w + 1) * (h + 1)` entries.
    fn integral(&self) -> Vec<u64> {
        let w1 = self.width + 1;
        let mut s = vec![0u64; w1 * (self.height + 1)];
        for y in 0..self.height {
            let mut row = 0u64;
            for x in 0..self.width {
                row += self.get(x, y) as u64;
                s[(y + 1) * w1 + x + 1] = s[y * w1 + x + 1] + row;
            }
        }
        s
    }
}

/// Mask of pixels inside the polygon whose luminance falls in the dark
/// Otsu class of the inside-polygon histogram. Pixel centers are tested
/// against the polygon.
pub fn build_mask(raster: &TilePixels, polygon: &Polygon) -> Result<RoiMask> {
    let (w, h) = (raster.width(), raster.height());
    let inside: Vec<bool> = (0..w * h)
        .map(|i| polygon.contains((i % w) as f64 + 0.5, (i / w) as f64 + 0.5))
        .collect();
    let lum = raster.luminance();
    let hist = histogram(
        lum.iter()
            .zip(&inside)
            .filter(|(_, &inn)| inn)
            .map(|(&l, _)| l),
    );
    let otsu = match otsu_threshold(&hist) {
        Ok(t) => t,
        Err(Error::EmptyInput) => return Err(Error::NoTissueInRoi),
        Err(e) => return Err(e),
    };
    if otsu.degenerate {
        // One luminance level inside the ROI: nothing to separate.
        return Err(Error::NoTissueInRoi);
    }
    let bits: Vec<bool> = lum
        .iter()
        .zip(&inside)
        .map(|(&l, &inn)| inn && l <= otsu.threshold)
        .collect();
    let mask = RoiMask::new(w, h, bits)?;
    if mask.count() == 0 {
        return Err(Error::NoTissueInRoi);
    }
    Ok(mask)
}

/// Tile geometry. Sizes are in level-0 (40x) pixels unless noted.
#[derive(Debug, Clone, PartialEq)]
pub struct TileSpec {
    pub source_size: usize,
    pub output_size: usize,
    pub physical_extent_um: f64,
    pub tiles_per_slide: usize,
    pub crop_size: usize,
    /// Minimum fraction of a tile footprint that must lie in the mask.
    pub min_coverage: f64,
    /// Level-0 pixels per mask pixel.
    pub mask_downsample: usize,
}

impl Default for TileSpec {
    fn default() -> Self {
        TileSpec {
            source_size: 512,
            output_size: 256,
            physical_extent_um: 130.0,
            tiles_per_slide: 1000,
            crop_size: 224,
            min_coverage: 0.5,
            mask_downsample: 16,
        }
    }
}

impl TileSpec {
    pub fn validate(&self) -> Result<()> {
        if self.source_size == 0 || self.output_size * 2 != self.source_size {
            return Err(Error::InvalidArgument(format!(
                "output_size ({}) must be half of source_size ({})",
                self.output_size, self.source_size
            )));
        }
        if self.crop_size == 0 || self.crop_size > self.output_size {
            return Err(Error::InvalidArgument(format!(
                "crop_size ({}) must be in 1..={}",
                self.crop_size, self.output_size
            )));
        }
        if !(0.0..=1.0).contains(&self.min_coverage) {
            return Err(Error::InvalidArgument("min_coverage must be in [0, 1]".into()));
        }
        if self.mask_downsample == 0 || !self.source_size.is_multiple_of(self.mask_downsample) {
            return Err(Error::InvalidArgument(format!(
                "mask_downsample ({}) must divide source_size ({})",
                self.mask_downsample, self.source_size
            )));
        }
        Ok(())
    }

    /// Tile footprint side in mask pixels.
    pub fn footprint(&self) -> usize {
        self.source_size / self.mask_downsample
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileSample {
    /// Top-left corners in mask pixels.
    pub positions: Vec<(usize, usize)>,
    /// Fewer candidates than requested, so positions repeat.
    pub with_replacement: bool,
}

/// Every top-left position whose `footprint x footprint` window is at
/// least `min_coverage` inside the mask, in row-major order.
pub fn candidate_positions(mask: &RoiMask, footprint: usize, min_coverage: f64) -> Vec<(usize, usize)> {
    if footprint == 0 || footprint > mask.width || footprint > mask.height {
        return Vec::new();
    }
    let s = mask.integral();
    let w1 = mask.width + 1;
    let area = (footprint * footprint) as f64;
    let mut out = Vec::new();
    for y in 0..=mask.height - footprint {
        for x in 0..=mask.width - footprint {
            let (x1, y1) = (x + footprint, y + footprint);
            let covered = s[y1 * w1 + x1] + s[y * w1 + x] - s[y * w1 + x1] - s[y1 * w1 + x];
            if covered > 0 && covered as f64 >= min_coverage * area {
                out.push((x, y));
            }
        }
    }
    out
}

pub fn sample_tiles(
    mask: &RoiMask,
    footprint: usize,
    count: usize,
    min_coverage: f64,
    seed: u64,
) -> Result<TileSample> {
    let candidates = candidate_positions(mask, footprint, min_coverage);
    if candidates.is_empty() {
        return Err(Error::NoTissueInRoi);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if candidates.len() >= count {
        let picked = index::sample(&mut rng, candidates.len(), count);
        Ok(TileSample {
            positions: picked.iter().map(|i| candidates[i]).collect(),
            with_replacement: false,
        })
    } else {
        Ok(TileSample {
            positions: (0..count)
                .map(|_| candidates[rng.gen_range(0..candidates.len())])
                .collect(),
            with_replacement: true,
        })
    }
}

/// Average `factor x factor` blocks; trailing partial blocks are dropped.
pub fn downsample_box(tile: &TilePixels, factor: usize) -> Result<TilePixels> {
    if factor == 0 {
        return Err(Error::InvalidArgument("downsample factor must be >= 1".into()));
    }
    let (w, h) = (tile.width() / factor, tile.height() / factor);
    if w == 0 || h == 0 {
        return Err(Error::EmptyInput);
    }
    let n = (factor * factor) as u32;
    let mut data = Vec::with_capacity(w * h * 3);
    for by in 0..h {
        for bx in 0..w {
            let mut acc = [0u32; 3];
            for y in by * factor..(by + 1) * factor {
                for x in bx * factor..(bx + 1) * factor {
                    let p = tile.pixel(x, y);
                    for c in 0..3 {
                        acc[c] += p[c] as u32;
                    }
                }
            }
            data.extend(acc.map(|a| ((a + n / 2) / n) as u8));
        }
    }
    TilePixels::new(w, h, data)
}

#[derive(Debug, Clone)]
pub struct ExtractedTile {
    /// Level-0 top-left corner.
    pub x: u64,
    pub y: u64,
    pub pixels: TilePixels,
}

#[derive(Debug, Clone)]
pub struct SlideTiling {
    pub mask: RoiMask,
    pub tiles: Vec<ExtractedTile>,
    pub with_replacement: bool,
}

/// Mask the slide at `spec.mask_downsample`, sample positions, and cut
/// `source_size` tiles that are box-downsampled by 2.
pub fn tile_slide(
    slide: &TilePixels,
    polygon_level0: &Polygon,
    spec: &TileSpec,
    seed: u64,
) -> Result<SlideTiling> {
    spec.validate()?;
    let d = spec.mask_downsample;
    let low = downsample_box(slide, d)?;
    let mask = build_mask(&low, &polygon_level0.scaled(1.0 / d as f64))?;
    let sample = sample_tiles(&mask, spec.footprint(), spec.tiles_per_slide, spec.min_coverage, seed)?;
    let tiles = sample
        .positions
        .iter()
        .map(|&(mx, my)| {
            let (x, y) = (mx * d, my * d);
            let src = slide.crop(x, y, spec.source_size, spec.source_size)?;
            Ok(ExtractedTile {
                x: x as u64,
                y: y as u64,
                pixels: downsample_box(&src, 2)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SlideTiling {
        mask,
        tiles,
        with_replacement: sample.with_replacement,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationMode {
    /// Multiples of 90 degrees; no resampling.
    RightAngles,
    /// Any angle, bilinear resampling with edge clamping.
    Arbitrary,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Counter-clockwise quarter turns, `0..4`.
    pub quarter_turns: u8,
    /// Used only in `RotationMode::Arbitrary`.
    pub angle_deg: f64,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub crop_x: usize,
    pub crop_y: usize,
}

impl AugmentParams {
    pub fn draw(seed: u64, input_size: usize, crop_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let quarter_turns = rng.gen_range(0..4u8);
        let angle_deg = rng.gen_range(0.0..360.0);
        let flip_horizontal = rng.gen_bool(0.5);
        let flip_vertical = rng.gen_bool(0.5);
        let slack = input_size.saturating_sub(crop_size);
        AugmentParams {
            quarter_turns,
            angle_deg,
            flip_horizontal,
            flip_vertical,
            crop_x: rng.gen_range(0..=slack),
            crop_y: rng.gen_range(0..=slack),
        }
    }

    pub fn centered(input_size: usize, crop_size: usize) -> Self {
        let off = (input_size - crop_size) / 2;
        AugmentParams {
            quarter_turns: 0,
            angle_deg: 0.0,
            flip_horizontal: false,
            flip_vertical: false,
            crop_x: off,
            crop_y: off,
        }
    }
}

fn remap(tile: &TilePixels, f: impl Fn(usize, usize) -> (usize, usize)) -> TilePixels {
    let (w, h) = (tile.width(), tile.height());
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = f(x, y);
            data.extend(tile.pixel(sx, sy));
        }
    }
    TilePixels::new(w, h, data).expect("same dimensions")
}

fn rotate_quarter(tile: &TilePixels) -> TilePixels {
    let n = tile.width();
    // Counter-clockwise: output (x, y) reads input (n - 1 - y, x).
    remap(tile, |x, y| (n - 1 - y, x))
}

fn rotate_bilinear(tile: &TilePixels, angle_deg: f64) -> TilePixels {
    let (w, h) = (tile.width(), tile.height());
    let (s, c) = angle_deg.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = (c * dx + s * dy + cx).clamp(0.0, (w - 1) as f64);
            let sy = (-s * dx + c * dy + cy).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let (p00, p10, p01, p11) = (
                tile.pixel(x0, y0),
                tile.pixel(x1, y0),
                tile.pixel(x0, y1),
                tile.pixel(x1, y1),
            );
            for ch in 0..3 {
                let v = p00[ch] as f64 * (1.0 - fx) * (1.0 - fy)
                    + p10[ch] as f64 * fx * (1.0 - fy)
                    + p01[ch] as f64 * (1.0 - fx) * fy
                    + p11[ch] as f64 * fx * fy;
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    TilePixels::new(w, h, data).expect("same dimensions")
}

/// Rotate, flip horizontally, flip vertically, then crop, in that order.
pub fn augment_with(
    tile: &TilePixels,
    params: &AugmentParams,
    crop_size: usize,
    mode: RotationMode,
) -> Result<TilePixels> {
    if tile.width() != tile.height() {
        return Err(Error::Dimension(format!(
            "augmentation needs a square tile, got {}x{}",
            tile.width(),
            tile.height()
        )));
    }
    let n = tile.width();
    if crop_size > n || params.crop_x + crop_size > n || params.crop_y + crop_size > n {
        return Err(Error::Dimension(format!(
            "crop {crop_size} at ({}, {}) does not fit a {n}x{n} tile",
            params.crop_x, params.crop_y
        )));
    }
    let mut t = match mode {
        RotationMode::RightAngles => {
            let mut t = tile.clone();
            for _ in 0..params.quarter_turns % 4 {
                t = rotate_quarter(&t);
            }
            t
        }
        RotationMode::Arbitrary => rotate_bilinear(tile, params.angle_deg),
    };
    if params.flip_horizontal {
        t = remap(&t, |x, y| (n - 1 - x, y));
    }
    if params.flip_vertical {
        t = remap(&t, |x, y| (x, n - 1 - y));
    }
    t.crop(params.crop_x, params.crop_y, crop_size, crop_size)
}

/// Training augmentation of a `output_size` tile to `crop_size`.
pub fn augment(tile: &TilePixels, seed: u64, spec: &TileSpec) -> Result<TilePixels> {
    if tile.width() != spec.output_size || tile.height() != spec.output_size {
        return Err(Error::Dimension(format!(
            "augment expects {0}x{0} input, got {1}x{2}",
            spec.output_size,
            tile.width(),
            tile.height()
        )));
    }
    let params = AugmentParams::draw(seed, spec.output_size, spec.crop_size);
    augment_with(tile, &params, spec.crop_size, RotationMode::RightAngles)
}

pub fn luminance_histogram(tile: &TilePixels) -> [u64; 256] {
    histogram(tile.pixels().map(luminance))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct evaluation of the between-class variance for every t.
    fn exhaustive_otsu(h: &[u64; 256]) -> usize {
        let total: f64 = h.iter().map(|&c| c as f64).sum();
        let mut scores = [0.0f64; 256];
        for (t, score) in scores.iter_mut().enumerate() {
            let (mut n0, mut s0, mut n1, mut s1) = (0.0, 0.0, 0.0, 0.0);
            for (i, &c) in h.iter().enumerate() {
                if i <= t {
                    n0 += c as f64;
                    s0 += (i as f64) * c as f64;
                } else {
                    n1 += c as f64;
                    s1 += (i as f64) * c as f64;
                }
            }
            if n0 > 0.0 && n1 > 0.0 {
                let (w0, w1) = (n0 / total, n1 / total);
                let d = s0 / n0 - s1 / n1;
                *score = w0 * w1 * d * d;
            }
        }
        argmax_smallest(&scores)
    }

    #[test]
    fn two_spikes() {
        let mut h = [0u64; 256];
        h[50] = 100;
        h[200] = 300;
        let t = otsu_threshold(&h).unwrap();
        assert_eq!(t.threshold, 50);
        assert!(!t.degenerate);
    }

    #[test]
    fn uniform_histogram_matches_scan() {
        let h = [7u64; 256];
        let t = otsu_threshold(&h).unwrap();
        assert_eq!(t.threshold as usize, exhaustive_otsu(&h));
        assert_eq!(t.threshold, 127);
    }

    #[test]
    fn single_spike_is_degenerate() {
        let mut h = [0u64; 256];
        h[90] = 12;
        assert_eq!(
            otsu_threshold(&h).unwrap(),
            OtsuThreshold {
                threshold: 90,
                degenerate: true
            }
        );
        assert!(otsu_threshold(&[0; 256]).is_err());
    }

    fn half_and_half(w: usize, h: usize) -> TilePixels {
        let mut data = Vec::new();
        for _y in 0..h {
            for x in 0..w {
                data.extend(if x < w / 2 { [90, 40, 120] } else { [255, 255, 255] });
            }
        }
        TilePixels::new(w, h, data).unwrap()
    }

    fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Polygon {
        Polygon::new(vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)]).unwrap()
    }

    #[test]
    fn white_roi_has_no_tissue() {
        let t = TilePixels::filled(20, 20, [255, 255, 255]).unwrap();
        assert!(matches!(
            build_mask(&t, &rect(0.0, 0.0, 20.0, 20.0)),
            Err(Error::NoTissueInRoi)
        ));
    }

    #[test]
    fn half_dark_rectangle_masks_dark_half() {
        let t = half_and_half(40, 20);
        let mask = build_mask(&t, &rect(0.0, 0.0, 40.0, 20.0)).unwrap();
        for y in 0..20 {
            for x in 0..40 {
                assert_eq!(mask.get(x, y), x < 20, "({x},{y})");
            }
        }
    }

    #[test]
    fn mask_stays_inside_polygon() {
        let t = half_and_half(40, 40);
        let tri = Polygon::new(vec![(2.0, 3.0), (35.0, 8.0), (10.0, 37.0)]).unwrap();
        let mask = build_mask(&t, &tri).unwrap();
        for y in 0..40 {
            for x in 0..40 {
                if mask.get(x, y) {
                    assert!(tri.contains(x as f64 + 0.5, y as f64 + 0.5));
                }
            }
        }
    }

    #[test]
    fn degenerate_polygons_rejected() {
        assert!(Polygon::new(vec![(0.0, 0.0), (1.0, 1.0)]).is_err());
        assert!(Polygon::new(vec![(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)]).is_err());
        assert!(Polygon::parse("0 0\n10 0\n10 10 # corner\n").is_ok());
        assert!(Polygon::parse("0 0 1\n").is_err());
    }

    #[test]
    fn single_candidate_repeats() {
        let mut bits = vec![false; 100];
        for y in 2..6 {
            for x in 3..7 {
                bits[y * 10 + x] = true;
            }
        }
        let mask = RoiMask::new(10, 10, bits).unwrap();
        let s = sample_tiles(&mask, 4, 1000, 1.0, 1).unwrap();
        assert!(s.with_replacement);
        assert_eq!(s.positions.len(), 1000);
        assert!(s.positions.iter().all(|&p| p == (3, 2)));
    }

    #[test]
    fn full_mask_sampling_is_deterministic() {
        let mask = RoiMask::new(32, 32, vec![true; 1024]).unwrap();
        let a = sample_tiles(&mask, 8, 10, 0.5, 42).unwrap();
        let b = sample_tiles(&mask, 8, 10, 0.5, 42).unwrap();
        assert_eq!(a, b);
        assert!(!a.with_replacement);
        let c = sample_tiles(&mask, 8, 10, 0.5, 43).unwrap();
        assert_ne!(a.positions, c.positions);
    }

    #[test]
    fn empty_mask_has_no_candidates() {
        let mask = RoiMask::new(8, 8, vec![false; 64]).unwrap();
        assert!(matches!(
            sample_tiles(&mask, 2, 5, 0.5, 0),
            Err(Error::NoTissueInRoi)
        ));
    }

    #[test]
    fn box_downsample_rounds_block_means() {
        let t = TilePixels::new(2, 2, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 255, 255, 255]).unwrap();
        let d = downsample_box(&t, 2).unwrap();
        assert_eq!(d.data(), &[65, 65, 65]);
    }

    fn gradient_tile(n: usize) -> TilePixels {
        let mut data = Vec::new();
        for y in 0..n {
            for x in 0..n {
                data.extend([x as u8, y as u8, ((x * 7 + y * 13) % 256) as u8]);
            }
        }
        TilePixels::new(n, n, data).unwrap()
    }

    #[test]
    fn identity_params_give_center_crop() {
        let t = gradient_tile(256);
        let out = augment_with(&t, &AugmentParams::centered(256, 224), 224, RotationMode::RightAngles)
            .unwrap();
        assert_eq!(out, t.crop(16, 16, 224, 224).unwrap());
    }

    #[test]
    fn augment_only_moves_pixels() {
        let t = gradient_tile(256);
        let spec = TileSpec::default();
        let mut source: std::collections::HashSet<[u8; 3]> = t.pixels().collect();
        source.shrink_to_fit();
        for seed in 0..20 {
            let out = augment(&t, seed, &spec).unwrap();
            assert_eq!((out.width(), out.height()), (224, 224));
            assert!(out.pixels().all(|p| source.contains(&p)));
        }
        assert!(augment(&gradient_tile(200), 0, &spec).is_err());
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        let t = TilePixels::new(2, 2, vec![1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4]).unwrap();
        // 1 2      2 4
        // 3 4  ->  1 3
        let r = rotate_quarter(&t);
        assert_eq!(r.data(), &[2, 2, 2, 4, 4, 4, 1, 1, 1, 3, 3, 3]);
        let mut full = t.clone();
        for _ in 0..4 {
            full = rotate_quarter(&full);
        }
        assert_eq!(full, t);
    }

    #[test]
    fn arbitrary_rotation_keeps_size() {
        let t = gradient_tile(64);
        let mut p = AugmentParams::centered(64, 48);
        p.angle_deg = 33.0;
        let out = augment_with(&t, &p, 48, RotationMode::Arbitrary).unwrap();
        assert_eq!((out.width(), out.height()), (48, 48));
        p.angle_deg = 0.0;
        let same = augment_with(&t, &p, 48, RotationMode::Arbitrary).unwrap();
        assert_eq!(same, t.crop(8, 8, 48, 48).unwrap());
    }

    #[test]
    fn tile_slide_end_to_end() {
        // 256x256 level-0 slide, dark square in the middle.
        let mut data = Vec::new();
        for y in 0..256 {
            for x in 0..256 {
                let dark = (64..192).contains(&x) && (64..192).contains(&y);
                data.extend(if dark { [120, 60, 140] } else { [250, 250, 250] });
            }
        }
        let slide = TilePixels::new(256, 256, data).unwrap();
        let spec = TileSpec {
            source_size: 64,
            output_size: 32,
            tiles_per_slide: 5,
            crop_size: 24,
            mask_downsample: 8,
            ..TileSpec::default()
        };
        let poly = rect(0.0, 0.0, 256.0, 256.0);
        let tiling = tile_slide(&slide, &poly, &spec, 9).unwrap();
        assert_eq!(tiling.tiles.len(), 5);
        assert!(!tiling.with_replacement);
        for t in &tiling.tiles {
            assert_eq!((t.pixels.width(), t.pixels.height()), (32, 32));
            assert_eq!(t.x % 8, 0);
            // Footprint at least half inside the dark square.
            let inside = |v: u64| (64..192).contains(&v);
            let cov = (t.x..t.x + 64).filter(|&x| inside(x)).count()
                * (t.y..t.y + 64).filter(|&y| inside(y)).count();
            assert!(cov * 2 >= 64 * 64);
        }
    }
}
