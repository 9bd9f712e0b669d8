//! Tissue detection, random ROI sampling and deterministic tile plans.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{write_rle, BitGrid, RleReader, FOREGROUND_MAGIC};
use crate::pyramid::{PyramidImage, Region};
use crate::raster::RgbImage;
use crate::rng;

/// A window at one pyramid level; used for sampled ROIs and inference tiles.
pub type TileRef = Region;

/// Rejection draws attempted before falling back to an exhaustive scan.
pub const MAX_REJECTION_DRAWS: usize = 10_000;

/// Tissue occupancy of one pyramid level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForegroundMask {
    pub level: usize,
    pub bits: BitGrid,
    /// Luma threshold that produced `bits`; `None` when loaded from disk,
    /// where the threshold is not recorded.
    pub threshold_used: Option<u8>,
}

impl ForegroundMask {
    pub fn width(&self) -> usize {
        self.bits.width()
    }

    pub fn height(&self) -> usize {
        self.bits.height()
    }

    pub fn fraction(&self) -> f64 {
        self.bits.count_ones() as f64 / (self.width() * self.height()) as f64
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rle(path.as_ref(), FOREGROUND_MAGIC, self.level, &self.bits)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let reader = RleReader::open(path, FOREGROUND_MAGIC)?;
        let level = reader.level();
        Ok(Self {
            level,
            bits: reader.into_grid()?,
            threshold_used: None,
        })
    }

    /// Foreground fraction of `tile`, which may sit at a finer level than the
    /// mask; coordinates are then mapped outward onto the mask grid.
    pub fn tile_fraction(&self, tile: &TileRef) -> Result<f64> {
        if tile.level > self.level {
            return Err(Error::Bounds(format!(
                "tile at level {} is coarser than mask level {}",
                tile.level, self.level
            )));
        }
        let shift = self.level - tile.level;
        let x0 = tile.x >> shift;
        let y0 = tile.y >> shift;
        let x1 = ((tile.x + tile.width).div_ceil(1 << shift)).min(self.width());
        let y1 = ((tile.y + tile.height).div_ceil(1 << shift)).min(self.height());
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::Bounds(format!("tile {tile:?} outside mask")));
        }
        let area = ((x1 - x0) * (y1 - y0)) as f64;
        Ok(self.bits.count_rect(x0, y0, x1 - x0, y1 - y0) as f64 / area)
    }
}

/// Between-class variance numerator for a split at `t`; class 0 is `< t`.
fn between_class(n0: f64, s0: f64, n1: f64, s1: f64) -> f64 {
    if n0 == 0.0 || n1 == 0.0 {
        return 0.0;
    }
    let d = s0 * n1 - s1 * n0;
    d * d / (n0 * n1)
}

/// Otsu threshold of a 256-bin histogram. Returns `t` maximising the
/// between-class variance of `{v < t}` against `{v >= t}`, lowest `t` on
/// ties, or `None` when no split separates anything.
pub fn otsu_threshold(hist: &[u64; 256]) -> Option<u8> {
    let n: f64 = hist.iter().map(|&c| c as f64).sum();
    let s: f64 = hist.iter().enumerate().map(|(v, &c)| v as f64 * c as f64).sum();
    let (mut n0, mut s0) = (0.0, 0.0);
    let mut best = (0.0, 0u8);
    for t in 1..256 {
        n0 += hist[t - 1] as f64;
        s0 += (t - 1) as f64 * hist[t - 1] as f64;
        let var = between_class(n0, s0, n - n0, s - s0);
        if var > best.0 {
            best = (var, t as u8);
        }
    }
    (best.0 > 0.0).then_some(best.1)
}

pub fn luma_histogram(img: &RgbImage) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for px in img.as_bytes().chunks_exact(3) {
        hist[RgbImage::luma([px[0], px[1], px[2]]) as usize] += 1;
    }
    hist
}

/// Thresholds a raster: pixels darker than the Otsu level are tissue.
pub fn foreground_of_raster(img: &RgbImage, level: usize) -> Result<ForegroundMask> {
    let hist = luma_histogram(img);
    let (w, h) = (img.width(), img.height());
    let Some(t) = otsu_threshold(&hist) else {
        return Err(Error::DegenerateHistogram(Box::new(ForegroundMask {
            level,
            bits: BitGrid::new(w, h),
            threshold_used: Some(0),
        })));
    };
    let bits = BitGrid::from_fn(w, h, |x, y| RgbImage::luma(img.pixel(x, y)) < t);
    Ok(ForegroundMask {
        level,
        bits,
        threshold_used: Some(t),
    })
}

/// Foreground mask of one pyramid level, read in horizontal strips.
pub fn compute_foreground(img: &PyramidImage, level: usize) -> Result<ForegroundMask> {
    let (w, h) = img.level_dims(level)?;
    let strip = img.tile_size();
    let strips = || (0..h).step_by(strip).map(move |y| Region::new(level, 0, y, w, strip.min(h - y)));

    let mut hist = [0u64; 256];
    for r in strips() {
        for (bin, c) in luma_histogram(&img.read_region(&r)?).iter().enumerate() {
            hist[bin] += c;
        }
    }
    let Some(t) = otsu_threshold(&hist) else {
        return Err(Error::DegenerateHistogram(Box::new(ForegroundMask {
            level,
            bits: BitGrid::new(w, h),
            threshold_used: Some(0),
        })));
    };
    let mut bits = BitGrid::new(w, h);
    for r in strips() {
        let px = img.read_region(&r)?;
        for y in 0..r.height {
            let row = px.row(y);
            for x in 0..w {
                let i = 3 * x;
                if RgbImage::luma([row[i], row[i + 1], row[i + 2]]) < t {
                    bits.set(x, r.y + y, true);
                }
            }
        }
    }
    Ok(ForegroundMask {
        level,
        bits,
        threshold_used: Some(t),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub roi_width: usize,
    pub roi_height: usize,
    pub min_foreground_fraction: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            roi_width: 3840,
            roi_height: 2160,
            min_foreground_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, mask: &ForegroundMask) -> Result<()> {
        if !(self.min_foreground_fraction > 0.0 && self.min_foreground_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "min foreground fraction {} outside (0, 1]",
                self.min_foreground_fraction
            )));
        }
        if self.roi_width == 0
            || self.roi_height == 0
            || self.roi_width > mask.width()
            || self.roi_height > mask.height()
        {
            return Err(Error::Config(format!(
                "ROI {}x{} does not fit level {} ({}x{})",
                self.roi_width,
                self.roi_height,
                mask.level,
                mask.width(),
                mask.height()
            )));
        }
        Ok(())
    }

    /// Smallest foreground pixel count an accepted ROI must contain.
    pub fn required_pixels(&self) -> u64 {
        let area = (self.roi_width * self.roi_height) as f64;
        (self.min_foreground_fraction * area).ceil() as u64
    }
}

/// Draws ROI number `draw_index`: uniform over anchors whose window holds at
/// least the configured foreground fraction.
///
/// Rejection sampling is tried first; if [`MAX_REJECTION_DRAWS`] candidates
/// all fail, every anchor is scanned and one valid anchor is picked with the
/// same generator, so a valid ROI is found whenever one exists.
pub fn sample_roi(mask: &ForegroundMask, cfg: &SamplerConfig, draw_index: u64) -> Result<TileRef> {
    cfg.validate(mask)?;
    let need = cfg.required_pixels();
    if mask.bits.count_ones() < need {
        return Err(Error::NoForeground);
    }
    let (rw, rh) = (cfg.roi_width, cfg.roi_height);
    let span_x = mask.width() - rw;
    let span_y = mask.height() - rh;
    let mut rng = rng::keyed(cfg.seed, rng::domain::SAMPLER, draw_index);
    for _ in 0..MAX_REJECTION_DRAWS {
        let x = rng.random_range(0..=span_x);
        let y = rng.random_range(0..=span_y);
        if mask.bits.count_rect(x, y, rw, rh) >= need {
            return Ok(Region::new(mask.level, x, y, rw, rh));
        }
    }
    let valid = valid_anchors(&mask.bits, rw, rh, need);
    if valid.is_empty() {
        return Err(Error::NoForeground);
    }
    let (x, y) = valid[rng.random_range(0..valid.len())];
    Ok(Region::new(mask.level, x, y, rw, rh))
}

/// All anchors, row-major, whose `w`×`h` window holds at least `need` set
/// bits. Sliding column sums keep this O(width × height).
pub(crate) fn valid_anchors(bits: &BitGrid, w: usize, h: usize, need: u64) -> Vec<(usize, usize)> {
    let (gw, gh) = bits.dims();
    let mut cols = vec![0u64; gw];
    for y in 0..h {
        for (x, c) in cols.iter_mut().enumerate() {
            *c += bits.get(x, y) as u64;
        }
    }
    let mut out = Vec::new();
    for y in 0..=gh - h {
        if y > 0 {
            for (x, c) in cols.iter_mut().enumerate() {
                *c = *c + bits.get(x, y + h - 1) as u64 - bits.get(x, y - 1) as u64;
            }
        }
        let mut window: u64 = cols[..w].iter().sum();
        for x in 0..=gw - w {
            if x > 0 {
                window = window + cols[x + w - 1] - cols[x - 1];
            }
            if window >= need {
                out.push((x, y));
            }
        }
    }
    out
}

fn axis_anchors(extent: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut anchors = Vec::new();
    let mut a = 0;
    loop {
        anchors.push(a.min(extent - tile));
        if a + tile >= extent {
            break;
        }
        a += stride;
    }
    anchors
}

/// Row-major tile grid covering a `level_width`×`level_height` level. The
/// last anchor on each axis is pulled back so no tile leaves the level.
pub fn tile_plan(
    level: usize,
    level_width: usize,
    level_height: usize,
    tile_w: usize,
    tile_h: usize,
    overlap: usize,
) -> Result<Vec<TileRef>> {
    if tile_w == 0 || tile_h == 0 {
        return Err(Error::InvalidTiling("zero tile size".into()));
    }
    if overlap >= tile_w.min(tile_h) {
        return Err(Error::InvalidTiling(format!(
            "overlap {overlap} must be below the tile size {tile_w}x{tile_h}"
        )));
    }
    if tile_w > level_width || tile_h > level_height {
        return Err(Error::InvalidTiling(format!(
            "tile {tile_w}x{tile_h} larger than level {level_width}x{level_height}"
        )));
    }
    let xs = axis_anchors(level_width, tile_w, tile_w - overlap);
    let ys = axis_anchors(level_height, tile_h, tile_h - overlap);
    Ok(ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| Region::new(level, x, y, tile_w, tile_h)))
        .collect())
}

/// Keeps the tiles whose foreground fraction reaches `min_fraction`.
pub fn foreground_tiles(plan: &[TileRef], mask: &ForegroundMask, min_fraction: f64) -> Result<Vec<TileRef>> {
    let mut out = Vec::with_capacity(plan.len());
    for t in plan {
        if min_fraction <= 0.0 || mask.tile_fraction(t)? >= min_fraction {
            out.push(*t);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(bits: BitGrid) -> ForegroundMask {
        ForegroundMask {
            level: 0,
            bits,
            threshold_used: Some(128),
        }
    }

    /// Between-class variance of each threshold, computed directly from the
    /// class means and weights.
    fn otsu_oracle(hist: &[u64; 256]) -> Option<u8> {
        let total: u64 = hist.iter().sum();
        let mut best: Option<(f64, u8)> = None;
        for t in 1..256usize {
            let c0: Vec<(usize, u64)> = (0..t).map(|v| (v, hist[v])).collect();
            let c1: Vec<(usize, u64)> = (t..256).map(|v| (v, hist[v])).collect();
            let n0: u64 = c0.iter().map(|p| p.1).sum();
            let n1: u64 = c1.iter().map(|p| p.1).sum();
            let var = if n0 == 0 || n1 == 0 {
                0.0
            } else {
                let m0 = c0.iter().map(|&(v, c)| v as f64 * c as f64).sum::<f64>() / n0 as f64;
                let m1 = c1.iter().map(|&(v, c)| v as f64 * c as f64).sum::<f64>() / n1 as f64;
                let (w0, w1) = (n0 as f64 / total as f64, n1 as f64 / total as f64);
                w0 * w1 * (m0 - m1) * (m0 - m1)
            };
            match best {
                Some((b, _)) if var <= b * (1.0 + 1e-12) => {}
                _ => best = Some((var, t as u8)),
            }
        }
        best.filter(|b| b.0 > 0.0).map(|b| b.1)
    }

    #[test]
    fn half_black_half_white() {
        let mut img = RgbImage::filled(64, 32, [255; 3]);
        for y in 0..32 {
            for x in 0..32 {
                img.put_pixel(x, y, [0; 3]);
            }
        }
        let m = foreground_of_raster(&img, 0).unwrap();
        let t = m.threshold_used.unwrap();
        assert!(t > 0);
        assert_eq!(Some(t), otsu_oracle(&luma_histogram(&img)));
        assert_eq!(m.bits.count_rect(0, 0, 32, 32), 32 * 32);
        assert_eq!(m.bits.count_ones(), 32 * 32);
    }

    #[test]
    fn all_white_is_degenerate() {
        let img = RgbImage::filled(16, 16, [255; 3]);
        match foreground_of_raster(&img, 0) {
            Err(Error::DegenerateHistogram(m)) => {
                assert_eq!(m.bits.count_ones(), 0);
                assert_eq!(m.threshold_used, Some(0));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gray_disks_on_white() {
        let (w, h) = (400, 300);
        let disks = [(100.0, 100.0, 40.0), (280.0, 180.0, 60.0), (60.0, 240.0, 25.0)];
        let inside = |x: usize, y: usize| {
            disks.iter().any(|&(cx, cy, r): &(f64, f64, f64)| {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                dx * dx + dy * dy <= r * r
            })
        };
        let mut img = RgbImage::filled(w, h, [245; 3]);
        let mut area = 0usize;
        for y in 0..h {
            for x in 0..w {
                if inside(x, y) {
                    img.put_pixel(x, y, [140; 3]);
                    area += 1;
                }
            }
        }
        let m = foreground_of_raster(&img, 0).unwrap();
        let expected = area as f64 / (w * h) as f64;
        assert!((m.fraction() - expected).abs() <= 0.01);
    }

    #[test]
    fn otsu_matches_exhaustive_scan() {
        let mut r = rng::stream(11, 0);
        for _ in 0..100 {
            let mut hist = [0u64; 256];
            let bins = r.random_range(2..40);
            for _ in 0..bins {
                hist[r.random_range(0..256)] += r.random_range(1..5000);
            }
            assert_eq!(otsu_threshold(&hist), otsu_oracle(&hist));
        }
    }

    #[test]
    fn full_mask_accepts_first_draw_reproducibly() {
        let m = mask_from(BitGrid::from_fn(100, 80, |_, _| true));
        let cfg = SamplerConfig {
            roi_width: 30,
            roi_height: 20,
            min_foreground_fraction: 1.0,
            seed: 5,
        };
        let a = sample_roi(&m, &cfg, 0).unwrap();
        assert_eq!(a, sample_roi(&m, &cfg, 0).unwrap());
        assert_eq!((a.width, a.height), (30, 20));
    }

    #[test]
    fn empty_mask_has_no_foreground() {
        let m = mask_from(BitGrid::new(100, 80));
        let cfg = SamplerConfig {
            roi_width: 30,
            roi_height: 20,
            min_foreground_fraction: 0.5,
            seed: 5,
        };
        assert!(matches!(sample_roi(&m, &cfg, 0), Err(Error::NoForeground)));
    }

    #[test]
    fn single_block_is_the_only_anchor() {
        let (rw, rh) = (48, 32);
        let bits = BitGrid::from_fn(512, 384, |x, y| (64..64 + rw).contains(&x) && (64..64 + rh).contains(&y));
        // Enumerate every anchor independently.
        let full: Vec<(usize, usize)> = (0..=384 - rh)
            .flat_map(|y| (0..=512 - rw).map(move |x| (x, y)))
            .filter(|&(x, y)| bits.count_rect(x, y, rw, rh) == (rw * rh) as u64)
            .collect();
        assert_eq!(full, vec![(64, 64)]);
        let m = mask_from(bits);
        let cfg = SamplerConfig {
            roi_width: rw,
            roi_height: rh,
            min_foreground_fraction: 1.0,
            seed: 1,
        };
        let t = sample_roi(&m, &cfg, 3).unwrap();
        assert_eq!((t.x, t.y), (64, 64));
    }

    #[test]
    fn sampler_rejects_bad_config() {
        let m = mask_from(BitGrid::from_fn(10, 10, |_, _| true));
        let mut cfg = SamplerConfig {
            roi_width: 11,
            roi_height: 2,
            min_foreground_fraction: 0.5,
            seed: 0,
        };
        assert!(matches!(sample_roi(&m, &cfg, 0), Err(Error::Config(_))));
        cfg.roi_width = 2;
        cfg.min_foreground_fraction = 0.0;
        assert!(matches!(sample_roi(&m, &cfg, 0), Err(Error::Config(_))));
    }

    fn anchors(plan: &[TileRef]) -> (Vec<usize>, Vec<usize>) {
        let mut xs: Vec<usize> = plan.iter().map(|t| t.x).collect();
        let mut ys: Vec<usize> = plan.iter().map(|t| t.y).collect();
        xs.sort();
        xs.dedup();
        ys.sort();
        ys.dedup();
        (xs, ys)
    }

    #[test]
    fn tile_plan_examples() {
        let p = tile_plan(0, 8192, 8192, 4096, 4096, 0).unwrap();
        let got: Vec<(usize, usize)> = p.iter().map(|t| (t.x, t.y)).collect();
        assert_eq!(got, vec![(0, 0), (4096, 0), (0, 4096), (4096, 4096)]);

        let p = tile_plan(0, 10_000, 8000, 4000, 4000, 0).unwrap();
        assert_eq!(p.len(), 6);
        assert_eq!(anchors(&p), (vec![0, 4000, 6000], vec![0, 4000]));

        assert_eq!(tile_plan(0, 4096, 4096, 4096, 4096, 512).unwrap().len(), 1);
    }

    #[test]
    fn tile_plan_errors() {
        assert!(matches!(tile_plan(0, 100, 100, 200, 50, 0), Err(Error::InvalidTiling(_))));
        assert!(matches!(tile_plan(0, 100, 100, 50, 50, 50), Err(Error::InvalidTiling(_))));
    }

    #[test]
    fn foreground_tile_filter() {
        let bits = BitGrid::from_fn(64, 64, |x, _| x < 32);
        let m = mask_from(bits);
        let plan = tile_plan(0, 64, 64, 32, 32, 0).unwrap();
        assert_eq!(foreground_tiles(&plan, &m, 0.0).unwrap(), plan);
        let kept = foreground_tiles(&plan, &m, 0.9).unwrap();
        assert_eq!(kept, vec![plan[0], plan[2]]);
        let empty = mask_from(BitGrid::new(64, 64));
        assert!(foreground_tiles(&plan, &empty, 0.1).unwrap().is_empty());
    }

    #[test]
    fn coarse_mask_maps_fine_tiles() {
        let m = ForegroundMask {
            level: 1,
            bits: BitGrid::from_fn(32, 32, |x, _| x < 16),
            threshold_used: None,
        };
        let t = Region::new(0, 0, 0, 32, 64);
        assert_eq!(m.tile_fraction(&t).unwrap(), 1.0);
        let t = Region::new(0, 16, 0, 32, 64);
        assert_eq!(m.tile_fraction(&t).unwrap(), 0.5);
    }

    #[test]
    fn valid_anchor_scan_matches_count_rect() {
        let bits = BitGrid::from_fn(90, 70, |x, y| (x * 13 + y * 29) % 11 < 4 || (x > 50 && y > 30));
        let need = 200;
        let scan = valid_anchors(&bits, 20, 15, need);
        let brute: Vec<(usize, usize)> = (0..=70 - 15)
            .flat_map(|y| (0..=90 - 20).map(move |x| (x, y)))
            .filter(|&(x, y)| bits.count_rect(x, y, 20, 15) >= need)
            .collect();
        assert_eq!(scan, brute);
    }

    #[test]
    fn foreground_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = ForegroundMask {
            level: 1,
            bits: BitGrid::from_fn(70, 33, |x, y| x * y % 7 == 1),
            threshold_used: Some(200),
        };
        let p = dir.path().join("x.fg");
        m.save(&p).unwrap();
        let back = ForegroundMask::load(&p).unwrap();
        assert_eq!(back.bits, m.bits);
        assert_eq!(back.level, 1);
        assert_eq!(&std::fs::read(&p).unwrap()[..4], b"HHFG");
    }
}
