//! Whole-slide inference: plan tiles over a pyramid level, predict the
//! foreground ones, average overlapping probabilities and threshold the
//! result into a full-level mask.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::foreground::{compute_foreground, foreground_tiles, tile_plan, TileRef};
use crate::mask::{BitGrid, WsiMask};
use crate::model::{ProbMap, SegModel};
use crate::pyramid::PyramidImage;
use crate::raster::RgbImage;

/// Side of the square accumulator chunks, allocated on first touch.
pub const CHUNK: usize = 512;

/// Anything that maps a tile of pixels to per-class probabilities of the
/// same size.
pub trait TileModel: Sync {
    fn classes(&self) -> usize {
        1
    }

    fn predict(&self, tile: &TileRef, pixels: &RgbImage) -> Result<ProbMap>;
}

impl TileModel for SegModel {
    fn classes(&self) -> usize {
        self.config.classes
    }

    fn predict(&self, _tile: &TileRef, pixels: &RgbImage) -> Result<ProbMap> {
        self.forward(pixels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TileConfig {
    pub tile_width: usize,
    pub tile_height: usize,
    pub overlap: usize,
    /// Tiles whose foreground fraction is below this are not inferred.
    pub min_fg_fraction: f64,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            tile_width: 3840,
            tile_height: 2160,
            overlap: 0,
            min_fg_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferOptions {
    pub threshold: f64,
    /// Worker threads; `None` uses the available parallelism.
    pub workers: Option<usize>,
    /// Level the tissue mask for tile filtering is computed at; defaults to
    /// three levels above the inference level, capped at the coarsest.
    pub foreground_level: Option<usize>,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            workers: None,
            foreground_level: None,
        }
    }
}

struct Chunk {
    sum: Vec<f64>,
    count: Vec<u32>,
}

/// Sparse per-pixel probability sums and contribution counts.
pub struct ProbAccumulator {
    level: usize,
    width: usize,
    height: usize,
    classes: usize,
    chunks_x: usize,
    chunks: Vec<Option<Chunk>>,
    skipped: Vec<TileRef>,
}

impl ProbAccumulator {
    pub fn new(level: usize, width: usize, height: usize, classes: usize) -> Self {
        let chunks_x = width.div_ceil(CHUNK);
        let chunks_y = height.div_ceil(CHUNK);
        Self {
            level,
            width,
            height,
            classes,
            chunks_x,
            chunks: (0..chunks_x * chunks_y).map(|_| None).collect(),
            skipped: Vec::new(),
        }
    }

    pub fn allocated_chunks(&self) -> usize {
        self.chunks.iter().filter(|c| c.is_some()).count()
    }

    fn check_tile(&self, tile: &TileRef) -> Result<()> {
        if tile.level != self.level || tile.x + tile.width > self.width || tile.y + tile.height > self.height {
            return Err(Error::Bounds(format!("tile {tile:?} outside the accumulator")));
        }
        Ok(())
    }

    /// Adds one predicted tile.
    pub fn add(&mut self, tile: &TileRef, prob: &ProbMap) -> Result<()> {
        self.check_tile(tile)?;
        if (prob.width, prob.height, prob.classes) != (tile.width, tile.height, self.classes) {
            return Err(Error::Shape(format!(
                "prediction {}x{}x{} for tile {}x{} with {} classes",
                prob.width, prob.height, prob.classes, tile.width, tile.height, self.classes
            )));
        }
        let plane = tile.width * tile.height;
        let area = CHUNK * CHUNK;
        for cy in tile.y / CHUNK..(tile.y + tile.height).div_ceil(CHUNK) {
            for cx in tile.x / CHUNK..(tile.x + tile.width).div_ceil(CHUNK) {
                let chunk = self.chunks[cy * self.chunks_x + cx].get_or_insert_with(|| Chunk {
                    sum: vec![0.0; self.classes * area],
                    count: vec![0; area],
                });
                let y0 = tile.y.max(cy * CHUNK);
                let y1 = (tile.y + tile.height).min((cy + 1) * CHUNK);
                let x0 = tile.x.max(cx * CHUNK);
                let x1 = (tile.x + tile.width).min((cx + 1) * CHUNK);
                for y in y0..y1 {
                    let local = (y - cy * CHUNK) * CHUNK + (x0 - cx * CHUNK);
                    let src = (y - tile.y) * tile.width + (x0 - tile.x);
                    for c in chunk.count[local..local + x1 - x0].iter_mut() {
                        *c += 1;
                    }
                    for k in 0..self.classes {
                        let dst = &mut chunk.sum[k * area + local..k * area + local + x1 - x0];
                        let s = &prob.data[k * plane + src..k * plane + src + x1 - x0];
                        for (a, &b) in dst.iter_mut().zip(s) {
                            *a += b;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Records a background tile: probability 0 with one contribution.
    /// Must follow every [`add`](Self::add) so it reaches all chunks that
    /// predictions allocated; untouched chunks stay unallocated since their
    /// probability is 0 whatever the count.
    pub fn add_skipped(&mut self, tile: &TileRef) -> Result<()> {
        self.check_tile(tile)?;
        for cy in tile.y / CHUNK..(tile.y + tile.height).div_ceil(CHUNK) {
            for cx in tile.x / CHUNK..(tile.x + tile.width).div_ceil(CHUNK) {
                if let Some(chunk) = &mut self.chunks[cy * self.chunks_x + cx] {
                    let y0 = tile.y.max(cy * CHUNK);
                    let y1 = (tile.y + tile.height).min((cy + 1) * CHUNK);
                    let x0 = tile.x.max(cx * CHUNK) - cx * CHUNK;
                    let x1 = (tile.x + tile.width).min((cx + 1) * CHUNK) - cx * CHUNK;
                    for y in y0..y1 {
                        let row = (y - cy * CHUNK) * CHUNK;
                        chunk.count[row + x0..row + x1].iter_mut().for_each(|c| *c += 1);
                    }
                }
            }
        }
        self.skipped.push(*tile);
        Ok(())
    }

    /// Contributions at `(x, y)`.
    pub fn count(&self, x: usize, y: usize) -> u32 {
        match &self.chunks[(y / CHUNK) * self.chunks_x + x / CHUNK] {
            Some(c) => c.count[(y % CHUNK) * CHUNK + x % CHUNK],
            None => self
                .skipped
                .iter()
                .filter(|t| x >= t.x && x < t.x + t.width && y >= t.y && y < t.y + t.height)
                .count() as u32,
        }
    }

    /// Averaged probability of `class` at `(x, y)`.
    pub fn probability(&self, class: usize, x: usize, y: usize) -> f64 {
        match &self.chunks[(y / CHUNK) * self.chunks_x + x / CHUNK] {
            Some(c) => {
                let i = (y % CHUNK) * CHUNK + x % CHUNK;
                if c.count[i] == 0 {
                    0.0
                } else {
                    c.sum[class * CHUNK * CHUNK + i] / c.count[i] as f64
                }
            }
            None => 0.0,
        }
    }

    /// `sum / count ≥ threshold` for one class.
    pub fn threshold(&self, class: usize, threshold: f64) -> WsiMask {
        let mut bits = BitGrid::new(self.width, self.height);
        let area = CHUNK * CHUNK;
        for (ci, chunk) in self.chunks.iter().enumerate() {
            let Some(c) = chunk else { continue };
            let (cx, cy) = (ci % self.chunks_x, ci / self.chunks_x);
            for ly in 0..CHUNK.min(self.height - cy * CHUNK) {
                for lx in 0..CHUNK.min(self.width - cx * CHUNK) {
                    let i = ly * CHUNK + lx;
                    if c.count[i] > 0 && c.sum[class * area + i] / c.count[i] as f64 >= threshold {
                        bits.set(cx * CHUNK + lx, cy * CHUNK + ly, true);
                    }
                }
            }
        }
        WsiMask::new(self.level, bits)
    }
}

/// Binary mask of class 0 over `level` of `img`.
pub fn infer_wsi(
    img: &PyramidImage,
    level: usize,
    model: &dyn TileModel,
    tiles: &TileConfig,
    threshold: f64,
) -> Result<WsiMask> {
    let opts = InferOptions {
        threshold,
        ..Default::default()
    };
    Ok(infer_wsi_with(img, level, model, tiles, &opts)?.swap_remove(0))
}

/// One mask per model class. The result does not depend on worker count:
/// predictions are folded into the accumulator in tile-plan order.
pub fn infer_wsi_with(
    img: &PyramidImage,
    level: usize,
    model: &dyn TileModel,
    tiles: &TileConfig,
    opts: &InferOptions,
) -> Result<Vec<WsiMask>> {
    let acc = accumulate(img, level, model, tiles, opts)?;
    Ok((0..model.classes()).map(|c| acc.threshold(c, opts.threshold)).collect())
}

/// Runs the tiles and returns the filled accumulator.
pub fn accumulate(
    img: &PyramidImage,
    level: usize,
    model: &dyn TileModel,
    tiles: &TileConfig,
    opts: &InferOptions,
) -> Result<ProbAccumulator> {
    if !(opts.threshold > 0.0 && opts.threshold <= 1.0) {
        return Err(Error::Config(format!("threshold {} outside (0, 1]", opts.threshold)));
    }
    if opts.workers == Some(0) {
        return Err(Error::Config("workers must be at least 1".into()));
    }
    let (w, h) = img.level_dims(level)?;
    let plan = tile_plan(level, w, h, tiles.tile_width, tiles.tile_height, tiles.overlap)?;
    let selected = if tiles.min_fg_fraction <= 0.0 {
        plan.clone()
    } else {
        let fg_level = opts
            .foreground_level
            .unwrap_or(level + 3)
            .min(img.level_count() - 1)
            .max(level);
        match compute_foreground(img, fg_level) {
            Ok(mask) => foreground_tiles(&plan, &mask, tiles.min_fg_fraction)?,
            Err(Error::DegenerateHistogram(_)) => Vec::new(),
            Err(e) => return Err(e),
        }
    };
    let classes = model.classes();
    let mut acc = ProbAccumulator::new(level, w, h, classes);
    let workers = opts
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    for batch in selected.chunks(2 * workers) {
        let preds: Vec<Result<ProbMap>> = pool.install(|| {
            batch
                .par_iter()
                .map(|t| {
                    let px = img.read_region(t)?;
                    let p = model.predict(t, &px)?;
                    if p.data.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Numerical(format!("non-finite prediction for tile {t:?}")));
                    }
                    Ok(p)
                })
                .collect()
        });
        for (t, p) in batch.iter().zip(preds) {
            acc.add(t, &p?)?;
        }
    }
    let mut chosen = selected.iter().peekable();
    for t in &plan {
        if chosen.peek() == Some(&t) {
            chosen.next();
        } else {
            acc.add_skipped(t)?;
        }
    }
    Ok(acc)
}

/// Slide raster at `out_level` with every mask pixel tinted green.
pub fn export_overlay(img: &PyramidImage, mask: &WsiMask, out_level: usize) -> Result<RgbImage> {
    let (w, h) = img.level_dims(out_level)?;
    let m = mask.at_level(out_level)?;
    if (m.width(), m.height()) != (w, h) {
        return Err(Error::Bounds(format!(
            "mask {}x{} at level {out_level} does not match slide level {w}x{h}",
            m.width(),
            m.height()
        )));
    }
    let mut out = img.read_level(out_level)?;
    for y in 0..h {
        let row = out.row_mut(y);
        for x in 0..w {
            if m.bits.get(x, y) {
                let p = &mut row[3 * x..3 * x + 3];
                p[0] /= 2;
                p[1] = p[1] / 2 + 128;
                p[2] /= 2;
            }
        }
    }
    Ok(out)
}
