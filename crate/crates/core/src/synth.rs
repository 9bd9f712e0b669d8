//! Synthetic slides: bright background, tissue made of large overlapping
//! discs, and dark non-overlapping target disks inside the tissue whose
//! union is the exact ground truth.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BitGrid, WsiMask};
use crate::pyramid::{import_image, PyramidImage};
use crate::raster::RgbImage;
use crate::rng;

/// Placement attempts per disk before generation gives up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 2_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSlideSpec {
    pub width: usize,
    pub height: usize,
    pub disk_count: usize,
    /// Inclusive range the disk radii are drawn from, in pixels.
    pub disk_radius: (f64, f64),
    pub background: u8,
    pub tissue: u8,
    pub target: u8,
    /// Per-channel uniform noise amplitude.
    pub noise: u8,
    /// Number of discs whose union forms the tissue.
    pub tissue_blobs: usize,
    pub seed: u64,
}

impl Default for SynthSlideSpec {
    fn default() -> Self {
        Self {
            width: 4096,
            height: 4096,
            disk_count: 24,
            disk_radius: (64.0, 112.0),
            background: 245,
            tissue: 140,
            target: 90,
            noise: 6,
            tissue_blobs: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Circle {
    /// Pixels whose centres lie inside the circle on row `y`, as `x0..x1`.
    pub fn row_span(&self, y: usize, width: usize) -> Option<(usize, usize)> {
        let dy = y as f64 + 0.5 - self.cy;
        let h = self.r * self.r - dy * dy;
        if h < 0.0 {
            return None;
        }
        let s = h.sqrt();
        let x0 = (self.cx - s - 0.5).ceil().max(0.0);
        let x1 = (self.cx + s - 0.5).floor() + 1.0;
        let x1 = x1.min(width as f64);
        (x1 > x0).then_some((x0 as usize, x1 as usize))
    }

    pub fn contains_pixel(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        dx * dx + dy * dy <= self.r * self.r
    }
}

/// Geometry of a slide, before rasterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthLayout {
    pub tissue: Vec<Circle>,
    pub disks: Vec<Circle>,
}

impl SynthSlideSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 512 || self.height < 512 {
            return Err(Error::Config(format!(
                "synthetic slides need at least 512x512 pixels, got {}x{}",
                self.width, self.height
            )));
        }
        let (lo, hi) = self.disk_radius;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!("bad disk radius range {lo}..{hi}")));
        }
        if self.tissue_blobs == 0 {
            return Err(Error::Config("at least one tissue blob is required".into()));
        }
        Ok(())
    }

    /// Seeded placement of tissue blobs and target disks.
    pub fn layout(&self) -> Result<SynthLayout> {
        self.validate()?;
        let mut r = rng::keyed(self.seed, rng::domain::SYNTH, 0);
        let (w, h) = (self.width as f64, self.height as f64);
        let side = w.min(h);
        let tissue: Vec<Circle> = (0..self.tissue_blobs)
            .map(|_| {
                let rad = r.random_range(0.22..0.34) * side;
                Circle {
                    cx: r.random_range(rad * 0.6..(w - rad * 0.6).max(rad * 0.6 + 1.0)),
                    cy: r.random_range(rad * 0.6..(h - rad * 0.6).max(rad * 0.6 + 1.0)),
                    r: rad,
                }
            })
            .collect();
        let mut disks: Vec<Circle> = Vec::with_capacity(self.disk_count);
        for n in 0..self.disk_count {
            let mut placed = false;
            for _ in 0..MAX_PLACEMENT_ATTEMPTS {
                let rad = if self.disk_radius.1 > self.disk_radius.0 {
                    r.random_range(self.disk_radius.0..=self.disk_radius.1)
                } else {
                    self.disk_radius.0
                };
                let host = tissue[r.random_range(0..tissue.len())];
                let reach = host.r - rad - 1.0;
                if reach <= 0.0 {
                    continue;
                }
                let ang = r.random_range(0.0..std::f64::consts::TAU);
                let dist = reach * r.random::<f64>().sqrt();
                let c = Circle {
                    cx: host.cx + dist * ang.cos(),
                    cy: host.cy + dist * ang.sin(),
                    r: rad,
                };
                let inside_image = c.cx - rad >= 1.0 && c.cy - rad >= 1.0 && c.cx + rad <= w - 1.0 && c.cy + rad <= h - 1.0;
                // Two extra pixels of clearance keep rasterized disks disjoint.
                let clear = disks.iter().all(|o| {
                    let (dx, dy) = (o.cx - c.cx, o.cy - c.cy);
                    (dx * dx + dy * dy).sqrt() > o.r + c.r + 2.0
                });
                if inside_image && clear {
                    disks.push(c);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::Generation(format!(
                    "could not place disk {} of {} after {MAX_PLACEMENT_ATTEMPTS} attempts",
                    n + 1,
                    self.disk_count
                )));
            }
        }
        Ok(SynthLayout { tissue, disks })
    }
}

/// Renders the slide raster and its exact ground-truth mask in memory.
pub fn render_synth(spec: &SynthSlideSpec) -> Result<(RgbImage, WsiMask)> {
    let layout = spec.layout()?;
    let (w, h) = (spec.width, spec.height);
    let mut img = RgbImage::new(w, h);
    let mut truth = BitGrid::new(w, h);
    let noise = spec.noise as i16;
    img.as_bytes_mut().par_chunks_mut(3 * w).enumerate().for_each(|(y, row)| {
        let mut lum = vec![spec.background; w];
        for c in &layout.tissue {
            if let Some((x0, x1)) = c.row_span(y, w) {
                lum[x0..x1].fill(spec.tissue);
            }
        }
        for c in &layout.disks {
            if let Some((x0, x1)) = c.row_span(y, w) {
                lum[x0..x1].fill(spec.target);
            }
        }
        let mut r = rng::keyed(spec.seed, rng::domain::SYNTH, y as u64 + 1);
        for (px, &l) in row.iter_mut().zip(lum.iter().flat_map(|l| [l, l, l])) {
            let n = if noise > 0 { r.random_range(-noise..=noise) } else { 0 };
            *px = (l as i16 + n).clamp(0, 255) as u8;
        }
    });
    for y in 0..h {
        for c in &layout.disks {
            if let Some((x0, x1)) = c.row_span(y, w) {
                truth.fill_row_span(y, x0, x1, true);
            }
        }
    }
    Ok((img, WsiMask::new(0, truth)))
}

/// Renders the slide, imports it as a pyramid at `path` and returns it with
/// its level-0 ground truth.
pub fn generate_synth(spec: &SynthSlideSpec, tile_size: usize, path: impl AsRef<Path>) -> Result<(PyramidImage, WsiMask)> {
    let (img, truth) = render_synth(spec)?;
    let pyramid = import_image(&img, tile_size, path)?;
    Ok((pyramid, truth))
}
