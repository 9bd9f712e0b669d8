//! Chunked multi-resolution image store (`.hhpy`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "HHPY" | version u16 = 1 | tile_size u32 | channels u8 = 3 | level_count u8
//! per level: width u64 | height u64 | tiles_y * tiles_x tile offsets (u64, row-major)
//! tile payloads: raw RGB8, row-major, clipped at right/bottom edges
//! ```
//!
//! Offsets are absolute file positions. Edge tiles are stored at their
//! clipped size, so the payload of a level is exactly `width * height * 3`
//! bytes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::raster::RgbImage;

pub const MAGIC: &[u8; 4] = b"HHPY";
pub const VERSION: u16 = 1;
const CHANNELS: u8 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelInfo {
    pub width: usize,
    pub height: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub tile_offsets: Vec<u64>,
}

/// Axis-aligned pixel window at one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Region {
    pub level: usize,
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Region {
    pub fn new(level: usize, x: usize, y: usize, width: usize, height: usize) -> Self {
        Self {
            level,
            x,
            y,
            width,
            height,
        }
    }
}

/// Read handle on an imported pyramid. Reads go through positioned I/O, so a
/// shared reference can serve any number of threads.
#[derive(Debug)]
pub struct PyramidImage {
    tile_size: usize,
    levels: Vec<LevelInfo>,
    path: PathBuf,
    file: File,
    file_len: u64,
}

/// Dimensions of every level for a level-0 size, stopping once the longer
/// side fits in one tile.
pub fn level_dimensions(width: usize, height: usize, tile_size: usize) -> Vec<(usize, usize)> {
    let mut dims = vec![(width, height)];
    let (mut w, mut h) = (width, height);
    while w.max(h) > tile_size {
        w = w.div_ceil(2);
        h = h.div_ceil(2);
        dims.push((w, h));
    }
    dims
}

/// 2×2 box filter with round-half-up. Blocks clipped by an odd edge average
/// only the pixels they contain.
pub fn downsample(src: &RgbImage) -> RgbImage {
    let (w, h) = (src.width().div_ceil(2), src.height().div_ceil(2));
    let mut out = RgbImage::new(w, h);
    let sw = src.width();
    let bytes = src.as_bytes();
    for oy in 0..h {
        let y0 = 2 * oy;
        let y1 = (y0 + 2).min(src.height());
        let dst = out.row_mut(oy);
        for ox in 0..w {
            let x0 = 2 * ox;
            let x1 = (x0 + 2).min(sw);
            let n = ((y1 - y0) * (x1 - x0)) as u32;
            let mut acc = [0u32; 3];
            for y in y0..y1 {
                for x in x0..x1 {
                    let i = (y * sw + x) * 3;
                    acc[0] += bytes[i] as u32;
                    acc[1] += bytes[i + 1] as u32;
                    acc[2] += bytes[i + 2] as u32;
                }
            }
            for c in 0..3 {
                dst[ox * 3 + c] = ((acc[c] + n / 2) / n) as u8;
            }
        }
    }
    out
}

/// Builds every level from `source` and writes the pyramid to `path`.
pub fn import_image(source: &RgbImage, tile_size: usize, path: impl AsRef<Path>) -> Result<PyramidImage> {
    let path = path.as_ref();
    if source.width() == 0 || source.height() == 0 {
        return Err(Error::InvalidInput("source raster is empty".into()));
    }
    if !tile_size.is_power_of_two() || !(64..=4096).contains(&tile_size) {
        return Err(Error::InvalidInput(format!(
            "tile size {tile_size} must be a power of two in [64, 4096]"
        )));
    }
    let dims = level_dimensions(source.width(), source.height(), tile_size);
    if dims.len() > u8::MAX as usize {
        return Err(Error::InvalidInput("too many pyramid levels".into()));
    }

    // Offsets are fully determined by geometry, so the header is written
    // first and tiles stream after it.
    let mut header_len = 4 + 2 + 4 + 1 + 1;
    for &(w, h) in &dims {
        header_len += 16 + 8 * w.div_ceil(tile_size) * h.div_ceil(tile_size);
    }
    let mut levels = Vec::with_capacity(dims.len());
    let mut cursor = header_len as u64;
    for &(w, h) in &dims {
        let (tx, ty) = (w.div_ceil(tile_size), h.div_ceil(tile_size));
        let mut offsets = Vec::with_capacity(tx * ty);
        for j in 0..ty {
            for i in 0..tx {
                offsets.push(cursor);
                let tw = tile_size.min(w - i * tile_size);
                let th = tile_size.min(h - j * tile_size);
                cursor += (tw * th * 3) as u64;
            }
        }
        levels.push(LevelInfo {
            width: w,
            height: h,
            tiles_x: tx,
            tiles_y: ty,
            tile_offsets: offsets,
        });
    }

    let write = || -> std::io::Result<()> {
        let mut out = BufWriter::with_capacity(1 << 20, File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(tile_size as u32).to_le_bytes())?;
        out.write_all(&[CHANNELS, levels.len() as u8])?;
        for level in &levels {
            out.write_all(&(level.width as u64).to_le_bytes())?;
            out.write_all(&(level.height as u64).to_le_bytes())?;
            for off in &level.tile_offsets {
                out.write_all(&off.to_le_bytes())?;
            }
        }
        write_level_tiles(&mut out, source, tile_size)?;
        let mut current: Option<RgbImage> = None;
        for _ in 1..levels.len() {
            let next = downsample(current.as_ref().unwrap_or(source));
            write_level_tiles(&mut out, &next, tile_size)?;
            current = Some(next);
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))?;
    PyramidImage::open(path)
}

fn write_level_tiles(out: &mut impl Write, img: &RgbImage, tile_size: usize) -> std::io::Result<()> {
    let (w, h) = (img.width(), img.height());
    for ty in 0..h.div_ceil(tile_size) {
        for tx in 0..w.div_ceil(tile_size) {
            let x0 = tx * tile_size;
            let tw = tile_size.min(w - x0);
            let y0 = ty * tile_size;
            let th = tile_size.min(h - y0);
            for y in y0..y0 + th {
                out.write_all(&img.row(y)[x0 * 3..(x0 + tw) * 3])?;
            }
        }
    }
    Ok(())
}

impl PyramidImage {
    /// Opens and validates an `.hhpy` file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        let read = |off: u64, len: usize| -> Result<Vec<u8>> {
            if off + len as u64 > file_len {
                return Err(Error::Format(format!("{}: truncated header", path.display())));
            }
            let mut buf = vec![0; len];
            file.read_exact_at(&mut buf, off).map_err(|e| Error::io(path, e))?;
            Ok(buf)
        };

        let fixed = read(0, 12)?;
        if &fixed[0..4] != MAGIC {
            return Err(Error::Format(format!("{}: bad magic", path.display())));
        }
        let version = u16::from_le_bytes([fixed[4], fixed[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported HHPY version {version}")));
        }
        let tile_size = u32::from_le_bytes(fixed[6..10].try_into().unwrap()) as usize;
        if fixed[10] != CHANNELS {
            return Err(Error::Format(format!("{} channels unsupported", fixed[10])));
        }
        let level_count = fixed[11] as usize;
        if level_count == 0 || tile_size == 0 {
            return Err(Error::Format("empty pyramid header".into()));
        }

        let mut pos = 12u64;
        let mut levels = Vec::with_capacity(level_count);
        for _ in 0..level_count {
            let dims = read(pos, 16)?;
            pos += 16;
            let width = u64::from_le_bytes(dims[0..8].try_into().unwrap()) as usize;
            let height = u64::from_le_bytes(dims[8..16].try_into().unwrap()) as usize;
            let (tx, ty) = (width.div_ceil(tile_size), height.div_ceil(tile_size));
            let table = read(pos, tx * ty * 8)?;
            pos += (tx * ty * 8) as u64;
            let tile_offsets = table
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            levels.push(LevelInfo {
                width,
                height,
                tiles_x: tx,
                tiles_y: ty,
                tile_offsets,
            });
        }

        let img = Self {
            tile_size,
            levels,
            path: path.to_path_buf(),
            file,
            file_len,
        };
        img.validate_offsets(pos)?;
        Ok(img)
    }

    fn validate_offsets(&self, header_end: u64) -> Result<()> {
        let mut prev_end = header_end;
        for (l, level) in self.levels.iter().enumerate() {
            for (t, &off) in level.tile_offsets.iter().enumerate() {
                if off < prev_end {
                    return Err(Error::Format(format!(
                        "level {l} tile {t}: offset {off} overlaps preceding data"
                    )));
                }
                prev_end = off.saturating_add(self.tile_bytes(l, t) as u64);
            }
        }
        if prev_end > self.file_len {
            return Err(Error::Format("tile payload extends past end of file".into()));
        }
        Ok(())
    }

    fn tile_dims(&self, level: usize, tx: usize, ty: usize) -> (usize, usize) {
        let info = &self.levels[level];
        (
            self.tile_size.min(info.width - tx * self.tile_size),
            self.tile_size.min(info.height - ty * self.tile_size),
        )
    }

    fn tile_bytes(&self, level: usize, index: usize) -> usize {
        let info = &self.levels[level];
        let (w, h) = self.tile_dims(level, index % info.tiles_x, index / info.tiles_x);
        w * h * 3
    }

    pub fn tile_size(&self) -> usize {
        self.tile_size
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[LevelInfo] {
        &self.levels
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn level_dims(&self, level: usize) -> Result<(usize, usize)> {
        self.levels
            .get(level)
            .map(|l| (l.width, l.height))
            .ok_or_else(|| Error::Bounds(format!("level {level} of {}", self.levels.len())))
    }

    pub fn check_region(&self, r: &Region) -> Result<()> {
        let (w, h) = self.level_dims(r.level)?;
        if r.width == 0 || r.height == 0 {
            return Err(Error::Bounds(format!("degenerate region {r:?}")));
        }
        if r.x + r.width > w || r.y + r.height > h {
            return Err(Error::Bounds(format!(
                "region {r:?} exceeds level {} extent {w}x{h}",
                r.level
            )));
        }
        Ok(())
    }

    /// Returns the stored pixels under `r`, stitched across tile borders.
    pub fn read_region(&self, r: &Region) -> Result<RgbImage> {
        self.check_region(r)?;
        let ts = self.tile_size;
        let info = &self.levels[r.level];
        let mut out = RgbImage::new(r.width, r.height);
        let mut buf = Vec::new();
        for ty in r.y / ts..=(r.y + r.height - 1) / ts {
            for tx in r.x / ts..=(r.x + r.width - 1) / ts {
                let (tw, _) = self.tile_dims(r.level, tx, ty);
                let (ox, oy) = (tx * ts, ty * ts);
                // Overlap of the region with this tile, in tile coordinates.
                let x0 = r.x.max(ox) - ox;
                let x1 = (r.x + r.width).min(ox + tw) - ox;
                let y0 = r.y.max(oy) - oy;
                let y1 = (r.y + r.height).min(oy + ts).min(info.height) - oy;
                let offset = info.tile_offsets[ty * info.tiles_x + tx] + (y0 * tw * 3) as u64;
                let len = (y1 - y0) * tw * 3;
                if offset + len as u64 > self.file_len {
                    return Err(Error::Format(format!(
                        "level {} tile ({tx},{ty}) points past end of file",
                        r.level
                    )));
                }
                buf.resize(len, 0);
                self.file
                    .read_exact_at(&mut buf, offset)
                    .map_err(|e| Error::io(&self.path, e))?;
                for row in y0..y1 {
                    let src = &buf[((row - y0) * tw + x0) * 3..((row - y0) * tw + x1) * 3];
                    let dst_y = oy + row - r.y;
                    let dst_x = ox + x0 - r.x;
                    out.row_mut(dst_y)[dst_x * 3..(dst_x + x1 - x0) * 3].copy_from_slice(src);
                }
            }
        }
        Ok(out)
    }

    pub fn read_level(&self, level: usize) -> Result<RgbImage> {
        let (w, h) = self.level_dims(level)?;
        self.read_region(&Region::new(level, 0, 0, w, h))
    }
}
