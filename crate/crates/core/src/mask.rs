//! Bit-packed boolean grids and their run-length file encoding.
//!
//! Masks persist as
//!
//! ```text
//! magic [4] | level u32 | width u64 | height u64 | runs u32...
//! ```
//!
//! with runs alternating background / foreground in row-major order and
//! always starting with a (possibly empty) background run. A run longer than
//! `u32::MAX` is split by an empty run of the opposite value. Foreground
//! masks use the magic `HHFG`, segmentation masks `HHSM`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const FOREGROUND_MAGIC: &[u8; 4] = b"HHFG";
pub const SEGMENTATION_MAGIC: &[u8; 4] = b"HHSM";

/// Row-major bit grid; each row starts on a fresh `u64` word.
#[derive(Clone, PartialEq, Eq)]
pub struct BitGrid {
    width: usize,
    height: usize,
    stride: usize,
    words: Vec<u64>,
}

impl std::fmt::Debug for BitGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BitGrid")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("ones", &self.count_ones())
            .finish()
    }
}

impl BitGrid {
    pub fn new(width: usize, height: usize) -> Self {
        let stride = width.div_ceil(64);
        Self {
            width,
            height,
            stride,
            words: vec![0; stride * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut g = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    g.set(x, y, true);
                }
            }
        }
        g
    }

    pub fn from_bools(width: usize, height: usize, bits: &[bool]) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Shape(format!(
                "{} bits for a {width}x{height} grid",
                bits.len()
            )));
        }
        Ok(Self::from_fn(width, height, |x, y| bits[y * width + x]))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        (self.words[y * self.stride + x / 64] >> (x % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        let w = &mut self.words[y * self.stride + x / 64];
        let bit = 1u64 << (x % 64);
        if v {
            *w |= bit;
        } else {
            *w &= !bit;
        }
    }

    /// Sets `[x0, x1)` on row `y`.
    pub fn fill_row_span(&mut self, y: usize, x0: usize, x1: usize, v: bool) {
        let row = &mut self.words[y * self.stride..(y + 1) * self.stride];
        let mut x = x0;
        while x < x1 {
            let word = x / 64;
            let lo = x % 64;
            let hi = (x1 - word * 64).min(64);
            let mask = if hi - lo == 64 {
                u64::MAX
            } else {
                ((1u64 << (hi - lo)) - 1) << lo
            };
            if v {
                row[word] |= mask;
            } else {
                row[word] &= !mask;
            }
            x = word * 64 + hi;
        }
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    /// Number of set bits in `[x0, x1)` of row `y`.
    pub fn count_row_span(&self, y: usize, x0: usize, x1: usize) -> u64 {
        if x0 >= x1 {
            return 0;
        }
        let row = &self.words[y * self.stride..(y + 1) * self.stride];
        let (w0, w1) = (x0 / 64, (x1 - 1) / 64);
        let lo_mask = u64::MAX << (x0 % 64);
        let hi_bits = x1 - w1 * 64;
        let hi_mask = if hi_bits == 64 {
            u64::MAX
        } else {
            (1u64 << hi_bits) - 1
        };
        if w0 == w1 {
            return (row[w0] & lo_mask & hi_mask).count_ones() as u64;
        }
        let mut n = (row[w0] & lo_mask).count_ones() as u64 + (row[w1] & hi_mask).count_ones() as u64;
        for w in &row[w0 + 1..w1] {
            n += w.count_ones() as u64;
        }
        n
    }

    /// Number of set bits in the rectangle `[x, x+w) × [y, y+h)`.
    pub fn count_rect(&self, x: usize, y: usize, w: usize, h: usize) -> u64 {
        (y..y + h).map(|row| self.count_row_span(row, x, x + w)).sum()
    }

    pub fn and_count(&self, other: &BitGrid) -> u64 {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as u64)
            .sum()
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<BitGrid> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::Bounds(format!(
                "crop {w}x{h}+{x}+{y} exceeds {}x{}",
                self.width, self.height
            )));
        }
        Ok(BitGrid::from_fn(w, h, |cx, cy| self.get(x + cx, y + cy)))
    }

    /// Nearest-neighbour resampling by `2^levels`: output pixel `(x, y)`
    /// takes the source pixel at `(x << levels, y << levels)`.
    pub fn downsample_nearest(&self, levels: usize) -> BitGrid {
        if levels == 0 {
            return self.clone();
        }
        let mut w = self.width;
        let mut h = self.height;
        for _ in 0..levels {
            w = w.div_ceil(2);
            h = h.div_ceil(2);
        }
        BitGrid::from_fn(w, h, |x, y| self.get(x << levels, y << levels))
    }

    pub fn to_bools(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(self.get(x, y));
            }
        }
        out
    }

    /// First column `>= from` on row `y` whose bit differs from `value`,
    /// or `width` if the row holds `value` to its end.
    fn next_change(&self, y: usize, from: usize, value: bool) -> usize {
        let row = &self.words[y * self.stride..(y + 1) * self.stride];
        let mut word = from / 64;
        if word >= self.stride {
            return self.width;
        }
        let flip = if value { !0u64 } else { 0 };
        let mut bits = (row[word] ^ flip) & (u64::MAX << (from % 64));
        loop {
            if bits != 0 {
                let x = word * 64 + bits.trailing_zeros() as usize;
                return x.min(self.width);
            }
            word += 1;
            if word >= self.stride {
                return self.width;
            }
            bits = row[word] ^ flip;
        }
    }

    /// Row-major run lengths, alternating background / foreground and
    /// starting with background.
    pub fn runs(&self) -> RunIter<'_> {
        RunIter {
            grid: self,
            y: 0,
            x: 0,
            value: false,
        }
    }

    /// Rebuilds a grid from alternating run lengths.
    pub fn from_runs(width: usize, height: usize, runs: impl IntoIterator<Item = u64>) -> Result<Self> {
        let mut g = BitGrid::new(width, height);
        let total = (width * height) as u64;
        let mut pos = 0u64;
        let mut value = false;
        for run in runs {
            if pos + run > total {
                return Err(Error::Format("runs exceed grid size".into()));
            }
            if value {
                let mut p = pos;
                let end = pos + run;
                while p < end {
                    let y = (p / width as u64) as usize;
                    let x = (p % width as u64) as usize;
                    let x1 = ((end - y as u64 * width as u64) as usize).min(width);
                    g.fill_row_span(y, x, x1, true);
                    p = y as u64 * width as u64 + x1 as u64;
                }
            }
            pos += run;
            value = !value;
        }
        if pos != total {
            return Err(Error::Format(format!("runs cover {pos} of {total} pixels")));
        }
        Ok(g)
    }
}

/// Iterator over maximal runs of a [`BitGrid`], see [`BitGrid::runs`].
pub struct RunIter<'a> {
    grid: &'a BitGrid,
    y: usize,
    x: usize,
    value: bool,
}

impl Iterator for RunIter<'_> {
    type Item = u64;

    fn next(&mut self) -> Option<u64> {
        let g = self.grid;
        if self.y >= g.height {
            return None;
        }
        let mut len = 0u64;
        while self.y < g.height {
            let end = g.next_change(self.y, self.x, self.value);
            len += (end - self.x) as u64;
            if end < g.width {
                self.x = end;
                break;
            }
            self.x = 0;
            self.y += 1;
        }
        self.value = !self.value;
        Some(len)
    }
}

/// Reads the fixed header of a run-length mask file.
pub(crate) struct RleHeader {
    pub level: usize,
    pub width: usize,
    pub height: usize,
}

pub(crate) fn write_rle(path: &Path, magic: &[u8; 4], level: usize, grid: &BitGrid) -> Result<()> {
    let write = || -> std::io::Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        encode_rle(&mut out, magic, level, grid)?;
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

pub(crate) fn encode_rle(out: &mut impl Write, magic: &[u8; 4], level: usize, grid: &BitGrid) -> std::io::Result<()> {
    out.write_all(magic)?;
    out.write_all(&(level as u32).to_le_bytes())?;
    out.write_all(&(grid.width as u64).to_le_bytes())?;
    out.write_all(&(grid.height as u64).to_le_bytes())?;
    for run in grid.runs() {
        let mut rest = run;
        while rest > u32::MAX as u64 {
            out.write_all(&u32::MAX.to_le_bytes())?;
            out.write_all(&0u32.to_le_bytes())?;
            rest -= u32::MAX as u64;
        }
        out.write_all(&(rest as u32).to_le_bytes())?;
    }
    Ok(())
}

/// Streaming reader over the runs of a mask file. Split runs (a run followed
/// by an empty run) are merged back, so consumers see maximal runs.
pub struct RleReader<R: Read> {
    inner: R,
    pending: Option<u64>,
    pub(crate) header: RleHeader,
}

impl RleReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>, magic: &[u8; 4]) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::new(BufReader::new(file), magic).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

impl<R: Read> RleReader<R> {
    pub fn new(mut inner: R, magic: &[u8; 4]) -> Result<Self> {
        let mut head = [0u8; 24];
        inner
            .read_exact(&mut head)
            .map_err(|_| Error::Format("truncated mask header".into()))?;
        if &head[0..4] != magic {
            return Err(Error::Format(format!(
                "expected magic {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let header = RleHeader {
            level: u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize,
            width: u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize,
            height: u64::from_le_bytes(head[16..24].try_into().unwrap()) as usize,
        };
        Ok(Self {
            inner,
            pending: None,
            header,
        })
    }

    pub fn level(&self) -> usize {
        self.header.level
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.header.width, self.header.height)
    }

    fn raw(&mut self) -> Result<Option<u64>> {
        let mut b = [0u8; 4];
        match self.inner.read(&mut b[..1]) {
            Ok(0) => return Ok(None),
            Ok(_) => {}
            Err(e) => return Err(Error::Format(format!("mask read failed: {e}"))),
        }
        self.inner
            .read_exact(&mut b[1..])
            .map_err(|_| Error::Format("truncated run".into()))?;
        Ok(Some(u32::from_le_bytes(b) as u64))
    }

    /// Next maximal run, or `None` at end of file.
    pub fn next_run(&mut self) -> Result<Option<u64>> {
        let mut run = match self.pending.take() {
            Some(r) => r,
            None => match self.raw()? {
                Some(r) => r,
                None => return Ok(None),
            },
        };
        // An empty run followed by more data continues the current run.
        loop {
            match self.raw()? {
                Some(0) => match self.raw()? {
                    Some(more) => run += more,
                    None => return Ok(Some(run)),
                },
                Some(next) => {
                    self.pending = Some(next);
                    return Ok(Some(run));
                }
                None => return Ok(Some(run)),
            }
        }
    }

    pub fn into_grid(mut self) -> Result<BitGrid> {
        let (w, h) = self.dims();
        let mut runs = Vec::new();
        while let Some(r) = self.next_run()? {
            runs.push(r);
        }
        BitGrid::from_runs(w, h, runs)
    }
}

/// Full-resolution binary segmentation of one pyramid level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WsiMask {
    pub level: usize,
    pub bits: BitGrid,
}

impl WsiMask {
    pub fn new(level: usize, bits: BitGrid) -> Self {
        Self { level, bits }
    }

    pub fn empty(level: usize, width: usize, height: usize) -> Self {
        Self::new(level, BitGrid::new(width, height))
    }

    pub fn width(&self) -> usize {
        self.bits.width()
    }

    pub fn height(&self) -> usize {
        self.bits.height()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rle(path.as_ref(), SEGMENTATION_MAGIC, self.level, &self.bits)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let reader = RleReader::open(path, SEGMENTATION_MAGIC)?;
        let level = reader.level();
        Ok(Self::new(level, reader.into_grid()?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        encode_rle(&mut out, SEGMENTATION_MAGIC, self.level, &self.bits).expect("in-memory write");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let reader = RleReader::new(bytes, SEGMENTATION_MAGIC)?;
        let level = reader.level();
        Ok(Self::new(level, reader.into_grid()?))
    }

    /// This mask resampled to a coarser pyramid level.
    pub fn at_level(&self, level: usize) -> Result<WsiMask> {
        if level < self.level {
            return Err(Error::Bounds(format!(
                "cannot upsample a level {} mask to level {level}",
                self.level
            )));
        }
        Ok(WsiMask::new(level, self.bits.downsample_nearest(level - self.level)))
    }
}
