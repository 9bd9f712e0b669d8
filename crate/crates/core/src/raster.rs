//! In-memory RGB8 rasters and the two ingestion formats (binary PPM, PNG).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved, row-major RGB8 raster.
#[derive(Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for RgbImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RgbImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{}x{} RGB raster needs {} bytes, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn as_bytes_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn row(&self, y: usize) -> &[u8] {
        &self.data[y * self.width * 3..(y + 1) * self.width * 3]
    }

    pub fn row_mut(&mut self, y: usize) -> &mut [u8] {
        let w = self.width * 3;
        &mut self.data[y * w..(y + 1) * w]
    }

    /// Copies the `width`×`height` window whose top-left corner is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<Self> {
        if x + width > self.width || y + height > self.height {
            return Err(Error::Bounds(format!(
                "crop {}x{}+{}+{} exceeds {}x{}",
                width, height, x, y, self.width, self.height
            )));
        }
        let mut out = Self::new(width, height);
        for row in 0..height {
            let src = ((y + row) * self.width + x) * 3;
            out.row_mut(row)
                .copy_from_slice(&self.data[src..src + width * 3]);
        }
        Ok(out)
    }

    /// Rounded ITU-R 601 luma of one pixel.
    #[inline]
    pub fn luma(rgb: [u8; 3]) -> u8 {
        // Integer form of round(0.299 R + 0.587 G + 0.114 B).
        let v = 299 * rgb[0] as u32 + 587 * rgb[1] as u32 + 114 * rgb[2] as u32;
        ((v + 500) / 1000) as u8
    }

    /// Reads a binary PPM (P6, maxval 255) or a non-interlaced 8-bit PNG,
    /// chosen by file extension.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("ppm") => Self::load_ppm(path),
            Some("png") => Self::load_png(path),
            _ => Err(Error::InvalidInput(format!(
                "{}: expected a .ppm or .png file",
                path.display()
            ))),
        }
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::decode_ppm(&bytes)
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = [0usize; 3];
        let magic = next_token(bytes, &mut pos)?;
        if magic != b"P6" {
            return Err(Error::Format("PPM magic must be P6".into()));
        }
        for field in &mut fields {
            let tok = next_token(bytes, &mut pos)?;
            *field = std::str::from_utf8(tok)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format("malformed PPM header".into()))?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(Error::Format(format!("PPM maxval {maxval} unsupported")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let need = width * height * 3;
        if bytes.len() < pos + need {
            return Err(Error::Format("truncated PPM raster".into()));
        }
        Self::from_raw(width, height, bytes[pos..pos + need].to_vec())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if reader.info().interlaced {
            return Err(Error::Format(format!(
                "{}: interlaced PNG is not supported",
                path.display()
            )));
        }
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Format("PNG too large".into()))?;
        let mut buf = vec![0; size];
        let frame = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let (w, h) = (frame.width as usize, frame.height as usize);
        let buf = &buf[..frame.buffer_size()];
        let data = match frame.color_type {
            png::ColorType::Rgb => buf.to_vec(),
            png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => {
                buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect()
            }
            png::ColorType::Indexed => {
                return Err(Error::Format("indexed PNG not expanded".into()));
            }
        };
        Self::from_raw(w, h, data)
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let write = || -> std::io::Result<()> {
            let mut w = BufWriter::new(File::create(path)?);
            write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
            w.write_all(&self.data)?;
            w.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated PPM header".into()));
    }
    Ok(&bytes[start..*pos])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luma_matches_weights() {
        assert_eq!(RgbImage::luma([255, 255, 255]), 255);
        assert_eq!(RgbImage::luma([0, 0, 0]), 0);
        // 0.299*100 + 0.587*50 + 0.114*200 = 82.05
        assert_eq!(RgbImage::luma([100, 50, 200]), 82);
    }

    #[test]
    fn ppm_round_trip_with_comment() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::new(3, 2);
        img.put_pixel(2, 1, [9, 8, 7]);
        let p = dir.path().join("a.ppm");
        img.save_ppm(&p).unwrap();
        assert_eq!(RgbImage::load(&p).unwrap(), img);

        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        assert_eq!(RgbImage::decode_ppm(&bytes).unwrap().pixel(0, 0), [1, 2, 3]);
    }

    #[test]
    fn png_is_decoded() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        {
            let f = File::create(&p).unwrap();
            let mut enc = png::Encoder::new(BufWriter::new(f), 2, 1);
            enc.set_color(png::ColorType::Rgba);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[1, 2, 3, 255, 4, 5, 6, 0]).unwrap();
        }
        let img = RgbImage::load(&p).unwrap();
        assert_eq!(img.as_bytes(), &[1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn crop_out_of_bounds_rejected() {
        let img = RgbImage::new(4, 4);
        assert!(matches!(img.crop(2, 2, 3, 1), Err(Error::Bounds(_))));
    }
}
