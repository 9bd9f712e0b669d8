//! Patch tokenization: a linear patchify encoder, nearest-code quantization
//! against a learned codebook, and a per-token linear decoder used to train
//! the tokenizer by reconstruction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, matmul, matmul_acc, Linear, ParamTree, Tensor};
use crate::raster::RgbImage;

pub const DEFAULT_BETA: f64 = 0.25;

const ENCODER_INIT_GAIN: f64 = 4.0;

/// Row-major `height × width × 3` image with channels scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Patch {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            data: img.as_bytes().iter().map(|&v| v as f64 / 255.0).collect(),
        }
    }

    pub fn to_rgb(&self) -> RgbImage {
        let data = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        RgbImage::from_raw(self.width, self.height, data).expect("consistent dims")
    }
}

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Token grid size for an image after reflect-padding to multiples of `f`.
pub fn grid_dims(width: usize, height: usize, f: usize) -> (usize, usize) {
    (height.div_ceil(f), width.div_ceil(f))
}

/// Gathers the `f×f×3` blocks of one token row (`cols` blocks) into a
/// `cols × 3f²` matrix; pixels past the image edge are reflected.
fn token_row_blocks(x: &Patch, f: usize, row: usize, cols: usize, out: &mut Vec<f64>) {
    out.clear();
    for c in 0..cols {
        for py in 0..f {
            let y = reflect(row * f + py, x.height);
            for px in 0..f {
                let xx = reflect(c * f + px, x.width);
                let i = (y * x.width + xx) * 3;
                out.extend_from_slice(&x.data[i..i + 3]);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEncoder {
    pub patch: usize,
    pub proj: Linear,
}

impl PatchEncoder {
    /// Random projection with its bias set so a mid-gray block encodes to
    /// the origin, where the codebook is initialised. The scale spreads
    /// typical blocks (mean deviation from gray about 1/4) across the
    /// codebook's `±1/√d` box; a smaller one maps most blocks to a handful
    /// of codes.
    pub fn new(patch: usize, code_dim: usize, rng: &mut impl Rng) -> Self {
        let fan_in = 3 * patch * patch;
        let std = ENCODER_INIT_GAIN / ((fan_in * code_dim) as f64).sqrt();
        let mut proj = Linear::new(fan_in, code_dim, std, rng);
        for j in 0..code_dim {
            let col: f64 = (0..fan_in).map(|i| proj.weight.data[i * code_dim + j]).sum();
            proj.bias.data[j] = -0.5 * col;
        }
        Self { patch, proj }
    }

    pub fn code_dim(&self) -> usize {
        self.proj.output_dim()
    }

    fn check(&self) -> Result<()> {
        if !self.proj.weight.is_finite() || !self.proj.bias.is_finite() {
            return Err(Error::Numerical("encoder weights are not finite".into()));
        }
        if self.proj.input_dim() != 3 * self.patch * self.patch {
            return Err(Error::Shape("encoder input width must be 3·f²".into()));
        }
        Ok(())
    }

    /// Latent grid of `x`: one `code_dim` vector per `f×f` block.
    pub fn encode(&self, x: &Patch) -> Result<LatentGrid> {
        self.check()?;
        let f = self.patch;
        if x.width < f || x.height < f {
            return Err(Error::Shape(format!(
                "{}x{} input smaller than patch factor {f}",
                x.width, x.height
            )));
        }
        let (rows, cols) = grid_dims(x.width, x.height, f);
        let d = self.code_dim();
        let mut values = Vec::with_capacity(rows * cols * d);
        let mut blocks = Vec::new();
        for r in 0..rows {
            token_row_blocks(x, f, r, cols, &mut blocks);
            values.extend(self.proj.forward(&blocks, cols));
        }
        Ok(LatentGrid {
            rows,
            cols,
            depth: d,
            values,
        })
    }

    /// Accumulates encoder weight gradients for an upstream latent gradient.
    pub fn backward(&self, x: &Patch, dlatent: &LatentGrid, grad: &mut PatchEncoder) {
        let f = self.patch;
        let d = self.code_dim();
        let cols = dlatent.cols;
        let mut blocks = Vec::new();
        for r in 0..dlatent.rows {
            token_row_blocks(x, f, r, cols, &mut blocks);
            let dy = &dlatent.values[r * cols * d..(r + 1) * cols * d];
            self.proj.accumulate_param_grads(&blocks, dy, cols, &mut grad.proj);
        }
    }
}

impl ParamTree for PatchEncoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.proj.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.proj.visit_mut(prefix, f);
    }
}

/// Continuous encoder output, `rows × cols × depth`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub rows: usize,
    pub cols: usize,
    pub depth: usize,
    pub values: Vec<f64>,
}

impl LatentGrid {
    pub fn zeros(rows: usize, cols: usize, depth: usize) -> Self {
        Self {
            rows,
            cols,
            depth,
            values: vec![0.0; rows * cols * depth],
        }
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let o = (i * self.cols + j) * self.depth;
        &self.values[o..o + self.depth]
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    /// `K × d` entries.
    pub entries: Tensor,
}

impl Codebook {
    /// Entries drawn from `U(-1/√d, 1/√d)`.
    pub fn new(size: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if size < 2 || dim == 0 {
            return Err(Error::InvalidCodebook(format!("{size} entries of dimension {dim}")));
        }
        Ok(Self {
            entries: Tensor::uniform(&[size, dim], 1.0 / (dim as f64).sqrt(), rng),
        })
    }

    pub fn from_entries(entries: Vec<Vec<f64>>) -> Result<Self> {
        let dim = entries.first().map_or(0, |e| e.len());
        if entries.iter().any(|e| e.len() != dim) {
            return Err(Error::InvalidCodebook("ragged entries".into()));
        }
        let k = entries.len();
        Ok(Self {
            entries: Tensor::from_vec(&[k, dim], entries.concat())?,
        })
    }

    pub fn size(&self) -> usize {
        self.entries.shape[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape.get(1).copied().unwrap_or(0)
    }

    pub fn entry(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.entries.data[k * d..(k + 1) * d]
    }
}

impl ParamTree for Codebook {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "entries"), &self.entries);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "entries"), &mut self.entries);
    }
}

/// Index of the entry nearest to `v` (lowest index on ties) and its
/// Euclidean distance.
pub fn nearest_code(v: &[f64], cb: &Codebook) -> Result<(usize, f64)> {
    if cb.size() == 0 {
        return Err(Error::InvalidCodebook("empty codebook".into()));
    }
    if v.len() != cb.dim() {
        return Err(Error::Shape(format!(
            "vector of dimension {} against codebook dimension {}",
            v.len(),
            cb.dim()
        )));
    }
    let mut best = (0, f64::INFINITY);
    for (k, e) in cb.entries.data.chunks_exact(cb.dim()).enumerate() {
        let d2: f64 = v.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
        if d2 < best.1 {
            best = (k, d2);
        }
    }
    Ok((best.0, best.1.sqrt()))
}

/// Discrete tokens plus the codebook vectors they select.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub depth: usize,
    pub indices: Vec<usize>,
    pub quantized: Vec<f64>,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Token grid whose indices are given; `quantized` is looked up.
    pub fn from_indices(rows: usize, cols: usize, indices: Vec<usize>, cb: &Codebook) -> Result<Self> {
        if indices.len() != rows * cols {
            return Err(Error::Shape("index count does not match grid".into()));
        }
        let mut quantized = Vec::with_capacity(indices.len() * cb.dim());
        for &k in &indices {
            if k >= cb.size() {
                return Err(Error::Token {
                    index: k,
                    size: cb.size(),
                });
            }
            quantized.extend_from_slice(cb.entry(k));
        }
        Ok(Self {
            rows,
            cols,
            depth: cb.dim(),
            indices,
            quantized,
        })
    }

    pub fn as_latent(&self) -> LatentGrid {
        LatentGrid {
            rows: self.rows,
            cols: self.cols,
            depth: self.depth,
            values: self.quantized.clone(),
        }
    }
}

/// Replaces every latent cell by its nearest codebook entry.
pub fn quantize(z: &LatentGrid, cb: &Codebook) -> Result<TokenGrid> {
    if z.depth != cb.dim() {
        return Err(Error::Shape(format!(
            "latent depth {} vs codebook dimension {}",
            z.depth,
            cb.dim()
        )));
    }
    let mut indices = Vec::with_capacity(z.len());
    let mut quantized = Vec::with_capacity(z.values.len());
    for cell in z.values.chunks_exact(z.depth) {
        let (k, _) = nearest_code(cell, cb)?;
        indices.push(k);
        quantized.extend_from_slice(cb.entry(k));
    }
    Ok(TokenGrid {
        rows: z.rows,
        cols: z.cols,
        depth: z.depth,
        indices,
        quantized,
    })
}

/// Per-token linear expansion back to pixel blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchDecoder {
    pub patch: usize,
    pub proj: Linear,
}

impl PatchDecoder {
    pub fn new(patch: usize, code_dim: usize, rng: &mut impl Rng) -> Self {
        let mut proj = Linear::new(code_dim, 3 * patch * patch, 1.0 / (code_dim as f64).sqrt(), rng);
        proj.bias.data.iter_mut().for_each(|b| *b = 0.5);
        Self { patch, proj }
    }

    pub fn zeros(patch: usize, code_dim: usize) -> Self {
        Self {
            patch,
            proj: Linear::zeros(code_dim, 3 * patch * patch),
        }
    }
}

impl ParamTree for PatchDecoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.proj.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.proj.visit_mut(prefix, f);
    }
}

/// Decodes a token grid to a `rows·f × cols·f` image.
pub fn reconstruct(t: &TokenGrid, dec: &PatchDecoder) -> Result<Patch> {
    let f = dec.patch;
    if dec.proj.input_dim() != t.depth || dec.proj.output_dim() != 3 * f * f {
        return Err(Error::Shape(format!(
            "decoder {}→{} for tokens of depth {} and patch {f}",
            dec.proj.input_dim(),
            dec.proj.output_dim(),
            t.depth
        )));
    }
    let blocks = dec.proj.forward(&t.quantized, t.len());
    let mut out = Patch::zeros(t.cols * f, t.rows * f);
    scatter_blocks(&blocks, t.rows, t.cols, f, &mut out);
    Ok(out)
}

fn scatter_blocks(blocks: &[f64], rows: usize, cols: usize, f: usize, out: &mut Patch) {
    let bw = 3 * f * f;
    for r in 0..rows {
        for c in 0..cols {
            let b = &blocks[(r * cols + c) * bw..(r * cols + c + 1) * bw];
            for py in 0..f {
                let dst = ((r * f + py) * out.width + c * f) * 3;
                out.data[dst..dst + 3 * f].copy_from_slice(&b[py * 3 * f..(py + 1) * 3 * f]);
            }
        }
    }
}

fn gather_blocks(img: &Patch, rows: usize, cols: usize, f: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols * 3 * f * f);
    for r in 0..rows {
        for c in 0..cols {
            for py in 0..f {
                let src = ((r * f + py) * img.width + c * f) * 3;
                out.extend_from_slice(&img.data[src..src + 3 * f]);
            }
        }
    }
    out
}

/// Gradients produced by the straight-through estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct StraightThroughGrad {
    /// Upstream gradient copied unchanged onto the encoder output.
    pub latent: LatentGrid,
    /// `K × d` codebook gradient: each selected entry is pulled toward the
    /// latents assigned to it with strength `beta`, averaged over cells.
    pub codebook: Tensor,
}

/// Routes a gradient on the quantized grid back through quantization.
pub fn straight_through_grad(
    upstream: &LatentGrid,
    latent: &LatentGrid,
    tokens: &TokenGrid,
    codebook_size: usize,
    beta: f64,
) -> Result<StraightThroughGrad> {
    if upstream.values.len() != latent.values.len() || latent.values.len() != tokens.quantized.len() {
        return Err(Error::Shape("straight-through operands disagree".into()));
    }
    let d = latent.depth;
    let mut codebook = Tensor::zeros(&[codebook_size, d]);
    let scale = beta / latent.len().max(1) as f64;
    for (cell, &k) in tokens.indices.iter().enumerate() {
        let z = &latent.values[cell * d..(cell + 1) * d];
        let q = &tokens.quantized[cell * d..(cell + 1) * d];
        let g = &mut codebook.data[k * d..(k + 1) * d];
        for c in 0..d {
            g[c] += scale * (q[c] - z[c]);
        }
    }
    Ok(StraightThroughGrad {
        latent: upstream.clone(),
        codebook,
    })
}

/// Encoder, codebook and decoder trained together by reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub encoder: PatchEncoder,
    pub codebook: Codebook,
    pub decoder: PatchDecoder,
}

impl ParamTree for Tokenizer {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.codebook.visit(&join(prefix, "codebook"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.codebook.visit_mut(&join(prefix, "codebook"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

impl Tokenizer {
    pub fn new(patch: usize, codebook_size: usize, code_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            encoder: PatchEncoder::new(patch, code_dim, rng),
            codebook: Codebook::new(codebook_size, code_dim, rng)?,
            decoder: PatchDecoder::new(patch, code_dim, rng),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_grad();
        z
    }

    pub fn tokenize(&self, x: &Patch) -> Result<(LatentGrid, TokenGrid)> {
        let z = self.encoder.encode(x)?;
        let t = quantize(&z, &self.codebook)?;
        Ok((z, t))
    }

    /// Mean squared reconstruction error of `x` (after reflect padding),
    /// accumulating straight-through gradients into `grad`.
    pub fn reconstruction_step(&self, x: &Patch, beta: f64, grad: &mut Tokenizer) -> Result<f64> {
        let f = self.encoder.patch;
        let (z, t) = self.tokenize(x)?;
        let padded_target = {
            let mut blocks = Vec::new();
            let mut all = Vec::with_capacity(t.len() * 3 * f * f);
            for r in 0..t.rows {
                token_row_blocks(x, f, r, t.cols, &mut blocks);
                all.extend_from_slice(&blocks);
            }
            all
        };
        let recon = self.decoder.proj.forward(&t.quantized, t.len());
        let n = recon.len() as f64;
        let mut loss = 0.0;
        let mut drecon = vec![0.0; recon.len()];
        for i in 0..recon.len() {
            let e = recon[i] - padded_target[i];
            loss += e * e;
            drecon[i] = 2.0 * e / n;
        }
        let dq = self.decoder.proj.backward(&t.quantized, &drecon, t.len(), &mut grad.decoder.proj);
        let upstream = LatentGrid {
            rows: t.rows,
            cols: t.cols,
            depth: t.depth,
            values: dq,
        };
        let mut st = straight_through_grad(&upstream, &z, &t, self.codebook.size(), beta)?;
        let scale = beta / t.len().max(1) as f64;
        for ((g, zv), q) in st.latent.values.iter_mut().zip(&z.values).zip(&t.quantized) {
            *g += scale * (zv - q);
        }
        self.encoder.backward(x, &st.latent, &mut grad.encoder);
        for (g, s) in grad.codebook.entries.data.iter_mut().zip(&st.codebook.data) {
            *g += s;
        }
        Ok(loss / n)
    }
}

/// Token blocks of a reconstructed image, in token order; exposed for tests
/// that compare decoded blocks against codebook expansions.
pub fn image_blocks(img: &Patch, f: usize) -> Vec<f64> {
    gather_blocks(img, img.height / f, img.width / f, f)
}

/// Dense `rows·cols × d` product helper used by readout checks.
pub fn linear_readout(z: &LatentGrid, weights: &[f64], outputs: usize) -> Vec<f64> {
    matmul(z.len(), z.depth, outputs, &z.values, false, weights, false)
}

/// Accumulates `zᵀ dy` into `grad`.
pub fn linear_readout_grad(z: &LatentGrid, dy: &[f64], outputs: usize, grad: &mut [f64]) {
    matmul_acc(z.depth, z.len(), outputs, &z.values, true, dy, false, grad);
}
