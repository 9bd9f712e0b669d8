//! The segmentation network: tokenizer, backbone and per-cell decode head,
//! plus its loss, the online ROI training loop and the `.hhck` checkpoint
//! format.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    backbone_backward, backbone_forward_embedded, embed_tokens, BackboneCache, BackboneConfig, TransformerParams,
};
use crate::error::{Error, Result};
use crate::foreground::{compute_foreground, foreground_tiles, sample_roi, tile_plan, ForegroundMask, SamplerConfig};
use crate::mask::WsiMask;
use crate::nn::{join, sigmoid, Adam, Linear, ParamTree, Tensor};
use crate::pyramid::{PyramidImage, Region};
use crate::raster::RgbImage;
use crate::rng;
use crate::vq::{LatentGrid, Patch, TokenGrid, Tokenizer, DEFAULT_BETA};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HHCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Clamp applied to probabilities inside the cross-entropy term.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    /// Nearest-code quantization; the backbone sees token indices.
    #[default]
    Vq,
    /// Continuous latents projected to the model width.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub tokenizer: TokenizerKind,
    pub backbone: BackboneConfig,
    /// Independent binary output heads.
    pub classes: usize,
    /// Codebook pull strength for the straight-through estimator.
    pub beta: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch: 16,
            codebook_size: 1024,
            code_dim: 256,
            tokenizer: TokenizerKind::Vq,
            backbone: BackboneConfig::default(),
            classes: 1,
            beta: DEFAULT_BETA,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.code_dim == 0 || self.classes == 0 {
            return Err(Error::Config("patch, code_dim and classes must be positive".into()));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook needs at least two entries".into()));
        }
        if self.backbone.max_grid == 0 {
            return Err(Error::Config("max_grid must be positive".into()));
        }
        self.backbone.attention.validate()
    }

    fn head_width(&self) -> usize {
        self.classes * 4 * self.patch * self.patch
    }
}

/// Every learnable tensor of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneParams {
    pub tokenizer: Tokenizer,
    /// `K × d_model` token embedding (quantized tokenizer only).
    pub embed: Option<Tensor>,
    /// Latent-to-model projection (linear tokenizer only).
    pub latent_proj: Option<Linear>,
    pub transformer: TransformerParams,
    pub head: Linear,
    pub step_count: u64,
}

impl ParamTree for BackboneParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.tokenizer.visit(&join(prefix, "tokenizer"), f);
        if let Some(e) = &self.embed {
            f(join(prefix, "embed"), e);
        }
        if let Some(l) = &self.latent_proj {
            l.visit(&join(prefix, "latent_proj"), f);
        }
        self.transformer.visit(&join(prefix, "transformer"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.tokenizer.visit_mut(&join(prefix, "tokenizer"), f);
        if let Some(e) = &mut self.embed {
            f(join(prefix, "embed"), e);
        }
        if let Some(l) = &mut self.latent_proj {
            l.visit_mut(&join(prefix, "latent_proj"), f);
        }
        self.transformer.visit_mut(&join(prefix, "transformer"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

impl BackboneParams {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::keyed(cfg.seed, rng::domain::INIT, 0);
        let d = cfg.backbone.attention.d_model;
        let tokenizer = Tokenizer::new(cfg.patch, cfg.codebook_size, cfg.code_dim, &mut r)?;
        let (embed, latent_proj) = match cfg.tokenizer {
            TokenizerKind::Vq => (Some(Tensor::normal(&[cfg.codebook_size, d], 0.02, &mut r)), None),
            TokenizerKind::Linear => (
                None,
                Some(Linear::new(cfg.code_dim, d, (1.0 / cfg.code_dim as f64).sqrt(), &mut r)),
            ),
        };
        let transformer = TransformerParams::new(&cfg.backbone, &mut r);
        let width = cfg.backbone.output_dim();
        let head = Linear::new(width, cfg.head_width(), 0.1 / (width as f64).sqrt(), &mut r);
        let mut p = Self {
            tokenizer,
            embed,
            latent_proj,
            transformer,
            head,
            step_count: 0,
        };
        p.round_to_f32();
        Ok(p)
    }

    /// Rounds every tensor to `f32`, the checkpoint precision, so a saved
    /// model reloads bit-identically.
    pub fn round_to_f32(&mut self) {
        self.visit_mut("", &mut |_, t| t.round_to_f32());
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, t| ok &= t.is_finite());
        ok
    }
}

/// Per-class probability planes, `classes × height × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl ProbMap {
    pub fn plane(&self, class: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[class * n..(class + 1) * n]
    }
}

/// Values kept from a forward pass for the backward pass.
pub struct ForwardCache {
    patch: Patch,
    latent: LatentGrid,
    tokens: Option<TokenGrid>,
    backbone: BackboneCache,
    features: Vec<f64>,
    half_rows: usize,
    half_cols: usize,
}

/// Configured network: the thing training produces and checkpoints hold.
#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    pub config: ModelConfig,
    pub params: BackboneParams,
}

/// A trained model as persisted to disk.
pub type Checkpoint = SegModel;

impl SegModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = BackboneParams::new(&config)?;
        Ok(Self { config, params })
    }

    pub fn step_count(&self) -> u64 {
        self.params.step_count
    }

    fn embed(&self, x: &Patch) -> Result<(LatentGrid, Option<TokenGrid>, Vec<f64>)> {
        let p = &self.params;
        match self.config.tokenizer {
            TokenizerKind::Vq => {
                let (z, t) = p.tokenizer.tokenize(x)?;
                let table = p.embed.as_ref().ok_or_else(|| Error::Config("missing token embedding".into()))?;
                let e = embed_tokens(&t, table)?;
                Ok((z, Some(t), e))
            }
            TokenizerKind::Linear => {
                let z = p.tokenizer.encoder.encode(x)?;
                let proj = p
                    .latent_proj
                    .as_ref()
                    .ok_or_else(|| Error::Config("missing latent projection".into()))?;
                let e = proj.forward(&z.values, z.len());
                Ok((z, None, e))
            }
        }
    }

    /// Pixel logits (`classes × H × W`) for a normalized patch.
    pub fn forward_logits(&self, x: &Patch, keep_cache: bool) -> Result<(Vec<f64>, ForwardCache)> {
        let (latent, tokens, embedded) = self.embed(x)?;
        let (out, backbone) = backbone_forward_embedded(
            &self.params.transformer,
            &self.config.backbone,
            &embedded,
            latent.rows,
            latent.cols,
            keep_cache,
        )?;
        let cells = out.rows * out.cols;
        let head = self.params.head.forward(&out.features, cells);
        let logits = self.cells_to_pixels(&head, out.rows, out.cols, x.width, x.height);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite logits".into()));
        }
        let cache = ForwardCache {
            patch: if keep_cache { x.clone() } else { Patch::zeros(0, 0) },
            latent,
            tokens,
            backbone,
            features: if keep_cache { out.features } else { Vec::new() },
            half_rows: out.rows,
            half_cols: out.cols,
        };
        Ok((logits, cache))
    }

    fn cells_to_pixels(&self, head: &[f64], rows: usize, cols: usize, w: usize, h: usize) -> Vec<f64> {
        let s = 2 * self.config.patch;
        let classes = self.config.classes;
        let hw = head.len() / (rows * cols).max(1);
        let mut out = vec![0.0; classes * w * h];
        for i in 0..rows {
            for j in 0..cols {
                let cell = &head[(i * cols + j) * hw..(i * cols + j + 1) * hw];
                for c in 0..classes {
                    for py in 0..s {
                        let y = i * s + py;
                        if y >= h {
                            break;
                        }
                        let x0 = j * s;
                        if x0 >= w {
                            continue;
                        }
                        let n = s.min(w - x0);
                        let src = &cell[c * s * s + py * s..c * s * s + py * s + n];
                        let dst = c * w * h + y * w + x0;
                        out[dst..dst + n].copy_from_slice(src);
                    }
                }
            }
        }
        out
    }

    fn pixels_to_cells(&self, dlogits: &[f64], rows: usize, cols: usize, w: usize, h: usize) -> Vec<f64> {
        let s = 2 * self.config.patch;
        let classes = self.config.classes;
        let hw = classes * s * s;
        let mut out = vec![0.0; rows * cols * hw];
        for i in 0..rows {
            for j in 0..cols {
                let cell = &mut out[(i * cols + j) * hw..(i * cols + j + 1) * hw];
                for c in 0..classes {
                    for py in 0..s {
                        let y = i * s + py;
                        let x0 = j * s;
                        if y >= h || x0 >= w {
                            continue;
                        }
                        let n = s.min(w - x0);
                        let src = c * w * h + y * w + x0;
                        cell[c * s * s + py * s..c * s * s + py * s + n].copy_from_slice(&dlogits[src..src + n]);
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients for an upstream gradient on the
    /// pixel logits of a cached forward pass.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64], grad: &mut BackboneParams) -> Result<()> {
        let p = &self.params;
        let (w, h) = (cache.patch.width, cache.patch.height);
        if cache.features.is_empty() || dlogits.len() != self.config.classes * w * h {
            return Err(Error::Shape("backward needs a cached forward of matching size".into()));
        }
        let cells = cache.half_rows * cache.half_cols;
        let dhead = self.pixels_to_cells(dlogits, cache.half_rows, cache.half_cols, w, h);
        let dfeat = p.head.backward(&cache.features, &dhead, cells, &mut grad.head);
        let dembedded = backbone_backward(
            &p.transformer,
            &self.config.backbone,
            &cache.backbone,
            &dfeat,
            &mut grad.transformer,
        );
        match self.config.tokenizer {
            TokenizerKind::Vq => {
                let t = cache.tokens.as_ref().expect("quantized forward keeps tokens");
                let d = self.config.backbone.attention.d_model;
                let g = grad.embed.as_mut().expect("gradient tree mirrors parameters");
                for (cell, &k) in t.indices.iter().enumerate() {
                    for (a, b) in g.data[k * d..(k + 1) * d].iter_mut().zip(&dembedded[cell * d..(cell + 1) * d]) {
                        *a += b;
                    }
                }
            }
            TokenizerKind::Linear => {
                let proj = p.latent_proj.as_ref().expect("linear tokenizer has a projection");
                let gproj = grad.latent_proj.as_mut().expect("gradient tree mirrors parameters");
                let z = &cache.latent;
                let dz = proj.backward(&z.values, &dembedded, z.len(), gproj);
                let dlatent = LatentGrid {
                    rows: z.rows,
                    cols: z.cols,
                    depth: z.depth,
                    values: dz,
                };
                p.tokenizer.encoder.backward(&cache.patch, &dlatent, &mut grad.tokenizer.encoder);
            }
        }
        Ok(())
    }

    /// Probability map for a normalized patch.
    pub fn forward_patch(&self, x: &Patch) -> Result<ProbMap> {
        let (logits, _) = self.forward_logits(x, false)?;
        Ok(ProbMap {
            width: x.width,
            height: x.height,
            classes: self.config.classes,
            data: logits.into_iter().map(sigmoid).collect(),
        })
    }

    /// Probability map with the same spatial shape as `img`.
    pub fn forward(&self, img: &RgbImage) -> Result<ProbMap> {
        self.forward_patch(&Patch::from_rgb(img))
    }

    /// Writes the checkpoint atomically: a sibling temp file is renamed over
    /// `path` once fully written.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("hhck.tmp");
        {
            let f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(f);
            w.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
            let f = w.into_inner().map_err(|e| Error::io(&tmp, e.into_error()))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_vec(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        let tensors = self.params.named_tensors();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&self.params.step_count.to_le_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { buf: bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let clen = u32::from_le_bytes(r.array()?) as usize;
        let config: ModelConfig =
            serde_json::from_slice(r.take(clen)?).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let step_count = u64::from_le_bytes(r.array()?);
        let count = u32::from_le_bytes(r.array()?) as usize;
        let mut loaded = std::collections::HashMap::with_capacity(count);
        for _ in 0..count {
            let nlen = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(r.array()?) as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b));
            let n = n.ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            loaded.insert(name, (shape, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint tensors".into()));
        }
        let mut model = SegModel::new(config)?;
        let mut problem = None;
        model.params.visit_mut("", &mut |name, t| match loaded.remove(&name) {
            Some((shape, data)) if shape == t.shape => t.data = data,
            Some((shape, _)) => {
                problem.get_or_insert(format!("tensor {name} has shape {shape:?}, expected {:?}", t.shape));
            }
            None => {
                problem.get_or_insert(format!("tensor {name} missing"));
            }
        });
        if let Some(p) = problem {
            return Err(Error::Format(p));
        }
        if let Some(name) = loaded.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {name}")));
        }
        if !model.params.is_finite() {
            return Err(Error::Numerical("checkpoint holds non-finite weights".into()));
        }
        model.params.step_count = step_count;
        Ok(model)
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

/// `λ·(1 − softDice) + (1 − λ)·BCE` for one probability plane against a
/// binary target. Probabilities are clamped inside the log terms.
pub fn loss(prob: &[f64], gt: &[bool], lambda: f64) -> Result<f64> {
    check_loss_inputs(prob.len(), gt.len(), lambda)?;
    let (mut spg, mut sp, mut sg, mut bce) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &g) in prob.iter().zip(gt) {
        let gv = g as u8 as f64;
        spg += p * gv;
        sp += p;
        sg += gv;
        let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        bce -= if g { pc.ln() } else { (1.0 - pc).ln() };
    }
    let soft_dice = (2.0 * spg + 1.0) / (sp + sg + 1.0);
    let l = lambda * (1.0 - soft_dice) + (1.0 - lambda) * bce / prob.len() as f64;
    if !l.is_finite() {
        return Err(Error::Numerical("loss is not finite".into()));
    }
    Ok(l.max(0.0))
}

fn check_loss_inputs(np: usize, ng: usize, lambda: f64) -> Result<()> {
    if np != ng {
        return Err(Error::Shape(format!("{np} probabilities for {ng} labels")));
    }
    if np == 0 {
        return Err(Error::Shape("empty loss input".into()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("loss mix {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// Loss averaged over class planes and its gradient with respect to the
/// pixel logits.
pub fn loss_and_logit_grad(logits: &[f64], gt: &[bool], classes: usize, lambda: f64) -> Result<(f64, Vec<f64>)> {
    check_loss_inputs(logits.len(), gt.len(), lambda)?;
    let n = logits.len() / classes;
    let prob: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let mut total = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for c in 0..classes {
        let (p, g) = (&prob[c * n..(c + 1) * n], &gt[c * n..(c + 1) * n]);
        total += loss(p, g, lambda)?;
        let (mut spg, mut sp, mut sg) = (0.0, 0.0, 0.0);
        for (&pi, &gi) in p.iter().zip(g) {
            spg += pi * gi as u8 as f64;
            sp += pi;
            sg += gi as u8 as f64;
        }
        let num = 2.0 * spg + 1.0;
        let den = sp + sg + 1.0;
        for i in 0..n {
            let gi = g[i] as u8 as f64;
            let pi = p[i];
            let ddice = (2.0 * gi * den - num) / (den * den);
            let dp = -lambda * ddice;
            // Cross-entropy through the sigmoid collapses to p − g.
            grad[c * n + i] = (dp * pi * (1.0 - pi) + (1.0 - lambda) * (pi - gi) / n as f64) / classes as f64;
        }
    }
    Ok((total / classes as f64, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Fresh random foreground ROI every step.
    #[default]
    Rand,
    /// Uniform picks from a fixed, non-overlapping foreground tile grid.
    Tile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: u64,
    pub batch: usize,
    pub seed: u64,
    pub loss_mix: f64,
    pub freeze_tokenizer: bool,
    pub sampler: SamplerKind,
    /// Pyramid level ROIs are read from.
    pub level: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            steps: 1000,
            batch: 1,
            seed: 0,
            loss_mix: 0.5,
            freeze_tokenizer: false,
            sampler: SamplerKind::Rand,
            level: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.loss_mix) {
            return Err(Error::Config(format!("loss mix {} outside [0, 1]", self.loss_mix)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        Ok(())
    }
}

/// One slide with its ground truth, prepared at the training level.
pub struct TrainingSlide {
    pub image: PyramidImage,
    /// One mask per class at the training level.
    pub truth: Vec<WsiMask>,
    pub foreground: ForegroundMask,
}

impl TrainingSlide {
    /// Brings `truth` to `level` (nearest-neighbour) and computes the
    /// foreground mask there.
    pub fn new(image: PyramidImage, truth: Vec<WsiMask>, level: usize) -> Result<Self> {
        let dims = image.level_dims(level)?;
        let truth = truth
            .iter()
            .map(|m| m.at_level(level))
            .collect::<Result<Vec<_>>>()?;
        for m in &truth {
            if (m.width(), m.height()) != dims {
                return Err(Error::Shape(format!(
                    "ground truth {}x{} does not match level {level} of {}",
                    m.width(),
                    m.height(),
                    image.path().display()
                )));
            }
        }
        if truth.is_empty() {
            return Err(Error::InvalidInput("slide has no ground-truth mask".into()));
        }
        let foreground = match compute_foreground(&image, level) {
            Ok(m) => m,
            Err(Error::DegenerateHistogram(m)) => *m,
            Err(e) => return Err(e),
        };
        Ok(Self {
            image,
            truth,
            foreground,
        })
    }
}

/// Progress of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub slide: usize,
    pub region: Region,
    pub loss: f64,
    pub reconstruction_mse: Option<f64>,
}

/// Trains from `init` and returns the final checkpoint.
pub fn train(init: SegModel, slides: &[TrainingSlide], cfg: &TrainConfig, sampler: &SamplerConfig) -> Result<Checkpoint> {
    train_with_log(init, slides, cfg, sampler, &mut |_| {})
}

/// [`train`] with a callback after every step.
pub fn train_with_log(
    init: SegModel,
    slides: &[TrainingSlide],
    cfg: &TrainConfig,
    sampler: &SamplerConfig,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<Checkpoint> {
    cfg.validate()?;
    if slides.is_empty() {
        return Err(Error::InvalidInput("no training slides".into()));
    }
    let classes = init.config.classes;
    for s in slides {
        if s.truth.len() != classes {
            return Err(Error::Shape(format!(
                "slide has {} ground-truth masks for {classes} classes",
                s.truth.len()
            )));
        }
    }
    let tiles = match cfg.sampler {
        SamplerKind::Rand => Vec::new(),
        SamplerKind::Tile => fixed_tiles(slides, sampler)?,
    };
    let mut model = init;
    let mut adam = Adam::new(cfg.lr, &model.params);
    let freeze = cfg.freeze_tokenizer;
    let vq = model.config.tokenizer == TokenizerKind::Vq;
    let skip = move |name: &str| freeze && name.starts_with("tokenizer.");
    let mut grad = model.params.clone();
    for step in 0..cfg.steps {
        grad.zero_grad();
        let mut loss_sum = 0.0;
        let mut recon_sum = 0.0;
        let mut last = (0, Region::new(cfg.level, 0, 0, 0, 0));
        for b in 0..cfg.batch {
            let draw = step * cfg.batch as u64 + b as u64;
            let (si, region) = match cfg.sampler {
                SamplerKind::Rand => {
                    let si = rng::keyed(cfg.seed, rng::domain::SLIDE_PICK, draw).random_range(0..slides.len());
                    (si, sample_roi(&slides[si].foreground, sampler, draw)?)
                }
                SamplerKind::Tile => {
                    let k = rng::keyed(cfg.seed, rng::domain::TILE_SHUFFLE, draw).random_range(0..tiles.len());
                    tiles[k]
                }
            };
            let slide = &slides[si];
            let img = slide.image.read_region(&region)?;
            let mut gt = Vec::with_capacity(classes * region.width * region.height);
            for m in &slide.truth {
                gt.extend(m.bits.crop(region.x, region.y, region.width, region.height)?.to_bools());
            }
            let x = Patch::from_rgb(&img);
            let (logits, cache) = model.forward_logits(&x, true)?;
            let (l, mut dlogits) = loss_and_logit_grad(&logits, &gt, classes, cfg.loss_mix)?;
            if !l.is_finite() {
                return Err(diverged(step, &model));
            }
            let scale = 1.0 / cfg.batch as f64;
            dlogits.iter_mut().for_each(|g| *g *= scale);
            model.backward(&cache, &dlogits, &mut grad)?;
            if vq && !freeze {
                let mut tg = model.params.tokenizer.zeros_like();
                recon_sum += model.params.tokenizer.reconstruction_step(&x, model.config.beta, &mut tg)?;
                tg.visit_mut("", &mut |_, t| t.data.iter_mut().for_each(|v| *v *= scale));
                add_into(&mut grad.tokenizer, &tg);
            }
            loss_sum += l;
            last = (si, region);
        }
        if !grad.is_finite() {
            return Err(diverged(step, &model));
        }
        let before = model.params.clone();
        adam.update(&mut model.params, &grad, &skip);
        model.params.round_to_f32();
        model.params.step_count += 1;
        if !model.params.is_finite() {
            model.params = before;
            return Err(diverged(step, &model));
        }
        on_step(&StepRecord {
            step,
            slide: last.0,
            region: last.1,
            loss: loss_sum / cfg.batch as f64,
            reconstruction_mse: (vq && !freeze).then(|| recon_sum / cfg.batch as f64),
        });
    }
    Ok(model)
}

fn diverged(step: u64, last_good: &SegModel) -> Error {
    Error::TrainingDiverged {
        step,
        last_good: Box::new(last_good.clone()),
    }
}

fn add_into<P: ParamTree>(dst: &mut P, src: &P) {
    let mut srcs = Vec::new();
    src.visit("", &mut |_, t| srcs.push(t));
    let mut i = 0;
    dst.visit_mut("", &mut |_, t| {
        for (a, b) in t.data.iter_mut().zip(&srcs[i].data) {
            *a += b;
        }
        i += 1;
    });
}

/// Every foreground tile of a non-overlapping ROI-sized grid over each slide.
fn fixed_tiles(slides: &[TrainingSlide], sampler: &SamplerConfig) -> Result<Vec<(usize, Region)>> {
    let mut out = Vec::new();
    for (si, s) in slides.iter().enumerate() {
        let fg = &s.foreground;
        sampler.validate(fg)?;
        let plan = tile_plan(fg.level, fg.width(), fg.height(), sampler.roi_width, sampler.roi_height, 0)?;
        for t in foreground_tiles(&plan, fg, sampler.min_foreground_fraction)? {
            out.push((si, t));
        }
    }
    if out.is_empty() {
        return Err(Error::NoForeground);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionConfig;

    pub(crate) fn tiny_config(tokenizer: TokenizerKind) -> ModelConfig {
        ModelConfig {
            patch: 4,
            codebook_size: 8,
            code_dim: 4,
            tokenizer,
            backbone: BackboneConfig {
                attention: AttentionConfig {
                    d_model: 8,
                    heads: 2,
                    scales: vec![1, 2],
                    epsilon: 1e-6,
                    kind: Default::default(),
                },
                stage1_blocks: 1,
                stage2_blocks: 1,
                max_grid: 16,
            },
            classes: 1,
            beta: 0.25,
            seed: 3,
        }
    }

    fn random_patch(w: usize, h: usize, seed: u64) -> Patch {
        let mut r = rng::stream(seed, 77);
        Patch {
            width: w,
            height: h,
            data: (0..w * h * 3).map(|_| r.random::<f64>()).collect(),
        }
    }

    #[test]
    fn output_shape_and_range() {
        let m = SegModel::new(tiny_config(TokenizerKind::Vq)).unwrap();
        for (w, h) in [(16, 16), (30, 18)] {
            let p = m.forward_patch(&random_patch(w, h, 1)).unwrap();
            assert_eq!((p.width, p.height, p.data.len()), (w, h, w * h));
            assert!(p.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let gt: Vec<bool> = (0..16).map(|i| i % 3 == 0).collect();
        let p: Vec<f64> = gt.iter().map(|&g| g as u8 as f64).collect();
        assert!(loss(&p, &gt, 0.5).unwrap() < 1e-6);
    }

    #[test]
    fn half_probability_dice_closed_form() {
        let n = 16.0;
        let l = loss(&[0.5; 16], &[true; 16], 1.0).unwrap();
        assert!((l - (1.0 - (n + 1.0) / (1.5 * n + 1.0))).abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_bad_inputs() {
        assert!(matches!(loss(&[0.5; 3], &[true; 4], 0.5), Err(Error::Shape(_))));
        assert!(matches!(loss(&[0.5; 4], &[true; 4], 1.5), Err(Error::Config(_))));
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let mut r = rng::stream(4, 0);
        let z: Vec<f64> = (0..24).map(|_| r.random_range(-2.0..2.0)).collect();
        let gt: Vec<bool> = (0..24).map(|i| i % 5 < 2).collect();
        let (_, g) = loss_and_logit_grad(&z, &gt, 2, 0.4).unwrap();
        for i in 0..z.len() {
            let mut zp = z.clone();
            zp[i] += 1e-5;
            let mut zm = z.clone();
            zm[i] -= 1e-5;
            let fd = (loss_and_logit_grad(&zp, &gt, 2, 0.4).unwrap().0 - loss_and_logit_grad(&zm, &gt, 2, 0.4).unwrap().0)
                / 2e-5;
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-3), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        for kind in [TokenizerKind::Vq, TokenizerKind::Linear] {
            let m = SegModel::new(tiny_config(kind)).unwrap();
            let bytes = m.to_bytes().unwrap();
            let back = SegModel::from_bytes(&bytes).unwrap();
            assert_eq!(back, m);
            let x = random_patch(16, 12, 2);
            assert_eq!(m.forward_patch(&x).unwrap(), back.forward_patch(&x).unwrap());
        }
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let m = SegModel::new(tiny_config(TokenizerKind::Vq)).unwrap();
        let bytes = m.to_bytes().unwrap();
        assert!(matches!(SegModel::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(SegModel::from_bytes(&bad), Err(Error::Format(_))));
    }
}
