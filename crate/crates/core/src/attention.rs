//! ReLU linear attention, its multi-scale block form, feed-forward blocks and
//! the two-stage backbone that runs over a token grid.
//!
//! Linear attention never forms the `N×N` kernel. With `φ = ReLU`,
//!
//! ```text
//! A_i = φ(Q_i) S / (φ(Q_i) s + ε),   S = Σ_j φ(K_j)ᵀ V_j,   s = Σ_j φ(K_j)ᵀ
//! ```
//!
//! so `S` and `s` are built once and every query costs `O(d²)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, matmul, matmul_acc, LayerNorm, LayerNormCache, Linear, ParamTree, Real, Tensor};
use crate::vq::TokenGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// ReLU linear attention.
    #[default]
    Relu,
    /// Softmax attention with the quadratic kernel, for ablations.
    Mhsa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
    pub scales: Vec<usize>,
    pub epsilon: f64,
    #[serde(default)]
    pub kind: AttentionKind,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            heads: 4,
            scales: vec![1, 2, 4],
            epsilon: 1e-6,
            kind: AttentionKind::Relu,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible into {} heads",
                self.d_model, self.heads
            )));
        }
        if self.scales.is_empty() || self.scales.contains(&0) {
            return Err(Error::Config("scales must be nonempty and positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Same heads and scales at a different width.
    pub fn with_width(&self, d_model: usize) -> Self {
        Self {
            d_model,
            ..self.clone()
        }
    }

    fn check_grid(&self, rows: usize, cols: usize) -> Result<()> {
        let max = *self.scales.iter().max().unwrap_or(&1);
        if max > rows || max > cols {
            return Err(Error::Config(format!(
                "scale {max} exceeds the {rows}x{cols} token grid"
            )));
        }
        Ok(())
    }
}

fn check_finite<T: Real>(name: &str, x: &[T]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{name} contains non-finite values")))
    }
}

/// Intermediate values of one linear-attention call.
pub struct LinearAttentionCache<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    kv: Vec<T>,
    ksum: Vec<T>,
    den: Vec<T>,
    out: Vec<T>,
    n_q: usize,
    n_kv: usize,
    d: usize,
    dv: usize,
}

fn linear_attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    n_q: usize,
    n_kv: usize,
    d: usize,
    dv: usize,
    eps: T,
) -> LinearAttentionCache<T> {
    let qr: Vec<T> = q.iter().map(|&x| x.relu()).collect();
    let kr: Vec<T> = k.iter().map(|&x| x.relu()).collect();
    // Shared sums, formed once for all queries.
    let kv = matmul(d, n_kv, dv, &kr, true, v, false);
    let mut ksum = vec![T::ZERO; d];
    for row in kr.chunks_exact(d) {
        for (s, &x) in ksum.iter_mut().zip(row) {
            *s += x;
        }
    }
    let mut out = matmul(n_q, d, dv, &qr, false, &kv, false);
    let mut den = vec![T::ZERO; n_q];
    for i in 0..n_q {
        let row = &qr[i * d..(i + 1) * d];
        let dn = row.iter().zip(&ksum).map(|(&a, &b)| a * b).sum::<T>() + eps;
        den[i] = dn;
        for o in &mut out[i * dv..(i + 1) * dv] {
            *o = if dn > T::ZERO { *o / dn } else { T::ZERO };
        }
    }
    LinearAttentionCache {
        q: q.to_vec(),
        k: k.to_vec(),
        v: v.to_vec(),
        kv,
        ksum,
        den,
        out,
        n_q,
        n_kv,
        d,
        dv,
    }
}

/// Gradients of a linear-attention call with respect to `(Q, K, V)`.
fn linear_attention_backward(c: &LinearAttentionCache<f64>, dout: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n_q, n_kv, d, dv) = (c.n_q, c.n_kv, c.d, c.dv);
    let qr: Vec<f64> = c.q.iter().map(|&x| x.relu()).collect();
    let kr: Vec<f64> = c.k.iter().map(|&x| x.relu()).collect();
    let mut dnum = vec![0.0; n_q * dv];
    let mut dden = vec![0.0; n_q];
    for i in 0..n_q {
        let den = c.den[i];
        if den <= 0.0 {
            continue;
        }
        let g = &dout[i * dv..(i + 1) * dv];
        let a = &c.out[i * dv..(i + 1) * dv];
        for j in 0..dv {
            dnum[i * dv + j] = g[j] / den;
        }
        dden[i] = -g.iter().zip(a).map(|(x, y)| x * y).sum::<f64>() / den;
    }
    // numerator = φ(Q) S, denominator = φ(Q) s + ε
    let mut dqr = matmul(n_q, dv, d, &dnum, false, &c.kv, true);
    for i in 0..n_q {
        for j in 0..d {
            dqr[i * d + j] += dden[i] * c.ksum[j];
        }
    }
    let dkv = matmul(d, n_q, dv, &qr, true, &dnum, false);
    let mut dksum = vec![0.0; d];
    for i in 0..n_q {
        for j in 0..d {
            dksum[j] += qr[i * d + j] * dden[i];
        }
    }
    // S = φ(K)ᵀ V, s = φ(K)ᵀ 1
    let mut dkr = matmul(n_kv, dv, d, &c.v, false, &dkv, true);
    for i in 0..n_kv {
        for j in 0..d {
            dkr[i * d + j] += dksum[j];
        }
    }
    let dv_ = matmul(n_kv, d, dv, &kr, false, &dkv, false);
    for (g, &x) in dqr.iter_mut().zip(&c.q) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    for (g, &x) in dkr.iter_mut().zip(&c.k) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    (dqr, dkr, dv_)
}

/// ReLU linear attention over `n` tokens: `Q`, `K` are `n×d`, `V` is `n×dv`.
/// Rows whose ReLU'd query is zero produce zero output.
pub fn relu_linear_attention<T: Real>(q: &[T], k: &[T], v: &[T], n: usize, d: usize, dv: usize, epsilon: T) -> Result<Vec<T>> {
    if q.len() != n * d || k.len() != n * d || v.len() != n * dv {
        return Err(Error::Shape(format!(
            "attention operands {}/{}/{} for n={n}, d={d}, dv={dv}",
            q.len(),
            k.len(),
            v.len()
        )));
    }
    check_finite("Q", q)?;
    check_finite("K", k)?;
    check_finite("V", v)?;
    let out = linear_attention_forward(q, k, v, n, n, d, dv, epsilon).out;
    check_finite("attention output", &out)?;
    Ok(out)
}

struct SoftmaxCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    p: Vec<f64>,
    n: usize,
    d: usize,
    dv: usize,
}

fn softmax_attention_forward(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize, dv: usize) -> (Vec<f64>, SoftmaxCache) {
    let scale = 1.0 / (d as f64).sqrt();
    let mut p = matmul(n, d, n, q, false, k, true);
    for row in p.chunks_exact_mut(n) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * scale));
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x * scale - m).exp();
            z += *x;
        }
        row.iter_mut().for_each(|x| *x /= z);
    }
    let out = matmul(n, n, dv, &p, false, v, false);
    (
        out,
        SoftmaxCache {
            q: q.to_vec(),
            k: k.to_vec(),
            v: v.to_vec(),
            p,
            n,
            d,
            dv,
        },
    )
}

fn softmax_attention_backward(c: &SoftmaxCache, dout: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, d, dv) = (c.n, c.d, c.dv);
    let scale = 1.0 / (d as f64).sqrt();
    let dvv = matmul(n, n, dv, &c.p, true, dout, false);
    let mut ds = matmul(n, dv, n, dout, false, &c.v, true);
    for i in 0..n {
        let prow = &c.p[i * n..(i + 1) * n];
        let drow = &mut ds[i * n..(i + 1) * n];
        let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
        for j in 0..n {
            drow[j] = prow[j] * (drow[j] - dot) * scale;
        }
    }
    let dq = matmul(n, n, d, &ds, false, &c.k, false);
    let dk = matmul(n, n, d, &ds, true, &c.q, false);
    (dq, dk, dvv)
}

/// Softmax attention; kept as the quadratic reference and for the MHSA
/// configuration.
pub fn softmax_attention(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize, dv: usize) -> Vec<f64> {
    softmax_attention_forward(q, k, v, n, d, dv).0
}

/// `s×s` average pooling of a `rows×cols×d` grid; edge windows average the
/// cells they contain.
pub fn avg_pool(x: &[f64], rows: usize, cols: usize, d: usize, s: usize) -> (Vec<f64>, usize, usize) {
    if s == 1 {
        return (x.to_vec(), rows, cols);
    }
    let (pr, pc) = (rows.div_ceil(s), cols.div_ceil(s));
    let mut out = vec![0.0; pr * pc * d];
    for i in 0..pr {
        for j in 0..pc {
            let (r0, r1) = (i * s, ((i + 1) * s).min(rows));
            let (c0, c1) = (j * s, ((j + 1) * s).min(cols));
            let inv = 1.0 / ((r1 - r0) * (c1 - c0)) as f64;
            let o = &mut out[(i * pc + j) * d..(i * pc + j + 1) * d];
            for r in r0..r1 {
                for c in c0..c1 {
                    for (acc, &v) in o.iter_mut().zip(&x[(r * cols + c) * d..(r * cols + c + 1) * d]) {
                        *acc += v;
                    }
                }
            }
            o.iter_mut().for_each(|v| *v *= inv);
        }
    }
    (out, pr, pc)
}

fn avg_pool_backward(dy: &[f64], rows: usize, cols: usize, d: usize, s: usize) -> Vec<f64> {
    if s == 1 {
        return dy.to_vec();
    }
    let pc = cols.div_ceil(s);
    let mut dx = vec![0.0; rows * cols * d];
    for r in 0..rows {
        for c in 0..cols {
            let (i, j) = (r / s, c / s);
            let (r0, r1) = (i * s, ((i + 1) * s).min(rows));
            let (c0, c1) = (j * s, ((j + 1) * s).min(cols));
            let inv = 1.0 / ((r1 - r0) * (c1 - c0)) as f64;
            let g = &dy[(i * pc + j) * d..(i * pc + j + 1) * d];
            for (o, &v) in dx[(r * cols + c) * d..(r * cols + c + 1) * d].iter_mut().zip(g) {
                *o = v * inv;
            }
        }
    }
    dx
}

/// Nearest-neighbour upsampling of a pooled grid back to `rows×cols`.
pub fn upsample_nearest(y: &[f64], rows: usize, cols: usize, d: usize, s: usize) -> Vec<f64> {
    if s == 1 {
        return y.to_vec();
    }
    let pc = cols.div_ceil(s);
    let mut out = Vec::with_capacity(rows * cols * d);
    for r in 0..rows {
        for c in 0..cols {
            let p = (r / s) * pc + c / s;
            out.extend_from_slice(&y[p * d..(p + 1) * d]);
        }
    }
    out
}

fn upsample_backward(dy: &[f64], rows: usize, cols: usize, d: usize, s: usize) -> Vec<f64> {
    if s == 1 {
        return dy.to_vec();
    }
    let (pr, pc) = (rows.div_ceil(s), cols.div_ceil(s));
    let mut out = vec![0.0; pr * pc * d];
    for r in 0..rows {
        for c in 0..cols {
            let p = (r / s) * pc + c / s;
            for (o, &v) in out[p * d..(p + 1) * d].iter_mut().zip(&dy[(r * cols + c) * d..(r * cols + c + 1) * d]) {
                *o += v;
            }
        }
    }
    out
}

fn take_cols(x: &[f64], n: usize, d: usize, c0: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * w);
    for r in 0..n {
        out.extend_from_slice(&x[r * d + c0..r * d + c0 + w]);
    }
    out
}

fn add_cols(dst: &mut [f64], src: &[f64], n: usize, d: usize, c0: usize, w: usize) {
    for r in 0..n {
        for (o, &v) in dst[r * d + c0..r * d + c0 + w].iter_mut().zip(&src[r * w..(r + 1) * w]) {
            *o += v;
        }
    }
}

/// Parameters of one pre-norm multi-scale attention sub-block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlockParams {
    pub norm: LayerNorm,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub out: Linear,
    /// Per-scale channel gains applied before the scales are averaged.
    pub scale_gain: Tensor,
}

impl AttentionBlockParams {
    pub fn new(cfg: &AttentionConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let std = (2.0 / d as f64).sqrt();
        Self {
            norm: LayerNorm::new(d),
            wq: Tensor::normal(&[d, d], std, rng),
            wk: Tensor::normal(&[d, d], std, rng),
            wv: Tensor::normal(&[d, d], std, rng),
            out: Linear::new(d, d, std, rng),
            scale_gain: Tensor::filled(&[cfg.scales.len(), d], 1.0),
        }
    }
}

impl ParamTree for AttentionBlockParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.norm.visit(&join(prefix, "norm"), f);
        f(join(prefix, "wq"), &self.wq);
        f(join(prefix, "wk"), &self.wk);
        f(join(prefix, "wv"), &self.wv);
        self.out.visit(&join(prefix, "out"), f);
        f(join(prefix, "scale_gain"), &self.scale_gain);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        f(join(prefix, "wq"), &mut self.wq);
        f(join(prefix, "wk"), &mut self.wk);
        f(join(prefix, "wv"), &mut self.wv);
        self.out.visit_mut(&join(prefix, "out"), f);
        f(join(prefix, "scale_gain"), &mut self.scale_gain);
    }
}

enum KernelCache {
    Relu(LinearAttentionCache<f64>),
    Softmax(SoftmaxCache),
}

struct HeadScaleCache {
    kernel: KernelCache,
    up: Vec<f64>,
}

pub struct AttentionCache {
    norm: LayerNormCache,
    xn: Vec<f64>,
    heads: Vec<Vec<HeadScaleCache>>,
    concat: Vec<f64>,
    rows: usize,
    cols: usize,
}

/// Forward of one attention sub-block over a `rows×cols` grid, including
/// pre-norm and the residual connection.
pub fn attention_block_forward(
    p: &AttentionBlockParams,
    cfg: &AttentionConfig,
    x: &[f64],
    rows: usize,
    cols: usize,
) -> Result<(Vec<f64>, AttentionCache)> {
    cfg.validate()?;
    cfg.check_grid(rows, cols)?;
    let (n, d, dh) = (rows * cols, cfg.d_model, cfg.head_dim());
    if x.len() != n * d {
        return Err(Error::Shape(format!("{} values for {rows}x{cols}x{d}", x.len())));
    }
    let (xn, norm) = p.norm.forward(x, n);
    let q = matmul(n, d, d, &xn, false, &p.wq.data, false);
    let k = matmul(n, d, d, &xn, false, &p.wk.data, false);
    let v = matmul(n, d, d, &xn, false, &p.wv.data, false);
    let inv_s = 1.0 / cfg.scales.len() as f64;
    let mut concat = vec![0.0; n * d];
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (qh, kh, vh) = (
            take_cols(&q, n, d, h * dh, dh),
            take_cols(&k, n, d, h * dh, dh),
            take_cols(&v, n, d, h * dh, dh),
        );
        let mut per_scale = Vec::with_capacity(cfg.scales.len());
        let mut head_out = vec![0.0; n * dh];
        for (si, &s) in cfg.scales.iter().enumerate() {
            let (qp, pr, pc) = avg_pool(&qh, rows, cols, dh, s);
            let (kp, _, _) = avg_pool(&kh, rows, cols, dh, s);
            let (vp, _, _) = avg_pool(&vh, rows, cols, dh, s);
            let m = pr * pc;
            let (a, kernel) = match cfg.kind {
                AttentionKind::Relu => {
                    let c = linear_attention_forward(&qp, &kp, &vp, m, m, dh, dh, cfg.epsilon);
                    (c.out.clone(), KernelCache::Relu(c))
                }
                AttentionKind::Mhsa => {
                    let (o, c) = softmax_attention_forward(&qp, &kp, &vp, m, dh, dh);
                    (o, KernelCache::Softmax(c))
                }
            };
            let up = upsample_nearest(&a, rows, cols, dh, s);
            let gain = &p.scale_gain.data[si * d + h * dh..si * d + (h + 1) * dh];
            for r in 0..n {
                for c in 0..dh {
                    head_out[r * dh + c] += inv_s * gain[c] * up[r * dh + c];
                }
            }
            per_scale.push(HeadScaleCache { kernel, up });
        }
        add_cols(&mut concat, &head_out, n, d, h * dh, dh);
        heads.push(per_scale);
    }
    let mut y = p.out.forward(&concat, n);
    for (o, &xi) in y.iter_mut().zip(x) {
        *o += xi;
    }
    check_finite("attention block output", &y)?;
    Ok((
        y,
        AttentionCache {
            norm,
            xn,
            heads,
            concat,
            rows,
            cols,
        },
    ))
}

pub fn attention_block_backward(
    p: &AttentionBlockParams,
    cfg: &AttentionConfig,
    cache: &AttentionCache,
    dy: &[f64],
    grad: &mut AttentionBlockParams,
) -> Vec<f64> {
    let (rows, cols) = (cache.rows, cache.cols);
    let (n, d, dh) = (rows * cols, cfg.d_model, cfg.head_dim());
    let inv_s = 1.0 / cfg.scales.len() as f64;
    let dconcat = p.out.backward(&cache.concat, dy, n, &mut grad.out);
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    for h in 0..cfg.heads {
        let dhead = take_cols(&dconcat, n, d, h * dh, dh);
        let mut dqh = vec![0.0; n * dh];
        let mut dkh = vec![0.0; n * dh];
        let mut dvh = vec![0.0; n * dh];
        for (si, &s) in cfg.scales.iter().enumerate() {
            let hs = &cache.heads[h][si];
            let goff = si * d + h * dh;
            let mut dup = vec![0.0; n * dh];
            for r in 0..n {
                for c in 0..dh {
                    let g = dhead[r * dh + c] * inv_s;
                    grad.scale_gain.data[goff + c] += g * hs.up[r * dh + c];
                    dup[r * dh + c] = g * p.scale_gain.data[goff + c];
                }
            }
            let da = upsample_backward(&dup, rows, cols, dh, s);
            let (dqp, dkp, dvp) = match &hs.kernel {
                KernelCache::Relu(c) => linear_attention_backward(c, &da),
                KernelCache::Softmax(c) => softmax_attention_backward(c, &da),
            };
            for (acc, g) in [(&mut dqh, dqp), (&mut dkh, dkp), (&mut dvh, dvp)] {
                for (a, b) in acc.iter_mut().zip(avg_pool_backward(&g, rows, cols, dh, s)) {
                    *a += b;
                }
            }
        }
        add_cols(&mut dq, &dqh, n, d, h * dh, dh);
        add_cols(&mut dk, &dkh, n, d, h * dh, dh);
        add_cols(&mut dv, &dvh, n, d, h * dh, dh);
    }
    matmul_acc(d, n, d, &cache.xn, true, &dq, false, &mut grad.wq.data);
    matmul_acc(d, n, d, &cache.xn, true, &dk, false, &mut grad.wk.data);
    matmul_acc(d, n, d, &cache.xn, true, &dv, false, &mut grad.wv.data);
    let mut dxn = matmul(n, d, d, &dq, false, &p.wq.data, true);
    matmul_acc(n, d, d, &dk, false, &p.wk.data, true, &mut dxn);
    matmul_acc(n, d, d, &dv, false, &p.wv.data, true, &mut dxn);
    let mut dx = p.norm.backward(&cache.norm, &dxn, n, &mut grad.norm);
    for (a, &b) in dx.iter_mut().zip(dy) {
        *a += b;
    }
    dx
}

/// Multi-scale attention sub-block without caches.
pub fn multi_scale_attention(
    tokens: &[f64],
    rows: usize,
    cols: usize,
    p: &AttentionBlockParams,
    cfg: &AttentionConfig,
) -> Result<Vec<f64>> {
    attention_block_forward(p, cfg, tokens, rows, cols).map(|r| r.0)
}

/// Pre-norm two-layer MLP with a `4·d` hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfnParams {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FfnParams {
    pub fn new(d: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm: LayerNorm::new(d),
            fc1: Linear::new(d, 4 * d, (2.0 / d as f64).sqrt(), rng),
            fc2: Linear::new(4 * d, d, (2.0 / (4 * d) as f64).sqrt(), rng),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            norm: LayerNorm::new(d),
            fc1: Linear::zeros(d, 4 * d),
            fc2: Linear::zeros(4 * d, d),
        }
    }
}

impl ParamTree for FfnParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

pub struct FfnCache {
    norm: LayerNormCache,
    xn: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    n: usize,
}

pub fn ffn_forward(p: &FfnParams, x: &[f64], n: usize) -> (Vec<f64>, FfnCache) {
    let (xn, norm) = p.norm.forward(x, n);
    let pre = p.fc1.forward(&xn, n);
    let act: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
    let mut y = p.fc2.forward(&act, n);
    for (o, &xi) in y.iter_mut().zip(x) {
        *o += xi;
    }
    (y, FfnCache { norm, xn, pre, act, n })
}

pub fn ffn_backward(p: &FfnParams, cache: &FfnCache, dy: &[f64], grad: &mut FfnParams) -> Vec<f64> {
    let n = cache.n;
    let mut dact = p.fc2.backward(&cache.act, dy, n, &mut grad.fc2);
    crate::nn::relu_backward(&cache.pre, &mut dact);
    let dxn = p.fc1.backward(&cache.xn, &dact, n, &mut grad.fc1);
    let mut dx = p.norm.backward(&cache.norm, &dxn, n, &mut grad.norm);
    for (a, &b) in dx.iter_mut().zip(dy) {
        *a += b;
    }
    dx
}

/// Per-token feed-forward block with residual.
pub fn ffn(tokens: &[f64], n: usize, p: &FfnParams) -> Vec<f64> {
    ffn_forward(p, tokens, n).0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub attn: AttentionBlockParams,
    pub ffn: FfnParams,
}

impl BlockParams {
    pub fn new(cfg: &AttentionConfig, rng: &mut impl Rng) -> Self {
        Self {
            attn: AttentionBlockParams::new(cfg, rng),
            ffn: FfnParams::new(cfg.d_model, rng),
        }
    }
}

impl ParamTree for BlockParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.attn.visit(&join(prefix, "attn"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

pub struct BlockCache {
    attn: AttentionCache,
    ffn: FfnCache,
}

pub fn block_forward(p: &BlockParams, cfg: &AttentionConfig, x: &[f64], rows: usize, cols: usize) -> Result<(Vec<f64>, BlockCache)> {
    let (a, attn) = attention_block_forward(&p.attn, cfg, x, rows, cols)?;
    let (y, ffn) = ffn_forward(&p.ffn, &a, rows * cols);
    Ok((y, BlockCache { attn, ffn }))
}

pub fn block_backward(p: &BlockParams, cfg: &AttentionConfig, cache: &BlockCache, dy: &[f64], grad: &mut BlockParams) -> Vec<f64> {
    let da = ffn_backward(&p.ffn, &cache.ffn, dy, &mut grad.ffn);
    attention_block_backward(&p.attn, cfg, &cache.attn, &da, &mut grad.attn)
}

/// Concatenates each 2×2 cell group (zero beyond the edge) into one
/// `4·d` row of the half-resolution grid.
pub fn space_to_depth(x: &[f64], rows: usize, cols: usize, d: usize) -> (Vec<f64>, usize, usize) {
    let (hr, hc) = (rows.div_ceil(2), cols.div_ceil(2));
    let mut out = vec![0.0; hr * hc * 4 * d];
    for i in 0..hr {
        for j in 0..hc {
            for (slot, (di, dj)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                let (r, c) = (2 * i + di, 2 * j + dj);
                if r < rows && c < cols {
                    let dst = (i * hc + j) * 4 * d + slot * d;
                    out[dst..dst + d].copy_from_slice(&x[(r * cols + c) * d..(r * cols + c + 1) * d]);
                }
            }
        }
    }
    (out, hr, hc)
}

fn space_to_depth_backward(dy: &[f64], rows: usize, cols: usize, d: usize) -> Vec<f64> {
    let hc = cols.div_ceil(2);
    let mut dx = vec![0.0; rows * cols * d];
    for r in 0..rows {
        for c in 0..cols {
            let slot = 2 * (r % 2) + c % 2;
            let src = ((r / 2) * hc + c / 2) * 4 * d + slot * d;
            dx[(r * cols + c) * d..(r * cols + c + 1) * d].copy_from_slice(&dy[src..src + d]);
        }
    }
    dx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub attention: AttentionConfig,
    pub stage1_blocks: usize,
    pub stage2_blocks: usize,
    /// Largest token-grid side the positional tables cover.
    pub max_grid: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            attention: AttentionConfig::default(),
            stage1_blocks: 2,
            stage2_blocks: 2,
            max_grid: 256,
        }
    }
}

impl BackboneConfig {
    pub fn stage2_attention(&self) -> AttentionConfig {
        self.attention.with_width(2 * self.attention.d_model)
    }

    pub fn output_dim(&self) -> usize {
        2 * self.attention.d_model
    }
}

/// Learned tensors of the two-stage backbone, downstream of token embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerParams {
    pub pos_row: Tensor,
    pub pos_col: Tensor,
    pub stage1: Vec<BlockParams>,
    pub down: Linear,
    pub stage2: Vec<BlockParams>,
}

impl TransformerParams {
    pub fn new(cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.attention.d_model;
        let a2 = cfg.stage2_attention();
        Self {
            pos_row: Tensor::normal(&[cfg.max_grid, d], 0.02, rng),
            pos_col: Tensor::normal(&[cfg.max_grid, d], 0.02, rng),
            stage1: (0..cfg.stage1_blocks).map(|_| BlockParams::new(&cfg.attention, rng)).collect(),
            down: Linear::new(4 * d, 2 * d, (2.0 / (4 * d) as f64).sqrt(), rng),
            stage2: (0..cfg.stage2_blocks).map(|_| BlockParams::new(&a2, rng)).collect(),
        }
    }
}

impl ParamTree for TransformerParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "pos_row"), &self.pos_row);
        f(join(prefix, "pos_col"), &self.pos_col);
        for (i, b) in self.stage1.iter().enumerate() {
            b.visit(&join(prefix, &format!("stage1.{i}")), f);
        }
        self.down.visit(&join(prefix, "down"), f);
        for (i, b) in self.stage2.iter().enumerate() {
            b.visit(&join(prefix, &format!("stage2.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "pos_row"), &mut self.pos_row);
        f(join(prefix, "pos_col"), &mut self.pos_col);
        for (i, b) in self.stage1.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("stage1.{i}")), f);
        }
        self.down.visit_mut(&join(prefix, "down"), f);
        for (i, b) in self.stage2.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("stage2.{i}")), f);
        }
    }
}

pub struct BackboneCache {
    rows: usize,
    cols: usize,
    stage1: Vec<BlockCache>,
    s2d: Vec<f64>,
    half_rows: usize,
    half_cols: usize,
    stage2: Vec<BlockCache>,
}

/// Feature grid at half token resolution with `2·d_model` channels.
pub struct BackboneOutput {
    pub rows: usize,
    pub cols: usize,
    pub features: Vec<f64>,
}

/// Runs the backbone on an already embedded `rows×cols×d_model` grid.
/// Without `keep_cache` the returned cache cannot be used for a backward
/// pass, but peak memory stays at one block.
pub fn backbone_forward_embedded(
    p: &TransformerParams,
    cfg: &BackboneConfig,
    embedded: &[f64],
    rows: usize,
    cols: usize,
    keep_cache: bool,
) -> Result<(BackboneOutput, BackboneCache)> {
    let d = cfg.attention.d_model;
    if rows > cfg.max_grid || cols > cfg.max_grid {
        return Err(Error::Shape(format!(
            "{rows}x{cols} token grid exceeds positional table size {}",
            cfg.max_grid
        )));
    }
    if embedded.len() != rows * cols * d {
        return Err(Error::Shape("embedded grid size mismatch".into()));
    }
    let mut x = embedded.to_vec();
    for r in 0..rows {
        for c in 0..cols {
            let o = &mut x[(r * cols + c) * d..(r * cols + c + 1) * d];
            let pr = &p.pos_row.data[r * d..(r + 1) * d];
            let pc = &p.pos_col.data[c * d..(c + 1) * d];
            for k in 0..d {
                o[k] += pr[k] + pc[k];
            }
        }
    }
    let mut stage1 = Vec::with_capacity(p.stage1.len());
    for b in &p.stage1 {
        let (y, c) = block_forward(b, &cfg.attention, &x, rows, cols)?;
        if keep_cache {
            stage1.push(c);
        }
        x = y;
    }
    let (s2d, hr, hc) = space_to_depth(&x, rows, cols, d);
    let mut x = p.down.forward(&s2d, hr * hc);
    let a2 = cfg.stage2_attention();
    let mut stage2 = Vec::with_capacity(p.stage2.len());
    for b in &p.stage2 {
        let (y, c) = block_forward(b, &a2, &x, hr, hc)?;
        if keep_cache {
            stage2.push(c);
        }
        x = y;
    }
    Ok((
        BackboneOutput {
            rows: hr,
            cols: hc,
            features: x,
        },
        BackboneCache {
            rows,
            cols,
            stage1,
            s2d: if keep_cache { s2d } else { Vec::new() },
            half_rows: hr,
            half_cols: hc,
            stage2,
        },
    ))
}

/// Gradient of the embedded input for an upstream gradient on the features.
pub fn backbone_backward(
    p: &TransformerParams,
    cfg: &BackboneConfig,
    cache: &BackboneCache,
    dfeatures: &[f64],
    grad: &mut TransformerParams,
) -> Vec<f64> {
    let d = cfg.attention.d_model;
    let a2 = cfg.stage2_attention();
    let mut g = dfeatures.to_vec();
    for (i, b) in p.stage2.iter().enumerate().rev() {
        g = block_backward(b, &a2, &cache.stage2[i], &g, &mut grad.stage2[i]);
    }
    let ds2d = p.down.backward(&cache.s2d, &g, cache.half_rows * cache.half_cols, &mut grad.down);
    let mut g = space_to_depth_backward(&ds2d, cache.rows, cache.cols, d);
    for (i, b) in p.stage1.iter().enumerate().rev() {
        g = block_backward(b, &cfg.attention, &cache.stage1[i], &g, &mut grad.stage1[i]);
    }
    for r in 0..cache.rows {
        for c in 0..cache.cols {
            let gi = &g[(r * cache.cols + c) * d..(r * cache.cols + c + 1) * d];
            for k in 0..d {
                grad.pos_row.data[r * d + k] += gi[k];
                grad.pos_col.data[c * d + k] += gi[k];
            }
        }
    }
    g
}

/// Looks up `embed` rows for every token index.
pub fn embed_tokens(tg: &TokenGrid, embed: &Tensor) -> Result<Vec<f64>> {
    let (k, d) = (embed.shape[0], embed.shape[1]);
    let mut out = Vec::with_capacity(tg.len() * d);
    for &i in &tg.indices {
        if i >= k {
            return Err(Error::Token { index: i, size: k });
        }
        out.extend_from_slice(&embed.data[i * d..(i + 1) * d]);
    }
    Ok(out)
}

/// Embeds token indices with `embed` (`K × d_model`) and runs the backbone.
pub fn backbone_forward(tg: &TokenGrid, embed: &Tensor, p: &TransformerParams, cfg: &BackboneConfig) -> Result<BackboneOutput> {
    let x = embed_tokens(tg, embed)?;
    backbone_forward_embedded(p, cfg, &x, tg.rows, tg.cols, false).map(|r| r.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn randn(n: usize, seed: u64) -> Vec<f64> {
        Tensor::normal(&[n], 1.0, &mut rng::stream(seed, 9)).data
    }

    /// Direct-sum kernel attention: A_i = Σ_j w_ij V_j / Σ_j w_ij with
    /// w_ij = ReLU(Q_i)·ReLU(K_j).
    fn quadratic(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize, eps: f64) -> Vec<f64> {
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let mut den = 0.0;
            for j in 0..n {
                let w: f64 = (0..d).map(|c| q[i * d + c].max(0.0) * k[j * d + c].max(0.0)).sum();
                den += w;
                for c in 0..d {
                    out[i * d + c] += w * v[j * d + c];
                }
            }
            for c in 0..d {
                out[i * d + c] = if den + eps > 0.0 { out[i * d + c] / (den + eps) } else { 0.0 };
            }
        }
        out
    }

    #[test]
    fn single_token_normalisation_cancels() {
        let q = [1.0, 0.0, 0.0];
        let v = [0.3, -2.0, 5.0];
        let a = relu_linear_attention(&q, &q, &v, 1, 3, 3, 0.0).unwrap();
        assert_eq!(a, v.to_vec());
    }

    #[test]
    fn nonpositive_queries_give_zero() {
        let q = vec![-1.0; 8];
        let k = randn(8, 1);
        let v = randn(8, 2);
        let a = relu_linear_attention(&q, &k, &v, 2, 4, 4, 1e-6).unwrap();
        assert!(a.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matches_quadratic_form() {
        let (n, d) = (8, 4);
        let (q, k, v) = (randn(n * d, 3), randn(n * d, 4), randn(n * d, 5));
        let a = relu_linear_attention(&q, &k, &v, n, d, d, 1e-6).unwrap();
        let b = quadratic(&q, &k, &v, n, d, 1e-6);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut q = randn(8, 3);
        q[2] = f64::INFINITY;
        let k = randn(8, 4);
        assert!(matches!(relu_linear_attention(&q, &k, &k, 2, 4, 4, 1e-6), Err(Error::Numerical(_))));
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let x: Vec<f64> = (0..5 * 3).map(|v| v as f64).collect();
        let (p, pr, pc) = avg_pool(&x, 5, 3, 1, 2);
        assert_eq!((pr, pc), (3, 2));
        assert_eq!(p[0], (0.0 + 1.0 + 3.0 + 4.0) / 4.0);
        // bottom-right window holds a single cell
        assert_eq!(p[5], 14.0);
        let u = upsample_nearest(&p, 5, 3, 1, 2);
        assert_eq!(u.len(), 15);
        assert_eq!(u[4], p[0]);
    }

    fn small_cfg(scales: Vec<usize>, heads: usize) -> AttentionConfig {
        AttentionConfig {
            d_model: 8,
            heads,
            scales,
            epsilon: 1e-6,
            kind: AttentionKind::Relu,
        }
    }

    #[test]
    fn single_scale_single_head_reduces_to_linear_attention() {
        let cfg = small_cfg(vec![1], 1);
        let p = AttentionBlockParams::new(&cfg, &mut rng::stream(1, 0));
        let (rows, cols, d) = (3, 4, 8);
        let x = randn(rows * cols * d, 7);
        let y = multi_scale_attention(&x, rows, cols, &p, &cfg).unwrap();
        let (xn, _) = p.norm.forward(&x, rows * cols);
        let n = rows * cols;
        let q = matmul(n, d, d, &xn, false, &p.wq.data, false);
        let k = matmul(n, d, d, &xn, false, &p.wk.data, false);
        let v = matmul(n, d, d, &xn, false, &p.wv.data, false);
        let a = relu_linear_attention(&q, &k, &v, n, d, d, 1e-6).unwrap();
        let mut expect = p.out.forward(&a, n);
        expect.iter_mut().zip(&x).for_each(|(e, xi)| *e += xi);
        for (a, b) in y.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_grid_gives_constant_attention() {
        let cfg = small_cfg(vec![1, 2], 2);
        let p = AttentionBlockParams::new(&cfg, &mut rng::stream(2, 0));
        let tok = randn(8, 3);
        let x: Vec<f64> = (0..16).flat_map(|_| tok.clone()).collect();
        let y = multi_scale_attention(&x, 4, 4, &p, &cfg).unwrap();
        for row in y.chunks_exact(8) {
            for (a, b) in row.iter().zip(&y[..8]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scale_larger_than_grid_is_config_error() {
        let cfg = small_cfg(vec![1, 4], 1);
        let p = AttentionBlockParams::new(&cfg, &mut rng::stream(2, 0));
        let x = randn(3 * 8 * 8, 1);
        assert!(matches!(multi_scale_attention(&x, 3, 8, &p, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn ffn_zero_weights_is_identity_and_matches_hand_arithmetic() {
        let x = randn(3 * 4, 4);
        let p = FfnParams::zeros(4);
        assert_eq!(ffn(&x, 3, &p), x);

        let mut r = rng::stream(5, 0);
        let p = FfnParams::new(4, &mut r);
        let t = randn(4, 6);
        let y = ffn(&t, 1, &p);
        // Hand composition for a single token.
        let mean = t.iter().sum::<f64>() / 4.0;
        let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        let xn: Vec<f64> = t.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect();
        let mut h = vec![0.0; 16];
        for j in 0..16 {
            h[j] = p.fc1.bias.data[j] + (0..4).map(|i| xn[i] * p.fc1.weight.data[i * 16 + j]).sum::<f64>();
            h[j] = h[j].max(0.0);
        }
        for c in 0..4 {
            let o = p.fc2.bias.data[c] + (0..16).map(|j| h[j] * p.fc2.weight.data[j * 4 + c]).sum::<f64>();
            assert!((y[c] - (t[c] + o)).abs() < 1e-12);
        }
    }

    #[test]
    fn backbone_shape_contract() {
        let cfg = BackboneConfig {
            attention: small_cfg(vec![1, 2], 2),
            stage1_blocks: 1,
            stage2_blocks: 1,
            max_grid: 16,
        };
        let mut r = rng::stream(8, 0);
        let p = TransformerParams::new(&cfg, &mut r);
        let embed = Tensor::normal(&[5, 8], 0.02, &mut r);
        for (rows, cols) in [(4, 4), (5, 7), (6, 4)] {
            let tg = crate::vq::TokenGrid {
                rows,
                cols,
                depth: 1,
                indices: (0..rows * cols).map(|i| i % 5).collect(),
                quantized: vec![0.0; rows * cols],
            };
            let out = backbone_forward(&tg, &embed, &p, &cfg).unwrap();
            assert_eq!((out.rows, out.cols), (rows.div_ceil(2), cols.div_ceil(2)));
            assert_eq!(out.features.len(), out.rows * out.cols * 16);
        }
        let bad = crate::vq::TokenGrid {
            rows: 2,
            cols: 2,
            depth: 1,
            indices: vec![0, 1, 5, 2],
            quantized: vec![0.0; 4],
        };
        assert!(matches!(backbone_forward(&bad, &embed, &p, &cfg), Err(Error::Token { index: 5, .. })));
    }

    #[test]
    fn embedding_permutation_invariance() {
        let cfg = BackboneConfig {
            attention: small_cfg(vec![1, 2], 2),
            stage1_blocks: 1,
            stage2_blocks: 1,
            max_grid: 8,
        };
        let mut r = rng::stream(9, 0);
        let p = TransformerParams::new(&cfg, &mut r);
        let embed = Tensor::normal(&[6, 8], 0.5, &mut r);
        let perm = [3, 0, 5, 1, 4, 2];
        let mut permuted = embed.clone();
        for (old, &new) in perm.iter().enumerate() {
            permuted.data[new * 8..(new + 1) * 8].copy_from_slice(&embed.data[old * 8..(old + 1) * 8]);
        }
        let idx: Vec<usize> = (0..16).map(|i| (i * 7) % 6).collect();
        let mk = |indices: Vec<usize>| crate::vq::TokenGrid {
            rows: 4,
            cols: 4,
            depth: 1,
            indices,
            quantized: vec![0.0; 16],
        };
        let a = backbone_forward(&mk(idx.clone()), &embed, &p, &cfg).unwrap();
        let b = backbone_forward(&mk(idx.iter().map(|&i| perm[i]).collect()), &permuted, &p, &cfg).unwrap();
        assert_eq!(a.features, b.features);
    }
}
