//! The attention stack against straight-line reference code: naive loops
//! for every layer, the public single-scale kernel for attention itself,
//! and explicit pooling and upsampling written from their definitions.

use holoslide::attention::{
    attention_block_forward, backbone_forward_embedded, relu_linear_attention, AttentionBlockParams, AttentionConfig,
    BackboneConfig, BlockParams, FfnParams, TransformerParams,
};
use holoslide::nn::{Linear, ParamTree, LAYER_NORM_EPS};
use holoslide::rng;
use proptest::prelude::*;
use rand::Rng;

fn randomize(p: &mut impl ParamTree, seed: u64, amp: f64) {
    let mut r = rng::stream(seed, 5);
    p.visit_mut("", &mut |_, t| {
        for v in t.data.iter_mut() {
            *v += r.random_range(-amp..amp);
        }
    });
}

fn random_vec(len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, 6);
    (0..len).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn layer_norm(x: &[f64], d: usize, gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for c in 0..d {
            out.push((row[c] - mean) * inv * gain[c] + bias[c]);
        }
    }
    out
}

/// `x W`, with `W` stored `din × dout`.
fn mat(x: &[f64], din: usize, w: &[f64], dout: usize) -> Vec<f64> {
    let n = x.len() / din;
    let mut out = vec![0.0; n * dout];
    for i in 0..n {
        for o in 0..dout {
            out[i * dout + o] = (0..din).map(|k| x[i * din + k] * w[k * dout + o]).sum();
        }
    }
    out
}

fn affine(x: &[f64], l: &Linear) -> Vec<f64> {
    let (din, dout) = (l.weight.shape[0], l.weight.shape[1]);
    let mut y = mat(x, din, &l.weight.data, dout);
    for row in y.chunks_mut(dout) {
        for (v, b) in row.iter_mut().zip(&l.bias.data) {
            *v += b;
        }
    }
    y
}

/// Mean of every `s×s` window (clipped at the grid edge), by grouping
/// tokens on `(r / s, c / s)`.
fn pool(x: &[f64], rows: usize, cols: usize, d: usize, s: usize) -> (Vec<f64>, usize, usize) {
    let (pr, pc) = (rows.div_ceil(s), cols.div_ceil(s));
    let mut sum = vec![0.0; pr * pc * d];
    let mut count = vec![0usize; pr * pc];
    for r in 0..rows {
        for c in 0..cols {
            let cell = (r / s) * pc + c / s;
            count[cell] += 1;
            for k in 0..d {
                sum[cell * d + k] += x[(r * cols + c) * d + k];
            }
        }
    }
    for (cell, n) in count.iter().enumerate() {
        for k in 0..d {
            sum[cell * d + k] /= *n as f64;
        }
    }
    (sum, pr, pc)
}

fn upsample(y: &[f64], rows: usize, cols: usize, d: usize, s: usize) -> Vec<f64> {
    let pc = cols.div_ceil(s);
    let mut out = vec![0.0; rows * cols * d];
    for r in 0..rows {
        for c in 0..cols {
            let cell = (r / s) * pc + c / s;
            out[(r * cols + c) * d..(r * cols + c + 1) * d].copy_from_slice(&y[cell * d..(cell + 1) * d]);
        }
    }
    out
}

fn columns(x: &[f64], d: usize, start: usize, width: usize) -> Vec<f64> {
    x.chunks(d).flat_map(|row| row[start..start + width].to_vec()).collect()
}

fn attention_ref(p: &AttentionBlockParams, cfg: &AttentionConfig, x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let d = cfg.d_model;
    let dh = d / cfg.heads;
    let xn = layer_norm(x, d, &p.norm.gain.data, &p.norm.bias.data);
    let (q, k, v) = (mat(&xn, d, &p.wq.data, d), mat(&xn, d, &p.wk.data, d), mat(&xn, d, &p.wv.data, d));
    let n = rows * cols;
    let mut merged = vec![0.0; n * d];
    for h in 0..cfg.heads {
        let (qh, kh, vh) = (columns(&q, d, h * dh, dh), columns(&k, d, h * dh, dh), columns(&v, d, h * dh, dh));
        for (si, &s) in cfg.scales.iter().enumerate() {
            let (qp, pr, pc) = pool(&qh, rows, cols, dh, s);
            let (kp, _, _) = pool(&kh, rows, cols, dh, s);
            let (vp, _, _) = pool(&vh, rows, cols, dh, s);
            let a = relu_linear_attention(&qp, &kp, &vp, pr * pc, dh, dh, cfg.epsilon).unwrap();
            let up = upsample(&a, rows, cols, dh, s);
            for t in 0..n {
                for c in 0..dh {
                    let g = p.scale_gain.data[si * d + h * dh + c];
                    merged[t * d + h * dh + c] += g * up[t * dh + c] / cfg.scales.len() as f64;
                }
            }
        }
    }
    let y = affine(&merged, &p.out);
    y.iter().zip(x).map(|(a, b)| a + b).collect()
}

fn ffn_ref(p: &FfnParams, x: &[f64], d: usize) -> Vec<f64> {
    let xn = layer_norm(x, d, &p.norm.gain.data, &p.norm.bias.data);
    let hidden: Vec<f64> = affine(&xn, &p.fc1).into_iter().map(|v| v.max(0.0)).collect();
    let y = affine(&hidden, &p.fc2);
    y.iter().zip(x).map(|(a, b)| a + b).collect()
}

fn block_ref(p: &BlockParams, cfg: &AttentionConfig, x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let a = attention_ref(&p.attn, cfg, x, rows, cols);
    ffn_ref(&p.ffn, &a, cfg.d_model)
}

/// Every 2×2 group of tokens concatenated in row-major order, zeros where
/// the grid is odd.
fn merge_pairs(x: &[f64], rows: usize, cols: usize, d: usize) -> (Vec<f64>, usize, usize) {
    let (hr, hc) = (rows.div_ceil(2), cols.div_ceil(2));
    let mut out = Vec::with_capacity(hr * hc * 4 * d);
    for i in 0..hr {
        for j in 0..hc {
            for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let (r, c) = (2 * i + di, 2 * j + dj);
                if r < rows && c < cols {
                    out.extend_from_slice(&x[(r * cols + c) * d..(r * cols + c + 1) * d]);
                } else {
                    out.extend(std::iter::repeat_n(0.0, d));
                }
            }
        }
    }
    (out, hr, hc)
}

fn backbone_ref(p: &TransformerParams, cfg: &BackboneConfig, e: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let d = cfg.attention.d_model;
    let mut x = e.to_vec();
    for r in 0..rows {
        for c in 0..cols {
            for k in 0..d {
                x[(r * cols + c) * d + k] += p.pos_row.data[r * d + k] + p.pos_col.data[c * d + k];
            }
        }
    }
    for b in &p.stage1 {
        x = block_ref(b, &cfg.attention, &x, rows, cols);
    }
    let (m, hr, hc) = merge_pairs(&x, rows, cols, d);
    let mut x = affine(&m, &p.down);
    let wide = AttentionConfig {
        d_model: 2 * d,
        ..cfg.attention.clone()
    };
    for b in &p.stage2 {
        x = block_ref(b, &wide, &x, hr, hc);
    }
    x
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn small_attention(scales: Vec<usize>) -> AttentionConfig {
    AttentionConfig {
        d_model: 8,
        heads: 2,
        scales,
        epsilon: 1e-6,
        ..Default::default()
    }
}

#[test]
fn two_scale_block_matches_hand_composition_on_8x8() {
    let cfg = small_attention(vec![1, 2]);
    let mut p = AttentionBlockParams::new(&cfg, &mut rng::stream(1, 0));
    randomize(&mut p, 1, 0.3);
    let x = random_vec(64 * 8, 2);
    let (got, _) = attention_block_forward(&p, &cfg, &x, 8, 8).unwrap();
    let want = attention_ref(&p, &cfg, &x, 8, 8);
    assert!(max_abs_diff(&got, &want) < 1e-12, "{}", max_abs_diff(&got, &want));
}

#[test]
fn partial_windows_match_hand_composition() {
    let cfg = small_attention(vec![1, 2, 3]);
    let mut p = AttentionBlockParams::new(&cfg, &mut rng::stream(3, 0));
    randomize(&mut p, 3, 0.3);
    let x = random_vec(7 * 5 * 8, 4);
    let (got, _) = attention_block_forward(&p, &cfg, &x, 7, 5).unwrap();
    assert!(max_abs_diff(&got, &attention_ref(&p, &cfg, &x, 7, 5)) < 1e-12);
}

#[test]
fn backbone_on_16x16_matches_reference_composition() {
    for (rows, cols) in [(16, 16), (15, 13)] {
        let cfg = BackboneConfig {
            attention: small_attention(vec![1, 2, 4]),
            stage1_blocks: 2,
            stage2_blocks: 2,
            max_grid: 16,
        };
        let mut p = TransformerParams::new(&cfg, &mut rng::stream(7, 0));
        randomize(&mut p, 7, 0.2);
        let e = random_vec(rows * cols * 8, 8);
        let (out, _) = backbone_forward_embedded(&p, &cfg, &e, rows, cols, false).unwrap();
        assert_eq!((out.rows, out.cols), (rows.div_ceil(2), cols.div_ceil(2)));
        let want = backbone_ref(&p, &cfg, &e, rows, cols);
        let diff = max_abs_diff(&out.features, &want);
        assert!(diff < 1e-10, "{rows}x{cols}: {diff}");
    }
}

/// `Σ_j (φq_i·φk_j) v_j / (Σ_j φq_i·φk_j + ε)` summed pair by pair.
fn quadratic(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize, dv: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; n * dv];
    for i in 0..n {
        let mut den = eps;
        for j in 0..n {
            let a: f64 = (0..d).map(|c| q[i * d + c].max(0.0) * k[j * d + c].max(0.0)).sum();
            den += a;
            for c in 0..dv {
                out[i * dv + c] += a * v[j * dv + c];
            }
        }
        for c in 0..dv {
            out[i * dv + c] = if den > 0.0 { out[i * dv + c] / den } else { 0.0 };
        }
    }
    out
}

#[test]
fn single_precision_tracks_the_quadratic_form() {
    let mut r = rng::stream(11, 0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (n, d, dv) = (r.random_range(1..=64), r.random_range(1..=16), r.random_range(1..=16));
        let q: Vec<f32> = (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let k: Vec<f32> = (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let v: Vec<f32> = (0..n * dv).map(|_| r.random_range(-1.0..1.0)).collect();
        let got = relu_linear_attention(&q, &k, &v, n, d, dv, 1e-6f32).unwrap();
        let wide = |x: &[f32]| x.iter().map(|&a| a as f64).collect::<Vec<_>>();
        let want = quadratic(&wide(&q), &wide(&k), &wide(&v), n, d, dv, 1e-6);
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((*a as f64 - b).abs() / (1.0 + b.abs()));
        }
    }
    assert!(worst < 1e-4, "{worst}");
}

fn attention_case() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..24, 1usize..8, 1usize..6).prop_flat_map(|(n, d, dv)| {
        (
            Just(n),
            Just(d),
            Just(dv),
            prop::collection::vec(-2.0f64..2.0, n * d),
            prop::collection::vec(-2.0f64..2.0, n * d),
            prop::collection::vec(-2.0f64..2.0, n * dv),
        )
    })
}

proptest! {
    // The kernel is non-negative, so each output is a sub-convex mix of
    // the values: bounded by their range widened to include zero.
    #[test]
    fn outputs_stay_within_value_range((n, d, dv, q, k, v) in attention_case()) {
        let out = relu_linear_attention(&q, &k, &v, n, d, dv, 1e-6).unwrap();
        for c in 0..dv {
            let lo = (0..n).map(|j| v[j * dv + c]).fold(0.0, f64::min);
            let hi = (0..n).map(|j| v[j * dv + c]).fold(0.0, f64::max);
            for i in 0..n {
                let o = out[i * dv + c];
                prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12, "{o} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn key_order_does_not_matter((n, d, dv, q, k, v) in attention_case(), seed in any::<u64>()) {
        let mut order: Vec<usize> = (0..n).collect();
        let mut r = rng::stream(seed, 0);
        for i in (1..n).rev() {
            order.swap(i, r.random_range(0..=i));
        }
        let kp: Vec<f64> = order.iter().flat_map(|&j| k[j * d..(j + 1) * d].to_vec()).collect();
        let vp: Vec<f64> = order.iter().flat_map(|&j| v[j * dv..(j + 1) * dv].to_vec()).collect();
        let a = relu_linear_attention(&q, &k, &v, n, d, dv, 1e-6).unwrap();
        let b = relu_linear_attention(&q, &kp, &vp, n, d, dv, 1e-6).unwrap();
        prop_assert!(max_abs_diff(&a, &b) < 1e-9);
    }
}
