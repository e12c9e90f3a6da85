//! A deliberately naive float64 reference decoder, written independently of
//! the library's kernels: plain loops over vectors, one token at a time.
#![allow(dead_code)]

use lckv::{ModelConfig, ModelWeights, Placement, Tensor};

pub fn vecmat(x: &[f64], w: &Tensor<f64>) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), rows);
    let mut out = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xi * w.data()[i * cols + j];
        }
    }
    out
}

pub fn rms_norm(x: &[f64], gain: &Tensor<f64>, eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = 1.0 / (ms + eps).sqrt();
    x.iter().zip(gain.data()).map(|(v, g)| v * s * g).collect()
}

/// Rotates each head's first half against its second half.
pub fn rope(x: &[f64], pos: usize, head_dim: usize, base: f64) -> Vec<f64> {
    let half = head_dim / 2;
    let mut out = x.to_vec();
    for h in 0..x.len() / head_dim {
        for j in 0..half {
            let theta = pos as f64 * base.powf(-2.0 * j as f64 / head_dim as f64);
            let (a, b) = (x[h * head_dim + j], x[h * head_dim + j + half]);
            out[h * head_dim + j] = a * theta.cos() - b * theta.sin();
            out[h * head_dim + j + half] = a * theta.sin() + b * theta.cos();
        }
    }
    out
}

/// Softmax attention of one query over `keys`; no keys gives zeros.
pub fn attend(cfg: &ModelConfig, q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Vec<f64> {
    let hd = cfg.hidden_size / cfg.n_heads;
    let rep = cfg.n_heads / cfg.n_kv_heads;
    let mut out = vec![0.0; cfg.n_heads * hd];
    if keys.is_empty() {
        return out;
    }
    for h in 0..cfg.n_heads {
        let g = h / rep;
        let qh = &q[h * hd..(h + 1) * hd];
        let scores: Vec<f64> = keys
            .iter()
            .map(|k| qh.iter().zip(&k[g * hd..(g + 1) * hd]).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for (p, v) in e.iter().zip(values) {
            for j in 0..hd {
                out[h * hd + j] += p / z * v[g * hd + j];
            }
        }
    }
    out
}

pub fn warmup_layers(cfg: &ModelConfig) -> Vec<bool> {
    let (l, w) = (cfg.n_layers, cfg.warmup_count);
    (0..l)
        .map(|i| {
            w == l
                || match cfg.placement {
                    Placement::Sandwich => i < w / 2 || i >= l - w / 2,
                    Placement::AllBottom => i < w,
                    Placement::AllTop => i >= l - w,
                }
        })
        .collect()
}

pub struct OracleOutput {
    /// Top block output per token.
    pub hidden: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    /// Condensed (rotated) keys and values per token.
    pub condensed: Vec<(Vec<f64>, Vec<f64>)>,
    /// Per warmup layer, keys and values per token.
    pub warmup: Vec<(usize, Vec<Vec<f64>>, Vec<Vec<f64>>)>,
}

/// Token-by-token forward of one sequence.
pub fn oracle_forward(cfg: &ModelConfig, w: &ModelWeights<f64>, ids: &[u32]) -> OracleOutput {
    let hd = cfg.hidden_size / cfg.n_heads;
    let d = cfg.hidden_size;
    let eps = cfg.rms_norm_eps;
    let warm = warmup_layers(cfg);
    let mut caches: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = vec![(vec![], vec![]); cfg.n_layers];
    let mut condensed: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut hidden = Vec::new();
    let mut logits = Vec::new();
    for (t, &id) in ids.iter().enumerate() {
        let mut h = w.embed.data()[id as usize * d..(id as usize + 1) * d].to_vec();
        for (l, layer) in w.layers.iter().enumerate() {
            let x = rms_norm(&h, &layer.attn_norm, eps);
            let q = rope(&vecmat(&x, &layer.wq), t, hd, cfg.rope_base);
            let a = if warm[l] {
                let k = rope(&vecmat(&x, layer.wk.as_ref().unwrap()), t, hd, cfg.rope_base);
                let v = vecmat(&x, layer.wv.as_ref().unwrap());
                caches[l].0.push(k);
                caches[l].1.push(v);
                attend(cfg, &q, &caches[l].0, &caches[l].1)
            } else {
                let ks: Vec<Vec<f64>> = condensed.iter().map(|c| c.0.clone()).collect();
                let vs: Vec<Vec<f64>> = condensed.iter().map(|c| c.1.clone()).collect();
                attend(cfg, &q, &ks, &vs)
            };
            let o = vecmat(&a, &layer.wo);
            h.iter_mut().zip(&o).for_each(|(x, y)| *x += y);
            let x = rms_norm(&h, &layer.mlp_norm, eps);
            let gate = vecmat(&x, &layer.w_gate);
            let up = vecmat(&x, &layer.w_up);
            let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
            let o = vecmat(&act, &layer.w_down);
            h.iter_mut().zip(&o).for_each(|(x, y)| *x += y);
        }
        if let Some(c) = &w.condensed {
            let x = rms_norm(&h, &c.norm, eps);
            condensed.push((rope(&vecmat(&x, &c.wk), t, hd, cfg.rope_base), vecmat(&x, &c.wv)));
        }
        logits.push(vecmat(&rms_norm(&h, &w.final_norm, eps), &w.lm_head));
        hidden.push(h);
    }
    let warmup = caches.into_iter().enumerate().filter(|(l, _)| warm[*l]).map(|(l, (k, v))| (l, k, v)).collect();
    OracleOutput { hidden, logits, condensed, warmup }
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
