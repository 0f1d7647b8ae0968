//! Naive reference forward pass on `Vec<Vec<f64>>`, written without the
//! library's tensor kernels.
//!
//! Prefix registers are modelled as phantom rows appended after the real
//! tokens: they carry overridden keys/values inside the insertion range, are
//! never queried, never updated and dropped before pooling.

#![allow(dead_code)]

use regcache_core::encoder::{EncoderModel, Pooling};
use regcache_core::tensor::Tensor;

pub type Rows = Vec<Vec<f64>>;

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

fn lin(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    (0..w.rows())
        .map(|o| {
            let mut acc = 0.0;
            for (i, xi) in x.iter().enumerate() {
                acc += xi * w.data()[o * w.cols() + i];
            }
            acc + b.data()[o]
        })
        .collect()
}

fn ln(x: &[f64], g: &Tensor<f64>, b: &Tensor<f64>, eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| {
            let z = if denom == 0.0 { 0.0 } else { (v - mu) / denom };
            z * g.data()[i] + b.data()[i]
        })
        .collect()
}

pub fn embed(m: &EncoderModel<f64>, img: &Tensor<f64>) -> Rows {
    let c = &m.config;
    let (ch, s, p) = (c.channels, c.image_size, c.patch_size);
    let g = s / p;
    let mut rows = Vec::new();
    if let Some(cls) = &m.cls_token {
        rows.push(cls.data().to_vec());
    }
    for py in 0..g {
        for px in 0..g {
            let mut v = Vec::new();
            for k in 0..ch {
                for y in 0..p {
                    for x in 0..p {
                        v.push(img.data()[(k * s + py * p + y) * s + px * p + x]);
                    }
                }
            }
            rows.push(lin(&v, &m.patch_w, &m.patch_b));
        }
    }
    for (t, r) in rows.iter_mut().enumerate() {
        for (j, v) in r.iter_mut().enumerate() {
            *v += m.pos_embed.data()[t * c.width + j];
        }
    }
    if let Some((g, b)) = &m.ln_pre {
        for r in rows.iter_mut() {
            *r = ln(r, g, b, c.layer_norm_eps);
        }
    }
    rows
}

/// One block over `x` plus `phantom` appended rows whose keys/values are `kv`.
pub fn block(m: &EncoderModel<f64>, b: usize, x: &Rows, phantom: Option<(&[f64], &[f64], usize)>) -> Rows {
    let c = &m.config;
    let w = &m.blocks[b];
    let (d, h) = (c.width, c.heads);
    let dh = d / h;
    let eps = c.layer_norm_eps;
    let n = x.len();
    let normed: Rows = x.iter().map(|r| ln(r, &w.ln1_gamma, &w.ln1_beta, eps)).collect();
    let q: Rows = normed.iter().map(|r| lin(r, &w.wq, &w.bq)).collect();
    let mut k: Rows = normed.iter().map(|r| lin(r, &w.wk, &w.bk)).collect();
    let mut v: Rows = normed.iter().map(|r| lin(r, &w.wv, &w.bv)).collect();
    if let Some((pk, pv, tau)) = phantom {
        for _ in 0..tau {
            k.push(pk.to_vec());
            v.push(pv.to_vec());
        }
    }
    let nk = k.len();
    let mut attn = vec![vec![0.0; d]; n];
    for head in 0..h {
        let off = head * dh;
        for i in 0..n {
            let scores: Vec<f64> = (0..nk)
                .map(|j| (0..dh).map(|t| q[i][off + t] * k[j][off + t]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..dh {
                attn[i][off + t] = (0..nk).map(|j| e[j] / z * v[j][off + t]).sum();
            }
        }
    }
    let mut out = x.clone();
    for i in 0..n {
        let o = lin(&attn[i], &w.wo, &w.bo);
        for j in 0..d {
            out[i][j] += o[j];
        }
        let hdn = ln(&out[i], &w.ln2_gamma, &w.ln2_beta, eps);
        let f: Vec<f64> = lin(&hdn, &w.fc1_w, &w.fc1_b)
            .into_iter()
            .map(|u| 0.5 * u * (1.0 + erf(u / std::f64::consts::SQRT_2)))
            .collect();
        let y = lin(&f, &w.fc2_w, &w.fc2_b);
        for j in 0..d {
            out[i][j] += y[j];
        }
    }
    out
}

pub fn pool(m: &EncoderModel<f64>, x: &Rows, cls_present: bool) -> Vec<f64> {
    let c = &m.config;
    let normed: Rows = x
        .iter()
        .map(|r| ln(r, &m.ln_final_gamma, &m.ln_final_beta, c.layer_norm_eps))
        .collect();
    let pooled = match c.pooling {
        Pooling::Cls => normed[0].clone(),
        Pooling::Mean => {
            let start = usize::from(cls_present);
            let rows = &normed[start..];
            (0..c.width)
                .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64)
                .collect()
        }
    };
    match &m.head_w {
        Some(hw) => lin(&pooled, hw, &Tensor::zeros(&[hw.rows()])),
        None => pooled,
    }
}

/// Features with `tau` phantom registers appended from block `start` on.
pub fn append_forward(
    m: &EncoderModel<f64>,
    img: &Tensor<f64>,
    start: usize,
    kv: &[(Tensor<f64>, Tensor<f64>)],
    tau: usize,
) -> Vec<f64> {
    let mut x = embed(m, img);
    for b in 0..m.config.depth {
        let ph = if b >= start && b < start + kv.len() {
            let (k, v) = &kv[b - start];
            Some((k.data(), v.data(), tau))
        } else {
            None
        };
        x = block(m, b, &x, ph);
    }
    pool(m, &x, m.config.has_cls())
}

/// Features after physically removing rows `removed` at the input of `at`.
pub fn rerun_without(m: &EncoderModel<f64>, img: &Tensor<f64>, at: usize, removed: &[usize]) -> Vec<f64> {
    let mut x = embed(m, img);
    for b in 0..m.config.depth {
        if b == at {
            x = x
                .into_iter()
                .enumerate()
                .filter(|(i, _)| !removed.contains(i))
                .map(|(_, r)| r)
                .collect();
        }
        x = block(m, b, &x, None);
    }
    let cls_present = m.config.has_cls() && !removed.contains(&0);
    pool(m, &x, cls_present)
}

/// Residual rows entering block `at` in a plain pass.
pub fn block_input(m: &EncoderModel<f64>, img: &Tensor<f64>, at: usize) -> Rows {
    let mut x = embed(m, img);
    for b in 0..at {
        x = block(m, b, &x, None);
    }
    x
}

/// Full-sort deletion oracle: stable descending sort of ℓ∞ norms, lowest index first on ties.
pub fn deletion_by_sort(x: &Rows, k: usize, protect: &[usize]) -> Vec<usize> {
    let mut idx: Vec<(usize, f64)> = x
        .iter()
        .enumerate()
        .filter(|(i, _)| !protect.contains(i))
        .map(|(i, r)| (i, r.iter().fold(0.0f64, |a, v| a.max(v.abs()))))
        .collect();
    idx.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let mut out: Vec<usize> = idx.into_iter().take(k).map(|(i, _)| i).collect();
    out.sort_unstable();
    out
}

/// Random config within L ≤ 4, d ≤ 32, n ≤ 10 tokens.
pub fn random_tiny_config(rng: &mut impl rand::Rng) -> regcache_core::EncoderConfig {
    let heads = [1, 2, 4][rng.gen_range(0..3)];
    let width = heads * rng.gen_range(1..=32 / heads).max(2).min(32 / heads);
    let grid = rng.gen_range(1..=3);
    let patch = rng.gen_range(1..=2);
    let pooling = if rng.gen_bool(0.5) { Pooling::Cls } else { Pooling::Mean };
    let cls_token = match pooling {
        Pooling::Cls => None,
        Pooling::Mean => Some(rng.gen_bool(0.5)),
    };
    regcache_core::EncoderConfig {
        depth: rng.gen_range(1..=4),
        width,
        heads,
        mlp_hidden: rng.gen_range(2..=48),
        patch_size: patch,
        image_size: grid * patch,
        channels: rng.gen_range(1..=3),
        pooling,
        cls_token,
        head_dim: if rng.gen_bool(0.3) {
            Some(rng.gen_range(1..=8))
        } else {
            None
        },
        layer_norm_eps: 1e-6,
        pre_norm: rng.gen_bool(0.3),
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
