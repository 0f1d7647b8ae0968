//! Synthetic encoders and images.
//!
//! [`planted_model`] builds a small cls-pooled encoder whose only flat
//! background patch turns into an attention sink with a massive activation:
//!
//! * patch embedding dim [`BG_DIM`] measures patch brightness, dim
//!   [`ZERO_DIM`] fires on zeroed (masked) pixels;
//! * block 0 MLP writes zeroed patches into the sink direction [`SINK_DIM`];
//! * block 2 MLP writes the bright background patch into [`SINK_DIM`];
//! * block [`PLANTED_BLOCK`] has one fc1 unit gated on the normalized sink
//!   direction, and the fc2 row of [`SINK_DIM`] amplifies it, so fc2 of that
//!   block sees a single huge input and the residual carries it onward;
//! * every block's key projection aligns [`SINK_DIM`] with a constant query
//!   bias, so the sink absorbs attention from all tokens.
//!
//! All other weights are Gaussian and never touch the reserved dims.

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};

use crate::encoder::{BlockWeights, EncoderConfig, EncoderModel, Pooling};
use crate::io::{Dataset, ImageLayout, Sample};
use crate::rng::{seeded, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BG_DIM: usize = 0;
pub const ZERO_DIM: usize = 1;
pub const SINK_DIM: usize = 15;
pub const PLANTED_BLOCK: usize = 3;
/// Pixel value of the flat background patch in the content channels.
pub const BG_LEVEL: f64 = 1.0;

const CONTENT_CHANNELS: usize = 2;
/// Reserved hidden unit in blocks carrying planted MLP paths.
const UNIT: usize = 0;
/// The amplifier gain lives mostly in the (unquantized) layer-norm scale so
/// that fc1 weights keep an ordinary range.
const AMP_GAMMA: f64 = 10.0;
const AMP_WEIGHT: f64 = 4.0;
const AMP_WRITE: f64 = 2.0;
const FC2_GAIN: f64 = 3.0;

/// Architecture used by [`planted_model`]: 8×8 images, 2×2 patches, 17 tokens.
pub fn fixture_config() -> EncoderConfig {
    EncoderConfig {
        depth: 6,
        width: 16,
        heads: 2,
        mlp_hidden: 32,
        patch_size: 2,
        image_size: 8,
        channels: 3,
        pooling: Pooling::Cls,
        cls_token: None,
        head_dim: None,
        layer_norm_eps: 1e-6,
        pre_norm: false,
    }
}

fn gaussian(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("finite")
}

/// Dense Gaussian weights (`std = gain / sqrt(fan_in)`), unit layer norms, small biases.
pub fn random_model<T: Scalar>(cfg: &EncoderConfig, seed: u64, gain: f64) -> EncoderModel<T> {
    let mut rng = seeded(seed);
    let mut m = EncoderModel::<f64>::zeros(cfg.clone()).expect("valid config");
    fill_random(&mut m, &mut rng, gain);
    m.cast()
}

fn fill_random(m: &mut EncoderModel<f64>, rng: &mut Rng, gain: f64) {
    let cfg = m.config.clone();
    let (d, h, pd) = (cfg.width, cfg.mlp_hidden, cfg.patch_dim());
    m.patch_w = gaussian(rng, &[d, pd], gain / (pd as f64).sqrt());
    m.patch_b = gaussian(rng, &[d], 0.02);
    m.pos_embed = gaussian(rng, &[cfg.num_tokens(), d], 0.3);
    if let Some(cls) = m.cls_token.as_mut() {
        *cls = gaussian(rng, &[d], 0.5);
    }
    let s = gain / (d as f64).sqrt();
    for b in &mut m.blocks {
        *b = BlockWeights {
            ln1_gamma: Tensor::full(&[d], 1.0),
            ln1_beta: Tensor::zeros(&[d]),
            wq: gaussian(rng, &[d, d], s),
            wk: gaussian(rng, &[d, d], s),
            wv: gaussian(rng, &[d, d], s),
            wo: gaussian(rng, &[d, d], s),
            bq: gaussian(rng, &[d], 0.02),
            bk: gaussian(rng, &[d], 0.02),
            bv: gaussian(rng, &[d], 0.02),
            bo: gaussian(rng, &[d], 0.02),
            ln2_gamma: Tensor::full(&[d], 1.0),
            ln2_beta: Tensor::zeros(&[d]),
            fc1_w: gaussian(rng, &[h, d], s),
            fc1_b: gaussian(rng, &[h], 0.02),
            fc2_w: gaussian(rng, &[d, h], gain / (h as f64).sqrt()),
            fc2_b: gaussian(rng, &[d], 0.02),
        };
    }
    if let Some((g, b)) = m.ln_pre.as_mut() {
        *g = gaussian(rng, &[d], 0.1).map(|v| v + 1.0);
        *b = gaussian(rng, &[d], 0.1);
    }
    m.ln_final_gamma = Tensor::full(&[d], 1.0);
    m.ln_final_beta = Tensor::zeros(&[d]);
    if let (Some(w), Some(o)) = (m.head_w.as_mut(), cfg.head_dim) {
        *w = gaussian(rng, &[o, d], 1.0 / (d as f64).sqrt());
    }
}

/// Uniform images in `[-1, 1]` matching `cfg`.
pub fn random_image<T: Scalar>(cfg: &EncoderConfig, rng: &mut Rng) -> Tensor<T> {
    let (c, s) = (cfg.channels, cfg.image_size);
    let u = Uniform::new_inclusive(-1.0, 1.0);
    Tensor::new(
        vec![c, s, s],
        (0..c * s * s).map(|_| T::from_f64_lossy(u.sample(rng))).collect(),
    )
    .expect("finite")
}

fn set(t: &mut Tensor<f64>, r: usize, c: usize, v: f64) {
    let cols = t.cols();
    t.data_mut()[r * cols + c] = v;
}

fn zero_row(t: &mut Tensor<f64>, r: usize) {
    t.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
}

fn zero_col(t: &mut Tensor<f64>, c: usize) {
    for r in 0..t.rows() {
        set(t, r, c, 0.0);
    }
}

const RESERVED: [usize; 3] = [BG_DIM, ZERO_DIM, SINK_DIM];

/// The planted-sink encoder described in the module docs.
pub fn planted_model<T: Scalar>(seed: u64) -> EncoderModel<T> {
    let cfg = fixture_config();
    let mut rng = seeded(seed);
    let mut m = EncoderModel::<f64>::zeros(cfg.clone()).expect("valid config");
    fill_random(&mut m, &mut rng, 1.0);
    let (d, p) = (cfg.width, cfg.patch_size);
    let pix = p * p;

    // random paths read only content channels and never touch reserved dims
    for r in 0..d {
        for c in CONTENT_CHANNELS * pix..cfg.patch_dim() {
            set(&mut m.patch_w, r, c, 0.0);
        }
    }
    for &r in &RESERVED {
        zero_row(&mut m.patch_w, r);
        m.patch_b.data_mut()[r] = 0.0;
        for t in 0..cfg.num_tokens() {
            set(&mut m.pos_embed, t, r, 0.0);
        }
        if let Some(cls) = m.cls_token.as_mut() {
            cls.data_mut()[r] = 0.0;
        }
    }
    let content = (CONTENT_CHANNELS * pix) as f64;
    for c in 0..CONTENT_CHANNELS * pix {
        set(&mut m.patch_w, BG_DIM, c, 6.0 / content);
    }
    // presence channel: 1 everywhere in ordinary images, 0 where masked
    let zero_gain = 6.0;
    for c in CONTENT_CHANNELS * pix..cfg.patch_dim() {
        set(&mut m.patch_w, ZERO_DIM, c, -zero_gain / pix as f64);
    }
    m.patch_b.data_mut()[ZERO_DIM] = zero_gain;

    let dh = cfg.head_width();
    let fc2 = &mut m.blocks[PLANTED_BLOCK].fc2_w;
    *fc2 = fc2.scale(FC2_GAIN);
    for (b, blk) in m.blocks.iter_mut().enumerate() {
        for &r in &RESERVED {
            zero_col(&mut blk.wq, r);
            zero_col(&mut blk.wk, r);
            zero_col(&mut blk.wv, r);
            zero_row(&mut blk.wo, r);
            blk.bo.data_mut()[r] = 0.0;
            zero_col(&mut blk.fc1_w, r);
            zero_row(&mut blk.fc2_w, r);
            blk.fc2_b.data_mut()[r] = 0.0;
        }
        // attention sink: a fixed query coordinate per head matched by the sink key
        for head in 0..cfg.heads {
            let q = head * dh;
            zero_row(&mut blk.wq, q);
            blk.bq.data_mut()[q] = 1.7;
            zero_row(&mut blk.wk, q);
            blk.bk.data_mut()[q] = 0.0;
            set(&mut blk.wk, q, SINK_DIM, 1.7);
        }
        let planted = match b {
            0 => Some((ZERO_DIM, 4.0, 2.0, 1.2)),
            2 => Some((BG_DIM, 4.0, 2.0, 4.0)),
            PLANTED_BLOCK => Some((SINK_DIM, AMP_WEIGHT, 1.5, AMP_WRITE)),
            _ => None,
        };
        if let Some((src, gain, threshold, write)) = planted {
            let g = if b == PLANTED_BLOCK { AMP_GAMMA } else { 1.0 };
            blk.ln2_gamma.data_mut()[src] = g;
            zero_row(&mut blk.fc1_w, UNIT);
            set(&mut blk.fc1_w, UNIT, src, gain);
            blk.fc1_b.data_mut()[UNIT] = -gain * g * threshold;
            zero_col(&mut blk.fc2_w, UNIT);
            set(&mut blk.fc2_w, SINK_DIM, UNIT, write);
        }
    }
    m.cast()
}

/// Where the flat background patch goes in [`planted_images`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackgroundPlacement {
    Random,
    Fixed(usize),
}

/// Images for [`fixture_config`]: uniform foreground noise in `[-0.5, 0.5]`,
/// one flat patch at [`BG_LEVEL`], presence channel all ones.
///
/// Labels are the background patch index.
pub fn planted_images<T: Scalar>(n: usize, placement: BackgroundPlacement, seed: u64) -> Dataset<T> {
    let cfg = fixture_config();
    let (s, p) = (cfg.image_size, cfg.patch_size);
    let grid = cfg.grid();
    let mut rng = seeded(seed);
    let u = Uniform::new_inclusive(-0.5, 0.5);
    let samples = (0..n)
        .map(|i| {
            let bg = match placement {
                BackgroundPlacement::Random => rng.gen_range(0..grid * grid),
                BackgroundPlacement::Fixed(k) => k,
            };
            let (by, bx) = (bg / grid * p, bg % grid * p);
            let mut data = vec![0.0; cfg.channels * s * s];
            for ch in 0..CONTENT_CHANNELS {
                for y in 0..s {
                    for x in 0..s {
                        let in_bg = (by..by + p).contains(&y) && (bx..bx + p).contains(&x);
                        data[(ch * s + y) * s + x] = if in_bg { BG_LEVEL } else { u.sample(&mut rng) };
                    }
                }
            }
            data[CONTENT_CHANNELS * s * s..].iter_mut().for_each(|v| *v = 1.0);
            Sample {
                id: format!("img{i:04}"),
                image: Tensor::new(vec![cfg.channels, s, s], data).expect("finite").cast(),
                label: Some(bg),
            }
        })
        .collect();
    Dataset::new(ImageLayout::chw(cfg.channels, s, s), samples).expect("consistent shapes")
}

/// `H×W` mask that is 1 on patch `patch` only (`keep_patch`) or everywhere but it.
pub fn patch_mask<T: Scalar>(patch: usize, keep_patch: bool) -> Tensor<T> {
    let cfg = fixture_config();
    let (s, p, grid) = (cfg.image_size, cfg.patch_size, cfg.grid());
    let (by, bx) = (patch / grid * p, patch % grid * p);
    let data = (0..s * s)
        .map(|i| {
            let (y, x) = (i / s, i % s);
            let inside = (by..by + p).contains(&y) && (bx..bx + p).contains(&x);
            if inside == keep_patch {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::new(vec![s, s], data).expect("finite")
}
