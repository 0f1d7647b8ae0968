use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::regcache::RegisterCache;
use crate::scalar::Scalar;

/// Analytic matmul FLOP counts (`2·m·n·k` per product) with and without a register cache.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub base_flops: u64,
    pub regcache_flops: u64,
    pub delta_percent: f64,
}

/// Prefix and deletion shape of a forward pass, for FLOP accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlopsShape {
    /// `(first block, last block, tau)`.
    pub prefix: Option<(usize, usize, usize)>,
    /// `(block, k_tilde)`.
    pub deletion: Option<(usize, usize)>,
}

impl FlopsShape {
    pub fn of<T: Scalar>(cache: &RegisterCache<T>) -> Self {
        let (s, e) = cache.insertion_range();
        Self {
            prefix: Some((s, e, cache.prefix.tau)),
            deletion: Some((cache.deletion.block, cache.deletion.k_tilde)),
        }
    }
}

/// Matmul FLOPs of one forward pass over `tokens` tokens (cls included when configured).
///
/// Counted: patch embedding, q/k/v/output projections, attention scores and
/// weighted values, both MLP layers, and the head. Normalization, softmax,
/// GELU, bias and residual additions are not counted.
pub fn forward_flops(cfg: &EncoderConfig, tokens: usize, shape: FlopsShape) -> u64 {
    let (d, m) = (cfg.width as u64, cfg.mlp_hidden as u64);
    let patches = (tokens - usize::from(cfg.has_cls())) as u64;
    let mut total = 2 * patches * cfg.patch_dim() as u64 * d;
    let mut n = tokens as u64;
    for b in 0..cfg.depth {
        if let Some((db, k)) = shape.deletion {
            if db == b {
                n -= k as u64;
            }
        }
        let p = match shape.prefix {
            Some((s, e, tau)) if b >= s && b <= e => tau as u64,
            _ => 0,
        };
        total += 2 * n * d * d * 4; // q, k, v, output projections
        total += 2 * 2 * n * (n + p) * d; // scores and weighted values over all heads
        total += 2 * 2 * n * d * m; // fc1, fc2
    }
    if let Some(h) = cfg.head_dim {
        total += 2 * d * h as u64;
    }
    total
}

/// FLOP change caused by `cache` (`None` means no prefix and no deletion).
pub fn flops_delta<T: Scalar>(
    cfg: &EncoderConfig,
    cache: Option<&RegisterCache<T>>,
    base_token_count: usize,
) -> FlopsReport {
    flops_delta_shape(cfg, cache.map(FlopsShape::of).unwrap_or_default(), base_token_count)
}

pub fn flops_delta_shape(cfg: &EncoderConfig, shape: FlopsShape, base_token_count: usize) -> FlopsReport {
    let base = forward_flops(cfg, base_token_count, FlopsShape::default());
    let with = forward_flops(cfg, base_token_count, shape);
    FlopsReport {
        base_flops: base,
        regcache_flops: with,
        delta_percent: 100.0 * (with as f64 - base as f64) / base as f64,
    }
}
