use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Cls,
    Mean,
}

fn default_channels() -> usize {
    3
}

fn default_eps() -> f64 {
    1e-6
}

/// Architecture of a pre-norm ViT encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub patch_size: usize,
    /// Square input side length in pixels.
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub pooling: Pooling,
    /// Whether a cls token is prepended; defaults to `pooling == cls`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cls_token: Option<bool>,
    /// Output width of the optional head projection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<usize>,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    /// Layer norm over the embeddings before block 0 (`ln_pre.*`), as in CLIP.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub pre_norm: bool,
}

impl EncoderConfig {
    pub fn has_cls(&self) -> bool {
        self.cls_token.unwrap_or(self.pooling == Pooling::Cls)
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + usize::from(self.has_cls())
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    pub fn out_dim(&self) -> usize {
        self.head_dim.unwrap_or(self.width)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.width == 0 || self.heads == 0 || self.mlp_hidden == 0 {
            return bad("depth, width, heads and mlp_hidden must be positive".into());
        }
        if !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.patch_size == 0 || self.image_size == 0 || self.channels == 0 {
            return bad("patch_size, image_size and channels must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.pooling == Pooling::Cls && !self.has_cls() {
            return bad("cls pooling requires a cls token".into());
        }
        if self.head_dim == Some(0) {
            return bad("head_dim must be positive".into());
        }
        if self.layer_norm_eps.is_nan() || self.layer_norm_eps < 0.0 {
            return bad("layer_norm_eps must be non-negative".into());
        }
        Ok(())
    }
}

/// Weights of one transformer block. Linear weights are `(out × in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bq: Tensor<T>,
    pub bk: Tensor<T>,
    pub bv: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
}

impl<T: Scalar> BlockWeights<T> {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let (d, m) = (cfg.width, cfg.mlp_hidden);
        Self {
            ln1_gamma: Tensor::zeros(&[d]),
            ln1_beta: Tensor::zeros(&[d]),
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
            bq: Tensor::zeros(&[d]),
            bk: Tensor::zeros(&[d]),
            bv: Tensor::zeros(&[d]),
            bo: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::zeros(&[d]),
            ln2_beta: Tensor::zeros(&[d]),
            fc1_w: Tensor::zeros(&[m, d]),
            fc1_b: Tensor::zeros(&[m]),
            fc2_w: Tensor::zeros(&[d, m]),
            fc2_b: Tensor::zeros(&[d]),
        }
    }

    /// `(suffix, tensor)` pairs; the full name is `blocks.<b>.<suffix>`.
    pub fn named(&self) -> [(&'static str, &Tensor<T>); 16] {
        [
            ("ln1.gamma", &self.ln1_gamma),
            ("ln1.beta", &self.ln1_beta),
            ("attn.wq", &self.wq),
            ("attn.wk", &self.wk),
            ("attn.wv", &self.wv),
            ("attn.wo", &self.wo),
            ("attn.bq", &self.bq),
            ("attn.bk", &self.bk),
            ("attn.bv", &self.bv),
            ("attn.bo", &self.bo),
            ("ln2.gamma", &self.ln2_gamma),
            ("ln2.beta", &self.ln2_beta),
            ("mlp.fc1.w", &self.fc1_w),
            ("mlp.fc1.b", &self.fc1_b),
            ("mlp.fc2.w", &self.fc2_w),
            ("mlp.fc2.b", &self.fc2_b),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 16] {
        [
            ("ln1.gamma", &mut self.ln1_gamma),
            ("ln1.beta", &mut self.ln1_beta),
            ("attn.wq", &mut self.wq),
            ("attn.wk", &mut self.wk),
            ("attn.wv", &mut self.wv),
            ("attn.wo", &mut self.wo),
            ("attn.bq", &mut self.bq),
            ("attn.bk", &mut self.bk),
            ("attn.bv", &mut self.bv),
            ("attn.bo", &mut self.bo),
            ("ln2.gamma", &mut self.ln2_gamma),
            ("ln2.beta", &mut self.ln2_beta),
            ("mlp.fc1.w", &mut self.fc1_w),
            ("mlp.fc1.b", &mut self.fc1_b),
            ("mlp.fc2.w", &mut self.fc2_w),
            ("mlp.fc2.b", &mut self.fc2_b),
        ]
    }

    fn expected_shapes(cfg: &EncoderConfig) -> [(&'static str, Vec<usize>); 16] {
        let (d, m) = (cfg.width, cfg.mlp_hidden);
        [
            ("ln1.gamma", vec![d]),
            ("ln1.beta", vec![d]),
            ("attn.wq", vec![d, d]),
            ("attn.wk", vec![d, d]),
            ("attn.wv", vec![d, d]),
            ("attn.wo", vec![d, d]),
            ("attn.bq", vec![d]),
            ("attn.bk", vec![d]),
            ("attn.bv", vec![d]),
            ("attn.bo", vec![d]),
            ("ln2.gamma", vec![d]),
            ("ln2.beta", vec![d]),
            ("mlp.fc1.w", vec![m, d]),
            ("mlp.fc1.b", vec![m]),
            ("mlp.fc2.w", vec![d, m]),
            ("mlp.fc2.b", vec![d]),
        ]
    }

    fn cast<U: Scalar>(&self) -> BlockWeights<U> {
        BlockWeights {
            ln1_gamma: self.ln1_gamma.cast(),
            ln1_beta: self.ln1_beta.cast(),
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            wo: self.wo.cast(),
            bq: self.bq.cast(),
            bk: self.bk.cast(),
            bv: self.bv.cast(),
            bo: self.bo.cast(),
            ln2_gamma: self.ln2_gamma.cast(),
            ln2_beta: self.ln2_beta.cast(),
            fc1_w: self.fc1_w.cast(),
            fc1_b: self.fc1_b.cast(),
            fc2_w: self.fc2_w.cast(),
            fc2_b: self.fc2_b.cast(),
        }
    }
}

/// A configured encoder with all of its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<T> {
    pub config: EncoderConfig,
    /// `(width × patch_dim)`; patch vectors are flattened channel-major (c, y, x).
    pub patch_w: Tensor<T>,
    pub patch_b: Tensor<T>,
    /// `(num_tokens × width)`, cls position first when present.
    pub pos_embed: Tensor<T>,
    pub cls_token: Option<Tensor<T>>,
    /// `(gamma, beta)` when `config.pre_norm`.
    pub ln_pre: Option<(Tensor<T>, Tensor<T>)>,
    pub blocks: Vec<BlockWeights<T>>,
    pub ln_final_gamma: Tensor<T>,
    pub ln_final_beta: Tensor<T>,
    /// `(head_dim × width)`.
    pub head_w: Option<Tensor<T>>,
}

impl<T: Scalar> EncoderModel<T> {
    /// The all-zero model of a configuration.
    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        Ok(Self {
            patch_w: Tensor::zeros(&[d, config.patch_dim()]),
            patch_b: Tensor::zeros(&[d]),
            pos_embed: Tensor::zeros(&[config.num_tokens(), d]),
            cls_token: config.has_cls().then(|| Tensor::zeros(&[d])),
            ln_pre: config.pre_norm.then(|| (Tensor::zeros(&[d]), Tensor::zeros(&[d]))),
            blocks: (0..config.depth).map(|_| BlockWeights::zeros(&config)).collect(),
            ln_final_gamma: Tensor::zeros(&[d]),
            ln_final_beta: Tensor::zeros(&[d]),
            head_w: config.head_dim.map(|h| Tensor::zeros(&[h, d])),
            config,
        })
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    /// Every tensor with its container name, sorted by name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("patch_embed.w".into(), &self.patch_w),
            ("patch_embed.b".into(), &self.patch_b),
            ("pos_embed".into(), &self.pos_embed),
            ("ln_final.gamma".into(), &self.ln_final_gamma),
            ("ln_final.beta".into(), &self.ln_final_beta),
        ];
        if let Some(c) = &self.cls_token {
            out.push(("cls_token".into(), c));
        }
        if let Some(h) = &self.head_w {
            out.push(("head.w".into(), h));
        }
        if let Some((g, b)) = &self.ln_pre {
            out.push(("ln_pre.gamma".into(), g));
            out.push(("ln_pre.beta".into(), b));
        }
        for (b, blk) in self.blocks.iter().enumerate() {
            for (suffix, t) in blk.named() {
                out.push((format!("blocks.{b}.{suffix}"), t));
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Expected `(name, shape)` of every tensor under `config`.
    pub fn expected_shapes(config: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.width;
        let mut out = vec![
            ("patch_embed.w".to_string(), vec![d, config.patch_dim()]),
            ("patch_embed.b".to_string(), vec![d]),
            ("pos_embed".to_string(), vec![config.num_tokens(), d]),
            ("ln_final.gamma".to_string(), vec![d]),
            ("ln_final.beta".to_string(), vec![d]),
        ];
        if config.has_cls() {
            out.push(("cls_token".into(), vec![d]));
        }
        if let Some(h) = config.head_dim {
            out.push(("head.w".into(), vec![h, d]));
        }
        if config.pre_norm {
            out.push(("ln_pre.gamma".into(), vec![d]));
            out.push(("ln_pre.beta".into(), vec![d]));
        }
        for b in 0..config.depth {
            for (suffix, shape) in BlockWeights::<T>::expected_shapes(config) {
                out.push((format!("blocks.{b}.{suffix}"), shape));
            }
        }
        out
    }

    /// Checks every weight shape against the configuration.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.blocks.len() != self.config.depth {
            return Err(Error::Load(format!(
                "{} blocks for depth {}",
                self.blocks.len(),
                self.config.depth
            )));
        }
        if self.cls_token.is_some() != self.config.has_cls() {
            return Err(Error::Load("cls_token presence disagrees with config".into()));
        }
        if self.head_w.is_some() != self.config.head_dim.is_some() {
            return Err(Error::Load("head.w presence disagrees with config".into()));
        }
        if self.ln_pre.is_some() != self.config.pre_norm {
            return Err(Error::Load("ln_pre presence disagrees with config".into()));
        }
        let actual: std::collections::BTreeMap<String, &Tensor<T>> = self.named_tensors().into_iter().collect();
        for (name, shape) in Self::expected_shapes(&self.config) {
            match actual.get(&name) {
                None => return Err(Error::Load(format!("missing tensor {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Load(format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> EncoderModel<U> {
        EncoderModel {
            config: self.config.clone(),
            patch_w: self.patch_w.cast(),
            patch_b: self.patch_b.cast(),
            pos_embed: self.pos_embed.cast(),
            cls_token: self.cls_token.as_ref().map(Tensor::cast),
            ln_pre: self.ln_pre.as_ref().map(|(g, b)| (g.cast(), b.cast())),
            blocks: self.blocks.iter().map(BlockWeights::cast).collect(),
            ln_final_gamma: self.ln_final_gamma.cast(),
            ln_final_beta: self.ln_final_beta.cast(),
            head_w: self.head_w.as_ref().map(Tensor::cast),
        }
    }
}
