//! The instrumented forward pass.

use std::cell::Cell;
use std::collections::BTreeSet;

use crate::encoder::model::{BlockWeights, EncoderModel, Pooling};
use crate::encoder::site::{LayerSite, SiteKind};
use crate::error::{dim_err, Error, Result};
use crate::ops::{gelu, layer_norm, linear, matmul, matmul_transb, softmax_rows};
use crate::quant::{qdq_with_bits, LinearSlot, QuantizedModelView};
use crate::regcache::{select_deletion, DeletionRule};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-block key/value rows of one register token, injected as an attention prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct KvPrefix<T> {
    /// First block receiving the prefix.
    pub start_block: usize,
    /// `(key, value)` for blocks `start_block..start_block + kv.len()`, each of width `d`.
    pub kv: Vec<(Tensor<T>, Tensor<T>)>,
    /// Number of identical copies injected per block.
    pub tau: usize,
}

impl<T: Scalar> KvPrefix<T> {
    pub fn end_block(&self) -> usize {
        self.start_block + self.kv.len().saturating_sub(1)
    }

    pub fn covers(&self, block: usize) -> bool {
        !self.kv.is_empty() && block >= self.start_block && block <= self.end_block()
    }

    pub fn at(&self, block: usize) -> Option<&(Tensor<T>, Tensor<T>)> {
        if self.covers(block) {
            self.kv.get(block - self.start_block)
        } else {
            None
        }
    }

    /// `tau` stacked copies of the block's key and value rows.
    fn repeated(&self, block: usize) -> Option<(Tensor<T>, Tensor<T>)> {
        let (k, v) = self.at(block)?;
        let rep = |t: &Tensor<T>| {
            let mut data = Vec::with_capacity(self.tau * t.len());
            for _ in 0..self.tau {
                data.extend_from_slice(t.data());
            }
            Tensor::from_parts(vec![self.tau, t.len()], data)
        };
        Some((rep(k), rep(v)))
    }
}

/// Per-call instrumentation of a forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardOptions<'a, T> {
    pub taps: BTreeSet<LayerSite>,
    pub prefix: Option<&'a KvPrefix<T>>,
    pub deletion: Option<DeletionRule>,
}

impl<'a, T: Scalar> ForwardOptions<'a, T> {
    pub fn none() -> Self {
        Self {
            taps: BTreeSet::new(),
            prefix: None,
            deletion: None,
        }
    }

    pub fn with_taps(taps: impl IntoIterator<Item = LayerSite>) -> Self {
        Self {
            taps: taps.into_iter().collect(),
            ..Self::none()
        }
    }

    /// Deletion rules that remove nothing are treated as absent.
    fn active_deletion(&self) -> Option<DeletionRule> {
        self.deletion.filter(|d| d.k_tilde > 0)
    }

    fn check(&self, model: &EncoderModel<T>) -> Result<()> {
        let depth = model.depth();
        let d = model.config.width;
        for t in &self.taps {
            if t.block >= depth {
                return Err(Error::Index(format!("tap {t} beyond depth {depth}")));
            }
        }
        if let Some(p) = self.prefix {
            if p.kv.is_empty() || p.tau == 0 {
                return Err(Error::Contract(
                    "prefix must have at least one block and tau >= 1".into(),
                ));
            }
            if p.end_block() >= depth {
                return Err(Error::Index(format!(
                    "prefix range {}..={} beyond depth {depth}",
                    p.start_block,
                    p.end_block()
                )));
            }
            for (k, v) in &p.kv {
                if k.len() != d || v.len() != d {
                    return Err(dim_err!("prefix key/value width must be {d}"));
                }
            }
        }
        if let Some(del) = self.active_deletion() {
            if del.block >= depth {
                return Err(Error::Index(format!(
                    "deletion block {} beyond depth {depth}",
                    del.block
                )));
            }
            if let Some(p) = self.prefix {
                if !p.covers(del.block) {
                    return Err(Error::Contract(format!(
                        "deletion block {} outside prefix range {}..={}",
                        del.block,
                        p.start_block,
                        p.end_block()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTap<T> {
    pub site: LayerSite,
    /// `(tokens × site width)`.
    pub captured: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    pub features: Tensor<T>,
    /// Captured activations in site order.
    pub taps: Vec<ActivationTap<T>>,
    /// Original token index of every surviving row.
    pub retained_token_map: Vec<usize>,
    /// Matmul FLOPs actually executed, `2·m·n·k` per product.
    pub flops: u64,
}

impl<T: Scalar> ForwardOutput<T> {
    pub fn tap(&self, site: LayerSite) -> Option<&Tensor<T>> {
        self.taps.iter().find(|t| t.site == site).map(|t| &t.captured)
    }
}

/// Anything that maps an image to features under forward options.
pub trait FeatureModel<T: Scalar>: Sync {
    fn base(&self) -> &EncoderModel<T>;
    fn forward(&self, image: &Tensor<T>, opts: &ForwardOptions<'_, T>) -> Result<ForwardOutput<T>>;
}

impl<T: Scalar> FeatureModel<T> for EncoderModel<T> {
    fn base(&self) -> &EncoderModel<T> {
        self
    }

    fn forward(&self, image: &Tensor<T>, opts: &ForwardOptions<'_, T>) -> Result<ForwardOutput<T>> {
        Runner::new(self, None, opts).run(image)
    }
}

impl<'m, T: Scalar> FeatureModel<T> for QuantizedModelView<'m, T> {
    fn base(&self) -> &EncoderModel<T> {
        self.base
    }

    fn forward(&self, image: &Tensor<T>, opts: &ForwardOptions<'_, T>) -> Result<ForwardOutput<T>> {
        Runner::new(self.base, Some(self), opts).run(image)
    }
}

impl<T: Scalar> EncoderModel<T> {
    /// Tokenizes an image `(C × H × W)` into `(num_tokens × width)`.
    pub fn patch_embed(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let counter = Cell::new(0);
        patch_embed_counted(self, image, &counter)
    }

    /// Runs block `b` on `x` with optional prefix keys/values `(p × d)`.
    pub fn run_block(&self, b: usize, x: &Tensor<T>, prefix_kv: Option<(&Tensor<T>, &Tensor<T>)>) -> Result<Tensor<T>> {
        let opts = ForwardOptions::none();
        let r = Runner::new(self, None, &opts);
        let mut sink = Vec::new();
        r.block(b, x.clone(), prefix_kv.map(|(k, v)| (k.clone(), v.clone())), &mut sink)
    }

    /// Pooling, final layer norm and head, given the surviving rows and their original indices.
    pub fn pool_and_project(&self, x: &Tensor<T>, retained: &[usize]) -> Result<Tensor<T>> {
        let opts = ForwardOptions::none();
        Runner::new(self, None, &opts).finish(x, retained)
    }

    /// Computes the per-block key/value rows that token `token_index` of
    /// `image` produces in a plain full-precision pass, for blocks
    /// `start_block..depth`.
    pub fn compute_prefix_kv(
        &self,
        image: &Tensor<T>,
        token_index: usize,
        start_block: usize,
    ) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
        let n = self.config.num_tokens();
        if token_index >= n {
            return Err(Error::Index(format!(
                "token index {token_index} out of range for {n} tokens"
            )));
        }
        if start_block >= self.depth() {
            return Err(Error::Index(format!(
                "insertion start {start_block} beyond depth {}",
                self.depth()
            )));
        }
        let opts = ForwardOptions::none();
        let mut runner = Runner::new(self, None, &opts);
        runner.kv_capture = Some(token_index);
        let mut captured = Vec::new();
        runner.run_inner(image, &mut captured)?;
        Ok(captured.into_iter().skip(start_block).collect())
    }
}

/// Multi-head self-attention of already normalized rows `x` with block `blk`'s
/// projections, keys/values optionally preceded by prefix rows `(p × d)`.
pub fn attention<T: Scalar>(
    x: &Tensor<T>,
    blk: &BlockWeights<T>,
    heads: usize,
    prefix_kv: Option<(&Tensor<T>, &Tensor<T>)>,
) -> Result<Tensor<T>> {
    let d = x.cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(dim_err!("width {d} not divisible by {heads} heads"));
    }
    let q = linear(x, &blk.wq, &blk.bq)?;
    let k = linear(x, &blk.wk, &blk.bk)?;
    let v = linear(x, &blk.wv, &blk.bv)?;
    let prefix = prefix_kv.map(|(k, v)| (k.clone(), v.clone()));
    let a = attention_core(heads, &q, &k, &v, prefix.as_ref(), &Cell::new(0))?;
    linear(&a, &blk.wo, &blk.bo)
}

/// Per head, softmax over `[prefix ; own]` keys; queries from own rows only.
fn attention_core<T: Scalar>(
    heads: usize,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    prefix: Option<&KvPair<T>>,
    counter: &Cell<u64>,
) -> Result<Tensor<T>> {
    let (n, d) = (q.rows(), q.cols());
    let (keys, values) = match prefix {
        Some((pk, pv)) => {
            if pk.cols() != d || pv.cols() != d || pk.rows() != pv.rows() {
                return Err(dim_err!(
                    "prefix keys {:?} / values {:?} vs model width {d}",
                    pk.shape(),
                    pv.shape()
                ));
            }
            (Tensor::vstack(&[pk, k])?, Tensor::vstack(&[pv, v])?)
        }
        None => (k.clone(), v.clone()),
    };
    let nk = keys.rows();
    let dh = d / heads;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut out = vec![T::zero(); n * d];
    for head in 0..heads {
        let off = head * dh;
        let qh = q.slice_cols(off, dh);
        let kh = keys.slice_cols(off, dh);
        let vh = values.slice_cols(off, dh);
        let scores = matmul_transb(&qh, &kh)?.scale(scale);
        let probs = softmax_rows(&scores)?;
        let oh = matmul(&probs, &vh)?;
        counter.set(counter.get() + 4 * (n * nk * dh) as u64);
        for i in 0..n {
            out[i * d + off..i * d + off + dh].copy_from_slice(oh.row(i));
        }
    }
    Ok(Tensor::from_parts(vec![n, d], out))
}

fn patch_embed_counted<T: Scalar>(
    model: &EncoderModel<T>,
    image: &Tensor<T>,
    counter: &Cell<u64>,
) -> Result<Tensor<T>> {
    let cfg = &model.config;
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(dim_err!("image must be C×H×W, got {s:?}")),
    };
    let p = cfg.patch_size;
    if h % p != 0 || w % p != 0 {
        return Err(dim_err!("image {h}×{w} not divisible by patch size {p}"));
    }
    if c != cfg.channels || h != cfg.image_size || w != cfg.image_size {
        return Err(dim_err!(
            "image {c}×{h}×{w} does not match configured {}×{}×{}",
            cfg.channels,
            cfg.image_size,
            cfg.image_size
        ));
    }
    let (gh, gw) = (h / p, w / p);
    let pd = c * p * p;
    let mut patches = Vec::with_capacity(gh * gw * pd);
    let img = image.data();
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for y in 0..p {
                    let row = (ch * h + py * p + y) * w + px * p;
                    patches.extend_from_slice(&img[row..row + p]);
                }
            }
        }
    }
    let patches = Tensor::from_parts(vec![gh * gw, pd], patches);
    counter.set(counter.get() + 2 * (gh * gw * pd * cfg.width) as u64);
    let emb = linear(&patches, &model.patch_w, &model.patch_b)?;
    let mut x = match &model.cls_token {
        Some(cls) => Tensor::vstack(&[&cls.clone().reshape(vec![1, cfg.width])?, &emb])?,
        None => emb,
    };
    x.add_assign(&model.pos_embed)
        .map_err(|e| e.context("positional embedding"))?;
    if let Some((g, b)) = &model.ln_pre {
        x = layer_norm(&x, g, b, T::from_f64_lossy(cfg.layer_norm_eps))?;
    }
    Ok(x)
}

struct Runner<'a, 'o, T> {
    model: &'a EncoderModel<T>,
    quant: Option<&'a QuantizedModelView<'a, T>>,
    opts: &'a ForwardOptions<'o, T>,
    flops: Cell<u64>,
    kv_capture: Option<usize>,
}

type KvPair<T> = (Tensor<T>, Tensor<T>);

impl<'a, 'o, T: Scalar> Runner<'a, 'o, T> {
    fn new(
        model: &'a EncoderModel<T>,
        quant: Option<&'a QuantizedModelView<'a, T>>,
        opts: &'a ForwardOptions<'o, T>,
    ) -> Self {
        Self {
            model,
            quant,
            opts,
            flops: Cell::new(0),
            kv_capture: None,
        }
    }

    fn count(&self, m: usize, n: usize, k: usize) {
        self.flops.set(self.flops.get() + 2 * (m * n * k) as u64);
    }

    fn tap(&self, taps: &mut Vec<ActivationTap<T>>, site: LayerSite, x: &Tensor<T>) {
        if self.opts.taps.contains(&site) {
            taps.push(ActivationTap {
                site,
                captured: x.clone(),
            });
        }
    }

    /// Linear layers sharing one input; quantized when the view targets the site.
    fn linears(
        &self,
        block: usize,
        x: &Tensor<T>,
        layers: &[(LinearSlot, &Tensor<T>, &Tensor<T>)],
    ) -> Result<Vec<Tensor<T>>> {
        let n = x.rows();
        let quant = self
            .quant
            .filter(|q| layers.iter().all(|(slot, ..)| q.weight(block, *slot).is_some()));
        let xq;
        let input = match quant {
            Some(q) => {
                xq = qdq_with_bits(x, q.spec.act_bits)?;
                &xq
            }
            None => x,
        };
        layers
            .iter()
            .map(|&(slot, w, b)| {
                let w = quant.and_then(|q| q.weight(block, slot)).unwrap_or(w);
                self.count(n, w.rows(), w.cols());
                linear(input, w, b)
            })
            .collect()
    }

    fn run(&self, image: &Tensor<T>) -> Result<ForwardOutput<T>> {
        self.opts.check(self.model)?;
        let mut sink = Vec::new();
        self.run_inner(image, &mut sink)
    }

    fn run_inner(&self, image: &Tensor<T>, kv_out: &mut Vec<KvPair<T>>) -> Result<ForwardOutput<T>> {
        let model = self.model;
        let mut x = patch_embed_counted(model, image, &self.flops)?;
        let mut retained: Vec<usize> = (0..x.rows()).collect();
        let mut taps = Vec::new();
        let has_cls = model.config.has_cls();
        let deletion = self.opts.active_deletion();

        for b in 0..model.depth() {
            if let Some(rule) = deletion.filter(|r| r.block == b) {
                let protect: Vec<usize> = if has_cls && rule.protect_cls { vec![0] } else { vec![] };
                let removed = select_deletion(&x, rule.k_tilde, &protect)?;
                if has_cls && model.config.pooling == Pooling::Cls && removed.contains(&0) {
                    return Err(Error::Contract("deletion selected the pooled cls token".into()));
                }
                let keep: Vec<usize> = (0..x.rows()).filter(|i| !removed.contains(i)).collect();
                x = x.select_rows(&keep);
                retained = keep.iter().map(|&i| retained[i]).collect();
            }
            self.tap(&mut taps, LayerSite::new(b, SiteKind::BlockIn), &x);
            let prefix = self.opts.prefix.and_then(|p| p.repeated(b));
            x = self.block_tapped(b, x, prefix, &mut taps, kv_out)?;
            self.tap(&mut taps, LayerSite::new(b, SiteKind::BlockOutHidden), &x);
        }

        let features = self.finish(&x, &retained)?;
        taps.sort_by_key(|t| t.site);
        Ok(ForwardOutput {
            features,
            taps,
            retained_token_map: retained,
            flops: self.flops.get(),
        })
    }

    fn block(
        &self,
        b: usize,
        x: Tensor<T>,
        prefix: Option<KvPair<T>>,
        taps: &mut Vec<ActivationTap<T>>,
    ) -> Result<Tensor<T>> {
        let mut sink = Vec::new();
        self.block_tapped(b, x, prefix, taps, &mut sink)
    }

    fn block_tapped(
        &self,
        b: usize,
        mut x: Tensor<T>,
        prefix: Option<KvPair<T>>,
        taps: &mut Vec<ActivationTap<T>>,
        kv_out: &mut Vec<KvPair<T>>,
    ) -> Result<Tensor<T>> {
        let blk: &BlockWeights<T> = &self.model.blocks[b];
        let eps = T::from_f64_lossy(self.model.config.layer_norm_eps);

        let h = layer_norm(&x, &blk.ln1_gamma, &blk.ln1_beta, eps)?;
        self.tap(taps, LayerSite::new(b, SiteKind::QkvIn), &h);
        let mut qkv = self.linears(
            b,
            &h,
            &[
                (LinearSlot::Q, &blk.wq, &blk.bq),
                (LinearSlot::K, &blk.wk, &blk.bk),
                (LinearSlot::V, &blk.wv, &blk.bv),
            ],
        )?;
        let v = qkv.pop().expect("three projections");
        let k = qkv.pop().expect("three projections");
        let q = qkv.pop().expect("three projections");
        if let Some(t) = self.kv_capture {
            kv_out.push((Tensor::vector(k.row(t).to_vec()), Tensor::vector(v.row(t).to_vec())));
        }
        let attn = attention_core(self.model.config.heads, &q, &k, &v, prefix.as_ref(), &self.flops)?;
        self.tap(taps, LayerSite::new(b, SiteKind::AttnProjIn), &attn);
        let o = self
            .linears(b, &attn, &[(LinearSlot::O, &blk.wo, &blk.bo)])?
            .pop()
            .expect("one projection");
        x.add_assign(&o)?;

        let h = layer_norm(&x, &blk.ln2_gamma, &blk.ln2_beta, eps)?;
        self.tap(taps, LayerSite::new(b, SiteKind::Fc1In), &h);
        let f = self
            .linears(b, &h, &[(LinearSlot::Fc1, &blk.fc1_w, &blk.fc1_b)])?
            .pop()
            .expect("one projection");
        let g = gelu(&f);
        self.tap(taps, LayerSite::new(b, SiteKind::Fc2In), &g);
        let y = self
            .linears(b, &g, &[(LinearSlot::Fc2, &blk.fc2_w, &blk.fc2_b)])?
            .pop()
            .expect("one projection");
        x.add_assign(&y)?;
        Ok(x)
    }

    fn finish(&self, x: &Tensor<T>, retained: &[usize]) -> Result<Tensor<T>> {
        let model = self.model;
        let cfg = &model.config;
        let eps = T::from_f64_lossy(cfg.layer_norm_eps);
        let normed = layer_norm(x, &model.ln_final_gamma, &model.ln_final_beta, eps)?;
        let cls_row = cfg.has_cls() && retained.first() == Some(&0);
        let pooled: Vec<T> = match cfg.pooling {
            Pooling::Cls => {
                if !cls_row {
                    return Err(Error::Contract("cls token missing at pooling".into()));
                }
                normed.row(0).to_vec()
            }
            Pooling::Mean => {
                let rows: Vec<usize> = (usize::from(cls_row)..normed.rows()).collect();
                if rows.is_empty() {
                    return Err(Error::Contract("no patch tokens left to pool".into()));
                }
                let mut acc = vec![T::zero(); cfg.width];
                for &r in &rows {
                    for (a, &v) in acc.iter_mut().zip(normed.row(r)) {
                        *a += v;
                    }
                }
                let cnt = T::from_usize_lossy(rows.len());
                acc.into_iter().map(|a| a / cnt).collect()
            }
        };
        let pooled = Tensor::from_parts(vec![1, cfg.width], pooled);
        let out = match &model.head_w {
            Some(w) => {
                self.count(1, w.rows(), w.cols());
                matmul_transb(&pooled, w)?
            }
            None => pooled,
        };
        let len = out.len();
        out.reshape(vec![len])
    }
}
