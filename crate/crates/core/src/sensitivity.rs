//! Layerwise quantization sensitivity and activation-outlier profiling.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderModel, FeatureModel, ForwardOptions, LayerSite, SiteKind};
use crate::error::{dim_err, Error, Result};
use crate::evalkit::{cosine, ReferenceMetric};
use crate::io::Dataset;
use crate::quant::{QuantSpec, QuantizedModelView};
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default probe-set size.
pub const DEFAULT_PROBE_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityEntry {
    pub site: LayerSite,
    pub metric_quantized: f64,
    pub metric_drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub entries: Vec<SensitivityEntry>,
    /// Entry with the largest drop; ties go to the earliest block, then site order.
    pub l_q: LayerSite,
    pub baseline_metric: f64,
}

impl SensitivityReport {
    /// CSV with header `block,site,metric_q,drop`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("block,site,metric_q,drop\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{},{},{},{}\n",
                e.site.block, e.site.site, e.metric_quantized, e.metric_drop
            ));
        }
        s
    }
}

/// Quantizes one linear site at a time and records the metric drop.
pub fn sensitivity_scan<T: Scalar>(
    model: &EncoderModel<T>,
    probe: &Dataset<T>,
    metric: &dyn ReferenceMetric<T>,
    bits: (u32, u32),
) -> Result<SensitivityReport> {
    if probe.is_empty() {
        return Err(Error::Input("probe set is empty".into()));
    }
    let none = ForwardOptions::none();
    let baseline = metric
        .evaluate(model, probe, &none)
        .map_err(|e| e.context("baseline metric"))?;
    let sites = LayerSite::all_linear(model.depth());
    let entries: Vec<SensitivityEntry> = sites
        .par_iter()
        .map(|&site| {
            let view = QuantizedModelView::new(model, QuantSpec::single_site(bits.0, bits.1, site))?;
            let m = metric
                .evaluate(&view, probe, &none)
                .map_err(|e| e.context(format!("site {site}")))?;
            Ok(SensitivityEntry {
                site,
                metric_quantized: m,
                metric_drop: baseline - m,
            })
        })
        .collect::<Result<_>>()?;
    let mut l_q = entries[0].site;
    let mut best = entries[0].metric_drop;
    for e in &entries[1..] {
        if e.metric_drop > best {
            best = e.metric_drop;
            l_q = e.site;
        }
    }
    Ok(SensitivityReport {
        entries,
        l_q,
        baseline_metric: baseline,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockNorms {
    pub block: usize,
    /// Largest token ℓ∞ norm.
    pub max_linf: f64,
    /// Mean ℓ∞ norm of the remaining tokens.
    pub mean_other_linf: f64,
}

/// Per-block norm statistics averaged over images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormProfile {
    pub site_kind: SiteKind,
    pub per_block: Vec<BlockNorms>,
    pub images: usize,
}

impl NormProfile {
    /// CSV with header `block,max_linf,mean_other_linf`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("block,max_linf,mean_other_linf\n");
        for b in &self.per_block {
            s.push_str(&format!("{},{},{}\n", b.block, b.max_linf, b.mean_other_linf));
        }
        s
    }

    pub fn block(&self, b: usize) -> Option<&BlockNorms> {
        self.per_block.iter().find(|n| n.block == b)
    }
}

/// `(max, mean of the others)` of row ℓ∞ norms; the first maximal row is the one excluded.
pub fn max_and_other<T: Scalar>(x: &Tensor<T>) -> (usize, f64, f64) {
    let norms: Vec<f64> = x.row_linf().into_iter().map(|v| v.to_f64_lossy()).collect();
    let (arg, max) = argmax(&norms);
    let others = norms.len() - 1;
    let mean_other = if others == 0 {
        0.0
    } else {
        (norms.iter().sum::<f64>() - max) / others as f64
    };
    (arg, max, mean_other)
}

fn argmax(v: &[f64]) -> (usize, f64) {
    let mut best = (0, v[0]);
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

fn check_profile_kind(kind: SiteKind) -> Result<()> {
    match kind {
        SiteKind::Fc2In | SiteKind::BlockOutHidden | SiteKind::BlockIn => Ok(()),
        other => Err(Error::Config(format!(
            "norm profiles use fc2_in, block_in or block_out_hidden, not {other}"
        ))),
    }
}

/// Norm profile of `model` under arbitrary forward options (e.g. a register cache).
pub fn norm_profile_with<T: Scalar>(
    model: &dyn FeatureModel<T>,
    probe: &Dataset<T>,
    kind: SiteKind,
    base_opts: &ForwardOptions<'_, T>,
) -> Result<NormProfile> {
    check_profile_kind(kind)?;
    if probe.is_empty() {
        return Err(Error::Input("probe set is empty".into()));
    }
    let depth = model.base().depth();
    let mut opts = base_opts.clone();
    opts.taps.extend((0..depth).map(|b| LayerSite::new(b, kind)));
    let per_image: Vec<Vec<(f64, f64)>> = probe
        .samples
        .par_iter()
        .map(|s| {
            let out = model.forward(&s.image, &opts)?;
            Ok((0..depth)
                .map(|b| {
                    let (_, m, o) = max_and_other(out.tap(LayerSite::new(b, kind)).expect("tap"));
                    (m, o)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let n = per_image.len() as f64;
    let per_block = (0..depth)
        .map(|b| {
            let (sm, so) = per_image
                .iter()
                .fold((0.0, 0.0), |(a, c), img| (a + img[b].0, c + img[b].1));
            BlockNorms {
                block: b,
                max_linf: sm / n,
                mean_other_linf: so / n,
            }
        })
        .collect();
    Ok(NormProfile {
        site_kind: kind,
        per_block,
        images: per_image.len(),
    })
}

/// Per-block max token norm and mean norm of the other tokens, averaged over the probe set.
pub fn norm_profile<T: Scalar>(model: &dyn FeatureModel<T>, probe: &Dataset<T>, kind: SiteKind) -> Result<NormProfile> {
    norm_profile_with(model, probe, kind, &ForwardOptions::none())
}

/// Norm profile of one image with pixels where `mask == 0` zeroed in every channel.
pub fn masked_norm_profile<T: Scalar>(
    model: &dyn FeatureModel<T>,
    image: &Tensor<T>,
    mask: &Tensor<T>,
    kind: SiteKind,
) -> Result<NormProfile> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(dim_err!("image must be C×H×W, got {s:?}")),
    };
    if mask.shape() != [h, w] {
        return Err(dim_err!("mask {:?} does not match image {h}×{w}", mask.shape()));
    }
    if mask.data().iter().any(|&m| m != T::zero() && m != T::one()) {
        return Err(Error::Input("mask values must be 0 or 1".into()));
    }
    let mut masked = image.clone();
    let md = mask.data();
    for ch in 0..c {
        let plane = &mut masked.data_mut()[ch * h * w..(ch + 1) * h * w];
        for (v, &m) in plane.iter_mut().zip(md) {
            *v *= m;
        }
    }
    let probe = Dataset::new(
        crate::io::ImageLayout::chw(c, h, w),
        vec![crate::io::Sample {
            id: "masked".into(),
            image: masked,
            label: None,
        }],
    )?;
    norm_profile(model, &probe, kind)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(v: &[f64]) -> Self {
        if v.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineStats {
    pub outlier: MeanStd,
    pub normal: MeanStd,
    pub pairs: usize,
    /// Per image: `(outlier token index, its ℓ∞ norm)`.
    pub outlier_tokens: Vec<(usize, f64)>,
}

/// Pairwise cosine similarity of per-image outlier tokens versus randomly drawn normal tokens.
///
/// The outlier of an image is its largest-ℓ∞ token at `site`; the normal token
/// is drawn uniformly from the rest. `sample_pairs = None` uses every image pair.
pub fn outlier_cosine_stats<T: Scalar>(
    model: &dyn FeatureModel<T>,
    images: &Dataset<T>,
    site: LayerSite,
    sample_pairs: Option<usize>,
    seed: u64,
) -> Result<CosineStats> {
    if images.len() < 2 {
        return Err(Error::Input("outlier cosine statistics need at least 2 images".into()));
    }
    let opts = ForwardOptions::with_taps([site]);
    let taps: Vec<Tensor<T>> = images
        .samples
        .par_iter()
        .map(|s| Ok(model.forward(&s.image, &opts)?.tap(site).expect("tap").clone()))
        .collect::<Result<_>>()?;
    let mut rng = seeded(seed);
    let mut outliers = Vec::new();
    let mut normals = Vec::new();
    let mut outlier_tokens = Vec::new();
    for t in &taps {
        let (arg, max, _) = max_and_other(t);
        outlier_tokens.push((arg, max));
        outliers.push(t.row(arg).to_vec());
        let n = t.rows();
        let pick = if n > 1 {
            let r = rng.gen_range(0..n - 1);
            if r >= arg {
                r + 1
            } else {
                r
            }
        } else {
            arg
        };
        normals.push(t.row(pick).to_vec());
    }
    let all: Vec<(usize, usize)> = (0..taps.len())
        .flat_map(|i| (i + 1..taps.len()).map(move |j| (i, j)))
        .collect();
    let pairs: Vec<(usize, usize)> = match sample_pairs {
        Some(k) if k < all.len() => {
            let mut idx = sample(&mut rng, all.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| all[i]).collect()
        }
        _ => all,
    };
    let sims =
        |vecs: &[Vec<T>]| -> Vec<f64> { pairs.iter().filter_map(|&(i, j)| cosine(&vecs[i], &vecs[j])).collect() };
    Ok(CosineStats {
        outlier: MeanStd::of(&sims(&outliers)),
        normal: MeanStd::of(&sims(&normals)),
        pairs: pairs.len(),
        outlier_tokens,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkFrequency {
    pub block: usize,
    /// Fraction of images whose ℓ∞-argmax token sits at each position.
    pub frequencies: Vec<f64>,
    pub top1_position: usize,
    pub top1_frequency: f64,
}

/// Per-block histogram of the position of the largest-norm token.
pub fn sink_frequency_profile<T: Scalar>(
    model: &dyn FeatureModel<T>,
    probe: &Dataset<T>,
    kind: SiteKind,
) -> Result<Vec<SinkFrequency>> {
    check_profile_kind(kind)?;
    if probe.is_empty() {
        return Err(Error::Input("probe set is empty".into()));
    }
    let depth = model.base().depth();
    let tokens = model.base().config.num_tokens();
    let opts = ForwardOptions::with_taps((0..depth).map(|b| LayerSite::new(b, kind)));
    let argmaxes: Vec<Vec<usize>> = probe
        .samples
        .par_iter()
        .map(|s| {
            let out = model.forward(&s.image, &opts)?;
            Ok((0..depth)
                .map(|b| max_and_other(out.tap(LayerSite::new(b, kind)).expect("tap")).0)
                .collect())
        })
        .collect::<Result<_>>()?;
    let n = argmaxes.len() as f64;
    Ok((0..depth)
        .map(|b| {
            let mut counts = vec![0usize; tokens];
            for a in &argmaxes {
                counts[a[b]] += 1;
            }
            let frequencies: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
            let (top1_position, top1_frequency) = argmax(&frequencies);
            SinkFrequency {
                block: b,
                frequencies,
                top1_position,
                top1_frequency,
            }
        })
        .collect())
}
