//! Reference metrics: zero-shot classification, retrieval recall@K and feature fidelity.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::encoder::{EncoderModel, FeatureModel, ForwardOptions};
use crate::error::{dim_err, Error, Result};
use crate::io::Dataset;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Scores a model (under forward options) on a dataset; higher is better.
pub trait ReferenceMetric<T: Scalar>: Sync {
    fn name(&self) -> String;

    fn evaluate(&self, model: &dyn FeatureModel<T>, data: &Dataset<T>, opts: &ForwardOptions<'_, T>) -> Result<f64>;
}

fn dot_norms<T: Scalar>(a: &[T], b: &[T]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64_lossy(), y.to_f64_lossy());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot, na, nb)
}

/// Cosine similarity in double precision; `None` if either vector is zero.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Option<f64> {
    let (dot, na, nb) = dot_norms(a, b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Rows scaled to unit length; zero rows are rejected.
pub fn l2_normalize_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
        if n == T::zero() {
            return Err(Error::Input(format!("row {i} has zero norm")));
        }
        for v in row {
            *v /= n;
        }
    }
    Ok(out)
}

/// Index of the class row with the highest cosine similarity to `features`;
/// ties go to the lowest index.
pub fn zero_shot_top1<T: Scalar>(features: &Tensor<T>, class_embeds: &Tensor<T>) -> Result<usize> {
    let d = features.len();
    if class_embeds.ndim() != 2 || class_embeds.cols() != d {
        return Err(dim_err!(
            "class embeddings {:?} vs feature width {d}",
            class_embeds.shape()
        ));
    }
    let mut best: Option<(usize, f64)> = None;
    for c in 0..class_embeds.rows() {
        let s = cosine(features.data(), class_embeds.row(c))
            .ok_or_else(|| Error::Input("zero-norm feature or class row: similarity undefined".into()))?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    best.map(|(c, _)| c)
        .ok_or_else(|| Error::Input("no class embeddings".into()))
}

fn features_of<T: Scalar>(
    model: &dyn FeatureModel<T>,
    data: &Dataset<T>,
    opts: &ForwardOptions<'_, T>,
) -> Result<Vec<Tensor<T>>> {
    data.samples
        .par_iter()
        .map(|s| {
            model
                .forward(&s.image, opts)
                .map(|o| o.features)
                .map_err(|e| e.context(format!("sample {}", s.id)))
        })
        .collect()
}

/// Fraction of samples whose zero-shot prediction equals the label.
pub fn evaluate_accuracy<T: Scalar>(
    model: &dyn FeatureModel<T>,
    data: &Dataset<T>,
    class_embeds: &Tensor<T>,
    opts: &ForwardOptions<'_, T>,
) -> Result<f64> {
    let labels = data.labels()?;
    if labels.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let feats = features_of(model, data, opts)?;
    let mut correct = 0usize;
    for (f, &l) in feats.iter().zip(&labels) {
        if zero_shot_top1(f, class_embeds)? == l {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Fraction of queries whose `k` nearest gallery items (cosine) contain a ground-truth match.
pub fn recall_at_k<T: Scalar>(
    queries: &Tensor<T>,
    gallery: &Tensor<T>,
    ground_truth: &[BTreeSet<usize>],
    k: usize,
) -> Result<f64> {
    let g = gallery.rows();
    if k == 0 || k > g {
        return Err(Error::Input(format!("K={k} must be in 1..={g}")));
    }
    if queries.cols() != gallery.cols() {
        return Err(dim_err!("query width {} vs gallery {}", queries.cols(), gallery.cols()));
    }
    if ground_truth.len() != queries.rows() {
        return Err(Error::Input(format!(
            "{} ground-truth sets for {} queries",
            ground_truth.len(),
            queries.rows()
        )));
    }
    let mut hits = 0usize;
    for (qi, truth) in ground_truth.iter().enumerate() {
        if truth.is_empty() {
            return Err(Error::Input(format!("query {qi} has no ground truth")));
        }
        let q = queries.row(qi);
        let mut scored: Vec<(usize, f64)> = (0..g)
            .map(|j| (j, cosine(q, gallery.row(j)).unwrap_or(f64::NEG_INFINITY)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        if scored[..k].iter().any(|(j, _)| truth.contains(j)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / ground_truth.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fidelity {
    pub mean_cosine: f64,
    /// Samples skipped because a feature vector had zero norm.
    pub excluded: usize,
}

/// Mean cosine similarity between full-precision and candidate features.
pub fn feature_fidelity<T: Scalar>(
    model_q: &dyn FeatureModel<T>,
    model_fp: &EncoderModel<T>,
    data: &Dataset<T>,
    opts: &ForwardOptions<'_, T>,
) -> Result<Fidelity> {
    let reference = features_of(model_fp, data, &ForwardOptions::none())?;
    let candidate = features_of(model_q, data, opts)?;
    fidelity_from(&reference, &candidate)
}

fn fidelity_from<T: Scalar>(reference: &[Tensor<T>], candidate: &[Tensor<T>]) -> Result<Fidelity> {
    if reference.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    for (r, c) in reference.iter().zip(candidate) {
        if let Some(s) = cosine(r.data(), c.data()) {
            sum += s;
            used += 1;
        }
    }
    let excluded = reference.len() - used;
    if excluded > 0 {
        log::warn!("feature fidelity: {excluded} zero-norm samples excluded");
    }
    if used == 0 {
        return Err(Error::Input("every sample has a zero-norm feature".into()));
    }
    Ok(Fidelity {
        mean_cosine: sum / used as f64,
        excluded,
    })
}

/// Zero-shot top-1 accuracy against a class-embedding matrix.
pub struct ZeroShotMetric<T> {
    pub class_embeds: Tensor<T>,
}

impl<T: Scalar> ZeroShotMetric<T> {
    pub fn new(class_embeds: Tensor<T>) -> Result<Self> {
        Ok(Self {
            class_embeds: l2_normalize_rows(&class_embeds)?,
        })
    }
}

impl<T: Scalar> ReferenceMetric<T> for ZeroShotMetric<T> {
    fn name(&self) -> String {
        "zero_shot_top1".into()
    }

    fn evaluate(&self, model: &dyn FeatureModel<T>, data: &Dataset<T>, opts: &ForwardOptions<'_, T>) -> Result<f64> {
        evaluate_accuracy(model, data, &self.class_embeds, opts)
    }
}

/// Image-to-gallery recall@K; each sample's label is the index of its matching gallery row.
pub struct RecallMetric<T> {
    pub gallery: Tensor<T>,
    pub k: usize,
}

impl<T: Scalar> ReferenceMetric<T> for RecallMetric<T> {
    fn name(&self) -> String {
        format!("recall@{}", self.k)
    }

    fn evaluate(&self, model: &dyn FeatureModel<T>, data: &Dataset<T>, opts: &ForwardOptions<'_, T>) -> Result<f64> {
        let labels = data.labels()?;
        let feats = features_of(model, data, opts)?;
        let width = feats.first().map_or(0, Tensor::len);
        let flat: Vec<T> = feats.iter().flat_map(|f| f.data().iter().copied()).collect();
        let queries = Tensor::new(vec![feats.len(), width], flat)?;
        let truth: Vec<BTreeSet<usize>> = labels.into_iter().map(|l| [l].into()).collect();
        recall_at_k(&queries, &self.gallery, &truth, self.k)
    }
}

/// Feature fidelity against a full-precision model, with reference features
/// cached per sample id.
pub struct FidelityMetric<'m, T> {
    model_fp: &'m EncoderModel<T>,
    cache: BTreeMap<String, Tensor<T>>,
}

impl<'m, T: Scalar> FidelityMetric<'m, T> {
    pub fn new(model_fp: &'m EncoderModel<T>) -> Self {
        Self {
            model_fp,
            cache: BTreeMap::new(),
        }
    }

    /// Precomputes reference features for `data`.
    pub fn with_reference(model_fp: &'m EncoderModel<T>, data: &Dataset<T>) -> Result<Self> {
        let feats = features_of(model_fp, data, &ForwardOptions::none())?;
        let cache = data.samples.iter().map(|s| s.id.clone()).zip(feats).collect();
        Ok(Self { model_fp, cache })
    }
}

impl<'m, T: Scalar> ReferenceMetric<T> for FidelityMetric<'m, T> {
    fn name(&self) -> String {
        "feature_fidelity".into()
    }

    fn evaluate(&self, model: &dyn FeatureModel<T>, data: &Dataset<T>, opts: &ForwardOptions<'_, T>) -> Result<f64> {
        let pairs: Vec<(Tensor<T>, Tensor<T>)> = data
            .samples
            .par_iter()
            .map(|s| {
                let reference = match self.cache.get(&s.id) {
                    Some(f) => f.clone(),
                    None => self.model_fp.forward(&s.image, &ForwardOptions::none())?.features,
                };
                let cand = model
                    .forward(&s.image, opts)
                    .map_err(|e| e.context(format!("sample {}", s.id)))?
                    .features;
                Ok((reference, cand))
            })
            .collect::<Result<_>>()?;
        let (r, c): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        fidelity_from(&r, &c).map(|f| f.mean_cosine)
    }
}
