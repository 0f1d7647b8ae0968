//! Simulated round-to-nearest quantization.
//!
//! Values stay in floating point; quantize-dequantize reproduces the rounding
//! a symmetric signed integer grid with a per-tensor max-abs scale would apply.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderModel, LayerSite, SiteKind};
use crate::error::{Error, Result};
use crate::ops::linear;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bit width meaning "no quantization".
pub const PASS_THROUGH_BITS: u32 = 32;

/// Largest grid index `2^(bits-1) - 1`; the grid is symmetric and excludes `-2^(bits-1)`.
pub fn grid_max(bits: u32) -> Result<i64> {
    match bits {
        3 | 4 | 6 | 8 => Ok((1i64 << (bits - 1)) - 1),
        b => Err(Error::Config(format!("unsupported bit width {b}"))),
    }
}

/// Quantize-dequantize with the per-tensor max-abs scale; returns the result and the scale.
pub fn qdq_scaled<T: Scalar>(x: &Tensor<T>, bits: u32) -> Result<(Tensor<T>, T)> {
    let qmax = grid_max(bits)?;
    let max = x.max_abs();
    if max == T::zero() {
        return Ok((x.clone(), T::zero()));
    }
    let qmax_t = T::from_i64(qmax).expect("small integer");
    let s = max / qmax_t;
    let y = x.map(|v| {
        let q = (v / s).round().max(-qmax_t).min(qmax_t);
        // grid endpoints dequantize to exactly ±max, which keeps qdq idempotent
        if q == qmax_t {
            max
        } else if q == -qmax_t {
            -max
        } else {
            q * s
        }
    });
    Ok((y, s))
}

/// `clamp(round(x/s)) · s` with `s = max|x| / (2^(bits-1) - 1)`, ties away from zero.
pub fn qdq<T: Scalar>(x: &Tensor<T>, bits: u32) -> Result<Tensor<T>> {
    qdq_scaled(x, bits).map(|(y, _)| y)
}

/// Like [`qdq`] but treats 32 bits as identity.
pub fn qdq_with_bits<T: Scalar>(x: &Tensor<T>, bits: u32) -> Result<Tensor<T>> {
    if bits == PASS_THROUGH_BITS {
        Ok(x.clone())
    } else {
        qdq(x, bits)
    }
}

/// `qdq(x, act_bits) · w_qdqᵀ + b`, the scale taken from this call's `x`.
pub fn quantized_linear<T: Scalar>(
    x: &Tensor<T>,
    w_qdq: &Tensor<T>,
    b: &Tensor<T>,
    act_bits: u32,
) -> Result<Tensor<T>> {
    linear(&qdq_with_bits(x, act_bits)?, w_qdq, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QuantScheme {
    #[default]
    SymmetricRtn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    PerTensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    #[default]
    Dynamic,
}

/// Which linear layers a spec quantizes.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum TargetSites {
    #[default]
    All,
    Sites(BTreeSet<LayerSite>),
}

impl Serialize for TargetSites {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TargetSites::All => s.serialize_str("all"),
            TargetSites::Sites(set) => set.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for TargetSites {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Word(String),
            List(BTreeSet<LayerSite>),
        }
        match Raw::deserialize(d)? {
            Raw::Word(w) if w == "all" => Ok(TargetSites::All),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "target_sites must be \"all\" or a list, got {w:?}"
            ))),
            Raw::List(l) => Ok(TargetSites::Sites(l)),
        }
    }
}

/// Simulated quantization settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub weight_bits: u32,
    pub act_bits: u32,
    #[serde(default)]
    pub scheme: QuantScheme,
    #[serde(default)]
    pub granularity: Granularity,
    #[serde(default)]
    pub act_mode: ActMode,
    #[serde(default)]
    pub target_sites: TargetSites,
}

impl QuantSpec {
    pub fn new(weight_bits: u32, act_bits: u32) -> Self {
        Self {
            weight_bits,
            act_bits,
            scheme: QuantScheme::SymmetricRtn,
            granularity: Granularity::PerTensor,
            act_mode: ActMode::Dynamic,
            target_sites: TargetSites::All,
        }
    }

    pub fn w8a8() -> Self {
        Self::new(8, 8)
    }

    /// Only one linear layer quantized.
    pub fn single_site(weight_bits: u32, act_bits: u32, site: LayerSite) -> Self {
        Self {
            target_sites: TargetSites::Sites([site].into()),
            ..Self::new(weight_bits, act_bits)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.weight_bits, 3 | 4 | 6 | 8 | PASS_THROUGH_BITS) {
            return Err(Error::Config(format!(
                "weight_bits {} not in {{3,4,6,8,32}}",
                self.weight_bits
            )));
        }
        if !matches!(self.act_bits, 6 | 8 | PASS_THROUGH_BITS) {
            return Err(Error::Config(format!("act_bits {} not in {{6,8,32}}", self.act_bits)));
        }
        if let TargetSites::Sites(s) = &self.target_sites {
            if s.is_empty() {
                return Err(Error::Config("target_sites is empty".into()));
            }
            if let Some(bad) = s.iter().find(|s| !s.site.is_linear()) {
                return Err(Error::Config(format!("{bad} is not a linear-layer site")));
            }
        }
        Ok(())
    }

    fn resolve_sites(&self, depth: usize) -> Result<Vec<LayerSite>> {
        match &self.target_sites {
            TargetSites::All => Ok(LayerSite::all_linear(depth)),
            TargetSites::Sites(s) => {
                if let Some(bad) = s.iter().find(|s| s.block >= depth) {
                    return Err(Error::Config(format!("{bad} beyond depth {depth}")));
                }
                Ok(s.iter().copied().collect())
            }
        }
    }
}

/// One of the six linear layers of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LinearSlot {
    Q,
    K,
    V,
    O,
    Fc1,
    Fc2,
}

impl LinearSlot {
    pub fn site_kind(self) -> SiteKind {
        match self {
            LinearSlot::Q | LinearSlot::K | LinearSlot::V => SiteKind::QkvIn,
            LinearSlot::O => SiteKind::AttnProjIn,
            LinearSlot::Fc1 => SiteKind::Fc1In,
            LinearSlot::Fc2 => SiteKind::Fc2In,
        }
    }

    pub fn for_site(kind: SiteKind) -> &'static [LinearSlot] {
        match kind {
            SiteKind::QkvIn => &[LinearSlot::Q, LinearSlot::K, LinearSlot::V],
            SiteKind::AttnProjIn => &[LinearSlot::O],
            SiteKind::Fc1In => &[LinearSlot::Fc1],
            SiteKind::Fc2In => &[LinearSlot::Fc2],
            _ => &[],
        }
    }
}

/// An encoder whose targeted linear layers run with simulated quantization.
///
/// Weights are quantize-dequantized once here; activations are quantized on
/// every forward call with a scale taken from that call's tensor.
#[derive(Debug, Clone)]
pub struct QuantizedModelView<'m, T> {
    pub base: &'m EncoderModel<T>,
    pub spec: QuantSpec,
    weights: BTreeMap<(usize, LinearSlot), Tensor<T>>,
}

impl<'m, T: Scalar> QuantizedModelView<'m, T> {
    pub fn new(base: &'m EncoderModel<T>, spec: QuantSpec) -> Result<Self> {
        spec.validate()?;
        let mut weights = BTreeMap::new();
        for site in spec.resolve_sites(base.depth())? {
            let blk = &base.blocks[site.block];
            for &slot in LinearSlot::for_site(site.site) {
                let w = match slot {
                    LinearSlot::Q => &blk.wq,
                    LinearSlot::K => &blk.wk,
                    LinearSlot::V => &blk.wv,
                    LinearSlot::O => &blk.wo,
                    LinearSlot::Fc1 => &blk.fc1_w,
                    LinearSlot::Fc2 => &blk.fc2_w,
                };
                weights.insert((site.block, slot), qdq_with_bits(w, spec.weight_bits)?);
            }
        }
        Ok(Self { base, spec, weights })
    }

    /// Quantize-dequantized weight of a targeted layer, `None` when the layer runs in full precision.
    pub fn weight(&self, block: usize, slot: LinearSlot) -> Option<&Tensor<T>> {
        self.weights.get(&(block, slot))
    }

    pub fn targets(&self, site: LayerSite) -> bool {
        LinearSlot::for_site(site.site)
            .first()
            .is_some_and(|&s| self.weights.contains_key(&(site.block, s)))
    }
}

/// Builds the quantized view of `model` described by `spec`.
pub fn build_quant_view<T: Scalar>(model: &EncoderModel<T>, spec: QuantSpec) -> Result<QuantizedModelView<'_, T>> {
    QuantizedModelView::new(model, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Elementwise formula evaluated in f64, independent of the tensor path.
    fn scalar_rtn(xs: &[f64], bits: u32) -> Vec<f64> {
        let qmax = (2f64).powi(bits as i32 - 1) - 1.0;
        let m = xs.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if m == 0.0 {
            return xs.to_vec();
        }
        let s = m / qmax;
        xs.iter()
            .map(|v| {
                let r = v / s;
                let q = r.signum() * (r.abs() + 0.5).floor();
                q.clamp(-qmax, qmax) * s
            })
            .collect()
    }

    #[test]
    fn qdq_examples() {
        let z = Tensor::<f32>::zeros(&[3, 2]);
        assert_eq!(qdq(&z, 8).unwrap(), z);

        let x = Tensor::vector(vec![0.37f32, -2.5, 2.5, 1.1, -0.003]);
        let y = qdq(&x, 8).unwrap();
        assert_eq!(y.data()[1], -2.5);
        assert_eq!(y.data()[2], 2.5);

        let x = Tensor::vector(vec![1.0f32, -0.5, 0.25]);
        let oracle = scalar_rtn(&[1.0, -0.5, 0.25], 8);
        // s = 1/127: 1 -> 127, -0.5 -> -63.5 -> -64, 0.25 -> 31.75 -> 32
        assert_eq!(oracle, vec![1.0, -64.0 / 127.0, 32.0 / 127.0]);
        let y = qdq(&x, 8).unwrap();
        for (a, e) in y.data().iter().zip(&oracle) {
            assert!((*a as f64 - e).abs() <= 1e-6 * e.abs().max(1e-6));
        }
    }

    #[test]
    fn bit_width_checks() {
        let x = Tensor::vector(vec![1.0f32]);
        assert!(matches!(qdq(&x, 5), Err(Error::Config(_))));
        assert!(matches!(qdq(&x, 32), Err(Error::Config(_))));
        assert_eq!(qdq_with_bits(&x, 32).unwrap(), x);
        assert_eq!(grid_max(3).unwrap(), 3);
        assert_eq!(grid_max(4).unwrap(), 7);
        assert_eq!(grid_max(6).unwrap(), 31);
        assert!(QuantSpec::new(5, 8).validate().is_err());
        assert!(QuantSpec::new(8, 4).validate().is_err());
        assert!(QuantSpec::new(3, 32).validate().is_ok());
        let mut s = QuantSpec::w8a8();
        s.target_sites = TargetSites::Sites(BTreeSet::new());
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        s.target_sites = TargetSites::Sites([LayerSite::new(0, SiteKind::BlockIn)].into());
        assert!(s.validate().is_err());
    }

    #[test]
    fn quantized_linear_examples() {
        let x = Tensor::from_rows(&[vec![0.3f32, -1.2, 0.8], vec![2.0, 0.1, -0.4]]);
        let w = Tensor::from_rows(&[vec![0.5f32, -0.25, 1.0], vec![0.1, 0.2, -0.3]]);
        let b = Tensor::vector(vec![0.01f32, -0.02]);
        assert_eq!(quantized_linear(&x, &w, &b, 32).unwrap(), linear(&x, &w, &b).unwrap());

        // values already on their own 8-bit grid: scale 2/127
        let on_grid = Tensor::vector(vec![2.0f32, -(64.0 * 2.0 / 127.0), 10.0 * 2.0 / 127.0])
            .reshape(vec![1, 3])
            .unwrap();
        assert_eq!(qdq(&on_grid, 8).unwrap(), on_grid);
        assert_eq!(
            quantized_linear(&on_grid, &w, &b, 8).unwrap(),
            linear(&on_grid, &w, &b).unwrap()
        );

        // composition by hand in f64
        let xq = scalar_rtn(&x.data().iter().map(|&v| v as f64).collect::<Vec<_>>(), 8);
        let y = quantized_linear(&x, &w, &b, 8).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = b.data()[j] as f64;
                for t in 0..3 {
                    acc += xq[i * 3 + t] * w.row(j)[t] as f64;
                }
                assert!((y.row(i)[j] as f64 - acc).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn spec_serde_round_trip() {
        let s = QuantSpec::single_site(8, 8, LayerSite::new(2, SiteKind::Fc2In));
        let j = serde_json::to_string(&s).unwrap();
        assert!(j.contains("\"blocks.2.fc2_in\""));
        assert_eq!(serde_json::from_str::<QuantSpec>(&j).unwrap(), s);
        let all: QuantSpec = serde_json::from_str(r#"{"weight_bits":8,"act_bits":6,"target_sites":"all"}"#).unwrap();
        assert_eq!(all.target_sites, TargetSites::All);
        assert_eq!(all.scheme, QuantScheme::SymmetricRtn);
    }

    proptest! {
        #[test]
        fn matches_scalar_oracle(
            d in proptest::collection::vec(-100.0f32..100.0, 1..40),
            bits in prop::sample::select(vec![3u32, 4, 6, 8]),
        ) {
            let x = Tensor::vector(d.clone());
            let y = qdq(&x, bits).unwrap();
            let o = scalar_rtn(&d.iter().map(|&v| v as f64).collect::<Vec<_>>(), bits);
            let m = x.max_abs() as f64;
            for (a, e) in y.data().iter().zip(&o) {
                prop_assert!((*a as f64 - e).abs() <= 1e-6 * m.max(1e-30));
            }
        }
    }
}
