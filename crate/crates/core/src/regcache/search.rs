use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderModel, FeatureModel, ForwardOptions, KvPrefix, LayerSite};
use crate::error::{Error, Result};
use crate::evalkit::ReferenceMetric;
use crate::io::Dataset;
use crate::regcache::curate::CandidateSet;
use crate::regcache::{DeletionRule, Provenance, RegisterCache};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default repetition range `1..=15`.
pub fn default_tau_range() -> Vec<usize> {
    (1..=15).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RangeMode {
    /// Prefix every block from the insertion block to the last one.
    #[default]
    ToFinal,
    /// Prefix only the insertion block.
    SingleBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SearchOrder {
    /// `(block, candidate, tau, k_tilde)` searched as one grid.
    #[default]
    Joint,
    /// `(block, candidate, tau)` first with the smallest `k_tilde`, then `k_tilde` alone.
    Sequential,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchGrid {
    pub tau_range: Vec<usize>,
    pub k_tilde_range: Vec<usize>,
    pub range_mode: RangeMode,
    pub order: SearchOrder,
    /// The quantization-sensitive layer; deletion happens at its block input.
    pub l_q: LayerSite,
    pub protect_cls: bool,
}

impl SearchGrid {
    pub fn new(l_q: LayerSite) -> Self {
        Self {
            tau_range: default_tau_range(),
            k_tilde_range: vec![0],
            range_mode: RangeMode::ToFinal,
            order: SearchOrder::Joint,
            l_q,
            protect_cls: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.tau_range.is_empty() || self.k_tilde_range.is_empty() {
            return Err(Error::Config("tau and k_tilde ranges must be non-empty".into()));
        }
        if self.tau_range.contains(&0) {
            return Err(Error::Config("tau must be at least 1".into()));
        }
        Ok(())
    }
}

/// One evaluated grid point; `metric` is `None` when evaluation failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub candidate_id: usize,
    pub block: usize,
    pub tau: usize,
    pub k_tilde: usize,
    pub metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestTuple {
    pub candidate_id: usize,
    pub insertion_start: usize,
    pub tau: usize,
    pub k_tilde: usize,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: BestTuple,
    /// Sorted by `(block, candidate_id, tau, k_tilde)`.
    pub trace: Vec<TraceRow>,
}

impl SearchResult {
    /// Trace as CSV with header `candidate_id,block,tau,k_tilde,metric`.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("candidate_id,block,tau,k_tilde,metric\n");
        for r in &self.trace {
            let m = r.metric.map_or_else(String::new, |m| m.to_string());
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.candidate_id, r.block, r.tau, r.k_tilde, m
            ));
        }
        s
    }
}

/// `true` when `a` should be preferred over `b` (equal metrics fall to the tie-break).
fn better(a: &TraceRow, am: f64, b: &TraceRow, bm: f64) -> bool {
    use std::cmp::Ordering::*;
    match am.total_cmp(&bm) {
        Greater => true,
        Less => false,
        Equal => (b.candidate_id, b.tau, a.block, b.k_tilde) > (a.candidate_id, a.tau, b.block, a.k_tilde),
    }
}

/// Argmax of a trace under the documented tie-break.
pub fn best_of(trace: &[TraceRow]) -> Option<BestTuple> {
    let mut best: Option<(&TraceRow, f64)> = None;
    for r in trace {
        let Some(m) = r.metric.filter(|m| !m.is_nan()) else {
            continue;
        };
        if best.is_none_or(|(b, bm)| better(r, m, b, bm)) {
            best = Some((r, m));
        }
    }
    best.map(|(r, m)| BestTuple {
        candidate_id: r.candidate_id,
        insertion_start: r.block,
        tau: r.tau,
        k_tilde: r.k_tilde,
        metric: m,
    })
}

type KvList<T> = Vec<(Tensor<T>, Tensor<T>)>;

/// Key/value rows of one candidate for an insertion starting at `block`.
pub fn candidate_kv<T: Scalar>(
    model_fp: &EncoderModel<T>,
    pool: &Dataset<T>,
    set: &CandidateSet,
    candidate_id: usize,
    block: usize,
    mode: RangeMode,
) -> Result<KvList<T>> {
    let c = set
        .entries
        .get(candidate_id)
        .ok_or_else(|| Error::Index(format!("candidate {candidate_id} not in set")))?;
    let sample = pool
        .samples
        .iter()
        .find(|s| s.id == c.source_image_id)
        .ok_or_else(|| Error::Input(format!("source image {} not in pool", c.source_image_id)))?;
    let mut kv = model_fp.compute_prefix_kv(&sample.image, c.token_index, block)?;
    if mode == RangeMode::SingleBlock {
        kv.truncate(1);
    }
    Ok(kv)
}

struct Searcher<'a, T: Scalar> {
    model_q: &'a dyn FeatureModel<T>,
    data: &'a Dataset<T>,
    metric: &'a dyn ReferenceMetric<T>,
    grid: &'a SearchGrid,
    kv: HashMap<(usize, usize), KvList<T>>,
}

impl<'a, T: Scalar> Searcher<'a, T> {
    fn eval(&self, block: usize, cid: usize, tau: usize, k_tilde: usize) -> TraceRow {
        let prefix = KvPrefix {
            start_block: block,
            kv: self.kv[&(block, cid)].clone(),
            tau,
        };
        let opts = ForwardOptions {
            taps: Default::default(),
            prefix: Some(&prefix),
            deletion: Some(DeletionRule {
                block: self.grid.l_q.block,
                k_tilde,
                protect_cls: self.grid.protect_cls,
            }),
        };
        let metric = match self.metric.evaluate(self.model_q, self.data, &opts) {
            Ok(m) if !m.is_nan() => Some(m),
            Ok(_) => None,
            Err(e) => {
                log::warn!("grid point block={block} candidate={cid} tau={tau} k_tilde={k_tilde}: {e}");
                None
            }
        };
        TraceRow {
            candidate_id: cid,
            block,
            tau,
            k_tilde,
            metric,
        }
    }

    fn run(&self, points: Vec<(usize, usize, usize, usize)>) -> Vec<TraceRow> {
        points
            .into_par_iter()
            .map(|(b, c, t, k)| self.eval(b, c, t, k))
            .collect()
    }
}

/// Evaluates every `(insertion block, candidate, tau, k_tilde)` on the
/// quantized model and returns the best tuple with the full trace.
pub fn grid_search<T: Scalar>(
    model_q: &dyn FeatureModel<T>,
    model_fp: &EncoderModel<T>,
    pool: &Dataset<T>,
    candidates: &BTreeMap<usize, CandidateSet>,
    grid: &SearchGrid,
    ref_data: &Dataset<T>,
    metric: &dyn ReferenceMetric<T>,
) -> Result<SearchResult> {
    grid.validate()?;
    if candidates.values().all(|c| c.entries.is_empty()) {
        return Err(Error::Search("no candidates to search".into()));
    }
    let keys: Vec<(usize, usize)> = candidates
        .iter()
        .flat_map(|(&b, set)| (0..set.entries.len()).map(move |c| (b, c)))
        .collect();
    let kv: HashMap<(usize, usize), KvList<T>> = keys
        .par_iter()
        .map(|&(b, c)| {
            Ok((
                (b, c),
                candidate_kv(model_fp, pool, &candidates[&b], c, b, grid.range_mode)?,
            ))
        })
        .collect::<Result<_>>()?;
    let s = Searcher {
        model_q,
        data: ref_data,
        metric,
        grid,
        kv,
    };

    let mut trace = match grid.order {
        SearchOrder::Joint => {
            let mut pts = Vec::new();
            for &(b, c) in &keys {
                for &t in &grid.tau_range {
                    for &k in &grid.k_tilde_range {
                        pts.push((b, c, t, k));
                    }
                }
            }
            s.run(pts)
        }
        SearchOrder::Sequential => {
            let k0 = *grid.k_tilde_range.iter().min().expect("non-empty");
            let mut pts = Vec::new();
            for &(b, c) in &keys {
                for &t in &grid.tau_range {
                    pts.push((b, c, t, k0));
                }
            }
            let mut first = s.run(pts);
            let stage = best_of(&first).ok_or_else(|| Error::Search("every grid point failed".into()))?;
            let rest: Vec<_> = grid
                .k_tilde_range
                .iter()
                .filter(|&&k| k != k0)
                .map(|&k| (stage.insertion_start, stage.candidate_id, stage.tau, k))
                .collect();
            first.extend(s.run(rest));
            first
        }
    };
    trace.sort_by_key(|r| (r.block, r.candidate_id, r.tau, r.k_tilde));
    trace.dedup_by_key(|r| (r.block, r.candidate_id, r.tau, r.k_tilde));
    let best = best_of(&trace).ok_or_else(|| Error::Search("every grid point failed".into()))?;
    Ok(SearchResult { best, trace })
}

/// Materializes the register cache for a chosen tuple.
pub fn build_register_cache<T: Scalar>(
    model_fp: &EncoderModel<T>,
    pool: &Dataset<T>,
    candidates: &BTreeMap<usize, CandidateSet>,
    best: &BestTuple,
    grid: &SearchGrid,
) -> Result<RegisterCache<T>> {
    let set = candidates
        .get(&best.insertion_start)
        .ok_or_else(|| Error::Index(format!("no candidates at block {}", best.insertion_start)))?;
    let kv = candidate_kv(
        model_fp,
        pool,
        set,
        best.candidate_id,
        best.insertion_start,
        grid.range_mode,
    )?;
    let c = &set.entries[best.candidate_id];
    let cache = RegisterCache {
        prefix: KvPrefix {
            start_block: best.insertion_start,
            kv,
            tau: best.tau,
        },
        deletion: DeletionRule {
            block: grid.l_q.block,
            k_tilde: best.k_tilde,
            protect_cls: grid.protect_cls,
        },
        provenance: Provenance {
            image_id: c.source_image_id.clone(),
            token_index: c.token_index,
            l_q: grid.l_q,
        },
    };
    cache.validate()?;
    Ok(cache)
}
