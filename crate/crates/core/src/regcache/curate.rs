use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderModel, FeatureModel, ForwardOptions, LayerSite, SiteKind};
use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::scalar::Scalar;

/// Default number of register candidates per block.
pub const DEFAULT_K: usize = 20;
/// Default number of blocks searched before the sensitive block.
pub const DEFAULT_MAX_PRECEDING: usize = 3;

/// A token observed in a reference image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub source_image_id: String,
    pub token_index: usize,
    pub linf_norm: f64,
    /// `(row, col)` in the patch grid; `None` never occurs since cls is excluded.
    pub patch_coords: Option<(usize, usize)>,
}

/// Top-k tokens by ℓ∞ norm at one site across a pool of images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub entries: Vec<Candidate>,
    pub site: LayerSite,
    pub k: usize,
    /// Fewer than `k` tokens were available.
    pub truncated: bool,
}

fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.linf_norm
        .total_cmp(&a.linf_norm)
        .then_with(|| a.source_image_id.cmp(&b.source_image_id))
        .then(a.token_index.cmp(&b.token_index))
}

/// Curates candidates at several sites from one full-precision pass per image.
pub fn curate_sites<T: Scalar>(
    model_fp: &EncoderModel<T>,
    pool: &Dataset<T>,
    sites: &[LayerSite],
    k: usize,
) -> Result<BTreeMap<LayerSite, CandidateSet>> {
    if pool.is_empty() {
        return Err(Error::Input("reference pool is empty".into()));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let cfg = &model_fp.config;
    let skip = usize::from(cfg.has_cls());
    let grid = cfg.grid();
    let opts = ForwardOptions::with_taps(sites.iter().copied());

    // per image, per site: its own top-k, which is enough for the global top-k
    let per_image: Vec<Vec<Vec<Candidate>>> = pool
        .samples
        .par_iter()
        .map(|s| {
            let out = model_fp.forward(&s.image, &opts)?;
            Ok(sites
                .iter()
                .map(|&site| {
                    let tap = out.tap(site).expect("requested tap");
                    let mut c: Vec<Candidate> = tap
                        .row_linf()
                        .into_iter()
                        .enumerate()
                        .skip(skip)
                        .map(|(t, n)| Candidate {
                            source_image_id: s.id.clone(),
                            token_index: t,
                            linf_norm: n.to_f64_lossy(),
                            patch_coords: Some(((t - skip) / grid, (t - skip) % grid)),
                        })
                        .collect();
                    c.sort_by(rank);
                    c.truncate(k);
                    c
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let available = pool.len() * (cfg.num_tokens() - skip);
    let mut out = BTreeMap::new();
    for (si, &site) in sites.iter().enumerate() {
        let mut all: Vec<Candidate> = per_image.iter().flat_map(|img| img[si].iter().cloned()).collect();
        all.sort_by(rank);
        all.truncate(k);
        let truncated = available < k;
        if truncated {
            log::warn!("curate at {site}: only {available} tokens for k={k}");
        }
        out.insert(
            site,
            CandidateSet {
                entries: all,
                site,
                k,
                truncated,
            },
        );
    }
    Ok(out)
}

/// Global top-`k` tokens by ℓ∞ norm at `site`, cls excluded.
pub fn curate<T: Scalar>(
    model_fp: &EncoderModel<T>,
    pool: &Dataset<T>,
    site: LayerSite,
    k: usize,
) -> Result<CandidateSet> {
    Ok(curate_sites(model_fp, pool, &[site], k)?
        .remove(&site)
        .expect("site curated"))
}

/// Candidate sets at the block inputs of `l_q_block` and up to `max_preceding` earlier blocks.
pub fn curate_multi_block<T: Scalar>(
    model_fp: &EncoderModel<T>,
    pool: &Dataset<T>,
    l_q_block: usize,
    max_preceding: usize,
    k: usize,
) -> Result<BTreeMap<usize, CandidateSet>> {
    if l_q_block >= model_fp.depth() {
        return Err(Error::Index(format!(
            "block {l_q_block} beyond depth {}",
            model_fp.depth()
        )));
    }
    let first = l_q_block.saturating_sub(max_preceding);
    let sites: Vec<LayerSite> = (first..=l_q_block)
        .map(|b| LayerSite::new(b, SiteKind::BlockIn))
        .collect();
    Ok(curate_sites(model_fp, pool, &sites, k)?
        .into_iter()
        .map(|(s, c)| (s.block, c))
        .collect())
}
