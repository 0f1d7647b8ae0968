//! Register curation, KV-cache grid search, token deletion and FLOP accounting.

mod curate;
mod deletion;
mod flops;
mod search;

use serde::{Deserialize, Serialize};

pub use curate::{curate, curate_multi_block, curate_sites, Candidate, CandidateSet, DEFAULT_K, DEFAULT_MAX_PRECEDING};
pub use deletion::{select_deletion, DeletionRule};
pub use flops::{flops_delta, flops_delta_shape, forward_flops, FlopsReport, FlopsShape};
pub use search::{
    best_of, build_register_cache, candidate_kv, default_tau_range, grid_search, BestTuple, RangeMode, SearchGrid,
    SearchOrder, SearchResult, TraceRow,
};

use crate::encoder::{ForwardOptions, KvPrefix, LayerSite};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Where a cached register came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub image_id: String,
    pub token_index: usize,
    pub l_q: LayerSite,
}

/// A deployable register: per-block prefix keys/values plus the deletion rule.
#[derive(Debug, Clone, PartialEq)]
pub struct RegisterCache<T> {
    pub prefix: KvPrefix<T>,
    pub deletion: DeletionRule,
    pub provenance: Provenance,
}

impl<T: Scalar> RegisterCache<T> {
    /// Inclusive block range receiving the prefix.
    pub fn insertion_range(&self) -> (usize, usize) {
        (self.prefix.start_block, self.prefix.end_block())
    }

    pub fn validate(&self) -> Result<()> {
        if self.prefix.kv.is_empty() {
            return Err(Error::Contract("register cache has an empty insertion range".into()));
        }
        if self.prefix.tau == 0 {
            return Err(Error::Contract("tau must be at least 1".into()));
        }
        let width = self.prefix.kv[0].0.len();
        for (i, (k, v)) in self.prefix.kv.iter().enumerate() {
            if k.ndim() != 1 || v.ndim() != 1 || k.len() != width || v.len() != width {
                return Err(Error::Contract(format!(
                    "block {}: key/value must be vectors of width {width}",
                    self.prefix.start_block + i
                )));
            }
        }
        if self.deletion.k_tilde > 0 && !self.prefix.covers(self.deletion.block) {
            return Err(Error::Contract(format!(
                "deletion block {} outside insertion range {:?}",
                self.deletion.block,
                self.insertion_range()
            )));
        }
        Ok(())
    }

    /// Forward options that apply this cache.
    pub fn options(&self) -> ForwardOptions<'_, T> {
        ForwardOptions {
            taps: Default::default(),
            prefix: Some(&self.prefix),
            deletion: Some(self.deletion),
        }
    }

    pub fn cast<U: Scalar>(&self) -> RegisterCache<U> {
        RegisterCache {
            prefix: KvPrefix {
                start_block: self.prefix.start_block,
                kv: self.prefix.kv.iter().map(|(k, v)| (k.cast(), v.cast())).collect(),
                tau: self.prefix.tau,
            },
            deletion: self.deletion,
            provenance: self.provenance.clone(),
        }
    }
}
