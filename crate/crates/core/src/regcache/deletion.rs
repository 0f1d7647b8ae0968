use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Removes the `k_tilde` largest-ℓ∞ tokens at the input of `block`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeletionRule {
    pub block: usize,
    pub k_tilde: usize,
    /// The cls token is never eligible when set.
    pub protect_cls: bool,
}

impl DeletionRule {
    pub fn new(block: usize, k_tilde: usize) -> Self {
        Self {
            block,
            k_tilde,
            protect_cls: true,
        }
    }
}

/// Row indices (ascending) of the `k_tilde` rows with the largest ℓ∞ norm,
/// skipping `protect`. Equal norms resolve to the lower index.
pub fn select_deletion<T: Scalar>(x: &Tensor<T>, k_tilde: usize, protect: &[usize]) -> Result<Vec<usize>> {
    if k_tilde == 0 {
        return Ok(Vec::new());
    }
    let norms = x.row_linf();
    let mut eligible: Vec<(usize, T)> = norms
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !protect.contains(i))
        .collect();
    if k_tilde >= eligible.len() {
        return Err(Error::Contract(format!(
            "cannot delete {k_tilde} of {} eligible tokens",
            eligible.len()
        )));
    }
    eligible.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    let mut out: Vec<usize> = eligible[..k_tilde].iter().map(|&(i, _)| i).collect();
    out.sort_unstable();
    Ok(out)
}
