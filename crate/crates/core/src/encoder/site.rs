use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Where inside a block an activation is observed.
///
/// The declaration order is the tie-break order used by the sensitivity scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    /// Residual stream entering the block, after any token deletion there.
    BlockIn,
    /// Input of the query/key/value projections (LN1 output).
    QkvIn,
    /// Input of the attention output projection (concatenated head outputs).
    AttnProjIn,
    /// Input of the first MLP layer (LN2 output).
    Fc1In,
    /// Input of the second MLP layer (GELU output).
    Fc2In,
    /// Residual stream leaving the block.
    BlockOutHidden,
}

impl SiteKind {
    pub const ALL: [SiteKind; 6] = [
        SiteKind::BlockIn,
        SiteKind::QkvIn,
        SiteKind::AttnProjIn,
        SiteKind::Fc1In,
        SiteKind::Fc2In,
        SiteKind::BlockOutHidden,
    ];

    pub const LINEAR: [SiteKind; 4] = [SiteKind::QkvIn, SiteKind::AttnProjIn, SiteKind::Fc1In, SiteKind::Fc2In];

    /// True for sites that feed a linear layer.
    pub fn is_linear(self) -> bool {
        Self::LINEAR.contains(&self)
    }

    pub fn name(self) -> &'static str {
        match self {
            SiteKind::BlockIn => "block_in",
            SiteKind::QkvIn => "qkv_in",
            SiteKind::AttnProjIn => "attn_proj_in",
            SiteKind::Fc1In => "fc1_in",
            SiteKind::Fc2In => "fc2_in",
            SiteKind::BlockOutHidden => "block_out_hidden",
        }
    }
}

impl fmt::Display for SiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SiteKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "block_in" => SiteKind::BlockIn,
            "qkv_in" => SiteKind::QkvIn,
            "attn_proj_in" => SiteKind::AttnProjIn,
            "fc1_in" => SiteKind::Fc1In,
            "fc2_in" => SiteKind::Fc2In,
            "block_out_hidden" => SiteKind::BlockOutHidden,
            other => return Err(Error::Config(format!("unknown site kind {other:?}"))),
        })
    }
}

/// A named activation site: `(block, kind)`. Ordered by block, then kind.
/// Serialized as the string `blocks.<b>.<kind>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerSite {
    pub block: usize,
    pub site: SiteKind,
}

impl LayerSite {
    pub const fn new(block: usize, site: SiteKind) -> Self {
        Self { block, site }
    }

    /// Every linear-layer site of a `depth`-block encoder, in tie-break order.
    pub fn all_linear(depth: usize) -> Vec<LayerSite> {
        (0..depth)
            .flat_map(|b| SiteKind::LINEAR.map(|s| LayerSite::new(b, s)))
            .collect()
    }
}

impl fmt::Display for LayerSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blocks.{}.{}", self.block, self.site)
    }
}

impl FromStr for LayerSite {
    type Err = Error;

    /// Parses `blocks.<b>.<kind>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || Error::Config(format!("malformed layer site {s:?}"));
        let rest = s.strip_prefix("blocks.").ok_or_else(bad)?;
        let (b, kind) = rest.split_once('.').ok_or_else(bad)?;
        Ok(LayerSite {
            block: b.parse().map_err(|_| bad())?,
            site: kind.parse()?,
        })
    }
}

impl Serialize for LayerSite {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerSite {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
