//! Run configuration: a JSON file, overridden by command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use regcache_core::encoder::LayerSite;
use regcache_core::quant::QuantSpec;
use regcache_core::regcache::{default_tau_range, RangeMode, SearchOrder, DEFAULT_K, DEFAULT_MAX_PRECEDING};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    ZeroShot,
    Fidelity,
    Recall(usize),
}

impl FromStr for MetricKind {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "zero_shot" => Ok(Self::ZeroShot),
            "fidelity" => Ok(Self::Fidelity),
            _ => s
                .strip_prefix("recall@")
                .and_then(|k| k.parse().ok())
                .filter(|&k| k > 0)
                .map(Self::Recall)
                .ok_or_else(|| CliError::Config(format!("unknown metric {s:?} (zero_shot, fidelity or recall@K)"))),
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ZeroShot => f.write_str("zero_shot"),
            Self::Fidelity => f.write_str("fidelity"),
            Self::Recall(k) => write!(f, "recall@{k}"),
        }
    }
}

impl Serialize for MetricKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MetricKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchKnobs {
    pub k: usize,
    pub max_preceding: usize,
    pub tau_range: Vec<usize>,
    pub k_tilde_range: Vec<usize>,
    pub range_mode: RangeMode,
    pub search_order: SearchOrder,
    /// Sensitive site; taken from a previous sensitivity run or scanned when absent.
    pub l_q: Option<LayerSite>,
}

impl Default for SearchKnobs {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            max_preceding: DEFAULT_MAX_PRECEDING,
            tau_range: default_tau_range(),
            k_tilde_range: vec![0],
            range_mode: RangeMode::ToFinal,
            search_order: SearchOrder::Joint,
            l_q: None,
        }
    }
}

/// Everything a command needs. Relative paths are resolved against the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model_path: Option<PathBuf>,
    /// Defaults to `model_path` with a `.json` extension.
    #[serde(default)]
    pub model_config_path: Option<PathBuf>,
    #[serde(default)]
    pub probe_path: Option<PathBuf>,
    /// Defaults to the probe set.
    #[serde(default)]
    pub pool_path: Option<PathBuf>,
    /// Defaults to the probe set.
    #[serde(default)]
    pub eval_path: Option<PathBuf>,
    #[serde(default = "default_metric")]
    pub metric: MetricKind,
    /// Container holding `class_embeds` (zero-shot) or `gallery` (recall).
    #[serde(default)]
    pub metric_assets_path: Option<PathBuf>,
    #[serde(default = "default_quant")]
    pub quant: QuantSpec,
    #[serde(default)]
    pub search: SearchKnobs,
    /// Random subset of the pool used for curation.
    #[serde(default)]
    pub pool_size: Option<usize>,
    /// Random subset of the probe set used as search reference data.
    #[serde(default)]
    pub search_subset: Option<usize>,
    #[serde(default)]
    pub cache_path: Option<PathBuf>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub precision: Precision,
}

fn default_metric() -> MetricKind {
    MetricKind::Fidelity
}

fn default_quant() -> QuantSpec {
    QuantSpec::w8a8()
}

fn default_out() -> PathBuf {
    PathBuf::from("run")
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

/// Values given on the command line; `None` leaves the file value in place.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub bits: Option<(u32, u32)>,
    pub metric: Option<MetricKind>,
    pub cache: Option<PathBuf>,
}

pub fn parse_bits(s: &str) -> CliResult<(u32, u32)> {
    let bad = || CliError::Config(format!("--bits expects W,A, got {s:?}"));
    let (w, a) = s.split_once(',').ok_or_else(bad)?;
    Ok((
        w.trim().parse().map_err(|_| bad())?,
        a.trim().parse().map_err(|_| bad())?,
    ))
}

fn rebase(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    /// Reads `path` (or the defaults when `None`) and applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                let mut cfg: RunConfig =
                    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                let base = p.parent().unwrap_or(Path::new(".")).to_path_buf();
                for f in [
                    &mut cfg.model_path,
                    &mut cfg.model_config_path,
                    &mut cfg.probe_path,
                    &mut cfg.pool_path,
                    &mut cfg.eval_path,
                    &mut cfg.metric_assets_path,
                    &mut cfg.cache_path,
                ] {
                    rebase(&base, f);
                }
                if cfg.out_dir.is_relative() {
                    cfg.out_dir = base.join(&cfg.out_dir);
                }
                cfg
            }
            None => RunConfig::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, o: &Overrides) {
        if let Some(m) = &o.model {
            self.model_path = Some(m.clone());
            self.model_config_path = None;
        }
        if let Some(out) = &o.out {
            self.out_dir = out.clone();
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(t) = o.threads {
            self.threads = Some(t);
        }
        if let Some((w, a)) = o.bits {
            self.quant.weight_bits = w;
            self.quant.act_bits = a;
        }
        if let Some(m) = o.metric {
            self.metric = m;
        }
        if let Some(c) = &o.cache {
            self.cache_path = Some(c.clone());
        }
    }

    /// Checks value ranges and that every referenced input exists.
    pub fn validate(&self) -> CliResult<()> {
        self.quant.validate()?;
        if self.threads == Some(0) {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        if self.search.k == 0 {
            return Err(CliError::Config("search.k must be at least 1".into()));
        }
        if self.search.tau_range.is_empty() || self.search.tau_range.contains(&0) {
            return Err(CliError::Config(
                "search.tau_range must be non-empty with tau >= 1".into(),
            ));
        }
        if self.search.k_tilde_range.is_empty() {
            return Err(CliError::Config("search.k_tilde_range must be non-empty".into()));
        }
        if matches!(self.metric, MetricKind::ZeroShot | MetricKind::Recall(_)) && self.metric_assets_path.is_none() {
            return Err(CliError::Config(format!(
                "metric {} needs metric_assets_path",
                self.metric
            )));
        }
        let model_cfg = self.model_config();
        let inputs = [
            ("model_path", self.model_path.as_ref()),
            ("model_config_path", model_cfg.as_ref()),
            ("probe_path", self.probe_path.as_ref()),
            ("pool_path", self.pool_path.as_ref()),
            ("eval_path", self.eval_path.as_ref()),
            ("metric_assets_path", self.metric_assets_path.as_ref()),
            ("cache_path", self.cache_path.as_ref()),
        ];
        for (name, p) in inputs {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(CliError::Config(format!("{name} {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> Option<PathBuf> {
        self.model_config_path
            .clone()
            .or_else(|| self.model_path.as_ref().map(|p| p.with_extension("json")))
    }

    pub fn require<'a>(&self, name: &str, p: &'a Option<PathBuf>) -> CliResult<&'a PathBuf> {
        p.as_ref()
            .ok_or_else(|| CliError::Config(format!("{name} is required")))
    }
}
