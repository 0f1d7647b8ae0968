//! Pipeline commands. Every artifact is a pure function of the config and seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use regcache_core::encoder::{EncoderModel, ForwardOptions, LayerSite, SiteKind};
use regcache_core::evalkit::{FidelityMetric, RecallMetric, ReferenceMetric, ZeroShotMetric};
use regcache_core::fixture;
use regcache_core::io::{self, Dataset, TensorContainer};
use regcache_core::quant::QuantizedModelView;
use regcache_core::regcache::{
    build_register_cache, curate_multi_block, flops_delta, grid_search, CandidateSet, RegisterCache, SearchGrid,
};
use regcache_core::sensitivity::{
    norm_profile, norm_profile_with, outlier_cosine_stats, sensitivity_scan, sink_frequency_profile,
};
use regcache_core::{Error, Scalar};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{MetricKind, Precision, RunConfig};
use crate::error::{CliError, CliResult};

pub const SENSITIVITY_CSV: &str = "sensitivity.csv";
pub const SENSITIVITY_JSON: &str = "sensitivity.json";
pub const NORMS_CSV: &str = "norms.csv";
pub const PROFILE_JSON: &str = "profile.json";
pub const CANDIDATES_JSON: &str = "candidates.json";
pub const CACHE_RTC: &str = "register_cache.rtc";
pub const TRACE_CSV: &str = "search_trace.csv";
pub const SEARCH_JSON: &str = "search.json";
pub const EVAL_JSON: &str = "eval.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

/// Artifacts `report` merges.
pub const REPORT_INPUTS: [&str; 4] = [SENSITIVITY_CSV, NORMS_CSV, TRACE_CSV, EVAL_JSON];

// salts so that each use of the run seed draws an independent stream
const POOL_SALT: u64 = 0x706f_6f6c;
const SEARCH_SALT: u64 = 0x7365_6172;
const COSINE_SALT: u64 = 0x636f_7369;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Sensitivity,
    Profile,
    Curate,
    Search,
    Eval,
}

#[derive(Debug, Serialize, Deserialize)]
struct SensitivitySummary {
    l_q: LayerSite,
    baseline_metric: f64,
    metric: String,
    bits: (u32, u32),
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> CliResult<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join(name);
    std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    Ok(p)
}

fn to_json(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("artifact serializes") + "\n"
}

/// Runs one pipeline step at the configured precision.
pub fn run_step(step: Step, cfg: &RunConfig) -> CliResult<()> {
    match cfg.precision {
        Precision::F32 => Pipeline::<f32>::load(cfg)?.run(step),
        Precision::F64 => Pipeline::<f64>::load(cfg)?.run(step),
    }
}

struct Pipeline<'c, T> {
    cfg: &'c RunConfig,
    model: EncoderModel<T>,
}

impl<'c, T: Scalar> Pipeline<'c, T> {
    fn load(cfg: &'c RunConfig) -> CliResult<Self> {
        let rtc = cfg.require("model_path", &cfg.model_path)?;
        let model_cfg = cfg.model_config().expect("model path present");
        let model = io::load_model_files(rtc, &model_cfg)?.cast();
        Ok(Self { cfg, model })
    }

    fn run(&self, step: Step) -> CliResult<()> {
        match step {
            Step::Sensitivity => self.sensitivity(),
            Step::Profile => self.profile(),
            Step::Curate => self.curate().map(|_| ()),
            Step::Search => self.search(),
            Step::Eval => self.eval(),
        }
    }

    fn dataset(&self, path: Option<&PathBuf>, name: &str) -> CliResult<Dataset<T>> {
        let p = path.ok_or_else(|| CliError::Config(format!("{name} is required")))?;
        Ok(Dataset::load(p)?.cast())
    }

    fn probe(&self) -> CliResult<Dataset<T>> {
        self.dataset(self.cfg.probe_path.as_ref(), "probe_path")
    }

    fn pool(&self) -> CliResult<Dataset<T>> {
        let path = self.cfg.pool_path.as_ref().or(self.cfg.probe_path.as_ref());
        let pool = self.dataset(path, "pool_path")?;
        Ok(match self.cfg.pool_size {
            Some(n) => pool.subsample(n, self.cfg.seed ^ POOL_SALT),
            None => pool,
        })
    }

    fn eval_set(&self) -> CliResult<Dataset<T>> {
        let path = self.cfg.eval_path.as_ref().or(self.cfg.probe_path.as_ref());
        self.dataset(path, "eval_path")
    }

    fn metric<'m>(&'m self, data: &Dataset<T>) -> CliResult<Box<dyn ReferenceMetric<T> + 'm>> {
        let asset = |name: &str| -> CliResult<regcache_core::Tensor<T>> {
            let p = self.cfg.require("metric_assets_path", &self.cfg.metric_assets_path)?;
            Ok(TensorContainer::load(p)?.require(name)?.cast())
        };
        Ok(match self.cfg.metric {
            MetricKind::Fidelity => Box::new(FidelityMetric::with_reference(&self.model, data)?),
            MetricKind::ZeroShot => Box::new(ZeroShotMetric::new(asset("class_embeds")?)?),
            MetricKind::Recall(k) => Box::new(RecallMetric {
                gallery: asset("gallery")?,
                k,
            }),
        })
    }

    fn quantized(&self) -> CliResult<QuantizedModelView<'_, T>> {
        Ok(QuantizedModelView::new(&self.model, self.cfg.quant.clone())?)
    }

    fn bits(&self) -> (u32, u32) {
        (self.cfg.quant.weight_bits, self.cfg.quant.act_bits)
    }

    fn scan(&self) -> CliResult<()> {
        let probe = self.probe()?;
        let metric = self.metric(&probe)?;
        let report = sensitivity_scan(&self.model, &probe, metric.as_ref(), self.bits())?;
        let norms = norm_profile(&self.model, &probe, SiteKind::Fc2In)?;
        let out = &self.cfg.out_dir;
        write(out, SENSITIVITY_CSV, report.to_csv())?;
        write(out, NORMS_CSV, norms.to_csv())?;
        let summary = SensitivitySummary {
            l_q: report.l_q,
            baseline_metric: report.baseline_metric,
            metric: metric.name(),
            bits: self.bits(),
        };
        write(out, SENSITIVITY_JSON, to_json(&summary))?;
        println!("l_q = {}", report.l_q);
        Ok(())
    }

    fn sensitivity(&self) -> CliResult<()> {
        self.scan()
    }

    /// The configured l_q, else the one recorded by a previous sensitivity run, else a fresh scan.
    fn l_q(&self) -> CliResult<LayerSite> {
        if let Some(s) = self.cfg.search.l_q {
            return Ok(s);
        }
        let p = self.cfg.out_dir.join(SENSITIVITY_JSON);
        if !p.exists() {
            self.scan()?;
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let s: SensitivitySummary =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
        if s.l_q.block >= self.model.depth() {
            return Err(CliError::Config(format!(
                "{} names {} beyond model depth",
                p.display(),
                s.l_q
            )));
        }
        Ok(s.l_q)
    }

    fn profile(&self) -> CliResult<()> {
        let probe = self.probe()?;
        let l_q = self.l_q()?;
        let mut norms = BTreeMap::new();
        for kind in [SiteKind::BlockIn, SiteKind::Fc2In, SiteKind::BlockOutHidden] {
            norms.insert(kind.name(), norm_profile(&self.model, &probe, kind)?);
        }
        let sinks = sink_frequency_profile(&self.model, &probe, SiteKind::BlockOutHidden)?;
        let cosine = if probe.len() >= 2 {
            let site = LayerSite::new(l_q.block, SiteKind::BlockIn);
            Some(outlier_cosine_stats(
                &self.model,
                &probe,
                site,
                Some(1000),
                self.cfg.seed ^ COSINE_SALT,
            )?)
        } else {
            None
        };
        let out = &self.cfg.out_dir;
        write(out, NORMS_CSV, norms[SiteKind::Fc2In.name()].to_csv())?;
        let doc = json!({
            "l_q": l_q,
            "norms": norms,
            "sink_frequency": sinks,
            "outlier_cosine": cosine,
        });
        write(out, PROFILE_JSON, to_json(&doc))?;
        Ok(())
    }

    fn curate(&self) -> CliResult<(LayerSite, Dataset<T>, BTreeMap<usize, CandidateSet>)> {
        let l_q = self.l_q()?;
        let pool = self.pool()?;
        let k = &self.cfg.search;
        let cands = curate_multi_block(&self.model, &pool, l_q.block, k.max_preceding, k.k)?;
        write(&self.cfg.out_dir, CANDIDATES_JSON, to_json(&cands))?;
        Ok((l_q, pool, cands))
    }

    fn search(&self) -> CliResult<()> {
        let (l_q, pool, cands) = self.curate()?;
        let mut reference = self.probe()?;
        if let Some(n) = self.cfg.search_subset {
            reference = reference.subsample(n, self.cfg.seed ^ SEARCH_SALT);
        }
        let knobs = &self.cfg.search;
        let grid = SearchGrid {
            tau_range: knobs.tau_range.clone(),
            k_tilde_range: knobs.k_tilde_range.clone(),
            range_mode: knobs.range_mode,
            order: knobs.search_order,
            ..SearchGrid::new(l_q)
        };
        let q = self.quantized()?;
        let metric = self.metric(&reference)?;
        let result = grid_search(&q, &self.model, &pool, &cands, &grid, &reference, metric.as_ref())?;
        let cache = build_register_cache(&self.model, &pool, &cands, &result.best, &grid)?;
        let out = &self.cfg.out_dir;
        io::write_register_cache(&cache.cast::<f32>(), out.join(CACHE_RTC))?;
        write(out, TRACE_CSV, result.trace_csv())?;
        let flops = flops_delta(&self.model.config, Some(&cache), self.model.config.num_tokens());
        let doc = json!({
            "l_q": l_q,
            "metric": metric.name(),
            "best": result.best,
            "grid_points": result.trace.len(),
            "flops": flops,
        });
        write(out, SEARCH_JSON, to_json(&doc))?;
        println!(
            "best: block {} candidate {} tau {} k_tilde {} {} = {}",
            result.best.insertion_start,
            result.best.candidate_id,
            result.best.tau,
            result.best.k_tilde,
            metric.name(),
            result.best.metric
        );
        Ok(())
    }

    fn cache(&self) -> CliResult<Option<RegisterCache<T>>> {
        let default = self.cfg.out_dir.join(CACHE_RTC);
        let path = match &self.cfg.cache_path {
            Some(p) => p.clone(),
            None if default.exists() => default,
            None => return Ok(None),
        };
        let cache = io::read_register_cache(&path)?.cast::<T>();
        let width = self.model.config.width;
        if cache.prefix.end_block() >= self.model.depth() || cache.prefix.kv[0].0.len() != width {
            return Err(Error::Input(format!("{} does not fit this model", path.display())).into());
        }
        Ok(Some(cache))
    }

    fn eval(&self) -> CliResult<()> {
        let data = self.eval_set()?;
        let metric = self.metric(&data)?;
        let q = self.quantized()?;
        let none = ForwardOptions::none();
        let fp = metric.evaluate(&self.model, &data, &none)?;
        let vanilla = metric.evaluate(&q, &data, &none)?;
        let mut doc = json!({
            "metric": metric.name(),
            "bits": self.bits(),
            "samples": data.len(),
            "fp": fp,
            "vanilla": vanilla,
        });
        if let Some(cache) = self.cache()? {
            let regcache = metric.evaluate(&q, &data, &cache.options())?;
            let l_q = cache.provenance.l_q;
            let kind = match l_q.site {
                k @ (SiteKind::Fc2In | SiteKind::BlockIn | SiteKind::BlockOutHidden) => k,
                _ => SiteKind::BlockIn,
            };
            let before = norm_profile_with(&q, &data, kind, &none)?;
            let after = norm_profile_with(&q, &data, kind, &cache.options())?;
            let (b, a) = (before.per_block[l_q.block], after.per_block[l_q.block]);
            doc["regcache"] = json!(regcache);
            doc["norms"] = json!({
                "block": l_q.block,
                "site": kind.name(),
                "vanilla": b,
                "regcache": a,
                "max_reduction": b.max_linf / a.max_linf,
            });
            doc["flops"] = json!(flops_delta(
                &self.model.config,
                Some(&cache),
                self.model.config.num_tokens()
            ));
        }
        write(&self.cfg.out_dir, EVAL_JSON, to_json(&doc))?;
        Ok(())
    }
}

fn read_csv(path: &Path) -> CliResult<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{} is empty", path.display())))?
        .split(',')
        .map(String::from)
        .collect::<Vec<_>>();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(String::from).collect::<Vec<_>>())
        .collect::<Vec<_>>();
    if let Some(bad) = rows.iter().position(|r| r.len() != header.len()) {
        return Err(Error::Format(format!("{} row {} has the wrong column count", path.display(), bad + 1)).into());
    }
    Ok((header, rows))
}

/// `(artifact, column names, rows)`.
type Table = (&'static str, Vec<String>, Vec<Vec<Value>>);

fn cell(s: &str) -> Value {
    if s.is_empty() {
        Value::Null
    } else if let Ok(i) = s.parse::<i64>() {
        json!(i)
    } else if let Ok(f) = s.parse::<f64>() {
        json!(f)
    } else {
        json!(s)
    }
}

/// Merges the run artifacts in `run_dir` into `report.json` and a long-form `report.csv`.
pub fn report(run_dir: &Path) -> CliResult<()> {
    let missing: Vec<&str> = REPORT_INPUTS
        .iter()
        .copied()
        .filter(|n| !run_dir.join(n).exists())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Input(format!(
            "missing artifacts in {}: {}",
            run_dir.display(),
            missing.join(", ")
        ))
        .into());
    }
    let run_id = std::fs::canonicalize(run_dir)
        .map_err(|e| Error::io(run_dir, e))?
        .file_name()
        .map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned());

    let mut tables: Vec<Table> = Vec::new();
    for name in [SENSITIVITY_CSV, NORMS_CSV, TRACE_CSV] {
        let (header, rows) = read_csv(&run_dir.join(name))?;
        let rows = rows.iter().map(|r| r.iter().map(|c| cell(c)).collect()).collect();
        tables.push((name.trim_end_matches(".csv"), header, rows));
    }
    let eval_path = run_dir.join(EVAL_JSON);
    let text = std::fs::read_to_string(&eval_path).map_err(|e| Error::io(&eval_path, e))?;
    let eval: Value =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", eval_path.display())))?;
    let eval_rows = ["fp", "vanilla", "regcache"]
        .iter()
        .filter_map(|v| eval.get(*v).map(|m| vec![json!(v), m.clone()]))
        .collect();
    tables.push(("eval", vec!["variant".into(), "metric_value".into()], eval_rows));

    let mut columns: Vec<String> = Vec::new();
    for (_, h, _) in &tables {
        for c in h {
            if !columns.contains(c) {
                columns.push(c.clone());
            }
        }
    }
    let mut csv = format!("run_id,artifact,{}\n", columns.join(","));
    let mut doc = serde_json::Map::new();
    doc.insert("run_id".into(), json!(run_id));
    for (artifact, header, rows) in &tables {
        let mut objs = Vec::new();
        for r in rows {
            let obj: serde_json::Map<String, Value> = header.iter().cloned().zip(r.iter().cloned()).collect();
            let line: Vec<String> = columns
                .iter()
                .map(|c| match obj.get(c) {
                    None | Some(Value::Null) => String::new(),
                    Some(Value::String(s)) => s.clone(),
                    Some(v) => v.to_string(),
                })
                .collect();
            csv.push_str(&format!("{run_id},{artifact},{}\n", line.join(",")));
            objs.push(Value::Object(obj));
        }
        doc.insert(artifact.to_string(), Value::Array(objs));
    }
    doc.insert("eval_summary".into(), eval);
    write(run_dir, REPORT_JSON, to_json(&doc))?;
    write(run_dir, REPORT_CSV, csv)?;
    Ok(())
}

/// Settings for the planted-outlier demo assets.
#[derive(Debug, Clone)]
pub struct FixtureSpec {
    pub seed: u64,
    pub probe: usize,
    pub pool: usize,
}

/// Writes the planted-outlier model, probe and pool sets and a ready-to-run config into `dir`.
pub fn make_fixture(dir: &Path, spec: &FixtureSpec) -> CliResult<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let model: EncoderModel<f32> = fixture::planted_model(spec.seed);
    io::save_model_files(&model, dir.join("model.rtc"), dir.join("model.json"))?;
    let placement = fixture::BackgroundPlacement::Random;
    fixture::planted_images::<f32>(spec.probe, placement, spec.seed.wrapping_add(1000)).save(dir, "probe")?;
    fixture::planted_images::<f32>(spec.pool, placement, spec.seed.wrapping_add(2000)).save(dir, "pool")?;
    let cfg = json!({
        "model_path": "model.rtc",
        "probe_path": "probe.json",
        "pool_path": "pool.json",
        "metric": "fidelity",
        "quant": {"weight_bits": 8, "act_bits": 8},
        "search": {"k": 3, "max_preceding": 3, "tau_range": [1, 2, 3, 4], "k_tilde_range": [0, 1]},
        "out_dir": "run",
        "seed": spec.seed,
    });
    write(dir, "config.json", to_json(&cfg))
}
