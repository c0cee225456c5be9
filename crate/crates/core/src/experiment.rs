//! Batch experiments: generate, train and evaluate a grid of cells, writing
//! one file per finished cell so an interrupted run resumes where it stopped.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{MagnetError, Result};
use crate::eval::{at_resolution, points_per_axis, superres_eval, EvalOptions, EvalReport, EvalRow, InterpMode, Predictor, SuperresResult};
use crate::mesh::MeshProtocol;
use crate::model::{load_model, ModelConfig, Variant};
use crate::pdegen::{load_dataset, make_dataset, Dataset, DatasetSpec, DatasetTag};
use crate::training::{train, TrainConfig};

/// Partial configuration: any field left out keeps the variant default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: Map<String, Value>,
    pub train: Map<String, Value>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Model and training settings for data of dimension `dim` with `channels`.
    pub fn resolve(&self, variant: Variant, dim: usize, channels: usize) -> Result<(ModelConfig, TrainConfig)> {
        let history = if dim == 1 { 25 } else { 10 };
        let base = match variant {
            Variant::Gnn => ModelConfig::gnn(dim, channels, history),
            Variant::Cnn => ModelConfig::cnn(dim, channels, history),
        };
        let mut model: ModelConfig = overlay(&base, &self.model)?;
        model.variant = variant;
        model.dim = dim;
        model.channels = channels;
        model.validate()?;
        let train: TrainConfig = overlay(&TrainConfig::for_variant(variant, dim), &self.train)?;
        train.validate()?;
        Ok((model, train))
    }
}

fn overlay<T: Serialize + DeserializeOwned>(base: &T, fields: &Map<String, Value>) -> Result<T> {
    let mut v = serde_json::to_value(base)?;
    let obj = v.as_object_mut().expect("config serializes to an object");
    for (k, x) in fields {
        if !obj.contains_key(k) {
            return Err(MagnetError::Invalid(format!("unknown config field {k:?}")));
        }
        obj.insert(k.clone(), x.clone());
    }
    Ok(serde_json::from_value(v)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateSpec {
    pub tag: DatasetTag,
    pub count: usize,
    pub resolution: usize,
    #[serde(default)]
    pub n_t: Option<usize>,
    #[serde(default)]
    pub t_end: Option<f64>,
    pub seed: u64,
}

impl GenerateSpec {
    pub fn spec(&self) -> DatasetSpec {
        let mut s = DatasetSpec::new(self.tag, self.count, self.resolution, self.seed);
        if let Some(n) = self.n_t {
            s.n_t = n;
        }
        if let Some(t) = self.t_end {
            s.t_end = t;
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// An existing dataset directory.
    Path(PathBuf),
    /// Generated into the experiment directory on first use.
    Generate(GenerateSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub name: String,
    pub variant: Variant,
    #[serde(flatten)]
    pub config: RunConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_protocols() -> Vec<MeshProtocol> {
    vec![MeshProtocol::Uniform]
}

fn default_interps() -> Vec<String> {
    vec!["learned".into()]
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train_data: DataSource,
    pub test_data: DataSource,
    pub models: Vec<ModelEntry>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Test points per axis; the test dataset's own resolution when empty.
    #[serde(default)]
    pub test_res: Vec<usize>,
    #[serde(default = "default_protocols")]
    pub protocols: Vec<MeshProtocol>,
    /// `learned`, `knn[:k]`, `linear` or `cubic`.
    #[serde(default = "default_interps")]
    pub interps: Vec<String>,
    /// Sweep over training query counts M; each model's own setting when empty.
    #[serde(default)]
    pub query_counts: Vec<usize>,
    #[serde(default)]
    pub eval_horizon: Option<usize>,
    #[serde(default)]
    pub eval_seed: u64,
    /// Also score the repeat-last-frame baseline.
    #[serde(default = "yes")]
    pub persistence: bool,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() || self.seeds.is_empty() || self.protocols.is_empty() || self.interps.is_empty() {
            return Err(MagnetError::Invalid("models, seeds, protocols and interps must be non-empty".into()));
        }
        let mut names = std::collections::HashSet::new();
        for m in &self.models {
            let ok = !m.name.is_empty()
                && m.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
            if !ok || !names.insert(&m.name) {
                return Err(MagnetError::Invalid(format!("model name {:?} is empty, reused or not path-safe", m.name)));
            }
        }
        Ok(())
    }
}

/// A finished evaluation cell as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub key: String,
    pub model: String,
    pub interp: String,
    pub protocol: MeshProtocol,
    pub test_res: usize,
    pub train_res: usize,
    pub seed: u64,
    pub result: Option<SuperresResult>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub key: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub report: EvalReport,
    pub failures: Vec<CellFailure>,
    /// Cells computed by this call rather than loaded from disk.
    pub trained: usize,
    pub evaluated: usize,
}

fn load_or_make(source: &DataSource, dir: &Path) -> Result<Dataset> {
    match source {
        DataSource::Path(p) => load_dataset(p),
        DataSource::Generate(g) => {
            if dir.join("manifest.json").exists() {
                let d = load_dataset(dir)?;
                let (s, m) = (g.spec(), &d.manifest);
                let same = m.tag == s.tag
                    && m.count == s.count
                    && m.resolution == s.resolution
                    && m.n_t == s.n_t
                    && m.t_end == s.t_end
                    && m.seed == s.seed;
                if same {
                    return Ok(d);
                }
            }
            make_dataset(&g.spec(), dir)
        }
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_string_pretty(v)?)?;
    fs::rename(tmp, path)?;
    Ok(())
}

struct TrainCell {
    key: String,
    label: String,
    dir: PathBuf,
    model: ModelConfig,
    train: TrainConfig,
}

/// Runs every (model, M, seed) training cell and every (cell, interp,
/// protocol, resolution) evaluation, skipping work already on disk, then
/// writes `report.{json,csv}`, `report_frames.csv` and `failures.json`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    write_json(&out.join("experiment.json"), cfg)?;
    let train_data = load_or_make(&cfg.train_data, &out.join("data").join("train"))?;
    let test_data = load_or_make(&cfg.test_data, &out.join("data").join("test"))?;
    let dim = train_data.manifest.dim;
    let channels = train_data.manifest.channels;
    if test_data.manifest.dim != dim || test_data.manifest.channels != channels {
        return Err(MagnetError::Mismatch("train and test datasets differ in dimension or channels".into()));
    }
    let interps: Vec<InterpMode> = cfg.interps.iter().map(|s| InterpMode::parse(s, dim)).collect::<Result<_>>()?;
    let resolutions = if cfg.test_res.is_empty() {
        vec![test_data.manifest.resolution]
    } else {
        cfg.test_res.clone()
    };
    let mut tests = BTreeMap::new();
    let mut failures = Vec::new();
    for &r in &resolutions {
        match at_resolution(&test_data, r) {
            Ok(d) => {
                tests.insert(r, d);
            }
            Err(e) => failures.push(CellFailure {
                key: format!("test-r{r}"),
                error: e.to_string(),
            }),
        }
    }

    let mut cells = Vec::new();
    for entry in &cfg.models {
        let (model, base) = entry.config.resolve(entry.variant, dim, channels)?;
        let sweep: Vec<Option<usize>> = if cfg.query_counts.is_empty() {
            vec![None]
        } else {
            cfg.query_counts.iter().map(|&m| Some(m)).collect()
        };
        for m in sweep {
            for &seed in &cfg.seeds {
                let mut train = base.clone();
                train.seed = seed;
                let label = match m {
                    Some(m) => {
                        train.queries = m;
                        train.vary_queries = false;
                        format!("{}[M={m}]", entry.name)
                    }
                    None => entry.name.clone(),
                };
                let key = match m {
                    Some(m) => format!("{}_m{m}_s{seed}", entry.name),
                    None => format!("{}_s{seed}", entry.name),
                };
                cells.push(TrainCell {
                    dir: out.join("train").join(&key),
                    key,
                    label,
                    model: model.clone(),
                    train,
                });
            }
        }
    }

    let cell_dir = out.join("cells");
    fs::create_dir_all(&cell_dir)?;
    let mut trained = 0;
    let mut records = Vec::new();
    for cell in &cells {
        let done = cell.dir.join("outcome.json");
        let params = if done.exists() {
            load_model(&cell.dir).map(|(_, p)| p)
        } else {
            trained += 1;
            train(&train_data, &cell.model, &cell.train, Some(&cell.dir)).and_then(|o| {
                write_json(
                    &done,
                    &serde_json::json!({
                        "best_epoch": o.best_epoch,
                        "best_val_mae": o.best_val_mae,
                        "epochs": o.log.len(),
                        "stopped_early": o.stopped_early,
                    }),
                )?;
                Ok(o.params)
            })
        };
        let params = match params {
            Ok(p) => p,
            Err(e) => {
                failures.push(CellFailure {
                    key: cell.key.clone(),
                    error: e.to_string(),
                });
                continue;
            }
        };
        let train_res = points_per_axis(cell.train.parents, dim);
        let mut jobs = Vec::new();
        for &i in &interps {
            for &p in &cfg.protocols {
                for &r in tests.keys() {
                    jobs.push((i, p, r));
                }
            }
        }
        let evaluated: Vec<(bool, CellRecord)> = jobs
            .par_iter()
            .map(|&(interp, protocol, res)| {
                let key = format!("{}__{}__{}__r{res}", cell.key, interp.to_string().replace(':', "-"), protocol_name(protocol));
                let path = cell_dir.join(format!("{key}.json"));
                if let Some(rec) = load_record(&path) {
                    return Ok((false, rec));
                }
                let pred = Predictor::Model {
                    cfg: &cell.model,
                    params: &params,
                    interp,
                };
                let opts = EvalOptions {
                    parents: cell.train.parents,
                    protocol,
                    seed: cfg.eval_seed,
                    horizon: cfg.eval_horizon,
                };
                let rec = record(key, &cell.label, &interp.to_string(), protocol, res, train_res, cell.train.seed, superres_eval(&pred, &tests[&res], &opts));
                if rec.error.is_none() {
                    write_json(&path, &rec)?;
                }
                Ok((true, rec))
            })
            .collect::<Result<_>>()?;
        records.extend(evaluated);
    }

    if cfg.persistence {
        let first = cells.first().expect("validated non-empty");
        let history = first.model.history;
        for &protocol in &cfg.protocols {
            for (&res, data) in &tests {
                let key = format!("persistence__{}__r{res}", protocol_name(protocol));
                let path = cell_dir.join(format!("{key}.json"));
                if let Some(rec) = load_record(&path) {
                    records.push((false, rec));
                    continue;
                }
                let opts = EvalOptions {
                    parents: first.train.parents,
                    protocol,
                    seed: cfg.eval_seed,
                    horizon: cfg.eval_horizon,
                };
                let train_res = points_per_axis(first.train.parents, dim);
                let rec = record(key, "persistence", "-", protocol, res, train_res, cfg.eval_seed, superres_eval(&Predictor::Persistence { history }, data, &opts));
                if rec.error.is_none() {
                    write_json(&path, &rec)?;
                }
                records.push((true, rec));
            }
        }
    }

    let evaluated = records.iter().filter(|(fresh, _)| *fresh).count();
    let mut groups: BTreeMap<(String, String, String, usize), Vec<&CellRecord>> = BTreeMap::new();
    for (_, rec) in &records {
        match (&rec.result, &rec.error) {
            (Some(_), _) => groups
                .entry((rec.model.clone(), rec.interp.clone(), protocol_name(rec.protocol).into(), rec.test_res))
                .or_default()
                .push(rec),
            (None, e) => failures.push(CellFailure {
                key: rec.key.clone(),
                error: e.clone().unwrap_or_default(),
            }),
        }
    }
    let mut rows = Vec::new();
    for ((model, interp, _, res), recs) in groups {
        let results: Vec<(u64, SuperresResult)> = recs
            .iter()
            .map(|r| (r.seed, r.result.clone().expect("grouped on success")))
            .collect();
        rows.push(EvalRow::aggregate(
            test_data.tag(),
            &model,
            &interp,
            recs[0].protocol,
            recs[0].train_res,
            res,
            &results,
        )?);
    }
    let report = EvalReport { rows };
    report.write(out, "report")?;
    write_json(&out.join("failures.json"), &failures)?;
    Ok(ExperimentOutcome {
        report,
        failures,
        trained,
        evaluated,
    })
}

fn protocol_name(p: MeshProtocol) -> &'static str {
    match p {
        MeshProtocol::Regular => "regular",
        MeshProtocol::Uniform => "uniform",
        MeshProtocol::Condensed => "condensed",
    }
}

fn load_record(path: &Path) -> Option<CellRecord> {
    let text = fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

#[allow(clippy::too_many_arguments)]
fn record(
    key: String,
    model: &str,
    interp: &str,
    protocol: MeshProtocol,
    test_res: usize,
    train_res: usize,
    seed: u64,
    result: Result<SuperresResult>,
) -> CellRecord {
    let (result, error) = match result {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    CellRecord {
        key,
        model: model.to_string(),
        interp: interp.to_string(),
        protocol,
        test_res,
        train_res,
        seed,
        result,
        error,
    }
}
