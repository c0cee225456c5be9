//! Metrics and the zero-shot super-resolution harness.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tensorcore::{ParamStore, Tensor};

use crate::baseline::{interp_baseline, InterpMethod};
use crate::error::{MagnetError, Result};
use crate::mesh::{split_with_protocol, MeshProtocol};
use crate::model::{rollout, ModelConfig, RolloutGeometry, RolloutInputs};
use crate::pdegen::{Dataset, DatasetTag};
use crate::training::{normalized_times, window_rows};

/// Mean absolute error over every frame, point and channel.
pub fn mae(pred: &[f32], truth: &[f32], channels: usize) -> Result<f64> {
    if pred.len() != truth.len() || channels == 0 || pred.len() % channels != 0 {
        return Err(MagnetError::Shape(format!(
            "prediction of {} values against {} with {channels} channels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| (p as f64 - t as f64).abs())
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Population mean and standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// How query values for the past T frames are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum InterpMode {
    Learned,
    Baseline { method: InterpMethod },
}

impl InterpMode {
    pub fn parse(s: &str, dim: usize) -> Result<Self> {
        if s.eq_ignore_ascii_case("learned") {
            Ok(InterpMode::Learned)
        } else {
            Ok(InterpMode::Baseline {
                method: InterpMethod::parse(s, dim)?,
            })
        }
    }
}

impl std::fmt::Display for InterpMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InterpMode::Learned => write!(f, "learned"),
            InterpMode::Baseline { method } => write!(f, "{method}"),
        }
    }
}

/// Something that turns T observed frames into a forecast on all nodes.
pub enum Predictor<'a> {
    Model {
        cfg: &'a ModelConfig,
        params: &'a ParamStore,
        interp: InterpMode,
    },
    /// Repeats the last observed frame (taken on every node).
    Persistence { history: usize },
    /// Returns the ground truth.
    Oracle { history: usize },
}

impl Predictor<'_> {
    pub fn history(&self) -> usize {
        match self {
            Predictor::Model { cfg, .. } => cfg.history,
            Predictor::Persistence { history } | Predictor::Oracle { history } => *history,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Predictor::Model { cfg, interp, .. } => {
                let v = serde_json::to_value(cfg.variant).ok();
                let v = v.as_ref().and_then(|v| v.as_str()).unwrap_or("model").to_string();
                match interp {
                    InterpMode::Learned => format!("magnet-{v}"),
                    InterpMode::Baseline { method } => format!("magnet-{v}+{method}"),
                }
            }
            Predictor::Persistence { .. } => "persistence".into(),
            Predictor::Oracle { .. } => "oracle".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Parent mesh size N (the training resolution).
    pub parents: usize,
    pub protocol: MeshProtocol,
    pub seed: u64,
    /// Forecast length; all remaining frames when unset.
    pub horizon: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperresResult {
    pub num_parents: usize,
    pub num_queries: usize,
    pub per_sim: Vec<f64>,
    /// MAE of each forecast frame, averaged over simulations.
    pub per_frame: Vec<f64>,
    pub runtime_s: f64,
}

/// Feeds the first T frames on N parents drawn from the test mesh, queries
/// every other test point, rolls out and scores all N+M nodes.
pub fn superres_eval(pred: &Predictor, data: &Dataset, opts: &EvalOptions) -> Result<SuperresResult> {
    let start = Instant::now();
    let mesh = &data.mesh;
    if opts.parents > mesh.len() {
        return Err(MagnetError::InsufficientPoints(format!(
            "test mesh of {} points is smaller than the {}-point parent mesh",
            mesh.len(),
            opts.parents
        )));
    }
    let t = pred.history();
    let n_t = data.manifest.n_t;
    if t == 0 || t >= n_t {
        return Err(MagnetError::Mismatch(format!("history {t} for {n_t} frames")));
    }
    let h = opts.horizon.unwrap_or(n_t - t).min(n_t - t);
    let m = mesh.len() - opts.parents;
    let split = split_with_protocol(mesh, opts.protocol, opts.parents, m, opts.seed)?;
    let parent = split.parent_coords(mesh)?;
    let queries = split.query_coords(mesh)?;
    let nodes: Vec<usize> = split.parent.iter().chain(&split.train_queries).copied().collect();
    let c = data.manifest.channels;
    let geom = match pred {
        Predictor::Model { cfg, .. } => Some(RolloutGeometry::new(cfg, &parent, &queries)?),
        _ => None,
    };
    let mut per_sim = Vec::with_capacity(data.len());
    let mut per_frame = vec![0.0; h];
    for traj in &data.trajectories {
        let truth: Vec<Tensor> = (0..h)
            .map(|k| window_rows(traj, t + k, 1, &nodes))
            .collect::<Result<_>>()?;
        let forecast: Vec<Tensor> = match pred {
            Predictor::Oracle { .. } => truth.clone(),
            Predictor::Persistence { .. } => {
                let last = window_rows(traj, t - 1, 1, &nodes)?;
                vec![last; h]
            }
            Predictor::Model { cfg, params, interp } => {
                let geom = geom.as_ref().expect("model geometry");
                let frames = window_rows(traj, 0, t, &split.parent)?;
                let times = normalized_times(traj, 0, t);
                let query_values = match interp {
                    InterpMode::Baseline { method } if m > 0 => {
                        let v = interp_baseline(*method, frames.data(), c, &parent, &queries)?;
                        Some(Tensor::new(vec![t * m, c], v)?)
                    }
                    _ => None,
                };
                let inputs = RolloutInputs {
                    frames: &frames,
                    times: &times,
                    dt: traj.dt() as f32,
                    horizon: h,
                    query_values: query_values.as_ref(),
                };
                rollout(cfg, params, geom, &inputs)?.forecast
            }
        };
        let mut total = 0.0;
        for (k, (p, q)) in forecast.iter().zip(&truth).enumerate() {
            let e = mae(p.data(), q.data(), c)?;
            per_frame[k] += e;
            total += e;
        }
        per_sim.push(if h == 0 { 0.0 } else { total / h as f64 });
    }
    per_frame.iter_mut().for_each(|v| *v /= data.len().max(1) as f64);
    Ok(SuperresResult {
        num_parents: opts.parents,
        num_queries: m,
        per_sim,
        per_frame,
        runtime_s: start.elapsed().as_secs_f64(),
    })
}

/// Points per axis of a mesh with `points` nodes in `dim` dimensions.
pub fn points_per_axis(points: usize, dim: usize) -> usize {
    (points as f64).powf(1.0 / dim as f64).round() as usize
}

/// The dataset restricted to a regular grid with `res` points per axis.
pub fn at_resolution(data: &Dataset, res: usize) -> Result<Dataset> {
    let base = data.manifest.resolution;
    if data.manifest.subset.is_some() {
        return Err(MagnetError::Invalid("resampling needs a full-grid dataset".into()));
    }
    if res == base {
        return Ok(data.clone());
    }
    if res == 0 || res > base || base % res != 0 {
        return Err(MagnetError::InsufficientPoints(format!(
            "resolution {res} is not a divisor of the generated {base}"
        )));
    }
    let stride = base / res;
    let keep: Vec<usize> = match data.manifest.dim {
        1 => (0..res).map(|i| i * stride).collect(),
        _ => (0..res)
            .flat_map(|j| (0..res).map(move |i| j * stride * base + i * stride))
            .collect(),
    };
    let mut out = data.subsample(&keep)?;
    out.manifest.resolution = res;
    Ok(out)
}

/// One report row: a predictor at one test resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub dataset: DatasetTag,
    pub model: String,
    pub interp: String,
    pub protocol: MeshProtocol,
    /// Training resolution n_x (parent mesh size per axis).
    pub train_res: usize,
    /// Test resolution n'_x.
    pub test_res: usize,
    pub num_parents: usize,
    pub num_queries: usize,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub num_sims: usize,
    pub seeds: Vec<u64>,
    /// Per-simulation MAE pooled over seeds.
    pub per_sim: Vec<f64>,
    pub per_frame: Vec<f64>,
    pub runtime_s: f64,
}

impl EvalRow {
    /// Aggregates per-seed results of one (model, resolution) cell.
    pub fn aggregate(
        dataset: DatasetTag,
        model: &str,
        interp: &str,
        protocol: MeshProtocol,
        train_res: usize,
        test_res: usize,
        results: &[(u64, SuperresResult)],
    ) -> Result<Self> {
        let first = &results
            .first()
            .ok_or_else(|| MagnetError::Invalid("no results to aggregate".into()))?
            .1;
        let per_sim: Vec<f64> = results.iter().flat_map(|(_, r)| r.per_sim.iter().copied()).collect();
        let (mae_mean, mae_std) = mean_std(&per_sim);
        let frames = first.per_frame.len();
        let per_frame = (0..frames)
            .map(|k| results.iter().map(|(_, r)| r.per_frame[k]).sum::<f64>() / results.len() as f64)
            .collect();
        Ok(Self {
            dataset,
            model: model.to_string(),
            interp: interp.to_string(),
            protocol,
            train_res,
            test_res,
            num_parents: first.num_parents,
            num_queries: first.num_queries,
            mae_mean,
            mae_std,
            num_sims: per_sim.len(),
            seeds: results.iter().map(|(s, _)| *s).collect(),
            per_sim,
            per_frame,
            runtime_s: results.iter().map(|(_, r)| r.runtime_s).sum(),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    dataset: String,
    model: &'a str,
    interp: &'a str,
    protocol: String,
    train_res: usize,
    test_res: usize,
    num_parents: usize,
    num_queries: usize,
    mae_mean: f64,
    mae_std: f64,
    num_sims: usize,
    runtime_s: f64,
}

impl EvalReport {
    /// Writes `{stem}.json`, `{stem}.csv` and `{stem}_frames.csv`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)?)?;
        let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
        for r in &self.rows {
            w.serialize(CsvRow {
                dataset: r.dataset.to_string(),
                model: &r.model,
                interp: &r.interp,
                protocol: format!("{:?}", r.protocol).to_lowercase(),
                train_res: r.train_res,
                test_res: r.test_res,
                num_parents: r.num_parents,
                num_queries: r.num_queries,
                mae_mean: r.mae_mean,
                mae_std: r.mae_std,
                num_sims: r.num_sims,
                runtime_s: r.runtime_s,
            })?;
        }
        w.flush()?;
        let mut f = csv::Writer::from_path(dir.join(format!("{stem}_frames.csv")))?;
        f.write_record(["model", "interp", "protocol", "test_res", "frame", "mae"])?;
        for r in &self.rows {
            for (k, v) in r.per_frame.iter().enumerate() {
                f.write_record([
                    r.model.clone(),
                    r.interp.clone(),
                    format!("{:?}", r.protocol).to_lowercase(),
                    r.test_res.to_string(),
                    k.to_string(),
                    v.to_string(),
                ])?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}
