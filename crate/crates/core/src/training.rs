//! Losses and the training loop.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tensorcore::{adam_step, steplr, AdamConfig, AdamState, Gradients, ParamStore, Tape, Tensor, TensorError, Var};

use crate::error::{MagnetError, Result};
use crate::eval::mae;
use crate::mesh::{split_with_protocol, Coordinates, MeshProtocol, MeshSplit};
use crate::model::{init_params, param_groups, rollout, rollout_tape, save_model, ModelConfig, RolloutGeometry, RolloutInputs, Variant};
use crate::pdegen::{Dataset, Trajectory};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Step decay factor k.
    pub decay: f64,
    /// Epochs between decays.
    pub decay_every: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Samples per optimizer step.
    pub batch_size: usize,
    /// Random time windows drawn from each training simulation per epoch.
    pub windows_per_sim: usize,
    /// Parent mesh size N.
    pub parents: usize,
    /// Training spatial queries M (the upper bound when `vary_queries`).
    pub queries: usize,
    /// Draw M uniformly from `0..=queries` each epoch.
    pub vary_queries: bool,
    /// Training rollout horizon H.
    pub horizon: usize,
    pub val_fraction: f64,
    /// Validation rollout length; the full trajectory when unset.
    pub val_horizon: Option<usize>,
    /// Parent-mesh protocols, cycled by epoch.
    pub protocols: Vec<MeshProtocol>,
    pub grad_clip: Option<f32>,
    /// Use only the first simulations of the dataset.
    pub max_sims: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_variant(Variant::Gnn, 1)
    }
}

impl TrainConfig {
    pub fn for_variant(variant: Variant, dim: usize) -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.0,
            decay: 0.3,
            decay_every: match variant {
                Variant::Cnn => 40,
                Variant::Gnn => 50,
            },
            max_epochs: 250,
            patience: 40,
            seed: 0,
            batch_size: 1,
            windows_per_sim: 1,
            parents: 50,
            queries: 50,
            vary_queries: false,
            horizon: if dim == 1 { 10 } else { 5 },
            val_fraction: 0.1,
            val_horizon: None,
            protocols: vec![MeshProtocol::Uniform],
            grad_clip: None,
            max_sims: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MagnetError::Invalid(msg));
        if self.horizon == 0 {
            return bad("training horizon must be at least 1".into());
        }
        if self.patience > self.max_epochs {
            return bad(format!("patience {} exceeds {} epochs", self.patience, self.max_epochs));
        }
        if self.batch_size == 0 || self.windows_per_sim == 0 || self.parents == 0 || self.protocols.is_empty() {
            return bad("batch size, parent count and protocol list must be non-empty".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("lr {} / validation fraction {}", self.lr, self.val_fraction));
        }
        Ok(())
    }
}

/// `sum |pred - truth|_1 / rows` on the tape.
fn l1_per_row(tape: &mut Tape, pred: Var, truth: Var) -> Result<Var> {
    let (rows, _) = tape.value(pred).dims2("l1_per_row")?;
    let diff = tape.sub(pred, truth)?;
    let abs = tape.abs(diff)?;
    let total = tape.sum(abs)?;
    Ok(tape.scale(total, 1.0 / rows.max(1) as f32)?)
}

/// Mean over the T*M query rows of the per-point L1 error.
pub fn interpolation_loss(tape: &mut Tape, pred: Var, truth: Var) -> Result<Var> {
    l1_per_row(tape, pred, truth)
}

/// Mean over the H*(N+M) forecast rows of the per-point L1 error.
pub fn forecasting_loss(tape: &mut Tape, pred: &[Var], truth: &[Var]) -> Result<Var> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(MagnetError::Shape(format!(
            "{} predicted frames against {} targets",
            pred.len(),
            truth.len()
        )));
    }
    let p = tape.concat(pred, 0)?;
    let t = tape.concat(truth, 0)?;
    l1_per_row(tape, p, t)
}

/// One training example: a time window of one trajectory on a mesh split.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `[T*N, C]` parent frames.
    pub frames: Tensor,
    /// `[T*M, C]` ground truth at the queries.
    pub query_truth: Option<Tensor>,
    /// H frames of `[N+M, C]`, parents first.
    pub targets: Vec<Tensor>,
    pub times: Vec<f32>,
    pub dt: f32,
}

/// Rows `idx` of frames `start..start+len`, time-major.
pub fn window_rows(traj: &Trajectory, start: usize, len: usize, idx: &[usize]) -> Result<Tensor> {
    let c = traj.channels;
    let mut data = Vec::with_capacity(len * idx.len() * c);
    for k in start..start + len {
        let f = traj.frame(k);
        for &i in idx {
            data.extend_from_slice(&f[i * c..(i + 1) * c]);
        }
    }
    Ok(Tensor::new(vec![len * idx.len(), c], data)?)
}

/// Frame times divided by the trajectory duration.
pub fn normalized_times(traj: &Trajectory, start: usize, len: usize) -> Vec<f32> {
    let end = traj.times.last().copied().unwrap_or(1.0).max(f64::MIN_POSITIVE);
    traj.times[start..start + len].iter().map(|&t| (t / end) as f32).collect()
}

impl Sample {
    pub fn new(traj: &Trajectory, split: &MeshSplit, start: usize, history: usize, horizon: usize) -> Result<Self> {
        if start + history + horizon > traj.n_t() {
            return Err(MagnetError::Mismatch(format!(
                "window {start}..{} beyond {} frames",
                start + history + horizon,
                traj.n_t()
            )));
        }
        let q = &split.train_queries;
        let nodes: Vec<usize> = split.parent.iter().chain(q).copied().collect();
        Ok(Self {
            frames: window_rows(traj, start, history, &split.parent)?,
            query_truth: if q.is_empty() { None } else { Some(window_rows(traj, start, history, q)?) },
            targets: (0..horizon)
                .map(|h| window_rows(traj, start + history + h, 1, &nodes))
                .collect::<Result<_>>()?,
            times: normalized_times(traj, start, history),
            dt: traj.dt() as f32,
        })
    }

    pub fn inputs(&self) -> RolloutInputs<'_> {
        RolloutInputs {
            frames: &self.frames,
            times: &self.times,
            dt: self.dt,
            horizon: self.targets.len(),
            query_values: None,
        }
    }
}

pub struct LossVars {
    pub total: Var,
    pub interp: Option<Var>,
    pub forecast: Var,
}

/// Records the rollout of `sample` and the total loss on `tape`.
pub fn record_loss(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &ParamStore,
    geom: &RolloutGeometry,
    sample: &Sample,
) -> Result<LossVars> {
    let out = rollout_tape(tape, cfg, params, geom, &sample.inputs())?;
    let truth = sample
        .targets
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<tensorcore::Result<Vec<_>>>()?;
    let forecast = forecasting_loss(tape, &out.forecast, &truth)?;
    let interp = match (out.interp, &sample.query_truth) {
        (Some(p), Some(t)) => {
            let t = tape.leaf(t.clone())?;
            Some(interpolation_loss(tape, p, t)?)
        }
        _ => None,
    };
    let total = match interp {
        Some(i) => tape.add(i, forecast)?,
        None => forecast,
    };
    Ok(LossVars { total, interp, forecast })
}

/// Loss values and parameter gradients for one sample.
pub fn sample_gradients(
    cfg: &ModelConfig,
    params: &ParamStore,
    geom: &RolloutGeometry,
    sample: &Sample,
) -> Result<(f32, f32, Gradients)> {
    let mut tape = Tape::new();
    let l = record_loss(&mut tape, cfg, params, geom, sample)?;
    let interp = l.interp.map(|v| tape.value(v).data()[0]).unwrap_or(0.0);
    let forecast = tape.value(l.forecast).data()[0];
    let grads = tape.backward(l.total)?;
    Ok((interp, forecast, grads))
}

/// Fails if some parameter group receives no gradient on `sample`. The
/// forecaster's zero-initialized output layer is replaced by small random
/// values first, since it otherwise blocks every upstream forecaster gradient.
pub fn check_gradient_flow(
    cfg: &ModelConfig,
    params: &ParamStore,
    geom: &RolloutGeometry,
    sample: &Sample,
    rng_seed: u64,
) -> Result<()> {
    let mut probe = params.clone();
    let mut rng = seed::rng(rng_seed);
    let last = format!("fc.dec.w{}", cfg.mlp_layers - 1);
    for v in probe.get_mut(&last)?.data_mut() {
        *v = rng.gen_range(-0.1..0.1);
    }
    let (_, _, grads) = sample_gradients(cfg, &probe, geom, sample)?;
    let needs_queries = ["enc.", "g.", "d."];
    for group in param_groups(cfg) {
        if geom.num_queries() == 0 && needs_queries.contains(&group) {
            continue;
        }
        let norm: f64 = grads
            .named()
            .iter()
            .filter(|(n, _)| n.starts_with(group))
            .flat_map(|(_, g)| g.data().iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum();
        if !(norm > 0.0) {
            return Err(MagnetError::Invalid(format!(
                "parameter group {group:?} receives no gradient"
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss_interp: f64,
    pub loss_forecast: f64,
    pub val_mae: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation MAE.
    pub params: ParamStore,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub log: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// Deterministic train/validation partition of simulation indices.
pub fn split_train_val(count: usize, val_fraction: f64, rng_seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut seed::rng(seed::derive_labeled(rng_seed, "validation", 0)));
    let n_val = if count < 2 || val_fraction <= 0.0 {
        0
    } else {
        ((count as f64 * val_fraction).ceil() as usize).clamp(1, count - 1)
    };
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

fn check_dataset(data: &Dataset, cfg: &ModelConfig, tc: &TrainConfig) -> Result<()> {
    let m = &data.manifest;
    if m.dim != cfg.dim || m.channels != cfg.channels {
        return Err(MagnetError::Mismatch(format!(
            "{}-D {}-channel data for a {}-D {}-channel model",
            m.dim, m.channels, cfg.dim, cfg.channels
        )));
    }
    if m.n_t < cfg.history + tc.horizon {
        return Err(MagnetError::Mismatch(format!(
            "{} frames cannot hold T + H = {}",
            m.n_t,
            cfg.history + tc.horizon
        )));
    }
    if data.mesh.len() < tc.parents + tc.queries {
        return Err(MagnetError::Mismatch(format!(
            "mesh of {} points cannot hold N + M = {}",
            data.mesh.len(),
            tc.parents + tc.queries
        )));
    }
    if data.len() < 1 {
        return Err(MagnetError::Mismatch("empty dataset".into()));
    }
    Ok(())
}

/// Mean full-rollout MAE over `sims` on a fixed split.
pub fn validation_mae(
    data: &Dataset,
    sims: &[usize],
    cfg: &ModelConfig,
    params: &ParamStore,
    geom: &RolloutGeometry,
    split: &MeshSplit,
    horizon: Option<usize>,
) -> Result<f64> {
    if sims.is_empty() {
        return Ok(f64::NAN);
    }
    let t = cfg.history;
    let mut total = 0.0;
    for &s in sims {
        let traj = &data.trajectories[s];
        let h = horizon.unwrap_or(traj.n_t() - t).min(traj.n_t() - t);
        let sample = Sample::new(traj, split, 0, t, h)?;
        let out = rollout(cfg, params, geom, &sample.inputs())?;
        let pred: Vec<f32> = out.forecast.iter().flat_map(|f| f.data().iter().copied()).collect();
        let truth: Vec<f32> = sample.targets.iter().flat_map(|f| f.data().iter().copied()).collect();
        total += mae(&pred, &truth, cfg.channels)?;
    }
    Ok(total / sims.len() as f64)
}

fn mesh_split(mesh: &Coordinates, tc: &TrainConfig, protocol: MeshProtocol, m: usize, rng_seed: u64) -> Result<(MeshSplit, Coordinates, Coordinates)> {
    let split = split_with_protocol(mesh, protocol, tc.parents, m, rng_seed)?;
    let parent = split.parent_coords(mesh)?;
    let queries = split.query_coords(mesh)?;
    Ok((split, parent, queries))
}

fn non_finite(e: MagnetError, epoch: usize, sim: usize) -> MagnetError {
    match e {
        MagnetError::Tensor(t @ TensorError::NonFinite { .. }) => MagnetError::NonFiniteLoss {
            epoch,
            sim,
            detail: t.to_string(),
        },
        e => e,
    }
}

pub fn train(data: &Dataset, cfg: &ModelConfig, tc: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    train_with(data, cfg, tc, out, |_| {})
}

/// Trains from a fresh initialization; `on_epoch` sees each log row as it is
/// written. With `out`, the best checkpoint, `log.csv` and `train.json` are
/// kept up to date there.
pub fn train_with(
    data: &Dataset,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tc.validate()?;
    check_dataset(data, cfg, tc)?;
    let count = tc.max_sims.map_or(data.len(), |n| n.min(data.len()));
    let (train_idx, val_idx) = split_train_val(count, tc.val_fraction, tc.seed);
    if train_idx.is_empty() {
        return Err(MagnetError::Mismatch("no training simulations".into()));
    }
    let mut params = init_params(cfg, &mut seed::rng(seed::derive_labeled(tc.seed, "init", 0)))?;
    let mesh = &data.mesh;
    let (t, h) = (cfg.history, tc.horizon);

    let (val_split, vp, vq) = mesh_split(mesh, tc, tc.protocols[0], tc.queries, seed::derive_labeled(tc.seed, "val-split", 0))?;
    let val_geom = RolloutGeometry::new(cfg, &vp, &vq)?;
    {
        let probe_m = tc.queries.max(1).min(mesh.len() - tc.parents);
        let (split, p, q) = mesh_split(mesh, tc, tc.protocols[0], probe_m, seed::derive_labeled(tc.seed, "probe", 0))?;
        let geom = RolloutGeometry::new(cfg, &p, &q)?;
        let sample = Sample::new(&data.trajectories[train_idx[0]], &split, 0, t, h)?;
        check_gradient_flow(cfg, &params, &geom, &sample, seed::derive_labeled(tc.seed, "probe", 1))
            .map_err(|e| non_finite(e, 0, train_idx[0]))?;
    }

    let mut writer = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("train.json"), serde_json::to_string_pretty(tc)?)?;
            Some(csv::Writer::from_path(dir.join("log.csv"))?)
        }
        None => None,
    };
    let mut adam = AdamState::new(AdamConfig {
        lr: tc.lr as f32,
        weight_decay: tc.weight_decay as f32,
        ..AdamConfig::default()
    });
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut log = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..tc.max_epochs {
        let lr = steplr(epoch, tc.lr, tc.decay, tc.decay_every);
        adam.config.lr = lr as f32;
        let mut rng = seed::rng(seed::derive_labeled(tc.seed, "epoch", epoch as u64));
        let protocol = tc.protocols[epoch % tc.protocols.len()];
        let m = if tc.vary_queries { rng.gen_range(0..=tc.queries) } else { tc.queries };
        let (split, p, q) = mesh_split(mesh, tc, protocol, m, rng.gen())?;
        let geom = RolloutGeometry::new(cfg, &p, &q)?;
        let mut order: Vec<usize> = train_idx.iter().flat_map(|&s| std::iter::repeat(s).take(tc.windows_per_sim)).collect();
        order.shuffle(&mut rng);
        let (mut sum_i, mut sum_f) = (0.0f64, 0.0f64);
        for batch in order.chunks(tc.batch_size) {
            let mut acc: Option<Gradients> = None;
            for &s in batch {
                let traj = &data.trajectories[s];
                let start = rng.gen_range(0..=traj.n_t() - t - h);
                let sample = Sample::new(traj, &split, start, t, h)?;
                let (li, lf, g) = sample_gradients(cfg, &params, &geom, &sample)
                    .map_err(|e| non_finite(e, epoch, s))?;
                if !(li.is_finite() && lf.is_finite()) || !g.global_norm().is_finite() {
                    return Err(MagnetError::NonFiniteLoss {
                        epoch,
                        sim: s,
                        detail: format!("loss_interp {li}, loss_forecast {lf}"),
                    });
                }
                sum_i += li as f64;
                sum_f += lf as f64;
                match acc.as_mut() {
                    Some(a) => a.accumulate(&g),
                    None => acc = Some(g),
                }
            }
            let mut g = acc.expect("non-empty batch");
            g.scale(1.0 / batch.len() as f32);
            if let Some(clip) = tc.grad_clip {
                let norm = g.global_norm();
                if norm > clip {
                    g.scale(clip / norm);
                }
            }
            adam_step(&mut params, &g, &mut adam)?;
        }
        let n = order.len() as f64;
        let val_mae = if val_idx.is_empty() {
            (sum_i + sum_f) / n
        } else {
            validation_mae(data, &val_idx, cfg, &params, &val_geom, &val_split, tc.val_horizon)?
        };
        let row = EpochLog {
            epoch,
            lr,
            loss_interp: sum_i / n,
            loss_forecast: sum_f / n,
            val_mae,
        };
        if let Some(w) = writer.as_mut() {
            w.serialize(&row)?;
            w.flush()?;
        }
        on_epoch(&row);
        log.push(row);
        if val_mae < best.0 {
            best = (val_mae, epoch, params.clone());
            if let Some(dir) = out {
                save_model(dir, cfg, &params)?;
            }
        } else if epoch - best.1 >= tc.patience {
            stopped_early = true;
            break;
        }
    }
    if let (Some(dir), true) = (out, best.0.is_infinite()) {
        save_model(dir, cfg, &params)?;
    }
    Ok(TrainOutcome {
        params: best.2,
        best_epoch: best.1,
        best_val_mae: best.0,
        log,
        stopped_early,
    })
}
