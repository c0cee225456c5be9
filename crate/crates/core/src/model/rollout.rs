//! Encode, interpolate, forecast.

use tensorcore::{ParamStore, Tape, Tensor, Var};

use super::cnn::encode_cnn;
use super::forecast::{build_forecast_graph, encode_forecast_edges, forecast_step, merge_history, ForecastGraph};
use super::gnn::{encode_gnn, GraphInputs};
use super::interp::{decode_state, interpolate_features, InterpGeometry};
use super::{ModelConfig, Variant};
use crate::error::{MagnetError, Result};
use crate::mesh::Coordinates;

/// Parent-mesh structure needed by the encoder.
#[derive(Clone, Debug)]
pub enum EncoderGeometry {
    Graph(GraphInputs),
    Grid(Vec<usize>),
}

impl EncoderGeometry {
    pub fn new(cfg: &ModelConfig, parent: &Coordinates) -> Result<Self> {
        match cfg.variant {
            Variant::Gnn => Ok(EncoderGeometry::Graph(GraphInputs::new(parent, cfg)?)),
            Variant::Cnn => parent.grid_shape().map(EncoderGeometry::Grid).ok_or_else(|| {
                MagnetError::IrregularMesh(format!("{} scattered points", parent.len()))
            }),
        }
    }
}

/// Everything about a rollout that depends only on the meshes.
#[derive(Clone, Debug)]
pub struct RolloutGeometry {
    pub parent: Coordinates,
    pub queries: Coordinates,
    pub encoder: EncoderGeometry,
    pub interp: InterpGeometry,
    pub forecast: ForecastGraph,
    /// `[N, dim]` parent coordinates as model input.
    pub parent_feats: Tensor,
}

impl RolloutGeometry {
    pub fn new(cfg: &ModelConfig, parent: &Coordinates, queries: &Coordinates) -> Result<Self> {
        cfg.validate()?;
        if parent.dim() != cfg.dim {
            return Err(MagnetError::Mismatch(format!(
                "{}-D parent mesh for a {}-D model",
                parent.dim(),
                cfg.dim
            )));
        }
        Ok(Self {
            parent: parent.clone(),
            queries: queries.clone(),
            encoder: EncoderGeometry::new(cfg, parent)?,
            interp: InterpGeometry::new(queries, parent, cfg.offset_scale)?,
            forecast: build_forecast_graph(cfg, parent, queries)?,
            parent_feats: Tensor::new(vec![parent.len(), cfg.dim], parent.to_f32())?,
        })
    }

    pub fn num_parents(&self) -> usize {
        self.parent.len()
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.forecast.num_nodes()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RolloutInputs<'a> {
    /// `[T*N, C]` parent frames, time-major.
    pub frames: &'a Tensor,
    /// Normalized time of each input frame.
    pub times: &'a [f32],
    pub dt: f32,
    pub horizon: usize,
    /// `[T*M, C]` query history supplied by an external interpolator; the
    /// learned encoder and interpolator are skipped when set.
    pub query_values: Option<&'a Tensor>,
}

/// Rollout recorded on a tape for training.
#[derive(Clone, Debug)]
pub struct TapeRollout {
    /// `[T*M, C]`; `None` when M = 0.
    pub interp: Option<Var>,
    /// H frames of `[N+M, C]`.
    pub forecast: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutOutput {
    /// `[T*M, C]` interpolated past at the queries.
    pub interp: Option<Tensor>,
    /// H frames of `[N+M, C]`, parents first.
    pub forecast: Vec<Tensor>,
}

/// Embedding `z` of shape `[N, latent_dim]`.
pub fn encode(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &ParamStore,
    frames: Var,
    geom: &EncoderGeometry,
    coords: Var,
) -> Result<Var> {
    match (cfg.variant, geom) {
        (Variant::Gnn, EncoderGeometry::Graph(g)) => encode_gnn(tape, cfg, params, frames, coords, g),
        (Variant::Cnn, EncoderGeometry::Grid(shape)) => encode_cnn(tape, cfg, params, frames, shape),
        _ => Err(MagnetError::Mismatch("encoder geometry does not match the variant".into())),
    }
}

fn check_inputs(cfg: &ModelConfig, geom: &RolloutGeometry, inputs: &RolloutInputs) -> Result<()> {
    let t = cfg.history;
    let (n, m, c) = (geom.num_parents(), geom.num_queries(), cfg.channels);
    if inputs.frames.shape() != [t * n, c] {
        return Err(MagnetError::Shape(format!(
            "input frames {:?}, expected [{}, {c}]",
            inputs.frames.shape(),
            t * n
        )));
    }
    if inputs.times.len() != t {
        return Err(MagnetError::Shape(format!("{} frame times for T = {t}", inputs.times.len())));
    }
    if let Some(q) = inputs.query_values {
        if q.shape() != [t * m, c] {
            return Err(MagnetError::Shape(format!(
                "query history {:?}, expected [{}, {c}]",
                q.shape(),
                t * m
            )));
        }
    }
    if !(inputs.dt >= 0.0) {
        return Err(MagnetError::Invalid(format!("time step {}", inputs.dt)));
    }
    Ok(())
}

fn query_history(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &ParamStore,
    geom: &RolloutGeometry,
    inputs: &RolloutInputs,
    frames: Var,
) -> Result<Option<Var>> {
    if geom.num_queries() == 0 {
        return Ok(None);
    }
    if let Some(q) = inputs.query_values {
        return Ok(Some(tape.leaf(q.clone())?));
    }
    let coords = tape.leaf(geom.parent_feats.clone())?;
    let z = encode(tape, cfg, params, frames, &geom.encoder, coords)?;
    let latent = interpolate_features(tape, cfg, params, frames, z, &geom.interp, inputs.times)?;
    Ok(Some(decode_state(tape, cfg, params, latent)?))
}

/// Full differentiable rollout on one tape.
pub fn rollout_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &ParamStore,
    geom: &RolloutGeometry,
    inputs: &RolloutInputs,
) -> Result<TapeRollout> {
    check_inputs(cfg, geom, inputs)?;
    let frames = tape.leaf(inputs.frames.clone())?;
    let interp = query_history(tape, cfg, params, geom, inputs, frames)?;
    let mut forecast = Vec::with_capacity(inputs.horizon);
    if inputs.horizon > 0 {
        let t = cfg.history;
        let (n, m) = (geom.num_parents(), geom.num_queries());
        let mut window = merge_history(tape, frames, interp, t, n, m)?;
        let coords = tape.leaf(geom.forecast.coord_feats.clone())?;
        let edges = encode_forecast_edges(tape, cfg, params, &geom.forecast)?;
        for _ in 0..inputs.horizon {
            let next = forecast_step(tape, cfg, params, &geom.forecast, edges, &window, coords, inputs.dt)?;
            window.remove(0);
            window.push(next);
            forecast.push(next);
        }
    }
    Ok(TapeRollout { interp, forecast })
}

/// Inference rollout; each forecast step runs on a fresh tape so memory stays
/// flat in the horizon.
pub fn rollout(
    cfg: &ModelConfig,
    params: &ParamStore,
    geom: &RolloutGeometry,
    inputs: &RolloutInputs,
) -> Result<RolloutOutput> {
    check_inputs(cfg, geom, inputs)?;
    let t = cfg.history;
    let (n, m) = (geom.num_parents(), geom.num_queries());
    let mut tape = Tape::new();
    let frames = tape.leaf(inputs.frames.clone())?;
    let interp_var = query_history(&mut tape, cfg, params, geom, inputs, frames)?;
    let interp = interp_var.map(|v| tape.value(v).clone());
    let mut forecast = Vec::with_capacity(inputs.horizon);
    if inputs.horizon == 0 {
        return Ok(RolloutOutput { interp, forecast });
    }
    let merged = merge_history(&mut tape, frames, interp_var, t, n, m)?;
    let mut window: Vec<Tensor> = merged.iter().map(|&v| tape.value(v).clone()).collect();
    let edges = encode_forecast_edges(&mut tape, cfg, params, &geom.forecast)?;
    let edges = tape.value(edges).clone();
    drop(tape);
    for _ in 0..inputs.horizon {
        let mut tape = Tape::new();
        let vars = window
            .iter()
            .map(|w| tape.leaf(w.clone()))
            .collect::<tensorcore::Result<Vec<_>>>()?;
        let coords = tape.leaf(geom.forecast.coord_feats.clone())?;
        let e = tape.leaf(edges.clone())?;
        let next = forecast_step(&mut tape, cfg, params, &geom.forecast, e, &vars, coords, inputs.dt)?;
        let next = tape.value(next).clone();
        if !next.is_finite() {
            return Err(MagnetError::Invalid(format!(
                "non-finite forecast at step {}",
                forecast.len() + 1
            )));
        }
        window.remove(0);
        window.push(next.clone());
        forecast.push(next);
    }
    Ok(RolloutOutput { interp, forecast })
}
