//! The graph forecaster: a GNS network over parent and query nodes that
//! predicts the time derivative for an explicit Euler step.

use tensorcore::{mlp_forward, ParamStore, Tape, Tensor, Var};

use super::gnn::{encode_edges, process, GraphInputs};
use super::ModelConfig;
use crate::error::{MagnetError, Result};
use crate::mesh::Coordinates;

/// Nodes are the N parents followed by the M queries.
#[derive(Clone, Debug)]
pub struct ForecastGraph {
    pub num_parents: usize,
    pub num_queries: usize,
    pub coords: Coordinates,
    pub graph: GraphInputs,
    /// `[N + M, dim]` node coordinates as model input.
    pub coord_feats: Tensor,
}

impl ForecastGraph {
    pub fn num_nodes(&self) -> usize {
        self.num_parents + self.num_queries
    }
}

pub fn build_forecast_graph(
    cfg: &ModelConfig,
    parent: &Coordinates,
    queries: &Coordinates,
) -> Result<ForecastGraph> {
    if parent.dim() != cfg.dim || (!queries.is_empty() && queries.dim() != cfg.dim) {
        return Err(MagnetError::Mismatch(format!(
            "{}-D mesh for a {}-D model",
            parent.dim(),
            cfg.dim
        )));
    }
    let coords = if queries.is_empty() {
        parent.clone()
    } else {
        parent.concat(queries)?
    };
    let graph = GraphInputs::new(&coords, cfg)?;
    let coord_feats = Tensor::new(vec![coords.len(), cfg.dim], coords.to_f32())?;
    Ok(ForecastGraph {
        num_parents: parent.len(),
        num_queries: queries.len(),
        coords,
        graph,
        coord_feats,
    })
}

/// Joins per-frame parent and query histories into per-frame node states.
/// `parent_frames` is `[T*N, C]`, `query_values` is `[T*M, C]`.
pub fn merge_history(
    tape: &mut Tape,
    parent_frames: Var,
    query_values: Option<Var>,
    t: usize,
    n: usize,
    m: usize,
) -> Result<Vec<Var>> {
    let (pr, pc) = tape.value(parent_frames).dims2("merge_history")?;
    if pr != t * n {
        return Err(MagnetError::Shape(format!("parent history has {pr} rows, expected {}", t * n)));
    }
    if let Some(q) = query_values {
        let (qr, qc) = tape.value(q).dims2("merge_history")?;
        if qr != t * m || qc != pc {
            return Err(MagnetError::Shape(format!(
                "query history is {qr}x{qc}, expected {}x{pc}",
                t * m
            )));
        }
    } else if m != 0 {
        return Err(MagnetError::Shape(format!("missing history for {m} queries")));
    }
    let mut out = Vec::with_capacity(t);
    for k in 0..t {
        let p = tape.slice_rows(parent_frames, k * n, (k + 1) * n)?;
        out.push(match query_values {
            Some(q) if m > 0 => {
                let qk = tape.slice_rows(q, k * m, (k + 1) * m)?;
                tape.concat(&[p, qk], 0)?
            }
            _ => p,
        });
    }
    Ok(out)
}

/// Node input `[x_T, s(x_T - x_{T-1}), .., s(x_2 - x_1), c]` from the last T frames.
pub fn window_features(tape: &mut Tape, cfg: &ModelConfig, window: &[Var], coords: Var) -> Result<Var> {
    let last = *window
        .last()
        .ok_or_else(|| MagnetError::InsufficientPoints("empty history window".into()))?;
    if window.len() != cfg.history {
        return Err(MagnetError::Shape(format!(
            "window of {} frames for history {}",
            window.len(),
            cfg.history
        )));
    }
    let mut parts = vec![last];
    for k in (1..window.len()).rev() {
        let d = tape.sub(window[k], window[k - 1])?;
        parts.push(tape.scale(d, cfg.diff_scale)?);
    }
    parts.push(coords);
    Ok(tape.concat(&parts, 1)?)
}

/// Encoded edge latents of the forecaster, shared by every step of a rollout.
pub fn encode_forecast_edges(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &ParamStore,
    fg: &ForecastGraph,
) -> Result<Var> {
    encode_edges(tape, cfg, params, "fc", cfg.forecaster_hidden, cfg.forecaster_latent, &fg.graph)
}

/// One Euler step `x_{k+1} = x_k + dt * Delta(window)` on all N+M nodes.
pub fn forecast_step(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &ParamStore,
    fg: &ForecastGraph,
    edges: Var,
    window: &[Var],
    coords: Var,
    dt: f32,
) -> Result<Var> {
    let feats = window_features(tape, cfg, window, coords)?;
    let d = cfg.forecaster_latent;
    let h = cfg.forecaster_hidden;
    let node_spec = cfg.mlp(h, cfg.forecaster_in(), d).with_layernorm();
    let nodes = mlp_forward(tape, &node_spec, params, "fc.node", feats)?;
    let latent = process(tape, cfg, params, "fc", h, d, cfg.forecaster_steps, &fg.graph, nodes, edges)?;
    let dec = cfg.mlp(cfg.forecaster_decoder_hidden, d, cfg.channels);
    let delta = mlp_forward(tape, &dec, params, "fc.dec", latent)?;
    let step = tape.scale(delta, dt)?;
    Ok(tape.add(window[window.len() - 1], step)?)
}
