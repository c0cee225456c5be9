//! Encode-process blocks in the style of learned particle simulators:
//! node and edge encoders, then residual message passing with sum
//! aggregation onto the receiving node.

use std::sync::Arc;

use tensorcore::{mlp_forward, ParamStore, Tape, Tensor, Var};

use super::{mp_prefix, ModelConfig};
use crate::error::Result;
use crate::mesh::{knn_graph, Coordinates, NeighborGraph};

/// Edge list and constant edge features of a nearest-neighbor graph.
#[derive(Clone, Debug)]
pub struct GraphInputs {
    pub num_nodes: usize,
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    /// `[E, dim + 1]`: scaled offset `c_src - c_dst` and its length.
    pub edge_feats: Tensor,
}

impl GraphInputs {
    pub fn new(coords: &Coordinates, cfg: &ModelConfig) -> Result<Self> {
        let mut g = knn_graph(coords, cfg.k_graph.min(coords.len().saturating_sub(1)).max(1))?;
        if cfg.symmetric_graph {
            g = g.symmetrized();
        }
        Self::from_graph(coords, &g, cfg.offset_scale)
    }

    pub fn from_graph(coords: &Coordinates, g: &NeighborGraph, offset_scale: f32) -> Result<Self> {
        Ok(Self {
            num_nodes: g.num_nodes,
            src: g.src.clone().into(),
            dst: g.dst.clone().into(),
            edge_feats: edge_features(coords, g, offset_scale)?,
        })
    }
}

pub fn edge_features(coords: &Coordinates, g: &NeighborGraph, offset_scale: f32) -> Result<Tensor> {
    let dim = coords.dim();
    let mut data = Vec::with_capacity(g.num_edges() * (dim + 1));
    for (&s, &d) in g.src.iter().zip(&g.dst) {
        let (a, b) = (coords.point(s), coords.point(d));
        let mut len = 0.0f64;
        for k in 0..dim {
            let off = a[k] - b[k];
            len += off * off;
            data.push((off as f32) * offset_scale);
        }
        data.push((len.sqrt() as f32) * offset_scale);
    }
    Ok(Tensor::new(vec![g.num_edges(), dim + 1], data)?)
}

/// One residual message-passing step.
fn mp_step(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &ParamStore,
    prefix: &str,
    hidden: usize,
    d: usize,
    graph: &GraphInputs,
    h: Var,
    e: Var,
) -> Result<(Var, Var)> {
    let hs = tape.gather(h, graph.src.clone())?;
    let hd = tape.gather(h, graph.dst.clone())?;
    let edge_in = tape.concat(&[e, hs, hd], 1)?;
    let edge_spec = cfg.mlp(hidden, 3 * d, d).with_layernorm();
    let de = mlp_forward(tape, &edge_spec, params, &format!("{prefix}.edge"), edge_in)?;
    let e2 = tape.add(e, de)?;
    let agg = tape.scatter_add(e2, graph.dst.clone(), graph.num_nodes)?;
    let node_in = tape.concat(&[h, agg], 1)?;
    let node_spec = cfg.mlp(hidden, 2 * d, d).with_layernorm();
    let dh = mlp_forward(tape, &node_spec, params, &format!("{prefix}.node"), node_in)?;
    let h2 = tape.add(h, dh)?;
    Ok((h2, e2))
}

/// Runs `steps` message-passing rounds over encoded node/edge latents.
pub(crate) fn process(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &ParamStore,
    prefix: &str,
    hidden: usize,
    d: usize,
    steps: usize,
    graph: &GraphInputs,
    mut h: Var,
    mut e: Var,
) -> Result<Var> {
    for s in 0..steps {
        let p = mp_prefix(prefix, s, cfg.share_mp_params);
        (h, e) = mp_step(tape, cfg, params, &p, hidden, d, graph, h, e)?;
    }
    Ok(h)
}

/// Encodes constant edge features with `{prefix}.edge`.
pub(crate) fn encode_edges(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &ParamStore,
    prefix: &str,
    hidden: usize,
    d: usize,
    graph: &GraphInputs,
) -> Result<Var> {
    let feats = tape.leaf(graph.edge_feats.clone())?;
    let spec = cfg.mlp(hidden, cfg.edge_in(), d).with_layernorm();
    Ok(mlp_forward(tape, &spec, params, &format!("{prefix}.edge"), feats)?)
}

/// Side-by-side frames `[N, T*C]` from time-major `[T*N, C]` rows.
pub(crate) fn frames_by_node(tape: &mut Tape, frames: Var, t: usize, n: usize) -> Result<Var> {
    let parts = (0..t)
        .map(|k| tape.slice_rows(frames, k * n, (k + 1) * n))
        .collect::<tensorcore::Result<Vec<_>>>()?;
    Ok(tape.concat(&parts, 1)?)
}

/// GNN encoder: `frames` is `[T*N, C]` time-major, `coords` is `[N, dim]`.
/// Returns the embedding `z` of shape `[N, latent_dim]`.
pub fn encode_gnn(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &ParamStore,
    frames: Var,
    coords: Var,
    graph: &GraphInputs,
) -> Result<Var> {
    let n = graph.num_nodes;
    let hist = frames_by_node(tape, frames, cfg.history, n)?;
    let node_in = tape.concat(&[hist, coords], 1)?;
    let d = cfg.latent_dim;
    let h_spec = cfg.mlp(cfg.encoder_hidden, cfg.encoder_in(), d).with_layernorm();
    let h = mlp_forward(tape, &h_spec, params, "enc.node", node_in)?;
    let e = encode_edges(tape, cfg, params, "enc", cfg.encoder_hidden, d, graph)?;
    process(
        tape,
        cfg,
        params,
        "enc",
        cfg.encoder_hidden,
        d,
        cfg.encoder_steps,
        graph,
        h,
        e,
    )
}
