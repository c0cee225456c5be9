//! Feature-space interpolation at spatial queries and the state decoder.

use std::sync::Arc;

use tensorcore::{mlp_forward, ParamStore, Tape, Tensor, Var};

use super::ModelConfig;
use crate::error::{MagnetError, Result};
use crate::mesh::{neighbor_weights, Coordinates, NeighborWeights};

/// Query stencils against a parent mesh, flattened query-major.
#[derive(Clone, Debug)]
pub struct InterpGeometry {
    pub num_parents: usize,
    pub num_queries: usize,
    /// Neighbors per query (2^n).
    pub k: usize,
    /// `M * k` parent indices.
    pub parents: Vec<usize>,
    /// `M * k` weights, each group normalized to sum 1.
    pub weights: Vec<f32>,
    /// `[M * k, dim]` scaled offsets `c_i - p_j`.
    pub offsets: Vec<f32>,
}

impl InterpGeometry {
    pub fn new(queries: &Coordinates, parent: &Coordinates, offset_scale: f32) -> Result<Self> {
        if queries.is_empty() {
            return Ok(Self::empty(parent.len(), 1 << parent.dim()));
        }
        let nw = neighbor_weights(queries, parent)?;
        Self::from_weights(&nw, queries, parent, offset_scale)
    }

    fn empty(num_parents: usize, k: usize) -> Self {
        Self {
            num_parents,
            num_queries: 0,
            k,
            parents: Vec::new(),
            weights: Vec::new(),
            offsets: Vec::new(),
        }
    }

    pub fn from_weights(
        nw: &NeighborWeights,
        queries: &Coordinates,
        parent: &Coordinates,
        offset_scale: f32,
    ) -> Result<Self> {
        if nw.len() != queries.len() || queries.dim() != parent.dim() {
            return Err(MagnetError::Mismatch(format!(
                "{} weight groups for {} queries",
                nw.len(),
                queries.len()
            )));
        }
        if let Some(&bad) = nw.indices.iter().find(|&&j| j >= parent.len()) {
            return Err(MagnetError::Mismatch(format!(
                "neighbor index {bad} outside a parent mesh of {} points",
                parent.len()
            )));
        }
        let dim = parent.dim();
        let mut weights = Vec::with_capacity(nw.weights.len());
        let mut offsets = Vec::with_capacity(nw.indices.len() * dim);
        for q in 0..nw.len() {
            let (idx, w) = nw.entry(q);
            let total: f64 = w.iter().sum();
            if !(total > 0.0) || w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
                return Err(MagnetError::Mismatch(format!("bad weights {w:?} at query {q}")));
            }
            weights.extend(w.iter().map(|&x| (x / total) as f32));
            let c = queries.point(q);
            for &j in idx {
                let p = parent.point(j);
                offsets.extend((0..dim).map(|a| ((c[a] - p[a]) as f32) * offset_scale));
            }
        }
        Ok(Self {
            num_parents: parent.len(),
            num_queries: queries.len(),
            k: nw.k,
            parents: nw.indices.clone(),
            weights,
            offsets,
        })
    }

    pub fn dim(&self) -> usize {
        if self.parents.is_empty() {
            0
        } else {
            self.offsets.len() / self.parents.len()
        }
    }
}

/// Interpolated latents `z_k[c_i]` for every frame, `[T*M, d]` time-major.
///
/// `frames` is `[T*N, C]`, `z` is `[N, d]`, `times` holds the normalized
/// time of each of the T frames.
pub fn interpolate_features(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &ParamStore,
    frames: Var,
    z: Var,
    geom: &InterpGeometry,
    times: &[f32],
) -> Result<Var> {
    let t = times.len();
    let (n, m, k) = (geom.num_parents, geom.num_queries, geom.k);
    let (rows, _) = tape.value(frames).dims2("interpolate_features")?;
    let (zn, _) = tape.value(z).dims2("interpolate_features")?;
    if rows != t * n || zn != n {
        return Err(MagnetError::Shape(format!(
            "frames have {rows} rows and z {zn} for T = {t}, N = {n}"
        )));
    }
    if m == 0 {
        return Err(MagnetError::InsufficientPoints("no spatial queries to interpolate".into()));
    }
    let mk = m * k;
    let dim = cfg.dim;
    if geom.offsets.len() != mk * dim {
        return Err(MagnetError::Mismatch(format!(
            "{}-D stencil offsets for a {dim}-D model",
            geom.dim()
        )));
    }
    // Rows are ordered (frame, query, neighbor).
    let x_idx: Arc<[usize]> = (0..t)
        .flat_map(|f| geom.parents.iter().map(move |&j| f * n + j))
        .collect();
    let z_idx: Arc<[usize]> = (0..t).flat_map(|_| geom.parents.iter().copied()).collect();
    let mut extra = Vec::with_capacity(t * mk * (dim + 1));
    for &tf in times {
        for r in 0..mk {
            extra.extend_from_slice(&geom.offsets[r * dim..(r + 1) * dim]);
            extra.push(tf);
        }
    }
    let xs = tape.gather(frames, x_idx)?;
    let zs = tape.gather(z, z_idx)?;
    let extra = tape.leaf(Tensor::new(vec![t * mk, dim + 1], extra)?)?;
    let input = tape.concat(&[xs, zs, extra], 1)?;
    let spec = cfg.mlp(cfg.interp_hidden, cfg.interp_in(), cfg.latent_dim).with_layernorm();
    let terms = mlp_forward(tape, &spec, params, "g", input)?;
    let w: Arc<[f32]> = (0..t).flat_map(|_| geom.weights.iter().copied()).collect();
    let weighted = tape.row_scale(terms, w)?;
    let dst: Arc<[usize]> = (0..t * mk).map(|r| r / k).collect();
    Ok(tape.scatter_add(weighted, dst, t * m)?)
}

/// `d`: latent rows to C-channel states.
pub fn decode_state(tape: &mut Tape, cfg: &ModelConfig, params: &ParamStore, latent: Var) -> Result<Var> {
    let spec = cfg.mlp(cfg.decoder_hidden, cfg.latent_dim, cfg.channels);
    Ok(mlp_forward(tape, &spec, params, "d", latent)?)
}
