//! Normalized coordinates, parent/query sampling, neighbor search and k-NN graphs.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MagnetError, Result};
use crate::seed;

/// Distance under which a query is treated as sitting on a parent point.
pub const COINCIDENT_EPS: f64 = 1e-9;
const DOMAIN_TOL: f64 = 1e-12;
const IDW_EPS: f64 = 1e-6;
/// Grid detection tolerance; loose enough for coordinates stored as f32.
const GRID_TOL: f64 = 1e-6;

/// Points in `[-1, 1]^dim`, stored flat (`point i` is `data[i*dim..(i+1)*dim]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coordinates {
    dim: usize,
    data: Vec<f64>,
}

impl Coordinates {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(MagnetError::Invalid(format!("spatial dimension {dim}")));
        }
        if data.len() % dim != 0 {
            return Err(MagnetError::Shape(format!(
                "{} coordinates are not a multiple of dim {dim}",
                data.len()
            )));
        }
        for p in data.chunks(dim) {
            if p.iter().any(|v| !v.is_finite() || v.abs() > 1.0 + DOMAIN_TOL) {
                return Err(MagnetError::OutOfDomain {
                    point: p.to_vec(),
                    extent: vec![(-1.0, 1.0); dim],
                });
            }
        }
        let c = Self { dim, data };
        if let Some((i, j)) = c.find_duplicate() {
            return Err(MagnetError::Invalid(format!(
                "points {i} and {j} coincide within {COINCIDENT_EPS}"
            )));
        }
        Ok(c)
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    /// Points at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Result<Coordinates> {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            if i >= self.len() {
                return Err(MagnetError::Invalid(format!(
                    "index {i} out of range for {} points",
                    self.len()
                )));
            }
            data.extend_from_slice(self.point(i));
        }
        Ok(Self {
            dim: self.dim,
            data,
        })
    }

    /// `self` followed by `other`.
    pub fn concat(&self, other: &Coordinates) -> Result<Coordinates> {
        if self.dim != other.dim {
            return Err(MagnetError::Shape(format!(
                "cannot join {}-D and {}-D coordinates",
                self.dim, other.dim
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Coordinates::new(self.dim, data)
    }

    /// Per-point coordinates as f32 rows.
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    fn find_duplicate(&self) -> Option<(usize, usize)> {
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            self.point(a)
                .partial_cmp(self.point(b))
                .unwrap_or(Ordering::Equal)
        });
        for (pos, &i) in order.iter().enumerate() {
            for &j in &order[pos + 1..] {
                if self.point(j)[0] - self.point(i)[0] > COINCIDENT_EPS {
                    break;
                }
                if dist(self.point(i), self.point(j)) < COINCIDENT_EPS {
                    return Some((i.min(j), i.max(j)));
                }
            }
        }
        None
    }

    /// Side lengths if the points form a regular grid in canonical order
    /// (x fastest in 2D) with uniform spacing per axis.
    pub fn grid_shape(&self) -> Option<Vec<usize>> {
        let n = self.len();
        if n < 2 {
            return None;
        }
        match self.dim {
            1 => uniform_axis(&self.data).then(|| vec![n]),
            _ => {
                let y0 = self.point(0)[1];
                let nx = self
                    .points()
                    .take_while(|p| (p[1] - y0).abs() < GRID_TOL)
                    .count();
                if nx < 2 || n % nx != 0 || n / nx < 2 {
                    return None;
                }
                let ny = n / nx;
                let xs: Vec<f64> = (0..nx).map(|i| self.point(i)[0]).collect();
                let ys: Vec<f64> = (0..ny).map(|j| self.point(j * nx)[1]).collect();
                if !uniform_axis(&xs) || !uniform_axis(&ys) {
                    return None;
                }
                for j in 0..ny {
                    for i in 0..nx {
                        let p = self.point(j * nx + i);
                        if (p[0] - xs[i]).abs() > GRID_TOL || (p[1] - ys[j]).abs() > GRID_TOL
                        {
                            return None;
                        }
                    }
                }
                Some(vec![nx, ny])
            }
        }
    }
}

fn uniform_axis(v: &[f64]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let h = v[1] - v[0];
    h > 0.0
        && v.windows(2)
            .all(|w| ((w[1] - w[0]) - h).abs() < GRID_TOL)
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    dist2(a, b).sqrt()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Affine map of physical positions (flat, `dim` per point) to `[-1,1]` per axis.
pub fn normalize_coords(raw: &[f64], extent: &[(f64, f64)]) -> Result<Coordinates> {
    let dim = extent.len();
    if dim == 0 || raw.len() % dim != 0 {
        return Err(MagnetError::Shape(format!(
            "{} values for a {dim}-D extent",
            raw.len()
        )));
    }
    if let Some((lo, hi)) = extent.iter().find(|(lo, hi)| !(lo < hi)) {
        return Err(MagnetError::Invalid(format!("empty extent [{lo}, {hi}]")));
    }
    let mut data = Vec::with_capacity(raw.len());
    for p in raw.chunks(dim) {
        for (&x, &(lo, hi)) in p.iter().zip(extent) {
            let span = hi - lo;
            if x < lo - DOMAIN_TOL * span || x > hi + DOMAIN_TOL * span || !x.is_finite() {
                return Err(MagnetError::OutOfDomain {
                    point: p.to_vec(),
                    extent: extent.to_vec(),
                });
            }
            data.push(((2.0 * x - (lo + hi)) / span).clamp(-1.0, 1.0));
        }
    }
    Coordinates::new(dim, data)
}

/// Normalized nodes of a periodic uniform grid with `n` points per axis over
/// `[0, length)^dim`. Index `iy * n + ix` in 2D.
pub fn periodic_grid(dim: usize, n: usize, length: f64) -> Result<Coordinates> {
    if n < 1 {
        return Err(MagnetError::Invalid("grid with zero points".into()));
    }
    let axis: Vec<f64> = (0..n).map(|i| i as f64 * length / n as f64).collect();
    let raw: Vec<f64> = match dim {
        1 => axis,
        2 => {
            let mut v = Vec::with_capacity(2 * n * n);
            for &y in &axis {
                for &x in &axis {
                    v.push(x);
                    v.push(y);
                }
            }
            v
        }
        _ => return Err(MagnetError::Invalid(format!("spatial dimension {dim}"))),
    };
    normalize_coords(&raw, &vec![(0.0, length); dim])
}

/// Parent, training-query and held-out indices into a starting mesh.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshSplit {
    pub parent: Vec<usize>,
    pub train_queries: Vec<usize>,
    pub holdout_queries: Vec<usize>,
}

impl MeshSplit {
    pub fn parent_coords(&self, mesh: &Coordinates) -> Result<Coordinates> {
        mesh.select(&self.parent)
    }

    pub fn query_coords(&self, mesh: &Coordinates) -> Result<Coordinates> {
        mesh.select(&self.train_queries)
    }

    pub fn holdout_coords(&self, mesh: &Coordinates) -> Result<Coordinates> {
        mesh.select(&self.holdout_queries)
    }
}

fn check_split_sizes(mesh: &Coordinates, n: usize, m: usize) -> Result<()> {
    let min_parent = 1usize << mesh.dim();
    if n < min_parent {
        return Err(MagnetError::InsufficientPoints(format!(
            "parent mesh needs at least {min_parent} points, got {n}"
        )));
    }
    if n + m > mesh.len() {
        return Err(MagnetError::InsufficientPoints(format!(
            "N + M = {} exceeds the {} points of the starting mesh",
            n + m,
            mesh.len()
        )));
    }
    Ok(())
}

/// Uniform split without replacement: N parents, then M queries from the rest.
pub fn sample_split(mesh: &Coordinates, n: usize, m: usize, rng_seed: u64) -> Result<MeshSplit> {
    check_split_sizes(mesh, n, m)?;
    let mut order: Vec<usize> = (0..mesh.len()).collect();
    order.shuffle(&mut seed::rng(rng_seed));
    let mut parent = order[..n].to_vec();
    let mut train = order[n..n + m].to_vec();
    let mut holdout = order[n + m..].to_vec();
    parent.sort_unstable();
    train.sort_unstable();
    holdout.sort_unstable();
    Ok(MeshSplit {
        parent,
        train_queries: train,
        holdout_queries: holdout,
    })
}

/// How the parent mesh is chosen from a starting mesh.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeshProtocol {
    /// Evenly spaced sub-grid of a regular starting grid.
    Regular,
    /// Uniform random points.
    Uniform,
    /// Weighted random points concentrated near (0.25, ..) of the unit box.
    Condensed,
}

impl std::str::FromStr for MeshProtocol {
    type Err = MagnetError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "regular" => Ok(Self::Regular),
            "uniform" => Ok(Self::Uniform),
            "condensed" => Ok(Self::Condensed),
            other => Err(MagnetError::Invalid(format!("unknown mesh protocol {other:?}"))),
        }
    }
}

/// Parent indices chosen by `protocol`; then M queries uniformly from the rest.
pub fn split_with_protocol(
    mesh: &Coordinates,
    protocol: MeshProtocol,
    n: usize,
    m: usize,
    rng_seed: u64,
) -> Result<MeshSplit> {
    check_split_sizes(mesh, n, m)?;
    let parent = match protocol {
        MeshProtocol::Uniform => return sample_split(mesh, n, m, rng_seed),
        MeshProtocol::Regular => regular_subgrid(mesh, n)?,
        MeshProtocol::Condensed => condensed_indices(mesh, n, rng_seed)?,
    };
    let mut is_parent = vec![false; mesh.len()];
    for &i in &parent {
        is_parent[i] = true;
    }
    let mut rest: Vec<usize> = (0..mesh.len()).filter(|&i| !is_parent[i]).collect();
    rest.shuffle(&mut seed::rng(seed::derive_labeled(rng_seed, "queries", 0)));
    let mut train = rest[..m].to_vec();
    let mut holdout = rest[m..].to_vec();
    train.sort_unstable();
    holdout.sort_unstable();
    let mut parent = parent;
    parent.sort_unstable();
    Ok(MeshSplit {
        parent,
        train_queries: train,
        holdout_queries: holdout,
    })
}

/// Evenly spaced sub-grid with `n` points (`n` must be a perfect square in 2D).
/// Index `i` of a side of length `s` maps to `round(i * side / s)`.
pub fn regular_subgrid(mesh: &Coordinates, n: usize) -> Result<Vec<usize>> {
    let shape = mesh.grid_shape().ok_or_else(|| {
        MagnetError::IrregularMesh("regular protocol needs a regular starting grid".into())
    })?;
    let pick = |side: usize, s: usize| -> Vec<usize> {
        (0..s)
            .map(|i| ((i as f64 * side as f64 / s as f64).round() as usize).min(side - 1))
            .collect()
    };
    match shape.as_slice() {
        [side] => Ok(pick(*side, n)),
        [nx, ny] => {
            let s = (n as f64).sqrt().round() as usize;
            if s * s != n || s > *nx || s > *ny {
                return Err(MagnetError::Invalid(format!(
                    "regular 2D parent needs a square count <= {nx}x{ny}, got {n}"
                )));
            }
            let (ix, iy) = (pick(*nx, s), pick(*ny, s));
            Ok(iy
                .iter()
                .flat_map(|&j| ix.iter().map(move |&i| j * nx + i))
                .collect())
        }
        _ => unreachable!(),
    }
}

/// Unnormalized condensed density at a normalized point.
pub fn condensed_density(p: &[f64]) -> f64 {
    let s: f64 = p
        .iter()
        .map(|&c| {
            let u = (c + 1.0) / 2.0 - 0.25;
            u * u
        })
        .sum();
    (-8.0 * s).exp()
}

fn condensed_indices(mesh: &Coordinates, n: usize, rng_seed: u64) -> Result<Vec<usize>> {
    if n > mesh.len() {
        return Err(MagnetError::InsufficientPoints(format!(
            "cannot draw {n} of {} grid nodes",
            mesh.len()
        )));
    }
    // Weighted sampling without replacement: keep the n largest ln(u)/w keys.
    let mut rng = seed::rng(rng_seed);
    let mut keys: Vec<(f64, usize)> = mesh
        .points()
        .enumerate()
        .map(|(i, p)| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            (u.ln() / condensed_density(p), i)
        })
        .collect();
    keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut idx: Vec<usize> = keys[..n].iter().map(|k| k.1).collect();
    idx.sort_unstable();
    Ok(idx)
}

/// N distinct grid nodes drawn with probability proportional to
/// `exp(-8 * sum_d (x_d - 0.25)^2)` at each node's unit-box position.
pub fn sample_condensed(grid: &Coordinates, n: usize, rng_seed: u64) -> Result<Coordinates> {
    let idx = condensed_indices(grid, n, rng_seed)?;
    grid.select(&idx)
}

/// The `2^dim` nearest parents of each query with their interpolation weights.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborWeights {
    pub k: usize,
    /// `queries * k` parent indices, nearest first.
    pub indices: Vec<usize>,
    /// Matching weights; each group of `k` sums to 1.
    pub weights: Vec<f64>,
}

impl NeighborWeights {
    pub fn len(&self) -> usize {
        self.indices.len() / self.k.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn entry(&self, q: usize) -> (&[usize], &[f64]) {
        let r = q * self.k..(q + 1) * self.k;
        (&self.indices[r.clone()], &self.weights[r])
    }
}

/// Indices of the `k` nearest points of `mesh` to `q`, nearest first, ties by
/// lower index, skipping `exclude`.
pub fn k_nearest(q: &[f64], mesh: &Coordinates, k: usize, exclude: Option<usize>) -> Vec<(f64, usize)> {
    let mut cand: Vec<(f64, usize)> = mesh
        .points()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, p)| (dist2(q, p), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < cand.len() {
        cand.select_nth_unstable_by(k, cmp);
        cand.truncate(k);
    }
    cand.sort_by(cmp);
    cand.into_iter().map(|(d2, i)| (d2.sqrt(), i)).collect()
}

/// Neighbors and weights for one query: coincident parent gets weight 1;
/// a bracketing 1D pair gets linear weights; an axis-aligned 2D cell holding
/// the query gets bilinear weights; anything else inverse-distance weights.
pub fn nearest_parents(query: &[f64], parent: &Coordinates) -> Result<(Vec<usize>, Vec<f64>)> {
    let dim = parent.dim();
    if query.len() != dim {
        return Err(MagnetError::Shape(format!(
            "{}-D query against a {dim}-D mesh",
            query.len()
        )));
    }
    let k = 1usize << dim;
    if parent.len() < k {
        return Err(MagnetError::InsufficientPoints(format!(
            "{k} neighbors requested from {} parents",
            parent.len()
        )));
    }
    let near = k_nearest(query, parent, k, None);
    let idx: Vec<usize> = near.iter().map(|n| n.1).collect();
    let d: Vec<f64> = near.iter().map(|n| n.0).collect();
    if d[0] < COINCIDENT_EPS {
        let mut w = vec![0.0; k];
        w[0] = 1.0;
        return Ok((idx, w));
    }
    let pts: Vec<&[f64]> = idx.iter().map(|&i| parent.point(i)).collect();
    let w = match dim {
        1 => linear_weights(query[0], pts[0][0], pts[1][0]),
        _ => bilinear_weights(query, &pts),
    }
    .filter(|w| monotone(&d, w))
    .unwrap_or_else(|| idw_weights(&d));
    Ok((idx, w))
}

fn linear_weights(q: f64, a: f64, b: f64) -> Option<Vec<f64>> {
    let (lo, hi) = (a.min(b), a.max(b));
    if q < lo || q > hi {
        return None;
    }
    let span = hi - lo;
    Some(vec![(b - q).abs() / span, (a - q).abs() / span])
}

fn bilinear_weights(q: &[f64], pts: &[&[f64]]) -> Option<Vec<f64>> {
    let mut xs: Vec<f64> = pts.iter().map(|p| p[0]).collect();
    let mut ys: Vec<f64> = pts.iter().map(|p| p[1]).collect();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let same = |a: f64, b: f64| (a - b).abs() < GRID_TOL;
    let (x0, x1, y0, y1) = (xs[0], xs[3], ys[0], ys[3]);
    if !(same(xs[0], xs[1]) && same(xs[2], xs[3]) && same(ys[0], ys[1]) && same(ys[2], ys[3])) {
        return None;
    }
    if x1 - x0 < COINCIDENT_EPS || y1 - y0 < COINCIDENT_EPS {
        return None;
    }
    if q[0] < x0 || q[0] > x1 || q[1] < y0 || q[1] > y1 {
        return None;
    }
    let area = (x1 - x0) * (y1 - y0);
    let w = pts
        .iter()
        .map(|p| {
            let ox = if same(p[0], x0) { x1 } else { x0 };
            let oy = if same(p[1], y0) { y1 } else { y0 };
            (ox - q[0]).abs() * (oy - q[1]).abs() / area
        })
        .collect::<Vec<_>>();
    let corners_distinct = pts.iter().enumerate().all(|(i, a)| {
        pts[i + 1..]
            .iter()
            .all(|b| !(same(a[0], b[0]) && same(a[1], b[1])))
    });
    corners_distinct.then_some(w)
}

fn idw_weights(d: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = d.iter().map(|&d| 1.0 / (d + IDW_EPS)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / s).collect()
}

/// Distances ascending; weights must not increase (up to rounding).
fn monotone(d: &[f64], w: &[f64]) -> bool {
    (0..d.len()).all(|i| {
        (i + 1..d.len()).all(|j| d[j] - d[i] < 1e-12 || w[j] <= w[i] + 1e-12)
    })
}

/// Neighbor weights for every query point.
pub fn neighbor_weights(queries: &Coordinates, parent: &Coordinates) -> Result<NeighborWeights> {
    if queries.dim() != parent.dim() {
        return Err(MagnetError::Shape(format!(
            "{}-D queries against a {}-D parent mesh",
            queries.dim(),
            parent.dim()
        )));
    }
    let k = 1usize << parent.dim();
    if parent.len() < k {
        return Err(MagnetError::InsufficientPoints(format!(
            "{k} neighbors requested from {} parents",
            parent.len()
        )));
    }
    let mut indices = Vec::with_capacity(queries.len() * k);
    let mut weights = Vec::with_capacity(queries.len() * k);
    for q in queries.points() {
        let (i, w) = nearest_parents(q, parent)?;
        indices.extend(i);
        weights.extend(w);
    }
    Ok(NeighborWeights {
        k,
        indices,
        weights,
    })
}

/// Directed k-nearest-neighbor graph: node `dst` receives edges from its `k`
/// nearest other nodes. Edges are grouped by `dst`, nearest source first.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborGraph {
    pub num_nodes: usize,
    pub k: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl NeighborGraph {
    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    /// Adds the reverse of every edge not already present.
    pub fn symmetrized(&self) -> NeighborGraph {
        let mut edges: Vec<(usize, usize)> = self.src.iter().copied().zip(self.dst.iter().copied()).collect();
        let present: std::collections::HashSet<(usize, usize)> = edges.iter().copied().collect();
        let extra: Vec<(usize, usize)> = edges
            .iter()
            .map(|&(s, d)| (d, s))
            .filter(|e| !present.contains(e))
            .collect();
        edges.extend(extra);
        edges.sort_by_key(|&(s, d)| (d, s));
        edges.dedup();
        NeighborGraph {
            num_nodes: self.num_nodes,
            k: self.k,
            src: edges.iter().map(|e| e.0).collect(),
            dst: edges.iter().map(|e| e.1).collect(),
        }
    }
}

pub fn knn_graph(nodes: &Coordinates, k: usize) -> Result<NeighborGraph> {
    let n = nodes.len();
    if k >= n {
        return Err(MagnetError::InsufficientPoints(format!(
            "k_graph = {k} needs more than {n} nodes"
        )));
    }
    let mut src = Vec::with_capacity(n * k);
    let mut dst = Vec::with_capacity(n * k);
    for (i, p) in nodes.points().enumerate() {
        for (_, j) in k_nearest(p, nodes, k, Some(i)) {
            src.push(j);
            dst.push(i);
        }
    }
    Ok(NeighborGraph {
        num_nodes: n,
        k,
        src,
        dst,
    })
}
