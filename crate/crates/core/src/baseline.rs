//! Classical interpolators that stand in for the learned interpolation in the
//! ablation: inverse-distance KNN, (bi)linear and natural (bi)cubic splines.

use serde::{Deserialize, Serialize};

use crate::error::{MagnetError, Result};
use crate::mesh::{k_nearest, Coordinates};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum InterpMethod {
    Knn { k: usize },
    Linear,
    Cubic,
}

impl InterpMethod {
    /// KNN with the learned module's stencil size 2^n.
    pub fn knn_default(dim: usize) -> Self {
        InterpMethod::Knn { k: 1 << dim }
    }

    /// Parses `knn`, `knn:K`, `linear` or `cubic`.
    pub fn parse(s: &str, dim: usize) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.split_once(':') {
            Some(("knn", k)) => {
                let k = k
                    .parse()
                    .map_err(|_| MagnetError::Invalid(format!("bad KNN neighbor count {k:?}")))?;
                let m = InterpMethod::Knn { k };
                m.validate()?;
                Ok(m)
            }
            None if lower == "knn" => Ok(Self::knn_default(dim)),
            None if lower == "linear" => Ok(InterpMethod::Linear),
            None if lower == "cubic" => Ok(InterpMethod::Cubic),
            _ => Err(MagnetError::Invalid(format!("unknown interpolation {s:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            InterpMethod::Knn { k: 0 } => Err(MagnetError::Invalid("KNN needs k >= 1".into())),
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for InterpMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InterpMethod::Knn { k } => write!(f, "knn:{k}"),
            InterpMethod::Linear => write!(f, "linear"),
            InterpMethod::Cubic => write!(f, "cubic"),
        }
    }
}

/// Interpolates `frames` (`[T][N][C]` on `mesh`) to `queries`, giving `[T][M][C]`.
pub fn interp_baseline(
    method: InterpMethod,
    frames: &[f32],
    channels: usize,
    mesh: &Coordinates,
    queries: &Coordinates,
) -> Result<Vec<f32>> {
    method.validate()?;
    let n = mesh.len();
    if channels == 0 || n == 0 || frames.len() % (n * channels) != 0 {
        return Err(MagnetError::Shape(format!(
            "{} values on {n} points with {channels} channels",
            frames.len()
        )));
    }
    if !queries.is_empty() && queries.dim() != mesh.dim() {
        return Err(MagnetError::Mismatch("query and mesh dimensions differ".into()));
    }
    let t = frames.len() / (n * channels);
    let stencils = match method {
        InterpMethod::Knn { k } => knn_stencils(mesh, queries, k)?,
        InterpMethod::Linear | InterpMethod::Cubic => {
            return grid_interp(method == InterpMethod::Cubic, frames, t, channels, mesh, queries)
        }
    };
    let m = queries.len();
    let mut out = vec![0.0f32; t * m * channels];
    for k in 0..t {
        let f = &frames[k * n * channels..(k + 1) * n * channels];
        for (q, st) in stencils.iter().enumerate() {
            for c in 0..channels {
                let v: f64 = st.iter().map(|&(j, w)| w * f[j * channels + c] as f64).sum();
                out[(k * m + q) * channels + c] = v as f32;
            }
        }
    }
    Ok(out)
}

/// Inverse-distance weights over the k nearest nodes; a coincident node takes
/// all the weight.
fn knn_stencils(mesh: &Coordinates, queries: &Coordinates, k: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    let k = k.min(mesh.len());
    Ok(queries
        .points()
        .map(|q| {
            let near = k_nearest(q, mesh, k, None);
            if near[0].0 < 1e-12 {
                return vec![(near[0].1, 1.0)];
            }
            let inv: Vec<f64> = near.iter().map(|&(d, _)| 1.0 / d).collect();
            let total: f64 = inv.iter().sum();
            near.iter().zip(&inv).map(|(&(_, j), w)| (j, w / total)).collect()
        })
        .collect())
}

/// Sorted node positions along one axis.
struct Axis {
    x: Vec<f64>,
}

impl Axis {
    /// Interval index `i` with `x[i] <= v <= x[i+1]`, or the clamped end node.
    fn locate(&self, v: f64) -> Located {
        let n = self.x.len();
        if n == 1 || v <= self.x[0] {
            return Located::Node(0);
        }
        if v >= self.x[n - 1] {
            return Located::Node(n - 1);
        }
        let i = self.x.partition_point(|&p| p <= v) - 1;
        if v == self.x[i] {
            Located::Node(i)
        } else {
            Located::Inside(i)
        }
    }

    fn linear(&self, y: &[f64], v: f64) -> f64 {
        match self.locate(v) {
            Located::Node(i) => y[i],
            Located::Inside(i) => {
                let s = (v - self.x[i]) / (self.x[i + 1] - self.x[i]);
                y[i] * (1.0 - s) + y[i + 1] * s
            }
        }
    }

    /// Second derivatives of the natural cubic spline through `y`.
    fn spline_moments(&self, y: &[f64]) -> Vec<f64> {
        let n = self.x.len();
        let mut m = vec![0.0; n];
        if n < 3 {
            return m;
        }
        // Tridiagonal solve for interior moments (Thomas algorithm).
        let h: Vec<f64> = self.x.windows(2).map(|w| w[1] - w[0]).collect();
        let mut diag = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        let mut upper = vec![0.0; n];
        for i in 1..n - 1 {
            diag[i] = 2.0 * (h[i - 1] + h[i]);
            upper[i] = h[i];
            rhs[i] = 6.0 * ((y[i + 1] - y[i]) / h[i] - (y[i] - y[i - 1]) / h[i - 1]);
        }
        for i in 2..n - 1 {
            let w = h[i - 1] / diag[i - 1];
            diag[i] -= w * upper[i - 1];
            rhs[i] -= w * rhs[i - 1];
        }
        for i in (1..n - 1).rev() {
            m[i] = (rhs[i] - upper[i] * m[i + 1]) / diag[i];
        }
        m
    }

    fn cubic(&self, y: &[f64], m: &[f64], v: f64) -> f64 {
        match self.locate(v) {
            Located::Node(i) => y[i],
            Located::Inside(i) => {
                let h = self.x[i + 1] - self.x[i];
                let a = (self.x[i + 1] - v) / h;
                let b = (v - self.x[i]) / h;
                a * y[i]
                    + b * y[i + 1]
                    + ((a * a * a - a) * m[i] + (b * b * b - b) * m[i + 1]) * h * h / 6.0
            }
        }
    }
}

enum Located {
    Node(usize),
    Inside(usize),
}

/// 1D or tensor-product 2D interpolation on a (possibly non-uniform in 1D,
/// regular in 2D) mesh. Queries outside the node range take the nearest
/// boundary value along each axis.
fn grid_interp(
    cubic: bool,
    frames: &[f32],
    t: usize,
    channels: usize,
    mesh: &Coordinates,
    queries: &Coordinates,
) -> Result<Vec<f32>> {
    let n = mesh.len();
    let m = queries.len();
    let mut out = vec![0.0f32; t * m * channels];
    match mesh.dim() {
        1 => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| mesh.point(a)[0].total_cmp(&mesh.point(b)[0]));
            let axis = Axis {
                x: order.iter().map(|&i| mesh.point(i)[0]).collect(),
            };
            for k in 0..t {
                for c in 0..channels {
                    let y: Vec<f64> = order
                        .iter()
                        .map(|&i| frames[(k * n + i) * channels + c] as f64)
                        .collect();
                    let mom = if cubic { axis.spline_moments(&y) } else { Vec::new() };
                    for q in 0..m {
                        let v = queries.point(q)[0];
                        let r = if cubic { axis.cubic(&y, &mom, v) } else { axis.linear(&y, v) };
                        out[(k * m + q) * channels + c] = r as f32;
                    }
                }
            }
        }
        2 => {
            let shape = mesh.grid_shape().ok_or_else(|| {
                MagnetError::IrregularMesh("linear and cubic interpolation need a regular 2D grid".into())
            })?;
            let (nx, ny) = (shape[0], shape[1]);
            let ax = Axis {
                x: (0..nx).map(|i| mesh.point(i)[0]).collect(),
            };
            let ay = Axis {
                x: (0..ny).map(|j| mesh.point(j * nx)[1]).collect(),
            };
            for k in 0..t {
                for c in 0..channels {
                    let value = |i: usize, j: usize| frames[(k * n + j * nx + i) * channels + c] as f64;
                    let rows: Vec<Vec<f64>> = (0..ny).map(|j| (0..nx).map(|i| value(i, j)).collect()).collect();
                    let row_mom: Vec<Vec<f64>> = if cubic {
                        rows.iter().map(|r| ax.spline_moments(r)).collect()
                    } else {
                        Vec::new()
                    };
                    for q in 0..m {
                        let p = queries.point(q);
                        let col: Vec<f64> = (0..ny)
                            .map(|j| {
                                if cubic {
                                    ax.cubic(&rows[j], &row_mom[j], p[0])
                                } else {
                                    ax.linear(&rows[j], p[0])
                                }
                            })
                            .collect();
                        let r = if cubic {
                            ay.cubic(&col, &ay.spline_moments(&col), p[1])
                        } else {
                            ay.linear(&col, p[1])
                        };
                        out[(k * m + q) * channels + c] = r as f32;
                    }
                }
            }
        }
        d => return Err(MagnetError::Invalid(format!("{d}-D interpolation"))),
    }
    Ok(out)
}
