//! Double-precision re-evaluation of a recorded tape, written independently
//! of the f32 kernels. Used as a finite-difference oracle for whole models.

use crate::error::{Result, TensorError};
use crate::tape::{Op, Tape, Var};
use crate::LAYER_NORM_EPS;

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [d] => (1, *d),
        [r, c] => (*r, *c),
        _ => (1, shape.iter().product()),
    }
}

/// Values of every node in f64. Leaves and parameters take their recorded
/// values, with `perturb` entries `(var, flat index, delta)` added on top.
pub fn eval_f64(tape: &Tape, perturb: &[(Var, usize, f64)]) -> Result<Vec<Vec<f64>>> {
    let mut vals: Vec<Vec<f64>> = Vec::with_capacity(tape.len());
    for i in 0..tape.len() {
        let var = tape.var_at(i);
        let shape = tape.value(var).shape().to_vec();
        let v = match tape.op(var) {
            Op::Leaf | Op::Param(_) => {
                let mut v: Vec<f64> = tape.value(var).data().iter().map(|&x| x as f64).collect();
                for &(p, idx, d) in perturb {
                    if p == var {
                        v[idx] += d;
                    }
                }
                v
            }
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(tape.value(*a).shape());
                let (_, n) = rows_cols(tape.value(*b).shape());
                let (av, bv) = (&vals[a.index()], &vals[b.index()]);
                let mut out = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        out[r * n + c] = (0..k).map(|j| av[r * k + j] * bv[j * n + c]).sum();
                    }
                }
                out
            }
            Op::Add(a, b) => vals[a.index()].iter().zip(&vals[b.index()]).map(|(x, y)| x + y).collect(),
            Op::Sub(a, b) => vals[a.index()].iter().zip(&vals[b.index()]).map(|(x, y)| x - y).collect(),
            Op::Mul(a, b) => vals[a.index()].iter().zip(&vals[b.index()]).map(|(x, y)| x * y).collect(),
            Op::Scale(a, s) => vals[a.index()].iter().map(|x| x * *s as f64).collect(),
            Op::Relu(a) => vals[a.index()].iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
            Op::Abs(a) => vals[a.index()].iter().map(|x| x.abs()).collect(),
            Op::Sum(a) => vec![vals[a.index()].iter().sum()],
            Op::Mean(a) => {
                let v = &vals[a.index()];
                vec![v.iter().sum::<f64>() / v.len().max(1) as f64]
            }
            Op::BroadcastRows(a, rows) => {
                let v = &vals[a.index()];
                (0..*rows).flat_map(|_| v.iter().copied()).collect()
            }
            Op::Gather(a, idx) => {
                let (_, cols) = rows_cols(tape.value(*a).shape());
                let v = &vals[a.index()];
                idx.iter().flat_map(|&r| v[r * cols..(r + 1) * cols].iter().copied()).collect()
            }
            Op::ScatterAdd(a, idx, rows) => {
                let (_, cols) = rows_cols(tape.value(*a).shape());
                let v = &vals[a.index()];
                let mut out = vec![0.0; rows * cols];
                for (r, &dst) in idx.iter().enumerate() {
                    for c in 0..cols {
                        out[dst * cols + c] += v[r * cols + c];
                    }
                }
                out
            }
            Op::RowScale(a, w) => {
                let (_, cols) = rows_cols(tape.value(*a).shape());
                vals[a.index()]
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x * w[i / cols] as f64)
                    .collect()
            }
            Op::LayerNorm(a) => {
                let (rows, cols) = rows_cols(tape.value(*a).shape());
                let v = &vals[a.index()];
                let mut out = Vec::with_capacity(v.len());
                for r in 0..rows {
                    let row = &v[r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / cols as f64;
                    let sd = (var + LAYER_NORM_EPS as f64).sqrt();
                    out.extend(row.iter().map(|x| (x - mean) / sd));
                }
                out
            }
            Op::Concat(vs, axis) => {
                if *axis == 0 {
                    vs.iter().flat_map(|v| vals[v.index()].iter().copied()).collect()
                } else {
                    let (rows, _) = rows_cols(&shape);
                    let mut out = Vec::new();
                    for r in 0..rows {
                        for v in vs {
                            let (_, c) = rows_cols(tape.value(*v).shape());
                            out.extend_from_slice(&vals[v.index()][r * c..(r + 1) * c]);
                        }
                    }
                    out
                }
            }
        };
        if v.len() != shape.iter().product::<usize>() {
            return Err(TensorError::Invalid(format!("f64 replay size mismatch at node {i}")));
        }
        vals.push(v);
    }
    Ok(vals)
}
