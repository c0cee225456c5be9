//! Finite-difference checks of every primitive's adjoint.
//!
//! Each check records `loss = sum(op(inputs) * R)` on a tape and compares the
//! reverse-mode gradient against central differences (h = 1e-3) of an
//! independent f64 re-implementation of the same op.

use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorcore::{grad, init_mlp, mlp_forward, InitScheme, MlpSpec, ParamStore, Tape, Tensor, Var};

const H: f64 = 1e-3;
const TOL: f64 = 1e-3;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, away_from_zero: bool) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-1.0..1.0);
            if !away_from_zero || v.abs() > 0.02 {
                break v;
            }
        })
        .collect()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-2)
}

struct Case {
    shapes: Vec<Vec<usize>>,
    /// Tape version; returns the op output.
    tape_fn: Box<dyn Fn(&mut Tape, &[Var]) -> Var>,
    /// f64 reference returning the flattened op output.
    reference: Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>,
    away_from_zero: bool,
}

fn check(name: &str, case: Case, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f64>> = case
        .shapes
        .iter()
        .map(|s| rand_vec(&mut rng, s.iter().product(), case.away_from_zero))
        .collect();
    let out_len = (case.reference)(&inputs).len();
    let proj = rand_vec(&mut rng, out_len, false);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(&case.shapes)
        .map(|(d, s)| {
            tape.leaf(Tensor::new(s.clone(), d.iter().map(|&v| v as f32).collect()).unwrap())
                .unwrap()
        })
        .collect();
    let out = (case.tape_fn)(&mut tape, &vars);
    let out_shape = tape.value(out).shape().to_vec();
    let r = tape
        .leaf(Tensor::new(out_shape, proj.iter().map(|&v| v as f32).collect()).unwrap())
        .unwrap();
    let prod = tape.mul(out, r).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();

    let ref_loss = |xs: &[Vec<f64>]| -> f64 {
        (case.reference)(xs)
            .iter()
            .zip(&proj)
            .map(|(a, b)| a * b)
            .sum()
    };
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).expect("input reached by the sweep");
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k][i] += H;
            let mut minus = inputs.clone();
            minus[k][i] -= H;
            let numeric = (ref_loss(&plus) - ref_loss(&minus)) / (2.0 * H);
            let e = rel_err(analytic.data()[i] as f64, numeric);
            worst = worst.max(e);
            assert!(
                e < TOL,
                "{name}: input {k} entry {i}: analytic {} vs numeric {numeric} (rel {e:.2e})",
                analytic.data()[i]
            );
        }
    }
    eprintln!("{name}: worst relative error {worst:.2e}");
}

fn matmul_ref(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

fn layer_norm_ref(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + tensorcore::LAYER_NORM_EPS as f64).sqrt();
        for c in 0..cols {
            out[r * cols + c] = (row[c] - mean) * inv;
        }
    }
    out
}

fn unary(shape: &[usize], f: fn(&mut Tape, Var) -> Var, r: fn(f64) -> f64, kink: bool) -> Case {
    Case {
        shapes: vec![shape.to_vec()],
        tape_fn: Box::new(move |t, v| f(t, v[0])),
        reference: Box::new(move |x| x[0].iter().map(|&v| r(v)).collect()),
        away_from_zero: kink,
    }
}

fn binary(f: fn(&mut Tape, Var, Var) -> Var, r: fn(f64, f64) -> f64) -> Case {
    Case {
        shapes: vec![vec![3, 4], vec![3, 4]],
        tape_fn: Box::new(move |t, v| f(t, v[0], v[1])),
        reference: Box::new(move |x| x[0].iter().zip(&x[1]).map(|(&a, &b)| r(a, b)).collect()),
        away_from_zero: false,
    }
}

#[test]
fn matmul_adjoint() {
    let case = Case {
        shapes: vec![vec![3, 5], vec![5, 4]],
        tape_fn: Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()),
        reference: Box::new(|x| matmul_ref(&x[0], &x[1], 3, 5, 4)),
        away_from_zero: false,
    };
    check("matmul", case, 1);
}

#[test]
fn elementwise_adjoints() {
    check("add", binary(|t, a, b| t.add(a, b).unwrap(), |a, b| a + b), 2);
    check("sub", binary(|t, a, b| t.sub(a, b).unwrap(), |a, b| a - b), 3);
    check("mul", binary(|t, a, b| t.mul(a, b).unwrap(), |a, b| a * b), 4);
    check(
        "scale",
        unary(&[4, 3], |t, a| t.scale(a, -2.5).unwrap(), |a| -2.5 * a, false),
        5,
    );
    check(
        "relu",
        unary(&[4, 3], |t, a| t.relu(a).unwrap(), |a| a.max(0.0), true),
        6,
    );
    check("abs", unary(&[4, 3], |t, a| t.abs(a).unwrap(), f64::abs, true), 7);
}

#[test]
fn reduction_adjoints() {
    let sum = Case {
        shapes: vec![vec![3, 4]],
        tape_fn: Box::new(|t, v| t.sum(v[0]).unwrap()),
        reference: Box::new(|x| vec![x[0].iter().sum()]),
        away_from_zero: false,
    };
    check("sum", sum, 8);
    let mean = Case {
        shapes: vec![vec![3, 4]],
        tape_fn: Box::new(|t, v| t.mean(v[0]).unwrap()),
        reference: Box::new(|x| vec![x[0].iter().sum::<f64>() / 12.0]),
        away_from_zero: false,
    };
    check("mean", mean, 9);
}

#[test]
fn broadcast_adjoint() {
    let case = Case {
        shapes: vec![vec![4]],
        tape_fn: Box::new(|t, v| t.broadcast_rows(v[0], 3).unwrap()),
        reference: Box::new(|x| x[0].iter().cycle().take(12).copied().collect()),
        away_from_zero: false,
    };
    check("broadcast_rows", case, 10);
}

#[test]
fn gather_scatter_adjoints() {
    let idx: Arc<[usize]> = Arc::from(vec![2usize, 0, 2, 1, 3, 2]);
    let gi = idx.clone();
    let gather = Case {
        shapes: vec![vec![4, 3]],
        tape_fn: Box::new(move |t, v| t.gather(v[0], gi.clone()).unwrap()),
        reference: Box::new(|x| {
            [2usize, 0, 2, 1, 3, 2]
                .iter()
                .flat_map(|&i| x[0][i * 3..i * 3 + 3].to_vec())
                .collect()
        }),
        away_from_zero: false,
    };
    check("gather", gather, 11);
    let si = idx.clone();
    let scatter = Case {
        shapes: vec![vec![6, 3]],
        tape_fn: Box::new(move |t, v| t.scatter_add(v[0], si.clone(), 5).unwrap()),
        reference: Box::new(|x| {
            let mut out = vec![0.0; 15];
            for (r, &i) in [2usize, 0, 2, 1, 3, 2].iter().enumerate() {
                for c in 0..3 {
                    out[i * 3 + c] += x[0][r * 3 + c];
                }
            }
            out
        }),
        away_from_zero: false,
    };
    check("scatter_add", scatter, 12);
}

#[test]
fn row_scale_adjoint() {
    let w: Arc<[f32]> = Arc::from(vec![0.25f32, -1.5, 2.0]);
    let case = Case {
        shapes: vec![vec![3, 4]],
        tape_fn: Box::new(move |t, v| t.row_scale(v[0], w.clone()).unwrap()),
        reference: Box::new(|x| {
            let w = [0.25, -1.5, 2.0];
            x[0].iter().enumerate().map(|(i, v)| v * w[i / 4]).collect()
        }),
        away_from_zero: false,
    };
    check("row_scale", case, 13);
}

#[test]
fn layer_norm_adjoint() {
    let case = Case {
        shapes: vec![vec![4, 6]],
        tape_fn: Box::new(|t, v| t.layer_norm(v[0]).unwrap()),
        reference: Box::new(|x| layer_norm_ref(&x[0], 4, 6)),
        away_from_zero: false,
    };
    check("layer_norm", case, 14);
}

#[test]
fn concat_adjoints() {
    let cols = Case {
        shapes: vec![vec![3, 2], vec![3, 4]],
        tape_fn: Box::new(|t, v| t.concat(&[v[0], v[1]], 1).unwrap()),
        reference: Box::new(|x| {
            (0..3)
                .flat_map(|r| {
                    let mut row = x[0][r * 2..r * 2 + 2].to_vec();
                    row.extend_from_slice(&x[1][r * 4..r * 4 + 4]);
                    row
                })
                .collect()
        }),
        away_from_zero: false,
    };
    check("concat_cols", cols, 15);
    let rows = Case {
        shapes: vec![vec![2, 3], vec![1, 3]],
        tape_fn: Box::new(|t, v| t.concat(&[v[0], v[1]], 0).unwrap()),
        reference: Box::new(|x| x[0].iter().chain(&x[1]).copied().collect()),
        away_from_zero: false,
    };
    check("concat_rows", rows, 16);
}

/// Two-layer ReLU MLP: analytic gradients against central differences of an
/// f64 forward pass.
#[test]
fn two_layer_mlp_matches_finite_differences() {
    let spec = MlpSpec::new(2, 8, 3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut params = ParamStore::new();
    init_mlp(&spec, "m", InitScheme::KaimingUniform, &mut rng, &mut params).unwrap();
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let x: Vec<f32> = (0..5 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let input = Tensor::new(vec![5, 3], x.clone()).unwrap();

    let (_, grads) = grad(&params, |t, p| {
        let xi = t.leaf(input.clone())?;
        let y = mlp_forward(t, &spec, p, "m", xi)?;
        t.sum(y)
    })
    .unwrap();

    let forward = |p: &std::collections::BTreeMap<String, Vec<f64>>| -> f64 {
        let xs: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let mut h = matmul_ref(&xs, &p["m.w0"], 5, 3, 8);
        for r in 0..5 {
            for c in 0..8 {
                h[r * 8 + c] = (h[r * 8 + c] + p["m.b0"][c]).max(0.0);
            }
        }
        let mut y = matmul_ref(&h, &p["m.w1"], 5, 8, 2);
        for r in 0..5 {
            for c in 0..2 {
                y[r * 2 + c] += p["m.b1"][c];
            }
        }
        y.iter().sum()
    };
    let base: std::collections::BTreeMap<String, Vec<f64>> = params
        .iter()
        .map(|(k, t)| (k.clone(), t.data().iter().map(|&v| v as f64).collect()))
        .collect();
    for (name, values) in &base {
        for i in 0..values.len() {
            let mut plus = base.clone();
            plus.get_mut(name).unwrap()[i] += H;
            let mut minus = base.clone();
            minus.get_mut(name).unwrap()[i] -= H;
            let numeric = (forward(&plus) - forward(&minus)) / (2.0 * H);
            let analytic = grads.get(name).unwrap().data()[i] as f64;
            assert!(
                rel_err(analytic, numeric) < TOL,
                "{name}[{i}]: {analytic} vs {numeric}"
            );
        }
    }
}

#[test]
fn replay_is_bit_identical() {
    let spec = MlpSpec::new(3, 16, 4, 3).with_layernorm();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = ParamStore::new();
    init_mlp(&spec, "m", InitScheme::KaimingUniform, &mut rng, &mut params).unwrap();
    let mut tape = Tape::new();
    let x = tape
        .leaf(Tensor::from_fn(&[9, 4], |i| (i as f32 * 0.37).sin()))
        .unwrap();
    let y = mlp_forward(&mut tape, &spec, &params, "m", x).unwrap();
    let idx: Arc<[usize]> = Arc::from(vec![0usize, 1, 1, 8]);
    let g = tape.gather(y, idx.clone()).unwrap();
    let s = tape.scatter_add(g, idx, 9).unwrap();
    let loss = tape.mean(s).unwrap();
    let replayed = tape.replay().unwrap();
    assert_eq!(replayed.len(), tape.len());
    for (i, (v, original)) in replayed.iter().zip(tape.values()).enumerate() {
        assert_eq!(v.data(), original.data(), "node {i}");
    }
    assert_eq!(replayed.last().unwrap(), tape.value(loss));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn layer_norm_rows_are_standardized(
        rows in proptest::collection::vec(proptest::collection::vec(-5.0f32..5.0, 8), 1..6)
    ) {
        let spread_ok = rows.iter().all(|r| {
            let mean = r.iter().sum::<f32>() / r.len() as f32;
            r.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / r.len() as f32 > 0.1
        });
        prop_assume!(spread_ok);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&rows).unwrap()).unwrap();
        let y = tape.layer_norm(x).unwrap();
        let out = tape.value(y);
        for r in 0..rows.len() {
            let row = out.row(r);
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / row.len() as f64;
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let spec = MlpSpec::new(3, 8, 2, 2).with_layernorm();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_mlp(&spec, "m", InitScheme::KaimingUniform, &mut rng, &mut params).unwrap();
        let input = Tensor::from_fn(&[4, 2], |i| (i as f32 + seed as f32).cos());
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(input.clone()).unwrap();
            let y = mlp_forward(&mut t, &spec, &params, "m", x).unwrap();
            t.value(y).clone()
        };
        prop_assert_eq!(run(), run());
    }
}
