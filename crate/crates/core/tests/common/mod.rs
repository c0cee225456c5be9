#![allow(dead_code)]

use magnet::mesh::Coordinates;
use magnet::model::{init_params, ModelConfig, RolloutGeometry};
use magnet::pdegen::{generate_dataset, Dataset, DatasetSpec, DatasetTag};
use magnet::seed;
use magnet::training::{record_loss, Sample};
use rand::Rng;
use tensorcore::{eval_f64, Op, Tape, Tensor};

pub fn tiny_config(dim: usize, channels: usize, history: usize) -> ModelConfig {
    let mut c = ModelConfig::gnn(dim, channels, history);
    c.mlp_layers = 2;
    c.latent_dim = 8;
    c.encoder_hidden = 8;
    c.encoder_steps = 2;
    c.interp_hidden = 8;
    c.decoder_hidden = 8;
    c.forecaster_hidden = 8;
    c.forecaster_latent = 8;
    c.forecaster_steps = 2;
    c.forecaster_decoder_hidden = 8;
    c
}

pub fn random_coords(dim: usize, n: usize, rng_seed: u64) -> Coordinates {
    let mut rng = seed::rng(rng_seed);
    Coordinates::new(dim, (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_tensor(rows: usize, cols: usize, rng_seed: u64) -> Tensor {
    let mut rng = seed::rng(rng_seed);
    Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-1.0..1.0))
}

pub fn e1_dataset(count: usize, res: usize, n_t: usize, rng_seed: u64) -> Dataset {
    let mut spec = DatasetSpec::new(DatasetTag::E1, count, res, rng_seed);
    spec.n_t = n_t;
    generate_dataset(&spec).unwrap()
}

/// Worst relative error between reverse-mode gradients of the training loss
/// and central differences of an f64 re-evaluation of the same tape, on a
/// random instance with `n` parents and `m` queries.
pub fn end_to_end_gradcheck(n: usize, m: usize, history: usize, horizon: usize, rng_seed: u64) -> (f64, usize) {
    let cfg = tiny_config(1, 1, history);
    let mut params = init_params(&cfg, &mut seed::rng(rng_seed)).unwrap();
    // A non-zero forecaster output layer so every branch carries gradient.
    let mut rng = seed::rng(rng_seed + 1);
    for v in params.get_mut("fc.dec.w1").unwrap().data_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
    let all = random_coords(1, n + m, rng_seed + 2);
    let parent = all.select(&(0..n).collect::<Vec<_>>()).unwrap();
    let queries = all.select(&(n..n + m).collect::<Vec<_>>()).unwrap();
    let geom = RolloutGeometry::new(&cfg, &parent, &queries).unwrap();
    let sample = Sample {
        frames: random_tensor(history * n, 1, rng_seed + 3),
        query_truth: Some(random_tensor(history * m, 1, rng_seed + 4)),
        targets: (0..horizon).map(|h| random_tensor(n + m, 1, rng_seed + 10 + h as u64)).collect(),
        times: (0..history).map(|k| k as f32 / 10.0).collect(),
        dt: 0.1,
    };
    let mut tape = Tape::new();
    let loss = record_loss(&mut tape, &cfg, &params, &geom, &sample).unwrap().total;
    let grads = tape.backward(loss).unwrap();
    // f64 evaluation leaves room for a small step; larger steps cross
    // ReLU kinks downstream of near-constant layer-norm rows.
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for i in 0..tape.len() {
        let v = tape.var_at(i);
        let Op::Param(name) = tape.op(v) else { continue };
        let analytic = grads.get(name).unwrap();
        let len = analytic.numel();
        for _ in 0..3.min(len) {
            let e = rng.gen_range(0..len);
            let plus = eval_f64(&tape, &[(v, e, h)]).unwrap()[loss.index()][0];
            let minus = eval_f64(&tape, &[(v, e, -h)]).unwrap()[loss.index()][0];
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[e] as f64;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst, checked)
}
