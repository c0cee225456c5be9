use std::sync::Arc;

use magnet::mesh::{nearest_parents, neighbor_weights, periodic_grid, Coordinates, NeighborGraph};
use magnet::model::*;
use magnet::seed;
use magnet::MagnetError;
use rand::Rng;
use tensorcore::{mlp_forward, MlpSpec, ParamStore, Tape, Tensor, Var};

fn small(dim: usize, channels: usize, history: usize) -> ModelConfig {
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

fn random_coords(dim: usize, n: usize, rng_seed: u64) -> Coordinates {
    let mut rng = seed::rng(rng_seed);
    let data = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Coordinates::new(dim, data).unwrap()
}

fn random_tensor(rows: usize, cols: usize, rng_seed: u64) -> Tensor {
    let mut rng = seed::rng(rng_seed);
    Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-1.0..1.0))
}

/// Every parameter of the last layer of `prefix` set to small random values.
fn randomize(params: &mut ParamStore, name: &str, rng_seed: u64) {
    let mut rng = seed::rng(rng_seed);
    for v in params.get_mut(name).unwrap().data_mut() {
        *v = rng.gen_range(-0.3..0.3);
    }
}

fn encode_gnn_values(cfg: &ModelConfig, params: &ParamStore, frames: &Tensor, coords: &Coordinates) -> Tensor {
    let graph = GraphInputs::new(coords, cfg).unwrap();
    let mut tape = Tape::new();
    let f = tape.leaf(frames.clone()).unwrap();
    let c = tape
        .leaf(Tensor::new(vec![coords.len(), cfg.dim], coords.to_f32()).unwrap())
        .unwrap();
    let z = encode_gnn(&mut tape, cfg, params, f, c, &graph).unwrap();
    tape.value(z).clone()
}

#[test]
fn gnn_embedding_shape() {
    let mut cfg = ModelConfig::gnn(1, 1, 25);
    cfg.encoder_hidden = 16;
    cfg.encoder_steps = 1;
    let params = init_params(&cfg, &mut seed::rng(1)).unwrap();
    let coords = random_coords(1, 50, 2);
    let z = encode_gnn_values(&cfg, &params, &random_tensor(25 * 50, 1, 3), &coords);
    assert_eq!(z.shape(), &[50, 128]);
    assert!(z.is_finite());
}

#[test]
fn cnn_embedding_shape_on_grid() {
    let mut cfg = ModelConfig::cnn(2, 2, 10);
    cfg.encoder_hidden = 8;
    cfg.encoder_blocks = 1;
    let params = init_params(&cfg, &mut seed::rng(1)).unwrap();
    let mesh = periodic_grid(2, 64, 64.0).unwrap();
    let geom = EncoderGeometry::new(&cfg, &mesh).unwrap();
    let mut tape = Tape::new();
    let f = tape.leaf(random_tensor(10 * 4096, 2, 4)).unwrap();
    let c = tape.leaf(Tensor::new(vec![4096, 2], mesh.to_f32()).unwrap()).unwrap();
    let z = encode(&mut tape, &cfg, &params, f, &geom, c).unwrap();
    assert_eq!(tape.value(z).shape(), &[4096, 128]);
}

#[test]
fn cnn_rejects_scattered_mesh() {
    let cfg = ModelConfig::cnn(1, 1, 4);
    let err = EncoderGeometry::new(&cfg, &random_coords(1, 20, 9)).unwrap_err();
    assert!(matches!(err, MagnetError::IrregularMesh(_)));
}

#[test]
fn cnn_is_shift_equivariant_on_periodic_grid() {
    let mut cfg = ModelConfig::cnn(1, 1, 3);
    cfg.encoder_hidden = 8;
    cfg.latent_dim = 6;
    cfg.encoder_blocks = 2;
    let params = init_params(&cfg, &mut seed::rng(5)).unwrap();
    let n = 16;
    let frames = random_tensor(3 * n, 1, 6);
    let shifted = Tensor::from_fn(&[3 * n, 1], |r| {
        let (k, i) = (r / n, r % n);
        frames.data()[k * n + (i + 3) % n]
    });
    let run = |f: &Tensor| {
        let mut tape = Tape::new();
        let v = tape.leaf(f.clone()).unwrap();
        let z = encode_cnn(&mut tape, &cfg, &params, v, &[n]).unwrap();
        tape.value(z).clone()
    };
    let (a, b) = (run(&frames), run(&shifted));
    for i in 0..n {
        assert_eq!(b.row(i), a.row((i + 3) % n));
    }
}

fn permute_rows(t: &Tensor, perm: &[usize], block: usize) -> Tensor {
    // Row r of block b moves to block b, row perm[r].
    let cols = t.shape()[1];
    let rows = t.shape()[0];
    let mut out = vec![0.0; t.numel()];
    for r in 0..rows {
        let (b, i) = (r / block, r % block);
        let dst = b * block + perm[i];
        out[dst * cols..(dst + 1) * cols].copy_from_slice(t.row(r));
    }
    Tensor::new(vec![rows, cols], out).unwrap()
}

#[test]
fn gnn_encoder_is_permutation_equivariant() {
    let cfg = small(2, 2, 3);
    let params = init_params(&cfg, &mut seed::rng(7)).unwrap();
    let n = 30;
    let coords = random_coords(2, n, 8);
    let frames = random_tensor(3 * n, 2, 9);
    let mut perm: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut seed::rng(10));
    let mut inv = vec![0; n];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    let pc = coords.select(&inv).unwrap();
    let z = encode_gnn_values(&cfg, &params, &frames, &coords);
    let zp = encode_gnn_values(&cfg, &params, &permute_rows(&frames, &perm, n), &pc);
    assert_eq!(permute_rows(&z, &perm, n), zp);
}

fn g_term(cfg: &ModelConfig, params: &ParamStore, x: &[f32], z: &[f32], offset: &[f32], t: f32) -> Vec<f32> {
    let mut row = x.to_vec();
    row.extend_from_slice(z);
    row.extend_from_slice(offset);
    row.push(t);
    let mut tape = Tape::new();
    let v = tape.leaf(Tensor::new(vec![1, row.len()], row).unwrap()).unwrap();
    let spec = MlpSpec::new(cfg.mlp_layers, cfg.interp_hidden, cfg.channels + cfg.latent_dim + cfg.dim + 1, cfg.latent_dim)
        .with_layernorm();
    let out = mlp_forward(&mut tape, &spec, params, "g", v).unwrap();
    tape.value(out).data().to_vec()
}

fn interp_values(cfg: &ModelConfig, params: &ParamStore, frames: &Tensor, z: &Tensor, geom: &InterpGeometry, times: &[f32]) -> Tensor {
    let mut tape = Tape::new();
    let f = tape.leaf(frames.clone()).unwrap();
    let zv = tape.leaf(z.clone()).unwrap();
    let out = interpolate_features(&mut tape, cfg, params, f, zv, geom, times).unwrap();
    tape.value(out).clone()
}

#[test]
fn coincident_query_equals_single_g_term() {
    let cfg = small(1, 1, 2);
    let params = init_params(&cfg, &mut seed::rng(3)).unwrap();
    let parent = Coordinates::new(1, vec![-0.5, 0.0, 0.5]).unwrap();
    let queries = Coordinates::new(1, vec![0.0]).unwrap();
    let geom = InterpGeometry::new(&queries, &parent, cfg.offset_scale).unwrap();
    let frames = random_tensor(2 * 3, 1, 4);
    let z = random_tensor(3, cfg.latent_dim, 5);
    let times = [0.1, 0.2];
    let out = interp_values(&cfg, &params, &frames, &z, &geom, &times);
    for (k, &t) in times.iter().enumerate() {
        let expected = g_term(&cfg, &params, frames.row(k * 3 + 1), z.row(1), &[0.0], t);
        assert_eq!(out.row(k), expected.as_slice());
    }
}

#[test]
fn interpolation_is_convex_in_the_g_terms() {
    let cfg = small(1, 1, 1);
    let params = init_params(&cfg, &mut seed::rng(11)).unwrap();
    let parent = Coordinates::new(1, vec![-0.5, 0.5]).unwrap();
    let queries = Coordinates::new(1, vec![0.0]).unwrap();
    // Identical inputs at both neighbors except the offset sign; drop the
    // offset dependence by zeroing its input weights.
    let mut p = params.clone();
    let w0 = p.get_mut("g.w0").unwrap();
    let cols = w0.shape()[1];
    let off_row = cfg.channels + cfg.latent_dim;
    w0.data_mut()[off_row * cols..(off_row + 1) * cols].iter_mut().for_each(|v| *v = 0.0);
    let geom = InterpGeometry::new(&queries, &parent, cfg.offset_scale).unwrap();
    assert_eq!(geom.weights, vec![0.5, 0.5]);
    let frames = Tensor::new(vec![2, 1], vec![0.3, 0.3]).unwrap();
    let z = Tensor::from_fn(&[2, cfg.latent_dim], |i| ((i % cfg.latent_dim) as f32 * 0.1).sin());
    let out = interp_values(&cfg, &p, &frames, &z, &geom, &[0.5]);
    let v = g_term(&cfg, &p, &[0.3], z.row(0), &[0.0], 0.5);
    for (a, b) in out.data().iter().zip(&v) {
        assert!((a - b).abs() < 1e-6);
    }

    // Degenerate weights {1, 0}: the second neighbor is irrelevant.
    let mut nw = neighbor_weights(&queries, &parent).unwrap();
    nw.weights = vec![1.0, 0.0];
    let geom = InterpGeometry::from_weights(&nw, &queries, &parent, cfg.offset_scale).unwrap();
    let frames2 = Tensor::new(vec![2, 1], vec![0.3, -7.0]).unwrap();
    let first = nw.indices[0];
    let off = ((0.0 - parent.point(first)[0]) as f32) * cfg.offset_scale;
    let out = interp_values(&cfg, &params, &frames2, &z, &geom, &[0.5]);
    let expected = g_term(&cfg, &params, frames2.row(first), z.row(first), &[off], 0.5);
    assert_eq!(out.data(), expected.as_slice());
}

#[test]
fn interpolation_rejects_foreign_weights() {
    let parent = Coordinates::new(1, vec![-0.5, 0.5]).unwrap();
    let queries = Coordinates::new(1, vec![0.1]).unwrap();
    let mut nw = neighbor_weights(&queries, &parent).unwrap();
    nw.indices[1] = 7;
    assert!(matches!(
        InterpGeometry::from_weights(&nw, &queries, &parent, 1.0),
        Err(MagnetError::Mismatch(_))
    ));
}

#[test]
fn interpolation_output_shape_and_2d_stencil() {
    let cfg = small(2, 2, 3);
    let params = init_params(&cfg, &mut seed::rng(3)).unwrap();
    let parent = random_coords(2, 20, 1);
    let queries = random_coords(2, 7, 2);
    let geom = InterpGeometry::new(&queries, &parent, cfg.offset_scale).unwrap();
    assert_eq!(geom.k, 4);
    let out = interp_values(&cfg, &params, &random_tensor(60, 2, 3), &random_tensor(20, 8, 4), &geom, &[0.0, 0.1, 0.2]);
    assert_eq!(out.shape(), &[21, 8]);
    for q in 0..7 {
        let (_, w) = nearest_parents(queries.point(q), &parent).unwrap();
        let s: f64 = w.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

#[test]
fn decoder_shapes_and_affine_degenerate_case() {
    let cfg = small(1, 3, 2);
    let mut params = init_params(&cfg, &mut seed::rng(2)).unwrap();
    for name in ["d.w0", "d.w1"] {
        params.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    params.get_mut("d.b1").unwrap().data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
    let mut tape = Tape::new();
    let latent = tape.leaf(random_tensor(2 * 5, cfg.latent_dim, 1)).unwrap();
    let out = decode_state(&mut tape, &cfg, &params, latent).unwrap();
    let v = tape.value(out);
    assert_eq!(v.shape(), &[10, 3]);
    for r in 0..10 {
        assert_eq!(v.row(r), &[0.5, -1.0, 2.0]);
    }
}

#[test]
fn forecast_graph_counts_and_pass_through_history() {
    let cfg = small(1, 1, 2);
    let parent = Coordinates::new(1, vec![-0.8, 0.0, 0.8]).unwrap();
    let queries = Coordinates::new(1, vec![-0.4, 0.4]).unwrap();
    let fg = build_forecast_graph(&cfg, &parent, &queries).unwrap();
    assert_eq!(fg.num_nodes(), 5);
    let parent_frames = random_tensor(6, 1, 1);
    let query_vals = random_tensor(4, 1, 2);
    let mut tape = Tape::new();
    let p = tape.leaf(parent_frames.clone()).unwrap();
    let q = tape.leaf(query_vals.clone()).unwrap();
    let hist = merge_history(&mut tape, p, Some(q), 2, 3, 2).unwrap();
    for (k, v) in hist.iter().enumerate() {
        let f = tape.value(*v);
        assert_eq!(&f.data()[..3], &parent_frames.data()[k * 3..k * 3 + 3]);
        assert_eq!(&f.data()[3..], &query_vals.data()[k * 2..k * 2 + 2]);
    }
    let bad = tape.leaf(random_tensor(3, 1, 3)).unwrap();
    assert!(merge_history(&mut tape, p, Some(bad), 2, 3, 2).is_err());

    let alone = build_forecast_graph(&cfg, &parent, &Coordinates::empty(1)).unwrap();
    assert_eq!(alone.num_nodes(), 3);
}

fn step_values(cfg: &ModelConfig, params: &ParamStore, fg: &ForecastGraph, window: &[Tensor], dt: f32) -> Tensor {
    let mut tape = Tape::new();
    let vars: Vec<Var> = window.iter().map(|w| tape.leaf(w.clone()).unwrap()).collect();
    let coords = tape.leaf(fg.coord_feats.clone()).unwrap();
    let edges = encode_forecast_edges(&mut tape, cfg, params, fg).unwrap();
    let next = forecast_step(&mut tape, cfg, params, fg, edges, &vars, coords, dt).unwrap();
    tape.value(next).clone()
}

#[test]
fn euler_identity_and_zero_init_persistence() {
    let cfg = small(1, 2, 3);
    let mut params = init_params(&cfg, &mut seed::rng(4)).unwrap();
    let nodes = random_coords(1, 12, 5);
    let fg = build_forecast_graph(&cfg, &nodes, &Coordinates::empty(1)).unwrap();
    let window: Vec<Tensor> = (0..3).map(|k| random_tensor(12, 2, 10 + k)).collect();
    assert_eq!(step_values(&cfg, &params, &fg, &window, 0.1), window[2]);
    randomize(&mut params, "fc.dec.w1", 6);
    let moved = step_values(&cfg, &params, &fg, &window, 0.1);
    assert_ne!(moved, window[2]);
    assert_eq!(step_values(&cfg, &params, &fg, &window, 0.0), window[2]);
}

#[test]
fn forecast_step_is_permutation_equivariant() {
    let cfg = small(2, 1, 2);
    let mut params = init_params(&cfg, &mut seed::rng(4)).unwrap();
    randomize(&mut params, "fc.dec.w1", 5);
    let n = 25;
    let nodes = random_coords(2, n, 6);
    let window: Vec<Tensor> = (0..2).map(|k| random_tensor(n, 1, 20 + k)).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut seed::rng(7));
    let mut inv = vec![0; n];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    let fg = build_forecast_graph(&cfg, &nodes, &Coordinates::empty(2)).unwrap();
    let fgp = build_forecast_graph(&cfg, &nodes.select(&inv).unwrap(), &Coordinates::empty(2)).unwrap();
    let a = step_values(&cfg, &params, &fg, &window, 0.05);
    let wp: Vec<Tensor> = window.iter().map(|w| permute_rows(w, &perm, n)).collect();
    let b = step_values(&cfg, &params, &fgp, &wp, 0.05);
    assert_eq!(permute_rows(&a, &perm, n), b);
}

fn rollout_case(cfg: &ModelConfig, n: usize, m: usize, horizon: usize) -> (RolloutGeometry, Tensor, Vec<f32>, usize) {
    let all = random_coords(cfg.dim, n + m, 42);
    let parent = all.select(&(0..n).collect::<Vec<_>>()).unwrap();
    let queries = all.select(&(n..n + m).collect::<Vec<_>>()).unwrap();
    let geom = RolloutGeometry::new(cfg, &parent, &queries).unwrap();
    let frames = random_tensor(cfg.history * n, cfg.channels, 43);
    let times = (0..cfg.history).map(|k| k as f32 / 10.0).collect();
    (geom, frames, times, horizon)
}

#[test]
fn rollout_shapes() {
    let cfg = small(1, 1, 3);
    let params = init_params(&cfg, &mut seed::rng(1)).unwrap();
    let (geom, frames, times, _) = rollout_case(&cfg, 8, 4, 0);
    let inputs = RolloutInputs { frames: &frames, times: &times, dt: 0.1, horizon: 0, query_values: None };
    let out = rollout(&cfg, &params, &geom, &inputs).unwrap();
    assert_eq!(out.interp.as_ref().unwrap().shape(), &[12, 1]);
    assert!(out.forecast.is_empty());

    let (geom, frames, times, _) = rollout_case(&cfg, 8, 0, 1);
    let inputs = RolloutInputs { frames: &frames, times: &times, dt: 0.1, horizon: 1, query_values: None };
    let out = rollout(&cfg, &params, &geom, &inputs).unwrap();
    assert!(out.interp.is_none());
    assert_eq!(out.forecast.len(), 1);
    assert_eq!(out.forecast[0].shape(), &[8, 1]);
}

#[test]
fn long_rollout_shape() {
    let mut cfg = small(1, 1, 25);
    cfg.forecaster_steps = 1;
    let mut params = init_params(&cfg, &mut seed::rng(1)).unwrap();
    randomize(&mut params, "fc.dec.w1", 2);
    for v in params.get_mut("fc.dec.w1").unwrap().data_mut() {
        *v *= 0.01;
    }
    let (geom, frames, times, _) = rollout_case(&cfg, 50, 10, 225);
    let inputs = RolloutInputs { frames: &frames, times: &times, dt: 0.016, horizon: 225, query_values: None };
    let out = rollout(&cfg, &params, &geom, &inputs).unwrap();
    assert_eq!(out.forecast.len(), 225);
    assert!(out.forecast.iter().all(|f| f.shape() == [60, 1]));
}

#[test]
fn zero_initialized_forecaster_is_persistence() {
    let cfg = small(2, 2, 3);
    let params = init_params(&cfg, &mut seed::rng(9)).unwrap();
    let (geom, frames, times, _) = rollout_case(&cfg, 15, 5, 4);
    let inputs = RolloutInputs { frames: &frames, times: &times, dt: 0.1, horizon: 4, query_values: None };
    let out = rollout(&cfg, &params, &geom, &inputs).unwrap();
    let interp = out.interp.unwrap();
    let mut last: Vec<f32> = frames.data()[2 * 15 * 2..].to_vec();
    last.extend_from_slice(&interp.data()[2 * 5 * 2..]);
    for f in &out.forecast {
        assert_eq!(f.data(), last.as_slice());
    }
}

#[test]
fn tape_and_inference_rollouts_agree() {
    let cfg = small(1, 1, 3);
    let mut params = init_params(&cfg, &mut seed::rng(9)).unwrap();
    randomize(&mut params, "fc.dec.w1", 3);
    let (geom, frames, times, _) = rollout_case(&cfg, 10, 6, 5);
    let inputs = RolloutInputs { frames: &frames, times: &times, dt: 0.1, horizon: 5, query_values: None };
    let out = rollout(&cfg, &params, &geom, &inputs).unwrap();
    let mut tape = Tape::new();
    let tr = rollout_tape(&mut tape, &cfg, &params, &geom, &inputs).unwrap();
    assert_eq!(tape.value(tr.interp.unwrap()), out.interp.as_ref().unwrap());
    for (v, t) in tr.forecast.iter().zip(&out.forecast) {
        assert_eq!(tape.value(*v), t);
    }
}

#[test]
fn supplied_query_values_bypass_learned_interpolation() {
    let cfg = small(1, 1, 2);
    let params = init_params(&cfg, &mut seed::rng(9)).unwrap();
    let (geom, frames, times, _) = rollout_case(&cfg, 10, 4, 1);
    let q = random_tensor(8, 1, 77);
    let inputs = RolloutInputs { frames: &frames, times: &times, dt: 0.1, horizon: 1, query_values: Some(&q) };
    let out = rollout(&cfg, &params, &geom, &inputs).unwrap();
    assert_eq!(out.interp.as_ref(), Some(&q));
    assert_eq!(&out.forecast[0].data()[10..], &q.data()[4..]);
}

#[test]
fn save_and_load_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(1, 1, 4);
    let params = init_params(&cfg, &mut seed::rng(1)).unwrap();
    save_model(dir.path(), &cfg, &params).unwrap();
    let (c2, p2) = load_model(dir.path()).unwrap();
    assert_eq!(c2, cfg);
    assert_eq!(p2, params);

    let mut other = cfg.clone();
    other.latent_dim = 16;
    std::fs::write(dir.path().join("model.json"), serde_json::to_string(&other).unwrap()).unwrap();
    assert!(matches!(load_model(dir.path()), Err(MagnetError::Mismatch(_))));
}

#[test]
fn unshared_message_passing_has_per_step_weights() {
    let mut cfg = small(1, 1, 2);
    cfg.share_mp_params = false;
    let params = init_params(&cfg, &mut seed::rng(1)).unwrap();
    assert!(params.contains("enc.mp0.edge.w0") && params.contains("enc.mp1.node.w0"));
    assert!(params.contains("fc.mp1.edge.w0") && !params.contains("fc.mp.edge.w0"));
    let (geom, frames, times, _) = rollout_case(&cfg, 10, 3, 2);
    let inputs = RolloutInputs { frames: &frames, times: &times, dt: 0.1, horizon: 2, query_values: None };
    assert!(rollout(&cfg, &params, &geom, &inputs).is_ok());
}

#[test]
fn graph_inputs_from_explicit_edges() {
    let coords = Coordinates::new(1, vec![-0.5, 0.0, 0.5]).unwrap();
    let g = NeighborGraph { num_nodes: 3, k: 1, src: vec![1, 0, 1], dst: vec![0, 1, 2] };
    let gi = GraphInputs::from_graph(&coords, &g, 2.0).unwrap();
    assert_eq!(&*gi.src, &[1, 0, 1]);
    let e = edge_features(&coords, &g, 2.0).unwrap();
    assert_eq!(e.row(0), &[1.0, 1.0]);
    assert_eq!(e.row(1), &[-1.0, 1.0]);
    let _: Arc<[usize]> = gi.dst.clone();
}
