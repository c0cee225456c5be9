//! Residual convolutional encoder for regular periodic grids (1D or 2D),
//! built from row gathers so it runs on the autodiff tape.

use std::sync::Arc;

use rand::Rng;
use tensorcore::{ParamStore, Tape, Tensor, Var};

use super::ModelConfig;
use crate::error::{MagnetError, Result};

/// Row gathers for each tap of a 3 (1D) or 3x3 (2D) periodic stencil.
pub(crate) fn conv_taps(shape: &[usize]) -> Vec<Arc<[usize]>> {
    match *shape {
        [n] => (-1i64..=1)
            .map(|s| {
                (0..n as i64)
                    .map(|i| (i + s).rem_euclid(n as i64) as usize)
                    .collect()
            })
            .collect(),
        [nx, ny] => {
            let mut taps = Vec::new();
            for sy in -1i64..=1 {
                for sx in -1i64..=1 {
                    let idx: Arc<[usize]> = (0..ny as i64)
                        .flat_map(|iy| {
                            (0..nx as i64).map(move |ix| {
                                let x = (ix + sx).rem_euclid(nx as i64);
                                let y = (iy + sy).rem_euclid(ny as i64);
                                (y * nx as i64 + x) as usize
                            })
                        })
                        .collect();
                    taps.push(idx);
                }
            }
            taps
        }
        _ => Vec::new(),
    }
}

fn init_conv<R: Rng>(name: &str, taps: usize, cin: usize, cout: usize, rng: &mut R, store: &mut ParamStore) {
    let fan_in = taps * cin;
    let bound = (6.0 / fan_in as f32).sqrt();
    store.insert(
        format!("{name}.w"),
        Tensor::from_fn(&[fan_in, cout], |_| rng.gen_range(-bound..bound)),
    );
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

pub(crate) fn init_cnn<R: Rng>(cfg: &ModelConfig, rng: &mut R, store: &mut ParamStore) -> Result<()> {
    let taps = cfg.conv_taps();
    let h = cfg.encoder_hidden;
    init_conv("enc.head", taps, cfg.history * cfg.channels, h, rng, store);
    for b in 0..cfg.encoder_blocks {
        init_conv(&format!("enc.block{b}.conv1"), taps, h, h, rng, store);
        init_conv(&format!("enc.block{b}.conv2"), taps, h, h, rng, store);
    }
    init_conv("enc.body", taps, h, h, rng, store);
    init_conv("enc.tail", 1, h, cfg.latent_dim, rng, store);
    Ok(())
}

fn conv(tape: &mut Tape, params: &ParamStore, name: &str, x: Var, taps: &[Arc<[usize]>]) -> Result<Var> {
    let cols = taps
        .iter()
        .map(|idx| tape.gather(x, idx.clone()))
        .collect::<tensorcore::Result<Vec<_>>>()?;
    let stacked = tape.concat(&cols, 1)?;
    let w = tape.param(params, &format!("{name}.w"))?;
    let b = tape.param(params, &format!("{name}.b"))?;
    let y = tape.matmul(stacked, w)?;
    Ok(tape.add_row(y, b)?)
}

/// CNN encoder. `frames` is `[T*N, C]` time-major on a grid of `shape`.
pub fn encode_cnn(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &ParamStore,
    frames: Var,
    shape: &[usize],
) -> Result<Var> {
    let n: usize = shape.iter().product();
    if shape.len() != cfg.dim || n == 0 {
        return Err(MagnetError::IrregularMesh(format!(
            "grid shape {shape:?} for a {}-D model",
            cfg.dim
        )));
    }
    let taps = conv_taps(shape);
    let x = super::gnn::frames_by_node(tape, frames, cfg.history, n)?;
    let head = conv(tape, params, "enc.head", x, &taps)?;
    let mut h = head;
    for b in 0..cfg.encoder_blocks {
        let c1 = conv(tape, params, &format!("enc.block{b}.conv1"), h, &taps)?;
        let a = tape.relu(c1)?;
        let c2 = conv(tape, params, &format!("enc.block{b}.conv2"), a, &taps)?;
        h = tape.add(h, c2)?;
    }
    let body = conv(tape, params, "enc.body", h, &taps)?;
    let skip = tape.add(body, head)?;
    let identity: Vec<Arc<[usize]>> = vec![(0..n).collect()];
    conv(tape, params, "enc.tail", skip, &identity)
}
