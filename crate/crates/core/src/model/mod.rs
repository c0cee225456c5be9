//! The MAgNet model: an encoder over the parent mesh, a learned interpolator
//! `g` with decoder `d` for spatial queries, and a graph forecaster `Delta`
//! stepping all nodes forward with an explicit Euler update.

mod cnn;
mod forecast;
mod gnn;
mod interp;
mod rollout;

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use tensorcore::{init_mlp, load_checkpoint, save_checkpoint, InitScheme, MlpSpec, ParamStore};

use crate::error::{MagnetError, Result};

pub use cnn::encode_cnn;
pub use forecast::{
    build_forecast_graph, encode_forecast_edges, forecast_step, merge_history, window_features,
    ForecastGraph,
};
pub use gnn::{edge_features, encode_gnn, GraphInputs};
pub use interp::{decode_state, interpolate_features, InterpGeometry};
pub use rollout::{
    encode, rollout, rollout_tape, EncoderGeometry, RolloutGeometry, RolloutInputs,
    RolloutOutput, TapeRollout,
};

pub type ModelParams = ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Cnn,
    Gnn,
}

impl std::str::FromStr for Variant {
    type Err = MagnetError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cnn" => Ok(Variant::Cnn),
            "gnn" => Ok(Variant::Gnn),
            other => Err(MagnetError::Invalid(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Spatial dimension n.
    pub dim: usize,
    pub channels: usize,
    /// History length T.
    pub history: usize,
    /// Linear layers per MLP.
    pub mlp_layers: usize,
    /// Width of the embedding z.
    pub latent_dim: usize,
    pub encoder_hidden: usize,
    /// Message-passing steps of the GNN encoder.
    pub encoder_steps: usize,
    /// Residual blocks of the CNN encoder.
    pub encoder_blocks: usize,
    pub interp_hidden: usize,
    pub decoder_hidden: usize,
    pub forecaster_hidden: usize,
    pub forecaster_latent: usize,
    pub forecaster_steps: usize,
    pub forecaster_decoder_hidden: usize,
    /// Incoming edges per node of the nearest-neighbor graphs.
    pub k_graph: usize,
    /// Add reverse edges to the nearest-neighbor graphs.
    pub symmetric_graph: bool,
    /// Reuse one set of message-passing weights across steps.
    pub share_mp_params: bool,
    /// Multiplier on normalized coordinate offsets fed to edges and `g`.
    pub offset_scale: f32,
    /// Multiplier on frame differences in the forecaster node features.
    pub diff_scale: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::gnn(1, 1, 25)
    }
}

impl ModelConfig {
    /// GNN variant with the reference dimensions.
    pub fn gnn(dim: usize, channels: usize, history: usize) -> Self {
        Self {
            variant: Variant::Gnn,
            dim,
            channels,
            history,
            mlp_layers: 4,
            latent_dim: 128,
            encoder_hidden: 128,
            encoder_steps: 5,
            encoder_blocks: 4,
            interp_hidden: 128,
            decoder_hidden: 128,
            forecaster_hidden: 64,
            forecaster_latent: 128,
            forecaster_steps: 5,
            forecaster_decoder_hidden: 128,
            k_graph: if dim == 1 { 4 } else { 8 },
            symmetric_graph: false,
            share_mp_params: true,
            offset_scale: 16.0,
            diff_scale: 10.0,
        }
    }

    /// CNN variant with the reference dimensions.
    pub fn cnn(dim: usize, channels: usize, history: usize) -> Self {
        Self {
            variant: Variant::Cnn,
            interp_hidden: 64,
            decoder_hidden: 64,
            forecaster_latent: 32,
            forecaster_decoder_hidden: 64,
            ..Self::gnn(dim, channels, history)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.mlp_layers,
            self.latent_dim,
            self.encoder_hidden,
            self.interp_hidden,
            self.decoder_hidden,
            self.forecaster_hidden,
            self.forecaster_latent,
            self.forecaster_decoder_hidden,
            self.channels,
            self.history,
            self.forecaster_steps,
            self.k_graph,
        ];
        if widths.iter().any(|&w| w == 0) {
            return Err(MagnetError::Invalid(format!("zero-sized model setting in {self:?}")));
        }
        if !(1..=2).contains(&self.dim) {
            return Err(MagnetError::Invalid(format!("spatial dimension {}", self.dim)));
        }
        match self.variant {
            Variant::Gnn if self.encoder_steps == 0 => {
                Err(MagnetError::Invalid("GNN encoder needs at least one step".into()))
            }
            Variant::Cnn if self.encoder_blocks == 0 => {
                Err(MagnetError::Invalid("CNN encoder needs at least one block".into()))
            }
            _ => Ok(()),
        }
    }

    /// 2^n interpolation neighbors.
    pub fn num_neighbors(&self) -> usize {
        1 << self.dim
    }

    pub(crate) fn mlp(&self, hidden: usize, in_dim: usize, out_dim: usize) -> MlpSpec {
        MlpSpec::new(self.mlp_layers, hidden, in_dim, out_dim)
    }

    /// Encoder node input: the T frames side by side, then coordinates.
    pub(crate) fn encoder_in(&self) -> usize {
        self.history * self.channels + self.dim
    }

    pub(crate) fn edge_in(&self) -> usize {
        self.dim + 1
    }

    pub(crate) fn interp_in(&self) -> usize {
        self.channels + self.latent_dim + self.dim + 1
    }

    pub(crate) fn forecaster_in(&self) -> usize {
        self.history * self.channels + self.dim
    }

    fn conv_taps(&self) -> usize {
        3usize.pow(self.dim as u32)
    }
}

pub(crate) fn mp_prefix(prefix: &str, step: usize, shared: bool) -> String {
    if shared {
        format!("{prefix}.mp")
    } else {
        format!("{prefix}.mp{step}")
    }
}

/// Processor MLPs of a GNS block with `d`-wide latents.
fn init_processor<R: Rng>(
    cfg: &ModelConfig,
    prefix: &str,
    hidden: usize,
    d: usize,
    steps: usize,
    rng: &mut R,
    store: &mut ParamStore,
) -> Result<()> {
    let count = if cfg.share_mp_params { 1 } else { steps };
    for s in 0..count {
        let p = mp_prefix(prefix, s, cfg.share_mp_params);
        let edge = cfg.mlp(hidden, 3 * d, d).with_layernorm();
        let node = cfg.mlp(hidden, 2 * d, d).with_layernorm();
        init_mlp(&edge, &format!("{p}.edge"), InitScheme::KaimingUniform, rng, store)?;
        init_mlp(&node, &format!("{p}.node"), InitScheme::KaimingUniform, rng, store)?;
    }
    Ok(())
}

/// Fresh parameters for every sub-network; the forecaster's output layer
/// starts at zero so an untrained model forecasts persistence.
pub fn init_params<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<ModelParams> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let d = cfg.latent_dim;
    match cfg.variant {
        Variant::Gnn => {
            let h = cfg.encoder_hidden;
            init_mlp(
                &cfg.mlp(h, cfg.encoder_in(), d).with_layernorm(),
                "enc.node",
                InitScheme::KaimingUniform,
                rng,
                &mut store,
            )?;
            init_mlp(
                &cfg.mlp(h, cfg.edge_in(), d).with_layernorm(),
                "enc.edge",
                InitScheme::KaimingUniform,
                rng,
                &mut store,
            )?;
            init_processor(cfg, "enc", h, d, cfg.encoder_steps, rng, &mut store)?;
        }
        Variant::Cnn => cnn::init_cnn(cfg, rng, &mut store)?,
    }
    init_mlp(
        &cfg.mlp(cfg.interp_hidden, cfg.interp_in(), d).with_layernorm(),
        "g",
        InitScheme::KaimingUniform,
        rng,
        &mut store,
    )?;
    init_mlp(
        &cfg.mlp(cfg.decoder_hidden, d, cfg.channels),
        "d",
        InitScheme::KaimingUniform,
        rng,
        &mut store,
    )?;
    let fd = cfg.forecaster_latent;
    let fh = cfg.forecaster_hidden;
    init_mlp(
        &cfg.mlp(fh, cfg.forecaster_in(), fd).with_layernorm(),
        "fc.node",
        InitScheme::KaimingUniform,
        rng,
        &mut store,
    )?;
    init_mlp(
        &cfg.mlp(fh, cfg.edge_in(), fd).with_layernorm(),
        "fc.edge",
        InitScheme::KaimingUniform,
        rng,
        &mut store,
    )?;
    init_processor(cfg, "fc", fh, fd, cfg.forecaster_steps, rng, &mut store)?;
    init_mlp(
        &cfg.mlp(cfg.forecaster_decoder_hidden, fd, cfg.channels),
        "fc.dec",
        InitScheme::ZeroLast,
        rng,
        &mut store,
    )?;
    Ok(store)
}

/// Parameter groups (name prefixes) for gradient coverage checks.
pub fn param_groups(cfg: &ModelConfig) -> Vec<&'static str> {
    let _ = cfg;
    vec!["enc.", "g.", "d.", "fc.node", "fc.edge", "fc.mp", "fc.dec"]
}

/// Writes `params.json` + `params.bin` and the `model.json` config sidecar.
pub fn save_model(dir: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    save_checkpoint(params, dir, "params")?;
    fs::write(dir.join("model.json"), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<(ModelConfig, ModelParams)> {
    let cfg: ModelConfig = serde_json::from_str(&fs::read_to_string(dir.join("model.json"))?)?;
    cfg.validate()?;
    let params = load_checkpoint(dir, "params")?;
    let mut rng = crate::seed::rng(0);
    let reference = init_params(&cfg, &mut rng)?;
    for (name, t) in reference.iter() {
        let got = params.get(name).map_err(|_| {
            MagnetError::Mismatch(format!("checkpoint lacks parameter {name}"))
        })?;
        if got.shape() != t.shape() {
            return Err(MagnetError::Mismatch(format!(
                "parameter {name} has shape {:?}, config implies {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    Ok((cfg, params))
}
