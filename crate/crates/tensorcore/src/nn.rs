//! Multi-layer perceptrons built from tape primitives.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// Shape of an MLP: `layer_count` linear layers, activations between them,
/// optional layer normalization (with affine gain and bias) on the output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_count: usize,
    pub hidden_width: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub layernorm_after: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// Uniform in `±sqrt(6 / fan_in)` for every layer.
    KaimingUniform,
    /// Kaiming-uniform hidden layers, all-zero final layer.
    ZeroLast,
}

impl MlpSpec {
    pub fn new(layer_count: usize, hidden_width: usize, in_dim: usize, out_dim: usize) -> Self {
        Self {
            layer_count,
            hidden_width,
            in_dim,
            out_dim,
            activation: Activation::Relu,
            layernorm_after: false,
        }
    }

    pub fn with_layernorm(mut self) -> Self {
        self.layernorm_after = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_count == 0 || self.hidden_width == 0 || self.in_dim == 0 || self.out_dim == 0
        {
            return Err(TensorError::Invalid(format!("degenerate MLP spec {self:?}")));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each linear layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.layer_count)
            .map(|i| {
                let fan_in = if i == 0 { self.in_dim } else { self.hidden_width };
                let fan_out = if i + 1 == self.layer_count {
                    self.out_dim
                } else {
                    self.hidden_width
                };
                (fan_in, fan_out)
            })
            .collect()
    }
}

/// Inserts freshly initialized parameters `{prefix}.w{i}`, `{prefix}.b{i}`
/// (and `{prefix}.ln_gain` / `{prefix}.ln_bias`) into `store`.
pub fn init_mlp<R: Rng>(
    spec: &MlpSpec,
    prefix: &str,
    scheme: InitScheme,
    rng: &mut R,
    store: &mut ParamStore,
) -> Result<()> {
    spec.validate()?;
    let dims = spec.layer_dims();
    for (i, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let last = i + 1 == dims.len();
        let w = if last && scheme == InitScheme::ZeroLast {
            Tensor::zeros(&[fan_in, fan_out])
        } else {
            let bound = (6.0 / fan_in as f32).sqrt();
            Tensor::from_fn(&[fan_in, fan_out], |_| rng.gen_range(-bound..bound))
        };
        store.insert(format!("{prefix}.w{i}"), w);
        store.insert(format!("{prefix}.b{i}"), Tensor::zeros(&[fan_out]));
    }
    if spec.layernorm_after {
        store.insert(format!("{prefix}.ln_gain"), Tensor::ones(&[spec.out_dim]));
        store.insert(format!("{prefix}.ln_bias"), Tensor::zeros(&[spec.out_dim]));
    }
    Ok(())
}

/// Layer normalization followed by a learned per-feature gain and bias.
pub fn layer_norm_affine(
    tape: &mut Tape,
    params: &ParamStore,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let normed = tape.layer_norm(x)?;
    let gain = tape.param(params, &format!("{prefix}.ln_gain"))?;
    let bias = tape.param(params, &format!("{prefix}.ln_bias"))?;
    let scaled = tape.mul_row(normed, gain)?;
    tape.add_row(scaled, bias)
}

/// Applies the MLP to a `[batch, in_dim]` input.
pub fn mlp_forward(
    tape: &mut Tape,
    spec: &MlpSpec,
    params: &ParamStore,
    prefix: &str,
    input: Var,
) -> Result<Var> {
    let (_, cols) = tape.value(input).dims2("mlp_forward")?;
    if cols != spec.in_dim {
        return Err(TensorError::ShapeMismatch {
            op: "mlp_forward",
            lhs: vec![spec.in_dim],
            rhs: vec![cols],
        });
    }
    let mut h = input;
    for i in 0..spec.layer_count {
        let w = tape.param(params, &format!("{prefix}.w{i}"))?;
        let b = tape.param(params, &format!("{prefix}.b{i}"))?;
        let lin = tape.matmul(h, w)?;
        h = tape.add_row(lin, b)?;
        if i + 1 < spec.layer_count && spec.activation == Activation::Relu {
            h = tape.relu(h)?;
        }
    }
    if spec.layernorm_after {
        h = layer_norm_affine(tape, params, prefix, h)?;
    }
    Ok(h)
}
