use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::params::ParamSet;
use crate::numkernel::tape::{NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

/// Layer widths (including the input width) plus per-layer activations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Contract("MLP needs at least one layer".into()));
        }
        if widths.contains(&0) {
            return Err(Error::Contract("MLP widths must be positive".into()));
        }
        if activations.len() != widths.len() - 1 {
            return Err(Error::Contract(format!(
                "{} layers but {} activations",
                widths.len() - 1,
                activations.len()
            )));
        }
        Ok(MlpSpec {
            widths,
            activations,
        })
    }

    /// Depth-layer net: relu on hidden layers, identity on the output.
    pub fn with_hidden(input: usize, hidden: usize, output: usize, depth: usize) -> Result<Self> {
        assert!(depth >= 1);
        let mut widths = vec![input];
        let mut acts = Vec::new();
        for _ in 0..depth - 1 {
            widths.push(hidden);
            acts.push(Activation::Relu);
        }
        widths.push(output);
        acts.push(Activation::Identity);
        MlpSpec::new(widths, acts)
    }

    /// Single affine layer.
    pub fn linear(input: usize, output: usize) -> Result<Self> {
        MlpSpec::new(vec![input, output], vec![Activation::Identity])
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }
}

/// Register weight/bias blocks `<prefix>.w{l}` / `<prefix>.b{l}`.
/// Weights draw from normal(0, scale / sqrt(fan_in)); biases start at zero.
pub fn register_mlp<R: Rng>(
    params: &mut ParamSet,
    prefix: &str,
    spec: &MlpSpec,
    scale: f64,
    rng: &mut R,
) -> Result<()> {
    for l in 0..spec.layers() {
        let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
        let std = scale / (fan_in as f64).sqrt();
        params.register_normal(&format!("{prefix}.w{l}"), &[fan_in, fan_out], std, rng)?;
        params.register(
            &format!("{prefix}.b{l}"),
            crate::numkernel::tensor::Tensor::zeros(&[fan_out]),
        )?;
    }
    Ok(())
}

fn apply_activation(tape: &mut Tape, act: Activation, x: NodeId) -> NodeId {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Tanh => tape.tanh(x),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Identity => x,
    }
}

/// Forward an input (vector [d] or matrix [n, d]) through the MLP registered
/// under `prefix`, recording the trace on the tape.
pub fn forward_mlp(
    tape: &mut Tape,
    params: &ParamSet,
    prefix: &str,
    spec: &MlpSpec,
    input: NodeId,
) -> Result<NodeId> {
    let in_dim = *tape.shape(input).last().ok_or_else(|| {
        Error::Contract("MLP input must have at least one dimension".into())
    })?;
    if in_dim != spec.input_width() {
        return Err(Error::ShapeMismatch {
            op: "forward_mlp",
            lhs: tape.shape(input).to_vec(),
            rhs: vec![spec.input_width()],
        });
    }
    let mut x = input;
    for l in 0..spec.layers() {
        let w = tape.param_by_name(params, &format!("{prefix}.w{l}"))?;
        let b = tape.param_by_name(params, &format!("{prefix}.b{l}"))?;
        let z = tape.matmul(x, w)?;
        let z = tape.add(z, b)?;
        x = apply_activation(tape, spec.activations[l], z);
    }
    Ok(x)
}
