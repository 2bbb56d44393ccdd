//! Preference-conditioned rating decoder: per-layer feature-wise affine
//! modulation derived from the fused preference vector, applied between the
//! hidden layers of a ReLU stack, with an unmodulated affine head.

use crate::data::Interaction;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numkernel::{forward_mlp, MlpSpec, NodeId, Tape};

/// Per-layer (scale, shift) vectors, each in (-1, 1) via tanh heads.
pub fn film_params(tape: &mut Tape, model: &Model, h: NodeId) -> Result<Vec<(NodeId, NodeId)>> {
    let spec = MlpSpec::linear(model.config.d3, model.config.hidden)?;
    let mut out = Vec::with_capacity(model.config.decoder_layers);
    for l in 0..model.config.decoder_layers {
        let eta_pre = forward_mlp(tape, &model.params, &format!("film.eta{l}"), &spec, h)?;
        let delta_pre = forward_mlp(tape, &model.params, &format!("film.delta{l}"), &spec, h)?;
        out.push((tape.tanh(eta_pre), tape.tanh(delta_pre)));
    }
    Ok(out)
}

/// Stack [u || v || z] decoder inputs for the query items of one user.
pub fn decoder_inputs(
    tape: &mut Tape,
    model: &Model,
    user_id: &str,
    queries: &[Interaction],
    z: NodeId,
) -> Result<NodeId> {
    if queries.is_empty() {
        return Err(Error::Contract("decoder needs at least one query item".into()));
    }
    if tape.values(z).len() != model.config.d2 {
        return Err(Error::ShapeMismatch {
            op: "decoder_inputs",
            lhs: tape.shape(z).to_vec(),
            rhs: vec![model.config.d2],
        });
    }
    let user_table = tape.param_by_name(&model.params, "emb.user")?;
    let item_table = tape.param_by_name(&model.params, "emb.item_tgt")?;
    let u_idx = model.id_maps.user_index(user_id)?;
    let u = tape.select_row(user_table, u_idx)?;
    let mut rows = Vec::with_capacity(queries.len());
    for q in queries {
        let v_idx = model.id_maps.item_index(&q.item_id, false)?;
        let v = tape.select_row(item_table, v_idx)?;
        rows.push(tape.concat_vec(&[u, v, z])?);
    }
    tape.stack_rows(&rows)
}

/// Run the modulated stack over an [n, 2*d1+d2] input matrix. `film = None`
/// skips modulation (scale one, shift zero), which is the ablated decoder.
pub fn decode(
    tape: &mut Tape,
    model: &Model,
    inputs: NodeId,
    film: Option<&[(NodeId, NodeId)]>,
) -> Result<NodeId> {
    if let Some(f) = film {
        if f.len() != model.config.decoder_layers {
            return Err(Error::Contract(format!(
                "{} modulation pairs for {} decoder layers",
                f.len(),
                model.config.decoder_layers
            )));
        }
    }
    let mut x = inputs;
    for l in 0..model.config.decoder_layers {
        let fan_in = if l == 0 {
            model.config.decoder_input_width()
        } else {
            model.config.hidden
        };
        let spec = MlpSpec::linear(fan_in, model.config.hidden)?;
        let a = forward_mlp(tape, &model.params, &format!("dec.l{l}"), &spec, x)?;
        let pre = match film {
            Some(f) => {
                let (eta, delta) = f[l];
                let gated = tape.mul(a, eta)?;
                tape.add(gated, delta)?
            }
            None => a,
        };
        x = tape.relu(pre);
    }
    let head = MlpSpec::linear(model.config.hidden, 1)?;
    forward_mlp(tape, &model.params, "dec.head", &head, x)
}

/// Clamp a raw prediction onto the rating scale; used only at evaluation.
pub fn clamp_rating(x: f64) -> f64 {
    x.clamp(1.0, 5.0)
}
