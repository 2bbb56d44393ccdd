//! Personalized preference encoder: embedding lookups, permutation-invariant
//! set encoding through the shared fusion network, and the Gaussian latent
//! heads with reparameterized sampling.

use crate::data::{Interaction, Task};
use crate::error::{Error, Result};
use crate::model::{rating_feature, Model};
use crate::numkernel::{forward_mlp, NodeId, Tape};

/// Tape nodes holding the (mu, sigma) vectors of a diagonal Gaussian.
#[derive(Debug, Clone, Copy)]
pub struct LatentNodes {
    pub mu: NodeId,
    pub sigma: NodeId,
}

/// Concrete (mu, sigma) values, extracted from the tape for reporting.
#[derive(Debug, Clone)]
pub struct GaussianLatent {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl LatentNodes {
    pub fn extract(&self, tape: &Tape) -> GaussianLatent {
        GaussianLatent {
            mu: tape.values(self.mu).to_vec(),
            sigma: tape.values(self.sigma).to_vec(),
        }
    }
}

/// Stack [u || v || y] triples for a set of interactions into an [n, 2*d1+1]
/// matrix, looking items up in the source or target table.
pub fn interaction_matrix(
    tape: &mut Tape,
    model: &Model,
    interactions: &[Interaction],
    source_items: bool,
) -> Result<NodeId> {
    if interactions.is_empty() {
        return Err(Error::Contract("empty interaction set".into()));
    }
    let user_table = tape.param_by_name(&model.params, "emb.user")?;
    let item_table = tape.param_by_name(
        &model.params,
        if source_items { "emb.item_src" } else { "emb.item_tgt" },
    )?;
    let mut rows = Vec::with_capacity(interactions.len());
    for i in interactions {
        let u_idx = model.id_maps.user_index(&i.user_id)?;
        let v_idx = model.id_maps.item_index(&i.item_id, source_items)?;
        let u = tape.select_row(user_table, u_idx)?;
        let v = tape.select_row(item_table, v_idx)?;
        let y = tape.constant_scalar(rating_feature(&model.config, i));
        rows.push(tape.concat_vec(&[u, v, y])?);
    }
    tape.stack_rows(&rows)
}

/// Per-interaction representations r_ij through the shared fusion network:
/// an [n, d2] matrix.
pub fn encode_interaction_set(
    tape: &mut Tape,
    model: &Model,
    interactions: &[Interaction],
    source_items: bool,
) -> Result<NodeId> {
    let input = interaction_matrix(tape, model, interactions, source_items)?;
    forward_mlp(tape, &model.params, "phi", &model.config.phi_spec(), input)
}

/// Componentwise mean over the rows of an [n, d] matrix.
pub fn aggregate_mean(tape: &mut Tape, rows: NodeId) -> Result<NodeId> {
    tape.mean_rows(rows)
        .map_err(|_| Error::Contract("cannot aggregate an empty set".into()))
}

/// r' = ReLU(MLP(r)); mu = MLP(r'); sigma = 0.1 + 0.9*Sigmoid(MLP(r')).
pub fn gaussian_params(tape: &mut Tape, model: &Model, r: NodeId) -> Result<LatentNodes> {
    let d2 = model.config.d2;
    let trunk_spec = crate::numkernel::MlpSpec::linear(d2, d2)?;
    let trunk = forward_mlp(tape, &model.params, "gauss.trunk", &trunk_spec, r)?;
    let r_prime = tape.relu(trunk);
    let mu = forward_mlp(tape, &model.params, "gauss.mu", &trunk_spec, r_prime)?;
    let sig_pre = forward_mlp(tape, &model.params, "gauss.sigma", &trunk_spec, r_prime)?;
    let sig = tape.sigmoid(sig_pre);
    let sig = tape.mul_const(sig, 0.9);
    let sigma = tape.add_const(sig, 0.1);
    Ok(LatentNodes { mu, sigma })
}

/// z = mu + eps ⊙ sigma.
pub fn sample_latent(
    tape: &mut Tape,
    latent: LatentNodes,
    eps: &[f64],
) -> Result<NodeId> {
    if tape.values(latent.mu).len() != eps.len() {
        return Err(Error::ShapeMismatch {
            op: "sample_latent",
            lhs: tape.shape(latent.mu).to_vec(),
            rhs: vec![eps.len()],
        });
    }
    let eps_node = tape.constant_vector(eps);
    let scaled = tape.mul(eps_node, latent.sigma)?;
    tape.add(latent.mu, scaled)
}

/// Prior from the support set; posterior from support ∪ query when training.
pub fn prior_and_posterior(
    tape: &mut Tape,
    model: &Model,
    task: &Task,
    training: bool,
) -> Result<(LatentNodes, Option<LatentNodes>)> {
    if task.support.is_empty() {
        return Err(Error::Task(format!("user {} has an empty support set", task.user_id)));
    }
    let support_rows = encode_interaction_set(tape, model, &task.support, true)?;
    let r_prior = aggregate_mean(tape, support_rows)?;
    let prior = gaussian_params(tape, model, r_prior)?;
    if !training {
        return Ok((prior, None));
    }
    if task.query.is_empty() {
        return Err(Error::Contract(format!(
            "training requires a non-empty query set for user {}",
            task.user_id
        )));
    }
    // union matrix: support triples via the source table, query triples via
    // the target table, all through the same phi
    let support_m = interaction_matrix(tape, model, &task.support, true)?;
    let query_m = interaction_matrix(tape, model, &task.query, false)?;
    let mut union_rows = Vec::new();
    for i in 0..task.support.len() {
        union_rows.push(tape.select_row(support_m, i)?);
    }
    for i in 0..task.query.len() {
        union_rows.push(tape.select_row(query_m, i)?);
    }
    let union = tape.stack_rows(&union_rows)?;
    let encoded = forward_mlp(tape, &model.params, "phi", &model.config.phi_spec(), union)?;
    let r_post = aggregate_mean(tape, encoded)?;
    let posterior = gaussian_params(tape, model, r_post)?;
    Ok((prior, Some(posterior)))
}
