//! Common preference pool: identity-network encoding, Student's-t soft
//! assignment to shared centroids, fused preferences, and the sharpening
//! KL objective over a detached auxiliary distribution.

use crate::data::Interaction;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numkernel::{forward_mlp, NodeId, Tape};

const EPS: f64 = 1e-12;

/// e_i: mean over support triples pushed through the identity network.
pub fn identity_network(
    tape: &mut Tape,
    model: &Model,
    support: &[Interaction],
) -> Result<NodeId> {
    let input = crate::npencoder::interaction_matrix(tape, model, support, true)?;
    let rows = forward_mlp(tape, &model.params, "theta", &model.config.theta_spec(), input)?;
    tape.mean_rows(rows)
}

/// Student's-t kernel assignment of e to the pool centroids: a vector of
/// positive weights summing to one.
pub fn soft_assign(tape: &mut Tape, model: &Model, e: NodeId) -> Result<NodeId> {
    let alpha = model.config.student_t_dof;
    let n = model.config.pool_size;
    let centroids = tape.param_by_name(&model.params, "pool.centroids")?;
    let mut kernels = Vec::with_capacity(n);
    for k in 0..n {
        let c = tape.select_row(centroids, k)?;
        let diff = tape.sub(e, c)?;
        let sq = tape.square(diff);
        let dist2 = tape.sum_all(sq);
        let scaled = tape.mul_const(dist2, 1.0 / alpha);
        let base = tape.add_const(scaled, 1.0);
        kernels.push(tape.pow_const(base, -(alpha + 1.0) / 2.0));
    }
    let k = tape.concat_vec(&kernels)?;
    let total = tape.sum_all(k);
    tape.div(k, total)
}

/// h = e + assignment-weighted sum of centroids.
pub fn fuse_preference(tape: &mut Tape, model: &Model, e: NodeId, c: NodeId) -> Result<NodeId> {
    let centroids = tape.param_by_name(&model.params, "pool.centroids")?;
    let pooled = tape.matmul(c, centroids)?;
    tape.add(e, pooled)
}

/// Auxiliary target distribution over the pool, computed on plain values and
/// held constant during a step: squares the assignments, normalizes by the
/// per-centroid soft frequency, then renormalizes each row.
pub fn auxiliary_distribution(m: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if m.is_empty() {
        return Err(Error::Contract("auxiliary distribution of an empty batch".into()));
    }
    let n = m[0].len();
    if m.iter().any(|row| row.len() != n) {
        return Err(Error::Contract("ragged assignment rows".into()));
    }
    let mut freq = vec![0.0f64; n];
    for row in m {
        for (f, &v) in freq.iter_mut().zip(row) {
            *f += v;
        }
    }
    let mut out = Vec::with_capacity(m.len());
    for row in m {
        let mut d: Vec<f64> = row
            .iter()
            .zip(&freq)
            .map(|(&v, &f)| v * v / (f + EPS))
            .collect();
        let total: f64 = d.iter().sum();
        if total <= 0.0 || !total.is_finite() {
            return Err(Error::Numeric(
                "degenerate auxiliary distribution row".into(),
            ));
        }
        for v in &mut d {
            *v /= total;
        }
        out.push(d);
    }
    Ok(out)
}

/// KL(D || M) summed over the batch. `d` enters the tape as constants so the
/// objective only sharpens the live assignments toward the frozen targets.
pub fn cluster_loss(tape: &mut Tape, m_rows: &[NodeId], d: &[Vec<f64>]) -> Result<NodeId> {
    if m_rows.len() != d.len() {
        return Err(Error::Contract(format!(
            "{} assignment rows but {} target rows",
            m_rows.len(),
            d.len()
        )));
    }
    if m_rows.is_empty() {
        return Err(Error::Contract("cluster loss over an empty batch".into()));
    }
    let mut terms = Vec::with_capacity(d.len());
    for (&m, drow) in m_rows.iter().zip(d) {
        if tape.values(m).len() != drow.len() {
            return Err(Error::ShapeMismatch {
                op: "cluster_loss",
                lhs: tape.shape(m).to_vec(),
                rhs: vec![drow.len()],
            });
        }
        let entropy: f64 = drow
            .iter()
            .map(|&p| if p > 0.0 { p * (p + EPS).ln() } else { 0.0 })
            .sum();
        let d_node = tape.constant_vector(drow);
        let shifted = tape.add_const(m, EPS);
        let log_m = tape.log_abs(shifted);
        let cross = tape.mul(d_node, log_m)?;
        let cross_sum = tape.sum_all(cross);
        let neg_cross = tape.neg(cross_sum);
        terms.push(tape.add_const(neg_cross, entropy));
    }
    let stacked = tape.concat_vec(&terms)?;
    Ok(tape.sum_all(stacked))
}
