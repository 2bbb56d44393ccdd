//! Normalizing-flow stack: planar, radial, and affine-coupling steps with
//! exact log-determinant accounting, plus a numeric-Jacobian oracle.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numkernel::{forward_mlp, register_mlp, MlpSpec, NodeId, ParamSet, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowFamily {
    Planar,
    Radial,
    Coupling,
    None,
}

impl std::str::FromStr for FlowFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "planar" => Ok(FlowFamily::Planar),
            "radial" => Ok(FlowFamily::Radial),
            "coupling" => Ok(FlowFamily::Coupling),
            "none" => Ok(FlowFamily::None),
            other => Err(Error::Config(format!("unknown flow family {other}"))),
        }
    }
}

/// Transformed latent and the accumulated sum of log|det J| over all steps.
#[derive(Debug, Clone, Copy)]
pub struct FlowResult {
    pub z: NodeId,
    pub sum_log_det: NodeId,
}

/// Number of active steps (a `None` family is an identity stack).
pub fn effective_steps(config: &ModelConfig) -> usize {
    if config.flow_family == FlowFamily::None {
        0
    } else {
        config.flow_steps
    }
}

fn coupling_masks(d2: usize, k: usize) -> (Vec<usize>, Vec<usize>) {
    let half = d2 / 2;
    let first: Vec<usize> = (0..half).collect();
    let second: Vec<usize> = (half..d2).collect();
    // alternate which half conditions and which is transformed
    if k % 2 == 0 {
        (first, second)
    } else {
        (second, first)
    }
}

fn coupling_net_spec(in_dim: usize, hidden: usize, out_dim: usize) -> MlpSpec {
    MlpSpec::with_hidden(in_dim, hidden, out_dim, 2).expect("valid coupling net")
}

pub fn register_flow<R: Rng>(
    params: &mut ParamSet,
    config: &ModelConfig,
    rng: &mut R,
) -> Result<()> {
    let d2 = config.d2;
    for k in 0..effective_steps(config) {
        match config.flow_family {
            FlowFamily::Planar => {
                params.register_normal(&format!("flow.{k}.u"), &[d2], 0.1, rng)?;
                params.register_normal(&format!("flow.{k}.w"), &[d2], 0.1, rng)?;
                params.register(&format!("flow.{k}.b"), crate::numkernel::Tensor::scalar(0.0))?;
            }
            FlowFamily::Radial => {
                params.register_normal(&format!("flow.{k}.zref"), &[d2], 0.1, rng)?;
                params.register(
                    &format!("flow.{k}.alpha"),
                    crate::numkernel::Tensor::scalar(0.0),
                )?;
                params.register(
                    &format!("flow.{k}.beta"),
                    crate::numkernel::Tensor::scalar(0.0),
                )?;
            }
            FlowFamily::Coupling => {
                let (passive, active) = coupling_masks(d2, k);
                register_mlp(
                    params,
                    &format!("flow.{k}.scale"),
                    &coupling_net_spec(passive.len(), config.hidden, active.len()),
                    0.1,
                    rng,
                )?;
                register_mlp(
                    params,
                    &format!("flow.{k}.shift"),
                    &coupling_net_spec(passive.len(), config.hidden, active.len()),
                    0.1,
                    rng,
                )?;
            }
            FlowFamily::None => unreachable!(),
        }
    }
    Ok(())
}

/// One step on the tape; returns (z_next, log|det J|).
fn apply_step(
    tape: &mut Tape,
    params: &ParamSet,
    config: &ModelConfig,
    k: usize,
    z: NodeId,
) -> Result<(NodeId, NodeId)> {
    match config.flow_family {
        FlowFamily::Planar => {
            let u = tape.param_by_name(params, &format!("flow.{k}.u"))?;
            let w = tape.param_by_name(params, &format!("flow.{k}.w"))?;
            let b = tape.param_by_name(params, &format!("flow.{k}.b"))?;
            // u_hat = u + (m(w.u) - w.u) * w / |w|^2 with
            // m(x) = -1 + 1e-7 + softplus(x + ln(e-1)), forcing
            // w.u_hat >= -1 + 1e-7 (invertibility) while m(0) = 0 keeps
            // u = 0 an exact identity step.
            let shift = (std::f64::consts::E - 1.0).ln();
            let wu_prod = tape.mul(w, u)?;
            let wu = tape.sum_all(wu_prod);
            let wu_shifted = tape.add_const(wu, shift);
            let sp = tape.softplus(wu_shifted);
            let m = tape.add_const(sp, -1.0 + 1e-7);
            let diff = tape.sub(m, wu)?;
            let w2 = tape.square(w);
            let wnorm2 = tape.sum_all(w2);
            let coef = tape.div(diff, wnorm2)?;
            let w_scaled = tape.mul(w, coef)?;
            let u_hat = tape.add(u, w_scaled)?;
            let wz_prod = tape.mul(w, z)?;
            let wz = tape.sum_all(wz_prod);
            let a = tape.add(wz, b)?;
            let t = tape.tanh(a);
            let push = tape.mul(u_hat, t)?;
            let z_next = tape.add(z, push)?;
            // det = 1 + tanh'(a) * (w . u_hat)
            let wu_hat_prod = tape.mul(w, u_hat)?;
            let wu_hat = tape.sum_all(wu_hat_prod);
            let t2 = tape.square(t);
            let neg_t2 = tape.neg(t2);
            let dtanh = tape.add_const(neg_t2, 1.0);
            let prod = tape.mul(dtanh, wu_hat)?;
            let det = tape.add_const(prod, 1.0);
            check_det(tape, det, k)?;
            let log_det = tape.log_abs(det);
            Ok((z_next, log_det))
        }
        FlowFamily::Radial => {
            let d = config.d2 as f64;
            let zref = tape.param_by_name(params, &format!("flow.{k}.zref"))?;
            let raw_a = tape.param_by_name(params, &format!("flow.{k}.alpha"))?;
            let raw_b = tape.param_by_name(params, &format!("flow.{k}.beta"))?;
            let alpha = tape.softplus(raw_a);
            let sp_b = tape.softplus(raw_b);
            let neg_alpha = tape.neg(alpha);
            let beta = tape.add(neg_alpha, sp_b)?;
            let diff = tape.sub(z, zref)?;
            let diff2 = tape.square(diff);
            let r2 = tape.sum_all(diff2);
            let r = tape.sqrt(r2);
            let denom = tape.add(alpha, r)?;
            let h = tape.pow_const(denom, -1.0);
            let bh = tape.mul(beta, h)?;
            let scaled = tape.mul(diff, bh)?;
            let z_next = tape.add(z, scaled)?;
            // log|det| = (d-1) log|1+bh| + log|1+bh - b r/(a+r)^2|
            let f1 = tape.add_const(bh, 1.0);
            check_det(tape, f1, k)?;
            let l1 = tape.log_abs(f1);
            let term1 = tape.mul_const(l1, d - 1.0);
            let denom2 = tape.square(denom);
            let br = tape.mul(beta, r)?;
            let frac = tape.div(br, denom2)?;
            let f2 = tape.sub(f1, frac)?;
            check_det(tape, f2, k)?;
            let l2 = tape.log_abs(f2);
            let log_det = tape.add(term1, l2)?;
            Ok((z_next, log_det))
        }
        FlowFamily::Coupling => {
            let d2 = config.d2;
            let (passive, active) = coupling_masks(d2, k);
            let z_p = tape.gather(z, &passive)?;
            let scale_spec = coupling_net_spec(passive.len(), config.hidden, active.len());
            let s_raw = forward_mlp(tape, params, &format!("flow.{k}.scale"), &scale_spec, z_p)?;
            let s = tape.tanh(s_raw);
            let t = forward_mlp(tape, params, &format!("flow.{k}.shift"), &scale_spec, z_p)?;
            let z_a = tape.gather(z, &active)?;
            let es = tape.exp(s);
            let scaled = tape.mul(z_a, es)?;
            let z_a_next = tape.add(scaled, t)?;
            let part_p = tape.scatter(z_p, &passive, d2)?;
            let part_a = tape.scatter(z_a_next, &active, d2)?;
            let z_next = tape.add(part_p, part_a)?;
            let log_det = tape.sum_all(s);
            Ok((z_next, log_det))
        }
        FlowFamily::None => Err(Error::Contract("identity family has no steps".into())),
    }
}

fn check_det(tape: &Tape, det_factor: NodeId, step: usize) -> Result<()> {
    let v = tape.values(det_factor)[0];
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite determinant at flow step {step}")));
    }
    if v.abs() < 1e-12 {
        return Err(Error::Numeric(format!(
            "near-singular Jacobian at flow step {step}"
        )));
    }
    Ok(())
}

/// z_K = g_K ∘ … ∘ g_1(z0) with accumulated sum of log|det|.
pub fn apply_flow(
    tape: &mut Tape,
    params: &ParamSet,
    config: &ModelConfig,
    z0: NodeId,
) -> Result<FlowResult> {
    let mut z = z0;
    let mut sum_log_det = tape.constant_scalar(0.0);
    for k in 0..effective_steps(config) {
        let (z_next, log_det) = apply_step(tape, params, config, k, z)?;
        if tape.values(z_next).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite latent after flow step {k}"
            )));
        }
        z = z_next;
        sum_log_det = tape.add(sum_log_det, log_det)?;
    }
    Ok(FlowResult { z, sum_log_det })
}

/// Plain (value-only) evaluation of one step at a point.
pub fn step_forward(
    params: &ParamSet,
    config: &ModelConfig,
    k: usize,
    z: &[f64],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let zi = tape.constant_vector(z);
    let (z_next, _) = apply_step(&mut tape, params, config, k, zi)?;
    Ok(tape.values(z_next).to_vec())
}

/// Analytic log|det ∂g_k/∂z| at a point.
pub fn log_det_step(params: &ParamSet, config: &ModelConfig, k: usize, z: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let zi = tape.constant_vector(z);
    let (_, log_det) = apply_step(&mut tape, params, config, k, zi)?;
    tape.scalar_value(log_det)
}

/// Recover z_in from z_out for a coupling step (exact analytic inverse).
pub fn invert_coupling(
    params: &ParamSet,
    config: &ModelConfig,
    k: usize,
    z_out: &[f64],
) -> Result<Vec<f64>> {
    if config.flow_family != FlowFamily::Coupling {
        return Err(Error::Contract("invert_coupling needs a coupling stack".into()));
    }
    let d2 = config.d2;
    let (passive, active) = coupling_masks(d2, k);
    let z_p: Vec<f64> = passive.iter().map(|&i| z_out[i]).collect();
    let mut tape = Tape::new();
    let zp = tape.constant_vector(&z_p);
    let spec = coupling_net_spec(passive.len(), config.hidden, active.len());
    let s_raw = forward_mlp(&mut tape, params, &format!("flow.{k}.scale"), &spec, zp)?;
    let s = tape.tanh(s_raw);
    let t = forward_mlp(&mut tape, params, &format!("flow.{k}.shift"), &spec, zp)?;
    let s = tape.values(s).to_vec();
    let t = tape.values(t).to_vec();
    let mut z_in = z_out.to_vec();
    for (j, &i) in active.iter().enumerate() {
        z_in[i] = (z_out[i] - t[j]) * (-s[j]).exp();
    }
    Ok(z_in)
}

/// log|det| of the central-difference Jacobian of step k at z.
pub fn numeric_jacobian_logdet(
    params: &ParamSet,
    config: &ModelConfig,
    k: usize,
    z: &[f64],
    h: f64,
) -> Result<f64> {
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::Contract(format!("step size {h} outside [1e-7, 1e-4]")));
    }
    let d = z.len();
    let mut jac = vec![vec![0.0f64; d]; d];
    for j in 0..d {
        let mut up = z.to_vec();
        up[j] += h;
        let mut down = z.to_vec();
        down[j] -= h;
        let fu = step_forward(params, config, k, &up)?;
        let fd = step_forward(params, config, k, &down)?;
        for i in 0..d {
            jac[i][j] = (fu[i] - fd[i]) / (2.0 * h);
        }
    }
    Ok(log_abs_det(jac))
}

/// log|det| by LU factorization with partial pivoting.
fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut log_det = 0.0;
    for col in 0..n {
        let (pivot, pval) = (col..n)
            .map(|r| (r, a[r][col].abs()))
            .max_by(|x, y| x.1.partial_cmp(&y.1).unwrap())
            .unwrap();
        if pval < 1e-300 {
            return f64::NEG_INFINITY;
        }
        a.swap(col, pivot);
        log_det += a[col][col].abs().ln();
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    log_det
}
