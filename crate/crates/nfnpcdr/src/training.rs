//! Objectives, the episodic training loop, cold-start evaluation, latent
//! entropy estimation, and checkpoint persistence.

use std::path::Path;

use base64::Engine as _;
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::commonpref::{auxiliary_distribution, cluster_loss, fuse_preference, identity_network, soft_assign};
use crate::data::Task;
use crate::decoder::{clamp_rating, decode, decoder_inputs, film_params};
use crate::error::{Error, Result};
use crate::flows::{apply_flow, FlowResult};
use crate::model::Model;
use crate::npencoder::{prior_and_posterior, sample_latent, LatentNodes};
use crate::numkernel::{AdamConfig, AdamState, NodeId, Tape};

const LN_2PI: f64 = 1.837877066409345483560659472811; // ln(2*pi)

// ── configuration and reports ───────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the clustering term in the total objective.
    pub lambda: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Most-recent source interactions kept per support set.
    pub support_length: usize,
    pub seed: u64,
    /// Epochs without holdout-MAE improvement before stopping.
    pub patience: usize,
    /// Fraction of training tasks held out to monitor early stopping.
    pub holdout: f64,
    /// Prior samples averaged per prediction at evaluation.
    pub n_prior_samples: usize,
    pub no_flow: bool,
    pub no_pool: bool,
    pub no_film: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.3,
            batch_size: 128,
            learning_rate: 0.01,
            epochs: 100,
            support_length: 20,
            seed: 0,
            patience: 10,
            holdout: 0.1,
            n_prior_samples: 1,
            no_flow: false,
            no_pool: false,
            no_film: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config("lambda must be in [0,1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::Config("holdout must be in [0,1)".into()));
        }
        if self.support_length == 0 {
            return Err(Error::Config("support_length must be positive".into()));
        }
        if self.n_prior_samples == 0 {
            return Err(Error::Config("n_prior_samples must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub kl: f64,
    pub cluster: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_rec: f64,
    pub loss_kl: f64,
    pub loss_c: f64,
    pub loss_total: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub rmse: f64,
    pub n_tasks: usize,
    pub n_pairs: usize,
    pub per_task_mae_min: f64,
    pub per_task_mae_median: f64,
    pub per_task_mae_max: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropy_z0: Option<f64>,
    #[serde(rename = "entropy_zK", skip_serializing_if = "Option::is_none")]
    pub entropy_zk: Option<f64>,
}

// ── loss nodes ──────────────────────────────────────────────────────

/// log N(x; mu, diag(sigma^2)) as a tape scalar.
fn gaussian_logpdf(tape: &mut Tape, x: NodeId, latent: LatentNodes) -> Result<NodeId> {
    let d = tape.values(latent.mu).len() as f64;
    let diff = tape.sub(x, latent.mu)?;
    let ratio = tape.div(diff, latent.sigma)?;
    let sq = tape.square(ratio);
    let ssq = tape.sum_all(sq);
    let log_sig = tape.log_abs(latent.sigma);
    let sum_log_sig = tape.sum_all(log_sig);
    let half_ssq = tape.mul_const(ssq, 0.5);
    let pos = tape.add(half_ssq, sum_log_sig)?;
    let neg = tape.neg(pos);
    Ok(tape.add_const(neg, -0.5 * d * LN_2PI))
}

/// Mean squared residual over one query set.
pub fn rec_loss(tape: &mut Tape, predictions: NodeId, truths: &[f64]) -> Result<NodeId> {
    let n = tape.values(predictions).len();
    if n == 0 || truths.is_empty() {
        return Err(Error::Contract("rec_loss over an empty query set".into()));
    }
    if n != truths.len() {
        return Err(Error::ShapeMismatch {
            op: "rec_loss",
            lhs: tape.shape(predictions).to_vec(),
            rhs: vec![truths.len()],
        });
    }
    let shape = tape.shape(predictions).to_vec();
    let t = tape.constant(&crate::numkernel::Tensor::new(shape, truths.to_vec())?);
    let diff = tape.sub(predictions, t)?;
    let sq = tape.square(diff);
    tape.mean_all(sq)
}

/// Single-sample variational regularizer:
/// log q0(z0 | C,Q) − sum_log_det − log p(zK | C).
pub fn kl_loss(
    tape: &mut Tape,
    posterior: LatentNodes,
    z0: NodeId,
    flow: &FlowResult,
    prior: LatentNodes,
) -> Result<NodeId> {
    let log_q = gaussian_logpdf(tape, z0, posterior)?;
    let log_p = gaussian_logpdf(tape, flow.z, prior)?;
    let a = tape.sub(log_q, flow.sum_log_det)?;
    let kl = tape.sub(a, log_p)?;
    let v = tape.scalar_value(kl)?;
    if !v.is_finite() {
        return Err(Error::Numeric("non-finite variational term".into()));
    }
    Ok(kl)
}

/// Plain-value aggregation mirroring the batch objective: mean(rec + kl)
/// over tasks plus lambda times the shared cluster term.
pub fn total_loss(per_task: &[(f64, f64)], cluster: f64, lambda: f64) -> Result<LossBreakdown> {
    if per_task.is_empty() {
        return Err(Error::Contract("total_loss over an empty batch".into()));
    }
    let n = per_task.len() as f64;
    let rec = per_task.iter().map(|t| t.0).sum::<f64>() / n;
    let kl = per_task.iter().map(|t| t.1).sum::<f64>() / n;
    Ok(LossBreakdown {
        rec,
        kl,
        cluster,
        total: rec + kl + lambda * cluster,
    })
}

// ── per-task graphs ─────────────────────────────────────────────────

fn flow_latent(tape: &mut Tape, model: &Model, cfg: &TrainConfig, z0: NodeId) -> Result<FlowResult> {
    if cfg.no_flow {
        Ok(FlowResult {
            z: z0,
            sum_log_det: tape.constant_scalar(0.0),
        })
    } else {
        apply_flow(tape, &model.params, &model.config, z0)
    }
}

/// Fused preference h (or plain e when the pool is ablated) plus the live
/// soft assignment feeding the cluster loss.
fn preference_nodes(
    tape: &mut Tape,
    model: &Model,
    task: &Task,
    cfg: &TrainConfig,
) -> Result<(NodeId, Option<NodeId>)> {
    let e = identity_network(tape, model, &task.support)?;
    if cfg.no_pool {
        return Ok((e, None));
    }
    let m = soft_assign(tape, model, e)?;
    let h = fuse_preference(tape, model, e, m)?;
    Ok((h, Some(m)))
}

struct TaskNodes {
    rec: NodeId,
    kl: NodeId,
    assignment: Option<NodeId>,
}

fn forward_task_train(
    tape: &mut Tape,
    model: &Model,
    task: &Task,
    cfg: &TrainConfig,
    eps: &[f64],
) -> Result<TaskNodes> {
    let (prior, posterior) = prior_and_posterior(tape, model, task, true)?;
    let posterior = posterior.expect("training mode yields a posterior");
    let z0 = sample_latent(tape, posterior, eps)?;
    let flow = flow_latent(tape, model, cfg, z0)?;
    let (h, assignment) = preference_nodes(tape, model, task, cfg)?;
    let film = if cfg.no_film {
        None
    } else {
        Some(film_params(tape, model, h)?)
    };
    let inputs = decoder_inputs(tape, model, &task.user_id, &task.query, flow.z)?;
    let preds = decode(tape, model, inputs, film.as_deref())?;
    let truths: Vec<f64> = task.query.iter().map(|q| q.rating as f64).collect();
    let rec = rec_loss(tape, preds, &truths)?;
    let kl = kl_loss(tape, posterior, z0, &flow, prior)?;
    Ok(TaskNodes { rec, kl, assignment })
}

pub struct BatchGraph {
    pub total: NodeId,
    pub rec_mean: NodeId,
    pub kl_mean: NodeId,
    pub cluster: Option<NodeId>,
}

/// Build the whole minibatch objective on one tape. `eps` supplies the
/// posterior noise per task; `frozen_targets` fixes the clustering targets
/// (when None they are derived from the current assignments, which is what a
/// live optimizer step does — gradient checks must pass them in).
pub fn build_batch_graph(
    tape: &mut Tape,
    model: &Model,
    batch: &[Task],
    cfg: &TrainConfig,
    eps: &[Vec<f64>],
    frozen_targets: Option<&[Vec<f64>]>,
) -> Result<BatchGraph> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    if eps.len() != batch.len() {
        return Err(Error::Contract(format!(
            "{} noise vectors for {} tasks",
            eps.len(),
            batch.len()
        )));
    }
    let mut recs = Vec::with_capacity(batch.len());
    let mut kls = Vec::with_capacity(batch.len());
    let mut objectives = Vec::with_capacity(batch.len());
    let mut assignments = Vec::new();
    for (task, e) in batch.iter().zip(eps) {
        let nodes = forward_task_train(tape, model, task, cfg, e).map_err(|err| {
            Error::Task(format!("task for user {}: {err}", task.user_id))
        })?;
        recs.push(nodes.rec);
        kls.push(nodes.kl);
        objectives.push(tape.add(nodes.rec, nodes.kl)?);
        if let Some(m) = nodes.assignment {
            assignments.push(m);
        }
    }
    let obj_vec = tape.concat_vec(&objectives)?;
    let base = tape.mean_all(obj_vec)?;
    let rec_vec = tape.concat_vec(&recs)?;
    let rec_mean = tape.mean_all(rec_vec)?;
    let kl_vec = tape.concat_vec(&kls)?;
    let kl_mean = tape.mean_all(kl_vec)?;
    if cfg.no_pool || assignments.is_empty() {
        return Ok(BatchGraph {
            total: base,
            rec_mean,
            kl_mean,
            cluster: None,
        });
    }
    let owned;
    let targets = match frozen_targets {
        Some(t) => t,
        None => {
            let m_vals: Vec<Vec<f64>> = assignments
                .iter()
                .map(|&m| tape.values(m).to_vec())
                .collect();
            owned = auxiliary_distribution(&m_vals)?;
            &owned
        }
    };
    let cl = cluster_loss(tape, &assignments, targets)?;
    let scaled = tape.mul_const(cl, cfg.lambda);
    let total = tape.add(base, scaled)?;
    Ok(BatchGraph {
        total,
        rec_mean,
        kl_mean,
        cluster: Some(cl),
    })
}

/// Standard-normal noise vectors, one per task.
pub fn draw_noise<R: Rng>(rng: &mut R, n_tasks: usize, d2: usize) -> Vec<Vec<f64>> {
    (0..n_tasks)
        .map(|_| (0..d2).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// One optimizer step over a minibatch of tasks.
pub fn train_step<R: Rng>(
    model: &mut Model,
    batch: &[Task],
    cfg: &TrainConfig,
    adam: &mut AdamState,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let eps = draw_noise(rng, batch.len(), model.config.d2);
    let mut tape = Tape::new();
    let graph = build_batch_graph(&mut tape, model, batch, cfg, &eps, None)?;
    let total = tape.scalar_value(graph.total)?;
    if !total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite batch loss (first user {})",
            batch[0].user_id
        )));
    }
    let breakdown = LossBreakdown {
        rec: tape.scalar_value(graph.rec_mean)?,
        kl: tape.scalar_value(graph.kl_mean)?,
        cluster: graph
            .cluster
            .map(|c| tape.scalar_value(c))
            .transpose()?
            .unwrap_or(0.0),
        total,
    };
    tape.backward(graph.total, &mut model.params)?;
    adam.step(&mut model.params)?;
    Ok(breakdown)
}

/// One pass over the training tasks in shuffled minibatches; returns one
/// breakdown per batch, in order.
pub fn train_epoch<R: Rng>(
    model: &mut Model,
    tasks: &[Task],
    cfg: &TrainConfig,
    adam: &mut AdamState,
    rng: &mut R,
) -> Result<Vec<LossBreakdown>> {
    if tasks.is_empty() {
        return Err(Error::Contract("no training tasks".into()));
    }
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    order.shuffle(rng);
    let mut out = Vec::new();
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<Task> = chunk.iter().map(|&i| tasks[i].clone()).collect();
        out.push(train_step(model, &batch, cfg, adam, rng)?);
    }
    Ok(out)
}

fn mean_breakdown(batches: &[LossBreakdown]) -> LossBreakdown {
    let n = batches.len() as f64;
    LossBreakdown {
        rec: batches.iter().map(|b| b.rec).sum::<f64>() / n,
        kl: batches.iter().map(|b| b.kl).sum::<f64>() / n,
        cluster: batches.iter().map(|b| b.cluster).sum::<f64>() / n,
        total: batches.iter().map(|b| b.total).sum::<f64>() / n,
    }
}

/// Full training run: shuffled minibatch epochs with early stopping on the
/// holdout MAE (best parameters restored at the end). Calls `on_epoch` with
/// each log line as it is produced.
pub fn train(
    model: &mut Model,
    tasks: &[Task],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Contract("no training tasks".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut shuffled: Vec<Task> = tasks.to_vec();
    shuffled.shuffle(&mut rng);
    let n_val = ((shuffled.len() as f64) * cfg.holdout).floor() as usize;
    let (val_tasks, train_tasks) = shuffled.split_at(n_val);
    let val_tasks: Vec<Task> = if val_tasks.is_empty() {
        train_tasks.to_vec()
    } else {
        val_tasks.to_vec()
    };
    let train_tasks = train_tasks.to_vec();
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.learning_rate,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let mut logs = Vec::new();
    let mut best_mae = f64::INFINITY;
    let mut best_params = model.params.clone();
    let mut stale = 0usize;
    for epoch in 1..=cfg.epochs {
        let batches = train_epoch(model, &train_tasks, cfg, &mut adam, &mut rng)
            .map_err(|e| Error::Numeric(format!("epoch {epoch}: {e}")))?;
        let b = mean_breakdown(&batches);
        let val = evaluate(model, &val_tasks, cfg, 1, cfg.seed)?;
        let log = EpochLog {
            epoch,
            loss_rec: b.rec,
            loss_kl: b.kl,
            loss_c: b.cluster,
            loss_total: b.total,
            val_mae: val.mae,
            val_rmse: val.rmse,
        };
        on_epoch(&log);
        logs.push(log);
        if val.mae + 1e-12 < best_mae {
            best_mae = val.mae;
            best_params = model.params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    model.params = best_params;
    Ok(logs)
}

// ── evaluation ──────────────────────────────────────────────────────

fn task_seed(base: u64, idx: usize) -> u64 {
    base ^ (idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

type TaskEval = (f64, f64, usize, f64); // (abs sum, sq sum, pairs, task MAE)

fn evaluate_task(
    model: &Model,
    task: &Task,
    cfg: &TrainConfig,
    n_prior_samples: usize,
    seed: u64,
) -> Result<TaskEval> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let (prior, _) = prior_and_posterior(&mut tape, model, task, false)?;
    let (h, _) = preference_nodes(&mut tape, model, task, cfg)?;
    let film = if cfg.no_film {
        None
    } else {
        Some(film_params(&mut tape, model, h)?)
    };
    let mut sums = vec![0.0f64; task.query.len()];
    for _ in 0..n_prior_samples {
        let eps: Vec<f64> = (0..model.config.d2)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let z0 = sample_latent(&mut tape, prior, &eps)?;
        let flow = flow_latent(&mut tape, model, cfg, z0)?;
        let inputs = decoder_inputs(&mut tape, model, &task.user_id, &task.query, flow.z)?;
        let preds = decode(&mut tape, model, inputs, film.as_deref())?;
        for (s, &p) in sums.iter_mut().zip(tape.values(preds)) {
            *s += p;
        }
    }
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    for (s, q) in sums.iter().zip(&task.query) {
        let pred = clamp_rating(s / n_prior_samples as f64);
        let r = pred - q.rating as f64;
        abs_sum += r.abs();
        sq_sum += r * r;
    }
    let n = task.query.len();
    Ok((abs_sum, sq_sum, n, abs_sum / n as f64))
}

/// Cold-start evaluation over tasks: prior sample(s), flow, fused preference
/// from the support set, clamped predictions, metrics pooled over all
/// (task, item) pairs. Read-only with respect to the model.
pub fn evaluate(
    model: &Model,
    tasks: &[Task],
    cfg: &TrainConfig,
    n_prior_samples: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n_prior_samples == 0 {
        return Err(Error::Contract("n_prior_samples must be positive".into()));
    }
    let scored: Vec<&Task> = tasks.iter().filter(|t| !t.query.is_empty()).collect();
    if scored.is_empty() {
        return Err(Error::Task("no query pairs to evaluate".into()));
    }
    let results = crate::par::map_items(&scored, |idx, task| {
        evaluate_task(model, task, cfg, n_prior_samples, task_seed(seed, idx))
    });
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut n_pairs = 0usize;
    let mut task_maes = Vec::with_capacity(results.len());
    for r in results {
        let (a, s, n, mae) = r?;
        abs_sum += a;
        sq_sum += s;
        n_pairs += n;
        task_maes.push(mae);
    }
    task_maes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if task_maes.len() % 2 == 1 {
        task_maes[task_maes.len() / 2]
    } else {
        let hi = task_maes.len() / 2;
        (task_maes[hi - 1] + task_maes[hi]) / 2.0
    };
    Ok(EvalReport {
        mae: abs_sum / n_pairs as f64,
        rmse: (sq_sum / n_pairs as f64).sqrt(),
        n_tasks: task_maes.len(),
        n_pairs,
        per_task_mae_min: task_maes[0],
        per_task_mae_median: median,
        per_task_mae_max: *task_maes.last().unwrap(),
        entropy_z0: None,
        entropy_zk: None,
    })
}

// ── entropy estimation ──────────────────────────────────────────────

/// Differential entropy of a diagonal Gaussian with the given scales.
pub fn gaussian_entropy(sigma: &[f64]) -> f64 {
    0.5 * sigma.len() as f64 * (1.0 + LN_2PI) + sigma.iter().map(|s| s.ln()).sum::<f64>()
}

/// Monte Carlo entropy of the refined latent: H(zK) estimated as the mean of
/// −[log q0(z0) − sum_log_det] over prior samples, averaged over tasks.
/// H(z0) is analytic per task.
pub fn estimate_entropy(
    model: &Model,
    tasks: &[Task],
    cfg: &TrainConfig,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_samples < 100 {
        return Err(Error::Contract("entropy estimation needs at least 100 samples".into()));
    }
    if tasks.is_empty() {
        return Err(Error::Contract("no tasks for entropy estimation".into()));
    }
    let results = crate::par::map_items(tasks, |idx, task| -> Result<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(task_seed(seed, idx));
        let (mu, sigma) = {
            let mut tape = Tape::new();
            let (prior, _) = prior_and_posterior(&mut tape, model, task, false)?;
            let g = prior.extract(&tape);
            (g.mu, g.sigma)
        };
        let h0 = gaussian_entropy(&sigma);
        let mut hk_sum = 0.0;
        for _ in 0..n_samples {
            let eps: Vec<f64> = (0..mu.len()).map(|_| rng.sample(StandardNormal)).collect();
            let z0: Vec<f64> = mu
                .iter()
                .zip(&sigma)
                .zip(&eps)
                .map(|((&m, &s), &e)| m + s * e)
                .collect();
            let log_q0: f64 = sigma
                .iter()
                .zip(&eps)
                .map(|(&s, &e)| -0.5 * LN_2PI - s.ln() - 0.5 * e * e)
                .sum();
            let sld = if cfg.no_flow {
                0.0
            } else {
                let mut tape = Tape::new();
                let zi = tape.constant_vector(&z0);
                let flow = apply_flow(&mut tape, &model.params, &model.config, zi)?;
                tape.scalar_value(flow.sum_log_det)?
            };
            hk_sum += -(log_q0 - sld);
        }
        Ok((h0, hk_sum / n_samples as f64))
    });
    let n = results.len() as f64;
    let mut h0_sum = 0.0;
    let mut hk_sum = 0.0;
    for r in results {
        let (h0, hk) = r?;
        h0_sum += h0;
        hk_sum += hk;
    }
    Ok((h0_sum / n, hk_sum / n))
}

// ── checkpointing ───────────────────────────────────────────────────

pub const CHECKPOINT_MAGIC: &str = "NFNPCDR-CKPT v1";

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    /// base64 of little-endian 64-bit reals
    data: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    config: CheckpointConfig,
    id_maps: crate::model::IdMaps,
    params: Vec<ParamRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: crate::model::ModelConfig,
    pub train: TrainConfig,
}

pub fn save_checkpoint(model: &Model, train: &TrainConfig, path: &Path) -> Result<()> {
    let mut records = Vec::with_capacity(model.params.len());
    for block in model.params.iter() {
        if block.value.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!(
                "parameter {} contains non-finite values",
                block.name
            )));
        }
        let mut bytes = Vec::with_capacity(block.value.len() * 8);
        for &v in block.value.values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        records.push(ParamRecord {
            name: block.name.clone(),
            shape: block.value.shape().to_vec(),
            data: base64::engine::general_purpose::STANDARD.encode(&bytes),
        });
    }
    let doc = CheckpointDoc {
        config: CheckpointConfig {
            model: model.config.clone(),
            train: train.clone(),
        },
        id_maps: model.id_maps.clone(),
        params: records,
    };
    let body = serde_json::to_string(&doc)?;
    std::fs::write(path, format!("{CHECKPOINT_MAGIC}\n{body}\n")).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, TrainConfig)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (magic, body) = text
        .split_once('\n')
        .ok_or_else(|| Error::Checkpoint("missing magic line".into()))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "magic mismatch: expected {CHECKPOINT_MAGIC:?}, found {magic:?}"
        )));
    }
    let doc: CheckpointDoc = serde_json::from_str(body)
        .map_err(|e| Error::Checkpoint(format!("corrupted payload: {e}")))?;
    let mut id_maps = doc.id_maps;
    id_maps.rebuild_lookups();
    let mut model = Model::new(doc.config.model.clone(), id_maps, 0)?;
    if doc.params.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "{} stored parameters for a model with {}",
            doc.params.len(),
            model.params.len()
        )));
    }
    for record in &doc.params {
        let block = model
            .params
            .by_name_mut(&record.name)
            .map_err(|_| Error::Checkpoint(format!("unknown parameter {}", record.name)))?;
        if block.value.shape() != record.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?} but checkpoint stores {:?}",
                record.name,
                block.value.shape(),
                record.shape
            )));
        }
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&record.data)
            .map_err(|e| Error::Checkpoint(format!("parameter {}: bad base64: {e}", record.name)))?;
        if bytes.len() != block.value.len() * 8 {
            return Err(Error::Checkpoint(format!(
                "parameter {} payload holds {} bytes, expected {}",
                record.name,
                bytes.len(),
                block.value.len() * 8
            )));
        }
        for (slot, chunk) in block.value.values_mut().iter_mut().zip(bytes.chunks_exact(8)) {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} contains non-finite values",
                    record.name
                )));
            }
            *slot = v;
        }
    }
    Ok((model, doc.config.train))
}

#[cfg(test)]
mod tests;
