use std::path::PathBuf;

use super::*;
use crate::data::{Domain, DomainDataset, Interaction, Task};
use crate::flows::FlowFamily;
use crate::model::{IdMaps, Model, ModelConfig};
use crate::numkernel::{grad_check, ParamSet};
use rand_chacha::ChaCha8Rng;

fn inter(u: &str, i: &str, r: u8, t: i64) -> Interaction {
    Interaction {
        user_id: u.into(),
        item_id: i.into(),
        rating: r,
        timestamp: t,
    }
}

/// Deterministic desk-scale fixture: 8 users rating 6 items per domain with
/// a user-and-item dependent pattern.
fn fixture(config: ModelConfig, seed: u64) -> (Model, Vec<Task>) {
    let mut source = Vec::new();
    let mut target = Vec::new();
    for u in 0..8 {
        for i in 0..6 {
            source.push(inter(
                &format!("u{u}"),
                &format!("s{i}"),
                ((2 * u + i) % 5 + 1) as u8,
                i as i64,
            ));
            target.push(inter(
                &format!("u{u}"),
                &format!("t{i}"),
                ((u + 2 * i) % 5 + 1) as u8,
                i as i64,
            ));
        }
    }
    let source = DomainDataset::new(Domain::Source, source);
    let target = DomainDataset::new(Domain::Target, target);
    let maps = IdMaps::from_datasets(&source, &target);
    let model = Model::new(config, maps, seed).unwrap();
    let tasks: Vec<Task> = (0..8)
        .map(|u| crate::data::build_task(&format!("u{u}"), &source, &target, 5).unwrap())
        .collect();
    (model, tasks)
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs: 3,
        holdout: 0.0,
        ..TrainConfig::default()
    }
}

// ── losses ──────────────────────────────────────────────────────────

#[test]
fn rec_loss_examples() {
    let mut tape = Tape::new();
    let equal = tape.constant_vector(&[2.0, 4.0]);
    let l = rec_loss(&mut tape, equal, &[2.0, 4.0]).unwrap();
    assert_eq!(tape.scalar_value(l).unwrap(), 0.0);
    let preds = tape.constant_vector(&[1.0, 2.0]);
    let l = rec_loss(&mut tape, preds, &[2.0, 4.0]).unwrap();
    assert!((tape.scalar_value(l).unwrap() - 2.5).abs() < 1e-15);
    // constant offset c -> c^2
    let offset = tape.constant_vector(&[2.7, 4.7, 1.7]);
    let l = rec_loss(&mut tape, offset, &[2.0, 4.0, 1.0]).unwrap();
    assert!((tape.scalar_value(l).unwrap() - 0.49).abs() < 1e-12);
    // empty and mismatched inputs rejected
    assert!(rec_loss(&mut tape, preds, &[]).is_err());
    assert!(rec_loss(&mut tape, preds, &[1.0]).is_err());
}

fn const_latent(tape: &mut Tape, mu: &[f64], sigma: &[f64]) -> LatentNodes {
    LatentNodes {
        mu: tape.constant_vector(mu),
        sigma: tape.constant_vector(sigma),
    }
}

#[test]
fn kl_zero_for_identical_densities_at_the_mean() {
    let mut tape = Tape::new();
    let mu = [0.3, -0.7, 1.1];
    let sigma = [0.5, 0.8, 0.2];
    let q = const_latent(&mut tape, &mu, &sigma);
    let p = const_latent(&mut tape, &mu, &sigma);
    let z0 = tape.constant_vector(&mu);
    let flow = FlowResult {
        z: z0,
        sum_log_det: tape.constant_scalar(0.0),
    };
    let kl = kl_loss(&mut tape, q, z0, &flow, p).unwrap();
    assert!(tape.scalar_value(kl).unwrap().abs() < 1e-14);
}

fn plain_log_gauss(x: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    x.iter()
        .zip(mu)
        .zip(sigma)
        .map(|((&x, &m), &s)| -0.5 * LN_2PI - s.ln() - 0.5 * ((x - m) / s).powi(2))
        .sum()
}

#[test]
fn kl_node_matches_plain_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let d = 4;
        let draw = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| -> Vec<f64> {
            (0..d).map(|_| rng.gen_range(lo..hi)).collect()
        };
        let mu_q = draw(&mut rng, -1.0, 1.0);
        let sg_q = draw(&mut rng, 0.2, 1.0);
        let mu_p = draw(&mut rng, -1.0, 1.0);
        let sg_p = draw(&mut rng, 0.2, 1.0);
        let z: Vec<f64> = draw(&mut rng, -2.0, 2.0);
        let sld = rng.gen_range(-0.5..0.5);
        let mut tape = Tape::new();
        let q = const_latent(&mut tape, &mu_q, &sg_q);
        let p = const_latent(&mut tape, &mu_p, &sg_p);
        let z0 = tape.constant_vector(&z);
        let flow = FlowResult {
            z: z0,
            sum_log_det: tape.constant_scalar(sld),
        };
        let kl = kl_loss(&mut tape, q, z0, &flow, p).unwrap();
        let expect = plain_log_gauss(&z, &mu_q, &sg_q) - sld - plain_log_gauss(&z, &mu_p, &sg_p);
        assert!((tape.scalar_value(kl).unwrap() - expect).abs() < 1e-12);
    }
}

#[test]
fn kl_single_sample_estimator_is_calibrated() {
    // average of log q(z0) - log p(z0) over resampled z0 approaches the
    // analytic diagonal-Gaussian KL within Monte Carlo error
    let mu_q: [f64; 4] = [0.4, -0.2, 0.9, -1.1];
    let sg_q: [f64; 4] = [0.5, 0.7, 0.3, 0.9];
    let mu_p: [f64; 4] = [0.0, 0.3, 0.5, -0.5];
    let sg_p: [f64; 4] = [0.8, 0.5, 0.6, 1.1];
    let analytic: f64 = (0..4)
        .map(|j| {
            (sg_p[j] / sg_q[j]).ln()
                + (sg_q[j].powi(2) + (mu_q[j] - mu_p[j]).powi(2)) / (2.0 * sg_p[j].powi(2))
                - 0.5
        })
        .sum();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 20_000usize;
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..n {
        let z: Vec<f64> = (0..4)
            .map(|j| mu_q[j] + sg_q[j] * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let v = plain_log_gauss(&z, &mu_q, &sg_q) - plain_log_gauss(&z, &mu_p, &sg_p);
        sum += v;
        sumsq += v * v;
    }
    let mean = sum / n as f64;
    let var = (sumsq / n as f64 - mean * mean).max(0.0);
    let se = (var / n as f64).sqrt();
    assert!(
        (mean - analytic).abs() <= 3.0 * se,
        "mean {mean}, analytic {analytic}, se {se}"
    );
}

#[test]
fn total_loss_aggregation() {
    // single task: total = rec + kl + lambda*cluster
    let one = total_loss(&[(1.0, 0.5)], 2.0, 0.3).unwrap();
    assert!((one.total - (1.5 + 0.6)).abs() < 1e-15);
    // lambda = 0 drops the cluster term
    let no_c = total_loss(&[(1.0, 0.5)], 2.0, 0.0).unwrap();
    assert!((no_c.total - 1.5).abs() < 1e-15);
    // two identical tasks average to the same total as one
    let two = total_loss(&[(1.0, 0.5), (1.0, 0.5)], 2.0, 0.3).unwrap();
    assert!((two.total - one.total).abs() < 1e-15);
    // linearity in lambda: total(l) - total(0) = l * cluster
    for l in [0.1, 0.5, 1.0] {
        let t = total_loss(&[(1.0, 0.5), (0.2, 0.1)], 2.0, l).unwrap();
        let t0 = total_loss(&[(1.0, 0.5), (0.2, 0.1)], 2.0, 0.0).unwrap();
        assert!((t.total - t0.total - l * 2.0).abs() < 1e-12);
    }
    assert!(total_loss(&[], 0.0, 0.3).is_err());
}

// ── gradient correctness over the full model ────────────────────────

#[test]
fn full_model_gradients_pass_grad_check() {
    let config = ModelConfig::tiny();
    let (model, tasks) = fixture(config.clone(), 42);
    let batch: Vec<Task> = tasks[..2].to_vec();
    let cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let eps = draw_noise(&mut rng, batch.len(), config.d2);
    // freeze the clustering targets exactly as one optimizer step does
    let frozen = {
        let mut tape = Tape::new();
        let mut rows = Vec::new();
        for task in &batch {
            let e = identity_network(&mut tape, &model, &task.support).unwrap();
            let m = soft_assign(&mut tape, &model, e).unwrap();
            rows.push(tape.values(m).to_vec());
        }
        auxiliary_distribution(&rows).unwrap()
    };
    let id_maps = model.id_maps.clone();
    let mut params = model.params.clone();
    // 1e-4 balances central-difference truncation against f64 cancellation
    // over this many-node graph
    let err = grad_check(&mut params, 1e-4, |p, g| {
        let m = Model {
            config: config.clone(),
            id_maps: id_maps.clone(),
            params: std::mem::replace(p, ParamSet::new()),
        };
        let mut tape = Tape::new();
        let graph = build_batch_graph(&mut tape, &m, &batch, &cfg, &eps, Some(&frozen))?;
        let mut m = m;
        if g {
            tape.backward(graph.total, &mut m.params)?;
        }
        let v = tape.scalar_value(graph.total)?;
        *p = m.params;
        Ok(v)
    })
    .unwrap();
    assert!(err <= 1e-4, "max relative gradient error {err}");
}

// ── training loop ───────────────────────────────────────────────────

#[test]
fn training_reduces_reconstruction_loss() {
    let (mut model, tasks) = fixture(ModelConfig::tiny(), 3);
    let cfg = TrainConfig {
        epochs: 5,
        ..small_cfg()
    };
    let logs = train(&mut model, &tasks, &cfg, |_| {}).unwrap();
    assert!(logs.len() >= 2);
    assert!(
        logs.last().unwrap().loss_rec < logs[0].loss_rec,
        "rec {} -> {}",
        logs[0].loss_rec,
        logs.last().unwrap().loss_rec
    );
}

#[test]
fn fixed_seed_reruns_reproduce_the_first_epoch_log() {
    let cfg = small_cfg();
    let run = || {
        let (mut model, tasks) = fixture(ModelConfig::tiny(), 3);
        let logs = train(&mut model, &tasks, &cfg, |_| {}).unwrap();
        serde_json::to_string(&logs[0]).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn breakdown_invariant_holds_per_step() {
    let (mut model, tasks) = fixture(ModelConfig::tiny(), 4);
    let cfg = TrainConfig::default();
    let mut adam = AdamState::new(AdamConfig::default(), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let b = train_step(&mut model, &tasks, &cfg, &mut adam, &mut rng).unwrap();
    assert!((b.total - (b.rec + b.kl + cfg.lambda * b.cluster)).abs() < 1e-10);
    assert!(b.rec.is_finite() && b.kl.is_finite() && b.cluster.is_finite());
}

#[test]
fn no_flow_flag_equals_zero_step_stack() {
    let mut config = ModelConfig::tiny();
    config.flow_steps = 0;
    let (mut m1, tasks) = fixture(config.clone(), 6);
    let mut m2 = m1.clone();
    let mut c_on = TrainConfig::default();
    c_on.no_flow = true;
    let c_off = TrainConfig::default();
    let mut a1 = AdamState::new(AdamConfig::default(), &m1.params);
    let mut a2 = AdamState::new(AdamConfig::default(), &m2.params);
    let mut r1 = ChaCha8Rng::seed_from_u64(9);
    let mut r2 = ChaCha8Rng::seed_from_u64(9);
    let b1 = train_step(&mut m1, &tasks, &c_on, &mut a1, &mut r1).unwrap();
    let b2 = train_step(&mut m2, &tasks, &c_off, &mut a2, &mut r2).unwrap();
    assert_eq!(b1.total, b2.total);
    for (x, y) in m1.params.iter().zip(m2.params.iter()) {
        assert_eq!(x.value.values(), y.value.values(), "{}", x.name);
    }
}

#[test]
fn planar_zero_steps_initializes_like_no_flow_family() {
    let mut planar0 = ModelConfig::tiny();
    planar0.flow_steps = 0;
    let mut none = ModelConfig::tiny();
    none.flow_family = FlowFamily::None;
    none.flow_steps = 6; // ignored for the trivial family
    let (mp, _) = fixture(planar0, 11);
    let (mn, _) = fixture(none, 11);
    assert_eq!(mp.params.len(), mn.params.len());
    for (a, b) in mp.params.iter().zip(mn.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value.values(), b.value.values());
    }
}

#[test]
fn no_pool_drops_the_cluster_term_only() {
    let (mut model, tasks) = fixture(ModelConfig::tiny(), 12);
    let mut cfg = TrainConfig::default();
    cfg.no_pool = true;
    let mut adam = AdamState::new(AdamConfig::default(), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let b = train_step(&mut model, &tasks, &cfg, &mut adam, &mut rng).unwrap();
    assert_eq!(b.cluster, 0.0);
    assert!((b.total - (b.rec + b.kl)).abs() < 1e-12);
    // centroids receive no gradient signal when the pool is ablated
    let before = model.params.by_name("pool.centroids").unwrap().value.clone();
    let (m2, _) = fixture(ModelConfig::tiny(), 12);
    let init = m2.params.by_name("pool.centroids").unwrap().value.clone();
    assert_eq!(before.values(), init.values());
}

#[test]
fn ablation_flags_change_only_the_stated_computation() {
    // On a zero-step model, rec/kl are identical with and without no_flow;
    // no_film changes only the decoder path, so kl must agree with the full
    // model under the same noise.
    let (model, tasks) = fixture(ModelConfig::tiny(), 14);
    let batch = &tasks[..2];
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let eps = draw_noise(&mut rng, batch.len(), model.config.d2);
    let run = |cfg: &TrainConfig| {
        let mut tape = Tape::new();
        let g = build_batch_graph(&mut tape, &model, batch, cfg, &eps, None).unwrap();
        (
            tape.scalar_value(g.rec_mean).unwrap(),
            tape.scalar_value(g.kl_mean).unwrap(),
        )
    };
    let full = run(&TrainConfig::default());
    let mut film_off = TrainConfig::default();
    film_off.no_film = true;
    let ablated = run(&film_off);
    assert_eq!(full.1, ablated.1, "kl must not depend on the film flag");
    assert_ne!(full.0, ablated.0, "decoder output must change");
}

// ── evaluation ──────────────────────────────────────────────────────

#[test]
fn evaluate_is_read_only_and_deterministic() {
    let (model, tasks) = fixture(ModelConfig::tiny(), 16);
    let cfg = TrainConfig::default();
    let before: Vec<Vec<f64>> = model.params.iter().map(|b| b.value.values().to_vec()).collect();
    let r1 = evaluate(&model, &tasks, &cfg, 1, 99).unwrap();
    let r2 = evaluate(&model, &tasks, &cfg, 1, 99).unwrap();
    assert_eq!(
        serde_json::to_string(&r1).unwrap(),
        serde_json::to_string(&r2).unwrap()
    );
    let after: Vec<Vec<f64>> = model.params.iter().map(|b| b.value.values().to_vec()).collect();
    assert_eq!(before, after);
    assert!(r1.rmse >= r1.mae);
    assert!(r1.mae >= 0.0);
    assert_eq!(r1.n_tasks, 8);
    assert_eq!(r1.n_pairs, 48);
    assert!(r1.per_task_mae_min <= r1.per_task_mae_median);
    assert!(r1.per_task_mae_median <= r1.per_task_mae_max);
}

#[test]
fn evaluate_averages_prior_samples() {
    let (mut model, tasks) = fixture(ModelConfig::tiny(), 17);
    // center raw predictions inside the rating range so the clamp does not
    // flatten the sample-to-sample variation
    model.params.by_name_mut("dec.head.b0").unwrap().value.fill(3.0);
    let cfg = TrainConfig::default();
    let r1 = evaluate(&model, &tasks, &cfg, 1, 5).unwrap();
    let r8 = evaluate(&model, &tasks, &cfg, 8, 5).unwrap();
    assert!(r8.mae.is_finite());
    assert_ne!(r1.mae, r8.mae);
}

#[test]
fn constant_predictor_scores_hand_metrics() {
    // zero decoder weights and a head bias of 3 make every prediction 3
    let (mut model, tasks) = fixture(ModelConfig::tiny(), 18);
    for l in 0..model.config.decoder_layers {
        model.params.by_name_mut(&format!("dec.l{l}.w0")).unwrap().value.fill(0.0);
        model.params.by_name_mut(&format!("dec.l{l}.b0")).unwrap().value.fill(0.0);
    }
    model.params.by_name_mut("dec.head.w0").unwrap().value.fill(0.0);
    model.params.by_name_mut("dec.head.b0").unwrap().value.fill(3.0);
    let mut cfg = TrainConfig::default();
    cfg.no_film = true; // keep the zeroed stack unmodulated
    let r = evaluate(&model, &tasks, &cfg, 1, 0).unwrap();
    // ratings are uniform over {1..5}; |3 - y| averages 6/5 over each block
    let expect_mae = tasks
        .iter()
        .flat_map(|t| t.query.iter())
        .map(|q| (3.0 - q.rating as f64).abs())
        .sum::<f64>()
        / 48.0;
    let expect_rmse = (tasks
        .iter()
        .flat_map(|t| t.query.iter())
        .map(|q| (3.0 - q.rating as f64).powi(2))
        .sum::<f64>()
        / 48.0)
        .sqrt();
    assert!((r.mae - expect_mae).abs() < 1e-12);
    assert!((r.rmse - expect_rmse).abs() < 1e-12);
}

#[test]
fn evaluate_rejects_empty_queries() {
    let (model, tasks) = fixture(ModelConfig::tiny(), 19);
    let cfg = TrainConfig::default();
    let stripped: Vec<Task> = tasks
        .iter()
        .map(|t| Task {
            user_id: t.user_id.clone(),
            support: t.support.clone(),
            query: Vec::new(),
        })
        .collect();
    assert!(evaluate(&model, &stripped, &cfg, 1, 0).is_err());
}

// ── entropy ─────────────────────────────────────────────────────────

#[test]
fn gaussian_entropy_doubles_scale_adds_d_ln2() {
    let sigma = [0.3, 0.8, 0.5, 1.2];
    let doubled: Vec<f64> = sigma.iter().map(|s| 2.0 * s).collect();
    let delta = gaussian_entropy(&doubled) - gaussian_entropy(&sigma);
    assert!((delta - 4.0 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn zero_step_entropy_estimate_matches_analytic() {
    let mut config = ModelConfig::tiny();
    config.flow_steps = 0;
    let (model, tasks) = fixture(config, 20);
    let cfg = TrainConfig::default();
    let (h0, hk) = estimate_entropy(&model, &tasks[..4], &cfg, 5000, 21).unwrap();
    // with an identity flow the estimator targets exactly H(z0);
    // MC standard error ~ sqrt(d/2/n) ≈ 0.03
    assert!((hk - h0).abs() < 0.1, "h0 {h0}, hk {hk}");
}

#[test]
fn volume_preserving_coupling_keeps_entropy() {
    let mut config = ModelConfig::tiny();
    config.flow_family = FlowFamily::Coupling;
    config.flow_steps = 2;
    let (mut model, tasks) = fixture(config, 22);
    // zero the conditioner nets: the step becomes the identity map
    for block in model.params.iter_mut() {
        if block.name.starts_with("flow.") {
            block.value.fill(0.0);
        }
    }
    let cfg = TrainConfig::default();
    let (h0, hk) = estimate_entropy(&model, &tasks[..4], &cfg, 5000, 23).unwrap();
    assert!((hk - h0).abs() < 0.1, "h0 {h0}, hk {hk}");
}

#[test]
fn entropy_estimation_needs_enough_samples() {
    let (model, tasks) = fixture(ModelConfig::tiny(), 24);
    let cfg = TrainConfig::default();
    assert!(estimate_entropy(&model, &tasks, &cfg, 99, 0).is_err());
}

// ── checkpointing ───────────────────────────────────────────────────

fn temp_path(name: &str) -> PathBuf {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(name);
    // keep the directory alive for the test's duration by leaking it;
    // the OS cleans the tempdir root eventually
    std::mem::forget(dir);
    path
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (model, tasks) = fixture(ModelConfig::tiny(), 25);
    let cfg = TrainConfig::default();
    let path = temp_path("model.ckpt");
    save_checkpoint(&model, &cfg, &path).unwrap();
    let (loaded, cfg2) = load_checkpoint(&path).unwrap();
    assert_eq!(cfg, cfg2);
    for (a, b) in model.params.iter().zip(loaded.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value.values(), b.value.values());
    }
    let r1 = evaluate(&model, &tasks, &cfg, 1, 7).unwrap();
    let r2 = evaluate(&loaded, &tasks, &cfg, 1, 7).unwrap();
    assert_eq!(r1.mae, r2.mae);
    assert_eq!(r1.rmse, r2.rmse);
}

#[test]
fn checkpoint_rejects_corruption() {
    let (model, _) = fixture(ModelConfig::tiny(), 26);
    let cfg = TrainConfig::default();
    let path = temp_path("model.ckpt");
    save_checkpoint(&model, &cfg, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    // truncated payload
    let cut = temp_path("cut.ckpt");
    std::fs::write(&cut, &text[..text.len() / 2]).unwrap();
    assert!(load_checkpoint(&cut).is_err());
    // magic mismatch
    let bad = temp_path("bad.ckpt");
    std::fs::write(&bad, text.replacen("v1", "v9", 1)).unwrap();
    let err = load_checkpoint(&bad).unwrap_err().to_string();
    assert!(err.contains("magic"), "{err}");
    // stored shapes clash with a tampered width
    let mismatched = temp_path("wrong.ckpt");
    std::fs::write(&mismatched, text.replacen("\"d1\":4", "\"d1\":5", 1)).unwrap();
    let err = load_checkpoint(&mismatched).unwrap_err().to_string();
    assert!(err.contains("shape"), "{err}");
}

#[test]
fn checkpoint_refuses_non_finite_parameters() {
    let (mut model, _) = fixture(ModelConfig::tiny(), 27);
    model.params.by_name_mut("emb.user").unwrap().value.values_mut()[0] = f64::NAN;
    let path = temp_path("nan.ckpt");
    let err = save_checkpoint(&model, &TrainConfig::default(), &path).unwrap_err();
    assert!(err.to_string().contains("emb.user"));
}

#[test]
fn config_validation_rejects_bad_values() {
    let mut cfg = TrainConfig::default();
    cfg.lambda = 1.5;
    assert!(cfg.validate().is_err());
    let mut cfg = TrainConfig::default();
    cfg.batch_size = 0;
    assert!(cfg.validate().is_err());
    let mut cfg = TrainConfig::default();
    cfg.holdout = 1.0;
    assert!(cfg.validate().is_err());
    assert!(TrainConfig::default().validate().is_ok());
}
