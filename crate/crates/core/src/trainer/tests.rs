use super::*;
use crate::env::{ArmModel, TaskKind};
use crate::nets::NetConfig;
use crate::replay::ContextWindow;

fn tiny_net() -> NetConfig {
    NetConfig {
        d_model: 8,
        heads: 2,
        ff_hidden: 8,
        fc_hidden: 8,
        output_scale: 0.5,
    }
}

fn tiny(variant: Variant) -> TrainConfig {
    let mut cfg = TrainConfig::for_variant(variant);
    cfg.epochs = 1;
    cfg.cycles = 1;
    cfg.episodes = 2;
    cfg.updates = 2;
    cfg.batch_size = 8;
    cfg.validation_episodes = 2;
    cfg.net = tiny_net();
    cfg.task.episode_len = 10;
    cfg
}

fn params_bits(params: &[(String, Tensor)]) -> Vec<u64> {
    params.iter().flat_map(|(_, t)| t.to_vec()).map(f64::to_bits).collect()
}

/// Random batch of `n` windows for a planar 2-joint Reach learner.
fn random_batch(cfg: &TrainConfig, n: usize, seed: u64) -> SampledBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs_dim = crate::env::Observation::dim(2);
    let mut v = |len: usize| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let windows = (0..n)
        .map(|i| {
            let steps = (0..cfg.window_len())
                .map(|_| StepRecord {
                    obs: v(obs_dim),
                    goal: v(3),
                    achieved_goal: v(3),
                    action: v(2),
                })
                .collect();
            ContextWindow {
                episode: 0,
                anchor: i,
                indices: (0..cfg.window_len()).collect(),
                steps,
                next_obs: v(obs_dim),
                next_goal: v(3),
                next_achieved_goal: v(3),
                relabeled: false,
                reward: Some(if i % 3 == 0 { 0.0 } else { -1.0 }),
            }
        })
        .collect();
    SampledBatch { windows, her_count: 0 }
}

fn learner(cfg: &TrainConfig, seed: u64) -> Learner {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Learner::new(cfg, crate::env::Observation::dim(2) + 3, 2, &mut rng).unwrap()
}

#[test]
fn target_matches_hand_value() {
    let cfg = tiny(Variant::ContherV1);
    let l = learner(&cfg, 1);
    for (i, q) in [-5.0, -3.0].into_iter().enumerate() {
        let last = &l.target_critic.heads[i].layers[2];
        last.weight.with_data_mut(|d| d.fill(0.0));
        last.bias.set_data(vec![q]).unwrap();
    }
    let mut batch = random_batch(&cfg, 4, 2);
    for w in &mut batch.windows {
        w.reward = Some(-1.0);
    }
    let b = BatchTensors::from_batch(&batch).unwrap();
    let y = critic_targets(&l, &b, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for v in y {
        assert!((v - -5.9).abs() < 1e-12, "{v}");
    }
}

#[test]
fn target_uses_min_of_heads_at_next_window() {
    let cfg = tiny(Variant::ContherV0);
    let l = learner(&cfg, 3);
    let batch = random_batch(&cfg, 6, 4);
    let b = BatchTensors::from_batch(&batch).unwrap();
    let y = critic_targets(&l, &b, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for (i, w) in batch.windows.iter().enumerate() {
        // one window at a time, rows built by hand
        let mut rows: Vec<Vec<f64>> = w.steps[1..].iter().map(|s| [s.obs.clone(), s.goal.clone()].concat()).collect();
        rows.push([w.next_obs.clone(), w.next_goal.clone()].concat());
        let x = Tensor::from_rows(&rows).unwrap();
        let a = no_grad(|| l.target_actor.forward(&x)).unwrap();
        let (q1, q2) = no_grad(|| l.target_critic.forward(&x, &a)).unwrap();
        let expect = w.reward.unwrap() + cfg.gamma * q1.item().min(q2.item());
        assert!((y[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn actor_updates_every_w_critic_updates() {
    for w in [1usize, 2, 3] {
        let mut cfg = tiny(Variant::ContherV1);
        cfg.actor_delay = w;
        let mut l = learner(&cfg, 5);
        let batch = random_batch(&cfg, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in 1..=9u64 {
            let losses = update_step(&mut l, &batch, &cfg, t, &mut rng).unwrap();
            assert_eq!(losses.actor.is_some(), t % w as u64 == 0, "t={t} w={w}");
        }
    }
}

#[test]
fn critic_and_actor_steps_leave_each_other_untouched() {
    let cfg = tiny(Variant::ContherV1);
    let mut l = learner(&cfg, 7);
    let batch = random_batch(&cfg, 8, 8);
    let b = BatchTensors::from_batch(&batch).unwrap();
    let y = critic_targets(&l, &b, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();

    let actor_before = params_bits(&l.actor.params());
    let critic_before = params_bits(&l.critic.params());
    critic_step(&mut l, &b, &y, 1).unwrap();
    assert_eq!(params_bits(&l.actor.params()), actor_before);
    assert_ne!(params_bits(&l.critic.params()), critic_before);

    let critic_before = params_bits(&l.critic.params());
    actor_step(&mut l, &b, cfg.alpha, 2).unwrap();
    assert_eq!(params_bits(&l.critic.params()), critic_before);
    assert_ne!(params_bits(&l.actor.params()), actor_before);
    assert!(l.critic.params().iter().all(|(_, t)| t.grad().is_none_or(|g| g.iter().all(|v| *v == 0.0))));
}

#[test]
fn soft_update_interpolates_exactly() {
    let cfg = tiny(Variant::Td3);
    let mut l = learner(&cfg, 9);
    let batch = random_batch(&cfg, 4, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    update_step(&mut l, &batch, &cfg, 2, &mut rng).unwrap();
    let online: Vec<f64> = l.actor.params().iter().flat_map(|(_, t)| t.to_vec()).collect();
    let target: Vec<f64> = l.target_actor.params().iter().flat_map(|(_, t)| t.to_vec()).collect();
    assert_ne!(online, target);
    let tau = 0.3;
    l.soft_update(tau).unwrap();
    let after: Vec<f64> = l.target_actor.params().iter().flat_map(|(_, t)| t.to_vec()).collect();
    for ((a, o), t) in after.iter().zip(&online).zip(&target) {
        assert_eq!(a.to_bits(), (tau * o + (1.0 - tau) * t).to_bits());
    }
}

#[test]
fn action_penalty_shrinks_actions() {
    let mean_norm = |alpha: f64| {
        let cfg = tiny(Variant::ContherV1);
        let mut l = learner(&cfg, 11);
        let batch = random_batch(&cfg, 16, 12);
        let b = BatchTensors::from_batch(&batch).unwrap();
        for t in 0..200 {
            actor_step(&mut l, &b, alpha, t).unwrap();
        }
        let mu = no_grad(|| l.actor.forward(&b.windows)).unwrap().to_vec();
        mu.chunks(2).map(|a| (a[0] * a[0] + a[1] * a[1]).sqrt()).sum::<f64>() / 16.0
    };
    let (big, none) = (mean_norm(1e3), mean_norm(0.0));
    assert!(big < none, "{big} vs {none}");
}

#[test]
fn zero_actor_without_noise_keeps_arm_still() {
    let cfg = tiny(Variant::ContherV1);
    let l = learner(&cfg, 13);
    l.actor.fc.layers[2].zero();
    let task = TaskSpec::reach();
    let mut env = Env::new(ArmModel::planar(2).unwrap(), task.clone()).unwrap();
    let ep = run_episode(&l.actor, &mut env, &task, 0.0, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(ep.rewards.len(), task.episode_len);
    assert_eq!(ep.records.len(), task.episode_len + 1);
    assert!(ep.records.iter().all(|r| r.action.iter().all(|a| *a == 0.0)));
    assert!(ep.records.windows(2).all(|p| p[0].obs == p[1].obs));
}

#[test]
fn stored_goals_follow_the_environment_schedule() {
    let mut cfg = tiny(Variant::ContherV1);
    cfg.task = TaskSpec::trajectory(TaskKind::TrajSinusoid, 6);
    let arm = ArmModel::planar(2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dim = crate::env::Observation::dim(2) + cfg.task.goal_dim();
    let l = Learner::new(&cfg, dim, 2, &mut rng).unwrap();
    let mut env = Env::new(arm.clone(), cfg.task.clone()).unwrap();
    let ep = run_episode(&l.actor, &mut env, &cfg.task, 0.3, 21, &mut rng).unwrap();

    // replay the recorded actions on a fresh env
    let mut oracle = Env::new(arm, cfg.task.clone()).unwrap();
    let mut out = oracle.reset(21).unwrap();
    for r in &ep.records[..cfg.task.episode_len] {
        assert_eq!(r.goal, out.goal);
        out = oracle.step(&r.action).unwrap();
    }
    assert_eq!(ep.records.last().unwrap().goal, out.goal);
    let period = cfg.task.update_period;
    assert_eq!(period, 3);
    for (t, p) in ep.records.windows(2).enumerate() {
        if (t + 1) % period != 0 {
            assert_eq!(p[0].goal, p[1].goal, "goal moved between steps {t} and {}", t + 1);
        }
    }
}

#[test]
fn validation_extremes() {
    let cfg = tiny(Variant::ContherV1);
    let l = learner(&cfg, 15);
    let arm = ArmModel::planar(2).unwrap();
    let mut everywhere = TaskSpec::reach();
    everywhere.goal_threshold = 100.0;
    let mut env = Env::new(arm.clone(), everywhere.clone()).unwrap();
    assert_eq!(validate(&l.actor, &mut env, &everywhere, &[1, 2, 3]).unwrap(), (0.0, 1.0));
    let mut nowhere = TaskSpec::reach();
    nowhere.goal_threshold = 1e-9;
    let mut env = Env::new(arm, nowhere.clone()).unwrap();
    assert_eq!(validate(&l.actor, &mut env, &nowhere, &[1, 2, 3]).unwrap(), (-1.0, 0.0));
    assert!(validate(&l.actor, &mut env, &nowhere, &[]).is_err());
}

#[test]
fn bookkeeping_of_a_tiny_run() {
    let dir = tempfile::tempdir().unwrap();
    let m = train(&tiny(Variant::ContherV1), Some(dir.path())).unwrap();
    assert_eq!(m.updates.len(), 2);
    assert_eq!(m.updates.iter().filter(|u| u.actor_loss.is_some()).count(), 1);
    assert_eq!(m.epochs.len(), 1);
    assert!((0.0..=1.0).contains(&m.epochs[0].success_rate));
    let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines.iter().filter(|l| l.get("critic_loss").is_some()).count(), 2);
    assert_eq!(lines.iter().filter(|l| l.get("success_rate").is_some()).count(), 1);
    for name in ["actor", "critic", "target_actor", "target_critic"] {
        assert!(dir.path().join(CHECKPOINT_DIR).join(format!("{name}.ckpt")).exists());
    }
}

#[test]
fn runs_are_deterministic_for_every_variant() {
    for v in Variant::ALL {
        let mut cfg = tiny(v);
        cfg.task = if v == Variant::Td3 { TaskSpec::reach() } else { TaskSpec::trajectory(TaskKind::TrajCircle, 6) };
        cfg.task.episode_len = 10;
        cfg.epochs = 2;
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        train(&cfg, Some(a.path())).unwrap();
        train(&cfg, Some(b.path())).unwrap();
        let read = |d: &Path| fs::read(d.join(METRICS_FILE)).unwrap();
        assert_eq!(read(a.path()), read(b.path()), "{v}");
        let ckpt = |d: &Path| fs::read(d.join(CHECKPOINT_DIR).join("actor.ckpt")).unwrap();
        assert_eq!(ckpt(a.path()), ckpt(b.path()), "{v}");
    }
}

#[test]
fn divergence_aborts_with_the_batch_on_disk() {
    let mut cfg = tiny(Variant::Td3);
    cfg.critic_lr = 1e300;
    cfg.updates = 20;
    let dir = tempfile::tempdir().unwrap();
    let err = train(&cfg, Some(dir.path())).unwrap_err();
    let TrainError::Aborted { path, .. } = &err else {
        panic!("unexpected error {err}");
    };
    let doc: serde_json::Value = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
    assert_eq!(doc["windows"].as_array().unwrap().len(), cfg.batch_size);
    // updates before the failure were flushed
    let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert!(!text.is_empty());
}
