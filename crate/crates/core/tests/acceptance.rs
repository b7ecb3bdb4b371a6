//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any fails.
//!
//! `CONTHER_ACCEPT_QUICK=1` skips the two training-based criteria.

use std::collections::BTreeSet;
use std::net::TcpListener;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use conther_core::env::{
    reward_obstacle_task, reward_reach, serve_env, ArmModel, Env, Environment, Observation, RemoteEnv, ScriptedTracker, TaskKind, TaskSpec,
};
use conther_core::ndnum::{finite_diff_check, NdError, Tensor};
use conther_core::nets::{ActorNet, CriticNet, NetConfig, NetError, NetVariant};
use conther_core::replay::{sample_training_batch, ContextWindow, MainBuffer, Relabel, SampledBatch, StepRecord};
use conther_core::trainer::{critic_targets, train, update_step, BatchTensors, Learner, RunMetrics, TrainConfig, Variant, METRICS_FILE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- gradients

fn nd(e: NetError) -> NdError {
    match e {
        NetError::Nd(e) => e,
        other => panic!("{other}"),
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let cfg = NetConfig {
        d_model: 8,
        heads: 2,
        ff_hidden: 8,
        fc_hidden: 8,
        output_scale: 0.5,
    };
    let (input, len, joints) = (7, 3, 2);
    let mut worst = 0.0_f64;
    let mut instances = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..2 * len).map(|_| (0..input).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        for variant in [NetVariant::V0, NetVariant::V1] {
            let actor = ActorNet::new(input, len, joints, variant, &cfg, &mut rng).unwrap();
            let params: Vec<Tensor> = actor.params().into_iter().map(|(_, t)| t).collect();
            let err = finite_diff_check(|_| actor.forward(&x).map_err(nd).map(|a| a.square().sum()), &params, 1e-6, Some(60), &mut rng).unwrap();
            worst = worst.max(err);

            let critic = CriticNet::new(input, len, joints, variant, &cfg, &mut rng).unwrap();
            let a = Tensor::param(&[2, joints], (0..2 * joints).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let mut params: Vec<Tensor> = critic.params().into_iter().map(|(_, t)| t).collect();
            params.push(a.clone());
            let err = finite_diff_check(
                |_| {
                    let (q1, q2) = critic.forward(&x, &a).map_err(nd)?;
                    q1.minimum(&q2)?.sum().add(&q2.square().mean())
                },
                &params,
                1e-6,
                Some(60),
                &mut rng,
            )
            .unwrap();
            worst = worst.max(err);
            instances += 2;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst < 1e-4 && secs < 60.0, format!("{instances} instances, max rel err {worst:.2e} (< 1e-4), {secs:.1}s (< 60s)"))
}

// ---------------------------------------------------------------- HER

fn step(episode: usize, t: usize) -> StepRecord {
    let tag = (100 * episode + t) as f64;
    StepRecord {
        obs: vec![tag, -tag],
        goal: vec![9.0, 9.0, 9.0],
        achieved_goal: vec![tag, 0.5 * tag, 1.0],
        action: vec![0.1 * tag],
    }
}

fn her_oracle() -> Outcome {
    let start = Instant::now();
    let lengths = [4usize, 7, 2];
    let mut buffer = MainBuffer::new(10);
    for (e, &n) in lengths.iter().enumerate() {
        buffer.store_episode((0..n).map(|t| step(e, t)).collect()).unwrap();
    }
    let task = TaskSpec::reach();
    let mut mismatches = Vec::new();
    let mut nonzero = 0;
    for k in [0usize, 1, 3, 6] {
        // every anchor with a successor, front-padded with step 0
        let expected: BTreeSet<(usize, Vec<usize>)> = lengths
            .iter()
            .enumerate()
            .flat_map(|(e, &n)| {
                (0..n - 1).map(move |a| {
                    let idx = (0..=k).map(|i| if a + i >= k { a + i - k } else { 0 }).collect();
                    (e, idx)
                })
            })
            .collect();
        let mut seen = BTreeSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        for _ in 0..300 {
            let batch = sample_training_batch(&buffer, 16, k, 0.5, &task, &Relabel::default(), &mut rng).unwrap();
            for w in &batch.windows {
                let ep = &lengths[w.episode];
                assert!(w.anchor + 1 < *ep);
                for (row, &i) in w.steps.iter().zip(&w.indices) {
                    assert_eq!(row.obs, step(w.episode, i).obs);
                }
                if w.relabeled && w.reward != Some(0.0) {
                    nonzero += 1;
                }
                seen.insert((w.episode, w.indices.clone()));
            }
        }
        if seen != expected {
            mismatches.push(k);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        mismatches.is_empty() && nonzero == 0 && secs < 10.0,
        format!("support mismatches for K in {mismatches:?}, {nonzero} relabeled windows with non-zero reward, {secs:.2}s (< 10s)"),
    )
}

// ---------------------------------------------------------------- rewards

/// Distances just below, at and just above each threshold.
fn straddle(thresholds: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0, 1.0, 10.0];
    for &t in thresholds {
        for d in [-1e-3, -1e-9, 0.0, 1e-9, 1e-3] {
            v.push(t + d);
        }
        v.push(f64::from_bits(t.to_bits() - 1));
        v.push(f64::from_bits(t.to_bits() + 1));
    }
    v
}

fn reward_tables() -> Outcome {
    let mut cases = 0;
    let mut bad = Vec::new();
    for d in straddle(&[0.1]) {
        let expect = if d > 0.1 { -1.0 } else { 0.0 };
        cases += 1;
        if reward_reach(d, 0.1) != expect {
            bad.push(format!("reach d={d}"));
        }
    }
    let (d_g, d_o) = (0.09, 0.05);
    let grid = straddle(&[d_g, d_o]);
    for &dg in &grid {
        for &o1 in &grid {
            for &o2 in &grid {
                for o3 in [0.3, 0.049, 0.05] {
                    let goal_term = if dg > d_g { -1.0 } else { 0.0 };
                    let hit = [o1, o2, o3].iter().filter(|&&o| o < d_o).count();
                    let obstacle_term = if hit > 0 { -1.0 } else { 0.0 };
                    let expect = 0.5 * (goal_term + obstacle_term);
                    cases += 1;
                    if reward_obstacle_task(dg, &[o1, o2, o3], d_g, d_o) != expect {
                        bad.push(format!("obstacle dg={dg} o=({o1},{o2},{o3})"));
                    }
                }
            }
        }
    }
    check(bad.is_empty(), format!("{cases} grid points, {} mismatches {:?}", bad.len(), bad.iter().take(3).collect::<Vec<_>>()))
}

// ---------------------------------------------------------------- TD3

fn tiny_cfg() -> TrainConfig {
    let mut cfg = TrainConfig::for_variant(Variant::ContherV1);
    cfg.net = NetConfig {
        d_model: 8,
        heads: 2,
        ff_hidden: 8,
        fc_hidden: 8,
        output_scale: 0.5,
    };
    cfg
}

fn random_batch(cfg: &TrainConfig, n: usize, seed: u64) -> SampledBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs = Observation::dim(2);
    let mut v = |len: usize| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let windows = (0..n)
        .map(|i| ContextWindow {
            episode: 0,
            anchor: i,
            indices: (0..cfg.window_len()).collect(),
            steps: (0..cfg.window_len())
                .map(|_| StepRecord {
                    obs: v(obs),
                    goal: v(3),
                    achieved_goal: v(3),
                    action: v(2),
                })
                .collect(),
            next_obs: v(obs),
            next_goal: v(3),
            next_achieved_goal: v(3),
            relabeled: false,
            reward: Some(if i % 2 == 0 { 0.0 } else { -1.0 }),
        })
        .collect();
    SampledBatch { windows, her_count: 0 }
}

fn flat(params: &[(String, Tensor)]) -> Vec<f64> {
    params.iter().flat_map(|(_, t)| t.to_vec()).collect()
}

fn td3_mechanics() -> Outcome {
    let mut cfg = tiny_cfg();
    cfg.clip_target = false;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dim = Observation::dim(2) + 3;

    // target heads forced to constants: y = r + γ·min(−5, −3)
    let learner = Learner::new(&cfg, dim, 2, &mut rng).unwrap();
    for (i, q) in [-5.0, -3.0].into_iter().enumerate() {
        let last = &learner.target_critic.heads[i].layers[2];
        last.weight.with_data_mut(|d| d.fill(0.0));
        last.bias.set_data(vec![q]).unwrap();
    }
    let batch = random_batch(&cfg, 6, 2);
    let b = BatchTensors::from_batch(&batch).unwrap();
    let y = critic_targets(&learner, &b, &cfg, &mut rng).unwrap();
    let target_err = y.iter().zip(&b.rewards).map(|(y, r)| (y - (r + cfg.gamma * -5.0)).abs()).fold(0.0, f64::max);

    let mut cadence_ok = true;
    for w in 1..=3usize {
        cfg.actor_delay = w;
        let mut l = Learner::new(&cfg, dim, 2, &mut rng).unwrap();
        for t in 1..=12u64 {
            let losses = update_step(&mut l, &batch, &cfg, t, &mut rng).unwrap();
            cadence_ok &= losses.actor.is_some() == (t % w as u64 == 0);
        }
    }

    let l = Learner::new(&cfg, dim, 2, &mut rng).unwrap();
    for (_, p) in l.actor.params() {
        p.with_data_mut(|d| d.iter_mut().for_each(|v| *v += 0.25));
    }
    let (online, target) = (flat(&l.actor.params()), flat(&l.target_actor.params()));
    let tau = 0.37;
    l.soft_update(tau).unwrap();
    let soft_exact = flat(&l.target_actor.params())
        .iter()
        .zip(online.iter().zip(&target))
        .all(|(a, (o, t))| a.to_bits() == (tau * o + (1.0 - tau) * t).to_bits());

    check(
        target_err < 1e-12 && cadence_ok && soft_exact,
        format!("target err {target_err:.1e} (< 1e-12), actor cadence exact: {cadence_ok}, soft update bit-exact: {soft_exact}"),
    )
}

// ---------------------------------------------------------------- learning

const LEARNING_SEEDS: [u64; 3] = [1, 2, 3];

fn run_seeds(variant: Variant, edit: impl Fn(&mut TrainConfig)) -> Result<(Vec<RunMetrics>, Duration), String> {
    let start = Instant::now();
    let mut runs = Vec::new();
    for seed in LEARNING_SEEDS {
        let mut cfg = TrainConfig::for_variant(variant);
        cfg.seed = seed;
        edit(&mut cfg);
        runs.push(train(&cfg, None).map_err(|e| format!("{variant} seed {seed}: {e}"))?);
    }
    Ok((runs, start.elapsed()))
}

fn mean_curve(runs: &[RunMetrics]) -> Vec<f64> {
    let epochs = runs.iter().map(|r| r.epochs.len()).min().unwrap_or(0);
    (0..epochs).map(|e| runs.iter().map(|r| r.epochs[e].success_rate).sum::<f64>() / runs.len() as f64).collect()
}

fn desk_scale_learning() -> Outcome {
    let (conther, took) = run_seeds(Variant::ContherV1, |_| {})?;
    let curve = mean_curve(&conther);
    let best = curve.iter().copied().fold(0.0, f64::max);
    let first = curve.iter().position(|&s| s >= 0.8);
    let (td3, _) = run_seeds(Variant::Td3, |_| {})?;
    let final5 = |runs: &[RunMetrics]| runs.iter().map(|r| r.final_success(5)).sum::<f64>() / runs.len() as f64;
    let (c5, t5) = (final5(&conther), final5(&td3));
    let mins = took.as_secs_f64() / 60.0;
    check(
        best >= 0.8 && curve.len() <= 40 && mins < 15.0 && c5 >= t5,
        format!(
            "seed-mean success peaks at {best:.3} (>= 0.8){}, conther_v1 {mins:.1} min (< 15), final-5 conther_v1 {c5:.3} vs td3 {t5:.3}",
            first.map(|e| format!(" first at epoch {e}")).unwrap_or_default()
        ),
    )
}

fn scripted_success(kind: TaskKind, episodes: u64) -> f64 {
    let arm = ArmModel::planar(2).unwrap();
    let task = TaskSpec::trajectory(kind, 6);
    let policy = ScriptedTracker::new(arm.clone(), &task);
    let mut env = Env::new(arm, task.clone()).unwrap();
    let (mut hits, mut steps) = (0, 0);
    for seed in 0..episodes {
        let mut out = env.reset(1000 + seed).unwrap();
        while !out.done {
            let a = policy.act(&out.observation, &out.goal).unwrap();
            out = env.step(&a).unwrap();
            hits += (task.reward(&out.goal, &out.achieved_goal).unwrap() == 0.0) as usize;
            steps += 1;
        }
    }
    hits as f64 / steps as f64
}

fn trajectory_tasks(train_too: bool) -> Outcome {
    let kinds = [TaskKind::TrajSinusoid, TaskKind::TrajCircle, TaskKind::TrajSpiral];
    let rates: Vec<f64> = kinds.iter().map(|&k| scripted_success(k, 30)).collect();
    let mut detail = kinds.iter().zip(&rates).map(|(k, r)| format!("scripted {k} {r:.3}")).collect::<Vec<_>>().join(", ");
    let mut ok = rates.iter().all(|&r| r >= 0.7);
    if train_too {
        let mut cfg = TrainConfig::for_variant(Variant::ContherV1);
        cfg.seed = 1;
        cfg.task = TaskSpec::trajectory(TaskKind::TrajSinusoid, cfg.k);
        let m = train(&cfg, None).map_err(|e| e.to_string())?;
        let rewards: Vec<f64> = m.epochs.iter().map(|e| e.mean_reward).collect();
        let q = rewards.len() / 4;
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let (first, last) = (mean(&rewards[..q]), mean(&rewards[rewards.len() - q..]));
        ok &= first < last;
        detail += &format!(", sinusoid training reward first quartile {first:.4} < last quartile {last:.4}");
    } else {
        detail += ", sinusoid training skipped";
    }
    check(ok, format!("{detail} (each scripted >= 0.7)"))
}

// ---------------------------------------------------------------- transport

fn transport_transparency() -> Outcome {
    let mut total = 0;
    for (kind, joints) in [(TaskKind::Reach, 2), (TaskKind::TrajCircle, 3)] {
        let arm = ArmModel::planar(joints).unwrap();
        let task = TaskSpec::for_kind(kind);
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let (a2, t2) = (arm.clone(), task.clone());
        let server = std::thread::spawn(move || serve_env(listener, a2, t2, &flag));
        let mut remote = RemoteEnv::connect(addr, kind).unwrap();
        let mut local = Env::new(arm, task).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(joints as u64);
        let mut steps = 0;
        let mut seed = 0;
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        while steps < 1000 {
            seed += 1;
            let (mut r, l) = (remote.reset(seed).unwrap(), local.reset(seed).unwrap());
            if bits(&r.observation) != bits(&l.observation) || r != l {
                return Err(format!("{kind}: reset {seed} differs"));
            }
            while !r.done && steps < 1000 {
                let action: Vec<f64> = (0..joints).map(|_| rng.random_range(-1.2..1.2)).collect();
                r = remote.step(&action).unwrap();
                let l = local.step(&action).unwrap();
                if bits(&r.observation) != bits(&l.observation) || bits(&r.goal) != bits(&l.goal) || r != l {
                    return Err(format!("{kind}: step {steps} differs"));
                }
                steps += 1;
            }
        }
        total += steps;
        remote.close().unwrap();
        stop.store(true, Ordering::SeqCst);
        server.join().unwrap().map_err(|e| e.to_string())?;
    }
    Ok(format!("{total} steps bit-identical across 2 tasks"))
}

// ---------------------------------------------------------------- determinism

const TINY_RUN: &str = "\
[run]
seed = 17
epochs = 2
cycles = 1
episodes = 2
updates = 5
batch_size = 16
validation_episodes = 3

[net]
d_model = 8
ff_hidden = 8
fc_hidden = 8

[task]
episode_len = 12
";

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    for (i, variant) in Variant::ALL.iter().enumerate() {
        let cfg = TrainConfig::from_text(TINY_RUN, &[("run.variant".into(), variant.name().into())]).map_err(|e| e.to_string())?;
        // the resolved config is what a run manifest records
        let again = TrainConfig::from_text(&cfg.to_text(), &[]).map_err(|e| e.to_string())?;
        let (a, b) = (tmp.path().join(format!("{i}a")), tmp.path().join(format!("{i}b")));
        train(&cfg, Some(&a)).map_err(|e| e.to_string())?;
        train(&again, Some(&b)).map_err(|e| e.to_string())?;
        let read = |d: &std::path::Path| std::fs::read(d.join(METRICS_FILE)).unwrap();
        if read(&a) != read(&b) {
            return Err(format!("{variant}: metrics differ"));
        }
    }
    Ok(format!("{} variants rerun from their resolved config with byte-identical metrics", Variant::ALL.len()))
}

fn main() -> ExitCode {
    let quick = std::env::var_os("CONTHER_ACCEPT_QUICK").is_some();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("gradient suite", Box::new(gradient_suite)),
        ("HER oracle equivalence", Box::new(her_oracle)),
        ("reward tables", Box::new(reward_tables)),
        ("TD3 mechanics", Box::new(td3_mechanics)),
        (
            "desk-scale learning",
            Box::new(move || if quick { Ok("SKIPPED (quick mode)".into()) } else { desk_scale_learning() }),
        ),
        ("trajectory tasks", Box::new(move || trajectory_tasks(!quick))),
        ("transport transparency", Box::new(transport_transparency)),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(d) => println!("PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name}: {d}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
