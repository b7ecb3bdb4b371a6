use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use conther_core::env::{Env, RemoteEnv};
use conther_core::nets::{load_records, read_checkpoint, ActorNet};
use conther_core::trainer::{parse_override, train, train_with_env, validate, TrainConfig, CHECKPOINT_DIR, METRICS_FILE};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{ConfigArgs, Failure};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.cfg";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// Resolved config text; feeding it back reproduces the run.
    pub config: String,
    pub seed: u64,
    pub variant: String,
    pub started: String,
    pub finished: Option<String>,
    pub status: String,
    pub out_dir: PathBuf,
    pub metrics: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

pub fn output_root(out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| std::env::var_os("CONTHER_OUT").map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn load_config(args: &ConfigArgs, manifest: Option<&Path>) -> Result<TrainConfig, Failure> {
    let text = match (manifest, &args.config) {
        (Some(m), _) => {
            let raw = fs::read_to_string(m).with_context(|| format!("reading {}", m.display()))?;
            let manifest: RunManifest = serde_json::from_str(&raw).with_context(|| format!("parsing {}", m.display()))?;
            manifest.config
        }
        (None, Some(path)) => fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        (None, None) => String::new(),
    };
    let overrides = args.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
    Ok(TrainConfig::from_text(&text, &overrides)?)
}

fn now() -> chrono::DateTime<chrono::Utc> {
    chrono::Utc::now()
}

fn write_manifest(dir: &Path, m: &RunManifest) -> anyhow::Result<()> {
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(m)? + "\n")?;
    Ok(())
}

/// Creates `<root>/<timestamp>-<variant>-<seed>`, adding a suffix on collision.
fn fresh_run_dir(root: &Path, cfg: &TrainConfig) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(root)?;
    let stem = format!("{}-{}-{}", now().format("%Y%m%dT%H%M%S%3fZ"), cfg.variant, cfg.seed);
    let mut dir = root.join(&stem);
    let mut n = 1;
    while dir.exists() {
        dir = root.join(format!("{stem}.{n}"));
        n += 1;
    }
    fs::create_dir(&dir)?;
    Ok(dir)
}

pub fn cmd_train(args: &ConfigArgs, manifest: Option<&Path>, out: Option<PathBuf>, seed: Option<u64>, remote: Option<&str>) -> Result<PathBuf, Failure> {
    let mut cfg = load_config(args, manifest)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = fresh_run_dir(&output_root(out), &cfg)?;
    let config = cfg.to_text();
    fs::write(dir.join(CONFIG_FILE), &config)?;
    let mut m = RunManifest {
        config,
        seed: cfg.seed,
        variant: cfg.variant.to_string(),
        started: now().to_rfc3339(),
        finished: None,
        status: "running".into(),
        out_dir: dir.clone(),
        metrics: dir.join(METRICS_FILE),
        checkpoints: ["actor", "critic", "target_actor", "target_critic"]
            .iter()
            .map(|n| dir.join(CHECKPOINT_DIR).join(format!("{n}.ckpt")))
            .collect(),
    };
    write_manifest(&dir, &m)?;
    log::info!("run directory {}", dir.display());

    let result = match remote {
        Some(addr) => RemoteEnv::connect(addr, cfg.task.kind)
            .map_err(|e| anyhow::anyhow!("connecting to {addr}: {e}"))
            .and_then(|mut env| Ok(train_with_env(&cfg, &mut env, Some(&dir))?)),
        None => train(&cfg, Some(&dir)).map_err(Into::into),
    };
    m.finished = Some(now().to_rfc3339());
    m.status = if result.is_ok() { "completed".into() } else { "failed".into() };
    write_manifest(&dir, &m)?;
    result.with_context(|| format!("run {} aborted", dir.display()))?;
    Ok(dir)
}

pub fn cmd_eval(run: &Path, episodes: usize, seed: u64) -> Result<(), Failure> {
    if episodes == 0 {
        return Err(Failure::Usage("--episodes must be at least 1".into()));
    }
    let text = fs::read_to_string(run.join(CONFIG_FILE)).with_context(|| format!("reading {}", run.join(CONFIG_FILE).display()))?;
    let cfg = TrainConfig::from_text(&text, &[])?;
    let arm = cfg.arm.build()?;
    let joints = arm.joint_count();
    let input_dim = conther_core::env::Observation::dim(joints) + cfg.task.goal_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let actor = ActorNet::new(input_dim, cfg.window_len(), joints, cfg.net_variant, &cfg.net, &mut rng).map_err(anyhow::Error::from)?;
    let path = run.join(CHECKPOINT_DIR).join("actor.ckpt");
    let mut file = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let records = read_checkpoint(&mut file).map_err(anyhow::Error::from)?;
    load_records(&actor.params(), &records).map_err(anyhow::Error::from)?;
    let seeds: Vec<u64> = (0..episodes).map(|_| rng.next_u64()).collect();
    let mut env = Env::new(arm, cfg.task.clone()).map_err(anyhow::Error::from)?;
    let (reward, success) = validate(&actor, &mut env, &cfg.task, &seeds)?;
    println!("episodes={episodes}\tmean_reward={reward:.4}\tsuccess_rate={success:.4}");
    Ok(())
}
