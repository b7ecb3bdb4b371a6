use std::fs;
use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

const TINY: &str = "\
[run]
epochs = 2
cycles = 1
episodes = 2
updates = 3
batch_size = 8
validation_episodes = 2

[net]
d_model = 8
heads = 2
ff_hidden = 8
fc_hidden = 8

[task]
episode_len = 10
";

fn conther(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conther")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.cfg");
    fs::write(&path, TINY).unwrap();
    path
}

fn run_dirs(root: &Path) -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).filter(|p| p.join("manifest.json").exists()).collect();
    dirs.sort();
    dirs
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_manifest_metrics_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("runs");
    let o = conther(&["train", "--config", s(&cfg), "--set", "variant=conther_v1", "--out", s(&out), "--seed", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dirs = run_dirs(&out);
    assert_eq!(dirs.len(), 1);
    let name = dirs[0].file_name().unwrap().to_str().unwrap();
    assert!(name.ends_with("-conther_v1-4"), "{name}");
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dirs[0].join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "completed");
    assert_eq!(manifest["seed"], 4);
    assert!(manifest["finished"].is_string());
    assert!(dirs[0].join("metrics.jsonl").exists());
    assert!(dirs[0].join("checkpoints/actor.ckpt").exists());

    let o = conther(&["eval", s(&dirs[0]), "--episodes", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("success_rate="));
}

#[test]
fn unknown_key_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = conther(&["train", "--set", "foo=1", "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("foo") && err.contains("algo.gamma"), "{err}");
    let o = conther(&["train", "--bogus-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn rerun_from_manifest_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("runs");
    assert!(conther(&["train", "--config", s(&cfg), "--out", s(&out), "--set", "variant=td3_her", "--seed", "9"]).status.success());
    let first = run_dirs(&out).remove(0);
    let manifest = first.join("manifest.json");
    assert!(conther(&["train", "--manifest", s(&manifest), "--out", s(&out)]).status.success());
    let dirs = run_dirs(&out);
    assert_eq!(dirs.len(), 2);
    let second = dirs.into_iter().find(|d| *d != first).unwrap();
    assert_eq!(fs::read(first.join("metrics.jsonl")).unwrap(), fs::read(second.join("metrics.jsonl")).unwrap());
    assert_eq!(fs::read(first.join("config.cfg")).unwrap(), fs::read(second.join("config.cfg")).unwrap());
}

fn table_lines(stdout: &[u8]) -> Vec<String> {
    String::from_utf8_lossy(stdout).lines().take_while(|l| !l.starts_with("bench directory")).map(String::from).collect()
}

#[test]
fn bench_runs_the_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("runs");
    let o = conther(&["bench", "--config", s(&cfg), "--variants", "td3,conther_v1", "--seeds", "1,2", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines = table_lines(&o.stdout);
    assert_eq!(lines.len(), 3, "{lines:?}");
    assert!(lines[0].contains("vs_best_other"));
    let bench = fs::read_dir(&out).unwrap().next().unwrap().unwrap().path();
    assert_eq!(run_dirs(&bench).len(), 4);
    let mut r = csv::Reader::from_path(bench.join("cells.csv")).unwrap();
    assert_eq!(r.records().count(), 4);

    let o = conther(&["bench", "--config", s(&cfg), "--variants", "td3", "--seeds", "1", "--out", s(&out)]);
    assert!(o.status.success());
    let lines = table_lines(&o.stdout);
    assert_eq!(lines.len(), 2);
    assert!(!lines[0].contains("vs_"));
}

#[test]
fn bench_marks_failed_cells_and_still_prints_the_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("runs");
    // a huge learning rate makes the critic diverge and abort its run
    let o = conther(&["bench", "--config", s(&cfg), "--variants", "td3,td3_her", "--seeds", "1", "--out", s(&out), "--set", "critic_lr=1e300", "--set", "updates=20"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("FAILED"));
    let lines = table_lines(&o.stdout);
    assert_eq!(lines.len(), 3);
    assert!(lines[1].contains("FAILED"));
}

#[test]
fn bench_parallel_matches_sequential() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let seq = conther(&["bench", "--config", s(&cfg), "--variants", "td3,td3_context", "--seeds", "3", "--out", s(&a)]);
    let par = conther(&["bench", "--config", s(&cfg), "--variants", "td3,td3_context", "--seeds", "3", "--out", s(&b), "--parallel"]);
    assert!(seq.status.success() && par.status.success());
    assert_eq!(table_lines(&seq.stdout), table_lines(&par.stdout));
}

#[test]
fn export_plots_writes_aligned_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("runs");
    for seed in ["1", "2"] {
        assert!(conther(&["train", "--config", s(&cfg), "--out", s(&out), "--seed", seed]).status.success());
    }
    let mut runs: Vec<String> = run_dirs(&out).iter().map(|p| s(p).to_string()).collect();
    let empty = tmp.path().join("empty-run");
    fs::create_dir(&empty).unwrap();
    runs.push(s(&empty).to_string());
    let plots = tmp.path().join("plots");
    let mut args = vec!["export-plots", "--out", s(&plots)];
    args.extend(runs.iter().map(String::as_str));
    let o = conther(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("skipping"));

    // 2 epochs × 3 updates, actor every second update
    let expected = [("actor_loss", 3), ("critic_loss", 6), ("mean_reward", 2), ("success_rate", 2)];
    for (stem, rows) in expected {
        for run in &runs[..2] {
            let name = Path::new(run).file_name().unwrap();
            let mut r = csv::Reader::from_path(plots.join(name).join(format!("{stem}.csv"))).unwrap();
            assert_eq!(r.records().count(), rows, "{stem}");
        }
        let mut r = csv::Reader::from_path(plots.join(format!("{stem}.csv"))).unwrap();
        assert_eq!(r.headers().unwrap().len(), 3);
        let recs: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
        assert_eq!(recs.len(), rows);
        if stem == "success_rate" {
            for rec in &recs {
                assert!(rec.iter().skip(1).all(|v| (0.0..=1.0).contains(&v.parse::<f64>().unwrap())));
            }
        }
    }
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn remote_training_matches_in_process_and_server_stops_on_interrupt() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let addr = format!("127.0.0.1:{}", free_port());
    let mut server = Command::new(env!("CARGO_BIN_EXE_conther"))
        .args(["serve", "--config", s(&cfg), "--bind", &addr])
        .env("RUST_LOG", "warn")
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut line).unwrap();
    assert!(line.starts_with("listening on"), "{line}");

    let (local, remote) = (tmp.path().join("local"), tmp.path().join("remote"));
    assert!(conther(&["train", "--config", s(&cfg), "--out", s(&local), "--seed", "5"]).status.success());
    let o = conther(&["train", "--config", s(&cfg), "--out", s(&remote), "--seed", "5", "--remote", &addr]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let read = |root: &Path| fs::read(run_dirs(root)[0].join("metrics.jsonl")).unwrap();
    assert_eq!(read(&local), read(&remote));

    // binding an address in use is a runtime failure
    let o = conther(&["serve", "--bind", &addr]);
    assert_eq!(o.status.code(), Some(1));

    Command::new("kill").args(["-INT", &server.id().to_string()]).status().unwrap();
    assert_eq!(server.wait().unwrap().code(), Some(0));
}
