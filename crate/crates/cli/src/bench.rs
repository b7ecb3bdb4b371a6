use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use anyhow::Context;
use conther_core::trainer::{Variant, METRICS_FILE};

use crate::run::{cmd_train, output_root};
use crate::{ConfigArgs, Failure};

/// Epochs averaged for the final score.
pub const FINAL_EPOCHS: usize = 5;

struct Cell {
    variant: String,
    seed: u64,
    outcome: Result<f64, String>,
    dir: Option<PathBuf>,
}

/// Mean validation success rate over the last `n` epoch records of a metrics file.
pub fn final_success(metrics: &Path, n: usize) -> anyhow::Result<f64> {
    let text = fs::read_to_string(metrics).with_context(|| format!("reading {}", metrics.display()))?;
    let mut rates = Vec::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if let Some(s) = v.get("success_rate").and_then(|s| s.as_f64()) {
            rates.push(s);
        }
    }
    anyhow::ensure!(!rates.is_empty(), "{} has no epoch records", metrics.display());
    let tail = &rates[rates.len().saturating_sub(n)..];
    Ok(tail.iter().sum::<f64>() / tail.len() as f64)
}

fn cell_args(args: &ConfigArgs, variant: &str) -> ConfigArgs {
    let mut a = args.clone();
    a.set.push(format!("run.variant={variant}"));
    a
}

fn run_sequential(args: &ConfigArgs, variants: &[String], seeds: &[u64], root: &Path) -> Vec<Cell> {
    let mut cells = Vec::new();
    for v in variants {
        for &seed in seeds {
            log::info!("bench cell {v} seed {seed}");
            let (outcome, dir) = match cmd_train(&cell_args(args, v), None, Some(root.to_path_buf()), Some(seed), None) {
                Ok(dir) => (final_success(&dir.join(METRICS_FILE), FINAL_EPOCHS).map_err(|e| e.to_string()), Some(dir)),
                Err(Failure::Usage(m)) => (Err(m), None),
                Err(Failure::Runtime(e)) => (Err(format!("{e:#}")), None),
            };
            cells.push(Cell {
                variant: v.clone(),
                seed,
                outcome,
                dir,
            });
        }
    }
    cells
}

fn run_parallel(args: &ConfigArgs, variants: &[String], seeds: &[u64], root: &Path) -> anyhow::Result<Vec<Cell>> {
    let exe = std::env::current_exe()?;
    let mut children = Vec::new();
    for v in variants {
        for &seed in seeds {
            let mut cmd = Command::new(&exe);
            cmd.arg("train").arg("--out").arg(root).arg("--seed").arg(seed.to_string());
            if let Some(c) = &args.config {
                cmd.arg("--config").arg(c);
            }
            for s in &cell_args(args, v).set {
                cmd.arg("--set").arg(s);
            }
            cmd.stdout(Stdio::piped()).stderr(Stdio::piped());
            children.push((v.clone(), seed, cmd.spawn()?));
        }
    }
    let mut cells = Vec::new();
    for (variant, seed, child) in children {
        let out = child.wait_with_output()?;
        let stdout = String::from_utf8_lossy(&out.stdout);
        let dir = stdout.lines().last().map(PathBuf::from);
        let outcome = match (&dir, out.status.success()) {
            (Some(d), true) => final_success(&d.join(METRICS_FILE), FINAL_EPOCHS).map_err(|e| e.to_string()),
            _ => Err(String::from_utf8_lossy(&out.stderr).trim().to_string()),
        };
        cells.push(Cell { variant, seed, outcome, dir });
    }
    Ok(cells)
}

fn percent(a: f64, b: f64) -> String {
    if b == 0.0 {
        "n/a".into()
    } else {
        format!("{:+.2}%", 100.0 * (a - b) / b)
    }
}

/// Rows of `variant, runs, score[, vs mean of others, vs best other]`.
fn table(variants: &[String], cells: &[Cell]) -> Vec<Vec<String>> {
    let scores: Vec<Option<f64>> = variants
        .iter()
        .map(|v| {
            let ok: Vec<f64> = cells.iter().filter(|c| &c.variant == v).filter_map(|c| c.outcome.as_ref().ok().copied()).collect();
            (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64)
        })
        .collect();
    let compare = variants.len() > 1;
    let mut rows = vec![{
        let mut h = vec!["variant".to_string(), "runs".into(), format!("final{FINAL_EPOCHS}_success")];
        if compare {
            h.extend(["vs_mean_of_others".into(), "vs_best_other".into()]);
        }
        h
    }];
    for (i, v) in variants.iter().enumerate() {
        let ok = cells.iter().filter(|c| &c.variant == v && c.outcome.is_ok()).count();
        let total = cells.iter().filter(|c| &c.variant == v).count();
        let mut row = vec![v.clone(), format!("{ok}/{total}")];
        match scores[i] {
            Some(s) => row.push(format!("{s:.4}")),
            None => row.push("FAILED".into()),
        }
        if compare {
            let others: Vec<f64> = scores.iter().enumerate().filter(|(j, _)| *j != i).filter_map(|(_, s)| *s).collect();
            match (scores[i], others.is_empty()) {
                (Some(s), false) => {
                    let mean = others.iter().sum::<f64>() / others.len() as f64;
                    let best = others.iter().copied().fold(f64::MIN, f64::max);
                    row.push(percent(s, mean));
                    row.push(percent(s, best));
                }
                _ => row.extend(["n/a".to_string(), "n/a".to_string()]),
            }
        }
        rows.push(row);
    }
    rows
}

pub fn cmd_bench(args: &ConfigArgs, variants: &[String], seeds: &[u64], out: Option<PathBuf>, parallel: bool) -> Result<(), Failure> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Failure::Usage("bench needs at least one variant and one seed".into()));
    }
    for v in variants {
        v.parse::<Variant>()?;
    }
    // fail fast on a bad config before launching anything
    crate::run::load_config(&cell_args(args, &variants[0]), None)?;
    let root = output_root(out).join(format!("bench-{}", chrono::Utc::now().format("%Y%m%dT%H%M%S%3fZ")));
    fs::create_dir_all(&root)?;
    let cells = if parallel { run_parallel(args, variants, seeds, &root)? } else { run_sequential(args, variants, seeds, &root) };

    let mut cells_csv = csv::Writer::from_path(root.join("cells.csv")).map_err(anyhow::Error::from)?;
    cells_csv.write_record(["variant", "seed", "status", "final_success", "run_dir"]).map_err(anyhow::Error::from)?;
    for c in &cells {
        let (status, score) = match &c.outcome {
            Ok(s) => ("ok".to_string(), format!("{s}")),
            Err(e) => {
                eprintln!("cell {} seed {}: FAILED: {e}", c.variant, c.seed);
                ("failed".to_string(), String::new())
            }
        };
        let dir = c.dir.as_ref().map(|d| d.display().to_string()).unwrap_or_default();
        cells_csv
            .write_record([c.variant.clone(), c.seed.to_string(), status, score, dir])
            .map_err(anyhow::Error::from)?;
    }
    cells_csv.flush()?;

    let rows = table(variants, &cells);
    let mut table_csv = csv::Writer::from_path(root.join("bench.csv")).map_err(anyhow::Error::from)?;
    for r in &rows {
        table_csv.write_record(r).map_err(anyhow::Error::from)?;
    }
    table_csv.flush()?;
    let widths: Vec<usize> = (0..rows[0].len()).map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0)).collect();
    for r in &rows {
        let line: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        println!("{}", line.join("  ").trim_end());
    }
    println!("bench directory: {}", root.display());
    Ok(())
}
