use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use conther_core::trainer::METRICS_FILE;

use crate::Failure;

/// The four exported series: file stem, x-axis column, metric key.
pub const SERIES: [(&str, &str, &str); 4] = [
    ("actor_loss", "update_idx", "actor_loss"),
    ("critic_loss", "update_idx", "critic_loss"),
    ("mean_reward", "epoch", "mean_reward"),
    ("success_rate", "epoch", "success_rate"),
];

/// `(x, value)` pairs of one series from a metrics file.
fn read_series(metrics: &Path) -> anyhow::Result<Vec<Vec<(u64, f64)>>> {
    let text = fs::read_to_string(metrics).with_context(|| format!("reading {}", metrics.display()))?;
    let mut out = vec![Vec::new(); SERIES.len()];
    for (n, line) in text.lines().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).with_context(|| format!("{}:{}", metrics.display(), n + 1))?;
        let is_epoch = v.get("success_rate").is_some();
        for (i, (_, axis, key)) in SERIES.iter().enumerate() {
            // epoch records carry update_idx too; losses come from update records only
            if *axis == "update_idx" && is_epoch {
                continue;
            }
            if let (Some(x), Some(y)) = (v.get(axis).and_then(|x| x.as_u64()), v.get(key).and_then(|y| y.as_f64())) {
                out[i].push((x, y));
            }
        }
    }
    anyhow::ensure!(out.iter().any(|s| !s.is_empty()), "{} holds no records", metrics.display());
    Ok(out)
}

fn run_name(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string())
}

fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_export_plots(runs: &[PathBuf], out: &Path) -> Result<(), Failure> {
    fs::create_dir_all(out)?;
    let mut loaded = Vec::new();
    for dir in runs {
        match read_series(&dir.join(METRICS_FILE)) {
            Ok(series) => loaded.push((run_name(dir), series)),
            Err(e) => log::warn!("skipping {}: {e:#}", dir.display()),
        }
    }
    if loaded.is_empty() {
        return Err(Failure::Runtime(anyhow::anyhow!("none of the given runs has metrics")));
    }
    for (name, series) in &loaded {
        let dir = out.join(name);
        fs::create_dir_all(&dir)?;
        for (i, (stem, x, key)) in SERIES.iter().enumerate() {
            let rows = series[i].iter().map(|(a, b)| vec![a.to_string(), b.to_string()]);
            write_csv(&dir.join(format!("{stem}.csv")), &[x.to_string(), key.to_string()], rows)?;
        }
    }
    // overlays keyed on the shared x axis, one column per run
    for (i, (stem, x, _)) in SERIES.iter().enumerate() {
        let mut grid: BTreeMap<u64, Vec<String>> = BTreeMap::new();
        for (r, (_, series)) in loaded.iter().enumerate() {
            for (a, b) in &series[i] {
                grid.entry(*a).or_insert_with(|| vec![String::new(); loaded.len()])[r] = b.to_string();
            }
        }
        let mut header = vec![x.to_string()];
        header.extend(loaded.iter().map(|(n, _)| n.clone()));
        let rows = grid.into_iter().map(|(a, mut vals)| {
            vals.insert(0, a.to_string());
            vals
        });
        write_csv(&out.join(format!("{stem}.csv")), &header, rows)?;
    }
    println!("exported {} run(s) to {}", loaded.len(), out.display());
    Ok(())
}
