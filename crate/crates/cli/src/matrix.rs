//! Deterministic experiment matrix: cross product of swept config values
//! times seed replicates, idempotent by config hash, summarized into CSV
//! and aligned-text tables.

use std::collections::VecDeque;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use graphseq::config::{apply_override, config_from_value, ExperimentConfig, MatrixAxes};
use graphseq::error::{Error, Result};
use graphseq::eval::MetricReport;
use graphseq::run;

/// One matrix cell: the overridden config plus its human-readable setting.
struct Combo {
    label: Vec<(String, String)>,
    cfg: ExperimentConfig,
}

fn cross_product(base: &ExperimentConfig, axes: &MatrixAxes) -> Result<Vec<Combo>> {
    let base_value = serde_json::to_value(base).expect("config serializes");
    let keys: Vec<&String> = axes.keys().collect();
    let mut combos = vec![Vec::<usize>::new()];
    for key in &keys {
        let n = axes[*key].len();
        combos = combos
            .into_iter()
            .flat_map(|prefix| {
                (0..n).map(move |i| {
                    let mut next = prefix.clone();
                    next.push(i);
                    next
                })
            })
            .collect();
    }
    combos
        .into_iter()
        .map(|choice| {
            let mut value = base_value.clone();
            let mut label = Vec::new();
            for (key, &idx) in keys.iter().zip(&choice) {
                let v = &axes[*key][idx];
                apply_override(&mut value, key, &v.to_string())?;
                let shown = match v {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                label.push(((*key).clone(), shown));
            }
            Ok(Combo { label, cfg: config_from_value(value)? })
        })
        .collect()
}

fn combo_dir(out: &Path, combo: &Combo) -> PathBuf {
    out.join(format!("combo-{}", combo.cfg.hash()))
}

/// A run is complete when its report exists and records the expected hash.
fn run_is_complete(run_dir: &Path, expect_hash: &str) -> bool {
    MetricReport::load(&run_dir.join(run::REPORT_FILE))
        .map(|r| r.config_hash == expect_hash)
        .unwrap_or(false)
}

pub fn run_matrix(base: &ExperimentConfig, axes: Option<MatrixAxes>, out: &Path) -> Result<()> {
    let axes = axes.unwrap_or_default();
    let combos = cross_product(base, &axes)?;
    let n_seeds = base.run.n_seeds;
    let planned = combos.len() * n_seeds;
    if planned > base.run.max_runs {
        return Err(Error::Plan(format!(
            "matrix plans {} runs ({} combinations x {} seeds), exceeding run.max_runs = {}",
            planned,
            combos.len(),
            n_seeds,
            base.run.max_runs
        )));
    }
    std::fs::create_dir_all(out)?;

    // collect pending (combo index, seed offset) cells, skipping finished ones
    let mut pending: VecDeque<(usize, u64)> = VecDeque::new();
    let mut skipped = 0usize;
    for (ci, combo) in combos.iter().enumerate() {
        for offset in 0..n_seeds as u64 {
            let run_dir = combo_dir(out, combo).join(format!("seed-{}", offset));
            let expect = combo.cfg.with_seed_offset(offset).hash();
            if run_is_complete(&run_dir, &expect) {
                skipped += 1;
            } else {
                pending.push_back((ci, offset));
            }
        }
    }
    println!(
        "matrix: {} combinations x {} seeds = {} runs ({} cached, {} to run, {} workers)",
        combos.len(),
        n_seeds,
        planned,
        skipped,
        pending.len(),
        base.run.jobs
    );

    // workers pull cells off a shared queue; every run writes only inside
    // its own directory
    let queue = Mutex::new(pending);
    let errors: Mutex<Vec<Error>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..base.run.jobs.max(1) {
            scope.spawn(|| loop {
                let cell = queue.lock().unwrap().pop_front();
                let Some((ci, offset)) = cell else { break };
                let combo = &combos[ci];
                let run_dir = combo_dir(out, combo).join(format!("seed-{}", offset));
                match run::run_experiment(&combo.cfg, offset, &run_dir) {
                    Ok(report) => {
                        println!(
                            "done {} seed-{}: auc {:.4} acc {:.4}",
                            label_of(combo),
                            offset,
                            report.auc.mean,
                            report.acc.mean
                        );
                    }
                    Err(e) => {
                        eprintln!("failed {} seed-{}: {}", label_of(combo), offset, e);
                        errors.lock().unwrap().push(e);
                    }
                }
            });
        }
    });
    if let Some(e) = errors.into_inner().unwrap().into_iter().next() {
        return Err(e);
    }

    // aggregate per combination, then summarize
    let mut rows = Vec::new();
    for combo in &combos {
        let dir = combo_dir(out, combo);
        let mut reports = Vec::new();
        for offset in 0..n_seeds as u64 {
            reports.push(MetricReport::load(&dir.join(format!("seed-{}", offset)).join(run::REPORT_FILE))?);
        }
        let agg = run::aggregate_reports(&combo.cfg.hash(), &reports)?;
        agg.save(&dir.join(run::REPORT_FILE))?;
        rows.push((label_of(combo), combo.cfg.hash(), agg));
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    write_summaries(out, &axes, &rows)?;
    println!("wrote {}", out.join("summary.csv").display());
    println!("wrote {}", out.join("summary.txt").display());
    Ok(())
}

fn label_of(combo: &Combo) -> String {
    if combo.label.is_empty() {
        "base".to_string()
    } else {
        combo
            .label
            .iter()
            .map(|(k, v)| format!("{}={}", k, v))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn write_summaries(
    out: &Path,
    axes: &MatrixAxes,
    rows: &[(String, String, MetricReport)],
) -> Result<()> {
    let mut csv = Vec::new();
    write!(csv, "combo,hash,backbone,strategy,seeds")?;
    for key in axes.keys() {
        write!(csv, ",{}", key)?;
    }
    writeln!(csv, ",auc_mean,auc_std,acc_mean,acc_std,density")?;
    for (label, hash, report) in rows {
        write!(csv, "{},{},{},{},{}", label.replace(',', ";"), hash, report.backbone, report.strategy, report.seeds.len())?;
        let parts: std::collections::BTreeMap<&str, &str> = label
            .split(' ')
            .filter_map(|kv| kv.split_once('='))
            .collect();
        for key in axes.keys() {
            write!(csv, ",{}", parts.get(key.as_str()).unwrap_or(&""))?;
        }
        writeln!(
            csv,
            ",{:.4},{:.4},{:.4},{:.4},{:.4}",
            report.auc.mean, report.auc.std, report.acc.mean, report.acc.std, report.density
        )?;
    }
    graphseq::write_atomic(&out.join("summary.csv"), &csv)?;

    // aligned text table mirroring the CSV
    let header = ["combo", "backbone", "strategy", "auc", "acc", "density"];
    let mut table: Vec<[String; 6]> = Vec::new();
    for (label, _, report) in rows {
        table.push([
            label.clone(),
            report.backbone.clone(),
            report.strategy.clone(),
            format!("{:.4} ± {:.4}", report.auc.mean, report.auc.std),
            format!("{:.4} ± {:.4}", report.acc.mean, report.acc.std),
            format!("{:.4}", report.density),
        ]);
    }
    let mut widths = header.map(str::len);
    for row in &table {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut txt = Vec::new();
    let mut line = String::new();
    for (w, h) in widths.iter().zip(header) {
        line.push_str(&format!("{:<width$}  ", h, width = w));
    }
    writeln!(txt, "{}", line.trim_end())?;
    for row in &table {
        let mut line = String::new();
        for (w, cell) in widths.iter().zip(row) {
            line.push_str(&format!("{:<width$}  ", cell, width = w));
        }
        writeln!(txt, "{}", line.trim_end())?;
    }
    graphseq::write_atomic(&out.join("summary.txt"), &txt)
}
