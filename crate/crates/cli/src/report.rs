//! Aggregates completed run directories into CSV tables and a console
//! summary: accuracy means with standard errors, surviving-operation
//! frequencies, connection-distance histograms, and per-epoch series.

use std::fs;
use std::path::Path;

use bonsai_core::genotype::{CellKind, ModelGenotype, OpKind};
use bonsai_core::stats::{architecture_statistics, mean_connection_distance, ArchStats};

use crate::artifacts::{read_history, read_summary, HistoryRow, RunSummary, GENOTYPE_FILE, HISTORY_FILE};
use crate::{runtime, CliResult};

/// Everything the report draws from one run directory.
pub struct LoadedRun {
    pub name: String,
    pub summary: RunSummary,
    pub genotype: ModelGenotype,
    pub history: Vec<HistoryRow>,
}

pub fn load_run(dir: &Path) -> CliResult<LoadedRun> {
    let summary = read_summary(dir)?;
    let path = dir.join(GENOTYPE_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| runtime(format!("cannot read {}: {e}", path.display())))?;
    let genotype = ModelGenotype::from_json_str(&text)
        .map_err(|e| runtime(format!("bad {}: {e}", path.display())))?;
    let history = read_history(&dir.join(HISTORY_FILE))?;
    let name = dir
        .file_name()
        .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    Ok(LoadedRun {
        name,
        summary,
        genotype,
        history,
    })
}

/// Mean and standard error of the mean (sample standard deviation over
/// `sqrt(n)`); the SEM is `None` for fewer than two values.
pub fn mean_sem(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, Some(var.sqrt() / (n as f64).sqrt()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

/// Distinct run kinds in first-seen order.
fn kinds(runs: &[LoadedRun]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in runs {
        if !out.contains(&r.summary.kind) {
            out.push(r.summary.kind.clone());
        }
    }
    out
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let file = fs::File::create(path)
        .map_err(|e| runtime(format!("cannot create {}: {e}", path.display())))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header)
        .and_then(|()| rows.iter().try_for_each(|r| w.write_record(r)))
        .and_then(|()| w.flush().map_err(Into::into))
        .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn aggregate_rows(runs: &[LoadedRun]) -> Vec<Vec<String>> {
    kinds(runs)
        .into_iter()
        .map(|kind| {
            let group: Vec<&LoadedRun> =
                runs.iter().filter(|r| r.summary.kind == kind).collect();
            let pick = |f: &dyn Fn(&RunSummary) -> f64| {
                let xs: Vec<f64> = group.iter().map(|r| f(&r.summary)).collect();
                mean_sem(&xs)
            };
            let best = pick(&|s| s.best_val_acc);
            let fin = pick(&|s| s.final_val_acc);
            let params = pick(&|s| s.learnable_parameters as f64);
            vec![
                kind,
                group.len().to_string(),
                best.0.to_string(),
                fmt_opt(best.1),
                fin.0.to_string(),
                fmt_opt(fin.1),
                params.0.to_string(),
                fmt_opt(params.1),
            ]
        })
        .collect()
}

/// Per-kind surviving-op counts summed over all runs, and the pooled
/// distance histogram. Exposed so tests can recount against the genotypes.
pub struct PooledStats {
    pub per_run: Vec<ArchStats>,
    pub op_normal: [usize; 7],
    pub op_reduction: [usize; 7],
    pub distances: Vec<usize>,
}

pub fn pool_stats(runs: &[LoadedRun]) -> PooledStats {
    let per_run: Vec<ArchStats> = runs
        .iter()
        .map(|r| architecture_statistics(&r.genotype))
        .collect();
    let mut pooled = PooledStats {
        per_run,
        op_normal: [0; 7],
        op_reduction: [0; 7],
        distances: Vec::new(),
    };
    for s in &pooled.per_run {
        for i in 0..7 {
            pooled.op_normal[i] += s.op_counts_normal[i];
            pooled.op_reduction[i] += s.op_counts_reduction[i];
        }
        for (d, &c) in s.connection_distances.iter().enumerate() {
            if pooled.distances.len() <= d {
                pooled.distances.resize(d + 1, 0);
            }
            pooled.distances[d] += c;
        }
    }
    pooled
}

/// Writes the report tables into `out` and returns the console summary.
pub fn write_report(runs: &[LoadedRun], out: &Path) -> CliResult<String> {
    fs::create_dir_all(out)
        .map_err(|e| runtime(format!("cannot create {}: {e}", out.display())))?;

    write_csv(
        &out.join("aggregate.csv"),
        &[
            "kind",
            "n",
            "mean_best_val_acc",
            "sem_best_val_acc",
            "mean_final_val_acc",
            "sem_final_val_acc",
            "mean_learnable_parameters",
            "sem_learnable_parameters",
        ],
        &aggregate_rows(runs),
    )?;

    let pooled = pool_stats(runs);
    let mut op_rows = Vec::new();
    for (kind, counts) in [
        (CellKind::Normal, &pooled.op_normal),
        (CellKind::Reduction, &pooled.op_reduction),
    ] {
        for (op, &count) in OpKind::ALL.iter().zip(counts.iter()) {
            op_rows.push(vec![
                kind.name().to_string(),
                op.name().to_string(),
                count.to_string(),
            ]);
        }
    }
    write_csv(&out.join("op_frequency.csv"), &["cell_kind", "op", "count"], &op_rows)?;

    let dist_rows: Vec<Vec<String>> = pooled
        .distances
        .iter()
        .enumerate()
        .skip(2)
        .map(|(d, &c)| vec![d.to_string(), c.to_string()])
        .collect();
    write_csv(
        &out.join("distance_histogram.csv"),
        &["distance", "count"],
        &dist_rows,
    )?;

    let structure_rows: Vec<Vec<String>> = runs
        .iter()
        .zip(&pooled.per_run)
        .map(|(r, s)| {
            let identity = s.op_counts_normal[0] + s.op_counts_reduction[0];
            let share = if s.total_ops == 0 {
                String::new()
            } else {
                (identity as f64 / s.total_ops as f64).to_string()
            };
            vec![
                r.name.clone(),
                r.summary.kind.clone(),
                s.residual_edges.to_string(),
                s.total_edges.to_string(),
                s.total_ops.to_string(),
                identity.to_string(),
                share,
                fmt_opt(mean_connection_distance(s)),
            ]
        })
        .collect();
    write_csv(
        &out.join("structure.csv"),
        &[
            "run",
            "kind",
            "residual_edges",
            "total_edges",
            "total_ops",
            "identity_ops",
            "identity_share",
            "mean_connection_distance",
        ],
        &structure_rows,
    )?;

    let mut series_rows = Vec::new();
    for r in runs {
        for h in &r.history {
            let max_ratio = h
                .ratios
                .iter()
                .flatten()
                .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            series_rows.push(vec![
                r.name.clone(),
                h.epoch.to_string(),
                h.phase.clone(),
                h.section.to_string(),
                h.loss_main.to_string(),
                h.loss_aux.to_string(),
                h.loss_comp.to_string(),
                h.lambda.to_string(),
                h.lr.to_string(),
                h.train_acc.to_string(),
                h.val_loss.to_string(),
                h.val_acc.to_string(),
                if max_ratio.is_finite() {
                    max_ratio.to_string()
                } else {
                    String::new()
                },
            ]);
        }
    }
    write_csv(
        &out.join("series.csv"),
        &[
            "run",
            "epoch",
            "phase",
            "section",
            "loss_main",
            "loss_aux",
            "loss_comp",
            "lambda",
            "lr",
            "train_acc",
            "val_loss",
            "val_acc",
            "max_ratio",
        ],
        &series_rows,
    )?;

    Ok(console_summary(runs, &pooled))
}

fn console_summary(runs: &[LoadedRun], pooled: &PooledStats) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let _ = writeln!(s, "report over {} run(s)", runs.len());
    for kind in kinds(runs) {
        let accs: Vec<f64> = runs
            .iter()
            .filter(|r| r.summary.kind == kind)
            .map(|r| r.summary.best_val_acc)
            .collect();
        let (mean, sem) = mean_sem(&accs);
        match sem {
            Some(sem) => {
                let _ = writeln!(
                    s,
                    "  {kind}: n={} best val acc {mean:.4} +/- {sem:.4} (SEM)",
                    accs.len()
                );
            }
            None => {
                let _ = writeln!(s, "  {kind}: n={} best val acc {mean:.4}", accs.len());
            }
        }
    }
    let total_ops: usize = pooled.op_normal.iter().sum::<usize>()
        + pooled.op_reduction.iter().sum::<usize>();
    let _ = writeln!(s, "surviving operations across all runs: {total_ops}");
    for (op, i) in OpKind::ALL.iter().zip(0..) {
        let _ = writeln!(
            s,
            "  {:<10} normal {:>4}  reduction {:>4}",
            op.name(),
            pooled.op_normal[i],
            pooled.op_reduction[i]
        );
    }
    if total_ops > 0 {
        let identity = pooled.op_normal[0] + pooled.op_reduction[0];
        let share = identity as f64 / total_ops as f64;
        let most = (0..7).max_by_key(|&i| pooled.op_normal[i] + pooled.op_reduction[i]);
        let dominant = most == Some(0);
        let _ = writeln!(
            s,
            "identity share {share:.3} ({})",
            if dominant {
                "identity is the most frequent surviving op"
            } else {
                "identity is not the most frequent surviving op"
            }
        );
    }
    let skips: usize = pooled.distances.iter().sum();
    if skips > 0 {
        let weighted: usize = pooled
            .distances
            .iter()
            .enumerate()
            .map(|(d, &c)| d * c)
            .sum();
        let _ = writeln!(
            s,
            "gated skip connections kept: {skips}, mean hop distance {:.3}",
            weighted as f64 / skips as f64
        );
    } else {
        let _ = writeln!(s, "gated skip connections kept: 0");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_sem_matches_hand_computation() {
        let (m, sem) = mean_sem(&[1.0, 2.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-15);
        // sample sd = 1, sem = 1/sqrt(3)
        assert!((sem.unwrap() - 1.0 / 3f64.sqrt()).abs() < 1e-12);
        let (m1, sem1) = mean_sem(&[4.5]);
        assert_eq!(m1, 4.5);
        assert!(sem1.is_none());
    }
}
