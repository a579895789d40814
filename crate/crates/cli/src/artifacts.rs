//! The run-directory contract: `config.json`, `history.csv`,
//! `final.genotype.json`, `pruner_health.csv`, `checkpoint.bin`, and
//! `summary.json`. The report command and the baseline runner only ever
//! consume runs through these files.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use bonsai_core::network::CellHealth;
use bonsai_core::params::ParamBank;
use bonsai_core::sched::{EpochRow, Observer, Reference, RunResult};
use bonsai_core::Hypernetwork;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{runtime, CliError, CliResult};

pub const CONFIG_FILE: &str = "config.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const GENOTYPE_FILE: &str = "final.genotype.json";
pub const HEALTH_FILE: &str = "pruner_health.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SUMMARY_FILE: &str = "summary.json";

const CHECKPOINT_MAGIC: &[u8; 5] = b"BNCK1";

fn history_header(cells: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "epoch",
        "phase",
        "section",
        "placed_cells",
        "loss_main",
        "loss_aux",
        "loss_comp",
        "lambda",
        "lr",
        "train_acc",
        "val_loss",
        "val_acc",
        "accounted_bytes",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for c in 0..cells {
        h.push(format!("ratio_{c}"));
    }
    h
}

/// Streams run progress into a run directory: archives the effective config
/// up front, appends one history row per epoch, and captures the final
/// parameter state as the checkpoint. IO failures inside observer callbacks
/// are deferred and surfaced by [`RunWriter::finish`].
pub struct RunWriter {
    dir: PathBuf,
    csv: csv::Writer<fs::File>,
    cells: usize,
    kind: &'static str,
    seed: u64,
    budget_bytes: u64,
    started: Instant,
    learnable_parameters: u64,
    deferred: Option<CliError>,
}

impl RunWriter {
    /// Creates `dir` and archives `cfg` there. Refuses a directory that
    /// already holds a run.
    pub fn create(dir: &Path, cfg: &RunConfig, kind: &'static str) -> CliResult<RunWriter> {
        if dir.join(CONFIG_FILE).exists() {
            return Err(runtime(format!(
                "{} already contains a run; choose a fresh output directory",
                dir.display()
            )));
        }
        fs::create_dir_all(dir)
            .map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
        let text = serde_json::to_string_pretty(cfg)
            .map_err(|e| runtime(format!("config serialize: {e}")))?;
        fs::write(dir.join(CONFIG_FILE), text + "\n")
            .map_err(|e| runtime(format!("cannot write config: {e}")))?;
        let file = fs::File::create(dir.join(HISTORY_FILE))
            .map_err(|e| runtime(format!("cannot create history: {e}")))?;
        let mut csv = csv::Writer::from_writer(file);
        csv.write_record(history_header(cfg.cells))
            .map_err(|e| runtime(format!("history header: {e}")))?;
        Ok(RunWriter {
            dir: dir.to_path_buf(),
            csv,
            cells: cfg.cells,
            kind,
            seed: cfg.seed,
            budget_bytes: cfg.budget_bytes,
            started: Instant::now(),
            learnable_parameters: 0,
            deferred: None,
        })
    }

    fn try_write_row(&mut self, row: &EpochRow) -> CliResult<()> {
        let mut rec: Vec<String> = vec![
            row.epoch.to_string(),
            row.phase.name().to_string(),
            row.section.to_string(),
            row.placed_cells.to_string(),
            row.loss_main.to_string(),
            row.loss_aux.to_string(),
            row.loss_comp.to_string(),
            row.lambda.to_string(),
            row.lr.to_string(),
            row.train_acc.to_string(),
            row.val_loss.to_string(),
            row.val_acc.to_string(),
            row.accounted_bytes.to_string(),
        ];
        for c in 0..self.cells {
            rec.push(row.ratios.get(c).map_or(String::new(), |r| r.to_string()));
        }
        self.csv
            .write_record(&rec)
            .and_then(|()| self.csv.flush().map_err(Into::into))
            .map_err(|e| runtime(format!("history row: {e}")))
    }

    fn defer(&mut self, r: CliResult<()>) {
        if let (Err(e), None) = (r, &self.deferred) {
            self.deferred = Some(e);
        }
    }

    /// Writes the remaining artifacts from the run result and returns the
    /// summary that was stored. Call after the run completes.
    pub fn finish(mut self, result: &RunResult) -> CliResult<RunSummary> {
        if let Some(e) = self.deferred.take() {
            return Err(e);
        }
        let genotype = result
            .final_genotype
            .to_json_string()
            .map_err(|e| runtime(format!("genotype serialize: {e}")))?;
        fs::write(self.dir.join(GENOTYPE_FILE), genotype + "\n")
            .map_err(|e| runtime(format!("cannot write genotype: {e}")))?;
        write_health(&self.dir.join(HEALTH_FILE), &result.health)?;
        let summary = RunSummary {
            kind: self.kind.to_string(),
            seed: self.seed,
            converged: result.converged,
            epochs: result.history.len() as u32,
            best_val_acc: result.best_val_acc,
            final_val_acc: result.final_val_acc,
            accounted_bytes: result.accounted_bytes,
            budget_bytes: self.budget_bytes,
            learnable_parameters: self.learnable_parameters,
            append_epochs: result.appends.iter().map(|a| a.epoch).collect(),
            pre_final_occupancy: result
                .appends
                .last()
                .map(|a| a.occupancy_before.clone())
                .unwrap_or_default(),
            final_occupancy: result.final_occupancy.clone(),
            final_ratios: result.final_ratios.clone(),
            section_plan: result
                .section_plan
                .iter()
                .map(|s| PlanRow {
                    start: s.start,
                    end: s.end,
                    target: s.target,
                })
                .collect(),
            wall_seconds: self.started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&summary)
            .map_err(|e| runtime(format!("summary serialize: {e}")))?;
        fs::write(self.dir.join(SUMMARY_FILE), text + "\n")
            .map_err(|e| runtime(format!("cannot write summary: {e}")))?;
        Ok(summary)
    }
}

impl Observer for RunWriter {
    fn epoch(&mut self, _net: &Hypernetwork, _bank: &ParamBank, row: &EpochRow) {
        let r = self.try_write_row(row);
        self.defer(r);
    }

    fn finished(&mut self, _net: &Hypernetwork, bank: &ParamBank) {
        self.learnable_parameters = bank.learnable_elements();
        let r = write_checkpoint(&self.dir.join(CHECKPOINT_FILE), bank);
        self.defer(r);
    }
}

fn write_health(path: &Path, health: &[CellHealth]) -> CliResult<()> {
    let file =
        fs::File::create(path).map_err(|e| runtime(format!("cannot create health: {e}")))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["cell", "open", "closed", "dead", "open_bytes", "total_bytes"])
        .map_err(|e| runtime(format!("health header: {e}")))?;
    for h in health {
        w.write_record([
            h.cell.to_string(),
            h.open.to_string(),
            h.closed.to_string(),
            h.dead.to_string(),
            h.open_bytes.to_string(),
            h.total_bytes.to_string(),
        ])
        .map_err(|e| runtime(format!("health row: {e}")))?;
    }
    w.flush().map_err(|e| runtime(format!("health flush: {e}")))
}

/// One parameter slot as stored in `checkpoint.bin`.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointParam {
    pub label: String,
    pub shape: Vec<usize>,
    pub learnable: bool,
    pub decay: bool,
    pub alive: bool,
    pub data: Vec<f64>,
}

/// Binary checkpoint: magic `BNCK1`, a 32-bit slot count, then per slot the
/// label (length-prefixed), a flag byte (learnable/decay/alive), the shape
/// (rank-prefixed 32-bit dims), and the values as 64-bit little-endian
/// floats. Dead slots store no values.
pub fn write_checkpoint(path: &Path, bank: &ParamBank) -> CliResult<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(bank.slot_count() as u32).to_le_bytes());
    for (_, p) in bank.iter() {
        buf.extend_from_slice(&(p.label.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.label.as_bytes());
        let flags =
            u8::from(p.learnable) | u8::from(p.decay) << 1 | u8::from(p.alive) << 2;
        buf.push(flags);
        buf.extend_from_slice(&(p.shape.rank() as u32).to_le_bytes());
        for &d in &p.shape.0 {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(p.data.len() as u64).to_le_bytes());
        for &v in &p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)
        .map_err(|e| runtime(format!("cannot create checkpoint: {e}")))?;
    f.write_all(&buf)
        .map_err(|e| runtime(format!("cannot write checkpoint: {e}")))
}

pub fn read_checkpoint(path: &Path) -> CliResult<Vec<CheckpointParam>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| runtime(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let bad = |why: &str| runtime(format!("bad checkpoint {}: {why}", path.display()));
    let mut at = 0usize;
    let mut take = |n: usize| -> CliResult<&[u8]> {
        let s = buf.get(at..at + n).ok_or_else(|| bad("truncated"))?;
        at += n;
        Ok(s)
    };
    if take(5)? != CHECKPOINT_MAGIC {
        return Err(bad("missing BNCK1 magic"));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let label_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let label = String::from_utf8(take(label_len)?.to_vec())
            .map_err(|_| bad("label is not UTF-8"))?;
        let flags = take(1)?[0];
        let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let data = take(len * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push(CheckpointParam {
            label,
            shape,
            learnable: flags & 1 != 0,
            decay: flags & 2 != 0,
            alive: flags & 4 != 0,
            data,
        });
    }
    if at != buf.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    pub start: usize,
    pub end: usize,
    pub target: f64,
}

/// The machine-readable run summary; everything a paired baseline or an
/// aggregate report needs without replaying history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub kind: String,
    pub seed: u64,
    pub converged: bool,
    pub epochs: u32,
    pub best_val_acc: f64,
    pub final_val_acc: f64,
    pub accounted_bytes: u64,
    pub budget_bytes: u64,
    pub learnable_parameters: u64,
    pub append_epochs: Vec<u32>,
    pub pre_final_occupancy: Vec<f64>,
    pub final_occupancy: Vec<f64>,
    pub final_ratios: Vec<f64>,
    pub section_plan: Vec<PlanRow>,
    pub wall_seconds: f64,
}

pub fn read_summary(dir: &Path) -> CliResult<RunSummary> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| runtime(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| runtime(format!("bad {}: {e}", path.display())))
}

/// Rebuilds the baseline reference from a completed search run's summary.
pub fn reference_from_summary(s: &RunSummary) -> CliResult<Reference> {
    if !s.converged {
        return Err(runtime(
            "reference run did not converge; baselines need a completed search run",
        ));
    }
    Ok(Reference {
        append_epochs: s.append_epochs.clone(),
        pre_final_occupancy: s.pre_final_occupancy.clone(),
        final_occupancy: s.final_occupancy.clone(),
        final_ratios: s.final_ratios.clone(),
    })
}

/// One parsed `history.csv` row. Ratio columns for cells not yet placed are
/// `None`.
#[derive(Debug, Clone)]
pub struct HistoryRow {
    pub epoch: u32,
    pub phase: String,
    pub section: usize,
    pub placed_cells: usize,
    pub loss_main: f64,
    pub loss_aux: f64,
    pub loss_comp: f64,
    pub lambda: f64,
    pub lr: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub accounted_bytes: u64,
    pub ratios: Vec<Option<f64>>,
}

pub fn read_history(path: &Path) -> CliResult<Vec<HistoryRow>> {
    let bad = |why: String| runtime(format!("bad {}: {why}", path.display()));
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| runtime(format!("cannot read {}: {e}", path.display())))?;
    let cells = rdr
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .filter(|h| h.starts_with("ratio_"))
        .count();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 13 + cells {
            return Err(bad(format!("row has {} fields", rec.len())));
        }
        let f = |i: usize| -> CliResult<f64> {
            rec[i].parse().map_err(|e| bad(format!("field {i}: {e}")))
        };
        let mut ratios = Vec::with_capacity(cells);
        for c in 0..cells {
            let s = &rec[13 + c];
            ratios.push(if s.is_empty() {
                None
            } else {
                Some(s.parse().map_err(|e| bad(format!("ratio_{c}: {e}")))?)
            });
        }
        out.push(HistoryRow {
            epoch: rec[0].parse().map_err(|e| bad(format!("epoch: {e}")))?,
            phase: rec[1].to_string(),
            section: rec[2].parse().map_err(|e| bad(format!("section: {e}")))?,
            placed_cells: rec[3]
                .parse()
                .map_err(|e| bad(format!("placed_cells: {e}")))?,
            loss_main: f(4)?,
            loss_aux: f(5)?,
            loss_comp: f(6)?,
            lambda: f(7)?,
            lr: f(8)?,
            train_acc: f(9)?,
            val_loss: f(10)?,
            val_acc: f(11)?,
            accounted_bytes: rec[12]
                .parse()
                .map_err(|e| bad(format!("accounted_bytes: {e}")))?,
            ratios,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use bonsai_core::Shape;

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let mut bank = ParamBank::new();
        bank.add(
            "a/w".into(),
            Shape(vec![2, 3]),
            vec![1.5, -2.25, 0.1, f64::MIN_POSITIVE, 1e300, -0.0],
            true,
        );
        let dead = bank.add("b/w".into(), Shape(vec![2]), vec![1.0, 2.0], false);
        bank.add_state("c/s".into(), Shape(vec![1]), vec![0.25]);
        bank.kill(dead);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        write_checkpoint(&path, &bank).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0].label, "a/w");
        assert_eq!(back[0].shape, vec![2, 3]);
        assert!(back[0].learnable && back[0].decay && back[0].alive);
        assert_eq!(
            back[0].data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            [1.5f64, -2.25, 0.1, f64::MIN_POSITIVE, 1e300, -0.0]
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        );
        assert!(!back[1].alive && back[1].data.is_empty());
        assert!(!back[2].learnable && back[2].alive);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let mut bank = ParamBank::new();
        bank.add("w".into(), Shape(vec![1]), vec![1.0], true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        write_checkpoint(&path, &bank).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(read_checkpoint(&path).is_err());
    }

    #[test]
    fn summary_round_trips() {
        let s = RunSummary {
            kind: "search".into(),
            seed: 3,
            converged: true,
            epochs: 60,
            best_val_acc: 0.91,
            final_val_acc: 0.9,
            accounted_bytes: 1234,
            budget_bytes: 9999,
            learnable_parameters: 321,
            append_epochs: vec![17],
            pre_final_occupancy: vec![0.5, 0.6],
            final_occupancy: vec![0.5, 0.6, 1.0, 1.0],
            final_ratios: vec![0.4, 0.5, 0.9, 0.95],
            section_plan: vec![PlanRow {
                start: 0,
                end: 4,
                target: 0.5,
            }],
            wall_seconds: 12.5,
        };
        let dir = tempfile::tempdir().unwrap();
        let text = serde_json::to_string_pretty(&s).unwrap();
        fs::write(dir.path().join(SUMMARY_FILE), text).unwrap();
        let back = read_summary(dir.path()).unwrap();
        assert_eq!(s, back);
        let r = reference_from_summary(&back).unwrap();
        assert_eq!(r.append_epochs, vec![17]);
        assert_eq!(r.pre_final_occupancy, vec![0.5, 0.6]);
    }
}
