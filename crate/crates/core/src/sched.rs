//! Sectioned growth under a memory budget.
//!
//! The search run places the first section of cells, trains with a
//! compression pull until the in-scope ratios clear the planned target and
//! the next section fits, then appends the next section and repeats. After
//! the last append a final prune phase (if the budget demands one) is
//! followed by free training with the pull removed. A run always consumes
//! exactly its epoch budget; a run that never places the last section is
//! reported as not converged rather than cut short.
//!
//! Random baseline runs share this module so their epoch accounting, data
//! order, and learning-rate schedule match the search run they are paired
//! with. Rng streams are fixed by role: 0 initializes parameters, 1 drives
//! the train loop, 2 generates data, 3 samples baseline architectures, and
//! 4 splits train from validation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Augment, Dataset};
use crate::error::{CoreError, Result};
use crate::genotype::ModelGenotype;
use crate::network::{profile, CellHealth, GateMode, Hypernetwork, NetProfile};
use crate::params::cosine_lr;
use crate::pruner::{lambda_schedule, LAMBDA_DOUBLING_PERIOD};
use crate::sample::sample_genotype;
use crate::stream_seed;
use crate::trainer::{evaluate, probe_lambda, train_epoch, CompTarget, TrainSettings};

pub const STREAM_INIT: u64 = 0;
pub const STREAM_TRAIN: u64 = 1;
pub const STREAM_DATA: u64 = 2;
pub const STREAM_SAMPLE: u64 = 3;
pub const STREAM_SPLIT: u64 = 4;

/// Tolerance for matching a sampled architecture to an occupancy target.
pub const OCCUPANCY_TOL: f64 = 0.02;

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, stream))
}

/// Everything a run needs besides data: the search space, the budget, and
/// the optimizer settings.
#[derive(Debug, Clone)]
pub struct SearchSettings {
    pub config: crate::genotype::NetConfig,
    pub sections: usize,
    pub budget_bytes: u64,
    pub epoch_budget: u32,
    pub gate_m: f64,
    pub gate_init: f64,
    /// Fraction of the classification loss the compression term starts at
    /// when a prune phase probes its base lambda.
    pub lambda0: f64,
    pub lr_max: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub drop_path: f64,
    pub aux_weight: f64,
    pub batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Grow,
    Prune,
    Free,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Grow => "grow",
            Phase::Prune => "prune",
            Phase::Free => "free",
        }
    }
}

/// A contiguous block of cells appended as one unit, with the compression
/// target that must hold before the following section may be placed. For the
/// last section the target is the one that makes the finished network fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Section {
    pub start: usize,
    pub end: usize,
    pub target: f64,
}

#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: u32,
    pub phase: Phase,
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
    /// Per placed cell, the gate-weighted live fraction of optional bytes.
    pub ratios: Vec<f64>,
    pub accounted_bytes: u64,
}

/// Snapshot taken immediately before a section append.
#[derive(Debug, Clone)]
pub struct AppendEvent {
    pub epoch: u32,
    pub placed_after: usize,
    pub occupancy_before: Vec<f64>,
    pub ratios_before: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub converged: bool,
    pub history: Vec<EpochRow>,
    pub appends: Vec<AppendEvent>,
    pub section_plan: Vec<Section>,
    pub final_genotype: ModelGenotype,
    pub final_occupancy: Vec<f64>,
    pub final_ratios: Vec<f64>,
    pub health: Vec<CellHealth>,
    pub best_val_acc: f64,
    pub final_val_acc: f64,
    pub accounted_bytes: u64,
}

/// Callbacks fired as a run progresses, for logging and for tests that
/// inspect parameter state around append boundaries.
pub trait Observer {
    fn epoch(&mut self, _net: &Hypernetwork, _bank: &crate::params::ParamBank, _row: &EpochRow) {}
    fn pre_append(&mut self, _net: &Hypernetwork, _bank: &crate::params::ParamBank) {}
    fn post_append(&mut self, _net: &Hypernetwork, _bank: &crate::params::ParamBank) {}
    /// Fired once after the last epoch, with the final network state.
    fn finished(&mut self, _net: &Hypernetwork, _bank: &crate::params::ParamBank) {}
}

pub struct NullObserver;

impl Observer for NullObserver {}

fn section_sizes(cell_count: usize, sections: usize) -> Result<Vec<usize>> {
    if sections == 0 || sections > cell_count {
        return Err(CoreError::Invalid(format!(
            "cannot split {cell_count} cells into {sections} sections"
        )));
    }
    let base = cell_count / sections;
    let rem = cell_count % sections;
    Ok((0..sections)
        .map(|s| base + usize::from(s < rem))
        .collect())
}

/// Splits the cells into near-equal contiguous sections and computes each
/// section's compression target from the budget.
///
/// The target for section `n` is what the already-placed optional bytes must
/// shrink to so that the fixed costs, the classifier towers, and the next
/// section arriving fully open all fit inside the budget:
///
/// ```text
/// target_n = (budget - stem - towers - fixed_placed - full_next) / denom_placed
/// ```
///
/// clamped to `[0, 1]`. A negative numerator means the budget cannot hold the
/// network even with every optional gate closed.
pub fn plan_sections(
    prof: &NetProfile,
    sections: usize,
    budget_bytes: u64,
) -> Result<Vec<Section>> {
    let cell_count = prof.cells.len();
    let sizes = section_sizes(cell_count, sections)?;
    let mut bounds = Vec::with_capacity(sections);
    let mut start = 0;
    for size in sizes {
        bounds.push((start, start + size));
        start += size;
    }
    let sec_fixed: Vec<u64> = bounds
        .iter()
        .map(|&(a, b)| prof.cells[a..b].iter().map(|c| c.fixed_bytes).sum())
        .collect();
    let sec_denom: Vec<u64> = bounds
        .iter()
        .map(|&(a, b)| prof.cells[a..b].iter().map(|c| c.denom_bytes).sum())
        .collect();
    let sec_tower: Vec<u64> = bounds.iter().map(|&(_, b)| prof.tower_bytes[b - 1]).collect();
    let mut plan = Vec::with_capacity(sections);
    let mut placed_fixed = 0u64;
    let mut placed_denom = 0u64;
    let mut placed_towers = 0u64;
    for n in 0..sections {
        placed_fixed += sec_fixed[n];
        placed_denom += sec_denom[n];
        placed_towers += sec_tower[n];
        let next_full = if n + 1 < sections {
            sec_tower[n + 1] + sec_fixed[n + 1] + sec_denom[n + 1]
        } else {
            0
        };
        let required = prof.stem_bytes + placed_towers + placed_fixed + next_full;
        if required > budget_bytes {
            return Err(CoreError::BudgetInfeasible {
                required,
                budget: budget_bytes,
            });
        }
        let avail = (budget_bytes - required) as f64;
        let target = if placed_denom == 0 {
            1.0
        } else {
            (avail / placed_denom as f64).min(1.0)
        };
        plan.push(Section {
            start: bounds[n].0,
            end: bounds[n].1,
            target,
        });
    }
    Ok(plan)
}

fn section_full_bytes(prof: &NetProfile, sec: &Section) -> u64 {
    let cells: u64 = prof.cells[sec.start..sec.end]
        .iter()
        .map(|c| c.fixed_bytes + c.denom_bytes)
        .sum();
    cells + prof.tower_bytes[sec.end - 1]
}

fn max_ratio(ratios: &[f64]) -> f64 {
    ratios.iter().fold(0.0, |a: f64, &b| a.max(b))
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

struct RunLog {
    history: Vec<EpochRow>,
    appends: Vec<AppendEvent>,
}

impl RunLog {
    fn new() -> Self {
        RunLog {
            history: Vec::new(),
            appends: Vec::new(),
        }
    }

    fn finish(
        self,
        net: &Hypernetwork,
        bank: &crate::params::ParamBank,
        plan: Vec<Section>,
        converged: bool,
    ) -> RunResult {
        let best = self
            .history
            .iter()
            .fold(0.0f64, |a, r| a.max(r.val_acc));
        let last = self.history.last().map_or(0.0, |r| r.val_acc);
        RunResult {
            converged,
            final_genotype: net.extract_genotype(),
            final_occupancy: net.cell_occupancy(),
            final_ratios: net.cell_ratio_values(bank),
            health: net.health(bank),
            best_val_acc: best,
            final_val_acc: last,
            accounted_bytes: net.accounted_bytes(),
            history: self.history,
            appends: self.appends,
            section_plan: plan,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_epoch(
    net: &Hypernetwork,
    bank: &mut crate::params::ParamBank,
    train: &Dataset,
    val: &Dataset,
    aug: &Augment,
    settings: &SearchSettings,
    epoch: u32,
    phase: Phase,
    section: usize,
    comp: Option<CompTarget>,
    train_rng: &mut ChaCha8Rng,
    log: &mut RunLog,
    obs: &mut dyn Observer,
) -> Result<()> {
    let lr = cosine_lr(epoch, settings.epoch_budget, settings.lr_max);
    let ts = TrainSettings {
        lr,
        momentum: settings.momentum,
        weight_decay: settings.weight_decay,
        drop_path: settings.drop_path,
        aux_weight: settings.aux_weight,
        batch: settings.batch,
        comp,
    };
    let tm = train_epoch(net, bank, train, aug, &ts, train_rng)?;
    let em = evaluate(net, bank, val, settings.batch)?;
    let row = EpochRow {
        epoch,
        phase,
        section,
        placed_cells: net.placed_cells(),
        loss_main: tm.loss_main,
        loss_aux: tm.loss_aux,
        loss_comp: tm.loss_comp,
        lambda: comp.map_or(0.0, |c| c.lambda),
        lr,
        train_acc: tm.train_acc,
        val_loss: em.loss,
        val_acc: em.acc,
        ratios: net.cell_ratio_values(bank),
        accounted_bytes: net.accounted_bytes(),
    };
    obs.epoch(net, bank, &row);
    log.history.push(row);
    Ok(())
}

/// The full memory-budgeted search: grow sections, prune between appends,
/// finish with free training. Always runs exactly `epoch_budget` epochs.
pub fn run_bonsai(
    settings: &SearchSettings,
    train: &Dataset,
    val: &Dataset,
    aug: &Augment,
    seed: u64,
    obs: &mut dyn Observer,
) -> Result<RunResult> {
    let g = settings.config.hyper_genotype();
    let prof = profile(&g, settings.batch);
    let plan = plan_sections(&prof, settings.sections, settings.budget_bytes)?;
    let mut bank = crate::params::ParamBank::new();
    let mut init_rng = rng_for(seed, STREAM_INIT);
    let mut train_rng = rng_for(seed, STREAM_TRAIN);
    let mode = GateMode::Trainable {
        m: settings.gate_m,
        init: settings.gate_init,
    };
    let mut net = Hypernetwork::new(g, mode, settings.batch, plan[0].end, &mut bank, &mut init_rng)?;
    let slack = 1.0 / settings.gate_m;
    let mut section_idx = 0usize;
    let mut phase = if plan.len() == 1 && plan[0].target >= 1.0 {
        Phase::Free
    } else {
        Phase::Prune
    };
    let mut epochs_in_phase = 0u32;
    let mut lambda0: Option<f64> = None;
    let mut log = RunLog::new();
    for epoch in 0..settings.epoch_budget {
        if phase == Phase::Prune {
            let target = plan[section_idx].target;
            if max_ratio(&net.cell_ratio_values(&bank)) <= target + slack {
                net.deadhead(&mut bank);
                if section_idx + 1 < plan.len() {
                    let next = plan[section_idx + 1];
                    let next_bytes = section_full_bytes(&prof, &next);
                    if net.accounted_bytes() + next_bytes <= settings.budget_bytes {
                        obs.pre_append(&net, &bank);
                        log.appends.push(AppendEvent {
                            epoch,
                            placed_after: next.end,
                            occupancy_before: net.cell_occupancy(),
                            ratios_before: net.cell_ratio_values(&bank),
                        });
                        net.append_section(&mut bank, &mut init_rng, next.end, true)?;
                        obs.post_append(&net, &bank);
                        section_idx += 1;
                        epochs_in_phase = 0;
                        lambda0 = None;
                        if section_idx + 1 == plan.len() && plan[section_idx].target >= 1.0 {
                            phase = Phase::Free;
                        }
                    }
                } else {
                    phase = Phase::Free;
                    epochs_in_phase = 0;
                    lambda0 = None;
                }
            } else if epochs_in_phase > 0 && epochs_in_phase % LAMBDA_DOUBLING_PERIOD == 0 {
                net.deadhead(&mut bank);
            }
        }
        let comp = if phase == Phase::Prune {
            let target = plan[section_idx].target;
            let base = match lambda0 {
                Some(v) => v,
                None => {
                    let v = probe_lambda(
                        &net,
                        &mut bank,
                        train,
                        settings.batch,
                        target,
                        settings.aux_weight,
                        settings.lambda0,
                    )?;
                    lambda0 = Some(v);
                    v
                }
            };
            let met = max_ratio(&net.cell_ratio_values(&bank)) <= target + slack;
            Some(CompTarget {
                target,
                lambda: lambda_schedule(epochs_in_phase, base, met),
            })
        } else {
            None
        };
        run_epoch(
            &net,
            &mut bank,
            train,
            val,
            aug,
            settings,
            epoch,
            phase,
            section_idx,
            comp,
            &mut train_rng,
            &mut log,
            obs,
        )?;
        epochs_in_phase += 1;
    }
    let converged = net.placed_cells() == net.total_cells();
    obs.finished(&net, &bank);
    Ok(log.finish(&net, &bank, plan, converged))
}

/// What a baseline run copies from the search run it is paired with.
#[derive(Debug, Clone)]
pub struct Reference {
    /// Epochs at which the search run appended a section.
    pub append_epochs: Vec<u32>,
    /// Per-cell occupancy of the cells already placed when the last section
    /// was appended.
    pub pre_final_occupancy: Vec<f64>,
    /// Per-cell occupancy at the end of the run.
    pub final_occupancy: Vec<f64>,
    /// Per-cell gate-weighted ratios at the end of the run.
    pub final_ratios: Vec<f64>,
}

impl Reference {
    pub fn from_result(r: &RunResult) -> Result<Reference> {
        if !r.converged {
            return Err(CoreError::Invalid(
                "reference run did not place all sections".into(),
            ));
        }
        let pre_final = r
            .appends
            .last()
            .map(|ev| ev.occupancy_before.clone())
            .unwrap_or_default();
        Ok(Reference {
            append_epochs: r.appends.iter().map(|ev| ev.epoch).collect(),
            pre_final_occupancy: pre_final,
            final_occupancy: r.final_occupancy.clone(),
            final_ratios: r.final_ratios.clone(),
        })
    }
}

fn sampled_from_targets(
    settings: &SearchSettings,
    targets: &[f64],
    seed: u64,
) -> Result<ModelGenotype> {
    let g = settings.config.hyper_genotype();
    let mut sample_rng = rng_for(seed, STREAM_SAMPLE);
    sample_genotype(&g, settings.batch, targets, OCCUPANCY_TOL, &mut sample_rng)
}

/// Level-1 baseline: a random architecture matching the search run's
/// occupancy profile at its final append, grown on the search run's append
/// schedule, with one prune phase toward the mean of the search run's final
/// ratios before free training.
pub fn run_level1(
    settings: &SearchSettings,
    reference: &Reference,
    train: &Dataset,
    val: &Dataset,
    aug: &Augment,
    seed: u64,
    obs: &mut dyn Observer,
) -> Result<RunResult> {
    let cell_count = settings.config.cell_count;
    let g = settings.config.hyper_genotype();
    let prof = profile(&g, settings.batch);
    let plan = plan_sections(&prof, settings.sections, settings.budget_bytes)?;
    let mut targets = vec![1.0; cell_count];
    for (i, &occ) in reference.pre_final_occupancy.iter().enumerate() {
        targets[i] = occ;
    }
    let sampled = sampled_from_targets(settings, &targets, seed)?;
    let mut bank = crate::params::ParamBank::new();
    let mut init_rng = rng_for(seed, STREAM_INIT);
    let mut train_rng = rng_for(seed, STREAM_TRAIN);
    let mode = GateMode::Trainable {
        m: settings.gate_m,
        init: settings.gate_init,
    };
    let mut net = Hypernetwork::new(
        sampled,
        mode,
        settings.batch,
        plan[0].end,
        &mut bank,
        &mut init_rng,
    )?;
    let prune_target = mean(&reference.final_ratios);
    let slack = 1.0 / settings.gate_m;
    let mut next_append = 0usize;
    let mut phase = if reference.append_epochs.is_empty() {
        Phase::Prune
    } else {
        Phase::Grow
    };
    let mut epochs_in_phase = 0u32;
    let mut lambda0: Option<f64> = None;
    let mut log = RunLog::new();
    for epoch in 0..settings.epoch_budget {
        if next_append < reference.append_epochs.len()
            && epoch >= reference.append_epochs[next_append]
        {
            let sec = plan[next_append + 1];
            obs.pre_append(&net, &bank);
            log.appends.push(AppendEvent {
                epoch,
                placed_after: sec.end,
                occupancy_before: net.cell_occupancy(),
                ratios_before: net.cell_ratio_values(&bank),
            });
            net.append_section(&mut bank, &mut init_rng, sec.end, false)?;
            obs.post_append(&net, &bank);
            next_append += 1;
            if next_append == reference.append_epochs.len() {
                phase = Phase::Prune;
                epochs_in_phase = 0;
                lambda0 = None;
            }
        }
        if phase == Phase::Prune
            && max_ratio(&net.cell_ratio_values(&bank)) <= prune_target + slack
        {
            net.deadhead(&mut bank);
            phase = Phase::Free;
            epochs_in_phase = 0;
            lambda0 = None;
        } else if phase == Phase::Prune
            && epochs_in_phase > 0
            && epochs_in_phase % LAMBDA_DOUBLING_PERIOD == 0
        {
            net.deadhead(&mut bank);
        }
        let comp = if phase == Phase::Prune {
            let base = match lambda0 {
                Some(v) => v,
                None => {
                    let v = probe_lambda(
                        &net,
                        &mut bank,
                        train,
                        settings.batch,
                        prune_target,
                        settings.aux_weight,
                        settings.lambda0,
                    )?;
                    lambda0 = Some(v);
                    v
                }
            };
            Some(CompTarget {
                target: prune_target,
                lambda: lambda_schedule(epochs_in_phase, base, false),
            })
        } else {
            None
        };
        let section = next_append.min(plan.len() - 1);
        run_epoch(
            &net,
            &mut bank,
            train,
            val,
            aug,
            settings,
            epoch,
            phase,
            section,
            comp,
            &mut train_rng,
            &mut log,
            obs,
        )?;
        epochs_in_phase += 1;
    }
    let converged = net.placed_cells() == net.total_cells();
    obs.finished(&net, &bank);
    Ok(log.finish(&net, &bank, plan, converged))
}

/// Level-2 baseline: a random architecture matching the search run's final
/// occupancy profile, fully placed from the start and trained plainly with
/// frozen gates.
pub fn run_level2(
    settings: &SearchSettings,
    reference: &Reference,
    train: &Dataset,
    val: &Dataset,
    aug: &Augment,
    seed: u64,
    obs: &mut dyn Observer,
) -> Result<RunResult> {
    let cell_count = settings.config.cell_count;
    if reference.final_occupancy.len() != cell_count {
        return Err(CoreError::Invalid(format!(
            "reference has {} cells, settings expect {cell_count}",
            reference.final_occupancy.len()
        )));
    }
    let sampled = sampled_from_targets(settings, &reference.final_occupancy, seed)?;
    let mut bank = crate::params::ParamBank::new();
    let mut init_rng = rng_for(seed, STREAM_INIT);
    let mut train_rng = rng_for(seed, STREAM_TRAIN);
    let net = Hypernetwork::new(
        sampled,
        GateMode::Frozen,
        settings.batch,
        cell_count,
        &mut bank,
        &mut init_rng,
    )?;
    let mut log = RunLog::new();
    for epoch in 0..settings.epoch_budget {
        run_epoch(
            &net,
            &mut bank,
            train,
            val,
            aug,
            settings,
            epoch,
            Phase::Free,
            settings.sections.saturating_sub(1),
            None,
            &mut train_rng,
            &mut log,
            obs,
        )?;
    }
    obs.finished(&net, &bank);
    Ok(log.finish(&net, &bank, Vec::new(), true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic;
    use crate::genotype::NetConfig;

    fn tiny_config(cells: usize) -> NetConfig {
        NetConfig {
            cell_count: cells,
            nodes_per_cell: 1,
            channels0: 4,
            input_shape: [3, 8, 8],
            class_count: 3,
        }
    }

    fn settings(cells: usize, sections: usize, budget: u64, epochs: u32) -> SearchSettings {
        SearchSettings {
            config: tiny_config(cells),
            sections,
            budget_bytes: budget,
            epoch_budget: epochs,
            gate_m: 1e5,
            gate_init: 0.02,
            lambda0: 0.01,
            lr_max: 0.05,
            momentum: 0.9,
            weight_decay: 3e-4,
            drop_path: 0.0,
            aux_weight: 0.4,
            batch: 8,
        }
    }

    fn tiny_data(seed: u64, per_class: usize) -> (Dataset, Dataset) {
        let mut rng = rng_for(seed, STREAM_DATA);
        let ds = synthetic(3, per_class, 3, 8, 8, &mut rng);
        let mut split_rng = rng_for(seed, STREAM_SPLIT);
        crate::data::split(&ds, 0.25, &mut split_rng)
    }

    #[test]
    fn sections_split_evenly_with_remainder_up_front() {
        assert_eq!(section_sizes(4, 2).unwrap(), vec![2, 2]);
        assert_eq!(section_sizes(5, 2).unwrap(), vec![3, 2]);
        assert_eq!(section_sizes(7, 3).unwrap(), vec![3, 2, 2]);
        assert!(section_sizes(2, 3).is_err());
        assert!(section_sizes(2, 0).is_err());
    }

    #[test]
    fn plan_targets_follow_budget_formula() {
        let g = tiny_config(4).hyper_genotype();
        let prof = profile(&g, 8);
        let fixed: Vec<u64> = prof.cells.iter().map(|c| c.fixed_bytes).collect();
        let denom: Vec<u64> = prof.cells.iter().map(|c| c.denom_bytes).collect();
        // budget chosen so the first target is exactly one half
        let overhead0 = prof.stem_bytes
            + prof.tower_bytes[1]
            + prof.tower_bytes[3]
            + fixed[0]
            + fixed[1]
            + fixed[2]
            + fixed[3]
            + denom[2]
            + denom[3];
        let budget = overhead0 + (denom[0] + denom[1]) / 2;
        let plan = plan_sections(&prof, 2, budget).unwrap();
        assert_eq!(plan[0].start, 0);
        assert_eq!(plan[0].end, 2);
        assert_eq!(plan[1].start, 2);
        assert_eq!(plan[1].end, 4);
        let expect0 = ((denom[0] + denom[1]) / 2) as f64 / (denom[0] + denom[1]) as f64;
        assert!((plan[0].target - expect0).abs() < 1e-12, "{}", plan[0].target);
        // final target re-admits the optional bytes freed by dropping the
        // next-section reservation
        let avail1 = budget - prof.stem_bytes
            - prof.tower_bytes[1]
            - prof.tower_bytes[3]
            - fixed.iter().sum::<u64>();
        let expect1 = (avail1 as f64 / denom.iter().sum::<u64>() as f64).min(1.0);
        assert!((plan[1].target - expect1).abs() < 1e-12);
    }

    #[test]
    fn plan_rejects_impossible_budget() {
        let g = tiny_config(4).hyper_genotype();
        let prof = profile(&g, 8);
        match plan_sections(&prof, 2, 1024) {
            Err(CoreError::BudgetInfeasible { required, budget }) => {
                assert_eq!(budget, 1024);
                assert!(required > 1024);
            }
            other => panic!("expected BudgetInfeasible, got {other:?}"),
        }
    }

    #[test]
    fn generous_budget_grows_immediately_and_trains_free() {
        let s = settings(2, 2, u64::MAX, 4);
        let (train, val) = tiny_data(11, 8);
        let aug = Augment::none();
        let r = run_bonsai(&s, &train, &val, &aug, 11, &mut NullObserver).unwrap();
        assert!(r.converged);
        assert_eq!(r.history.len(), 4);
        assert_eq!(r.appends.len(), 1);
        assert_eq!(r.appends[0].epoch, 0);
        assert_eq!(r.appends[0].placed_after, 2);
        // both targets are 1.0, so every epoch trains without the pull
        assert!(r.section_plan.iter().all(|sec| sec.target >= 1.0));
        assert!(r.history.iter().all(|row| row.phase == Phase::Free));
        assert!(r.history.iter().all(|row| row.lambda == 0.0));
        assert_eq!(r.history[0].placed_cells, 2);
        // free training never deadheads, so every item stays allocated even
        // if the task loss closes some gates
        assert_eq!(r.final_occupancy, vec![1.0, 1.0]);
    }

    #[test]
    fn binding_budget_prunes_then_appends() {
        let g = tiny_config(2).hyper_genotype();
        let prof = profile(&g, 8);
        // fit the second section only after cell 0 drops to ~55% of its
        // optional bytes
        let overhead = prof.stem_bytes
            + prof.tower_bytes[0]
            + prof.tower_bytes[1]
            + prof.cells[0].fixed_bytes
            + prof.cells[1].fixed_bytes
            + prof.cells[1].denom_bytes;
        let budget = overhead + (prof.cells[0].denom_bytes as f64 * 0.55) as u64;
        let s = settings(2, 2, budget, 48);
        let (train, val) = tiny_data(12, 16);
        let aug = Augment::none();
        let r = run_bonsai(&s, &train, &val, &aug, 12, &mut NullObserver).unwrap();
        assert!(r.converged, "search never placed the last section");
        assert_eq!(r.history.len(), 48);
        assert_eq!(r.appends.len(), 1);
        let append_epoch = r.appends[0].epoch;
        assert!(append_epoch > 0, "budget should bind at first");
        // before the append the run prunes, and the pull is active
        assert_eq!(r.history[0].phase, Phase::Prune);
        assert!(r.history[0].lambda > 0.0);
        // the appended epoch respects the budget
        for row in &r.history {
            assert!(row.accounted_bytes <= budget, "over budget at {}", row.epoch);
        }
        // ratios of cell 0 fell below the planned target plus slack
        let target = r.section_plan[0].target;
        assert!(r.appends[0].ratios_before[0] <= target + 1e-5);
        assert!(r.history.last().unwrap().placed_cells == 2);
    }

    #[test]
    fn runs_are_deterministic_per_seed() {
        let s = settings(2, 2, u64::MAX, 3);
        let (train, val) = tiny_data(13, 8);
        let aug = Augment::none();
        let a = run_bonsai(&s, &train, &val, &aug, 13, &mut NullObserver).unwrap();
        let b = run_bonsai(&s, &train, &val, &aug, 13, &mut NullObserver).unwrap();
        for (ra, rb) in a.history.iter().zip(&b.history) {
            assert_eq!(ra.loss_main.to_bits(), rb.loss_main.to_bits());
            assert_eq!(ra.val_acc.to_bits(), rb.val_acc.to_bits());
        }
        assert_eq!(a.final_ratios, b.final_ratios);
    }

    #[test]
    fn level2_trains_frozen_full_profile() {
        let s = settings(2, 2, u64::MAX, 3);
        let (train, val) = tiny_data(14, 8);
        let aug = Augment::none();
        let search = run_bonsai(&s, &train, &val, &aug, 14, &mut NullObserver).unwrap();
        let reference = Reference::from_result(&search).unwrap();
        assert_eq!(reference.final_occupancy, vec![1.0, 1.0]);
        let r = run_level2(&s, &reference, &train, &val, &aug, 99, &mut NullObserver).unwrap();
        assert!(r.converged);
        assert_eq!(r.history.len(), 3);
        assert!(r.history.iter().all(|row| row.phase == Phase::Free));
        assert!(r.history.iter().all(|row| row.loss_comp == 0.0));
        // frozen gates report unit ratios and leave nothing to deadhead
        assert_eq!(r.final_ratios, vec![1.0, 1.0]);
        assert_eq!(r.final_occupancy, vec![1.0, 1.0]);
    }

    #[test]
    fn level1_follows_reference_append_schedule() {
        let s = settings(2, 2, u64::MAX, 4);
        let (train, val) = tiny_data(15, 8);
        let aug = Augment::none();
        let search = run_bonsai(&s, &train, &val, &aug, 15, &mut NullObserver).unwrap();
        let reference = Reference::from_result(&search).unwrap();
        let r = run_level1(&s, &reference, &train, &val, &aug, 77, &mut NullObserver).unwrap();
        assert!(r.converged);
        assert_eq!(r.history.len(), 4);
        assert_eq!(r.appends.len(), 1);
        assert_eq!(r.appends[0].epoch, reference.append_epochs[0]);
        // towers are not kept on append, so no auxiliary loss appears
        assert!(r.history.iter().all(|row| row.loss_aux == 0.0));
        // reference prune target is 1.0 here, so the phase resolves to free
        let last = r.history.last().unwrap();
        assert_eq!(last.phase, Phase::Free);
    }
}
