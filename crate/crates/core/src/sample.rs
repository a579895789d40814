//! Random architecture sampling under per-cell byte-occupancy targets.
//!
//! The sampler starts from a fully connected genotype and randomly removes
//! gated connections until each cell's byte occupancy,
//! `(fixed + kept gated) / (fixed + all gated)`, lands within `tol` of its
//! target. Removing an optional inter-cell connection also removes the edge
//! operations drawing from it, mirroring what deadheading does during
//! search. A target below a cell's mandatory-machinery floor is
//! unattainable and is reported as such.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::data::shuffle;
use crate::error::{CoreError, Result};
use crate::genotype::{CellSpec, EdgeSource, EdgeSpec, ModelGenotype, NodeSpec, OpKind};
use crate::network::{gated_items, profile, GatedItem, ItemSite};

/// How many random removal orders to try per cell before giving up.
const SAMPLE_RESTARTS: usize = 200;

struct CellItems {
    fixed: u64,
    denom: u64,
    items: Vec<GatedItem>,
}

fn cell_occupancy(fixed: u64, denom: u64, kept: u64) -> f64 {
    (fixed + kept) as f64 / (fixed + denom) as f64
}

/// For each item index, the other item indices that die with it (edge ops on
/// a removed inter-cell slot).
fn dependents(items: &[GatedItem]) -> Vec<Vec<usize>> {
    items
        .iter()
        .map(|it| match it.site {
            ItemSite::InterCell { from } => items
                .iter()
                .enumerate()
                .filter(|(_, o)| {
                    matches!(o.site, ItemSite::Op { from: EdgeSource::Cell(j), .. } if j == from)
                })
                .map(|(oi, _)| oi)
                .collect(),
            ItemSite::Op { .. } => Vec::new(),
        })
        .collect()
}

fn removal_delta(cell: &CellItems, deps: &[Vec<usize>], kept: &[bool], i: usize) -> u64 {
    let mut delta = cell.items[i].size_bytes;
    for &d in &deps[i] {
        if kept[d] {
            delta += cell.items[d].size_bytes;
        }
    }
    delta
}

/// One removal pass in the given order: removes items while the occupancy
/// stays at or above `target - tol`, stopping once it is at or below
/// `target + tol`. Returns the kept flags and remaining gated bytes.
fn prune_pass(
    cell: &CellItems,
    deps: &[Vec<usize>],
    order: &[usize],
    target: f64,
    tol: f64,
) -> (Vec<bool>, u64) {
    let mut kept = vec![true; cell.items.len()];
    let mut kept_bytes = cell.denom;
    for &i in order {
        if cell_occupancy(cell.fixed, cell.denom, kept_bytes) <= target + tol {
            break;
        }
        if !kept[i] {
            continue;
        }
        let delta = removal_delta(cell, deps, &kept, i);
        if cell_occupancy(cell.fixed, cell.denom, kept_bytes - delta) >= target - tol {
            kept[i] = false;
            for &d in &deps[i] {
                kept[d] = false;
            }
            kept_bytes -= delta;
        }
    }
    (kept, kept_bytes)
}

/// Randomly prunes `hyper` so each cell's byte occupancy is within `tol` of
/// `targets[cell]`. Targets at or above `1 - tol` keep the cell untouched.
///
/// Item granularity can leave no subset inside the tolerance window (for
/// example a near-full target when even the smallest single removal
/// overshoots it). In that case the closest achievable occupancy found is
/// kept; it still never falls below `target - tol`.
pub fn sample_genotype(
    hyper: &ModelGenotype,
    batch: usize,
    targets: &[f64],
    tol: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ModelGenotype> {
    hyper.validate()?;
    if targets.len() != hyper.cells.len() {
        return Err(CoreError::Invalid(format!(
            "{} targets for {} cells",
            targets.len(),
            hyper.cells.len()
        )));
    }
    let prof = profile(hyper, batch);
    let all_items = gated_items(hyper, batch);
    let mut cells = Vec::with_capacity(hyper.cells.len());
    for (i, spec) in hyper.cells.iter().enumerate() {
        let cell = CellItems {
            fixed: prof.cells[i].fixed_bytes,
            denom: prof.cells[i].denom_bytes,
            items: all_items.iter().filter(|it| it.cell == i).copied().collect(),
        };
        let target = targets[i];
        let floor = cell.fixed as f64 / (cell.fixed + cell.denom) as f64;
        if target < floor - tol {
            return Err(CoreError::UnattainableRatio {
                cell: i,
                floor,
                target,
            });
        }
        if target >= 1.0 - tol {
            cells.push(rebuild_cell(spec, &cell.items, &vec![true; cell.items.len()]));
            continue;
        }
        let deps = dependents(&cell.items);
        let mut order: Vec<usize> = (0..cell.items.len()).collect();
        let mut chosen = None;
        let mut best: Option<(Vec<bool>, f64)> = None;
        for _ in 0..SAMPLE_RESTARTS {
            shuffle(&mut order, rng);
            let (kept, kept_bytes) = prune_pass(&cell, &deps, &order, target, tol);
            let occ = cell_occupancy(cell.fixed, cell.denom, kept_bytes);
            if occ <= target + tol {
                chosen = Some(kept);
                break;
            }
            if best
                .as_ref()
                .is_none_or(|&(_, b)| (occ - target).abs() < (b - target).abs())
            {
                best = Some((kept, occ));
            }
        }
        let kept = chosen.unwrap_or_else(|| {
            // No random order landed in the window: approach it from above in
            // the finest steps available, then keep the closest state seen.
            let all = vec![true; cell.items.len()];
            let static_delta: Vec<u64> = (0..cell.items.len())
                .map(|j| removal_delta(&cell, &deps, &all, j))
                .collect();
            order.sort_by_key(|&j| static_delta[j]);
            let (kept, kept_bytes) = prune_pass(&cell, &deps, &order, target, tol);
            let occ = cell_occupancy(cell.fixed, cell.denom, kept_bytes);
            match best {
                Some((b, bocc)) if (bocc - target).abs() < (occ - target).abs() => b,
                _ => kept,
            }
        });
        cells.push(rebuild_cell(spec, &cell.items, &kept));
    }
    let sampled = ModelGenotype {
        channels0: hyper.channels0,
        input_shape: hyper.input_shape,
        class_count: hyper.class_count,
        cells,
    };
    sampled.validate()?;
    Ok(sampled)
}

fn rebuild_cell(spec: &CellSpec, items: &[GatedItem], kept: &[bool]) -> CellSpec {
    let kept_op = |node: usize, from: EdgeSource, op: OpKind| {
        items
            .iter()
            .zip(kept)
            .any(|(it, &k)| k && it.site == ItemSite::Op { node, from, op })
    };
    let kept_conn = |from: usize| {
        items
            .iter()
            .zip(kept)
            .any(|(it, &k)| k && it.site == ItemSite::InterCell { from })
    };
    let mandatory = spec.mandatory_source();
    let incoming: Vec<usize> = spec
        .incoming_cells
        .iter()
        .copied()
        .filter(|&j| kept_conn(j))
        .collect();
    let nodes = spec
        .nodes
        .iter()
        .enumerate()
        .map(|(k, node)| {
            let sources = node
                .sources
                .iter()
                .filter_map(|edge| {
                    if let EdgeSource::Cell(j) = edge.from {
                        if j != spec.index.wrapping_sub(1) && !incoming.contains(&j) {
                            return None;
                        }
                    }
                    let ops: Vec<OpKind> = edge
                        .ops
                        .iter()
                        .copied()
                        .filter(|&op| kept_op(k, edge.from, op))
                        .collect();
                    if edge.from == mandatory || !ops.is_empty() {
                        Some(EdgeSpec {
                            from: edge.from,
                            ops,
                        })
                    } else {
                        None
                    }
                })
                .collect();
            NodeSpec { sources }
        })
        .collect();
    CellSpec {
        index: spec.index,
        kind: spec.kind,
        incoming_cells: incoming,
        nodes,
    }
}

/// Occupancy of `sampled` relative to `hyper`, cell by cell.
pub fn occupancy_against(
    hyper: &ModelGenotype,
    sampled: &ModelGenotype,
    batch: usize,
) -> Vec<f64> {
    let hp = profile(hyper, batch);
    let sp = profile(sampled, batch);
    hp.cells
        .iter()
        .zip(&sp.cells)
        .map(|(h, s)| {
            debug_assert_eq!(h.fixed_bytes, s.fixed_bytes);
            (s.fixed_bytes + s.denom_bytes) as f64 / (h.fixed_bytes + h.denom_bytes) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genotype::NetConfig;
    use rand::SeedableRng;

    fn hyper() -> ModelGenotype {
        NetConfig {
            cell_count: 4,
            nodes_per_cell: 2,
            channels0: 8,
            input_shape: [3, 12, 12],
            class_count: 3,
        }
        .hyper_genotype()
    }

    #[test]
    fn sampled_occupancy_hits_targets() {
        let h = hyper();
        let targets = vec![0.5, 0.6, 0.4, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let s = sample_genotype(&h, 4, &targets, 0.02, &mut rng).unwrap();
        s.validate().unwrap();
        let occ = occupancy_against(&h, &s, 4);
        for (i, (&o, &t)) in occ.iter().zip(&targets).enumerate() {
            assert!((o - t).abs() <= 0.02 + 1e-12, "cell {i}: {o} vs {t}");
        }
    }

    #[test]
    fn full_target_keeps_cell_intact() {
        let h = hyper();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_genotype(&h, 4, &[1.0; 4], 0.02, &mut rng).unwrap();
        assert_eq!(s, h);
    }

    #[test]
    fn below_floor_is_unattainable() {
        let h = hyper();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let err = sample_genotype(&h, 4, &[0.0, 1.0, 1.0, 1.0], 0.02, &mut rng).unwrap_err();
        match err {
            CoreError::UnattainableRatio { cell, floor, target } => {
                assert_eq!(cell, 0);
                assert!(floor > 0.0 && target == 0.0);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let h = hyper();
        let targets = vec![0.5, 0.5, 0.5, 0.5];
        let a = sample_genotype(&h, 4, &targets, 0.02, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample_genotype(&h, 4, &targets, 0.02, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let c = sample_genotype(&h, 4, &targets, 0.02, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn removing_connection_removes_its_edge_ops() {
        let h = hyper();
        // push cell 3 low enough that inter-cell connections tend to go
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sample_genotype(&h, 4, &[1.0, 1.0, 1.0, 0.35], 0.02, &mut rng).unwrap();
        for node in &s.cells[3].nodes {
            for edge in &node.sources {
                if let EdgeSource::Cell(j) = edge.from {
                    if j != 2 {
                        assert!(s.cells[3].incoming_cells.contains(&j));
                    }
                }
            }
        }
        s.validate().unwrap();
    }
}
