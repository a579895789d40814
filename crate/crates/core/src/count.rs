//! Search-space counting.
//!
//! Every edge independently carries any subset of the `k` candidate
//! operations (the empty subset removes the edge), so an edge contributes a
//! factor of `2^k` and a cell with `E` edges has `2^(k*E)` configurations.
//! A cell with `n` nodes and `c` ungated input slots has
//! `E = n*c + n*(n-1)/2` edges. Optional gated inter-cell connections are
//! counted separately: an `L`-cell network has `(L-2)*(L-1)/2` of them, hence
//! `2^((L-2)*(L-1)/2)` possible connection sets.
//!
//! [`enumerate_cell_space`] is an independent oracle: it walks every
//! configuration explicitly and confirms the closed form on small spaces.

use alloc::vec;
use alloc::vec::Vec;

use num_bigint::BigUint;

/// Edges inside one cell: `nodes * cell_inputs + nodes*(nodes-1)/2`.
pub fn cell_edge_count(nodes: u64, cell_inputs: u64) -> u64 {
    nodes * cell_inputs + nodes * (nodes - 1) / 2
}

/// `2^(ops * edges)` distinct cell configurations.
pub fn count_cell_space(nodes: u64, ops: u64, cell_inputs: u64) -> BigUint {
    let bits = ops * cell_edge_count(nodes, cell_inputs);
    BigUint::from(1u8) << usize::try_from(bits).expect("exponent fits usize")
}

/// Optional gated inter-cell connections in an `L`-cell chain: cell `i` may
/// take cells `0..=i-2`, so `sum_{i=2}^{L-1} (i-1)`.
pub fn optional_connection_count(cells: u64) -> u64 {
    if cells < 2 {
        0
    } else {
        (cells - 2) * (cells - 1) / 2
    }
}

/// `2^(optional connections)` possible inter-cell connection sets.
pub fn count_connection_sets(cells: u64) -> BigUint {
    BigUint::from(1u8) << usize::try_from(optional_connection_count(cells)).expect("fits usize")
}

/// Walks the whole cell space configuration-by-configuration and returns the
/// number visited, or `None` once the count would exceed `cap`. Each edge is
/// an independent bitmask over ops; the walk also checks that no
/// configuration repeats.
pub fn enumerate_cell_space(nodes: u64, ops: u64, cell_inputs: u64, cap: u64) -> Option<u64> {
    assert!(ops <= 16, "enumeration oracle is for small op sets");
    let edges = usize::try_from(cell_edge_count(nodes, cell_inputs)).unwrap();
    let per_edge: u32 = 1u32 << ops;
    let mut odometer = vec![0u32; edges];
    let mut seen: Vec<Vec<u32>> = Vec::new();
    let mut count: u64 = 0;
    loop {
        count += 1;
        if count > cap {
            return None;
        }
        seen.push(odometer.clone());
        // advance the odometer; done when every digit wraps
        let mut pos = 0;
        loop {
            if pos == edges {
                let total = count;
                seen.sort_unstable();
                seen.dedup();
                assert_eq!(seen.len() as u64, total, "enumeration revisited a configuration");
                return Some(total);
            }
            odometer[pos] += 1;
            if odometer[pos] < per_edge {
                break;
            }
            odometer[pos] = 0;
            pos += 1;
        }
    }
}

/// Lossy conversion for order-of-magnitude comparisons.
pub fn to_f64(n: &BigUint) -> f64 {
    // accumulate the base-2^32 digits, most significant first
    let mut acc = 0.0f64;
    for &d in n.to_u32_digits().iter().rev() {
        acc = acc * 4294967296.0 + d as f64;
    }
    acc
}
