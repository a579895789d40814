//! Descriptive statistics over discovered architectures.

use alloc::vec::Vec;

use crate::genotype::{CellKind, ModelGenotype, OpKind};

/// Aggregate structure report for one genotype.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchStats {
    /// Kept operations per kind (indexed like [`OpKind::ALL`]) in normal
    /// cells.
    pub op_counts_normal: [usize; 7],
    /// Same for reduction cells.
    pub op_counts_reduction: [usize; 7],
    /// Histogram over live gated inter-cell connections: index is the hop
    /// distance `i - j`, value the count. Distances below 2 cannot occur.
    pub connection_distances: Vec<usize>,
    /// Edges where identity is kept alongside at least one convolution, so
    /// the node sums a transformed and an untransformed path.
    pub residual_edges: usize,
    pub total_edges: usize,
    pub total_ops: usize,
}

fn op_index(op: OpKind) -> usize {
    OpKind::ALL.iter().position(|&o| o == op).unwrap()
}

fn is_conv(op: OpKind) -> bool {
    matches!(
        op,
        OpKind::SepConv3 | OpKind::SepConv5 | OpKind::DilConv3 | OpKind::DilConv5
    )
}

fn bump(hist: &mut Vec<usize>, d: usize) {
    if hist.len() <= d {
        hist.resize(d + 1, 0);
    }
    hist[d] += 1;
}

pub fn architecture_statistics(g: &ModelGenotype) -> ArchStats {
    let mut stats = ArchStats {
        op_counts_normal: [0; 7],
        op_counts_reduction: [0; 7],
        connection_distances: Vec::new(),
        residual_edges: 0,
        total_edges: 0,
        total_ops: 0,
    };
    for cell in &g.cells {
        for &j in &cell.incoming_cells {
            bump(&mut stats.connection_distances, cell.index - j);
        }
        let counts = match cell.kind {
            CellKind::Normal => &mut stats.op_counts_normal,
            CellKind::Reduction => &mut stats.op_counts_reduction,
        };
        for node in &cell.nodes {
            for edge in &node.sources {
                stats.total_edges += 1;
                stats.total_ops += edge.ops.len();
                for &op in &edge.ops {
                    counts[op_index(op)] += 1;
                }
                if edge.ops.contains(&OpKind::Identity) && edge.ops.iter().any(|&o| is_conv(o)) {
                    stats.residual_edges += 1;
                }
            }
        }
    }
    stats
}

/// Mean hop distance of live gated connections, if any exist.
pub fn mean_connection_distance(stats: &ArchStats) -> Option<f64> {
    let total: usize = stats.connection_distances.iter().sum();
    if total == 0 {
        return None;
    }
    let weighted: usize = stats
        .connection_distances
        .iter()
        .enumerate()
        .map(|(d, &c)| d * c)
        .sum();
    Some(weighted as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genotype::{CellSpec, EdgeSource, EdgeSpec, NetConfig, NodeSpec};

    fn tiny() -> ModelGenotype {
        ModelGenotype {
            channels0: 8,
            input_shape: [3, 8, 8],
            class_count: 2,
            cells: vec![
                CellSpec {
                    index: 0,
                    kind: CellKind::Normal,
                    incoming_cells: vec![],
                    nodes: vec![NodeSpec {
                        sources: vec![EdgeSpec {
                            from: EdgeSource::Stem,
                            ops: vec![OpKind::Identity, OpKind::SepConv3],
                        }],
                    }],
                },
                CellSpec {
                    index: 1,
                    kind: CellKind::Reduction,
                    incoming_cells: vec![],
                    nodes: vec![NodeSpec {
                        sources: vec![EdgeSpec {
                            from: EdgeSource::Cell(0),
                            ops: vec![OpKind::MaxPool3],
                        }],
                    }],
                },
                CellSpec {
                    index: 2,
                    kind: CellKind::Normal,
                    incoming_cells: vec![0],
                    nodes: vec![NodeSpec {
                        sources: vec![
                            EdgeSpec {
                                from: EdgeSource::Cell(1),
                                ops: vec![OpKind::AvgPool3],
                            },
                            EdgeSpec {
                                from: EdgeSource::Cell(0),
                                ops: vec![OpKind::DilConv5],
                            },
                        ],
                    }],
                },
            ],
        }
    }

    #[test]
    fn counts_by_cell_kind() {
        let g = tiny();
        g.validate().unwrap();
        let s = architecture_statistics(&g);
        assert_eq!(s.op_counts_normal[op_index(OpKind::Identity)], 1);
        assert_eq!(s.op_counts_normal[op_index(OpKind::SepConv3)], 1);
        assert_eq!(s.op_counts_normal[op_index(OpKind::AvgPool3)], 1);
        assert_eq!(s.op_counts_normal[op_index(OpKind::DilConv5)], 1);
        assert_eq!(s.op_counts_reduction[op_index(OpKind::MaxPool3)], 1);
        assert_eq!(s.total_edges, 4);
        assert_eq!(s.total_ops, 5);
    }

    #[test]
    fn residual_pattern_needs_identity_plus_conv() {
        let s = architecture_statistics(&tiny());
        assert_eq!(s.residual_edges, 1);
    }

    #[test]
    fn distance_histogram_counts_gated_hops() {
        let s = architecture_statistics(&tiny());
        assert_eq!(s.connection_distances, vec![0, 0, 1]);
        assert_eq!(mean_connection_distance(&s), Some(2.0));
    }

    #[test]
    fn hyper_genotype_distances() {
        let g = NetConfig {
            cell_count: 5,
            nodes_per_cell: 1,
            channels0: 4,
            input_shape: [3, 8, 8],
            class_count: 2,
        }
        .hyper_genotype();
        let s = architecture_statistics(&g);
        // cells 2..4 take all earlier-by-2 cells: distances 2,2,3,2,3,4
        assert_eq!(s.connection_distances, vec![0, 0, 3, 2, 1]);
    }
}
