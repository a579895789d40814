//! Architecture description: cells, nodes, edges, and the operations on them.
//!
//! A network is a stem convolution followed by a chain of cells. Cell `i`
//! always receives the output of cell `i - 1` (the spine; for cell 0 this is
//! the stem) and the stem features; cells `j <= i - 2` are optional inputs
//! guarded by trainable gates. Inside a cell, every node sums edges from the
//! cell's input slots and from earlier nodes, and each edge carries a subset
//! of the seven candidate operations.
//!
//! The fully hyper-connected genotype ([`NetConfig::hyper_genotype`]) enables
//! every optional connection and every operation; search prunes it down.
//! [`ModelGenotype`] is also the exchange format for discovered
//! architectures: under the `serde` feature it round-trips through JSON.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};

/// The seven candidate edge operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    Identity,
    AvgPool3,
    MaxPool3,
    SepConv3,
    SepConv5,
    DilConv3,
    DilConv5,
}

impl OpKind {
    pub const ALL: [OpKind; 7] = [
        OpKind::Identity,
        OpKind::AvgPool3,
        OpKind::MaxPool3,
        OpKind::SepConv3,
        OpKind::SepConv5,
        OpKind::DilConv3,
        OpKind::DilConv5,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Identity => "identity",
            OpKind::AvgPool3 => "avg_pool3",
            OpKind::MaxPool3 => "max_pool3",
            OpKind::SepConv3 => "sep_conv3",
            OpKind::SepConv5 => "sep_conv5",
            OpKind::DilConv3 => "dil_conv3",
            OpKind::DilConv5 => "dil_conv5",
        }
    }

    pub fn parse(s: &str) -> Option<OpKind> {
        OpKind::ALL.iter().copied().find(|op| op.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Normal,
    Reduction,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::Normal => "normal",
            CellKind::Reduction => "reduction",
        }
    }

    pub fn parse(s: &str) -> Option<CellKind> {
        match s {
            "normal" => Some(CellKind::Normal),
            "reduction" => Some(CellKind::Reduction),
            _ => None,
        }
    }
}

/// Where an edge draws its input from, relative to the owning cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeSource {
    /// Stem features (an ungated input slot of every cell).
    Stem,
    /// Output of cell `j`. `j == i - 1` is the mandatory spine; `j <= i - 2`
    /// is an optional gated connection.
    Cell(usize),
    /// An earlier node of the same cell.
    Node(usize),
}

impl EdgeSource {
    pub fn describe(self) -> String {
        match self {
            EdgeSource::Stem => String::from("stem"),
            EdgeSource::Cell(j) => format!("cell:{j}"),
            EdgeSource::Node(k) => format!("node:{k}"),
        }
    }

    pub fn parse(s: &str) -> Option<EdgeSource> {
        if s == "stem" {
            return Some(EdgeSource::Stem);
        }
        if let Some(rest) = s.strip_prefix("cell:") {
            return rest.parse().ok().map(EdgeSource::Cell);
        }
        if let Some(rest) = s.strip_prefix("node:") {
            return rest.parse().ok().map(EdgeSource::Node);
        }
        None
    }
}

/// One edge of a node: a source plus the operations kept on it. The ops list
/// may be empty only on a mandatory edge, where it means the fallback path
/// (identity, or the reduction adapter) is all that remains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSpec {
    pub from: EdgeSource,
    pub ops: Vec<OpKind>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSpec {
    pub sources: Vec<EdgeSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellSpec {
    pub index: usize,
    pub kind: CellKind,
    /// Live optional gated inputs, a sorted subset of `0..index - 1`
    /// excluding `index - 1`. The spine and the stem are implied.
    pub incoming_cells: Vec<usize>,
    pub nodes: Vec<NodeSpec>,
}

impl CellSpec {
    /// The input slot every node of this cell must keep an edge from.
    pub fn mandatory_source(&self) -> EdgeSource {
        if self.index == 0 {
            EdgeSource::Stem
        } else {
            EdgeSource::Cell(self.index - 1)
        }
    }

    /// Input slots in canonical order: spine, then stem (distinct from the
    /// spine only for `index >= 1`), then live optional cells ascending.
    pub fn input_slots(&self) -> Vec<EdgeSource> {
        let mut slots = Vec::with_capacity(2 + self.incoming_cells.len());
        slots.push(self.mandatory_source());
        if self.index >= 1 {
            slots.push(EdgeSource::Stem);
        }
        for &j in &self.incoming_cells {
            slots.push(EdgeSource::Cell(j));
        }
        slots
    }
}

/// A complete architecture: enough to rebuild the network without any other
/// context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelGenotype {
    pub channels0: usize,
    /// Input as `[channels, height, width]`.
    pub input_shape: [usize; 3],
    pub class_count: usize,
    pub cells: Vec<CellSpec>,
}

/// Structural hyperparameters of the search network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub cell_count: usize,
    pub nodes_per_cell: usize,
    pub channels0: usize,
    /// Input as `[channels, height, width]`.
    pub input_shape: [usize; 3],
    pub class_count: usize,
}

impl NetConfig {
    /// Cells at `floor(L/3)` and `floor(2L/3)` reduce spatially and double
    /// channels.
    pub fn reduction_indices(&self) -> Vec<usize> {
        let l = self.cell_count;
        let mut idx = vec![l / 3, 2 * l / 3];
        idx.dedup();
        idx.retain(|&i| i < l);
        idx
    }

    pub fn cell_kind(&self, index: usize) -> CellKind {
        if self.reduction_indices().contains(&index) {
            CellKind::Reduction
        } else {
            CellKind::Normal
        }
    }

    /// The fully hyper-connected genotype: every optional inter-cell
    /// connection live and every edge carrying all seven operations.
    pub fn hyper_genotype(&self) -> ModelGenotype {
        let cells = (0..self.cell_count)
            .map(|i| {
                let incoming: Vec<usize> = if i >= 2 { (0..=i - 2).collect() } else { Vec::new() };
                let spec = CellSpec {
                    index: i,
                    kind: self.cell_kind(i),
                    incoming_cells: incoming,
                    nodes: Vec::new(),
                };
                let slots = spec.input_slots();
                let nodes = (0..self.nodes_per_cell)
                    .map(|k| {
                        let mut sources: Vec<EdgeSpec> = slots
                            .iter()
                            .map(|&from| EdgeSpec {
                                from,
                                ops: OpKind::ALL.to_vec(),
                            })
                            .collect();
                        for prev in 0..k {
                            sources.push(EdgeSpec {
                                from: EdgeSource::Node(prev),
                                ops: OpKind::ALL.to_vec(),
                            });
                        }
                        NodeSpec { sources }
                    })
                    .collect();
                CellSpec { nodes, ..spec }
            })
            .collect();
        ModelGenotype {
            channels0: self.channels0,
            input_shape: self.input_shape,
            class_count: self.class_count,
            cells,
        }
    }
}

impl ModelGenotype {
    /// Total trainable gates if this genotype were instrumented for search:
    /// one per (edge, op) pair plus one per optional inter-cell connection.
    pub fn gate_count(&self) -> usize {
        let mut n = 0;
        for cell in &self.cells {
            n += cell.incoming_cells.len();
            for node in &cell.nodes {
                for edge in &node.sources {
                    n += edge.ops.len();
                }
            }
        }
        n
    }

    /// Checks internal consistency; errors name the offending cell and node.
    pub fn validate(&self) -> Result<()> {
        if self.channels0 == 0 {
            return Err(CoreError::Invalid("channels0 must be positive".into()));
        }
        if self.class_count < 2 {
            return Err(CoreError::Invalid("class_count must be at least 2".into()));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(CoreError::Invalid("input_shape must be nonzero".into()));
        }
        for (i, cell) in self.cells.iter().enumerate() {
            if cell.index != i {
                return Err(CoreError::Invalid(format!(
                    "cell {i} carries index {}",
                    cell.index
                )));
            }
            let mut prev = None;
            for &j in &cell.incoming_cells {
                if i < 2 || j > i - 2 {
                    return Err(CoreError::Invalid(format!(
                        "cell {i}: incoming cell {j} is not an optional source"
                    )));
                }
                if prev.is_some_and(|p| p >= j) {
                    return Err(CoreError::Invalid(format!(
                        "cell {i}: incoming cells must be strictly ascending"
                    )));
                }
                prev = Some(j);
            }
            if cell.nodes.is_empty() {
                return Err(CoreError::Invalid(format!("cell {i} has no nodes")));
            }
            let slots = cell.input_slots();
            let mandatory = cell.mandatory_source();
            for (k, node) in cell.nodes.iter().enumerate() {
                let mut seen: Vec<EdgeSource> = Vec::new();
                let mut has_mandatory = false;
                for edge in &node.sources {
                    if seen.contains(&edge.from) {
                        return Err(CoreError::Invalid(format!(
                            "cell {i} node {k}: duplicate edge from {}",
                            edge.from.describe()
                        )));
                    }
                    seen.push(edge.from);
                    let valid = match edge.from {
                        EdgeSource::Node(p) => p < k,
                        src => slots.contains(&src),
                    };
                    if !valid {
                        return Err(CoreError::Invalid(format!(
                            "cell {i} node {k}: edge from {} is out of scope",
                            edge.from.describe()
                        )));
                    }
                    if edge.from == mandatory {
                        has_mandatory = true;
                    } else if edge.ops.is_empty() {
                        return Err(CoreError::Invalid(format!(
                            "cell {i} node {k}: optional edge from {} has no ops",
                            edge.from.describe()
                        )));
                    }
                    let mut prev_op = None;
                    for &op in &edge.ops {
                        if prev_op.is_some_and(|p: OpKind| p >= op) {
                            return Err(CoreError::Invalid(format!(
                                "cell {i} node {k}: ops on {} must be unique and in \
                                 canonical order",
                                edge.from.describe()
                            )));
                        }
                        prev_op = Some(op);
                    }
                }
                if !has_mandatory {
                    return Err(CoreError::Invalid(format!(
                        "cell {i} node {k}: missing mandatory edge from {}",
                        mandatory.describe()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(feature = "serde")]
mod serde_impl {
    use super::*;
    use serde::de::Error as DeError;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    impl Serialize for OpKind {
        fn serialize<S: Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
            s.serialize_str(self.name())
        }
    }

    impl<'de> Deserialize<'de> for OpKind {
        fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
            let s = String::deserialize(d)?;
            OpKind::parse(&s).ok_or_else(|| D::Error::custom(format!("unknown op {s:?}")))
        }
    }

    impl Serialize for CellKind {
        fn serialize<S: Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
            s.serialize_str(self.name())
        }
    }

    impl<'de> Deserialize<'de> for CellKind {
        fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
            let s = String::deserialize(d)?;
            CellKind::parse(&s).ok_or_else(|| D::Error::custom(format!("unknown cell kind {s:?}")))
        }
    }

    impl Serialize for EdgeSource {
        fn serialize<S: Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
            s.serialize_str(&self.describe())
        }
    }

    impl<'de> Deserialize<'de> for EdgeSource {
        fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
            let s = String::deserialize(d)?;
            EdgeSource::parse(&s).ok_or_else(|| D::Error::custom(format!("bad edge source {s:?}")))
        }
    }

    #[derive(Serialize, Deserialize)]
    struct EdgeRepr {
        from: EdgeSource,
        ops: Vec<OpKind>,
    }

    #[derive(Serialize, Deserialize)]
    struct NodeRepr {
        sources: Vec<EdgeRepr>,
    }

    #[derive(Serialize, Deserialize)]
    struct CellRepr {
        index: usize,
        kind: CellKind,
        incoming_cells: Vec<usize>,
        nodes: Vec<NodeRepr>,
    }

    #[derive(Serialize, Deserialize)]
    struct GenotypeRepr {
        channels0: usize,
        input_shape: [usize; 3],
        class_count: usize,
        cells: Vec<CellRepr>,
    }

    impl Serialize for ModelGenotype {
        fn serialize<S: Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
            let repr = GenotypeRepr {
                channels0: self.channels0,
                input_shape: self.input_shape,
                class_count: self.class_count,
                cells: self
                    .cells
                    .iter()
                    .map(|c| CellRepr {
                        index: c.index,
                        kind: c.kind,
                        incoming_cells: c.incoming_cells.clone(),
                        nodes: c
                            .nodes
                            .iter()
                            .map(|n| NodeRepr {
                                sources: n
                                    .sources
                                    .iter()
                                    .map(|e| EdgeRepr {
                                        from: e.from,
                                        ops: e.ops.clone(),
                                    })
                                    .collect(),
                            })
                            .collect(),
                    })
                    .collect(),
            };
            repr.serialize(s)
        }
    }

    impl<'de> Deserialize<'de> for ModelGenotype {
        fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
            let repr = GenotypeRepr::deserialize(d)?;
            Ok(ModelGenotype {
                channels0: repr.channels0,
                input_shape: repr.input_shape,
                class_count: repr.class_count,
                cells: repr
                    .cells
                    .into_iter()
                    .map(|c| CellSpec {
                        index: c.index,
                        kind: c.kind,
                        incoming_cells: c.incoming_cells,
                        nodes: c
                            .nodes
                            .into_iter()
                            .map(|n| NodeSpec {
                                sources: n
                                    .sources
                                    .into_iter()
                                    .map(|e| EdgeSpec {
                                        from: e.from,
                                        ops: e.ops,
                                    })
                                    .collect(),
                            })
                            .collect(),
                    })
                    .collect(),
            })
        }
    }

    impl ModelGenotype {
        /// Pretty JSON for artifact files.
        pub fn to_json_string(&self) -> Result<String> {
            serde_json::to_string_pretty(self)
                .map_err(|e| CoreError::Parse(format!("genotype serialize: {e}")))
        }

        /// Parses and validates a genotype document.
        pub fn from_json_str(s: &str) -> Result<ModelGenotype> {
            let g: ModelGenotype = serde_json::from_str(s)
                .map_err(|e| CoreError::Parse(format!("genotype parse: {e}")))?;
            g.validate()?;
            Ok(g)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> NetConfig {
        NetConfig {
            cell_count: 4,
            nodes_per_cell: 2,
            channels0: 16,
            input_shape: [3, 12, 12],
            class_count: 3,
        }
    }

    #[test]
    fn op_names_round_trip() {
        for op in OpKind::ALL {
            assert_eq!(OpKind::parse(op.name()), Some(op));
        }
        assert_eq!(OpKind::parse("conv7"), None);
    }

    #[test]
    fn edge_source_round_trip() {
        for src in [EdgeSource::Stem, EdgeSource::Cell(3), EdgeSource::Node(1)] {
            assert_eq!(EdgeSource::parse(&src.describe()), Some(src));
        }
        assert_eq!(EdgeSource::parse("cell:x"), None);
    }

    #[test]
    fn reductions_sit_at_thirds() {
        assert_eq!(tiny_config().reduction_indices(), vec![1, 2]);
        let big = NetConfig {
            cell_count: 8,
            ..tiny_config()
        };
        assert_eq!(big.reduction_indices(), vec![2, 5]);
    }

    #[test]
    fn two_cell_hyper_network_has_21_gates() {
        let cfg = NetConfig {
            cell_count: 2,
            nodes_per_cell: 1,
            channels0: 8,
            input_shape: [3, 8, 8],
            class_count: 2,
        };
        let g = cfg.hyper_genotype();
        // cell 0: one slot (stem) * 7 ops; cell 1: spine + stem slots * 7 ops
        assert_eq!(g.gate_count(), 21);
        g.validate().unwrap();
    }

    #[test]
    fn hyper_genotype_wires_all_slots() {
        let g = tiny_config().hyper_genotype();
        g.validate().unwrap();
        assert_eq!(g.cells.len(), 4);
        assert_eq!(g.cells[0].input_slots(), vec![EdgeSource::Stem]);
        assert_eq!(
            g.cells[3].input_slots(),
            vec![EdgeSource::Cell(2), EdgeSource::Stem, EdgeSource::Cell(0), EdgeSource::Cell(1)]
        );
        // second node also sees the first node
        let n1 = &g.cells[3].nodes[1];
        assert!(n1.sources.iter().any(|e| e.from == EdgeSource::Node(0)));
        assert_eq!(n1.sources.len(), 5);
    }

    #[test]
    fn validation_rejects_missing_mandatory_edge() {
        let mut g = tiny_config().hyper_genotype();
        g.cells[2].nodes[0].sources.retain(|e| e.from != EdgeSource::Cell(1));
        let err = g.validate().unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("cell 2 node 0"), "{msg}");
        assert!(msg.contains("cell:1"), "{msg}");
    }

    #[test]
    fn validation_rejects_out_of_scope_source() {
        let mut g = tiny_config().hyper_genotype();
        g.cells[1].nodes[0].sources.push(EdgeSpec {
            from: EdgeSource::Cell(3),
            ops: vec![OpKind::Identity],
        });
        assert!(g.validate().is_err());
    }

    #[test]
    fn validation_rejects_empty_optional_edge() {
        let mut g = tiny_config().hyper_genotype();
        for e in &mut g.cells[1].nodes[0].sources {
            if e.from == EdgeSource::Stem {
                e.ops.clear();
            }
        }
        assert!(g.validate().is_err());
        // but an empty mandatory edge is the fallback state and is fine
        let mut g2 = tiny_config().hyper_genotype();
        for e in &mut g2.cells[1].nodes[0].sources {
            if e.from == EdgeSource::Cell(0) {
                e.ops.clear();
            }
        }
        g2.validate().unwrap();
    }

    #[cfg(feature = "serde")]
    #[test]
    fn genotype_json_round_trip() {
        let g = tiny_config().hyper_genotype();
        let json = g.to_json_string().unwrap();
        assert!(json.contains("\"sep_conv5\""));
        assert!(json.contains("\"cell:1\""));
        let back = ModelGenotype::from_json_str(&json).unwrap();
        assert_eq!(back, g);
    }

    #[cfg(feature = "serde")]
    #[test]
    fn genotype_parse_reports_bad_op() {
        let g = tiny_config().hyper_genotype();
        let json = g.to_json_string().unwrap().replace("sep_conv5", "sep_conv9");
        let err = ModelGenotype::from_json_str(&json).unwrap_err();
        assert!(format!("{err}").contains("sep_conv9"));
    }
}
