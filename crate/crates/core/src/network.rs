//! The search network: a stem, a growing chain of cells, classifier towers,
//! and the pruner gates that carve an architecture out of the whole.
//!
//! Construction compiles a [`ModelGenotype`] into parameter ids plus wiring.
//! Only a prefix of cells is instantiated at first; [`Hypernetwork::append_section`]
//! materializes further cells without touching any existing parameter.
//! Every candidate operation and optional inter-cell connection is guarded by
//! a pruner gate; [`Hypernetwork::deadhead`] permanently removes connections
//! whose gate weight has gone negative and frees their memory.
//!
//! Memory accounting is byte-exact and fixed at construction: a connection's
//! cost is its output activation at the accounting batch size plus its
//! learnable parameters, four bytes per element. Per-cell compression ratios
//! divide live gated bytes by the cell's at-construction gated total.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::genotype::{CellKind, EdgeSource, ModelGenotype, OpKind};
use crate::ops::Conv2dSpec;
use crate::params::{he_normal, ParamBank, ParamId};
use crate::pruner::gate_saw;
use crate::tape::{Tape, ValueId};
use crate::tensor::{Shape, Tensor};

pub const BYTES_PER_ELEM: u64 = 4;

/// Whether connections carry trainable pruner gates (search) or are fixed
/// open (training a frozen architecture).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateMode {
    Trainable { m: f64, init: f64 },
    Frozen,
}

/// What a gate guards; indices address the compiled structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateSite {
    Op {
        cell: usize,
        node: usize,
        edge: usize,
        op: usize,
    },
    InterCell {
        cell: usize,
        incoming: usize,
    },
}

#[derive(Debug, Clone)]
struct Gate {
    weight: ParamId,
    site: GateSite,
    size_bytes: u64,
    alive: bool,
}

#[derive(Debug, Clone)]
struct NormP {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

impl NormP {
    fn ids(&self) -> [ParamId; 4] {
        [self.gamma, self.beta, self.mean, self.var]
    }
}

#[derive(Debug, Clone)]
struct AdapterP {
    w: ParamId,
    norm: NormP,
}

impl AdapterP {
    fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.w];
        v.extend(self.norm.ids());
        v
    }
}

#[derive(Debug, Clone)]
struct ConvBlockP {
    dw: ParamId,
    pw: ParamId,
    norm: NormP,
}

impl ConvBlockP {
    fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.dw, self.pw];
        v.extend(self.norm.ids());
        v
    }
}

#[derive(Debug, Clone)]
enum OpParams {
    None,
    /// 1x1 stride-2 reducing adapter (identity on a reduction slot edge).
    Adapter(AdapterP),
    /// Pool keeps channels; a 1x1 adapter then doubles them.
    PoolAdapter(AdapterP),
    SepConv { b1: ConvBlockP, b2: ConvBlockP },
    DilConv(ConvBlockP),
}

impl OpParams {
    fn ids(&self) -> Vec<ParamId> {
        match self {
            OpParams::None => Vec::new(),
            OpParams::Adapter(a) | OpParams::PoolAdapter(a) => a.ids(),
            OpParams::SepConv { b1, b2 } => {
                let mut v = b1.ids();
                v.extend(b2.ids());
                v
            }
            OpParams::DilConv(b) => b.ids(),
        }
    }
}

#[derive(Debug, Clone)]
struct EdgeOpC {
    op: OpKind,
    params: OpParams,
    gate: Option<usize>,
    alive: bool,
    size_bytes: u64,
}

#[derive(Debug, Clone)]
struct EdgeC {
    from: EdgeSource,
    mandatory: bool,
    stride: usize,
    ops: Vec<EdgeOpC>,
    /// Reducing fallback for a reduction-cell mandatory edge; allocated up
    /// front so no parameter ever appears outside construction or append.
    fallback: Option<AdapterP>,
}

#[derive(Debug, Clone)]
struct NodeC {
    edges: Vec<EdgeC>,
}

#[derive(Debug, Clone)]
struct InterCellC {
    from: usize,
    adapters: Vec<AdapterP>,
    gate: Option<usize>,
    alive: bool,
    size_bytes: u64,
}

#[derive(Debug, Clone)]
struct CellC {
    index: usize,
    kind: CellKind,
    c_out: usize,
    h_out: usize,
    w_out: usize,
    stem_adapters: Vec<AdapterP>,
    incoming: Vec<InterCellC>,
    nodes: Vec<NodeC>,
    fixed_bytes: u64,
    denom_bytes: u64,
}

#[derive(Debug, Clone)]
struct StemP {
    w: ParamId,
    norm: NormP,
}

#[derive(Debug, Clone)]
pub struct Tower {
    pub cell: usize,
    pub aux: bool,
    w: ParamId,
    b: ParamId,
    pub size_bytes: u64,
}

/// Analytic byte profile of one cell, identical to what construction
/// allocates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellProfile {
    pub fixed_bytes: u64,
    pub denom_bytes: u64,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Full-network byte profile at the accounting batch size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetProfile {
    pub stem_bytes: u64,
    pub cells: Vec<CellProfile>,
    /// Cost of a classifier tower attached at each cell index.
    pub tower_bytes: Vec<u64>,
}

/// Per-cell gate census for health reporting.
#[derive(Debug, Clone)]
pub struct CellHealth {
    pub cell: usize,
    pub open: usize,
    pub closed: usize,
    pub dead: usize,
    pub open_bytes: u64,
    pub total_bytes: u64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DeadheadReport {
    pub ops: usize,
    pub connections: usize,
    pub freed_bytes: u64,
}

pub struct ForwardOut {
    pub main: ValueId,
    pub aux: Vec<ValueId>,
    /// Differentiable per-cell compression ratios; present only with
    /// trainable gates on a gradient-enabled tape.
    pub ratio_nodes: Option<Vec<ValueId>>,
}

pub struct Hypernetwork {
    genotype: ModelGenotype,
    mode: GateMode,
    acct_batch: usize,
    profile: NetProfile,
    stem: StemP,
    cells: Vec<CellC>,
    towers: Vec<Tower>,
    gates: Vec<Gate>,
}

fn ceil_half(x: usize) -> usize {
    x.div_ceil(2)
}

fn adapter_param_elems(c_in: usize, c_out: usize) -> usize {
    c_in * c_out + 2 * c_out
}

fn conv_block_elems(k: usize, c_in: usize, c_out: usize) -> usize {
    c_in * k * k + c_in * c_out + 2 * c_out
}

fn op_param_elems(op: OpKind, c_in: usize, c_out: usize, stride: usize) -> usize {
    match op {
        OpKind::Identity | OpKind::AvgPool3 | OpKind::MaxPool3 => {
            if stride == 1 {
                0
            } else {
                adapter_param_elems(c_in, c_out)
            }
        }
        OpKind::SepConv3 => conv_block_elems(3, c_in, c_out) + conv_block_elems(3, c_out, c_out),
        OpKind::SepConv5 => conv_block_elems(5, c_in, c_out) + conv_block_elems(5, c_out, c_out),
        OpKind::DilConv3 => conv_block_elems(3, c_in, c_out),
        OpKind::DilConv5 => conv_block_elems(5, c_in, c_out),
    }
}

/// Ungated 1x1 stride-2 doubling chain from a source shape down `r`
/// reduction levels: parameter elements only.
fn adapter_chain_elems(c_from: usize, levels: usize) -> usize {
    let mut c = c_from;
    let mut total = 0;
    for _ in 0..levels {
        total += adapter_param_elems(c, 2 * c);
        c *= 2;
    }
    total
}

/// One gated (prunable) connection of a genotype, with its byte cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ItemSite {
    Op {
        node: usize,
        from: EdgeSource,
        op: OpKind,
    },
    InterCell {
        from: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GatedItem {
    pub cell: usize,
    pub site: ItemSite,
    pub size_bytes: u64,
}

/// Every gated connection of `g` with the byte cost it would occupy at
/// batch size `batch`. Construction, planning, and sampling all derive
/// their sizes from this one enumeration.
pub fn gated_items(g: &ModelGenotype, batch: usize) -> Vec<GatedItem> {
    let n = batch as u64;
    let outs = shape_chain(g);
    let act = |c: usize, h: usize, w: usize| n * (c * h * w) as u64 * BYTES_PER_ELEM;
    let mut items = Vec::new();
    for cell in &g.cells {
        let i = cell.index;
        let (c_in, h_in, w_in) = outs[i];
        let (c_out, h_out, w_out) = outs[i + 1];
        let spine_act = act(c_in, h_in, w_in);
        for &j in &cell.incoming_cells {
            let (c_j, _, _) = outs[j + 1];
            let levels = reductions_between(g, j + 1, i);
            items.push(GatedItem {
                cell: i,
                site: ItemSite::InterCell { from: j },
                size_bytes: spine_act + adapter_chain_elems(c_j, levels) as u64 * BYTES_PER_ELEM,
            });
        }
        for (k, node) in cell.nodes.iter().enumerate() {
            for edge in &node.sources {
                let slot_edge = !matches!(edge.from, EdgeSource::Node(_));
                let stride = if slot_edge && cell.kind == CellKind::Reduction {
                    2
                } else {
                    1
                };
                let ec_in = if slot_edge { c_in } else { c_out };
                for &op in &edge.ops {
                    items.push(GatedItem {
                        cell: i,
                        site: ItemSite::Op {
                            node: k,
                            from: edge.from,
                            op,
                        },
                        size_bytes: act(c_out, h_out, w_out)
                            + op_param_elems(op, ec_in, c_out, stride) as u64 * BYTES_PER_ELEM,
                    });
                }
            }
        }
    }
    items
}

/// Output shapes per stage: index 0 is the stem, index `i + 1` is cell `i`.
fn shape_chain(g: &ModelGenotype) -> Vec<(usize, usize, usize)> {
    let mut outs = Vec::with_capacity(g.cells.len() + 1);
    outs.push((g.channels0, g.input_shape[1], g.input_shape[2]));
    for cell in &g.cells {
        let (c, h, w) = outs[cell.index];
        outs.push(match cell.kind {
            CellKind::Normal => (c, h, w),
            CellKind::Reduction => (2 * c, ceil_half(h), ceil_half(w)),
        });
    }
    outs
}

/// Reduction cells among indices `lo..hi` (used to size adapter chains).
fn reductions_between(g: &ModelGenotype, lo: usize, hi: usize) -> usize {
    g.cells[lo..hi]
        .iter()
        .filter(|c| c.kind == CellKind::Reduction)
        .count()
}

/// Byte profile of the full genotype at batch size `batch`; construction
/// allocates exactly these amounts.
pub fn profile(g: &ModelGenotype, batch: usize) -> NetProfile {
    let n = batch as u64;
    let outs = shape_chain(g);
    let act = |c: usize, h: usize, w: usize| n * (c * h * w) as u64 * BYTES_PER_ELEM;
    let stem_params = (g.input_shape[0] * g.channels0 * 9 + 2 * g.channels0) as u64;
    let (sc, sh, sw) = outs[0];
    let stem_bytes = stem_params * BYTES_PER_ELEM + act(sc, sh, sw);
    let items = gated_items(g, batch);
    let mut cells = Vec::with_capacity(g.cells.len());
    let mut tower_bytes = Vec::with_capacity(g.cells.len());
    for cell in &g.cells {
        let i = cell.index;
        let (c_in, h_in, w_in) = outs[i];
        let (c_out, h_out, w_out) = outs[i + 1];
        let spine_act = act(c_in, h_in, w_in);
        let mut fixed = spine_act;
        if i >= 1 {
            let levels = reductions_between(g, 0, i);
            fixed += adapter_chain_elems(g.channels0, levels) as u64 * BYTES_PER_ELEM;
            fixed += spine_act;
        }
        if cell.kind == CellKind::Reduction {
            // one always-allocated reducing fallback per node
            fixed +=
                (cell.nodes.len() * adapter_param_elems(c_in, c_out)) as u64 * BYTES_PER_ELEM;
        }
        let denom = items
            .iter()
            .filter(|it| it.cell == i)
            .map(|it| it.size_bytes)
            .sum();
        cells.push(CellProfile {
            fixed_bytes: fixed,
            denom_bytes: denom,
            out_c: c_out,
            out_h: h_out,
            out_w: w_out,
        });
        let k = g.class_count;
        tower_bytes.push(
            (c_out * k + k) as u64 * BYTES_PER_ELEM + n * (c_out + k) as u64 * BYTES_PER_ELEM,
        );
    }
    NetProfile {
        stem_bytes,
        cells,
        tower_bytes,
    }
}

struct Builder<'a> {
    bank: &'a mut ParamBank,
    rng: &'a mut ChaCha8Rng,
}

impl<'a> Builder<'a> {
    fn norm(&mut self, label: &str, c: usize) -> NormP {
        let shape = Shape(vec![c]);
        NormP {
            gamma: self
                .bank
                .add(format!("{label}/gamma"), shape.clone(), vec![1.0; c], true),
            beta: self
                .bank
                .add(format!("{label}/beta"), shape.clone(), vec![0.0; c], true),
            mean: self
                .bank
                .add_state(format!("{label}/run_mean"), shape.clone(), vec![0.0; c]),
            var: self
                .bank
                .add_state(format!("{label}/run_var"), shape, vec![1.0; c]),
        }
    }

    fn conv(&mut self, label: &str, co: usize, ci_g: usize, k: usize) -> ParamId {
        let len = co * ci_g * k * k;
        let data = he_normal(self.rng, len, ci_g * k * k);
        self.bank
            .add(String::from(label), Shape(vec![co, ci_g, k, k]), data, true)
    }

    fn adapter(&mut self, label: &str, c_in: usize, c_out: usize) -> AdapterP {
        AdapterP {
            w: self.conv(&format!("{label}/w"), c_out, c_in, 1),
            norm: self.norm(label, c_out),
        }
    }

    fn conv_block(&mut self, label: &str, k: usize, c_in: usize, c_out: usize) -> ConvBlockP {
        ConvBlockP {
            dw: self.conv(&format!("{label}/dw"), c_in, 1, k),
            pw: self.conv(&format!("{label}/pw"), c_out, c_in, 1),
            norm: self.norm(label, c_out),
        }
    }

    fn op_params(
        &mut self,
        label: &str,
        op: OpKind,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> OpParams {
        match op {
            OpKind::Identity => {
                if stride == 1 {
                    OpParams::None
                } else {
                    OpParams::Adapter(self.adapter(label, c_in, c_out))
                }
            }
            OpKind::AvgPool3 | OpKind::MaxPool3 => {
                if stride == 1 {
                    OpParams::None
                } else {
                    OpParams::PoolAdapter(self.adapter(label, c_in, c_out))
                }
            }
            OpKind::SepConv3 | OpKind::SepConv5 => {
                let k = if op == OpKind::SepConv3 { 3 } else { 5 };
                OpParams::SepConv {
                    b1: self.conv_block(&format!("{label}/b1"), k, c_in, c_out),
                    b2: self.conv_block(&format!("{label}/b2"), k, c_out, c_out),
                }
            }
            OpKind::DilConv3 => OpParams::DilConv(self.conv_block(label, 3, c_in, c_out)),
            OpKind::DilConv5 => OpParams::DilConv(self.conv_block(label, 5, c_in, c_out)),
        }
    }

    fn tower(&mut self, label: &str, cell: usize, c: usize, k: usize, batch: u64) -> Tower {
        let w = self.bank.add(
            format!("{label}/w"),
            Shape(vec![k, c]),
            he_normal(self.rng, k * c, c),
            true,
        );
        let b = self
            .bank
            .add(format!("{label}/b"), Shape(vec![k]), vec![0.0; k], true);
        Tower {
            cell,
            aux: false,
            w,
            b,
            size_bytes: (c * k + k) as u64 * BYTES_PER_ELEM
                + batch * (c + k) as u64 * BYTES_PER_ELEM,
        }
    }
}

impl Hypernetwork {
    /// Compiles the first `initial_placed` cells of `genotype` plus the stem
    /// and a main tower on the last placed cell.
    pub fn new(
        genotype: ModelGenotype,
        mode: GateMode,
        acct_batch: usize,
        initial_placed: usize,
        bank: &mut ParamBank,
        rng: &mut ChaCha8Rng,
    ) -> Result<Hypernetwork> {
        genotype.validate()?;
        if initial_placed == 0 || initial_placed > genotype.cells.len() {
            return Err(CoreError::Invalid(format!(
                "initial_placed {initial_placed} out of range for {} cells",
                genotype.cells.len()
            )));
        }
        let prof = profile(&genotype, acct_batch);
        let mut b = Builder { bank, rng };
        let stem = StemP {
            w: b.conv("stem/w", genotype.channels0, genotype.input_shape[0], 3),
            norm: b.norm("stem", genotype.channels0),
        };
        let mut net = Hypernetwork {
            genotype,
            mode,
            acct_batch,
            profile: prof,
            stem,
            cells: Vec::new(),
            towers: Vec::new(),
            gates: Vec::new(),
        };
        for i in 0..initial_placed {
            net.compile_cell(i, bank, rng);
        }
        let (c, _, _) = {
            let cell = &net.cells[initial_placed - 1];
            (cell.c_out, cell.h_out, cell.w_out)
        };
        let mut b = Builder { bank, rng };
        let tower = b.tower(
            &format!("tower{}", initial_placed - 1),
            initial_placed - 1,
            c,
            net.genotype.class_count,
            acct_batch as u64,
        );
        net.towers.push(tower);
        Ok(net)
    }

    /// Materializes cells `placed..new_placed`. The previous main tower is
    /// kept as an auxiliary head when `keep_aux`, otherwise removed and its
    /// parameters freed. Existing parameters are never touched.
    pub fn append_section(
        &mut self,
        bank: &mut ParamBank,
        rng: &mut ChaCha8Rng,
        new_placed: usize,
        keep_aux: bool,
    ) -> Result<()> {
        let placed = self.cells.len();
        if new_placed <= placed || new_placed > self.genotype.cells.len() {
            return Err(CoreError::Invalid(format!(
                "append to {new_placed} cells from {placed}"
            )));
        }
        let main = self
            .towers
            .iter()
            .position(|t| !t.aux)
            .expect("network always has a main tower");
        if keep_aux {
            self.towers[main].aux = true;
        } else {
            let t = self.towers.remove(main);
            bank.kill(t.w);
            bank.kill(t.b);
        }
        for i in placed..new_placed {
            self.compile_cell(i, bank, rng);
        }
        let c = self.cells[new_placed - 1].c_out;
        let mut b = Builder { bank, rng };
        let tower = b.tower(
            &format!("tower{}", new_placed - 1),
            new_placed - 1,
            c,
            self.genotype.class_count,
            self.acct_batch as u64,
        );
        self.towers.push(tower);
        Ok(())
    }

    fn add_gate(
        &mut self,
        bank: &mut ParamBank,
        label: String,
        site: GateSite,
        size_bytes: u64,
    ) -> Option<usize> {
        match self.mode {
            GateMode::Frozen => None,
            GateMode::Trainable { init, .. } => {
                let weight = bank.add(label, Shape(vec![1]), vec![init], false);
                self.gates.push(Gate {
                    weight,
                    site,
                    size_bytes,
                    alive: true,
                });
                Some(self.gates.len() - 1)
            }
        }
    }

    fn compile_cell(&mut self, i: usize, bank: &mut ParamBank, rng: &mut ChaCha8Rng) {
        debug_assert_eq!(self.cells.len(), i);
        let outs = shape_chain(&self.genotype);
        let spec = self.genotype.cells[i].clone();
        let (c_in, h_in, w_in) = outs[i];
        let (c_out, h_out, w_out) = outs[i + 1];
        let n = self.acct_batch as u64;
        let act_out = n * (c_out * h_out * w_out) as u64 * BYTES_PER_ELEM;
        let spine_act = n * (c_in * h_in * w_in) as u64 * BYTES_PER_ELEM;

        let mut fixed = spine_act;
        let mut stem_adapters = Vec::new();
        if i >= 1 {
            let levels = reductions_between(&self.genotype, 0, i);
            let mut c = self.genotype.channels0;
            let mut b = Builder { bank, rng };
            for l in 0..levels {
                stem_adapters.push(b.adapter(&format!("cell{i}/stem_adapt{l}"), c, 2 * c));
                c *= 2;
            }
            fixed += adapter_chain_elems(self.genotype.channels0, levels) as u64 * BYTES_PER_ELEM;
            fixed += spine_act;
        }

        let mut denom = 0u64;
        let mut incoming = Vec::with_capacity(spec.incoming_cells.len());
        for (idx, &j) in spec.incoming_cells.iter().enumerate() {
            let (c_j, _, _) = outs[j + 1];
            let levels = reductions_between(&self.genotype, j + 1, i);
            let mut adapters = Vec::new();
            let mut c = c_j;
            let mut b = Builder { bank, rng };
            for l in 0..levels {
                adapters.push(b.adapter(&format!("cell{i}/in{j}/adapt{l}"), c, 2 * c));
                c *= 2;
            }
            let size = spine_act + adapter_chain_elems(c_j, levels) as u64 * BYTES_PER_ELEM;
            denom += size;
            let gate = self.add_gate(
                bank,
                format!("cell{i}/in{j}/gate"),
                GateSite::InterCell {
                    cell: i,
                    incoming: idx,
                },
                size,
            );
            incoming.push(InterCellC {
                from: j,
                adapters,
                gate,
                alive: true,
                size_bytes: size,
            });
        }

        let mandatory = spec.mandatory_source();
        let mut nodes = Vec::with_capacity(spec.nodes.len());
        for (k, node_spec) in spec.nodes.iter().enumerate() {
            let mut edges = Vec::with_capacity(node_spec.sources.len());
            for (ei, edge_spec) in node_spec.sources.iter().enumerate() {
                let slot_edge = !matches!(edge_spec.from, EdgeSource::Node(_));
                let stride = if slot_edge && spec.kind == CellKind::Reduction {
                    2
                } else {
                    1
                };
                let ec_in = if slot_edge { c_in } else { c_out };
                let is_mandatory = edge_spec.from == mandatory;
                let base = format!("cell{i}/node{k}/{}", edge_spec.from.describe());
                let mut ops = Vec::with_capacity(edge_spec.ops.len());
                for (oi, &op) in edge_spec.ops.iter().enumerate() {
                    let label = format!("{base}/{}", op.name());
                    let params = {
                        let mut b = Builder { bank, rng };
                        b.op_params(&label, op, ec_in, c_out, stride)
                    };
                    let size =
                        act_out + op_param_elems(op, ec_in, c_out, stride) as u64 * BYTES_PER_ELEM;
                    denom += size;
                    let gate = self.add_gate(
                        bank,
                        format!("{label}/gate"),
                        GateSite::Op {
                            cell: i,
                            node: k,
                            edge: ei,
                            op: oi,
                        },
                        size,
                    );
                    ops.push(EdgeOpC {
                        op,
                        params,
                        gate,
                        alive: true,
                        size_bytes: size,
                    });
                }
                let fallback = if is_mandatory && spec.kind == CellKind::Reduction {
                    let mut b = Builder { bank, rng };
                    Some(b.adapter(&format!("{base}/fallback"), c_in, c_out))
                } else {
                    None
                };
                if fallback.is_some() {
                    fixed += adapter_param_elems(c_in, c_out) as u64 * BYTES_PER_ELEM;
                }
                edges.push(EdgeC {
                    from: edge_spec.from,
                    mandatory: is_mandatory,
                    stride,
                    ops,
                    fallback,
                });
            }
            nodes.push(NodeC { edges });
        }

        debug_assert_eq!(fixed, self.profile.cells[i].fixed_bytes);
        debug_assert_eq!(denom, self.profile.cells[i].denom_bytes);
        self.cells.push(CellC {
            index: i,
            kind: spec.kind,
            c_out,
            h_out,
            w_out,
            stem_adapters,
            incoming,
            nodes,
            fixed_bytes: fixed,
            denom_bytes: denom,
        });
    }

    pub fn placed_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn total_cells(&self) -> usize {
        self.genotype.cells.len()
    }

    pub fn profile(&self) -> &NetProfile {
        &self.profile
    }

    pub fn mode(&self) -> GateMode {
        self.mode
    }

    pub fn gate_m(&self) -> Option<f64> {
        match self.mode {
            GateMode::Trainable { m, .. } => Some(m),
            GateMode::Frozen => None,
        }
    }

    pub fn class_count(&self) -> usize {
        self.genotype.class_count
    }

    pub fn towers(&self) -> &[Tower] {
        &self.towers
    }

    pub fn gate_count(&self) -> usize {
        self.gates.len()
    }

    /// Weight ids of live gates (empty for frozen networks).
    pub fn gate_weight_ids(&self) -> Vec<ParamId> {
        self.gates
            .iter()
            .filter(|g| g.alive)
            .map(|g| g.weight)
            .collect()
    }

    /// Bytes currently allocated: stem, towers, and for each placed cell its
    /// mandatory machinery plus every not-yet-deadheaded gated connection.
    pub fn accounted_bytes(&self) -> u64 {
        let mut total = self.profile.stem_bytes;
        for t in &self.towers {
            total += t.size_bytes;
        }
        for cell in &self.cells {
            total += cell.fixed_bytes;
            for ic in &cell.incoming {
                if ic.alive {
                    total += ic.size_bytes;
                }
            }
            for node in &cell.nodes {
                for edge in &node.edges {
                    for op in &edge.ops {
                        if op.alive {
                            total += op.size_bytes;
                        }
                    }
                }
            }
        }
        total
    }

    /// Per-cell compression ratio: gate-weighted live bytes over the cell's
    /// at-construction gated total. Dead connections contribute zero; frozen
    /// gates count fully.
    pub fn cell_ratio_values(&self, bank: &ParamBank) -> Vec<f64> {
        self.cells
            .iter()
            .map(|cell| {
                if cell.denom_bytes == 0 {
                    return 0.0;
                }
                let mut num = 0.0;
                let mut visit = |gate: Option<usize>, alive: bool, size: u64| {
                    if !alive {
                        return;
                    }
                    let mult = match (self.mode, gate) {
                        (GateMode::Trainable { m, .. }, Some(g)) => {
                            gate_saw(bank.get(self.gates[g].weight).data[0], m)
                        }
                        _ => 1.0,
                    };
                    num += mult * size as f64;
                };
                for ic in &cell.incoming {
                    visit(ic.gate, ic.alive, ic.size_bytes);
                }
                for node in &cell.nodes {
                    for edge in &node.edges {
                        for op in &edge.ops {
                            visit(op.gate, op.alive, op.size_bytes);
                        }
                    }
                }
                num / cell.denom_bytes as f64
            })
            .collect()
    }

    /// Per-cell byte occupancy including mandatory machinery:
    /// `(fixed + live gated) / (fixed + all gated)`. This is the quantity the
    /// random samplers reproduce.
    pub fn cell_occupancy(&self) -> Vec<f64> {
        self.cells
            .iter()
            .map(|cell| {
                let mut live = 0u64;
                for ic in &cell.incoming {
                    if ic.alive {
                        live += ic.size_bytes;
                    }
                }
                for node in &cell.nodes {
                    for edge in &node.edges {
                        for op in &edge.ops {
                            if op.alive {
                                live += op.size_bytes;
                            }
                        }
                    }
                }
                (cell.fixed_bytes + live) as f64 / (cell.fixed_bytes + cell.denom_bytes) as f64
            })
            .collect()
    }

    /// Gate census per placed cell. Open/closed reflect current weight signs;
    /// frozen networks report every present connection as open.
    pub fn health(&self, bank: &ParamBank) -> Vec<CellHealth> {
        let mut rows: Vec<CellHealth> = self
            .cells
            .iter()
            .map(|c| CellHealth {
                cell: c.index,
                open: 0,
                closed: 0,
                dead: 0,
                open_bytes: 0,
                total_bytes: c.denom_bytes,
            })
            .collect();
        match self.mode {
            GateMode::Trainable { .. } => {
                for g in &self.gates {
                    let cell = match g.site {
                        GateSite::Op { cell, .. } | GateSite::InterCell { cell, .. } => cell,
                    };
                    let row = &mut rows[cell];
                    if !g.alive {
                        row.dead += 1;
                    } else if bank.get(g.weight).data[0] < 0.0 {
                        row.closed += 1;
                    } else {
                        row.open += 1;
                        row.open_bytes += g.size_bytes;
                    }
                }
            }
            GateMode::Frozen => {
                for (ci, cell) in self.cells.iter().enumerate() {
                    let row = &mut rows[ci];
                    for ic in &cell.incoming {
                        row.open += 1;
                        row.open_bytes += ic.size_bytes;
                    }
                    for node in &cell.nodes {
                        for edge in &node.edges {
                            row.open += edge.ops.len();
                            for op in &edge.ops {
                                row.open_bytes += op.size_bytes;
                            }
                        }
                    }
                }
            }
        }
        rows
    }

    fn kill_gate(&mut self, bank: &mut ParamBank, g: usize) {
        if !self.gates[g].alive {
            return;
        }
        self.gates[g].alive = false;
        bank.kill(self.gates[g].weight);
    }

    fn kill_op(
        &mut self,
        bank: &mut ParamBank,
        ci: usize,
        ni: usize,
        ei: usize,
        oi: usize,
        report: &mut DeadheadReport,
    ) {
        let op = &self.cells[ci].nodes[ni].edges[ei].ops[oi];
        if !op.alive {
            return;
        }
        let ids = op.params.ids();
        let gate = op.gate;
        let size = op.size_bytes;
        self.cells[ci].nodes[ni].edges[ei].ops[oi].alive = false;
        for id in ids {
            bank.kill(id);
        }
        if let Some(g) = gate {
            self.kill_gate(bank, g);
        }
        report.ops += 1;
        report.freed_bytes += size;
    }

    /// Permanently removes every connection whose gate weight is negative.
    /// Removing an inter-cell connection also removes all edge operations
    /// sourced at that input slot. No-op for frozen networks.
    pub fn deadhead(&mut self, bank: &mut ParamBank) -> DeadheadReport {
        let mut report = DeadheadReport::default();
        let GateMode::Trainable { .. } = self.mode else {
            return report;
        };
        for ci in 0..self.cells.len() {
            for ii in 0..self.cells[ci].incoming.len() {
                let (alive, gate, from, size) = {
                    let ic = &self.cells[ci].incoming[ii];
                    (ic.alive, ic.gate.expect("trainable"), ic.from, ic.size_bytes)
                };
                if !alive || bank.get(self.gates[gate].weight).data[0] >= 0.0 {
                    continue;
                }
                let ids: Vec<ParamId> = self.cells[ci].incoming[ii]
                    .adapters
                    .iter()
                    .flat_map(|a| a.ids())
                    .collect();
                self.cells[ci].incoming[ii].alive = false;
                for id in ids {
                    bank.kill(id);
                }
                self.kill_gate(bank, gate);
                report.connections += 1;
                report.freed_bytes += size;
                // the slot is gone: every edge drawing from it dies with it
                for ni in 0..self.cells[ci].nodes.len() {
                    for ei in 0..self.cells[ci].nodes[ni].edges.len() {
                        if self.cells[ci].nodes[ni].edges[ei].from != EdgeSource::Cell(from) {
                            continue;
                        }
                        for oi in 0..self.cells[ci].nodes[ni].edges[ei].ops.len() {
                            self.kill_op(bank, ci, ni, ei, oi, &mut report);
                        }
                    }
                }
            }
        }
        for ci in 0..self.cells.len() {
            for ni in 0..self.cells[ci].nodes.len() {
                for ei in 0..self.cells[ci].nodes[ni].edges.len() {
                    for oi in 0..self.cells[ci].nodes[ni].edges[ei].ops.len() {
                        let op = &self.cells[ci].nodes[ni].edges[ei].ops[oi];
                        let Some(g) = op.gate else { continue };
                        if op.alive && bank.get(self.gates[g].weight).data[0] < 0.0 {
                            self.kill_op(bank, ci, ni, ei, oi, &mut report);
                        }
                    }
                }
            }
        }
        report
    }

    /// The live architecture of the placed prefix as a standalone genotype.
    pub fn extract_genotype(&self) -> ModelGenotype {
        use crate::genotype::{CellSpec, EdgeSpec, NodeSpec};
        let cells = self
            .cells
            .iter()
            .map(|cell| {
                let incoming: Vec<usize> = cell
                    .incoming
                    .iter()
                    .filter(|ic| ic.alive)
                    .map(|ic| ic.from)
                    .collect();
                let nodes = cell
                    .nodes
                    .iter()
                    .map(|node| {
                        let sources = node
                            .edges
                            .iter()
                            .filter_map(|edge| {
                                let ops: Vec<OpKind> = edge
                                    .ops
                                    .iter()
                                    .filter(|o| o.alive)
                                    .map(|o| o.op)
                                    .collect();
                                if edge.mandatory || !ops.is_empty() {
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
                    index: cell.index,
                    kind: cell.kind,
                    incoming_cells: incoming,
                    nodes,
                }
            })
            .collect();
        ModelGenotype {
            channels0: self.genotype.channels0,
            input_shape: self.genotype.input_shape,
            class_count: self.genotype.class_count,
            cells,
        }
    }

    fn apply_norm(
        &self,
        tape: &mut Tape,
        bank: &mut ParamBank,
        np: &NormP,
        x: ValueId,
        train: bool,
        update_stats: bool,
        ctx: &str,
    ) -> Result<ValueId> {
        let g = tape.lease(bank, np.gamma);
        let b = tape.lease(bank, np.beta);
        if train {
            let (y, stats) = tape.channel_norm_train(x, g, b, ctx)?;
            if update_stats {
                stats.update_running(bank, np.mean, np.var);
            }
            Ok(y)
        } else {
            let m = tape.lease(bank, np.mean);
            let v = tape.lease(bank, np.var);
            tape.channel_norm_eval(x, g, b, m, v, ctx)
        }
    }

    fn apply_adapter(
        &self,
        tape: &mut Tape,
        bank: &mut ParamBank,
        a: &AdapterP,
        x: ValueId,
        stride: usize,
        train: bool,
        update_stats: bool,
        ctx: &str,
    ) -> Result<ValueId> {
        let w = tape.lease(bank, a.w);
        let y = tape.conv2d(x, w, Conv2dSpec::plain(stride, 0), ctx)?;
        self.apply_norm(tape, bank, &a.norm, y, train, update_stats, ctx)
    }

    #[allow(clippy::too_many_arguments)]
    fn apply_conv_block(
        &self,
        tape: &mut Tape,
        bank: &mut ParamBank,
        blk: &ConvBlockP,
        x: ValueId,
        k: usize,
        stride: usize,
        dilation: usize,
        train: bool,
        update_stats: bool,
        ctx: &str,
    ) -> Result<ValueId> {
        let c_in = tape.shape(x).c();
        let r = tape.relu(x);
        let dw = tape.lease(bank, blk.dw);
        let pad = dilation * (k - 1) / 2;
        let y = tape.conv2d(r, dw, Conv2dSpec::depthwise(stride, pad, dilation, c_in), ctx)?;
        let pw = tape.lease(bank, blk.pw);
        let y = tape.conv2d(y, pw, Conv2dSpec::pointwise(), ctx)?;
        self.apply_norm(tape, bank, &blk.norm, y, train, update_stats, ctx)
    }

    #[allow(clippy::too_many_arguments)]
    fn apply_op(
        &self,
        tape: &mut Tape,
        bank: &mut ParamBank,
        eop: &EdgeOpC,
        x: ValueId,
        stride: usize,
        train: bool,
        update_stats: bool,
        ctx: &str,
    ) -> Result<ValueId> {
        match (&eop.params, eop.op) {
            (OpParams::None, OpKind::Identity) => Ok(x),
            (OpParams::None, OpKind::AvgPool3) => tape.avg_pool3(x, 1, ctx),
            (OpParams::None, OpKind::MaxPool3) => tape.max_pool3(x, 1, ctx),
            (OpParams::Adapter(a), _) => {
                self.apply_adapter(tape, bank, a, x, stride, train, update_stats, ctx)
            }
            (OpParams::PoolAdapter(a), op) => {
                let pooled = match op {
                    OpKind::AvgPool3 => tape.avg_pool3(x, stride, ctx)?,
                    _ => tape.max_pool3(x, stride, ctx)?,
                };
                self.apply_adapter(tape, bank, a, pooled, 1, train, update_stats, ctx)
            }
            (OpParams::SepConv { b1, b2 }, op) => {
                let k = if op == OpKind::SepConv3 { 3 } else { 5 };
                let y =
                    self.apply_conv_block(tape, bank, b1, x, k, stride, 1, train, update_stats, ctx)?;
                self.apply_conv_block(tape, bank, b2, y, k, 1, 1, train, update_stats, ctx)
            }
            (OpParams::DilConv(blk), op) => {
                let k = if op == OpKind::DilConv3 { 3 } else { 5 };
                self.apply_conv_block(tape, bank, blk, x, k, stride, 2, train, update_stats, ctx)
            }
            _ => unreachable!("op params match op kind by construction"),
        }
    }

    /// Runs the placed network. `train` selects batch-statistics
    /// normalization (with running updates only when `update_stats`) and
    /// enables drop-path at rate `drop_path`; evaluation uses running stats
    /// and no stochastic paths.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        bank: &mut ParamBank,
        tape: &mut Tape,
        x: &Tensor,
        train: bool,
        drop_path: f64,
        update_stats: bool,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOut> {
        if x.shape.rank() != 4 || x.shape.c() != self.genotype.input_shape[0] {
            return Err(CoreError::ShapeMismatch(format!(
                "network input {}",
                x.shape.describe()
            )));
        }
        let x_id = tape.input(x);
        let w = tape.lease(bank, self.stem.w);
        let conv = tape.conv2d(x_id, w, Conv2dSpec::plain(1, 1), "stem")?;
        let stem_out = self.apply_norm(tape, bank, &self.stem.norm, conv, train, update_stats, "stem")?;

        let mut gate_lease: Vec<Option<ValueId>> = vec![None; self.gates.len()];
        let lease_gate = |tape: &mut Tape, bank: &ParamBank, leases: &mut Vec<Option<ValueId>>, g: usize| {
            let id = tape.lease(bank, self.gates[g].weight);
            leases[g] = Some(id);
            id
        };

        let mut outs: Vec<ValueId> = Vec::with_capacity(self.cells.len() + 1);
        outs.push(stem_out);
        for cell in &self.cells {
            let i = cell.index;
            let spine = outs[i];
            let mut slot_vals: Vec<(EdgeSource, Option<ValueId>)> = Vec::new();
            let mandatory_src = if i == 0 {
                EdgeSource::Stem
            } else {
                EdgeSource::Cell(i - 1)
            };
            slot_vals.push((mandatory_src, Some(spine)));
            if i >= 1 {
                let mut s = stem_out;
                for (l, a) in cell.stem_adapters.iter().enumerate() {
                    s = self.apply_adapter(
                        tape,
                        bank,
                        a,
                        s,
                        2,
                        train,
                        update_stats,
                        &format!("cell{i}/stem_adapt{l}"),
                    )?;
                }
                slot_vals.push((EdgeSource::Stem, Some(s)));
            }
            for ic in &cell.incoming {
                let src = EdgeSource::Cell(ic.from);
                if !ic.alive {
                    slot_vals.push((src, None));
                    continue;
                }
                let mut v = outs[ic.from + 1];
                for (l, a) in ic.adapters.iter().enumerate() {
                    v = self.apply_adapter(
                        tape,
                        bank,
                        a,
                        v,
                        2,
                        train,
                        update_stats,
                        &format!("cell{i}/in{}/adapt{l}", ic.from),
                    )?;
                }
                if let (GateMode::Trainable { m, .. }, Some(g)) = (self.mode, ic.gate) {
                    let wid = lease_gate(tape, bank, &mut gate_lease, g);
                    v = tape.prune(v, wid, m);
                }
                slot_vals.push((src, Some(v)));
            }

            let mut node_vals: Vec<ValueId> = Vec::with_capacity(cell.nodes.len());
            for (k, node) in cell.nodes.iter().enumerate() {
                let mut edge_outs = Vec::new();
                for edge in &node.edges {
                    let src_val = match edge.from {
                        EdgeSource::Node(p) => Some(node_vals[p]),
                        s => slot_vals
                            .iter()
                            .find(|(slot, _)| *slot == s)
                            .and_then(|(_, v)| *v),
                    };
                    let Some(sv) = src_val else { continue };
                    let ctx = format!("cell{i}/node{k}/{}", edge.from.describe());
                    let mut op_outs = Vec::new();
                    for eop in &edge.ops {
                        if !eop.alive {
                            continue;
                        }
                        let mut y = self.apply_op(
                            tape,
                            bank,
                            eop,
                            sv,
                            edge.stride,
                            train,
                            update_stats,
                            &ctx,
                        )?;
                        if let (GateMode::Trainable { m, .. }, Some(g)) = (self.mode, eop.gate) {
                            let wid = lease_gate(tape, bank, &mut gate_lease, g);
                            y = tape.prune(y, wid, m);
                        }
                        op_outs.push(y);
                    }
                    let mut e_out = if op_outs.is_empty() {
                        if !edge.mandatory {
                            continue;
                        }
                        match &edge.fallback {
                            Some(a) => self.apply_adapter(
                                tape,
                                bank,
                                a,
                                sv,
                                2,
                                train,
                                update_stats,
                                &ctx,
                            )?,
                            None => sv,
                        }
                    } else {
                        tape.add_n(&op_outs)?
                    };
                    if train && drop_path > 0.0 {
                        let r = rng
                            .as_deref_mut()
                            .expect("drop_path in train mode needs an rng");
                        e_out = tape.drop_path(e_out, drop_path, r);
                    }
                    edge_outs.push(e_out);
                }
                node_vals.push(tape.add_n(&edge_outs)?);
            }
            outs.push(tape.add_n(&node_vals)?);
        }

        let mut main = None;
        let mut aux = Vec::new();
        for t in &self.towers {
            let feat = outs[t.cell + 1];
            let gap = tape.global_avg_pool(feat, &format!("tower{}", t.cell))?;
            let wid = tape.lease(bank, t.w);
            let bid = tape.lease(bank, t.b);
            let logits = tape.linear(gap, wid, bid, &format!("tower{}", t.cell))?;
            if t.aux {
                aux.push(logits);
            } else {
                debug_assert!(main.is_none(), "exactly one main tower");
                main = Some(logits);
            }
        }

        let ratio_nodes = match self.mode {
            GateMode::Trainable { m, .. } if tape.is_grad_enabled() && train => {
                let mut nodes = Vec::with_capacity(self.cells.len());
                for (ci, cell) in self.cells.iter().enumerate() {
                    let terms: Vec<(ValueId, f64)> = self
                        .gates
                        .iter()
                        .enumerate()
                        .filter(|(_, g)| {
                            g.alive
                                && match g.site {
                                    GateSite::Op { cell, .. }
                                    | GateSite::InterCell { cell, .. } => cell == ci,
                                }
                        })
                        .map(|(gi, g)| {
                            (
                                gate_lease[gi].expect("live gate leased in forward"),
                                g.size_bytes as f64 / cell.denom_bytes as f64,
                            )
                        })
                        .collect();
                    nodes.push(tape.weighted_gate_saw_sum(&terms, m));
                }
                Some(nodes)
            }
            _ => None,
        };

        Ok(ForwardOut {
            main: main.expect("network always has a main tower"),
            aux,
            ratio_nodes,
        })
    }
}
