//! Training-free architecture search over a toy cell space.
//!
//! A supernet stacks cells; each cell is a DAG whose edges carry a set of
//! alive vector operators (identity, zero, dense variants, bottleneck). Node
//! values are sums over incoming edges, an edge's value is the sum of its
//! alive operators, and a cell's output is the sum of its intermediate
//! nodes. Search scores every operator by the change in two untrained-net
//! metrics when it is removed: the condition number of the assembled meta
//! kernel (trainability; higher delta means removal helps, prune sooner) and
//! the linear-region count (expressivity; lower delta means removal costs
//! little, prune sooner). Per round, each multi-operator edge loses its
//! least important operator by global rank sum until the supernet is a
//! single-path network.
//!
//! Operator parameters are drawn from streams keyed by (seed, cell, edge,
//! slot, kind), so pruning one operator never reshuffles the draws of the
//! survivors; paired score differences isolate the pruned operator.

use rayon::prelude::*;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::kernels::{assemble_train_kernel_net, KernelKind, KernelNet};
use crate::linalg::{condition_number, TimeMode};
use crate::mat::Mat;
use crate::regions::{count_distinct_patterns, ProbeSet};
use crate::rng::{label, Rng};
use crate::tasks::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OperatorKind {
    SkipConnect,
    Zero,
    Dense,
    DenseReLU,
    DenseTanh,
    Bottleneck,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 6] = [
        OperatorKind::SkipConnect,
        OperatorKind::Zero,
        OperatorKind::Dense,
        OperatorKind::DenseReLU,
        OperatorKind::DenseTanh,
        OperatorKind::Bottleneck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::SkipConnect => "skip",
            OperatorKind::Zero => "zero",
            OperatorKind::Dense => "dense",
            OperatorKind::DenseReLU => "dense_relu",
            OperatorKind::DenseTanh => "dense_tanh",
            OperatorKind::Bottleneck => "bottleneck",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Ok(match s {
            "skip" => OperatorKind::SkipConnect,
            "zero" => OperatorKind::Zero,
            "dense" => OperatorKind::Dense,
            "dense_relu" => OperatorKind::DenseReLU,
            "dense_tanh" => OperatorKind::DenseTanh,
            "bottleneck" => OperatorKind::Bottleneck,
            _ => return Err(Error::InvalidConfig(format!("unknown operator kind {s}"))),
        })
    }

    fn code(self) -> u64 {
        match self {
            OperatorKind::SkipConnect => 1,
            OperatorKind::Zero => 2,
            OperatorKind::Dense => 3,
            OperatorKind::DenseReLU => 4,
            OperatorKind::DenseTanh => 5,
            OperatorKind::Bottleneck => 6,
        }
    }
}

/// Source of an edge within a cell: one of the two cell inputs or an earlier
/// intermediate node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRef {
    Input(usize),
    Node(usize),
}

impl NodeRef {
    fn code(self) -> u64 {
        match self {
            NodeRef::Input(i) => 1000 + i as u64,
            NodeRef::Node(j) => j as u64,
        }
    }

    pub fn text(self) -> String {
        match self {
            NodeRef::Input(i) => format!("in{i}"),
            NodeRef::Node(j) => format!("n{j}"),
        }
    }
}

/// One operator slot on an edge; `slot` ids are assigned at build time and
/// never renumbered, so audit rows stay stable across pruning rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpSlot {
    pub slot: usize,
    pub kind: OperatorKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub cell: usize,
    pub from: NodeRef,
    pub to: usize,
    pub ops: Vec<OpSlot>,
}

impl Edge {
    pub fn descriptor(&self) -> String {
        format!("c{}:{}->n{}", self.cell, self.from.text(), self.to)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperNet {
    pub num_cells: usize,
    pub nodes_per_cell: usize,
    pub width: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone)]
pub struct SuperNetConfig {
    pub num_cells: usize,
    pub nodes_per_cell: usize,
    pub width: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub ops: Vec<OperatorKind>,
}

/// The standard template: each intermediate node receives one edge from each
/// cell input and from every earlier intermediate, so a cell with B nodes has
/// B (B + 3) / 2 edges, each carrying the full operator vocabulary.
pub fn build_supernet(config: &SuperNetConfig) -> Result<SuperNet> {
    if config.num_cells == 0
        || config.nodes_per_cell == 0
        || config.width == 0
        || config.input_dim == 0
        || config.output_dim == 0
    {
        return Err(Error::InvalidConfig("supernet dimensions must be >= 1".into()));
    }
    if config.ops.is_empty() {
        return Err(Error::InvalidConfig("supernet needs at least one operator kind".into()));
    }
    let mut edges = Vec::new();
    for cell in 0..config.num_cells {
        for node in 0..config.nodes_per_cell {
            let mut froms = vec![NodeRef::Input(0), NodeRef::Input(1)];
            froms.extend((0..node).map(NodeRef::Node));
            for from in froms {
                let ops = config
                    .ops
                    .iter()
                    .enumerate()
                    .map(|(slot, &kind)| OpSlot { slot, kind })
                    .collect();
                edges.push(Edge { cell, from, to: node, ops });
            }
        }
    }
    let net = SuperNet {
        num_cells: config.num_cells,
        nodes_per_cell: config.nodes_per_cell,
        width: config.width,
        input_dim: config.input_dim,
        output_dim: config.output_dim,
        edges,
    };
    net.validate()?;
    Ok(net)
}

impl SuperNet {
    /// Custom wiring entry point; validates the DAG ordering.
    pub fn from_parts(
        num_cells: usize,
        nodes_per_cell: usize,
        width: usize,
        input_dim: usize,
        output_dim: usize,
        edges: Vec<Edge>,
    ) -> Result<Self> {
        let net = SuperNet { num_cells, nodes_per_cell, width, input_dim, output_dim, edges };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.edges {
            if e.cell >= self.num_cells || e.to >= self.nodes_per_cell {
                return Err(Error::InvalidConfig(format!("edge {} out of range", e.descriptor())));
            }
            match e.from {
                NodeRef::Input(i) if i < 2 => {}
                NodeRef::Node(j) if j < e.to => {}
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "edge {} breaks the DAG ordering",
                        e.descriptor()
                    )))
                }
            }
            if e.ops.is_empty() {
                return Err(Error::InvalidConfig(format!("edge {} has no operators", e.descriptor())));
            }
        }
        Ok(())
    }

    pub fn alive_ops(&self) -> usize {
        self.edges.iter().map(|e| e.ops.len()).sum()
    }

    pub fn is_single_path(&self) -> bool {
        self.edges.iter().all(|e| e.ops.len() == 1)
    }

    pub fn multi_op_edges(&self) -> usize {
        self.edges.iter().filter(|e| e.ops.len() > 1).count()
    }

    fn without(&self, edge_idx: usize, slot: usize) -> SuperNet {
        let mut net = self.clone();
        net.edges[edge_idx].ops.retain(|o| o.slot != slot);
        net
    }
}

/// A supernet where every edge holds exactly one operator.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture(pub SuperNet);

impl Architecture {
    pub fn from_supernet(net: SuperNet) -> Result<Self> {
        if !net.is_single_path() {
            return Err(Error::InvalidConfig("architecture must be single-path".into()));
        }
        Ok(Architecture(net))
    }

    /// Structured text: header plus one `cell / edge / op` line per edge.
    pub fn to_text(&self) -> String {
        let n = &self.0;
        let mut out = String::new();
        writeln!(
            out,
            "cells {} nodes {} width {} input_dim {} output_dim {}",
            n.num_cells, n.nodes_per_cell, n.width, n.input_dim, n.output_dim
        )
        .unwrap();
        for e in &n.edges {
            writeln!(out, "cell {} edge {}->n{} op {}", e.cell, e.from.text(), e.to, e.ops[0].kind.name())
                .unwrap();
        }
        out
    }
}

// ---------------------------------------------------------------------------
// materialization

const BOTTLENECK_DIV: usize = 2;

#[derive(Debug, Clone, Copy)]
struct OpParams {
    off: usize,
    len: usize,
}

#[derive(Debug, Clone)]
struct OpInstance {
    from: NodeRef,
    to: usize,
    cell: usize,
    slot: usize,
    kind: OperatorKind,
    params: OpParams,
}

/// A materialized cell network: evaluable, differentiable, and usable as an
/// empirical kernel source.
pub struct CellNet {
    width: usize,
    mid: usize,
    input_dim: usize,
    output_dim: usize,
    num_cells: usize,
    nodes_per_cell: usize,
    ops: Vec<OpInstance>,
    stem: OpParams,
    readout: OpParams,
    params: Vec<f64>,
}

fn op_param_len(kind: OperatorKind, l: usize, mid: usize) -> usize {
    match kind {
        OperatorKind::SkipConnect | OperatorKind::Zero => 0,
        OperatorKind::Dense | OperatorKind::DenseReLU | OperatorKind::DenseTanh => l * l + l,
        OperatorKind::Bottleneck => l * mid + mid + mid * l + l,
    }
}

/// Gaussian fan-in (Kaiming-style) init: weights N(0, 2 / fan_in), biases 0.
fn fill_kaiming(rng: &mut Rng, buf: &mut [f64], shapes: &[(usize, usize)]) {
    let mut off = 0;
    for &(fan_in, fan_out) in shapes {
        let std = (2.0 / fan_in as f64).sqrt();
        rng.fill_normal(&mut buf[off..off + fan_in * fan_out], std);
        off += fan_in * fan_out;
        // biases zero
        for v in buf[off..off + fan_out].iter_mut() {
            *v = 0.0;
        }
        off += fan_out;
    }
    debug_assert_eq!(off, buf.len());
}

/// Instantiates parameters for every alive operator. Deterministic given
/// (net, seed); each component's draw is independent of the others.
pub fn materialize(net: &SuperNet, seed: u64) -> Result<CellNet> {
    net.validate()?;
    let l = net.width;
    let mid = (l / BOTTLENECK_DIV).max(1);
    let mut ops = Vec::new();
    let mut total = 0usize;

    let stem_len = net.input_dim * l + l;
    let stem = OpParams { off: 0, len: stem_len };
    total += stem_len;

    for e in net.edges.iter() {
        for op in &e.ops {
            let len = op_param_len(op.kind, l, mid);
            ops.push(OpInstance {
                from: e.from,
                to: e.to,
                cell: e.cell,
                slot: op.slot,
                kind: op.kind,
                params: OpParams { off: total, len },
            });
            total += len;
        }
    }

    let readout_len = l * net.output_dim + net.output_dim;
    let readout = OpParams { off: total, len: readout_len };
    total += readout_len;

    let mut params = vec![0.0; total];
    fill_kaiming(
        &mut Rng::from_path(seed, &[label("stem")]),
        &mut params[stem.off..stem.off + stem.len],
        &[(net.input_dim, l)],
    );
    for op in &ops {
        if op.params.len == 0 {
            continue;
        }
        let mut rng = Rng::from_path(
            seed,
            &[
                label("op"),
                op.cell as u64,
                op.to as u64,
                op.from.code(),
                op.slot as u64,
                op.kind.code(),
            ],
        );
        let shapes: Vec<(usize, usize)> = match op.kind {
            OperatorKind::Dense | OperatorKind::DenseReLU | OperatorKind::DenseTanh => {
                vec![(l, l)]
            }
            OperatorKind::Bottleneck => vec![(l, mid), (mid, l)],
            _ => vec![],
        };
        fill_kaiming(&mut rng, &mut params[op.params.off..op.params.off + op.params.len], &shapes);
    }
    fill_kaiming(
        &mut Rng::from_path(seed, &[label("readout")]),
        &mut params[readout.off..readout.off + readout.len],
        &[(l, net.output_dim)],
    );

    Ok(CellNet {
        width: l,
        mid,
        input_dim: net.input_dim,
        output_dim: net.output_dim,
        num_cells: net.num_cells,
        nodes_per_cell: net.nodes_per_cell,
        ops,
        stem,
        readout,
        params,
    })
}

struct CellTape {
    x: Mat,
    stem_out: Mat,
    /// node values per cell
    nodes: Vec<Vec<Mat>>,
    cell_outs: Vec<Mat>,
    /// per alive op, the internals needed for derivatives
    op_h1: Vec<Option<Mat>>,
    op_h2: Vec<Option<Mat>>,
    output: Mat,
}

impl CellNet {
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn w(&self, p: OpParams, skip: usize, fan_in: usize, fan_out: usize) -> &[f64] {
        &self.params[p.off + skip..p.off + skip + fan_in * fan_out]
    }

    fn cell_input<'a>(&self, tape: &'a CellTape, cell: usize, which: usize) -> &'a Mat {
        let back = which + 1;
        if cell >= back {
            &tape.cell_outs[cell - back]
        } else {
            &tape.stem_out
        }
    }

    fn forward_tape(&self, x: &Mat) -> Result<CellTape> {
        if x.cols() != self.input_dim {
            return Err(Error::DimMismatch {
                context: "cell net input",
                expected: self.input_dim,
                got: x.cols(),
            });
        }
        let n = x.rows();
        let l = self.width;
        let mut stem_out = x.matmul(&Mat::from_vec(
            self.input_dim,
            l,
            self.w(self.stem, 0, self.input_dim, l).to_vec(),
        ));
        stem_out.add_row_broadcast(&self.params[self.stem.off + self.input_dim * l..self.stem.off + self.stem.len]);

        let mut tape = CellTape {
            x: x.clone(),
            stem_out,
            nodes: vec![vec![Mat::zeros(n, l); self.nodes_per_cell]; self.num_cells],
            cell_outs: Vec::with_capacity(self.num_cells),
            op_h1: vec![None; self.ops.len()],
            op_h2: vec![None; self.ops.len()],
            output: Mat::zeros(n, self.output_dim),
        };

        for cell in 0..self.num_cells {
            for (op_idx, op) in self.ops.iter().enumerate() {
                if op.cell != cell {
                    continue;
                }
                let input = match op.from {
                    NodeRef::Input(i) => self.cell_input(&tape, cell, i).clone(),
                    NodeRef::Node(j) => tape.nodes[cell][j].clone(),
                };
                let value = self.apply_op(op_idx, op, &input, &mut tape);
                tape.nodes[cell][op.to].add_assign(&value);
            }
            let mut out = Mat::zeros(n, l);
            for node in &tape.nodes[cell] {
                out.add_assign(node);
            }
            tape.cell_outs.push(out);
        }

        let feat = tape.cell_outs.last().unwrap_or(&tape.stem_out);
        let mut y = feat.matmul(&Mat::from_vec(
            l,
            self.output_dim,
            self.w(self.readout, 0, l, self.output_dim).to_vec(),
        ));
        y.add_row_broadcast(
            &self.params[self.readout.off + l * self.output_dim..self.readout.off + self.readout.len],
        );
        tape.output = y;
        Ok(tape)
    }

    fn apply_op(&self, op_idx: usize, op: &OpInstance, input: &Mat, tape: &mut CellTape) -> Mat {
        let l = self.width;
        match op.kind {
            OperatorKind::SkipConnect => input.clone(),
            OperatorKind::Zero => Mat::zeros(input.rows(), l),
            OperatorKind::Dense | OperatorKind::DenseReLU | OperatorKind::DenseTanh => {
                let w = Mat::from_vec(l, l, self.w(op.params, 0, l, l).to_vec());
                let mut h = input.matmul(&w);
                h.add_row_broadcast(&self.params[op.params.off + l * l..op.params.off + op.params.len]);
                let out = match op.kind {
                    OperatorKind::Dense => h.clone(),
                    OperatorKind::DenseReLU => h.map(|v| if v > 0.0 { v } else { 0.0 }),
                    _ => h.map(f64::tanh),
                };
                tape.op_h1[op_idx] = Some(h);
                out
            }
            OperatorKind::Bottleneck => {
                let mid = self.mid;
                let w1 = Mat::from_vec(l, mid, self.w(op.params, 0, l, mid).to_vec());
                let mut h1 = input.matmul(&w1);
                let b1_off = op.params.off + l * mid;
                h1.add_row_broadcast(&self.params[b1_off..b1_off + mid]);
                let z1 = h1.map(|v| if v > 0.0 { v } else { 0.0 });
                let w2_off = b1_off + mid;
                let w2 = Mat::from_vec(mid, l, self.params[w2_off..w2_off + mid * l].to_vec());
                let mut h2 = z1.matmul(&w2);
                let b2_off = w2_off + mid * l;
                h2.add_row_broadcast(&self.params[b2_off..b2_off + l]);
                tape.op_h1[op_idx] = Some(h1);
                tape.op_h2[op_idx] = Some(z1);
                h2
            }
        }
    }

    /// ReLU sign patterns over the probe rows: one bit per DenseReLU unit and
    /// per bottleneck hidden unit, in op order. A network with no ReLU sites
    /// yields empty patterns (a single region).
    pub fn patterns(&self, x: &Mat) -> Result<Vec<crate::net::ActivationPattern>> {
        let tape = self.forward_tape(x)?;
        let mut pats = Vec::with_capacity(x.rows());
        for s in 0..x.rows() {
            let mut p = crate::net::ActivationPattern::with_capacity(16);
            for (op_idx, op) in self.ops.iter().enumerate() {
                match op.kind {
                    OperatorKind::DenseReLU => {
                        let h = tape.op_h1[op_idx].as_ref().unwrap();
                        for &v in h.row(s) {
                            p.push(v > 0.0);
                        }
                    }
                    OperatorKind::Bottleneck => {
                        let h1 = tape.op_h1[op_idx].as_ref().unwrap();
                        for &v in h1.row(s) {
                            p.push(v > 0.0);
                        }
                    }
                    _ => {}
                }
            }
            pats.push(p);
        }
        Ok(pats)
    }

    /// d f_o(x_s) / d theta accumulated into `row` by reverse traversal of
    /// the cell DAG for one (sample, output) pair.
    fn backward_row(&self, tape: &CellTape, sample: usize, out_idx: usize, row: &mut [f64]) {
        let l = self.width;
        let n_cells = self.num_cells;
        let feat_row: &[f64] = tape
            .cell_outs
            .last()
            .unwrap_or(&tape.stem_out)
            .row(sample);

        // readout grads and the cotangent entering the final cell output
        let w_r = self.w(self.readout, 0, l, self.output_dim);
        for mu in 0..l {
            row[self.readout.off + mu * self.output_dim + out_idx] += feat_row[mu];
        }
        row[self.readout.off + l * self.output_dim + out_idx] += 1.0;

        let mut cot_cells: Vec<Vec<f64>> = vec![vec![0.0; l]; n_cells];
        let mut cot_stem = vec![0.0; l];
        if n_cells > 0 {
            for mu in 0..l {
                cot_cells[n_cells - 1][mu] = w_r[mu * self.output_dim + out_idx];
            }
        } else {
            for mu in 0..l {
                cot_stem[mu] = w_r[mu * self.output_dim + out_idx];
            }
        }

        for cell in (0..n_cells).rev() {
            // every intermediate node receives the full cell-output cotangent
            let mut cot_nodes: Vec<Vec<f64>> =
                vec![cot_cells[cell].clone(); self.nodes_per_cell];
            for node in (0..self.nodes_per_cell).rev() {
                let cot = cot_nodes[node].clone();
                if cot.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for (op_idx, op) in self.ops.iter().enumerate() {
                    if op.cell != cell || op.to != node {
                        continue;
                    }
                    let input_row: Vec<f64> = match op.from {
                        NodeRef::Input(i) => self.cell_input(tape, cell, i).row(sample).to_vec(),
                        NodeRef::Node(j) => tape.nodes[cell][j].row(sample).to_vec(),
                    };
                    let cot_from = self.op_backward(op_idx, op, tape, sample, &input_row, &cot, row);
                    match op.from {
                        NodeRef::Input(i) => {
                            let back = i + 1;
                            if cell >= back {
                                crate::mat::axpy(&mut cot_cells[cell - back], 1.0, &cot_from);
                            } else {
                                crate::mat::axpy(&mut cot_stem, 1.0, &cot_from);
                            }
                        }
                        NodeRef::Node(j) => {
                            crate::mat::axpy(&mut cot_nodes[j], 1.0, &cot_from);
                        }
                    }
                }
            }
        }

        // stem grads
        if cot_stem.iter().any(|&v| v != 0.0) {
            let d = self.input_dim;
            let x_row = tape.x.row(sample);
            for (mu, &xv) in x_row.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let dst = &mut row[self.stem.off + mu * l..self.stem.off + (mu + 1) * l];
                for (dv, cv) in dst.iter_mut().zip(&cot_stem) {
                    *dv += xv * cv;
                }
            }
            let b_off = self.stem.off + d * l;
            for (dv, cv) in row[b_off..b_off + l].iter_mut().zip(&cot_stem) {
                *dv += cv;
            }
        }
    }

    /// Backward through one operator for one sample: accumulates parameter
    /// gradients into `row` and returns the cotangent at the operator input.
    fn op_backward(
        &self,
        op_idx: usize,
        op: &OpInstance,
        tape: &CellTape,
        sample: usize,
        input_row: &[f64],
        cot: &[f64],
        row: &mut [f64],
    ) -> Vec<f64> {
        let l = self.width;
        match op.kind {
            OperatorKind::SkipConnect => cot.to_vec(),
            OperatorKind::Zero => vec![0.0; l],
            OperatorKind::Dense | OperatorKind::DenseReLU | OperatorKind::DenseTanh => {
                let h = tape.op_h1[op_idx].as_ref().unwrap().row(sample);
                let g: Vec<f64> = match op.kind {
                    OperatorKind::Dense => cot.to_vec(),
                    OperatorKind::DenseReLU => cot
                        .iter()
                        .zip(h)
                        .map(|(c, &hv)| if hv > 0.0 { *c } else { 0.0 })
                        .collect(),
                    _ => cot
                        .iter()
                        .zip(h)
                        .map(|(c, &hv)| {
                            let t = hv.tanh();
                            c * (1.0 - t * t)
                        })
                        .collect(),
                };
                let w = self.w(op.params, 0, l, l);
                for (mu, &xv) in input_row.iter().enumerate() {
                    if xv != 0.0 {
                        let dst = &mut row[op.params.off + mu * l..op.params.off + (mu + 1) * l];
                        for (dv, gv) in dst.iter_mut().zip(&g) {
                            *dv += xv * gv;
                        }
                    }
                }
                let b_off = op.params.off + l * l;
                for (dv, gv) in row[b_off..b_off + l].iter_mut().zip(&g) {
                    *dv += gv;
                }
                (0..l)
                    .map(|mu| {
                        let wrow = &w[mu * l..(mu + 1) * l];
                        wrow.iter().zip(&g).map(|(wv, gv)| wv * gv).sum()
                    })
                    .collect()
            }
            OperatorKind::Bottleneck => {
                let mid = self.mid;
                let h1 = tape.op_h1[op_idx].as_ref().unwrap().row(sample);
                let z1 = tape.op_h2[op_idx].as_ref().unwrap().row(sample);
                let w1_off = op.params.off;
                let b1_off = w1_off + l * mid;
                let w2_off = b1_off + mid;
                let b2_off = w2_off + mid * l;
                // second layer
                for (mu, &zv) in z1.iter().enumerate() {
                    if zv != 0.0 {
                        let dst = &mut row[w2_off + mu * l..w2_off + (mu + 1) * l];
                        for (dv, cv) in dst.iter_mut().zip(cot) {
                            *dv += zv * cv;
                        }
                    }
                }
                for (dv, cv) in row[b2_off..b2_off + l].iter_mut().zip(cot) {
                    *dv += cv;
                }
                let w2 = &self.params[w2_off..w2_off + mid * l];
                let g_mid: Vec<f64> = (0..mid)
                    .map(|mu| {
                        if h1[mu] > 0.0 {
                            let wrow = &w2[mu * l..(mu + 1) * l];
                            wrow.iter().zip(cot).map(|(wv, cv)| wv * cv).sum()
                        } else {
                            0.0
                        }
                    })
                    .collect();
                // first layer
                for (mu, &xv) in input_row.iter().enumerate() {
                    if xv != 0.0 {
                        let dst = &mut row[w1_off + mu * mid..w1_off + (mu + 1) * mid];
                        for (dv, gv) in dst.iter_mut().zip(&g_mid) {
                            *dv += xv * gv;
                        }
                    }
                }
                for (dv, gv) in row[b1_off..b1_off + mid].iter_mut().zip(&g_mid) {
                    *dv += gv;
                }
                let w1 = &self.params[w1_off..w1_off + l * mid];
                (0..l)
                    .map(|mu| {
                        let wrow = &w1[mu * mid..(mu + 1) * mid];
                        wrow.iter().zip(&g_mid).map(|(wv, gv)| wv * gv).sum()
                    })
                    .collect()
            }
        }
    }
}

impl KernelNet for CellNet {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn width_norm(&self) -> f64 {
        self.width as f64
    }

    fn forward(&self, x: &Mat) -> Result<Mat> {
        Ok(self.forward_tape(x)?.output)
    }

    fn jacobian(&self, x: &Mat) -> Result<Mat> {
        let tape = self.forward_tape(x)?;
        let k = self.output_dim;
        let d = self.params.len();
        let mut jac = Mat::zeros(x.rows() * k, d);
        jac.data_mut().par_chunks_mut(d).enumerate().for_each(|(row_idx, row)| {
            let (sample, out_idx) = (row_idx / k, row_idx % k);
            self.backward_row(&tape, sample, out_idx, row);
        });
        Ok(jac)
    }

    fn readout_features(&self, x: &Mat) -> Result<Mat> {
        let tape = self.forward_tape(x)?;
        Ok(tape.cell_outs.last().unwrap_or(&tape.stem_out).clone())
    }
}

// ---------------------------------------------------------------------------
// scoring and search

/// Kernel-score settings: the meta-kernel mode and ridge, plus the parameter
/// seeds the scores are averaged over.
#[derive(Debug, Clone)]
pub struct KernelScoreConfig {
    pub mode: TimeMode,
    pub ridge: f64,
    pub kind: KernelKind,
    pub seeds: Vec<u64>,
}

impl KernelScoreConfig {
    /// Shipped defaults: infinite adaptation time, ridge 1e-3, meta kernel,
    /// three parameter seeds.
    pub fn default_with_seed(seed: u64) -> Self {
        KernelScoreConfig {
            mode: TimeMode::Continuous { lambda_tau: f64::INFINITY },
            ridge: 1e-3,
            kind: KernelKind::MetaNtk,
            seeds: vec![seed, seed + 1, seed + 2],
        }
    }
}

/// (condition number, linear-region count), each averaged over the config's
/// parameter seeds.
pub fn score_network(
    net: &SuperNet,
    tasks: &[Task],
    kcfg: &KernelScoreConfig,
    probes: &ProbeSet,
) -> Result<(f64, f64)> {
    if kcfg.seeds.is_empty() {
        return Err(Error::InvalidConfig("scoring needs at least one seed".into()));
    }
    let mut c_acc = 0.0;
    let mut r_acc = 0.0;
    for &seed in &kcfg.seeds {
        let cell_net = materialize(net, seed)?;
        let kernel = assemble_train_kernel_net(&cell_net, tasks, kcfg.mode, kcfg.ridge, kcfg.kind)?;
        c_acc += condition_number(&kernel.to_sym()?, kcfg.ridge)?;
        r_acc += count_distinct_patterns(&cell_net.patterns(&probes.inputs)?) as f64;
    }
    let n = kcfg.seeds.len() as f64;
    Ok((c_acc / n, r_acc / n))
}

/// Score change from removing one operator: (score of the current supernet)
/// minus (score of the supernet without it). `None` marks a protected
/// operator (the sole survivor on its edge), which is never pruned.
pub fn delta_scores(
    net: &SuperNet,
    edge_idx: usize,
    slot: usize,
    tasks: &[Task],
    kcfg: &KernelScoreConfig,
    probes: &ProbeSet,
) -> Result<Option<(f64, f64)>> {
    let base = score_network(net, tasks, kcfg, probes)?;
    delta_scores_against(net, base, edge_idx, slot, tasks, kcfg, probes)
}

fn delta_scores_against(
    net: &SuperNet,
    base: (f64, f64),
    edge_idx: usize,
    slot: usize,
    tasks: &[Task],
    kcfg: &KernelScoreConfig,
    probes: &ProbeSet,
) -> Result<Option<(f64, f64)>> {
    let edge = net
        .edges
        .get(edge_idx)
        .ok_or_else(|| Error::InvalidConfig(format!("no edge {edge_idx}")))?;
    if !edge.ops.iter().any(|o| o.slot == slot) {
        return Err(Error::InvalidConfig(format!("no op slot {slot} on edge {edge_idx}")));
    }
    if edge.ops.len() < 2 {
        return Ok(None);
    }
    let minus = net.without(edge_idx, slot);
    let (c_minus, r_minus) = score_network(&minus, tasks, kcfg, probes)?;
    Ok(Some((base.0 - c_minus, base.1 - r_minus)))
}

/// Importance record of one scored operator in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub edge_idx: usize,
    pub slot: usize,
    pub kind: OperatorKind,
    pub delta_c: f64,
    pub delta_r: f64,
    /// 0-based index in the delta-C list sorted descending.
    pub s_c: usize,
    /// 0-based index in the delta-R list sorted ascending.
    pub s_r: usize,
    /// Rank sum; the per-edge argmin is pruned.
    pub s: usize,
}

/// Assigns global rank sums. Delta-C ranks descend (a removal that improves
/// conditioning the most ranks first, i.e. least important); delta-R ranks
/// ascend (a removal that costs the fewest regions ranks first). Ties break
/// by ascending operator id (edge index, then slot).
pub fn importance_ranks(partials: &[(usize, usize, OperatorKind, f64, f64)]) -> Vec<ScoreRecord> {
    let n = partials.len();
    let id = |i: usize| (partials[i].0, partials[i].1);

    let mut by_c: Vec<usize> = (0..n).collect();
    by_c.sort_by(|&a, &b| {
        partials[b]
            .3
            .partial_cmp(&partials[a].3)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(id(a).cmp(&id(b)))
    });
    let mut by_r: Vec<usize> = (0..n).collect();
    by_r.sort_by(|&a, &b| {
        partials[a]
            .4
            .partial_cmp(&partials[b].4)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(id(a).cmp(&id(b)))
    });

    let mut s_c = vec![0usize; n];
    for (rank, &i) in by_c.iter().enumerate() {
        s_c[i] = rank;
    }
    let mut s_r = vec![0usize; n];
    for (rank, &i) in by_r.iter().enumerate() {
        s_r[i] = rank;
    }

    partials
        .iter()
        .enumerate()
        .map(|(i, &(edge_idx, slot, kind, delta_c, delta_r))| ScoreRecord {
            edge_idx,
            slot,
            kind,
            delta_c,
            delta_r,
            s_c: s_c[i],
            s_r: s_r[i],
            s: s_c[i] + s_r[i],
        })
        .collect()
}

/// Removes the least important operator from every multi-operator edge
/// (argmin rank sum, ties by ascending slot). Single-operator edges are left
/// alone.
pub fn prune_round(net: &SuperNet, records: &[ScoreRecord]) -> SuperNet {
    let mut pruned = net.clone();
    for (edge_idx, edge) in net.edges.iter().enumerate() {
        if edge.ops.len() < 2 {
            continue;
        }
        let victim = records
            .iter()
            .filter(|r| r.edge_idx == edge_idx)
            .min_by(|a, b| a.s.cmp(&b.s).then(a.slot.cmp(&b.slot)));
        if let Some(v) = victim {
            pruned.edges[edge_idx].ops.retain(|o| o.slot != v.slot);
        }
    }
    pruned
}

/// One audit line: every scored operator of every round, with its deltas,
/// ranks, and whether it was pruned that round.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub round: usize,
    pub cell: usize,
    pub edge: String,
    pub edge_idx: usize,
    pub slot: usize,
    pub kind: OperatorKind,
    pub delta_c: f64,
    pub delta_r: f64,
    pub s_c: usize,
    pub s_r: usize,
    pub s: usize,
    pub pruned: bool,
}

pub fn audit_csv(rows: &[AuditRow]) -> String {
    let header = ["round", "cell", "edge", "op", "kind", "delta_c", "delta_r", "s_c", "s_r", "s", "pruned"];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.round.to_string(),
                r.cell.to_string(),
                r.edge.clone(),
                r.slot.to_string(),
                r.kind.name().to_string(),
                crate::ioutil::fmt_float(r.delta_c),
                crate::ioutil::fmt_float(r.delta_r),
                r.s_c.to_string(),
                r.s_r.to_string(),
                r.s.to_string(),
                (r.pruned as u8).to_string(),
            ]
        })
        .collect();
    crate::ioutil::csv_string(&header, &body)
}

#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub kernel: KernelScoreConfig,
    pub probes: ProbeSet,
}

/// Runs the pruning search to a single-path network. With a uniform initial
/// operator count per edge the loop takes exactly (count - 1) rounds, since
/// every multi-operator edge loses one operator per round.
pub fn search(
    supernet: &SuperNet,
    tasks: &[Task],
    config: &SearchConfig,
) -> Result<(Architecture, Vec<AuditRow>)> {
    let mut net = supernet.clone();
    net.validate()?;
    let mut audit = Vec::new();
    let mut round = 0usize;
    while !net.is_single_path() {
        let base = score_network(&net, tasks, &config.kernel, &config.probes)?;
        let candidates: Vec<(usize, usize, OperatorKind)> = net
            .edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.ops.len() > 1)
            .flat_map(|(ei, e)| e.ops.iter().map(move |o| (ei, o.slot, o.kind)))
            .collect();
        let deltas: Vec<Result<Option<(f64, f64)>>> = candidates
            .par_iter()
            .map(|&(ei, slot, _)| {
                delta_scores_against(&net, base, ei, slot, tasks, &config.kernel, &config.probes)
            })
            .collect();
        let mut partials = Vec::with_capacity(candidates.len());
        for (&(ei, slot, kind), delta) in candidates.iter().zip(deltas) {
            let (dc, dr) = delta?.expect("multi-op edges only");
            partials.push((ei, slot, kind, dc, dr));
        }
        let records = importance_ranks(&partials);
        let next = prune_round(&net, &records);
        for r in &records {
            let edge = &net.edges[r.edge_idx];
            let still_alive = next.edges[r.edge_idx].ops.iter().any(|o| o.slot == r.slot);
            audit.push(AuditRow {
                round,
                cell: edge.cell,
                edge: edge.descriptor(),
                edge_idx: r.edge_idx,
                slot: r.slot,
                kind: r.kind,
                delta_c: r.delta_c,
                delta_r: r.delta_r,
                s_c: r.s_c,
                s_r: r.s_r,
                s: r.s,
                pruned: !still_alive,
            });
        }
        net = next;
        round += 1;
        if round > supernet.alive_ops() {
            return Err(Error::InvalidConfig("search failed to shrink the supernet".into()));
        }
    }
    Ok((Architecture::from_supernet(net)?, audit))
}
