//! Tangent-kernel construction.
//!
//! Base kernels: the empirical NTK (width-normalized Jacobian Gram), its
//! deterministic wide limit computed by closed-form layer recursion, and the
//! readout-feature (NNGP) kernel of networks trained only in their last
//! layer. On top of these, the composite meta kernels: blocks mixing base
//! kernels through the adaptation operator, assembled task-by-task into the
//! block matrices that drive the closed-form predictors and the architecture
//! scores. A direct second-order construction (differentiating through the
//! unrolled inner loop) is kept as the verification path; the composite is
//! the production path since it needs first-order gradients only.
//!
//! All empirical kernels carry the mandatory 1/l width normalization, l being
//! the narrowest hidden width. The analytic recursion is the exact wide limit
//! of that normalized Gram under fan-in Gaussian parameterization: per-layer
//! feature covariances S^h weighted by products of derivative covariances,
//!     theta = sum_{h=2..L+1} S^h * prod_{j=h..L} sigma_w^2 * Sdot^j,
//! with the closed-form arc-cosine (ReLU) and arcsine (Erf) expectations.
//! Input-layer and bias contributions are O(1/l) under this normalization
//! and vanish from the limit.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{t_tilde, SymMatrix, TimeMode};
use crate::mat::Mat;
use crate::maml;
use crate::net::{self, NetworkSpec, ParamVector};
use crate::tasks::{check_homogeneous, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Ntk,
    Nngp,
    MetaNtk,
    Anil,
}

impl KernelKind {
    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Ntk => "ntk",
            KernelKind::Nngp => "nngp",
            KernelKind::MetaNtk => "metantk",
            KernelKind::Anil => "anil",
        }
    }

    fn code(self) -> u8 {
        match self {
            KernelKind::Ntk => 0,
            KernelKind::Nngp => 1,
            KernelKind::MetaNtk => 2,
            KernelKind::Anil => 3,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => KernelKind::Ntk,
            1 => KernelKind::Nngp,
            2 => KernelKind::MetaNtk,
            3 => KernelKind::Anil,
            _ => return Err(Error::Parse { line: 0, msg: format!("bad kernel kind {c}") }),
        })
    }
}

/// (task id, block size) along one axis of a block kernel matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockInfo {
    pub task: usize,
    pub size: usize,
}

/// Dense kernel matrix with block-structure metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub mat: Mat,
    pub row_blocks: Vec<BlockInfo>,
    pub col_blocks: Vec<BlockInfo>,
    pub kind: KernelKind,
}

impl KernelMatrix {
    pub fn single_block(mat: Mat, kind: KernelKind) -> Self {
        let row_blocks = vec![BlockInfo { task: 0, size: mat.rows() }];
        let col_blocks = vec![BlockInfo { task: 0, size: mat.cols() }];
        KernelMatrix { mat, row_blocks, col_blocks, kind }
    }

    pub fn is_square(&self) -> bool {
        self.mat.rows() == self.mat.cols()
    }

    pub fn to_sym(&self) -> Result<SymMatrix> {
        SymMatrix::new(self.mat.clone())
    }

    /// Binary container: magic, version, kind, dims, block layout, row-major
    /// little-endian f64 payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"KMAT");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.push(self.kind.code());
        out.extend_from_slice(&(self.mat.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(self.mat.cols() as u64).to_le_bytes());
        for blocks in [&self.row_blocks, &self.col_blocks] {
            out.extend_from_slice(&(blocks.len() as u64).to_le_bytes());
            for b in blocks.iter() {
                out.extend_from_slice(&(b.task as u64).to_le_bytes());
                out.extend_from_slice(&(b.size as u64).to_le_bytes());
            }
        }
        for v in self.mat.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |msg: &str| Error::Parse { line: 0, msg: msg.to_string() };
        let mut pos = 0usize;
        let take = |pos: &mut usize, len: usize| -> Result<&[u8]> {
            if *pos + len > bytes.len() {
                return Err(err("truncated kernel container"));
            }
            let s = &bytes[*pos..*pos + len];
            *pos += len;
            Ok(s)
        };
        if take(&mut pos, 4)? != b"KMAT" {
            return Err(err("bad magic"));
        }
        let ver = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if ver != 1 {
            return Err(err("unsupported kernel container version"));
        }
        let kind = KernelKind::from_code(take(&mut pos, 1)?[0])?;
        let read_u64 = |pos: &mut usize| -> Result<u64> {
            Ok(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()))
        };
        let rows = read_u64(&mut pos)? as usize;
        let cols = read_u64(&mut pos)? as usize;
        let mut blocks = Vec::new();
        for _ in 0..2 {
            let nb = read_u64(&mut pos)? as usize;
            let mut bl = Vec::with_capacity(nb);
            for _ in 0..nb {
                let task = read_u64(&mut pos)? as usize;
                let size = read_u64(&mut pos)? as usize;
                bl.push(BlockInfo { task, size });
            }
            blocks.push(bl);
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        if pos != bytes.len() {
            return Err(err("trailing bytes in kernel container"));
        }
        let col_blocks = blocks.pop().unwrap();
        let row_blocks = blocks.pop().unwrap();
        Ok(KernelMatrix { mat: Mat::from_vec(rows, cols, data), row_blocks, col_blocks, kind })
    }

    /// Plain matrix rows, 17 significant digits, for inspection.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.mat.rows() {
            let cells: Vec<String> =
                self.mat.row(i).iter().map(|v| crate::ioutil::fmt_float(*v)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn relative_frob_distance(a: &Mat, b: &Mat) -> f64 {
    let denom = b.frob_norm().max(f64::MIN_POSITIVE);
    a.sub(b).frob_norm() / denom
}

/// Anything that can serve as the network behind an empirical kernel.
pub trait KernelNet: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Width normalizer l for the 1/l Gram scaling.
    fn width_norm(&self) -> f64;
    fn forward(&self, x: &Mat) -> Result<Mat>;
    /// Per-sample parameter Jacobian, row (s * k + o).
    fn jacobian(&self, x: &Mat) -> Result<Mat>;
    /// Features seen by the readout layer.
    fn readout_features(&self, x: &Mat) -> Result<Mat>;
}

/// The fully-connected network as a kernel source.
pub struct MlpNet<'a> {
    pub spec: &'a NetworkSpec,
    pub params: &'a ParamVector,
}

impl KernelNet for MlpNet<'_> {
    fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    fn width_norm(&self) -> f64 {
        self.spec.width_norm()
    }

    fn forward(&self, x: &Mat) -> Result<Mat> {
        net::predict(self.spec, self.params, x)
    }

    fn jacobian(&self, x: &Mat) -> Result<Mat> {
        net::per_sample_jacobian(self.spec, self.params, x)
    }

    fn readout_features(&self, x: &Mat) -> Result<Mat> {
        net::readout_features(self.spec, self.params, x)
    }
}

/// (1/l) J(x1) J(x2)^T for any kernel net.
pub fn empirical_ntk_net(net: &dyn KernelNet, x1: &Mat, x2: &Mat) -> Result<Mat> {
    let j1 = net.jacobian(x1)?;
    let j2 = if std::ptr::eq(x1, x2) || x1 == x2 { j1.clone() } else { net.jacobian(x2)? };
    Ok(j1.matmul_bt(&j2).scale(1.0 / net.width_norm()))
}

/// (1/l) z(x1) z(x2)^T lifted to k outputs: the kernel of gradient descent
/// restricted to the readout weights.
pub fn empirical_nngp_net(net: &dyn KernelNet, x1: &Mat, x2: &Mat) -> Result<Mat> {
    let f1 = net.readout_features(x1)?;
    let f2 = if std::ptr::eq(x1, x2) || x1 == x2 { f1.clone() } else { net.readout_features(x2)? };
    let scalar = f1.matmul_bt(&f2).scale(1.0 / net.width_norm());
    Ok(scalar.kron_identity(net.output_dim()))
}

pub fn empirical_ntk(
    spec: &NetworkSpec,
    params: &ParamVector,
    x1: &Mat,
    x2: &Mat,
) -> Result<KernelMatrix> {
    let net = MlpNet { spec, params };
    Ok(KernelMatrix::single_block(empirical_ntk_net(&net, x1, x2)?, KernelKind::Ntk))
}

pub fn empirical_nngp(
    spec: &NetworkSpec,
    params: &ParamVector,
    x1: &Mat,
    x2: &Mat,
) -> Result<KernelMatrix> {
    let net = MlpNet { spec, params };
    Ok(KernelMatrix::single_block(empirical_nngp_net(&net, x1, x2)?, KernelKind::Nngp))
}

// ---------------------------------------------------------------------------
// analytic recursion

use crate::net::Activation;

/// E[phi(u) phi(v)] and E[phi'(u) phi'(v)] over a centered bivariate Gaussian
/// with covariance [[a, c], [c, b]].
fn gauss_expectations(act: Activation, a: f64, c: f64, b: f64) -> Result<(f64, f64)> {
    match act {
        Activation::ReLU => {
            if a <= 0.0 || b <= 0.0 {
                // a degenerate marginal is almost surely 0, and phi(0) = phi'(0) = 0
                return Ok((0.0, 0.0));
            }
            let denom = (a * b).sqrt();
            let cos = (c / denom).clamp(-1.0, 1.0);
            let theta = cos.acos();
            let pi = std::f64::consts::PI;
            let s = denom / (2.0 * pi) * (theta.sin() + (pi - theta) * cos);
            let ds = (pi - theta) / (2.0 * pi);
            Ok((s, ds))
        }
        Activation::Erf => {
            let da = 1.0 + 2.0 * a;
            let db = 1.0 + 2.0 * b;
            let pi = std::f64::consts::PI;
            let s = 2.0 / pi * (2.0 * c / (da * db).sqrt()).clamp(-1.0, 1.0).asin();
            let det = (da * db - 4.0 * c * c).max(f64::MIN_POSITIVE);
            let ds = 4.0 / (pi * det.sqrt());
            Ok((s, ds))
        }
        Activation::Identity => {
            Err(Error::InvalidConfig("analytic kernel needs ReLU or Erf activation".into()))
        }
    }
}

fn analytic_spec_check(spec: &NetworkSpec) -> Result<()> {
    if !matches!(spec.activation, Activation::ReLU | Activation::Erf) {
        return Err(Error::InvalidConfig(format!(
            "analytic kernel unsupported for activation {}",
            spec.activation.name()
        )));
    }
    if spec.hidden_widths.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::InvalidConfig("analytic kernel needs equal hidden widths".into()));
    }
    Ok(())
}

/// Deterministic wide-limit kernel value for one input pair.
fn analytic_scalar(spec: &NetworkSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    let d = spec.input_dim as f64;
    let sw2 = spec.sigma_w * spec.sigma_w;
    let sb2 = spec.sigma_b * spec.sigma_b;
    let mut axx = sw2 * crate::mat::dot(x, x) / d + sb2;
    let mut axy = sw2 * crate::mat::dot(x, y) / d + sb2;
    let mut ayy = sw2 * crate::mat::dot(y, y) / d + sb2;
    let depth = spec.depth();
    if depth == 0 {
        // no hidden layer: the kernel of the linear readout itself
        return Ok(axy);
    }
    let mut theta: Option<f64> = None;
    for _ in 0..depth {
        let (s_xy, ds_xy) = gauss_expectations(spec.activation, axx, axy, ayy)?;
        let (s_xx, _) = gauss_expectations(spec.activation, axx, axx, axx)?;
        let (s_yy, _) = gauss_expectations(spec.activation, ayy, ayy, ayy)?;
        theta = Some(match theta {
            None => s_xy,
            Some(t) => s_xy + sw2 * ds_xy * t,
        });
        axx = sw2 * s_xx + sb2;
        axy = sw2 * s_xy + sb2;
        ayy = sw2 * s_yy + sb2;
    }
    Ok(theta.unwrap())
}

/// Wide-limit kernel over two input batches, lifted to k outputs.
pub fn analytic_ntk_gram(spec: &NetworkSpec, x1: &Mat, x2: &Mat) -> Result<Mat> {
    analytic_spec_check(spec)?;
    let mut scalar = Mat::zeros(x1.rows(), x2.rows());
    for i in 0..x1.rows() {
        for j in 0..x2.rows() {
            scalar.set(i, j, analytic_scalar(spec, x1.row(i), x2.row(j))?);
        }
    }
    Ok(scalar.kron_identity(spec.output_dim))
}

pub fn analytic_ntk(spec: &NetworkSpec, x1: &Mat, x2: &Mat) -> Result<KernelMatrix> {
    Ok(KernelMatrix::single_block(analytic_ntk_gram(spec, x1, x2)?, KernelKind::Ntk))
}

// ---------------------------------------------------------------------------
// base kernel sources and composite assembly

/// Which base kernel the composite is built from.
pub enum BaseKernelSource<'a> {
    EmpiricalNtk { spec: &'a NetworkSpec, params: &'a ParamVector },
    AnalyticNtk { spec: &'a NetworkSpec },
    EmpiricalNngp { spec: &'a NetworkSpec, params: &'a ParamVector },
}

impl BaseKernelSource<'_> {
    pub fn output_dim(&self) -> usize {
        match self {
            BaseKernelSource::EmpiricalNtk { spec, .. }
            | BaseKernelSource::AnalyticNtk { spec }
            | BaseKernelSource::EmpiricalNngp { spec, .. } => spec.output_dim,
        }
    }

    /// Full cross Gram between two input batches.
    pub fn gram(&self, x1: &Mat, x2: &Mat) -> Result<Mat> {
        match self {
            BaseKernelSource::EmpiricalNtk { spec, params } => {
                empirical_ntk_net(&MlpNet { spec, params }, x1, x2)
            }
            BaseKernelSource::AnalyticNtk { spec } => analytic_ntk_gram(spec, x1, x2),
            BaseKernelSource::EmpiricalNngp { spec, params } => {
                empirical_nngp_net(&MlpNet { spec, params }, x1, x2)
            }
        }
    }

    /// The readout-restricted partner kernel used on the adaptation path of
    /// the ANIL composite.
    fn nngp_partner(&self) -> Result<BaseKernelSource<'_>> {
        match self {
            BaseKernelSource::EmpiricalNtk { spec, params }
            | BaseKernelSource::EmpiricalNngp { spec, params } => {
                Ok(BaseKernelSource::EmpiricalNngp { spec, params })
            }
            BaseKernelSource::AnalyticNtk { .. } => Err(Error::InvalidConfig(
                "ANIL composites need an empirical base (no analytic readout kernel)".into(),
            )),
        }
    }
}

/// Pooled base Grams over the points of a task list: all query batches first,
/// then all support batches, in task order, each block k-expanded.
pub(crate) struct PooledGrams {
    theta: Mat,
    nngp: Option<Mat>,
    k: usize,
    n: usize,
    m: usize,
    count: usize,
}

#[derive(Clone, Copy)]
enum Part {
    Query,
    Support,
}

impl PooledGrams {
    fn offset(&self, part: Part, idx: usize) -> usize {
        match part {
            Part::Query => idx * self.k * self.n,
            Part::Support => self.count * self.k * self.n + idx * self.k * self.m,
        }
    }

    fn size(&self, part: Part) -> usize {
        match part {
            Part::Query => self.k * self.n,
            Part::Support => self.k * self.m,
        }
    }

    fn theta_block(&self, pr: Part, i: usize, pc: Part, j: usize) -> Mat {
        self.theta
            .submatrix(self.offset(pr, i), self.size(pr), self.offset(pc, j), self.size(pc))
    }

    fn nngp_block(&self, pr: Part, i: usize, pc: Part, j: usize) -> Mat {
        self.nngp
            .as_ref()
            .expect("nngp gram prepared")
            .submatrix(self.offset(pr, i), self.size(pr), self.offset(pc, j), self.size(pc))
    }
}

fn pooled_inputs(tasks: &[&Task]) -> Mat {
    let d = tasks[0].input_dim();
    let total: usize = tasks.iter().map(|t| t.query_count()).sum::<usize>()
        + tasks.iter().map(|t| t.support_count()).sum::<usize>();
    let mut x = Mat::zeros(total, d);
    let mut row = 0;
    for t in tasks {
        x.paste(row, 0, &t.query_x);
        row += t.query_count();
    }
    for t in tasks {
        x.paste(row, 0, &t.support_x);
        row += t.support_count();
    }
    x
}

fn build_pooled_enum(
    base: &BaseKernelSource<'_>,
    tasks: &[&Task],
    need_nngp: bool,
) -> Result<PooledGrams> {
    let (n, m, _, k_task) = check_homogeneous_refs(tasks)?;
    let k = base.output_dim();
    if k != k_task {
        return Err(Error::DimMismatch { context: "task output dim", expected: k, got: k_task });
    }
    let x = pooled_inputs(tasks);
    let theta = base.gram(&x, &x)?;
    let nngp = if need_nngp { Some(base.nngp_partner()?.gram(&x, &x)?) } else { None };
    Ok(PooledGrams { theta, nngp, k, n, m, count: tasks.len() })
}

fn build_pooled_net(net: &dyn KernelNet, tasks: &[&Task], need_nngp: bool) -> Result<PooledGrams> {
    let (n, m, _, k_task) = check_homogeneous_refs(tasks)?;
    let k = net.output_dim();
    if k != k_task {
        return Err(Error::DimMismatch { context: "task output dim", expected: k, got: k_task });
    }
    let x = pooled_inputs(tasks);
    let theta = empirical_ntk_net(net, &x, &x)?;
    let nngp = if need_nngp { Some(empirical_nngp_net(net, &x, &x)?) } else { None };
    Ok(PooledGrams { theta, nngp, k, n, m, count: tasks.len() })
}

fn check_homogeneous_refs(tasks: &[&Task]) -> Result<(usize, usize, usize, usize)> {
    let first = tasks.first().ok_or_else(|| Error::InvalidConfig("empty task list".into()))?;
    let shape =
        (first.query_count(), first.support_count(), first.input_dim(), first.output_dim());
    for t in tasks {
        if (t.query_count(), t.support_count(), t.input_dim(), t.output_dim()) != shape {
            return Err(Error::InvalidConfig("heterogeneous task shapes".into()));
        }
    }
    Ok(shape)
}

/// One composite block between tasks i and j given pooled grams and the
/// per-task adaptation operators (from the adaptation-path kernel).
pub(crate) fn composite_block(g: &PooledGrams, t_ops: &[Mat], i: usize, j: usize, anil: bool) -> Mat {
    use Part::*;
    // kernels on the adaptation path: NNGP for ANIL, the base NTK otherwise
    let adapt = |pr: Part, a: usize, pc: Part, b: usize| -> Mat {
        if anil {
            g.nngp_block(pr, a, pc, b)
        } else {
            g.theta_block(pr, a, pc, b)
        }
    };
    let term1 = g.theta_block(Query, i, Query, j);
    let qs_i = adapt(Query, i, Support, i).matmul(&t_ops[i]);
    let sq_j = t_ops[j].matmul(&adapt(Support, j, Query, j));
    let term2 = qs_i.matmul(&g.theta_block(Support, i, Support, j)).matmul(&sq_j);
    let term3 = adapt(Query, i, Support, i).matmul(&t_ops[i]).matmul(&g.theta_block(Support, i, Query, j));
    let term4 = g.theta_block(Query, i, Support, j).matmul(&t_ops[j]).matmul(&adapt(Support, j, Query, j));
    term1.add(&term2).sub(&term3).sub(&term4)
}

fn adaptation_operators(
    g: &PooledGrams,
    mode: TimeMode,
    ridge: f64,
    anil: bool,
) -> Result<Vec<Mat>> {
    (0..g.count)
        .map(|i| {
            let ss = if anil {
                g.nngp_block(Part::Support, i, Part::Support, i)
            } else {
                g.theta_block(Part::Support, i, Part::Support, i)
            };
            Ok(t_tilde(&SymMatrix::new(ss)?, mode, ridge)?.into_mat())
        })
        .collect()
}

fn assemble_square(
    g: &PooledGrams,
    mode: TimeMode,
    ridge: f64,
    kind: KernelKind,
) -> Result<KernelMatrix> {
    let anil = matches!(kind, KernelKind::Anil);
    if !matches!(kind, KernelKind::MetaNtk | KernelKind::Anil) {
        return Err(Error::InvalidConfig("assembled kernels are MetaNTK or ANIL".into()));
    }
    let t_ops = adaptation_operators(g, mode, ridge, anil)?;
    let kn = g.k * g.n;
    let total = kn * g.count;
    let mut out = Mat::zeros(total, total);
    // compute upper blocks in parallel, mirror for exact symmetry
    let pairs: Vec<(usize, usize)> =
        (0..g.count).flat_map(|i| (i..g.count).map(move |j| (i, j))).collect();
    let blocks: Vec<Mat> = pairs
        .par_iter()
        .map(|&(i, j)| composite_block(g, &t_ops, i, j, anil))
        .collect();
    for (&(i, j), b) in pairs.iter().zip(&blocks) {
        if i == j {
            out.paste(i * kn, j * kn, &b.symmetrized());
        } else {
            out.paste(i * kn, j * kn, b);
            out.paste(j * kn, i * kn, &b.transpose());
        }
    }
    let blocks_meta: Vec<BlockInfo> =
        (0..g.count).map(|t| BlockInfo { task: t, size: kn }).collect();
    Ok(KernelMatrix { mat: out, row_blocks: blocks_meta.clone(), col_blocks: blocks_meta, kind })
}

fn assemble_strip(
    g: &PooledGrams,
    mode: TimeMode,
    ridge: f64,
    kind: KernelKind,
) -> Result<KernelMatrix> {
    // pooled task 0 is the test task; columns run over tasks 1..count
    let anil = matches!(kind, KernelKind::Anil);
    if !matches!(kind, KernelKind::MetaNtk | KernelKind::Anil) {
        return Err(Error::InvalidConfig("assembled kernels are MetaNTK or ANIL".into()));
    }
    let t_ops = adaptation_operators(g, mode, ridge, anil)?;
    let kn = g.k * g.n;
    let cols = g.count - 1;
    let mut out = Mat::zeros(kn, kn * cols);
    for j in 1..g.count {
        let b = composite_block(g, &t_ops, 0, j, anil);
        out.paste(0, (j - 1) * kn, &b);
    }
    let col_blocks: Vec<BlockInfo> =
        (0..cols).map(|t| BlockInfo { task: t, size: kn }).collect();
    Ok(KernelMatrix {
        mat: out,
        row_blocks: vec![BlockInfo { task: 0, size: kn }],
        col_blocks,
        kind,
    })
}

/// One composite meta-kernel block between two tasks.
pub fn metantk_block(
    base: &BaseKernelSource<'_>,
    task_i: &Task,
    task_j: &Task,
    mode: TimeMode,
    ridge: f64,
) -> Result<Mat> {
    let g = build_pooled_enum(base, &[task_i, task_j], false)?;
    let t_ops = adaptation_operators(&g, mode, ridge, false)?;
    Ok(composite_block(&g, &t_ops, 0, 1, false))
}

/// The ANIL variant: adaptation-path kernels (and the operator itself) come
/// from the readout-restricted kernel, query-query and support-support
/// centers stay NTK.
pub fn anil_block(
    base_ntk: &BaseKernelSource<'_>,
    base_nngp: &BaseKernelSource<'_>,
    task_i: &Task,
    task_j: &Task,
    mode: TimeMode,
    ridge: f64,
) -> Result<Mat> {
    let refs = [task_i, task_j];
    let (n, m, _, k_task) = check_homogeneous_refs(&refs)?;
    let k = base_ntk.output_dim();
    if k != k_task {
        return Err(Error::DimMismatch { context: "task output dim", expected: k, got: k_task });
    }
    let x = pooled_inputs(&refs);
    let theta = base_ntk.gram(&x, &x)?;
    let nngp = base_nngp.gram(&x, &x)?;
    let g = PooledGrams { theta, nngp: Some(nngp), k, n, m, count: 2 };
    let t_ops = adaptation_operators(&g, mode, ridge, true)?;
    Ok(composite_block(&g, &t_ops, 0, 1, true))
}

/// knN x knN train kernel: block (i, j) is the composite between tasks i and
/// j; symmetry is exact by construction (upper blocks mirrored).
pub fn assemble_train_kernel(
    tasks: &[Task],
    base: &BaseKernelSource<'_>,
    mode: TimeMode,
    ridge: f64,
    kind: KernelKind,
) -> Result<KernelMatrix> {
    let refs: Vec<&Task> = tasks.iter().collect();
    let g = build_pooled_enum(base, &refs, matches!(kind, KernelKind::Anil))?;
    assemble_square(&g, mode, ridge, kind)
}

/// kn x knN strip of composite blocks between a test task and the train set.
pub fn assemble_test_train(
    test_task: &Task,
    tasks: &[Task],
    base: &BaseKernelSource<'_>,
    mode: TimeMode,
    ridge: f64,
    kind: KernelKind,
) -> Result<KernelMatrix> {
    let mut refs: Vec<&Task> = vec![test_task];
    refs.extend(tasks.iter());
    let g = build_pooled_enum(base, &refs, matches!(kind, KernelKind::Anil))?;
    assemble_strip(&g, mode, ridge, kind)
}

/// Net-generic variants used by the architecture search, where the kernel
/// source is a materialized cell network rather than a plain MLP.
pub fn assemble_train_kernel_net(
    net: &dyn KernelNet,
    tasks: &[Task],
    mode: TimeMode,
    ridge: f64,
    kind: KernelKind,
) -> Result<KernelMatrix> {
    let refs: Vec<&Task> = tasks.iter().collect();
    let g = build_pooled_net(net, &refs, matches!(kind, KernelKind::Anil))?;
    assemble_square(&g, mode, ridge, kind)
}

// ---------------------------------------------------------------------------
// direct (second-order) path

/// Jacobian of the tau-step meta-output w.r.t. the initial parameters,
/// row (s * k + o). Exact differentiation through the unrolled inner loop,
/// so the Hessian factors of the adaptation are included.
pub fn meta_jacobian(
    spec: &NetworkSpec,
    params: &ParamVector,
    task: &Task,
    lambda: f64,
    tau: u32,
) -> Result<Mat> {
    let trace = maml::inner_adapt_traced(spec, params, &task.support_x, &task.support_y, lambda, tau)?;
    let mut jac = net::per_sample_jacobian(spec, &trace.adapted, &task.query_x)?;
    let d = params.len();
    jac.data_mut().par_chunks_mut(d).for_each(|row| {
        maml::pullback_through_adaptation(spec, &trace, &task.support_y, lambda, row);
    });
    Ok(jac)
}

fn stacked_meta_jacobian(
    spec: &NetworkSpec,
    params: &ParamVector,
    tasks: &[Task],
    lambda: f64,
    tau: u32,
) -> Result<Mat> {
    check_homogeneous(tasks)?;
    let kn = tasks[0].query_count() * tasks[0].output_dim();
    let mut m = Mat::zeros(kn * tasks.len(), params.len());
    for (i, t) in tasks.iter().enumerate() {
        let j = meta_jacobian(spec, params, t, lambda, tau)?;
        m.paste(i * kn, 0, &j);
    }
    Ok(m)
}

/// The meta kernel computed from its definition: (1/l) times the Gram of the
/// meta-output Jacobian. `lambda` is the raw inner rate on parameters; the
/// composite analogue is `TimeMode::Discrete { lambda * l, tau }`.
pub fn metantk_direct(
    spec: &NetworkSpec,
    params: &ParamVector,
    tasks: &[Task],
    lambda: f64,
    tau: u32,
) -> Result<KernelMatrix> {
    let m = stacked_meta_jacobian(spec, params, tasks, lambda, tau)?;
    let gram = m.matmul_bt(&m).scale(1.0 / spec.width_norm());
    let kn = tasks[0].query_count() * tasks[0].output_dim();
    let blocks: Vec<BlockInfo> =
        (0..tasks.len()).map(|t| BlockInfo { task: t, size: kn }).collect();
    Ok(KernelMatrix { mat: gram, row_blocks: blocks.clone(), col_blocks: blocks, kind: KernelKind::MetaNtk })
}

/// Cross Gram of meta-output Jacobians between two task lists.
pub fn metantk_direct_cross(
    spec: &NetworkSpec,
    params: &ParamVector,
    row_tasks: &[Task],
    col_tasks: &[Task],
    lambda: f64,
    tau: u32,
) -> Result<KernelMatrix> {
    let mr = stacked_meta_jacobian(spec, params, row_tasks, lambda, tau)?;
    let mc = stacked_meta_jacobian(spec, params, col_tasks, lambda, tau)?;
    let gram = mr.matmul_bt(&mc).scale(1.0 / spec.width_norm());
    let kn_r = row_tasks[0].query_count() * row_tasks[0].output_dim();
    let kn_c = col_tasks[0].query_count() * col_tasks[0].output_dim();
    Ok(KernelMatrix {
        mat: gram,
        row_blocks: (0..row_tasks.len()).map(|t| BlockInfo { task: t, size: kn_r }).collect(),
        col_blocks: (0..col_tasks.len()).map(|t| BlockInfo { task: t, size: kn_c }).collect(),
        kind: KernelKind::MetaNtk,
    })
}
