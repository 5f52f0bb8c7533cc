//! Hand-written reverse-mode automatic differentiation and the RNN-FNN
//! hedging policy: LSTM cells (implemented exactly as the printed gate
//! equations: no forget gate and, by default, no recurrence on the previous
//! hidden state), ReLU feedforward layers, the leverage-capped output
//! activation, inverted dropout, Glorot initialization, and ADAM.
//!
//! The tape is eager: every pushed operation is evaluated immediately, so
//! callers can inspect values mid-graph (needed to select the leverage-bound
//! branch), and `backward` replays the graph in reverse creation order.

use crate::error::{Error, Result};
use crate::hedging::{Normalizer, StateSpace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

// ---------------------------------------------------------------------------
// Architecture descriptor and flat weight storage
// ---------------------------------------------------------------------------

/// Network architecture: input width, LSTM cell widths, feedforward hidden
/// widths, and whether cells receive their previous hidden output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub input_dim: usize,
    pub lstm_widths: Vec<usize>,
    pub ffnn_widths: Vec<usize>,
    /// Concatenate each cell's previous hidden output to its input
    /// (conventional LSTM recurrence). Off by default: the printed cell
    /// equations have no such term.
    pub recurrent: bool,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w_off: usize,
    b_off: usize,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Copy)]
struct CellShape {
    input: Linear,  // W_i, b_i
    output: Linear, // W_o, b_o
    cell: Linear,   // W_c, b_c
}

#[derive(Debug, Clone)]
struct Shapes {
    cells: Vec<CellShape>,
    layers: Vec<Linear>,
    out: Linear,
    len: usize,
}

impl Descriptor {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("network input dimension must be > 0"));
        }
        if self.lstm_widths.iter().chain(self.ffnn_widths.iter()).any(|&w| w == 0) {
            return Err(Error::config("layer widths must be > 0"));
        }
        if self.lstm_widths.is_empty() && self.ffnn_widths.is_empty() {
            return Err(Error::config("network needs at least one hidden layer"));
        }
        Ok(())
    }

    fn shapes(&self) -> Shapes {
        let mut off = 0usize;
        let mut linear = |rows: usize, cols: usize| {
            let l = Linear { w_off: off, b_off: off + rows * cols, rows, cols };
            off += rows * cols + rows;
            l
        };
        let mut cells = Vec::new();
        let mut width = self.input_dim;
        for &w in &self.lstm_widths {
            let in_dim = if self.recurrent { width + w } else { width };
            cells.push(CellShape {
                input: linear(w, in_dim),
                output: linear(w, in_dim),
                cell: linear(w, in_dim),
            });
            width = w;
        }
        let mut layers = Vec::new();
        for &w in &self.ffnn_widths {
            layers.push(linear(w, width));
            width = w;
        }
        let out = linear(1, width);
        Shapes { cells, layers, out, len: off }
    }

    pub fn param_len(&self) -> usize {
        self.shapes().len
    }
}

/// Flat parameter vector plus its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyWeights {
    pub desc: Descriptor,
    pub data: Vec<f64>,
}

impl PolicyWeights {
    pub fn zeros(desc: Descriptor) -> Result<Self> {
        desc.validate()?;
        let len = desc.param_len();
        Ok(PolicyWeights { desc, data: vec![0.0; len] })
    }
}

/// Glorot-uniform weight initialization; biases start at zero.
pub fn glorot_init(desc: &Descriptor, seed: u64) -> Result<PolicyWeights> {
    desc.validate()?;
    let shapes = desc.shapes();
    let mut w = PolicyWeights { desc: desc.clone(), data: vec![0.0; shapes.len] };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |data: &mut [f64], l: &Linear| {
        let bound = (6.0 / (l.rows + l.cols) as f64).sqrt();
        for i in 0..l.rows * l.cols {
            data[l.w_off + i] = rng.gen_range(-bound..bound);
        }
        // biases stay zero
    };
    for c in &shapes.cells {
        fill(&mut w.data, &c.input);
        fill(&mut w.data, &c.output);
        fill(&mut w.data, &c.cell);
    }
    for l in &shapes.layers {
        fill(&mut w.data, l);
    }
    fill(&mut w.data, &shapes.out);
    Ok(w)
}

/// Per-path recurrent carry: each cell's previous hidden output and memory.
#[derive(Debug, Clone)]
pub struct RecurrentState {
    pub z: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl RecurrentState {
    pub fn zeros(desc: &Descriptor) -> Self {
        RecurrentState {
            z: desc.lstm_widths.iter().map(|&w| vec![0.0; w]).collect(),
            c: desc.lstm_widths.iter().map(|&w| vec![0.0; w]).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Tapeless forward pass (inference)
// ---------------------------------------------------------------------------

fn sigm(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn apply_linear(params: &[f64], l: &Linear, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), l.cols);
    let mut out = vec![0.0; l.rows];
    for r in 0..l.rows {
        let mut acc = params[l.b_off + r];
        let row = &params[l.w_off + r * l.cols..l.w_off + (r + 1) * l.cols];
        for (wi, xi) in row.iter().zip(x.iter()) {
            acc += wi * xi;
        }
        out[r] = acc;
    }
    out
}

/// Inference forward pass: returns the unconstrained output `z_raw` and the
/// capped position `min(z_raw, bound)`, updating the recurrent carry.
/// Dropout (inverted, keep-probability `1 - p`) applies to feedforward
/// hidden activations only, when a rate and RNG are supplied.
pub fn policy_forward(
    w: &PolicyWeights,
    x: &[f64],
    rec: &mut RecurrentState,
    bound: f64,
    dropout: Option<(&mut ChaCha8Rng, f64)>,
) -> Result<(f64, f64)> {
    if x.len() != w.desc.input_dim {
        return Err(Error::config(format!(
            "feature vector has {} entries; the network expects {}",
            x.len(),
            w.desc.input_dim
        )));
    }
    let shapes = w.desc.shapes();
    let mut u = x.to_vec();
    for (l, cell) in shapes.cells.iter().enumerate() {
        let input = if w.desc.recurrent {
            let mut v = u.clone();
            v.extend_from_slice(&rec.z[l]);
            v
        } else {
            u
        };
        let i: Vec<f64> = apply_linear(&w.data, &cell.input, &input).iter().map(|&v| sigm(v)).collect();
        let o: Vec<f64> = apply_linear(&w.data, &cell.output, &input).iter().map(|&v| sigm(v)).collect();
        let g: Vec<f64> = apply_linear(&w.data, &cell.cell, &input).iter().map(|&v| v.tanh()).collect();
        let c: Vec<f64> = i.iter().zip(g.iter()).map(|(a, b)| a * b).collect();
        let z: Vec<f64> = o.iter().zip(c.iter()).map(|(a, b)| a * b.tanh()).collect();
        rec.c[l] = c;
        rec.z[l] = z.clone();
        u = z;
    }
    let mut dropout = dropout;
    for l in &shapes.layers {
        u = apply_linear(&w.data, l, &u).iter().map(|&v| v.max(0.0)).collect();
        if let Some((rng, p)) = dropout.as_mut() {
            let keep = 1.0 - *p;
            for v in u.iter_mut() {
                *v = if rng.gen::<f64>() < keep { *v / keep } else { 0.0 };
            }
        }
    }
    let z_raw = apply_linear(&w.data, &shapes.out, &u)[0];
    Ok((z_raw, z_raw.min(bound)))
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

pub type NodeId = usize;

/// One entry assembled into a feature-vector node: either a constant or an
/// affine transform `a * x + b` of a scalar node (used for normalization).
#[derive(Debug, Clone, Copy)]
pub enum FeaturePart {
    Const(f64),
    Node { id: NodeId, a: f64, b: f64 },
}

#[derive(Debug, Clone)]
enum Op {
    Const,
    MatVec { l: Linear, x: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Concat(NodeId, NodeId),
    /// a * x + b elementwise with constants
    Affine { x: NodeId, a: f64 },
    Abs(NodeId),
    /// elementwise minimum; subgradient flows to the smaller argument
    /// (ties: first)
    Min(NodeId, NodeId),
    /// elementwise product with a fixed mask (dropout)
    Mask { x: NodeId, mask: Vec<f64> },
    Assemble(Vec<FeaturePart>),
}

/// Eagerly-evaluated operation record for one path's rollout.
pub struct Tape<'a> {
    params: &'a [f64],
    ops: Vec<Op>,
    vals: Vec<Vec<f64>>,
}

impl<'a> Tape<'a> {
    pub fn new(params: &'a [f64]) -> Self {
        Tape { params, ops: Vec::new(), vals: Vec::new() }
    }

    pub fn val(&self, id: NodeId) -> &[f64] {
        &self.vals[id]
    }

    /// Scalar value of a length-1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.vals[id].len(), 1);
        self.vals[id][0]
    }

    fn push(&mut self, op: Op, val: Vec<f64>) -> NodeId {
        self.ops.push(op);
        self.vals.push(val);
        self.vals.len() - 1
    }

    pub fn constant(&mut self, v: Vec<f64>) -> NodeId {
        self.push(Op::Const, v)
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(vec![v])
    }

    fn linear(&mut self, l: Linear, x: NodeId) -> NodeId {
        let out = apply_linear_node(self.params, &l, &self.vals[x]);
        self.push(Op::MatVec { l, x }, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zipmap(&self.vals[a], &self.vals[b], |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zipmap(&self.vals[a], &self.vals[b], |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zipmap(&self.vals[a], &self.vals[b], |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.vals[x].iter().map(|&t| sigm(t)).collect();
        self.push(Op::Sigmoid(x), v)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.vals[x].iter().map(|&t| t.tanh()).collect();
        self.push(Op::Tanh(x), v)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.vals[x].iter().map(|&t| t.max(0.0)).collect();
        self.push(Op::Relu(x), v)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.vals[a].clone();
        v.extend_from_slice(&self.vals[b]);
        self.push(Op::Concat(a, b), v)
    }

    pub fn affine(&mut self, x: NodeId, a: f64, b: f64) -> NodeId {
        let v = self.vals[x].iter().map(|&t| a * t + b).collect();
        self.push(Op::Affine { x, a }, v)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.vals[x].iter().map(|&t| t.abs()).collect();
        self.push(Op::Abs(x), v)
    }

    pub fn min(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zipmap(&self.vals[a], &self.vals[b], |x, y| if x <= y { x } else { y });
        self.push(Op::Min(a, b), v)
    }

    pub fn mask(&mut self, x: NodeId, mask: Vec<f64>) -> NodeId {
        let v = zipmap(&self.vals[x], &mask, |a, m| a * m);
        self.push(Op::Mask { x, mask }, v)
    }

    pub fn assemble(&mut self, parts: Vec<FeaturePart>) -> NodeId {
        let v = parts
            .iter()
            .map(|p| match *p {
                FeaturePart::Const(c) => c,
                FeaturePart::Node { id, a, b } => a * self.vals[id][0] + b,
            })
            .collect();
        self.push(Op::Assemble(parts), v)
    }

    /// Reverse pass from `seed_node` with initial adjoint `seed`, adding
    /// parameter gradients into `grads` (same layout as the flat weights).
    pub fn backward(&self, seed_node: NodeId, seed: f64, grads: &mut [f64]) -> Result<()> {
        if self.ops.is_empty() {
            return Err(Error::state("backward called before any forward pass"));
        }
        if grads.len() != self.params.len() {
            return Err(Error::config(format!(
                "gradient buffer has {} entries; parameters have {}",
                grads.len(),
                self.params.len()
            )));
        }
        let mut adj: Vec<Vec<f64>> = self.vals.iter().map(|v| vec![0.0; v.len()]).collect();
        for g in adj[seed_node].iter_mut() {
            *g = seed;
        }
        for id in (0..self.ops.len()).rev() {
            if adj[id].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut adj[id]);
            match &self.ops[id] {
                Op::Const => {}
                Op::MatVec { l, x } => {
                    let xv = &self.vals[*x];
                    for r in 0..l.rows {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        grads[l.b_off + r] += gr;
                        let w_row = l.w_off + r * l.cols;
                        for c in 0..l.cols {
                            grads[w_row + c] += gr * xv[c];
                            adj[*x][c] += self.params[w_row + c] * gr;
                        }
                    }
                }
                Op::Add(a, b) => {
                    for (i, &gi) in g.iter().enumerate() {
                        adj[*a][i] += gi;
                        adj[*b][i] += gi;
                    }
                }
                Op::Sub(a, b) => {
                    for (i, &gi) in g.iter().enumerate() {
                        adj[*a][i] += gi;
                        adj[*b][i] -= gi;
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.vals[*a], &self.vals[*b]);
                    for (i, &gi) in g.iter().enumerate() {
                        adj[*a][i] += gi * bv[i];
                        adj[*b][i] += gi * av[i];
                    }
                }
                Op::Sigmoid(x) => {
                    let yv = &self.vals[id];
                    for (i, &gi) in g.iter().enumerate() {
                        adj[*x][i] += gi * yv[i] * (1.0 - yv[i]);
                    }
                }
                Op::Tanh(x) => {
                    let yv = &self.vals[id];
                    for (i, &gi) in g.iter().enumerate() {
                        adj[*x][i] += gi * (1.0 - yv[i] * yv[i]);
                    }
                }
                Op::Relu(x) => {
                    let xv = &self.vals[*x];
                    for (i, &gi) in g.iter().enumerate() {
                        if xv[i] > 0.0 {
                            adj[*x][i] += gi;
                        }
                    }
                }
                Op::Concat(a, b) => {
                    let na = self.vals[*a].len();
                    for i in 0..na {
                        adj[*a][i] += g[i];
                    }
                    for i in na..g.len() {
                        adj[*b][i - na] += g[i];
                    }
                }
                Op::Affine { x, a } => {
                    for (i, &gi) in g.iter().enumerate() {
                        adj[*x][i] += gi * a;
                    }
                }
                Op::Abs(x) => {
                    let xv = &self.vals[*x];
                    for (i, &gi) in g.iter().enumerate() {
                        // subgradient 0 at the kink
                        if xv[i] > 0.0 {
                            adj[*x][i] += gi;
                        } else if xv[i] < 0.0 {
                            adj[*x][i] -= gi;
                        }
                    }
                }
                Op::Min(a, b) => {
                    let (av, bv) = (&self.vals[*a], &self.vals[*b]);
                    for (i, &gi) in g.iter().enumerate() {
                        if av[i] <= bv[i] {
                            adj[*a][i] += gi;
                        } else {
                            adj[*b][i] += gi;
                        }
                    }
                }
                Op::Mask { x, mask } => {
                    for (i, &gi) in g.iter().enumerate() {
                        adj[*x][i] += gi * mask[i];
                    }
                }
                Op::Assemble(parts) => {
                    for (i, p) in parts.iter().enumerate() {
                        if let FeaturePart::Node { id: src, a, .. } = p {
                            adj[*src][0] += g[i] * a;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn apply_linear_node(params: &[f64], l: &Linear, x: &[f64]) -> Vec<f64> {
    apply_linear(params, l, x)
}

fn zipmap(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

/// Network forward pass on the tape. `rec` carries each cell's previous
/// hidden-output node (empty on the first step of a path). Returns the nodes
/// of the unconstrained output and the capped position `min(z_raw, bound)`.
#[allow(clippy::too_many_arguments)]
pub fn policy_forward_tape(
    tape: &mut Tape,
    w: &PolicyWeights,
    x: NodeId,
    rec: &mut Vec<NodeId>,
    bound: NodeId,
    dropout: Option<(&mut ChaCha8Rng, f64)>,
) -> Result<(NodeId, NodeId)> {
    if tape.val(x).len() != w.desc.input_dim {
        return Err(Error::config(format!(
            "feature node has {} entries; the network expects {}",
            tape.val(x).len(),
            w.desc.input_dim
        )));
    }
    let shapes = w.desc.shapes();
    let first_step = rec.is_empty();
    if w.desc.recurrent && first_step {
        for &width in &w.desc.lstm_widths {
            rec.push(tape.constant(vec![0.0; width]));
        }
    }
    let mut u = x;
    for (l, cell) in shapes.cells.iter().enumerate() {
        let input = if w.desc.recurrent { tape.concat(u, rec[l]) } else { u };
        let i_pre = tape.linear(cell.input, input);
        let i = tape.sigmoid(i_pre);
        let o_pre = tape.linear(cell.output, input);
        let o = tape.sigmoid(o_pre);
        let g_pre = tape.linear(cell.cell, input);
        let g = tape.tanh(g_pre);
        let c = tape.mul(i, g);
        let ct = tape.tanh(c);
        let z = tape.mul(o, ct);
        if w.desc.recurrent {
            rec[l] = z;
        }
        u = z;
    }
    let mut dropout = dropout;
    for l in &shapes.layers {
        let pre = tape.linear(*l, u);
        u = tape.relu(pre);
        if let Some((rng, p)) = dropout.as_mut() {
            let keep = 1.0 - *p;
            let mask: Vec<f64> = (0..l.rows)
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            u = tape.mask(u, mask);
        }
    }
    let z_raw = tape.linear(shapes.out, u);
    let delta = tape.min(z_raw, bound);
    Ok((z_raw, delta))
}

// ---------------------------------------------------------------------------
// ADAM
// ---------------------------------------------------------------------------

/// ADAM accumulator state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(param_len: usize, lr: f64) -> Self {
        OptimizerState {
            m: vec![0.0; param_len],
            v: vec![0.0; param_len],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected ADAM update in place.
pub fn adam_step(w: &mut PolicyWeights, grads: &[f64], opt: &mut OptimizerState) -> Result<()> {
    if grads.len() != w.data.len() || opt.m.len() != w.data.len() {
        return Err(Error::config("optimizer/gradient shape mismatch with weights"));
    }
    opt.t += 1;
    let b1t = 1.0 - opt.beta1.powi(opt.t as i32);
    let b2t = 1.0 - opt.beta2.powi(opt.t as i32);
    for i in 0..w.data.len() {
        opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * grads[i];
        opt.v[i] = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * grads[i] * grads[i];
        let m_hat = opt.m[i] / b1t;
        let v_hat = opt.v[i] / b2t;
        w.data[i] -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"DHCKPT1\n";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    descriptor: Descriptor,
    state_space: StateSpace,
    seed: u64,
    normalizer: Normalizer,
    opt: Option<OptMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptMeta {
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

/// Everything needed to resume training or run a trained policy.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub weights: PolicyWeights,
    pub state_space: StateSpace,
    pub seed: u64,
    pub normalizer: Normalizer,
    pub opt: Option<OptimizerState>,
}

impl Checkpoint {
    /// Versioned JSON header followed by a flat little-endian blob of the
    /// weights and, when present, the optimizer accumulators.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            version: 1,
            descriptor: self.weights.desc.clone(),
            state_space: self.state_space,
            seed: self.seed,
            normalizer: self.normalizer.clone(),
            opt: self.opt.as_ref().map(|o| OptMeta {
                t: o.t,
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
            }),
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&(header_json.len() as u64).to_le_bytes())?;
        out.write_all(&header_json)?;
        let mut write_slice = |s: &[f64]| -> std::io::Result<()> {
            for &v in s {
                out.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        write_slice(&self.weights.data)?;
        if let Some(o) = &self.opt {
            write_slice(&o.m)?;
            write_slice(&o.v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut file = std::fs::File::open(path)
            .map_err(|e| Error::config(format!("cannot open checkpoint {}: {e}", path.display())))?;
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)
            .map_err(|_| Error::format("checkpoint too short for its magic header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("not a policy checkpoint (bad magic bytes)"));
        }
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_json = vec![0u8; header_len];
        file.read_exact(&mut header_json)?;
        let header: CheckpointHeader = serde_json::from_slice(&header_json)
            .map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
        if header.version != 1 {
            return Err(Error::format(format!(
                "unsupported checkpoint version {} (expected 1)",
                header.version
            )));
        }
        header.descriptor.validate()?;
        let param_len = header.descriptor.param_len();
        let expected = param_len * if header.opt.is_some() { 3 } else { 1 };
        let mut blob = Vec::new();
        file.read_to_end(&mut blob)?;
        if blob.len() != expected * 8 {
            return Err(Error::format(format!(
                "checkpoint blob holds {} bytes; descriptor implies {}",
                blob.len(),
                expected * 8
            )));
        }
        let floats: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let weights = PolicyWeights {
            desc: header.descriptor,
            data: floats[..param_len].to_vec(),
        };
        if weights.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("checkpoint weights contain non-finite values"));
        }
        let opt = header.opt.map(|meta| OptimizerState {
            m: floats[param_len..2 * param_len].to_vec(),
            v: floats[2 * param_len..3 * param_len].to_vec(),
            t: meta.t,
            lr: meta.lr,
            beta1: meta.beta1,
            beta2: meta.beta2,
            eps: meta.eps,
        });
        Ok(Checkpoint {
            weights,
            state_space: header.state_space,
            seed: header.seed,
            normalizer: header.normalizer,
            opt,
        })
    }

    /// Fails when the stored architecture differs from the expected one.
    pub fn require_descriptor(&self, expected: &Descriptor) -> Result<()> {
        if &self.weights.desc != expected {
            return Err(Error::config(format!(
                "checkpoint architecture {:?} does not match the requested {:?}",
                self.weights.desc, expected
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_desc(recurrent: bool) -> Descriptor {
        Descriptor {
            input_dim: 3,
            lstm_widths: vec![4],
            ffnn_widths: vec![4],
            recurrent,
        }
    }

    #[test]
    fn glorot_bound_for_square_fanout() {
        // fan_in = fan_out = 3 gives bound 1
        let desc = Descriptor {
            input_dim: 3,
            lstm_widths: vec![],
            ffnn_widths: vec![3, 3],
            recurrent: false,
        };
        let w = glorot_init(&desc, 1).unwrap();
        let shapes = desc.shapes();
        let l = shapes.layers[1]; // 3x3
        let slice = &w.data[l.w_off..l.w_off + 9];
        assert!(slice.iter().all(|v| v.abs() < 1.0));
        assert!(slice.iter().any(|v| v.abs() > 0.5), "bound-1 samples should spread");
    }

    #[test]
    fn glorot_mean_near_zero() {
        let desc = Descriptor {
            input_dim: 100,
            lstm_widths: vec![],
            ffnn_widths: vec![100],
            recurrent: false,
        };
        let w = glorot_init(&desc, 7).unwrap();
        let shapes = desc.shapes();
        let l = shapes.layers[0];
        let n = l.rows * l.cols; // 10^4 samples
        let mean: f64 = w.data[l.w_off..l.w_off + n].iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn glorot_deterministic() {
        let desc = small_desc(false);
        assert_eq!(glorot_init(&desc, 9).unwrap(), glorot_init(&desc, 9).unwrap());
    }

    #[test]
    fn glorot_biases_zero() {
        let desc = small_desc(false);
        let w = glorot_init(&desc, 3).unwrap();
        let shapes = desc.shapes();
        for c in &shapes.cells {
            for l in [c.input, c.output, c.cell] {
                assert!(w.data[l.b_off..l.b_off + l.rows].iter().all(|&b| b == 0.0));
            }
        }
    }

    #[test]
    fn zero_network_outputs_output_bias() {
        let desc = small_desc(false);
        let mut w = PolicyWeights::zeros(desc.clone()).unwrap();
        let shapes = desc.shapes();
        w.data[shapes.out.b_off] = 0.37;
        let mut rec = RecurrentState::zeros(&desc);
        let (z, d) = policy_forward(&w, &[1.0, 2.0, 3.0], &mut rec, 0.2, None).unwrap();
        assert_eq!(z, 0.37);
        assert_eq!(d, 0.2);
        let (_, d2) = policy_forward(&w, &[1.0, 2.0, 3.0], &mut rec, f64::INFINITY, None).unwrap();
        assert_eq!(d2, 0.37);
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        for recurrent in [false, true] {
            let desc = small_desc(recurrent);
            let w = glorot_init(&desc, 5).unwrap();
            let x = [0.3, -1.2, 0.7];
            let x2 = [-0.4, 0.1, 1.5];
            let mut rec = RecurrentState::zeros(&desc);
            let (z1, d1) = policy_forward(&w, &x, &mut rec, 0.9, None).unwrap();
            let (z2, d2) = policy_forward(&w, &x2, &mut rec, 0.9, None).unwrap();

            let mut tape = Tape::new(&w.data);
            let mut rec_nodes = Vec::new();
            let xin = tape.constant(x.to_vec());
            let bnode = tape.scalar_const(0.9);
            let (zn1, dn1) =
                policy_forward_tape(&mut tape, &w, xin, &mut rec_nodes, bnode, None).unwrap();
            let xin2 = tape.constant(x2.to_vec());
            let (zn2, dn2) =
                policy_forward_tape(&mut tape, &w, xin2, &mut rec_nodes, bnode, None).unwrap();
            assert_relative_eq!(z1, tape.scalar(zn1), epsilon = 1e-12);
            assert_relative_eq!(d1, tape.scalar(dn1), epsilon = 1e-12);
            assert_relative_eq!(z2, tape.scalar(zn2), epsilon = 1e-12);
            assert_relative_eq!(d2, tape.scalar(dn2), epsilon = 1e-12);
        }
    }

    #[test]
    fn scalar_chain_gradient_is_analytic() {
        // f(x) = tanh(sigmoid(x)); f'(x) = (1 - tanh^2(s)) * s * (1 - s).
        // x enters as a 1x1 parameter applied to the constant input 1, so the
        // gradient lands on params[0].
        for &x in &[-1.0f64, 0.0, 2.0] {
            let params = vec![x, 0.0]; // weight x, bias 0
            let l = Linear { w_off: 0, b_off: 1, rows: 1, cols: 1 };
            let mut tape = Tape::new(&params);
            let one = tape.scalar_const(1.0);
            let xn = tape.linear(l, one);
            let s = tape.sigmoid(xn);
            let f = tape.tanh(s);
            assert_relative_eq!(tape.scalar(f), sigm(x).tanh(), epsilon = 1e-15);
            let mut grads = vec![0.0; 2];
            tape.backward(f, 1.0, &mut grads).unwrap();
            let sv = sigm(x);
            let analytic = (1.0 - sv.tanh().powi(2)) * sv * (1.0 - sv);
            assert_relative_eq!(grads[0], analytic, epsilon = 1e-12);
        }
    }

    /// Scalar loss of a two-step rollout-shaped computation used for the
    /// finite-difference checks.
    fn rollout_loss(w: &PolicyWeights, xs: &[[f64; 3]], bound: f64) -> f64 {
        let mut tape = Tape::new(&w.data);
        let mut rec = Vec::new();
        let mut acc = tape.scalar_const(0.0);
        for x in xs {
            let xin = tape.constant(x.to_vec());
            let bnode = tape.scalar_const(bound);
            let (_z, d) = policy_forward_tape(&mut tape, w, xin, &mut rec, bnode, None).unwrap();
            let sq = tape.mul(d, d);
            acc = tape.add(acc, sq);
        }
        tape.scalar(acc)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5u64 {
            for recurrent in [false, true] {
                let desc = Descriptor {
                    input_dim: 3,
                    lstm_widths: vec![4],
                    ffnn_widths: vec![4],
                    recurrent,
                };
                let w = glorot_init(&desc, 100 + seed).unwrap();
                let xs = [[0.4, -0.3, 1.1], [-0.9, 0.2, 0.5], [0.1, 0.8, -0.6]];
                let bound = 10.0; // far from the min kink

                let mut tape = Tape::new(&w.data);
                let mut rec = Vec::new();
                let mut acc = tape.scalar_const(0.0);
                for x in &xs {
                    let xin = tape.constant(x.to_vec());
                    let bnode = tape.scalar_const(bound);
                    let (_z, d) =
                        policy_forward_tape(&mut tape, &w, xin, &mut rec, bnode, None).unwrap();
                    let sq = tape.mul(d, d);
                    acc = tape.add(acc, sq);
                }
                let mut grads = vec![0.0; w.data.len()];
                tape.backward(acc, 1.0, &mut grads).unwrap();

                let h = 1e-6;
                let mut max_rel = 0.0f64;
                for i in 0..w.data.len() {
                    let mut wp = w.clone();
                    wp.data[i] += h;
                    let mut wm = w.clone();
                    wm.data[i] -= h;
                    let fd = (rollout_loss(&wp, &xs, bound) - rollout_loss(&wm, &xs, bound))
                        / (2.0 * h);
                    let denom = fd.abs().max(grads[i].abs()).max(1e-4);
                    max_rel = max_rel.max((fd - grads[i]).abs() / denom);
                }
                assert!(
                    max_rel < 1e-5,
                    "seed {seed} recurrent {recurrent}: max relative gradient error {max_rel}"
                );
            }
        }
    }

    #[test]
    fn dead_relu_has_zero_incoming_gradient() {
        let desc = Descriptor {
            input_dim: 2,
            lstm_widths: vec![],
            ffnn_widths: vec![2],
            recurrent: false,
        };
        let mut w = glorot_init(&desc, 3).unwrap();
        let shapes = desc.shapes();
        let l = shapes.layers[0];
        // force unit 0's pre-activation negative for any positive input
        w.data[l.w_off] = -5.0;
        w.data[l.w_off + 1] = -5.0;
        w.data[l.b_off] = -1.0;
        let mut tape = Tape::new(&w.data);
        let mut rec = Vec::new();
        let xin = tape.constant(vec![0.5, 1.5]);
        let bnode = tape.scalar_const(1e9);
        let (z, _d) = policy_forward_tape(&mut tape, &w, xin, &mut rec, bnode, None).unwrap();
        let mut grads = vec![0.0; w.data.len()];
        tape.backward(z, 1.0, &mut grads).unwrap();
        assert_eq!(grads[l.w_off], 0.0);
        assert_eq!(grads[l.w_off + 1], 0.0);
        assert_eq!(grads[l.b_off], 0.0);
    }

    #[test]
    fn min_gradient_goes_to_smaller_argument() {
        let la = Linear { w_off: 0, b_off: 1, rows: 1, cols: 1 };
        let lb = Linear { w_off: 2, b_off: 3, rows: 1, cols: 1 };
        let run = |wa: f64, wb: f64| -> Vec<f64> {
            let params = vec![wa, 0.0, wb, 0.0];
            let mut tape = Tape::new(&params);
            let one = tape.scalar_const(1.0);
            let a = tape.linear(la, one);
            let b = tape.linear(lb, one);
            let m = tape.min(a, b);
            let mut grads = vec![0.0; 4];
            tape.backward(m, 1.0, &mut grads).unwrap();
            grads
        };
        let g = run(2.0, 3.0);
        assert_eq!((g[0], g[2]), (1.0, 0.0));
        let g = run(4.0, 3.0);
        assert_eq!((g[0], g[2]), (0.0, 1.0));
        // tie goes to the first argument
        let g = run(5.0, 5.0);
        assert_eq!((g[0], g[2]), (1.0, 0.0));
    }

    #[test]
    fn dropout_off_forward_is_deterministic() {
        let desc = small_desc(false);
        let w = glorot_init(&desc, 4).unwrap();
        let x = [0.1, 0.2, 0.3];
        let mut r1 = RecurrentState::zeros(&desc);
        let mut r2 = RecurrentState::zeros(&desc);
        let a = policy_forward(&w, &x, &mut r1, 1.0, None).unwrap();
        let b = policy_forward(&w, &x, &mut r2, 1.0, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let keep = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 100_000;
        let mut sum = 0.0;
        let value = 1.7;
        for _ in 0..n {
            let masked = if rng.gen::<f64>() < keep { value / keep } else { 0.0 };
            sum += masked;
        }
        let mean = sum / n as f64;
        assert!((mean - value).abs() / value < 0.01, "mean {mean} vs {value}");
    }

    #[test]
    fn capped_output_never_exceeds_bound() {
        let desc = small_desc(false);
        let w = glorot_init(&desc, 11).unwrap();
        let mut rec = RecurrentState::zeros(&desc);
        for i in 0..50 {
            let t = i as f64 / 7.0;
            let x = [t.sin() * 3.0, t.cos() * 3.0, t];
            let bound = (i as f64 - 25.0) / 10.0;
            let (_z, d) = policy_forward(&w, &x, &mut rec, bound, None).unwrap();
            assert!(d <= bound + 1e-15);
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let desc = small_desc(false);
        let mut w = PolicyWeights::zeros(desc).unwrap();
        let before = w.data.clone();
        let grads = vec![1.0; w.data.len()];
        let mut opt = OptimizerState::new(w.data.len(), 0.0005);
        adam_step(&mut w, &grads, &mut opt).unwrap();
        for (a, b) in w.data.iter().zip(before.iter()) {
            let change = a - b;
            assert!((change + 0.0005).abs() < 1e-7, "change {change}");
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_weights() {
        let desc = small_desc(false);
        let mut w = glorot_init(&desc, 2).unwrap();
        let before = w.data.clone();
        let grads = vec![0.0; w.data.len()];
        let mut opt = OptimizerState::new(w.data.len(), 0.0005);
        adam_step(&mut w, &grads, &mut opt).unwrap();
        assert_eq!(w.data, before);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn adam_repeated_steps_shrink() {
        let desc = small_desc(false);
        let mut w = PolicyWeights::zeros(desc).unwrap();
        let grads = vec![1.0; w.data.len()];
        let mut opt = OptimizerState::new(w.data.len(), 0.0005);
        adam_step(&mut w, &grads, &mut opt).unwrap();
        let first = w.data[0].abs();
        let before = w.data[0];
        adam_step(&mut w, &grads, &mut opt).unwrap();
        let second = (w.data[0] - before).abs();
        assert!(second < first, "step shrank: {second} !< {first}");
    }

    #[test]
    fn backward_on_empty_tape_is_an_error() {
        let params: Vec<f64> = vec![];
        let tape = Tape::new(&params);
        let mut grads: Vec<f64> = vec![];
        assert!(tape.backward(0, 1.0, &mut grads).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let desc = small_desc(true);
        let w = glorot_init(&desc, 21).unwrap();
        let mut opt = OptimizerState::new(w.data.len(), 0.0005);
        opt.t = 17;
        opt.m[3] = 0.25;
        let ckpt = Checkpoint {
            weights: w,
            state_space: StateSpace::ReducedTc,
            seed: 99,
            normalizer: Normalizer::new(9),
            opt: Some(opt),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.weights, ckpt.weights);
        assert_eq!(loaded.state_space, StateSpace::ReducedTc);
        assert_eq!(loaded.seed, 99);
        let o = loaded.opt.unwrap();
        assert_eq!(o.t, 17);
        assert_eq!(o.m[3], 0.25);
    }

    #[test]
    fn checkpoint_rejects_descriptor_mismatch() {
        let desc = small_desc(false);
        let w = glorot_init(&desc, 21).unwrap();
        let ckpt = Checkpoint {
            weights: w,
            state_space: StateSpace::Full,
            seed: 0,
            normalizer: Normalizer::new(15),
            opt: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let other = small_desc(true);
        assert!(loaded.require_descriptor(&other).is_err());
        assert!(loaded.require_descriptor(&small_desc(false)).is_ok());
    }

    #[test]
    fn checkpoint_rejects_truncated_blob() {
        let desc = small_desc(false);
        let w = glorot_init(&desc, 21).unwrap();
        let ckpt = Checkpoint {
            weights: w,
            state_space: StateSpace::Full,
            seed: 0,
            normalizer: Normalizer::new(15),
            opt: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.ckpt");
        ckpt.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
