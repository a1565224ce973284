//! Reverse-mode automatic differentiation on a recorded tape.
//!
//! Every primitive application appends one node holding the forward result
//! and the indices of its inputs. Nodes are therefore in topological order by
//! construction, and one backward sweep in reverse record order applies each
//! node's local rule exactly once. The tape is single-threaded; tensors are
//! immutable once recorded.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Elementwise nonlinearities available through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
    /// sign(v) * sqrt(|v|). The backward derivative 1/(2*sqrt(|v|)) is
    /// clamped to 1e6 (|v| floored at 2.5e-13) to step over the singularity
    /// at zero.
    SignedSqrt,
}

/// Floor that caps the signed-sqrt derivative at 1e6.
const SIGNED_SQRT_FLOOR: f64 = 2.5e-13;
/// Row norms at or below this are treated as zero by `l2_normalize_rows`.
const L2_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    AddBias { x: usize, bias: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, k: f64 },
    MatMul { a: usize, b: usize },
    Transpose { x: usize },
    Unary { x: usize, f: Activation },
    Softmax { x: usize },
    L2NormalizeRows { x: usize },
    Conv1d { x: usize, kernel: usize, stride: usize, padding: Padding },
    MaxPool1d { x: usize, window: usize, stride: usize, argmax: Vec<usize> },
    RowSums { x: usize },
    ScaleRows { x: usize, weights: usize },
    ConcatRows { parts: Vec<usize> },
    SliceCols { x: usize, start: usize, len: usize },
    Sum { x: usize },
    BceWithLogitsSum { logits: usize, targets: Vec<f64> },
}

/// Padding mode for 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad with w-1 total (left gets the smaller half), so stride 1
    /// preserves length.
    Same,
    /// No padding; the kernel must fit inside the input.
    Valid,
}

struct Node {
    tensor: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    entries: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if `v` was not a
    /// gradient-requiring node (e.g. a detached leaf).
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.entries.get(v.0).and_then(|e| e.as_ref())
    }
}

/// Recorded computation over dense tensors.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor as a leaf. Its `requires_grad` flag decides whether
    /// backward produces an entry for it.
    pub fn watch(&mut self, tensor: &Tensor) -> Var {
        self.push(tensor.clone(), Op::Leaf, tensor.requires_grad())
    }

    /// Register a constant leaf that never receives gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn values(&self, v: Var) -> &[f64] {
        self.nodes[v.0].tensor.values()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    fn push(&mut self, tensor: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { tensor, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_from(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let tensor = Tensor::from_vec(shape, values).expect("op produced a malformed tensor");
        self.push(tensor, op, requires_grad)
    }

    // ── Elementwise and shape ops ───────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: "add",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let values = ta.values().iter().zip(tb.values()).map(|(x, y)| x + y).collect();
        Ok(self.push_from(ta.shape().to_vec(), values, Op::Add { a: a.0, b: b.0 }, &[a, b]))
    }

    /// Broadcast-add a `[1, c]` bias to every row of a `[r, c]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2("add_bias")?;
        let (br, bc) = self.value(bias).dims2("add_bias")?;
        if br != 1 || bc != c {
            return Err(Error::Shape {
                op: "add_bias",
                detail: format!("input [{r}, {c}] vs bias [{br}, {bc}]"),
            });
        }
        let tb = self.value(bias).values().to_vec();
        let values = self
            .value(x)
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb[i % c])
            .collect();
        Ok(self.push_from(vec![r, c], values, Op::AddBias { x: x.0, bias: bias.0 }, &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: "mul",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let values = ta.values().iter().zip(tb.values()).map(|(x, y)| x * y).collect();
        Ok(self.push_from(ta.shape().to_vec(), values, Op::Mul { a: a.0, b: b.0 }, &[a, b]))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let t = self.value(x);
        let values = t.values().iter().map(|v| v * k).collect();
        let shape = t.shape().to_vec();
        self.push_from(shape, values, Op::Scale { x: x.0, k }, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("[{m}, {k}] x [{k2}, {n}]"),
            });
        }
        let values = matmul_raw(self.value(a).values(), self.value(b).values(), m, k, n);
        Ok(self.push_from(vec![m, n], values, Op::MatMul { a: a.0, b: b.0 }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2("transpose")?;
        let src = self.value(x).values();
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                values[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push_from(vec![c, r], values, Op::Transpose { x: x.0 }, &[x]))
    }

    pub fn elementwise(&mut self, f: Activation, x: Var) -> Var {
        let t = self.value(x);
        let values = t.values().iter().map(|&v| apply_activation(f, v)).collect();
        let shape = t.shape().to_vec();
        self.push_from(shape, values, Op::Unary { x: x.0, f }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.elementwise(Activation::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.elementwise(Activation::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.elementwise(Activation::Relu, x)
    }

    pub fn signed_sqrt(&mut self, x: Var) -> Var {
        self.elementwise(Activation::SignedSqrt, x)
    }

    /// Softmax over all entries, with max-subtraction for stability. The
    /// tensor is treated as one distribution regardless of shape.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let max = t.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = t.values().iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let values = exps.into_iter().map(|e| e / total).collect();
        let shape = t.shape().to_vec();
        self.push_from(shape, values, Op::Softmax { x: x.0 }, &[x])
    }

    /// Divide each row of a 2-D tensor by max(row L2 norm, 1e-12); zero rows
    /// pass through unchanged.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2("l2_normalize_rows")?;
        let src = self.value(x).values();
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm.max(L2_EPS);
            for j in 0..c {
                values[i * c + j] = row[j] / denom;
            }
        }
        Ok(self.push_from(vec![r, c], values, Op::L2NormalizeRows { x: x.0 }, &[x]))
    }

    /// Temporal cross-correlation of `x: [T, c_in]` with `kernel:
    /// [w, c_in, c_out]` (row-major 3-D).
    pub fn conv1d(&mut self, x: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Contract("conv1d stride must be positive".into()));
        }
        let (t_in, c_in) = self.value(x).dims2("conv1d")?;
        let kshape = self.value(kernel).shape().to_vec();
        let [w, kc_in, c_out] = match kshape[..] {
            [w, i, o] => [w, i, o],
            _ => {
                return Err(Error::Shape {
                    op: "conv1d",
                    detail: format!("kernel must be [w, c_in, c_out], got {kshape:?}"),
                })
            }
        };
        if kc_in != c_in {
            return Err(Error::Shape {
                op: "conv1d",
                detail: format!("input channels {c_in} vs kernel channels {kc_in}"),
            });
        }
        let (pad_left, pad_total) = match padding {
            Padding::Same => ((w - 1) / 2, w - 1),
            Padding::Valid => (0, 0),
        };
        if w > t_in + pad_total {
            return Err(Error::Shape {
                op: "conv1d",
                detail: format!("kernel width {w} exceeds padded input length {}", t_in + pad_total),
            });
        }
        let t_out = (t_in + pad_total - w) / stride + 1;
        let xv = self.value(x).values();
        let kv = self.value(kernel).values();
        let mut values = vec![0.0; t_out * c_out];
        for t in 0..t_out {
            for dw in 0..w {
                let p = (t * stride + dw) as isize - pad_left as isize;
                if p < 0 || p as usize >= t_in {
                    continue;
                }
                let p = p as usize;
                for i in 0..c_in {
                    let xval = xv[p * c_in + i];
                    if xval == 0.0 {
                        continue;
                    }
                    let kbase = (dw * c_in + i) * c_out;
                    let obase = t * c_out;
                    for o in 0..c_out {
                        values[obase + o] += xval * kv[kbase + o];
                    }
                }
            }
        }
        Ok(self.push_from(
            vec![t_out, c_out],
            values,
            Op::Conv1d { x: x.0, kernel: kernel.0, stride, padding },
            &[x, kernel],
        ))
    }

    /// Per-channel windowed maximum over `x: [T, c]`. Gradient flows to the
    /// first maximum position in each window.
    pub fn max_pool1d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        if window == 0 || stride == 0 {
            return Err(Error::Contract("max_pool1d window and stride must be positive".into()));
        }
        let (t_in, c) = self.value(x).dims2("max_pool1d")?;
        if window > t_in {
            return Err(Error::Shape {
                op: "max_pool1d",
                detail: format!("window {window} exceeds input length {t_in}"),
            });
        }
        let t_out = (t_in - window) / stride + 1;
        let xv = self.value(x).values();
        let mut values = vec![0.0; t_out * c];
        let mut argmax = vec![0usize; t_out * c];
        for t in 0..t_out {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dw in 0..window {
                    let idx = (t * stride + dw) * c + ch;
                    if xv[idx] > best {
                        best = xv[idx];
                        best_idx = idx;
                    }
                }
                values[t * c + ch] = best;
                argmax[t * c + ch] = best_idx;
            }
        }
        Ok(self.push_from(vec![t_out, c], values, Op::MaxPool1d { x: x.0, window, stride, argmax }, &[x]))
    }

    /// Sum each row of a 2-D tensor into a `[r, 1]` column.
    pub fn row_sums(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2("row_sums")?;
        let src = self.value(x).values();
        let values = (0..r).map(|i| src[i * c..(i + 1) * c].iter().sum()).collect();
        Ok(self.push_from(vec![r, 1], values, Op::RowSums { x: x.0 }, &[x]))
    }

    /// Multiply row i of `x: [r, c]` by `weights[i]` (`weights: [r, 1]`).
    pub fn scale_rows(&mut self, x: Var, weights: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2("scale_rows")?;
        let (wr, wc) = self.value(weights).dims2("scale_rows")?;
        if wr != r || wc != 1 {
            return Err(Error::Shape {
                op: "scale_rows",
                detail: format!("input [{r}, {c}] vs weights [{wr}, {wc}]"),
            });
        }
        let wv = self.value(weights).values().to_vec();
        let src = self.value(x).values();
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                values[i * c + j] = src[i * c + j] * wv[i];
            }
        }
        Ok(self.push_from(
            vec![r, c],
            values,
            Op::ScaleRows { x: x.0, weights: weights.0 },
            &[x, weights],
        ))
    }

    /// Stack 2-D tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows needs at least one input".into()));
        }
        let (_, c) = self.value(parts[0]).dims2("concat_rows")?;
        let mut rows = 0;
        let mut values = Vec::new();
        for &p in parts {
            let (r, pc) = self.value(p).dims2("concat_rows")?;
            if pc != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    detail: format!("column counts differ: {c} vs {pc}"),
                });
            }
            rows += r;
            values.extend_from_slice(self.value(p).values());
        }
        let op = Op::ConcatRows { parts: parts.iter().map(|v| v.0).collect() };
        Ok(self.push_from(vec![rows, c], values, op, parts))
    }

    /// Columns [start, start+len) of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::Shape {
                op: "slice_cols",
                detail: format!("columns [{start}, {}) out of 0..{c}", start + len),
            });
        }
        let src = self.value(x).values();
        let mut values = Vec::with_capacity(r * len);
        for i in 0..r {
            values.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Ok(self.push_from(vec![r, len], values, Op::SliceCols { x: x.0, start, len }, &[x]))
    }

    /// Sum of all entries, as a `[1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).values().iter().sum();
        self.push_from(vec![1], vec![total], Op::Sum { x: x.0 }, &[x])
    }

    /// Summed sigmoid cross-entropy against fixed targets, evaluated in the
    /// stable logit form: sum_i max(z,0) - z*s + ln(1 + exp(-|z|)).
    pub fn bce_with_logits_sum(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if t.numel() != targets.len() {
            return Err(Error::Shape {
                op: "bce_with_logits_sum",
                detail: format!("{} logits vs {} targets", t.numel(), targets.len()),
            });
        }
        let total = t
            .values()
            .iter()
            .zip(targets)
            .map(|(&z, &s)| z.max(0.0) - z * s + (-z.abs()).exp().ln_1p())
            .sum();
        let op = Op::BceWithLogitsSum { logits: logits.0, targets: targets.to_vec() };
        Ok(self.push_from(vec![1], vec![total], op, &[logits]))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// gradient-requiring node reachable from the loss; detached tensors get
    /// no entry.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let grad = grads[i].take().unwrap();
            let keep = grad.clone();
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add { a, b } => {
                    self.accumulate(&mut grads, *a, &grad);
                    self.accumulate(&mut grads, *b, &grad);
                }
                Op::AddBias { x, bias } => {
                    self.accumulate(&mut grads, *x, &grad);
                    let c = self.nodes[*bias].tensor.numel();
                    let mut db = vec![0.0; c];
                    for (idx, g) in grad.iter().enumerate() {
                        db[idx % c] += g;
                    }
                    self.accumulate(&mut grads, *bias, &db);
                }
                Op::Mul { a, b } => {
                    let av = self.nodes[*a].tensor.values();
                    let bv = self.nodes[*b].tensor.values();
                    let da: Vec<f64> = grad.iter().zip(bv).map(|(g, v)| g * v).collect();
                    let db: Vec<f64> = grad.iter().zip(av).map(|(g, v)| g * v).collect();
                    self.accumulate(&mut grads, *a, &da);
                    self.accumulate(&mut grads, *b, &db);
                }
                Op::Scale { x, k } => {
                    let dx: Vec<f64> = grad.iter().map(|g| g * k).collect();
                    self.accumulate(&mut grads, *x, &dx);
                }
                Op::MatMul { a, b } => {
                    let (m, k) = self.nodes[*a].tensor.dims2("matmul").unwrap();
                    let (_, nn) = self.nodes[*b].tensor.dims2("matmul").unwrap();
                    let av = self.nodes[*a].tensor.values();
                    let bv = self.nodes[*b].tensor.values();
                    // dA = dC * B^T
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for cc in 0..nn {
                                s += grad[r * nn + cc] * bv[p * nn + cc];
                            }
                            da[r * k + p] = s;
                        }
                    }
                    // dB = A^T * dC
                    let mut db = vec![0.0; k * nn];
                    for p in 0..k {
                        for cc in 0..nn {
                            let mut s = 0.0;
                            for r in 0..m {
                                s += av[r * k + p] * grad[r * nn + cc];
                            }
                            db[p * nn + cc] = s;
                        }
                    }
                    self.accumulate(&mut grads, *a, &da);
                    self.accumulate(&mut grads, *b, &db);
                }
                Op::Transpose { x } => {
                    let (c, r) = self.nodes[i].tensor.dims2("transpose").unwrap();
                    let mut dx = vec![0.0; r * c];
                    for a in 0..c {
                        for b in 0..r {
                            dx[b * c + a] = grad[a * r + b];
                        }
                    }
                    self.accumulate(&mut grads, *x, &dx);
                }
                Op::Unary { x, f } => {
                    let xin = self.nodes[*x].tensor.values();
                    let out = self.nodes[i].tensor.values();
                    let dx: Vec<f64> = grad
                        .iter()
                        .enumerate()
                        .map(|(idx, g)| g * activation_derivative(*f, xin[idx], out[idx]))
                        .collect();
                    self.accumulate(&mut grads, *x, &dx);
                }
                Op::Softmax { x } => {
                    let y = self.nodes[i].tensor.values();
                    let dot: f64 = grad.iter().zip(y).map(|(g, v)| g * v).sum();
                    let dx: Vec<f64> = grad.iter().zip(y).map(|(g, v)| v * (g - dot)).collect();
                    self.accumulate(&mut grads, *x, &dx);
                }
                Op::L2NormalizeRows { x } => {
                    let (r, c) = self.nodes[*x].tensor.dims2("l2_normalize_rows").unwrap();
                    let xin = self.nodes[*x].tensor.values();
                    let y = self.nodes[i].tensor.values();
                    let mut dx = vec![0.0; r * c];
                    for row in 0..r {
                        let xr = &xin[row * c..(row + 1) * c];
                        let yr = &y[row * c..(row + 1) * c];
                        let gr = &grad[row * c..(row + 1) * c];
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm <= L2_EPS {
                            // Sub-epsilon rows are treated as constants: the
                            // forward guard would otherwise amplify gradient
                            // by 1/eps.
                            continue;
                        }
                        let proj: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for j in 0..c {
                            dx[row * c + j] = (gr[j] - yr[j] * proj) / norm;
                        }
                    }
                    self.accumulate(&mut grads, *x, &dx);
                }
                Op::Conv1d { x, kernel, stride, padding } => {
                    let (t_in, c_in) = self.nodes[*x].tensor.dims2("conv1d").unwrap();
                    let kshape = self.nodes[*kernel].tensor.shape();
                    let (w, c_out) = (kshape[0], kshape[2]);
                    let (t_out, _) = self.nodes[i].tensor.dims2("conv1d").unwrap();
                    let pad_left = match padding {
                        Padding::Same => (w - 1) / 2,
                        Padding::Valid => 0,
                    };
                    let xv = self.nodes[*x].tensor.values();
                    let kv = self.nodes[*kernel].tensor.values();
                    let mut dx = vec![0.0; t_in * c_in];
                    let mut dk = vec![0.0; w * c_in * c_out];
                    for t in 0..t_out {
                        for dw in 0..w {
                            let p = (t * stride + dw) as isize - pad_left as isize;
                            if p < 0 || p as usize >= t_in {
                                continue;
                            }
                            let p = p as usize;
                            for ci in 0..c_in {
                                let kbase = (dw * c_in + ci) * c_out;
                                let mut acc = 0.0;
                                for o in 0..c_out {
                                    let g = grad[t * c_out + o];
                                    acc += g * kv[kbase + o];
                                    dk[kbase + o] += g * xv[p * c_in + ci];
                                }
                                dx[p * c_in + ci] += acc;
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, &dx);
                    self.accumulate(&mut grads, *kernel, &dk);
                }
                Op::MaxPool1d { x, argmax, .. } => {
                    let mut dx = vec![0.0; self.nodes[*x].tensor.numel()];
                    for (out_idx, &src_idx) in argmax.iter().enumerate() {
                        dx[src_idx] += grad[out_idx];
                    }
                    self.accumulate(&mut grads, *x, &dx);
                }
                Op::RowSums { x } => {
                    let (r, c) = self.nodes[*x].tensor.dims2("row_sums").unwrap();
                    let mut dx = vec![0.0; r * c];
                    for row in 0..r {
                        for j in 0..c {
                            dx[row * c + j] = grad[row];
                        }
                    }
                    self.accumulate(&mut grads, *x, &dx);
                }
                Op::ScaleRows { x, weights } => {
                    let (r, c) = self.nodes[*x].tensor.dims2("scale_rows").unwrap();
                    let xv = self.nodes[*x].tensor.values();
                    let wv = self.nodes[*weights].tensor.values();
                    let mut dx = vec![0.0; r * c];
                    let mut dw = vec![0.0; r];
                    for row in 0..r {
                        for j in 0..c {
                            let g = grad[row * c + j];
                            dx[row * c + j] = g * wv[row];
                            dw[row] += g * xv[row * c + j];
                        }
                    }
                    self.accumulate(&mut grads, *x, &dx);
                    self.accumulate(&mut grads, *weights, &dw);
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.nodes[p].tensor.numel();
                        self.accumulate(&mut grads, p, &grad[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let (r, c) = self.nodes[*x].tensor.dims2("slice_cols").unwrap();
                    let mut dx = vec![0.0; r * c];
                    for row in 0..r {
                        for j in 0..*len {
                            dx[row * c + start + j] = grad[row * len + j];
                        }
                    }
                    self.accumulate(&mut grads, *x, &dx);
                }
                Op::Sum { x } => {
                    let dx = vec![grad[0]; self.nodes[*x].tensor.numel()];
                    self.accumulate(&mut grads, *x, &dx);
                }
                Op::BceWithLogitsSum { logits, targets } => {
                    let zv = self.nodes[*logits].tensor.values();
                    let dz: Vec<f64> = zv
                        .iter()
                        .zip(targets)
                        .map(|(&z, &s)| grad[0] * (sigmoid(z) - s))
                        .collect();
                    self.accumulate(&mut grads, *logits, &dz);
                }
            }
            grads[i] = Some(keep);
        }

        let entries = self
            .nodes
            .iter()
            .enumerate()
            .map(|(idx, node)| {
                if !node.requires_grad {
                    return None;
                }
                grads[idx].take().map(|values| {
                    Tensor::from_vec(node.tensor.shape().to_vec(), values)
                        .expect("gradient shape matches tensor shape")
                })
            })
            .collect();
        Ok(Gradients { entries })
    }

    /// Distance of the recorded program from the nearest gradient kink: the
    /// smallest |input| over relu and signed-sqrt nodes, and the smallest
    /// winner/runner-up gap over max-pool windows. Finite-difference checks
    /// are only meaningful at a healthy distance.
    pub fn min_kink_distance(&self) -> f64 {
        let mut min = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Unary { x, f: Activation::Relu | Activation::SignedSqrt } => {
                    for v in self.nodes[*x].tensor.values() {
                        min = min.min(v.abs());
                    }
                }
                Op::MaxPool1d { x, window, stride, .. } => {
                    if *window < 2 {
                        continue;
                    }
                    let (t_in, c) = self.nodes[*x].tensor.dims2("max_pool1d").unwrap();
                    let xv = self.nodes[*x].tensor.values();
                    let t_out = (t_in - window) / stride + 1;
                    for t in 0..t_out {
                        for ch in 0..c {
                            let mut best = f64::NEG_INFINITY;
                            let mut second = f64::NEG_INFINITY;
                            for dw in 0..*window {
                                let v = xv[(t * stride + dw) * c + ch];
                                if v > best {
                                    second = best;
                                    best = v;
                                } else if v > second {
                                    second = v;
                                }
                            }
                            min = min.min(best - second);
                        }
                    }
                }
                _ => {}
            }
        }
        min
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: usize, delta: &[f64]) {
        if !self.nodes[target].requires_grad {
            return;
        }
        match &mut grads[target] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot => *slot = Some(delta.to_vec()),
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn apply_activation(f: Activation, v: f64) -> f64 {
    match f {
        Activation::Tanh => v.tanh(),
        Activation::Sigmoid => sigmoid(v),
        Activation::Relu => v.max(0.0),
        Activation::SignedSqrt => v.signum() * v.abs().sqrt(),
    }
}

fn activation_derivative(f: Activation, x: f64, y: f64) -> f64 {
    match f {
        Activation::Tanh => 1.0 - y * y,
        Activation::Sigmoid => y * (1.0 - y),
        Activation::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::SignedSqrt => 1.0 / (2.0 * x.abs().max(SIGNED_SQRT_FLOOR).sqrt()),
    }
}
