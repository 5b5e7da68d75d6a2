//! Minimal dense tensor with reverse-mode differentiation.
//!
//! Every primitive records itself on a [`Tape`]; `backward()` replays the
//! record in reverse, accumulating vector-Jacobian products. Storage is
//! row-major, rank <= 2, no broadcasting beyond the listed primitives.
//! Everything is generic over [`Scalar`] (`f32` for training, `f64` for
//! finite-difference checks).

pub mod scalar;

pub use scalar::{DType, Scalar, LOG_ZERO};

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cell::{Ref, RefCell};
use std::rc::Rc;

pub type NodeId = usize;

struct Node<F> {
    data: Vec<F>,
    shape: Vec<usize>,
    grad: Option<Vec<F>>,
    op: Option<OpRecord<F>>,
}

struct OpRecord<F> {
    inputs: Vec<NodeId>,
    kind: OpKind<F>,
}

enum OpKind<F> {
    Add,
    AddRow,
    Mul,
    Scale(f64),
    Matmul { m: usize, k: usize, n: usize },
    MatmulTb { m: usize, k: usize, n: usize },
    Softmax { axis: usize },
    LogSoftmaxRows,
    LayerNorm { eps: f64 },
    DepthwiseConv1d { width: usize },
    Swish,
    Sigmoid,
    Dropout { mask: Vec<F> },
    Embedding { indices: Vec<usize> },
    NarrowCols { start: usize, len: usize },
    ConcatCols { widths: Vec<usize> },
    SliceRows { start: usize, len: usize },
    Reshape,
    SumAll,
    Gather2 { row: usize, col: usize },
    LogAddExp,
    DotConst { weights: Vec<F> },
}

struct TapeCore<F: Scalar> {
    nodes: Vec<Node<F>>,
    rng: ChaCha8Rng,
    seed: u64,
}

/// Records primitive operations for one forward/backward cycle.
///
/// Cheap to clone (shared handle). A tape is single-threaded; utterances
/// processed concurrently must each own a tape.
pub struct Tape<F: Scalar>(Rc<RefCell<TapeCore<F>>>);

impl<F: Scalar> Clone for Tape<F> {
    fn clone(&self) -> Self {
        Tape(Rc::clone(&self.0))
    }
}

/// Handle to one value on a tape: shape plus node identity. Data and the
/// gradient buffer live in the tape arena.
pub struct Tensor<F: Scalar> {
    tape: Tape<F>,
    id: NodeId,
    shape: Vec<usize>,
}

impl<F: Scalar> std::fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .finish()
    }
}

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor {
            tape: self.tape.clone(),
            id: self.id,
            shape: self.shape.clone(),
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Scalar> Tape<F> {
    /// New empty tape. `seed` drives every stochastic op recorded on it
    /// (dropout masks), so identical seed + identical op sequence replays
    /// bit-for-bit.
    pub fn new(seed: u64) -> Self {
        Tape(Rc::new(RefCell::new(TapeCore {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
        })))
    }

    pub fn seed(&self) -> u64 {
        self.0.borrow().seed
    }

    pub fn num_nodes(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    /// Number of recorded (non-leaf) operations.
    pub fn num_ops(&self) -> usize {
        self.0
            .borrow()
            .nodes
            .iter()
            .filter(|n| n.op.is_some())
            .count()
    }

    /// (output, inputs) edge list of the recorded operations, in record order.
    pub fn op_edges(&self) -> Vec<(NodeId, Vec<NodeId>)> {
        self.0
            .borrow()
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(id, n)| n.op.as_ref().map(|op| (id, op.inputs.clone())))
            .collect()
    }

    pub fn leaf(&self, data: Vec<F>, shape: &[usize]) -> Result<Tensor<F>> {
        if numel(shape) != data.len() {
            return Err(Error::contract(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(data, shape.to_vec(), None))
    }

    pub fn leaf_f64(&self, data: &[f64], shape: &[usize]) -> Result<Tensor<F>> {
        self.leaf(data.iter().map(|&v| F::from_f64(v)).collect(), shape)
    }

    pub fn scalar(&self, v: f64) -> Tensor<F> {
        self.push(vec![F::from_f64(v)], vec![1], None)
    }

    fn push(&self, data: Vec<F>, shape: Vec<usize>, op: Option<OpRecord<F>>) -> Tensor<F> {
        let mut core = self.0.borrow_mut();
        let id = core.nodes.len();
        core.nodes.push(Node {
            data,
            shape: shape.clone(),
            grad: None,
            op,
        });
        Tensor {
            tape: self.clone(),
            id,
            shape,
        }
    }

    /// Reverse pass from a scalar loss. Seeds d(loss)/d(loss) = 1 and
    /// accumulates gradients into every node reachable backwards from it.
    pub fn backward(&self, loss: &Tensor<F>) -> Result<()> {
        if !Rc::ptr_eq(&self.0, &loss.tape.0) {
            return Err(Error::contract("backward: loss is not on this tape"));
        }
        if loss.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape
            )));
        }
        let mut core = self.0.borrow_mut();
        core.nodes[loss.id].grad = Some(vec![F::one()]);
        for id in (0..=loss.id).rev() {
            core.step_backward(id);
        }
        Ok(())
    }
}

impl<F: Scalar> TapeCore<F> {
    fn acc(&mut self, id: NodeId, delta: &[F]) {
        let n = self.nodes[id].data.len();
        debug_assert_eq!(delta.len(), n);
        let grad = self.nodes[id].grad.get_or_insert_with(|| vec![F::zero(); n]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g = *g + *d;
        }
    }

    fn step_backward(&mut self, id: NodeId) {
        let Some(g) = self.nodes[id].grad.clone() else {
            return;
        };
        let Some(OpRecord { inputs, kind }) = self.nodes[id].op.take() else {
            return;
        };

        match &kind {
            OpKind::Add => {
                self.acc(inputs[0], &g);
                self.acc(inputs[1], &g);
            }
            OpKind::AddRow => {
                let d = self.nodes[inputs[1]].data.len();
                let rows = g.len() / d;
                self.acc(inputs[0], &g);
                let mut db = vec![F::zero(); d];
                for t in 0..rows {
                    for j in 0..d {
                        db[j] = db[j] + g[t * d + j];
                    }
                }
                self.acc(inputs[1], &db);
            }
            OpKind::Mul => {
                let b = self.nodes[inputs[1]].data.clone();
                let a = self.nodes[inputs[0]].data.clone();
                let da: Vec<F> = g.iter().zip(&b).map(|(&gi, &bi)| gi * bi).collect();
                let db: Vec<F> = g.iter().zip(&a).map(|(&gi, &ai)| gi * ai).collect();
                self.acc(inputs[0], &da);
                self.acc(inputs[1], &db);
            }
            OpKind::Scale(c) => {
                let c = F::from_f64(*c);
                let dx: Vec<F> = g.iter().map(|&gi| gi * c).collect();
                self.acc(inputs[0], &dx);
            }
            OpKind::Matmul { m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let a = self.nodes[inputs[0]].data.clone();
                let b = self.nodes[inputs[1]].data.clone();
                // da = g . b^T
                let mut da = vec![F::zero(); m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = F::zero();
                        for j in 0..n {
                            s = s + g[i * n + j] * b[p * n + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                // db = a^T . g
                let mut db = vec![F::zero(); k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = a[i * k + p];
                        for j in 0..n {
                            db[p * n + j] = db[p * n + j] + aip * g[i * n + j];
                        }
                    }
                }
                self.acc(inputs[0], &da);
                self.acc(inputs[1], &db);
            }
            OpKind::MatmulTb { m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let a = self.nodes[inputs[0]].data.clone();
                let b = self.nodes[inputs[1]].data.clone();
                // out = a . b^T with a: m x k, b: n x k
                let mut da = vec![F::zero(); m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        for p in 0..k {
                            da[i * k + p] = da[i * k + p] + gij * b[j * k + p];
                        }
                    }
                }
                let mut db = vec![F::zero(); n * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        for p in 0..k {
                            db[j * k + p] = db[j * k + p] + gij * a[i * k + p];
                        }
                    }
                }
                self.acc(inputs[0], &da);
                self.acc(inputs[1], &db);
            }
            OpKind::Softmax { axis } => {
                let y = self.nodes[id].data.clone();
                let shape = self.nodes[id].shape.clone();
                let (lanes, lane_len, stride, base) = lane_layout(&shape, *axis);
                let mut dx = vec![F::zero(); y.len()];
                for lane in 0..lanes {
                    let start = lane * base;
                    let mut dot = F::zero();
                    for i in 0..lane_len {
                        let idx = start + i * stride;
                        dot = dot + g[idx] * y[idx];
                    }
                    for i in 0..lane_len {
                        let idx = start + i * stride;
                        dx[idx] = y[idx] * (g[idx] - dot);
                    }
                }
                self.acc(inputs[0], &dx);
            }
            OpKind::LogSoftmaxRows => {
                let y = self.nodes[id].data.clone();
                let shape = &self.nodes[id].shape;
                let cols = *shape.last().unwrap();
                let rows = y.len() / cols;
                let mut dx = vec![F::zero(); y.len()];
                for r in 0..rows {
                    let mut gsum = F::zero();
                    for c in 0..cols {
                        gsum = gsum + g[r * cols + c];
                    }
                    for c in 0..cols {
                        let idx = r * cols + c;
                        dx[idx] = g[idx] - y[idx].exp() * gsum;
                    }
                }
                self.acc(inputs[0], &dx);
            }
            OpKind::LayerNorm { eps } => {
                let x = self.nodes[inputs[0]].data.clone();
                let gain = self.nodes[inputs[1]].data.clone();
                let d = gain.len();
                let rows = x.len() / d;
                let eps = F::from_f64(*eps);
                let mut dx = vec![F::zero(); x.len()];
                let mut dgain = vec![F::zero(); d];
                let mut dbias = vec![F::zero(); d];
                let inv_d = F::from_f64(1.0 / d as f64);
                for r in 0..rows {
                    let row = &x[r * d..(r + 1) * d];
                    let mut mu = F::zero();
                    for &v in row {
                        mu = mu + v;
                    }
                    mu = mu * inv_d;
                    let mut var = F::zero();
                    for &v in row {
                        let c = v - mu;
                        var = var + c * c;
                    }
                    var = var * inv_d;
                    let inv = (var + eps).sqrt().recip();
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    let mut xhat = vec![F::zero(); d];
                    let mut dxhat = vec![F::zero(); d];
                    for j in 0..d {
                        xhat[j] = (row[j] - mu) * inv;
                        dxhat[j] = g[r * d + j] * gain[j];
                        m1 = m1 + dxhat[j];
                        m2 = m2 + dxhat[j] * xhat[j];
                        dgain[j] = dgain[j] + g[r * d + j] * xhat[j];
                        dbias[j] = dbias[j] + g[r * d + j];
                    }
                    m1 = m1 * inv_d;
                    m2 = m2 * inv_d;
                    for j in 0..d {
                        dx[r * d + j] = (dxhat[j] - m1 - xhat[j] * m2) * inv;
                    }
                }
                self.acc(inputs[0], &dx);
                self.acc(inputs[1], &dgain);
                self.acc(inputs[2], &dbias);
            }
            OpKind::DepthwiseConv1d { width } => {
                let x = self.nodes[inputs[0]].data.clone();
                let kern = self.nodes[inputs[1]].data.clone();
                let d = self.nodes[inputs[1]].shape[1];
                let t_len = x.len() / d;
                let k = *width;
                let pad = (k - 1) / 2;
                let mut dx = vec![F::zero(); x.len()];
                let mut dk = vec![F::zero(); kern.len()];
                for t in 0..t_len {
                    for j in 0..k {
                        let src = t as isize + j as isize - pad as isize;
                        if src < 0 || src >= t_len as isize {
                            continue;
                        }
                        let src = src as usize;
                        for c in 0..d {
                            let gtc = g[t * d + c];
                            dx[src * d + c] = dx[src * d + c] + gtc * kern[j * d + c];
                            dk[j * d + c] = dk[j * d + c] + gtc * x[src * d + c];
                        }
                    }
                }
                self.acc(inputs[0], &dx);
                self.acc(inputs[1], &dk);
            }
            OpKind::Swish => {
                let x = self.nodes[inputs[0]].data.clone();
                let dx: Vec<F> = g
                    .iter()
                    .zip(&x)
                    .map(|(&gi, &xi)| {
                        let s = sigmoid(xi);
                        gi * (s + xi * s * (F::one() - s))
                    })
                    .collect();
                self.acc(inputs[0], &dx);
            }
            OpKind::Sigmoid => {
                let y = self.nodes[id].data.clone();
                let dx: Vec<F> = g
                    .iter()
                    .zip(&y)
                    .map(|(&gi, &yi)| gi * yi * (F::one() - yi))
                    .collect();
                self.acc(inputs[0], &dx);
            }
            OpKind::Dropout { mask } => {
                let dx: Vec<F> = g.iter().zip(mask).map(|(&gi, &mi)| gi * mi).collect();
                self.acc(inputs[0], &dx);
            }
            OpKind::Embedding { indices } => {
                let d = self.nodes[inputs[0]].shape[1];
                let mut dt = vec![F::zero(); self.nodes[inputs[0]].data.len()];
                for (i, &tok) in indices.iter().enumerate() {
                    for j in 0..d {
                        dt[tok * d + j] = dt[tok * d + j] + g[i * d + j];
                    }
                }
                self.acc(inputs[0], &dt);
            }
            OpKind::NarrowCols { start, len } => {
                let d = self.nodes[inputs[0]].shape[1];
                let rows = self.nodes[inputs[0]].shape[0];
                let mut dx = vec![F::zero(); rows * d];
                for t in 0..rows {
                    for j in 0..*len {
                        dx[t * d + start + j] = g[t * len + j];
                    }
                }
                self.acc(inputs[0], &dx);
            }
            OpKind::ConcatCols { widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut off = 0;
                for (part, &w) in inputs.iter().zip(widths) {
                    let mut dp = vec![F::zero(); rows * w];
                    for t in 0..rows {
                        for j in 0..w {
                            dp[t * w + j] = g[t * total + off + j];
                        }
                    }
                    self.acc(*part, &dp);
                    off += w;
                }
            }
            OpKind::SliceRows { start, len } => {
                let d = self.nodes[inputs[0]].shape[1];
                let rows = self.nodes[inputs[0]].shape[0];
                let mut dx = vec![F::zero(); rows * d];
                for t in 0..*len {
                    for j in 0..d {
                        dx[(start + t) * d + j] = g[t * d + j];
                    }
                }
                self.acc(inputs[0], &dx);
            }
            OpKind::Reshape => {
                self.acc(inputs[0], &g);
            }
            OpKind::SumAll => {
                let n = self.nodes[inputs[0]].data.len();
                let dx = vec![g[0]; n];
                self.acc(inputs[0], &dx);
            }
            OpKind::Gather2 { row, col } => {
                let shape = self.nodes[inputs[0]].shape.clone();
                let cols = shape[1];
                let mut dx = vec![F::zero(); self.nodes[inputs[0]].data.len()];
                dx[row * cols + col] = g[0];
                self.acc(inputs[0], &dx);
            }
            OpKind::LogAddExp => {
                let out = self.nodes[id].data[0];
                let a = self.nodes[inputs[0]].data[0];
                let b = self.nodes[inputs[1]].data[0];
                self.acc(inputs[0], &[g[0] * (a - out).exp()]);
                self.acc(inputs[1], &[g[0] * (b - out).exp()]);
            }
            OpKind::DotConst { weights } => {
                let dx: Vec<F> = weights.iter().map(|&w| g[0] * w).collect();
                self.acc(inputs[0], &dx);
            }
        }

        // reinstall the record so the tape structure survives backward
        self.nodes[id].op = Some(OpRecord { inputs, kind });
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    (F::one() + (-x).exp()).recip()
}

/// Lane decomposition of a rank-1/2 shape along `axis`:
/// (lane count, lane length, intra-lane stride, lane base stride).
fn lane_layout(shape: &[usize], axis: usize) -> (usize, usize, usize, usize) {
    match (shape.len(), axis) {
        (1, 0) => (1, shape[0], 1, 0),
        (2, 1) => (shape[0], shape[1], 1, shape[1]),
        (2, 0) => (shape[1], shape[0], shape[1], 1),
        _ => unreachable!("validated by the op constructor"),
    }
}

impl<F: Scalar> Tensor<F> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn tape(&self) -> &Tape<F> {
        &self.tape
    }

    pub fn data(&self) -> Vec<F> {
        self.tape.0.borrow().nodes[self.id].data.clone()
    }

    /// Borrow the underlying buffer without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[F]) -> R) -> R {
        let core = self.tape.0.borrow();
        f(&core.nodes[self.id].data)
    }

    pub fn data_f64(&self) -> Vec<f64> {
        let core: Ref<'_, TapeCore<F>> = self.tape.0.borrow();
        core.nodes[self.id].data.iter().map(|v| v.as_f64()).collect()
    }

    /// Accumulated gradient, if any flowed to this node during backward.
    pub fn grad(&self) -> Option<Vec<F>> {
        self.tape.0.borrow().nodes[self.id].grad.clone()
    }

    pub fn grad_or_zero(&self) -> Vec<F> {
        self.grad().unwrap_or_else(|| vec![F::zero(); self.numel()])
    }

    pub fn item(&self) -> Result<F> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "item() on non-scalar shape {:?}",
                self.shape
            )));
        }
        Ok(self.tape.0.borrow().nodes[self.id].data[0])
    }

    pub fn item_f64(&self) -> Result<f64> {
        Ok(self.item()?.as_f64())
    }

    fn check_same_tape(&self, other: &Tensor<F>, op: &'static str) -> Result<()> {
        if !Rc::ptr_eq(&self.tape.0, &other.tape.0) {
            return Err(Error::contract(format!("{op}: operands on different tapes")));
        }
        Ok(())
    }

    fn unary(&self, data: Vec<F>, shape: Vec<usize>, kind: OpKind<F>) -> Tensor<F> {
        self.tape.push(
            data,
            shape,
            Some(OpRecord {
                inputs: vec![self.id],
                kind,
            }),
        )
    }

    // ---------------------------------------------------------------------
    // Elementwise and affine primitives
    // ---------------------------------------------------------------------

    pub fn add(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_same_tape(other, "add")?;
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data: Vec<F> = self.with_data(|a| {
            other.with_data(|b| a.iter().zip(b).map(|(&x, &y)| x + y).collect())
        });
        Ok(self.tape.push(
            data,
            self.shape.clone(),
            Some(OpRecord {
                inputs: vec![self.id, other.id],
                kind: OpKind::Add,
            }),
        ))
    }

    /// `[T x d] + [d]`, the bias broadcast over rows.
    pub fn add_row(&self, bias: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_same_tape(bias, "add_row")?;
        if self.rank() != 2 || bias.rank() != 1 || self.shape[1] != bias.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        let d = self.shape[1];
        let data: Vec<F> = self.with_data(|x| {
            bias.with_data(|b| {
                x.iter()
                    .enumerate()
                    .map(|(i, &v)| v + b[i % d])
                    .collect()
            })
        });
        Ok(self.tape.push(
            data,
            self.shape.clone(),
            Some(OpRecord {
                inputs: vec![self.id, bias.id],
                kind: OpKind::AddRow,
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_same_tape(other, "mul")?;
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data: Vec<F> = self.with_data(|a| {
            other.with_data(|b| a.iter().zip(b).map(|(&x, &y)| x * y).collect())
        });
        Ok(self.tape.push(
            data,
            self.shape.clone(),
            Some(OpRecord {
                inputs: vec![self.id, other.id],
                kind: OpKind::Mul,
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor<F> {
        let cf = F::from_f64(c);
        let data: Vec<F> = self.with_data(|x| x.iter().map(|&v| v * cf).collect());
        self.unary(data, self.shape.clone(), OpKind::Scale(c))
    }

    pub fn swish(&self) -> Tensor<F> {
        let data: Vec<F> = self.with_data(|x| x.iter().map(|&v| v * sigmoid(v)).collect());
        self.unary(data, self.shape.clone(), OpKind::Swish)
    }

    pub fn sigmoid(&self) -> Tensor<F> {
        let data: Vec<F> = self.with_data(|x| x.iter().map(|&v| sigmoid(v)).collect());
        self.unary(data, self.shape.clone(), OpKind::Sigmoid)
    }

    /// Inverted dropout: seeded Bernoulli keep-mask scaled by 1/(1-p).
    /// The caller is responsible for only applying it at train time.
    pub fn dropout(&self, p: f64) -> Result<Tensor<F>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout p={p} outside [0,1)")));
        }
        if p == 0.0 {
            return Ok(self.clone());
        }
        let keep = F::from_f64(1.0 / (1.0 - p));
        let mask: Vec<F> = {
            let mut core = self.tape.0.borrow_mut();
            (0..self.numel())
                .map(|_| {
                    if core.rng.gen::<f64>() >= p {
                        keep
                    } else {
                        F::zero()
                    }
                })
                .collect()
        };
        let data: Vec<F> = self.with_data(|x| {
            x.iter().zip(&mask).map(|(&v, &m)| v * m).collect()
        });
        Ok(self.unary(data, self.shape.clone(), OpKind::Dropout { mask }))
    }

    // ---------------------------------------------------------------------
    // Linear algebra
    // ---------------------------------------------------------------------

    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_same_tape(other, "matmul")?;
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let data = self.with_data(|a| {
            other.with_data(|b| {
                let mut out = vec![F::zero(); m * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = a[i * k + p];
                        if aip == F::zero() {
                            continue;
                        }
                        let brow = &b[p * n..(p + 1) * n];
                        let orow = &mut out[i * n..(i + 1) * n];
                        for j in 0..n {
                            orow[j] = orow[j] + aip * brow[j];
                        }
                    }
                }
                out
            })
        });
        Ok(self.tape.push(
            data,
            vec![m, n],
            Some(OpRecord {
                inputs: vec![self.id, other.id],
                kind: OpKind::Matmul { m, k, n },
            }),
        ))
    }

    /// `self . other^T` without materializing the transpose.
    pub fn matmul_tb(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_same_tape(other, "matmul_tb")?;
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[1] {
            return Err(Error::ShapeMismatch {
                op: "matmul_tb",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[0]);
        let data = self.with_data(|a| {
            other.with_data(|b| {
                let mut out = vec![F::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        let mut s = F::zero();
                        for p in 0..k {
                            s = s + a[i * k + p] * b[j * k + p];
                        }
                        out[i * n + j] = s;
                    }
                }
                out
            })
        });
        Ok(self.tape.push(
            data,
            vec![m, n],
            Some(OpRecord {
                inputs: vec![self.id, other.id],
                kind: OpKind::MatmulTb { m, k, n },
            }),
        ))
    }

    // ---------------------------------------------------------------------
    // Normalizations and reductions
    // ---------------------------------------------------------------------

    /// Numerically stable softmax along `axis` (max subtraction).
    pub fn softmax(&self, axis: usize) -> Result<Tensor<F>> {
        if axis >= self.rank() || self.rank() > 2 {
            return Err(Error::contract(format!(
                "softmax axis {axis} invalid for shape {:?}",
                self.shape
            )));
        }
        let (lanes, lane_len, stride, base) = lane_layout(&self.shape, axis);
        let data = self.with_data(|x| {
            let mut out = vec![F::zero(); x.len()];
            for lane in 0..lanes {
                let start = lane * base;
                let mut mx = x[start];
                for i in 1..lane_len {
                    let v = x[start + i * stride];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut sum = F::zero();
                for i in 0..lane_len {
                    let e = (x[start + i * stride] - mx).exp();
                    out[start + i * stride] = e;
                    sum = sum + e;
                }
                let inv = sum.recip();
                for i in 0..lane_len {
                    out[start + i * stride] = out[start + i * stride] * inv;
                }
            }
            out
        });
        Ok(self.unary(data, self.shape.clone(), OpKind::Softmax { axis }))
    }

    /// Row-wise log-softmax over the last axis of a rank-2 tensor.
    pub fn log_softmax_rows(&self) -> Result<Tensor<F>> {
        if self.rank() != 2 {
            return Err(Error::contract(format!(
                "log_softmax_rows requires rank 2, got {:?}",
                self.shape
            )));
        }
        let cols = self.shape[1];
        let data = self.with_data(|x| {
            let rows = x.len() / cols;
            let mut out = vec![F::zero(); x.len()];
            for r in 0..rows {
                let row = &x[r * cols..(r + 1) * cols];
                let mut mx = row[0];
                for &v in row {
                    if v > mx {
                        mx = v;
                    }
                }
                let mut sum = F::zero();
                for &v in row {
                    sum = sum + (v - mx).exp();
                }
                let lse = mx + sum.ln();
                for c in 0..cols {
                    out[r * cols + c] = row[c] - lse;
                }
            }
            out
        });
        Ok(self.unary(data, self.shape.clone(), OpKind::LogSoftmaxRows))
    }

    /// Per-position normalization over the last axis, then affine gain/bias.
    pub fn layer_norm(&self, gain: &Tensor<F>, bias: &Tensor<F>, eps: f64) -> Result<Tensor<F>> {
        self.check_same_tape(gain, "layer_norm")?;
        self.check_same_tape(bias, "layer_norm")?;
        if eps <= 0.0 {
            return Err(Error::config(format!("layer_norm eps={eps} must be > 0")));
        }
        let d = *self.shape.last().ok_or_else(|| {
            Error::contract("layer_norm on empty shape")
        })?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape.clone(),
                rhs: gain.shape.clone(),
            });
        }
        let epsf = F::from_f64(eps);
        let inv_d = F::from_f64(1.0 / d as f64);
        let data = self.with_data(|x| {
            gain.with_data(|gn| {
                bias.with_data(|bs| {
                    let rows = x.len() / d;
                    let mut out = vec![F::zero(); x.len()];
                    for r in 0..rows {
                        let row = &x[r * d..(r + 1) * d];
                        let mut mu = F::zero();
                        for &v in row {
                            mu = mu + v;
                        }
                        mu = mu * inv_d;
                        let mut var = F::zero();
                        for &v in row {
                            let c = v - mu;
                            var = var + c * c;
                        }
                        var = var * inv_d;
                        let inv = (var + epsf).sqrt().recip();
                        for j in 0..d {
                            out[r * d + j] = (row[j] - mu) * inv * gn[j] + bs[j];
                        }
                    }
                    out
                })
            })
        });
        Ok(self.tape.push(
            data,
            self.shape.clone(),
            Some(OpRecord {
                inputs: vec![self.id, gain.id, bias.id],
                kind: OpKind::LayerNorm { eps },
            }),
        ))
    }

    /// Per-channel 1-d convolution with "same" zero padding; odd kernel
    /// width required. `self: [T x d]`, `kernel: [k x d]`.
    pub fn depthwise_conv1d(&self, kernel: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_same_tape(kernel, "depthwise_conv1d")?;
        if self.rank() != 2 || kernel.rank() != 2 || self.shape[1] != kernel.shape[1] {
            return Err(Error::ShapeMismatch {
                op: "depthwise_conv1d",
                lhs: self.shape.clone(),
                rhs: kernel.shape.clone(),
            });
        }
        let k = kernel.shape[0];
        if k % 2 == 0 {
            return Err(Error::config(format!(
                "depthwise_conv1d kernel width {k} must be odd"
            )));
        }
        let (t_len, d) = (self.shape[0], self.shape[1]);
        let pad = (k - 1) / 2;
        let data = self.with_data(|x| {
            kernel.with_data(|kern| {
                let mut out = vec![F::zero(); t_len * d];
                for t in 0..t_len {
                    for j in 0..k {
                        let src = t as isize + j as isize - pad as isize;
                        if src < 0 || src >= t_len as isize {
                            continue;
                        }
                        let src = src as usize;
                        for c in 0..d {
                            out[t * d + c] = out[t * d + c] + kern[j * d + c] * x[src * d + c];
                        }
                    }
                }
                out
            })
        });
        Ok(self.tape.push(
            data,
            self.shape.clone(),
            Some(OpRecord {
                inputs: vec![self.id, kernel.id],
                kind: OpKind::DepthwiseConv1d { width: k },
            }),
        ))
    }

    pub fn sum_all(&self) -> Tensor<F> {
        let s = self.with_data(|x| {
            let mut acc = F::zero();
            for &v in x {
                acc = acc + v;
            }
            acc
        });
        self.unary(vec![s], vec![1], OpKind::SumAll)
    }

    /// Scalar `sum_i weights[i] * self[i]` against a constant weight buffer.
    pub fn dot_const(&self, weights: &[F]) -> Result<Tensor<F>> {
        if weights.len() != self.numel() {
            return Err(Error::contract(format!(
                "dot_const weight length {} vs tensor numel {}",
                weights.len(),
                self.numel()
            )));
        }
        let s = self.with_data(|x| {
            let mut acc = F::zero();
            for (&v, &w) in x.iter().zip(weights) {
                acc = acc + v * w;
            }
            acc
        });
        Ok(self.unary(
            vec![s],
            vec![1],
            OpKind::DotConst {
                weights: weights.to_vec(),
            },
        ))
    }

    // ---------------------------------------------------------------------
    // Structure
    // ---------------------------------------------------------------------

    pub fn narrow_cols(&self, start: usize, len: usize) -> Result<Tensor<F>> {
        if self.rank() != 2 || start + len > self.shape[1] {
            return Err(Error::contract(format!(
                "narrow_cols [{start}, {start}+{len}) out of bounds for {:?}",
                self.shape
            )));
        }
        let (rows, d) = (self.shape[0], self.shape[1]);
        let data = self.with_data(|x| {
            let mut out = Vec::with_capacity(rows * len);
            for t in 0..rows {
                out.extend_from_slice(&x[t * d + start..t * d + start + len]);
            }
            out
        });
        Ok(self.unary(data, vec![rows, len], OpKind::NarrowCols { start, len }))
    }

    pub fn concat_cols(parts: &[&Tensor<F>]) -> Result<Tensor<F>> {
        let first = parts.first().ok_or_else(|| {
            Error::contract("concat_cols on empty part list")
        })?;
        let rows = first.shape[0];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            first.check_same_tape(p, "concat_cols")?;
            if p.rank() != 2 || p.shape[0] != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            widths.push(p.shape[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![F::zero(); rows * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            p.with_data(|x| {
                for t in 0..rows {
                    data[t * total + off..t * total + off + w]
                        .copy_from_slice(&x[t * w..(t + 1) * w]);
                }
            });
            off += w;
        }
        Ok(first.tape.push(
            data,
            vec![rows, total],
            Some(OpRecord {
                inputs: parts.iter().map(|p| p.id).collect(),
                kind: OpKind::ConcatCols { widths },
            }),
        ))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor<F>> {
        if self.rank() != 2 || start + len > self.shape[0] {
            return Err(Error::contract(format!(
                "slice_rows [{start}, {start}+{len}) out of bounds for {:?}",
                self.shape
            )));
        }
        let d = self.shape[1];
        let data = self.with_data(|x| x[start * d..(start + len) * d].to_vec());
        Ok(self.unary(data, vec![len, d], OpKind::SliceRows { start, len }))
    }

    /// Contiguous row-major reinterpretation; element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<F>> {
        if numel(shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(self.unary(self.data(), shape.to_vec(), OpKind::Reshape))
    }

    /// Scalar view of element `[row, col]` of a rank-2 tensor.
    pub fn gather2(&self, row: usize, col: usize) -> Result<Tensor<F>> {
        if self.rank() != 2 || row >= self.shape[0] || col >= self.shape[1] {
            return Err(Error::contract(format!(
                "gather2 ({row}, {col}) out of bounds for {:?}",
                self.shape
            )));
        }
        let cols = self.shape[1];
        let v = self.with_data(|x| x[row * cols + col]);
        Ok(self.unary(vec![v], vec![1], OpKind::Gather2 { row, col }))
    }

    /// log(exp(a) + exp(b)) on scalars, max-shifted.
    pub fn logaddexp(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_same_tape(other, "logaddexp")?;
        if self.numel() != 1 || other.numel() != 1 {
            return Err(Error::contract("logaddexp requires scalars"));
        }
        let a = self.item()?;
        let b = other.item()?;
        let m = if a > b { a } else { b };
        let out = m + ((a - m).exp() + (b - m).exp()).ln();
        Ok(self.tape.push(
            vec![out],
            vec![1],
            Some(OpRecord {
                inputs: vec![self.id, other.id],
                kind: OpKind::LogAddExp,
            }),
        ))
    }

    /// Token embedding lookup: `table: [V x d]`, output `[indices.len() x d]`.
    pub fn embedding(table: &Tensor<F>, indices: &[usize]) -> Result<Tensor<F>> {
        if table.rank() != 2 {
            return Err(Error::contract("embedding table must be rank 2"));
        }
        let (v, d) = (table.shape[0], table.shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::contract(format!(
                "embedding index {bad} out of vocabulary {v}"
            )));
        }
        let data = table.with_data(|tb| {
            let mut out = Vec::with_capacity(indices.len() * d);
            for &i in indices {
                out.extend_from_slice(&tb[i * d..(i + 1) * d]);
            }
            out
        });
        Ok(table.tape.push(
            data,
            vec![indices.len(), d],
            Some(OpRecord {
                inputs: vec![table.id],
                kind: OpKind::Embedding {
                    indices: indices.to_vec(),
                },
            }),
        ))
    }
}
