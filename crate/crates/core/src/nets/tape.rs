//! Reverse-mode differentiation over dense row-major matrices.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::par;
use crate::splat_model::{leaky, leaky_grad, sigmoid, softplus, softplus_grad};
use crate::tensor::Mat;

use super::conv::ConvRules;

static NEXT_SET: AtomicU64 = AtomicU64::new(1);

/// Named trainable tensors. Each set has a process-unique id so the tape can
/// route gradients back to it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    id: u64,
    pub names: Vec<String>,
    pub tensors: Vec<Mat>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            id: NEXT_SET.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Mat> {
        self.tensors.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Mat::is_finite)
    }

    /// Replaces the tensors, keeping names and id. Shapes must match.
    pub fn load(&mut self, tensors: Vec<Mat>) -> Result<()> {
        if tensors.len() != self.tensors.len()
            || tensors.iter().zip(&self.tensors).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Shape("parameter tensors do not match the architecture".into()));
        }
        self.tensors = tensors;
        Ok(())
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    LeakyRelu,
    Sigmoid,
    Tanh,
    Softplus,
}

#[derive(Debug)]
enum Op {
    Input,
    Param { set: u64, index: usize },
    Linear { x: Var, w: Var, b: Var },
    Conv { x: Var, w: Var, b: Var, rules: Arc<ConvRules> },
    Act { x: Var, kind: Activation },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, index: Vec<Option<usize>> },
    ConcatRows(Vec<Var>),
    Broadcast { x: Var },
    Bce { p: Var, target: Vec<f64> },
    Sum(Var),
    Weighted(Vec<(Var, f64)>),
}

struct Node {
    op: Op,
    value: Mat,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Grads {
    params: HashMap<(u64, usize), Mat>,
    nodes: HashMap<usize, Mat>,
}

impl Grads {
    /// Gradients for every tensor of `set`; tensors the loss does not reach get zeros.
    pub fn for_set(&self, set: &ParamSet) -> Vec<Mat> {
        set.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                self.params
                    .get(&(set.id, i))
                    .cloned()
                    .unwrap_or_else(|| Mat::zeros(t.rows, t.cols))
            })
            .collect()
    }

    /// Gradient of an input node, zeros if unreached.
    pub fn input(&self, v: Var, rows: usize, cols: usize) -> Mat {
        self.nodes.get(&v.0).cloned().unwrap_or_else(|| Mat::zeros(rows, cols))
    }
}

/// Records a forward computation for one backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    used: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Mat) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant or a leaf whose gradient is reported by [`Grads::input`].
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, set: &ParamSet, index: usize) -> Var {
        self.push(
            Op::Param {
                set: set.id,
                index,
            },
            set.tensors[index].clone(),
        )
    }

    /// `x W + b` with `b` a `1 x out` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let mut y = self.value(x).matmul(self.value(w));
        y.add_row(self.value(b));
        self.push(Op::Linear { x, w, b }, y)
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Var, rules: Arc<ConvRules>) -> Var {
        let y = rules.forward(self.value(x), self.value(w), self.value(b));
        self.push(Op::Conv { x, w, b, rules }, y)
    }

    pub fn act(&mut self, x: Var, kind: Activation) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Activation::LeakyRelu => leaky,
            Activation::Sigmoid => sigmoid,
            Activation::Tanh => f64::tanh,
            Activation::Softplus => softplus,
        };
        let y = self.value(x).map(f);
        self.push(Op::Act { x, kind }, y)
    }

    pub fn leaky(&mut self, x: Var) -> Var {
        self.act(x, Activation::LeakyRelu)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        self.push(Op::Add(a, b), y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shapes");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let y = Mat::from_vec(va.rows, va.cols, data);
        self.push(Op::Mul(a, b), y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x).map(|v| v * c);
        self.push(Op::Scale(x, c), y)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let rows = self.value(xs[0]).rows;
        let cols: usize = xs.iter().map(|&x| self.value(x).cols).sum();
        let mut y = Mat::zeros(rows, cols);
        let mut off = 0;
        for &x in xs {
            let v = self.value(x);
            assert_eq!(v.rows, rows, "concat_cols rows");
            for r in 0..rows {
                y.row_mut(r)[off..off + v.cols].copy_from_slice(v.row(r));
            }
            off += v.cols;
        }
        self.push(Op::ConcatCols(xs.to_vec()), y)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        let mut y = Mat::zeros(v.rows, len);
        for r in 0..v.rows {
            y.row_mut(r).copy_from_slice(&v.row(r)[start..start + len]);
        }
        self.push(Op::SliceCols { x, start }, y)
    }

    /// Row `i` of the result is row `index[i]` of `x`, or zeros for `None`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<Option<usize>>) -> Var {
        let v = self.value(x);
        let mut y = Mat::zeros(index.len(), v.cols);
        for (r, src) in index.iter().enumerate() {
            if let Some(s) = *src {
                y.row_mut(r).copy_from_slice(v.row(s));
            }
        }
        self.push(Op::GatherRows { x, index }, y)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let cols = self.value(xs[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let v = self.value(x);
            assert_eq!(v.cols, cols, "concat_rows cols");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        self.push(Op::ConcatRows(xs.to_vec()), Mat::from_vec(rows, cols, data))
    }

    /// Repeats the `1 x c` row `x` into `rows x c`.
    pub fn broadcast(&mut self, x: Var, rows: usize) -> Var {
        let v = self.value(x);
        assert_eq!(v.rows, 1, "broadcast needs a row");
        let mut data = Vec::with_capacity(rows * v.cols);
        for _ in 0..rows {
            data.extend_from_slice(&v.data);
        }
        let y = Mat::from_vec(rows, v.cols, data);
        self.push(Op::Broadcast { x }, y)
    }

    /// Mean binary cross-entropy of the probabilities in `p` (any shape).
    pub fn bce(&mut self, p: Var, target: Vec<f64>) -> Var {
        let v = self.value(p);
        assert_eq!(v.len(), target.len(), "bce length");
        let value = crate::losses::bce(&v.data, &target).map(|r| r.0).unwrap_or(0.0);
        self.push(Op::Bce { p, target }, Mat::scalar(value))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Mat::scalar(s))
    }

    /// `Σ c_i x_i` over scalar nodes.
    pub fn weighted(&mut self, terms: &[(Var, f64)]) -> Var {
        let s = terms.iter().map(|&(x, c)| c * self.value(x).data[0]).sum();
        self.push(Op::Weighted(terms.to_vec()), Mat::scalar(s))
    }

    /// Runs the reverse pass from the given seeds, visiting nodes in reverse
    /// creation order. Consumes the recording.
    pub fn backward(&mut self, seeds: Vec<(Var, Mat)>) -> Result<Grads> {
        if self.used {
            return Err(Error::UsedTape);
        }
        self.used = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        for (v, g) in seeds {
            let shape = self.nodes[v.0].value.shape();
            if g.shape() != shape {
                return Err(Error::Shape(format!(
                    "seed of shape {:?} for node of shape {:?}",
                    g.shape(),
                    shape
                )));
            }
            accumulate(&mut grads[v.0], g);
        }
        let mut out = Grads::default();
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {
                    out.nodes.insert(i, g);
                }
                Op::Param { set, index } => {
                    match out.params.get_mut(&(*set, *index)) {
                        Some(m) => m.add_assign(&g),
                        None => {
                            out.params.insert((*set, *index), g);
                        }
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    accumulate(&mut grads[b.0], g.col_sums());
                    accumulate(&mut grads[w.0], xv.matmul_tn(&g));
                    accumulate(&mut grads[x.0], g.matmul_nt(wv));
                }
                Op::Conv { x, w, b, rules } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    accumulate(&mut grads[b.0], g.col_sums());
                    accumulate(&mut grads[w.0], rules.weight_grad(xv, &g, wv.rows / 27));
                    accumulate(&mut grads[x.0], rules.input_grad(&g, wv));
                }
                Op::Act { x, kind } => {
                    let xv = &self.nodes[x.0].value;
                    let y = &node.value;
                    let mut d = g;
                    let kind = *kind;
                    par::for_each_chunk_mut(&mut d.data, 4096, |c, chunk| {
                        for (j, dv) in chunk.iter_mut().enumerate() {
                            let k = c * 4096 + j;
                            *dv *= match kind {
                                Activation::LeakyRelu => leaky_grad(xv.data[k]),
                                Activation::Sigmoid => y.data[k] * (1.0 - y.data[k]),
                                Activation::Tanh => 1.0 - y.data[k] * y.data[k],
                                Activation::Softplus => softplus_grad(xv.data[k]),
                            };
                        }
                    });
                    accumulate(&mut grads[x.0], d);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[b.0], g.clone());
                    accumulate(&mut grads[a.0], g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga = Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect());
                    let gb = Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&va.data).map(|(x, y)| x * y).collect());
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    accumulate(&mut grads[x.0], g.map(|v| v * c));
                }
                Op::ConcatCols(xs) => {
                    let mut off = 0;
                    for x in xs {
                        let cols = self.nodes[x.0].value.cols;
                        let mut part = Mat::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            part.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        off += cols;
                        accumulate(&mut grads[x.0], part);
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = &self.nodes[x.0].value;
                    let mut full = Mat::zeros(xv.rows, xv.cols);
                    for r in 0..g.rows {
                        full.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads[x.0], full);
                }
                Op::GatherRows { x, index } => {
                    let xv = &self.nodes[x.0].value;
                    let mut full = Mat::zeros(xv.rows, xv.cols);
                    for (r, src) in index.iter().enumerate() {
                        if let Some(s) = *src {
                            for (a, b) in full.row_mut(s).iter_mut().zip(g.row(r)) {
                                *a += b;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], full);
                }
                Op::ConcatRows(xs) => {
                    let mut off = 0;
                    for x in xs {
                        let len = self.nodes[x.0].value.len();
                        let rows = self.nodes[x.0].value.rows;
                        let part = Mat::from_vec(rows, g.cols, g.data[off..off + len].to_vec());
                        off += len;
                        accumulate(&mut grads[x.0], part);
                    }
                }
                Op::Broadcast { x } => {
                    accumulate(&mut grads[x.0], g.col_sums());
                }
                Op::Bce { p, target } => {
                    let pv = &self.nodes[p.0].value;
                    let (_, d) = crate::losses::bce(&pv.data, target)?;
                    let s = g.data[0];
                    accumulate(&mut grads[p.0], Mat::from_vec(pv.rows, pv.cols, d.iter().map(|v| v * s).collect()));
                }
                Op::Sum(x) => {
                    let xv = &self.nodes[x.0].value;
                    accumulate(&mut grads[x.0], Mat::filled(xv.rows, xv.cols, g.data[0]));
                }
                Op::Weighted(terms) => {
                    for &(x, c) in terms {
                        accumulate(&mut grads[x.0], Mat::scalar(c * g.data[0]));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(m) => m.add_assign(&g),
        None => *slot = Some(g),
    }
}
