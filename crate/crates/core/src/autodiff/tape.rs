//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node holding its value; `backward` walks the
//! tape in reverse. Values are never mutated once recorded, so expressions
//! that already contain derivatives (the SIREN's cosine companion pass) can
//! be differentiated again with respect to the parameters.

use std::cell::{Ref, RefCell};

use super::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `x·wᵀ`
    MatMulT(Var, Var),
    /// `x + 1·b` with `b` a single row
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sin(Var),
    Cos(Var),
    Tanh(Var),
    Sqrt(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    /// Rows of `x` gathered by index (repeats allowed).
    GatherRows(Var, Vec<usize>),
    /// Zero-padded 1-D patch extraction along rows of length `width`.
    Im2Col { x: Var, width: usize, taps: usize },
    /// Weighted smooth-ℓ1 normal-aware loss against fixed targets.
    NormalAware { pred: Var, target: Vec<f64>, beta: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when no path reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn unary(&self, a: Var, f: impl Fn(&Tensor) -> Tensor, op: Op) -> Var {
        let value = f(&self.nodes.borrow()[a.0].value);
        self.push(value, op, self.rg(a))
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(&Tensor, &Tensor) -> Tensor, op: Op) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(x.shape(), y.shape(), "elementwise shapes differ");
            f(x, y)
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn matmul_t(&self, x: Var, w: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            matmul_nt(&nodes[x.0].value, &nodes[w.0].value)
        };
        let rg = self.rg(x) || self.rg(w);
        self.push(value, Op::MatMulT(x, w), rg)
    }

    pub fn add_bias(&self, x: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (xv, bv) = (&nodes[x.0].value, &nodes[b.0].value);
            assert!(bv.rows() == 1 && bv.cols() == xv.cols(), "bias must be 1×cols");
            let mut out = xv.clone();
            let cols = xv.cols();
            for row in out.data_mut().chunks_mut(cols) {
                for (o, bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
            out
        };
        let rg = self.rg(x) || self.rg(b);
        self.push(value, Op::AddBias(x, b), rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.zip(y, |p, q| p + q), Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.zip(y, |p, q| p - q), Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.zip(y, |p, q| p * q), Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.zip(y, |p, q| p / q), Op::Div(a, b))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x.map(|v| v * s), Op::Scale(a, s))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x.map(|v| v + s), Op::AddScalar(a))
    }

    pub fn sin(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(f64::sin), Op::Sin(a))
    }

    pub fn cos(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(f64::cos), Op::Cos(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(f64::tanh), Op::Tanh(a))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(f64::sqrt), Op::Sqrt(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(f64::abs), Op::Abs(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(|v| v * v), Op::Square(a))
    }

    pub fn sum(&self, a: Var) -> Var {
        self.unary(a, |x| Tensor::scalar(x.data().iter().sum()), Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        self.unary(a, |x| Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64), Op::Mean(a))
    }

    pub fn gather_rows(&self, x: Var, idx: Vec<usize>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let cols = xv.cols();
            let mut data = Vec::with_capacity(idx.len() * cols);
            for &i in &idx {
                data.extend_from_slice(&xv.data()[i * cols..(i + 1) * cols]);
            }
            Tensor::from_vec(idx.len(), cols, data).expect("gather shape")
        };
        let rg = self.rg(x);
        self.push(value, Op::GatherRows(x, idx), rg)
    }

    /// `x` holds sequences of `width` consecutive rows with `c` channels; the
    /// result row `i` is the `taps`-wide neighborhood of row `i` (centered,
    /// zero-padded at sequence ends), laid out tap-major: `[tap0 ch.., tap1 ch.., ...]`.
    pub fn im2col(&self, x: Var, width: usize, taps: usize) -> Var {
        assert!(taps % 2 == 1, "taps must be odd");
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            assert_eq!(xv.rows() % width, 0, "rows must be a multiple of width");
            let c = xv.cols();
            let half = (taps / 2) as isize;
            let mut out = Tensor::zeros(xv.rows(), c * taps);
            let od = out.data_mut();
            for (i, orow) in od.chunks_mut(c * taps).enumerate() {
                let pos = (i % width) as isize;
                let base = i as isize - pos;
                for t in 0..taps {
                    let p = pos + t as isize - half;
                    if p >= 0 && p < width as isize {
                        let src = (base + p) as usize;
                        orow[t * c..(t + 1) * c].copy_from_slice(&xv.data()[src * c..(src + 1) * c]);
                    }
                }
            }
            out
        };
        let rg = self.rg(x);
        self.push(value, Op::Im2Col { x, width, taps }, rg)
    }

    /// Mean over entries of `(|t| + λ)·smooth_l1(p - t, β)` where
    /// `λ = 1 - min(p+1, t+1)/max(p+1, t+1)`; `pred` is a column.
    pub fn normal_aware_loss(&self, pred: Var, target: Vec<f64>, beta: f64) -> Var {
        let value = {
            let p = self.value(pred);
            assert_eq!(p.len(), target.len(), "prediction/target length mismatch");
            let n = target.len().max(1) as f64;
            let s: f64 = p.data().iter().zip(&target).map(|(&p, &t)| normal_aware_term(p, t, beta).0).sum();
            Tensor::scalar(s / n)
        };
        let rg = self.rg(pred);
        self.push(value, Op::NormalAware { pred, target, beta }, rg)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0].value;
        if root.shape() != (1, 1) {
            return Err(Error::invalid(format!("backward needs a scalar loss, got {:?}", root.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        let accumulate = |grads: &mut Vec<Option<Tensor>>, v: Var, g: Tensor| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMulT(x, w) => {
                    if nodes[x.0].requires_grad {
                        accumulate(&mut grads, *x, matmul_nn(&g, val(*w)));
                    }
                    if nodes[w.0].requires_grad {
                        accumulate(&mut grads, *w, matmul_tn(&g, val(*x)));
                    }
                }
                Op::AddBias(x, b) => {
                    if nodes[b.0].requires_grad {
                        let cols = g.cols();
                        let mut db = Tensor::zeros(1, cols);
                        for row in g.data().chunks(cols) {
                            for (d, v) in db.data_mut().iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads, *b, db);
                    }
                    accumulate(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, g.zip(val(*b), |d, y| d * y));
                    accumulate(&mut grads, *b, g.zip(val(*a), |d, x| d * x));
                }
                Op::Div(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    accumulate(&mut grads, *a, g.zip(y, |d, y| d / y));
                    let gb = Tensor::from_vec(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(x.data()).zip(y.data()).map(|((d, x), y)| -d * x / (y * y)).collect(),
                    )
                    .expect("shape");
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.map(|d| d * s)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Sin(a) => accumulate(&mut grads, *a, g.zip(val(*a), |d, x| d * x.cos())),
                Op::Cos(a) => accumulate(&mut grads, *a, g.zip(val(*a), |d, x| -d * x.sin())),
                Op::Tanh(a) => accumulate(&mut grads, *a, g.zip(&node.value, |d, y| d * (1.0 - y * y))),
                Op::Sqrt(a) => {
                    // subgradient 0 at the kink
                    accumulate(&mut grads, *a, g.zip(&node.value, |d, y| if y > 0.0 { d / (2.0 * y) } else { 0.0 }))
                }
                Op::Abs(a) => accumulate(&mut grads, *a, g.zip(val(*a), |d, x| d * sign(x))),
                Op::Square(a) => accumulate(&mut grads, *a, g.zip(val(*a), |d, x| 2.0 * d * x)),
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    accumulate(&mut grads, *a, Tensor::filled(r, c, g.data()[0]));
                }
                Op::Mean(a) => {
                    let (r, c) = val(*a).shape();
                    accumulate(&mut grads, *a, Tensor::filled(r, c, g.data()[0] / (r * c) as f64));
                }
                Op::GatherRows(x, idx_list) => {
                    let (r, c) = val(*x).shape();
                    let mut gx = Tensor::zeros(r, c);
                    let gd = gx.data_mut();
                    for (k, &i) in idx_list.iter().enumerate() {
                        for j in 0..c {
                            gd[i * c + j] += g.data()[k * c + j];
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Im2Col { x, width, taps } => {
                    let (r, c) = val(*x).shape();
                    let half = (*taps / 2) as isize;
                    let mut gx = Tensor::zeros(r, c);
                    let gd = gx.data_mut();
                    for (i, grow) in g.data().chunks(c * taps).enumerate() {
                        let pos = (i % width) as isize;
                        let base = i as isize - pos;
                        for t in 0..*taps {
                            let p = pos + t as isize - half;
                            if p >= 0 && p < *width as isize {
                                let dst = (base + p) as usize;
                                for j in 0..c {
                                    gd[dst * c + j] += grow[t * c + j];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::NormalAware { pred, target, beta } => {
                    let n = target.len().max(1) as f64;
                    let scale = g.data()[0] / n;
                    let p = val(*pred);
                    let gp = Tensor::from_vec(
                        p.rows(),
                        p.cols(),
                        p.data().iter().zip(target).map(|(&p, &t)| scale * normal_aware_term(p, t, *beta).1).collect(),
                    )
                    .expect("shape");
                    accumulate(&mut grads, *pred, gp);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Smooth-ℓ1: quadratic below `beta`, linear above.
pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * x * x / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        sign(x)
    }
}

/// `1 - min(p+1, t+1)/max(p+1, t+1)` and its derivative in `p`.
pub fn relative_weight(pred: f64, target: f64) -> (f64, f64) {
    let (a, b) = (pred + 1.0, target + 1.0);
    if a < b {
        (1.0 - a / b, -1.0 / b)
    } else if a > b {
        (1.0 - b / a, b / (a * a))
    } else {
        (0.0, 0.0)
    }
}

/// Per-pixel normal-aware term and its derivative with respect to the prediction.
pub fn normal_aware_term(pred: f64, target: f64, beta: f64) -> (f64, f64) {
    let r = pred - target;
    let (lam, dlam) = relative_weight(pred, target);
    let w = target.abs() + lam;
    let l = smooth_l1(r, beta);
    (w * l, dlam * l + w * smooth_l1_grad(r, beta))
}
