//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar output walks the records in reverse and
//! accumulates gradients for every tracked input. Binary elementwise ops
//! broadcast along axes of length one, like numpy.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use crate::tensor::Tensor;

/// Floor applied to bases of fractional powers so values and gradients stay finite.
pub const POW_FLOOR: f64 = 1e-12;

type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    tracked: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when the output does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = v.shape();
                Tensor::zeros(r, c)
            }
        }
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

    /// A differentiable leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn leaf(&self, value: Tensor, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), parents: Vec::new(), backward: None, tracked });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn push<F>(&self, value: Tensor, parents: &[Var<'_>], backward: F) -> Var<'_>
    where
        F: Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let tracked = parents.iter().any(|p| nodes[p.id].tracked);
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if tracked { Some(Box::new(backward)) } else { None },
            tracked,
        });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Back-propagate from a `1 x 1` output.
    pub fn backward(&self, output: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; output.id + 1];
        let (r, c) = nodes[output.id].value.shape();
        grads[output.id] = Some(Tensor::full(r, c, 1.0));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let parent_values: Vec<&Tensor> =
                node.parents.iter().map(|&p| nodes[p].value.as_ref()).collect();
            let parent_grads = backward(&g, &parent_values, &node.value);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].tracked {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        Grads { grads }
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        assert!(x == y || x == 1 || y == 1, "cannot broadcast {a:?} with {b:?}");
        x.max(y)
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let (rows, cols) = broadcast_shape(a.shape(), b.shape());
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let ar = if a.rows() == 1 { 0 } else { r };
        let br = if b.rows() == 1 { 0 } else { r };
        for c in 0..cols {
            let ac = if a.cols() == 1 { 0 } else { c };
            let bc = if b.cols() == 1 { 0 } else { c };
            out.push(f(a.get(ar, ac), b.get(br, bc)));
        }
    }
    Tensor::from_vec(rows, cols, out)
}

/// Elementwise `f(g, a, b)` over the broadcast shape of the gradient `g`.
fn broadcast_zip3(g: &Tensor, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
    let (rows, cols) = g.shape();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let ar = if a.rows() == 1 { 0 } else { r };
        let br = if b.rows() == 1 { 0 } else { r };
        for c in 0..cols {
            let ac = if a.cols() == 1 { 0 } else { c };
            let bc = if b.cols() == 1 { 0 } else { c };
            out.push(f(g.get(r, c), a.get(ar, ac), b.get(br, bc)));
        }
    }
    Tensor::from_vec(rows, cols, out)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn binary(
        self,
        other: Var<'t>,
        f: impl Fn(f64, f64) -> f64,
        da: impl Fn(f64, f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let value = broadcast_zip(&self.value(), &other.value(), f);
        self.tape.push(value, &[self, other], move |g, p, _| {
            let (a, b) = (p[0], p[1]);
            let ga = broadcast_zip3(g, a, b, &da).reduce_to(a.rows(), a.cols());
            let gb = broadcast_zip3(g, a, b, &db).reduce_to(b.rows(), b.cols());
            vec![Some(ga), Some(gb)]
        })
    }

    /// Elementwise map; `df(x, y)` is the derivative given input `x` and output `y`.
    pub fn unary(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let value = self.value().map(f);
        self.tape.push(value, &[self], move |g, p, y| {
            let data = g
                .data()
                .iter()
                .zip(p[0].data())
                .zip(y.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_vec(g.rows(), g.cols(), data))]
        })
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.unary(move |x| x + s, |_, _| 1.0)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn relu(self) -> Var<'t> {
        self.clamp_min(0.0)
    }

    pub fn clamp_min(self, lo: f64) -> Var<'t> {
        self.unary(move |x| x.max(lo), move |x, _| if x > lo { 1.0 } else { 0.0 })
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    pub fn powf(self, e: f64) -> Var<'t> {
        self.unary(
            move |x| x.max(POW_FLOOR).powf(e),
            move |x, y| if x > POW_FLOOR { e * y / x } else { 0.0 },
        )
    }

    /// `max(self, POW_FLOOR)^exponent` for a non-negative base, broadcasting.
    pub fn pow(self, exponent: Var<'t>) -> Var<'t> {
        self.binary(
            exponent,
            |b, e| b.max(POW_FLOOR).powf(e),
            |g, b, e| if b > POW_FLOOR { g * e * b.powf(e - 1.0) } else { 0.0 },
            |g, b, e| {
                let b = b.max(POW_FLOOR);
                g * b.powf(e) * b.ln()
            },
        )
    }

    /// Signed power `sgn(b)·|b|^e`, broadcasting.
    pub fn signed_pow(self, exponent: Var<'t>) -> Var<'t> {
        self.binary(
            exponent,
            signed_pow,
            |g, b, e| {
                let m = b.abs();
                if m > POW_FLOOR {
                    g * e * m.powf(e - 1.0)
                } else {
                    0.0
                }
            },
            |g, b, e| {
                let m = b.abs();
                if m > 0.0 {
                    g * signed_pow(b, e) * m.ln()
                } else {
                    0.0
                }
            },
        )
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let value = self.value().matmul(&other.value());
        self.tape.push(value, &[self, other], |g, p, _| {
            vec![Some(g.matmul_t(p[1])), Some(p[0].t_matmul(g))]
        })
    }

    pub fn transpose(self) -> Var<'t> {
        let value = self.value().transpose();
        self.tape.push(value, &[self], |g, _, _| vec![Some(g.transpose())])
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        let value = (*self.value()).clone().reshape(rows, cols);
        self.tape.push(value, &[self], |g, p, _| {
            vec![Some(g.clone().reshape(p[0].rows(), p[0].cols()))]
        })
    }

    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().sum());
        self.tape.push(value, &[self], |g, p, _| {
            vec![Some(Tensor::full(p[0].rows(), p[0].cols(), g.item()))]
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Column sums, `R x C -> 1 x C`.
    pub fn sum_rows(self) -> Var<'t> {
        let v = self.value();
        let value = v.reduce_to(1, v.cols());
        self.tape.push(value, &[self], |g, p, _| {
            let (r, c) = p[0].shape();
            let mut out = Tensor::zeros(r, c);
            for i in 0..r {
                out.data_mut()[i * c..(i + 1) * c].copy_from_slice(g.data());
            }
            vec![Some(out)]
        })
    }

    pub fn mean_rows(self) -> Var<'t> {
        let n = self.rows() as f64;
        self.sum_rows().scale(1.0 / n)
    }

    /// Row sums, `R x C -> R x 1`.
    pub fn sum_cols(self) -> Var<'t> {
        let v = self.value();
        let value = v.reduce_to(v.rows(), 1);
        self.tape.push(value, &[self], |g, p, _| {
            let (r, c) = p[0].shape();
            let data = (0..r * c).map(|i| g.data()[i / c]).collect();
            vec![Some(Tensor::from_vec(r, c, data))]
        })
    }

    /// Column-wise max over consecutive blocks of `block` rows.
    pub fn block_max_rows(self, block: usize) -> Var<'t> {
        let v = self.value();
        let (rows, cols) = v.shape();
        assert!(block > 0 && rows % block == 0, "block_max_rows: {rows} rows, block {block}");
        let blocks = rows / block;
        let mut out = Tensor::full(blocks, cols, f64::NEG_INFINITY);
        let mut arg = vec![0usize; blocks * cols];
        for b in 0..blocks {
            for r in b * block..(b + 1) * block {
                for c in 0..cols {
                    let x = v.get(r, c);
                    if x > out.get(b, c) {
                        out.set(b, c, x);
                        arg[b * cols + c] = r;
                    }
                }
            }
        }
        self.tape.push(out, &[self], move |g, p, _| {
            let mut grad = Tensor::zeros(p[0].rows(), p[0].cols());
            for (i, &r) in arg.iter().enumerate() {
                let c = i % cols;
                let cur = grad.get(r, c);
                grad.set(r, c, cur + g.data()[i]);
            }
            vec![Some(grad)]
        })
    }

    pub fn slice(self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Var<'t> {
        let value = self.value().slice(rows.clone(), cols.clone());
        self.tape.push(value, &[self], move |g, p, _| {
            let mut out = Tensor::zeros(p[0].rows(), p[0].cols());
            for (gi, r) in rows.clone().enumerate() {
                for (gj, c) in cols.clone().enumerate() {
                    out.set(r, c, g.get(gi, gj));
                }
            }
            vec![Some(out)]
        })
    }

    pub fn cols_range(self, cols: std::ops::Range<usize>) -> Var<'t> {
        let rows = self.rows();
        self.slice(0..rows, cols)
    }

    pub fn rows_range(self, rows: std::ops::Range<usize>) -> Var<'t> {
        let cols = self.cols();
        self.slice(rows, 0..cols)
    }

    pub fn gather_rows(self, indices: &[usize]) -> Var<'t> {
        let value = self.value().gather_rows(indices);
        let indices = indices.to_vec();
        self.tape.push(value, &[self], move |g, p, _| {
            let cols = p[0].cols();
            let mut out = Tensor::zeros(p[0].rows(), cols);
            for (gi, &r) in indices.iter().enumerate() {
                for c in 0..cols {
                    let cur = out.get(r, c);
                    out.set(r, c, cur + g.get(gi, c));
                }
            }
            vec![Some(out)]
        })
    }

    /// Repeat each row `times` times consecutively.
    pub fn repeat_rows(self, times: usize) -> Var<'t> {
        let v = self.value();
        let idx: Vec<usize> = (0..v.rows()).flat_map(|r| std::iter::repeat_n(r, times)).collect();
        self.gather_rows(&idx)
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let value = Tensor::concat_rows(&refs);
        tape.push(value, parts, |g, p, _| {
            let mut start = 0;
            p.iter()
                .map(|t| {
                    let s = g.slice(start..start + t.rows(), 0..g.cols());
                    start += t.rows();
                    Some(s)
                })
                .collect()
        })
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let value = Tensor::concat_cols(&refs);
        tape.push(value, parts, |g, p, _| {
            let mut start = 0;
            p.iter()
                .map(|t| {
                    let s = g.slice(0..g.rows(), start..start + t.cols());
                    start += t.cols();
                    Some(s)
                })
                .collect()
        })
    }

    /// For every row of `self`, the squared distance to its nearest row of `other`.
    ///
    /// Both operands are `N x D` point sets; the result is `N x 1`. Ties keep
    /// the lowest index of `other`.
    pub fn nn_sqdist(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.cols(), b.cols(), "nn_sqdist dimension mismatch");
        assert!(b.rows() > 0, "nn_sqdist against an empty set");
        let (dists, arg) = nearest_neighbors(&a, &b);
        let value = Tensor::from_vec(a.rows(), 1, dists);
        self.tape.push(value, &[self, other], move |g, p, _| {
            let (a, b) = (p[0], p[1]);
            let d = a.cols();
            let mut ga = Tensor::zeros(a.rows(), d);
            let mut gb = Tensor::zeros(b.rows(), d);
            for (i, &j) in arg.iter().enumerate() {
                let gi = g.data()[i];
                if gi == 0.0 {
                    continue;
                }
                for k in 0..d {
                    let diff = 2.0 * gi * (a.get(i, k) - b.get(j, k));
                    ga.data_mut()[i * d + k] += diff;
                    gb.data_mut()[j * d + k] -= diff;
                }
            }
            vec![Some(ga), Some(gb)]
        })
    }

    /// Rotation matrix of a unit quaternion `(w, x, y, z)` stored as `1 x 4`.
    pub fn quat_to_rot(self) -> Var<'t> {
        let q = self.value();
        assert_eq!(q.shape(), (1, 4), "quaternion must be 1x4");
        let value = Tensor::from_vec(3, 3, rotation_entries(q.data()).to_vec());
        self.tape.push(value, &[self], |g, p, _| {
            let jac = rotation_jacobian(p[0].data());
            let mut out = [0.0; 4];
            for (e, row) in jac.iter().enumerate() {
                for (k, o) in out.iter_mut().enumerate() {
                    *o += g.data()[e] * row[k];
                }
            }
            vec![Some(Tensor::row(&out))]
        })
    }

    /// Normalize each row to unit length. Rows with norm below `min_norm`
    /// are replaced by `fallback` and receive no gradient.
    pub fn normalize_rows(self, min_norm: f64, fallback: Vec<f64>) -> Var<'t> {
        let v = self.value();
        let (rows, cols) = v.shape();
        assert_eq!(fallback.len(), cols);
        let norms: Vec<f64> =
            (0..rows).map(|r| v.row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let x = if norms[r] < min_norm { fallback[c] } else { v.get(r, c) / norms[r] };
                out.set(r, c, x);
            }
        }
        self.tape.push(out, &[self], move |g, _, y| {
            let mut grad = Tensor::zeros(rows, cols);
            for r in 0..rows {
                if norms[r] < min_norm {
                    continue;
                }
                let dot: f64 = (0..cols).map(|c| g.get(r, c) * y.get(r, c)).sum();
                for c in 0..cols {
                    grad.set(r, c, (g.get(r, c) - y.get(r, c) * dot) / norms[r]);
                }
            }
            vec![Some(grad)]
        })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sgn(b)·|b|^e`.
pub fn signed_pow(b: f64, e: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        b.signum() * b.abs().powf(e)
    }
}

/// Brute-force nearest neighbors: squared distance and index into `b` for each row of `a`.
pub(crate) fn nearest_neighbors(a: &Tensor, b: &Tensor) -> (Vec<f64>, Vec<usize>) {
    let d = a.cols();
    let mut dists = Vec::with_capacity(a.rows());
    let mut arg = Vec::with_capacity(a.rows());
    for i in 0..a.rows() {
        let ai = a.row_slice(i);
        let mut best = f64::INFINITY;
        let mut best_j = 0;
        for j in 0..b.rows() {
            let bj = b.row_slice(j);
            let mut s = 0.0;
            for k in 0..d {
                let t = ai[k] - bj[k];
                s += t * t;
            }
            if s < best {
                best = s;
                best_j = j;
            }
        }
        dists.push(best);
        arg.push(best_j);
    }
    (dists, arg)
}

/// Row-major entries of R(q) for q = (w, x, y, z). Exact only for unit q.
pub(crate) fn rotation_entries(q: &[f64]) -> [f64; 9] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ]
}

fn rotation_jacobian(q: &[f64]) -> [[f64; 4]; 9] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let t = 2.0;
    [
        [0.0, 0.0, -2.0 * t * y, -2.0 * t * z],
        [-t * z, t * y, t * x, -t * w],
        [t * y, t * z, t * w, t * x],
        [t * z, t * y, t * x, t * w],
        [0.0, -2.0 * t * x, 0.0, -2.0 * t * z],
        [-t * x, -t * w, t * z, t * y],
        [-t * y, t * z, -t * w, t * x],
        [t * x, t * w, t * z, t * y],
        [0.0, -2.0 * t * x, -2.0 * t * y, 0.0],
    ]
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, |a, b| a + b, |g, _, _| g, |g, _, _| g)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, |a, b| a - b, |g, _, _| g, |g, _, _| -g)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, |a, b| a * b, |g, _, b| g * b, |g, a, _| g * a)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, |a, b| a / b, |g, _, b| g / b, |g, a, b| -g * a / (b * b))
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central finite differences against tape gradients.

    use super::*;

    /// Max relative error between the tape gradient of `f` and central differences.
    ///
    /// The error for each entry is `|a - n| / max(|a|, |n|, floor)`.
    pub fn max_rel_error(
        inputs: &[Tensor],
        step: f64,
        floor: f64,
        f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
    ) -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.var(t.clone())).collect();
        let out = f(&tape, &vars);
        let grads = tape.backward(out);
        let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
        let eval = |xs: &[Tensor]| {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
            f(&tape, &vars).item()
        };
        let mut worst: f64 = 0.0;
        for (i, input) in inputs.iter().enumerate() {
            for k in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[k] += step;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[k] -= step;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let a = analytic[i].data()[k];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
                worst = worst.max(err);
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::max_rel_error;
    use super::*;

    fn t(rows: usize, cols: usize, seed: f64) -> Tensor {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|i| ((i as f64 + seed) * 1.7).sin()).collect())
    }

    #[test]
    fn broadcast_arithmetic_gradients() {
        let err = max_rel_error(&[t(4, 3, 0.1), t(1, 3, 0.5), t(4, 1, 0.9)], 1e-6, 1e-8, |_, v| {
            ((v[0] * v[1] + v[2]) / (v[1].square().add_scalar(1.0)) - v[2]).square().sum()
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn matmul_and_reductions() {
        let err = max_rel_error(&[t(5, 3, 0.2), t(3, 4, 0.3)], 1e-6, 1e-8, |_, v| {
            let m = v[0].matmul(v[1]).tanh();
            (m.sum_rows().square().sum() + m.sum_cols().sigmoid().sum() + m.mean_rows().exp().mean())
                .scale(0.5)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn powers_and_signed_powers() {
        let base = Tensor::from_vec(3, 1, vec![-0.7, 0.3, 0.9]);
        let err = max_rel_error(&[base.clone(), Tensor::scalar(0.6)], 1e-6, 1e-8, |_, v| {
            v[0].signed_pow(v[1]).square().sum() + v[0].abs().add_scalar(0.1).pow(v[1]).sum()
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn structural_ops() {
        let err = max_rel_error(&[t(4, 2, 0.4), t(2, 2, 0.8)], 1e-6, 1e-8, |_, v| {
            let a = Var::concat_rows(&[v[0], v[1]]);
            let b = Var::concat_cols(&[a, a.scale(2.0)]);
            let c = b.slice(1..5, 1..3).repeat_rows(2).gather_rows(&[0, 3, 3, 7]);
            let d = c.reshape(2, 4).transpose().block_max_rows(2);
            d.square().sum() + c.leaky_relu(0.2).sum()
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn nearest_neighbor_distance_gradient() {
        let err = max_rel_error(&[t(6, 3, 0.1), t(5, 3, 2.3)], 1e-6, 1e-8, |_, v| {
            v[0].nn_sqdist(v[1]).mean() + v[1].nn_sqdist(v[0]).sum()
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn quaternion_ops_gradient() {
        let q = Tensor::row(&[0.9, -0.3, 0.5, 0.2]);
        let x = t(4, 3, 0.7);
        let err = max_rel_error(&[q, x], 1e-6, 1e-8, |_, v| {
            let r = v[0].normalize_rows(1e-8, vec![1.0, 0.0, 0.0, 0.0]).quat_to_rot();
            v[1].matmul(r.transpose()).cos_like().sum()
        });
        assert!(err < 1e-6, "{err}");
    }

    impl<'t> Var<'t> {
        fn cos_like(self) -> Var<'t> {
            self.unary(f64::cos, |x, _| -x.sin())
        }
    }

    #[test]
    fn untracked_constants_get_no_gradient() {
        let tape = Tape::new();
        let a = tape.var(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(3.0));
        let out = a * c;
        let g = tape.backward(out);
        assert_eq!(g.wrt(a).item(), 3.0);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn normalize_rows_uses_fallback_for_tiny_rows() {
        let tape = Tape::new();
        let q = tape.var(Tensor::zeros(1, 4));
        let n = q.normalize_rows(1e-8, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(n.value().data(), &[1.0, 0.0, 0.0, 0.0]);
        let g = tape.backward(n.sum());
        assert_eq!(g.wrt(q).data(), &[0.0; 4]);
    }
}
