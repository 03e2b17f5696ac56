//! Reverse-mode automatic differentiation on a recording tape.
//!
//! Every backward rule is expressed with the same recorded operations as the
//! forward pass, so a gradient returned by [`Tape::grad`] is itself a [`Var`]
//! that can be differentiated again. The critic's gradient penalty relies on
//! this: it differentiates the norm of an input gradient with respect to the
//! critic's parameters.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::tensor::{conv2d, conv2d_input_grad, conv2d_weight_grad, ConvGeom, Tensor};

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Tanh(usize),
    Powf(usize, f64),
    SqrtOrZero(usize),
    RecipOrZero(usize),
    /// Elementwise product with a constant (ReLU masks, signs, leaky slopes).
    Mask(usize, Rc<Tensor>),
    Clamp(usize, f64, f64),
    Reshape(usize),
    /// Input viewed as `[outer, kept, inner]`, summed over `outer` and `inner`.
    ReduceSum { x: usize, outer: usize, inner: usize },
    /// Input viewed as `[kept]`, replicated to `[outer, kept, inner]`.
    Expand { x: usize, outer: usize, inner: usize },
    Conv { x: usize, w: usize, geom: ConvGeom },
    ConvInputGrad { g: usize, w: usize, geom: ConvGeom },
    ConvWeightGrad { x: usize, g: usize, geom: ConvGeom },
    /// Concatenation along axis 1.
    Concat(usize, usize),
    /// Slice `[start, start + len)` of axis 1.
    Narrow { x: usize, start: usize },
    /// Zero-padding along axis 1 placing the input at `start` in `total` slots.
    Pad { x: usize, start: usize },
    /// Row-wise log-sum-exp of a `[N, C]` tensor.
    LogSumExpRows(usize),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match *self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Concat(a, b) => vec![a, b],
            Scale(a, _) | AddScalar(a) | Exp(a) | Tanh(a) | Powf(a, _) | SqrtOrZero(a)
            | RecipOrZero(a) | Clamp(a, _, _) | Reshape(a) | LogSumExpRows(a) => vec![a],
            Mask(a, _) => vec![a],
            ReduceSum { x, .. } | Expand { x, .. } | Narrow { x, .. } | Pad { x, .. } => vec![x],
            Conv { x, w, .. } => vec![x, w],
            ConvInputGrad { g, w, .. } => vec![g, w],
            ConvWeightGrad { x, g, .. } => vec![x, g],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a recorded value.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
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

    /// A leaf that gradients can be taken with respect to.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push_node(Rc::new(value), Op::Leaf, requires_grad)
    }

    fn push_node(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        self.push_node(Rc::new(value), op, requires_grad)
    }

    fn value_rc(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Gradients of the one-element `output` with respect to each of `wrt`.
    ///
    /// Inputs `output` does not depend on receive an all-zero constant.
    pub fn grad<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Vec<Var<'t>> {
        let out = output.id;
        assert_eq!(self.value_rc(out).numel(), 1, "grad of a non-scalar output");

        let mut needed = vec![false; out + 1];
        {
            let nodes = self.nodes.borrow();
            for w in wrt.iter().filter(|w| w.id <= out) {
                needed[w.id] = true;
            }
            for i in 0..=out {
                if !needed[i] && nodes[i].op.inputs().iter().any(|&j| needed[j]) {
                    needed[i] = true;
                }
            }
        }

        let mut adj: Vec<Option<Var<'t>>> = vec![None; out + 1];
        let shape = self.value_rc(out).shape().to_vec();
        adj[out] = Some(self.constant(Tensor::ones(&shape)));

        for i in (0..=out).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = adj[i] else { continue };
            let op = self.nodes.borrow()[i].op.clone();
            for (j, contribution) in self.backward_rule(i, &op, g, &needed) {
                adj[j] = Some(match adj[j] {
                    None => contribution,
                    Some(prev) => prev + contribution,
                });
            }
        }

        wrt.iter()
            .map(|w| match adj.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(w.value().shape())),
            })
            .collect()
    }

    /// Vector-Jacobian products of node `i` for each needed input.
    fn backward_rule<'t>(&'t self, i: usize, op: &Op, g: Var<'t>, needed: &[bool]) -> Vec<(usize, Var<'t>)> {
        use Op::*;
        let y = self.var(i);
        let shape_of = |id: usize| self.value_rc(id).shape().to_vec();
        let mut out = Vec::with_capacity(2);
        let mut emit = |j: usize, f: &dyn Fn() -> Var<'t>| {
            if needed[j] {
                out.push((j, f()));
            }
        };
        match *op {
            Leaf => {}
            Add(a, b) => {
                emit(a, &|| g);
                emit(b, &|| g);
            }
            Sub(a, b) => {
                emit(a, &|| g);
                emit(b, &|| g.scale(-1.0));
            }
            Mul(a, b) => {
                emit(a, &|| g * self.var(b));
                emit(b, &|| g * self.var(a));
            }
            Scale(a, k) => emit(a, &|| g.scale(k)),
            AddScalar(a) => emit(a, &|| g),
            Exp(a) => emit(a, &|| g * y),
            Tanh(a) => emit(a, &|| g * (y * y).scale(-1.0).add_scalar(1.0)),
            Powf(a, p) => emit(a, &|| g * self.var(a).powf(p - 1.0).scale(p)),
            SqrtOrZero(a) => emit(a, &|| g * y.recip_or_zero().scale(0.5)),
            RecipOrZero(a) => emit(a, &|| g * (y * y).scale(-1.0)),
            Mask(a, ref m) => emit(a, &|| g.mask(Rc::clone(m))),
            Clamp(a, lo, hi) => emit(a, &|| {
                let inside = self.value_rc(a).map(|v| if v >= lo && v <= hi { 1.0 } else { 0.0 });
                g.mask(Rc::new(inside))
            }),
            Reshape(a) => emit(a, &|| g.reshape(&shape_of(a))),
            ReduceSum { x, outer, inner } => emit(x, &|| g.expand(outer, inner, &shape_of(x))),
            Expand { x, outer, inner } => emit(x, &|| g.reduce_sum(outer, inner, &shape_of(x))),
            Conv { x, w, geom } => {
                let xs = shape_of(x);
                emit(x, &|| g.conv_input_grad(self.var(w), geom, xs[2], xs[3]));
                emit(w, &|| self.var(x).conv_weight_grad(g, geom));
            }
            ConvInputGrad { g: up, w, geom } => {
                emit(up, &|| g.conv(self.var(w), geom));
                emit(w, &|| g.conv_weight_grad(self.var(up), geom));
            }
            ConvWeightGrad { x, g: up, geom } => {
                let xs = shape_of(x);
                emit(x, &|| self.var(up).conv_input_grad(g, geom, xs[2], xs[3]));
                emit(up, &|| self.var(x).conv(g, geom));
            }
            Concat(a, b) => {
                let ca = shape_of(a)[1];
                let cb = shape_of(b)[1];
                emit(a, &|| g.narrow(0, ca));
                emit(b, &|| g.narrow(ca, cb));
            }
            Narrow { x, start } => {
                let total = shape_of(x)[1];
                emit(x, &|| g.pad(start, total));
            }
            Pad { x, start, .. } => {
                let len = shape_of(x)[1];
                emit(x, &|| g.narrow(start, len));
            }
            LogSumExpRows(a) => emit(a, &|| {
                let s = shape_of(a);
                let lse = y.expand(1, s[1], &s);
                g.expand(1, s[1], &s) * (self.var(a) - lse).exp()
            }),
        }
        out
    }
}

fn broadcast_check(a: &Tensor, b: &Tensor, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_rc(self.id)
    }

    /// Borrow of the whole node list; keep short-lived.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        let nodes: Ref<'_, Vec<Node>> = self.tape.nodes.borrow();
        f(&nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'t> {
        let v = f(&self.value());
        self.tape.push(v, op)
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, k), |t| t.map(|v| v * k))
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |t| t.map(|v| v + k))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), |t| t.map(f64::exp))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), |t| t.map(f64::tanh))
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        self.unary(Op::Powf(self.id, p), |t| t.map(|v| v.powf(p)))
    }

    /// `√x`, whose derivative is taken as zero where `x = 0`.
    pub fn sqrt_or_zero(self) -> Var<'t> {
        self.unary(Op::SqrtOrZero(self.id), |t| t.map(f64::sqrt))
    }

    /// `1/x`, defined as zero where `x = 0`.
    pub fn recip_or_zero(self) -> Var<'t> {
        self.unary(Op::RecipOrZero(self.id), |t| t.map(|v| if v == 0.0 { 0.0 } else { 1.0 / v }))
    }

    pub fn mask(self, m: Rc<Tensor>) -> Var<'t> {
        let v = self.value();
        broadcast_check(&v, &m, "mask");
        let out = v.zip_map(&m, |a, b| a * b);
        self.tape.push(out, Op::Mask(self.id, m))
    }

    pub fn relu(self) -> Var<'t> {
        let m = self.value().map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        self.mask(Rc::new(m))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let m = self.value().map(|v| if v > 0.0 { 1.0 } else { slope });
        self.mask(Rc::new(m))
    }

    pub fn abs(self) -> Var<'t> {
        let m = self.value().map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
        self.mask(Rc::new(m))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp(self.id, lo, hi), |t| t.map(|v| v.clamp(lo, hi)))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        self.unary(Op::Reshape(self.id), |t| t.clone().reshaped(shape))
    }

    /// Sum over the leading `outer` and trailing `inner` extents; `shape` is
    /// the result shape and must hold the kept elements.
    pub fn reduce_sum(self, outer: usize, inner: usize, shape: &[usize]) -> Var<'t> {
        self.unary(Op::ReduceSum { x: self.id, outer, inner }, |t| {
            let kept = t.numel() / (outer * inner);
            assert_eq!(outer * kept * inner, t.numel(), "reduce_sum extents");
            let mut out = vec![0.0; kept];
            for block in t.data().chunks(kept * inner) {
                for (k, row) in block.chunks(inner).enumerate() {
                    out[k] += row.iter().sum::<f64>();
                }
            }
            Tensor::new(shape.to_vec(), out)
        })
    }

    /// Replicate to `[outer, kept, inner]`, reported with `shape`.
    pub fn expand(self, outer: usize, inner: usize, shape: &[usize]) -> Var<'t> {
        self.unary(Op::Expand { x: self.id, outer, inner }, |t| {
            let kept = t.numel();
            assert_eq!(outer * kept * inner, shape.iter().product::<usize>(), "expand extents");
            let mut out = Vec::with_capacity(outer * kept * inner);
            for _ in 0..outer {
                for &v in t.data() {
                    out.extend(std::iter::repeat_n(v, inner));
                }
            }
            Tensor::new(shape.to_vec(), out)
        })
    }

    pub fn sum(self) -> Var<'t> {
        let n = self.with_value(Tensor::numel);
        self.reduce_sum(n, 1, &[1])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.with_value(Tensor::numel);
        self.sum().scale(1.0 / n as f64)
    }

    pub fn conv(self, w: Var<'t>, geom: ConvGeom) -> Var<'t> {
        let v = conv2d(&self.value(), &w.value(), geom);
        self.tape.push(v, Op::Conv { x: self.id, w: w.id, geom })
    }

    /// Transposed convolution: the input-adjoint of `conv` at spatial size `h × w`.
    pub fn conv_input_grad(self, w: Var<'t>, geom: ConvGeom, h: usize, wd: usize) -> Var<'t> {
        let v = conv2d_input_grad(&self.value(), &w.value(), geom, h, wd);
        self.tape.push(v, Op::ConvInputGrad { g: self.id, w: w.id, geom })
    }

    pub fn conv_weight_grad(self, upstream: Var<'t>, geom: ConvGeom) -> Var<'t> {
        let v = conv2d_weight_grad(&self.value(), &upstream.value(), geom);
        self.tape.push(v, Op::ConvWeightGrad { x: self.id, g: upstream.id, geom })
    }

    /// Concatenate along axis 1 (channels).
    pub fn concat(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        assert!(sa[0] == sb[0] && sa[2..] == sb[2..], "concat shape mismatch {sa:?} vs {sb:?}");
        let ia: usize = sa[1..].iter().product();
        let ib: usize = sb[1..].iter().product();
        let mut data = Vec::with_capacity(a.numel() + b.numel());
        for n in 0..sa[0] {
            data.extend_from_slice(&a.data()[n * ia..(n + 1) * ia]);
            data.extend_from_slice(&b.data()[n * ib..(n + 1) * ib]);
        }
        let mut shape = sa.to_vec();
        shape[1] += sb[1];
        self.tape.push(Tensor::new(shape, data), Op::Concat(self.id, other.id))
    }

    pub fn narrow(self, start: usize, len: usize) -> Var<'t> {
        self.unary(Op::Narrow { x: self.id, start }, |t| {
            let s = t.shape();
            let inner: usize = s[2..].iter().product();
            let mut data = Vec::with_capacity(s[0] * len * inner);
            for n in 0..s[0] {
                let base = (n * s[1] + start) * inner;
                data.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            let mut shape = s.to_vec();
            shape[1] = len;
            Tensor::new(shape, data)
        })
    }

    pub fn pad(self, start: usize, total: usize) -> Var<'t> {
        self.unary(Op::Pad { x: self.id, start }, |t| {
            let s = t.shape();
            let inner: usize = s[2..].iter().product();
            let mut shape = s.to_vec();
            shape[1] = total;
            let mut out = Tensor::zeros(&shape);
            for n in 0..s[0] {
                let src = &t.data()[n * s[1] * inner..(n + 1) * s[1] * inner];
                out.data_mut()[(n * total + start) * inner..][..s[1] * inner].copy_from_slice(src);
            }
            out
        })
    }

    /// `log Σ_c exp(x[n, c])` for a `[N, C]` input, giving `[N]`.
    pub fn logsumexp_rows(self) -> Var<'t> {
        self.unary(Op::LogSumExpRows(self.id), |t| {
            let c = t.shape()[1];
            let out = t
                .data()
                .chunks(c)
                .map(|row| {
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
                })
                .collect::<Vec<_>>();
            Tensor::new(vec![t.shape()[0]], out)
        })
    }
}

macro_rules! binary_op {
    ($trait:ident, $method:ident, $variant:ident, $f:expr) => {
        impl<'t> std::ops::$trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                let (a, b) = (self.value(), rhs.value());
                broadcast_check(&a, &b, stringify!($method));
                let v = a.zip_map(&b, $f);
                self.tape.push(v, Op::$variant(self.id, rhs.id))
            }
        }
    };
}

binary_op!(Add, add, Add, |a, b| a + b);
binary_op!(Sub, sub, Sub, |a, b| a - b);
binary_op!(Mul, mul, Mul, |a, b| a * b);

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central differences of `f` at `x`.
    fn numeric(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.numel())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn check(x: &Tensor, build: &dyn for<'a> Fn(Var<'a>) -> Var<'a>) {
        let tape = Tape::new();
        let v = tape.param(x.clone());
        let out = build(v);
        let g = tape.grad(out, &[v])[0].value();
        let f = |t: &Tensor| {
            let tp = Tape::new();
            build(tp.constant(t.clone())).value().item()
        };
        for (a, n) in g.data().iter().zip(numeric(x, &f)) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn elementwise_rules_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3, 2, 2], &mut rng);
        check(&x, &|v| v.tanh().sum());
        check(&x, &|v| (v * v).exp().mean());
        check(&x, &|v| v.leaky_relu(0.01).scale(3.0).sum());
        check(&x, &|v| (v * v).add_scalar(0.5).powf(-0.5).sum());
        check(&x, &|v| (v * v).sum().sqrt_or_zero());
        check(&x, &|v| v.scale(0.7).clamp(-0.5, 0.5).sum());
        check(&x, &|v| v.abs().sum());
    }

    #[test]
    fn structural_rules_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 3, 2, 2], &mut rng);
        let w = random(&[2, 3, 3, 3], &mut rng);
        check(&x, &|v| (v.reduce_sum(2, 4, &[3]).expand(2, 4, &[2, 3, 2, 2]) * v).sum());
        check(&x, &|v| {
            let c = v.concat(v.narrow(1, 2));
            (c * c).sum()
        });
        check(&x, &|v| (v.pad(1, 5) * v.pad(1, 5)).narrow(0, 3).sum());
        check(&x, &|v| v.reshape(&[2, 12]).logsumexp_rows().sum());
        let wt = w.clone();
        check(&x, &move |v| {
            let wv = v.tape().constant(wt.clone());
            let y = v.conv(wv, ConvGeom::new(3, 1, 1));
            (y * y).sum()
        });
        let wt = random(&[3, 2, 4, 4], &mut rng);
        check(&random(&[1, 3, 2, 2], &mut rng), &move |v| {
            let wv = v.tape().constant(wt.clone());
            let y = v.conv_input_grad(wv, ConvGeom::new(4, 2, 1), 4, 4);
            (y * y).sum()
        });
    }

    #[test]
    fn second_order_through_convolution() {
        // d/dw ‖∂/∂x Σ conv(x, w)²‖² against differences of the first-order gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[1, 2, 4, 4], &mut rng);
        let w0 = random(&[2, 2, 4, 4], &mut rng);
        let geom = ConvGeom::new(4, 2, 1);
        let penalty = |w: &Tensor, grad_w: bool| -> (f64, Option<Tensor>) {
            let tape = Tape::new();
            let xv = tape.param(x.clone());
            let wv = tape.leaf(w.clone(), grad_w);
            let y = xv.conv(wv, geom);
            let out = (y * y).sum();
            let gx = tape.grad(out, &[xv])[0];
            let p = (gx * gx).sum();
            let g = grad_w.then(|| tape.grad(p, &[wv])[0].value().as_ref().clone());
            (p.value().item(), g)
        };
        let (_, analytic) = penalty(&w0, true);
        let analytic = analytic.unwrap();
        let numeric = numeric(&w0, &|w| penalty(w, false).0);
        for (a, n) in analytic.data().iter().zip(numeric) {
            assert!((a - n).abs() <= 1e-5 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn unreachable_inputs_get_zero_gradient() {
        let tape = Tape::new();
        let a = tape.param(Tensor::ones(&[3]));
        let b = tape.param(Tensor::ones(&[2]));
        let g = tape.grad(a.sum(), &[a, b]);
        assert_eq!(g[0].value().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(g[1].value().data(), &[0.0, 0.0]);
    }
}
