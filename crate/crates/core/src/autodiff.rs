//! A small reverse-mode automatic differentiation tape over dense matrices.
//!
//! Every value is a row-major `Array2`; scalars are `1 x 1`. Binary
//! elementwise operations broadcast a `1 x d`, `n x 1` or `1 x 1` operand
//! against an `n x d` one, and the backward pass sums gradients back to the
//! operand's shape.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{concatenate, s, Array1, Array2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type of the tape (`f32` for training, `f64` for verification).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Recip(Var),
    Softplus(Var),
    Sigmoid(Var),
    LeakyRelu(Var, F),
    Clamp(Var, F, F),
    Transpose(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    TileRows(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<F>,
        inv_std: Array1<F>,
    },
    BernoulliKl(Var, Var),
}

#[derive(Debug, Clone)]
struct Node<F> {
    value: Array2<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Array2<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Array2<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Result of a training-mode batch normalization: the output and the batch statistics.
#[derive(Debug, Clone)]
pub struct BatchStats<F> {
    pub mean: Array1<F>,
    /// Biased (population) variance.
    pub var: Array1<F>,
    pub rows: usize,
}

#[derive(Debug, Default, Clone)]
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

fn reduce_to<F: Real>(g: Array2<F>, shape: (usize, usize)) -> Array2<F> {
    let (gr, gc) = g.dim();
    let mut out = g;
    if shape.0 == 1 && gr != 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && gc != 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    out
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("incompatible shapes {a:?} and {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn broadcast<F: Real>(x: &Array2<F>, shape: (usize, usize)) -> Array2<F> {
    x.broadcast(shape)
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {shape:?}", x.dim()))
        .to_owned()
}

pub(crate) fn softplus<F: Real>(x: F) -> F {
    // log(1 + e^x) without overflow
    if x > F::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `q log(q/p) + (1-q) log((1-q)/(1-p))` with `0 log 0 = 0`.
pub(crate) fn bernoulli_kl<F: Real>(q: F, p: F) -> F {
    let term = |a: F, b: F| {
        if a == F::zero() {
            F::zero()
        } else {
            a * (a.ln() - b.ln())
        }
    };
    term(q, p) + term(F::one() - q, F::one() - p)
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> F {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "not a scalar");
        val[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, value: F) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// A leaf whose gradient is tracked when `trainable` is set.
    pub fn leaf(&mut self, value: Array2<F>, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    fn unary(&mut self, a: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let value = self.value(a).mapv(f);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(va.dim(), vb.dim());
        let mut out = Array2::zeros(shape);
        {
            let ba = va.broadcast(shape).expect("broadcast");
            let bb = vb.broadcast(shape).expect("broadcast");
            Zip::from(&mut out).and(&ba).and(&bb).for_each(|o, &x, &y| *o = f(x, y));
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, k: F) -> Var {
        self.unary(a, Op::Scale(a, k), |x| x * k)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -F::one())
    }

    pub fn add_scalar(&mut self, a: Var, k: F) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + k)
    }

    /// `k - a`
    pub fn rsub_scalar(&mut self, k: F, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, k)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), |x| x.ln())
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), |x| x.sqrt())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), |x| x.recip())
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: F) -> Var {
        self.unary(
            a,
            Op::LeakyRelu(a, slope),
            |x| {
                if x > F::zero() {
                    x
                } else {
                    x * slope
                }
            },
        )
    }

    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.max(lo).min(hi))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng)
    }

    /// Sum over rows: `n x d -> 1 x d`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(value, Op::SumRows(a), ng)
    }

    /// Sum over columns: `n x d -> n x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(value, Op::SumCols(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, F::one() / F::c(n as f64))
    }

    /// Stack `times` copies of `a` on top of each other.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Var {
        if times == 1 {
            return a;
        }
        let v = self.value(a);
        let views: Vec<_> = (0..times).map(|_| v.view()).collect();
        let value = concatenate(Axis(0), &views).expect("tile");
        let ng = self.ng(a);
        self.push(value, Op::TileRows(a, times), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("row concat");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("column concat");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceRows(a, start), ng)
    }

    /// Training-mode batch normalization over the rows of `x`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> (Var, BatchStats<F>) {
        let xv = self.value(x);
        let rows = xv.nrows();
        let n = F::c(rows as f64);
        let mean = xv.sum_axis(Axis(0)) / n;
        let centered = xv - &mean.view().insert_axis(Axis(0));
        let var = centered.mapv(|c| c * c).sum_axis(Axis(0)) / n;
        let inv_std = var.mapv(|v| (v + eps).sqrt().recip());
        let xhat = &centered * &inv_std.view().insert_axis(Axis(0));
        let out = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        );
        (v, BatchStats { mean, var, rows })
    }

    /// Elementwise Bernoulli KL divergence `KL(Ber(q) || Ber(p))`.
    pub fn bernoulli_kl(&mut self, q: Var, p: Var) -> Var {
        self.binary(q, p, Op::BernoulliKl(q, p), bernoulli_kl)
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<F>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.local_grads(node, &g);
            for (var, contrib) in contributions {
                if !self.ng(var) {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn local_grads(&self, node: &Node<F>, g: &Array2<F>) -> Vec<(Var, Array2<F>)> {
        let val = |v: Var| self.value(v);
        let shp = |v: Var| self.value(v).dim();
        let out = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let mut res = Vec::with_capacity(2);
                if self.ng(*a) {
                    res.push((*a, g.dot(&val(*b).t())));
                }
                if self.ng(*b) {
                    res.push((*b, val(*a).t().dot(g)));
                }
                res
            }
            Op::Add(a, b) => vec![(*a, reduce_to(g.clone(), shp(*a))), (*b, reduce_to(g.clone(), shp(*b)))],
            Op::Sub(a, b) => vec![
                (*a, reduce_to(g.clone(), shp(*a))),
                (*b, reduce_to(g.mapv(|x| -x), shp(*b))),
            ],
            Op::Mul(a, b) => {
                let mut res = Vec::with_capacity(2);
                if self.ng(*a) {
                    let gb = g * &broadcast(val(*b), g.dim());
                    res.push((*a, reduce_to(gb, shp(*a))));
                }
                if self.ng(*b) {
                    let ga = g * &broadcast(val(*a), g.dim());
                    res.push((*b, reduce_to(ga, shp(*b))));
                }
                res
            }
            Op::Div(a, b) => {
                let mut res = Vec::with_capacity(2);
                let bv = broadcast(val(*b), g.dim());
                if self.ng(*a) {
                    res.push((*a, reduce_to(g / &bv, shp(*a))));
                }
                if self.ng(*b) {
                    // d(a/b)/db = -out / b
                    let gb = -(g * out) / &bv;
                    res.push((*b, reduce_to(gb, shp(*b))));
                }
                res
            }
            Op::Scale(a, k) => vec![(*a, g.mapv(|x| x * *k))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Exp(a) => vec![(*a, g * out)],
            Op::Ln(a) => vec![(*a, g / val(*a))],
            Op::Sqrt(a) => vec![(*a, Zip::from(g).and(out).map_collect(|&gi, &o| gi / (o + o)))],
            Op::Square(a) => vec![(*a, Zip::from(g).and(val(*a)).map_collect(|&gi, &x| gi * (x + x)))],
            Op::Recip(a) => vec![(*a, Zip::from(g).and(out).map_collect(|&gi, &o| -gi * o * o))],
            Op::Softplus(a) => vec![(*a, Zip::from(g).and(val(*a)).map_collect(|&gi, &x| gi * sigmoid(x)))],
            Op::Sigmoid(a) => vec![(*a, Zip::from(g).and(out).map_collect(|&gi, &o| gi * o * (F::one() - o)))],
            Op::LeakyRelu(a, slope) => vec![(
                *a,
                Zip::from(g)
                    .and(val(*a))
                    .map_collect(|&gi, &x| if x > F::zero() { gi } else { gi * *slope }),
            )],
            Op::Clamp(a, lo, hi) => vec![(
                *a,
                Zip::from(g)
                    .and(val(*a))
                    .map_collect(|&gi, &x| if x < *lo || x > *hi { F::zero() } else { gi }),
            )],
            Op::Transpose(a) => vec![(*a, g.t().to_owned())],
            Op::SumAll(a) => vec![(*a, Array2::from_elem(shp(*a), g[[0, 0]]))],
            Op::SumRows(a) => vec![(*a, broadcast(g, shp(*a)))],
            Op::SumCols(a) => vec![(*a, broadcast(g, shp(*a)))],
            Op::TileRows(a, times) => {
                let rows = shp(*a).0;
                let mut acc = g.slice(s![0..rows, ..]).to_owned();
                for t in 1..*times {
                    acc += &g.slice(s![t * rows..(t + 1) * rows, ..]);
                }
                vec![(*a, acc)]
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                parts
                    .iter()
                    .map(|p| {
                        let rows = shp(*p).0;
                        let part = g.slice(s![start..start + rows, ..]).to_owned();
                        start += rows;
                        (*p, part)
                    })
                    .collect()
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                parts
                    .iter()
                    .map(|p| {
                        let cols = shp(*p).1;
                        let part = g.slice(s![.., start..start + cols]).to_owned();
                        start += cols;
                        (*p, part)
                    })
                    .collect()
            }
            Op::SliceRows(a, start) => {
                let mut full = Array2::zeros(shp(*a));
                let rows = g.nrows();
                full.slice_mut(s![*start..*start + rows, ..]).assign(g);
                vec![(*a, full)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let mut res = Vec::with_capacity(3);
                if self.ng(*gamma) {
                    res.push((*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0))));
                }
                if self.ng(*beta) {
                    res.push((*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0))));
                }
                if self.ng(*x) {
                    let n = F::c(g.nrows() as f64);
                    let dxhat = g * val(*gamma);
                    let sum_d = dxhat.sum_axis(Axis(0));
                    let sum_dx = (&dxhat * xhat).sum_axis(Axis(0));
                    let mut dx = dxhat.mapv(|v| v * n);
                    dx -= &sum_d.view().insert_axis(Axis(0));
                    dx -= &(xhat * &sum_dx.view().insert_axis(Axis(0)));
                    dx *= &inv_std.mapv(|s| s / n).view().insert_axis(Axis(0));
                    res.push((*x, dx));
                }
                res
            }
            Op::BernoulliKl(q, p) => {
                let shape = g.dim();
                let qv = broadcast(val(*q), shape);
                let pv = broadcast(val(*p), shape);
                let one = F::one();
                let mut res = Vec::with_capacity(2);
                if self.ng(*q) {
                    let gq = Zip::from(g)
                        .and(&qv)
                        .and(&pv)
                        .map_collect(|&gi, &qi, &pi| gi * ((qi / pi).ln() - ((one - qi) / (one - pi)).ln()));
                    res.push((*q, reduce_to(gq, shp(*q))));
                }
                if self.ng(*p) {
                    let gp = Zip::from(g)
                        .and(&qv)
                        .and(&pv)
                        .map_collect(|&gi, &qi, &pi| gi * (-qi / pi + (one - qi) / (one - pi)));
                    res.push((*p, reduce_to(gp, shp(*p))));
                }
                res
            }
        }
    }
}
