use super::{broadcast_index, broadcast_shape, gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, F),
    Offset(Var),
    Powf(Var, F),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Relu(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    /// Sum over the middle extent of an `outer × len × inner` view.
    Sum {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Concat {
        parts: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Broadcast(Var),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Append-only computation tape. Nodes are stored in creation order, which
/// is a topological order of the dataflow graph.
#[derive(Debug, Clone, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

/// Gradients produced by one [`Graph::backward`] call, kept for leaves only.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    /// Copies `t` in as a leaf, inheriting its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn variable(&mut self, shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, true))
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    pub fn scalar(&mut self, v: F) -> Var {
        self.push(vec![], vec![v], Op::Leaf, false)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(&sa, &sb)
            .ok_or_else(|| Error::shape(name, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let (va, vb) = (self.value(a), self.value(b));
        let value: Vec<F> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_index(&out, &sa);
            let ib = broadcast_index(&out, &sb);
            ia.iter().zip(&ib).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let shape = self.shape(x).to_vec();
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        self.push(shape, value, op, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn mul_scalar(&mut self, x: Var, s: F) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: F) -> Var {
        self.unary(x, |v| v + s, Op::Offset(x))
    }

    pub fn powf(&mut self, x: Var, p: F) -> Var {
        self.unary(x, |v| v.powf(p), Op::Powf(x, p))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Powf(x, F::of(2.0)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    fn check_nonnegative(&self, op: &'static str, x: Var) -> Result<()> {
        match self.value(x).iter().position(|&v| v < F::zero()) {
            Some(index) => Err(Error::Domain {
                op,
                index,
                value: self.value(x)[index].as_f64(),
            }),
            None => Ok(()),
        }
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.check_nonnegative("log", x)?;
        Ok(self.unary(x, |v| v.ln(), Op::Log(x)))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.check_nonnegative("sqrt", x)?;
        Ok(self.unary(x, |v| v.sqrt(), Op::Sqrt(x)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > F::zero() { v } else { F::zero() }, Op::Relu(x))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("operands must be 2-d, got {sa:?} and {sb:?}"),
            ));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: {sa:?} · {sb:?}"),
            ));
        }
        let mut value = vec![F::zero(); m * n];
        gemm(m, k, n, self.value(a), ta, self.value(b), tb, F::zero(), &mut value);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            vec![m, n],
            value,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true)
    }

    fn reduce(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "sum",
                format!("axis {axis} invalid for shape {shape:?}"),
            ));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x);
        let mut value = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut value[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let rg = self.rg(x);
        Ok(self.push(out_shape, value, Op::Sum { x, outer, len, inner }, rg))
    }

    /// Sum of every element, as a scalar (shape `[]`).
    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let total = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(
            vec![],
            vec![total],
            Op::Sum {
                x,
                outer: 1,
                len: n,
                inner: 1,
            },
            rg,
        )
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce(x, axis, keepdim)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.mul_scalar(s, F::one() / F::of(n as f64))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let s = self.reduce(x, axis, keepdim)?;
        let n = self.shape(x)[axis].max(1);
        Ok(self.mul_scalar(s, F::one() / F::of(n as f64)))
    }

    fn row_softmax(&self, x: Var, log: bool) -> Vec<F> {
        let d = last_dim(self.shape(x)).max(1);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            if log {
                let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
                row.iter_mut().for_each(|v| *v -= lse);
            } else {
                let mut total = F::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                row.iter_mut().for_each(|v| *v = *v / total);
            }
        }
        out
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let value = self.row_softmax(x, false);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, value, Op::Softmax(x), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let value = self.row_softmax(x, true);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, value, Op::LogSoftmax(x), rg)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} invalid for shape {base:?}"),
            ));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} incompatible with {base:?} on axis {axis}"),
                ));
            }
            let (_, len, inner) = axis_split(s, axis);
            widths.push(len * inner);
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.value(p)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total / inner.max(1);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            shape,
            value,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                widths,
            },
            rg,
        ))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x).to_vec();
        match broadcast_shape(&src, shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::shape(
                    "broadcast_to",
                    format!("cannot broadcast {src:?} to {shape:?}"),
                ))
            }
        }
        let map = broadcast_index(shape, &src);
        let v = self.value(x);
        let value = map.iter().map(|&i| v[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), value, Op::Broadcast(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} to {:?}", self.shape(x), shape),
            ));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), rg))
    }

    /// Reverse-mode sweep from a scalar `loss`. Each node on the path is
    /// visited once, in reverse creation order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, g: Vec<F>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Sums `g` (shaped like `out`) down to the broadcast source shape of `v`.
    fn unbroadcast(&self, g: &[F], out: &[usize], v: Var) -> Vec<F> {
        let target = self.shape(v);
        if target == out {
            return g.to_vec();
        }
        let map = broadcast_index(out, target);
        let mut r = vec![F::zero(); self.value(v).len()];
        for (gi, &src) in g.iter().zip(&map) {
            r[src] += *gi;
        }
        r
    }

    fn propagate(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let out = &node.shape;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        let r = self.unbroadcast(g, out, v);
                        self.accumulate(grads, v, r);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    let r = self.unbroadcast(g, out, *a);
                    self.accumulate(grads, *a, r);
                }
                if self.rg(*b) {
                    let neg: Vec<F> = g.iter().map(|&x| -x).collect();
                    let r = self.unbroadcast(&neg, out, *b);
                    self.accumulate(grads, *b, r);
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let div = matches!(node.op, Op::Div(..));
                let ia = broadcast_index(out, self.shape(*a));
                let ib = broadcast_index(out, self.shape(*b));
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let local: Vec<F> = g
                        .iter()
                        .zip(&ib)
                        .map(|(&gi, &j)| if div { gi / vb[j] } else { gi * vb[j] })
                        .collect();
                    let r = self.unbroadcast(&local, out, *a);
                    self.accumulate(grads, *a, r);
                }
                if self.rg(*b) {
                    let local: Vec<F> = g
                        .iter()
                        .zip(ia.iter().zip(&ib))
                        .map(|(&gi, (&i, &j))| {
                            if div {
                                -gi * va[i] / (vb[j] * vb[j])
                            } else {
                                gi * va[i]
                            }
                        })
                        .collect();
                    let r = self.unbroadcast(&local, out, *b);
                    self.accumulate(grads, *b, r);
                }
            }
            Op::Neg(x) => self.accumulate(grads, *x, g.iter().map(|&v| -v).collect()),
            Op::Scale(x, s) => self.accumulate(grads, *x, g.iter().map(|&v| v * *s).collect()),
            Op::Offset(x) | Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Powf(x, p) => {
                let xv = self.value(*x);
                let r = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &xi)| gi * *p * xi.powf(*p - F::one()))
                    .collect();
                self.accumulate(grads, *x, r);
            }
            Op::Exp(x) => {
                let r = g.iter().zip(&node.value).map(|(&gi, &y)| gi * y).collect();
                self.accumulate(grads, *x, r);
            }
            Op::Log(x) => {
                let r = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(&gi, &xi)| gi / xi)
                    .collect();
                self.accumulate(grads, *x, r);
            }
            Op::Sqrt(x) => {
                let half = F::of(0.5);
                let r = g
                    .iter()
                    .zip(&node.value)
                    .map(|(&gi, &y)| gi * half / y)
                    .collect();
                self.accumulate(grads, *x, r);
            }
            Op::Relu(x) => {
                let r = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(&gi, &xi)| if xi > F::zero() { gi } else { F::zero() })
                    .collect();
                self.accumulate(grads, *x, r);
            }
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                if self.rg(*a) {
                    let mut da = vec![F::zero(); m * k];
                    if *ta {
                        // stored k×m: op(b) · gᵀ
                        gemm(k, n, m, self.value(*b), *tb, g, true, F::zero(), &mut da);
                    } else {
                        gemm(m, n, k, g, false, self.value(*b), !*tb, F::zero(), &mut da);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![F::zero(); k * n];
                    if *tb {
                        // stored n×k: gᵀ · op(a)
                        gemm(n, m, k, g, true, self.value(*a), *ta, F::zero(), &mut db);
                    } else {
                        gemm(k, m, n, self.value(*a), !*ta, g, false, F::zero(), &mut db);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Sum {
                x,
                outer,
                len,
                inner,
            } => {
                let mut r = vec![F::zero(); outer * len * inner];
                for o in 0..*outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..*len {
                        let base = (o * len + l) * inner;
                        r[base..base + inner].copy_from_slice(src);
                    }
                }
                self.accumulate(grads, *x, r);
            }
            Op::Softmax(x) => {
                let d = last_dim(out).max(1);
                let mut r = vec![F::zero(); g.len()];
                for ((rr, gr), yr) in r.chunks_mut(d).zip(g.chunks(d)).zip(node.value.chunks(d)) {
                    let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((ri, &gi), &yi) in rr.iter_mut().zip(gr).zip(yr) {
                        *ri = yi * (gi - dot);
                    }
                }
                self.accumulate(grads, *x, r);
            }
            Op::LogSoftmax(x) => {
                let d = last_dim(out).max(1);
                let mut r = vec![F::zero(); g.len()];
                for ((rr, gr), lr) in r.chunks_mut(d).zip(g.chunks(d)).zip(node.value.chunks(d)) {
                    let total: F = gr.iter().copied().sum();
                    for ((ri, &gi), &li) in rr.iter_mut().zip(gr).zip(lr) {
                        *ri = gi - li.exp() * total;
                    }
                }
                self.accumulate(grads, *x, r);
            }
            Op::Concat {
                parts,
                outer,
                widths,
            } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if self.rg(p) {
                        let mut r = Vec::with_capacity(outer * w);
                        for o in 0..*outer {
                            let base = o * total + offset;
                            r.extend_from_slice(&g[base..base + w]);
                        }
                        self.accumulate(grads, p, r);
                    }
                    offset += w;
                }
            }
            Op::Broadcast(x) => {
                let r = self.unbroadcast(g, out, *x);
                self.accumulate(grads, *x, r);
            }
        }
    }
}
