//! Reverse-mode automatic differentiation over [`Array`] values.
//!
//! A [`Graph`] is an arena of nodes built fresh for every forward pass. Each
//! node records its value, the operation that produced it and its parent
//! nodes. Parents always precede children in the arena, so a reverse sweep
//! over node indices is a valid topological order for [`Graph::backward`].
//!
//! Image-like tensors are channel-first: `[C, H, W]`.

use crate::error::{Error, Result};
use crate::tensor::{Array, Real};

/// Epsilon added to each norm in the cosine denominator. Treated as constant
/// by the gradient.
pub const COSINE_EPS: f64 = 1e-8;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation identifier recorded on every node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Param,
    Conv2d,
    Relu,
    Linear,
    MeanPool,
    MaskedAvgPool,
    Softmax,
    CosinePairwise,
    CosineRowwise,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddConst,
    Log,
    Sum,
    Mean,
    Pick,
    Concat,
    Reshape,
    Transpose,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Input,
    Param,
    Conv2d { pad: usize },
    Relu,
    Linear,
    MeanPool { kh: usize, kw: usize },
    MaskedAvgPool { mask: Vec<T>, total: T },
    Softmax { axis: usize },
    CosinePairwise,
    CosineRowwise,
    Add,
    Sub,
    Mul,
    Div,
    Scale(T),
    AddConst,
    Log,
    Sum,
    Mean,
    Pick { index: Vec<usize> },
    Concat,
    Reshape,
    Transpose,
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Param => OpKind::Param,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu => OpKind::Relu,
            Op::Linear => OpKind::Linear,
            Op::MeanPool { .. } => OpKind::MeanPool,
            Op::MaskedAvgPool { .. } => OpKind::MaskedAvgPool,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::CosinePairwise => OpKind::CosinePairwise,
            Op::CosineRowwise => OpKind::CosineRowwise,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Div => OpKind::Div,
            Op::Scale(_) => OpKind::Scale,
            Op::AddConst => OpKind::AddConst,
            Op::Log => OpKind::Log,
            Op::Sum => OpKind::Sum,
            Op::Mean => OpKind::Mean,
            Op::Pick { .. } => OpKind::Pick,
            Op::Concat => OpKind::Concat,
            Op::Reshape => OpKind::Reshape,
            Op::Transpose => OpKind::Transpose,
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    parents: Vec<Var>,
}

/// Computation graph. Confined to one thread while being built and swept.
#[derive(Clone, Debug, Default)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar root with respect to every node of a graph.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Array<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`; zeros when `v` does not reach the root.
    pub fn get(&self, v: Var) -> Array<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, parents: Vec<Var>) -> Var {
        self.nodes.push(Node { value, op, parents });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; receives a gradient but is not a parameter.
    pub fn input(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Input, Vec::new())
    }

    pub fn param(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Param, Vec::new())
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn parents(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].parents
    }

    // ---------------------------------------------------------------------
    // Forward operations
    // ---------------------------------------------------------------------

    /// Same-padded, stride-1 convolution. `x: [Cin,H,W]`, `w: [Cout,Cin,k,k]`
    /// with odd `k`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 3 || ws.len() != 4 || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(mismatch("conv2d", xs, ws));
        }
        if ws[1] != xs[0] {
            return Err(mismatch("conv2d", xs, ws));
        }
        if bs != [ws[0]] {
            return Err(mismatch("conv2d", ws, bs));
        }
        let (ci, h, wd) = (xs[0], xs[1], xs[2]);
        let (co, k) = (ws[0], ws[2]);
        let pad = k / 2;
        let hw = h * wd;
        let ck = ci * k * k;
        let cols = im2col(self.value(x).data(), ci, h, wd, k);
        let bv = self.value(b).data();
        let mut out: Vec<T> = (0..co).flat_map(|o| std::iter::repeat(bv[o]).take(hw)).collect();
        let sk = ck as isize;
        let shw = hw as isize;
        T::gemm(co, ck, hw, self.value(w).data(), (sk, 1), &cols, (shw, 1), T::one(), &mut out, (shw, 1));
        let value = Array::new([co, h, wd], out)?;
        Ok(self.push(value, Op::Conv2d { pad }, vec![x, w, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu, vec![x])
    }

    /// `x: [N,din]`, `w: [dout,din]`, `b: [dout]` → `x·wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(mismatch("linear", xs, ws));
        }
        if bs != [ws[0]] {
            return Err(mismatch("linear", ws, bs));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let (xv, wv, bv) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut out = vec![T::zero(); n * dout];
        for r in 0..n {
            let xr = &xv[r * din..(r + 1) * din];
            for o in 0..dout {
                let wr = &wv[o * din..(o + 1) * din];
                let mut acc = bv[o];
                for (a, b) in xr.iter().zip(wr) {
                    acc += *a * *b;
                }
                out[r * dout + o] = acc;
            }
        }
        let value = Array::new([n, dout], out)?;
        Ok(self.push(value, Op::Linear, vec![x, w, b]))
    }

    /// Non-overlapping `kh×kw` average pooling of a `[C,H,W]` tensor. With
    /// `kh = H, kw = W` this is the global mean pool, giving `[C,1,1]`.
    pub fn mean_pool(&mut self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || kh == 0 || kw == 0 || xs[1] % kh != 0 || xs[2] % kw != 0 {
            return Err(mismatch("mean-pool", &xs, &[kh, kw]));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (oh, ow) = (h / kh, w / kw);
        let count = T::from_usize(kh * kw).unwrap();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = T::zero();
                    for u in 0..kh {
                        let row = (ch * h + i * kh + u) * w + j * kw;
                        for &v in &xv[row..row + kw] {
                            acc += v;
                        }
                    }
                    out[(ch * oh + i) * ow + j] = acc / count;
                }
            }
        }
        let value = Array::new([c, oh, ow], out)?;
        Ok(self.push(value, Op::MeanPool { kh, kw }, vec![x]))
    }

    /// Masked average pooling: `Σ_hw m·x[c] / Σ_hw m` for `x: [C,H,W]` and a
    /// constant nonnegative mask `[H,W]`. Returns `[C]`.
    pub fn masked_avg_pool(&mut self, x: Var, mask: &Array<T>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || mask.shape() != [xs[1], xs[2]] {
            return Err(mismatch("masked-average-pool", &xs, mask.shape()));
        }
        let mut total = T::zero();
        for &m in mask.data() {
            total += m;
        }
        if total <= T::zero() {
            return Err(Error::EmptyMask);
        }
        let hw = xs[1] * xs[2];
        let xv = self.value(x).data();
        let md = mask.data();
        let out: Vec<T> = (0..xs[0])
            .map(|c| {
                let mut acc = T::zero();
                for (&m, &v) in md.iter().zip(&xv[c * hw..(c + 1) * hw]) {
                    acc += m * v;
                }
                acc / total
            })
            .collect();
        let value = Array::new([xs[0]], out)?;
        Ok(self.push(
            value,
            Op::MaskedAvgPool {
                mask: md.to_vec(),
                total,
            },
            vec![x],
        ))
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for shape {xs:?}"),
            ));
        }
        let (outer, n, inner) = split_axis(&xs, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mut max = T::neg_infinity();
                for k in 0..n {
                    max = max.max(xv[at(k)]);
                }
                let mut z = T::zero();
                for k in 0..n {
                    let e = (xv[at(k)] - max).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[at(k)] = out[at(k)] / z;
                }
            }
        }
        let value = Array::new(xs, out)?;
        Ok(self.push(value, Op::Softmax { axis }, vec![x]))
    }

    /// Cosine similarity of every row of `a: [N,d]` with every row of
    /// `b: [M,d]`, giving `[N,M]`.
    pub fn cosine_pairwise(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[1] {
            return Err(mismatch("cosine-similarity", as_, bs));
        }
        let (n, m, d) = (as_[0], bs[0], as_[1]);
        let eps = T::lit(COSINE_EPS);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let an = row_norms(av, d);
        let bn = row_norms(bv, d);
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let ar = &av[i * d..(i + 1) * d];
            for j in 0..m {
                let br = &bv[j * d..(j + 1) * d];
                out[i * m + j] = dot(ar, br) / ((an[i] + eps) * (bn[j] + eps));
            }
        }
        let value = Array::new([n, m], out)?;
        Ok(self.push(value, Op::CosinePairwise, vec![a, b]))
    }

    /// Row-matched cosine similarity of `a: [N,d]` and `b: [N,d]`, giving `[N]`.
    pub fn cosine_rowwise(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if as_.len() != 2 || as_ != bs {
            return Err(mismatch("cosine-similarity", as_, bs));
        }
        let (n, d) = (as_[0], as_[1]);
        let eps = T::lit(COSINE_EPS);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let an = row_norms(av, d);
        let bn = row_norms(bv, d);
        let out = (0..n)
            .map(|i| {
                dot(&av[i * d..(i + 1) * d], &bv[i * d..(i + 1) * d])
                    / ((an[i] + eps) * (bn[i] + eps))
            })
            .collect();
        let value = Array::new([n], out)?;
        Ok(self.push(value, Op::CosineRowwise, vec![a, b]))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op<T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if as_ != bs {
            return Err(mismatch(name, as_, bs));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Array::new(as_.to_vec(), data)?;
        Ok(self.push(value, op, vec![a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div, "div", |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::lit(factor);
        let value = self.value(x).map(|v| v * f);
        self.push(value, Op::Scale(f), vec![x])
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddConst, vec![x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.ln());
        self.push(value, Op::Log, vec![x])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        self.push(Array::scalar(acc), Op::Sum, vec![x])
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut acc = T::zero();
        for &v in xv.data() {
            acc += v;
        }
        let n = T::from_usize(xv.len().max(1)).unwrap();
        self.push(Array::scalar(acc / n), Op::Mean, vec![x])
    }

    /// Gathers elements at flat row-major `index` positions into a 1-d array.
    pub fn pick(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::invalid(
                "pick",
                format!("index {bad} out of range for {} elements", xv.len()),
            ));
        }
        let data: Vec<T> = index.iter().map(|&i| xv.data()[i]).collect();
        let value = Array::new([data.len()], data)?;
        Ok(self.push(value, Op::Pick { index }, vec![x]))
    }

    /// Concatenation along axis 0. Trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no operands"))?;
        let tail = self.shape(*first).get(1..).unwrap_or(&[]).to_vec();
        if self.shape(*first).is_empty() {
            return Err(Error::invalid("concat", "scalar operand"));
        }
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(mismatch("concat", self.shape(*first), s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let value = Array::new(shape, data)?;
        Ok(self.push(value, Op::Concat, parts.to_vec()))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape, vec![x]))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(Error::invalid(
                "transpose",
                format!("rank-2 operand required, got {xs:?}"),
            ));
        }
        let (r, c) = (xs[0], xs[1]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let value = Array::new([c, r], out)?;
        Ok(self.push(value, Op::Transpose, vec![x]))
    }

    // ---------------------------------------------------------------------
    // Reverse sweep
    // ---------------------------------------------------------------------

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array::full(rv.shape().to_vec(), T::one()));

        for idx in (0..=root.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let contribs = self.vjp(node, &gy);
            grads[idx] = Some(gy);
            for (parent, g) in contribs {
                match &mut grads[parent.0] {
                    Some(acc) => acc.axpy(T::one(), &g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn vjp(&self, node: &Node<T>, gy: &Array<T>) -> Vec<(Var, Array<T>)> {
        let p = &node.parents;
        let val = |v: Var| self.value(v);
        let g = gy.data();
        match &node.op {
            Op::Input | Op::Param => Vec::new(),
            Op::Conv2d { pad } => self.conv2d_vjp(p, g, *pad),
            Op::Relu => {
                let x = val(p[0]);
                let data = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![(p[0], same_shape(x, data))]
            }
            Op::Linear => {
                let (x, w) = (val(p[0]), val(p[1]));
                let (n, din, dout) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                let (xv, wv) = (x.data(), w.data());
                let mut dx = vec![T::zero(); n * din];
                let mut dw = vec![T::zero(); dout * din];
                let mut db = vec![T::zero(); dout];
                for r in 0..n {
                    for o in 0..dout {
                        let go = g[r * dout + o];
                        db[o] += go;
                        let wr = &wv[o * din..(o + 1) * din];
                        let xr = &xv[r * din..(r + 1) * din];
                        for i in 0..din {
                            dx[r * din + i] += go * wr[i];
                            dw[o * din + i] += go * xr[i];
                        }
                    }
                }
                vec![
                    (p[0], same_shape(x, dx)),
                    (p[1], same_shape(w, dw)),
                    (p[2], same_shape(val(p[2]), db)),
                ]
            }
            Op::MeanPool { kh, kw } => {
                let x = val(p[0]);
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (oh, ow) = (h / kh, w / kw);
                let count = T::from_usize(kh * kw).unwrap();
                let mut dx = vec![T::zero(); x.len()];
                for ch in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let gv = g[(ch * oh + i) * ow + j] / count;
                            for u in 0..*kh {
                                let row = (ch * h + i * kh + u) * w + j * kw;
                                dx[row..row + kw].iter_mut().for_each(|d| *d = gv);
                            }
                        }
                    }
                }
                vec![(p[0], same_shape(x, dx))]
            }
            Op::MaskedAvgPool { mask, total } => {
                let x = val(p[0]);
                let hw = mask.len();
                let mut dx = vec![T::zero(); x.len()];
                for (c, &gc) in g.iter().enumerate() {
                    let s = gc / *total;
                    for (d, &m) in dx[c * hw..(c + 1) * hw].iter_mut().zip(mask) {
                        *d = m * s;
                    }
                }
                vec![(p[0], same_shape(x, dx))]
            }
            Op::Softmax { axis } => {
                let y = &node.value;
                let (outer, n, inner) = split_axis(y.shape(), *axis);
                let yv = y.data();
                let mut dx = vec![T::zero(); yv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let mut s = T::zero();
                        for k in 0..n {
                            s += g[at(k)] * yv[at(k)];
                        }
                        for k in 0..n {
                            dx[at(k)] = yv[at(k)] * (g[at(k)] - s);
                        }
                    }
                }
                vec![(p[0], same_shape(y, dx))]
            }
            Op::CosinePairwise => {
                let (a, b) = (val(p[0]), val(p[1]));
                let (n, m, d) = (a.shape()[0], b.shape()[0], a.shape()[1]);
                let (av, bv) = (a.data(), b.data());
                let eps = T::lit(COSINE_EPS);
                let an = row_norms(av, d);
                let bn = row_norms(bv, d);
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); bv.len()];
                for i in 0..n {
                    let ar = &av[i * d..(i + 1) * d];
                    for j in 0..m {
                        let gij = g[i * m + j];
                        if gij == T::zero() {
                            continue;
                        }
                        let br = &bv[j * d..(j + 1) * d];
                        cosine_vjp(
                            ar,
                            br,
                            an[i],
                            bn[j],
                            eps,
                            gij,
                            &mut da[i * d..(i + 1) * d],
                            &mut db[j * d..(j + 1) * d],
                        );
                    }
                }
                vec![(p[0], same_shape(a, da)), (p[1], same_shape(b, db))]
            }
            Op::CosineRowwise => {
                let (a, b) = (val(p[0]), val(p[1]));
                let (n, d) = (a.shape()[0], a.shape()[1]);
                let (av, bv) = (a.data(), b.data());
                let eps = T::lit(COSINE_EPS);
                let an = row_norms(av, d);
                let bn = row_norms(bv, d);
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); bv.len()];
                for i in 0..n {
                    let r = i * d..(i + 1) * d;
                    let (dar, dbr) = (&mut da[r.clone()], &mut db[r.clone()]);
                    cosine_vjp(&av[r.clone()], &bv[r], an[i], bn[i], eps, g[i], dar, dbr);
                }
                vec![(p[0], same_shape(a, da)), (p[1], same_shape(b, db))]
            }
            Op::Add => vec![(p[0], gy.clone()), (p[1], gy.clone())],
            Op::Sub => vec![(p[0], gy.clone()), (p[1], gy.map(|v| -v))],
            Op::Mul => {
                let (a, b) = (val(p[0]), val(p[1]));
                let da = zip_map(g, b.data(), |gv, bv| gv * bv);
                let db = zip_map(g, a.data(), |gv, av| gv * av);
                vec![(p[0], same_shape(a, da)), (p[1], same_shape(b, db))]
            }
            Op::Div => {
                let (a, b) = (val(p[0]), val(p[1]));
                let da = zip_map(g, b.data(), |gv, bv| gv / bv);
                let db: Vec<T> = g
                    .iter()
                    .zip(a.data().iter().zip(b.data()))
                    .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                    .collect();
                vec![(p[0], same_shape(a, da)), (p[1], same_shape(b, db))]
            }
            Op::Scale(f) => vec![(p[0], gy.map(|v| v * *f))],
            Op::AddConst => vec![(p[0], gy.clone())],
            Op::Log => {
                let x = val(p[0]);
                let dx = zip_map(g, x.data(), |gv, xv| gv / xv);
                vec![(p[0], same_shape(x, dx))]
            }
            Op::Sum => {
                let x = val(p[0]);
                vec![(p[0], Array::full(x.shape().to_vec(), g[0]))]
            }
            Op::Mean => {
                let x = val(p[0]);
                let n = T::from_usize(x.len().max(1)).unwrap();
                vec![(p[0], Array::full(x.shape().to_vec(), g[0] / n))]
            }
            Op::Pick { index } => {
                let x = val(p[0]);
                let mut dx = vec![T::zero(); x.len()];
                for (&i, &gv) in index.iter().zip(g) {
                    dx[i] += gv;
                }
                vec![(p[0], same_shape(x, dx))]
            }
            Op::Concat => {
                let mut offset = 0;
                p.iter()
                    .map(|&part| {
                        let x = val(part);
                        let slice = g[offset..offset + x.len()].to_vec();
                        offset += x.len();
                        (part, same_shape(x, slice))
                    })
                    .collect()
            }
            Op::Reshape => {
                let x = val(p[0]);
                vec![(p[0], same_shape(x, g.to_vec()))]
            }
            Op::Transpose => {
                let x = val(p[0]);
                let (r, c) = (x.shape()[0], x.shape()[1]);
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                vec![(p[0], same_shape(x, dx))]
            }
        }
    }

    fn conv2d_vjp(&self, p: &[Var], g: &[T], pad: usize) -> Vec<(Var, Array<T>)> {
        let (x, w) = (self.value(p[0]), self.value(p[1]));
        let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, k) = (w.shape()[0], w.shape()[2]);
        debug_assert_eq!(pad, k / 2);
        let hw = h * wd;
        let ck = ci * k * k;
        let (sk, shw) = (ck as isize, hw as isize);
        let cols = im2col(x.data(), ci, h, wd, k);
        let db: Vec<T> = (0..co).map(|o| g[o * hw..(o + 1) * hw].iter().copied().sum()).collect();
        // dW = G · colsᵀ
        let mut dw = vec![T::zero(); co * ck];
        T::gemm(co, hw, ck, g, (shw, 1), &cols, (1, shw), T::zero(), &mut dw, (sk, 1));
        // dcols = Wᵀ · G
        let mut dcols = vec![T::zero(); ck * hw];
        T::gemm(ck, co, hw, w.data(), (1, sk), g, (shw, 1), T::zero(), &mut dcols, (shw, 1));
        let dx = col2im(&dcols, ci, h, wd, k);
        vec![
            (p[0], same_shape(x, dx)),
            (p[1], same_shape(w, dw)),
            (p[2], same_shape(self.value(p[2]), db)),
        ]
    }
}

/// Unfolds `x: [C,H,W]` into `[C·k·k, H·W]` patch columns with zero padding.
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = k / 2;
    let hw = h * w;
    let mut cols = vec![T::zero(); c * k * k * hw];
    for ch in 0..c {
        let xc = &x[ch * hw..(ch + 1) * hw];
        for u in 0..k {
            let (i0, i1, di) = window(h, u, pad);
            for v in 0..k {
                let (j0, j1, dj) = window(w, v, pad);
                if j0 == j1 {
                    continue;
                }
                let row = &mut cols[((ch * k + u) * k + v) * hw..][..hw];
                for i in i0..i1 {
                    let src = ((i as isize + di) as usize) * w;
                    let start = (src as isize + j0 as isize + dj) as usize;
                    row[i * w + j0..i * w + j1].copy_from_slice(&xc[start..start + j1 - j0]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds patch columns back, summing overlaps.
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = k / 2;
    let hw = h * w;
    let mut x = vec![T::zero(); c * hw];
    for ch in 0..c {
        let xc = &mut x[ch * hw..(ch + 1) * hw];
        for u in 0..k {
            let (i0, i1, di) = window(h, u, pad);
            for v in 0..k {
                let (j0, j1, dj) = window(w, v, pad);
                if j0 == j1 {
                    continue;
                }
                let row = &cols[((ch * k + u) * k + v) * hw..][..hw];
                for i in i0..i1 {
                    let src = ((i as isize + di) as usize) * w;
                    let start = (src as isize + j0 as isize + dj) as usize;
                    for (d, &s) in xc[start..start + j1 - j0].iter_mut().zip(&row[i * w + j0..i * w + j1]) {
                        *d += s;
                    }
                }
            }
        }
    }
    x
}

/// Valid output range `[lo, hi)` and input offset for kernel tap `u`.
fn window(extent: usize, u: usize, pad: usize) -> (usize, usize, isize) {
    let d = u as isize - pad as isize;
    let lo = (-d).max(0) as usize;
    let hi = (extent as isize - d).min(extent as isize).max(0) as usize;
    (lo.min(hi), hi, d)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn row_norms<T: Real>(v: &[T], d: usize) -> Vec<T> {
    v.chunks(d.max(1)).map(|r| dot(r, r).sqrt()).collect()
}

#[allow(clippy::too_many_arguments)]
fn cosine_vjp<T: Real>(
    a: &[T],
    b: &[T],
    na: T,
    nb: T,
    eps: T,
    g: T,
    da: &mut [T],
    db: &mut [T],
) {
    // c = <a,b> / ((|a|+eps)(|b|+eps))
    let (pa, pb) = (na + eps, nb + eps);
    let ab = dot(a, b);
    let inv = T::one() / (pa * pb);
    let ka = if na > T::zero() {
        ab * inv / (pa * na)
    } else {
        T::zero()
    };
    let kb = if nb > T::zero() {
        ab * inv / (pb * nb)
    } else {
        T::zero()
    };
    for i in 0..a.len() {
        da[i] += g * (b[i] * inv - ka * a[i]);
        db[i] += g * (a[i] * inv - kb * b[i]);
    }
}

fn same_shape<T: Real>(like: &Array<T>, data: Vec<T>) -> Array<T> {
    Array::new(like.shape().to_vec(), data).expect("gradient shape matches value")
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}
