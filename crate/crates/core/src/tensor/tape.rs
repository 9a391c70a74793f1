use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{matmul_raw, Tensor, TensorError};
use crate::scalar::Real;

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddRowBias(usize, usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Transpose(usize),
    Reshape(usize),
    Relu(usize),
    Sigmoid(usize),
    Softmax { x: usize, outer: usize, len: usize, inner: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Rc<Vec<T>>, inv_std: Rc<Vec<T>> },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom, n: usize },
    ConvT2d { x: usize, w: usize, b: Option<usize>, dims: (usize, usize, usize, usize) },
    MaxPool { x: usize, argmax: Rc<Vec<usize>> },
    Upsample2 { x: usize, planes: usize, h: usize, w: usize },
    RepeatChannels { x: usize, c: usize },
    ConcatChannels { a: usize, b: usize },
    ConcatCols(Vec<usize>),
    Sum(usize),
    Mse { pred: usize, target: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only record of a forward computation. Node ids increase in
/// evaluation order, so reverse id order is a valid topological order.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: &Var<'_, T>) -> Option<&[T]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like the variable (zeros if never reached).
    pub fn tensor(&self, v: &Var<'_, T>) -> Tensor<T> {
        let shape = v.shape();
        match self.get(v) {
            Some(g) => Tensor::new(&shape, g.to_vec()).unwrap(),
            None => Tensor::zeros(&shape),
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Trainable leaf.
    pub fn param(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf, false)
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Hash of every ReLU sign pattern and max-pool selection on the tape.
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let nodes = self.nodes.borrow();
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (id, n) in nodes.iter().enumerate() {
            match &n.op {
                Op::Relu(x) => {
                    id.hash(&mut h);
                    for v in nodes[*x].value.data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => {
                    id.hash(&mut h);
                    argmax.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var<'_, T>) -> Grads<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[out.id] = Some(vec![T::one(); nodes[out.id].value.len()]);
        for id in (0..=out.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.needs_grad {
                backprop(&nodes, &node.op, &node.value, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Grads { grads }
    }
}

fn accumulate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], id: usize, g: Vec<T>) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn backprop<T: Real>(
    nodes: &[Node<T>],
    op: &Op<T>,
    out: &Tensor<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let val = |id: usize| &nodes[id].value;
    let needs = |id: usize| nodes[id].needs_grad;
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.iter().map(|&v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if needs(*a) {
                accumulate(nodes, grads, *a, g.iter().zip(vb.data()).map(|(&x, &y)| x * y).collect());
            }
            if needs(*b) {
                accumulate(nodes, grads, *b, g.iter().zip(va.data()).map(|(&x, &y)| x * y).collect());
            }
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, g.iter().map(|&v| v * *c).collect()),
        Op::AddRowBias(x, b) => {
            accumulate(nodes, grads, *x, g.to_vec());
            if needs(*b) {
                let d = val(*b).len();
                let mut gb = vec![T::zero(); d];
                for row in g.chunks(d) {
                    gb.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
                }
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::MatMul { a, b, ta, tb } => {
            let (va, vb) = (val(*a), val(*b));
            let (ash, bsh) = ((va.shape()[0], va.shape()[1]), (vb.shape()[0], vb.shape()[1]));
            let (m, n) = (out.shape()[0], out.shape()[1]);
            if needs(*a) {
                let mut ga = vec![T::zero(); va.len()];
                if *ta {
                    matmul_raw(vb.data(), bsh, *tb, g, (m, n), true, &mut ga, false);
                } else {
                    matmul_raw(g, (m, n), false, vb.data(), bsh, !*tb, &mut ga, false);
                }
                accumulate(nodes, grads, *a, ga);
            }
            if needs(*b) {
                let mut gb = vec![T::zero(); vb.len()];
                if *tb {
                    matmul_raw(g, (m, n), true, va.data(), ash, *ta, &mut gb, false);
                } else {
                    matmul_raw(va.data(), ash, !*ta, g, (m, n), false, &mut gb, false);
                }
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            let mut gx = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    gx[j * r + i] = g[i * c + j];
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, g.to_vec()),
        Op::Relu(x) => {
            let vx = val(*x);
            accumulate(
                nodes,
                grads,
                *x,
                g.iter().zip(vx.data()).map(|(&d, &v)| if v > T::zero() { d } else { T::zero() }).collect(),
            );
        }
        Op::Sigmoid(x) => accumulate(
            nodes,
            grads,
            *x,
            g.iter().zip(out.data()).map(|(&d, &s)| d * s * (T::one() - s)).collect(),
        ),
        Op::Softmax { x, outer, len, inner } => {
            let y = out.data();
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..*outer {
                for j in 0..*inner {
                    let at = |i: usize| (o * len + i) * inner + j;
                    let dot: T = (0..*len).map(|i| g[at(i)] * y[at(i)]).sum();
                    for i in 0..*len {
                        gx[at(i)] = y[at(i)] * (g[at(i)] - dot);
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let gam = val(*gamma);
            let d = gam.len();
            let rows = xhat.len() / d;
            if needs(*gamma) || needs(*beta) {
                let mut gg = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                for r in 0..rows {
                    for k in 0..d {
                        gg[k] += g[r * d + k] * xhat[r * d + k];
                        gbeta[k] += g[r * d + k];
                    }
                }
                accumulate(nodes, grads, *gamma, gg);
                accumulate(nodes, grads, *beta, gbeta);
            }
            if needs(*x) {
                let dn = T::lit(d as f64);
                let mut gx = vec![T::zero(); rows * d];
                for r in 0..rows {
                    let dxh: Vec<T> = (0..d).map(|k| g[r * d + k] * gam.data()[k]).collect();
                    let mean_d: T = dxh.iter().copied().sum::<T>() / dn;
                    let mean_dx: T = (0..d).map(|k| dxh[k] * xhat[r * d + k]).sum::<T>() / dn;
                    for k in 0..d {
                        gx[r * d + k] = inv_std[r] * (dxh[k] - mean_d - xhat[r * d + k] * mean_dx);
                    }
                }
                accumulate(nodes, grads, *x, gx);
            }
        }
        Op::Conv2d { x, w, b, geom, n } => {
            let (vx, vw) = (val(*x), val(*w));
            let o = vw.shape()[0];
            let (dx, dw, db) =
                kernels::conv_backward(vx.data(), *n, geom, vw.data(), o, g, needs(*x), needs(*w));
            if let Some(dx) = dx {
                accumulate(nodes, grads, *x, dx);
            }
            accumulate(nodes, grads, *w, dw);
            if let Some(b) = b {
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::ConvT2d { x, w, b, dims } => {
            let (vx, vw) = (val(*x), val(*w));
            let o = vw.shape()[1];
            let (dx, dw, db) = kernels::conv_t_backward(vx.data(), *dims, vw.data(), o, g, needs(*x));
            if let Some(dx) = dx {
                accumulate(nodes, grads, *x, dx);
            }
            accumulate(nodes, grads, *w, dw);
            if let Some(b) = b {
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::MaxPool { x, argmax } => {
            let mut gx = vec![T::zero(); val(*x).len()];
            for (&k, &d) in argmax.iter().zip(g) {
                gx[k] += d;
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Upsample2 { x, planes, h, w } => {
            accumulate(nodes, grads, *x, kernels::upsample2_backward(g, *planes, *h, *w))
        }
        Op::RepeatChannels { x, c } => {
            let sx = val(*x).shape().to_vec();
            let (n, hw) = (sx[0], sx[2] * sx[3]);
            let mut gx = vec![T::zero(); n * hw];
            for b in 0..n {
                for ch in 0..*c {
                    for p in 0..hw {
                        gx[b * hw + p] += g[(b * c + ch) * hw + p];
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::ConcatChannels { a, b } => {
            let (sa, sb) = (val(*a).shape().to_vec(), val(*b).shape().to_vec());
            let hw = sa[2] * sa[3];
            let (la, lb) = (sa[1] * hw, sb[1] * hw);
            let mut ga = Vec::with_capacity(sa[0] * la);
            let mut gb = Vec::with_capacity(sa[0] * lb);
            for chunk in g.chunks(la + lb) {
                ga.extend_from_slice(&chunk[..la]);
                gb.extend_from_slice(&chunk[la..]);
            }
            accumulate(nodes, grads, *a, ga);
            accumulate(nodes, grads, *b, gb);
        }
        Op::ConcatCols(parts) => {
            let total = out.shape()[1];
            let rows = out.shape()[0];
            let mut off = 0;
            for &p in parts {
                let w = val(p).shape()[1];
                let mut gp = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    gp.extend_from_slice(&g[r * total + off..r * total + off + w]);
                }
                accumulate(nodes, grads, p, gp);
                off += w;
            }
        }
        Op::Sum(x) => accumulate(nodes, grads, *x, vec![g[0]; val(*x).len()]),
        Op::Mse { pred, target } => {
            let (vp, vt) = (val(*pred), val(*target));
            let scale = T::lit(2.0) * g[0] / T::lit(vp.len() as f64);
            let diff: Vec<T> = vp.data().iter().zip(vt.data()).map(|(&p, &t)| (p - t) * scale).collect();
            if needs(*target) {
                accumulate(nodes, grads, *target, diff.iter().map(|&v| -v).collect());
            }
            accumulate(nodes, grads, *pred, diff);
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    fn needs(&self) -> bool {
        self.tape.needs(self.id)
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        self.tape.push(value, op, self.needs())
    }

    fn binary(&self, other: &Var<'t, T>, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        self.tape.push(value, op, self.needs() || other.needs())
    }

    fn same_shape(&self, other: &Var<'t, T>, op: &'static str) -> Result<(Rc<Tensor<T>>, Rc<Tensor<T>>)> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(TensorError::shapes(op, &[a.shape(), b.shape()]));
        }
        Ok((a, b))
    }

    fn zip_with(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        Tensor {
            shape: a.shape().to_vec(),
            data: a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        }
    }

    fn map(a: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor { shape: a.shape().to_vec(), data: a.data().iter().map(|&x| f(x)).collect() }
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = self.same_shape(other, "add")?;
        Ok(self.binary(other, Self::zip_with(&a, &b, |x, y| x + y), Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = self.same_shape(other, "sub")?;
        Ok(self.binary(other, Self::zip_with(&a, &b, |x, y| x - y), Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = self.same_shape(other, "mul")?;
        Ok(self.binary(other, Self::zip_with(&a, &b, |x, y| x * y), Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        let a = self.value();
        self.unary(Self::map(&a, |x| x * c), Op::Scale(self.id, c))
    }

    /// `x[n, d] + b[d]` row-wise.
    pub fn add_row_bias(&self, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, b) = (self.value(), bias.value());
        if x.shape().len() != 2 || b.shape() != [x.shape()[1]] {
            return Err(TensorError::shapes("add_row_bias", &[x.shape(), b.shape()]));
        }
        let d = b.len();
        let data = x.data().iter().enumerate().map(|(i, &v)| v + b.data()[i % d]).collect();
        Ok(self.binary(bias, Tensor { shape: x.shape().to_vec(), data }, Op::AddRowBias(self.id, bias.id)))
    }

    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` where the flags transpose the operands.
    pub fn matmul_t(&self, other: &Var<'t, T>, ta: bool, tb: bool) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        if a.shape().len() != 2 || b.shape().len() != 2 {
            return Err(TensorError::shapes("matmul", &[a.shape(), b.shape()]));
        }
        let (ash, bsh) = ((a.shape()[0], a.shape()[1]), (b.shape()[0], b.shape()[1]));
        let (m, k) = if ta { (ash.1, ash.0) } else { ash };
        let (k2, n) = if tb { (bsh.1, bsh.0) } else { bsh };
        if k != k2 {
            return Err(TensorError::shapes("matmul", &[a.shape(), b.shape()]));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_raw(a.data(), ash, ta, b.data(), bsh, tb, &mut out, false);
        Ok(self.binary(
            other,
            Tensor { shape: vec![m, n], data: out },
            Op::MatMul { a: self.id, b: other.id, ta, tb },
        ))
    }

    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let a = self.value();
        if a.shape().len() != 2 {
            return Err(TensorError::shapes("transpose", &[a.shape()]));
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = a.data()[i * c + j];
            }
        }
        Ok(self.unary(Tensor { shape: vec![c, r], data }, Op::Transpose(self.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let a = self.value();
        let t = (*a).clone().reshaped(shape)?;
        Ok(self.unary(t, Op::Reshape(self.id)))
    }

    pub fn relu(&self) -> Var<'t, T> {
        let a = self.value();
        self.unary(Self::map(&a, |x| x.max(T::zero())), Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        let a = self.value();
        let sig = |x: T| {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        };
        self.unary(Self::map(&a, sig), Op::Sigmoid(self.id))
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        let sh = a.shape();
        if axis >= sh.len() {
            return Err(TensorError::InvalidArgument {
                op: "softmax",
                reason: format!("axis {axis} out of range for {sh:?}"),
            });
        }
        let outer: usize = sh[..axis].iter().product();
        let len = sh[axis];
        let inner: usize = sh[axis + 1..].iter().product();
        let x = a.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let m = (0..len).map(|i| x[at(i)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for i in 0..len {
                    let e = (x[at(i)] - m).exp();
                    y[at(i)] = e;
                    s += e;
                }
                for i in 0..len {
                    y[at(i)] /= s;
                }
            }
        }
        Ok(self.unary(Tensor { shape: sh.to_vec(), data: y }, Op::Softmax { x: self.id, outer, len, inner }))
    }

    /// Normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let (x, g, b) = (self.value(), gamma.value(), beta.value());
        let d = *x.shape().last().unwrap_or(&0);
        if d == 0 || g.shape() != [d] || b.shape() != [d] {
            return Err(TensorError::shapes("layer_norm", &[x.shape(), g.shape(), b.shape()]));
        }
        let rows = x.len() / d;
        let dn = T::lit(d as f64);
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut y = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for k in 0..d {
                let h = (row[k] - mean) * is;
                xhat[r * d + k] = h;
                y[r * d + k] = h * g.data()[k] + b.data()[k];
            }
        }
        let needs = self.needs() || gamma.needs() || beta.needs();
        Ok(self.tape.push(
            Tensor { shape: x.shape().to_vec(), data: y },
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat: Rc::new(xhat),
                inv_std: Rc::new(inv_std),
            },
            needs,
        ))
    }

    /// `NCHW` convolution with `[O, C, kh, kw]` weights.
    pub fn conv2d(&self, w: &Var<'t, T>, b: Option<&Var<'t, T>>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        let (x, wv) = (self.value(), w.value());
        let (xs, ws) = (x.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(TensorError::shapes("conv2d", &[xs, ws]));
        }
        if !(1..=2).contains(&stride) {
            return Err(TensorError::InvalidArgument { op: "conv2d", reason: format!("stride {stride}") });
        }
        let o = ws[0];
        let bias = b.map(|b| b.value());
        if let Some(bv) = &bias {
            if bv.shape() != [o] {
                return Err(TensorError::shapes("conv2d", &[xs, ws, bv.shape()]));
            }
        }
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], ws[3], stride, pad)
            .ok_or_else(|| TensorError::shapes("conv2d", &[xs, ws]))?;
        let y = kernels::conv_forward(x.data(), xs[0], &geom, wv.data(), o, bias.as_ref().map(|b| b.data()));
        let needs = self.needs() || w.needs() || b.is_some_and(|b| b.needs());
        Ok(self.tape.push(
            Tensor { shape: vec![xs[0], o, geom.ho, geom.wo], data: y },
            Op::Conv2d { x: self.id, w: w.id, b: b.map(|b| b.id), geom, n: xs[0] },
            needs,
        ))
    }

    /// 2x2 stride-2 transposed convolution with `[C, O, 2, 2]` weights.
    pub fn conv_transpose2d(&self, w: &Var<'t, T>, b: Option<&Var<'t, T>>) -> Result<Var<'t, T>> {
        let (x, wv) = (self.value(), w.value());
        let (xs, ws) = (x.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] || ws[2] != 2 || ws[3] != 2 {
            return Err(TensorError::shapes("conv_transpose2d", &[xs, ws]));
        }
        let o = ws[1];
        let bias = b.map(|b| b.value());
        if let Some(bv) = &bias {
            if bv.shape() != [o] {
                return Err(TensorError::shapes("conv_transpose2d", &[xs, ws, bv.shape()]));
            }
        }
        let dims = (xs[0], xs[1], xs[2], xs[3]);
        let y = kernels::conv_t_forward(x.data(), dims, wv.data(), o, bias.as_ref().map(|b| b.data()));
        let needs = self.needs() || w.needs() || b.is_some_and(|b| b.needs());
        Ok(self.tape.push(
            Tensor { shape: vec![xs[0], o, 2 * xs[2], 2 * xs[3]], data: y },
            Op::ConvT2d { x: self.id, w: w.id, b: b.map(|b| b.id), dims },
            needs,
        ))
    }

    /// 2x2 stride-2 max pooling; spatial sides must be even.
    pub fn max_pool2d(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(TensorError::shapes("max_pool2d", &[s]));
        }
        let (y, arg) = kernels::max_pool2(x.data(), s[0] * s[1], s[2], s[3]);
        Ok(self.unary(
            Tensor { shape: vec![s[0], s[1], s[2] / 2, s[3] / 2], data: y },
            Op::MaxPool { x: self.id, argmax: Rc::new(arg) },
        ))
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 {
            return Err(TensorError::shapes("upsample2x", &[s]));
        }
        let planes = s[0] * s[1];
        let y = kernels::upsample2(x.data(), planes, s[2], s[3]);
        Ok(self.unary(
            Tensor { shape: vec![s[0], s[1], 2 * s[2], 2 * s[3]], data: y },
            Op::Upsample2 { x: self.id, planes, h: s[2], w: s[3] },
        ))
    }

    /// `[N, 1, H, W] -> [N, c, H, W]` by copying the single channel.
    pub fn repeat_channels(&self, c: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(TensorError::shapes("repeat_channels", &[s]));
        }
        let hw = s[2] * s[3];
        let mut data = Vec::with_capacity(s[0] * c * hw);
        for b in 0..s[0] {
            for _ in 0..c {
                data.extend_from_slice(&x.data()[b * hw..(b + 1) * hw]);
            }
        }
        Ok(self.unary(Tensor { shape: vec![s[0], c, s[2], s[3]], data }, Op::RepeatChannels { x: self.id, c }))
    }

    pub fn concat_channels(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(TensorError::shapes("concat_channels", &[sa, sb]));
        }
        let hw = sa[2] * sa[3];
        let (la, lb) = (sa[1] * hw, sb[1] * hw);
        let mut data = Vec::with_capacity(a.len() + b.len());
        for n in 0..sa[0] {
            data.extend_from_slice(&a.data()[n * la..(n + 1) * la]);
            data.extend_from_slice(&b.data()[n * lb..(n + 1) * lb]);
        }
        Ok(self.binary(
            other,
            Tensor { shape: vec![sa[0], sa[1] + sb[1], sa[2], sa[3]], data },
            Op::ConcatChannels { a: self.id, b: other.id },
        ))
    }

    /// Column-wise concatenation of `[n, d_i]` matrices.
    pub fn concat_cols(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat_cols",
            reason: "no inputs".into(),
        })?;
        let vals: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let rows = vals[0].shape()[0];
        if vals.iter().any(|v| v.shape().len() != 2 || v.shape()[0] != rows) {
            let shapes: Vec<&[usize]> = vals.iter().map(|v| v.shape()).collect();
            return Err(TensorError::shapes("concat_cols", &shapes));
        }
        let total: usize = vals.iter().map(|v| v.shape()[1]).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &vals {
                let w = v.shape()[1];
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let needs = parts.iter().any(|p| p.needs());
        Ok(first.tape.push(
            Tensor { shape: vec![rows, total], data },
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            needs,
        ))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let a = self.value();
        self.unary(Tensor::scalar(a.data().iter().copied().sum()), Op::Sum(self.id))
    }

    /// Mean squared error against `target` (same shape).
    pub fn mse_loss(&self, target: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (p, t) = self.same_shape(target, "mse_loss")?;
        let n = T::lit(p.len().max(1) as f64);
        let s: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        Ok(self.binary(target, Tensor::scalar(s / n), Op::Mse { pred: self.id, target: target.id }))
    }
}

/// Scaled dot-product attention: `softmax(Q Kᵀ / √dα) V` with
/// `(Q, K, V) = (X_q Wq, X_kv Wk, X_kv Wv)`. `mask`, when given, is an additive
/// `[n_q, n_kv]` logit bias.
pub fn attention<'t, T: Real>(
    x_q: &Var<'t, T>,
    x_kv: &Var<'t, T>,
    wq: &Var<'t, T>,
    wk: &Var<'t, T>,
    wv: &Var<'t, T>,
    mask: Option<&Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let q = x_q.matmul(wq)?;
    let k = x_kv.matmul(wk)?;
    let v = x_kv.matmul(wv)?;
    let d_alpha = wq.shape()[1];
    let mut logits = q.matmul_t(&k, false, true)?.scale(T::one() / T::lit(d_alpha as f64).sqrt());
    if let Some(m) = mask {
        logits = logits.add(m)?;
    }
    logits.softmax(1)?.matmul(&v)
}
