use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{EngineError, Result};
use crate::float::Float;
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulConst(usize, Rc<Tensor<T>>),
    Scale(usize, T),
    Offset(usize),
    Relu(usize),
    Sigmoid(usize),
    Logit(usize, T),
    Tanh(usize),
    Abs(usize),
    Square(usize),
    Sum(usize),
    Conv2d {
        x: usize,
        weight: usize,
        bias: Option<usize>,
        geometry: ConvGeometry,
    },
    ReflectPad {
        x: usize,
        map: Rc<Vec<usize>>,
    },
    Upsample2x(usize),
    AvgPool2x(usize),
    InstanceNorm {
        x: usize,
        inv_std: Vec<T>,
    },
    Concat(Vec<usize>),
    Channels {
        x: usize,
        start: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Rc<Vec<u32>>,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// A tape is meant to live for a single forward/backward pass. Nodes are
/// appended in evaluation order, so the node list is already topologically
/// sorted.
pub struct Tape<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Float> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Float> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that gradients never flow into.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf (parameter or probed input).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(EngineError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let shaped = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|d| Tensor::from_vec(n.value.shape(), d).expect("grad shape")))
            .collect();
        Ok(Gradients { grads: shaped })
    }
}

fn accumulate<'g, T: Float>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], id: usize) -> &'g mut Vec<T> {
    grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.len()])
}

fn propagate<T: Float>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    let needs = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &p in [a, b].iter() {
                if needs(*p) {
                    let d = accumulate(grads, nodes, *p);
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                let d = accumulate(grads, nodes, *a);
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
            }
            if needs(*b) {
                let d = accumulate(grads, nodes, *b);
                d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            if needs(*a) {
                let d = accumulate(grads, nodes, *a);
                for ((d, &g), &o) in d.iter_mut().zip(g).zip(vb.data()) {
                    *d += g * o;
                }
            }
            if needs(*b) {
                let d = accumulate(grads, nodes, *b);
                for ((d, &g), &o) in d.iter_mut().zip(g).zip(va.data()) {
                    *d += g * o;
                }
            }
        }
        Op::MulConst(a, c) => {
            if needs(*a) {
                let d = accumulate(grads, nodes, *a);
                for ((d, &g), &o) in d.iter_mut().zip(g).zip(c.data()) {
                    *d += g * o;
                }
            }
        }
        Op::Scale(a, s) => {
            if needs(*a) {
                let d = accumulate(grads, nodes, *a);
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *s);
            }
        }
        Op::Offset(a) => {
            if needs(*a) {
                let d = accumulate(grads, nodes, *a);
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
            }
        }
        Op::Relu(a) => {
            if needs(*a) {
                let x = nodes[*a].value.clone();
                let d = accumulate(grads, nodes, *a);
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(x.data()) {
                    if x > T::zero() {
                        *d += g;
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            if needs(*a) {
                let y = node.value.clone();
                let d = accumulate(grads, nodes, *a);
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(y.data()) {
                    *d += g * y * (T::one() - y);
                }
            }
        }
        Op::Logit(a, eps) => {
            if needs(*a) {
                let x = nodes[*a].value.clone();
                let d = accumulate(grads, nodes, *a);
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(x.data()) {
                    if x > *eps && x < T::one() - *eps {
                        *d += g / (x * (T::one() - x));
                    }
                }
            }
        }
        Op::Tanh(a) => {
            if needs(*a) {
                let y = node.value.clone();
                let d = accumulate(grads, nodes, *a);
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(y.data()) {
                    *d += g * (T::one() - y * y);
                }
            }
        }
        Op::Abs(a) => {
            if needs(*a) {
                let x = nodes[*a].value.clone();
                let d = accumulate(grads, nodes, *a);
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(x.data()) {
                    if x > T::zero() {
                        *d += g;
                    } else if x < T::zero() {
                        *d -= g;
                    }
                }
            }
        }
        Op::Square(a) => {
            if needs(*a) {
                let x = nodes[*a].value.clone();
                let two = T::one() + T::one();
                let d = accumulate(grads, nodes, *a);
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(x.data()) {
                    *d += g * two * x;
                }
            }
        }
        Op::Sum(a) => {
            if needs(*a) {
                let d = accumulate(grads, nodes, *a);
                d.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Conv2d {
            x,
            weight,
            bias,
            geometry,
        } => {
            let xv = nodes[*x].value.clone();
            let wv = nodes[*weight].value.clone();
            let out_channels = wv.shape()[0];
            let mut dx = needs(*x).then(|| vec![T::zero(); xv.len()]);
            let mut dw = needs(*weight).then(|| vec![T::zero(); wv.len()]);
            let mut db = bias
                .filter(|b| needs(*b))
                .map(|_| vec![T::zero(); out_channels]);
            kernels::conv2d_backward(
                xv.data(),
                wv.data(),
                g,
                out_channels,
                geometry,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            for (target, delta) in [(Some(*x), dx), (Some(*weight), dw), (*bias, db)] {
                if let (Some(t), Some(delta)) = (target, delta) {
                    let d = accumulate(grads, nodes, t);
                    d.iter_mut().zip(&delta).for_each(|(d, &v)| *d += v);
                }
            }
        }
        Op::ReflectPad { x, map } => {
            if needs(*x) {
                let (c, h, w) = nodes[*x].value.dims3().expect("rank 3");
                let padded = map.len();
                let d = accumulate(grads, nodes, *x);
                for ch in 0..c {
                    let src = &g[ch * padded..(ch + 1) * padded];
                    let dst = &mut d[ch * h * w..(ch + 1) * h * w];
                    for (&s, &m) in src.iter().zip(map.iter()) {
                        dst[m] += s;
                    }
                }
            }
        }
        Op::Upsample2x(a) => {
            if needs(*a) {
                let (c, h, w) = nodes[*a].value.dims3().expect("rank 3");
                let d = accumulate(grads, nodes, *a);
                let w2 = 2 * w;
                for ch in 0..c {
                    for y in 0..2 * h {
                        for x in 0..w2 {
                            d[(ch * h + y / 2) * w + x / 2] += g[(ch * 2 * h + y) * w2 + x];
                        }
                    }
                }
            }
        }
        Op::AvgPool2x(a) => {
            if needs(*a) {
                let (c, h, w) = nodes[*a].value.dims3().expect("rank 3");
                let (ho, wo) = (h / 2, w / 2);
                let quarter = T::from_f64_lossy(0.25);
                let d = accumulate(grads, nodes, *a);
                for ch in 0..c {
                    for y in 0..ho {
                        for x in 0..wo {
                            let v = g[(ch * ho + y) * wo + x] * quarter;
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                d[(ch * h + 2 * y + dy) * w + 2 * x + dx] += v;
                            }
                        }
                    }
                }
            }
        }
        Op::InstanceNorm { x, inv_std } => {
            if needs(*x) {
                let (_, h, w) = nodes[*x].value.dims3().expect("rank 3");
                let y = node.value.clone();
                let d = accumulate(grads, nodes, *x);
                kernels::instance_norm_backward(y.data(), inv_std, g, h * w, d);
            }
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                if needs(p) {
                    let d = accumulate(grads, nodes, p);
                    d.iter_mut()
                        .zip(&g[offset..offset + len])
                        .for_each(|(d, &g)| *d += g);
                }
                offset += len;
            }
        }
        Op::Channels { x, start } => {
            if needs(*x) {
                let (_, h, w) = nodes[*x].value.dims3().expect("rank 3");
                let offset = start * h * w;
                let d = accumulate(grads, nodes, *x);
                d[offset..offset + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, &g)| *d += g);
            }
        }
        Op::CrossEntropy { logits, targets } => {
            if needs(*logits) {
                let lv = nodes[*logits].value.clone();
                let (j, h, w) = lv.dims3().expect("rank 3");
                let plane = h * w;
                let scale = g[0] / T::from_usize(plane).unwrap();
                let d = accumulate(grads, nodes, *logits);
                let data = lv.data();
                for p in 0..plane {
                    let mut m = T::neg_infinity();
                    for c in 0..j {
                        m = m.max(data[c * plane + p]);
                    }
                    let mut z = T::zero();
                    for c in 0..j {
                        z += (data[c * plane + p] - m).exp();
                    }
                    for c in 0..j {
                        let soft = (data[c * plane + p] - m).exp() / z;
                        let hot = if targets[p] as usize == c { T::one() } else { T::zero() };
                        d[c * plane + p] += scale * (soft - hot);
                    }
                }
            }
        }
    }
}

/// Result of [`Tape::backward`]: one optional gradient per tape node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of the loss with respect to `var`, if any flowed into it.
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }
}

fn shape_err<X>(msg: String) -> Result<X> {
    Err(EngineError::Shape(msg))
}

impl<'t, T: Float> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn same_shape(&self, other: &Var<'t, T>, what: &str) -> Result<()> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return shape_err(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Var<'t, T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (a, b) = (self.value(), other.value());
        Tensor::from_vec(
            a.shape(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
        .expect("same shape")
    }

    fn binary(&self, other: &Var<'t, T>, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_shape(other, "add")?;
        let v = self.zip_with(other, |a, b| a + b);
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_shape(other, "sub")?;
        let v = self.zip_with(other, |a, b| a - b);
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_shape(other, "mul")?;
        let v = self.zip_with(other, |a, b| a * b);
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    /// Elementwise product with a non-differentiable tensor of equal shape.
    pub fn mul_const(&self, c: Rc<Tensor<T>>) -> Result<Var<'t, T>> {
        let a = self.value();
        if a.shape() != c.shape() {
            return shape_err(format!("mul_const: {:?} vs {:?}", a.shape(), c.shape()));
        }
        let v = Tensor::from_vec(
            a.shape(),
            a.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect(),
        )?;
        Ok(self.unary(v, Op::MulConst(self.id, c)))
    }

    pub fn scale(&self, s: T) -> Var<'t, T> {
        let v = self.value().map(|x| x * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    /// Adds a non-differentiable tensor of equal shape.
    pub fn offset(&self, c: &Tensor<T>) -> Result<Var<'t, T>> {
        let a = self.value();
        if a.shape() != c.shape() {
            return shape_err(format!("offset: {:?} vs {:?}", a.shape(), c.shape()));
        }
        let v = Tensor::from_vec(
            a.shape(),
            a.data().iter().zip(c.data()).map(|(&x, &y)| x + y).collect(),
        )?;
        Ok(self.unary(v, Op::Offset(self.id)))
    }

    pub fn relu(&self) -> Var<'t, T> {
        let v = self.value().map(|x| if x > T::zero() { x } else { T::zero() });
        self.unary(v, Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        let v = self.value().map(|x| T::one() / (T::one() + (-x).exp()));
        self.unary(v, Op::Sigmoid(self.id))
    }

    /// `ln(x / (1 - x))` with `x` clamped to `[eps, 1 - eps]`; the gradient
    /// is zero where the clamp is active.
    pub fn logit(&self, eps: T) -> Var<'t, T> {
        let v = self.value().map(|x| {
            let x = x.max(eps).min(T::one() - eps);
            (x / (T::one() - x)).ln()
        });
        self.unary(v, Op::Logit(self.id, eps))
    }

    pub fn tanh(&self) -> Var<'t, T> {
        let v = self.value().map(|x| x.tanh());
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn abs(&self) -> Var<'t, T> {
        let v = self.value().map(|x| x.abs());
        self.unary(v, Op::Abs(self.id))
    }

    pub fn square(&self) -> Var<'t, T> {
        let v = self.value().map(|x| x * x);
        self.unary(v, Op::Square(self.id))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = self.value().len().max(1);
        self.sum().scale(T::one() / T::from_usize(n).unwrap())
    }

    /// Zero-padded convolution; `weight` is `[out, in, k, k]`, `bias` is `[out]`.
    pub fn conv2d(
        &self,
        weight: &Var<'t, T>,
        bias: Option<&Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        let xv = self.value();
        let wv = weight.value();
        let (c, h, w) = xv.dims3()?;
        let &[out_c, in_c, kh, kw] = wv.shape() else {
            return shape_err(format!("conv weight must be rank 4, got {:?}", wv.shape()));
        };
        if in_c != c || kh != kw {
            return shape_err(format!(
                "conv weight {:?} incompatible with input {:?}",
                wv.shape(),
                xv.shape()
            ));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return shape_err(format!("conv geometry invalid for input {:?}", xv.shape()));
        }
        let geometry = ConvGeometry {
            in_channels: c,
            height: h,
            width: w,
            kernel: kh,
            stride,
            pad,
        };
        let bv = match bias {
            Some(b) => {
                let bv = b.value();
                if bv.shape() != [out_c] {
                    return shape_err(format!("conv bias {:?} for {out_c} outputs", bv.shape()));
                }
                Some(bv)
            }
            None => None,
        };
        let out = kernels::conv2d_forward(
            xv.data(),
            wv.data(),
            bv.as_deref().map(|b| b.data()),
            out_c,
            &geometry,
        );
        let value = Tensor::from_vec(&[out_c, geometry.out_height(), geometry.out_width()], out)?;
        let rg = self.requires_grad() || weight.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        Ok(self.tape.push(
            value,
            Op::Conv2d {
                x: self.id,
                weight: weight.id,
                bias: bias.map(|b| b.id),
                geometry,
            },
            rg,
        ))
    }

    pub fn reflect_pad(&self, pad: usize) -> Result<Var<'t, T>> {
        let xv = self.value();
        let (c, h, w) = xv.dims3()?;
        if pad >= h || pad >= w {
            return shape_err(format!("reflect pad {pad} too large for {:?}", xv.shape()));
        }
        let map = Rc::new(kernels::reflect_map(h, w, pad));
        let plane = h * w;
        let mut data = Vec::with_capacity(c * map.len());
        for ch in 0..c {
            let src = &xv.data()[ch * plane..(ch + 1) * plane];
            data.extend(map.iter().map(|&m| src[m]));
        }
        let value = Tensor::from_vec(&[c, h + 2 * pad, w + 2 * pad], data)?;
        Ok(self.unary(value, Op::ReflectPad { x: self.id, map }))
    }

    pub fn upsample_nearest2x(&self) -> Result<Var<'t, T>> {
        let xv = self.value();
        let (c, h, w) = xv.dims3()?;
        let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
        let d = out.data_mut();
        for ch in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    d[(ch * 2 * h + y) * 2 * w + x] = xv.data()[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        Ok(self.unary(out, Op::Upsample2x(self.id)))
    }

    /// 2x2 average pooling; odd trailing rows/columns are dropped.
    pub fn avg_pool2x(&self) -> Result<Var<'t, T>> {
        let xv = self.value();
        let (c, h, w) = xv.dims3()?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return shape_err(format!("cannot pool {:?}", xv.shape()));
        }
        let quarter = T::from_f64_lossy(0.25);
        let mut out = Tensor::zeros(&[c, ho, wo]);
        let d = out.data_mut();
        let s = xv.data();
        for ch in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    let b = (ch * h + 2 * y) * w + 2 * x;
                    d[(ch * ho + y) * wo + x] = (s[b] + s[b + 1] + s[b + w] + s[b + w + 1]) * quarter;
                }
            }
        }
        Ok(self.unary(out, Op::AvgPool2x(self.id)))
    }

    /// Per-channel standardization without affine parameters.
    pub fn instance_norm(&self, eps: T) -> Result<Var<'t, T>> {
        let xv = self.value();
        let (c, h, w) = xv.dims3()?;
        let (y, inv_std) = kernels::instance_norm_forward(xv.data(), h * w, eps);
        let value = Tensor::from_vec(&[c, h, w], y)?;
        Ok(self.unary(value, Op::InstanceNorm { x: self.id, inv_std }))
    }

    pub fn concat_channels(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| EngineError::Shape("concat of nothing".into()))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let value = Tensor::concat_channels(&refs)?;
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(first
            .tape
            .push(value, Op::Concat(parts.iter().map(|p| p.id).collect()), rg))
    }

    /// Channels `start..start + len` of a rank-3 value.
    pub fn channels(&self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let xv = self.value();
        let (c, h, w) = xv.dims3()?;
        if start + len > c {
            return shape_err(format!("channels {start}..{} of {c}", start + len));
        }
        let plane = h * w;
        let data = xv.data()[start * plane..(start + len) * plane].to_vec();
        let value = Tensor::from_vec(&[len, h, w], data)?;
        Ok(self.unary(value, Op::Channels { x: self.id, start }))
    }

    /// Mean over pixels of `logsumexp(logits) - logits[target]`, using a
    /// max-shifted log-sum-exp.
    pub fn cross_entropy(&self, targets: Rc<Vec<u32>>) -> Result<Var<'t, T>> {
        let lv = self.value();
        let (j, h, w) = lv.dims3()?;
        let plane = h * w;
        if targets.len() != plane {
            return shape_err(format!("{} targets for {plane} pixels", targets.len()));
        }
        if let Some(bad) = targets.iter().find(|&&t| t as usize >= j) {
            return shape_err(format!("target label {bad} out of range for {j} channels"));
        }
        let data = lv.data();
        let mut total = T::zero();
        for (p, &t) in targets.iter().enumerate() {
            let mut m = T::neg_infinity();
            for c in 0..j {
                m = m.max(data[c * plane + p]);
            }
            let mut z = T::zero();
            for c in 0..j {
                z += (data[c * plane + p] - m).exp();
            }
            total += m + z.ln() - data[t as usize * plane + p];
        }
        let value = Tensor::scalar(total / T::from_usize(plane.max(1)).unwrap());
        Ok(self.unary(
            value,
            Op::CrossEntropy {
                logits: self.id,
                targets,
            },
        ))
    }
}
