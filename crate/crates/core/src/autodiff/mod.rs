//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to a [`Tape`] holding its forward value and
//! the handles of its inputs. [`Tape::backward`] walks the tape once in
//! reverse, returning a gradient for every node that depends on a leaf
//! created with `requires_grad`. A tape can be differentiated only once.

pub mod gradcheck;
mod kernels;
mod tensor;

pub use tensor::{Element, Tensor};

use kernels::{ConvGeom, ConvShape};
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward called on a graph that was already differentiated")]
    GraphConsumed,
    #[error("backward needs a single-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown operation {0:?}")]
    UnknownOp(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, shape: ConvShape },
    ConvTranspose2d { x: Var, w: Var, b: Var, shape: ConvShape },
    LeakyRelu { x: Var, slope: T },
    Sigmoid { x: Var },
    Scale { x: Var, factor: T },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Concat { a: Var, b: Var },
    SelectChannel { x: Var, channel: usize },
    MeanAbs { x: Var },
    Sum { x: Var },
    WeightedSum { terms: Vec<(Var, T)> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::Shape {
        op,
        detail: detail.into(),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn conv_shape(
        &self,
        op: &'static str,
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        transpose: bool,
    ) -> Result<ConvShape> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        let bs = self.value(b).shape();
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(shape_err(op, format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (in_ch, out_ch) = if transpose { (ws[0], ws[1]) } else { (ws[1], ws[0]) };
        if xs[1] != in_ch || ws[2] != geom.kernel || ws[3] != geom.kernel || bs[0] != out_ch {
            return Err(shape_err(op, format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (out_h, out_w) = if transpose {
            (geom.transpose_out(xs[2]), geom.transpose_out(xs[3]))
        } else {
            (geom.conv_out(xs[2]), geom.conv_out(xs[3]))
        };
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(shape_err(op, format!("input {xs:?} too small for kernel")));
        };
        Ok(ConvShape {
            batch: xs[0],
            in_ch,
            out_ch,
            in_h: xs[2],
            in_w: xs[3],
            out_h,
            out_w,
            geom,
        })
    }

    /// 2-D convolution; `w` is [out, in, k, k], `b` is [out].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let kernel = self.value(w).shape().get(2).copied().unwrap_or(0);
        let geom = ConvGeom { kernel, stride, pad };
        let shape = self.conv_shape("conv2d", x, w, b, geom, false)?;
        let mut y = Tensor::zeros(&[shape.batch, shape.out_ch, shape.out_h, shape.out_w]);
        kernels::conv2d_forward(
            &shape,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            y.data_mut(),
        );
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(y, Op::Conv2d { x, w, b, shape }, rg))
    }

    /// Transposed 2-D convolution; `w` is [in, out, k, k], `b` is [out].
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let kernel = self.value(w).shape().get(2).copied().unwrap_or(0);
        let geom = ConvGeom { kernel, stride, pad };
        let shape = self.conv_shape("conv_transpose2d", x, w, b, geom, true)?;
        let mut y = Tensor::zeros(&[shape.batch, shape.out_ch, shape.out_h, shape.out_w]);
        kernels::conv_transpose2d_forward(
            &shape,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            y.data_mut(),
        );
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(y, Op::ConvTranspose2d { x, w, b, shape }, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let y = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { v * slope });
        let rg = self.any_grad(&[x]);
        self.push(y, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, T::zero())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.any_grad(&[x]);
        self.push(y, Op::Sigmoid { x }, rg)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let y = self.value(x).map(|v| v * factor);
        let rg = self.any_grad(&[x]);
        self.push(y, Op::Scale { x, factor }, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(
                name,
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::new(va.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(y, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(y, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(y, Op::Mul { a, b }, rg))
    }

    /// Concatenate two 4-D tensors along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(shape_err("concat", format!("{sa:?} vs {sb:?}")));
        }
        let (n, ca, h, w) = self.value(a).dims4();
        let cb = sb[1];
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            data.extend_from_slice(&self.value(a).data()[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&self.value(b).data()[i * cb * plane..(i + 1) * cb * plane]);
        }
        let y = Tensor::new(vec![n, ca + cb, h, w], data);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(y, Op::Concat { a, b }, rg))
    }

    /// Channel `channel` of a 4-D tensor, keeping a singleton channel axis.
    pub fn select_channel(&mut self, x: Var, channel: usize) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() != 4 || channel >= s[1] {
            return Err(shape_err("select_channel", format!("{s:?}, channel {channel}")));
        }
        let (n, c, h, w) = self.value(x).dims4();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * plane);
        for i in 0..n {
            let start = (i * c + channel) * plane;
            data.extend_from_slice(&self.value(x).data()[start..start + plane]);
        }
        let y = Tensor::new(vec![n, 1, h, w], data);
        let rg = self.any_grad(&[x]);
        Ok(self.push(y, Op::SelectChannel { x, channel }, rg))
    }

    /// Mean of absolute values (the L1 reduction).
    pub fn mean_abs(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = T::from_f64(v.len().max(1) as f64);
        let s = v.data().iter().fold(T::zero(), |acc, &e| acc + e.abs());
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s / n), Op::MeanAbs { x }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self
            .value(x)
            .data()
            .iter()
            .fold(T::zero(), |acc, &e| acc + e);
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Σ weight·term over single-element terms; weights are constants.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(shape_err("weighted_sum", format!("term shape {:?}", t.shape())));
            }
            total = total + w * t.item();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.any_grad(&vars);
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a single-element `loss`. Consumes the graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(AutodiffError::GraphConsumed);
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Free intermediate values; leaves stay readable.
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.value = Tensor::zeros(&[0]);
                node.op = Op::Leaf;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(delta.data()),
            slot @ None => *slot = Some(delta),
        }
    }

    fn zeros_like(&self, v: Var) -> Tensor<T> {
        Tensor::zeros(self.value(v).shape())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, shape } | Op::ConvTranspose2d { x, w, b, shape } => {
                let transpose = matches!(node.op, Op::ConvTranspose2d { .. });
                let mut dx = self.requires_grad(*x).then(|| self.zeros_like(*x));
                let mut dw = self.requires_grad(*w).then(|| self.zeros_like(*w));
                let mut db = self.requires_grad(*b).then(|| self.zeros_like(*b));
                let backward = if transpose {
                    kernels::conv_transpose2d_backward
                } else {
                    kernels::conv2d_backward
                };
                backward(
                    shape,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                for (v, d) in [(*x, dx), (*w, dw), (*b, db)] {
                    if let Some(d) = d {
                        self.accumulate(grads, v, d);
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { gv * *slope })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d));
            }
            Op::Sigmoid { x } => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gv)| gv * y * (T::one() - y))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), d));
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, g.map(|v| v * *factor));
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), d));
                }
                if self.requires_grad(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), d));
                }
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).shape()[1];
                let plane = h * w;
                let mut da = Vec::with_capacity(n * ca * plane);
                let mut db = Vec::with_capacity(n * cb * plane);
                for i in 0..n {
                    let base = i * (ca + cb) * plane;
                    da.extend_from_slice(&g.data()[base..base + ca * plane]);
                    db.extend_from_slice(&g.data()[base + ca * plane..base + (ca + cb) * plane]);
                }
                self.accumulate(grads, *a, Tensor::new(vec![n, ca, h, w], da));
                self.accumulate(grads, *b, Tensor::new(vec![n, cb, h, w], db));
            }
            Op::SelectChannel { x, channel } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let plane = h * w;
                let mut d = self.zeros_like(*x);
                for i in 0..n {
                    let start = (i * c + channel) * plane;
                    d.data_mut()[start..start + plane]
                        .copy_from_slice(&g.data()[i * plane..(i + 1) * plane]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::MeanAbs { x } => {
                let xv = self.value(*x);
                let scale = g.item() / T::from_f64(xv.len().max(1) as f64);
                let d = xv.map(|v| {
                    if v > T::zero() {
                        scale
                    } else if v < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, d);
            }
            Op::Sum { x } => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::WeightedSum { terms } => {
                let gv = g.item();
                for &(v, w) in terms {
                    self.accumulate(grads, v, Tensor::full(self.value(v).shape(), gv * w));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_parameters_has_unit_gradients() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]));
        let b = tape.param(Tensor::new(vec![3], vec![4.0, 0.0, 1.0]));
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_scaled_loss_has_zero_gradients() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::new(vec![2], vec![3.0, -1.0]));
        let s = tape.sigmoid(a);
        let z = tape.scale(s, 0.0);
        let loss = tape.sum(z);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(a).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let a = tape.param(Tensor::scalar(2.0));
        let loss = tape.sum(a);
        tape.backward(loss).unwrap();
        assert_eq!(tape.backward(loss).unwrap_err(), AutodiffError::GraphConsumed);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let a = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(a), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]));
        let c = tape.constant(Tensor::new(vec![2], vec![3.0, 4.0]));
        let m = tape.mul(a, c).unwrap();
        let loss = tape.sum(m);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::zeros(&[2]));
        let b = tape.param(Tensor::zeros(&[3]));
        assert!(tape.add(a, b).is_err());
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let y = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(tape.concat(x, y).is_err());
        assert!(tape.select_channel(x, 2).is_err());
        let w = tape.param(Tensor::zeros(&[3, 5, 4, 4]));
        let bias = tape.param(Tensor::zeros(&[3]));
        assert!(tape.conv2d(x, w, bias, 2, 1).is_err());
    }

    #[test]
    fn shared_input_accumulates() {
        // d/dx (x*x) = 2x
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![2], vec![1.5, -3.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, -6.0]);
    }
}
