//! Reverse-mode differentiation over dense tensors.
//!
//! Operations executed through a [`Tape`] record their operands and outputs
//! in creation order. [`Tape::backward`] replays that record once in reverse,
//! accumulating gradients additively at fan-out points. Parameters enter as
//! leaves; only subgraphs that can reach a gradient-requiring leaf do any
//! backward work, which is how stage-wise parameter freezing stays cheap.

use std::cell::{Ref, RefCell};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::conv::{self, ConvGeom};
use crate::kernels::penalty;
use crate::kernels::pool;
use crate::kernels::sample::{self, Window};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Boolean mask planes consumed by the smoothness penalty, shape (batch, h, w).
#[derive(Debug)]
pub struct MaskPlanes {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Square(Var),
    Scale(Var, f64),
    Sum(Var),
    LeakyRelu(Var, f64),
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    MaxPool { input: Var, argmax: Vec<u32> },
    AvgPool(Var),
    ConcatCh(Var, Var),
    Warp { source: Var, field: Var, win: Window },
    Upsample2x { input: Var, win: Window },
    Smoothness { field: Var, mask: Option<Arc<MaskPlanes>> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    needs_grad: bool,
    op: Op,
}

/// Ordered record of executed operations and their results.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insert a tensor as a leaf. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn cloned_value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Accumulated gradient of a node, if any was produced by `backward`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn push(&self, value: Tensor<T>, needs_grad: bool, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, grad: None, needs_grad, op });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    // ---- elementwise and reduction ops ----

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape() != tb.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "add: {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
            Tensor::new(ta.shape(), data)?
        };
        Ok(self.push(value, self.needs(&[a, b]), Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape() != tb.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "sub: {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x - y).collect();
            Tensor::new(ta.shape(), data)?
        };
        Ok(self.push(value, self.needs(&[a, b]), Op::Sub(a, b)))
    }

    pub fn square(&self, x: Var) -> Result<Var> {
        let value = self.nodes.borrow()[x.0].value.map(|v| v * v);
        Ok(self.push(value, self.needs(&[x]), Op::Square(x)))
    }

    pub fn scale(&self, x: Var, factor: f64) -> Result<Var> {
        let f = T::from_f64(factor);
        let value = self.nodes.borrow()[x.0].value.map(|v| v * f);
        Ok(self.push(value, self.needs(&[x]), Op::Scale(x, factor)))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self, x: Var) -> Result<Var> {
        let total = {
            let nodes = self.nodes.borrow();
            let mut acc = T::zero();
            for &v in nodes[x.0].value.data() {
                acc += v;
            }
            acc
        };
        Ok(self.push(Tensor::scalar(total), self.needs(&[x]), Op::Sum(x)))
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::InvalidArgument(format!("leaky_relu slope {slope} not in (0,1)")));
        }
        let s = T::from_f64(slope);
        let value = self.nodes.borrow()[x.0].value.map(|v| if v >= T::zero() { v } else { v * s });
        Ok(self.push(value, self.needs(&[x]), Op::LeakyRelu(x, slope)))
    }

    // ---- structured ops ----

    /// Same-size convolution; `weights` is (out_ch, in_ch, k, k), `input` is
    /// (batch, in_ch, h, w), kernel odd with padding k/2.
    pub fn conv2d(&self, input: Var, weight: Var, bias: Var, pad: usize) -> Result<Var> {
        let (value, geom) = {
            let nodes = self.nodes.borrow();
            let ti = &nodes[input.0].value;
            let tw = &nodes[weight.0].value;
            let tb = &nodes[bias.0].value;
            if ti.rank() != 4 || tw.rank() != 4 || tb.rank() != 1 {
                return Err(Error::ShapeMismatch(format!(
                    "conv2d: input {:?}, weight {:?}, bias {:?}",
                    ti.shape(),
                    tw.shape(),
                    tb.shape()
                )));
            }
            let (b, ci, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2], ti.shape()[3]);
            let (co, wci, k, k2) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
            if k != k2 || k % 2 == 0 {
                return Err(Error::InvalidArgument(format!("conv2d: kernel {k}x{k2} must be square and odd")));
            }
            if pad != k / 2 {
                return Err(Error::InvalidArgument(format!(
                    "conv2d: padding {pad} must be kernel/2 = {}",
                    k / 2
                )));
            }
            if wci != ci || tb.shape()[0] != co {
                return Err(Error::ShapeMismatch(format!(
                    "conv2d: input has {ci} channels, weight expects {wci}; bias {:?} vs out_ch {co}",
                    tb.shape()
                )));
            }
            let geom = ConvGeom { batch: b, in_ch: ci, out_ch: co, h, w, k, pad };
            let mut out = Tensor::zeros(&[b, co, h, w]);
            conv::forward(ti.data(), tw.data(), tb.data(), geom, out.data_mut());
            (out, geom)
        };
        Ok(self.push(
            value,
            self.needs(&[input, weight, bias]),
            Op::Conv2d { input, weight, bias, geom },
        ))
    }

    pub fn maxpool2x2(&self, input: Var) -> Result<Var> {
        let (value, argmax) = {
            let nodes = self.nodes.borrow();
            let ti = &nodes[input.0].value;
            let [b, c, h, w] = nchw(ti, "maxpool2x2")?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::InvalidArgument(format!("maxpool2x2: odd spatial dims {h}x{w}")));
            }
            let mut out = Tensor::zeros(&[b, c, h / 2, w / 2]);
            let mut argmax = Vec::new();
            pool::maxpool_forward(ti.data(), b * c, h, w, out.data_mut(), &mut argmax);
            (out, argmax)
        };
        Ok(self.push(value, self.needs(&[input]), Op::MaxPool { input, argmax }))
    }

    pub fn avgpool2x2(&self, input: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let ti = &nodes[input.0].value;
            let [b, c, h, w] = nchw(ti, "avgpool2x2")?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::InvalidArgument(format!("avgpool2x2: odd spatial dims {h}x{w}")));
            }
            let mut out = Tensor::zeros(&[b, c, h / 2, w / 2]);
            pool::avgpool_forward(ti.data(), b * c, h, w, out.data_mut());
            out
        };
        Ok(self.push(value, self.needs(&[input]), Op::AvgPool(input)))
    }

    /// Channel-wise concatenation of two (batch, c, h, w) tensors.
    pub fn concat_channels(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let [ba, ca, ha, wa] = nchw(ta, "concat_channels")?;
            let [bb, cb, hb, wb] = nchw(tb, "concat_channels")?;
            if ba != bb || ha != hb || wa != wb {
                return Err(Error::ShapeMismatch(format!(
                    "concat_channels: {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            let plane = ha * wa;
            let mut out = Tensor::zeros(&[ba, ca + cb, ha, wa]);
            let od = out.data_mut();
            for n in 0..ba {
                let dst = &mut od[n * (ca + cb) * plane..(n + 1) * (ca + cb) * plane];
                dst[..ca * plane].copy_from_slice(&ta.data()[n * ca * plane..(n + 1) * ca * plane]);
                dst[ca * plane..].copy_from_slice(&tb.data()[n * cb * plane..(n + 1) * cb * plane]);
            }
            out
        };
        Ok(self.push(value, self.needs(&[a, b]), Op::ConcatCh(a, b)))
    }

    /// Bilinear warp of `source` (batch, c, h, w) by `field` (batch, 2, h, w),
    /// treating the buffers as whole canvases.
    pub fn warp(&self, source: Var, field: Var) -> Result<Var> {
        let [_, _, h, w] = nchw(&self.nodes.borrow()[source.0].value, "warp")?;
        self.warp_windowed(source, field, Window::full(h, w))
    }

    /// Warp where the buffers are windows of a larger canvas described by `win`.
    pub fn warp_windowed(&self, source: Var, field: Var, win: Window) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let ts = &nodes[source.0].value;
            let tf = &nodes[field.0].value;
            let [b, c, h, w] = nchw(ts, "warp")?;
            let [fb, fc, fh, fw] = nchw(tf, "warp field")?;
            if fb != b || fc != 2 || fh != h || fw != w {
                return Err(Error::ShapeMismatch(format!(
                    "warp: source {:?} vs field {:?} (field must be (batch,2,h,w))",
                    ts.shape(),
                    tf.shape()
                )));
            }
            let mut out = Tensor::zeros(&[b, c, h, w]);
            sample::warp_forward(ts.data(), b, c, h, w, tf.data(), win, out.data_mut());
            out
        };
        Ok(self.push(value, self.needs(&[source, field]), Op::Warp { source, field, win }))
    }

    /// Corner-aligned bilinear 2x upsampling of a (batch, c, h, w) tensor.
    pub fn upsample2x(&self, input: Var) -> Result<Var> {
        let [_, _, h, w] = nchw(&self.nodes.borrow()[input.0].value, "upsample2x")?;
        self.upsample2x_windowed(input, Window::full(h, w))
    }

    pub fn upsample2x_windowed(&self, input: Var, win: Window) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let ti = &nodes[input.0].value;
            let [b, c, h, w] = nchw(ti, "upsample2x")?;
            let mut out = Tensor::zeros(&[b, c, 2 * h, 2 * w]);
            sample::upsample2x_forward(ti.data(), b * c, h, w, win, out.data_mut());
            out
        };
        Ok(self.push(value, self.needs(&[input]), Op::Upsample2x { input, win }))
    }

    /// Nonsmoothness penalty of a (batch, 2, h, w) field, summed over the
    /// batch; pairs touching masked pixels are eliminated.
    pub fn smoothness(&self, field: Var, mask: Option<Arc<MaskPlanes>>) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let tf = &nodes[field.0].value;
            let [b, c, h, w] = nchw(tf, "smoothness")?;
            if c != 2 {
                return Err(Error::ShapeMismatch(format!(
                    "smoothness: field must be (batch,2,h,w), got {:?}",
                    tf.shape()
                )));
            }
            if let Some(m) = &mask {
                if m.batch != b || m.h != h || m.w != w {
                    return Err(Error::ShapeMismatch(format!(
                        "smoothness: mask ({},{},{}) vs field ({b},2,{h},{w})",
                        m.batch, m.h, m.w
                    )));
                }
            }
            let total =
                penalty::smoothness_forward(tf.data(), b, h, w, mask.as_ref().map(|m| &m.bits[..]));
            Tensor::scalar(total)
        };
        Ok(self.push(value, self.needs(&[field]), Op::Smoothness { field, mask }))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss; every gradient-requiring leaf
    /// reachable from `loss` receives its accumulated gradient.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let shape = nodes[loss.0].value.shape().to_vec();
        nodes[loss.0].grad = Some(Tensor::full(&shape, T::one()));

        for i in (0..=loss.0).rev() {
            let (before, rest) = nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.needs_grad || node.grad.is_none() {
                continue;
            }
            let gout = node.grad.as_ref().unwrap();
            let contributions = backward_op::<T>(before, &node.op, &node.value, gout);
            for (var, delta) in contributions {
                let target = &mut before[var.0];
                if !target.needs_grad {
                    continue;
                }
                match &mut target.grad {
                    Some(g) => {
                        for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                            *gv += *dv;
                        }
                    }
                    None => target.grad = Some(delta),
                }
            }
        }
        Ok(())
    }
}

fn nchw<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    if t.rank() != 4 {
        return Err(Error::ShapeMismatch(format!("{what}: expected rank 4, got {:?}", t.shape())));
    }
    Ok([t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]])
}

/// Gradient contributions of one op, as (input var, delta) pairs. Inputs
/// whose subgraph needs no gradient are skipped.
fn backward_op<T: Scalar>(
    before: &mut [Node<T>],
    op: &Op,
    value: &Tensor<T>,
    gout: &Tensor<T>,
) -> Vec<(Var, Tensor<T>)> {
    let want = |v: Var| before[v.0].needs_grad;
    let mut out: Vec<(Var, Tensor<T>)> = Vec::new();
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if want(*a) {
                out.push((*a, gout.clone()));
            }
            if want(*b) {
                out.push((*b, gout.clone()));
            }
        }
        Op::Sub(a, b) => {
            if want(*a) {
                out.push((*a, gout.clone()));
            }
            if want(*b) {
                out.push((*b, gout.map(|v| -v)));
            }
        }
        Op::Square(x) => {
            if want(*x) {
                let tx = &before[x.0].value;
                let two = T::from_f64(2.0);
                let data =
                    tx.data().iter().zip(gout.data()).map(|(&v, &g)| two * v * g).collect();
                out.push((*x, Tensor::new(tx.shape(), data).unwrap()));
            }
        }
        Op::Scale(x, factor) => {
            if want(*x) {
                let f = T::from_f64(*factor);
                out.push((*x, gout.map(|g| g * f)));
            }
        }
        Op::Sum(x) => {
            if want(*x) {
                let tx = &before[x.0].value;
                out.push((*x, Tensor::full(tx.shape(), gout.item())));
            }
        }
        Op::LeakyRelu(x, slope) => {
            if want(*x) {
                let tx = &before[x.0].value;
                let s = T::from_f64(*slope);
                let data = tx
                    .data()
                    .iter()
                    .zip(gout.data())
                    .map(|(&v, &g)| if v >= T::zero() { g } else { g * s })
                    .collect();
                out.push((*x, Tensor::new(tx.shape(), data).unwrap()));
            }
        }
        Op::Conv2d { input, weight, bias, geom } => {
            if want(*input) {
                let mut d = Tensor::zeros(before[input.0].value.shape());
                conv::backward_input(gout.data(), before[weight.0].value.data(), *geom, d.data_mut());
                out.push((*input, d));
            }
            if want(*weight) {
                let mut d = Tensor::zeros(before[weight.0].value.shape());
                conv::backward_weight(gout.data(), before[input.0].value.data(), *geom, d.data_mut());
                out.push((*weight, d));
            }
            if want(*bias) {
                let mut d = Tensor::zeros(before[bias.0].value.shape());
                conv::backward_bias(gout.data(), *geom, d.data_mut());
                out.push((*bias, d));
            }
        }
        Op::MaxPool { input, argmax } => {
            if want(*input) {
                let mut d = Tensor::zeros(before[input.0].value.shape());
                pool::maxpool_backward(gout.data(), argmax, d.data_mut());
                out.push((*input, d));
            }
        }
        Op::AvgPool(input) => {
            if want(*input) {
                let ti = &before[input.0].value;
                let (b, c, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2], ti.shape()[3]);
                let mut d = Tensor::zeros(ti.shape());
                pool::avgpool_backward(gout.data(), b * c, h, w, d.data_mut());
                out.push((*input, d));
            }
        }
        Op::ConcatCh(a, b) => {
            let sa = before[a.0].value.shape().to_vec();
            let sb = before[b.0].value.shape().to_vec();
            let (ca, cb) = (sa[1], sb[1]);
            let plane = sa[2] * sa[3];
            if want(*a) {
                let mut d = Tensor::zeros(&sa);
                for n in 0..sa[0] {
                    d.data_mut()[n * ca * plane..(n + 1) * ca * plane].copy_from_slice(
                        &gout.data()[n * (ca + cb) * plane..n * (ca + cb) * plane + ca * plane],
                    );
                }
                out.push((*a, d));
            }
            if want(*b) {
                let mut d = Tensor::zeros(&sb);
                for n in 0..sb[0] {
                    d.data_mut()[n * cb * plane..(n + 1) * cb * plane].copy_from_slice(
                        &gout.data()[n * (ca + cb) * plane + ca * plane
                            ..(n + 1) * (ca + cb) * plane],
                    );
                }
                out.push((*b, d));
            }
        }
        Op::Warp { source, field, win } => {
            let ts = &before[source.0].value;
            let tf = &before[field.0].value;
            let (b, c, h, w) = (ts.shape()[0], ts.shape()[1], ts.shape()[2], ts.shape()[3]);
            let mut dsrc = want(*source).then(|| Tensor::zeros(ts.shape()));
            let mut dfield = want(*field).then(|| Tensor::zeros(tf.shape()));
            sample::warp_backward(
                ts.data(),
                b,
                c,
                h,
                w,
                tf.data(),
                *win,
                gout.data(),
                dsrc.as_mut().map(|t| t.data_mut()),
                dfield.as_mut().map(|t| t.data_mut()),
            );
            if let Some(d) = dsrc {
                out.push((*source, d));
            }
            if let Some(d) = dfield {
                out.push((*field, d));
            }
        }
        Op::Upsample2x { input, win } => {
            if want(*input) {
                let ti = &before[input.0].value;
                let (b, c, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2], ti.shape()[3]);
                let mut d = Tensor::zeros(ti.shape());
                sample::upsample2x_backward(gout.data(), b * c, h, w, *win, d.data_mut());
                out.push((*input, d));
            }
        }
        Op::Smoothness { field, mask } => {
            if want(*field) {
                let tf = &before[field.0].value;
                let (b, h, w) = (tf.shape()[0], tf.shape()[2], tf.shape()[3]);
                let mut d = Tensor::zeros(tf.shape());
                penalty::smoothness_backward(
                    tf.data(),
                    b,
                    h,
                    w,
                    mask.as_ref().map(|m| &m.bits[..]),
                    gout.item(),
                    d.data_mut(),
                );
                out.push((*field, d));
            }
        }
    }
    let _ = value;
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv_zero_input_yields_bias() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 3, 3]), false);
        let w = tape.leaf(t4(&[1, 1, 3, 3], vec![0.3; 9]), false);
        let b = tape.leaf(t4(&[1], vec![2.5]), false);
        let y = tape.conv2d(x, w, b, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..16).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = tape.leaf(t4(&[1, 1, 4, 4], data.clone()), false);
        let mut wk = vec![0.0; 9];
        wk[4] = 1.0; // center tap
        let w = tape.leaf(t4(&[1, 1, 3, 3], wk), false);
        let b = tape.leaf(t4(&[1], vec![0.0]), false);
        let y = tape.conv2d(x, w, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_all_ones_kernel_hand_case() {
        // 2x2 input [[1,2],[3,4]], 3x3 ones kernel, zero padding: every output
        // window covers the whole input, so all outputs equal 10.
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t4(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]), false);
        let w = tape.leaf(t4(&[1, 1, 3, 3], vec![1.0; 9]), false);
        let b = tape.leaf(t4(&[1], vec![0.0]), false);
        let y = tape.conv2d(x, w, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn conv_rejects_mismatched_channels_and_padding() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]), false);
        let w = tape.leaf(Tensor::zeros(&[3, 1, 3, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[3]), false);
        assert!(tape.conv2d(x, w, b, 1).is_err());

        let w2 = tape.leaf(Tensor::zeros(&[3, 2, 3, 3]), false);
        assert!(tape.conv2d(x, w2, b, 0).is_err());
    }

    #[test]
    fn maxpool_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t4(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]), false);
        let y = tape.maxpool2x2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0]);

        let c = tape.leaf(Tensor::full(&[1, 1, 4, 4], 0.7), false);
        let yc = tape.maxpool2x2(c).unwrap();
        assert_eq!(tape.value(yc).shape(), &[1, 1, 2, 2]);
        assert!(tape.value(yc).data().iter().all(|&v| v == 0.7));

        let odd = tape.leaf(Tensor::zeros(&[1, 1, 3, 3]), false);
        assert!(tape.maxpool2x2(odd).is_err());
    }

    #[test]
    fn maxpool_tie_routes_gradient_to_first_element() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t4(&[1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]), true);
        let y = tape.maxpool2x2(x).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn avgpool_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t4(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]), false);
        let y = tape.avgpool2x2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5]);

        // two rounds over a 4x4 ramp 0..15 averages everything: 7.5
        let ramp = tape.leaf(t4(&[1, 1, 4, 4], (0..16).map(|i| i as f64).collect()), false);
        let y1 = tape.avgpool2x2(ramp).unwrap();
        let y2 = tape.avgpool2x2(y1).unwrap();
        assert_eq!(tape.value(y2).data(), &[7.5]);
    }

    #[test]
    fn leaky_relu_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[3], vec![2.0, 0.0, -3.0]).unwrap(), false);
        let y = tape.leaky_relu(x, 0.01).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 0.0, -0.03]);
        assert!(tape.leaky_relu(x, 1.5).is_err());
    }

    #[test]
    fn backward_sum_and_square() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
        let sq = tape.square(x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_at_fan_out() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, -1.0]).unwrap(), true);
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
        let y = tape.leaf(Tensor::new(&[2], vec![3.0, 4.0]).unwrap(), false);
        let s = tape.add(x, y).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_some());
        assert!(tape.grad(y).is_none());
    }
}
