//! Minimal dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape of nodes; node ids are topologically
//! ordered by construction, so [`Graph::backward`] visits them in reverse
//! order exactly once. Training runs in f32; f64 is available for
//! finite-difference gradient checks.

mod adam;
mod conv;
mod spatial;

pub use adam::{adam_step, lr_schedule, AdamState, LrSchedule};

use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn};

use crate::error::{Error, Result};

/// Element type of tensors: f32 for training, f64 for verification.
pub trait Scalar:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug)]
enum Op<F: Scalar> {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Scale(TensorId, F),
    AddScalar(TensorId),
    Ln(TensorId),
    Clamp(TensorId, F, F),
    Relu(TensorId),
    Sigmoid(TensorId),
    SoftmaxChannels(TensorId),
    Conv2d {
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        padding: usize,
    },
    MaxPool2 {
        x: TensorId,
        argmax: Vec<u32>,
    },
    Upsample2(TensorId),
    ConcatChannels(TensorId, TensorId),
    Sqrt(TensorId),
    SubBroadcast(TensorId, TensorId),
    SumAll(TensorId),
    MeanAll(TensorId),
    SumSpatial(TensorId),
    DiffRows(TensorId),
    DiffCols(TensorId),
    Warp {
        image: TensorId,
        field: TensorId,
    },
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    grad: Option<ArrayD<F>>,
    requires_grad: bool,
    op: Op<F>,
}

/// Append-only computation tape.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn dims4<F: Scalar>(a: &ArrayD<F>, what: &str) -> Result<(usize, usize, usize, usize)> {
    let s = a.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!(
            "{what} must be 4-dimensional (NCHW), got shape {s:?}"
        )));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<F>, requires_grad: bool, op: Op<F>) -> TensorId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Inserts a constant leaf (no gradient).
    pub fn leaf(&mut self, value: ArrayD<F>) -> TensorId {
        self.push(value, false, Op::Leaf)
    }

    /// Inserts a parameter leaf that will receive a gradient.
    pub fn param(&mut self, value: ArrayD<F>) -> TensorId {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &ArrayD<F> {
        &self.nodes[id.0].value
    }

    /// Gradient populated by [`Graph::backward`], if this node required one.
    pub fn grad(&self, id: TensorId) -> Option<&ArrayD<F>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, id: TensorId) -> F {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1);
        *v.iter().next().expect("scalar tensor")
    }

    fn binary_elementwise(
        &mut self,
        a: TensorId,
        b: TensorId,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> TensorId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.shape(),
            vb.shape(),
            "elementwise operands must share a shape"
        );
        let mut out = va.clone();
        out.zip_mut_with(vb, |x, &y| *x = f(*x, y));
        let rg = self.needs(a) || self.needs(b);
        self.push(out, rg, op)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_elementwise(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_elementwise(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_elementwise(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_elementwise(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: TensorId, c: F) -> TensorId {
        let out = self.value(a).mapv(|x| x * c);
        let rg = self.needs(a);
        self.push(out, rg, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: F) -> TensorId {
        let out = self.value(a).mapv(|x| x + c);
        let rg = self.needs(a);
        self.push(out, rg, Op::AddScalar(a))
    }

    pub fn ln(&mut self, a: TensorId) -> TensorId {
        let out = self.value(a).mapv(|x| x.ln());
        let rg = self.needs(a);
        self.push(out, rg, Op::Ln(a))
    }

    pub fn clamp(&mut self, a: TensorId, lo: F, hi: F) -> TensorId {
        let out = self.value(a).mapv(|x| x.max(lo).min(hi));
        let rg = self.needs(a);
        self.push(out, rg, Op::Clamp(a, lo, hi))
    }

    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        let out = self.value(a).mapv(|x| x.sqrt());
        let rg = self.needs(a);
        self.push(out, rg, Op::Sqrt(a))
    }

    /// Subtracts a single-element tensor from every element of `a`.
    pub fn sub_broadcast(&mut self, a: TensorId, scalar: TensorId) -> TensorId {
        debug_assert_eq!(self.value(scalar).len(), 1);
        let sv = *self.value(scalar).iter().next().expect("scalar operand");
        let out = self.value(a).mapv(|x| x - sv);
        let rg = self.needs(a) || self.needs(scalar);
        self.push(out, rg, Op::SubBroadcast(a, scalar))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let out = self.value(a).mapv(|x| x.max(F::zero()));
        let rg = self.needs(a);
        self.push(out, rg, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let one = F::one();
        let out = self.value(a).mapv(|x| one / (one + (-x).exp()));
        let rg = self.needs(a);
        self.push(out, rg, Op::Sigmoid(a))
    }

    /// Per-pixel softmax over the channel axis of an NCHW tensor.
    pub fn softmax_channels(&mut self, a: TensorId) -> Result<TensorId> {
        let out = spatial::softmax_channels_forward(self.value(a))?;
        let rg = self.needs(a);
        Ok(self.push(out, rg, Op::SoftmaxChannels(a)))
    }

    /// Cross-correlation convolution: x NCHW, w (O, C, kh, kw), b (O).
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let out = conv::forward(self.value(x), self.value(w), self.value(b), stride, padding)?;
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
        ))
    }

    /// 2x2 max pooling with stride 2.
    pub fn max_pool2(&mut self, x: TensorId) -> Result<TensorId> {
        let (out, argmax) = spatial::max_pool2_forward(self.value(x))?;
        let rg = self.needs(x);
        Ok(self.push(out, rg, Op::MaxPool2 { x, argmax }))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2(&mut self, x: TensorId) -> Result<TensorId> {
        let out = spatial::upsample2_forward(self.value(x))?;
        let rg = self.needs(x);
        Ok(self.push(out, rg, Op::Upsample2(x)))
    }

    /// Channel concatenation of two NCHW tensors.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ba, ca, ha, wa) = dims4(self.value(a), "concat lhs")?;
        let (bb, cb, hb, wb) = dims4(self.value(b), "concat rhs")?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::Dimension(format!(
                "concat operands disagree outside the channel axis: \
                 ({ba},{ca},{ha},{wa}) vs ({bb},{cb},{hb},{wb})"
            )));
        }
        let out = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("validated shapes")
            .as_standard_layout()
            .to_owned();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, rg, Op::ConcatChannels(a, b)))
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s = self.value(a).iter().fold(F::zero(), |acc, &x| acc + x);
        let rg = self.needs(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), rg, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = F::from_f64(self.value(a).len() as f64);
        let s = self.value(a).iter().fold(F::zero(), |acc, &x| acc + x) / n;
        let rg = self.needs(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), rg, Op::MeanAll(a))
    }

    /// Sums an NCHW tensor over its spatial axes, producing (N, C).
    pub fn sum_spatial(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a);
        let (b, c, h, w) = dims4(v, "sum_spatial input").expect("4-d input");
        let v4 = v.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut out = ndarray::Array2::<F>::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                let mut acc = F::zero();
                for r in 0..h {
                    for col in 0..w {
                        acc += v4[[bi, ci, r, col]];
                    }
                }
                out[[bi, ci]] = acc;
            }
        }
        let rg = self.needs(a);
        self.push(out.into_dyn(), rg, Op::SumSpatial(a))
    }

    /// Forward difference along rows: out[..., r, :] = x[..., r+1, :] - x[..., r, :].
    pub fn diff_rows(&mut self, a: TensorId) -> TensorId {
        let out = spatial::diff_forward(self.value(a), 2);
        let rg = self.needs(a);
        self.push(out, rg, Op::DiffRows(a))
    }

    /// Forward difference along columns.
    pub fn diff_cols(&mut self, a: TensorId) -> TensorId {
        let out = spatial::diff_forward(self.value(a), 3);
        let rg = self.needs(a);
        self.push(out, rg, Op::DiffCols(a))
    }

    /// Dense bilinear warp. `image` is NCHW, `field` is (N, 2, H, W) holding
    /// (row, col) displacements in pixels; border samples clamp to the edge.
    /// Differentiable with respect to both arguments.
    pub fn warp(&mut self, image: TensorId, field: TensorId) -> Result<TensorId> {
        let out = spatial::warp_forward(self.value(image), self.value(field))?;
        let rg = self.needs(image) || self.needs(field);
        Ok(self.push(out, rg, Op::Warp { image, field }))
    }

    /// Reverse sweep from a scalar loss; fills gradients of every
    /// `requires_grad` node reachable from it.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<ArrayD<F>>> = (0..n).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(()); // loss does not depend on any parameter
        }
        grads[loss.0] = Some(ArrayD::from_elem(self.value(loss).raw_dim(), F::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &ArrayD<F>, grads: &mut [Option<ArrayD<F>>]) {
        let acc = |grads: &mut [Option<ArrayD<F>>], nodes: &[Node<F>], id: TensorId, c: ArrayD<F>| {
            if !nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => *existing += &c,
                slot @ None => *slot = Some(c),
            }
        };
        let nodes = &self.nodes;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, nodes, *a, g.clone());
                acc(grads, nodes, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, nodes, *a, g.clone());
                acc(grads, nodes, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                let mut ga = g.clone();
                ga *= &nodes[b.0].value;
                acc(grads, nodes, *a, ga);
                let mut gb = g.clone();
                gb *= &nodes[a.0].value;
                acc(grads, nodes, *b, gb);
            }
            Op::Div(a, b) => {
                let vb = &nodes[b.0].value;
                let mut ga = g.clone();
                ga.zip_mut_with(vb, |x, &y| *x /= y);
                acc(grads, nodes, *a, ga);
                let va = &nodes[a.0].value;
                let mut gb = g.clone();
                ndarray::Zip::from(&mut gb).and(va).and(vb).for_each(|x, &a_, &b_| {
                    *x = -*x * a_ / (b_ * b_);
                });
                acc(grads, nodes, *b, gb);
            }
            Op::Scale(a, c) => {
                acc(grads, nodes, *a, g.mapv(|x| x * *c));
            }
            Op::AddScalar(a) => {
                acc(grads, nodes, *a, g.clone());
            }
            Op::Ln(a) => {
                let mut ga = g.clone();
                ga.zip_mut_with(&nodes[a.0].value, |x, &y| *x /= y);
                acc(grads, nodes, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let mut ga = g.clone();
                ga.zip_mut_with(&nodes[a.0].value, |x, &y| {
                    if y <= *lo || y >= *hi {
                        *x = F::zero();
                    }
                });
                acc(grads, nodes, *a, ga);
            }
            Op::Relu(a) => {
                let mut ga = g.clone();
                ga.zip_mut_with(&nodes[a.0].value, |x, &y| {
                    if y <= F::zero() {
                        *x = F::zero();
                    }
                });
                acc(grads, nodes, *a, ga);
            }
            Op::Sigmoid(a) => {
                let y = &nodes[i].value;
                let mut ga = g.clone();
                ga.zip_mut_with(y, |x, &s| *x = *x * s * (F::one() - s));
                acc(grads, nodes, *a, ga);
            }
            Op::SoftmaxChannels(a) => {
                let ga = spatial::softmax_channels_backward(&nodes[i].value, g);
                acc(grads, nodes, *a, ga);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let (gx, gw, gb) = conv::backward(
                    &nodes[x.0].value,
                    &nodes[w.0].value,
                    g,
                    *stride,
                    *padding,
                    nodes[x.0].requires_grad,
                );
                if let Some(gx) = gx {
                    acc(grads, nodes, *x, gx);
                }
                acc(grads, nodes, *w, gw);
                acc(grads, nodes, *b, gb);
            }
            Op::MaxPool2 { x, argmax } => {
                let gx = spatial::max_pool2_backward(&nodes[x.0].value, g, argmax);
                acc(grads, nodes, *x, gx);
            }
            Op::Upsample2(a) => {
                let ga = spatial::upsample2_backward(&nodes[a.0].value, g);
                acc(grads, nodes, *a, ga);
            }
            Op::ConcatChannels(a, b) => {
                let ca = nodes[a.0].value.shape()[1];
                let (ga, gb) = spatial::concat_backward(g, ca);
                acc(grads, nodes, *a, ga);
                acc(grads, nodes, *b, gb);
            }
            Op::Sqrt(a) => {
                let y = &nodes[i].value;
                let half = F::from_f64(0.5);
                let mut ga = g.clone();
                ga.zip_mut_with(y, |x, &s| *x = *x * half / s);
                acc(grads, nodes, *a, ga);
            }
            Op::SubBroadcast(a, scalar) => {
                acc(grads, nodes, *a, g.clone());
                let total = g.iter().fold(F::zero(), |acc_, &v| acc_ + v);
                acc(
                    grads,
                    nodes,
                    *scalar,
                    ArrayD::from_elem(nodes[scalar.0].value.raw_dim(), -total),
                );
            }
            Op::SumAll(a) => {
                let gs = *g.iter().next().expect("scalar grad");
                acc(
                    grads,
                    nodes,
                    *a,
                    ArrayD::from_elem(nodes[a.0].value.raw_dim(), gs),
                );
            }
            Op::MeanAll(a) => {
                let len = F::from_f64(nodes[a.0].value.len() as f64);
                let gs = *g.iter().next().expect("scalar grad") / len;
                acc(
                    grads,
                    nodes,
                    *a,
                    ArrayD::from_elem(nodes[a.0].value.raw_dim(), gs),
                );
            }
            Op::SumSpatial(a) => {
                let va = &nodes[a.0].value;
                let (bn, cn, h, w) = dims4(va, "sum_spatial input").expect("4-d input");
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let mut ga = ArrayD::zeros(va.raw_dim());
                {
                    let mut ga4 = ga.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
                    for bi in 0..bn {
                        for ci in 0..cn {
                            let gv = g2[[bi, ci]];
                            for r in 0..h {
                                for col in 0..w {
                                    ga4[[bi, ci, r, col]] = gv;
                                }
                            }
                        }
                    }
                }
                acc(grads, nodes, *a, ga);
            }
            Op::DiffRows(a) => {
                let ga = spatial::diff_backward(&nodes[a.0].value, g, 2);
                acc(grads, nodes, *a, ga);
            }
            Op::DiffCols(a) => {
                let ga = spatial::diff_backward(&nodes[a.0].value, g, 3);
                acc(grads, nodes, *a, ga);
            }
            Op::Warp { image, field } => {
                let (gi, gf) = spatial::warp_backward(
                    &nodes[image.0].value,
                    &nodes[field.0].value,
                    g,
                    nodes[image.0].requires_grad,
                    nodes[field.0].requires_grad,
                );
                if let Some(gi) = gi {
                    acc(grads, nodes, *image, gi);
                }
                if let Some(gf) = gf {
                    acc(grads, nodes, *field, gf);
                }
            }
        }
    }
}

/// Immutable view over a tensor value (convenience for callers that only
/// need to read results out of a finished graph).
pub fn view<F: Scalar>(g: &Graph<F>, id: TensorId) -> ArrayViewD<'_, F> {
    g.value(id).view()
}

/// Bilinear sample with clamp-to-edge semantics; shared by the graph warp
/// op and the standalone warp functions.
pub fn sample<F: Scalar>(img: &ndarray::ArrayView2<'_, F>, y: F, x: F) -> F {
    spatial::sample_bilinear(img, y, x)
}
