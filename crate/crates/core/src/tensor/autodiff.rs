use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::kernels::{self, ConvGeom};
use super::{Float, Tensor};
use crate::error::{Error, Result};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Float> {
    op: &'static str,
    inputs: Vec<Var<T>>,
    /// Taken when the backward pass runs; `None` afterwards marks the node
    /// as consumed.
    backward: Option<BackwardFn<T>>,
}

struct Inner<T: Float> {
    id: usize,
    value: RefCell<Tensor<T>>,
    grad: RefCell<Option<Tensor<T>>>,
    requires_grad: bool,
    node: RefCell<Option<Node<T>>>,
}

/// A tensor participating in the computation graph.
///
/// Cloning a `Var` clones the handle, not the data. Ops record a graph node
/// only when at least one input requires a gradient, so evaluating with
/// constant leaves builds no graph at all.
pub struct Var<T: Float = f32>(Rc<Inner<T>>);

impl<T: Float> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Float> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.0.node.borrow().as_ref().map(|n| n.op).unwrap_or("leaf");
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("op", &op)
            .field("shape", &self.0.value.borrow().shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

fn check_finite<T: Float>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if cfg!(debug_assertions) && !t.all_finite() {
        return Err(Error::NonFinite { op });
    }
    Ok(())
}

impl<T: Float> Var<T> {
    pub fn new(value: Tensor<T>, requires_grad: bool) -> Self {
        Var(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad,
            node: RefCell::new(None),
        }))
    }

    /// Leaf that accumulates gradients.
    pub fn parameter(value: Tensor<T>) -> Self {
        Self::new(value, true)
    }

    pub fn constant(value: Tensor<T>) -> Self {
        Self::new(value, false)
    }

    /// Records the result of an op. `backward` maps the output gradient to
    /// one optional gradient per input.
    pub(crate) fn from_op(
        op: &'static str,
        inputs: Vec<Var<T>>,
        value: Tensor<T>,
        backward: impl FnOnce(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Result<Self> {
        check_finite(op, &value)?;
        let requires_grad = inputs.iter().any(Var::requires_grad);
        let out = Self::new(value, requires_grad);
        if requires_grad {
            *out.0.node.borrow_mut() = Some(Node {
                op,
                inputs,
                backward: Some(Box::new(backward)),
            });
        }
        Ok(out)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn value(&self) -> Ref<'_, Tensor<T>> {
        self.0.value.borrow()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.borrow().shape().to_vec()
    }

    /// Value of a scalar variable.
    pub fn item(&self) -> T {
        self.0.value.borrow().item()
    }

    /// Mutates the stored value in place (optimizer steps, running stats).
    pub fn update(&self, f: impl FnOnce(&mut Tensor<T>)) {
        f(&mut self.0.value.borrow_mut())
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn with_grad<R>(&self, f: impl FnOnce(Option<&Tensor<T>>) -> R) -> R {
        f(self.0.grad.borrow().as_ref())
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Back-propagates from this scalar, accumulating `d self / d v` into the
    /// gradient buffer of every reachable `v` that requires a gradient.
    /// Existing gradients are added to, not replaced; callers reset with
    /// [`Var::zero_grad`]. A graph can be traversed only once.
    pub fn backward(&self) -> Result<()> {
        let seed = {
            let v = self.value();
            if !v.is_scalar() {
                return Err(Error::NotScalar(v.shape().to_vec()));
            }
            Tensor::full(v.shape(), T::one())
        };
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topological_order()?;
        let mut pending: HashMap<usize, Tensor<T>> = HashMap::new();
        pending.insert(self.0.id, seed);
        for var in order.iter().rev() {
            let Some(g) = pending.remove(&var.0.id) else {
                continue;
            };
            let node = var.0.node.borrow_mut().take();
            if let Some(mut node) = node {
                let backward = node.backward.take().ok_or(Error::GraphConsumed)?;
                let input_grads = backward(&g);
                debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.op);
                for (input, ig) in node.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !input.requires_grad() {
                        continue;
                    }
                    check_finite(node.op, &ig)?;
                    match pending.get_mut(&input.0.id) {
                        Some(acc) => acc.add_assign(&ig),
                        None => {
                            pending.insert(input.0.id, ig);
                        }
                    }
                }
                // Keep the op name so a second traversal reports consumption.
                *var.0.node.borrow_mut() = Some(Node {
                    op: node.op,
                    inputs: Vec::new(),
                    backward: None,
                });
            }
            let mut slot = var.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Post-order over the grad-requiring subgraph rooted at `self`.
    fn topological_order(&self) -> Result<Vec<Var<T>>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Var<T>, bool)> = vec![(self.clone(), false)];
        while let Some((var, expanded)) = stack.pop() {
            if expanded {
                order.push(var);
                continue;
            }
            if !seen.insert(var.0.id) {
                continue;
            }
            stack.push((var.clone(), true));
            if let Some(node) = var.0.node.borrow().as_ref() {
                if node.backward.is_none() {
                    return Err(Error::GraphConsumed);
                }
                for input in &node.inputs {
                    if input.requires_grad() && !seen.contains(&input.0.id) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        Ok(order)
    }

    // ---- elementwise ------------------------------------------------------

    fn same_shape(&self, other: &Var<T>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
        }
        Ok(())
    }

    fn unary(&self, op: &'static str, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Result<Var<T>> {
        let x = self.value().clone();
        check_finite(op, &x)?;
        let y = x.map(f);
        let saved_y = if self.requires_grad() { Some(y.clone()) } else { None };
        Var::from_op(op, vec![self.clone()], y, move |g| {
            let y = saved_y.expect("saved output");
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(g.shape().to_vec(), data).unwrap())]
        })
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        self.same_shape(other, "add")?;
        let v = {
            let (a, b) = (self.value(), other.value());
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Var::from_op("add", vec![self.clone(), other.clone()], v, |g| {
            vec![Some(g.clone()), Some(g.clone())]
        })
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        self.same_shape(other, "sub")?;
        let v = {
            let (a, b) = (self.value(), other.value());
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Var::from_op("sub", vec![self.clone(), other.clone()], v, |g| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        })
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.same_shape(other, "mul")?;
        let (a, b) = (self.value().clone(), other.value().clone());
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let v = Tensor::new(a.shape().to_vec(), data)?;
        Var::from_op("mul", vec![self.clone(), other.clone()], v, move |g| {
            let ga = g.data().iter().zip(b.data()).map(|(&g, &y)| g * y).collect();
            let gb = g.data().iter().zip(a.data()).map(|(&g, &x)| g * x).collect();
            vec![
                Some(Tensor::new(g.shape().to_vec(), ga).unwrap()),
                Some(Tensor::new(g.shape().to_vec(), gb).unwrap()),
            ]
        })
    }

    pub fn scale(&self, c: f64) -> Result<Var<T>> {
        let c = T::of(c);
        let v = self.value().map(|x| x * c);
        Var::from_op("scale", vec![self.clone()], v, move |g| vec![Some(g.map(|v| v * c))])
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<T>> {
        let c = T::of(c);
        let v = self.value().map(|x| x + c);
        Var::from_op("add_scalar", vec![self.clone()], v, |g| vec![Some(g.clone())])
    }

    pub fn abs(&self) -> Result<Var<T>> {
        // d|x|/dx at 0 is taken as 0.
        self.unary(
            "abs",
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn square(&self) -> Result<Var<T>> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    /// Square root; the gradient at 0 is taken as 0.
    pub fn sqrt(&self) -> Result<Var<T>> {
        self.unary(
            "sqrt",
            |x| x.sqrt(),
            |_, y| {
                if y > T::zero() {
                    T::of(0.5) / y
                } else {
                    T::zero()
                }
            },
        )
    }

    /// `max(0, x)`; subgradient 0 at 0.
    pub fn relu(&self) -> Result<Var<T>> {
        self.unary(
            "relu",
            |x| x.max(T::zero()),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sigmoid(&self) -> Result<Var<T>> {
        self.unary(
            "sigmoid",
            |x| T::one() / (T::one() + (-x).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&self) -> Result<Var<T>> {
        let shape = self.shape();
        let total: T = self.value().data().iter().copied().sum();
        Var::from_op("sum", vec![self.clone()], Tensor::scalar(total), move |g| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(&self) -> Result<Var<T>> {
        let shape = self.shape();
        let n = self.value().len();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let inv = T::one() / T::from_usize(n).unwrap();
        let total: T = self.value().data().iter().copied().sum();
        Var::from_op("mean", vec![self.clone()], Tensor::scalar(total * inv), move |g| {
            vec![Some(Tensor::full(&shape, g.item() * inv))]
        })
    }

    // ---- image ops --------------------------------------------------------

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(parts: &[Var<T>]) -> Result<Var<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?
            .value()
            .dims4("concat_channels")?;
        let (n, _, h, w) = first;
        let mut chans = Vec::with_capacity(parts.len());
        for p in parts {
            let (pn, pc, ph, pw) = p.value().dims4("concat_channels")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("mismatched inputs {:?} vs {:?}", p.shape(), parts[0].shape()),
                ));
            }
            chans.push(pc);
        }
        let total_c: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = vec![T::zero(); n * total_c * hw];
        let mut c0 = 0;
        for (p, &pc) in parts.iter().zip(&chans) {
            let v = p.value();
            for b in 0..n {
                out[(b * total_c + c0) * hw..][..pc * hw].copy_from_slice(&v.data()[b * pc * hw..][..pc * hw]);
            }
            c0 += pc;
        }
        let value = Tensor::new(vec![n, total_c, h, w], out)?;
        Var::from_op("concat_channels", parts.to_vec(), value, move |g| {
            let mut grads = Vec::with_capacity(chans.len());
            let mut c0 = 0;
            for &pc in &chans {
                let mut d = vec![T::zero(); n * pc * hw];
                for b in 0..n {
                    d[b * pc * hw..][..pc * hw].copy_from_slice(&g.data()[(b * total_c + c0) * hw..][..pc * hw]);
                }
                grads.push(Some(Tensor::new(vec![n, pc, h, w], d).unwrap()));
                c0 += pc;
            }
            grads
        })
    }

    /// 2-D cross-correlation with `weight` of shape `[c_out, c_in, kh, kw]`
    /// and `bias` of length `c_out`.
    pub fn conv2d(&self, weight: &Var<T>, bias: &Var<T>, stride: usize, padding: usize) -> Result<Var<T>> {
        const OP: &str = "conv2d";
        let x = self.value().clone();
        let (n, c, h, w) = x.dims4(OP)?;
        let wt = weight.value().clone();
        let (c_out, wc, kh, kw) = wt.dims4(OP)?;
        if wc != c {
            return Err(Error::shape(
                OP,
                format!("input has {c} channels but weight expects {wc}"),
            ));
        }
        if bias.value().shape() != [c_out] {
            return Err(Error::shape(
                OP,
                format!("bias shape {:?} does not match {c_out} output channels", bias.shape()),
            ));
        }
        check_finite(OP, &x)?;
        let (out_h, out_w) = match (
            ConvGeom::output_len(h, kh, stride, padding),
            ConvGeom::output_len(w, kw, stride, padding),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::shape(
                    OP,
                    format!("kernel {kh}x{kw} (stride {stride}, padding {padding}) does not fit input {h}x{w}"),
                ))
            }
        };
        let g = ConvGeom {
            n,
            channels: c,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            out_h,
            out_w,
        };
        let out = kernels::conv2d_forward(x.data(), wt.data(), bias.value().data(), &g, c_out);
        let value = Tensor::new(vec![n, c_out, out_h, out_w], out)?;
        let need_input = self.requires_grad();
        Var::from_op(
            OP,
            vec![self.clone(), weight.clone(), bias.clone()],
            value,
            move |grad| {
                let gr = kernels::conv2d_backward(x.data(), wt.data(), grad.data(), &g, c_out, need_input);
                vec![
                    gr.input.map(|d| Tensor::new(x.shape().to_vec(), d).unwrap()),
                    Some(Tensor::new(wt.shape().to_vec(), gr.weight).unwrap()),
                    Some(Tensor::new(vec![c_out], gr.bias).unwrap()),
                ]
            },
        )
    }

    /// Transposed convolution (the adjoint of [`Var::conv2d`] with the same
    /// weight). `weight` is `[c_in, c_out, kh, kw]`; the output extent is
    /// `(h - 1) * stride - 2 * padding + kh + output_padding`.
    pub fn conv_transpose2d(
        &self,
        weight: &Var<T>,
        bias: &Var<T>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var<T>> {
        const OP: &str = "conv_transpose2d";
        let x = self.value().clone();
        let (n, c_in, h, w) = x.dims4(OP)?;
        let wt = weight.value().clone();
        let (wc, c_out, kh, kw) = wt.dims4(OP)?;
        if wc != c_in {
            return Err(Error::shape(
                OP,
                format!("input has {c_in} channels but weight expects {wc}"),
            ));
        }
        if bias.value().shape() != [c_out] {
            return Err(Error::shape(
                OP,
                format!("bias shape {:?} does not match {c_out} output channels", bias.shape()),
            ));
        }
        if stride == 0 || output_padding >= stride {
            return Err(Error::shape(
                OP,
                format!("need stride > 0 and output_padding < stride (got {stride}, {output_padding})"),
            ));
        }
        check_finite(OP, &x)?;
        let full_h = (h.max(1) - 1) * stride + kh + output_padding;
        let full_w = (w.max(1) - 1) * stride + kw + output_padding;
        if h == 0 || w == 0 || full_h <= 2 * padding || full_w <= 2 * padding {
            return Err(Error::shape(
                OP,
                format!("padding {padding} leaves no output for input {h}x{w} and kernel {kh}x{kw}"),
            ));
        }
        let (out_h, out_w) = (full_h - 2 * padding, full_w - 2 * padding);
        let g = ConvGeom {
            n,
            channels: c_out,
            h: out_h,
            w: out_w,
            kh,
            kw,
            stride,
            pad: padding,
            out_h: h,
            out_w: w,
        };
        debug_assert_eq!(ConvGeom::output_len(out_h, kh, stride, padding), Some(h));
        let out = kernels::conv_transpose2d_forward(x.data(), wt.data(), bias.value().data(), &g, c_in);
        let value = Tensor::new(vec![n, c_out, out_h, out_w], out)?;
        let need_input = self.requires_grad();
        Var::from_op(
            OP,
            vec![self.clone(), weight.clone(), bias.clone()],
            value,
            move |grad| {
                let gr = kernels::conv_transpose2d_backward(x.data(), wt.data(), grad.data(), &g, c_in, need_input);
                vec![
                    gr.input.map(|d| Tensor::new(x.shape().to_vec(), d).unwrap()),
                    Some(Tensor::new(wt.shape().to_vec(), gr.weight).unwrap()),
                    Some(Tensor::new(vec![c_out], gr.bias).unwrap()),
                ]
            },
        )
    }

    fn even_dims(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        let (n, c, h, w) = self.value().dims4(op)?;
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                op,
                format!("spatial size {h}x{w} is not divisible by 2; use a block size of 16, 32 or 64"),
            ));
        }
        Ok((n, c, h, w))
    }

    /// 2x2 max pooling, stride 2.
    pub fn max_pool2d(&self) -> Result<Var<T>> {
        let (n, c, h, w) = self.even_dims("max_pool2d")?;
        let (out, argmax) = kernels::max_pool2x2_forward(self.value().data(), n * c, h, w);
        let value = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        let len = n * c * h * w;
        Var::from_op("max_pool2d", vec![self.clone()], value, move |g| {
            let dx = kernels::max_pool2x2_backward(g.data(), &argmax, len);
            vec![Some(Tensor::new(vec![n, c, h, w], dx).unwrap())]
        })
    }

    /// 2x2 average pooling, stride 2.
    pub fn avg_pool2d(&self) -> Result<Var<T>> {
        let (n, c, h, w) = self.even_dims("avg_pool2d")?;
        let out = kernels::avg_pool2x2_forward(self.value().data(), n * c, h, w);
        let value = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        Var::from_op("avg_pool2d", vec![self.clone()], value, move |g| {
            let dx = kernels::avg_pool2x2_backward(g.data(), n * c, h, w);
            vec![Some(Tensor::new(vec![n, c, h, w], dx).unwrap())]
        })
    }

    /// Batch normalization over the N, H and W axes of an NCHW tensor.
    ///
    /// In [`BatchNormMode::Train`] the running statistics are updated in
    /// place as `running = (1 - momentum) * running + momentum * batch`
    /// (the variance estimate is unbiased).
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &self,
        gamma: &Var<T>,
        beta: &Var<T>,
        running_mean: &Var<T>,
        running_var: &Var<T>,
        mode: BatchNormMode,
        eps: f64,
        momentum: f64,
    ) -> Result<Var<T>> {
        const OP: &str = "batch_norm2d";
        let x = self.value().clone();
        let (n, c, h, w) = x.dims4(OP)?;
        for (name, p) in [
            ("gamma", gamma),
            ("beta", beta),
            ("running_mean", running_mean),
            ("running_var", running_var),
        ] {
            if p.value().shape() != [c] {
                return Err(Error::shape(
                    OP,
                    format!("{name} has shape {:?}, expected [{c}]", p.shape()),
                ));
            }
        }
        check_finite(OP, &x)?;
        let hw = h * w;
        let eps_t = T::of(eps);
        let (mean, var) = match mode {
            BatchNormMode::Train => {
                if n * hw == 0 {
                    return Err(Error::shape(OP, "empty batch in training mode"));
                }
                let (mean, var) = kernels::channel_moments(x.data(), n, c, hw);
                let m = T::of(momentum);
                let count = n * hw;
                let unbias = if count > 1 {
                    T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
                } else {
                    T::one()
                };
                running_mean.update(|rm| {
                    for (r, &b) in rm.data_mut().iter_mut().zip(&mean) {
                        *r = (T::one() - m) * *r + m * b;
                    }
                });
                running_var.update(|rv| {
                    for (r, &b) in rv.data_mut().iter_mut().zip(&var) {
                        *r = (T::one() - m) * *r + m * b * unbias;
                    }
                });
                (mean, var)
            }
            BatchNormMode::Eval => (
                running_mean.value().data().to_vec(),
                running_var.value().data().to_vec(),
            ),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let gamma_v = gamma.value().data().to_vec();
        let (y, xhat) = kernels::batch_norm_apply(x.data(), &mean, &inv_std, &gamma_v, beta.value().data(), n, c, hw);
        let value = Tensor::new(x.shape().to_vec(), y)?;
        let batch_stats = mode == BatchNormMode::Train;
        Var::from_op(OP, vec![self.clone(), gamma.clone(), beta.clone()], value, move |g| {
            let (dx, dgamma, dbeta) =
                kernels::batch_norm_backward(g.data(), &xhat, &inv_std, &gamma_v, n, c, hw, batch_stats);
            vec![
                Some(Tensor::new(vec![n, c, h, w], dx).unwrap()),
                Some(Tensor::new(vec![c], dgamma).unwrap()),
                Some(Tensor::new(vec![c], dbeta).unwrap()),
            ]
        })
    }
}
