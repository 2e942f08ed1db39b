use super::conv::{self, Geom};
use super::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Sqrt(Var),
    Square(Var),
    Pow(Var, T),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, g: Geom },
    ConvT { x: Var, w: Var, b: Option<Var>, g: Geom },
    Concat(Vec<Var>),
    SliceChannels { x: Var, start: usize },
    Reshape(Var),
    Upsample2x(Var),
    AvgPool2(Var),
    Warp { frame: Var, flow: Var },
    Gdn { x: Var, beta: Var, gamma: Var, inverse: bool, norm: Vec<T> },
    ExpandChannels(Var),
    LogisticBits { y: Var, mu: Var, s: Var, dy: Vec<T>, ds: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records primitive operations in execution order for one forward pass and
/// replays them in reverse once to accumulate adjoints.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// reach the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn get_raw(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return shape_err(op, format!("{a:?} vs {b:?}"));
    }
    Ok(())
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Real> Tape<T> {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable input (parameter or variable of interest).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let value = value.check_finite(name)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else if vb.numel() == 1 {
            let y = vb.data()[0];
            va.map(|x| f(x, y))
        } else if va.numel() == 1 {
            let x = va.data()[0];
            vb.map(|y| f(x, y))
        } else {
            return shape_err(name, format!("{:?} vs {:?} (only scalar broadcasting)", va.shape(), vb.shape()));
        };
        self.push(name, out, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(name, out, op, &[a])
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
        if self.value(b).data().iter().any(|&v| v == T::zero()) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.unary("mul_scalar", a, |x| x * c, Op::MulScalar(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::Domain {
                op: "log",
                detail: "non-positive argument".into(),
            });
        }
        self.unary("log", a, |x| x.ln(), Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: "non-positive argument".into(),
            });
        }
        self.unary("sqrt", a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    /// `a^p` for strictly positive `a`.
    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::Domain {
                op: "pow",
                detail: "non-positive base".into(),
            });
        }
        let p = T::of(p);
        self.unary("pow", a, |x| x.powf(p), Op::Pow(a, p))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi) = (T::of(lo), T::of(hi));
        self.unary("clamp", a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::of(v.numel() as f64);
        self.push("mean", Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// 2-D convolution, weights `C_out x C_in x k x k`, padding `(k-1)/2`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, k, k2) = self.value(w).dims4()?;
        if wcin != cin || k != k2 {
            return shape_err("conv2d", format!("input {:?} weight {:?}", self.shape(x), self.shape(w)));
        }
        if stride == 0 || (stride > 1 && (h % stride != 0 || wd % stride != 0)) {
            return shape_err("conv2d", format!("spatial {h}x{wd} not divisible by stride {stride}"));
        }
        if let Some(b) = b {
            same_shape("conv2d bias", self.shape(b), &[cout])?;
        }
        let pad = (k - 1) / 2;
        if h + 2 * pad < k || wd + 2 * pad < k {
            return shape_err("conv2d", format!("kernel {k} larger than padded input {h}x{wd}"));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let g = Geom { n, c_small: cout, h_small: ho, w_small: wo, c_big: cin, h_big: h, w_big: wd, k, stride, pad };
        let bias = b.map(|b| self.value(b).data());
        let out = conv::gather(&g, self.value(x).data(), self.value(w).data(), bias);
        let t = Tensor::new(vec![n, cout, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", t, Op::Conv2d { x, w, b, g }, &inputs)
    }

    /// Transposed convolution, weights `C_in x C_out x k x k`; spatial
    /// extents are multiplied by `stride` exactly.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (wcin, cout, k, k2) = self.value(w).dims4()?;
        if wcin != cin || k != k2 || stride == 0 {
            return shape_err("conv_transpose2d", format!("input {:?} weight {:?}", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            same_shape("conv_transpose2d bias", self.shape(b), &[cout])?;
        }
        let pad = (k - 1) / 2;
        let (ho, wo) = (h * stride, wd * stride);
        let g = Geom { n, c_small: cin, h_small: h, w_small: wd, c_big: cout, h_big: ho, w_big: wo, k, stride, pad };
        let bias = b.map(|b| self.value(b).data());
        let out = conv::scatter(&g, self.value(x).data(), self.value(w).data(), bias);
        let t = Tensor::new(vec![n, cout, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv_transpose2d", t, Op::ConvT { x, w, b, g }, &inputs)
    }

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let (n, _, h, w) = self.value(xs[0]).dims4()?;
        let mut cs = Vec::with_capacity(xs.len());
        for &x in xs {
            let (xn, xc, xh, xw) = self.value(x).dims4()?;
            if (xn, xh, xw) != (n, h, w) {
                return shape_err("concat", format!("{:?} vs {:?}", self.shape(x), self.shape(xs[0])));
            }
            cs.push(xc);
        }
        let ctot: usize = cs.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * ctot * plane);
        for ni in 0..n {
            for (&x, &c) in xs.iter().zip(&cs) {
                data.extend_from_slice(&self.value(x).data()[ni * c * plane..(ni + 1) * c * plane]);
            }
        }
        let t = Tensor::new(vec![n, ctot, h, w], data)?;
        self.push("concat", t, Op::Concat(xs.to_vec()), xs)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).slice_channels(start, len)?;
        self.push("slice_channels", t, Op::SliceChannels { x, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for p in 0..n * c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(p * h2 + y) * w2 + xx] = src[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::new(vec![n, c, h2, w2], out)?;
        self.push("upsample2x", t, Op::Upsample2x(x), &[x])
    }

    /// 2x2 average pooling; spatial extents must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err("avg_pool2", format!("odd spatial extent {h}x{w}"));
        }
        let src = self.value(x).data();
        let (h2, w2) = (h / 2, w / 2);
        let q = T::of(0.25);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for p in 0..n * c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let i = (p * h + 2 * y) * w + 2 * xx;
                    out[(p * h2 + y) * w2 + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * q;
                }
            }
        }
        let t = Tensor::new(vec![n, c, h2, w2], out)?;
        self.push("avg_pool2", t, Op::AvgPool2(x), &[x])
    }

    /// Bilinear backward warp: `out(x, y) = frame(x + u, y + v)` with sample
    /// coordinates clamped to the frame border.
    pub fn warp(&mut self, frame: Var, flow: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(frame).dims4()?;
        let (fnn, fc, fh, fw) = self.value(flow).dims4()?;
        if (fnn, fc, fh, fw) != (n, 2, h, w) {
            return shape_err("warp", format!("frame {:?} flow {:?}", self.shape(frame), self.shape(flow)));
        }
        let src = self.value(frame).data();
        let fl = self.value(flow).data();
        let plane = h * w;
        let mut out = vec![T::zero(); n * c * plane];
        for ni in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let s = WarpSample::new(fl, ni, plane, w, h, x, y);
                    for ci in 0..c {
                        let p = &src[(ni * c + ci) * plane..][..plane];
                        out[(ni * c + ci) * plane + y * w + x] = s.sample(p, w);
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, c, h, w], out)?;
        self.push("warp", t, Op::Warp { frame, flow }, &[frame, flow])
    }

    /// Generalized divisive normalization over channels:
    /// `z_c = x_c * (beta_c + sum_j gamma_cj x_j^2)^(+-1/2)`, the negative
    /// exponent for GDN and the positive one for its inverse.
    pub fn gdn(&mut self, x: Var, beta: Var, gamma: Var, inverse: bool) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        same_shape("gdn beta", self.shape(beta), &[c])?;
        same_shape("gdn gamma", self.shape(gamma), &[c, c])?;
        let bv = self.value(beta).data();
        if bv.iter().any(|&b| b <= T::zero()) {
            return Err(Error::Domain {
                op: "gdn",
                detail: "beta must be positive".into(),
            });
        }
        let gv = self.value(gamma).data();
        let xv = self.value(x).data();
        let plane = h * w;
        let mut norm = vec![T::zero(); n * c * plane];
        let mut sq = vec![T::zero(); c * plane];
        for ni in 0..n {
            let xs = &xv[ni * c * plane..][..c * plane];
            for (s, &v) in sq.iter_mut().zip(xs) {
                *s = v * v;
            }
            for ci in 0..c {
                let nrow = &mut norm[(ni * c + ci) * plane..][..plane];
                nrow.fill(bv[ci]);
                for j in 0..c {
                    let g = gv[ci * c + j];
                    if g == T::zero() {
                        continue;
                    }
                    for (o, &s) in nrow.iter_mut().zip(&sq[j * plane..][..plane]) {
                        *o += g * s;
                    }
                }
            }
        }
        if norm.iter().any(|&v| v <= T::zero()) {
            return Err(Error::Domain {
                op: "gdn",
                detail: "non-positive normalizer".into(),
            });
        }
        let out: Vec<T> = xv
            .iter()
            .zip(&norm)
            .map(|(&xv, &nv)| if inverse { xv * nv.sqrt() } else { xv / nv.sqrt() })
            .collect();
        let t = Tensor::new(vec![n, c, h, w], out)?;
        self.push("gdn", t, Op::Gdn { x, beta, gamma, inverse, norm }, &[x, beta, gamma])
    }

    /// Broadcast a per-channel vector `[C]` to `N x C x H x W`.
    pub fn expand_channels(&mut self, x: Var, n: usize, h: usize, w: usize) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 1 {
            return shape_err("expand_channels", format!("expected [C], got {:?}", v.shape()));
        }
        let c = v.numel();
        let mut data = Vec::with_capacity(n * c * h * w);
        for _ in 0..n {
            for &cv in v.data() {
                data.extend(std::iter::repeat_n(cv, h * w));
            }
        }
        let t = Tensor::new(vec![n, c, h, w], data)?;
        self.push("expand_channels", t, Op::ExpandChannels(x), &[x])
    }

    /// Per-element code length in bits of `y` under a discretized logistic
    /// with location `mu` and scale `s` over the alphabet `[-bound, bound]`.
    /// The scalar math lives in [`crate::rpm::log_pmf`].
    pub fn logistic_bits(&mut self, y: Var, mu: Var, s: Var, bound: i32) -> Result<Var> {
        same_shape("logistic_bits", self.shape(y), self.shape(mu))?;
        same_shape("logistic_bits", self.shape(y), self.shape(s))?;
        let (yv, mv, sv) = (self.value(y).data(), self.value(mu).data(), self.value(s).data());
        if sv.iter().any(|&v| v <= T::zero()) {
            return Err(Error::Domain {
                op: "logistic_bits",
                detail: "scale must be positive".into(),
            });
        }
        let inv_ln2 = std::f64::consts::LOG2_E;
        let n = yv.len();
        let (mut bits, mut dy, mut ds) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let (yy, m, sc) = (yv[i].f64(), mv[i].f64(), sv[i].f64());
            let lp = crate::rpm::log_pmf(yy, m, sc, bound);
            // bits = -log2 p ; a = (y + 0.5 - mu)/s, b = (y - 0.5 - mu)/s
            let a = (yy + 0.5 - m) / sc;
            let b = (yy - 0.5 - m) / sc;
            let dbits_dy = -(lp.d_upper + lp.d_lower) / sc * inv_ln2;
            let dbits_ds = (lp.d_upper * a + lp.d_lower * b) / sc * inv_ln2;
            bits.push(T::of(-lp.log_p * inv_ln2));
            dy.push(T::of(dbits_dy));
            ds.push(T::of(dbits_ds));
        }
        let t = Tensor::new(self.shape(y).to_vec(), bits)?;
        self.push("logistic_bits", t, Op::LogisticBits { y, mu, s, dy, ds }, &[y, mu, s])
    }

    /// Reverse pass from a scalar `loss`. Each node is visited exactly once,
    /// in reverse recording order. The tape cannot be reused afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads: out, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let acc = |grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>| {
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        // Elementwise helper honouring scalar broadcasting on either side.
        let reduce_to = |v: Var, full: Vec<T>| -> Vec<T> {
            if self.value(v).numel() == 1 && full.len() != 1 {
                vec![full.into_iter().sum()]
            } else {
                full
            }
        };
        let bval = |v: Var, idx: usize| -> T {
            let d = self.value(v).data();
            if d.len() == 1 {
                d[0]
            } else {
                d[idx]
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if self.wants(*a) {
                    acc(grads, *a, reduce_to(*a, g.to_vec()));
                }
                if self.wants(*b) {
                    acc(grads, *b, reduce_to(*b, g.iter().map(|&v| sign * v).collect()));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let c = g.iter().enumerate().map(|(k, &gv)| gv * bval(*b, k)).collect();
                    acc(grads, *a, reduce_to(*a, c));
                }
                if self.wants(*b) {
                    let c = g.iter().enumerate().map(|(k, &gv)| gv * bval(*a, k)).collect();
                    acc(grads, *b, reduce_to(*b, c));
                }
            }
            Op::Div(a, b) => {
                if self.wants(*a) {
                    let c = g.iter().enumerate().map(|(k, &gv)| gv / bval(*b, k)).collect();
                    acc(grads, *a, reduce_to(*a, c));
                }
                if self.wants(*b) {
                    let c = g
                        .iter()
                        .enumerate()
                        .map(|(k, &gv)| {
                            let bv = bval(*b, k);
                            -gv * bval(*a, k) / (bv * bv)
                        })
                        .collect();
                    acc(grads, *b, reduce_to(*b, c));
                }
            }
            Op::AddScalar(a) => acc(grads, *a, g.to_vec()),
            Op::MulScalar(a, c) => acc(grads, *a, g.iter().map(|&v| v * *c).collect()),
            Op::Neg(a) => acc(grads, *a, g.iter().map(|&v| -v).collect()),
            Op::Exp(a) => acc(grads, *a, g.iter().zip(out).map(|(&gv, &o)| gv * o).collect()),
            Op::Log(a) => {
                let x = self.value(*a).data();
                acc(grads, *a, g.iter().zip(x).map(|(&gv, &xv)| gv / xv).collect())
            }
            Op::Tanh(a) => acc(
                grads,
                *a,
                g.iter().zip(out).map(|(&gv, &o)| gv * (T::one() - o * o)).collect(),
            ),
            Op::Sigmoid(a) => acc(
                grads,
                *a,
                g.iter().zip(out).map(|(&gv, &o)| gv * o * (T::one() - o)).collect(),
            ),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(
                    grads,
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect(),
                )
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                acc(grads, *a, g.iter().zip(x).map(|(&gv, &xv)| gv * sigmoid(xv)).collect())
            }
            Op::Sqrt(a) => acc(
                grads,
                *a,
                g.iter().zip(out).map(|(&gv, &o)| gv / (o + o)).collect(),
            ),
            Op::Square(a) => {
                let x = self.value(*a).data();
                acc(grads, *a, g.iter().zip(x).map(|(&gv, &xv)| gv * (xv + xv)).collect())
            }
            Op::Pow(a, p) => {
                let x = self.value(*a).data();
                acc(
                    grads,
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&gv, &xv)| gv * *p * xv.powf(*p - T::one()))
                        .collect(),
                )
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                acc(
                    grads,
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv >= *lo && xv <= *hi { gv } else { T::zero() })
                        .collect(),
                )
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                acc(grads, *a, vec![g[0]; n])
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                acc(grads, *a, vec![g[0] / T::of(n as f64); n])
            }
            Op::Conv2d { x, w, b, g: geo } => {
                if self.wants(*x) {
                    let dx = conv::scatter(geo, g, self.value(*w).data(), None);
                    acc(grads, *x, dx);
                }
                if self.wants(*w) {
                    let dw = conv::weight_grad(geo, g, self.value(*x).data());
                    acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db = conv::channel_sum(g, geo.n, geo.c_small, geo.h_small * geo.w_small);
                        acc(grads, *b, db);
                    }
                }
            }
            Op::ConvT { x, w, b, g: geo } => {
                if self.wants(*x) {
                    let dx = conv::gather(geo, g, self.value(*w).data(), None);
                    acc(grads, *x, dx);
                }
                if self.wants(*w) {
                    let dw = conv::weight_grad(geo, self.value(*x).data(), g);
                    acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db = conv::channel_sum(g, geo.n, geo.c_big, geo.h_big * geo.w_big);
                        acc(grads, *b, db);
                    }
                }
            }
            Op::Concat(xs) => {
                let (n, ctot, h, w) = node.value.dims4()?;
                let plane = h * w;
                let mut off = 0;
                for &x in xs {
                    let c = self.value(x).dims4()?.1;
                    if self.wants(x) {
                        let mut d = Vec::with_capacity(n * c * plane);
                        for ni in 0..n {
                            let base = (ni * ctot + off) * plane;
                            d.extend_from_slice(&g[base..base + c * plane]);
                        }
                        acc(grads, x, d);
                    }
                    off += c;
                }
            }
            Op::SliceChannels { x, start } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let len = node.value.dims4()?.1;
                let plane = h * w;
                let mut d = vec![T::zero(); n * c * plane];
                for ni in 0..n {
                    let dst = (ni * c + start) * plane;
                    let src = ni * len * plane;
                    d[dst..dst + len * plane].copy_from_slice(&g[src..src + len * plane]);
                }
                acc(grads, *x, d);
            }
            Op::Reshape(x) => acc(grads, *x, g.to_vec()),
            Op::Upsample2x(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (h2, w2) = (2 * h, 2 * w);
                let mut d = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            d[(p * h + y / 2) * w + xx / 2] += g[(p * h2 + y) * w2 + xx];
                        }
                    }
                }
                acc(grads, *x, d);
            }
            Op::AvgPool2(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (h2, w2) = (h / 2, w / 2);
                let q = T::of(0.25);
                let mut d = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            let gv = g[(p * h2 + y) * w2 + xx] * q;
                            let i = (p * h + 2 * y) * w + 2 * xx;
                            d[i] = gv;
                            d[i + 1] = gv;
                            d[i + w] = gv;
                            d[i + w + 1] = gv;
                        }
                    }
                }
                acc(grads, *x, d);
            }
            Op::Warp { frame, flow } => {
                let (n, c, h, w) = self.value(*frame).dims4()?;
                let plane = h * w;
                let src = self.value(*frame).data();
                let fl = self.value(*flow).data();
                let want_frame = self.wants(*frame);
                let want_flow = self.wants(*flow);
                let mut dframe = if want_frame { vec![T::zero(); n * c * plane] } else { Vec::new() };
                let mut dflow = if want_flow { vec![T::zero(); n * 2 * plane] } else { Vec::new() };
                for ni in 0..n {
                    for y in 0..h {
                        for x in 0..w {
                            let s = WarpSample::new(fl, ni, plane, w, h, x, y);
                            let o = y * w + x;
                            for ci in 0..c {
                                let gv = g[(ni * c + ci) * plane + o];
                                if want_frame {
                                    s.scatter(&mut dframe[(ni * c + ci) * plane..][..plane], w, gv);
                                }
                                if want_flow {
                                    let p = &src[(ni * c + ci) * plane..][..plane];
                                    let (du, dv) = s.grad_pos(p, w);
                                    dflow[(ni * 2) * plane + o] += gv * du;
                                    dflow[(ni * 2 + 1) * plane + o] += gv * dv;
                                }
                            }
                        }
                    }
                }
                if want_frame {
                    acc(grads, *frame, dframe);
                }
                if want_flow {
                    acc(grads, *flow, dflow);
                }
            }
            Op::Gdn { x, beta, gamma, inverse, norm } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let plane = h * w;
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let half = T::of(0.5);
                // z = x * norm^p with p = -1/2 (GDN) or 1/2 (IGDN)
                // a_c = g_c x_c p norm_c^(p-1)
                let a: Vec<T> = (0..xv.len())
                    .map(|k| {
                        let nv = norm[k];
                        if *inverse {
                            g[k] * xv[k] * half / nv.sqrt()
                        } else {
                            -g[k] * xv[k] * half / (nv * nv.sqrt())
                        }
                    })
                    .collect();
                if self.wants(*x) {
                    let mut dx: Vec<T> = (0..xv.len())
                        .map(|k| {
                            let nv = norm[k];
                            if *inverse {
                                g[k] * nv.sqrt()
                            } else {
                                g[k] / nv.sqrt()
                            }
                        })
                        .collect();
                    for ni in 0..n {
                        for ci in 0..c {
                            for kk in 0..c {
                                let gm = gv[ci * c + kk];
                                if gm == T::zero() {
                                    continue;
                                }
                                let arow = &a[(ni * c + ci) * plane..][..plane];
                                let base = (ni * c + kk) * plane;
                                for p in 0..plane {
                                    let two = xv[base + p] + xv[base + p];
                                    dx[base + p] += two * arow[p] * gm;
                                }
                            }
                        }
                    }
                    acc(grads, *x, dx);
                }
                if self.wants(*beta) {
                    acc(grads, *beta, conv::channel_sum(&a, n, c, plane));
                }
                if self.wants(*gamma) {
                    let mut dg = vec![T::zero(); c * c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let arow = &a[(ni * c + ci) * plane..][..plane];
                            for kk in 0..c {
                                let xrow = &xv[(ni * c + kk) * plane..][..plane];
                                let s: T = arow.iter().zip(xrow).map(|(&av, &xk)| av * xk * xk).sum();
                                dg[ci * c + kk] += s;
                            }
                        }
                    }
                    acc(grads, *gamma, dg);
                }
            }
            Op::ExpandChannels(x) => {
                let c = self.value(*x).numel();
                let (n, _, h, w) = node.value.dims4()?;
                acc(grads, *x, conv::channel_sum(g, n, c, h * w));
            }
            Op::LogisticBits { y, mu, s, dy, ds } => {
                if self.wants(*y) {
                    acc(grads, *y, g.iter().zip(dy).map(|(&gv, &d)| gv * d).collect());
                }
                if self.wants(*mu) {
                    acc(grads, *mu, g.iter().zip(dy).map(|(&gv, &d)| -gv * d).collect());
                }
                if self.wants(*s) {
                    acc(grads, *s, g.iter().zip(ds).map(|(&gv, &d)| gv * d).collect());
                }
            }
        }
        Ok(())
    }
}

/// Bilinear sample location with clamp-to-border semantics.
struct WarpSample<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: T,
    fy: T,
    // derivative of the clamped coordinate w.r.t. the displacement
    gx: T,
    gy: T,
}

impl<T: Real> WarpSample<T> {
    #[inline]
    fn new(flow: &[T], ni: usize, plane: usize, w: usize, h: usize, x: usize, y: usize) -> Self {
        let u = flow[(ni * 2) * plane + y * w + x];
        let v = flow[(ni * 2 + 1) * plane + y * w + x];
        let (px, gx) = clamp_coord(T::of(x as f64) + u, w);
        let (py, gy) = clamp_coord(T::of(y as f64) + v, h);
        let fx0 = px.floor();
        let fy0 = py.floor();
        let x0 = fx0.to_usize().unwrap_or(0).min(w - 1);
        let y0 = fy0.to_usize().unwrap_or(0).min(h - 1);
        Self {
            x0,
            x1: (x0 + 1).min(w - 1),
            y0,
            y1: (y0 + 1).min(h - 1),
            fx: px - fx0,
            fy: py - fy0,
            gx,
            gy,
        }
    }

    #[inline]
    fn sample(&self, p: &[T], w: usize) -> T {
        let one = T::one();
        let (a, b) = (p[self.y0 * w + self.x0], p[self.y0 * w + self.x1]);
        let (c, d) = (p[self.y1 * w + self.x0], p[self.y1 * w + self.x1]);
        a * (one - self.fx) * (one - self.fy) + b * self.fx * (one - self.fy) + c * (one - self.fx) * self.fy
            + d * self.fx * self.fy
    }

    #[inline]
    fn scatter(&self, d: &mut [T], w: usize, gv: T) {
        let one = T::one();
        d[self.y0 * w + self.x0] += gv * (one - self.fx) * (one - self.fy);
        d[self.y0 * w + self.x1] += gv * self.fx * (one - self.fy);
        d[self.y1 * w + self.x0] += gv * (one - self.fx) * self.fy;
        d[self.y1 * w + self.x1] += gv * self.fx * self.fy;
    }

    #[inline]
    fn grad_pos(&self, p: &[T], w: usize) -> (T, T) {
        let one = T::one();
        let (a, b) = (p[self.y0 * w + self.x0], p[self.y0 * w + self.x1]);
        let (c, d) = (p[self.y1 * w + self.x0], p[self.y1 * w + self.x1]);
        let du = ((b - a) * (one - self.fy) + (d - c) * self.fy) * self.gx;
        let dv = ((c - a) * (one - self.fx) + (d - b) * self.fx) * self.gy;
        (du, dv)
    }
}

#[inline]
fn clamp_coord<T: Real>(p: T, len: usize) -> (T, T) {
    let hi = T::of((len - 1) as f64);
    if p < T::zero() {
        (T::zero(), T::zero())
    } else if p > hi {
        (hi, T::zero())
    } else {
        (p, T::one())
    }
}
