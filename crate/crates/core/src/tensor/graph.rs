use super::kernels::{self, ConvGeom};
use super::{strides, Real, Result, Tensor, TensorError};
use crate::fourier::fft::fft2_planes;

/// Handle to a value recorded on a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Abs(Var),
    LeakyRelu(Var, T),
    Gelu(Var),
    Sigmoid(Var),
    Cos(Var),
    Sin(Var),
    Atan2 { im: Var, re: Var, eps: T },
    Magnitude { re: Var, im: Var },
    Sum(Var),
    Mean(Var),
    MeanSpatial(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    Repeat(Var, usize),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MatMul { a: Var, b: Var, batch: usize, bb: usize, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, cin: usize, cout: usize },
    Softmax(Var, usize),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Upsample2(Var),
    AvgPool2(Var),
    Fft2(Var),
    Ifft2 { re: Var, im: Var },
}

struct Node<T> {
    name: &'static str,
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of executed operations. Forward ops append nodes in execution order,
/// so every node's inputs precede it; [`Graph::backward`] replays the tape once
/// in reverse.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients of the leaves that required them.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
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

    /// Operation name and output shape of every node in execution order.
    pub fn trace(&self) -> impl Iterator<Item = (&'static str, &[usize])> + '_ {
        self.nodes.iter().map(|n| (n.name, n.value.shape()))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            name,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            name: "leaf",
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let t = Tensor::new(x.shape(), data)?;
        self.push(name, t, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let t = self.value(a).map(f);
        self.push(name, t, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |p, q| p * q)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, Op::Div(a, b), |p, q| p / q)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary("add_scalar", a, Op::AddScalar(a), |v| v + c)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, Op::Abs(a), |v| v.abs())
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var> {
        self.unary("leaky_relu", a, Op::LeakyRelu(a, slope), |v| if v > T::zero() { v } else { v * slope })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, Op::Gelu(a), gelu_value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid(a), sigmoid_value)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary("cos", a, Op::Cos(a), |v| v.cos())
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary("sin", a, Op::Sin(a), |v| v.sin())
    }

    /// `atan2(im, re)`; the adjoint denominator carries `eps²` so it stays
    /// defined at the origin.
    pub fn atan2(&mut self, im: Var, re: Var, eps: T) -> Result<Var> {
        self.zip("atan2", im, re, Op::Atan2 { im, re, eps }, |y, x| y.atan2(x))
    }

    /// `sqrt(re² + im² + eps²)`.
    pub fn magnitude(&mut self, re: Var, im: Var, eps: T) -> Result<Var> {
        let e2 = eps * eps;
        self.zip("magnitude", re, im, Op::Magnitude { re, im }, |x, y| (x * x + y * y + e2).sqrt())
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).mean();
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// `[B, C, H, W] -> [B, C]` average over the spatial plane.
    pub fn mean_spatial(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(TensorError::invalid("mean_spatial", format!("expected rank 4, got {s:?}")));
        }
        let plane = s[2] * s[3];
        let n = T::of(plane as f64);
        let data = self.value(a).data().chunks(plane).map(|p| p.iter().copied().sum::<T>() / n).collect();
        let t = Tensor::new(&[s[0], s[1]], data)?;
        self.push("mean_spatial", t, Op::MeanSpatial(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(a), &[a])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let rank = src.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&ax| ax >= rank || std::mem::replace(&mut seen[ax], true)) {
            return Err(TensorError::invalid("permute", format!("bad axes {axes:?} for rank {rank}")));
        }
        let t = permute_tensor(src, axes);
        self.push("permute", t, Op::Permute(a, axes.to_vec()), &[a])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(TensorError::invalid("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(a, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(TensorError::mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = outer_inner(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let s = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * s..(o + 1) * s]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(&shape, data)?;
        self.push("concat", t, Op::Concat(parts.to_vec(), axis), parts)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(TensorError::invalid("narrow", format!("[{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let (outer, n, inner) = outer_inner(&s, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let t = Tensor::new(&shape, data)?;
        self.push("narrow", t, Op::Narrow { x, axis, start }, &[x])
    }

    /// Stacks `n` copies along a new leading axis.
    pub fn repeat(&mut self, x: Var, n: usize) -> Result<Var> {
        let src = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(src.shape());
        let data = src.data().repeat(n);
        let t = Tensor::new(&shape, data)?;
        self.push("repeat", t, Op::Repeat(x, n), &[x])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(TensorError::mismatch("conv2d", &xs, &ws));
        }
        if ws[2] % 2 == 0 || ws[3] % 2 == 0 || stride == 0 {
            return Err(TensorError::invalid("conv2d", format!("kernel {ws:?} must be odd, stride {stride} >= 1")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(TensorError::mismatch("conv2d bias", self.shape(b), &[ws[0]]));
            }
        }
        let (h, wd) = (xs[2] + 2 * pad, xs[3] + 2 * pad);
        if h < ws[2] || wd < ws[3] {
            return Err(TensorError::invalid(
                "conv2d",
                format!("kernel larger than padded input for input {xs:?}, kernel {ws:?}, stride {stride}, padding {pad}"),
            ));
        }
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            oh: (h - ws[2]) / stride + 1,
            ow: (wd - ws[3]) / stride + 1,
        };
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let t = Tensor::new(&[geom.batch, geom.cout, geom.oh, geom.ow], data)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("conv2d", t, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// `[.., m, k] x [.., k, n]`; `b` may also be a plain matrix shared across the leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(TensorError::mismatch("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        if k != k2 || !(lead_b.is_empty() || lead_a == lead_b) {
            return Err(TensorError::mismatch("matmul", &sa, &sb));
        }
        let batch: usize = lead_a.iter().product();
        let bb = if lead_b.is_empty() { 1 } else { batch };
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), batch, bb, m, k, n);
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let t = Tensor::new(&shape, data)?;
        self.push("matmul", t, Op::MatMul { a, b, batch, bb, m, k, n }, &[a, b])
    }

    /// `x[.., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(TensorError::mismatch("linear", &sx, &sw));
        }
        let (cin, cout) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(TensorError::mismatch("linear bias", self.shape(b), &[cout]));
            }
        }
        let rows = self.value(x).len() / cin;
        let mut data = kernels::matmul(self.value(x).data(), self.value(w).data(), 1, 1, rows, cin, cout);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in data.chunks_mut(cout) {
                row.iter_mut().zip(bias).for_each(|(v, &bv)| *v += bv);
            }
        }
        let mut shape = sx;
        *shape.last_mut().expect("rank >= 1") = cout;
        let t = Tensor::new(&shape, data)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("linear", t, Op::Linear { x, w, b, rows, cin, cout }, &inputs)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::invalid("softmax", format!("axis {axis} out of range for {s:?}")));
        }
        let t = softmax_tensor(self.value(x), axis);
        self.push("softmax", t, Op::Softmax(x, axis), &[x])
    }

    /// Normalizes over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().ok_or_else(|| TensorError::invalid("layer_norm", "rank 0"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::mismatch("layer_norm", &s, self.shape(gamma)));
        }
        if eps <= T::zero() {
            return Err(TensorError::invalid("layer_norm", "eps must be positive"));
        }
        let cn = T::of(c as f64);
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let src = self.value(x).data();
        let rows = src.len() / c;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mu = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / cn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..c {
                let xh = (row[i] - mu) * rs;
                xhat[r * c + i] = xh;
                out[r * c + i] = g[i] * xh + bt[i];
            }
        }
        let t = Tensor::new(&s, out)?;
        self.push("layer_norm", t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::invalid("upsample2", format!("expected rank 4, got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); src.len() * 4];
        for (p, plane) in src.chunks(h * w).enumerate() {
            let dst = &mut data[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::new(&[s[0], s[1], 2 * h, 2 * w], data)?;
        self.push("upsample2", t, Op::Upsample2(x), &[x])
    }

    /// 2x2 average pooling of `[B, C, H, W]` with even `H`, `W`.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(TensorError::invalid("avg_pool2", format!("needs rank 4 with even extents, got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::of(0.25);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len() / 4);
        for plane in src.chunks(h * w) {
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    data.push((plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) * quarter);
                }
            }
        }
        let t = Tensor::new(&[s[0], s[1], oh, ow], data)?;
        self.push("avg_pool2", t, Op::AvgPool2(x), &[x])
    }

    /// Unnormalized 2D DFT of a real tensor over its last two axes.
    /// Returns `(re, im)` with the input's shape.
    pub fn fft2(&mut self, x: Var) -> Result<(Var, Var)> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(TensorError::invalid("fft2", "rank < 2"));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = self.value(x).len() / (h * w);
        let (re, im) = fft2_planes(self.value(x).data(), None, planes, h, w, false);
        let mut data = re;
        data.extend(im);
        let mut stacked = vec![2];
        stacked.extend_from_slice(&s);
        let t = Tensor::new(&stacked, data)?;
        let both = self.push("fft2", t, Op::Fft2(x), &[x])?;
        let re = self.narrow(both, 0, 0, 1)?;
        let im = self.narrow(both, 0, 1, 1)?;
        Ok((self.reshape(re, &s)?, self.reshape(im, &s)?))
    }

    /// Real part of the inverse 2D DFT, scaled by `1/(H·W)`.
    pub fn ifft2(&mut self, re: Var, im: Var) -> Result<Var> {
        self.same_shape("ifft2", re, im)?;
        let s = self.shape(re).to_vec();
        if s.len() < 2 {
            return Err(TensorError::invalid("ifft2", "rank < 2"));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = self.value(re).len() / (h * w);
        let (out, _) = fft2_planes(self.value(re).data(), Some(self.value(im).data()), planes, h, w, true);
        let norm = T::one() / T::of((h * w) as f64);
        let t = Tensor::new(&s, out.into_iter().map(|v| v * norm).collect())?;
        self.push("ifft2", t, Op::Ifft2 { re, im }, &[re, im])
    }

    /// Reverse pass from a scalar `loss`. Can run once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<Grads<T>> {
        if self.consumed {
            return Err(TensorError::AlreadyConsumed);
        }
        let ls = self.value(loss);
        if ls.len() != 1 {
            return Err(TensorError::NonScalarLoss(ls.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), Op::Leaf) => Some(Tensor::new(n.value.shape(), g).expect("grad matches value shape")),
                _ => None,
            })
            .collect();
        Ok(Grads { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        debug_assert_eq!(g.len(), self.nodes[v.0].value.len());
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let map1 = |a: Var, f: &dyn Fn(usize) -> T| -> Vec<T> { (0..val(a).len()).map(f).collect() };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.iter().zip(x).map(|(&gv, &xv)| gv * xv).collect());
                }
            }
            Op::Div(a, b) => {
                let y = val(*b);
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.iter().zip(y).map(|(&gv, &yv)| gv / yv).collect());
                }
                if self.needs(*b) {
                    // d(x/y)/dy = -out/y
                    let gb = (0..g.len()).map(|k| -g[k] * out[k] / y[k]).collect();
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.iter().map(|&v| v * *c).collect()),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Abs(a) => {
                let x = val(*a);
                self.accumulate(grads, *a, map1(*a, &|k| g[k] * sign(x[k])));
            }
            Op::LeakyRelu(a, slope) => {
                let x = val(*a);
                self.accumulate(grads, *a, map1(*a, &|k| if x[k] > T::zero() { g[k] } else { g[k] * *slope }));
            }
            Op::Gelu(a) => {
                let x = val(*a);
                self.accumulate(grads, *a, map1(*a, &|k| g[k] * gelu_derivative(x[k])));
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, map1(*a, &|k| g[k] * out[k] * (T::one() - out[k])));
            }
            Op::Cos(a) => {
                let x = val(*a);
                self.accumulate(grads, *a, map1(*a, &|k| -g[k] * x[k].sin()));
            }
            Op::Sin(a) => {
                let x = val(*a);
                self.accumulate(grads, *a, map1(*a, &|k| g[k] * x[k].cos()));
            }
            Op::Atan2 { im, re, eps } => {
                let (y, x) = (val(*im), val(*re));
                let e2 = *eps * *eps;
                let den: Vec<T> = (0..g.len()).map(|k| x[k] * x[k] + y[k] * y[k] + e2).collect();
                if self.needs(*im) {
                    self.accumulate(grads, *im, (0..g.len()).map(|k| g[k] * x[k] / den[k]).collect());
                }
                if self.needs(*re) {
                    self.accumulate(grads, *re, (0..g.len()).map(|k| -g[k] * y[k] / den[k]).collect());
                }
            }
            Op::Magnitude { re, im } => {
                let (x, y) = (val(*re), val(*im));
                if self.needs(*re) {
                    self.accumulate(grads, *re, (0..g.len()).map(|k| g[k] * x[k] / out[k]).collect());
                }
                if self.needs(*im) {
                    self.accumulate(grads, *im, (0..g.len()).map(|k| g[k] * y[k] / out[k]).collect());
                }
            }
            Op::Sum(a) => self.accumulate(grads, *a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                self.accumulate(grads, *a, vec![g[0] / T::of(n as f64); n]);
            }
            Op::MeanSpatial(a) => {
                let s = self.nodes[a.0].value.shape();
                let plane = s[2] * s[3];
                let inv = T::one() / T::of(plane as f64);
                let mut ga = Vec::with_capacity(val(*a).len());
                for &gv in g {
                    ga.extend(std::iter::repeat(gv * inv).take(plane));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let gt = Tensor::new(node.value.shape(), g.to_vec()).expect("grad shape");
                self.accumulate(grads, *a, permute_tensor(&gt, &inv).into_data());
            }
            Op::Concat(parts, axis) => {
                let s = node.value.shape();
                let (outer, total, inner) = outer_inner(s, *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.shape()[*axis];
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[base..base + n * inner]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    offset += n;
                }
            }
            Op::Narrow { x, axis, start } => {
                let s = self.nodes[x.0].value.shape();
                let (outer, n, inner) = outer_inner(s, *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![T::zero(); val(*x).len()];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Repeat(x, n) => {
                let len = val(*x).len();
                let mut gx = vec![T::zero(); len];
                for c in 0..*n {
                    gx.iter_mut().zip(&g[c * len..(c + 1) * len]).for_each(|(a, &b)| *a += b);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Conv2d { x, w, b, geom } => {
                if self.needs(*x) {
                    self.accumulate(grads, *x, kernels::conv2d_backward_input(g, val(*w), geom));
                }
                let want_b = b.is_some_and(|b| self.needs(b));
                if self.needs(*w) || want_b {
                    let (gw, gb) = kernels::conv2d_backward_params(g, val(*x), geom);
                    self.accumulate(grads, *w, gw);
                    if let Some(b) = b {
                        self.accumulate(grads, *b, gb);
                    }
                }
            }
            Op::MatMul { a, b, batch, bb, m, k, n } => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, kernels::matmul_grad_a(g, val(*b), *batch, *bb, *m, *k, *n));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, kernels::matmul_grad_b(g, val(*a), *batch, *bb, *m, *k, *n));
                }
            }
            Op::Linear { x, w, b, rows, cin, cout } => {
                if self.needs(*x) {
                    self.accumulate(grads, *x, kernels::matmul_grad_a(g, val(*w), 1, 1, *rows, *cin, *cout));
                }
                if self.needs(*w) {
                    self.accumulate(grads, *w, kernels::matmul_grad_b(g, val(*x), 1, 1, *rows, *cin, *cout));
                }
                if let Some(b) = b {
                    let mut gb = vec![T::zero(); *cout];
                    for row in g.chunks(*cout) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Softmax(x, axis) => {
                let (outer, n, inner) = outer_inner(node.value.shape(), *axis);
                let mut gx = vec![T::zero(); out.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |t: usize| (o * n + t) * inner + j;
                        let dot = (0..n).map(|t| g[idx(t)] * out[idx(t)]).sum::<T>();
                        for t in 0..n {
                            gx[idx(t)] = out[idx(t)] * (g[idx(t)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gam = val(*gamma);
                let c = gam.len();
                let cn = T::of(c as f64);
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let xr = &xhat[r * c..(r + 1) * c];
                        let gh: Vec<T> = gr.iter().zip(gam).map(|(&a, &b)| a * b).collect();
                        let m1 = gh.iter().copied().sum::<T>() / cn;
                        let m2 = gh.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() / cn;
                        for i in 0..c {
                            gx[r * c + i] = rs * (gh[i] - m1 - xr[i] * m2);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut gg = vec![T::zero(); c];
                    let mut gb = vec![T::zero(); c];
                    for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for i in 0..c {
                            gg[i] += gr[i] * xr[i];
                            gb[i] += gr[i];
                        }
                    }
                    self.accumulate(grads, *gamma, gg);
                    self.accumulate(grads, *beta, gb);
                }
            }
            Op::Upsample2(x) => {
                let s = self.nodes[x.0].value.shape();
                let (h, w) = (s[2], s[3]);
                let mut gx = vec![T::zero(); val(*x).len()];
                for (p, dst) in gx.chunks_mut(h * w).enumerate() {
                    let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::AvgPool2(x) => {
                let s = self.nodes[x.0].value.shape();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::of(0.25);
                let mut gx = vec![T::zero(); val(*x).len()];
                for (p, dst) in gx.chunks_mut(h * w).enumerate() {
                    let src = &g[p * oh * ow..(p + 1) * oh * ow];
                    for y in 0..h {
                        for xx in 0..w {
                            dst[y * w + xx] = src[(y / 2) * ow + xx / 2] * quarter;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Fft2(x) => {
                let s = self.nodes[x.0].value.shape();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let n = val(*x).len();
                let planes = n / (h * w);
                // adjoint of the forward DFT is the unnormalized inverse; keep the real part
                let (gx, _) = fft2_planes(&g[..n], Some(&g[n..]), planes, h, w, true);
                self.accumulate(grads, *x, gx);
            }
            Op::Ifft2 { re, im } => {
                let s = node.value.shape();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let planes = g.len() / (h * w);
                let norm = T::one() / T::of((h * w) as f64);
                let (gr, gi) = fft2_planes(g, None, planes, h, w, false);
                self.accumulate(grads, *re, gr.into_iter().map(|v| v * norm).collect());
                self.accumulate(grads, *im, gi.into_iter().map(|v| v * norm).collect());
            }
        }
    }
}

#[inline]
fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

const GELU_C: f64 = 0.044715;
// sqrt(2/pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

pub fn gelu_value<T: Real>(x: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_derivative<T: Real>(x: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
}

pub fn sigmoid_value<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softmax_tensor<T: Real>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = outer_inner(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |t: usize| (o * n + t) * inner + j;
            let mx = (0..n).map(|t| src[idx(t)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for t in 0..n {
                let e = (src[idx(t)] - mx).exp();
                out[idx(t)] = e;
                total += e;
            }
            for t in 0..n {
                out[idx(t)] = out[idx(t)] / total;
            }
        }
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

pub(crate) fn permute_tensor<T: Real>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let s = x.shape();
    let src_strides = strides(s);
    let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let rank = s.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(x.data()[off]);
        // advance the output multi-index, tracking the source offset
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[axes[d]];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[axes[d]] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permuted shape")
}
