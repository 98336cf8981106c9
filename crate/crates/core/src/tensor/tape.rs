use super::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, transpose, Patch};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride and zero padding, applied identically on both spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvGeometry { stride, padding }
    }

    pub fn conv_out(&self, size: usize, kernel: usize) -> Option<usize> {
        if self.stride == 0 {
            return None;
        }
        let padded = size + 2 * self.padding;
        (padded >= kernel).then(|| (padded - kernel) / self.stride + 1)
    }

    pub fn conv_transpose_out(&self, size: usize, kernel: usize) -> Option<usize> {
        if self.stride == 0 || size == 0 {
            return None;
        }
        let grown = (size - 1) * self.stride + kernel;
        (grown > 2 * self.padding).then(|| grown - 2 * self.padding)
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy { x: Var, s: Var },
    AddBias { x: Var, b: Var },
    MatMul(Var, Var),
    Transpose(Var),
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Reshape(Var),
    Pad { x: Var, pads: [usize; 4] },
    Crop { x: Var, top: usize, left: usize },
    Concat(Vec<Var>),
    Conv2d { x: Var, w: Var, geom: ConvGeometry },
    ConvTranspose2d { x: Var, w: Var, geom: ConvGeometry },
    LeakyRelu { x: Var, slope: f64 },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Bce { p: Var, labels: Vec<f64>, eps: f64 },
    SpectralNorm { w: Var, u: Vec<f64>, v: Vec<f64>, sigma: f64, floored: bool },
}

struct Entry {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records every operation of one forward pass in execution order; the
/// backward pass replays that record in exact reverse.
#[derive(Default)]
pub struct Tape {
    entries: Vec<Entry>,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

fn conv_patch(channels: usize, h: usize, w: usize, kh: usize, kw: usize, g: ConvGeometry, oh: usize, ow: usize) -> Patch {
    Patch {
        channels,
        height: h,
        width: w,
        kernel_h: kh,
        kernel_w: kw,
        stride: g.stride,
        padding: g.padding,
        out_h: oh,
        out_w: ow,
    }
}

/// `op(a)·op(b)` for row-major matrices, where `op` optionally transposes.
#[allow(clippy::too_many_arguments)]
fn mm(a: &[f64], ar: usize, ac: usize, ta: bool, b: &[f64], br: usize, bc: usize, tb: bool) -> (Vec<f64>, usize, usize) {
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    debug_assert_eq!(k, k2);
    let mut out = vec![0.0; m * n];
    match (ta, tb) {
        (false, false) => gemm_nn(m, k, n, a, b, &mut out),
        (true, false) => gemm_tn(m, k, n, a, b, &mut out),
        (false, true) => gemm_nt(m, k, n, a, b, &mut out),
        (true, true) => {
            let at = transpose(ar, ac, a);
            gemm_nt(m, k, n, &at, b, &mut out)
        }
    }
    (out, m, n)
}

fn add_into(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => d.iter_mut().zip(&src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.entries[v.0].requires_grad);
        self.entries.push(Entry {
            value,
            op,
            requires_grad,
        });
        Var(self.entries.len() - 1)
    }

    /// Records a leaf. It receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        let mut value = tensor;
        let _ = value.set_grad(None);
        self.entries.push(Entry {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.entries.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Copy of `x` cut off from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.entries[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.entries[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.entries[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.entries[v.0].requires_grad
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(t, op, &[a, b])
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x).map(f);
        self.push(t, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    /// `x · s` for a one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return shape_err(format!("scale_by expects a scalar, got {:?}", self.shape(s)));
        }
        let c = self.value(s).data()[0];
        let t = self.value(x).map(|v| v * c);
        Ok(self.push(t, Op::ScaleBy { x, s }, &[x, s]))
    }

    /// Adds `b[c]` along axis 1 of `x` (dense rows or NCHW channels).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() < 2 || self.value(b).numel() != xs[1] {
            return shape_err(format!("bias {:?} for input {:?}", self.shape(b), xs));
        }
        let channels = xs[1];
        let inner: usize = xs[2..].iter().product();
        let bias = self.value(b).data();
        let mut t = self.value(x).clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += bias[(i / inner) % channels];
        }
        Ok(self.push(t, Op::AddBias { x, b }, &[x, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul of {sa:?} and {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return shape_err(format!("transpose needs a matrix, got {s:?}"));
        }
        let (r, c) = (s[0], s[1]);
        let data = transpose(r, c, self.value(x).data());
        Ok(self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(x), &[x]))
    }

    /// Batched `op(a)·op(b)` over rank-3 tensors.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err(format!("bmm of {sa:?} and {sb:?}"));
        }
        let k_a = if ta { sa[1] } else { sa[2] };
        let k_b = if tb { sb[2] } else { sb[1] };
        if k_a != k_b {
            return shape_err(format!("bmm inner dims of {sa:?} and {sb:?} (ta={ta}, tb={tb})"));
        }
        let batch = sa[0];
        let (pa, pb) = (sa[1] * sa[2], sb[1] * sb[2]);
        let mut data = Vec::new();
        let (mut m, mut n) = (0, 0);
        for i in 0..batch {
            let av = &self.value(a).data()[i * pa..(i + 1) * pa];
            let bv = &self.value(b).data()[i * pb..(i + 1) * pb];
            let (out, om, on) = mm(av, sa[1], sa[2], ta, bv, sb[1], sb[2], tb);
            data.extend(out);
            (m, n) = (om, on);
        }
        Ok(self.push(Tensor::from_parts(vec![batch, m, n], data), Op::Bmm { a, b, ta, tb }, &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Zero padding of an NCHW tensor: `[top, bottom, left, right]`.
    pub fn pad2d(&mut self, x: Var, pads: [usize; 4]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return shape_err(format!("pad2d needs NCHW, got {s:?}"));
        }
        let [top, bottom, left, right] = pads;
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h + top + bottom, w + left + right);
        let planes = s[0] * s[1];
        let src = self.value(x).data();
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for y in 0..h {
                let from = &src[(p * h + y) * w..(p * h + y + 1) * w];
                let at = (p * oh + y + top) * ow + left;
                out[at..at + w].copy_from_slice(from);
            }
        }
        let t = Tensor::from_parts(vec![s[0], s[1], oh, ow], out);
        Ok(self.push(t, Op::Pad { x, pads }, &[x]))
    }

    /// Spatial window `[top, top+height) × [left, left+width)` of an NCHW tensor.
    pub fn crop2d(&mut self, x: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return shape_err(format!("crop2d needs NCHW, got {s:?}"));
        }
        if height == 0 || width == 0 || top + height > s[2] || left + width > s[3] {
            return shape_err(format!(
                "crop [{top}..{}) x [{left}..{}) out of bounds for {s:?}",
                top + height,
                left + width
            ));
        }
        let (h, w) = (s[2], s[3]);
        let planes = s[0] * s[1];
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(planes * height * width);
        for p in 0..planes {
            for y in 0..height {
                let at = (p * h + y + top) * w + left;
                out.extend_from_slice(&src[at..at + width]);
            }
        }
        let t = Tensor::from_parts(vec![s[0], s[1], height, width], out);
        Ok(self.push(t, Op::Crop { x, top, left }, &[x]))
    }

    /// Concatenation along axis 1 (features or channels).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if base.len() < 2 {
            return shape_err(format!("concat needs rank >= 2, got {base:?}"));
        }
        let mut channels = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return shape_err(format!("concat of {base:?} and {s:?}"));
            }
            channels += s[1];
        }
        let inner: usize = base[2..].iter().product();
        let mut out = Vec::with_capacity(base[0] * channels * inner);
        for n in 0..base[0] {
            for p in parts {
                let v = self.value(*p);
                let block = v.dim(1) * inner;
                out.extend_from_slice(&v.data()[n * block..(n + 1) * block]);
            }
        }
        let mut shape = base;
        shape[1] = channels;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(parts.to_vec()), parts))
    }

    /// Cross-correlation of `x` (N,C,H,W) with `w` (O,C,kh,kw).
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeometry) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 {
            return shape_err(format!("conv2d of {xs:?} with kernel {ws:?}"));
        }
        if xs[1] != ws[1] {
            return shape_err(format!("conv2d channel mismatch: input {xs:?}, kernel {ws:?}"));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let (Some(oh), Some(ow)) = (geom.conv_out(h, kh), geom.conv_out(wd, kw)) else {
            return shape_err(format!("conv2d of {xs:?} with kernel {ws:?} and {geom:?} has no output"));
        };
        let patch = conv_patch(c, h, wd, kh, kw, geom, oh, ow);
        let mut col = vec![0.0; patch.rows() * patch.cols()];
        let mut out = vec![0.0; n * o * oh * ow];
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        for i in 0..n {
            im2col(&xv[i * c * h * wd..(i + 1) * c * h * wd], &patch, &mut col);
            let dst = &mut out[i * o * oh * ow..(i + 1) * o * oh * ow];
            gemm_nn(o, patch.rows(), patch.cols(), wv, &col, dst);
        }
        let t = Tensor::from_parts(vec![n, o, oh, ow], out);
        Ok(self.push(t, Op::Conv2d { x, w, geom }, &[x, w]))
    }

    /// Transposed convolution of `x` (N,Cin,H,W) with `w` (Cin,Cout,kh,kw);
    /// the adjoint of [`Tape::conv2d`]'s input map under the same geometry.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, geom: ConvGeometry) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 {
            return shape_err(format!("conv_transpose2d of {xs:?} with kernel {ws:?}"));
        }
        if xs[1] != ws[0] {
            return shape_err(format!("conv_transpose2d channel mismatch: input {xs:?}, kernel {ws:?}"));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
        let (Some(oh), Some(ow)) = (geom.conv_transpose_out(h, kh), geom.conv_transpose_out(wd, kw)) else {
            return shape_err(format!(
                "conv_transpose2d of {xs:?} with kernel {ws:?} and {geom:?} has no output"
            ));
        };
        let patch = conv_patch(cout, oh, ow, kh, kw, geom, h, wd);
        let mut cols = vec![0.0; patch.rows() * patch.cols()];
        let mut out = vec![0.0; n * cout * oh * ow];
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        for i in 0..n {
            cols.iter_mut().for_each(|v| *v = 0.0);
            gemm_tn(patch.rows(), cin, h * wd, wv, &xv[i * cin * h * wd..(i + 1) * cin * h * wd], &mut cols);
            col2im(&cols, &patch, &mut out[i * cout * oh * ow..(i + 1) * cout * oh * ow]);
        }
        let t = Tensor::from_parts(vec![n, cout, oh, ow], out);
        Ok(self.push(t, Op::ConvTranspose2d { x, w, geom }, &[x, w]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Op::LeakyRelu { x, slope }, |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let n = *src.shape().last().expect("tensors have rank >= 1");
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let t = Tensor::from_parts(src.shape().to_vec(), out);
        self.push(t, Op::Softmax(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(0.0, |a, &b| a + b);
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().fold(0.0, |a, &b| a + b) / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean binary cross-entropy of probabilities `p` against `labels`, with
    /// `p` clamped to `[eps, 1-eps]` so the logarithms stay finite.
    pub fn bce(&mut self, p: Var, labels: &[f64], eps: f64) -> Result<Var> {
        let pv = self.value(p);
        if pv.numel() != labels.len() {
            return shape_err(format!(
                "bce of {:?} predictions against {} labels",
                pv.shape(),
                labels.len()
            ));
        }
        let total = pv.data().iter().zip(labels).fold(0.0, |acc, (&q, &y)| {
            let q = q.clamp(eps, 1.0 - eps);
            acc - (y * q.ln() + (1.0 - y) * (1.0 - q).ln())
        });
        let loss = total / labels.len() as f64;
        let op = Op::Bce {
            p,
            labels: labels.to_vec(),
            eps,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[p]))
    }

    /// `W / σ̂` with `σ̂ = max(uᵀ W v, eps)`, treating `W` as a
    /// `shape[0] × rest` matrix and `u`, `v` as constants.
    pub fn spectral_normalize(&mut self, w: Var, u: &[f64], v: &[f64], eps: f64) -> Result<Var> {
        let wt = self.value(w);
        let rows = wt.dim(0);
        let cols = wt.numel() / rows;
        if u.len() != rows || v.len() != cols {
            return shape_err(format!(
                "spectral vectors of length {}/{} for weight {:?}",
                u.len(),
                v.len(),
                wt.shape()
            ));
        }
        let wd = wt.data();
        let mut raw = 0.0;
        for (r, &ur) in u.iter().enumerate() {
            let row = &wd[r * cols..(r + 1) * cols];
            raw += ur * row.iter().zip(v).fold(0.0, |a, (x, y)| a + x * y);
        }
        let floored = !(raw > eps);
        let sigma = if floored { eps } else { raw };
        let t = wt.map(|x| x / sigma);
        let op = Op::SpectralNorm {
            w,
            u: u.to_vec(),
            v: v.to_vec(),
            sigma,
            floored,
        };
        Ok(self.push(t, op, &[w]))
    }

    /// Reverse-mode sweep from a scalar output. Gradients are added to any
    /// already stored on the tape's values.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(out)
            )));
        }
        let n = out.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[out.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.entries[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            let value = &mut self.entries[i].value;
            value.grad_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let out = &self.entries[i].value;
        let wants = |v: &Var| self.entries[v.0].requires_grad;
        let val = |v: &Var| &self.entries[v.0].value;
        let mut send = |v: Var, grad: Vec<f64>| {
            if self.entries[v.0].requires_grad {
                add_into(&mut grads[v.0], grad);
            }
        };
        match &self.entries[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                if wants(a) {
                    send(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if wants(b) {
                    send(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|v| v * c).collect()),
            Op::ScaleBy { x, s } => {
                let c = val(s).data()[0];
                if wants(x) {
                    send(*x, g.iter().map(|v| v * c).collect());
                }
                if wants(s) {
                    let d = g.iter().zip(val(x).data()).fold(0.0, |a, (p, q)| a + p * q);
                    send(*s, vec![d]);
                }
            }
            Op::AddBias { x, b } => {
                send(*x, g.to_vec());
                if wants(b) {
                    let s = val(x).shape();
                    let channels = s[1];
                    let inner: usize = s[2..].iter().product();
                    let mut gb = vec![0.0; channels];
                    for (k, v) in g.iter().enumerate() {
                        gb[(k / inner) % channels] += v;
                    }
                    send(*b, gb);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(a).shape(), val(b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(m, n, k, g, val(b).data(), &mut ga);
                    send(*a, ga);
                }
                if wants(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(k, m, n, val(a).data(), g, &mut gb);
                    send(*b, gb);
                }
            }
            Op::Transpose(x) => {
                let s = out.shape();
                send(*x, transpose(s[0], s[1], g));
            }
            Op::Bmm { a, b, ta, tb } => {
                let (sa, sb) = (val(a).shape().to_vec(), val(b).shape().to_vec());
                let (m, n) = (out.dim(1), out.dim(2));
                let (pa, pb) = (sa[1] * sa[2], sb[1] * sb[2]);
                let mut ga = Vec::new();
                let mut gb = Vec::new();
                for bi in 0..sa[0] {
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    let av = &val(a).data()[bi * pa..(bi + 1) * pa];
                    let bv = &val(b).data()[bi * pb..(bi + 1) * pb];
                    if wants(a) {
                        let (d, dm, dk) = mm(gs, m, n, false, bv, sb[1], sb[2], !tb);
                        ga.extend(if *ta { transpose(dm, dk, &d) } else { d });
                    }
                    if wants(b) {
                        let (d, dk, dn) = mm(av, sa[1], sa[2], !ta, gs, m, n, false);
                        gb.extend(if *tb { transpose(dk, dn, &d) } else { d });
                    }
                }
                if wants(a) {
                    send(*a, ga);
                }
                if wants(b) {
                    send(*b, gb);
                }
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Pad { x, pads } => {
                let s = val(x).shape();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (out.dim(2), out.dim(3));
                let mut gx = Vec::with_capacity(val(x).numel());
                for p in 0..s[0] * s[1] {
                    for y in 0..h {
                        let at = (p * oh + y + pads[0]) * ow + pads[2];
                        gx.extend_from_slice(&g[at..at + w]);
                    }
                }
                send(*x, gx);
            }
            Op::Crop { x, top, left } => {
                let s = val(x).shape();
                let (h, w) = (s[2], s[3]);
                let (ch, cw) = (out.dim(2), out.dim(3));
                let mut gx = vec![0.0; val(x).numel()];
                for p in 0..s[0] * s[1] {
                    for y in 0..ch {
                        let at = (p * h + y + top) * w + left;
                        gx[at..at + cw].copy_from_slice(&g[(p * ch + y) * cw..(p * ch + y + 1) * cw]);
                    }
                }
                send(*x, gx);
            }
            Op::Concat(parts) => {
                let inner: usize = out.shape()[2..].iter().product();
                let total = out.dim(1) * inner;
                let mut offset = 0;
                for p in parts {
                    let block = val(p).dim(1) * inner;
                    if wants(p) {
                        let mut gp = Vec::with_capacity(val(p).numel());
                        for n in 0..out.dim(0) {
                            let at = n * total + offset;
                            gp.extend_from_slice(&g[at..at + block]);
                        }
                        send(*p, gp);
                    }
                    offset += block;
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (xs, ws) = (val(x).shape(), val(w).shape());
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, kh, kw) = (ws[0], ws[2], ws[3]);
                let (oh, ow) = (out.dim(2), out.dim(3));
                let patch = conv_patch(c, h, wd, kh, kw, *geom, oh, ow);
                let (rows, cols) = (patch.rows(), patch.cols());
                let xv = val(x).data();
                let wv = val(w).data();
                let mut gx = wants(x).then(|| vec![0.0; xv.len()]);
                let mut gw = wants(w).then(|| vec![0.0; wv.len()]);
                let mut col = vec![0.0; rows * cols];
                for i in 0..n {
                    let gi = &g[i * o * cols..(i + 1) * o * cols];
                    if let Some(gw) = &mut gw {
                        im2col(&xv[i * c * h * wd..(i + 1) * c * h * wd], &patch, &mut col);
                        gemm_nt(o, cols, rows, gi, &col, gw);
                    }
                    if let Some(gx) = &mut gx {
                        col.iter_mut().for_each(|v| *v = 0.0);
                        gemm_tn(rows, o, cols, wv, gi, &mut col);
                        col2im(&col, &patch, &mut gx[i * c * h * wd..(i + 1) * c * h * wd]);
                    }
                }
                if let Some(gx) = gx {
                    send(*x, gx);
                }
                if let Some(gw) = gw {
                    send(*w, gw);
                }
            }
            Op::ConvTranspose2d { x, w, geom } => {
                let (xs, ws) = (val(x).shape(), val(w).shape());
                let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
                let (oh, ow) = (out.dim(2), out.dim(3));
                let patch = conv_patch(cout, oh, ow, kh, kw, *geom, h, wd);
                let (rows, cols) = (patch.rows(), patch.cols());
                let xv = val(x).data();
                let wv = val(w).data();
                let mut gx = wants(x).then(|| vec![0.0; xv.len()]);
                let mut gw = wants(w).then(|| vec![0.0; wv.len()]);
                let mut gcol = vec![0.0; rows * cols];
                for i in 0..n {
                    im2col(&g[i * cout * oh * ow..(i + 1) * cout * oh * ow], &patch, &mut gcol);
                    if let Some(gx) = &mut gx {
                        gemm_nn(cin, rows, cols, wv, &gcol, &mut gx[i * cin * cols..(i + 1) * cin * cols]);
                    }
                    if let Some(gw) = &mut gw {
                        gemm_nt(cin, cols, rows, &xv[i * cin * cols..(i + 1) * cin * cols], &gcol, gw);
                    }
                }
                if let Some(gx) = gx {
                    send(*x, gx);
                }
                if let Some(gw) = gw {
                    send(*w, gw);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let d = g
                    .iter()
                    .zip(val(x).data())
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { slope * gv })
                    .collect();
                send(*x, d);
            }
            Op::Relu(x) => {
                let d = g
                    .iter()
                    .zip(val(x).data())
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                send(*x, d);
            }
            Op::Tanh(x) => {
                let d = g.iter().zip(out.data()).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                send(*x, d);
            }
            Op::Sigmoid(x) => {
                let d = g.iter().zip(out.data()).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                send(*x, d);
            }
            Op::Abs(x) => {
                let d = g
                    .iter()
                    .zip(val(x).data())
                    .map(|(gv, &xv)| {
                        if xv > 0.0 {
                            *gv
                        } else if xv < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                send(*x, d);
            }
            Op::Clamp { x, lo, hi } => {
                let d = g
                    .iter()
                    .zip(val(x).data())
                    .map(|(gv, &xv)| if xv >= *lo && xv <= *hi { *gv } else { 0.0 })
                    .collect();
                send(*x, d);
            }
            Op::Softmax(x) => {
                let n = *out.shape().last().expect("rank >= 1");
                let mut d = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(n).zip(out.data().chunks(n)) {
                    let dot = gr.iter().zip(yr).fold(0.0, |a, (p, q)| a + p * q);
                    d.extend(gr.iter().zip(yr).map(|(gv, y)| y * (gv - dot)));
                }
                send(*x, d);
            }
            Op::Sum(x) => send(*x, vec![g[0]; val(x).numel()]),
            Op::Mean(x) => {
                let n = val(x).numel();
                send(*x, vec![g[0] / n as f64; n]);
            }
            Op::Bce { p, labels, eps } => {
                let n = labels.len() as f64;
                let d = val(p)
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&q, &y)| {
                        if q < *eps || q > 1.0 - eps {
                            0.0
                        } else {
                            g[0] * (-(y / q) + (1.0 - y) / (1.0 - q)) / n
                        }
                    })
                    .collect();
                send(*p, d);
            }
            Op::SpectralNorm {
                w,
                u,
                v,
                sigma,
                floored,
            } => {
                let proj = if *floored {
                    0.0
                } else {
                    g.iter().zip(out.data()).fold(0.0, |a, (p, q)| a + p * q)
                };
                let cols = v.len();
                let d = g
                    .iter()
                    .enumerate()
                    .map(|(k, gv)| (gv - proj * u[k / cols] * v[k % cols]) / sigma)
                    .collect();
                send(*w, d);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let b_data: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b = tape.constant(t(&[3, 4], &b_data));
        let c = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.value(c).data(), b_data.as_slice());

        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let c = tape.matmul(z, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 4]);
        assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn backward_identity_square_and_fan_out() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).with_requires_grad(true));
        let y = tape.sum(x);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]).with_requires_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.sum(sq);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.5).with_requires_grad(true));
        let y = tape.add(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]).with_requires_grad(true));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(x, c).unwrap();
        let y = tape.sum(p);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn crop_then_pad_restores_interior() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..16).map(f64::from).collect();
        let x = tape.constant(t(&[1, 1, 4, 4], &data));
        let c = tape.crop2d(x, 1, 1, 2, 2).unwrap();
        assert_eq!(tape.value(c).data(), &[5.0, 6.0, 9.0, 10.0]);
        let p = tape.pad2d(c, [1, 1, 1, 1]).unwrap();
        let back = tape.crop2d(p, 1, 1, 2, 2).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(c).data());
        assert!(tape.crop2d(x, 3, 0, 2, 2).is_err());
    }

    #[test]
    fn reshape_dense_output_into_feature_map() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 64 * 64 * 256]));
        let r = tape.reshape(x, &[1, 256, 64, 64]).unwrap();
        assert_eq!(tape.shape(r), &[1, 256, 64, 64]);
        assert!(tape.reshape(x, &[1, 256, 64, 63]).is_err());
    }

    #[test]
    fn concat_condition_plane() {
        let mut tape = Tape::new();
        let feat = tape.constant(Tensor::zeros(&[1, 128, 25, 25]));
        let plane = tape.constant(Tensor::full(&[1, 1, 25, 25], 1.0));
        let c = tape.concat(&[feat, plane]).unwrap();
        assert_eq!(tape.shape(c), &[1, 129, 25, 25]);
        let bad = tape.constant(Tensor::zeros(&[1, 1, 24, 25]));
        assert!(tape.concat(&[feat, bad]).is_err());
    }

    #[test]
    fn conv_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.conv2d(x, k, ConvGeometry::new(1, 0)).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);

        let one = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, one, ConvGeometry::new(1, 0)).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        let x4 = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let k4 = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let y = tape.conv2d(x4, k4, ConvGeometry::new(2, 1)).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);

        let k5 = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
        let x2 = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(tape.conv2d(x2, k5, ConvGeometry::new(1, 0)).is_err());
        let k2c = tape.constant(Tensor::zeros(&[1, 2, 1, 1]));
        assert!(tape.conv2d(x2, k2c, ConvGeometry::new(1, 0)).is_err());
    }

    #[test]
    fn conv_transpose_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 1], &[2.5]));
        let k = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = tape.conv_transpose2d(x, k, ConvGeometry::new(2, 0)).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5; 4]);

        let x = tape.constant(Tensor::zeros(&[1, 2, 64, 64]));
        let k = tape.constant(Tensor::zeros(&[2, 1, 4, 4]));
        let y = tape.conv_transpose2d(x, k, ConvGeometry::new(2, 1)).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 128, 128]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 500.0]));
        let s = tape.softmax(x);
        for row in tape.value(s).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_clamps_log_argument() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[2], &[0.0, 1.0]));
        let l = tape.bce(p, &[0.0, 1.0], 1e-7).unwrap();
        let v = tape.value(l).data()[0];
        assert!(v.is_finite() && v < 1e-6);
    }
}
