//! Convolution, normalization, pooling, dense and attention primitives.

use crate::error::{arg_err, shape_err, Result};
use crate::real::{gemm, Real};
use crate::tape::{Op, Tape, Var};

/// Train mode normalizes with batch statistics; eval mode with running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Per-channel running statistics of a batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

/// Per-channel statistics of one training batch (variance is biased).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self { running_mean: vec![T::zero(); channels], running_var: vec![T::one(); channels] }
    }

    /// Exponential moving average; the running variance uses the unbiased
    /// batch estimate.
    pub fn update(&mut self, stats: &BatchStats<T>, momentum: T) {
        let n = T::from_usize(stats.count).unwrap();
        let unbias = if stats.count > 1 { n / (n - T::one()) } else { T::one() };
        for c in 0..self.running_mean.len() {
            self.running_mean[c] = (T::one() - momentum) * self.running_mean[c] + momentum * stats.mean[c];
            self.running_var[c] = (T::one() - momentum) * self.running_var[c] + momentum * stats.var[c] * unbias;
        }
    }
}

fn conv_out(len: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let p = self.ho * self.wo;
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * p;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        let dst = &mut cols[row + oy * self.wo..row + (oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..(c * self.h + iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            *d = if ix < 0 || ix >= self.w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.ho * self.wo;
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * p;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dx[base + ix as usize] += cols[row + oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<(usize, usize, ConvGeom)> {
    if x.len() != 4 || w.len() != 4 {
        return shape_err("conv2d", format!("expected rank-4 input and weight, got {x:?} and {w:?}"));
    }
    if x[1] != w[1] {
        return shape_err("conv2d", format!("input has {} channels but weight expects {} ({x:?} vs {w:?})", x[1], w[1]));
    }
    if w[2] % 2 == 0 || w[3] % 2 == 0 {
        return arg_err("conv2d", format!("kernel {}x{} must be odd", w[2], w[3]));
    }
    let (Some(ho), Some(wo)) = (conv_out(x[2], w[2], stride, padding), conv_out(x[3], w[3], stride, padding)) else {
        return arg_err("conv2d", format!("no valid output for input {x:?}, kernel {w:?}, stride {stride}"));
    };
    Ok((
        x[0],
        w[0],
        ConvGeom { cin: x[1], h: x[2], w: x[3], kh: w[2], kw: w[3], ho, wo, stride, padding },
    ))
}

impl<T: Real> Tape<T> {
    /// Zero-padded 2D cross-correlation, `[N, Cin, H, W] -> [N, Cout, H', W']`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (n, cout, geo) = conv_geom(self.shape(input), self.shape(weight), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return shape_err("conv2d", format!("bias {:?} vs {cout} output channels", self.shape(b)));
            }
        }
        let k = geo.cin * geo.kh * geo.kw;
        let p = geo.ho * geo.wo;
        let x = self.value(input);
        let w = self.value(weight);
        let mut out = vec![T::zero(); n * cout * p];
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
        let in_len = geo.cin * geo.h * geo.w;
        for b in 0..n {
            let xb = &x[b * in_len..(b + 1) * in_len];
            let cols_ref: &[T] = if geo.is_pointwise() {
                xb
            } else {
                geo.im2col(xb, &mut cols);
                &cols
            };
            let ob = &mut out[b * cout * p..(b + 1) * cout * p];
            gemm(cout, k, p, T::one(), (w, k, 1), (cols_ref, p, 1), false, ob, p, 1);
            if let Some(bv) = bias {
                let bv = self.value(bv);
                for co in 0..cout {
                    for o in &mut ob[co * p..(co + 1) * p] {
                        *o += bv[co];
                    }
                }
            }
        }
        Ok(self.push(vec![n, cout, geo.ho, geo.wo], out, Op::Conv2d { input, weight, bias, stride, padding }))
    }

    /// Batch normalization over `[N, C, H, W]`. In train mode the batch
    /// statistics are returned so the caller can update running state.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState<T>,
        mode: NormMode,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        if eps <= T::zero() {
            return arg_err("batchnorm2d", format!("eps must be positive, got {eps}"));
        }
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return shape_err("batchnorm2d", format!("expected rank 4, got {shape:?}"));
        }
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || state.running_mean.len() != c {
            return shape_err("batchnorm2d", format!("affine/state size does not match {c} channels"));
        }
        let count = n * hw;
        if mode == NormMode::Train && count < 2 {
            return arg_err("batchnorm2d", "train mode needs at least 2 values per channel");
        }
        let x = self.value(input);
        let (mean, var) = match mode {
            NormMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let cnt = T::from_usize(count).unwrap();
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
                    }
                    let m = s / cnt;
                    let mut v = T::zero();
                    for b in 0..n {
                        for &xi in &x[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                            v += (xi - m) * (xi - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = v / cnt;
                }
                (mean, var)
            }
            NormMode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for i in r {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let stats = (mode == NormMode::Train).then(|| BatchStats { mean, var, count });
        let train = mode == NormMode::Train;
        let v = self.push(shape, out, Op::BatchNorm { input, gamma, beta, xhat, inv_std, train });
        Ok((v, stats))
    }

    /// As [`Tape::batchnorm2d`], folding the batch statistics into `state`
    /// in train mode.
    pub fn batchnorm2d_update(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        mode: NormMode,
        momentum: T,
        eps: T,
    ) -> Result<Var> {
        let (v, stats) = self.batchnorm2d(input, gamma, beta, state, mode, eps)?;
        if let Some(stats) = stats {
            state.update(&stats, momentum);
        }
        Ok(v)
    }

    /// Non-overlapping 2x2 max pooling. Ties go to the first element in
    /// row-major order.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 || shape[2] % 2 != 0 || shape[3] % 2 != 0 {
            return arg_err("maxpool2d", format!("need rank 4 with even H, W; got {shape:?}"));
        }
        let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value(input);
        let mut out = Vec::with_capacity(nc * ho * wo);
        let mut argmax = Vec::with_capacity(nc * ho * wo);
        for plane in 0..nc {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[j] > x[best] {
                            best = j;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push(vec![shape[0], shape[1], ho, wo], out, Op::MaxPool { input, argmax }))
    }

    /// Affine map along the trailing axis: `x W^T + b` with `W: [dout, din]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight);
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return shape_err("linear", format!("input {xs:?} incompatible with weight {ws:?}"));
        }
        let (dout, din) = (ws[0], ws[1]);
        if let Some(b) = bias {
            if self.shape(b) != [dout] {
                return shape_err("linear", format!("bias {:?} vs {dout} outputs", self.shape(b)));
            }
        }
        let m = self.value(input).len() / din;
        let mut out = vec![T::zero(); m * dout];
        gemm(m, din, dout, T::one(), (self.value(input), din, 1), (self.value(weight), 1, din), false, &mut out, dout, 1);
        if let Some(b) = bias {
            let bv = self.value(b);
            for row in out.chunks_mut(dout) {
                for (o, &bi) in row.iter_mut().zip(bv) {
                    *o += bi;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        Ok(self.push(shape, out, Op::Linear { input, weight, bias }))
    }

    /// Layer normalization over the trailing axis with learned affine terms.
    pub fn layernorm(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return arg_err("layernorm", "eps must be positive");
        }
        let shape = self.shape(input).to_vec();
        let d = *shape.last().unwrap_or(&1);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err("layernorm", format!("affine terms must have shape [{d}]"));
        }
        let x = self.value(input);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let rows = x.len() / d;
        let df = T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let mean = xr.iter().copied().sum::<T>() / df;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (xr[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = gv[j] * xh + bv[j];
            }
        }
        Ok(self.push(shape, out, Op::LayerNorm { input, gamma, beta, xhat, inv_std }))
    }

    /// Multi-head scaled dot-product attention core on already projected
    /// `q, k, v: [.., n, d]`. Head `h` uses columns `h*d/heads..(h+1)*d/heads`;
    /// head outputs are written back into the same columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() < 2 || self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return shape_err("attention", format!("q {:?}, k {:?}, v {:?}", shape, self.shape(k), self.shape(v)));
        }
        let (n, d) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if heads == 0 || d % heads != 0 {
            return arg_err("attention", format!("token size {d} not divisible by {heads} heads"));
        }
        let dh = d / heads;
        let batch = self.value(q).len() / (n * d);
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); batch * heads * n * n];
        let mut out = vec![T::zero(); batch * n * d];
        for b in 0..batch {
            let off = b * n * d;
            for h in 0..heads {
                let col = off + h * dh;
                let p = &mut probs[(b * heads + h) * n * n..(b * heads + h + 1) * n * n];
                gemm(n, dh, n, scale, (&qv[col..], d, 1), (&kv[col..], 1, d), false, p, n, 1);
                for row in p.chunks_mut(n) {
                    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut s = T::zero();
                    for e in row.iter_mut() {
                        *e = (*e - mx).exp();
                        s += *e;
                    }
                    for e in row.iter_mut() {
                        *e = *e / s;
                    }
                }
                gemm(n, n, dh, T::one(), (p, n, 1), (&vv[col..], d, 1), false, &mut out[col..], d, 1);
            }
        }
        Ok(self.push(shape, out, Op::Attention { q, k, v, heads, probs }))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    tape: &Tape<T>,
    g: &[T],
    input: Var,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
    grads: &mut [Option<Vec<T>>],
) {
    let (n, cout, geo) = conv_geom(tape.shape(input), tape.shape(weight), stride, padding).expect("validated in forward");
    let k = geo.cin * geo.kh * geo.kw;
    let p = geo.ho * geo.wo;
    let in_len = geo.cin * geo.h * geo.w;
    if let Some(b) = bias {
        if let Some(db) = tape.grad_buf(b, grads) {
            for bi in 0..n {
                for co in 0..cout {
                    db[co] += g[(bi * cout + co) * p..(bi * cout + co + 1) * p].iter().copied().sum::<T>();
                }
            }
        }
    }
    let x = tape.value(input);
    let w = tape.value(weight);
    let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    if let Some(dw) = tape.grad_buf(weight, grads) {
        for bi in 0..n {
            let xb = &x[bi * in_len..(bi + 1) * in_len];
            let cols_ref: &[T] = if geo.is_pointwise() {
                xb
            } else {
                geo.im2col(xb, &mut cols);
                &cols
            };
            let gb = &g[bi * cout * p..(bi + 1) * cout * p];
            gemm(cout, p, k, T::one(), (gb, p, 1), (cols_ref, 1, p), true, dw, k, 1);
        }
    }
    if let Some(dx) = tape.grad_buf(input, grads) {
        let mut dcols = vec![T::zero(); k * p];
        for bi in 0..n {
            let gb = &g[bi * cout * p..(bi + 1) * cout * p];
            let dxb = &mut dx[bi * in_len..(bi + 1) * in_len];
            if geo.is_pointwise() {
                gemm(k, cout, p, T::one(), (w, 1, k), (gb, p, 1), true, dxb, p, 1);
            } else {
                gemm(k, cout, p, T::one(), (w, 1, k), (gb, p, 1), false, &mut dcols, p, 1);
                geo.col2im(&dcols, dxb);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward<T: Real>(
    tape: &Tape<T>,
    g: &[T],
    input: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    inv_std: &[T],
    train: bool,
    grads: &mut [Option<Vec<T>>],
) {
    let shape = tape.shape(input);
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                sum_g[ch] += g[i];
                sum_gx[ch] += g[i] * xhat[i];
            }
        }
    }
    if let Some(dg) = tape.grad_buf(gamma, grads) {
        for ch in 0..c {
            dg[ch] += sum_gx[ch];
        }
    }
    if let Some(db) = tape.grad_buf(beta, grads) {
        for ch in 0..c {
            db[ch] += sum_g[ch];
        }
    }
    let gv = tape.value(gamma);
    if let Some(dx) = tape.grad_buf(input, grads) {
        let m = T::from_usize(n * hw).unwrap();
        for b in 0..n {
            for ch in 0..c {
                let k = gv[ch] * inv_std[ch];
                for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                    dx[i] += if train {
                        k * (g[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                    } else {
                        k * g[i]
                    };
                }
            }
        }
    }
}

pub(crate) fn linear_backward<T: Real>(
    tape: &Tape<T>,
    g: &[T],
    input: Var,
    weight: Var,
    bias: Option<Var>,
    grads: &mut [Option<Vec<T>>],
) {
    let ws = tape.shape(weight);
    let (dout, din) = (ws[0], ws[1]);
    let x = tape.value(input);
    let m = x.len() / din;
    if let Some(b) = bias {
        if let Some(db) = tape.grad_buf(b, grads) {
            for row in g.chunks(dout) {
                for (d, &gi) in db.iter_mut().zip(row) {
                    *d += gi;
                }
            }
        }
    }
    if let Some(dw) = tape.grad_buf(weight, grads) {
        gemm(dout, m, din, T::one(), (g, 1, dout), (x, din, 1), true, dw, din, 1);
    }
    let w = tape.value(weight);
    if let Some(dx) = tape.grad_buf(input, grads) {
        gemm(m, dout, din, T::one(), (g, dout, 1), (w, din, 1), true, dx, din, 1);
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layernorm_backward<T: Real>(
    tape: &Tape<T>,
    g: &[T],
    input: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    inv_std: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let d = tape.shape(gamma)[0];
    let rows = g.len() / d;
    if let Some(dg) = tape.grad_buf(gamma, grads) {
        for r in 0..rows {
            for j in 0..d {
                dg[j] += g[r * d + j] * xhat[r * d + j];
            }
        }
    }
    if let Some(db) = tape.grad_buf(beta, grads) {
        for r in 0..rows {
            for j in 0..d {
                db[j] += g[r * d + j];
            }
        }
    }
    let gv = tape.value(gamma);
    if let Some(dx) = tape.grad_buf(input, grads) {
        let df = T::from_usize(d).unwrap();
        for r in 0..rows {
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for j in 0..d {
                let gh = g[r * d + j] * gv[j];
                s1 += gh;
                s2 += gh * xhat[r * d + j];
            }
            for j in 0..d {
                let gh = g[r * d + j] * gv[j];
                dx[r * d + j] += inv_std[r] * (gh - s1 / df - xhat[r * d + j] * s2 / df);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Real>(
    tape: &Tape<T>,
    g: &[T],
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    probs: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let shape = tape.shape(q);
    let (n, d) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let dh = d / heads;
    let batch = g.len() / (n * d);
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let (qv, kv, vv) = (tape.value(q), tape.value(k), tape.value(v));
    let need = [tape.requires_grad(q), tape.requires_grad(k), tape.requires_grad(v)];
    let mut dq = if need[0] { vec![T::zero(); g.len()] } else { Vec::new() };
    let mut dk = if need[1] { vec![T::zero(); g.len()] } else { Vec::new() };
    let mut dv = if need[2] { vec![T::zero(); g.len()] } else { Vec::new() };
    let mut dp = vec![T::zero(); n * n];
    for b in 0..batch {
        let off = b * n * d;
        for h in 0..heads {
            let col = off + h * dh;
            let p = &probs[(b * heads + h) * n * n..(b * heads + h + 1) * n * n];
            if need[2] {
                gemm(n, n, dh, T::one(), (p, 1, n), (&g[col..], d, 1), true, &mut dv[col..], d, 1);
            }
            if !need[0] && !need[1] {
                continue;
            }
            // dP = dO V^T, then the softmax Jacobian turns it into dS.
            gemm(n, dh, n, T::one(), (&g[col..], d, 1), (&vv[col..], 1, d), false, &mut dp, n, 1);
            for (drow, prow) in dp.chunks_mut(n).zip(p.chunks(n)) {
                let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for (dd, &pp) in drow.iter_mut().zip(prow) {
                    *dd = pp * (*dd - dot);
                }
            }
            if need[0] {
                gemm(n, n, dh, scale, (&dp, n, 1), (&kv[col..], d, 1), true, &mut dq[col..], d, 1);
            }
            if need[1] {
                gemm(n, n, dh, scale, (&dp, 1, n), (&qv[col..], d, 1), true, &mut dk[col..], d, 1);
            }
        }
    }
    for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(dx) = tape.grad_buf(var, grads) {
            crate::tape::add_into(dx, &buf);
        }
    }
}
