//! Dense building blocks with hand-written backward passes.
//!
//! Layers own their parameters and accumulate gradients into them; forward
//! passes are pure and the caller keeps whatever the backward pass needs
//! (usually the layer input).

use ndarray::{Array2, Array3, Array4, ArrayD, ArrayView2, Axis, IxDyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::param::{join, Module, Param};

pub(crate) fn uniform_param<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Param {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Param::new(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches"))
}

/// Valid output range `[lo, hi)` for a tap at `offset` (= tap - pad) over length `n`.
#[inline]
fn tap_range(n: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (n as isize - offset).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

/// 2-D convolution, stride 1, "same" zero padding, odd square kernel.
///
/// Only dense (`groups == 1`) and depthwise (`groups == in == out`)
/// groupings are supported.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub groups: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        groups: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) || kernel == 0 {
            return Err(Error::Config(format!("conv kernel must be odd, got {kernel}")));
        }
        if !(groups == 1 || (groups == in_ch && groups == out_ch)) {
            return Err(Error::Config(format!(
                "unsupported conv grouping {groups} for {in_ch}->{out_ch}"
            )));
        }
        let cin_g = in_ch / groups;
        let fan_in = (cin_g * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        Ok(Self {
            weight: uniform_param(&[out_ch, cin_g, kernel, kernel], bound, rng),
            bias: uniform_param(&[out_ch], bound, rng),
            in_ch,
            out_ch,
            kernel,
            groups,
        })
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1
    }

    pub fn forward(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        let (b, c, h, w) = x.dim();
        if c != self.in_ch {
            return Err(Error::Contract(format!(
                "conv expects {} input channels, got {c}",
                self.in_ch
            )));
        }
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut out = Array4::<f64>::zeros((b, self.out_ch, h, w));
        let os = out.as_slice_mut().expect("fresh array");
        let hw = h * w;
        let bias = self.bias.data();
        if self.is_depthwise() {
            let wt = self.weight.data();
            let k = self.kernel;
            let p = (k / 2) as isize;
            for bc in 0..b * c {
                let ch = bc % c;
                let src = &xs[bc * hw..(bc + 1) * hw];
                let dst = &mut os[bc * hw..(bc + 1) * hw];
                dst.fill(bias[ch]);
                for ky in 0..k {
                    let (y0, y1) = tap_range(h, ky as isize - p);
                    if y0 == y1 {
                        continue;
                    }
                    for kx in 0..k {
                        let wv = wt[(ch * k + ky) * k + kx];
                        let (x0, x1) = tap_range(w, kx as isize - p);
                        if x0 == x1 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let iy = (oy as isize + ky as isize - p) as usize;
                            let srow = &src[iy * w..];
                            let drow = &mut dst[oy * w..(oy + 1) * w];
                            let ix0 = (x0 as isize + kx as isize - p) as usize;
                            for (d, s) in drow[x0..x1].iter_mut().zip(&srow[ix0..ix0 + (x1 - x0)]) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        } else {
            let kk = self.in_ch * self.kernel * self.kernel;
            let wmat = ArrayView2::from_shape((self.out_ch, kk), self.weight.data()).expect("weight");
            for bi in 0..b {
                let cols = self.im2col(&xs[bi * c * hw..(bi + 1) * c * hw], h, w);
                let y = wmat.dot(&cols);
                let dst = &mut os[bi * self.out_ch * hw..(bi + 1) * self.out_ch * hw];
                for (o, (drow, yrow)) in dst.chunks_mut(hw).zip(y.outer_iter()).enumerate() {
                    for (d, v) in drow.iter_mut().zip(yrow.iter()) {
                        *d = v + bias[o];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
        let (b, c, h, w) = x.dim();
        let hw = h * w;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let dy = dy.as_standard_layout();
        let dys = dy.as_slice().expect("standard layout");
        let mut dx = Array4::<f64>::zeros((b, c, h, w));
        let dxs = dx.as_slice_mut().expect("fresh");
        {
            let db = self.bias.grad_mut();
            for (i, chunk) in dys.chunks(hw).enumerate() {
                db[i % self.out_ch] += chunk.iter().sum::<f64>();
            }
        }
        if self.is_depthwise() {
            let k = self.kernel;
            let p = (k / 2) as isize;
            let wt = self.weight.value.as_slice().expect("contiguous").to_vec();
            let gw = self.weight.grad.as_slice_mut().expect("contiguous");
            for bc in 0..b * c {
                let ch = bc % c;
                let src = &xs[bc * hw..(bc + 1) * hw];
                let g = &dys[bc * hw..(bc + 1) * hw];
                let dsrc = &mut dxs[bc * hw..(bc + 1) * hw];
                for ky in 0..k {
                    let (y0, y1) = tap_range(h, ky as isize - p);
                    if y0 == y1 {
                        continue;
                    }
                    for kx in 0..k {
                        let widx = (ch * k + ky) * k + kx;
                        let wv = wt[widx];
                        let (x0, x1) = tap_range(w, kx as isize - p);
                        if x0 == x1 {
                            continue;
                        }
                        let ix0 = (x0 as isize + kx as isize - p) as usize;
                        let n = x1 - x0;
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = (oy as isize + ky as isize - p) as usize;
                            let grow = &g[oy * w + x0..oy * w + x0 + n];
                            let srow = &src[iy * w + ix0..iy * w + ix0 + n];
                            for (gv, sv) in grow.iter().zip(srow) {
                                acc += gv * sv;
                            }
                            let drow = &mut dsrc[iy * w + ix0..iy * w + ix0 + n];
                            for (dv, gv) in drow.iter_mut().zip(grow) {
                                *dv += wv * gv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        } else {
            let kk = self.in_ch * self.kernel * self.kernel;
            let wmat = Array2::from_shape_vec((self.out_ch, kk), self.weight.data().to_vec()).expect("weight");
            let mut gw = Array2::<f64>::zeros((self.out_ch, kk));
            for bi in 0..b {
                let cols = self.im2col(&xs[bi * c * hw..(bi + 1) * c * hw], h, w);
                let g = ArrayView2::from_shape((self.out_ch, hw), &dys[bi * self.out_ch * hw..(bi + 1) * self.out_ch * hw])
                    .expect("grad");
                gw += &g.dot(&cols.t());
                let dcols = wmat.t().dot(&g);
                self.col2im(&dcols, &mut dxs[bi * c * hw..(bi + 1) * c * hw], h, w);
            }
            for (a, v) in self.weight.grad_mut().iter_mut().zip(gw.iter()) {
                *a += v;
            }
        }
        dx
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize) -> Array2<f64> {
        let k = self.kernel;
        let p = (k / 2) as isize;
        let hw = h * w;
        let mut cols = Array2::<f64>::zeros((self.in_ch * k * k, hw));
        let cs = cols.as_slice_mut().expect("fresh");
        for c in 0..self.in_ch {
            let src = &x[c * hw..(c + 1) * hw];
            for ky in 0..k {
                let (y0, y1) = tap_range(h, ky as isize - p);
                if y0 == y1 {
                    continue;
                }
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cs[row * hw..(row + 1) * hw];
                    let (x0, x1) = tap_range(w, kx as isize - p);
                    if x0 == x1 {
                        continue;
                    }
                    let ix0 = (x0 as isize + kx as isize - p) as usize;
                    for oy in y0..y1 {
                        let iy = (oy as isize + ky as isize - p) as usize;
                        dst[oy * w + x0..oy * w + x1].copy_from_slice(&src[iy * w + ix0..iy * w + ix0 + (x1 - x0)]);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, dx: &mut [f64], h: usize, w: usize) {
        let k = self.kernel;
        let p = (k / 2) as isize;
        let hw = h * w;
        let cols = cols.as_standard_layout();
        let cs = cols.as_slice().expect("standard");
        for c in 0..self.in_ch {
            let dst = &mut dx[c * hw..(c + 1) * hw];
            for ky in 0..k {
                let (y0, y1) = tap_range(h, ky as isize - p);
                if y0 == y1 {
                    continue;
                }
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cs[row * hw..(row + 1) * hw];
                    let (x0, x1) = tap_range(w, kx as isize - p);
                    if x0 == x1 {
                        continue;
                    }
                    let ix0 = (x0 as isize + kx as isize - p) as usize;
                    for oy in y0..y1 {
                        let iy = (oy as isize + ky as isize - p) as usize;
                        let d = &mut dst[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
                        for (dv, sv) in d.iter_mut().zip(&src[oy * w + x0..oy * w + x1]) {
                            *dv += sv;
                        }
                    }
                }
            }
        }
    }

    /// Multiply-accumulates for one forward pass over a `h x w` map.
    pub fn macs(&self, batch: usize, h: usize, w: usize) -> u64 {
        let per_out = (self.in_ch / self.groups * self.kernel * self.kernel) as u64;
        per_out * (self.out_ch * h * w * batch) as u64
    }
}

impl Module for Conv2d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Per-channel batch normalization over (batch, height, width).
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: ArrayD<f64>,
    pub running_var: ArrayD<f64>,
    pub momentum: f64,
    pub eps: f64,
}

/// Batch statistics and normalized activations from a training-mode pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    xhat: Array4<f64>,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    unbiased_var: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new(ch: usize) -> Self {
        Self {
            gamma: Param::filled(&[ch], 1.0),
            beta: Param::zeros(&[ch]),
            running_mean: ArrayD::zeros(IxDyn(&[ch])),
            running_var: ArrayD::ones(IxDyn(&[ch])),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward_train(&self, x: &Array4<f64>) -> (Array4<f64>, BatchNormCache) {
        let (b, c, h, w) = x.dim();
        let m = (b * h * w) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let v = x.index_axis(Axis(1), ch);
            let mu = v.sum() / m;
            let s2 = v.fold(0.0, |a, &e| a + (e - mu) * (e - mu)) / m;
            mean[ch] = mu;
            var[ch] = s2;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = x.to_owned();
        for ((_, ch, _, _), e) in xhat.indexed_iter_mut() {
            *e = (*e - mean[ch]) * inv_std[ch];
        }
        let mut y = xhat.clone();
        let g = self.gamma.data();
        let bt = self.beta.data();
        for ((_, ch, _, _), e) in y.indexed_iter_mut() {
            *e = *e * g[ch] + bt[ch];
        }
        let corr = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        let unbiased_var = var.iter().map(|v| v * corr).collect();
        (
            y,
            BatchNormCache {
                xhat,
                inv_std,
                mean,
                unbiased_var,
            },
        )
    }

    pub fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        let rm = self.running_mean.as_slice().expect("contiguous");
        let rv = self.running_var.as_slice().expect("contiguous");
        let g = self.gamma.data();
        let bt = self.beta.data();
        let mut y = x.to_owned();
        for ((_, ch, _, _), e) in y.indexed_iter_mut() {
            *e = (*e - rm[ch]) / (rv[ch] + self.eps).sqrt() * g[ch] + bt[ch];
        }
        y
    }

    pub fn update_running_stats(&mut self, cache: &BatchNormCache) {
        let mom = self.momentum;
        for (r, m) in self.running_mean.iter_mut().zip(&cache.mean) {
            *r = (1.0 - mom) * *r + mom * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(&cache.unbiased_var) {
            *r = (1.0 - mom) * *r + mom * v;
        }
    }

    pub fn backward(&mut self, cache: &BatchNormCache, dy: &Array4<f64>) -> Array4<f64> {
        let (b, c, h, w) = dy.dim();
        let m = (b * h * w) as f64;
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for (((_, ch, _, _), g), xh) in dy.indexed_iter().zip(cache.xhat.iter()) {
            sum_dy[ch] += g;
            sum_dy_xhat[ch] += g * xh;
        }
        for ch in 0..c {
            self.gamma.grad_mut()[ch] += sum_dy_xhat[ch];
            self.beta.grad_mut()[ch] += sum_dy[ch];
        }
        let gamma = self.gamma.data();
        let mut dx = Array4::<f64>::zeros((b, c, h, w));
        for (((idx, g), xh), d) in dy.indexed_iter().zip(cache.xhat.iter()).zip(dx.iter_mut()) {
            let ch = idx.1;
            *d = gamma[ch] * cache.inv_std[ch] / m * (m * g - sum_dy[ch] - xh * sum_dy_xhat[ch]);
        }
        dx
    }
}

impl Module for BatchNorm2d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }
    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// Layer normalization over the last axis with learnable affine.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub weight: Param,
    pub bias: Param,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Array3<f64>,
    rstd: Vec<f64>,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(ch: usize) -> Self {
        Self {
            weight: Param::filled(&[ch], 1.0),
            bias: Param::zeros(&[ch]),
            eps: LN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.len()
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, LayerNormCache) {
        let (xhat, rstd) = normalize_rows(x, self.eps);
        let mut y = xhat.clone();
        let wt = self.weight.data();
        let bs = self.bias.data();
        for mut row in y.rows_mut() {
            for ((e, g), b) in row.iter_mut().zip(wt).zip(bs) {
                *e = *e * g + b;
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Array3<f64>) -> Array3<f64> {
        let c = self.channels();
        let cf = c as f64;
        let wt = self.weight.data().to_vec();
        let mut gw = vec![0.0; c];
        let mut gb = vec![0.0; c];
        let mut dx = Array3::<f64>::zeros(dy.raw_dim());
        for (((g, xh), mut d), &r) in dy
            .rows()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(dx.rows_mut())
            .zip(&cache.rstd)
        {
            let mut mean_dxh = 0.0;
            let mut mean_dxh_xh = 0.0;
            for j in 0..c {
                gw[j] += g[j] * xh[j];
                gb[j] += g[j];
                let dxh = g[j] * wt[j];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh[j];
            }
            mean_dxh /= cf;
            mean_dxh_xh /= cf;
            for j in 0..c {
                d[j] = r * (g[j] * wt[j] - mean_dxh - xh[j] * mean_dxh_xh);
            }
        }
        for (a, v) in self.weight.grad_mut().iter_mut().zip(gw) {
            *a += v;
        }
        for (a, v) in self.bias.grad_mut().iter_mut().zip(gb) {
            *a += v;
        }
        dx
    }
}

impl Module for LayerNorm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Zero-mean, unit-(population-)variance rows along the last axis.
pub(crate) fn normalize_rows(x: &Array3<f64>, eps: f64) -> (Array3<f64>, Vec<f64>) {
    let c = x.dim().2 as f64;
    let mut xhat = x.to_owned();
    let mut rstd = Vec::with_capacity(x.dim().0 * x.dim().1);
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / c;
        let var = row.fold(0.0, |a, &e| a + (e - mean) * (e - mean)) / c;
        let r = 1.0 / (var + eps).sqrt();
        row.mapv_inplace(|e| (e - mean) * r);
        rstd.push(r);
    }
    (xhat, rstd)
}

pub fn relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient of ReLU given its output.
pub fn relu_backward(y: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.to_owned();
    dx.zip_mut_with(y, |d, &o| {
        if o <= 0.0 {
            *d = 0.0
        }
    });
    dx
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// 2x2 max-pool with stride 2; returns the pooled map and flat argmax offsets.
pub fn max_pool2(x: &Array4<f64>) -> Result<(Array4<f64>, Vec<usize>)> {
    let (b, c, h, w) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Contract(format!("max-pool needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard");
    let mut out = Array4::<f64>::zeros((b, c, oh, ow));
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    let os = out.as_slice_mut().expect("fresh");
    let mut o = 0;
    for bc in 0..b * c {
        let base = bc * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let i0 = base + 2 * y * w + 2 * xx;
                let cand = [i0, i0 + 1, i0 + w, i0 + w + 1];
                let mut best = cand[0];
                for &ci in &cand[1..] {
                    if xs[ci] > xs[best] {
                        best = ci;
                    }
                }
                os[o] = xs[best];
                arg.push(best);
                o += 1;
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool2_backward(dy: &Array4<f64>, argmax: &[usize], in_dim: (usize, usize, usize, usize)) -> Array4<f64> {
    let mut dx = Array4::<f64>::zeros(in_dim);
    let ds = dx.as_slice_mut().expect("fresh");
    for (g, &i) in dy.iter().zip(argmax) {
        ds[i] += g;
    }
    dx
}

/// Interpolation taps for align-corners bilinear resampling of length `n` to `2n`.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    let m = 2 * n;
    let scale = if m > 1 { (n as f64 - 1.0) / (m as f64 - 1.0) } else { 0.0 };
    (0..m)
        .map(|o| {
            let src = o as f64 * scale;
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear x2 upsampling (align-corners).
pub fn upsample2(x: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard");
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Array4::<f64>::zeros((b, c, oh, ow));
    let os = out.as_slice_mut().expect("fresh");
    let mut rows = vec![0.0; h * ow];
    for bc in 0..b * c {
        let src = &xs[bc * h * w..(bc + 1) * h * w];
        for y in 0..h {
            for (o, &(i0, i1, f)) in tx.iter().enumerate() {
                rows[y * ow + o] = src[y * w + i0] * (1.0 - f) + src[y * w + i1] * f;
            }
        }
        let dst = &mut os[bc * oh * ow..(bc + 1) * oh * ow];
        for (o, &(i0, i1, f)) in ty.iter().enumerate() {
            for j in 0..ow {
                dst[o * ow + j] = rows[i0 * ow + j] * (1.0 - f) + rows[i1 * ow + j] * f;
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Array4<f64>) -> Array4<f64> {
    let (b, c, oh, ow) = dy.dim();
    let (h, w) = (oh / 2, ow / 2);
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let dy = dy.as_standard_layout();
    let ds = dy.as_slice().expect("standard");
    let mut dx = Array4::<f64>::zeros((b, c, h, w));
    let dxs = dx.as_slice_mut().expect("fresh");
    let mut rows = vec![0.0; h * ow];
    for bc in 0..b * c {
        rows.fill(0.0);
        let g = &ds[bc * oh * ow..(bc + 1) * oh * ow];
        for (o, &(i0, i1, f)) in ty.iter().enumerate() {
            for j in 0..ow {
                rows[i0 * ow + j] += g[o * ow + j] * (1.0 - f);
                rows[i1 * ow + j] += g[o * ow + j] * f;
            }
        }
        let dst = &mut dxs[bc * h * w..(bc + 1) * h * w];
        for y in 0..h {
            for (o, &(i0, i1, f)) in tx.iter().enumerate() {
                dst[y * w + i0] += rows[y * ow + o] * (1.0 - f);
                dst[y * w + i1] += rows[y * ow + o] * f;
            }
        }
    }
    dx
}

/// (B, C, H, W) -> (B, H*W, C).
pub fn to_sequence(x: &Array4<f64>) -> Array3<f64> {
    let (b, c, h, w) = x.dim();
    x.view()
        .into_shape_with_order((b, c, h * w))
        .expect("contiguous reshape")
        .permuted_axes([0, 2, 1])
        .as_standard_layout()
        .into_owned()
}

/// (B, H*W, C) -> (B, C, H, W).
pub fn to_feature_map(x: &Array3<f64>, h: usize, w: usize) -> Result<Array4<f64>> {
    let (b, n, c) = x.dim();
    if n != h * w {
        return Err(Error::Contract(format!("sequence length {n} != {h}x{w}")));
    }
    Ok(x.view()
        .permuted_axes([0, 2, 1])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((b, c, h, w))
        .expect("contiguous reshape"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Array4<f64>, conv: &Conv2d) -> Array4<f64> {
        let (b, c, h, w) = x.dim();
        let k = conv.kernel as isize;
        let p = k / 2;
        let wt = conv.weight.value.clone();
        let mut out = Array4::zeros((b, conv.out_ch, h, w));
        for bi in 0..b {
            for o in 0..conv.out_ch {
                for y in 0..h as isize {
                    for xx in 0..w as isize {
                        let mut acc = conv.bias.data()[o];
                        let ins: Vec<usize> = if conv.is_depthwise() { vec![o] } else { (0..c).collect() };
                        for (gi, &ci) in ins.iter().enumerate() {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = y + ky - p;
                                    let ix = xx + kx - p;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += wt[[o, gi, ky as usize, kx as usize]] * x[[bi, ci, iy as usize, ix as usize]];
                                }
                            }
                        }
                        out[[bi, o, y as usize, xx as usize]] = acc;
                    }
                }
            }
        }
        out
    }

    fn rand4(rng: &mut ChaCha8Rng, d: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(d, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn dense_and_depthwise_conv_match_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (h, w) in [(5, 6), (2, 2), (1, 3)] {
            for (cin, cout, k, g) in [(3, 5, 3, 1), (4, 4, 5, 4), (2, 3, 1, 1), (3, 3, 7, 3)] {
                let conv = Conv2d::new(cin, cout, k, g, &mut rng).unwrap();
                let x = rand4(&mut rng, (2, cin, h, w));
                let fast = conv.forward(&x).unwrap();
                let slow = naive_conv(&x, &conv);
                let diff = (&fast - &slow).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
                assert!(diff < 1e-12, "{h}x{w} k={k} g={g} diff={diff}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (cin, cout, k, g) in [(3, 4, 3, 1), (4, 4, 5, 4), (4, 4, 7, 4)] {
            let mut conv = Conv2d::new(cin, cout, k, g, &mut rng).unwrap();
            conv.bias.value.fill(0.0);
            let x = rand4(&mut rng, (2, cin, 4, 5));
            let v = rand4(&mut rng, (2, cout, 4, 5));
            let y = conv.forward(&x).unwrap();
            let dx = conv.backward(&x, &v);
            let lhs: f64 = (&y * &v).sum();
            let rhs: f64 = (&x * &dx).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn upsample_preserves_constants_and_corners() {
        let x = Array4::from_elem((1, 2, 3, 4), 2.5);
        let y = upsample2(&x);
        assert_eq!(y.dim(), (1, 2, 6, 8));
        assert!(y.iter().all(|&v| (v - 2.5).abs() < 1e-12));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand4(&mut rng, (1, 1, 3, 3));
        let y = upsample2(&x);
        assert_eq!(y[[0, 0, 0, 0]], x[[0, 0, 0, 0]]);
        assert!((y[[0, 0, 5, 5]] - x[[0, 0, 2, 2]]).abs() < 1e-12);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand4(&mut rng, (2, 3, 2, 3));
        let v = rand4(&mut rng, (2, 3, 4, 6));
        let lhs = (&upsample2(&x) * &v).sum();
        let rhs = (&x * &upsample2_backward(&v)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Array4::from_shape_vec((1, 1, 2, 2), vec![0.1, 0.9, 0.3, 0.2]).unwrap();
        let (y, arg) = max_pool2(&x).unwrap();
        assert_eq!(y[[0, 0, 0, 0]], 0.9);
        let dx = max_pool2_backward(&Array4::ones((1, 1, 1, 1)), &arg, x.dim());
        assert_eq!(dx.as_slice().unwrap(), &[0.0, 1.0, 0.0, 0.0]);
        assert!(max_pool2(&Array4::zeros((1, 1, 3, 2))).is_err());
    }

    #[test]
    fn sequence_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand4(&mut rng, (2, 3, 4, 5));
        let s = to_sequence(&x);
        assert_eq!(s.dim(), (2, 20, 3));
        assert_eq!(s[[1, 7, 2]], x[[1, 2, 1, 2]]);
        assert_eq!(to_feature_map(&s, 4, 5).unwrap(), x);
        assert!(to_feature_map(&s, 5, 5).is_err());
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut bn = BatchNorm2d::new(2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand4(&mut rng, (4, 2, 3, 3)).mapv(|v| 3.0 * v + 1.0);
        let (y, cache) = bn.forward_train(&x);
        let m = y.index_axis(Axis(1), 0).mean().unwrap();
        assert!(m.abs() < 1e-12);
        for _ in 0..200 {
            bn.update_running_stats(&cache);
        }
        let ye = bn.forward_eval(&x);
        let diff = (&ye - &y).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 0.05, "{diff}");
    }
}
