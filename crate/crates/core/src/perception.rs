//! Four-branch perception blocks.
//!
//! Both blocks flatten the feature map to a (B, N, C) sequence, apply a
//! per-position layer norm over channels, split the channels into four
//! contiguous quarters of `C/4`, run one branch per quarter, and concatenate
//! the results back along channels. GLMBP sends the first two quarters
//! through one shared bidirectional Mamba, the third through a
//! depthwise-separable convolution and passes the fourth through the scaled
//! identity. LMBP replaces the Mamba branches with two more convolutions.

use ndarray::{concatenate, s, Array3, Array4, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{normalize_rows, to_feature_map, to_sequence, Conv2d, LayerNorm, LayerNormCache, LN_EPS};
use crate::param::{join, Module, Param};
use crate::ssm::{BiMambaBlock, BiMambaCache, MambaConfig};

/// Channel layer norm without affine, for (B, N, C) sequences.
pub fn layer_norm_channels(x: &Array3<f64>) -> Array3<f64> {
    normalize_rows(x, LN_EPS).0
}

/// Channel layer norm without affine, for (B, C, H, W) feature maps.
pub fn layer_norm_feature_map(x: &Array4<f64>) -> Array4<f64> {
    let (_, _, h, w) = x.dim();
    to_feature_map(&layer_norm_channels(&to_sequence(x)), h, w).expect("same spatial size")
}

/// Splits the channel axis into four contiguous, equally sized quarters.
pub fn channel_split4(x: &Array3<f64>) -> Result<[Array3<f64>; 4]> {
    let c = x.dim().2;
    if !c.is_multiple_of(4) || c == 0 {
        return Err(Error::Config(format!("channel count {c} is not divisible by 4")));
    }
    let q = c / 4;
    Ok(std::array::from_fn(|i| x.slice(s![.., .., i * q..(i + 1) * q]).to_owned()))
}

pub fn concat_channels(parts: &[Array3<f64>]) -> Array3<f64> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(2), &views).expect("matching batch and length")
}

/// `(1 + gamma) * x`.
pub fn identity_branch(x: &Array3<f64>, gamma: f64) -> Array3<f64> {
    x.mapv(|v| (1.0 + gamma) * v)
}

/// Depthwise k x k conv followed by a pointwise 1 x 1 conv; no norm or activation in between.
#[derive(Clone, Debug)]
pub struct DepthwiseSeparableConv {
    pub depthwise: Conv2d,
    pub pointwise: Conv2d,
}

#[derive(Clone, Debug)]
pub struct DwSepCache {
    input: Array4<f64>,
    mid: Array4<f64>,
}

impl DepthwiseSeparableConv {
    pub fn new<R: Rng + ?Sized>(channels: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            depthwise: Conv2d::new(channels, channels, kernel, channels, rng)?,
            pointwise: Conv2d::new(channels, channels, 1, 1, rng)?,
        })
    }

    pub fn kernel(&self) -> usize {
        self.depthwise.kernel
    }

    pub fn forward(&self, x: &Array4<f64>) -> Result<(Array4<f64>, DwSepCache)> {
        let mid = self.depthwise.forward(x)?;
        let out = self.pointwise.forward(&mid)?;
        Ok((
            out,
            DwSepCache {
                input: x.clone(),
                mid,
            },
        ))
    }

    pub fn backward(&mut self, cache: &DwSepCache, dy: &Array4<f64>) -> Array4<f64> {
        let dmid = self.pointwise.backward(&cache.mid, dy);
        self.depthwise.backward(&cache.input, &dmid)
    }

    pub fn macs(&self, batch: usize, h: usize, w: usize) -> u64 {
        self.depthwise.macs(batch, h, w) + self.pointwise.macs(batch, h, w)
    }

    /// Zeroes all weights and biases.
    pub fn zero(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.value.fill(0.0));
    }

    /// Sets the depthwise kernel to a centered delta and the pointwise map to the identity.
    pub fn set_identity(&mut self) {
        self.zero();
        let k = self.kernel();
        let c = self.depthwise.out_ch;
        for ch in 0..c {
            self.depthwise.weight.value[[ch, 0, k / 2, k / 2].as_slice()] = 1.0;
            self.pointwise.weight.value[[ch, ch, 0, 0].as_slice()] = 1.0;
        }
    }
}

impl Module for DepthwiseSeparableConv {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.depthwise.visit_params(&join(prefix, "depthwise"), f);
        self.pointwise.visit_params(&join(prefix, "pointwise"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.depthwise.visit_params_mut(&join(prefix, "depthwise"), f);
        self.pointwise.visit_params_mut(&join(prefix, "pointwise"), f);
    }
}

/// `reshape(DWSepConv(reshape2d(x))) + gamma * x` for a (B, N, C') sequence with N = H*W.
pub fn local_branch(
    x: &Array3<f64>,
    conv: &DepthwiseSeparableConv,
    h: usize,
    w: usize,
    gamma: f64,
) -> Result<Array3<f64>> {
    Ok(local_forward(x, conv, h, w, gamma)?.0)
}

fn local_forward(
    x: &Array3<f64>,
    conv: &DepthwiseSeparableConv,
    h: usize,
    w: usize,
    gamma: f64,
) -> Result<(Array3<f64>, DwSepCache)> {
    let map = to_feature_map(x, h, w)?;
    let (y, cache) = conv.forward(&map)?;
    Ok((to_sequence(&y) + &x.mapv(|v| gamma * v), cache))
}

/// Returns (dx, dgamma).
fn local_backward(
    x: &Array3<f64>,
    conv: &mut DepthwiseSeparableConv,
    cache: &DwSepCache,
    dy: &Array3<f64>,
    h: usize,
    w: usize,
    gamma: f64,
) -> (Array3<f64>, f64) {
    let dg = (dy * x).sum();
    let dmap = to_feature_map(dy, h, w).expect("validated in forward");
    let dx = to_sequence(&conv.backward(cache, &dmap)) + &dy.mapv(|v| gamma * v);
    (dx, dg)
}

fn check_block_input(x: &Array4<f64>, channels: usize, what: &str) -> Result<()> {
    let c = x.dim().1;
    if c != channels {
        return Err(Error::Contract(format!("{what} expects {channels} channels, got {c}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} input contains non-finite values")));
    }
    Ok(())
}

fn check_quarter(channels: usize, what: &str) -> Result<usize> {
    if channels == 0 || !channels.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "{what} needs a channel count divisible by 4, got {channels}"
        )));
    }
    Ok(channels / 4)
}

/// Global-local multi-branch perception block.
#[derive(Clone, Debug)]
pub struct GlmbpBlock {
    pub norm: LayerNorm,
    pub bimamba: BiMambaBlock,
    pub dwconv: DepthwiseSeparableConv,
    pub gamma: Param,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct GlmbpCache {
    ln: LayerNormCache,
    parts: [Array3<f64>; 4],
    bimamba: BiMambaCache<f64>,
    local: DwSepCache,
    h: usize,
    w: usize,
}

impl GlmbpBlock {
    pub fn new<R: Rng + ?Sized>(channels: usize, kernel: usize, mamba: &MambaConfig, rng: &mut R) -> Result<Self> {
        let q = check_quarter(channels, "GLMBP")?;
        Ok(Self {
            norm: LayerNorm::new(channels),
            bimamba: BiMambaBlock::new(q, mamba, rng)?,
            dwconv: DepthwiseSeparableConv::new(q, kernel, rng)?,
            gamma: Param::scalar(1.0),
            channels,
        })
    }

    pub fn kernel(&self) -> usize {
        self.dwconv.kernel()
    }

    pub fn forward(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Array4<f64>) -> Result<(Array4<f64>, GlmbpCache)> {
        check_block_input(x, self.channels, "GLMBP")?;
        let (b, _, h, w) = x.dim();
        let (xn, ln) = self.norm.forward(&to_sequence(x));
        let parts = channel_split4(&xn)?;
        let gamma = self.gamma.get();
        // X1 and X2 share the bidirectional block: run them as one batch.
        let glob_in = concatenate(Axis(0), &[parts[0].view(), parts[1].view()]).expect("same shape");
        let (glob, bimamba) = self.bimamba.forward_cached(&glob_in)?;
        let (loc, local) = local_forward(&parts[2], &self.dwconv, h, w, gamma)?;
        let ident = identity_branch(&parts[3], gamma);
        let fused = concat_channels(&[
            glob.slice(s![..b, .., ..]).to_owned(),
            glob.slice(s![b.., .., ..]).to_owned(),
            loc,
            ident,
        ]);
        Ok((
            to_feature_map(&fused, h, w)?,
            GlmbpCache {
                ln,
                parts,
                bimamba,
                local,
                h,
                w,
            },
        ))
    }

    pub fn backward(&mut self, cache: &GlmbpCache, dy: &Array4<f64>) -> Array4<f64> {
        let b = dy.dim().0;
        let (h, w) = (cache.h, cache.w);
        let dseq = to_sequence(dy);
        let dparts = channel_split4(&dseq).expect("validated in forward");
        let gamma = self.gamma.get();
        let dglob = concatenate(Axis(0), &[dparts[0].view(), dparts[1].view()]).expect("same shape");
        let dglob_in = self.bimamba.backward(&cache.bimamba, &dglob);
        let (dloc, dg_loc) = local_backward(&cache.parts[2], &mut self.dwconv, &cache.local, &dparts[2], h, w, gamma);
        let dg_id = (&dparts[3] * &cache.parts[3]).sum();
        self.gamma.grad_mut()[0] += dg_loc + dg_id;
        let dident = dparts[3].mapv(|v| (1.0 + gamma) * v);
        let dxn = concat_channels(&[
            dglob_in.slice(s![..b, .., ..]).to_owned(),
            dglob_in.slice(s![b.., .., ..]).to_owned(),
            dloc,
            dident,
        ]);
        let dx = self.norm.backward(&cache.ln, &dxn);
        to_feature_map(&dx, h, w).expect("same spatial size")
    }

    pub fn macs(&self, batch: usize, h: usize, w: usize) -> u64 {
        // two quarters x two directions through the shared Mamba
        self.bimamba.mamba.macs(4 * batch * h * w) + self.dwconv.macs(batch, h, w)
    }

    pub fn elementwise_ops(&self, batch: usize, h: usize, w: usize) -> u64 {
        let n = (batch * h * w) as u64;
        let c = self.channels as u64;
        let q = c / 4;
        // LN (normalize + affine), bidirectional sums and residuals, local and identity scaling
        4 * c * n + 2 * 3 * q * n + 2 * q * n + q * n + self.bimamba.mamba.elementwise_ops(4 * batch * h * w)
    }
}

impl Module for GlmbpBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.bimamba.visit_params(&join(prefix, "bimamba"), f);
        self.dwconv.visit_params(&join(prefix, "dwconv"), f);
        f(&join(prefix, "gamma"), &self.gamma);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.norm.visit_params_mut(&join(prefix, "norm"), f);
        self.bimamba.visit_params_mut(&join(prefix, "bimamba"), f);
        self.dwconv.visit_params_mut(&join(prefix, "dwconv"), f);
        f(&join(prefix, "gamma"), &mut self.gamma);
    }
}

/// Local multi-branch perception block: three depthwise-separable branches and the identity.
#[derive(Clone, Debug)]
pub struct LmbpBlock {
    pub norm: LayerNorm,
    pub dwconvs: [DepthwiseSeparableConv; 3],
    pub gamma: Param,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct LmbpCache {
    ln: LayerNormCache,
    parts: [Array3<f64>; 4],
    locals: Vec<DwSepCache>,
    h: usize,
    w: usize,
}

impl LmbpBlock {
    pub fn new<R: Rng + ?Sized>(channels: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        let q = check_quarter(channels, "LMBP")?;
        Ok(Self {
            norm: LayerNorm::new(channels),
            dwconvs: [
                DepthwiseSeparableConv::new(q, kernel, rng)?,
                DepthwiseSeparableConv::new(q, kernel, rng)?,
                DepthwiseSeparableConv::new(q, kernel, rng)?,
            ],
            gamma: Param::scalar(1.0),
            channels,
        })
    }

    pub fn kernel(&self) -> usize {
        self.dwconvs[0].kernel()
    }

    pub fn forward(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Array4<f64>) -> Result<(Array4<f64>, LmbpCache)> {
        check_block_input(x, self.channels, "LMBP")?;
        let (_, _, h, w) = x.dim();
        let (xn, ln) = self.norm.forward(&to_sequence(x));
        let parts = channel_split4(&xn)?;
        let gamma = self.gamma.get();
        let mut outs = Vec::with_capacity(4);
        let mut locals = Vec::with_capacity(3);
        for (part, conv) in parts.iter().zip(&self.dwconvs) {
            let (o, c) = local_forward(part, conv, h, w, gamma)?;
            outs.push(o);
            locals.push(c);
        }
        outs.push(identity_branch(&parts[3], gamma));
        Ok((
            to_feature_map(&concat_channels(&outs), h, w)?,
            LmbpCache {
                ln,
                parts,
                locals,
                h,
                w,
            },
        ))
    }

    pub fn backward(&mut self, cache: &LmbpCache, dy: &Array4<f64>) -> Array4<f64> {
        let (h, w) = (cache.h, cache.w);
        let dparts = channel_split4(&to_sequence(dy)).expect("validated in forward");
        let gamma = self.gamma.get();
        let mut dins = Vec::with_capacity(4);
        let mut dgamma = 0.0;
        for i in 0..3 {
            let (dx, dg) = local_backward(&cache.parts[i], &mut self.dwconvs[i], &cache.locals[i], &dparts[i], h, w, gamma);
            dins.push(dx);
            dgamma += dg;
        }
        dgamma += (&dparts[3] * &cache.parts[3]).sum();
        dins.push(dparts[3].mapv(|v| (1.0 + gamma) * v));
        self.gamma.grad_mut()[0] += dgamma;
        let dx = self.norm.backward(&cache.ln, &concat_channels(&dins));
        to_feature_map(&dx, h, w).expect("same spatial size")
    }

    pub fn macs(&self, batch: usize, h: usize, w: usize) -> u64 {
        self.dwconvs.iter().map(|c| c.macs(batch, h, w)).sum()
    }

    pub fn elementwise_ops(&self, batch: usize, h: usize, w: usize) -> u64 {
        let n = (batch * h * w) as u64;
        let c = self.channels as u64;
        let q = c / 4;
        4 * c * n + 3 * 2 * q * n + q * n
    }
}

impl Module for LmbpBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.norm.visit_params(&join(prefix, "norm"), f);
        for (i, c) in self.dwconvs.iter().enumerate() {
            c.visit_params(&join(prefix, &format!("dwconv{i}")), f);
        }
        f(&join(prefix, "gamma"), &self.gamma);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.norm.visit_params_mut(&join(prefix, "norm"), f);
        for (i, c) in self.dwconvs.iter_mut().enumerate() {
            c.visit_params_mut(&join(prefix, &format!("dwconv{i}")), f);
        }
        f(&join(prefix, "gamma"), &mut self.gamma);
    }
}

/// Functional form of [`GlmbpBlock::forward`].
pub fn glmbp_forward(x: &Array4<f64>, block: &GlmbpBlock) -> Result<Array4<f64>> {
    block.forward(x)
}

/// Functional form of [`LmbpBlock::forward`].
pub fn lmbp_forward(x: &Array4<f64>, block: &LmbpBlock) -> Result<Array4<f64>> {
    block.forward(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn rand3(r: &mut ChaCha8Rng, d: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_fn(d, |_| r.random_range(-1.0..1.0))
    }

    fn rand4(r: &mut ChaCha8Rng, d: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(d, |_| r.random_range(-1.0..1.0))
    }

    fn max_abs(a: &Array3<f64>) -> f64 {
        a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn layer_norm_examples() {
        let x = Array3::from_elem((1, 2, 4), 3.0);
        assert!(max_abs(&layer_norm_channels(&x)) < 1e-12);
        let x = Array3::from_shape_vec((1, 1, 2), vec![1.0, 3.0]).unwrap();
        let y = layer_norm_channels(&x);
        assert!((y[[0, 0, 0]] + 1.0).abs() < 1e-5 && (y[[0, 0, 1]] - 1.0).abs() < 1e-5);
        let mut r = rng();
        let y = layer_norm_channels(&rand3(&mut r, (3, 10, 16)));
        for row in y.rows() {
            let m = row.mean().unwrap();
            let v = row.mapv(|e| (e - m) * (e - m)).mean().unwrap();
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn split_and_concat() {
        let mut r = rng();
        let x = rand3(&mut r, (2, 5, 8));
        let parts = channel_split4(&x).unwrap();
        assert!(parts.iter().all(|p| p.dim() == (2, 5, 2)));
        assert_eq!(concat_channels(&parts), x);
        let wide = rand3(&mut r, (1, 3, 64));
        assert!(channel_split4(&wide).unwrap().iter().all(|p| p.dim().2 == 16));
        assert!(matches!(channel_split4(&rand3(&mut r, (1, 3, 6))), Err(Error::Config(_))));
    }

    #[test]
    fn identity_branch_scaling() {
        let x = Array3::from_elem((1, 2, 2), 1.5);
        assert_eq!(identity_branch(&x, 0.0), x);
        assert_eq!(identity_branch(&x, 1.0), x.mapv(|v| 2.0 * v));
        assert!(identity_branch(&x, -1.0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn local_branch_examples() {
        let mut r = rng();
        let mut conv = DepthwiseSeparableConv::new(3, 5, &mut r).unwrap();
        let x = rand3(&mut r, (2, 12, 3));
        conv.zero();
        assert!(local_branch(&x, &conv, 3, 4, 0.0).unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(local_branch(&x, &conv, 3, 4, 1.0).unwrap(), x);
        conv.set_identity();
        let y = local_branch(&x, &conv, 3, 4, 0.0).unwrap();
        assert!(max_abs(&(&y - &x)) < 1e-12);
        assert!(matches!(local_branch(&x, &conv, 3, 3, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn glmbp_shape_and_zero_weights() {
        let mut r = rng();
        let mut blk = GlmbpBlock::new(32, 5, &MambaConfig::default(), &mut r).unwrap();
        let x = rand4(&mut r, (2, 32, 16, 16));
        assert_eq!(blk.forward(&x).unwrap().dim(), (2, 32, 16, 16));

        blk.bimamba.mamba.out_proj.value.fill(0.0);
        blk.bimamba.gamma.set(0.0);
        blk.dwconv.zero();
        blk.gamma.set(0.0);
        let y = blk.forward(&x).unwrap();
        let ln = layer_norm_feature_map(&x);
        for c in 0..24 {
            assert!(y.index_axis(Axis(1), c).iter().all(|&v| v == 0.0));
        }
        for c in 24..32 {
            let d = (&y.index_axis(Axis(1), c) - &ln.index_axis(Axis(1), c)).mapv(f64::abs);
            assert!(d.iter().all(|&v| v < 1e-12));
        }
    }

    #[test]
    fn glmbp_is_batch_equivariant() {
        let mut r = rng();
        let blk = GlmbpBlock::new(8, 3, &MambaConfig::default(), &mut r).unwrap();
        let x = rand4(&mut r, (3, 8, 4, 4));
        let perm = [2usize, 0, 1];
        let xp = x.select(Axis(0), &perm);
        let y = blk.forward(&x).unwrap();
        let yp = blk.forward(&xp).unwrap();
        let diff = (&yp - &y.select(Axis(0), &perm)).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-12);
    }

    #[test]
    fn lmbp_shape_zero_and_identity() {
        let mut r = rng();
        let mut blk = LmbpBlock::new(24, 3, &mut r).unwrap();
        let x = rand4(&mut r, (2, 24, 32, 32));
        assert_eq!(blk.forward(&x).unwrap().dim(), x.dim());

        blk.gamma.set(0.0);
        for c in blk.dwconvs.iter_mut() {
            c.zero();
        }
        let y = blk.forward(&x).unwrap();
        assert!(y.slice(s![.., ..18, .., ..]).iter().all(|&v| v == 0.0));
        assert!(y.slice(s![.., 18.., .., ..]).iter().any(|&v| v != 0.0));

        for c in blk.dwconvs.iter_mut() {
            c.set_identity();
        }
        let y = blk.forward(&x).unwrap();
        let d = (&y - &layer_norm_feature_map(&x)).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(d < 1e-12, "{d}");
    }

    #[test]
    fn branch_isolation() {
        let mut r = rng();
        let mut blk = LmbpBlock::new(8, 3, &mut r).unwrap();
        for c in blk.dwconvs.iter_mut() {
            c.set_identity();
        }
        blk.gamma.set(0.5);
        // Quarter q of the input carries only the constant q+1; the LN sees a
        // fixed per-position pattern, so each output quarter stays constant.
        let x = Array4::from_shape_fn((1, 8, 4, 4), |(_, c, _, _)| (c / 2 + 1) as f64);
        let y = blk.forward(&x).unwrap();
        for q in 0..4 {
            let sl = y.slice(s![.., 2 * q..2 * q + 2, .., ..]);
            let first = sl[[0, 0, 0, 0]];
            assert!(sl.iter().all(|&v| (v - first).abs() < 1e-12));
        }
    }

    #[test]
    fn glmbp_parameter_budget_decomposes() {
        let mut r = rng();
        let blk = GlmbpBlock::new(48, 7, &MambaConfig::default(), &mut r).unwrap();
        let expected = 2 * 48 + blk.bimamba.num_params() + blk.dwconv.num_params() + 1;
        assert_eq!(blk.num_params(), expected);
        // depthwise 12*49 + 12, pointwise 12*12 + 12
        assert_eq!(blk.dwconv.num_params(), 12 * 49 + 12 + 144 + 12);
    }

    #[test]
    fn rejects_wrong_channels_and_non_divisible_widths() {
        let mut r = rng();
        assert!(matches!(GlmbpBlock::new(10, 3, &MambaConfig::default(), &mut r), Err(Error::Config(_))));
        assert!(matches!(LmbpBlock::new(6, 3, &mut r), Err(Error::Config(_))));
        let blk = LmbpBlock::new(8, 3, &mut r).unwrap();
        assert!(matches!(blk.forward(&rand4(&mut r, (1, 4, 2, 2))), Err(Error::Contract(_))));
    }
}
