//! Network assembly: six-stage encoder, five-stage decoder, scaled
//! additive skips and a sigmoid head.
//!
//! Stage layout for channels `[c0..c5]` on an `H x W` input:
//!
//! ```text
//! enc1..enc3  conv3x3+BN+ReLU, 2x2 max-pool          -> t1 (H/2) .. t3 (H/8)
//! enc4..enc5  1x1 proj, deep block, 2x2 max-pool      -> t4 (H/16), t5 (H/32)
//! enc6        1x1 proj, deep block                    -> H/32
//! dec1        deep block, 1x1 proj,           + k*t5  -> H/32
//! dec2..dec3  deep block, 1x1 proj, upsample, + k*t4, + k*t3
//! dec4..dec5  conv3x3+BN+ReLU,      upsample, + k*t2, + k*t1
//! head        1x1 conv at H/2, bilinear x2, sigmoid
//! ```

use ndarray::{Array4, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    max_pool2, max_pool2_backward, relu, relu_backward, sigmoid, upsample2, upsample2_backward, BatchNorm2d,
    BatchNormCache, Conv2d,
};
use crate::param::{join, Module, Param};
use crate::perception::{GlmbpBlock, GlmbpCache, LmbpBlock, LmbpCache};
use crate::ssm::MambaConfig;

/// Spatial reduction factor of the encoder.
pub const DOWNSAMPLE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Glmbp,
    Lmbp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipScaleMode {
    /// Plain addition, no learnable scalar.
    None,
    /// One learnable scalar for all five connections.
    #[default]
    Shared,
    /// One learnable scalar per connection.
    StageWise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: Vec<usize>,
    /// Encoder stages IV..VI; the decoder mirrors them.
    pub stage_kinds: Vec<StageKind>,
    pub encoder_kernels: Vec<usize>,
    pub decoder_kernels: Vec<usize>,
    pub skip_scale_mode: SkipScaleMode,
    pub skip_scale_init: f64,
    pub mamba: MambaConfig,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            channels: vec![8, 16, 24, 32, 48, 64],
            stage_kinds: vec![StageKind::Lmbp, StageKind::Glmbp, StageKind::Glmbp],
            encoder_kernels: vec![3, 5, 7],
            decoder_kernels: vec![7, 5, 3],
            skip_scale_mode: SkipScaleMode::Shared,
            skip_scale_init: 1.0,
            mamba: MambaConfig::default(),
            in_channels: 3,
            out_channels: 1,
        }
    }

    /// The T variant: half the channel widths.
    pub fn tiny() -> Self {
        Self {
            channels: vec![4, 8, 12, 16, 24, 32],
            ..Self::full()
        }
    }

    /// Looks up a preset by name (`full` or `t`).
    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "full" | "default" => Ok(Self::full()),
            "t" | "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown model preset '{other}' (expected full or t)"))),
        }
    }

    pub fn with_stage_kinds(mut self, kinds: [StageKind; 3]) -> Self {
        self.stage_kinds = kinds.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 6 {
            return Err(Error::Config(format!("channels must list 6 stages, got {}", self.channels.len())));
        }
        if let Some(i) = self.channels.iter().position(|&c| c == 0) {
            return Err(Error::Config(format!("channels[{i}] must be positive")));
        }
        for (i, &c) in self.channels.iter().enumerate().skip(3) {
            if c % 4 != 0 {
                return Err(Error::Config(format!(
                    "channels[{i}] = {c} is not divisible by 4 at a GLMBP/LMBP stage"
                )));
            }
        }
        if self.stage_kinds.len() != 3 {
            return Err(Error::Config(format!("stage_kinds must list 3 stages, got {}", self.stage_kinds.len())));
        }
        for (what, ks) in [("encoder_kernels", &self.encoder_kernels), ("decoder_kernels", &self.decoder_kernels)] {
            if ks.len() != 3 {
                return Err(Error::Config(format!("{what} must list 3 kernels, got {}", ks.len())));
            }
            if let Some(k) = ks.iter().find(|k| ![3, 5, 7].contains(*k)) {
                return Err(Error::Config(format!("{what} entry {k} is not one of 3, 5, 7")));
            }
        }
        if !self.skip_scale_init.is_finite() {
            return Err(Error::Config("skip_scale_init must be finite".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("in_channels and out_channels must be positive".into()));
        }
        self.mamba.validate()
    }
}

/// 3x3 conv, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvStage {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

#[derive(Clone, Debug)]
pub struct ConvStageCache {
    x: Array4<f64>,
    bn: Option<BatchNormCache>,
    y: Array4<f64>,
}

impl ConvStage {
    pub fn new(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(c_in, c_out, 3, 1, rng)?,
            bn: BatchNorm2d::new(c_out),
        })
    }

    fn run(&self, x: &Array4<f64>, train: bool) -> Result<(Array4<f64>, ConvStageCache)> {
        let z = self.conv.forward(x)?;
        let (n, bn) = if train {
            let (n, c) = self.bn.forward_train(&z);
            (n, Some(c))
        } else {
            (self.bn.forward_eval(&z), None)
        };
        let y = relu(&n);
        Ok((y.clone(), ConvStageCache { x: x.clone(), bn, y }))
    }

    pub fn backward(&mut self, cache: &ConvStageCache, dy: &Array4<f64>) -> Array4<f64> {
        let dn = relu_backward(&cache.y, dy);
        let bn = cache.bn.as_ref().expect("backward requires a training-mode forward");
        let dz = self.bn.backward(bn, &dn);
        self.conv.backward(&cache.x, &dz)
    }
}

impl Module for ConvStage {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.bn.visit_params(&join(prefix, "bn"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit_params_mut(&join(prefix, "conv"), f);
        self.bn.visit_params_mut(&join(prefix, "bn"), f);
    }
    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        self.bn.visit_buffers(&join(prefix, "bn"), f);
    }
    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.bn.visit_buffers_mut(&join(prefix, "bn"), f);
    }
}

/// Functional conv stage on a freshly built stage (training-mode batch norm).
pub fn conv_stage(x: &Array4<f64>, stage: &ConvStage) -> Result<Array4<f64>> {
    Ok(stage.run(x, true)?.0)
}

/// `decoder + k * encoder`.
pub fn scaled_skip_add(decoder_feat: &Array4<f64>, encoder_feat: &Array4<f64>, k: f64) -> Result<Array4<f64>> {
    if decoder_feat.dim() != encoder_feat.dim() {
        return Err(Error::Contract(format!(
            "skip shapes differ: decoder {:?} vs encoder {:?}",
            decoder_feat.shape(),
            encoder_feat.shape()
        )));
    }
    Ok(decoder_feat + &encoder_feat.mapv(|v| k * v))
}

#[derive(Clone, Debug)]
pub enum DeepBlock {
    Glmbp(GlmbpBlock),
    Lmbp(LmbpBlock),
}

#[derive(Clone, Debug)]
enum DeepCache {
    Glmbp(GlmbpCache),
    Lmbp(LmbpCache),
}

impl DeepBlock {
    fn new(kind: StageKind, channels: usize, kernel: usize, mamba: &MambaConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(match kind {
            StageKind::Glmbp => DeepBlock::Glmbp(GlmbpBlock::new(channels, kernel, mamba, rng)?),
            StageKind::Lmbp => DeepBlock::Lmbp(LmbpBlock::new(channels, kernel, rng)?),
        })
    }

    pub fn kind(&self) -> StageKind {
        match self {
            DeepBlock::Glmbp(_) => StageKind::Glmbp,
            DeepBlock::Lmbp(_) => StageKind::Lmbp,
        }
    }

    fn run(&self, x: &Array4<f64>) -> Result<(Array4<f64>, DeepCache)> {
        Ok(match self {
            DeepBlock::Glmbp(b) => {
                let (y, c) = b.forward_cached(x)?;
                (y, DeepCache::Glmbp(c))
            }
            DeepBlock::Lmbp(b) => {
                let (y, c) = b.forward_cached(x)?;
                (y, DeepCache::Lmbp(c))
            }
        })
    }

    fn backward(&mut self, cache: &DeepCache, dy: &Array4<f64>) -> Array4<f64> {
        match (self, cache) {
            (DeepBlock::Glmbp(b), DeepCache::Glmbp(c)) => b.backward(c, dy),
            (DeepBlock::Lmbp(b), DeepCache::Lmbp(c)) => b.backward(c, dy),
            _ => unreachable!("cache built by the same block"),
        }
    }

    pub fn macs(&self, batch: usize, h: usize, w: usize) -> u64 {
        match self {
            DeepBlock::Glmbp(b) => b.macs(batch, h, w),
            DeepBlock::Lmbp(b) => b.macs(batch, h, w),
        }
    }

    pub fn elementwise_ops(&self, batch: usize, h: usize, w: usize) -> u64 {
        match self {
            DeepBlock::Glmbp(b) => b.elementwise_ops(batch, h, w),
            DeepBlock::Lmbp(b) => b.elementwise_ops(batch, h, w),
        }
    }
}

impl Module for DeepBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        match self {
            DeepBlock::Glmbp(b) => b.visit_params(prefix, f),
            DeepBlock::Lmbp(b) => b.visit_params(prefix, f),
        }
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        match self {
            DeepBlock::Glmbp(b) => b.visit_params_mut(prefix, f),
            DeepBlock::Lmbp(b) => b.visit_params_mut(prefix, f),
        }
    }
}

/// Activations recorded by a forward pass, consumed by [`Model::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    train: bool,
    enc_conv: Vec<ConvStageCache>,
    enc_proj_in: Vec<Array4<f64>>,
    enc_deep: Vec<DeepCache>,
    pools: Vec<(Vec<usize>, (usize, usize, usize, usize))>,
    skips: Vec<Array4<f64>>,
    dec_deep: Vec<DeepCache>,
    dec_proj_in: Vec<Array4<f64>>,
    dec_conv: Vec<ConvStageCache>,
    head_in: Array4<f64>,
    /// Full-resolution logits.
    pub logits: Array4<f64>,
    /// Sigmoid of the logits.
    pub probs: Array4<f64>,
}

/// Per-module cost line for complexity reports.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModuleCost {
    pub name: String,
    pub params: usize,
    pub macs: u64,
    pub elementwise: u64,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub enc_conv: Vec<ConvStage>,
    pub enc_proj: Vec<Conv2d>,
    pub enc_deep: Vec<DeepBlock>,
    pub dec_deep: Vec<DeepBlock>,
    pub dec_proj: Vec<Conv2d>,
    pub dec_conv: Vec<ConvStage>,
    pub head: Conv2d,
    /// Empty for [`SkipScaleMode::None`], one entry when shared, five when stage-wise.
    pub skip_scales: Vec<Param>,
}

impl Model {
    /// Builds a model with parameters drawn from a ChaCha8 stream seeded by `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &cfg.channels;
        let mut enc_conv = Vec::with_capacity(3);
        let mut prev = cfg.in_channels;
        for &ch in &c[..3] {
            enc_conv.push(ConvStage::new(prev, ch, &mut rng)?);
            prev = ch;
        }
        let mut enc_proj = Vec::with_capacity(3);
        let mut enc_deep = Vec::with_capacity(3);
        for i in 0..3 {
            enc_proj.push(Conv2d::new(c[2 + i], c[3 + i], 1, 1, &mut rng)?);
            enc_deep.push(DeepBlock::new(cfg.stage_kinds[i], c[3 + i], cfg.encoder_kernels[i], &cfg.mamba, &mut rng)?);
        }
        let mut dec_deep = Vec::with_capacity(3);
        let mut dec_proj = Vec::with_capacity(3);
        for j in 0..3 {
            let ch = c[5 - j];
            dec_deep.push(DeepBlock::new(cfg.stage_kinds[2 - j], ch, cfg.decoder_kernels[j], &cfg.mamba, &mut rng)?);
            dec_proj.push(Conv2d::new(ch, c[4 - j], 1, 1, &mut rng)?);
        }
        let dec_conv = vec![ConvStage::new(c[2], c[1], &mut rng)?, ConvStage::new(c[1], c[0], &mut rng)?];
        let head = Conv2d::new(c[0], cfg.out_channels, 1, 1, &mut rng)?;
        let n_skip = match cfg.skip_scale_mode {
            SkipScaleMode::None => 0,
            SkipScaleMode::Shared => 1,
            SkipScaleMode::StageWise => 5,
        };
        Ok(Self {
            config: cfg.clone(),
            enc_conv,
            enc_proj,
            enc_deep,
            dec_deep,
            dec_proj,
            dec_conv,
            head,
            skip_scales: (0..n_skip).map(|_| Param::scalar(cfg.skip_scale_init)).collect(),
        })
    }

    /// Skip scalar applied to decoder connection `j` (0 = deepest).
    pub fn skip_scale(&self, j: usize) -> f64 {
        match self.skip_scales.len() {
            0 => 1.0,
            1 => self.skip_scales[0].get(),
            _ => self.skip_scales[j].get(),
        }
    }

    fn skip_index(&self, j: usize) -> Option<usize> {
        match self.skip_scales.len() {
            0 => None,
            1 => Some(0),
            _ => Some(j),
        }
    }

    pub fn check_input(&self, x: &Array4<f64>) -> Result<()> {
        let (b, c, h, w) = x.dim();
        if b == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        if c != self.config.in_channels {
            return Err(Error::Contract(format!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if h == 0 || w == 0 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return Err(Error::Input(format!(
                "input spatial size {h}x{w} is not divisible by {DOWNSAMPLE}"
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model input contains non-finite values".into()));
        }
        Ok(())
    }

    /// Evaluation-mode forward pass (batch norm uses running statistics); returns probabilities.
    pub fn forward(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        Ok(self.run(x, false)?.probs)
    }

    /// Training-mode forward pass (batch norm uses batch statistics).
    pub fn forward_train(&self, x: &Array4<f64>) -> Result<ForwardCache> {
        self.run(x, true)
    }

    /// Evaluation-mode forward pass keeping logits alongside probabilities.
    pub fn forward_eval_cached(&self, x: &Array4<f64>) -> Result<ForwardCache> {
        self.run(x, false)
    }

    fn run(&self, x: &Array4<f64>, train: bool) -> Result<ForwardCache> {
        self.check_input(x)?;
        let mut enc_conv = Vec::with_capacity(3);
        let mut enc_proj_in = Vec::with_capacity(3);
        let mut enc_deep = Vec::with_capacity(3);
        let mut pools = Vec::with_capacity(5);
        let mut skips = Vec::with_capacity(5);
        let mut cur = x.clone();
        for i in 0..6 {
            let a = if i < 3 {
                let (a, c) = self.enc_conv[i].run(&cur, train)?;
                enc_conv.push(c);
                a
            } else {
                let p = self.enc_proj[i - 3].forward(&cur)?;
                enc_proj_in.push(cur);
                let (a, c) = self.enc_deep[i - 3].run(&p)?;
                enc_deep.push(c);
                a
            };
            if i < 5 {
                let dim = a.dim();
                let (t, arg) = max_pool2(&a)?;
                pools.push((arg, dim));
                skips.push(t.clone());
                cur = t;
            } else {
                cur = a;
            }
        }
        let mut dec_deep = Vec::with_capacity(3);
        let mut dec_proj_in = Vec::with_capacity(3);
        let mut dec_conv = Vec::with_capacity(2);
        for j in 0..5 {
            let mut r = if j < 3 {
                let (b, c) = self.dec_deep[j].run(&cur)?;
                dec_deep.push(c);
                let r = self.dec_proj[j].forward(&b)?;
                dec_proj_in.push(b);
                r
            } else {
                let (r, c) = self.dec_conv[j - 3].run(&cur, train)?;
                dec_conv.push(c);
                r
            };
            if j > 0 {
                r = upsample2(&r);
            }
            cur = scaled_skip_add(&r, &skips[4 - j], self.skip_scale(j))?;
        }
        let logits = upsample2(&self.head.forward(&cur)?);
        let probs = logits.mapv(sigmoid);
        Ok(ForwardCache {
            train,
            enc_conv,
            enc_proj_in,
            enc_deep,
            pools,
            skips,
            dec_deep,
            dec_proj_in,
            dec_conv,
            head_in: cur,
            logits,
            probs,
        })
    }

    /// Accumulates parameter gradients given `dL/dlogits`; returns `dL/dinput`.
    pub fn backward(&mut self, cache: &ForwardCache, dlogits: &Array4<f64>) -> Array4<f64> {
        assert!(cache.train, "backward requires a training-mode forward");
        let dhead = upsample2_backward(dlogits);
        let mut dcur = self.head.backward(&cache.head_in, &dhead);
        let mut dskips: Vec<Option<Array4<f64>>> = vec![None; 5];
        for j in (0..5).rev() {
            let skip = &cache.skips[4 - j];
            if let Some(s) = self.skip_index(j) {
                self.skip_scales[s].grad_mut()[0] += (&dcur * skip).sum();
            }
            let k = self.skip_scale(j);
            dskips[4 - j] = Some(dcur.mapv(|v| k * v));
            let dr = if j > 0 { upsample2_backward(&dcur) } else { dcur };
            dcur = if j < 3 {
                let db = self.dec_proj[j].backward(&cache.dec_proj_in[j], &dr);
                self.dec_deep[j].backward(&cache.dec_deep[j], &db)
            } else {
                self.dec_conv[j - 3].backward(&cache.dec_conv[j - 3], &dr)
            };
        }
        for i in (0..6).rev() {
            let da = if i < 5 {
                let dt = dcur + dskips[i].as_ref().expect("filled by decoder");
                let (arg, dim) = &cache.pools[i];
                max_pool2_backward(&dt, arg, *dim)
            } else {
                dcur
            };
            dcur = if i < 3 {
                self.enc_conv[i].backward(&cache.enc_conv[i], &da)
            } else {
                let dp = self.enc_deep[i - 3].backward(&cache.enc_deep[i - 3], &da);
                self.enc_proj[i - 3].backward(&cache.enc_proj_in[i - 3], &dp)
            };
        }
        dcur
    }

    /// Backward from `dL/dprobs` through the sigmoid.
    pub fn backward_from_probs(&mut self, cache: &ForwardCache, dprobs: &Array4<f64>) -> Array4<f64> {
        let mut dl = dprobs.clone();
        dl.zip_mut_with(&cache.probs, |d, &p| *d *= p * (1.0 - p));
        self.backward(cache, &dl)
    }

    /// Folds the batch statistics of a training-mode pass into the running averages.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        for (stage, c) in self.enc_conv.iter_mut().zip(&cache.enc_conv) {
            if let Some(bn) = &c.bn {
                stage.bn.update_running_stats(bn);
            }
        }
        for (stage, c) in self.dec_conv.iter_mut().zip(&cache.dec_conv) {
            if let Some(bn) = &c.bn {
                stage.bn.update_running_stats(bn);
            }
        }
    }

    /// Parameter and operation counts per top-level module for a `(batch, in, h, w)` input.
    pub fn cost_breakdown(&self, batch: usize, h: usize, w: usize) -> Vec<ModuleCost> {
        let mut out = Vec::new();
        let bhw = |s: usize| (batch * (h >> s) * (w >> s)) as u64;
        let mut push = |name: String, params: usize, macs: u64, elementwise: u64| {
            out.push(ModuleCost {
                name,
                params,
                macs,
                elementwise,
            })
        };
        let c = &self.config.channels;
        for (i, st) in self.enc_conv.iter().enumerate() {
            let n = bhw(i) * c[i] as u64;
            // BN normalize+affine, ReLU, pooling compares (3 per output)
            let ew = 2 * n + n + 3 * n / 4;
            push(format!("enc{}", i + 1), st.num_params(), st.conv.macs(batch, h >> i, w >> i), ew);
        }
        for i in 0..3 {
            let s = 3 + i;
            let (hh, ww) = (h >> s, w >> s);
            let blk = &self.enc_deep[i];
            let pool = if i < 2 { 3 * bhw(s) * c[s] as u64 / 4 } else { 0 };
            push(
                format!("enc{}", s + 1),
                self.enc_proj[i].num_params() + blk.num_params(),
                self.enc_proj[i].macs(batch, hh, ww) + blk.macs(batch, hh, ww),
                blk.elementwise_ops(batch, hh, ww) + pool,
            );
        }
        // decoder j runs at H/32 for j <= 1, then doubles
        let dec_scale = [5usize, 5, 4, 3, 2];
        for j in 0..5 {
            let s = dec_scale[j];
            let (hh, ww) = (h >> s, w >> s);
            let out_ch = c[4 - j] as u64;
            let out_scale = if j == 0 { s } else { s - 1 };
            // upsample (4 MAC-like ops per output) plus skip multiply-add
            let up = if j > 0 { 4 * bhw(out_scale) * out_ch } else { 0 };
            let skip = 2 * bhw(out_scale) * out_ch;
            if j < 3 {
                let blk = &self.dec_deep[j];
                push(
                    format!("dec{}", j + 1),
                    blk.num_params() + self.dec_proj[j].num_params(),
                    blk.macs(batch, hh, ww) + self.dec_proj[j].macs(batch, hh, ww),
                    blk.elementwise_ops(batch, hh, ww) + up + skip,
                );
            } else {
                let st = &self.dec_conv[j - 3];
                let n = bhw(s) * out_ch;
                push(
                    format!("dec{}", j + 1),
                    st.num_params(),
                    st.conv.macs(batch, hh, ww),
                    3 * n + up + skip,
                );
            }
        }
        let n_out = self.config.out_channels as u64;
        push(
            "head".into(),
            self.head.num_params(),
            self.head.macs(batch, h >> 1, w >> 1),
            4 * bhw(0) * n_out + 4 * bhw(0) * n_out,
        );
        push("skip_scales".into(), self.skip_scales.len(), 0, 0);
        out
    }
}

impl Module for Model {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, st) in self.enc_conv.iter().enumerate() {
            st.visit_params(&join(prefix, &format!("enc{}", i + 1)), f);
        }
        for i in 0..3 {
            let p = join(prefix, &format!("enc{}", i + 4));
            self.enc_proj[i].visit_params(&join(&p, "proj"), f);
            self.enc_deep[i].visit_params(&join(&p, "block"), f);
        }
        for j in 0..3 {
            let p = join(prefix, &format!("dec{}", j + 1));
            self.dec_deep[j].visit_params(&join(&p, "block"), f);
            self.dec_proj[j].visit_params(&join(&p, "proj"), f);
        }
        for (j, st) in self.dec_conv.iter().enumerate() {
            st.visit_params(&join(prefix, &format!("dec{}", j + 4)), f);
        }
        self.head.visit_params(&join(prefix, "head"), f);
        visit_skips(&self.skip_scales, prefix, &mut |n, p| f(n, p));
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, st) in self.enc_conv.iter_mut().enumerate() {
            st.visit_params_mut(&join(prefix, &format!("enc{}", i + 1)), f);
        }
        for i in 0..3 {
            let p = join(prefix, &format!("enc{}", i + 4));
            self.enc_proj[i].visit_params_mut(&join(&p, "proj"), f);
            self.enc_deep[i].visit_params_mut(&join(&p, "block"), f);
        }
        for j in 0..3 {
            let p = join(prefix, &format!("dec{}", j + 1));
            self.dec_deep[j].visit_params_mut(&join(&p, "block"), f);
            self.dec_proj[j].visit_params_mut(&join(&p, "proj"), f);
        }
        for (j, st) in self.dec_conv.iter_mut().enumerate() {
            st.visit_params_mut(&join(prefix, &format!("dec{}", j + 4)), f);
        }
        self.head.visit_params_mut(&join(prefix, "head"), f);
        let shared = self.skip_scales.len() == 1;
        for (j, p) in self.skip_scales.iter_mut().enumerate() {
            f(&skip_name(prefix, j, shared), p);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        for (i, st) in self.enc_conv.iter().enumerate() {
            st.visit_buffers(&join(prefix, &format!("enc{}", i + 1)), f);
        }
        for (j, st) in self.dec_conv.iter().enumerate() {
            st.visit_buffers(&join(prefix, &format!("dec{}", j + 4)), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        for (i, st) in self.enc_conv.iter_mut().enumerate() {
            st.visit_buffers_mut(&join(prefix, &format!("enc{}", i + 1)), f);
        }
        for (j, st) in self.dec_conv.iter_mut().enumerate() {
            st.visit_buffers_mut(&join(prefix, &format!("dec{}", j + 4)), f);
        }
    }
}

fn skip_name(prefix: &str, j: usize, shared: bool) -> String {
    if shared {
        join(prefix, "skip_scale")
    } else {
        join(prefix, &format!("skip_scale.{j}"))
    }
}

fn visit_skips(skips: &[Param], prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
    let shared = skips.len() == 1;
    for (j, p) in skips.iter().enumerate() {
        f(&skip_name(prefix, j, shared), p);
    }
}

/// Builds a model from a configuration with the given initialization seed.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    Model::new(cfg, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::Rng;

    fn input(seed: u64, d: (usize, usize, usize, usize)) -> Array4<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(d, || r.random_range(-1.0..1.0))
    }

    fn count(cfg: &ModelConfig) -> usize {
        Model::new(cfg, 0).unwrap().num_params()
    }

    #[test]
    fn budgets() {
        let full = Model::new(&ModelConfig::full(), 0).unwrap();
        let t = Model::new(&ModelConfig::tiny(), 0).unwrap();
        let total = |m: &Model| {
            m.cost_breakdown(1, 256, 256)
                .iter()
                .fold((0, 0), |(a, b), c| (a + c.macs, b + c.elementwise))
        };
        assert_eq!(full.num_params(), 31_116);
        assert_eq!(t.num_params(), 9_588);
        assert_eq!(total(&full), (60_945_152, 6_283_008));
        assert_eq!(total(&t), (19_334_272, 3_403_648));
        use StageKind::*;
        assert_eq!(count(&ModelConfig::full().with_stage_kinds([Glmbp; 3])), 31_838);
        assert_eq!(count(&ModelConfig::full().with_stage_kinds([Lmbp; 3])), 31_392);
        assert_eq!(count(&ModelConfig::full().with_stage_kinds([Lmbp, Lmbp, Glmbp])), 30_658);
    }

    #[test]
    fn shapes_range_and_determinism() {
        let m = Model::new(&ModelConfig::full(), 3).unwrap();
        let x = input(1, (1, 3, 64, 64));
        let y = m.forward(&x).unwrap();
        assert_eq!(y.dim(), (1, 1, 64, 64));
        assert!(y.iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(y, m.forward(&x).unwrap());
        let y = m.forward(&input(2, (2, 3, 256, 256))).unwrap();
        assert_eq!(y.dim(), (2, 1, 256, 256));
    }
}
