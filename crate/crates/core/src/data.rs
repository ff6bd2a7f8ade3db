//! Dataset IO, splitting, normalization and the synthetic lesion generator.
//!
//! On-disk layout: `<dir>/images/<id>.{png,jpg,jpeg}` with a matching mask
//! `<dir>/masks/<id>.png` (or `<id>_segmentation.png`). Images are kept in
//! `[0, 1]`; per-channel normalization is applied when batches are built.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{s, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// (3, H, W) in [0, 1].
    pub image: Array3<f64>,
    /// (1, H, W) with values in {0, 1}.
    pub mask: Array3<f64>,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        let (_, h, w) = self.image.dim();
        (h, w)
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.image.dim();
        if c != 3 {
            return Err(Error::Input(format!("sample {}: image has {c} channels", self.id)));
        }
        if self.mask.dim() != (1, h, w) {
            return Err(Error::Input(format!(
                "sample {}: mask shape {:?} does not match image {h}x{w}",
                self.id,
                self.mask.shape()
            )));
        }
        if self.image.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sample {}: image has non-finite values", self.id)));
        }
        if self.mask.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Input(format!("sample {}: mask is not binary", self.id)));
        }
        Ok(())
    }
}

const IMAGE_EXTS: &[&str] = &["png", "jpg", "jpeg"];

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn ext_of(p: &Path) -> String {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default()
}

fn stem_of(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

fn open_image(p: &Path) -> Result<image::DynamicImage> {
    image::open(p).map_err(|source| Error::Image {
        path: p.to_path_buf(),
        source,
    })
}

/// Loads every image/mask pair, resizing to `size x size` when given.
///
/// Images are resized bilinearly, masks with nearest neighbour and then
/// binarized at 127.
pub fn load_dataset(dir: &Path, size: Option<usize>) -> Result<Vec<Sample>> {
    let img_dir = dir.join("images");
    let mask_dir = dir.join("masks");
    if !img_dir.is_dir() {
        return Err(Error::Input(format!("no samples found: {} is missing", img_dir.display())));
    }
    if let Some(s) = size {
        if s == 0 || s % crate::network::DOWNSAMPLE != 0 {
            return Err(Error::Config(format!("image size {s} is not divisible by 32")));
        }
    }
    let images: BTreeMap<String, PathBuf> = list_dir(&img_dir)?
        .into_iter()
        .filter(|p| IMAGE_EXTS.contains(&ext_of(p).as_str()))
        .map(|p| (stem_of(&p), p))
        .collect();
    if images.is_empty() {
        return Err(Error::Input(format!("no samples found in {}", img_dir.display())));
    }
    let masks: BTreeMap<String, PathBuf> = if mask_dir.is_dir() {
        list_dir(&mask_dir)?
            .into_iter()
            .filter(|p| ext_of(p) == "png")
            .map(|p| (stem_of(&p), p))
            .collect()
    } else {
        BTreeMap::new()
    };
    let mut missing = Vec::new();
    let mut pairs = Vec::new();
    for (id, ip) in &images {
        let mp = masks.get(id).or_else(|| masks.get(&format!("{id}_segmentation")));
        match mp {
            Some(mp) => pairs.push((id.clone(), ip.clone(), mp.clone())),
            None => missing.push(id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Input(format!(
            "missing masks in {} for: {}",
            mask_dir.display(),
            missing.join(", ")
        )));
    }
    pairs
        .into_iter()
        .map(|(id, ip, mp)| {
            let mut img = open_image(&ip)?.to_rgb8();
            let mut mask = open_image(&mp)?.to_luma8();
            if let Some(s) = size {
                let s = s as u32;
                if img.dimensions() != (s, s) {
                    img = image::imageops::resize(&img, s, s, FilterType::Triangle);
                }
                if mask.dimensions() != (s, s) {
                    mask = image::imageops::resize(&mask, s, s, FilterType::Nearest);
                }
            }
            if img.dimensions() != mask.dimensions() {
                return Err(Error::Input(format!(
                    "sample {id}: image {:?} and mask {:?} sizes differ",
                    img.dimensions(),
                    mask.dimensions()
                )));
            }
            Ok(Sample {
                id,
                image: rgb_to_array(&img),
                mask: mask_to_array(&mask),
            })
        })
        .collect()
}

/// Loads images without masks, from `dir/images` when present and `dir` otherwise.
pub fn load_images(dir: &Path, size: Option<usize>) -> Result<Vec<(String, Array3<f64>)>> {
    let img_dir = if dir.join("images").is_dir() {
        dir.join("images")
    } else {
        dir.to_path_buf()
    };
    let paths: Vec<PathBuf> = list_dir(&img_dir)?
        .into_iter()
        .filter(|p| IMAGE_EXTS.contains(&ext_of(p).as_str()))
        .collect();
    if paths.is_empty() {
        return Err(Error::Input(format!("no images found in {}", img_dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let mut img = open_image(p)?.to_rgb8();
            if let Some(s) = size {
                let s = s as u32;
                if img.dimensions() != (s, s) {
                    img = image::imageops::resize(&img, s, s, FilterType::Triangle);
                }
            }
            Ok((stem_of(p), rgb_to_array(&img)))
        })
        .collect()
}

fn rgb_to_array(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    })
}

fn mask_to_array(mask: &GrayImage) -> Array3<f64> {
    let (w, h) = mask.dimensions();
    Array3::from_shape_fn((1, h as usize, w as usize), |(_, y, x)| {
        if mask.get_pixel(x as u32, y as u32)[0] > 127 {
            1.0
        } else {
            0.0
        }
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn save_png<P>(img: &ImageBuffer<P, Vec<u8>>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType<Subpixel = u8>,
{
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes samples in the `images/` + `masks/` layout (8-bit PNG, masks as 0/255).
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    let (img_dir, mask_dir) = (dir.join("images"), dir.join("masks"));
    ensure_dir(&img_dir)?;
    ensure_dir(&mask_dir)?;
    for s in samples {
        s.validate()?;
        let (h, w) = s.size();
        let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let p = |c| to_u8(s.image[[c, y as usize, x as usize]]);
            Rgb([p(0), p(1), p(2)])
        });
        save_png(&img, &img_dir.join(format!("{}.png", s.id)))?;
        save_mask(&s.mask.index_axis(Axis(0), 0).to_owned(), &mask_dir.join(format!("{}.png", s.id)))?;
    }
    Ok(())
}

fn save_mask(mask: &ndarray::Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] >= 0.5 { 255 } else { 0 }])
    });
    save_png(&img, path)
}

/// Writes a thresholded (0/255) prediction as `<dir>/<id>_pred.png`; returns the path.
pub fn write_prediction(dir: &Path, id: &str, probs: &ndarray::Array2<f64>) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let path = dir.join(format!("{id}_pred.png"));
    save_mask(probs, &path)?;
    Ok(path)
}

/// Seeded shuffle followed by a `ratio` / `1 - ratio` split.
pub fn split_dataset(samples: &[Sample], ratio: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ratio * samples.len() as f64).round() as usize;
    let train = idx[..n_train].iter().map(|&i| samples[i].clone()).collect();
    let test = idx[n_train..].iter().map(|&i| samples[i].clone()).collect();
    Ok((train, test))
}

/// Per-channel affine normalization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    /// Maps [0, 1] onto [-1, 1].
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

impl Normalization {
    /// Statistics over every pixel of `samples`; falls back to the default when
    /// there are no samples or a channel is constant.
    pub fn from_samples(samples: &[Sample]) -> Self {
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut n = 0usize;
        for s in samples {
            for c in 0..3 {
                let ch = s.image.index_axis(Axis(0), c);
                sum[c] += ch.sum();
                sq[c] += ch.iter().map(|v| v * v).sum::<f64>();
            }
            n += s.image.len() / 3;
        }
        if n == 0 {
            return Self::default();
        }
        let mut out = Self::default();
        for c in 0..3 {
            let m = sum[c] / n as f64;
            let v = (sq[c] / n as f64 - m * m).max(0.0);
            if v.sqrt() < 1e-6 {
                return Self::default();
            }
            out.mean[c] = m;
            out.std[c] = v.sqrt();
        }
        out
    }

    pub fn apply(&self, image: &Array3<f64>) -> Array3<f64> {
        let mut out = image.clone();
        for (c, mut ch) in out.axis_iter_mut(Axis(0)).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            ch.mapv_inplace(|v| (v - m) / s);
        }
        out
    }
}

/// Stacks the selected samples into normalized images (B, 3, H, W) and masks (B, 1, H, W).
pub fn make_batch(samples: &[&Sample], norm: &Normalization) -> Result<(Array4<f64>, Array4<f64>)> {
    let first = samples.first().ok_or_else(|| Error::Input("empty batch".into()))?;
    let (h, w) = first.size();
    let mut x = Array4::<f64>::zeros((samples.len(), 3, h, w));
    let mut y = Array4::<f64>::zeros((samples.len(), 1, h, w));
    for (i, s) in samples.iter().enumerate() {
        if s.size() != (h, w) {
            return Err(Error::Input(format!(
                "sample {} is {:?}, batch expects {h}x{w}",
                s.id,
                s.size()
            )));
        }
        x.slice_mut(s![i, .., .., ..]).assign(&norm.apply(&s.image));
        y.slice_mut(s![i, .., .., ..]).assign(&s.mask);
    }
    Ok((x, y))
}

/// Parameters of the synthetic lesion generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub lesions_min: usize,
    pub lesions_max: usize,
    /// Semi-axis range as a fraction of the image size.
    pub axis_min: f64,
    pub axis_max: f64,
    pub noise_sigma: f64,
    pub gradient_amplitude: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            count: 200,
            size: 64,
            seed: 0,
            lesions_min: 1,
            lesions_max: 3,
            axis_min: 0.08,
            axis_max: 0.25,
            noise_sigma: 0.05,
            gradient_amplitude: 0.15,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("synthetic count must be at least 1".into()));
        }
        if self.size == 0 || !self.size.is_multiple_of(crate::network::DOWNSAMPLE) {
            return Err(Error::Config(format!("synthetic size {} is not divisible by 32", self.size)));
        }
        if self.lesions_min == 0 || self.lesions_min > self.lesions_max {
            return Err(Error::Config(format!(
                "lesion count range [{}, {}] is invalid",
                self.lesions_min, self.lesions_max
            )));
        }
        if !(self.axis_min > 0.0 && self.axis_min <= self.axis_max && self.axis_max <= 0.5) {
            return Err(Error::Config(format!(
                "axis range [{}, {}] must satisfy 0 < min <= max <= 0.5",
                self.axis_min, self.axis_max
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        if !(self.gradient_amplitude >= 0.0 && self.gradient_amplitude.is_finite()) {
            return Err(Error::Config("gradient_amplitude must be non-negative".into()));
        }
        Ok(())
    }
}

/// A rotated ellipse in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lesion {
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
    pub angle: f64,
    /// Multiplicative darkening per channel.
    pub shade: [f64; 3],
}

impl Lesion {
    /// Membership of the pixel centre `(i + 0.5, j + 0.5)`.
    pub fn contains(&self, i: usize, j: usize) -> bool {
        let (dy, dx) = (i as f64 + 0.5 - self.cy, j as f64 + 0.5 - self.cx);
        let (sn, cs) = self.angle.sin_cos();
        let u = cs * dx + sn * dy;
        let v = -sn * dx + cs * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

/// Generates samples together with the lesions that define their masks.
pub fn generate_synthetic_with_lesions(spec: &SynthSpec) -> Result<Vec<(Sample, Vec<Lesion>)>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let n = spec.size;
    let sz = n as f64;
    let width = (spec.count.max(1) as f64).log10().floor() as usize + 1;
    let mut out = Vec::with_capacity(spec.count);
    for k in 0..spec.count {
        let base: [f64; 3] = [
            rng.random_range(0.65..0.85),
            rng.random_range(0.5..0.7),
            rng.random_range(0.45..0.65),
        ];
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let (gs, gc) = theta.sin_cos();
        let n_lesions = rng.random_range(spec.lesions_min..=spec.lesions_max);
        let lesions: Vec<Lesion> = (0..n_lesions)
            .map(|_| {
                let dark = rng.random_range(0.35..0.6);
                Lesion {
                    cy: rng.random_range(0.2..0.8) * sz,
                    cx: rng.random_range(0.2..0.8) * sz,
                    ry: rng.random_range(spec.axis_min..=spec.axis_max) * sz,
                    rx: rng.random_range(spec.axis_min..=spec.axis_max) * sz,
                    angle: rng.random_range(0.0..std::f64::consts::PI),
                    shade: [dark, dark * rng.random_range(0.8..1.0), dark * rng.random_range(0.8..1.1)],
                }
            })
            .collect();
        let mut image = Array3::<f64>::zeros((3, n, n));
        let mut mask = Array3::<f64>::zeros((1, n, n));
        for i in 0..n {
            for j in 0..n {
                let t = ((j as f64 / sz - 0.5) * gc + (i as f64 / sz - 0.5) * gs) * spec.gradient_amplitude;
                let hit = lesions.iter().find(|l| l.contains(i, j));
                if hit.is_some() {
                    mask[[0, i, j]] = 1.0;
                }
                for c in 0..3 {
                    let mut v = base[c] + t;
                    if let Some(l) = hit {
                        v *= l.shade[c];
                    }
                    if spec.noise_sigma > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    image[[c, i, j]] = v.clamp(0.0, 1.0);
                }
            }
        }
        out.push((
            Sample {
                id: format!("synth_{k:0width$}"),
                image,
                mask,
            },
            lesions,
        ));
    }
    Ok(out)
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<Sample>> {
    Ok(generate_synthetic_with_lesions(spec)?.into_iter().map(|(s, _)| s).collect())
}
