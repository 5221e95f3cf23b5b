//! Multi-crop augmentation pipeline: random resized crops, flips, color
//! jitter, grayscale, Gaussian blur, solarize and normalization.
//!
//! Images are `[C, H, W]` float planes in `[0, 1]` until [`normalize`].

use crate::corpus::PatchImage;
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Float image with channel planes.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub channels: usize,
    pub side: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn from_patch(patch: &PatchImage) -> Self {
        let s = patch.side;
        let mut data = vec![0f32; 3 * s * s];
        for i in 0..s * s {
            for c in 0..3 {
                data[c * s * s + i] = patch.pixels[i * 3 + c] as f32 / 255.0;
            }
        }
        FloatImage {
            channels: 3,
            side: s,
            data,
        }
    }

    #[inline]
    fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.side + y) * self.side + x]
    }

    /// Flattened `[C, S, S]` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[self.channels, self.side, self.side], self.data.clone()).unwrap()
    }
}

/// Jitter strengths and application probability.
#[derive(Debug, Clone, PartialEq)]
pub struct JitterConfig {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub global_size: usize,
    pub local_size: usize,
    pub n_local: usize,
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub grayscale_p: f64,
    pub jitter: JitterConfig,
    pub blur_sigmas: (f64, f64),
    /// Blur probability for global view 1 and view 2.
    pub global_blur_p: (f64, f64),
    pub local_blur_p: f64,
    /// Applied to global view 2 only.
    pub solarize_p: f64,
    pub solarize_threshold: f32,
    pub normalize_mean: [f32; 3],
    pub normalize_std: [f32; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            global_size: 224,
            local_size: 96,
            n_local: 8,
            global_scale: (0.4, 1.0),
            local_scale: (0.05, 0.4),
            hflip_p: 0.5,
            vflip_p: 0.0,
            grayscale_p: 0.2,
            jitter: JitterConfig {
                brightness: 0.8,
                contrast: 0.8,
                saturation: 0.4,
                hue: 0.2,
                p: 0.8,
            },
            blur_sigmas: (0.1, 2.0),
            global_blur_p: (1.0, 0.1),
            local_blur_p: 0.5,
            solarize_p: 0.2,
            solarize_threshold: 0.5,
            normalize_mean: [0.5, 0.5, 0.5],
            normalize_std: [0.5, 0.5, 0.5],
        }
    }
}

impl AugmentConfig {
    /// Desk-scale geometry for a 64px encoder; all other settings unchanged.
    pub fn desk() -> Self {
        AugmentConfig {
            global_size: 64,
            local_size: 32,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (lo, hi) in [self.global_scale, self.local_scale] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "bad crop scale range ({lo}, {hi})"
                )));
            }
        }
        for p in [
            self.hflip_p,
            self.vflip_p,
            self.grayscale_p,
            self.jitter.p,
            self.global_blur_p.0,
            self.global_blur_p.1,
            self.local_blur_p,
            self.solarize_p,
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidParameter(format!(
                    "probability {p} out of range"
                )));
            }
        }
        Ok(())
    }
}

/// Multi-crop output: two global views plus `n_local` local views.
#[derive(Debug, Clone)]
pub struct ViewSet {
    pub globals: Vec<FloatImage>,
    pub locals: Vec<FloatImage>,
    pub patch_id: String,
}

/// Samples an area fraction in `scale_range` and an aspect ratio in
/// (3/4, 4/3), then crops and bilinearly resizes to `out_size`. Falls back to
/// a center crop after 10 failed placements.
pub fn random_resized_crop(
    img: &FloatImage,
    out_size: usize,
    scale_range: (f64, f64),
    rng: &mut Stream,
) -> FloatImage {
    let s = img.side as f64;
    let area = s * s;
    for _ in 0..10 {
        let target = area * rng.uniform(scale_range.0, scale_range.1);
        let log_ratio = rng.uniform((3f64 / 4.0).ln(), (4f64 / 3.0).ln());
        let ratio = log_ratio.exp();
        let w = (target * ratio).sqrt().round();
        let h = (target / ratio).sqrt().round();
        if w >= 1.0 && h >= 1.0 && w <= s && h <= s {
            let x0 = rng.below((s - w) as u64 + 1) as usize;
            let y0 = rng.below((s - h) as u64 + 1) as usize;
            return resize_region(img, x0, y0, w as usize, h as usize, out_size);
        }
    }
    // center crop at the midpoint scale
    let side = (area * 0.5 * (scale_range.0 + scale_range.1))
        .sqrt()
        .min(s)
        .max(1.0) as usize;
    let off = (img.side - side) / 2;
    resize_region(img, off, off, side, side, out_size)
}

/// Bilinear resize of a sub-rectangle to `out x out`.
fn resize_region(
    img: &FloatImage,
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    out: usize,
) -> FloatImage {
    let mut data = vec![0f32; img.channels * out * out];
    let sx = w as f64 / out as f64;
    let sy = h as f64 / out as f64;
    for oy in 0..out {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let iy0 = fy.floor() as usize;
        let iy1 = (iy0 + 1).min(h - 1);
        let wy = (fy - iy0 as f64) as f32;
        for ox in 0..out {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let ix0 = fx.floor() as usize;
            let ix1 = (ix0 + 1).min(w - 1);
            let wx = (fx - ix0 as f64) as f32;
            for c in 0..img.channels {
                let p00 = img.at(c, y0 + iy0, x0 + ix0);
                let p01 = img.at(c, y0 + iy0, x0 + ix1);
                let p10 = img.at(c, y0 + iy1, x0 + ix0);
                let p11 = img.at(c, y0 + iy1, x0 + ix1);
                let top = p00 + (p01 - p00) * wx;
                let bot = p10 + (p11 - p10) * wx;
                data[(c * out + oy) * out + ox] = top + (bot - top) * wy;
            }
        }
    }
    FloatImage {
        channels: img.channels,
        side: out,
        data,
    }
}

/// Plain full-image bilinear resize.
pub fn resize(img: &FloatImage, out: usize) -> FloatImage {
    resize_region(img, 0, 0, img.side, img.side, out)
}

struct ViewKind {
    blur_p: f64,
    solarize_p: f64,
}

/// Pixel-space transforms, in order: horizontal flip, vertical flip, color
/// jitter (brightness, contrast, saturation, hue), grayscale, Gaussian blur,
/// solarize. Outputs stay in `[0, 1]`.
fn pixel_transforms(img: &mut FloatImage, cfg: &AugmentConfig, view: &ViewKind, rng: &mut Stream) {
    if rng.chance(cfg.hflip_p) {
        flip_h(img);
    }
    if rng.chance(cfg.vflip_p) {
        flip_v(img);
    }
    if rng.chance(cfg.jitter.p) {
        let j = &cfg.jitter;
        let b = rng.uniform((1.0 - j.brightness).max(0.0), 1.0 + j.brightness) as f32;
        apply_brightness(img, b);
        let c = rng.uniform((1.0 - j.contrast).max(0.0), 1.0 + j.contrast) as f32;
        apply_contrast(img, c);
        let s = rng.uniform((1.0 - j.saturation).max(0.0), 1.0 + j.saturation) as f32;
        apply_saturation(img, s);
        let h = rng.uniform(-j.hue, j.hue) as f32;
        apply_hue(img, h);
    }
    if rng.chance(cfg.grayscale_p) {
        to_grayscale(img);
    }
    if rng.chance(view.blur_p) {
        let sigma = rng.uniform(cfg.blur_sigmas.0, cfg.blur_sigmas.1);
        gaussian_blur(img, sigma);
    }
    if rng.chance(view.solarize_p) {
        solarize(img, cfg.solarize_threshold);
    }
    clamp01(img);
}

/// Full multi-crop: 2 global views with asymmetric blur/solarize, plus
/// `n_local` local views. All views are normalized.
pub fn multi_crop(patch: &PatchImage, cfg: &AugmentConfig, rng: &mut Stream) -> Result<ViewSet> {
    cfg.validate()?;
    if patch.side < cfg.local_size {
        return Err(Error::InvalidParameter(format!(
            "patch side {} below local view size {}",
            patch.side, cfg.local_size
        )));
    }
    let src = FloatImage::from_patch(patch);
    let mut globals = Vec::with_capacity(2);
    for v in 0..2 {
        let mut img = random_resized_crop(&src, cfg.global_size, cfg.global_scale, rng);
        let kind = ViewKind {
            blur_p: if v == 0 {
                cfg.global_blur_p.0
            } else {
                cfg.global_blur_p.1
            },
            solarize_p: if v == 0 { 0.0 } else { cfg.solarize_p },
        };
        pixel_transforms(&mut img, cfg, &kind, rng);
        normalize(&mut img, cfg.normalize_mean, cfg.normalize_std)?;
        globals.push(img);
    }
    let mut locals = Vec::with_capacity(cfg.n_local);
    for _ in 0..cfg.n_local {
        let mut img = random_resized_crop(&src, cfg.local_size, cfg.local_scale, rng);
        let kind = ViewKind {
            blur_p: cfg.local_blur_p,
            solarize_p: 0.0,
        };
        pixel_transforms(&mut img, cfg, &kind, rng);
        normalize(&mut img, cfg.normalize_mean, cfg.normalize_std)?;
        locals.push(img);
    }
    Ok(ViewSet {
        globals,
        locals,
        patch_id: patch.patch_id.clone(),
    })
}

/// Deterministic eval-time view: resize to `size` and normalize.
pub fn eval_view(
    patch: &PatchImage,
    size: usize,
    mean: [f32; 3],
    std: [f32; 3],
) -> Result<FloatImage> {
    let mut img = resize(&FloatImage::from_patch(patch), size);
    normalize(&mut img, mean, std)?;
    Ok(img)
}

pub fn normalize(img: &mut FloatImage, mean: [f32; 3], std: [f32; 3]) -> Result<()> {
    if std.iter().any(|&s| s <= 0.0) {
        return Err(Error::InvalidParameter(format!("non-positive std {std:?}")));
    }
    let plane = img.side * img.side;
    for c in 0..img.channels {
        let (m, s) = (mean[c], std[c]);
        for v in &mut img.data[c * plane..(c + 1) * plane] {
            *v = (*v - m) / s;
        }
    }
    Ok(())
}

fn flip_h(img: &mut FloatImage) {
    let s = img.side;
    for c in 0..img.channels {
        for y in 0..s {
            let row = (c * s + y) * s;
            img.data[row..row + s].reverse();
        }
    }
}

fn flip_v(img: &mut FloatImage) {
    let s = img.side;
    for c in 0..img.channels {
        for y in 0..s / 2 {
            for x in 0..s {
                img.data
                    .swap((c * s + y) * s + x, (c * s + (s - 1 - y)) * s + x);
            }
        }
    }
}

fn apply_brightness(img: &mut FloatImage, f: f32) {
    for v in &mut img.data {
        *v *= f;
    }
}

/// Blend toward the mean luma of the whole image.
fn apply_contrast(img: &mut FloatImage, f: f32) {
    let plane = img.side * img.side;
    let mut mean = 0f32;
    for i in 0..plane {
        mean += luma_f(img.data[i], img.data[plane + i], img.data[2 * plane + i]);
    }
    mean /= plane as f32;
    for v in &mut img.data {
        *v = mean + (*v - mean) * f;
    }
}

/// Blend toward per-pixel luma.
fn apply_saturation(img: &mut FloatImage, f: f32) {
    let plane = img.side * img.side;
    for i in 0..plane {
        let l = luma_f(img.data[i], img.data[plane + i], img.data[2 * plane + i]);
        for c in 0..3 {
            let v = &mut img.data[c * plane + i];
            *v = l + (*v - l) * f;
        }
    }
}

/// Rotate hue by `shift` turns of the color circle in HSV space.
fn apply_hue(img: &mut FloatImage, shift: f32) {
    let plane = img.side * img.side;
    for i in 0..plane {
        let (r, g, b) = (
            img.data[i].clamp(0.0, 1.0),
            img.data[plane + i].clamp(0.0, 1.0),
            img.data[2 * plane + i].clamp(0.0, 1.0),
        );
        let (h, s, v) = rgb_to_hsv(r, g, b);
        let h = (h + shift).rem_euclid(1.0);
        let (r, g, b) = hsv_to_rgb(h, s, v);
        img.data[i] = r;
        img.data[plane + i] = g;
        img.data[2 * plane + i] = b;
    }
}

fn to_grayscale(img: &mut FloatImage) {
    let plane = img.side * img.side;
    for i in 0..plane {
        let l = luma_f(img.data[i], img.data[plane + i], img.data[2 * plane + i]);
        img.data[i] = l;
        img.data[plane + i] = l;
        img.data[2 * plane + i] = l;
    }
}

/// Separable Gaussian with truncated kernel radius `ceil(3 sigma)` and
/// clamped borders.
pub fn gaussian_blur(img: &mut FloatImage, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let w = (-(i * i) as f64 / (2.0 * sigma * sigma)).exp();
        kernel.push(w);
        sum += w;
    }
    for w in &mut kernel {
        *w /= sum;
    }
    let kernel: Vec<f32> = kernel.iter().map(|&w| w as f32).collect();
    let s = img.side as i64;
    let plane = (s * s) as usize;
    let mut tmp = vec![0f32; plane];
    for c in 0..img.channels {
        let ch = &mut img.data[c * plane..(c + 1) * plane];
        for y in 0..s {
            for x in 0..s {
                let mut acc = 0f32;
                for (ki, &w) in kernel.iter().enumerate() {
                    let xx = (x + ki as i64 - radius).clamp(0, s - 1);
                    acc += w * ch[(y * s + xx) as usize];
                }
                tmp[(y * s + x) as usize] = acc;
            }
        }
        for y in 0..s {
            for x in 0..s {
                let mut acc = 0f32;
                for (ki, &w) in kernel.iter().enumerate() {
                    let yy = (y + ki as i64 - radius).clamp(0, s - 1);
                    acc += w * tmp[(yy * s + x) as usize];
                }
                ch[(y * s + x) as usize] = acc;
            }
        }
    }
}

pub fn solarize(img: &mut FloatImage, threshold: f32) {
    for v in &mut img.data {
        if *v >= threshold {
            *v = 1.0 - *v;
        }
    }
}

fn clamp01(img: &mut FloatImage) {
    for v in &mut img.data {
        *v = v.clamp(0.0, 1.0);
    }
}

#[inline]
fn luma_f(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6.rem_euclid(2.0)) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}
