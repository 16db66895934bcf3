//! Seedable two-view augmentation: mean padding, random crop, horizontal
//! flip, color jitter, random grayscale, Gaussian blur, applied in that
//! order. Every call is a pure function of (image, config, seed); no global
//! RNG state is consulted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{ImageError, ImageTensor};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("invalid augmentation config: {0}")]
    BadConfig(String),
    #[error("crop size {crop} exceeds padded image side {side}")]
    CropTooLarge { crop: usize, side: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterStrengths {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Fraction of the (shorter) image side used for mean padding.
    pub pad_fraction: f64,
    /// Output spatial size in pixels.
    pub crop_size: usize,
    pub hflip_prob: f64,
    pub jitter_strengths: JitterStrengths,
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
    /// Blur kernel size as a fraction of the image side, rounded to odd.
    pub blur_kernel_fraction: f64,
    /// Sigma drawn uniformly from this range; blur is applied unconditionally.
    pub blur_sigma_range: (f64, f64),
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            pad_fraction: 0.125,
            crop_size: 32,
            hflip_prob: 0.5,
            jitter_strengths: JitterStrengths {
                brightness: 0.4,
                contrast: 0.4,
                saturation: 0.4,
                hue: 0.1,
            },
            jitter_prob: 0.8,
            grayscale_prob: 0.2,
            blur_kernel_fraction: 0.1,
            blur_sigma_range: (0.1, 2.0),
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !prob_ok(self.hflip_prob) || !prob_ok(self.jitter_prob) || !prob_ok(self.grayscale_prob) {
            return Err(AugmentError::BadConfig("probabilities must lie in [0, 1]".into()));
        }
        if self.crop_size == 0 {
            return Err(AugmentError::BadConfig("crop_size must be > 0".into()));
        }
        let (lo, hi) = self.blur_sigma_range;
        if !(lo > 0.0) || !(hi > 0.0) || lo > hi {
            return Err(AugmentError::BadConfig(format!(
                "blur_sigma_range must satisfy 0 < min <= max, got ({lo}, {hi})"
            )));
        }
        if self.pad_fraction < 0.0 {
            return Err(AugmentError::BadConfig("pad_fraction must be >= 0".into()));
        }
        let j = self.jitter_strengths;
        if j.brightness < 0.0 || j.contrast < 0.0 || j.saturation < 0.0 || j.hue < 0.0 {
            return Err(AugmentError::BadConfig("jitter strengths must be >= 0".into()));
        }
        Ok(())
    }
}

/// Two augmented views of the same source image.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view_a: ImageTensor,
    pub view_b: ImageTensor,
    pub source_index: usize,
}

/// Pipeline stages, in the order they are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    MeanPad,
    RandomCrop,
    HorizontalFlip,
    ColorJitter,
    Grayscale,
    GaussianBlur,
}

/// Derives the per-sample augmentation seed. Training varies the seed per
/// epoch; validation passes epoch 0 so its views are constant across epochs.
pub fn view_seed(run_seed: u64, epoch: u64, sample_index: u64) -> u64 {
    // splitmix64 over the three inputs, mixed sequentially.
    let mut state = run_seed;
    for input in [epoch, sample_index] {
        state = state.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(input);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        state = z ^ (z >> 31);
    }
    state
}

/// Pads each side by `pad` pixels, filling with the per-channel mean of the
/// input image.
pub fn mean_pad(image: &ImageTensor, pad: usize) -> ImageTensor {
    if pad == 0 {
        return image.clone();
    }
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let means = image.per_channel_mean();
    let mut out = ImageTensor::zeros(c, h + 2 * pad, w + 2 * pad);
    for ch in 0..c {
        for y in 0..h + 2 * pad {
            for x in 0..w + 2 * pad {
                let inside =
                    y >= pad && y < pad + h && x >= pad && x < pad + w;
                let v = if inside {
                    image.get(ch, y - pad, x - pad)
                } else {
                    means[ch]
                };
                out.set(ch, y, x, v);
            }
        }
    }
    out
}

fn crop(image: &ImageTensor, top: usize, left: usize, size: usize) -> ImageTensor {
    let c = image.channels();
    let mut out = ImageTensor::zeros(c, size, size);
    for ch in 0..c {
        for y in 0..size {
            for x in 0..size {
                out.set(ch, y, x, image.get(ch, top + y, left + x));
            }
        }
    }
    out
}

fn hflip(image: &ImageTensor) -> ImageTensor {
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let mut out = ImageTensor::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.set(ch, y, x, image.get(ch, y, w - 1 - x));
            }
        }
    }
    out
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn grayscale(image: &ImageTensor) -> ImageTensor {
    let (h, w) = (image.height(), image.width());
    let mut out = ImageTensor::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            let v = luma(image.get(0, y, x), image.get(1, y, x), image.get(2, y, x));
            for ch in 0..3 {
                out.set(ch, y, x, v);
            }
        }
    }
    out
}

fn map_pixels(image: &mut ImageTensor, f: impl Fn(f32, f32, f32) -> (f32, f32, f32)) {
    let (h, w) = (image.height(), image.width());
    for y in 0..h {
        for x in 0..w {
            let (r, g, b) = f(image.get(0, y, x), image.get(1, y, x), image.get(2, y, x));
            image.set(0, y, x, r.clamp(0.0, 1.0));
            image.set(1, y, x, g.clamp(0.0, 1.0));
            image.set(2, y, x, b.clamp(0.0, 1.0));
        }
    }
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
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
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

fn color_jitter(image: &mut ImageTensor, strengths: &JitterStrengths, rng: &mut ChaCha8Rng) {
    let factor = |rng: &mut ChaCha8Rng, s: f64| -> f32 {
        if s == 0.0 {
            1.0
        } else {
            rng.gen_range((1.0 - s).max(0.0)..=1.0 + s) as f32
        }
    };
    let brightness = factor(rng, strengths.brightness);
    let contrast = factor(rng, strengths.contrast);
    let saturation = factor(rng, strengths.saturation);
    let hue_shift = if strengths.hue == 0.0 {
        0.0
    } else {
        rng.gen_range(-strengths.hue..=strengths.hue) as f32
    };

    map_pixels(image, |r, g, b| (r * brightness, g * brightness, b * brightness));

    let mean_gray = {
        let gray = grayscale(image);
        gray.per_channel_mean()[0]
    };
    map_pixels(image, |r, g, b| {
        (
            mean_gray + contrast * (r - mean_gray),
            mean_gray + contrast * (g - mean_gray),
            mean_gray + contrast * (b - mean_gray),
        )
    });

    map_pixels(image, |r, g, b| {
        let gray = luma(r, g, b);
        (
            gray + saturation * (r - gray),
            gray + saturation * (g - gray),
            gray + saturation * (b - gray),
        )
    });

    if hue_shift != 0.0 {
        map_pixels(image, |r, g, b| {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            hsv_to_rgb(h + hue_shift, s, v)
        });
    }
}

/// Separable Gaussian blur with replicate border handling.
fn gaussian_blur(image: &ImageTensor, kernel_size: usize, sigma: f64) -> ImageTensor {
    if kernel_size <= 1 {
        return image.clone();
    }
    let radius = (kernel_size / 2) as isize;
    let mut kernel = Vec::with_capacity(kernel_size);
    let mut sum = 0.0f64;
    for i in -radius..=radius {
        let v = (-(i * i) as f64 / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for k in &mut kernel {
        *k /= sum;
    }

    let (c, h, w) = (image.channels(), image.height(), image.width());
    let mut horiz = ImageTensor::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (ki, k) in kernel.iter().enumerate() {
                    let sx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1);
                    acc += k * image.get(ch, y, sx as usize) as f64;
                }
                horiz.set(ch, y, x, acc as f32);
            }
        }
    }
    let mut out = ImageTensor::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (ki, k) in kernel.iter().enumerate() {
                    let sy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1);
                    acc += k * horiz.get(ch, sy as usize, x) as f64;
                }
                out.set(ch, y, x, acc as f32);
            }
        }
    }
    out
}

fn blur_kernel_size(cfg: &AugmentationConfig, side: usize) -> usize {
    let k = (cfg.blur_kernel_fraction * side as f64).round() as usize;
    let k = k.max(1);
    if k % 2 == 0 {
        k + 1
    } else {
        k
    }
}

fn augment_once(
    image: &ImageTensor,
    cfg: &AugmentationConfig,
    rng: &mut ChaCha8Rng,
    trace: Option<&mut Vec<Stage>>,
) -> Result<ImageTensor, AugmentError> {
    let mut stages = Vec::new();
    let side = image.height().min(image.width());
    let pad = (cfg.pad_fraction * side as f64).round() as usize;

    let padded = mean_pad(image, pad);
    stages.push(Stage::MeanPad);

    let (ph, pw) = (padded.height(), padded.width());
    if cfg.crop_size > ph || cfg.crop_size > pw {
        return Err(AugmentError::CropTooLarge {
            crop: cfg.crop_size,
            side: ph.min(pw),
        });
    }
    let top = rng.gen_range(0..=ph - cfg.crop_size);
    let left = rng.gen_range(0..=pw - cfg.crop_size);
    let mut out = crop(&padded, top, left, cfg.crop_size);
    stages.push(Stage::RandomCrop);

    if rng.gen_bool(cfg.hflip_prob) {
        out = hflip(&out);
    }
    stages.push(Stage::HorizontalFlip);

    if rng.gen_bool(cfg.jitter_prob) {
        color_jitter(&mut out, &cfg.jitter_strengths, rng);
    }
    stages.push(Stage::ColorJitter);

    if rng.gen_bool(cfg.grayscale_prob) {
        out = grayscale(&out);
    }
    stages.push(Stage::Grayscale);

    let (lo, hi) = cfg.blur_sigma_range;
    let sigma = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    out = gaussian_blur(&out, blur_kernel_size(cfg, side), sigma);
    stages.push(Stage::GaussianBlur);

    if let Some(t) = trace {
        *t = stages;
    }
    Ok(out)
}

/// Produces the two views of one source image. Identical (image, cfg, seed)
/// yields bit-identical output.
pub fn make_views(
    image: &ImageTensor,
    cfg: &AugmentationConfig,
    seed: u64,
    source_index: usize,
) -> Result<ViewPair, AugmentError> {
    make_views_traced(image, cfg, seed, source_index, None)
}

/// [`make_views`] with an optional trace hook that records the stage order of
/// the last view produced.
pub fn make_views_traced(
    image: &ImageTensor,
    cfg: &AugmentationConfig,
    seed: u64,
    source_index: usize,
    mut trace: Option<&mut Vec<Stage>>,
) -> Result<ViewPair, AugmentError> {
    cfg.validate()?;
    if image.channels() != 3 {
        return Err(ImageError::NotThreeChannel(image.channels()).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let view_a = augment_once(image, cfg, &mut rng, trace.as_deref_mut())?;
    let view_b = augment_once(image, cfg, &mut rng, trace.as_deref_mut())?;
    Ok(ViewPair {
        view_a,
        view_b,
        source_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        ImageTensor::new(3, h, w, data).unwrap()
    }

    fn identity_cfg(size: usize) -> AugmentationConfig {
        AugmentationConfig {
            pad_fraction: 0.0,
            crop_size: size,
            hflip_prob: 0.0,
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_kernel_fraction: 0.0,
            blur_sigma_range: (0.1, 0.1),
            ..AugmentationConfig::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let img = test_image(16, 16, 1);
        let cfg = AugmentationConfig {
            crop_size: 16,
            ..AugmentationConfig::default()
        };
        let a = make_views(&img, &cfg, 99, 0).unwrap();
        let b = make_views(&img, &cfg, 99, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_pipeline_returns_input() {
        let img = test_image(12, 12, 2);
        let cfg = identity_cfg(12);
        let pair = make_views(&img, &cfg, 7, 3).unwrap();
        assert_eq!(pair.view_a, img);
        assert_eq!(pair.view_b, img);
        assert_eq!(pair.source_index, 3);
    }

    #[test]
    fn different_seeds_differ_somewhere() {
        let img = test_image(16, 16, 3);
        let cfg = AugmentationConfig {
            crop_size: 16,
            ..AugmentationConfig::default()
        };
        let reference = make_views(&img, &cfg, 0, 0).unwrap();
        let mut differing = 0;
        for seed in 1..=100u64 {
            let pair = make_views(&img, &cfg, seed, 0).unwrap();
            if pair.view_a != reference.view_a || pair.view_b != reference.view_b {
                differing += 1;
            }
        }
        assert!(differing >= 99, "only {differing}/100 seeds produced distinct views");
    }

    #[test]
    fn views_have_crop_size_shape() {
        let img = test_image(32, 32, 4);
        let cfg = AugmentationConfig::default();
        let pair = make_views(&img, &cfg, 5, 0).unwrap();
        for v in [&pair.view_a, &pair.view_b] {
            assert_eq!((v.channels(), v.height(), v.width()), (3, 32, 32));
        }
    }

    #[test]
    fn stage_order_matches_declared_chain() {
        let img = test_image(16, 16, 5);
        let cfg = AugmentationConfig {
            crop_size: 16,
            ..AugmentationConfig::default()
        };
        let mut trace = Vec::new();
        make_views_traced(&img, &cfg, 11, 0, Some(&mut trace)).unwrap();
        assert_eq!(
            trace,
            vec![
                Stage::MeanPad,
                Stage::RandomCrop,
                Stage::HorizontalFlip,
                Stage::ColorJitter,
                Stage::Grayscale,
                Stage::GaussianBlur,
            ]
        );
    }

    #[test]
    fn forced_grayscale_equalizes_channels() {
        let img = test_image(16, 16, 6);
        let cfg = AugmentationConfig {
            crop_size: 16,
            grayscale_prob: 1.0,
            jitter_prob: 0.0,
            blur_kernel_fraction: 0.0,
            ..AugmentationConfig::default()
        };
        let pair = make_views(&img, &cfg, 13, 0).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let r = pair.view_a.get(0, y, x);
                assert_eq!(r, pair.view_a.get(1, y, x));
                assert_eq!(r, pair.view_a.get(2, y, x));
            }
        }
    }

    #[test]
    fn mean_pad_zero_is_identity() {
        let img = test_image(8, 8, 7);
        assert_eq!(mean_pad(&img, 0), img);
    }

    #[test]
    fn mean_pad_constant_image_stays_constant() {
        let img = ImageTensor::new(3, 4, 4, vec![0.25; 48]).unwrap();
        let padded = mean_pad(&img, 3);
        assert_eq!(padded.height(), 10);
        assert_eq!(padded.width(), 10);
        for &v in padded.data() {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn mean_pad_corner_equals_channel_mean() {
        let img = test_image(8, 8, 8);
        let means = img.per_channel_mean();
        let padded = mean_pad(&img, 4);
        for c in 0..3 {
            assert!((padded.get(c, 0, 0) - means[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn non_three_channel_rejected() {
        let img = ImageTensor::new(1, 8, 8, vec![0.5; 64]).unwrap();
        let cfg = identity_cfg(8);
        assert!(matches!(
            make_views(&img, &cfg, 0, 0),
            Err(AugmentError::Image(ImageError::NotThreeChannel(1)))
        ));
    }

    #[test]
    fn crop_larger_than_padded_image_rejected() {
        let img = test_image(8, 8, 9);
        let cfg = identity_cfg(16);
        assert!(matches!(
            make_views(&img, &cfg, 0, 0),
            Err(AugmentError::CropTooLarge { .. })
        ));
    }

    #[test]
    fn view_seed_is_stable_and_input_sensitive() {
        let s = view_seed(1, 2, 3);
        assert_eq!(s, view_seed(1, 2, 3));
        assert_ne!(s, view_seed(1, 2, 4));
        assert_ne!(s, view_seed(1, 3, 3));
        assert_ne!(s, view_seed(2, 2, 3));
    }
}
