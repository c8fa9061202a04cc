use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FaceCrop, MODEL_SIDE};
use crate::error::{Error, Result};
use crate::imaging::RgbImage;

/// Training-time augmentation. Applied in order: random crop of a fraction of
/// the area (same aspect as the input), resize back to model resolution,
/// horizontal flip, color jitter (brightness, contrast, saturation, hue).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    pub jitter_brightness: f64,
    pub jitter_contrast: f64,
    pub jitter_saturation: f64,
    pub jitter_hue: f64,
    pub crop_area_min: f64,
    pub crop_area_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip_prob: 0.5,
            jitter_brightness: 0.2,
            jitter_contrast: 0.2,
            jitter_saturation: 0.2,
            jitter_hue: 0.05,
            crop_area_min: 0.80,
            crop_area_max: 1.00,
        }
    }
}

impl AugmentConfig {
    /// A configuration that leaves every crop untouched.
    pub fn identity() -> Self {
        AugmentConfig {
            hflip_prob: 0.0,
            jitter_brightness: 0.0,
            jitter_contrast: 0.0,
            jitter_saturation: 0.0,
            jitter_hue: 0.0,
            crop_area_min: 1.0,
            crop_area_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return bad(format!("hflip_prob {} outside [0, 1]", self.hflip_prob));
        }
        for (name, v) in [
            ("jitter_brightness", self.jitter_brightness),
            ("jitter_contrast", self.jitter_contrast),
            ("jitter_saturation", self.jitter_saturation),
            ("jitter_hue", self.jitter_hue),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be a non-negative magnitude, got {v}"));
            }
        }
        if self.jitter_hue > 0.5 {
            return bad(format!("jitter_hue {} exceeds 0.5", self.jitter_hue));
        }
        if !(self.crop_area_min > 0.0 && self.crop_area_min <= self.crop_area_max && self.crop_area_max <= 1.0) {
            return bad(format!(
                "crop area range [{}, {}] must satisfy 0 < min <= max <= 1",
                self.crop_area_min, self.crop_area_max
            ));
        }
        Ok(())
    }
}

/// What a single augmentation draw did.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentTrace {
    /// Crop window area over input area.
    pub area_fraction: f64,
    pub window: [f64; 4],
    pub flipped: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue_shift: f64,
}

pub fn augment(crop: &FaceCrop, cfg: &AugmentConfig, rng: &mut impl Rng) -> FaceCrop {
    augment_with_trace(crop, cfg, rng).0
}

/// Like [`augment`], also reporting the sampled parameters. The generator is
/// advanced by the same number of draws whatever the configuration.
pub fn augment_with_trace(crop: &FaceCrop, cfg: &AugmentConfig, rng: &mut impl Rng) -> (FaceCrop, AugmentTrace) {
    let (h, w) = (crop.pixels.height() as f64, crop.pixels.width() as f64);

    let u_area: f64 = rng.random();
    let u_x: f64 = rng.random();
    let u_y: f64 = rng.random();
    let u_flip: f64 = rng.random();
    let u_b: f64 = rng.random();
    let u_c: f64 = rng.random();
    let u_s: f64 = rng.random();
    let u_h: f64 = rng.random();

    let area = cfg.crop_area_min + (cfg.crop_area_max - cfg.crop_area_min) * u_area;
    let scale = area.sqrt();
    let (cw, ch) = (w * scale, h * scale);
    let (x0, y0) = ((w - cw) * u_x, (h - ch) * u_y);
    let mut pixels = crop.pixels.resample_window(x0, y0, cw, ch, MODEL_SIDE, MODEL_SIDE);

    let flipped = u_flip < cfg.hflip_prob;
    if flipped {
        pixels = pixels.flip_horizontal();
    }

    let factor = |mag: f64, u: f64| 1.0 + mag * (2.0 * u - 1.0);
    let brightness = factor(cfg.jitter_brightness, u_b).max(0.0);
    let contrast = factor(cfg.jitter_contrast, u_c).max(0.0);
    let saturation = factor(cfg.jitter_saturation, u_s).max(0.0);
    let hue_shift = cfg.jitter_hue * (2.0 * u_h - 1.0);
    if brightness != 1.0 {
        adjust_brightness(&mut pixels, brightness as f32);
    }
    if contrast != 1.0 {
        adjust_contrast(&mut pixels, contrast as f32);
    }
    if saturation != 1.0 {
        adjust_saturation(&mut pixels, saturation as f32);
    }
    if hue_shift != 0.0 {
        shift_hue(&mut pixels, hue_shift as f32);
    }

    let trace = AugmentTrace {
        area_fraction: (cw * ch) / (w * h),
        window: [x0, y0, cw, ch],
        flipped,
        brightness,
        contrast,
        saturation,
        hue_shift,
    };
    (
        FaceCrop {
            pixels,
            source_frame_id: crop.source_frame_id.clone(),
            source_box: crop.source_box,
        },
        trace,
    )
}

fn gray(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn pixels(img: &RgbImage) -> &[f32] {
    img.data().as_slice().expect("images are stored in standard layout")
}

fn pixels_mut(img: &mut RgbImage) -> &mut [f32] {
    img.data_mut().as_slice_mut().expect("images are stored in standard layout")
}

fn adjust_brightness(img: &mut RgbImage, factor: f32) {
    img.data_mut().mapv_inplace(|v| (v * factor).clamp(0.0, 1.0));
}

fn adjust_contrast(img: &mut RgbImage, factor: f32) {
    let n = (img.height() * img.width()) as f64;
    let mean = pixels(img).chunks_exact(3).map(|p| gray([p[0], p[1], p[2]]) as f64).sum::<f64>() / n;
    let mean = mean as f32;
    img.data_mut()
        .mapv_inplace(|v| (mean + (v - mean) * factor).clamp(0.0, 1.0));
}

fn adjust_saturation(img: &mut RgbImage, factor: f32) {
    for p in pixels_mut(img).chunks_exact_mut(3) {
        let g = gray([p[0], p[1], p[2]]);
        for v in p.iter_mut() {
            *v = (g + (*v - g) * factor).clamp(0.0, 1.0);
        }
    }
}

fn shift_hue(img: &mut RgbImage, shift: f32) {
    for p in pixels_mut(img).chunks_exact_mut(3) {
        let (h, s, v) = rgb_to_hsv(p[0], p[1], p[2]);
        let (r, g, b) = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
        p[0] = r.clamp(0.0, 1.0);
        p[1] = g.clamp(0.0, 1.0);
        p[2] = b.clamp(0.0, 1.0);
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::FaceBox;
    use crate::rng::seeded;

    fn sample_crop() -> FaceCrop {
        let pixels = RgbImage::from_fn(224, 224, |y, x| {
            [((x * 3 + y) % 224) as f32 / 223.0, (y % 17) as f32 / 16.0, ((x ^ y) % 32) as f32 / 31.0]
        });
        FaceCrop {
            source_box: FaceBox::full(&pixels),
            pixels,
            source_frame_id: "f".into(),
        }
    }

    #[test]
    fn identity_config_is_bit_exact() {
        let crop = sample_crop();
        let mut rng = seeded(3);
        for _ in 0..5 {
            assert_eq!(augment(&crop, &AugmentConfig::identity(), &mut rng), crop);
        }
    }

    #[test]
    fn forced_flip_is_a_mirror_and_an_involution() {
        let crop = sample_crop();
        let cfg = AugmentConfig {
            hflip_prob: 1.0,
            ..AugmentConfig::identity()
        };
        let once = augment(&crop, &cfg, &mut seeded(1));
        assert_eq!(once.pixels, crop.pixels.flip_horizontal());
        let twice = augment(&once, &cfg, &mut seeded(2));
        assert_eq!(twice, crop);
    }

    #[test]
    fn same_seed_same_output() {
        let crop = sample_crop();
        let cfg = AugmentConfig::default();
        let a = augment(&crop, &cfg, &mut seeded(42));
        let b = augment(&crop, &cfg, &mut seeded(42));
        assert_eq!(a, b);
        let c = augment(&crop, &cfg, &mut seeded(43));
        assert_ne!(a, c);
    }

    #[test]
    fn default_output_is_model_sized_and_in_range() {
        let crop = sample_crop();
        let mut rng = seeded(9);
        for _ in 0..20 {
            let (out, trace) = augment_with_trace(&crop, &AugmentConfig::default(), &mut rng);
            assert!(out.is_standard());
            assert!(out.pixels.in_unit_range());
            assert!((0.8..=1.0).contains(&trace.area_fraction));
        }
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2f32, 0.5, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.9, 0.8, 0.1)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-6 && (g - g2).abs() < 1e-6 && (b - b2).abs() < 1e-6);
        }
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig { crop_area_min: 0.9, crop_area_max: 0.8, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig { crop_area_min: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
