//! Float RGB images in `[0, 1]`, stored row-major as H×W×3.

use std::path::Path;

use image::{ImageBuffer, Rgb};
use ndarray::{Array3, ArrayView3};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    /// Always in standard (row-major, contiguous) layout.
    data: Array3<f32>,
}

impl RgbImage {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        if data.dim().2 != 3 {
            return Err(Error::Shape(format!("expected H×W×3, got {:?}", data.dim())));
        }
        Ok(RgbImage {
            data: data.as_standard_layout().into_owned(),
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        RgbImage {
            data: Array3::from_shape_fn((height, width, 3), |(_, _, c)| rgb[c]),
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Array3::zeros((height, width, 3));
        for y in 0..height {
            for x in 0..width {
                let p = f(y, x);
                for c in 0..3 {
                    data[[y, x, c]] = p[c];
                }
            }
        }
        RgbImage { data }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn is_empty(&self) -> bool {
        self.height() == 0 || self.width() == 0
    }

    pub fn view(&self) -> ArrayView3<'_, f32> {
        self.data.view()
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut Array3<f32> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.data[[y, x, 0]], self.data[[y, x, 1]], self.data[[y, x, 2]]]
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        });
        RgbImage { data }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        ImageBuffer::from_fn(self.width() as u32, self.height() as u32, |x, y| {
            let p = self.pixel(y as usize, x as usize);
            Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    /// Save as 8-bit PNG (values are clamped and rounded).
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.to_rgb8().save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        data.invert_axis(ndarray::Axis(1));
        RgbImage {
            data: data.as_standard_layout().into_owned(),
        }
    }

    /// Bilinearly resample the window `[x0, x0 + w) × [y0, y0 + h)` (in
    /// continuous pixel coordinates) to `out_h × out_w`.
    ///
    /// Sample positions use half-pixel centers and edge clamping. A window
    /// equal to the full image at the same output size returns the input
    /// unchanged.
    pub fn resample_window(&self, x0: f64, y0: f64, w: f64, h: f64, out_h: usize, out_w: usize) -> Self {
        let (in_h, in_w) = (self.height(), self.width());
        if x0 == 0.0 && y0 == 0.0 && w == in_w as f64 && h == in_h as f64 && out_h == in_h && out_w == in_w {
            return self.clone();
        }
        let xs = axis_taps(x0, w, in_w, out_w);
        let ys = axis_taps(y0, h, in_h, out_h);
        let src = self.data.as_slice().expect("standard layout");
        let row = in_w * 3;
        let mut out = vec![0.0f32; out_h * out_w * 3];
        for (line, &(y_lo, y_hi, wy)) in out.chunks_exact_mut(out_w * 3).zip(&ys) {
            let (top_row, bot_row) = (&src[y_lo * row..(y_lo + 1) * row], &src[y_hi * row..(y_hi + 1) * row]);
            for (px, &(x_lo, x_hi, wx)) in line.chunks_exact_mut(3).zip(&xs) {
                for (c, out) in px.iter_mut().enumerate() {
                    let (a, b) = (x_lo * 3 + c, x_hi * 3 + c);
                    let top = top_row[a] as f64 * (1.0 - wx) + top_row[b] as f64 * wx;
                    let bot = bot_row[a] as f64 * (1.0 - wx) + bot_row[b] as f64 * wx;
                    *out = (top * (1.0 - wy) + bot * wy) as f32;
                }
            }
        }
        RgbImage {
            data: Array3::from_shape_vec((out_h, out_w, 3), out).expect("out_h·out_w·3 values"),
        }
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> Self {
        self.resample_window(0.0, 0.0, self.width() as f64, self.height() as f64, out_h, out_w)
    }
}

/// Per output index: (low source index, high source index, weight of high).
fn axis_taps(start: f64, extent: f64, in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = extent / out_len as f64;
    let max = (in_len - 1) as f64;
    (0..out_len)
        .map(|o| {
            let s = (start + (o as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let lo = s.floor();
            let frac = s - lo;
            let lo = lo as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, frac)
        })
        .collect()
}

/// Bilinear resize of a single-channel grid with the same sampling convention.
pub fn resize_grid(grid: &ndarray::Array2<f64>, out_h: usize, out_w: usize) -> ndarray::Array2<f64> {
    let (in_h, in_w) = grid.dim();
    let xs = axis_taps(0.0, in_w as f64, in_w, out_w);
    let ys = axis_taps(0.0, in_h as f64, in_h, out_h);
    ndarray::Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let (y0, y1, wy) = ys[oy];
        let (x0, x1, wx) = xs[ox];
        let top = grid[[y0, x0]] * (1.0 - wx) + grid[[y0, x1]] * wx;
        let bot = grid[[y1, x0]] * (1.0 - wx) + grid[[y1, x1]] * wx;
        top * (1.0 - wy) + bot * wy
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_resize_is_identity() {
        let img = RgbImage::from_fn(5, 7, |y, x| [y as f32 / 5.0, x as f32 / 7.0, 0.25]);
        assert_eq!(img.resize(5, 7), img);
    }

    #[test]
    fn constant_field_stays_constant() {
        let img = RgbImage::filled(448, 448, [0.2, 0.4, 0.6]);
        let out = img.resize(224, 224);
        assert!(out.data().indexed_iter().all(|((_, _, c), v)| (*v - [0.2, 0.4, 0.6][c]).abs() < 1e-7));
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = RgbImage::from_fn(3, 4, |y, x| [(y * 4 + x) as f32 / 12.0, 0.0, 1.0]);
        assert_eq!(img.flip_horizontal().pixel(0, 0), img.pixel(0, 3));
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }

    #[test]
    fn png_round_trip_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = RgbImage::from_fn(4, 4, |y, x| [(y * 4 + x) as f32 * 17.0 / 255.0, 0.0, 1.0]);
        img.save_png(&path).unwrap();
        let back = RgbImage::load(&path).unwrap();
        assert!(back.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn grid_upsample_preserves_constant() {
        let g = ndarray::Array2::from_elem((7, 7), 0.5);
        assert!(resize_grid(&g, 224, 224).iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }
}
