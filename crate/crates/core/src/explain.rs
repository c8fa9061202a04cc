//! Eigen-CAM saliency: project the final activations onto their first
//! principal direction. No label, logit or gradient is consumed.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::ActivationTensor;
use crate::error::{Error, Result};
use crate::imaging::{resize_grid, RgbImage};
use crate::ingest::ConditionLabel;
use crate::preprocess::{FaceCrop, MODEL_SIDE};

pub const COLORMAP_ID: &str = "blue-red-linear";
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyGrid {
    /// h × w, in [0, 1].
    pub values: Array2<f64>,
    /// "spatial" or "tokens".
    pub source_layout: String,
    pub source_frame_id: String,
    /// Set when the activations carry no usable principal direction; the
    /// grid is then uniformly 0.5.
    pub degenerate: bool,
    pub class_token_dropped: bool,
    pub centered: bool,
}

impl SaliencyGrid {
    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn with_frame_id(mut self, frame_id: impl Into<String>) -> Self {
        self.source_frame_id = frame_id.into();
        self
    }
}

/// Drop the class token and reshape the remaining tokens row-major into a
/// square h × w × C grid.
pub fn tokens_to_grid(tokens: &ArrayView2<f32>, patch_size: usize) -> Result<Array3<f32>> {
    let (rows, channels) = tokens.dim();
    let t = rows.saturating_sub(1);
    let side = (t as f64).sqrt().round() as usize;
    if t == 0 || side * side != t {
        return Err(Error::NonSquareTokenCount(t));
    }
    if patch_size == 0 || side * patch_size != MODEL_SIDE {
        return Err(Error::Shape(format!(
            "{t} patch tokens do not tile {MODEL_SIDE}×{MODEL_SIDE} with patch size {patch_size}"
        )));
    }
    let body = tokens.slice(ndarray::s![1.., ..]).to_owned();
    Ok(body.into_shape_with_order((side, side, channels)).expect("t = side²"))
}

/// Grid-shaped activations plus whether a class token was removed.
fn as_grid(activation: &ActivationTensor) -> Result<(Array3<f32>, bool)> {
    match activation {
        ActivationTensor::Spatial(a) => Ok((a.clone(), false)),
        ActivationTensor::Tokens { data, patch_size } => Ok((tokens_to_grid(&data.view(), *patch_size)?, true)),
    }
}

/// Eigen-CAM over raw (uncentered) activations.
pub fn eigencam(activation: &ActivationTensor) -> Result<SaliencyGrid> {
    eigencam_with(activation, false)
}

/// Eigen-CAM with optional per-channel mean removal before the
/// decomposition.
pub fn eigencam_with(activation: &ActivationTensor, centered: bool) -> Result<SaliencyGrid> {
    let (grid, class_token_dropped) = as_grid(activation)?;
    let (h, w, c) = grid.dim();
    let mut m = grid
        .into_shape_with_order((h * w, c))
        .expect("contiguous")
        .mapv(f64::from);
    if centered {
        let mean = m.mean_axis(Axis(0)).expect("nonempty");
        m -= &mean;
    }
    let (values, degenerate) = match principal_projection(&m.view()) {
        Some(s) => match min_max(&s) {
            Some(v) => (v, false),
            None => (vec![0.5; h * w], true),
        },
        None => (vec![0.5; h * w], true),
    };
    Ok(SaliencyGrid {
        values: Array2::from_shape_vec((h, w), values).expect("h·w values"),
        source_layout: activation.layout_name().to_string(),
        source_frame_id: String::new(),
        degenerate,
        class_token_dropped,
        centered,
    })
}

/// `M·v` for the top right singular vector `v` of `M`, oriented so the
/// largest-magnitude entry is positive. `None` when the top singular value
/// is numerically zero.
///
/// The eigenproblem is solved on whichever Gram matrix is smaller. When
/// S ≤ C, the top eigenvector `u` of `M·Mᵀ` satisfies `M·v = σ·u`, so `u`
/// itself is returned scaled by σ.
pub fn principal_projection(m: &ArrayView2<f64>) -> Option<Vec<f64>> {
    let (s, c) = m.dim();
    if s == 0 || c == 0 || m.iter().all(|&x| x == 0.0) || m.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let projection: Vec<f64> = if s <= c {
        let gram = m.dot(&m.t());
        let (lambda, u) = top_eigenpair(gram);
        if !(lambda > gram_floor(m)) {
            return None;
        }
        let sigma = lambda.sqrt();
        u.iter().map(|x| x * sigma).collect()
    } else {
        let gram = m.t().dot(m);
        let (lambda, v) = top_eigenpair(gram);
        if !(lambda > gram_floor(m)) {
            return None;
        }
        m.dot(&ndarray::Array1::from(v)).to_vec()
    };
    let pivot = projection
        .iter()
        .copied()
        .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
    if pivot < 0.0 {
        Some(projection.into_iter().map(|x| -x).collect())
    } else {
        Some(projection)
    }
}

/// Eigenvalues of a Gram matrix below this are treated as zero.
fn gram_floor(m: &ArrayView2<f64>) -> f64 {
    let frob2: f64 = m.iter().map(|x| x * x).sum();
    frob2 * 1e-24
}

fn min_max(s: &[f64]) -> Option<Vec<f64>> {
    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = lo.abs().max(hi.abs());
    if !(hi - lo > scale * 1e-12) {
        return None;
    }
    Some(s.iter().map(|&x| (x - lo) / (hi - lo)).collect())
}

/// Largest eigenvalue and a unit eigenvector of a symmetric matrix:
/// Householder reduction to tridiagonal form, then implicit QL.
fn top_eigenpair(a: Array2<f64>) -> (f64, Vec<f64>) {
    let n = a.nrows();
    let mut z: Vec<f64> = a.into_raw_vec_and_offset().0;
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut z, n, &mut d, &mut e);
    // Row i of `zt` is eigenvector i, so rotations touch contiguous rows.
    let mut zt = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            zt[i * n + k] = z[k * n + i];
        }
    }
    tridiagonal_ql(&mut d, &mut e, &mut zt, n);
    let best = (0..n).fold(0, |b, i| if d[i] > d[b] { i } else { b });
    (d[best], zt[best * n..(best + 1) * n].to_vec())
}

/// Householder reduction of the row-major symmetric `a` (n × n). On return
/// `a` holds the orthogonal transform, `d` the diagonal and `e[1..]` the
/// sub-diagonal.
fn tridiagonalize(a: &mut [f64], n: usize, d: &mut [f64], e: &mut [f64]) {
    let at = |i: usize, j: usize| i * n + j;
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        if l > 0 {
            let scale: f64 = (0..=l).map(|k| a[at(i, k)].abs()).sum();
            if scale == 0.0 {
                e[i] = a[at(i, l)];
            } else {
                for k in 0..=l {
                    a[at(i, k)] /= scale;
                    h += a[at(i, k)] * a[at(i, k)];
                }
                let f = a[at(i, l)];
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                a[at(i, l)] = f - g;
                let mut f = 0.0;
                for j in 0..=l {
                    a[at(j, i)] = a[at(i, j)] / h;
                    let mut g = 0.0;
                    for k in 0..=j {
                        g += a[at(j, k)] * a[at(i, k)];
                    }
                    for k in j + 1..=l {
                        g += a[at(k, j)] * a[at(i, k)];
                    }
                    e[j] = g / h;
                    f += e[j] * a[at(i, j)];
                }
                let hh = f / (h + h);
                for j in 0..=l {
                    let f = a[at(i, j)];
                    let g = e[j] - hh * f;
                    e[j] = g;
                    for k in 0..=j {
                        a[at(j, k)] -= f * e[k] + g * a[at(i, k)];
                    }
                }
            }
        } else {
            e[i] = a[at(i, l)];
        }
        d[i] = h;
    }
    if n > 0 {
        d[0] = 0.0;
        e[0] = 0.0;
    }
    for i in 0..n {
        if d[i] != 0.0 {
            for j in 0..i {
                let g: f64 = (0..i).map(|k| a[at(i, k)] * a[at(k, j)]).sum();
                for k in 0..i {
                    a[at(k, j)] -= g * a[at(k, i)];
                }
            }
        }
        d[i] = a[at(i, i)];
        a[at(i, i)] = 1.0;
        for j in 0..i {
            a[at(j, i)] = 0.0;
            a[at(i, j)] = 0.0;
        }
    }
}

/// Implicit QL with Wilkinson shifts on a symmetric tridiagonal matrix.
/// `zt` holds the transform from the reduction with eigenvectors as rows.
fn tridiagonal_ql(d: &mut [f64], e: &mut [f64], zt: &mut [f64], n: usize) {
    if n == 0 {
        return;
    }
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    for l in 0..n {
        let mut iterations = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() + dd == dd {
                    break;
                }
                m += 1;
            }
            if m == l || iterations == 60 {
                break;
            }
            iterations += 1;
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = (g * g + 1.0).sqrt();
            g = d[m] - d[l] + e[l] / (g + if g >= 0.0 { r.abs() } else { -r.abs() });
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut deflated = false;
            for i in (l..m).rev() {
                let f = s * e[i];
                let b = c * e[i];
                r = (f * f + g * g).sqrt();
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                let (lo, hi) = zt.split_at_mut((i + 1) * n);
                let zi = &mut lo[i * n..];
                let zi1 = &mut hi[..n];
                for k in 0..n {
                    let f = zi1[k];
                    zi1[k] = s * zi[k] + c * f;
                    zi[k] = c * zi[k] - s * f;
                }
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
}

/// Linear blue (0) to red (1) ramp.
pub fn colormap(value: f64) -> [f32; 3] {
    let t = value.clamp(0.0, 1.0) as f32;
    [t, 0.0, 1.0 - t]
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlayImage {
    pub pixels: RgbImage,
    pub colormap: &'static str,
    pub alpha: f64,
}

/// Upsample the saliency to the crop size, color it, and alpha-blend it
/// over the crop.
pub fn render_overlay(crop: &FaceCrop, saliency: &SaliencyGrid, alpha: f64) -> Result<OverlayImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    let (h, w) = (crop.pixels.height(), crop.pixels.width());
    let up = resize_grid(&saliency.values, h, w);
    let a = alpha as f32;
    let base = crop.pixels.data();
    let pixels = RgbImage::from_fn(h, w, |y, x| {
        let color = colormap(up[[y, x]]);
        let mut out = [0.0f32; 3];
        for c in 0..3 {
            out[c] = (1.0 - a) * base[[y, x, c]] + a * color[c];
        }
        out
    });
    Ok(OverlayImage {
        pixels,
        colormap: COLORMAP_ID,
        alpha,
    })
}

/// Arrange thumbnails in rows, all positive-label rows above all
/// negative-label rows. Each row holds at most `columns` images of one label.
pub fn contact_sheet(items: &[(ConditionLabel, &RgbImage)], columns: usize, thumb: usize) -> RgbImage {
    const GAP: usize = 4;
    let columns = columns.max(1);
    let mut rows: Vec<Vec<&RgbImage>> = Vec::new();
    for label in [ConditionLabel::PositiveAnticipation, ConditionLabel::Frustration] {
        let of_label: Vec<&RgbImage> = items.iter().filter(|(l, _)| *l == label).map(|(_, img)| *img).collect();
        rows.extend(of_label.chunks(columns).map(|c| c.to_vec()));
    }
    let n_rows = rows.len().max(1);
    let width = GAP + columns * (thumb + GAP);
    let height = GAP + n_rows * (thumb + GAP);
    let mut sheet = RgbImage::filled(height, width, [1.0, 1.0, 1.0]);
    let data = sheet.data_mut();
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            let small = img.resize(thumb, thumb);
            let (oy, ox) = (GAP + r * (thumb + GAP), GAP + c * (thumb + GAP));
            data.slice_mut(ndarray::s![oy..oy + thumb, ox..ox + thumb, ..]).assign(small.data());
        }
    }
    sheet
}

/// Sidecar written next to each overlay image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaliencySidecar {
    pub frame_id: String,
    pub label: Option<ConditionLabel>,
    pub predicted: Option<ConditionLabel>,
    pub source_layout: String,
    pub grid_height: usize,
    pub grid_width: usize,
    pub degenerate: bool,
    pub class_token_dropped: bool,
    pub centered: bool,
    pub colormap: String,
    pub alpha: f64,
    pub values: Vec<Vec<f64>>,
}

/// A file-name-safe form of a frame id.
pub fn file_stem(frame_id: &str) -> String {
    frame_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

/// Write `<stem>.png` and `<stem>.json` into `dir`; returns the PNG path.
pub fn save_saliency(
    dir: &Path,
    saliency: &SaliencyGrid,
    overlay: &OverlayImage,
    label: Option<ConditionLabel>,
    predicted: Option<ConditionLabel>,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = file_stem(&saliency.source_frame_id);
    let png = dir.join(format!("{stem}.png"));
    overlay.pixels.save_png(&png)?;
    let (gh, gw) = saliency.dim();
    let sidecar = SaliencySidecar {
        frame_id: saliency.source_frame_id.clone(),
        label,
        predicted,
        source_layout: saliency.source_layout.clone(),
        grid_height: gh,
        grid_width: gw,
        degenerate: saliency.degenerate,
        class_token_dropped: saliency.class_token_dropped,
        centered: saliency.centered,
        colormap: overlay.colormap.to_string(),
        alpha: overlay.alpha,
        values: saliency.values.rows().into_iter().map(|r| r.to_vec()).collect(),
    };
    let json_path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&sidecar).expect("serializable");
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(png)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::Rng;

    fn random_spatial(seed: u64, h: usize, w: usize, c: usize) -> ActivationTensor {
        let mut r = crate::rng::seeded(seed);
        ActivationTensor::Spatial(Array3::from_shape_fn((h, w, c), |_| r.random::<f32>()))
    }

    #[test]
    fn token_grids_for_both_patch_sizes() {
        let t16 = Array2::<f32>::zeros((197, 384));
        assert_eq!(tokens_to_grid(&t16.view(), 16).unwrap().dim(), (14, 14, 384));
        let t8 = Array2::<f32>::zeros((785, 384));
        assert_eq!(tokens_to_grid(&t8.view(), 8).unwrap().dim(), (28, 28, 384));
        let bad = Array2::<f32>::zeros((11, 8));
        assert_eq!(tokens_to_grid(&bad.view(), 16).unwrap_err().code(), "NON_SQUARE_TOKEN_COUNT");
    }

    #[test]
    fn token_grid_is_row_major_without_class_token() {
        let tokens = Array2::from_shape_fn((197, 2), |(i, j)| (i * 2 + j) as f32);
        let grid = tokens_to_grid(&tokens.view(), 16).unwrap();
        assert_eq!(grid[[0, 0, 0]], 2.0);
        assert_eq!(grid[[1, 0, 1]], ((1 + 14) * 2 + 1) as f32);
        assert_eq!(grid[[13, 13, 0]], (196 * 2) as f32);
    }

    #[test]
    fn rank_one_gives_normalized_u() {
        let u: Vec<f64> = (0..49).map(|i| ((i * 7) % 11) as f64 + 0.5).collect();
        let w = [0.3, -1.2, 2.0, 0.7];
        let a = Array3::from_shape_fn((7, 7, 4), |(y, x, c)| (u[y * 7 + x] * w[c]) as f32);
        let g = eigencam(&ActivationTensor::Spatial(a)).unwrap();
        let lo = u.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (i, v) in g.values.iter().enumerate() {
            assert!((v - (u[i] - lo) / (hi - lo)).abs() < 1e-6);
        }
        assert!(!g.degenerate);
    }

    #[test]
    fn constant_and_zero_activations_are_degenerate() {
        for value in [0.0f32, 3.0] {
            let g = eigencam(&ActivationTensor::Spatial(Array3::from_elem((7, 7, 16), value))).unwrap();
            assert!(g.degenerate);
            assert!(g.values.iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn nondegenerate_grids_span_unit_interval() {
        let g = eigencam(&random_spatial(3, 7, 7, 32)).unwrap();
        let lo = g.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = g.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn both_gram_orientations_agree() {
        // S = 49 > C = 8 uses MᵀM; transposing the problem uses M·Mᵀ.
        let mut r = crate::rng::seeded(11);
        let m = Array2::from_shape_fn((49, 8), |_| r.random::<f64>());
        let a = principal_projection(&m.view()).unwrap();
        let wide = Array2::from_shape_fn((8, 49), |(i, j)| m[[j, i]]);
        // Top right singular vector of mᵀ is the top left singular vector of m.
        let b = principal_projection(&wide.view()).unwrap();
        let u = Array1::from(a.clone()) / Array1::from(a).mapv(|x| x * x).sum().sqrt();
        let back = m.t().dot(&u);
        let cos = back.dot(&Array1::from(b.clone())) / (back.dot(&back).sqrt() * Array1::from(b).mapv(|x| x * x).sum().sqrt());
        assert!(cos > 1.0 - 1e-10, "{cos}");
    }

    #[test]
    fn centering_changes_the_map() {
        let act = random_spatial(5, 7, 7, 16);
        let raw = eigencam(&act).unwrap();
        let centered = eigencam_with(&act, true).unwrap();
        assert!(centered.centered && !raw.centered);
        assert_ne!(raw.values, centered.values);
    }

    #[test]
    fn overlay_alpha_extremes() {
        let crop = FaceCrop {
            pixels: RgbImage::from_fn(224, 224, |y, x| [y as f32 / 224.0, x as f32 / 224.0, 0.3]),
            source_frame_id: "f".into(),
            source_box: crate::preprocess::FaceBox { x: 0.0, y: 0.0, w: 224.0, h: 224.0, confidence: 1.0 },
        };
        let g = eigencam(&random_spatial(1, 7, 7, 8)).unwrap();
        assert_eq!(render_overlay(&crop, &g, 0.0).unwrap().pixels, crop.pixels);
        let uniform = SaliencyGrid { values: Array2::from_elem((7, 7), 0.5), degenerate: true, ..g };
        let full = render_overlay(&crop, &uniform, 1.0).unwrap();
        assert!(full.pixels.data().indexed_iter().all(|((_, _, c), &v)| v == colormap(0.5)[c]));
        assert!(render_overlay(&crop, &uniform, 1.5).is_err());
    }

    #[test]
    fn contact_sheet_puts_positive_rows_first() {
        let red = RgbImage::filled(8, 8, [1.0, 0.0, 0.0]);
        let blue = RgbImage::filled(8, 8, [0.0, 0.0, 1.0]);
        let items = vec![
            (ConditionLabel::Frustration, &blue),
            (ConditionLabel::PositiveAnticipation, &red),
            (ConditionLabel::Frustration, &blue),
        ];
        let sheet = contact_sheet(&items, 2, 8);
        assert_eq!((sheet.height(), sheet.width()), (4 + 2 * 12, 4 + 2 * 12));
        assert_eq!(sheet.pixel(4, 4), [1.0, 0.0, 0.0]);
        assert_eq!(sheet.pixel(4, 16), [1.0, 1.0, 1.0]);
        assert_eq!(sheet.pixel(16, 4), [0.0, 0.0, 1.0]);
        assert_eq!(sheet.pixel(16, 16), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let crop = FaceCrop {
            pixels: RgbImage::filled(224, 224, [0.5, 0.5, 0.5]),
            source_frame_id: "v1/f 3".into(),
            source_box: crate::preprocess::FaceBox { x: 0.0, y: 0.0, w: 224.0, h: 224.0, confidence: 1.0 },
        };
        let g = eigencam(&random_spatial(2, 7, 7, 8)).unwrap().with_frame_id("v1/f 3");
        let overlay = render_overlay(&crop, &g, DEFAULT_ALPHA).unwrap();
        let png = save_saliency(dir.path(), &g, &overlay, Some(ConditionLabel::Frustration), None).unwrap();
        assert_eq!(png.file_name().unwrap(), "v1_f_3.png");
        let side: SaliencySidecar = serde_json::from_str(&std::fs::read_to_string(dir.path().join("v1_f_3.json")).unwrap()).unwrap();
        assert_eq!(side.values.len(), 7);
        assert_eq!(side.values[3][4], g.values[[3, 4]]);
    }
}
