//! ViT-Small (384-d, 12 blocks, 6 heads, MLP ratio 4) with timm parameter
//! names. Runs through the final LayerNorm; the classifier head is not used.

use ndarray::{concatenate, s, Array2, Array3, Axis};

use super::ops::{gelu_inplace, layer_norm, linear, softmax_rows};
use super::params::{Init, ParamDef, ParamStore};

pub const EMBED_DIM: usize = 384;
pub const DEPTH: usize = 12;
pub const HEADS: usize = 6;
const MLP_DIM: usize = EMBED_DIM * 4;

fn xavier(fan_in: usize, fan_out: usize) -> Init {
    Init::Normal {
        std: (2.0 / (fan_in + fan_out) as f32).sqrt(),
    }
}

fn linear_defs(name: &str, out: usize, inp: usize, defs: &mut Vec<ParamDef>) {
    defs.push(ParamDef::new(format!("{name}.weight"), &[out, inp], xavier(inp, out)));
    defs.push(ParamDef::new(format!("{name}.bias"), &[out], Init::Const(0.0)));
}

fn norm_defs(name: &str, defs: &mut Vec<ParamDef>) {
    defs.push(ParamDef::new(format!("{name}.weight"), &[EMBED_DIM], Init::Const(1.0)));
    defs.push(ParamDef::new(format!("{name}.bias"), &[EMBED_DIM], Init::Const(0.0)));
}

pub fn num_patches(image_side: usize, patch: usize) -> usize {
    (image_side / patch) * (image_side / patch)
}

pub fn layout(patch: usize, image_side: usize) -> Vec<ParamDef> {
    let fan_in = 3 * patch * patch;
    let mut defs = vec![
        ParamDef::new(
            "patch_embed.proj.weight",
            &[EMBED_DIM, 3, patch, patch],
            Init::Normal { std: (1.0 / fan_in as f32).sqrt() },
        ),
        ParamDef::new("patch_embed.proj.bias", &[EMBED_DIM], Init::Const(0.0)),
        ParamDef::new("cls_token", &[1, 1, EMBED_DIM], Init::Normal { std: 0.02 }),
        ParamDef::new(
            "pos_embed",
            &[1, 1 + num_patches(image_side, patch), EMBED_DIM],
            Init::Normal { std: 0.02 },
        ),
    ];
    for i in 0..DEPTH {
        let b = format!("blocks.{i}");
        norm_defs(&format!("{b}.norm1"), &mut defs);
        linear_defs(&format!("{b}.attn.qkv"), 3 * EMBED_DIM, EMBED_DIM, &mut defs);
        linear_defs(&format!("{b}.attn.proj"), EMBED_DIM, EMBED_DIM, &mut defs);
        norm_defs(&format!("{b}.norm2"), &mut defs);
        linear_defs(&format!("{b}.mlp.fc1"), MLP_DIM, EMBED_DIM, &mut defs);
        linear_defs(&format!("{b}.mlp.fc2"), EMBED_DIM, MLP_DIM, &mut defs);
    }
    norm_defs("norm", &mut defs);
    defs
}

/// Non-overlapping `patch × patch` patches of a CHW image, one row per patch
/// in row-major grid order, each flattened as (channel, y, x).
fn patchify(input: &Array3<f32>, patch: usize) -> Array2<f32> {
    let (c, h, w) = input.dim();
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Array2::zeros((gh * gw, c * patch * patch));
    for gy in 0..gh {
        for gx in 0..gw {
            let mut row = out.row_mut(gy * gw + gx);
            let mut k = 0;
            for ch in 0..c {
                for py in 0..patch {
                    for px in 0..patch {
                        row[k] = input[[ch, gy * patch + py, gx * patch + px]];
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

fn lin(p: &ParamStore, name: &str, x: &Array2<f32>) -> Array2<f32> {
    linear(
        &x.view(),
        p.get(&format!("{name}.weight")).view2(),
        p.get(&format!("{name}.bias")).view1(),
    )
}

fn norm(p: &ParamStore, name: &str, x: &Array2<f32>) -> Array2<f32> {
    layer_norm(
        &x.view(),
        p.get(&format!("{name}.weight")).view1(),
        p.get(&format!("{name}.bias")).view1(),
    )
}

fn attention(p: &ParamStore, block: &str, x: &Array2<f32>) -> Array2<f32> {
    let qkv = lin(p, &format!("{block}.attn.qkv"), x);
    let head_dim = EMBED_DIM / HEADS;
    let scale = (head_dim as f32).powf(-0.5);
    let n = x.nrows();
    let mut merged = Array2::zeros((n, EMBED_DIM));
    for h in 0..HEADS {
        let cols = |offset: usize| s![.., offset + h * head_dim..offset + (h + 1) * head_dim];
        let q = qkv.slice(cols(0));
        let k = qkv.slice(cols(EMBED_DIM));
        let v = qkv.slice(cols(2 * EMBED_DIM));
        let mut scores = q.dot(&k.t());
        scores *= scale;
        softmax_rows(&mut scores);
        merged.slice_mut(s![.., h * head_dim..(h + 1) * head_dim]).assign(&scores.dot(&v));
    }
    lin(p, &format!("{block}.attn.proj"), &merged)
}

/// Normalized CHW input → final normalized tokens, (1 + patches) × 384 with
/// the class token first.
pub fn forward(p: &ParamStore, input: &Array3<f32>, patch: usize) -> Array2<f32> {
    let patches = patchify(input, patch);
    let proj = p.get("patch_embed.proj.weight");
    let proj = proj.view4().into_shape_with_order((EMBED_DIM, 3 * patch * patch)).expect("contiguous");
    let tokens = linear(&patches.view(), proj, p.get("patch_embed.proj.bias").view1());
    let cls = p.get("cls_token").view2();
    let mut x = concatenate(Axis(0), &[cls, tokens.view()]).expect("matching widths");
    x += &p.get("pos_embed").view2();

    for i in 0..DEPTH {
        let b = format!("blocks.{i}");
        let h = norm(p, &format!("{b}.norm1"), &x);
        x += &attention(p, &b, &h);
        let h = norm(p, &format!("{b}.norm2"), &x);
        let mut h = lin(p, &format!("{b}.mlp.fc1"), &h);
        gelu_inplace(&mut h);
        x += &lin(p, &format!("{b}.mlp.fc2"), &h);
    }
    norm(p, "norm", &x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_grid_order() {
        let img = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| (c * 100 + y * 10 + x) as f32);
        let p = patchify(&img, 2);
        assert_eq!(p.dim(), (4, 12));
        // Patch 1 is the top-right 2×2 block; its first entry is channel 0, (0, 2).
        assert_eq!(p[[1, 0]], 2.0);
        // Patch 2 starts at row 2, column 0; entry 4 is channel 1, (2, 0).
        assert_eq!(p[[2, 4]], 120.0);
    }

    #[test]
    fn layout_sizes() {
        assert_eq!(num_patches(224, 16), 196);
        assert_eq!(num_patches(224, 8), 784);
        let n: usize = layout(16, 224).iter().map(|d| d.shape.iter().product::<usize>()).sum();
        // ViT-S/16 backbone without the classifier head.
        assert_eq!(n, 21_665_664);
    }
}
