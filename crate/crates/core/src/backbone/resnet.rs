//! ResNet-50 (bottleneck v1.5, stride on the 3×3 conv), torchvision/timm
//! parameter names. Runs up to the last stage; the classifier head is not used.

use ndarray::Array3;

use super::ops::{batch_norm, conv2d, max_pool, relu_inplace};
use super::params::{Init, ParamDef, ParamStore};

/// (bottleneck width, blocks, first stride) per stage.
const STAGES: [(usize, usize, usize); 4] = [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)];
const EXPANSION: usize = 4;

pub const FEATURE_DIM: usize = 512 * EXPANSION;

/// Gain of the last norm in each residual branch for synthetic weights, which
/// keeps activation scale bounded through sixteen residual additions.
const SYNTHETIC_RESIDUAL_GAIN: f32 = 0.25;

fn conv_def(name: String, cout: usize, cin: usize, k: usize) -> ParamDef {
    let std = (2.0 / (cin * k * k) as f32).sqrt();
    ParamDef::new(format!("{name}.weight"), &[cout, cin, k, k], Init::Normal { std })
}

fn bn_defs(name: &str, c: usize, gain: f32, out: &mut Vec<ParamDef>) {
    out.push(ParamDef::new(format!("{name}.weight"), &[c], Init::Const(gain)));
    out.push(ParamDef::new(format!("{name}.bias"), &[c], Init::Const(0.0)));
    out.push(ParamDef::new(format!("{name}.running_mean"), &[c], Init::Const(0.0)));
    out.push(ParamDef::new(format!("{name}.running_var"), &[c], Init::Const(1.0)));
}

pub fn layout() -> Vec<ParamDef> {
    let mut defs = vec![conv_def("conv1".into(), 64, 3, 7)];
    bn_defs("bn1", 64, 1.0, &mut defs);
    let mut inplanes = 64;
    for (li, &(planes, blocks, _)) in STAGES.iter().enumerate() {
        for b in 0..blocks {
            let p = format!("layer{}.{b}", li + 1);
            defs.push(conv_def(format!("{p}.conv1"), planes, inplanes, 1));
            bn_defs(&format!("{p}.bn1"), planes, 1.0, &mut defs);
            defs.push(conv_def(format!("{p}.conv2"), planes, planes, 3));
            bn_defs(&format!("{p}.bn2"), planes, 1.0, &mut defs);
            defs.push(conv_def(format!("{p}.conv3"), planes * EXPANSION, planes, 1));
            bn_defs(&format!("{p}.bn3"), planes * EXPANSION, SYNTHETIC_RESIDUAL_GAIN, &mut defs);
            if b == 0 {
                defs.push(conv_def(format!("{p}.downsample.0"), planes * EXPANSION, inplanes, 1));
                bn_defs(&format!("{p}.downsample.1"), planes * EXPANSION, 1.0, &mut defs);
            }
            inplanes = planes * EXPANSION;
        }
    }
    defs
}

fn conv(p: &ParamStore, name: &str, x: &Array3<f32>, stride: usize, pad: usize) -> Array3<f32> {
    conv2d(x, p.get(&format!("{name}.weight")).view4(), None, stride, pad)
}

fn bn(p: &ParamStore, name: &str, x: &mut Array3<f32>, relu: bool) {
    let g = |s: &str| p.get(&format!("{name}.{s}")).view1();
    batch_norm(x, g("weight"), g("bias"), g("running_mean"), g("running_var"), relu);
}

/// Normalized CHW input → final stage map (2048 × H/32 × W/32).
pub fn forward(p: &ParamStore, input: &Array3<f32>) -> Array3<f32> {
    let mut x = conv(p, "conv1", input, 2, 3);
    bn(p, "bn1", &mut x, true);
    let mut x = max_pool(&x, 3, 2, 1);
    for (li, &(_, blocks, stride)) in STAGES.iter().enumerate() {
        for b in 0..blocks {
            let pre = format!("layer{}.{b}", li + 1);
            let s = if b == 0 { stride } else { 1 };
            let mut out = conv(p, &format!("{pre}.conv1"), &x, 1, 0);
            bn(p, &format!("{pre}.bn1"), &mut out, true);
            let mut out = conv(p, &format!("{pre}.conv2"), &out, s, 1);
            bn(p, &format!("{pre}.bn2"), &mut out, true);
            let mut out = conv(p, &format!("{pre}.conv3"), &out, 1, 0);
            bn(p, &format!("{pre}.bn3"), &mut out, false);
            if b == 0 {
                let mut identity = conv(p, &format!("{pre}.downsample.0"), &x, s, 0);
                bn(p, &format!("{pre}.downsample.1"), &mut identity, false);
                out += &identity;
            } else {
                out += &x;
            }
            relu_inplace(&mut out);
            x = out;
        }
    }
    x
}
