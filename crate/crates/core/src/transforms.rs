//! Analysis/synthesis and hyper transforms, quantisers, and image padding.
//!
//! Every down/up-sampling stage is a 4x4 convolution with stride 2 and
//! padding 1, so each stage halves (or doubles) both spatial dimensions.

use crate::config::AutoencoderConfig;
use crate::error::{DcaeError, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::kernels::round_half_away;
use crate::params::{Initializer, ParamStore};
use crate::tensor::{Scalar, Tensor};

const K: usize = 4;

fn conv_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

fn hyper_analysis_channels(ae: &AutoencoderConfig) -> Vec<usize> {
    let n = ae.z_stages().max(1);
    let mut v = vec![ae.y_channels; n];
    v.push(ae.z_channels);
    v
}

fn hyper_synthesis_channels(ae: &AutoencoderConfig) -> Vec<usize> {
    let n = ae.z_stages().max(1);
    let mut v = vec![ae.z_channels];
    v.extend(std::iter::repeat(ae.y_channels).take(n - 1));
    v.push(2 * ae.y_channels);
    v
}

/// Register `g_a`, `g_s`, `h_a`, `h_s` weights.
pub fn init_transforms(
    ae: &AutoencoderConfig,
    init: &mut Initializer,
    store: &mut ParamStore,
) -> Result<()> {
    let a = ae.analysis_channels();
    for (i, w) in a.windows(2).enumerate() {
        let (ci, co) = (w[0], w[1]);
        store.insert(
            format!("g_a.{i}.weight"),
            init.uniform([co, ci, K, K], conv_bound(ci * K * K)),
        )?;
        store.insert(format!("g_a.{i}.bias"), Tensor::zeros([co, 1, 1, 1]))?;
    }
    let s: Vec<usize> = a.iter().rev().copied().collect();
    for (i, w) in s.windows(2).enumerate() {
        let (ci, co) = (w[0], w[1]);
        store.insert(
            format!("g_s.{i}.weight"),
            init.uniform([ci, co, K, K], conv_bound(ci * K * K / 4)),
        )?;
        let bias = if i + 2 == s.len() { 0.5 } else { 0.0 };
        store.insert(format!("g_s.{i}.bias"), Tensor::full([co, 1, 1, 1], bias))?;
    }
    let ha = hyper_analysis_channels(ae);
    for (i, w) in ha.windows(2).enumerate() {
        let (ci, co) = (w[0], w[1]);
        let k = if ae.z_stages() == 0 { 3 } else { K };
        store.insert(
            format!("h_a.{i}.weight"),
            init.uniform([co, ci, k, k], conv_bound(ci * k * k)),
        )?;
        store.insert(format!("h_a.{i}.bias"), Tensor::zeros([co, 1, 1, 1]))?;
    }
    let hs = hyper_synthesis_channels(ae);
    for (i, w) in hs.windows(2).enumerate() {
        let (ci, co) = (w[0], w[1]);
        let shape = if ae.z_stages() == 0 {
            [co, ci, 3, 3]
        } else {
            [ci, co, K, K]
        };
        let fan = if ae.z_stages() == 0 { ci * 9 } else { ci * K * K / 4 };
        store.insert(format!("h_s.{i}.weight"), init.uniform(shape, conv_bound(fan)))?;
        store.insert(format!("h_s.{i}.bias"), Tensor::zeros([co, 1, 1, 1]))?;
    }
    Ok(())
}

fn down_stack<T: Scalar>(g: &mut Graph<'_, T>, mut x: Var, prefix: &str, n: usize) -> Result<Var> {
    for i in 0..n {
        let w = g.param(&format!("{prefix}.{i}.weight"))?;
        let b = g.param(&format!("{prefix}.{i}.bias"))?;
        x = g.conv2d(x, w, Some(b), 2, 1)?;
        if i + 1 < n {
            x = g.gelu(x);
        }
    }
    Ok(x)
}

fn up_stack<T: Scalar>(g: &mut Graph<'_, T>, mut x: Var, prefix: &str, n: usize) -> Result<Var> {
    for i in 0..n {
        let w = g.param(&format!("{prefix}.{i}.weight"))?;
        let b = g.param(&format!("{prefix}.{i}.bias"))?;
        x = g.conv2d_transpose(x, w, Some(b), 2, 1)?;
        if i + 1 < n {
            x = g.gelu(x);
        }
    }
    Ok(x)
}

fn expect_channels<T: Scalar>(g: &Graph<'_, T>, x: Var, c: usize, what: &str) -> Result<()> {
    let s = g.value(x).shape();
    if s[1] != c {
        return Err(DcaeError::dim(format!("{what}: expected {c} channels, got {:?}", s)));
    }
    Ok(())
}

/// `y = g_a(x)`.
pub fn analyze<T: Scalar>(g: &mut Graph<'_, T>, x: Var, ae: &AutoencoderConfig) -> Result<Var> {
    let [_, c, h, w] = g.value(x).shape();
    let s = ae.s_total();
    if c != 3 {
        return Err(DcaeError::dim(format!("analyze: image has {c} channels, not 3")));
    }
    if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
        return Err(DcaeError::Precondition(format!(
            "analyze: {w}x{h} is not padded to a multiple of {s}"
        )));
    }
    down_stack(g, x, "g_a", ae.y_stages())
}

/// `x̂ = g_s(ȳ)`, clamped to `[0, 1]`.
pub fn synthesize<T: Scalar>(g: &mut Graph<'_, T>, y: Var, ae: &AutoencoderConfig) -> Result<Var> {
    expect_channels(g, y, ae.y_channels, "synthesize")?;
    let x = up_stack(g, y, "g_s", ae.y_stages())?;
    Ok(g.clamp(x, 0.0, 1.0))
}

/// `z = h_a(y)`.
pub fn hyper_analyze<T: Scalar>(
    g: &mut Graph<'_, T>,
    y: Var,
    ae: &AutoencoderConfig,
) -> Result<Var> {
    expect_channels(g, y, ae.y_channels, "hyper_analyze")?;
    if ae.z_stages() == 0 {
        let w = g.param("h_a.0.weight")?;
        let b = g.param("h_a.0.bias")?;
        return g.conv2d(y, w, Some(b), 1, 1);
    }
    let [_, _, h, w] = g.value(y).shape();
    let f = ae.downsample_factor_z;
    if h % f != 0 || w % f != 0 {
        return Err(DcaeError::dim(format!(
            "hyper_analyze: latent {w}x{h} not divisible by {f}"
        )));
    }
    down_stack(g, y, "h_a", ae.z_stages())
}

/// `F_z = h_s(ẑ)`, with `2 * y_channels` channels at latent resolution.
pub fn hyper_synthesize<T: Scalar>(
    g: &mut Graph<'_, T>,
    z: Var,
    ae: &AutoencoderConfig,
) -> Result<Var> {
    expect_channels(g, z, ae.z_channels, "hyper_synthesize")?;
    if ae.z_stages() == 0 {
        let w = g.param("h_s.0.weight")?;
        let b = g.param("h_s.0.bias")?;
        return g.conv2d(z, w, Some(b), 1, 1);
    }
    up_stack(g, z, "h_s", ae.z_stages())
}

/// Fractional bits of the coding mean. Means are snapped to this dyadic grid
/// before quantisation so that `k + μ` is exact in single precision for
/// `|ŷ| < 2^13`, which makes `ŷ − μ` an exact integer.
pub const MEAN_GRID_BITS: i32 = 10;

/// `μ` rounded to the coding grid.
pub fn coding_mean<T: Scalar>(mu: &Tensor<T>) -> Tensor<T> {
    let scale = (1u32 << MEAN_GRID_BITS) as f64;
    mu.map(|m| T::from_f64(round_half_away(m.as_f64() * scale) / scale))
}

/// `ŷ = ⌈y − μ⌋ + μ` with the integer symbols `k = ŷ − μ`, where `μ` is the
/// snapped [`coding_mean`].
pub fn quantize_latent<T: Scalar>(y: &Tensor<T>, mu: &Tensor<T>) -> Result<(Tensor<T>, Vec<i32>)> {
    y.expect_shape(mu.shape(), "quantize_latent")?;
    let mu = coding_mean(mu);
    let symbols: Vec<i32> = y
        .data()
        .iter()
        .zip(mu.data())
        .map(|(&a, &m)| round_half_away(a.as_f64() - m.as_f64()) as i32)
        .collect();
    let yhat = dequantize_snapped(&symbols, &mu);
    Ok((yhat, symbols))
}

/// `ŷ = k + μ` with the snapped coding mean.
pub fn dequantize<T: Scalar>(symbols: &[i32], mu: &Tensor<T>) -> Result<Tensor<T>> {
    if symbols.len() != mu.numel() {
        return Err(DcaeError::dim(format!(
            "{} symbols for a {:?} mean",
            symbols.len(),
            mu.shape()
        )));
    }
    Ok(dequantize_snapped(symbols, &coding_mean(mu)))
}

fn dequantize_snapped<T: Scalar>(symbols: &[i32], mu: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(mu.shape(), |i| T::from_f64(symbols[i] as f64 + mu.data()[i].as_f64()))
}

/// `ẑ = ⌈z⌋`.
pub fn quantize_round<T: Scalar>(z: &Tensor<T>) -> Tensor<T> {
    z.map(round_half_away)
}

/// Replicate-pad right and bottom edges to multiples of `multiple`.
/// Returns the padded image and the original `(width, height)`.
pub fn pad_image(img: &Image, multiple: usize) -> Result<(Image, (usize, usize))> {
    if img.width == 0 || img.height == 0 {
        return Err(DcaeError::Input("cannot pad an empty image".into()));
    }
    let pw = img.width.div_ceil(multiple) * multiple;
    let ph = img.height.div_ceil(multiple) * multiple;
    let mut pixels = Vec::with_capacity(pw * ph * 3);
    for y in 0..ph {
        let sy = y.min(img.height - 1);
        for x in 0..pw {
            let sx = x.min(img.width - 1);
            let o = (sy * img.width + sx) * 3;
            pixels.extend_from_slice(&img.pixels[o..o + 3]);
        }
    }
    Ok((Image::new(pw, ph, pixels)?, (img.width, img.height)))
}

pub fn crop_image(img: &Image, width: usize, height: usize) -> Result<Image> {
    if width > img.width || height > img.height || width == 0 || height == 0 {
        return Err(DcaeError::Input(format!(
            "cannot crop {}x{} to {width}x{height}",
            img.width, img.height
        )));
    }
    let mut pixels = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        let o = y * img.width * 3;
        pixels.extend_from_slice(&img.pixels[o..o + width * 3]);
    }
    Image::new(width, height, pixels)
}

/// `(1, 3, H, W)` tensor with values `v / 255`.
pub fn image_to_tensor<T: Scalar>(img: &Image) -> Tensor<T> {
    let (w, h) = (img.width, img.height);
    Tensor::from_fn([1, 3, h, w], |i| {
        let c = i / (h * w);
        let p = i % (h * w);
        T::from_f64(img.pixels[p * 3 + c] as f64 / 255.0)
    })
}

/// Stack images of equal size into one batch.
pub fn images_to_batch<T: Scalar>(imgs: &[Image]) -> Result<Tensor<T>> {
    let first = imgs
        .first()
        .ok_or_else(|| DcaeError::Input("empty batch".into()))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(imgs.len() * 3 * w * h);
    for img in imgs {
        if (img.width, img.height) != (w, h) {
            return Err(DcaeError::dim("batch images differ in size"));
        }
        data.extend(image_to_tensor::<T>(img).into_data());
    }
    Tensor::from_vec([imgs.len(), 3, h, w], data)
}

/// First batch element back to 8-bit pixels, `round(255 v)` clamped.
pub fn tensor_to_image<T: Scalar>(t: &Tensor<T>) -> Result<Image> {
    let [_, c, h, w] = t.shape();
    if c != 3 {
        return Err(DcaeError::dim(format!("image tensor has {c} channels")));
    }
    let mut pixels = vec![0u8; 3 * h * w];
    for ch in 0..3 {
        for p in 0..h * w {
            let v = t.data()[ch * h * w + p].as_f64().clamp(0.0, 1.0);
            pixels[p * 3 + ch] = (v * 255.0).round() as u8;
        }
    }
    Image::new(w, h, pixels)
}
