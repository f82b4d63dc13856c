//! The end-to-end image codec: analysis, hyper-prior, slice-wise coding.

use crate::container::{read_container, write_container, Container};
use crate::entropy::{gaussian_mass, logistic_mass, slice_lrp, slice_params};
use crate::error::{DcaeError, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::model::DcaeModel;
use crate::rans::{build_logistic_cdf, QuantizedCdf, RansDecoder, RansEncoder, ScaleTable};
use crate::tensor::Tensor;
use crate::transforms::{
    analyze, crop_image, dequantize, hyper_analyze, hyper_synthesize, image_to_tensor, pad_image,
    quantize_latent, quantize_round, synthesize, tensor_to_image,
};

/// Rate accounting for one coded stream.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamStats {
    pub name: String,
    pub symbols: usize,
    /// `Σ -log2 p` under the unquantised distributions the tables were
    /// built from (for latent slices: the table scale σ').
    pub ideal_true: f64,
    /// `Σ -log2 q` under the 16-bit tables, escape bypass bits included.
    pub ideal_q: f64,
    pub actual_bits: u64,
}

/// Integer symbols of one image: `ẑ` and `k_i = ŷ_i − μ_i` per slice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentSymbols {
    pub z: Vec<i32>,
    pub slices: Vec<Vec<i32>>,
}

/// Output of [`slice_pass`].
pub struct SlicePass {
    pub mu: Vec<Tensor>,
    pub sigma: Vec<Tensor>,
    pub symbols: Vec<Vec<i32>>,
    pub yhat: Vec<Tensor>,
    pub ybar: Vec<Var>,
}

/// Walk the slices in order. For each one, `(μ_i, σ_i)` are computed from
/// `F_z` and the already reconstructed `ȳ_<i`, then `symbols_for` supplies
/// `k_i` (quantising `y` when encoding, reading the stream when decoding).
pub fn slice_pass<'p>(
    g: &mut Graph<'p, f32>,
    model: &DcaeModel,
    fz: Var,
    mut symbols_for: impl FnMut(usize, &Tensor, &Tensor) -> Result<Vec<i32>>,
) -> Result<SlicePass> {
    let cfg = &model.config;
    let mut out = SlicePass {
        mu: vec![],
        sigma: vec![],
        symbols: vec![],
        yhat: vec![],
        ybar: vec![],
    };
    for i in 0..cfg.slices.slice_count {
        let sp = slice_params(g, cfg, i, fz, &out.ybar)?;
        let mu = g.value(sp.mu).clone();
        let sigma = g.value(sp.sigma).clone();
        mu.check_finite(&format!("slice.{i}.mu"))?;
        sigma.check_finite(&format!("slice.{i}.sigma"))?;
        let k = symbols_for(i, &mu, &sigma)?;
        let yhat = dequantize(&k, &mu)?;
        let yv = g.input(yhat.clone());
        let ybar = slice_lrp(g, i, &sp, yv)?;
        out.mu.push(mu);
        out.sigma.push(sigma);
        out.symbols.push(k);
        out.yhat.push(yhat);
        out.ybar.push(ybar);
    }
    Ok(out)
}

fn prior_tables(model: &DcaeModel) -> Result<Vec<(QuantizedCdf, f64, f64)>> {
    let loc = model.params.value("prior.loc")?;
    let ls = model.params.value("prior.log_scale")?;
    loc.data()
        .iter()
        .zip(ls.data())
        .map(|(&l, &s)| {
            let (l, s) = (l as f64, (s as f64).exp());
            Ok((build_logistic_cdf(l, s)?, l, s))
        })
        .collect()
}

fn latent_dims(model: &DcaeModel, width: usize, height: usize) -> ((usize, usize), (usize, usize)) {
    let ae = &model.config.autoencoder;
    let s = ae.s_total();
    let (pw, ph) = (width.div_ceil(s) * s, height.div_ceil(s) * s);
    let (yw, yh) = (pw / ae.downsample_factor_y, ph / ae.downsample_factor_y);
    ((yw, yh), (yw / ae.downsample_factor_z, yh / ae.downsample_factor_z))
}

/// Everything produced while compressing one image.
pub struct Encoded {
    pub bytes: Vec<u8>,
    pub container: Container,
    pub symbols: LatentSymbols,
    pub yhat: Vec<Tensor>,
    pub stats: Vec<StreamStats>,
}

impl Encoded {
    pub fn bpp(&self) -> f64 {
        crate::metrics::bpp(self.bytes.len(), self.container.width as usize, self.container.height as usize)
    }
}

pub fn compress(model: &DcaeModel, img: &Image) -> Result<Encoded> {
    let cfg = &model.config;
    let ae = &cfg.autoencoder;
    let (padded, (w, h)) = pad_image(img, ae.s_total())?;
    let mut g = Graph::inference(&model.params);
    let x = g.input(image_to_tensor(&padded));
    let y = analyze(&mut g, x, ae)?;
    let z = hyper_analyze(&mut g, y, ae)?;
    let zhat = quantize_round(g.value(z));
    zhat.check_finite("z")?;

    let tables = prior_tables(model)?;
    let plane = zhat.plane();
    let mut enc = RansEncoder::new();
    let mut z_true = 0.0;
    let z_symbols: Vec<i32> = zhat.data().iter().map(|&v| v as i32).collect();
    for (i, &s) in z_symbols.iter().enumerate() {
        let (t, l, sc) = &tables[(i / plane) % ae.z_channels];
        enc.put(s, t);
        z_true -= logistic_mass(s as f64 - l, *sc).max(f64::MIN_POSITIVE).log2();
    }
    let z_q = enc.ideal_bits();
    let z_stream = enc.finish();
    let mut stats = vec![StreamStats {
        name: "z".into(),
        symbols: z_symbols.len(),
        ideal_true: z_true,
        ideal_q: z_q,
        actual_bits: 8 * z_stream.len() as u64,
    }];

    let zv = g.input(zhat);
    let fz = hyper_synthesize(&mut g, zv, ae)?;
    let sc = cfg.slice_channels();
    let yall = g.value(y).clone();
    let scales = ScaleTable::shared();
    let mut slice_streams = Vec::new();
    let pass = slice_pass(&mut g, model, fz, |i, mu, sigma| {
        let yi = slice_of(&yall, i * sc, sc);
        let (_, k) = quantize_latent(&yi, mu)?;
        let mut enc = RansEncoder::new();
        let mut ideal_true = 0.0;
        for (&s, &sg) in k.iter().zip(sigma.data()) {
            let idx = scales.index_for(sg as f64);
            enc.put(s, scales.table(idx));
            ideal_true -= gaussian_mass((s as f64).abs(), scales.scale(idx))
                .max(f64::MIN_POSITIVE)
                .log2();
        }
        let ideal_q = enc.ideal_bits();
        let bytes = enc.finish();
        stats.push(StreamStats {
            name: format!("slice{i}"),
            symbols: k.len(),
            ideal_true,
            ideal_q,
            actual_bits: 8 * bytes.len() as u64,
        });
        slice_streams.push(bytes);
        Ok(k)
    })?;

    let container = Container {
        profile_id: cfg.profile.id(),
        lambda_index: cfg.lambda_index,
        width: w as u32,
        height: h as u32,
        z_stream,
        slice_streams,
    };
    let bytes = write_container(&container)?;
    Ok(Encoded {
        bytes,
        container,
        symbols: LatentSymbols {
            z: z_symbols,
            slices: pass.symbols,
        },
        yhat: pass.yhat,
        stats,
    })
}

/// Channels `start .. start + len` of a single-image tensor.
fn slice_of(t: &Tensor, start: usize, len: usize) -> Tensor {
    let [_, _, h, w] = t.shape();
    let p = h * w;
    Tensor::from_vec([1, len, h, w], t.data()[start * p..(start + len) * p].to_vec())
        .expect("slice within bounds")
}

pub struct Decoded {
    pub image: Image,
    pub symbols: LatentSymbols,
    pub yhat: Vec<Tensor>,
}

pub fn decompress(model: &DcaeModel, bytes: &[u8]) -> Result<Decoded> {
    let c = read_container(bytes)?;
    decompress_container(model, &c)
}

pub fn decompress_container(model: &DcaeModel, c: &Container) -> Result<Decoded> {
    let cfg = &model.config;
    let ae = &cfg.autoencoder;
    if c.profile_id != cfg.profile.id() {
        return Err(DcaeError::CorruptContainer(format!(
            "container profile {} does not match model profile {}",
            c.profile_id,
            cfg.profile.id()
        )));
    }
    if c.slice_streams.len() != cfg.slices.slice_count {
        return Err(DcaeError::CorruptContainer(format!(
            "{} slice streams, model codes {}",
            c.slice_streams.len(),
            cfg.slices.slice_count
        )));
    }
    let (w, h) = (c.width as usize, c.height as usize);
    if w == 0 || h == 0 {
        return Err(DcaeError::CorruptContainer("zero image dimension".into()));
    }
    let ((yw, yh), (zw, zh)) = latent_dims(model, w, h);
    let tables = prior_tables(model)?;
    let plane = zw * zh;
    let n = ae.z_channels * plane;
    let mut dec = RansDecoder::new(&c.z_stream)?;
    let mut z_symbols = Vec::with_capacity(n);
    for i in 0..n {
        z_symbols.push(dec.get(&tables[i / plane].0)?);
    }
    dec.finish()?;
    let zhat = Tensor::from_vec(
        [1, ae.z_channels, zh, zw],
        z_symbols.iter().map(|&s| s as f32).collect(),
    )?;

    let mut g = Graph::inference(&model.params);
    let zv = g.input(zhat);
    let fz = hyper_synthesize(&mut g, zv, ae)?;
    let fz_shape = g.value(fz).shape();
    if fz_shape[2] != yh || fz_shape[3] != yw {
        return Err(DcaeError::dim(format!(
            "hyper synthesis gave {fz_shape:?}, expected {yw}x{yh}"
        )));
    }
    let scales = ScaleTable::shared();
    let pass = slice_pass(&mut g, model, fz, |i, _mu, sigma| {
        let mut dec = RansDecoder::new(&c.slice_streams[i])?;
        let k = sigma
            .data()
            .iter()
            .map(|&sg| dec.get(scales.table(scales.index_for(sg as f64))))
            .collect::<Result<Vec<_>>>()?;
        dec.finish()?;
        Ok(k)
    })?;
    let ybar = g.concat_channels(&pass.ybar)?;
    let xhat = synthesize(&mut g, ybar, ae)?;
    let full = tensor_to_image(g.value(xhat))?;
    Ok(Decoded {
        image: crop_image(&full, w, h)?,
        symbols: LatentSymbols {
            z: z_symbols,
            slices: pass.symbols,
        },
        yhat: pass.yhat,
    })
}

/// `(μ_i, σ_i)` for every slice given `ẑ` and the slice symbols, computed
/// exactly as the decoder does.
pub fn slice_distributions(
    model: &DcaeModel,
    zhat: &Tensor,
    symbols: &[Vec<i32>],
) -> Result<Vec<(Tensor, Tensor)>> {
    let mut g = Graph::inference(&model.params);
    let zv = g.input(zhat.clone());
    let fz = hyper_synthesize(&mut g, zv, &model.config.autoencoder)?;
    let pass = slice_pass(&mut g, model, fz, |i, _, _| {
        symbols
            .get(i)
            .cloned()
            .ok_or_else(|| DcaeError::Input(format!("no symbols for slice {i}")))
    })?;
    Ok(pass.mu.into_iter().zip(pass.sigma).collect())
}

/// Head-averaged attention maps of slice `slice` to dictionary entry
/// `entry`, as an 8-bit greymap at latent resolution.
pub fn attention_map(
    model: &DcaeModel,
    img: &Image,
    slice: usize,
    entry: usize,
) -> Result<(usize, usize, Vec<u8>)> {
    let cfg = &model.config;
    if !cfg.dca.enabled {
        return Err(DcaeError::Config("model has DCA disabled".into()));
    }
    if slice >= cfg.slices.slice_count || entry >= cfg.dca.dict_entries {
        return Err(DcaeError::OutOfRange(format!(
            "slice {slice} / entry {entry} outside {} slices x {} entries",
            cfg.slices.slice_count, cfg.dca.dict_entries
        )));
    }
    let ae = &cfg.autoencoder;
    let (padded, _) = pad_image(img, ae.s_total())?;
    let mut g = Graph::inference(&model.params);
    let x = g.input(image_to_tensor(&padded));
    let y = analyze(&mut g, x, ae)?;
    let z = hyper_analyze(&mut g, y, ae)?;
    let zhat = quantize_round(g.value(z));
    let zv = g.input(zhat);
    let fz = hyper_synthesize(&mut g, zv, ae)?;
    let [_, _, h, w] = g.value(y).shape();
    let sc = cfg.slice_channels();
    let yall = g.value(y).clone();
    slice_pass(&mut g, model, fz, |i, mu, _| {
        Ok(quantize_latent(&slice_of(&yall, i * sc, sc), mu)?.1)
    })?;
    let map = crate::entropy::export_attention_maps(&g, cfg, slice, entry, h, w)?;
    Ok((w, h, map))
}
