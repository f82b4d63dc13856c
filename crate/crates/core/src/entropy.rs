//! The channel-wise autoregressive entropy model.
//!
//! Slice `i` is conditioned on `X_i = concat(F_z, ȳ_<i)`. When DCA is
//! enabled, `X_i` passes through multi-scale feature aggregation (MSFA) and
//! then queries the shared dictionary by cross attention, giving `F_dict_i`.
//! The parameter head `f_E` maps `concat(F_z, ȳ_<i, F_dict_i)` to `(μ_i, σ_i)`
//! and the residual head `f_LRP` additionally sees `ŷ_i` and returns
//! `ȳ_i = ŷ_i + 0.5 tanh(·)`.
//!
//! Parameter layout (prefix `slice.{i}.` unless noted):
//!
//! | name | shape |
//! |------|-------|
//! | `dictionary` (shared) | `(N, C_d)` |
//! | `dca.key.weight` (shared) | `(C_d, C_qk)` |
//! | `msfa.econv.{j}.w_in`, `.dw.weight`, `.dw.bias`, `.w_out` | `(in, C_ms)`, `(C_ms, 1, 3, 3)`, `(C_ms)`, `(C_ms, in)` |
//! | `msfa.merge.weight`, `.bias` | `(m·in, C_ms)`, `(C_ms)` |
//! | `msfa.sa.weight`, `.bias` | `(1, 2, 7, 7)`, `(1)` |
//! | `msfa.proj.weight`, `.bias` (m = 0) | `(in, C_ms)`, `(C_ms)` |
//! | `dca.query.weight` | `(C_ms, C_qk)` |
//! | `dca.tau` | `(1, heads)` |
//! | `dca.ffn.{0,1}.weight`, `.bias` | `(C_d, 2C_d)`, `(2C_d, C_d)` |
//! | `entropy.{0,1,2}.weight`, `.bias` | 1x1 layers to `2·sc` |
//! | `lrp.{0,1,2}.weight`, `.bias` | 1x1 layers to `sc` |
//! | `prior.loc`, `prior.log_scale` (global) | `(z_channels)` |

use crate::config::{DcaBlockConfig, ModelConfig};
use crate::error::{DcaeError, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{normal_cdf, sigmoid};
use crate::params::{Initializer, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const SIGMA_MIN: f64 = 0.11;
pub const TAU_MIN: f64 = 0.01;

fn bound(fan_in: usize) -> f64 {
    (3.0 / fan_in.max(1) as f64).sqrt()
}

fn lin(store: &mut ParamStore, init: &mut Initializer, name: &str, cin: usize, cout: usize, bias: bool) -> Result<()> {
    store.insert(format!("{name}.weight"), init.uniform([cin, cout, 1, 1], bound(cin)))?;
    if bias {
        store.insert(format!("{name}.bias"), Tensor::zeros([cout, 1, 1, 1]))?;
    }
    Ok(())
}

/// Channels of `X_i` for slice `i`.
pub fn context_channels(cfg: &ModelConfig, i: usize) -> usize {
    2 * cfg.autoencoder.y_channels + i * cfg.slice_channels()
}

/// Register every entropy-model parameter.
pub fn init_entropy(cfg: &ModelConfig, init: &mut Initializer, store: &mut ParamStore) -> Result<()> {
    let d = &cfg.dca;
    let sc = cfg.slice_channels();
    if d.dict_entries > 0 && d.dict_channels > 0 {
        store.insert(
            "dictionary",
            init.uniform([d.dict_entries, d.dict_channels, 1, 1], 1.0),
        )?;
    }
    if d.enabled {
        lin(store, init, "dca.key", d.dict_channels, d.c_qk, false)?;
    }
    for i in 0..cfg.slices.slice_count {
        let p = format!("slice.{i}");
        let cin = context_channels(cfg, i);
        if d.enabled {
            if d.msfa_layers == 0 {
                lin(store, init, &format!("{p}.msfa.proj"), cin, d.c_ms, true)?;
            } else {
                for j in 1..d.msfa_layers {
                    let e = format!("{p}.msfa.econv.{j}");
                    store.insert(format!("{e}.w_in"), init.uniform([cin, d.c_ms, 1, 1], bound(cin)))?;
                    store.insert(format!("{e}.dw.weight"), init.uniform([d.c_ms, 1, 3, 3], bound(9)))?;
                    store.insert(format!("{e}.dw.bias"), Tensor::zeros([d.c_ms, 1, 1, 1]))?;
                    store.insert(format!("{e}.w_out"), init.uniform([d.c_ms, cin, 1, 1], bound(d.c_ms)))?;
                }
                lin(store, init, &format!("{p}.msfa.merge"), d.msfa_layers * cin, d.c_ms, true)?;
                store.insert(format!("{p}.msfa.sa.weight"), init.uniform([1, 2, 7, 7], bound(98)))?;
                store.insert(format!("{p}.msfa.sa.bias"), Tensor::zeros([1, 1, 1, 1]))?;
            }
            lin(store, init, &format!("{p}.dca.query"), d.c_ms, d.c_qk, false)?;
            store.insert(
                format!("{p}.dca.tau"),
                Tensor::full([1, d.heads(), 1, 1], (d.head_dim as f32).sqrt()),
            )?;
            let hid = d.ffn_expansion * d.dict_channels;
            lin(store, init, &format!("{p}.dca.ffn.0"), d.dict_channels, hid, true)?;
            lin(store, init, &format!("{p}.dca.ffn.1"), hid, d.dict_channels, true)?;
        }
        let ein = cin + if d.enabled { d.dict_channels } else { 0 };
        let h = cfg.head_hidden;
        lin(store, init, &format!("{p}.entropy.0"), ein, h, true)?;
        lin(store, init, &format!("{p}.entropy.1"), h, h, true)?;
        lin(store, init, &format!("{p}.entropy.2"), h, 2 * sc, true)?;
        lin(store, init, &format!("{p}.lrp.0"), ein + sc, h, true)?;
        lin(store, init, &format!("{p}.lrp.1"), h, h, true)?;
        store.insert(format!("{p}.lrp.2.weight"), Tensor::zeros([h, sc, 1, 1]))?;
        store.insert(format!("{p}.lrp.2.bias"), Tensor::zeros([sc, 1, 1, 1]))?;
    }
    let zc = cfg.autoencoder.z_channels;
    store.insert("prior.loc", Tensor::zeros([zc, 1, 1, 1]))?;
    store.insert("prior.log_scale", Tensor::zeros([zc, 1, 1, 1]))?;
    Ok(())
}

fn linear_layer<T: Scalar>(g: &mut Graph<'_, T>, x: Var, name: &str, bias: bool) -> Result<Var> {
    let w = g.param(&format!("{name}.weight"))?;
    let b = if bias {
        Some(g.param(&format!("{name}.bias"))?)
    } else {
        None
    };
    g.linear(x, w, b)
}

/// Three 1x1 layers with GELU between them.
fn head3<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let h = linear_layer(g, x, &format!("{prefix}.0"), true)?;
    let h = g.gelu(h);
    let h = linear_layer(g, h, &format!("{prefix}.1"), true)?;
    let h = g.gelu(h);
    linear_layer(g, h, &format!("{prefix}.2"), true)
}

/// `sigmoid(conv7x7(concat(mean_c X, max_c X)))`, a `(B, 1, H, W)` map.
pub fn spatial_attention<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let mean = g.channel_mean(x);
    let max = g.channel_max(x);
    let pooled = g.concat_channels(&[mean, max])?;
    let w = g.param(&format!("{prefix}.weight"))?;
    let b = g.param(&format!("{prefix}.bias"))?;
    let logits = g.conv2d(pooled, w, Some(b), 1, 3)?;
    Ok(g.sigmoid(logits))
}

/// `DWConv3x3(X W_in) W_out`.
fn econv<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let w_in = g.param(&format!("{prefix}.w_in"))?;
    let h = g.linear(x, w_in, None)?;
    let dw = g.param(&format!("{prefix}.dw.weight"))?;
    let db = g.param(&format!("{prefix}.dw.bias"))?;
    let h = g.dwconv3x3(h, dw, Some(db))?;
    let w_out = g.param(&format!("{prefix}.w_out"))?;
    g.linear(h, w_out, None)
}

/// Multi-scale feature aggregation: `X^1 = X`, `X^j = EConv(X^{j-1})`,
/// merged by a 1x1 layer and gated by spatial attention. With `m = 0` this
/// is a single linear projection.
pub fn msfa_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    prefix: &str,
    d: &DcaBlockConfig,
) -> Result<Var> {
    if d.msfa_layers == 0 {
        return linear_layer(g, x, &format!("{prefix}.proj"), true);
    }
    let mut feats = vec![x];
    for j in 1..d.msfa_layers {
        let prev = feats[j - 1];
        feats.push(econv(g, prev, &format!("{prefix}.econv.{j}"))?);
    }
    let cat = g.concat_channels(&feats)?;
    let merged = linear_layer(g, cat, &format!("{prefix}.merge"), true)?;
    let sa = spatial_attention(g, merged, &format!("{prefix}.sa"))?;
    g.record(format!("{prefix}.sa"), sa);
    g.mul_map(merged, sa)
}

/// Dictionary cross attention. `x_ms` is spatial `(B, C_ms, H, W)`; the
/// result `F_dict` is `(B, C_d, H, W)`.
///
/// Records `{prefix}.attn.{h}` (rows `(B·H·W, N)`) for each head and
/// `{prefix}.pre_ffn` (rows `(B·H·W, C_d)`).
pub fn dca_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    x_ms: Var,
    prefix: &str,
    d: &DcaBlockConfig,
) -> Result<Var> {
    if d.dict_entries == 0 {
        return Err(DcaeError::Config("dictionary has no entries".into()));
    }
    let [nb, _, h, w] = g.value(x_ms).shape();
    let rows = g.to_rows(x_ms);
    let q = linear_layer(g, rows, &format!("{prefix}.query"), false)?;
    let dict = g.param("dictionary")?;
    let k = linear_layer(g, dict, "dca.key", false)?;
    let tau = g.param(&format!("{prefix}.tau"))?;
    let tau = g.clamp_min(tau, TAU_MIN);
    let heads = d.heads();
    let vd = d.dict_channels / heads;
    let mut outs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = g.slice_channels(q, hd * d.head_dim, d.head_dim)?;
        let kh = g.slice_channels(k, hd * d.head_dim, d.head_dim)?;
        let logits = g.matmul_nt(qh, kh)?;
        let t = g.slice_channels(tau, hd, 1)?;
        let logits = g.div_scalar(logits, t)?;
        let attn = g.softmax(logits);
        g.record(format!("{prefix}.attn.{hd}"), attn);
        let vh = g.slice_channels(dict, hd * vd, vd)?;
        outs.push(g.matmul(attn, vh)?);
    }
    let pre = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_channels(&outs)?
    };
    g.record(format!("{prefix}.pre_ffn"), pre);
    let f = linear_layer(g, pre, &format!("{prefix}.ffn.0"), true)?;
    let f = g.gelu(f);
    let f = linear_layer(g, f, &format!("{prefix}.ffn.1"), true)?;
    let out = g.add(pre, f)?;
    g.from_rows(out, nb, h, w)
}

/// `f_E`: `(μ, σ)` from the concatenated context, `σ = max(softplus(raw), 0.11)`.
pub fn entropy_params<T: Scalar>(
    g: &mut Graph<'_, T>,
    context: Var,
    prefix: &str,
    slice_channels: usize,
) -> Result<(Var, Var)> {
    let out = head3(g, context, prefix)?;
    let mu = g.slice_channels(out, 0, slice_channels)?;
    let raw = g.slice_channels(out, slice_channels, slice_channels)?;
    let sp = g.softplus(raw);
    Ok((mu, g.clamp_min(sp, SIGMA_MIN)))
}

/// `f_LRP`: `ȳ = ŷ + 0.5 tanh(head(concat(context, ŷ)))`.
pub fn lrp<T: Scalar>(g: &mut Graph<'_, T>, context: Var, yhat: Var, prefix: &str) -> Result<Var> {
    let x = g.concat_channels(&[context, yhat])?;
    let r = head3(g, x, prefix)?;
    let r = g.tanh(r);
    let r = g.scale(r, 0.5);
    g.add(yhat, r)
}

/// Distribution parameters of one slice plus the context `f_LRP` reuses.
#[derive(Clone, Copy, Debug)]
pub struct SliceParams {
    pub mu: Var,
    pub sigma: Var,
    pub context: Var,
}

/// Everything before coding slice `i`: MSFA, DCA, and `f_E`.
/// `prev` holds `ȳ_0 .. ȳ_{i-1}`.
pub fn slice_params<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    i: usize,
    fz: Var,
    prev: &[Var],
) -> Result<SliceParams> {
    if prev.len() != i {
        return Err(DcaeError::Precondition(format!(
            "slice {i} needs {i} decoded slices, got {}",
            prev.len()
        )));
    }
    let p = format!("slice.{i}");
    let mut parts = vec![fz];
    parts.extend_from_slice(prev);
    let x = if parts.len() == 1 {
        fz
    } else {
        g.concat_channels(&parts)?
    };
    let context = if cfg.dca.enabled {
        let ms = msfa_forward(g, x, &format!("{p}.msfa"), &cfg.dca)?;
        let fd = dca_forward(g, ms, &format!("{p}.dca"), &cfg.dca)?;
        g.concat_channels(&[x, fd])?
    } else {
        x
    };
    let (mu, sigma) = entropy_params(g, context, &format!("{p}.entropy"), cfg.slice_channels())?;
    Ok(SliceParams { mu, sigma, context })
}

pub fn slice_lrp<T: Scalar>(
    g: &mut Graph<'_, T>,
    i: usize,
    params: &SliceParams,
    yhat: Var,
) -> Result<Var> {
    lrp(g, params.context, yhat, &format!("slice.{i}.lrp"))
}

/// `Φ((k + 1/2)/σ) − Φ((k − 1/2)/σ)`, evaluated in the symmetric form so that
/// `p(k) == p(−k)` exactly.
pub fn discretized_gaussian_pmf(k: i64, sigma: f64) -> Result<f64> {
    if !(sigma >= SIGMA_MIN) {
        return Err(DcaeError::Precondition(format!(
            "σ = {sigma} below the floor {SIGMA_MIN}"
        )));
    }
    Ok(gaussian_mass(k.unsigned_abs() as f64, sigma))
}

/// Mass of the unit bin centred at distance `a >= 0` from the mean.
pub fn gaussian_mass(a: f64, sigma: f64) -> f64 {
    normal_cdf((0.5 - a) / sigma) - normal_cdf((-0.5 - a) / sigma)
}

/// Per-channel logistic prior `sigmoid((k + 1/2 − l)/s) − sigmoid((k − 1/2 − l)/s)`.
pub fn factorized_pmf(k: i64, loc: f64, scale: f64) -> Result<f64> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(DcaeError::integrity(
            "prior.log_scale",
            format!("non-positive scale {scale}"),
        ));
    }
    Ok(logistic_mass(k as f64 - loc, scale))
}

/// Mass of the unit bin centred at offset `d` from the location.
pub fn logistic_mass(d: f64, scale: f64) -> f64 {
    let a = d.abs();
    sigmoid((0.5 - a) / scale) - sigmoid((-0.5 - a) / scale)
}

/// Head-averaged attention to dictionary entry `entry` for slice `slice`,
/// as recorded on a batch-1 graph, reshaped to `h x w` and min-max scaled
/// to 8 bits. A constant map becomes mid-grey 128.
pub fn export_attention_maps<T: Scalar>(
    g: &Graph<'_, T>,
    cfg: &ModelConfig,
    slice: usize,
    entry: usize,
    h: usize,
    w: usize,
) -> Result<Vec<u8>> {
    if slice >= cfg.slices.slice_count {
        return Err(DcaeError::OutOfRange(format!(
            "slice {slice} of {}",
            cfg.slices.slice_count
        )));
    }
    if entry >= cfg.dca.dict_entries {
        return Err(DcaeError::OutOfRange(format!(
            "dictionary entry {entry} of {}",
            cfg.dca.dict_entries
        )));
    }
    let raw = attention_column(g, cfg, slice, entry)?;
    if raw.len() != h * w {
        return Err(DcaeError::dim(format!(
            "attention has {} positions, expected {h}x{w}",
            raw.len()
        )));
    }
    Ok(normalize_map(&raw))
}

/// Unnormalised head-averaged attention column, one value per position.
pub fn attention_column<T: Scalar>(
    g: &Graph<'_, T>,
    cfg: &ModelConfig,
    slice: usize,
    entry: usize,
) -> Result<Vec<f64>> {
    let heads = cfg.dca.heads();
    let mut acc: Vec<f64> = Vec::new();
    for hd in 0..heads {
        let a = g
            .recorded(&format!("slice.{slice}.dca.attn.{hd}"))
            .ok_or_else(|| DcaeError::Precondition("attention was not recorded (DCA off?)".into()))?;
        let [rows, n, _, _] = a.shape();
        if acc.is_empty() {
            acc = vec![0.0; rows];
        }
        for (r, slot) in acc.iter_mut().enumerate() {
            *slot += a.data()[r * n + entry].as_f64() / heads as f64;
        }
    }
    Ok(acc)
}

pub fn normalize_map(raw: &[f64]) -> Vec<u8> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; raw.len()];
    }
    raw.iter()
        .map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_pmf_reference_values() {
        let p = discretized_gaussian_pmf(0, 1.0).unwrap();
        assert!((p - 0.382925).abs() < 1e-6, "{p}");
        for k in 1..20 {
            assert_eq!(
                discretized_gaussian_pmf(k, 2.7).unwrap(),
                discretized_gaussian_pmf(-k, 2.7).unwrap()
            );
        }
        assert!(discretized_gaussian_pmf(0, 100.0).unwrap() < p);
        assert!(discretized_gaussian_pmf(0, 0.05).is_err());
    }

    #[test]
    fn logistic_pmf_reference_values() {
        let p = factorized_pmf(0, 0.0, 1.0).unwrap();
        assert!((p - (2.0 * sigmoid(0.5) - 1.0)).abs() < 1e-15);
        assert!((p - 0.244919).abs() < 1e-6);
        assert_eq!(factorized_pmf(3, 3.0, 1.7).unwrap(), factorized_pmf(0, 0.0, 1.7).unwrap());
        assert!(factorized_pmf(0, 0.0, 0.0).is_err());
        let (l, s) = (1.3, 2.0);
        let kk = (20.0 * s + l) as i64;
        let total: f64 = (-kk..=kk).map(|k| factorized_pmf(k, l, s).unwrap()).sum();
        assert!(total >= 0.999);
    }

    use crate::kernels::{conv2d, dwconv3x3, gelu, linear};
    use crate::model::DcaeModel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn micro(slices: usize, m: usize) -> (ModelConfig, ParamStore<f64>) {
        let mut cfg = ModelConfig::tiny().into_custom("micro");
        cfg.autoencoder.y_channels = 4;
        cfg.autoencoder.z_channels = 2;
        cfg.slices.slice_count = slices;
        cfg.dca = DcaBlockConfig {
            enabled: true,
            dict_entries: 5,
            dict_channels: 6,
            msfa_layers: m,
            c_ms: 4,
            c_qk: 4,
            head_dim: 2,
            ffn_expansion: 2,
        };
        cfg.head_hidden = 5;
        let mut store = DcaeModel::new(cfg.clone(), 8).unwrap().params.cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (_, p) in store.iter_mut() {
            for v in p.value.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        (cfg, store)
    }

    fn rand_x(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn w<'a>(s: &'a ParamStore<f64>, name: &str) -> &'a Tensor<f64> {
        s.value(name).unwrap()
    }

    fn dense(s: &ParamStore<f64>, x: &Tensor<f64>, name: &str, bias: bool) -> Tensor<f64> {
        let b = bias.then(|| w(s, &format!("{name}.bias")));
        linear(x, w(s, &format!("{name}.weight")), b).unwrap()
    }

    fn head3_oracle(s: &ParamStore<f64>, x: &Tensor<f64>, p: &str) -> Tensor<f64> {
        let h = dense(s, x, &format!("{p}.0"), true).map(gelu);
        let h = dense(s, &h, &format!("{p}.1"), true).map(gelu);
        dense(s, &h, &format!("{p}.2"), true)
    }

    fn cat(parts: &[&Tensor<f64>]) -> Tensor<f64> {
        let [nb, _, h, wd] = parts[0].shape();
        let c: usize = parts.iter().map(|t| t.channels()).sum();
        let mut out = Vec::new();
        for b in 0..nb {
            for t in parts {
                let n = t.channels() * h * wd;
                out.extend_from_slice(&t.data()[b * n..(b + 1) * n]);
            }
        }
        Tensor::from_vec([nb, c, h, wd], out).unwrap()
    }

    fn sa_oracle(s: &ParamStore<f64>, x: &Tensor<f64>, p: &str) -> Tensor<f64> {
        let [nb, c, h, wd] = x.shape();
        let mut pooled = Tensor::zeros([nb, 2, h, wd]);
        for b in 0..nb {
            for y in 0..h {
                for xx in 0..wd {
                    let vals: Vec<f64> = (0..c).map(|ch| x.at(b, ch, y, xx)).collect();
                    let i0 = pooled.index(b, 0, y, xx);
                    let i1 = pooled.index(b, 1, y, xx);
                    pooled.data_mut()[i0] = vals.iter().sum::<f64>() / c as f64;
                    pooled.data_mut()[i1] = vals.iter().cloned().fold(f64::MIN, f64::max);
                }
            }
        }
        conv2d(&pooled, w(s, &format!("{p}.weight")), Some(w(s, &format!("{p}.bias"))), 1, 3)
            .unwrap()
            .map(sigmoid)
    }

    fn msfa_oracle(s: &ParamStore<f64>, x: &Tensor<f64>, p: &str, m: usize) -> Tensor<f64> {
        if m == 0 {
            return dense(s, x, &format!("{p}.proj"), true);
        }
        let mut feats = vec![x.clone()];
        for j in 1..m {
            let e = format!("{p}.econv.{j}");
            let h = linear(&feats[j - 1], w(s, &format!("{e}.w_in")), None).unwrap();
            let h = dwconv3x3(&h, w(s, &format!("{e}.dw.weight")), Some(w(s, &format!("{e}.dw.bias")))).unwrap();
            feats.push(linear(&h, w(s, &format!("{e}.w_out")), None).unwrap());
        }
        let merged = dense(s, &cat(&feats.iter().collect::<Vec<_>>()), &format!("{p}.merge"), true);
        let sa = sa_oracle(s, &merged, &format!("{p}.sa"));
        let [nb, c, h, wd] = merged.shape();
        Tensor::from_fn([nb, c, h, wd], |i| {
            let (b, rest) = (i / (c * h * wd), i % (h * wd));
            merged.data()[i] * sa.data()[b * h * wd + rest]
        })
    }

    /// Row-by-row attention over the dictionary, then the residual FFN.
    fn dca_oracle(s: &ParamStore<f64>, x: &Tensor<f64>, p: &str, d: &DcaBlockConfig) -> Tensor<f64> {
        let [nb, cms, h, wd] = x.shape();
        let dict = w(s, "dictionary");
        let (n, cd) = (d.dict_entries, d.dict_channels);
        let key = linear(dict, w(s, "dca.key.weight"), None).unwrap();
        let (wq, tau) = (w(s, &format!("{p}.query.weight")), w(s, &format!("{p}.tau")));
        let vd = cd / d.heads();
        let mut pre = Tensor::zeros([nb * h * wd, cd, 1, 1]);
        for r in 0..nb * h * wd {
            let (b, pix) = (r / (h * wd), r % (h * wd));
            let xr: Vec<f64> = (0..cms).map(|c| x.data()[(b * cms + c) * h * wd + pix]).collect();
            let q: Vec<f64> = (0..d.c_qk)
                .map(|o| (0..cms).map(|c| xr[c] * wq.data()[c * d.c_qk + o]).sum())
                .collect();
            for hd in 0..d.heads() {
                let t = tau.data()[hd].max(TAU_MIN);
                let logits: Vec<f64> = (0..n)
                    .map(|e| {
                        (0..d.head_dim)
                            .map(|j| q[hd * d.head_dim + j] * key.data()[e * d.c_qk + hd * d.head_dim + j])
                            .sum::<f64>()
                            / t
                    })
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for c in 0..vd {
                    let v: f64 = (0..n).map(|e| logits[e].exp() / z * dict.data()[e * cd + hd * vd + c]).sum();
                    pre.data_mut()[r * cd + hd * vd + c] = v;
                }
            }
        }
        let f = dense(s, &dense(s, &pre, &format!("{p}.ffn.0"), true).map(gelu), &format!("{p}.ffn.1"), true);
        Tensor::from_fn([nb, cd, h, wd], |i| {
            let (b, c, pix) = (i / (cd * h * wd), (i / (h * wd)) % cd, i % (h * wd));
            let r = b * h * wd + pix;
            pre.data()[r * cd + c] + f.data()[r * cd + c]
        })
    }

    fn close(a: &Tensor<f64>, b: &Tensor<f64>) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn msfa_matches_kernel_composition() {
        for m in [0, 1, 3] {
            let (cfg, store) = micro(2, m);
            let x = rand_x([2, context_channels(&cfg, 1), 3, 5], m as u64);
            let mut g = Graph::inference(&store);
            let xv = g.input(x.clone());
            let out = msfa_forward(&mut g, xv, "slice.1.msfa", &cfg.dca).unwrap();
            close(g.value(out), &msfa_oracle(&store, &x, "slice.1.msfa", m));
            if m > 0 {
                let sa = g.recorded("slice.1.msfa.sa").unwrap();
                assert!(sa.data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn spatial_attention_matches_oracle() {
        let (_, store) = micro(1, 3);
        let x = rand_x([2, 4, 6, 4], 3);
        let mut g = Graph::inference(&store);
        let xv = g.input(x.clone());
        let out = spatial_attention(&mut g, xv, "slice.0.msfa.sa").unwrap();
        close(g.value(out), &sa_oracle(&store, &x, "slice.0.msfa.sa"));
    }

    #[test]
    fn single_slice_matches_hand_wired_oracle() {
        let (cfg, store) = micro(1, 3);
        let fz = rand_x([1, 2 * cfg.autoencoder.y_channels, 4, 3], 5);
        let yhat = rand_x([1, cfg.slice_channels(), 4, 3], 6);
        let mut g = Graph::inference(&store);
        let fv = g.input(fz.clone());
        let sp = slice_params(&mut g, &cfg, 0, fv, &[]).unwrap();
        let yv = g.input(yhat.clone());
        let ybar = slice_lrp(&mut g, 0, &sp, yv).unwrap();

        let ms = msfa_oracle(&store, &fz, "slice.0.msfa", 3);
        let fd = dca_oracle(&store, &ms, "slice.0.dca", &cfg.dca);
        let ctx = cat(&[&fz, &fd]);
        let out = head3_oracle(&store, &ctx, "slice.0.entropy");
        let sc = cfg.slice_channels();
        let part = |t: &Tensor<f64>, from: usize| {
            let [_, _, h, wd] = t.shape();
            Tensor::from_fn([1, sc, h, wd], |i| t.data()[from * h * wd + i])
        };
        close(g.value(sp.mu), &part(&out, 0));
        close(g.value(sp.sigma), &part(&out, sc).map(|r| crate::kernels::softplus(r).max(SIGMA_MIN)));
        let r = head3_oracle(&store, &cat(&[&ctx, &yhat]), "slice.0.lrp");
        close(g.value(ybar), &yhat.zip_map(&r, |y, r| y + 0.5 * r.tanh()).unwrap());
    }

    #[test]
    fn constant_map_is_mid_grey() {
        assert_eq!(normalize_map(&[0.3; 5]), vec![128; 5]);
        assert_eq!(normalize_map(&[0.0, 0.5, 1.0]), vec![0, 128, 255]);
    }
}
