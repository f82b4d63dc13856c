//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the report reads top to bottom;
//! the process exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use dcae::codec::{compress, decompress, slice_distributions};
use dcae::config::{AutoencoderConfig, DcaBlockConfig, ModelConfig, SliceConfig};
use dcae::container::{load_model, read_container, save_model, write_container, Container};
use dcae::entropy::{context_channels, dca_forward, entropy_params, lrp, msfa_forward};
use dcae::gradcheck::{grad_check, GradCheckOptions};
use dcae::graph::{Graph, Var};
use dcae::metrics::{bd_rate, bpp, psnr, RdCurve};
use dcae::rans::{rans_decode, rans_encode, QuantizedCdf};
use dcae::train::{
    ablation_rates, rd_terms, synth_dataset, train, AblationArm, AblationSettings, DatasetKind,
    QuantMode, TrainingConfig,
};
use dcae::transforms::{coding_mean, quantize_latent};
use dcae::{DcaeModel, Image, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_image(rng: &mut ChaCha8Rng) -> Image {
    let (w, h) = (rng.gen_range(17..97), rng.gen_range(17..97));
    let kind = [DatasetKind::Periodic, DatasetKind::Noise, DatasetKind::Gradient][rng.gen_range(0..3)];
    synth_dataset(kind, 1, w, h, rng.gen()).unwrap().remove(0)
}

/// Shared corpus for the roundtrip and rate criteria.
struct Corpus {
    cases: Vec<(DcaeModel, Image)>,
}

fn corpus() -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cases = (0..50)
        .map(|s| (DcaeModel::tiny(1000 + s).unwrap(), random_image(&mut rng)))
        .collect();
    Corpus { cases }
}

fn roundtrip(c: &Corpus) -> Outcome {
    let t = Instant::now();
    let mut ok = 0;
    for (i, (model, img)) in c.cases.iter().enumerate() {
        let enc = compress(model, img).map_err(e2s)?;
        let parsed = read_container(&enc.bytes).map_err(|e| format!("case {i}: {e}"))?;
        ensure(write_container(&parsed).map_err(e2s)? == enc.bytes, || {
            format!("case {i}: container does not re-serialise identically")
        })?;
        let dec = decompress(model, &enc.bytes).map_err(|e| format!("case {i}: {e}"))?;
        let same_yhat = dec.yhat.len() == enc.yhat.len()
            && dec.yhat.iter().zip(&enc.yhat).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            });
        ensure(same_yhat && dec.symbols == enc.symbols, || {
            format!("case {i}: decoded latents differ")
        })?;
        ensure((dec.image.width, dec.image.height) == (img.width, img.height), || {
            format!("case {i}: decoded size differs")
        })?;
        ok += 1;
    }
    let dt = t.elapsed();
    ensure(dt < Duration::from_secs(60), || format!("took {dt:.1?}"))?;
    Ok(format!("{ok}/50 bit-exact in {dt:.1?}"))
}

fn rate_fidelity(c: &Corpus) -> Outcome {
    let (mut streams, mut worst_gap, mut worst_table) = (0, 0.0f64, f64::NEG_INFINITY);
    for (i, (model, img)) in c.cases.iter().enumerate() {
        let enc = compress(model, img).map_err(e2s)?;
        for st in &enc.stats {
            let actual = st.actual_bits as f64;
            ensure(actual >= st.ideal_q - 1e-6 && actual <= st.ideal_q + 48.0, || {
                format!(
                    "case {i} stream {}: actual {actual} vs ideal_q {:.2}",
                    st.name, st.ideal_q
                )
            })?;
            let excess = st.ideal_q - st.ideal_true - 0.01 * st.symbols as f64;
            ensure(excess <= 0.0, || {
                format!(
                    "case {i} stream {}: ideal_q {:.2} ideal_true {:.2} symbols {}",
                    st.name, st.ideal_q, st.ideal_true, st.symbols
                )
            })?;
            worst_gap = worst_gap.max(actual - st.ideal_q);
            worst_table = worst_table.max((st.ideal_q - st.ideal_true) / st.symbols.max(1) as f64);
            streams += 1;
        }
    }
    Ok(format!(
        "{streams} streams; max actual-ideal_q {worst_gap:.1} bits; max table loss {worst_table:.5} bits/symbol"
    ))
}

fn random_table(rng: &mut ChaCha8Rng) -> QuantizedCdf {
    let n = rng.gen_range(1..40);
    let mut pmf: Vec<f64> = (0..n + 2).map(|_| rng.gen::<f64>().powi(3) + 1e-9).collect();
    pmf[0] *= 0.01;
    pmf[n + 1] *= 0.01;
    let s: f64 = pmf.iter().sum();
    pmf.iter_mut().for_each(|p| *p /= s);
    QuantizedCdf::from_pmf(rng.gen_range(-20..5), &pmf).unwrap()
}

fn coder_fuzz() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut corrupted, mut detected, mut silent, mut garbled) = (0usize, 0usize, 0usize, 0usize);
    for case in 0..1000 {
        let tables: Vec<QuantizedCdf> = (0..rng.gen_range(1..6)).map(|_| random_table(&mut rng)).collect();
        let n = rng.gen_range(1..400);
        let refs: Vec<&QuantizedCdf> = (0..n).map(|_| &tables[rng.gen_range(0..tables.len())]).collect();
        let symbols: Vec<i32> = refs
            .iter()
            .map(|t| {
                if rng.gen_bool(0.03) {
                    rng.gen_range(-5000..5000)
                } else {
                    rng.gen_range(t.min_symbol()..=t.max_symbol())
                }
            })
            .collect();
        let stream = rans_encode(&symbols, &refs).map_err(e2s)?;
        ensure(rans_decode(&stream, &refs, n).map_err(e2s)? == symbols, || {
            format!("case {case}: roundtrip mismatch")
        })?;
        for wrong in [n - 1, n + 1] {
            let r: Vec<&QuantizedCdf> = (0..wrong).map(|i| refs[i.min(n - 1)]).collect();
            if rans_decode(&stream, &r, wrong).is_ok() {
                silent += 1;
            }
        }
        let at = rng.gen_range(0..stream.len());
        let mut bad = stream.clone();
        bad[at] ^= rng.gen_range(1..=255u8);
        corrupted += 1;
        match rans_decode(&bad, &refs, n) {
            Err(_) => detected += 1,
            Ok(v) => garbled += (v != symbols) as usize,
        }
    }
    let rate = detected as f64 / corrupted as f64;
    ensure(rate >= 0.99 && silent == 0, || {
        format!("detected {detected}/{corrupted}, silent wrong-length successes {silent}")
    })?;
    Ok(format!(
        "1000 roundtrips; {detected}/{corrupted} corruptions detected ({garbled} undetected with changed output); {silent} wrong-length successes"
    ))
}

fn quantization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 1_000_000;
    let mut y = Vec::with_capacity(n);
    let mut mu = Vec::with_capacity(n);
    let mut tie_k = Vec::with_capacity(n);
    for i in 0..n {
        let grid = i % 2 == 0;
        let m: f32 = if grid {
            rng.gen_range(-40_960i32..40_960) as f32 / 1024.0
        } else {
            rng.gen_range(-40.0f32..40.0)
        };
        if i % 5 == 0 {
            // Exact half-integer offset from the coding mean.
            let mt = (m as f64 * 1024.0).round() / 1024.0;
            let j = rng.gen_range(-200i32..200);
            let t = j as f64 + 0.5;
            y.push((mt + t) as f32);
            tie_k.push(Some(if t > 0.0 { j + 1 } else { j }));
        } else {
            y.push(rng.gen_range(-300.0f32..300.0));
            tie_k.push(None);
        }
        mu.push(m);
    }
    let yt = Tensor::from_vec([1, 1, 1000, 1000], y).map_err(e2s)?;
    let mt = Tensor::from_vec([1, 1, 1000, 1000], mu).map_err(e2s)?;
    let (yhat, k) = quantize_latent(&yt, &mt).map_err(e2s)?;
    let snapped = coding_mean(&mt);
    let (mut ties, mut max_err) = (0, 0.0f32);
    for i in 0..n {
        let (yv, yh, m) = (yt.data()[i], yhat.data()[i], snapped.data()[i]);
        ensure(yh - m == k[i] as f32, || format!("sample {i}: {yh} - {m} is not {}", k[i]))?;
        if i % 2 == 0 {
            let raw = mt.data()[i];
            ensure(m == raw && (yh - raw).fract() == 0.0, || {
                format!("sample {i}: grid mean {raw} moved")
            })?;
        }
        max_err = max_err.max((yv - yh).abs());
        if let Some(want) = tie_k[i] {
            ensure(k[i] == want, || format!("tie {i}: y {yv} mean {m} gave {} want {want}", k[i]))?;
            ties += 1;
        }
    }
    ensure(max_err <= 0.5 + 1e-6, || format!("max |y - yhat| = {max_err}"))?;
    Ok(format!("{n} samples, {ties} exact ties, max |y-yhat| {max_err}"))
}

/// A model small enough for exhaustive finite differences.
fn micro_config(entries: usize) -> ModelConfig {
    let mut cfg = ModelConfig::tiny().into_custom("micro");
    cfg.autoencoder = AutoencoderConfig {
        y_channels: 4,
        z_channels: 2,
        stage_channels: vec![3],
        downsample_factor_y: 4,
        downsample_factor_z: 2,
        profile_name: "micro".into(),
    };
    cfg.slices = SliceConfig { slice_count: 2 };
    cfg.dca = DcaBlockConfig {
        enabled: true,
        dict_entries: entries,
        dict_channels: 4,
        msfa_layers: 3,
        c_ms: 4,
        c_qk: 4,
        head_dim: 2,
        ffn_expansion: 2,
    };
    cfg.head_hidden = 5;
    cfg
}

fn rand_t(rng: &mut ChaCha8Rng, shape: [usize; 4], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// `Σ w ⊙ out` with a fixed random `w`, so every output coordinate matters.
fn project(g: &mut Graph<'_, f64>, out: Var, seed: u64) -> dcae::Result<Var> {
    let shape = g.value(out).shape();
    let w = rand_t(&mut ChaCha8Rng::seed_from_u64(seed), shape, 1.0);
    let wv = g.input(w);
    let p = g.mul(out, wv)?;
    Ok(g.sum(p))
}

type Fragment = Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> dcae::Result<Var>>;

fn kernel_cases() -> Vec<(&'static str, Vec<Tensor<f64>>, Fragment)> {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let x = rand_t(&mut rng, [2, 3, 5, 4], 1.0);
    let pos = Tensor::from_fn([2, 3, 5, 4], |_| rng.gen_range(0.2..2.0));
    let cw = rand_t(&mut rng, [4, 3, 3, 3], 0.5);
    let cb = rand_t(&mut rng, [4, 1, 1, 1], 0.5);
    let tw = rand_t(&mut rng, [3, 2, 5, 5], 0.5);
    let tb = rand_t(&mut rng, [2, 1, 1, 1], 0.5);
    let dw = rand_t(&mut rng, [3, 1, 3, 3], 0.5);
    let db = rand_t(&mut rng, [3, 1, 1, 1], 0.5);
    let lw = rand_t(&mut rng, [3, 5, 1, 1], 0.5);
    let lb = rand_t(&mut rng, [5, 1, 1, 1], 0.5);
    let a = rand_t(&mut rng, [6, 4, 1, 1], 1.0);
    let b = rand_t(&mut rng, [5, 4, 1, 1], 1.0);
    let c = rand_t(&mut rng, [4, 3, 1, 1], 1.0);
    let map = rand_t(&mut rng, [2, 1, 5, 4], 1.0);
    let s = Tensor::from_vec([1, 1, 1, 1], vec![0.7]).unwrap();
    let x2 = rand_t(&mut rng, [2, 3, 5, 4], 1.0);
    let sigma = Tensor::from_fn([2, 3, 5, 4], |_| rng.gen_range(0.3..3.0));
    let z = rand_t(&mut rng, [1, 3, 2, 2], 3.0);
    let loc = rand_t(&mut rng, [3, 1, 1, 1], 1.0);
    let ls = rand_t(&mut rng, [3, 1, 1, 1], 0.5);

    macro_rules! case {
        ($name:expr, [$($t:expr),*], |$g:ident, $v:ident| $body:expr) => {
            ($name, vec![$($t.clone()),*], Box::new(move |$g: &mut Graph<'_, f64>, $v: &[Var]| {
                let out = $body?;
                project($g, out, 7)
            }) as Fragment)
        };
    }
    let ok = |v: Var| -> dcae::Result<Var> { Ok(v) };
    vec![
        case!("conv2d s1", [x, cw, cb], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
        case!("conv2d s2", [x, cw, cb], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1)),
        case!("conv2d_transpose", [x, tw, tb], |g, v| g.conv2d_transpose(v[0], v[1], Some(v[2]), 2, 2)),
        case!("dwconv3x3", [x, dw, db], |g, v| g.dwconv3x3(v[0], v[1], Some(v[2]))),
        case!("linear", [x, lw, lb], |g, v| g.linear(v[0], v[1], Some(v[2]))),
        case!("matmul", [a, c], |g, v| g.matmul(v[0], v[1])),
        case!("matmul_nt", [a, b], |g, v| g.matmul_nt(v[0], v[1])),
        case!("softmax", [a], |g, v| ok(g.softmax(v[0]))),
        case!("rows", [x], |g, v| {
            let r = g.to_rows(v[0]);
            let r = g.tanh(r);
            g.from_rows(r, 2, 5, 4)
        }),
        case!("slice/concat", [x, x2], |g, v| {
            let s = g.slice_channels(v[0], 1, 2)?;
            g.concat_channels(&[v[1], s])
        }),
        case!("channel_mean", [x], |g, v| ok(g.channel_mean(v[0]))),
        case!("channel_max", [x], |g, v| ok(g.channel_max(v[0]))),
        case!("gelu", [x], |g, v| ok(g.gelu(v[0]))),
        case!("sigmoid", [x], |g, v| ok(g.sigmoid(v[0]))),
        case!("tanh", [x], |g, v| ok(g.tanh(v[0]))),
        case!("softplus", [x], |g, v| ok(g.softplus(v[0]))),
        case!("clamp_min", [x], |g, v| ok(g.clamp_min(v[0], 0.05))),
        case!("clamp", [x], |g, v| ok(g.clamp(v[0], -0.45, 0.55))),
        case!("scale/add_scalar", [x], |g, v| {
            let s = g.scale(v[0], -1.7);
            ok(g.add_scalar(s, 0.3))
        }),
        case!("add_const", [x], |g, v| g.add_const(v[0], &Tensor::full([2, 3, 5, 4], 0.25))),
        case!("add/sub/mul", [x, x2], |g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(v[0], v[1])?;
            g.mul(s, d)
        }),
        case!("mul_map", [x, map], |g, v| g.mul_map(v[0], v[1])),
        case!("div_scalar", [x, s], |g, v| g.div_scalar(v[0], v[1])),
        case!("mse", [x, x2], |g, v| g.mse(v[0], v[1])),
        case!("gaussian_bits", [x, sigma], |g, v| g.gaussian_bits(v[0], v[1])),
        case!("logistic_bits", [z, loc, ls], |g, v| g.logistic_bits(v[0], v[1], v[2])),
        case!("softplus of positive", [pos], |g, v| ok(g.softplus(v[0]))),
    ]
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let tol = 1e-5;
    let mut lines = Vec::new();
    let mut check = |name: &str, store: &ParamStore<f64>, inputs: &[Tensor<f64>], opts: &GradCheckOptions, f: &dyn Fn(&mut Graph<'_, f64>, &[Var]) -> dcae::Result<Var>| -> Result<(), String> {
        let r = grad_check(store, inputs, opts, f).map_err(|e| format!("{name}: {e}"))?;
        ensure(r.max_rel_err <= tol && r.coords_checked > 0, || {
            format!("{name}: rel err {:.2e} at {}", r.max_rel_err, r.worst)
        })?;
        lines.push(format!("{name} {:.1e}", r.max_rel_err));
        Ok(())
    };

    let empty = ParamStore::<f64>::new();
    for (name, inputs, f) in kernel_cases() {
        check(name, &empty, &inputs, &GradCheckOptions::default(), &*f)?;
    }

    let cfg = micro_config(3);
    let model = DcaeModel::new(cfg.clone(), 9).map_err(e2s)?;
    let mut store: ParamStore<f64> = model.params.cast();
    // Random weights everywhere, including the zero-initialised residual head.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (_, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let sub = |prefixes: &[&str]| GradCheckOptions {
        param_prefixes: Some(prefixes.iter().map(|s| s.to_string()).collect()),
        ..GradCheckOptions::default()
    };
    let d = cfg.dca;
    let cin = context_channels(&cfg, 1);
    let xin = rand_t(&mut rng, [1, cin, 3, 3], 1.0);
    check("msfa", &store, &[xin.clone()], &sub(&["slice.1.msfa"]), &|g, v| {
        let o = msfa_forward(g, v[0], "slice.1.msfa", &d)?;
        project(g, o, 1)
    })?;
    let xms = rand_t(&mut rng, [1, d.c_ms, 3, 3], 1.0);
    check("dca", &store, &[xms], &sub(&["slice.1.dca", "dictionary", "dca.key"]), &|g, v| {
        let o = dca_forward(g, v[0], "slice.1.dca", &d)?;
        project(g, o, 2)
    })?;
    let ctx = rand_t(&mut rng, [1, cin + d.dict_channels, 3, 3], 1.0);
    let sc = cfg.slice_channels();
    check("f_E", &store, &[ctx.clone()], &sub(&["slice.1.entropy"]), &|g, v| {
        let (mu, sigma) = entropy_params(g, v[0], "slice.1.entropy", sc)?;
        let both = g.concat_channels(&[mu, sigma])?;
        project(g, both, 3)
    })?;
    let yh = rand_t(&mut rng, [1, sc, 3, 3], 2.0);
    check("f_LRP", &store, &[ctx, yh], &sub(&["slice.1.lrp"]), &|g, v| {
        let o = lrp(g, v[0], v[1], "slice.1.lrp")?;
        project(g, o, 4)
    })?;

    let img = Tensor::from_fn([1, 3, 8, 8], |_| rng.gen_range(0.05..0.95));
    let full = GradCheckOptions {
        max_coords_per_tensor: Some(6),
        ..GradCheckOptions::default()
    };
    let c2 = cfg.clone();
    check("rd_loss", &store, &[img], &full, &|g, v| {
        Ok(rd_terms(g, &c2, v[0], 0.013, QuantMode::Noisy, 77)?.total)
    })?;

    let dt = t.elapsed();
    ensure(dt < Duration::from_secs(120), || format!("took {dt:.1?}"))?;
    Ok(format!("{} checks within {tol:e} in {dt:.1?}", lines.len()))
}

fn attention() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut rows = 0usize;
    for entries in [1usize, 3, 7] {
        let cfg = micro_config(entries);
        let model = DcaeModel::new(cfg.clone(), 60 + entries as u64).map_err(e2s)?;
        let d = cfg.dca;
        let dict = model.dictionary().unwrap().clone();
        let x = Tensor::from_fn([2, d.c_ms, 4, 5], |_| rng.gen_range(-3.0f32..3.0));
        let mut g = Graph::inference(&model.params);
        let xv = g.input(x);
        dca_forward(&mut g, xv, "slice.0.dca", &d).map_err(e2s)?;
        for h in 0..d.heads() {
            let a = g.recorded(&format!("slice.0.dca.attn.{h}")).unwrap();
            let [n_rows, n, _, _] = a.shape();
            for r in 0..n_rows {
                let row = &a.data()[r * n..(r + 1) * n];
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                ensure((s - 1.0).abs() <= 1e-5, || format!("N={entries} head {h} row {r} sums to {s}"))?;
                if entries == 1 {
                    ensure(row[0] == 1.0, || format!("N=1 weight {}", row[0]))?;
                }
                rows += 1;
            }
        }
        let pre = g.recorded("slice.0.dca.pre_ffn").unwrap();
        let [n_rows, cd, _, _] = pre.shape();
        for c in 0..cd {
            let col = (0..entries).map(|e| dict.data()[e * cd + c]);
            let (lo, hi) = col.fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
            let slack = 1e-6 * (1.0 + lo.abs().max(hi.abs()));
            for r in 0..n_rows {
                let v = pre.data()[r * cd + c];
                if entries == 1 {
                    ensure(v == lo, || format!("N=1 pre-FFN {v} != dictionary {lo}"))?;
                }
                ensure(v >= lo - slack && v <= hi + slack, || {
                    format!("N={entries} coord {c} row {r}: {v} outside [{lo}, {hi}]")
                })?;
            }
        }
    }
    Ok(format!("{rows} softmax rows; envelope holds for N in 1, 3, 7; N=1 exact"))
}

fn causality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut compared = 0;
    for seed in 0..3u64 {
        let model = DcaeModel::tiny(70 + seed).map_err(e2s)?;
        let img = random_image(&mut rng);
        let enc = compress(&model, &img).map_err(e2s)?;
        let ae = &model.config.autoencoder;
        let s = ae.s_total();
        let (zw, zh) = (img.width.div_ceil(s), img.height.div_ceil(s));
        let zhat = Tensor::from_vec(
            [1, ae.z_channels, zh, zw],
            enc.symbols.z.iter().map(|&v| v as f32).collect(),
        )
        .map_err(e2s)?;
        let base = slice_distributions(&model, &zhat, &enc.symbols.slices).map_err(e2s)?;
        let slices = base.len();
        for j in 0..slices {
            let mut syms = enc.symbols.slices.clone();
            for v in syms[j].iter_mut() {
                *v += rng.gen_range(-3..=3);
            }
            syms[j][0] += 5;
            let moved = slice_distributions(&model, &zhat, &syms).map_err(e2s)?;
            for i in 0..slices {
                let same = |a: &Tensor, b: &Tensor| {
                    a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
                };
                let identical = same(&base[i].0, &moved[i].0) && same(&base[i].1, &moved[i].1);
                if i <= j {
                    ensure(identical, || format!("seed {seed}: slice {j} changed (mu, sigma) of slice {i}"))?;
                    compared += 1;
                } else if i == j + 1 {
                    ensure(!identical, || format!("seed {seed}: slice {i} ignores slice {j}"))?;
                }
            }
        }
    }
    Ok(format!("{compared} earlier-slice parameter sets bit-identical under perturbation"))
}

fn dictionary_sharing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = random_image(&mut rng);
    let mut sizes = Vec::new();
    for n in [1usize, 8, 32, 128] {
        let mut cfg = ModelConfig::tiny().into_custom("n");
        cfg.dca.dict_entries = n;
        let model = DcaeModel::new(cfg, 80).map_err(e2s)?;
        let enc = compress(&model, &img).map_err(e2s)?;
        let payload: usize = enc.container.z_stream.len()
            + enc.container.slice_streams.iter().map(Vec::len).sum::<usize>();
        let overhead = enc.bytes.len() - payload;
        ensure(overhead == enc.container.header_size(), || {
            format!("N={n}: {overhead} non-stream bytes, header is {}", enc.container.header_size())
        })?;
        sizes.push(overhead);
        // Same symbol streams written under a different N: byte count unchanged.
        let swapped = write_container(&enc.container).map_err(e2s)?;
        ensure(swapped.len() == enc.bytes.len(), || "container size depends on model".into())?;
    }
    ensure(sizes.windows(2).all(|w| w[0] == w[1]), || format!("header sizes {sizes:?}"))?;

    let model = DcaeModel::tiny(81).map_err(e2s)?;
    let enc = compress(&model, &img).map_err(e2s)?;
    let archive = save_model(&model).map_err(e2s)?;
    // Flip the sign bit of every stored dictionary value, in place.
    let name_at = archive.windows(12).position(|w| w == b"\x0a\x00dictionary").unwrap();
    let rank_at = name_at + 12;
    let rank = archive[rank_at] as usize;
    let start = rank_at + 1 + 4 * rank;
    let numel = model.dictionary().unwrap().numel();
    let mut raw = archive.clone();
    for v in 0..numel {
        raw[start + 4 * v + 3] ^= 0x80;
    }
    let other = load_model(&raw).map_err(e2s)?;
    ensure(other.dictionary() != model.dictionary(), || "tamper missed the dictionary".into())?;
    let broken = match decompress(&other, &enc.bytes) {
        Err(_) => true,
        Ok(dec) => dec.yhat != enc.yhat,
    };
    ensure(broken, || "decode ignored the dictionary".into())?;
    Ok(format!("header {} bytes for N in 1..128, zero dictionary bytes; tampering breaks decode", sizes[0]))
}

fn ablation() -> Outcome {
    let t = Instant::now();
    let arms = [AblationArm::BASELINE, AblationArm::DCA_M0, AblationArm::DCA_M3];
    let settings = AblationSettings::default();
    let (mut dca_wins, mut msfa_wins) = (0, 0);
    let mut detail = Vec::new();
    for seed in 0..5u64 {
        let r = ablation_rates(&arms, seed, &settings).map_err(e2s)?;
        dca_wins += (r[1] < r[0]) as usize;
        msfa_wins += (r[2] <= r[1]) as usize;
        detail.push(format!("[{:.1} {:.1} {:.1}]", r[0], r[1], r[2]));
    }
    let dt = t.elapsed();
    let summary = format!(
        "dca<baseline {dca_wins}/5, m3<=m0 {msfa_wins}/5 in {dt:.0?}; bits/image {}",
        detail.join(" ")
    );
    ensure(dca_wins >= 4 && msfa_wins >= 3 && dt < Duration::from_secs(600), || summary.clone())?;
    Ok(summary)
}

/// Independent BD oracle: normal-equation cubic fit, trapezoid integral.
fn bd_oracle(anchor: &[(f64, f64)], test: &[(f64, f64)]) -> f64 {
    fn fit(pts: &[(f64, f64)]) -> impl Fn(f64) -> f64 {
        let m = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        let mut ata = [[0.0f64; 5]; 4];
        for &(r, q) in pts {
            let t = q - m;
            let row = [1.0, t, t * t, t * t * t];
            for i in 0..4 {
                for j in 0..4 {
                    ata[i][j] += row[i] * row[j];
                }
                ata[i][4] += row[i] * r.ln();
            }
        }
        for col in 0..4 {
            let piv = (col..4).max_by(|&a, &b| ata[a][col].abs().total_cmp(&ata[b][col].abs())).unwrap();
            ata.swap(col, piv);
            for r in 0..4 {
                if r != col {
                    let f = ata[r][col] / ata[col][col];
                    for c in col..5 {
                        ata[r][c] -= f * ata[col][c];
                    }
                }
            }
        }
        let coef: Vec<f64> = (0..4).map(|i| ata[i][4] / ata[i][i]).collect();
        move |q: f64| {
            let t = q - m;
            coef[0] + t * (coef[1] + t * (coef[2] + t * coef[3]))
        }
    }
    let range = |p: &[(f64, f64)]| {
        let qs = p.iter().map(|x| x.1);
        (qs.clone().fold(f64::INFINITY, f64::min), qs.fold(f64::NEG_INFINITY, f64::max))
    };
    let ((a0, a1), (t0, t1)) = (range(anchor), range(test));
    let (lo, hi) = (a0.max(t0), a1.min(t1));
    let (fa, ft) = (fit(anchor), fit(test));
    let n = 100_000;
    let h = (hi - lo) / n as f64;
    let mut acc = 0.0;
    for i in 0..=n {
        let q = lo + i as f64 * h;
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        acc += w * (ft(q) - fa(q));
    }
    ((acc * h / (hi - lo)).exp() - 1.0) * 100.0
}

fn metrics() -> Outcome {
    let black = Image::filled(16, 16, [0, 0, 0]).unwrap();
    let white = Image::filled(16, 16, [255, 255, 255]).unwrap();
    ensure(psnr(&black, &black).map_err(e2s)? == 99.0, || "identical images".into())?;
    ensure(psnr(&black, &white).map_err(e2s)? == 0.0, || "black vs white".into())?;
    ensure(bpp(1000, 100, 80) == 1.0, || "bpp".into())?;

    let base = RdCurve::new(vec![(0.12, 29.1), (0.25, 31.4), (0.5, 33.9), (0.9, 36.2)]).map_err(e2s)?;
    let double = RdCurve::new(base.points().iter().map(|&(r, q)| (2.0 * r, q)).collect()).map_err(e2s)?;
    ensure(bd_rate(&base, &base).map_err(e2s)? == 0.0, || "identical curves".into())?;
    let d = bd_rate(&base, &double).map_err(e2s)?;
    ensure((d - 100.0).abs() <= 1e-9, || format!("ratio-2 curves gave {d}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let curve = |rng: &mut ChaCha8Rng| {
            let n = rng.gen_range(4..8);
            let (a, b, c) = (rng.gen_range(-3.0..-1.0), rng.gen_range(0.1..0.3), rng.gen_range(-0.004..0.004));
            let q0 = rng.gen_range(26.0..30.0);
            (0..n)
                .map(|k| {
                    let q = q0 + k as f64 * rng.gen_range(1.5..3.0);
                    let t = q - 30.0;
                    ((a + b * t + c * t * t).exp(), q)
                })
                .collect::<Vec<_>>()
        };
        let (pa, pt) = (curve(&mut rng), curve(&mut rng));
        let (ca, ct) = (RdCurve::new(pa.clone()), RdCurve::new(pt.clone()));
        let (Ok(ca), Ok(ct)) = (ca, ct) else {
            return Err(format!("pair {i}: generated curve rejected"));
        };
        let got = match bd_rate(&ca, &ct) {
            Ok(v) => v,
            Err(e) => return Err(format!("pair {i}: {e}")),
        };
        let want = bd_oracle(&pa, &pt);
        let rel = (got - want).abs() / want.abs().max(1.0);
        worst = worst.max(rel);
        ensure(rel <= 1e-3, || format!("pair {i}: bd_rate {got} oracle {want}"))?;
    }
    Ok(format!("closed forms exact; 100 random pairs within {:.1e} of the oracle", worst))
}

fn format_stability() -> Outcome {
    for seed in [0u64, 1, 2] {
        let m = DcaeModel::tiny(seed).map_err(e2s)?;
        let a = save_model(&m).map_err(e2s)?;
        let b = save_model(&load_model(&a).map_err(e2s)?).map_err(e2s)?;
        ensure(a == b, || format!("seed {seed}: archive changed after load"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..100 {
        let stream = |rng: &mut ChaCha8Rng| -> Vec<u8> {
            let n = rng.gen_range(0..200);
            (0..n).map(|_| rng.gen()).collect()
        };
        let c = Container {
            profile_id: rng.gen_range(0..3),
            lambda_index: rng.gen(),
            width: rng.gen_range(1..5000),
            height: rng.gen_range(1..5000),
            z_stream: stream(&mut rng),
            slice_streams: (0..rng.gen_range(1..11)).map(|_| stream(&mut rng)).collect(),
        };
        let bytes = write_container(&c).map_err(e2s)?;
        let back = read_container(&bytes).map_err(|e| format!("instance {i}: {e}"))?;
        ensure(back == c && write_container(&back).map_err(e2s)? == bytes, || {
            format!("instance {i}: read/write not inverse")
        })?;
        ensure(bytes.len() == c.total_size(), || format!("instance {i}: size mismatch"))?;
    }
    Ok("archive save/load/save identical; 100 containers roundtrip".into())
}

fn determinism() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = DcaeModel::tiny(120).map_err(e2s)?;
    let img = random_image(&mut rng);
    let a = compress(&model, &img).map_err(e2s)?.bytes;
    let b = compress(&model, &img).map_err(e2s)?.bytes;
    ensure(a == b, || "encodes differ".into())?;
    let images = synth_dataset(DatasetKind::Periodic, 8, 64, 64, 5).map_err(e2s)?;
    let run = || -> Result<Vec<u8>, String> {
        let mut m = DcaeModel::tiny(5).map_err(e2s)?;
        let cfg = TrainingConfig::new(0.013, 6, 5);
        train(&mut m, &images, &cfg, &mut std::io::sink()).map_err(e2s)?;
        save_model(&m).map_err(e2s)
    };
    let (x, y) = (run()?, run()?);
    ensure(x == y, || "training runs differ".into())?;
    Ok(format!("container {} bytes and archive {} bytes reproduced exactly", a.len(), x.len()))
}

fn main() {
    let corpus = corpus();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("lossless roundtrip", Box::new(|| roundtrip(&corpus))),
        ("rate-estimate fidelity", Box::new(|| rate_fidelity(&corpus))),
        ("coder fuzz", Box::new(coder_fuzz)),
        ("quantization invariants", Box::new(quantization)),
        ("gradient checks", Box::new(gradients)),
        ("attention properties", Box::new(attention)),
        ("causality", Box::new(causality)),
        ("dictionary sharing", Box::new(dictionary_sharing)),
        ("directional ablation", Box::new(ablation)),
        ("metrics", Box::new(metrics)),
        ("format stability", Box::new(format_stability)),
        ("determinism", Box::new(determinism)),
    ];
    let only: Option<usize> = std::env::var("DCAE_CRITERION").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let t = Instant::now();
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
            .unwrap_or_else(|_| Err("panicked".into()));
        match r {
            Ok(msg) => println!("PASS {n:>2} {name}: {msg} [{:.1?}]", t.elapsed()),
            Err(msg) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {msg} [{:.1?}]", t.elapsed());
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
