//! The `dcae` command line: encode, decode, inspect, train, eval.
//!
//! Every command prints `key=value` lines on stdout. Failures print one
//! `error: ...` line on stderr and exit with
//! 2 (usage, unreadable input), 3 (format or corruption), 4 (numeric integrity).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::codec::{compress, decompress_container, LatentSymbols};
use crate::config::{lambda_index_of, ModelConfig, Profile, CUSTOM_LAMBDA_INDEX, LAMBDAS};
use crate::container::{load_model, read_container, save_model, write_container};
use crate::error::DcaeError;
use crate::image::{read_ppm, write_pgm, write_ppm};
use crate::metrics::{bd_rate, psnr, RdCurve};
use crate::model::DcaeModel;
use crate::train::{synth_dataset, train, DatasetKind, TrainingConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FORMAT: i32 = 3;
pub const EXIT_INTEGRITY: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "dcae", version, about = "Learned image codec with a dictionary cross-attention entropy model")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Compress a binary PPM into a container.
    Encode(EncodeArgs),
    /// Reconstruct a PPM from a container.
    Decode(DecodeArgs),
    /// Print container or model fields, optionally export attention maps.
    Inspect(InspectArgs),
    /// Train a model on a synthetic corpus and save the archive.
    Train(TrainArgs),
    /// BD-rate between two curves, or per-image rate and quality on a corpus.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Override the λ index recorded in the container.
    #[arg(long)]
    lambda_index: Option<u8>,
    /// Write the coded integer symbols as text (debug, format unstable).
    #[arg(long, hide = true)]
    dump_latent: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Original image; prints PSNR against it.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, hide = true)]
    dump_latent: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("what").required(true).args(["input", "model"]))]
struct InspectArgs {
    /// A container.
    #[arg(long)]
    input: Option<PathBuf>,
    /// A model archive.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Export the attention map of dictionary entry ENTRY for slice SLICE on IMAGE.
    #[arg(long, num_args = 3, value_names = ["IMAGE", "SLICE", "ENTRY"], requires = "model")]
    attn: Option<Vec<String>>,
    /// Where to write the attention PGM (default `attn_s<SLICE>_e<ENTRY>.pgm`).
    #[arg(long, requires = "attn")]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value = "tiny")]
    profile: String,
    #[arg(long)]
    lambda: f64,
    #[arg(long)]
    steps: usize,
    #[arg(long, env = "DCAE_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// periodic, noise or gradient.
    #[arg(long, default_value = "periodic")]
    corpus: String,
    #[arg(long, default_value_t = 16)]
    images: usize,
    /// Side length of the square training images.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Initial learning rate; drops tenfold for the last fifth of the steps.
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("mode").required(true).args(["curves", "corpus"]))]
struct EvalArgs {
    #[arg(long, num_args = 2, value_names = ["ANCHOR", "TEST"], requires = "bdrate")]
    curves: Option<Vec<PathBuf>>,
    #[arg(long)]
    bdrate: bool,
    /// Directory of `.ppm` images.
    #[arg(long, requires = "model")]
    corpus: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<DcaeError> for CliError {
    fn from(e: DcaeError) -> Self {
        let code = match &e {
            DcaeError::Integrity { .. } => EXIT_INTEGRITY,
            DcaeError::Input(_) | DcaeError::OutOfRange(_) | DcaeError::Io(_) => EXIT_USAGE,
            _ => EXIT_FORMAT,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::usage(e.to_string())
    }
}

type CliResult = std::result::Result<(), CliError>;

fn read(path: &Path) -> std::result::Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> CliResult {
    std::fs::write(path, bytes)
        .map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
}

/// Any archive that fails to load is a format error, whatever the cause.
fn load(path: &Path) -> std::result::Result<DcaeModel, CliError> {
    load_model(&read(path)?).map_err(|e| CliError {
        code: EXIT_FORMAT,
        message: format!("{}: {e}", path.display()),
    })
}

/// Parse and run; returns the process exit code.
pub fn run<I, A>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind::*;
            if matches!(e.kind(), DisplayHelp | DisplayVersion | DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = write!(out, "{}", e.render());
                return if e.kind() == DisplayHelpOnMissingArgumentOrSubcommand { EXIT_USAGE } else { EXIT_OK };
            }
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let usage = text.lines().find(|l| l.starts_with("Usage:")).unwrap_or("");
            let _ = writeln!(err, "{} ({})", first, usage.trim());
            return EXIT_USAGE;
        }
    };
    let res = match cli.cmd {
        Cmd::Encode(a) => encode(a, out),
        Cmd::Decode(a) => decode(a, out),
        Cmd::Inspect(a) => inspect(a, out),
        Cmd::Train(a) => train_cmd(a, out),
        Cmd::Eval(a) => eval(a, out),
    };
    match res {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message.replace('\n', " "));
            e.code
        }
    }
}

/// One line for `ẑ`, then one line per slice, integers separated by spaces.
pub fn format_latent(s: &LatentSymbols) -> String {
    let join = |v: &[i32]| v.iter().map(i32::to_string).collect::<Vec<_>>().join(" ");
    let mut t = format!("z {}\n", join(&s.z));
    for (i, k) in s.slices.iter().enumerate() {
        t.push_str(&format!("slice{i} {}\n", join(k)));
    }
    t
}

fn encode(a: EncodeArgs, out: &mut dyn Write) -> CliResult {
    let model = load(&a.model)?;
    let img = read_ppm(&read(&a.input)?)?;
    let enc = compress(&model, &img)?;
    let mut bytes = enc.bytes;
    if let Some(k) = a.lambda_index {
        if k as usize >= LAMBDAS.len() && k != CUSTOM_LAMBDA_INDEX {
            return Err(CliError::usage(format!(
                "--lambda-index {k} outside 0..{} (or {CUSTOM_LAMBDA_INDEX})",
                LAMBDAS.len()
            )));
        }
        let mut c = enc.container;
        c.lambda_index = k;
        bytes = write_container(&c)?;
    }
    write(&a.output, &bytes)?;
    if let Some(p) = &a.dump_latent {
        write(p, format_latent(&enc.symbols).as_bytes())?;
    }
    writeln!(out, "width={}", img.width)?;
    writeln!(out, "height={}", img.height)?;
    writeln!(out, "bytes={}", bytes.len())?;
    writeln!(out, "bpp={:.6}", crate::metrics::bpp(bytes.len(), img.width, img.height))?;
    for s in &enc.stats {
        writeln!(
            out,
            "stream={} symbols={} ideal_true_bits={:.2} ideal_bits={:.2} actual_bits={}",
            s.name, s.symbols, s.ideal_true, s.ideal_q, s.actual_bits
        )?;
    }
    Ok(())
}

fn decode(a: DecodeArgs, out: &mut dyn Write) -> CliResult {
    let model = load(&a.model)?;
    let c = read_container(&read(&a.input)?)?;
    let dec = decompress_container(&model, &c)?;
    write(&a.output, &write_ppm(&dec.image))?;
    if let Some(p) = &a.dump_latent {
        write(p, format_latent(&dec.symbols).as_bytes())?;
    }
    writeln!(out, "width={}", dec.image.width)?;
    writeln!(out, "height={}", dec.image.height)?;
    if let Some(r) = &a.reference {
        let reference = read_ppm(&read(r)?)?;
        writeln!(out, "psnr={:.4}", psnr(&reference, &dec.image)?)?;
    }
    Ok(())
}

/// `key=value` description of a model configuration.
pub fn describe_model(cfg: &ModelConfig) -> String {
    let ae = &cfg.autoencoder;
    let d = &cfg.dca;
    let lambda = LAMBDAS
        .get(cfg.lambda_index as usize)
        .map_or("custom".to_string(), |l| l.to_string());
    format!(
        "kind=model\nprofile={}\nlambda_index={}\nlambda={lambda}\ny_channels={}\nz_channels={}\n\
         downsample_y={}\ndownsample_z={}\nslices={}\ndca={}\nN={}\nC_d={}\nmsfa_layers={}\n\
         c_ms={}\nc_qk={}\nheads={}\n",
        ae.profile_name,
        cfg.lambda_index,
        ae.y_channels,
        ae.z_channels,
        ae.downsample_factor_y,
        ae.downsample_factor_z,
        cfg.slices.slice_count,
        if d.enabled { "on" } else { "off" },
        d.dict_entries,
        d.dict_channels,
        d.msfa_layers,
        d.c_ms,
        d.c_qk,
        d.heads(),
    )
}

fn inspect(a: InspectArgs, out: &mut dyn Write) -> CliResult {
    if let Some(p) = &a.input {
        let c = read_container(&read(p)?)?;
        writeln!(out, "kind=container")?;
        writeln!(out, "profile_id={}", c.profile_id)?;
        writeln!(out, "lambda_index={}", c.lambda_index)?;
        writeln!(out, "width={}", c.width)?;
        writeln!(out, "height={}", c.height)?;
        writeln!(out, "header_bytes={}", c.header_size())?;
        writeln!(out, "z_bytes={}", c.z_stream.len())?;
        writeln!(out, "slice_count={}", c.slice_streams.len())?;
        let lens: Vec<String> = c.slice_streams.iter().map(|s| s.len().to_string()).collect();
        writeln!(out, "slice_bytes={}", lens.join(","))?;
        writeln!(out, "total_bytes={}", c.total_size())?;
    }
    if let Some(p) = &a.model {
        let model = load(p)?;
        write!(out, "{}", describe_model(&model.config))?;
        writeln!(out, "parameters={}", model.params.numel())?;
        if let Some(attn) = &a.attn {
            let num = |s: &str, what: &str| {
                s.parse::<usize>()
                    .map_err(|_| CliError::usage(format!("--attn {what} `{s}` is not a non-negative integer")))
            };
            let (slice, entry) = (num(&attn[1], "slice")?, num(&attn[2], "entry")?);
            let cfg = &model.config;
            if slice >= cfg.slices.slice_count || entry >= cfg.dca.dict_entries {
                return Err(CliError::usage(format!(
                    "--attn slice {slice} / entry {entry} outside {} slices x {} entries",
                    cfg.slices.slice_count, cfg.dca.dict_entries
                )));
            }
            let img = read_ppm(&read(Path::new(&attn[0]))?)?;
            let (w, h, map) = crate::codec::attention_map(&model, &img, slice, entry)?;
            let path = a
                .output
                .clone()
                .unwrap_or_else(|| PathBuf::from(format!("attn_s{slice}_e{entry}.pgm")));
            write(&path, &write_pgm(w, h, &map)?)?;
            writeln!(out, "attn_map={}", path.display())?;
            writeln!(out, "attn_width={w}")?;
            writeln!(out, "attn_height={h}")?;
        }
    }
    Ok(())
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> CliResult {
    let profile = Profile::from_name(&a.profile).map_err(|e| CliError::usage(e.to_string()))?;
    if !(a.lambda > 0.0 && a.lambda.is_finite()) {
        return Err(CliError::usage(format!("--lambda must be positive, got {}", a.lambda)));
    }
    if a.steps == 0 || a.batch == 0 || a.images == 0 || a.size == 0 {
        return Err(CliError::usage("--steps, --batch, --images and --size must be positive"));
    }
    let kind = DatasetKind::from_name(&a.corpus).map_err(|e| CliError::usage(e.to_string()))?;
    let mut cfg = ModelConfig::for_profile(profile)?;
    cfg.lambda_index = lambda_index_of(a.lambda);
    let mut model = DcaeModel::new(cfg, a.seed)?;
    let images = synth_dataset(kind, a.images, a.size, a.size, a.seed)?;
    let mut tc = TrainingConfig::new(a.lambda, a.steps, a.seed);
    tc.batch = a.batch;
    if let Some(lr) = a.lr {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(CliError::usage(format!("--lr must be positive, got {lr}")));
        }
        tc.lr = lr;
        tc.lr_late = lr / 10.0;
    }
    let history = train(&mut model, &images, &tc, out)?;
    let bytes = save_model(&model)?;
    write(&a.out, &bytes)?;
    writeln!(out, "initial_total={:.4}", history[0].total)?;
    writeln!(out, "final_total={:.4}", history[history.len() - 1].total)?;
    writeln!(out, "archive={}", a.out.display())?;
    writeln!(out, "archive_bytes={}", bytes.len())?;
    Ok(())
}

/// `0.00%` for a zero difference, otherwise signed with two decimals.
pub fn format_percent(p: f64) -> String {
    if p.abs() < 0.005 {
        "0.00%".into()
    } else {
        format!("{p:+.2}%")
    }
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> CliResult {
    if let Some(curves) = &a.curves {
        let parse = |p: &Path| -> std::result::Result<RdCurve, CliError> {
            let text = String::from_utf8(read(p)?)
                .map_err(|_| CliError::usage(format!("{} is not UTF-8", p.display())))?;
            RdCurve::from_csv(&text).map_err(|e| CliError {
                code: EXIT_FORMAT,
                message: format!("{}: {e}", p.display()),
            })
        };
        let anchor = parse(&curves[0])?;
        let test = parse(&curves[1])?;
        writeln!(out, "bd_rate={}", format_percent(bd_rate(&anchor, &test)?))?;
        return Ok(());
    }
    let dir = a.corpus.as_ref().expect("clap enforces one mode");
    let model = load(a.model.as_ref().expect("clap enforces --model"))?;
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::usage(format!("cannot list {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::usage(format!("no .ppm images in {}", dir.display())));
    }
    let rows = paths
        .par_iter()
        .map(|p| -> std::result::Result<(f64, f64), CliError> {
            let img = read_ppm(&read(p)?)?;
            let enc = compress(&model, &img)?;
            let dec = crate::codec::decompress(&model, &enc.bytes)?;
            Ok((enc.bpp(), psnr(&img, &dec.image)?))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    for (p, (b, q)) in paths.iter().zip(&rows) {
        let name = p.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
        writeln!(out, "image={name} bpp={b:.6} psnr={q:.4}")?;
    }
    let n = rows.len() as f64;
    writeln!(out, "images={}", rows.len())?;
    writeln!(out, "mean_bpp={:.6}", rows.iter().map(|r| r.0).sum::<f64>() / n)?;
    writeln!(out, "mean_psnr={:.4}", rows.iter().map(|r| r.1).sum::<f64>() / n)?;
    Ok(())
}
