// Bjøntegaard delta rate between two RD curves given as `bpp,psnr` CSVs.
// Without arguments, compares two built-in curves.
//
// cargo run --example bd_rate -- [anchor.csv test.csv]

use dcae::metrics::{bd_rate, RdCurve};

const ANCHOR: &str = "bpp,psnr\n0.12,27.9\n0.25,30.4\n0.48,33.1\n0.90,35.8\n";
const TEST: &str = "bpp,psnr\n0.10,28.0\n0.21,30.6\n0.41,33.2\n0.80,36.0\n";

fn run(args: &[String]) -> dcae::Result<()> {
    let (a, t) = match args {
        [a, t, ..] => (std::fs::read_to_string(a)?, std::fs::read_to_string(t)?),
        _ => (ANCHOR.to_string(), TEST.to_string()),
    };
    let (a, t) = (RdCurve::from_csv(&a)?, RdCurve::from_csv(&t)?);
    let d = bd_rate(&a, &t)?;
    println!("BD-rate {d:+.2}%  (reverse {:+.2}%)", bd_rate(&t, &a)?);
    Ok(())
}

fn main() -> dcae::Result<()> {
    run(&std::env::args().skip(1).collect::<Vec<_>>())
}
