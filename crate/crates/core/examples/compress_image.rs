// Compress a synthetic image with an untrained tiny model, decode it, and
// print per-stream rates.
//
// cargo run --release --example compress_image -- [width] [height] [seed]

use dcae::metrics::psnr;
use dcae::train::{synth_dataset, DatasetKind};
use dcae::{compress, decompress, DcaeModel};

fn run(args: &[String]) -> dcae::Result<()> {
    let num = |i: usize, d: usize| args.get(i).and_then(|a| a.parse().ok()).unwrap_or(d);
    let (w, h, seed) = (num(0, 96), num(1, 72), num(2, 1) as u64);
    let model = DcaeModel::tiny(seed)?;
    let img = synth_dataset(DatasetKind::Gradient, 1, w, h, seed)?.remove(0);
    let enc = compress(&model, &img)?;
    for s in &enc.stats {
        println!(
            "{:>8} symbols={:<5} ideal={:9.1} coded={:6}",
            s.name, s.symbols, s.ideal_q, s.actual_bits
        );
    }
    let dec = decompress(&model, &enc.bytes)?;
    assert_eq!(dec.symbols, enc.symbols);
    println!(
        "{w}x{h}: {} bytes, {:.4} bpp, psnr {:.2} dB",
        enc.bytes.len(),
        enc.bpp(),
        psnr(&img, &dec.image)?
    );
    Ok(())
}

fn main() -> dcae::Result<()> {
    run(&std::env::args().skip(1).collect::<Vec<_>>())
}
