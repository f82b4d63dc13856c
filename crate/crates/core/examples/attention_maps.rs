// Write the attention of every slice to one dictionary entry as PGM files.
//
// cargo run --release --example attention_maps -- [entry] [outdir]

use dcae::codec::attention_map;
use dcae::image::write_pgm;
use dcae::train::{synth_dataset, DatasetKind};
use dcae::DcaeModel;

fn run(args: &[String]) -> dcae::Result<()> {
    let entry = args.first().and_then(|a| a.parse().ok()).unwrap_or(0);
    let model = DcaeModel::tiny(3)?;
    let img = synth_dataset(DatasetKind::Periodic, 1, 128, 96, 3)?.remove(0);
    for slice in 0..model.config.slices.slice_count {
        let (w, h, map) = attention_map(&model, &img, slice, entry)?;
        let mean = map.iter().map(|&v| v as f64).sum::<f64>() / map.len() as f64;
        let peak = map.iter().max().copied().unwrap_or(0);
        println!("slice {slice}: {w}x{h} mean {mean:.1} peak {peak}");
        if let Some(dir) = args.get(1) {
            let path = std::path::Path::new(dir).join(format!("attn_s{slice}_e{entry}.pgm"));
            std::fs::write(path, write_pgm(w, h, &map)?)?;
        }
    }
    Ok(())
}

fn main() -> dcae::Result<()> {
    run(&std::env::args().skip(1).collect::<Vec<_>>())
}
