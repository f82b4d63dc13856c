// Train the tiny profile on periodic textures and save the archive.
//
// cargo run --release --example train_tiny -- [steps] [out.dcaem]

use dcae::container::{load_model, save_model};
use dcae::train::{synth_dataset, train, DatasetKind, TrainingConfig};
use dcae::DcaeModel;

fn run(args: &[String]) -> dcae::Result<()> {
    let steps = args.first().and_then(|a| a.parse().ok()).unwrap_or(200);
    let images = synth_dataset(DatasetKind::Periodic, 16, 64, 64, 5)?;
    let mut model = DcaeModel::tiny(5)?;
    let mut cfg = TrainingConfig::new(0.013, steps, 5);
    cfg.lr = 1e-3;
    cfg.lr_late = 1e-4;
    cfg.batch = 2;
    let hist = train(&mut model, &images, &cfg, &mut std::io::sink())?;
    let every = (steps / 10).max(1);
    for (i, l) in hist.iter().enumerate().filter(|(i, _)| i % every == 0 || i + 1 == steps) {
        println!("step {i:>4}  rate_y {:8.1}  rate_z {:6.1}  mse {:.5}  total {:9.2}", l.rate_y, l.rate_z, l.distortion, l.total);
    }
    let bytes = save_model(&model)?;
    assert_eq!(save_model(&load_model(&bytes)?)?, bytes);
    match args.get(1) {
        Some(path) => std::fs::write(path, &bytes)?,
        None => println!("archive: {} bytes", bytes.len()),
    }
    Ok(())
}

fn main() -> dcae::Result<()> {
    run(&std::env::args().skip(1).collect::<Vec<_>>())
}
