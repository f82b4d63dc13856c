// Code Gaussian samples with the shared scale tables and compare the coded
// size to the ideal information content.
//
// cargo run --release --example rans_roundtrip -- [count] [sigma]

use dcae::rans::{rans_decode, rans_encode, ScaleTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

fn run(args: &[String]) -> dcae::Result<()> {
    let count: usize = args.first().and_then(|a| a.parse().ok()).unwrap_or(100_000);
    let sigma: f64 = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(2.5);
    let st = ScaleTable::shared();
    let idx = st.index_for(sigma);
    let table = st.table(idx);
    let normal = Normal::new(0.0, st.scale(idx)).expect("positive scale");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let symbols: Vec<i32> = (0..count)
        .map(|_| normal.inverse_cdf(rng.gen_range(1e-12..1.0 - 1e-12)).round() as i32)
        .collect();
    let cdfs = vec![table; count];
    let bytes = rans_encode(&symbols, &cdfs)?;
    assert_eq!(rans_decode(&bytes, &cdfs, count)?, symbols);
    let ideal: f64 = symbols.iter().map(|&s| table.symbol_bits(s)).sum();
    println!(
        "{count} symbols at sigma {:.3}: {} bytes, ideal {:.0} bits, overhead {:.4}%",
        st.scale(idx),
        bytes.len(),
        ideal,
        (8.0 * bytes.len() as f64 / ideal - 1.0) * 100.0
    );
    Ok(())
}

fn main() -> dcae::Result<()> {
    run(&std::env::args().skip(1).collect::<Vec<_>>())
}
