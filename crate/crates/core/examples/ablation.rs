// Entropy-model ablation on the periodic corpus: baseline vs DCA (m = 0, 3).
//
// cargo run --release --example ablation -- [seeds] [steps] [pretrain_steps]

use dcae::train::{ablation_rates, AblationArm, AblationSettings};

fn run(args: &[String]) -> dcae::Result<()> {
    let num = |i: usize| args.get(i).and_then(|a| a.parse::<usize>().ok());
    let seeds = num(0).unwrap_or(1) as u64;
    let mut settings = AblationSettings::default();
    if let Some(steps) = num(1) {
        settings.steps = steps;
    }
    if let Some(steps) = num(2) {
        settings.pretrain_steps = steps;
    }
    let arms = [AblationArm::BASELINE, AblationArm::DCA_M0, AblationArm::DCA_M3];
    for seed in 0..seeds {
        let rates = ablation_rates(&arms, seed, &settings)?;
        let cols: Vec<String> = arms
            .iter()
            .zip(&rates)
            .map(|(a, r)| format!("{}={r:.2}", a.name()))
            .collect();
        println!("seed={seed} {}", cols.join(" "));
    }
    Ok(())
}

fn main() -> dcae::Result<()> {
    run(&std::env::args().skip(1).collect::<Vec<_>>())
}
