//! Prints per-class mean accuracy of every variant over a list of target
//! imbalance ratios.
//!
//! cargo run --release --example ablation_table -- [config.json] [p1,p2,...]

use centroida::experiment::{load_config, mean_std, run_seed, ExperimentConfig};
use centroida::trainer::Variant;

fn main() -> centroida::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cfg = match args.first() {
        Some(path) if path != "-" => load_config(path)?,
        _ => ExperimentConfig::default(),
    };
    let ratios: Vec<f64> = match args.get(1) {
        Some(list) => list
            .split(',')
            .map(|p| p.parse().map_err(|_| centroida::Error::Config(format!("bad ratio `{p}`"))))
            .collect::<Result<_, _>>()?,
        None => vec![cfg.p_target],
    };
    println!("{:>8} {:>12} {:>8} {:>8}  seeds {:?}", "p_target", "variant", "mean", "std", cfg.seeds);
    for p in ratios {
        for variant in Variant::ALL {
            let mut c = cfg.clone();
            c.p_target = p;
            c.variant = variant;
            let accs = c
                .seeds
                .iter()
                .map(|&s| run_seed(&c, s).map(|o| o.report.mean_acc))
                .collect::<Result<Vec<_>, _>>()?;
            let (mean, std) = mean_std(&accs);
            println!("{p:>8} {:>12} {:>8.4} {:>8.4}", variant.as_str(), mean, std);
        }
    }
    Ok(())
}
