//! The full three-stage toy experiment with leakage analysis, shortened.
//!
//! cargo run --release --example experiment -- [out_dir]

use ssum::pipeline::{run_experiment, ExperimentConfig};

fn main() -> ssum::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "experiment_out".into());
    let mut cfg = ExperimentConfig::preset("toy")?;
    cfg.corpus.toy.n_train = 400;
    cfg.corpus.toy.n_external = 100;
    for s in &mut cfg.stages {
        s.max_epochs = 2;
    }
    let report = run_experiment(&cfg, out.as_ref(), &mut std::io::stderr())?;
    for s in &report.systems {
        println!(
            "{:<10} WER {:.3}  ROUGE-L {:.3}  METEOR {:.3}",
            s.system, s.scores.wer, s.scores.rouge_l.f1, s.scores.meteor
        );
    }
    if let Some(leak) = &report.leakage {
        for c in &leak.counts {
            println!("alpha {:.1}: {} kept", c.alpha, c.kept);
        }
    }
    Ok(())
}
