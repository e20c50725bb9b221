//! Finite-difference check of the analytic gradients on the tiny model.

use ssum::model::{gradcheck_suite, GradcheckOptions, ModelConfig};

fn main() -> ssum::Result<()> {
    for e in gradcheck_suite(&ModelConfig::tiny(), &[1, 2], GradcheckOptions::default())? {
        println!(
            "{:?}/{:?} seed {}: {} entries, max relative error {:.2e} at {}[{}]",
            e.positional_mode, e.norm_mode, e.seed, e.report.checked, e.report.max_rel_err, e.report.worst.0, e.report.worst.1
        );
    }
    Ok(())
}
