//! Every method at three sparsities on the noisy-modality scenario.

use mmprune::eval::{reconstruction_report, rel_avg};
use mmprune::pruner::{prune_model, Method, PruneConfig};
use mmprune::synth::ScenarioConfig;

fn main() -> mmprune::Result<()> {
    let sc = ScenarioConfig::noisy_modality(1).build()?;
    println!("{:<10} {:>5} {:>9} {:>9} {:>8}", "method", "p", "achieved", "final err", "rel avg");
    for p in [0.3, 0.5, 0.7] {
        for method in Method::ALL {
            let calib = if method == Method::Magnitude { &[][..] } else { &sc.calib[..] };
            let (pruned, report) = prune_model(&sc.model, calib, &PruneConfig::new(method, p))?;
            let m = reconstruction_report(&sc.model, &pruned, &sc.eval)?;
            println!(
                "{:<10} {p:>5.1} {:>9.4} {:>9.4} {:>8.2}",
                method.as_str(),
                report.achieved,
                m.final_error,
                rel_avg(&m.task_scores())?
            );
        }
    }
    Ok(())
}
