//! Prunes the noisy-modality scenario to 50% with the full method and
//! reports the per-layer plan and how far the outputs moved.

use mmprune::eval::reconstruction_report;
use mmprune::pruner::{prune_model, Method, PruneConfig};
use mmprune::synth::ScenarioConfig;

fn main() -> mmprune::Result<()> {
    let sc = ScenarioConfig::noisy_modality(0).build()?;
    let (pruned, report) = prune_model(&sc.model, &sc.calib, &PruneConfig::new(Method::Tamp, 0.5))?;

    println!("target {:.2}, achieved {:.4}", report.target, report.achieved);
    for l in report.layers.iter().filter(|l| l.layer.block == 0) {
        let sel = l.selection.as_ref().map(|s| format!("{}/{} tokens", s.tokens_selected, s.tokens_total));
        println!("{:<6} ratio {:.3}  {}", l.layer.to_string(), l.planned_ratio, sel.unwrap_or_default());
    }
    let m = reconstruction_report(&sc.model, &pruned, &sc.eval)?;
    println!("final error {:.4}, final cosine {:.4}", m.final_error, m.final_cosine);
    Ok(())
}
