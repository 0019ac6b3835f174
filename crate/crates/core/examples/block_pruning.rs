//! Removes whole blocks by input/output similarity and by diversity, then
//! measures the end-to-end change.

use mmprune::diversity::{ImportanceMode, PairSampling};
use mmprune::eval::end_to_end_report;
use mmprune::pruner::{block_prune, das_block_importance, shortgpt_block_importance};
use mmprune::synth::ScenarioConfig;

fn main() -> mmprune::Result<()> {
    let mut cfg = ScenarioConfig::noisy_modality(2);
    cfg.model.n_blocks = 8;
    cfg.model.redundant_blocks = vec![2, 5];
    cfg.calib_samples = 16;
    let sc = cfg.build()?;

    let by_similarity = shortgpt_block_importance(&sc.model, &sc.calib)?;
    let by_diversity = das_block_importance(&sc.model, &sc.calib, ImportanceMode::ModalityAware, PairSampling::Exhaustive)?;
    for (name, scores) in [("similarity", by_similarity), ("diversity", by_diversity)] {
        let (reduced, report) = block_prune(&sc.model, &scores, 0.25)?;
        let m = end_to_end_report(&sc.model, &reduced, &sc.eval)?;
        let shown: Vec<String> = scores.iter().map(|s| format!("{s:.3}")).collect();
        println!("{name:<10} scores [{}]", shown.join(" "));
        println!("{:<10} removed {:?}, final error {:.4}", "", report.removed, m.final_error);
    }
    Ok(())
}
