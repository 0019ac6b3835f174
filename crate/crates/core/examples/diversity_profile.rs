//! Output-token diversity of every layer over a calibration set, split into
//! intra- and inter-modality terms.

use mmprune::diversity::{ImportanceMode, PairSampling};
use mmprune::pruner::calibration_diversity;
use mmprune::synth::ScenarioConfig;

fn main() -> mmprune::Result<()> {
    let mut cfg = ScenarioConfig::noisy_modality(0);
    cfg.calib_samples = 16;
    let sc = cfg.build()?;

    let stats = calibration_diversity(&sc.model, &sc.calib, ImportanceMode::ModalityAware, PairSampling::Exhaustive)?;
    println!("{:<8} {:>10} {:>9}  terms", "layer", "importance", "all-token");
    for (id, s) in &stats {
        let intra: Vec<String> = s.intra.iter().map(|t| format!("{}={:.3}", t.modality, t.value)).collect();
        let inter: Vec<String> = s.inter.iter().map(|t| format!("{}|{}={:.3}", t.a, t.b, t.value)).collect();
        println!(
            "{:<8} {:>10.4} {:>9.4}  {} {}",
            id.to_string(),
            s.importance,
            s.all_token.unwrap_or(f64::NAN),
            intra.join(" "),
            inter.join(" ")
        );
    }
    Ok(())
}
