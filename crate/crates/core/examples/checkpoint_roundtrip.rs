//! Saves a pruned model, reloads it, and shows the directory layout and
//! the weights checksum staying fixed across a second save.

use mmprune::model::{load_checkpoint, save_checkpoint, weights_checksum};
use mmprune::pruner::{prune_model, Method, PruneConfig};
use mmprune::synth::ScenarioConfig;

fn main() -> mmprune::Result<()> {
    let mut cfg = ScenarioConfig::noisy_modality(3);
    cfg.calib_samples = 8;
    let sc = cfg.build()?;
    let (pruned, _) = prune_model(&sc.model, &sc.calib, &PruneConfig::new(Method::Wanda, 0.6))?;

    let dir = std::env::temp_dir().join("mmprune-checkpoint-example");
    save_checkpoint(&pruned, &dir)?;
    for entry in std::fs::read_dir(&dir).map_err(|e| mmprune::Error::io(&dir, e))? {
        let entry = entry.map_err(|e| mmprune::Error::io(&dir, e))?;
        let len = entry.metadata().map(|m| m.len()).unwrap_or(0);
        println!("{:<14} {len:>8} bytes", entry.file_name().to_string_lossy());
    }
    let back = load_checkpoint(&dir)?;
    println!("reloaded equal: {}", back == pruned);
    println!("checksum {} / {}", weights_checksum(&pruned), weights_checksum(&back));
    println!("zero fraction {:.4}", back.zero_fraction());
    Ok(())
}
