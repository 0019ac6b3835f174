//! Turns per-layer diversity scores into per-layer sparsity ratios that
//! meet a global budget, and compares them with the uniform and outlier
//! based alternatives.

use mmprune::allocation::{allocate_blockwise_das, allocate_das, allocate_uniform, LayerScore};
use mmprune::model::{LayerId, ProjKind};

fn main() -> mmprune::Result<()> {
    // Two blocks; the second block's attention projections are the most diverse.
    let scores: Vec<LayerScore> = (0..2)
        .flat_map(|b| {
            ProjKind::ALL.into_iter().map(move |kind| LayerScore {
                layer: LayerId::new(b, kind),
                param_count: if kind.is_attention() { 1024 } else { 2048 },
                importance: 0.2 + 0.1 * kind.index() as f64 + if b == 1 && kind.is_attention() { 0.5 } else { 0.0 },
            })
        })
        .collect();
    let layers: Vec<(LayerId, usize)> = scores.iter().map(|s| (s.layer, s.param_count)).collect();

    for (name, plan) in [
        ("uniform", allocate_uniform(&layers, 0.5)?),
        ("das λ=0.1", allocate_das(&scores, 0.5, 0.1)?),
        ("das λ=0.3", allocate_das(&scores, 0.5, 0.3)?),
        ("block das", allocate_blockwise_das(&scores, 0.5, 0.1)?),
    ] {
        let ratios: Vec<String> = plan.entries.iter().map(|e| format!("{:.2}", e.ratio)).collect();
        println!("{name:<10} achieved {:.6}  [{}]", plan.achieved(), ratios.join(" "));
    }
    Ok(())
}
