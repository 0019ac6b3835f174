//! Picks a small set of tokens whose distribution matches the full
//! sequence, starting from the tokens the last query attends to most.

use mmprune::model::{forward, init_synthetic, CaptureFlags, LayerId, ProjKind};
use mmprune::selection::{amia_select, token_contributions, AmiaParams};
use mmprune::synth::{ModalitySpec, Split, World, WorldConfig};

fn main() -> mmprune::Result<()> {
    let modalities = vec![
        ModalitySpec { name: "visual".into(), len: 24 },
        ModalitySpec { name: "language".into(), len: 12 },
    ];
    let world = World::new(WorldConfig::new(32, modalities, 4))?;
    let model = init_synthetic(32, 4, 64, 2, 4)?;
    let seq = world.sample(Split::Calibration, 1, None)?.remove(0);
    let (_, trace) = forward(&model, &seq, CaptureFlags::all())?;

    let contrib = token_contributions(trace.attention(0)?)?;
    let z = trace.output(LayerId::new(0, ProjKind::V))?;
    for diversity in [0.0, 0.005, 0.02, 0.2] {
        let r = amia_select(&contrib.a, z, diversity, &AmiaParams::default())?;
        println!(
            "diversity {diversity:.3}: kept {:>2} of {} tokens ({:?}), final MMD {:.4}",
            r.selected.len(),
            seq.len(),
            r.stopped_by,
            r.mmd_trace.last().copied().unwrap_or(0.0)
        );
        println!("  first picks {:?}", &r.selected[..r.selected.len().min(8)]);
    }
    Ok(())
}
