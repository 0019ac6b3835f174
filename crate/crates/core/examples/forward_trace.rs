//! Runs one multimodal sequence through a small model and prints what the
//! trace captured: per-block attention mass by modality and the output
//! norm of every projection in the first block.

use mmprune::eval::attention_by_modality;
use mmprune::model::{forward, CaptureFlags, LayerId, ProjKind};
use mmprune::synth::{ModalitySpec, Split, World, WorldConfig};

fn main() -> mmprune::Result<()> {
    let modalities = vec![
        ModalitySpec { name: "visual".into(), len: 12 },
        ModalitySpec { name: "audio".into(), len: 6 },
        ModalitySpec { name: "language".into(), len: 8 },
    ];
    let world = World::new(WorldConfig::new(32, modalities, 1))?;
    let model = mmprune::model::init_synthetic(32, 4, 64, 3, 1)?;
    let seq = world.sample(Split::Evaluation, 1, None)?.remove(0);

    let (hidden, trace) = forward(&model, &seq, CaptureFlags::all())?;
    println!("{} tokens in, hidden state {:?}", seq.len(), hidden.shape());

    for block in attention_by_modality(&trace)? {
        let masses: Vec<String> = block.masses.iter().map(|m| format!("{} {:.3}", m.modality, m.value)).collect();
        println!("block {} attention mass: {}", block.block, masses.join(", "));
    }
    for kind in ProjKind::ALL {
        let out = trace.output(LayerId::new(0, kind))?;
        println!("b0.{:<5} output {:?}  |Z|_F = {:.3}", kind.as_str(), out.shape(), out.frobenius_sq().sqrt());
    }
    Ok(())
}
