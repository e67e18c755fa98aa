//! Gradient conflict between relation losses on a shared generator, and
//! its absence once every relation type owns its generator.

use fremure::data::{
    anti_correlated_records, RelationPriors, ANTI_CORRELATED_CLASSES, ANTI_CORRELATED_FEAT_DIM,
};
use fremure::experiment::conflict_trace;
use fremure::heads::HeadKind;
use fremure::model::{clip_batches, AblationFlags, FReMuReModel, ModelConfig, TrainConfig};

fn main() -> fremure::Result<()> {
    let classes = ANTI_CORRELATED_CLASSES;
    let records = anti_correlated_records(8, 2, 3, 21);
    let clips = clip_batches(&records, &classes, ANTI_CORRELATED_FEAT_DIM)?;
    let priors = RelationPriors::from_records(&records, &classes);

    for decouple in [false, true] {
        let cfg = ModelConfig {
            input_dim: ANTI_CORRELATED_FEAT_DIM,
            dim: 8,
            heads: 2,
            ffn: 8,
            classes,
            flags: AblationFlags {
                decouple,
                head: HeadKind::Linear,
                ..AblationFlags::default()
            },
            tie_head_init: true,
            ..ModelConfig::default()
        };
        let mut model = FReMuReModel::new(cfg, priors.clone(), 4)?;
        let trace = conflict_trace(&mut model, &clips, 5, &TrainConfig::default(), 4)?;
        println!("{}:", if decouple { "decoupled" } else { "shared" });
        if trace[0].shared_params == 0 {
            println!("  no shared parameters, conflict not applicable");
            continue;
        }
        for (step, r) in trace.iter().enumerate() {
            let c = r.cosines();
            println!(
                "  step {}  cos(a,s) {:>7.4}  cos(a,c) {:>7.4}  cos(s,c) {:>7.4}",
                step + 1,
                c[0],
                c[1],
                c[2]
            );
        }
    }
    Ok(())
}
