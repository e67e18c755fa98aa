//! Train the full model on a small synthetic set, evaluate it, and round
//! trip the checkpoint.

use fremure::data::{generate_dataset, SyntheticConfig};
use fremure::metrics::{Constraint, DEFAULT_KS};
use fremure::model::{
    clip_batches, evaluate, history_csv, train, Checkpoint, FReMuReModel, ModelConfig, TrainConfig,
};

fn main() -> fremure::Result<()> {
    let data = SyntheticConfig {
        train_clips: 30,
        test_clips: 10,
        ..SyntheticConfig::default()
    };
    let ds = generate_dataset(&data, 0)?;
    let train_set = clip_batches(&ds.train, &data.classes, data.feat_dim)?;
    let test_set = clip_batches(&ds.test, &data.classes, data.feat_dim)?;

    let cfg = ModelConfig {
        input_dim: data.feat_dim,
        classes: data.classes,
        dim: 32,
        ffn: 64,
        ..ModelConfig::default()
    };
    let mut model = FReMuReModel::new(cfg, ds.priors.clone(), 0)?;
    let tc = TrainConfig {
        epochs: 4,
        ..TrainConfig::default()
    };
    let outcome = train(&mut model, &train_set, &test_set, &tc, 0)?;
    print!("{}", history_csv(&outcome.history));

    let (report, _) = evaluate(&model, &test_set, &DEFAULT_KS, Constraint::With, 0)?;
    println!("\nwith constraint:");
    print!("{}", report.to_csv());

    let ck = Checkpoint::capture(&model, &tc, Some(&outcome.optimizer), tc.epochs, 0);
    let (restored, _) = Checkpoint::from_json(&ck.to_json()?)?.restore()?;
    let (again, _) = evaluate(&restored, &test_set, &DEFAULT_KS, Constraint::With, 0)?;
    println!(
        "\nrestored checkpoint reproduces the report: {}",
        again == report
    );
    println!(
        "min mixture variance {:.4}",
        model.min_mixture_variance().unwrap_or(f64::NAN)
    );
    Ok(())
}
