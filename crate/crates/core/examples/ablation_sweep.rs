//! A reduced ablation sweep over every variant. Pass `full` to run the
//! default dataset with five seeds (several minutes on one core).

use fremure::data::generate_dataset;
use fremure::experiment::{run_ablation, worker_threads, ExperimentConfig, Variant};
use fremure::model::clip_batches;

fn main() -> fremure::Result<()> {
    let full = std::env::args().any(|a| a == "full");
    let mut cfg = ExperimentConfig::default();
    let seeds = if full { 5 } else { 2 };
    if !full {
        cfg.data.train_clips = 30;
        cfg.data.test_clips = 10;
        cfg.train.epochs = 3;
        cfg.model.dim = 32;
        cfg.model.ffn = 64;
    }
    let ds = generate_dataset(&cfg.data, cfg.seed)?;
    let train = clip_batches(&ds.train, &cfg.data.classes, cfg.data.feat_dim)?;
    let test = clip_batches(&ds.test, &cfg.data.classes, cfg.data.feat_dim)?;
    let variants: Vec<Variant> = Variant::DEFAULT
        .into_iter()
        .chain([Variant::FullLinear])
        .collect();
    let table = run_ablation(
        &cfg,
        &train,
        &test,
        &ds.priors,
        &variants,
        seeds,
        worker_threads(),
    )?;
    print!("{}", table.to_csv());
    println!();
    for v in &variants {
        let s = table.summary(*v, 0);
        println!("{:<16} mR@10 {:.4} ± {:.4}", v.name(), s.mean, s.stderr);
    }
    Ok(())
}
