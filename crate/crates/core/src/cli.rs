//! `fremure` command line: gen-data, train, eval, ablate, diagnose.
//!
//! Every command writes a `manifest.json` next to its outputs and never
//! touches files outside its output directory. Exit codes: 0 success,
//! 1 validation, 2 I/O, 3 numerical abort.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::data::{
    generate_dataset, load_records, save_records, ClassCounts, RelationPriors, TripletRecord,
};
use crate::error::{Error, Result};
use crate::experiment::{
    conflict_trace, run_ablation, worker_threads, ExperimentConfig, Manifest, Variant,
};
use crate::heads::{HeadKind, UncertaintyReport};
use crate::metrics::{Constraint, MetricsReport, DEFAULT_KS};
use crate::model::{
    clip_batches, evaluate, history_csv, train, Checkpoint, ClipBatch, FReMuReModel,
    GradConflictReport, RELATIONS,
};

#[derive(Debug, Parser)]
#[command(
    name = "fremure",
    version,
    about = "Long-tail video relation models on synthetic scene graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train/test JSONL, priors and a manifest.
    GenData(Common),
    /// Train on <data>/train.jsonl, validating on <data>/test.jsonl.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArg,
        /// Split file stem inside the data directory.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
        k: Vec<usize>,
        #[arg(long, default_value_t = Constraint::No)]
        constraint: Constraint,
        /// Sampling seed; defaults to the checkpoint's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Train every variant over several seeds and tabulate test mR@K.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_delimiter = ',', default_values_t = Variant::DEFAULT)]
        variants: Vec<Variant>,
        #[arg(long, default_value_t = 5)]
        seeds_per_variant: usize,
    },
    /// Per-step gradient cosines between relation losses.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Start from this checkpoint instead of a fresh model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        /// Force the shared-generator layout.
        #[arg(long)]
        shared: bool,
    },
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DataArg {
    /// Directory holding train.jsonl / test.jsonl; defaults to the output
    /// directory (for eval, the checkpoint's directory).
    #[arg(long)]
    data: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        Ok(cfg)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(dir: &Path, name: &str, text: &str, manifest: &mut Manifest) -> Result<()> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    manifest.outputs.push(name.to_string());
    Ok(())
}

fn to_json<T: Serialize>(value: &T, what: &str) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Error::parse(what, e))
}

/// Label widths of a record set, checked against the expected counts.
fn check_classes(records: &[TripletRecord], expected: &ClassCounts, source: &Path) -> Result<()> {
    let Some(first) = records.first() else {
        return Err(Error::contract(format!(
            "{} holds no records",
            source.display()
        )));
    };
    let found = ClassCounts {
        attention: records
            .iter()
            .map(|r| r.attn + 1)
            .max()
            .unwrap_or(0)
            .max(expected.attention),
        spatial: first.spat.len(),
        contact: first.cont.len(),
    };
    if found != *expected {
        return Err(Error::contract(format!(
            "class-count mismatch: {} has {}/{}/{} (attention/spatial/contact), model expects {}/{}/{}",
            source.display(),
            found.attention,
            found.spatial,
            found.contact,
            expected.attention,
            expected.spatial,
            expected.contact
        )));
    }
    Ok(())
}

fn load_split(
    dir: &Path,
    split: &str,
    classes: &ClassCounts,
    feat_dim: usize,
) -> Result<(Vec<TripletRecord>, Vec<ClipBatch>)> {
    let path = dir.join(format!("{split}.jsonl"));
    let records = load_records(&path)?;
    check_classes(&records, classes, &path)?;
    let clips = clip_batches(&records, classes, feat_dim)?;
    Ok((records, clips))
}

fn gen_data(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let ds = generate_dataset(&cfg.data, cfg.seed)?;
    create_dir(&cfg.out)?;
    let mut manifest = Manifest::new("gen-data", &cfg);
    for (name, records) in [("train.jsonl", &ds.train), ("test.jsonl", &ds.test)] {
        let path = cfg.out.join(name);
        save_records(&path, records)?;
        manifest.outputs.push(name.into());
    }
    write(
        &cfg.out,
        "priors.json",
        &to_json(&ds.priors, "priors")?,
        &mut manifest,
    )?;
    manifest.write(&cfg.out)?;
    println!(
        "wrote {} train / {} test records to {}",
        ds.train.len(),
        ds.test.len(),
        cfg.out.display()
    );
    for (r, name) in RELATIONS.iter().enumerate() {
        let f = &ds.priors.get(r).f;
        let shown: Vec<String> = f.iter().map(|v| format!("{v:.3}")).collect();
        println!("{name:>9} frequencies: {}", shown.join(" "));
    }
    Ok(())
}

fn train_cmd(common: &Common, data: &DataArg) -> Result<()> {
    let cfg = common.resolve()?;
    let data_dir = data.data.clone().unwrap_or_else(|| cfg.out.clone());
    let (train_records, train_set) =
        load_split(&data_dir, "train", &cfg.data.classes, cfg.data.feat_dim)?;
    let (_, test_set) = load_split(&data_dir, "test", &cfg.data.classes, cfg.data.feat_dim)?;
    let priors = RelationPriors::from_records(&train_records, &cfg.data.classes);
    let mut model = FReMuReModel::new(cfg.model.clone(), priors, cfg.seed)?;
    let outcome = train(&mut model, &train_set, &test_set, &cfg.train, cfg.seed)?;
    create_dir(&cfg.out)?;
    let mut manifest = Manifest::new("train", &cfg);
    manifest
        .args
        .push(("data".into(), data_dir.display().to_string()));
    let ck = Checkpoint::capture(
        &model,
        &cfg.train,
        Some(&outcome.optimizer),
        cfg.train.epochs,
        cfg.seed,
    );
    let ck_path = cfg.out.join("checkpoint.json");
    ck.save(&ck_path)?;
    manifest.outputs.push("checkpoint.json".into());
    write(
        &cfg.out,
        "history.csv",
        &history_csv(&outcome.history),
        &mut manifest,
    )?;
    manifest.write(&cfg.out)?;
    let (report, _) = evaluate(&model, &test_set, &DEFAULT_KS, Constraint::No, cfg.seed)?;
    println!(
        "trained {} epochs; checkpoint at {}",
        cfg.train.epochs,
        ck_path.display()
    );
    print!("{}", report.to_csv());
    Ok(())
}

#[derive(Serialize)]
struct EvalDocument<'a> {
    report: &'a MetricsReport,
    /// Mean per-pair uncertainty by relation type, when the head models it.
    uncertainty: Option<Vec<(String, UncertaintyReport)>>,
}

fn eval_cmd(
    checkpoint: &Path,
    data: &DataArg,
    split: &str,
    ks: &[usize],
    constraint: Constraint,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let (model, _) = ck.restore()?;
    let data_dir = data.data.clone().unwrap_or_else(|| {
        checkpoint
            .parent()
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    });
    let (_, clips) = load_split(&data_dir, split, &model.cfg.classes, model.cfg.input_dim)?;
    let seed = seed.unwrap_or(ck.seed);
    let (report, preds) = evaluate(&model, &clips, ks, constraint, seed)?;

    let uncertainty = (model.cfg.flags.head == HeadKind::Bayesian).then(|| {
        let pairs: Vec<_> = preds.iter().flat_map(|p| &p.pairs).collect();
        let n = pairs.len() as f64;
        RELATIONS
            .iter()
            .map(|name| {
                let (a, e) = pairs.iter().fold((0.0, 0.0), |(a, e), p| {
                    let u = p.uncertainty[*name];
                    (a + u.aleatoric, e + u.epistemic)
                });
                (
                    name.to_string(),
                    UncertaintyReport {
                        aleatoric: a / n,
                        epistemic: e / n,
                    },
                )
            })
            .collect()
    });

    create_dir(out)?;
    let ck_text = std::fs::read_to_string(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
    let mut manifest = Manifest::from_text("eval", ck_text, seed);
    // the checkpoint is named in `args`; keep only its hash
    manifest.config.clear();
    manifest.args = vec![
        ("checkpoint".into(), checkpoint.display().to_string()),
        ("data".into(), data_dir.display().to_string()),
        ("split".into(), split.into()),
        (
            "k".into(),
            ks.iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        ),
        ("constraint".into(), constraint.to_string()),
    ];
    let doc = EvalDocument {
        report: &report,
        uncertainty,
    };
    write(
        out,
        "metrics.json",
        &to_json(&doc, "metrics")?,
        &mut manifest,
    )?;
    write(out, "metrics.csv", &report.to_csv(), &mut manifest)?;
    let mut lines = String::new();
    for p in preds.iter().flat_map(|p| &p.pairs) {
        lines.push_str(&serde_json::to_string(p).map_err(|e| Error::parse("predictions", e))?);
        lines.push('\n');
    }
    write(out, "predictions.jsonl", &lines, &mut manifest)?;
    manifest.write(out)?;
    print!("{}", report.to_csv());
    if let Some(u) = &doc.uncertainty {
        for (name, r) in u {
            println!(
                "{name:>9} uncertainty: aleatoric {:.4}  epistemic {:.4}",
                r.aleatoric, r.epistemic
            );
        }
    }
    Ok(())
}

fn ablate_cmd(common: &Common, data: &DataArg, variants: &[Variant], seeds: usize) -> Result<()> {
    let cfg = common.resolve()?;
    let data_dir = data.data.clone().unwrap_or_else(|| cfg.out.clone());
    let (train_records, train_set) =
        load_split(&data_dir, "train", &cfg.data.classes, cfg.data.feat_dim)?;
    let (_, test_set) = load_split(&data_dir, "test", &cfg.data.classes, cfg.data.feat_dim)?;
    let priors = RelationPriors::from_records(&train_records, &cfg.data.classes);
    let table = run_ablation(
        &cfg,
        &train_set,
        &test_set,
        &priors,
        variants,
        seeds,
        worker_threads(),
    )?;
    create_dir(&cfg.out)?;
    let mut manifest = Manifest::new("ablate", &cfg);
    manifest.args = vec![
        ("data".into(), data_dir.display().to_string()),
        (
            "variants".into(),
            variants
                .iter()
                .map(|v| v.name())
                .collect::<Vec<_>>()
                .join(","),
        ),
        ("seeds_per_variant".into(), seeds.to_string()),
    ];
    write(&cfg.out, "ablation.csv", &table.to_csv(), &mut manifest)?;
    write(
        &cfg.out,
        "ablation_runs.csv",
        &table.runs_csv(),
        &mut manifest,
    )?;
    for run in &table.runs {
        let name = format!("runs/{}_seed{}/history.csv", run.variant, run.seed);
        write(&cfg.out, &name, &history_csv(&run.history), &mut manifest)?;
    }
    manifest.write(&cfg.out)?;
    println!(
        "{:<16} {:>18} {:>18} {:>18}",
        "variant", "mR@10", "mR@20", "mR@50"
    );
    for &v in variants {
        let cells: Vec<String> = (0..3)
            .map(|at| {
                let s = table.summary(v, at);
                format!("{:.4} ± {:.4}", s.mean, s.std)
            })
            .collect();
        println!(
            "{:<16} {:>18} {:>18} {:>18}",
            v.name(),
            cells[0],
            cells[1],
            cells[2]
        );
    }
    Ok(())
}

fn diagnose_cmd(
    common: &Common,
    data: &DataArg,
    checkpoint: Option<&Path>,
    steps: usize,
    shared: bool,
) -> Result<()> {
    let mut cfg = common.resolve()?;
    let data_dir = data.data.clone().unwrap_or_else(|| cfg.out.clone());
    let ck = checkpoint.map(Checkpoint::load).transpose()?;
    if let Some(ck) = &ck {
        cfg.model = ck.config.clone();
        cfg.data.classes = ck.config.classes;
        cfg.data.feat_dim = ck.config.input_dim;
        cfg.train = ck.train;
        cfg.seed = common.seed.unwrap_or(ck.seed);
    }
    if shared {
        cfg.model.flags.decouple = false;
    }
    let seed = cfg.seed;
    let (train_records, clips) =
        load_split(&data_dir, "train", &cfg.model.classes, cfg.model.input_dim)?;
    let mut model = match &ck {
        Some(ck) if ck.config.flags.decouple == cfg.model.flags.decouple => ck.restore()?.0,
        _ => {
            let priors = RelationPriors::from_records(&train_records, &cfg.model.classes);
            FReMuReModel::new(cfg.model.clone(), priors, seed)?
        }
    };
    let trace = conflict_trace(&mut model, &clips, steps, &cfg.train, seed)?;
    create_dir(&cfg.out)?;
    let mut manifest = Manifest::new("diagnose", &cfg);
    manifest.args = vec![
        ("data".into(), data_dir.display().to_string()),
        ("steps".into(), steps.to_string()),
        ("shared".into(), shared.to_string()),
    ];
    if let Some(path) = checkpoint {
        manifest
            .args
            .push(("checkpoint".into(), path.display().to_string()));
    }
    #[derive(Serialize)]
    struct Line<'a> {
        step: usize,
        #[serde(flatten)]
        report: &'a GradConflictReport,
    }
    let mut lines = String::new();
    for (i, report) in trace.iter().enumerate() {
        let line = Line {
            step: i + 1,
            report,
        };
        lines.push_str(
            &serde_json::to_string(&line).map_err(|e| Error::parse("conflict report", e))?,
        );
        lines.push('\n');
    }
    write(&cfg.out, "conflict.jsonl", &lines, &mut manifest)?;
    manifest.write(&cfg.out)?;
    if trace.first().is_some_and(|r| r.shared_params == 0) {
        println!("decoupled model: no shared parameters, conflict not applicable");
        return Ok(());
    }
    println!(
        "{:>5} {:>10} {:>10} {:>10}",
        "step", "cos(a,s)", "cos(a,c)", "cos(s,c)"
    );
    for (i, r) in trace.iter().enumerate() {
        let c = r.cosines();
        println!("{:>5} {:>10.4} {:>10.4} {:>10.4}", i + 1, c[0], c[1], c[2]);
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(common) => gen_data(&common),
        Command::Train { common, data } => train_cmd(&common, &data),
        Command::Eval {
            checkpoint,
            data,
            split,
            k,
            constraint,
            seed,
            out,
        } => eval_cmd(&checkpoint, &data, &split, &k, constraint, seed, &out),
        Command::Ablate {
            common,
            data,
            variants,
            seeds_per_variant,
        } => ablate_cmd(&common, &data, &variants, seeds_per_variant),
        Command::Diagnose {
            common,
            data,
            checkpoint,
            steps,
            shared,
        } => diagnose_cmd(&common, &data, checkpoint.as_deref(), steps, shared),
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(Error::Config(keys)) => {
            eprintln!("error: invalid configuration");
            for k in &keys {
                eprintln!("  {k}");
            }
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
