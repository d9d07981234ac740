//! `fusionnet` command-line entry point.
//!
//! Exit codes: 0 ok, 1 verification failure, 2 input error, 3 checkpoint
//! error. Errors go to stderr as a single `error code=<n> kind=<kind>: <msg>`
//! line. Log verbosity comes from `FUSIONNET_LOG` (default `warn`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fusionnet::checkpoint::Checkpoint;
use fusionnet::config::ExperimentConfig;
use fusionnet::data::{
    count_directory, split_seed, synth_dataset, write_dataset, Image, LabeledDataset, SynthSpec,
    SPLITS,
};
use fusionnet::gradcheck::{broken_fixture, run_cases, suite, Scope};
use fusionnet::metrics::evaluate;
use fusionnet::train::{fit_with, Control};
use fusionnet::{build_ensemble, EnsembleModel, Error};

const EVAL_BATCH: usize = 32;
const CHECKPOINT: &str = "model.elck";
const RESOLVED: &str = "config.resolved.json";

#[derive(Parser)]
#[command(
    name = "fusionnet",
    version,
    about = "Three-branch ensemble image classifier"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write checkpoint, curves, resolved config and val metrics.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Dataset root; replaces the config's data source.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Evaluate a checkpoint and write the confusion matrix.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Resolved config; defaults to the one next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
        /// Where the confusion CSV goes; defaults to the checkpoint's directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Classify one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        image: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(default_value = "all", value_parser = ["ops", "layers", "backbones", "ensemble", "all"])]
        scope: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        json: bool,
        /// Adds a case with a deliberately wrong backward rule.
        #[arg(long, hide = true)]
        broken_fixture: bool,
    },
    /// Per-split class counts of a dataset directory.
    DatasetStats {
        root: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Write a synthetic two-class dataset as PGM files.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        train_per_class: usize,
        #[arg(long, default_value_t = 8)]
        val_per_class: usize,
        #[arg(long, default_value_t = 16)]
        test_per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Failure carrying its exit code.
struct Failure {
    code: u8,
    kind: &'static str,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Checkpoint(_) => (3, "checkpoint"),
            Error::DatasetRootNotFound(_) => (2, "dataset_root_not_found"),
            Error::Config(_) => (2, "config"),
            Error::Ingest(_) => (2, "ingest"),
            Error::Io(_) => (2, "io"),
            Error::Json(_) => (2, "json"),
            Error::Dimension { .. } => (2, "dimension"),
            Error::Contract { .. } => (2, "contract"),
            Error::Numeric { .. } => (1, "numeric"),
        };
        Failure {
            code,
            kind,
            msg: e.to_string(),
        }
    }
}

fn verification(msg: String) -> Failure {
    Failure {
        code: 1,
        kind: "verification",
        msg,
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("FUSIONNET_LOG", "warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = f.msg.replace('\n', " ");
            eprintln!("error code={} kind={}: {msg}", f.code, f.kind);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Train {
            config,
            seed,
            output,
            data,
            epochs,
            lr,
            batch_size,
        } => {
            let mut cfg = match config {
                Some(path) => ExperimentConfig::load(&path)?,
                None => ExperimentConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(out) = output {
                cfg.output_dir = out;
            }
            if let Some(root) = data {
                cfg.data.root = Some(root);
            }
            if let Some(n) = epochs {
                cfg.train.max_epochs = n;
            }
            if let Some(lr) = lr {
                cfg.train.learning_rate = lr;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            train(&cfg.resolve()?)
        }
        Command::Eval {
            checkpoint,
            config,
            data,
            split,
            output,
        } => {
            let (mut cfg, mut model) = load_model(&checkpoint, config.as_deref())?;
            if let Some(root) = data {
                cfg.data.root = Some(root);
            }
            let out = output.unwrap_or_else(|| parent_dir(&checkpoint));
            eval(&cfg, &mut model, &split, &out)
        }
        Command::Predict {
            checkpoint,
            config,
            image,
        } => {
            let (cfg, mut model) = load_model(&checkpoint, config.as_deref())?;
            let names = class_names(&checkpoint)?;
            predict(&cfg, &mut model, &names, &image)
        }
        Command::Gradcheck {
            scope,
            seed,
            json,
            broken_fixture: broken,
        } => gradcheck(scope.parse()?, seed, json, broken),
        Command::DatasetStats { root, json } => dataset_stats(&root, json),
        Command::Synth {
            out,
            train_per_class,
            val_per_class,
            test_per_class,
            size,
            seed,
        } => {
            for (i, (split, n)) in SPLITS
                .iter()
                .zip([train_per_class, val_per_class, test_per_class])
                .enumerate()
            {
                let spec = SynthSpec {
                    n_per_class: n,
                    size,
                    seed: split_seed(seed, i),
                };
                write_dataset(&synth_dataset(&spec, split)?, &out)?;
            }
            println!("wrote synthetic dataset to {}", out.display());
            Ok(())
        }
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    std::fs::write(path, contents).map_err(|e| Failure {
        code: 2,
        kind: "io",
        msg: format!("cannot write {}: {e}", path.display()),
    })
}

fn train(cfg: &ExperimentConfig) -> Outcome {
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(Error::from)?;
    write(&out.join(RESOLVED), cfg.to_json()?)?;
    let data = cfg.load_datasets()?;
    for r in &data.reports {
        println!("{} counts {:?}", r.split, r.counts);
    }
    let ens = cfg.ensemble()?;
    let mut model = build_ensemble(&ens)?;
    let record = fit_with(&mut model, &data.train, &data.val, &cfg.train, |_, s| {
        println!(
            "epoch {:>3} train_loss {:.6} train_acc {:.4} val_loss {:.6} val_acc {:.4}",
            s.epoch, s.train_loss, s.train_accuracy, s.val_loss, s.val_accuracy
        );
        Ok(Control::Continue)
    })?;
    write(&out.join("curves.csv"), record.curve_csv())?;

    let metadata = serde_json::json!({
        "best_epoch": record.best_epoch,
        "stopped_epoch": record.stopped_epoch,
        "early_stopped": record.early_stopped,
        "seed": cfg.seed,
        "class_names": data.train.class_names(),
    });
    Checkpoint::from_module(&model, &ens.fingerprint(), metadata).save(&out.join(CHECKPOINT))?;

    let (cm, report) = evaluate(&mut model, &data.val, EVAL_BATCH)?;
    write(&out.join("metrics_val.json"), report.to_json()?)?;
    write(
        &out.join("confusion_val.csv"),
        cm.to_csv(data.val.class_names()),
    )?;
    println!(
        "best epoch {} of {}",
        record.best_epoch, record.stopped_epoch
    );
    println!("val accuracy {:.6}", report.accuracy);
    let (_, train_report) = evaluate(&mut model, &data.train, EVAL_BATCH)?;
    println!("train accuracy {:.6}", train_report.accuracy);
    println!("wrote {}", out.display());
    Ok(())
}

/// Resolved config and the checkpoint's weights in a freshly built model.
fn load_model(
    checkpoint: &Path,
    config: Option<&Path>,
) -> Outcome<(ExperimentConfig, EnsembleModel)> {
    let path = config.map_or_else(|| parent_dir(checkpoint).join(RESOLVED), Path::to_path_buf);
    let cfg = ExperimentConfig::load(&path)?.resolve()?;
    let ens = cfg.ensemble()?;
    let mut model = build_ensemble(&ens)?;
    Checkpoint::load(checkpoint)?.apply(&mut model, &ens.fingerprint())?;
    Ok((cfg, model))
}

fn class_names(checkpoint: &Path) -> Outcome<Vec<String>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    serde_json::from_value(ckpt.metadata["class_names"].clone())
        .map_err(|_| Error::Checkpoint("metadata has no class_names".into()).into())
}

fn split_of(cfg: &ExperimentConfig, split: &str) -> Outcome<LabeledDataset> {
    let data = cfg.load_datasets()?;
    Ok(match split {
        "train" => data.train,
        "val" => data.val,
        _ => data.test,
    })
}

fn eval(cfg: &ExperimentConfig, model: &mut EnsembleModel, split: &str, out: &Path) -> Outcome {
    let ds = split_of(cfg, split)?;
    let (cm, report) = evaluate(model, &ds, EVAL_BATCH)?;
    print!("{}", report.table());
    println!("{}", report.to_json()?);
    std::fs::create_dir_all(out).map_err(Error::from)?;
    write(
        &out.join(format!("confusion_{split}.csv")),
        cm.to_csv(ds.class_names()),
    )?;
    println!("{split} accuracy {:.6}", report.accuracy);
    Ok(())
}

fn predict(
    cfg: &ExperimentConfig,
    model: &mut EnsembleModel,
    names: &[String],
    image: &Path,
) -> Outcome {
    let s = model.input_size();
    let x = Image::load(image)?
        .to_model_input(s, cfg.data.imagenet_norm)?
        .reshape(vec![1, 3, s, s])?;
    let probs = model.predict_proba(&x)?;
    let p = probs.data();
    let label = (0..p.len()).fold(0, |best, i| if p[i] > p[best] { i } else { best });
    let by_name: BTreeMap<&str, f64> = names
        .iter()
        .map(String::as_str)
        .zip(p.iter().copied())
        .collect();
    let line = serde_json::json!({
        "class": names.get(label),
        "label": label,
        "probabilities": by_name,
    });
    println!("{line}");
    Ok(())
}

fn gradcheck(scope: Scope, seed: u64, json: bool, broken: bool) -> Outcome {
    let mut cases = suite();
    if broken {
        cases.push(broken_fixture());
    }
    let report = run_cases(&cases, scope, seed)?;
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).map_err(Error::from)?
        );
    } else {
        print!("{report}");
        println!(
            "worst {:.3e} over {} cases (tolerance {:e})",
            report.worst(),
            report.results.len(),
            report.tolerance
        );
    }
    let failures: Vec<String> = report
        .failures()
        .iter()
        .map(|r| format!("{} ({:.3e})", r.name, r.max_rel_error))
        .collect();
    if failures.is_empty() {
        Ok(())
    } else {
        Err(verification(format!(
            "gradient check failed: {}",
            failures.join(", ")
        )))
    }
}

fn dataset_stats(root: &Path, json: bool) -> Outcome {
    let reports = count_directory(root)?;
    if json {
        let view: BTreeMap<&str, &BTreeMap<String, usize>> = reports
            .iter()
            .map(|r| (r.split.as_str(), &r.counts))
            .collect();
        println!("{}", serde_json::to_string(&view).map_err(Error::from)?);
        return Ok(());
    }
    for r in &reports {
        let total: usize = r.counts.values().sum();
        let parts: Vec<String> = r.counts.iter().map(|(c, n)| format!("{c} {n}")).collect();
        println!("{:<5} {:>6}  {}", r.split, total, parts.join("  "));
        for c in &r.empty_classes {
            println!("      warning: class {c} is empty");
        }
        for (path, why) in &r.skipped {
            println!("      skipped {}: {why}", path.display());
        }
    }
    Ok(())
}
