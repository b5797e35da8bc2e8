//! `synattr`: generate a toy corpus, train fold models, pseudo-label,
//! retrain, infer and evaluate.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;
use synattr::audio_io::{load_wav, write_wav};
use synattr::augment::one_hot;
use synattr::datagen::{build_corpus, manifest_csv, parse_manifest, CorpusConfig, ManifestRow, Split};
use synattr::dsp::MelSpec;
use synattr::eval::{confusion_matrix, metrics, weighted_eval, MetricsReport};
use synattr::nn::{ClassProb, ModelParams};
use synattr::pipeline::{
    clip_seed, ensemble_probs, load_models, predictions_csv, pseudo_csv, pseudo_examples, pseudo_label,
    read_predictions_csv, read_pseudo_csv, read_text, retrain_with_pseudo, run_cv, save_cv, write_text, Dataset,
    Example, FrontEnd, Source,
};
use synattr::seed::derive_seed;
use synattr::UNKNOWN_CLASS;

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "synattr", version, about = "Synthetic-speech generator attribution")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; defaults to `output_dir` from the config.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the procedural corpus (WAVs + manifest.csv) to `corpus_dir`.
    Gen,
    /// Five-fold cross-validation on the corpus training split.
    Train,
    /// Soft pseudo labels for every WAV in a directory.
    Pseudo {
        #[arg(long)]
        input: PathBuf,
        /// Output CSV; defaults to `<run-dir>/pseudo_labels.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-validation again with pseudo-labelled examples added.
    Retrain {
        /// Pseudo-label CSV; defaults to `<run-dir>/pseudo_labels.csv`.
        #[arg(long)]
        pseudo: Option<PathBuf>,
        /// Directory holding the pseudo-labelled WAVs.
        #[arg(long)]
        input: PathBuf,
        /// New run directory; defaults to `<run-dir>/retrained`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Ensemble predictions for every WAV in a directory.
    Infer {
        #[arg(long)]
        input: PathBuf,
        /// Output CSV; defaults to `<run-dir>/predictions.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metrics of a predictions CSV against a manifest.
    Eval {
        /// Part I predictions.
        #[arg(long)]
        predictions: PathBuf,
        /// Part II predictions; enables the weighted score.
        #[arg(long)]
        part2: Option<PathBuf>,
        /// Manifest with ground truth; defaults to `<corpus_dir>/manifest.csv`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Report path; defaults to `metrics.txt` beside the predictions.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let Some(config_path) = cli.global.config.as_deref() else {
        bail!("--config PATH is required");
    };
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(seed) = cli.global.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let run_dir = cli.global.run_dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
    match cli.command {
        Command::Gen => cmd_gen(&cfg),
        Command::Train => cmd_train(&cfg, &run_dir),
        Command::Pseudo { input, out } => {
            let out = out.unwrap_or_else(|| run_dir.join("pseudo_labels.csv"));
            cmd_pseudo(&cfg, &run_dir, &input, &out)
        }
        Command::Retrain { pseudo, input, out_dir } => {
            let pseudo = pseudo.unwrap_or_else(|| run_dir.join("pseudo_labels.csv"));
            let out_dir = out_dir.unwrap_or_else(|| run_dir.join("retrained"));
            cmd_retrain(&cfg, &pseudo, &input, &out_dir)
        }
        Command::Infer { input, out } => {
            let out = out.unwrap_or_else(|| run_dir.join("predictions.csv"));
            cmd_infer(&cfg, &run_dir, &input, &out)
        }
        Command::Eval {
            predictions,
            part2,
            manifest,
            out,
        } => {
            let manifest = manifest.unwrap_or_else(|| cfg.corpus_dir.join("manifest.csv"));
            let out = out.unwrap_or_else(|| predictions.with_file_name("metrics.txt"));
            cmd_eval(&predictions, part2.as_deref(), &manifest, &out)
        }
    }
}

fn corpus_config(cfg: &RunConfig) -> CorpusConfig {
    CorpusConfig {
        seed: cfg.seed,
        ..cfg.corpus.clone()
    }
}

fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    let corpus = build_corpus(&corpus_config(cfg))?;
    let root = &cfg.corpus_dir;
    for split in ["train", "eval1", "eval2"] {
        std::fs::create_dir_all(root.join(split)).with_context(|| format!("creating {}", root.join(split).display()))?;
    }
    corpus
        .all()
        .collect::<Vec<_>>()
        .par_iter()
        .try_for_each(|item| write_wav(root.join(item.relative_path()), &item.clip))?;
    write_text(&root.join("manifest.csv"), &manifest_csv(&corpus))?;
    info!(
        "wrote {} train, {} eval1, {} eval2 clips to {}",
        corpus.train.len(),
        corpus.eval1.len(),
        corpus.eval2.len(),
        root.display()
    );
    Ok(())
}

fn front_end(cfg: &RunConfig) -> Result<FrontEnd> {
    Ok(FrontEnd::new(cfg.spec.clone(), cfg.segment_s)?)
}

/// Segment-position stream shared by every command, so a clip gets the same
/// features in training, pseudo-labelling and inference.
fn feature_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.seed, 2)
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Features of WAV files keyed by file name.
fn featurize(cfg: &RunConfig, paths: &[PathBuf]) -> Result<Vec<(String, MelSpec)>> {
    let fe = front_end(cfg)?;
    let seed = feature_seed(cfg);
    paths
        .par_iter()
        .map(|p| {
            let name = file_name(p);
            let clip = load_wav(p)?;
            let spec = fe.features(&clip, clip_seed(seed, &name))?;
            Ok((name, spec))
        })
        .collect()
}

/// Sorted `*.wav` files of a directory.
fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    Ok(paths)
}

fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    Ok(parse_manifest(&read_text(path)?).with_context(|| format!("in {}", path.display()))?)
}

fn training_set(cfg: &RunConfig) -> Result<Dataset> {
    let manifest = cfg.corpus_dir.join("manifest.csv");
    if !manifest.is_file() {
        bail!("corpus manifest {} not found; run `gen` first", manifest.display());
    }
    let rows: Vec<ManifestRow> = read_manifest(&manifest)?
        .into_iter()
        .filter(|r| r.split == Split::Train)
        .collect();
    if rows.is_empty() {
        bail!("manifest {} has no training rows", manifest.display());
    }
    let paths: Vec<PathBuf> = rows.iter().map(|r| cfg.corpus_dir.join(&r.filename)).collect();
    let specs = featurize(cfg, &paths)?;
    Ok(Dataset::new(
        rows.iter()
            .zip(specs)
            .map(|(row, (id, spec))| Example {
                id,
                spec,
                label: one_hot(row.class),
                source: if row.class == UNKNOWN_CLASS {
                    Source::UnknownExternal
                } else {
                    Source::Known
                },
            })
            .collect(),
    ))
}

fn training_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.seed, 3)
}

fn log_cv(cv: &synattr::pipeline::CvResult) {
    for (f, r) in cv.reports.iter().enumerate() {
        info!("fold {f}: macro F1 {:.4}, accuracy {:.4}", r.macro_f1, r.accuracy);
    }
    info!("mean macro F1 {:.4}", cv.mean_macro_f1());
}

fn snapshot_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write_text(&dir.join("config.toml"), &cfg.to_toml()?)?;
    Ok(())
}

fn cmd_train(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let ds = training_set(cfg)?;
    info!("training on {} examples, histogram {:?}", ds.len(), ds.class_histogram());
    let cv = run_cv(&ds, cfg.folds, &[], &cfg.settings()?, training_seed(cfg))?;
    save_cv(run_dir, &cv)?;
    snapshot_config(cfg, run_dir)?;
    log_cv(&cv);
    Ok(())
}

/// Models of the run directory plus every configured ensemble member.
fn ensemble(cfg: &RunConfig, run_dir: &Path) -> Result<Vec<ModelParams>> {
    let mut models: Vec<ModelParams> = load_models(run_dir)
        .with_context(|| format!("loading models from {}", run_dir.display()))?
        .into_iter()
        .map(|(_, m)| m)
        .collect();
    for dir in &cfg.ensemble_members {
        models.extend(load_models(dir)?.into_iter().map(|(_, m)| m));
    }
    Ok(models)
}

fn cmd_pseudo(cfg: &RunConfig, run_dir: &Path, input: &Path, out: &Path) -> Result<()> {
    let models = ensemble(cfg, run_dir)?;
    let inputs = featurize(cfg, &wav_files(input)?)?;
    let specs: Vec<MelSpec> = inputs.iter().map(|(_, s)| s.clone()).collect();
    let labels = pseudo_label(&models, &specs)?;
    let rows: Vec<_> = inputs.into_iter().map(|(id, _)| id).zip(labels).collect();
    write_text(out, &pseudo_csv(&rows))?;
    info!("wrote {} soft labels from {} models to {}", rows.len(), models.len(), out.display());
    Ok(())
}

fn cmd_retrain(cfg: &RunConfig, pseudo_path: &Path, input: &Path, out_dir: &Path) -> Result<()> {
    let labels = read_pseudo_csv(pseudo_path)?;
    let paths: Vec<PathBuf> = labels.iter().map(|(id, _)| input.join(id)).collect();
    if let Some(missing) = paths.iter().find(|p| !p.is_file()) {
        bail!("pseudo-labelled file {} not found", missing.display());
    }
    let specs = featurize(cfg, &paths)?;
    let pseudo = pseudo_examples(
        specs
            .into_iter()
            .zip(labels)
            .map(|((id, spec), (_, label))| (id, spec, label))
            .collect(),
    )?;
    let ds = training_set(cfg)?;
    info!("retraining on {} examples plus {} pseudo-labelled", ds.len(), pseudo.len());
    let cv = retrain_with_pseudo(&ds, cfg.folds, &pseudo, &cfg.settings()?, training_seed(cfg))?;
    save_cv(out_dir, &cv)?;
    snapshot_config(cfg, out_dir)?;
    log_cv(&cv);
    Ok(())
}

fn cmd_infer(cfg: &RunConfig, run_dir: &Path, input: &Path, out: &Path) -> Result<()> {
    let models = ensemble(cfg, run_dir)?;
    let inputs = featurize(cfg, &wav_files(input)?)?;
    let specs: Vec<MelSpec> = inputs.iter().map(|(_, s)| s.clone()).collect();
    let probs = ensemble_probs(&models, &specs)?;
    let rows: Vec<(String, ClassProb)> = inputs.into_iter().map(|(id, _)| id).zip(probs).collect();
    write_text(out, &predictions_csv(&rows))?;
    info!("wrote {} predictions from {} models to {}", rows.len(), models.len(), out.display());
    Ok(())
}

/// Joins predictions with manifest truths by file name and computes metrics
/// per split and overall.
fn split_reports(predictions: &Path, truths: &BTreeMap<String, &ManifestRow>) -> Result<Vec<(String, MetricsReport)>> {
    let rows = read_predictions_csv(predictions)?;
    if rows.is_empty() {
        bail!("{} has no predictions", predictions.display());
    }
    let mut groups: BTreeMap<String, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (name, class, _) in &rows {
        let truth = truths
            .get(name.as_str())
            .ok_or_else(|| anyhow!("{name} in {} is not in the manifest", predictions.display()))?;
        for key in ["all", truth.split.as_str()] {
            let g = groups.entry(key.to_string()).or_default();
            g.0.push(*class);
            g.1.push(truth.class);
        }
    }
    groups
        .into_iter()
        .map(|(k, (p, t))| Ok((k, metrics(&confusion_matrix(&p, &t)?)?)))
        .collect()
}

fn cmd_eval(predictions: &Path, part2: Option<&Path>, manifest: &Path, out: &Path) -> Result<()> {
    let rows = read_manifest(manifest)?;
    let truths: BTreeMap<String, &ManifestRow> = rows.iter().map(|r| (file_name(Path::new(&r.filename)), r)).collect();
    let part1 = split_reports(predictions, &truths)?;
    let mut text = String::new();
    let mut emit = |prefix: &str, reports: &[(String, MetricsReport)]| {
        for (split, report) in reports {
            for line in report.to_text().lines() {
                text.push_str(&format!("{prefix}{split}.{line}\n"));
            }
        }
    };
    emit("part1.", &part1);
    let overall = |reports: &[(String, MetricsReport)]| {
        reports.iter().find(|(k, _)| k == "all").map(|(_, r)| r.accuracy).expect("non-empty")
    };
    match part2 {
        Some(path) => {
            let part2 = split_reports(path, &truths)?;
            emit("part2.", &part2);
            let weighted = weighted_eval(overall(&part1), overall(&part2))?;
            text.push_str(&format!("weighted_accuracy={weighted}\n"));
        }
        None => warn!("no Part II predictions given; weighted score omitted"),
    }
    write_text(out, &text)?;
    let all = &part1.iter().find(|(k, _)| k == "all").expect("non-empty").1;
    write_text(&out.with_extension("confusion.csv"), &all.confusion.to_csv())?;
    info!("Part I accuracy {:.4}, macro F1 {:.4}; report in {}", all.accuracy, all.macro_f1, out.display());
    Ok(())
}
