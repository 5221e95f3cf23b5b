//! Command-line pipeline driver: corpus generation, self-distillation
//! pre-training, feature extraction, probes, MIL, retrieval, ablations and
//! reporting.

use clap::{Parser, Subcommand};
use stainlab::config::{parse_config_file, Config};
use stainlab::corpus::{build_corpus, read_manifest};
use stainlab::dino::{load_checkpoint, pretrain};
use stainlab::downstream::{
    extract_features, leave_one_out_sweep, mil_predict, mil_train, read_bags, read_features,
    write_bags, write_features, Bag,
};
use stainlab::error::Error;
use stainlab::harness::{
    accuracy, append_report_rows, auc_ovr, balanced_accuracy, checkpoint_iters_ablation,
    data_ratio_ablation, few_ratio_ablation, kfold_probe_eval, load_corpus_patches, macro_f1,
    read_report_rows, report_rows_for_series, stratified_split, write_summary_csv, Confusion,
    FoldMetrics, MetricsReport, ReportRow, SplitScheme,
};
use stainlab::tensor::{set_deterministic, Tensor};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "stainlab", about = "Desk-scale self-supervised stain-image pipeline")]
struct Cli {
    /// Root seed; all randomness derives from it.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// Configuration file (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Single-threaded kernels with fixed reduction order.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Print the resolved configuration with provenance tags and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic stain corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-distillation pre-training over a corpus.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract teacher-backbone features for every corpus patch.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Feature file to write.
        #[arg(long)]
        out: PathBuf,
        /// Also write per-slide bags under this directory.
        #[arg(long)]
        bags_out: Option<PathBuf>,
    },
    /// Stratified k-fold probe evaluation on a feature file.
    Probe {
        #[arg(long)]
        features: PathBuf,
        /// Manifest supplying labels when the feature file has none.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long, default_value = "report.jsonl")]
        out: PathBuf,
    },
    /// Stratified k-fold MIL evaluation on bag storage.
    Mil {
        #[arg(long)]
        bags: PathBuf,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long, default_value = "report.jsonl")]
        out: PathBuf,
    },
    /// Leave-one-out retrieval metrics over K = 1..k_max.
    Retrieve {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        k_max: Option<usize>,
        #[arg(long, default_value = "retrieval.csv")]
        out: PathBuf,
    },
    /// Ablation drivers.
    Ablate {
        /// few-ratio, checkpoint-iters or data-ratio.
        #[arg(long)]
        kind: String,
        /// Feature file (few-ratio).
        #[arg(long)]
        features: Option<PathBuf>,
        /// Pre-training run directory (checkpoint-iters).
        #[arg(long)]
        run: Option<PathBuf>,
        /// Corpus directory (checkpoint-iters, data-ratio).
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Working directory for data-ratio corpora and runs.
        #[arg(long)]
        work: Option<PathBuf>,
        #[arg(long, default_value = "report.jsonl")]
        out: PathBuf,
    },
    /// Summarize a JSONL report into mean +/- std CSV cells.
    Report {
        #[arg(long)]
        rows: PathBuf,
        #[arg(long, default_value = "summary.csv")]
        summary: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // usage problems are validation errors
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    set_deterministic(cli.deterministic);
    let config = match &cli.config {
        Some(path) => match parse_config_file(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
        },
        None => Config::default(),
    };
    if cli.print_config {
        print!("{}", config.print());
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("error: missing subcommand (try --help)");
        return ExitCode::from(1);
    };
    match run(command, &config, cli.seed) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// 1 for validation problems, 2 for runtime failures.
fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::InvalidParameter(_)
        | Error::Config { .. }
        | Error::Contract(_)
        | Error::ShapeMismatch { .. }
        | Error::ClassTooSmall { .. } => 1,
        _ => 2,
    }
}

fn run(command: Command, config: &Config, seed: u64) -> stainlab::Result<()> {
    match command {
        Command::GenCorpus { out } => {
            let cfg = config.corpus_config(seed)?;
            let summary = build_corpus(&cfg, &out)?;
            println!(
                "corpus: {} slides ({} excluded), {} patches -> {}",
                summary.slides,
                summary.excluded_slides,
                summary.patches,
                out.display()
            );
            Ok(())
        }
        Command::Pretrain { corpus, out } => {
            let summary = pretrain(
                &corpus,
                &out,
                &config.dino_config()?,
                &config.vit_config()?,
                &config.head_config()?,
                &config.augment_config()?,
                seed,
            )?;
            println!(
                "pretrained {} epochs over {} patches ({} steps); final checkpoint {}",
                summary.epochs,
                summary.patches,
                summary.steps,
                summary.final_checkpoint.display()
            );
            println!(
                "epoch mean loss: first {:.4}, last {:.4}; loss log {}",
                summary.epoch_mean_loss.first().unwrap(),
                summary.epoch_mean_loss.last().unwrap(),
                summary.loss_log.display()
            );
            Ok(())
        }
        Command::Extract {
            checkpoint,
            corpus,
            out,
            bags_out,
        } => {
            let vit = config.vit_config()?;
            let aug = config.augment_config()?;
            let state = load_checkpoint(&checkpoint)?;
            let (patches, labels) = load_corpus_patches(&corpus)?;
            let features = extract_features(
                &state.teacher,
                &vit,
                &patches,
                Some(labels.clone()),
                aug.normalize_mean,
                aug.normalize_std,
            )?;
            write_features(&out, &features)?;
            println!(
                "extracted {} x {} features -> {}",
                features.len(),
                features.dim(),
                out.display()
            );
            if let Some(bag_dir) = bags_out {
                let manifest = read_manifest(&corpus.join("manifest.csv"))?;
                let mut by_slide: BTreeMap<String, (Vec<usize>, i32)> = BTreeMap::new();
                for (i, row) in manifest.iter().enumerate() {
                    let entry = by_slide
                        .entry(row.slide_id.clone())
                        .or_insert_with(|| (Vec::new(), row.class_id as i32));
                    entry.0.push(i);
                }
                let c = features.dim();
                let bags: Vec<Bag> = by_slide
                    .into_iter()
                    .map(|(slide_id, (rows, label))| {
                        let mut data = Vec::with_capacity(rows.len() * c);
                        for &r in &rows {
                            data.extend_from_slice(features.row(r));
                        }
                        Bag::new(slide_id, Tensor::new(&[rows.len(), c], data)?, label)
                    })
                    .collect::<stainlab::Result<_>>()?;
                write_bags(&bag_dir, &bags)?;
                println!("wrote {} bags -> {}", bags.len(), bag_dir.display());
            }
            Ok(())
        }
        Command::Probe {
            features,
            manifest,
            mode,
            folds,
            out,
        } => {
            let mut fm = read_features(&features)?;
            if fm.labels.is_none() {
                let manifest_path = manifest.ok_or_else(|| {
                    Error::Contract("feature file has no labels; pass --manifest".into())
                })?;
                let rows = read_manifest(&manifest_path)?;
                let by_id: BTreeMap<&str, i32> = rows
                    .iter()
                    .map(|r| (r.patch_id.as_str(), r.class_id as i32))
                    .collect();
                let labels = fm
                    .ids
                    .iter()
                    .map(|id| {
                        by_id.get(id.as_str()).copied().ok_or_else(|| {
                            Error::Contract(format!("patch `{id}` missing from manifest"))
                        })
                    })
                    .collect::<stainlab::Result<Vec<i32>>>()?;
                fm.labels = Some(labels);
            }
            let mut probe = config.probe_config(seed)?;
            if let Some(mode) = mode {
                probe.mode = match mode.as_str() {
                    "linear" => stainlab::downstream::ProbeMode::Linear,
                    "mlp" => stainlab::downstream::ProbeMode::Mlp,
                    other => {
                        return Err(Error::InvalidParameter(format!(
                            "unknown probe mode `{other}`"
                        )))
                    }
                };
            }
            let folds = folds.unwrap_or(config.folds());
            let report = kfold_probe_eval(&fm, folds, &probe, seed)?;
            let model = match probe.mode {
                stainlab::downstream::ProbeMode::Linear => "linear",
                stainlab::downstream::ProbeMode::Mlp => "mlp",
            };
            let rows: Vec<ReportRow> = report
                .per_fold
                .iter()
                .enumerate()
                .map(|(fold, m)| ReportRow {
                    task: "probe".into(),
                    model: model.into(),
                    fold,
                    ratio: None,
                    checkpoint: None,
                    acc: m.acc,
                    bal_acc: m.bal_acc,
                    auc: m.auc,
                    f1: m.f1,
                })
                .collect();
            append_report_rows(&out, &rows)?;
            print_report("probe", model, &report);
            Ok(())
        }
        Command::Mil {
            bags,
            model,
            folds,
            out,
        } => {
            let bags = read_bags(&bags)?;
            let mut mil = config.mil_config(seed)?;
            if let Some(model) = model {
                mil.model = match model.as_str() {
                    "abmil" => stainlab::downstream::MilModel::Abmil,
                    "simlp" => stainlab::downstream::MilModel::Simlp,
                    other => {
                        return Err(Error::InvalidParameter(format!(
                            "unknown MIL model `{other}`"
                        )))
                    }
                };
            }
            let folds = folds.unwrap_or(config.folds());
            let labels: Vec<i32> = bags.iter().map(|b| b.label).collect();
            let plan = stratified_split(&labels, SplitScheme::KFold(folds), seed)?;
            let mut classes = labels.clone();
            classes.sort_unstable();
            classes.dedup();
            let class_index: BTreeMap<i32, usize> =
                classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
            let mut per_fold = Vec::new();
            for f in 0..folds {
                let (train, val) = plan.fold(f);
                let outcome = mil_train(&bags, &train, &val, &mil)?;
                let mut truth = Vec::new();
                let mut pred = Vec::new();
                let mut probs = Vec::new();
                for &vi in &val {
                    truth.push(class_index[&bags[vi].label]);
                    let (label, p) = mil_predict(&outcome.model, &bags[vi])?;
                    pred.push(class_index[&label]);
                    probs.extend(p);
                }
                let confusion = Confusion::from_pairs(&truth, &pred, classes.len());
                let auc = auc_ovr(&probs, &truth, classes.len())
                    .map(|r| r.macro_auc)
                    .unwrap_or(0.5);
                per_fold.push(FoldMetrics {
                    acc: accuracy(&confusion),
                    bal_acc: balanced_accuracy(&confusion),
                    auc,
                    f1: macro_f1(&confusion),
                });
            }
            let report = MetricsReport::from_folds(per_fold)?;
            let model = match mil.model {
                stainlab::downstream::MilModel::Abmil => "abmil",
                stainlab::downstream::MilModel::Simlp => "simlp",
            };
            let rows: Vec<ReportRow> = report
                .per_fold
                .iter()
                .enumerate()
                .map(|(fold, m)| ReportRow {
                    task: "mil".into(),
                    model: model.into(),
                    fold,
                    ratio: None,
                    checkpoint: None,
                    acc: m.acc,
                    bal_acc: m.bal_acc,
                    auc: m.auc,
                    f1: m.f1,
                })
                .collect();
            append_report_rows(&out, &rows)?;
            print_report("mil", model, &report);
            Ok(())
        }
        Command::Retrieve {
            features,
            k_max,
            out,
        } => {
            let fm = read_features(&features)?;
            let k_max = k_max.unwrap_or(config.retrieval_k_max());
            let sweep = leave_one_out_sweep(&fm, k_max)?;
            let mut text = String::from("k,recall_at_k,map_at_k,skipped_queries\n");
            for (k, m) in &sweep {
                text.push_str(&format!(
                    "{k},{},{},{}\n",
                    m.recall_at_k, m.map_at_k, m.skipped_queries
                ));
            }
            std::fs::write(&out, text)?;
            let last = &sweep.last().unwrap().1;
            println!(
                "retrieval over {} items: Recall@{k_max} {:.4}, mAP@{k_max} {:.4} -> {}",
                fm.len(),
                last.recall_at_k,
                last.map_at_k,
                out.display()
            );
            Ok(())
        }
        Command::Ablate {
            kind,
            features,
            run,
            corpus,
            work,
            out,
        } => {
            let probe = config.probe_config(seed)?;
            let folds = config.folds();
            match kind.as_str() {
                "few-ratio" => {
                    let path = features.ok_or_else(|| {
                        Error::InvalidParameter("few-ratio needs --features".into())
                    })?;
                    let fm = read_features(&path)?;
                    let ratios = config.few_ratios()?;
                    let series = few_ratio_ablation(&fm, &ratios, folds, &probe, seed)?;
                    let rows = report_rows_for_series("few-ratio", "probe", &series, true);
                    append_report_rows(&out, &rows)?;
                    for (ratio, report) in &series {
                        print_report(&format!("few-ratio {ratio}"), "probe", report);
                    }
                }
                "checkpoint-iters" => {
                    let run = run.ok_or_else(|| {
                        Error::InvalidParameter("checkpoint-iters needs --run".into())
                    })?;
                    let corpus = corpus.ok_or_else(|| {
                        Error::InvalidParameter("checkpoint-iters needs --corpus".into())
                    })?;
                    let series = checkpoint_iters_ablation(
                        &run,
                        &corpus,
                        &config.vit_config()?,
                        &config.augment_config()?,
                        folds,
                        &probe,
                        seed,
                    )?;
                    let rows =
                        report_rows_for_series("checkpoint-iters", "probe", &series, false);
                    append_report_rows(&out, &rows)?;
                    for (name, report) in &series {
                        print_report(name, "probe", report);
                    }
                }
                "data-ratio" => {
                    let work = work.ok_or_else(|| {
                        Error::InvalidParameter("data-ratio needs --work".into())
                    })?;
                    let caps = config.ablate_caps()?;
                    let series = data_ratio_ablation(
                        &work,
                        &config.corpus_config(seed)?,
                        &caps,
                        &config.dino_config()?,
                        &config.vit_config()?,
                        &config.head_config()?,
                        &config.augment_config()?,
                        folds,
                        &probe,
                        seed,
                    )?;
                    let rows = report_rows_for_series("data-ratio", "probe", &series, false);
                    append_report_rows(&out, &rows)?;
                    for (cap, report) in &series {
                        print_report(&format!("cap {cap}"), "probe", report);
                    }
                }
                other => {
                    return Err(Error::InvalidParameter(format!(
                        "unknown ablation kind `{other}`"
                    )))
                }
            }
            Ok(())
        }
        Command::Report { rows, summary } => {
            let parsed = read_report_rows(&rows)?;
            write_summary_csv(&summary, &parsed)?;
            println!("{} rows -> {}", parsed.len(), summary.display());
            Ok(())
        }
    }
}

fn print_report(task: &str, model: &str, report: &MetricsReport) {
    println!(
        "{task} [{model}]: acc {:.4}+/-{:.4}  bal_acc {:.4}+/-{:.4}  auc {:.4}+/-{:.4}  f1 {:.4}+/-{:.4} ({} folds)",
        report.mean.acc,
        report.std.acc,
        report.mean.bal_acc,
        report.std.bal_acc,
        report.mean.auc,
        report.std.auc,
        report.mean.f1,
        report.std.f1,
        report.per_fold.len()
    );
}
