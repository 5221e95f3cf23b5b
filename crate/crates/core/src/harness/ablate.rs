//! Ablation protocol drivers: k-fold probe evaluation, few-ratio learning,
//! checkpoint-iteration sweeps and pre-training data-ratio studies.

use super::metrics::{accuracy, auc_ovr, balanced_accuracy, macro_f1, Confusion};
use super::report::{FoldMetrics, MetricsReport, ReportRow};
use super::splits::{stratified_split, subsample_ratio, SplitScheme};
use crate::augment::AugmentConfig;
use crate::corpus::{build_corpus, patch_path, read_manifest, read_patch, CorpusConfig};
use crate::dino::{load_checkpoint, pretrain, DinoConfig};
use crate::downstream::{
    extract_features, probe_predict, probe_train, FeatureMatrix, ProbeConfig,
};
use crate::encoder::{DinoHeadConfig, ViTConfig};
use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Evaluates one trained probe on held-out rows.
fn eval_fold(
    features: &FeatureMatrix,
    labels: &[i32],
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &ProbeConfig,
) -> Result<FoldMetrics> {
    let outcome = probe_train(features, labels, train_idx, val_idx, cfg)?;
    let classes = &outcome.model.classes;
    let class_index: BTreeMap<i32, usize> =
        classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let (pred, probs) = probe_predict(&outcome.model, features, val_idx)?;
    let truth: Vec<usize> = val_idx.iter().map(|&i| class_index[&labels[i]]).collect();
    let pred_idx: Vec<usize> = pred.iter().map(|l| class_index[l]).collect();
    let confusion = Confusion::from_pairs(&truth, &pred_idx, classes.len());
    let auc = auc_ovr(probs.data(), &truth, classes.len())
        .map(|r| r.macro_auc)
        .unwrap_or(0.5);
    Ok(FoldMetrics {
        acc: accuracy(&confusion),
        bal_acc: balanced_accuracy(&confusion),
        auc,
        f1: macro_f1(&confusion),
    })
}

/// Label-stratified k-fold probe evaluation; fold `f` validates, the rest
/// train.
pub fn kfold_probe_eval(
    features: &FeatureMatrix,
    folds: usize,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<MetricsReport> {
    let labels = features
        .labels
        .as_ref()
        .ok_or_else(|| Error::Contract("labeled features required".into()))?;
    let plan = stratified_split(labels, SplitScheme::KFold(folds), seed)?;
    let mut per_fold = Vec::with_capacity(folds);
    for f in 0..folds {
        let (train, val) = plan.fold(f);
        per_fold.push(eval_fold(features, labels, &train, &val, probe)?);
    }
    MetricsReport::from_folds(per_fold)
}

/// Few-ratio learning: k-fold evaluation with the train split subsampled
/// per class at each ratio. Ratios default to {0.1, 0.25, 0.5, 0.75, 1.0}.
pub fn few_ratio_ablation(
    features: &FeatureMatrix,
    ratios: &[f64],
    folds: usize,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<Vec<(f64, MetricsReport)>> {
    let labels = features
        .labels
        .as_ref()
        .ok_or_else(|| Error::Contract("labeled features required".into()))?;
    let plan = stratified_split(labels, SplitScheme::KFold(folds), seed)?;
    let mut out = Vec::new();
    for &ratio in ratios {
        let mut per_fold = Vec::new();
        for f in 0..folds {
            let (train, val) = plan.fold(f);
            let sub = subsample_ratio(&train, labels, ratio, seed ^ 0xFE, true)?;
            per_fold.push(eval_fold(features, labels, &sub, &val, probe)?);
        }
        out.push((ratio, MetricsReport::from_folds(per_fold)?));
    }
    Ok(out)
}

pub const DEFAULT_FEW_RATIOS: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 1.0];

/// Loads the labeled patches of a corpus directory.
pub fn load_corpus_patches(
    corpus_dir: &Path,
) -> Result<(Vec<crate::corpus::PatchImage>, Vec<i32>)> {
    let manifest_path = corpus_dir.join("manifest.csv");
    if !manifest_path.is_file() {
        return Err(Error::MissingArtifact(manifest_path.display().to_string()));
    }
    let manifest = read_manifest(&manifest_path)?;
    let mut patches = Vec::with_capacity(manifest.len());
    let mut labels = Vec::with_capacity(manifest.len());
    for row in &manifest {
        patches.push(read_patch(&patch_path(corpus_dir, row))?);
        labels.push(row.class_id as i32);
    }
    Ok((patches, labels))
}

/// Extracts features from a checkpoint's teacher backbone for labeled
/// patches.
pub fn checkpoint_features(
    checkpoint: &Path,
    vit: &ViTConfig,
    patches: &[crate::corpus::PatchImage],
    labels: &[i32],
    aug: &AugmentConfig,
) -> Result<FeatureMatrix> {
    if !checkpoint.is_file() {
        return Err(Error::MissingArtifact(checkpoint.display().to_string()));
    }
    let state = load_checkpoint(checkpoint)?;
    extract_features(
        &state.teacher,
        vit,
        patches,
        Some(labels.to_vec()),
        aug.normalize_mean,
        aug.normalize_std,
    )
}

/// Probe evaluation at every saved epoch checkpoint of a pre-training run,
/// in ascending epoch order.
pub fn checkpoint_iters_ablation(
    run_dir: &Path,
    corpus_dir: &Path,
    vit: &ViTConfig,
    aug: &AugmentConfig,
    folds: usize,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<Vec<(String, MetricsReport)>> {
    let mut checkpoints: Vec<PathBuf> = std::fs::read_dir(run_dir)
        .map_err(|_| Error::MissingArtifact(run_dir.display().to_string()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension().map(|x| x == "stnc").unwrap_or(false)
                && p.file_name()
                    .map(|n| n.to_string_lossy().starts_with("checkpoint_ep"))
                    .unwrap_or(false)
        })
        .collect();
    checkpoints.sort();
    if checkpoints.is_empty() {
        return Err(Error::MissingArtifact(format!(
            "no checkpoints under {}",
            run_dir.display()
        )));
    }
    let (patches, labels) = load_corpus_patches(corpus_dir)?;
    let mut out = Vec::new();
    for ck in checkpoints {
        let features = checkpoint_features(&ck, vit, &patches, &labels, aug)?;
        let report = kfold_probe_eval(&features, folds, probe, seed)?;
        out.push((
            ck.file_name().unwrap().to_string_lossy().into_owned(),
            report,
        ));
    }
    Ok(out)
}

/// Pre-training data-scale study: rebuild the corpus at each per-slide cap,
/// pre-train, then probe the resulting features.
#[allow(clippy::too_many_arguments)]
pub fn data_ratio_ablation(
    work_dir: &Path,
    base_corpus: &CorpusConfig,
    caps: &[usize],
    dino: &DinoConfig,
    vit: &ViTConfig,
    head: &DinoHeadConfig,
    aug: &AugmentConfig,
    folds: usize,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<Vec<(usize, MetricsReport)>> {
    let mut out = Vec::new();
    for &cap in caps {
        let corpus_dir = work_dir.join(format!("corpus_cap{cap}"));
        let run_dir = work_dir.join(format!("run_cap{cap}"));
        let cfg = CorpusConfig {
            cap,
            ..base_corpus.clone()
        };
        build_corpus(&cfg, &corpus_dir)?;
        let summary = pretrain(&corpus_dir, &run_dir, dino, vit, head, aug, seed)?;
        let (patches, labels) = load_corpus_patches(&corpus_dir)?;
        let features =
            checkpoint_features(&summary.final_checkpoint, vit, &patches, &labels, aug)?;
        out.push((cap, kfold_probe_eval(&features, folds, probe, seed)?));
    }
    Ok(out)
}

/// Flattens a (point, report) series into JSONL rows.
pub fn report_rows_for_series<P: std::fmt::Display>(
    task: &str,
    model: &str,
    series: &[(P, MetricsReport)],
    as_ratio: bool,
) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for (point, report) in series {
        for (fold, m) in report.per_fold.iter().enumerate() {
            rows.push(ReportRow {
                task: task.to_string(),
                model: model.to_string(),
                fold,
                ratio: if as_ratio {
                    point.to_string().parse().ok()
                } else {
                    None
                },
                checkpoint: if as_ratio {
                    None
                } else {
                    Some(point.to_string())
                },
                acc: m.acc,
                bal_acc: m.bal_acc,
                auc: m.auc,
                f1: m.f1,
            });
        }
    }
    rows
}
