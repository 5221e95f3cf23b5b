//! Frozen-feature classifiers: linear probe and two-layer MLP probe with
//! best-balanced-accuracy checkpointing and early stopping.

use super::features::FeatureMatrix;
use crate::dino::wd_exempt;
use crate::encoder::ParameterSet;
use crate::error::{Error, Result};
use crate::harness::metrics::{balanced_accuracy, Confusion};
use crate::rng::Stream;
use crate::tensor::{ActKind, AdamWState, Graph, Tensor, Var};
use std::collections::BTreeMap;

/// Row access used by trainers; lets tests wrap a matrix with an access
/// tracker to prove which rows training touches.
pub trait FeatureSource {
    fn len(&self) -> usize;
    fn dim(&self) -> usize;
    fn row(&self, i: usize) -> &[f32];
}

impl FeatureSource for FeatureMatrix {
    fn len(&self) -> usize {
        FeatureMatrix::len(self)
    }
    fn dim(&self) -> usize {
        FeatureMatrix::dim(self)
    }
    fn row(&self, i: usize) -> &[f32] {
        FeatureMatrix::row(self, i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeMode {
    Linear,
    Mlp,
}

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub mode: ProbeMode,
    /// Hidden width for the MLP probe; 0 means "match the input dim".
    pub mlp_hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub wd: f64,
    pub patience: usize,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn new(mode: ProbeMode, seed: u64) -> Self {
        ProbeConfig {
            mode,
            mlp_hidden: 0,
            epochs: 20,
            batch: 128,
            lr: 1e-4,
            wd: 1e-4,
            patience: 5,
            seed,
        }
    }
}

/// Trained head plus the label vocabulary it predicts.
#[derive(Debug, Clone)]
pub struct ProbeModel {
    pub mode: ProbeMode,
    pub params: ParameterSet,
    pub classes: Vec<i32>,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_balanced_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub model: ProbeModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

fn init_probe_params(mode: ProbeMode, dim: usize, hidden: usize, k: usize, seed: u64) -> ParameterSet {
    let mut rng = Stream::tagged(seed, 0x9B0);
    let mut p = ParameterSet::new();
    match mode {
        ProbeMode::Linear => {
            p.insert("probe.fc.weight", Tensor::from_fn(&[dim, k], |_| rng.trunc_gauss(0.02) as f32));
            p.insert("probe.fc.bias", Tensor::zeros(&[k]));
        }
        ProbeMode::Mlp => {
            p.insert("probe.fc1.weight", Tensor::from_fn(&[dim, hidden], |_| rng.trunc_gauss(0.02) as f32));
            p.insert("probe.fc1.bias", Tensor::zeros(&[hidden]));
            p.insert("probe.fc2.weight", Tensor::from_fn(&[hidden, k], |_| rng.trunc_gauss(0.02) as f32));
            p.insert("probe.fc2.bias", Tensor::zeros(&[k]));
        }
    }
    p
}

fn probe_logits(g: &Graph<f32>, vars: &BTreeMap<String, Var>, mode: ProbeMode, x: Var) -> Result<Var> {
    match mode {
        ProbeMode::Linear => g.linear(x, vars["probe.fc.weight"], vars["probe.fc.bias"]),
        ProbeMode::Mlp => {
            let h = g.linear(x, vars["probe.fc1.weight"], vars["probe.fc1.bias"])?;
            let h = g.activation(h, ActKind::Relu);
            g.linear(h, vars["probe.fc2.weight"], vars["probe.fc2.bias"])
        }
    }
}

fn gather_rows(features: &dyn FeatureSource, idx: &[usize]) -> Tensor<f32> {
    let c = features.dim();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(features.row(i));
    }
    Tensor::new(&[idx.len(), c], data).unwrap()
}

fn one_hot(labels: &[usize], k: usize) -> Tensor<f32> {
    Tensor::from_fn(&[labels.len(), k], |i| {
        if i % k == labels[i / k] {
            1.0
        } else {
            0.0
        }
    })
}

/// Trains a probe on `train_idx`, early-stopping on validation balanced
/// accuracy with the configured patience; keeps the best-epoch weights.
pub fn probe_train(
    features: &dyn FeatureSource,
    labels: &[i32],
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    if labels.len() != features.len() {
        return Err(Error::Contract(format!(
            "{} labels for {} rows",
            labels.len(),
            features.len()
        )));
    }
    let mut classes: Vec<i32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let k = classes.len();
    let train_classes: std::collections::BTreeSet<i32> =
        train_idx.iter().map(|&i| labels[i]).collect();
    if train_classes.len() < 2 {
        return Err(Error::Contract(format!(
            "train split has {} class(es), need at least 2",
            train_classes.len()
        )));
    }
    let class_index: BTreeMap<i32, usize> =
        classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();

    let dim = features.dim();
    let hidden = if cfg.mlp_hidden == 0 { dim } else { cfg.mlp_hidden };
    let mut params = init_probe_params(cfg.mode, dim, hidden, k, cfg.seed);
    let mut opt = AdamWState::new(0.9, 0.999, 1e-8);

    let mut best: Option<(usize, f64, ParameterSet)> = None;
    let mut history = Vec::new();
    let mut stopped_epoch = 0;

    for epoch in 1..=cfg.epochs {
        let mut order = train_idx.to_vec();
        Stream::tagged_path(cfg.seed, &[0x9B1, epoch as u64]).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let x = gather_rows(features, chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| class_index[&labels[i]]).collect();
            let g: Graph<f32> = Graph::new();
            let vars = params.leaf_into(&g, true);
            let xv = g.constant(x);
            let logits = probe_logits(&g, &vars, cfg.mode, xv)?;
            let loss = g.cross_entropy_soft(logits, &one_hot(&y, k), 1.0)?;
            loss_sum += g.value(loss).item() as f64;
            batches += 1.0;
            g.backward(loss)?;
            let mut grads = BTreeMap::new();
            for (name, var) in &vars {
                if let Some(gr) = g.grad(*var) {
                    grads.insert(name.clone(), gr);
                }
            }
            drop(g);
            opt.step(params.map_mut(), &grads, cfg.lr, |n| {
                if wd_exempt(n) {
                    0.0
                } else {
                    cfg.wd
                }
            })?;
        }

        let model = ProbeModel {
            mode: cfg.mode,
            params: params.clone(),
            classes: classes.clone(),
            dim,
        };
        let (pred, _) = probe_predict(&model, features, val_idx)?;
        let truth: Vec<usize> = val_idx.iter().map(|&i| class_index[&labels[i]]).collect();
        let pred_idx: Vec<usize> = pred.iter().map(|l| class_index[l]).collect();
        let bal = balanced_accuracy(&Confusion::from_pairs(&truth, &pred_idx, k));
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches,
            val_balanced_accuracy: bal,
        });

        let improved = best.as_ref().map(|(_, b, _)| bal > *b).unwrap_or(true);
        if improved {
            best = Some((epoch, bal, params.clone()));
        }
        stopped_epoch = epoch;
        let best_epoch = best.as_ref().unwrap().0;
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }

    let (best_epoch, _, best_params) = best.unwrap();
    Ok(ProbeOutcome {
        model: ProbeModel {
            mode: cfg.mode,
            params: best_params,
            classes,
            dim,
        },
        history,
        best_epoch,
        stopped_epoch,
    })
}

/// Predicted labels and softmax probabilities (`idx.len() x n_classes`).
pub fn probe_predict(
    model: &ProbeModel,
    features: &dyn FeatureSource,
    idx: &[usize],
) -> Result<(Vec<i32>, Tensor<f32>)> {
    if features.dim() != model.dim {
        return Err(Error::ShapeMismatch {
            op: "probe_predict",
            lhs: vec![features.dim()],
            rhs: vec![model.dim],
        });
    }
    let g: Graph<f32> = Graph::new();
    let vars = model.params.leaf_into(&g, false);
    let x = g.constant(gather_rows(features, idx));
    let logits = probe_logits(&g, &vars, model.mode, x)?;
    let probs = g.value(g.softmax_last(logits));
    let k = model.classes.len();
    let pred = (0..idx.len())
        .map(|r| {
            let row = &probs.data()[r * k..(r + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            model.classes[best]
        })
        .collect();
    Ok((pred, probs))
}
