//! Multiple-instance learning heads: gated-attention pooling and mean
//! pooling with an MLP classifier.

use crate::dino::wd_exempt;
use crate::encoder::ParameterSet;
use crate::error::{Error, Result};
use crate::harness::metrics::{balanced_accuracy, Confusion};
use crate::rng::Stream;
use crate::tensor::{ActKind, AdamWState, Graph, Tensor, Var};
use std::collections::BTreeMap;

/// One slide's instance features and its label.
#[derive(Debug, Clone)]
pub struct Bag {
    pub slide_id: String,
    /// `N_i x C` instance features, `N_i >= 1`.
    pub x: Tensor<f32>,
    pub label: i32,
}

impl Bag {
    pub fn new(slide_id: String, x: Tensor<f32>, label: i32) -> Result<Self> {
        if x.shape().len() != 2 || x.shape()[0] == 0 {
            return Err(Error::Contract(format!(
                "bag needs an N x C matrix with N >= 1, got {:?}",
                x.shape()
            )));
        }
        Ok(Bag { slide_id, x, label })
    }

    pub fn instances(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MilModel {
    Abmil,
    Simlp,
}

#[derive(Debug, Clone)]
pub struct MilConfig {
    pub model: MilModel,
    /// Gated-attention width.
    pub attn_dim: usize,
    /// Mean-pool classifier hidden width; 0 means "match the input dim".
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub wd: f64,
    pub patience: usize,
    pub seed: u64,
}

impl MilConfig {
    pub fn new(model: MilModel, seed: u64) -> Self {
        MilConfig {
            model,
            attn_dim: 128,
            hidden: 0,
            epochs: 20,
            lr: 1e-4,
            wd: 1e-4,
            patience: 5,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MilModelParams {
    pub model: MilModel,
    pub params: ParameterSet,
    pub classes: Vec<i32>,
    pub dim: usize,
}

fn init_mil_params(cfg: &MilConfig, dim: usize, k: usize) -> ParameterSet {
    let mut rng = Stream::tagged(cfg.seed, 0x317);
    let mut p = ParameterSet::new();
    let mut normal = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.trunc_gauss(0.02) as f32);
    match cfg.model {
        MilModel::Abmil => {
            let a = cfg.attn_dim;
            p.insert("abmil.v.weight", normal(&[dim, a]));
            p.insert("abmil.u.weight", normal(&[dim, a]));
            p.insert("abmil.w", normal(&[a, 1]));
            p.insert("abmil.cls.weight", normal(&[dim, k]));
            p.insert("abmil.cls.bias", Tensor::zeros(&[k]));
        }
        MilModel::Simlp => {
            let h = if cfg.hidden == 0 { dim } else { cfg.hidden };
            p.insert("simlp.fc1.weight", normal(&[dim, h]));
            p.insert("simlp.fc1.bias", Tensor::zeros(&[h]));
            p.insert("simlp.fc2.weight", normal(&[h, k]));
            p.insert("simlp.fc2.bias", Tensor::zeros(&[k]));
        }
    }
    p
}

/// Canonical instance order: rows sorted by their byte representation, so
/// reductions are bit-identical under any input permutation. Returns the
/// sorted row-major copy plus the original position of each sorted row.
fn canonical_rows(x: &Tensor<f32>) -> (Tensor<f32>, Vec<usize>) {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let mut order: Vec<usize> = (0..n).collect();
    let key = |i: usize| -> &[f32] { &x.data()[i * c..(i + 1) * c] };
    order.sort_by(|&a, &b| {
        key(a)
            .iter()
            .map(|v| v.to_bits())
            .cmp(key(b).iter().map(|v| v.to_bits()))
    });
    let mut data = Vec::with_capacity(n * c);
    for &i in &order {
        data.extend_from_slice(key(i));
    }
    (Tensor::new(&[n, c], data).unwrap(), order)
}

/// Gated-attention forward for one bag: returns logits `[1, K]` and the
/// per-instance attention in the bag's original instance order.
pub fn abmil_forward(
    g: &Graph<f32>,
    vars: &BTreeMap<String, Var>,
    bag_x: &Tensor<f32>,
) -> Result<(Var, Vec<f32>)> {
    let (sorted, order) = canonical_rows(bag_x);
    let n = sorted.shape()[0];
    let h = g.constant(sorted);
    let gate_t = g.activation(g.matmul(h, vars["abmil.v.weight"])?, ActKind::Tanh);
    let gate_s = g.activation(g.matmul(h, vars["abmil.u.weight"])?, ActKind::Sigmoid);
    let gated = g.mul(gate_t, gate_s)?;
    let scores = g.matmul(gated, vars["abmil.w"])?; // [N, 1]
    let row = g.reshape(scores, &[1, n])?;
    let attn = g.softmax_last(row); // [1, N]
    let z = g.matmul(attn, h)?; // [1, C]
    let logits = g.linear(z, vars["abmil.cls.weight"], vars["abmil.cls.bias"])?;
    let a_sorted = g.value(attn);
    let mut attention = vec![0f32; n];
    for (si, &orig) in order.iter().enumerate() {
        attention[orig] = a_sorted.data()[si];
    }
    Ok((logits, attention))
}

/// Mean pooling then a two-layer classifier; logits `[1, K]`.
pub fn simlp_forward(
    g: &Graph<f32>,
    vars: &BTreeMap<String, Var>,
    bag_x: &Tensor<f32>,
) -> Result<Var> {
    let (sorted, _) = canonical_rows(bag_x);
    let h = g.constant(sorted);
    let z = g.mean_rows(h)?;
    let hid = g.linear(z, vars["simlp.fc1.weight"], vars["simlp.fc1.bias"])?;
    let hid = g.activation(hid, ActKind::Relu);
    g.linear(hid, vars["simlp.fc2.weight"], vars["simlp.fc2.bias"])
}

fn bag_logits(
    g: &Graph<f32>,
    vars: &BTreeMap<String, Var>,
    model: MilModel,
    bag: &Bag,
) -> Result<Var> {
    match model {
        MilModel::Abmil => abmil_forward(g, vars, &bag.x).map(|(l, _)| l),
        MilModel::Simlp => simlp_forward(g, vars, &bag.x),
    }
}

#[derive(Debug, Clone)]
pub struct MilOutcome {
    pub model: MilModelParams,
    pub history: Vec<super::probe::EpochRecord>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

/// Batch-of-one training over bags with best-balanced-accuracy
/// checkpointing and early stopping.
pub fn mil_train(
    bags: &[Bag],
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &MilConfig,
) -> Result<MilOutcome> {
    let mut classes: Vec<i32> = bags.iter().map(|b| b.label).collect();
    classes.sort_unstable();
    classes.dedup();
    let k = classes.len();
    let train_classes: std::collections::BTreeSet<i32> =
        train_idx.iter().map(|&i| bags[i].label).collect();
    if train_classes.len() < 2 {
        return Err(Error::Contract(format!(
            "train split has {} class(es), need at least 2",
            train_classes.len()
        )));
    }
    let class_index: BTreeMap<i32, usize> =
        classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let dim = bags[0].dim();
    let mut params = init_mil_params(cfg, dim, k);
    let mut opt = AdamWState::new(0.9, 0.999, 1e-8);

    let mut best: Option<(usize, f64, ParameterSet)> = None;
    let mut history = Vec::new();
    let mut stopped_epoch = 0;

    for epoch in 1..=cfg.epochs {
        let mut order = train_idx.to_vec();
        Stream::tagged_path(cfg.seed, &[0x318, epoch as u64]).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for &bi in &order {
            let bag = &bags[bi];
            let g: Graph<f32> = Graph::new();
            let vars = params.leaf_into(&g, true);
            let logits = bag_logits(&g, &vars, cfg.model, bag)?;
            let target = Tensor::from_fn(&[1, k], |j| {
                if j == class_index[&bag.label] {
                    1.0
                } else {
                    0.0
                }
            });
            let loss = g.cross_entropy_soft(logits, &target, 1.0)?;
            loss_sum += g.value(loss).item() as f64;
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

        let model = MilModelParams {
            model: cfg.model,
            params: params.clone(),
            classes: classes.clone(),
            dim,
        };
        let mut truth = Vec::new();
        let mut pred = Vec::new();
        for &vi in val_idx {
            truth.push(class_index[&bags[vi].label]);
            let (label, _) = mil_predict(&model, &bags[vi])?;
            pred.push(class_index[&label]);
        }
        let bal = balanced_accuracy(&Confusion::from_pairs(&truth, &pred, k));
        history.push(super::probe::EpochRecord {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_balanced_accuracy: bal,
        });
        let improved = best.as_ref().map(|(_, b, _)| bal > *b).unwrap_or(true);
        if improved {
            best = Some((epoch, bal, params.clone()));
        }
        stopped_epoch = epoch;
        if epoch - best.as_ref().unwrap().0 >= cfg.patience {
            break;
        }
    }

    let (best_epoch, _, best_params) = best.unwrap();
    Ok(MilOutcome {
        model: MilModelParams {
            model: cfg.model,
            params: best_params,
            classes,
            dim,
        },
        history,
        best_epoch,
        stopped_epoch,
    })
}

/// Predicted label and class probabilities for one bag.
pub fn mil_predict(model: &MilModelParams, bag: &Bag) -> Result<(i32, Vec<f32>)> {
    let g: Graph<f32> = Graph::new();
    let vars = model.params.leaf_into(&g, false);
    let logits = bag_logits(&g, &vars, model.model, bag)?;
    let probs = g.value(g.softmax_last(logits));
    let row = probs.data();
    let mut bi = 0;
    for j in 1..row.len() {
        if row[j] > row[bi] {
            bi = j;
        }
    }
    Ok((model.classes[bi], row.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_bag(n: usize, c: usize, seed: u64, label: i32) -> Bag {
        let mut rng = Stream::new(seed);
        Bag::new(
            format!("s{seed}"),
            Tensor::from_fn(&[n, c], |_| rng.uniform(-1.0, 1.0) as f32),
            label,
        )
        .unwrap()
    }

    fn permuted(bag: &Bag, seed: u64) -> Bag {
        let (n, c) = (bag.instances(), bag.dim());
        let mut order: Vec<usize> = (0..n).collect();
        Stream::new(seed).shuffle(&mut order);
        let mut data = Vec::with_capacity(n * c);
        for &i in &order {
            data.extend_from_slice(&bag.x.data()[i * c..(i + 1) * c]);
        }
        Bag::new(
            bag.slide_id.clone(),
            Tensor::new(&[n, c], data).unwrap(),
            bag.label,
        )
        .unwrap()
    }

    fn test_vars(model: MilModel, dim: usize, k: usize) -> (ParameterSet, MilConfig) {
        let cfg = MilConfig::new(model, 11);
        (init_mil_params(&cfg, dim, k), cfg)
    }

    #[test]
    fn abmil_singleton_attention_is_one() {
        let (params, _) = test_vars(MilModel::Abmil, 6, 3);
        let bag = rand_bag(1, 6, 3, 0);
        let g: Graph<f32> = Graph::new();
        let vars = params.leaf_into(&g, false);
        let (_, attn) = abmil_forward(&g, &vars, &bag.x).unwrap();
        assert_eq!(attn, vec![1.0]);
    }

    #[test]
    fn abmil_attention_sums_to_one_and_permutes_with_input() {
        let (params, _) = test_vars(MilModel::Abmil, 6, 3);
        let bag = rand_bag(9, 6, 4, 0);
        let g: Graph<f32> = Graph::new();
        let vars = params.leaf_into(&g, false);
        let (logits, attn) = abmil_forward(&g, &vars, &bag.x).unwrap();
        let s: f32 = attn.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);

        let perm = permuted(&bag, 77);
        let g2: Graph<f32> = Graph::new();
        let vars2 = params.leaf_into(&g2, false);
        let (logits2, attn2) = abmil_forward(&g2, &vars2, &perm.x).unwrap();
        // bit-equal logits under permutation
        assert_eq!(g.value(logits).data(), g2.value(logits2).data());
        // attention follows its instance
        for i in 0..bag.instances() {
            let row = &bag.x.data()[i * 6..(i + 1) * 6];
            let j = (0..perm.instances())
                .find(|&j| &perm.x.data()[j * 6..(j + 1) * 6] == row)
                .unwrap();
            assert_eq!(attn[i], attn2[j]);
        }
    }

    #[test]
    fn simlp_is_permutation_invariant_bit_exact() {
        let (params, _) = test_vars(MilModel::Simlp, 5, 2);
        let bag = rand_bag(12, 5, 8, 0);
        let perm = permuted(&bag, 31);
        let g: Graph<f32> = Graph::new();
        let vars = params.leaf_into(&g, false);
        let a = g.value(simlp_forward(&g, &vars, &bag.x).unwrap());
        let g2: Graph<f32> = Graph::new();
        let vars2 = params.leaf_into(&g2, false);
        let b = g2.value(simlp_forward(&g2, &vars2, &perm.x).unwrap());
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn simlp_identical_instances_mean_is_instance() {
        let (params, _) = test_vars(MilModel::Simlp, 4, 2);
        let one = rand_bag(1, 4, 5, 0);
        let mut data = Vec::new();
        for _ in 0..6 {
            data.extend_from_slice(one.x.data());
        }
        let many = Bag::new("m".into(), Tensor::new(&[6, 4], data).unwrap(), 0).unwrap();
        let g: Graph<f32> = Graph::new();
        let vars = params.leaf_into(&g, false);
        let a = g.value(simlp_forward(&g, &vars, &one.x).unwrap());
        let g2: Graph<f32> = Graph::new();
        let vars2 = params.leaf_into(&g2, false);
        let b = g2.value(simlp_forward(&g2, &vars2, &many.x).unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn duplicating_instances_keeps_simlp_logits() {
        let (params, _) = test_vars(MilModel::Simlp, 5, 3);
        let bag = rand_bag(7, 5, 13, 1);
        let mut data = bag.x.data().to_vec();
        data.extend_from_slice(bag.x.data());
        let doubled = Bag::new("d".into(), Tensor::new(&[14, 5], data).unwrap(), 1).unwrap();
        let g: Graph<f32> = Graph::new();
        let vars = params.leaf_into(&g, false);
        let a = g.value(simlp_forward(&g, &vars, &bag.x).unwrap());
        let g2: Graph<f32> = Graph::new();
        let vars2 = params.leaf_into(&g2, false);
        let b = g2.value(simlp_forward(&g2, &vars2, &doubled.x).unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    /// Bags whose label is carried by the majority instance offset.
    fn majority_bags(n_bags: usize, seed: u64) -> Vec<Bag> {
        let mut rng = Stream::new(seed);
        (0..n_bags)
            .map(|i| {
                let label = (i % 2) as i32;
                let n = 8 + rng.below(8) as usize;
                let x = Tensor::from_fn(&[n, 6], |j| {
                    let inst = j / 6;
                    // ~70% of instances carry the bag signal
                    let strong = inst % 10 < 7;
                    let center = if strong {
                        if label == 0 {
                            1.0
                        } else {
                            -1.0
                        }
                    } else {
                        0.0
                    };
                    (center + rng.gauss() * 0.4) as f32
                });
                Bag::new(format!("b{i}"), x, label).unwrap()
            })
            .collect()
    }

    #[test]
    fn learnable_fixture_loss_decreases_and_separates() {
        let bags = majority_bags(60, 21);
        let train: Vec<usize> = (0..40).collect();
        let val: Vec<usize> = (40..50).collect();
        let test: Vec<usize> = (50..60).collect();
        for model in [MilModel::Abmil, MilModel::Simlp] {
            let cfg = MilConfig {
                lr: 1e-3,
                ..MilConfig::new(model, 3)
            };
            let out = mil_train(&bags, &train, &val, &cfg).unwrap();
            let first = out.history.first().unwrap().train_loss;
            let fifth = out.history.get(4).map(|h| h.train_loss).unwrap_or(first);
            assert!(fifth < first, "{model:?}: {first} -> {fifth}");
            let mut truth = Vec::new();
            let mut pred = Vec::new();
            for &t in &test {
                truth.push(bags[t].label as usize);
                pred.push(mil_predict(&out.model, &bags[t]).unwrap().0 as usize);
            }
            let bal = balanced_accuracy(&Confusion::from_pairs(&truth, &pred, 2));
            assert!(bal >= 0.9, "{model:?}: test balanced accuracy {bal}");
        }
    }

    #[test]
    fn deterministic_seed_reproduces_metrics() {
        let bags = majority_bags(30, 5);
        let train: Vec<usize> = (0..20).collect();
        let val: Vec<usize> = (20..30).collect();
        let cfg = MilConfig::new(MilModel::Abmil, 9);
        let a = mil_train(&bags, &train, &val, &cfg).unwrap();
        let b = mil_train(&bags, &train, &val, &cfg).unwrap();
        assert_eq!(a.history, b.history);
    }
}
