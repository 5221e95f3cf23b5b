//! Self-distillation pre-training: student/teacher EMA, centering and
//! sharpening, multi-view loss, schedules and checkpointing.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use crate::augment::{multi_crop, AugmentConfig, FloatImage};
use crate::corpus::{patch_path, read_manifest, read_patch, PatchImage};
use crate::encoder::{
    batch_views, dino_head_forward, init_head_params, init_vit_params, vit_forward,
    DinoHeadConfig, ParameterSet, ViTConfig,
};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{AdamWState, Graph, Scalar, Tensor, Var};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Interpolates from `v0` at step 0 to `v1` at step `total`. Out-of-range
/// steps clamp with a warning on stderr.
pub fn schedule_value(kind: ScheduleKind, v0: f64, v1: f64, step: u64, total: u64) -> f64 {
    assert!(total >= 1, "schedule over zero steps");
    let step = if step > total {
        eprintln!("warning: schedule step {step} beyond total {total}, clamping");
        total
    } else {
        step
    };
    // endpoints are exact by contract
    if step == 0 {
        return v0;
    }
    if step == total {
        return v1;
    }
    match kind {
        ScheduleKind::Linear => v0 + (v1 - v0) * step as f64 / total as f64,
        ScheduleKind::Cosine => {
            v1 + (v0 - v1) * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()) / 2.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    /// Linear warmup over the first 5% of steps, then cosine decay to 1e-6.
    WarmupCosine,
    /// Constant learning rate fallback.
    Constant,
}

#[derive(Debug, Clone)]
pub struct DinoConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub wd_start: f64,
    pub wd_end: f64,
    pub momentum_start: f64,
    pub momentum_end: f64,
    pub teacher_temp: f64,
    pub student_temp: f64,
    pub center_momentum: f64,
    pub warmup_teacher_temp: f64,
    pub warmup_teacher_temp_epochs: usize,
    pub freeze_last_layer_epochs: usize,
    pub grad_clip: f64,
    pub lr_schedule: LrSchedule,
    /// Save a checkpoint every this many epochs (0 = last epoch only).
    pub checkpoint_every: usize,
}

impl Default for DinoConfig {
    fn default() -> Self {
        DinoConfig {
            epochs: 100,
            batch: 64,
            lr: 5e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            wd_start: 0.04,
            wd_end: 0.4,
            momentum_start: 0.9995,
            momentum_end: 1.0,
            teacher_temp: 0.04,
            student_temp: 0.1,
            center_momentum: 0.9,
            warmup_teacher_temp: 0.04,
            warmup_teacher_temp_epochs: 0,
            freeze_last_layer_epochs: 0,
            grad_clip: 3.0,
            lr_schedule: LrSchedule::WarmupCosine,
            checkpoint_every: 0,
        }
    }
}

impl DinoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.teacher_temp > 0.0 && self.teacher_temp <= self.student_temp) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < teacher_temp <= student_temp, got {} and {}",
                self.teacher_temp, self.student_temp
            )));
        }
        if !(self.momentum_start <= self.momentum_end && self.momentum_end <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "need momentum_start <= momentum_end <= 1, got {} and {}",
                self.momentum_start, self.momentum_end
            )));
        }
        if self.wd_start > self.wd_end {
            return Err(Error::InvalidParameter(format!(
                "need wd_start <= wd_end, got {} and {}",
                self.wd_start, self.wd_end
            )));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::InvalidParameter("epochs and batch must be positive".into()));
        }
        Ok(())
    }
}

/// Full training state: everything needed to resume or evaluate.
#[derive(Debug, Clone)]
pub struct DinoState {
    pub student: ParameterSet,
    pub teacher: ParameterSet,
    pub center: Tensor<f32>,
    pub opt: AdamWState,
    pub step: u64,
    pub epoch: u32,
}

/// `theta_t <- m * theta_t + (1 - m) * theta_s` per parameter.
pub fn teacher_ema_update(teacher: &mut ParameterSet, student: &ParameterSet, m: f64) -> Result<()> {
    if !teacher.names().eq(student.names()) {
        return Err(Error::Contract(
            "teacher/student parameter names differ".into(),
        ));
    }
    let m = m as f32;
    for (name, t) in teacher.map_mut() {
        let s = &student.map()[name];
        let td = t.data_mut();
        let sd = s.data();
        for i in 0..td.len() {
            td[i] = m * td[i] + (1.0 - m) * sd[i];
        }
    }
    Ok(())
}

/// `c <- m_c * c + (1 - m_c) * mean_rows(teacher_logits)`.
pub fn center_update(center: &mut Tensor<f32>, teacher_logits: &Tensor<f32>, m_c: f64) {
    let k = center.numel();
    let rows = teacher_logits.numel() / k;
    let mut mean = vec![0f64; k];
    for r in 0..rows {
        for j in 0..k {
            mean[j] += teacher_logits.data()[r * k + j] as f64;
        }
    }
    let cd = center.data_mut();
    for j in 0..k {
        cd[j] = (m_c * cd[j] as f64 + (1.0 - m_c) * mean[j] / rows as f64) as f32;
    }
}

/// Multi-view self-distillation loss.
///
/// The first two student views must be the global crops the teacher saw.
/// Teacher targets are `softmax((t - c) / tau_t)` with gradients severed (the
/// logits enter as plain tensors). The loss is the mean over ordered pairs
/// `(g, v)` with `v != g` of the per-batch mean cross-entropy.
pub fn dino_loss<T: Scalar>(
    g: &Graph<T>,
    student_views: &[Var],
    teacher_globals: &[Tensor<T>],
    center: &Tensor<T>,
    tau_s: T,
    tau_t: T,
) -> Result<Var> {
    if teacher_globals.len() != 2 {
        return Err(Error::Contract(format!(
            "need exactly 2 teacher global views, got {}",
            teacher_globals.len()
        )));
    }
    if student_views.len() < 2 {
        return Err(Error::Contract(format!(
            "need at least 2 student views, got {}",
            student_views.len()
        )));
    }
    let mut targets = Vec::with_capacity(2);
    for t in teacher_globals {
        targets.push(sharpened_targets(t, center, tau_t)?);
    }
    let n_views = student_views.len();
    let mut total: Option<Var> = None;
    for (gi, target) in targets.iter().enumerate() {
        for (vi, &sv) in student_views.iter().enumerate() {
            if vi == gi {
                continue;
            }
            let ce = g.cross_entropy_soft(sv, target, tau_s)?;
            total = Some(match total {
                None => ce,
                Some(acc) => g.add(acc, ce)?,
            });
        }
    }
    let pairs = 2 * (n_views - 1);
    Ok(g.scale(total.unwrap(), T::ONE / T::from_f64(pairs as f64)))
}

/// `softmax((logits - center) / tau)` row-wise, as a plain tensor.
pub fn sharpened_targets<T: Scalar>(
    logits: &Tensor<T>,
    center: &Tensor<T>,
    tau: T,
) -> Result<Tensor<T>> {
    if tau <= T::ZERO {
        return Err(Error::InvalidParameter("teacher temperature must be positive".into()));
    }
    let k = center.numel();
    if logits.numel() % k != 0 {
        return Err(Error::ShapeMismatch {
            op: "sharpened_targets",
            lhs: logits.shape().to_vec(),
            rhs: center.shape().to_vec(),
        });
    }
    let rows = logits.numel() / k;
    let mut out = Tensor::zeros(&[rows, k]);
    {
        let od = out.data_mut();
        let ld = logits.data();
        let cd = center.data();
        for r in 0..rows {
            let row = &mut od[r * k..(r + 1) * k];
            let mut m = T::from_f64(f64::NEG_INFINITY);
            for j in 0..k {
                row[j] = (ld[r * k + j] - cd[j]) / tau;
                m = m.maximum(row[j]);
            }
            let mut sum = T::ZERO;
            for x in row.iter_mut() {
                *x = (*x - m).exp_fast();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
    }
    Ok(out)
}

/// Parameters exempt from weight decay: biases, LayerNorm affine parameters,
/// the class token and positional tables.
pub fn wd_exempt(name: &str) -> bool {
    name.ends_with(".bias")
        || name.ends_with(".gamma")
        || name.ends_with(".beta")
        || name == "cls"
        || name == "pos"
}

#[derive(Debug, Clone)]
pub struct PretrainSummary {
    pub steps: u64,
    pub epochs: usize,
    pub patches: usize,
    /// Mean loss per epoch, in epoch order.
    pub epoch_mean_loss: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

struct LossLog {
    file: std::io::BufWriter<std::fs::File>,
}

impl LossLog {
    fn create(path: &Path) -> Result<Self> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(b"step,epoch,loss,lr,wd,momentum\n")?;
        Ok(LossLog { file })
    }

    fn row(&mut self, step: u64, epoch: usize, loss: f64, lr: f64, wd: f64, m: f64) -> Result<()> {
        writeln!(self.file, "{step},{epoch},{loss},{lr},{wd},{m}")?;
        Ok(())
    }
}

const TAG_INIT_VIT: u64 = 0xD1;
const TAG_INIT_HEAD: u64 = 0xD2;
const TAG_SHUFFLE: u64 = 0xD3;
const TAG_AUG: u64 = 0xD4;

/// Per-step schedule values, exposed for endpoint tests.
pub fn step_schedules(cfg: &DinoConfig, step: u64, total_steps: u64) -> (f64, f64, f64) {
    let last = total_steps.saturating_sub(1).max(1);
    let wd = schedule_value(ScheduleKind::Cosine, cfg.wd_start, cfg.wd_end, step, last);
    let momentum = schedule_value(
        ScheduleKind::Linear,
        cfg.momentum_start,
        cfg.momentum_end,
        step,
        last,
    );
    let lr = match cfg.lr_schedule {
        LrSchedule::Constant => cfg.lr,
        LrSchedule::WarmupCosine => {
            let warmup = ((total_steps as f64) * 0.05).ceil() as u64;
            if step < warmup {
                cfg.lr * (step + 1) as f64 / warmup as f64
            } else {
                let rest = (last - warmup).max(1);
                schedule_value(ScheduleKind::Cosine, cfg.lr, 1e-6, step - warmup, rest)
            }
        }
    };
    (lr, wd, momentum)
}

fn teacher_temp_at(cfg: &DinoConfig, epoch: usize) -> f64 {
    if epoch < cfg.warmup_teacher_temp_epochs {
        let t = epoch as f64 / cfg.warmup_teacher_temp_epochs as f64;
        cfg.warmup_teacher_temp + (cfg.teacher_temp - cfg.warmup_teacher_temp) * t
    } else {
        cfg.teacher_temp
    }
}

/// Runs a forward pass through the frozen teacher, returning head logits.
pub fn teacher_logits(
    teacher: &ParameterSet,
    vit: &ViTConfig,
    views: &[&FloatImage],
) -> Result<Tensor<f32>> {
    let g: Graph<f32> = Graph::new();
    let vars = teacher.leaf_into(&g, false);
    let imgs = g.constant(batch_views(views)?);
    let cls = vit_forward(&g, &vars, vit, imgs)?;
    let logits = dino_head_forward(&g, &vars, cls)?;
    Ok(g.value(logits))
}

/// Teacher-backbone class embeddings (projection head excluded).
pub fn teacher_embeddings(
    teacher: &ParameterSet,
    vit: &ViTConfig,
    views: &[&FloatImage],
) -> Result<Tensor<f32>> {
    let g: Graph<f32> = Graph::new();
    let vars = teacher.leaf_into(&g, false);
    let imgs = g.constant(batch_views(views)?);
    let cls = vit_forward(&g, &vars, vit, imgs)?;
    Ok(g.value(cls))
}

/// DINO pre-training over a corpus directory. Emits a per-step loss CSV and
/// checkpoints under `out_dir`, always including the final epoch.
pub fn pretrain(
    corpus_dir: &Path,
    out_dir: &Path,
    cfg: &DinoConfig,
    vit: &ViTConfig,
    head: &DinoHeadConfig,
    aug: &AugmentConfig,
    seed: u64,
) -> Result<PretrainSummary> {
    cfg.validate()?;
    vit.validate()?;
    head.validate()?;
    aug.validate()?;
    if aug.global_size != vit.image_size {
        return Err(Error::InvalidParameter(format!(
            "global view size {} must match encoder image size {}",
            aug.global_size, vit.image_size
        )));
    }

    let manifest = read_manifest(&corpus_dir.join("manifest.csv"))?;
    if manifest.is_empty() {
        return Err(Error::Contract("corpus manifest is empty".into()));
    }
    let patches: Vec<PatchImage> = manifest
        .iter()
        .map(|row| read_patch(&patch_path(corpus_dir, row)))
        .collect::<Result<_>>()?;

    std::fs::create_dir_all(out_dir)?;
    let mut log = LossLog::create(&out_dir.join("loss.csv"))?;

    let mut student = init_vit_params(vit, Stream::tagged(seed, TAG_INIT_VIT).next_u64())?;
    init_head_params(
        head,
        vit.embed_dim,
        Stream::tagged(seed, TAG_INIT_HEAD).next_u64(),
        &mut student,
    )?;
    let teacher = student.clone();
    let mut state = DinoState {
        student,
        teacher,
        center: Tensor::zeros(&[head.out_dim]),
        opt: AdamWState::new(cfg.betas.0, cfg.betas.1, cfg.eps),
        step: 0,
        epoch: 0,
    };

    let steps_per_epoch = patches.len().div_ceil(cfg.batch) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let mut epoch_mean_loss = Vec::with_capacity(cfg.epochs);
    let mut checkpoints: Vec<PathBuf> = Vec::new();
    let mut last_checkpoint: Option<PathBuf> = None;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..patches.len()).collect();
        Stream::tagged_path(seed, &[TAG_SHUFFLE, epoch as u64]).shuffle(&mut order);
        let tau_t = teacher_temp_at(cfg, epoch);
        let mut loss_sum = 0.0;
        let mut loss_count = 0u64;

        for chunk in order.chunks(cfg.batch) {
            let views: Vec<_> = chunk
                .iter()
                .map(|&pi| {
                    let mut rng = Stream::tagged_path(seed, &[TAG_AUG, epoch as u64, pi as u64]);
                    multi_crop(&patches[pi], aug, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let b = views.len();

            // view-major global batch: [g0 of all, g1 of all]
            let mut global_refs: Vec<&FloatImage> = Vec::with_capacity(2 * b);
            for v in 0..2 {
                for vs in &views {
                    global_refs.push(&vs.globals[v]);
                }
            }
            let t_logits = teacher_logits(&state.teacher, vit, &global_refs)?;
            let k = head.out_dim;
            let t_g0 = Tensor::new(&[b, k], t_logits.data()[..b * k].to_vec())?;
            let t_g1 = Tensor::new(&[b, k], t_logits.data()[b * k..].to_vec())?;

            // student graph over all views
            let g: Graph<f32> = Graph::new();
            let vars = state.student.leaf_into(&g, true);
            let g_imgs = g.constant(batch_views(&global_refs)?);
            let g_cls = vit_forward(&g, &vars, vit, g_imgs)?;
            let g_logits = dino_head_forward(&g, &vars, g_cls)?;
            let mut student_views = vec![
                g.slice_rows(g_logits, 0, b)?,
                g.slice_rows(g_logits, b, b)?,
            ];
            if aug.n_local > 0 {
                let mut local_refs: Vec<&FloatImage> = Vec::with_capacity(aug.n_local * b);
                for v in 0..aug.n_local {
                    for vs in &views {
                        local_refs.push(&vs.locals[v]);
                    }
                }
                let l_imgs = g.constant(batch_views(&local_refs)?);
                let l_cls = vit_forward(&g, &vars, vit, l_imgs)?;
                let l_logits = dino_head_forward(&g, &vars, l_cls)?;
                for v in 0..aug.n_local {
                    student_views.push(g.slice_rows(l_logits, v * b, b)?);
                }
            }

            let loss = dino_loss(
                &g,
                &student_views,
                &[t_g0.clone(), t_g1.clone()],
                &state.center,
                cfg.student_temp as f32,
                tau_t as f32,
            )?;
            let loss_val = g.value(loss).item() as f64;
            if !loss_val.is_finite() {
                return Err(Error::TrainingAborted {
                    step: state.step,
                    reason: format!("non-finite loss {loss_val}"),
                    last_checkpoint: last_checkpoint.map(|p| p.display().to_string()),
                });
            }
            g.backward(loss)?;

            let mut grads: std::collections::BTreeMap<String, Tensor<f32>> =
                std::collections::BTreeMap::new();
            for (name, var) in &vars {
                if let Some(grad) = g.grad(*var) {
                    grads.insert(name.clone(), grad);
                }
            }
            drop(g);
            if epoch < cfg.freeze_last_layer_epochs {
                grads.remove("head.last.dir");
            }
            clip_global_norm(&mut grads, cfg.grad_clip);

            let (lr, wd, momentum) = step_schedules(cfg, state.step, total_steps);
            state
                .opt
                .step(state.student.map_mut(), &grads, lr, |name| {
                    if wd_exempt(name) {
                        0.0
                    } else {
                        wd
                    }
                })
                .map_err(|e| Error::TrainingAborted {
                    step: state.step,
                    reason: e.to_string(),
                    last_checkpoint: None,
                })?;
            teacher_ema_update(&mut state.teacher, &state.student, momentum)?;
            center_update(&mut state.center, &t_logits, cfg.center_momentum);

            log.row(state.step, epoch, loss_val, lr, wd, momentum)?;
            loss_sum += loss_val;
            loss_count += 1;
            state.step += 1;
        }

        epoch_mean_loss.push(loss_sum / loss_count as f64);
        state.epoch = (epoch + 1) as u32;
        let is_last = epoch + 1 == cfg.epochs;
        let scheduled =
            cfg.checkpoint_every > 0 && (epoch + 1).is_multiple_of(cfg.checkpoint_every);
        if is_last || scheduled {
            let path = out_dir.join(format!("checkpoint_ep{:04}.stnc", epoch + 1));
            save_checkpoint(&path, &state)?;
            checkpoints.push(path.clone());
            last_checkpoint = Some(path);
        }
    }
    log.file.flush()?;

    Ok(PretrainSummary {
        steps: state.step,
        epochs: cfg.epochs,
        patches: patches.len(),
        epoch_mean_loss,
        checkpoints: checkpoints.clone(),
        final_checkpoint: checkpoints.last().unwrap().clone(),
        loss_log: out_dir.join("loss.csv"),
    })
}

/// Scales all gradients by `clip/norm` when the global L2 norm exceeds `clip`.
pub fn clip_global_norm(grads: &mut std::collections::BTreeMap<String, Tensor<f32>>, clip: f64) {
    if clip <= 0.0 {
        return;
    }
    let norm: f64 = grads.values().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if norm > clip {
        let scale = (clip / norm) as f32;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
}

/// Fraction of rows whose argmax hits the single most frequent output
/// dimension; near 1.0 indicates representational collapse.
pub fn argmax_concentration(logits: &Tensor<f32>, k: usize) -> f64 {
    let rows = logits.numel() / k;
    let mut counts = vec![0usize; k];
    for r in 0..rows {
        let row = &logits.data()[r * k..(r + 1) * k];
        let mut best = 0;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        counts[best] += 1;
    }
    counts.into_iter().max().unwrap_or(0) as f64 / rows as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_exact() {
        // momentum endpoints
        assert_eq!(
            schedule_value(ScheduleKind::Linear, 0.9995, 1.0, 0, 100),
            0.9995
        );
        assert_eq!(schedule_value(ScheduleKind::Linear, 0.9995, 1.0, 100, 100), 1.0);
        // weight decay endpoints
        assert_eq!(schedule_value(ScheduleKind::Cosine, 0.04, 0.4, 0, 77), 0.04);
        assert_eq!(schedule_value(ScheduleKind::Cosine, 0.04, 0.4, 77, 77), 0.4);
        // cosine midpoint is the average
        let mid = schedule_value(ScheduleKind::Cosine, 0.0, 1.0, 50, 100);
        assert!((mid - 0.5).abs() < 1e-12);
    }

    #[test]
    fn schedule_clamps_out_of_range() {
        let v = schedule_value(ScheduleKind::Linear, 0.0, 1.0, 150, 100);
        assert_eq!(v, 1.0);
    }

    #[test]
    fn ema_update_cases() {
        let mut teacher = ParameterSet::new();
        teacher.insert("w", Tensor::scalar(0.0));
        let mut student = ParameterSet::new();
        student.insert("w", Tensor::scalar(2.0));

        let mut t1 = teacher.clone();
        teacher_ema_update(&mut t1, &student, 1.0).unwrap();
        assert_eq!(t1.map()["w"].item(), 0.0);

        let mut t2 = teacher.clone();
        teacher_ema_update(&mut t2, &student, 0.0).unwrap();
        assert_eq!(t2.map()["w"].item(), 2.0);

        let mut t3 = teacher.clone();
        teacher_ema_update(&mut t3, &student, 0.5).unwrap();
        assert_eq!(t3.map()["w"].item(), 1.0);
    }

    #[test]
    fn ema_rejects_name_mismatch() {
        let mut teacher = ParameterSet::new();
        teacher.insert("a", Tensor::scalar(0.0));
        let mut student = ParameterSet::new();
        student.insert("b", Tensor::scalar(0.0));
        assert!(teacher_ema_update(&mut teacher, &student, 0.5).is_err());
    }

    #[test]
    fn center_update_cases() {
        let mut c = Tensor::zeros(&[3]);
        let logits = Tensor::full(&[4, 3], 1.0);
        center_update(&mut c, &logits, 0.9);
        for &v in c.data() {
            assert!((v - 0.1).abs() < 1e-7);
        }
        // fixed point: batch mean equals center
        let mut c2 = Tensor::full(&[3], 1.0);
        center_update(&mut c2, &logits, 0.9);
        for &v in c2.data() {
            assert!((v - 1.0).abs() < 1e-7);
        }
        // m_c = 0 adopts the batch mean
        let mut c3 = Tensor::full(&[3], 5.0);
        center_update(&mut c3, &logits, 0.0);
        for &v in c3.data() {
            assert!((v - 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn dino_loss_uniform_teacher_uniform_student_is_ln_k() {
        let k = 8;
        let g: Graph<f64> = Graph::new();
        let s0 = g.leaf(Tensor::zeros(&[2, k]), true);
        let s1 = g.leaf(Tensor::zeros(&[2, k]), true);
        let teacher = [Tensor::zeros(&[2, k]), Tensor::zeros(&[2, k])];
        let center = Tensor::zeros(&[k]);
        let loss = dino_loss(&g, &[s0, s1], &teacher, &center, 0.1, 0.04).unwrap();
        assert!((g.value(loss).item() - (k as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn dino_loss_one_hot_teacher_limit() {
        // K=2, single pair: teacher sharply peaked on dim 0, student [ln 3, 0]
        // with tau_s = 1 gives -ln 0.75
        let g: Graph<f64> = Graph::new();
        let s0 = g.leaf(Tensor::new(&[1, 2], vec![3f64.ln(), 0.0]).unwrap(), true);
        let s1 = g.leaf(Tensor::new(&[1, 2], vec![3f64.ln(), 0.0]).unwrap(), true);
        let teacher = [
            Tensor::new(&[1, 2], vec![1000.0, 0.0]).unwrap(),
            Tensor::new(&[1, 2], vec![1000.0, 0.0]).unwrap(),
        ];
        let center = Tensor::zeros(&[2]);
        let loss = dino_loss(&g, &[s0, s1], &teacher, &center, 1.0, 1.0).unwrap();
        assert!((g.value(loss).item() - (-0.75f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn dino_loss_center_shift_invariant() {
        let mut rng = Stream::new(17);
        let k = 6;
        let t0 = Tensor::from_fn(&[3, k], |_| rng.uniform(-1.0, 1.0));
        let t1 = Tensor::from_fn(&[3, k], |_| rng.uniform(-1.0, 1.0));
        let center = Tensor::from_fn(&[k], |_| rng.uniform(-0.5, 0.5));
        let sv = Tensor::from_fn(&[3, k], |_| rng.uniform(-1.0, 1.0));

        let eval = |teacher: [Tensor<f64>; 2], center: Tensor<f64>| -> f64 {
            let g: Graph<f64> = Graph::new();
            let s0 = g.leaf(sv.clone(), true);
            let s1 = g.leaf(sv.clone(), true);
            let loss = dino_loss(&g, &[s0, s1], &teacher, &center, 0.1, 0.04).unwrap();
            g.value(loss).item()
        };
        let base = eval([t0.clone(), t1.clone()], center.clone());
        let delta = 0.37;
        let shifted = eval(
            [t0.map(|x| x + delta), t1.map(|x| x + delta)],
            center.map(|x| x + delta),
        );
        assert!((base - shifted).abs() < 1e-5);
    }

    #[test]
    fn dino_loss_needs_two_views() {
        let g: Graph<f64> = Graph::new();
        let s0 = g.leaf(Tensor::zeros(&[1, 2]), true);
        let teacher = [Tensor::zeros(&[1, 2]), Tensor::zeros(&[1, 2])];
        let center = Tensor::zeros(&[2]);
        assert!(dino_loss(&g, &[s0], &teacher, &center, 0.1, 0.04).is_err());
    }

    #[test]
    fn dino_loss_gradients_reach_student_only() {
        let g: Graph<f64> = Graph::new();
        let s0 = g.leaf(Tensor::full(&[1, 4], 0.1), true);
        let s1 = g.leaf(Tensor::full(&[1, 4], -0.2), true);
        let teacher = [
            Tensor::from_fn(&[1, 4], |i| i as f64),
            Tensor::from_fn(&[1, 4], |i| -(i as f64)),
        ];
        let center = Tensor::zeros(&[4]);
        let loss = dino_loss(&g, &[s0, s1], &teacher, &center, 0.1, 0.04).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(s0).is_some());
        assert!(g.grad(s1).is_some());
    }

    #[test]
    fn grad_clip_caps_global_norm() {
        let mut grads = std::collections::BTreeMap::new();
        grads.insert("a".to_string(), Tensor::full(&[4], 10.0f32));
        grads.insert("b".to_string(), Tensor::full(&[9], 10.0f32));
        clip_global_norm(&mut grads, 3.0);
        let norm: f64 = grads.values().map(|g| g.sq_norm()).sum::<f64>().sqrt();
        assert!((norm - 3.0).abs() < 1e-4);
        // below the clip nothing changes
        let mut small = std::collections::BTreeMap::new();
        small.insert("a".to_string(), Tensor::full(&[2], 0.1f32));
        let before = small["a"].clone();
        clip_global_norm(&mut small, 3.0);
        assert_eq!(small["a"], before);
    }

    #[test]
    fn argmax_concentration_detects_collapse() {
        let collapsed = Tensor::from_fn(&[10, 4], |i| if i % 4 == 2 { 5.0 } else { 0.0 });
        assert_eq!(argmax_concentration(&collapsed, 4), 1.0);
        let spread = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        assert_eq!(argmax_concentration(&spread, 4), 0.25);
    }

    use crate::rng::Stream;
}
