//! Flat `key = value` configuration with documented, provenance-tagged
//! defaults and cross-field validation.

use crate::augment::{AugmentConfig, JitterConfig};
use crate::corpus::{default_classes, CorpusConfig};
use crate::dino::{DinoConfig, LrSchedule};
use crate::downstream::{MilConfig, MilModel, ProbeConfig, ProbeMode};
use crate::encoder::{DinoHeadConfig, ViTConfig};
use crate::error::{Error, Result};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
enum Parsed {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
}

impl fmt::Display for Parsed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Parsed::Int(v) => write!(f, "{v}"),
            Parsed::Float(v) => write!(f, "{v}"),
            Parsed::Bool(v) => write!(f, "{v}"),
            Parsed::Str(v) => write!(f, "{v}"),
        }
    }
}

struct KeySpec {
    key: &'static str,
    default: Value,
    /// `paper` for values stated in the source protocol, `desk` for
    /// desk-scale defaults of this artifact.
    provenance: &'static str,
    doc: &'static str,
}

macro_rules! keys {
    ($(($key:literal, $default:expr, $prov:literal, $doc:literal)),* $(,)?) => {
        &[$(KeySpec { key: $key, default: $default, provenance: $prov, doc: $doc }),*]
    };
}

const KEYS: &[KeySpec] = keys![
    // corpus
    ("corpus.classes", Value::Int(4), "desk", "number of synthetic stain classes (2-8)"),
    ("corpus.slides_per_class", Value::Int(50), "desk", "slides generated per class"),
    ("corpus.slide_size", Value::Int(1120), "desk", "slide side in pixels"),
    ("corpus.patch_size", Value::Int(224), "paper", "non-overlapping window side"),
    ("corpus.keep_frac", Value::Float(0.25), "desk", "minimum foreground fraction to keep a window"),
    ("corpus.cap", Value::Int(25), "desk", "max sampled patches per slide (protocol uses 100)"),
    // encoder
    ("vit.preset", Value::Str("vit-micro"), "desk", "geometry preset: vit-micro, vit-small, vit-base"),
    ("vit.image_size", Value::Int(0), "desk", "input side; 0 follows the preset"),
    ("vit.patch_size", Value::Int(0), "desk", "token patch side; 0 follows the preset"),
    ("vit.embed_dim", Value::Int(0), "desk", "embedding width; 0 follows the preset"),
    ("vit.depth", Value::Int(0), "desk", "transformer blocks; 0 follows the preset"),
    ("vit.heads", Value::Int(0), "desk", "attention heads; 0 follows the preset"),
    ("vit.mlp_ratio", Value::Int(4), "desk", "MLP expansion ratio"),
    // projection head
    ("head.hidden", Value::Int(256), "desk", "head hidden width (protocol uses 2048)"),
    ("head.bottleneck", Value::Int(64), "desk", "bottleneck width (protocol uses 256)"),
    ("head.out_dim", Value::Int(1024), "desk", "output prototypes (protocol uses 65536)"),
    ("head.use_bn", Value::Bool(false), "paper", "batch-norm head variant"),
    ("head.norm_last_layer", Value::Bool(true), "paper", "weight-normalize the final layer with unit gain"),
    // augmentation
    ("augment.global_size", Value::Int(0), "desk", "global view side; 0 follows vit.image_size"),
    ("augment.local_size", Value::Int(0), "desk", "local view side; 0 means half the global side"),
    ("augment.n_local", Value::Int(8), "paper", "local views per patch"),
    ("augment.global_scale_lo", Value::Float(0.4), "paper", "global crop area fraction, low"),
    ("augment.global_scale_hi", Value::Float(1.0), "paper", "global crop area fraction, high"),
    ("augment.local_scale_lo", Value::Float(0.05), "paper", "local crop area fraction, low"),
    ("augment.local_scale_hi", Value::Float(0.4), "paper", "local crop area fraction, high"),
    ("augment.hflip_p", Value::Float(0.5), "paper", "horizontal flip probability"),
    ("augment.vflip_p", Value::Float(0.0), "paper", "vertical flip probability"),
    ("augment.grayscale_p", Value::Float(0.2), "paper", "grayscale probability"),
    ("augment.jitter_brightness", Value::Float(0.8), "paper", "brightness jitter strength"),
    ("augment.jitter_contrast", Value::Float(0.8), "paper", "contrast jitter strength"),
    ("augment.jitter_saturation", Value::Float(0.4), "paper", "saturation jitter strength"),
    ("augment.jitter_hue", Value::Float(0.2), "paper", "hue jitter strength (turns)"),
    ("augment.jitter_p", Value::Float(0.8), "paper", "color jitter probability"),
    ("augment.blur_sigma_lo", Value::Float(0.1), "paper", "Gaussian blur sigma, low"),
    ("augment.blur_sigma_hi", Value::Float(2.0), "paper", "Gaussian blur sigma, high"),
    ("augment.global_blur_p1", Value::Float(1.0), "paper", "blur probability, global view 1"),
    ("augment.global_blur_p2", Value::Float(0.1), "paper", "blur probability, global view 2"),
    ("augment.local_blur_p", Value::Float(0.5), "paper", "blur probability, local views"),
    ("augment.solarize_p", Value::Float(0.2), "paper", "solarize probability, global view 2"),
    ("augment.solarize_threshold", Value::Float(0.5), "paper", "solarize threshold"),
    ("augment.normalize_mean", Value::Float(0.5), "paper", "per-channel normalization mean"),
    ("augment.normalize_std", Value::Float(0.5), "paper", "per-channel normalization std"),
    // self-distillation
    ("dino.epochs", Value::Int(100), "paper", "pre-training epochs"),
    ("dino.batch", Value::Int(64), "desk", "batch size (protocol uses 256)"),
    ("dino.lr", Value::Float(5e-4), "paper", "peak learning rate"),
    ("dino.beta1", Value::Float(0.9), "paper", "AdamW beta1"),
    ("dino.beta2", Value::Float(0.999), "paper", "AdamW beta2"),
    ("dino.eps", Value::Float(1e-8), "paper", "AdamW epsilon"),
    ("dino.wd_start", Value::Float(0.04), "paper", "weight decay at step 0 (cosine to wd_end)"),
    ("dino.wd_end", Value::Float(0.4), "paper", "weight decay at the final step"),
    ("dino.momentum_start", Value::Float(0.9995), "paper", "teacher EMA momentum at step 0 (linear)"),
    ("dino.momentum_end", Value::Float(1.0), "paper", "teacher EMA momentum at the final step"),
    ("dino.teacher_temp", Value::Float(0.04), "paper", "teacher softmax temperature"),
    ("dino.student_temp", Value::Float(0.1), "paper", "student softmax temperature"),
    ("dino.center_momentum", Value::Float(0.9), "paper", "center EMA momentum"),
    ("dino.warmup_teacher_temp", Value::Float(0.04), "paper", "teacher temperature during warmup"),
    ("dino.warmup_teacher_temp_epochs", Value::Int(0), "paper", "teacher temperature warmup epochs"),
    ("dino.freeze_last_layer_epochs", Value::Int(0), "paper", "epochs with the head output layer frozen"),
    ("dino.grad_clip", Value::Float(3.0), "desk", "global gradient-norm clip"),
    ("dino.lr_schedule", Value::Str("warmup-cosine"), "desk", "warmup-cosine or constant"),
    ("dino.checkpoint_every", Value::Int(5), "desk", "checkpoint cadence in epochs (0 = last only)"),
    // probes
    ("probe.mode", Value::Str("linear"), "paper", "linear or mlp"),
    ("probe.mlp_hidden", Value::Int(0), "desk", "MLP probe hidden width; 0 matches input dim"),
    ("probe.epochs", Value::Int(20), "paper", "probe training epochs"),
    ("probe.batch", Value::Int(128), "paper", "probe batch size"),
    ("probe.lr", Value::Float(1e-4), "paper", "probe learning rate"),
    ("probe.wd", Value::Float(1e-4), "paper", "probe weight decay"),
    ("probe.patience", Value::Int(5), "paper", "early stopping patience in epochs"),
    // MIL
    ("mil.model", Value::Str("abmil"), "paper", "abmil or simlp"),
    ("mil.attn_dim", Value::Int(128), "desk", "gated-attention width"),
    ("mil.hidden", Value::Int(0), "desk", "mean-pool classifier hidden width; 0 matches input dim"),
    ("mil.epochs", Value::Int(20), "paper", "bag training epochs"),
    ("mil.lr", Value::Float(1e-4), "paper", "bag learning rate"),
    ("mil.wd", Value::Float(1e-4), "paper", "bag weight decay"),
    ("mil.patience", Value::Int(5), "paper", "early stopping patience in epochs"),
    // harness
    ("harness.folds", Value::Int(5), "paper", "stratified cross-validation folds"),
    ("harness.split_train", Value::Float(0.5), "paper", "3-way split train ratio"),
    ("harness.split_val", Value::Float(0.2), "paper", "3-way split val ratio"),
    ("harness.split_test", Value::Float(0.3), "paper", "3-way split test ratio"),
    ("harness.few_ratios", Value::Str("0.1,0.25,0.5,0.75,1.0"), "desk", "few-ratio learning grid"),
    ("harness.ablate_caps", Value::Str("10,25"), "desk", "per-slide caps for the data-ratio study"),
    ("harness.retrieval_k_max", Value::Int(20), "paper", "retrieval K sweep upper bound"),
];

/// Parsed, validated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<&'static str, Parsed>,
    explicit: BTreeSet<&'static str>,
}

impl Default for Config {
    fn default() -> Self {
        let values = KEYS
            .iter()
            .map(|spec| {
                let v = match &spec.default {
                    Value::Int(v) => Parsed::Int(*v),
                    Value::Float(v) => Parsed::Float(*v),
                    Value::Bool(v) => Parsed::Bool(*v),
                    Value::Str(v) => Parsed::Str(v.to_string()),
                };
                (spec.key, v)
            })
            .collect();
        Config {
            values,
            explicit: BTreeSet::new(),
        }
    }
}

/// Parses `key = value` lines with `#` comments. Unknown keys, type
/// mismatches, duplicates and failed cross-checks are errors carrying line
/// numbers.
pub fn parse_config(text: &str) -> Result<Config> {
    let mut cfg = Config::default();
    let mut seen: BTreeMap<&'static str, usize> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
            line: line_no,
            reason: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = key.trim();
        let value = value.trim();
        let spec = KEYS
            .iter()
            .find(|s| s.key == key)
            .ok_or_else(|| Error::Config {
                line: line_no,
                reason: format!("unknown key `{key}`"),
            })?;
        if let Some(first) = seen.get(spec.key) {
            return Err(Error::Config {
                line: line_no,
                reason: format!("duplicate key `{key}` (first set at line {first})"),
            });
        }
        seen.insert(spec.key, line_no);
        let parsed = match &spec.default {
            Value::Int(_) => Parsed::Int(value.parse().map_err(|_| Error::Config {
                line: line_no,
                reason: format!("`{key}` expects an integer, got `{value}`"),
            })?),
            Value::Float(_) => Parsed::Float(value.parse().map_err(|_| Error::Config {
                line: line_no,
                reason: format!("`{key}` expects a number, got `{value}`"),
            })?),
            Value::Bool(_) => Parsed::Bool(value.parse().map_err(|_| Error::Config {
                line: line_no,
                reason: format!("`{key}` expects true/false, got `{value}`"),
            })?),
            Value::Str(_) => Parsed::Str(value.to_string()),
        };
        cfg.values.insert(spec.key, parsed);
        cfg.explicit.insert(spec.key);
    }
    cfg.cross_check().map_err(|e| match e {
        Error::Config { line: 0, reason } => Error::Config {
            line: 0,
            reason: format!("cross-field check failed: {reason}"),
        },
        other => other,
    })?;
    Ok(cfg)
}

pub fn parse_config_file(path: &std::path::Path) -> Result<Config> {
    parse_config(&std::fs::read_to_string(path)?)
}

impl Config {
    fn int(&self, key: &str) -> i64 {
        match &self.values[key] {
            Parsed::Int(v) => *v,
            other => panic!("{key} is not an int: {other:?}"),
        }
    }

    fn float(&self, key: &str) -> f64 {
        match &self.values[key] {
            Parsed::Float(v) => *v,
            Parsed::Int(v) => *v as f64,
            other => panic!("{key} is not a number: {other:?}"),
        }
    }

    fn boolean(&self, key: &str) -> bool {
        match &self.values[key] {
            Parsed::Bool(v) => *v,
            other => panic!("{key} is not a bool: {other:?}"),
        }
    }

    fn string(&self, key: &str) -> String {
        match &self.values[key] {
            Parsed::Str(v) => v.clone(),
            other => panic!("{key} is not a string: {other:?}"),
        }
    }

    fn cross_check(&self) -> Result<()> {
        let fail = |reason: String| Err(Error::Config { line: 0, reason });
        let vit = self.vit_config()?;
        if vit.image_size % vit.patch_size != 0 {
            return fail(format!(
                "vit.image_size {} not divisible by vit.patch_size {}",
                vit.image_size, vit.patch_size
            ));
        }
        if vit.embed_dim % vit.heads != 0 {
            return fail(format!(
                "vit.embed_dim {} not divisible by vit.heads {}",
                vit.embed_dim, vit.heads
            ));
        }
        let aug = self.augment_config()?;
        aug.validate()?;
        if aug.global_size != vit.image_size {
            return fail(format!(
                "augment.global_size {} must match vit.image_size {}",
                aug.global_size, vit.image_size
            ));
        }
        self.head_config()?.validate()?;
        self.dino_config()?.validate()?;
        let classes = self.int("corpus.classes");
        if !(2..=8).contains(&classes) {
            return fail(format!("corpus.classes {classes} outside 2..=8"));
        }
        let keep = self.float("corpus.keep_frac");
        if !(0.0..=1.0).contains(&keep) {
            return fail(format!("corpus.keep_frac {keep} outside [0, 1]"));
        }
        if self.int("corpus.patch_size") > self.int("corpus.slide_size") {
            return fail("corpus.patch_size exceeds corpus.slide_size".into());
        }
        if self.int("corpus.cap") < 1 {
            return fail("corpus.cap must be >= 1".into());
        }
        let (a, b, c) = (
            self.float("harness.split_train"),
            self.float("harness.split_val"),
            self.float("harness.split_test"),
        );
        if (a + b + c - 1.0).abs() > 1e-9 {
            return fail(format!("3-way split ratios sum to {}", a + b + c));
        }
        for r in self.few_ratios()? {
            if !(r > 0.0 && r <= 1.0) {
                return fail(format!("few ratio {r} outside (0, 1]"));
            }
        }
        match self.string("probe.mode").as_str() {
            "linear" | "mlp" => {}
            other => return fail(format!("probe.mode `{other}` is not linear or mlp")),
        }
        match self.string("mil.model").as_str() {
            "abmil" | "simlp" => {}
            other => return fail(format!("mil.model `{other}` is not abmil or simlp")),
        }
        match self.string("dino.lr_schedule").as_str() {
            "warmup-cosine" | "constant" => {}
            other => {
                return fail(format!(
                    "dino.lr_schedule `{other}` is not warmup-cosine or constant"
                ))
            }
        }
        if self.int("harness.retrieval_k_max") < 1 {
            return fail("harness.retrieval_k_max must be >= 1".into());
        }
        Ok(())
    }

    /// `key = value` lines with provenance-tagged doc comments; re-parses to
    /// an equal config.
    pub fn print(&self) -> String {
        let mut out = String::new();
        for spec in KEYS {
            let v = &self.values[spec.key];
            out.push_str(&format!(
                "{} = {}  # [{}] {}\n",
                spec.key, v, spec.provenance, spec.doc
            ));
        }
        out
    }

    pub fn corpus_config(&self, seed: u64) -> Result<CorpusConfig> {
        Ok(CorpusConfig {
            classes: default_classes(self.int("corpus.classes") as usize),
            slides_per_class: self.int("corpus.slides_per_class") as usize,
            slide_size: self.int("corpus.slide_size") as usize,
            patch_size: self.int("corpus.patch_size") as usize,
            keep_frac: self.float("corpus.keep_frac"),
            cap: self.int("corpus.cap") as usize,
            seed,
        })
    }

    pub fn vit_config(&self) -> Result<ViTConfig> {
        let mut cfg = match self.string("vit.preset").as_str() {
            "vit-micro" => ViTConfig::vit_micro(),
            "vit-small" => ViTConfig::vit_small(),
            "vit-base" => ViTConfig::vit_base(),
            other => {
                return Err(Error::Config {
                    line: 0,
                    reason: format!("unknown vit.preset `{other}`"),
                })
            }
        };
        let over = |key: &str, field: &mut usize| {
            let v = self.int(key);
            if v != 0 {
                *field = v as usize;
            }
        };
        over("vit.image_size", &mut cfg.image_size);
        over("vit.patch_size", &mut cfg.patch_size);
        over("vit.embed_dim", &mut cfg.embed_dim);
        over("vit.depth", &mut cfg.depth);
        over("vit.heads", &mut cfg.heads);
        cfg.mlp_ratio = self.int("vit.mlp_ratio") as usize;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn head_config(&self) -> Result<DinoHeadConfig> {
        Ok(DinoHeadConfig {
            hidden: self.int("head.hidden") as usize,
            bottleneck: self.int("head.bottleneck") as usize,
            out_dim: self.int("head.out_dim") as usize,
            use_bn: self.boolean("head.use_bn"),
            norm_last_layer: self.boolean("head.norm_last_layer"),
        })
    }

    pub fn augment_config(&self) -> Result<AugmentConfig> {
        let vit = self.vit_config()?;
        let mut global = self.int("augment.global_size") as usize;
        if global == 0 {
            global = vit.image_size;
        }
        let mut local = self.int("augment.local_size") as usize;
        if local == 0 {
            local = global / 2;
        }
        Ok(AugmentConfig {
            global_size: global,
            local_size: local,
            n_local: self.int("augment.n_local") as usize,
            global_scale: (
                self.float("augment.global_scale_lo"),
                self.float("augment.global_scale_hi"),
            ),
            local_scale: (
                self.float("augment.local_scale_lo"),
                self.float("augment.local_scale_hi"),
            ),
            hflip_p: self.float("augment.hflip_p"),
            vflip_p: self.float("augment.vflip_p"),
            grayscale_p: self.float("augment.grayscale_p"),
            jitter: JitterConfig {
                brightness: self.float("augment.jitter_brightness"),
                contrast: self.float("augment.jitter_contrast"),
                saturation: self.float("augment.jitter_saturation"),
                hue: self.float("augment.jitter_hue"),
                p: self.float("augment.jitter_p"),
            },
            blur_sigmas: (
                self.float("augment.blur_sigma_lo"),
                self.float("augment.blur_sigma_hi"),
            ),
            global_blur_p: (
                self.float("augment.global_blur_p1"),
                self.float("augment.global_blur_p2"),
            ),
            local_blur_p: self.float("augment.local_blur_p"),
            solarize_p: self.float("augment.solarize_p"),
            solarize_threshold: self.float("augment.solarize_threshold") as f32,
            normalize_mean: [self.float("augment.normalize_mean") as f32; 3],
            normalize_std: [self.float("augment.normalize_std") as f32; 3],
        })
    }

    pub fn dino_config(&self) -> Result<DinoConfig> {
        Ok(DinoConfig {
            epochs: self.int("dino.epochs") as usize,
            batch: self.int("dino.batch") as usize,
            lr: self.float("dino.lr"),
            betas: (self.float("dino.beta1"), self.float("dino.beta2")),
            eps: self.float("dino.eps"),
            wd_start: self.float("dino.wd_start"),
            wd_end: self.float("dino.wd_end"),
            momentum_start: self.float("dino.momentum_start"),
            momentum_end: self.float("dino.momentum_end"),
            teacher_temp: self.float("dino.teacher_temp"),
            student_temp: self.float("dino.student_temp"),
            center_momentum: self.float("dino.center_momentum"),
            warmup_teacher_temp: self.float("dino.warmup_teacher_temp"),
            warmup_teacher_temp_epochs: self.int("dino.warmup_teacher_temp_epochs") as usize,
            freeze_last_layer_epochs: self.int("dino.freeze_last_layer_epochs") as usize,
            grad_clip: self.float("dino.grad_clip"),
            lr_schedule: match self.string("dino.lr_schedule").as_str() {
                "constant" => LrSchedule::Constant,
                _ => LrSchedule::WarmupCosine,
            },
            checkpoint_every: self.int("dino.checkpoint_every") as usize,
        })
    }

    pub fn probe_config(&self, seed: u64) -> Result<ProbeConfig> {
        Ok(ProbeConfig {
            mode: match self.string("probe.mode").as_str() {
                "mlp" => ProbeMode::Mlp,
                _ => ProbeMode::Linear,
            },
            mlp_hidden: self.int("probe.mlp_hidden") as usize,
            epochs: self.int("probe.epochs") as usize,
            batch: self.int("probe.batch") as usize,
            lr: self.float("probe.lr"),
            wd: self.float("probe.wd"),
            patience: self.int("probe.patience") as usize,
            seed,
        })
    }

    pub fn mil_config(&self, seed: u64) -> Result<MilConfig> {
        Ok(MilConfig {
            model: match self.string("mil.model").as_str() {
                "simlp" => MilModel::Simlp,
                _ => MilModel::Abmil,
            },
            attn_dim: self.int("mil.attn_dim") as usize,
            hidden: self.int("mil.hidden") as usize,
            epochs: self.int("mil.epochs") as usize,
            lr: self.float("mil.lr"),
            wd: self.float("mil.wd"),
            patience: self.int("mil.patience") as usize,
            seed,
        })
    }

    pub fn folds(&self) -> usize {
        self.int("harness.folds") as usize
    }

    pub fn retrieval_k_max(&self) -> usize {
        self.int("harness.retrieval_k_max") as usize
    }

    pub fn few_ratios(&self) -> Result<Vec<f64>> {
        self.string("harness.few_ratios")
            .split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| Error::Config {
                    line: 0,
                    reason: format!("bad few ratio `{s}`"),
                })
            })
            .collect()
    }

    pub fn ablate_caps(&self) -> Result<Vec<usize>> {
        self.string("harness.ablate_caps")
            .split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| Error::Config {
                    line: 0,
                    reason: format!("bad ablate cap `{s}`"),
                })
            })
            .collect()
    }

    pub fn split_ratios(&self) -> (f64, f64, f64) {
        (
            self.float("harness.split_train"),
            self.float("harness.split_val"),
            self.float("harness.split_test"),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_documented_defaults() {
        let cfg = parse_config("").unwrap();
        let dino = cfg.dino_config().unwrap();
        assert_eq!(dino.teacher_temp, 0.04);
        assert_eq!(dino.student_temp, 0.1);
        assert_eq!(dino.momentum_start, 0.9995);
        let vit = cfg.vit_config().unwrap();
        assert_eq!(vit.image_size, 64);
        assert_eq!(cfg.augment_config().unwrap().global_size, 64);
        assert_eq!(cfg.augment_config().unwrap().local_size, 32);
    }

    #[test]
    fn divisibility_cross_check() {
        let err = parse_config("vit.embed_dim = 65\nvit.heads = 4\n").unwrap_err();
        assert!(err.to_string().contains("divisible"), "{err}");
    }

    #[test]
    fn duplicate_key_names_both_lines() {
        let err = parse_config("dino.lr = 1e-3\n# comment\ndino.lr = 2e-3\n").unwrap_err();
        match err {
            Error::Config { line, reason } => {
                assert_eq!(line, 3);
                assert!(reason.contains("line 1"), "{reason}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_and_type_mismatch_have_line_numbers() {
        match parse_config("\nnope.key = 1\n").unwrap_err() {
            Error::Config { line, reason } => {
                assert_eq!(line, 2);
                assert!(reason.contains("unknown key"));
            }
            other => panic!("unexpected {other:?}"),
        }
        match parse_config("dino.epochs = soon\n").unwrap_err() {
            Error::Config { line, reason } => {
                assert_eq!(line, 1);
                assert!(reason.contains("integer"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn print_config_round_trips() {
        let cfg = parse_config("dino.lr = 0.00037\nvit.preset = vit-micro\ncorpus.cap = 13\n")
            .unwrap();
        let text = cfg.print();
        let back = parse_config(&text).unwrap();
        assert_eq!(back.values, cfg.values);
    }

    #[test]
    fn preset_with_overrides() {
        let cfg = parse_config("vit.preset = vit-small\nvit.depth = 3\n").unwrap();
        let vit = cfg.vit_config().unwrap();
        assert_eq!(vit.embed_dim, 384);
        assert_eq!(vit.depth, 3);
        assert_eq!(vit.image_size, 224);
    }

    #[test]
    fn paper_scale_keys_are_accepted() {
        let text = "vit.preset = vit-base\naugment.global_size = 224\naugment.local_size = 96\n\
                    head.hidden = 2048\nhead.bottleneck = 256\nhead.out_dim = 65536\ndino.batch = 256\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.head_config().unwrap().out_dim, 65536);
        assert_eq!(cfg.augment_config().unwrap().local_size, 96);
    }
}
