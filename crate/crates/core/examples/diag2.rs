use stainlab::augment::AugmentConfig;
use stainlab::dino::*;
use stainlab::downstream::extract_features;
use stainlab::encoder::*;
use stainlab::harness::{kfold_probe_eval, load_corpus_patches};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args[1].parse().unwrap();
    let momentum: f64 = args[2].parse().unwrap();
    let out_dim: usize = args[3].parse().unwrap();
    let teacher_temp: f64 = args[4].parse().unwrap();
    let lr: f64 = args[5].parse().unwrap();
    let clip: f64 = args[6].parse().unwrap();
    let sched = if args[7] == "const" { LrSchedule::Constant } else { LrSchedule::WarmupCosine };
    let corpus = std::path::PathBuf::from("/tmp/gauge_20/corpus");
    let vit = ViTConfig::vit_micro();
    let head = DinoHeadConfig { out_dim, ..DinoHeadConfig::desk() };
    let aug = AugmentConfig::desk();
    let run = std::path::PathBuf::from("/tmp/diag2_run");
    let _ = std::fs::remove_dir_all(&run);
    let dcfg = DinoConfig { epochs, momentum_start: momentum, teacher_temp, lr, grad_clip: clip, lr_schedule: sched, checkpoint_every: 0, ..Default::default() };
    let out = pretrain(&corpus, &run, &dcfg, &vit, &head, &aug, 7).unwrap();
    print!("losses: ");
    for l in &out.epoch_mean_loss { print!("{l:.2} "); }
    println!("| ratio {:.3}", out.epoch_mean_loss.last().unwrap()/out.epoch_mean_loss[0]);
    let (patches, labels) = load_corpus_patches(&corpus).unwrap();
    let st = load_checkpoint(&out.final_checkpoint).unwrap();
    let f = extract_features(&st.teacher, &vit, &patches, Some(labels.clone()), aug.normalize_mean, aug.normalize_std).unwrap();
    let probe = stainlab::downstream::ProbeConfig { lr: 1e-2, ..stainlab::downstream::ProbeConfig::new(stainlab::downstream::ProbeMode::Linear, 3) };
    let rep = kfold_probe_eval(&f, 5, &probe, 11).unwrap();
    println!("bal_acc {:.4}", rep.mean.bal_acc);
}
