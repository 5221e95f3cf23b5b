use stainlab::augment::AugmentConfig;
use stainlab::corpus::{build_corpus, CorpusConfig};
use stainlab::dino::{load_checkpoint, pretrain, teacher_logits, argmax_concentration, DinoConfig, LrSchedule};
use stainlab::downstream::{extract_features, ProbeConfig, ProbeMode};
use stainlab::encoder::{init_vit_params, DinoHeadConfig, ViTConfig};
use stainlab::harness::{kfold_probe_eval, load_corpus_patches};
use stainlab::augment::eval_view;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let slides: usize = args[1].parse().unwrap();
    let epochs: usize = args[2].parse().unwrap();
    let momentum: f64 = args[3].parse().unwrap();
    let schedule = if args[4] == "const" { LrSchedule::Constant } else { LrSchedule::WarmupCosine };
    let lr: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(5e-4);

    let dir = std::path::PathBuf::from(format!("/tmp/gauge_{slides}"));
    let corpus = dir.join("corpus");
    if !corpus.join("manifest.csv").is_file() {
        let mut ccfg = CorpusConfig::desk(42);
        ccfg.slides_per_class = slides;
        let s = build_corpus(&ccfg, &corpus).unwrap();
        println!("corpus: {} patches", s.patches);
    }

    let dcfg = DinoConfig { epochs, momentum_start: momentum, lr_schedule: schedule, lr, checkpoint_every: 0, ..Default::default() };
    let vit = ViTConfig::vit_micro();
    let head = DinoHeadConfig::desk();
    let aug = AugmentConfig::desk();
    let run = dir.join(format!("run_m{momentum}_{}_{lr}", args[4]));
    let _ = std::fs::remove_dir_all(&run);
    let t = Instant::now();
    let out = pretrain(&corpus, &run, &dcfg, &vit, &head, &aug, 7).unwrap();
    let el: Vec<String> = out.epoch_mean_loss.iter().map(|l| format!("{l:.2}")).collect();
    println!("pretrain {:.0}s; epoch losses {:?} ratio {:.3}", t.elapsed().as_secs_f64(), el,
        out.epoch_mean_loss.last().unwrap() / out.epoch_mean_loss[0]);

    let (patches, labels) = load_corpus_patches(&corpus).unwrap();
    let state = load_checkpoint(&out.final_checkpoint).unwrap();
    let dino_f = extract_features(&state.teacher, &vit, &patches, Some(labels.clone()), aug.normalize_mean, aug.normalize_std).unwrap();
    let rand_params = init_vit_params(&vit, 999).unwrap();
    let rand_f = extract_features(&rand_params, &vit, &patches, Some(labels.clone()), aug.normalize_mean, aug.normalize_std).unwrap();

    let views: Vec<_> = patches.iter().take(512).map(|p| eval_view(p, 64, aug.normalize_mean, aug.normalize_std).unwrap()).collect();
    let refs: Vec<_> = views.iter().collect();
    let logits = teacher_logits(&state.teacher, &vit, &refs).unwrap();
    println!("teacher argmax concentration: {:.3}", argmax_concentration(&logits, head.out_dim));

    let probe = ProbeConfig { lr: 1e-2, ..ProbeConfig::new(ProbeMode::Linear, 3) };
    let dino_rep = kfold_probe_eval(&dino_f, 5, &probe, 11).unwrap();
    let rand_rep = kfold_probe_eval(&rand_f, 5, &probe, 11).unwrap();
    println!("DINO bal_acc {:.4}, random {:.4}, gap {:.1}pp",
        dino_rep.mean.bal_acc, rand_rep.mean.bal_acc, 100.0 * (dino_rep.mean.bal_acc - rand_rep.mean.bal_acc));
}
