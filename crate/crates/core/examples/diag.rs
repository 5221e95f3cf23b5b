use stainlab::augment::{multi_crop, AugmentConfig};
use stainlab::corpus::{read_manifest, read_patch, patch_path};
use stainlab::dino::*;
use stainlab::downstream::extract_features;
use stainlab::encoder::*;
use stainlab::harness::load_corpus_patches;
use stainlab::rng::Stream;
use stainlab::tensor::Tensor;

// alignment: mean cosine of teacher CLS embeddings between two global crops of
// the same patch; uniformity: mean cosine between different patches
fn embed_stats(params: &ParameterSet, vit: &ViTConfig, corpus: &std::path::Path, aug: &AugmentConfig) -> (f64, f64, f64) {
    let manifest = read_manifest(&corpus.join("manifest.csv")).unwrap();
    let patches: Vec<_> = manifest.iter().take(48).map(|r| read_patch(&patch_path(corpus, r)).unwrap()).collect();
    let views: Vec<_> = patches.iter().enumerate().map(|(i,p)| { let mut rng = Stream::tagged_path(5151,&[i as u64]); multi_crop(p, aug, &mut rng).unwrap() }).collect();
    let mut refs = vec![];
    for v in 0..2 { for vs in &views { refs.push(&vs.globals[v]); } }
    let emb = teacher_embeddings(params, vit, &refs).unwrap();
    let d = vit.embed_dim;
    let n = patches.len();
    let norm_row = |i: usize| -> Vec<f64> {
        let row = &emb.data()[i*d..(i+1)*d];
        let nrm = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
        row.iter().map(|&x| x as f64 / nrm).collect()
    };
    let cos = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x,y)| x*y).sum::<f64>();
    let mut same = 0.0;
    for i in 0..n { same += cos(&norm_row(i), &norm_row(n + i)); }
    same /= n as f64;
    let mut diff = 0.0; let mut cnt = 0.0;
    for i in 0..n.min(16) { for j in 0..n.min(16) { if i != j { diff += cos(&norm_row(i), &norm_row(j)); cnt += 1.0; } } }
    diff /= cnt;
    // per-dim std of embeddings
    let mut var = 0.0;
    for dd in 0..d {
        let col: Vec<f64> = (0..2*n).map(|i| emb.data()[i*d+dd] as f64).collect();
        let m = col.iter().sum::<f64>() / col.len() as f64;
        var += col.iter().map(|x| (x-m).powi(2)).sum::<f64>() / col.len() as f64;
    }
    (same, diff, (var / d as f64).sqrt())
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args[1].parse().unwrap();
    let momentum: f64 = args[2].parse().unwrap();
    let out_dim: usize = args[3].parse().unwrap();
    let teacher_temp: f64 = args[4].parse().unwrap();
    let lr: f64 = args[5].parse().unwrap();
    let clip: f64 = args[6].parse().unwrap();
    let corpus = std::path::PathBuf::from("/tmp/gauge_20/corpus");
    let vit = ViTConfig::vit_micro();
    let head = DinoHeadConfig { out_dim, ..DinoHeadConfig::desk() };
    let aug = AugmentConfig::desk();

    // train in segments of 2 epochs, reporting stats between
    let run = std::path::PathBuf::from(format!("/tmp/diag_{momentum}_{out_dim}_{teacher_temp}_{lr}_{clip}"));
    let _ = std::fs::remove_dir_all(&run);
    let dcfg = DinoConfig { epochs, momentum_start: momentum, teacher_temp, lr, grad_clip: clip, checkpoint_every: 2, ..Default::default() };
    let out = pretrain(&corpus, &run, &dcfg, &vit, &head, &aug, 7).unwrap();
    print!("losses: ");
    for l in &out.epoch_mean_loss { print!("{l:.2} "); }
    println!();
    for ck in &out.checkpoints {
        let st = load_checkpoint(ck).unwrap();
        let (same, diff, std) = embed_stats(&st.teacher, &vit, &corpus, &aug);
        println!("{}: same-crop cos {same:.3}, cross-patch cos {diff:.3}, emb std {std:.4}", ck.file_name().unwrap().to_string_lossy());
    }
    // final probe quality
    let (patches, labels) = load_corpus_patches(&corpus).unwrap();
    let st = load_checkpoint(out.checkpoints.last().unwrap()).unwrap();
    let f = extract_features(&st.teacher, &vit, &patches, Some(labels.clone()), aug.normalize_mean, aug.normalize_std).unwrap();
    let probe = stainlab::downstream::ProbeConfig { lr: 1e-2, ..stainlab::downstream::ProbeConfig::new(stainlab::downstream::ProbeMode::Linear, 3) };
    let rep = stainlab::harness::kfold_probe_eval(&f, 5, &probe, 11).unwrap();
    println!("DINO bal_acc {:.4}", rep.mean.bal_acc);
    let _ = Tensor::<f32>::zeros(&[1]);
}
