use stainlab::augment::{multi_crop, AugmentConfig};
use stainlab::corpus::{read_manifest, read_patch, patch_path};
use stainlab::dino::{dino_loss, teacher_logits, sharpened_targets};
use stainlab::encoder::*;
use stainlab::rng::Stream;
use stainlab::tensor::{Graph, Tensor};

fn main() {
    let corpus = std::path::PathBuf::from("/tmp/gauge_20/corpus");
    let manifest = read_manifest(&corpus.join("manifest.csv")).unwrap();
    let patches: Vec<_> = manifest.iter().take(64).map(|r| read_patch(&patch_path(&corpus, r)).unwrap()).collect();
    let aug = AugmentConfig::desk();
    let vit = ViTConfig::vit_micro();
    let head = DinoHeadConfig::desk();
    let mut student = init_vit_params(&vit, 1).unwrap();
    init_head_params(&head, vit.embed_dim, 2, &mut student).unwrap();

    let views: Vec<_> = patches.iter().enumerate().map(|(i,p)| { let mut rng = Stream::tagged_path(7,&[1,i as u64]); multi_crop(p,&aug,&mut rng).unwrap() }).collect();
    let b = views.len();
    let mut grefs = vec![];
    for v in 0..2 { for vs in &views { grefs.push(&vs.globals[v]); } }
    let tl = teacher_logits(&student, &vit, &grefs).unwrap();
    let k = head.out_dim;
    let t0 = Tensor::new(&[b, k], tl.data()[..b*k].to_vec()).unwrap();
    let t1 = Tensor::new(&[b, k], tl.data()[b*k..].to_vec()).unwrap();

    let g: Graph<f32> = Graph::new();
    let vars = student.leaf_into(&g, true);
    let gi = g.constant(batch_views(&grefs).unwrap());
    let gc = vit_forward(&g, &vars, &vit, gi).unwrap();
    let gl = dino_head_forward(&g, &vars, gc).unwrap();
    let mut sviews = vec![g.slice_rows(gl, 0, b).unwrap(), g.slice_rows(gl, b, b).unwrap()];
    let mut lrefs = vec![];
    for v in 0..8 { for vs in &views { lrefs.push(&vs.locals[v]); } }
    let li = g.constant(batch_views(&lrefs).unwrap());
    let lc = vit_forward(&g, &vars, &vit, li).unwrap();
    let ll = dino_head_forward(&g, &vars, lc).unwrap();
    for v in 0..8 { sviews.push(g.slice_rows(ll, v*b, b).unwrap()); }
    let center = Tensor::zeros(&[k]);
    let loss = dino_loss(&g, &sviews, &[t0.clone(), t1.clone()], &center, 0.1, 0.04).unwrap();
    println!("loss {:.4}", g.value(loss).item());
    g.backward(loss).unwrap();
    let mut total = 0f64;
    let mut tops: Vec<(String, f64)> = vec![];
    for (name, var) in &vars {
        if let Some(gr) = g.grad(*var) {
            let n = gr.sq_norm();
            total += n;
            tops.push((name.clone(), n.sqrt()));
        }
    }
    tops.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    println!("global grad norm: {:.4}", total.sqrt());
    for (n, v) in tops.iter().take(6) { println!("  {n}: {v:.4}"); }
    // teacher target stats
    let p0 = sharpened_targets(&t0, &center, 0.04f32).unwrap();
    let mx = p0.data().chunks(k).map(|r| r.iter().cloned().fold(0f32, f32::max)).sum::<f32>() / b as f32;
    println!("teacher target mean max prob: {mx:.4}");
}
