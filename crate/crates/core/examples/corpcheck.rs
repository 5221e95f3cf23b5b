use stainlab::corpus::*;
fn main() {
    let classes = default_classes(4);
    for spec in &classes {
        let mut kept = 0;
        let mut fails = 0;
        for seed in 0..4u64 {
            match gen_slide(spec, "s", 1120, seed * 31 + 7) {
                Ok(s) => kept += tile_slide(&s, 224, 0.25).unwrap().len(),
                Err(_) => fails += 1,
            }
        }
        println!("class {} (freq {}, r {:?}, lambda {}): avg kept {:.1}, floor fails {fails}", spec.class_id, spec.texture_freq, spec.blob_radius, spec.nucleus_density, kept as f64 / (4 - fails).max(1) as f64);
    }
}
