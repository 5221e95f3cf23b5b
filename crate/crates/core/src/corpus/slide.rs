//! Procedural synthetic stain-slide generation.

use super::{SlideRecord, StainClassSpec};
use crate::error::{Error, Result};
use crate::rng::Stream;

const TISSUE_FLOOR: f64 = 0.30;
const MAX_ATTEMPTS: u32 = 16;
const TAG_SLIDE_ATTEMPT: u64 = 0x51;

/// Renders a slide for `spec`, regenerating with the next sub-seed until at
/// least 30% of pixels are tissue. Byte-identical for identical
/// `(spec, seed)`.
pub fn gen_slide(spec: &StainClassSpec, slide_id: &str, size: usize, seed: u64) -> Result<SlideRecord> {
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = Stream::tagged_path(seed, &[TAG_SLIDE_ATTEMPT, attempt as u64]);
        let (raster, tissue_frac) = render(spec, size, &mut rng);
        if tissue_frac >= TISSUE_FLOOR {
            return Ok(SlideRecord {
                slide_id: slide_id.to_string(),
                class_id: spec.class_id,
                width: size,
                height: size,
                raster,
                rng_seed: seed,
            });
        }
    }
    Err(Error::TissueFloor(MAX_ATTEMPTS))
}

/// One render pass: clustered stained blobs over a near-white background,
/// with a class-frequency sinusoidal stripe modulating stain intensity.
fn render(spec: &StainClassSpec, size: usize, rng: &mut Stream) -> (Vec<u8>, f64) {
    let mut raster = Vec::with_capacity(size * size * 3);
    for _ in 0..size * size {
        raster.extend_from_slice(&spec.background);
    }
    let mut covered = vec![false; size * size];

    // stripe field shared by all blobs of this slide
    let theta = rng.uniform(0.0, std::f64::consts::PI);
    let phase = rng.uniform(0.0, std::f64::consts::TAU);
    let (dir_x, dir_y) = (theta.cos(), theta.sin());
    let freq = spec.texture_freq * std::f64::consts::TAU / size as f64;

    // tissue clusters; blobs scatter around their centers
    let n_clusters = 3 + rng.below(3) as usize;
    let clusters: Vec<(f64, f64)> = (0..n_clusters)
        .map(|_| {
            (
                rng.uniform(0.15, 0.85) * size as f64,
                rng.uniform(0.15, 0.85) * size as f64,
            )
        })
        .collect();
    let sigma = size as f64 / 5.0;

    let mean_blobs = spec.nucleus_density * (size * size) as f64 / 1e4;
    let n_blobs = rng.poisson(mean_blobs);

    for _ in 0..n_blobs {
        let (cx0, cy0) = clusters[rng.below(n_clusters as u64) as usize];
        let cx = (cx0 + rng.gauss() * sigma).clamp(0.0, (size - 1) as f64);
        let cy = (cy0 + rng.gauss() * sigma).clamp(0.0, (size - 1) as f64);
        let radius = rng.uniform(spec.blob_radius.0, spec.blob_radius.1);
        let color = if rng.chance(0.5) {
            spec.hue_pair.0
        } else {
            spec.hue_pair.1
        };

        let x_lo = (cx - radius).floor().max(0.0) as usize;
        let x_hi = ((cx + radius).ceil() as usize).min(size - 1);
        let y_lo = (cy - radius).floor().max(0.0) as usize;
        let y_hi = ((cy + radius).ceil() as usize).min(size - 1);
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let d = (dx * dx + dy * dy).sqrt();
                if d > radius {
                    continue;
                }
                // soft edge and sinusoidal stripe modulation
                let edge = (1.0 - d / radius).min(0.35) / 0.35;
                let stripe =
                    0.55 + 0.45 * (freq * (x as f64 * dir_x + y as f64 * dir_y) + phase).sin();
                let alpha = 0.9 * edge * stripe;
                let idx = (y * size + x) * 3;
                for c in 0..3 {
                    let bg = raster[idx + c] as f64;
                    raster[idx + c] = (bg + (color[c] as f64 - bg) * alpha).round() as u8;
                }
                if alpha > 0.2 {
                    covered[y * size + x] = true;
                }
            }
        }
    }

    let tissue = covered.iter().filter(|&&c| c).count() as f64 / (size * size) as f64;
    (raster, tissue)
}
