//! Non-overlapping sliding-window tiling over OTSU foreground.

use super::otsu::{luma, otsu_threshold, Otsu};
use super::{PatchImage, SlideRecord};
use crate::error::{Error, Result};

/// Tiles a slide into a `floor(H/S) x floor(W/S)` grid of `S x S` windows and
/// keeps, in row-major order, every window whose foreground fraction reaches
/// `keep_frac`. Foreground is luma at or below the slide-level OTSU
/// threshold; a slide with no OTSU split yields no patches.
pub fn tile_slide(slide: &SlideRecord, patch_size: usize, keep_frac: f64) -> Result<Vec<PatchImage>> {
    if patch_size == 0 || patch_size > slide.width.min(slide.height) {
        return Err(Error::InvalidParameter(format!(
            "patch size {patch_size} exceeds slide {}x{}",
            slide.width, slide.height
        )));
    }
    let mut hist = [0u64; 256];
    let lum: Vec<u8> = slide
        .raster
        .chunks_exact(3)
        .map(|px| luma(px[0], px[1], px[2]))
        .collect();
    for &l in &lum {
        hist[l as usize] += 1;
    }
    let threshold = match otsu_threshold(&hist) {
        Otsu::Threshold(t) => t,
        Otsu::NoSplit => return Ok(Vec::new()),
    };

    let s = patch_size;
    let gx = slide.width / s;
    let gy = slide.height / s;
    let mut out = Vec::new();
    for ty in 0..gy {
        for tx in 0..gx {
            let (ox, oy) = (tx * s, ty * s);
            let mut fg = 0usize;
            for y in oy..oy + s {
                for x in ox..ox + s {
                    if lum[y * slide.width + x] <= threshold {
                        fg += 1;
                    }
                }
            }
            let frac = fg as f64 / (s * s) as f64;
            if frac < keep_frac {
                continue;
            }
            let mut pixels = Vec::with_capacity(s * s * 3);
            for y in oy..oy + s {
                let row = (y * slide.width + ox) * 3;
                pixels.extend_from_slice(&slide.raster[row..row + s * 3]);
            }
            out.push(PatchImage {
                patch_id: format!("{}-x{}-y{}", slide.slide_id, ox, oy),
                slide_id: slide.slide_id.clone(),
                origin: (ox, oy),
                side: s,
                pixels,
                foreground_fraction: frac,
            });
        }
    }
    Ok(out)
}
