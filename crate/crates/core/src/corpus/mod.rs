//! Synthetic stain-slide corpus: generation, tiling and on-disk layout.
//!
//! Layout: `corpus/<slide_id>/<patch_id>.ppm` plus `corpus/manifest.csv`
//! (`patch_id,slide_id,class_id,origin_x,origin_y`, UTF-8, LF endings).

pub mod otsu;
mod ppm;
mod slide;
mod tile;

pub use otsu::{luma, otsu_threshold, Otsu};
pub use ppm::{decode_ppm, encode_ppm, read_patch, write_patch};
pub use slide::gen_slide;
pub use tile::tile_slide;

use crate::error::{Error, Result};
use crate::rng::Stream;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Recipe for one synthetic stain class.
#[derive(Debug, Clone, PartialEq)]
pub struct StainClassSpec {
    pub class_id: u32,
    /// Two chromogen colors; each blob picks one of the pair.
    pub hue_pair: ([u8; 3], [u8; 3]),
    /// Expected blobs per 10^4 square pixels.
    pub nucleus_density: f64,
    /// Blob radius range in pixels.
    pub blob_radius: (f64, f64),
    /// Stripe cycles across the slide width.
    pub texture_freq: f64,
    /// Near-white background (luma must exceed 0.85 so OTSU separates it).
    pub background: [u8; 3],
}

/// Built-in class table: palettes repeat across texture-frequency groups, so
/// color alone does not identify a class; the frequency groups also differ
/// in blob morphology, which survives the color-destroying augmentations.
/// Supports up to 8 classes.
pub fn default_classes(n: usize) -> Vec<StainClassSpec> {
    // (chromogen pair, counterstain) palettes modeled on common stains
    let palettes: [([u8; 3], [u8; 3]); 4] = [
        ([125, 79, 48], [72, 85, 140]),  // brown / blue
        ([84, 128, 74], [158, 66, 72]),  // green / red
        ([112, 64, 130], [196, 124, 152]), // purple / pink
        ([56, 64, 120], [96, 148, 166]), // dark blue / cyan
    ];
    let freqs = [10.0, 36.0];
    assert!(n >= 1 && n <= palettes.len() * freqs.len(), "1..=8 classes supported");
    (0..n)
        .map(|i| {
            let coarse = i % freqs.len() == 0;
            StainClassSpec {
                class_id: i as u32,
                hue_pair: palettes[i / freqs.len()],
                nucleus_density: if coarse { 14.0 } else { 44.0 },
                blob_radius: if coarse { (8.0, 22.0) } else { (4.0, 11.0) },
                texture_freq: freqs[i % freqs.len()],
                background: [246, 245, 243],
            }
        })
        .collect()
}

/// One synthetic slide: RGB8 raster plus its stain-class label.
#[derive(Debug, Clone)]
pub struct SlideRecord {
    pub slide_id: String,
    pub class_id: u32,
    pub width: usize,
    pub height: usize,
    pub raster: Vec<u8>,
    pub rng_seed: u64,
}

/// One extracted square patch.
#[derive(Debug, Clone)]
pub struct PatchImage {
    pub patch_id: String,
    pub slide_id: String,
    /// Top-left corner in slide pixels; a multiple of the patch side.
    pub origin: (usize, usize),
    pub side: usize,
    pub pixels: Vec<u8>,
    pub foreground_fraction: f64,
}

/// Uniform sample without replacement of `min(cap, len)` patches; a slide
/// with fewer patches than the cap keeps them all. The kept set is returned
/// in grid (row-major) order.
pub fn sample_patches(patches: Vec<PatchImage>, cap: usize, rng: &mut Stream) -> Vec<PatchImage> {
    assert!(cap >= 1, "cap must be >= 1");
    if patches.len() <= cap {
        return patches;
    }
    let mut idx = rng.sample_indices(patches.len(), cap);
    idx.sort_unstable();
    let mut keep: Vec<Option<PatchImage>> = patches.into_iter().map(Some).collect();
    idx.iter().map(|&i| keep[i].take().unwrap()).collect()
}

#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub classes: Vec<StainClassSpec>,
    pub slides_per_class: usize,
    pub slide_size: usize,
    pub patch_size: usize,
    pub keep_frac: f64,
    pub cap: usize,
    pub seed: u64,
}

impl CorpusConfig {
    /// Desk-scale defaults: 1120px slides, 224px patches, 4 classes.
    pub fn desk(seed: u64) -> Self {
        CorpusConfig {
            classes: default_classes(4),
            slides_per_class: 50,
            slide_size: 1120,
            patch_size: 224,
            keep_frac: 0.25,
            cap: 25,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::InvalidParameter(
                "corpus needs at least 2 stain classes".into(),
            ));
        }
        let mut combos: Vec<_> = self
            .classes
            .iter()
            .map(|c| (c.hue_pair, c.texture_freq.to_bits()))
            .collect();
        combos.sort();
        combos.dedup();
        if combos.len() != self.classes.len() {
            return Err(Error::InvalidParameter(
                "class (hue pair, texture frequency) combinations must be distinct".into(),
            ));
        }
        for c in &self.classes {
            if otsu::luma(c.background[0], c.background[1], c.background[2]) < 217 {
                return Err(Error::InvalidParameter(format!(
                    "class {} background luma below 0.85",
                    c.class_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSummary {
    pub slides: usize,
    pub excluded_slides: usize,
    pub patches: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub patch_id: String,
    pub slide_id: String,
    pub class_id: u32,
    pub origin: (usize, usize),
}

const TAG_SLIDE_SEED: u64 = 0xC0;
const TAG_SAMPLE: u64 = 0xC1;

/// Generates, tiles and writes the corpus under `out_dir`. Regeneration from
/// the same config is byte-identical, manifest ordering included.
pub fn build_corpus(config: &CorpusConfig, out_dir: &Path) -> Result<CorpusSummary> {
    config.validate()?;
    let ctx = |e: std::io::Error| Error::PartialWrite {
        path: out_dir.display().to_string(),
        source: e,
    };
    std::fs::create_dir_all(out_dir).map_err(ctx)?;

    let mut manifest: Vec<ManifestRow> = Vec::new();
    let mut summary = CorpusSummary {
        slides: 0,
        excluded_slides: 0,
        patches: 0,
    };
    for (ci, spec) in config.classes.iter().enumerate() {
        for si in 0..config.slides_per_class {
            let slide_id = format!("c{ci:02}s{si:03}");
            let slide_seed =
                Stream::tagged_path(config.seed, &[TAG_SLIDE_SEED, ci as u64, si as u64])
                    .next_u64();
            let slide = gen_slide(spec, &slide_id, config.slide_size, slide_seed)?;
            let tiles = tile_slide(&slide, config.patch_size, config.keep_frac)?;
            if tiles.is_empty() {
                summary.excluded_slides += 1;
                continue;
            }
            let mut rng = Stream::tagged_path(config.seed, &[TAG_SAMPLE, ci as u64, si as u64]);
            let kept = sample_patches(tiles, config.cap, &mut rng);

            let slide_dir = out_dir.join(&slide_id);
            std::fs::create_dir_all(&slide_dir).map_err(ctx)?;
            for p in &kept {
                write_patch(&slide_dir.join(format!("{}.ppm", p.patch_id)), p)?;
                manifest.push(ManifestRow {
                    patch_id: p.patch_id.clone(),
                    slide_id: slide_id.clone(),
                    class_id: spec.class_id,
                    origin: p.origin,
                });
            }
            summary.slides += 1;
            summary.patches += kept.len();
        }
    }
    write_manifest(&out_dir.join("manifest.csv"), &manifest).map_err(|e| match e {
        Error::Io(io) => ctx(io),
        other => other,
    })?;
    Ok(summary)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(b"patch_id,slide_id,class_id,origin_x,origin_y\n")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{}",
            r.patch_id, r.slide_id, r.class_id, r.origin.0, r.origin.1
        )?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "patch_id,slide_id,class_id,origin_x,origin_y" {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    offset: 0,
                    reason: "bad manifest header".into(),
                });
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Format {
                path: path.display().to_string(),
                offset: i as u64,
                reason: format!("line {}: expected 5 fields", i + 1),
            });
        }
        let parse = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Format {
                path: path.display().to_string(),
                offset: i as u64,
                reason: format!("line {}: bad number `{s}`", i + 1),
            })
        };
        rows.push(ManifestRow {
            patch_id: fields[0].to_string(),
            slide_id: fields[1].to_string(),
            class_id: parse(fields[2])? as u32,
            origin: (parse(fields[3])?, parse(fields[4])?),
        });
    }
    Ok(rows)
}

/// Resolves the PPM path of a manifest row inside a corpus directory.
pub fn patch_path(corpus_dir: &Path, row: &ManifestRow) -> PathBuf {
    corpus_dir.join(&row.slide_id).join(format!("{}.ppm", row.patch_id))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(seed: u64) -> CorpusConfig {
        CorpusConfig {
            classes: default_classes(2),
            slides_per_class: 3,
            slide_size: 280,
            patch_size: 56,
            keep_frac: 0.25,
            cap: 10,
            seed,
        }
    }

    #[test]
    fn sample_keeps_all_when_under_cap() {
        let patches: Vec<PatchImage> = (0..25)
            .map(|i| PatchImage {
                patch_id: format!("p{i}"),
                slide_id: "s".into(),
                origin: (i, 0),
                side: 1,
                pixels: vec![0, 0, 0],
                foreground_fraction: 1.0,
            })
            .collect();
        let mut rng = Stream::new(1);
        assert_eq!(sample_patches(patches, 100, &mut rng).len(), 25);
    }

    #[test]
    fn sample_caps_and_is_deterministic() {
        let mk = || -> Vec<PatchImage> {
            (0..500)
                .map(|i| PatchImage {
                    patch_id: format!("p{i}"),
                    slide_id: "s".into(),
                    origin: (i, 0),
                    side: 1,
                    pixels: vec![0, 0, 0],
                    foreground_fraction: 1.0,
                })
                .collect()
        };
        let a = sample_patches(mk(), 100, &mut Stream::new(5));
        let b = sample_patches(mk(), 100, &mut Stream::new(5));
        assert_eq!(a.len(), 100);
        let ids_a: Vec<_> = a.iter().map(|p| p.patch_id.clone()).collect();
        let ids_b: Vec<_> = b.iter().map(|p| p.patch_id.clone()).collect();
        assert_eq!(ids_a, ids_b);
        let mut dedup = ids_a.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 100);
    }

    #[test]
    fn corpus_rerun_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (d1, d2) = (dir.path().join("a"), dir.path().join("b"));
        let cfg = tiny_config(77);
        let s1 = build_corpus(&cfg, &d1).unwrap();
        let s2 = build_corpus(&cfg, &d2).unwrap();
        assert_eq!(s1, s2);
        let m1 = std::fs::read(d1.join("manifest.csv")).unwrap();
        let m2 = std::fs::read(d2.join("manifest.csv")).unwrap();
        assert_eq!(m1, m2);
        // spot-check one patch file byte-identical
        let rows = read_manifest(&d1.join("manifest.csv")).unwrap();
        assert!(!rows.is_empty());
        let p1 = std::fs::read(patch_path(&d1, &rows[0])).unwrap();
        let p2 = std::fs::read(patch_path(&d2, &rows[0])).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn manifest_rows_match_files_both_ways() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(3);
        let summary = build_corpus(&cfg, dir.path()).unwrap();
        let rows = read_manifest(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(rows.len(), summary.patches);
        // every row has a file
        for r in &rows {
            assert!(patch_path(dir.path(), r).is_file(), "{:?}", r);
        }
        // every file has a row
        let mut files = 0;
        for entry in std::fs::read_dir(dir.path()).unwrap() {
            let entry = entry.unwrap();
            if entry.file_type().unwrap().is_dir() {
                files += std::fs::read_dir(entry.path()).unwrap().count();
            }
        }
        assert_eq!(files, rows.len());
    }

    #[test]
    fn needs_two_classes() {
        let mut cfg = tiny_config(1);
        cfg.classes.truncate(1);
        assert!(build_corpus(&cfg, std::path::Path::new("/nonexistent")).is_err());
    }

    #[test]
    fn duplicate_class_combo_rejected() {
        let mut cfg = tiny_config(1);
        let c0 = cfg.classes[0].clone();
        cfg.classes[1].hue_pair = c0.hue_pair;
        cfg.classes[1].texture_freq = c0.texture_freq;
        assert!(build_corpus(&cfg, std::path::Path::new("/nonexistent")).is_err());
    }
}
