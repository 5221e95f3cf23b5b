//! Offline feature extraction and the feature-matrix container + file
//! format (magic `STNF`).
//!
//! Layout, little-endian: magic `STNF`, u32 version, u32 N, u32 C,
//! `N*C` f32 row-major, N ids (u16 length-prefixed UTF-8), u8 label flag,
//! then N i32 labels when the flag is 1.

use crate::augment::eval_view;
use crate::corpus::PatchImage;
use crate::dino::teacher_embeddings;
use crate::encoder::{ParameterSet, ViTConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"STNF";
const VERSION: u32 = 1;

/// Rows of embeddings aligned with string ids and optional integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub ids: Vec<String>,
    /// `N x C` row-major.
    pub x: Tensor<f32>,
    pub labels: Option<Vec<i32>>,
}

impl FeatureMatrix {
    pub fn new(ids: Vec<String>, x: Tensor<f32>, labels: Option<Vec<i32>>) -> Result<Self> {
        if x.shape().len() != 2 || x.shape()[0] != ids.len() {
            return Err(Error::ShapeMismatch {
                op: "feature_matrix",
                lhs: x.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        if let Some(l) = &labels {
            if l.len() != ids.len() {
                return Err(Error::Contract(format!(
                    "{} labels for {} rows",
                    l.len(),
                    ids.len()
                )));
            }
        }
        if !x.all_finite() {
            return Err(Error::Contract("non-finite feature values".into()));
        }
        Ok(FeatureMatrix { ids, x, labels })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.dim();
        &self.x.data()[i * c..(i + 1) * c]
    }

    /// Rows selected by index, preserving order.
    pub fn select(&self, idx: &[usize]) -> FeatureMatrix {
        let c = self.dim();
        let mut data = Vec::with_capacity(idx.len() * c);
        let mut ids = Vec::with_capacity(idx.len());
        let mut labels = self.labels.as_ref().map(|_| Vec::with_capacity(idx.len()));
        for &i in idx {
            data.extend_from_slice(self.row(i));
            ids.push(self.ids[i].clone());
            if let (Some(out), Some(src)) = (&mut labels, &self.labels) {
                out.push(src[i]);
            }
        }
        FeatureMatrix {
            ids,
            x: Tensor::new(&[idx.len(), c], data).unwrap(),
            labels,
        }
    }
}

/// Teacher-backbone CLS embeddings for a patch list, deterministic (plain
/// resize + normalize, no stochastic augmentation). The projection head is
/// not applied.
pub fn extract_features(
    teacher: &ParameterSet,
    vit: &ViTConfig,
    patches: &[PatchImage],
    labels: Option<Vec<i32>>,
    mean: [f32; 3],
    std: [f32; 3],
) -> Result<FeatureMatrix> {
    let mut rows: Vec<f32> = Vec::with_capacity(patches.len() * vit.embed_dim);
    let mut ids = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(64) {
        let views = chunk
            .iter()
            .map(|p| eval_view(p, vit.image_size, mean, std))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = views.iter().collect();
        let emb = teacher_embeddings(teacher, vit, &refs)?;
        rows.extend_from_slice(emb.data());
        ids.extend(chunk.iter().map(|p| p.patch_id.clone()));
    }
    FeatureMatrix::new(
        ids,
        Tensor::new(&[patches.len(), vit.embed_dim], rows)?,
        labels,
    )
}

pub fn write_features(path: &Path, fm: &FeatureMatrix) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(fm.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(fm.dim() as u32).to_le_bytes());
    for &v in fm.x.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for id in &fm.ids {
        let b = id.as_bytes();
        buf.extend_from_slice(&(b.len() as u16).to_le_bytes());
        buf.extend_from_slice(b);
    }
    match &fm.labels {
        Some(labels) => {
            buf.push(1);
            for &l in labels {
                buf.extend_from_slice(&l.to_le_bytes());
            }
        }
        None => buf.push(0),
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let err = |offset: usize, reason: &str| Error::Format {
        path: path.display().to_string(),
        offset: offset as u64,
        reason: reason.to_string(),
    };
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(err(*pos, &format!("truncated while reading {what}")));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4, "magic")? != MAGIC {
        return Err(err(0, "bad magic, expected STNF"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(err(4, &format!("unsupported version {version}")));
    }
    let n = u32::from_le_bytes(take(&mut pos, 4, "rows")?.try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(take(&mut pos, 4, "cols")?.try_into().unwrap()) as usize;
    let raw = take(&mut pos, 4 * n * c, "feature data")?;
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        let len = u16::from_le_bytes(take(&mut pos, 2, "id length")?.try_into().unwrap()) as usize;
        let off = pos;
        let s = std::str::from_utf8(take(&mut pos, len, "id")?)
            .map_err(|_| err(off, "id is not UTF-8"))?;
        ids.push(s.to_string());
    }
    let flag = take(&mut pos, 1, "label flag")?[0];
    let labels = match flag {
        0 => None,
        1 => {
            let raw = take(&mut pos, 4 * n, "labels")?;
            Some(
                raw.chunks_exact(4)
                    .map(|b| i32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            )
        }
        other => return Err(err(pos - 1, &format!("bad label flag {other}"))),
    };
    if pos != bytes.len() {
        return Err(err(pos, "trailing bytes"));
    }
    FeatureMatrix::new(ids, Tensor::new(&[n, c], data)?, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_vit_params;

    fn sample_fm() -> FeatureMatrix {
        FeatureMatrix::new(
            vec!["a".into(), "b".into(), "c".into()],
            Tensor::from_fn(&[3, 4], |i| i as f32 * 0.5),
            Some(vec![0, 1, 0]),
        )
        .unwrap()
    }

    #[test]
    fn stnf_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.stnf");
        let fm = sample_fm();
        write_features(&path, &fm).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back, fm);
        let path2 = dir.path().join("g.stnf");
        write_features(&path2, &back).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn stnf_truncation_and_magic_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.stnf");
        write_features(&path, &sample_fm()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_features(&path), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            read_features(&path),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn extraction_is_deterministic_and_shaped() {
        let vit = ViTConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
        };
        let params = init_vit_params(&vit, 3).unwrap();
        let patches: Vec<PatchImage> = (0..5)
            .map(|i| PatchImage {
                patch_id: format!("p{i}"),
                slide_id: "s".into(),
                origin: (0, 0),
                side: 24,
                pixels: (0..24 * 24 * 3).map(|j| ((j + i * 7) % 255) as u8).collect(),
                foreground_fraction: 1.0,
            })
            .collect();
        let a = extract_features(&params, &vit, &patches, None, [0.5; 3], [0.5; 3]).unwrap();
        let b = extract_features(&params, &vit, &patches, None, [0.5; 3], [0.5; 3]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.x.shape(), &[5, 8]);
        // identical patch twice -> identical rows
        let twice = vec![patches[0].clone(), patches[0].clone()];
        let f = extract_features(&params, &vit, &twice, None, [0.5; 3], [0.5; 3]).unwrap();
        assert_eq!(f.row(0), f.row(1));
    }
}
