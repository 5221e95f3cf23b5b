//! Binary PPM (P6, maxval 255) patch files.

use super::PatchImage;
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub fn encode_ppm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(pixels.len() + 32);
    out.extend_from_slice(format!("P6\n{width} {height}\n255\n").as_bytes());
    out.extend_from_slice(pixels);
    out
}

pub fn write_patch(path: &Path, patch: &PatchImage) -> Result<()> {
    debug_assert_eq!(patch.pixels.len(), patch.side * patch.side * 3);
    let bytes = encode_ppm(patch.side, patch.side, &patch.pixels);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_patch(path: &Path) -> Result<PatchImage> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (width, height, pixels) = decode_ppm(&bytes, &path.display().to_string())?;
    if width != height {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: 3,
            reason: format!("patch must be square, got {width}x{height}"),
        });
    }
    // canonical patch ids carry their tile origin: <slide>-x<ox>-y<oy>
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let slide_id = path
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let origin = parse_origin(&stem).unwrap_or((0, 0));
    Ok(PatchImage {
        patch_id: stem,
        slide_id,
        origin,
        side: width,
        pixels,
        foreground_fraction: 1.0,
    })
}

fn parse_origin(stem: &str) -> Option<(usize, usize)> {
    let x_pos = stem.rfind("-x")?;
    let y_pos = stem.rfind("-y")?;
    if y_pos <= x_pos {
        return None;
    }
    let x = stem[x_pos + 2..y_pos].parse().ok()?;
    let y = stem[y_pos + 2..].parse().ok()?;
    Some((x, y))
}

/// Strict P6 decoder; errors carry the byte offset of the problem.
pub fn decode_ppm(bytes: &[u8], path: &str) -> Result<(usize, usize, Vec<u8>)> {
    let err = |offset: usize, reason: &str| Error::Format {
        path: path.to_string(),
        offset: offset as u64,
        reason: reason.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(err(0, "bad magic, expected P6"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3]; // width, height, maxval
    for field in fields.iter_mut() {
        // skip whitespace
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(err(start, "expected decimal field"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *field = text
            .parse()
            .map_err(|_| err(start, "field out of range"))?;
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(err(pos, "maxval must be 255"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(err(pos, "expected single whitespace before payload"));
    }
    pos += 1;
    let need = width * height * 3;
    if bytes.len() - pos < need {
        return Err(err(bytes.len(), "truncated payload"));
    }
    if bytes.len() - pos > need {
        return Err(err(pos + need, "trailing bytes after payload"));
    }
    Ok((width, height, bytes[pos..pos + need].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_patch() -> PatchImage {
        PatchImage {
            patch_id: "s00-000-x224-y448".into(),
            slide_id: "s00-000".into(),
            origin: (224, 448),
            side: 4,
            pixels: (0..48).map(|i| (i * 5) as u8).collect(),
            foreground_fraction: 1.0,
        }
    }

    #[test]
    fn round_trip_bytes_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s00-000-x224-y448.ppm");
        let p = sample_patch();
        write_patch(&path, &p).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        let back = read_patch(&path).unwrap();
        assert_eq!(back.pixels, p.pixels);
        assert_eq!(back.origin, (224, 448));
        write_patch(&path, &back).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn truncated_file_is_format_error_with_offset() {
        let p = sample_patch();
        let bytes = encode_ppm(4, 4, &p.pixels);
        let cut = &bytes[..bytes.len() - 5];
        let e = decode_ppm(cut, "x.ppm").unwrap_err();
        match e {
            Error::Format { offset, reason, .. } => {
                assert_eq!(offset, cut.len() as u64);
                assert!(reason.contains("truncated"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(matches!(
            decode_ppm(b"P5\n1 1\n255\n\0\0\0", "x.ppm"),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn file_size_is_header_plus_payload() {
        let side = 224;
        let pixels = vec![0u8; side * side * 3];
        let bytes = encode_ppm(side, side, &pixels);
        let header = format!("P6\n{side} {side}\n255\n");
        assert_eq!(bytes.len(), header.len() + 3 * side * side);
        assert_eq!(bytes.len(), 15 + 3 * side * side);
    }
}
