//! On-disk image and token formats: binary PGM (8- and 16-bit) and `QDTK`
//! token grids.

use std::path::Path;

use crate::error::{Error, Result};

fn format_err(kind: &'static str, msg: impl Into<String>) -> Error {
    Error::Format {
        kind,
        msg: msg.into(),
    }
}

/// One grayscale plane with its maximum value (255 or 65535).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

impl Plane {
    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(
            format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).as_bytes(),
        );
        if self.maxval < 256 {
            out.extend(self.samples.iter().map(|&s| s as u8));
        } else {
            for s in &self.samples {
                out.extend_from_slice(&s.to_be_bytes());
            }
        }
    }
}

/// Encodes planes back to back as consecutive P5 images.
pub fn encode_pgm(planes: &[Plane]) -> Vec<u8> {
    let mut out = Vec::new();
    for p in planes {
        p.encode(&mut out);
    }
    out
}

/// Parses every P5 image in `bytes`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Vec<Plane>> {
    let mut pos = 0;
    let mut planes = Vec::new();
    while pos < bytes.len() {
        let (plane, next) = decode_one(bytes, pos)?;
        planes.push(plane);
        pos = next;
    }
    if planes.is_empty() {
        return Err(format_err("pgm", "empty file"));
    }
    Ok(planes)
}

fn decode_one(bytes: &[u8], mut pos: usize) -> Result<(Plane, usize)> {
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err("pgm", "truncated header"));
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|e| format_err("pgm", e.to_string()))?,
        );
    }
    if fields[0] != "P5" {
        return Err(format_err(
            "pgm",
            format!("unsupported magic {:?}", fields[0]),
        ));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| format_err("pgm", format!("{s:?}: {e}")))
    };
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(format_err("pgm", format!("maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let n = width * height;
    let bytes_per = if maxval < 256 { 1 } else { 2 };
    let end = pos + n * bytes_per;
    if end > bytes.len() {
        return Err(format_err("pgm", "truncated raster"));
    }
    let raster = &bytes[pos..end];
    let samples = if bytes_per == 1 {
        raster.iter().map(|&b| b as u16).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    Ok((
        Plane {
            width,
            height,
            maxval: maxval as u16,
            samples,
        },
        end,
    ))
}

pub fn read_pgm(path: &Path) -> Result<Vec<Plane>> {
    decode_pgm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub const QDTK_MAGIC: &[u8; 4] = b"QDTK";

/// `"QDTK"`, side `g` as little-endian `u16`, then `g²` little-endian `u16` indices.
pub fn encode_tokens(side: usize, indices: &[usize]) -> Result<Vec<u8>> {
    let g = u16::try_from(side).map_err(|_| Error::Param(format!("grid side {side} too large")))?;
    if indices.len() != side * side {
        return Err(Error::shape("qdtk", &[side, side], &[indices.len()]));
    }
    let mut out = Vec::with_capacity(6 + 2 * indices.len());
    out.extend_from_slice(QDTK_MAGIC);
    out.extend_from_slice(&g.to_le_bytes());
    for &i in indices {
        let v = u16::try_from(i).map_err(|_| Error::Index {
            index: i,
            bound: 65536,
        })?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tokens(bytes: &[u8]) -> Result<(usize, Vec<usize>)> {
    if bytes.len() < 6 || &bytes[..4] != QDTK_MAGIC {
        return Err(format_err("token grid", "bad magic"));
    }
    let g = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let body = &bytes[6..];
    if body.len() != 2 * g * g {
        return Err(format_err(
            "token grid",
            format!("expected {} indices", g * g),
        ));
    }
    Ok((
        g,
        body.chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixteen_bit_pgm_round_trip() {
        let p = Plane {
            width: 3,
            height: 2,
            maxval: 65535,
            samples: vec![0, 1, 256, 65535, 40000, 7],
        };
        let bytes = encode_pgm(std::slice::from_ref(&p));
        assert!(bytes.starts_with(b"P5\n3 2\n65535\n"));
        assert_eq!(decode_pgm(&bytes).unwrap(), vec![p]);
    }

    #[test]
    fn concatenated_planes() {
        let planes: Vec<Plane> = (0..3)
            .map(|c| Plane {
                width: 2,
                height: 2,
                maxval: 255,
                samples: vec![c, 10 + c, 20, 255],
            })
            .collect();
        assert_eq!(decode_pgm(&encode_pgm(&planes)).unwrap(), planes);
    }

    #[test]
    fn malformed_pgm() {
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pgm(b"P5\n4 4\n255\n\x00").is_err());
    }

    #[test]
    fn token_file_layout() {
        let b = encode_tokens(2, &[0, 5, 300, 1]).unwrap();
        assert_eq!(&b[..6], b"QDTK\x02\x00");
        assert_eq!(decode_tokens(&b).unwrap(), (2, vec![0, 5, 300, 1]));
        assert!(encode_tokens(2, &[1, 2, 3]).is_err());
        assert!(decode_tokens(&b[..7]).is_err());
    }
}
