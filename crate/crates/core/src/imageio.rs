//! On-disk formats.
//!
//! TensorFile layout (all integers little-endian):
//!
//! ```text
//! "FDT1" | rank: u32 | dims: u32 × rank | payload: f64 × Π dims | fnv1a64(payload): u64
//! ```
//!
//! Gray exports are binary PGM (`P5`, maxval 255) with a `<file>.txt`
//! sidecar recording the min/max used for linear scaling.

use std::fs;
use std::path::{Path, PathBuf};

use crate::denodet::{DenoConfig, DenoParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FDT1";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    if t.rank() == 0 {
        return Err(Error::shape("tensor files need rank ≥ 1"));
    }
    let mut out = Vec::with_capacity(4 + 4 + 4 * t.rank() + 8 * t.numel() + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&u32_dim(t.rank())?.to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&u32_dim(d)?.to_le_bytes());
    }
    let payload_start = out.len();
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let checksum = fnv1a64(&out[payload_start..]);
    out.extend_from_slice(&checksum.to_le_bytes());
    Ok(out)
}

fn u32_dim(d: usize) -> Result<u32> {
    u32::try_from(d).map_err(|_| Error::shape(format!("dimension {d} does not fit in u32")))
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let format = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let truncated = |expected: usize| Error::Truncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 8 {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(format(format!("bad magic {:?}", &bytes[..4])));
        }
        return Err(truncated(8));
    }
    if &bytes[..4] != MAGIC {
        return Err(format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            "FDT1"
        )));
    }
    let read_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let rank = read_u32(4);
    if rank == 0 {
        return Err(format("rank 0 is not allowed".into()));
    }
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let shape: Vec<usize> = (0..rank).map(|i| read_u32(8 + 4 * i)).collect();
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format(format!("shape {shape:?} overflows")))?;
    let payload_len = numel
        .checked_mul(8)
        .ok_or_else(|| format(format!("shape {shape:?} overflows")))?;
    let expected = header + payload_len + 8;
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    if bytes.len() > expected {
        return Err(format(format!(
            "{} trailing bytes after checksum",
            bytes.len() - expected
        )));
    }
    let payload = &bytes[header..header + payload_len];
    let stored = u64::from_le_bytes(bytes[header + payload_len..].try_into().unwrap());
    let computed = fnv1a64(payload);
    if stored != computed {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

/// Shape from the header alone, without reading the payload.
pub fn read_shape(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 8];
    read_exact(&mut f, &mut head, path)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "bad magic".into(),
        });
    }
    let rank = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
    if rank == 0 || rank > 16 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("unsupported rank {rank}"),
        });
    }
    let mut dims = vec![0u8; 4 * rank];
    read_exact(&mut f, &mut dims, path)?;
    Ok(dims
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect())
}

fn read_exact(f: &mut fs::File, buf: &mut [u8], path: &Path) -> Result<()> {
    use std::io::Read;
    f.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated {
            path: path.to_path_buf(),
            expected: buf.len(),
            found: 0,
        },
        _ => Error::io(path, e),
    })
}

/// Writes each parameter tensor to `dir/<name>.fdt`.
pub fn save_params(params: &DenoParams, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        save_tensor(t, dir.join(format!("{name}.fdt")))?;
    }
    Ok(())
}

/// Reads parameters saved by [`save_params`] for `config`.
pub fn load_params(config: &DenoConfig, dir: impl AsRef<Path>) -> Result<DenoParams> {
    let dir = dir.as_ref();
    let mut params = DenoParams::identity(config);
    let names = params.names();
    for (name, slot) in names.iter().zip(params.tensors_mut()) {
        let t = load_tensor(dir.join(format!("{name}.fdt")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Config(format!(
                "parameter {name} has shape {:?}, configuration needs {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(params)
}

/// Min/max used to scale a gray export.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrayRange {
    pub min: f64,
    pub max: f64,
}

impl GrayRange {
    fn to_sidecar(self) -> String {
        format!("min {:?}\nmax {:?}\n", self.min, self.max)
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut min = None;
        let mut max = None;
        for line in text.lines() {
            let mut it = line.split_whitespace();
            match (it.next(), it.next()) {
                (Some("min"), Some(v)) => min = v.parse().ok(),
                (Some("max"), Some(v)) => max = v.parse().ok(),
                _ => {}
            }
        }
        match (min, max) {
            (Some(min), Some(max)) => Ok(GrayRange { min, max }),
            _ => Err(Error::Format {
                path: path.to_path_buf(),
                msg: "sidecar lacks min/max".into(),
            }),
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

/// 8-bit pixels by linear min–max scaling; a constant map becomes all 128.
pub fn gray_pixels(t: &Tensor) -> Result<(Vec<u8>, GrayRange)> {
    if t.rank() != 2 {
        return Err(Error::shape(format!("gray export needs H×W, got {:?}", t.shape())));
    }
    if !t.is_finite() {
        return Err(Error::shape("gray export of non-finite values"));
    }
    let min = t.data().iter().copied().fold(f64::INFINITY, f64::min);
    let max = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixels = if max > min {
        t.data()
            .iter()
            .map(|&v| ((v - min) / (max - min) * 255.0).round() as u8)
            .collect()
    } else {
        vec![128; t.numel()]
    };
    Ok((pixels, GrayRange { min, max }))
}

pub fn encode_gray(t: &Tensor) -> Result<(Vec<u8>, GrayRange)> {
    let (pixels, range) = gray_pixels(t)?;
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels);
    Ok((out, range))
}

pub fn export_gray(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (bytes, range) = encode_gray(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, range.to_sidecar()).map_err(|e| Error::io(side, e))
}

/// Reads a P5 export and maps pixels back through the sidecar range.
pub fn load_gray(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let range = GrayRange::parse(&text, &side)?;
    let (w, h, pixels) = parse_p5(&bytes, path)?;
    let data = pixels
        .iter()
        .map(|&p| {
            if range.max > range.min {
                range.min + p as f64 / 255.0 * (range.max - range.min)
            } else {
                range.min
            }
        })
        .collect();
    Tensor::new(vec![h, w], data)
}

fn parse_p5<'a>(bytes: &'a [u8], path: &Path) -> Result<(usize, usize, &'a [u8])> {
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary graymap (P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PGM header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    // single whitespace byte separates header from raster
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != w * h {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: pos + w * h,
            found: bytes.len(),
        });
    }
    Ok((w, h, raster))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_arithmetic() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let b = encode_tensor(&t).unwrap();
        assert_eq!(b.len(), 4 + 4 + 8 + 48 + 8);
        assert_eq!(&b[..4], b"FDT1");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &3u32.to_le_bytes());
        assert_eq!(&b[16 + 8..16 + 16], &1.0f64.to_le_bytes());
    }

    #[test]
    fn fnv_reference_values() {
        // published FNV-1a 64-bit test vectors
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn decode_errors() {
        let t = Tensor::from_vec(vec![1.0, 2.0]);
        let good = encode_tensor(&t).unwrap();
        let p = Path::new("mem");
        assert_eq!(decode_tensor(&good, p).unwrap(), t);

        let mut magic = good.clone();
        magic[3] = b'2';
        assert!(matches!(decode_tensor(&magic, p), Err(Error::Format { .. })));

        let mut flipped = good.clone();
        flipped[14] ^= 0x01;
        assert!(matches!(decode_tensor(&flipped, p), Err(Error::Corrupt { .. })));

        let short = &good[..good.len() - 3];
        assert!(matches!(decode_tensor(short, p), Err(Error::Truncated { .. })));
    }

    #[test]
    fn gray_constant_and_endpoints() {
        let (px, _) = gray_pixels(&Tensor::full(&[2, 2], 3.0)).unwrap();
        assert!(px.iter().all(|&p| p == 128));
        let t = Tensor::new(vec![2, 2], vec![-1.0, 0.0, 0.5, 3.0]).unwrap();
        let (px, r) = gray_pixels(&t).unwrap();
        assert_eq!((px[0], px[3]), (0, 255));
        assert_eq!(r, GrayRange { min: -1.0, max: 3.0 });
        assert!(gray_pixels(&Tensor::zeros(&[1, 2, 2])).is_err());
    }
}
