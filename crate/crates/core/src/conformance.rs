//! Golden fixtures for the on-disk formats.
//!
//! `golden.fdt` holds [`golden_tensor`]; `golden.pgm` (with its `.txt`
//! sidecar) is the gray export of [`golden_gray_source`]. The committed files
//! were written by an encoder independent of this crate.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imageio::{decode_tensor, encode_gray, encode_tensor, load_gray, sidecar_path};
use crate::tensor::Tensor;

pub const TENSOR_FILE: &str = "golden.fdt";
pub const GRAY_FILE: &str = "golden.pgm";

/// `2×3×4`, including a negative zero, a subnormal and a non-terminating binary fraction.
pub fn golden_tensor() -> Tensor {
    let mut data: Vec<f64> = (0..24).map(|i| i as f64 * 0.25 - 3.0).collect();
    data[1] = -0.0;
    data[5] = 1.0 / 3.0;
    data[7] = 5e-324;
    data[11] = std::f64::consts::PI;
    data[17] = -1e300;
    data[23] = 2f64.powi(-30);
    Tensor::new(vec![2, 3, 4], data).expect("fixed shape")
}

/// `4×6`, `sin(0.7·y) + 0.1·x`.
pub fn golden_gray_source() -> Tensor {
    let data = (0..4)
        .flat_map(|y| (0..6).map(move |x| (0.7 * y as f64).sin() + 0.1 * x as f64))
        .collect();
    Tensor::new(vec![4, 6], data).expect("fixed shape")
}

fn fail(msg: String) -> Error {
    Error::Contract(format!("conformance: {msg}"))
}

/// Checks the golden files in `dir`. Every failure is reported as a
/// conformance error naming the file.
pub fn check_golden_dir(dir: &Path) -> Result<()> {
    let path = dir.join(TENSOR_FILE);
    let bytes = fs::read(&path).map_err(|e| fail(format!("{}: {e}", path.display())))?;
    let t = decode_tensor(&bytes, &path).map_err(|e| fail(e.to_string()))?;
    if !t.bit_eq(&golden_tensor()) {
        return Err(fail(format!("{} does not decode to the reference tensor", path.display())));
    }
    if encode_tensor(&t)? != bytes {
        return Err(fail(format!("{} does not re-encode byte for byte", path.display())));
    }

    let path = dir.join(GRAY_FILE);
    let bytes = fs::read(&path).map_err(|e| fail(format!("{}: {e}", path.display())))?;
    let side = sidecar_path(&path);
    let text = fs::read_to_string(&side).map_err(|e| fail(format!("{}: {e}", side.display())))?;
    let (expected, range) = encode_gray(&golden_gray_source())?;
    if bytes != expected {
        return Err(fail(format!("{} differs from the reference export", path.display())));
    }
    let expected_side = format!("min {:?}\nmax {:?}\n", range.min, range.max);
    if text != expected_side {
        return Err(fail(format!("{} differs from the reference sidecar", side.display())));
    }
    let back = load_gray(&path).map_err(|e| fail(e.to_string()))?;
    if back.shape() != [4, 6] {
        return Err(fail(format!("{} loads with shape {:?}", path.display(), back.shape())));
    }
    Ok(())
}
