//! Band partitioning of a (centrally shifted) `H×W` spectrum plane into
//! contiguous `h×w` tiles.
//!
//! Group `g = gy·(W/w) + gx` holds rows `[gy·h, (gy+1)·h)` and columns
//! `[gx·w, (gx+1)·w)`, flattened row-major into `h·w` tokens.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PartitionSpec {
    h: usize,
    w: usize,
    height: usize,
    width: usize,
}

impl PartitionSpec {
    pub fn new(h: usize, w: usize, height: usize, width: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Config(format!("partition stride must be positive, got {h}×{w}")));
        }
        if height == 0 || !height.is_multiple_of(h) {
            return Err(Error::Config(format!(
                "height H={height} is not divisible by vertical stride h={h}"
            )));
        }
        if width == 0 || !width.is_multiple_of(w) {
            return Err(Error::Config(format!(
                "width W={width} is not divisible by horizontal stride w={w}"
            )));
        }
        Ok(PartitionSpec { h, w, height, width })
    }

    /// Square tiles of side `stride`.
    pub fn square(stride: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(stride, stride, height, width)
    }

    pub fn tile(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Number of groups, `d = H·W / (h·w)`.
    pub fn band_count(&self) -> usize {
        (self.height / self.h) * (self.width / self.w)
    }

    pub fn tokens_per_band(&self) -> usize {
        self.h * self.w
    }

    /// Flat source index for each `(group, slot)` position of the unfolded layout.
    pub fn unfold_index(&self) -> Rc<[usize]> {
        let gx_count = self.width / self.w;
        let mut index = Vec::with_capacity(self.height * self.width);
        for g in 0..self.band_count() {
            let (gy, gx) = (g / gx_count, g % gx_count);
            for r in 0..self.h {
                for c in 0..self.w {
                    index.push((gy * self.h + r) * self.width + gx * self.w + c);
                }
            }
        }
        index.into()
    }

    /// Inverse of [`Self::unfold_index`]: for each spatial bin, its `(group, slot)` position.
    pub fn fold_index(&self) -> Rc<[usize]> {
        let unfold = self.unfold_index();
        let mut index = vec![0; unfold.len()];
        for (pos, &src) in unfold.iter().enumerate() {
            index[src] = pos;
        }
        index.into()
    }
}

/// Tokens of every band group, `d × (h·w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandGrouping {
    pub tokens: Tensor,
    pub spec: PartitionSpec,
    /// Whether the source plane was centrally shifted before partitioning.
    pub shifted: bool,
}

impl BandGrouping {
    pub fn group(&self, g: usize) -> Result<Tensor> {
        self.tokens.index0(g)
    }
}

pub fn unfold(map: &Tensor, spec: PartitionSpec) -> Result<BandGrouping> {
    check_plane(map.shape(), spec)?;
    let data = spec.unfold_index().iter().map(|&i| map.data()[i]).collect();
    Ok(BandGrouping {
        tokens: Tensor::new(vec![spec.band_count(), spec.tokens_per_band()], data)?,
        spec,
        shifted: false,
    })
}

pub fn fold(groups: &BandGrouping) -> Result<Tensor> {
    let spec = groups.spec;
    let expected = [spec.band_count(), spec.tokens_per_band()];
    if groups.tokens.shape() != expected {
        return Err(Error::shape(format!(
            "fold: tokens {:?} do not match spec layout {expected:?}",
            groups.tokens.shape()
        )));
    }
    let data = spec
        .fold_index()
        .iter()
        .map(|&i| groups.tokens.data()[i])
        .collect();
    Tensor::new(vec![spec.height, spec.width], data)
}

pub fn unfold_var(map: Var<'_>, spec: PartitionSpec) -> Result<Var<'_>> {
    check_plane(&map.shape(), spec)?;
    map.gather(
        spec.unfold_index(),
        &[spec.band_count(), spec.tokens_per_band()],
    )
}

pub fn fold_var(tokens: Var<'_>, spec: PartitionSpec) -> Result<Var<'_>> {
    let expected = [spec.band_count(), spec.tokens_per_band()];
    if tokens.shape() != expected {
        return Err(Error::shape(format!(
            "fold: tokens {:?} do not match spec layout {expected:?}",
            tokens.shape()
        )));
    }
    tokens.gather(spec.fold_index(), &[spec.height, spec.width])
}

fn check_plane(shape: &[usize], spec: PartitionSpec) -> Result<()> {
    if shape != [spec.height, spec.width] {
        return Err(Error::shape(format!(
            "map {shape:?} does not match partition extent {}×{}",
            spec.height, spec.width
        )));
    }
    Ok(())
}
