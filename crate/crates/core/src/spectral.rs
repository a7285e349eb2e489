//! Transform-domain scaffolding: 2D DFT/IDFT, polar decomposition, central
//! shift, and the cos/sin phase representation.
//!
//! Each operation comes in two forms. The `*_var` functions record on a
//! [`Tape`] and are what the denoiser uses; the plain functions take and
//! return [`Tensor`]s and are thin wrappers that evaluate on a scratch tape.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tape::{chw, dft2_kernel, Tape, Var};
use crate::tensor::Tensor;

/// Default epsilon inside the harmonization square root.
pub const HARMONIZE_EPS: f64 = 1e-8;

/// Complex spectrum stored as paired real/imaginary `C×H×W` planes.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub real: Tensor,
    pub imag: Tensor,
}

impl Spectrum {
    pub fn new(real: Tensor, imag: Tensor) -> Result<Self> {
        if real.shape() != imag.shape() {
            return Err(Error::shape(format!(
                "real {:?} and imaginary {:?} planes differ",
                real.shape(),
                imag.shape()
            )));
        }
        chw(&real)?;
        Ok(Spectrum { real, imag })
    }

    /// `(C, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        chw(&self.real).expect("validated at construction")
    }

    /// Largest deviation from `X(u,v) = conj(X(−u,−v))` over all channels.
    pub fn hermitian_defect(&self) -> f64 {
        let (c, h, w) = self.dims();
        let re = self.real.data();
        let im = self.imag.data();
        let mut worst: f64 = 0.0;
        for ch in 0..c {
            for u in 0..h {
                for v in 0..w {
                    let a = ch * h * w + u * w + v;
                    let b = ch * h * w + ((h - u) % h) * w + (w - v) % w;
                    worst = worst.max((re[a] - re[b]).abs()).max((im[a] + im[b]).abs());
                }
            }
        }
        worst
    }
}

/// Amplitude/phase view of a spectrum, optionally carrying the phase as a
/// `(cos, sin)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarSpectrum {
    pub amplitude: Tensor,
    pub phase: Tensor,
    pub decoupled: Option<(Tensor, Tensor)>,
}

/// Real output of an inverse transform plus the largest discarded imaginary part.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMap {
    pub map: Tensor,
    pub imag_residue: f64,
}

/// Differentiable counterpart of [`Spectrum`].
#[derive(Debug, Clone, Copy)]
pub struct SpectrumVar<'t> {
    pub real: Var<'t>,
    pub imag: Var<'t>,
}

pub fn dft2_forward(m: &Tensor) -> Result<Spectrum> {
    let (c, h, w) = chw(m)?;
    if c * h * w == 0 {
        return Err(Error::shape(format!("cannot transform empty tensor {:?}", m.shape())));
    }
    let (re, im) = dft2_kernel(m.data(), None, c, h, w, -1.0, 1.0);
    Spectrum::new(Tensor::new(vec![c, h, w], re)?, Tensor::new(vec![c, h, w], im)?)
}

pub fn dft2_inverse(s: &Spectrum) -> Result<SpatialMap> {
    let (c, h, w) = s.dims();
    let (re, im) = dft2_kernel(
        s.real.data(),
        Some(s.imag.data()),
        c,
        h,
        w,
        1.0,
        1.0 / (h * w) as f64,
    );
    let imag_residue = im.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(SpatialMap {
        map: Tensor::new(vec![c, h, w], re)?,
        imag_residue,
    })
}

pub fn to_polar(s: &Spectrum) -> Result<PolarSpectrum> {
    let tape = Tape::new();
    let sv = SpectrumVar {
        real: tape.leaf(s.real.clone()),
        imag: tape.leaf(s.imag.clone()),
    };
    let (amp, phase) = to_polar_var(sv)?;
    Ok(PolarSpectrum {
        amplitude: (*amp.value()).clone(),
        phase: (*phase.value()).clone(),
        decoupled: None,
    })
}

/// Uses the decoupled `(cos, sin)` planes when present, the angle otherwise.
pub fn from_polar(p: &PolarSpectrum) -> Result<Spectrum> {
    let tape = Tape::new();
    let amp = tape.leaf(p.amplitude.clone());
    let sv = match &p.decoupled {
        Some((c, s)) => from_decoupled_var(amp, tape.leaf(c.clone()), tape.leaf(s.clone()))?,
        None => from_angle_var(amp, tape.leaf(p.phase.clone()))?,
    };
    Spectrum::new((*sv.real.value()).clone(), (*sv.imag.value()).clone())
}

pub fn decouple_phase(phase: &Tensor) -> (Tensor, Tensor) {
    (phase.map(f64::cos), phase.map(f64::sin))
}

/// Projects `(c, s)` back onto the unit circle:
/// `r = sqrt(c² + s² + eps)`, `(c/r, s/r)`.
pub fn harmonize_phase(c: &Tensor, s: &Tensor, eps: f64) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let (hc, hs) = harmonize_var(tape.leaf(c.clone()), tape.leaf(s.clone()), eps)?;
    let out = ((*hc.value()).clone(), (*hs.value()).clone());
    Ok(out)
}

/// Moves bin `(u, v)` of every trailing `H×W` plane to
/// `((u + ⌊H/2⌋) mod H, (v + ⌊W/2⌋) mod W)`.
pub fn central_shift(t: &Tensor) -> Result<Tensor> {
    permute_planes(t, &shift_index(t.shape(), false)?)
}

/// Exact inverse of [`central_shift`] for any size.
pub fn inverse_shift(t: &Tensor) -> Result<Tensor> {
    permute_planes(t, &shift_index(t.shape(), true)?)
}

impl Spectrum {
    pub fn central_shift(&self) -> Result<Spectrum> {
        Spectrum::new(central_shift(&self.real)?, central_shift(&self.imag)?)
    }

    pub fn inverse_shift(&self) -> Result<Spectrum> {
        Spectrum::new(inverse_shift(&self.real)?, inverse_shift(&self.imag)?)
    }
}

impl PolarSpectrum {
    pub fn central_shift(&self) -> Result<PolarSpectrum> {
        self.map_planes(central_shift)
    }

    pub fn inverse_shift(&self) -> Result<PolarSpectrum> {
        self.map_planes(inverse_shift)
    }

    fn map_planes(&self, f: fn(&Tensor) -> Result<Tensor>) -> Result<PolarSpectrum> {
        Ok(PolarSpectrum {
            amplitude: f(&self.amplitude)?,
            phase: f(&self.phase)?,
            decoupled: match &self.decoupled {
                Some((c, s)) => Some((f(c)?, f(s)?)),
                None => None,
            },
        })
    }
}

fn permute_planes(t: &Tensor, index: &[usize]) -> Result<Tensor> {
    let data = index.iter().map(|&i| t.data()[i]).collect();
    Tensor::new(t.shape().to_vec(), data)
}

/// Gather table for the central shift (or its inverse) over the last two axes.
pub fn shift_index(shape: &[usize], inverse: bool) -> Result<Rc<[usize]>> {
    let (planes, h, w) = match shape {
        [h, w] => (1, *h, *w),
        [lead @ .., h, w] => (lead.iter().product(), *h, *w),
        _ => return Err(Error::shape(format!("central shift needs rank ≥ 2, got {shape:?}"))),
    };
    let (dh, dw) = (h / 2, w / 2);
    let mut index = Vec::with_capacity(planes * h * w);
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                // output (i, j) reads from the bin that the shift moves there
                let (u, v) = if inverse {
                    ((i + dh) % h, (j + dw) % w)
                } else {
                    ((i + h - dh) % h, (j + w - dw) % w)
                };
                index.push(p * h * w + u * w + v);
            }
        }
    }
    Ok(index.into())
}

pub fn dft2_var(m: Var<'_>) -> Result<SpectrumVar<'_>> {
    let packed = m.tape().dft2(m, None, false)?;
    Ok(SpectrumVar {
        real: packed.index0(0)?,
        imag: packed.index0(1)?,
    })
}

/// Inverse transform; returns `(real part, imaginary part)`.
pub fn idft2_var(s: SpectrumVar<'_>) -> Result<(Var<'_>, Var<'_>)> {
    let packed = s.real.tape().dft2(s.real, Some(s.imag), true)?;
    Ok((packed.index0(0)?, packed.index0(1)?))
}

/// `(sqrt(R² + I²), atan2(I, R))`.
pub fn to_polar_var(s: SpectrumVar<'_>) -> Result<(Var<'_>, Var<'_>)> {
    let amp = s.real.square()?.add(s.imag.square()?)?.sqrt();
    let phase = s.imag.atan2(s.real)?;
    Ok((amp, phase))
}

pub fn from_angle_var<'t>(amp: Var<'t>, phase: Var<'t>) -> Result<SpectrumVar<'t>> {
    Ok(SpectrumVar {
        real: amp.mul(phase.cos())?,
        imag: amp.mul(phase.sin())?,
    })
}

pub fn from_decoupled_var<'t>(amp: Var<'t>, cos: Var<'t>, sin: Var<'t>) -> Result<SpectrumVar<'t>> {
    Ok(SpectrumVar {
        real: amp.mul(cos)?,
        imag: amp.mul(sin)?,
    })
}

pub fn decouple_var(phase: Var<'_>) -> (Var<'_>, Var<'_>) {
    (phase.cos(), phase.sin())
}

pub fn harmonize_var<'t>(c: Var<'t>, s: Var<'t>, eps: f64) -> Result<(Var<'t>, Var<'t>)> {
    if eps <= 0.0 {
        return Err(Error::Config(format!("harmonize epsilon must be positive, got {eps}")));
    }
    let eps_t = c.tape().leaf(Tensor::full(&c.shape(), eps));
    let r = c.square()?.add(s.square()?)?.add(eps_t)?.sqrt();
    Ok((c.div(r)?, s.div(r)?))
}

pub fn shift_var(v: Var<'_>, inverse: bool) -> Result<Var<'_>> {
    let shape = v.shape();
    v.gather(shift_index(&shape, inverse)?, &shape)
}
