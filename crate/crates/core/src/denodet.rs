//! The full transform-domain denoiser.
//!
//! Pipeline: DFT → amplitude/phase → central shift → channel pooling →
//! band attention (self or token-exchange) → gate amplitude and phase →
//! optional harmonization → inverse shift → recombine → inverse DFT.

use std::fmt;

use log::{debug, warn};
use rand::Rng;

use crate::attention::{
    bpsa_var, channel_pool, pate_var, BoundModality, ModalityParams, SqrtScaling,
};
use crate::bands::PartitionSpec;
use crate::error::{Error, Result};
use crate::spectral::{
    decouple_var, dft2_var, from_angle_var, from_decoupled_var, harmonize_var, idft2_var,
    shift_var, to_polar_var, HARMONIZE_EPS,
};
use crate::tape::{chw, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STRIDE: usize = 8;

/// Imaginary residue above which a forward pass is reported as non-real.
pub const RESIDUE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DenoConfig {
    /// Square tile side `s` (`h = w = s`).
    pub stride: usize,
    pub refine_amplitude: bool,
    pub refine_phase: bool,
    pub token_exchange: bool,
    pub phase_decouple: bool,
    pub phase_align: bool,
    pub sqrt_scaling: SqrtScaling,
}

impl Default for DenoConfig {
    fn default() -> Self {
        DenoConfig {
            stride: DEFAULT_STRIDE,
            refine_amplitude: true,
            refine_phase: true,
            token_exchange: true,
            phase_decouple: true,
            phase_align: true,
            sqrt_scaling: SqrtScaling::GroupCount,
        }
    }
}

impl DenoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        if self.token_exchange && !(self.refine_amplitude && self.refine_phase) {
            return Err(Error::Config(
                "token exchange needs both amplitude and phase refinement".into(),
            ));
        }
        if self.phase_align && !self.phase_decouple {
            return Err(Error::Config("phase alignment needs phase decoupling".into()));
        }
        Ok(())
    }

    pub fn partition(&self, height: usize, width: usize) -> Result<PartitionSpec> {
        PartitionSpec::square(self.stride, height, width).map_err(|_| {
            Error::Config(format!(
                "H={height}, W={width} not divisible by stride {}",
                self.stride
            ))
        })
    }

    pub fn tokens(&self) -> usize {
        self.stride * self.stride
    }

    pub fn is_identity(&self) -> bool {
        !self.refine_amplitude && !self.refine_phase
    }

    /// Compact, stable identifier, e.g. `s8-amp-pha-x-dec-aln-group`.
    pub fn id(&self) -> String {
        let mut parts = vec![format!("s{}", self.stride)];
        let flags = [
            (self.refine_amplitude, "amp"),
            (self.refine_phase, "pha"),
            (self.token_exchange, "x"),
            (self.phase_decouple, "dec"),
            (self.phase_align, "aln"),
        ];
        parts.extend(flags.iter().filter(|(on, _)| *on).map(|(_, n)| n.to_string()));
        if self.is_identity() {
            parts.push("off".into());
        }
        parts.push(self.sqrt_scaling.name().into());
        parts.join("-")
    }
}

impl fmt::Display for DenoConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "stride={} refine_amplitude={} refine_phase={} token_exchange={} phase_decouple={} phase_align={} sqrt_scaling={}",
            self.stride,
            self.refine_amplitude,
            self.refine_phase,
            self.token_exchange,
            self.phase_decouple,
            self.phase_align,
            self.sqrt_scaling.name()
        )
    }
}

/// Learnable weights: one [`ModalityParams`] per refined branch.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoParams {
    pub amplitude: Option<ModalityParams>,
    pub phase: Option<ModalityParams>,
}

impl DenoParams {
    pub fn init<R: Rng + ?Sized>(config: &DenoConfig, rng: &mut R) -> Self {
        let n = config.tokens();
        let amplitude = config.refine_amplitude.then(|| ModalityParams::init(n, rng));
        let phase = config.refine_phase.then(|| ModalityParams::init(n, rng));
        DenoParams { amplitude, phase }
    }

    pub fn identity(config: &DenoConfig) -> Self {
        let n = config.tokens();
        DenoParams {
            amplitude: config.refine_amplitude.then(|| ModalityParams::identity(n)),
            phase: config.refine_phase.then(|| ModalityParams::identity(n)),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.branches().flat_map(|(_, p)| p.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let Some(p) = self.amplitude.as_mut() {
            out.extend(p.tensors_mut());
        }
        if let Some(p) = self.phase.as_mut() {
            out.extend(p.tensors_mut());
        }
        out
    }

    /// `branch.tensor` names aligned with [`Self::tensors`].
    pub fn names(&self) -> Vec<String> {
        self.branches()
            .flat_map(|(b, _)| ModalityParams::NAMES.iter().map(move |n| format!("{b}.{n}")))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    fn branches(&self) -> impl Iterator<Item = (&'static str, &ModalityParams)> {
        self.amplitude
            .iter()
            .map(|p| ("amplitude", p))
            .chain(self.phase.iter().map(|p| ("phase", p)))
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams {
            amplitude: self.amplitude.as_ref().map(|p| p.bind(tape)),
            phase: self.phase.as_ref().map(|p| p.bind(tape)),
        }
    }

    fn check(&self, config: &DenoConfig) -> Result<()> {
        let n = config.tokens();
        let ok = |p: &Option<ModalityParams>, needed: bool| match p {
            Some(p) => needed && p.tokens() == n,
            None => !needed,
        };
        if ok(&self.amplitude, config.refine_amplitude) && ok(&self.phase, config.refine_phase) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "parameters do not match configuration ({config})"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundParams<'t> {
    pub amplitude: Option<BoundModality<'t>>,
    pub phase: Option<BoundModality<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn vars(&self) -> Vec<Var<'t>> {
        self.amplitude
            .iter()
            .chain(self.phase.iter())
            .flat_map(|b| b.vars())
            .collect()
    }
}

/// Values recorded by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars<'t> {
    pub output: Var<'t>,
    /// Amplitude gate, `H×W`, in centrally shifted layout.
    pub amplitude_gate: Option<Var<'t>>,
    /// Phase gate, `H×W`, in centrally shifted layout.
    pub phase_gate: Option<Var<'t>>,
    /// Largest imaginary part dropped by the inverse transform.
    pub imag_residue: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub output: Tensor,
    pub imag_residue: f64,
}

impl ForwardOutput {
    pub fn residue_ok(&self) -> bool {
        self.imag_residue < RESIDUE_TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoModule {
    config: DenoConfig,
    params: DenoParams,
}

impl DenoModule {
    pub fn new(config: DenoConfig, params: DenoParams) -> Result<Self> {
        config.validate()?;
        params.check(&config)?;
        Ok(DenoModule { config, params })
    }

    pub fn seeded<R: Rng + ?Sized>(config: DenoConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = DenoParams::init(&config, rng);
        Ok(DenoModule { config, params })
    }

    /// Every gate fixed at 1.
    pub fn identity(config: DenoConfig) -> Result<Self> {
        config.validate()?;
        let params = DenoParams::identity(&config);
        Ok(DenoModule { config, params })
    }

    pub fn config(&self) -> &DenoConfig {
        &self.config
    }

    pub fn params(&self) -> &DenoParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut DenoParams {
        &mut self.params
    }

    /// Records the forward pass of `x` (`C×H×W`) using already-bound parameters.
    pub fn forward_var<'t>(&self, x: Var<'t>, params: &BoundParams<'t>) -> Result<ForwardVars<'t>> {
        let cfg = &self.config;
        let (_, h, w) = chw(&x.value())?;
        let spec = cfg.partition(h, w)?;
        if cfg.is_identity() {
            return Ok(ForwardVars {
                output: x,
                amplitude_gate: None,
                phase_gate: None,
                imag_residue: 0.0,
            });
        }

        let spectrum = dft2_var(x)?;
        let (amp, phase) = to_polar_var(spectrum)?;
        let amp = shift_var(amp, false)?;
        let phase = shift_var(phase, false)?;

        let decoupled = cfg.phase_decouple.then(|| decouple_var(phase));
        let amp_map = channel_pool(amp)?;
        let phase_map = match decoupled {
            Some((c, s)) => {
                let stacked = x.tape().stack(&[channel_pool(c)?, channel_pool(s)?])?;
                channel_pool(stacked)?
            }
            None => channel_pool(phase)?,
        };

        let (amp_gate, phase_gate) = match (params.amplitude, params.phase) {
            (Some(pa), Some(pp)) => {
                let (sa, sp) = pate_var(
                    amp_map,
                    phase_map,
                    spec,
                    &pa,
                    &pp,
                    cfg.sqrt_scaling,
                    cfg.token_exchange,
                )?;
                (Some(sa), Some(sp))
            }
            (Some(pa), None) => (Some(bpsa_var(amp_map, spec, &pa, cfg.sqrt_scaling)?), None),
            (None, Some(pp)) => (None, Some(bpsa_var(phase_map, spec, &pp, cfg.sqrt_scaling)?)),
            (None, None) => unreachable!("identity configuration returns early"),
        };

        let amp_hat = match amp_gate {
            Some(g) => g.mul(amp)?,
            None => amp,
        };
        let amp_hat = shift_var(amp_hat, true)?;

        let spectrum_hat = match decoupled {
            Some((c, s)) => {
                let (mut c, mut s) = match phase_gate {
                    Some(g) => (g.mul(c)?, g.mul(s)?),
                    None => (c, s),
                };
                if cfg.phase_align && phase_gate.is_some() {
                    (c, s) = harmonize_var(c, s, HARMONIZE_EPS)?;
                }
                from_decoupled_var(amp_hat, shift_var(c, true)?, shift_var(s, true)?)?
            }
            None => {
                let p = match phase_gate {
                    Some(g) => g.mul(phase)?,
                    None => phase,
                };
                from_angle_var(amp_hat, shift_var(p, true)?)?
            }
        };

        let (real, imag) = idft2_var(spectrum_hat)?;
        let imag_residue = imag.value().max_abs();
        if imag_residue >= RESIDUE_TOLERANCE {
            debug!("inverse DFT imaginary residue {imag_residue:.3e}");
        }
        Ok(ForwardVars {
            output: real,
            amplitude_gate: amp_gate,
            phase_gate,
            imag_residue,
        })
    }

    pub fn forward(&self, m: &Tensor) -> Result<ForwardOutput> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let fv = self.forward_var(tape.leaf(m.clone()), &bound)?;
        let output = (*fv.output.value()).clone();
        if fv.imag_residue >= RESIDUE_TOLERANCE {
            warn!(
                "inverse DFT imaginary residue {:.3e} exceeds {RESIDUE_TOLERANCE:e}; returning the real part",
                fv.imag_residue
            );
        }
        Ok(ForwardOutput {
            output,
            imag_residue: fv.imag_residue,
        })
    }

    /// Amplitude and phase gates (`H×W`, centrally shifted layout). A branch
    /// that is not refined reports a map of ones.
    pub fn export_modulation(&self, m: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, h, w) = chw(m)?;
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let fv = self.forward_var(tape.leaf(m.clone()), &bound)?;
        let take = |g: Option<Var<'_>>| match g {
            Some(v) => (*v.value()).clone(),
            None => Tensor::ones(&[h, w]),
        };
        Ok((take(fv.amplitude_gate), take(fv.phase_gate)))
    }

    pub fn session(&self) -> DenoSession<'_> {
        DenoSession {
            module: self,
            recorded: None,
        }
    }
}

struct Recorded {
    tape: Tape,
    input: usize,
    output: usize,
    params: Vec<usize>,
}

/// One forward/backward cycle against a module.
pub struct DenoSession<'m> {
    module: &'m DenoModule,
    recorded: Option<Recorded>,
}

impl DenoSession<'_> {
    pub fn forward(&mut self, m: &Tensor) -> Result<ForwardOutput> {
        let tape = Tape::new();
        let (out, input, output, params) = {
            let bound = self.module.params.bind(&tape);
            let x = tape.leaf(m.clone());
            let fv = self.module.forward_var(x, &bound)?;
            let out = ForwardOutput {
                output: (*fv.output.value()).clone(),
                imag_residue: fv.imag_residue,
            };
            let params = bound.vars().iter().map(|v| v.id()).collect();
            (out, x.id(), fv.output.id(), params)
        };
        self.recorded = Some(Recorded {
            tape,
            input,
            output,
            params,
        });
        Ok(out)
    }

    /// Input gradient and parameter gradients (laid out like the module's
    /// parameters) for the recorded forward pass.
    pub fn backward(&self, upstream: &Tensor) -> Result<(Tensor, DenoParams)> {
        let rec = self
            .recorded
            .as_ref()
            .ok_or_else(|| Error::Contract("backward called before forward".into()))?;
        let tape = &rec.tape;
        let grads = tape.backward_from(tape.var(rec.output)?, upstream.clone())?;
        let input_grad = grads.wrt(tape.var(rec.input)?);
        let mut param_grads = self.module.params.clone();
        for (slot, &id) in param_grads.tensors_mut().into_iter().zip(&rec.params) {
            *slot = grads.wrt(tape.var(id)?);
        }
        Ok((input_grad, param_grads))
    }
}

/// Every valid combination of the four toggles with a fixed stride.
pub fn enumerate_configs(stride: usize, scaling: SqrtScaling) -> Vec<DenoConfig> {
    let mut out = Vec::new();
    for (amp, phase) in [(false, false), (true, false), (false, true), (true, true)] {
        for exchange in [false, true] {
            for (decouple, align) in [(false, false), (true, false), (true, true)] {
                let c = DenoConfig {
                    stride,
                    refine_amplitude: amp,
                    refine_phase: phase,
                    token_exchange: exchange,
                    phase_decouple: decouple,
                    phase_align: align,
                    sqrt_scaling: scaling,
                };
                if c.validate().is_ok() {
                    out.push(c);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(seed: u64) -> Tensor {
        Tensor::uniform(&[2, 8, 8], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn cfg(amp: bool, phase: bool) -> DenoConfig {
        DenoConfig {
            stride: 4,
            refine_amplitude: amp,
            refine_phase: phase,
            token_exchange: amp && phase,
            ..DenoConfig::default()
        }
    }

    #[test]
    fn default_stride_is_eight() {
        assert_eq!(DenoConfig::default().stride, 8);
    }

    #[test]
    fn invalid_toggles() {
        let mut c = cfg(true, false);
        c.token_exchange = true;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = DenoConfig {
            phase_decouple: false,
            phase_align: true,
            ..DenoConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn refines_off_is_exact_identity() {
        let m = DenoModule::seeded(cfg(false, false), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = input(1);
        assert!(m.forward(&x).unwrap().output.bit_eq(&x));
        let mut s = m.session();
        s.forward(&x).unwrap();
        let up = input(2);
        let (gx, grads) = s.backward(&up).unwrap();
        assert!(gx.bit_eq(&up));
        assert_eq!(grads.param_count(), 0);
    }

    #[test]
    fn identity_gates_round_trip() {
        for decouple in [false, true] {
            let c = DenoConfig {
                phase_decouple: decouple,
                phase_align: false,
                ..cfg(true, true)
            };
            let m = DenoModule::identity(c).unwrap();
            let x = input(3);
            let out = m.forward(&x).unwrap();
            assert!(out.output.max_abs_diff(&x) < 1e-9);
            let (sa, sp) = m.export_modulation(&x).unwrap();
            assert!(sa.data().iter().chain(sp.data()).all(|&v| v == 1.0));
        }
    }

    #[test]
    fn divisibility_is_checked() {
        let m = DenoModule::seeded(DenoConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let err = m.forward(&Tensor::zeros(&[1, 12, 16])).unwrap_err();
        assert!(matches!(err, Error::Config(msg) if msg.contains("H=12")));
    }

    #[test]
    fn backward_before_forward() {
        let m = DenoModule::seeded(cfg(true, true), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let s = m.session();
        assert!(matches!(s.backward(&input(0)), Err(Error::Contract(_))));
    }

    #[test]
    fn phase_off_reports_unit_phase_map() {
        let m = DenoModule::seeded(cfg(true, false), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let (sa, sp) = m.export_modulation(&input(5)).unwrap();
        assert!(sp.data().iter().all(|&v| v == 1.0));
        assert!(sa.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn gradients_scale_linearly() {
        let m = DenoModule::seeded(cfg(true, true), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let x = input(7);
        let up = input(8);
        let mut s = m.session();
        s.forward(&x).unwrap();
        let (g1, p1) = s.backward(&up).unwrap();
        let (g3, p3) = s.backward(&up.scale(4.0)).unwrap();
        assert!(g1.scale(4.0).bit_eq(&g3));
        for (a, b) in p1.tensors().iter().zip(p3.tensors()) {
            assert!(a.scale(4.0).bit_eq(b));
        }
    }

    #[test]
    fn params_must_match_config() {
        let c = cfg(true, true);
        let p = DenoParams::init(&cfg(true, false), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(DenoModule::new(c, p).is_err());
    }

    #[test]
    fn config_enumeration() {
        let all = enumerate_configs(4, SqrtScaling::GroupCount);
        // 4 refine combos × 3 phase modes, plus exchange for the both-refined row
        assert_eq!(all.len(), 15);
        assert!(all.iter().all(|c| c.validate().is_ok()));
    }
}
