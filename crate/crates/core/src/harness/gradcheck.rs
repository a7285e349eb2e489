//! Central-difference gradient checks.

use std::fmt;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::{BoundModality, SqrtScaling};
use crate::denodet::{BoundParams, DenoConfig, DenoModule};
use crate::error::{Error, Result};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;
pub const MODULE_TOLERANCE: f64 = 1e-5;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub label: String,
    pub coords: usize,
    pub tolerance: f64,
    pub max_rel_error: f64,
    /// Coordinate with the largest error, with its analytic and numeric values.
    pub worst: Option<(usize, f64, f64)>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<44} coords={:<5} max_rel_err={:.3e}",
            if self.passed() { "ok  " } else { "FAIL" },
            self.label,
            self.coords,
            self.max_rel_error
        )?;
        if let Some((i, a, n)) = self.worst {
            write!(f, " at #{i} (analytic {a:.6e}, numeric {n:.6e})")?;
        }
        Ok(())
    }
}

/// Relative error with an absolute floor of 1 in the denominator.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let e = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
    if e.is_nan() {
        f64::INFINITY
    } else {
        e
    }
}

/// Compares `analytic` against `(f(θ+he) − f(θ−he)) / 2h` per coordinate.
/// Coordinates are evaluated in parallel.
pub fn gradcheck<F>(label: &str, f: F, point: &[f64], analytic: &[f64], step: f64, tolerance: f64) -> Result<GradcheckReport>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Config(format!("gradcheck step must be > 0, got {step}")));
    }
    if point.len() != analytic.len() {
        return Err(Error::shape(format!(
            "gradcheck: {} coordinates but {} analytic entries",
            point.len(),
            analytic.len()
        )));
    }
    let errors: Vec<(f64, f64)> = (0..point.len())
        .into_par_iter()
        .map(|i| {
            let mut p = point.to_vec();
            p[i] = point[i] + step;
            let hi = f(&p);
            p[i] = point[i] - step;
            let lo = f(&p);
            let numeric = (hi - lo) / (2.0 * step);
            (rel_error(analytic[i], numeric), numeric)
        })
        .collect();
    let worst = errors
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |best, (i, &(e, _))| match best {
            Some((_, b)) if b >= e => best,
            _ => Some((i, e)),
        });
    Ok(GradcheckReport {
        label: label.to_string(),
        coords: point.len(),
        tolerance,
        max_rel_error: worst.map_or(0.0, |w| w.1),
        worst: worst.map(|(i, _)| (i, analytic[i], errors[i].1)),
    })
}

fn flatten(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflatten(like: &[Tensor], flat: &[f64]) -> Vec<Tensor> {
    let mut at = 0;
    like.iter()
        .map(|t| {
            let n = t.numel();
            let out = Tensor::new(t.shape().to_vec(), flat[at..at + n].to_vec()).expect("shape from template");
            at += n;
            out
        })
        .collect()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Gradcheck of `Σ build(inputs) ⊙ R` for a fixed random `R`, seeded from
/// `seed`. The analytic side uses one vector-Jacobian product.
pub fn check_tape_fn<B>(label: &str, inputs: &[Tensor], build: B, seed: u64, step: f64, tolerance: f64) -> Result<GradcheckReport>
where
    B: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Sync,
{
    let tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&tape, &leaves)?;
    let out_shape = out.shape();
    let weights = Tensor::uniform(&out_shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let grads = tape.backward_from(out, weights.clone())?;
    let analytic: Vec<Tensor> = leaves.iter().map(|&l| grads.wrt(l)).collect();

    let value = |flat: &[f64]| {
        let tape = Tape::new();
        let leaves: Vec<Var> = unflatten(inputs, flat).into_iter().map(|t| tape.leaf(t)).collect();
        match build(&tape, &leaves) {
            Ok(out) => dot(&out.value(), &weights),
            Err(_) => f64::NAN,
        }
    };
    gradcheck(label, value, &flatten(inputs), &flatten(&analytic), step, tolerance)
}

/// One small check per differentiable primitive.
pub fn primitive_cases() -> Vec<(OpKind, Vec<Tensor>, PrimitiveFn)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0b5e_55ed);
    let mut u = |shape: &[usize], lo: f64, hi: f64| Tensor::uniform(shape, lo, hi, &mut rng);
    let perm = vec![5usize, 0, 3, 3, 1, 4, 2, 5];
    vec![
        (OpKind::Add, vec![u(&[2, 3], -1.0, 1.0), u(&[3], -1.0, 1.0)], Box::new(|_, v| v[0].add(v[1]))),
        (OpKind::Sub, vec![u(&[3], -1.0, 1.0), u(&[2, 3], -1.0, 1.0)], Box::new(|_, v| v[0].sub(v[1]))),
        (OpKind::Mul, vec![u(&[2, 3], -1.0, 1.0), u(&[2, 3], -1.0, 1.0)], Box::new(|_, v| v[0].mul(v[1]))),
        (OpKind::Div, vec![u(&[2, 3], -1.0, 1.0), u(&[3], 0.5, 2.0)], Box::new(|_, v| v[0].div(v[1]))),
        (OpKind::Atan2, vec![u(&[6], -1.0, 1.0), u(&[6], 0.3, 1.0)], Box::new(|_, v| v[0].atan2(v[1]))),
        (OpKind::Sqrt, vec![u(&[6], 0.5, 2.0)], Box::new(|_, v| Ok(v[0].sqrt()))),
        (OpKind::Cos, vec![u(&[6], -3.0, 3.0)], Box::new(|_, v| Ok(v[0].cos()))),
        (OpKind::Sin, vec![u(&[6], -3.0, 3.0)], Box::new(|_, v| Ok(v[0].sin()))),
        (OpKind::Tanh, vec![u(&[6], -2.0, 2.0)], Box::new(|_, v| Ok(v[0].tanh()))),
        (OpKind::Sigmoid, vec![u(&[6], -3.0, 3.0)], Box::new(|_, v| Ok(v[0].sigmoid()))),
        (OpKind::Softplus, vec![u(&[6], -3.0, 3.0)], Box::new(|_, v| Ok(v[0].softplus()))),
        (OpKind::Scale, vec![u(&[6], -1.0, 1.0)], Box::new(|_, v| Ok(v[0].scale(-1.7)))),
        (OpKind::Matmul, vec![u(&[2, 3], -1.0, 1.0), u(&[3, 4], -1.0, 1.0)], Box::new(|_, v| v[0].matmul(v[1]))),
        (OpKind::Softmax, vec![u(&[3, 4], -2.0, 2.0)], Box::new(|_, v| v[0].softmax())),
        (OpKind::BatchOuter, vec![u(&[2, 3], -1.0, 1.0), u(&[2, 4], -1.0, 1.0)], Box::new(|_, v| v[0].batch_outer(v[1]))),
        (OpKind::BatchMatvec, vec![u(&[2, 3, 4], -1.0, 1.0), u(&[2, 4], -1.0, 1.0)], Box::new(|_, v| v[0].batch_matvec(v[1]))),
        (OpKind::Dft2, vec![u(&[2, 4, 4], -1.0, 1.0), u(&[2, 4, 4], -1.0, 1.0)], Box::new(|t, v| t.dft2(v[0], Some(v[1]), false))),
        (OpKind::Dft2, vec![u(&[1, 4, 8], -1.0, 1.0), u(&[1, 4, 8], -1.0, 1.0)], Box::new(|t, v| t.dft2(v[0], Some(v[1]), true))),
        (OpKind::Dft2, vec![u(&[2, 4, 4], -1.0, 1.0)], Box::new(|t, v| t.dft2(v[0], None, false))),
        (OpKind::Slice, vec![u(&[3, 2, 2], -1.0, 1.0)], Box::new(|_, v| v[0].index0(1))),
        (OpKind::Stack, vec![u(&[2, 3], -1.0, 1.0), u(&[2, 3], -1.0, 1.0)], Box::new(|t, v| t.stack(v))),
        (OpKind::Gather, vec![u(&[2, 3], -1.0, 1.0)], Box::new(move |_, v| v[0].gather(Rc::from(perm.as_slice()), &[2, 4]))),
        (OpKind::Reshape, vec![u(&[2, 3], -1.0, 1.0)], Box::new(|_, v| v[0].reshape(&[3, 2]))),
        (OpKind::MaxAxis0, vec![u(&[3, 4], -1.0, 1.0)], Box::new(|_, v| v[0].max_axis0())),
        (OpKind::MeanAxis0, vec![u(&[3, 4], -1.0, 1.0)], Box::new(|_, v| v[0].mean_axis0())),
        (OpKind::Sum, vec![u(&[2, 3], -1.0, 1.0)], Box::new(|_, v| Ok(v[0].sum()))),
        (
            OpKind::Conv3x3,
            vec![u(&[2, 5, 4], -1.0, 1.0), u(&[3, 2, 3, 3], -1.0, 1.0), u(&[3], -1.0, 1.0)],
            Box::new(|t, v| t.conv3x3(v[0], v[1], v[2])),
        ),
    ]
}

pub type PrimitiveFn = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Sync + Send>;

/// Checks every primitive case.
pub fn primitive_gradchecks(step: f64, tolerance: f64) -> Result<Vec<GradcheckReport>> {
    primitive_cases()
        .into_iter()
        .enumerate()
        .map(|(i, (kind, inputs, build))| {
            check_tape_fn(&format!("primitive {kind}"), &inputs, |t, v| build(t, v), i as u64, step, tolerance)
        })
        .collect()
}

/// Input size for one module check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeSize {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ProbeSize {
    pub const ACCEPTANCE: ProbeSize = ProbeSize {
        channels: 2,
        height: 8,
        width: 8,
    };
}

/// Full-module check over the input and every parameter. Parameters are
/// drawn away from their initial values so no gradient is structurally tiny.
pub fn module_gradcheck(config: &DenoConfig, size: ProbeSize, seed: u64, step: f64, tolerance: f64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut module = DenoModule::seeded(*config, &mut rng)?;
    for t in module.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let x = Tensor::uniform(&[size.channels, size.height, size.width], -1.0, 1.0, &mut rng);
    let mut inputs = vec![x];
    inputs.extend(module.params().tensors().into_iter().cloned());

    let label = format!(
        "module {} at {}x{}x{}",
        config.id(),
        size.channels,
        size.height,
        size.width
    );
    let template = module.clone();
    check_tape_fn(
        &label,
        &inputs,
        |_, vars| {
            let (x, params) = vars.split_first().expect("input leaf");
            let bound = rebind(&template, params)?;
            Ok(template.forward_var(*x, &bound)?.output)
        },
        seed ^ 0xfeed,
        step,
        tolerance,
    )
}

fn rebind<'t>(module: &DenoModule, vars: &[Var<'t>]) -> Result<BoundParams<'t>> {
    let take = |chunk: &[Var<'t>]| BoundModality {
        wq: chunk[0],
        wk: chunk[1],
        wv: chunk[2],
        e: chunk[3],
        w1: chunk[4],
        b1: chunk[5],
        w2: chunk[6],
        b2: chunk[7],
    };
    let p = module.params();
    let expected = 8 * (p.amplitude.is_some() as usize + p.phase.is_some() as usize);
    if vars.len() != expected {
        return Err(Error::shape(format!("expected {expected} parameter leaves, got {}", vars.len())));
    }
    let mut chunks = vars.chunks(8);
    let amplitude = p.amplitude.as_ref().map(|_| take(chunks.next().unwrap()));
    let phase = p.phase.as_ref().map(|_| take(chunks.next().unwrap()));
    Ok(BoundParams { amplitude, phase })
}

/// The acceptance matrix: every enumerated configuration at stride 4.
pub fn module_matrix(sizes: &[ProbeSize], step: f64, tolerance: f64) -> Result<Vec<GradcheckReport>> {
    let mut out = Vec::new();
    for (i, cfg) in crate::denodet::enumerate_configs(4, SqrtScaling::GroupCount).iter().enumerate() {
        for (j, &size) in sizes.iter().enumerate() {
            out.push(module_gradcheck(cfg, size, (i * 31 + j) as u64, step, tolerance)?);
        }
    }
    Ok(out)
}
