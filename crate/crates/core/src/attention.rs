//! Band-wise partition self-attention and the phase/amplitude token exchange.
//!
//! Each band group is a set of `n = h·w` scalar tokens. Queries, keys, and
//! values mix those tokens through `n×n` matrices shared by all groups, so the
//! per-group logits form the `n×n` outer product `Q Kᵀ`. Attention never
//! crosses a group boundary. The folded `H×W` result passes through a
//! pointwise gate MLP that squashes it into `(0, 1)`.

use std::fmt;

use rand::Rng;

use crate::bands::{fold_var, unfold_var, PartitionSpec};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Hidden width of the pointwise gate MLP.
pub const MLP_HIDDEN: usize = 4;

/// Final-layer bias that saturates the gate sigmoid to exactly 1.0 in `f64`.
const SATURATED_LOGIT: f64 = 64.0;

/// Initial gate value the default initialization aims for.
const INITIAL_GATE: f64 = 0.95;

/// Which count the attention logits are divided by the square root of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum SqrtScaling {
    /// The number of band groups `d`.
    #[default]
    GroupCount,
    /// The number of tokens per group `h·w`.
    TokenCount,
}

impl SqrtScaling {
    pub fn factor(self, spec: &PartitionSpec) -> f64 {
        let n = match self {
            SqrtScaling::GroupCount => spec.band_count(),
            SqrtScaling::TokenCount => spec.tokens_per_band(),
        };
        1.0 / (n as f64).sqrt()
    }

    pub fn name(self) -> &'static str {
        match self {
            SqrtScaling::GroupCount => "group",
            SqrtScaling::TokenCount => "token",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "group" => Some(SqrtScaling::GroupCount),
            "token" => Some(SqrtScaling::TokenCount),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Amplitude,
    Phase,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Amplitude => "amplitude",
            Modality::Phase => "phase",
        })
    }
}

/// Pointwise `1 → 4 → 1` MLP: `sigmoid(w2ᵀ tanh(w1 x + b1) + b2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl GateMlp {
    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Self {
        GateMlp {
            w1: Tensor::uniform(&[1, MLP_HIDDEN], -0.1, 0.1, rng),
            b1: Tensor::zeros(&[MLP_HIDDEN]),
            w2: Tensor::uniform(&[MLP_HIDDEN, 1], -0.1, 0.1, rng),
            b2: Tensor::full(&[1], (INITIAL_GATE / (1.0 - INITIAL_GATE)).ln()),
        }
    }

    /// Gate fixed at 1 for every input.
    pub fn saturated() -> Self {
        GateMlp {
            w1: Tensor::zeros(&[1, MLP_HIDDEN]),
            b1: Tensor::zeros(&[MLP_HIDDEN]),
            w2: Tensor::zeros(&[MLP_HIDDEN, 1]),
            b2: Tensor::full(&[1], SATURATED_LOGIT),
        }
    }
}

/// Learnable weights for one modality: token-mixing `Wq`, `Wk`, `Wv`, the
/// positional bias `E` (all `n×n`), and the gate MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub e: Tensor,
    pub mlp: GateMlp,
}

impl ModalityParams {
    /// Near pass-through start: small `Wq`/`Wk`, `Wv ≈ I`, `E = 0`, gate ≈ 0.95.
    pub fn init<R: Rng + ?Sized>(tokens: usize, rng: &mut R) -> Self {
        let n = tokens;
        let mut wv = Tensor::eye(n);
        for v in wv.data_mut() {
            *v += rng.random_range(-0.02..0.02);
        }
        ModalityParams {
            wq: Tensor::uniform(&[n, n], -0.02, 0.02, rng),
            wk: Tensor::uniform(&[n, n], -0.02, 0.02, rng),
            wv,
            e: Tensor::zeros(&[n, n]),
            mlp: GateMlp::init(rng),
        }
    }

    /// Identity-test mode: the gate is exactly 1 regardless of input.
    pub fn identity(tokens: usize) -> Self {
        let n = tokens;
        ModalityParams {
            wq: Tensor::zeros(&[n, n]),
            wk: Tensor::zeros(&[n, n]),
            wv: Tensor::eye(n),
            e: Tensor::zeros(&[n, n]),
            mlp: GateMlp::saturated(),
        }
    }

    pub fn tokens(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.e,
            &self.mlp.w1,
            &self.mlp.b1,
            &self.mlp.w2,
            &self.mlp.b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.e,
            &mut self.mlp.w1,
            &mut self.mlp.b1,
            &mut self.mlp.w2,
            &mut self.mlp.b2,
        ]
    }

    pub const NAMES: [&'static str; 8] = ["wq", "wk", "wv", "e", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"];

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModality<'t> {
        BoundModality {
            wq: tape.leaf(self.wq.clone()),
            wk: tape.leaf(self.wk.clone()),
            wv: tape.leaf(self.wv.clone()),
            e: tape.leaf(self.e.clone()),
            w1: tape.leaf(self.mlp.w1.clone()),
            b1: tape.leaf(self.mlp.b1.clone()),
            w2: tape.leaf(self.mlp.w2.clone()),
            b2: tape.leaf(self.mlp.b2.clone()),
        }
    }

    fn check_tokens(&self, spec: &PartitionSpec) -> Result<()> {
        if self.tokens() != spec.tokens_per_band() {
            return Err(Error::Config(format!(
                "parameters expect {} tokens per band, partition gives {}",
                self.tokens(),
                spec.tokens_per_band()
            )));
        }
        Ok(())
    }
}

/// [`ModalityParams`] recorded as leaves on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundModality<'t> {
    pub wq: Var<'t>,
    pub wk: Var<'t>,
    pub wv: Var<'t>,
    pub e: Var<'t>,
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

impl<'t> BoundModality<'t> {
    pub fn vars(&self) -> [Var<'t>; 8] {
        [
            self.wq, self.wk, self.wv, self.e, self.w1, self.b1, self.w2, self.b2,
        ]
    }

    fn tokens(&self) -> usize {
        self.wq.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModulationMap {
    pub values: Tensor,
    pub modality: Modality,
}

/// `max over channels + mean over channels` of a `C×H×W` stack.
pub fn channel_pool(x: Var<'_>) -> Result<Var<'_>> {
    x.max_axis0()?.add(x.mean_axis0()?)
}

/// Attention over a batch of groups.
///
/// `query_tokens` and `kv_tokens` are `d×n`; queries come from the first,
/// keys and values from the second. Per group `i`:
/// `softmax(Qᵢ Kᵢᵀ · scale + E) Vᵢ`.
#[allow(clippy::too_many_arguments)]
pub fn attend_groups<'t>(
    query_tokens: Var<'t>,
    kv_tokens: Var<'t>,
    wq: Var<'t>,
    wk: Var<'t>,
    wv: Var<'t>,
    e: Var<'t>,
    scale: f64,
) -> Result<Var<'t>> {
    let q = query_tokens.matmul(wq)?;
    let k = kv_tokens.matmul(wk)?;
    let v = kv_tokens.matmul(wv)?;
    let logits = q.batch_outer(k)?.scale(scale).add(e)?;
    logits.softmax()?.batch_matvec(v)
}

/// Attention for a single group of `n` tokens (a `1×n` row).
pub fn bpsa_group<'t>(tokens: Var<'t>, params: &BoundModality<'t>, scale: f64) -> Result<Var<'t>> {
    let n = params.tokens();
    let row = tokens.reshape(&[1, n])?;
    let out = attend_groups(row, row, params.wq, params.wk, params.wv, params.e, scale)?;
    out.reshape(&[n])
}

/// Gate MLP applied at every location of an `H×W` map.
pub fn gate_mlp<'t>(map: Var<'t>, params: &BoundModality<'t>) -> Result<Var<'t>> {
    let shape = map.shape();
    let numel = shape.iter().product();
    let hidden = map
        .reshape(&[numel, 1])?
        .matmul(params.w1)?
        .add(params.b1)?
        .tanh();
    hidden
        .matmul(params.w2)?
        .add(params.b2)?
        .sigmoid()
        .reshape(&shape)
}

/// Folded attention output before the gate MLP.
pub fn attend_map<'t>(
    query_map: Var<'t>,
    kv_map: Var<'t>,
    spec: PartitionSpec,
    query_params: &BoundModality<'t>,
    kv_params: &BoundModality<'t>,
    scaling: SqrtScaling,
) -> Result<Var<'t>> {
    if query_params.tokens() != spec.tokens_per_band() {
        return Err(Error::Config(format!(
            "parameters expect {} tokens per band, partition gives {}",
            query_params.tokens(),
            spec.tokens_per_band()
        )));
    }
    let qt = unfold_var(query_map, spec)?;
    let kvt = if query_map.id() == kv_map.id() {
        qt
    } else {
        unfold_var(kv_map, spec)?
    };
    let out = attend_groups(
        qt,
        kvt,
        query_params.wq,
        kv_params.wk,
        kv_params.wv,
        query_params.e,
        scaling.factor(&spec),
    )?;
    fold_var(out, spec)
}

/// Self-attention modulation of one pooled map.
pub fn bpsa_var<'t>(
    map: Var<'t>,
    spec: PartitionSpec,
    params: &BoundModality<'t>,
    scaling: SqrtScaling,
) -> Result<Var<'t>> {
    let pre = attend_map(map, map, spec, params, params, scaling)?;
    gate_mlp(pre, params)
}

/// Token-exchange modulation: the amplitude branch queries phase keys and
/// values, the phase branch queries amplitude keys and values. Returns
/// `(amplitude gate, phase gate)`.
pub fn pate_var<'t>(
    amp_map: Var<'t>,
    phase_map: Var<'t>,
    spec: PartitionSpec,
    amp: &BoundModality<'t>,
    phase: &BoundModality<'t>,
    scaling: SqrtScaling,
    exchange: bool,
) -> Result<(Var<'t>, Var<'t>)> {
    if amp_map.shape() != phase_map.shape() {
        return Err(Error::shape(format!(
            "amplitude map {:?} and phase map {:?} differ",
            amp_map.shape(),
            phase_map.shape()
        )));
    }
    if !exchange {
        return Ok((
            bpsa_var(amp_map, spec, amp, scaling)?,
            bpsa_var(phase_map, spec, phase, scaling)?,
        ));
    }
    let amp_pre = attend_map(amp_map, phase_map, spec, amp, phase, scaling)?;
    let phase_pre = attend_map(phase_map, amp_map, spec, phase, amp, scaling)?;
    Ok((gate_mlp(amp_pre, amp)?, gate_mlp(phase_pre, phase)?))
}

pub fn bpsa(
    map: &Tensor,
    spec: PartitionSpec,
    params: &ModalityParams,
    scaling: SqrtScaling,
    modality: Modality,
) -> Result<ModulationMap> {
    params.check_tokens(&spec)?;
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let out = bpsa_var(tape.leaf(map.clone()), spec, &bound, scaling)?;
    Ok(ModulationMap {
        values: (*out.value()).clone(),
        modality,
    })
}

pub fn pate(
    amp_map: &Tensor,
    phase_map: &Tensor,
    spec: PartitionSpec,
    amp: &ModalityParams,
    phase: &ModalityParams,
    scaling: SqrtScaling,
    exchange: bool,
) -> Result<(ModulationMap, ModulationMap)> {
    amp.check_tokens(&spec)?;
    phase.check_tokens(&spec)?;
    let tape = Tape::new();
    let (ba, bp) = (amp.bind(&tape), phase.bind(&tape));
    let (sa, sp) = pate_var(
        tape.leaf(amp_map.clone()),
        tape.leaf(phase_map.clone()),
        spec,
        &ba,
        &bp,
        scaling,
        exchange,
    )?;
    Ok((
        ModulationMap {
            values: (*sa.value()).clone(),
            modality: Modality::Amplitude,
        },
        ModulationMap {
            values: (*sp.value()).clone(),
            modality: Modality::Phase,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn channel_pool_cases() {
        let tape = Tape::new();
        let one = tape.leaf(Tensor::new(vec![1, 1, 2], vec![1.5, -2.0]).unwrap());
        assert_eq!(channel_pool(one).unwrap().value().data(), &[3.0, -4.0]);
        let two = tape.leaf(Tensor::new(vec![2, 1, 1], vec![1.0, 3.0]).unwrap());
        assert_eq!(channel_pool(two).unwrap().value().data(), &[5.0]);
        let flat = tape.leaf(Tensor::full(&[3, 2, 2], 0.7));
        for v in channel_pool(flat).unwrap().value().data() {
            assert!((v - 1.4).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_weights_average_tokens() {
        let tape = Tape::new();
        let p = ModalityParams {
            wq: Tensor::zeros(&[4, 4]),
            wk: Tensor::zeros(&[4, 4]),
            wv: Tensor::eye(4),
            e: Tensor::zeros(&[4, 4]),
            mlp: GateMlp::saturated(),
        };
        let b = p.bind(&tape);
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0, 6.0]));
        let out = bpsa_group(x, &b, 0.5).unwrap();
        for v in out.value().data() {
            assert!((v - 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_token_group() {
        let tape = Tape::new();
        let mut p = ModalityParams::init(1, &mut rng());
        p.wv = Tensor::full(&[1, 1], 0.75);
        let b = p.bind(&tape);
        let x = tape.leaf(Tensor::from_vec(vec![2.0]));
        assert_eq!(bpsa_group(x, &b, 1.0).unwrap().value().data(), &[1.5]);
    }

    #[test]
    fn identity_mode_gate_is_one() {
        let spec = PartitionSpec::square(4, 8, 8).unwrap();
        let map = Tensor::uniform(&[8, 8], -50.0, 50.0, &mut rng());
        let m = bpsa(&map, spec, &ModalityParams::identity(16), SqrtScaling::GroupCount, Modality::Amplitude)
            .unwrap();
        assert!(m.values.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn initial_gate_near_pass_through() {
        let spec = PartitionSpec::square(2, 4, 4).unwrap();
        let map = Tensor::uniform(&[4, 4], -1.0, 1.0, &mut rng());
        let p = ModalityParams::init(4, &mut rng());
        let m = bpsa(&map, spec, &p, SqrtScaling::GroupCount, Modality::Phase).unwrap();
        for v in m.values.data() {
            assert!((v - INITIAL_GATE).abs() < 0.02, "{v}");
        }
    }

    #[test]
    fn token_mismatch_is_config_error() {
        let spec = PartitionSpec::square(2, 4, 4).unwrap();
        let p = ModalityParams::init(9, &mut rng());
        let err = bpsa(&Tensor::zeros(&[4, 4]), spec, &p, SqrtScaling::GroupCount, Modality::Amplitude);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn param_count_depends_only_on_tile_area() {
        let a = ModalityParams::init(8, &mut rng());
        let b = ModalityParams::init(8, &mut rng());
        assert_eq!(a.param_count(), b.param_count());
        assert_eq!(a.param_count(), 4 * 64 + 3 * MLP_HIDDEN + 1);
    }

    #[test]
    fn zero_amplitude_silences_phase_branch_values() {
        let spec = PartitionSpec::square(2, 4, 4).unwrap();
        let mut r = rng();
        let amp = ModalityParams::init(4, &mut r);
        let phase = ModalityParams::init(4, &mut r);
        let tape = Tape::new();
        let (ba, bp) = (amp.bind(&tape), phase.bind(&tape));
        let a = tape.leaf(Tensor::zeros(&[4, 4]));
        let p = tape.leaf(Tensor::uniform(&[4, 4], -3.0, 3.0, &mut r));
        let pre = attend_map(p, a, spec, &bp, &ba, SqrtScaling::GroupCount).unwrap();
        assert!(pre.value().data().iter().all(|&v| v == 0.0));
        let (_, sp) = pate(
            &Tensor::zeros(&[4, 4]),
            &p.value(),
            spec,
            &amp,
            &phase,
            SqrtScaling::GroupCount,
            true,
        )
        .unwrap();
        let first = sp.values.data()[0];
        assert!(sp.values.data().iter().all(|&v| v == first));
    }

    #[test]
    fn scaling_names() {
        for s in [SqrtScaling::GroupCount, SqrtScaling::TokenCount] {
            assert_eq!(SqrtScaling::from_name(s.name()), Some(s));
        }
        let spec = PartitionSpec::square(2, 8, 8).unwrap();
        assert_eq!(SqrtScaling::GroupCount.factor(&spec), 0.25);
        assert_eq!(SqrtScaling::TokenCount.factor(&spec), 0.5);
    }
}
