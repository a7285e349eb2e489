//! Fast invariant suite behind `freqdeno selftest`.

use std::path::Path;

use freqdeno::bands::{fold, unfold, PartitionSpec};
use freqdeno::conformance::check_golden_dir;
use freqdeno::spectral::{central_shift, dft2_forward, dft2_inverse, inverse_shift};
use freqdeno::{bpsa, pate, DenoConfig, DenoModule, Modality, ModalityParams, SqrtScaling, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<(), String>;
type CheckFn = fn(&mut ChaCha8Rng) -> Check;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn dft_round_trip(rng: &mut ChaCha8Rng) -> Check {
    for _ in 0..20 {
        let c = rng.random_range(1..=3);
        let h = [4, 8, 16][rng.random_range(0..3)];
        let w = [4, 8, 16][rng.random_range(0..3)];
        let x = Tensor::uniform(&[c, h, w], -1.0, 1.0, rng);
        let back = dft2_inverse(&dft2_forward(&x).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?
            .map;
        let err = back.max_abs_diff(&x);
        ensure(err < 1e-10, || format!("round trip error {err:e} at {c}x{h}x{w}"))?;
    }
    Ok(())
}

fn dft_oracle(rng: &mut ChaCha8Rng) -> Check {
    let n = 4;
    let x = Tensor::uniform(&[1, n, n], -1.0, 1.0, rng);
    let s = dft2_forward(&x).map_err(|e| e.to_string())?;
    let tau = std::f64::consts::TAU;
    for u in 0..n {
        for v in 0..n {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..n {
                for z in 0..n {
                    let a = -tau * ((u * y) as f64 / n as f64 + (v * z) as f64 / n as f64);
                    let val = x.data()[y * n + z];
                    re += val * a.cos();
                    im += val * a.sin();
                }
            }
            let k = u * n + v;
            let err = (s.real.data()[k] - re).abs().max((s.imag.data()[k] - im).abs());
            ensure(err < 1e-9, || format!("bin ({u},{v}) differs from direct sum by {err:e}"))?;
        }
    }
    Ok(())
}

fn shift_permutation(rng: &mut ChaCha8Rng) -> Check {
    for (h, w) in [(4, 4), (5, 7), (8, 6)] {
        let x = Tensor::uniform(&[2, h, w], -1.0, 1.0, rng);
        let s = central_shift(&x).map_err(|e| e.to_string())?;
        let back = inverse_shift(&s).map_err(|e| e.to_string())?;
        ensure(back.bit_eq(&x), || format!("shift is not inverted at {h}x{w}"))?;
        let mut a = x.data().to_vec();
        let mut b = s.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        ensure(a == b, || format!("shift is not a permutation at {h}x{w}"))?;
    }
    Ok(())
}

fn partition_lossless(rng: &mut ChaCha8Rng) -> Check {
    for height in [4, 8, 16] {
        for width in [4, 8, 16] {
            let x = Tensor::uniform(&[height, width], -1.0, 1.0, rng);
            for h in (1..=height).filter(|d| height % d == 0) {
                for w in (1..=width).filter(|d| width % d == 0) {
                    let spec = PartitionSpec::new(h, w, height, width).map_err(|e| e.to_string())?;
                    let back = fold(&unfold(&x, spec).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
                    ensure(back.bit_eq(&x), || format!("fold(unfold) differs for {h}x{w} tiles of {height}x{width}"))?;
                }
            }
        }
    }
    Ok(())
}

fn identity_configs(rng: &mut ChaCha8Rng) -> Check {
    let off = DenoConfig {
        stride: 4,
        refine_amplitude: false,
        refine_phase: false,
        token_exchange: false,
        ..DenoConfig::default()
    };
    let gated = DenoConfig {
        stride: 4,
        phase_align: false,
        ..DenoConfig::default()
    };
    for cfg in [off, gated] {
        let m = DenoModule::identity(cfg).map_err(|e| e.to_string())?;
        for _ in 0..5 {
            let x = Tensor::uniform(&[2, 8, 8], -1.0, 1.0, rng);
            let y = m.forward(&x).map_err(|e| e.to_string())?.output;
            let err = y.max_abs_diff(&x);
            ensure(err < 1e-9, || format!("identity config {} moved the input by {err:e}", cfg.id()))?;
        }
    }
    Ok(())
}

fn no_exchange_reduction(rng: &mut ChaCha8Rng) -> Check {
    let spec = PartitionSpec::square(4, 8, 8).map_err(|e| e.to_string())?;
    let a = ModalityParams::init(16, rng);
    let p = ModalityParams::init(16, rng);
    let am = Tensor::uniform(&[8, 8], 0.0, 2.0, rng);
    let pm = Tensor::uniform(&[8, 8], -3.0, 3.0, rng);
    let s = SqrtScaling::GroupCount;
    let (sa, sp) = pate(&am, &pm, spec, &a, &p, s, false).map_err(|e| e.to_string())?;
    let ba = bpsa(&am, spec, &a, s, Modality::Amplitude).map_err(|e| e.to_string())?;
    let bp = bpsa(&pm, spec, &p, s, Modality::Phase).map_err(|e| e.to_string())?;
    ensure(sa.values.bit_eq(&ba.values) && sp.values.bit_eq(&bp.values), || {
        "exchange-off PATE differs from two BPSA passes".into()
    })
}

/// Runs every check, printing one line each. Returns the first failure.
pub fn run(golden_dir: &Path) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
    let checks: [(&str, CheckFn); 6] = [
        ("dft round trip", dft_round_trip),
        ("dft direct-sum oracle", dft_oracle),
        ("central shift permutation", shift_permutation),
        ("partition fold/unfold", partition_lossless),
        ("identity configurations", identity_configs),
        ("exchange-off reduction", no_exchange_reduction),
    ];
    for (name, check) in checks {
        check(&mut rng).map_err(|e| format!("{name}: {e}"))?;
        println!("ok  {name}");
    }
    check_golden_dir(golden_dir).map_err(|e| e.to_string())?;
    println!("ok  golden-file conformance");
    Ok(())
}
