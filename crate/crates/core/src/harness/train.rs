use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::report::TrialReport;
use super::speckle::SpeckleScene;
use super::toynet::{Task, ToyNet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 0.05;
pub const DEFAULT_BATCH: usize = 8;
/// Fraction of scenes used for training; the rest are held out.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Record wall-clock runtime in the report. Off keeps reports reproducible.
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: DEFAULT_LR,
            batch_size: DEFAULT_BATCH,
            seed: 0,
            timing: false,
        }
    }
}

/// Report plus the extra state callers usually want alongside it.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrialReport,
    /// Held-out metric before the first update.
    pub initial_metric: f64,
    pub net: ToyNet,
}

/// Deterministic 80/20 split: (train, held-out) scene indices.
pub fn split(count: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // keep at least one scene on each side whenever there are two
    let n_train = ((count as f64 * TRAIN_FRACTION).round() as usize).clamp(count.min(1), count.saturating_sub(1).max(count.min(1)));
    let held = idx.split_off(n_train);
    (idx, held)
}

fn target(scene: &SpeckleScene, task: Task) -> &Tensor {
    match task {
        Task::Denoise => &scene.clean,
        Task::Detect => &scene.mask,
    }
}

/// Held-out metric: MSE for denoising, pixel F1 (logit > 0, i.e. p > 0.5) for detection.
pub fn evaluate(net: &ToyNet, scenes: &[SpeckleScene], idx: &[usize]) -> Result<(f64, f64)> {
    let per: Vec<(f64, [usize; 3], f64)> = idx
        .par_iter()
        .map(|&i| {
            let s = &scenes[i];
            let tape = crate::tape::Tape::new();
            let rec = net.record(&tape, &s.noisy, target(s, net.task))?;
            let loss = rec.loss.value().data()[0];
            let out = rec.output.value();
            let mut counts = [0usize; 3];
            if net.task == Task::Detect {
                for (&z, &m) in out.data().iter().zip(s.mask.data()) {
                    match (z > 0.0, m == 1.0) {
                        (true, true) => counts[0] += 1,
                        (true, false) => counts[1] += 1,
                        (false, true) => counts[2] += 1,
                        _ => {}
                    }
                }
            }
            Ok((loss, counts, rec.imag_residue))
        })
        .collect::<Result<_>>()?;
    let residue = per.iter().map(|p| p.2).fold(0.0, f64::max);
    let metric = match net.task {
        Task::Denoise => per.iter().map(|p| p.0).sum::<f64>() / per.len().max(1) as f64,
        Task::Detect => {
            let [tp, fp, fn_] = per.iter().fold([0; 3], |a, p| [a[0] + p.1[0], a[1] + p.1[1], a[2] + p.1[2]]);
            if tp == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
            }
        }
    };
    Ok((metric, residue))
}

/// Minibatch SGD with a fixed learning rate.
///
/// Per-sample gradients are computed in parallel, each on its own tape, and
/// summed in sample order so results do not depend on the thread count.
pub fn train(mut net: ToyNet, scenes: &[SpeckleScene], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if !cfg.lr.is_finite() || cfg.lr < 0.0 {
        return Err(Error::Config(format!("learning rate must be finite and ≥ 0, got {}", cfg.lr)));
    }
    let start = Instant::now();
    let (train_idx, held_idx) = split(scenes.len(), cfg.seed);
    if train_idx.is_empty() || held_idx.is_empty() {
        return Err(Error::Config(format!("need at least 2 scenes, got {}", scenes.len())));
    }
    let (initial_metric, mut max_residue) = evaluate(&net, scenes, &held_idx)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e_ed0f_7a1e);
    let mut order = train_idx.clone();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, Vec<Tensor>, f64)> = batch
                .par_iter()
                .map(|&i| net.loss_and_grads(&scenes[i].noisy, target(&scenes[i], net.task)))
                .collect::<Result<_>>()?;
            let k = 1.0 / batch.len() as f64;
            let mut params = net.tensors_mut();
            for (loss, grads, residue) in &results {
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch, loss: *loss });
                }
                total += loss;
                max_residue = max_residue.max(*residue);
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= cfg.lr * k * gv;
                    }
                }
            }
        }
        let mean = total / train_idx.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.6e}");
        epoch_losses.push(mean);
    }

    let (final_metric, residue) = evaluate(&net, scenes, &held_idx)?;
    if !final_metric.is_finite() {
        return Err(Error::Divergence {
            epoch: cfg.epochs,
            loss: final_metric,
        });
    }
    let runtime_ms = if cfg.timing { start.elapsed().as_millis() as u64 } else { 0 };
    let report = TrialReport {
        config_id: net.deno.config().id(),
        seed: cfg.seed,
        epoch_losses,
        final_metric,
        runtime_ms,
        max_imag_residue: max_residue.max(residue),
    };
    Ok(TrainOutcome {
        report,
        initial_metric,
        net,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denodet::DenoConfig;
    use crate::harness::speckle::generate;

    fn small_net(seed: u64) -> ToyNet {
        let cfg = DenoConfig {
            stride: 4,
            ..DenoConfig::default()
        };
        ToyNet::new(2, cfg, Task::Denoise, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn split_is_80_20_and_disjoint() {
        let (a, b) = split(64, 3);
        assert_eq!((a.len(), b.len()), (51, 13));
        let mut all: Vec<_> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, (0..64).collect::<Vec<_>>());
        assert_eq!(split(64, 3), (a, b));
    }

    #[test]
    fn zero_epochs_echo_initial_metric() {
        let scenes = generate(0, 6, 16, 16, 4.0).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(small_net(0), &scenes, &cfg).unwrap();
        assert!(out.report.epoch_losses.is_empty());
        assert_eq!(out.report.final_metric.to_bits(), out.initial_metric.to_bits());
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise() {
        let scenes = generate(1, 6, 16, 16, 4.0).unwrap();
        let net = small_net(1);
        let cfg = TrainConfig {
            epochs: 2,
            lr: 0.0,
            ..TrainConfig::default()
        };
        let out = train(net.clone(), &scenes, &cfg).unwrap();
        for (a, b) in out.net.tensors().iter().zip(net.tensors()) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn reproducible() {
        let scenes = generate(2, 6, 16, 16, 4.0).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let a = train(small_net(2), &scenes, &cfg).unwrap().report;
        let b = train(small_net(2), &scenes, &cfg).unwrap().report;
        assert_eq!(a.to_line(), b.to_line());
    }

    #[test]
    fn divergence_is_reported() {
        let scenes = generate(3, 6, 16, 16, 4.0).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            lr: 1e300,
            ..TrainConfig::default()
        };
        assert!(matches!(train(small_net(3), &scenes, &cfg), Err(Error::Divergence { .. })));
    }
}
