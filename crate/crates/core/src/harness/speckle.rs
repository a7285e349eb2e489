//! Synthetic speckled scenes: bright rectangles on a dim background, corrupted
//! by unit-mean multiplicative gamma noise with `L` looks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BACKGROUND: f64 = 0.1;
pub const MIN_SIDE: usize = 16;
const PLACEMENT_RETRIES: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct SpeckleScene {
    /// `1×H×W`.
    pub clean: Tensor,
    /// `1×H×W`, `clean ⊙ n`.
    pub noisy: Tensor,
    /// `1×H×W`, 1 inside targets.
    pub mask: Tensor,
    pub seed: u64,
}

/// Unit-mean gamma sampler: shape `L`, scale `1/L`, variance `1/L`.
pub struct SpeckleNoise {
    dist: Gamma<f64>,
}

impl SpeckleNoise {
    pub fn new(looks: f64) -> Result<Self> {
        if looks.is_nan() || looks < 1.0 {
            return Err(Error::Config(format!("looks must be ≥ 1, got {looks}")));
        }
        let dist = Gamma::new(looks, 1.0 / looks)
            .map_err(|e| Error::Config(format!("gamma({looks}): {e}")))?;
        Ok(SpeckleNoise { dist })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.dist.sample(rng)
    }
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    y: usize,
    x: usize,
    h: usize,
    w: usize,
}

impl Rect {
    /// Overlap test with a one-pixel gap so targets never touch.
    fn collides(&self, o: &Rect) -> bool {
        self.y < o.y + o.h + 1 && o.y < self.y + self.h + 1 && self.x < o.x + o.w + 1 && o.x < self.x + self.w + 1
    }
}

/// `count` scenes of size `H×W`, each with 1–3 non-overlapping targets.
/// Deterministic in `seed`.
pub fn generate(seed: u64, count: usize, height: usize, width: usize, looks: f64) -> Result<Vec<SpeckleScene>> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(Error::Config(format!(
            "scenes must be at least {MIN_SIDE}×{MIN_SIDE}, got {height}×{width}"
        )));
    }
    let noise = SpeckleNoise::new(looks)?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let scene_seed: u64 = master.random();
            scene(scene_seed, height, width, &noise)
        })
        .collect()
}

fn scene(seed: u64, height: usize, width: usize, noise: &SpeckleNoise) -> Result<SpeckleScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets = rng.random_range(1..=3);
    let (max_h, max_w) = (height / 4, width / 4);
    let mut rects: Vec<Rect> = Vec::with_capacity(targets);
    for _ in 0..targets {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let h = rng.random_range(3..=max_h);
            let w = rng.random_range(3..=max_w);
            let r = Rect {
                y: rng.random_range(0..=height - h),
                x: rng.random_range(0..=width - w),
                h,
                w,
            };
            if rects.iter().all(|o| !r.collides(o)) {
                rects.push(r);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place target {} of {targets} in {height}×{width} after {PLACEMENT_RETRIES} tries",
                rects.len() + 1
            )));
        }
    }

    let mut clean = vec![BACKGROUND; height * width];
    let mut mask = vec![0.0; height * width];
    for r in &rects {
        let amp = rng.random_range(0.5..=1.0);
        for y in r.y..r.y + r.h {
            for x in r.x..r.x + r.w {
                clean[y * width + x] = amp;
                mask[y * width + x] = 1.0;
            }
        }
    }
    let noisy = clean.iter().map(|&c| c * noise.sample(&mut rng)).collect();
    let shape = vec![1, height, width];
    Ok(SpeckleScene {
        clean: Tensor::new(shape.clone(), clean)?,
        noisy: Tensor::new(shape.clone(), noisy)?,
        mask: Tensor::new(shape, mask)?,
        seed,
    })
}
