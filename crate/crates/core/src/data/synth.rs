use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adgrad::{cholesky_with_jitter, Mat};
use crate::error::{Error, Result};
use crate::kernel::KernelParams;

use super::Dataset;

/// Dense sampling of the latent function needs an `N x N` factorization.
pub const MAX_DENSE_SAMPLES: usize = 5000;

const DOMAIN: (f64, f64) = (0.0, 100.0);
const CLUSTER_MEANS: [f64; 5] = [10.0, 30.0, 50.0, 70.0, 90.0];

/// Data characteristic varied by a synthetic sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    /// Intensity is the observation noise SD.
    Noise,
    /// Intensity is the kernel lengthscale.
    Smoothness,
    /// Intensity is the shared precision of the input mixture.
    Clustering,
    /// Intensity is the corruption factor applied to real outputs.
    Corruption,
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Condition::Noise => "noise",
            Condition::Smoothness => "smoothness",
            Condition::Clustering => "clustering",
            Condition::Corruption => "corruption",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub condition: Condition,
    pub intensity: f64,
    pub n: usize,
    pub seed: u64,
    /// Noise SD when it is not the varied quantity.
    pub noise: f64,
    /// Lengthscale when it is not the varied quantity.
    pub lengthscale: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            condition: Condition::Noise,
            intensity: 0.1,
            n: 500,
            seed: 0,
            noise: 0.1,
            lengthscale: 1.0,
        }
    }
}

impl SynthSpec {
    pub fn new(condition: Condition, intensity: f64, n: usize, seed: u64) -> Self {
        Self {
            condition,
            intensity,
            n,
            seed,
            ..Self::default()
        }
    }

    pub fn noise_sd(&self) -> f64 {
        match self.condition {
            Condition::Noise => self.intensity,
            _ => self.noise,
        }
    }

    pub fn kernel_lengthscale(&self) -> f64 {
        match self.condition {
            Condition::Smoothness => self.intensity,
            _ => self.lengthscale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.condition {
            Condition::Noise => self.intensity >= 0.0,
            Condition::Smoothness | Condition::Clustering => self.intensity > 0.0,
            Condition::Corruption => {
                return Err(Error::Config("corruption applies to loaded data, not synthetic".into()))
            }
        };
        if !ok || self.noise < 0.0 || self.lengthscale <= 0.0 || !self.intensity.is_finite() {
            return Err(Error::Config(format!("invalid synthetic spec {self:?}")));
        }
        if self.n == 0 {
            return Err(Error::EmptyData);
        }
        if self.n > MAX_DENSE_SAMPLES {
            return Err(Error::TooLarge {
                n: self.n,
                limit: MAX_DENSE_SAMPLES,
            });
        }
        Ok(())
    }
}

pub(super) fn sample_inputs(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match spec.condition {
        Condition::Clustering => {
            let normal = Normal::new(0.0, spec.intensity.powf(-0.5)).expect("finite spread");
            (0..spec.n)
                .map(|_| loop {
                    let centre = CLUSTER_MEANS[rng.random_range(0..CLUSTER_MEANS.len())];
                    let x = centre + normal.sample(rng);
                    if (DOMAIN.0..=DOMAIN.1).contains(&x) {
                        break x;
                    }
                })
                .collect()
        }
        _ => (0..spec.n).map(|_| rng.random_range(DOMAIN.0..DOMAIN.1)).collect(),
    }
}

/// Draws `x ~ p(x)`, `f ~ GP(0, k)` with unit variance, `y ~ N(f, sigma^2)`.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let xs = sample_inputs(spec, &mut rng);
    let x = Mat::from_column_slice(spec.n, 1, &xs);
    let kernel = KernelParams::with_values(&[spec.kernel_lengthscale()], 1.0);
    let gram = kernel.gram(&x, &x)?;
    let (l, _) = cholesky_with_jitter(&gram)?;
    let eps = Mat::from_fn(spec.n, 1, |_, _| StandardNormal.sample(&mut rng));
    let f = l * eps;
    let sigma = spec.noise_sd();
    let y: Vec<f64> = f
        .iter()
        .map(|&fi| {
            let e: f64 = StandardNormal.sample(&mut rng);
            fi + sigma * e
        })
        .collect();
    Dataset::from_raw(
        x,
        y,
        format!("synthetic {} intensity={} seed={}", spec.condition, spec.intensity, spec.seed),
    )
}

/// Distance to the base of an 8-link planar arm's end effector, with noise.
///
/// Joint angles are uniform on `[-pi/4, pi/4]` and link lengths fall off
/// from 1.0 to 0.3, so the target is smooth but strongly non-linear.
pub fn kin8nm_like(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let links: Vec<f64> = (0..8).map(|i| 1.0 - 0.1 * i as f64).collect();
    let quarter = std::f64::consts::FRAC_PI_4;
    let x = Mat::from_fn(n, 8, |_, _| rng.random_range(-quarter..quarter));
    let y = (0..n)
        .map(|i| {
            let (mut px, mut py, mut angle) = (0.0, 0.0, 0.0);
            for (j, len) in links.iter().enumerate() {
                angle += x[(i, j)];
                px += len * angle.cos();
                py += len * angle.sin();
            }
            let e: f64 = StandardNormal.sample(&mut rng);
            (px * px + py * py).sqrt() + noise * e
        })
        .collect();
    Dataset::from_raw(x, y, format!("kin8nm-like n={n} seed={seed}"))
}

/// Square wave with `periods` cycles on `[0, 1]` plus Gaussian noise.
pub fn square_wave(n: usize, periods: f64, noise: f64, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let y = xs
        .iter()
        .map(|&x| {
            let e: f64 = StandardNormal.sample(&mut rng);
            let phase = (x * periods).fract();
            (if phase < 0.5 { 1.0 } else { -1.0 }) + noise * e
        })
        .collect();
    Dataset::from_raw(Mat::from_column_slice(n, 1, &xs), y, format!("square wave n={n} seed={seed}"))
}
