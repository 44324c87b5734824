//! Closed-form stand-in for fine-tuning.
//!
//! Each layer has a quantization sensitivity `a` and a compensability `b`.
//! Quantization error decays as `2^(-2(q - q_min))`, adapter capacity
//! saturates as `r / (r + r_half)`, and a layer's damage is
//! `a * err(q) * (1 - b * cap(r))`. The score follows a saturating learning
//! curve in the step count plus hash-seeded noise whose standard deviation
//! shrinks as `1/sqrt(T)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{Backend, BackendResponse, EvalRequest, Source};
use crate::importance::{normalize_importance, ImportanceProfile};
use crate::rng::StableHasher;
use crate::space::{Config, Ladders};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLatent {
    /// `a_l > 0`
    pub sensitivity: Vec<f64>,
    /// `b_l` in `[0, 1]`
    pub compensability: Vec<f64>,
    pub base_score: f64,
    pub tau_learn: f64,
    pub noise_scale: f64,
    pub rank_half: f64,
}

impl SyntheticLatent {
    pub const DEFAULT_BASE_SCORE: f64 = 0.9;
    pub const DEFAULT_NOISE: f64 = 0.02;
    pub const DEFAULT_RANK_HALF: f64 = 8.0;

    /// Default latent: `a` log-uniform on `[0.01, 0.2]`, `b` uniform on `[0, 1]`.
    pub fn sample(layers: usize, seed: u64, tau_learn: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = (0.01f64.ln(), 0.2f64.ln());
        let mut sensitivity = Vec::with_capacity(layers);
        let mut compensability = Vec::with_capacity(layers);
        for _ in 0..layers {
            sensitivity.push(rng.random_range(lo..hi).exp());
            compensability.push(rng.random_range(0.0..1.0));
        }
        SyntheticLatent {
            sensitivity,
            compensability,
            base_score: Self::DEFAULT_BASE_SCORE,
            tau_learn,
            noise_scale: Self::DEFAULT_NOISE,
            rank_half: Self::DEFAULT_RANK_HALF,
        }
    }

    pub fn with_noise(mut self, noise_scale: f64) -> Self {
        self.noise_scale = noise_scale;
        self
    }

    pub fn layers(&self) -> usize {
        self.sensitivity.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(format!("synthetic latent: {m}")));
        if self.sensitivity.len() != self.compensability.len() {
            return bad("sensitivity and compensability lengths differ");
        }
        if self.sensitivity.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return bad("sensitivities must be positive");
        }
        if self.compensability.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return bad("compensability must lie in [0, 1]");
        }
        if !(self.base_score > 0.0 && self.base_score <= 1.0) {
            return bad("base score must lie in (0, 1]");
        }
        if !(self.tau_learn > 0.0) || !(self.rank_half > 0.0) || !(self.noise_scale >= 0.0) {
            return bad("tau_learn and rank_half must be positive, noise non-negative");
        }
        Ok(())
    }

    /// Score after unlimited training, before noise.
    pub fn asymptote(&self, config: &Config, q_min: u32) -> f64 {
        let damage: f64 = config
            .q
            .iter()
            .zip(&config.r)
            .enumerate()
            .map(|(l, (&q, &r))| {
                let err = 2f64.powi(-2 * (q as i32 - q_min as i32));
                let cap = r as f64 / (r as f64 + self.rank_half);
                self.sensitivity[l] * err * (1.0 - self.compensability[l] * cap)
            })
            .sum();
        (self.base_score - damage).clamp(0.0, 1.0)
    }
}

fn noise_draw(config: &Config, steps: u64, seed: u64) -> f64 {
    let h = StableHasher::new()
        .write_str("synthetic-noise")
        .write_u32s(&config.q)
        .write_u32s(&config.r)
        .write_u64(steps)
        .write_u64(seed)
        .finish();
    ChaCha8Rng::seed_from_u64(h).sample(StandardNormal)
}

/// `P(C; T)` of the synthetic model. `reference_steps` is `T_1`, where the
/// noise standard deviation equals `noise_scale`.
pub fn synthetic_score(
    config: &Config,
    steps: u64,
    latent: &SyntheticLatent,
    seed: u64,
    q_min: u32,
    reference_steps: u64,
) -> f64 {
    let progress = 1.0 - (-(steps as f64) / latent.tau_learn).exp();
    let mut score = latent.asymptote(config, q_min) * progress;
    if latent.noise_scale > 0.0 {
        let sd = latent.noise_scale * (reference_steps as f64 / steps as f64).sqrt();
        score += sd * noise_draw(config, steps, seed);
    }
    score.clamp(0.0, 1.0)
}

/// Layer signals derived from the latent: `iq ~ a`, `ir ~ a * b`, each with
/// independent multiplicative log-normal noise of log-std `noise`.
pub fn synthetic_importance(latent: &SyntheticLatent, noise: f64, seed: u64) -> ImportanceProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = || -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        (noise * z).exp()
    };
    let mut iq = Vec::with_capacity(latent.layers());
    let mut ir = Vec::with_capacity(latent.layers());
    for (a, b) in latent.sensitivity.iter().zip(&latent.compensability) {
        iq.push(a * jitter());
        ir.push(a * b * jitter());
    }
    normalize_importance(&ImportanceProfile {
        iq,
        ir,
        normalized: false,
    })
}

#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    latent: SyntheticLatent,
    q_min: u32,
    reference_steps: u64,
}

impl SyntheticBackend {
    pub fn new(latent: SyntheticLatent, ladders: &Ladders, reference_steps: u64) -> Result<Self> {
        latent.validate()?;
        Ok(SyntheticBackend {
            latent,
            q_min: ladders.q.min(),
            reference_steps,
        })
    }

    pub fn latent(&self) -> &SyntheticLatent {
        &self.latent
    }

    pub fn q_min(&self) -> u32 {
        self.q_min
    }

    pub fn score(&self, config: &Config, steps: u64, seed: u64) -> f64 {
        synthetic_score(config, steps, &self.latent, seed, self.q_min, self.reference_steps)
    }

    /// Noise-free score at `steps`.
    pub fn expected_score(&self, config: &Config, steps: u64) -> f64 {
        let progress = 1.0 - (-(steps as f64) / self.latent.tau_learn).exp();
        (self.latent.asymptote(config, self.q_min) * progress).clamp(0.0, 1.0)
    }

    fn config_tag(config: &Config) -> u64 {
        StableHasher::new().write_u32s(&config.q).write_u32s(&config.r).finish()
    }

    fn token(config: &Config, steps: u64) -> String {
        format!("syn:{:016x}:{steps}", Self::config_tag(config))
    }

    fn check_token(config: &Config, steps: u64, token: &str) -> Result<()> {
        let bad = || Error::Evaluation(format!("invalid resume token `{token}`"));
        let mut parts = token.split(':');
        let (Some("syn"), Some(tag), Some(prev), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad());
        };
        let tag = u64::from_str_radix(tag, 16).map_err(|_| bad())?;
        let prev: u64 = prev.parse().map_err(|_| bad())?;
        if tag != Self::config_tag(config) || prev >= steps {
            return Err(bad());
        }
        Ok(())
    }
}

impl Backend for SyntheticBackend {
    fn source(&self) -> Source {
        Source::Synthetic
    }

    fn evaluate(&self, request: &EvalRequest) -> Result<BackendResponse> {
        if request.config.len() != self.latent.layers() {
            return Err(Error::DimensionMismatch {
                expected: self.latent.layers(),
                actual: request.config.len(),
            });
        }
        if let Some(token) = &request.resume_token {
            Self::check_token(&request.config, request.steps, token)?;
        }
        // The curve is closed-form, so continuing from a checkpoint and
        // training from scratch to the same T coincide.
        Ok(BackendResponse {
            score: self.score(&request.config, request.steps, request.seed),
            token: Some(Self::token(&request.config, request.steps)),
            wall_time_s: Some(0.0),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::spearman;

    fn one_layer(a: f64, b: f64, noise: f64, tau: f64) -> SyntheticLatent {
        SyntheticLatent {
            sensitivity: vec![a],
            compensability: vec![b],
            base_score: 0.9,
            tau_learn: tau,
            noise_scale: noise,
            rank_half: 8.0,
        }
    }

    #[test]
    fn closed_form_values() {
        let lat = one_layer(0.5, 0.0, 0.0, 400.0);
        let c = Config::uniform(1, 2, 4);
        assert!((lat.asymptote(&c, 2) - 0.4).abs() < 1e-15);
        let s = synthetic_score(&c, 400, &lat, 0, 2, 100);
        assert!((s - 0.4 * (1.0 - (-1.0f64).exp())).abs() < 1e-12);
        assert!((s - 0.25285).abs() < 1e-5);
    }

    #[test]
    fn full_compensation_limit() {
        let lat = one_layer(0.5, 1.0, 0.0, 400.0);
        let p = lat.asymptote(&Config::uniform(1, 2, 1_000_000), 2);
        assert!((p - 0.9).abs() < 1e-5);
    }

    #[test]
    fn seeds_change_noise() {
        let lat = one_layer(0.1, 0.5, 0.02, 400.0);
        let c = Config::uniform(1, 4, 8);
        assert_ne!(synthetic_score(&c, 100, &lat, 1, 2, 100), synthetic_score(&c, 100, &lat, 2, 2, 100));
        assert_eq!(synthetic_score(&c, 100, &lat, 1, 2, 100), synthetic_score(&c, 100, &lat, 1, 2, 100));
    }

    #[test]
    fn resumed_equals_fresh() {
        let ladders = Ladders::default();
        let b = SyntheticBackend::new(SyntheticLatent::sample(4, 3, 400.0), &ladders, 100).unwrap();
        let c = Config::uniform(4, 4, 8);
        let lf = b
            .evaluate(&EvalRequest { config: c.clone(), steps: 100, seed: 5, resume_token: None })
            .unwrap();
        let resumed = b
            .evaluate(&EvalRequest { config: c.clone(), steps: 400, seed: 5, resume_token: lf.token.clone() })
            .unwrap();
        let fresh = b
            .evaluate(&EvalRequest { config: c.clone(), steps: 400, seed: 5, resume_token: None })
            .unwrap();
        assert_eq!(resumed.score, fresh.score);

        let other = Config::uniform(4, 2, 8);
        assert!(b
            .evaluate(&EvalRequest { config: other, steps: 400, seed: 5, resume_token: lf.token.clone() })
            .is_err());
        assert!(b
            .evaluate(&EvalRequest { config: c, steps: 100, seed: 5, resume_token: lf.token })
            .is_err());
    }

    #[test]
    fn noiseless_monotonicity() {
        let ladders = Ladders::default();
        let lat = SyntheticLatent::sample(3, 9, 400.0).with_noise(0.0);
        let b = SyntheticBackend::new(lat.clone(), &ladders, 100).unwrap();
        let c = Config { q: vec![2, 4, 8], r: vec![4, 16, 8] };
        let mut prev = 0.0;
        for t in [10, 100, 400, 1600, 6400] {
            let s = b.score(&c, t, 0);
            assert!(s > prev);
            prev = s;
        }
        for l in 0..3 {
            for (ladder, is_q) in [(&ladders.q, true), (&ladders.r, false)] {
                for w in ladder.values().windows(2) {
                    let mut lo = c.clone();
                    let mut hi = c.clone();
                    if is_q {
                        lo.q[l] = w[0];
                        hi.q[l] = w[1];
                    } else {
                        lo.r[l] = w[0];
                        hi.r[l] = w[1];
                    }
                    assert!(lat.asymptote(&hi, 2) >= lat.asymptote(&lo, 2));
                }
            }
        }
    }

    #[test]
    fn fidelity_correlation_positive_but_imperfect() {
        let ladders = Ladders::default();
        let lat = SyntheticLatent::sample(8, 1, 400.0);
        let b = SyntheticBackend::new(lat, &ladders, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut lf, mut hf) = (vec![], vec![]);
        for _ in 0..200 {
            let c = Config {
                q: (0..8).map(|_| ladders.q.value(rng.random_range(0..3))).collect(),
                r: (0..8).map(|_| ladders.r.value(rng.random_range(0..3))).collect(),
            };
            lf.push(b.score(&c, 100, 0));
            hf.push(b.score(&c, 1600, 0));
        }
        let rho = spearman(&lf, &hf).unwrap();
        assert!(rho > 0.0 && rho < 1.0, "rho = {rho}");
    }

    #[test]
    fn importance_from_latent() {
        let lat = SyntheticLatent::sample(6, 4, 400.0);
        let p = synthetic_importance(&lat, 0.0, 1);
        let argmax = |v: &[f64]| (0..v.len()).max_by(|&i, &j| v[i].total_cmp(&v[j])).unwrap();
        assert_eq!(argmax(&p.iq), argmax(&lat.sensitivity));

        let mut flat = lat.clone();
        flat.compensability = vec![0.0; 6];
        assert_eq!(synthetic_importance(&flat, 0.0, 1).ir, vec![0.5; 6]);

        let (p1, p2) = (synthetic_importance(&lat, 0.5, 1), synthetic_importance(&lat, 0.5, 2));
        assert_ne!(p1, p2);
        assert!(p1.iq.iter().chain(&p2.ir).all(|v| (0.0..=1.0).contains(v)));
    }
}
