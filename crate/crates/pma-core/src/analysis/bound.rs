//! Executable check of the softmax key-perturbation bound: replacing one
//! key k with a key within L2 distance epsilon changes the attention
//! distribution of a query q by at most epsilon * ||q||_2; with 1/sqrt(d)
//! logit scaling the bound tightens by 1/sqrt(d).

use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, Tensor};
use crate::rng::Rng;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ViolatingTrial {
    pub trial: usize,
    pub d: usize,
    pub n_keys: usize,
    pub q: Vec<f64>,
    pub keys: Vec<Vec<f64>>,
    pub key_index: usize,
    pub epsilon: f64,
    pub ratio: f64,
    pub scaled: bool,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BoundTrialReport {
    pub trials: usize,
    /// Max over trials of ||softmax(qK^T) - softmax(qK~^T)||_2 / (eps ||q||_2)
    /// on unscaled logits; the bound is 1.
    pub max_ratio: f64,
    /// Max over trials of the same ratio multiplied by sqrt(d) when logits
    /// carry the 1/sqrt(d) scale; the bound is again 1.
    pub max_scaled_ratio: f64,
    /// Present exactly when a ratio exceeded its bound beyond 1e-9.
    pub violating_trial: Option<ViolatingTrial>,
}

impl BoundTrialReport {
    pub fn holds(&self) -> bool {
        self.violating_trial.is_none()
    }
}

fn row_softmax(logits: &[f64]) -> Vec<f64> {
    let t = Tensor::new(vec![1, logits.len()], logits.to_vec()).expect("row");
    softmax_rows(&t).data().to_vec()
}

struct TrialOutcome {
    ratio: f64,
    scaled_ratio: f64,
}

fn run_trial(
    rng: &mut Rng,
    d: usize,
    n_keys: usize,
    eps_max: f64,
) -> (TrialOutcome, Vec<f64>, Vec<Vec<f64>>, usize, f64) {
    let q: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let keys: Vec<Vec<f64>> = (0..n_keys)
        .map(|_| (0..d).map(|_| rng.normal()).collect())
        .collect();
    let key_index = rng.below(n_keys);
    // Perturbation of exact norm eps along a random direction.
    let mut dir: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    for v in dir.iter_mut() {
        *v /= norm;
    }
    let epsilon = rng.next_f64() * eps_max;
    let q_norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();

    let mut outcome = TrialOutcome {
        ratio: 0.0,
        scaled_ratio: 0.0,
    };
    let denom = epsilon * q_norm;
    if denom > 0.0 {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut logits: Vec<f64> = keys.iter().map(|k| dot(&q, k)).collect();
        let mut logits_pert = logits.clone();
        let perturbed: Vec<f64> = keys[key_index]
            .iter()
            .zip(&dir)
            .map(|(k, u)| k + epsilon * u)
            .collect();
        logits_pert[key_index] = dot(&q, &perturbed);

        let delta = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        let s1 = row_softmax(&logits);
        let s2 = row_softmax(&logits_pert);
        outcome.ratio = delta(&s1, &s2) / denom;

        let scale = 1.0 / (d as f64).sqrt();
        for v in logits.iter_mut() {
            *v *= scale;
        }
        for v in logits_pert.iter_mut() {
            *v *= scale;
        }
        let s1 = row_softmax(&logits);
        let s2 = row_softmax(&logits_pert);
        // Ratio relative to the tightened bound eps ||q|| / sqrt(d).
        outcome.scaled_ratio = delta(&s1, &s2) / denom * (d as f64).sqrt();
    }
    (outcome, q, keys, key_index, epsilon)
}

fn sweep(
    trials: usize,
    dims: impl Fn(&mut Rng) -> (usize, usize),
    eps_max: f64,
    seed: u64,
) -> Result<BoundTrialReport> {
    if trials == 0 || eps_max <= 0.0 {
        return Err(Error::config("bound verifier needs trials >= 1, eps_max > 0"));
    }
    let mut rng = Rng::derive(seed, &[0xb0cd]);
    let mut report = BoundTrialReport {
        trials,
        max_ratio: 0.0,
        max_scaled_ratio: 0.0,
        violating_trial: None,
    };
    const TOL: f64 = 1e-9;
    for trial in 0..trials {
        let (d, n_keys) = dims(&mut rng);
        let (outcome, q, keys, key_index, epsilon) = run_trial(&mut rng, d, n_keys, eps_max);
        report.max_ratio = report.max_ratio.max(outcome.ratio);
        report.max_scaled_ratio = report.max_scaled_ratio.max(outcome.scaled_ratio);
        if report.violating_trial.is_none() {
            let violation = if outcome.ratio > 1.0 + TOL {
                Some((outcome.ratio, false))
            } else if outcome.scaled_ratio > 1.0 + TOL {
                Some((outcome.scaled_ratio, true))
            } else {
                None
            };
            if let Some((ratio, scaled)) = violation {
                report.violating_trial = Some(ViolatingTrial {
                    trial,
                    d,
                    n_keys,
                    q,
                    keys,
                    key_index,
                    epsilon,
                    ratio,
                    scaled,
                });
            }
        }
    }
    Ok(report)
}

/// Randomized trials at fixed dimensions.
pub fn verify_lipschitz_bound(
    d: usize,
    n_keys: usize,
    trials: usize,
    eps_max: f64,
    seed: u64,
) -> Result<BoundTrialReport> {
    if d == 0 || n_keys == 0 {
        return Err(Error::config("bound verifier needs d, n_keys >= 1"));
    }
    sweep(trials, move |_| (d, n_keys), eps_max, seed)
}

/// Randomized trials with dimensions drawn per trial from inclusive ranges.
pub fn verify_lipschitz_sweep(
    trials: usize,
    d_range: (usize, usize),
    n_keys_range: (usize, usize),
    eps_max: f64,
    seed: u64,
) -> Result<BoundTrialReport> {
    if d_range.0 == 0 || n_keys_range.0 == 0 || d_range.0 > d_range.1 || n_keys_range.0 > n_keys_range.1
    {
        return Err(Error::config("bound verifier ranges must be non-empty"));
    }
    sweep(
        trials,
        move |rng| {
            let d = d_range.0 + rng.below(d_range.1 - d_range.0 + 1);
            let n = n_keys_range.0 + rng.below(n_keys_range.1 - n_keys_range.0 + 1);
            (d, n)
        },
        eps_max,
        seed,
    )
}
