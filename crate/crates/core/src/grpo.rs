//! Reward shaping and the group-relative policy-gradient loss.
//!
//! Nothing here touches a model: rewards, advantages, and the clipped
//! surrogate with KL penalty are pure functions, so the training math can
//! be validated numerically (including a finite-difference gradient check)
//! without any rollout machinery.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textmetrics::{normalize, wer, TokenSeq};

/// Weights combining the match reward and the WER reward into the total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub match_weight: f64,
    pub wer_weight: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            match_weight: 1.0,
            wer_weight: 1.0,
        }
    }
}

/// Per-response reward breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub match_reward: f64,
    pub wer_reward: f64,
    pub total: f64,
    pub per_candidate: BTreeMap<String, u8>,
}

/// Per-candidate agreement indicator: 1 when the candidate appears in both
/// the output and the reference, or in neither; 0 otherwise. The aggregate
/// is the mean over candidates (1.0 for an empty candidate list).
/// Containment is normalized substring matching.
pub fn match_reward<S: AsRef<str>>(
    output: &str,
    reference: &str,
    candidates: &[S],
) -> (f64, BTreeMap<String, u8>) {
    let out_norm = normalize(output);
    let ref_norm = normalize(reference);
    let mut per_candidate = BTreeMap::new();
    let mut sum = 0usize;
    for c in candidates {
        let needle = normalize(c.as_ref());
        let agree = out_norm.contains(&needle) == ref_norm.contains(&needle);
        per_candidate.insert(c.as_ref().to_string(), u8::from(agree));
        sum += usize::from(agree);
    }
    let reward = if candidates.is_empty() {
        1.0
    } else {
        sum as f64 / candidates.len() as f64
    };
    (reward, per_candidate)
}

/// `max(0, 1 - WER)`: clamped at zero because WER can exceed 1.
pub fn wer_reward(reference: &TokenSeq, output: &TokenSeq) -> Result<f64> {
    Ok((1.0 - wer(reference, output)?).max(0.0))
}

/// Full per-response reward: weighted sum of the match and WER rewards.
pub fn score_response<S: AsRef<str>>(
    output: &str,
    reference: &str,
    candidates: &[S],
    weights: RewardWeights,
) -> Result<RewardRecord> {
    let (match_r, per_candidate) = match_reward(output, reference, candidates);
    let wer_r = wer_reward(&TokenSeq::tokenize(reference), &TokenSeq::tokenize(output))?;
    Ok(RewardRecord {
        match_reward: match_r,
        wer_reward: wer_r,
        total: weights.match_weight * match_r + weights.wer_weight * wer_r,
        per_candidate,
    })
}

const ADVANTAGE_EPS: f64 = 1e-8;

/// Group-relative advantages: `(r - mean) / (population std + 1e-8)`.
/// A zero-variance group yields exactly zero advantages.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::GroupTooSmall(rewards.len()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("rewards"));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let variance = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let all_equal = rewards.iter().all(|&r| r == rewards[0]);
    if all_equal || variance == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    let denom = variance.sqrt() + ADVANTAGE_EPS;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// Per-token log-probabilities for one response under the current policy,
/// the rollout-time (old) policy, and the frozen reference model, plus the
/// response's advantage and the loss hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStep {
    pub policy_logp: Vec<f64>,
    pub old_logp: Vec<f64>,
    pub ref_logp: Vec<f64>,
    pub advantage: f64,
    /// KL-divergence weight (beta). Default 0.04.
    pub kl_weight: f64,
    /// Clip range epsilon. Default 0.2.
    pub clip: f64,
}

pub const DEFAULT_KL_WEIGHT: f64 = 0.04;
pub const DEFAULT_CLIP: f64 = 0.2;

impl PolicyStep {
    pub fn new(policy_logp: Vec<f64>, old_logp: Vec<f64>, ref_logp: Vec<f64>, advantage: f64) -> Self {
        PolicyStep {
            policy_logp,
            old_logp,
            ref_logp,
            advantage,
            kl_weight: DEFAULT_KL_WEIGHT,
            clip: DEFAULT_CLIP,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.policy_logp.is_empty() {
            return Err(Error::EmptyInput("policy log-probs"));
        }
        if self.policy_logp.len() != self.old_logp.len()
            || self.policy_logp.len() != self.ref_logp.len()
        {
            return Err(Error::LengthMismatch {
                refs: self.policy_logp.len(),
                hyps: self.old_logp.len().max(self.ref_logp.len()),
            });
        }
        for (name, list) in [
            ("policy log-probs", &self.policy_logp),
            ("old log-probs", &self.old_logp),
            ("reference log-probs", &self.ref_logp),
        ] {
            if list.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name));
            }
            if list.iter().any(|&v| v > 0.0) {
                return Err(Error::PositiveLogProb(name));
            }
        }
        if !self.advantage.is_finite() || !self.kl_weight.is_finite() || !self.clip.is_finite() {
            return Err(Error::NonFinite("policy step scalars"));
        }
        Ok(())
    }
}

/// Token-mean of the clipped surrogate plus the k3 KL penalty:
///
/// `-min(rho * A, clip(rho, 1-eps, 1+eps) * A) + beta * k3`
///
/// with `rho = exp(logp_policy - logp_old)` per token, the sequence-level
/// advantage broadcast to tokens, and
/// `k3 = exp(logp_ref - logp_policy) - (logp_ref - logp_policy) - 1 >= 0`.
pub fn grpo_loss(step: &PolicyStep) -> Result<f64> {
    step.validate()?;
    let n = step.policy_logp.len() as f64;
    let mut total = 0.0;
    for t in 0..step.policy_logp.len() {
        let (surrogate, k3) = token_terms(step, t);
        total += surrogate + step.kl_weight * k3;
    }
    Ok(total / n)
}

/// Analytic gradient of [`grpo_loss`] with respect to each policy
/// log-probability.
pub fn grpo_loss_grad(step: &PolicyStep) -> Result<Vec<f64>> {
    step.validate()?;
    let n = step.policy_logp.len() as f64;
    let mut grad = Vec::with_capacity(step.policy_logp.len());
    for t in 0..step.policy_logp.len() {
        let rho = (step.policy_logp[t] - step.old_logp[t]).exp();
        let unclipped = rho * step.advantage;
        let clipped = rho.clamp(1.0 - step.clip, 1.0 + step.clip) * step.advantage;
        // The surrogate is -min(u, c); when the unclipped branch is active
        // its derivative w.r.t. the log-prob is -rho*A, otherwise the
        // clamped ratio is constant and the derivative vanishes.
        let d_surrogate = if unclipped <= clipped { -unclipped } else { 0.0 };
        let d_k3 = 1.0 - (step.ref_logp[t] - step.policy_logp[t]).exp();
        grad.push((d_surrogate + step.kl_weight * d_k3) / n);
    }
    Ok(grad)
}

/// Settings for the randomized finite-difference gradient check.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GradCheckSettings {
    pub steps: usize,
    pub tokens: usize,
    pub seed: u64,
    /// Central-difference step size.
    pub h: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            steps: 100,
            tokens: 8,
            seed: 31,
            h: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub steps: usize,
    pub tokens: usize,
    pub h: f64,
    pub max_relative_error: f64,
}

/// Compares the analytic gradient of [`grpo_loss`] against central finite
/// differences on seeded random policy steps and reports the worst
/// relative error.
pub fn gradient_check(settings: GradCheckSettings) -> Result<GradCheckReport> {
    use rand::{Rng, SeedableRng};
    if settings.steps == 0 || settings.tokens == 0 {
        return Err(Error::EmptyInput("gradient check steps"));
    }
    if !(settings.h.is_finite() && settings.h > 0.0) {
        return Err(Error::NonFinite("finite-difference step"));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(settings.seed);
    let sample =
        |rng: &mut rand_chacha::ChaCha8Rng| -(rng.random_range(0.01..4.0)) - 2.0 * settings.h;
    let mut max_rel = 0.0f64;
    for _ in 0..settings.steps {
        let gen = |rng: &mut rand_chacha::ChaCha8Rng| {
            (0..settings.tokens).map(|_| sample(rng)).collect::<Vec<f64>>()
        };
        let step = PolicyStep {
            policy_logp: gen(&mut rng),
            old_logp: gen(&mut rng),
            ref_logp: gen(&mut rng),
            advantage: rng.random_range(-2.0..2.0),
            kl_weight: DEFAULT_KL_WEIGHT,
            clip: DEFAULT_CLIP,
        };
        let grad = grpo_loss_grad(&step)?;
        for t in 0..settings.tokens {
            let mut plus = step.clone();
            plus.policy_logp[t] += settings.h;
            let mut minus = step.clone();
            minus.policy_logp[t] -= settings.h;
            let fd = (grpo_loss(&plus)? - grpo_loss(&minus)?) / (2.0 * settings.h);
            let scale = grad[t].abs().max(fd.abs()).max(1e-7);
            max_rel = max_rel.max((grad[t] - fd).abs() / scale);
        }
    }
    Ok(GradCheckReport {
        steps: settings.steps,
        tokens: settings.tokens,
        h: settings.h,
        max_relative_error: max_rel,
    })
}

fn token_terms(step: &PolicyStep, t: usize) -> (f64, f64) {
    let rho = (step.policy_logp[t] - step.old_logp[t]).exp();
    let unclipped = rho * step.advantage;
    let clipped = rho.clamp(1.0 - step.clip, 1.0 + step.clip) * step.advantage;
    let surrogate = -unclipped.min(clipped);
    let diff = step.ref_logp[t] - step.policy_logp[t];
    let k3 = diff.exp() - diff - 1.0;
    (surrogate, k3)
}
