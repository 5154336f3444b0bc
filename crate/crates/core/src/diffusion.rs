//! Noise schedules, the forward process (single step and closed-form jump),
//! recovery of the dependent multi-step noise, and the DDPM / DDIM reverse
//! updates.
//!
//! Step indices are 1-based: `t = 1..=T`, with `alpha_bar(0) = 1`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleShape {
    Linear,
}

/// Parameters a schedule was built from; stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub shape: ScheduleShape,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            steps: 500,
            beta_start: 1e-4,
            beta_end: 0.02,
            shape: ScheduleShape::Linear,
        }
    }
}

/// `β`, `α = 1 − β` and `ᾱ_t = Π_{i≤t} α_i` tables.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(spec: ScheduleSpec) -> Result<Self> {
        let ScheduleSpec {
            steps,
            beta_start,
            beta_end,
            shape: ScheduleShape::Linear,
        } = spec;
        if steps == 0 {
            return Err(invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(spec, beta)
    }

    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::new(ScheduleSpec {
            steps,
            beta_start,
            beta_end,
            shape: ScheduleShape::Linear,
        })
    }

    /// Schedule from an explicit `β` list (the spec is kept for the record).
    pub fn from_betas(spec: ScheduleSpec, beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(invalid("every beta must lie in (0, 1)"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule {
            spec: ScheduleSpec {
                steps: beta.len(),
                ..spec
            },
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    /// `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(invalid(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

fn check_pair<F>(a: &[F], b: &[F], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(shape(format!("{what}: {} vs {} elements", a.len(), b.len())));
    }
    Ok(())
}

/// One forward step: `√α_t·x_{t−1} + √β_t·ε_{t−1:t}`.
pub fn forward_step<F: Real>(x_prev: &[F], t: usize, sched: &NoiseSchedule, eps: &[F]) -> Result<Vec<F>> {
    sched.check_step(t)?;
    check_pair(x_prev, eps, "forward_step")?;
    let a = F::lit(sched.alpha(t).sqrt());
    let b = F::lit(sched.beta(t).sqrt());
    Ok(x_prev.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
}

/// Closed-form jump from the clean sample: `√ᾱ_t·x_0 + √(1−ᾱ_t)·ε_{0:t}`.
pub fn forward_jump<F: Real>(x0: &[F], t: usize, sched: &NoiseSchedule, eps: &[F]) -> Result<Vec<F>> {
    sched.check_step(t)?;
    check_pair(x0, eps, "forward_jump")?;
    let ab = sched.alpha_bar(t);
    let a = F::lit(ab.sqrt());
    let b = F::lit((1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
}

/// Multi-step noise consistent with an observed `x_t`:
/// `(x_t − √ᾱ_t·x_0) / √(1−ᾱ_t)`.
pub fn derive_multistep_noise<F: Real>(x0: &[F], xt: &[F], t: usize, sched: &NoiseSchedule) -> Result<Vec<F>> {
    if t == 0 {
        return Err(invalid("multi-step noise is undefined at t = 0"));
    }
    sched.check_step(t)?;
    check_pair(x0, xt, "derive_multistep_noise")?;
    let ab = sched.alpha_bar(t);
    let a = F::lit(ab.sqrt());
    let inv = F::lit(1.0 / (1.0 - ab).sqrt());
    Ok(x0.iter().zip(xt).map(|(&x, &y)| (y - a * x) * inv).collect())
}

/// DDPM ancestral update with `σ_t = √β_t`; pass `z = 0` at the final step.
pub fn ddpm_reverse_step<F: Real>(
    xt: &[F],
    eps_hat: &[F],
    t: usize,
    sched: &NoiseSchedule,
    z: &[F],
) -> Result<Vec<F>> {
    sched.check_step(t)?;
    check_pair(xt, eps_hat, "ddpm_reverse_step")?;
    check_pair(xt, z, "ddpm_reverse_step noise")?;
    let inv_sqrt_alpha = F::lit(1.0 / sched.alpha(t).sqrt());
    let coef = F::lit(sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt());
    let sigma = F::lit(sched.beta(t).sqrt());
    Ok(xt
        .iter()
        .zip(eps_hat)
        .zip(z)
        .map(|((&x, &e), &n)| inv_sqrt_alpha * (x - coef * e) + sigma * n)
        .collect())
}

/// Deterministic (η = 0) DDIM jump from `t_from` down to `t_to`.
pub fn ddim_reverse_step<F: Real>(
    xt: &[F],
    eps_hat: &[F],
    t_from: usize,
    t_to: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<F>> {
    if t_to >= t_from {
        return Err(invalid(format!("DDIM needs t_to < t_from, got {t_to} >= {t_from}")));
    }
    sched.check_step(t_from)?;
    check_pair(xt, eps_hat, "ddim_reverse_step")?;
    let ab_from = sched.alpha_bar(t_from);
    let ab_to = sched.alpha_bar(t_to);
    let s_from = F::lit((1.0 - ab_from).sqrt());
    let inv_a_from = F::lit(1.0 / ab_from.sqrt());
    let a_to = F::lit(ab_to.sqrt());
    let s_to = F::lit((1.0 - ab_to).sqrt());
    Ok(xt
        .iter()
        .zip(eps_hat)
        .map(|(&x, &e)| {
            let x0 = (x - s_from * e) * inv_a_from;
            a_to * x0 + s_to * e
        })
        .collect())
}

/// Jointly consistent single-step noises, diffused states and multi-step
/// noises for one clean block.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseLadder<F> {
    /// `single_step[t-1] = ε_{t−1:t}`.
    pub single_step: Vec<Vec<F>>,
    /// `states[t] = x_t`, `states[0] = x_0`.
    pub states: Vec<Vec<F>>,
    /// `multi_step[t-1] = ε_{0:t}`.
    pub multi_step: Vec<Vec<F>>,
}

impl<F: Real> NoiseLadder<F> {
    /// Samples i.i.d. single-step noises and builds the ladder from them.
    pub fn sample<R: Rng + ?Sized>(x0: &[F], sched: &NoiseSchedule, rng: &mut R) -> Result<Self> {
        let noises = (0..sched.steps())
            .map(|_| {
                x0.iter()
                    .map(|_| F::lit(rng.sample::<f64, _>(StandardNormal)))
                    .collect()
            })
            .collect();
        Self::from_single_steps(x0, sched, noises)
    }

    /// Iterates the single-step process and derives the multi-step noises.
    pub fn from_single_steps(x0: &[F], sched: &NoiseSchedule, single_step: Vec<Vec<F>>) -> Result<Self> {
        if single_step.len() != sched.steps() {
            return Err(shape(format!(
                "{} single-step noises for a {}-step schedule",
                single_step.len(),
                sched.steps()
            )));
        }
        let mut states = Vec::with_capacity(sched.steps() + 1);
        states.push(x0.to_vec());
        for (i, eps) in single_step.iter().enumerate() {
            let next = forward_step(&states[i], i + 1, sched, eps)?;
            states.push(next);
        }
        let multi_step = (1..=sched.steps())
            .map(|t| derive_multistep_noise(x0, &states[t], t, sched))
            .collect::<Result<_>>()?;
        Ok(NoiseLadder {
            single_step,
            states,
            multi_step,
        })
    }

    pub fn steps(&self) -> usize {
        self.single_step.len()
    }

    pub fn state(&self, t: usize) -> &[F] {
        &self.states[t]
    }

    /// `ε_{0:t}` for `t ≥ 1`.
    pub fn multi(&self, t: usize) -> &[F] {
        &self.multi_step[t - 1]
    }

    pub fn clean(&self) -> &[F] {
        &self.states[0]
    }
}

/// Largest `|forward_jump(x0, t, ε_{0:t}) − x_t|` over all steps of a ladder.
pub fn ladder_consistency_error<F: Real>(ladder: &NoiseLadder<F>, sched: &NoiseSchedule) -> Result<f64> {
    let mut worst = 0.0f64;
    for t in 1..=ladder.steps() {
        let jumped = forward_jump(ladder.clean(), t, sched, ladder.multi(t))?;
        for (a, b) in jumped.iter().zip(ladder.state(t)) {
            worst = worst.max((*a - *b).abs().to_f64());
        }
    }
    Ok(worst)
}
