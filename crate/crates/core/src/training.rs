//! Sequential, state-carrying training.
//!
//! Every batch slot walks one sample down its own noise ladder from its start
//! step towards `t = 1`. An iteration trains `segment_steps` consecutive
//! steps of each slot, chaining the denoiser through the state-propagation
//! cells, then moves the slot `advance` steps down and keeps the (detached)
//! propagated state for the next iteration. A slot that reaches `t = 0` is
//! refilled with a fresh sample and a zero state.

use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::diffusion::{NoiseLadder, NoiseSchedule};
use crate::error::{invalid, shape, Error, Result};
use crate::net::{
    context_channels, denoise_channels, denoise_on_tape, embed_contexts_on_tape, propagate_on_tape, propagate_state,
    stack_channels, HiddenState, ModelParams,
};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{stream, Stream};
use crate::tensor::{Real, Tensor};
use crate::traj::{Context, MergedSequence, Point, RecoveryTask, TargetSpace, BASE_WIDTH};

/// How the diffusion steps of the slots in one batch relate to each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchScheme {
    /// Every slot starts at `T` and reloads at `T`.
    SharedT,
    /// Slot `k` starts at `T − k·⌈T/B⌉` (wrapped into `[1, T]`), reloads at `T`.
    OffsetT,
    /// Independent uniform start steps.
    UniformT,
}

impl BatchScheme {
    pub fn name(&self) -> &'static str {
        match self {
            BatchScheme::SharedT => "shared_t",
            BatchScheme::OffsetT => "offset_t",
            BatchScheme::UniformT => "uniform_t",
        }
    }
}

impl FromStr for BatchScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared_t" | "shared" => Ok(BatchScheme::SharedT),
            "offset_t" | "offset" => Ok(BatchScheme::OffsetT),
            "uniform_t" | "uniform" => Ok(BatchScheme::UniformT),
            _ => Err(invalid(format!(
                "unknown batch scheme {s:?} (expected shared_t, offset_t or uniform_t)"
            ))),
        }
    }
}

/// Which positions contribute to the noise-prediction loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    QueryOnly,
    /// Observed positions are included with a zero-noise target.
    AllPositions,
}

impl FromStr for LossScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query_only" => Ok(LossScope::QueryOnly),
            "all_positions" => Ok(LossScope::AllPositions),
            _ => Err(invalid(format!("unknown loss scope {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Denoising steps chained inside one iteration.
    pub segment_steps: usize,
    /// Steps a slot moves down per iteration; `None` means `segment_steps − 1`.
    pub advance: Option<usize>,
    pub batch_size: usize,
    pub scheme: BatchScheme,
    pub adam: AdamConfig,
    pub iterations: usize,
    pub loss_scope: LossScope,
    pub seed: u64,
    /// Slots processed concurrently.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            segment_steps: 2,
            advance: None,
            batch_size: 8,
            scheme: BatchScheme::UniformT,
            adam: AdamConfig::default(),
            iterations: 1000,
            loss_scope: LossScope::QueryOnly,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn advance(&self) -> usize {
        self.advance.unwrap_or(self.segment_steps.saturating_sub(1).max(1))
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.segment_steps == 0 || self.segment_steps > steps {
            return Err(invalid(format!(
                "segment_steps {} outside [1, {steps}]",
                self.segment_steps
            )));
        }
        let adv = self.advance();
        if adv == 0 || adv > self.segment_steps {
            return Err(invalid(format!(
                "advance {adv} outside [1, {}]",
                self.segment_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if !(self.adam.learning_rate >= 0.0) {
            return Err(invalid("learning rate must be non-negative"));
        }
        Ok(())
    }
}

/// A training task with everything that stays fixed along its ladder.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub len: usize,
    /// `(6, L)` base conditioning channels; the query point entries are
    /// overwritten by the diffused block at every step.
    pub base: Tensor<f64>,
    /// Merged-sequence positions of the queries, in time order.
    pub query_idx: Vec<usize>,
    /// Clean query block `[x_0, y_0, x_1, y_1, ...]` in the target space.
    pub clean: Vec<f64>,
    /// Block entry `i` maps back to the coordinate `offset[i] + scale * block[i]`.
    pub offset: Vec<f64>,
    pub scale: f64,
    pub contexts: Vec<Context>,
}

/// `(6, L)` conditioning channels of `merged`, with the observed point
/// entries expressed in `target`'s frame.
pub fn base_channels(merged: &MergedSequence, target: TargetSpace) -> Result<Tensor<f64>> {
    let cond = crate::traj::aggregate(merged, &[])?;
    let len = merged.len();
    let mut base = Tensor::from_fn(&[BASE_WIDTH, len], |i| cond.at(i % len, i / len));
    let d = base.data_mut();
    for (k, p) in target.observed_channel(merged) {
        d[k] = p[0];
        d[len + k] = p[1];
    }
    Ok(base)
}

impl TrainSample {
    pub fn from_task(task: &RecoveryTask, target: TargetSpace) -> Result<Self> {
        let merged = task.merge_truth()?;
        if merged.query_count() == 0 {
            return Err(invalid("training task has no query points"));
        }
        let len = merged.len();
        let base = base_channels(&merged, target)?;
        let query_idx = merged.query_indices();
        let lerp: Vec<Point> = query_idx.iter().map(|&k| merged.lerp_points.points()[k]).collect();
        let (offset, scale) = target.offset_scale(&lerp);
        let clean = merged
            .query_points()
            .iter()
            .flat_map(|p| [p[0], p[1]])
            .zip(&offset)
            .map(|(v, o)| (v - o) / scale)
            .collect();
        Ok(TrainSample {
            len,
            base,
            query_idx,
            clean,
            offset,
            scale,
            contexts: task.contexts.clone(),
        })
    }

    /// Base channels with the query block replaced by `block`.
    pub fn channels_with<F: Real>(&self, block: &[F]) -> Result<Tensor<F>> {
        if block.len() != 2 * self.query_idx.len() {
            return Err(shape(format!(
                "query block of {} values for {} queries",
                block.len(),
                self.query_idx.len()
            )));
        }
        let mut t: Tensor<F> = self.base.cast();
        let len = self.len;
        let d = t.data_mut();
        for (q, &k) in self.query_idx.iter().enumerate() {
            d[k] = block[2 * q];
            d[len + k] = block[2 * q + 1];
        }
        Ok(t)
    }

    /// Target and weight vectors, aligned with the `(2, L)` noise output.
    fn loss_terms<F: Real>(&self, eps: &[F], scope: LossScope) -> (Vec<F>, Vec<F>, F) {
        let len = self.len;
        let mut target = vec![F::zero(); 2 * len];
        let mut weight = match scope {
            LossScope::QueryOnly => vec![F::zero(); 2 * len],
            LossScope::AllPositions => vec![F::one(); 2 * len],
        };
        for (q, &k) in self.query_idx.iter().enumerate() {
            for c in 0..2 {
                target[c * len + k] = eps[2 * q + c];
                weight[c * len + k] = F::one();
            }
        }
        let denom = weight.iter().copied().sum::<F>();
        (target, weight, denom)
    }
}

/// Ladder over the query block of a task with ground truth.
pub fn build_ladder<F: Real, R: Rng + ?Sized>(
    task: &RecoveryTask,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<NoiseLadder<F>> {
    let sample = TrainSample::from_task(task, TargetSpace::Absolute)?;
    sample_ladder(&sample, sched, rng)
}

pub fn sample_ladder<F: Real, R: Rng + ?Sized>(
    sample: &TrainSample,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<NoiseLadder<F>> {
    let x0: Vec<F> = sample.clean.iter().map(|&v| F::lit(v)).collect();
    NoiseLadder::sample(&x0, sched, rng)
}

/// One batch position: a sample, its ladder, the next step to train and the
/// carried multi-step state.
#[derive(Clone, Debug)]
pub struct SampleSlot<F> {
    pub sample: usize,
    pub ladder: NoiseLadder<F>,
    pub t: usize,
    pub state: HiddenState<F>,
    /// Steps trained since the last reload.
    pub age: usize,
}

/// Start steps of a fresh batch.
pub fn init_steps<R: Rng + ?Sized>(scheme: BatchScheme, batch: usize, steps: usize, rng: &mut R) -> Vec<usize> {
    match scheme {
        BatchScheme::SharedT => vec![steps; batch],
        BatchScheme::OffsetT => {
            let delta = steps.div_ceil(batch);
            (0..batch)
                .map(|k| {
                    let back = (k * delta) % steps;
                    steps - back
                })
                .collect()
        }
        BatchScheme::UniformT => (0..batch).map(|_| rng.random_range(1..=steps)).collect(),
    }
}

/// Step a slot is refilled at. Every scheme starts a fresh sample at `T` so
/// that each loaded sample walks its full chain; the schemes differ only in
/// the initial phases.
pub fn reload_step(steps: usize) -> usize {
    steps
}

/// Recorded segment: the summed loss and the state that enters each step.
struct SegmentVars {
    loss: Var,
    /// `states[j]` feeds step `t − j`; `states[advance]` is carried over when
    /// it exists.
    states: Vec<Vec<Var>>,
    steps: usize,
}

fn record_segment<F: Real>(
    tape: &mut Tape<'_, F>,
    params: &ModelParams<F>,
    sample: &TrainSample,
    ladder: &NoiseLadder<F>,
    t: usize,
    state: &HiddenState<F>,
    segment_steps: usize,
    advance: usize,
    scope: LossScope,
) -> Result<SegmentVars> {
    if t == 0 {
        return Err(invalid("slot is exhausted (t = 0)"));
    }
    if t > ladder.steps() {
        return Err(invalid(format!("step {t} beyond ladder of {}", ladder.steps())));
    }
    let spdm = params.config().state_propagation;
    let n = segment_steps.min(t);
    let embeds = embed_contexts_on_tape(tape, params, &sample.contexts, sample.len)?;
    let mut states = Vec::with_capacity(n + 1);
    if spdm {
        state.check(params.config(), sample.len)?;
        states.push(state.record(tape));
    }
    let mut losses = Vec::with_capacity(n);
    for j in 0..n {
        let tt = t - j;
        let base = tape.input(sample.channels_with(ladder.state(tt))?);
        let input = if embeds.is_empty() {
            base
        } else {
            let mut parts = vec![base];
            parts.extend_from_slice(&embeds);
            tape.concat(&parts)?
        };
        let out = denoise_on_tape(tape, params, input, states.get(j).map(|s| s.as_slice()), tt)?;
        let (target, weight, denom) = sample.loss_terms(ladder.multi(tt), scope);
        losses.push(tape.masked_mse(out.eps, target, weight, denom)?);
        let wanted = j + 1 < n || j + 1 == advance;
        if spdm && tt > 1 && wanted {
            let next = propagate_on_tape(tape, params, &states[j], &out.state, tt)?;
            states.push(next);
        }
    }
    let loss = tape.sum(&losses)?;
    Ok(SegmentVars { loss, states, steps: n })
}

/// Loss and gradients of one slot's segment.
#[derive(Clone, Debug)]
pub struct SegmentResult<F> {
    pub loss: F,
    pub steps: usize,
    pub grads: Gradients<F>,
    /// State entering step `t − advance`, when that step exists.
    pub next_state: Option<HiddenState<F>>,
}

/// Summed per-step noise MSE of the segment starting at `slot.t`.
pub fn segment_loss<F: Real>(
    params: &ModelParams<F>,
    sample: &TrainSample,
    slot: &SampleSlot<F>,
    cfg: &TrainConfig,
) -> Result<F> {
    let mut tape = Tape::new(params.tensors());
    let seg = record_segment(
        &mut tape,
        params,
        sample,
        &slot.ladder,
        slot.t,
        &slot.state,
        cfg.segment_steps,
        cfg.advance(),
        cfg.loss_scope,
    )?;
    Ok(tape.value(seg.loss).data()[0])
}

/// [`segment_loss`] plus its parameter gradients and the carried state.
pub fn segment_gradients<F: Real>(
    params: &ModelParams<F>,
    sample: &TrainSample,
    slot: &SampleSlot<F>,
    cfg: &TrainConfig,
) -> Result<SegmentResult<F>> {
    let mut tape = Tape::new(params.tensors());
    let adv = cfg.advance();
    let seg = record_segment(
        &mut tape,
        params,
        sample,
        &slot.ladder,
        slot.t,
        &slot.state,
        cfg.segment_steps,
        adv,
        cfg.loss_scope,
    )?;
    let loss = tape.value(seg.loss).data()[0];
    let grads = tape.backward(seg.loss)?;
    let next_state = match seg.states.get(adv) {
        Some(vars) if slot.t > adv => Some(HiddenState::read(&tape, vars)),
        _ => None,
    };
    Ok(SegmentResult {
        loss,
        steps: seg.steps,
        grads,
        next_state,
    })
}

/// Mean per-step noise MSE along a sample's whole chain `T..1`, carrying the
/// state as at inference. Used as a schedule-independent training loss.
pub fn chain_loss<F: Real>(
    params: &ModelParams<F>,
    sample: &TrainSample,
    ladder: &NoiseLadder<F>,
    scope: LossScope,
) -> Result<f64> {
    let cfg = params.config();
    let ctx = context_channels(params, &sample.contexts, sample.len)?;
    let mut state = HiddenState::zeros(cfg, sample.len);
    let mut total = 0.0;
    for t in (1..=ladder.steps()).rev() {
        let base = sample.channels_with(ladder.state(t))?;
        let input = stack_channels(&[&base, &ctx], sample.len)?;
        let out = denoise_channels(params, input, &state, t)?;
        let (target, weight, denom) = sample.loss_terms(ladder.multi(t), scope);
        let se: F = out
            .eps
            .data()
            .iter()
            .zip(&target)
            .zip(&weight)
            .map(|((&p, &y), &w)| w * (p - y) * (p - y))
            .sum();
        total += (se / denom).to_f64();
        if cfg.state_propagation && t > 1 {
            state = propagate_state(params, &state, &out.state, t)?;
        }
    }
    Ok(total / ladder.steps() as f64)
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub mean_loss: f64,
    pub mean_t: f64,
    pub wall_seconds: f64,
    pub grad_norm: f64,
}

/// Training state: parameters, optimizer and the live batch.
pub struct Trainer<F: Real> {
    pub params: ModelParams<F>,
    pub optimizer: Adam<F>,
    pub config: TrainConfig,
    pub sched: NoiseSchedule,
    samples: Vec<TrainSample>,
    slots: Vec<SampleSlot<F>>,
    iteration: usize,
    loads: u64,
    loader: Stream,
    started: Instant,
}

impl<F: Real> Trainer<F> {
    pub fn new(
        params: ModelParams<F>,
        samples: Vec<TrainSample>,
        sched: NoiseSchedule,
        config: TrainConfig,
    ) -> Result<Self> {
        let optimizer = Adam::new(config.adam, params.tensors());
        Self::resume(params, optimizer, samples, sched, config, 0)
    }

    /// Continues from a saved iteration count and optimizer state. The batch
    /// itself is rebuilt from streams keyed by `iteration`.
    pub fn resume(
        params: ModelParams<F>,
        mut optimizer: Adam<F>,
        samples: Vec<TrainSample>,
        sched: NoiseSchedule,
        config: TrainConfig,
        iteration: usize,
    ) -> Result<Self> {
        config.validate(sched.steps())?;
        if samples.is_empty() {
            return Err(invalid("no training samples"));
        }
        for s in &samples {
            params.config().check_len(s.len)?;
        }
        optimizer.config = config.adam;
        let mut tr = Trainer {
            params,
            optimizer,
            sched,
            samples,
            slots: Vec::new(),
            iteration,
            loads: 0,
            loader: stream(config.seed, "loader", iteration as u64),
            config,
            started: Instant::now(),
        };
        let mut draw = stream(tr.config.seed, "init-steps", iteration as u64);
        let starts = init_steps(tr.config.scheme, tr.config.batch_size, tr.sched.steps(), &mut draw);
        tr.slots = starts
            .into_iter()
            .map(|t| tr.load(t))
            .collect::<Result<_>>()?;
        Ok(tr)
    }

    fn load(&mut self, t: usize) -> Result<SampleSlot<F>> {
        let sample = self.loader.random_range(0..self.samples.len());
        let key = ((self.iteration as u64) << 24) ^ self.loads;
        self.loads += 1;
        let mut rng = stream(self.config.seed, "ladder", key);
        let ladder = sample_ladder(&self.samples[sample], &self.sched, &mut rng)?;
        Ok(SampleSlot {
            sample,
            ladder,
            t,
            state: HiddenState::zeros(self.params.config(), self.samples[sample].len),
            age: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn slots(&self) -> &[SampleSlot<F>] {
        &self.slots
    }

    pub fn samples(&self) -> &[TrainSample] {
        &self.samples
    }

    /// One optimizer step over the whole batch.
    pub fn step(&mut self) -> Result<IterationLog> {
        let b = self.slots.len();
        let mean_t = self.slots.iter().map(|s| s.t as f64).sum::<f64>() / b as f64;
        let mut grads = Gradients::zeros_like(self.params.tensors());
        let mut results = Vec::with_capacity(b);
        let width = self.config.workers.max(1);
        for chunk in self.slots.chunks(width) {
            let params = &self.params;
            let samples = &self.samples;
            let cfg = &self.config;
            let part: Vec<Result<SegmentResult<F>>> = if width == 1 {
                chunk
                    .iter()
                    .map(|s| segment_gradients(params, &samples[s.sample], s, cfg))
                    .collect()
            } else {
                chunk
                    .par_iter()
                    .map(|s| segment_gradients(params, &samples[s.sample], s, cfg))
                    .collect()
            };
            for r in part {
                let mut r = r?;
                grads.add_assign(&r.grads);
                r.grads = Gradients { tensors: Vec::new() };
                results.push(r);
            }
        }
        let mean_loss = results.iter().map(|r| r.loss.to_f64()).sum::<f64>() / b as f64;
        if !mean_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at iteration {} (mean t {mean_t})",
                self.iteration
            )));
        }
        grads.scale(F::lit(1.0 / b as f64));
        let grad_norm = self.optimizer.update(self.params.tensors_mut(), &mut grads)?;
        if !self.params.is_finite() {
            return Err(Error::NonFinite(format!("parameters after iteration {}", self.iteration)));
        }
        let adv = self.config.advance();
        for (k, r) in results.into_iter().enumerate() {
            let slot = &mut self.slots[k];
            slot.age += r.steps.min(adv);
            if slot.t > adv {
                slot.t -= adv;
                if let Some(s) = r.next_state {
                    slot.state = s;
                }
            } else {
                self.slots[k] = self.load(reload_step(self.sched.steps()))?;
            }
        }
        self.iteration += 1;
        Ok(IterationLog {
            iteration: self.iteration,
            mean_loss,
            mean_t,
            wall_seconds: self.started.elapsed().as_secs_f64(),
            grad_norm,
        })
    }

    /// Runs until `config.iterations` is reached, reporting every row.
    pub fn run(&mut self, mut on_iteration: impl FnMut(&Self, &IterationLog) -> Result<()>) -> Result<Vec<IterationLog>> {
        let mut log = Vec::new();
        while self.iteration < self.config.iterations {
            let row = self.step()?;
            on_iteration(self, &row)?;
            log.push(row);
        }
        Ok(log)
    }
}

/// Prepares samples and trains from scratch.
pub fn train<F: Real>(
    params: ModelParams<F>,
    tasks: &[RecoveryTask],
    sched: NoiseSchedule,
    config: TrainConfig,
) -> Result<(ModelParams<F>, Vec<IterationLog>)> {
    let target = params.config().target;
    let samples = tasks
        .iter()
        .map(|t| TrainSample::from_task(t, target))
        .collect::<Result<Vec<_>>>()?;
    let mut tr = Trainer::new(params, samples, sched, config)?;
    let log = tr.run(|_, _| Ok(()))?;
    Ok((tr.params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ladder_consistency_error;
    use crate::net::ArchConfig;
    use crate::traj::{TimestampSeq, TrajectorySeq};

    fn toy_task(len: usize, seed: u64) -> RecoveryTask {
        let mut rng = stream(seed, "toy", 0);
        let pts: Vec<[f64; 2]> = (0..len)
            .map(|i| {
                let a = i as f64 / len as f64 * 3.0 + rng.random_range(0.0..0.1);
                [a.cos(), a.sin()]
            })
            .collect();
        let times: Vec<f64> = (0..len).map(|i| i as f64 / (len - 1) as f64).collect();
        let obs: Vec<usize> = (0..len).filter(|i| i % 2 == 0 || *i == len - 1).collect();
        let qry: Vec<usize> = (0..len).filter(|i| !obs.contains(i)).collect();
        RecoveryTask::new(
            TimestampSeq::new(obs.iter().map(|&i| times[i]).collect()).unwrap(),
            TrajectorySeq::new(obs.iter().map(|&i| pts[i]).collect()).unwrap(),
            TimestampSeq::new(qry.iter().map(|&i| times[i]).collect()).unwrap(),
            Vec::new(),
            Some(TrajectorySeq::new(qry.iter().map(|&i| pts[i]).collect()).unwrap()),
        )
        .unwrap()
    }

    fn tiny(state: bool) -> ArchConfig {
        ArchConfig {
            blocks: 2,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            kernel_size: 3,
            step_embed_dim: 8,
            contexts: Vec::new(),
            seq_len: 16,
            state_propagation: state,
            target: Default::default(),
        }
    }

    fn slot_for<F: Real>(sample: &TrainSample, cfg: &ArchConfig, sched: &NoiseSchedule, t: usize, seed: u64) -> SampleSlot<F> {
        SampleSlot {
            sample: 0,
            ladder: sample_ladder(sample, sched, &mut stream(seed, "ladder", 0)).unwrap(),
            t,
            state: HiddenState::zeros(cfg, sample.len),
            age: 0,
        }
    }

    #[test]
    fn toy_ladder_is_consistent_and_reproducible() {
        let sched = NoiseSchedule::linear(2, 1e-4, 0.02).unwrap();
        let task = toy_task(16, 1);
        let a: NoiseLadder<f64> = build_ladder(&task, &sched, &mut stream(4, "l", 0)).unwrap();
        let b: NoiseLadder<f64> = build_ladder(&task, &sched, &mut stream(4, "l", 0)).unwrap();
        assert_eq!(a, b);
        assert!(ladder_consistency_error(&a, &sched).unwrap() < 1e-12);
    }

    #[test]
    fn ladder_requires_ground_truth() {
        let mut task = toy_task(16, 1);
        task.ground_truth = None;
        let sched = NoiseSchedule::linear(4, 1e-4, 0.02).unwrap();
        assert!(build_ladder::<f64, _>(&task, &sched, &mut stream(0, "l", 0)).is_err());
    }

    #[test]
    fn terminal_multistep_noise_has_unit_variance() {
        let sched = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let sample = TrainSample::from_task(&toy_task(16, 2), TargetSpace::Absolute).unwrap();
        let mut all = Vec::new();
        for k in 0..400 {
            let l: NoiseLadder<f64> = sample_ladder(&sample, &sched, &mut stream(5, "l", k)).unwrap();
            all.extend_from_slice(l.multi(50));
        }
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05 && (var - 1.0).abs() < 0.05, "{mean} {var}");
    }

    #[test]
    fn untrained_loss_is_mean_squared_target() {
        let cfg = tiny(true);
        let sched = NoiseSchedule::linear(20, 1e-4, 0.02).unwrap();
        let params = ModelParams::<f64>::init(&cfg, &mut stream(0, "init", 0)).unwrap();
        let sample = TrainSample::from_task(&toy_task(16, 3), TargetSpace::Absolute).unwrap();
        let slot = slot_for(&sample, &cfg, &sched, 12, 6);
        let tc = TrainConfig::default();
        let loss = segment_loss(&params, &sample, &slot, &tc).unwrap();
        let ms = |t: usize| slot.ladder.multi(t).iter().map(|e| e * e).sum::<f64>() / slot.ladder.multi(t).len() as f64;
        assert!((loss - (ms(12) + ms(11))).abs() < 1e-12);
    }

    #[test]
    fn last_segment_uses_single_step() {
        let cfg = tiny(true);
        let sched = NoiseSchedule::linear(20, 1e-4, 0.02).unwrap();
        let params = ModelParams::<f64>::init(&cfg, &mut stream(0, "init", 0)).unwrap();
        let sample = TrainSample::from_task(&toy_task(16, 3), TargetSpace::Absolute).unwrap();
        let slot = slot_for(&sample, &cfg, &sched, 1, 6);
        let r = segment_gradients(&params, &sample, &slot, &TrainConfig::default()).unwrap();
        assert_eq!(r.steps, 1);
        assert!(r.next_state.is_none());
        let e = slot.ladder.multi(1);
        assert!((r.loss - e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64).abs() < 1e-12);
        let mut gone = slot.clone();
        gone.t = 0;
        assert!(segment_loss(&params, &sample, &gone, &TrainConfig::default()).is_err());
    }

    #[test]
    fn scopes_agree_when_every_position_is_a_query() {
        let cfg = tiny(false);
        let sched = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let mut params = ModelParams::<f64>::init(&cfg, &mut stream(0, "init", 0)).unwrap();
        for v in params.get_mut("out.w").unwrap().data_mut() {
            *v = 0.05;
        }
        let mut sample = TrainSample::from_task(&toy_task(16, 3), TargetSpace::Absolute).unwrap();
        // Promote every position to a query.
        sample.query_idx = (0..16).collect();
        sample.clean = (0..32).map(|i| (i as f64 * 0.1).sin()).collect();
        sample.offset = vec![0.0; 32];
        let slot = slot_for(&sample, &cfg, &sched, 7, 1);
        let q = TrainConfig::default();
        let a = TrainConfig {
            loss_scope: LossScope::AllPositions,
            ..TrainConfig::default()
        };
        assert_eq!(
            segment_loss(&params, &sample, &slot, &q).unwrap(),
            segment_loss(&params, &sample, &slot, &a).unwrap()
        );
    }

    #[test]
    fn offset_starts_follow_ceiling_stride() {
        let mut rng = stream(0, "x", 0);
        assert_eq!(init_steps(BatchScheme::OffsetT, 4, 8, &mut rng), vec![8, 6, 4, 2]);
        assert_eq!(init_steps(BatchScheme::OffsetT, 4, 500, &mut rng), vec![500, 375, 250, 125]);
        assert_eq!(init_steps(BatchScheme::SharedT, 3, 9, &mut rng), vec![9, 9, 9]);
        assert_eq!(reload_step(9), 9);
    }

    #[test]
    fn uniform_scheme_visits_steps_evenly() {
        // One epoch: batch·T segment advances of one step each.
        let (b, steps) = (256, 500);
        let mut rng = stream(3, "uniform", 0);
        let mut ts = init_steps(BatchScheme::UniformT, b, steps, &mut rng);
        let mut hist = [0usize; 10];
        for _ in 0..steps {
            for t in &mut ts {
                hist[(*t - 1) * 10 / steps] += 1;
                *t = if *t > 1 { *t - 1 } else { reload_step(steps) };
            }
        }
        let total: usize = hist.iter().sum();
        let expect = total as f64 / 10.0;
        let chi2: f64 = hist.iter().map(|&h| (h as f64 - expect).powi(2) / expect).sum();
        // 99th percentile of chi-square with 9 degrees of freedom.
        assert!(chi2 < 21.666, "chi2 {chi2}, {hist:?}");
    }

    fn trainer(scheme: BatchScheme, lr: f64, spdm: bool) -> Trainer<f32> {
        let cfg = tiny(spdm);
        let sched = NoiseSchedule::linear(12, 1e-4, 0.05).unwrap();
        let params = ModelParams::<f32>::init(&cfg, &mut stream(0, "init", 0)).unwrap();
        let samples = (0..3).map(|i| TrainSample::from_task(&toy_task(16, i), TargetSpace::Absolute).unwrap()).collect();
        let tc = TrainConfig {
            batch_size: 4,
            scheme,
            adam: AdamConfig {
                learning_rate: lr,
                ..AdamConfig::default()
            },
            iterations: 30,
            seed: 7,
            ..TrainConfig::default()
        };
        Trainer::new(params, samples, sched, tc).unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let mut tr = trainer(BatchScheme::UniformT, 0.0, true);
        let before = tr.params.tensors().to_vec();
        tr.step().unwrap();
        assert_eq!(tr.params.tensors(), &before[..]);
    }

    #[test]
    fn slots_count_down_and_reload_with_zero_state() {
        let mut tr = trainer(BatchScheme::SharedT, 1e-3, true);
        assert!(tr.slots().iter().all(|s| s.t == 12));
        for _ in 0..14 {
            let states: Vec<usize> = tr.slots().iter().map(|s| s.t).collect();
            tr.step().unwrap();
            for (k, s) in tr.slots().iter().enumerate() {
                if states[k] > 1 {
                    assert_eq!(s.t, states[k] - 1);
                    assert!(!s.state.is_zero());
                } else {
                    assert_eq!(s.t, 12);
                    assert!(s.state.is_zero());
                    assert_eq!(s.age, 0);
                }
            }
            let t0 = tr.slots()[0].t;
            assert!(tr.slots().iter().all(|s| s.t == t0));
        }
    }

    #[test]
    fn carried_state_equals_propagated_output() {
        let mut tr = trainer(BatchScheme::SharedT, 0.0, true);
        let slot = tr.slots()[0].clone();
        let sample = tr.samples()[slot.sample].clone();
        let out = denoise_channels(&tr.params, sample.channels_with(slot.ladder.state(slot.t)).unwrap(), &slot.state, slot.t).unwrap();
        let want = propagate_state(&tr.params, &slot.state, &out.state, slot.t).unwrap();
        tr.step().unwrap();
        assert_eq!(tr.slots()[0].state, want);
        assert_eq!(tr.slots()[0].t, slot.t - 1);
        // Same ladder, never resampled mid-lifetime.
        assert_eq!(tr.slots()[0].ladder, slot.ladder);
    }

    #[test]
    fn training_is_reproducible() {
        let run = || {
            let mut tr = trainer(BatchScheme::UniformT, 1e-3, true);
            (0..5).map(|_| tr.step().unwrap().mean_loss).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn parallel_workers_match_serial() {
        let mut a = trainer(BatchScheme::OffsetT, 1e-3, true);
        let mut b = trainer(BatchScheme::OffsetT, 1e-3, true);
        b.config.workers = 3;
        for _ in 0..3 {
            assert_eq!(a.step().unwrap().mean_loss, b.step().unwrap().mean_loss);
        }
        assert_eq!(a.params.tensors(), b.params.tensors());
    }

    #[test]
    fn tiny_model_overfits() {
        let mut tr = trainer(BatchScheme::UniformT, 3e-3, true);
        tr.config.iterations = 600;
        let probe: Vec<NoiseLadder<f32>> = (0..3)
            .map(|i| sample_ladder(&tr.samples()[i], &tr.sched, &mut stream(99, "probe", i as u64)).unwrap())
            .collect();
        let eval = |tr: &Trainer<f32>| -> f64 {
            (0..3)
                .map(|i| chain_loss(&tr.params, &tr.samples()[i], &probe[i], LossScope::QueryOnly).unwrap())
                .sum::<f64>()
                / 3.0
        };
        let before = eval(&tr);
        tr.run(|_, _| Ok(())).unwrap();
        let after = eval(&tr);
        assert!(after < 0.5 * before, "{before} -> {after}");
    }

    #[test]
    fn config_validation() {
        let tc = TrainConfig {
            segment_steps: 30,
            ..TrainConfig::default()
        };
        assert!(tc.validate(20).is_err());
        assert!(TrainConfig::default().validate(20).is_ok());
        assert_eq!("uniform_t".parse::<BatchScheme>().unwrap(), BatchScheme::UniformT);
        assert!("sometimes".parse::<BatchScheme>().is_err());
        let three = TrainConfig {
            segment_steps: 3,
            ..TrainConfig::default()
        };
        assert_eq!(three.advance(), 2);
    }

    #[test]
    fn residual_sample_maps_back_to_truth() {
        let task = toy_task(16, 4);
        let target = TargetSpace::fit_residual([&task]).unwrap();
        let s = TrainSample::from_task(&task, target).unwrap();
        let abs = TrainSample::from_task(&task, TargetSpace::Absolute).unwrap();
        for (i, (v, truth)) in s.clean.iter().zip(&abs.clean).enumerate() {
            assert!((s.offset[i] + s.scale * v - truth).abs() < 1e-12);
        }
        let a = s.channels_with(&s.clean).unwrap();
        for (q, &k) in s.query_idx.iter().enumerate() {
            assert_eq!(a.data()[k], s.clean[2 * q]);
            assert_eq!(a.data()[s.len + k], s.clean[2 * q + 1]);
        }
        let rms = (s.clean.iter().map(|v| v * v).sum::<f64>() / s.clean.len() as f64).sqrt();
        assert!((rms - 1.0).abs() < 1e-12);
    }

}
