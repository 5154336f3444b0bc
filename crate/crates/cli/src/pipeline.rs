//! Shared recovery and scoring plumbing used by several commands.

use std::time::Instant;

use trajrec_core::diffusion::NoiseSchedule;
use trajrec_core::metrics::{irregularity, mae, mse, ndtw, NdtwNorm};
use trajrec_core::net::ModelParams;
use trajrec_core::sampling::{batch_recover, BatchTiming, SamplerConfig, SamplerMode};
use trajrec_core::traj::{MergedSequence, Point, RecoveryTask, TrajectorySeq};
use trajrec_core::{Error, Result};

/// A way of filling in the query points.
#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    Lerp,
    Model(SamplerConfig),
}

impl Method {
    pub fn model(mode: SamplerMode, steps: usize, n_steps: usize, use_state: bool) -> Result<Self> {
        Ok(Method::Model(SamplerConfig::new(mode, steps, n_steps, use_state)?))
    }

    pub fn label(&self) -> &'static str {
        match self {
            Method::Lerp => "lerp",
            Method::Model(c) if c.use_state => "model_state",
            Method::Model(_) => "model_no_state",
        }
    }

    pub fn mode_name(&self) -> &'static str {
        match self {
            Method::Lerp => "lerp",
            Method::Model(c) => c.mode.name(),
        }
    }

    /// Denoiser evaluations per task.
    pub fn n_steps(&self) -> usize {
        match self {
            Method::Lerp => 0,
            Method::Model(c) => c.plan.len() - 1,
        }
    }

    pub fn use_state(&self) -> bool {
        matches!(self, Method::Model(c) if c.use_state)
    }
}

pub struct Outcome {
    pub merged: Vec<MergedSequence>,
    pub timing: Vec<BatchTiming>,
}

impl Outcome {
    pub fn wall_seconds(&self) -> f64 {
        self.timing.iter().map(|t| t.wall_seconds).sum()
    }
}

pub fn run_method(
    tasks: &[RecoveryTask],
    method: &Method,
    model: Option<&ModelParams<f32>>,
    sched: &NoiseSchedule,
    seed: u64,
    batch_size: usize,
    workers: usize,
) -> Result<Outcome> {
    match method {
        Method::Lerp => {
            let clock = Instant::now();
            let merged = tasks.iter().map(lerp_recover).collect::<Result<Vec<_>>>()?;
            let timing = vec![BatchTiming {
                batch: 0,
                tasks: tasks.len(),
                evaluations: 0,
                wall_seconds: clock.elapsed().as_secs_f64(),
            }];
            Ok(Outcome { merged, timing })
        }
        Method::Model(cfg) => {
            let model = model.ok_or_else(|| Error::Invalid("this method needs a checkpoint".into()))?;
            let (rs, timing) = batch_recover(tasks, model, sched, cfg, seed, batch_size, workers)?;
            Ok(Outcome {
                merged: rs.into_iter().map(|r| r.merged).collect(),
                timing,
            })
        }
    }
}

pub fn lerp_recover(task: &RecoveryTask) -> Result<MergedSequence> {
    let blank = TrajectorySeq::new(vec![[0.0, 0.0]; task.query_times.len()])?;
    let m = task.merge_with(&blank)?;
    let q: Vec<Point> = m.query_indices().iter().map(|&k| m.lerp_points.points()[k]).collect();
    task.merge_with(&TrajectorySeq::new(q)?)
}

/// Per-task scores in normalized space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub mse: f64,
    pub mae: f64,
    pub ndtw: f64,
    pub spatial_std: f64,
    pub temporal_std: f64,
}

/// Scores a dense output against the dense truth. MSE and MAE cover the
/// query positions, NDTW the whole sequence, irregularity the observed part.
pub fn score(pred: &MergedSequence, truth: &[Point], norm: NdtwNorm) -> Result<Scores> {
    if truth.len() != pred.len() {
        return Err(Error::Shape(format!(
            "prediction has {} points, truth {}",
            pred.len(),
            truth.len()
        )));
    }
    let idx = pred.query_indices();
    let p: Vec<Point> = idx.iter().map(|&k| pred.points.points()[k]).collect();
    let t: Vec<Point> = idx.iter().map(|&k| truth[k]).collect();
    let (ot, op) = pred.observed();
    let (spatial_std, temporal_std) = irregularity(&op, &ot)?;
    let (mse, mae) = if idx.is_empty() { (0.0, 0.0) } else { (mse(&p, &t)?, mae(&p, &t)?) };
    Ok(Scores {
        mse,
        mae,
        ndtw: ndtw(pred.points.points(), truth, norm)?,
        spatial_std,
        temporal_std,
    })
}

pub fn mean_scores(all: &[Scores]) -> Scores {
    let n = all.len().max(1) as f64;
    let avg = |f: fn(&Scores) -> f64| all.iter().map(f).sum::<f64>() / n;
    Scores {
        mse: avg(|s| s.mse),
        mae: avg(|s| s.mae),
        ndtw: avg(|s| s.ndtw),
        spatial_std: avg(|s| s.spatial_std),
        temporal_std: avg(|s| s.temporal_std),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use trajrec_core::traj::TimestampSeq;

    #[test]
    fn lerp_is_exact_on_straight_lines() {
        let task = RecoveryTask::new(
            TimestampSeq::new(vec![0.0, 1.0]).unwrap(),
            TrajectorySeq::new(vec![[0.0, 0.0], [2.0, 4.0]]).unwrap(),
            TimestampSeq::new(vec![0.25, 0.5]).unwrap(),
            Vec::new(),
            None,
        )
        .unwrap();
        let m = lerp_recover(&task).unwrap();
        assert_eq!(m.points.points(), &[[0.0, 0.0], [0.5, 1.0], [1.0, 2.0], [2.0, 4.0]]);
        let s = score(&m, m.points.points(), NdtwNorm::PathLength).unwrap();
        assert_eq!((s.mse, s.mae, s.ndtw), (0.0, 0.0, 0.0));
    }
}
