use std::collections::HashMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use trajrec_core::dataset::{fit_coords, read_jsonl, Record};
use trajrec_core::traj::{merge, CoordStats, Point, TimestampSeq, TrajectorySeq};
use trajrec_core::Error;

use crate::args::{data_path, EvalArgs};
use crate::commands::recover::RecoveredRecord;
use crate::pipeline::{mean_scores, score, Scores};
use crate::report::{f, read_csv, Csv, Provenance};

pub const EVAL_COLUMNS: [&str; 10] = [
    "id",
    "method",
    "mse",
    "mae",
    "ndtw",
    "spatial_std",
    "temporal_std",
    "n_steps",
    "use_state",
    "wall_seconds",
];

pub fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Invalid(format!("{}:{}: {e}", path.display(), n + 1)).into())
        })
        .collect()
}

/// Scores one recovered record against its dense truth in normalized space.
pub fn score_record(pred: &RecoveredRecord, truth: &Record, coords: &CoordStats, norm: trajrec_core::metrics::NdtwNorm) -> Result<Scores> {
    if truth.times != pred.times {
        return Err(Error::Shape(format!("trajectory {}: prediction and truth timestamps differ", pred.id)).into());
    }
    if pred.recovered.len() != pred.times.len() || pred.lon.len() != pred.times.len() {
        return Err(Error::Shape(format!("trajectory {}: ragged recovery record", pred.id)).into());
    }
    let t0 = pred.times[0];
    let span = pred.times[pred.times.len() - 1] - t0;
    if !(span > 0.0) {
        return Err(Error::Degenerate(format!("trajectory {} spans no time", pred.id)).into());
    }
    let times: Vec<f64> = pred.times.iter().map(|t| (t - t0) / span).collect();
    let pts: Vec<Point> = pred.points().into_iter().map(|p| coords.apply(p)).collect();
    let pick = |q: bool| -> (Vec<f64>, Vec<Point>) {
        (0..times.len())
            .filter(|&k| pred.recovered[k] == q)
            .map(|k| (times[k], pts[k]))
            .unzip()
    };
    let (ot, op) = pick(false);
    let (qt, qp) = pick(true);
    let merged = merge(
        &TimestampSeq::new(ot)?,
        &TimestampSeq::new_or_empty(qt)?,
        &TrajectorySeq::new(op)?,
        &TrajectorySeq::new(qp)?,
    )?;
    let truth_pts: Vec<Point> = truth.points().into_iter().map(|p| coords.apply(p)).collect();
    Ok(score(&merged, &truth_pts, norm)?)
}

pub fn run(a: &EvalArgs, prov: &Provenance) -> Result<()> {
    let preds: Vec<RecoveredRecord> = read_lines(&a.pred)?;
    let truth = read_jsonl(&data_path(&a.truth))?;
    let coords: CoordStats = match &a.norm {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => fit_coords(&truth)?,
    };
    let by_id: HashMap<usize, &Record> = truth.iter().map(|r| (r.id, r)).collect();
    let per_task_wall = match &a.timing {
        Some(p) => {
            let (h, rows) = read_csv(p)?;
            let col = |name: &str| h.iter().position(|c| c == name);
            let (Some(ti), Some(wi)) = (col("tasks"), col("wall_seconds")) else {
                return Err(Error::Invalid(format!("{} is not a timing file", p.display())).into());
            };
            let mut tasks = 0.0;
            let mut wall = 0.0;
            for r in &rows {
                tasks += r[ti].parse::<f64>()?;
                wall += r[wi].parse::<f64>()?;
            }
            Some(if tasks > 0.0 { wall / tasks } else { 0.0 })
        }
        None => None,
    };
    let wall_cell = per_task_wall.map(f).unwrap_or_default();

    let mut csv = Csv::new(prov, &[("ndtw_norm", a.ndtw_norm.name().into())], &EVAL_COLUMNS);
    let mut all = Vec::with_capacity(preds.len());
    for p in &preds {
        let t = by_id
            .get(&p.id)
            .ok_or_else(|| Error::Invalid(format!("trajectory {} missing from the truth file", p.id)))?;
        let s = score_record(p, t, &coords, a.ndtw_norm)?;
        csv.row(&[
            p.id.to_string(),
            p.method.clone(),
            f(s.mse),
            f(s.mae),
            f(s.ndtw),
            f(s.spatial_std),
            f(s.temporal_std),
            p.n_steps.to_string(),
            p.use_state.to_string(),
            wall_cell.clone(),
        ]);
        all.push(s);
    }
    let m = mean_scores(&all);
    let first = preds.first();
    csv.row(&[
        "mean".into(),
        first.map(|p| p.method.clone()).unwrap_or_default(),
        f(m.mse),
        f(m.mae),
        f(m.ndtw),
        f(m.spatial_std),
        f(m.temporal_std),
        first.map(|p| p.n_steps.to_string()).unwrap_or_default(),
        first.map(|p| p.use_state.to_string()).unwrap_or_default(),
        wall_cell,
    ]);
    csv.write(&a.out)?;
    eprintln!("{} trajectories: mse {:.6} mae {:.6} ndtw {:.6}", all.len(), m.mse, m.mae, m.ndtw);
    Ok(())
}
