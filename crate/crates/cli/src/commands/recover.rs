use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;
use trajrec_core::checkpoint::Checkpoint;
use trajrec_core::dataset::{fit_coords, prepare, read_jsonl, write_jsonl, PreparedTask, Record, SparsifySpec};
use trajrec_core::diffusion::{NoiseSchedule, ScheduleSpec};
use trajrec_core::net::ModelParams;
use trajrec_core::sampling::SamplerMode;
use trajrec_core::traj::{CoordStats, MergedSequence, Point};

use crate::args::{data_path, ModeArg, RecoverArgs, SplitArgs};
use crate::pipeline::{run_method, Method};
use crate::report::{f, manifest_path, write_manifest, Csv, Provenance};

/// One line of a recovery file: the dataset record plus per-point origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveredRecord {
    pub id: usize,
    pub times: Vec<f64>,
    pub lon: Vec<f64>,
    pub lat: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weekday: Option<usize>,
    pub recovered: Vec<bool>,
    pub source: Vec<String>,
    pub method: String,
    pub n_steps: usize,
    pub use_state: bool,
}

impl RecoveredRecord {
    pub fn points(&self) -> Vec<Point> {
        self.lon.iter().zip(&self.lat).map(|(&a, &b)| [a, b]).collect()
    }
}

pub fn split_spec(s: &SplitArgs) -> SparsifySpec {
    SparsifySpec {
        erase_ratio: s.erase_ratio,
        knob: s.knob,
        seed: s.split_seed,
    }
}

/// Maps a normalized output back to raw units. Observed points are copied
/// from the input record so they survive unchanged.
pub fn to_raw(
    record: &Record,
    prepared: &PreparedTask,
    merged: &MergedSequence,
    coords: &CoordStats,
    method: &Method,
) -> RecoveredRecord {
    let raw = record.points();
    let (times, observed): (Vec<f64>, Vec<Point>) = match (&prepared.split, &record.query_times) {
        (Some(s), _) => (record.times.clone(), s.observed.iter().map(|&i| raw[i]).collect()),
        (None, Some(q)) => {
            let mut t: Vec<f64> = record.times.iter().chain(q).copied().collect();
            t.sort_by(f64::total_cmp);
            (t, raw)
        }
        (None, None) => (record.times.clone(), raw),
    };
    let mut obs = observed.into_iter();
    let mut pts = Vec::with_capacity(merged.len());
    for (k, &m) in merged.mask.iter().enumerate() {
        pts.push(if m {
            coords.invert(merged.points.points()[k])
        } else {
            obs.next().expect("observed count matches the mask")
        });
    }
    RecoveredRecord {
        id: record.id,
        times,
        lon: pts.iter().map(|p| p[0]).collect(),
        lat: pts.iter().map(|p| p[1]).collect(),
        agent_id: record.agent_id,
        weekday: record.weekday,
        recovered: merged.mask.clone(),
        source: merged
            .mask
            .iter()
            .map(|&m| if m { "predicted" } else { "observed" }.to_string())
            .collect(),
        method: method.label().to_string(),
        n_steps: method.n_steps(),
        use_state: method.use_state(),
    }
}

pub fn load_model(ckpt: Option<&std::path::Path>) -> Result<(Option<ModelParams<f32>>, NoiseSchedule, Option<CoordStats>)> {
    match ckpt {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            Ok((Some(ck.params), NoiseSchedule::new(ck.schedule)?, ck.coords))
        }
        None => Ok((None, NoiseSchedule::new(ScheduleSpec::default())?, None)),
    }
}

pub fn method_for(mode: ModeArg, steps: Option<usize>, use_state: bool, sched: &NoiseSchedule) -> Result<Method> {
    let t = sched.steps();
    Ok(match mode {
        ModeArg::Lerp => Method::Lerp,
        ModeArg::Ddpm => Method::model(SamplerMode::Ddpm, t, steps.unwrap_or(t), use_state)?,
        ModeArg::Ddim => Method::model(SamplerMode::Ddim, t, steps.unwrap_or(t), use_state)?,
    })
}

pub fn run(a: &RecoverArgs, prov: &Provenance) -> Result<()> {
    let records = read_jsonl(&data_path(&a.data))?;
    let (model, sched, coords) = load_model(a.ckpt.as_deref())?;
    if model.is_none() && a.mode != ModeArg::Lerp {
        bail!("--ckpt is required for --mode ddpm and ddim");
    }
    let coords = match coords {
        Some(c) => c,
        None => fit_coords(&records)?,
    };
    let method = method_for(a.mode, a.steps, !a.no_state, &sched)?;
    let use_ctx = model.as_ref().is_some_and(|m| !m.config().contexts.is_empty());
    let spec = split_spec(&a.split);
    let prepared = records
        .iter()
        .map(|r| prepare(r, &coords, &spec, use_ctx))
        .collect::<trajrec_core::Result<Vec<_>>>()?;
    let tasks: Vec<_> = prepared.iter().map(|p| p.task.clone()).collect();
    let outcome = run_method(&tasks, &method, model.as_ref(), &sched, a.seed, a.batch_size, a.workers)?;
    let out: Vec<RecoveredRecord> = records
        .iter()
        .zip(&prepared)
        .zip(&outcome.merged)
        .map(|((r, p), m)| to_raw(r, p, m, &coords, &method))
        .collect();
    crate::report::ensure_parent(&a.out)?;
    write_jsonl(&a.out, &out)?;
    write_manifest(
        &manifest_path(&a.out),
        prov,
        json!({
            "method": method.label(),
            "mode": method.mode_name(),
            "n_steps": method.n_steps(),
            "use_state": method.use_state(),
            "split": spec,
            "records": out.len(),
        }),
    )?;
    let timing_path = a.timing.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".timing.csv");
        s.into()
    });
    let mut csv = Csv::new(
        prov,
        &[
            ("method", method.label().into()),
            ("mode", method.mode_name().into()),
            ("n_steps", method.n_steps().to_string()),
        ],
        &["batch", "tasks", "evaluations", "wall_seconds"],
    );
    for t in &outcome.timing {
        csv.row(&[t.batch.to_string(), t.tasks.to_string(), t.evaluations.to_string(), f(t.wall_seconds)]);
    }
    csv.write(&timing_path)?;
    eprintln!(
        "recovered {} trajectories with {} in {:.2}s",
        out.len(),
        method.label(),
        outcome.wall_seconds()
    );
    Ok(())
}
