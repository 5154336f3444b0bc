//! JSON Lines trajectory files and their conversion into normalized
//! recovery tasks.
//!
//! One record per line:
//!
//! ```text
//! {"id":0,"times":[...],"lon":[...],"lat":[...],"agent_id":3,"weekday":2}
//! ```
//!
//! A record without `query_times` is a dense trajectory, sparsified on
//! demand. A record with `query_times` is a sparse observation whose queries
//! are to be filled in.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::net::{ArchConfig, ContextEncoding, ContextSpec};
use crate::rng::stream;
use crate::synth::{apply_split, split, DenseTrajectory, Split};
use crate::traj::{
    Context, ContextKind, ContextPayload, CoordStats, NormStats, Point, RecoveryTask, TimeSpan, TimestampSeq,
    TrajectorySeq,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: usize,
    pub times: Vec<f64>,
    pub lon: Vec<f64>,
    pub lat: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weekday: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_times: Option<Vec<f64>>,
}

impl Record {
    pub fn points(&self) -> Vec<Point> {
        self.lon.iter().zip(&self.lat).map(|(&a, &b)| [a, b]).collect()
    }

    pub fn check(&self) -> Result<()> {
        if self.times.len() != self.lon.len() || self.times.len() != self.lat.len() {
            return Err(shape(format!(
                "record {}: {} times, {} lon, {} lat",
                self.id,
                self.times.len(),
                self.lon.len(),
                self.lat.len()
            )));
        }
        TimestampSeq::new(self.times.clone())?;
        TrajectorySeq::new(self.points())?;
        Ok(())
    }

    pub fn is_dense(&self) -> bool {
        self.query_times.is_none()
    }

    pub fn contexts(&self) -> Vec<Context> {
        let mut out = Vec::new();
        if let Some(a) = self.agent_id {
            out.push(Context {
                kind: ContextKind::AgentId,
                payload: ContextPayload::Categorical(a),
            });
        }
        if let Some(w) = self.weekday {
            out.push(Context {
                kind: ContextKind::Weekday,
                payload: ContextPayload::Categorical(w),
            });
        }
        out
    }
}

impl From<&DenseTrajectory> for Record {
    fn from(d: &DenseTrajectory) -> Self {
        Record {
            id: d.id,
            times: d.times.clone(),
            lon: d.points.iter().map(|p| p[0]).collect(),
            lat: d.points.iter().map(|p| p[1]).collect(),
            agent_id: Some(d.agent_id),
            weekday: Some(d.weekday),
            query_times: None,
        }
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Record>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line).map_err(|e| invalid(format!("{}:{}: {e}", path.display(), n + 1)))?;
        r.check()?;
        out.push(r);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Context embedders for the fields a record can carry.
pub fn default_contexts(agents: usize) -> Vec<ContextSpec> {
    vec![
        ContextSpec {
            kind: ContextKind::AgentId,
            dim: 8,
            encoding: ContextEncoding::Categorical { vocab: agents },
        },
        ContextSpec {
            kind: ContextKind::Weekday,
            dim: 4,
            encoding: ContextEncoding::Categorical { vocab: 7 },
        },
    ]
}

/// Dataset-level coordinate statistics over every point of every record.
pub fn fit_coords(records: &[Record]) -> Result<CoordStats> {
    let pts: Vec<Point> = records.iter().flat_map(|r| r.points()).collect();
    CoordStats::fit(&pts)
}

/// How dense records are cut into tasks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsifySpec {
    pub erase_ratio: f64,
    pub knob: f64,
    pub seed: u64,
}

/// A normalized task plus what is needed to map it back to raw units.
#[derive(Clone, Debug)]
pub struct PreparedTask {
    pub id: usize,
    pub task: RecoveryTask,
    pub norm: NormStats,
    /// Merged-order split indices for dense records.
    pub split: Option<Split>,
}

fn time_span(first: f64, last: f64) -> Result<TimeSpan> {
    let span = last - first;
    if !(span > 0.0) {
        return Err(invalid("trajectory must span a positive time"));
    }
    Ok(TimeSpan { start: first, span })
}

/// Normalizes a record into a task. Dense records are split per `spec`
/// (split `i` drawn from stream `(seed, "sparsify", id)`), sparse records
/// keep their own queries and carry no ground truth.
pub fn prepare(record: &Record, coords: &CoordStats, spec: &SparsifySpec, contexts: bool) -> Result<PreparedTask> {
    record.check()?;
    let pts: Vec<Point> = record.points().iter().map(|&p| coords.apply(p)).collect();
    let ctx = if contexts { record.contexts() } else { Vec::new() };
    match &record.query_times {
        None => {
            let n = record.times.len();
            let ts = time_span(record.times[0], record.times[n - 1])?;
            let mut times: Vec<f64> = record.times.iter().map(|&t| ts.apply(t)).collect();
            times[0] = 0.0;
            times[n - 1] = 1.0;
            let s = split(n, spec.erase_ratio, spec.knob, &mut stream(spec.seed, "sparsify", record.id as u64))?;
            let mut task = apply_split(&times, &pts, &s)?;
            task.contexts = ctx;
            Ok(PreparedTask {
                id: record.id,
                task,
                norm: NormStats {
                    coords: *coords,
                    time: ts,
                },
                split: Some(s),
            })
        }
        Some(q) => {
            let first = record.times[0].min(q.first().copied().unwrap_or(f64::INFINITY));
            let last = record.times[record.times.len() - 1].max(q.last().copied().unwrap_or(f64::NEG_INFINITY));
            let ts = time_span(first, last)?;
            let task = RecoveryTask::new(
                TimestampSeq::new(record.times.iter().map(|&t| ts.apply(t)).collect())?,
                TrajectorySeq::new(pts)?,
                TimestampSeq::new_or_empty(q.iter().map(|&t| ts.apply(t)).collect())?,
                ctx,
                None,
            )?;
            Ok(PreparedTask {
                id: record.id,
                task,
                norm: NormStats {
                    coords: *coords,
                    time: ts,
                },
                split: None,
            })
        }
    }
}

/// Largest agent id plus one, at least `floor`.
pub fn agent_vocab(records: &[Record], floor: usize) -> usize {
    records
        .iter()
        .filter_map(|r| r.agent_id)
        .map(|a| a + 1)
        .max()
        .unwrap_or(0)
        .max(floor)
}

/// Registers the record contexts present in `records` on `arch`.
pub fn with_contexts(mut arch: ArchConfig, records: &[Record], floor: usize) -> ArchConfig {
    let specs = default_contexts(agent_vocab(records, floor));
    arch.contexts = specs
        .into_iter()
        .filter(|s| match s.kind {
            ContextKind::AgentId => records.iter().any(|r| r.agent_id.is_some()),
            ContextKind::Weekday => records.iter().any(|r| r.weekday.is_some()),
            _ => false,
        })
        .collect();
    arch
}
