//! Synthetic dense trajectories and their sparsification into recovery tasks.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::stream;
use crate::traj::{Point, RecoveryTask, TimestampSeq, TrajectorySeq};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    /// Spline-steered vehicle with bounded turning and uniform sampling.
    TaxiSmooth,
    /// Alternating dwells and dashes, jittery fixes, log-normal intervals.
    CourierJittery,
}

impl Style {
    pub fn name(&self) -> &'static str {
        match self {
            Style::TaxiSmooth => "taxi_smooth",
            Style::CourierJittery => "courier_jittery",
        }
    }
}

impl FromStr for Style {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "taxi_smooth" => Ok(Style::TaxiSmooth),
            "courier_jittery" => Ok(Style::CourierJittery),
            _ => Err(invalid(format!(
                "unknown style {s:?} (expected taxi_smooth or courier_jittery)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    /// `(lon, lat)` of the box centre, degrees.
    pub center: Point,
    /// Half-width of the bounding box, degrees.
    pub half_box_deg: f64,
    /// Taxi sampling interval, seconds.
    pub taxi_dt: f64,
    /// Largest heading change between consecutive taxi steps, degrees.
    pub max_turn_deg: f64,
    /// Speed range, metres per second.
    pub speed_range: (f64, f64),
    /// Steps between heading waypoints of the taxi spline.
    pub waypoint_every: usize,
    /// Median courier sampling interval (seconds) and log-normal sigma.
    pub courier_median_dt: f64,
    pub courier_sigma: f64,
    /// Courier position jitter, metres.
    pub jitter_m: f64,
    pub agents: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            center: [108.95, 34.27],
            half_box_deg: 0.05,
            taxi_dt: 15.0,
            max_turn_deg: 20.0,
            speed_range: (4.0, 14.0),
            waypoint_every: 12,
            courier_median_dt: 20.0,
            courier_sigma: 0.9,
            jitter_m: 6.0,
            agents: 10,
        }
    }
}

/// One dense trajectory in raw units (seconds, degrees).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseTrajectory {
    pub id: usize,
    pub times: Vec<f64>,
    pub points: Vec<Point>,
    pub agent_id: usize,
    pub weekday: usize,
}

const M_PER_DEG_LAT: f64 = 110_540.0;

fn m_per_deg_lon(lat: f64) -> f64 {
    111_320.0 * lat.to_radians().cos()
}

/// Catmull-Rom interpolation through `knots` spaced `every` samples apart.
fn spline(knots: &[f64], every: usize, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let s = i as f64 / every as f64;
            let k = (s.floor() as usize).min(knots.len() - 2);
            let u = s - k as f64;
            let p0 = knots[k.saturating_sub(1)];
            let p1 = knots[k];
            let p2 = knots[k + 1];
            let p3 = knots[(k + 2).min(knots.len() - 1)];
            0.5 * ((2.0 * p1)
                + (-p0 + p2) * u
                + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u * u
                + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * u * u * u)
        })
        .collect()
}

/// Metric positions of a taxi path: spline-steered heading clamped to the
/// turn bound, spline speed clamped to the speed range.
fn taxi_path<R: Rng + ?Sized>(n: usize, p: &GenParams, rng: &mut R) -> Vec<Point> {
    let knots = n / p.waypoint_every + 3;
    let mut heading = vec![rng.random_range(0.0..2.0 * PI)];
    for _ in 1..knots {
        let last = *heading.last().unwrap();
        heading.push(last + rng.random_range(-PI / 2.0..PI / 2.0));
    }
    let speeds: Vec<f64> = (0..knots)
        .map(|_| rng.random_range(p.speed_range.0..p.speed_range.1))
        .collect();
    let h = spline(&heading, p.waypoint_every, n);
    let v = spline(&speeds, p.waypoint_every, n);
    let bound = p.max_turn_deg.to_radians() * 0.999;
    let mut theta = h[0];
    let mut pos = [0.0, 0.0];
    let mut out = vec![pos];
    for i in 1..n {
        theta += (h[i] - theta).clamp(-bound, bound);
        let speed = v[i].clamp(p.speed_range.0, p.speed_range.1);
        pos = [pos[0] + speed * p.taxi_dt * theta.cos(), pos[1] + speed * p.taxi_dt * theta.sin()];
        out.push(pos);
    }
    out
}

/// Metric positions and intervals of a courier path.
fn courier_path<R: Rng + ?Sized>(n: usize, p: &GenParams, rng: &mut R) -> (Vec<Point>, Vec<f64>) {
    let intervals = LogNormal::new(p.courier_median_dt.ln(), p.courier_sigma).expect("valid log-normal");
    let mut pts = Vec::with_capacity(n);
    let mut dts = Vec::with_capacity(n);
    let mut anchor = [0.0, 0.0];
    let mut theta = rng.random_range(0.0..2.0 * PI);
    while pts.len() < n {
        let dwell = rng.random_range(3..12);
        for _ in 0..dwell {
            let j: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            pts.push([anchor[0] + p.jitter_m * j[0], anchor[1] + p.jitter_m * j[1]]);
            dts.push(intervals.sample(rng));
        }
        theta += rng.random_range(-PI / 1.5..PI / 1.5);
        let dash = rng.random_range(4..16);
        let speed = rng.random_range(p.speed_range.0..p.speed_range.1);
        for _ in 0..dash {
            let dt = intervals.sample(rng);
            theta += rng.random_range(-0.15..0.15);
            anchor = [anchor[0] + speed * dt * theta.cos(), anchor[1] + speed * dt * theta.sin()];
            let j: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            pts.push([anchor[0] + p.jitter_m * j[0], anchor[1] + p.jitter_m * j[1]]);
            dts.push(dt);
        }
    }
    pts.truncate(n);
    dts.truncate(n);
    (pts, dts)
}

/// Shrinks (never enlarges) a metric path to fit the box, places it at a
/// random position inside and converts to degrees.
fn place<R: Rng + ?Sized>(metric: &[Point], p: &GenParams, rng: &mut R) -> Vec<Point> {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for q in metric {
        for a in 0..2 {
            lo[a] = lo[a].min(q[a]);
            hi[a] = hi[a].max(q[a]);
        }
    }
    let lat0 = p.center[1];
    let half = [p.half_box_deg * m_per_deg_lon(lat0), p.half_box_deg * M_PER_DEG_LAT];
    let extent = [hi[0] - lo[0], hi[1] - lo[1]];
    let scale = (0..2)
        .map(|a| if extent[a] > 0.0 { 2.0 * half[a] / extent[a] } else { f64::INFINITY })
        .fold(1.0f64, f64::min);
    let slack = [2.0 * half[0] - extent[0] * scale, 2.0 * half[1] - extent[1] * scale];
    let shift = [
        -half[0] + rng.random_range(0.0..=slack[0].max(0.0)),
        -half[1] + rng.random_range(0.0..=slack[1].max(0.0)),
    ];
    metric
        .iter()
        .map(|q| {
            let x = (q[0] - lo[0]) * scale + shift[0];
            let y = (q[1] - lo[1]) * scale + shift[1];
            [p.center[0] + x / m_per_deg_lon(lat0), p.center[1] + y / M_PER_DEG_LAT]
        })
        .collect()
}

/// Heading change (radians, in `[0, π]`) at every interior point, measured
/// in the local metric plane.
pub fn turn_angles(points: &[Point], center_lat: f64) -> Vec<f64> {
    let sx = m_per_deg_lon(center_lat);
    let m: Vec<Point> = points.iter().map(|q| [q[0] * sx, q[1] * M_PER_DEG_LAT]).collect();
    m.windows(3)
        .map(|w| {
            let a = (w[1][1] - w[0][1]).atan2(w[1][0] - w[0][0]);
            let b = (w[2][1] - w[1][1]).atan2(w[2][0] - w[1][0]);
            let mut d = (b - a).abs() % (2.0 * PI);
            if d > PI {
                d = 2.0 * PI - d;
            }
            d
        })
        .collect()
}

/// One dense trajectory of `len` points.
pub fn generate_one(id: usize, len: usize, style: Style, p: &GenParams, seed: u64) -> Result<DenseTrajectory> {
    if len < 3 {
        return Err(invalid("trajectories need at least three points"));
    }
    let mut rng = stream(seed, "trajectory", id as u64);
    let start = rng.random_range(0.0..86_400.0f64).floor();
    let (metric, dts) = match style {
        Style::TaxiSmooth => (taxi_path(len, p, &mut rng), vec![p.taxi_dt; len]),
        Style::CourierJittery => courier_path(len, p, &mut rng),
    };
    let points = place(&metric, p, &mut rng);
    let mut times = Vec::with_capacity(len);
    let mut t = start;
    for dt in dts.iter().take(len) {
        times.push(t);
        // Whole milliseconds keep the JSON form short and exact.
        t += (dt.max(1.0) * 1000.0).round() / 1000.0;
    }
    Ok(DenseTrajectory {
        id,
        times,
        points,
        agent_id: rng.random_range(0..p.agents.max(1)),
        weekday: rng.random_range(0..7),
    })
}

/// `n` dense trajectories; trajectory `i` depends only on `(seed, i)`.
pub fn generate(n: usize, len: usize, style: Style, p: &GenParams, seed: u64) -> Result<Vec<DenseTrajectory>> {
    (0..n).map(|i| generate_one(i, len, style, p, seed)).collect()
}

/// Observed/query split of a dense sequence of `len` points.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub observed: Vec<usize>,
    pub query: Vec<usize>,
}

/// Smooth random field in roughly `[-1, 1]`: a few random low-frequency
/// sinusoids.
fn smooth_field<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            let cycles = rng.random_range(1.0..6.0);
            (cycles, rng.random_range(0.0..2.0 * PI), rng.random_range(0.5..1.0))
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w.2).sum();
    (0..len)
        .map(|i| {
            let x = i as f64 / len as f64;
            waves.iter().map(|(c, ph, a)| a * (2.0 * PI * c * x + ph).sin()).sum::<f64>() / norm
        })
        .collect()
}

/// Chooses `round(ratio·len)` interior points to erase. With `knob = 0` the
/// erased points are spread evenly; growing `knob` concentrates them into
/// contiguous bursts.
pub fn split<R: Rng + ?Sized>(len: usize, erase_ratio: f64, knob: f64, rng: &mut R) -> Result<Split> {
    if !(erase_ratio > 0.0 && erase_ratio < 1.0) {
        return Err(invalid(format!("erase ratio {erase_ratio} outside (0, 1)")));
    }
    if !(knob >= 0.0) {
        return Err(invalid("irregularity knob must be non-negative"));
    }
    let m = ((erase_ratio * len as f64).round() as usize).max(1);
    if len < 2 || m > len - 2 {
        return Err(invalid(format!(
            "erasing {m} of {len} points leaves fewer than two observations"
        )));
    }
    let phase = rng.random_range(0.0..1.0);
    let field = smooth_field(len, rng);
    let mut pri: Vec<(f64, usize)> = (1..len - 1)
        .map(|i| {
            let even = (i as f64 * erase_ratio + phase).fract();
            (even + knob * 0.5 * field[i], i)
        })
        .collect();
    pri.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut erased = vec![false; len];
    for &(_, i) in pri.iter().take(m) {
        erased[i] = true;
    }
    Ok(Split {
        observed: (0..len).filter(|&i| !erased[i]).collect(),
        query: (0..len).filter(|&i| erased[i]).collect(),
    })
}

/// Applies a split to `(times, points)`: erased points become queries with
/// ground truth.
pub fn apply_split(times: &[f64], points: &[Point], s: &Split) -> Result<RecoveryTask> {
    let pick_t = |ix: &[usize]| ix.iter().map(|&i| times[i]).collect::<Vec<_>>();
    let pick_p = |ix: &[usize]| ix.iter().map(|&i| points[i]).collect::<Vec<_>>();
    RecoveryTask::new(
        TimestampSeq::new(pick_t(&s.observed))?,
        TrajectorySeq::new(pick_p(&s.observed))?,
        TimestampSeq::new_or_empty(pick_t(&s.query))?,
        Vec::new(),
        Some(TrajectorySeq::new(pick_p(&s.query))?),
    )
}

/// Erases `erase_ratio` of a dense trajectory's points.
pub fn sparsify<R: Rng + ?Sized>(
    times: &[f64],
    points: &[Point],
    erase_ratio: f64,
    knob: f64,
    rng: &mut R,
) -> Result<RecoveryTask> {
    if times.len() != points.len() {
        return Err(invalid("times and points differ in length"));
    }
    let s = split(times.len(), erase_ratio, knob, rng)?;
    apply_split(times, points, &s)
}
