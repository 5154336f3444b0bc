//! Trajectory domain types: timestamp merging, masking, the interpolation
//! prior, normalization and assembly of the conditioning tensor.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};

/// A 2D point: normalized (or raw) longitude and latitude.
pub type Point = [f64; 2];

/// Strictly increasing timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct TimestampSeq(Vec<f64>);

impl TimestampSeq {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("timestamp sequence is empty"));
        }
        Self::check(&values)?;
        Ok(TimestampSeq(values))
    }

    /// The empty sequence, used for recovery tasks without queries.
    pub fn empty() -> Self {
        TimestampSeq(Vec::new())
    }

    /// Like [`TimestampSeq::new`] but an empty input yields [`TimestampSeq::empty`].
    pub fn new_or_empty(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            Ok(Self::empty())
        } else {
            Self::new(values)
        }
    }

    fn check(values: &[f64]) -> Result<()> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("timestamp {v}")));
        }
        if let Some(w) = values.windows(2).find(|w| w[0] >= w[1]) {
            return Err(invalid(format!(
                "timestamps must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Points aligned one-to-one with a [`TimestampSeq`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySeq(Vec<Point>);

impl TrajectorySeq {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("trajectory coordinate".into()));
        }
        Ok(TrajectorySeq(points))
    }

    pub fn points(&self) -> &[Point] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_points(self) -> Vec<Point> {
        self.0
    }
}

/// Kinds of auxiliary context a trajectory may carry.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextKind {
    AgentId,
    StartTime,
    Weekday,
    Duration,
    Custom(String),
}

impl ContextKind {
    pub fn label(&self) -> String {
        match self {
            ContextKind::AgentId => "agent_id".into(),
            ContextKind::StartTime => "start_time".into(),
            ContextKind::Weekday => "weekday".into(),
            ContextKind::Duration => "duration".into(),
            ContextKind::Custom(name) => format!("custom:{name}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ContextPayload {
    /// Index into a lookup table.
    Categorical(usize),
    Scalar(f64),
    Vector(Vec<f64>),
}

impl ContextPayload {
    pub fn width(&self) -> usize {
        match self {
            ContextPayload::Categorical(_) | ContextPayload::Scalar(_) => 1,
            ContextPayload::Vector(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Context {
    pub kind: ContextKind,
    pub payload: ContextPayload,
}

/// One sparse observation plus the timestamps to fill in.
#[derive(Clone, Debug)]
pub struct RecoveryTask {
    pub observed_times: TimestampSeq,
    pub observed_points: TrajectorySeq,
    pub query_times: TimestampSeq,
    pub contexts: Vec<Context>,
    pub ground_truth: Option<TrajectorySeq>,
}

impl RecoveryTask {
    pub fn new(
        observed_times: TimestampSeq,
        observed_points: TrajectorySeq,
        query_times: TimestampSeq,
        contexts: Vec<Context>,
        ground_truth: Option<TrajectorySeq>,
    ) -> Result<Self> {
        if observed_times.len() != observed_points.len() {
            return Err(shape(format!(
                "{} observed times but {} observed points",
                observed_times.len(),
                observed_points.len()
            )));
        }
        if let Some(gt) = &ground_truth {
            if gt.len() != query_times.len() {
                return Err(shape(format!(
                    "{} query times but {} ground-truth points",
                    query_times.len(),
                    gt.len()
                )));
            }
        }
        if let Some(t) = first_shared(observed_times.values(), query_times.values()) {
            return Err(Error::DuplicateTime(t));
        }
        Ok(RecoveryTask {
            observed_times,
            observed_points,
            query_times,
            contexts,
            ground_truth,
        })
    }

    /// Merges observation and queries, with the query slots prefilled by
    /// `query_init`.
    pub fn merge_with(&self, query_init: &TrajectorySeq) -> Result<MergedSequence> {
        merge(
            &self.observed_times,
            &self.query_times,
            &self.observed_points,
            query_init,
        )
    }

    /// Merges with the ground truth in the query slots.
    pub fn merge_truth(&self) -> Result<MergedSequence> {
        let gt = self
            .ground_truth
            .as_ref()
            .ok_or_else(|| invalid("task has no ground truth"))?;
        self.merge_with(gt)
    }

    pub fn merged_len(&self) -> usize {
        self.observed_times.len() + self.query_times.len()
    }
}

fn first_shared(a: &[f64], b: &[f64]) -> Option<f64> {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] == b[j] {
            return Some(a[i]);
        }
        if a[i] < b[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    None
}

/// Chronological merge of observed and query timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedSequence {
    pub times: TimestampSeq,
    pub points: TrajectorySeq,
    /// `true` where the position originates from the query set.
    pub mask: Vec<bool>,
    pub lerp_points: TrajectorySeq,
}

impl MergedSequence {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn query_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Indices of query positions in merged order.
    pub fn query_indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&k| self.mask[k]).collect()
    }

    /// Observed `(times, points)` read back from the mask=0 positions.
    pub fn observed(&self) -> (Vec<f64>, Vec<Point>) {
        let mut t = Vec::new();
        let mut p = Vec::new();
        for k in 0..self.len() {
            if !self.mask[k] {
                t.push(self.times.values()[k]);
                p.push(self.points.points()[k]);
            }
        }
        (t, p)
    }

    /// Points at the query positions, in time order.
    pub fn query_points(&self) -> Vec<Point> {
        self.query_indices()
            .into_iter()
            .map(|k| self.points.points()[k])
            .collect()
    }
}

/// Interleaves `(S, τS)` and `(Q, τQ_init)` by time.
pub fn merge(
    observed_times: &TimestampSeq,
    query_times: &TimestampSeq,
    observed_points: &TrajectorySeq,
    query_init: &TrajectorySeq,
) -> Result<MergedSequence> {
    if observed_times.len() != observed_points.len() {
        return Err(shape("observed times and points differ in length"));
    }
    if query_times.len() != query_init.len() {
        return Err(shape(format!(
            "{} query times but {} query points",
            query_times.len(),
            query_init.len()
        )));
    }
    let s = observed_times.values();
    let q = query_times.values();
    let total = s.len() + q.len();
    let mut times = Vec::with_capacity(total);
    let mut points = Vec::with_capacity(total);
    let mut mask = Vec::with_capacity(total);
    let (mut i, mut j) = (0, 0);
    while i < s.len() || j < q.len() {
        let take_obs = match (s.get(i), q.get(j)) {
            (Some(a), Some(b)) if a == b => return Err(Error::DuplicateTime(*a)),
            (Some(a), Some(b)) => a < b,
            (Some(_), None) => true,
            _ => false,
        };
        if take_obs {
            times.push(s[i]);
            points.push(observed_points.points()[i]);
            mask.push(false);
            i += 1;
        } else {
            times.push(q[j]);
            points.push(query_init.points()[j]);
            mask.push(true);
            j += 1;
        }
    }
    let times = TimestampSeq::new_or_empty(times)?;
    let lerp = interpolate(times.values(), &points, &mask)?;
    Ok(MergedSequence {
        times,
        points: TrajectorySeq(points),
        mask,
        lerp_points: TrajectorySeq(lerp),
    })
}

/// Linear-interpolation prior over the merged sequence.
///
/// Query positions take the time-weighted interpolation of the nearest
/// observed neighbours; queries outside the observed span are clamped to the
/// closest observed point.
pub fn lerp_fill(merged: &MergedSequence) -> Result<TrajectorySeq> {
    interpolate(merged.times.values(), merged.points.points(), &merged.mask).map(TrajectorySeq)
}

fn interpolate(times: &[f64], points: &[Point], mask: &[bool]) -> Result<Vec<Point>> {
    if mask.is_empty() {
        return Ok(Vec::new());
    }
    if mask.iter().all(|&m| m) {
        return Err(invalid("no observed points to interpolate from"));
    }
    let n = mask.len();
    let mut prev: Vec<Option<usize>> = vec![None; n];
    let mut last = None;
    for k in 0..n {
        if !mask[k] {
            last = Some(k);
        }
        prev[k] = last;
    }
    let mut next: Vec<Option<usize>> = vec![None; n];
    last = None;
    for k in (0..n).rev() {
        if !mask[k] {
            last = Some(k);
        }
        next[k] = last;
    }
    let out = (0..n)
        .map(|k| {
            if !mask[k] {
                return points[k];
            }
            match (prev[k], next[k]) {
                (Some(a), Some(b)) => {
                    let w = (times[k] - times[a]) / (times[b] - times[a]);
                    [
                        points[a][0] + w * (points[b][0] - points[a][0]),
                        points[a][1] + w * (points[b][1] - points[a][1]),
                    ]
                }
                (Some(a), None) => points[a],
                (None, Some(b)) => points[b],
                (None, None) => unreachable!("at least one observed point exists"),
            }
        })
        .collect();
    Ok(out)
}

/// Dataset-level coordinate statistics used for z-scoring.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordStats {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl CoordStats {
    /// Population mean and standard deviation per axis.
    pub fn fit<'a>(points: impl IntoIterator<Item = &'a Point>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = [0.0; 2];
        let pts: Vec<&Point> = points.into_iter().collect();
        for p in &pts {
            sum[0] += p[0];
            sum[1] += p[1];
            n += 1;
        }
        if n < 2 {
            return Err(invalid("need at least two points to fit coordinate statistics"));
        }
        let mean = [sum[0] / n as f64, sum[1] / n as f64];
        let mut var = [0.0; 2];
        for p in &pts {
            var[0] += (p[0] - mean[0]).powi(2);
            var[1] += (p[1] - mean[1]).powi(2);
        }
        let std = [(var[0] / n as f64).sqrt(), (var[1] / n as f64).sqrt()];
        for (axis, s) in std.iter().enumerate() {
            if !(*s > 0.0) {
                return Err(Error::Degenerate(format!("zero spread on axis {axis}")));
            }
        }
        Ok(CoordStats { mean, std })
    }

    pub fn apply(&self, p: Point) -> Point {
        [
            (p[0] - self.mean[0]) / self.std[0],
            (p[1] - self.mean[1]) / self.std[1],
        ]
    }

    pub fn invert(&self, p: Point) -> Point {
        [
            p[0] * self.std[0] + self.mean[0],
            p[1] * self.std[1] + self.mean[1],
        ]
    }
}

/// Affine map of one trajectory's timestamps onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSpan {
    pub start: f64,
    pub span: f64,
}

impl TimeSpan {
    pub fn apply(&self, t: f64) -> f64 {
        (t - self.start) / self.span
    }

    pub fn invert(&self, t: f64) -> f64 {
        t * self.span + self.start
    }
}

/// Everything needed to undo [`normalize`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub coords: CoordStats,
    pub time: TimeSpan,
}

/// Normalizes one trajectory, fitting coordinate statistics on its own points.
pub fn normalize(points: &[Point], times: &[f64]) -> Result<(TrajectorySeq, TimestampSeq, NormStats)> {
    let coords = CoordStats::fit(points)?;
    normalize_with(points, times, &coords)
}

/// Normalizes one trajectory against dataset-level coordinate statistics.
pub fn normalize_with(
    points: &[Point],
    times: &[f64],
    coords: &CoordStats,
) -> Result<(TrajectorySeq, TimestampSeq, NormStats)> {
    if points.len() < 2 {
        return Err(invalid("normalization needs at least two points"));
    }
    if points.len() != times.len() {
        return Err(shape("points and times differ in length"));
    }
    let raw = TimestampSeq::new(times.to_vec())?;
    let start = raw.values()[0];
    let span = raw.values()[raw.len() - 1] - start;
    let time = TimeSpan { start, span };
    let mut scaled: Vec<f64> = raw.values().iter().map(|&t| time.apply(t)).collect();
    // Pin the endpoints exactly.
    scaled[0] = 0.0;
    *scaled.last_mut().unwrap() = 1.0;
    let pts = points.iter().map(|&p| coords.apply(p)).collect();
    Ok((
        TrajectorySeq::new(pts)?,
        TimestampSeq::new(scaled)?,
        NormStats {
            coords: *coords,
            time,
        },
    ))
}

/// Inverse of [`normalize`].
pub fn denormalize(points: &TrajectorySeq, times: &TimestampSeq, stats: &NormStats) -> (Vec<Point>, Vec<f64>) {
    (
        points.points().iter().map(|&p| stats.coords.invert(p)).collect(),
        times.values().iter().map(|&t| stats.time.invert(t)).collect(),
    )
}

/// What the diffusion process runs over for the query block.
///
/// `Absolute` diffuses the normalized query coordinates themselves.
/// `PriorResidual` diffuses `(x - lerp) / scale`, the offset of each query
/// point from the interpolation prior. Either way the point channel carries
/// the diffused block itself at query positions; the prior is visible to the
/// network through the lerp channel. See [`TargetSpace::observed_channel`]
/// for what the point channel holds at observed positions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TargetSpace {
    #[default]
    Absolute,
    PriorResidual { scale: f64 },
}

impl TargetSpace {
    pub fn name(&self) -> &'static str {
        match self {
            TargetSpace::Absolute => "absolute",
            TargetSpace::PriorResidual { .. } => "prior_residual",
        }
    }

    /// Per-entry offsets `[x_0, y_0, ...]` and the common scale for a query
    /// block whose interpolation prior is `lerp`.
    pub fn offset_scale(&self, lerp: &[Point]) -> (Vec<f64>, f64) {
        match *self {
            TargetSpace::Absolute => (vec![0.0; 2 * lerp.len()], 1.0),
            TargetSpace::PriorResidual { scale } => (lerp.iter().flat_map(|p| [p[0], p[1]]).collect(), scale),
        }
    }

    /// Point-channel values at the observed positions of `merged`. In residual
    /// space each observed point is replaced by its offset from the chord
    /// between its observed neighbours, over `scale` (zero at either end), so
    /// observed and query positions share one frame.
    pub fn observed_channel(&self, merged: &MergedSequence) -> Vec<(usize, Point)> {
        let obs: Vec<usize> = (0..merged.len()).filter(|&k| !merged.mask[k]).collect();
        let (t, p) = (merged.times.values(), merged.points.points());
        match *self {
            TargetSpace::Absolute => obs.iter().map(|&k| (k, p[k])).collect(),
            TargetSpace::PriorResidual { scale } => obs
                .iter()
                .enumerate()
                .map(|(n, &k)| {
                    if n == 0 || n + 1 == obs.len() {
                        return (k, [0.0, 0.0]);
                    }
                    let (i, j) = (obs[n - 1], obs[n + 1]);
                    let w = (t[k] - t[i]) / (t[j] - t[i]);
                    let chord = |c: usize| p[i][c] + w * (p[j][c] - p[i][c]);
                    (k, [(p[k][0] - chord(0)) / scale, (p[k][1] - chord(1)) / scale])
                })
                .collect(),
        }
    }

    /// Residual space scaled by the RMS offset of the ground truth from the
    /// prior over `tasks`.
    pub fn fit_residual<'a>(tasks: impl IntoIterator<Item = &'a RecoveryTask>) -> Result<Self> {
        let (mut sum, mut n) = (0.0, 0usize);
        for task in tasks {
            let m = task.merge_truth()?;
            for k in m.query_indices() {
                let (p, l) = (m.points.points()[k], m.lerp_points.points()[k]);
                sum += (p[0] - l[0]).powi(2) + (p[1] - l[1]).powi(2);
                n += 2;
            }
        }
        let scale = (sum / n.max(1) as f64).sqrt();
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Degenerate("ground truth matches the interpolation prior exactly".into()));
        }
        Ok(TargetSpace::PriorResidual { scale })
    }
}

/// Consecutive sample intervals `s[i+1] - s[i]`.
pub fn sample_intervals(times: &TimestampSeq) -> Result<Vec<f64>> {
    if times.len() < 2 {
        return Err(invalid("sample intervals need at least two timestamps"));
    }
    Ok(times.values().windows(2).map(|w| w[1] - w[0]).collect())
}

/// A learned or precomputed `L × d` sequential feature.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBlock {
    pub name: String,
    pub dim: usize,
    /// Row-major `L × dim`.
    pub data: Vec<f64>,
}

/// Named channel ranges of the conditioning tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelMap {
    pub ranges: Vec<(String, Range<usize>)>,
}

/// Fixed channel order of the conditioning tensor. Bumped whenever the order
/// changes; recorded in checkpoints.
pub const CHANNEL_ORDER_VERSION: u32 = 1;
pub const BASE_CHANNELS: [(&str, usize); 4] = [("points", 2), ("time", 1), ("mask", 1), ("lerp", 2)];
/// Width of the fixed (non-embedding) part of the conditioning tensor.
pub const BASE_WIDTH: usize = 6;

impl ChannelMap {
    pub fn range(&self, name: &str) -> Option<Range<usize>> {
        self.ranges
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r.clone())
    }

    pub fn names(&self) -> Vec<String> {
        self.ranges.iter().map(|(n, _)| n.clone()).collect()
    }
}

/// `L × D` conditioning tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionTensor {
    pub len: usize,
    pub width: usize,
    /// Row-major `L × D`.
    pub data: Vec<f64>,
    pub channel_map: ChannelMap,
}

impl ConditionTensor {
    /// Copies out the `L × r.len()` block of a named range.
    pub fn extract(&self, name: &str) -> Option<Vec<f64>> {
        let r = self.channel_map.range(name)?;
        let mut out = Vec::with_capacity(self.len * r.len());
        for row in 0..self.len {
            out.extend_from_slice(&self.data[row * self.width + r.start..row * self.width + r.end]);
        }
        Some(out)
    }

    pub fn at(&self, row: usize, channel: usize) -> f64 {
        self.data[row * self.width + channel]
    }
}

/// Concatenates points, time, mask, interpolation prior and embeddings, in
/// that order, into the `L × D` conditioning tensor.
pub fn aggregate(merged: &MergedSequence, embeddings: &[EmbeddingBlock]) -> Result<ConditionTensor> {
    let len = merged.len();
    for e in embeddings {
        if e.data.len() != len * e.dim {
            return Err(shape(format!(
                "embedding {} holds {} values, expected {}x{}",
                e.name,
                e.data.len(),
                len,
                e.dim
            )));
        }
    }
    let mut ranges = Vec::new();
    let mut off = 0;
    for (name, w) in BASE_CHANNELS {
        ranges.push((name.to_string(), off..off + w));
        off += w;
    }
    for e in embeddings {
        ranges.push((e.name.clone(), off..off + e.dim));
        off += e.dim;
    }
    let width = off;
    let mut data = Vec::with_capacity(len * width);
    for k in 0..len {
        let p = merged.points.points()[k];
        let l = merged.lerp_points.points()[k];
        data.extend_from_slice(&[
            p[0],
            p[1],
            merged.times.values()[k],
            if merged.mask[k] { 1.0 } else { 0.0 },
            l[0],
            l[1],
        ]);
        for e in embeddings {
            data.extend_from_slice(&e.data[k * e.dim..(k + 1) * e.dim]);
        }
    }
    Ok(ConditionTensor {
        len,
        width,
        data,
        channel_map: ChannelMap { ranges },
    })
}
