//! Point-wise errors, normalized dynamic time warping, irregularity measures
//! and great-circle length estimates.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::traj::{NormStats, Point};

fn check_pair(pred: &[Point], truth: &[Point]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(shape(format!("{} predicted vs {} true points", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(invalid("error metrics need at least one point"));
    }
    Ok(())
}

/// Mean squared error over points and both coordinates.
pub fn mse(pred: &[Point], truth: &[Point]) -> Result<f64> {
    check_pair(pred, truth)?;
    let s: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2))
        .sum();
    Ok(s / (2 * pred.len()) as f64)
}

/// Mean absolute error over points and both coordinates.
pub fn mae(pred: &[Point], truth: &[Point]) -> Result<f64> {
    check_pair(pred, truth)?;
    let s: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p[0] - t[0]).abs() + (p[1] - t[1]).abs())
        .sum();
    Ok(s / (2 * pred.len()) as f64)
}

pub fn euclid(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Divisor applied to the optimal warping cost.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NdtwNorm {
    /// Number of cells on the optimal path (shortest among equal-cost paths).
    PathLength,
    /// `max(|pred|, |truth|)`.
    MaxLength,
}

impl NdtwNorm {
    pub fn name(&self) -> &'static str {
        match self {
            NdtwNorm::PathLength => "path_length",
            NdtwNorm::MaxLength => "max_length",
        }
    }
}

impl FromStr for NdtwNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "path_length" => Ok(NdtwNorm::PathLength),
            "max_length" => Ok(NdtwNorm::MaxLength),
            _ => Err(invalid(format!("unknown NDTW normalization {s:?}"))),
        }
    }
}

/// Optimal DTW cost and the length of the shortest optimal warping path.
pub fn dtw(pred: &[Point], truth: &[Point]) -> Result<(f64, usize)> {
    if pred.is_empty() || truth.is_empty() {
        return Err(invalid("DTW needs two non-empty sequences"));
    }
    let (n, m) = (pred.len(), truth.len());
    let mut cost = vec![(f64::INFINITY, 0usize); n * m];
    for i in 0..n {
        for j in 0..m {
            let c = euclid(pred[i], truth[j]);
            let best = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut b = (f64::INFINITY, usize::MAX);
                let mut consider = |p: (f64, usize)| {
                    if p.0 < b.0 || (p.0 == b.0 && p.1 < b.1) {
                        b = p;
                    }
                };
                if i > 0 {
                    consider(cost[(i - 1) * m + j]);
                }
                if j > 0 {
                    consider(cost[i * m + j - 1]);
                }
                if i > 0 && j > 0 {
                    consider(cost[(i - 1) * m + j - 1]);
                }
                b
            };
            cost[i * m + j] = (best.0 + c, best.1 + 1);
        }
    }
    Ok(cost[n * m - 1])
}

/// DTW cost with Euclidean point distance, normalized per `norm`.
pub fn ndtw(pred: &[Point], truth: &[Point], norm: NdtwNorm) -> Result<f64> {
    let (c, len) = dtw(pred, truth)?;
    Ok(match norm {
        NdtwNorm::PathLength => c / len as f64,
        NdtwNorm::MaxLength => c / pred.len().max(truth.len()) as f64,
    })
}

fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// `(spatial_std, temporal_std)`: population standard deviations of
/// consecutive point distances and of sample intervals.
pub fn irregularity(points: &[Point], times: &[f64]) -> Result<(f64, f64)> {
    if points.len() != times.len() {
        return Err(shape("points and times differ in length"));
    }
    if points.len() < 2 {
        return Err(invalid("irregularity needs at least two points"));
    }
    let d: Vec<f64> = points.windows(2).map(|w| euclid(w[0], w[1])).collect();
    let dt: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    Ok((population_std(&d), population_std(&dt)))
}

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Great-circle distance in km between `(lon, lat)` points in degrees.
pub fn haversine_km(a: Point, b: Point) -> f64 {
    let (lon1, lat1) = (a[0].to_radians(), a[1].to_radians());
    let (lon2, lat2) = (b[0].to_radians(), b[1].to_radians());
    let h = ((lat2 - lat1) / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * ((lon2 - lon1) / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Average speed in m/s and travelled distance in km of a normalized
/// trajectory, measured after undoing the normalization.
pub fn speed_and_distance(points: &[Point], times: &[f64], norm: &NormStats) -> Result<(f64, f64)> {
    if points.len() != times.len() {
        return Err(shape("points and times differ in length"));
    }
    if points.len() < 2 {
        return Err(invalid("speed and distance need at least two points"));
    }
    let raw: Vec<Point> = points.iter().map(|&p| norm.coords.invert(p)).collect();
    let km: f64 = raw.windows(2).map(|w| haversine_km(w[0], w[1])).sum();
    let secs = norm.time.invert(times[times.len() - 1]) - norm.time.invert(times[0]);
    if !(secs > 0.0) {
        return Err(Error::Degenerate("trajectory spans no time".into()));
    }
    Ok((km * 1000.0 / secs, km))
}

/// Assigns each value to one of `bins` quantile bins (0-based). Every value
/// lands in exactly one bin; ties share a bin.
pub fn quantile_bins(values: &[f64], bins: usize) -> Result<Vec<usize>> {
    if bins == 0 {
        return Err(invalid("need at least one bin"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("binning input".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let edges: Vec<f64> = (1..bins).map(|k| sorted[(k * n / bins).min(n.saturating_sub(1))]).collect();
    Ok(values
        .iter()
        .map(|v| edges.iter().filter(|&&e| *v >= e).count())
        .collect())
}
