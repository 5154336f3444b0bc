use anyhow::Result;
use trajrec_core::dataset::{fit_coords, prepare, Record, SparsifySpec};
use trajrec_core::metrics::quantile_bins;
use trajrec_core::net::ModelParams;
use trajrec_core::rng::derive_seed;
use trajrec_core::sampling::SamplerMode;
use trajrec_core::synth::{generate, GenParams};
use trajrec_core::traj::{CoordStats, RecoveryTask};

use crate::args::{BenchArgs, IrregularityAxis, ModeArg, Sweep};
use crate::commands::recover::{load_model, method_for};
use crate::pipeline::{mean_scores, run_method, score, Method, Scores};
use crate::report::{f, Csv, Provenance};

pub const LENGTHS: [usize; 4] = [64, 128, 256, 512];
pub const ERASE_RATIOS: [f64; 4] = [0.3, 0.5, 0.7, 0.9];
pub const KNOBS: [f64; 4] = [0.0, 1.0, 2.0, 4.0];
pub const STEP_GRID: [usize; 4] = [500, 51, 26, 11];

pub const BENCH_COLUMNS: [&str; 13] = [
    "sweep",
    "param",
    "bin_lo",
    "bin_hi",
    "method",
    "mode",
    "n_steps",
    "use_state",
    "tasks",
    "mse",
    "mae",
    "ndtw",
    "wall_seconds",
];

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub sweep: &'static str,
    pub param: String,
    pub bin: Option<(f64, f64)>,
    pub method: &'static str,
    pub mode: &'static str,
    pub n_steps: usize,
    pub use_state: bool,
    pub tasks: usize,
    pub scores: Scores,
    pub wall_seconds: f64,
}

struct Data {
    tasks: Vec<RecoveryTask>,
    truth: Vec<Vec<[f64; 2]>>,
}

struct Env<'a> {
    a: &'a BenchArgs,
    model: Option<ModelParams<f32>>,
    coords: Option<CoordStats>,
}

impl Env<'_> {
    fn data(&self, grid: u64, len: usize, erase: f64, knob: f64) -> Result<Data> {
        let dense = generate(
            self.a.n,
            len,
            self.a.style,
            &GenParams::default(),
            derive_seed(self.a.seed, "bench-data", grid),
        )?;
        let records: Vec<Record> = dense.iter().map(Record::from).collect();
        let coords = match self.coords {
            Some(c) => c,
            None => fit_coords(&records)?,
        };
        let spec = SparsifySpec {
            erase_ratio: erase,
            knob,
            seed: derive_seed(self.a.seed, "bench-split", grid),
        };
        let ctx = self.model.as_ref().is_some_and(|m| !m.config().contexts.is_empty());
        let mut tasks = Vec::new();
        let mut truth = Vec::new();
        for r in &records {
            tasks.push(prepare(r, &coords, &spec, ctx)?.task);
            truth.push(r.points().into_iter().map(|p| coords.apply(p)).collect());
        }
        Ok(Data { tasks, truth })
    }

    fn methods(&self, sched: &trajrec_core::diffusion::NoiseSchedule) -> Result<Vec<Method>> {
        let mut out = vec![Method::Lerp];
        if let Some(m) = &self.model {
            let mode = if self.a.mode == ModeArg::Lerp { ModeArg::Ddim } else { self.a.mode };
            let steps = if mode == ModeArg::Ddpm { None } else { Some(self.a.steps) };
            if m.config().state_propagation {
                out.push(method_for(mode, steps, true, sched)?);
            }
            out.push(method_for(mode, steps, false, sched)?);
        }
        Ok(out)
    }

    /// Scores of every task under `method`, plus total wall time.
    fn evaluate(&self, d: &Data, method: &Method, sched: &trajrec_core::diffusion::NoiseSchedule) -> Result<(Vec<Scores>, f64)> {
        let out = run_method(
            &d.tasks,
            method,
            self.model.as_ref(),
            sched,
            self.a.seed,
            self.a.batch_size,
            self.a.workers,
        )?;
        let scores = out
            .merged
            .iter()
            .zip(&d.truth)
            .map(|(m, t)| score(m, t, self.a.ndtw_norm))
            .collect::<trajrec_core::Result<Vec<_>>>()?;
        Ok((scores, out.wall_seconds()))
    }
}

fn row(sweep: &'static str, param: String, bin: Option<(f64, f64)>, m: &Method, s: &[Scores], wall: f64) -> BenchRow {
    BenchRow {
        sweep,
        param,
        bin,
        method: m.label(),
        mode: m.mode_name(),
        n_steps: m.n_steps(),
        use_state: m.use_state(),
        tasks: s.len(),
        scores: mean_scores(s),
        wall_seconds: wall,
    }
}

pub fn sweep_rows(a: &BenchArgs) -> Result<Vec<BenchRow>> {
    let (model, sched, coords) = load_model(a.ckpt.as_deref())?;
    let env = Env { a, model, coords };
    let methods = env.methods(&sched)?;
    let mut rows = Vec::new();
    match a.sweep {
        Sweep::Length => {
            for (g, &len) in LENGTHS.iter().enumerate() {
                let d = env.data(g as u64, len, a.erase_ratio, 0.0)?;
                for m in &methods {
                    let (s, w) = env.evaluate(&d, m, &sched)?;
                    rows.push(row("length", len.to_string(), None, m, &s, w));
                }
            }
        }
        Sweep::Sparsity => {
            for (g, &e) in ERASE_RATIOS.iter().enumerate() {
                let d = env.data(g as u64, a.length, e, 0.0)?;
                for m in &methods {
                    let (s, w) = env.evaluate(&d, m, &sched)?;
                    rows.push(row("sparsity", f(e), None, m, &s, w));
                }
            }
        }
        Sweep::Irregularity => {
            let mut all = Data {
                tasks: Vec::new(),
                truth: Vec::new(),
            };
            for (g, &k) in KNOBS.iter().enumerate() {
                let d = env.data(g as u64, a.length, a.erase_ratio, k)?;
                all.tasks.extend(d.tasks);
                all.truth.extend(d.truth);
            }
            for m in &methods {
                let (s, w) = env.evaluate(&all, m, &sched)?;
                let axis: Vec<f64> = s
                    .iter()
                    .map(|x| match a.irregularity {
                        IrregularityAxis::Spatial => x.spatial_std,
                        IrregularityAxis::Temporal => x.temporal_std,
                    })
                    .collect();
                let bins = quantile_bins(&axis, a.bins)?;
                for b in 0..a.bins {
                    let members: Vec<usize> = (0..s.len()).filter(|&i| bins[i] == b).collect();
                    if members.is_empty() {
                        continue;
                    }
                    let vals: Vec<f64> = members.iter().map(|&i| axis[i]).collect();
                    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let sub: Vec<Scores> = members.iter().map(|&i| s[i]).collect();
                    let share = w * sub.len() as f64 / s.len() as f64;
                    rows.push(row("irregularity", b.to_string(), Some((lo, hi)), m, &sub, share));
                }
            }
        }
        Sweep::Steps => {
            let d = env.data(0, a.length, a.erase_ratio, 0.0)?;
            let t = sched.steps();
            let (s, w) = env.evaluate(&d, &Method::Lerp, &sched)?;
            rows.push(row("steps", "0".into(), None, &Method::Lerp, &s, w));
            if let Some(m) = &env.model {
                let mut grid: Vec<usize> = STEP_GRID.iter().map(|&n| if n == 500 { t } else { n.min(t) }).collect();
                grid.dedup();
                let states: &[bool] = if m.config().state_propagation { &[true, false] } else { &[false] };
                for &n in &grid {
                    let mode = if n == t { SamplerMode::Ddpm } else { SamplerMode::Ddim };
                    for &st in states {
                        let method = Method::model(mode, t, n, st)?;
                        let (s, w) = env.evaluate(&d, &method, &sched)?;
                        rows.push(row("steps", n.to_string(), None, &method, &s, w));
                    }
                }
            }
        }
    }
    Ok(rows)
}

pub fn run(a: &BenchArgs, prov: &Provenance) -> Result<()> {
    let rows = sweep_rows(a)?;
    let mut csv = Csv::new(
        prov,
        &[("ndtw_norm", a.ndtw_norm.name().into()), ("style", a.style.name().into())],
        &BENCH_COLUMNS,
    );
    for r in &rows {
        let (lo, hi) = r.bin.map(|(l, h)| (f(l), f(h))).unwrap_or_default();
        csv.row(&[
            r.sweep.into(),
            r.param.clone(),
            lo,
            hi,
            r.method.into(),
            r.mode.into(),
            r.n_steps.to_string(),
            r.use_state.to_string(),
            r.tasks.to_string(),
            f(r.scores.mse),
            f(r.scores.mae),
            f(r.scores.ndtw),
            f(r.wall_seconds),
        ]);
    }
    csv.write(&a.out)?;
    eprintln!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(())
}
