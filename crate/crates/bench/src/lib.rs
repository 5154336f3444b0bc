//! Fixtures shared by the benchmarks.

use trajrec_core::dataset::{fit_coords, prepare, Record, SparsifySpec};
use trajrec_core::synth::{generate, GenParams, Style};
use trajrec_core::traj::RecoveryTask;

/// `n` normalized half-erased taxi tasks of length `len`.
pub fn tasks(n: usize, len: usize, seed: u64) -> Vec<RecoveryTask> {
    let dense = generate(n, len, Style::TaxiSmooth, &GenParams::default(), seed).expect("generator");
    let records: Vec<Record> = dense.iter().map(Record::from).collect();
    let coords = fit_coords(&records).expect("coords");
    let spec = SparsifySpec {
        erase_ratio: 0.5,
        knob: 0.0,
        seed,
    };
    records
        .iter()
        .map(|r| prepare(r, &coords, &spec, false).expect("task").task)
        .collect()
}
