use std::fs;
use std::path::Path;

use anyhow::{bail, Result};
use serde_json::json;
use trajrec_core::checkpoint::Checkpoint;
use trajrec_core::dataset::{fit_coords, prepare, read_jsonl, with_contexts, Record};
use trajrec_core::diffusion::{NoiseSchedule, ScheduleShape, ScheduleSpec};
use trajrec_core::net::{ArchConfig, ModelParams};
use trajrec_core::optim::{Adam, AdamConfig};
use trajrec_core::rng::stream;
use trajrec_core::training::{IterationLog, TrainConfig, TrainSample, Trainer};
use trajrec_core::traj::TargetSpace;

use crate::args::{data_path, TargetArg, TrainArgs};
use crate::commands::recover::split_spec;
use crate::report::{f, read_csv, write_manifest, Csv, Provenance};

pub const LOSS_COLUMNS: [&str; 5] = ["iteration", "mean_loss", "mean_t", "wall_seconds", "grad_norm"];

fn loss_row(r: &IterationLog) -> Vec<String> {
    vec![
        r.iteration.to_string(),
        f(r.mean_loss),
        f(r.mean_t),
        f(r.wall_seconds),
        f(r.grad_norm),
    ]
}

/// Rows of an earlier trace up to and including `upto`.
fn earlier_rows(path: &Path, upto: usize) -> Result<Vec<Vec<String>>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let (header, rows) = read_csv(path)?;
    if header != LOSS_COLUMNS {
        return Ok(Vec::new());
    }
    Ok(rows
        .into_iter()
        .filter(|r| r[0].parse::<usize>().is_ok_and(|i| i <= upto))
        .collect())
}

pub fn run(a: &TrainArgs, prov: &Provenance) -> Result<()> {
    let records: Vec<Record> = read_jsonl(&data_path(&a.data))?
        .into_iter()
        .filter(Record::is_dense)
        .collect();
    if records.is_empty() {
        return Err(trajrec_core::Error::Invalid("training needs at least one dense trajectory".into()).into());
    }
    let config = TrainConfig {
        segment_steps: a.segment_steps,
        advance: a.advance,
        batch_size: a.batch_size,
        scheme: a.batch_scheme,
        adam: AdamConfig {
            learning_rate: a.lr,
            clip_norm: a.clip_norm,
            ..AdamConfig::default()
        },
        iterations: 0,
        loss_scope: a.loss_scope,
        seed: a.seed,
        workers: a.workers,
    };
    let (params, optimizer, schedule, coords, start) = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if a.no_spdm && ck.params.config().state_propagation {
                bail!("--no-spdm conflicts with a checkpoint trained with state propagation");
            }
            let coords = match ck.coords {
                Some(c) => c,
                None => fit_coords(&records)?,
            };
            let opt = ck.optimizer.unwrap_or_else(|| Adam::new(config.adam, ck.params.tensors()));
            (ck.params, opt, ck.schedule, coords, ck.train_step)
        }
        None => {
            let coords = fit_coords(&records)?;
            let target = match a.target {
                TargetArg::Absolute => TargetSpace::Absolute,
                TargetArg::PriorResidual => {
                    let tasks = records
                        .iter()
                        .map(|r| Ok(prepare(r, &coords, &split_spec(&a.split), false)?.task))
                        .collect::<trajrec_core::Result<Vec<_>>>()?;
                    TargetSpace::fit_residual(&tasks)?
                }
            };
            let arch = ArchConfig {
                blocks: a.blocks,
                base_channels: a.base_channels,
                channel_multipliers: (0..a.blocks).map(|i| 1 << i).collect(),
                kernel_size: a.kernel_size,
                step_embed_dim: a.step_embed_dim,
                contexts: Vec::new(),
                seq_len: records[0].times.len(),
                state_propagation: !a.no_spdm,
                target,
            };
            let arch = if a.no_contexts { arch } else { with_contexts(arch, &records, 1) };
            let params = ModelParams::<f32>::init(&arch, &mut stream(a.seed, "init", 0))?;
            let opt = Adam::new(config.adam, params.tensors());
            let schedule = ScheduleSpec {
                steps: a.diffusion_steps,
                beta_start: a.beta_start,
                beta_end: a.beta_end,
                shape: ScheduleShape::Linear,
            };
            (params, opt, schedule, coords, 0)
        }
    };
    let use_ctx = !params.config().contexts.is_empty();
    let spec = split_spec(&a.split);
    let target = params.config().target;
    let samples = records
        .iter()
        .map(|r| TrainSample::from_task(&prepare(r, &coords, &spec, use_ctx)?.task, target))
        .collect::<trajrec_core::Result<Vec<_>>>()?;
    let sched = NoiseSchedule::new(schedule)?;
    let config = TrainConfig {
        iterations: start + a.iterations,
        ..config
    };

    fs::create_dir_all(&a.out)?;
    let loss_path = a.out.join("loss.csv");
    let mut rows = if a.resume.is_some() { earlier_rows(&loss_path, start)? } else { Vec::new() };
    let mut tr = Trainer::resume(params, optimizer, samples, sched, config.clone(), start)?;
    let snapshot = |tr: &Trainer<f32>| Checkpoint {
        params: tr.params.clone(),
        schedule,
        train_step: tr.iteration(),
        coords: Some(coords),
        train_config: Some(tr.config.clone()),
        optimizer: Some(tr.optimizer.clone()),
    };
    let every = a.checkpoint_every;
    let log_every = a.log_every;
    let log = tr.run(|tr, row| {
        if log_every > 0 && row.iteration % log_every == 0 {
            eprintln!(
                "iteration {}: mean loss {:.5} mean t {:.1} ({:.1}s)",
                row.iteration, row.mean_loss, row.mean_t, row.wall_seconds
            );
        }
        if every > 0 && row.iteration % every == 0 {
            snapshot(tr).save(&a.out.join(format!("ckpt_{}.ckpt", row.iteration)))?;
        }
        Ok(())
    })?;
    rows.extend(log.iter().map(loss_row));

    let mut csv = Csv::new(prov, &[], &LOSS_COLUMNS);
    for r in &rows {
        csv.row(r);
    }
    csv.write(&loss_path)?;
    snapshot(&tr).save(&a.out.join("model.ckpt"))?;
    fs::write(a.out.join("norm.json"), serde_json::to_string_pretty(&coords)? + "\n")?;
    write_manifest(
        &a.out.join("manifest.json"),
        prov,
        json!({
            "arch": tr.params.config(),
            "schedule": schedule,
            "train_config": tr.config,
            "split": spec,
            "trajectories": records.len(),
            "start_iteration": start,
            "final_iteration": tr.iteration(),
        }),
    )?;
    if let Some(last) = log.last() {
        eprintln!(
            "iteration {}: mean loss {:.5} ({:.1}s)",
            last.iteration, last.mean_loss, last.wall_seconds
        );
    }
    Ok(())
}
