use anyhow::Result;
use serde_json::json;
use trajrec_core::dataset::{write_jsonl, Record};
use trajrec_core::synth::{generate, GenParams};

use crate::args::{data_path, GenDataArgs};
use crate::report::{manifest_path, write_manifest, Provenance};

pub fn run(a: &GenDataArgs, prov: &Provenance) -> Result<()> {
    let mut p = GenParams::default();
    if let Some(t) = a.max_turn_deg {
        p.max_turn_deg = t;
    }
    if let Some(n) = a.agents {
        p.agents = n;
    }
    let data = generate(a.n, a.length, a.style, &p, a.seed)?;
    let records: Vec<Record> = data.iter().map(Record::from).collect();
    let out = data_path(&a.out);
    crate::report::ensure_parent(&out)?;
    write_jsonl(&out, &records)?;
    write_manifest(
        &manifest_path(&out),
        prov,
        json!({
            "records": records.len(),
            "length": a.length,
            "style": a.style.name(),
            "params": p,
        }),
    )?;
    eprintln!("wrote {} trajectories to {}", records.len(), out.display());
    Ok(())
}
