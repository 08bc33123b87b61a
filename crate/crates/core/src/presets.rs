//! Built-in datasets and named presets.
//!
//! Presets can be overridden by JSON files in the directory named by
//! `FMO_PETASIM_PRESET_DIR` (`<dir>/<name>.json`).

use std::path::PathBuf;

use crate::calibrate::{read_records, TimingRecord};
use crate::cost::{CostParameters, MachineSpec};
use crate::error::{Error, Result};
use crate::sim::{ModuleBody, WorkflowModule, WorkflowSpec};
use crate::system::FragmentSystem;

pub const PRESET_DIR_ENV: &str = "FMO_PETASIM_PRESET_DIR";

/// IBM p5 (single node) and 16-CPU Xeon phase timings.
pub const PAPER_TABLES_CSV: &str = include_str!("../data/paper_tables.csv");

pub const PARAM_PRESETS: &[&str] = &["paper-tableIV"];
pub const MACHINE_PRESETS: &[&str] = &["ibm-p5-node", "xeon-16", "peta-2007"];
pub const WORKFLOW_PRESETS: &[&str] = &["lc-fmo-1cew", "monolithic-1cew"];
pub const SYSTEM_PRESETS: &[&str] = &["pair", "chain-20"];

const PAIR_JSON: &str = include_str!("../data/systems/pair.json");
const CHAIN_20_JSON: &str = include_str!("../data/systems/chain-20.json");

/// Reference node sustained rate, ~10 GF.
pub const REFERENCE_NODE_FLOPS: f64 = 1e10;

pub fn paper_records() -> Vec<TimingRecord> {
    read_records(PAPER_TABLES_CSV.as_bytes()).expect("bundled dataset parses")
}

fn override_path(name: &str) -> Option<PathBuf> {
    let dir = std::env::var_os(PRESET_DIR_ENV)?;
    let path = PathBuf::from(dir).join(format!("{name}.json"));
    path.is_file().then_some(path)
}

fn load_override<T: serde::de::DeserializeOwned>(name: &str) -> Result<Option<T>> {
    match override_path(name) {
        Some(path) => Ok(Some(serde_json::from_str(&std::fs::read_to_string(path)?)?)),
        None => Ok(None),
    }
}

pub fn params(name: &str) -> Result<CostParameters> {
    if let Some(p) = load_override::<CostParameters>(name)? {
        p.validate()?;
        return Ok(p);
    }
    match name {
        "paper-tableIV" => Ok(CostParameters::TABLE_IV),
        _ => Err(Error::UnknownPreset(name.to_string())),
    }
}

pub fn machine(name: &str) -> Result<MachineSpec> {
    if let Some(m) = load_override::<MachineSpec>(name)? {
        m.validate()?;
        return Ok(m);
    }
    let m = match name {
        "ibm-p5-node" => MachineSpec::new(1, 1.0)?.with_ref_flops(REFERENCE_NODE_FLOPS),
        "xeon-16" => MachineSpec::new(16, 0.071)?.with_ref_flops(REFERENCE_NODE_FLOPS),
        "peta-2007" => MachineSpec::new(10_000, 5.0)?.with_ref_flops(REFERENCE_NODE_FLOPS),
        _ => return Err(Error::UnknownPreset(name.to_string())),
    };
    Ok(m)
}

/// Per-module elapsed seconds of the 1cew run on 16 Xeon CPUs, GAMESS-FMO
/// column: initial guess, monomer, dimer, energy (listed as "< 1 s").
pub const MONOLITHIC_1CEW: [f64; 4] = [4.0, 3540.0, 7860.0, 0.5];
/// Same run, loosely-coupled column.
pub const LC_FMO_1CEW: [f64; 4] = [37.0, 4260.0, 8160.0, 4.0];
pub const LC_MODULES: [&str; 4] = ["run.ini", "run.mon", "run.dim", "run.tot"];

fn lc_chain(name: &str, bodies: [f64; 4], staging: [(f64, f64); 4]) -> WorkflowSpec {
    let modules: Vec<WorkflowModule> = LC_MODULES
        .iter()
        .zip(bodies)
        .zip(staging)
        .map(|((m, seconds), (stage_in, stage_out))| WorkflowModule {
            name: m.to_string(),
            startup: 0.0,
            stage_in,
            stage_out,
            body: ModuleBody::Fixed { seconds },
        })
        .collect();
    let edges = LC_MODULES
        .windows(2)
        .map(|p| (p[0].to_string(), p[1].to_string()))
        .collect();
    WorkflowSpec {
        name: name.to_string(),
        modules,
        edges,
    }
}

pub fn workflow(name: &str) -> Result<WorkflowSpec> {
    if let Some(w) = load_override::<WorkflowSpec>(name)? {
        w.validate()?;
        return Ok(w);
    }
    match name {
        "monolithic-1cew" => Ok(lc_chain(name, MONOLITHIC_1CEW, [(0.0, 0.0); 4])),
        // LC minus monolithic per module, booked as file staging:
        // +33 s, +720 s, +300 s, +3.5 s
        "lc-fmo-1cew" => Ok(lc_chain(
            name,
            MONOLITHIC_1CEW,
            [(0.0, 33.0), (360.0, 360.0), (150.0, 150.0), (3.5, 0.0)],
        )),
        _ => Err(Error::UnknownPreset(name.to_string())),
    }
}

/// Toy-engine fixtures: a closely bound fragment pair and a 20-fragment chain.
pub fn system(name: &str) -> Result<FragmentSystem> {
    if let Some(s) = load_override::<FragmentSystem>(name)? {
        s.validate()?;
        return Ok(s);
    }
    match name {
        "pair" => FragmentSystem::from_json_str(PAIR_JSON),
        "chain-20" => FragmentSystem::from_json_str(CHAIN_20_JSON),
        _ => Err(Error::UnknownPreset(name.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_dataset() {
        let recs = paper_records();
        assert_eq!(recs.len(), 7);
        assert_eq!(recs.iter().filter(|r| r.machine_id == "xeon").count(), 3);
        assert_eq!(recs[3].shape.n_es, 2_499_814);
        assert_eq!(recs[6].t_total, 126_330.9);
    }

    #[test]
    fn machine_presets() {
        let peta = machine("peta-2007").unwrap();
        assert_eq!((peta.k, peta.e), (10_000, 5.0));
        assert_eq!(machine("xeon-16").unwrap().e, 0.071);
        assert!(matches!(machine("nope"), Err(Error::UnknownPreset(_))));
        assert!(params("nope").is_err());
        assert!(workflow("nope").is_err());
        assert_eq!(system("pair").unwrap().len(), 2);
        assert_eq!(system("chain-20").unwrap().len(), 20);
    }

    #[test]
    fn lc_preset_module_times_match_lc_column() {
        let w = workflow("lc-fmo-1cew").unwrap();
        for (m, want) in w.modules.iter().zip(LC_FMO_1CEW) {
            let ModuleBody::Fixed { seconds } = m.body else {
                panic!()
            };
            assert_eq!(m.startup + m.stage_in + seconds + m.stage_out, want);
        }
    }
}
