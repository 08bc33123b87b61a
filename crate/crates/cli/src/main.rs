//! `fmo-petasim` command-line front end.
//!
//! With `--output`, the machine-readable payload is written to that file and a
//! human-readable summary goes to stdout. Without it, the payload goes to
//! stdout and the summary to stderr.
//!
//! Exit codes: 0 success, 2 parse error, 3 parameters not identifiable,
//! 4 bad arguments or unknown preset, 5 cyclic workflow, 6 engine
//! non-convergence, 1 anything else.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fmo_petasim::calibrate::{read_records_path, synthesize_records};
use fmo_petasim::presets;
use fmo_petasim::sim::{nf_grid, ClusterConfig, Policy, SimReport, TaskOptions};
use fmo_petasim::{
    build_tasks, classify_pairs, effective_flops, efficiency_sweep, fit, fmo2_total_energy,
    full_system_oracle, pair_array_bytes, predict_elapsed, shape_from_nf, simulate,
    simulate_workflow, work_total, EngineConfig, Error, FaultModel, FragmentSystem, SimOptions,
    WorkflowSpec, WorkloadShape,
};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "fmo-petasim",
    version,
    about = "FMO performance model, calibrator and cluster simulator"
)]
struct Cli {
    /// Write the machine-readable result to this file.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Result format (default: csv for `sweep`, json otherwise).
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Seed for every random choice (jitter, faults, synthetic data).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Fit cost coefficients and machine efficiencies to timing records.
    Calibrate(CalibrateArgs),
    /// Predict the workload shape, work and elapsed time for N_f fragments.
    Predict(PredictArgs),
    /// Simulate a workload or a workflow on a cluster.
    Simulate(SimulateArgs),
    /// Run the two-body fragment expansion on a toy system.
    RunToy(RunToyArgs),
    /// Tabulate predicted and simulated times over a range of N_f.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct CalibrateArgs {
    /// Timing records CSV; the bundled reference dataset when omitted.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Machine whose efficiency is fixed to 1.
    #[arg(long, default_value = "ibm")]
    reference: String,
    /// Fit noiseless records generated from `--params` instead and report
    /// the recovery error.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value = "paper-tableIV")]
    params: String,
}

#[derive(Args)]
struct Machine {
    /// Machine preset.
    #[arg(long, default_value = "ibm-p5-node")]
    machine: String,
    /// Cost-parameter preset.
    #[arg(long, default_value = "paper-tableIV")]
    params: String,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    nf: u64,
    /// Monomer SCC iterations.
    #[arg(long, default_value_t = 17)]
    im: u64,
    #[command(flatten)]
    machine: Machine,
    /// Use this SCF-dimer count instead of the linear law.
    #[arg(long)]
    nd: Option<u64>,
    /// Use this ES-dimer count instead of the remaining pairs.
    #[arg(long)]
    nes: Option<u64>,
    /// Fraction of peak reached by the application.
    #[arg(long)]
    achieved_fraction: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Workflow preset name or JSON file.
    #[arg(long, conflicts_with = "nf")]
    workflow: Option<String>,
    /// Workflow to compare against; `lc-fmo-1cew` defaults to `monolithic-1cew`.
    #[arg(long, requires = "workflow")]
    baseline: Option<String>,
    /// Simulate the FMO workload for this many fragments.
    #[arg(long)]
    nf: Option<u64>,
    #[arg(long, default_value_t = 17)]
    im: u64,
    #[command(flatten)]
    machine: Machine,
    /// Scheduler cost per dispatched task, seconds.
    #[arg(long, default_value_t = 0.0)]
    dispatch_overhead: f64,
    /// Relative uniform jitter on task durations.
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    #[arg(long, value_enum, default_value_t = PolicyArg::Fifo)]
    policy: PolicyArg,
    /// Per-task failure probability (workflows only).
    #[arg(long, default_value_t = 0.0)]
    failure_probability: f64,
    #[arg(long, default_value_t = 3)]
    retry_limit: u32,
    /// Seconds lost before a failed module restarts.
    #[arg(long, default_value_t = 0.0)]
    retry_penalty: f64,
    /// Write the per-task event log (CSV) to this file.
    #[arg(long)]
    timeline: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Fifo,
    Lpt,
}

#[derive(Args)]
struct RunToyArgs {
    /// System preset (`pair`, `chain-20`) or JSON file.
    #[arg(long)]
    system: String,
    /// Pairs at or below this distance are treated as SCF dimers.
    #[arg(long, default_value_t = 9.0)]
    threshold: f64,
    #[arg(long, default_value_t = EngineConfig::default().tol)]
    tol: f64,
    #[arg(long, default_value_t = EngineConfig::default().max_iterations)]
    max_iterations: usize,
    #[arg(long, default_value_t = EngineConfig::default().damping)]
    damping: f64,
    /// Short-range shielding length; `inf` disables shielding.
    #[arg(long, default_value_t = EngineConfig::default().sigma)]
    sigma: f64,
    /// Also solve the whole system at once and report the difference.
    #[arg(long)]
    oracle: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    nf_min: u64,
    #[arg(long)]
    nf_max: u64,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    /// Space the grid logarithmically.
    #[arg(long)]
    log: bool,
    #[arg(long, default_value_t = 17)]
    im: u64,
    #[command(flatten)]
    machine: Machine,
    #[arg(long, default_value_t = 0.0)]
    dispatch_overhead: f64,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Parse { .. } | Error::Json(_) => 2,
            Error::Identifiability(_) => 3,
            Error::Invalid(_)
            | Error::UnknownPreset(_)
            | Error::Config(_)
            | Error::Io(_)
            | Error::Capacity { .. }
            | Error::SingularGeometry { .. } => 4,
            Error::Cycle(_) => 5,
            Error::NotConverged { .. } => 6,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 4,
        message: message.into(),
    }
}

/// A result in both output shapes: a JSON document and a flat table.
struct Payload {
    json: Value,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
    summary: String,
}

impl Payload {
    fn key_value(json: Value, summary: String) -> Self {
        let mut rows = Vec::new();
        flatten("", &json, &mut rows);
        Payload {
            json,
            header: vec!["key".into(), "value".into()],
            rows,
            summary,
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<Vec<String>>) {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                flatten(&format!("{prefix}.{i}"), v, out);
            }
        }
        Value::String(s) => out.push(vec![prefix.to_string(), s.clone()]),
        other => out.push(vec![prefix.to_string(), other.to_string()]),
    }
}

fn render(p: &Payload, format: Format) -> Result<Vec<u8>, Failure> {
    match format {
        Format::Json => {
            let mut text = serde_json::to_string_pretty(&p.json).map_err(Error::from)?;
            text.push('\n');
            Ok(text.into_bytes())
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let io = |e: csv::Error| usage(format!("csv output: {e}"));
            w.write_record(&p.header).map_err(io)?;
            for row in &p.rows {
                w.write_record(row).map_err(io)?;
            }
            w.into_inner()
                .map_err(|e| usage(format!("csv output: {e}")))
        }
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> Result<Value, Failure> {
    Ok(serde_json::to_value(v).map_err(Error::from)?)
}

fn is_file(name: &str) -> bool {
    Path::new(name).is_file()
}

fn load_system(name: &str) -> Result<FragmentSystem, Failure> {
    if is_file(name) {
        Ok(FragmentSystem::from_path(name)?)
    } else {
        Ok(presets::system(name)?)
    }
}

fn load_workflow(name: &str) -> Result<WorkflowSpec, Failure> {
    if is_file(name) {
        let text = std::fs::read_to_string(name).map_err(Error::from)?;
        Ok(WorkflowSpec::from_json_str(&text)?)
    } else {
        Ok(presets::workflow(name)?)
    }
}

fn calibrate(a: &CalibrateArgs, seed: u64) -> Result<Payload, Failure> {
    let mut summary = String::new();
    let (records, truth) = if a.synthetic {
        use rand::{Rng, SeedableRng};
        let truth = presets::params(&a.params)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let e = rng.gen_range(0.05..2.0);
        let shapes: Vec<_> = [106, 561, 1122, 2244]
            .iter()
            .map(|&n| shape_from_nf(n, 17, &truth))
            .collect();
        let machines = [(a.reference.as_str(), 1, 1.0), ("synthetic", 16, e)];
        let recs = synthesize_records(&truth, &machines, &shapes);
        (recs, Some((truth, e)))
    } else {
        match &a.records {
            Some(path) => (read_records_path(path)?, None),
            None => (presets::paper_records(), None),
        }
    };
    let result = fit(&records, &a.reference)?;
    let p = &result.params;
    let _ = writeln!(
        summary,
        "fitted f_m = {:.6} + {:.6e} N_f, f_d = {:.6} + {:.6e} N_f, f_es = {:.6}, N_d slope = {:.4}",
        p.f_m0, p.f_m1, p.f_d0, p.f_d1, p.f_es0, p.nd_slope
    );
    for (m, e) in &result.efficiencies {
        let _ = writeln!(summary, "efficiency {m} = {e:.6}");
    }
    let _ = writeln!(
        summary,
        "{:<12} {:>7} {:>14} {:>14} {:>9}",
        "machine", "N_f", "measured", "modeled", "rel.err"
    );
    for row in result.report(&records)? {
        let _ = writeln!(
            summary,
            "{:<12} {:>7} {:>14.1} {:>14.1} {:>9.4}",
            row.machine_id,
            row.shape.n_f,
            row.total.measured,
            row.total.modeled,
            row.total.rel_error
        );
    }
    let _ = writeln!(
        summary,
        "objective {:.3e} after {} rounds",
        result.objective, result.rounds
    );
    if let Some((truth, e)) = truth {
        let rel = |a: f64, b: f64| ((a - b) / b).abs();
        let worst = [
            rel(p.f_m0, truth.f_m0),
            rel(p.f_m1, truth.f_m1),
            rel(p.f_d0, truth.f_d0),
            rel(p.f_d1, truth.f_d1),
            rel(p.f_es0, truth.f_es0),
            rel(result.efficiencies["synthetic"], e),
        ]
        .into_iter()
        .fold(0.0, f64::max);
        if worst < 1e-8 {
            let _ = writeln!(summary, "exact recovery: max relative error {worst:.1e}");
        } else {
            let _ = writeln!(summary, "recovery error: max relative error {worst:.3e}");
        }
    }
    let mut rows = vec![
        vec!["f_m0".into(), p.f_m0.to_string()],
        vec!["f_m1".into(), p.f_m1.to_string()],
        vec!["f_d0".into(), p.f_d0.to_string()],
        vec!["f_d1".into(), p.f_d1.to_string()],
        vec!["f_es0".into(), p.f_es0.to_string()],
        vec!["nd_slope".into(), p.nd_slope.to_string()],
    ];
    for (m, e) in &result.efficiencies {
        rows.push(vec![format!("efficiency.{m}"), e.to_string()]);
    }
    rows.push(vec!["objective".into(), result.objective.to_string()]);
    Ok(Payload {
        json: to_value(&result)?,
        header: vec!["key".into(), "value".into()],
        rows,
        summary,
    })
}

fn predict(a: &PredictArgs) -> Result<Payload, Failure> {
    if a.nf == 0 {
        return Err(usage("--nf must be at least 1"));
    }
    let p = presets::params(&a.machine.params)?;
    let m = presets::machine(&a.machine.machine)?;
    let mut shape = shape_from_nf(a.nf, a.im, &p);
    if let Some(nd) = a.nd {
        shape.n_d = nd;
        shape.n_es = WorkloadShape::total_pairs(a.nf).saturating_sub(nd);
    }
    if let Some(nes) = a.nes {
        shape.n_es = nes;
    }
    let work = work_total(&shape, &p);
    let elapsed = predict_elapsed(&shape, &p, &m);
    let flops = match m.ref_node_flops {
        Some(_) => Some(effective_flops(&m, a.achieved_fraction)?),
        None => None,
    };
    let bytes = pair_array_bytes(a.nf);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "machine {} (K = {}, E = {})",
        a.machine.machine, m.k, m.e
    );
    let _ = writeln!(
        s,
        "N_f = {}, I_m = {}, N_d = {}, N_es = {}",
        shape.n_f, shape.i_m, shape.n_d, shape.n_es
    );
    let _ = writeln!(
        s,
        "work: monomer {:.6e}, SCF dimer {:.6e}, ES dimer {:.6e}, total {:.6e}",
        work.f_m, work.f_d, work.f_es, work.f_total
    );
    let _ = writeln!(s, "elapsed {elapsed:.2} s");
    if let Some(f) = flops {
        let _ = writeln!(s, "effective rate {f:.4e} flop/s ({:.4} PF)", f / 1e15);
    }
    let _ = writeln!(s, "pair array {bytes:.4e} bytes ({:.3} GB)", bytes / 1e9);
    let json = json!({
        "machine": a.machine.machine,
        "params": a.machine.params,
        "shape": shape,
        "work": work,
        "elapsed_seconds": elapsed,
        "effective_flops": flops,
        "pair_array_bytes": bytes,
    });
    Ok(Payload::key_value(json, s))
}

fn simulate_cmd(a: &SimulateArgs, seed: u64) -> Result<(Payload, Option<SimReport>), Failure> {
    let m = presets::machine(&a.machine.machine)?;
    let cluster = ClusterConfig::from_machine(&m, a.dispatch_overhead)?;
    let opts = SimOptions {
        policy: match a.policy {
            PolicyArg::Fifo => Policy::Fifo,
            PolicyArg::Lpt => Policy::Lpt,
        },
        record_timeline: a.timeline.is_some(),
    };
    let mut s = String::new();
    let mut extra = serde_json::Map::new();
    let report = match (&a.workflow, a.nf) {
        (Some(name), _) => {
            let w = load_workflow(name)?;
            let faults = FaultModel {
                failure_probability: a.failure_probability,
                retry_limit: a.retry_limit,
                retry_penalty: a.retry_penalty,
                seed,
            };
            let rep = simulate_workflow(&w, &cluster, &faults, &opts)?;
            let _ = writeln!(
                s,
                "workflow {}: makespan {:.2} s, retries {}",
                w.name, rep.makespan, rep.retries
            );
            if rep.failed {
                let _ = writeln!(
                    s,
                    "failed in module {}",
                    rep.failed_module.as_deref().unwrap_or("?")
                );
            }
            let baseline = a
                .baseline
                .clone()
                .or_else(|| (name == "lc-fmo-1cew").then(|| "monolithic-1cew".to_string()));
            if let Some(b) = baseline {
                let base = simulate_workflow(
                    &load_workflow(&b)?,
                    &cluster,
                    &FaultModel::default(),
                    &SimOptions::default(),
                )?;
                let ratio = rep.makespan / base.makespan;
                let _ = writeln!(
                    s,
                    "baseline {b}: makespan {:.2} s; overhead ratio {ratio:.4}",
                    base.makespan
                );
                extra.insert("baseline".into(), json!(b));
                extra.insert("baseline_makespan".into(), json!(base.makespan));
                extra.insert("overhead_ratio".into(), json!(ratio));
            }
            rep
        }
        (None, Some(nf)) => {
            if nf == 0 {
                return Err(usage("--nf must be at least 1"));
            }
            let p = presets::params(&a.machine.params)?;
            let shape = shape_from_nf(nf, a.im, &p);
            let task_opts = TaskOptions {
                jitter: a.jitter,
                seed,
            };
            let phases = build_tasks(&shape, &p, &cluster, &task_opts)?;
            let rep = simulate(&phases, &cluster, &opts)?;
            let predicted = predict_elapsed(&shape, &p, &m);
            let _ = writeln!(
                s,
                "N_f = {nf} on {} workers: makespan {:.2} s (model {predicted:.2} s)",
                m.k, rep.makespan
            );
            extra.insert("predicted_seconds".into(), json!(predicted));
            rep
        }
        (None, None) => return Err(usage("simulate needs --workflow or --nf")),
    };
    let _ = writeln!(
        s,
        "{} tasks, ideal {:.2} s, efficiency {:.4}",
        report.tasks, report.ideal_time, report.efficiency
    );
    for ph in &report.phases {
        let _ = writeln!(
            s,
            "  {:<12} {:>12.2} .. {:>12.2}  ({:.2} s)",
            ph.label,
            ph.start,
            ph.end,
            ph.elapsed()
        );
    }
    let mut summary_report = report.clone();
    summary_report.timeline = None;
    let mut json = to_value(&summary_report)?;
    if let Value::Object(map) = &mut json {
        map.extend(extra);
    }
    let rows = report
        .phases
        .iter()
        .map(|p| {
            vec![
                p.label.clone(),
                p.start.to_string(),
                p.end.to_string(),
                p.elapsed().to_string(),
            ]
        })
        .collect();
    let payload = Payload {
        json,
        header: ["phase", "start", "end", "elapsed"]
            .map(String::from)
            .to_vec(),
        rows,
        summary: s,
    };
    let failed = report.failed;
    let keep = a.timeline.is_some().then_some(report);
    if failed {
        eprintln!("workflow abandoned after exhausting retries");
    }
    Ok((payload, keep))
}

fn run_toy(a: &RunToyArgs) -> Result<Payload, Failure> {
    let sys = load_system(&a.system)?;
    let config = EngineConfig {
        tol: a.tol,
        max_iterations: a.max_iterations,
        damping: a.damping,
        sigma: a.sigma,
        ..EngineConfig::default()
    };
    let cls = classify_pairs(&sys, a.threshold)?;
    let r = fmo2_total_energy(&sys, &cls, &config)?;
    if !r.converged {
        return Err(Error::NotConverged {
            iterations: r.monomer.iterations_used,
            last_delta: r.monomer.last_delta,
        }
        .into());
    }
    let mut s = String::new();
    let _ = writeln!(
        s,
        "system {}: {} fragments, {} sites",
        sys.label,
        sys.len(),
        sys.total_sites()
    );
    let _ = writeln!(
        s,
        "pairs: {} SCF, {} ES (threshold {})",
        cls.scf_pairs.len(),
        cls.es_pairs.len(),
        a.threshold
    );
    let _ = writeln!(
        s,
        "monomer loop converged in {} iterations",
        r.monomer.iterations_used
    );
    let _ = writeln!(
        s,
        "energy {:.12} (monomer {:.12}, SCF dimer {:.6e}, ES dimer {:.6e})",
        r.total_energy, r.monomer_energy, r.scf_dimer_energy, r.es_dimer_energy
    );
    let mut json = json!({
        "system": sys.label,
        "fragments": sys.len(),
        "threshold": a.threshold,
        "scf_pairs": cls.scf_pairs.len(),
        "es_pairs": cls.es_pairs.len(),
        "iterations": r.monomer.iterations_used,
        "total_energy": r.total_energy,
        "monomer_energy": r.monomer_energy,
        "scf_dimer_energy": r.scf_dimer_energy,
        "es_dimer_energy": r.es_dimer_energy,
        "counters": r.counters,
    });
    if a.oracle {
        let o = full_system_oracle(&sys, &config)?;
        let rel = ((r.total_energy - o.energy) / o.energy).abs();
        let _ = writeln!(s, "oracle {:.12}, relative error {rel:.3e}", o.energy);
        json["oracle_energy"] = json!(o.energy);
        json["relative_error"] = json!(rel);
    }
    Ok(Payload::key_value(json, s))
}

fn sweep(a: &SweepArgs) -> Result<Payload, Failure> {
    let p = presets::params(&a.machine.params)?;
    let m = presets::machine(&a.machine.machine)?;
    let nfs = nf_grid(a.nf_min, a.nf_max, a.steps, a.log)?;
    let rows = efficiency_sweep(&nfs, a.im, &p, &m, a.dispatch_overhead)?;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} points from N_f = {} to {} on {}",
        rows.len(),
        a.nf_min,
        a.nf_max,
        a.machine.machine
    );
    let table = rows
        .iter()
        .map(|r| {
            vec![
                r.nf.to_string(),
                r.f_m.to_string(),
                r.f_d.to_string(),
                r.f_es.to_string(),
                r.f_total.to_string(),
                r.t_predict.to_string(),
                r.t_simulated.to_string(),
            ]
        })
        .collect();
    Ok(Payload {
        json: to_value(&rows)?,
        header: [
            "nf",
            "f_m",
            "f_d",
            "f_es",
            "f_total",
            "t_predict",
            "t_simulated",
        ]
        .map(String::from)
        .to_vec(),
        rows: table,
        summary: s,
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (payload, timeline, default_format) = match &cli.command {
        Command::Calibrate(a) => (calibrate(a, cli.seed)?, None, Format::Json),
        Command::Predict(a) => (predict(a)?, None, Format::Json),
        Command::Simulate(a) => {
            let (p, rep) = simulate_cmd(a, cli.seed)?;
            (p, rep.zip(a.timeline.clone()), Format::Json)
        }
        Command::RunToy(a) => (run_toy(a)?, None, Format::Json),
        Command::Sweep(a) => (sweep(a)?, None, Format::Csv),
    };
    let format = cli.format.unwrap_or(default_format);
    let bytes = render(&payload, format)?;
    if let Some((rep, path)) = timeline {
        let file = std::fs::File::create(&path).map_err(Error::from)?;
        rep.write_timeline_csv(std::io::BufWriter::new(file))?;
    }
    match &cli.output {
        Some(path) => {
            std::fs::write(path, bytes).map_err(Error::from)?;
            print!("{}", payload.summary);
        }
        None => {
            eprint!("{}", payload.summary);
            std::io::stdout().write_all(&bytes).map_err(Error::from)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(4),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
