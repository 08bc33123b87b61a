//! Loosely-coupled workflow mode: modules connected by file transfers.
//!
//! A module runs `startup + stage_in + body + stage_out` once all of its
//! predecessors have staged out. Every module gets the whole cluster; modules
//! on independent branches overlap in time. Task failures restart the module
//! from its staged inputs (the checkpoint is the module boundary).

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    build_tasks, check_timeline_size, sort_timeline, Cluster, ClusterConfig, Event, EventKind,
    Phase, PhaseTime, SimOptions, SimReport, TaskKind, TaskOptions,
};
use crate::cost::CostParameters;
use crate::error::{Error, Result};
use crate::system::WorkloadShape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkloadPart {
    #[default]
    All,
    Monomer,
    Dimer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleBody {
    /// Opaque elapsed time, counted as one task.
    Fixed {
        seconds: f64,
    },
    /// Task population derived from a workload shape.
    Workload {
        shape: WorkloadShape,
        #[serde(default)]
        params: CostParameters,
        #[serde(default)]
        part: WorkloadPart,
    },
    Phases {
        phases: Vec<Phase>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowModule {
    pub name: String,
    #[serde(default)]
    pub startup: f64,
    #[serde(default)]
    pub stage_in: f64,
    #[serde(default)]
    pub stage_out: f64,
    pub body: ModuleBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowSpec {
    #[serde(default)]
    pub name: String,
    pub modules: Vec<WorkflowModule>,
    /// `(from, to)`: `to` consumes files staged out by `from`.
    #[serde(default)]
    pub edges: Vec<(String, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultModel {
    pub failure_probability: f64,
    pub retry_limit: u32,
    pub retry_penalty: f64,
    pub seed: u64,
}

impl Default for FaultModel {
    fn default() -> Self {
        Self {
            failure_probability: 0.0,
            retry_limit: 0,
            retry_penalty: 0.0,
            seed: 0,
        }
    }
}

impl FaultModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.failure_probability) {
            return Err(Error::Invalid(format!(
                "failure probability must lie in [0, 1), got {}",
                self.failure_probability
            )));
        }
        if !(self.retry_penalty >= 0.0) {
            return Err(Error::Invalid("retry penalty must be >= 0".into()));
        }
        Ok(())
    }
}

impl WorkflowSpec {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let w: Self = serde_json::from_str(text)?;
        w.validate()?;
        Ok(w)
    }

    /// Module indices in dependency order (ties by declaration order).
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let index: HashMap<&str, usize> = self
            .modules
            .iter()
            .enumerate()
            .map(|(i, m)| (m.name.as_str(), i))
            .collect();
        if index.len() != self.modules.len() {
            return Err(Error::Invalid("module names must be unique".into()));
        }
        let n = self.modules.len();
        let mut indegree = vec![0usize; n];
        let mut succ = vec![Vec::new(); n];
        for (from, to) in &self.edges {
            let f = *index
                .get(from.as_str())
                .ok_or_else(|| Error::Invalid(format!("edge from unknown module '{from}'")))?;
            let t = *index
                .get(to.as_str())
                .ok_or_else(|| Error::Invalid(format!("edge to unknown module '{to}'")))?;
            succ[f].push(t);
            indegree[t] += 1;
        }
        let mut ready: std::collections::BTreeSet<usize> =
            (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(&i) = ready.iter().next() {
            ready.remove(&i);
            order.push(i);
            for &t in &succ[i] {
                indegree[t] -= 1;
                if indegree[t] == 0 {
                    ready.insert(t);
                }
            }
        }
        if order.len() < n {
            let stuck = (0..n).find(|&i| indegree[i] > 0).unwrap_or(0);
            return Err(Error::Cycle(self.modules[stuck].name.clone()));
        }
        Ok(order)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modules.is_empty() {
            return Err(Error::Invalid("workflow has no modules".into()));
        }
        for m in &self.modules {
            let over = [m.startup, m.stage_in, m.stage_out];
            if over.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::Invalid(format!(
                    "module '{}': overheads must be >= 0",
                    m.name
                )));
            }
            if let ModuleBody::Fixed { seconds } = m.body {
                if !(seconds.is_finite() && seconds >= 0.0) {
                    return Err(Error::Invalid(format!(
                        "module '{}': body time must be >= 0",
                        m.name
                    )));
                }
            }
        }
        self.topological_order().map(|_| ())
    }

    /// Body phases of all modules, concatenated in dependency order.
    pub fn flattened_phases(&self, c: &ClusterConfig) -> Result<Vec<Phase>> {
        let mut out = Vec::new();
        for i in self.topological_order()? {
            if let Some(p) = body_phases(&self.modules[i].body, c)? {
                out.extend(p);
            }
        }
        Ok(out)
    }
}

fn body_phases(body: &ModuleBody, c: &ClusterConfig) -> Result<Option<Vec<Phase>>> {
    Ok(match body {
        ModuleBody::Fixed { .. } => None,
        ModuleBody::Phases { phases } => Some(phases.clone()),
        ModuleBody::Workload {
            shape,
            params,
            part,
        } => {
            let phases = build_tasks(shape, params, c, &TaskOptions::default())?;
            Some(match part {
                WorkloadPart::All => phases,
                WorkloadPart::Monomer => phases
                    .into_iter()
                    .filter(|p| p.label.starts_with("monomer"))
                    .collect(),
                WorkloadPart::Dimer => phases.into_iter().filter(|p| p.label == "dimer").collect(),
            })
        }
    })
}

/// Simulates a workflow; failures come from a generator seeded by `f.seed`.
///
/// Exhausting `retry_limit` on a module yields a report with `failed = true`
/// and the makespan up to the abandoned attempt.
pub fn simulate_workflow(
    w: &WorkflowSpec,
    c: &ClusterConfig,
    f: &FaultModel,
    opts: &SimOptions,
) -> Result<SimReport> {
    c.validate()?;
    f.validate()?;
    w.validate()?;
    let order = w.topological_order()?;
    let index: HashMap<&str, usize> = w
        .modules
        .iter()
        .enumerate()
        .map(|(i, m)| (m.name.as_str(), i))
        .collect();
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); w.modules.len()];
    for (from, to) in &w.edges {
        preds[index[to.as_str()]].push(index[from.as_str()]);
    }

    let bodies = w
        .modules
        .iter()
        .map(|m| body_phases(&m.body, c))
        .collect::<Result<Vec<_>>>()?;
    let all_phases: Vec<Phase> = bodies.iter().flatten().flatten().cloned().collect();
    check_timeline_size(&all_phases, opts)?;

    let mut rng = ChaCha8Rng::seed_from_u64(f.seed);
    let mut end_of: BTreeMap<usize, f64> = BTreeMap::new();
    let mut spans = Vec::with_capacity(w.modules.len());
    let mut timeline: Option<Vec<Event>> = opts.record_timeline.then(Vec::new);
    let mut retries = 0u64;
    let mut total_work = 0.0;
    let mut ideal_time = 0.0;
    let mut tasks = 0u64;
    let mut failed_module = None;
    let mut makespan: f64 = 0.0;

    'modules: for &i in &order {
        let module = &w.modules[i];
        let start = preds[i].iter().map(|p| end_of[p]).fold(0.0, f64::max);
        let mut t = start;
        let mut attempts = 0u32;
        loop {
            let mut log_overhead = |label: &str, kind: TaskKind, from: f64, len: f64| {
                if let Some(log) = timeline.as_mut() {
                    if len > 0.0 {
                        for (time, event) in
                            [(from, EventKind::Start), (from + len, EventKind::End)]
                        {
                            log.push(Event {
                                time,
                                worker: 0,
                                task: format!("{}:{label}", module.name),
                                kind: kind.as_str().to_string(),
                                event,
                            });
                        }
                    }
                }
            };
            log_overhead("startup", TaskKind::ModuleOverhead, t, module.startup);
            t += module.startup;
            log_overhead("stage-in", TaskKind::StageFile, t, module.stage_in);
            t += module.stage_in;

            let (body_time, body_tasks, body_work) = match &bodies[i] {
                None => {
                    let ModuleBody::Fixed { seconds } = module.body else {
                        unreachable!("only fixed bodies have no phases")
                    };
                    log_overhead("body", TaskKind::ModuleOverhead, t, seconds);
                    (seconds, 1u64, seconds)
                }
                Some(phases) => {
                    let mut cluster = Cluster::new(c.k, t, timeline.is_some());
                    cluster.run_phases(phases, c.dispatch_overhead, opts.policy);
                    let elapsed = cluster.now() - t;
                    if let (Some(log), Some(mut body_log)) =
                        (timeline.as_mut(), cluster.take_timeline())
                    {
                        for e in &mut body_log {
                            e.task = format!("{}:{}", module.name, e.task);
                        }
                        log.extend(body_log);
                    }
                    let work: f64 = phases.iter().map(Phase::work).sum();
                    (elapsed, phases.iter().map(Phase::task_count).sum(), work)
                }
            };
            t += body_time;

            let p_fail = if f.failure_probability > 0.0 {
                -(body_tasks as f64 * (-f.failure_probability).ln_1p()).exp_m1()
            } else {
                0.0
            };
            let failed = rng.gen::<f64>() < p_fail;
            if !failed {
                total_work += body_work;
                ideal_time += match &bodies[i] {
                    None => body_work,
                    Some(_) => body_work / c.k as f64,
                };
                tasks += body_tasks;
                if let Some(log) = timeline.as_mut() {
                    if module.stage_out > 0.0 {
                        for (time, event) in [
                            (t, EventKind::Start),
                            (t + module.stage_out, EventKind::End),
                        ] {
                            log.push(Event {
                                time,
                                worker: 0,
                                task: format!("{}:stage-out", module.name),
                                kind: TaskKind::StageFile.as_str().to_string(),
                                event,
                            });
                        }
                    }
                }
                t += module.stage_out;
                break;
            }
            retries += 1;
            attempts += 1;
            if attempts > f.retry_limit {
                failed_module = Some(module.name.clone());
                spans.push(PhaseTime {
                    label: module.name.clone(),
                    start,
                    end: t,
                });
                makespan = makespan.max(t);
                break 'modules;
            }
            t += f.retry_penalty;
        }
        end_of.insert(i, t);
        makespan = makespan.max(t);
        spans.push(PhaseTime {
            label: module.name.clone(),
            start,
            end: t,
        });
    }

    if let Some(log) = timeline.as_mut() {
        sort_timeline(log);
    }
    Ok(SimReport {
        makespan,
        phases: spans,
        ideal_time,
        efficiency: if makespan > 0.0 {
            (ideal_time / makespan).min(1.0)
        } else {
            1.0
        },
        total_work,
        tasks,
        retries,
        failed: failed_module.is_some(),
        failed_module,
        timeline,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use crate::sim::simulate;

    fn fixed(name: &str, seconds: f64) -> WorkflowModule {
        WorkflowModule {
            name: name.into(),
            startup: 0.0,
            stage_in: 0.0,
            stage_out: 0.0,
            body: ModuleBody::Fixed { seconds },
        }
    }

    fn chain(modules: Vec<WorkflowModule>) -> WorkflowSpec {
        let edges = modules
            .windows(2)
            .map(|p| (p[0].name.clone(), p[1].name.clone()))
            .collect();
        WorkflowSpec {
            name: "chain".into(),
            modules,
            edges,
        }
    }

    fn c(k: u64) -> ClusterConfig {
        ClusterConfig::new(k, 1.0, 0.0).unwrap()
    }

    #[test]
    fn cycle_detected() {
        let mut w = chain(vec![fixed("a", 1.0), fixed("b", 1.0)]);
        w.edges.push(("b".into(), "a".into()));
        assert!(matches!(
            simulate_workflow(&w, &c(1), &FaultModel::default(), &SimOptions::default()),
            Err(Error::Cycle(_))
        ));
    }

    #[test]
    fn unknown_edge_and_duplicate_names() {
        let mut w = chain(vec![fixed("a", 1.0), fixed("b", 1.0)]);
        w.edges.push(("a".into(), "zzz".into()));
        assert!(w.validate().is_err());
        let dup = chain(vec![fixed("a", 1.0), fixed("a", 1.0)]);
        assert!(dup.validate().is_err());
    }

    #[test]
    fn overheads_add_up() {
        let mut m = fixed("a", 10.0);
        m.startup = 1.0;
        m.stage_in = 2.0;
        m.stage_out = 3.0;
        let rep = simulate_workflow(
            &chain(vec![m, fixed("b", 5.0)]),
            &c(4),
            &FaultModel::default(),
            &SimOptions::default(),
        )
        .unwrap();
        assert_eq!(rep.makespan, 21.0);
        assert_eq!(rep.phases[0].elapsed(), 16.0);
        assert_eq!(rep.retries, 0);
    }

    #[test]
    fn parallel_branches_overlap() {
        let w = WorkflowSpec {
            name: "diamond".into(),
            modules: vec![
                fixed("a", 1.0),
                fixed("b", 5.0),
                fixed("c", 3.0),
                fixed("d", 1.0),
            ],
            edges: vec![
                ("a".into(), "b".into()),
                ("a".into(), "c".into()),
                ("b".into(), "d".into()),
                ("c".into(), "d".into()),
            ],
        };
        let rep =
            simulate_workflow(&w, &c(2), &FaultModel::default(), &SimOptions::default()).unwrap();
        assert_eq!(rep.makespan, 7.0);
    }

    #[test]
    fn zero_overhead_reduces_to_simulate() {
        let shape = WorkloadShape {
            n_f: 40,
            i_m: 3,
            n_d: 120,
            n_es: 660,
        };
        let params = CostParameters::TABLE_IV;
        let w = chain(vec![
            WorkflowModule {
                body: ModuleBody::Workload {
                    shape,
                    params,
                    part: WorkloadPart::Monomer,
                },
                ..fixed("mon", 0.0)
            },
            WorkflowModule {
                body: ModuleBody::Workload {
                    shape,
                    params,
                    part: WorkloadPart::Dimer,
                },
                ..fixed("dim", 0.0)
            },
        ]);
        let cl = c(7);
        let wf =
            simulate_workflow(&w, &cl, &FaultModel::default(), &SimOptions::default()).unwrap();
        let flat = simulate(
            &w.flattened_phases(&cl).unwrap(),
            &cl,
            &SimOptions::default(),
        )
        .unwrap();
        assert_eq!(wf.makespan, flat.makespan);
    }

    #[test]
    fn failures_are_seeded_and_counted() {
        let w = presets::workflow("lc-fmo-1cew").unwrap();
        let f = FaultModel {
            failure_probability: 0.5,
            retry_limit: 10,
            retry_penalty: 60.0,
            seed: 42,
        };
        let a = simulate_workflow(&w, &c(16), &f, &SimOptions::default()).unwrap();
        let b = simulate_workflow(&w, &c(16), &f, &SimOptions::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.retries > 0);
        let base =
            simulate_workflow(&w, &c(16), &FaultModel::default(), &SimOptions::default()).unwrap();
        assert!(a.makespan > base.makespan);
    }

    #[test]
    fn retry_limit_exhaustion_is_reported() {
        let w = presets::workflow("lc-fmo-1cew").unwrap();
        let f = FaultModel {
            failure_probability: 0.999,
            retry_limit: 1,
            retry_penalty: 0.0,
            seed: 1,
        };
        let rep = simulate_workflow(&w, &c(16), &f, &SimOptions::default()).unwrap();
        assert!(rep.failed);
        assert_eq!(rep.failed_module.as_deref(), Some("run.ini"));
        assert_eq!(rep.retries, 2);
    }

    #[test]
    fn no_failures_no_retries() {
        let w = presets::workflow("lc-fmo-1cew").unwrap();
        let rep =
            simulate_workflow(&w, &c(16), &FaultModel::default(), &SimOptions::default()).unwrap();
        assert_eq!(rep.retries, 0);
        assert!(!rep.failed);
    }

    #[test]
    fn json_round_trip() {
        let w = presets::workflow("lc-fmo-1cew").unwrap();
        let text = serde_json::to_string(&w).unwrap();
        assert_eq!(WorkflowSpec::from_json_str(&text).unwrap(), w);
    }
}
