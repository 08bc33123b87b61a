//! Discrete-event simulation of FMO task populations on a K-worker cluster.
//!
//! A run is a list of [`Phase`]s separated by barriers. Inside a phase tasks
//! are dispatched greedily in list order, each to the earliest-free worker
//! (ties go to the lowest worker index). Tasks are stored as runs of
//! identical tasks ([`TaskGroup`]) so that peta-scale populations (billions
//! of ES-dimers) simulate in time proportional to the number of workers.
//!
//! Worker `w` entering a group of duration `d` at time `b_w` has slots
//! `b_w + j*d`. Greedy dispatch of `n` tasks takes exactly the `n` smallest
//! slots under the order (time, worker), which is what the bulk path
//! computes without visiting each task.

mod workflow;

pub use workflow::{
    simulate_workflow, FaultModel, ModuleBody, WorkflowModule, WorkflowSpec, WorkloadPart,
};

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{predict_elapsed, shape_from_nf, work_total, CostParameters, MachineSpec};
use crate::error::{Error, Result};
use crate::system::WorkloadShape;

/// Timelines beyond this many tasks are refused.
pub const MAX_TIMELINE_TASKS: u64 = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    MonomerIter,
    ScfDimer,
    EsDimer,
    ModuleOverhead,
    StageFile,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::MonomerIter => "monomer-iter",
            TaskKind::ScfDimer => "scf-dimer",
            TaskKind::EsDimer => "es-dimer",
            TaskKind::ModuleOverhead => "module-overhead",
            TaskKind::StageFile => "stage-file",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: u64,
    pub kind: TaskKind,
    pub duration: f64,
    pub phase: usize,
}

/// `count` consecutive tasks of one kind and duration, ids starting at
/// `first_id`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskGroup {
    pub kind: TaskKind,
    pub count: u64,
    pub duration: f64,
    pub first_id: u64,
}

/// Tasks dispatched without internal synchronisation; a barrier follows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub label: String,
    pub groups: Vec<TaskGroup>,
}

impl Phase {
    pub fn task_count(&self) -> u64 {
        self.groups.iter().map(|g| g.count).sum()
    }

    pub fn work(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.count as f64 * g.duration)
            .sum()
    }

    pub fn max_duration(&self) -> f64 {
        self.groups
            .iter()
            .filter(|g| g.count > 0)
            .map(|g| g.duration)
            .fold(0.0, f64::max)
    }

    /// Expands the groups into individual tasks.
    pub fn tasks(&self, phase: usize) -> impl Iterator<Item = Task> + '_ {
        self.groups.iter().flat_map(move |g| {
            (0..g.count).map(move |i| Task {
                id: g.first_id + i,
                kind: g.kind,
                duration: g.duration,
                phase,
            })
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub k: u64,
    /// Per-worker speed relative to the reference node.
    pub e: f64,
    /// Seconds added to every task.
    #[serde(default)]
    pub dispatch_overhead: f64,
}

impl ClusterConfig {
    pub fn new(k: u64, e: f64, dispatch_overhead: f64) -> Result<Self> {
        let c = Self {
            k,
            e,
            dispatch_overhead,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn from_machine(m: &MachineSpec, dispatch_overhead: f64) -> Result<Self> {
        Self::new(m.k, m.e, dispatch_overhead)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Invalid("cluster needs at least one worker".into()));
        }
        if !(self.e > 0.0 && self.e.is_finite()) {
            return Err(Error::Invalid(format!(
                "worker efficiency must be > 0, got {}",
                self.e
            )));
        }
        if !(self.dispatch_overhead >= 0.0 && self.dispatch_overhead.is_finite()) {
            return Err(Error::Invalid("dispatch overhead must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// List order as built (task-id order).
    #[default]
    Fifo,
    /// Longest tasks first within each phase.
    Lpt,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SimOptions {
    pub policy: Policy,
    pub record_timeline: bool,
}

/// Per-task duration jitter for `build_tasks`: each duration is scaled by
/// `1 + jitter * U(-1, 1)`. Zero keeps identical tasks.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskOptions {
    pub jitter: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTime {
    pub label: String,
    pub start: f64,
    pub end: f64,
}

impl PhaseTime {
    pub fn elapsed(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Start,
    End,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub worker: u64,
    pub task: String,
    pub kind: String,
    pub event: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub makespan: f64,
    pub phases: Vec<PhaseTime>,
    /// Sum of task durations (without dispatch overhead) over `K`.
    pub ideal_time: f64,
    pub efficiency: f64,
    pub total_work: f64,
    pub tasks: u64,
    pub retries: u64,
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_module: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeline: Option<Vec<Event>>,
}

impl SimReport {
    /// Writes the timeline as CSV (`time,worker,task,kind,event`).
    pub fn write_timeline_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "time,worker,task,kind,event")?;
        for e in self.timeline.iter().flatten() {
            let ev = match e.event {
                EventKind::Start => "start",
                EventKind::End => "end",
            };
            writeln!(w, "{},{},{},{},{}", e.time, e.worker, e.task, e.kind, ev)?;
        }
        Ok(())
    }
}

/// Splits a workload into barrier-separated phases: `I_m` monomer sweeps of
/// `N_f` tasks each, then one dimer phase of `N_d` SCF-dimer tasks followed by
/// `N_es` ES-dimer tasks.
pub fn build_tasks(
    shape: &WorkloadShape,
    p: &CostParameters,
    c: &ClusterConfig,
    opts: &TaskOptions,
) -> Result<Vec<Phase>> {
    c.validate()?;
    p.validate()?;
    let n_f = shape.n_f as f64;
    let mut next_id = 0u64;
    let mut group = |kind, count, duration| {
        let g = TaskGroup {
            kind,
            count,
            duration,
            first_id: next_id,
        };
        next_id += count;
        g
    };
    let mut phases = Vec::new();
    if shape.n_f > 0 {
        for it in 0..shape.i_m {
            phases.push(Phase {
                label: format!("monomer-{}", it + 1),
                groups: vec![group(
                    TaskKind::MonomerIter,
                    shape.n_f,
                    p.monomer_task(n_f) / c.e,
                )],
            });
        }
    }
    let mut dimer = Vec::new();
    if shape.n_d > 0 {
        dimer.push(group(
            TaskKind::ScfDimer,
            shape.n_d,
            p.scf_dimer_task(n_f) / c.e,
        ));
    }
    if shape.n_es > 0 {
        dimer.push(group(
            TaskKind::EsDimer,
            shape.n_es,
            p.es_dimer_task() / c.e,
        ));
    }
    if !dimer.is_empty() {
        phases.push(Phase {
            label: "dimer".into(),
            groups: dimer,
        });
    }
    if opts.jitter > 0.0 {
        jitter_phases(&mut phases, opts)?;
    }
    Ok(phases)
}

fn jitter_phases(phases: &mut [Phase], opts: &TaskOptions) -> Result<()> {
    if opts.jitter >= 1.0 {
        return Err(Error::Invalid("jitter must be below 1".into()));
    }
    let total: u64 = phases.iter().map(Phase::task_count).sum();
    if total > MAX_TIMELINE_TASKS {
        return Err(Error::Invalid(format!(
            "duration jitter expands {total} tasks individually (limit {MAX_TIMELINE_TASKS})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for phase in phases {
        let mut groups = Vec::with_capacity(phase.task_count() as usize);
        for g in &phase.groups {
            for i in 0..g.count {
                groups.push(TaskGroup {
                    kind: g.kind,
                    count: 1,
                    duration: g.duration * (1.0 + opts.jitter * rng.gen_range(-1.0..=1.0)),
                    first_id: g.first_id + i,
                });
            }
        }
        phase.groups = groups;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    time: f64,
    worker: usize,
}

impl PartialEq for Slot {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Slot {}

impl PartialOrd for Slot {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Slot {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.worker.cmp(&self.worker))
    }
}

/// Worker free times plus the optional event log.
pub(crate) struct Cluster {
    free: Vec<f64>,
    timeline: Option<Vec<Event>>,
}

impl Cluster {
    pub(crate) fn new(k: u64, start: f64, record: bool) -> Self {
        Self {
            free: vec![start; k as usize],
            timeline: record.then(Vec::new),
        }
    }

    fn slot(base: f64, j: u64, d: f64) -> f64 {
        base + j as f64 * d
    }

    /// Dispatches one task group greedily.
    fn run_group(&mut self, g: &TaskGroup, overhead: f64) {
        if g.count == 0 {
            return;
        }
        let d = g.duration + overhead;
        let k = self.free.len() as u64;
        if d <= 0.0 {
            // every task lands on the earliest worker and leaves it earliest
            let w = self.earliest();
            if let Some(log) = self.timeline.as_mut() {
                let t = self.free[w];
                for i in 0..g.count {
                    push_task(log, t, t, w, g.first_id + i, g.kind);
                }
            }
            return;
        }
        if self.timeline.is_some() || g.count <= 4 * k {
            self.run_group_heap(g, d);
        } else {
            self.run_group_bulk(g.count, d);
        }
    }

    fn earliest(&self) -> usize {
        let mut best = 0;
        for (w, t) in self.free.iter().enumerate() {
            if t.total_cmp(&self.free[best]) == Ordering::Less {
                best = w;
            }
        }
        best
    }

    fn run_group_heap(&mut self, g: &TaskGroup, d: f64) {
        let base = self.free.clone();
        let mut taken = vec![0u64; base.len()];
        let mut heap: BinaryHeap<Slot> = base
            .iter()
            .enumerate()
            .map(|(worker, &time)| Slot { time, worker })
            .collect();
        for i in 0..g.count {
            let Slot { time, worker } = heap.pop().expect("non-empty cluster");
            taken[worker] += 1;
            let end = Self::slot(base[worker], taken[worker], d);
            if let Some(log) = self.timeline.as_mut() {
                push_task(log, time, end, worker, g.first_id + i, g.kind);
            }
            heap.push(Slot { time: end, worker });
        }
        for (w, f) in self.free.iter_mut().enumerate() {
            *f = Self::slot(base[w], taken[w], d);
        }
    }

    /// Number of slots of a worker with time `<= t`.
    fn slots_le(base: f64, d: f64, t: f64) -> u64 {
        if base > t {
            return 0;
        }
        let mut j = ((t - base) / d).floor().max(0.0) as u64;
        while Self::slot(base, j + 1, d) <= t {
            j += 1;
        }
        while j > 0 && Self::slot(base, j, d) > t {
            j -= 1;
        }
        j + 1
    }

    fn count_le(&self, d: f64, t: f64) -> u64 {
        self.free.iter().map(|&b| Self::slots_le(b, d, t)).sum()
    }

    /// Takes the `n` smallest slots without visiting each task.
    fn run_group_bulk(&mut self, n: u64, d: f64) {
        let k = self.free.len() as u64;
        let lo0 = self.free.iter().copied().fold(f64::INFINITY, f64::min);
        let hi0 = self.free.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // count_le(lo) < n <= count_le(hi)
        let mut lo = lo0 - d;
        let mut hi = hi0 + (n / k + 1) as f64 * d;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.count_le(d, mid) >= n {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        // The n-th smallest slot time is the first slot time above `lo`
        // reaching the count.
        let mut below = lo;
        let threshold = loop {
            let next = self
                .free
                .iter()
                .map(|&b| Self::slot(b, Self::slots_le(b, d, below), d))
                .fold(f64::INFINITY, f64::min);
            if self.count_le(d, next) >= n {
                break next;
            }
            below = next;
        };
        let mut remaining = n;
        let mut counts: Vec<u64> = self
            .free
            .iter()
            .map(|&b| {
                let c = Self::slots_le(b, d, threshold);
                if c > 0 && Self::slot(b, c - 1, d) == threshold {
                    c - 1
                } else {
                    c
                }
            })
            .collect();
        remaining -= counts.iter().sum::<u64>();
        // ties at the threshold go to the lowest worker indices
        for (w, c) in counts.iter_mut().enumerate() {
            if remaining == 0 {
                break;
            }
            if Self::slot(self.free[w], *c, d) == threshold {
                *c += 1;
                remaining -= 1;
            }
        }
        debug_assert_eq!(remaining, 0);
        for (f, c) in self.free.iter_mut().zip(counts) {
            *f = Self::slot(*f, c, d);
        }
    }

    fn barrier(&mut self) -> f64 {
        let t = self.free.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.free.iter_mut().for_each(|f| *f = t);
        t
    }

    pub(crate) fn now(&self) -> f64 {
        self.free.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub(crate) fn take_timeline(&mut self) -> Option<Vec<Event>> {
        self.timeline.take()
    }

    /// Runs phases from the current time; returns per-phase spans.
    pub(crate) fn run_phases(
        &mut self,
        phases: &[Phase],
        overhead: f64,
        policy: Policy,
    ) -> Vec<PhaseTime> {
        let mut spans = Vec::with_capacity(phases.len());
        for phase in phases {
            let start = self.barrier();
            let mut groups = phase.groups.clone();
            if policy == Policy::Lpt {
                groups.sort_by(|a, b| b.duration.total_cmp(&a.duration));
            }
            for g in &groups {
                self.run_group(g, overhead);
            }
            let end = self.barrier();
            spans.push(PhaseTime {
                label: phase.label.clone(),
                start,
                end,
            });
        }
        spans
    }
}

fn push_task(log: &mut Vec<Event>, start: f64, end: f64, worker: usize, id: u64, kind: TaskKind) {
    for (time, event) in [(start, EventKind::Start), (end, EventKind::End)] {
        log.push(Event {
            time,
            worker: worker as u64,
            task: id.to_string(),
            kind: kind.as_str().to_string(),
            event,
        });
    }
}

pub(crate) fn sort_timeline(log: &mut [Event]) {
    log.sort_by(|a, b| {
        a.time
            .total_cmp(&b.time)
            .then_with(|| (a.event == EventKind::Start).cmp(&(b.event == EventKind::Start)))
            .then_with(|| a.worker.cmp(&b.worker))
    });
}

pub(crate) fn check_timeline_size(phases: &[Phase], opts: &SimOptions) -> Result<()> {
    let tasks: u64 = phases.iter().map(Phase::task_count).sum();
    if opts.record_timeline && tasks > MAX_TIMELINE_TASKS {
        return Err(Error::Invalid(format!(
            "timeline requested for {tasks} tasks (limit {MAX_TIMELINE_TASKS})"
        )));
    }
    Ok(())
}

/// Greedy list scheduling of barrier-separated phases on `c.k` workers.
pub fn simulate(phases: &[Phase], c: &ClusterConfig, opts: &SimOptions) -> Result<SimReport> {
    c.validate()?;
    check_timeline_size(phases, opts)?;
    let mut cluster = Cluster::new(c.k, 0.0, opts.record_timeline);
    let spans = cluster.run_phases(phases, c.dispatch_overhead, opts.policy);
    let makespan = cluster.now();
    let total_work: f64 = phases.iter().map(Phase::work).sum();
    let ideal_time = total_work / c.k as f64;
    let mut timeline = cluster.take_timeline();
    if let Some(log) = timeline.as_mut() {
        sort_timeline(log);
    }
    Ok(SimReport {
        makespan,
        phases: spans,
        ideal_time,
        efficiency: if makespan > 0.0 {
            ideal_time / makespan
        } else {
            1.0
        },
        total_work,
        tasks: phases.iter().map(Phase::task_count).sum(),
        retries: 0,
        failed: false,
        failed_module: None,
        timeline,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub nf: u64,
    pub f_m: f64,
    pub f_d: f64,
    pub f_es: f64,
    pub f_total: f64,
    pub t_predict: f64,
    pub t_simulated: f64,
    pub efficiency: f64,
}

/// Analytic prediction and simulated makespan for each fragment count.
pub fn efficiency_sweep(
    nfs: &[u64],
    i_m: u64,
    p: &CostParameters,
    machine: &MachineSpec,
    dispatch_overhead: f64,
) -> Result<Vec<SweepRow>> {
    machine.validate()?;
    let cluster = ClusterConfig::from_machine(machine, dispatch_overhead)?;
    nfs.iter()
        .map(|&nf| {
            let shape = shape_from_nf(nf, i_m, p);
            let w = work_total(&shape, p);
            let phases = build_tasks(&shape, p, &cluster, &TaskOptions::default())?;
            let rep = simulate(&phases, &cluster, &SimOptions::default())?;
            Ok(SweepRow {
                nf,
                f_m: w.f_m,
                f_d: w.f_d,
                f_es: w.f_es,
                f_total: w.f_total,
                t_predict: predict_elapsed(&shape, p, machine),
                t_simulated: rep.makespan,
                efficiency: rep.efficiency,
            })
        })
        .collect()
}

/// `steps` fragment counts between `lo` and `hi` inclusive, deduplicated.
pub fn nf_grid(lo: u64, hi: u64, steps: usize, log: bool) -> Result<Vec<u64>> {
    if lo == 0 || hi < lo || steps == 0 {
        return Err(Error::Invalid(format!(
            "empty fragment range {lo}..{hi} with {steps} steps"
        )));
    }
    if steps == 1 || lo == hi {
        return Ok(vec![lo]);
    }
    let mut out: Vec<u64> = (0..steps)
        .map(|i| {
            let f = i as f64 / (steps - 1) as f64;
            let x = if log {
                (lo as f64).ln() + f * ((hi as f64).ln() - (lo as f64).ln())
            } else {
                lo as f64 + f * (hi - lo) as f64
            };
            if i == 0 {
                lo
            } else if i == steps - 1 {
                hi
            } else if log {
                x.exp().round() as u64
            } else {
                x.round() as u64
            }
        })
        .collect();
    out.dedup();
    Ok(out)
}
