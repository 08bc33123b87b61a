//! Performance-engineering toolkit for fragment molecular orbital (FMO)
//! workloads.
//!
//! - [`system`]: fragment systems, SCF/ES pair classification, workload shapes
//! - [`engine`]: two-body fragment expansion on a charge-equilibration
//!   surrogate, with a dense full-system oracle
//! - [`cost`]: analytic work and elapsed-time model
//! - [`calibrate`]: least-squares fit of the cost model to timing data
//! - [`sim`]: discrete-event cluster and workflow simulation
//! - [`presets`]: bundled datasets and named configurations

pub mod calibrate;
pub mod cost;
pub mod engine;
pub mod error;
pub mod presets;
pub mod sim;
pub mod system;

pub use calibrate::{fit, fit_nd, residual_report, CalibrationResult, TimingRecord};
pub use cost::{
    effective_flops, nd_model, nes_model, pair_array_bytes, predict_elapsed, shape_from_nf,
    work_dimer, work_es, work_monomer, work_total, CostParameters, MachineSpec, WorkBreakdown,
};
pub use engine::{
    es_dimer_correction, external_potential, fmo2_total_energy, full_system_oracle, scc_loop,
    solve_monomer, solve_scf_dimer, ChargeState, DimerCorrection, DimerKind, DimerMode,
    EngineConfig, Fmo2Result, MonomerResult, WorkCounters,
};
pub use error::{Error, Result};
pub use sim::{
    build_tasks, efficiency_sweep, simulate, simulate_workflow, ClusterConfig, FaultModel,
    SimOptions, SimReport, WorkflowSpec,
};
pub use system::{
    classify_pairs, generate_chain, min_distance, workload_shape, Fragment, FragmentSystem,
    PairClassification, Site, WorkloadShape,
};
