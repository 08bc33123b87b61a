//! Analytic execution-cost model.
//!
//! Work is measured in reference-node-seconds: one second on the reference
//! node (`E = 1`). Phase work for a workload of `N_f` fragments:
//!
//! ```text
//! F_m  = (f_m0 + f_m1 N_f) N_f I_m
//! F_d  = (f_d0 + f_d1 N_f) N_d
//! F_es = f_es0 N_es
//! ```
//!
//! and the elapsed time on `K` nodes of relative speed `E` is
//! `(F_m + F_d + F_es) / (K E)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::system::WorkloadShape;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParameters {
    pub f_m0: f64,
    pub f_m1: f64,
    pub f_d0: f64,
    pub f_d1: f64,
    pub f_es0: f64,
    /// SCF-dimers per fragment in the extrapolation law.
    #[serde(default = "default_nd_slope")]
    pub nd_slope: f64,
}

fn default_nd_slope() -> f64 {
    7.50
}

impl CostParameters {
    /// Coefficients fitted on the IBM p5 / Xeon timing tables.
    pub const TABLE_IV: CostParameters = CostParameters {
        f_m0: 0.59,
        f_m1: 0.0014,
        f_d0: 2.83,
        f_d1: 0.0039,
        f_es0: 0.082,
        nd_slope: 7.50,
    };

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.f_m0,
            self.f_m1,
            self.f_d0,
            self.f_d1,
            self.f_es0,
            self.nd_slope,
        ];
        if all.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Invalid(format!(
                "cost parameters must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }

    /// Work of one monomer solve in an `n_f`-fragment system.
    pub fn monomer_task(&self, n_f: f64) -> f64 {
        self.f_m0 + self.f_m1 * n_f
    }

    pub fn scf_dimer_task(&self, n_f: f64) -> f64 {
        self.f_d0 + self.f_d1 * n_f
    }

    pub fn es_dimer_task(&self) -> f64 {
        self.f_es0
    }
}

impl Default for CostParameters {
    fn default() -> Self {
        Self::TABLE_IV
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MachineSpec {
    pub k: u64,
    pub e: f64,
    /// Sustained flops of the reference node, if known.
    #[serde(default)]
    pub ref_node_flops: Option<f64>,
}

impl MachineSpec {
    pub fn new(k: u64, e: f64) -> Result<Self> {
        let m = Self {
            k,
            e,
            ref_node_flops: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_ref_flops(mut self, flops: f64) -> Self {
        self.ref_node_flops = Some(flops);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Invalid("machine needs at least one node".into()));
        }
        if !(self.e > 0.0 && self.e.is_finite()) {
            return Err(Error::Invalid(format!(
                "node efficiency must be > 0, got {}",
                self.e
            )));
        }
        Ok(())
    }

    /// Aggregate speed `K * E` in reference nodes.
    pub fn throughput(&self) -> f64 {
        self.k as f64 * self.e
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkBreakdown {
    pub f_m: f64,
    pub f_d: f64,
    pub f_es: f64,
    pub f_total: f64,
}

pub fn work_monomer(shape: &WorkloadShape, p: &CostParameters) -> f64 {
    let n_f = shape.n_f as f64;
    p.monomer_task(n_f) * n_f * shape.i_m as f64
}

pub fn work_dimer(shape: &WorkloadShape, p: &CostParameters) -> f64 {
    p.scf_dimer_task(shape.n_f as f64) * shape.n_d as f64
}

pub fn work_es(shape: &WorkloadShape, p: &CostParameters) -> f64 {
    p.es_dimer_task() * shape.n_es as f64
}

pub fn work_total(shape: &WorkloadShape, p: &CostParameters) -> WorkBreakdown {
    let f_m = work_monomer(shape, p);
    let f_d = work_dimer(shape, p);
    let f_es = work_es(shape, p);
    WorkBreakdown {
        f_m,
        f_d,
        f_es,
        f_total: f_m + f_d + f_es,
    }
}

/// SCF-dimer count from the linear law, capped at the number of pairs.
pub fn nd_model(n_f: u64, p: &CostParameters) -> u64 {
    let nd = (p.nd_slope * n_f as f64).round() as u64;
    nd.min(WorkloadShape::total_pairs(n_f))
}

/// ES-dimer count as the complement of `nd_model` among all pairs.
pub fn nes_model(n_f: u64, p: &CostParameters) -> u64 {
    WorkloadShape::total_pairs(n_f) - nd_model(n_f, p)
}

pub fn shape_from_nf(n_f: u64, i_m: u64, p: &CostParameters) -> WorkloadShape {
    WorkloadShape {
        n_f,
        i_m,
        n_d: nd_model(n_f, p),
        n_es: nes_model(n_f, p),
    }
}

/// Elapsed seconds on machine `m`.
pub fn predict_elapsed(shape: &WorkloadShape, p: &CostParameters, m: &MachineSpec) -> f64 {
    work_total(shape, p).f_total / m.throughput()
}

/// Sustained flops of the whole machine, `K * E * ref_node_flops * fraction`.
pub fn effective_flops(m: &MachineSpec, achieved_fraction: Option<f64>) -> Result<f64> {
    let flops = m
        .ref_node_flops
        .ok_or_else(|| Error::Config("machine has no reference-node flops rating".into()))?;
    Ok(m.throughput() * flops * achieved_fraction.unwrap_or(1.0))
}

/// Bytes for a symmetric double-precision fragment-pair array.
pub fn pair_array_bytes(n_f: u64) -> f64 {
    let n = n_f as f64;
    8.0 * n * n / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    const P: CostParameters = CostParameters::TABLE_IV;

    fn shape(n_f: u64, n_d: u64, n_es: u64) -> WorkloadShape {
        WorkloadShape {
            n_f,
            i_m: 17,
            n_d,
            n_es,
        }
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    // Expected values below are hand evaluations of the phase formulas
    // (e.g. monomer 1cew: (0.59 + 0.0014*106) * 106 * 17 = 0.7384 * 1802).

    #[test]
    fn monomer_work() {
        let w = work_monomer(&shape(106, 690, 4875), &P);
        assert!(rel(w, 0.7384 * 1802.0) < 1e-12);
        assert!(rel(w, 1356.0) < 0.02);
        assert!(
            rel(
                work_monomer(&shape(2244, 16832, 2_499_814), &P),
                3.7316 * 2244.0 * 17.0
            ) < 1e-12
        );
        assert_eq!(work_monomer(&shape(0, 0, 0), &P), 0.0);
    }

    #[test]
    fn dimer_work() {
        assert!(rel(work_dimer(&shape(106, 690, 4875), &P), 3.2434 * 690.0) < 1e-12);
        assert!(rel(work_dimer(&shape(1122, 8416, 620_465), &P), 7.2058 * 8416.0) < 1e-12);
        assert_eq!(work_dimer(&shape(106, 0, 4875), &P), 0.0);
    }

    #[test]
    fn es_work() {
        assert!(rel(work_es(&shape(106, 690, 4875), &P), 399.75) < 1e-12);
        assert!(rel(work_es(&shape(2244, 16832, 2_499_814), &P), 204_984.748) < 1e-12);
        assert_eq!(work_es(&shape(106, 690, 0), &P), 0.0);
    }

    #[test]
    fn total_work() {
        let b = work_total(&shape(106, 690, 4875), &P);
        assert_eq!(b.f_total, b.f_m + b.f_d + b.f_es);
        assert!(rel(b.f_total, 1330.5968 + 2237.946 + 399.75) < 1e-12);
        assert!(rel(b.f_total, 3799.0) < 0.05);
        let dim = work_total(&shape(2244, 16832, 2_499_814), &P);
        assert!(rel(dim.f_total, 536_898.0) < 0.015);
        assert_eq!(work_total(&shape(0, 0, 0), &P).f_total, 0.0);
    }

    #[test]
    fn nd_and_nes_laws() {
        assert_eq!(nd_model(1122, &P), 8415);
        assert_eq!(nd_model(106, &P), 795);
        assert_eq!(nd_model(0, &P), 0);
        assert_eq!(nes_model(1122, &P), 620_466);
        assert_eq!(nes_model(1, &P), 0);
        assert_eq!(nes_model(100_000, &P), 4_999_200_000);
        // 7.5 * 10 = 75 > 45 pairs: capped
        assert_eq!(nd_model(10, &P), 45);
        assert_eq!(nes_model(10, &P), 0);
    }

    #[test]
    fn shape_assembly() {
        assert_eq!(
            shape_from_nf(1122, 17, &P),
            WorkloadShape {
                n_f: 1122,
                i_m: 17,
                n_d: 8415,
                n_es: 620_466
            }
        );
    }

    #[test]
    fn peta_prediction() {
        let m = MachineSpec::new(10_000, 5.0).unwrap();
        let s = shape_from_nf(100_000, 17, &P);
        // 140.59*1e5*17 + 392.83*750000 + 0.082*4999200000 over 5e4
        let hand = (2.39003e8 + 2.9462250e8 + 4.0993440e8) / 5.0e4;
        let t = predict_elapsed(&s, &P, &m);
        assert!(rel(t, hand) < 1e-12);
        assert!(rel(t, 1.887e4) < 1e-3);
    }

    #[test]
    fn doubling_throughput_halves_time() {
        let s = shape(561, 4192, 152_888);
        let a = predict_elapsed(&s, &P, &MachineSpec::new(8, 0.5).unwrap());
        let b = predict_elapsed(&s, &P, &MachineSpec::new(16, 0.5).unwrap());
        let c = predict_elapsed(&s, &P, &MachineSpec::new(8, 1.0).unwrap());
        assert_eq!(a, 2.0 * b);
        assert_eq!(a, 2.0 * c);
    }

    #[test]
    fn xeon_cross_machine() {
        let t = predict_elapsed(
            &shape(106, 690, 4875),
            &P,
            &MachineSpec::new(16, 0.071).unwrap(),
        );
        assert!((t - 3493.2).abs() < 0.5, "{t}");
    }

    #[test]
    fn flops_and_memory() {
        let peta = MachineSpec::new(10_000, 5.0).unwrap().with_ref_flops(1e10);
        assert_eq!(effective_flops(&peta, None).unwrap(), 5.0e14);
        let one = MachineSpec::new(1, 1.0).unwrap().with_ref_flops(1e10);
        assert_eq!(effective_flops(&one, None).unwrap(), 1e10);
        let xeon = MachineSpec::new(1, 0.071).unwrap().with_ref_flops(1e10);
        let f = effective_flops(&xeon, None).unwrap();
        assert!((0.5e9..=1.0e9).contains(&f));
        assert!(effective_flops(&MachineSpec::new(1, 1.0).unwrap(), None).is_err());

        assert_eq!(pair_array_bytes(100_000), 4.0e10);
        assert_eq!(pair_array_bytes(10_000), 4.0e8);
        assert_eq!(pair_array_bytes(0), 0.0);
    }

    #[test]
    fn invalid_machine() {
        assert!(MachineSpec::new(0, 1.0).is_err());
        assert!(MachineSpec::new(1, 0.0).is_err());
        assert!(CostParameters { f_m0: -1.0, ..P }.validate().is_err());
    }
}
