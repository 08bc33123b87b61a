//! Least-squares calibration of the cost model from measured phase timings.
//!
//! Observations are phase totals. The model for record `r` on machine `m` is
//! `x_rp . theta_p / (K_r E_m)`, bilinear in the coefficients `theta` and the
//! inverse efficiencies `1/E_m`. The fit minimises the sum of squared
//! relative residuals by alternating two closed-form linear solves, with the
//! reference machine pinned at `E = 1`.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cost::CostParameters;
use crate::error::{Error, Result};
use crate::system::WorkloadShape;

const MAX_ROUNDS: usize = 500;
const REL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub machine_id: String,
    pub k: u64,
    pub shape: WorkloadShape,
    pub t_monomer: f64,
    pub t_scf_dimer: f64,
    pub t_es_dimer: f64,
    pub t_total: f64,
}

#[derive(Debug, Deserialize, Serialize)]
struct CsvRow {
    machine_id: String,
    k: u64,
    n_f: u64,
    i_m: u64,
    n_d: u64,
    n_es: u64,
    t_monomer: f64,
    t_scf_dimer: f64,
    t_es_dimer: f64,
    t_total: f64,
}

impl TimingRecord {
    pub fn validate(&self) -> Result<()> {
        let times = [
            self.t_monomer,
            self.t_scf_dimer,
            self.t_es_dimer,
            self.t_total,
        ];
        if times.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::Invalid(format!(
                "{} N_f={}: timings must be positive",
                self.machine_id, self.shape.n_f
            )));
        }
        if self.t_total < self.phase_times().into_iter().fold(0.0, f64::max) {
            return Err(Error::Invalid(format!(
                "{} N_f={}: total shorter than a phase",
                self.machine_id, self.shape.n_f
            )));
        }
        if self.k == 0 {
            return Err(Error::Invalid("k must be >= 1".into()));
        }
        Ok(())
    }

    pub fn phase_times(&self) -> [f64; 3] {
        [self.t_monomer, self.t_scf_dimer, self.t_es_dimer]
    }

    /// Regressors of each phase: monomer `[N_f I_m, N_f^2 I_m]`, SCF-dimer
    /// `[N_d, N_f N_d]`, ES-dimer `[N_es]`.
    fn regressors(&self) -> [Vec<f64>; 3] {
        let s = &self.shape;
        let (nf, im, nd, nes) = (s.n_f as f64, s.i_m as f64, s.n_d as f64, s.n_es as f64);
        [vec![nf * im, nf * nf * im], vec![nd, nf * nd], vec![nes]]
    }
}

/// Reads timing records from CSV with header
/// `machine_id,k,n_f,i_m,n_d,n_es,t_monomer,t_scf_dimer,t_es_dimer,t_total`.
pub fn read_records<R: Read>(reader: R) -> Result<Vec<TimingRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize::<CsvRow>() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = out.len() + 2;
        let rec = TimingRecord {
            machine_id: row.machine_id,
            k: row.k,
            shape: WorkloadShape {
                n_f: row.n_f,
                i_m: row.i_m,
                n_d: row.n_d,
                n_es: row.n_es,
            },
            t_monomer: row.t_monomer,
            t_scf_dimer: row.t_scf_dimer,
            t_es_dimer: row.t_es_dimer,
            t_total: row.t_total,
        };
        rec.validate().map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_records_path(path: impl AsRef<Path>) -> Result<Vec<TimingRecord>> {
    read_records(std::fs::File::open(path)?)
}

pub fn write_records<W: std::io::Write>(records: &[TimingRecord], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for r in records {
        wtr.serialize(CsvRow {
            machine_id: r.machine_id.clone(),
            k: r.k,
            n_f: r.shape.n_f,
            i_m: r.shape.i_m,
            n_d: r.shape.n_d,
            n_es: r.shape.n_es,
            t_monomer: r.t_monomer,
            t_scf_dimer: r.t_scf_dimer,
            t_es_dimer: r.t_es_dimer,
            t_total: r.t_total,
        })
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Noise-free records generated from the forward model. Total time is the
/// sum of the phases.
pub fn synthesize_records(
    params: &CostParameters,
    machines: &[(&str, u64, f64)],
    shapes: &[WorkloadShape],
) -> Vec<TimingRecord> {
    let mut out = Vec::new();
    for &(id, k, e) in machines {
        for shape in shapes {
            let tp = |w: f64| w / (k as f64 * e);
            let t_monomer = tp(crate::cost::work_monomer(shape, params));
            let t_scf_dimer = tp(crate::cost::work_dimer(shape, params));
            let t_es_dimer = tp(crate::cost::work_es(shape, params));
            out.push(TimingRecord {
                machine_id: id.to_string(),
                k,
                shape: *shape,
                t_monomer,
                t_scf_dimer,
                t_es_dimer,
                t_total: t_monomer + t_scf_dimer + t_es_dimer,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseResiduals {
    pub machine_id: String,
    pub n_f: u64,
    pub monomer: f64,
    pub scf_dimer: f64,
    pub es_dimer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub params: CostParameters,
    pub efficiencies: BTreeMap<String, f64>,
    pub reference: String,
    /// Relative residual `(model - measured) / measured` per record and phase.
    pub residuals: Vec<PhaseResiduals>,
    pub objective: f64,
    pub rounds: usize,
    pub objective_history: Vec<f64>,
}

fn objective(
    records: &[TimingRecord],
    theta: &[Vec<f64>; 3],
    inv_e: &BTreeMap<String, f64>,
) -> f64 {
    residuals(records, theta, inv_e)
        .iter()
        .map(|r| r.monomer.powi(2) + r.scf_dimer.powi(2) + r.es_dimer.powi(2))
        .sum()
}

fn residuals(
    records: &[TimingRecord],
    theta: &[Vec<f64>; 3],
    inv_e: &BTreeMap<String, f64>,
) -> Vec<PhaseResiduals> {
    records
        .iter()
        .map(|r| {
            let u = inv_e[&r.machine_id];
            let x = r.regressors();
            let t = r.phase_times();
            let rel = |p: usize| {
                let w: f64 = x[p].iter().zip(&theta[p]).map(|(a, b)| a * b).sum();
                w * u / (r.k as f64 * t[p]) - 1.0
            };
            PhaseResiduals {
                machine_id: r.machine_id.clone(),
                n_f: r.shape.n_f,
                monomer: rel(0),
                scf_dimer: rel(1),
                es_dimer: rel(2),
            }
        })
        .collect()
}

/// Closed-form coefficient step for one phase given inverse efficiencies.
fn solve_phase(
    records: &[&TimingRecord],
    phase: usize,
    inv_e: &BTreeMap<String, f64>,
) -> Result<Vec<f64>> {
    let ncol = if phase == 2 { 1 } else { 2 };
    let rows: Vec<Vec<f64>> = records
        .iter()
        .map(|r| {
            let scale = inv_e[&r.machine_id] / (r.k as f64 * r.phase_times()[phase]);
            r.regressors()[phase].iter().map(|x| x * scale).collect()
        })
        .collect();
    let a = DMatrix::from_fn(rows.len(), ncol, |i, j| rows[i][j]);
    // column scaling keeps the conditioning check meaningful
    let norms: Vec<f64> = (0..ncol).map(|j| a.column(j).norm()).collect();
    if norms.iter().any(|n| *n == 0.0) {
        return Err(Error::Identifiability(format!(
            "phase {phase} has an all-zero regressor column"
        )));
    }
    let scaled = DMatrix::from_fn(a.nrows(), ncol, |i, j| a[(i, j)] / norms[j]);
    let svd = scaled.clone().svd(true, true);
    let smin = svd.singular_values.min();
    let smax = svd.singular_values.max();
    if smin <= 1e-9 * smax {
        return Err(Error::Identifiability(format!(
            "phase {phase} design is rank deficient (need at least two distinct N_f)"
        )));
    }
    let ones = DVector::from_element(a.nrows(), 1.0);
    let sol = svd
        .solve(&ones, 0.0)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    Ok((0..ncol).map(|j| sol[j] / norms[j]).collect())
}

fn params_step(records: &[&TimingRecord], inv_e: &BTreeMap<String, f64>) -> Result<[Vec<f64>; 3]> {
    Ok([
        solve_phase(records, 0, inv_e)?,
        solve_phase(records, 1, inv_e)?,
        solve_phase(records, 2, inv_e)?,
    ])
}

/// Closed-form inverse-efficiency update for every non-reference machine.
fn efficiency_step(
    records: &[TimingRecord],
    theta: &[Vec<f64>; 3],
    reference: &str,
    inv_e: &mut BTreeMap<String, f64>,
) -> Result<()> {
    let machines: Vec<String> = inv_e.keys().cloned().collect();
    for m in machines {
        if m == reference {
            continue;
        }
        let (mut sb, mut sbb) = (0.0, 0.0);
        for r in records.iter().filter(|r| r.machine_id == m) {
            let x = r.regressors();
            let t = r.phase_times();
            for p in 0..3 {
                let w: f64 = x[p].iter().zip(&theta[p]).map(|(a, b)| a * b).sum();
                let b = w / (r.k as f64 * t[p]);
                sb += b;
                sbb += b * b;
            }
        }
        if !(sbb > 0.0) || !(sb > 0.0) {
            return Err(Error::Identifiability(format!(
                "efficiency of machine '{m}' is not determined by the data"
            )));
        }
        inv_e.insert(m, sb / sbb);
    }
    Ok(())
}

/// Fits cost coefficients and per-machine efficiencies.
pub fn fit(records: &[TimingRecord], reference: &str) -> Result<CalibrationResult> {
    for r in records {
        r.validate()?;
    }
    if !records.iter().any(|r| r.machine_id == reference) {
        return Err(Error::Invalid(format!(
            "reference machine '{reference}' has no records"
        )));
    }
    let mut distinct: Vec<u64> = records.iter().map(|r| r.shape.n_f).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Identifiability(
            "all records share one fragment count".into(),
        ));
    }

    let mut inv_e: BTreeMap<String, f64> = records
        .iter()
        .map(|r| (r.machine_id.clone(), 1.0))
        .collect();
    let all: Vec<&TimingRecord> = records.iter().collect();
    let ref_only: Vec<&TimingRecord> = records
        .iter()
        .filter(|r| r.machine_id == reference)
        .collect();

    // Seed from the reference machine alone when it pins the coefficients.
    let mut theta = match params_step(&ref_only, &inv_e) {
        Ok(t) => t,
        Err(_) => params_step(&all, &inv_e)?,
    };
    efficiency_step(records, &theta, reference, &mut inv_e)?;
    let mut obj = objective(records, &theta, &inv_e);
    let mut history = vec![obj];
    let mut rounds = 0;
    let mut rel_change = f64::INFINITY;
    while rounds < MAX_ROUNDS {
        rounds += 1;
        theta = params_step(&all, &inv_e)?;
        let mid = objective(records, &theta, &inv_e);
        efficiency_step(records, &theta, reference, &mut inv_e)?;
        let next = objective(records, &theta, &inv_e);
        let slack = 1e-12 * obj + 1e-26;
        if mid > obj + slack || next > mid + slack {
            return Err(Error::Numerical(format!(
                "objective increased during alternating step ({obj:e} -> {mid:e} -> {next:e})"
            )));
        }
        rel_change = if obj > 0.0 { (obj - next) / obj } else { 0.0 };
        obj = next;
        history.push(obj);
        if rel_change < REL_TOL || obj < 1e-28 {
            break;
        }
    }
    if !(rel_change < REL_TOL || obj < 1e-28) {
        return Err(Error::CalibrationDiverged {
            rounds,
            objective: obj,
            rel_change,
        });
    }

    let nd_slope = fit_nd(records).unwrap_or(CostParameters::TABLE_IV.nd_slope);
    let params = CostParameters {
        f_m0: theta[0][0],
        f_m1: theta[0][1],
        f_d0: theta[1][0],
        f_d1: theta[1][1],
        f_es0: theta[2][0],
        nd_slope,
    };
    let efficiencies = inv_e
        .iter()
        .map(|(m, u)| (m.clone(), if m == reference { 1.0 } else { 1.0 / u }))
        .collect();
    Ok(CalibrationResult {
        params,
        efficiencies,
        reference: reference.to_string(),
        residuals: residuals(records, &theta, &inv_e),
        objective: obj,
        rounds,
        objective_history: history,
    })
}

/// Zero-intercept least-squares slope of `N_d` against `N_f`.
pub fn fit_nd(records: &[TimingRecord]) -> Result<f64> {
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for r in records {
        let x = r.shape.n_f as f64;
        sxy += x * r.shape.n_d as f64;
        sxx += x * x;
    }
    if records.is_empty() || sxx == 0.0 {
        return Err(Error::Identifiability(
            "N_d slope needs at least one record with N_f > 0".into(),
        ));
    }
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseComparison {
    pub measured: f64,
    pub modeled: f64,
    pub rel_error: f64,
    /// Measured time per task of the phase (per monomer solve, per dimer).
    pub measured_per_task: f64,
    /// Measured time per fragment.
    pub measured_per_fragment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub machine_id: String,
    pub shape: WorkloadShape,
    pub monomer: PhaseComparison,
    pub scf_dimer: PhaseComparison,
    pub es_dimer: PhaseComparison,
    pub total: PhaseComparison,
}

/// Measured vs modeled times for every record under the given coefficients.
pub fn residual_report(
    params: &CostParameters,
    efficiencies: &BTreeMap<String, f64>,
    records: &[TimingRecord],
) -> Result<Vec<ResidualRow>> {
    records
        .iter()
        .map(|r| {
            let e = *efficiencies.get(&r.machine_id).ok_or_else(|| {
                Error::Invalid(format!("no efficiency for machine '{}'", r.machine_id))
            })?;
            let s = &r.shape;
            let ke = r.k as f64 * e;
            let nf = s.n_f as f64;
            let cmp = |measured: f64, modeled: f64, tasks: f64| PhaseComparison {
                measured,
                modeled,
                rel_error: (modeled - measured) / measured,
                measured_per_task: if tasks > 0.0 { measured / tasks } else { 0.0 },
                measured_per_fragment: if nf > 0.0 { measured / nf } else { 0.0 },
            };
            let m = crate::cost::work_monomer(s, params) / ke;
            let d = crate::cost::work_dimer(s, params) / ke;
            let es = crate::cost::work_es(s, params) / ke;
            Ok(ResidualRow {
                machine_id: r.machine_id.clone(),
                shape: *s,
                monomer: cmp(r.t_monomer, m, nf * s.i_m as f64),
                scf_dimer: cmp(r.t_scf_dimer, d, s.n_d as f64),
                es_dimer: cmp(r.t_es_dimer, es, s.n_es as f64),
                total: cmp(r.t_total, m + d + es, 1.0),
            })
        })
        .collect()
}

impl CalibrationResult {
    pub fn report(&self, records: &[TimingRecord]) -> Result<Vec<ResidualRow>> {
        residual_report(&self.params, &self.efficiencies, records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::paper_records;

    fn shapes() -> Vec<WorkloadShape> {
        [
            (106, 690, 4875),
            (561, 4192, 152_888),
            (1122, 8416, 620_465),
        ]
        .iter()
        .map(|&(n_f, n_d, n_es)| WorkloadShape {
            n_f,
            i_m: 17,
            n_d,
            n_es,
        })
        .collect()
    }

    fn truth() -> CostParameters {
        CostParameters {
            f_m0: 1.0,
            f_m1: 0.002,
            f_d0: 3.0,
            f_d1: 0.004,
            f_es0: 0.1,
            nd_slope: 7.5,
        }
    }

    #[test]
    fn synthetic_round_trip() {
        let recs = synthesize_records(&truth(), &[("a", 1, 1.0), ("b", 4, 0.25)], &shapes());
        let res = fit(&recs, "a").unwrap();
        let p = res.params;
        let t = truth();
        for (got, want) in [
            (p.f_m0, t.f_m0),
            (p.f_m1, t.f_m1),
            (p.f_d0, t.f_d0),
            (p.f_d1, t.f_d1),
            (p.f_es0, t.f_es0),
            (res.efficiencies["b"], 0.25),
        ] {
            assert!(((got - want) / want).abs() < 1e-8, "{got} vs {want}");
        }
        assert_eq!(res.efficiencies["a"], 1.0);
        for w in res.objective_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-300);
        }
        let report = res.report(&recs).unwrap();
        for row in report {
            for c in [row.monomer, row.scf_dimer, row.es_dimer, row.total] {
                assert!(c.rel_error.abs() < 1e-8);
            }
        }
    }

    #[test]
    fn paper_tables_fit_near_published() {
        let res = fit(&paper_records(), "ibm").unwrap();
        let p = res.params;
        let t = CostParameters::TABLE_IV;
        for (got, want) in [
            (p.f_m0, t.f_m0),
            (p.f_m1, t.f_m1),
            (p.f_d0, t.f_d0),
            (p.f_d1, t.f_d1),
            (p.f_es0, t.f_es0),
            (res.efficiencies["xeon"], 0.071),
        ] {
            assert!(((got - want) / want).abs() < 0.2, "{got} vs {want}");
        }
    }

    #[test]
    fn single_shape_is_not_identifiable() {
        let recs = synthesize_records(&truth(), &[("a", 1, 1.0)], &shapes()[..1]);
        assert!(matches!(fit(&recs, "a"), Err(Error::Identifiability(_))));
    }

    #[test]
    fn missing_reference() {
        let recs = synthesize_records(&truth(), &[("a", 1, 1.0)], &shapes());
        assert!(fit(&recs, "zzz").is_err());
    }

    #[test]
    fn nd_slope_examples() {
        let ibm: Vec<_> = paper_records()
            .into_iter()
            .filter(|r| r.machine_id == "ibm")
            .collect();
        assert!((fit_nd(&ibm).unwrap() - 7.50).abs() < 0.05);

        let mut recs = synthesize_records(&truth(), &[("a", 1, 1.0)], &shapes());
        for r in &mut recs {
            r.shape.n_d = 3 * r.shape.n_f;
        }
        assert!((fit_nd(&recs).unwrap() - 3.0).abs() < 1e-15);

        let one = vec![TimingRecord {
            shape: WorkloadShape {
                n_f: 1122,
                i_m: 17,
                n_d: 8416,
                n_es: 620_465,
            },
            ..recs[0].clone()
        }];
        assert!((fit_nd(&one).unwrap() - 8416.0 / 1122.0).abs() < 1e-15);
        assert!(fit_nd(&[]).is_err());
    }

    #[test]
    fn table_iv_residuals_on_ibm() {
        let eff: BTreeMap<_, _> = [("ibm".to_string(), 1.0), ("xeon".to_string(), 0.071)].into();
        let rows = residual_report(&CostParameters::TABLE_IV, &eff, &paper_records()).unwrap();
        for row in rows.iter().filter(|r| r.machine_id == "ibm") {
            for c in [row.monomer, row.scf_dimer, row.es_dimer] {
                assert!(c.rel_error.abs() <= 0.2);
            }
            assert!(row.total.rel_error.abs() <= 0.1);
        }
        // (Average) rows of the IBM table are per monomer solve
        let first = &rows[0];
        assert!((first.monomer.measured_per_task - 0.752).abs() < 1e-3);
        assert!(residual_report(&CostParameters::TABLE_IV, &eff, &[])
            .unwrap()
            .is_empty());
    }

    #[test]
    fn csv_parse_errors_carry_line() {
        let text = "machine_id,k,n_f,i_m,n_d,n_es,t_monomer,t_scf_dimer,t_es_dimer,t_total\n\
                    ibm,1,106,17,690,4875,1356,2037,398,3799\n\
                    ibm,1,oops,17,690,4875,1356,2037,398,3799\n";
        match read_records(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_round_trip() {
        let recs = paper_records();
        let mut buf = Vec::new();
        write_records(&recs, &mut buf).unwrap();
        assert_eq!(read_records(buf.as_slice()).unwrap(), recs);
    }
}
