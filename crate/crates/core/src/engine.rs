//! Fragment-energy engine on a charge-equilibration surrogate.
//!
//! Each fragment `I` carries site charges `q_I` with energy
//!
//! ```text
//! E_I(q) = 1/2 q^T (A_I + k S_I) q + chi_I^T q,   sum(q) = Q_I
//! ```
//!
//! where `A_I` is the hardness matrix and `S_I` couples distinct sites of the
//! fragment through the shielded kernel `g(r) = 1/sqrt(r^2 + sigma^2)`.
//! The reference (oracle) energy of the whole system adds `k q_k q_l g(r_kl)`
//! for every inter-fragment site pair and is minimised in one dense KKT solve.
//!
//! The fragment expansion follows the usual two-body recipe:
//!
//! 1. monomer loop: every fragment is solved in the bare `1/r` potential of all
//!    other fragments' charges, iterated (Jacobi sweeps with damping) until the
//!    charges stop moving;
//! 2. SCF-dimers: near pairs are relaxed jointly, coupled to each other by the
//!    shielded kernel and embedded in the frozen monomer charges of everything
//!    else;
//! 3. ES-dimers: far pairs get a frozen-charge electrostatic correction only;
//! 4. `E = sum_I E'_I + sum_SCF (E'_IJ - E'_I - E'_J) + sum_ES dE_IJ`.
//!
//! Embedded energies `E'_X` include the full interaction of `X` with its
//! environment. If a pair's charges are frozen at their monomer values and the
//! pair interaction uses the embedding kernel, then
//!
//! ```text
//! E'_IJ = E_I + E_J + C(I,J) + C(I, env\J) + C(J, env\I)
//! E'_I  = E_I + C(I, env)  = E_I + C(I,J) + C(I, env\J)
//! E'_IJ - E'_I - E'_J = C(I,J) - 2 C(I,J) = -C(I,J)
//! ```
//!
//! with `C` the bare Coulomb energy between monomer charges. That is the
//! ES-dimer correction. Because the shielded kernel differs from `1/r` by
//! `O(sigma^2 / r^3)`, the gap between the relaxed SCF-dimer term and the ES
//! term vanishes with pair separation.

use nalgebra::{DMatrix, DVector, LU};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::system::{distance, Fragment, FragmentSystem, PairClassification};

/// Dense-oracle size guard.
pub const MAX_ORACLE_SITES: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Convergence threshold on the max per-site charge change (e).
    pub tol: f64,
    pub max_iterations: usize,
    pub damping: f64,
    /// Shielding length of the short-range kernel (Å). `inf` disables it.
    pub sigma: f64,
    pub coulomb_constant: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iterations: 200,
            damping: 0.7,
            sigma: 1.0,
            coulomb_constant: 1.0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Invalid(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Invalid("max_iterations must be >= 1".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Invalid(format!(
                "damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Invalid(format!(
                "sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        if !self.coulomb_constant.is_finite() {
            return Err(Error::Invalid("coulomb_constant must be finite".into()));
        }
        Ok(())
    }

    fn shielded(&self, r: f64) -> f64 {
        if self.sigma.is_infinite() {
            0.0
        } else {
            1.0 / (r * r + self.sigma * self.sigma).sqrt()
        }
    }
}

/// Per-fragment site charges, aligned with each fragment's sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargeState {
    pub charges: Vec<Vec<f64>>,
}

impl ChargeState {
    pub fn zeros(system: &FragmentSystem) -> Self {
        Self {
            charges: system
                .fragments
                .iter()
                .map(|f| vec![0.0; f.len()])
                .collect(),
        }
    }

    pub fn fragment_sums(&self) -> Vec<f64> {
        self.charges.iter().map(|q| q.iter().sum()).collect()
    }

    fn check_against(&self, system: &FragmentSystem) -> Result<()> {
        if self.charges.len() != system.len()
            || self
                .charges
                .iter()
                .zip(&system.fragments)
                .any(|(q, f)| q.len() != f.len())
        {
            return Err(Error::Invalid("charge state does not match system".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonomerResult {
    pub charges: ChargeState,
    /// `E'_I`: internal energy plus bare interaction with all other fragments.
    pub embedded_energies: Vec<f64>,
    pub internal_energies: Vec<f64>,
    pub iterations_used: usize,
    pub converged: bool,
    pub last_delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DimerKind {
    Scf,
    Es,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimerCorrection {
    pub pair: (usize, usize),
    pub kind: DimerKind,
    pub value: f64,
}

/// How `solve_scf_dimer` treats the pair's charges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DimerMode {
    /// Joint minimisation with the shielded intra-pair kernel.
    #[default]
    Relaxed,
    /// Diagnostic: charges stay at monomer values, pair coupled through `1/r`.
    Frozen,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkCounters {
    pub monomer_solves: u64,
    pub scf_dimer_solves: u64,
    pub es_evaluations: u64,
    /// Site-site kernel evaluations spent building embedding potentials.
    pub potential_site_interactions: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fmo2Result {
    pub total_energy: f64,
    pub monomer_energy: f64,
    pub scf_dimer_energy: f64,
    pub es_dimer_energy: f64,
    pub monomer: MonomerResult,
    pub dimers: Vec<DimerCorrection>,
    pub counters: WorkCounters,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub energy: f64,
    pub charges: ChargeState,
}

fn check_index(system: &FragmentSystem, i: usize) -> Result<()> {
    if i >= system.len() {
        return Err(Error::Invalid(format!(
            "fragment index {i} out of range for {} fragments",
            system.len()
        )));
    }
    Ok(())
}

/// Bare-kernel potential at the sites of `target` from all fragments not in
/// `exclude`.
fn potential_excluding(
    system: &FragmentSystem,
    charges: &ChargeState,
    target: usize,
    exclude: &[usize],
    config: &EngineConfig,
) -> Result<Vec<f64>> {
    let frag = &system.fragments[target];
    let mut v = vec![0.0; frag.len()];
    for (j, other) in system.fragments.iter().enumerate() {
        if j == target || exclude.contains(&j) {
            continue;
        }
        for (k, site) in frag.sites.iter().enumerate() {
            let mut acc = 0.0;
            for (l, src) in other.sites.iter().enumerate() {
                let r = distance(&site.position, &src.position);
                if r == 0.0 {
                    return Err(Error::SingularGeometry {
                        a: target,
                        site_a: k,
                        b: j,
                        site_b: l,
                    });
                }
                acc += charges.charges[j][l] / r;
            }
            v[k] += acc;
        }
    }
    for x in &mut v {
        *x *= config.coulomb_constant;
    }
    Ok(v)
}

/// Bare `1/r` potential at the sites of fragment `target` generated by every
/// other fragment's charges.
pub fn external_potential(
    system: &FragmentSystem,
    charges: &ChargeState,
    target: usize,
    config: &EngineConfig,
) -> Result<Vec<f64>> {
    check_index(system, target)?;
    charges.check_against(system)?;
    potential_excluding(system, charges, target, &[], config)
}

/// Bare Coulomb energy between the charges of two fragments.
fn coulomb_bare(system: &FragmentSystem, charges: &ChargeState, i: usize, j: usize, k: f64) -> f64 {
    let (fi, fj) = (&system.fragments[i], &system.fragments[j]);
    let mut acc = 0.0;
    for (a, sa) in fi.sites.iter().enumerate() {
        for (b, sb) in fj.sites.iter().enumerate() {
            acc += charges.charges[i][a] * charges.charges[j][b]
                / distance(&sa.position, &sb.position);
        }
    }
    k * acc
}

/// `A + k S` for one fragment.
fn fragment_hessian(frag: &Fragment, config: &EngineConfig) -> Result<DMatrix<f64>> {
    let mut h = frag.hardness_matrix();
    let n = frag.len();
    for a in 0..n {
        for b in 0..a {
            let r = distance(&frag.sites[a].position, &frag.sites[b].position);
            if r == 0.0 && config.sigma == 0.0 {
                return Err(Error::SingularGeometry {
                    a: frag.id,
                    site_a: a,
                    b: frag.id,
                    site_b: b,
                });
            }
            let g = config.coulomb_constant * config.shielded(r);
            h[(a, b)] += g;
            h[(b, a)] += g;
        }
    }
    Ok(h)
}

fn quadratic_energy(h: &DMatrix<f64>, lin: &[f64], q: &[f64]) -> f64 {
    let qv = DVector::from_column_slice(q);
    let quad = 0.5 * qv.dot(&(h * &qv));
    quad + lin.iter().zip(q).map(|(a, b)| a * b).sum::<f64>()
}

/// Equality-constrained quadratic program: min 1/2 q^T H q + b^T q subject to
/// the charges of each block summing to its target.
struct Kkt {
    n: usize,
    blocks: Vec<(usize, usize, f64)>,
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl Kkt {
    fn new(h: &DMatrix<f64>, blocks: Vec<(usize, usize, f64)>) -> Result<Self> {
        let n = h.nrows();
        let m = blocks.len();
        let mut k = DMatrix::zeros(n + m, n + m);
        k.view_mut((0, 0), (n, n)).copy_from(h);
        for (c, &(start, len, _)) in blocks.iter().enumerate() {
            for s in start..start + len {
                k[(s, n + c)] = 1.0;
                k[(n + c, s)] = 1.0;
            }
        }
        if k.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite KKT matrix".into()));
        }
        let lu = k.lu();
        if !lu.is_invertible() {
            return Err(Error::Numerical("KKT matrix is singular".into()));
        }
        Ok(Self { n, blocks, lu })
    }

    fn solve(&self, lin: &[f64]) -> Result<Vec<f64>> {
        let m = self.blocks.len();
        let mut rhs = DVector::zeros(self.n + m);
        for (r, b) in lin.iter().enumerate() {
            rhs[r] = -b;
        }
        for (c, &(_, _, target)) in self.blocks.iter().enumerate() {
            rhs[self.n + c] = target;
        }
        let x = self
            .lu
            .solve(&rhs)
            .ok_or_else(|| Error::Numerical("KKT solve failed".into()))?;
        let q: Vec<f64> = x.iter().take(self.n).copied().collect();
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("KKT solution is not finite".into()));
        }
        Ok(q)
    }
}

struct MonomerSolver {
    hessian: DMatrix<f64>,
    kkt: Kkt,
}

impl MonomerSolver {
    fn new(frag: &Fragment, config: &EngineConfig) -> Result<Self> {
        let hessian = fragment_hessian(frag, config)?;
        let kkt = Kkt::new(&hessian, vec![(0, frag.len(), frag.net_charge)])?;
        Ok(Self { hessian, kkt })
    }

    fn solve(&self, frag: &Fragment, v_ext: &[f64]) -> Result<(Vec<f64>, f64)> {
        let lin: Vec<f64> = frag
            .electronegativity
            .iter()
            .zip(v_ext)
            .map(|(c, v)| c + v)
            .collect();
        let q = self.kkt.solve(&lin)?;
        let e = self.internal_energy(frag, &q);
        Ok((q, e))
    }

    fn internal_energy(&self, frag: &Fragment, q: &[f64]) -> f64 {
        quadratic_energy(&self.hessian, &frag.electronegativity, q)
    }
}

/// Solves one fragment in a fixed external potential. Returns the charges and
/// the internal energy (which excludes the `v_ext` term).
pub fn solve_monomer(
    fragment: &Fragment,
    v_ext: &[f64],
    config: &EngineConfig,
) -> Result<(Vec<f64>, f64)> {
    if v_ext.len() != fragment.len() {
        return Err(Error::Invalid(format!(
            "potential has {} entries for {} sites",
            v_ext.len(),
            fragment.len()
        )));
    }
    MonomerSolver::new(fragment, config)?.solve(fragment, v_ext)
}

/// Self-consistent monomer loop (Jacobi sweeps with linear damping).
///
/// The starting charges are the isolated-fragment solutions. A run that hits
/// `max_iterations` returns with `converged == false`.
pub fn scc_loop(
    system: &FragmentSystem,
    config: &EngineConfig,
    counters: &mut WorkCounters,
) -> Result<MonomerResult> {
    config.validate()?;
    let solvers = system
        .fragments
        .iter()
        .map(|f| MonomerSolver::new(f, config))
        .collect::<Result<Vec<_>>>()?;
    let total_sites = system.total_sites() as u64;

    let mut charges = ChargeState {
        charges: system
            .fragments
            .iter()
            .zip(&solvers)
            .map(|(f, s)| s.solve(f, &vec![0.0; f.len()]).map(|(q, _)| q))
            .collect::<Result<Vec<_>>>()?,
    };

    let d = config.damping;
    let mut converged = false;
    let mut iterations = 0;
    let mut last_delta = f64::INFINITY;
    while iterations < config.max_iterations {
        iterations += 1;
        let mut next = Vec::with_capacity(system.len());
        let mut delta: f64 = 0.0;
        for (i, (frag, solver)) in system.fragments.iter().zip(&solvers).enumerate() {
            let v = potential_excluding(system, &charges, i, &[], config)?;
            let (fresh, _) = solver.solve(frag, &v)?;
            counters.monomer_solves += 1;
            counters.potential_site_interactions +=
                frag.len() as u64 * (total_sites - frag.len() as u64);
            let mixed: Vec<f64> = charges.charges[i]
                .iter()
                .zip(&fresh)
                .map(|(old, new)| (1.0 - d) * old + d * new)
                .collect();
            for (old, new) in charges.charges[i].iter().zip(&mixed) {
                delta = delta.max((new - old).abs());
            }
            next.push(mixed);
        }
        charges = ChargeState { charges: next };
        last_delta = delta;
        if delta <= config.tol {
            converged = true;
            break;
        }
    }

    let mut internal_energies = Vec::with_capacity(system.len());
    let mut embedded_energies = Vec::with_capacity(system.len());
    for (i, (frag, solver)) in system.fragments.iter().zip(&solvers).enumerate() {
        let q = &charges.charges[i];
        let e_int = solver.internal_energy(frag, q);
        let v = potential_excluding(system, &charges, i, &[], config)?;
        let e_env: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
        internal_energies.push(e_int);
        embedded_energies.push(e_int + e_env);
    }

    Ok(MonomerResult {
        charges,
        embedded_energies,
        internal_energies,
        iterations_used: iterations,
        converged,
        last_delta,
    })
}

fn require_converged(monomer: &MonomerResult) -> Result<()> {
    if !monomer.converged {
        return Err(Error::NotConverged {
            iterations: monomer.iterations_used,
            last_delta: monomer.last_delta,
        });
    }
    Ok(())
}

fn check_pair(
    system: &FragmentSystem,
    monomer: &MonomerResult,
    pair: (usize, usize),
) -> Result<()> {
    check_index(system, pair.0)?;
    check_index(system, pair.1)?;
    if pair.0 == pair.1 {
        return Err(Error::Invalid(format!(
            "degenerate pair ({0}, {0})",
            pair.0
        )));
    }
    monomer.charges.check_against(system)
}

/// Embedded dimer energy `E'_IJ` for a pair.
pub fn solve_scf_dimer(
    system: &FragmentSystem,
    monomer: &MonomerResult,
    pair: (usize, usize),
    config: &EngineConfig,
    mode: DimerMode,
) -> Result<f64> {
    check_pair(system, monomer, pair)?;
    require_converged(monomer)?;
    dimer_energy(system, monomer, pair, config, mode)
}

fn dimer_energy(
    system: &FragmentSystem,
    monomer: &MonomerResult,
    (i, j): (usize, usize),
    config: &EngineConfig,
    mode: DimerMode,
) -> Result<f64> {
    let (fi, fj) = (&system.fragments[i], &system.fragments[j]);
    let (ni, nj) = (fi.len(), fj.len());
    let k = config.coulomb_constant;

    let mut env = potential_excluding(system, &monomer.charges, i, &[j], config)?;
    env.extend(potential_excluding(
        system,
        &monomer.charges,
        j,
        &[i],
        config,
    )?);

    match mode {
        DimerMode::Frozen => {
            let qi = &monomer.charges.charges[i];
            let qj = &monomer.charges.charges[j];
            let e_i = quadratic_energy(&fragment_hessian(fi, config)?, &fi.electronegativity, qi);
            let e_j = quadratic_energy(&fragment_hessian(fj, config)?, &fj.electronegativity, qj);
            let c = coulomb_bare(system, &monomer.charges, i, j, k);
            let e_env: f64 = qi.iter().chain(qj).zip(&env).map(|(a, b)| a * b).sum();
            Ok(e_i + e_j + c + e_env)
        }
        DimerMode::Relaxed => {
            let mut h = DMatrix::zeros(ni + nj, ni + nj);
            h.view_mut((0, 0), (ni, ni))
                .copy_from(&fragment_hessian(fi, config)?);
            h.view_mut((ni, ni), (nj, nj))
                .copy_from(&fragment_hessian(fj, config)?);
            for (a, sa) in fi.sites.iter().enumerate() {
                for (b, sb) in fj.sites.iter().enumerate() {
                    let g = k * config.shielded(distance(&sa.position, &sb.position));
                    h[(a, ni + b)] = g;
                    h[(ni + b, a)] = g;
                }
            }
            let kkt = Kkt::new(&h, vec![(0, ni, fi.net_charge), (ni, nj, fj.net_charge)])?;
            let lin: Vec<f64> = fi
                .electronegativity
                .iter()
                .chain(&fj.electronegativity)
                .zip(&env)
                .map(|(c, v)| c + v)
                .collect();
            let q = kkt.solve(&lin)?;
            Ok(quadratic_energy(&h, &lin, &q))
        }
    }
}

/// Frozen-charge electrostatic pair term, `-C(q_I, q_J)` with the bare kernel.
pub fn es_dimer_correction(
    system: &FragmentSystem,
    monomer: &MonomerResult,
    pair: (usize, usize),
    config: &EngineConfig,
) -> Result<f64> {
    check_pair(system, monomer, pair)?;
    require_converged(monomer)?;
    Ok(-coulomb_bare(
        system,
        &monomer.charges,
        pair.0,
        pair.1,
        config.coulomb_constant,
    ))
}

/// Two-body fragment expansion of the total energy.
///
/// A non-converged monomer loop is reported through `converged == false`
/// on the result; the dimer terms are still evaluated on the last charges.
pub fn fmo2_total_energy(
    system: &FragmentSystem,
    cls: &PairClassification,
    config: &EngineConfig,
) -> Result<Fmo2Result> {
    let n = system.len();
    for &(i, j) in cls.scf_pairs.iter().chain(&cls.es_pairs) {
        if i >= j || j >= n {
            return Err(Error::Invalid(format!(
                "pair ({i}, {j}) inconsistent with {n} fragments"
            )));
        }
    }
    if cls.n_pairs() != n * n.saturating_sub(1) / 2 {
        return Err(Error::Invalid(
            "classification does not cover every fragment pair".into(),
        ));
    }

    let mut counters = WorkCounters::default();
    let monomer = scc_loop(system, config, &mut counters)?;
    let e = &monomer.embedded_energies;

    let mut dimers = Vec::with_capacity(cls.n_pairs());
    for &(i, j) in &cls.scf_pairs {
        let e_ij = dimer_energy(system, &monomer, (i, j), config, DimerMode::Relaxed)?;
        counters.scf_dimer_solves += 1;
        dimers.push(DimerCorrection {
            pair: (i, j),
            kind: DimerKind::Scf,
            value: e_ij - e[i] - e[j],
        });
    }
    for &(i, j) in &cls.es_pairs {
        let value = -coulomb_bare(system, &monomer.charges, i, j, config.coulomb_constant);
        counters.es_evaluations += 1;
        dimers.push(DimerCorrection {
            pair: (i, j),
            kind: DimerKind::Es,
            value,
        });
    }

    let monomer_energy: f64 = e.iter().sum();
    let scf_dimer_energy: f64 = dimers
        .iter()
        .filter(|d| d.kind == DimerKind::Scf)
        .map(|d| d.value)
        .sum();
    let es_dimer_energy: f64 = dimers
        .iter()
        .filter(|d| d.kind == DimerKind::Es)
        .map(|d| d.value)
        .sum();

    Ok(Fmo2Result {
        total_energy: monomer_energy + scf_dimer_energy + es_dimer_energy,
        monomer_energy,
        scf_dimer_energy,
        es_dimer_energy,
        converged: monomer.converged,
        monomer,
        dimers,
        counters,
    })
}

/// Full Hessian of the reference energy: shielded coupling between every
/// pair of distinct sites, hardness on the fragment blocks.
fn full_hessian(system: &FragmentSystem, config: &EngineConfig) -> Result<DMatrix<f64>> {
    let n = system.total_sites();
    let mut h = DMatrix::zeros(n, n);
    let mut offsets = Vec::with_capacity(system.len());
    let mut off = 0;
    for frag in &system.fragments {
        offsets.push(off);
        h.view_mut((off, off), (frag.len(), frag.len()))
            .copy_from(&fragment_hessian(frag, config)?);
        off += frag.len();
    }
    let k = config.coulomb_constant;
    for (i, fi) in system.fragments.iter().enumerate() {
        for (j, fj) in system.fragments.iter().enumerate().skip(i + 1) {
            for (a, sa) in fi.sites.iter().enumerate() {
                for (b, sb) in fj.sites.iter().enumerate() {
                    let r = distance(&sa.position, &sb.position);
                    if r == 0.0 && config.sigma == 0.0 {
                        return Err(Error::SingularGeometry {
                            a: i,
                            site_a: a,
                            b: j,
                            site_b: b,
                        });
                    }
                    let g = k * config.shielded(r);
                    h[(offsets[i] + a, offsets[j] + b)] = g;
                    h[(offsets[j] + b, offsets[i] + a)] = g;
                }
            }
        }
    }
    Ok(h)
}

fn flatten(system: &FragmentSystem, charges: &ChargeState) -> (Vec<f64>, Vec<f64>) {
    let chi = system
        .fragments
        .iter()
        .flat_map(|f| f.electronegativity.iter().copied())
        .collect();
    let q = charges.charges.iter().flatten().copied().collect();
    (chi, q)
}

/// Reference energy of the whole system at the given charges (shielded
/// kernel everywhere). At monomer charges this is the frozen-charge
/// one-body energy.
pub fn system_energy(
    system: &FragmentSystem,
    charges: &ChargeState,
    config: &EngineConfig,
) -> Result<f64> {
    charges.check_against(system)?;
    let h = full_hessian(system, config)?;
    let (chi, q) = flatten(system, charges);
    Ok(quadratic_energy(&h, &chi, &q))
}

/// Exact minimiser of the reference energy via one dense KKT solve.
pub fn full_system_oracle(system: &FragmentSystem, config: &EngineConfig) -> Result<OracleResult> {
    let sites = system.total_sites();
    if sites > MAX_ORACLE_SITES {
        return Err(Error::Capacity {
            sites,
            limit: MAX_ORACLE_SITES,
        });
    }
    let h = full_hessian(system, config)?;
    let mut blocks = Vec::with_capacity(system.len());
    let mut off = 0;
    for frag in &system.fragments {
        blocks.push((off, frag.len(), frag.net_charge));
        off += frag.len();
    }
    let chi: Vec<f64> = system
        .fragments
        .iter()
        .flat_map(|f| f.electronegativity.iter().copied())
        .collect();
    let q = Kkt::new(&h, blocks)?.solve(&chi)?;
    let energy = quadratic_energy(&h, &chi, &q);
    let mut charges = Vec::with_capacity(system.len());
    let mut off = 0;
    for frag in &system.fragments {
        charges.push(q[off..off + frag.len()].to_vec());
        off += frag.len();
    }
    Ok(OracleResult {
        energy,
        charges: ChargeState { charges },
    })
}
