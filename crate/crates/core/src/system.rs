//! Fragment-decomposed molecular systems.
//!
//! A [`FragmentSystem`] is an ordered list of fragments, each carrying site
//! geometry plus the electronegativity vector and hardness matrix used by the
//! charge-equilibration engine. Pairs of fragments are split into SCF-dimers
//! (near, treated explicitly) and ES-dimers (far, electrostatic correction
//! only) by a distance threshold.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub id: usize,
    /// Position in Å.
    pub position: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fragment {
    pub id: usize,
    #[serde(default)]
    pub net_charge: f64,
    pub electronegativity: Vec<f64>,
    /// Row-major, symmetric positive definite.
    pub hardness: Vec<Vec<f64>>,
    pub sites: Vec<Site>,
}

impl Fragment {
    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn hardness_matrix(&self) -> DMatrix<f64> {
        let n = self.sites.len();
        DMatrix::from_fn(n, n, |r, c| self.hardness[r][c])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.sites.len();
        if n == 0 {
            return Err(Error::Invalid(format!("fragment {} has no sites", self.id)));
        }
        if self.electronegativity.len() != n {
            return Err(Error::Invalid(format!(
                "fragment {}: {} electronegativities for {} sites",
                self.id,
                self.electronegativity.len(),
                n
            )));
        }
        if self.hardness.len() != n || self.hardness.iter().any(|row| row.len() != n) {
            return Err(Error::Invalid(format!(
                "fragment {}: hardness must be {n}x{n}",
                self.id
            )));
        }
        if !self.net_charge.is_finite() || self.electronegativity.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid(format!(
                "fragment {}: non-finite charge parameters",
                self.id
            )));
        }
        let mut ids = HashSet::new();
        for site in &self.sites {
            if site.position.iter().any(|x| !x.is_finite()) {
                return Err(Error::Invalid(format!(
                    "fragment {} site {}: non-finite position",
                    self.id, site.id
                )));
            }
            if !ids.insert(site.id) {
                return Err(Error::Invalid(format!(
                    "fragment {}: duplicate site id {}",
                    self.id, site.id
                )));
            }
        }
        let a = self.hardness_matrix();
        let scale = a.amax().max(f64::MIN_POSITIVE);
        for r in 0..n {
            for c in 0..r {
                if (a[(r, c)] - a[(c, r)]).abs() > 1e-12 * scale {
                    return Err(Error::Invalid(format!(
                        "fragment {}: hardness is not symmetric",
                        self.id
                    )));
                }
            }
        }
        if a.iter().any(|x| !x.is_finite()) || a.cholesky().is_none() {
            return Err(Error::Invalid(format!(
                "fragment {}: hardness is not positive definite",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragmentSystem {
    #[serde(default)]
    pub label: String,
    pub fragments: Vec<Fragment>,
}

impl FragmentSystem {
    /// Builds a system, checking every fragment and id uniqueness.
    pub fn new(label: impl Into<String>, fragments: Vec<Fragment>) -> Result<Self> {
        let system = Self {
            label: label.into(),
            fragments,
        };
        system.validate()?;
        Ok(system)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fragments.is_empty() {
            return Err(Error::Invalid("system has no fragments".into()));
        }
        let mut ids = HashSet::new();
        for frag in &self.fragments {
            frag.validate()?;
            if !ids.insert(frag.id) {
                return Err(Error::Invalid(format!("duplicate fragment id {}", frag.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.fragments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fragments.is_empty()
    }

    pub fn total_sites(&self) -> usize {
        self.fragments.iter().map(Fragment::len).sum()
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let system: Self = serde_json::from_str(text)?;
        system.validate()?;
        Ok(system)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub(crate) fn distance(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Minimum site-to-site distance between two fragments.
pub fn min_distance(a: &Fragment, b: &Fragment) -> f64 {
    let mut best = f64::INFINITY;
    for sa in &a.sites {
        for sb in &b.sites {
            best = best.min(distance(&sa.position, &sb.position));
        }
    }
    best
}

/// SCF/ES split of all fragment pairs. Pairs hold indices into
/// `FragmentSystem::fragments`, always with `i < j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairClassification {
    pub scf_pairs: Vec<(usize, usize)>,
    pub es_pairs: Vec<(usize, usize)>,
    pub threshold: f64,
}

impl PairClassification {
    pub fn n_pairs(&self) -> usize {
        self.scf_pairs.len() + self.es_pairs.len()
    }
}

/// Pairs at distance `<= threshold` are SCF-dimers, the rest ES-dimers.
pub fn classify_pairs(system: &FragmentSystem, threshold: f64) -> Result<PairClassification> {
    if !(threshold > 0.0) {
        return Err(Error::Invalid(format!(
            "threshold must be positive, got {threshold}"
        )));
    }
    let n = system.fragments.len();
    let mut scf_pairs = Vec::new();
    let mut es_pairs = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if min_distance(&system.fragments[i], &system.fragments[j]) <= threshold {
                scf_pairs.push((i, j));
            } else {
                es_pairs.push((i, j));
            }
        }
    }
    Ok(PairClassification {
        scf_pairs,
        es_pairs,
        threshold,
    })
}

/// The abstract workload consumed by the cost model: fragment count `n_f`,
/// monomer-loop count `i_m`, SCF-dimer count `n_d` and ES-dimer count `n_es`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadShape {
    pub n_f: u64,
    pub i_m: u64,
    pub n_d: u64,
    pub n_es: u64,
}

impl WorkloadShape {
    pub fn total_pairs(n_f: u64) -> u64 {
        if n_f < 2 {
            0
        } else {
            n_f * (n_f - 1) / 2
        }
    }
}

pub fn workload_shape(cls: &PairClassification, n_f: u64, i_m: u64) -> Result<WorkloadShape> {
    let n_d = cls.scf_pairs.len() as u64;
    let n_es = cls.es_pairs.len() as u64;
    let expected = WorkloadShape::total_pairs(n_f);
    if n_d + n_es != expected {
        return Err(Error::Invalid(format!(
            "classification has {} pairs but {n_f} fragments imply {expected}",
            n_d + n_es
        )));
    }
    Ok(WorkloadShape {
        n_f,
        i_m,
        n_d,
        n_es,
    })
}

/// Seeded quasi-linear chain of fragments with diagonally dominant hardness.
///
/// Fragment centres sit `spacing` Å apart along x with a small transverse
/// wobble; sites are scattered within a ball of radius `min(0.8, 0.2*spacing)`
/// around the centre. Net charges are drawn from {-1, 0, 0, +1}.
pub fn generate_chain(
    n_f: usize,
    sites_per_fragment: usize,
    spacing: f64,
    seed: u64,
) -> Result<FragmentSystem> {
    if n_f == 0 || sites_per_fragment == 0 {
        return Err(Error::Invalid(
            "chain needs at least one fragment and one site".into(),
        ));
    }
    if !(spacing > 0.0) {
        return Err(Error::Invalid(format!(
            "spacing must be positive, got {spacing}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = (0.2 * spacing).min(0.8);
    let wobble = 0.1 * spacing;
    let mut fragments = Vec::with_capacity(n_f);
    for f in 0..n_f {
        let centre = [
            f as f64 * spacing,
            rng.gen_range(-wobble..=wobble),
            rng.gen_range(-wobble..=wobble),
        ];
        let sites = (0..sites_per_fragment)
            .map(|s| {
                let offset = if sites_per_fragment == 1 {
                    [0.0; 3]
                } else {
                    random_in_ball(&mut rng, radius)
                };
                Site {
                    id: s,
                    position: [
                        centre[0] + offset[0],
                        centre[1] + offset[1],
                        centre[2] + offset[2],
                    ],
                }
            })
            .collect();
        let electronegativity = (0..sites_per_fragment)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let mut hardness = vec![vec![0.0f64; sites_per_fragment]; sites_per_fragment];
        for r in 0..sites_per_fragment {
            for c in 0..r {
                let v = rng.gen_range(-0.3..0.3);
                hardness[r][c] = v;
                hardness[c][r] = v;
            }
        }
        for r in 0..sites_per_fragment {
            let off: f64 = (0..sites_per_fragment)
                .filter(|&c| c != r)
                .map(|c| hardness[r][c].abs())
                .sum();
            hardness[r][r] = off + rng.gen_range(2.0..4.0);
        }
        let net_charge = match rng.gen_range(0..4) {
            0 => -1.0,
            3 => 1.0,
            _ => 0.0,
        };
        fragments.push(Fragment {
            id: f,
            net_charge,
            electronegativity,
            hardness,
            sites,
        });
    }
    FragmentSystem::new(
        format!("chain-{n_f}x{sites_per_fragment}-s{seed}"),
        fragments,
    )
}

fn random_in_ball(rng: &mut ChaCha8Rng, radius: f64) -> Vec3 {
    loop {
        let v = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let r2: f64 = v.iter().map(|x| x * x).sum();
        if r2 <= 1.0 && r2 > 0.01 {
            return [v[0] * radius, v[1] * radius, v[2] * radius];
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn point_fragment(id: usize, pos: Vec3) -> Fragment {
        Fragment {
            id,
            net_charge: 0.0,
            electronegativity: vec![0.0],
            hardness: vec![vec![1.0]],
            sites: vec![Site {
                id: 0,
                position: pos,
            }],
        }
    }

    fn two_site(id: usize, a: Vec3, b: Vec3) -> Fragment {
        Fragment {
            id,
            net_charge: 0.0,
            electronegativity: vec![0.0, 0.0],
            hardness: vec![vec![2.0, 0.0], vec![0.0, 2.0]],
            sites: vec![Site { id: 0, position: a }, Site { id: 1, position: b }],
        }
    }

    #[test]
    fn min_distance_examples() {
        let a = point_fragment(0, [0.0; 3]);
        let b = point_fragment(1, [3.0, 0.0, 0.0]);
        assert_eq!(min_distance(&a, &b), 3.0);
        assert_eq!(min_distance(&b, &a), 3.0);
        assert_eq!(min_distance(&a, &a.clone()), 0.0);

        let c = two_site(0, [0.0; 3], [1.0, 0.0, 0.0]);
        let d = two_site(1, [5.0, 0.0, 0.0], [9.0, 0.0, 0.0]);
        assert_eq!(min_distance(&c, &d), 4.0);
    }

    #[test]
    fn colinear_classification() {
        let sys = FragmentSystem::new(
            "line",
            vec![
                point_fragment(1, [0.0; 3]),
                point_fragment(2, [5.0, 0.0, 0.0]),
                point_fragment(3, [10.0, 0.0, 0.0]),
            ],
        )
        .unwrap();
        let cls = classify_pairs(&sys, 6.0).unwrap();
        assert_eq!(cls.scf_pairs, vec![(0, 1), (1, 2)]);
        assert_eq!(cls.es_pairs, vec![(0, 2)]);
        assert_eq!(
            workload_shape(&cls, 3, 1).unwrap(),
            WorkloadShape {
                n_f: 3,
                i_m: 1,
                n_d: 2,
                n_es: 1
            }
        );

        let all = classify_pairs(&sys, 1e300).unwrap();
        assert_eq!(all.scf_pairs.len(), 3);
        assert!(all.es_pairs.is_empty());
    }

    #[test]
    fn threshold_tie_is_scf() {
        let sys = FragmentSystem::new(
            "tie",
            vec![
                point_fragment(0, [0.0; 3]),
                point_fragment(1, [6.0, 0.0, 0.0]),
            ],
        )
        .unwrap();
        assert_eq!(classify_pairs(&sys, 6.0).unwrap().scf_pairs, vec![(0, 1)]);
    }

    #[test]
    fn far_pair_is_es() {
        let sys = FragmentSystem::new(
            "far",
            vec![
                point_fragment(0, [0.0; 3]),
                point_fragment(1, [7.0, 0.0, 0.0]),
            ],
        )
        .unwrap();
        let cls = classify_pairs(&sys, 6.0).unwrap();
        assert!(cls.scf_pairs.is_empty());
        assert_eq!(cls.es_pairs, vec![(0, 1)]);
    }

    #[test]
    fn bad_threshold_rejected() {
        let sys = generate_chain(2, 1, 3.0, 0).unwrap();
        assert!(classify_pairs(&sys, 0.0).is_err());
        assert!(classify_pairs(&sys, f64::NAN).is_err());
    }

    #[test]
    fn inconsistent_shape_rejected() {
        let sys = generate_chain(4, 1, 3.0, 0).unwrap();
        let cls = classify_pairs(&sys, 4.0).unwrap();
        assert!(workload_shape(&cls, 5, 17).is_err());
        assert!(workload_shape(&cls, 4, 17).is_ok());
    }

    #[test]
    fn chain_is_reproducible() {
        let a = generate_chain(3, 1, 5.0, 7).unwrap();
        let b = generate_chain(3, 1, 5.0, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_chain(3, 1, 5.0, 8).unwrap());
    }

    #[test]
    fn single_fragment_chain() {
        let sys = generate_chain(1, 3, 5.0, 1).unwrap();
        assert_eq!(sys.len(), 1);
        let cls = classify_pairs(&sys, 100.0).unwrap();
        assert_eq!(cls.n_pairs(), 0);
    }

    #[test]
    fn chain_is_contact_sparse() {
        let sys = generate_chain(50, 2, 4.0, 1).unwrap();
        let cls = classify_pairs(&sys, 9.0).unwrap();
        let ratio = cls.scf_pairs.len() as f64 / 50.0;
        assert!((1.0..=3.0).contains(&ratio), "n_d/n_f = {ratio}");
    }

    #[test]
    fn loader_rejects_indefinite_hardness() {
        let text = r#"{"label":"bad","fragments":[{"id":0,"net_charge":0,
            "electronegativity":[0,0],"hardness":[[1,2],[2,1]],
            "sites":[{"id":0,"position":[0,0,0]},{"id":1,"position":[1,0,0]}]}]}"#;
        let err = FragmentSystem::from_json_str(text).unwrap_err();
        assert!(err.to_string().contains("positive definite"));
    }

    #[test]
    fn loader_rejects_duplicate_ids() {
        let mut sys = generate_chain(2, 1, 3.0, 0).unwrap();
        sys.fragments[1].id = sys.fragments[0].id;
        assert!(FragmentSystem::from_json_str(&sys.to_json().unwrap()).is_err());
    }

    #[test]
    fn json_round_trip() {
        let sys = generate_chain(4, 3, 4.0, 11).unwrap();
        let back = FragmentSystem::from_json_str(&sys.to_json().unwrap()).unwrap();
        assert_eq!(sys, back);
    }
}
