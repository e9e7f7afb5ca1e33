//! Mode-dependence vectors of pairwise couplings, the target-neighbor
//! crosstalk matrix, its null space (the crosstalk-insensitive subspace),
//! the independence metric, and the analytic cosine insensitive vectors
//! available for sinusoidal mode sets.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::modes::ModeSet;

/// Relative singular-value threshold for rank decisions on the crosstalk
/// matrix. Mirror-symmetric strings duplicate columns exactly (for 3 ions,
/// g(1,2) = g(2,3)), so the rank must collapse cleanly.
pub const RANK_RTOL: f64 = 1e-9;

/// A two-qubit gate request: target pair, illuminated neighbors, rotation
/// angle, and the crosstalk fraction used in simulation.
///
/// Ion indices are 1-based throughout the public API.
#[derive(Debug, Clone)]
pub struct GateSpec {
    pub t1: usize,
    pub t2: usize,
    /// Crosstalk-affected neighbor ions, ascending, disjoint from the targets.
    pub neighbors: Vec<usize>,
    /// Target XX rotation angle, radians.
    pub theta: f64,
    /// Neighbor illumination fraction, in [0, 1).
    pub epsilon: f64,
}

impl GateSpec {
    /// Default neighbor set {t1-1, t1+1, t2-1, t2+1}, clipped to the string
    /// and excluding the targets themselves. Edge targets shrink the set.
    pub fn new(n: usize, t1: usize, t2: usize, theta: f64, epsilon: f64) -> Result<Self> {
        let mut neighbors = Vec::new();
        for c in [
            t1.wrapping_sub(1),
            t1 + 1,
            t2.wrapping_sub(1),
            t2 + 1,
        ] {
            if (1..=n).contains(&c) && c != t1 && c != t2 && !neighbors.contains(&c) {
                neighbors.push(c);
            }
        }
        neighbors.sort_unstable();
        Self::with_neighbors(n, t1, t2, neighbors, theta, epsilon)
    }

    /// Explicit neighbor set, validated against the string.
    pub fn with_neighbors(
        n: usize,
        t1: usize,
        t2: usize,
        neighbors: Vec<usize>,
        theta: f64,
        epsilon: f64,
    ) -> Result<Self> {
        if t1 == 0 || t2 == 0 || t1 > n || t2 > n {
            return Err(Error::InvalidGate(format!(
                "targets ({t1},{t2}) out of range for {n} ions"
            )));
        }
        if t1 >= t2 {
            return Err(Error::InvalidGate(format!("targets must satisfy t1 < t2, got ({t1},{t2})")));
        }
        if neighbors.iter().any(|&m| m == t1 || m == t2 || m == 0 || m > n) {
            return Err(Error::InvalidGate(format!(
                "neighbors {neighbors:?} must lie in [1,{n}] and avoid the targets"
            )));
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::InvalidGate(format!("epsilon must be in [0,1), got {epsilon}")));
        }
        Ok(Self { t1, t2, neighbors, theta, epsilon })
    }

    /// Target-neighbor index pairs (t, n), targets in order, neighbors ascending.
    pub fn crosstalk_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::with_capacity(2 * self.neighbors.len());
        for &t in [self.t1, self.t2].iter() {
            for &n in &self.neighbors {
                pairs.push((t, n));
            }
        }
        pairs
    }
}

/// Per-spec coupling geometry: target dependence vector, crosstalk matrix,
/// its null space, and the independence metric.
#[derive(Debug, Clone)]
pub struct CouplingAnalysis {
    /// g(t1,t2), length N.
    pub g_target: DVector<f64>,
    /// Columns are g(t,n) over the crosstalk pairs; N x |pairs|.
    pub crosstalk_matrix: DMatrix<f64>,
    /// Orthonormal columns spanning {chi : R^T chi = 0}.
    pub null_basis: DMatrix<f64>,
    /// Norm of the projection of unit-normalized g_target onto the null
    /// space; in [0, 1].
    pub independence: f64,
}

/// Mode-dependence vector g(j1,j2)_m = b[m][j1] b[m][j2] (1-based ions).
pub fn g_vector(modes: &ModeSet, j1: usize, j2: usize) -> DVector<f64> {
    let b = &modes.participation;
    DVector::from_fn(modes.n(), |m, _| b[(m, j1 - 1)] * b[(m, j2 - 1)])
}

/// Crosstalk geometry for a gate spec.
pub fn crosstalk_analysis(modes: &ModeSet, spec: &GateSpec) -> Result<CouplingAnalysis> {
    let n = modes.n();
    if spec.t2 > n || spec.neighbors.iter().any(|&m| m > n) {
        return Err(Error::InvalidGate(format!(
            "spec targets ({},{}) / neighbors {:?} exceed the {n}-ion string",
            spec.t1, spec.t2, spec.neighbors
        )));
    }
    let pairs = spec.crosstalk_pairs();
    let mut r = DMatrix::zeros(n, pairs.len());
    for (k, &(t, nb)) in pairs.iter().enumerate() {
        r.set_column(k, &g_vector(modes, t.min(nb), t.max(nb)));
    }
    let null_basis = linalg::null_basis(&r.transpose(), RANK_RTOL);
    let g_target = g_vector(modes, spec.t1, spec.t2);
    let g_hat = &g_target / g_target.norm();
    let independence = (null_basis.transpose() * g_hat).norm();
    Ok(CouplingAnalysis { g_target, crosstalk_matrix: r, null_basis, independence })
}

/// Upper-triangular matrix of independence values for every target pair
/// under the default neighbor rule. Entry (t1-1, t2-1), t1 < t2.
pub fn independence_map(modes: &ModeSet) -> DMatrix<f64> {
    let n = modes.n();
    let mut map = DMatrix::zeros(n, n);
    for t1 in 1..=n {
        for t2 in (t1 + 1)..=n {
            let spec = GateSpec::new(n, t1, t2, std::f64::consts::FRAC_PI_4, 0.0)
                .expect("valid pair");
            let analysis = crosstalk_analysis(modes, &spec).expect("valid spec");
            map[(t1 - 1, t2 - 1)] = analysis.independence;
        }
    }
    map
}

/// Pairs whose independence exceeds `threshold`, row-major order.
pub fn feasible_pairs(map: &DMatrix<f64>, threshold: f64) -> Vec<(usize, usize)> {
    let n = map.nrows();
    let mut out = Vec::new();
    for t1 in 1..=n {
        for t2 in (t1 + 1)..=n {
            if map[(t1 - 1, t2 - 1)] > threshold {
                out.push((t1, t2));
            }
        }
    }
    out
}

/// Analytic insensitive vector C(h)_m = 2 cos(h (m-1) pi / n), h = t2 - t1,
/// for sinusoidal modes with interior targets (2 <= t1 < t2 <= n-1).
///
/// Against the sinusoidal dependence vectors the cosine acts as an index
/// shift, giving C(h) . g(j1,j2) = d_{h,j2-j1} + d_{h,j1+j2-1} +
/// d_{h,2n+1-j1-j2}. The target pair always contributes exactly 1. A
/// crosstalk pair (t, t+-1) can still resonate through the second or third
/// delta (h in {1, 2 t1 - 2, 2 t1, 2n - 2 t2, 2n + 2 - 2 t2}); see
/// `resonant_crosstalk` for the enumeration.
pub fn analytic_insensitive_chi(n: usize, t1: usize, t2: usize) -> Result<DVector<f64>> {
    if !(t1 >= 2 && t1 < t2 && t2 <= n - 1) {
        return Err(Error::EdgeTargets { t1, t2, n });
    }
    let h = (t2 - t1) as f64;
    Ok(DVector::from_fn(n, |m, _| {
        2.0 * (h * m as f64 * std::f64::consts::PI / n as f64).cos()
    }))
}

/// The values of h = t2 - t1 at which some default crosstalk pair of
/// (t1, t2) resonates with C(h), derived from the delta identity above.
/// At these targets the cosine vector fails to annihilate one crosstalk
/// pair (it hits a sum delta rather than the difference delta).
pub fn resonant_crosstalk(n: usize, t1: usize, t2: usize) -> bool {
    let h = t2 - t1;
    h == 1
        || h == 2 * t1 - 2
        || h == 2 * t1
        || h + 2 * t2 == 2 * n
        || h + 2 * t2 == 2 * n + 2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modes::{harmonic_modes, sinusoidal_modes, TrapConfig};
    use std::f64::consts::{FRAC_PI_4, TAU};

    fn modes3() -> ModeSet {
        harmonic_modes(&TrapConfig::yb171(3, TAU * 0.7e6, TAU * 2.506e6)).unwrap()
    }

    #[test]
    fn default_neighbors_clip_at_edges() {
        let spec = GateSpec::new(3, 1, 3, FRAC_PI_4, 0.1).unwrap();
        assert_eq!(spec.neighbors, vec![2]);
        let spec = GateSpec::new(12, 3, 7, FRAC_PI_4, 0.1).unwrap();
        assert_eq!(spec.neighbors, vec![2, 4, 6, 8]);
        assert_eq!(spec.crosstalk_pairs().len(), 8);
        let spec = GateSpec::new(12, 1, 12, FRAC_PI_4, 0.1).unwrap();
        assert_eq!(spec.neighbors, vec![2, 11]);
    }

    #[test]
    fn adjacent_targets_share_no_neighbor_duplicates() {
        let spec = GateSpec::new(12, 5, 6, FRAC_PI_4, 0.1).unwrap();
        assert_eq!(spec.neighbors, vec![4, 7]);
    }

    #[test]
    fn three_ion_g_vectors_match_hand_values() {
        let modes = modes3();
        let g13 = g_vector(&modes, 1, 3);
        for (k, v) in [(0, 1.0 / 6.0), (1, -0.5), (2, 1.0 / 3.0)] {
            assert!((g13[k] - v).abs() < 1e-9);
        }
        let g12 = g_vector(&modes, 1, 2);
        let g23 = g_vector(&modes, 2, 3);
        for (k, v) in [(0, -1.0 / 3.0), (1, 0.0), (2, 1.0 / 3.0)] {
            assert!((g12[k] - v).abs() < 1e-9);
            assert!((g23[k] - v).abs() < 1e-9, "mirror pair");
        }
    }

    #[test]
    fn diagonal_g_is_a_probability_vector() {
        let modes = modes3();
        for j in 1..=3 {
            let g = g_vector(&modes, j, j);
            assert!(g.iter().all(|&x| x >= 0.0));
            assert!((g.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn three_ion_null_space_contains_tilt_and_composite_directions() {
        let modes = modes3();
        let spec = GateSpec::new(3, 1, 3, FRAC_PI_4, 0.1).unwrap();
        let a = crosstalk_analysis(&modes, &spec).unwrap();
        assert_eq!(a.null_basis.ncols(), 2);
        // (0,1,0) and (1,0,1)/sqrt(2) must lie in the span.
        for dir in [[0.0, 1.0, 0.0], [1.0 / 2f64.sqrt(), 0.0, 1.0 / 2f64.sqrt()]] {
            let v = DVector::from_row_slice(&dir);
            let proj = &a.null_basis * (a.null_basis.transpose() * &v);
            assert!((proj - &v).amax() < 1e-10);
        }
        // rank-nullity on the duplicated-column crosstalk matrix
        assert_eq!(a.crosstalk_matrix.ncols(), 2);
        assert_eq!(a.null_basis.ncols() + 1, 3);
    }

    #[test]
    fn three_ion_independence_matches_hand_projection() {
        let modes = modes3();
        let map = independence_map(&modes);
        let expected = (27.0 / 28.0f64).sqrt();
        assert!((map[(0, 2)] - expected).abs() < 1e-12, "got {}", map[(0, 2)]);
    }

    #[test]
    fn null_vectors_kill_crosstalk_couplings() {
        let modes = harmonic_modes(&TrapConfig::yb171(8, TAU * 0.5e6, TAU * 3.0e6)).unwrap();
        let spec = GateSpec::new(8, 2, 7, FRAC_PI_4, 0.1).unwrap();
        let a = crosstalk_analysis(&modes, &spec).unwrap();
        for c in 0..a.null_basis.ncols() {
            let chi = a.null_basis.column(c).into_owned();
            for &(t, n) in &spec.crosstalk_pairs() {
                let j = g_vector(&modes, t.min(n), t.max(n)).dot(&chi);
                assert!(j.abs() < 1e-10, "J({t},{n}) = {j:e}");
            }
        }
    }

    #[test]
    fn rank_nullity_across_named_specs() {
        let modes = harmonic_modes(&TrapConfig::yb171(12, TAU * 0.5e6, TAU * 3.0e6)).unwrap();
        for (t1, t2) in [(1, 2), (2, 3), (3, 7), (5, 8), (1, 12)] {
            let spec = GateSpec::new(12, t1, t2, FRAC_PI_4, 0.1).unwrap();
            let a = crosstalk_analysis(&modes, &spec).unwrap();
            let rank = linalg::row_space_basis(&a.crosstalk_matrix.transpose(), RANK_RTOL).nrows();
            assert_eq!(a.null_basis.ncols() + rank, 12, "pair ({t1},{t2})");
            assert!(a.null_basis.ncols() >= 12 - a.crosstalk_matrix.ncols());
        }
    }

    #[test]
    fn independence_map_mirror_symmetry() {
        let modes = harmonic_modes(&TrapConfig::yb171(9, TAU * 0.4e6, TAU * 3.0e6)).unwrap();
        let map = independence_map(&modes);
        let n = 9;
        for t1 in 1..=n {
            for t2 in (t1 + 1)..=n {
                let (m1, m2) = (n + 1 - t2, n + 1 - t1);
                let a = map[(t1 - 1, t2 - 1)];
                let b = map[(m1 - 1, m2 - 1)];
                assert!((a - b).abs() < 1e-9, "({t1},{t2}) vs ({m1},{m2})");
            }
        }
    }

    #[test]
    fn cosine_vector_normalization_and_edge_error() {
        let c = analytic_insensitive_chi(12, 3, 7).unwrap();
        let g = {
            let m = sinusoidal_modes(12).unwrap();
            g_vector(&m, 3, 7)
        };
        assert!((c.dot(&g) - 1.0).abs() < 1e-10);
        assert!(matches!(
            analytic_insensitive_chi(12, 1, 5),
            Err(Error::EdgeTargets { .. })
        ));
        assert!(matches!(
            analytic_insensitive_chi(12, 4, 12),
            Err(Error::EdgeTargets { .. })
        ));
    }

    #[test]
    fn cosine_vector_resonance_is_real_not_a_tolerance_artifact() {
        // (3,7) in a 12-ion string: h = 4 = 2 t1 - 2, so the (3,2) crosstalk
        // pair hits the sum delta d_{h, j1+j2-1} and the identity forces
        // C . g(2,3) = 1 exactly. The other seven pairs are annihilated.
        let n = 12;
        let m = sinusoidal_modes(n).unwrap();
        let c = analytic_insensitive_chi(n, 3, 7).unwrap();
        assert!(resonant_crosstalk(n, 3, 7));
        let spec = GateSpec::new(n, 3, 7, FRAC_PI_4, 0.1).unwrap();
        let mut worst = (0.0f64, (0, 0));
        for &(t, nb) in &spec.crosstalk_pairs() {
            let v = c.dot(&g_vector(&m, t.min(nb), t.max(nb))).abs();
            if v > worst.0 {
                worst = (v, (t, nb));
            }
        }
        assert!((worst.0 - 1.0).abs() < 1e-10, "resonant overlap {worst:?}");
        assert_eq!(worst.1, (3, 2));
    }

    #[test]
    fn cosine_vector_annihilates_crosstalk_at_nonresonant_pairs() {
        for n in [6usize, 9, 12] {
            let m = sinusoidal_modes(n).unwrap();
            for t1 in 2..n {
                for t2 in (t1 + 1)..n {
                    if resonant_crosstalk(n, t1, t2) {
                        continue;
                    }
                    let c = analytic_insensitive_chi(n, t1, t2).unwrap();
                    let spec = GateSpec::new(n, t1, t2, FRAC_PI_4, 0.1).unwrap();
                    for &(t, nb) in &spec.crosstalk_pairs() {
                        let v = c.dot(&g_vector(&m, t.min(nb), t.max(nb)));
                        assert!(v.abs() < 1e-10, "n={n} ({t1},{t2}) pair ({t},{nb}): {v:e}");
                    }
                    assert!((c.dot(&g_vector(&m, t1, t2)) - 1.0).abs() < 1e-10);
                }
            }
        }
    }
}
