//! Transverse motional mode structure of a linear ion string.
//!
//! Two sources are supported: the numeric eigenproblem of a harmonic axial
//! trap (equilibrium positions from force balance, then the transverse
//! Hessian), and the analytic sinusoidal participation formula valid for
//! equispaced strings.

use nalgebra::{DMatrix, DVector};

use crate::constants;
use crate::error::{Error, Result};

/// Physical description of the trap and laser geometry.
#[derive(Debug, Clone)]
pub struct TrapConfig {
    /// Number of ions, >= 2.
    pub ion_count: usize,
    /// Ion mass, kg.
    pub ion_mass: f64,
    /// Axial (string axis) trap frequency omega_z, rad/s.
    pub axial_freq: f64,
    /// Radial (transverse) trap frequency omega_x, rad/s.
    pub radial_freq: f64,
    /// Effective Raman wavevector difference, 1/m.
    pub raman_delta_k: f64,
}

impl TrapConfig {
    /// Yb171 preset: 355 nm counter-propagating Raman beams.
    pub fn yb171(ion_count: usize, axial_freq: f64, radial_freq: f64) -> Self {
        Self {
            ion_count,
            ion_mass: constants::YB171_MASS,
            axial_freq,
            radial_freq,
            raman_delta_k: constants::RAMAN_DELTA_K,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ion_count < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 ions, got {}",
                self.ion_count
            )));
        }
        for (name, v) in [
            ("ion_mass", self.ion_mass),
            ("axial_freq", self.axial_freq),
            ("radial_freq", self.radial_freq),
            ("raman_delta_k", self.raman_delta_k),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.radial_freq <= self.axial_freq {
            return Err(Error::InvalidConfig(format!(
                "radial_freq ({:.4e}) must exceed axial_freq ({:.4e}) for a stable linear string",
                self.radial_freq, self.axial_freq
            )));
        }
        Ok(())
    }

    /// Characteristic Coulomb length l = (e^2 / (4 pi eps0 M omega_z^2))^(1/3), m.
    pub fn length_scale(&self) -> f64 {
        let e = constants::ELEMENTARY_CHARGE;
        let eps0 = constants::VACUUM_PERMITTIVITY;
        (e * e / (4.0 * std::f64::consts::PI * eps0 * self.ion_mass * self.axial_freq.powi(2)))
            .cbrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeSource {
    Harmonic,
    Sinusoidal,
}

/// Motional mode table: frequencies, Lamb-Dicke parameters, and the
/// participation matrix b[m][j] (row = mode, column = ion).
///
/// Modes are sorted by ascending frequency, so for transverse confinement the
/// last mode is the center-of-mass mode. Row signs are fixed by b[m][0] >= 0.
#[derive(Debug, Clone)]
pub struct ModeSet {
    pub freqs: DVector<f64>,
    pub lamb_dicke: DVector<f64>,
    pub participation: DMatrix<f64>,
    pub source: ModeSource,
}

impl ModeSet {
    pub fn n(&self) -> usize {
        self.freqs.len()
    }

    /// Max absolute deviation of b b^T from the identity.
    pub fn orthonormality_residual(&self) -> f64 {
        let n = self.n();
        let gram = &self.participation * self.participation.transpose();
        (gram - DMatrix::identity(n, n)).amax()
    }
}

/// Dimensionless force residual g_i = u_i - sum_j sign(u_i-u_j)/(u_i-u_j)^2.
fn force_residual(u: &DVector<f64>) -> DVector<f64> {
    let n = u.len();
    let mut g = u.clone();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d = u[i] - u[j];
                g[i] -= d / (d.abs().powi(3));
            }
        }
    }
    g
}

/// Equilibrium ion positions (meters, ascending) of the harmonic axial trap.
///
/// Damped Newton on the dimensionless stationarity conditions, seeded by a
/// uniformly spaced guess. Steps that would reorder ions are rejected by the
/// backtracking line search (the potential diverges on coincident ions).
pub fn equilibrium_positions(config: &TrapConfig) -> Result<DVector<f64>> {
    config.validate()?;
    let n = config.ion_count;
    let mut u = DVector::from_fn(n, |i, _| i as f64 - 0.5 * (n as f64 - 1.0));

    let max_iter = 200;
    let tol = 1e-13;
    let mut g = force_residual(&u);
    for _ in 0..max_iter {
        if g.amax() < tol {
            // Exact mirror symmetry; Newton already has it to ~1e-13.
            let sym = DVector::from_fn(n, |i, _| 0.5 * (u[i] - u[n - 1 - i]));
            let g_sym = force_residual(&sym);
            debug_assert!(g_sym.amax() < 1e-12);
            let scale = config.length_scale();
            return Ok(sym * scale);
        }
        let mut jac = DMatrix::zeros(n, n);
        for i in 0..n {
            let mut diag = 1.0;
            for j in 0..n {
                if i != j {
                    let d3 = (u[i] - u[j]).abs().powi(3);
                    diag += 2.0 / d3;
                    jac[(i, j)] = -2.0 / d3;
                }
            }
            jac[(i, i)] = diag;
        }
        let step = jac
            .lu()
            .solve(&(-&g))
            .ok_or(Error::EquilibriumDiverged { iterations: max_iter, residual: g.amax() })?;

        let g_norm = g.norm();
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = &u + &step * t;
            let ordered = (1..n).all(|i| trial[i] > trial[i - 1]);
            if ordered {
                let g_trial = force_residual(&trial);
                if g_trial.norm() < g_norm {
                    u = trial;
                    g = g_trial;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::EquilibriumDiverged { iterations: max_iter, residual: g.amax() });
        }
    }
    Err(Error::EquilibriumDiverged { iterations: max_iter, residual: g.amax() })
}

/// Transverse modes of the harmonically trapped string.
///
/// The dimensionless transverse Hessian (in units of omega_z^2) is
/// A[i][i] = (omega_x/omega_z)^2 - sum_j 1/d_ij^3, A[i][j] = 1/d_ij^3;
/// mode frequencies are nu_m = omega_z sqrt(lambda_m).
pub fn harmonic_modes(config: &TrapConfig) -> Result<ModeSet> {
    let pos = equilibrium_positions(config)?;
    let n = config.ion_count;
    let scale = config.length_scale();
    let u: Vec<f64> = (0..n).map(|i| pos[i] / scale).collect();

    let ratio_sq = (config.radial_freq / config.axial_freq).powi(2);
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut diag = ratio_sq;
        for j in 0..n {
            if i != j {
                let d3 = (u[i] - u[j]).abs().powi(3);
                diag -= 1.0 / d3;
                a[(i, j)] = 1.0 / d3;
            }
        }
        a[(i, i)] = diag;
    }

    let eig = nalgebra::SymmetricEigen::new(a);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap());

    let mut freqs = DVector::zeros(n);
    let mut participation = DMatrix::zeros(n, n);
    for (m, &k) in order.iter().enumerate() {
        let lambda = eig.eigenvalues[k];
        if lambda <= 0.0 {
            return Err(Error::UnstableMode { mode: m + 1, nu_sq: lambda });
        }
        freqs[m] = config.axial_freq * lambda.sqrt();
        let mut row = eig.eigenvectors.column(k).transpose().into_owned();
        // Sign convention b[m][0] >= 0, tie-broken by the first non-negligible entry.
        let lead = row.iter().position(|&x| x.abs() > 1e-12).unwrap_or(0);
        if row[lead] < 0.0 {
            row.neg_mut();
        }
        participation.row_mut(m).copy_from(&row);
    }

    let lamb_dicke = DVector::from_fn(n, |m, _| {
        config.raman_delta_k * (constants::HBAR / (2.0 * config.ion_mass * freqs[m])).sqrt()
    });

    Ok(ModeSet { freqs, lamb_dicke, participation, source: ModeSource::Harmonic })
}

/// Analytic participation of an ideally equispaced string:
/// b[m][j] = sqrt((2 - delta_{m,1})/n) cos((2j-1)(m-1) pi / (2n)).
///
/// Frequencies and Lamb-Dicke values have no analytic counterpart here; they
/// are filled with a synthetic ascending band (2..3 MHz, Yb171 coupling) so a
/// ModeSet from this source can flow through code that only reads the
/// participation matrix.
pub fn sinusoidal_modes(n: usize) -> Result<ModeSet> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 ions, got {n}")));
    }
    let nf = n as f64;
    let participation = DMatrix::from_fn(n, n, |m, j| {
        let norm = if m == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        let phase = (2 * j + 1) as f64 * m as f64 * std::f64::consts::PI / (2.0 * nf);
        norm * phase.cos()
    });
    let freqs = DVector::from_fn(n, |m, _| {
        std::f64::consts::TAU * 1e6 * (2.0 + (m as f64 + 1.0) / nf)
    });
    let lamb_dicke = DVector::from_fn(n, |m, _| {
        constants::RAMAN_DELTA_K
            * (constants::HBAR / (2.0 * constants::YB171_MASS * freqs[m])).sqrt()
    });
    Ok(ModeSet { freqs, lamb_dicke, participation, source: ModeSource::Sinusoidal })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    fn qscout3() -> TrapConfig {
        TrapConfig::yb171(3, TAU * 0.7e6, TAU * 2.506e6)
    }

    #[test]
    fn two_ion_equilibrium_matches_closed_form() {
        let cfg = TrapConfig::yb171(2, TAU * 0.5e6, TAU * 3.0e6);
        let pos = equilibrium_positions(&cfg).unwrap();
        let expected = 0.5f64.powf(2.0 / 3.0) * cfg.length_scale();
        assert!((pos[0] + expected).abs() < 1e-9 * expected);
        assert!((pos[1] - expected).abs() < 1e-9 * expected);
    }

    #[test]
    fn three_ion_equilibrium_matches_bisection_value() {
        // Outer ions sit at (5/4)^(1/3) l, from solving d^3 = 5/4.
        let cfg = qscout3();
        let pos = equilibrium_positions(&cfg).unwrap();
        let d = 1.25f64.cbrt() * cfg.length_scale();
        assert!(pos[1].abs() < 1e-12 * d);
        assert!((pos[2] - d).abs() < 1e-10 * d);
    }

    #[test]
    fn four_ion_min_spacing_near_4_microns() {
        // 4-ion chain at omega_z = 2 pi x 0.5 MHz: expect ~4 um minimum spacing.
        let cfg = TrapConfig::yb171(4, TAU * 0.5e6, TAU * 3.0e6);
        let pos = equilibrium_positions(&cfg).unwrap();
        let min_gap = (1..4).map(|i| pos[i] - pos[i - 1]).fold(f64::INFINITY, f64::min);
        assert!((min_gap - 4e-6).abs() < 0.4e-6, "min spacing {min_gap:e}");
    }

    #[test]
    fn force_residual_below_1e12_up_to_20_ions() {
        for n in 2..=20 {
            let cfg = TrapConfig::yb171(n, TAU * 0.2e6, TAU * 3.0e6);
            let pos = equilibrium_positions(&cfg).unwrap();
            let scale = cfg.length_scale();
            let u = DVector::from_fn(n, |i, _| pos[i] / scale);
            assert!(force_residual(&u).amax() < 1e-12, "n = {n}");
            assert!((1..n).all(|i| pos[i] > pos[i - 1]));
            for i in 0..n {
                assert!((u[i] + u[n - 1 - i]).abs() < 1e-10, "symmetry at n = {n}");
            }
        }
    }

    #[test]
    fn three_ion_participation_matches_hand_derivation() {
        let modes = harmonic_modes(&qscout3()).unwrap();
        let s6 = 6f64.sqrt();
        let s2 = 2f64.sqrt();
        let s3 = 3f64.sqrt();
        let expected = [
            [1.0 / s6, -2.0 / s6, 1.0 / s6],
            [1.0 / s2, 0.0, -1.0 / s2],
            [1.0 / s3, 1.0 / s3, 1.0 / s3],
        ];
        for m in 0..3 {
            for j in 0..3 {
                assert!(
                    (modes.participation[(m, j)] - expected[m][j]).abs() < 1e-9,
                    "b[{m}][{j}] = {}",
                    modes.participation[(m, j)]
                );
            }
        }
    }

    #[test]
    fn qscout_com_mode_at_radial_frequency() {
        let modes = harmonic_modes(&qscout3()).unwrap();
        let com = modes.freqs[2];
        assert!((com - TAU * 2.506e6).abs() < 1e-9 * com);
        // known spectrum for 2.506 / 0.7 MHz: zigzag and tilt below COM
        assert!((modes.freqs[0] / TAU - 2.259211e6).abs() < 1e0);
        assert!((modes.freqs[1] / TAU - 2.406249e6).abs() < 1e0);
    }

    #[test]
    fn com_row_is_flat_for_any_n() {
        for n in [2, 5, 9] {
            let cfg = TrapConfig::yb171(n, TAU * 0.3e6, TAU * 3.0e6);
            let modes = harmonic_modes(&cfg).unwrap();
            let inv_sqrt = (n as f64).sqrt().recip();
            for j in 0..n {
                assert!((modes.participation[(n - 1, j)] - inv_sqrt).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn unstable_string_is_reported() {
        // Nearly isotropic trap: a 12-ion string buckles transversely.
        let cfg = TrapConfig::yb171(12, TAU * 1.0e6, TAU * 1.05e6);
        match harmonic_modes(&cfg) {
            Err(Error::UnstableMode { .. }) => {}
            other => panic!("expected UnstableMode, got {other:?}"),
        }
    }

    #[test]
    fn sinusoidal_first_row_and_two_ion_second_row() {
        let m = sinusoidal_modes(12).unwrap();
        for j in 0..12 {
            assert!((m.participation[(0, j)] - (1.0 / 12f64).sqrt()).abs() < 1e-14);
        }
        let m2 = sinusoidal_modes(2).unwrap();
        let r = 0.5f64.sqrt();
        assert!((m2.participation[(1, 0)] - r).abs() < 1e-14);
        assert!((m2.participation[(1, 1)] + r).abs() < 1e-14);
    }

    #[test]
    fn sinusoidal_extended_index_orthonormality() {
        // The cosine index 2j-1 is defined mod 4N and cos is even, so
        // b~(j1) . b~(j2) = 1 iff j2 = j1 (mod 2N) or j2 = 1-j1 (mod 2N),
        // else 0. On {1-N, ..., 2N} the residues in range are j2 = j1,
        // j1 +- 2N, 1-j1, and 2N+1-j1; the familiar three-delta form drops
        // the j1 +- 2N aliases, which only bite when |j1 - j2| = 2N.
        let n = 12i64;
        let b = |m: i64, j: i64| -> f64 {
            let norm = if m == 1 { 1.0 / (n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            norm * (((2 * j - 1) * (m - 1)) as f64 * std::f64::consts::PI / (2.0 * n as f64)).cos()
        };
        for j1 in (1 - n)..=(2 * n) {
            for j2 in (1 - n)..=(2 * n) {
                let dot: f64 = (1..=n).map(|m| b(m, j1) * b(m, j2)).sum();
                let same = (j2 - j1).rem_euclid(2 * n) == 0;
                let mirrored = (j2 - (1 - j1)).rem_euclid(2 * n) == 0;
                let expected = if same || mirrored { 1.0 } else { 0.0 };
                assert!(
                    (dot - expected).abs() < 1e-12,
                    "j1 = {j1}, j2 = {j2}: {dot} vs {expected}"
                );
                if (j1 - j2).abs() < 2 * n {
                    let three = [(j1, j2), (1 - j1, j2), (2 * n + 1 - j1, j2)]
                        .iter()
                        .filter(|(a, b)| a == b)
                        .count() as f64;
                    assert!((dot - three).abs() < 1e-12, "three-delta form at ({j1},{j2})");
                }
            }
        }
    }

    #[test]
    fn orthonormality_both_sources_to_20_ions() {
        for n in 2..=20 {
            let cfg = TrapConfig::yb171(n, TAU * 0.2e6, TAU * 3.0e6);
            assert!(harmonic_modes(&cfg).unwrap().orthonormality_residual() < 1e-10);
            assert!(sinusoidal_modes(n).unwrap().orthonormality_residual() < 1e-10);
        }
    }

    #[test]
    fn rejects_radial_below_axial() {
        let cfg = TrapConfig::yb171(3, TAU * 2.0e6, TAU * 1.0e6);
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }
}
