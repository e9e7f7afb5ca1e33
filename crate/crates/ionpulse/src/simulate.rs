//! Gate-level simulation: the closed-form qubit unitary under crosstalk,
//! fidelity and parity diagnostics, and a brute-force spin-motion oracle
//! that time-orders the full interaction on small strings.
//!
//! Everything here is diagonal in the X basis. The accumulated phase
//! exponent for an X eigenconfiguration s is
//!   sum_m chi_m (sum_j c_j s_j b_{m,j})^2
//!     = sum_{j1<j2} 2 c_{j1} c_{j2} J_{j1,j2} s_{j1} s_{j2} + phi_self,
//! so the pair angles are theta = 2 c c J and the self terms are a global
//! phase. The schedule's amplitudes are absolute Rabi frequencies for the
//! target ions; illumination factors rescale them per ion, so the Omega^2
//! weight of the coupling matrix lives inside chi and is never applied
//! twice.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::coupling::GateSpec;
use crate::error::{Error, Result};
use crate::modes::ModeSet;
use crate::pulses::{closure_residual, PhaseVector, PulseSchedule};

/// Per-ion drive strengths: dimensionless factors c_j (targets 1, neighbors
/// at most epsilon, dark ions 0) and the target-ion Rabi scale they
/// multiply, kept for reporting.
#[derive(Debug, Clone)]
pub struct IlluminationProfile {
    pub factors: DVector<f64>,
    pub base_rabi: f64,
}

impl IlluminationProfile {
    /// Uniform spillover: targets at 1, every declared neighbor at the
    /// spec's epsilon, all other ions dark.
    pub fn from_spec(spec: &GateSpec, n: usize, base_rabi: f64) -> Self {
        let mut factors = DVector::zeros(n);
        factors[spec.t1 - 1] = 1.0;
        factors[spec.t2 - 1] = 1.0;
        for &nb in &spec.neighbors {
            factors[nb - 1] = spec.epsilon;
        }
        IlluminationProfile { factors, base_rabi }
    }

    pub fn validate(&self) -> Result<()> {
        if self.factors.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::InvalidConfig(
                "illumination factors must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Full N x N coupling matrix J_{j1,j2} = sum_m b_{m,j1} b_{m,j2} chi_m,
/// diagonal included (it carries the self-phase).
pub fn coupling_matrix(modes: &ModeSet, chi: &PhaseVector) -> DMatrix<f64> {
    let n = modes.n();
    let b = &modes.participation;
    DMatrix::from_fn(n, n, |j1, j2| {
        (0..n).map(|m| b[(m, j1)] * b[(m, j2)] * chi[m]).sum()
    })
}

/// Pair rotation angles theta_{j1,j2} = 2 c_{j1} c_{j2} J_{j1,j2}; the
/// diagonal holds the self-phase contributions c_j^2 J_{j,j}.
pub fn theta_matrix(j: &DMatrix<f64>, illumination: &IlluminationProfile) -> DMatrix<f64> {
    let c = &illumination.factors;
    DMatrix::from_fn(j.nrows(), j.ncols(), |a, b| {
        let scale = if a == b { 1.0 } else { 2.0 };
        scale * c[a] * c[b] * j[(a, b)]
    })
}

/// Global phase collected by the X_j^2 = I terms.
pub fn self_phase(theta: &DMatrix<f64>) -> f64 {
    theta.diagonal().sum()
}

/// In-place unnormalized Walsh-Hadamard butterflies.
fn fwht(v: &mut [Complex64]) {
    let n = v.len();
    let mut h = 1;
    while h < n {
        for block in (0..n).step_by(2 * h) {
            for i in block..block + h {
                let a = v[i];
                let b = v[i + h];
                v[i] = a + b;
                v[i + h] = a - b;
            }
        }
        h *= 2;
    }
}

/// Z-basis unitary from X-basis diagonal entries: U = W diag(d) W / 2^N.
fn walsh_conjugate(diag: &[Complex64]) -> DMatrix<Complex64> {
    let dim = diag.len();
    let n = dim.trailing_zeros() as usize;
    // M[z][s] = d_s (-1)^{popcount(z & s)}, then Walsh transform each row.
    let mut u = DMatrix::from_fn(dim, dim, |z, s| {
        let sign = if ((z & s).count_ones() & 1) == 1 { -1.0 } else { 1.0 };
        diag[s] * sign
    });
    let scale = 1.0 / dim as f64;
    for z in 0..dim {
        let mut row: Vec<Complex64> = (0..dim).map(|s| u[(z, s)]).collect();
        fwht(&mut row);
        for s in 0..dim {
            u[(z, s)] = row[s] * scale;
        }
    }
    debug_assert!(n <= 12);
    u
}

/// Exponent of the commuting XX product on an X configuration: bit k set
/// means ion k+1 sits in the -1 eigenstate.
fn pair_exponent(theta: &DMatrix<f64>, s: usize) -> f64 {
    let n = theta.nrows();
    let mut total = 0.0;
    for j1 in 0..n {
        let s1 = if (s >> j1) & 1 == 1 { -1.0 } else { 1.0 };
        for j2 in (j1 + 1)..n {
            let s2 = if (s >> j2) & 1 == 1 { -1.0 } else { 1.0 };
            total += theta[(j1, j2)] * s1 * s2;
        }
    }
    total
}

/// Dense unitary of the commuting XX product from a full angle matrix
/// (strict upper triangle used; the diagonal is a dropped global phase).
pub fn xx_product_unitary(theta: &DMatrix<f64>) -> DMatrix<Complex64> {
    let n = theta.nrows();
    let dim = 1usize << n;
    let diag: Vec<Complex64> = (0..dim)
        .map(|s| Complex64::new(0.0, pair_exponent(theta, s)).exp())
        .collect();
    walsh_conjugate(&diag)
}

/// The gate unitary of a computed coupling matrix under an illumination
/// profile. Dense construction caps at 12 ions; above that, restrict to
/// the illuminated subspace first.
pub fn qubit_unitary(
    j: &DMatrix<f64>,
    illumination: &IlluminationProfile,
) -> Result<DMatrix<Complex64>> {
    let n = j.nrows();
    if n != illumination.factors.len() {
        return Err(Error::InvalidConfig(format!(
            "coupling matrix is {n} ions, illumination lists {}",
            illumination.factors.len()
        )));
    }
    if n > 12 {
        return Err(Error::TooManyIons(n));
    }
    illumination.validate()?;
    Ok(xx_product_unitary(&theta_matrix(j, illumination)))
}

/// Drop dark ions: the coupling and illumination restricted to ions with
/// nonzero factors, with the kept 1-based indices. Dark ions only enter
/// Eq. 2 through vanishing angles, so the restriction is exact.
pub fn illuminated_subspace(
    j: &DMatrix<f64>,
    illumination: &IlluminationProfile,
) -> (DMatrix<f64>, IlluminationProfile, Vec<usize>) {
    let keep: Vec<usize> = (0..j.nrows())
        .filter(|&i| illumination.factors[i] != 0.0)
        .collect();
    let j_sub = DMatrix::from_fn(keep.len(), keep.len(), |a, b| j[(keep[a], keep[b])]);
    let c_sub = DVector::from_fn(keep.len(), |a, _| illumination.factors[keep[a]]);
    (
        j_sub,
        IlluminationProfile { factors: c_sub, base_rabi: illumination.base_rabi },
        keep.iter().map(|&i| i + 1).collect(),
    )
}

/// State fidelity |<ideal| U |0..0>|^2 with the ideal state
/// exp(i theta X_{t1} X_{t2}) |0..0>, spectators untouched.
pub fn fidelity(u: &DMatrix<Complex64>, ideal_theta: f64, targets: (usize, usize)) -> f64 {
    let flip = (1usize << (targets.0 - 1)) | (1usize << (targets.1 - 1));
    let amp = u[(0, 0)] * ideal_theta.cos()
        - Complex64::i() * u[(flip, 0)] * ideal_theta.sin();
    amp.norm_sqr()
}

/// The crosstalk factor of the gate: product over target-neighbor pairs of
/// exp(i c_n (J_{t,n}/J_{t1,t2}) theta_gate X_t X_n), with the gate angle
/// taken from the coupling matrix so the factorization against the full
/// unitary is exact.
pub fn crosstalk_unitary(
    j: &DMatrix<f64>,
    spec: &GateSpec,
    illumination: &IlluminationProfile,
) -> Result<DMatrix<Complex64>> {
    let (ct, _, _) = pair_partition(j, spec, illumination)?;
    Ok(xx_product_unitary(&ct))
}

/// Split the angle matrix into crosstalk (target-neighbor), ideal (target
/// pair), and spectator (everything else) parts. The three commute, so
/// U_total = U_crosstalk U_ideal U_spectator exactly.
pub fn pair_partition(
    j: &DMatrix<f64>,
    spec: &GateSpec,
    illumination: &IlluminationProfile,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let n = j.nrows();
    let j_target = j[(spec.t1 - 1, spec.t2 - 1)];
    if j_target == 0.0 {
        return Err(Error::ZeroTargetCoupling);
    }
    let theta = theta_matrix(j, illumination);
    let mut ct = DMatrix::zeros(n, n);
    let mut ideal = DMatrix::zeros(n, n);
    let mut spect = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in (a + 1)..n {
            let pair = (a + 1, b + 1);
            let is_ideal = pair == (spec.t1, spec.t2);
            let is_ct = !is_ideal
                && ((pair.0 == spec.t1 || pair.0 == spec.t2) && spec.neighbors.contains(&pair.1)
                    || (pair.1 == spec.t1 || pair.1 == spec.t2)
                        && spec.neighbors.contains(&pair.0));
            let slot = if is_ideal {
                &mut ideal
            } else if is_ct {
                &mut ct
            } else {
                &mut spect
            };
            slot[(a, b)] = theta[(a, b)];
        }
    }
    Ok((ct, ideal, spect))
}

/// Parity oscillation of one ion pair after the gate: a pi/2 analysis
/// rotation about cos(phi) X + sin(phi) Y on both ions, then <Z_a Z_b>,
/// sampled on a uniform phase grid (at least 8 points).
#[derive(Debug, Clone)]
pub struct ParityCurve {
    /// 1-based ion pair.
    pub pair: (usize, usize),
    pub phi: Vec<f64>,
    pub parity: Vec<f64>,
    /// Magnitude of the 2*phi Fourier component, doubled: the Bell-type
    /// oscillation amplitude.
    pub amplitude: f64,
}

fn apply_single_qubit(state: &mut [Complex64], n: usize, ion: usize, m: [[Complex64; 2]; 2]) {
    let bit = 1usize << (ion - 1);
    let dim = 1usize << n;
    for z in 0..dim {
        if z & bit == 0 {
            let a = state[z];
            let b = state[z | bit];
            state[z] = m[0][0] * a + m[0][1] * b;
            state[z | bit] = m[1][0] * a + m[1][1] * b;
        }
    }
}

pub fn parity_scan(u: &DMatrix<Complex64>, pair: (usize, usize), phi_samples: usize) -> ParityCurve {
    let dim = u.nrows();
    let n = dim.trailing_zeros() as usize;
    let samples = phi_samples.max(8);
    let base: Vec<Complex64> = (0..dim).map(|z| u[(z, 0)]).collect();
    let mut phi = Vec::with_capacity(samples);
    let mut parity = Vec::with_capacity(samples);
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    for k in 0..samples {
        let p = std::f64::consts::TAU * k as f64 / samples as f64;
        // exp(-i (pi/4) (cos p X + sin p Y))
        let off01 = Complex64::new(0.0, -1.0) * Complex64::new(0.0, -p).exp() * inv_sqrt2;
        let off10 = Complex64::new(0.0, -1.0) * Complex64::new(0.0, p).exp() * inv_sqrt2;
        let rot = [
            [Complex64::new(inv_sqrt2, 0.0), off01],
            [off10, Complex64::new(inv_sqrt2, 0.0)],
        ];
        let mut state = base.clone();
        apply_single_qubit(&mut state, n, pair.0, rot);
        apply_single_qubit(&mut state, n, pair.1, rot);
        let ba = 1usize << (pair.0 - 1);
        let bb = 1usize << (pair.1 - 1);
        let mut zz = 0.0;
        for (z, amp) in state.iter().enumerate() {
            let sa = if z & ba == 0 { 1.0 } else { -1.0 };
            let sb = if z & bb == 0 { 1.0 } else { -1.0 };
            zz += sa * sb * amp.norm_sqr();
        }
        phi.push(p);
        parity.push(zz);
    }
    let amplitude = parity_amplitude(&parity);
    ParityCurve { pair, phi, parity, amplitude }
}

/// Twice the magnitude of the second Fourier coefficient over one full
/// phase turn: the amplitude of the cos(2 phi) oscillation.
pub fn parity_amplitude(parity: &[f64]) -> f64 {
    let k = parity.len() as f64;
    let mut acc = Complex64::new(0.0, 0.0);
    for (i, &p) in parity.iter().enumerate() {
        let ang = -2.0 * std::f64::consts::TAU * i as f64 / k;
        acc += Complex64::new(0.0, ang).exp() * p;
    }
    2.0 * acc.norm() / k
}

/// Analytic parity amplitude of the target-center pair for three ions
/// under exp(i theta X1 X3) exp(i xi_a X1 X2) exp(i xi_b X2 X3) from
/// |000>: twice |rho_{00,11}| of the reduced (1,2) state.
pub fn three_ion_parity_amplitude(theta: f64, xi_a: f64, xi_b: f64) -> f64 {
    let (c, s) = (theta.cos(), theta.sin());
    let (ca, sa) = (xi_a.cos(), xi_a.sin());
    let (cb, sb) = (xi_b.cos(), xi_b.sin());
    let a000 = Complex64::new(c * ca * cb, -s * sa * sb);
    let a110 = Complex64::new(-s * ca * sb, c * sa * cb);
    2.0 * (a000 * a110.conj()).norm()
}

/// Everything a gate run reports: couplings, angles, fidelity, parity
/// curves for the target pair and each crosstalk pair, and per-mode
/// closure residual magnitudes (worst loop).
#[derive(Debug, Clone)]
pub struct GateReport {
    pub j: DMatrix<f64>,
    pub angles: DMatrix<f64>,
    pub fidelity: f64,
    pub parity_scans: Vec<ParityCurve>,
    pub closure_residuals: DVector<f64>,
}

pub fn gate_report(
    schedule: &PulseSchedule,
    modes: &ModeSet,
    spec: &GateSpec,
    illumination: &IlluminationProfile,
    phi_samples: usize,
) -> Result<GateReport> {
    let chi = crate::pulses::accumulate_chi(schedule, modes)?;
    let j = coupling_matrix(modes, &chi);
    let angles = theta_matrix(&j, illumination);
    let u = qubit_unitary(&j, illumination)?;
    let fid = fidelity(&u, spec.theta, (spec.t1, spec.t2));
    let mut pairs = vec![(spec.t1, spec.t2)];
    for &(t, nb) in &spec.crosstalk_pairs() {
        let p = (t.min(nb), t.max(nb));
        if !pairs.contains(&p) {
            pairs.push(p);
        }
    }
    let parity_scans = pairs
        .into_iter()
        .map(|p| parity_scan(&u, p, phi_samples))
        .collect();
    let n = modes.n();
    let mut residuals = DVector::<f64>::zeros(n);
    for pulse in &schedule.loops {
        let r = closure_residual(pulse, modes);
        for m in 0..n {
            residuals[m] = residuals[m].max(r[m].norm());
        }
    }
    Ok(GateReport {
        j,
        angles,
        fidelity: fid,
        parity_scans,
        closure_residuals: residuals,
    })
}

/// Gauss-Legendre nodes and weights on [-1, 1] by Golub-Welsch.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jac = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = k as f64 / ((4.0 * (k * k) as f64 - 1.0).sqrt());
        jac[(k - 1, k)] = b;
        jac[(k, k - 1)] = b;
    }
    let eig = nalgebra::SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let w = 2.0 * eig.eigenvectors[(0, i)].powi(2);
            (eig.eigenvalues[i], w)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    (pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1).collect())
}

/// Spin-motion oracle output. The spin unitary assumes the motion has
/// returned to vacuum (valid when the entropy is small); rho_spin is the
/// exact reduced spin state from |0..0> regardless.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub spin_unitary: DMatrix<Complex64>,
    pub rho_spin: DMatrix<Complex64>,
    /// Spin-motion entanglement entropy (nats) of the final state from
    /// |0..0> spin x vacuum.
    pub motional_entropy: f64,
    /// Worst-config probability of all modes returning to vacuum.
    pub vacuum_return: f64,
    /// Max X-diagonal deviation between the run and its half-step rerun.
    pub halving_disagreement: f64,
}

struct FockEvolution {
    /// One truncated-Fock state per (mode, x-config).
    states: Vec<Vec<DVector<Complex64>>>,
}

/// Apply exp(alpha a^dag - conj(alpha) a) to a truncated Fock vector by a
/// Taylor series; per-substep displacements are tiny so a few terms reach
/// machine precision.
fn apply_displacement(state: &mut DVector<Complex64>, alpha: Complex64) {
    let dim = state.len();
    let mut term = state.clone();
    let mut acc = state.clone();
    let alpha_c = alpha.conj();
    for order in 1..=24 {
        let mut next = DVector::from_element(dim, Complex64::new(0.0, 0.0));
        for k in 0..dim {
            // (alpha a^dag) part
            if k > 0 {
                next[k] += alpha * (k as f64).sqrt() * term[k - 1];
            }
            // (-conj(alpha) a) part
            if k + 1 < dim {
                next[k] -= alpha_c * ((k + 1) as f64).sqrt() * term[k + 1];
            }
        }
        let next = next.unscale(order as f64);
        acc += &next;
        let done = next.norm() < 1e-18 * acc.norm();
        term = next;
        if done {
            break;
        }
    }
    *state = acc;
}

/// One full time-ordered pass at a given substep refinement. Returns the
/// per-(mode, config) final motional states.
fn oracle_pass(
    schedule: &PulseSchedule,
    modes: &ModeSet,
    weights: &DMatrix<f64>,
    fock_dim: usize,
    refine: usize,
) -> FockEvolution {
    let n_modes = modes.n();
    let configs = weights.ncols();
    let mut states: Vec<Vec<DVector<Complex64>>> = (0..n_modes)
        .map(|_| {
            (0..configs)
                .map(|_| {
                    let mut v = DVector::from_element(fock_dim, Complex64::new(0.0, 0.0));
                    v[0] = Complex64::new(1.0, 0.0);
                    v
                })
                .collect()
        })
        .collect();

    let f_max = schedule
        .loops
        .iter()
        .map(|l| l.drive_freq)
        .fold(modes.freqs.max(), f64::max)
        / std::f64::consts::TAU;
    let (gl_x, gl_w) = gauss_legendre(12);
    let (tq_x, tq_w) = gauss_legendre(8);

    let mut t_loop_start = 0.0;
    for pulse in &schedule.loops {
        let d = pulse.segments();
        let seg = pulse.duration / d as f64;
        let steps = ((seg * 40.0 * f_max).ceil() as usize).max(2) * refine;
        let h = seg / steps as f64;
        for s in 0..d {
            let w_amp = pulse.amplitudes[s];
            let t_seg = s as f64 * seg;
            for k in 0..steps {
                let t0 = t_seg + k as f64 * h;
                for m in 0..n_modes {
                    let nu = modes.freqs[m];
                    let eta = modes.lamb_dicke[m];
                    // displacement increment: -i eta int f(t) e^{i nu t_g} dt
                    let mut int_f = Complex64::new(0.0, 0.0);
                    for (x, w) in gl_x.iter().zip(&gl_w) {
                        let tl = t0 + 0.5 * h * (x + 1.0);
                        let f = w_amp * (pulse.drive_freq * tl).sin();
                        let tg = t_loop_start + tl;
                        int_f += Complex64::new(0.0, nu * tg).exp() * (f * w * 0.5 * h);
                    }
                    let d_alpha = Complex64::new(0.0, -1.0) * int_f * eta;
                    // within-step phase: eta^2 int_{t1>t2} f f sin(nu (t1-t2)),
                    // triangle mapped to the unit square
                    let mut w_int = 0.0;
                    for (xu, wu) in tq_x.iter().zip(&tq_w) {
                        let u = 0.5 * (xu + 1.0);
                        let t1 = t0 + h * u;
                        let f1 = w_amp * (pulse.drive_freq * t1).sin();
                        for (xv, wv) in tq_x.iter().zip(&tq_w) {
                            let v = 0.5 * (xv + 1.0);
                            let t2 = t0 + h * u * v;
                            let f2 = w_amp * (pulse.drive_freq * t2).sin();
                            w_int += wu * wv * 0.25 * (h * h * u)
                                * f1 * f2 * (nu * (t1 - t2)).sin();
                        }
                    }
                    let d_phi = eta * eta * w_int;
                    for c in 0..configs {
                        let w_s = weights[(m, c)];
                        if w_s == 0.0 {
                            continue;
                        }
                        let phase = Complex64::new(0.0, w_s * w_s * d_phi).exp();
                        let st = &mut states[m][c];
                        *st *= phase;
                        apply_displacement(st, d_alpha * w_s);
                    }
                }
            }
        }
        t_loop_start += pulse.duration;
    }
    FockEvolution { states }
}

fn x_diag_from_states(ev: &FockEvolution, configs: usize) -> Vec<Complex64> {
    (0..configs)
        .map(|c| {
            let mut d = Complex64::new(1.0, 0.0);
            for mode_states in &ev.states {
                d *= mode_states[c][0];
            }
            d
        })
        .collect()
}

/// Time-ordered integration of the full spin-motion interaction on a small
/// string: per X configuration the modes evolve as driven oscillators in a
/// truncated Fock space, stepped at 1/(40 f_max) with per-substep
/// Gauss-Legendre displacement increments and triangle-quadrature phases.
/// A half-step rerun bounds the truncation and quadrature error.
pub fn full_hamiltonian_oracle(
    schedule: &PulseSchedule,
    modes: &ModeSet,
    illumination: &IlluminationProfile,
    fock_cutoff: usize,
) -> Result<OracleReport> {
    let n = modes.n();
    if n > 3 {
        return Err(Error::OracleScope(format!(
            "full-Hamiltonian oracle handles at most 3 ions, got {n}"
        )));
    }
    if !(2..=8).contains(&fock_cutoff) {
        return Err(Error::OracleScope(format!(
            "Fock cutoff must lie in [2, 8], got {fock_cutoff}"
        )));
    }
    if illumination.factors.len() != n {
        return Err(Error::InvalidConfig(format!(
            "illumination lists {} ions for a {n}-ion string",
            illumination.factors.len()
        )));
    }
    illumination.validate()?;
    for pulse in &schedule.loops {
        pulse.validate()?;
    }

    let configs = 1usize << n;
    // weights[(m, c)] = sum_j c_j s_j b_{m,j}, bit set meaning s_j = -1
    let weights = DMatrix::from_fn(n, configs, |m, c| {
        (0..n)
            .map(|jj| {
                let s = if (c >> jj) & 1 == 1 { -1.0 } else { 1.0 };
                illumination.factors[jj] * s * modes.participation[(m, jj)]
            })
            .sum()
    });
    let fock_dim = fock_cutoff + 1;

    let coarse = oracle_pass(schedule, modes, &weights, fock_dim, 1);
    let fine = oracle_pass(schedule, modes, &weights, fock_dim, 2);
    let d_coarse = x_diag_from_states(&coarse, configs);
    let d_fine = x_diag_from_states(&fine, configs);
    let disagreement = d_coarse
        .iter()
        .zip(&d_fine)
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);
    if disagreement > 1e-6 {
        return Err(Error::IntegrationDiverged { disagreement });
    }

    // reduced spin state from |0..0>: c_s = 2^{-N/2} over X configs
    let amp = 1.0 / (configs as f64).sqrt();
    let mut rho_x = DMatrix::from_element(configs, configs, Complex64::new(0.0, 0.0));
    for a in 0..configs {
        for b in 0..configs {
            let mut overlap = Complex64::new(1.0, 0.0);
            for mode_states in &fine.states {
                overlap *= mode_states[b].dotc(&mode_states[a]);
            }
            rho_x[(a, b)] = overlap * (amp * amp);
        }
    }
    let entropy = von_neumann_entropy(&rho_x);
    let vacuum_return = (0..configs)
        .map(|c| {
            fine.states
                .iter()
                .map(|ms| ms[c][0].norm_sqr())
                .product::<f64>()
        })
        .fold(f64::INFINITY, f64::min);

    // Z-basis forms
    let spin_unitary = walsh_conjugate(&d_fine);
    let rho_spin = walsh_density(&rho_x);

    Ok(OracleReport {
        spin_unitary,
        rho_spin,
        motional_entropy: entropy,
        vacuum_return,
        halving_disagreement: disagreement,
    })
}

/// rho_Z = W rho_X W / 2^N with the same Walsh convention as the unitaries.
fn walsh_density(rho_x: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let dim = rho_x.nrows();
    let w = DMatrix::from_fn(dim, dim, |z, s| {
        let sign = if ((z & s).count_ones() & 1) == 1 { -1.0 } else { 1.0 };
        Complex64::new(sign, 0.0)
    });
    (&w * rho_x * &w).unscale(dim as f64)
}

/// Entropy of a Hermitian density matrix via its real symmetric embedding
/// [[Re, -Im], [Im, Re]] (each eigenvalue appears twice).
fn von_neumann_entropy(rho: &DMatrix<Complex64>) -> f64 {
    let d = rho.nrows();
    let mut emb = DMatrix::zeros(2 * d, 2 * d);
    for a in 0..d {
        for b in 0..d {
            emb[(a, b)] = rho[(a, b)].re;
            emb[(a, b + d)] = -rho[(a, b)].im;
            emb[(a + d, b)] = rho[(a, b)].im;
            emb[(a + d, b + d)] = rho[(a, b)].re;
        }
    }
    let eig = nalgebra::SymmetricEigen::new(emb);
    let mut s = 0.0;
    for &lam in eig.eigenvalues.iter() {
        if lam > 1e-300 {
            s -= lam * lam.ln();
        }
    }
    s / 2.0
}
