//! Segmented amplitude-modulated bichromatic pulses and the closed-form
//! segment integrals behind them: closure residuals (phase-space return
//! conditions), the null-space basis of the closure constraints, the
//! rotating-wave phase matrices that turn amplitude vectors into
//! spin-dependent phases, sampled phase-space trajectories, and an exact
//! double-integral oracle kept alongside the RWA path.
//!
//! Unit conventions: drive and mode frequencies are angular (rad/s),
//! durations are seconds, segment amplitudes are angular Rabi rates
//! (rad/s). The accumulated phases chi are radians. Within each loop,
//! time is measured from the loop start and the drive phase starts at
//! zero there; segment boundaries are computed as exact rational
//! fractions duration * k / D so repeated subdivision cannot drift.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::modes::ModeSet;

/// One constant-detuning loop: a bichromatic drive at `drive_freq` from the
/// qubit carrier, amplitude-modulated over equal-duration segments.
#[derive(Debug, Clone)]
pub struct PulseLoop {
    /// Bichromatic drive detuning from the carrier, rad/s.
    pub drive_freq: f64,
    /// Loop duration, seconds.
    pub duration: f64,
    /// Per-segment Rabi amplitudes, rad/s. Length = segment count.
    pub amplitudes: DVector<f64>,
}

impl PulseLoop {
    pub fn segments(&self) -> usize {
        self.amplitudes.len()
    }

    /// Segment s spans [duration*s/D, duration*(s+1)/D).
    pub fn segment_bounds(&self, s: usize) -> (f64, f64) {
        let d = self.segments() as f64;
        (
            self.duration * s as f64 / d,
            self.duration * (s + 1) as f64 / d,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.drive_freq.is_finite() && self.drive_freq > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "loop drive frequency must be positive, got {}",
                self.drive_freq
            )));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "loop duration must be positive, got {}",
                self.duration
            )));
        }
        if self.amplitudes.is_empty() || self.amplitudes.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidConfig(
                "loop needs a nonempty, finite amplitude vector".into(),
            ));
        }
        Ok(())
    }
}

/// Loops executed back to back; phases from different loops add.
#[derive(Debug, Clone, Default)]
pub struct PulseSchedule {
    pub loops: Vec<PulseLoop>,
}

impl PulseSchedule {
    pub fn total_duration(&self) -> f64 {
        self.loops.iter().map(|l| l.duration).sum()
    }

    /// Peak instantaneous Rabi amplitude across the schedule, rad/s.
    pub fn peak_amplitude(&self) -> f64 {
        self.loops
            .iter()
            .map(|l| l.amplitudes.amax())
            .fold(0.0, f64::max)
    }
}

/// Accumulated spin-dependent phase per mode, radians.
pub type PhaseVector = DVector<f64>;

/// Schedule file convention string embedded in serialized schedules.
pub const SCHEDULE_CONVENTION: &str = "detuning_hz: bichromatic drive detuning from the qubit \
carrier in Hz (not angular; multiply by 2*pi for rad/s); duration_us: loop duration in \
microseconds; amplitudes_mhz: per-segment Rabi amplitudes in MHz (not angular), equal-duration \
segments, drive phase zero at each loop start";

/// Serialization record for one loop. Human units; see SCHEDULE_CONVENTION.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopRecord {
    pub detuning_hz: f64,
    pub duration_us: f64,
    pub amplitudes_mhz: Vec<f64>,
}

/// Serialization record for a whole schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleFile {
    pub convention: String,
    pub loops: Vec<LoopRecord>,
}

impl ScheduleFile {
    pub fn from_schedule(schedule: &PulseSchedule) -> Self {
        let tau = std::f64::consts::TAU;
        ScheduleFile {
            convention: SCHEDULE_CONVENTION.to_string(),
            loops: schedule
                .loops
                .iter()
                .map(|l| LoopRecord {
                    detuning_hz: l.drive_freq / tau,
                    duration_us: l.duration * 1e6,
                    amplitudes_mhz: l.amplitudes.iter().map(|w| w / tau / 1e6).collect(),
                })
                .collect(),
        }
    }

    pub fn to_schedule(&self) -> Result<PulseSchedule> {
        let tau = std::f64::consts::TAU;
        let schedule = PulseSchedule {
            loops: self
                .loops
                .iter()
                .map(|r| PulseLoop {
                    drive_freq: r.detuning_hz * tau,
                    duration: r.duration_us * 1e-6,
                    amplitudes: DVector::from_vec(
                        r.amplitudes_mhz.iter().map(|w| w * tau * 1e6).collect(),
                    ),
                })
                .collect(),
        };
        for l in &schedule.loops {
            l.validate()?;
        }
        Ok(schedule)
    }
}

/// Stable sin(x)/x.
fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        1.0 - x2 / 6.0 + x2 * x2 / 120.0
    } else {
        x.sin() / x
    }
}

/// Integral of e^{iat} over [t0, t1] in product form: midpoint phase times
/// a real envelope, exact at a = 0.
fn intexp(a: f64, t0: f64, t1: f64) -> Complex64 {
    let d = t1 - t0;
    let c = 0.5 * (t0 + t1);
    Complex64::from_polar(1.0, a * c) * (d * sinc(0.5 * a * d))
}

/// Integral of e^{i nu t} sin(wd t) over [t0, t1].
fn sin_drive_integral(nu: f64, wd: f64, t0: f64, t1: f64) -> Complex64 {
    (intexp(nu + wd, t0, t1) - intexp(nu - wd, t0, t1)) * Complex64::new(0.0, -0.5)
}

/// Per-mode closure residuals of one loop: integral of e^{i nu_m t} f(t)
/// over the loop, f(t) = w_s sin(wd t) on segment s. A loop whose residuals
/// vanish returns every mode to its phase-space origin.
pub fn closure_residual(pulse: &PulseLoop, modes: &ModeSet) -> DVector<Complex64> {
    let d = pulse.segments();
    DVector::from_fn(modes.n(), |m, _| {
        let nu = modes.freqs[m];
        let mut acc = Complex64::ZERO;
        for s in 0..d {
            let (t0, t1) = pulse.segment_bounds(s);
            acc += sin_drive_integral(nu, pulse.drive_freq, t0, t1) * pulse.amplitudes[s];
        }
        acc
    })
}

/// Real 2N x D matrix of the closure constraints: rows 2m and 2m+1 are the
/// real and imaginary parts of mode m's per-segment closure coefficients.
pub fn closure_matrix(modes: &ModeSet, drive_freq: f64, duration: f64, segments: usize) -> DMatrix<f64> {
    let probe = PulseLoop {
        drive_freq,
        duration,
        amplitudes: DVector::zeros(segments),
    };
    let n = modes.n();
    let mut a = DMatrix::zeros(2 * n, segments);
    for s in 0..segments {
        let (t0, t1) = probe.segment_bounds(s);
        for m in 0..n {
            let z = sin_drive_integral(modes.freqs[m], drive_freq, t0, t1);
            a[(2 * m, s)] = z.re;
            a[(2 * m + 1, s)] = z.im;
        }
    }
    a
}

/// Orthonormal basis K (D x (D-2N)) of amplitude vectors that close every
/// mode: closure_residual(K x) = 0 for any coordinate vector x.
pub fn closure_basis(
    modes: &ModeSet,
    drive_freq: f64,
    duration: f64,
    segments: usize,
) -> Result<DMatrix<f64>> {
    let n = modes.n();
    if segments <= 2 * n {
        return Err(Error::TooFewSegments {
            min: 2 * n + 1,
            modes: n,
            got: segments,
        });
    }
    let a = closure_matrix(modes, drive_freq, duration, segments);
    Ok(linalg::null_basis(&a, 1e-12))
}

/// Triangular diagonal block of the slow phase integral:
/// integral over t0 < tau2 < tau1 < t0 + d of sin(delta (tau1 - tau2)),
/// equal to (x - sin x) / delta^2 with x = delta d.
fn tri_int(delta: f64, d: f64) -> f64 {
    if delta == 0.0 {
        return 0.0;
    }
    let x = delta * d;
    if x.abs() < 0.5 {
        let x2 = x * x;
        let series = 1.0 / 6.0 + x2 * (-1.0 / 120.0 + x2 * (1.0 / 5040.0 - x2 / 362_880.0));
        delta * d * d * d * series
    } else {
        (x - x.sin()) / (delta * delta)
    }
}

/// Full rectangle block: integral of sin(delta (tau1 - tau2)) for tau1 in
/// the later segment (center c1, width d1) and tau2 in the earlier one.
/// Product form d1 sinc(delta d1/2) d2 sinc(delta d2/2) sin(delta (c1-c2))
/// stays finite as delta -> 0.
fn rect_int(delta: f64, c1: f64, d1: f64, c2: f64, d2: f64) -> f64 {
    d1 * sinc(0.5 * delta * d1) * d2 * sinc(0.5 * delta * d2) * (delta * (c1 - c2)).sin()
}

/// Per-mode quadratic-form matrices P such that chi_m = w^T P^(m) w under
/// the rotating-wave approximation. Keeping only the slow beat between the
/// drive and mode m, the double integral of sin(nu (tau1-tau2)) f f over
/// the ordered triangle reduces to -(eta^2/4) times the integral of
/// sin(delta (tau1-tau2)) over the segment blocks, delta = drive - nu.
/// Off-diagonal blocks carry a half factor so the symmetric quadratic form
/// counts each ordered rectangle once.
pub fn phase_matrix(
    modes: &ModeSet,
    drive_freq: f64,
    duration: f64,
    segments: usize,
) -> Vec<DMatrix<f64>> {
    let probe = PulseLoop {
        drive_freq,
        duration,
        amplitudes: DVector::zeros(segments),
    };
    let centers: Vec<f64> = (0..segments)
        .map(|s| {
            let (t0, t1) = probe.segment_bounds(s);
            0.5 * (t0 + t1)
        })
        .collect();
    let width = duration / segments as f64;
    (0..modes.n())
        .map(|m| {
            let delta = drive_freq - modes.freqs[m];
            let eta2 = modes.lamb_dicke[m] * modes.lamb_dicke[m];
            let mut p = DMatrix::zeros(segments, segments);
            let diag = -(eta2 / 4.0) * tri_int(delta, width);
            for s in 0..segments {
                p[(s, s)] = diag;
            }
            for s1 in 1..segments {
                for s2 in 0..s1 {
                    let r = rect_int(delta, centers[s1], width, centers[s2], width);
                    let v = -(eta2 / 8.0) * r;
                    p[(s1, s2)] = v;
                    p[(s2, s1)] = v;
                }
            }
            p
        })
        .collect()
}

/// Relative closure tolerance applied by accumulate_chi: a residual is a
/// violation when it exceeds 1e-8 * max|w| * tau_loop.
pub const CLOSURE_RTOL: f64 = 1e-8;

/// Total spin-dependent phase vector of a schedule: sum of per-loop
/// quadratic forms. Cross-loop contributions vanish exactly when each loop
/// closes, so every loop's residuals are checked first.
pub fn accumulate_chi(schedule: &PulseSchedule, modes: &ModeSet) -> Result<PhaseVector> {
    let n = modes.n();
    let mut chi = DVector::zeros(n);
    for (index, pulse) in schedule.loops.iter().enumerate() {
        pulse.validate()?;
        let residuals = closure_residual(pulse, modes);
        let tolerance = CLOSURE_RTOL * pulse.amplitudes.amax() * pulse.duration;
        for m in 0..n {
            let r = residuals[m].norm();
            if r > tolerance {
                return Err(Error::ClosureViolated {
                    index,
                    residual: r,
                    tolerance,
                });
            }
        }
        let ps = phase_matrix(modes, pulse.drive_freq, pulse.duration, pulse.segments());
        for m in 0..n {
            chi[m] += pulse.amplitudes.dot(&(&ps[m] * &pulse.amplitudes));
        }
    }
    Ok(chi)
}

/// Phase-space path alpha_m(tau) = eta_m * integral_0^tau f(t) e^{i nu_m t} dt,
/// sampled at `samples` uniform points from 0 to the loop duration
/// inclusive. Row m is mode m's path.
pub fn trajectory(
    pulse: &PulseLoop,
    modes: &ModeSet,
    samples: usize,
) -> Result<DMatrix<Complex64>> {
    if samples < 2 {
        return Err(Error::InvalidConfig(format!(
            "trajectory needs at least 2 samples, got {samples}"
        )));
    }
    pulse.validate()?;
    let n = modes.n();
    let d = pulse.segments();
    let mut prefix: DMatrix<Complex64> = DMatrix::zeros(n, d + 1);
    for m in 0..n {
        for s in 0..d {
            let (t0, t1) = pulse.segment_bounds(s);
            let seg = sin_drive_integral(modes.freqs[m], pulse.drive_freq, t0, t1)
                * pulse.amplitudes[s];
            let acc = prefix[(m, s)] + seg;
            prefix[(m, s + 1)] = acc;
        }
    }
    let mut out: DMatrix<Complex64> = DMatrix::zeros(n, samples);
    for k in 0..samples {
        let tau = pulse.duration * k as f64 / (samples - 1) as f64;
        let s = ((k * d) / (samples - 1)).min(d - 1);
        let (t0, _) = pulse.segment_bounds(s);
        for m in 0..n {
            let partial = sin_drive_integral(modes.freqs[m], pulse.drive_freq, t0, tau)
                * pulse.amplitudes[s];
            out[(m, k)] = (prefix[(m, s)] + partial).scale(modes.lamb_dicke[m]);
        }
    }
    Ok(out)
}

/// One streaming nested-trapezoid pass over the whole schedule; see
/// chi_exact for the integral being computed.
fn chi_stream(schedule: &PulseSchedule, modes: &ModeSet, points_per_period: usize) -> Result<PhaseVector> {
    let n = modes.n();
    let wd_max = schedule
        .loops
        .iter()
        .map(|l| l.drive_freq)
        .fold(0.0, f64::max);
    let f_fast = (modes.freqs.max() + wd_max) / std::f64::consts::TAU;
    let mut g = vec![Complex64::ZERO; n];
    let mut outer = vec![Complex64::ZERO; n];
    let mut loop_start = 0.0f64;
    for pulse in &schedule.loops {
        pulse.validate()?;
        let d = pulse.segments();
        let seg_dur = pulse.duration / d as f64;
        let steps = ((points_per_period as f64 * seg_dur * f_fast).ceil() as usize).max(8);
        for s in 0..d {
            let w = pulse.amplitudes[s];
            let t_local0 = pulse.duration * s as f64 / d as f64;
            let mut t_prev = loop_start + t_local0;
            // v = f e^{i nu t}; the inner integrand f e^{-i nu t} is conj(v)
            let mut v_prev: Vec<Complex64> = {
                let f0 = w * (pulse.drive_freq * t_local0).sin();
                (0..n)
                    .map(|m| Complex64::from_polar(f0, modes.freqs[m] * t_prev))
                    .collect()
            };
            for k in 1..=steps {
                let local = pulse.duration * ((s * steps + k) as f64 / (d * steps) as f64);
                let t = loop_start + local;
                let h = t - t_prev;
                let f = w * (pulse.drive_freq * local).sin();
                for m in 0..n {
                    let v = Complex64::from_polar(f, modes.freqs[m] * t);
                    let g_new = g[m] + 0.5 * h * (v_prev[m].conj() + v.conj());
                    outer[m] += 0.5 * h * (v_prev[m] * g[m] + v * g_new);
                    g[m] = g_new;
                    v_prev[m] = v;
                }
                t_prev = t;
            }
        }
        loop_start += pulse.duration;
    }
    Ok(DVector::from_fn(n, |m, _| {
        modes.lamb_dicke[m] * modes.lamb_dicke[m] * outer[m].im
    }))
}

/// Exact accumulated phase by direct quadrature of the ordered double
/// integral with the unapproximated drive f(t) = w_s sin(wd t_local):
/// chi_m = eta_m^2 Im integral f(t) e^{i nu_m t} G_m(t) dt with
/// G_m(t) the running integral of f e^{-i nu_m t}. Streaming nested
/// trapezoid on a grid aligned to segment boundaries, `points_per_period`
/// samples per period of the fastest beat (nu_max + wd_max), with one
/// Richardson step (the trapezoid error is h^2) for fourth-order accuracy.
/// This is the oracle the RWA path is judged against.
pub fn chi_exact(
    schedule: &PulseSchedule,
    modes: &ModeSet,
    points_per_period: usize,
) -> Result<PhaseVector> {
    let coarse = chi_stream(schedule, modes, points_per_period)?;
    let fine = chi_stream(schedule, modes, 2 * points_per_period)?;
    Ok(fine * (4.0 / 3.0) - coarse * (1.0 / 3.0))
}
