//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid trap configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid gate specification: {0}")]
    InvalidGate(String),

    #[error(
        "equilibrium solve did not converge after {iterations} iterations \
         (last force residual {residual:.3e})"
    )]
    EquilibriumDiverged { iterations: usize, residual: f64 },

    #[error(
        "string is not transversely stable at these parameters: \
         mode {mode} has squared frequency {nu_sq:.6e} <= 0"
    )]
    UnstableMode { mode: usize, nu_sq: f64 },

    #[error(
        "edge ions cannot serve as targets of the analytic insensitive vector \
         (t1 = {t1}, t2 = {t2}, n = {n}): the cosine delta identity picks up a \
         target contribution when t1 = 1 or t2 = n"
    )]
    EdgeTargets { t1: usize, t2: usize, n: usize },

    #[error("insufficient segments: need more than {min} for {modes} modes, got {got}")]
    TooFewSegments { min: usize, modes: usize, got: usize },

    #[error(
        "loop {index} fails mode closure: residual {residual:.3e} \
         exceeds tolerance {tolerance:.3e}"
    )]
    ClosureViolated {
        index: usize,
        residual: f64,
        tolerance: f64,
    },

    #[error("design infeasible: constraint residual {residual:.3e} (tolerance {tolerance:.3e}); {detail}")]
    Infeasible {
        residual: f64,
        tolerance: f64,
        detail: String,
    },

    #[error(
        "peak Rabi frequency {required:.6e} rad/s exceeds the budget {budget:.6e} rad/s"
    )]
    PowerBudget { required: f64, budget: f64 },

    #[error("no optimizer restart reached the leakage tolerance; best achieved {best:.3e}")]
    NoConvergentRestart { best: f64 },

    #[error("dense unitary construction is limited to 12 ions, got {0}")]
    TooManyIons(usize),

    #[error("target coupling J[t1,t2] is zero; crosstalk ratios are undefined")]
    ZeroTargetCoupling,

    #[error("oscillator oracle out of scope: {0}")]
    OracleScope(String),

    #[error(
        "oscillator integration not converged: step-halving disagreement \
         {disagreement:.3e} exceeds 1e-6"
    )]
    IntegrationDiverged { disagreement: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
