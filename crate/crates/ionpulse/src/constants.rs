//! Physical constants (CODATA 2018 exact/recommended values) and the
//! ytterbium hardware preset used by the bundled configurations.

/// Elementary charge, C.
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;

/// Vacuum permittivity, F/m.
pub const VACUUM_PERMITTIVITY: f64 = 8.854_187_812_8e-12;

/// Reduced Planck constant, J s.
pub const HBAR: f64 = 1.054_571_817e-34;

/// Atomic mass unit, kg.
pub const ATOMIC_MASS: f64 = 1.660_539_066_60e-27;

/// Mass of 171Yb+, kg (170.936 u).
pub const YB171_MASS: f64 = 170.936 * ATOMIC_MASS;

/// Raman laser wavelength for the Yb171 preset, m.
pub const RAMAN_WAVELENGTH: f64 = 355e-9;

/// Effective wavevector difference for two counter-propagating Raman beams
/// at 45 degrees to the transverse axis: sqrt(2) * 2 pi / lambda, 1/m.
pub const RAMAN_DELTA_K: f64 =
    std::f64::consts::SQRT_2 * std::f64::consts::TAU / RAMAN_WAVELENGTH;
