//! Physical constants and unit conventions shared across the crate.

/// Speed of light in m/ns. Also the conversion factor between path length
/// and time of flight for ultrarelativistic muons.
pub const C_LIGHT_M_PER_NS: f64 = 0.299_792_458;

/// Bending constant: `d(t_hat)/ds = K_BEND * (q/p) * (t_hat x B)` with
/// p in GeV, B in tesla and s in meters.
pub const K_BEND: f64 = 0.299_792_458;

/// Muon mass in GeV.
pub const MUON_MASS_GEV: f64 = 0.105_658_375;

/// Momentum floor in GeV below which a muon is considered ranged out and
/// below which track parameters are rejected (`|q/p| <= 1/2`).
pub const MOMENTUM_FLOOR_GEV: f64 = 2.0;

/// Hard cap on generated momentum, used as the saturation value when a
/// segment pair is compatible with a straight line.
pub const MOMENTUM_CAP_GEV: f64 = 3000.0;

/// Default fractional width of energy-loss straggling relative to the mean
/// loss, used both when fluctuating losses in simulation and when inflating
/// the fit covariance.
pub const DEFAULT_ELOSS_SIGMA_FRAC: f64 = 0.1;
