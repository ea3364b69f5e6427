//! Backtracking from the spectrometer to the beam line with energy-loss
//! correction, parameter reports at the three reference surfaces, and the
//! covariance-weighted combination with an inner-tracker measurement.

use nalgebra::{Point3, SMatrix, SVector};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bfield::Field;
use crate::consts::DEFAULT_ELOSS_SIGMA_FRAC;
use crate::geomodel::{MaterialSlab, ToyGeometry};
use crate::propagation::SurfaceGeom;
use crate::toysim::{highland_theta0, TruthMuon};
use crate::track::{Covariance, Surface, TrackParameters, TrackState};
use crate::trackfit::{propagate, PropagationSettings, TrackfitError};

/// Mean energy loss parameterization `dE(p) = a + b p` with fractional
/// straggling width.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EnergyLossParam {
    /// Constant (ionization) term, GeV.
    pub a: f64,
    /// Momentum-proportional (radiative) slope, dimensionless.
    pub b: f64,
    /// Straggling width as a fraction of the mean loss.
    pub sigma_frac: f64,
}

impl EnergyLossParam {
    pub fn from_slab(slab: &MaterialSlab) -> Self {
        EnergyLossParam { a: slab.eloss_a, b: slab.eloss_b, sigma_frac: DEFAULT_ELOSS_SIGMA_FRAC }
    }
}

/// Mean energy loss at momentum `p`.
pub fn eloss_mean(p: f64, param: &EnergyLossParam) -> f64 {
    param.a + param.b * p
}

/// Straggling width of the loss at momentum `p`.
pub fn eloss_sigma(p: f64, param: &EnergyLossParam) -> f64 {
    param.sigma_frac * eloss_mean(p, param)
}

/// Parameters and covariance at the three reporting surfaces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurfaceReport {
    pub spectrometer_entrance: (TrackParameters, Covariance),
    pub calorimeter_entrance: Option<(TrackParameters, Covariance)>,
    pub perigee: Option<(TrackParameters, Covariance)>,
    /// False when the inward propagation failed part-way.
    pub complete: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum PerigeeError {
    #[error("singular covariance on the {which} input")]
    SingularCovariance { which: &'static str },
    #[error(transparent)]
    Propagation(#[from] TrackfitError),
}

/// Backtrack a refitted track from the spectrometer entrance through the
/// calorimeter to the beam line. The calorimeter's mean loss is reinstated
/// exactly (the inverse of `p_out = p_in - dE(p_in)`), the covariance picks up
/// straggling and multiple-scattering noise, and parameters are reported at
/// the spectrometer entrance, the calorimeter entrance and the perigee.
pub fn backtrack(
    state: &TrackState,
    cov: &Covariance,
    geom: &ToyGeometry,
    field: &dyn Field,
    eloss: &EnergyLossParam,
) -> SurfaceReport {
    // Transport without slab handling: the calorimeter correction below uses
    // the supplied parameterization instead of the geometry's own constants.
    let settings = PropagationSettings { material: false, eloss_sigma_frac: eloss.sigma_frac };

    // Land exactly on the entrance cylinder (the fit reference floats nearby).
    let entrance_surface = SurfaceGeom::Cylinder { radius: geom.spectrometer_entrance_radius() };
    let g0 = entrance_surface.g(&state.pos, &state.dir.into_inner());
    let at_entrance = if g0.abs() < 1e-9 {
        (*state, *cov)
    } else {
        let sign = if g0 > 0.0 { -1.0 } else { 1.0 };
        match propagate(state, Some(cov), &entrance_surface, field, geom, &settings, sign) {
            Ok(r) => (r.state, r.cov.unwrap()),
            Err(_) => (*state, *cov),
        }
    };
    let entrance_report = (at_entrance.0.surface_parameters(Surface::SpectrometerEntrance), at_entrance.1);

    // Inward to the calorimeter mid shell.
    let calo_mid = SurfaceGeom::Cylinder { radius: geom.calorimeter.crossing_radius() };
    let leg1 = match propagate(&at_entrance.0, Some(&at_entrance.1), &calo_mid, field, geom, &settings, -1.0) {
        Ok(r) => r,
        Err(_) => {
            return SurfaceReport {
                spectrometer_entrance: entrance_report,
                calorimeter_entrance: None,
                perigee: None,
                complete: false,
            }
        }
    };

    // Reinstate the mean loss: p_inner = (p_outer + a) / (1 - b).
    let mut mid_state = leg1.state;
    let mut mid_cov = leg1.cov.unwrap();
    let p_outer = mid_state.momentum();
    let p_inner = (p_outer + eloss.a) / (1.0 - eloss.b);
    let qop_inner = mid_state.qop.signum() / p_inner;
    let dqop_factor = (p_outer / p_inner).powi(2) / (1.0 - eloss.b);
    mid_state.qop = qop_inner;
    let mut jump = SMatrix::<f64, 5, 5>::identity();
    jump[(4, 4)] = dqop_factor;
    let mut c = jump * mid_cov.0 * jump.transpose();

    // Noise: loss straggling on q/p plus multiple scattering in the
    // calorimeter (thin-shell approximation, angular terms only).
    let sigma_e = eloss_sigma(p_inner, eloss);
    c[(4, 4)] += (sigma_e * qop_inner * qop_inner).powi(2);
    let r_hat = nalgebra::Vector3::new(mid_state.pos.x, mid_state.pos.y, 0.0).normalize();
    let cos_inc = mid_state.dir.dot(&r_hat).abs().max(0.1);
    let theta0 = highland_theta0(p_inner, geom.calorimeter.thickness_x0 / cos_inc);
    let sin_theta = mid_state.dir.xy().norm().max(1e-6);
    c[(2, 2)] += (theta0 / sin_theta).powi(2);
    c[(3, 3)] += theta0 * theta0;
    mid_cov = Covariance(c);
    mid_cov.symmetrize();

    // Inward to the calorimeter entrance.
    let calo_entrance = SurfaceGeom::Cylinder { radius: geom.calorimeter_entrance_radius() };
    let leg2 = match propagate(&mid_state, Some(&mid_cov), &calo_entrance, field, geom, &settings, -1.0) {
        Ok(r) => r,
        Err(_) => {
            return SurfaceReport {
                spectrometer_entrance: entrance_report,
                calorimeter_entrance: None,
                perigee: None,
                complete: false,
            }
        }
    };
    let calo_report =
        (leg2.state.surface_parameters(Surface::CalorimeterEntrance), leg2.cov.unwrap());

    // Final leg to the point of closest approach to the beam axis.
    let leg3 = match propagate(&leg2.state, Some(&calo_report.1), &SurfaceGeom::PerigeeAxis, field, geom, &settings, -1.0)
    {
        Ok(r) => r,
        Err(_) => {
            return SurfaceReport {
                spectrometer_entrance: entrance_report,
                calorimeter_entrance: Some(calo_report),
                perigee: None,
                complete: false,
            }
        }
    };
    let perigee_params = leg3.state.perigee_parameters();
    let perigee_cov = leg3.state.perigee_covariance(&leg3.cov.unwrap());

    SurfaceReport {
        spectrometer_entrance: entrance_report,
        calorimeter_entrance: Some(calo_report),
        perigee: Some((perigee_params, perigee_cov)),
        complete: true,
    }
}

/// A statistically combined spectrometer + inner-tracker measurement at the
/// perigee.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CombinedTrack {
    pub params: TrackParameters,
    pub cov: Covariance,
    /// Compatibility chi2 of the two inputs, 5 degrees of freedom.
    pub match_chi2: f64,
    pub muon_index: usize,
    pub inner_index: usize,
}

fn params_vector(p: &TrackParameters) -> SVector<f64, 5> {
    SVector::from([p.d0, p.z0, p.phi0, p.theta, p.qop])
}

/// Weighted-mean combination of two perigee measurements:
/// `x = (C1^-1 + C2^-1)^-1 (C1^-1 x1 + C2^-1 x2)`, with the match chi2
/// `d^T (C1 + C2)^-1 d` for `d = x1 - x2`.
pub fn combine(
    muon: (&TrackParameters, &Covariance),
    inner: (&TrackParameters, &Covariance),
) -> Result<CombinedTrack, PerigeeError> {
    let w1 = muon.1 .0.try_inverse().ok_or(PerigeeError::SingularCovariance { which: "muon" })?;
    let w2 = inner.1 .0.try_inverse().ok_or(PerigeeError::SingularCovariance { which: "inner" })?;
    let x1 = params_vector(muon.0);
    let mut x2 = params_vector(inner.0);
    // Align the phi branch of the second input to the first.
    x2[2] = x1[2] + crate::geomodel::wrap_angle(x2[2] - x1[2]);

    let w_sum = w1 + w2;
    let cov = w_sum.try_inverse().ok_or(PerigeeError::SingularCovariance { which: "combined" })?;
    let x = cov * (w1 * x1 + w2 * x2);

    let d = x1 - x2;
    let sum = muon.1 .0 + inner.1 .0;
    let sum_inv = sum.try_inverse().ok_or(PerigeeError::SingularCovariance { which: "combined" })?;
    let match_chi2 = (d.transpose() * sum_inv * d)[(0, 0)];

    let mut cov = Covariance(cov);
    cov.symmetrize();
    Ok(CombinedTrack {
        params: TrackParameters {
            surface: Surface::Perigee,
            d0: x[0],
            z0: x[1],
            phi0: crate::geomodel::wrap_angle(x[2]),
            theta: x[3],
            qop: x[4],
        },
        cov,
        match_chi2,
        muon_index: 0,
        inner_index: 0,
    })
}

/// Outcome of the fake-rejection cut on the match chi2.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FakeDecision {
    pub rejected: bool,
    pub match_chi2: f64,
    pub cut: f64,
}

/// Reject combinations whose match chi2 exceeds the cut (default 25 for five
/// degrees of freedom).
pub fn reject_fakes(combined: &CombinedTrack, cut: f64) -> FakeDecision {
    FakeDecision { rejected: combined.match_chi2 > cut, match_chi2: combined.match_chi2, cut }
}

/// Toy inner tracker: truth smeared with a configurable perigee covariance.
/// The defaults beat the spectrometer below roughly 50 GeV and lose above.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct InnerTrackerModel {
    pub d0_sigma: f64,
    pub z0_sigma: f64,
    pub phi_sigma: f64,
    pub theta_sigma: f64,
    /// Relative momentum resolution constant term.
    pub qop_rel_a: f64,
    /// Relative momentum resolution slope, 1/GeV.
    pub qop_rel_b: f64,
}

impl Default for InnerTrackerModel {
    fn default() -> Self {
        InnerTrackerModel {
            d0_sigma: 12e-6,
            z0_sigma: 70e-6,
            phi_sigma: 0.15e-3,
            theta_sigma: 0.4e-3,
            qop_rel_a: 0.004,
            qop_rel_b: 0.0002,
        }
    }
}

impl InnerTrackerModel {
    pub fn covariance(&self, qop: f64) -> Covariance {
        let p = 1.0 / qop.abs();
        let rel = (self.qop_rel_a.powi(2) + (self.qop_rel_b * p).powi(2)).sqrt();
        let qop_sigma = qop.abs() * rel;
        Covariance::from_diagonal(&[
            self.d0_sigma.powi(2),
            self.z0_sigma.powi(2),
            self.phi_sigma.powi(2),
            self.theta_sigma.powi(2),
            qop_sigma.powi(2),
        ])
    }
}

/// True perigee parameters of a muon (straight-line extrapolation near the
/// beam, where the toy field vanishes).
pub fn truth_perigee(muon: &TruthMuon) -> TrackParameters {
    let state = muon.state();
    let t = state.dir.xy();
    let s_pca = if t.norm_squared() > 0.0 { -(state.pos.coords.xy().dot(&t)) / t.norm_squared() } else { 0.0 };
    let at_pca = TrackState::new(
        Point3::from(state.pos.coords + state.dir.into_inner() * s_pca),
        state.dir.into_inner(),
        state.qop,
    );
    at_pca.perigee_parameters()
}

/// Simulate the inner tracker's measurement of a truth muon.
pub fn simulate_inner_track(
    muon: &TruthMuon,
    model: &InnerTrackerModel,
    rng: &mut ChaCha8Rng,
) -> (TrackParameters, Covariance) {
    let truth = truth_perigee(muon);
    let cov = model.covariance(truth.qop);
    let g = Normal::new(0.0, 1.0).unwrap();
    let params = TrackParameters {
        surface: Surface::Perigee,
        d0: truth.d0 + cov.0[(0, 0)].sqrt() * g.sample(rng),
        z0: truth.z0 + cov.0[(1, 1)].sqrt() * g.sample(rng),
        phi0: truth.phi0 + cov.0[(2, 2)].sqrt() * g.sample(rng),
        theta: truth.theta + cov.0[(3, 3)].sqrt() * g.sample(rng),
        qop: truth.qop + cov.0[(4, 4)].sqrt() * g.sample(rng),
    };
    (params, cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn eloss_constant_when_b_zero() {
        let p = EnergyLossParam { a: 3.0, b: 0.0, sigma_frac: 0.1 };
        for mom in [5.0, 50.0, 500.0] {
            assert_eq!(eloss_mean(mom, &p), 3.0);
        }
    }

    #[test]
    fn eloss_arithmetic() {
        let p = EnergyLossParam { a: 3.0, b: 0.01, sigma_frac: 0.1 };
        assert_relative_eq!(eloss_mean(100.0, &p), 4.0, max_relative = 1e-15);
        assert_relative_eq!(eloss_sigma(100.0, &p), 0.4, max_relative = 1e-15);
    }

    #[test]
    fn combine_identical_inputs() {
        let params = TrackParameters {
            surface: Surface::Perigee,
            d0: 1e-4,
            z0: 0.01,
            phi0: 0.3,
            theta: 1.2,
            qop: 1.0 / 25.0,
        };
        let cov = Covariance::from_diagonal(&[1e-8, 1e-6, 1e-8, 1e-8, 1e-8]);
        let out = combine((&params, &cov), (&params, &cov)).unwrap();
        assert_relative_eq!(out.params.qop, params.qop, max_relative = 1e-12);
        assert_relative_eq!(out.params.d0, params.d0, max_relative = 1e-12);
        for k in 0..5 {
            assert_relative_eq!(out.cov.0[(k, k)], cov.0[(k, k)] / 2.0, max_relative = 1e-10);
        }
        assert!(out.match_chi2.abs() < 1e-12);
    }

    #[test]
    fn combine_uninformative_second_input() {
        let p1 = TrackParameters { surface: Surface::Perigee, d0: 0.0, z0: 0.0, phi0: 1.0, theta: 1.0, qop: 0.05 };
        let mut p2 = p1;
        p2.qop = 0.06;
        p2.d0 = 0.01;
        let c1 = Covariance::from_diagonal(&[1e-8, 1e-8, 1e-8, 1e-8, 1e-8]);
        let c2 = Covariance::from_diagonal(&[1e-2, 1e-2, 1e-2, 1e-2, 1e-2]);
        let out = combine((&p1, &c1), (&p2, &c2)).unwrap();
        assert_relative_eq!(out.params.qop, p1.qop, max_relative = 1e-4);
        assert_relative_eq!(out.params.d0, p1.d0, epsilon = 1e-4 * 0.01);
    }

    #[test]
    fn combine_is_symmetric() {
        let p1 = TrackParameters { surface: Surface::Perigee, d0: 1e-3, z0: 0.02, phi0: 0.4, theta: 1.1, qop: 0.04 };
        let p2 = TrackParameters { surface: Surface::Perigee, d0: -2e-3, z0: 0.018, phi0: 0.41, theta: 1.09, qop: 0.042 };
        let c1 = Covariance::from_diagonal(&[1e-6, 1e-5, 1e-7, 1e-7, 1e-7]);
        let c2 = Covariance::from_diagonal(&[2e-6, 3e-5, 2e-7, 1e-7, 4e-7]);
        let a = combine((&p1, &c1), (&p2, &c2)).unwrap();
        let b = combine((&p2, &c2), (&p1, &c1)).unwrap();
        assert_relative_eq!(a.params.qop, b.params.qop, max_relative = 1e-12);
        assert_relative_eq!(a.params.d0, b.params.d0, max_relative = 1e-12);
        assert_relative_eq!(a.match_chi2, b.match_chi2, max_relative = 1e-12);
    }

    #[test]
    fn combine_rejects_singular_input() {
        let p = TrackParameters { surface: Surface::Perigee, d0: 0.0, z0: 0.0, phi0: 0.0, theta: 1.0, qop: 0.05 };
        let good = Covariance::from_diagonal(&[1.0, 1.0, 1.0, 1.0, 1.0]);
        let bad = Covariance::zeros();
        let err = combine((&p, &bad), (&p, &good)).unwrap_err();
        assert!(err.to_string().contains("muon"));
    }

    #[test]
    fn reject_fakes_thresholds() {
        let mk = |chi2: f64| CombinedTrack {
            params: TrackParameters { surface: Surface::Perigee, d0: 0.0, z0: 0.0, phi0: 0.0, theta: 1.0, qop: 0.05 },
            cov: Covariance::zeros(),
            match_chi2: chi2,
            muon_index: 0,
            inner_index: 0,
        };
        assert!(!reject_fakes(&mk(0.0), 25.0).rejected);
        assert!(reject_fakes(&mk(26.0), 25.0).rejected);
    }

    #[test]
    fn combined_diagonal_never_exceeds_inputs() {
        // Random-ish PSD pairs built from squares.
        let mut seed = 1u64;
        for _ in 0..20 {
            let mut next = || {
                seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((seed >> 11) as f64 / (1u64 << 53) as f64) + 1e-3
            };
            let c1 = Covariance::from_diagonal(&[next(), next(), next(), next(), next()]);
            let c2 = Covariance::from_diagonal(&[next(), next(), next(), next(), next()]);
            let p = TrackParameters { surface: Surface::Perigee, d0: 0.0, z0: 0.0, phi0: 0.0, theta: 1.0, qop: 0.05 };
            let out = combine((&p, &c1), (&p, &c2)).unwrap();
            for k in 0..5 {
                assert!(out.cov.0[(k, k)] <= c1.0[(k, k)] + 1e-12);
                assert!(out.cov.0[(k, k)] <= c2.0[(k, k)] + 1e-12);
            }
        }
    }
}
