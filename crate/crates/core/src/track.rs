//! Track state, the five-parameter surface-bound representation and its
//! covariance.
//!
//! Internally the reconstruction carries a global [`TrackState`] (position,
//! unit direction, signed inverse momentum). Covariances live in the local
//! curvilinear frame of that state: `(u, v, phi, theta, q/p)` where `u` is the
//! horizontal transverse axis `z_hat x t / |z_hat x t|`, `v = t x u`, and
//! `(phi, theta)` are the direction angles. At the perigee the first two
//! coordinates become the impact parameters `(d0, z0)`.

use nalgebra::{Matrix3, Point3, SMatrix, SVector, Unit, UnitVector3, Vector3};
use serde::{Deserialize, Serialize};

use crate::consts::MOMENTUM_FLOOR_GEV;
use crate::geomodel::ChamberId;

/// Named surfaces at which track parameters are reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Surface {
    SpectrometerEntrance,
    CalorimeterEntrance,
    Perigee,
    StationPlane(ChamberId),
}

/// Five track parameters bound to a surface.
///
/// At the perigee, `d0` is the signed transverse impact parameter and `z0` the
/// longitudinal one. At other surfaces the state defines its own reference
/// point on the surface, so `d0 = 0` there and `z0` is the crossing z; the
/// covariance still spans the full local frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackParameters {
    pub surface: Surface,
    pub d0: f64,
    pub z0: f64,
    pub phi0: f64,
    pub theta: f64,
    pub qop: f64,
}

impl TrackParameters {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.theta > 0.0 && self.theta < std::f64::consts::PI) {
            return Err(format!("theta must be in (0, pi), got {}", self.theta));
        }
        if self.qop == 0.0 {
            return Err("qop must be non-zero".into());
        }
        if self.qop.abs() > 1.0 / MOMENTUM_FLOOR_GEV {
            return Err(format!("|qop| = {} exceeds the {} GeV momentum floor", self.qop.abs(), MOMENTUM_FLOOR_GEV));
        }
        Ok(())
    }

    pub fn momentum(&self) -> f64 {
        1.0 / self.qop.abs()
    }

    pub fn charge(&self) -> f64 {
        self.qop.signum()
    }
}

/// 5x5 symmetric covariance of [`TrackParameters`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Covariance(pub SMatrix<f64, 5, 5>);

impl Covariance {
    pub fn zeros() -> Self {
        Covariance(SMatrix::zeros())
    }

    pub fn from_diagonal(d: &[f64; 5]) -> Self {
        Covariance(SMatrix::from_diagonal(&SVector::from_column_slice(d)))
    }

    /// Force exact symmetry (averages off-diagonal pairs).
    pub fn symmetrize(&mut self) {
        let t = self.0.transpose();
        self.0 = (self.0 + t) * 0.5;
    }

    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        let scale = self.0.abs().max().max(f64::MIN_POSITIVE);
        (self.0 - self.0.transpose()).abs().max() <= rel_tol * scale
    }

    /// Smallest eigenvalue (symmetric part).
    pub fn min_eigenvalue(&self) -> f64 {
        let sym = (self.0 + self.0.transpose()) * 0.5;
        sym.symmetric_eigen().eigenvalues.min()
    }

    /// Positive semi-definite up to a tolerance scaled by the trace.
    pub fn is_psd(&self) -> bool {
        self.min_eigenvalue() >= -1e-10 * self.0.trace().abs()
    }

    /// Row-major flattened 25 values, for file output.
    pub fn to_row_major(&self) -> [f64; 25] {
        let mut out = [0.0; 25];
        for i in 0..5 {
            for j in 0..5 {
                out[i * 5 + j] = self.0[(i, j)];
            }
        }
        out
    }

    pub fn from_row_major(v: &[f64; 25]) -> Self {
        let mut m = SMatrix::zeros();
        for i in 0..5 {
            for j in 0..5 {
                m[(i, j)] = v[i * 5 + j];
            }
        }
        Covariance(m)
    }
}

/// Global track state: position, unit momentum direction and q/p.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackState {
    pub pos: Point3<f64>,
    pub dir: UnitVector3<f64>,
    pub qop: f64,
}

impl TrackState {
    pub fn new(pos: Point3<f64>, dir: Vector3<f64>, qop: f64) -> Self {
        TrackState { pos, dir: Unit::new_normalize(dir), qop }
    }

    pub fn momentum(&self) -> f64 {
        1.0 / self.qop.abs()
    }

    pub fn charge(&self) -> f64 {
        self.qop.signum()
    }

    pub fn phi(&self) -> f64 {
        self.dir.y.atan2(self.dir.x)
    }

    pub fn theta(&self) -> f64 {
        self.dir.z.acos()
    }

    /// Curvilinear transverse axis `u = z_hat x t / |z_hat x t|`.
    pub fn curv_u(&self) -> Vector3<f64> {
        let sin_theta = self.dir.xy().norm().max(1e-15);
        Vector3::new(-self.dir.y, self.dir.x, 0.0) / sin_theta
    }

    /// Curvilinear axis `v = t x u`.
    pub fn curv_v(&self) -> Vector3<f64> {
        self.dir.cross(&self.curv_u())
    }

    /// Apply a curvilinear parameter step `(du, dv, dphi, dtheta, dqop)`.
    pub fn apply_curvilinear(&self, delta: &SVector<f64, 5>) -> TrackState {
        let u = self.curv_u();
        let v = self.curv_v();
        let pos = self.pos + u * delta[0] + v * delta[1];
        let phi = self.phi() + delta[2];
        let theta = (self.theta() + delta[3]).clamp(1e-9, std::f64::consts::PI - 1e-9);
        let dir = Vector3::new(phi.cos() * theta.sin(), phi.sin() * theta.sin(), theta.cos());
        TrackState { pos, dir: Unit::new_normalize(dir), qop: self.qop + delta[4] }
    }

    /// Parameters view at a non-perigee surface: the state is its own
    /// reference, so `d0 = 0` and `z0` is the crossing z.
    pub fn surface_parameters(&self, surface: Surface) -> TrackParameters {
        TrackParameters { surface, d0: 0.0, z0: self.pos.z, phi0: self.phi(), theta: self.theta(), qop: self.qop }
    }

    /// Perigee parameters of the state, assuming it sits at the point of
    /// closest approach to the z axis. `d0 = -x sin(phi) + y cos(phi)`.
    pub fn perigee_parameters(&self) -> TrackParameters {
        let phi = self.phi();
        let d0 = -self.pos.x * phi.sin() + self.pos.y * phi.cos();
        TrackParameters { surface: Surface::Perigee, d0, z0: self.pos.z, phi0: phi, theta: self.theta(), qop: self.qop }
    }

    /// Jacobian from the local curvilinear frame to perigee parameters,
    /// valid at the point of closest approach.
    pub fn curvilinear_to_perigee_jacobian(&self) -> SMatrix<f64, 5, 5> {
        let theta = self.theta();
        let sin_theta = theta.sin().max(1e-12);
        let d0 = self.perigee_parameters().d0;
        let mut j = SMatrix::<f64, 5, 5>::identity();
        // d0 tracks the transverse curvilinear offset exactly.
        j[(0, 0)] = 1.0;
        // A v-offset slides the PCA along the track: dz0/dv = 1/sin(theta).
        j[(1, 1)] = 1.0 / sin_theta;
        // Rotating phi at fixed point slides the PCA backward along the
        // track: dz0/dphi = -d0 cot(theta).
        j[(1, 2)] = -d0 * theta.cos() / sin_theta;
        j
    }

    /// Perigee covariance from the curvilinear covariance at the PCA.
    pub fn perigee_covariance(&self, curv: &Covariance) -> Covariance {
        let j = self.curvilinear_to_perigee_jacobian();
        let mut c = Covariance(j * curv.0 * j.transpose());
        c.symmetrize();
        c
    }
}

/// Build a state from perigee parameters (the inverse of
/// [`TrackState::perigee_parameters`] for a point at the PCA).
pub fn state_from_perigee(p: &TrackParameters) -> TrackState {
    let pos = Point3::new(-p.d0 * p.phi0.sin(), p.d0 * p.phi0.cos(), p.z0);
    let dir = Vector3::new(p.phi0.cos() * p.theta.sin(), p.phi0.sin() * p.theta.sin(), p.theta.cos());
    TrackState::new(pos, dir, p.qop)
}

/// Rotation matrix columns are the curvilinear axes (u, v, t); useful when
/// projecting global-frame quantities into the local frame.
pub fn curvilinear_basis(state: &TrackState) -> Matrix3<f64> {
    Matrix3::from_columns(&[state.curv_u(), state.curv_v(), state.dir.into_inner()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sample_state() -> TrackState {
        TrackState::new(Point3::new(0.3, -0.2, 1.4), Vector3::new(0.6, 0.5, 0.4), 1.0 / 35.0)
    }

    #[test]
    fn curvilinear_frame_is_orthonormal() {
        let s = sample_state();
        let u = s.curv_u();
        let v = s.curv_v();
        let t = s.dir.into_inner();
        assert_relative_eq!(u.norm(), 1.0, max_relative = 1e-14);
        assert_relative_eq!(v.norm(), 1.0, max_relative = 1e-14);
        assert_relative_eq!(u.dot(&v), 0.0, epsilon = 1e-14);
        assert_relative_eq!(u.dot(&t), 0.0, epsilon = 1e-14);
        assert_relative_eq!(v.dot(&t), 0.0, epsilon = 1e-14);
        assert_relative_eq!((u.cross(&v) - t).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn apply_curvilinear_moves_as_expected() {
        let s = sample_state();
        let mut delta = SVector::<f64, 5>::zeros();
        delta[0] = 1e-3;
        let moved = s.apply_curvilinear(&delta);
        assert_relative_eq!((moved.pos - s.pos - s.curv_u() * 1e-3).norm(), 0.0, epsilon = 1e-12);
        assert_relative_eq!((moved.dir.into_inner() - s.dir.into_inner()).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn perigee_round_trip() {
        let params = TrackParameters {
            surface: Surface::Perigee,
            d0: 0.012,
            z0: -0.4,
            phi0: 1.1,
            theta: 0.9,
            qop: -1.0 / 22.0,
        };
        let state = state_from_perigee(&params);
        // The constructed point is at the PCA: transverse position must be
        // perpendicular to the transverse direction.
        let rt = state.pos.coords.xy();
        let pt = state.dir.xy();
        assert_relative_eq!(rt.dot(&pt), 0.0, epsilon = 1e-15);
        let back = state.perigee_parameters();
        assert_relative_eq!(back.d0, params.d0, max_relative = 1e-12);
        assert_relative_eq!(back.z0, params.z0, max_relative = 1e-12);
        assert_relative_eq!(back.phi0, params.phi0, max_relative = 1e-12);
        assert_relative_eq!(back.theta, params.theta, max_relative = 1e-12);
    }

    #[test]
    fn perigee_jacobian_matches_finite_differences() {
        let params =
            TrackParameters { surface: Surface::Perigee, d0: 0.03, z0: 0.2, phi0: 0.7, theta: 1.2, qop: 1.0 / 18.0 };
        let state = state_from_perigee(&params);
        let j = state.curvilinear_to_perigee_jacobian();
        let h = 1e-7;
        for col in 0..5 {
            let mut dp = SVector::<f64, 5>::zeros();
            dp[col] = h;
            let moved = state.apply_curvilinear(&dp);
            // Re-find the PCA of the moved straight line to the z axis.
            let t = moved.dir.xy();
            let s_pca = -(moved.pos.coords.xy().dot(&t)) / t.norm_squared();
            let at_pca = TrackState::new(moved.pos + moved.dir.into_inner() * s_pca, moved.dir.into_inner(), moved.qop);
            let p1 = at_pca.perigee_parameters();
            let fd = [
                (p1.d0 - params.d0) / h,
                (p1.z0 - params.z0) / h,
                (p1.phi0 - params.phi0) / h,
                (p1.theta - params.theta) / h,
                (p1.qop - params.qop) / h,
            ];
            for row in 0..5 {
                assert_relative_eq!(j[(row, col)], fd[row], epsilon = 1e-5, max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn covariance_helpers() {
        let mut c = Covariance::from_diagonal(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!(c.is_symmetric(1e-12));
        assert!(c.is_psd());
        c.0[(0, 1)] = 0.1;
        assert!(!c.is_symmetric(1e-12));
        c.symmetrize();
        assert!(c.is_symmetric(1e-12));
        let flat = c.to_row_major();
        let back = Covariance::from_row_major(&flat);
        assert_eq!(back, c);
    }
}
