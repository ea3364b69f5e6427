//! Charged-particle transport in a magnetic field.
//!
//! Integrates `dx/ds = t`, `dt/ds = K * (q/p) * (t x B(x))` with an adaptive
//! fourth-order Runge-Kutta scheme (step doubling with Richardson
//! extrapolation) and, optionally, the variational equations that carry the
//! 7x5 sensitivity of the global state `(x, t, q/p)` to the initial local
//! curvilinear parameters `(u, v, phi, theta, q/p)`. Field gradients from
//! [`FieldSample`] drive the variational flow.
//!
//! Propagation targets are implicit surfaces; the stepper advances until the
//! first watched surface is crossed and lands on it with a root-finding
//! refinement plus Newton polish.

use nalgebra::{Point3, SMatrix, Unit, UnitVector3, Vector3};

use crate::bfield::Field;
use crate::consts::K_BEND;
use crate::track::TrackState;

/// Sensitivity of `(x, y, z, tx, ty, tz, qop)` to the initial curvilinear
/// parameters `(u, v, phi, theta, qop)`.
pub type Sensitivity = SMatrix<f64, 7, 5>;

/// Integration control.
#[derive(Debug, Clone, Copy)]
pub struct StepOptions {
    /// Local position error tolerance per step, meters.
    pub tol_m: f64,
    pub max_step_m: f64,
    pub min_step_m: f64,
    /// Abort when the accumulated path exceeds this, meters.
    pub max_path_m: f64,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions { tol_m: 1e-9, max_step_m: 1.0, min_step_m: 1e-9, max_path_m: 60.0 }
    }
}

/// An implicit surface used as a propagation target or checkpoint.
#[derive(Debug, Clone, Copy)]
pub enum SurfaceGeom {
    /// Cylinder around the z axis.
    Cylinder { radius: f64 },
    /// Flat plane through `point` with unit `normal`.
    Plane { point: Point3<f64>, normal: UnitVector3<f64> },
    /// Point of closest approach to the z axis (beam line).
    PerigeeAxis,
    /// Plane of constant z.
    ZPlane { z: f64 },
}

impl SurfaceGeom {
    /// Signed surface function; a crossing is a sign change of `g` along the path.
    pub fn g(&self, pos: &Point3<f64>, dir: &Vector3<f64>) -> f64 {
        match self {
            SurfaceGeom::Cylinder { radius } => pos.coords.xy().norm() - radius,
            SurfaceGeom::Plane { point, normal } => (pos - point).dot(normal),
            SurfaceGeom::PerigeeAxis => pos.x * dir.x + pos.y * dir.y,
            SurfaceGeom::ZPlane { z } => pos.z - z,
        }
    }

    /// Gradients of `g` with respect to position and direction.
    pub fn grad_g(&self, pos: &Point3<f64>, dir: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
        match self {
            SurfaceGeom::Cylinder { .. } => {
                let rt = pos.coords.xy().norm().max(1e-300);
                (Vector3::new(pos.x / rt, pos.y / rt, 0.0), Vector3::zeros())
            }
            SurfaceGeom::Plane { normal, .. } => (normal.into_inner(), Vector3::zeros()),
            SurfaceGeom::PerigeeAxis => (Vector3::new(dir.x, dir.y, 0.0), Vector3::new(pos.x, pos.y, 0.0)),
            SurfaceGeom::ZPlane { .. } => (Vector3::z(), Vector3::zeros()),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PropagationError {
    #[error("no watched surface crossed within {path:.2} m")]
    NoCrossing { path: f64 },
    #[error("step size underflow at path {path:.3} m")]
    StepUnderflow { path: f64 },
    #[error("tangential crossing, cannot land on surface")]
    TangentialCrossing,
}

#[derive(Clone, Copy)]
struct Y {
    pos: Vector3<f64>,
    dir: Vector3<f64>,
    sens: Sensitivity,
}

impl Y {
    fn lin(&self, other: &Y, a: f64, b: f64) -> Y {
        Y { pos: self.pos * a + other.pos * b, dir: self.dir * a + other.dir * b, sens: self.sens * a + other.sens * b }
    }
}

/// Initial sensitivity: curvilinear deltas at `state` expressed as global
/// `(x, t, qop)` deltas.
pub fn initial_sensitivity(state: &TrackState) -> Sensitivity {
    let u = state.curv_u();
    let v = state.curv_v();
    let sin_theta = state.dir.xy().norm();
    let mut m = Sensitivity::zeros();
    for k in 0..3 {
        m[(k, 0)] = u[k];
        m[(k, 1)] = v[k];
        // d t / d phi = sin(theta) * u, d t / d theta = -v.
        m[(3 + k, 2)] = sin_theta * u[k];
        m[(3 + k, 3)] = -v[k];
    }
    m[(6, 4)] = 1.0;
    m
}

/// Project a free sensitivity onto a surface (the crossing point moves with
/// the parameters) and express the result in the curvilinear frame of the
/// landed state. Returns the 5x5 transport Jacobian.
pub fn surface_jacobian(sens: &Sensitivity, state: &TrackState, field: &dyn Field, surface: &SurfaceGeom) -> SMatrix<f64, 5, 5> {
    let b = field.b(&state.pos);
    let kappa = K_BEND * state.qop;
    let dir = state.dir.into_inner();
    // Full-state derivative along the path.
    let mut f = SMatrix::<f64, 7, 1>::zeros();
    let ddir = kappa * dir.cross(&b);
    for k in 0..3 {
        f[(k, 0)] = dir[k];
        f[(3 + k, 0)] = ddir[k];
    }
    let (gx, gt) = surface.grad_g(&state.pos, &dir);
    let mut grad = SMatrix::<f64, 7, 1>::zeros();
    for k in 0..3 {
        grad[(k, 0)] = gx[k];
        grad[(3 + k, 0)] = gt[k];
    }
    let dg_ds = (grad.transpose() * f)[(0, 0)];
    let constrained = if dg_ds.abs() > 1e-12 {
        sens - f * (grad.transpose() * sens) / dg_ds
    } else {
        *sens
    };

    // Extract local curvilinear deltas at the landed state.
    let u = state.curv_u();
    let v = state.curv_v();
    let sin_theta = state.dir.xy().norm().max(1e-12);
    let mut l = SMatrix::<f64, 5, 7>::zeros();
    for k in 0..3 {
        l[(0, k)] = u[k];
        l[(1, k)] = v[k];
        l[(2, 3 + k)] = u[k] / sin_theta;
        l[(3, 3 + k)] = -v[k];
    }
    l[(4, 6)] = 1.0;
    l * constrained
}

/// Adaptive stepper walking a state through the field.
pub struct Stepper<'a> {
    field: &'a dyn Field,
    opts: StepOptions,
    pub state: TrackState,
    /// Raw sensitivity of the current global state to the initial curvilinear
    /// parameters; present only when requested.
    pub sens: Option<Sensitivity>,
    /// Accumulated unsigned path length, meters.
    pub path: f64,
    sign: f64,
    h: f64,
    /// Field discontinuity surfaces the stepper lands on internally.
    boundaries: Vec<SurfaceGeom>,
}

impl<'a> Stepper<'a> {
    /// `sign = +1.0` follows the momentum direction, `-1.0` walks backward.
    pub fn new(field: &'a dyn Field, opts: StepOptions, state: TrackState, with_sens: bool, sign: f64) -> Self {
        let h = (0.1f64).min(opts.max_step_m).max(opts.min_step_m);
        Stepper {
            field,
            opts,
            sens: with_sens.then(|| initial_sensitivity(&state)),
            state,
            path: 0.0,
            sign: sign.signum(),
            h,
            boundaries: field.discontinuity_surfaces(),
        }
    }

    fn current_y(&self) -> Y {
        Y {
            pos: self.state.pos.coords,
            dir: self.state.dir.into_inner(),
            sens: self.sens.unwrap_or_else(Sensitivity::zeros),
        }
    }

    fn store_y(&mut self, y: &Y, advanced: f64) {
        self.state.pos = Point3::from(y.pos);
        self.state.dir = Unit::new_normalize(y.dir);
        if self.sens.is_some() {
            self.sens = Some(y.sens);
        }
        self.path += advanced.abs();
    }

    fn deriv(&self, y: &Y, with_sens: bool) -> Y {
        let sample = self.field.sample(&Point3::from(y.pos));
        let kappa = K_BEND * self.state.qop;
        let dpos = y.dir;
        let ddir = kappa * y.dir.cross(&sample.b);
        let mut dsens = Sensitivity::zeros();
        if with_sens {
            for col in 0..5 {
                let dx = Vector3::new(y.sens[(0, col)], y.sens[(1, col)], y.sens[(2, col)]);
                let dt = Vector3::new(y.sens[(3, col)], y.sens[(4, col)], y.sens[(5, col)]);
                let dqop = y.sens[(6, col)];
                let db = sample.grad * dx;
                let ddt = K_BEND * (dqop * y.dir.cross(&sample.b)) + kappa * (dt.cross(&sample.b) + y.dir.cross(&db));
                for k in 0..3 {
                    dsens[(k, col)] = dt[k];
                    dsens[(3 + k, col)] = ddt[k];
                }
            }
        }
        Y { pos: dpos, dir: ddir, sens: dsens }
    }

    /// One classical RK4 step of signed size `h`.
    fn rk4(&self, y0: &Y, h: f64, with_sens: bool) -> Y {
        let k1 = self.deriv(y0, with_sens);
        let y2 = y0.lin(&k1, 1.0, h / 2.0);
        let k2 = self.deriv(&y2, with_sens);
        let y3 = y0.lin(&k2, 1.0, h / 2.0);
        let k3 = self.deriv(&y3, with_sens);
        let y4 = y0.lin(&k3, 1.0, h);
        let k4 = self.deriv(&y4, with_sens);
        let mut out = *y0;
        out.pos += (k1.pos + 2.0 * k2.pos + 2.0 * k3.pos + k4.pos) * (h / 6.0);
        out.dir += (k1.dir + 2.0 * k2.dir + 2.0 * k3.dir + k4.dir) * (h / 6.0);
        if with_sens {
            out.sens += (k1.sens + 2.0 * k2.sens + 2.0 * k3.sens + k4.sens) * (h / 6.0);
        }
        out
    }

    /// Signed step of size `s` with one halving refinement and Richardson
    /// extrapolation; no adaptivity.
    fn rk4_refined(&self, y0: &Y, s: f64, with_sens: bool) -> Y {
        let full = self.rk4(y0, s, with_sens);
        let half = self.rk4(&self.rk4(y0, s / 2.0, with_sens), s / 2.0, with_sens);
        let mut out = half.lin(&full, 16.0 / 15.0, -1.0 / 15.0);
        out.dir = out.dir.normalize();
        out
    }

    /// Take one accepted adaptive step. Returns the start state and the signed
    /// step size actually taken.
    fn step(&mut self) -> Result<(Y, f64), PropagationError> {
        let with_sens = self.sens.is_some();
        let y0 = self.current_y();
        loop {
            let h = self.sign * self.h;
            let full = self.rk4(&y0, h, with_sens);
            let half = self.rk4(&self.rk4(&y0, h / 2.0, with_sens), h / 2.0, with_sens);
            let mut err = (full.pos - half.pos).amax().max((full.dir - half.dir).amax());
            if with_sens {
                err = err.max((full.sens - half.sens).amax());
            }
            let at_floor = self.h <= self.opts.min_step_m * 1.0001;
            if err <= self.opts.tol_m || at_floor {
                if at_floor && err > 1e3 * self.opts.tol_m {
                    return Err(PropagationError::StepUnderflow { path: self.path });
                }
                let mut y1 = half.lin(&full, 16.0 / 15.0, -1.0 / 15.0);
                y1.dir = y1.dir.normalize();
                let taken = h;
                // Step-size update for the next step.
                let scale = if err > 0.0 { 0.9 * (self.opts.tol_m / err).powf(0.2) } else { 4.0 };
                self.h = (self.h * scale.clamp(0.25, 4.0)).clamp(self.opts.min_step_m, self.opts.max_step_m);
                self.store_y(&y1, taken);
                return Ok((y0, taken));
            }
            let scale = 0.9 * (self.opts.tol_m / err).powf(0.2);
            self.h = (self.h * scale.clamp(0.1, 0.9)).max(self.opts.min_step_m);
        }
    }

    /// Advance until the first crossing among `watch` and land on it.
    /// Returns the index of the crossed surface. Surfaces on which the stepper
    /// currently sits (|g| below threshold) are armed only once left.
    ///
    /// Field discontinuity surfaces are handled internally: the stepper lands
    /// on them, applies the sensitivity jump for the moving crossing point,
    /// and keeps going.
    pub fn advance_to_first_crossing(&mut self, watch: &[SurfaceGeom]) -> Result<usize, PropagationError> {
        const ARM_EPS: f64 = 1e-7;
        let boundaries = std::mem::take(&mut self.boundaries);
        let result = self.advance_impl(watch, &boundaries, ARM_EPS);
        self.boundaries = boundaries;
        result
    }

    fn advance_impl(
        &mut self,
        watch: &[SurfaceGeom],
        boundaries: &[SurfaceGeom],
        arm_eps: f64,
    ) -> Result<usize, PropagationError> {
        let all: Vec<&SurfaceGeom> = watch.iter().chain(boundaries.iter()).collect();
        let mut g_prev: Vec<f64> = Vec::with_capacity(all.len());
        let mut armed: Vec<bool> = Vec::with_capacity(all.len());
        let rearm = |stepper: &Stepper, g_prev: &mut Vec<f64>, armed: &mut Vec<bool>| {
            g_prev.clear();
            armed.clear();
            let d = stepper.state.dir.into_inner();
            for s in &all {
                let g = s.g(&stepper.state.pos, &d);
                armed.push(g.abs() > arm_eps);
                g_prev.push(g);
            }
        };
        rearm(self, &mut g_prev, &mut armed);

        while self.path < self.opts.max_path_m {
            let (y0, taken) = self.step()?;
            let d1 = self.state.dir.into_inner();
            // Find the earliest crossing within this step.
            let mut best: Option<(usize, f64)> = None;
            for (i, s) in all.iter().enumerate() {
                let g1 = s.g(&self.state.pos, &d1);
                if armed[i] && g_prev[i] * g1 <= 0.0 && (g_prev[i] != 0.0 || g1 != 0.0) && g_prev[i] != g1 {
                    let s_star = self.locate_crossing(&y0, taken, s, g_prev[i], g1)?;
                    if best.map_or(true, |(_, sb)| s_star.abs() < sb.abs()) {
                        best = Some((i, s_star));
                    }
                }
                if !armed[i] && g1.abs() > arm_eps {
                    armed[i] = true;
                }
                g_prev[i] = g1;
            }
            if let Some((idx, s_star)) = best {
                // Rewind to the step start and land exactly on the surface.
                self.path -= taken.abs();
                let with_sens = self.sens.is_some();
                let mut land = self.rk4_refined(&y0, s_star, with_sens);
                let mut advanced = s_star;
                // Newton polish on the surface function.
                for _ in 0..3 {
                    let pos = Point3::from(land.pos);
                    let g = all[idx].g(&pos, &land.dir);
                    if g.abs() < 1e-13 {
                        break;
                    }
                    let (gx, gt) = all[idx].grad_g(&pos, &land.dir);
                    let dy = self.deriv(&land, false);
                    let dg_ds = gx.dot(&dy.pos) + gt.dot(&dy.dir);
                    if dg_ds.abs() < 1e-12 {
                        break;
                    }
                    let ds = -g / dg_ds;
                    land = self.rk4(&land, ds, with_sens);
                    land.dir = land.dir.normalize();
                    advanced += ds;
                }
                self.store_y(&land, advanced);
                if idx < watch.len() {
                    return Ok(idx);
                }
                // Field boundary: jump the sensitivity and continue.
                self.apply_boundary_jump(all[idx]);
                rearm(self, &mut g_prev, &mut armed);
            }
        }
        Err(PropagationError::NoCrossing { path: self.path })
    }

    /// Saltation correction at a field discontinuity: the crossing point moves
    /// with the initial parameters, so the sensitivity picks up
    /// `(f+ - f-) * dg^T / (dg . f-)`.
    fn apply_boundary_jump(&mut self, surface: &SurfaceGeom) {
        let Some(sens) = self.sens else { return };
        let dir = self.state.dir.into_inner();
        let motion = dir * self.sign;
        let eps = 1e-7;
        let b_minus = self.field.b(&(self.state.pos - motion * eps));
        let b_plus = self.field.b(&(self.state.pos + motion * eps));
        let kappa = K_BEND * self.state.qop;
        let ddir_minus = kappa * dir.cross(&b_minus);
        let ddir_plus = kappa * dir.cross(&b_plus);

        let mut f_minus = SMatrix::<f64, 7, 1>::zeros();
        let mut delta_f = SMatrix::<f64, 7, 1>::zeros();
        for k in 0..3 {
            f_minus[(k, 0)] = dir[k];
            f_minus[(3 + k, 0)] = ddir_minus[k];
            delta_f[(3 + k, 0)] = ddir_plus[k] - ddir_minus[k];
        }
        let (gx, gt) = surface.grad_g(&self.state.pos, &dir);
        let mut grad = SMatrix::<f64, 7, 1>::zeros();
        for k in 0..3 {
            grad[(k, 0)] = gx[k];
            grad[(3 + k, 0)] = gt[k];
        }
        let dg_ds = (grad.transpose() * f_minus)[(0, 0)];
        if dg_ds.abs() < 1e-12 {
            return;
        }
        let jumped = sens + delta_f * (grad.transpose() * sens) / dg_ds;
        self.sens = Some(jumped);
    }

    /// Root-find the crossing path within an accepted step, via single RK4
    /// probes from the step start (Illinois regula falsi).
    fn locate_crossing(&self, y0: &Y, h: f64, surface: &SurfaceGeom, g0: f64, g1: f64) -> Result<f64, PropagationError> {
        let eval = |s: f64| -> f64 {
            if s == 0.0 {
                return g0;
            }
            let y = self.rk4(y0, s, false);
            surface.g(&Point3::from(y.pos), &y.dir)
        };
        let (mut a, mut fa) = (0.0, g0);
        let (mut b, mut fb) = (h, g1);
        if fa == 0.0 {
            return Ok(0.0);
        }
        let mut side = 0i8;
        for _ in 0..80 {
            let denom = fb - fa;
            let mut c = if denom.abs() > 0.0 { b - fb * (b - a) / denom } else { 0.5 * (a + b) };
            if !c.is_finite() || (c - a) * (c - b) >= 0.0 {
                c = 0.5 * (a + b);
            }
            let fc = eval(c);
            if fc == 0.0 || (b - a).abs() < 1e-14 {
                return Ok(c);
            }
            if fa * fc < 0.0 {
                b = c;
                fb = fc;
                if side == -1 {
                    fa *= 0.5;
                }
                side = -1;
            } else {
                a = c;
                fa = fc;
                if side == 1 {
                    fb *= 0.5;
                }
                side = 1;
            }
        }
        Ok(0.5 * (a + b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bfield::UniformField;
    use approx::assert_relative_eq;

    /// Analytic helix in a uniform field, used as an oracle.
    /// Solves dt/ds = t x Omega with Omega = K * qop * B: rotation of t about
    /// Omega_hat by angle a = -|Omega| s, with the position integral
    /// x(s) = x0 + t_par s + t_perp sin(a)/a' + (Omega_hat x t_perp)(1-cos(a))/a'
    /// where a' = -|Omega|.
    pub fn helix_position(start: &TrackState, b: &Vector3<f64>, s: f64) -> (Point3<f64>, Vector3<f64>) {
        let omega_vec = K_BEND * start.qop * *b;
        let omega = omega_vec.norm();
        let t0 = start.dir.into_inner();
        if omega < 1e-15 {
            return (start.pos + t0 * s, t0);
        }
        let axis = omega_vec / omega;
        let a = -omega * s;
        let rot = nalgebra::Rotation3::from_axis_angle(&Unit::new_normalize(axis), a);
        let t_par = axis * t0.dot(&axis);
        let t_perp = t0 - t_par;
        let dir = rot * t0;
        let pos = start.pos + t_par * s + t_perp * (a.sin() / -omega) + axis.cross(&t_perp) * ((1.0 - a.cos()) / -omega);
        (pos, dir)
    }

    #[test]
    fn straight_line_in_zero_field() {
        let field = UniformField(Vector3::zeros());
        let start = TrackState::new(Point3::origin(), Vector3::new(1.0, 0.2, 0.3), 1.0 / 20.0);
        let mut stepper = Stepper::new(&field, StepOptions::default(), start, false, 1.0);
        let target = SurfaceGeom::Plane { point: Point3::new(5.0, 0.0, 0.0), normal: Unit::new_normalize(Vector3::x()) };
        stepper.advance_to_first_crossing(&[target]).unwrap();
        assert_relative_eq!(stepper.state.pos.x, 5.0, epsilon = 1e-12);
        let expect = start.pos + start.dir.into_inner() * (5.0 / start.dir.x);
        assert_relative_eq!((stepper.state.pos - expect).norm(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn helix_closure_in_uniform_field() {
        let b = Vector3::new(0.0, 0.0, 1.0);
        let field = UniformField(b);
        let start = TrackState::new(Point3::origin(), Vector3::new(1.0, 0.0, 0.3), 1.0 / 20.0);
        let mut stepper = Stepper::new(&field, StepOptions::default(), start, false, 1.0);
        // Walk ~10 m of path by targeting a distant plane perpendicular to z.
        let target = SurfaceGeom::ZPlane { z: 10.0 * start.dir.z };
        stepper.advance_to_first_crossing(&[target]).unwrap();
        let s = stepper.path;
        let (pos, dir) = helix_position(&start, &b, s);
        assert!(s > 9.0, "path {s}");
        assert!((stepper.state.pos - pos).norm() < 1e-6, "pos error {}", (stepper.state.pos - pos).norm());
        assert!((stepper.state.dir.into_inner() - dir).norm() < 1e-7);
    }

    #[test]
    fn forward_then_reverse_returns_start() {
        let b = Vector3::new(0.1, 0.0, 1.2);
        let field = UniformField(b);
        let start = TrackState::new(Point3::new(0.1, -0.2, 0.0), Vector3::new(0.9, 0.1, 0.4), -1.0 / 15.0);
        let out_plane = SurfaceGeom::Plane { point: Point3::new(6.0, 0.0, 0.0), normal: Unit::new_normalize(Vector3::x()) };
        let mut fwd = Stepper::new(&field, StepOptions::default(), start, false, 1.0);
        fwd.advance_to_first_crossing(&[out_plane]).unwrap();
        let back_plane =
            SurfaceGeom::Plane { point: start.pos, normal: Unit::new_normalize(Vector3::new(start.dir.x, start.dir.y, start.dir.z)) };
        let mut rev = Stepper::new(&field, StepOptions::default(), fwd.state, false, -1.0);
        rev.advance_to_first_crossing(&[back_plane]).unwrap();
        assert!((rev.state.pos - start.pos).norm() < 1e-7, "closure {}", (rev.state.pos - start.pos).norm());
        assert!((rev.state.dir.into_inner() - start.dir.into_inner()).norm() < 1e-8);
    }
}
