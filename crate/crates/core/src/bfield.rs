//! Magnetic field service: `f(x, y, z) -> (B, grad B)`.
//!
//! Two implementations are provided behind the [`Field`] trait: an analytic
//! air-core toroid with exact gradients, and a gridded map with trilinear
//! interpolation whose gradient is the exact derivative of the interpolant.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

/// Header tag of the field-map file format.
pub const FIELD_MAP_SCHEMA: &str = "muonpath-fmap/1";

/// Field vector and spatial gradient at a point.
/// `grad[(i, j)] = dB_i / dx_j`, tesla per meter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub b: Vector3<f64>,
    pub grad: Matrix3<f64>,
}

impl FieldSample {
    pub const ZERO: FieldSample = FieldSample { b: Vector3::new(0.0, 0.0, 0.0), grad: Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0) };
}

/// A magnetic field queryable at any space point.
pub trait Field: Sync + Send {
    fn sample(&self, point: &Point3<f64>) -> FieldSample;

    /// Field vector only; default goes through `sample`.
    fn b(&self, point: &Point3<f64>) -> Vector3<f64> {
        self.sample(point).b
    }

    /// Surfaces across which the field jumps discontinuously (hard volume
    /// edges). The propagator stops on these and corrects the transported
    /// sensitivity for the crossing-point variation.
    fn discontinuity_surfaces(&self) -> Vec<crate::propagation::SurfaceGeom> {
        Vec::new()
    }
}

/// Analytic air-core toroid: azimuthal field falling off as 1/r inside the
/// annulus, optionally modulated by a coil ripple, zero outside.
///
/// `|B| = b_peak * inner_radius / r * (1 + ripple * cos(n_coils * phi))`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToroidModel {
    pub inner_radius: f64,
    pub outer_radius: f64,
    pub half_length: f64,
    /// Field at the inner radius with ripple off, tesla.
    pub b_peak: f64,
    pub n_coils: u32,
    /// Ripple amplitude fraction in [0, 0.2].
    pub ripple: f64,
}

impl ToroidModel {
    pub fn new(inner_radius: f64, outer_radius: f64, half_length: f64, b_peak: f64) -> Self {
        Self { inner_radius, outer_radius, half_length, b_peak, n_coils: 8, ripple: 0.0 }
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        if !(self.inner_radius > 0.0 && self.inner_radius < self.outer_radius) {
            return Err(FieldError::BadModel("requires 0 < inner_radius < outer_radius".into()));
        }
        if self.b_peak <= 0.0 {
            return Err(FieldError::BadModel("b_peak must be positive".into()));
        }
        if !(0.0..=0.2).contains(&self.ripple) {
            return Err(FieldError::BadModel("ripple must be in [0, 0.2]".into()));
        }
        if self.half_length <= 0.0 {
            return Err(FieldError::BadModel("half_length must be positive".into()));
        }
        Ok(())
    }

    pub fn contains(&self, point: &Point3<f64>) -> bool {
        let r = point.coords.xy().norm();
        r >= self.inner_radius && r <= self.outer_radius && point.z.abs() <= self.half_length
    }

    /// Evaluate the analytic field and its exact gradient.
    pub fn eval(&self, point: &Point3<f64>) -> FieldSample {
        if !self.contains(point) {
            return FieldSample::ZERO;
        }
        let x = point.x;
        let y = point.y;
        let r2 = x * x + y * y;
        let r4 = r2 * r2;
        let phi = y.atan2(x);
        let m = self.b_peak * self.inner_radius;
        let n = self.n_coils as f64;
        let rho = 1.0 + self.ripple * (n * phi).cos();
        let rho_p = -self.ripple * n * (n * phi).sin();

        let b = Vector3::new(-m * rho * y / r2, m * rho * x / r2, 0.0);

        let dbx_dx = m * (rho_p * y * y + 2.0 * rho * x * y) / r4;
        let dbx_dy = -m * (rho_p * x * y + rho * (x * x - y * y)) / r4;
        let dby_dx = m * (-rho_p * x * y + rho * (y * y - x * x)) / r4;
        let dby_dy = m * (rho_p * x * x - 2.0 * rho * x * y) / r4;

        let mut grad = Matrix3::zeros();
        grad[(0, 0)] = dbx_dx;
        grad[(0, 1)] = dbx_dy;
        grad[(1, 0)] = dby_dx;
        grad[(1, 1)] = dby_dy;
        FieldSample { b, grad }
    }
}

impl Field for ToroidModel {
    fn sample(&self, point: &Point3<f64>) -> FieldSample {
        self.eval(point)
    }

    fn discontinuity_surfaces(&self) -> Vec<crate::propagation::SurfaceGeom> {
        use crate::propagation::SurfaceGeom;
        vec![
            SurfaceGeom::Cylinder { radius: self.inner_radius },
            SurfaceGeom::Cylinder { radius: self.outer_radius },
            SurfaceGeom::ZPlane { z: self.half_length },
            SurfaceGeom::ZPlane { z: -self.half_length },
        ]
    }
}

/// Uniform field, handy as an override for closed-form checks.
#[derive(Debug, Clone, Copy)]
pub struct UniformField(pub Vector3<f64>);

impl Field for UniformField {
    fn sample(&self, _point: &Point3<f64>) -> FieldSample {
        FieldSample { b: self.0, grad: Matrix3::zeros() }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FieldError {
    #[error("invalid toroid model: {0}")]
    BadModel(String),
    #[error("field map needs at least 2 nodes per axis, got {0:?}")]
    TooFewNodes([usize; 3]),
    #[error("field map spacing must be positive, got {0:?}")]
    BadSpacing([f64; 3]),
    #[error("field map of {requested} nodes exceeds the budget of {budget}")]
    NodeBudget { requested: usize, budget: usize },
    #[error("reading field map: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing field map: {0}")]
    Format(String),
}

/// Dense grid of field vectors with trilinear interpolation.
///
/// Index layout is row-major in (ix, iy, iz): `index = (ix*ny + iy)*nz + iz`.
/// Points outside the grid evaluate to zero. The gradient is the derivative of
/// the trilinear interpolant itself, so value and gradient stay consistent.
#[derive(Debug, Clone)]
pub struct FieldMap {
    pub origin: Point3<f64>,
    pub spacing: [f64; 3],
    pub dims: [usize; 3],
    samples: Vec<Vector3<f64>>,
}

impl FieldMap {
    /// Sample a toroid model on a regular grid. Refuses to allocate more than
    /// `node_budget` nodes.
    pub fn build(
        model: &ToroidModel,
        origin: Point3<f64>,
        spacing: [f64; 3],
        dims: [usize; 3],
        node_budget: usize,
    ) -> Result<FieldMap, FieldError> {
        if dims.iter().any(|&d| d < 2) {
            return Err(FieldError::TooFewNodes(dims));
        }
        if spacing.iter().any(|&s| s <= 0.0) {
            return Err(FieldError::BadSpacing(spacing));
        }
        let n = dims[0] * dims[1] * dims[2];
        if n > node_budget {
            return Err(FieldError::NodeBudget { requested: n, budget: node_budget });
        }
        let mut samples = Vec::with_capacity(n);
        for ix in 0..dims[0] {
            for iy in 0..dims[1] {
                for iz in 0..dims[2] {
                    let p = Point3::new(
                        origin.x + ix as f64 * spacing[0],
                        origin.y + iy as f64 * spacing[1],
                        origin.z + iz as f64 * spacing[2],
                    );
                    samples.push(model.eval(&p).b);
                }
            }
        }
        Ok(FieldMap { origin, spacing, dims, samples })
    }

    #[inline]
    fn node(&self, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
        self.samples[(ix * self.dims[1] + iy) * self.dims[2] + iz]
    }

    /// Trilinear interpolation with the interpolant's own gradient.
    pub fn eval(&self, point: &Point3<f64>) -> FieldSample {
        let mut idx = [0usize; 3];
        let mut frac = [0f64; 3];
        let rel = [point.x - self.origin.x, point.y - self.origin.y, point.z - self.origin.z];
        for a in 0..3 {
            let t = rel[a] / self.spacing[a];
            if !(0.0..=(self.dims[a] - 1) as f64).contains(&t) {
                return FieldSample::ZERO;
            }
            let cell = (t.floor() as usize).min(self.dims[a] - 2);
            idx[a] = cell;
            frac[a] = t - cell as f64;
        }
        let (ix, iy, iz) = (idx[0], idx[1], idx[2]);
        let (fx, fy, fz) = (frac[0], frac[1], frac[2]);

        let c000 = self.node(ix, iy, iz);
        let c100 = self.node(ix + 1, iy, iz);
        let c010 = self.node(ix, iy + 1, iz);
        let c110 = self.node(ix + 1, iy + 1, iz);
        let c001 = self.node(ix, iy, iz + 1);
        let c101 = self.node(ix + 1, iy, iz + 1);
        let c011 = self.node(ix, iy + 1, iz + 1);
        let c111 = self.node(ix + 1, iy + 1, iz + 1);

        let c00 = c000 * (1.0 - fx) + c100 * fx;
        let c10 = c010 * (1.0 - fx) + c110 * fx;
        let c01 = c001 * (1.0 - fx) + c101 * fx;
        let c11 = c011 * (1.0 - fx) + c111 * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        let b = c0 * (1.0 - fz) + c1 * fz;

        // d/dx: difference along x, interpolated in (y, z).
        let dx00 = c100 - c000;
        let dx10 = c110 - c010;
        let dx01 = c101 - c001;
        let dx11 = c111 - c011;
        let db_dx = ((dx00 * (1.0 - fy) + dx10 * fy) * (1.0 - fz) + (dx01 * (1.0 - fy) + dx11 * fy) * fz)
            / self.spacing[0];

        let dy0 = c10 - c00;
        let dy1 = c11 - c01;
        let db_dy = (dy0 * (1.0 - fz) + dy1 * fz) / self.spacing[1];

        let db_dz = (c1 - c0) / self.spacing[2];

        let grad = Matrix3::from_columns(&[db_dx, db_dy, db_dz]);
        FieldSample { b, grad }
    }

    /// Write in the `muonpath-fmap/1` text format.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), FieldError> {
        writeln!(w, "{FIELD_MAP_SCHEMA}")?;
        writeln!(w, "origin {} {} {}", self.origin.x, self.origin.y, self.origin.z)?;
        writeln!(w, "spacing {} {} {}", self.spacing[0], self.spacing[1], self.spacing[2])?;
        writeln!(w, "dims {} {} {}", self.dims[0], self.dims[1], self.dims[2])?;
        for s in &self.samples {
            writeln!(w, "{} {} {}", s.x, s.y, s.z)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FieldError> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    /// Read the `muonpath-fmap/1` text format.
    pub fn read_from(r: impl BufRead) -> Result<FieldMap, FieldError> {
        let mut lines = r.lines();
        let mut next = || -> Result<String, FieldError> {
            lines
                .next()
                .ok_or_else(|| FieldError::Format("unexpected end of file".into()))?
                .map_err(FieldError::Io)
        };
        let header = next()?;
        if header.trim() != FIELD_MAP_SCHEMA {
            return Err(FieldError::Format(format!("bad header {header:?}, expected {FIELD_MAP_SCHEMA:?}")));
        }
        let parse3 = |line: &str, key: &str| -> Result<[f64; 3], FieldError> {
            let mut it = line.split_whitespace();
            if it.next() != Some(key) {
                return Err(FieldError::Format(format!("expected `{key} ...`, got {line:?}")));
            }
            let mut out = [0.0; 3];
            for slot in &mut out {
                *slot = it
                    .next()
                    .ok_or_else(|| FieldError::Format(format!("missing values in {line:?}")))?
                    .parse()
                    .map_err(|e| FieldError::Format(format!("bad number in {line:?}: {e}")))?;
            }
            Ok(out)
        };
        let origin = parse3(&next()?, "origin")?;
        let spacing = parse3(&next()?, "spacing")?;
        let dims_f = parse3(&next()?, "dims")?;
        let dims = [dims_f[0] as usize, dims_f[1] as usize, dims_f[2] as usize];
        if dims.iter().any(|&d| d < 2) {
            return Err(FieldError::TooFewNodes(dims));
        }
        if spacing.iter().any(|&s| s <= 0.0) {
            return Err(FieldError::BadSpacing(spacing));
        }
        let n = dims[0] * dims[1] * dims[2];
        let mut samples = Vec::with_capacity(n);
        for line in lines {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let mut it = trimmed.split_whitespace();
            let mut v = [0.0f64; 3];
            for slot in &mut v {
                *slot = it
                    .next()
                    .ok_or_else(|| FieldError::Format(format!("short sample line {trimmed:?}")))?
                    .parse()
                    .map_err(|e| FieldError::Format(format!("bad sample in {trimmed:?}: {e}")))?;
            }
            samples.push(Vector3::new(v[0], v[1], v[2]));
        }
        if samples.len() != n {
            return Err(FieldError::Format(format!("expected {n} samples, found {}", samples.len())));
        }
        Ok(FieldMap { origin: Point3::new(origin[0], origin[1], origin[2]), spacing, dims, samples })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<FieldMap, FieldError> {
        let file = std::fs::File::open(path)?;
        FieldMap::read_from(std::io::BufReader::new(file))
    }
}

impl Field for FieldMap {
    fn sample(&self, point: &Point3<f64>) -> FieldSample {
        self.eval(point)
    }

    fn discontinuity_surfaces(&self) -> Vec<crate::propagation::SurfaceGeom> {
        use crate::propagation::SurfaceGeom;
        use nalgebra::{Unit, Vector3};
        let hi = [
            self.origin.x + (self.dims[0] - 1) as f64 * self.spacing[0],
            self.origin.y + (self.dims[1] - 1) as f64 * self.spacing[1],
            self.origin.z + (self.dims[2] - 1) as f64 * self.spacing[2],
        ];
        let mut out = Vec::with_capacity(6);
        for axis in 0..3 {
            let normal = Unit::new_normalize(Vector3::ith(axis, 1.0));
            let mut lo_point = self.origin;
            let mut hi_point = self.origin;
            lo_point[axis] = self.origin[axis];
            hi_point[axis] = hi[axis];
            out.push(SurfaceGeom::Plane { point: lo_point, normal });
            out.push(SurfaceGeom::Plane { point: hi_point, normal });
        }
        out
    }
}

/// Default toroid matched to the default geometry: annulus between the inner
/// and outer stations, 1 T at the inner radius.
pub fn default_toroid(scale: f64) -> ToroidModel {
    ToroidModel::new(5.0 * scale, 9.5 * scale, 12.0 * scale, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn peak_field_at_inner_radius() {
        let model = default_toroid(1.0);
        let s = model.eval(&Point3::new(model.inner_radius, 0.0, 0.0));
        assert_relative_eq!(s.b.norm(), model.b_peak, max_relative = 1e-12);
        // Azimuthal at phi = 0 means +y.
        assert_relative_eq!(s.b.y, model.b_peak, max_relative = 1e-12);
    }

    #[test]
    fn zero_outside_volume() {
        let model = default_toroid(1.0);
        for p in [
            Point3::new(model.outer_radius + 0.1, 0.0, 0.0),
            Point3::new(0.5 * model.inner_radius, 0.0, 0.0),
            Point3::new(6.0, 0.0, model.half_length + 0.1),
        ] {
            assert_eq!(model.eval(&p), FieldSample::ZERO);
        }
    }

    #[test]
    fn field_is_azimuthal_without_ripple() {
        let model = default_toroid(1.0);
        for k in 0..64 {
            let phi = k as f64 * 0.1;
            let r = 5.5 + (k % 7) as f64 * 0.5;
            let p = Point3::new(r * phi.cos(), r * phi.sin(), -3.0 + 0.1 * k as f64);
            let s = model.eval(&p);
            if s.b == Vector3::zeros() {
                continue;
            }
            let r_hat = Vector3::new(phi.cos(), phi.sin(), 0.0);
            assert_relative_eq!(s.b.dot(&r_hat), 0.0, epsilon = 1e-12);
            assert_relative_eq!(s.b.z, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn divergence_free_without_ripple() {
        let model = default_toroid(1.0);
        for k in 0..100 {
            let phi = 0.37 * k as f64;
            let r = 5.2 + 4.0 * ((k as f64 * 0.618) % 1.0);
            let p = Point3::new(r * phi.cos(), r * phi.sin(), -5.0 + 0.1 * k as f64);
            let s = model.eval(&p);
            let div = s.grad[(0, 0)] + s.grad[(1, 1)] + s.grad[(2, 2)];
            assert!(div.abs() < 1e-9, "divergence {div} at {p}");
        }
    }

    #[test]
    fn map_reproduces_nodes_exactly() {
        let model = default_toroid(1.0);
        let map = FieldMap::build(&model, Point3::new(5.0, -1.0, -1.0), [0.5, 0.5, 0.5], [4, 4, 4], 1 << 20).unwrap();
        for ix in 0..4 {
            for iy in 0..4 {
                for iz in 0..4 {
                    let p = Point3::new(5.0 + 0.5 * ix as f64, -1.0 + 0.5 * iy as f64, -1.0 + 0.5 * iz as f64);
                    let got = map.eval(&p).b;
                    let want = model.eval(&p).b;
                    assert_relative_eq!((got - want).norm(), 0.0, epsilon = 1e-14);
                }
            }
        }
    }

    #[test]
    fn map_rejects_oversized_request() {
        let model = default_toroid(1.0);
        let err = FieldMap::build(&model, Point3::origin(), [0.1; 3], [100, 100, 100], 1000).unwrap_err();
        assert!(matches!(err, FieldError::NodeBudget { .. }));
    }

    #[test]
    fn trilinear_is_exact_for_linear_fields() {
        // A hand-built map linear in x: B = (2x, 0, 0).
        let dims = [3usize, 3, 3];
        let mut samples = Vec::new();
        for ix in 0..3 {
            for _iy in 0..3 {
                for _iz in 0..3 {
                    samples.push(Vector3::new(2.0 * ix as f64, 0.0, 0.0));
                }
            }
        }
        let map = FieldMap { origin: Point3::origin(), spacing: [1.0; 3], dims, samples };
        let s = map.eval(&Point3::new(0.5, 0.5, 0.5));
        assert_relative_eq!(s.b.x, 1.0, max_relative = 1e-14);
        assert_relative_eq!(s.grad[(0, 0)], 2.0, max_relative = 1e-14);
        assert_relative_eq!(s.grad[(0, 1)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn map_file_round_trip() {
        let model = default_toroid(1.0);
        let map = FieldMap::build(&model, Point3::new(5.0, 0.0, 0.0), [0.25, 0.25, 0.25], [5, 4, 3], 1 << 20).unwrap();
        let mut buf = Vec::new();
        map.write_to(&mut buf).unwrap();
        let back = FieldMap::read_from(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back.dims, map.dims);
        let p = Point3::new(5.3, 0.4, 0.2);
        assert_relative_eq!((back.eval(&p).b - map.eval(&p).b).norm(), 0.0, epsilon = 1e-12);
    }
}
