//! Track building and fitting: momentum first-estimate from a segment pair,
//! momentum-scan matching of the remaining stations, a Gauss-Newton fit with
//! Levenberg damping over the five track parameters (full field tracking at
//! every objective evaluation), and a final global refit on raw drift times
//! with hit cleaning.

use nalgebra::{Point3, SMatrix, SVector, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::bfield::Field;
use crate::consts::{DEFAULT_ELOSS_SIGMA_FRAC, K_BEND, MOMENTUM_CAP_GEV};
use crate::geomodel::{wrap_angle, MaterialSlab, StationLayer, ToyGeometry};
use crate::propagation::{
    PropagationError, Sensitivity, StepOptions, Stepper, SurfaceGeom,
};
use crate::segments::{Roa, SegmentCandidate};
use crate::toysim::{correct_drift_time, highland_theta0, DigitizationConfig, Event, RtRelation};
use crate::track::{Covariance, Surface, TrackState};

#[derive(Debug, thiserror::Error)]
pub enum TrackfitError {
    #[error(transparent)]
    Propagation(#[from] PropagationError),
    #[error("momentum fell below the floor during material transport")]
    RangedOut,
    #[error("surface {0} not reachable")]
    Unreachable(usize),
}

/// Why a candidate was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    DegenerateGeometry,
    NoConvergence,
    TooFewHits,
}

/// Candidate life cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Seeded,
    Matched,
    Fitted,
    Refitted,
    Rejected(RejectReason),
}

/// A muon track candidate through the spectrometer.
#[derive(Debug, Clone)]
pub struct TrackCandidate {
    pub roa: Roa,
    /// Associated segments, ordered inner to outer.
    pub segments: Vec<SegmentCandidate>,
    pub qop_seed: f64,
    pub straight_seed: bool,
    /// Reference state (near the spectrometer entrance once fitted).
    pub state: TrackState,
    /// Curvilinear covariance at `state`.
    pub cov: Covariance,
    pub chi2: f64,
    pub ndof: i64,
    /// (event drift-hit index, still in use).
    pub hits: Vec<(usize, bool)>,
    pub status: Status,
}

impl TrackCandidate {
    pub fn used_hits(&self) -> impl Iterator<Item = usize> + '_ {
        self.hits.iter().filter(|(_, used)| *used).map(|(i, _)| *i)
    }

    pub fn chi2_per_ndof(&self) -> f64 {
        if self.ndof > 0 {
            self.chi2 / self.ndof as f64
        } else {
            f64::INFINITY
        }
    }
}

/// Transport settings shared by the fitting stages.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PropagationSettings {
    /// Apply mean energy loss and inflate the covariance at material slabs.
    pub material: bool,
    pub eloss_sigma_frac: f64,
}

impl Default for PropagationSettings {
    fn default() -> Self {
        PropagationSettings { material: false, eloss_sigma_frac: DEFAULT_ELOSS_SIGMA_FRAC }
    }
}

/// A material crossing seen during propagation.
#[derive(Debug, Clone)]
pub struct MaterialCrossing {
    pub slab: String,
    pub x_over_x0: f64,
}

/// Result of propagating parameters to a surface.
#[derive(Debug, Clone)]
pub struct PropagationResult {
    pub state: TrackState,
    /// 5x5 transport Jacobian in curvilinear frames (start -> target).
    pub jacobian: SMatrix<f64, 5, 5>,
    /// Transported covariance, when one was supplied.
    pub cov: Option<Covariance>,
    pub path: f64,
    pub material: Vec<MaterialCrossing>,
}

/// Snapshot of the walk at one requested surface.
pub struct SurfaceSnapshot {
    /// Index into the requested surface list.
    pub index: usize,
    pub state: TrackState,
    /// Sensitivity constrained to the surface, w.r.t. the start parameters.
    pub sens: Sensitivity,
    /// 5x5 curvilinear Jacobian start -> here.
    pub jacobian: SMatrix<f64, 5, 5>,
    /// Covariance here (start covariance transported plus material noise).
    pub cov: Covariance,
    pub path: f64,
}

/// Curvilinear extraction matrix at a state: rows map global `(dx, dt, dqop)`
/// deltas to `(du, dv, dphi, dtheta, dqop)`.
fn extraction(state: &TrackState) -> SMatrix<f64, 5, 7> {
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
    l
}

/// Constrain a free sensitivity to a surface crossing.
fn constrain(sens: &Sensitivity, state: &TrackState, field: &dyn Field, surface: &SurfaceGeom) -> Sensitivity {
    let b = field.b(&state.pos);
    let dir = state.dir.into_inner();
    let ddir = K_BEND * state.qop * dir.cross(&b);
    let mut f = SMatrix::<f64, 7, 1>::zeros();
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
    if dg_ds.abs() > 1e-12 {
        sens - f * (grad.transpose() * sens) / dg_ds
    } else {
        *sens
    }
}

/// Walk a state through the detector, landing on each requested surface in
/// crossing order; applies material at slab crossings when enabled.
///
/// `sign` is +1 to walk along the momentum, -1 against it. Every requested
/// surface must be crossed exactly once, in any order.
pub fn walk_surfaces(
    state: &TrackState,
    cov: Option<&Covariance>,
    surfaces: &[SurfaceGeom],
    field: &dyn Field,
    geom: &ToyGeometry,
    settings: &PropagationSettings,
    sign: f64,
) -> Result<(Vec<SurfaceSnapshot>, Vec<MaterialCrossing>), TrackfitError> {
    let slabs: Vec<&MaterialSlab> = if settings.material { geom.all_slabs() } else { Vec::new() };
    let mut watch: Vec<SurfaceGeom> = Vec::with_capacity(surfaces.len() + slabs.len());
    watch.extend_from_slice(surfaces);
    for slab in &slabs {
        watch.push(SurfaceGeom::Cylinder { radius: slab.crossing_radius() });
    }

    let mut stepper = Stepper::new(field, StepOptions::default(), *state, true, sign);
    let mut pending: Vec<bool> = vec![true; surfaces.len()];
    let mut n_pending = surfaces.len();
    // Material noise pulled back to the start frame.
    let mut q_start = SMatrix::<f64, 5, 5>::zeros();
    let mut crossings = Vec::new();
    let mut snapshots = Vec::new();

    while n_pending > 0 {
        let idx = stepper.advance_to_first_crossing(&watch)?;
        if idx < surfaces.len() {
            if !pending[idx] {
                continue; // re-crossing an already visited surface
            }
            pending[idx] = false;
            n_pending -= 1;
            let sens = constrain(stepper.sens.as_ref().unwrap(), &stepper.state, field, &surfaces[idx]);
            let jacobian = extraction(&stepper.state) * sens;
            let cov_here = cov.map(|c| {
                let mut m = Covariance(jacobian * (c.0 + q_start) * jacobian.transpose());
                m.symmetrize();
                m
            });
            snapshots.push(SurfaceSnapshot {
                index: idx,
                state: stepper.state,
                sens,
                jacobian,
                cov: cov_here.unwrap_or_else(Covariance::zeros),
                path: stepper.path,
            });
        } else {
            // Material slab crossing.
            let slab = slabs[idx - surfaces.len()];
            if stepper.state.pos.z.abs() > slab.half_length {
                continue;
            }
            let qop_in = stepper.state.qop;
            let p_in = 1.0 / qop_in.abs();
            // Walking along the momentum means the muon loses energy here;
            // walking against it reinstates the loss (exact inverse of the
            // mean-loss map).
            let (p_out, dp_out_dp_in) = if sign > 0.0 {
                ((1.0 - slab.eloss_b) * p_in - slab.eloss_a, 1.0 - slab.eloss_b)
            } else {
                ((p_in + slab.eloss_a) / (1.0 - slab.eloss_b), 1.0 / (1.0 - slab.eloss_b))
            };
            if p_out <= crate::consts::MOMENTUM_FLOOR_GEV {
                return Err(TrackfitError::RangedOut);
            }
            let qop_out = qop_in.signum() / p_out;
            let dqop_factor = (p_in / p_out).powi(2) * dp_out_dp_in;
            stepper.state.qop = qop_out;
            if let Some(sens) = stepper.sens.as_mut() {
                for col in 0..5 {
                    sens[(6, col)] *= dqop_factor;
                }
            }

            // Jacobian from start to the slab, for pulling the noise back.
            let slab_surface = SurfaceGeom::Cylinder { radius: slab.crossing_radius() };
            let sens_c = constrain(stepper.sens.as_ref().unwrap(), &stepper.state, field, &slab_surface);
            let j_slab = extraction(&stepper.state) * sens_c;

            let r_hat = Vector3::new(stepper.state.pos.x, stepper.state.pos.y, 0.0).normalize();
            let cos_inc = stepper.state.dir.dot(&r_hat).abs().max(0.1);
            let x_eff = slab.thickness_x0 / cos_inc;
            let p_local = p_in.min(p_out);
            let theta0 = highland_theta0(p_local, x_eff);
            let sin_theta = stepper.state.dir.xy().norm().max(1e-6);
            let mean_loss = (p_in - p_out).abs();
            let sigma_qop = settings.eloss_sigma_frac * mean_loss * qop_out * qop_out;
            let mut q_local = SMatrix::<f64, 5, 5>::zeros();
            q_local[(2, 2)] = (theta0 / sin_theta).powi(2);
            q_local[(3, 3)] = theta0 * theta0;
            q_local[(4, 4)] = sigma_qop * sigma_qop;

            if let Some(j_inv) = j_slab.try_inverse() {
                q_start += j_inv * q_local * j_inv.transpose();
            }
            crossings.push(MaterialCrossing { slab: slab.name.clone(), x_over_x0: x_eff });
        }
    }
    snapshots.sort_by(|a, b| a.path.total_cmp(&b.path));
    Ok((snapshots, crossings))
}

/// Propagate parameters (and optionally a covariance) to a single target
/// surface with full tracking; the transport Jacobian comes from integrated
/// variational equations.
pub fn propagate(
    state: &TrackState,
    cov: Option<&Covariance>,
    target: &SurfaceGeom,
    field: &dyn Field,
    geom: &ToyGeometry,
    settings: &PropagationSettings,
    sign: f64,
) -> Result<PropagationResult, TrackfitError> {
    let (mut snaps, material) =
        walk_surfaces(state, cov, std::slice::from_ref(target), field, geom, settings, sign)?;
    let snap = snaps.pop().ok_or(TrackfitError::Unreachable(0))?;
    Ok(PropagationResult {
        state: snap.state,
        jacobian: snap.jacobian,
        cov: cov.map(|_| snap.cov),
        path: snap.path,
        material,
    })
}

/// Momentum estimate from the direction difference of two segments.
#[derive(Debug, Clone, Copy)]
pub struct MomentumEstimate {
    pub qop: f64,
    /// Bend below threshold; magnitude saturated, charge unknown.
    pub straight: bool,
    pub bend_angle: f64,
    pub field_integral: f64,
}

/// Global reference point of a segment (chamber mid-plane crossing).
pub fn segment_global_point(geom: &ToyGeometry, seg: &SegmentCandidate) -> Point3<f64> {
    let chamber = geom.chamber(seg.chamber).expect("segment chamber exists");
    chamber.local_to_global(&Vector3::new(seg.point.x, seg.second_coordinate, 0.0))
}

/// Global direction of a segment, assumed to lie in its bending plane.
pub fn segment_global_direction(geom: &ToyGeometry, seg: &SegmentCandidate) -> Vector3<f64> {
    let chamber = geom.chamber(seg.chamber).expect("segment chamber exists");
    (chamber.axis_u() * seg.direction.x + chamber.axis_n() * seg.direction.y).normalize()
}

/// First rough momentum estimate: `q/p = bend / (K * int B dl)` with the bend
/// angle measured in the bending plane and the field integral sampled at ten
/// points along the chord between the two segments.
pub fn estimate_momentum(
    outer: &SegmentCandidate,
    inner: &SegmentCandidate,
    geom: &ToyGeometry,
    field: &dyn Field,
) -> MomentumEstimate {
    let p_in = segment_global_point(geom, inner);
    let p_out = segment_global_point(geom, outer);
    let d_in = segment_global_direction(geom, inner);
    let d_out = segment_global_direction(geom, outer);

    // Bending angle: direction angle in the (r, z) half-plane at each segment.
    let beta = |p: &Point3<f64>, d: &Vector3<f64>| -> f64 {
        let phi = p.y.atan2(p.x);
        let r_hat = Vector3::new(phi.cos(), phi.sin(), 0.0);
        d.z.atan2(d.dot(&r_hat))
    };
    let bend = beta(&p_out, &d_out) - beta(&p_in, &d_in);

    // Ten-point midpoint rule for the bending-field integral along the chord.
    let chord = p_out - p_in;
    let length = chord.norm();
    let mut integral = 0.0;
    for k in 0..10 {
        let t = (k as f64 + 0.5) / 10.0;
        let x = p_in + chord * t;
        let phi = x.y.atan2(x.x);
        let phi_hat = Vector3::new(-phi.sin(), phi.cos(), 0.0);
        integral += field.b(&x).dot(&phi_hat) * (length / 10.0);
    }

    if bend.abs() < 1e-4 || integral.abs() < 1e-9 {
        return MomentumEstimate { qop: 1.0 / MOMENTUM_CAP_GEV, straight: true, bend_angle: bend, field_integral: integral };
    }
    let qop = bend / (K_BEND * integral);
    let qop = qop.signum() * qop.abs().clamp(1.0 / MOMENTUM_CAP_GEV, 0.499);
    MomentumEstimate { qop, straight: false, bend_angle: bend, field_integral: integral }
}

/// Momentum-scan and matching configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanConfig {
    pub n_points: usize,
    /// Multiplicative half-span of the geometric grid.
    pub span: f64,
    /// Per-segment match chi2 above which a segment stays unassociated.
    pub match_cut: f64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig { n_points: 21, span: 2.0, match_cut: 25.0 }
    }
}

/// Conservative curvilinear seed covariance for a candidate built from a
/// segment pair. `qop_sigma` is the uncertainty assigned to the scanned q/p
/// value; during the scan it reflects the grid spacing so the score stays
/// comparable across grid points.
fn seed_covariance(seg: &SegmentCandidate, qop_sigma: f64) -> Covariance {
    let var_u0 = seg.cov_u_alpha[(0, 0)].max(1e-10);
    let var_alpha = seg.cov_u_alpha[(1, 1)].max(1e-12);
    let var_w = seg.second_coordinate_sigma.powi(2);
    Covariance::from_diagonal(&[
        var_w,              // horizontal transverse ~ along wire
        var_u0,             // bending-plane transverse
        1e-4,               // azimuthal direction (10 mrad)^2
        var_alpha,          // polar direction from the segment fit
        qop_sigma * qop_sigma,
    ])
}

/// Build the global seed state for a segment pair with a given q/p: the
/// bending-plane direction of the inner segment, tilted azimuthally so the
/// track connects the two segments' along-wire positions.
fn pair_seed_state(
    geom: &ToyGeometry,
    inner_seg: &SegmentCandidate,
    outer_seg: &SegmentCandidate,
    qop: f64,
) -> TrackState {
    let p_in = segment_global_point(geom, inner_seg);
    let p_out = segment_global_point(geom, outer_seg);
    let d_plane = segment_global_direction(geom, inner_seg);
    let chord = p_out - p_in;
    let phi = p_in.y.atan2(p_in.x);
    let phi_hat = Vector3::new(-phi.sin(), phi.cos(), 0.0);
    let f_phi = if chord.norm() > 1e-6 { (chord.dot(&phi_hat) / chord.norm()).clamp(-0.9, 0.9) } else { 0.0 };
    let dir = d_plane * (1.0 - f_phi * f_phi).sqrt() + phi_hat * f_phi;
    TrackState::new(p_in, dir, qop)
}

/// Segment-level measurement extracted from a landed snapshot: residuals of
/// (u, alpha, w) against a segment, the 3x5 derivative w.r.t. the start
/// parameters, and the segment's own 3x3 covariance.
fn segment_residual(
    geom: &ToyGeometry,
    seg: &SegmentCandidate,
    snap_state: &TrackState,
    snap_sens: &Sensitivity,
) -> (SVector<f64, 3>, SMatrix<f64, 3, 5>, SMatrix<f64, 3, 3>) {
    let chamber = geom.chamber(seg.chamber).expect("segment chamber exists");
    let local = chamber.global_to_local(&snap_state.pos);
    let t = snap_state.dir.into_inner();
    let t_u = chamber.axis_u().dot(&t);
    let t_n = chamber.axis_n().dot(&t);
    let t_w = chamber.axis_w().dot(&t);
    let _ = t_w;
    let alpha = t_u.atan2(t_n);

    let mut r = SVector::<f64, 3>::zeros();
    r[0] = local.x - seg.point.x;
    r[1] = alpha - seg.alpha();
    r[2] = local.y - seg.second_coordinate;

    // d(meas)/d(global state), then chain through the sensitivity.
    let mut l = SMatrix::<f64, 3, 7>::zeros();
    let au = chamber.axis_u();
    let aw = chamber.axis_w();
    let an = chamber.axis_n();
    let denom = (t_u * t_u + t_n * t_n).max(1e-12);
    for k in 0..3 {
        l[(0, k)] = au[k];
        l[(2, k)] = aw[k];
        l[(1, 3 + k)] = (t_n * au[k] - t_u * an[k]) / denom;
    }
    let jac = l * snap_sens;

    let mut cov = SMatrix::<f64, 3, 3>::zeros();
    cov[(0, 0)] = seg.cov_u_alpha[(0, 0)];
    cov[(0, 1)] = seg.cov_u_alpha[(0, 1)];
    cov[(1, 0)] = seg.cov_u_alpha[(1, 0)];
    cov[(1, 1)] = seg.cov_u_alpha[(1, 1)];
    cov[(2, 2)] = seg.second_coordinate_sigma.powi(2);
    (r, jac, cov)
}

/// Scan q/p around the first estimate and associate the best-matching
/// segments in the remaining stations. The candidate keeps its strict pair
/// when nothing else matches.
pub fn match_segments(
    roa: &Roa,
    pair: (&SegmentCandidate, &SegmentCandidate),
    estimate: &MomentumEstimate,
    all_segments: &[SegmentCandidate],
    geom: &ToyGeometry,
    field: &dyn Field,
    settings: &PropagationSettings,
    cfg: &ScanConfig,
) -> TrackCandidate {
    let (a, b) = pair;
    let (inner_seg, outer_seg) = if station_radius(geom, a.station) <= station_radius(geom, b.station) {
        (a, b)
    } else {
        (b, a)
    };

    let pair_stations = [inner_seg.station, outer_seg.station];
    let remaining: Vec<&SegmentCandidate> = all_segments
        .iter()
        .filter(|s| !pair_stations.contains(&s.station))
        .collect();

    let mut qop_grid = Vec::with_capacity(cfg.n_points * 2);
    for k in 0..cfg.n_points.max(1) {
        let t = if cfg.n_points > 1 { k as f64 / (cfg.n_points as f64 - 1.0) * 2.0 - 1.0 } else { 0.0 };
        let qop = estimate.qop * cfg.span.powf(t);
        qop_grid.push(qop);
        if estimate.straight {
            qop_grid.push(-qop);
        }
    }
    // Uncertainty assigned to each scanned q/p: half the geometric grid
    // spacing, floored at 2% to keep the match metric well conditioned.
    let qop_sigma_frac = if cfg.n_points > 1 {
        (cfg.span.ln() * 2.0 / (cfg.n_points as f64 - 1.0) / 2.0).max(0.02)
    } else {
        0.5
    };

    // (n_matched, chi2, distance from the estimate, qop, segs); prefer more
    // matched stations, then lower chi2, then staying near the estimate, so
    // a candidate with nothing to match keeps the estimate itself.
    let mut best: Option<(usize, f64, f64, f64, Vec<SegmentCandidate>)> = None;
    for &qop in &qop_grid {
        let state = pair_seed_state(geom, inner_seg, outer_seg, qop);
        let cov = seed_covariance(inner_seg, qop_sigma_frac * qop.abs());
        let mut matched: Vec<SegmentCandidate> = Vec::new();
        let mut total_chi2 = 0.0;
        for station in StationLayer::ALL {
            if pair_stations.contains(&station) {
                continue;
            }
            let candidates: Vec<&&SegmentCandidate> =
                remaining.iter().filter(|s| s.station == station).collect();
            if candidates.is_empty() {
                continue;
            }
            let mut best_seg: Option<(f64, &SegmentCandidate)> = None;
            for seg in candidates {
                let chamber = geom.chamber(seg.chamber).expect("chamber");
                let plane = SurfaceGeom::Plane {
                    point: chamber.position,
                    normal: Unit::new_normalize(chamber.axis_n()),
                };
                let sign = if station_radius(geom, station) > station_radius(geom, inner_seg.station) {
                    1.0
                } else {
                    -1.0
                };
                let Ok((snaps, _)) =
                    walk_surfaces(&state, Some(&cov), &[plane], field, geom, settings, sign)
                else {
                    continue;
                };
                let Some(snap) = snaps.first() else { continue };
                let (r, jac, seg_cov) = segment_residual(geom, seg, &snap.state, &snap.sens);
                let track_cov = jac * (cov.0) * jac.transpose();
                let total = track_cov + seg_cov;
                let Some(inv) = total.try_inverse() else { continue };
                let chi2 = (r.transpose() * inv * r)[(0, 0)];
                if best_seg.map_or(true, |(c, _)| chi2 < c) {
                    best_seg = Some((chi2, seg));
                }
            }
            if let Some((chi2, seg)) = best_seg {
                if chi2 <= cfg.match_cut {
                    matched.push(seg.clone());
                    total_chi2 += chi2;
                }
            }
        }
        let dist = (qop.abs() / estimate.qop.abs()).ln().abs();
        let better = match &best {
            None => true,
            Some((n, c, d, _, _)) => {
                matched.len() > *n
                    || (matched.len() == *n && total_chi2 < *c - 1e-12)
                    || (matched.len() == *n && (total_chi2 - *c).abs() <= 1e-12 && dist < *d)
            }
        };
        if better {
            best = Some((matched.len(), total_chi2, dist, qop, matched));
        }
    }

    let (_, _, _, qop, extra) = best.unwrap_or((0, 0.0, 0.0, estimate.qop, Vec::new()));
    let mut segments: Vec<SegmentCandidate> = vec![inner_seg.clone(), outer_seg.clone()];
    segments.extend(extra);
    segments.sort_by(|x, y| station_radius(geom, x.station).total_cmp(&station_radius(geom, y.station)));
    let mut hits: Vec<(usize, bool)> = segments
        .iter()
        .flat_map(|s| s.hits.iter().map(|h| (h.hit_index, true)))
        .collect();
    hits.sort_unstable();
    hits.dedup();
    TrackCandidate {
        roa: *roa,
        segments,
        qop_seed: qop,
        straight_seed: estimate.straight,
        state: pair_seed_state(geom, inner_seg, outer_seg, qop),
        cov: seed_covariance(inner_seg, 0.5 * qop.abs()),
        chi2: 0.0,
        ndof: 0,
        hits,
        status: Status::Matched,
    }
}

fn station_radius(geom: &ToyGeometry, layer: StationLayer) -> f64 {
    geom.station(layer).map(|s| s.radius).unwrap_or(0.0)
}

/// Fit configuration for the segment-level and raw-hit fits.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub max_iterations: usize,
    /// Convergence threshold on the chi2 decrease.
    pub dchi2_tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { max_iterations: 50, dchi2_tol: 1e-4 }
    }
}

/// Outcome of one Gauss-Newton/Levenberg minimization.
struct MinimizeOutcome {
    state: TrackState,
    cov: Option<Covariance>,
    chi2: f64,
    n_meas: usize,
    converged: bool,
}

/// Generic damped Gauss-Newton over the five curvilinear parameters at a
/// floating reference state. `eval` returns (chi2, H, g, n_meas) at a state.
fn minimize<F>(start: TrackState, cfg: &FitConfig, mut eval: F) -> Result<MinimizeOutcome, RejectReason>
where
    F: FnMut(&TrackState) -> Option<(f64, SMatrix<f64, 5, 5>, SVector<f64, 5>, usize)>,
{
    let mut state = start;
    let Some((mut chi2, mut h, mut g, mut n_meas)) = eval(&state) else {
        return Err(RejectReason::DegenerateGeometry);
    };
    let mut lambda = 1e-3;
    let mut converged = false;
    for _ in 0..cfg.max_iterations {
        // Solve the damped normal equations.
        let mut tried = 0;
        let step = loop {
            let mut damped = h;
            for k in 0..5 {
                damped[(k, k)] *= 1.0 + lambda;
                if damped[(k, k)] == 0.0 {
                    damped[(k, k)] = lambda.max(1e-12);
                }
            }
            match damped.cholesky() {
                Some(chol) => {
                    let delta = -(chol.solve(&g));
                    let mut trial = state.apply_curvilinear(&delta);
                    trial.qop = trial.qop.signum() * trial.qop.abs().min(0.499);
                    if let Some((c2, h2, g2, n2)) = eval(&trial) {
                        if c2 <= chi2 + 1e-12 {
                            let decrease = chi2 - c2;
                            state = trial;
                            chi2 = c2;
                            h = h2;
                            g = g2;
                            n_meas = n2;
                            lambda = (lambda * 0.3).max(1e-12);
                            break Some(decrease);
                        }
                    }
                    lambda *= 8.0;
                }
                None => {
                    lambda *= 8.0;
                }
            }
            tried += 1;
            if lambda > 1e10 || tried > 20 {
                break None;
            }
        };
        match step {
            Some(decrease) => {
                if decrease < cfg.dchi2_tol {
                    converged = true;
                    break;
                }
            }
            None => break,
        }
    }
    if !converged {
        // One more convergence check: a tiny gradient also counts.
        let gnorm = g.amax();
        if gnorm < 1e-6 {
            converged = true;
        }
    }
    let cov = h.try_inverse().map(|m| {
        let mut c = Covariance(m);
        c.symmetrize();
        c
    });
    if cov.is_none() {
        return Err(RejectReason::DegenerateGeometry);
    }
    Ok(MinimizeOutcome { state, cov, chi2, n_meas, converged })
}

/// Fit the five parameters to the candidate's segments by damped
/// Gauss-Newton, with full field tracking at every objective evaluation.
/// The fitted reference lands at the spectrometer entrance surface.
pub fn fit_candidate(
    mut cand: TrackCandidate,
    geom: &ToyGeometry,
    field: &dyn Field,
    settings: &PropagationSettings,
    cfg: &FitConfig,
) -> TrackCandidate {
    if cand.segments.len() < 2 {
        cand.status = Status::Rejected(RejectReason::TooFewHits);
        return cand;
    }
    // Move the reference to the spectrometer entrance.
    let entrance = SurfaceGeom::Cylinder { radius: geom.spectrometer_entrance_radius() };
    let start = match propagate(&cand.state, None, &entrance, field, geom, settings, -1.0) {
        Ok(r) => r.state,
        Err(_) => {
            cand.status = Status::Rejected(RejectReason::NoConvergence);
            return cand;
        }
    };

    // The prediction mirrors what a straight-line segment measures: the
    // least-squares line through the track's crossings of the segment's own
    // layer planes. This cancels the in-field chord bias of the straight
    // segment model.
    struct SegPlanes {
        first_surface: usize,
        /// (local surface offset, layer n, multiplicity from the hit list).
        levels: Vec<(usize, f64, f64)>,
        n_mean: f64,
        s_nn: f64,
    }
    let mut surfaces: Vec<SurfaceGeom> = Vec::new();
    let mut seg_planes: Vec<SegPlanes> = Vec::new();
    for seg in &cand.segments {
        let chamber = geom.chamber(seg.chamber).expect("chamber");
        let normal = Unit::new_normalize(chamber.axis_n());
        let first_surface = surfaces.len();
        let mut levels: Vec<(usize, f64, f64)> = Vec::new();
        for hit in &seg.hits {
            let n = chamber.layer_offset(hit.tube.multilayer, hit.tube.layer);
            match levels.iter_mut().find(|(_, level_n, _)| (*level_n - n).abs() < 1e-12) {
                Some(entry) => entry.2 += 1.0,
                None => {
                    let local_idx = levels.len();
                    levels.push((local_idx, n, 1.0));
                    let point = chamber.local_to_global(&nalgebra::Vector3::new(0.0, 0.0, n));
                    surfaces.push(SurfaceGeom::Plane { point, normal });
                }
            }
        }
        let total: f64 = levels.iter().map(|(_, _, m)| m).sum();
        let n_mean = levels.iter().map(|(_, n, m)| n * m).sum::<f64>() / total;
        let s_nn = levels.iter().map(|(_, n, m)| m * (n - n_mean).powi(2)).sum::<f64>();
        seg_planes.push(SegPlanes { first_surface, levels, n_mean, s_nn });
    }

    let segments = cand.segments.clone();
    let eval = |state: &TrackState| -> Option<(f64, SMatrix<f64, 5, 5>, SVector<f64, 5>, usize)> {
        let (snaps, _) = walk_surfaces(state, None, &surfaces, field, geom, settings, 1.0).ok()?;
        if snaps.len() != surfaces.len() {
            return None;
        }
        let mut by_index: Vec<Option<&SurfaceSnapshot>> = vec![None; surfaces.len()];
        for snap in &snaps {
            by_index[snap.index] = Some(snap);
        }
        let mut chi2 = 0.0;
        let mut h = SMatrix::<f64, 5, 5>::zeros();
        let mut g = SVector::<f64, 5>::zeros();
        let mut n_meas = 0;
        for (seg, plan) in segments.iter().zip(&seg_planes) {
            let chamber = geom.chamber(seg.chamber).ok()?;
            let au = chamber.axis_u();
            let aw = chamber.axis_w();
            let total: f64 = plan.levels.iter().map(|(_, _, m)| m).sum();

            // Weighted sums over layer crossings and their parameter rows.
            let mut mean_u = 0.0;
            let mut slope_num = 0.0;
            let mut mean_w = 0.0;
            let mut row_mean_u = SMatrix::<f64, 1, 5>::zeros();
            let mut row_slope_num = SMatrix::<f64, 1, 5>::zeros();
            let mut row_mean_w = SMatrix::<f64, 1, 5>::zeros();
            for (local_idx, n, mult) in &plan.levels {
                let snap = by_index[plan.first_surface + local_idx]?;
                let local = chamber.global_to_local(&snap.state.pos);
                let mut row_u = SMatrix::<f64, 1, 7>::zeros();
                let mut row_w = SMatrix::<f64, 1, 7>::zeros();
                for k in 0..3 {
                    row_u[(0, k)] = au[k];
                    row_w[(0, k)] = aw[k];
                }
                let ju = row_u * snap.sens;
                let jw = row_w * snap.sens;
                mean_u += mult * local.x / total;
                mean_w += mult * local.y / total;
                slope_num += mult * (n - plan.n_mean) * local.x;
                row_mean_u += ju * (mult / total);
                row_mean_w += jw * (mult / total);
                row_slope_num += ju * (mult * (n - plan.n_mean));
            }
            let slope = slope_num / plan.s_nn;
            let row_slope = row_slope_num / plan.s_nn;
            let u0 = mean_u - slope * plan.n_mean;
            let row_u0 = row_mean_u - row_slope * plan.n_mean;
            let alpha = slope.atan();
            let row_alpha = row_slope / (1.0 + slope * slope);

            let mut r = SVector::<f64, 3>::zeros();
            r[0] = u0 - seg.point.x;
            r[1] = alpha - seg.alpha();
            r[2] = mean_w - seg.second_coordinate;
            let mut jac = SMatrix::<f64, 3, 5>::zeros();
            jac.set_row(0, &row_u0.row(0).into_owned());
            jac.set_row(1, &row_alpha.row(0).into_owned());
            jac.set_row(2, &row_mean_w.row(0).into_owned());

            let mut cov = SMatrix::<f64, 3, 3>::zeros();
            cov[(0, 0)] = seg.cov_u_alpha[(0, 0)];
            cov[(0, 1)] = seg.cov_u_alpha[(0, 1)];
            cov[(1, 0)] = seg.cov_u_alpha[(1, 0)];
            cov[(1, 1)] = seg.cov_u_alpha[(1, 1)];
            cov[(2, 2)] = seg.second_coordinate_sigma.powi(2);
            let w = cov.try_inverse()?;
            chi2 += (r.transpose() * w * r)[(0, 0)];
            h += jac.transpose() * w * jac;
            g += jac.transpose() * w * r;
            n_meas += 3;
        }
        Some((chi2, h, g, n_meas))
    };

    match minimize(start, cfg, eval) {
        Ok(out) => {
            if !out.converged {
                cand.status = Status::Rejected(RejectReason::NoConvergence);
                return cand;
            }
            cand.state = out.state;
            cand.cov = out.cov.unwrap();
            cand.chi2 = out.chi2;
            cand.ndof = out.n_meas as i64 - 5;
            cand.status = Status::Fitted;
            cand
        }
        Err(reason) => {
            cand.status = Status::Rejected(reason);
            cand
        }
    }
}

/// Raw-hit refit configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RefitConfig {
    /// Drop hits with |residual| above this many tube resolutions.
    pub clean_cut_sigmas: f64,
    /// Reject the candidate when fewer drift hits remain.
    pub min_hits: usize,
    /// Rebuild corrected radii from the updated hypothesis this many times.
    pub outer_rounds: usize,
    /// Assumed tube resolution; `None` mirrors the segment-stage default.
    pub sigma: Option<f64>,
    pub fit: FitConfig,
}

impl Default for RefitConfig {
    fn default() -> Self {
        RefitConfig { clean_cut_sigmas: 4.0, min_hits: 6, outer_rounds: 3, sigma: None, fit: FitConfig::default() }
    }
}

/// One drift measurement prepared for the raw refit.
#[derive(Clone)]
struct RawMeasurement {
    hit_index: usize,
    plane_key: usize,
    radius: f64,
}

/// Global refit on raw drift times and strip positions. Corrected radii are
/// rebuilt from the current track hypothesis; hits spoiled by delta rays or
/// background are cleaned by iterative worst-residual rejection.
pub fn global_refit(
    mut cand: TrackCandidate,
    event: &Event,
    geom: &ToyGeometry,
    field: &dyn Field,
    rt: &RtRelation,
    digi: &DigitizationConfig,
    settings: &PropagationSettings,
    cfg: &RefitConfig,
) -> TrackCandidate {
    if cand.status == Status::Rejected(RejectReason::TooFewHits) {
        return cand;
    }
    let sigma = crate::segments::assumed_tube_sigma(cfg.sigma, digi);

    // Unique measurement planes (chamber layer planes) for the candidate hits.
    let mut plane_ids: Vec<(crate::geomodel::ChamberId, u8, u8)> = Vec::new();
    let mut measurements: Vec<RawMeasurement> = Vec::new();
    for &(hit_index, used) in &cand.hits {
        if !used {
            continue;
        }
        let hit = &event.drift_hits[hit_index];
        let key = (hit.tube.chamber, hit.tube.multilayer, hit.tube.layer);
        let plane_key = match plane_ids.iter().position(|k| *k == key) {
            Some(i) => i,
            None => {
                plane_ids.push(key);
                plane_ids.len() - 1
            }
        };
        measurements.push(RawMeasurement { hit_index, plane_key, radius: 0.0 });
    }
    if measurements.len() < cfg.min_hits {
        cand.status = Status::Rejected(RejectReason::TooFewHits);
        return cand;
    }

    let planes: Vec<SurfaceGeom> = plane_ids
        .iter()
        .map(|(chamber_id, ml, l)| {
            let chamber = geom.chamber(*chamber_id).expect("chamber");
            let point = chamber.local_to_global(&Vector3::new(0.0, 0.0, chamber.layer_offset(*ml, *l)));
            SurfaceGeom::Plane { point, normal: Unit::new_normalize(chamber.axis_n()) }
        })
        .collect();

    // Strip measurements: phi strips of planes inside the window.
    struct StripMeasurement {
        cylinder: usize,
        phi: f64,
        radius: f64,
    }
    let mut strip_cylinders: Vec<SurfaceGeom> = Vec::new();
    let mut strips: Vec<StripMeasurement> = Vec::new();
    for th in &event.trigger_hits {
        let Some(phi_strip) = th.phi_strip else { continue };
        let Some(plane) = geom.trigger_plane(th.plane) else { continue };
        if phi_strip >= plane.n_phi_strips() {
            continue;
        }
        let phi = plane.phi_strip_phi(phi_strip);
        if wrap_angle(phi - cand.roa.phi_center).abs() > cand.roa.half_width_phi {
            continue;
        }
        strips.push(StripMeasurement { cylinder: strip_cylinders.len(), phi, radius: plane.radius });
        strip_cylinders.push(SurfaceGeom::Cylinder { radius: plane.radius });
    }
    // Merge duplicate cylinders.
    let mut unique_cyl: Vec<f64> = Vec::new();
    for s in &mut strips {
        let r = s.radius;
        let idx = match unique_cyl.iter().position(|x| (x - r).abs() < 1e-9) {
            Some(i) => i,
            None => {
                unique_cyl.push(r);
                unique_cyl.len() - 1
            }
        };
        s.cylinder = idx;
    }
    let strip_surfaces: Vec<SurfaceGeom> =
        unique_cyl.iter().map(|r| SurfaceGeom::Cylinder { radius: *r }).collect();

    let mut all_surfaces = planes.clone();
    all_surfaces.extend_from_slice(&strip_surfaces);
    let n_planes = planes.len();

    let mut state = cand.state;
    let mut final_cov = None;
    let mut final_chi2 = 0.0;
    let mut n_meas_total = 0;

    'outer: for _round in 0..cfg.outer_rounds.max(1) {
        // Rebuild corrected radii from the current hypothesis.
        let Ok((snaps, _)) = walk_surfaces(&state, None, &all_surfaces, field, geom, settings, 1.0) else {
            cand.status = Status::Rejected(RejectReason::NoConvergence);
            return cand;
        };
        let mut snap_by_index: Vec<Option<&SurfaceSnapshot>> = vec![None; all_surfaces.len()];
        for snap in &snaps {
            snap_by_index[snap.index] = Some(snap);
        }
        for m in &mut measurements {
            let Some(snap) = snap_by_index[m.plane_key] else {
                cand.status = Status::Rejected(RejectReason::NoConvergence);
                return cand;
            };
            let hit = &event.drift_hits[m.hit_index];
            let (t_corr, _) = correct_drift_time(geom, field, digi, hit, &snap.state.pos);
            m.radius = rt.radius(t_corr);
        }

        // Inner minimization at fixed radii.
        let meas = measurements.clone();
        let strips_ref = &strips;
        let eval = |s: &TrackState| -> Option<(f64, SMatrix<f64, 5, 5>, SVector<f64, 5>, usize)> {
            let (snaps, _) = walk_surfaces(s, None, &all_surfaces, field, geom, settings, 1.0).ok()?;
            let mut by_index: Vec<Option<&SurfaceSnapshot>> = vec![None; all_surfaces.len()];
            for snap in &snaps {
                by_index[snap.index] = Some(snap);
            }
            let mut chi2 = 0.0;
            let mut h = SMatrix::<f64, 5, 5>::zeros();
            let mut g = SVector::<f64, 5>::zeros();
            let mut n_meas = 0;
            for m in &meas {
                let snap = by_index[m.plane_key]?;
                let hit = &event.drift_hits[m.hit_index];
                let (res, row) = drift_residual_row(geom, hit.tube, m.radius, snap)?;
                let w = 1.0 / (sigma * sigma);
                chi2 += w * res * res;
                h += row.transpose() * row * w;
                g += row.transpose() * (w * res);
                n_meas += 1;
            }
            for s_meas in strips_ref {
                let snap = by_index[n_planes + s_meas.cylinder]?;
                let phi_x = snap.state.pos.y.atan2(snap.state.pos.x);
                let res = s_meas.radius * wrap_angle(phi_x - s_meas.phi);
                let rt2 = snap.state.pos.coords.xy().norm_squared().max(1e-12);
                let mut l = SMatrix::<f64, 1, 7>::zeros();
                l[(0, 0)] = -s_meas.radius * snap.state.pos.y / rt2;
                l[(0, 1)] = s_meas.radius * snap.state.pos.x / rt2;
                let row = l * snap.sens;
                let w = 1.0 / (digi.trigger_accuracy * digi.trigger_accuracy);
                chi2 += w * res * res;
                h += row.transpose() * row * w;
                g += row.transpose() * (w * res);
                n_meas += 1;
            }
            Some((chi2, h, g, n_meas))
        };

        let out = match minimize(state, &cfg.fit, eval) {
            Ok(o) => o,
            Err(reason) => {
                cand.status = Status::Rejected(reason);
                return cand;
            }
        };
        state = out.state;
        final_cov = out.cov;
        final_chi2 = out.chi2;
        n_meas_total = out.n_meas;

        // Cleaning: drop the worst drift hit outside the cut and refit.
        let Ok((snaps, _)) = walk_surfaces(&state, None, &all_surfaces, field, geom, settings, 1.0) else {
            cand.status = Status::Rejected(RejectReason::NoConvergence);
            return cand;
        };
        let mut by_index: Vec<Option<&SurfaceSnapshot>> = vec![None; all_surfaces.len()];
        for snap in &snaps {
            by_index[snap.index] = Some(snap);
        }
        let mut worst: Option<(usize, f64)> = None;
        for (k, m) in measurements.iter().enumerate() {
            let Some(snap) = by_index[m.plane_key] else { continue };
            let hit = &event.drift_hits[m.hit_index];
            if let Some((res, _)) = drift_residual_row(geom, hit.tube, m.radius, snap) {
                let pull = res.abs() / sigma;
                if pull > cfg.clean_cut_sigmas && worst.map_or(true, |(_, p)| pull > p) {
                    worst = Some((k, pull));
                }
            }
        }
        if let Some((k, _)) = worst {
            let dropped = measurements.remove(k);
            for (idx, used) in &mut cand.hits {
                if *idx == dropped.hit_index {
                    *used = false;
                }
            }
            if measurements.len() < cfg.min_hits {
                cand.status = Status::Rejected(RejectReason::TooFewHits);
                return cand;
            }
            continue 'outer;
        }
    }

    cand.state = state;
    cand.cov = final_cov.unwrap_or_else(Covariance::zeros);
    cand.chi2 = final_chi2;
    cand.ndof = n_meas_total as i64 - 5;
    cand.status = Status::Refitted;
    cand
}

/// Signed drift residual of a hit against a landed snapshot, and its 1x5
/// derivative w.r.t. the start parameters. The sign convention follows the
/// bending-plane side of the wire.
fn drift_residual_row(
    geom: &ToyGeometry,
    tube: crate::geomodel::TubeId,
    radius: f64,
    snap: &SurfaceSnapshot,
) -> Option<(f64, SMatrix<f64, 1, 5>)> {
    let chamber = geom.chamber(tube.chamber).ok()?;
    let (wp, wd) = chamber.wire_line(tube.multilayer, tube.layer, tube.tube, true);
    let wd = wd.into_inner();
    let t = snap.state.dir.into_inner();
    let delta = snap.state.pos - wp;
    let m = t.cross(&wd);
    let m_norm = m.norm();
    if m_norm < 1e-9 {
        return None;
    }
    let m_hat = m / m_norm;
    let d_raw = delta.dot(&m_hat);

    // Side of the wire in the bending plane fixes the orientation.
    let local_pos = chamber.global_to_local(&snap.state.pos);
    let local_wire = chamber.global_to_local(&wp);
    let t_u = chamber.axis_u().dot(&t);
    let t_n = chamber.axis_n().dot(&t);
    let d2d = -t_n * (local_wire.x - local_pos.x) + t_u * (local_wire.z - local_pos.z);
    let orient = if d2d >= 0.0 { 1.0 } else { -1.0 };
    let flip = if d_raw.signum() == orient { 1.0 } else { -1.0 };
    let d_signed = flip * d_raw;
    let side = if d_signed >= 0.0 { 1.0 } else { -1.0 };
    let res = d_signed - side * radius;

    // Derivatives: dd/dx = m_hat; dd/dt through the normalized cross product.
    let mut l = SMatrix::<f64, 1, 7>::zeros();
    for k in 0..3 {
        l[(0, k)] = flip * m_hat[k];
    }
    let proj = SMatrix::<f64, 3, 3>::identity() - m_hat * m_hat.transpose();
    for k in 0..3 {
        let e_k = Vector3::ith(k, 1.0);
        let dm = e_k.cross(&wd);
        let dmhat = proj * dm / m_norm;
        l[(0, 3 + k)] = flip * delta.dot(&dmhat);
    }
    Some((res, l * snap.sens))
}

/// Indices of candidates surviving selection: refitted, below the chi2/ndof
/// cut, deduplicated so candidates sharing more than half of their hits keep
/// only the best one.
pub fn select_indices(cands: &[TrackCandidate], select_cut: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cands.len())
        .filter(|&i| {
            let c = &cands[i];
            c.status == Status::Refitted && c.ndof > 0 && c.chi2_per_ndof() <= select_cut
        })
        .collect();
    order.sort_by(|&a, &b| cands[a].chi2_per_ndof().total_cmp(&cands[b].chi2_per_ndof()));
    let mut kept: Vec<usize> = Vec::new();
    'cand: for i in order {
        let hits: Vec<usize> = cands[i].used_hits().collect();
        for &k in &kept {
            let k_hits: Vec<usize> = cands[k].used_hits().collect();
            let shared = hits.iter().filter(|h| k_hits.contains(h)).count();
            if 2 * shared > hits.len().min(k_hits.len()) {
                continue 'cand;
            }
        }
        kept.push(i);
    }
    kept.sort_unstable();
    kept
}

/// Final selection: keep refitted candidates below the chi2/ndof cut and
/// deduplicate candidates sharing more than half of their hits.
pub fn select_tracks(cands: Vec<TrackCandidate>, select_cut: f64) -> Vec<TrackCandidate> {
    let keep = select_indices(&cands, select_cut);
    cands
        .into_iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, c)| c)
        .collect()
}

/// Convenience: parameters view of a candidate at a named surface tag.
pub fn candidate_parameters(cand: &TrackCandidate, surface: Surface) -> crate::track::TrackParameters {
    cand.state.surface_parameters(surface)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bfield::UniformField;
    use crate::geomodel::{default_geometry, ChamberId};
    use nalgebra::Matrix2;

    fn synthetic_segment(
        _geom: &ToyGeometry,
        layer: StationLayer,
        sector: u16,
        alpha: f64,
        u0: f64,
        w: f64,
    ) -> SegmentCandidate {
        SegmentCandidate {
            chamber: ChamberId { layer, sector },
            station: layer,
            point: nalgebra::Vector2::new(u0, 0.0),
            direction: nalgebra::Vector2::new(alpha.sin(), alpha.cos()),
            chi2: 0.0,
            ndof: 4,
            hits: Vec::new(),
            second_coordinate: w,
            second_coordinate_sigma: 0.01,
            cov_u_alpha: Matrix2::new(1e-9, 0.0, 0.0, 1e-8),
        }
    }

    #[test]
    fn estimate_zero_field_is_straight() {
        let geom = default_geometry(1.0);
        let field = UniformField(Vector3::zeros());
        let inner = synthetic_segment(&geom, StationLayer::Middle, 0, 0.3, 0.1, 0.0);
        let outer = synthetic_segment(&geom, StationLayer::Outer, 0, 0.3, 0.9, 0.0);
        let est = estimate_momentum(&outer, &inner, &geom, &field);
        assert!(est.straight);
    }

    #[test]
    fn estimate_recovers_helix_momentum_in_uniform_field() {
        let geom = default_geometry(1.0);
        // Sector 0 bending plane is the (x, z) plane; an azimuthal field
        // there points along +y.
        let b = Vector3::new(0.0, 1.0, 0.0);
        let field = UniformField(b);
        let p = 20.0;
        for charge in [1.0f64, -1.0] {
            let qop = charge / p;
            let start = TrackState::new(Point3::new(4.0, 0.0, 0.5), Vector3::new(1.0, 0.0, 0.125), qop);
            // Walk the true helix to both station mid-planes and read off the
            // local angles the segments would measure.
            let mk_segment = |radius: f64, layer: StationLayer| -> SegmentCandidate {
                let mut stepper = Stepper::new(&field, StepOptions::default(), start, false, 1.0);
                stepper
                    .advance_to_first_crossing(&[SurfaceGeom::Plane {
                        point: Point3::new(radius, 0.0, 0.0),
                        normal: Unit::new_normalize(Vector3::x()),
                    }])
                    .unwrap();
                let chamber = geom.station(layer).unwrap().chambers[0].clone();
                let local = chamber.global_to_local(&stepper.state.pos);
                let t = stepper.state.dir.into_inner();
                let alpha = chamber.axis_u().dot(&t).atan2(chamber.axis_n().dot(&t));
                synthetic_segment(&geom, layer, 0, alpha, local.x, local.y)
            };
            let middle = mk_segment(geom.station(StationLayer::Middle).unwrap().radius, StationLayer::Middle);
            let outer = mk_segment(geom.station(StationLayer::Outer).unwrap().radius, StationLayer::Outer);
            let est = estimate_momentum(&outer, &middle, &geom, &field);
            assert!(!est.straight);
            assert!(
                (est.qop - qop).abs() / qop.abs() < 0.15,
                "estimate {} vs true {qop}",
                est.qop
            );
        }
    }

    #[test]
    fn propagate_straight_line_jacobian() {
        let geom = default_geometry(1.0);
        let field = UniformField(Vector3::zeros());
        let state = TrackState::new(Point3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.1, 0.2), 1.0 / 30.0);
        let settings = PropagationSettings::default();
        // Plane perpendicular to the track at distance s.
        let s = 7.0;
        let target_point = state.pos + state.dir.into_inner() * s;
        let target =
            SurfaceGeom::Plane { point: target_point, normal: state.dir };
        let result = propagate(&state, None, &target, &field, &geom, &settings, 1.0).unwrap();
        // For free propagation onto a perpendicular plane the curvilinear
        // Jacobian is the identity plus s * d(angles) -> transverse blocks.
        let j = result.jacobian;
        let sin_theta = state.dir.xy().norm();
        let expect_u_phi = s * sin_theta;
        assert!((j[(0, 2)] - expect_u_phi).abs() < 1e-9, "j_u_phi {}", j[(0, 2)]);
        assert!((j[(1, 3)] + s).abs() < 1e-9, "j_v_theta {}", j[(1, 3)]);
        for r in 0..5 {
            for c in 0..5 {
                let expect = match (r, c) {
                    (0, 0) | (1, 1) | (2, 2) | (3, 3) | (4, 4) => 1.0,
                    (0, 2) => expect_u_phi,
                    (1, 3) => -s,
                    _ => 0.0,
                };
                assert!((j[(r, c)] - expect).abs() < 1e-8, "j[{r},{c}] = {}", j[(r, c)]);
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences_in_toroid() {
        let geom = default_geometry(1.0);
        let field = crate::bfield::default_toroid(1.0);
        let settings = PropagationSettings::default();
        let state = TrackState::new(
            Point3::new(4.43, 0.3, 0.8),
            Vector3::new(0.95, 0.05, 0.3),
            -1.0 / 18.0,
        );
        let target = SurfaceGeom::Cylinder { radius: 9.0 };
        let nominal = propagate(&state, None, &target, &field, &geom, &settings, 1.0).unwrap();
        let h = 1e-6;
        for col in 0..5 {
            let mut dp = SVector::<f64, 5>::zeros();
            dp[col] = h;
            let plus = propagate(&state.apply_curvilinear(&dp), None, &target, &field, &geom, &settings, 1.0).unwrap();
            dp[col] = -h;
            let minus = propagate(&state.apply_curvilinear(&dp), None, &target, &field, &geom, &settings, 1.0).unwrap();
            // Central-difference curvilinear deltas at the nominal landing.
            let dpos = plus.state.pos - minus.state.pos;
            let du = nominal.state.curv_u().dot(&dpos) / (2.0 * h);
            let dv = nominal.state.curv_v().dot(&dpos) / (2.0 * h);
            let dt = plus.state.dir.into_inner() - minus.state.dir.into_inner();
            let sin_theta = nominal.state.dir.xy().norm();
            let dphi = nominal.state.curv_u().dot(&dt) / sin_theta / (2.0 * h);
            let dtheta = -nominal.state.curv_v().dot(&dt) / (2.0 * h);
            let dqop = (plus.state.qop - minus.state.qop) / (2.0 * h);
            let fd = SVector::<f64, 5>::from([du, dv, dphi, dtheta, dqop]);
            let an = nominal.jacobian.column(col).into_owned();
            let rel = (an - fd).norm() / an.norm().max(1e-6);
            assert!(rel < 1e-4, "column {col}: relative error {rel}\nanalytic {an:?}\nfd {fd:?}");
        }
    }

    #[test]
    fn forward_reverse_closure_with_field() {
        let geom = default_geometry(1.0);
        let field = crate::bfield::default_toroid(1.0);
        let settings = PropagationSettings::default();
        let state = TrackState::new(Point3::new(4.43, -0.2, -0.5), Vector3::new(0.9, -0.1, -0.35), 1.0 / 12.0);
        let out = propagate(&state, None, &SurfaceGeom::Cylinder { radius: 9.7 }, &field, &geom, &settings, 1.0).unwrap();
        let back = propagate(
            &out.state,
            None,
            &SurfaceGeom::Cylinder { radius: state.pos.coords.xy().norm() },
            &field,
            &geom,
            &settings,
            -1.0,
        )
        .unwrap();
        let dp = (back.state.pos - state.pos).norm() / state.pos.coords.norm();
        let dd = (back.state.dir.into_inner() - state.dir.into_inner()).norm();
        assert!(dp < 1e-6, "position closure {dp}");
        assert!(dd < 1e-6, "direction closure {dd}");
    }
}
