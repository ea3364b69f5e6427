//! Truth generation and digitization.
//!
//! Muons are propagated from their production vertex outward through the
//! calorimeter, the material slabs and every tube layer plane; each crossing
//! is recorded with the momentum at that point. Digitization turns tube-layer
//! crossings into drift times (true drift radius -> time via the RT relation,
//! plus signal propagation delay, time of flight and a Lorentz-angle term, all
//! invertible given a track hypothesis), applies resolution smearing, tube
//! inefficiency, delta-ray and background hits, and produces trigger strip
//! hits.
//!
//! Everything is deterministic given a seed; per-event streams are derived
//! with the splitmix discipline in [`crate::rng`].

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{Point3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::bfield::Field;
use crate::consts::{C_LIGHT_M_PER_NS, DEFAULT_ELOSS_SIGMA_FRAC, MOMENTUM_FLOOR_GEV, MUON_MASS_GEV};
use crate::geomodel::{ChamberId, MaterialSlab, PlaneId, ToyGeometry, TubeId};
use crate::propagation::{StepOptions, Stepper, SurfaceGeom};
use crate::rng::{derive_seed, stream_rng};
use crate::track::TrackState;

/// Header tag of the RT relation file format.
pub const RT_SCHEMA: &str = "muonpath-rt/1";

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("generation range is empty: {0}")]
    EmptyRange(String),
    #[error("reading RT file: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing RT relation: {0}")]
    RtFormat(String),
    #[error("invalid RT relation: {0}")]
    RtInvalid(String),
}

/// A generated muon.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TruthMuon {
    /// Charge in units of e, +1 or -1.
    pub charge: i8,
    /// Transverse momentum, GeV.
    pub pt: f64,
    pub eta: f64,
    pub phi: f64,
    pub vertex: Point3<f64>,
}

impl TruthMuon {
    pub fn momentum(&self) -> f64 {
        self.pt * self.eta.cosh()
    }

    pub fn theta(&self) -> f64 {
        2.0 * (-self.eta).exp().atan()
    }

    pub fn direction(&self) -> Vector3<f64> {
        let theta = self.theta();
        Vector3::new(self.phi.cos() * theta.sin(), self.phi.sin() * theta.sin(), theta.cos())
    }

    pub fn qop(&self) -> f64 {
        self.charge as f64 / self.momentum()
    }

    pub fn state(&self) -> TrackState {
        TrackState::new(self.vertex, self.direction(), self.qop())
    }
}

/// Monotone drift-time to drift-radius calibration table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RtRelation {
    /// (time ns, radius m) knots, strictly increasing in both columns,
    /// starting at (0, 0).
    pub knots: Vec<(f64, f64)>,
}

impl RtRelation {
    /// Linear relation `r = v * t` up to `max_radius`.
    pub fn linear(drift_velocity_m_per_ns: f64, max_radius_m: f64) -> Self {
        RtRelation { knots: vec![(0.0, 0.0), (max_radius_m / drift_velocity_m_per_ns, max_radius_m)] }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.knots.len() < 2 {
            return Err(SimError::RtInvalid("need at least 2 knots".into()));
        }
        if self.knots[0] != (0.0, 0.0) {
            return Err(SimError::RtInvalid("first knot must be (0, 0)".into()));
        }
        for w in self.knots.windows(2) {
            if w[1].0 <= w[0].0 || w[1].1 <= w[0].1 {
                return Err(SimError::RtInvalid("knots must be strictly increasing in time and radius".into()));
            }
        }
        Ok(())
    }

    pub fn max_time(&self) -> f64 {
        self.knots.last().unwrap().0
    }

    pub fn max_radius(&self) -> f64 {
        self.knots.last().unwrap().1
    }

    /// Drift radius for a time; clamps outside the table and flags it.
    pub fn radius_flagged(&self, t: f64) -> (f64, bool) {
        if t <= 0.0 {
            return (0.0, t < 0.0);
        }
        if t >= self.max_time() {
            return (self.max_radius(), t > self.max_time());
        }
        let i = self.knots.partition_point(|k| k.0 <= t) - 1;
        let (t0, r0) = self.knots[i];
        let (t1, r1) = self.knots[i + 1];
        (r0 + (r1 - r0) * (t - t0) / (t1 - t0), false)
    }

    pub fn radius(&self, t: f64) -> f64 {
        self.radius_flagged(t).0
    }

    /// Drift time for a radius (inverse interpolation); clamps outside.
    pub fn time(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        if r >= self.max_radius() {
            return self.max_time();
        }
        let i = self.knots.partition_point(|k| k.1 <= r) - 1;
        let (t0, r0) = self.knots[i];
        let (t1, r1) = self.knots[i + 1];
        t0 + (t1 - t0) * (r - r0) / (r1 - r0)
    }

    /// Write the two-column `muonpath-rt/1` format (ns, mm).
    pub fn write_to(&self, mut w: impl Write) -> Result<(), SimError> {
        writeln!(w, "{RT_SCHEMA}")?;
        for (t, r) in &self.knots {
            writeln!(w, "{} {}", t, r * 1e3)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SimError> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn read_from(r: impl BufRead) -> Result<Self, SimError> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| SimError::RtFormat("empty file".into()))??;
        if header.trim() != RT_SCHEMA {
            return Err(SimError::RtFormat(format!("bad header {header:?}, expected {RT_SCHEMA:?}")));
        }
        let mut knots = Vec::new();
        for line in lines {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let mut it = t.split_whitespace();
            let time: f64 = it
                .next()
                .ok_or_else(|| SimError::RtFormat("missing time column".into()))?
                .parse()
                .map_err(|e| SimError::RtFormat(format!("bad time in {t:?}: {e}")))?;
            let radius_mm: f64 = it
                .next()
                .ok_or_else(|| SimError::RtFormat("missing radius column".into()))?
                .parse()
                .map_err(|e| SimError::RtFormat(format!("bad radius in {t:?}: {e}")))?;
            knots.push((time, radius_mm * 1e-3));
        }
        let rt = RtRelation { knots };
        rt.validate()?;
        Ok(rt)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Truth provenance carried by a hit, for analysis only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitTruth {
    /// Index of the parent muon in the event truth list; `None` for background.
    pub muon: Option<u32>,
    pub is_delta_ray: bool,
    pub is_background: bool,
}

impl HitTruth {
    pub fn genuine(muon: u32) -> Self {
        HitTruth { muon: Some(muon), is_delta_ray: false, is_background: false }
    }
}

/// A raw drift-tube measurement.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DriftHit {
    pub tube: TubeId,
    /// Uncorrected drift time, ns.
    pub raw_time: f64,
    pub truth: HitTruth,
}

/// A trigger-chamber measurement; real crossings carry both strip
/// coordinates, partial hits can occur for noise or test inputs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TriggerHit {
    pub plane: PlaneId,
    pub eta_strip: Option<u32>,
    pub phi_strip: Option<u32>,
}

/// One simulated event.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Event {
    pub id: u64,
    pub seed: u64,
    pub truth: Vec<TruthMuon>,
    pub drift_hits: Vec<DriftHit>,
    pub trigger_hits: Vec<TriggerHit>,
}

/// Digitization knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DigitizationConfig {
    /// Single-tube resolution (radius-equivalent gaussian smearing), meters.
    pub tube_resolution: f64,
    /// Assumed trigger-strip point accuracy, meters.
    pub trigger_accuracy: f64,
    pub tube_efficiency: f64,
    /// Probability of an extra delta-ray hit per genuine hit.
    pub delta_ray_prob: f64,
    /// Poisson mean of background hits per event.
    pub background_hits_per_event: f64,
    /// Drift velocity of the default linear RT relation, m/ns.
    pub drift_velocity: f64,
    /// Lorentz-angle drift-time correction, ns per tesla.
    pub lorentz_coefficient: f64,
    /// Signal propagation speed along the wire, m/ns.
    pub wire_propagation_speed: f64,
    /// Campaign-level seed; per-event streams are derived from it.
    pub seed: u64,
}

impl Default for DigitizationConfig {
    fn default() -> Self {
        DigitizationConfig {
            tube_resolution: 80e-6,
            trigger_accuracy: 1e-2,
            tube_efficiency: 1.0,
            delta_ray_prob: 0.05,
            background_hits_per_event: 20.0,
            drift_velocity: 20e-6,
            lorentz_coefficient: 2.0,
            wire_propagation_speed: 0.25,
            seed: 0,
        }
    }
}

impl DigitizationConfig {
    /// All stochastic effects off; corrections still applied.
    pub fn noiseless() -> Self {
        DigitizationConfig {
            tube_resolution: 0.0,
            tube_efficiency: 1.0,
            delta_ray_prob: 0.0,
            background_hits_per_event: 0.0,
            ..Default::default()
        }
    }

    /// RT relation implied by the configured drift velocity.
    pub fn linear_rt(&self, geom: &ToyGeometry) -> RtRelation {
        let r_max = geom.stations[0].chambers[0].tube_inner_radius;
        RtRelation::linear(self.drift_velocity, r_max)
    }
}

/// Material treatment during truth propagation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaterialMode {
    Off,
    /// Deterministic mean energy loss only; no scattering, no straggling.
    MeanOnly,
    /// Mean loss plus gaussian straggling and Highland multiple scattering.
    Full { eloss_sigma_frac: f64 },
}

impl MaterialMode {
    pub fn full() -> Self {
        MaterialMode::Full { eloss_sigma_frac: DEFAULT_ELOSS_SIGMA_FRAC }
    }
}

/// Ranges for muon generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRanges {
    pub pt: (f64, f64),
    pub eta: (f64, f64),
    pub phi: (f64, f64),
}

/// Uniformly generated muons with alternating charge, deterministic per seed.
pub fn generate_muons(spec: &GenerationRanges, n: usize, seed: u64) -> Result<Vec<TruthMuon>, SimError> {
    if spec.pt.0 <= 0.0 || spec.pt.1 > 3000.0 || spec.pt.1 < spec.pt.0 {
        return Err(SimError::EmptyRange(format!("pt range {:?} must lie within (0, 3000]", spec.pt)));
    }
    if spec.eta.1 < spec.eta.0 || spec.phi.1 < spec.phi.0 {
        return Err(SimError::EmptyRange("eta/phi ranges must be non-empty".into()));
    }
    let mut rng = stream_rng(seed, 0);
    let mut out = Vec::with_capacity(n);
    let unif = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if hi > lo { rng.gen_range(lo..hi) } else { lo };
    for i in 0..n {
        out.push(TruthMuon {
            charge: if i % 2 == 0 { 1 } else { -1 },
            pt: unif(&mut rng, spec.pt),
            eta: unif(&mut rng, spec.eta),
            phi: unif(&mut rng, spec.phi),
            vertex: Point3::origin(),
        });
    }
    Ok(out)
}

/// Why and where the truth propagation recorded a point.
#[derive(Debug, Clone, PartialEq)]
pub enum CrossingKind {
    CalorimeterMid,
    SpectrometerEntrance,
    Slab(String),
    TubeLayer { chamber: ChamberId, multilayer: u8, layer: u8 },
    TriggerPlane(PlaneId),
    Exit,
}

/// A recorded surface crossing along a truth trajectory.
#[derive(Debug, Clone)]
pub struct Crossing {
    pub kind: CrossingKind,
    pub pos: Point3<f64>,
    pub dir: Vector3<f64>,
    /// Momentum magnitude at the crossing, GeV.
    pub p: f64,
    /// Path length from the vertex, meters.
    pub path: f64,
}

/// Ordered surface crossings of one muon.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub charge: f64,
    pub crossings: Vec<Crossing>,
    /// Momentum dropped below the floor before leaving the spectrometer.
    pub ranged_out: bool,
}

/// Highland multiple-scattering width for a crossing of `x_over_x0` radiation
/// lengths at momentum `p`.
pub fn highland_theta0(p: f64, x_over_x0: f64) -> f64 {
    if x_over_x0 <= 0.0 {
        return 0.0;
    }
    let energy = (p * p + MUON_MASS_GEV * MUON_MASS_GEV).sqrt();
    let beta_p = p * p / energy;
    0.0136 / beta_p * x_over_x0.sqrt() * (1.0 + 0.038 * x_over_x0.ln())
}

enum Watch {
    CaloMid,
    Entrance,
    Trigger(usize),
    StationApproach(usize),
    LayerPlane { chamber: ChamberId, multilayer: u8, layer: u8 },
    SlabMid(usize),
    Stop,
}

/// Propagate a truth muon outward, recording crossings and applying material
/// effects per `material`. Trajectories that drop below the momentum floor
/// are flagged `ranged_out`.
pub fn propagate_truth(
    geom: &ToyGeometry,
    field: &dyn Field,
    muon: &TruthMuon,
    material: MaterialMode,
    seed: u64,
) -> Trajectory {
    let mut rng = stream_rng(seed, 1);
    let mut stepper = Stepper::new(field, StepOptions::default(), muon.state(), false, 1.0);
    let mut p = muon.momentum();

    let stop_radius = geom
        .trigger_planes
        .iter()
        .map(|t| t.radius)
        .chain(geom.stations.iter().map(|s| s.radius + 0.5))
        .fold(0.0, f64::max)
        + 0.2;

    let mut watches: Vec<(Watch, SurfaceGeom)> = Vec::new();
    watches.push((Watch::CaloMid, SurfaceGeom::Cylinder { radius: geom.calorimeter.crossing_radius() }));
    watches.push((Watch::Entrance, SurfaceGeom::Cylinder { radius: geom.spectrometer_entrance_radius() }));
    for (i, plane) in geom.trigger_planes.iter().enumerate() {
        watches.push((Watch::Trigger(i), SurfaceGeom::Cylinder { radius: plane.radius }));
    }
    for (i, station) in geom.stations.iter().enumerate() {
        let approach = station.radius - station.chambers[0].stack_depth() / 2.0 - 0.05;
        watches.push((Watch::StationApproach(i), SurfaceGeom::Cylinder { radius: approach }));
    }
    for (i, slab) in geom.material_slabs.iter().enumerate() {
        watches.push((Watch::SlabMid(i), SurfaceGeom::Cylinder { radius: slab.crossing_radius() }));
    }
    watches.push((Watch::Stop, SurfaceGeom::Cylinder { radius: stop_radius.min(geom.envelope.radius - 0.01) }));
    watches.push((Watch::Stop, SurfaceGeom::ZPlane { z: geom.envelope.half_length }));
    watches.push((Watch::Stop, SurfaceGeom::ZPlane { z: -geom.envelope.half_length }));

    let mut crossings = Vec::new();
    let mut ranged_out = false;

    loop {
        let geoms: Vec<SurfaceGeom> = watches.iter().map(|(_, g)| *g).collect();
        let idx = match stepper.advance_to_first_crossing(&geoms) {
            Ok(i) => i,
            Err(_) => break,
        };
        let pos = stepper.state.pos;
        let dir = stepper.state.dir.into_inner();
        let path = stepper.path;

        let apply_slab = |slab: &MaterialSlab, stepper: &mut Stepper, p: &mut f64, rng: &mut ChaCha8Rng| -> bool {
            if pos.z.abs() > slab.half_length || material == MaterialMode::Off {
                return false;
            }
            let mean = slab.mean_loss(*p);
            let loss = match material {
                MaterialMode::Full { eloss_sigma_frac } => {
                    let sigma = eloss_sigma_frac * mean;
                    let n: f64 = Normal::new(0.0, 1.0).unwrap().sample(rng);
                    (mean + sigma * n).max(0.0)
                }
                _ => mean,
            };
            *p -= loss;
            if *p < MOMENTUM_FLOOR_GEV {
                return true;
            }
            stepper.state.qop = muon.charge as f64 / *p;
            if let MaterialMode::Full { .. } = material {
                let r_hat = Vector3::new(pos.x, pos.y, 0.0).normalize();
                let cos_inc = dir.dot(&r_hat).abs().max(0.1);
                let theta0 = highland_theta0(*p, slab.thickness_x0 / cos_inc);
                if theta0 > 0.0 {
                    let g = Normal::new(0.0, theta0).unwrap();
                    let k1: f64 = g.sample(rng);
                    let k2: f64 = g.sample(rng);
                    let u = stepper.state.curv_u();
                    let v = stepper.state.curv_v();
                    let new_dir = stepper.state.dir.into_inner() + u * k1 + v * k2;
                    stepper.state.dir = nalgebra::Unit::new_normalize(new_dir);
                }
            }
            false
        };

        match &watches[idx].0 {
            Watch::CaloMid => {
                let stopped = apply_slab(&geom.calorimeter, &mut stepper, &mut p, &mut rng);
                crossings.push(Crossing { kind: CrossingKind::CalorimeterMid, pos, dir, p, path });
                if stopped {
                    ranged_out = true;
                    break;
                }
            }
            Watch::Entrance => {
                crossings.push(Crossing { kind: CrossingKind::SpectrometerEntrance, pos, dir, p, path });
            }
            Watch::Trigger(i) => {
                crossings.push(Crossing { kind: CrossingKind::TriggerPlane(geom.trigger_planes[*i].id), pos, dir, p, path });
            }
            Watch::SlabMid(i) => {
                let slab = &geom.material_slabs[*i];
                let stopped = apply_slab(slab, &mut stepper, &mut p, &mut rng);
                crossings.push(Crossing { kind: CrossingKind::Slab(slab.name.clone()), pos, dir, p, path });
                if stopped {
                    ranged_out = true;
                    break;
                }
            }
            Watch::StationApproach(i) => {
                // Pick the chamber under the track and watch its layer planes.
                let station = &geom.stations[*i];
                let phi = pos.y.atan2(pos.x);
                if let Some(chamber) = station.chamber_at(phi) {
                    let normal = nalgebra::Unit::new_normalize(chamber.axis_n());
                    for ml in 0..2u8 {
                        for layer in 0..chamber.layers_per_multilayer {
                            let plane_point = chamber.local_to_global(&Vector3::new(
                                0.0,
                                0.0,
                                chamber.layer_offset(ml, layer),
                            ));
                            watches.push((
                                Watch::LayerPlane { chamber: chamber.id, multilayer: ml, layer },
                                SurfaceGeom::Plane { point: plane_point, normal },
                            ));
                        }
                    }
                }
            }
            Watch::LayerPlane { chamber, multilayer, layer } => {
                crossings.push(Crossing {
                    kind: CrossingKind::TubeLayer { chamber: *chamber, multilayer: *multilayer, layer: *layer },
                    pos,
                    dir,
                    p,
                    path,
                });
            }
            Watch::Stop => {
                crossings.push(Crossing { kind: CrossingKind::Exit, pos, dir, p, path });
                break;
            }
        }
    }

    Trajectory { charge: muon.charge as f64, crossings, ranged_out }
}

/// Sum of the three drift-time additions for a hit on `tube`, evaluated at a
/// reference position: signal propagation along the wire, time of flight from
/// the origin, and the Lorentz-angle term.
pub fn time_corrections(
    geom: &ToyGeometry,
    field: &dyn Field,
    cfg: &DigitizationConfig,
    tube: TubeId,
    reference: &Point3<f64>,
) -> f64 {
    let chamber = match geom.chamber(tube.chamber) {
        Ok(c) => c,
        Err(_) => return 0.0,
    };
    let w = chamber.global_to_local(reference).y.clamp(-chamber.tube_length / 2.0, chamber.tube_length / 2.0);
    let propagation = (chamber.tube_length / 2.0 - w) / cfg.wire_propagation_speed;
    let tof = reference.coords.norm() / C_LIGHT_M_PER_NS;
    let lorentz = cfg.lorentz_coefficient * field.b(reference).norm();
    propagation + tof + lorentz
}

/// Subtract the digitization additions given a track hypothesis (estimated
/// crossing position for this tube). Returns the corrected drift time and a
/// flag set when the result was clamped at zero.
pub fn correct_drift_time(
    geom: &ToyGeometry,
    field: &dyn Field,
    cfg: &DigitizationConfig,
    hit: &DriftHit,
    hypothesis: &Point3<f64>,
) -> (f64, bool) {
    let corrected = hit.raw_time - time_corrections(geom, field, cfg, hit.tube, hypothesis);
    if corrected < 0.0 {
        (0.0, true)
    } else {
        (corrected, false)
    }
}

/// Closest distance between a track line `(pos, dir)` and a wire line
/// `(wp, wd)`, plus the signed offset of the closest point along the wire.
pub fn line_wire_distance(
    pos: &Point3<f64>,
    dir: &Vector3<f64>,
    wp: &Point3<f64>,
    wd: &Vector3<f64>,
) -> (f64, f64) {
    let cross = dir.cross(wd);
    let sep = pos - wp;
    let n = cross.norm();
    if n < 1e-12 {
        // Parallel lines; distance of the separation perpendicular to the wire.
        let along = sep.dot(wd);
        return ((sep - wd * along).norm(), along);
    }
    let dist = sep.dot(&cross).abs() / n;
    // Wire parameter of the mutual closest point.
    let a = dir.dot(dir);
    let b = dir.dot(wd);
    let c = wd.dot(wd);
    let d = sep.dot(dir);
    let e = sep.dot(wd);
    let denom = a * c - b * b;
    let t_wire = (a * e - b * d) / denom;
    (dist, t_wire)
}

/// Digitize one muon trajectory into drift and trigger hits.
pub fn digitize(
    trajectory: &Trajectory,
    muon_index: u32,
    geom: &ToyGeometry,
    field: &dyn Field,
    rt: &RtRelation,
    cfg: &DigitizationConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<DriftHit>, Vec<TriggerHit>) {
    let mut drift = Vec::new();
    let mut trigger = Vec::new();
    let smear = Normal::new(0.0, 1.0).unwrap();

    for crossing in &trajectory.crossings {
        match &crossing.kind {
            CrossingKind::TubeLayer { chamber, multilayer, layer } => {
                let Ok(ch) = geom.chamber(*chamber) else { continue };
                let local = ch.global_to_local(&crossing.pos);
                if local.y.abs() > ch.tube_length / 2.0 || local.x.abs() > ch.u_half_extent() {
                    continue;
                }
                let Some(center_tube) = ch.nearest_tube(*multilayer, *layer, local.x) else { continue };
                let lo = center_tube.saturating_sub(1);
                let hi = (center_tube + 1).min(ch.tubes_per_layer - 1);
                for tube in lo..=hi {
                    let (wp, wd) = ch.wire_line(*multilayer, *layer, tube, true);
                    let (r_true, _) = line_wire_distance(&crossing.pos, &crossing.dir, &wp, &wd.into_inner());
                    if r_true >= ch.tube_inner_radius {
                        continue;
                    }
                    if cfg.tube_efficiency < 1.0 && rng.gen::<f64>() >= cfg.tube_efficiency {
                        continue;
                    }
                    let tube_id = TubeId { chamber: *chamber, multilayer: *multilayer, layer: *layer, tube };
                    let r_meas = if cfg.tube_resolution > 0.0 {
                        (r_true + cfg.tube_resolution * smear.sample(rng)).clamp(0.0, rt.max_radius())
                    } else {
                        r_true
                    };
                    let additions = time_corrections(geom, field, cfg, tube_id, &crossing.pos);
                    drift.push(DriftHit {
                        tube: tube_id,
                        raw_time: rt.time(r_meas) + additions,
                        truth: HitTruth::genuine(muon_index),
                    });
                    if cfg.delta_ray_prob > 0.0 && rng.gen::<f64>() < cfg.delta_ray_prob {
                        // A knock-on electron fires the same tube at a shorter radius.
                        let r_delta = rng.gen::<f64>() * r_true;
                        drift.push(DriftHit {
                            tube: tube_id,
                            raw_time: rt.time(r_delta) + additions,
                            truth: HitTruth { muon: Some(muon_index), is_delta_ray: true, is_background: false },
                        });
                    }
                }
            }
            CrossingKind::TriggerPlane(plane_id) => {
                let Some(plane) = geom.trigger_plane(*plane_id) else { continue };
                let Some(eta_strip) = plane.eta_strip_index(crossing.pos.z) else { continue };
                let phi = crossing.pos.y.atan2(crossing.pos.x);
                trigger.push(TriggerHit {
                    plane: *plane_id,
                    eta_strip: Some(eta_strip),
                    phi_strip: Some(plane.phi_strip_index(phi)),
                });
            }
            _ => {}
        }
    }
    (drift, trigger)
}

/// Append Poisson background hits on uniformly random tubes.
pub fn add_background(geom: &ToyGeometry, rt: &RtRelation, cfg: &DigitizationConfig, rng: &mut ChaCha8Rng, out: &mut Vec<DriftHit>) {
    if cfg.background_hits_per_event <= 0.0 {
        return;
    }
    let n: f64 = Poisson::new(cfg.background_hits_per_event).unwrap().sample(rng);
    let total = geom.tube_count();
    for _ in 0..n as u64 {
        let k = rng.gen_range(0..total);
        let Some(tube) = geom.tube_by_flat_index(k) else { continue };
        out.push(DriftHit {
            tube,
            raw_time: rng.gen::<f64>() * (rt.max_time() + 200.0),
            truth: HitTruth { muon: None, is_delta_ray: false, is_background: true },
        });
    }
}

/// Simulate one full event: propagate and digitize every muon, then add
/// background. Deterministic given `(cfg.seed, event_id)`.
pub fn simulate_event(
    geom: &ToyGeometry,
    field: &dyn Field,
    rt: &RtRelation,
    cfg: &DigitizationConfig,
    material: MaterialMode,
    muons: Vec<TruthMuon>,
    event_id: u64,
) -> Event {
    let event_seed = derive_seed(cfg.seed, event_id);
    let mut drift = Vec::new();
    let mut trigger = Vec::new();
    for (i, muon) in muons.iter().enumerate() {
        let muon_seed = derive_seed(event_seed, 2 * i as u64);
        let trajectory = propagate_truth(geom, field, muon, material, muon_seed);
        let mut rng = stream_rng(event_seed, 2 * i as u64 + 1);
        let (d, t) = digitize(&trajectory, i as u32, geom, field, rt, cfg, &mut rng);
        drift.extend(d);
        trigger.extend(t);
    }
    let mut rng = stream_rng(event_seed, u64::MAX / 2);
    add_background(geom, rt, cfg, &mut rng, &mut drift);
    Event { id: event_id, seed: event_seed, truth: muons, drift_hits: drift, trigger_hits: trigger }
}
