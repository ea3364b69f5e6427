//! Immutable description of a simplified three-station toroidal drift-tube
//! spectrometer: barrel-only, with flat chambers tiled in azimuthal sectors,
//! cylindrical trigger planes and cylindrical material shells.
//!
//! Chamber-local coordinates are `(u, w, n)`: `u` is the precision (bending)
//! coordinate along the global z axis, `w` runs along the wires, `n` is the
//! layer-stacking normal (radially outward for nominal barrel chambers). Tubes
//! measure only `u`; the second coordinate comes from trigger strips.
//!
//! Geometry is immutable after load and safe to share across threads.

use std::fmt;
use std::path::Path;

use nalgebra::{Matrix3, Point3, Rotation3, Unit, UnitVector3, Vector3};
use serde::{Deserialize, Serialize};

use crate::segments::Roa;

/// Schema tag expected at the top of every geometry file.
pub const GEOMETRY_SCHEMA: &str = "muonpath-geom/1";

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a.rem_euclid(2.0 * std::f64::consts::PI);
    if x > std::f64::consts::PI {
        x -= 2.0 * std::f64::consts::PI;
    }
    x
}

/// Pseudorapidity of a space point seen from the origin.
pub fn eta_of_point(p: &Point3<f64>) -> f64 {
    let rt = p.coords.xy().norm();
    if rt <= 0.0 {
        return if p.z >= 0.0 { f64::INFINITY } else { f64::NEG_INFINITY };
    }
    (p.z / rt).asinh()
}

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("reading geometry file: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing geometry: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported geometry schema {found:?}, expected {GEOMETRY_SCHEMA:?}")]
    Schema { found: String },
    #[error("geometry invariant violated at {field}: {message}")]
    Invariant { field: String, message: String },
    #[error("unknown tube {0}")]
    UnknownTube(TubeId),
    #[error("unknown chamber {0}")]
    UnknownChamber(ChamberId),
}

fn invariant(field: &str, message: impl Into<String>) -> GeometryError {
    GeometryError::Invariant { field: field.to_string(), message: message.into() }
}

/// Station layer, ordered inner to outer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StationLayer {
    Inner,
    Middle,
    Outer,
}

impl StationLayer {
    pub const ALL: [StationLayer; 3] = [StationLayer::Inner, StationLayer::Middle, StationLayer::Outer];

    pub fn index(self) -> usize {
        match self {
            StationLayer::Inner => 0,
            StationLayer::Middle => 1,
            StationLayer::Outer => 2,
        }
    }
}

impl fmt::Display for StationLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StationLayer::Inner => write!(f, "inner"),
            StationLayer::Middle => write!(f, "middle"),
            StationLayer::Outer => write!(f, "outer"),
        }
    }
}

/// Identifies a chamber by station layer and azimuthal sector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChamberId {
    pub layer: StationLayer,
    pub sector: u16,
}

impl fmt::Display for ChamberId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.layer, self.sector)
    }
}

/// Identifies a single drift tube.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TubeId {
    pub chamber: ChamberId,
    pub multilayer: u8,
    pub layer: u8,
    pub tube: u16,
}

impl fmt::Display for TubeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/ml{}/l{}/t{}", self.chamber, self.multilayer, self.layer, self.tube)
    }
}

/// Identifies a trigger plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PlaneId(pub u16);

/// Rigid alignment correction applied on top of the nominal chamber placement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentCorrection {
    /// Translation of the chamber, meters.
    pub translation: Vector3<f64>,
    /// Small-angle rotation vector (axis * angle), radians, applied about the
    /// chamber reference position after the nominal orientation.
    pub rotation: Vector3<f64>,
}

impl AlignmentCorrection {
    pub const ZERO: AlignmentCorrection =
        AlignmentCorrection { translation: Vector3::new(0.0, 0.0, 0.0), rotation: Vector3::new(0.0, 0.0, 0.0) };

    pub fn is_zero(&self) -> bool {
        self.translation == Vector3::zeros() && self.rotation == Vector3::zeros()
    }
}

impl Default for AlignmentCorrection {
    fn default() -> Self {
        Self::ZERO
    }
}

/// Serialize rotations as their nine matrix entries verbatim; nalgebra's own
/// deserializer re-orthonormalizes and breaks bit-exact round trips.
mod rotation_serde {
    use nalgebra::{Matrix3, Rotation3};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(r: &Rotation3<f64>, s: S) -> Result<S::Ok, S::Error> {
        let m = r.matrix();
        let v: [f64; 9] = std::array::from_fn(|k| m[(k / 3, k % 3)]);
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rotation3<f64>, D::Error> {
        let v = <[f64; 9]>::deserialize(d)?;
        let m = Matrix3::from_fn(|i, j| v[i * 3 + j]);
        Ok(Rotation3::from_matrix_unchecked(m))
    }
}

/// A flat drift-tube chamber with two multilayers of 3 or 4 staggered layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Chamber {
    pub id: ChamberId,
    /// Reference position: center of the tube stack, meters.
    pub position: Point3<f64>,
    /// Local-to-global rotation; columns are the images of (u, w, n).
    #[serde(with = "rotation_serde")]
    pub orientation: Rotation3<f64>,
    pub layers_per_multilayer: u8,
    pub tubes_per_layer: u16,
    /// Tube center spacing within a layer, meters.
    pub tube_pitch: f64,
    /// Maximum drift radius, meters.
    pub tube_inner_radius: f64,
    /// Wire length, meters. Readout at the +w end.
    pub tube_length: f64,
    /// Gap between the two multilayers along n, meters.
    pub multilayer_gap: f64,
    #[serde(default)]
    pub alignment: AlignmentCorrection,
}

impl Chamber {
    /// Radial spacing between adjacent tube layers (close packing).
    pub fn layer_spacing(&self) -> f64 {
        self.tube_pitch * 3.0f64.sqrt() / 2.0
    }

    /// Full extent of the tube stack along n.
    pub fn stack_depth(&self) -> f64 {
        2.0 * (self.layers_per_multilayer as f64 - 1.0) * self.layer_spacing() + self.multilayer_gap
    }

    /// n coordinate of a layer plane relative to the chamber reference.
    pub fn layer_offset(&self, multilayer: u8, layer: u8) -> f64 {
        let base = multilayer as f64
            * ((self.layers_per_multilayer as f64 - 1.0) * self.layer_spacing() + self.multilayer_gap);
        -0.5 * self.stack_depth() + base + layer as f64 * self.layer_spacing()
    }

    /// u coordinate of a tube center; odd global layers are staggered by half a pitch.
    pub fn tube_u(&self, multilayer: u8, layer: u8, tube: u16) -> f64 {
        let global_layer = multilayer * self.layers_per_multilayer + layer;
        let stagger = if global_layer % 2 == 0 { -0.25 } else { 0.25 };
        (tube as f64 - (self.tubes_per_layer as f64 - 1.0) / 2.0 + stagger) * self.tube_pitch
    }

    /// Half extent of the tube stack along u, including stagger.
    pub fn u_half_extent(&self) -> f64 {
        (self.tubes_per_layer as f64 / 2.0 + 0.25) * self.tube_pitch
    }

    /// Nominal local-frame basis vectors in global coordinates.
    pub fn axis_u(&self) -> Vector3<f64> {
        self.orientation * Vector3::x()
    }
    pub fn axis_w(&self) -> Vector3<f64> {
        self.orientation * Vector3::y()
    }
    pub fn axis_n(&self) -> Vector3<f64> {
        self.orientation * Vector3::z()
    }

    /// Map a chamber-local point to global coordinates (nominal placement).
    pub fn local_to_global(&self, local: &Vector3<f64>) -> Point3<f64> {
        self.position + self.orientation * local
    }

    /// Map a global point to chamber-local coordinates (nominal placement).
    pub fn global_to_local(&self, global: &Point3<f64>) -> Vector3<f64> {
        self.orientation.inverse() * (global - self.position)
    }

    /// Alignment as a rigid transform about the chamber reference position.
    fn alignment_rotation(&self) -> Rotation3<f64> {
        Rotation3::new(self.alignment.rotation)
    }

    /// Wire line of a tube: a point on the wire and the unit wire direction.
    pub fn wire_line(&self, multilayer: u8, layer: u8, tube: u16, aligned: bool) -> (Point3<f64>, UnitVector3<f64>) {
        let local = Vector3::new(self.tube_u(multilayer, layer, tube), 0.0, self.layer_offset(multilayer, layer));
        let point = self.local_to_global(&local);
        let dir = self.axis_w();
        if aligned && !self.alignment.is_zero() {
            let rot = self.alignment_rotation();
            let point = self.position + rot * (point - self.position) + self.alignment.translation;
            let dir = rot * dir;
            (point, Unit::new_normalize(dir))
        } else {
            (point, Unit::new_normalize(dir))
        }
    }

    /// Tube index whose nominal center is closest to local coordinate `u`.
    pub fn nearest_tube(&self, multilayer: u8, layer: u8, u: f64) -> Option<u16> {
        let global_layer = multilayer * self.layers_per_multilayer + layer;
        let stagger = if global_layer % 2 == 0 { -0.25 } else { 0.25 };
        let idx = (u / self.tube_pitch - stagger + (self.tubes_per_layer as f64 - 1.0) / 2.0).round();
        if idx < 0.0 || idx >= self.tubes_per_layer as f64 {
            None
        } else {
            Some(idx as u16)
        }
    }

    /// Corners of the chamber box in global coordinates (nominal placement).
    pub fn corners(&self) -> [Point3<f64>; 8] {
        let uh = self.u_half_extent();
        let wh = self.tube_length / 2.0;
        let nh = self.stack_depth() / 2.0 + self.tube_pitch / 2.0;
        let mut out = [Point3::origin(); 8];
        let mut k = 0;
        for su in [-1.0, 1.0] {
            for sw in [-1.0, 1.0] {
                for sn in [-1.0, 1.0] {
                    out[k] = self.local_to_global(&Vector3::new(su * uh, sw * wh, sn * nh));
                    k += 1;
                }
            }
        }
        out
    }
}

/// One station: all chambers of a layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Station {
    pub layer: StationLayer,
    /// Reference radius of the chamber stack centers, meters.
    pub radius: f64,
    pub chambers: Vec<Chamber>,
}

impl Station {
    /// Chamber whose sector contains azimuth `phi` (nearest sector center).
    pub fn chamber_at(&self, phi: f64) -> Option<&Chamber> {
        if self.chambers.is_empty() {
            return None;
        }
        let n = self.chambers.len() as f64;
        let width = 2.0 * std::f64::consts::PI / n;
        let idx = (wrap_angle(phi).rem_euclid(2.0 * std::f64::consts::PI) / width).round() as usize % self.chambers.len();
        self.chambers.get(idx)
    }
}

/// Cylindrical trigger plane with eta strips along z and phi strips around the
/// circumference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TriggerPlane {
    pub id: PlaneId,
    pub radius: f64,
    pub half_length: f64,
    /// Strip pitch along z, meters.
    pub eta_strip_pitch: f64,
    /// Strip pitch along the circumference (arc length), meters.
    pub phi_strip_pitch: f64,
    pub station: StationLayer,
}

impl TriggerPlane {
    pub fn n_eta_strips(&self) -> u32 {
        (2.0 * self.half_length / self.eta_strip_pitch).floor().max(1.0) as u32
    }

    pub fn n_phi_strips(&self) -> u32 {
        (2.0 * std::f64::consts::PI * self.radius / self.phi_strip_pitch).floor().max(1.0) as u32
    }

    /// Angular pitch of phi strips; phi strips tile the full circle exactly.
    pub fn phi_strip_angle(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.n_phi_strips() as f64
    }

    pub fn eta_strip_index(&self, z: f64) -> Option<u32> {
        let span = self.n_eta_strips() as f64 * self.eta_strip_pitch;
        let x = (z + span / 2.0) / self.eta_strip_pitch;
        if x < 0.0 || x >= self.n_eta_strips() as f64 {
            None
        } else {
            Some(x as u32)
        }
    }

    pub fn eta_strip_z(&self, index: u32) -> f64 {
        let span = self.n_eta_strips() as f64 * self.eta_strip_pitch;
        -span / 2.0 + (index as f64 + 0.5) * self.eta_strip_pitch
    }

    pub fn phi_strip_index(&self, phi: f64) -> u32 {
        let a = wrap_angle(phi).rem_euclid(2.0 * std::f64::consts::PI);
        ((a / self.phi_strip_angle()) as u32).min(self.n_phi_strips() - 1)
    }

    pub fn phi_strip_phi(&self, index: u32) -> f64 {
        wrap_angle((index as f64 + 0.5) * self.phi_strip_angle())
    }
}

/// Cylindrical material shell; scattering and energy loss are applied when a
/// trajectory crosses its mid radius.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaterialSlab {
    pub name: String,
    pub r_inner: f64,
    pub r_outer: f64,
    pub half_length: f64,
    /// Thickness in radiation lengths.
    pub thickness_x0: f64,
    /// Constant term of the mean energy loss, GeV.
    pub eloss_a: f64,
    /// Momentum-proportional term of the mean energy loss, dimensionless.
    pub eloss_b: f64,
}

impl MaterialSlab {
    /// Radius at which the crossing is applied.
    pub fn crossing_radius(&self) -> f64 {
        0.5 * (self.r_inner + self.r_outer)
    }

    /// Mean energy loss for a crossing at momentum `p` (GeV).
    pub fn mean_loss(&self, p: f64) -> f64 {
        self.eloss_a + self.eloss_b * p
    }
}

/// Detector envelope (cylinder half-length and radius).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Envelope {
    pub half_length: f64,
    pub radius: f64,
}

/// The full toy detector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyGeometry {
    pub stations: Vec<Station>,
    pub trigger_planes: Vec<TriggerPlane>,
    pub material_slabs: Vec<MaterialSlab>,
    pub calorimeter: MaterialSlab,
    pub envelope: Envelope,
}

#[derive(Serialize, Deserialize)]
struct GeometryFile {
    schema: String,
    #[serde(flatten)]
    geometry: ToyGeometry,
}

impl ToyGeometry {
    pub fn station(&self, layer: StationLayer) -> Option<&Station> {
        self.stations.iter().find(|s| s.layer == layer)
    }

    pub fn chamber(&self, id: ChamberId) -> Result<&Chamber, GeometryError> {
        self.station(id.layer)
            .and_then(|s| s.chambers.iter().find(|c| c.id == id))
            .ok_or(GeometryError::UnknownChamber(id))
    }

    /// Wire line (point, direction) of a tube; `aligned` applies the chamber's
    /// rigid alignment correction.
    pub fn tube_line(&self, tube: TubeId, aligned: bool) -> Result<(Point3<f64>, UnitVector3<f64>), GeometryError> {
        let chamber = self.chamber(tube.chamber).map_err(|_| GeometryError::UnknownTube(tube))?;
        if tube.multilayer >= 2 || tube.layer >= chamber.layers_per_multilayer || tube.tube >= chamber.tubes_per_layer
        {
            return Err(GeometryError::UnknownTube(tube));
        }
        Ok(chamber.wire_line(tube.multilayer, tube.layer, tube.tube, aligned))
    }

    /// (eta, phi) footprint of a chamber from its corner projections.
    pub fn chamber_footprint(&self, chamber: &Chamber) -> EtaPhiBox {
        let phi_c = chamber.position.y.atan2(chamber.position.x);
        let mut eta_min = f64::INFINITY;
        let mut eta_max = f64::NEG_INFINITY;
        let mut dphi_min = f64::INFINITY;
        let mut dphi_max = f64::NEG_INFINITY;
        for corner in chamber.corners() {
            let eta = eta_of_point(&corner);
            let dphi = wrap_angle(corner.y.atan2(corner.x) - phi_c);
            eta_min = eta_min.min(eta);
            eta_max = eta_max.max(eta);
            dphi_min = dphi_min.min(dphi);
            dphi_max = dphi_max.max(dphi);
        }
        EtaPhiBox {
            eta_center: 0.5 * (eta_min + eta_max),
            eta_half: 0.5 * (eta_max - eta_min),
            phi_center: wrap_angle(phi_c + 0.5 * (dphi_min + dphi_max)),
            phi_half: 0.5 * (dphi_max - dphi_min),
        }
    }

    /// Chambers whose (eta, phi) footprint overlaps the window, ordered by id.
    pub fn chambers_in_roa(&self, roa: &Roa) -> Vec<ChamberId> {
        let mut out = Vec::new();
        for station in &self.stations {
            for chamber in &station.chambers {
                if self.chamber_footprint(chamber).overlaps(roa) {
                    out.push(chamber.id);
                }
            }
        }
        out.sort();
        out
    }

    /// Largest |eta| fully covered by every station's tube stack.
    pub fn eta_acceptance(&self) -> f64 {
        self.stations
            .iter()
            .map(|s| {
                let c = &s.chambers[0];
                (c.u_half_extent() - c.tube_pitch) / s.radius
            })
            .fold(f64::INFINITY, |a, x| a.min(x.asinh()))
    }

    /// Radius of the spectrometer entrance surface: between the calorimeter and
    /// the innermost station.
    pub fn spectrometer_entrance_radius(&self) -> f64 {
        let inner_face = self
            .stations
            .iter()
            .map(|s| s.radius - s.chambers[0].stack_depth() / 2.0)
            .fold(f64::INFINITY, f64::min);
        0.5 * (self.calorimeter.r_outer + inner_face)
    }

    /// Radius of the calorimeter entrance surface (its beam-side face).
    pub fn calorimeter_entrance_radius(&self) -> f64 {
        self.calorimeter.r_inner
    }

    /// All material shells (calorimeter plus station slabs), ordered by
    /// crossing radius.
    pub fn all_slabs(&self) -> Vec<&MaterialSlab> {
        let mut v: Vec<&MaterialSlab> = std::iter::once(&self.calorimeter).chain(self.material_slabs.iter()).collect();
        v.sort_by(|a, b| a.crossing_radius().total_cmp(&b.crossing_radius()));
        v
    }

    pub fn trigger_plane(&self, id: PlaneId) -> Option<&TriggerPlane> {
        self.trigger_planes.iter().find(|p| p.id == id)
    }

    /// Total number of tubes, for uniform background sampling.
    pub fn tube_count(&self) -> u64 {
        self.stations
            .iter()
            .flat_map(|s| s.chambers.iter())
            .map(|c| 2 * c.layers_per_multilayer as u64 * c.tubes_per_layer as u64)
            .sum()
    }

    /// Tube with flat index `k` in `0..tube_count()`.
    pub fn tube_by_flat_index(&self, k: u64) -> Option<TubeId> {
        let mut rem = k;
        for station in &self.stations {
            for chamber in &station.chambers {
                let per_layer = chamber.tubes_per_layer as u64;
                let n = 2 * chamber.layers_per_multilayer as u64 * per_layer;
                if rem < n {
                    let ml = rem / (chamber.layers_per_multilayer as u64 * per_layer);
                    let rest = rem % (chamber.layers_per_multilayer as u64 * per_layer);
                    let layer = rest / per_layer;
                    let tube = rest % per_layer;
                    return Some(TubeId {
                        chamber: chamber.id,
                        multilayer: ml as u8,
                        layer: layer as u8,
                        tube: tube as u16,
                    });
                }
                rem -= n;
            }
        }
        None
    }

    /// Check every structural invariant; returns the first violation.
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.stations.is_empty() {
            return Err(invariant("stations", "no stations"));
        }
        let mut last_radius = 0.0;
        for (i, station) in self.stations.iter().enumerate() {
            if station.radius <= last_radius {
                return Err(invariant(
                    &format!("stations[{i}].radius"),
                    format!("station radii must be strictly increasing, got {} after {}", station.radius, last_radius),
                ));
            }
            last_radius = station.radius;
            if i > 0 && station.layer.index() <= self.stations[i - 1].layer.index() {
                return Err(invariant(
                    &format!("stations[{i}].layer"),
                    "stations must be ordered inner, middle, outer with unique layers",
                ));
            }
            if station.chambers.is_empty() {
                return Err(invariant(&format!("stations[{i}].chambers"), "station has no chambers"));
            }
            let mut sectors: Vec<u16> = station.chambers.iter().map(|c| c.id.sector).collect();
            sectors.sort_unstable();
            sectors.dedup();
            if sectors.len() != station.chambers.len() {
                return Err(invariant(&format!("stations[{i}].chambers"), "duplicate sector within a station"));
            }
            for chamber in &station.chambers {
                let f = format!("chamber {}", chamber.id);
                if chamber.layers_per_multilayer != 3 && chamber.layers_per_multilayer != 4 {
                    return Err(invariant(
                        &format!("{f}.layers_per_multilayer"),
                        format!("must be 3 or 4, got {}", chamber.layers_per_multilayer),
                    ));
                }
                if chamber.id.layer != station.layer {
                    return Err(invariant(&format!("{f}.id"), "chamber layer differs from station layer"));
                }
                if chamber.tube_pitch <= 0.0 || chamber.tube_inner_radius <= 0.0 || chamber.tube_length <= 0.0 {
                    return Err(invariant(&f, "tube pitch, inner radius and length must be positive"));
                }
                if 2.0 * chamber.tube_inner_radius > chamber.tube_pitch {
                    return Err(invariant(&format!("{f}.tube_inner_radius"), "tubes overlap: 2*r_inner > pitch"));
                }
                if chamber.tubes_per_layer == 0 {
                    return Err(invariant(&format!("{f}.tubes_per_layer"), "must be at least 1"));
                }
                if chamber.alignment.translation.norm() > 5e-3 {
                    return Err(invariant(&format!("{f}.alignment.translation"), "exceeds 5 mm sanity bound"));
                }
                if chamber.alignment.rotation.norm() > 5e-3 {
                    return Err(invariant(&format!("{f}.alignment.rotation"), "exceeds 5 mrad sanity bound"));
                }
                let m = chamber.orientation.matrix();
                let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
                if ortho > 1e-9 || (m.determinant() - 1.0).abs() > 1e-9 {
                    return Err(invariant(&format!("{f}.orientation"), "not a proper rotation matrix"));
                }
            }
        }
        let mut plane_ids: Vec<u16> = self.trigger_planes.iter().map(|p| p.id.0).collect();
        plane_ids.sort_unstable();
        plane_ids.dedup();
        if plane_ids.len() != self.trigger_planes.len() {
            return Err(invariant("trigger_planes", "duplicate plane id"));
        }
        for plane in &self.trigger_planes {
            if plane.eta_strip_pitch <= 0.0 || plane.phi_strip_pitch <= 0.0 {
                return Err(invariant(&format!("trigger_planes[{}]", plane.id.0), "strip pitches must be positive"));
            }
            if plane.radius <= 0.0 || plane.half_length <= 0.0 {
                return Err(invariant(&format!("trigger_planes[{}]", plane.id.0), "radius and half_length must be positive"));
            }
        }
        for slab in std::iter::once(&self.calorimeter).chain(self.material_slabs.iter()) {
            let f = format!("slab {:?}", slab.name);
            if slab.thickness_x0 < 0.0 || slab.eloss_a < 0.0 || slab.eloss_b < 0.0 {
                return Err(invariant(&f, "thickness_x0, eloss_a, eloss_b must be non-negative"));
            }
            if slab.r_inner >= slab.r_outer || slab.r_inner < 0.0 {
                return Err(invariant(&f, "requires 0 <= r_inner < r_outer"));
            }
        }
        if self.envelope.half_length <= 0.0 || self.envelope.radius <= 0.0 {
            return Err(invariant("envelope", "must be positive"));
        }
        if last_radius >= self.envelope.radius {
            return Err(invariant("envelope.radius", "outer station does not fit inside the envelope"));
        }
        Ok(())
    }

    /// Serialize to the versioned JSON format.
    pub fn to_json(&self) -> String {
        let file = GeometryFile { schema: GEOMETRY_SCHEMA.to_string(), geometry: self.clone() };
        serde_json::to_string_pretty(&file).expect("geometry serialization cannot fail")
    }
}

/// An (eta, phi) box used for footprint overlap tests.
#[derive(Debug, Clone, Copy)]
pub struct EtaPhiBox {
    pub eta_center: f64,
    pub eta_half: f64,
    pub phi_center: f64,
    pub phi_half: f64,
}

impl EtaPhiBox {
    pub fn overlaps(&self, roa: &Roa) -> bool {
        let eta_ok = (self.eta_center - roa.eta_center).abs() <= self.eta_half + roa.half_width_eta;
        let phi_ok = wrap_angle(self.phi_center - roa.phi_center).abs() <= self.phi_half + roa.half_width_phi;
        eta_ok && phi_ok
    }
}

/// Parse a geometry from its JSON text, checking schema and invariants.
pub fn parse_geometry(text: &str) -> Result<ToyGeometry, GeometryError> {
    let file: GeometryFile = serde_json::from_str(text)?;
    if file.schema != GEOMETRY_SCHEMA {
        return Err(GeometryError::Schema { found: file.schema });
    }
    file.geometry.validate()?;
    Ok(file.geometry)
}

/// Load and validate a geometry file.
pub fn load_geometry(path: impl AsRef<Path>) -> Result<ToyGeometry, GeometryError> {
    parse_geometry(&std::fs::read_to_string(path)?)
}

/// Build a barrel chamber at a given station radius and sector azimuth.
///
/// Local axes in global coordinates: u = +z (precision coordinate),
/// w = -phi_hat (wire), n = +r_hat (stacking normal), a right-handed triple.
pub fn barrel_chamber(
    id: ChamberId,
    radius: f64,
    phi: f64,
    layers_per_multilayer: u8,
    tubes_per_layer: u16,
    tube_length: f64,
) -> Chamber {
    let r_hat = Vector3::new(phi.cos(), phi.sin(), 0.0);
    let phi_hat = Vector3::new(-phi.sin(), phi.cos(), 0.0);
    let basis = Matrix3::from_columns(&[Vector3::z(), -phi_hat, r_hat]);
    Chamber {
        id,
        position: Point3::from(r_hat * radius),
        orientation: Rotation3::from_matrix_unchecked(basis),
        layers_per_multilayer,
        tubes_per_layer,
        tube_pitch: 0.030,
        tube_inner_radius: 0.0146,
        tube_length,
        multilayer_gap: 0.18,
        alignment: AlignmentCorrection::ZERO,
    }
}

/// Default three-station, 16-sector barrel geometry. `scale = 1.0` gives the
/// standard envelope (half-length 22 m, radius 11 m); other scales shrink or
/// grow the macroscopic layout while keeping tube granularity fixed.
pub fn default_geometry(scale: f64) -> ToyGeometry {
    let sectors = 16u16;
    let sector_half_angle = std::f64::consts::PI / sectors as f64;
    let station_specs: [(StationLayer, f64, u8, u16); 3] = [
        (StationLayer::Inner, 4.8 * scale, 3, (384.0 * scale).round() as u16),
        (StationLayer::Middle, 7.2 * scale, 3, (512.0 * scale).round() as u16),
        (StationLayer::Outer, 9.8 * scale, 4, (768.0 * scale).round() as u16),
    ];

    let mut stations = Vec::new();
    for (layer, radius, layers_per_ml, tubes) in station_specs {
        let mut chambers = Vec::new();
        for sector in 0..sectors {
            let phi = 2.0 * std::f64::consts::PI * sector as f64 / sectors as f64;
            // Size the wire so the outermost layer plane still tiles the full
            // circle; inner layers are then over-covered.
            let probe = barrel_chamber(ChamberId { layer, sector }, radius, phi, layers_per_ml, tubes, 1.0);
            let tube_length = 2.0 * (radius + probe.stack_depth() / 2.0 + 0.05) * sector_half_angle.tan();
            chambers.push(barrel_chamber(ChamberId { layer, sector }, radius, phi, layers_per_ml, tubes, tube_length));
        }
        stations.push(Station { layer, radius, chambers });
    }

    let trigger_planes = vec![
        TriggerPlane {
            id: PlaneId(0),
            radius: 7.0 * scale,
            half_length: 7.8 * scale,
            eta_strip_pitch: 0.0346,
            phi_strip_pitch: 0.0346,
            station: StationLayer::Middle,
        },
        TriggerPlane {
            id: PlaneId(1),
            radius: 7.6 * scale,
            half_length: 8.4 * scale,
            eta_strip_pitch: 0.0346,
            phi_strip_pitch: 0.0346,
            station: StationLayer::Middle,
        },
        TriggerPlane {
            id: PlaneId(2),
            radius: 10.15 * scale,
            half_length: 11.2 * scale,
            eta_strip_pitch: 0.0346,
            phi_strip_pitch: 0.0346,
            station: StationLayer::Outer,
        },
    ];

    // Support material sits just inside each station, clear of the tube
    // layer planes and chamber mid-planes.
    let material_slabs = vec![
        MaterialSlab {
            name: "station-inner".into(),
            r_inner: 4.60 * scale,
            r_outer: 4.64 * scale,
            half_length: 5.9 * scale,
            thickness_x0: 0.25,
            eloss_a: 0.03,
            eloss_b: 0.0,
        },
        MaterialSlab {
            name: "station-middle".into(),
            r_inner: 6.91 * scale,
            r_outer: 6.95 * scale,
            half_length: 7.8 * scale,
            thickness_x0: 0.25,
            eloss_a: 0.03,
            eloss_b: 0.0,
        },
        MaterialSlab {
            name: "station-outer".into(),
            r_inner: 9.51 * scale,
            r_outer: 9.55 * scale,
            half_length: 11.6 * scale,
            thickness_x0: 0.25,
            eloss_a: 0.03,
            eloss_b: 0.0,
        },
    ];

    let calorimeter = MaterialSlab {
        name: "calorimeter".into(),
        r_inner: 1.2 * scale,
        r_outer: 4.2 * scale,
        half_length: 6.0 * scale,
        thickness_x0: 110.0,
        eloss_a: 2.5,
        eloss_b: 0.002,
    };

    ToyGeometry {
        stations,
        trigger_planes,
        material_slabs,
        calorimeter,
        envelope: Envelope { half_length: 22.0 * scale, radius: 11.0 * scale },
    }
}
