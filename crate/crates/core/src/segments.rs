//! Regions of activity from trigger coincidences and local straight-segment
//! reconstruction per station.
//!
//! Segments are fitted in the chamber bending plane `(u, n)`: wires are points
//! `(u_i, n_i)` with drift radii `r_i`, a segment is a common tangent line.
//! The left-right ambiguity (the sign of each drift radius) is resolved by
//! seeding candidate lines from the four common tangents of hit pairs across
//! multilayers, iterating sign reassignment, and polishing to single-flip
//! local optimality. Delta rays and background are absorbed by dropping the
//! worst hit while the fit quality is poor.

use nalgebra::{Matrix2, Point3, Vector2};
use serde::{Deserialize, Serialize};

use crate::bfield::Field;
use crate::geomodel::{wrap_angle, ChamberId, StationLayer, ToyGeometry};
use crate::toysim::{correct_drift_time, DigitizationConfig, Event, RtRelation, TriggerHit};

/// Region of activity: an (eta, phi) window seeded by trigger coincidences.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Roa {
    pub eta_center: f64,
    pub phi_center: f64,
    pub half_width_eta: f64,
    pub half_width_phi: f64,
}

impl Roa {
    /// The standard 0.4 x 0.4 window.
    pub fn new(eta_center: f64, phi_center: f64) -> Self {
        Roa { eta_center, phi_center, half_width_eta: 0.2, half_width_phi: 0.2 }
    }

    pub fn contains(&self, eta: f64, phi: f64) -> bool {
        (eta - self.eta_center).abs() <= self.half_width_eta
            && wrap_angle(phi - self.phi_center).abs() <= self.half_width_phi
    }
}

/// Build regions of activity from trigger hits: one window per cluster of
/// strip coincidences (hits carrying both coordinates). Overlapping windows
/// are merged by averaging their centers. Output is sorted by (eta, phi).
pub fn find_roas(trigger_hits: &[TriggerHit], geom: &ToyGeometry, half_widths: (f64, f64)) -> Vec<Roa> {
    let mut points: Vec<(f64, f64)> = Vec::new();
    for hit in trigger_hits {
        let (Some(eta_strip), Some(phi_strip)) = (hit.eta_strip, hit.phi_strip) else { continue };
        let Some(plane) = geom.trigger_plane(hit.plane) else { continue };
        if eta_strip >= plane.n_eta_strips() || phi_strip >= plane.n_phi_strips() {
            continue;
        }
        let z = plane.eta_strip_z(eta_strip);
        let eta = (z / plane.radius).asinh();
        let phi = plane.phi_strip_phi(phi_strip);
        points.push((eta, phi));
    }
    if points.is_empty() {
        return Vec::new();
    }

    // Union-find over points whose windows overlap.
    let n = points.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let root = find(parent, parent[i]);
            parent[i] = root;
        }
        parent[i]
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let overlap = (points[i].0 - points[j].0).abs() <= 2.0 * half_widths.0
                && wrap_angle(points[i].1 - points[j].1).abs() <= 2.0 * half_widths.1;
            if overlap {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri] = rj;
                }
            }
        }
    }
    let mut clusters: std::collections::BTreeMap<usize, Vec<usize>> = std::collections::BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        clusters.entry(root).or_default().push(i);
    }

    let mut out: Vec<Roa> = clusters
        .values()
        .map(|members| {
            let eta = members.iter().map(|&i| points[i].0).sum::<f64>() / members.len() as f64;
            // Circular mean for phi, anchored at the first member.
            let phi0 = points[members[0]].1;
            let dphi =
                members.iter().map(|&i| wrap_angle(points[i].1 - phi0)).sum::<f64>() / members.len() as f64;
            Roa {
                eta_center: eta,
                phi_center: wrap_angle(phi0 + dphi),
                half_width_eta: half_widths.0,
                half_width_phi: half_widths.1,
            }
        })
        .collect();
    out.sort_by(|a, b| (a.eta_center, a.phi_center).partial_cmp(&(b.eta_center, b.phi_center)).unwrap());
    out
}

/// One drift hit attached to a segment, with its resolved left-right sign.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SegmentHit {
    /// Index into the event's drift hit list.
    pub hit_index: usize,
    pub tube: crate::geomodel::TubeId,
    pub sign: i8,
    /// Corrected drift radius, meters.
    pub radius: f64,
    /// Fit residual, meters.
    pub residual: f64,
}

/// A local straight track segment in one chamber's bending plane.
#[derive(Debug, Clone)]
pub struct SegmentCandidate {
    pub chamber: ChamberId,
    pub station: StationLayer,
    /// Reference point in the bending plane: (u at n = 0, 0).
    pub point: Vector2<f64>,
    /// Unit direction in (u, n), with positive n (outgoing).
    pub direction: Vector2<f64>,
    pub chi2: f64,
    pub ndof: usize,
    pub hits: Vec<SegmentHit>,
    /// Along-wire coordinate from trigger strips, meters (chamber frame).
    pub second_coordinate: f64,
    pub second_coordinate_sigma: f64,
    /// Covariance of (u0, alpha) where alpha = atan2(du, dn).
    pub cov_u_alpha: Matrix2<f64>,
}

impl SegmentCandidate {
    /// Bending-plane inclination angle.
    pub fn alpha(&self) -> f64 {
        self.direction.x.atan2(self.direction.y)
    }
}

/// Signed distance from the line `(point, dir)` to a wire position, in the
/// bending plane. The sign convention pairs with [`SegmentHit::sign`].
pub fn signed_distance(point: &Vector2<f64>, dir: &Vector2<f64>, wire: &Vector2<f64>) -> f64 {
    let normal = Vector2::new(-dir.y, dir.x);
    normal.dot(&(wire - point))
}

/// Chi-square of a line against signed drift radii:
/// `sum ((signed_distance - sign * radius) / sigma)^2`, ndof = n - 2.
pub fn segment_chi2(
    point: &Vector2<f64>,
    dir: &Vector2<f64>,
    hits: &[(Vector2<f64>, i8, f64)],
    sigma: f64,
) -> (f64, i64) {
    let chi2 = hits
        .iter()
        .map(|(wire, sign, radius)| {
            let res = signed_distance(point, dir, wire) - *sign as f64 * radius;
            (res / sigma).powi(2)
        })
        .sum();
    (chi2, hits.len() as i64 - 2)
}

/// Segment-finding configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentConfig {
    /// Drop the worst hit while chi2/ndof exceeds this.
    pub outlier_cut: f64,
    /// Minimum hits for an accepted segment.
    pub min_hits: usize,
    /// Keep at most this many candidates per chamber after deduplication.
    pub max_candidates_per_chamber: usize,
    /// Assumed single-tube resolution for the fit; `None` takes the
    /// digitization value, falling back to the nominal 80 um when the
    /// campaign smears nothing.
    pub sigma: Option<f64>,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig { outlier_cut: 10.0, min_hits: 4, max_candidates_per_chamber: 8, sigma: None }
    }
}

/// Working tube resolution: configured value, else the digitization truth,
/// else the nominal 80 um.
pub fn assumed_tube_sigma(cfg_sigma: Option<f64>, digi: &DigitizationConfig) -> f64 {
    cfg_sigma.unwrap_or(if digi.tube_resolution > 0.0 { digi.tube_resolution } else { 80e-6 })
}

/// Internal working hit for the 2D fit.
#[derive(Clone, Copy)]
struct WorkHit {
    hit_index: usize,
    wire: Vector2<f64>,
    radius: f64,
    global_layer: u8,
}

/// Line in normal form: unit normal angle psi and offset c,
/// `cos(psi) u + sin(psi) n = c`.
#[derive(Clone, Copy, Debug)]
struct NormalLine {
    psi: f64,
    c: f64,
}

impl NormalLine {
    fn dist(&self, w: &Vector2<f64>) -> f64 {
        self.psi.cos() * w.x + self.psi.sin() * w.y - self.c
    }
}

/// Least-squares fit of the line for a fixed sign assignment; returns the
/// line and chi2. Gauss-Newton on (psi, c) with backtracking step halving so
/// the iteration is monotone even from poor starts.
fn fit_fixed_signs(hits: &[WorkHit], signs: &[i8], sigma: f64, start: NormalLine) -> (NormalLine, f64) {
    let w = 1.0 / (sigma * sigma);
    let chi2_of = |line: &NormalLine| -> f64 {
        hits.iter()
            .zip(signs)
            .map(|(h, s)| {
                let e = line.dist(&h.wire) - *s as f64 * h.radius;
                w * e * e
            })
            .sum()
    };
    let mut line = start;
    let mut chi2 = chi2_of(&line);
    for _ in 0..60 {
        let (mut h_pp, mut h_pc, mut h_cc) = (0.0, 0.0, 0.0);
        let (mut g_p, mut g_c) = (0.0, 0.0);
        let (s_psi, c_psi) = line.psi.sin_cos();
        for (hit, sign) in hits.iter().zip(signs) {
            let e = c_psi * hit.wire.x + s_psi * hit.wire.y - line.c - *sign as f64 * hit.radius;
            let de_dpsi = -s_psi * hit.wire.x + c_psi * hit.wire.y;
            h_pp += w * de_dpsi * de_dpsi;
            h_pc += w * de_dpsi * -1.0;
            h_cc += w;
            g_p += w * de_dpsi * e;
            g_c += w * -e;
        }
        let det = h_pp * h_cc - h_pc * h_pc;
        if det.abs() < 1e-30 {
            break;
        }
        let mut dpsi = -(h_cc * g_p - h_pc * g_c) / det;
        let mut dc = -(h_pp * g_c - h_pc * g_p) / det;
        let mut accepted = false;
        for _ in 0..10 {
            let trial = NormalLine { psi: line.psi + dpsi, c: line.c + dc };
            let trial_chi2 = chi2_of(&trial);
            if trial_chi2 <= chi2 {
                let improvement = chi2 - trial_chi2;
                line = trial;
                chi2 = trial_chi2;
                accepted = true;
                if improvement < 1e-14 * (1.0 + chi2) {
                    return (line, chi2);
                }
                break;
            }
            dpsi *= 0.5;
            dc *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (line, chi2)
}

/// Fit with sign reassignment until stable, then polish to single-flip local
/// optimality. Returns (line, signs, chi2).
fn fit_with_ambiguity(hits: &[WorkHit], seed_signs: Vec<i8>, sigma: f64, start: NormalLine) -> (NormalLine, Vec<i8>, f64) {
    let mut signs = seed_signs;
    let (mut line, mut chi2) = fit_fixed_signs(hits, &signs, sigma, start);
    for _ in 0..8 {
        let new_signs: Vec<i8> =
            hits.iter().map(|h| if line.dist(&h.wire) >= 0.0 { 1 } else { -1 }).collect();
        if new_signs == signs {
            break;
        }
        signs = new_signs;
        let r = fit_fixed_signs(hits, &signs, sigma, line);
        line = r.0;
        chi2 = r.1;
    }
    // Single-flip polish. The flipped optimum can sit outside the Gauss-
    // Newton basin of the current line, so each flip is refit from several
    // starts: the current line, an offset-shifted line putting the flipped
    // hit on its other side, and the tangents of the flipped hit with every
    // partner hit. These are cheap 2x2 fits.
    let mut improved = true;
    let mut rounds = 0;
    while improved && rounds < 64 {
        improved = false;
        rounds += 1;
        for k in 0..hits.len() {
            let mut trial = signs.clone();
            trial[k] = -trial[k];
            let mut starts = vec![
                line,
                NormalLine { psi: line.psi, c: line.c - 2.0 * trial[k] as f64 * hits[k].radius },
            ];
            for j in 0..hits.len() {
                if j != k && hits[j].global_layer != hits[k].global_layer {
                    for t in pair_tangents(&hits[k], &hits[j]) {
                        // Both normal orientations: a fixed sign pattern pins
                        // the orientation, and each tangent comes out in only
                        // one of them.
                        starts.push(t);
                        starts.push(NormalLine { psi: t.psi + std::f64::consts::PI, c: -t.c });
                    }
                }
            }
            let mut best: Option<(NormalLine, f64)> = None;
            for start in starts {
                let (l2, c2) = fit_fixed_signs(hits, &trial, sigma, start);
                if best.map_or(true, |(_, c)| c2 < c) {
                    best = Some((l2, c2));
                }
            }
            if let Some((l_best, c_best)) = best {
                if c_best < chi2 - 1e-12 {
                    signs = trial;
                    line = l_best;
                    chi2 = c_best;
                    improved = true;
                }
            }
        }
    }
    (line, signs, chi2)
}

/// The four common tangents of two drift circles, as normal-form lines.
///
/// A tangent with sides (s_a, s_b) satisfies `dist(a) = s_a r_a` and
/// `dist(b) = s_b r_b`, hence `n_hat . (b - a) = s_b r_b - s_a r_a`. The
/// opposite-sign pair on the other acos branch yields the same line, so four
/// sign pairs on one branch enumerate all four tangents.
fn pair_tangents(a: &WorkHit, b: &WorkHit) -> Vec<NormalLine> {
    let delta = b.wire - a.wire;
    let len = delta.norm();
    if len < 1e-9 {
        return Vec::new();
    }
    let base = delta.y.atan2(delta.x);
    let mut out = Vec::new();
    for (sa, sb) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
        let q = (sb * b.radius - sa * a.radius) / len;
        if q.abs() > 1.0 {
            continue;
        }
        let psi = base + q.acos();
        let c = psi.cos() * a.wire.x + psi.sin() * a.wire.y - sa * a.radius;
        out.push(NormalLine { psi, c });
    }
    out
}

/// All segment candidates in the chambers intersecting a region of activity.
pub fn find_segments(
    event: &Event,
    geom: &ToyGeometry,
    field: &dyn Field,
    rt: &RtRelation,
    digi: &DigitizationConfig,
    cfg: &SegmentConfig,
    roa: &Roa,
) -> Vec<SegmentCandidate> {
    let mut out = Vec::new();
    for chamber_id in geom.chambers_in_roa(roa) {
        let Ok(chamber) = geom.chamber(chamber_id) else { continue };

        // Corrected drift radii with a region-level hypothesis: the wire
        // itself, shifted along the wire to the window center azimuth.
        let radius_c = chamber.position.coords.xy().norm();
        let w_roa = {
            let q = Point3::new(radius_c * roa.phi_center.cos(), radius_c * roa.phi_center.sin(), 0.0);
            chamber.axis_w().dot(&(q - chamber.position))
        };
        let mut hits: Vec<WorkHit> = Vec::new();
        for (hit_index, hit) in event.drift_hits.iter().enumerate() {
            if hit.tube.chamber != chamber_id {
                continue;
            }
            let Ok((wp, _)) = geom.tube_line(hit.tube, true) else { continue };
            let hyp = wp + chamber.axis_w() * w_roa;
            let (t_corr, _) = correct_drift_time(geom, field, digi, hit, &hyp);
            let radius = rt.radius(t_corr);
            let local = chamber.global_to_local(&wp);
            hits.push(WorkHit {
                hit_index,
                wire: Vector2::new(local.x, local.z),
                radius,
                global_layer: hit.tube.multilayer * chamber.layers_per_multilayer + hit.tube.layer,
            });
        }
        if hits.len() < cfg.min_hits {
            continue;
        }

        // Second coordinate from phi strips of this station inside the window.
        let mut w_sum = 0.0;
        let mut w_n = 0usize;
        for th in &event.trigger_hits {
            let Some(phi_strip) = th.phi_strip else { continue };
            let Some(plane) = geom.trigger_plane(th.plane) else { continue };
            if plane.station != chamber_id.layer || phi_strip >= plane.n_phi_strips() {
                continue;
            }
            let phi = plane.phi_strip_phi(phi_strip);
            if wrap_angle(phi - roa.phi_center).abs() > roa.half_width_phi {
                continue;
            }
            let q = Point3::new(radius_c * phi.cos(), radius_c * phi.sin(), 0.0);
            w_sum += chamber.axis_w().dot(&(q - chamber.position));
            w_n += 1;
        }
        let (second_coordinate, second_sigma) = if w_n > 0 {
            (w_sum / w_n as f64, digi.trigger_accuracy / (w_n as f64).sqrt())
        } else {
            (w_roa, roa.half_width_phi * radius_c / 3f64.sqrt())
        };

        let sigma = assumed_tube_sigma(cfg.sigma, digi);
        let mut candidates: Vec<(Vec<usize>, Vec<i8>, NormalLine, f64)> = Vec::new();
        let mut seen: std::collections::BTreeSet<Vec<(usize, i8)>> = std::collections::BTreeSet::new();

        for i in 0..hits.len() {
            for j in (i + 1)..hits.len() {
                if hits[i].global_layer == hits[j].global_layer {
                    continue;
                }
                for tangent in pair_tangents(&hits[i], &hits[j]) {
                    // Work on the full hit set seeded by this tangent.
                    let mut active: Vec<usize> = (0..hits.len()).collect();
                    let mut work: Vec<WorkHit> = hits.clone();
                    let seed_signs: Vec<i8> =
                        work.iter().map(|h| if tangent.dist(&h.wire) >= 0.0 { 1 } else { -1 }).collect();
                    let (mut line, mut signs, mut chi2) = fit_with_ambiguity(&work, seed_signs, sigma, tangent);

                    // Outlier pruning, worst hit first.
                    loop {
                        let ndof = work.len() as f64 - 2.0;
                        if ndof < 1.0 || chi2 / ndof <= cfg.outlier_cut || work.len() <= cfg.min_hits {
                            break;
                        }
                        let worst = work
                            .iter()
                            .zip(&signs)
                            .enumerate()
                            .max_by(|(_, (h, s)), (_, (h2, s2))| {
                                let e1 = (line.dist(&h.wire) - **s as f64 * h.radius).abs();
                                let e2 = (line.dist(&h2.wire) - **s2 as f64 * h2.radius).abs();
                                e1.total_cmp(&e2)
                            })
                            .map(|(k, _)| k)
                            .unwrap();
                        work.remove(worst);
                        active.remove(worst);
                        signs.remove(worst);
                        let r = fit_with_ambiguity(&work, signs.clone(), sigma, line);
                        line = r.0;
                        signs = r.1;
                        chi2 = r.2;
                    }
                    let ndof = work.len() as f64 - 2.0;
                    if work.len() < cfg.min_hits || ndof < 1.0 || chi2 / ndof > cfg.outlier_cut {
                        continue;
                    }
                    // Canonical orientation: (psi, c, signs) and
                    // (psi + pi, -c, -signs) describe the same solution.
                    if line.psi.cos() < 0.0 {
                        line = NormalLine { psi: wrap_angle(line.psi + std::f64::consts::PI), c: -line.c };
                        for s in &mut signs {
                            *s = -*s;
                        }
                    } else {
                        line.psi = wrap_angle(line.psi);
                    }
                    let key: Vec<(usize, i8)> =
                        active.iter().zip(&signs).map(|(a, s)| (*a, *s)).collect();
                    if seen.insert(key) {
                        candidates.push((active, signs, line, chi2));
                    }
                }
            }
        }

        // Deduplicate: among candidates sharing > 50% of their resolved
        // (hit, side) assignments keep the best one, ranking by hit count
        // first so a subset solution never shadows the full one, then by
        // chi2. Mirror solutions share hits but not sides and survive as
        // distinct hypotheses; the momentum scan and global refit
        // disambiguate them later.
        candidates.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.3.total_cmp(&b.3)));
        let mut kept: Vec<(Vec<usize>, Vec<i8>, NormalLine, f64)> = Vec::new();
        'cand: for cand in candidates {
            let cand_keys: Vec<(usize, i8)> = cand.0.iter().copied().zip(cand.1.iter().copied()).collect();
            for k in &kept {
                let shared = k
                    .0
                    .iter()
                    .copied()
                    .zip(k.1.iter().copied())
                    .filter(|pair| cand_keys.contains(pair))
                    .count();
                if 2 * shared > cand.0.len().min(k.0.len()) {
                    continue 'cand;
                }
            }
            kept.push(cand);
            if kept.len() >= cfg.max_candidates_per_chamber {
                break;
            }
        }

        for (active, _signs, line, chi2) in kept {
            // Normalize so the direction has positive n component.
            let mut psi = line.psi;
            let mut c = line.c;
            if psi.cos() < 0.0 {
                psi += std::f64::consts::PI;
                c = -c;
            }
            let dir = Vector2::new(-psi.sin(), psi.cos());
            let u0 = c / psi.cos();
            let point = Vector2::new(u0, 0.0);

            let seg_hits: Vec<SegmentHit> = active
                .iter()
                .map(|&k| {
                    let h = &hits[k];
                    let d = signed_distance(&point, &dir, &h.wire);
                    let sign = if d >= 0.0 { 1i8 } else { -1 };
                    SegmentHit {
                        hit_index: h.hit_index,
                        tube: event.drift_hits[h.hit_index].tube,
                        sign,
                        radius: h.radius,
                        residual: d - sign as f64 * h.radius,
                    }
                })
                .collect();

            // Covariance of (psi, c) from the normal equations, then mapped to
            // (u0, alpha).
            let w = 1.0 / (sigma * sigma);
            let (s_psi, c_psi) = psi.sin_cos();
            let (mut h_pp, mut h_pc, mut h_cc) = (0.0, 0.0, 0.0);
            for &k in &active {
                let de_dpsi = -s_psi * hits[k].wire.x + c_psi * hits[k].wire.y;
                h_pp += w * de_dpsi * de_dpsi;
                h_pc += w * de_dpsi * -1.0;
                h_cc += w;
            }
            let det = (h_pp * h_cc - h_pc * h_pc).max(1e-300);
            let cov_psi_c = Matrix2::new(h_cc / det, -h_pc / det, -h_pc / det, h_pp / det);
            // u0 = c / cos(psi), alpha = -psi (up to orientation).
            let du0_dpsi = c * s_psi / (c_psi * c_psi);
            let du0_dc = 1.0 / c_psi;
            let a = Matrix2::new(du0_dpsi, du0_dc, -1.0, 0.0);
            let cov_u_alpha = a * cov_psi_c * a.transpose();

            let n_hits = seg_hits.len();
            out.push(SegmentCandidate {
                chamber: chamber_id,
                station: chamber_id.layer,
                point,
                direction: dir,
                chi2,
                ndof: n_hits - 2,
                hits: seg_hits,
                second_coordinate,
                second_coordinate_sigma: second_sigma,
                cov_u_alpha,
            });
        }
    }
    out
}
