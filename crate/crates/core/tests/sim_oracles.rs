//! Truth-propagation oracles: analytic helix crossings under a uniform field
//! override, and energy-loss closure at the spectrometer entrance.

use muonpath::bfield::UniformField;
use muonpath::consts::K_BEND;
use muonpath::geomodel::default_geometry;
use muonpath::toysim::{propagate_truth, CrossingKind, MaterialMode, TruthMuon};
use muonpath::TrackState;
use nalgebra::{Point3, Unit, Vector3};

/// Closed-form helix: solves dt/ds = t x Omega, Omega = K qop B.
fn helix_point(start: &TrackState, b: &Vector3<f64>, s: f64) -> Point3<f64> {
    let omega_vec = K_BEND * start.qop * *b;
    let omega = omega_vec.norm();
    let t0 = start.dir.into_inner();
    if omega < 1e-15 {
        return start.pos + t0 * s;
    }
    let axis = omega_vec / omega;
    let a = -omega * s;
    let t_par = axis * t0.dot(&axis);
    let t_perp = t0 - t_par;
    start.pos + t_par * s + t_perp * (a.sin() / -omega) + axis.cross(&t_perp) * ((1.0 - a.cos()) / -omega)
}

#[test]
fn truth_crossings_lie_on_the_analytic_helix() {
    let geom = default_geometry(1.0);
    let field = UniformField(Vector3::new(0.0, 0.0, 0.6));
    let muon = TruthMuon { charge: -1, pt: 30.0, eta: 0.3, phi: 1.1, vertex: Point3::origin() };
    let traj = propagate_truth(&geom, &field, &muon, MaterialMode::Off, 1);
    assert!(!traj.ranged_out);
    assert!(traj.crossings.len() > 15);
    let start = muon.state();
    for c in &traj.crossings {
        let expect = helix_point(&start, &Vector3::new(0.0, 0.0, 0.6), c.path);
        let err = (c.pos - expect).norm();
        assert!(err <= 1e-5, "helix deviation {err} at path {}", c.path);
    }
}

#[test]
fn eloss_closure_at_spectrometer_entrance() {
    // Momentum at the entrance equals initial minus the calorimeter loss,
    // within five sigma of the straggling width.
    let geom = default_geometry(1.0);
    let field = UniformField(Vector3::zeros());
    let p0 = 500.0;
    let muon = TruthMuon { charge: 1, pt: p0, eta: 0.0, phi: 0.5, vertex: Point3::origin() };
    let sigma_frac = 0.1;
    let mean_loss = geom.calorimeter.mean_loss(p0);
    for seed in 0..50u64 {
        let traj = propagate_truth(&geom, &field, &muon, MaterialMode::Full { eloss_sigma_frac: sigma_frac }, seed);
        let entrance = traj
            .crossings
            .iter()
            .find(|c| matches!(c.kind, CrossingKind::SpectrometerEntrance))
            .expect("entrance crossing recorded");
        let delta = p0 - entrance.p;
        assert!(
            (delta - mean_loss).abs() <= 5.0 * sigma_frac * mean_loss,
            "loss {delta} vs mean {mean_loss} (seed {seed})"
        );
    }
}

#[test]
fn scattering_kicks_have_highland_width() {
    let geom = default_geometry(1.0);
    let field = UniformField(Vector3::zeros());
    let muon = TruthMuon { charge: 1, pt: 20.0, eta: 0.0, phi: 0.5, vertex: Point3::origin() };
    let mut angles = Vec::new();
    for seed in 0..400u64 {
        let traj = propagate_truth(&geom, &field, &muon, MaterialMode::Full { eloss_sigma_frac: 0.0 }, seed);
        let entrance = traj.crossings.iter().find(|c| matches!(c.kind, CrossingKind::SpectrometerEntrance));
        let Some(entrance) = entrance else { continue };
        let a = entrance.dir.angle(&muon.direction());
        angles.push(a);
    }
    assert!(angles.len() > 380);
    // Space angle RMS of two independent projections each of width theta0.
    let p_after = 20.0 - geom.calorimeter.mean_loss(20.0);
    let theta0 = muonpath::toysim::highland_theta0(p_after, geom.calorimeter.thickness_x0);
    let rms = (angles.iter().map(|a| a * a).sum::<f64>() / angles.len() as f64).sqrt();
    let expect = theta0 * 2f64.sqrt();
    assert!(
        (rms - expect).abs() / expect < 0.15,
        "scattering rms {rms} vs expected {expect}"
    );
}

#[test]
fn boundary_stepper_lands_exactly_on_field_edges() {
    // The propagation lands on field discontinuity surfaces; the recorded
    // trajectory stays smooth across them (no kink artifacts in position).
    let geom = default_geometry(1.0);
    let field = muonpath::bfield::default_toroid(1.0);
    let muon = TruthMuon { charge: 1, pt: 8.0, eta: 0.2, phi: 0.3, vertex: Point3::origin() };
    let traj = propagate_truth(&geom, &field, &muon, MaterialMode::Off, 9);
    assert!(!traj.ranged_out);
    // All tube-layer crossings sit on their layer planes.
    for c in &traj.crossings {
        if let CrossingKind::TubeLayer { chamber, multilayer, layer } = &c.kind {
            let ch = geom.chamber(*chamber).unwrap();
            let plane_point = ch.local_to_global(&Vector3::new(0.0, 0.0, ch.layer_offset(*multilayer, *layer)));
            let normal = Unit::new_normalize(ch.axis_n());
            let dist = (c.pos - plane_point).dot(&normal);
            assert!(dist.abs() < 1e-9, "crossing off its plane by {dist}");
        }
    }
}
