//! Property tests over random inputs.

use muonpath::geomodel::{default_geometry, parse_geometry};
use muonpath::segments::Roa;
use muonpath::toysim::RtRelation;
use nalgebra::Vector3;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn geometry_serialization_round_trips(
        tx in -4e-3..4e-3f64,
        ty in -4e-3..4e-3f64,
        rz in -4e-3..4e-3f64,
        chamber_pick in 0usize..48,
    ) {
        let mut geom = default_geometry(1.0);
        let station = chamber_pick / 16;
        let sector = chamber_pick % 16;
        geom.stations[station].chambers[sector].alignment.translation = Vector3::new(tx, ty, 0.0);
        geom.stations[station].chambers[sector].alignment.rotation = Vector3::new(0.0, 0.0, rz);
        let text = geom.to_json();
        let back = parse_geometry(&text).expect("round trip parses");
        prop_assert_eq!(back.to_json(), text);
    }

    #[test]
    fn rt_relation_round_trips(knots in proptest::collection::vec((1e-2..50.0f64, 1e-5..2e-3f64), 1..12)) {
        // Build a strictly monotone table from positive increments.
        let mut t = 0.0;
        let mut r = 0.0;
        let mut table = vec![(0.0, 0.0)];
        for (dt, dr) in knots {
            t += dt;
            r += dr;
            table.push((t, r));
        }
        let rt = RtRelation { knots: table };
        rt.validate().unwrap();
        for k in 0..50 {
            let radius = rt.max_radius() * (k as f64 + 0.5) / 50.0;
            let back = rt.radius(rt.time(radius));
            prop_assert!((back - radius).abs() <= 1e-12 * (1.0 + radius));
        }
    }

    #[test]
    fn enlarging_a_window_never_removes_chambers(
        eta in -1.0..1.0f64,
        phi in -3.1..3.1f64,
        half_eta in 0.01..0.5f64,
        half_phi in 0.01..0.5f64,
        grow in 1.0..3.0f64,
    ) {
        let geom = default_geometry(1.0);
        let small = Roa { eta_center: eta, phi_center: phi, half_width_eta: half_eta, half_width_phi: half_phi };
        let big = Roa {
            half_width_eta: half_eta * grow,
            half_width_phi: (half_phi * grow).min(std::f64::consts::PI),
            ..small
        };
        let small_set = geom.chambers_in_roa(&small);
        let big_set = geom.chambers_in_roa(&big);
        for id in &small_set {
            prop_assert!(big_set.contains(id), "chamber {id} lost when enlarging the window");
        }
    }
}
