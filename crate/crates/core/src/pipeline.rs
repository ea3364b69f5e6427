//! Per-event reconstruction chain: regions of activity, segments, seeding,
//! momentum scan, fit, raw refit, selection, backtracking and combination.
//!
//! Reconstruction is a pure function of (event, geometry, field, RT relation,
//! configuration); events can be processed in parallel and merged by id.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bfield::Field;
use crate::geomodel::{StationLayer, ToyGeometry};
use crate::perigee::{
    backtrack, combine, reject_fakes, simulate_inner_track, CombinedTrack, EnergyLossParam, FakeDecision,
    InnerTrackerModel, SurfaceReport,
};
use crate::rng::stream_rng;
use crate::segments::{find_roas, find_segments, Roa, SegmentCandidate, SegmentConfig};
use crate::toysim::{DigitizationConfig, Event, RtRelation};
use crate::track::{Covariance, TrackParameters};
use crate::trackfit::{
    estimate_momentum, fit_candidate, global_refit, match_segments, select_indices, FitConfig,
    PropagationSettings, RefitConfig, ScanConfig, Status, TrackCandidate,
};

/// Full reconstruction configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoConfig {
    pub roa_half_widths: (f64, f64),
    pub segment: SegmentConfig,
    pub scan: ScanConfig,
    pub fit: FitConfig,
    pub refit: RefitConfig,
    /// Accept refitted candidates with chi2/ndof at or below this.
    pub select_cut: f64,
    pub propagation: PropagationSettings,
    /// Energy-loss parameterization for backtracking; when absent, the
    /// calorimeter description supplies it.
    pub eloss: Option<EnergyLossParam>,
    /// Combine with a simulated inner-tracker measurement.
    pub combine_enabled: bool,
    pub inner_tracker: InnerTrackerModel,
    /// Match chi2 cut for fake rejection (5 degrees of freedom).
    pub fake_cut: f64,
}

impl Default for RecoConfig {
    fn default() -> Self {
        RecoConfig {
            roa_half_widths: (0.2, 0.2),
            segment: SegmentConfig::default(),
            scan: ScanConfig::default(),
            fit: FitConfig::default(),
            refit: RefitConfig::default(),
            select_cut: 5.0,
            propagation: PropagationSettings::default(),
            eloss: None,
            combine_enabled: true,
            inner_tracker: InnerTrackerModel::default(),
            fake_cut: 25.0,
        }
    }
}

/// Wall-clock nanoseconds per reconstruction stage.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub segments_ns: u64,
    pub matching_ns: u64,
    pub fit_ns: u64,
    pub refit_ns: u64,
    pub backtrack_ns: u64,
    pub total_ns: u64,
}

/// An accepted track with its surface reports and optional combination.
#[derive(Debug, Clone)]
pub struct AcceptedTrack {
    /// Index into [`RecoOutput::candidates`].
    pub candidate_index: usize,
    pub report: SurfaceReport,
    pub combined: Option<(CombinedTrack, FakeDecision)>,
}

/// Everything the chain produced for one event.
#[derive(Debug, Clone)]
pub struct RecoOutput {
    pub event_id: u64,
    pub roas: Vec<Roa>,
    pub n_segments: usize,
    /// Segments found per region of activity.
    pub roa_segments: Vec<Vec<SegmentCandidate>>,
    pub candidates: Vec<TrackCandidate>,
    /// Indices of candidates that passed selection, with reports.
    pub accepted: Vec<AcceptedTrack>,
    /// Simulated inner-tracker measurements, one per truth muon.
    pub inner_tracks: Vec<(TrackParameters, Covariance)>,
    pub timings: StageTimings,
}

/// Seed pairs per the strict/fallback chain: outer+middle when both exist,
/// otherwise outer+inner, otherwise middle+inner.
fn seed_pairs(segments: &[SegmentCandidate]) -> Vec<(usize, usize)> {
    let by_layer = |layer: StationLayer| -> Vec<usize> {
        segments.iter().enumerate().filter(|(_, s)| s.station == layer).map(|(i, _)| i).collect()
    };
    let outer = by_layer(StationLayer::Outer);
    let middle = by_layer(StationLayer::Middle);
    let inner = by_layer(StationLayer::Inner);
    let mut pairs = Vec::new();
    for &o in &outer {
        for &m in &middle {
            pairs.push((o, m));
        }
    }
    if pairs.is_empty() {
        for &o in &outer {
            for &i in &inner {
                pairs.push((o, i));
            }
        }
    }
    if pairs.is_empty() {
        for &m in &middle {
            for &i in &inner {
                pairs.push((m, i));
            }
        }
    }
    pairs
}

/// Run the full chain on one event.
pub fn reconstruct_event(
    event: &Event,
    geom: &ToyGeometry,
    field: &dyn Field,
    rt: &RtRelation,
    digi: &DigitizationConfig,
    cfg: &RecoConfig,
) -> RecoOutput {
    let t_start = Instant::now();
    let mut timings = StageTimings::default();

    let t0 = Instant::now();
    let roas = find_roas(&event.trigger_hits, geom, cfg.roa_half_widths);
    let mut roa_segments: Vec<Vec<SegmentCandidate>> = Vec::with_capacity(roas.len());
    for roa in &roas {
        roa_segments.push(find_segments(event, geom, field, rt, digi, &cfg.segment, roa));
    }
    timings.segments_ns = t0.elapsed().as_nanos() as u64;
    let n_segments = roa_segments.iter().map(|v| v.len()).sum();

    let mut candidates: Vec<TrackCandidate> = Vec::new();
    for (roa, segments) in roas.iter().zip(&roa_segments) {
        let t1 = Instant::now();
        let mut matched: Vec<TrackCandidate> = Vec::new();
        for (a, b) in seed_pairs(segments) {
            let (sa, sb) = (&segments[a], &segments[b]);
            let (outer, inner) = if sa.station.index() >= sb.station.index() { (sa, sb) } else { (sb, sa) };
            let estimate = estimate_momentum(outer, inner, geom, field);
            matched.push(match_segments(
                roa,
                (inner, outer),
                &estimate,
                segments,
                geom,
                field,
                &cfg.propagation,
                &cfg.scan,
            ));
        }
        timings.matching_ns += t1.elapsed().as_nanos() as u64;

        for cand in matched {
            let t2 = Instant::now();
            let fitted = fit_candidate(cand, geom, field, &cfg.propagation, &cfg.fit);
            timings.fit_ns += t2.elapsed().as_nanos() as u64;
            let t3 = Instant::now();
            let refitted = if fitted.status == Status::Fitted {
                global_refit(fitted, event, geom, field, rt, digi, &cfg.propagation, &cfg.refit)
            } else {
                fitted
            };
            timings.refit_ns += t3.elapsed().as_nanos() as u64;
            candidates.push(refitted);
        }
    }

    let accepted_indices = select_indices(&candidates, cfg.select_cut);

    let t4 = Instant::now();
    // The material switch governs the backtrack correction as well: a
    // massless reconstruction model must not reinstate calorimeter losses.
    let eloss = cfg.eloss.unwrap_or_else(|| {
        if cfg.propagation.material {
            EnergyLossParam::from_slab(&geom.calorimeter)
        } else {
            EnergyLossParam { a: 0.0, b: 0.0, sigma_frac: 0.0 }
        }
    });

    // Inner-tracker measurements, one per truth muon, deterministic per event.
    let mut inner_tracks = Vec::new();
    if cfg.combine_enabled {
        let mut rng = stream_rng(event.seed, u64::MAX / 3);
        for muon in &event.truth {
            inner_tracks.push(simulate_inner_track(muon, &cfg.inner_tracker, &mut rng));
        }
    }

    let mut accepted = Vec::new();
    for &idx in &accepted_indices {
        let cand = &candidates[idx];
        let report = backtrack(&cand.state, &cand.cov, geom, field, &eloss);
        let combined = if cfg.combine_enabled {
            report.perigee.as_ref().and_then(|(params, cov)| {
                let mut best: Option<(CombinedTrack, FakeDecision)> = None;
                for (inner_index, (ip, ic)) in inner_tracks.iter().enumerate() {
                    if let Ok(mut c) = combine((params, cov), (ip, ic)) {
                        c.muon_index = idx;
                        c.inner_index = inner_index;
                        if best.as_ref().map_or(true, |(b, _)| c.match_chi2 < b.match_chi2) {
                            let decision = reject_fakes(&c, cfg.fake_cut);
                            best = Some((c, decision));
                        }
                    }
                }
                best
            })
        } else {
            None
        };
        accepted.push(AcceptedTrack { candidate_index: idx, report, combined });
    }
    timings.backtrack_ns = t4.elapsed().as_nanos() as u64;
    timings.total_ns = t_start.elapsed().as_nanos() as u64;

    RecoOutput {
        event_id: event.id,
        roas,
        n_segments,
        roa_segments,
        candidates,
        accepted,
        inner_tracks,
        timings,
    }
}
