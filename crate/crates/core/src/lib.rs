//! Desk-scale muon spectrometer toolkit: a three-station drift-tube barrel in a
//! toroidal field, with truth simulation, digitization, trigger-seeded pattern
//! recognition, momentum-scan track fitting, beam-line backtracking and
//! combination with an inner-tracker measurement.
//!
//! The crate is organized along the processing chain:
//!
//! * [`geomodel`] — immutable detector description (tubes, trigger planes, material),
//! * [`bfield`] — field service `f(x,y,z) -> (B, grad B)`: analytic toroid and gridded map,
//! * [`toysim`] — truth propagation, drift-time digitization and its inverse corrections,
//! * [`segments`] — regions of activity and straight-segment finding per station,
//! * [`trackfit`] — field propagation with transport Jacobians, momentum scan, global fits,
//! * [`perigee`] — energy-loss backtracking to the beam line and covariance-weighted combination,
//! * [`pipeline`] — per-event orchestration of the full chain.
//!
//! All lengths are in meters, angles in radians, momenta in GeV, fields in tesla
//! and times in nanoseconds.

pub mod bfield;
pub mod consts;
pub mod geomodel;
pub mod perigee;
pub mod pipeline;
pub mod propagation;
pub mod rng;
pub mod segments;
pub mod toysim;
pub mod track;
pub mod trackfit;

pub use bfield::{Field, FieldMap, FieldSample, ToroidModel, UniformField};
pub use geomodel::{ChamberId, StationLayer, ToyGeometry, TubeId};
pub use segments::{Roa, SegmentCandidate};
pub use toysim::{DigitizationConfig, DriftHit, Event, RtRelation, TriggerHit, TruthMuon};
pub use track::{Covariance, Surface, TrackParameters, TrackState};
pub use trackfit::TrackCandidate;
