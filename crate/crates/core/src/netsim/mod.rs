//! Deterministic discrete-event network simulator.

pub mod mobility;
pub mod queue;
pub mod radio;
pub mod rng;
pub mod scenario;
pub mod traffic;
mod world;

pub use radio::{radius_for_degree, Point};
pub use scenario::{LinkFailure, LookupMode, Mobility, Scenario};
pub use world::{run, DeliveryRecord, DropRecord, LookupEnd, LookupRecord, Probe, RunOutput, SimOptions, Simulator};
