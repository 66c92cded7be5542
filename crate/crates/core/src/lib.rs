//! Adaptive distributed linear estimation over randomly failing networks.
//!
//! Agents observe a static parameter through local linear sensors, learn
//! their optimal innovation gains online, and fuse estimates over a random
//! communication graph. The [`harness`] module runs Monte Carlo experiments
//! that compare the agents against the centralized best linear estimator.

pub mod config;
pub mod estimator;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod network;
pub mod output;
pub mod scalar;
pub mod schedule;
pub mod stats;

pub use estimator::{AgentState, GainSet, NetworkState, Simulator};
pub use harness::{ExperimentConfig, ExperimentReport, TrialMetrics};
pub use model::{CentralizedSummary, ModelError, NoiseFamily, ObservationModel};
pub use network::{Graph, Laplacian, LinkLaw, TopologyModel};
pub use scalar::Scalar;
pub use schedule::{Regime, WeightSchedule};

pub type ObservationModelF64 = ObservationModel<f64>;
pub type ObservationModelF32 = ObservationModel<f32>;
pub type WeightScheduleF64 = WeightSchedule<f64>;
pub type WeightScheduleF32 = WeightSchedule<f32>;
pub type NetworkStateF64 = NetworkState<f64>;
pub type SimulatorF64<'a> = Simulator<'a, f64>;
pub type ExperimentConfigF64 = ExperimentConfig<f64>;
