//! Deterministic urban world, LiDAR and detection-oracle simulator.

pub mod lidar;
pub mod oracle;
pub mod scenario;
pub mod world;

pub use lidar::{raycast, simulate_scan, HitTarget, LabeledScan, LidarConfig};
pub use oracle::{oracle_detect, OracleConfig, OracleDetection, OracleState};
pub use scenario::{simulate, AgentPlan, AgentRecording, Route, RoutePlan, ScanRecord, ScenarioConfig, Simulation};
pub use world::{generate_world, DynamicActor, Intersection, Prism, RoadSegment, StaticObject, World, WorldParams};
