//! Motion planning engine for serial-chain robots with extended degrees of
//! freedom: kinematics, sphere-based collision checking, multi-seed
//! trajectory optimization, receding-horizon replanning, and a pick-and-place
//! benchmark harness.

pub mod collision;
pub mod costs;
pub mod geometry;
pub mod model;
pub mod mpc;
pub mod sim;
pub mod solver;
pub mod wire;
pub mod world;

pub use geometry::Pose;
pub use model::{JointConfig, RobotModel};
pub use world::WorldScene;
