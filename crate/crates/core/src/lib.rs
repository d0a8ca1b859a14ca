//! RCM-constrained visual-inertial odometry for laparoscopes: Lie-group
//! tools, sensor models, the tracking loop, windowed optimization, a
//! synthetic scene generator and evaluation harnesses.

pub mod camera;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod odometry;
pub mod optimizer;
pub mod residuals;
pub mod sensors;
pub mod simulator;
pub mod tracks;

pub use camera::{CameraIntrinsics, Lens, PixelPoint, StereoRig};
pub use geometry::{Frame, Rotation, Transform, Twist, Vec3};
pub use odometry::{KeyframeGraph, OdometryConfig, RunOutput, VariantConfig};
pub use optimizer::{OptimizerConfig, SolveReport, Weights};
pub use residuals::{ResidualKind, ResidualStatistics};
pub use sensors::{ImuCalibration, ImuSample, TimedPose, WorldReferences};
pub use simulator::{Scenario, Simulation};
pub use tracks::{TrackFrame, TrackPoint};
