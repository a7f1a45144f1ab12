//! Experiment plumbing: normalization, point files, synthetic problems,
//! metrics, the ICP baseline and benchmark sweeps.

pub mod bench;
pub mod icp;
pub mod io;
pub mod metrics;
pub mod normalize;
pub mod shapes;
pub mod synth;

pub use bench::{run_benchmark, Axis, BenchGrid, BenchmarkReport, Shape};
pub use icp::icp_baseline;
pub use io::{load_pointset, parse_pointset, save_pointset};
pub use metrics::{correspondence_mse, evaluate, rotation_error};
pub use normalize::{denormalize_transform, normalize, NormalizationParams};
pub use synth::{synth_pair, DegradationSpec, GroundTruth, MissingRegion, SynthPair, TransformKind};
