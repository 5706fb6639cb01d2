//! Scan and pose input: KITTI files, sequences with loop groundtruth, and
//! synthetic scenes.

pub mod kitti;
pub mod sequence;
pub mod synthetic;

pub use kitti::{read_poses, read_scan, write_poses, write_scan};
pub use sequence::{build_loop_groundtruth, LoopGroundtruth, ScanHandle, Sequence};
pub use synthetic::{
    generate_scene_cloud, generate_synthetic_pair, generate_trajectory, PerturbationSpec, ScanKind, SceneSpec,
    SyntheticPair, SyntheticScene, SyntheticTrajectory, TrajectorySpec,
};
