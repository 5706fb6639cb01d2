//! Grid search over the UOT regularization on synthetic yaw-170° pairs, with
//! full overlap and with a 90° sector missing from each side.
//!
//! Run with `cargo run --release -p loopreg --example uot_grid [pairs]`.
//! Prints success count and mean errors over successes for each (λ, ρ).

use loopreg::features::{extract_features, FeatureSpec, KeypointFeatures};
use loopreg::geom::{pose_error, PointCloud};
use loopreg::ingest::synthetic::{
    generate_scene_cloud, generate_synthetic_pair, PerturbationSpec, SceneSpec, SyntheticScene,
};
use loopreg::registration::success_check;
use loopreg::sampling::{farthest_point_sampling, voxel_downsample, VoxelGridSpec};
use loopreg::transport::{estimate_pose_uot, UotParams};

const KEYPOINTS: usize = 1024;

fn features(cloud: &PointCloud<f64>, spec: &FeatureSpec<f64>) -> KeypointFeatures<f64> {
    let voxels = voxel_downsample(cloud, &VoxelGridSpec::default()).expect("non-empty cloud");
    let keypoints = farthest_point_sampling(&voxels, KEYPOINTS, 0).expect("enough points");
    extract_features(&voxels, &keypoints, spec).expect("valid spec")
}

fn main() {
    let pairs: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(12);
    let spec = FeatureSpec::default();
    let make = |sector_width_deg: f64| -> Vec<_> {
        (0..pairs)
            .map(|seed| {
                let scene = SyntheticScene {
                    base_cloud: generate_scene_cloud(&SceneSpec::default(), seed).expect("scene"),
                    perturbation: PerturbationSpec {
                        min_yaw_deg: 170.0,
                        max_yaw_deg: 170.0,
                        sector_width_deg,
                        ..PerturbationSpec::default()
                    },
                };
                let pair = generate_synthetic_pair(&scene, 1000 + seed).expect("pair");
                (features(&pair.source, &spec), features(&pair.target, &spec), pair.truth)
            })
            .collect()
    };
    let sets = [("full", make(0.0)), ("sector", make(90.0))];

    println!("set lambda rho success te_mean re_mean");
    for (name, data) in &sets {
        for lambda in [0.0003, 0.0005, 0.001, 0.003, 0.01, 0.03] {
            for rho in [0.00001, 0.00003, 0.0001, 0.001, 0.03, 1.0] {
                let params = UotParams {
                    lambda,
                    rho,
                    iterations: 5,
                };
                let (mut ok, mut te, mut re) = (0, 0.0, 0.0);
                for (a, b, truth) in data {
                    let Ok((pose, _)) = estimate_pose_uot(a, b, &params) else {
                        continue;
                    };
                    let err = pose_error(&pose, truth);
                    if success_check(&err) {
                        ok += 1;
                        te += err.translation_error;
                        re += err.rotation_error;
                    }
                }
                let n = f64::from(ok.max(1));
                println!("{name} {lambda} {rho} {ok}/{pairs} {:.3} {:.2}", te / n, re / n);
            }
        }
    }
}
