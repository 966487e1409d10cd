//! Non-learned flow baseline: SSD block matching between two noise-free maps.

use bevsync::flowest::{estimate, FlowEstimatorSpec};
use bevsync::geometry::{BevGridSpec, Pose2};
use bevsync::gtflow::{dense_gt_flow, FlowDirection};
use bevsync::scenesim::{rasterize_bev_with, BoxTrack, EgoTrajectory, Modality, RasterOptions, Scene, SceneConfig};

fn main() -> bevsync::Result<()> {
    let grid = BevGridSpec::centered(48, 0.5)?;
    let tracks = vec![
        BoxTrack { id: 0, length: 4.0, width: 1.8, initial: Pose2::new(-4.0, 2.0, 0.0), speed_mps: 3.0, yaw_rate_radps: 0.0 },
        BoxTrack { id: 1, length: 4.4, width: 2.0, initial: Pose2::new(4.0, -4.0, 0.5), speed_mps: 0.0, yaw_rate_radps: 0.0 },
    ];
    let scene = Scene {
        schema_version: bevsync::scenesim::SCENE_SCHEMA_VERSION,
        seed: 0,
        config: SceneConfig::default(),
        ego: EgoTrajectory::stationary(Pose2::IDENTITY),
        tracks: tracks.clone(),
    };
    let opts = RasterOptions::noiseless(Modality::Lidar);
    let f0 = rasterize_bev_with(&scene, 0.0, &grid, &opts)?;
    let f1 = rasterize_bev_with(&scene, 0.5, &grid, &opts)?;

    let est = estimate(&FlowEstimatorSpec::block_matching_default(), &f0, &f1, 0.5, FlowDirection::Forward, None)?;
    let gt = dense_gt_flow(&tracks, 0.0, 0.5, &scene.ego, &grid);
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for idx in grid.cells() {
        let g = gt.get(idx);
        if g.norm() > 0.0 {
            worst = worst.max(est.flow.get(idx).distance(g));
            n += 1;
        }
    }
    println!("moving cells: {n}, worst block-matching error {worst:.3} m");
    let fast = est.velocity.vectors().map(|v| v.norm()).fold(0.0, f64::max);
    println!("largest estimated speed {fast:.2} m/s");
    Ok(())
}
