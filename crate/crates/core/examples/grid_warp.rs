//! Warps a delayed LiDAR map onto the camera frame with ego motion only and
//! with ego motion plus ground-truth object flow, then compares detections.

use bevsync::config::{ExperimentConfig, Pipeline};
use bevsync::experiment::{gt_objects, FramePair, Harness, Models};
use bevsync::scenesim::generate_scene;

fn main() -> bevsync::Result<()> {
    let cfg = ExperimentConfig::default();
    let grid = cfg.grid.spec()?;
    let scene = generate_scene(11, &cfg.scene)?;
    let pair = FramePair::new(
        &scene,
        &grid,
        cfg.stream("camera")?,
        cfg.stream("lidar")?,
        0.5,
        0.5,
        Some(1),
    )?;
    let harness = Harness::from_config(&cfg, Models::default());
    let gts = gt_objects(&scene, pair.t_ref, &grid);

    for p in [Pipeline::Vanilla, Pipeline::Emc, Pipeline::EmcOracle] {
        let out = harness.align(p, &pair)?;
        let dets = harness.detections(&out);
        let mut err = 0.0;
        for g in &gts {
            let c = g.bx.center.translation();
            let nearest = dets.iter().map(|d| d.center.distance(c)).fold(f64::INFINITY, f64::min);
            err += nearest;
        }
        println!(
            "{:<11} {} detections, mean distance to nearest GT center {:.3} m",
            p.name(),
            dets.len(),
            err / gts.len() as f64
        );
    }
    Ok(())
}
