//! Trains a small velocity estimator and reports its flow loss against the
//! zero-flow baseline on held-out scenes.
//!
//! Pass an output path to keep the trained parameters.

use bevsync::config::ExperimentConfig;
use bevsync::experiment::{build_training_set, held_out_samples, train_kind};
use bevsync::flowest::{evaluate_loss, flow_loss, EstimatorKind};
use bevsync::gtflow::{FlowDirection, FlowField, FlowUnit};

fn main() -> bevsync::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.training.scene_count = 30;
    cfg.training.hyper.epochs = 10;
    let data = build_training_set(&cfg)?;
    println!("{} training samples", data.len());
    let out = train_kind(&cfg, EstimatorKind::LearnedVelocity, &data, true)?;

    let seeds: Vec<u64> = (900..910).collect();
    let held = held_out_samples(&cfg, &seeds, 0.5)?;
    let (mut model, mut zero) = (0.0, 0.0);
    for s in &held {
        model += evaluate_loss(&out.spec, s)?.total;
        let z = FlowField::zeros(s.gt.grid, FlowDirection::Backward, FlowUnit::Meters);
        zero += flow_loss(&z, &s.gt, s.dt)?.total;
    }
    let n = held.len() as f64;
    println!("held-out flow loss: model {:.4}, zero flow {:.4}", model / n, zero / n);

    if let Some(path) = std::env::args().nth(1) {
        let mut buf = Vec::new();
        out.spec.write_params(&mut buf)?;
        std::fs::write(&path, buf)?;
        println!("wrote {path}");
    }
    Ok(())
}
