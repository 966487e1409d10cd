//! Small time-offset sweep over the non-learned pipelines.

use bevsync::config::{ExperimentConfig, Pipeline};
use bevsync::eval::MotionClass;
use bevsync::experiment::{run_sweep, Models};

fn main() -> bevsync::Result<()> {
    let cfg = ExperimentConfig {
        scene_count: 10,
        pipelines: vec![Pipeline::Vanilla, Pipeline::Emc, Pipeline::EmcBlockMatching, Pipeline::EmcOracle],
        ..ExperimentConfig::default()
    };
    let out = run_sweep(&cfg, &Models::default(), None)?;
    println!("{:>5} {:<11} {:>9} {:>9} {:>9} {:>9}", "dt", "pipeline", "static", "dynamic", "ap@0.5", "ap@2");
    for c in &out.cells {
        let s = c.report.class(MotionClass::Static);
        let d = c.report.class(MotionClass::Dynamic);
        println!(
            "{:>5.2} {:<11} {:>9.3} {:>9.3} {:>9.3} {:>9.3}",
            c.dt,
            c.pipeline.name(),
            s.mean_translation_error,
            d.mean_translation_error,
            c.report.all.ap[0],
            c.report.all.ap[2]
        );
    }
    Ok(())
}
