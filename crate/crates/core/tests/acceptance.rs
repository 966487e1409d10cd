//! Acceptance suite. Each test prints one PASS/FAIL line to stderr (written
//! directly, so it shows up without `--nocapture`) and then asserts.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bevsync::config::{ExperimentConfig, Pipeline};
use bevsync::eval::MotionClass;
use bevsync::experiment::{
    build_training_set, gt_objects, held_out_samples, run_sweep, train_command, train_kind, FramePair, Harness, Models,
};
use bevsync::flowest::{self, estimate, flow_loss, EstimatorKind, FlowEstimatorSpec, TrainingSample};
use bevsync::geometry::{points_in_box, BevGridSpec, CellIndex, GridCoord, Point2, Pose2};
use bevsync::gtflow::{dense_gt_flow, dense_gt_flow_backward, scatter_check, FlowDirection, FlowField, FlowUnit};
use bevsync::scenesim::{generate_scene, nearest_frame, BevFeatureMap, EgoTrajectory, Modality, SensorStream, FEATURE_CHANNELS};
use bevsync::warp::{grid_sample, roundtrip_check, LookupTable};

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {n:>2} {} {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn random_map(grid: BevGridSpec, channels: usize, rng: &mut ChaCha8Rng) -> BevFeatureMap {
    let mut m = BevFeatureMap::zeros(grid, channels, 0.0, Pose2::IDENTITY);
    m.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    m
}

struct Trained {
    models: Models,
    scenes: usize,
    elapsed: Duration,
}

/// Both learned estimators, trained once with the default configuration.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        let start = Instant::now();
        let data = build_training_set(&cfg).expect("training set");
        let mut models = Models::default();
        for kind in [EstimatorKind::LearnedVelocity, EstimatorKind::LearnedMotion] {
            models.set(kind, train_kind(&cfg, kind, &data, false).expect("training").spec);
        }
        Trained {
            models,
            scenes: cfg.training.scene_count,
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn criterion_01_gt_flow_matches_scatter_oracle() {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let grid = cfg.grid.spec().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut covered = 0;
    let mut rotating = 0;
    for k in 0..200u64 {
        let scene = generate_scene(10_000 + k, &cfg.scene).unwrap();
        rotating += scene.tracks.iter().filter(|t| t.yaw_rate_radps != 0.0 && t.speed_mps > 0.0).count();
        let t0 = rng.gen_range(0.0..2.0);
        let t1 = t0 + rng.gen_range(0.05..0.5);
        let fwd = dense_gt_flow(&scene.tracks, t0, t1, &scene.ego, &grid);
        let bwd = dense_gt_flow_backward(&scene.tracks, t0, t1, &scene.ego, &grid);
        for f in [&fwd, &bwd] {
            let r = scatter_check(f, &scene.tracks, t0, t1, &scene.ego, &grid);
            worst = worst.max(r.max_discrepancy);
            covered += r.cells_covered;
        }
    }
    let elapsed = start.elapsed();
    let pass = worst == 0.0 && covered > 0 && rotating > 0 && elapsed < Duration::from_secs(30);
    report(
        1,
        "dense GT flow vs per-point oracle",
        pass,
        &format!(
            "max discrepancy {worst:e} over {covered} cells, {rotating} rotating tracks, {:.2} s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_02_velocity_formulation_guarantees() {
    let grid = BevGridSpec::centered(32, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = FlowEstimatorSpec::learned(EstimatorKind::LearnedVelocity, FEATURE_CHANNELS, 8, 3, 5).unwrap();
    let f0 = random_map(grid, FEATURE_CHANNELS, &mut rng);
    let f1 = random_map(grid, FEATURE_CHANNELS, &mut rng);
    let at = |dt: f64| estimate(&spec, &f0, &f1, dt, FlowDirection::Backward, None).unwrap();

    let zero = at(0.0);
    let zero_ok = zero.flow.data.iter().all(|v| *v == 0.0);

    let mut velocity_identical = true;
    let mut rescale_exact = true;
    let mut worst_rel: f64 = 0.0;
    for _ in 0..20 {
        let alpha = rng.gen_range(0.01..1.0);
        let beta = rng.gen_range(0.01..1.0);
        let a = at(alpha);
        let b = at(beta);
        velocity_identical &= a.velocity.data == b.velocity.data;
        rescale_exact &= a.rescaled(beta).data == b.flow.data;
        for (x, y) in a.flow.data.iter().zip(&b.flow.data) {
            let literal = x * (beta / alpha);
            worst_rel = worst_rel.max((literal - y).abs() / y.abs().max(f64::MIN_POSITIVE));
        }
    }
    let pass = zero_ok && velocity_identical && rescale_exact && worst_rel < 1e-14;
    report(
        2,
        "velocity formulation: zero at dt=0, dt-rescaling",
        pass,
        &format!(
            "zero field {zero_ok}, velocity bit-identical {velocity_identical}, rescaled bit-exact {rescale_exact}, literal ratio max rel diff {worst_rel:.1e}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_03_flow_loss() {
    let grid = BevGridSpec::centered(20, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut random_flow = |scale: f64| {
        FlowField::from_fn(grid, FlowDirection::Backward, FlowUnit::Meters, |_, _| {
            Point2::new(rng.gen_range(-scale..scale), rng.gen_range(-scale..scale))
        })
    };
    let gt = random_flow(1.0);
    let self_loss = flow_loss(&gt, &gt, 0.5).unwrap();

    let mut single = FlowField::zeros(grid, FlowDirection::Backward, FlowUnit::Meters);
    single.set(CellIndex::new(7, 3), Point2::new(1.0, 0.0));
    let mut pred = single.clone();
    pred.set(CellIndex::new(7, 3), Point2::new(1.0, 1.0));
    let one = flow_loss(&pred, &single, 0.5).unwrap();

    let uniform = FlowField::from_fn(grid, FlowDirection::Backward, FlowUnit::Meters, |_, _| Point2::new(0.0, 0.25));
    let off = FlowField::from_fn(grid, FlowDirection::Backward, FlowUnit::Meters, |_, _| Point2::new(0.2, 0.25));
    let medium = flow_loss(&off, &uniform, 0.5).unwrap();

    let mut partition = true;
    for _ in 0..10 {
        let p = random_flow(2.0);
        let r = flow_loss(&p, &gt, 0.5).unwrap();
        partition &= r.counts.iter().sum::<usize>() == grid.cell_count() && r.counts == self_loss.counts;
        partition &= r.total == r.bucket_means.iter().sum::<f64>();
    }
    let pass = self_loss.total == 0.0
        && one.total == 1.0
        && one.counts == [grid.cell_count() - 1, 0, 1]
        && (medium.total - 0.2).abs() < 1e-12
        && medium.counts == [0, grid.cell_count(), 0]
        && partition;
    report(
        3,
        "bucketed flow loss",
        pass,
        &format!(
            "self {}, single fast cell {}, uniform medium {}, counts partition {partition}",
            self_loss.total, one.total, medium.total
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_04_gradient_check() {
    let grid = BevGridSpec::centered(6, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut points = 0;
    let mut params = 0;
    for kind in [EstimatorKind::LearnedVelocity, EstimatorKind::LearnedMotion] {
        let mut accepted = 0;
        while accepted < 10 {
            let spec = FlowEstimatorSpec::learned(kind, FEATURE_CHANNELS, 8, 3, rng.gen()).unwrap();
            let sample = TrainingSample {
                f0: random_map(grid, FEATURE_CHANNELS, &mut rng),
                f1: random_map(grid, FEATURE_CHANNELS, &mut rng),
                dt: rng.gen_range(0.05..0.5),
                gt: FlowField::from_fn(grid, FlowDirection::Backward, FlowUnit::Meters, |_, _| {
                    Point2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                }),
            };
            // keep points away from rectifier and norm kinks
            if flowest::kink_margin(&spec, &sample).unwrap() < 1e-3 {
                continue;
            }
            params = spec.network().unwrap().param_count();
            worst = worst.max(flowest::gradient_check(&spec, &sample, 1e-5).unwrap());
            accepted += 1;
            points += 1;
        }
    }
    let pass = worst < 1e-4;
    report(
        4,
        "analytic vs finite-difference gradients",
        pass,
        &format!("max relative error {worst:.2e} over {points} points x {params} parameters"),
    );
    assert!(pass);
}

#[test]
fn criterion_05_warp_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let grid = BevGridSpec::centered(24, 0.5).unwrap();
    let m = random_map(grid, 3, &mut rng);

    let identity = grid_sample(&m, &LookupTable::identity(grid)).unwrap().data == m.data;

    let shifted = grid_sample(&m, &LookupTable::uniform_shift(grid, 1.0, 0.0)).unwrap();
    let mut copy = true;
    for r in 0..grid.height {
        for c in 0..grid.width {
            for ch in 0..3 {
                let want = if c + 1 < grid.width { m.get(r, c + 1, ch) } else { 0.0 };
                copy &= shifted.get(r, c, ch) == want;
            }
        }
    }

    let line = BevGridSpec::new(0.0, 0.0, 1.0, 4, 1).unwrap();
    let mut ramp = BevFeatureMap::zeros(line, 1, 0.0, Pose2::IDENTITY);
    ramp.data = vec![0.0, 1.0, 2.0, 3.0];
    let half = grid_sample(&ramp, &LookupTable::uniform_shift(line, 0.5, 0.0)).unwrap();
    let ramp_ok = half.data == vec![0.5, 1.5, 2.5, 1.5];

    let mut linear_err: f64 = 0.0;
    for _ in 0..50 {
        let a = random_map(grid, 2, &mut rng);
        let b = random_map(grid, 2, &mut rng);
        let (alpha, beta) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        let coords = grid
            .cells()
            .map(|i| GridCoord::new(i.col as f64 + rng.gen_range(-3.0..3.0), i.row as f64 + rng.gen_range(-3.0..3.0)))
            .collect();
        let lut = LookupTable { grid, coords };
        let mut mix = a.clone();
        for (k, v) in mix.data.iter_mut().enumerate() {
            *v = alpha * a.data[k] + beta * b.data[k];
        }
        let (sa, sb, sm) = (
            grid_sample(&a, &lut).unwrap(),
            grid_sample(&b, &lut).unwrap(),
            grid_sample(&mix, &lut).unwrap(),
        );
        for k in 0..sm.data.len() {
            linear_err = linear_err.max((sm.data[k] - (alpha * sa.data[k] + beta * sb.data[k])).abs());
        }
    }

    let cfg = ExperimentConfig::default();
    let big = cfg.grid.spec().unwrap();
    let still = EgoTrajectory::stationary(Pose2::IDENTITY);
    let mut worst_fraction: f64 = 1.0;
    let mut evaluated = 0;
    for k in 0..30u64 {
        let scene = generate_scene(20_000 + k, &cfg.scene).unwrap();
        let f = dense_gt_flow(&scene.tracks, 0.0, 0.5, &still, &big);
        let b = dense_gt_flow_backward(&scene.tracks, 0.0, 0.5, &still, &big);
        let r = roundtrip_check(&f, &b, 0.5, true).unwrap();
        evaluated += r.evaluated;
        worst_fraction = worst_fraction.min(r.fraction());
    }

    let pass = identity && copy && ramp_ok && linear_err <= 1e-6 && worst_fraction >= 0.99 && evaluated > 0;
    report(
        5,
        "warp kernel suite",
        pass,
        &format!(
            "identity {identity}, integer shift {copy}, ramp {ramp_ok}, linearity err {linear_err:.1e}, round trip worst {:.4} over {evaluated} cells",
            worst_fraction
        ),
    );
    assert!(pass);
}

/// Mean speed of the dynamic ground-truth objects scored by the sweep.
fn mean_dynamic_speed(cfg: &ExperimentConfig) -> f64 {
    let grid = cfg.grid.spec().unwrap();
    let t_ref = cfg.reference_time().unwrap();
    let speeds: Vec<f64> = (0..cfg.scene_count as u64)
        .flat_map(|k| gt_objects(&generate_scene(cfg.seed + k, &cfg.scene).unwrap(), t_ref, &grid))
        .map(|g| g.speed)
        .filter(|s| MotionClass::of_speed(*s) == MotionClass::Dynamic)
        .collect();
    speeds.iter().sum::<f64>() / speeds.len() as f64
}

#[test]
fn criterion_06_static_dynamic_dissociation() {
    let start = Instant::now();
    let cfg = ExperimentConfig {
        scene_count: 50,
        dt_sweep_s: vec![0.5],
        pipelines: vec![Pipeline::Emc, Pipeline::EmcOracle],
        ..ExperimentConfig::default()
    };
    let cell = cfg.grid.cell_m;
    let out = run_sweep(&cfg, &Models::default(), None).unwrap();
    let emc = &out.cell(0.5, Pipeline::Emc).unwrap().report;
    let oracle = &out.cell(0.5, Pipeline::EmcOracle).unwrap().report;
    let speed = mean_dynamic_speed(&cfg);
    let floor = 0.8 * speed * 0.5;
    let st = emc.static_.mean_translation_error;
    let dy = emc.dynamic.mean_translation_error;
    let or = oracle.dynamic.mean_translation_error;
    let elapsed = start.elapsed();
    let pass = st <= cell && dy >= floor && or <= cell && elapsed < Duration::from_secs(120);
    report(
        6,
        "EMC fixes static but not dynamic objects",
        pass,
        &format!(
            "EMC static {st:.3} m (<= {cell}), EMC dynamic {dy:.3} m (>= {floor:.3}), oracle dynamic {or:.3} m (<= {cell}), {:.1} s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_learned_velocity_efficacy() {
    let t = trained();
    let cfg = ExperimentConfig {
        dt_sweep_s: vec![0.0, 0.5],
        pipelines: vec![Pipeline::Emc, Pipeline::EmcVelocity],
        ..ExperimentConfig::default()
    };
    let out = run_sweep(&cfg, &t.models, None).unwrap();
    let err = |dt, p| out.cell(dt, p).unwrap().report.dynamic.mean_translation_error;
    let (emc0, emc5) = (err(0.0, Pipeline::Emc), err(0.5, Pipeline::Emc));
    let (ve0, ve5) = (err(0.0, Pipeline::EmcVelocity), err(0.5, Pipeline::EmcVelocity));
    let reduction = 1.0 - ve5 / emc5;
    let slope_ratio = (ve5 - ve0) / (emc5 - emc0);
    let budget = t.scenes <= 200 && t.elapsed <= Duration::from_secs(600);
    let pass = reduction >= 0.5 && slope_ratio <= 0.5 && budget;
    report(
        7,
        "learned velocity estimator efficacy",
        pass,
        &format!(
            "dynamic error EMC {emc0:.3} -> {emc5:.3} m, EMC+VE {ve0:.3} -> {ve5:.3} m; reduction {:.1}%, slope ratio {slope_ratio:.3}; trained on {} scenes in {:.0} s",
            100.0 * reduction,
            t.scenes,
            t.elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_velocity_vs_motion_ablation() {
    let t = trained();
    let cfg = ExperimentConfig::default();
    let grid = cfg.grid.spec().unwrap();
    let harness = Harness::from_config(&cfg, t.models.clone());
    let mut identical = true;
    let mut motion_deviates = 0;
    for k in 0..cfg.scene_count as u64 {
        let scene = generate_scene(cfg.seed + k, &cfg.scene).unwrap();
        let pair = FramePair::new(
            &scene,
            &grid,
            cfg.stream("camera").unwrap(),
            cfg.stream("lidar").unwrap(),
            cfg.reference_time().unwrap(),
            0.0,
            Some(k),
        )
        .unwrap();
        let emc = harness.align(Pipeline::Emc, &pair).unwrap();
        let ve = harness.align(Pipeline::EmcVelocity, &pair).unwrap();
        let me = harness.align(Pipeline::EmcMotion, &pair).unwrap();
        let (de, dv) = (harness.detections(&emc), harness.detections(&ve));
        identical &= emc.fused.data == ve.fused.data
            && de.len() == dv.len()
            && de.iter().zip(&dv).all(|(a, b)| a.center == b.center && a.score == b.score);
        if me.fused.data != emc.fused.data {
            motion_deviates += 1;
        }
    }

    let seeds: Vec<u64> = (700_000..700_010).collect();
    let held = held_out_samples(&cfg, &seeds, 0.5).unwrap();
    let mut failures = 0;
    let mut totals = Vec::new();
    for s in &held {
        let v = flowest::evaluate_loss(t.models.velocity.as_ref().unwrap(), s).unwrap().total;
        let m = flowest::evaluate_loss(t.models.motion.as_ref().unwrap(), s).unwrap().total;
        if v > m {
            failures += 1;
        }
        totals.push(format!("{v:.3}/{m:.3}"));
    }
    let pass = identical && failures <= 3;
    report(
        8,
        "velocity vs motion formulation",
        pass,
        &format!(
            "dt=0 EMC+VE identical to EMC {identical} ({} scenes, EMC+ME differs on {motion_deviates}); dt=0.5 held-out VE/ME loss [{}], VE worse on {failures}/10",
            cfg.scene_count,
            totals.join(" ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_asynchrony_quantization() {
    let lidar = SensorStream::new("lidar", 20.0, 0.0, Modality::Lidar).unwrap();
    let camera = SensorStream::new("camera", 12.0, 0.0, Modality::Camera).unwrap();
    let mut checked = 0;
    let mut ok = true;
    // reference frames of the other stream from 0.5 s to 2 s
    for (stream, other, steps, first) in [(&lidar, &camera, 10u64, 6u64), (&camera, &lidar, 6u64, 10u64)] {
        for r in first..first * 4 {
            let t_ref = other.frame_time(r);
            // sweep grid: whole periods up to 0.5 s
            for k in 0..=steps {
                let offset = k as f64 / stream.frequency_hz;
                let t = nearest_frame(stream, t_ref, offset);
                let idx = (t * stream.frequency_hz).round();
                ok &= t == stream.frame_time(idx as u64);
                if (t_ref * stream.frequency_hz).fract() == 0.0 {
                    // aligned references land exactly k periods back
                    ok &= ((t_ref - t) - offset).abs() < 1e-12;
                }
                checked += 1;
            }
            // dense scan: always a frame time, and the nearest one
            for ms in 0..=500u64 {
                let offset = ms as f64 * 1e-3;
                let t = nearest_frame(stream, t_ref, offset);
                let idx = (t * stream.frequency_hz).round();
                ok &= t == stream.frame_time(idx as u64);
                ok &= (t - (t_ref - offset)).abs() <= 0.5 / stream.frequency_hz + 1e-12;
                checked += 1;
            }
        }
    }
    // aligned camera/lidar references (0.5 s) hit every grid offset exactly
    for k in 0..=10u64 {
        ok &= nearest_frame(&lidar, 0.5, k as f64 * 0.05) == lidar.frame_time(10 - k);
    }
    for k in 0..=6u64 {
        ok &= nearest_frame(&camera, 0.5, k as f64 / 12.0) == camera.frame_time(6 - k);
    }
    report(
        9,
        "asynchrony quantization",
        ok,
        &format!("{checked} offsets checked on 20 Hz and 12 Hz streams"),
    );
    assert!(ok);
}

#[test]
fn criterion_10_determinism() {
    let base = std::env::temp_dir().join(format!("bevsync-determinism-{}", std::process::id()));
    let mut cfg = ExperimentConfig {
        scene_count: 4,
        pipelines: vec![Pipeline::Vanilla, Pipeline::Emc, Pipeline::EmcVelocity, Pipeline::EmcMotion, Pipeline::EmcOracle],
        ..ExperimentConfig::default()
    };
    cfg.training.scene_count = 6;
    cfg.training.hyper.epochs = 3;

    let mut params = Vec::new();
    let mut csvs = Vec::new();
    for run in 0..2 {
        let dir = base.join(format!("run{run}"));
        let written = train_command(&cfg, &dir, false).unwrap();
        let mut bytes = Vec::new();
        for (kind, path) in &written {
            bytes.push(std::fs::read(path).unwrap());
            bytes.push(std::fs::read(dir.join(format!("{}-loss.csv", kind.name()))).unwrap());
        }
        params.push(bytes);

        let mut run_cfg = cfg.clone();
        run_cfg.estimator.velocity_params = Some(dir.join("learned-velocity.params"));
        run_cfg.estimator.motion_params = Some(dir.join("learned-motion.params"));
        let models = bevsync::experiment::prepare_models(&run_cfg, false).unwrap();
        let out = run_sweep(&run_cfg, &models, None).unwrap();
        let csv = dir.join("results.csv");
        out.write_csv(&csv).unwrap();
        csvs.push(std::fs::read(&csv).unwrap());
    }
    let _ = std::fs::remove_dir_all(&base);
    let pass = params[0] == params[1] && csvs[0] == csvs[1] && !csvs[0].is_empty();
    report(
        10,
        "determinism",
        pass,
        &format!(
            "train artifacts identical {}, results.csv identical {} ({} bytes)",
            params[0] == params[1],
            csvs[0] == csvs[1],
            csvs[0].len()
        ),
    );
    assert!(pass);
}

#[test]
fn static_scene_held_out_speed_is_small() {
    // all-static training data teaches the velocity estimator to stay still
    let mut cfg = ExperimentConfig::default();
    cfg.scene.dynamic_fraction = 0.0;
    cfg.training.scene_count = 20;
    cfg.training.hyper.epochs = 8;
    let data = build_training_set(&cfg).unwrap();
    let out = train_kind(&cfg, EstimatorKind::LearnedVelocity, &data, false).unwrap();
    let seeds: Vec<u64> = (800_000..800_005).collect();
    let held = held_out_samples(&cfg, &seeds, 0.5).unwrap();
    for s in held {
        let e = estimate(&out.spec, &s.f0, &s.f1, s.dt, FlowDirection::Backward, None).unwrap();
        let speed = flowest::mean_speed(&e.velocity);
        assert!(speed <= 0.05, "mean speed {speed}");
    }
}

#[test]
fn emc_only_alignment_on_static_scene() {
    let cfg = ExperimentConfig::default();
    let grid = cfg.grid.spec().unwrap();
    let mut scene_cfg = cfg.scene.clone();
    scene_cfg.dynamic_fraction = 0.0;
    let scene = generate_scene(31, &scene_cfg).unwrap();
    let pair = FramePair::new(
        &scene,
        &grid,
        cfg.stream("lidar").unwrap(),
        cfg.stream("lidar").unwrap(),
        0.5,
        0.5,
        None,
    )
    .unwrap();
    let warped = pair.emc_aligned(&cfg.warper.warper()).unwrap();
    // occupancy of every static box at t1 is recovered in its interior
    for (_, bx) in scene.boxes_in_ego(0.5) {
        let shrunk = bevsync::geometry::Box2::new(bx.center, bx.length - 2.0 * grid.cell, bx.width - 2.0 * grid.cell).unwrap();
        for idx in points_in_box(&shrunk, &grid) {
            if idx.row < 2 || idx.col < 2 || idx.row + 2 >= grid.height || idx.col + 2 >= grid.width {
                continue;
            }
            let a = warped.get(idx.row, idx.col, 0);
            let b = pair.reference.get(idx.row, idx.col, 0);
            assert!((a - b).abs() <= 1e-6, "{idx:?}: {a} vs {b}");
        }
    }
}
