//! Experiment harness: pairs asynchronous frames with the reference frame,
//! aligns them with each pipeline, fuses, detects and scores.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, Pipeline, StreamConfig};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, EvalRow, GtObject, SceneMatches, DEFAULT_THRESHOLDS};
use crate::flowest::{self, Estimate, EstimatorKind, FlowEstimatorSpec, TrainOutcome, TrainingSample};
use crate::geometry::{BevGridSpec, Pose2};
use crate::gtflow::{self, dense_gt_flow, dense_gt_flow_backward, emc_flow, FlowDirection, FlowField, FlowUnit};
use crate::scenesim::{generate_scene, nearest_frame, rasterize_bev_with, BevFeatureMap, RasterOptions, Scene};
use crate::warp::{self, GridWarper};

/// A reference frame and the closest asynchronous frame `dt` earlier, both
/// in their own ego frames, with the flows that relate them.
#[derive(Debug, Clone)]
pub struct FramePair {
    pub t_ref: f64,
    pub t_async: f64,
    /// Quantized offset `t_ref - t_async`.
    pub dt: f64,
    pub reference: BevFeatureMap,
    pub asynchronous: BevFeatureMap,
    pub reference_weight: f64,
    pub asynchronous_weight: f64,
    /// Ego-motion flow from the reference grid back to the asynchronous frame.
    pub emc_backward: FlowField,
    /// Ground-truth object flow on the reference grid, back to `t_async`.
    pub gt_backward: FlowField,
}

impl FramePair {
    pub fn new(
        scene: &Scene,
        grid: &BevGridSpec,
        reference: &StreamConfig,
        asynchronous: &StreamConfig,
        t_ref: f64,
        dt_nominal: f64,
        noise_seed: Option<u64>,
    ) -> Result<Self> {
        let t_async = nearest_frame(&asynchronous.stream()?, t_ref, dt_nominal);
        let opts = |m| match noise_seed {
            Some(s) => RasterOptions::new(m, s),
            None => RasterOptions::noiseless(m),
        };
        let ref_map = rasterize_bev_with(scene, t_ref, grid, &opts(reference.modality))?;
        let async_map = rasterize_bev_with(scene, t_async, grid, &opts(asynchronous.modality))?;
        let ego_ref = scene.ego.pose_at(t_ref);
        let ego_async = scene.ego.pose_at(t_async);
        Ok(Self {
            t_ref,
            t_async,
            dt: t_ref - t_async,
            reference: ref_map,
            asynchronous: async_map,
            reference_weight: reference.fusion_weight,
            asynchronous_weight: asynchronous.fusion_weight,
            emc_backward: emc_flow(&ego_async, &ego_ref, grid, FlowDirection::Backward),
            gt_backward: dense_gt_flow_backward(&scene.tracks, t_async, t_ref, &scene.ego, grid),
        })
    }

    fn zero_dynamic(&self) -> FlowField {
        FlowField::zeros(self.reference.grid, FlowDirection::Backward, FlowUnit::Meters)
    }

    fn ego_ref(&self) -> Pose2 {
        self.reference.ego_pose
    }

    /// The asynchronous map resampled onto the reference grid with ego
    /// motion only.
    pub fn emc_aligned(&self, warper: &GridWarper) -> Result<BevFeatureMap> {
        warper.warp(
            &self.asynchronous,
            &self.emc_backward,
            &self.zero_dynamic(),
            self.t_ref,
            self.ego_ref(),
        )
    }
}

/// Trained estimators used by the learned pipelines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Models {
    pub velocity: Option<FlowEstimatorSpec>,
    pub motion: Option<FlowEstimatorSpec>,
}

impl Models {
    pub fn get(&self, kind: EstimatorKind) -> Option<&FlowEstimatorSpec> {
        match kind {
            EstimatorKind::LearnedVelocity => self.velocity.as_ref(),
            EstimatorKind::LearnedMotion => self.motion.as_ref(),
            _ => None,
        }
    }

    pub fn set(&mut self, kind: EstimatorKind, spec: FlowEstimatorSpec) {
        match kind {
            EstimatorKind::LearnedVelocity => self.velocity = Some(spec),
            EstimatorKind::LearnedMotion => self.motion = Some(spec),
            _ => {}
        }
    }
}

/// Output of one pipeline on one frame pair.
#[derive(Debug, Clone)]
pub struct Aligned {
    /// Asynchronous map on the reference grid.
    pub aligned: BevFeatureMap,
    pub fused: BevFeatureMap,
    /// Dynamic flow estimate (reference grid, backward), if the pipeline has one.
    pub dynamic: Option<Estimate>,
}

/// Per-channel weighted mean of maps on a shared grid.
pub fn fuse(maps: &[(&BevFeatureMap, f64)]) -> Result<BevFeatureMap> {
    let (first, _) = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to fuse".into()))?;
    let total: f64 = maps.iter().map(|m| m.1).sum();
    let mut out = BevFeatureMap::zeros(first.grid, first.channels, first.timestamp, first.ego_pose);
    for (m, w) in maps {
        if m.grid != first.grid || m.channels != first.channels {
            return Err(Error::GridMismatch("fused maps differ in shape".into()));
        }
        for (o, v) in out.data.iter_mut().zip(&m.data) {
            *o += w * v;
        }
    }
    out.data.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

/// Ground-truth objects at `t` whose footprint lies entirely on the grid.
pub fn gt_objects(scene: &Scene, t: f64, grid: &BevGridSpec) -> Vec<GtObject> {
    scene
        .boxes_in_ego(t)
        .into_iter()
        .filter(|(_, b)| b.corners().iter().all(|c| grid.contains_point(*c)))
        .map(|(tr, b)| GtObject { bx: b, speed: tr.speed() })
        .collect()
}

#[derive(Debug, Default, Clone)]
pub struct StageTimes(pub BTreeMap<&'static str, Duration>);

impl StageTimes {
    fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        *self.0.entry(stage).or_default() += start.elapsed();
        out
    }
}

/// Alignment, fusion and detection settings shared by all pipelines.
#[derive(Debug, Clone)]
pub struct Harness {
    pub warper: GridWarper,
    pub block_matching: FlowEstimatorSpec,
    pub models: Models,
    pub detection_threshold: f64,
}

impl Harness {
    pub fn from_config(cfg: &ExperimentConfig, models: Models) -> Self {
        Self {
            warper: cfg.warper.warper(),
            block_matching: FlowEstimatorSpec::BlockMatching {
                patch_radius: cfg.estimator.patch_radius_cells,
                search_radius: cfg.estimator.search_radius_cells,
            },
            models,
            detection_threshold: cfg.detection_threshold,
        }
    }

    pub fn align(&self, pipeline: Pipeline, pair: &FramePair) -> Result<Aligned> {
        self.align_timed(pipeline, pair, &mut StageTimes::default())
    }

    fn align_timed(&self, pipeline: Pipeline, pair: &FramePair, times: &mut StageTimes) -> Result<Aligned> {
        let (aligned, dynamic) = match pipeline {
            Pipeline::Vanilla => (pair.asynchronous.clone(), None),
            Pipeline::Emc => (times.time("warp", || pair.emc_aligned(&self.warper))?, None),
            _ => {
                let spec = match pipeline {
                    Pipeline::EmcOracle => &FlowEstimatorSpec::Oracle,
                    Pipeline::EmcBlockMatching => &self.block_matching,
                    p => {
                        let kind = p.learned_kind().expect("learned pipeline");
                        self.models.get(kind).ok_or_else(|| {
                            Error::InvalidConfig(format!("pipeline {} needs a trained {} model", p.name(), kind.name()))
                        })?
                    }
                };
                let emc_only = times.time("warp", || pair.emc_aligned(&self.warper))?;
                let est = times.time("estimate", || {
                    flowest::estimate(
                        spec,
                        &pair.reference,
                        &emc_only,
                        pair.dt,
                        FlowDirection::Backward,
                        Some(&pair.gt_backward),
                    )
                })?;
                let aligned = times.time("warp", || {
                    self.warper
                        .warp(&pair.asynchronous, &pair.emc_backward, &est.flow, pair.t_ref, pair.ego_ref())
                })?;
                (aligned, Some(est))
            }
        };
        let fused = fuse(&[(&pair.reference, pair.reference_weight), (&aligned, pair.asynchronous_weight)])?;
        Ok(Aligned {
            aligned,
            fused,
            dynamic,
        })
    }

    /// Detections on the fused map, ignoring components cut by the grid
    /// border, with speeds read from the dynamic estimate.
    pub fn detections(&self, out: &Aligned) -> Vec<eval::Detection> {
        let g = out.fused.grid;
        let mut dets: Vec<_> = eval::detect_components(&out.fused, self.detection_threshold)
            .into_iter()
            .filter(|c| !c.touches_border(g.width, g.height))
            .map(|c| c.detection)
            .collect();
        if let Some(est) = &out.dynamic {
            eval::attach_speeds(&mut dets, &est.velocity);
        }
        dets
    }

    pub fn evaluate(&self, pipeline: Pipeline, pair: &FramePair, scene: &Scene) -> Result<(Aligned, SceneMatches)> {
        let out = self.align(pipeline, pair)?;
        let dets = self.detections(&out);
        let gts = gt_objects(scene, pair.t_ref, &pair.reference.grid);
        let max = DEFAULT_THRESHOLDS[DEFAULT_THRESHOLDS.len() - 1];
        Ok((out, eval::match_scene(&dets, &gts, max)))
    }
}

/// Noise seed of evaluation scene `seed`, or `None` when noise is off.
fn noise_seed(cfg: &ExperimentConfig, seed: u64) -> Option<u64> {
    cfg.noise.then_some(seed.wrapping_mul(2).wrapping_add(1))
}

/// Pooled result of one (dt, pipeline) cell of the sweep.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub dt: f64,
    pub stream: String,
    pub pipeline: Pipeline,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub cells: Vec<SweepCell>,
    pub rows: Vec<EvalRow>,
    pub times: StageTimes,
}

impl SweepOutput {
    pub fn cell(&self, dt: f64, pipeline: Pipeline) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.pipeline == pipeline && (c.dt - dt).abs() < 1e-9)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        eval::write_rows_csv(&self.rows, &mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }
}

fn pipeline_label(cfg: &ExperimentConfig, stream: &str, p: Pipeline) -> String {
    if cfg.asynchronous.len() > 1 {
        format!("{stream}:{}", p.name())
    } else {
        p.name().to_string()
    }
}

/// Runs every (async stream, dt, pipeline) combination over all scenes and
/// pools the matches. When `dump_dir` is set, every dynamic flow estimate is
/// written there in the binary flow format.
pub fn run_sweep(cfg: &ExperimentConfig, models: &Models, dump_dir: Option<&Path>) -> Result<SweepOutput> {
    cfg.validate()?;
    let grid = cfg.grid.spec()?;
    let harness = Harness::from_config(cfg, models.clone());
    let reference = cfg.stream(&cfg.reference)?;
    let t_ref = cfg.reference_time()?;
    if let Some(d) = dump_dir {
        fs::create_dir_all(d)?;
    }
    let mut times = StageTimes::default();
    let scenes: Vec<Scene> = times.time("scenes", || {
        (0..cfg.scene_count as u64)
            .map(|k| generate_scene(cfg.seed + k, &cfg.scene))
            .collect::<Result<_>>()
    })?;

    let mut cells = Vec::new();
    for stream_name in &cfg.asynchronous {
        let stream = cfg.stream(stream_name)?;
        for &dt in &cfg.dt_sweep_s {
            let mut matches: BTreeMap<Pipeline, Vec<SceneMatches>> = BTreeMap::new();
            let mut dt_q = dt;
            for scene in &scenes {
                let pair = times.time("raster", || {
                    FramePair::new(scene, &grid, reference, stream, t_ref, dt, noise_seed(cfg, scene.seed))
                })?;
                dt_q = pair.dt;
                for &p in &cfg.pipelines {
                    let out = harness.align_timed(p, &pair, &mut times)?;
                    let m = times.time("detect", || {
                        let dets = harness.detections(&out);
                        let gts = gt_objects(scene, pair.t_ref, &grid);
                        eval::match_scene(&dets, &gts, DEFAULT_THRESHOLDS[3])
                    });
                    matches.entry(p).or_default().push(m);
                    if let (Some(dir), Some(est)) = (dump_dir, &out.dynamic) {
                        let name = format!(
                            "seed{}_{}_dt{:.3}_{}.bflw",
                            scene.seed,
                            stream_name,
                            pair.dt,
                            p.name()
                        );
                        let f = fs::File::create(dir.join(name))?;
                        crate::format::write_flow(&est.flow, std::io::BufWriter::new(f))?;
                    }
                }
            }
            for (p, m) in matches {
                cells.push(SweepCell {
                    dt: dt_q,
                    stream: stream_name.clone(),
                    pipeline: p,
                    report: eval::score(&m, &DEFAULT_THRESHOLDS),
                });
            }
        }
    }

    let mut rows: Vec<EvalRow> = cells
        .iter()
        .flat_map(|c| c.report.rows(cfg.seed, c.dt, &pipeline_label(cfg, &c.stream, c.pipeline)))
        .collect();
    rows.sort_by(|a, b| {
        a.dt.total_cmp(&b.dt)
            .then_with(|| a.pipeline.cmp(&b.pipeline))
            .then_with(|| a.motion_class.cmp(&b.motion_class))
    });
    Ok(SweepOutput { cells, rows, times })
}

/// Supervised samples from the training scenes: the reference map, the
/// EMC-aligned asynchronous map and the backward GT flow on the reference
/// grid.
pub fn build_training_set(cfg: &ExperimentConfig) -> Result<Vec<TrainingSample>> {
    let t = &cfg.training;
    let seeds: Vec<u64> = (0..t.scene_count as u64).map(|k| t.seed + k).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed ^ 0x7472_6169_6e00);
    let mut out = Vec::new();
    for seed in seeds {
        let scene = generate_scene(seed, &cfg.scene)?;
        for _ in 0..t.samples_per_scene {
            let (t_ref, dt) = draw_offset(cfg, &mut rng)?;
            let noise = cfg.noise.then(|| rng.gen::<u64>());
            out.push(make_sample(cfg, &scene, t_ref, dt, noise)?);
        }
    }
    Ok(out)
}

/// Random reference frame and nominal offset whose quantized value is > 0.
fn draw_offset(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    let t = &cfg.training;
    let reference = cfg.stream(&cfg.reference)?.stream()?;
    let asynchronous = cfg.stream(&cfg.asynchronous[0])?.stream()?;
    let first = reference.nearest_index(t.max_dt_s).max(1);
    let mut last = reference.nearest_index(t.max_reference_time_s);
    while reference.frame_time(last) > t.max_reference_time_s {
        last -= 1;
    }
    for _ in 0..1000 {
        let k = rng.gen_range(first..=last.max(first));
        let t_ref = reference.frame_time(k);
        let dt = t.max_dt_s - rng.gen_range(0.0..t.max_dt_s);
        let t_a = nearest_frame(&asynchronous, t_ref, dt);
        if t_ref - t_a > 1e-9 && t_a >= 0.0 {
            return Ok((t_ref, dt));
        }
    }
    Err(Error::InvalidConfig("could not draw a positive training offset".into()))
}

/// One supervised sample for the first asynchronous stream.
pub fn make_sample(cfg: &ExperimentConfig, scene: &Scene, t_ref: f64, dt: f64, noise_seed: Option<u64>) -> Result<TrainingSample> {
    let grid = cfg.grid.spec()?;
    let pair = FramePair::new(
        scene,
        &grid,
        cfg.stream(&cfg.reference)?,
        cfg.stream(&cfg.asynchronous[0])?,
        t_ref,
        dt,
        noise_seed,
    )?;
    let f1 = pair.emc_aligned(&cfg.warper.warper())?;
    Ok(TrainingSample {
        f0: pair.reference,
        f1,
        dt: pair.dt,
        gt: pair.gt_backward,
    })
}

/// Held-out samples at the evaluation reference time, one per seed.
pub fn held_out_samples(cfg: &ExperimentConfig, seeds: &[u64], dt: f64) -> Result<Vec<TrainingSample>> {
    let t_ref = cfg.reference_time()?;
    seeds
        .iter()
        .map(|&s| {
            let scene = generate_scene(s, &cfg.scene)?;
            make_sample(cfg, &scene, t_ref, dt, noise_seed(cfg, s))
        })
        .collect()
}

/// Trains one learned estimator on `data`.
pub fn train_kind(cfg: &ExperimentConfig, kind: EstimatorKind, data: &[TrainingSample], verbose: bool) -> Result<TrainOutcome> {
    let e = &cfg.estimator;
    let init = FlowEstimatorSpec::learned(
        kind,
        crate::scenesim::FEATURE_CHANNELS,
        e.hidden_channels,
        e.dilation_cells,
        e.init_seed,
    )?;
    flowest::train_estimator_with(&init, data, &cfg.training.hyper, |r| {
        if verbose {
            eprintln!("[{}] epoch {:>3}  loss {:.5}", kind.name(), r.epoch, r.total);
        }
    })
}

/// Writes `<kind>.params` and `<kind>-loss.csv` for every configured kind.
pub fn train_command(cfg: &ExperimentConfig, out_dir: &Path, verbose: bool) -> Result<Vec<(EstimatorKind, PathBuf)>> {
    cfg.validate()?;
    if cfg.training.kinds.is_empty() {
        return Err(Error::InvalidConfig("no learned estimator kinds configured for training".into()));
    }
    fs::create_dir_all(out_dir)?;
    let data = build_training_set(cfg)?;
    let mut written = Vec::new();
    for &kind in &cfg.training.kinds {
        let outcome = train_kind(cfg, kind, &data, verbose)?;
        let params = out_dir.join(format!("{}.params", kind.name()));
        let mut buf = Vec::new();
        outcome.spec.write_params(&mut buf)?;
        fs::write(&params, buf)?;
        let mut csv = Vec::new();
        outcome.write_curve_csv(&mut csv)?;
        fs::write(out_dir.join(format!("{}-loss.csv", kind.name())), csv)?;
        written.push((kind, params));
    }
    Ok(written)
}

/// Loads configured parameter files and trains whatever the pipelines still
/// need.
pub fn prepare_models(cfg: &ExperimentConfig, verbose: bool) -> Result<Models> {
    let mut models = Models::default();
    let mut missing = Vec::new();
    for p in &cfg.pipelines {
        let Some(kind) = p.learned_kind() else { continue };
        if models.get(kind).is_some() || missing.contains(&kind) {
            continue;
        }
        let path = match kind {
            EstimatorKind::LearnedVelocity => &cfg.estimator.velocity_params,
            _ => &cfg.estimator.motion_params,
        };
        match path {
            Some(path) => {
                let bytes = fs::read(path)
                    .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
                let spec = FlowEstimatorSpec::read_params(&bytes[..])?;
                if spec.kind() != kind {
                    return Err(Error::InvalidConfig(format!(
                        "{} holds a {} model, expected {}",
                        path.display(),
                        spec.kind().name(),
                        kind.name()
                    )));
                }
                models.set(kind, spec);
            }
            None => missing.push(kind),
        }
    }
    if !missing.is_empty() {
        let data = build_training_set(cfg)?;
        for kind in missing {
            models.set(kind, train_kind(cfg, kind, &data, verbose)?.spec);
        }
    }
    Ok(models)
}

/// One line of the `check` suite.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Gradient, ground-truth scatter and round-trip consistency checks.
pub fn check(cfg: &ExperimentConfig) -> Result<Vec<CheckLine>> {
    let mut lines = Vec::new();

    let small = BevGridSpec::centered(6, 0.5)?;
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for kind in [EstimatorKind::LearnedVelocity, EstimatorKind::LearnedMotion] {
        let mut done = 0;
        while done < 3 {
            let spec = FlowEstimatorSpec::learned(kind, 4, 4, 2, rng.gen())?;
            let sample = random_sample(small, &mut rng);
            if flowest::kink_margin(&spec, &sample)? < 1e-3 {
                continue;
            }
            worst = worst.max(flowest::gradient_check(&spec, &sample, 1e-5)?);
            done += 1;
        }
    }
    lines.push(CheckLine {
        name: "gradient".into(),
        passed: worst < 1e-4,
        detail: format!("max relative error {worst:.3e}"),
    });

    let grid = cfg.grid.spec()?;
    let mut max_disc: f64 = 0.0;
    let mut covered = 0;
    let mut rt_worst: f64 = 1.0;
    for k in 0..20u64 {
        let scene = generate_scene(cfg.seed + k, &cfg.scene)?;
        let fwd = dense_gt_flow(&scene.tracks, 0.0, 0.5, &scene.ego, &grid);
        let r = gtflow::scatter_check(&fwd, &scene.tracks, 0.0, 0.5, &scene.ego, &grid);
        max_disc = max_disc.max(r.max_discrepancy);
        covered += r.cells_covered;
        let bwd = dense_gt_flow_backward(&scene.tracks, 0.0, 0.5, &scene.ego, &grid);
        let r = gtflow::scatter_check(&bwd, &scene.tracks, 0.0, 0.5, &scene.ego, &grid);
        max_disc = max_disc.max(r.max_discrepancy);
        // round trip on a stationary ego so both fields share a grid
        let still = crate::scenesim::EgoTrajectory::stationary(Pose2::IDENTITY);
        let f = dense_gt_flow(&scene.tracks, 0.0, 0.5, &still, &grid);
        let b = dense_gt_flow_backward(&scene.tracks, 0.0, 0.5, &still, &grid);
        let rt = warp::roundtrip_check(&f, &b, 0.5, true)?;
        rt_worst = rt_worst.min(rt.fraction());
    }
    lines.push(CheckLine {
        name: "scatter".into(),
        passed: max_disc == 0.0 && covered > 0,
        detail: format!("max discrepancy {max_disc:e} over {covered} cells"),
    });
    lines.push(CheckLine {
        name: "roundtrip".into(),
        passed: rt_worst >= 0.99,
        detail: format!("worst in-tolerance fraction {rt_worst:.4}"),
    });
    Ok(lines)
}

fn random_sample(grid: BevGridSpec, rng: &mut ChaCha8Rng) -> TrainingSample {
    let mut map = || {
        let mut m = BevFeatureMap::zeros(grid, crate::scenesim::FEATURE_CHANNELS, 0.0, Pose2::IDENTITY);
        m.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        m
    };
    let f0 = map();
    let f1 = map();
    let gt = FlowField::from_fn(grid, FlowDirection::Backward, FlowUnit::Meters, |_, _| {
        crate::geometry::Point2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    });
    TrainingSample { f0, f1, dt: 0.4, gt }
}
