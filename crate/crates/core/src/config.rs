//! Experiment configuration.
//!
//! Stored as TOML with units in the key names. Every field has a default,
//! so a config file only needs the keys it changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowest::{EstimatorKind, TrainHyper};
use crate::geometry::BevGridSpec;
use crate::scenesim::{Modality, SceneConfig, SensorStream};
use crate::warp::GridWarper;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Alignment pipelines compared by the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pipeline {
    /// No alignment at all.
    #[serde(rename = "vanilla")]
    Vanilla,
    /// Ego-motion compensation only.
    #[serde(rename = "emc")]
    Emc,
    /// EMC plus the learned motion (displacement) estimator.
    #[serde(rename = "emc-me")]
    EmcMotion,
    /// EMC plus the learned velocity estimator.
    #[serde(rename = "emc-ve")]
    EmcVelocity,
    /// EMC plus block matching.
    #[serde(rename = "emc-bm")]
    EmcBlockMatching,
    /// EMC plus ground-truth object flow.
    #[serde(rename = "emc-oracle")]
    EmcOracle,
}

impl Pipeline {
    pub const ALL: [Pipeline; 6] = [
        Self::Vanilla,
        Self::Emc,
        Self::EmcMotion,
        Self::EmcVelocity,
        Self::EmcBlockMatching,
        Self::EmcOracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Vanilla => "vanilla",
            Self::Emc => "emc",
            Self::EmcMotion => "emc-me",
            Self::EmcVelocity => "emc-ve",
            Self::EmcBlockMatching => "emc-bm",
            Self::EmcOracle => "emc-oracle",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown pipeline {name:?}")))
    }

    /// Learned estimator kind the pipeline depends on, if any.
    pub fn learned_kind(self) -> Option<EstimatorKind> {
        match self {
            Self::EmcMotion => Some(EstimatorKind::LearnedMotion),
            Self::EmcVelocity => Some(EstimatorKind::LearnedVelocity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Cells per side of the square grid centered on the ego vehicle.
    pub cells: usize,
    pub cell_m: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { cells: 64, cell_m: 0.5 }
    }
}

impl GridConfig {
    pub fn spec(&self) -> Result<BevGridSpec> {
        BevGridSpec::centered(self.cells, self.cell_m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub name: String,
    pub frequency_hz: f64,
    #[serde(default)]
    pub phase_s: f64,
    pub modality: Modality,
    /// Relative weight in the fused map.
    #[serde(default = "one")]
    pub fusion_weight: f64,
}

fn one() -> f64 {
    1.0
}

impl StreamConfig {
    pub fn stream(&self) -> Result<SensorStream> {
        SensorStream::new(self.name.clone(), self.frequency_hz, self.phase_s, self.modality)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub hidden_channels: usize,
    pub dilation_cells: usize,
    pub init_seed: u64,
    pub patch_radius_cells: usize,
    pub search_radius_cells: usize,
    /// Trained parameter files. Pipelines whose file is missing train a
    /// model in-process from the `training` section.
    pub velocity_params: Option<PathBuf>,
    pub motion_params: Option<PathBuf>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            hidden_channels: 8,
            dilation_cells: 3,
            init_seed: 1,
            patch_radius_cells: 2,
            search_radius_cells: 8,
            velocity_params: None,
            motion_params: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub scene_count: usize,
    pub samples_per_scene: usize,
    /// Training scenes use seeds `seed, seed + 1, ...`.
    pub seed: u64,
    /// Offsets are drawn uniformly from `(0, max_dt_s]` and quantized to the
    /// asynchronous stream's frames.
    pub max_dt_s: f64,
    /// Reference timestamps are drawn from the reference stream's frames in
    /// `[max_dt_s, max_reference_time_s]`.
    pub max_reference_time_s: f64,
    pub kinds: Vec<EstimatorKind>,
    pub hyper: TrainHyper,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            scene_count: 150,
            samples_per_scene: 2,
            seed: 100_000,
            max_dt_s: 0.5,
            max_reference_time_s: 3.0,
            kinds: vec![EstimatorKind::LearnedVelocity, EstimatorKind::LearnedMotion],
            hyper: TrainHyper::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarperConfig {
    pub suppress_disocclusion: bool,
    pub motion_threshold_m: f64,
}

impl Default for WarperConfig {
    fn default() -> Self {
        let w = GridWarper::default();
        Self {
            suppress_disocclusion: w.suppress_disocclusion,
            motion_threshold_m: w.motion_threshold_m,
        }
    }
}

impl WarperConfig {
    pub fn warper(&self) -> GridWarper {
        GridWarper {
            suppress_disocclusion: self.suppress_disocclusion,
            motion_threshold_m: self.motion_threshold_m,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub scene_count: usize,
    pub grid: GridConfig,
    pub scene: SceneConfig,
    pub streams: Vec<StreamConfig>,
    /// Name of the reference stream.
    pub reference: String,
    /// Streams paired with the reference, one alignment run each.
    pub asynchronous: Vec<String>,
    /// Timestamp of the reference frame, snapped to the reference stream.
    pub reference_time_s: f64,
    pub dt_sweep_s: Vec<f64>,
    pub pipelines: Vec<Pipeline>,
    pub detection_threshold: f64,
    /// Disables sensor noise when false.
    pub noise: bool,
    pub estimator: EstimatorConfig,
    pub training: TrainingConfig,
    pub warper: WarperConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            scene_count: 50,
            grid: GridConfig::default(),
            scene: SceneConfig::default(),
            streams: vec![
                StreamConfig {
                    name: "lidar".into(),
                    frequency_hz: 20.0,
                    phase_s: 0.0,
                    modality: Modality::Lidar,
                    fusion_weight: 3.0,
                },
                StreamConfig {
                    name: "camera".into(),
                    frequency_hz: 12.0,
                    phase_s: 0.0,
                    modality: Modality::Camera,
                    fusion_weight: 1.0,
                },
            ],
            reference: "camera".into(),
            asynchronous: vec!["lidar".into()],
            reference_time_s: 0.5,
            dt_sweep_s: vec![0.0, 0.25, 0.5],
            pipelines: vec![
                Pipeline::Vanilla,
                Pipeline::Emc,
                Pipeline::EmcMotion,
                Pipeline::EmcVelocity,
                Pipeline::EmcOracle,
            ],
            detection_threshold: 0.5,
            noise: true,
            estimator: EstimatorConfig::default(),
            training: TrainingConfig::default(),
            warper: WarperConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn stream(&self, name: &str) -> Result<&StreamConfig> {
        self.streams
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown stream {name:?}")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        self.grid.spec()?;
        self.scene.validate()?;
        for (i, s) in self.streams.iter().enumerate() {
            s.stream()?;
            if !(s.fusion_weight > 0.0) || !s.fusion_weight.is_finite() {
                return bad(format!("stream {:?} needs a positive fusion weight", s.name));
            }
            if self.streams[..i].iter().any(|o| o.name == s.name) {
                return bad(format!("duplicate stream {:?}", s.name));
            }
        }
        self.stream(&self.reference)?;
        if self.asynchronous.is_empty() {
            return bad("at least one asynchronous stream is required".into());
        }
        for a in &self.asynchronous {
            self.stream(a)?;
            if *a == self.reference {
                return bad("the reference stream cannot be asynchronous".into());
            }
        }
        if self.dt_sweep_s.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return bad("dt sweep values must be finite and >= 0".into());
        }
        let t_ref = self.reference_time()?;
        if let Some(d) = self.dt_sweep_s.iter().find(|d| t_ref - **d < -1e-9) {
            return bad(format!("dt {d} s reaches before the scene start (reference at {t_ref} s)"));
        }
        if t_ref > self.scene.duration_s {
            return bad("reference time lies after the scene end".into());
        }
        if !(self.detection_threshold > 0.0 && self.detection_threshold < 1.0) {
            return bad("detection threshold must lie in (0, 1)".into());
        }
        if self.pipelines.is_empty() {
            return bad("no pipelines configured".into());
        }
        let t = &self.training;
        if !(t.max_dt_s > 0.0) || t.max_reference_time_s < t.max_dt_s || t.max_reference_time_s > self.scene.duration_s {
            return bad("training needs 0 < max_dt_s <= max_reference_time_s <= scene duration".into());
        }
        if t.kinds.iter().any(|k| !k.is_learned()) {
            return bad("training kinds must be learned estimators".into());
        }
        t.hyper.validate()?;
        if !(self.warper.motion_threshold_m >= 0.0) {
            return bad("warper motion threshold must be >= 0".into());
        }
        Ok(())
    }

    /// Reference timestamp snapped to the reference stream's frames.
    pub fn reference_time(&self) -> Result<f64> {
        let s = self.stream(&self.reference)?.stream()?;
        Ok(crate::scenesim::nearest_frame(&s, self.reference_time_s, 0.0))
    }
}
