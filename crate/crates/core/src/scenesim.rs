//! Synthetic driving scenes, multi-rate sensor streams and BEV rasterization.
//!
//! A [`Scene`] holds an ego trajectory and a set of box tracks in world
//! coordinates. Sensor frames are rasterized into ego-frame BEV feature maps
//! with four channels: occupancy, a per-track identity signature and a
//! two-channel sweep-motion cue (LiDAR only, see [`SWEEP_WINDOW_S`]).

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{footprint_owners, BevGridSpec, Box2, CellIndex, Point2, Pose2};

pub const SCENE_SCHEMA_VERSION: u32 = 1;

pub const CH_OCCUPANCY: usize = 0;
pub const CH_IDENTITY: usize = 1;
pub const CH_MOTION_X: usize = 2;
pub const CH_MOTION_Y: usize = 3;
pub const FEATURE_CHANNELS: usize = 4;

/// Accumulation window of the LiDAR sweep history. The motion channels carry
/// the object's ego-frame displacement over this window.
pub const SWEEP_WINDOW_S: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Lidar,
    Camera,
}

impl Modality {
    pub fn noise_amplitude(self) -> f64 {
        match self {
            Modality::Lidar => 0.05,
            Modality::Camera => 0.15,
        }
    }

    pub fn blurred(self) -> bool {
        matches!(self, Modality::Camera)
    }

    pub fn tag(self) -> u8 {
        match self {
            Modality::Lidar => 0,
            Modality::Camera => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Lidar => "lidar",
            Modality::Camera => "camera",
        }
    }
}

/// Advances a unicycle moving at `speed` along its heading while turning at
/// `yaw_rate`, for `dt` seconds.
fn unicycle(p: Pose2, speed: f64, yaw_rate: f64, dt: f64) -> Pose2 {
    if yaw_rate.abs() < 1e-12 {
        let (s, c) = p.yaw.sin_cos();
        return Pose2::new(p.x + speed * dt * c, p.y + speed * dt * s, p.yaw);
    }
    let yaw1 = p.yaw + yaw_rate * dt;
    let r = speed / yaw_rate;
    Pose2::new(
        p.x + r * (yaw1.sin() - p.yaw.sin()),
        p.y - r * (yaw1.cos() - p.yaw.cos()),
        yaw1,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoSegment {
    pub duration_s: f64,
    pub speed_mps: f64,
    pub yaw_rate_radps: f64,
}

/// Piecewise constant-velocity ego motion; the last segment extends forever.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoTrajectory {
    pub initial: Pose2,
    pub segments: Vec<EgoSegment>,
}

impl EgoTrajectory {
    pub fn stationary(pose: Pose2) -> Self {
        Self {
            initial: pose,
            segments: Vec::new(),
        }
    }

    pub fn constant(initial: Pose2, speed_mps: f64, yaw_rate_radps: f64) -> Self {
        Self {
            initial,
            segments: vec![EgoSegment {
                duration_s: f64::INFINITY,
                speed_mps,
                yaw_rate_radps,
            }],
        }
    }

    pub fn pose_at(&self, t: f64) -> Pose2 {
        let mut pose = self.initial;
        let mut t0 = 0.0;
        for (k, seg) in self.segments.iter().enumerate() {
            let last = k + 1 == self.segments.len();
            let span = if last { t - t0 } else { seg.duration_s.min(t - t0) };
            if span <= 0.0 {
                break;
            }
            pose = unicycle(pose, seg.speed_mps, seg.yaw_rate_radps, span);
            t0 += span;
            if t0 >= t {
                break;
            }
        }
        pose
    }

    /// World-frame velocity of the ego origin at time `t`.
    pub fn velocity_at(&self, t: f64) -> Point2 {
        let pose = self.pose_at(t);
        let mut t0 = 0.0;
        let mut speed = 0.0;
        for (k, seg) in self.segments.iter().enumerate() {
            speed = seg.speed_mps;
            if k + 1 == self.segments.len() || t < t0 + seg.duration_s {
                break;
            }
            t0 += seg.duration_s;
        }
        Point2::new(pose.yaw.cos(), pose.yaw.sin()) * speed
    }
}

/// A rigid object moving at constant speed and yaw rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxTrack {
    pub id: u32,
    pub length: f64,
    pub width: f64,
    /// Pose at t = 0 in world coordinates.
    pub initial: Pose2,
    pub speed_mps: f64,
    pub yaw_rate_radps: f64,
}

impl BoxTrack {
    pub fn pose_at(&self, t: f64) -> Pose2 {
        unicycle(self.initial, self.speed_mps, self.yaw_rate_radps, t)
    }

    pub fn box_at(&self, t: f64) -> Box2 {
        Box2 {
            center: self.pose_at(t),
            length: self.length,
            width: self.width,
        }
    }

    /// World-frame velocity of the box center.
    pub fn velocity_at(&self, t: f64) -> Point2 {
        let yaw = self.pose_at(t).yaw;
        Point2::new(yaw.cos(), yaw.sin()) * self.speed_mps
    }

    pub fn speed(&self) -> f64 {
        self.speed_mps
    }

    /// Stable per-track value in `[0.25, 1)` written to the identity channel.
    pub fn signature(&self) -> f64 {
        let golden = 0.618_033_988_749_894_9;
        0.25 + 0.75 * ((self.id as f64 + 1.0) * golden).fract()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorStream {
    pub name: String,
    pub frequency_hz: f64,
    pub phase_s: f64,
    pub modality: Modality,
}

impl SensorStream {
    pub fn new(name: impl Into<String>, frequency_hz: f64, phase_s: f64, modality: Modality) -> Result<Self> {
        if !(frequency_hz > 0.0) || !frequency_hz.is_finite() || !phase_s.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "stream frequency must be positive and phase finite, got {frequency_hz} Hz / {phase_s} s"
            )));
        }
        Ok(Self {
            name: name.into(),
            frequency_hz,
            phase_s,
            modality,
        })
    }

    pub fn frame_time(&self, k: u64) -> f64 {
        self.phase_s + k as f64 / self.frequency_hz
    }

    /// Index of the frame closest to `t`; ties go to the earlier frame.
    pub fn nearest_index(&self, t: f64) -> u64 {
        let x = (t - self.phase_s) * self.frequency_hz;
        if x <= 0.0 {
            return 0;
        }
        let k = x.floor();
        let k = if x - k > 0.5 { k + 1.0 } else { k };
        k as u64
    }
}

/// Timestamp of the frame of `stream` closest to `reference_t - offset`.
pub fn nearest_frame(stream: &SensorStream, reference_t: f64, offset: f64) -> f64 {
    debug_assert!(offset >= 0.0, "offset must be non-negative");
    stream.frame_time(stream.nearest_index(reference_t - offset))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub object_count: usize,
    pub dynamic_fraction: f64,
    pub speed_min_mps: f64,
    pub speed_max_mps: f64,
    pub yaw_rate_max_radps: f64,
    pub length_min_m: f64,
    pub length_max_m: f64,
    pub width_min_m: f64,
    pub width_max_m: f64,
    pub ego_speed_min_mps: f64,
    pub ego_speed_max_mps: f64,
    pub ego_yaw_rate_max_radps: f64,
    pub ego_segments: usize,
    /// Objects are placed with centers in `[-h, h]^2` around the ego at t = 0.
    pub placement_half_extent_m: f64,
    /// Minimum clearance between footprints.
    pub min_gap_m: f64,
    /// Clearance is enforced over `[0, separation_horizon_s]`.
    pub separation_horizon_s: f64,
    pub duration_s: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            object_count: 8,
            dynamic_fraction: 0.5,
            speed_min_mps: 1.0,
            speed_max_mps: 3.5,
            yaw_rate_max_radps: 0.2,
            length_min_m: 3.5,
            length_max_m: 4.8,
            width_min_m: 1.6,
            width_max_m: 2.0,
            ego_speed_min_mps: 0.0,
            ego_speed_max_mps: 4.0,
            ego_yaw_rate_max_radps: 0.1,
            ego_segments: 4,
            placement_half_extent_m: 10.0,
            min_gap_m: 1.5,
            separation_horizon_s: 1.0,
            duration_s: 20.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSceneConfig(msg));
        let finite = [
            self.dynamic_fraction,
            self.speed_min_mps,
            self.speed_max_mps,
            self.yaw_rate_max_radps,
            self.length_min_m,
            self.length_max_m,
            self.width_min_m,
            self.width_max_m,
            self.ego_speed_min_mps,
            self.ego_speed_max_mps,
            self.ego_yaw_rate_max_radps,
            self.placement_half_extent_m,
            self.min_gap_m,
            self.separation_horizon_s,
            self.duration_s,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("all numeric fields must be finite".into());
        }
        if !(0.0..=1.0).contains(&self.dynamic_fraction) {
            return bad(format!("dynamic_fraction {} not in [0, 1]", self.dynamic_fraction));
        }
        if self.speed_min_mps < 0.0 || self.speed_min_mps > self.speed_max_mps {
            return bad(format!(
                "speed range [{}, {}] must be non-negative and ordered",
                self.speed_min_mps, self.speed_max_mps
            ));
        }
        if self.ego_speed_min_mps < 0.0 || self.ego_speed_min_mps > self.ego_speed_max_mps {
            return bad(format!(
                "ego speed range [{}, {}] must be non-negative and ordered",
                self.ego_speed_min_mps, self.ego_speed_max_mps
            ));
        }
        if self.yaw_rate_max_radps < 0.0 || self.ego_yaw_rate_max_radps < 0.0 {
            return bad("yaw-rate bounds must be non-negative".into());
        }
        if !(self.length_min_m > 0.0 && self.length_min_m <= self.length_max_m) {
            return bad("length range must be positive and ordered".into());
        }
        if !(self.width_min_m > 0.0 && self.width_min_m <= self.width_max_m) {
            return bad("width range must be positive and ordered".into());
        }
        if !(self.duration_s > 0.0) {
            return bad("duration must be positive".into());
        }
        if self.ego_segments == 0 {
            return bad("at least one ego segment is required".into());
        }
        if self.placement_half_extent_m < 0.0 || self.min_gap_m < 0.0 || self.separation_horizon_s < 0.0 {
            return bad("placement extent, gap and horizon must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub schema_version: u32,
    pub seed: u64,
    pub config: SceneConfig,
    pub ego: EgoTrajectory,
    pub tracks: Vec<BoxTrack>,
}

impl Scene {
    pub fn duration(&self) -> f64 {
        self.config.duration_s
    }

    /// Tracks' footprints at time `t` expressed in the ego frame at `t`.
    pub fn boxes_in_ego(&self, t: f64) -> Vec<(BoxTrack, Box2)> {
        let world_to_ego = self.ego.pose_at(t).inverse();
        self.tracks
            .iter()
            .map(|tr| {
                let b = tr.box_at(t);
                (*tr, b.with_center(world_to_ego.compose(&b.center)))
            })
            .collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let scene: Scene = toml::from_str(text)?;
        if scene.schema_version != SCENE_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported scene schema_version {}",
                scene.schema_version
            )));
        }
        scene.config.validate()?;
        Ok(scene)
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Generates a scene deterministically from `seed`.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let seg_len = config.duration_s / config.ego_segments as f64;
    let segments = (0..config.ego_segments)
        .map(|_| EgoSegment {
            duration_s: seg_len,
            speed_mps: uniform(&mut rng, config.ego_speed_min_mps, config.ego_speed_max_mps),
            yaw_rate_radps: uniform(&mut rng, -config.ego_yaw_rate_max_radps, config.ego_yaw_rate_max_radps),
        })
        .collect();
    let ego = EgoTrajectory {
        initial: Pose2::IDENTITY,
        segments,
    };

    let n = config.object_count;
    let n_dynamic = (n as f64 * config.dynamic_fraction).round() as usize;
    // choose which ids are dynamic with a partial Fisher-Yates shuffle
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..n_dynamic.min(n) {
        let j = rng.gen_range(i..n);
        order.swap(i, j);
    }
    let mut dynamic = vec![false; n];
    for &i in &order[..n_dynamic.min(n)] {
        dynamic[i] = true;
    }

    let steps = (config.separation_horizon_s / 0.1).ceil() as usize;
    let times: Vec<f64> = (0..=steps)
        .map(|k| (k as f64 * 0.1).min(config.separation_horizon_s))
        .collect();
    let h = config.placement_half_extent_m;
    let mut tracks: Vec<BoxTrack> = Vec::with_capacity(n);
    for (id, &is_dynamic) in dynamic.iter().enumerate() {
        let mut placed = None;
        for _ in 0..2000 {
            let (speed, yaw_rate) = if is_dynamic {
                (
                    uniform(&mut rng, config.speed_min_mps, config.speed_max_mps),
                    uniform(&mut rng, -config.yaw_rate_max_radps, config.yaw_rate_max_radps),
                )
            } else {
                (0.0, 0.0)
            };
            let cand = BoxTrack {
                id: id as u32,
                length: uniform(&mut rng, config.length_min_m, config.length_max_m),
                width: uniform(&mut rng, config.width_min_m, config.width_max_m),
                initial: Pose2::new(uniform(&mut rng, -h, h), uniform(&mut rng, -h, h), uniform(&mut rng, -PI, PI)),
                speed_mps: speed,
                yaw_rate_radps: yaw_rate,
            };
            let clear = tracks.iter().all(|other| {
                times
                    .iter()
                    .all(|&t| !cand.box_at(t).overlaps(&other.box_at(t), 0.5 * config.min_gap_m))
            });
            if clear {
                placed = Some(cand);
                break;
            }
        }
        match placed {
            Some(t) => tracks.push(t),
            None => {
                return Err(Error::InvalidSceneConfig(format!(
                    "could not place {n} non-overlapping objects within +/-{h} m"
                )))
            }
        }
    }

    Ok(Scene {
        schema_version: SCENE_SCHEMA_VERSION,
        seed,
        config: config.clone(),
        ego,
        tracks,
    })
}

/// Per-cell feature vectors on a BEV grid, channel-interleaved in row-major
/// cell order.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeatureMap {
    pub grid: BevGridSpec,
    pub channels: usize,
    pub data: Vec<f64>,
    pub timestamp: f64,
    pub ego_pose: Pose2,
}

impl BevFeatureMap {
    pub fn zeros(grid: BevGridSpec, channels: usize, timestamp: f64, ego_pose: Pose2) -> Self {
        assert!(channels >= 1, "feature maps need at least one channel");
        Self {
            grid,
            channels,
            data: vec![0.0; grid.cell_count() * channels],
            timestamp,
            ego_pose,
        }
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.grid.width + col) * self.channels + ch]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        let w = self.grid.width;
        self.data[(row * w + col) * self.channels + ch] = v;
    }

    pub fn cell(&self, idx: CellIndex) -> &[f64] {
        let start = self.grid.linear(idx) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// One channel as a row-major plane.
    pub fn plane(&self, ch: usize) -> Vec<f64> {
        self.data.iter().skip(ch).step_by(self.channels).copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_shape(&self) -> Result<()> {
        if self.data.len() != self.grid.cell_count() * self.channels {
            return Err(Error::Format(format!(
                "feature data length {} does not match {}x{}x{}",
                self.data.len(),
                self.grid.height,
                self.grid.width,
                self.channels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterOptions {
    pub modality: Modality,
    pub noise_seed: u64,
    /// Overrides the modality's default noise amplitude (0 disables noise).
    pub noise_amplitude: Option<f64>,
}

impl RasterOptions {
    pub fn new(modality: Modality, noise_seed: u64) -> Self {
        Self {
            modality,
            noise_seed,
            noise_amplitude: None,
        }
    }

    pub fn noiseless(modality: Modality) -> Self {
        Self {
            modality,
            noise_seed: 0,
            noise_amplitude: Some(0.0),
        }
    }

    pub fn amplitude(&self) -> f64 {
        self.noise_amplitude.unwrap_or_else(|| self.modality.noise_amplitude())
    }
}

fn gaussian_blur(map: &mut BevFeatureMap, sigma_cells: f64, radius: usize) {
    let kernel: Vec<f64> = {
        let raw: Vec<f64> = (-(radius as i64)..=radius as i64)
            .map(|k| (-(k * k) as f64 / (2.0 * sigma_cells * sigma_cells)).exp())
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    };
    let (w, h, c) = (map.grid.width, map.grid.height, map.channels);
    let r = radius as i64;
    let mut tmp = vec![0.0; map.data.len()];
    for row in 0..h {
        for col in 0..w {
            for (k, kv) in kernel.iter().enumerate() {
                let cc = col as i64 + k as i64 - r;
                if cc < 0 || cc >= w as i64 {
                    continue;
                }
                let src = (row * w + cc as usize) * c;
                let dst = (row * w + col) * c;
                for ch in 0..c {
                    tmp[dst + ch] += kv * map.data[src + ch];
                }
            }
        }
    }
    map.data.iter_mut().for_each(|v| *v = 0.0);
    for row in 0..h {
        for col in 0..w {
            for (k, kv) in kernel.iter().enumerate() {
                let rr = row as i64 + k as i64 - r;
                if rr < 0 || rr >= h as i64 {
                    continue;
                }
                let src = (rr as usize * w + col) * c;
                let dst = (row * w + col) * c;
                for ch in 0..c {
                    map.data[dst + ch] += kv * tmp[src + ch];
                }
            }
        }
    }
}

fn noise_rng(noise_seed: u64, modality: Modality) -> ChaCha8Rng {
    let mixed = noise_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0xD1B5_4A32_D192_ED03 ^ modality.tag() as u64);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Rasterizes `scene` at time `t` into the ego frame at `t` with the
/// modality's default noise.
pub fn rasterize_bev(
    scene: &Scene,
    t: f64,
    grid: &BevGridSpec,
    modality: Modality,
    noise_seed: u64,
) -> Result<BevFeatureMap> {
    rasterize_bev_with(scene, t, grid, &RasterOptions::new(modality, noise_seed))
}

pub fn rasterize_bev_with(scene: &Scene, t: f64, grid: &BevGridSpec, opts: &RasterOptions) -> Result<BevFeatureMap> {
    grid.validate()?;
    if !(t >= 0.0 && t <= scene.duration()) {
        return Err(Error::TimeOutOfRange {
            t,
            duration: scene.duration(),
        });
    }
    let ego_pose = scene.ego.pose_at(t);
    let mut map = BevFeatureMap::zeros(*grid, FEATURE_CHANNELS, t, ego_pose);

    let boxes = scene.boxes_in_ego(t);
    let footprints: Vec<Box2> = boxes.iter().map(|(_, b)| *b).collect();
    let ids: Vec<u32> = boxes.iter().map(|(tr, _)| tr.id).collect();
    let owners = footprint_owners(&footprints, &ids, grid);
    let motion: Vec<Point2> = boxes
        .iter()
        .map(|(tr, _)| ego_pose.inverse().rotate(tr.velocity_at(t)) * SWEEP_WINDOW_S)
        .collect();
    for (lin, owner) in owners.iter().enumerate() {
        let Some(k) = *owner else { continue };
        let base = lin * FEATURE_CHANNELS;
        map.data[base + CH_OCCUPANCY] = 1.0;
        map.data[base + CH_IDENTITY] = boxes[k].0.signature();
        if opts.modality == Modality::Lidar {
            map.data[base + CH_MOTION_X] = motion[k].x;
            map.data[base + CH_MOTION_Y] = motion[k].y;
        }
    }

    if opts.modality.blurred() {
        gaussian_blur(&mut map, 1.0, 2);
    }

    let amp = opts.amplitude();
    if amp > 0.0 {
        let mut rng = noise_rng(opts.noise_seed, opts.modality);
        for v in map.data.iter_mut() {
            *v += rng.gen_range(-amp..=amp);
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::points_in_box;

    fn grid() -> BevGridSpec {
        BevGridSpec::centered(64, 0.5).unwrap()
    }

    fn static_scene(tracks: Vec<BoxTrack>, ego: EgoTrajectory) -> Scene {
        Scene {
            schema_version: SCENE_SCHEMA_VERSION,
            seed: 0,
            config: SceneConfig::default(),
            ego,
            tracks,
        }
    }

    fn track(id: u32, x: f64, y: f64, yaw: f64, speed: f64, yaw_rate: f64) -> BoxTrack {
        BoxTrack {
            id,
            length: 4.0,
            width: 2.0,
            initial: Pose2::new(x, y, yaw),
            speed_mps: speed,
            yaw_rate_radps: yaw_rate,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig::default();
        let a = generate_scene(1, &cfg).unwrap();
        let b = generate_scene(1, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_toml().unwrap(), b.to_toml().unwrap());
        assert_ne!(a, generate_scene(2, &cfg).unwrap());
    }

    #[test]
    fn all_static_when_dynamic_fraction_zero() {
        let cfg = SceneConfig {
            dynamic_fraction: 0.0,
            ..SceneConfig::default()
        };
        let s = generate_scene(3, &cfg).unwrap();
        assert!(s.tracks.iter().all(|t| t.speed() == 0.0));
    }

    #[test]
    fn unique_ids_for_twenty_objects() {
        let cfg = SceneConfig {
            object_count: 20,
            placement_half_extent_m: 30.0,
            ..SceneConfig::default()
        };
        let s = generate_scene(4, &cfg).unwrap();
        let mut ids: Vec<u32> = s.tracks.iter().map(|t| t.id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 20);
    }

    #[test]
    fn dynamic_count_and_speed_range() {
        let cfg = SceneConfig::default();
        let s = generate_scene(5, &cfg).unwrap();
        let dynamic: Vec<_> = s.tracks.iter().filter(|t| t.speed() > 0.0).collect();
        assert_eq!(dynamic.len(), 4);
        for t in dynamic {
            assert!(t.speed() >= cfg.speed_min_mps && t.speed() <= cfg.speed_max_mps);
        }
        for t in &s.tracks {
            let p = t.initial;
            assert!(p.x.abs() <= cfg.placement_half_extent_m && p.y.abs() <= cfg.placement_half_extent_m);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            SceneConfig {
                dynamic_fraction: 1.5,
                ..SceneConfig::default()
            },
            SceneConfig {
                speed_min_mps: -1.0,
                ..SceneConfig::default()
            },
            SceneConfig {
                speed_min_mps: 5.0,
                speed_max_mps: 1.0,
                ..SceneConfig::default()
            },
            SceneConfig {
                object_count: 500,
                placement_half_extent_m: 2.0,
                ..SceneConfig::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(generate_scene(0, &cfg), Err(Error::InvalidSceneConfig(_))));
        }
    }

    #[test]
    fn scene_toml_round_trip() {
        let s = generate_scene(9, &SceneConfig::default()).unwrap();
        let text = s.to_toml().unwrap();
        assert!(text.contains("schema_version = 1"));
        assert_eq!(Scene::from_toml(&text).unwrap(), s);
    }

    #[test]
    fn nearest_frame_examples() {
        let lidar = SensorStream::new("lidar", 20.0, 0.0, Modality::Lidar).unwrap();
        assert_eq!(nearest_frame(&lidar, 10.0, 0.25), 9.75);
        assert_eq!(nearest_frame(&lidar, 10.0, 0.0), 10.0);

        let cam = SensorStream::new("cam", 12.0, 0.0, Modality::Camera).unwrap();
        let reference = cam.frame_time(120);
        // scan every frame time for the closest one
        let target = reference - 0.1;
        let oracle = (0..400u64)
            .map(|k| cam.frame_time(k))
            .min_by(|a, b| (a - target).abs().partial_cmp(&(b - target).abs()).unwrap())
            .unwrap();
        assert_eq!(nearest_frame(&cam, reference, 0.1), oracle);
        assert!((reference - oracle - 1.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn nearest_frame_ties_go_earlier() {
        let s = SensorStream::new("s", 10.0, 0.0, Modality::Lidar).unwrap();
        // 0.25 s lies halfway between 0.2 and 0.3
        assert_eq!(s.nearest_index(0.25), 2);
        assert_eq!(s.nearest_index(-1.0), 0);
    }

    #[test]
    fn twenty_hz_quantization_is_exact() {
        let s = SensorStream::new("lidar", 20.0, 0.0, Modality::Lidar).unwrap();
        let reference = s.frame_time(200);
        for k in 0..=10u64 {
            assert_eq!(nearest_frame(&s, reference, k as f64 * 0.05), s.frame_time(200 - k));
        }
    }

    #[test]
    fn track_speed_is_respected() {
        let tr = track(0, 1.0, 2.0, 0.4, 3.0, 0.0);
        for (t, d) in [(0.0, 0.5), (1.3, 0.25), (7.0, 2.0)] {
            let a = tr.pose_at(t).translation();
            let b = tr.pose_at(t + d).translation();
            assert!((a.distance(b) - 3.0 * d).abs() < 1e-9);
        }
    }

    #[test]
    fn trajectories_are_continuous() {
        let s = generate_scene(12, &SceneConfig::default()).unwrap();
        assert_eq!(s.ego.pose_at(0.0), s.ego.initial);
        for k in 1..s.config.ego_segments {
            let tb = k as f64 * s.config.duration_s / s.config.ego_segments as f64;
            let a = s.ego.pose_at(tb - 1e-9).translation();
            let b = s.ego.pose_at(tb + 1e-9).translation();
            assert!(a.distance(b) < 1e-6);
        }
    }

    #[test]
    fn static_scene_maps_are_identical_across_time() {
        let scene = static_scene(vec![track(0, 3.0, 1.0, 0.3, 0.0, 0.0)], EgoTrajectory::stationary(Pose2::IDENTITY));
        for m in [Modality::Lidar, Modality::Camera] {
            let a = rasterize_bev(&scene, 0.5, &grid(), m, 17).unwrap();
            let b = rasterize_bev(&scene, 3.0, &grid(), m, 17).unwrap();
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn occupancy_sum_matches_points_in_box() {
        let scene = static_scene(vec![track(0, 2.0, -1.0, 0.7, 0.0, 0.0)], EgoTrajectory::stationary(Pose2::IDENTITY));
        let map = rasterize_bev(&scene, 0.0, &grid(), Modality::Lidar, 5).unwrap();
        let cells = points_in_box(&scene.tracks[0].box_at(0.0), &grid());
        let n = cells.len() as f64;
        let sum: f64 = cells.iter().map(|&c| map.cell(c)[CH_OCCUPANCY]).sum();
        let amp = Modality::Lidar.noise_amplitude();
        assert!(sum >= n * (1.0 - amp) && sum <= n * (1.0 + amp), "sum {sum} for {n} cells");
    }

    #[test]
    fn ego_advance_shifts_map() {
        // ego drives 5 m along x in 1 s; the world is static
        let tracks = vec![track(0, 4.0, 1.0, 0.3, 0.0, 0.0), track(1, -3.0, -4.0, 1.2, 0.0, 0.0)];
        let scene = static_scene(tracks, EgoTrajectory::constant(Pose2::IDENTITY, 5.0, 0.0));
        let g = grid();
        for m in [Modality::Lidar, Modality::Camera] {
            let opts = RasterOptions::noiseless(m);
            let a = rasterize_bev_with(&scene, 0.0, &g, &opts).unwrap();
            let b = rasterize_bev_with(&scene, 1.0, &g, &opts).unwrap();
            let shift = (5.0 / g.cell) as usize;
            for row in 0..g.height {
                for col in 0..g.width - shift {
                    for ch in 0..FEATURE_CHANNELS {
                        assert!((b.get(row, col, ch) - a.get(row, col + shift, ch)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn time_out_of_range_is_an_error() {
        let s = generate_scene(1, &SceneConfig::default()).unwrap();
        assert!(matches!(
            rasterize_bev(&s, 25.0, &grid(), Modality::Lidar, 0),
            Err(Error::TimeOutOfRange { .. })
        ));
    }

    #[test]
    fn lidar_motion_channel_encodes_sweep_displacement() {
        let scene = static_scene(vec![track(0, 0.0, 0.0, 0.0, 2.0, 0.0)], EgoTrajectory::stationary(Pose2::IDENTITY));
        let map = rasterize_bev_with(&scene, 0.0, &grid(), &RasterOptions::noiseless(Modality::Lidar)).unwrap();
        let c = grid().nearest_cell(Point2::ZERO).unwrap();
        assert!((map.cell(c)[CH_MOTION_X] - 2.0 * SWEEP_WINDOW_S).abs() < 1e-12);
        let cam = rasterize_bev_with(&scene, 0.0, &grid(), &RasterOptions::noiseless(Modality::Camera)).unwrap();
        assert_eq!(cam.cell(c)[CH_MOTION_X], 0.0);
    }
}
