//! Ego-motion flow fields and dense ground-truth object flow from box tracks.
//!
//! Both kinds of field live on a [`BevGridSpec`] anchored in the ego frame of
//! their *source* timestamp: a forward field (t0 -> t1) is indexed by t0 cells,
//! a backward field (t1 -> t0) by t1 cells.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{footprint_owners, BevGridSpec, Box2, CellIndex, GridCoord, Point2, Pose2};
use crate::scenesim::{BoxTrack, EgoTrajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowDirection {
    /// t0 -> t1, indexed by cells of the t0 grid.
    Forward,
    /// t1 -> t0, indexed by cells of the t1 grid.
    Backward,
}

impl FlowDirection {
    pub fn tag(self) -> u8 {
        match self {
            FlowDirection::Forward => 0,
            FlowDirection::Backward => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(FlowDirection::Forward),
            1 => Ok(FlowDirection::Backward),
            t => Err(Error::Format(format!("unknown flow direction tag {t}"))),
        }
    }

    pub fn reversed(self) -> Self {
        match self {
            FlowDirection::Forward => FlowDirection::Backward,
            FlowDirection::Backward => FlowDirection::Forward,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowUnit {
    Meters,
    MetersPerSecond,
}

impl FlowUnit {
    pub fn tag(self) -> u8 {
        match self {
            FlowUnit::Meters => 0,
            FlowUnit::MetersPerSecond => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(FlowUnit::Meters),
            1 => Ok(FlowUnit::MetersPerSecond),
            t => Err(Error::Format(format!("unknown flow unit tag {t}"))),
        }
    }
}

/// Per-cell 2D vectors on a grid, stored as row-major `(dx, dy)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub grid: BevGridSpec,
    pub data: Vec<f64>,
    pub direction: FlowDirection,
    pub unit: FlowUnit,
}

impl FlowField {
    pub fn zeros(grid: BevGridSpec, direction: FlowDirection, unit: FlowUnit) -> Self {
        Self {
            grid,
            data: vec![0.0; grid.cell_count() * 2],
            direction,
            unit,
        }
    }

    pub fn from_fn(
        grid: BevGridSpec,
        direction: FlowDirection,
        unit: FlowUnit,
        mut f: impl FnMut(CellIndex, Point2) -> Point2,
    ) -> Self {
        let mut field = Self::zeros(grid, direction, unit);
        for idx in grid.cells() {
            let v = f(idx, grid.center_unchecked(idx.row, idx.col));
            field.set(idx, v);
        }
        field
    }

    pub fn at(&self, row: usize, col: usize) -> Point2 {
        let k = 2 * (row * self.grid.width + col);
        Point2::new(self.data[k], self.data[k + 1])
    }

    pub fn get(&self, idx: CellIndex) -> Point2 {
        self.at(idx.row, idx.col)
    }

    pub fn set(&mut self, idx: CellIndex, v: Point2) {
        let k = 2 * self.grid.linear(idx);
        self.data[k] = v.x;
        self.data[k + 1] = v.y;
    }

    pub fn vectors(&self) -> impl Iterator<Item = Point2> + '_ {
        self.data.chunks_exact(2).map(|v| Point2::new(v[0], v[1]))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn max_magnitude(&self) -> f64 {
        self.vectors().map(Point2::norm).fold(0.0, f64::max)
    }

    /// Every vector multiplied by `factor`, retagged with `unit`.
    pub fn scaled(&self, factor: f64, unit: FlowUnit) -> Self {
        Self {
            grid: self.grid,
            data: self.data.iter().map(|v| v * factor).collect(),
            direction: self.direction,
            unit,
        }
    }

    /// Bilinear sample at fractional grid coordinates; taps off the grid read
    /// as zero.
    pub fn sample(&self, g: GridCoord) -> Point2 {
        let mut out = [0.0; 2];
        crate::warp::bilinear_into(&self.data, &self.grid, 2, g, &mut out);
        Point2::new(out[0], out[1])
    }

    /// Bilinear sample with coordinates clamped to the outermost cell centers.
    pub fn sample_clamped(&self, g: GridCoord) -> Point2 {
        let c = GridCoord::new(
            g.col.clamp(0.0, (self.grid.width - 1) as f64),
            g.row.clamp(0.0, (self.grid.height - 1) as f64),
        );
        self.sample(c)
    }

    pub fn sample_world(&self, pt: Point2) -> Point2 {
        self.sample(self.grid.world_to_cell(pt))
    }

    pub fn ensure_compatible(&self, other: &FlowField) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch(format!("{:?} vs {:?}", self.grid, other.grid)));
        }
        if self.direction != other.direction {
            return Err(Error::DirectionMismatch {
                expected: self.direction,
                found: other.direction,
            });
        }
        Ok(())
    }

    pub fn ensure_direction(&self, expected: FlowDirection) -> Result<()> {
        if self.direction != expected {
            return Err(Error::DirectionMismatch {
                expected,
                found: self.direction,
            });
        }
        Ok(())
    }
}

/// Flow induced by ego motion alone.
///
/// Each cell center `c` of the source ego frame is mapped to the target frame
/// by the relative ego transform `T`; the stored vector is `T(c) - c`. The
/// source is t0 for [`FlowDirection::Forward`] and t1 for backward.
pub fn emc_flow(ego_t0: &Pose2, ego_t1: &Pose2, grid: &BevGridSpec, direction: FlowDirection) -> FlowField {
    let (src, dst) = match direction {
        FlowDirection::Forward => (ego_t0, ego_t1),
        FlowDirection::Backward => (ego_t1, ego_t0),
    };
    if src == dst {
        return FlowField::zeros(*grid, direction, FlowUnit::Meters);
    }
    let rel = dst.inverse().compose(src);
    FlowField::from_fn(*grid, direction, FlowUnit::Meters, |_, c| rel.apply(c) - c)
}

/// Motion of a box between two timestamps, expressed in the source ego frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxMotion {
    pub id: u32,
    /// Footprint at the source time, source ego frame.
    pub source: Box2,
    /// Pose at the destination time, source ego frame.
    pub destination: Pose2,
    /// `destination * source^-1`: maps source-time box points to their
    /// destination-time positions.
    pub motion: Pose2,
}

pub fn box_motions(tracks: &[BoxTrack], t_src: f64, t_dst: f64, ego: &EgoTrajectory) -> Vec<BoxMotion> {
    let to_src_frame = ego.pose_at(t_src).inverse();
    tracks
        .iter()
        .map(|tr| {
            let b_src = to_src_frame.compose(&tr.pose_at(t_src));
            let b_dst = to_src_frame.compose(&tr.pose_at(t_dst));
            BoxMotion {
                id: tr.id,
                source: Box2 {
                    center: b_src,
                    length: tr.length,
                    width: tr.width,
                },
                destination: b_dst,
                motion: rigid_motion(&b_src, &b_dst),
            }
        })
        .collect()
}

/// `dst * src^-1`, exactly the identity when the two poses coincide.
fn rigid_motion(src: &Pose2, dst: &Pose2) -> Pose2 {
    if src == dst {
        Pose2::IDENTITY
    } else {
        dst.compose(&src.inverse())
    }
}

fn box_flow(
    tracks: &[BoxTrack],
    t_src: f64,
    t_dst: f64,
    ego: &EgoTrajectory,
    grid: &BevGridSpec,
    direction: FlowDirection,
) -> FlowField {
    let motions = box_motions(tracks, t_src, t_dst, ego);
    let boxes: Vec<Box2> = motions.iter().map(|m| m.source).collect();
    let ids: Vec<u32> = motions.iter().map(|m| m.id).collect();
    let owners = footprint_owners(&boxes, &ids, grid);
    let mut field = FlowField::zeros(*grid, direction, FlowUnit::Meters);
    for (lin, owner) in owners.into_iter().enumerate() {
        if let Some(k) = owner {
            let idx = grid.index_of(lin);
            let p = grid.center_unchecked(idx.row, idx.col);
            field.set(idx, motions[k].motion.apply(p) - p);
        }
    }
    field
}

/// Dense ground-truth object flow from t0 to t1 on the t0 ego grid.
///
/// Cells inside a box at t0 receive the rigid displacement of that box
/// between t0 and t1 (both expressed in the t0 ego frame, so ego motion is
/// excluded); all other cells are zero.
pub fn dense_gt_flow(tracks: &[BoxTrack], t0: f64, t1: f64, ego: &EgoTrajectory, grid: &BevGridSpec) -> FlowField {
    box_flow(tracks, t0, t1, ego, grid, FlowDirection::Forward)
}

/// Dense ground-truth object flow from t1 back to t0 on the t1 ego grid.
pub fn dense_gt_flow_backward(
    tracks: &[BoxTrack],
    t0: f64,
    t1: f64,
    ego: &EgoTrajectory,
    grid: &BevGridSpec,
) -> FlowField {
    box_flow(tracks, t1, t0, ego, grid, FlowDirection::Backward)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatterReport {
    /// Cells covered by at least one box at the source time.
    pub cells_covered: usize,
    pub max_discrepancy: f64,
    pub worst_cell: Option<CellIndex>,
}

/// Re-derives `flow` cell by cell with a brute-force containment search over
/// every track and reports the largest deviation.
pub fn scatter_check(
    flow: &FlowField,
    tracks: &[BoxTrack],
    t0: f64,
    t1: f64,
    ego: &EgoTrajectory,
    grid: &BevGridSpec,
) -> ScatterReport {
    let (t_src, t_dst) = match flow.direction {
        FlowDirection::Forward => (t0, t1),
        FlowDirection::Backward => (t1, t0),
    };
    let to_src_frame = ego.pose_at(t_src).inverse();
    let poses: Vec<(Pose2, Pose2)> = tracks
        .iter()
        .map(|tr| {
            (
                to_src_frame.compose(&tr.pose_at(t_src)),
                to_src_frame.compose(&tr.pose_at(t_dst)),
            )
        })
        .collect();

    let mut report = ScatterReport {
        cells_covered: 0,
        max_discrepancy: 0.0,
        worst_cell: None,
    };
    for row in 0..grid.height {
        for col in 0..grid.width {
            let p = Point2::new(grid.origin_x + col as f64 * grid.cell, grid.origin_y + row as f64 * grid.cell);
            let mut winner: Option<(f64, u32, usize)> = None;
            for (k, tr) in tracks.iter().enumerate() {
                let b = poses[k].0;
                let (s, c) = b.yaw.sin_cos();
                let (dx, dy) = (p.x - b.x, p.y - b.y);
                let inside = (c * dx + s * dy).abs() <= tr.length / 2.0 + crate::geometry::BOUNDARY_EPS
                    && (-s * dx + c * dy).abs() <= tr.width / 2.0 + crate::geometry::BOUNDARY_EPS;
                if !inside {
                    continue;
                }
                let d = p.distance(b.translation());
                let better = match winner {
                    None => true,
                    Some((wd, wid, _)) => d < wd || (d == wd && tr.id < wid),
                };
                if better {
                    winner = Some((d, tr.id, k));
                }
            }
            let expected = match winner {
                Some((_, _, k)) => {
                    report.cells_covered += 1;
                    let (b_src, b_dst) = poses[k];
                    rigid_motion(&b_src, &b_dst).apply(p) - p
                }
                None => Point2::ZERO,
            };
            let got = if flow.grid.contains_cell(CellIndex::new(row, col)) {
                flow.at(row, col)
            } else {
                Point2::new(f64::NAN, f64::NAN)
            };
            let err = (got.x - expected.x).abs().max((got.y - expected.y).abs());
            let err = if err.is_nan() { f64::INFINITY } else { err };
            if err > report.max_discrepancy {
                report.max_discrepancy = err;
                report.worst_cell = Some(CellIndex::new(row, col));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::points_in_box;
    use std::f64::consts::FRAC_PI_2;

    fn grid() -> BevGridSpec {
        BevGridSpec::centered(64, 0.5).unwrap()
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

    /// Maps a source-frame point to world and back into the target frame.
    fn two_frame_oracle(src: &Pose2, dst: &Pose2, c: Point2) -> Point2 {
        let world = src.apply(c);
        dst.inverse().apply(world) - c
    }

    #[test]
    fn emc_identity_is_zero() {
        let p = Pose2::new(3.0, -1.0, 0.4);
        assert!(emc_flow(&p, &p, &grid(), FlowDirection::Forward).is_zero());
    }

    #[test]
    fn emc_forward_translation() {
        let a = Pose2::IDENTITY;
        let b = Pose2::new(5.0, 0.0, 0.0);
        let f = emc_flow(&a, &b, &grid(), FlowDirection::Forward);
        for idx in grid().cells() {
            let c = grid().cell_center(idx).unwrap();
            let oracle = two_frame_oracle(&a, &b, c);
            assert!(f.get(idx).distance(oracle) < 1e-12);
            assert!(f.get(idx).distance(Point2::new(-5.0, 0.0)) < 1e-12);
        }
    }

    #[test]
    fn emc_rotation_in_place() {
        let a = Pose2::new(2.0, 1.0, 0.0);
        let b = Pose2::new(2.0, 1.0, FRAC_PI_2);
        let f = emc_flow(&a, &b, &grid(), FlowDirection::Forward);
        let back = emc_flow(&a, &b, &grid(), FlowDirection::Backward);
        let rot = Pose2::new(0.0, 0.0, -FRAC_PI_2);
        for idx in grid().cells() {
            let c = grid().cell_center(idx).unwrap();
            assert!(f.get(idx).distance(two_frame_oracle(&a, &b, c)) < 1e-12);
            assert!(f.get(idx).distance(rot.apply(c) - c) < 1e-12);
            assert!(back.get(idx).distance(two_frame_oracle(&b, &a, c)) < 1e-12);
        }
    }

    #[test]
    fn emc_fields_are_mutual_inverses() {
        let g = grid();
        let a = Pose2::new(0.0, 0.0, 0.0);
        let b = Pose2::new(1.2, 0.4, 0.05);
        let ab = emc_flow(&a, &b, &g, FlowDirection::Forward);
        let ba = emc_flow(&b, &a, &g, FlowDirection::Forward);
        let mut checked = 0;
        for idx in g.cells() {
            let c = g.cell_center(idx).unwrap();
            let landing = c + ab.get(idx);
            let lc = g.world_to_cell(landing);
            if lc.col < 0.0 || lc.row < 0.0 || lc.col > (g.width - 1) as f64 || lc.row > (g.height - 1) as f64 {
                continue;
            }
            let back = landing + ba.sample(lc);
            assert!(back.distance(c) < 1e-9, "cell {idx:?} returned {back:?}");
            checked += 1;
        }
        assert!(checked > 3000);
    }

    #[test]
    fn all_static_tracks_give_zero_flow() {
        let tracks = vec![track(0, 3.0, 2.0, 0.2, 0.0, 0.0), track(1, -5.0, 0.0, 1.0, 0.0, 0.0)];
        let ego = EgoTrajectory::constant(Pose2::IDENTITY, 4.0, 0.1);
        assert!(dense_gt_flow(&tracks, 0.0, 0.5, &ego, &grid()).is_zero());
    }

    #[test]
    fn translating_box_flow_is_velocity_times_dt() {
        let tracks = vec![track(0, 0.0, 0.0, 0.0, 4.0, 0.0)];
        let ego = EgoTrajectory::stationary(Pose2::IDENTITY);
        let f = dense_gt_flow(&tracks, 1.0, 1.5, &ego, &grid());
        let cells = points_in_box(&tracks[0].box_at(1.0), &grid());
        assert!(!cells.is_empty());
        for idx in grid().cells() {
            let v = f.get(idx);
            if cells.contains(&idx) {
                assert!(v.distance(Point2::new(2.0, 0.0)) < 1e-12);
            } else {
                assert_eq!(v, Point2::ZERO);
            }
        }
    }

    #[test]
    fn rotating_box_flow_matches_per_point_chain() {
        // quarter turn about the box's own center over one second
        let g = BevGridSpec::centered(33, 0.5).unwrap();
        let tracks = vec![track(0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2)];
        let ego = EgoTrajectory::stationary(Pose2::IDENTITY);
        let f = dense_gt_flow(&tracks, 0.0, 1.0, &ego, &g);
        let idx = g.nearest_cell(Point2::new(1.0, 0.0)).unwrap();
        assert!(f.get(idx).distance(Point2::new(-1.0, 1.0)) < 1e-12);
        let b0 = tracks[0].pose_at(0.0);
        let b1 = tracks[0].pose_at(1.0);
        for idx in points_in_box(&tracks[0].box_at(0.0), &g) {
            let p = g.cell_center(idx).unwrap();
            let chain = b1.apply(b0.inverse().apply(p)) - p;
            assert!(f.get(idx).distance(chain) < 1e-12);
        }
    }

    #[test]
    fn ego_motion_is_excluded() {
        // world-frame motion only: a moving ego must not change a static box's zero flow
        let tracks = vec![track(0, 6.0, 1.0, 0.0, 2.0, 0.0)];
        let g = grid();
        let still = dense_gt_flow(&tracks, 0.0, 0.5, &EgoTrajectory::stationary(Pose2::IDENTITY), &g);
        let moving = dense_gt_flow(&tracks, 0.0, 0.5, &EgoTrajectory::constant(Pose2::IDENTITY, 3.0, 0.0), &g);
        for (a, b) in still.vectors().zip(moving.vectors()) {
            assert!(a.distance(b) < 1e-9);
        }
    }

    #[test]
    fn world_offset_leaves_field_unchanged() {
        let g = grid();
        let tracks = vec![track(0, 2.0, 1.0, 0.4, 3.0, 0.2), track(1, -6.0, -3.0, 2.0, 1.5, -0.1)];
        let ego = EgoTrajectory::constant(Pose2::new(0.0, 0.0, 0.1), 2.0, 0.05);
        let shift = Pose2::new(130.0, -42.0, 0.0);
        let moved: Vec<BoxTrack> = tracks
            .iter()
            .map(|t| BoxTrack {
                initial: shift.compose(&t.initial),
                ..*t
            })
            .collect();
        let ego2 = EgoTrajectory {
            initial: shift.compose(&ego.initial),
            ..ego.clone()
        };
        let a = dense_gt_flow(&tracks, 0.2, 0.7, &ego, &g);
        let b = dense_gt_flow(&moved, 0.2, 0.7, &ego2, &g);
        for (u, v) in a.vectors().zip(b.vectors()) {
            assert!(u.distance(v) < 1e-9);
        }
    }

    #[test]
    fn flow_carries_cells_into_destination_box() {
        let g = grid();
        let tracks = vec![track(0, 1.0, 1.0, 0.3, 3.0, 0.4), track(1, -6.0, -5.0, -1.0, 2.0, -0.3)];
        let ego = EgoTrajectory::constant(Pose2::IDENTITY, 2.5, 0.1);
        let (t0, t1) = (0.3, 0.8);
        let f = dense_gt_flow(&tracks, t0, t1, &ego, &g);
        let motions = box_motions(&tracks, t0, t1, &ego);
        let mut total = 0;
        for m in &motions {
            let dst = m.source.with_center(m.destination);
            for idx in points_in_box(&m.source, &g) {
                let landing = g.cell_center(idx).unwrap() + f.get(idx);
                if !g.contains_point(landing) {
                    continue;
                }
                assert!(dst.contains(landing));
                total += 1;
            }
        }
        assert!(total > 50);
    }

    #[test]
    fn overlap_goes_to_nearest_center() {
        let g = BevGridSpec::centered(21, 0.5).unwrap();
        let tracks = vec![track(3, 0.0, 0.0, 0.0, 1.0, 0.0), track(1, 1.0, 0.0, 0.0, 0.0, 0.0)];
        let f = dense_gt_flow(&tracks, 0.0, 1.0, &EgoTrajectory::stationary(Pose2::IDENTITY), &g);
        let near_moving = g.nearest_cell(Point2::new(-0.5, 0.0)).unwrap();
        let near_static = g.nearest_cell(Point2::new(1.5, 0.0)).unwrap();
        assert!(f.get(near_moving).distance(Point2::new(1.0, 0.0)) < 1e-12);
        assert_eq!(f.get(near_static), Point2::ZERO);
        // equidistant cell: lower id (the static box) wins
        let tie = g.nearest_cell(Point2::new(0.5, 0.0)).unwrap();
        assert_eq!(f.get(tie), Point2::ZERO);
        assert_eq!(scatter_check(&f, &tracks, 0.0, 1.0, &EgoTrajectory::stationary(Pose2::IDENTITY), &g).max_discrepancy, 0.0);
    }

    #[test]
    fn backward_field_uses_t1_grid() {
        let tracks = vec![track(0, 0.0, 0.0, 0.0, 4.0, 0.0)];
        let ego = EgoTrajectory::stationary(Pose2::IDENTITY);
        let b = dense_gt_flow_backward(&tracks, 0.0, 0.5, &ego, &grid());
        assert_eq!(b.direction, FlowDirection::Backward);
        for idx in points_in_box(&tracks[0].box_at(0.5), &grid()) {
            assert!(b.get(idx).distance(Point2::new(-2.0, 0.0)) < 1e-12);
        }
        let report = scatter_check(&b, &tracks, 0.0, 0.5, &ego, &grid());
        assert_eq!(report.max_discrepancy, 0.0);
        assert!(report.cells_covered > 0);
    }

    #[test]
    fn scatter_check_reports_perturbation() {
        let g = grid();
        let tracks = vec![track(0, 0.0, 0.0, 0.3, 2.0, 0.5)];
        let ego = EgoTrajectory::constant(Pose2::IDENTITY, 1.0, 0.0);
        let mut f = dense_gt_flow(&tracks, 0.0, 0.5, &ego, &g);
        assert_eq!(scatter_check(&f, &tracks, 0.0, 0.5, &ego, &g).max_discrepancy, 0.0);
        let idx = CellIndex::new(30, 31);
        let v = f.get(idx);
        f.set(idx, v + Point2::new(0.125, 0.0));
        let r = scatter_check(&f, &tracks, 0.0, 0.5, &ego, &g);
        assert!((r.max_discrepancy - 0.125).abs() < 1e-12);
        assert_eq!(r.worst_cell, Some(idx));
    }

    #[test]
    fn scatter_check_with_no_tracks_covers_nothing() {
        let g = grid();
        let ego = EgoTrajectory::stationary(Pose2::IDENTITY);
        let f = dense_gt_flow(&[], 0.0, 0.5, &ego, &g);
        let r = scatter_check(&f, &[], 0.0, 0.5, &ego, &g);
        assert_eq!(r.cells_covered, 0);
        assert_eq!(r.max_discrepancy, 0.0);
    }
}
