//! Planar rigid transforms, oriented boxes and BEV grid geometry.
//!
//! Conventions: x forward, y left, yaw counterclockwise. Grids are indexed
//! `(row, col)` with rows along y and columns along x; cell `(0, 0)` is
//! centered on `(origin_x, origin_y)`.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack applied to box containment so that cell centers lying exactly on a
/// box edge count as inside regardless of rounding in the rotation.
pub const BOUNDARY_EPS: f64 = 1e-9;

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(yaw: f64) -> f64 {
    if yaw > -PI && yaw <= PI {
        return yaw;
    }
    PI - (PI - yaw).rem_euclid(2.0 * PI)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ZERO: Self = Self { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Self) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point2 {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Neg for Point2 {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        Self::new(self.x * rhs, self.y * rhs)
    }
}

/// Rigid transform in the plane: rotate by `yaw`, then translate by `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Default for Pose2 {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Pose2 {
    pub const IDENTITY: Self = Self {
        x: 0.0,
        y: 0.0,
        yaw: 0.0,
    };

    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    pub fn translation(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    /// Returns the transform that applies `b` first and then `self`.
    pub fn compose(&self, b: &Pose2) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2::new(
            self.x + c * b.x - s * b.y,
            self.y + s * b.x + c * b.y,
            self.yaw + b.yaw,
        )
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2::new(
            -(c * self.x + s * self.y),
            -(-s * self.x + c * self.y),
            -self.yaw,
        )
    }

    pub fn apply(&self, pt: Point2) -> Point2 {
        let (s, c) = self.yaw.sin_cos();
        Point2::new(
            c * pt.x - s * pt.y + self.x,
            s * pt.x + c * pt.y + self.y,
        )
    }

    /// Rotates a free vector (no translation).
    pub fn rotate(&self, v: Point2) -> Point2 {
        let (s, c) = self.yaw.sin_cos();
        Point2::new(c * v.x - s * v.y, s * v.x + c * v.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.yaw.is_finite()
    }
}

/// Free function form of [`Pose2::compose`].
pub fn compose(a: &Pose2, b: &Pose2) -> Pose2 {
    a.compose(b)
}

/// Free function form of [`Pose2::apply`].
pub fn apply(p: &Pose2, pt: Point2) -> Point2 {
    p.apply(pt)
}

/// Oriented rectangular footprint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2 {
    pub center: Pose2,
    pub length: f64,
    pub width: f64,
}

impl Box2 {
    pub fn new(center: Pose2, length: f64, width: f64) -> Result<Self> {
        if !(length > 0.0 && width > 0.0) || !length.is_finite() || !width.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "box extents must be positive and finite, got {length} x {width}"
            )));
        }
        Ok(Self {
            center,
            length,
            width,
        })
    }

    /// Same footprint placed at another pose.
    pub fn with_center(&self, center: Pose2) -> Self {
        Self { center, ..*self }
    }

    /// Boundary-inclusive containment test.
    pub fn contains(&self, pt: Point2) -> bool {
        let local = self.center.inverse().apply(pt);
        local.x.abs() <= 0.5 * self.length + BOUNDARY_EPS
            && local.y.abs() <= 0.5 * self.width + BOUNDARY_EPS
    }

    /// Corners in counterclockwise order starting at front-left.
    pub fn corners(&self) -> [Point2; 4] {
        let hl = 0.5 * self.length;
        let hw = 0.5 * self.width;
        [
            Point2::new(hl, hw),
            Point2::new(-hl, hw),
            Point2::new(-hl, -hw),
            Point2::new(hl, -hw),
        ]
        .map(|p| self.center.apply(p))
    }

    /// Separating-axis overlap test after growing both boxes by `margin` on
    /// every side.
    pub fn overlaps(&self, other: &Box2, margin: f64) -> bool {
        let a = Box2 {
            length: self.length + 2.0 * margin,
            width: self.width + 2.0 * margin,
            ..*self
        };
        let b = Box2 {
            length: other.length + 2.0 * margin,
            width: other.width + 2.0 * margin,
            ..*other
        };
        let ca = a.corners();
        let cb = b.corners();
        let axes = [a.center.yaw, a.center.yaw + 0.5 * PI, b.center.yaw, b.center.yaw + 0.5 * PI];
        for yaw in axes {
            let axis = Point2::new(yaw.cos(), yaw.sin());
            let project = |pts: &[Point2; 4]| {
                pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                    let d = p.x * axis.x + p.y * axis.y;
                    (lo.min(d), hi.max(d))
                })
            };
            let (alo, ahi) = project(&ca);
            let (blo, bhi) = project(&cb);
            if ahi < blo || bhi < alo {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellIndex {
    pub row: usize,
    pub col: usize,
}

impl CellIndex {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// Fractional grid coordinates: `col` along x, `row` along y, in cells.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GridCoord {
    pub col: f64,
    pub row: f64,
}

impl GridCoord {
    pub const fn new(col: f64, row: f64) -> Self {
        Self { col, row }
    }
}

/// Geometry of a BEV raster shared by feature maps and flow fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevGridSpec {
    /// x of the center of cell (0, 0), meters.
    pub origin_x: f64,
    /// y of the center of cell (0, 0), meters.
    pub origin_y: f64,
    /// Cell edge length, meters.
    pub cell: f64,
    pub width: usize,
    pub height: usize,
}

impl BevGridSpec {
    pub fn new(origin_x: f64, origin_y: f64, cell: f64, width: usize, height: usize) -> Result<Self> {
        let grid = Self {
            origin_x,
            origin_y,
            cell,
            width,
            height,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Square grid of `cells x cells` centered on the ego origin.
    pub fn centered(cells: usize, cell: f64) -> Result<Self> {
        let origin = -0.5 * (cells as f64 - 1.0) * cell;
        Self::new(origin, origin, cell, cells, cells)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell > 0.0) || !self.cell.is_finite() {
            return Err(Error::InvalidGrid(format!("cell size must be positive, got {}", self.cell)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidGrid(format!(
                "grid must have at least one cell, got {}x{}",
                self.height, self.width
            )));
        }
        if !self.origin_x.is_finite() || !self.origin_y.is_finite() {
            return Err(Error::InvalidGrid("origin must be finite".into()));
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.width * self.height
    }

    /// Row-major linear index.
    pub fn linear(&self, idx: CellIndex) -> usize {
        idx.row * self.width + idx.col
    }

    pub fn index_of(&self, linear: usize) -> CellIndex {
        CellIndex::new(linear / self.width, linear % self.width)
    }

    pub fn contains_cell(&self, idx: CellIndex) -> bool {
        idx.row < self.height && idx.col < self.width
    }

    pub fn cell_center(&self, idx: CellIndex) -> Result<Point2> {
        if !self.contains_cell(idx) {
            return Err(Error::CellOutOfRange {
                row: idx.row,
                col: idx.col,
                height: self.height,
                width: self.width,
            });
        }
        Ok(self.center_unchecked(idx.row, idx.col))
    }

    pub(crate) fn center_unchecked(&self, row: usize, col: usize) -> Point2 {
        Point2::new(
            self.origin_x + col as f64 * self.cell,
            self.origin_y + row as f64 * self.cell,
        )
    }

    /// Maps a world point to fractional cell coordinates. Not bounds checked.
    pub fn world_to_cell(&self, pt: Point2) -> GridCoord {
        GridCoord::new(
            (pt.x - self.origin_x) / self.cell,
            (pt.y - self.origin_y) / self.cell,
        )
    }

    pub fn cell_to_world(&self, coord: GridCoord) -> Point2 {
        Point2::new(
            self.origin_x + coord.col * self.cell,
            self.origin_y + coord.row * self.cell,
        )
    }

    /// Nearest cell to a world point, if it falls on the grid.
    pub fn nearest_cell(&self, pt: Point2) -> Option<CellIndex> {
        let g = self.world_to_cell(pt);
        let col = g.col.round();
        let row = g.row.round();
        if col < 0.0 || row < 0.0 || col >= self.width as f64 || row >= self.height as f64 {
            return None;
        }
        Some(CellIndex::new(row as usize, col as usize))
    }

    /// Axis-aligned extent covered by the cells: `(min, max)` corners.
    pub fn extent(&self) -> (Point2, Point2) {
        let h = 0.5 * self.cell;
        (
            Point2::new(self.origin_x - h, self.origin_y - h),
            Point2::new(
                self.origin_x + (self.width as f64 - 0.5) * self.cell,
                self.origin_y + (self.height as f64 - 0.5) * self.cell,
            ),
        )
    }

    pub fn contains_point(&self, pt: Point2) -> bool {
        let (lo, hi) = self.extent();
        pt.x >= lo.x && pt.x <= hi.x && pt.y >= lo.y && pt.y <= hi.y
    }

    pub fn cells(&self) -> impl Iterator<Item = CellIndex> + '_ {
        (0..self.height).flat_map(move |row| (0..self.width).map(move |col| CellIndex::new(row, col)))
    }
}

/// Cells whose centers lie inside `bx` (boundary inclusive), in row-major order.
pub fn points_in_box(bx: &Box2, grid: &BevGridSpec) -> Vec<CellIndex> {
    let corners = bx.corners();
    let (mut lo, mut hi) = (corners[0], corners[0]);
    for c in &corners[1..] {
        lo = Point2::new(lo.x.min(c.x), lo.y.min(c.y));
        hi = Point2::new(hi.x.max(c.x), hi.y.max(c.y));
    }
    let glo = grid.world_to_cell(lo);
    let ghi = grid.world_to_cell(hi);
    let range = |a: f64, b: f64, n: usize| -> Option<(usize, usize)> {
        let first = (a - 1.0).floor().max(0.0);
        let last = (b + 1.0).ceil().min(n as f64 - 1.0);
        if !(first <= last) {
            return None;
        }
        Some((first as usize, last as usize))
    };
    let (Some((c0, c1)), Some((r0, r1))) = (
        range(glo.col, ghi.col, grid.width),
        range(glo.row, ghi.row, grid.height),
    ) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for row in r0..=r1 {
        for col in c0..=c1 {
            if bx.contains(grid.center_unchecked(row, col)) {
                out.push(CellIndex::new(row, col));
            }
        }
    }
    out
}

/// Assigns every grid cell to at most one of `boxes` (identified by `ids`).
///
/// A cell belongs to the box containing its center; when several boxes
/// contain it, the box whose center is nearest wins and remaining ties go to
/// the lower id. Returns, per row-major cell, the index into `boxes`.
pub fn footprint_owners(boxes: &[Box2], ids: &[u32], grid: &BevGridSpec) -> Vec<Option<usize>> {
    assert_eq!(boxes.len(), ids.len());
    let mut owner: Vec<Option<usize>> = vec![None; grid.cell_count()];
    let mut best: Vec<(f64, u32)> = vec![(f64::INFINITY, u32::MAX); grid.cell_count()];
    for (k, bx) in boxes.iter().enumerate() {
        let c = bx.center.translation();
        for idx in points_in_box(bx, grid) {
            let lin = grid.linear(idx);
            let d = grid.center_unchecked(idx.row, idx.col).distance(c);
            let key = (d, ids[k]);
            if key.0 < best[lin].0 || (key.0 == best[lin].0 && key.1 < best[lin].1) {
                best[lin] = key;
                owner[lin] = Some(k);
            }
        }
    }
    owner
}
