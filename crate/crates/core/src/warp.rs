//! Detector-specific warpers.
//!
//! Grid-based detectors resample the asynchronous feature map through a
//! look-up table built from backward (t1 -> t0) ego and object flow. Token
//! based detectors instead move each token's BEV coordinate by the forward
//! (t0 -> t1) flows sampled at the token.

use crate::error::{Error, Result};
use crate::geometry::{BevGridSpec, GridCoord, Point2};
use crate::gtflow::{FlowDirection, FlowField};
use crate::scenesim::BevFeatureMap;

/// Bilinear interpolation of channel-interleaved `data` at `g`, writing one
/// value per channel into `out`. Taps outside the grid contribute zero.
pub fn bilinear_into(data: &[f64], grid: &BevGridSpec, channels: usize, g: GridCoord, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    if !g.col.is_finite() || !g.row.is_finite() {
        return;
    }
    let c0 = g.col.floor();
    let r0 = g.row.floor();
    let fc = g.col - c0;
    let fr = g.row - r0;
    let taps = [
        (r0, c0, (1.0 - fc) * (1.0 - fr)),
        (r0, c0 + 1.0, fc * (1.0 - fr)),
        (r0 + 1.0, c0, (1.0 - fc) * fr),
        (r0 + 1.0, c0 + 1.0, fc * fr),
    ];
    for (r, c, w) in taps {
        if r < 0.0 || c < 0.0 || r >= grid.height as f64 || c >= grid.width as f64 {
            continue;
        }
        let base = (r as usize * grid.width + c as usize) * channels;
        for (ch, o) in out.iter_mut().enumerate() {
            *o += w * data[base + ch];
        }
    }
}

/// Per-cell fractional source coordinates for [`grid_sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTable {
    pub grid: BevGridSpec,
    pub coords: Vec<GridCoord>,
}

impl LookupTable {
    pub fn identity(grid: BevGridSpec) -> Self {
        let coords = grid
            .cells()
            .map(|i| GridCoord::new(i.col as f64, i.row as f64))
            .collect();
        Self { grid, coords }
    }

    /// Every cell reads from `(col + dc, row + dr)`.
    pub fn uniform_shift(grid: BevGridSpec, dc: f64, dr: f64) -> Self {
        let coords = grid
            .cells()
            .map(|i| GridCoord::new(i.col as f64 + dc, i.row as f64 + dr))
            .collect();
        Self { grid, coords }
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().all(|g| g.col.is_finite() && g.row.is_finite())
    }
}

/// Builds the t1 -> t0 look-up table `G = G_t1 + M(t1->t0) + V(t1->t0)`.
///
/// The displacement is converted to cells and added to each cell's own
/// integer coordinates, which equals `world_to_cell(center + emc + dyn)` and
/// keeps zero displacement exactly on the integer lattice.
pub fn build_lut(grid: &BevGridSpec, emc_backward: &FlowField, dyn_backward: &FlowField) -> Result<LookupTable> {
    for f in [emc_backward, dyn_backward] {
        if f.grid != *grid {
            return Err(Error::GridMismatch(format!("flow grid {:?} vs lut grid {:?}", f.grid, grid)));
        }
        f.ensure_direction(FlowDirection::Backward)?;
    }
    let coords = grid
        .cells()
        .map(|i| {
            let e = emc_backward.get(i);
            let d = dyn_backward.get(i);
            GridCoord::new(
                i.col as f64 + (e.x + d.x) / grid.cell,
                i.row as f64 + (e.y + d.y) / grid.cell,
            )
        })
        .collect();
    Ok(LookupTable { grid: *grid, coords })
}

/// Bilinear resampling of `features` at the table's source coordinates with
/// zero padding outside the grid. Metadata is copied from the input.
pub fn grid_sample(features: &BevFeatureMap, lut: &LookupTable) -> Result<BevFeatureMap> {
    if features.grid != lut.grid {
        return Err(Error::GridMismatch(format!(
            "features {:?} vs lut {:?}",
            features.grid, lut.grid
        )));
    }
    let c = features.channels;
    let mut out = BevFeatureMap::zeros(features.grid, c, features.timestamp, features.ego_pose);
    for (k, g) in lut.coords.iter().enumerate() {
        bilinear_into(&features.data, &features.grid, c, *g, &mut out.data[k * c..(k + 1) * c]);
    }
    Ok(out)
}

/// Cells whose content has left: the cell itself is static under the
/// dynamic backward flow, but its source location is claimed by a moving cell.
///
/// Backward warping with object-only flow otherwise leaves a copy of each
/// moving object at its old position.
pub fn disocclusion_mask(lut: &LookupTable, dyn_backward: &FlowField, motion_threshold_m: f64) -> Result<Vec<bool>> {
    if dyn_backward.grid != lut.grid {
        return Err(Error::GridMismatch("dynamic flow and lut grids differ".into()));
    }
    let grid = lut.grid;
    let moving: Vec<bool> = dyn_backward.vectors().map(|v| v.norm() >= motion_threshold_m).collect();
    let mut claimed = vec![false; grid.cell_count()];
    for (k, g) in lut.coords.iter().enumerate() {
        if !moving[k] {
            continue;
        }
        let (c0, r0) = (g.col.floor(), g.row.floor());
        for (r, c) in [(r0, c0), (r0, c0 + 1.0), (r0 + 1.0, c0), (r0 + 1.0, c0 + 1.0)] {
            if r >= 0.0 && c >= 0.0 && r < grid.height as f64 && c < grid.width as f64 {
                claimed[r as usize * grid.width + c as usize] = true;
            }
        }
    }
    Ok(lut
        .coords
        .iter()
        .enumerate()
        .map(|(k, g)| {
            if moving[k] {
                return false;
            }
            let (c, r) = (g.col.round(), g.row.round());
            r >= 0.0
                && c >= 0.0
                && r < grid.height as f64
                && c < grid.width as f64
                && claimed[r as usize * grid.width + c as usize]
        })
        .collect())
}

/// Grid warper: EMC plus dynamic backward flow, one bilinear resampling, and
/// optional suppression of disoccluded cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridWarper {
    pub suppress_disocclusion: bool,
    /// Dynamic displacement at or above which a cell counts as moving.
    pub motion_threshold_m: f64,
}

impl Default for GridWarper {
    fn default() -> Self {
        Self {
            suppress_disocclusion: true,
            motion_threshold_m: 0.25,
        }
    }
}

impl GridWarper {
    /// Resamples `features` (captured at t0) onto the t1 grid. The output is
    /// stamped with `target_time` and `target_pose`.
    pub fn warp(
        &self,
        features: &BevFeatureMap,
        emc_backward: &FlowField,
        dyn_backward: &FlowField,
        target_time: f64,
        target_pose: crate::geometry::Pose2,
    ) -> Result<BevFeatureMap> {
        let lut = build_lut(&features.grid, emc_backward, dyn_backward)?;
        let mut out = grid_sample(features, &lut)?;
        if self.suppress_disocclusion {
            let mask = disocclusion_mask(&lut, dyn_backward, self.motion_threshold_m)?;
            let c = out.channels;
            for (k, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
                out.data[k * c..(k + 1) * c].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        out.timestamp = target_time;
        out.ego_pose = target_pose;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Token {
    /// BEV position in the detector frame, meters.
    pub coord: Point2,
    pub payload_id: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenSet {
    pub tokens: Vec<Token>,
}

impl TokenSet {
    pub fn new(tokens: Vec<Token>) -> Self {
        Self { tokens }
    }

    pub fn is_finite(&self) -> bool {
        self.tokens.iter().all(|t| t.coord.is_finite())
    }
}

/// Moves every token by the forward dynamic and EMC flows, both sampled at
/// the token's original position and summed.
///
/// Tokens outside the grid extent get no dynamic flow and take their EMC
/// displacement from the nearest in-grid position.
pub fn warp_tokens(tokens: &TokenSet, emc_forward: &FlowField, dyn_forward: &FlowField) -> Result<TokenSet> {
    emc_forward.ensure_direction(FlowDirection::Forward)?;
    dyn_forward.ensure_direction(FlowDirection::Forward)?;
    if emc_forward.grid != dyn_forward.grid {
        return Err(Error::GridMismatch("emc and dynamic flow grids differ".into()));
    }
    let grid = emc_forward.grid;
    let moved = tokens
        .tokens
        .iter()
        .map(|t| {
            let g = grid.world_to_cell(t.coord);
            let dynamic = if grid.contains_point(t.coord) {
                dyn_forward.sample(g)
            } else {
                Point2::ZERO
            };
            let ego = emc_forward.sample_clamped(g);
            Token {
                coord: t.coord + dynamic + ego,
                payload_id: t.payload_id,
            }
        })
        .collect();
    Ok(TokenSet::new(moved))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundtripReport {
    pub evaluated: usize,
    pub within: usize,
    pub max_error_cells: f64,
    pub mean_error_cells: f64,
}

impl RoundtripReport {
    /// Fraction of evaluated cells that returned within tolerance (1 when
    /// nothing was evaluated).
    pub fn fraction(&self) -> f64 {
        if self.evaluated == 0 {
            1.0
        } else {
            self.within as f64 / self.evaluated as f64
        }
    }
}

/// Pushes each cell with non-zero forward flow through `forward`, samples
/// `backward` at the landing point and measures how far it ends up from where
/// it started, in cells.
///
/// With `exclude_edges`, cells whose landing point has a bilinear tap outside
/// the backward field's non-zero support are skipped.
pub fn roundtrip_check(
    forward: &FlowField,
    backward: &FlowField,
    tolerance_cells: f64,
    exclude_edges: bool,
) -> Result<RoundtripReport> {
    forward.ensure_direction(FlowDirection::Forward)?;
    backward.ensure_direction(FlowDirection::Backward)?;
    if forward.grid != backward.grid {
        return Err(Error::GridMismatch("forward and backward grids differ".into()));
    }
    let grid = forward.grid;
    let support: Vec<bool> = backward.vectors().map(|v| v != Point2::ZERO).collect();
    let mut report = RoundtripReport {
        evaluated: 0,
        within: 0,
        max_error_cells: 0.0,
        mean_error_cells: 0.0,
    };
    let mut sum = 0.0;
    for idx in grid.cells() {
        let f = forward.get(idx);
        if f == Point2::ZERO {
            continue;
        }
        let start = grid.cell_center(idx)?;
        let landing = start + f;
        if !grid.contains_point(landing) {
            continue;
        }
        let g = grid.world_to_cell(landing);
        if exclude_edges {
            let (c0, r0) = (g.col.floor(), g.row.floor());
            let interior = [(r0, c0), (r0, c0 + 1.0), (r0 + 1.0, c0), (r0 + 1.0, c0 + 1.0)]
                .iter()
                .all(|&(r, c)| {
                    r >= 0.0
                        && c >= 0.0
                        && r < grid.height as f64
                        && c < grid.width as f64
                        && support[r as usize * grid.width + c as usize]
                });
            if !interior {
                continue;
            }
        }
        let back = landing + backward.sample(g);
        let err = back.distance(start) / grid.cell;
        report.evaluated += 1;
        sum += err;
        report.max_error_cells = report.max_error_cells.max(err);
        if err <= tolerance_cells {
            report.within += 1;
        }
    }
    if report.evaluated > 0 {
        report.mean_error_cells = sum / report.evaluated as f64;
    }
    Ok(report)
}
