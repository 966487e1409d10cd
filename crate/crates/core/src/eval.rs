//! Detection proxy and center-distance metrics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{Box2, CellIndex, Point2};
use crate::gtflow::FlowField;
use crate::scenesim::{BevFeatureMap, CH_OCCUPANCY};

/// Speed separating static from dynamic objects, m/s.
pub const DYNAMIC_SPEED_MPS: f64 = 0.2;
/// Center-distance thresholds of the AP columns, meters.
pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Matching radius used for translation error and recall, meters.
pub const TRANSLATION_THRESHOLD_M: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub center: Point2,
    pub score: f64,
    pub est_speed: f64,
}

/// Thresholds the occupancy channel and returns one detection per
/// 8-connected component, at the unweighted centroid of its cell centers.
/// Components are reported in row-major order of their first cell.
pub fn detect(fused: &BevFeatureMap, threshold: f64) -> Vec<Detection> {
    detect_components(fused, threshold)
        .into_iter()
        .map(|c| c.detection)
        .collect()
}

/// A detection and the cells it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub detection: Detection,
    pub cells: Vec<CellIndex>,
}

impl Component {
    /// Whether any cell lies on the outermost ring of the grid.
    pub fn touches_border(&self, width: usize, height: usize) -> bool {
        self.cells
            .iter()
            .any(|c| c.row == 0 || c.col == 0 || c.row + 1 == height || c.col + 1 == width)
    }
}

pub fn detect_components(fused: &BevFeatureMap, threshold: f64) -> Vec<Component> {
    let g = fused.grid;
    let (w, h) = (g.width, g.height);
    let occ = |k: usize| fused.data[k * fused.channels + CH_OCCUPANCY];
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if seen[start] || !(occ(start) >= threshold) {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut cells = Vec::new();
        while let Some(k) = stack.pop() {
            cells.push(k);
            let (r, c) = ((k / w) as isize, (k % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    let n = rr as usize * w + cc as usize;
                    if !seen[n] && occ(n) >= threshold {
                        seen[n] = true;
                        stack.push(n);
                    }
                }
            }
        }
        cells.sort_unstable();
        let count = cells.len() as f64;
        let mut center = Point2::ZERO;
        let mut mass = 0.0;
        for &k in &cells {
            center = center + g.center_unchecked(k / w, k % w);
            mass += occ(k);
        }
        out.push(Component {
            detection: Detection {
                center: center * (1.0 / count),
                score: (mass / count).clamp(0.0, 1.0),
                est_speed: 0.0,
            },
            cells: cells.into_iter().map(|k| g.index_of(k)).collect(),
        });
    }
    out
}

/// Reads each detection's speed from a velocity field at its center.
pub fn attach_speeds(dets: &mut [Detection], velocity: &FlowField) {
    for d in dets {
        d.est_speed = velocity.sample_world(d.center).norm();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionClass {
    All,
    Static,
    Dynamic,
}

impl MotionClass {
    pub fn of_speed(speed: f64) -> Self {
        if speed > DYNAMIC_SPEED_MPS {
            Self::Dynamic
        } else {
            Self::Static
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::All => "all",
            Self::Static => "static",
            Self::Dynamic => "dynamic",
        }
    }
}

/// Ground-truth object for scoring.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtObject {
    pub bx: Box2,
    pub speed: f64,
}

/// Matching outcome of one scene, ready to be pooled with others.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMatches {
    /// Per detection: score, class, and distance to its matched GT.
    pub dets: Vec<(f64, MotionClass, Option<f64>)>,
    /// GT count per class (static, dynamic).
    pub gt_counts: [usize; 2],
}

/// Greedy matching by ascending center distance. Each GT is matched at
/// most once; pairs farther than the largest threshold are never matched.
///
/// A matched detection takes its GT's motion class; an unmatched one is
/// classified by its estimated speed.
pub fn match_scene(dets: &[Detection], gts: &[GtObject], max_distance: f64) -> SceneMatches {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let dist = d.center.distance(g.bx.center.translation());
            if dist <= max_distance {
                pairs.push((dist, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut det_match: Vec<Option<(usize, f64)>> = vec![None; dets.len()];
    let mut gt_taken = vec![false; gts.len()];
    for (dist, i, j) in pairs {
        if det_match[i].is_none() && !gt_taken[j] {
            det_match[i] = Some((j, dist));
            gt_taken[j] = true;
        }
    }
    let mut gt_counts = [0usize; 2];
    for g in gts {
        gt_counts[class_slot(MotionClass::of_speed(g.speed))] += 1;
    }
    let dets = dets
        .iter()
        .zip(&det_match)
        .map(|(d, m)| match m {
            Some((j, dist)) => (d.score, MotionClass::of_speed(gts[*j].speed), Some(*dist)),
            None => (d.score, MotionClass::of_speed(d.est_speed), None),
        })
        .collect();
    SceneMatches { dets, gt_counts }
}

fn class_slot(c: MotionClass) -> usize {
    match c {
        MotionClass::Static => 0,
        _ => 1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    /// AP per threshold, NaN when the class has no ground truth.
    pub ap: Vec<f64>,
    /// Mean center distance of matches within 2 m, NaN without matches.
    pub mean_translation_error: f64,
    /// Fraction of GT matched within 2 m, NaN without ground truth.
    pub recall: f64,
    pub matches: usize,
    pub gt_count: usize,
    pub det_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub all: ClassMetrics,
    pub static_: ClassMetrics,
    pub dynamic: ClassMetrics,
}

impl EvalReport {
    pub fn class(&self, c: MotionClass) -> &ClassMetrics {
        match c {
            MotionClass::All => &self.all,
            MotionClass::Static => &self.static_,
            MotionClass::Dynamic => &self.dynamic,
        }
    }
}

/// All-point interpolated area under the precision/recall curve.
fn average_precision(mut scored: Vec<(f64, bool)>, n_gt: usize) -> f64 {
    if n_gt == 0 {
        return f64::NAN;
    }
    // stable sort keeps the pooled input order among equal scores
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(scored.len());
    for (k, (_, hit)) in scored.iter().enumerate() {
        if *hit {
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // precision envelope: best precision at this recall or beyond
    let mut envelope = vec![0.0; points.len()];
    let mut best = 0.0f64;
    for (k, &(_, p)) in points.iter().enumerate().rev() {
        best = best.max(p);
        envelope[k] = best;
    }
    let mut ap = 0.0;
    let mut last_r = 0.0;
    for (k, &(r, _)) in points.iter().enumerate() {
        if r > last_r {
            ap += (r - last_r) * envelope[k];
            last_r = r;
        }
    }
    ap
}

fn class_metrics(scenes: &[SceneMatches], thresholds: &[f64], class: MotionClass) -> ClassMetrics {
    let keep = |c: MotionClass| class == MotionClass::All || c == class;
    let gt_count: usize = scenes
        .iter()
        .map(|s| match class {
            MotionClass::All => s.gt_counts[0] + s.gt_counts[1],
            c => s.gt_counts[class_slot(c)],
        })
        .sum();
    let dets: Vec<(f64, Option<f64>)> = scenes
        .iter()
        .flat_map(|s| s.dets.iter())
        .filter(|d| keep(d.1))
        .map(|d| (d.0, d.2))
        .collect();
    let ap = thresholds
        .iter()
        .map(|&t| {
            let scored = dets.iter().map(|&(s, m)| (s, m.is_some_and(|d| d <= t))).collect();
            average_precision(scored, gt_count)
        })
        .collect();
    let within: Vec<f64> = dets
        .iter()
        .filter_map(|d| d.1)
        .filter(|&d| d <= TRANSLATION_THRESHOLD_M)
        .collect();
    let matches = within.len();
    ClassMetrics {
        ap,
        mean_translation_error: if matches == 0 {
            f64::NAN
        } else {
            within.iter().sum::<f64>() / matches as f64
        },
        recall: if gt_count == 0 {
            f64::NAN
        } else {
            matches as f64 / gt_count as f64
        },
        matches,
        gt_count,
        det_count: dets.len(),
    }
}

/// Pools matched scenes into one report.
pub fn score(scenes: &[SceneMatches], thresholds: &[f64]) -> EvalReport {
    EvalReport {
        thresholds: thresholds.to_vec(),
        all: class_metrics(scenes, thresholds, MotionClass::All),
        static_: class_metrics(scenes, thresholds, MotionClass::Static),
        dynamic: class_metrics(scenes, thresholds, MotionClass::Dynamic),
    }
}

/// Single-scene matching and scoring. `thresholds` must be ascending.
pub fn match_and_score(dets: &[Detection], gts: &[GtObject], thresholds: &[f64]) -> EvalReport {
    let max = thresholds.iter().copied().fold(TRANSLATION_THRESHOLD_M, f64::max);
    score(&[match_scene(dets, gts, max)], thresholds)
}

/// One CSV row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    #[serde(rename = "scenario-seed")]
    pub scenario_seed: u64,
    pub dt: f64,
    pub pipeline: String,
    #[serde(rename = "motion-class")]
    pub motion_class: MotionClass,
    #[serde(rename = "ap@0.5")]
    pub ap_0_5: f64,
    #[serde(rename = "ap@1")]
    pub ap_1: f64,
    #[serde(rename = "ap@2")]
    pub ap_2: f64,
    #[serde(rename = "ap@4")]
    pub ap_4: f64,
    pub mate: f64,
    pub recall: f64,
}

impl EvalReport {
    /// Three rows (all, static, dynamic). The report must use the default
    /// thresholds.
    pub fn rows(&self, scenario_seed: u64, dt: f64, pipeline: &str) -> Vec<EvalRow> {
        assert_eq!(self.thresholds, DEFAULT_THRESHOLDS, "csv rows need the default thresholds");
        [MotionClass::All, MotionClass::Static, MotionClass::Dynamic]
            .into_iter()
            .map(|c| {
                let m = self.class(c);
                EvalRow {
                    scenario_seed,
                    dt,
                    pipeline: pipeline.to_string(),
                    motion_class: c,
                    ap_0_5: m.ap[0],
                    ap_1: m.ap[1],
                    ap_2: m.ap[2],
                    ap_4: m.ap[3],
                    mate: m.mean_translation_error,
                    recall: m.recall,
                }
            })
            .collect()
    }
}

pub fn write_rows_csv<W: Write>(rows: &[EvalRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
