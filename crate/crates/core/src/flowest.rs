//! Dynamic flow estimators.
//!
//! Five kinds share one entry point: the ground-truth oracle, an all-zero
//! estimator, SSD block matching, and two variants of a compact learned
//! network. The motion variant regresses displacement with `dt` as an extra
//! input channel; the velocity variant predicts a velocity field that is
//! multiplied by `dt`, so its output vanishes exactly at `dt = 0`.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::gtflow::{FlowDirection, FlowField, FlowUnit};
use crate::scenesim::BevFeatureMap;

/// Upper speed bounds (m/s) of the first two loss buckets.
pub const BUCKET_LIMITS_MPS: [f64; 2] = [0.4, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Oracle,
    Zero,
    BlockMatching,
    LearnedMotion,
    LearnedVelocity,
}

impl EstimatorKind {
    pub fn is_learned(self) -> bool {
        matches!(self, Self::LearnedMotion | Self::LearnedVelocity)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Oracle => "oracle",
            Self::Zero => "zero",
            Self::BlockMatching => "block-matching",
            Self::LearnedMotion => "learned-motion",
            Self::LearnedVelocity => "learned-velocity",
        }
    }

    fn tag(self) -> u8 {
        match self {
            Self::Oracle => 0,
            Self::Zero => 1,
            Self::BlockMatching => 2,
            Self::LearnedMotion => 3,
            Self::LearnedVelocity => 4,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => Self::Oracle,
            1 => Self::Zero,
            2 => Self::BlockMatching,
            3 => Self::LearnedMotion,
            4 => Self::LearnedVelocity,
            t => return Err(Error::Format(format!("unknown estimator tag {t}"))),
        })
    }
}

/// Compact encoder/decoder: a 1x1 compression layer (phi) followed by a
/// dilated 3x3 layer and a 3x3 output layer (psi). Rectified except the
/// output.
///
/// Parameter layout: `w0[hidden][in]`, `b0[hidden]`, `w1[tap][hidden][hidden]`,
/// `b1[hidden]`, `w2[tap][2][hidden]`, `b2[2]`, taps in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    /// Channels of each of the two input maps.
    pub feature_channels: usize,
    pub hidden: usize,
    /// Dilation of the middle layer.
    pub dilation: usize,
    /// Whether `dt` is appended as a constant input channel.
    pub dt_channel: bool,
    pub params: Vec<f64>,
}

struct Offsets {
    w0: usize,
    b0: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    len: usize,
}

impl Network {
    pub fn in_channels(&self) -> usize {
        2 * self.feature_channels + usize::from(self.dt_channel)
    }

    pub fn param_count(&self) -> usize {
        self.offsets().len
    }

    fn offsets(&self) -> Offsets {
        let (i, h) = (self.in_channels(), self.hidden);
        let w0 = 0;
        let b0 = w0 + h * i;
        let w1 = b0 + h;
        let b1 = w1 + 9 * h * h;
        let w2 = b1 + h;
        let b2 = w2 + 9 * 2 * h;
        Offsets {
            w0,
            b0,
            w1,
            b1,
            w2,
            b2,
            len: b2 + 2,
        }
    }

    /// He-initialized network; the output layer is scaled down so the initial
    /// flow is close to zero.
    pub fn init(feature_channels: usize, hidden: usize, dilation: usize, dt_channel: bool, seed: u64) -> Self {
        let mut net = Self {
            feature_channels,
            hidden,
            dilation,
            dt_channel,
            params: Vec::new(),
        };
        let o = net.offsets();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; o.len];
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, scale: f64| {
            let n = Normal::new(0.0, scale * (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for p in &mut params[range] {
                *p = n.sample(&mut rng);
            }
        };
        let i = net.in_channels();
        fill(o.w0..o.b0, i, 1.0);
        fill(o.w1..o.b1, 9 * hidden, 1.0);
        fill(o.w2..o.b2, 9 * hidden, 0.1);
        for b in &mut params[o.b0..o.w1] {
            *b = 0.01;
        }
        net.params = params;
        net
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_channels == 0 || self.hidden == 0 || self.dilation == 0 {
            return Err(Error::InvalidArgument("network dimensions must be positive".into()));
        }
        if self.params.len() != self.param_count() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, found {}",
                self.param_count(),
                self.params.len()
            )));
        }
        if !self.params.iter().all(|p| p.is_finite()) {
            return Err(Error::InvalidArgument("non-finite network parameter".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FlowEstimatorSpec {
    Oracle,
    Zero,
    BlockMatching { patch_radius: usize, search_radius: usize },
    LearnedMotion(Network),
    LearnedVelocity(Network),
}

impl FlowEstimatorSpec {
    pub fn block_matching_default() -> Self {
        Self::BlockMatching {
            patch_radius: 2,
            search_radius: 8,
        }
    }

    /// Freshly initialized learned estimator of the given kind.
    pub fn learned(kind: EstimatorKind, feature_channels: usize, hidden: usize, dilation: usize, seed: u64) -> Result<Self> {
        match kind {
            EstimatorKind::LearnedMotion => Ok(Self::LearnedMotion(Network::init(
                feature_channels,
                hidden,
                dilation,
                true,
                seed,
            ))),
            EstimatorKind::LearnedVelocity => Ok(Self::LearnedVelocity(Network::init(
                feature_channels,
                hidden,
                dilation,
                false,
                seed,
            ))),
            k => Err(Error::InvalidArgument(format!("{} is not a learned kind", k.name()))),
        }
    }

    pub fn kind(&self) -> EstimatorKind {
        match self {
            Self::Oracle => EstimatorKind::Oracle,
            Self::Zero => EstimatorKind::Zero,
            Self::BlockMatching { .. } => EstimatorKind::BlockMatching,
            Self::LearnedMotion(_) => EstimatorKind::LearnedMotion,
            Self::LearnedVelocity(_) => EstimatorKind::LearnedVelocity,
        }
    }

    pub fn network(&self) -> Option<&Network> {
        match self {
            Self::LearnedMotion(n) | Self::LearnedVelocity(n) => Some(n),
            _ => None,
        }
    }

    fn network_mut(&mut self) -> Option<&mut Network> {
        match self {
            Self::LearnedMotion(n) | Self::LearnedVelocity(n) => Some(n),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::BlockMatching {
                patch_radius,
                search_radius,
            } => {
                if *patch_radius < 1 || search_radius < patch_radius {
                    return Err(Error::InvalidArgument(format!(
                        "block matching needs search radius >= patch radius >= 1 (got {search_radius}, {patch_radius})"
                    )));
                }
                Ok(())
            }
            Self::LearnedMotion(n) | Self::LearnedVelocity(n) => n.validate(),
            _ => Ok(()),
        }
    }

    /// Serializes the estimator as a versioned binary blob.
    pub fn write_params<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(PARAMS_MAGIC)?;
        w.write_all(&PARAMS_VERSION.to_le_bytes())?;
        w.write_all(&[self.kind().tag()])?;
        match self {
            Self::BlockMatching {
                patch_radius,
                search_radius,
            } => {
                w.write_all(&(*patch_radius as u32).to_le_bytes())?;
                w.write_all(&(*search_radius as u32).to_le_bytes())?;
            }
            Self::LearnedMotion(n) | Self::LearnedVelocity(n) => {
                for v in [n.feature_channels, n.hidden, n.dilation, n.params.len()] {
                    w.write_all(&(v as u32).to_le_bytes())?;
                }
                w.write_all(&[u8::from(n.dt_channel)])?;
                for p in &n.params {
                    w.write_all(&p.to_le_bytes())?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn read_params<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != PARAMS_MAGIC {
            return Err(Error::Format("not an estimator parameter file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != PARAMS_VERSION {
            return Err(Error::Format(format!("unsupported parameter version {version}")));
        }
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let spec = match EstimatorKind::from_tag(tag[0])? {
            EstimatorKind::Oracle => Self::Oracle,
            EstimatorKind::Zero => Self::Zero,
            EstimatorKind::BlockMatching => Self::BlockMatching {
                patch_radius: read_u32(&mut r)? as usize,
                search_radius: read_u32(&mut r)? as usize,
            },
            kind => {
                let feature_channels = read_u32(&mut r)? as usize;
                let hidden = read_u32(&mut r)? as usize;
                let dilation = read_u32(&mut r)? as usize;
                let n = read_u32(&mut r)? as usize;
                let mut flag = [0u8; 1];
                r.read_exact(&mut flag)?;
                let mut params = Vec::with_capacity(n);
                let mut buf = [0u8; 8];
                for _ in 0..n {
                    r.read_exact(&mut buf)?;
                    params.push(f64::from_le_bytes(buf));
                }
                let net = Network {
                    feature_channels,
                    hidden,
                    dilation,
                    dt_channel: flag[0] != 0,
                    params,
                };
                if kind == EstimatorKind::LearnedMotion {
                    Self::LearnedMotion(net)
                } else {
                    Self::LearnedVelocity(net)
                }
            }
        };
        spec.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(spec)
    }
}

const PARAMS_MAGIC: &[u8; 4] = b"BFNP";
const PARAMS_VERSION: u32 = 1;

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Estimated displacement together with the velocity it implies.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    /// Displacement over `dt`, meters.
    pub flow: FlowField,
    /// Velocity, m/s. Zero everywhere when it cannot be recovered (`dt = 0`
    /// for kinds that do not predict velocity directly).
    pub velocity: FlowField,
}

impl Estimate {
    /// Displacement for another time offset from the cached velocity.
    pub fn rescaled(&self, dt: f64) -> FlowField {
        self.velocity.scaled(dt, FlowUnit::Meters)
    }
}

/// Flow from `f0` towards `f1` on their shared grid, tagged with `direction`.
pub fn estimate_flow(
    spec: &FlowEstimatorSpec,
    f0: &BevFeatureMap,
    f1: &BevFeatureMap,
    dt: f64,
    direction: FlowDirection,
    gt: Option<&FlowField>,
) -> Result<FlowField> {
    Ok(estimate(spec, f0, f1, dt, direction, gt)?.flow)
}

/// Like [`estimate_flow`], also returning the velocity field.
pub fn estimate(
    spec: &FlowEstimatorSpec,
    f0: &BevFeatureMap,
    f1: &BevFeatureMap,
    dt: f64,
    direction: FlowDirection,
    gt: Option<&FlowField>,
) -> Result<Estimate> {
    if f0.grid != f1.grid {
        return Err(Error::GridMismatch(format!("f0 {:?} vs f1 {:?}", f0.grid, f1.grid)));
    }
    if f0.channels != f1.channels {
        return Err(Error::GridMismatch(format!(
            "f0 has {} channels, f1 has {}",
            f0.channels, f1.channels
        )));
    }
    if !(dt >= 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("dt must be finite and >= 0, got {dt}")));
    }
    spec.validate()?;
    let grid = f0.grid;
    let zero_vel = || FlowField::zeros(grid, direction, FlowUnit::MetersPerSecond);
    let velocity_of = |flow: &FlowField| {
        if dt > 0.0 {
            flow.scaled(1.0 / dt, FlowUnit::MetersPerSecond)
        } else {
            zero_vel()
        }
    };
    match spec {
        FlowEstimatorSpec::Oracle => {
            let gt = gt.ok_or(Error::MissingGroundTruth)?;
            if gt.grid != grid {
                return Err(Error::GridMismatch("ground truth grid differs from inputs".into()));
            }
            Ok(Estimate {
                flow: gt.clone(),
                velocity: velocity_of(gt),
            })
        }
        FlowEstimatorSpec::Zero => Ok(Estimate {
            flow: FlowField::zeros(grid, direction, FlowUnit::Meters),
            velocity: zero_vel(),
        }),
        FlowEstimatorSpec::BlockMatching {
            patch_radius,
            search_radius,
        } => {
            if dt == 0.0 {
                return Ok(Estimate {
                    flow: FlowField::zeros(grid, direction, FlowUnit::Meters),
                    velocity: zero_vel(),
                });
            }
            let flow = block_match(f0, f1, *patch_radius, *search_radius, direction);
            let velocity = velocity_of(&flow);
            Ok(Estimate { flow, velocity })
        }
        FlowEstimatorSpec::LearnedMotion(net) => {
            let out = forward(net, f0, f1, dt).out;
            let flow = field_from(&out, grid, direction, FlowUnit::Meters);
            let velocity = velocity_of(&flow);
            Ok(Estimate { flow, velocity })
        }
        FlowEstimatorSpec::LearnedVelocity(net) => {
            let out = forward(net, f0, f1, dt).out;
            let velocity = field_from(&out, grid, direction, FlowUnit::MetersPerSecond);
            let flow = velocity.scaled(dt, FlowUnit::Meters);
            Ok(Estimate { flow, velocity })
        }
    }
}

fn field_from(out: &[f64], grid: crate::geometry::BevGridSpec, direction: FlowDirection, unit: FlowUnit) -> FlowField {
    let mut f = FlowField::zeros(grid, direction, unit);
    f.data.copy_from_slice(out);
    f
}

/// Exhaustive SSD block matching. Offsets are tried in order of increasing
/// squared length, then row-major, and only a strictly smaller cost replaces
/// the current best, which fixes the tie-break.
fn block_match(
    f0: &BevFeatureMap,
    f1: &BevFeatureMap,
    patch_radius: usize,
    search_radius: usize,
    direction: FlowDirection,
) -> FlowField {
    let grid = f0.grid;
    let (w, h, ch) = (grid.width as isize, grid.height as isize, f0.channels);
    let s = search_radius as isize;
    let pr = patch_radius as isize;
    let mut offsets: Vec<(isize, isize)> = (-s..=s).flat_map(|dy| (-s..=s).map(move |dx| (dy, dx))).collect();
    offsets.sort_by_key(|&(dy, dx)| (dy * dy + dx * dx, dy, dx));

    let n = grid.cell_count();
    let mut best_cost = vec![f64::INFINITY; n];
    let mut best = vec![(0isize, 0isize); n];
    // Squared differences live on the grid padded by the patch radius so
    // patch positions outside the grid compare zero against f1.
    let (pw, ph) = (w + 2 * pr, h + 2 * pr);
    let mut diff = vec![0.0; (pw * ph) as usize];
    let mut rows = vec![0.0; (w * ph) as usize];
    let at = |m: &BevFeatureMap, r: isize, c: isize| -> Option<usize> {
        (r >= 0 && r < h && c >= 0 && c < w).then(|| ((r * w + c) as usize) * m.channels)
    };
    for &(dy, dx) in &offsets {
        for r in -pr..h + pr {
            for c in -pr..w + pr {
                let mut acc = 0.0;
                match (at(f0, r, c), at(f1, r + dy, c + dx)) {
                    (Some(i), Some(j)) => {
                        for k in 0..ch {
                            let d = f0.data[i + k] - f1.data[j + k];
                            acc += d * d;
                        }
                    }
                    (Some(i), None) => acc = f0.data[i..i + ch].iter().map(|v| v * v).sum(),
                    (None, Some(j)) => acc = f1.data[j..j + ch].iter().map(|v| v * v).sum(),
                    (None, None) => {}
                }
                diff[((r + pr) * pw + c + pr) as usize] = acc;
            }
        }
        // separable box sum over the patch
        for r in 0..ph {
            for c in 0..w {
                let mut acc = 0.0;
                for k in c..=c + 2 * pr {
                    acc += diff[(r * pw + k) as usize];
                }
                rows[(r * w + c) as usize] = acc;
            }
        }
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for k in r..=r + 2 * pr {
                    acc += rows[(k * w + c) as usize];
                }
                let i = (r * w + c) as usize;
                if acc < best_cost[i] {
                    best_cost[i] = acc;
                    best[i] = (dy, dx);
                }
            }
        }
    }
    let mut flow = FlowField::zeros(grid, direction, FlowUnit::Meters);
    for (i, &(dy, dx)) in best.iter().enumerate() {
        flow.data[2 * i] = dx as f64 * grid.cell;
        flow.data[2 * i + 1] = dy as f64 * grid.cell;
    }
    flow
}

/// Intermediate activations of one forward pass.
struct Activations {
    input: Vec<f64>,
    a0: Vec<f64>,
    h0: Vec<f64>,
    a1: Vec<f64>,
    h1: Vec<f64>,
    out: Vec<f64>,
}

/// Neighbor of cell `(r, c)` at tap `t` and spacing `d`, if inside the grid.
#[inline]
fn neighbor(r: usize, c: usize, t: usize, d: usize, w: usize, h: usize) -> Option<usize> {
    let rr = r as isize + (t / 3) as isize * d as isize - d as isize;
    let cc = c as isize + (t % 3) as isize * d as isize - d as isize;
    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
        None
    } else {
        Some(rr as usize * w + cc as usize)
    }
}

fn forward(net: &Network, f0: &BevFeatureMap, f1: &BevFeatureMap, dt: f64) -> Activations {
    forward_params(net, &net.params, f0, f1, dt)
}

fn forward_params(net: &Network, p: &[f64], f0: &BevFeatureMap, f1: &BevFeatureMap, dt: f64) -> Activations {
    let o = net.offsets();
    let (w, h) = (f0.grid.width, f0.grid.height);
    let n = w * h;
    let (fc, hid, ic) = (net.feature_channels, net.hidden, net.in_channels());
    let d = net.dilation;

    let mut input = vec![0.0; n * ic];
    for k in 0..n {
        let x = &mut input[k * ic..(k + 1) * ic];
        x[..fc].copy_from_slice(&f0.data[k * f0.channels..k * f0.channels + fc]);
        x[fc..2 * fc].copy_from_slice(&f1.data[k * f1.channels..k * f1.channels + fc]);
        if net.dt_channel {
            x[2 * fc] = dt;
        }
    }

    let w0 = &p[o.w0..o.b0];
    let b0 = &p[o.b0..o.w1];
    let mut a0 = vec![0.0; n * hid];
    for k in 0..n {
        let x = &input[k * ic..(k + 1) * ic];
        for j in 0..hid {
            let row = &w0[j * ic..(j + 1) * ic];
            a0[k * hid + j] = b0[j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    let h0: Vec<f64> = a0.iter().map(|v| v.max(0.0)).collect();

    let a1 = conv3x3(&h0, &p[o.w1..o.b1], &p[o.b1..o.w2], hid, hid, d, w, h);
    let h1: Vec<f64> = a1.iter().map(|v| v.max(0.0)).collect();
    let out = conv3x3(&h1, &p[o.w2..o.b2], &p[o.b2..o.len], hid, 2, 1, w, h);
    Activations {
        input,
        a0,
        h0,
        a1,
        h1,
        out,
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3x3(x: &[f64], wt: &[f64], b: &[f64], cin: usize, cout: usize, d: usize, w: usize, h: usize) -> Vec<f64> {
    let mut y = vec![0.0; w * h * cout];
    for r in 0..h {
        for c in 0..w {
            let k = r * w + c;
            let yk = &mut y[k * cout..(k + 1) * cout];
            yk.copy_from_slice(b);
            for t in 0..9 {
                let Some(nb) = neighbor(r, c, t, d, w, h) else {
                    continue;
                };
                let xn = &x[nb * cin..(nb + 1) * cin];
                let wt_t = &wt[t * cout * cin..(t + 1) * cout * cin];
                for (j, yj) in yk.iter_mut().enumerate() {
                    let row = &wt_t[j * cin..(j + 1) * cin];
                    *yj += row.iter().zip(xn).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
    }
    y
}

/// Accumulates weight, bias and input gradients of a 3x3 layer.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    x: &[f64],
    wt: &[f64],
    gy: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    gx: Option<&mut [f64]>,
    cin: usize,
    cout: usize,
    d: usize,
    w: usize,
    h: usize,
) {
    let mut gx = gx;
    for r in 0..h {
        for c in 0..w {
            let k = r * w + c;
            let g = &gy[k * cout..(k + 1) * cout];
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            for (j, gj) in g.iter().enumerate() {
                gb[j] += gj;
            }
            for t in 0..9 {
                let Some(nb) = neighbor(r, c, t, d, w, h) else {
                    continue;
                };
                let xn = &x[nb * cin..(nb + 1) * cin];
                let base = t * cout * cin;
                for (j, &gj) in g.iter().enumerate() {
                    if gj == 0.0 {
                        continue;
                    }
                    let gw_row = &mut gw[base + j * cin..base + (j + 1) * cin];
                    for (gw_i, xi) in gw_row.iter_mut().zip(xn) {
                        *gw_i += gj * xi;
                    }
                    if let Some(gx) = gx.as_deref_mut() {
                        let w_row = &wt[base + j * cin..base + (j + 1) * cin];
                        let gxn = &mut gx[nb * cin..(nb + 1) * cin];
                        for (gxi, wi) in gxn.iter_mut().zip(w_row) {
                            *gxi += gj * wi;
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of the loss w.r.t. all parameters given dL/d(network output).
fn backward(net: &Network, p: &[f64], act: &Activations, gout: &[f64], w: usize, h: usize) -> Vec<f64> {
    let o = net.offsets();
    let (hid, ic) = (net.hidden, net.in_channels());
    let n = w * h;
    let mut grad = vec![0.0; o.len];

    let mut gh1 = vec![0.0; n * hid];
    {
        let (head, tail) = grad.split_at_mut(o.b2);
        conv3x3_backward(
            &act.h1,
            &p[o.w2..o.b2],
            gout,
            &mut head[o.w2..],
            &mut tail[..2],
            Some(&mut gh1),
            hid,
            2,
            1,
            w,
            h,
        );
    }
    let ga1: Vec<f64> = gh1
        .iter()
        .zip(&act.a1)
        .map(|(g, a)| if *a > 0.0 { *g } else { 0.0 })
        .collect();

    let mut gh0 = vec![0.0; n * hid];
    {
        let (head, tail) = grad.split_at_mut(o.b1);
        conv3x3_backward(
            &act.h0,
            &p[o.w1..o.b1],
            &ga1,
            &mut head[o.w1..],
            &mut tail[..hid],
            Some(&mut gh0),
            hid,
            hid,
            net.dilation,
            w,
            h,
        );
    }

    for k in 0..n {
        let x = &act.input[k * ic..(k + 1) * ic];
        for j in 0..hid {
            if act.a0[k * hid + j] <= 0.0 {
                continue;
            }
            let g = gh0[k * hid + j];
            if g == 0.0 {
                continue;
            }
            grad[o.b0 + j] += g;
            let row = &mut grad[o.w0 + j * ic..o.w0 + (j + 1) * ic];
            for (gw, xi) in row.iter_mut().zip(x) {
                *gw += g * xi;
            }
        }
    }
    grad
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlowLossReport {
    pub bucket_means: [f64; 3],
    pub counts: [usize; 3],
    /// Sum of the bucket means; empty buckets contribute zero.
    pub total: f64,
}

/// Bucket of a ground-truth speed.
pub fn speed_bucket(speed_mps: f64) -> usize {
    if speed_mps <= BUCKET_LIMITS_MPS[0] {
        0
    } else if speed_mps <= BUCKET_LIMITS_MPS[1] {
        1
    } else {
        2
    }
}

/// Sum over the three speed buckets of the mean per-cell L2 error.
pub fn flow_loss(pred: &FlowField, gt: &FlowField, dt: f64) -> Result<FlowLossReport> {
    pred.ensure_compatible(gt)?;
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("flow loss needs dt > 0, got {dt}")));
    }
    Ok(loss_and_grad(&pred.data, &gt.data, dt, None))
}

/// Loss over flat `(dx, dy)` arrays; optionally writes dL/dpred.
fn loss_and_grad(pred: &[f64], gt: &[f64], dt: f64, grad: Option<&mut [f64]>) -> FlowLossReport {
    let n = gt.len() / 2;
    let mut counts = [0usize; 3];
    let mut sums = [0.0; 3];
    let mut buckets = Vec::with_capacity(n);
    let mut errs = Vec::with_capacity(n);
    for k in 0..n {
        let (gx, gy) = (gt[2 * k], gt[2 * k + 1]);
        let b = speed_bucket((gx * gx + gy * gy).sqrt() / dt);
        let (ex, ey) = (pred[2 * k] - gx, pred[2 * k + 1] - gy);
        let e = (ex * ex + ey * ey).sqrt();
        counts[b] += 1;
        sums[b] += e;
        buckets.push(b);
        errs.push((ex, ey, e));
    }
    let mut means = [0.0; 3];
    for b in 0..3 {
        if counts[b] > 0 {
            means[b] = sums[b] / counts[b] as f64;
        }
    }
    if let Some(g) = grad {
        for k in 0..n {
            let (ex, ey, e) = errs[k];
            if e > 0.0 {
                let s = 1.0 / (counts[buckets[k]] as f64 * e);
                g[2 * k] = ex * s;
                g[2 * k + 1] = ey * s;
            } else {
                g[2 * k] = 0.0;
                g[2 * k + 1] = 0.0;
            }
        }
    }
    FlowLossReport {
        bucket_means: means,
        counts,
        total: means.iter().sum(),
    }
}

/// One supervised pair. `f0` and `f1` are EMC-aligned; `gt` is the flow
/// from `f0` towards `f1` on their shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub f0: BevFeatureMap,
    pub f1: BevFeatureMap,
    pub dt: f64,
    pub gt: FlowField,
}

/// Loss of a learned network on one sample and, optionally, its gradient.
fn sample_loss(kind: EstimatorKind, net: &Network, p: &[f64], s: &TrainingSample, want_grad: bool) -> (FlowLossReport, Option<Vec<f64>>) {
    let act = forward_params(net, p, &s.f0, &s.f1, s.dt);
    let velocity = kind == EstimatorKind::LearnedVelocity;
    let pred: Vec<f64> = if velocity {
        act.out.iter().map(|v| v * s.dt).collect()
    } else {
        act.out.clone()
    };
    if !want_grad {
        return (loss_and_grad(&pred, &s.gt.data, s.dt, None), None);
    }
    let mut gpred = vec![0.0; pred.len()];
    let report = loss_and_grad(&pred, &s.gt.data, s.dt, Some(&mut gpred));
    if velocity {
        gpred.iter_mut().for_each(|g| *g *= s.dt);
    }
    let grad = backward(net, p, &act, &gpred, s.f0.grid.width, s.f0.grid.height);
    (report, Some(grad))
}

fn learned_parts(spec: &FlowEstimatorSpec) -> Result<(EstimatorKind, &Network)> {
    match spec.network() {
        Some(n) => Ok((spec.kind(), n)),
        None => Err(Error::InvalidArgument(format!("{} is not a learned estimator", spec.kind().name()))),
    }
}

fn check_sample(net: &Network, s: &TrainingSample) -> Result<()> {
    if s.f0.grid != s.f1.grid || s.gt.grid != s.f0.grid {
        return Err(Error::GridMismatch("training sample grids differ".into()));
    }
    if s.f0.channels < net.feature_channels || s.f1.channels < net.feature_channels {
        return Err(Error::InvalidArgument("sample has fewer channels than the network expects".into()));
    }
    if !(s.dt > 0.0) {
        return Err(Error::InvalidArgument("training samples need dt > 0".into()));
    }
    if !s.f0.is_finite() || !s.f1.is_finite() || !s.gt.is_finite() {
        return Err(Error::InvalidArgument("training sample contains non-finite values".into()));
    }
    Ok(())
}

/// Flow loss of a learned estimator on one sample.
pub fn evaluate_loss(spec: &FlowEstimatorSpec, sample: &TrainingSample) -> Result<FlowLossReport> {
    let (kind, net) = learned_parts(spec)?;
    check_sample(net, sample)?;
    Ok(sample_loss(kind, net, &net.params, sample, false).0)
}

/// Analytic gradient of the flow-loss total w.r.t. all parameters.
pub fn loss_gradient(spec: &FlowEstimatorSpec, sample: &TrainingSample) -> Result<(FlowLossReport, Vec<f64>)> {
    let (kind, net) = learned_parts(spec)?;
    check_sample(net, sample)?;
    let (r, g) = sample_loss(kind, net, &net.params, sample, true);
    Ok((r, g.expect("gradient requested")))
}

/// Smallest absolute pre-activation and per-cell error at the current
/// parameters. Finite differences are only reliable when this is well above
/// the step size.
pub fn kink_margin(spec: &FlowEstimatorSpec, sample: &TrainingSample) -> Result<f64> {
    let (kind, net) = learned_parts(spec)?;
    check_sample(net, sample)?;
    let act = forward(net, &sample.f0, &sample.f1, sample.dt);
    let scale = if kind == EstimatorKind::LearnedVelocity { sample.dt } else { 1.0 };
    let err = act
        .out
        .chunks(2)
        .zip(sample.gt.data.chunks(2))
        .map(|(p, g)| ((p[0] * scale - g[0]).powi(2) + (p[1] * scale - g[1]).powi(2)).sqrt());
    Ok(act
        .a0
        .iter()
        .chain(&act.a1)
        .map(|v| v.abs())
        .chain(err)
        .fold(f64::INFINITY, f64::min))
}

/// Largest relative deviation between analytic gradients and central finite
/// differences, `|a - n| / max(|a|, |n|, 1e-6)`, over all parameters.
pub fn gradient_check(spec: &FlowEstimatorSpec, sample: &TrainingSample, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let (kind, net) = learned_parts(spec)?;
    check_sample(net, sample)?;
    let (_, analytic) = sample_loss(kind, net, &net.params, sample, true);
    let analytic = analytic.expect("gradient requested");
    let mut p = net.params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + epsilon;
        let up = sample_loss(kind, net, &p, sample, false).0.total;
        p[i] = orig - epsilon;
        let down = sample_loss(kind, net, &p, sample, false).0.total;
        p[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weights of the flow loss and the two detection losses. Only the flow
    /// term exists here, so the last two must be zero.
    pub loss_weights: [f64; 3],
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            epochs: 30,
            batch_size: 8,
            loss_weights: [1.0, 0.0, 0.0],
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument("learning rate must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if self.loss_weights[1] != 0.0 || self.loss_weights[2] != 0.0 {
            return Err(Error::InvalidArgument(
                "detection loss weights are not supported and must be 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-epoch mean training loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub total: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub spec: FlowEstimatorSpec,
    /// Entry 0 is the loss before any update.
    pub curve: Vec<LossRecord>,
}

impl TrainOutcome {
    /// Running minimum of the epoch totals.
    pub fn smoothed_curve(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.curve
            .iter()
            .map(|r| {
                best = best.min(r.total);
                best
            })
            .collect()
    }

    pub fn write_curve_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.curve {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn mean_record(epoch: usize, reports: &[FlowLossReport]) -> LossRecord {
    let n = reports.len() as f64;
    let mut r = LossRecord {
        epoch,
        total: 0.0,
        b1: 0.0,
        b2: 0.0,
        b3: 0.0,
    };
    for rep in reports {
        r.total += rep.total;
        r.b1 += rep.bucket_means[0];
        r.b2 += rep.bucket_means[1];
        r.b3 += rep.bucket_means[2];
    }
    r.total /= n;
    r.b1 /= n;
    r.b2 /= n;
    r.b3 /= n;
    r
}

/// Minibatch Adam on the flow loss (averaged per sample, then over the
/// batch). Deterministic given `hyper.seed`.
pub fn train_estimator(spec: &FlowEstimatorSpec, dataset: &[TrainingSample], hyper: &TrainHyper) -> Result<TrainOutcome> {
    train_estimator_with(spec, dataset, hyper, |_| {})
}

/// [`train_estimator`] with a callback invoked after every epoch.
pub fn train_estimator_with(
    spec: &FlowEstimatorSpec,
    dataset: &[TrainingSample],
    hyper: &TrainHyper,
    mut on_epoch: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    let (kind, net) = learned_parts(spec)?;
    spec.validate()?;
    hyper.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    for s in dataset {
        check_sample(net, s)?;
    }
    let mut out = spec.clone();
    let omega = hyper.loss_weights[0];

    let initial: Vec<FlowLossReport> = dataset
        .iter()
        .map(|s| sample_loss(kind, net, &net.params, s, false).0)
        .collect();
    let mut curve = vec![mean_record(0, &initial)];
    if !curve[0].total.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            loss: curve[0].total,
        });
    }
    on_epoch(&curve[0]);

    let np = net.params.len();
    let mut m = vec![0.0; np];
    let mut v = vec![0.0; np];
    let mut step = 0i32;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut reports = vec![initial[0]; dataset.len()];
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch_size) {
            let net = out.network().expect("learned");
            let mut grad = vec![0.0; np];
            for &i in batch {
                let (rep, g) = sample_loss(kind, net, &net.params, &dataset[i], true);
                if !rep.total.is_finite() {
                    return Err(Error::Diverged { epoch, loss: rep.total });
                }
                reports[i] = rep;
                for (a, b) in grad.iter_mut().zip(g.expect("gradient requested")) {
                    *a += b;
                }
            }
            let scale = omega / batch.len() as f64;
            step += 1;
            let bc1 = 1.0 - hyper.beta1.powi(step);
            let bc2 = 1.0 - hyper.beta2.powi(step);
            let params = &mut out.network_mut().expect("learned").params;
            for k in 0..np {
                let g = grad[k] * scale;
                m[k] = hyper.beta1 * m[k] + (1.0 - hyper.beta1) * g;
                v[k] = hyper.beta2 * v[k] + (1.0 - hyper.beta2) * g * g;
                params[k] -= hyper.learning_rate * (m[k] / bc1) / ((v[k] / bc2).sqrt() + 1e-8);
            }
            if !params.iter().all(|p| p.is_finite()) {
                return Err(Error::Diverged { epoch, loss: f64::NAN });
            }
        }
        let rec = mean_record(epoch, &reports);
        if !rec.total.is_finite() {
            return Err(Error::Diverged { epoch, loss: rec.total });
        }
        on_epoch(&rec);
        curve.push(rec);
    }
    Ok(TrainOutcome { spec: out, curve })
}

/// Mean speed magnitude of a velocity field over all cells.
pub fn mean_speed(velocity: &FlowField) -> f64 {
    let n = velocity.grid.cell_count() as f64;
    velocity.vectors().map(Point2::norm).sum::<f64>() / n
}
