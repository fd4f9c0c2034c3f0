//! Training objectives over a sample bundle, with analytic gradients and a
//! finite-difference gradient checker.
//!
//! Every term is a mean over its valid pixels and is evaluated in f64 from
//! dense buffers; the same dense functions back both the reported losses
//! and the gradients.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::angle::{angular_distance, angular_distance_grad, wrap_pi};
use crate::error::{Error, Result, Shape};
use crate::raster::FloatMap2D;
use crate::rng::{streams, DetRng};
use crate::synth::SampleBundle;
use crate::warpfield::{angles_from_coords, jacobian_column, pixel_angles, stencil, BackwardMap, PixelAngles, Stencil};

pub const COORD_L1: &str = "coord_l1";
pub const ANGLE_MASKED: &str = "angle_masked";
pub const CURVATURE_L2: &str = "curvature_l2";
pub const BACKWARD_L1: &str = "backward_l1";
pub const BACKWARD_ANGLE: &str = "backward_angle";

/// Network outputs compared against a bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    /// 3-channel normalized 3D coordinates on the warped grid.
    pub coord3d: FloatMap2D,
    /// Optional `(φxx, φxy, φyx, φyy)` auxiliary angle channels on the uv grid.
    pub phi: Option<FloatMap2D>,
    /// 1-channel curvature raster on the uv grid.
    pub curvature: FloatMap2D,
    pub backward: Option<BackwardMap>,
}

impl PredictionSet {
    /// The ground truth of a bundle expressed as a prediction (φ built from
    /// the angle map as `ρ·(cos θ, sin θ)`).
    pub fn from_bundle(b: &SampleBundle) -> Result<Self> {
        let (h, w) = (b.angles.height(), b.angles.width());
        let phi = FloatMap2D::from_fn(h, w, 4, |i, j, c| {
            let (t, r) = if c < 2 { (b.angles.theta_x(i, j), b.angles.rho_x(i, j)) } else { (b.angles.theta_y(i, j), b.angles.rho_y(i, j)) };
            (if c % 2 == 0 { r * t.cos() } else { r * t.sin() }) as f32
        })?;
        Ok(Self {
            coord3d: b.coord3d.clone(),
            phi: Some(phi),
            curvature: b.curvature.to_float_map(),
            backward: Some(b.backward.clone()),
        })
    }

    /// Reads `coord3d.fmap`, `curvature.fmap` and, when present, `phi.fmap`
    /// and `backward.fmap` (+ `backward_mask.fmap`).
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let opt = |name: &str| {
            let p = dir.join(name);
            p.exists().then_some(p)
        };
        let backward = match opt("backward.fmap") {
            Some(p) => Some(BackwardMap::read(p, opt("backward_mask.fmap").as_deref())?),
            None => None,
        };
        Ok(Self {
            coord3d: FloatMap2D::read_fmap(dir.join("coord3d.fmap"))?,
            phi: opt("phi.fmap").map(FloatMap2D::read_fmap).transpose()?,
            curvature: FloatMap2D::read_fmap(dir.join("curvature.fmap"))?,
            backward,
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.coord3d.write_fmap(dir.join("coord3d.fmap"))?;
        self.curvature.write_fmap(dir.join("curvature.fmap"))?;
        if let Some(phi) = &self.phi {
            phi.write_fmap(dir.join("phi.fmap"))?;
        }
        if let Some(b) = &self.backward {
            b.write(dir.join("backward.fmap"), dir.join("backward_mask.fmap"))?;
        }
        Ok(())
    }
}

/// Per-term multipliers; all 1 by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub coord: f64,
    pub angle: f64,
    pub curvature: f64,
    pub backward_l1: f64,
    pub backward_angle: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { coord: 1.0, angle: 1.0, curvature: 1.0, backward_l1: 1.0, backward_angle: 1.0 }
    }
}

/// Weighted terms and their exact sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
}

impl LossBreakdown {
    fn from_terms(terms: BTreeMap<String, f64>) -> Self {
        let total = terms.values().sum();
        Self { total, terms }
    }

    pub fn term(&self, name: &str) -> f64 {
        self.terms.get(name).copied().unwrap_or(0.0)
    }
}

/// Dense f64 view of a bundle's supervision signals.
#[derive(Debug, Clone)]
pub struct LossTargets {
    pub h: usize,
    pub w: usize,
    /// Interleaved 3D coordinates and their validity (warped grid).
    pub coord: Vec<f64>,
    pub coord_valid: Vec<bool>,
    /// Interleaved `(θx, θy)` ground-truth angles and validity (uv grid).
    pub theta: Vec<f64>,
    pub theta_valid: Vec<bool>,
    pub text: Vec<bool>,
    pub curvature: Vec<f64>,
    pub backward: Vec<f64>,
    pub backward_valid: Vec<bool>,
    /// Angles of the ground-truth backward map recomputed in f64.
    pub(crate) backward_angles: Vec<PixelAngles>,
}

impl LossTargets {
    pub fn from_bundle(b: &SampleBundle) -> Self {
        let (h, w) = (b.backward.height(), b.backward.width());
        let backward = to_f64(b.backward.coords().data());
        let backward_valid = b.backward.valid().bits().to_vec();
        let backward_angles = angles_from_coords(&backward, &backward_valid, h, w);
        let mut theta = Vec::with_capacity(2 * h * w);
        for i in 0..h {
            for j in 0..w {
                theta.push(b.angles.theta_x(i, j));
                theta.push(b.angles.theta_y(i, j));
            }
        }
        Self {
            h,
            w,
            coord: to_f64(b.coord3d.data()),
            coord_valid: b.forward.valid().bits().to_vec(),
            theta,
            theta_valid: b.angles.valid().bits().to_vec(),
            text: b.text_mask.bits().to_vec(),
            curvature: to_f64(b.curvature.to_float_map().data()),
            backward,
            backward_valid,
            backward_angles,
        }
    }
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn check_map(map: &FloatMap2D, h: usize, w: usize, c: usize) -> Result<()> {
    if map.height() != h || map.width() != w || map.channels() != c {
        return Err(Error::shape(Shape::new(h, w, c), map.shape()));
    }
    Ok(())
}

/// Mean absolute coordinate error over valid pixels × channels.
pub fn coord_l1(x: &[f64], t: &LossTargets) -> f64 {
    let n = t.coord_valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return 0.0;
    }
    let mut s = 0.0;
    for (k, _) in t.coord_valid.iter().enumerate().filter(|(_, v)| **v) {
        for c in 0..3 {
            s += (x[3 * k + c] - t.coord[3 * k + c]).abs();
        }
    }
    s / (3 * n) as f64
}

pub fn coord_l1_grad(x: &[f64], t: &LossTargets) -> Vec<f64> {
    let n = t.coord_valid.iter().filter(|&&v| v).count();
    let mut g = vec![0.0; x.len()];
    if n == 0 {
        return g;
    }
    for (k, _) in t.coord_valid.iter().enumerate().filter(|(_, v)| **v) {
        for c in 0..3 {
            let d = x[3 * k + c] - t.coord[3 * k + c];
            g[3 * k + c] = if d == 0.0 { 0.0 } else { d.signum() } / (3 * n) as f64;
        }
    }
    g
}

fn angle_used(t: &LossTargets) -> Vec<bool> {
    t.text.iter().zip(&t.theta_valid).map(|(&a, &b)| a && b).collect()
}

/// Text-masked angle loss of the ground-truth angles against the polar form
/// of `φ`, weighted by the predicted magnitudes.
pub fn angle_masked(phi: &[f64], t: &LossTargets) -> f64 {
    let used = angle_used(t);
    let n = used.iter().filter(|&&u| u).count();
    if n == 0 {
        return 0.0;
    }
    let mut s = 0.0;
    for (k, _) in used.iter().enumerate().filter(|(_, u)| **u) {
        for a in 0..2 {
            let (th, rho) = crate::angle::polar(phi[4 * k + 2 * a], phi[4 * k + 2 * a + 1]);
            s += rho * angular_distance(t.theta[2 * k + a], th);
        }
    }
    s / n as f64
}

pub fn angle_masked_grad(phi: &[f64], t: &LossTargets) -> Vec<f64> {
    let used = angle_used(t);
    let n = used.iter().filter(|&&u| u).count();
    let mut g = vec![0.0; phi.len()];
    if n == 0 {
        return g;
    }
    for (k, _) in used.iter().enumerate().filter(|(_, u)| **u) {
        for a in 0..2 {
            let (c, s) = (phi[4 * k + 2 * a], phi[4 * k + 2 * a + 1]);
            let rho = c.hypot(s);
            if rho == 0.0 {
                continue;
            }
            let th = s.atan2(c);
            let d = angular_distance(t.theta[2 * k + a], th);
            let dd = angular_distance_grad(th, t.theta[2 * k + a]);
            g[4 * k + 2 * a] = (d * c - dd * s) / rho / n as f64;
            g[4 * k + 2 * a + 1] = (d * s + dd * c) / rho / n as f64;
        }
    }
    g
}

/// Root-mean-square curvature error over all pixels.
pub fn curvature_rmse(x: &[f64], t: &LossTargets) -> f64 {
    let s: f64 = x.iter().zip(&t.curvature).map(|(a, b)| (a - b) * (a - b)).sum();
    (s / x.len() as f64).sqrt()
}

pub fn curvature_rmse_grad(x: &[f64], t: &LossTargets) -> Vec<f64> {
    let r = curvature_rmse(x, t);
    if r == 0.0 {
        return vec![0.0; x.len()];
    }
    let n = x.len() as f64;
    x.iter().zip(&t.curvature).map(|(a, b)| (a - b) / (n * r)).collect()
}

/// Mean absolute backward-map difference over jointly valid pixels × 2.
pub fn backward_l1(x: &[f64], x_valid: &[bool], t: &LossTargets) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for k in 0..x_valid.len() {
        if x_valid[k] && t.backward_valid[k] {
            s += (x[2 * k] - t.backward[2 * k]).abs() + (x[2 * k + 1] - t.backward[2 * k + 1]).abs();
            n += 1;
        }
    }
    if n == 0 { 0.0 } else { s / (2 * n) as f64 }
}

pub fn backward_l1_grad(x: &[f64], x_valid: &[bool], t: &LossTargets) -> Vec<f64> {
    let n = (0..x_valid.len()).filter(|&k| x_valid[k] && t.backward_valid[k]).count();
    let mut g = vec![0.0; x.len()];
    if n == 0 {
        return g;
    }
    for k in 0..x_valid.len() {
        if x_valid[k] && t.backward_valid[k] {
            for c in 0..2 {
                let d = x[2 * k + c] - t.backward[2 * k + c];
                g[2 * k + c] = if d == 0.0 { 0.0 } else { d.signum() } / (2 * n) as f64;
            }
        }
    }
    g
}

/// Unit-confidence angle loss between the ground-truth backward map's
/// angles and those of `x`, over pixels with valid angles in both.
pub fn backward_angle(x: &[f64], x_valid: &[bool], t: &LossTargets) -> f64 {
    let pred = angles_from_coords(x, x_valid, t.h, t.w);
    let mut s = 0.0;
    let mut n = 0usize;
    for (p, q) in pred.iter().zip(&t.backward_angles) {
        if p.valid && q.valid {
            s += angular_distance(q.theta_x, p.theta_x) + angular_distance(q.theta_y, p.theta_y);
            n += 1;
        }
    }
    if n == 0 { 0.0 } else { s / n as f64 }
}

pub fn backward_angle_grad(x: &[f64], x_valid: &[bool], t: &LossTargets) -> Vec<f64> {
    let (h, w) = (t.h, t.w);
    let pred = angles_from_coords(x, x_valid, h, w);
    let n = pred.iter().zip(&t.backward_angles).filter(|(p, q)| p.valid && q.valid).count();
    let mut g = vec![0.0; x.len()];
    if n == 0 {
        return g;
    }
    let inv_n = 1.0 / n as f64;
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            let (p, q) = (&pred[k], &t.backward_angles[k]);
            if !(p.valid && q.valid) {
                continue;
            }
            for along_x in [true, false] {
                let st = stencil(x_valid, h, w, i, j, along_x).expect("valid angle pixel has a stencil");
                let col = jacobian_column(x, h, w, i, j, along_x, st);
                let r2 = col[0] * col[0] + col[1] * col[1];
                if r2 == 0.0 {
                    continue;
                }
                // ∂θ/∂(column x, column y)
                let (theta, target, dcol) = if along_x {
                    (p.theta_x, q.theta_x, [col[1] / r2, -col[0] / r2])
                } else {
                    (p.theta_y, q.theta_y, [col[1] / r2, -col[0] / r2])
                };
                let dd = angular_distance_grad(theta, target) * inv_n;
                let (a, b, span) = stencil_taps(i, j, w, along_x, st);
                // column x uses channel 0 scaled by w, column y channel 1 scaled by h
                let sx = w as f64 / span;
                let sy = h as f64 / span;
                g[2 * b] += dd * dcol[0] * sx;
                g[2 * a] -= dd * dcol[0] * sx;
                g[2 * b + 1] += dd * dcol[1] * sy;
                g[2 * a + 1] -= dd * dcol[1] * sy;
            }
        }
    }
    g
}

fn stencil_taps(i: usize, j: usize, w: usize, along_x: bool, s: Stencil) -> (usize, usize, f64) {
    let k = i * w + j;
    match (along_x, s) {
        (true, Stencil::Central) => (k - 1, k + 1, 2.0),
        (true, Stencil::Forward) => (k, k + 1, 1.0),
        (true, Stencil::Backward) => (k - 1, k, 1.0),
        (false, Stencil::Central) => (k - w, k + w, 2.0),
        (false, Stencil::Forward) => (k, k + w, 1.0),
        (false, Stencil::Backward) => (k - w, k, 1.0),
    }
}

/// Coordinate-error, text-masked angle and curvature terms.
pub fn loss_3d(pred: &PredictionSet, gt: &SampleBundle, weights: &LossWeights) -> Result<LossBreakdown> {
    let t = LossTargets::from_bundle(gt);
    loss_3d_with(pred, &t, weights)
}

fn loss_3d_with(pred: &PredictionSet, t: &LossTargets, weights: &LossWeights) -> Result<LossBreakdown> {
    check_map(&pred.coord3d, t.h, t.w, 3)?;
    check_map(&pred.curvature, t.h, t.w, 1)?;
    let mut terms = BTreeMap::new();
    terms.insert(COORD_L1.to_string(), weights.coord * coord_l1(&to_f64(pred.coord3d.data()), t));
    if let Some(phi) = &pred.phi {
        check_map(phi, t.h, t.w, 4)?;
        terms.insert(ANGLE_MASKED.to_string(), weights.angle * angle_masked(&to_f64(phi.data()), t));
    }
    terms.insert(CURVATURE_L2.to_string(), weights.curvature * curvature_rmse(&to_f64(pred.curvature.data()), t));
    Ok(LossBreakdown::from_terms(terms))
}

/// [`loss_3d`] plus backward-map L1 and unit-confidence angle terms.
pub fn loss_combined(pred: &PredictionSet, gt: &SampleBundle, weights: &LossWeights) -> Result<LossBreakdown> {
    let b = pred
        .backward
        .as_ref()
        .ok_or_else(|| Error::Precondition("combined loss needs a predicted backward map".into()))?;
    let t = LossTargets::from_bundle(gt);
    let base = loss_3d_with(pred, &t, weights)?;
    check_map(b.coords(), t.h, t.w, 2)?;
    let x = to_f64(b.coords().data());
    let xv = b.valid().bits();
    let mut terms = base.terms;
    terms.insert(BACKWARD_L1.to_string(), weights.backward_l1 * backward_l1(&x, xv, &t));
    terms.insert(BACKWARD_ANGLE.to_string(), weights.backward_angle * backward_angle(&x, xv, &t));
    Ok(LossBreakdown::from_terms(terms))
}

/// A scalar function with an analytic gradient.
pub trait DifferentiableLoss {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    /// Coordinates too close to a kink to probe.
    fn excluded(&self, _x: &[f64], _index: usize, _eps: f64) -> bool {
        false
    }
    /// `f(x + h·e_i) − f(x − h·e_i)`. Losses that are sums of local terms
    /// can override this to difference only the terms `x_i` touches, which
    /// keeps the quotient free of cancellation in the unchanged terms.
    fn difference(&self, x: &[f64], index: usize, h: f64) -> f64 {
        let mut y = x.to_vec();
        y[index] = x[index] + h;
        let fp = self.value(&y);
        y[index] = x[index] - h;
        fp - self.value(&y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    /// 3D coordinate prediction.
    Coord,
    /// Auxiliary angle channels.
    Phi,
    /// Curvature raster.
    Curvature,
    /// Backward map (combined loss).
    Backward,
}

impl Block {
    /// Probe step for [`finite_diff_check`]. The backward-map angle terms
    /// have third derivatives of order `(size/2)³`, so their central
    /// differences need a smaller step to stay below 1e-5 relative error on
    /// coordinates where the L1 and angle gradients nearly cancel.
    pub fn default_eps(self) -> f64 {
        match self {
            Block::Backward => 1e-7,
            _ => 1e-5,
        }
    }
}

/// Full loss as a function of one prediction block, others held fixed.
#[derive(Debug, Clone)]
pub struct BlockLoss {
    pub targets: LossTargets,
    pub weights: LossWeights,
    pub block: Block,
    pub coord: Vec<f64>,
    pub phi: Vec<f64>,
    pub curvature: Vec<f64>,
    pub backward: Vec<f64>,
    pub backward_valid: Vec<bool>,
    counts: Counts,
}

/// Denominators of the mean terms; fixed because validity is.
#[derive(Debug, Clone, Default)]
struct Counts {
    coord: usize,
    angle: usize,
    backward_l1: usize,
    backward_angle: usize,
    angle_used: Vec<bool>,
    /// Pixels whose predicted and ground-truth angles are both valid.
    backward_angle_used: Vec<bool>,
}

impl BlockLoss {
    /// Starts from the prediction and returns it with the chosen block as
    /// the probe point.
    pub fn new(pred: &PredictionSet, gt: &SampleBundle, weights: LossWeights, block: Block) -> Result<(Self, Vec<f64>)> {
        let targets = LossTargets::from_bundle(gt);
        check_map(&pred.coord3d, targets.h, targets.w, 3)?;
        check_map(&pred.curvature, targets.h, targets.w, 1)?;
        let phi = pred.phi.as_ref().ok_or_else(|| Error::Precondition("gradient check needs φ channels".into()))?;
        check_map(phi, targets.h, targets.w, 4)?;
        let b = pred.backward.as_ref().ok_or_else(|| Error::Precondition("gradient check needs a backward map".into()))?;
        check_map(b.coords(), targets.h, targets.w, 2)?;
        let angle_used = angle_used(&targets);
        let pred_angles = angles_from_coords(&to_f64(b.coords().data()), b.valid().bits(), targets.h, targets.w);
        let backward_angle_used: Vec<bool> = pred_angles.iter().zip(&targets.backward_angles).map(|(p, q)| p.valid && q.valid).collect();
        let counts = Counts {
            coord: targets.coord_valid.iter().filter(|&&v| v).count(),
            angle: angle_used.iter().filter(|&&v| v).count(),
            backward_l1: b.valid().bits().iter().zip(&targets.backward_valid).filter(|(a, b)| **a && **b).count(),
            backward_angle: backward_angle_used.iter().filter(|&&v| v).count(),
            angle_used,
            backward_angle_used,
        };
        let loss = Self {
            counts,
            weights,
            block,
            coord: to_f64(pred.coord3d.data()),
            phi: to_f64(phi.data()),
            curvature: to_f64(pred.curvature.data()),
            backward: to_f64(b.coords().data()),
            backward_valid: b.valid().bits().to_vec(),
            targets,
        };
        let x = match block {
            Block::Coord => loss.coord.clone(),
            Block::Phi => loss.phi.clone(),
            Block::Curvature => loss.curvature.clone(),
            Block::Backward => loss.backward.clone(),
        };
        Ok((loss, x))
    }

    fn combined(&self) -> bool {
        self.block == Block::Backward
    }
}

impl DifferentiableLoss for BlockLoss {
    fn value(&self, x: &[f64]) -> f64 {
        let t = &self.targets;
        let wt = &self.weights;
        let pick = |b: Block, own: &Vec<f64>| if self.block == b { x.to_vec() } else { own.clone() };
        let (c, p, k, b) = (pick(Block::Coord, &self.coord), pick(Block::Phi, &self.phi), pick(Block::Curvature, &self.curvature), pick(Block::Backward, &self.backward));
        let mut v = wt.coord * coord_l1(&c, t) + wt.angle * angle_masked(&p, t) + wt.curvature * curvature_rmse(&k, t);
        if self.combined() {
            v += wt.backward_l1 * backward_l1(&b, &self.backward_valid, t) + wt.backward_angle * backward_angle(&b, &self.backward_valid, t);
        }
        v
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let t = &self.targets;
        let wt = &self.weights;
        let scale = |g: Vec<f64>, s: f64| g.into_iter().map(|v| v * s).collect::<Vec<_>>();
        match self.block {
            Block::Coord => scale(coord_l1_grad(x, t), wt.coord),
            Block::Phi => scale(angle_masked_grad(x, t), wt.angle),
            Block::Curvature => scale(curvature_rmse_grad(x, t), wt.curvature),
            Block::Backward => {
                let a = backward_l1_grad(x, &self.backward_valid, t);
                let b = backward_angle_grad(x, &self.backward_valid, t);
                a.iter().zip(&b).map(|(p, q)| wt.backward_l1 * p + wt.backward_angle * q).collect()
            }
        }
    }

    fn excluded(&self, x: &[f64], index: usize, eps: f64) -> bool {
        let t = &self.targets;
        let l1_margin = 10.0 * eps;
        let margin = 100.0 * eps;
        let near_kink = |d: f64| {
            let a = wrap_pi(d).abs();
            a < margin || a > std::f64::consts::PI - margin
        };
        match self.block {
            Block::Coord => (x[index] - t.coord[index]).abs() < l1_margin,
            Block::Curvature => false,
            Block::Phi => {
                let (k, a) = (index / 4, (index % 4) / 2);
                let (c, s) = (x[4 * k + 2 * a], x[4 * k + 2 * a + 1]);
                c.hypot(s) < margin || near_kink(s.atan2(c) - t.theta[2 * k + a])
            }
            Block::Backward => {
                if (x[index] - t.backward[index]).abs() < l1_margin {
                    return true;
                }
                // every pixel whose stencil reads this coordinate
                self.stencil_neighbors(index / 2).into_iter().any(|(i, j)| {
                    let p = pixel_angles(x, &self.backward_valid, t.h, t.w, i, j);
                    let q = &t.backward_angles[i * t.w + j];
                    near_kink(p.theta_x - q.theta_x) || near_kink(p.theta_y - q.theta_y)
                })
            }
        }
    }

    fn difference(&self, x: &[f64], index: usize, h: f64) -> f64 {
        if self.block == Block::Curvature {
            // sqrt(Sp/N) − sqrt(Sm/N) with Sp − Sm taken from the one term that moves
            let g = &self.targets.curvature;
            let n = x.len() as f64;
            let s: f64 = x.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum();
            let (d0, dp, dm) = (x[index] - g[index], x[index] + h - g[index], x[index] - h - g[index]);
            let (sp, sm) = ((s - d0 * d0 + dp * dp).max(0.0), (s - d0 * d0 + dm * dm).max(0.0));
            let denom = (sp / n).sqrt() + (sm / n).sqrt();
            return if denom == 0.0 { 0.0 } else { self.weights.curvature * ((dp * dp - dm * dm) / n) / denom };
        }
        let mut y = x.to_vec();
        y[index] = x[index] + h;
        let fp = self.local_terms(&y, index);
        y[index] = x[index] - h;
        fp - self.local_terms(&y, index)
    }
}

impl BlockLoss {
    /// Pixels with used backward angles whose stencils read pixel `k`.
    fn stencil_neighbors(&self, k: usize) -> Vec<(usize, usize)> {
        let (h, w) = (self.targets.h, self.targets.w);
        let (i, j) = ((k / w) as i64, (k % w) as i64);
        [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)]
            .into_iter()
            .map(|(di, dj)| (i + di, j + dj))
            .filter(|&(a, b)| a >= 0 && b >= 0 && a < h as i64 && b < w as i64)
            .map(|(a, b)| (a as usize, b as usize))
            .filter(|&(a, b)| self.counts.backward_angle_used[a * w + b])
            .collect()
    }

    fn local_terms(&self, x: &[f64], index: usize) -> f64 {
        let t = &self.targets;
        let wt = &self.weights;
        let c = &self.counts;
        match self.block {
            Block::Coord => {
                if !t.coord_valid[index / 3] {
                    return 0.0;
                }
                wt.coord * (x[index] - t.coord[index]).abs() / (3 * c.coord) as f64
            }
            Block::Phi => {
                let (k, a) = (index / 4, (index % 4) / 2);
                if !c.angle_used[k] {
                    return 0.0;
                }
                let (th, rho) = crate::angle::polar(x[4 * k + 2 * a], x[4 * k + 2 * a + 1]);
                wt.angle * rho * angular_distance(t.theta[2 * k + a], th) / c.angle as f64
            }
            Block::Backward => {
                let k = index / 2;
                let mut v = 0.0;
                if self.backward_valid[k] && t.backward_valid[k] {
                    v += wt.backward_l1 * (x[index] - t.backward[index]).abs() / (2 * c.backward_l1) as f64;
                }
                for (i, j) in self.stencil_neighbors(k) {
                    let p = pixel_angles(x, &self.backward_valid, t.h, t.w, i, j);
                    let q = &t.backward_angles[i * t.w + j];
                    v += wt.backward_angle * (angular_distance(q.theta_x, p.theta_x) + angular_distance(q.theta_y, p.theta_y)) / c.backward_angle as f64;
                }
                v
            }
            Block::Curvature => unreachable!("curvature RMSE is not a sum of local terms"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Index of the coordinate with the largest error.
    pub worst_index: usize,
    pub probed: usize,
    pub excluded: usize,
}

/// Compares central differences against the analytic gradient on random
/// coordinates until `max(probes, 256)` non-excluded ones have been probed
/// or the coordinates run out. Relative error uses `max(|g|, 1e-8)` as the
/// denominator.
pub fn finite_diff_check(loss: &dyn DifferentiableLoss, point: &[f64], eps: f64, probes: usize, seed: u64) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(Error::InvalidValue(format!("eps must be positive, got {eps}")));
    }
    let base = loss.value(point);
    if !base.is_finite() {
        return Err(Error::Probe(usize::MAX));
    }
    let grad = loss.gradient(point);
    let n = point.len();
    let want = probes.max(256);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = DetRng::new(seed, streams::PROBE);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: 0, probed: 0, excluded: 0 };
    for k in 0..n {
        if report.probed == want {
            break;
        }
        let r = k + rng.below((n - k) as u64) as usize;
        order.swap(k, r);
        let idx = order[k];
        if loss.excluded(point, idx, eps) {
            report.excluded += 1;
            continue;
        }
        let diff = loss.difference(point, idx, eps);
        if !diff.is_finite() {
            return Err(Error::Probe(idx));
        }
        let fd = diff / (2.0 * eps);
        let rel = (fd - grad[idx]).abs() / grad[idx].abs().max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = idx;
        }
        report.probed += 1;
    }
    Ok(report)
}

/// Ground truth perturbed into a generic probe point: coordinates and φ
/// jittered, curvature made soft, backward map jittered on its valid set.
pub fn random_prediction(gt: &SampleBundle, seed: u64) -> Result<PredictionSet> {
    let mut rng = DetRng::new(seed, streams::NOISE);
    let base = PredictionSet::from_bundle(gt)?;
    let jitter = |m: &FloatMap2D, rng: &mut DetRng, amp: f64| {
        let data = m.data().iter().map(|&v| (v as f64 + amp * rng.normal()) as f32).collect();
        FloatMap2D::new(m.height(), m.width(), m.channels(), data)
    };
    let coord3d = jitter(&base.coord3d, &mut rng, 0.02)?;
    let phi = jitter(base.phi.as_ref().unwrap(), &mut rng, 0.2)?;
    let curvature = jitter(&base.curvature, &mut rng, 0.1)?;
    let b = base.backward.as_ref().unwrap();
    let bdata: Vec<f32> = b
        .coords()
        .data()
        .chunks_exact(2)
        .zip(b.valid().bits())
        .flat_map(|(p, &v)| {
            if v {
                [0, 1].map(|c| (p[c] as f64 + 0.002 * rng.normal()).clamp(0.0, 1.0) as f32)
            } else {
                [p[0], p[1]]
            }
        })
        .collect();
    let backward = BackwardMap::new(FloatMap2D::new(b.height(), b.width(), 2, bdata)?, b.valid().clone())?;
    Ok(PredictionSet { coord3d, phi: Some(phi), curvature, backward: Some(backward) })
}
