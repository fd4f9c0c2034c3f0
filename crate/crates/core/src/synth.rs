//! Procedural folded-document generator.
//!
//! A flat page of glyph-block words is laid out on a grid mesh, folded
//! about random fold lines (each fold rigidly rotates the half of the
//! sheet away from the sheet center), bent into a cylinder, and viewed by
//! an auto-framed camera. Rasterizing the mesh yields the forward map and
//! 3D coordinate map; interpolating the mesh on the uv grid yields the
//! backward map.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{self, mean_curvature, Mesh};
use crate::raster::{pixel_center, BinaryMask, FloatMap2D, Image};
use crate::rng::{streams, DetRng};
use crate::warpfield::{self, angle_from_backward_map, AngleMap, BackwardMap, ForwardMap, WarpField};

const SHEET: [u8; 3] = [236, 232, 222];
const INK: [u8; 3] = [35, 38, 52];
/// Glyph alphabet shared by the text renderer and the OCR simulator.
pub const ALPHABET: &[u8; 36] = b"abcdefghijklmnopqrstuvwxyz0123456789";
/// Depth slack for the backward-map visibility test, in normalized units.
const DEPTH_SLACK: f64 = 0.02;
/// Facet tilt above which fold angles are halved and the sample rebuilt.
const MAX_TILT: f64 = 1.25;
const MAX_HALVINGS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Projection {
    #[default]
    Orthographic,
    /// Pinhole camera with the given full field of view in radians.
    Perspective { fov: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    /// Square output resolution in pixels.
    pub resolution: usize,
    /// Mesh vertex rows/cols; 0 means "same as resolution".
    pub mesh_rows: usize,
    pub mesh_cols: usize,
    pub folds: usize,
    /// Fold angle magnitudes are drawn from this range (radians).
    pub fold_angle: [f64; 2],
    /// Maximum cylinder-bend curvature (1/normalized length).
    pub bend: f64,
    pub projection: Projection,
    /// Maximum camera roll in radians.
    pub roll: f64,
    pub words: [usize; 2],
    /// Glyph-block height range as a fraction of the resolution.
    pub block_height: [f64; 2],
    pub chars_per_word: [usize; 2],
    /// Page margin around the text area, fraction of the page.
    pub margin: f64,
    /// Image margin around the framed sheet, fraction of the image.
    pub frame_margin: f64,
    /// Random framing offset as a fraction of the leftover slack.
    pub frame_jitter: f64,
    /// Fixed curvature threshold; `None` derives one per sample.
    pub curvature_threshold: Option<f64>,
    /// Multiplier on the median interior curvature of the bend-only mesh.
    pub threshold_factor: f64,
    /// Lower bound on the derived threshold, as a fraction of grid spacing.
    pub threshold_floor: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            resolution: 256,
            mesh_rows: 0,
            mesh_cols: 0,
            folds: 2,
            fold_angle: [0.5, 1.2],
            bend: 0.5,
            projection: Projection::Orthographic,
            roll: 0.12,
            words: [10, 24],
            block_height: [0.035, 0.055],
            chars_per_word: [2, 7],
            margin: 0.1,
            frame_margin: 0.06,
            frame_jitter: 0.5,
            curvature_threshold: None,
            threshold_factor: 3.0,
            threshold_floor: 0.02,
            seed: 0,
        }
    }
}

impl GenConfig {
    /// Flat, unrolled, unframed page: the generator's identity case.
    pub fn flat(resolution: usize, seed: u64) -> Self {
        Self { resolution, folds: 0, bend: 0.0, roll: 0.0, frame_margin: 0.0, frame_jitter: 0.0, seed, ..Self::default() }
    }

    pub fn rows(&self) -> usize {
        if self.mesh_rows == 0 { self.resolution } else { self.mesh_rows }
    }

    pub fn cols(&self) -> usize {
        if self.mesh_cols == 0 { self.resolution } else { self.mesh_cols }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.resolution < 64 {
            return bad(format!("resolution must be at least 64, got {}", self.resolution));
        }
        if self.rows() < 4 || self.cols() < 4 {
            return bad("mesh needs at least 4x4 vertices".into());
        }
        let [a0, a1] = self.fold_angle;
        if !(a0 > 0.0 && a0 <= a1 && a1 <= std::f64::consts::FRAC_PI_2) {
            return bad(format!("fold angles must satisfy 0 < lo <= hi <= pi/2, got {a0}..{a1}"));
        }
        if !(self.bend >= 0.0 && self.bend.is_finite()) || !(self.roll >= 0.0 && self.roll.is_finite()) {
            return bad("bend and roll must be finite and non-negative".into());
        }
        if let Projection::Perspective { fov } = self.projection {
            if !(fov > 0.0 && fov < 2.5) {
                return bad(format!("perspective fov must be in (0, 2.5), got {fov}"));
            }
        }
        if self.words[0] == 0 || self.words[0] > self.words[1] {
            return bad(format!("word range {:?} admits zero words or is empty", self.words));
        }
        if self.chars_per_word[0] == 0 || self.chars_per_word[0] > self.chars_per_word[1] {
            return bad(format!("chars per word range {:?} is invalid", self.chars_per_word));
        }
        let [b0, b1] = self.block_height;
        if !(b0 > 0.0 && b0 <= b1) {
            return bad("block height range is invalid".into());
        }
        if !(0.0..0.45).contains(&self.margin) || !(0.0..0.45).contains(&self.frame_margin) {
            return bad("margins must leave positive area".into());
        }
        if !(0.0..=1.0).contains(&self.frame_jitter) {
            return bad("frame jitter must lie in [0, 1]".into());
        }
        if let Some(t) = self.curvature_threshold {
            if !(t >= 0.0) {
                return bad("curvature threshold must be non-negative".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordBox {
    /// Corners in normalized coordinates, cyclic order.
    pub quad: [[f64; 2]; 4],
    pub text: String,
}

impl WordBox {
    pub fn area(&self) -> f64 {
        warpfield::polygon_area(&self.quad).abs()
    }
}

pub fn write_words(words: &[WordBox], path: impl AsRef<Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(words)?;
    crate::raster::write_file(path.as_ref(), json.as_bytes())
}

pub fn read_words(path: impl AsRef<Path>) -> Result<Vec<WordBox>> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextLayout {
    pub flat: Image,
    pub words: Vec<WordBox>,
    pub text_mask: BinaryMask,
}

/// Lays out glyph-block words left-to-right, top-to-bottom inside the page
/// margins. Blocks shrink until every drawn word fits.
pub fn render_text_layout(cfg: &GenConfig, seed: u64) -> Result<TextLayout> {
    cfg.validate()?;
    let res = cfg.resolution;
    let mut rng = DetRng::new(seed, streams::LAYOUT);
    let n = rng.range_inclusive(cfg.words[0], cfg.words[1]);
    let texts: Vec<Vec<u8>> = (0..n)
        .map(|_| {
            let len = rng.range_inclusive(cfg.chars_per_word[0], cfg.chars_per_word[1]);
            (0..len).map(|_| ALPHABET[rng.below(36) as usize]).collect()
        })
        .collect();
    let frac = rng.range(cfg.block_height[0], cfg.block_height[1]);
    let lo = (cfg.margin * res as f64).ceil() as usize;
    let hi = res - lo;
    let mut block = ((frac * res as f64).round() as usize).max(4);

    let placed = loop {
        if let Some(p) = place_words(&texts, block, lo, hi) {
            break p;
        }
        if block == 4 {
            // smallest glyphs: keep the leading words that fit
            let p = place_prefix(&texts, block, lo, hi);
            if p.is_empty() {
                return Err(Error::Config(format!("no word fits in a {res}px page")));
            }
            break p;
        }
        block -= 1;
    };
    let texts = &texts[..placed.len()];

    let mut data: Vec<u8> = SHEET.iter().copied().cycle().take(res * res * 3).collect();
    let mut mask = vec![false; res * res];
    let cw = char_width(block);
    let mut words = Vec::with_capacity(placed.len());
    for (text, &(x0, y0)) in texts.iter().zip(&placed) {
        for (k, &ch) in text.iter().enumerate() {
            let code = ALPHABET.iter().position(|&a| a == ch).unwrap();
            for dy in 0..block {
                for dx in 0..cw {
                    let (i, j) = (y0 + dy, x0 + k * cw + dx);
                    let light = glyph_light(code, dx, dy, cw, block);
                    let c = if light { SHEET } else { INK };
                    data[(i * res + j) * 3..(i * res + j) * 3 + 3].copy_from_slice(&c);
                    mask[i * res + j] = true;
                }
            }
        }
        let (x1, y1) = (x0 + text.len() * cw, y0 + block);
        let r = res as f64;
        words.push(WordBox {
            quad: [[x0 as f64 / r, y0 as f64 / r], [x1 as f64 / r, y0 as f64 / r], [x1 as f64 / r, y1 as f64 / r], [x0 as f64 / r, y1 as f64 / r]],
            text: String::from_utf8(text.clone()).unwrap(),
        });
    }
    Ok(TextLayout { flat: Image::new(res, res, 3, data)?, words, text_mask: BinaryMask::new(res, res, mask)? })
}

fn char_width(block: usize) -> usize {
    ((block as f64 * 0.6).round() as usize).max(3)
}

/// Light 1-px stripes inside a glyph cell: a right-edge separator, one row
/// and one column chosen by the character code.
fn glyph_light(code: usize, dx: usize, dy: usize, cw: usize, block: usize) -> bool {
    dx + 1 == cw || dy == 1 + code % (block - 2) || dx == (code / (block - 2)) % (cw - 1)
}

fn place_words(texts: &[Vec<u8>], block: usize, lo: usize, hi: usize) -> Option<Vec<(usize, usize)>> {
    let p = place_prefix(texts, block, lo, hi);
    (p.len() == texts.len()).then_some(p)
}

fn place_prefix(texts: &[Vec<u8>], block: usize, lo: usize, hi: usize) -> Vec<(usize, usize)> {
    let cw = char_width(block);
    let gap = cw;
    let line = block + block.div_ceil(2);
    let (mut x, mut y) = (lo, lo);
    let mut out = Vec::with_capacity(texts.len());
    for t in texts {
        let w = t.len() * cw;
        if lo + w > hi {
            break;
        }
        if x + w > hi {
            x = lo;
            y += line;
        }
        if y + block > hi {
            break;
        }
        out.push((x, y));
        x += w + gap;
    }
    out
}

/// One dihedral fold: the part of the sheet on the far side of `line`
/// (from the anchor) rotates by `angle` about the fold line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    /// Fold-line endpoints in uv.
    pub line: [[f64; 2]; 2],
    pub angle: f64,
}

/// Cylinder bend about an axis perpendicular to `dir` through `center`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bend {
    pub dir: [f64; 2],
    pub center: [f64; 2],
    pub curvature: f64,
}

impl Bend {
    pub fn none() -> Self {
        Self { dir: [1.0, 0.0], center: [0.5, 0.5], curvature: 0.0 }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        if self.curvature == 0.0 {
            return p;
        }
        let d = self.dir;
        let n = [-d[1], d[0]];
        let (qx, qy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let s = d[0] * qx + d[1] * qy;
        let t = n[0] * qx + n[1] * qy;
        let r = 1.0 / self.curvature;
        let phi = self.curvature * s;
        let s2 = (r - p[2]) * phi.sin();
        let z2 = r - (r - p[2]) * phi.cos();
        [self.center[0] + d[0] * s2 + n[0] * t, self.center[1] + d[1] * s2 + n[1] * t, z2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub mesh: Mesh,
    pub folds: Vec<Fold>,
    pub bend: Bend,
    /// Number of times the fold angles were halved to limit facet tilt.
    pub halvings: usize,
}

/// Anchor point whose side of every fold line stays fixed.
pub const ANCHOR: [f64; 2] = [0.5, 0.5];

fn side(line: &[[f64; 2]; 2], p: [f64; 2]) -> f64 {
    let [a, b] = *line;
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Applies folds in order to the points of a flat sheet given by their uv.
/// Each fold rotates the uv half-plane not containing `anchor` about the
/// fold line's current 3D position.
pub fn apply_folds(uv: &[[f64; 2]], start: &[[f64; 3]], folds: &[Fold], anchor: [f64; 2]) -> Vec<[f64; 3]> {
    let mut pts = start.to_vec();
    for (k, f) in folds.iter().enumerate() {
        // fold-line endpoints carried through the earlier folds
        let ends: Vec<[f64; 3]> = f
            .line
            .iter()
            .map(|&e| {
                let mut p = [e[0], e[1], 0.0];
                for g in &folds[..k] {
                    p = fold_point(g, &folds[..k], e, p, anchor);
                }
                p
            })
            .collect();
        let anchor_side = side(&f.line, anchor);
        let rot = Rotation::about_axis(ends[0], ends[1], f.angle);
        for (p, &q) in pts.iter_mut().zip(uv) {
            let s = side(&f.line, q);
            if s != 0.0 && s.signum() != anchor_side.signum() {
                *p = rot.apply(*p);
            }
        }
    }
    pts
}

/// Moves one fold-line endpoint through an earlier fold `g`. The axis of `g`
/// is rebuilt from scratch, which is cheap for the handful of folds used.
fn fold_point(g: &Fold, earlier: &[Fold], uv: [f64; 2], p: [f64; 3], anchor: [f64; 2]) -> [f64; 3] {
    let s = side(&g.line, uv);
    if s == 0.0 || s.signum() == side(&g.line, anchor).signum() {
        return p;
    }
    let idx = earlier.iter().position(|f| f == g).unwrap();
    let ends: Vec<[f64; 3]> = g
        .line
        .iter()
        .map(|&e| {
            let mut q = [e[0], e[1], 0.0];
            for h in &earlier[..idx] {
                q = fold_point(h, &earlier[..idx], e, q, anchor);
            }
            q
        })
        .collect();
    Rotation::about_axis(ends[0], ends[1], g.angle).apply(p)
}

#[derive(Debug, Clone, Copy)]
struct Rotation {
    m: [[f64; 3]; 3],
    origin: [f64; 3],
}

impl Rotation {
    fn about_axis(a: [f64; 3], b: [f64; 3], angle: f64) -> Self {
        let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let k = [d[0] / len, d[1] / len, d[2] / len];
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        let m = [
            [c + k[0] * k[0] * t, k[0] * k[1] * t - k[2] * s, k[0] * k[2] * t + k[1] * s],
            [k[1] * k[0] * t + k[2] * s, c + k[1] * k[1] * t, k[1] * k[2] * t - k[0] * s],
            [k[2] * k[0] * t - k[1] * s, k[2] * k[1] * t + k[0] * s, c + k[2] * k[2] * t],
        ];
        Self { m, origin: a }
    }

    fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = [p[0] - self.origin[0], p[1] - self.origin[1], p[2] - self.origin[2]];
        let mut out = self.origin;
        for i in 0..3 {
            out[i] += self.m[i][0] * q[0] + self.m[i][1] * q[1] + self.m[i][2] * q[2];
        }
        out
    }
}

/// Clips the infinite line through `p` with direction angle `phi` to the
/// unit square.
fn clip_to_unit_square(p: [f64; 2], phi: f64) -> Option<[[f64; 2]; 2]> {
    let d = [phi.cos(), phi.sin()];
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..2 {
        if d[a].abs() < 1e-12 {
            if !(0.0..=1.0).contains(&p[a]) {
                return None;
            }
            continue;
        }
        let (ta, tb) = ((0.0 - p[a]) / d[a], (1.0 - p[a]) / d[a]);
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    (t0 < t1).then(|| [[p[0] + t0 * d[0], p[1] + t0 * d[1]], [p[0] + t1 * d[0], p[1] + t1 * d[1]]])
}

fn segments_cross(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> bool {
    let d1 = side(a, b[0]);
    let d2 = side(a, b[1]);
    let d3 = side(b, a[0]);
    let d4 = side(b, a[1]);
    d1 * d2 <= 0.0 && d3 * d4 <= 0.0
}

/// Euclidean distance from `p` to segment `s`.
pub fn point_segment_distance(p: [f64; 2], s: &[[f64; 2]; 2]) -> f64 {
    let [a, b] = *s;
    let d = [b[0] - a[0], b[1] - a[1]];
    let l2 = d[0] * d[0] + d[1] * d[1];
    let t = if l2 == 0.0 { 0.0 } else { (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / l2).clamp(0.0, 1.0) };
    (p[0] - a[0] - t * d[0]).hypot(p[1] - a[1] - t * d[1])
}

fn segment_distance(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> f64 {
    if segments_cross(a, b) {
        return 0.0;
    }
    [point_segment_distance(a[0], b), point_segment_distance(a[1], b), point_segment_distance(b[0], a), point_segment_distance(b[1], a)]
        .into_iter()
        .fold(f64::INFINITY, f64::min)
}

/// Draws fold lines and fold angles. Fold `i` uses its own substream,
/// so raising the fold count leaves earlier folds untouched.
pub fn sample_folds(cfg: &GenConfig, seed: u64) -> Result<Vec<Fold>> {
    let min_sep = 8.0 / cfg.resolution as f64;
    let mut folds: Vec<Fold> = Vec::with_capacity(cfg.folds);
    for i in 0..cfg.folds {
        let mut rng = DetRng::new(seed, streams::FOLD_BASE + i as u64);
        let mut found = None;
        for _ in 0..10_000 {
            let p = [rng.range(0.15, 0.85), rng.range(0.15, 0.85)];
            let phi = rng.range(0.0, std::f64::consts::PI);
            let Some(line) = clip_to_unit_square(p, phi) else { continue };
            let len = (line[1][0] - line[0][0]).hypot(line[1][1] - line[0][1]);
            if len < 0.5 || point_segment_distance(ANCHOR, &line) < 0.06 {
                continue;
            }
            if folds.iter().any(|f| segment_distance(&f.line, &line) < min_sep) {
                continue;
            }
            found = Some(line);
            break;
        }
        let line = found.ok_or_else(|| Error::Config(format!("could not place fold line {i} without crossings")))?;
        let angle = rng.range(cfg.fold_angle[0], cfg.fold_angle[1]) * rng.sign();
        folds.push(Fold { line, angle });
    }
    Ok(folds)
}

pub fn sample_bend(cfg: &GenConfig, seed: u64) -> Bend {
    let mut rng = DetRng::new(seed, streams::BEND);
    let psi = rng.range(0.0, std::f64::consts::PI);
    let k = cfg.bend * rng.range(0.5, 1.0) * rng.sign();
    Bend { dir: [psi.cos(), psi.sin()], center: ANCHOR, curvature: k }
}

/// Folds and bends a flat mesh. Fold angles are halved (up to a few times)
/// while any facet tilts more than [`MAX_TILT`] from the view axis.
pub fn fold_mesh(flat: &Mesh, cfg: &GenConfig, seed: u64) -> Result<FoldResult> {
    let sampled = sample_folds(cfg, seed)?;
    let bend = sample_bend(cfg, seed);
    let uv: Vec<[f64; 2]> = (0..flat.rows()).flat_map(|r| (0..flat.cols()).map(move |c| (r, c))).map(|(r, c)| flat.uv(r, c)).collect();
    let mut halvings = 0;
    loop {
        let scale = 0.5f64.powi(halvings as i32);
        let folds: Vec<Fold> = sampled.iter().map(|f| Fold { line: f.line, angle: f.angle * scale }).collect();
        let pts: Vec<[f64; 3]> = apply_folds(&uv, flat.vertices(), &folds, ANCHOR).into_iter().map(|p| bend.apply(p)).collect();
        let mesh = Mesh::new(flat.rows(), flat.cols(), pts)?;
        if halvings >= MAX_HALVINGS || max_tilt(&mesh) <= MAX_TILT {
            return Ok(FoldResult { mesh, folds, bend, halvings });
        }
        halvings += 1;
    }
}

fn max_tilt(m: &Mesh) -> f64 {
    let mut worst: f64 = 0.0;
    for r in 0..m.rows() - 1 {
        for c in 0..m.cols() - 1 {
            let (a, b, d) = (m.vertex(r, c), m.vertex(r, c + 1), m.vertex(r + 1, c));
            let u = sub(b, a);
            let v = sub(d, a);
            let n = cross(u, v);
            let len = norm(n);
            if len > 0.0 {
                worst = worst.max((n[2].abs() / len).clamp(-1.0, 1.0).acos());
            }
        }
    }
    worst
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Camera mapping 3D points to normalized image coordinates:
/// `image = scale · R(roll) · persp(p − pivot) + shift`, depth = `p.z`
/// (larger is closer to the camera).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub projection: Projection,
    pub roll: f64,
    pub pivot: [f64; 3],
    pub scale: f64,
    pub shift: [f64; 2],
}

impl Camera {
    pub fn identity() -> Self {
        Self { projection: Projection::Orthographic, roll: 0.0, pivot: [0.5, 0.5, 0.0], scale: 1.0, shift: [0.5, 0.5] }
    }

    fn distance(&self) -> Option<f64> {
        match self.projection {
            Projection::Orthographic => None,
            Projection::Perspective { fov } => Some(0.5 / (0.5 * fov).tan() + 0.5),
        }
    }

    /// Image position and the perspective divisor `w` (1 for orthographic).
    pub fn project(&self, p: [f64; 3]) -> Result<([f64; 2], f64)> {
        let q = sub(p, self.pivot);
        let w = match self.distance() {
            None => 1.0,
            Some(d) => {
                let w = (d - q[2]) / d;
                if w < 0.05 {
                    return Err(Error::Degenerate("point behind the perspective camera".into()));
                }
                w
            }
        };
        let (s, c) = self.roll.sin_cos();
        let x = (c * q[0] - s * q[1]) / w;
        let y = (s * q[0] + c * q[1]) / w;
        Ok(([self.scale * x + self.shift[0], self.scale * y + self.shift[1]], w))
    }
}

/// Picks roll and framing so the sheet fills the image inside the margin.
pub fn frame_camera(m: &Mesh, cfg: &GenConfig, seed: u64) -> Result<Camera> {
    let mut rng = DetRng::new(seed, streams::CAMERA);
    let roll = if cfg.roll > 0.0 { rng.range(cfg.roll.min(0.05), cfg.roll) * rng.sign() } else { 0.0 };
    let jitter = [rng.range(-1.0, 1.0), rng.range(-1.0, 1.0)];
    let mut cam = Camera { projection: cfg.projection, roll, pivot: [0.5, 0.5, 0.0], scale: 1.0, shift: [0.0, 0.0] };
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for &v in m.vertices() {
        let (p, _) = cam.project(v)?;
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let half = [0.5 / m.cols() as f64, 0.5 / m.rows() as f64];
    for a in 0..2 {
        lo[a] -= half[a];
        hi[a] += half[a];
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    if !(span > 0.0) {
        return Err(Error::Degenerate("sheet projects to a point".into()));
    }
    let avail = 1.0 - 2.0 * cfg.frame_margin;
    let scale = avail / span;
    let mut shift = [0.0; 2];
    for a in 0..2 {
        let slack = avail - scale * (hi[a] - lo[a]);
        let centre = 0.5 - scale * 0.5 * (lo[a] + hi[a]);
        shift[a] = centre + jitter[a] * 0.5 * cfg.frame_jitter * slack;
    }
    cam.scale = scale;
    cam.shift = shift;
    Ok(cam)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projected {
    pub forward: ForwardMap,
    pub backward: BackwardMap,
    pub coord3d: FloatMap2D,
    /// Depth of the visible surface per warped pixel (unnormalized).
    pub depth: Vec<f64>,
}

struct ProjVertex {
    img: [f64; 2],
    inv_w: f64,
}

/// Rasterizes the mesh through `cam` onto an `h × w` image and samples it
/// on the same-size uv grid.
pub fn project_mesh(m: &Mesh, cam: &Camera, h: usize, w: usize) -> Result<Projected> {
    let proj: Vec<ProjVertex> = m
        .vertices()
        .iter()
        .map(|&v| cam.project(v).map(|(img, wdiv)| ProjVertex { img, inv_w: 1.0 / wdiv }))
        .collect::<Result<_>>()?;
    let (lo, hi) = bounds3(m);
    let n = h * w;
    let mut zbuf = vec![f64::NEG_INFINITY; n];
    let mut fwd = vec![[0.0f64; 2]; n];
    let mut pos = vec![[0.0f64; 3]; n];
    let (rows, cols) = (m.rows(), m.cols());
    for r in 0..rows - 1 {
        for c in 0..cols - 1 {
            let idx = [r * cols + c, r * cols + c + 1, (r + 1) * cols + c + 1, (r + 1) * cols + c];
            for tri in [[idx[0], idx[1], idx[2]], [idx[0], idx[2], idx[3]]] {
                raster_triangle(m, &proj, tri, h, w, &mut zbuf, &mut fwd, &mut pos);
            }
        }
    }
    if zbuf.iter().all(|z| *z == f64::NEG_INFINITY) {
        return Err(Error::Degenerate("no facet covers any pixel".into()));
    }

    let mut fdata = Vec::with_capacity(n * 2);
    let mut cdata = Vec::with_capacity(n * 3);
    let mut fvalid = Vec::with_capacity(n);
    for k in 0..n {
        if zbuf[k] == f64::NEG_INFINITY {
            fdata.extend_from_slice(&[0.0, 0.0]);
            cdata.extend_from_slice(&[0.0; 3]);
            fvalid.push(false);
        } else {
            fdata.push(fwd[k][0].clamp(0.0, 1.0) as f32);
            fdata.push(fwd[k][1].clamp(0.0, 1.0) as f32);
            for a in 0..3 {
                let range = hi[a] - lo[a];
                let v = if range > 0.0 { ((pos[k][a] - lo[a]) / range).clamp(0.0, 1.0) } else { 0.0 };
                cdata.push(v as f32);
            }
            fvalid.push(true);
        }
    }
    let forward = ForwardMap::new(FloatMap2D::new(h, w, 2, fdata)?, BinaryMask::new(h, w, fvalid)?)?;
    let coord3d = FloatMap2D::new(h, w, 3, cdata)?;

    // backward map on the uv grid
    let mut bdata = Vec::with_capacity(n * 2);
    let mut bvalid = Vec::with_capacity(n);
    for i in 0..h {
        for j in 0..w {
            let p3 = surface_point(m, pixel_center(j, w), pixel_center(i, h));
            let (img, _) = cam.project(p3)?;
            let ok = (0.0..=1.0).contains(&img[0]) && (0.0..=1.0).contains(&img[1]) && visible(&zbuf, h, w, img, p3[2]);
            if ok {
                bdata.push(img[0] as f32);
                bdata.push(img[1] as f32);
            } else {
                bdata.extend_from_slice(&[0.0, 0.0]);
            }
            bvalid.push(ok);
        }
    }
    let backward = BackwardMap::new(FloatMap2D::new(h, w, 2, bdata)?, BinaryMask::new(h, w, bvalid)?)?;
    Ok(Projected { forward, backward, coord3d, depth: zbuf })
}

fn bounds3(m: &Mesh) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in m.vertices() {
        for a in 0..3 {
            lo[a] = lo[a].min(v[a]);
            hi[a] = hi[a].max(v[a]);
        }
    }
    (lo, hi)
}

#[allow(clippy::too_many_arguments)]
fn raster_triangle(
    m: &Mesh,
    proj: &[ProjVertex],
    tri: [usize; 3],
    h: usize,
    w: usize,
    zbuf: &mut [f64],
    fwd: &mut [[f64; 2]],
    pos: &mut [[f64; 3]],
) {
    let p = tri.map(|k| [proj[k].img[0] * w as f64 - 0.5, proj[k].img[1] * h as f64 - 0.5]);
    let area = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[1][1] - p[0][1]) * (p[2][0] - p[0][0]);
    if area.abs() < 1e-12 {
        return;
    }
    let tol = 1e-9 * area.abs();
    let min_x = p.iter().map(|q| q[0]).fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let max_x = p.iter().map(|q| q[0]).fold(f64::NEG_INFINITY, f64::max).floor().min((w - 1) as f64);
    let min_y = p.iter().map(|q| q[1]).fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let max_y = p.iter().map(|q| q[1]).fold(f64::NEG_INFINITY, f64::max).floor().min((h - 1) as f64);
    if min_x > max_x || min_y > max_y {
        return;
    }
    let uv = tri.map(|k| m.uv(k / m.cols(), k % m.cols()));
    let v3 = tri.map(|k| m.vertices()[k]);
    let iw = tri.map(|k| proj[k].inv_w);
    for y in min_y as usize..=max_y as usize {
        for x in min_x as usize..=max_x as usize {
            let q = [x as f64, y as f64];
            let e = |a: [f64; 2], b: [f64; 2]| (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0]);
            let l0 = e(p[1], p[2]) * area.signum();
            let l1 = e(p[2], p[0]) * area.signum();
            let l2 = e(p[0], p[1]) * area.signum();
            if l0 < -tol || l1 < -tol || l2 < -tol {
                continue;
            }
            let b = [l0 / area.abs(), l1 / area.abs(), l2 / area.abs()];
            let pw = [b[0] * iw[0], b[1] * iw[1], b[2] * iw[2]];
            let s = pw[0] + pw[1] + pw[2];
            let lam = [pw[0] / s, pw[1] / s, pw[2] / s];
            let z = lam[0] * v3[0][2] + lam[1] * v3[1][2] + lam[2] * v3[2][2];
            let k = y * w + x;
            if z > zbuf[k] {
                zbuf[k] = z;
                fwd[k] = [0, 1].map(|a| lam[0] * uv[0][a] + lam[1] * uv[1][a] + lam[2] * uv[2][a]);
                pos[k] = [0, 1, 2].map(|a| lam[0] * v3[0][a] + lam[1] * v3[1][a] + lam[2] * v3[2][a]);
            }
        }
    }
}

/// 3D surface point at a uv location, using the rasterizer's triangle split
/// (linear extrapolation in the outer half cell).
fn surface_point(m: &Mesh, u: f64, v: f64) -> [f64; 3] {
    let (rows, cols) = (m.rows(), m.cols());
    let px = u * cols as f64 - 0.5;
    let py = v * rows as f64 - 0.5;
    let c0 = (px.floor().max(0.0) as usize).min(cols - 2);
    let r0 = (py.floor().max(0.0) as usize).min(rows - 2);
    let fx = px - c0 as f64;
    let fy = py - r0 as f64;
    let v00 = m.vertex(r0, c0);
    let v01 = m.vertex(r0, c0 + 1);
    let v10 = m.vertex(r0 + 1, c0);
    let v11 = m.vertex(r0 + 1, c0 + 1);
    let mut out = [0.0; 3];
    for a in 0..3 {
        out[a] = if fx >= fy {
            v00[a] + fx * (v01[a] - v00[a]) + fy * (v11[a] - v01[a])
        } else {
            v00[a] + fy * (v10[a] - v00[a]) + fx * (v11[a] - v10[a])
        };
    }
    out
}

/// A surface point is visible unless a covered bilinear tap around its
/// image position holds a surface more than the slack away in depth.
fn visible(zbuf: &[f64], h: usize, w: usize, img: [f64; 2], depth: f64) -> bool {
    let px = (img[0] * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
    let py = (img[1] * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let j0 = px.floor() as usize;
    let i0 = py.floor() as usize;
    for (i, j) in [(i0, j0), (i0, j0 + 1), (i0 + 1, j0), (i0 + 1, j0 + 1)] {
        if i >= h || j >= w {
            continue;
        }
        let z = zbuf[i * w + j];
        if z != f64::NEG_INFINITY && (z - depth).abs() > DEPTH_SLACK {
            return false;
        }
    }
    true
}

/// Everything generated for one synthetic document.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBundle {
    pub config: GenConfig,
    pub flat: Image,
    pub warped: Image,
    pub coord3d: FloatMap2D,
    pub forward: ForwardMap,
    pub backward: BackwardMap,
    pub angles: AngleMap,
    pub curvature: BinaryMask,
    pub text_mask: BinaryMask,
    pub words: Vec<WordBox>,
    pub mesh: Mesh,
    pub fold_lines: Vec<[[f64; 2]; 2]>,
    pub camera: Camera,
    pub curvature_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub config: GenConfig,
    pub seed: u64,
    pub version: String,
    pub fold_lines: Vec<[[f64; 2]; 2]>,
    pub camera: Camera,
    pub curvature_threshold: f64,
}

pub fn generate_sample(cfg: &GenConfig) -> Result<SampleBundle> {
    cfg.validate()?;
    let res = cfg.resolution;
    let seed = cfg.seed;
    let layout = render_text_layout(cfg, seed)?;
    let flat_mesh = Mesh::flat(cfg.rows(), cfg.cols())?;
    let folded = fold_mesh(&flat_mesh, cfg, seed)?;
    let camera = frame_camera(&folded.mesh, cfg, seed)?;
    let projected = project_mesh(&folded.mesh, &camera, res, res)?;

    let background = desk_background(res, seed);
    let warped = warp_onto(&layout.flat, &projected.forward, &background)?;
    let angles = angle_from_backward_map(&projected.backward)?;

    let threshold = match cfg.curvature_threshold {
        Some(t) => t,
        None => {
            let reference = flat_mesh.map_vertices(|p| folded.bend.apply(p))?;
            let spacing = 1.0 / cfg.rows().max(cfg.cols()) as f64;
            mesh::threshold_from_reference(&reference, cfg.threshold_factor, cfg.threshold_floor * spacing)
        }
    };
    let curvature = mesh::curvature_mask(&mean_curvature(&folded.mesh), &folded.mesh, threshold, res, res)?;

    Ok(SampleBundle {
        config: cfg.clone(),
        flat: layout.flat,
        warped,
        coord3d: projected.coord3d,
        forward: projected.forward,
        backward: projected.backward,
        angles,
        curvature,
        text_mask: layout.text_mask,
        words: layout.words,
        mesh: folded.mesh,
        fold_lines: folded.folds.iter().map(|f| f.line).collect(),
        camera,
        curvature_threshold: threshold,
    })
}

/// Wood-grain desk texture.
fn desk_background(res: usize, seed: u64) -> Image {
    let mut rng = DetRng::new(seed, streams::BACKGROUND);
    let freq = rng.range(18.0, 30.0);
    let wobble = rng.range(1.0, 4.0);
    let phase = rng.range(0.0, std::f64::consts::TAU);
    let tint = rng.range(-12.0, 12.0);
    let mut data = Vec::with_capacity(res * res * 3);
    for i in 0..res {
        for j in 0..res {
            let (x, y) = (pixel_center(j, res), pixel_center(i, res));
            let g = (std::f64::consts::TAU * (freq * x + 0.08 * (wobble * std::f64::consts::TAU * y + phase).sin())).sin();
            let base = [118.0 + tint, 84.0, 56.0 - 0.5 * tint];
            for (k, b) in base.iter().enumerate() {
                data.push(crate::raster::quantize(b + 22.0 * g * (1.0 - 0.2 * k as f64)));
            }
        }
    }
    Image::new(res, res, 3, data).expect("background dimensions are consistent")
}

fn warp_onto(flat: &Image, forward: &ForwardMap, background: &Image) -> Result<Image> {
    let sheet = warpfield::resample_image(flat, forward, &[0, 0, 0])?;
    let mut data = sheet.data().to_vec();
    for (k, &valid) in forward.valid().bits().iter().enumerate() {
        if !valid {
            data[k * 3..k * 3 + 3].copy_from_slice(&background.data()[k * 3..k * 3 + 3]);
        }
    }
    Image::new(sheet.height(), sheet.width(), 3, data)
}

/// Largest distance, in pixels, from any set mask pixel center to the
/// nearest fold-line segment; 0 for an empty mask, infinite when the mask is
/// non-empty but there are no fold lines.
pub fn mask_distance_to_fold_lines(mask: &BinaryMask, fold_lines: &[[[f64; 2]; 2]]) -> f64 {
    let (h, w) = (mask.height(), mask.width());
    let mut worst: f64 = 0.0;
    for i in 0..h {
        for j in 0..w {
            if !mask.get(i, j) {
                continue;
            }
            let p = [pixel_center(j, w) * w as f64, pixel_center(i, h) * h as f64];
            let d = fold_lines
                .iter()
                .map(|s| {
                    let sp = [[s[0][0] * w as f64, s[0][1] * h as f64], [s[1][0] * w as f64, s[1][1] * h as f64]];
                    point_segment_distance(p, &sp)
                })
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(d);
        }
    }
    worst
}

pub mod files {
    pub const FLAT: &str = "flat.ppm";
    pub const WARPED: &str = "warped.ppm";
    pub const COORD3D: &str = "coord3d.fmap";
    pub const FORWARD: &str = "forward.fmap";
    pub const FORWARD_MASK: &str = "forward_mask.fmap";
    pub const BACKWARD: &str = "backward.fmap";
    pub const BACKWARD_MASK: &str = "backward_mask.fmap";
    pub const ANGLES: &str = "angles.fmap";
    pub const ANGLES_MASK: &str = "angles_mask.fmap";
    pub const CURVATURE: &str = "curvature.fmap";
    pub const TEXT_MASK: &str = "textmask.fmap";
    pub const MESH: &str = "mesh.bin";
    pub const WORDS: &str = "words.json";
    pub const META: &str = "meta.json";
}

impl SampleBundle {
    pub fn meta(&self) -> BundleMeta {
        BundleMeta {
            config: self.config.clone(),
            seed: self.config.seed,
            version: crate::VERSION.to_string(),
            fold_lines: self.fold_lines.clone(),
            camera: self.camera,
            curvature_threshold: self.curvature_threshold,
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.flat.write_pnm(dir.join(files::FLAT))?;
        self.warped.write_pnm(dir.join(files::WARPED))?;
        self.coord3d.write_fmap(dir.join(files::COORD3D))?;
        self.forward.write(dir.join(files::FORWARD), dir.join(files::FORWARD_MASK))?;
        self.backward.write(dir.join(files::BACKWARD), dir.join(files::BACKWARD_MASK))?;
        self.angles.write(dir.join(files::ANGLES), dir.join(files::ANGLES_MASK))?;
        self.curvature.write_fmap(dir.join(files::CURVATURE))?;
        self.text_mask.write_fmap(dir.join(files::TEXT_MASK))?;
        self.mesh.write(dir.join(files::MESH))?;
        write_words(&self.words, dir.join(files::WORDS))?;
        let meta = serde_json::to_string_pretty(&self.meta())?;
        crate::raster::write_file(&dir.join(files::META), meta.as_bytes())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join(files::META);
        let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: BundleMeta = serde_json::from_str(&meta_text)?;
        let forward = ForwardMap::from_field(WarpField::new(
            FloatMap2D::read_fmap(dir.join(files::FORWARD))?,
            BinaryMask::read_fmap(dir.join(files::FORWARD_MASK))?,
        )?);
        let backward = BackwardMap::from_field(WarpField::new(
            FloatMap2D::read_fmap(dir.join(files::BACKWARD))?,
            BinaryMask::read_fmap(dir.join(files::BACKWARD_MASK))?,
        )?);
        let angles = AngleMap::read(dir.join(files::ANGLES), Some(&dir.join(files::ANGLES_MASK)))?;
        let bundle = Self {
            config: meta.config,
            flat: Image::read_pnm(dir.join(files::FLAT))?,
            warped: Image::read_pnm(dir.join(files::WARPED))?,
            coord3d: FloatMap2D::read_fmap(dir.join(files::COORD3D))?,
            forward,
            backward,
            angles,
            curvature: BinaryMask::read_fmap(dir.join(files::CURVATURE))?,
            text_mask: BinaryMask::read_fmap(dir.join(files::TEXT_MASK))?,
            words: read_words(dir.join(files::WORDS))?,
            mesh: Mesh::read(dir.join(files::MESH))?,
            fold_lines: meta.fold_lines,
            camera: meta.camera,
            curvature_threshold: meta.curvature_threshold,
        };
        bundle.check_shapes()?;
        Ok(bundle)
    }

    /// All rasters must share the warped image's resolution.
    pub fn check_shapes(&self) -> Result<()> {
        let (h, w) = (self.warped.height(), self.warped.width());
        let shapes = [
            self.flat.shape(),
            self.coord3d.shape(),
            self.forward.shape(),
            self.backward.shape(),
            self.angles.values().shape(),
            self.curvature.shape(),
            self.text_mask.shape(),
        ];
        for s in shapes {
            if s.height != h || s.width != w {
                return Err(Error::shape(crate::Shape::new(h, w, s.channels), s));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(folds: usize, seed: u64) -> GenConfig {
        GenConfig { resolution: 96, folds, seed, ..GenConfig::default() }
    }

    #[test]
    fn layout_has_requested_disjoint_words_inside_margins() {
        let cfg = GenConfig { words: [15, 15], ..small(0, 3) };
        let t = render_text_layout(&cfg, 3).unwrap();
        assert_eq!(t.words.len(), 15);
        for (a, wa) in t.words.iter().enumerate() {
            assert!(wa.text.bytes().all(|c| ALPHABET.contains(&c)) && !wa.text.is_empty());
            for p in wa.quad {
                assert!(p[0] >= cfg.margin - 1e-12 && p[0] <= 1.0 - cfg.margin + 1e-12);
                assert!(p[1] >= cfg.margin - 1e-12 && p[1] <= 1.0 - cfg.margin + 1e-12);
            }
            for wb in &t.words[a + 1..] {
                let ox = wa.quad[2][0].min(wb.quad[2][0]) - wa.quad[0][0].max(wb.quad[0][0]);
                let oy = wa.quad[2][1].min(wb.quad[2][1]) - wa.quad[0][1].max(wb.quad[0][1]);
                assert!(ox <= 0.0 || oy <= 0.0);
            }
        }
        let again = render_text_layout(&cfg, 3).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn text_mask_matches_word_boxes() {
        let cfg = small(0, 5);
        let t = render_text_layout(&cfg, 5).unwrap();
        let area: f64 = t.words.iter().map(|w| w.area()).sum();
        let n = cfg.resolution as f64;
        assert!((t.text_mask.count() as f64 - area * n * n).abs() < 1e-6);
    }

    #[test]
    fn overflowing_layout_keeps_leading_words() {
        let cfg = GenConfig { words: [400, 400], chars_per_word: [7, 7], ..small(0, 1) };
        let t = render_text_layout(&cfg, 1).unwrap();
        assert!(!t.words.is_empty() && t.words.len() < 400);
        assert!(t.words.iter().all(|w| w.text.len() == 7));
    }

    #[test]
    fn impossible_layout_is_config_error() {
        let cfg = GenConfig { words: [0, 0], ..small(0, 1) };
        assert!(matches!(render_text_layout(&cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn zero_folds_and_bend_is_identity() {
        let flat = Mesh::flat(20, 20).unwrap();
        let cfg = GenConfig { bend: 0.0, ..small(0, 9) };
        assert_eq!(fold_mesh(&flat, &cfg, 9).unwrap().mesh, flat);
    }

    #[test]
    fn right_angle_fold_on_grid_line_gives_sqrt2_spacing() {
        let n = 11;
        let flat = Mesh::flat(n, n).unwrap();
        let x = pixel_center(3, n);
        let fold = Fold { line: [[x, 0.0], [x, 1.0]], angle: std::f64::consts::FRAC_PI_2 };
        let uv: Vec<[f64; 2]> = flat.vertices().iter().map(|v| [v[0], v[1]]).collect();
        let folded = Mesh::new(n, n, apply_folds(&uv, flat.vertices(), &[fold], ANCHOR)).unwrap();
        let h = mean_curvature(&folded);
        let spacing = 1.0 / n as f64;
        assert!((h.get(5, 3) - 2f64.sqrt() * spacing).abs() < 1e-9);
    }

    #[test]
    fn folds_preserve_distances_within_each_side() {
        let flat = Mesh::flat(30, 30).unwrap();
        let cfg = GenConfig { bend: 0.0, ..small(3, 4) };
        let res = fold_mesh(&flat, &cfg, 4).unwrap();
        let uv: Vec<[f64; 2]> = flat.vertices().iter().map(|v| [v[0], v[1]]).collect();
        let key = |p: [f64; 2]| res.folds.iter().map(|f| side(&f.line, p) > 0.0).collect::<Vec<_>>();
        let v = res.mesh.vertices();
        for a in (0..900).step_by(37) {
            for b in (0..900).step_by(41) {
                if key(uv[a]) == key(uv[b]) {
                    let d0 = norm(sub(flat.vertices()[a], flat.vertices()[b]));
                    let d1 = norm(sub(v[a], v[b]));
                    assert!((d0 - d1).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn adding_folds_keeps_earlier_fold_lines() {
        let a = sample_folds(&small(1, 12), 12).unwrap();
        let b = sample_folds(&small(3, 12), 12).unwrap();
        assert_eq!(a[0], b[0]);
        for (i, f) in b.iter().enumerate() {
            for g in &b[i + 1..] {
                assert!(segment_distance(&f.line, &g.line) >= 8.0 / 96.0);
            }
        }
    }

    #[test]
    fn flat_sheet_projects_to_identity() {
        let n = 64;
        let m = Mesh::flat(n, n).unwrap();
        let p = project_mesh(&m, &Camera::identity(), n, n).unwrap();
        let id = warpfield::identity_field(n, n).unwrap();
        for i in 0..n {
            for j in 0..n {
                assert!(p.forward.is_valid(i, j) && p.backward.is_valid(i, j));
                let (f, b, e) = (p.forward.value(i, j), p.backward.value(i, j), id.value(i, j));
                assert!((f[0] - e[0]).abs() < 1e-3 && (f[1] - e[1]).abs() < 1e-3);
                assert!((b[0] - e[0]).abs() < 1e-6 && (b[1] - e[1]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn translated_flat_sheet_gives_offset_forward_map() {
        let n = 64;
        let m = Mesh::flat(n, n).unwrap();
        let cam = Camera { scale: 0.8, shift: [0.5 + 3.0 / 64.0, 0.5 - 2.0 / 64.0], ..Camera::identity() };
        let p = project_mesh(&m, &cam, n, n).unwrap();
        let mut checked = 0;
        for i in 0..n {
            for j in 0..n {
                if p.forward.is_valid(i, j) {
                    let f = p.forward.value(i, j);
                    let x = pixel_center(j, n);
                    let y = pixel_center(i, n);
                    assert!((f[0] - ((x - cam.shift[0]) / 0.8 + 0.5)).abs() < 1e-5);
                    assert!((f[1] - ((y - cam.shift[1]) / 0.8 + 0.5)).abs() < 1e-5);
                    checked += 1;
                }
            }
        }
        assert!(checked > n * n / 2);
    }

    #[test]
    fn flat_config_gives_identity_bundle() {
        let b = generate_sample(&GenConfig::flat(96, 2)).unwrap();
        let id = warpfield::identity_field(96, 96).unwrap();
        for i in 0..96 {
            for j in 0..96 {
                let (v, e) = (b.backward.value(i, j), id.value(i, j));
                assert!((v[0] - e[0]).abs() < 1e-6 && (v[1] - e[1]).abs() < 1e-6);
                assert!(b.angles.theta_x(i, j).abs() < 1e-4 && b.angles.theta_y(i, j).abs() < 1e-4);
            }
        }
        assert!(b.curvature.is_empty());
    }

    #[test]
    fn folded_sample_is_self_consistent() {
        for seed in 0..4 {
            let b = generate_sample(&small(2, seed)).unwrap();
            let stats = warpfield::composition_error(&b.forward, &b.backward);
            assert!(stats.max_px < 1.0, "seed {seed}: {stats:?}");
            assert_eq!(angle_from_backward_map(&b.backward).unwrap(), b.angles);
            assert!(mask_distance_to_fold_lines(&b.curvature, &b.fold_lines) <= 2.0);
            assert_eq!(mesh::count_components(&b.curvature), 2, "seed {seed}");
        }
    }

    #[test]
    fn generation_is_deterministic_and_round_trips() {
        let cfg = small(2, 77);
        let a = generate_sample(&cfg).unwrap();
        assert_eq!(a, generate_sample(&cfg).unwrap());
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        let back = SampleBundle::load(dir.path()).unwrap();
        assert_eq!(back.backward, a.backward);
        assert_eq!(back.words, a.words);
        assert_eq!(back.angles, a.angles);
        assert_eq!(back.fold_lines, a.fold_lines);
    }

    #[test]
    fn perspective_camera_generates() {
        let cfg = GenConfig { projection: Projection::Perspective { fov: 0.8 }, ..small(1, 5) };
        let b = generate_sample(&cfg).unwrap();
        let stats = warpfield::composition_error(&b.forward, &b.backward);
        assert!(stats.max_px < 1.0, "{stats:?}");
    }

    #[test]
    fn config_validation() {
        assert!(GenConfig { resolution: 32, ..GenConfig::default() }.validate().is_err());
        assert!(GenConfig { fold_angle: [0.0, 1.0], ..GenConfig::default() }.validate().is_err());
        assert!(GenConfig { fold_angle: [0.5, 2.0], ..GenConfig::default() }.validate().is_err());
        assert!(GenConfig::default().validate().is_ok());
    }
}
