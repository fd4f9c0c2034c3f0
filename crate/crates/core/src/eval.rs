//! Rectification evaluation: simulated OCR on both rectifications, word
//! matching in the input domain, edit distance, endpoint error and MS-SSIM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, FloatMap2D, Image};
use crate::rng::{streams, DetRng};
use crate::synth::{SampleBundle, WordBox, ALPHABET};
use crate::warpfield::{apply_backward_map, convex_hull, polygon_area, BackwardMap, WarpField};

/// Standard five-level MS-SSIM exponents.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
pub const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
/// Pairs overlapping less than this fraction of the smaller box are dropped.
pub const MIN_OVERLAP_FRACTION: f64 = 0.1;
/// Points per quad edge when a word box is pushed through a map.
pub const EDGE_SEGMENTS: usize = 4;

fn orient_ccw(poly: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut p = poly.to_vec();
    if polygon_area(&p) < 0.0 {
        p.reverse();
    }
    p
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

pub fn is_convex(poly: &[[f64; 2]]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    let (mut pos, mut neg) = (false, false);
    for k in 0..n {
        let c = cross(poly[k], poly[(k + 1) % n], poly[(k + 2) % n]);
        pos |= c > 1e-15;
        neg |= c < -1e-15;
    }
    !(pos && neg)
}

/// Convex polygon as-is, anything else replaced by its convex hull. The flag
/// is true when the hull was substituted.
pub fn convexify(poly: &[[f64; 2]]) -> (Vec<[f64; 2]>, bool) {
    if is_convex(poly) {
        (orient_ccw(poly), false)
    } else {
        (orient_ccw(&convex_hull(poly)), true)
    }
}

/// Sutherland–Hodgman clip of `subject` against convex `clip`, both
/// counter-clockwise.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    let n = clip.len();
    for k in 0..n {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[k], clip[(k + 1) % n]);
        let input = std::mem::take(&mut out);
        let side = |p: [f64; 2]| cross(a, b, p);
        for i in 0..input.len() {
            let (p, q) = (input[i], input[(i + 1) % input.len()]);
            let (sp, sq) = (side(p), side(q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

/// Area of `p ∩ q`. Non-convex inputs are replaced by their convex hulls;
/// degenerate inputs give 0.
pub fn polygon_intersection_area(p: &[[f64; 2]], q: &[[f64; 2]]) -> f64 {
    polygon_intersection(p, q).0
}

/// Intersection area plus the number of hull substitutions made.
pub fn polygon_intersection(p: &[[f64; 2]], q: &[[f64; 2]]) -> (f64, usize) {
    if p.len() < 3 || q.len() < 3 {
        return (0.0, 0);
    }
    let (p, hp) = convexify(p);
    let (q, hq) = convexify(q);
    let subs = hp as usize + hq as usize;
    if polygon_area(&p).abs() <= 0.0 || polygon_area(&q).abs() <= 0.0 {
        return (0.0, subs);
    }
    (polygon_area(&clip_convex(&p, &q)).abs(), subs)
}

/// Minimum-cost one-to-one assignment of `min(n, m)` pairs, returned as
/// `(row, col)` sorted by row.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return Vec::new();
    }
    if n > m {
        let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
        let mut r: Vec<(usize, usize)> = hungarian_match(&t).into_iter().map(|(a, b)| (b, a)).collect();
        r.sort_unstable();
        return r;
    }
    // potentials over 1-based rows/cols; column 0 is the virtual start
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut r: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    r.sort_unstable();
    r
}

/// Character-level edit distance.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Levenshtein distance over the longer length; 0 for two empty strings.
pub fn normalized_edit_distance(a: &str, b: &str) -> f64 {
    let n = a.chars().count().max(b.chars().count());
    if n == 0 { 0.0 } else { levenshtein(a, b) as f64 / n as f64 }
}

/// `EDGE_SEGMENTS` points per edge, starting at each corner.
pub fn subdivide_quad(quad: &[[f64; 2]; 4]) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(4 * EDGE_SEGMENTS);
    for k in 0..4 {
        let (a, b) = (quad[k], quad[(k + 1) % 4]);
        for s in 0..EDGE_SEGMENTS {
            let t = s as f64 / EDGE_SEGMENTS as f64;
            out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    out
}

/// A word box pushed into the input image through a backward map.
pub fn warp_word(quad: &[[f64; 2]; 4], map: &WarpField) -> Vec<[f64; 2]> {
    subdivide_quad(quad).into_iter().map(|[x, y]| map.sample_checked(x, y).unwrap_or_else(|| map.sample(x, y))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub pred: usize,
    pub gt: usize,
    /// Intersection area in the input domain, normalized units².
    pub area: f64,
    pub ed: f64,
}

/// Word matching in the input domain.
#[derive(Debug, Clone, PartialEq)]
pub struct WordMatching {
    pub pairs: Vec<MatchPair>,
    pub pred_polygons: Vec<Vec<[f64; 2]>>,
    pub gt_polygons: Vec<Vec<[f64; 2]>>,
    pub hull_substitutions: usize,
}

/// Warps both word sets into the input image via their own maps, assigns
/// them by maximum total overlap and keeps pairs overlapping at least
/// [`MIN_OVERLAP_FRACTION`] of the smaller box.
pub fn match_word_boxes(pred: &[WordBox], pred_map: &WarpField, gt: &[WordBox], gt_map: &WarpField) -> WordMatching {
    let pred_polygons: Vec<_> = pred.iter().map(|w| warp_word(&w.quad, pred_map)).collect();
    let gt_polygons: Vec<_> = gt.iter().map(|w| warp_word(&w.quad, gt_map)).collect();
    let hull = |p: &Vec<[f64; 2]>| convexify(p);
    let ph: Vec<_> = pred_polygons.iter().map(hull).collect();
    let gh: Vec<_> = gt_polygons.iter().map(hull).collect();
    let hull_substitutions = ph.iter().chain(&gh).filter(|(_, s)| *s).count();
    let areas: Vec<Vec<f64>> = ph.iter().map(|(p, _)| gh.iter().map(|(q, _)| polygon_intersection_area(p, q)).collect()).collect();
    let cost: Vec<Vec<f64>> = areas.iter().map(|r| r.iter().map(|a| -a).collect()).collect();
    let pairs = hungarian_match(&cost)
        .into_iter()
        .filter_map(|(i, j)| {
            let area = areas[i][j];
            let smaller = polygon_area(&ph[i].0).abs().min(polygon_area(&gh[j].0).abs());
            (area > 0.0 && area >= MIN_OVERLAP_FRACTION * smaller).then(|| MatchPair { pred: i, gt: j, area, ed: normalized_edit_distance(&pred[i].text, &gt[j].text) })
        })
        .collect();
    WordMatching { pairs, pred_polygons, gt_polygons, hull_substitutions }
}

/// Mean over ground-truth words of the matched edit distance, unmatched
/// words scoring 1. `None` without ground-truth words. Unmatched
/// predictions do not enter the mean.
pub fn edit_distance_score(pairs: &[MatchPair], gt_count: usize, _pred_count: usize) -> Option<f64> {
    if gt_count == 0 {
        return None;
    }
    let matched: f64 = pairs.iter().map(|p| p.ed).sum();
    Some((matched + (gt_count - pairs.len()) as f64) / gt_count as f64)
}

/// Mean endpoint error over jointly valid pixels, normalized units.
pub fn epe(a: &WarpField, b: &WarpField) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    let (ca, cb) = (a.coords().data(), b.coords().data());
    let mut s = 0.0;
    let mut n = 0usize;
    for (k, (&va, &vb)) in a.valid().bits().iter().zip(b.valid().bits()).enumerate() {
        if va && vb {
            let dx = ca[2 * k] as f64 - cb[2 * k] as f64;
            let dy = ca[2 * k + 1] as f64 - cb[2 * k + 1] as f64;
            s += dx.hypot(dy);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Precondition("no jointly valid pixels for endpoint error".into()));
    }
    Ok(s / n as f64)
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable valid-mode filtering.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..SSIM_WINDOW).map(|t| k[t] * img[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..SSIM_WINDOW).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM and mean contrast-structure term at one scale.
fn ssim_level(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
    let k = gaussian_kernel();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (ma, oh, ow) = filter_valid(a, h, w, &k);
    let (mb, ..) = filter_valid(b, h, w, &k);
    let (saa, ..) = filter_valid(&prod(a, a), h, w, &k);
    let (sbb, ..) = filter_valid(&prod(b, b), h, w, &k);
    let (sab, ..) = filter_valid(&prod(a, b), h, w, &k);
    let (mut ssim, mut cs) = (0.0, 0.0);
    for t in 0..oh * ow {
        let (va, vb, cov) = (saa[t] - ma[t] * ma[t], sbb[t] - mb[t] * mb[t], sab[t] - ma[t] * mb[t]);
        let c = (2.0 * cov + SSIM_C2) / (va + vb + SSIM_C2);
        let l = (2.0 * ma[t] * mb[t] + SSIM_C1) / (ma[t] * ma[t] + mb[t] * mb[t] + SSIM_C1);
        cs += c;
        ssim += l * c;
    }
    let n = (oh * ow) as f64;
    (ssim / n, cs / n)
}

fn downsample(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let (r, c) = (2 * i, 2 * j);
            out[i * ow + j] = 0.25 * (img[r * w + c] + img[r * w + c + 1] + img[(r + 1) * w + c] + img[(r + 1) * w + c + 1]);
        }
    }
    (out, oh, ow)
}

/// Multi-scale SSIM on luma in `[0, 255]`, `levels` ∈ 1..=5, with the
/// standard exponents renormalized over the levels used.
pub fn ms_ssim(a: &Image, b: &Image, levels: usize) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    if levels == 0 || levels > MS_SSIM_WEIGHTS.len() {
        return Err(Error::InvalidValue(format!("MS-SSIM levels must be in 1..=5, got {levels}")));
    }
    let required = (1usize << (levels - 1)) * SSIM_WINDOW;
    let found = a.height().min(a.width());
    if found < required {
        return Err(Error::LevelCount { levels, required, found });
    }
    let weights = &MS_SSIM_WEIGHTS[..levels];
    let wsum: f64 = weights.iter().sum();
    let (mut x, mut y, mut h, mut w) = (a.to_gray(), b.to_gray(), a.height(), a.width());
    let mut out = 1.0;
    for (l, &wt) in weights.iter().enumerate() {
        let (ssim, cs) = ssim_level(&x, &y, h, w);
        let term = if l + 1 == levels { ssim } else { cs };
        out *= term.max(0.0).powf(wt / wsum);
        if l + 1 < levels {
            let (nx, nh, nw) = downsample(&x, h, w);
            x = nx;
            y = downsample(&y, h, w).0;
            (h, w) = (nh, nw);
        }
    }
    Ok(out)
}

/// OCR corruption model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcrConfig {
    /// Per-character error probability on undistorted words.
    pub char_error_rate: f64,
    /// Whole-word miss probability.
    pub drop_rate: f64,
    /// Std-dev of quad vertex jitter, normalized units.
    pub jitter: f64,
    /// Extra per-character error probability per radian of distortion.
    pub distortion_gain: f64,
    /// Distortion below this is read perfectly.
    pub distortion_tolerance: f64,
}

impl Default for OcrConfig {
    fn default() -> Self {
        Self { char_error_rate: 0.0, drop_rate: 0.0, jitter: 0.0, distortion_gain: 4.0, distortion_tolerance: 0.02 }
    }
}

impl OcrConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("char_error_rate", self.char_error_rate), ("drop_rate", self.drop_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        for (name, v) in [("jitter", self.jitter), ("distortion_gain", self.distortion_gain), ("distortion_tolerance", self.distortion_tolerance)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    fn char_probability(&self, distortion: f64) -> f64 {
        (self.char_error_rate + self.distortion_gain * (distortion - self.distortion_tolerance).max(0.0)).min(1.0)
    }
}

/// A word as seen by the OCR simulator. `index` picks the random substream,
/// so the same word read from two rectifications shares its draws.
#[derive(Debug, Clone, PartialEq)]
pub struct OcrInput {
    pub index: usize,
    pub word: WordBox,
    /// Geometric distortion in radians, see [`word_distortion`].
    pub distortion: f64,
}

/// Corrupts each word independently with per-character substitution,
/// insertion or deletion, whole-word drops and vertex jitter.
pub fn simulate_ocr(words: &[WordBox], cfg: &OcrConfig, seed: u64) -> Result<Vec<WordBox>> {
    let inputs: Vec<OcrInput> = words.iter().enumerate().map(|(index, w)| OcrInput { index, word: w.clone(), distortion: 0.0 }).collect();
    simulate_ocr_inputs(&inputs, cfg, seed)
}

/// [`simulate_ocr`] with the character error probability raised by each
/// word's distortion. Draws per word: one drop uniform, three uniforms per
/// character, eight normals for jitter; error sets grow monotonically with
/// distortion.
pub fn simulate_ocr_inputs(inputs: &[OcrInput], cfg: &OcrConfig, seed: u64) -> Result<Vec<WordBox>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(inputs.len());
    for inp in inputs {
        let mut rng = DetRng::new(seed, streams::OCR_WORD_BASE + inp.index as u64);
        if rng.uniform() < cfg.drop_rate {
            continue;
        }
        let p = cfg.char_probability(inp.distortion);
        let mut text = String::new();
        for ch in inp.word.text.chars() {
            let (u_err, u_kind, u_sym) = (rng.uniform(), rng.uniform(), rng.uniform());
            if u_err >= p {
                text.push(ch);
                continue;
            }
            let sym = |u: f64| ALPHABET[((u * 36.0) as usize).min(35)] as char;
            if u_kind < 1.0 / 3.0 {
                let sub = match ALPHABET.iter().position(|&a| a as char == ch) {
                    Some(k) => ALPHABET[(k + 1 + (u_sym * 35.0) as usize % 35) % 36] as char,
                    None => sym(u_sym),
                };
                text.push(sub);
            } else if u_kind < 2.0 / 3.0 {
                text.push(sym(u_sym));
                text.push(ch);
            }
        }
        let mut quad = inp.word.quad;
        for v in quad.iter_mut() {
            v[0] += cfg.jitter * rng.normal();
            v[1] += cfg.jitter * rng.normal();
        }
        if !text.is_empty() {
            out.push(WordBox { quad, text });
        }
    }
    Ok(out)
}

/// Geometric distortion of a word outline against its reference, ignoring
/// translation and uniform scale: from the least-squares affine fit, the
/// rotation angle plus the log ratio of its singular values (skew, squash),
/// plus the RMS fit residual relative to the word height (bending).
/// Mirrored or collapsed outlines are infinitely distorted.
pub fn word_distortion(reference: &[[f64; 2]], mapped: &[[f64; 2]]) -> f64 {
    let n = reference.len() as f64;
    let mean = |p: &[[f64; 2]]| {
        let s = p.iter().fold([0.0, 0.0], |a, v| [a[0] + v[0], a[1] + v[1]]);
        [s[0] / n, s[1] / n]
    };
    let (rc, mc) = (mean(reference), mean(mapped));
    // normal equations of mapped - mc = A (reference - rc)
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    let (mut ux, mut uy, mut vx, mut vy) = (0.0, 0.0, 0.0, 0.0);
    for (r, m) in reference.iter().zip(mapped) {
        let (x, y) = (r[0] - rc[0], r[1] - rc[1]);
        let (u, v) = (m[0] - mc[0], m[1] - mc[1]);
        sxx += x * x;
        sxy += x * y;
        syy += y * y;
        ux += u * x;
        uy += u * y;
        vx += v * x;
        vy += v * y;
    }
    let g = sxx * syy - sxy * sxy;
    if g <= 0.0 {
        return f64::INFINITY;
    }
    let a = (ux * syy - uy * sxy) / g;
    let b = (uy * sxx - ux * sxy) / g;
    let c = (vx * syy - vy * sxy) / g;
    let d = (vy * sxx - vx * sxy) / g;
    let det = a * d - b * c;
    if !(det > 0.0) {
        return f64::INFINITY;
    }
    let rotation = (c - b).atan2(a + d).abs();
    let q = ((a + d) / 2.0).hypot((c - b) / 2.0);
    let r = ((a - d) / 2.0).hypot((c + b) / 2.0);
    let anisotropy = ((q + r) / (q - r)).ln();
    let sq: f64 = reference
        .iter()
        .zip(mapped)
        .map(|(r, m)| {
            let (x, y) = (r[0] - rc[0], r[1] - rc[1]);
            let (eu, ev) = (m[0] - mc[0] - a * x - b * y, m[1] - mc[1] - c * x - d * y);
            eu * eu + ev * ev
        })
        .sum();
    let height = reference
        .iter()
        .map(|p| p[1])
        .fold(f64::NEG_INFINITY, f64::max)
        - reference.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let bend = (sq / n).sqrt() / (height * det.sqrt());
    let total = rotation + anisotropy + bend;
    if total.is_finite() { total } else { f64::INFINITY }
}

/// Locates output-domain points of a backward map from input-domain
/// targets: bucketed nearest pixel, then Newton steps on the bilinear map.
pub struct MapInverse<'a> {
    map: &'a WarpField,
    buckets: Vec<Vec<u32>>,
    nb: usize,
    tolerance: f64,
}

impl<'a> MapInverse<'a> {
    pub fn new(map: &'a WarpField) -> Self {
        let (h, w) = (map.height(), map.width());
        let nb = ((h.max(w) as f64).sqrt().ceil() as usize).max(1);
        let mut buckets = vec![Vec::new(); nb * nb];
        for i in 0..h {
            for j in 0..w {
                if map.is_valid(i, j) {
                    let [x, y] = map.value(i, j);
                    buckets[Self::cell(y, nb) * nb + Self::cell(x, nb)].push((i * w + j) as u32);
                }
            }
        }
        Self { map, buckets, nb, tolerance: 2.0 / h.max(w) as f64 }
    }

    fn cell(v: f64, nb: usize) -> usize {
        ((v * nb as f64) as usize).min(nb - 1)
    }

    fn nearest(&self, p: [f64; 2]) -> Option<(usize, f64)> {
        let nb = self.nb;
        let (cx, cy) = (Self::cell(p[0], nb) as i64, Self::cell(p[1], nb) as i64);
        let w = self.map.width();
        let mut best: Option<(usize, f64)> = None;
        for r in 0..nb as i64 {
            // cells at ring r are at least (r - 1) / nb away
            if let Some((_, d)) = best {
                if (r - 1) as f64 / nb as f64 > d {
                    break;
                }
            }
            for by in cy - r..=cy + r {
                for bx in cx - r..=cx + r {
                    if (by - cy).abs() != r && (bx - cx).abs() != r {
                        continue;
                    }
                    if by < 0 || bx < 0 || by >= nb as i64 || bx >= nb as i64 {
                        continue;
                    }
                    for &k in &self.buckets[by as usize * nb + bx as usize] {
                        let k = k as usize;
                        let v = self.map.value(k / w, k % w);
                        let d = (v[0] - p[0]).hypot(v[1] - p[1]);
                        if best.is_none_or(|(_, bd)| d < bd) {
                            best = Some((k, d));
                        }
                    }
                }
            }
        }
        best
    }

    /// Solves `map(s, t) = p` inside the bilinear cell whose top-left sample
    /// is pixel `(i, j)`.
    fn solve_cell(&self, i: usize, j: usize, p: [f64; 2]) -> Option<[f64; 2]> {
        let (h, w) = (self.map.height(), self.map.width());
        if i + 1 >= h || j + 1 >= w {
            return None;
        }
        let corners = [(i, j), (i, j + 1), (i + 1, j), (i + 1, j + 1)];
        if !corners.iter().all(|&(a, b)| self.map.is_valid(a, b)) {
            return None;
        }
        let [v00, v01, v10, v11] = corners.map(|(a, b)| self.map.value(a, b));
        let (mut s, mut t) = (0.5, 0.5);
        for _ in 0..12 {
            let f = |k: usize| v00[k] * (1.0 - s) * (1.0 - t) + v01[k] * s * (1.0 - t) + v10[k] * (1.0 - s) * t + v11[k] * s * t - p[k];
            let r = [f(0), f(1)];
            let ds = |k: usize| (v01[k] - v00[k]) * (1.0 - t) + (v11[k] - v10[k]) * t;
            let dt = |k: usize| (v10[k] - v00[k]) * (1.0 - s) + (v11[k] - v01[k]) * s;
            let det = ds(0) * dt(1) - dt(0) * ds(1);
            if det == 0.0 || !det.is_finite() {
                return None;
            }
            s -= (dt(1) * r[0] - dt(0) * r[1]) / det;
            t -= (-ds(1) * r[0] + ds(0) * r[1]) / det;
            if !(-1.0..=2.0).contains(&s) || !(-1.0..=2.0).contains(&t) {
                return None;
            }
        }
        const SLACK: f64 = 1e-6;
        if !(-SLACK..=1.0 + SLACK).contains(&s) || !(-SLACK..=1.0 + SLACK).contains(&t) {
            return None;
        }
        let v = self.map.sample(((j as f64 + 0.5 + s) / w as f64).min(1.0), ((i as f64 + 0.5 + t) / h as f64).min(1.0));
        ((v[0] - p[0]).hypot(v[1] - p[1]) <= 1e-3 * self.tolerance).then(|| [(j as f64 + 0.5 + s) / w as f64, (i as f64 + 0.5 + t) / h as f64])
    }

    /// Output-domain point whose map value is `p`. Exact bilinear solutions
    /// near the closest sample win, nearest to it when the map folds; failing
    /// that, the closest sample itself if within two pixels.
    pub fn solve(&self, p: [f64; 2]) -> Option<[f64; 2]> {
        let (h, w) = (self.map.height(), self.map.width());
        let (k, d0) = self.nearest(p)?;
        let (ci, cj) = (k / w, k % w);
        let center = [(cj as f64 + 0.5) / w as f64, (ci as f64 + 0.5) / h as f64];
        let mut best: Option<([f64; 2], f64)> = None;
        for i in ci.saturating_sub(2)..=ci + 1 {
            for j in cj.saturating_sub(2)..=cj + 1 {
                if let Some(q) = self.solve_cell(i, j, p) {
                    let d = (q[0] - center[0]).hypot(q[1] - center[1]);
                    if best.is_none_or(|(_, bd)| d < bd) {
                        best = Some((q, d));
                    }
                }
            }
        }
        match best {
            Some((q, _)) => Some(q),
            None => (d0 <= self.tolerance).then_some(center),
        }
    }
}

/// Where each rectified-page word lands in the rectification produced by
/// `predicted`, as OCR inputs with their distortion. Words with any point
/// the predicted map cannot reach are lost.
pub fn words_in_prediction(words: &[WordBox], truth: &WarpField, predicted: &WarpField) -> Vec<OcrInput> {
    let same = truth == predicted;
    let inverse = (!same).then(|| MapInverse::new(predicted));
    let mut out = Vec::with_capacity(words.len());
    for (index, word) in words.iter().enumerate() {
        let reference = subdivide_quad(&word.quad);
        let mapped: Option<Vec<[f64; 2]>> = match &inverse {
            None => Some(reference.clone()),
            Some(inv) => reference.iter().map(|&[x, y]| inv.solve(truth.sample_checked(x, y).unwrap_or_else(|| truth.sample(x, y)))).collect(),
        };
        let Some(mapped) = mapped else { continue };
        let distortion = word_distortion(&reference, &mapped);
        let quad = [mapped[0], mapped[EDGE_SEGMENTS], mapped[2 * EDGE_SEGMENTS], mapped[3 * EDGE_SEGMENTS]];
        out.push(OcrInput { index, word: WordBox { quad, text: word.text.clone() }, distortion });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub ocr: OcrConfig,
    pub levels: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { ocr: OcrConfig::default(), levels: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub matched: usize,
    pub unmatched_gt: usize,
    pub unmatched_pred: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordReport {
    pub gt: Option<String>,
    pub pred: Option<String>,
    /// Normalized edit distance; 1 for unmatched ground truth, absent for
    /// unmatched predictions.
    pub ed: Option<f64>,
    pub area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMeta {
    pub height: usize,
    pub width: usize,
    pub levels: usize,
    pub ms_ssim_weights: Vec<f64>,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    pub ocr: OcrConfig,
    pub seed: u64,
    pub hull_substitutions: usize,
    pub min_overlap_fraction: f64,
    pub epe_units: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ed: Option<f64>,
    pub epe: f64,
    pub ms_ssim: f64,
    pub counts: MatchCounts,
    pub words: Vec<WordReport>,
    pub meta: EvalMeta,
}

/// Report plus the intermediate artifacts used for overlays.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub gt_rectified: Image,
    pub pred_rectified: Image,
    pub gt_words: Vec<WordBox>,
    pub pred_words: Vec<WordBox>,
    pub matching: WordMatching,
}

const RECTIFY_FILL: [u8; 3] = [0, 0, 0];

/// Rectifies the sample with both maps, reads words off each rectification,
/// matches them in the input image and scores the pair.
pub fn evaluate(sample: &SampleBundle, predicted: &BackwardMap, opts: &EvalOptions) -> Result<Evaluation> {
    let truth = &sample.backward;
    if predicted.shape() != truth.shape() {
        return Err(Error::shape(truth.shape(), predicted.shape()));
    }
    opts.ocr.validate()?;
    let gt_rectified = apply_backward_map(&sample.warped, truth, &RECTIFY_FILL)?;
    let pred_rectified = if predicted == truth { gt_rectified.clone() } else { apply_backward_map(&sample.warped, predicted, &RECTIFY_FILL)? };

    let gt_inputs = words_in_prediction(&sample.words, truth, truth);
    let pred_inputs = words_in_prediction(&sample.words, truth, predicted);
    let gt_words = simulate_ocr_inputs(&gt_inputs, &opts.ocr, opts.seed)?;
    let pred_words = simulate_ocr_inputs(&pred_inputs, &opts.ocr, opts.seed)?;

    let matching = match_word_boxes(&pred_words, predicted, &gt_words, truth);
    let ed = edit_distance_score(&matching.pairs, gt_words.len(), pred_words.len());
    let epe_value = epe(predicted, truth)?;
    let ms = ms_ssim(&pred_rectified, &gt_rectified, opts.levels)?;

    let mut words = Vec::new();
    let mut gt_hit = vec![false; gt_words.len()];
    let mut pred_hit = vec![false; pred_words.len()];
    for p in &matching.pairs {
        gt_hit[p.gt] = true;
        pred_hit[p.pred] = true;
        words.push(WordReport { gt: Some(gt_words[p.gt].text.clone()), pred: Some(pred_words[p.pred].text.clone()), ed: Some(p.ed), area: p.area });
    }
    for (w, _) in gt_words.iter().zip(&gt_hit).filter(|(_, hit)| !**hit) {
        words.push(WordReport { gt: Some(w.text.clone()), pred: None, ed: Some(1.0), area: 0.0 });
    }
    for (w, _) in pred_words.iter().zip(&pred_hit).filter(|(_, hit)| !**hit) {
        words.push(WordReport { gt: None, pred: Some(w.text.clone()), ed: None, area: 0.0 });
    }
    let counts = MatchCounts {
        matched: matching.pairs.len(),
        unmatched_gt: gt_words.len() - matching.pairs.len(),
        unmatched_pred: pred_words.len() - matching.pairs.len(),
    };
    let report = EvalReport {
        ed,
        epe: epe_value,
        ms_ssim: ms,
        counts,
        words,
        meta: EvalMeta {
            height: truth.height(),
            width: truth.width(),
            levels: opts.levels,
            ms_ssim_weights: MS_SSIM_WEIGHTS[..opts.levels.min(5)].to_vec(),
            ssim_c1: SSIM_C1,
            ssim_c2: SSIM_C2,
            ocr: opts.ocr,
            seed: opts.seed,
            hull_substitutions: matching.hull_substitutions,
            min_overlap_fraction: MIN_OVERLAP_FRACTION,
            epe_units: "normalized".into(),
            version: crate::VERSION.into(),
        },
    };
    Ok(Evaluation { report, gt_rectified, pred_rectified, gt_words, pred_words, matching })
}

pub const MATCH_COLOR: [u8; 3] = [160, 32, 240];
pub const GT_ONLY_COLOR: [u8; 3] = [30, 80, 255];
pub const PRED_ONLY_COLOR: [u8; 3] = [230, 30, 30];

fn point_in_polygon(poly: &[[f64; 2]], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = poly.len();
    for k in 0..n {
        let (a, b) = (poly[k], poly[(k + 1) % n]);
        if (a[1] > y) != (b[1] > y) && x < a[0] + (y - a[1]) / (b[1] - a[1]) * (b[0] - a[0]) {
            inside = !inside;
        }
    }
    inside
}

fn polygon_mask(poly: &[[f64; 2]], h: usize, w: usize, mask: &mut [bool]) {
    if poly.len() < 3 {
        return;
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in poly {
        (x0, x1, y0, y1) = (x0.min(p[0]), x1.max(p[0]), y0.min(p[1]), y1.max(p[1]));
    }
    let j0 = ((x0 * w as f64).floor().max(0.0) as usize).min(w);
    let j1 = ((x1 * w as f64).ceil().max(0.0) as usize).min(w);
    let i0 = ((y0 * h as f64).floor().max(0.0) as usize).min(h);
    let i1 = ((y1 * h as f64).ceil().max(0.0) as usize).min(h);
    for i in i0..i1 {
        for j in j0..j1 {
            if point_in_polygon(poly, (j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64) {
                mask[i * w + j] = true;
            }
        }
    }
}

/// Input image tinted where words were found: purple where both readings
/// of a matched word overlap, blue for ground-truth-only area, red for
/// prediction-only area.
pub fn render_overlay(input: &Image, matching: &WordMatching) -> Result<Image> {
    let (h, w) = (input.height(), input.width());
    let mut gt = vec![false; h * w];
    let mut pred = vec![false; h * w];
    for poly in &matching.gt_polygons {
        polygon_mask(poly, h, w, &mut gt);
    }
    for poly in &matching.pred_polygons {
        polygon_mask(poly, h, w, &mut pred);
    }
    let mut data = Vec::with_capacity(h * w * 3);
    for k in 0..h * w {
        let px = input.pixel(k / w, k % w);
        let base: [u8; 3] = if input.channels() == 3 { [px[0], px[1], px[2]] } else { [px[0]; 3] };
        let tint = match (gt[k], pred[k]) {
            (true, true) => Some(MATCH_COLOR),
            (true, false) => Some(GT_ONLY_COLOR),
            (false, true) => Some(PRED_ONLY_COLOR),
            (false, false) => None,
        };
        match tint {
            Some(t) => data.extend((0..3).map(|c| ((base[c] as u16 + t[c] as u16) / 2) as u8)),
            None => data.extend_from_slice(&base),
        }
    }
    Image::new(h, w, 3, data)
}

/// Adds i.i.d. Gaussian noise of std-dev `sigma` to every valid coordinate.
/// Pixels pushed outside `[0, 1]` become invalid.
pub fn perturb_backward_map(b: &BackwardMap, sigma: f64, seed: u64) -> Result<BackwardMap> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidValue(format!("noise sigma must be finite and non-negative, got {sigma}")));
    }
    let mut rng = DetRng::new(seed, streams::NOISE);
    let src = b.coords().data();
    let mut data = src.to_vec();
    let mut valid = b.valid().bits().to_vec();
    for (k, v) in valid.iter_mut().enumerate() {
        if !*v {
            continue;
        }
        for c in 0..2 {
            let x = src[2 * k + c] as f64 + sigma * rng.normal();
            data[2 * k + c] = x as f32;
            if !(0.0..=1.0).contains(&x) {
                *v = false;
            }
        }
    }
    for (k, v) in valid.iter().enumerate() {
        if !*v {
            data[2 * k] = data[2 * k].clamp(0.0, 1.0);
            data[2 * k + 1] = data[2 * k + 1].clamp(0.0, 1.0);
        }
    }
    BackwardMap::new(FloatMap2D::new(b.height(), b.width(), 2, data)?, BinaryMask::new(b.height(), b.width(), valid)?)
}
