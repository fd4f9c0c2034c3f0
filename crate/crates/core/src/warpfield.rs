//! Forward/backward warp fields, resampling, scattered inversion, local warp
//! angles and polygon warping.
//!
//! A warp field is a 2-channel raster of normalized `(x, y)` targets plus a
//! validity mask. A [`BackwardMap`] lives on the rectified grid and points
//! into the warped input; a [`ForwardMap`] lives on the warped grid and
//! points into the rectified domain.
//!
//! Angles are measured counter-clockwise as displayed, i.e. with the image
//! y axis pointing down: `θx` is the angle of the warped x-step from `+x`
//! and `θy` the angle of the warped y-step from `+y`, both turning from the
//! axis toward the screen-counter-clockwise side.

use std::ops::Deref;
use std::path::Path;

use crate::error::{Error, Result, Shape};
use crate::raster::{pixel_center, quantize, BinaryMask, FloatMap2D, Image};

/// Splat weight below which a rectified pixel is treated as a hole.
const SPLAT_MIN_WEIGHT: f64 = 0.1;
/// Upper bound on hole-filling passes during inversion.
pub const MAX_FILL_PASSES: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct WarpField {
    coords: FloatMap2D,
    valid: BinaryMask,
}

impl WarpField {
    /// Valid pixels must hold both coordinates in `[0, 1]`.
    pub fn new(coords: FloatMap2D, valid: BinaryMask) -> Result<Self> {
        check_field_shapes(&coords, &valid)?;
        for i in 0..coords.height() {
            for j in 0..coords.width() {
                if valid.get(i, j) {
                    let p = coords.pixel(i, j);
                    if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
                        return Err(Error::InvalidValue(format!(
                            "valid warp pixel ({i},{j}) holds ({}, {}) outside [0,1]",
                            p[0], p[1]
                        )));
                    }
                }
            }
        }
        Ok(Self { coords, valid })
    }

    /// Like [`WarpField::new`] but marks out-of-range pixels invalid instead
    /// of rejecting them.
    pub fn new_clipped(coords: FloatMap2D, valid: Option<&BinaryMask>) -> Result<Self> {
        if let Some(v) = valid {
            check_field_shapes(&coords, v)?;
        } else if coords.channels() != 2 {
            return Err(Error::shape(Shape::new(coords.height(), coords.width(), 2), coords.shape()));
        }
        let (h, w) = (coords.height(), coords.width());
        let mut bits = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let p = coords.pixel(i, j);
                let in_range = (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]);
                bits.push(in_range && valid.map_or(true, |v| v.get(i, j)));
            }
        }
        let valid = BinaryMask::new(h, w, bits)?;
        Ok(Self { coords, valid })
    }

    pub fn coords(&self) -> &FloatMap2D {
        &self.coords
    }

    pub fn valid(&self) -> &BinaryMask {
        &self.valid
    }

    pub fn height(&self) -> usize {
        self.coords.height()
    }

    pub fn width(&self) -> usize {
        self.coords.width()
    }

    pub fn shape(&self) -> Shape {
        self.coords.shape()
    }

    #[inline]
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid.get(row, col)
    }

    #[inline]
    pub fn value(&self, row: usize, col: usize) -> [f64; 2] {
        let p = self.coords.pixel(row, col);
        [p[0] as f64, p[1] as f64]
    }

    /// Plain clamped bilinear sample, ignoring validity.
    pub fn sample(&self, x: f64, y: f64) -> [f64; 2] {
        let mut out = [0.0; 2];
        self.coords.sample_into(x, y, &mut out);
        out
    }

    /// Bilinear sample that only succeeds when every tap with non-zero
    /// weight is valid and `(x, y)` lies inside the pixel-center lattice.
    pub fn sample_checked(&self, x: f64, y: f64) -> Option<[f64; 2]> {
        let (h, w) = (self.height(), self.width());
        let px = x * w as f64 - 0.5;
        let py = y * h as f64 - 0.5;
        let tol = 1e-9;
        if !(px >= -tol && py >= -tol && px <= (w - 1) as f64 + tol && py <= (h - 1) as f64 + tol) {
            return None;
        }
        let px = px.clamp(0.0, (w - 1) as f64);
        let py = py.clamp(0.0, (h - 1) as f64);
        let j0 = (px.floor() as usize).min(w - 1);
        let i0 = (py.floor() as usize).min(h - 1);
        let fx = px - j0 as f64;
        let fy = py - i0 as f64;
        let taps = [(0, 0, (1.0 - fx) * (1.0 - fy)), (0, 1, fx * (1.0 - fy)), (1, 0, (1.0 - fx) * fy), (1, 1, fx * fy)];
        let mut acc = [0.0; 2];
        for (di, dj, wgt) in taps {
            if wgt <= 1e-12 {
                continue;
            }
            let (i, j) = (i0 + di, j0 + dj);
            if i >= h || j >= w || !self.valid.get(i, j) {
                return None;
            }
            let v = self.value(i, j);
            acc[0] += wgt * v[0];
            acc[1] += wgt * v[1];
        }
        Some(acc)
    }

    pub fn write(&self, coords_path: impl AsRef<Path>, mask_path: impl AsRef<Path>) -> Result<()> {
        self.coords.write_fmap(coords_path)?;
        self.valid.write_fmap(mask_path)
    }

    /// Reads a 2-channel coordinate FMAP; with no mask file every in-range
    /// pixel is valid.
    pub fn read(coords_path: impl AsRef<Path>, mask_path: Option<&Path>) -> Result<Self> {
        let coords = FloatMap2D::read_fmap(coords_path)?;
        match mask_path {
            Some(p) => {
                let mask = BinaryMask::read_fmap(p)?;
                check_field_shapes(&coords, &mask)?;
                Self::new_clipped(coords, Some(&mask))
            }
            None => Self::new_clipped(coords, None),
        }
    }
}

fn check_field_shapes(coords: &FloatMap2D, valid: &BinaryMask) -> Result<()> {
    if coords.channels() != 2 {
        return Err(Error::shape(Shape::new(coords.height(), coords.width(), 2), coords.shape()));
    }
    if valid.height() != coords.height() || valid.width() != coords.width() {
        return Err(Error::shape(Shape::new(coords.height(), coords.width(), 1), valid.shape()));
    }
    Ok(())
}

macro_rules! warp_newtype {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name(WarpField);

        impl $name {
            pub fn new(coords: FloatMap2D, valid: BinaryMask) -> Result<Self> {
                WarpField::new(coords, valid).map(Self)
            }

            pub fn from_field(field: WarpField) -> Self {
                Self(field)
            }

            pub fn into_field(self) -> WarpField {
                self.0
            }

            pub fn field(&self) -> &WarpField {
                &self.0
            }

            pub fn read(coords_path: impl AsRef<Path>, mask_path: Option<&Path>) -> Result<Self> {
                WarpField::read(coords_path, mask_path).map(Self)
            }
        }

        impl Deref for $name {
            type Target = WarpField;

            fn deref(&self) -> &WarpField {
                &self.0
            }
        }
    };
}

warp_newtype!(
    /// Rectified grid → normalized source location in the warped input.
    BackwardMap
);
warp_newtype!(
    /// Warped-input grid → normalized destination in the rectified domain.
    ForwardMap
);

pub fn identity_field(h: usize, w: usize) -> Result<WarpField> {
    let coords = FloatMap2D::from_fn(h, w, 2, |i, j, c| {
        if c == 0 {
            pixel_center(j, w) as f32
        } else {
            pixel_center(i, h) as f32
        }
    })?;
    WarpField::new(coords, BinaryMask::filled(h, w, true)?)
}

pub fn identity_backward_map(h: usize, w: usize) -> Result<BackwardMap> {
    identity_field(h, w).map(BackwardMap)
}

/// Builds a field by evaluating a normalized-coordinate function at every
/// pixel center; out-of-range results are marked invalid.
pub fn field_from_fn(h: usize, w: usize, f: impl Fn(f64, f64) -> [f64; 2]) -> Result<WarpField> {
    let mut data = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            let v = f(pixel_center(j, w), pixel_center(i, h));
            data.push(v[0] as f32);
            data.push(v[1] as f32);
        }
    }
    WarpField::new_clipped(FloatMap2D::new(h, w, 2, data)?, None)
}

/// Resamples `src` on the field's grid: every valid output pixel takes the
/// bilinear sample of `src` at the field's value, invalid ones take `fill`.
pub fn resample_float(src: &FloatMap2D, field: &WarpField, fill: &[f32]) -> Result<FloatMap2D> {
    if fill.len() != src.channels() {
        return Err(Error::InvalidValue(format!(
            "fill has {} channels, source has {}",
            fill.len(),
            src.channels()
        )));
    }
    let (h, w, c) = (field.height(), field.width(), src.channels());
    let mut data = Vec::with_capacity(h * w * c);
    let mut buf = vec![0.0f64; c];
    for i in 0..h {
        for j in 0..w {
            if field.is_valid(i, j) {
                let v = field.value(i, j);
                src.sample_into(v[0], v[1], &mut buf);
                data.extend(buf.iter().map(|&x| x as f32));
            } else {
                data.extend_from_slice(fill);
            }
        }
    }
    FloatMap2D::new(h, w, c, data)
}

pub fn resample_image(src: &Image, field: &WarpField, fill: &[u8]) -> Result<Image> {
    if fill.len() != src.channels() {
        return Err(Error::InvalidValue(format!(
            "fill has {} channels, image has {}",
            fill.len(),
            src.channels()
        )));
    }
    let srcf = src.to_float_map();
    let (h, w, c) = (field.height(), field.width(), src.channels());
    let mut data = Vec::with_capacity(h * w * c);
    let mut buf = vec![0.0f64; c];
    for i in 0..h {
        for j in 0..w {
            if field.is_valid(i, j) {
                let v = field.value(i, j);
                srcf.sample_into(v[0], v[1], &mut buf);
                data.extend(buf.iter().map(|&x| quantize(x)));
            } else {
                data.extend_from_slice(fill);
            }
        }
    }
    Image::new(h, w, c, data)
}

/// Rectifies `img` with a backward map.
pub fn apply_backward_map(img: &Image, b: &BackwardMap, fill: &[u8]) -> Result<Image> {
    if b.valid().is_empty() {
        return Err(Error::Precondition("backward map has no valid pixels".into()));
    }
    resample_image(img, b, fill)
}

pub fn apply_backward_map_float(src: &FloatMap2D, b: &BackwardMap, fill: &[f32]) -> Result<FloatMap2D> {
    if b.valid().is_empty() {
        return Err(Error::Precondition("backward map has no valid pixels".into()));
    }
    resample_float(src, b, fill)
}

/// Inverts a forward map onto an `out_h × out_w` rectified grid by
/// splatting every valid sample `f(p) → p` with bilinear weights, then
/// filling holes inside the samples' convex hull by iterative neighborhood
/// averaging. Pixels outside the hull or never filled are invalid.
pub fn invert_forward_map(f: &ForwardMap, out_h: usize, out_w: usize) -> Result<BackwardMap> {
    invert_field(f, out_h, out_w).map(BackwardMap)
}

/// Scattered inversion of any warp field (see [`invert_forward_map`]).
pub fn invert_field(field: &WarpField, out_h: usize, out_w: usize) -> Result<WarpField> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidValue("inversion grid must be non-empty".into()));
    }
    let (h, w) = (field.height(), field.width());
    let mut targets = Vec::new();
    let mut sources = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if field.is_valid(i, j) {
                let v = field.value(i, j);
                targets.push([v[0] * out_w as f64 - 0.5, v[1] * out_h as f64 - 0.5]);
                sources.push([pixel_center(j, w), pixel_center(i, h)]);
            }
        }
    }
    let hull = convex_hull(&targets);
    if hull.len() < 3 || polygon_area(&hull).abs() < 1e-12 {
        return Err(Error::Degenerate("forward samples are collinear; cannot invert".into()));
    }

    let n = out_h * out_w;
    let mut weight = vec![0.0f64; n];
    let mut acc = vec![[0.0f64; 2]; n];
    for (t, s) in targets.iter().zip(&sources) {
        let j0 = t[0].floor();
        let i0 = t[1].floor();
        let fx = t[0] - j0;
        let fy = t[1] - i0;
        for (di, dj, wgt) in [(0, 0, (1.0 - fx) * (1.0 - fy)), (0, 1, fx * (1.0 - fy)), (1, 0, (1.0 - fx) * fy), (1, 1, fx * fy)] {
            let i = i0 as i64 + di;
            let j = j0 as i64 + dj;
            if wgt <= 0.0 || i < 0 || j < 0 || i >= out_h as i64 || j >= out_w as i64 {
                continue;
            }
            let k = i as usize * out_w + j as usize;
            weight[k] += wgt;
            acc[k][0] += wgt * s[0];
            acc[k][1] += wgt * s[1];
        }
    }

    let inside: Vec<bool> = (0..n)
        .map(|k| point_in_convex(&hull, [(k % out_w) as f64, (k / out_w) as f64], 1e-3))
        .collect();
    let mut filled = vec![false; n];
    let mut value = vec![[0.0f64; 2]; n];
    for k in 0..n {
        if inside[k] && weight[k] >= SPLAT_MIN_WEIGHT {
            filled[k] = true;
            value[k] = [acc[k][0] / weight[k], acc[k][1] / weight[k]];
        }
    }
    for _ in 0..MAX_FILL_PASSES {
        let mut updates = Vec::new();
        for k in 0..n {
            if filled[k] || !inside[k] {
                continue;
            }
            let (i, j) = ((k / out_w) as i64, (k % out_w) as i64);
            let mut sum = [0.0; 2];
            let mut cnt = 0usize;
            for di in -1..=1i64 {
                for dj in -1..=1i64 {
                    let (ni, nj) = (i + di, j + dj);
                    if (di == 0 && dj == 0) || ni < 0 || nj < 0 || ni >= out_h as i64 || nj >= out_w as i64 {
                        continue;
                    }
                    let nk = ni as usize * out_w + nj as usize;
                    if filled[nk] {
                        sum[0] += value[nk][0];
                        sum[1] += value[nk][1];
                        cnt += 1;
                    }
                }
            }
            if cnt > 0 {
                updates.push((k, [sum[0] / cnt as f64, sum[1] / cnt as f64]));
            }
        }
        if updates.is_empty() {
            break;
        }
        for (k, v) in updates {
            filled[k] = true;
            value[k] = v;
        }
    }

    let mut data = Vec::with_capacity(n * 2);
    for k in 0..n {
        if filled[k] {
            data.push(value[k][0].clamp(0.0, 1.0) as f32);
            data.push(value[k][1].clamp(0.0, 1.0) as f32);
        } else {
            data.extend_from_slice(&[0.0, 0.0]);
        }
    }
    WarpField::new(FloatMap2D::new(out_h, out_w, 2, data)?, BinaryMask::new(out_h, out_w, filled)?)
}

/// Monotone-chain convex hull, counter-clockwise in a y-up frame, without
/// repeated endpoint.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Signed shoelace area (positive for counter-clockwise in a y-up frame).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for k in 0..n {
        let a = poly[k];
        let b = poly[(k + 1) % n];
        s += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * s
}

fn point_in_convex(hull: &[[f64; 2]], p: [f64; 2], tol: f64) -> bool {
    let n = hull.len();
    for k in 0..n {
        let a = hull[k];
        let b = hull[(k + 1) % n];
        let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        if cross < -tol * len.max(1.0) {
            return false;
        }
    }
    true
}

/// Per-pixel warp angles and stretch magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleMap {
    /// Channels: θx, θy, ρx, ρy. Invalid pixels hold zeros.
    values: FloatMap2D,
    valid: BinaryMask,
}

impl AngleMap {
    pub fn new(values: FloatMap2D, valid: BinaryMask) -> Result<Self> {
        if values.channels() != 4 {
            return Err(Error::shape(Shape::new(values.height(), values.width(), 4), values.shape()));
        }
        if valid.height() != values.height() || valid.width() != values.width() {
            return Err(Error::shape(Shape::new(values.height(), values.width(), 1), valid.shape()));
        }
        let pi = std::f32::consts::PI;
        for (k, px) in values.data().chunks_exact(4).enumerate() {
            if !valid.bits()[k] {
                continue;
            }
            if !(px[0] > -pi && px[0] <= pi && px[1] > -pi && px[1] <= pi) {
                return Err(Error::InvalidValue(format!("angle outside (-pi, pi] at pixel {k}")));
            }
            if px[2] < 0.0 || px[3] < 0.0 {
                return Err(Error::InvalidValue(format!("negative magnitude at pixel {k}")));
            }
        }
        Ok(Self { values, valid })
    }

    pub(crate) fn from_pixels(h: usize, w: usize, pixels: &[PixelAngles]) -> Result<Self> {
        let mut data = Vec::with_capacity(h * w * 4);
        let mut bits = Vec::with_capacity(h * w);
        for p in pixels {
            if p.valid {
                data.extend_from_slice(&[
                    wrap_f32(p.theta_x),
                    wrap_f32(p.theta_y),
                    p.rho_x as f32,
                    p.rho_y as f32,
                ]);
            } else {
                data.extend_from_slice(&[0.0; 4]);
            }
            bits.push(p.valid);
        }
        Self::new(FloatMap2D::new(h, w, 4, data)?, BinaryMask::new(h, w, bits)?)
    }

    pub fn values(&self) -> &FloatMap2D {
        &self.values
    }

    pub fn valid(&self) -> &BinaryMask {
        &self.valid
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn theta_x(&self, row: usize, col: usize) -> f64 {
        self.values.get(row, col, 0) as f64
    }

    pub fn theta_y(&self, row: usize, col: usize) -> f64 {
        self.values.get(row, col, 1) as f64
    }

    pub fn rho_x(&self, row: usize, col: usize) -> f64 {
        self.values.get(row, col, 2) as f64
    }

    pub fn rho_y(&self, row: usize, col: usize) -> f64 {
        self.values.get(row, col, 3) as f64
    }

    pub fn write(&self, values_path: impl AsRef<Path>, mask_path: impl AsRef<Path>) -> Result<()> {
        self.values.write_fmap(values_path)?;
        self.valid.write_fmap(mask_path)
    }

    pub fn read(values_path: impl AsRef<Path>, mask_path: Option<&Path>) -> Result<Self> {
        let values = FloatMap2D::read_fmap(values_path)?;
        let valid = match mask_path {
            Some(p) => BinaryMask::read_fmap(p)?,
            None => BinaryMask::filled(values.height(), values.width(), true)?,
        };
        Self::new(values, valid)
    }
}

/// Rounds to f32 while keeping the result inside `(-π, π]`.
fn wrap_f32(theta: f64) -> f32 {
    let v = theta as f32;
    if v <= -std::f32::consts::PI {
        std::f32::consts::PI
    } else if v > std::f32::consts::PI {
        v - std::f32::consts::TAU
    } else {
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct PixelAngles {
    pub theta_x: f64,
    pub theta_y: f64,
    pub rho_x: f64,
    pub rho_y: f64,
    pub valid: bool,
}

/// Which neighbors a finite difference uses along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Stencil {
    Central,
    Forward,
    Backward,
}

pub(crate) fn stencil(valid: &[bool], h: usize, w: usize, i: usize, j: usize, along_x: bool) -> Option<Stencil> {
    let (prev, next) = if along_x {
        (j > 0 && valid[i * w + j - 1], j + 1 < w && valid[i * w + j + 1])
    } else {
        (i > 0 && valid[(i - 1) * w + j], i + 1 < h && valid[(i + 1) * w + j])
    };
    match (prev, next) {
        (true, true) => Some(Stencil::Central),
        (false, true) => Some(Stencil::Forward),
        (true, false) => Some(Stencil::Backward),
        (false, false) => None,
    }
}

/// Finite-difference Jacobian column along one axis, in pixel units of the
/// map's own grid (identity → unit vector). `coords` is interleaved `(x, y)`.
pub(crate) fn jacobian_column(coords: &[f64], h: usize, w: usize, i: usize, j: usize, along_x: bool, s: Stencil) -> [f64; 2] {
    let idx = |ii: usize, jj: usize| (ii * w + jj) * 2;
    let (a, b, span) = match (along_x, s) {
        (true, Stencil::Central) => (idx(i, j - 1), idx(i, j + 1), 2.0),
        (true, Stencil::Forward) => (idx(i, j), idx(i, j + 1), 1.0),
        (true, Stencil::Backward) => (idx(i, j - 1), idx(i, j), 1.0),
        (false, Stencil::Central) => (idx(i - 1, j), idx(i + 1, j), 2.0),
        (false, Stencil::Forward) => (idx(i, j), idx(i + 1, j), 1.0),
        (false, Stencil::Backward) => (idx(i - 1, j), idx(i, j), 1.0),
    };
    [(coords[b] - coords[a]) * w as f64 / span, (coords[b + 1] - coords[a + 1]) * h as f64 / span]
}

/// θ of a warped x-step: `atan2(-Jx.y, Jx.x)`.
#[inline]
pub(crate) fn theta_of_x_column(jx: [f64; 2]) -> f64 {
    canonical_angle((-jx[1]).atan2(jx[0]))
}

/// θ of a warped y-step: `atan2(Jy.x, Jy.y)`.
#[inline]
pub(crate) fn theta_of_y_column(jy: [f64; 2]) -> f64 {
    canonical_angle(jy[0].atan2(jy[1]))
}

#[inline]
pub(crate) fn canonical_angle(t: f64) -> f64 {
    if t <= -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        t
    }
}

/// Angle field of an interleaved f64 coordinate buffer with a fixed validity
/// pattern. Shared by [`angle_from_backward_map`] and the loss gradients.
pub(crate) fn angles_from_coords(coords: &[f64], valid: &[bool], h: usize, w: usize) -> Vec<PixelAngles> {
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            out.push(pixel_angles(coords, valid, h, w, i, j));
        }
    }
    out
}

/// Angles of one pixel of [`angles_from_coords`].
pub(crate) fn pixel_angles(coords: &[f64], valid: &[bool], h: usize, w: usize, i: usize, j: usize) -> PixelAngles {
    let invalid = PixelAngles { theta_x: 0.0, theta_y: 0.0, rho_x: 0.0, rho_y: 0.0, valid: false };
    if !valid[i * w + j] {
        return invalid;
    }
    let (Some(sx), Some(sy)) = (stencil(valid, h, w, i, j, true), stencil(valid, h, w, i, j, false)) else {
        return invalid;
    };
    let jx = jacobian_column(coords, h, w, i, j, true, sx);
    let jy = jacobian_column(coords, h, w, i, j, false, sy);
    PixelAngles { theta_x: theta_of_x_column(jx), theta_y: theta_of_y_column(jy), rho_x: jx[0].hypot(jx[1]), rho_y: jy[0].hypot(jy[1]), valid: true }
}

/// Local warp angles of a backward map: central differences in the
/// interior, one-sided at borders; pixels without a valid neighbor along
/// either axis come out invalid.
pub fn angle_from_backward_map(b: &BackwardMap) -> Result<AngleMap> {
    angle_from_field(b)
}

pub fn angle_from_field(field: &WarpField) -> Result<AngleMap> {
    let (h, w) = (field.height(), field.width());
    let coords: Vec<f64> = field.coords().data().iter().map(|&v| v as f64).collect();
    let pixels = angles_from_coords(&coords, field.valid().bits(), h, w);
    AngleMap::from_pixels(h, w, &pixels)
}

/// A polygon pushed through a warp field.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpedPolygon {
    pub points: Vec<[f64; 2]>,
    /// False when any vertex landed on (or next to) invalid map pixels.
    pub valid: bool,
}

/// Replaces each vertex by the field's bilinear sample there, keeping
/// vertex order.
pub fn warp_polygon(poly: &[[f64; 2]], field: &WarpField) -> Result<WarpedPolygon> {
    if poly.len() < 3 {
        return Err(Error::InvalidValue(format!("polygon needs at least 3 vertices, got {}", poly.len())));
    }
    let mut valid = true;
    let points = poly
        .iter()
        .map(|&[x, y]| match field.sample_checked(x, y) {
            Some(v) => v,
            None => {
                valid = false;
                field.sample(x, y)
            }
        })
        .collect();
    Ok(WarpedPolygon { points, valid })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CompositionStats {
    /// Largest `‖outer(inner(x)) − x‖` in pixels of the inner grid.
    pub max_px: f64,
    pub mean_px: f64,
    pub evaluated: usize,
    /// Valid inner pixels whose image fell on invalid outer taps.
    pub skipped: usize,
}

/// Measures how far `outer ∘ inner` is from the identity on the valid
/// pixels of `inner`.
pub fn composition_error(outer: &WarpField, inner: &WarpField) -> CompositionStats {
    let (h, w) = (inner.height(), inner.width());
    let mut stats = CompositionStats::default();
    let mut sum = 0.0;
    for i in 0..h {
        for j in 0..w {
            if !inner.is_valid(i, j) {
                continue;
            }
            let p = inner.value(i, j);
            match outer.sample_checked(p[0], p[1]) {
                Some(q) => {
                    let dx = (q[0] - pixel_center(j, w)) * w as f64;
                    let dy = (q[1] - pixel_center(i, h)) * h as f64;
                    let e = dx.hypot(dy);
                    stats.max_px = stats.max_px.max(e);
                    sum += e;
                    stats.evaluated += 1;
                }
                None => stats.skipped += 1,
            }
        }
    }
    if stats.evaluated > 0 {
        stats.mean_px = sum / stats.evaluated as f64;
    }
    stats
}
