//! Polar conversion of auxiliary angle channels and the per-pixel angle
//! loss with confidence weighting and text masking.

use std::f64::consts::{PI, TAU};

use crate::error::{Error, Result, Shape};
use crate::raster::{BinaryMask, FloatMap2D};
use crate::warpfield::{canonical_angle, AngleMap, PixelAngles};

/// Converts `(φxx, φxy, φyx, φyy)` channels into angles and magnitudes.
/// For each axis the second stored channel is the sine-like argument.
pub fn polar_from_channels(phi: &FloatMap2D) -> Result<AngleMap> {
    if phi.channels() != 4 {
        return Err(Error::shape(Shape::new(phi.height(), phi.width(), 4), phi.shape()));
    }
    let pixels: Vec<PixelAngles> = phi
        .data()
        .chunks_exact(4)
        .map(|p| {
            let (tx, rx) = polar(p[0] as f64, p[1] as f64);
            let (ty, ry) = polar(p[2] as f64, p[3] as f64);
            PixelAngles { theta_x: tx, theta_y: ty, rho_x: rx, rho_y: ry, valid: true }
        })
        .collect();
    AngleMap::from_pixels(phi.height(), phi.width(), &pixels)
}

/// `(θ, ρ)` of a cosine-like/sine-like pair; `ρ = 0` gives `θ = 0`.
pub fn polar(c: f64, s: f64) -> (f64, f64) {
    let rho = c.hypot(s);
    if rho == 0.0 {
        (0.0, 0.0)
    } else {
        (canonical_angle(s.atan2(c)), rho)
    }
}

/// Smallest angle between two directions, in `[0, π]`.
pub fn angular_distance(theta: f64, theta_hat: f64) -> f64 {
    let r = (theta - theta_hat).abs().rem_euclid(TAU);
    PI - (r - PI).abs()
}

/// Derivative of [`angular_distance`] with respect to its first argument.
/// Undefined where the distance is 0 or π; returns 0 there.
pub fn angular_distance_grad(theta: f64, theta_hat: f64) -> f64 {
    let d = wrap_pi(theta - theta_hat);
    if d == 0.0 || d.abs() == PI {
        0.0
    } else {
        d.signum()
    }
}

/// Wraps into `[-π, π]`.
pub(crate) fn wrap_pi(x: f64) -> f64 {
    (x + PI).rem_euclid(TAU) - PI
}

/// Where the per-pixel confidence weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Confidence {
    /// Magnitudes `ρx, ρy` of the predicted map.
    #[default]
    Predicted,
    /// Every weight fixed to 1.
    Unit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AngleLossResult {
    pub scalar: f64,
    /// Per-pixel `Σ ρ̂ᵢ·d(θᵢ, θ̂ᵢ)`; zero outside the mask or where either
    /// map is invalid.
    pub per_pixel: FloatMap2D,
    /// Number of pixels the scalar averages over.
    pub count: usize,
}

/// Angle loss between a reference map `θ` and a predicted map `θ̂`.
///
/// The scalar is the mean per-pixel contribution over pixels that are in
/// `mask` (all pixels if absent) and valid in both maps; it is 0 when that
/// set is empty.
pub fn angle_loss(
    theta: &AngleMap,
    theta_hat: &AngleMap,
    mask: Option<&BinaryMask>,
    confidence: Confidence,
) -> Result<AngleLossResult> {
    let (h, w) = (theta.height(), theta.width());
    if theta_hat.height() != h || theta_hat.width() != w {
        return Err(Error::shape(theta.values().shape(), theta_hat.values().shape()));
    }
    if let Some(m) = mask {
        if m.height() != h || m.width() != w {
            return Err(Error::shape(Shape::new(h, w, 1), m.shape()));
        }
    }
    let mut per_pixel = Vec::with_capacity(h * w);
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..h {
        for j in 0..w {
            let used = mask.map_or(true, |m| m.get(i, j)) && theta.valid().get(i, j) && theta_hat.valid().get(i, j);
            if !used {
                per_pixel.push(0.0f32);
                continue;
            }
            let (rx, ry) = match confidence {
                Confidence::Predicted => (theta_hat.rho_x(i, j), theta_hat.rho_y(i, j)),
                Confidence::Unit => (1.0, 1.0),
            };
            let v = rx * angular_distance(theta.theta_x(i, j), theta_hat.theta_x(i, j))
                + ry * angular_distance(theta.theta_y(i, j), theta_hat.theta_y(i, j));
            sum += v;
            count += 1;
            per_pixel.push(v as f32);
        }
    }
    let scalar = if count == 0 { 0.0 } else { sum / count as f64 };
    Ok(AngleLossResult { scalar, per_pixel: FloatMap2D::new(h, w, 1, per_pixel)?, count })
}

/// Dense double-precision form of the loss on interleaved `(x, y)` angle
/// and weight buffers; `used` selects the averaged pixels.
pub fn angle_loss_dense(theta: &[f64], theta_hat: &[f64], rho_hat: &[f64], used: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (k, &u) in used.iter().enumerate() {
        if !u {
            continue;
        }
        for a in 0..2 {
            sum += rho_hat[2 * k + a] * angular_distance(theta[2 * k + a], theta_hat[2 * k + a]);
        }
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}
