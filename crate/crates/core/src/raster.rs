//! Raster carriers shared by every module, bilinear sampling, and the FMAP /
//! PNM file formats.
//!
//! Coordinates are normalized: pixel `(i, j)` of an `H×W` raster sits at
//! `x = (j + 0.5) / W`, `y = (i + 0.5) / H`.
//!
//! FMAP layout (little-endian): `b"FMAP"`, `u32` version (1), `u32` height,
//! `u32` width, `u32` channels, then `height·width·channels` binary32 values,
//! row-major with channels interleaved.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result, Shape};

pub const FMAP_MAGIC: &[u8; 4] = b"FMAP";
pub const FMAP_VERSION: u32 = 1;
const FMAP_HEADER_LEN: usize = 20;

/// Sub-pixel fractions closer than this to a pixel center snap onto it, so
/// sampling at a center returns the stored value exactly.
const CENTER_SNAP: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap2D {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FloatMap2D {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidValue(format!(
                "raster dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::InvalidValue("raster dimensions overflow".into()))?;
        if data.len() != expected {
            return Err(Error::InvalidValue(format!(
                "raster data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!("non-finite raster value at index {pos}")));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds a map by evaluating `f(row, col, channel)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for i in 0..height {
            for j in 0..width {
                for c in 0..channels {
                    data.push(f(i, j, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Extracts one channel as a single-channel map.
    pub fn channel(&self, channel: usize) -> Result<FloatMap2D> {
        if channel >= self.channels {
            return Err(Error::InvalidValue(format!(
                "channel {channel} out of range for {}-channel map",
                self.channels
            )));
        }
        let data = self.data.iter().skip(channel).step_by(self.channels).copied().collect();
        FloatMap2D::new(self.height, self.width, 1, data)
    }

    /// Bilinear sample at normalized `(x, y)`; coordinates outside `[0, 1]`
    /// (or beyond the outermost pixel centers) are clamped.
    pub fn bilinear_sample(&self, x: f64, y: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.sample_into(x, y, &mut out);
        out
    }

    pub fn sample_into(&self, x: f64, y: f64, out: &mut [f64]) {
        let px = x * self.width as f64 - 0.5;
        let py = y * self.height as f64 - 0.5;
        self.sample_px_into(px, py, out);
    }

    /// Bilinear sample in continuous pixel coordinates (pixel centers at
    /// integers).
    pub fn sample_px_into(&self, px: f64, py: f64, out: &mut [f64]) {
        let (j0, j1, fx) = split_coord(px, self.width);
        let (i0, i1, fy) = split_coord(py, self.height);
        let c = self.channels;
        let w = self.width;
        let a = (i0 * w + j0) * c;
        let b = (i0 * w + j1) * c;
        let d = (i1 * w + j0) * c;
        let e = (i1 * w + j1) * c;
        for (k, o) in out.iter_mut().enumerate().take(c) {
            let top = lerp(self.data[a + k] as f64, self.data[b + k] as f64, fx);
            let bottom = lerp(self.data[d + k] as f64, self.data[e + k] as f64, fx);
            *o = lerp(top, bottom, fy);
        }
    }

    pub fn to_fmap_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(FMAP_HEADER_LEN + self.data.len() * 4);
        bytes.extend_from_slice(FMAP_MAGIC);
        for v in [FMAP_VERSION, self.height as u32, self.width as u32, self.channels as u32] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes
    }

    pub fn from_fmap_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < FMAP_HEADER_LEN {
            return Err(Error::Format(format!("FMAP header truncated ({} bytes)", bytes.len())));
        }
        if &bytes[0..4] != FMAP_MAGIC {
            return Err(Error::Format(format!("bad FMAP magic {:?}", &bytes[0..4])));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap());
        let version = word(0);
        if version != FMAP_VERSION {
            return Err(Error::Format(format!("unsupported FMAP version {version}")));
        }
        let (h, w, c) = (word(1) as u64, word(2) as u64, word(3) as u64);
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Format(format!("FMAP has zero dimension {h}x{w}x{c}")));
        }
        let count = h
            .checked_mul(w)
            .and_then(|n| n.checked_mul(c))
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= usize::MAX as u64))
            .ok_or_else(|| Error::Format(format!("FMAP dimensions overflow: {h}x{w}x{c}")))?;
        let payload = &bytes[FMAP_HEADER_LEN..];
        let needed = count * 4;
        if (payload.len() as u64) < needed {
            return Err(Error::Format(format!(
                "FMAP payload truncated: need {needed} bytes, found {}",
                payload.len()
            )));
        }
        if (payload.len() as u64) > needed {
            return Err(Error::Format(format!(
                "FMAP has {} trailing bytes",
                payload.len() as u64 - needed
            )));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|ch| f32::from_le_bytes(ch.try_into().unwrap()))
            .collect();
        FloatMap2D::new(h as usize, w as usize, c as usize, data).map_err(|e| match e {
            Error::InvalidValue(msg) => Error::Format(msg),
            other => other,
        })
    }

    pub fn write_fmap(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_fmap_bytes())
    }

    pub fn read_fmap(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_fmap_bytes(&bytes)
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + (b - a) * t
    }
}

/// Splits a continuous pixel coordinate into the two bracketing indices and
/// the interpolation fraction, clamping to the valid range.
#[inline]
fn split_coord(p: f64, n: usize) -> (usize, usize, f64) {
    let max = (n - 1) as f64;
    let p = if p.is_nan() { 0.0 } else { p.clamp(0.0, max) };
    let mut i0 = p.floor();
    let mut f = p - i0;
    if f < CENTER_SNAP {
        f = 0.0;
    } else if f > 1.0 - CENTER_SNAP {
        i0 += 1.0;
        f = 0.0;
    }
    let i0 = (i0 as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, f)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Normalized coordinate of a pixel center along an axis of length `n`.
#[inline]
pub fn pixel_center(index: usize, n: usize) -> f64 {
    (index as f64 + 0.5) / n as f64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidValue("mask dimensions must be positive".into()));
        }
        if bits.len() != height * width {
            return Err(Error::InvalidValue(format!(
                "mask length {} does not match {height}x{width}",
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.height, self.width, 1)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn to_float_map(&self) -> FloatMap2D {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        FloatMap2D::new(self.height, self.width, 1, data).expect("mask dims already validated")
    }

    /// Accepts single-channel maps holding exactly 0.0 or 1.0.
    pub fn from_float_map(map: &FloatMap2D) -> Result<Self> {
        if map.channels() != 1 {
            return Err(Error::shape(
                Shape::new(map.height(), map.width(), 1),
                map.shape(),
            ));
        }
        let mut bits = Vec::with_capacity(map.data().len());
        for (k, &v) in map.data().iter().enumerate() {
            match v {
                v if v == 0.0 => bits.push(false),
                v if v == 1.0 => bits.push(true),
                _ => return Err(Error::InvalidValue(format!("mask value {v} at index {k} is not 0/1"))),
            }
        }
        Self::new(map.height(), map.width(), bits)
    }

    pub fn write_fmap(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_float_map().write_fmap(path)
    }

    pub fn read_fmap(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_float_map(&FloatMap2D::read_fmap(path)?)
    }
}

/// 8-bit image with one (gray) or three (RGB) channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidValue("image dimensions must be positive".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidValue(format!("image channels must be 1 or 3, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidValue(format!(
                "image data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[u8] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn to_float_map(&self) -> FloatMap2D {
        let data = self.data.iter().map(|&v| v as f32).collect();
        FloatMap2D::new(self.height, self.width, self.channels, data).expect("image dims already validated")
    }

    /// Rounds and clamps a 1- or 3-channel float map into 8-bit samples.
    pub fn from_float_map(map: &FloatMap2D) -> Result<Self> {
        let data = map.data().iter().map(|&v| quantize(v as f64)).collect();
        Image::new(map.height(), map.width(), map.channels(), data)
    }

    /// Luma (BT.601 weights) for color images, identity for gray.
    pub fn to_gray(&self) -> Vec<f64> {
        match self.channels {
            1 => self.data.iter().map(|&v| v as f64).collect(),
            _ => self
                .data
                .chunks_exact(3)
                .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
                .collect(),
        }
    }

    /// Binary PGM (P5) for gray images, PPM (P6) for color, maxval 255.
    pub fn to_pnm_bytes(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_pnm_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut tokens = Vec::with_capacity(4);
        while tokens.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("PNM header truncated".into()));
            }
            tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("PNM header is not ASCII".into()))?);
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let channels = match tokens[0] {
            "P5" => 1,
            "P6" => 3,
            other => return Err(Error::Format(format!("unsupported PNM magic {other:?}"))),
        };
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PNM header field {s:?}")));
        let width = parse(tokens[1])?;
        let height = parse(tokens[2])?;
        let maxval = parse(tokens[3])?;
        if maxval != 255 {
            return Err(Error::Format(format!("PNM maxval must be 255, got {maxval}")));
        }
        let need = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::Format("PNM dimensions overflow".into()))?;
        if pos > bytes.len() || bytes.len() - pos < need {
            return Err(Error::Format("PNM raster truncated".into()));
        }
        Image::new(height, width, channels, bytes[pos..pos + need].to_vec()).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write_pnm(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_pnm_bytes())
    }

    pub fn read_pnm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pnm_bytes(&bytes)
    }
}

#[inline]
pub(crate) fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_pixel_fmap_bytes_are_exact() {
        let m = FloatMap2D::new(1, 1, 1, vec![1.0]).unwrap();
        let expected: Vec<u8> = vec![
            0x46, 0x4D, 0x41, 0x50, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0x00, 0x00, 0x80, 0x3F,
        ];
        assert_eq!(m.to_fmap_bytes(), expected);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = FloatMap2D::filled(2, 2, 1, 0.5).unwrap().to_fmap_bytes();
        bytes[0..4].copy_from_slice(b"XMAP");
        assert!(matches!(FloatMap2D::from_fmap_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let bytes = FloatMap2D::filled(2, 2, 3, 0.5).unwrap().to_fmap_bytes();
        let cut = &bytes[..bytes.len() - 1];
        assert!(matches!(FloatMap2D::from_fmap_bytes(cut), Err(Error::Format(_))));
        assert!(matches!(FloatMap2D::from_fmap_bytes(&bytes[..10]), Err(Error::Format(_))));
    }

    #[test]
    fn overflowing_dimensions_are_format_error() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"FMAP");
        for v in [1u32, u32::MAX, u32::MAX, u32::MAX] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(FloatMap2D::from_fmap_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn nan_rejected_on_construction() {
        assert!(FloatMap2D::new(1, 2, 1, vec![0.0, f32::NAN]).is_err());
        assert!(FloatMap2D::new(1, 1, 1, vec![f32::INFINITY]).is_err());
        assert!(FloatMap2D::new(0, 1, 1, vec![]).is_err());
    }

    #[test]
    fn constant_map_samples_constant() {
        let m = FloatMap2D::filled(5, 7, 2, 7.0).unwrap();
        for &(x, y) in &[(0.0, 0.0), (0.33, 0.71), (1.0, 1.0), (0.5, 0.02)] {
            assert_eq!(m.bilinear_sample(x, y), vec![7.0, 7.0]);
        }
    }

    #[test]
    fn linear_ramp_reproduced() {
        let w = 16;
        let m = FloatMap2D::from_fn(4, w, 1, |_, j, _| pixel_center(j, w) as f32).unwrap();
        let v = m.bilinear_sample(0.25, 0.5)[0];
        assert!((v - 0.25).abs() < 1e-6, "{v}");
    }

    #[test]
    fn pixel_centers_exact() {
        let m = FloatMap2D::from_fn(6, 9, 3, |i, j, c| (i * 100 + j * 10 + c) as f32 * 0.37).unwrap();
        for i in 0..6 {
            for j in 0..9 {
                let s = m.bilinear_sample(pixel_center(j, 9), pixel_center(i, 6));
                for c in 0..3 {
                    assert_eq!(s[c], m.get(i, j, c) as f64);
                }
            }
        }
    }

    #[test]
    fn sampling_clamps_outside_range() {
        let m = FloatMap2D::from_fn(8, 8, 1, |i, j, _| (i * 8 + j) as f32).unwrap();
        assert_eq!(m.bilinear_sample(-0.3, 0.4), m.bilinear_sample(0.0, 0.4));
        assert_eq!(m.bilinear_sample(1.7, 0.4), m.bilinear_sample(1.0, 0.4));
        assert_eq!(m.bilinear_sample(0.5, 2.0), m.bilinear_sample(0.5, 1.0));
    }

    #[test]
    fn mask_rejects_non_binary_values() {
        let m = FloatMap2D::new(1, 2, 1, vec![0.0, 0.5]).unwrap();
        assert!(BinaryMask::from_float_map(&m).is_err());
        let ok = FloatMap2D::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(BinaryMask::from_float_map(&ok).unwrap().count(), 1);
    }

    #[test]
    fn pnm_round_trip_with_comment() {
        let img = Image::new(2, 3, 3, (0..18).map(|v| v as u8 * 13).collect()).unwrap();
        assert_eq!(Image::from_pnm_bytes(&img.to_pnm_bytes()).unwrap(), img);
        let mut with_comment = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        with_comment.extend_from_slice(&[10, 250]);
        let g = Image::from_pnm_bytes(&with_comment).unwrap();
        assert_eq!((g.height(), g.width(), g.channels()), (1, 2, 1));
        assert_eq!(g.data(), &[10, 250]);
    }

    #[test]
    fn pnm_rejects_other_maxval() {
        assert!(Image::from_pnm_bytes(b"P5\n1 1\n65535\n\0\0").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn fmap_round_trip_bit_identical(
            h in 1usize..6, w in 1usize..6, c in 1usize..4,
            seed in any::<u64>(),
        ) {
            let mut rng = crate::rng::DetRng::new(seed, 0);
            let data: Vec<f32> = (0..h * w * c)
                .map(|_| {
                    let bits = rng.next_u64() as u32;
                    let v = f32::from_bits(bits);
                    if v.is_finite() { v } else { 0.5 }
                })
                .collect();
            let m = FloatMap2D::new(h, w, c, data).unwrap();
            let back = FloatMap2D::from_fmap_bytes(&m.to_fmap_bytes()).unwrap();
            prop_assert_eq!(back.shape(), m.shape());
            let same = back.data().iter().zip(m.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }

        #[test]
        fn affine_maps_sampled_exactly(
            a in -3.0f64..3.0, b in -3.0f64..3.0, c0 in -1.0f64..1.0,
            x in 0.0f64..1.0, y in 0.0f64..1.0,
        ) {
            let (h, w) = (9, 13);
            let m = FloatMap2D::from_fn(h, w, 1, |i, j, _| {
                (a * pixel_center(j, w) + b * pixel_center(i, h) + c0) as f32
            }).unwrap();
            // interior of the center lattice; outside it clamping applies
            let xc = x.clamp(pixel_center(0, w), pixel_center(w - 1, w));
            let yc = y.clamp(pixel_center(0, h), pixel_center(h - 1, h));
            let v = m.bilinear_sample(xc, yc)[0];
            prop_assert!((v - (a * xc + b * yc + c0)).abs() < 1e-6);
        }
    }
}
