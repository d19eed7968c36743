//! Per-view joint heatmaps and Re-ID feature maps.
//!
//! Both are stored pixel-major (`[y][x][channel]`) so that sampling every
//! channel at one location touches a contiguous run of memory. The on-disk
//! dump format is channel-major; see [`crate::io`].

use crate::error::{Error, Result};

/// Gaussian values below this are not written by the renderer.
const GAUSSIAN_CUTOFF: f64 = 1e-7;

/// Dense multi-channel image, stored `[y][x][c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Map2D {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Map2D {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Map2D {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Build from channel-major (`[c][y][x]`) values.
    pub fn from_chw(channels: usize, height: usize, width: usize, chw: &[f32]) -> Result<Self> {
        if chw.len() != channels * height * width {
            return Err(Error::contract(format!(
                "expected {} values for {channels}x{height}x{width}, got {}",
                channels * height * width,
                chw.len()
            )));
        }
        let mut m = Map2D::zeros(channels, height, width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    m.data[(y * width + x) * channels + c] = chw[(c * height + y) * width + x];
                }
            }
        }
        Ok(m)
    }

    pub fn to_chw(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.data.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out[(c * self.height + y) * self.width + x] = self.data[(y * self.width + x) * self.channels + c];
                }
            }
        }
        out
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f32) {
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    /// Bilinear interpolation of all channels at fractional pixel `(u, v)`
    /// (`u` along the width). Outside `[0, W-1] × [0, H-1]` the result is
    /// the zero vector.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> Vec<f32> {
        let mut out = vec![0.0; self.channels];
        self.sample_bilinear_into(u, v, &mut out);
        out
    }

    pub fn sample_bilinear_into(&self, u: f64, v: f64, out: &mut [f32]) {
        debug_assert_eq!(out.len(), self.channels);
        out.fill(0.0);
        let Some(taps) = bilinear_taps(u, v, self.width, self.height) else {
            return;
        };
        for (x, y, w) in taps {
            if w == 0.0 {
                continue;
            }
            let px = self.pixel(y, x);
            for (o, p) in out.iter_mut().zip(px) {
                *o += w * p;
            }
        }
    }

    /// Single-channel bilinear sample.
    pub fn sample_channel(&self, c: usize, u: f64, v: f64) -> f32 {
        let Some(taps) = bilinear_taps(u, v, self.width, self.height) else {
            return 0.0;
        };
        taps.iter()
            .filter(|t| t.2 != 0.0)
            .map(|&(x, y, w)| w * self.get(c, y, x))
            .sum()
    }

    /// Per-pixel maximum over channels, as a one-channel map.
    pub fn channel_max(&self) -> Map2D {
        let data = self
            .data
            .chunks_exact(self.channels.max(1))
            .map(|px| px.iter().copied().fold(0.0f32, f32::max))
            .collect();
        Map2D {
            channels: 1,
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// The four `(x, y, weight)` taps of a bilinear sample, or `None` outside
/// the sampling domain.
#[inline]
pub(crate) fn bilinear_taps(u: f64, v: f64, width: usize, height: usize) -> Option<[(usize, usize, f32); 4]> {
    if width == 0 || height == 0 {
        return None;
    }
    let (wmax, hmax) = ((width - 1) as f64, (height - 1) as f64);
    if !(u >= 0.0 && u <= wmax && v >= 0.0 && v <= hmax) {
        return None;
    }
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = (u - x0) as f32;
    let fy = (v - y0) as f32;
    let (x0, y0) = (x0 as usize, y0 as usize);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    Some([
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ])
}

/// A projected joint in heatmap pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Joint2D {
    pub u: f64,
    pub v: f64,
    pub visible: bool,
}

impl Joint2D {
    pub fn new(u: f64, v: f64) -> Self {
        Joint2D { u, v, visible: true }
    }

    pub fn hidden() -> Self {
        Joint2D {
            u: 0.0,
            v: 0.0,
            visible: false,
        }
    }
}

/// J-channel joint likelihood map of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap2D {
    map: Map2D,
}

impl Heatmap2D {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Heatmap2D {
            map: Map2D::zeros(channels, height, width),
        }
    }

    pub fn from_map(map: Map2D) -> Self {
        Heatmap2D { map }
    }

    pub fn map(&self) -> &Map2D {
        &self.map
    }

    pub fn into_map(self) -> Map2D {
        self.map
    }

    /// Max-combine a Gaussian blob for `channel` centred at `(u, v)`.
    pub fn splat_gaussian(&mut self, channel: usize, u: f64, v: f64, sigma: f64) {
        let m = &mut self.map;
        let radius = sigma * (2.0 * (1.0 / GAUSSIAN_CUTOFF).ln()).sqrt();
        let x_lo = (u - radius).ceil().max(0.0);
        let x_hi = (u + radius).floor().min(m.width as f64 - 1.0);
        let y_lo = (v - radius).ceil().max(0.0);
        let y_hi = (v + radius).floor().min(m.height as f64 - 1.0);
        if !(x_lo <= x_hi && y_lo <= y_hi) {
            return;
        }
        let inv = 1.0 / (2.0 * sigma * sigma);
        for y in y_lo as usize..=y_hi as usize {
            let dy = y as f64 - v;
            for x in x_lo as usize..=x_hi as usize {
                let dx = x as f64 - u;
                let g = (-(dx * dx + dy * dy) * inv).exp();
                if g < GAUSSIAN_CUTOFF {
                    continue;
                }
                let slot = &mut m.data[(y * m.width + x) * m.channels + channel];
                *slot = slot.max(g as f32);
            }
        }
    }

    pub fn sample_bilinear(&self, u: f64, v: f64) -> Vec<f32> {
        self.map.sample_bilinear(u, v)
    }
}

/// d-channel identity embedding map of one view. Pixels that carry an
/// embedding hold a unit vector; all other pixels are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ReidMap2D {
    map: Map2D,
}

impl ReidMap2D {
    pub fn zeros(dim: usize, height: usize, width: usize) -> Self {
        ReidMap2D {
            map: Map2D::zeros(dim, height, width),
        }
    }

    pub fn from_map(map: Map2D) -> Self {
        ReidMap2D { map }
    }

    pub fn map(&self) -> &Map2D {
        &self.map
    }

    pub fn dim(&self) -> usize {
        self.map.channels
    }

    /// Overwrite every pixel within `radius` of `(u, v)` with `embedding`.
    pub fn paint_disc(&mut self, u: f64, v: f64, radius: f64, embedding: &[f32]) {
        debug_assert_eq!(embedding.len(), self.map.channels);
        let m = &mut self.map;
        let x_lo = (u - radius).ceil().max(0.0);
        let x_hi = (u + radius).floor().min(m.width as f64 - 1.0);
        let y_lo = (v - radius).ceil().max(0.0);
        let y_hi = (v + radius).floor().min(m.height as f64 - 1.0);
        if !(x_lo <= x_hi && y_lo <= y_hi) {
            return;
        }
        for y in y_lo as usize..=y_hi as usize {
            for x in x_lo as usize..=x_hi as usize {
                let (dx, dy) = (x as f64 - u, y as f64 - v);
                if dx * dx + dy * dy <= radius * radius {
                    m.pixel_mut(y, x).copy_from_slice(embedding);
                }
            }
        }
    }

    pub fn sample_bilinear(&self, u: f64, v: f64) -> Vec<f32> {
        self.map.sample_bilinear(u, v)
    }

    /// Bilinear sample renormalized to unit length; `None` where the map is
    /// empty.
    pub fn sample_unit(&self, u: f64, v: f64) -> Option<Vec<f32>> {
        let mut f = self.sample_bilinear(u, v);
        normalize_in_place(&mut f).then_some(f)
    }
}

/// Scale `v` to unit L2 norm. Returns false (leaving `v` untouched) when the
/// norm is zero or not finite.
pub fn normalize_in_place(v: &mut [f32]) -> bool {
    let n = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return false;
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / n) as f32;
    }
    true
}

/// Render per-joint Gaussian blobs for several persons.
///
/// `persons[p][j]` is joint `j` of person `p` in heatmap pixels; invisible
/// joints contribute nothing and persons are combined with a per-pixel max.
pub fn render_gaussian_heatmap(
    persons: &[Vec<Joint2D>],
    sigma: f64,
    channels: usize,
    height: usize,
    width: usize,
) -> Heatmap2D {
    assert!(sigma > 0.0, "sigma must be positive");
    let mut hm = Heatmap2D::zeros(channels, height, width);
    for person in persons {
        for (j, joint) in person.iter().enumerate().take(channels) {
            if joint.visible && joint.u.is_finite() && joint.v.is_finite() {
                hm.splat_gaussian(j, joint.u, joint.v, sigma);
            }
        }
    }
    hm
}

pub fn sample_bilinear(map: &Map2D, u: f64, v: f64) -> Vec<f32> {
    map.sample_bilinear(u, v)
}

/// Frobenius norm of `pred - target`.
pub fn loss_2d(pred: &Heatmap2D, target: &Heatmap2D) -> Result<f64> {
    if pred.map.shape() != target.map.shape() {
        return Err(Error::contract(format!(
            "heatmap shapes differ: {:?} vs {:?}",
            pred.map.shape(),
            target.map.shape()
        )));
    }
    let ss: f64 = pred
        .map
        .data
        .iter()
        .zip(&target.map.data)
        .map(|(a, b)| {
            let d = *a as f64 - *b as f64;
            d * d
        })
        .sum();
    Ok(ss.sqrt())
}
