//! Fused 3D feature volumes, sparsification, 3D convolution and the 3D
//! joint heatmap targets.
//!
//! Dense volumes are stored voxel-major (`[x][y][z][c]`). Sparse volumes keep
//! sorted linear voxel keys `(x·Y + y)·Z + z` with one channel vector per key
//! and a hash index for neighbour lookups.

use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::geometry::{Pose3D, ProjectionTable, VoxelGrid};
use crate::heatmap2d::{bilinear_taps, Heatmap2D, Map2D};

/// Default sparsification threshold.
pub const SPARSIFY_THRESHOLD: f32 = 0.15;

/// Read access shared by dense and sparse volumes.
pub trait VolumeView {
    fn grid(&self) -> &VoxelGrid;
    fn channels(&self) -> usize;
    /// Channel vector at `index`; `None` where a sparse volume stores nothing.
    fn voxel(&self, index: [usize; 3]) -> Option<&[f32]>;

    fn value(&self, channel: usize, index: [usize; 3]) -> f32 {
        self.voxel(index).map_or(0.0, |v| v[channel])
    }

    fn to_dense(&self) -> DenseVolume;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseVolume {
    grid: VoxelGrid,
    channels: usize,
    data: Vec<f32>,
}

/// Fused per-voxel joint likelihoods.
pub type FeatureVolume = DenseVolume;

impl DenseVolume {
    pub fn zeros(grid: &VoxelGrid, channels: usize) -> Self {
        DenseVolume {
            grid: grid.clone(),
            channels,
            data: vec![0.0; grid.num_voxels() * channels],
        }
    }

    /// Wrap voxel-major values.
    pub fn from_values(grid: &VoxelGrid, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != grid.num_voxels() * channels {
            return Err(Error::contract(format!(
                "expected {} values, got {}",
                grid.num_voxels() * channels,
                data.len()
            )));
        }
        Ok(DenseVolume {
            grid: grid.clone(),
            channels,
            data,
        })
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, channel: usize, index: [usize; 3]) -> f32 {
        self.data[self.grid.linear_index(index) * self.channels + channel]
    }

    pub fn set(&mut self, channel: usize, index: [usize; 3], value: f32) {
        let i = self.grid.linear_index(index) * self.channels + channel;
        self.data[i] = value;
    }

    pub fn voxel_at(&self, linear: usize) -> &[f32] {
        &self.data[linear * self.channels..(linear + 1) * self.channels]
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(0.0, f32::max)
    }

    /// Voxel index and value of the maximum of `channel` (first in scan
    /// order on ties).
    pub fn argmax(&self, channel: usize) -> ([usize; 3], f32) {
        let mut best = (0usize, f32::NEG_INFINITY);
        for lin in 0..self.grid.num_voxels() {
            let v = self.data[lin * self.channels + channel];
            if v > best.1 {
                best = (lin, v);
            }
        }
        (self.grid.unravel(best.0), best.1)
    }
}

impl VolumeView for DenseVolume {
    fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn voxel(&self, index: [usize; 3]) -> Option<&[f32]> {
        Some(self.voxel_at(self.grid.linear_index(index)))
    }

    fn to_dense(&self) -> DenseVolume {
        self.clone()
    }
}

/// Sorted-COO sparse volume.
#[derive(Debug, Clone)]
pub struct SparseVolume {
    grid: VoxelGrid,
    channels: usize,
    keys: Vec<usize>,
    values: Vec<f32>,
    index: FxHashMap<usize, u32>,
}

/// Per-voxel 3D joint likelihoods (output of [`smooth_volume`]).
pub type JointHeatmap3D = SparseVolume;

impl PartialEq for SparseVolume {
    fn eq(&self, other: &Self) -> bool {
        self.grid == other.grid
            && self.channels == other.channels
            && self.keys == other.keys
            && self.values == other.values
    }
}

impl SparseVolume {
    pub fn empty(grid: &VoxelGrid, channels: usize) -> Self {
        SparseVolume {
            grid: grid.clone(),
            channels,
            keys: Vec::new(),
            values: Vec::new(),
            index: FxHashMap::default(),
        }
    }

    /// Build from strictly increasing keys and their channel vectors.
    pub fn from_sorted(grid: &VoxelGrid, channels: usize, keys: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        if values.len() != keys.len() * channels {
            return Err(Error::contract("sparse values do not match key count"));
        }
        if keys.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract("sparse keys must be strictly increasing"));
        }
        if keys.last().is_some_and(|&k| k >= grid.num_voxels()) {
            return Err(Error::contract("sparse key outside grid"));
        }
        let index = keys.iter().enumerate().map(|(i, &k)| (k, i as u32)).collect();
        Ok(SparseVolume {
            grid: grid.clone(),
            channels,
            keys,
            values,
            index,
        })
    }

    pub fn nnz(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn occupancy(&self) -> f64 {
        self.keys.len() as f64 / self.grid.num_voxels() as f64
    }

    pub fn keys(&self) -> &[usize] {
        &self.keys
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn coords(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        self.keys.iter().map(|&k| self.grid.unravel(k))
    }

    /// Channel vector of the `i`-th stored voxel.
    pub fn entry(&self, i: usize) -> &[f32] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }

    pub fn lookup(&self, key: usize) -> Option<&[f32]> {
        self.index.get(&key).map(|&i| self.entry(i as usize))
    }

    /// Stored voxels whose keys fall in `lo..=hi`.
    pub fn key_range(&self, lo: usize, hi: usize) -> std::ops::Range<usize> {
        let a = self.keys.partition_point(|&k| k < lo);
        let b = self.keys.partition_point(|&k| k <= hi);
        a..b
    }

    pub fn max_value(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }
}

impl VolumeView for SparseVolume {
    fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn voxel(&self, index: [usize; 3]) -> Option<&[f32]> {
        if !self.grid.contains_index(index) {
            return None;
        }
        self.lookup(self.grid.linear_index(index))
    }

    fn to_dense(&self) -> DenseVolume {
        let mut d = DenseVolume::zeros(&self.grid, self.channels);
        let c = self.channels;
        for (i, &k) in self.keys.iter().enumerate() {
            d.data[k * c..(k + 1) * c].copy_from_slice(self.entry(i));
        }
        d
    }
}

fn check_views(heatmaps: &[Heatmap2D], table: &ProjectionTable) -> Result<usize> {
    if heatmaps.is_empty() {
        return Err(Error::contract("feature volume needs at least one view"));
    }
    if heatmaps.len() != table.num_views() {
        return Err(Error::contract(format!(
            "{} heatmaps for a {}-view projection table",
            heatmaps.len(),
            table.num_views()
        )));
    }
    let channels = heatmaps[0].map().channels();
    for (v, hm) in heatmaps.iter().enumerate() {
        let (w, h) = table.heatmap_size(v);
        if hm.map().channels() != channels || hm.map().width() != w || hm.map().height() != h {
            return Err(Error::contract(format!(
                "view {v}: heatmap shape {:?} does not match table ({channels}, {h}, {w})",
                hm.map().shape()
            )));
        }
    }
    Ok(channels)
}

/// Accumulate the bilinear sample of every channel into `acc`, tap by tap.
#[inline]
fn add_sample(map: &Map2D, u: f32, v: f32, acc: &mut [f32]) {
    if let Some(taps) = bilinear_taps(u as f64, v as f64, map.width(), map.height()) {
        for (x, y, w) in taps {
            if w != 0.0 {
                for (a, p) in acc.iter_mut().zip(map.pixel(y, x)) {
                    *a += w * p;
                }
            }
        }
    }
}

/// Single-channel version of [`add_sample`] with the same operation order.
#[inline]
fn add_sample_one(map: &Map2D, u: f32, v: f32, acc: &mut f32) {
    if let Some(taps) = bilinear_taps(u as f64, v as f64, map.width(), map.height()) {
        for (x, y, w) in taps {
            if w != 0.0 {
                *acc += w * map.get(0, y, x);
            }
        }
    }
}

/// Average the views' heatmap samples at every voxel's projections. Views
/// in which a voxel is invisible contribute zero; the divisor is always the
/// number of views.
pub fn build_feature_volume(heatmaps: &[Heatmap2D], table: &ProjectionTable) -> Result<FeatureVolume> {
    let channels = check_views(heatmaps, table)?;
    let grid = &table.grid;
    let inv = 1.0 / heatmaps.len() as f32;
    let plane = grid.bins[1] * grid.bins[2];
    let mut vol = DenseVolume::zeros(grid, channels);
    crate::par::for_each_chunk_mut(&mut vol.data, plane * channels, |x, slab| {
        for (k, acc) in slab.chunks_exact_mut(channels).enumerate() {
            let lin = x * plane + k;
            for (v, hm) in heatmaps.iter().enumerate() {
                if let Some((u, vv)) = table.uv(v, lin) {
                    add_sample(hm.map(), u, vv, acc);
                }
            }
            for a in acc.iter_mut() {
                *a *= inv;
            }
        }
    });
    Ok(vol)
}

/// Equivalent to `sparsify(&build_feature_volume(..)?, threshold)` without
/// materializing the dense volume.
///
/// Each voxel is first screened with the view-average of the per-pixel
/// channel maximum. It is accumulated in the same order as the channel
/// values and so bounds every one of them from above, even after rounding.
pub fn build_sparse_feature_volume(
    heatmaps: &[Heatmap2D],
    table: &ProjectionTable,
    threshold: f32,
) -> Result<SparseVolume> {
    let channels = check_views(heatmaps, table)?;
    let grid = &table.grid;
    let inv = 1.0 / heatmaps.len() as f32;
    let maxmaps: Vec<Map2D> = heatmaps.iter().map(|h| h.map().channel_max()).collect();
    let plane = grid.bins[1] * grid.bins[2];
    let xs: Vec<usize> = (0..grid.bins[0]).collect();
    let slabs = crate::par::map_collect(&xs, |&x| {
        let mut keys = Vec::new();
        let mut vals = Vec::new();
        let mut acc = vec![0.0f32; channels];
        for k in 0..plane {
            let lin = x * plane + k;
            let mut bound = 0.0f32;
            for (v, mm) in maxmaps.iter().enumerate() {
                if let Some((u, vv)) = table.uv(v, lin) {
                    add_sample_one(mm, u, vv, &mut bound);
                }
            }
            if bound * inv < threshold || bound == 0.0 {
                continue;
            }
            acc.fill(0.0);
            for (v, hm) in heatmaps.iter().enumerate() {
                if let Some((u, vv)) = table.uv(v, lin) {
                    add_sample(hm.map(), u, vv, &mut acc);
                }
            }
            let mut keep = false;
            for a in acc.iter_mut() {
                *a *= inv;
                keep |= *a >= threshold && *a > 0.0;
            }
            if keep {
                keys.push(lin);
                vals.extend_from_slice(&acc);
            }
        }
        (keys, vals)
    });
    let mut keys = Vec::new();
    let mut values = Vec::new();
    for (k, v) in slabs {
        keys.extend(k);
        values.extend(v);
    }
    SparseVolume::from_sorted(grid, channels, keys, values)
}

/// Keep voxels whose largest channel is `>= threshold`. A voxel that is
/// zero in every channel is never stored, so threshold 0 keeps exactly the
/// nonzero voxels.
pub fn sparsify(volume: &DenseVolume, threshold: f32) -> SparseVolume {
    let c = volume.channels;
    let mut keys = Vec::new();
    let mut values = Vec::new();
    for (lin, vox) in volume.data.chunks_exact(c.max(1)).enumerate() {
        let m = vox.iter().copied().fold(0.0f32, f32::max);
        let nonzero = vox.iter().any(|&v| v != 0.0);
        if nonzero && m >= threshold {
            keys.push(lin);
            values.extend_from_slice(vox);
        }
    }
    SparseVolume::from_sorted(&volume.grid, c, keys, values).expect("keys generated in order")
}

/// 3D convolution kernel, weights indexed `[c_out][c_in][kx][ky][kz]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel3D {
    pub c_out: usize,
    pub c_in: usize,
    pub size: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Kernel3D {
    pub fn new(c_out: usize, c_in: usize, size: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        let k = Kernel3D {
            c_out,
            c_in,
            size,
            weights,
            bias,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.is_multiple_of(2) {
            return Err(Error::contract(format!("kernel size {} is not odd", self.size)));
        }
        if self.weights.len() != self.c_out * self.c_in * self.size.pow(3) {
            return Err(Error::contract("kernel weight count does not match its shape"));
        }
        if self.bias.len() != self.c_out {
            return Err(Error::contract("bias length must equal c_out"));
        }
        Ok(())
    }

    pub fn weight(&self, co: usize, ci: usize, k: [usize; 3]) -> f32 {
        let s = self.size;
        self.weights[(((co * self.c_in + ci) * s + k[0]) * s + k[1]) * s + k[2]]
    }

    /// Weights re-laid as `[offset][c_in][c_out]` for the inner loops.
    fn packed(&self) -> Vec<f32> {
        let s = self.size;
        let mut out = Vec::with_capacity(self.weights.len());
        for kx in 0..s {
            for ky in 0..s {
                for kz in 0..s {
                    for ci in 0..self.c_in {
                        for co in 0..self.c_out {
                            out.push(self.weight(co, ci, [kx, ky, kz]));
                        }
                    }
                }
            }
        }
        out
    }
}

#[inline]
fn mac(acc: &mut [f32], input: &[f32], w: &[f32], c_out: usize) {
    for (ci, &x) in input.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let row = &w[ci * c_out..(ci + 1) * c_out];
        for (a, &wv) in acc.iter_mut().zip(row) {
            *a += wv * x;
        }
    }
}

fn check_conv(channels: usize, kernel: &Kernel3D) -> Result<()> {
    kernel.validate()?;
    if channels != kernel.c_in {
        return Err(Error::contract(format!(
            "volume has {channels} channels, kernel expects {}",
            kernel.c_in
        )));
    }
    Ok(())
}

/// Zero-padded same-size cross-correlation.
///
/// Each output element starts from the bias and accumulates over kernel
/// offsets in `(kx, ky, kz)` order, input channels innermost. Zero inputs
/// are skipped, which leaves the sum unchanged, so the result is
/// bit-identical to [`conv3d_sparse`] on its support.
pub fn conv3d_dense(volume: &DenseVolume, kernel: &Kernel3D) -> Result<DenseVolume> {
    check_conv(volume.channels, kernel)?;
    let grid = &volume.grid;
    let [bx, by, bz] = grid.bins;
    let (c_in, c_out, s) = (kernel.c_in, kernel.c_out, kernel.size);
    let half = (s / 2) as isize;
    let packed = kernel.packed();
    let per_off = c_in * c_out;
    let mut out = DenseVolume::zeros(grid, c_out);
    crate::par::for_each_chunk_mut(&mut out.data, by * bz * c_out, |x, slab| {
        for y in 0..by {
            for z in 0..bz {
                let acc = &mut slab[(y * bz + z) * c_out..(y * bz + z + 1) * c_out];
                acc.copy_from_slice(&kernel.bias);
                for kx in 0..s {
                    let ix = x as isize + kx as isize - half;
                    if ix < 0 || ix >= bx as isize {
                        continue;
                    }
                    for ky in 0..s {
                        let iy = y as isize + ky as isize - half;
                        if iy < 0 || iy >= by as isize {
                            continue;
                        }
                        for kz in 0..s {
                            let iz = z as isize + kz as isize - half;
                            if iz < 0 || iz >= bz as isize {
                                continue;
                            }
                            let lin = (ix as usize * by + iy as usize) * bz + iz as usize;
                            let o = (kx * s + ky) * s + kz;
                            mac(
                                acc,
                                &volume.data[lin * c_in..(lin + 1) * c_in],
                                &packed[o * per_off..(o + 1) * per_off],
                                c_out,
                            );
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Sorted, deduplicated dilation of `keys` by the offsets `-r..=r` on each
/// axis in `axes`.
fn dilate(grid: &VoxelGrid, keys: &[usize], r: usize, axes: [bool; 3]) -> Vec<usize> {
    let r = r as isize;
    let rng = |on: bool| if on { -r..=r } else { 0..=0 };
    let mut out = Vec::with_capacity(keys.len() * 4);
    for &k in keys {
        let [x, y, z] = grid.unravel(k);
        for dx in rng(axes[0]) {
            let nx = x as isize + dx;
            if nx < 0 || nx >= grid.bins[0] as isize {
                continue;
            }
            for dy in rng(axes[1]) {
                let ny = y as isize + dy;
                if ny < 0 || ny >= grid.bins[1] as isize {
                    continue;
                }
                for dz in rng(axes[2]) {
                    let nz = z as isize + dz;
                    if nz < 0 || nz >= grid.bins[2] as isize {
                        continue;
                    }
                    out.push(grid.linear_index([nx as usize, ny as usize, nz as usize]));
                }
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Sparse 3D convolution. The output support is the input support dilated
/// by the kernel footprint; values there equal [`conv3d_dense`].
pub fn conv3d_sparse(sparse: &SparseVolume, kernel: &Kernel3D) -> Result<SparseVolume> {
    check_conv(sparse.channels, kernel)?;
    let grid = &sparse.grid;
    let (c_in, c_out, s) = (kernel.c_in, kernel.c_out, kernel.size);
    let half = (s / 2) as isize;
    let out_keys = dilate(grid, &sparse.keys, s / 2, [true; 3]);
    let packed = kernel.packed();
    let per_off = c_in * c_out;
    let mut values = vec![0.0f32; out_keys.len() * c_out];
    let chunk = 256;
    crate::par::for_each_chunk_mut(&mut values, chunk * c_out, |ci, block| {
        for (j, acc) in block.chunks_exact_mut(c_out).enumerate() {
            let [x, y, z] = grid.unravel(out_keys[ci * chunk + j]);
            acc.copy_from_slice(&kernel.bias);
            for kx in 0..s {
                let ix = x as isize + kx as isize - half;
                if ix < 0 || ix >= grid.bins[0] as isize {
                    continue;
                }
                for ky in 0..s {
                    let iy = y as isize + ky as isize - half;
                    if iy < 0 || iy >= grid.bins[1] as isize {
                        continue;
                    }
                    for kz in 0..s {
                        let iz = z as isize + kz as isize - half;
                        if iz < 0 || iz >= grid.bins[2] as isize {
                            continue;
                        }
                        let lin = grid.linear_index([ix as usize, iy as usize, iz as usize]);
                        if let Some(input) = sparse.lookup(lin) {
                            let o = (kx * s + ky) * s + kz;
                            mac(acc, input, &packed[o * per_off..(o + 1) * per_off], c_out);
                        }
                    }
                }
            }
        }
    });
    SparseVolume::from_sorted(grid, c_out, out_keys, values)
}

/// Parameters of the fixed smoothing that replaces the learned 3D network.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothParams {
    /// Kernel edge length in voxels (odd).
    pub kernel_size: usize,
    /// Gaussian σ in voxels.
    pub sigma_voxels: f64,
}

impl Default for SmoothParams {
    fn default() -> Self {
        SmoothParams {
            kernel_size: 5,
            sigma_voxels: 1.0,
        }
    }
}

impl SmoothParams {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::config("smooth.kernel_size", "must be odd"));
        }
        if !(self.sigma_voxels > 0.0 && self.sigma_voxels.is_finite()) {
            return Err(Error::config("smooth.sigma_voxels", "must be > 0"));
        }
        Ok(())
    }

    /// Sum-normalized 1D Gaussian taps.
    pub fn taps(&self) -> Vec<f32> {
        let r = (self.kernel_size / 2) as isize;
        let w: Vec<f64> = (-r..=r)
            .map(|t| (-(t * t) as f64 / (2.0 * self.sigma_voxels * self.sigma_voxels)).exp())
            .collect();
        let sum: f64 = w.iter().sum();
        w.iter().map(|v| (v / sum) as f32).collect()
    }

    /// Equivalent depthwise kernel (outer product of the taps) for
    /// [`conv3d_dense`].
    pub fn depthwise_kernel(&self, channels: usize) -> Kernel3D {
        let t = self.taps();
        let s = t.len();
        let mut weights = vec![0.0f32; channels * channels * s * s * s];
        for c in 0..channels {
            for kx in 0..s {
                for ky in 0..s {
                    for kz in 0..s {
                        weights[(((c * channels + c) * s + kx) * s + ky) * s + kz] = t[kx] * t[ky] * t[kz];
                    }
                }
            }
        }
        Kernel3D {
            c_out: channels,
            c_in: channels,
            size: s,
            weights,
            bias: vec![0.0; channels],
        }
    }
}

/// One separable pass along `axis`.
fn smooth_axis(input: &SparseVolume, taps: &[f32], axis: usize) -> SparseVolume {
    let grid = &input.grid;
    let c = input.channels;
    let r = taps.len() / 2;
    let mut axes = [false; 3];
    axes[axis] = true;
    let keys = dilate(grid, &input.keys, r, axes);
    let stride = match axis {
        0 => grid.bins[1] * grid.bins[2],
        1 => grid.bins[2],
        _ => 1,
    };
    let extent = grid.bins[axis] as isize;
    let mut values = vec![0.0f32; keys.len() * c];
    let chunk = 1024;
    crate::par::for_each_chunk_mut(&mut values, chunk * c, |bi, block| {
        for (j, acc) in block.chunks_exact_mut(c).enumerate() {
            let key = keys[bi * chunk + j];
            let pos = grid.unravel(key)[axis] as isize;
            for (t, &w) in taps.iter().enumerate() {
                let d = t as isize - r as isize;
                let p = pos + d;
                if p < 0 || p >= extent {
                    continue;
                }
                let nk = (key as isize + d * stride as isize) as usize;
                if let Some(src) = input.lookup(nk) {
                    for (a, &v) in acc.iter_mut().zip(src) {
                        *a += w * v;
                    }
                }
            }
        }
    });
    SparseVolume::from_sorted(grid, c, keys, values).expect("dilated keys are sorted")
}

/// Separable Gaussian smoothing per channel (z, then y, then x), clamped to
/// `[0, 1]`. Voxels that end up zero in every channel are dropped.
pub fn smooth_volume(sparse: &SparseVolume, params: &SmoothParams) -> JointHeatmap3D {
    let taps = params.taps();
    let mut v = smooth_axis(sparse, &taps, 2);
    v = smooth_axis(&v, &taps, 1);
    v = smooth_axis(&v, &taps, 0);
    let c = v.channels;
    let mut keys = Vec::with_capacity(v.keys.len());
    let mut values = Vec::with_capacity(v.values.len());
    for (i, &k) in v.keys.iter().enumerate() {
        let e = &v.values[i * c..(i + 1) * c];
        if e.iter().any(|&x| x > 0.0) {
            keys.push(k);
            values.extend(e.iter().map(|x| x.clamp(0.0, 1.0)));
        }
    }
    SparseVolume::from_sorted(&v.grid, c, keys, values).expect("subset of sorted keys")
}

/// Ground-truth 3D joint heatmaps: per joint, the maximum over persons of a
/// Gaussian of the distance between the voxel centre and the joint.
/// Values below 1e-7 are left at zero.
pub fn gt_heatmap3d(poses: &[Pose3D], grid: &VoxelGrid, channels: usize, sigma_mm: f64) -> DenseVolume {
    assert!(sigma_mm > 0.0, "sigma must be positive");
    let mut vol = DenseVolume::zeros(grid, channels);
    let radius = sigma_mm * (2.0 * 1e7f64.ln()).sqrt();
    let s = grid.voxel_size();
    let inv = 1.0 / (2.0 * sigma_mm * sigma_mm);
    for pose in poses {
        for (j, p) in pose.joints.iter().enumerate().take(channels) {
            let mut lo = [0usize; 3];
            let mut hi = [0usize; 3];
            let mut empty = false;
            for a in 0..3 {
                let l = ((p[a] - radius - grid.origin[a]) / s[a] - 0.5).ceil().max(0.0);
                let h = ((p[a] + radius - grid.origin[a]) / s[a] - 0.5)
                    .floor()
                    .min(grid.bins[a] as f64 - 1.0);
                if !(l <= h) {
                    empty = true;
                    break;
                }
                lo[a] = l as usize;
                hi[a] = h as usize;
            }
            if empty {
                continue;
            }
            for x in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for z in lo[2]..=hi[2] {
                        let c = grid.voxel_center([x, y, z]);
                        let g = (-(c - p).norm_squared() * inv).exp();
                        if g < 1e-7 {
                            continue;
                        }
                        let i = grid.linear_index([x, y, z]) * channels + j;
                        vol.data[i] = vol.data[i].max(g as f32);
                    }
                }
            }
        }
    }
    vol
}

/// Frobenius norm of `pred - target` over all channels and voxels.
pub fn loss_jen(pred: &dyn VolumeView, target: &dyn VolumeView) -> Result<f64> {
    if pred.grid().bins != target.grid().bins || pred.channels() != target.channels() {
        return Err(Error::contract(format!(
            "volume shapes differ: {:?}x{} vs {:?}x{}",
            pred.grid().bins,
            pred.channels(),
            target.grid().bins,
            target.channels()
        )));
    }
    let a = pred.to_dense();
    let b = target.to_dense();
    let ss: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    Ok(ss.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_projection_table, CameraParams};
    use crate::heatmap2d::{render_gaussian_heatmap, Joint2D};
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_grid(n: usize) -> VoxelGrid {
        VoxelGrid::new([0.0; 3], [n as f64 * 100.0; 3], [n; 3]).unwrap()
    }

    fn random_dense(grid: &VoxelGrid, c: usize, occupancy: f64, rng: &mut ChaCha8Rng) -> DenseVolume {
        let mut v = DenseVolume::zeros(grid, c);
        for lin in 0..grid.num_voxels() {
            if rng.random::<f64>() < occupancy {
                for ch in 0..c {
                    v.data[lin * c + ch] = rng.random_range(0.0..1.0);
                }
            }
        }
        v
    }

    fn random_kernel(c_out: usize, c_in: usize, k: usize, rng: &mut ChaCha8Rng) -> Kernel3D {
        let n = c_out * c_in * k * k * k;
        Kernel3D::new(
            c_out,
            c_in,
            k,
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..c_out).map(|_| rng.random_range(-0.5..0.5)).collect(),
        )
        .unwrap()
    }

    /// Straight seven-loop reference convolution in f64.
    fn naive_conv(v: &DenseVolume, k: &Kernel3D) -> Vec<f64> {
        let [bx, by, bz] = v.grid.bins;
        let h = (k.size / 2) as isize;
        let mut out = vec![0.0f64; bx * by * bz * k.c_out];
        for x in 0..bx {
            for y in 0..by {
                for z in 0..bz {
                    for co in 0..k.c_out {
                        let mut acc = k.bias[co] as f64;
                        for ci in 0..k.c_in {
                            for kx in 0..k.size {
                                for ky in 0..k.size {
                                    for kz in 0..k.size {
                                        let ix = x as isize + kx as isize - h;
                                        let iy = y as isize + ky as isize - h;
                                        let iz = z as isize + kz as isize - h;
                                        if ix < 0
                                            || iy < 0
                                            || iz < 0
                                            || ix >= bx as isize
                                            || iy >= by as isize
                                            || iz >= bz as isize
                                        {
                                            continue;
                                        }
                                        acc += k.weight(co, ci, [kx, ky, kz]) as f64
                                            * v.get(ci, [ix as usize, iy as usize, iz as usize]) as f64;
                                    }
                                }
                            }
                        }
                        out[((x * by + y) * bz + z) * k.c_out + co] = acc;
                    }
                }
            }
        }
        out
    }

    fn frontal_rig() -> (VoxelGrid, Vec<CameraParams>) {
        let grid = VoxelGrid::new([0.0; 3], [2000.0, 2000.0, 2000.0], [32, 32, 32]).unwrap();
        let target = Vector3::new(1000.0, 1000.0, 1000.0);
        let cams = (0..5)
            .map(|i| {
                let a = i as f64 * std::f64::consts::TAU / 5.0;
                let eye = Vector3::new(1000.0 + 5000.0 * a.cos(), 1000.0 + 5000.0 * a.sin(), 1800.0);
                CameraParams::look_at(i, eye, target, 450.0, 450.0, 800, 608).unwrap()
            })
            .collect();
        (grid, cams)
    }

    fn render_views(cams: &[CameraParams], joints: &[Vector3<f64>], stride: f64) -> Vec<Heatmap2D> {
        cams.iter()
            .map(|cam| {
                let (w, h) = crate::geometry::heatmap_size(cam, stride);
                let p: Vec<Joint2D> = joints
                    .iter()
                    .map(|j| match crate::geometry::project_point(cam, j) {
                        Ok(pr) => Joint2D::new(pr.u / stride, pr.v / stride),
                        Err(_) => Joint2D::hidden(),
                    })
                    .collect();
                render_gaussian_heatmap(&[p], 2.0, joints.len(), h, w)
            })
            .collect()
    }

    #[test]
    fn zero_heatmaps_give_zero_volume() {
        let (grid, cams) = frontal_rig();
        let table = build_projection_table(&grid, &cams, 4.0).unwrap();
        let hms: Vec<Heatmap2D> = cams.iter().map(|_| Heatmap2D::zeros(2, 152, 200)).collect();
        let v = build_feature_volume(&hms, &table).unwrap();
        assert_eq!(v.max_value(), 0.0);
        assert!(build_sparse_feature_volume(&hms, &table, 0.0).unwrap().is_empty());
    }

    #[test]
    fn argmax_within_one_voxel_of_true_point() {
        let (grid, cams) = frontal_rig();
        let table = build_projection_table(&grid, &cams, 4.0).unwrap();
        let p = Vector3::new(1031.0, 947.0, 1120.0);
        let hms = render_views(&cams, &[p], 4.0);
        let v = build_feature_volume(&hms, &table).unwrap();
        let (best, val) = v.argmax(0);
        let truth = grid.voxel_of(&p).unwrap();
        for a in 0..3 {
            assert!(
                (best[a] as isize - truth[a] as isize).abs() <= 1,
                "{best:?} vs {truth:?}"
            );
        }
        assert!(val > 0.8);
    }

    #[test]
    fn fixed_divisor_counts_invisible_views() {
        // 1x1x1 grid, 5 cameras, 3 of them see the voxel and sample 1.0
        let grid = VoxelGrid::new([-50.0, -50.0, 950.0], [100.0; 3], [1, 1, 1]).unwrap();
        let ahead = CameraParams::new(
            0,
            100.0,
            100.0,
            50.0,
            50.0,
            nalgebra::Matrix3::identity(),
            Vector3::zeros(),
            400,
            400,
        )
        .unwrap();
        let away = CameraParams::new(
            1,
            100.0,
            100.0,
            50.0,
            50.0,
            nalgebra::Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)),
            Vector3::zeros(),
            400,
            400,
        )
        .unwrap();
        let cams = vec![ahead.clone(), ahead.clone(), ahead, away.clone(), away];
        let table = build_projection_table(&grid, &cams, 4.0).unwrap();
        let mut m = Map2D::zeros(1, 100, 100);
        for y in 0..100 {
            for x in 0..100 {
                m.set(0, y, x, 1.0);
            }
        }
        let hms = vec![Heatmap2D::from_map(m); 5];
        let v = build_feature_volume(&hms, &table).unwrap();
        assert!((v.get(0, [0, 0, 0]) - 0.6).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (grid, cams) = frontal_rig();
        let table = build_projection_table(&grid, &cams, 4.0).unwrap();
        let hms: Vec<Heatmap2D> = cams.iter().map(|_| Heatmap2D::zeros(1, 10, 10)).collect();
        assert!(build_feature_volume(&hms, &table).is_err());
        assert!(build_feature_volume(&hms[..2], &table).is_err());
    }

    #[test]
    fn fused_sparse_build_equals_sparsified_dense() {
        let (grid, cams) = frontal_rig();
        let table = build_projection_table(&grid, &cams, 4.0).unwrap();
        let joints = [Vector3::new(900.0, 1000.0, 1000.0), Vector3::new(1200.0, 800.0, 500.0)];
        let hms = render_views(&cams, &joints, 4.0);
        let dense = build_feature_volume(&hms, &table).unwrap();
        for th in [0.0, 0.15, 0.5] {
            let fused = build_sparse_feature_volume(&hms, &table, th).unwrap();
            assert_eq!(fused, sparsify(&dense, th));
        }
    }

    #[test]
    fn sparsify_examples() {
        let grid = small_grid(4);
        let mut v = DenseVolume::zeros(&grid, 2);
        v.values_mut().fill(0.1);
        assert!(sparsify(&v, 0.15).is_empty());
        assert_eq!(sparsify(&v, 0.0).nnz(), 64);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random_dense(&grid, 2, 0.5, &mut rng);
        let mut k = 0;
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..4 {
                    if r.get(0, [x, y, z]) >= 0.15 || r.get(1, [x, y, z]) >= 0.15 {
                        k += 1;
                    }
                }
            }
        }
        let s = sparsify(&r, 0.15);
        assert_eq!(s.nnz(), k);
        assert!(s.keys().windows(2).all(|w| w[0] < w[1]));
        for i in 0..s.nnz() {
            assert!(s.entry(i).iter().any(|&x| x >= 0.15));
        }
    }

    #[test]
    fn identity_kernel_is_identity() {
        let grid = small_grid(6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_dense(&grid, 2, 0.4, &mut rng);
        let mut w = vec![0.0; 2 * 2 * 27];
        for c in 0..2 {
            w[((c * 2 + c) * 27) + 13] = 1.0;
        }
        let k = Kernel3D::new(2, 2, 3, w, vec![0.0; 2]).unwrap();
        assert_eq!(conv3d_dense(&v, &k).unwrap(), v);
    }

    #[test]
    fn ones_kernel_impulse_response() {
        let grid = small_grid(7);
        let mut v = DenseVolume::zeros(&grid, 1);
        v.set(0, [3, 3, 3], 1.0);
        let k = Kernel3D::new(1, 1, 3, vec![1.0; 27], vec![0.0]).unwrap();
        let out = conv3d_dense(&v, &k).unwrap();
        let ones = out.values().iter().filter(|&&x| x == 1.0).count();
        assert_eq!(ones, 27);
        assert_eq!(out.values().iter().filter(|&&x| x != 0.0).count(), 27);
        for x in 2..=4 {
            for y in 2..=4 {
                for z in 2..=4 {
                    assert_eq!(out.get(0, [x, y, z]), 1.0);
                }
            }
        }
    }

    #[test]
    fn dense_conv_matches_naive_loops() {
        let grid = small_grid(8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = random_dense(&grid, 3, 1.0, &mut rng);
        let k = random_kernel(2, 3, 3, &mut rng);
        let fast = conv3d_dense(&v, &k).unwrap();
        let slow = naive_conv(&v, &k);
        let diff = fast
            .values()
            .iter()
            .zip(&slow)
            .map(|(a, b)| (*a as f64 - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-5, "max diff {diff}");
    }

    #[test]
    fn conv_rejects_mismatch() {
        let grid = small_grid(4);
        let v = DenseVolume::zeros(&grid, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let k = random_kernel(1, 3, 3, &mut rng);
        assert!(conv3d_dense(&v, &k).is_err());
        assert!(conv3d_sparse(&sparsify(&v, 0.0), &k).is_err());
        assert!(Kernel3D::new(1, 1, 2, vec![0.0; 8], vec![0.0]).is_err());
    }

    #[test]
    fn sparse_conv_support_and_empty_input() {
        let grid = small_grid(9);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = random_kernel(2, 1, 3, &mut rng);
        let empty = SparseVolume::empty(&grid, 1);
        assert!(conv3d_sparse(&empty, &k).unwrap().is_empty());

        let mut v = DenseVolume::zeros(&grid, 1);
        v.set(0, [4, 4, 4], 0.7);
        let out = conv3d_sparse(&sparsify(&v, 0.0), &k).unwrap();
        let mut expected: Vec<usize> = Vec::new();
        for x in 3..=5 {
            for y in 3..=5 {
                for z in 3..=5 {
                    expected.push(grid.linear_index([x, y, z]));
                }
            }
        }
        assert_eq!(out.keys(), &expected[..]);
    }

    #[test]
    fn sparse_conv_matches_dense_at_one_percent() {
        let grid = small_grid(32);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let v = random_dense(&grid, 2, 0.01, &mut rng);
        let k = random_kernel(2, 2, 3, &mut rng);
        let dense = conv3d_dense(&v, &k).unwrap();
        let sparse = conv3d_sparse(&sparsify(&v, 0.0), &k).unwrap();
        for (i, &key) in sparse.keys().iter().enumerate() {
            for c in 0..2 {
                assert!((sparse.entry(i)[c] - dense.voxel_at(key)[c]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn smooth_impulse_zero_and_kernel_equivalence() {
        let grid = small_grid(11);
        assert!(smooth_volume(&SparseVolume::empty(&grid, 1), &SmoothParams::default()).is_empty());

        let mut v = DenseVolume::zeros(&grid, 1);
        v.set(0, [5, 5, 5], 1.0);
        let p = SmoothParams::default();
        let s = smooth_volume(&sparsify(&v, 0.0), &p).to_dense();
        assert_eq!(s.argmax(0).0, [5, 5, 5]);
        let t = p.taps();
        assert!((s.get(0, [5, 5, 5]) - t[2].powi(3)).abs() < 1e-7);
        assert!((s.get(0, [6, 5, 4]) - t[3] * t[2] * t[1]).abs() < 1e-7);
        // symmetric blob
        assert_eq!(s.get(0, [4, 5, 5]), s.get(0, [6, 5, 5]));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = random_dense(&grid, 2, 0.05, &mut rng);
        let sep = smooth_volume(&sparsify(&r, 0.0), &p).to_dense();
        let full = conv3d_dense(&r, &p.depthwise_kernel(2)).unwrap();
        for (a, b) in sep.values().iter().zip(full.values()) {
            assert!((a - b.clamp(0.0, 1.0)).abs() < 1e-5);
        }
    }

    #[test]
    fn smooth_keeps_separated_blob_argmaxes() {
        let grid = VoxelGrid::new([0.0; 3], [2400.0, 1200.0, 1200.0], [24, 12, 12]).unwrap();
        let poses = [
            Pose3D::from_arrays(&[[420.0, 610.0, 580.0]]),
            Pose3D::from_arrays(&[[1930.0, 560.0, 640.0]]),
        ];
        let target = gt_heatmap3d(&poses, &grid, 1, 120.0);
        let smoothed = smooth_volume(&sparsify(&target, 0.0), &SmoothParams::default()).to_dense();
        for half in [0..12usize, 12..24] {
            let best = |v: &DenseVolume| {
                let mut b = ([0usize; 3], -1.0f32);
                for x in half.clone() {
                    for y in 0..12 {
                        for z in 0..12 {
                            if v.get(0, [x, y, z]) > b.1 {
                                b = ([x, y, z], v.get(0, [x, y, z]));
                            }
                        }
                    }
                }
                b.0
            };
            assert_eq!(best(&target), best(&smoothed));
        }
    }

    #[test]
    fn gt_heatmap_examples() {
        let grid = small_grid(10);
        assert_eq!(gt_heatmap3d(&[], &grid, 2, 100.0).max_value(), 0.0);
        let pose = Pose3D::from_arrays(&[[420.0, 530.0, 260.0], [700.0, 700.0, 700.0]]);
        let one = gt_heatmap3d(std::slice::from_ref(&pose), &grid, 2, 100.0);
        let home = grid.voxel_of(&pose.joints[0]).unwrap();
        for d in [[1i32, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]] {
            let n = [
                (home[0] as i32 + d[0]) as usize,
                (home[1] as i32 + d[1]) as usize,
                (home[2] as i32 + d[2]) as usize,
            ];
            assert!(one.get(0, home) >= one.get(0, n));
        }
        let mut other = pose.clone();
        other.joints[1] = Vector3::new(200.0, 200.0, 200.0);
        let two = gt_heatmap3d(&[pose.clone(), other], &grid, 2, 100.0);
        // channel 0 shares the joint: same as one person
        for lin in 0..grid.num_voxels() {
            assert_eq!(two.voxel_at(lin)[0], one.voxel_at(lin)[0]);
        }
        // closed form at a voxel centre
        let c = grid.voxel_center([4, 5, 2]);
        let g = (-(c - pose.joints[0]).norm_squared() / 20000.0).exp() as f32;
        assert_eq!(one.get(0, [4, 5, 2]), g);
    }

    #[test]
    fn loss_jen_examples() {
        let grid = small_grid(4);
        let a = DenseVolume::zeros(&grid, 2);
        assert_eq!(loss_jen(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.set(1, [1, 2, 3], 1.0);
        assert_eq!(loss_jen(&a, &b).unwrap(), 1.0);
        assert_eq!(loss_jen(&sparsify(&b, 0.0), &a).unwrap(), 1.0);
        assert!(loss_jen(&a, &DenseVolume::zeros(&grid, 3)).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_dense(&grid, 2, 1.0, &mut rng);
        let q = random_dense(&grid, 2, 1.0, &mut rng);
        let mut naive = 0.0f64;
        for i in 0..p.values().len() {
            naive += (p.values()[i] as f64 - q.values()[i] as f64).powi(2);
        }
        assert!((loss_jen(&p, &q).unwrap() - naive.sqrt()).abs() < 1e-9);
    }

    fn arb_volume(max_edge: usize) -> impl Strategy<Value = DenseVolume> {
        (
            1..=max_edge,
            1..=max_edge,
            1..=max_edge,
            1usize..3,
            any::<u64>(),
            0.0..1.0f64,
        )
            .prop_map(|(x, y, z, c, seed, occ)| {
                let grid = VoxelGrid::new([0.0; 3], [x as f64, y as f64, z as f64], [x, y, z]).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                random_dense(&grid, c, occ, &mut rng)
            })
    }

    proptest! {
        #[test]
        fn densify_sparsify_zero_is_identity(v in arb_volume(7)) {
            prop_assert_eq!(sparsify(&v, 0.0).to_dense(), v);
        }

        #[test]
        fn sparse_conv_equals_dense_on_support(v in arb_volume(10), seed in any::<u64>(), k in prop_oneof![Just(1usize), Just(3), Just(5)]) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let kernel = random_kernel(2, v.channels(), k, &mut rng);
            let dense = conv3d_dense(&v, &kernel).unwrap();
            let sparse = conv3d_sparse(&sparsify(&v, 0.0), &kernel).unwrap();
            for (i, &key) in sparse.keys().iter().enumerate() {
                for c in 0..2 {
                    prop_assert!((sparse.entry(i)[c] - dense.voxel_at(key)[c]).abs() < 1e-5);
                }
            }
        }

        #[test]
        fn fused_volume_bounded_and_monotone(
            px in 700.0..1300.0f64, py in 700.0..1300.0f64, pz in 700.0..1300.0f64,
            view in 0usize..5, boost in 0.0..1.0f32,
        ) {
            let (grid, cams) = frontal_rig();
            let grid = VoxelGrid::new(grid.origin, grid.extent, [8, 8, 8]).unwrap();
            let table = build_projection_table(&grid, &cams, 4.0).unwrap();
            let hms = render_views(&cams, &[Vector3::new(px, py, pz)], 4.0);
            let base = build_feature_volume(&hms, &table).unwrap();
            let hmax = hms.iter().map(|h| h.map().values().iter().copied().fold(0.0f32, f32::max)).fold(0.0, f32::max);
            prop_assert!(base.max_value() <= hmax + 1e-6);
            // raise one view's heatmap everywhere (still in [0, 1])
            let mut raised = hms.clone();
            let m = raised[view].map();
            let vals: Vec<f32> = m.to_chw().iter().map(|v| v + boost * (1.0 - v)).collect();
            raised[view] = Heatmap2D::from_map(Map2D::from_chw(m.channels(), m.height(), m.width(), &vals).unwrap());
            let up = build_feature_volume(&raised, &table).unwrap();
            for (a, b) in base.values().iter().zip(up.values()) {
                prop_assert!(b + 1e-6 >= *a);
            }
        }
    }
}
