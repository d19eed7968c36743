//! Dense versus sparse convolution timing on random sparse volumes.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{build_projection_table, VoxelGrid};
use crate::simulator::{sample_scene, ScenarioConfig};
use crate::volume::{build_sparse_feature_volume, conv3d_dense, conv3d_sparse, Kernel3D, SparseVolume, VolumeView};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub grids: Vec<[usize; 3]>,
    /// Fractions of occupied voxels.
    pub occupancies: Vec<f64>,
    pub channels: usize,
    pub kernel_size: usize,
    pub warmup: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Largest allowed sparse/dense difference before timing.
    pub tolerance: f32,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            grids: vec![[80, 80, 32], [120, 120, 48], [160, 160, 64]],
            occupancies: vec![0.005, 0.01, 0.02, 0.05],
            channels: 15,
            kernel_size: 3,
            warmup: 1,
            repeats: 3,
            seed: 0,
            tolerance: 1e-5,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grids.is_empty() || self.grids.iter().any(|g| g.contains(&0)) {
            return Err(Error::config(
                "bench.grids",
                "need at least one grid with positive bins",
            ));
        }
        if self.occupancies.iter().any(|o| !(*o > 0.0 && *o <= 1.0)) {
            return Err(Error::config("bench.occupancies", "each must lie in (0, 1]"));
        }
        if self.channels == 0 {
            return Err(Error::config("bench.channels", "must be >= 1"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::config("bench.kernel_size", "must be odd"));
        }
        if self.repeats == 0 {
            return Err(Error::config("bench.repeats", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub grid: [usize; 3],
    pub occupancy: f64,
    pub nnz: usize,
    pub max_abs_diff: f32,
    pub dense_ms: f64,
    pub sparse_ms: f64,
}

impl BenchRow {
    pub fn speedup(&self) -> f64 {
        self.dense_ms / self.sparse_ms
    }
}

/// Uniformly placed voxels with values in `[0.15, 1)`.
pub fn random_sparse_volume(grid: &VoxelGrid, channels: usize, occupancy: f64, rng: &mut ChaCha8Rng) -> SparseVolume {
    let n = grid.num_voxels();
    let k = ((occupancy * n as f64).round() as usize).clamp(1, n);
    let mut keys = sample(rng, n, k).into_vec();
    keys.sort_unstable();
    let values = (0..k * channels).map(|_| rng.random_range(0.15..1.0f32)).collect();
    SparseVolume::from_sorted(grid, channels, keys, values).expect("sorted distinct keys")
}

pub fn random_kernel(c_in: usize, c_out: usize, size: usize, rng: &mut ChaCha8Rng) -> Kernel3D {
    let weights = (0..c_out * c_in * size * size * size)
        .map(|_| rng.random_range(-1.0..1.0f32))
        .collect();
    let bias = (0..c_out).map(|_| rng.random_range(-0.1..0.1f32)).collect();
    Kernel3D::new(c_out, c_in, size, weights, bias).expect("consistent shapes")
}

/// Largest difference between the sparse result and the dense one. Voxels
/// outside the sparse support must equal the bias.
pub fn conv_discrepancy(sparse_in: &SparseVolume, kernel: &Kernel3D) -> Result<f32> {
    let dense = conv3d_dense(&sparse_in.to_dense(), kernel)?;
    let sparse = conv3d_sparse(sparse_in, kernel)?;
    let c = kernel.c_out;
    let mut worst = 0.0f32;
    let mut next = 0usize;
    for (lin, vox) in dense.values().chunks_exact(c).enumerate() {
        let expect: &[f32] = if next < sparse.nnz() && sparse.keys()[next] == lin {
            next += 1;
            sparse.entry(next - 1)
        } else {
            &kernel.bias
        };
        for (a, b) in vox.iter().zip(expect) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn time_ms<F: FnMut()>(warmup: usize, repeats: usize, mut f: F) -> f64 {
    for _ in 0..warmup {
        f();
    }
    median(
        (0..repeats)
            .map(|_| {
                let t = Instant::now();
                f();
                t.elapsed().as_secs_f64() * 1e3
            })
            .collect(),
    )
}

/// One row per grid and occupancy. Fails with an invariant error when the
/// two convolutions disagree.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for (gi, &bins) in cfg.grids.iter().enumerate() {
        let grid = VoxelGrid::new([0.0; 3], bins.map(|b| b as f64 * 62.5), bins)?;
        for (oi, &occ) in cfg.occupancies.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((gi as u64) << 32 | oi as u64));
            let vol = random_sparse_volume(&grid, cfg.channels, occ, &mut rng);
            let kernel = random_kernel(cfg.channels, cfg.channels, cfg.kernel_size, &mut rng);
            let diff = conv_discrepancy(&vol, &kernel)?;
            if !(diff <= cfg.tolerance) {
                return Err(Error::Invariant(format!(
                    "sparse and dense convolution differ by {diff} on grid {bins:?} at occupancy {occ}"
                )));
            }
            let dense_in = vol.to_dense();
            let dense_ms = time_ms(cfg.warmup, cfg.repeats, || {
                std::hint::black_box(conv3d_dense(&dense_in, &kernel).expect("checked"));
            });
            let sparse_ms = time_ms(cfg.warmup, cfg.repeats, || {
                std::hint::black_box(conv3d_sparse(&vol, &kernel).expect("checked"));
            });
            rows.push(BenchRow {
                grid: bins,
                occupancy: vol.occupancy(),
                nnz: vol.nnz(),
                max_abs_diff: diff,
                dense_ms,
                sparse_ms,
            });
        }
    }
    Ok(rows)
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut s = format!(
        "{:<12} {:>9} {:>9} {:>10} {:>10} {:>8} {:>10}\n",
        "grid", "occupancy", "nnz", "dense_ms", "sparse_ms", "speedup", "max_diff"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<12} {:>8.2}% {:>9} {:>10.2} {:>10.2} {:>7.2}x {:>10.1e}\n",
            format!("{}x{}x{}", r.grid[0], r.grid[1], r.grid[2]),
            100.0 * r.occupancy,
            r.nnz,
            r.dense_ms,
            r.sparse_ms,
            r.speedup(),
            r.max_abs_diff
        ));
    }
    s
}

/// Occupancy of the sparsified feature volume of frame 0 of a simulated
/// scene.
pub fn scene_occupancy(scenario: &ScenarioConfig, bins: [usize; 3], threshold: f32) -> Result<f64> {
    let scene = sample_scene(scenario)?;
    let grid = scenario.grid(bins)?;
    let table = build_projection_table(&grid, &scene.cameras, scenario.heatmap_stride)?;
    let obs = scene.render(&scene.gt_frame(0));
    Ok(build_sparse_feature_volume(&obs.heatmaps, &table, threshold)?.occupancy())
}
