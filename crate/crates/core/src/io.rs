//! On-disk formats: camera files, newline-delimited JSON records and the
//! VXHM binary heatmap dump.
//!
//! VXHM layout: the magic `VXHM`, then `channels`, `height`, `width` as
//! little-endian `u32`, then `channels·height·width` little-endian `f32`
//! values in channel-major (CHW) order.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraParams, Pose3D};
use crate::heatmap2d::Map2D;
use crate::simulator::{GtFrame, GtPerson};

pub const SCENARIO_FILE: &str = "scenario.json";
pub const CAMERAS_FILE: &str = "cameras.json";
pub const GT_FILE: &str = "gt.jsonl";
pub const HEATMAP_DIR: &str = "heatmaps";
pub const TRACKS_FILE: &str = "tracks.jsonl";

const VXHM_MAGIC: &[u8; 4] = b"VXHM";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub id: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major world-to-camera rotation.
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub width: u32,
    pub height: u32,
}

impl From<&CameraParams> for CameraRecord {
    fn from(c: &CameraParams) -> Self {
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[3 * i + j] = c.rotation[(i, j)];
            }
        }
        CameraRecord {
            id: c.id,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            r,
            t: [c.translation.x, c.translation.y, c.translation.z],
            width: c.image_width,
            height: c.image_height,
        }
    }
}

impl CameraRecord {
    pub fn to_camera(&self) -> Result<CameraParams> {
        CameraParams::new(
            self.id,
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            Matrix3::from_row_slice(&self.r),
            Vector3::from(self.t),
            self.width,
            self.height,
        )
    }
}

/// One ground-truth person in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtRecord {
    pub frame: u32,
    pub person_id: u64,
    pub joints: Vec<[f64; 3]>,
    pub embedding: Vec<f32>,
    pub occlusion: Vec<f64>,
}

pub fn gt_records(frame: &GtFrame) -> Vec<GtRecord> {
    frame
        .persons
        .iter()
        .map(|p| GtRecord {
            frame: frame.frame,
            person_id: p.id,
            joints: p.pose.to_arrays(),
            embedding: p.embedding.clone(),
            occlusion: p.occlusion.clone(),
        })
        .collect()
}

/// Group records into `frames` consecutive frames starting at 0. Frames
/// without records come back empty.
pub fn gt_frames_from_records(records: &[GtRecord], frames: u32) -> Result<Vec<GtFrame>> {
    let mut out: Vec<GtFrame> = (0..frames)
        .map(|f| GtFrame {
            frame: f,
            persons: Vec::new(),
        })
        .collect();
    for r in records {
        let slot = out.get_mut(r.frame as usize).ok_or_else(|| Error::Data {
            frame: r.frame,
            message: format!("record outside the scenario's {frames} frames"),
        })?;
        slot.persons.push(GtPerson {
            id: r.person_id,
            pose: Pose3D::from_arrays(&r.joints),
            embedding: r.embedding.clone(),
            occlusion: r.occlusion.clone(),
        });
    }
    Ok(out)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

fn finish(mut w: BufWriter<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::io(path, e.into()))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    finish(w, path)
}

/// Parse a JSON document; errors name the offending field path.
pub fn parse_json<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let line = e.inner().line();
        let field = e.path().to_string();
        Error::Parse {
            path: path.to_path_buf(),
            line,
            message: if field == "." {
                e.inner().to_string()
            } else {
                format!("field `{field}`: {}", e.inner())
            },
        }
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_json(path, &text)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    finish(w, path)
}

/// Read one record per line; blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let de = &mut serde_json::Deserializer::from_str(&line);
        let item = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: format!("field `{}`: {}", e.path(), e.inner()),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_cameras(path: &Path, cameras: &[CameraParams]) -> Result<()> {
    let recs: Vec<CameraRecord> = cameras.iter().map(CameraRecord::from).collect();
    write_json(path, &recs)
}

pub fn read_cameras(path: &Path) -> Result<Vec<CameraParams>> {
    let recs: Vec<CameraRecord> = read_json(path)?;
    recs.iter()
        .enumerate()
        .map(|(i, r)| {
            r.to_camera().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: format!("camera {i}: {e}"),
            })
        })
        .collect()
}

pub fn encode_vxhm(map: &Map2D) -> Vec<u8> {
    let (c, h, w) = map.shape();
    let chw = map.to_chw();
    let mut out = Vec::with_capacity(16 + 4 * chw.len());
    out.extend_from_slice(VXHM_MAGIC);
    for d in [c, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in chw {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_vxhm(bytes: &[u8]) -> std::result::Result<Map2D, String> {
    if bytes.len() < 16 || &bytes[..4] != VXHM_MAGIC {
        return Err("not a VXHM file".into());
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let n = c
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or("header overflows")?;
    if bytes.len() != 16 + 4 * n {
        return Err(format!("expected {} payload bytes, found {}", 4 * n, bytes.len() - 16));
    }
    let data: Vec<f32> = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Map2D::from_chw(c, h, w, &data).map_err(|e| e.to_string())
}

pub fn write_vxhm(path: &Path, map: &Map2D) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(&encode_vxhm(map)).map_err(|e| Error::io(path, e))?;
    finish(w, path)
}

pub fn read_vxhm(path: &Path) -> Result<Map2D> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_vxhm(&bytes).map_err(|message| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message,
    })
}

pub fn heatmap_path(dataset: &Path, frame: u32, view: usize) -> PathBuf {
    dataset
        .join(HEATMAP_DIR)
        .join(format!("frame_{frame:06}_view_{view}.vxhm"))
}

pub fn reid_path(dataset: &Path, frame: u32, view: usize) -> PathBuf {
    dataset
        .join(HEATMAP_DIR)
        .join(format!("frame_{frame:06}_view_{view}_reid.vxhm"))
}
