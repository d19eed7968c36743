//! SVG exports: projected skeletons per view and a top-down trajectory plot.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{project_point, CameraParams};
use crate::skeleton::{LIMBS, PELVIS};
use crate::tracker::TrackRecord;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

pub fn track_color(id: u64) -> &'static str {
    PALETTE[(id % PALETTE.len() as u64) as usize]
}

/// Skeletons of one frame as seen by `camera`. Limbs with an endpoint
/// behind the camera are skipped.
pub fn view_svg(records: &[&TrackRecord], camera: &CameraParams) -> String {
    let (w, h) = (camera.image_width, camera.image_height);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for r in records {
        let color = track_color(r.track_id);
        let px: Vec<Option<(f64, f64)>> = r
            .joints
            .iter()
            .map(|j| project_point(camera, &Vector3::from(*j)).ok().map(|p| (p.u, p.v)))
            .collect();
        let _ = writeln!(s, r#"<g id="track-{}" stroke="{color}" fill="{color}">"#, r.track_id);
        for &(a, b) in LIMBS.iter() {
            if let (Some(Some(p)), Some(Some(q))) = (px.get(a), px.get(b)) {
                let _ = writeln!(
                    s,
                    r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke-width="2"/>"#,
                    p.0, p.1, q.0, q.1
                );
            }
        }
        for p in px.iter().flatten() {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5"/>"#, p.0, p.1);
        }
        let top = px.iter().flatten().min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some(t) = top {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="14" stroke="none">{}</text>"#,
                t.0 + 4.0,
                t.1 - 6.0,
                r.track_id
            );
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

/// Pelvis trajectories seen from above, with the cameras as squares.
/// `area` is `[x0, y0, x1, y1]` in millimetres.
pub fn topdown_svg(records: &[TrackRecord], cameras: &[CameraParams], area: [f64; 4]) -> String {
    let mut xs = vec![area[0], area[2]];
    let mut ys = vec![area[1], area[3]];
    for c in cameras {
        let p = c.center();
        xs.push(p.x);
        ys.push(p.y);
    }
    let pad = 500.0;
    let x0 = xs.iter().copied().fold(f64::INFINITY, f64::min) - pad;
    let x1 = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) + pad;
    let y0 = ys.iter().copied().fold(f64::INFINITY, f64::min) - pad;
    let y1 = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max) + pad;
    let scale = 0.04;
    let (w, h) = ((x1 - x0) * scale, (y1 - y0) * scale);
    // world y points up on the page
    let map = |x: f64, y: f64| ((x - x0) * scale, (y1 - y) * scale);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.2} {h:.2}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w:.2}" height="{h:.2}" fill="white"/>"#);
    let (ax, ay) = map(area[0], area[3]);
    let _ = writeln!(
        s,
        r##"<rect x="{ax:.2}" y="{ay:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#999"/>"##,
        (area[2] - area[0]) * scale,
        (area[3] - area[1]) * scale
    );
    for c in cameras {
        let p = c.center();
        let (cx, cy) = map(p.x, p.y);
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="8" height="8" fill="black"><title>camera {}</title></rect>"#,
            cx - 4.0,
            cy - 4.0,
            c.id
        );
    }
    let mut tracks: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
    for r in records {
        if let Some(p) = r.joints.get(PELVIS) {
            tracks.entry(r.track_id).or_default().push(map(p[0], p[1]));
        }
    }
    for (id, pts) in &tracks {
        let color = track_color(*id);
        let list: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            list.join(" ")
        );
        if let Some((x, y)) = pts.last() {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" fill="{color}">{id}</text>"#,
                x + 4.0,
                y - 4.0
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn frame_svg_path(dir: &Path, frame: u32, view: usize) -> PathBuf {
    dir.join(format!("frame_{frame:06}_view_{view}.svg"))
}

/// Write one SVG per frame and view for frames `0..frames`, plus
/// `topdown.svg`. Returns the number of files written.
pub fn write_renders(
    dir: &Path,
    records: &[TrackRecord],
    cameras: &[CameraParams],
    frames: u32,
    area: [f64; 4],
) -> Result<usize> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut by_frame: BTreeMap<u32, Vec<&TrackRecord>> = BTreeMap::new();
    for r in records {
        by_frame.entry(r.frame).or_default().push(r);
    }
    let mut n = 0;
    for f in 0..frames {
        let recs = by_frame.get(&f).map(Vec::as_slice).unwrap_or(&[]);
        for (v, cam) in cameras.iter().enumerate() {
            let p = frame_svg_path(dir, f, v);
            std::fs::write(&p, view_svg(recs, cam)).map_err(|e| Error::io(&p, e))?;
            n += 1;
        }
    }
    let p = dir.join("topdown.svg");
    std::fs::write(&p, topdown_svg(records, cameras, area)).map_err(|e| Error::io(&p, e))?;
    Ok(n + 1)
}
