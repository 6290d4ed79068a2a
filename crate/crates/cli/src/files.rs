//! Text formats owned by the command line: multi-image detection files,
//! stereo rig files and stereo frame files.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{bail, Context, Result};
use cylindertag::assembler::{parse_detections, MarkerDetection};
use cylindertag::pose::{CornerKey, PoseEstimate, StereoFrame, StereoRig};
use cylindertag::CameraIntrinsics;

/// Prefix of the line opening one image's block in a detections file.
pub const IMAGE_HEADER: &str = "# image ";

/// Splits text at `# <tag>` lines into `(rest of line, body)` sections.
/// Text before the first header is returned under an empty name.
fn sections(text: &str, header: &str) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    for line in text.lines() {
        if let Some(name) = line.strip_prefix(header) {
            out.push((name.trim().to_string(), String::new()));
            continue;
        }
        if out.is_empty() {
            out.push((String::new(), String::new()));
        }
        let body = &mut out.last_mut().expect("non-empty").1;
        body.push_str(line);
        body.push('\n');
    }
    out.retain(|(name, body)| !name.is_empty() || !body.trim().is_empty());
    out
}

pub fn write_image_block(out: &mut String, name: &str, dets: &[MarkerDetection]) {
    let _ = writeln!(out, "{IMAGE_HEADER}{name}");
    for d in dets {
        out.push_str(&d.to_text());
    }
}

/// Detections per image, in file order.
pub fn read_detection_file(text: &str) -> Result<Vec<(String, Vec<MarkerDetection>)>> {
    sections(text, IMAGE_HEADER)
        .into_iter()
        .map(|(name, body)| {
            let dets = parse_detections(&body).with_context(|| format!("image {name:?}"))?;
            Ok((name, dets))
        })
        .collect()
}

/// Rig file: intrinsics `fx fy cx cy [k1 k2]` on the first line, then the
/// left-to-right transform as `qw qx qy qz tx ty tz`.
pub fn read_rig(text: &str) -> Result<StereoRig> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let k: CameraIntrinsics = lines.next().context("rig file is empty")?.parse()?;
    let pose = lines.next().context("rig file lacks the left-to-right transform")?;
    let (left_to_right, _) = PoseEstimate::from_line(&format!("{pose} 0")).context("rig transform needs 7 numbers")?;
    Ok(StereoRig {
        intrinsics: k,
        left_to_right,
    })
}

fn corner_map(dets: &[MarkerDetection]) -> BTreeMap<CornerKey, cylindertag::Vec2> {
    let mut m = BTreeMap::new();
    for d in dets {
        for (column, corners) in &d.columns {
            for (corner, p) in corners.iter().enumerate() {
                m.insert(
                    CornerKey {
                        marker: d.id,
                        column: *column,
                        corner,
                    },
                    *p,
                );
            }
        }
    }
    m
}

/// Frame file: detections of the left image under `# left`, those of the
/// right image under `# right`.
pub fn read_stereo_frame(text: &str) -> Result<StereoFrame> {
    let (mut left, mut right) = (None, None);
    for (name, body) in sections(text, "# ") {
        let dets = parse_detections(&body)?;
        match name.as_str() {
            "left" => left = Some(corner_map(&dets)),
            "right" => right = Some(corner_map(&dets)),
            other => bail!("unexpected section {other:?}, expected left or right"),
        }
    }
    match (left, right) {
        (Some(left), Some(right)) => Ok(StereoFrame { left, right }),
        _ => bail!("frame needs both a left and a right section"),
    }
}

#[cfg(test)]
fn write_stereo_frame(left: &[MarkerDetection], right: &[MarkerDetection]) -> String {
    let mut s = String::from("# left\n");
    left.iter().for_each(|d| s.push_str(&d.to_text()));
    s.push_str("# right\n");
    right.iter().for_each(|d| s.push_str(&d.to_text()));
    s
}
