//! MOTChallenge text formats.
//!
//! * detections / results / ground truth: CSV rows
//!   `frame,id,bb_left,bb_top,bb_width,bb_height,conf,x,y,z` (ground truth
//!   uses `frame,id,left,top,w,h,consider,class,visibility`)
//! * `seqinfo.ini`: `[Sequence]` key-value block with `name`, `imWidth`,
//!   `imHeight`, `frameRate`, `seqLength`
//!
//! Directory convention: `<seq>/det/det.txt`, `<seq>/gt/gt.txt`,
//! `<seq>/seqinfo.ini`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, FrameGeometry};
use crate::tracker::FrameResult;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// 1-based frame number.
    pub frame: u32,
    pub bbox: BoundingBox,
    pub confidence: f64,
}

/// A box carrying an identity, as found in ground-truth and result files.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledBox {
    pub frame: u32,
    pub id: i64,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceMeta {
    pub name: String,
    pub frame_rate: f64,
    pub geometry: FrameGeometry,
    pub length: u32,
}

/// Which ground-truth rows count as evaluation targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtFilter {
    /// Keep only rows with the consider flag set and class 1 (pedestrian).
    pub pedestrians_only: bool,
    pub min_visibility: f64,
}

impl Default for GtFilter {
    fn default() -> Self {
        GtFilter {
            pedestrians_only: true,
            min_visibility: 0.0,
        }
    }
}

pub fn det_path(seq_dir: &Path) -> PathBuf {
    seq_dir.join("det").join("det.txt")
}

pub fn gt_path(seq_dir: &Path) -> PathBuf {
    seq_dir.join("gt").join("gt.txt")
}

pub fn seqinfo_path(seq_dir: &Path) -> PathBuf {
    seq_dir.join("seqinfo.ini")
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes a file, creating missing parent directories.
pub(crate) fn write_text(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct Row<'a> {
    fields: Vec<&'a str>,
    line: usize,
}

fn csv_rows<'a>(text: &'a str) -> impl Iterator<Item = Row<'a>> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.trim();
        (!l.is_empty()).then(|| Row {
            fields: l.split(',').map(str::trim).collect(),
            line: i + 1,
        })
    })
}

impl Row<'_> {
    fn num<T: std::str::FromStr>(&self, idx: usize, path: &Path) -> Result<T> {
        self.fields[idx].parse::<T>().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: self.line,
            message: format!("field {} ({:?}) is not a number", idx + 1, self.fields[idx]),
        })
    }

    fn require(&self, n: usize, path: &Path) -> Result<()> {
        if self.fields.len() < n {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: self.line,
                message: format!("expected at least {n} fields, found {}", self.fields.len()),
            });
        }
        Ok(())
    }

    fn frame(&self, path: &Path) -> Result<u32> {
        let f: u32 = self.num(0, path)?;
        if f == 0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: self.line,
                message: "frame numbers start at 1".into(),
            });
        }
        Ok(f)
    }

    fn bbox(&self, path: &Path) -> Result<BoundingBox> {
        BoundingBox::new(
            self.num(2, path)?,
            self.num(3, path)?,
            self.num(4, path)?,
            self.num(5, path)?,
        )
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: self.line,
            message: e.to_string(),
        })
    }
}

pub fn parse_detections(text: &str, path: &Path) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for row in csv_rows(text) {
        row.require(7, path)?;
        out.push(Detection {
            frame: row.frame(path)?,
            bbox: row.bbox(path)?,
            confidence: row.num(6, path)?,
        });
    }
    out.sort_by_key(|d| d.frame);
    Ok(out)
}

/// Reads a detection file; the id column is ignored and rows are stably
/// sorted by frame.
pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    parse_detections(&read_text(path)?, path)
}

pub fn parse_labeled(text: &str, path: &Path, filter: Option<GtFilter>) -> Result<Vec<LabeledBox>> {
    let mut out = Vec::new();
    for row in csv_rows(text) {
        row.require(6, path)?;
        if let Some(f) = filter {
            // MOT16/17 ground truth: consider flag, class, visibility
            if f.pedestrians_only && row.fields.len() >= 8 {
                let consider: f64 = row.num(6, path)?;
                let class: f64 = row.num(7, path)?;
                if consider == 0.0 || class != 1.0 {
                    continue;
                }
            }
            if row.fields.len() >= 9 {
                let vis: f64 = row.num(8, path)?;
                if vis < f.min_visibility {
                    continue;
                }
            }
        }
        out.push(LabeledBox {
            frame: row.frame(path)?,
            id: row.num(1, path)?,
            bbox: row.bbox(path)?,
        });
    }
    out.sort_by_key(|b| b.frame);
    Ok(out)
}

pub fn read_ground_truth(path: &Path, filter: GtFilter) -> Result<Vec<LabeledBox>> {
    parse_labeled(&read_text(path)?, path, Some(filter))
}

/// Reads a tracker result file (same CSV schema, identities kept).
pub fn read_results(path: &Path) -> Result<Vec<LabeledBox>> {
    parse_labeled(&read_text(path)?, path, None)
}

/// Result rows, frame-major then id, two-decimal boxes.
pub fn format_results(results: &[FrameResult]) -> String {
    let mut rows: Vec<(u32, u64, BoundingBox)> = results
        .iter()
        .flat_map(|r| r.committed.iter().map(|c| (c.frame, c.id, c.bbox)))
        .collect();
    rows.sort_by_key(|r| (r.0, r.1));
    let mut s = String::new();
    for (frame, id, b) in rows {
        let _ = writeln!(
            s,
            "{frame},{id},{:.2},{:.2},{:.2},{:.2},1,-1,-1,-1",
            b.x, b.y, b.w, b.h
        );
    }
    s
}

pub fn write_results(path: &Path, results: &[FrameResult]) -> Result<()> {
    write_text(path, &format_results(results))
}

pub fn write_detections(path: &Path, detections: &[Detection]) -> Result<()> {
    let mut s = String::new();
    for d in detections {
        let b = d.bbox;
        let _ = writeln!(
            s,
            "{},-1,{:.2},{:.2},{:.2},{:.2},{:.3},-1,-1,-1",
            d.frame, b.x, b.y, b.w, b.h, d.confidence
        );
    }
    write_text(path, &s)
}

/// Ground truth in the MOT16/17 layout with consider flag 1, class 1 and
/// visibility 1.
pub fn write_ground_truth(path: &Path, boxes: &[LabeledBox]) -> Result<()> {
    let mut sorted = boxes.to_vec();
    sorted.sort_by_key(|b| (b.frame, b.id));
    let mut s = String::new();
    for g in sorted {
        let b = g.bbox;
        let _ = writeln!(
            s,
            "{},{},{:.2},{:.2},{:.2},{:.2},1,1,1",
            g.frame, g.id, b.x, b.y, b.w, b.h
        );
    }
    write_text(path, &s)
}

pub fn parse_seqinfo(text: &str, path: &Path) -> Result<SequenceMeta> {
    let mut kv = std::collections::HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('[') || line.starts_with(';') || line.starts_with('#') {
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |key: &str| {
        kv.get(key).ok_or_else(|| Error::Schema {
            path: path.to_path_buf(),
            message: format!("missing key {key}"),
        })
    };
    let num = |key: &str| -> Result<f64> {
        get(key)?.parse::<f64>().map_err(|_| Error::Schema {
            path: path.to_path_buf(),
            message: format!("{key} is not a number"),
        })
    };
    let name = get("name")?.clone();
    let width = num("imWidth")?;
    let height = num("imHeight")?;
    let frame_rate = num("frameRate")?;
    let length = num("seqLength")?;
    if frame_rate <= 0.0 || length < 1.0 || length.fract() != 0.0 {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            message: "frameRate and seqLength must be positive".into(),
        });
    }
    let geometry = FrameGeometry::new(width, height).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(SequenceMeta {
        name,
        frame_rate,
        geometry,
        length: length as u32,
    })
}

pub fn read_seqinfo(path: &Path) -> Result<SequenceMeta> {
    parse_seqinfo(&read_text(path)?, path)
}

pub fn write_seqinfo(path: &Path, meta: &SequenceMeta) -> Result<()> {
    let text = format!(
        "[Sequence]\nname={}\nimDir=img1\nframeRate={}\nseqLength={}\nimWidth={}\nimHeight={}\nimExt=.jpg\n",
        meta.name, meta.frame_rate, meta.length, meta.geometry.width, meta.geometry.height
    );
    write_text(path, &text)
}

/// Buckets detections by frame; index 0 holds frame 1.
pub fn group_by_frame(detections: &[Detection], length: u32) -> Vec<Vec<Detection>> {
    let last = detections.iter().map(|d| d.frame).max().unwrap_or(0).max(length);
    let mut frames = vec![Vec::new(); last as usize];
    for d in detections {
        frames[d.frame as usize - 1].push(*d);
    }
    frames
}
