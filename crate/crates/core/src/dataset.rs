//! On-disk sample layout: one `frame_NNNNNN` directory per frame.
//!
//! | file            | content                                          |
//! |-----------------|--------------------------------------------------|
//! | `cloud.bin`     | KITTI velodyne points                            |
//! | `labels.txt`    | KITTI object labels                              |
//! | `semantics.bin` | one class byte per point                         |
//! | `bev.bin`       | tensor container: `bev` `[3,H,W]`, `semantic` `[H,W]` |
//! | `bev.png`, `semantic.png` | previews                               |

use std::path::{Path, PathBuf};

use bevda_grad::container::{self, Record};

use crate::bev::{BevImage, SemanticGrid};
use crate::da::Sample;
use crate::error::{Error, IoContext, Result};
use crate::kitti::{self, ObjectLabel, PointCloud};

pub const CLOUD_FILE: &str = "cloud.bin";
pub const LABELS_FILE: &str = "labels.txt";
pub const SEMANTICS_FILE: &str = "semantics.bin";
pub const BEV_FILE: &str = "bev.bin";
pub const BEV_PNG: &str = "bev.png";
pub const SEMANTIC_PNG: &str = "semantic.png";

pub fn frame_name(index: usize) -> String {
    format!("frame_{index:06}")
}

/// Frame directories under `root`, sorted by name.
pub fn list_frames(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(root).at(root)? {
        let path = entry.at(root)?.path();
        let is_frame = path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("frame_"));
        if is_frame && path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// A LiDAR sweep with its object labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub cloud: PointCloud,
    pub labels: Vec<ObjectLabel>,
}

/// Writes cloud, labels and, when every point is tagged, the class sidecar.
pub fn write_frame(dir: &Path, frame: &Frame) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    kitti::write_velodyne_bin(&frame.cloud, &dir.join(CLOUD_FILE))?;
    kitti::write_label_file(&frame.labels, &dir.join(LABELS_FILE))?;
    if frame.cloud.points.iter().all(|p| p.class_id.is_some()) {
        kitti::write_semantics(&frame.cloud, &dir.join(SEMANTICS_FILE))?;
    }
    Ok(())
}

/// Reads a frame; the class sidecar and label file are optional.
pub fn read_frame(dir: &Path) -> Result<Frame> {
    let mut cloud = kitti::read_velodyne_bin(&dir.join(CLOUD_FILE))?;
    cloud.frame_id = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
    let sem = dir.join(SEMANTICS_FILE);
    if sem.exists() {
        kitti::read_semantics(&mut cloud, &sem)?;
    }
    let lab = dir.join(LABELS_FILE);
    let labels = if lab.exists() { kitti::parse_label_file(&lab)? } else { Vec::new() };
    Ok(Frame { cloud, labels })
}

pub fn sample_records(s: &Sample) -> Result<Vec<Record>> {
    let mut r = vec![Record::new("bev", &[3, s.bev.rows, s.bev.cols], s.bev.data.clone())?];
    if let Some(g) = &s.semantic {
        r.push(Record::new("semantic", &[g.rows, g.cols], g.labels.iter().map(|&l| l as f32).collect())?);
    }
    Ok(r)
}

pub fn sample_from_records(records: &[Record], path: &Path) -> Result<Sample> {
    let malformed = |reason: String| Error::MalformedFile {
        path: path.to_path_buf(),
        reason,
    };
    let bev = records.iter().find(|r| r.name == "bev").ok_or_else(|| malformed("no `bev` record".into()))?;
    let &[3, rows, cols] = bev.shape.as_slice() else {
        return Err(malformed(format!("`bev` has shape {:?}", bev.shape)));
    };
    let bev = BevImage::new(rows, cols, bev.data.clone()).map_err(|e| malformed(e.to_string()))?;
    let semantic = match records.iter().find(|r| r.name == "semantic") {
        None => None,
        Some(r) => {
            if r.shape != [rows, cols] {
                return Err(malformed(format!("`semantic` has shape {:?}", r.shape)));
            }
            if r.data.iter().any(|&v| v.fract() != 0.0 || !(0.0..=255.0).contains(&v)) {
                return Err(malformed("`semantic` holds non-integer classes".into()));
            }
            let labels = r.data.iter().map(|&v| v as u8).collect();
            Some(SemanticGrid::new(rows, cols, labels).map_err(|e| malformed(e.to_string()))?)
        }
    };
    Ok(Sample { bev, semantic })
}

pub fn write_sample(dir: &Path, s: &Sample) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    Ok(container::write_file(&dir.join(BEV_FILE), &sample_records(s)?)?)
}

pub fn read_sample(dir: &Path) -> Result<Sample> {
    let path = dir.join(BEV_FILE);
    if !path.exists() {
        return Err(std::io::Error::new(std::io::ErrorKind::NotFound, "encoded sample not found")).at(path);
    }
    let records = container::read_file(&path).map_err(|e| Error::MalformedFile {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    sample_from_records(&records, &path)
}

/// Every encoded sample under `root`, in frame order.
pub fn load_samples(root: &Path) -> Result<Vec<Sample>> {
    list_frames(root)?.iter().map(|d| read_sample(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_names_sort_numerically() {
        assert_eq!(frame_name(7), "frame_000007");
        assert!(frame_name(9) < frame_name(10));
    }

    #[test]
    fn semantic_record_must_hold_integers() {
        let bev = Record::new("bev", &[3, 1, 2], vec![0.0; 6]).unwrap();
        let sem = Record::new("semantic", &[1, 2], vec![1.0, 0.5]).unwrap();
        let e = sample_from_records(&[bev.clone(), sem], Path::new("x")).unwrap_err();
        assert!(matches!(e, Error::MalformedFile { .. }));
        let s = sample_from_records(&[bev], Path::new("x")).unwrap();
        assert!(s.semantic.is_none());
    }
}
