//! KITTI velodyne binaries, object label text files and the per-point
//! semantic sidecar used by simulated frames.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, IoContext, Result};
use crate::geometry::{wrap_angle, Box3D};
use crate::palette::{SemanticClass, NUM_CLASSES};

const RECORD_BYTES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub class_id: Option<u8>,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z, class_id: None }
    }

    pub fn tagged(x: f64, y: f64, z: f64, class_id: u8) -> Self {
        Self {
            x,
            y,
            z,
            class_id: Some(class_id),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub frame_id: String,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, frame_id: impl Into<String>) -> Self {
        Self {
            points,
            frame_id: frame_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(Error::Contract(format!("point {i} has a non-finite coordinate")));
            }
            if p.class_id.is_some_and(|c| c as usize >= NUM_CLASSES) {
                return Err(Error::Contract(format!("point {i} has class {:?} outside the palette", p.class_id)));
            }
        }
        Ok(())
    }
}

fn frame_id_of(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Decodes little-endian `x y z intensity` f32 records. Intensity is dropped.
pub fn decode_velodyne(bytes: &[u8]) -> std::result::Result<Vec<Point>, String> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(format!("length {} is not a multiple of {RECORD_BYTES}", bytes.len()));
    }
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
    Ok(bytes
        .chunks_exact(RECORD_BYTES)
        .map(|r| Point::new(f(&r[0..4]), f(&r[4..8]), f(&r[8..12])))
        .collect())
}

pub fn read_velodyne_bin(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).at(path)?;
    let points = decode_velodyne(&bytes).map_err(|reason| Error::MalformedFile {
        path: path.to_path_buf(),
        reason,
    })?;
    Ok(PointCloud::new(points, frame_id_of(path)))
}

/// Encodes points as f32 records with zero intensity.
pub fn encode_velodyne(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * RECORD_BYTES);
    for p in &cloud.points {
        for v in [p.x as f32, p.y as f32, p.z as f32, 0.0] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_velodyne_bin(cloud: &PointCloud, path: &Path) -> Result<()> {
    fs::write(path, encode_velodyne(cloud)).at(path)
}

/// Writes one class byte per point. Every point must be tagged.
pub fn write_semantics(cloud: &PointCloud, path: &Path) -> Result<()> {
    let bytes = cloud
        .points
        .iter()
        .enumerate()
        .map(|(index, p)| p.class_id.ok_or(Error::MissingSemantics { index }))
        .collect::<Result<Vec<u8>>>()?;
    fs::write(path, bytes).at(path)
}

/// Attaches the classes stored in a sidecar written by [`write_semantics`].
pub fn read_semantics(cloud: &mut PointCloud, path: &Path) -> Result<()> {
    let bytes = fs::read(path).at(path)?;
    let malformed = |reason: String| Error::MalformedFile {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() != cloud.len() {
        return Err(malformed(format!("{} class bytes for {} points", bytes.len(), cloud.len())));
    }
    if let Some(bad) = bytes.iter().find(|&&c| c as usize >= NUM_CLASSES) {
        return Err(malformed(format!("class {bad} outside the palette")));
    }
    for (p, c) in cloud.points.iter_mut().zip(bytes) {
        p.class_id = Some(c);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Category {
    Car,
    Pedestrian,
    Cyclist,
    Other(String),
}

impl Category {
    pub fn parse(s: &str) -> Self {
        match s {
            "Car" => Category::Car,
            "Pedestrian" => Category::Pedestrian,
            "Cyclist" => Category::Cyclist,
            other => Category::Other(other.to_string()),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            Category::Car => "Car",
            Category::Pedestrian => "Pedestrian",
            Category::Cyclist => "Cyclist",
            Category::Other(s) => s,
        }
    }

    pub fn semantic_class(&self) -> Option<SemanticClass> {
        match self {
            Category::Car => Some(SemanticClass::Car),
            Category::Pedestrian => Some(SemanticClass::Pedestrian),
            Category::Cyclist => Some(SemanticClass::Cyclist),
            Category::Other(_) => None,
        }
    }

    pub fn from_semantic(c: SemanticClass) -> Option<Self> {
        match c {
            SemanticClass::Car => Some(Category::Car),
            SemanticClass::Pedestrian => Some(Category::Pedestrian),
            SemanticClass::Cyclist => Some(Category::Cyclist),
            _ => None,
        }
    }
}

/// One line of a KITTI object label file. `location` keeps the file's
/// camera-frame bottom-center; use [`ObjectLabel::to_box3d`] for the LiDAR
/// frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectLabel {
    pub category: Category,
    pub truncated: f64,
    pub occluded: i32,
    pub alpha: f64,
    pub bbox: [f64; 4],
    /// (h, w, l)
    pub dimensions: [f64; 3],
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
}

impl ObjectLabel {
    pub fn validate(&self) -> Result<()> {
        if self.dimensions.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Contract(format!("non-positive dimensions {:?}", self.dimensions)));
        }
        if !(-PI..=PI).contains(&self.rotation_y) {
            return Err(Error::Contract(format!("rotation_y {} outside [-pi, pi]", self.rotation_y)));
        }
        if self.score.is_some_and(|s| !(0.0..=1.0).contains(&s)) {
            return Err(Error::Contract(format!("score {:?} outside [0, 1]", self.score)));
        }
        let name = self.category.as_str();
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Contract(format!("category {name:?} is not a single token")));
        }
        Ok(())
    }

    /// Camera frame (x right, y down, z forward) to LiDAR frame by the fixed
    /// permutation x = z_c, y = -x_c, z = -y_c. The box center sits h/2
    /// above the labelled bottom face.
    pub fn to_box3d(&self) -> Box3D {
        let [h, w, l] = self.dimensions;
        let [xc, yc, zc] = self.location;
        let class_id = self.category.semantic_class().map_or(0, |c| c.id());
        Box3D::new([zc, -xc, -yc + h / 2.0], [l, w, h], wrap_angle(-self.rotation_y - FRAC_PI_2), class_id)
    }

    /// Inverse of [`ObjectLabel::to_box3d`]; image-plane fields are zeroed.
    pub fn from_box3d(b: &Box3D, category: Category, score: Option<f64>) -> Self {
        let [l, w, h] = b.size;
        let [x, y, z] = b.center;
        let location = [-y, -(z - h / 2.0), x];
        let rotation_y = wrap_angle(-b.yaw - FRAC_PI_2);
        let alpha = wrap_angle(rotation_y - location[0].atan2(location[2]));
        Self {
            category,
            truncated: 0.0,
            occluded: 0,
            alpha,
            bbox: [0.0; 4],
            dimensions: [h, w, l],
            location,
            rotation_y,
            score,
        }
    }
}

pub fn parse_label_str(text: &str) -> Result<Vec<ObjectLabel>> {
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 15 && fields.len() != 16 {
            return Err(Error::MalformedLine {
                line: line_no,
                fields: fields.len(),
            });
        }
        let num = |k: usize| -> Result<f64> {
            fields[k]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line: line_no,
                    field: k + 1,
                    text: fields[k].to_string(),
                })
        };
        let occluded = fields[2].parse::<i32>().map_err(|_| Error::Parse {
            line: line_no,
            field: 3,
            text: fields[2].to_string(),
        })?;
        labels.push(ObjectLabel {
            category: Category::parse(fields[0]),
            truncated: num(1)?,
            occluded,
            alpha: num(3)?,
            bbox: [num(4)?, num(5)?, num(6)?, num(7)?],
            dimensions: [num(8)?, num(9)?, num(10)?],
            location: [num(11)?, num(12)?, num(13)?],
            rotation_y: num(14)?,
            score: if fields.len() == 16 { Some(num(15)?) } else { None },
        });
    }
    Ok(labels)
}

pub fn parse_label_file(path: &Path) -> Result<Vec<ObjectLabel>> {
    let text = fs::read_to_string(path).at(path)?;
    parse_label_str(&text)
}

/// Serializes labels with two decimals per real field.
pub fn format_labels(labels: &[ObjectLabel]) -> Result<String> {
    let mut out = String::new();
    for l in labels {
        l.validate()?;
        let _ = write!(out, "{} {:.2} {} {:.2}", l.category.as_str(), l.truncated, l.occluded, l.alpha);
        for v in l.bbox.iter().chain(&l.dimensions).chain(&l.location) {
            let _ = write!(out, " {v:.2}");
        }
        let _ = write!(out, " {:.2}", l.rotation_y);
        if let Some(s) = l.score {
            let _ = write!(out, " {s:.2}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_label_file(labels: &[ObjectLabel], path: &Path) -> Result<()> {
    let text = format_labels(labels)?;
    fs::write(path, text).at(path)
}
