//! Bird's-eye-view encoding: height, density and occupancy channels, the
//! per-cell semantic grid, network normalization and PNG previews.

use std::path::Path;

use bevda_grad::Tensor;
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kitti::PointCloud;
use crate::palette::{SemanticClass, NUM_CLASSES};

pub const HEIGHT: usize = 0;
pub const DENSITY: usize = 1;
pub const OCCUPANCY: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub cell_size: f64,
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    /// Height normalization window.
    pub z_range: [f64; 2],
    /// Points higher than `z_range[1] + clutter_margin` are dropped.
    pub clutter_margin: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            cell_size: 0.1,
            x_range: [0.0, 50.0],
            y_range: [-22.5, 22.5],
            z_range: [-2.5, 1.5],
            clutter_margin: 1.0,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0) {
            return Err(Error::Config("grid.cell_size must be positive".into()));
        }
        for (name, [lo, hi]) in [("x_range", self.x_range), ("y_range", self.y_range), ("z_range", self.z_range)] {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("grid.{name} must be a finite increasing interval")));
            }
        }
        if !(self.clutter_margin >= 0.0) {
            return Err(Error::Config("grid.clutter_margin must be non-negative".into()));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        ((self.x_range[1] - self.x_range[0]) / self.cell_size).round() as usize
    }

    pub fn cols(&self) -> usize {
        ((self.y_range[1] - self.y_range[0]) / self.cell_size).round() as usize
    }

    /// Row-major cell index of a point, or `None` when it falls outside the
    /// grid or the accepted height band.
    pub fn cell_of(&self, x: f64, y: f64, z: f64) -> Option<usize> {
        if !(z >= self.z_range[0] && z <= self.z_range[1] + self.clutter_margin) {
            return None;
        }
        if !(x >= self.x_range[0] && x < self.x_range[1] && y >= self.y_range[0] && y < self.y_range[1]) {
            return None;
        }
        let r = ((x - self.x_range[0]) / self.cell_size).floor() as usize;
        let c = ((y - self.y_range[0]) / self.cell_size).floor() as usize;
        (r < self.rows() && c < self.cols()).then(|| r * self.cols() + c)
    }

    pub fn normalized_height(&self, z: f64) -> f64 {
        ((z - self.z_range[0]) / (self.z_range[1] - self.z_range[0])).clamp(0.0, 1.0)
    }
}

/// Density channel value for a cell holding `n` points.
pub fn density(n: usize) -> f32 {
    ((1.0 + n as f64).ln() / 64f64.ln()).min(1.0) as f32
}

/// Smallest density an occupied cell can have.
pub fn min_occupied_density() -> f32 {
    density(1)
}

/// Three-channel BEV, channel-major, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct BevImage {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl BevImage {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; 3 * rows * cols],
        }
    }

    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * rows * cols {
            return Err(Error::Contract(format!("{} values for a 3x{rows}x{cols} image", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn plane(&self, ch: usize) -> &[f32] {
        let n = self.rows * self.cols;
        &self.data[ch * n..(ch + 1) * n]
    }

    pub fn plane_mut(&mut self, ch: usize) -> &mut [f32] {
        let n = self.rows * self.cols;
        &mut self.data[ch * n..(ch + 1) * n]
    }

    pub fn get(&self, ch: usize, r: usize, c: usize) -> f32 {
        self.data[(ch * self.rows + r) * self.cols + c]
    }

    pub fn occupied(&self, r: usize, c: usize) -> bool {
        self.get(OCCUPANCY, r, c) > 0.0
    }

    pub fn occupancy_mask(&self) -> Vec<bool> {
        self.plane(OCCUPANCY).iter().map(|&v| v > 0.0).collect()
    }

    pub fn occupied_count(&self) -> usize {
        self.plane(OCCUPANCY).iter().filter(|&&v| v > 0.0).count()
    }

    /// Checks the channel coupling and value range.
    pub fn validate(&self) -> Result<()> {
        if self.data.len() != 3 * self.rows * self.cols {
            return Err(Error::Contract("image buffer size mismatch".into()));
        }
        if let Some(v) = self.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("value {v} outside [0, 1]")));
        }
        let n = self.rows * self.cols;
        for i in 0..n {
            let (h, d, o) = (self.data[i], self.data[n + i], self.data[2 * n + i]);
            if o != 0.0 && o != 1.0 {
                return Err(Error::Contract(format!("occupancy {o} at cell {i} is not binary")));
            }
            if (o == 1.0) != (d > 0.0) || (o == 0.0 && h != 0.0) {
                return Err(Error::Contract(format!("channels disagree at cell {i}")));
            }
        }
        Ok(())
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.rows || left + w > self.cols {
            return Err(Error::Contract(format!(
                "crop {h}x{w} at ({top},{left}) exceeds {}x{}",
                self.rows, self.cols
            )));
        }
        let mut data = Vec::with_capacity(3 * h * w);
        for ch in 0..3 {
            for r in top..top + h {
                let start = (ch * self.rows + r) * self.cols + left;
                data.extend_from_slice(&self.data[start..start + w]);
            }
        }
        Ok(Self { rows: h, cols: w, data })
    }

    /// Mirrors about the y = 0 column.
    pub fn flip(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.cols) {
            row.reverse();
        }
        out
    }
}

/// Encodes `cloud` on `grid`: clamped normalized max height, log density
/// and binary occupancy per cell.
pub fn encode_bev(cloud: &PointCloud, grid: &GridSpec) -> Result<BevImage> {
    grid.validate()?;
    let (rows, cols) = (grid.rows(), grid.cols());
    let n = rows * cols;
    let mut counts = vec![0usize; n];
    let mut max_z = vec![f64::NEG_INFINITY; n];
    for p in &cloud.points {
        if let Some(i) = grid.cell_of(p.x, p.y, p.z) {
            counts[i] += 1;
            max_z[i] = max_z[i].max(p.z);
        }
    }
    let mut img = BevImage::zeros(rows, cols);
    for i in 0..n {
        if counts[i] > 0 {
            img.data[i] = grid.normalized_height(max_z[i]) as f32;
            img.data[n + i] = density(counts[i]);
            img.data[2 * n + i] = 1.0;
        }
    }
    Ok(img)
}

/// Per-cell class labels, row-major; 0 marks an empty cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticGrid {
    pub rows: usize,
    pub cols: usize,
    pub labels: Vec<u8>,
}

impl SemanticGrid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            labels: vec![0; rows * cols],
        }
    }

    pub fn new(rows: usize, cols: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != rows * cols {
            return Err(Error::Contract(format!("{} labels for a {rows}x{cols} grid", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Contract(format!("label {bad} outside the palette")));
        }
        Ok(Self { rows, cols, labels })
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.labels[r * self.cols + c]
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.rows || left + w > self.cols {
            return Err(Error::Contract("crop exceeds grid".into()));
        }
        let mut labels = Vec::with_capacity(h * w);
        for r in top..top + h {
            let s = r * self.cols + left;
            labels.extend_from_slice(&self.labels[s..s + w]);
        }
        Ok(Self { rows: h, cols: w, labels })
    }

    pub fn flip(&self) -> Self {
        let mut out = self.clone();
        for row in out.labels.chunks_exact_mut(self.cols) {
            row.reverse();
        }
        out
    }
}

/// Labels each occupied cell with the class of its highest point (ties go
/// to the larger class id, so the result does not depend on point order).
pub fn semantic_grid(cloud: &PointCloud, grid: &GridSpec) -> Result<SemanticGrid> {
    grid.validate()?;
    let n = grid.rows() * grid.cols();
    let mut best: Vec<Option<(f64, u8)>> = vec![None; n];
    for (index, p) in cloud.points.iter().enumerate() {
        let class = p.class_id.ok_or(Error::MissingSemantics { index })?;
        if class == 0 || class as usize >= NUM_CLASSES {
            return Err(Error::Contract(format!("point {index} has unusable class {class}")));
        }
        if let Some(i) = grid.cell_of(p.x, p.y, p.z) {
            let cand = (p.z, class);
            if best[i].is_none_or(|b| cand > b) {
                best[i] = Some(cand);
            }
        }
    }
    Ok(SemanticGrid {
        rows: grid.rows(),
        cols: grid.cols(),
        labels: best.into_iter().map(|b| b.map_or(0, |(_, c)| c)).collect(),
    })
}

/// Network-range image: each channel mapped affinely from [0, 1] to [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct NetImage {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl NetImage {
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[1, 3, self.rows, self.cols], self.data.clone()).expect("sized by construction")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        match *t.shape() {
            [1, 3, rows, cols] => Ok(Self {
                rows,
                cols,
                data: t.data().to_vec(),
            }),
            ref s => Err(Error::Contract(format!("expected a [1, 3, H, W] tensor, got {s:?}"))),
        }
    }

    pub fn occupancy_mask(&self) -> Vec<bool> {
        let n = self.rows * self.cols;
        self.data[2 * n..].iter().map(|&v| v > 0.0).collect()
    }
}

pub fn normalize_for_net(img: &BevImage) -> NetImage {
    NetImage {
        rows: img.rows,
        cols: img.cols,
        data: img.data.iter().map(|&v| 2.0 * v - 1.0).collect(),
    }
}

/// Inverse of [`normalize_for_net`] that also restores the channel
/// invariants for generated images: values are clamped, occupancy is
/// re-binarized at 0, unoccupied cells are zeroed and occupied cells get at
/// least the single-point density.
pub fn denormalize(net: &NetImage) -> BevImage {
    let n = net.rows * net.cols;
    let mut img = BevImage::zeros(net.rows, net.cols);
    let floor = min_occupied_density();
    for i in 0..n {
        if net.data[2 * n + i] > 0.0 {
            img.data[i] = ((net.data[i] + 1.0) / 2.0).clamp(0.0, 1.0);
            img.data[n + i] = ((net.data[n + i] + 1.0) / 2.0).clamp(floor, 1.0);
            img.data[2 * n + i] = 1.0;
        }
    }
    img
}

fn pixel_to_cell(rows: usize, cols: usize, px: u32, py: u32) -> (usize, usize) {
    (rows - 1 - py as usize, cols - 1 - px as usize)
}

/// RGB preview with forward pointing up and the vehicle's left on the left:
/// red = height, green = density, blue = occupancy.
pub fn bev_to_rgb(img: &BevImage) -> RgbImage {
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    RgbImage::from_fn(img.cols as u32, img.rows as u32, |px, py| {
        let (r, c) = pixel_to_cell(img.rows, img.cols, px, py);
        Rgb([q(img.get(HEIGHT, r, c)), q(img.get(DENSITY, r, c)), q(img.get(OCCUPANCY, r, c))])
    })
}

/// Palette preview in the same orientation as [`bev_to_rgb`].
pub fn semantic_to_rgb(grid: &SemanticGrid) -> RgbImage {
    RgbImage::from_fn(grid.cols as u32, grid.rows as u32, |px, py| {
        let (r, c) = pixel_to_cell(grid.rows, grid.cols, px, py);
        Rgb(SemanticClass::from_id(grid.get(r, c)).map_or([255, 255, 255], |k| k.color()))
    })
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

pub fn render_png(img: &BevImage, path: &Path) -> Result<()> {
    save(&bev_to_rgb(img), path)
}

pub fn render_semantic_png(grid: &SemanticGrid, path: &Path) -> Result<()> {
    save(&semantic_to_rgb(grid), path)
}

/// Images of equal height placed left to right with a 4-pixel white gap.
pub fn render_side_by_side(images: &[RgbImage], path: &Path) -> Result<()> {
    let gap = 4;
    let h = images.iter().map(|i| i.height()).max().unwrap_or(0);
    let w = images.iter().map(|i| i.width()).sum::<u32>() + gap * images.len().saturating_sub(1) as u32;
    let mut out = RgbImage::from_pixel(w.max(1), h.max(1), Rgb([255, 255, 255]));
    let mut x0 = 0;
    for img in images {
        image::imageops::replace(&mut out, img, x0 as i64, 0);
        x0 += img.width() + gap;
    }
    save(&out, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kitti::Point;

    #[test]
    fn default_grid_dimensions() {
        let g = GridSpec::default();
        assert_eq!((g.rows(), g.cols()), (500, 450));
    }

    #[test]
    fn clutter_band() {
        let g = GridSpec::default();
        assert!(g.cell_of(10.0, 0.0, 2.4).is_some());
        assert!(g.cell_of(10.0, 0.0, 2.6).is_none());
        assert!(g.cell_of(10.0, 0.0, -2.6).is_none());
        assert!(g.cell_of(50.0, 0.0, 0.0).is_none());
        assert!(g.cell_of(10.0, 22.5, 0.0).is_none());
    }

    #[test]
    fn point_above_window_saturates_height() {
        let g = GridSpec::default();
        let cloud = PointCloud::new(vec![Point::new(1.0, 1.0, 2.0)], "");
        let img = encode_bev(&cloud, &g).unwrap();
        let (r, c) = (10, 235);
        assert_eq!(img.get(HEIGHT, r, c), 1.0);
    }

    #[test]
    fn density_saturates_at_63_points() {
        assert_eq!(density(63), 1.0);
        assert!(density(62) < 1.0);
        assert_eq!(density(0), 0.0);
    }

    #[test]
    fn denormalize_repairs_generated_values() {
        let net = NetImage {
            rows: 1,
            cols: 2,
            data: vec![0.5, 0.9, -1.0, 3.0, 0.2, -0.3],
        };
        let img = denormalize(&net);
        img.validate().unwrap();
        assert_eq!(img.plane(OCCUPANCY), &[1.0, 0.0]);
        assert_eq!(img.plane(DENSITY)[0], min_occupied_density());
        assert_eq!(img.plane(HEIGHT), &[0.75, 0.0]);
    }

    #[test]
    fn crop_bounds_checked() {
        let img = BevImage::zeros(4, 4);
        assert!(img.crop(2, 2, 3, 1).is_err());
        assert_eq!(img.crop(1, 1, 2, 3).unwrap().data.len(), 18);
    }
}
