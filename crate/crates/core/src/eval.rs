//! Rotated IoU, KITTI-style average precision and semantic preservation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bev::BevImage;
use crate::da::segment;
use crate::error::{Error, IoContext, Result};
use crate::geometry::{footprint_intersection, Box3D};
use crate::kitti::{parse_label_file, Category, ObjectLabel};
use crate::nets::Segmenter;
use crate::palette::SemanticClass;

/// IoU of the yaw-rotated footprints.
pub fn rotated_iou_bev(a: &Box3D, b: &Box3D) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let inter = footprint_intersection(a, b);
    let union = a.footprint_area() + b.footprint_area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// IoU of the boxes as prisms: footprint intersection times vertical
/// overlap, over the union of volumes.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let dz = (a.top().min(b.top()) - a.bottom().max(b.bottom())).max(0.0);
    if dz == 0.0 {
        return Ok(0.0);
    }
    let inter = footprint_intersection(a, b) * dz;
    let union = a.volume() + b.volume() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouKind {
    Bev,
    #[serde(rename = "3d")]
    ThreeD,
}

impl IouKind {
    pub fn iou(self, a: &Box3D, b: &Box3D) -> Result<f64> {
        match self {
            IouKind::Bev => rotated_iou_bev(a, b),
            IouKind::ThreeD => iou_3d(a, b),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            IouKind::Bev => "BEV",
            IouKind::ThreeD => "3D",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    /// Recall points 1/40, 2/40, ..., 1.
    #[default]
    #[serde(rename = "40")]
    Forty,
    /// Recall points 0, 0.1, ..., 1.
    #[serde(rename = "11")]
    Eleven,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    pub score: f64,
}

/// Outcome of matching one frame's detections to its ground truths.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    /// (detection index, ground-truth index, IoU)
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_detections: Vec<usize>,
    pub unmatched_ground_truths: Vec<usize>,
}

/// Descending score; ties keep input order.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Greedy matching: detections in descending score each take the
/// still-unmatched ground truth of highest IoU, if that IoU reaches
/// `threshold`.
pub fn match_frame(dets: &[Detection], gts: &[Box3D], threshold: f64, kind: IouKind) -> Result<MatchResult> {
    let mut taken = vec![false; gts.len()];
    let mut out = MatchResult::default();
    for i in score_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let iou = kind.iou(&dets[i].bbox, gt)?;
            if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, iou)) => {
                taken[j] = true;
                out.pairs.push((i, j, iou));
            }
            None => out.unmatched_detections.push(i),
        }
    }
    out.unmatched_ground_truths = (0..gts.len()).filter(|&j| !taken[j]).collect();
    Ok(out)
}

/// Detections and ground truths of one class in one frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameBoxes {
    pub detections: Vec<Detection>,
    pub ground_truths: Vec<Box3D>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    /// Precision and recall after each detection in global score order.
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub num_gt: usize,
    pub num_det: usize,
    pub true_positives: usize,
}

/// Interpolated area under a precision/recall staircase.
pub fn interpolated_ap(precision: &[f64], recall: &[f64], interp: Interpolation) -> f64 {
    let points: Vec<f64> = match interp {
        Interpolation::Forty => (1..=40).map(|i| i as f64 / 40.0).collect(),
        Interpolation::Eleven => (0..=10).map(|i| i as f64 / 10.0).collect(),
    };
    let n = points.len() as f64;
    points
        .iter()
        .map(|&r| {
            precision
                .iter()
                .zip(recall)
                .filter(|(_, &rc)| rc >= r - 1e-12)
                .map(|(&p, _)| p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / n
}

/// Matches every frame, ranks all detections by score and integrates the
/// resulting precision/recall curve. `None` when there is no ground truth.
pub fn match_and_ap(frames: &[FrameBoxes], threshold: f64, kind: IouKind, interp: Interpolation) -> Result<Option<ApResult>> {
    let num_gt: usize = frames.iter().map(|f| f.ground_truths.len()).sum();
    if num_gt == 0 {
        return Ok(None);
    }
    // (score, frame, detection index, is true positive)
    let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (fi, f) in frames.iter().enumerate() {
        let m = match_frame(&f.detections, &f.ground_truths, threshold, kind)?;
        ranked.extend(m.pairs.iter().map(|&(d, _, _)| (f.detections[d].score, fi, d, true)));
        ranked.extend(m.unmatched_detections.iter().map(|&d| (f.detections[d].score, fi, d, false)));
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut tp, mut precision, mut recall) = (0usize, Vec::new(), Vec::new());
    for (k, r) in ranked.iter().enumerate() {
        tp += r.3 as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    Ok(Some(ApResult {
        ap: interpolated_ap(&precision, &recall, interp),
        num_gt,
        num_det: ranked.len(),
        true_positives: tp,
        precision,
        recall,
    }))
}

/// Per-class IoU thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub car: f64,
    pub pedestrian: f64,
    pub cyclist: f64,
    pub interpolation: Interpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            car: 0.5,
            pedestrian: 0.3,
            cyclist: 0.3,
            interpolation: Interpolation::Forty,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("car", self.car), ("pedestrian", self.pedestrian), ("cyclist", self.cyclist)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("eval.{k} threshold must be in (0, 1]")));
            }
        }
        Ok(())
    }

    pub fn threshold(&self, c: &Category) -> Option<f64> {
        match c {
            Category::Car => Some(self.car),
            Category::Pedestrian => Some(self.pedestrian),
            Category::Cyclist => Some(self.cyclist),
            Category::Other(_) => None,
        }
    }
}

pub const EVAL_CATEGORIES: [Category; 3] = [Category::Car, Category::Pedestrian, Category::Cyclist];

/// Labels of one frame: ground truth and detections (which carry scores).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameLabels {
    pub ground_truth: Vec<ObjectLabel>,
    pub detections: Vec<ObjectLabel>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub category: Category,
    pub kind: IouKind,
    pub threshold: f64,
    pub result: Option<ApResult>,
}

fn frame_boxes(frames: &[FrameLabels], cat: &Category) -> Result<Vec<FrameBoxes>> {
    frames
        .iter()
        .map(|f| {
            let detections = f
                .detections
                .iter()
                .filter(|l| &l.category == cat)
                .map(|l| {
                    let score = l.score.ok_or_else(|| Error::Contract("detection without score".into()))?;
                    Ok(Detection {
                        bbox: l.to_box3d(),
                        score,
                    })
                })
                .collect::<Result<_>>()?;
            let ground_truths = f.ground_truth.iter().filter(|l| &l.category == cat).map(ObjectLabel::to_box3d).collect();
            Ok(FrameBoxes {
                detections,
                ground_truths,
            })
        })
        .collect()
}

/// BEV and 3-D AP for Car, Pedestrian and Cyclist.
pub fn evaluate(frames: &[FrameLabels], cfg: &EvalConfig) -> Result<Vec<ReportRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for cat in EVAL_CATEGORIES {
        let t = cfg.threshold(&cat).expect("evaluated categories have thresholds");
        let boxes = frame_boxes(frames, &cat)?;
        for kind in [IouKind::Bev, IouKind::ThreeD] {
            rows.push(ReportRow {
                category: cat.clone(),
                kind,
                threshold: t,
                result: match_and_ap(&boxes, t, kind, cfg.interpolation)?,
            });
        }
    }
    Ok(rows)
}

/// Pairs `*.txt` label files of two directories by file stem. A frame
/// missing on the detection side has no detections.
pub fn load_frames(det_dir: &Path, gt_dir: &Path) -> Result<BTreeMap<String, FrameLabels>> {
    let mut frames: BTreeMap<String, FrameLabels> = BTreeMap::new();
    for (dir, is_gt) in [(gt_dir, true), (det_dir, false)] {
        for entry in std::fs::read_dir(dir).at(dir)? {
            let path = entry.at(dir)?.path();
            if path.extension().is_none_or(|e| e != "txt") {
                continue;
            }
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let labels = parse_label_file(&path)?;
            let f = frames.entry(stem).or_default();
            if is_gt {
                f.ground_truth = labels;
            } else {
                if let Some(l) = labels.iter().find(|l| l.score.is_none()) {
                    return Err(Error::MalformedFile {
                        path: path.clone(),
                        reason: format!("{} detection without score", l.category.as_str()),
                    });
                }
                f.detections = labels;
            }
        }
    }
    Ok(frames)
}

fn fmt_ap(r: &Option<ApResult>) -> String {
    r.as_ref().map(|r| format!("{:.4}", r.ap)).unwrap_or_default()
}

pub const REPORT_HEADER: &str = "class,task,iou_threshold,ap,num_gt,num_det,true_positives";

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in rows {
        let (g, d, tp) = r.result.as_ref().map_or((0, 0, 0), |a| (a.num_gt, a.num_det, a.true_positives));
        let ap = r.result.as_ref().map(|a| a.ap.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.category.as_str(), r.kind.name(), r.threshold, ap, g, d, tp);
    }
    s
}

/// Table with one row per class and BEV / 3D AP columns; absent values
/// (no ground truth) are blank.
pub fn report_table(rows: &[ReportRow]) -> String {
    let mut s = format!("{:<12} {:>8} {:>8}\n", "Class", "BEV AP", "3D AP");
    for cat in EVAL_CATEGORIES {
        let get = |k| rows.iter().find(|r| r.category == cat && r.kind == k).map(|r| fmt_ap(&r.result)).unwrap_or_default();
        let _ = writeln!(s, "{:<12} {:>8} {:>8}", cat.as_str(), get(IouKind::Bev), get(IouKind::ThreeD));
    }
    s
}

/// Agreement counts for one image pair, poolable across images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Preservation {
    pub agree: usize,
    pub total: usize,
}

impl Preservation {
    pub fn score(&self) -> Option<f64> {
        (self.total > 0).then(|| self.agree as f64 / self.total as f64)
    }

    pub fn merge(self, o: Self) -> Self {
        Self {
            agree: self.agree + o.agree,
            total: self.total + o.total,
        }
    }
}

/// Counts cells occupied in both images whose source prediction is in
/// `classes`, and how many keep that prediction after translation.
pub fn preservation_counts(
    pred_x: &[u8],
    pred_gx: &[u8],
    occ_x: &[bool],
    occ_gx: &[bool],
    classes: &[SemanticClass],
) -> Result<Preservation> {
    let n = pred_x.len();
    if pred_gx.len() != n || occ_x.len() != n || occ_gx.len() != n {
        return Err(Error::Contract("preservation inputs differ in size".into()));
    }
    let ids: Vec<u8> = classes.iter().map(|c| c.id()).collect();
    let mut p = Preservation::default();
    for i in 0..n {
        if occ_x[i] && occ_gx[i] && ids.contains(&pred_x[i]) {
            p.total += 1;
            p.agree += (pred_x[i] == pred_gx[i]) as usize;
        }
    }
    Ok(p)
}

/// Fraction of co-occupied cells predicted as one of `classes` in `x` whose
/// prediction survives in `gx`; `None` when no cell qualifies.
pub fn semantic_preservation_score(
    cls: &Segmenter<f32>,
    x: &BevImage,
    gx: &BevImage,
    classes: &[SemanticClass],
) -> Result<Option<f64>> {
    Ok(preservation(cls, x, gx, classes)?.score())
}

pub fn preservation(cls: &Segmenter<f32>, x: &BevImage, gx: &BevImage, classes: &[SemanticClass]) -> Result<Preservation> {
    if (x.rows, x.cols) != (gx.rows, gx.cols) {
        return Err(Error::Contract("preservation images differ in size".into()));
    }
    let px = segment(cls, x)?;
    let pg = segment(cls, gx)?;
    preservation_counts(&px.labels, &pg.labels, &x.occupancy_mask(), &gx.occupancy_mask(), classes)
}
