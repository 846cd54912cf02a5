#![allow(dead_code)]

use std::collections::HashMap;

use bevda_core::bev::{BevImage, GridSpec};
use bevda_core::kitti::{Point, PointCloud};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Groups points by cell and recomputes the three channels per group.
pub fn brute_force_bev(cloud: &PointCloud, g: &GridSpec) -> BevImage {
    let (rows, cols) = (g.rows(), g.cols());
    let mut cells: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
    for p in &cloud.points {
        let in_x = p.x >= g.x_range[0] && p.x < g.x_range[1];
        let in_y = p.y >= g.y_range[0] && p.y < g.y_range[1];
        let in_z = p.z >= g.z_range[0] && p.z <= g.z_range[1] + g.clutter_margin;
        if !(in_x && in_y && in_z) {
            continue;
        }
        let r = ((p.x - g.x_range[0]) / g.cell_size).floor() as usize;
        let c = ((p.y - g.y_range[0]) / g.cell_size).floor() as usize;
        if r < rows && c < cols {
            cells.entry((r, c)).or_default().push(p.z);
        }
    }
    let mut img = BevImage::zeros(rows, cols);
    let n = rows * cols;
    for ((r, c), zs) in cells {
        let i = r * cols + c;
        let top = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let h = (top - g.z_range[0]) / (g.z_range[1] - g.z_range[0]);
        img.data[i] = h.clamp(0.0, 1.0) as f32;
        img.data[n + i] = ((1.0 + zs.len() as f64).ln() / 64f64.ln()).min(1.0) as f32;
        img.data[2 * n + i] = 1.0;
    }
    img
}

/// Points spread over and slightly beyond the grid, with clustered
/// duplicates so many cells hold several points.
pub fn random_cloud(rng: &mut ChaCha8Rng, g: &GridSpec, n: usize) -> PointCloud {
    let mut pts = Vec::with_capacity(n);
    while pts.len() < n {
        let x = rng.random_range(g.x_range[0] - 2.0..g.x_range[1] + 2.0);
        let y = rng.random_range(g.y_range[0] - 2.0..g.y_range[1] + 2.0);
        let z = rng.random_range(g.z_range[0] - 0.5..g.z_range[1] + g.clutter_margin + 0.5);
        let burst = rng.random_range(1..6usize);
        for _ in 0..burst.min(n - pts.len()) {
            let dx = rng.random_range(-0.05..0.05);
            let dy = rng.random_range(-0.05..0.05);
            pts.push(Point::new(x + dx, y + dy, z + rng.random_range(-0.3..0.3)));
        }
    }
    PointCloud::new(pts, "random")
}

use bevda_core::eval::{Detection, FrameBoxes};
use bevda_core::geometry::Box3D;

/// Monte-Carlo BEV IoU: uniform samples over the joint bounding rectangle,
/// classified by point-in-rectangle tests.
pub fn monte_carlo_iou(a: &Box3D, b: &Box3D, samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let corners: Vec<[f64; 2]> = a.footprint().into_iter().chain(b.footprint()).collect();
    let lo = |k: usize| corners.iter().map(|c| c[k]).fold(f64::INFINITY, f64::min);
    let hi = |k: usize| corners.iter().map(|c| c[k]).fold(f64::NEG_INFINITY, f64::max);
    let (x0, x1, y0, y1) = (lo(0), hi(0), lo(1), hi(1));
    let inside = |bx: &Box3D, p: [f64; 2]| {
        let (s, c) = bx.yaw.sin_cos();
        let (dx, dy) = (p[0] - bx.center[0], p[1] - bx.center[1]);
        (c * dx + s * dy).abs() <= bx.size[0] / 2.0 && (-s * dx + c * dy).abs() <= bx.size[1] / 2.0
    };
    let (mut both, mut either) = (0usize, 0usize);
    for _ in 0..samples {
        let p = [rng.random_range(x0..x1), rng.random_range(y0..y1)];
        let (ia, ib) = (inside(a, p), inside(b, p));
        both += (ia && ib) as usize;
        either += (ia || ib) as usize;
    }
    both as f64 / either as f64
}

pub fn random_box(rng: &mut ChaCha8Rng) -> Box3D {
    Box3D::new(
        [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-0.5..0.5)],
        [rng.random_range(0.5..4.0), rng.random_range(0.5..3.0), rng.random_range(0.5..2.0)],
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        5,
    )
}

/// Unit-footprint box shifted `dx` along x; its BEV IoU with the box at the
/// origin is (1 - dx) / (1 + dx).
pub fn unit_box(dx: f64) -> Box3D {
    Box3D::new([dx, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0, 5)
}

pub fn det(b: Box3D, score: f64) -> Detection {
    Detection { bbox: b, score }
}

/// A crafted detection set with its hand-computed precision/recall
/// staircase and interpolated APs.
pub struct ApScenario {
    pub name: &'static str,
    pub threshold: f64,
    pub frames: Vec<FrameBoxes>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub ap40: f64,
    pub ap11: f64,
}

pub fn ap_scenarios() -> Vec<ApScenario> {
    let far = |k: f64| Box3D::new([100.0 + 10.0 * k, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0, 5);
    // IoU 0.4 sits between the pedestrian/cyclist and car thresholds.
    let iou_04 = unit_box(0.6 / 1.4);
    vec![
        ApScenario {
            name: "one detection on one ground truth",
            threshold: 0.5,
            frames: vec![FrameBoxes { detections: vec![det(unit_box(0.0), 0.9)], ground_truths: vec![unit_box(0.0)] }],
            precision: vec![1.0],
            recall: vec![1.0],
            ap40: 1.0,
            ap11: 1.0,
        },
        ApScenario {
            name: "no detections",
            threshold: 0.5,
            frames: vec![FrameBoxes { detections: vec![], ground_truths: vec![unit_box(0.0), far(0.0)] }],
            precision: vec![],
            recall: vec![],
            ap40: 0.0,
            ap11: 0.0,
        },
        ApScenario {
            name: "TP 0.9, FP 0.8, TP 0.7 over two ground truths",
            threshold: 0.5,
            frames: vec![FrameBoxes {
                detections: vec![det(far(1.0), 0.7), det(unit_box(0.0), 0.9), det(far(5.0), 0.8)],
                ground_truths: vec![unit_box(0.0), far(1.0)],
            }],
            precision: vec![1.0, 0.5, 2.0 / 3.0],
            recall: vec![0.5, 0.5, 1.0],
            // 20 recall points at precision 1, 20 at 2/3.
            ap40: (20.0 + 20.0 * 2.0 / 3.0) / 40.0,
            // r = 0..0.5 at 1, r = 0.6..1 at 2/3.
            ap11: (6.0 + 5.0 * 2.0 / 3.0) / 11.0,
        },
        ApScenario {
            name: "duplicate detection of one object",
            threshold: 0.5,
            frames: vec![FrameBoxes {
                detections: vec![det(unit_box(0.0), 0.9), det(unit_box(0.1), 0.8)],
                ground_truths: vec![unit_box(0.0)],
            }],
            precision: vec![1.0, 0.5],
            recall: vec![1.0, 1.0],
            ap40: 1.0,
            ap11: 1.0,
        },
        ApScenario {
            name: "IoU 0.4 at the pedestrian/cyclist threshold 0.3",
            threshold: 0.3,
            frames: vec![FrameBoxes { detections: vec![det(iou_04, 0.6)], ground_truths: vec![unit_box(0.0)] }],
            precision: vec![1.0],
            recall: vec![1.0],
            ap40: 1.0,
            ap11: 1.0,
        },
        ApScenario {
            name: "IoU 0.4 at the car threshold 0.5",
            threshold: 0.5,
            frames: vec![FrameBoxes { detections: vec![det(iou_04, 0.6)], ground_truths: vec![unit_box(0.0)] }],
            precision: vec![0.0],
            recall: vec![0.0],
            ap40: 0.0,
            ap11: 0.0,
        },
        ApScenario {
            name: "scores ranked across two frames",
            threshold: 0.3,
            frames: vec![
                FrameBoxes {
                    detections: vec![det(unit_box(0.0), 0.95), det(far(3.0), 0.6)],
                    ground_truths: vec![unit_box(0.0), far(0.0)],
                },
                FrameBoxes { detections: vec![det(unit_box(0.1), 0.7)], ground_truths: vec![unit_box(0.0)] },
            ],
            precision: vec![1.0, 1.0, 2.0 / 3.0],
            recall: vec![1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0],
            // Recall 2/3 covers k/40 for k = 1..26 and k/10 for k = 0..6.
            ap40: 26.0 / 40.0,
            ap11: 7.0 / 11.0,
        },
    ]
}

use bevda_core::bev::{encode_bev, semantic_grid};
use bevda_core::da::Sample;
use bevda_core::rng::derive_seed;
use bevda_core::scene::{generate_scene, perturb_domain, raycast_lidar, LidarModel, PerturbConfig, SceneConfig};

/// 64 x 64 grid of 0.4 m cells in front of the sensor.
pub fn coarse_grid() -> GridSpec {
    GridSpec {
        cell_size: 0.4,
        x_range: [0.0, 25.6],
        y_range: [-12.8, 12.8],
        ..GridSpec::default()
    }
}

/// Labelled source sample and its perturbed, unlabelled counterpart for
/// scene `index` of the run seeded with `seed`.
pub fn simulated_pair(seed: u64, index: u64, grid: &GridSpec, lidar: &LidarModel) -> (Sample, Sample) {
    let s = derive_seed(seed, index);
    let scene = generate_scene(&SceneConfig::default(), s).unwrap();
    let (cloud, _) = raycast_lidar(&scene, lidar, s).unwrap();
    let source = Sample {
        bev: encode_bev(&cloud, grid).unwrap(),
        semantic: Some(semantic_grid(&cloud, grid).unwrap()),
    };
    let real = perturb_domain(&cloud, &PerturbConfig::default(), s).unwrap();
    let target = Sample {
        bev: encode_bev(&real, grid).unwrap(),
        semantic: None,
    };
    (source, target)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
