//! Random street layouts, a ray-cast LiDAR and the domain perturber.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{footprint_intersection, Box3D};
use crate::kitti::{Point, PointCloud};
use crate::palette::SemanticClass;
use crate::rng::{stream, Stream};

/// Separation kept between footprints when placing objects.
const PLACEMENT_MARGIN: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Inclusive `[min, max]` object counts per class.
    pub cars: [usize; 2],
    pub pedestrians: [usize; 2],
    pub cyclists: [usize; 2],
    pub buildings: [usize; 2],
    pub poles: [usize; 2],
    pub vegetation: [usize; 2],
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    /// Ground height in the world frame.
    pub ground: f64,
    /// No object footprint center closer than this to the sensor.
    pub sensor_clearance: f64,
    /// Buildings only at |y| at least this large.
    pub building_min_abs_y: f64,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            cars: [3, 8],
            pedestrians: [3, 7],
            cyclists: [2, 5],
            buildings: [2, 6],
            poles: [2, 8],
            vegetation: [2, 6],
            x_range: [3.0, 48.0],
            y_range: [-21.0, 21.0],
            ground: 0.0,
            sensor_clearance: 3.0,
            building_min_abs_y: 12.0,
            max_attempts: 500,
        }
    }
}

impl SceneConfig {
    /// A layout with no objects of any class.
    pub fn empty() -> Self {
        Self {
            cars: [0, 0],
            pedestrians: [0, 0],
            cyclists: [0, 0],
            buildings: [0, 0],
            poles: [0, 0],
            vegetation: [0, 0],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("cars", self.cars),
            ("pedestrians", self.pedestrians),
            ("cyclists", self.cyclists),
            ("buildings", self.buildings),
            ("poles", self.poles),
            ("vegetation", self.vegetation),
        ];
        for (name, [lo, hi]) in ranges {
            if lo > hi {
                return Err(Error::Config(format!("scene.{name}: min {lo} exceeds max {hi}")));
            }
        }
        if !(self.x_range[0] < self.x_range[1]) || !(self.y_range[0] < self.y_range[1]) {
            return Err(Error::Config("scene bounds must be increasing intervals".into()));
        }
        if !self.ground.is_finite() || self.sensor_clearance < 0.0 || self.max_attempts == 0 {
            return Err(Error::Config("scene.ground, sensor_clearance or max_attempts invalid".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub ground: f64,
    /// Movable agents (cars, pedestrians, cyclists).
    pub objects: Vec<Box3D>,
    /// Buildings, poles and vegetation.
    pub statics: Vec<Box3D>,
}

impl Scene {
    pub fn boxes(&self) -> impl Iterator<Item = &Box3D> {
        self.objects.iter().chain(&self.statics)
    }

    pub fn count(&self, class: SemanticClass) -> usize {
        self.boxes().filter(|b| b.class_id == class.id()).count()
    }
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn size_prior(class: SemanticClass, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mut s = |l, w, h| [uniform(rng, l), uniform(rng, w), uniform(rng, h)];
    match class {
        SemanticClass::Car => s([3.9, 4.6], [1.6, 1.9], [1.4, 1.6]),
        SemanticClass::Pedestrian => s([0.5, 0.7], [0.5, 0.7], [1.6, 1.9]),
        SemanticClass::Cyclist => s([1.6, 1.9], [0.5, 0.7], [1.6, 1.8]),
        SemanticClass::Pole => {
            let d = uniform(rng, [0.2, 0.3]);
            [d, d, uniform(rng, [3.0, 6.0])]
        }
        SemanticClass::Vegetation => s([1.0, 3.0], [1.0, 3.0], [0.5, 2.5]),
        SemanticClass::Building => s([6.0, 14.0], [5.0, 10.0], [4.0, 9.0]),
        SemanticClass::Empty | SemanticClass::Ground => [1.0, 1.0, 1.0],
    }
}

fn fits(candidate: &Box3D, placed: &[Box3D], cfg: &SceneConfig) -> bool {
    let c = candidate.center;
    if c[0].hypot(c[1]) < cfg.sensor_clearance {
        return false;
    }
    let grown = candidate.inflated(PLACEMENT_MARGIN);
    placed.iter().all(|p| footprint_intersection(&grown, p) <= 0.0)
}

fn place(
    class: SemanticClass,
    cfg: &SceneConfig,
    placed: &mut Vec<Box3D>,
    rng: &mut ChaCha8Rng,
) -> Result<Box3D> {
    for _ in 0..cfg.max_attempts {
        let size = size_prior(class, rng);
        let (x, y, yaw) = if class == SemanticClass::Building {
            let lo = cfg.building_min_abs_y.max(0.0);
            let hi = cfg.y_range[1].max(-cfg.y_range[0]);
            if lo >= hi {
                break;
            }
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let y = side * uniform(rng, [lo, hi]);
            (uniform(rng, cfg.x_range), y, uniform(rng, [-0.1, 0.1]))
        } else {
            (uniform(rng, cfg.x_range), uniform(rng, cfg.y_range), uniform(rng, [-PI, PI]))
        };
        if !(cfg.y_range[0]..=cfg.y_range[1]).contains(&y) {
            continue;
        }
        let b = Box3D::new([x, y, cfg.ground + size[2] / 2.0], size, yaw, class.id());
        if fits(&b, placed, cfg) {
            placed.push(b);
            return Ok(b);
        }
    }
    Err(Error::Placement {
        class: class.name(),
        attempts: cfg.max_attempts,
    })
}

/// Draws a layout. Large static structures are placed first so that agents
/// fill the remaining free space.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = stream(seed, Stream::Scene);
    let order = [
        (SemanticClass::Building, cfg.buildings),
        (SemanticClass::Vegetation, cfg.vegetation),
        (SemanticClass::Pole, cfg.poles),
        (SemanticClass::Car, cfg.cars),
        (SemanticClass::Pedestrian, cfg.pedestrians),
        (SemanticClass::Cyclist, cfg.cyclists),
    ];
    let counts: Vec<usize> = order.iter().map(|(_, [lo, hi])| rng.random_range(*lo..=*hi)).collect();
    let mut placed = Vec::new();
    let mut scene = Scene {
        ground: cfg.ground,
        objects: Vec::new(),
        statics: Vec::new(),
    };
    for ((class, _), n) in order.iter().zip(counts) {
        for _ in 0..n {
            let b = place(*class, cfg, &mut placed, &mut rng)?;
            if class.is_of_interest() {
                scene.objects.push(b);
            } else {
                scene.statics.push(b);
            }
        }
    }
    Ok(scene)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidarModel {
    pub beam_count: usize,
    /// (min, max) elevation in degrees.
    pub vertical_fov: [f64; 2],
    pub horizontal_resolution: f64,
    pub max_range: f64,
    pub origin_height: f64,
    /// Uniform per-ray azimuth jitter in degrees, drawn from the raycast seed.
    pub azimuth_jitter_deg: f64,
}

impl Default for LidarModel {
    fn default() -> Self {
        Self {
            beam_count: 64,
            vertical_fov: [-24.8, 2.0],
            horizontal_resolution: 0.2,
            max_range: 120.0,
            origin_height: 1.73,
            azimuth_jitter_deg: 0.0,
        }
    }
}

impl LidarModel {
    pub fn validate(&self) -> Result<()> {
        if self.beam_count == 0 {
            return Err(Error::Config("lidar.beam_count must be at least 1".into()));
        }
        if !(self.max_range > 0.0) {
            return Err(Error::Config("lidar.max_range must be positive".into()));
        }
        if !(self.horizontal_resolution > 0.0) || self.horizontal_resolution > 360.0 {
            return Err(Error::Config("lidar.horizontal_resolution must be in (0, 360]".into()));
        }
        if self.vertical_fov[0] > self.vertical_fov[1] || self.vertical_fov.iter().any(|e| e.abs() >= 90.0) {
            return Err(Error::Config("lidar.vertical_fov must be an increasing range inside (-90, 90)".into()));
        }
        if self.azimuth_jitter_deg < 0.0 || !self.origin_height.is_finite() {
            return Err(Error::Config("lidar.azimuth_jitter_deg or origin_height invalid".into()));
        }
        Ok(())
    }

    /// Beam elevations in degrees, evenly spaced from the lower FOV bound.
    pub fn elevations(&self) -> Vec<f64> {
        let [lo, hi] = self.vertical_fov;
        if self.beam_count == 1 {
            return vec![lo];
        }
        let step = (hi - lo) / (self.beam_count - 1) as f64;
        (0..self.beam_count).map(|i| lo + step * i as f64).collect()
    }

    pub fn azimuth_steps(&self) -> usize {
        (360.0 / self.horizontal_resolution).round().max(1.0) as usize
    }
}

/// Ray parameter of the nearest intersection with the box, if any.
fn ray_box(o: [f64; 3], d: [f64; 3], b: &Box3D) -> Option<f64> {
    let lo = b.to_local(o);
    let (s, c) = b.yaw.sin_cos();
    let ld = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for k in 0..3 {
        let half = b.size[k] / 2.0;
        if ld[k].abs() < 1e-15 {
            if lo[k].abs() > half {
                return None;
            }
            continue;
        }
        let a = (-half - lo[k]) / ld[k];
        let bb = (half - lo[k]) / ld[k];
        t0 = t0.max(a.min(bb));
        t1 = t1.min(a.max(bb));
        if t0 > t1 {
            return None;
        }
    }
    (t0 > 0.0).then_some(t0)
}

/// One ray per (beam, azimuth step), beam-major. Points and returned boxes
/// are in the sensor frame: origin at the sensor, ground at `-origin_height`.
pub fn raycast_lidar(scene: &Scene, model: &LidarModel, seed: u64) -> Result<(PointCloud, Vec<Box3D>)> {
    model.validate()?;
    let mut rng = stream(seed, Stream::Raycast);
    let sensor_z = scene.ground + model.origin_height;
    let origin = [0.0, 0.0, sensor_z];
    let boxes: Vec<&Box3D> = scene.boxes().collect();
    let mut hit_count = vec![0usize; boxes.len()];
    let mut points = Vec::new();
    let steps = model.azimuth_steps();
    for elev in model.elevations() {
        let (se, ce) = elev.to_radians().sin_cos();
        for j in 0..steps {
            let mut az = j as f64 * model.horizontal_resolution;
            if model.azimuth_jitter_deg > 0.0 {
                az += rng.random_range(-model.azimuth_jitter_deg..=model.azimuth_jitter_deg);
            }
            let (sa, ca) = az.to_radians().sin_cos();
            let d = [ce * ca, ce * sa, se];
            let mut best = (model.max_range, None::<usize>, false);
            if d[2] < 0.0 {
                let t = (scene.ground - sensor_z) / d[2];
                if t <= best.0 {
                    best = (t, None, true);
                }
            }
            for (k, b) in boxes.iter().enumerate() {
                if let Some(t) = ray_box(origin, d, b) {
                    if t <= best.0 {
                        best = (t, Some(k), true);
                    }
                }
            }
            let (t, which, hit) = best;
            if !hit {
                continue;
            }
            let class = match which {
                Some(k) => {
                    hit_count[k] += 1;
                    boxes[k].class_id
                }
                None => SemanticClass::Ground.id(),
            };
            let mut z = t * d[2];
            if which.is_none() {
                z = scene.ground - sensor_z;
            }
            points.push(Point::tagged(t * d[0], t * d[1], z, class));
        }
    }
    let labels = boxes
        .iter()
        .zip(&hit_count)
        .filter(|(b, &n)| n > 0 && SemanticClass::from_id(b.class_id).is_some_and(|c| c.is_of_interest()))
        .map(|(b, _)| Box3D {
            center: [b.center[0], b.center[1], b.center[2] - sensor_z],
            ..**b
        })
        .collect();
    Ok((PointCloud::new(points, String::new()), labels))
}

/// Shifts a world-frame box into the sensor frame of `model`.
pub fn to_sensor_frame(b: &Box3D, scene: &Scene, model: &LidarModel) -> Box3D {
    Box3D {
        center: [b.center[0], b.center[1], b.center[2] - scene.ground - model.origin_height],
        ..*b
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbConfig {
    pub point_dropout_p: f64,
    pub z_noise_sigma: f64,
    pub range_noise_sigma: f64,
    /// (count, radius in meters) of circular holes punched into the cloud.
    pub patch_dropout: (usize, f64),
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            point_dropout_p: 0.2,
            z_noise_sigma: 0.08,
            range_noise_sigma: 0.03,
            patch_dropout: (3, 1.5),
        }
    }
}

impl PerturbConfig {
    pub fn identity() -> Self {
        Self {
            point_dropout_p: 0.0,
            z_noise_sigma: 0.0,
            range_noise_sigma: 0.0,
            patch_dropout: (0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.point_dropout_p) {
            return Err(Error::Config("perturb.point_dropout_p must be in [0, 1]".into()));
        }
        if !(self.z_noise_sigma >= 0.0) || !(self.range_noise_sigma >= 0.0) || !(self.patch_dropout.1 >= 0.0) {
            return Err(Error::Config("perturb sigmas and patch radius must be non-negative".into()));
        }
        Ok(())
    }
}

/// Makes a pseudo-real cloud: patch holes, independent point dropout, then
/// Gaussian height and radial range jitter on the survivors.
pub fn perturb_domain(cloud: &PointCloud, cfg: &PerturbConfig, seed: u64) -> Result<PointCloud> {
    cfg.validate()?;
    let mut rng = stream(seed, Stream::Perturb);
    let (count, radius) = cfg.patch_dropout;
    let centers: Vec<[f64; 2]> = if cloud.is_empty() || radius == 0.0 {
        Vec::new()
    } else {
        (0..count)
            .map(|_| {
                let p = cloud.points[rng.random_range(0..cloud.len())];
                [p.x, p.y]
            })
            .collect()
    };
    let drop = Bernoulli::new(cfg.point_dropout_p).map_err(|e| Error::Config(e.to_string()))?;
    let z_noise = Normal::new(0.0, cfg.z_noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let r_noise = Normal::new(0.0, cfg.range_noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let r2 = radius * radius;
    let mut out = Vec::with_capacity(cloud.len());
    for p in &cloud.points {
        if drop.sample(&mut rng) {
            continue;
        }
        if centers.iter().any(|c| (p.x - c[0]).powi(2) + (p.y - c[1]).powi(2) <= r2) {
            continue;
        }
        let mut q = *p;
        if cfg.range_noise_sigma > 0.0 {
            let r = (q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
            if r > 0.0 {
                let s = (r + r_noise.sample(&mut rng)).max(0.0) / r;
                q.x *= s;
                q.y *= s;
                q.z *= s;
            }
        }
        if cfg.z_noise_sigma > 0.0 {
            q.z += z_noise.sample(&mut rng);
        }
        out.push(q);
    }
    Ok(PointCloud::new(out, cloud.frame_id.clone()))
}
