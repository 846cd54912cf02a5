use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bevda_core::bev::{bev_to_rgb, encode_bev, render_png, render_semantic_png, render_side_by_side, semantic_grid};
use bevda_core::config::ExperimentConfig;
use bevda_core::da::{self, load_segmenter, read_checkpoint, save_segmenter, Sample};
use bevda_core::dataset::{self, frame_name, list_frames, read_frame, write_frame, Frame};
use bevda_core::eval::{self, Interpolation, Preservation};
use bevda_core::kitti::{Category, ObjectLabel};
use bevda_core::nets::Generator;
use bevda_core::palette::SemanticClass;
use bevda_core::rng::derive_seed;
use bevda_core::scene::{generate_scene, perturb_domain, raycast_lidar};
use log::info;

use crate::manifest::{hash_outputs, sha256_hex, Manifest};
use crate::Points;

struct Run {
    command: &'static str,
    config_sha256: Option<String>,
    seed: Option<u64>,
    arguments: BTreeMap<String, String>,
}

impl Run {
    fn new(command: &'static str, cfg: Option<&ExperimentConfig>) -> Self {
        Self {
            command,
            config_sha256: cfg.map(|c| sha256_hex(c.to_toml().as_bytes())),
            seed: cfg.map(|c| c.seed),
            arguments: BTreeMap::new(),
        }
    }

    fn arg(mut self, key: &str, value: impl ToString) -> Self {
        self.arguments.insert(key.to_string(), value.to_string());
        self
    }

    fn path(self, key: &str, p: &Path) -> Self {
        self.arg(key, p.display())
    }

    fn finish(self, out: &Path) -> Result<()> {
        Manifest {
            command: self.command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            container_version: bevda_grad::container::VERSION as u32,
            config_sha256: self.config_sha256,
            seed: self.seed,
            arguments: self.arguments,
            outputs: hash_outputs(out)?,
        }
        .write(out)?;
        info!("{}: wrote {}", self.command, out.display());
        Ok(())
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig::load(path)?)
}

fn make_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn frames_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let frames = list_frames(dir)?;
    if frames.is_empty() {
        bail!("{}: no frame directories", dir.display());
    }
    Ok(frames)
}

fn dir_name(p: &Path) -> &std::ffi::OsStr {
    p.file_name().expect("frame directories have names")
}

pub fn init_config(seed: u64, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::with_seed(seed);
    fs::write(out, cfg.to_toml()).with_context(|| format!("writing {}", out.display()))
}

pub fn simulate(config: &Path, n: usize, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let out = out.unwrap_or_else(|| cfg.output_dir.join("source"));
    make_dir(&out)?;
    for i in 0..n {
        let seed = derive_seed(cfg.seed, i as u64);
        let scene = generate_scene(&cfg.scene, seed)?;
        let (mut cloud, boxes) = raycast_lidar(&scene, &cfg.lidar, seed)?;
        cloud.frame_id = frame_name(i);
        let labels = boxes
            .iter()
            .filter_map(|b| {
                let cat = SemanticClass::from_id(b.class_id).and_then(Category::from_semantic)?;
                Some(ObjectLabel::from_box3d(b, cat, None))
            })
            .collect();
        write_frame(&out.join(frame_name(i)), &Frame { cloud, labels })?;
    }
    info!("simulated {n} frames");
    Run::new("simulate", Some(&cfg)).arg("n", n).finish(&out)
}

pub fn perturb(config: &Path, input: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let out = out.unwrap_or_else(|| cfg.output_dir.join("target"));
    let frames = frames_in(input)?;
    make_dir(&out)?;
    for (i, dir) in frames.iter().enumerate() {
        let mut frame = read_frame(dir)?;
        frame.cloud = perturb_domain(&frame.cloud, &cfg.perturb, derive_seed(cfg.seed, i as u64))?;
        write_frame(&out.join(dir_name(dir)), &frame)?;
    }
    info!("perturbed {} frames", frames.len());
    Run::new("perturb", Some(&cfg)).path("input", input).finish(&out)
}

pub fn encode(config: &Path, input: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let out = out.unwrap_or_else(|| input.to_path_buf());
    let frames = frames_in(input)?;
    for dir in &frames {
        let frame = read_frame(dir)?;
        let bev = encode_bev(&frame.cloud, &cfg.grid)?;
        let tagged = frame.cloud.points.iter().all(|p| p.class_id.is_some());
        let semantic = if tagged { Some(semantic_grid(&frame.cloud, &cfg.grid)?) } else { None };
        let dst = out.join(dir_name(dir));
        let sample = Sample { bev, semantic };
        dataset::write_sample(&dst, &sample)?;
        render_png(&sample.bev, &dst.join(dataset::BEV_PNG))?;
        if let Some(g) = &sample.semantic {
            render_semantic_png(g, &dst.join(dataset::SEMANTIC_PNG))?;
        }
        let labels = dir.join(dataset::LABELS_FILE);
        if dst != *dir && labels.exists() {
            fs::copy(&labels, dst.join(dataset::LABELS_FILE)).with_context(|| format!("copying {}", labels.display()))?;
        }
    }
    info!("encoded {} frames", frames.len());
    Run::new("encode", Some(&cfg)).path("input", input).finish(&out)
}

pub fn train_cls(config: &Path, data: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let out = out.unwrap_or_else(|| cfg.output_dir.join("cls"));
    let samples = dataset::load_samples(data)?;
    let outcome = da::train_segmenter(&samples, &cfg.segmenter, cfg.seed, &mut |s| {
        if s.step % 50 == 0 {
            info!("segmenter step {} epoch {} loss {:.4}", s.step, s.epoch, s.loss);
        }
    })?;
    make_dir(&out)?;
    save_segmenter(&outcome.net, &out.join("cls.ckpt"))?;
    let mut csv = String::from("step,epoch,loss,lr\n");
    for s in &outcome.trace {
        csv.push_str(&format!("{},{},{},{}\n", s.step, s.epoch, s.loss, s.lr));
    }
    fs::write(out.join("cls_trace.csv"), csv)?;
    Run::new("train-cls", Some(&cfg)).path("data", data).finish(&out)
}

pub fn train_da(config: &Path, source: &Path, target: &Path, cls: Option<&Path>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let out = out.unwrap_or_else(|| cfg.output_dir.join("da"));
    let cls_net = cls.map(load_segmenter).transpose()?;
    let src = dataset::load_samples(source)?;
    let tgt = dataset::load_samples(target)?;
    let outcome = da::train_da(&src, &tgt, cls_net.as_ref(), &cfg.train, cfg.seed, &mut |r| {
        if r.step % 50 == 0 {
            info!("step {} epoch {} cyc {:.4} total {:.4}", r.step, r.epoch, r.cyc, r.total);
        }
    })?;
    make_dir(&out)?;
    outcome.model.save(&out.join("da.ckpt"))?;
    da::write_trace_csv(&outcome.trace, &out.join("trace.csv"))?;
    let mut run = Run::new("train-da", Some(&cfg)).path("source", source).path("target", target);
    if let Some(c) = cls {
        run = run.path("cls", c);
    }
    run.finish(&out)
}

fn load_generator(checkpoint: &Path) -> Result<Generator<f32>> {
    Ok(Generator::from_records(&read_checkpoint(checkpoint)?, "G/")?)
}

pub fn adapt(checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let g = load_generator(checkpoint)?;
    let frames = frames_in(input)?;
    for dir in &frames {
        let s = dataset::read_sample(dir)?;
        let gx = da::adapt(&g, &s.bev)?;
        let dst = out.join(dir_name(dir));
        render_side_by_side(&[bev_to_rgb(&s.bev), bev_to_rgb(&gx)], &dst_png(&dst, "side_by_side.png")?)?;
        render_png(&gx, &dst.join(dataset::BEV_PNG))?;
        dataset::write_sample(&dst, &Sample { bev: gx, semantic: s.semantic })?;
    }
    info!("adapted {} frames", frames.len());
    Run::new("adapt", None).path("checkpoint", checkpoint).path("input", input).finish(out)
}

fn dst_png(dir: &Path, name: &str) -> Result<PathBuf> {
    make_dir(dir)?;
    Ok(dir.join(name))
}

pub struct Thresholds {
    pub car: Option<f64>,
    pub pedestrian: Option<f64>,
    pub cyclist: Option<f64>,
    pub interpolation: Option<Points>,
}

pub fn eval(det: &Path, gt: &Path, config: Option<&Path>, t: Thresholds, out: Option<PathBuf>) -> Result<()> {
    let cfg = config.map(load_config).transpose()?;
    let mut ec = cfg.as_ref().map(|c| c.eval.clone()).unwrap_or_default();
    ec.car = t.car.unwrap_or(ec.car);
    ec.pedestrian = t.pedestrian.unwrap_or(ec.pedestrian);
    ec.cyclist = t.cyclist.unwrap_or(ec.cyclist);
    if let Some(p) = t.interpolation {
        ec.interpolation = match p {
            Points::Forty => Interpolation::Forty,
            Points::Eleven => Interpolation::Eleven,
        };
    }
    let frames: Vec<_> = eval::load_frames(det, gt)?.into_values().collect();
    let rows = eval::evaluate(&frames, &ec)?;
    print!("{}", eval::report_table(&rows));
    if let Some(out) = out {
        make_dir(&out)?;
        fs::write(out.join("report.csv"), eval::report_csv(&rows))?;
        Run::new("eval", cfg.as_ref())
            .path("det", det)
            .path("gt", gt)
            .arg("thresholds", format!("{},{},{}", ec.car, ec.pedestrian, ec.cyclist))
            .arg("interpolation", format!("{:?}", ec.interpolation))
            .finish(&out)?;
    }
    Ok(())
}

pub fn consistency(checkpoint: &Path, cls: &Path, data: &Path, out: Option<PathBuf>) -> Result<()> {
    let g = load_generator(checkpoint)?;
    let net = load_segmenter(cls)?;
    let groups: [(&str, &[SemanticClass]); 4] = [
        ("Car", &[SemanticClass::Car]),
        ("Pedestrian", &[SemanticClass::Pedestrian]),
        ("Cyclist", &[SemanticClass::Cyclist]),
        ("Pedestrian+Cyclist", &[SemanticClass::Pedestrian, SemanticClass::Cyclist]),
    ];
    let mut totals = [Preservation::default(); 4];
    let frames = frames_in(data)?;
    for dir in &frames {
        let s = dataset::read_sample(dir)?;
        let gx = da::adapt(&g, &s.bev)?;
        let px = da::segment(&net, &s.bev)?;
        let pg = da::segment(&net, &gx)?;
        let (ox, og) = (s.bev.occupancy_mask(), gx.occupancy_mask());
        for (t, (_, classes)) in totals.iter_mut().zip(&groups) {
            *t = t.merge(eval::preservation_counts(&px.labels, &pg.labels, &ox, &og, classes)?);
        }
    }
    let mut csv = String::from("classes,agree,total,score\n");
    for ((name, _), p) in groups.iter().zip(&totals) {
        let score = p.score().map(|s| s.to_string()).unwrap_or_default();
        csv.push_str(&format!("{name},{},{},{score}\n", p.agree, p.total));
    }
    print!("{csv}");
    if let Some(out) = out {
        make_dir(&out)?;
        fs::write(out.join("consistency.csv"), &csv)?;
        Run::new("consistency", None)
            .path("checkpoint", checkpoint)
            .path("cls", cls)
            .path("data", data)
            .finish(&out)?;
    }
    Ok(())
}
