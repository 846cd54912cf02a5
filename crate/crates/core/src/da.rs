//! Adversarial, cycle, identity and semantic losses; the replay pool;
//! augmentation; segmenter pre-training and the alternating CycleGAN loop.

use std::fmt::Write as _;
use std::path::Path;

use bevda_grad::container::{self, Record};
use bevda_grad::{Adam, AdamConfig, Float, GradError, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bev::{self, denormalize, normalize_for_net, BevImage, NetImage, SemanticGrid};
use crate::error::{Error, IoContext, Result};
use crate::nets::{
    argmax_classes, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Mode, Segmenter, SegmenterConfig,
};
use crate::palette::{default_class_weights, NUM_CLASSES};
use crate::rng::{stream, Stream};

/// `mean((D(real) - a)^2) + mean(D(fake)^2)`; `a` is the smoothed real
/// target.
pub fn loss_adv_discriminator<T: Float>(g: &mut Graph<T>, d_real: Var, d_fake: Var, a: T) -> Result<Var> {
    let r = g.least_squares_to(d_real, a)?;
    let f = g.least_squares_to(d_fake, T::zero())?;
    Ok(g.add(r, f)?)
}

/// `mean((D_Y(G(x)) - 1)^2) + mean((D_X(F(y)) - 1)^2)`.
pub fn loss_adv_generator<T: Float>(g: &mut Graph<T>, d_y_of_gx: Var, d_x_of_fy: Var) -> Result<Var> {
    let a = g.least_squares_to(d_y_of_gx, T::one())?;
    let b = g.least_squares_to(d_x_of_fy, T::one())?;
    Ok(g.add(a, b)?)
}

/// `mean|F(G(x)) - x| + mean|G(F(y)) - y|`.
pub fn loss_cycle<T: Float>(g: &mut Graph<T>, x: Var, fgx: Var, y: Var, gfy: Var) -> Result<Var> {
    let a = g.l1_loss(fgx, x)?;
    let b = g.l1_loss(gfy, y)?;
    Ok(g.add(a, b)?)
}

/// `mean|G(y) - y| + mean|F(x) - x|`: each generator fed a sample of its
/// own output domain.
pub fn loss_identity<T: Float>(g: &mut Graph<T>, y: Var, gy: Var, x: Var, fx: Var) -> Result<Var> {
    let a = g.l1_loss(gy, y)?;
    let b = g.l1_loss(fx, x)?;
    Ok(g.add(a, b)?)
}

/// Cells occupied in both the source image and its translation (network
/// range, occupancy channel above 0).
pub fn co_occupied<T: Float>(before: &[bool], translated: &Tensor<T>) -> Result<Vec<bool>> {
    let [_, c, h, w] = translated.dims4("co_occupied")?;
    if c != 3 || before.len() != h * w {
        return Err(Error::Contract(format!(
            "mask of {} cells for translated image {:?}",
            before.len(),
            translated.shape()
        )));
    }
    let occ = &translated.data()[2 * h * w..];
    Ok(before.iter().zip(occ).map(|(&b, &o)| b && o > T::zero()).collect())
}

/// One direction of the semantic term: weighted cross-entropy of the
/// segmenter's logits on the translated image against pseudo-labels from
/// the original, over co-occupied cells.
pub fn semantic_term<T: Float>(
    g: &mut Graph<T>,
    logits_translated: Var,
    pseudo_labels: &[u8],
    before_occupied: &[bool],
    translated: Var,
    class_weights: &[T],
) -> Result<Var> {
    let mask = co_occupied(before_occupied, g.value(translated))?;
    let labels: Vec<usize> = pseudo_labels.iter().map(|&l| l as usize).collect();
    Ok(g.weighted_masked_ce(logits_translated, &labels, class_weights, &mask)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub adv: f64,
    pub cyc: f64,
    pub idt: f64,
    pub sem: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cyc: f64,
    pub idt: f64,
    pub sem: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cyc: 10.0,
            idt: 10.0,
            sem: 0.5,
        }
    }
}

/// `L_adv + l_cyc * L_cyc + l_idt * L_idt + l_sem * L_sem`.
pub fn total_generator_loss(w: &LossWeights, c: &LossComponents) -> f64 {
    c.adv + w.cyc * c.cyc + w.idt * c.idt + w.sem * c.sem
}

/// Graph form of [`total_generator_loss`]; terms with zero weight may be
/// absent.
pub fn total_generator_loss_var<T: Float>(
    g: &mut Graph<T>,
    w: &LossWeights,
    adv: Var,
    cyc: Option<Var>,
    idt: Option<Var>,
    sem: Option<Var>,
) -> Result<Var> {
    let mut total = adv;
    for (v, l) in [(cyc, w.cyc), (idt, w.idt), (sem, w.sem)] {
        if let Some(v) = v {
            let s = g.mul_scalar(v, T::lit(l))?;
            total = g.add(total, s)?;
        }
    }
    Ok(total)
}

/// What a full pool does with a query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolDecision {
    ReturnInput,
    Swap(usize),
}

/// Buffer of the last generated images shown to a discriminator.
#[derive(Clone, Debug)]
pub struct ReplayPool<T> {
    capacity: usize,
    images: Vec<T>,
}

impl<T: Clone> ReplayPool<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            images: Vec::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// While filling, stores and returns `img`. Once full, returns `img`
    /// with probability 1/2 and otherwise swaps it with a uniformly chosen
    /// stored image.
    pub fn query<R: Rng + ?Sized>(&mut self, img: T, rng: &mut R) -> T {
        if self.images.len() < self.capacity || self.capacity == 0 {
            return self.query_with(img, PoolDecision::ReturnInput);
        }
        let d = if rng.random_bool(0.5) {
            PoolDecision::ReturnInput
        } else {
            PoolDecision::Swap(rng.random_range(0..self.images.len()))
        };
        self.query_with(img, d)
    }

    /// [`ReplayPool::query`] with the random decision supplied; ignored
    /// while the pool is filling.
    pub fn query_with(&mut self, img: T, decision: PoolDecision) -> T {
        if self.capacity == 0 {
            return img;
        }
        if self.images.len() < self.capacity {
            self.images.push(img.clone());
            return img;
        }
        match decision {
            PoolDecision::ReturnInput => img,
            PoolDecision::Swap(i) => {
                let n = self.images.len();
                std::mem::replace(&mut self.images[i % n], img)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_p: f64,
    /// Probability of applying cell dropout to a sample.
    pub dropout_p: f64,
    /// Fraction of occupied cells emptied when dropout applies.
    pub dropout_rate: f64,
    pub noise_p: f64,
    /// Standard deviation of the noise added to height and density.
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_p: 0.5,
            dropout_p: 0.5,
            dropout_rate: 0.05,
            noise_p: 0.5,
            noise_sigma: 0.02,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip_p: 0.0,
            dropout_p: 0.0,
            dropout_rate: 0.0,
            noise_p: 0.0,
            noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("flip_p", self.flip_p), ("dropout_p", self.dropout_p), ("dropout_rate", self.dropout_rate), ("noise_p", self.noise_p)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("augment.{k} must be in [0, 1]")));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("augment.noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Horizontal flip, occupied-cell dropout and Gaussian noise on occupied
/// cells, each applied with its own probability. The semantic grid, when
/// given, follows the flip and the dropout.
pub fn augment(bev: &mut BevImage, mut sem: Option<&mut SemanticGrid>, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    let flip = rng.random_bool(cfg.flip_p);
    let drop = rng.random_bool(cfg.dropout_p);
    let noise = rng.random_bool(cfg.noise_p);
    if flip {
        *bev = bev.flip();
        if let Some(s) = sem.as_deref_mut() {
            *s = s.flip();
        }
    }
    let n = bev.rows * bev.cols;
    if drop && cfg.dropout_rate > 0.0 {
        for i in 0..n {
            if bev.data[2 * n + i] > 0.0 && rng.random_bool(cfg.dropout_rate) {
                for ch in 0..3 {
                    bev.data[ch * n + i] = 0.0;
                }
                if let Some(s) = sem.as_deref_mut() {
                    s.labels[i] = 0;
                }
            }
        }
    }
    if noise && cfg.noise_sigma > 0.0 {
        let dist = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let floor = bev::min_occupied_density();
        for i in 0..n {
            if bev.data[2 * n + i] > 0.0 {
                let h = bev.data[i] + dist.sample(rng) as f32;
                let d = bev.data[n + i] + dist.sample(rng) as f32;
                bev.data[i] = h.clamp(0.0, 1.0);
                bev.data[n + i] = d.clamp(floor, 1.0);
            }
        }
    }
    Ok(())
}

/// A BEV image and, for the source domain, its per-cell labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub bev: BevImage,
    pub semantic: Option<SemanticGrid>,
}

/// Random `size` x `size` window (the whole image when it is smaller).
fn random_crop(s: &Sample, size: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let (h, w) = (size.min(s.bev.rows), size.min(s.bev.cols));
    if size == 0 || (h == s.bev.rows && w == s.bev.cols) {
        return Ok(s.clone());
    }
    let top = rng.random_range(0..=s.bev.rows - h);
    let left = rng.random_range(0..=s.bev.cols - w);
    Ok(Sample {
        bev: s.bev.crop(top, left, h, w)?,
        semantic: s.semantic.as_ref().map(|g| g.crop(top, left, h, w)).transpose()?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_cyc: f64,
    pub lambda_idt: f64,
    pub lambda_sem: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Range of the smoothed real target.
    pub smoothing: [f64; 2],
    pub class_weights: [f64; NUM_CLASSES],
    pub init_std: f64,
    /// Square training crop; 0 trains on full images.
    pub crop: usize,
    pub pool_capacity: usize,
    /// Stops after this many steps when set.
    pub max_steps: Option<usize>,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_cyc: 10.0,
            lambda_idt: 10.0,
            lambda_sem: 0.5,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.99,
            epochs: 50,
            batch_size: 1,
            smoothing: [0.7, 1.0],
            class_weights: default_class_weights(),
            init_std: 0.02,
            crop: 96,
            pool_capacity: 50,
            max_steps: None,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            cyc: self.lambda_cyc,
            idt: self.lambda_idt,
            sem: self.lambda_sem,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("lambda_cyc", self.lambda_cyc), ("lambda_idt", self.lambda_idt), ("lambda_sem", self.lambda_sem)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("train.{k} must be a finite non-negative number")));
            }
        }
        let [lo, hi] = self.smoothing;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config("train.smoothing must be a sub-range of (0, 1]".into()));
        }
        if self.batch_size != 1 {
            return Err(Error::Config("train.batch_size: only 1 is supported".into()));
        }
        if self.class_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("train.class_weights must be non-negative".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("train.init_std must be positive".into()));
        }
        self.adam().validate().map_err(|e| Error::Config(format!("train: {e}")))?;
        self.augment.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

/// The four translation networks. G maps source to target, F target to
/// source; D_X judges source images and D_Y target images.
pub struct DaModel {
    pub g: Generator<f32>,
    pub f: Generator<f32>,
    pub d_x: Discriminator<f32>,
    pub d_y: Discriminator<f32>,
}

impl DaModel {
    pub fn new(cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, Stream::Init);
        Ok(Self {
            g: Generator::new(cfg.generator.clone(), cfg.init_std, &mut rng)?,
            f: Generator::new(cfg.generator.clone(), cfg.init_std, &mut rng)?,
            d_x: Discriminator::new(cfg.discriminator.clone(), cfg.init_std, &mut rng)?,
            d_y: Discriminator::new(cfg.discriminator.clone(), cfg.init_std, &mut rng)?,
        })
    }

    pub fn to_records(&self) -> Vec<Record> {
        let mut r = self.g.to_records("G/");
        r.extend(self.f.to_records("F/"));
        r.extend(self.d_x.to_records("D_X/"));
        r.extend(self.d_y.to_records("D_Y/"));
        r
    }

    pub fn from_records(records: &[Record]) -> Result<Self> {
        Ok(Self {
            g: Generator::from_records(records, "G/")?,
            f: Generator::from_records(records, "F/")?,
            d_x: Discriminator::from_records(records, "D_X/")?,
            d_y: Discriminator::from_records(records, "D_Y/")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(container::write_file(path, &self.to_records())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_records(&read_checkpoint(path)?)
    }
}

/// Reads a checkpoint, reporting a missing file as an I/O error on `path`.
pub fn read_checkpoint(path: &Path) -> Result<Vec<Record>> {
    if !path.exists() {
        return Err(std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found")).at(path);
    }
    Ok(container::read_file(path)?)
}

/// Loss components of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub epoch: usize,
    pub d_x: f64,
    pub d_y: f64,
    pub adv_gen: f64,
    pub cyc: f64,
    pub idt: f64,
    /// Absent when the semantic term is disabled.
    pub sem: Option<f64>,
    pub total: f64,
}

impl TraceRow {
    fn values(&self) -> [f64; 6] {
        [self.d_x, self.d_y, self.adv_gen, self.cyc, self.idt, self.total]
    }

    fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite()) && self.sem.is_none_or(f64::is_finite)
    }
}

pub const TRACE_HEADER: &str = "step,L_adv_D_X,L_adv_D_Y,L_adv_gen,L_cyc,L_idt,L_sem,L_total";

pub fn format_trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in rows {
        let sem = r.sem.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{},{},{},{}", r.step, r.d_x, r.d_y, r.adv_gen, r.cyc, r.idt, sem, r.total);
    }
    s
}

pub fn write_trace_csv(rows: &[TraceRow], path: &Path) -> Result<()> {
    std::fs::write(path, format_trace_csv(rows)).at(path)
}

/// Per-epoch mean of a trace column.
pub fn epoch_means(rows: &[TraceRow], column: impl Fn(&TraceRow) -> f64) -> Vec<f64> {
    let epochs = rows.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
    let mut sum = vec![0.0; epochs];
    let mut n = vec![0usize; epochs];
    for r in rows {
        sum[r.epoch] += column(r);
        n[r.epoch] += 1;
    }
    sum.iter().zip(&n).filter(|(_, &k)| k > 0).map(|(s, &k)| s / k as f64).collect()
}

fn pseudo_labels(cls: &Segmenter<f32>, x: &Tensor<f32>) -> Result<Vec<u8>> {
    let mut g = Graph::new();
    let p = cls.store.bind(&mut g, false)?;
    let xv = g.constant(x.clone())?;
    let logits = cls.forward(&mut g, &p, xv, &mut Mode::Eval)?;
    argmax_classes(g.value(logits))
}

fn occupancy(x: &Tensor<f32>) -> Vec<bool> {
    let plane = x.shape()[2] * x.shape()[3];
    x.data()[2 * plane..].iter().map(|&v| v > 0.0).collect()
}

fn non_finite(step: usize, what: String) -> Error {
    Error::NonFiniteLoss { step, dump: what }
}

/// Gradients and loss values of one generator update.
pub struct GeneratorPass {
    pub components: LossComponents,
    pub sem_enabled: bool,
    pub total: f64,
    pub grads_g: Vec<Tensor<f32>>,
    pub grads_f: Vec<Tensor<f32>>,
    /// Fresh translations G(x) and F(y) for the replay pools.
    pub gx: Tensor<f32>,
    pub fy: Tensor<f32>,
}

/// Stateful CycleGAN trainer: networks, optimizers, pools and RNG streams.
pub struct DaTrainer<'a> {
    pub cfg: TrainConfig,
    pub model: DaModel,
    cls: Option<&'a Segmenter<f32>>,
    opt_g: Adam<f32>,
    opt_f: Adam<f32>,
    opt_dx: Adam<f32>,
    opt_dy: Adam<f32>,
    pool_x: ReplayPool<Tensor<f32>>,
    pool_y: ReplayPool<Tensor<f32>>,
    rng_dropout: ChaCha8Rng,
    rng_pool: ChaCha8Rng,
    rng_smoothing: ChaCha8Rng,
    step: usize,
}

impl<'a> DaTrainer<'a> {
    /// `cls` is required when `lambda_sem > 0` and never touched otherwise.
    pub fn new(cfg: TrainConfig, cls: Option<&'a Segmenter<f32>>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if cfg.lambda_sem > 0.0 && cls.is_none() {
            return Err(Error::Config("train.lambda_sem > 0 needs a trained segmenter".into()));
        }
        let model = DaModel::new(&cfg, seed)?;
        let adam = cfg.adam();
        Ok(Self {
            cls: if cfg.lambda_sem > 0.0 { cls } else { None },
            model,
            opt_g: Adam::new(adam)?,
            opt_f: Adam::new(adam)?,
            opt_dx: Adam::new(adam)?,
            opt_dy: Adam::new(adam)?,
            pool_x: ReplayPool::new(cfg.pool_capacity),
            pool_y: ReplayPool::new(cfg.pool_capacity),
            rng_dropout: stream(seed, Stream::Dropout),
            rng_pool: stream(seed, Stream::Pool),
            rng_smoothing: stream(seed, Stream::Smoothing),
            step: 0,
            cfg,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Generator losses on fresh translations and the gradients of both
    /// generators; no parameters change.
    pub fn generator_pass(&mut self, x: &Tensor<f32>, y: &Tensor<f32>) -> Result<GeneratorPass> {
        let w = self.cfg.weights();
        let m = &self.model;
        let mut g = Graph::new();
        let pg = m.g.store.bind(&mut g, true)?;
        let pf = m.f.store.bind(&mut g, true)?;
        let pdx = m.d_x.store.bind(&mut g, false)?;
        let pdy = m.d_y.store.bind(&mut g, false)?;
        let xv = g.constant(x.clone())?;
        let yv = g.constant(y.clone())?;
        let mut mode = Mode::Train(&mut self.rng_dropout);

        let gx = m.g.forward(&mut g, &pg, xv, &mut mode)?;
        let fy = m.f.forward(&mut g, &pf, yv, &mut mode)?;
        let dy_gx = m.d_y.forward(&mut g, &pdy, gx)?;
        let dx_fy = m.d_x.forward(&mut g, &pdx, fy)?;
        let adv = loss_adv_generator(&mut g, dy_gx, dx_fy)?;
        let cyc = if w.cyc > 0.0 {
            let fgx = m.f.forward(&mut g, &pf, gx, &mut mode)?;
            let gfy = m.g.forward(&mut g, &pg, fy, &mut mode)?;
            Some(loss_cycle(&mut g, xv, fgx, yv, gfy)?)
        } else {
            None
        };
        let idt = if w.idt > 0.0 {
            let gy = m.g.forward(&mut g, &pg, yv, &mut mode)?;
            let fx = m.f.forward(&mut g, &pf, xv, &mut mode)?;
            Some(loss_identity(&mut g, yv, gy, xv, fx)?)
        } else {
            None
        };
        let sem = match self.cls {
            Some(cls) => {
                let weights: Vec<f32> = self.cfg.class_weights.iter().map(|&v| v as f32).collect();
                let pc = cls.store.bind(&mut g, false)?;
                let lx = pseudo_labels(cls, x)?;
                let ly = pseudo_labels(cls, y)?;
                let logits_gx = cls.forward(&mut g, &pc, gx, &mut Mode::Eval)?;
                let logits_fy = cls.forward(&mut g, &pc, fy, &mut Mode::Eval)?;
                let a = semantic_term(&mut g, logits_gx, &lx, &occupancy(x), gx, &weights)?;
                let b = semantic_term(&mut g, logits_fy, &ly, &occupancy(y), fy, &weights)?;
                Some(g.add(a, b)?)
            }
            None => None,
        };
        let total = total_generator_loss_var(&mut g, &w, adv, cyc, idt, sem)?;
        let scalar = |g: &Graph<f32>, v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0] as f64);
        let components = LossComponents {
            adv: scalar(&g, Some(adv)),
            cyc: scalar(&g, cyc),
            idt: scalar(&g, idt),
            sem: scalar(&g, sem),
        };
        let total_v = scalar(&g, Some(total));
        let mut grads = g.backward(total)?;
        Ok(GeneratorPass {
            components,
            sem_enabled: sem.is_some(),
            total: total_v,
            grads_g: m.g.store.collect_grads(&pg, &mut grads),
            grads_f: m.f.store.collect_grads(&pf, &mut grads),
            gx: g.value(gx).clone(),
            fy: g.value(fy).clone(),
        })
    }

    fn discriminator_update(
        d: &mut Discriminator<f32>,
        opt: &mut Adam<f32>,
        real: &Tensor<f32>,
        fake: Tensor<f32>,
        a: f32,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let p = d.store.bind(&mut g, true)?;
        let rv = g.constant(real.clone())?;
        let fv = g.constant(fake)?;
        let dr = d.forward(&mut g, &p, rv)?;
        let df = d.forward(&mut g, &p, fv)?;
        let loss = loss_adv_discriminator(&mut g, dr, df, a)?;
        let value = g.value(loss).data()[0] as f64;
        let mut grads = g.backward(loss)?;
        let gr = d.store.collect_grads(&p, &mut grads);
        opt.step(&mut d.store, &gr)?;
        Ok(value)
    }

    /// One alternating update: generators on fresh translations, then each
    /// discriminator on a real sample and a pooled fake.
    pub fn step(&mut self, x: &Tensor<f32>, y: &Tensor<f32>, epoch: usize) -> Result<TraceRow> {
        let step = self.step;
        let nf = |e: Error| match e {
            Error::Grad(GradError::NonFinite { op }) => non_finite(step, format!("non-finite value produced by {op}")),
            other => other,
        };
        let pass = self.generator_pass(x, y).map_err(nf)?;
        let c = pass.components;
        if !(pass.total.is_finite()) {
            return Err(non_finite(step, format!("generator losses {c:?}, total {}", pass.total)));
        }
        self.opt_g.step(&mut self.model.g.store, &pass.grads_g)?;
        self.opt_f.step(&mut self.model.f.store, &pass.grads_f)?;

        let fake_y = self.pool_y.query(pass.gx, &mut self.rng_pool);
        let fake_x = self.pool_x.query(pass.fy, &mut self.rng_pool);
        let [lo, hi] = self.cfg.smoothing;
        let mut smooth = || if lo == hi { lo } else { self.rng_smoothing.random_range(lo..=hi) } as f32;
        let (a_x, a_y) = (smooth(), smooth());
        let d_x = Self::discriminator_update(&mut self.model.d_x, &mut self.opt_dx, x, fake_x, a_x).map_err(nf)?;
        let d_y = Self::discriminator_update(&mut self.model.d_y, &mut self.opt_dy, y, fake_y, a_y).map_err(nf)?;
        let row = TraceRow {
            step,
            epoch,
            d_x,
            d_y,
            adv_gen: c.adv,
            cyc: c.cyc,
            idt: c.idt,
            sem: pass.sem_enabled.then_some(c.sem),
            total: pass.total,
        };
        if !row.is_finite() {
            return Err(non_finite(step, format!("{row:?}")));
        }
        self.step += 1;
        Ok(row)
    }
}

pub struct DaOutcome {
    pub model: DaModel,
    pub trace: Vec<TraceRow>,
}

/// Full training loop over unpaired datasets. Each epoch visits every
/// source sample once in shuffled order, paired with a random target
/// sample; both are cropped and augmented.
pub fn train_da(
    source: &[Sample],
    target: &[Sample],
    cls: Option<&Segmenter<f32>>,
    cfg: &TrainConfig,
    seed: u64,
    on_step: &mut dyn FnMut(&TraceRow),
) -> Result<DaOutcome> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Config("train_da needs non-empty source and target sets".into()));
    }
    let mut trainer = DaTrainer::new(cfg.clone(), cls, seed)?;
    let mut rng_order = stream(seed, Stream::Order);
    let mut rng_aug = stream(seed, Stream::Augment);
    let mut trace = Vec::new();
    'outer: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..source.len()).collect();
        order.shuffle(&mut rng_order);
        for i in order {
            if cfg.max_steps.is_some_and(|m| trace.len() >= m) {
                break 'outer;
            }
            let j = rng_order.random_range(0..target.len());
            let mut xs = random_crop(&source[i], cfg.crop, &mut rng_aug)?;
            let mut ys = random_crop(&target[j], cfg.crop, &mut rng_aug)?;
            augment(&mut xs.bev, None, &cfg.augment, &mut rng_aug)?;
            augment(&mut ys.bev, None, &cfg.augment, &mut rng_aug)?;
            let x = normalize_for_net(&xs.bev).to_tensor();
            let y = normalize_for_net(&ys.bev).to_tensor();
            let row = trainer.step(&x, &y, epoch)?;
            on_step(&row);
            trace.push(row);
        }
    }
    Ok(DaOutcome {
        model: trainer.model,
        trace,
    })
}

/// Translates a BEV through `g` in inference mode and restores the BEV
/// invariants. The identity stub returns the image untouched, skipping the
/// lossy `[-1, 1]` round trip.
pub fn adapt(g: &Generator<f32>, img: &BevImage) -> Result<BevImage> {
    if g.cfg.identity {
        img.validate()?;
        return Ok(img.clone());
    }
    let net = normalize_for_net(img);
    let mut graph = Graph::new();
    let p = g.store.bind(&mut graph, false)?;
    let x = graph.constant(net.to_tensor())?;
    let y = g.forward(&mut graph, &p, x, &mut Mode::Eval)?;
    Ok(denormalize(&NetImage::from_tensor(graph.value(y))?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Multiplicative learning-rate factor applied after every epoch.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub crop: usize,
    pub class_weights: [f64; NUM_CLASSES],
    pub max_steps: Option<usize>,
    pub flip_p: f64,
    pub net: SegmenterConfig,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.01,
            lr_decay: 0.99,
            beta1: 0.9,
            beta2: 0.999,
            crop: 96,
            class_weights: default_class_weights(),
            max_steps: None,
            flip_p: 0.5,
            net: SegmenterConfig::default(),
        }
    }
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("segmenter.lr_decay must be in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_p) {
            return Err(Error::Config("segmenter.flip_p must be in [0, 1]".into()));
        }
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
        .validate()
        .map_err(|e| Error::Config(format!("segmenter: {e}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegStep {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

pub struct SegOutcome {
    pub net: Segmenter<f32>,
    pub trace: Vec<SegStep>,
}

/// Weighted cross-entropy plus Lovász-Softmax over the occupied cells of a
/// `[1, 3, H, W]` input.
pub fn segmenter_loss<T: Float>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[u8],
    occupied: &[bool],
    class_weights: &[T],
) -> Result<Var> {
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let ce = g.weighted_masked_ce(logits, &labels, class_weights, occupied)?;
    let probs = g.softmax(logits, 1)?;
    let lv = g.lovasz_softmax_masked(probs, &labels, Some(occupied))?;
    Ok(g.add(ce, lv)?)
}

/// Trains the segmenter on labelled source samples with Adam and a per-epoch
/// exponential learning-rate decay.
pub fn train_segmenter(
    data: &[Sample],
    cfg: &SegTrainConfig,
    seed: u64,
    on_step: &mut dyn FnMut(&SegStep),
) -> Result<SegOutcome> {
    cfg.validate()?;
    if data.is_empty() || data.iter().any(|s| s.semantic.is_none()) {
        return Err(Error::Config("segmenter training needs labelled samples".into()));
    }
    let mut rng_init = stream(seed, Stream::Init);
    let mut net = Segmenter::<f32>::new(cfg.net.clone(), &mut rng_init)?;
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        ..AdamConfig::default()
    })?;
    let weights: Vec<f32> = cfg.class_weights.iter().map(|&w| w as f32).collect();
    let mut rng_order = stream(seed, Stream::Order);
    let mut rng_aug = stream(seed, Stream::Augment);
    let mut rng_drop = stream(seed, Stream::Dropout);
    let flip_only = AugmentConfig {
        flip_p: cfg.flip_p,
        ..AugmentConfig::none()
    };
    let mut trace = Vec::new();
    let mut lr = cfg.lr;
    'outer: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng_order);
        for i in order {
            if cfg.max_steps.is_some_and(|m| trace.len() >= m) {
                break 'outer;
            }
            let mut s = random_crop(&data[i], cfg.crop, &mut rng_aug)?;
            let mut sem = s.semantic.take().expect("checked above");
            augment(&mut s.bev, Some(&mut sem), &flip_only, &mut rng_aug)?;
            let x = normalize_for_net(&s.bev).to_tensor();
            let mut g = Graph::new();
            let p = net.store.bind(&mut g, true)?;
            let xv = g.constant(x)?;
            let logits = net.forward(&mut g, &p, xv, &mut Mode::Train(&mut rng_drop))?;
            let loss = segmenter_loss(&mut g, logits, &sem.labels, &s.bev.occupancy_mask(), &weights)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(non_finite(trace.len(), format!("segmenter loss {value}")));
            }
            let mut grads = g.backward(loss)?;
            let gr = net.store.collect_grads(&p, &mut grads);
            opt.step(&mut net.store, &gr)?;
            let row = SegStep {
                step: trace.len(),
                epoch,
                loss: value,
                lr,
            };
            on_step(&row);
            trace.push(row);
        }
        lr *= cfg.lr_decay;
        opt.set_lr(lr)?;
    }
    Ok(SegOutcome { net, trace })
}

pub const SEGMENTER_PREFIX: &str = "CLS/";

pub fn save_segmenter(net: &Segmenter<f32>, path: &Path) -> Result<()> {
    Ok(container::write_file(path, &net.to_records(SEGMENTER_PREFIX))?)
}

pub fn load_segmenter(path: &Path) -> Result<Segmenter<f32>> {
    Segmenter::from_records(&read_checkpoint(path)?, SEGMENTER_PREFIX)
}

/// Per-cell argmax prediction over a whole image.
pub fn segment(net: &Segmenter<f32>, img: &BevImage) -> Result<SemanticGrid> {
    let labels = pseudo_labels(net, &normalize_for_net(img).to_tensor())?;
    SemanticGrid::new(img.rows, img.cols, labels)
}

/// Fraction of occupied cells whose predicted class matches the label;
/// `None` when no cell is occupied.
pub fn occupied_accuracy(pred: &SemanticGrid, truth: &SemanticGrid) -> Option<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for (&p, &t) in pred.labels.iter().zip(&truth.labels) {
        if t != 0 {
            n += 1;
            hit += (p == t) as usize;
        }
    }
    (n > 0).then(|| hit as f64 / n as f64)
}
