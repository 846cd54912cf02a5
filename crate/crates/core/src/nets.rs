//! Generator, PatchGAN discriminator and segmenter built on `bevda_grad`.

use bevda_grad::container::Record;
use bevda_grad::{Bound, ConvSpec, Float, Graph, Init, ParamId, ParamStore, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::palette::NUM_CLASSES;

const LRELU: f64 = 0.2;

/// Training mode draws dropout masks from the given stream.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    fn dropout<T: Float>(&mut self, g: &mut Graph<T>, x: Var, p: f64) -> Result<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train(rng) => Ok(g.dropout(x, p, rng.random())?),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    spec: ConvSpec,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Float>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: ConvSpec,
        bias: bool,
        std: f64,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), &[cout, cin, k, k], Init::Normal { std }, rng)?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), &[cout], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Self { w, b, spec })
    }

    fn apply<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.conv2d(x, p.var(self.w), self.b.map(|b| p.var(b)), self.spec)?)
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvT {
    w: ParamId,
}

impl ConvT {
    fn new<T: Float>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, std: f64) -> Result<Self> {
        let w = store.add(format!("{name}.w"), &[cin, cout, 3, 3], Init::Normal { std }, rng)?;
        Ok(Self { w })
    }

    /// Doubles the spatial size (kernel 3, stride 2, pad 1, output pad 1).
    fn apply<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.conv_transpose2d(x, p.var(self.w), None, 2, 1, 1)?)
    }
}

fn norm_relu<T: Float>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let n = g.instance_norm(x)?;
    Ok(g.relu(n)?)
}

fn norm_lrelu<T: Float>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let n = g.instance_norm(x)?;
    Ok(g.leaky_relu(n, T::lit(LRELU))?)
}

/// Pads the two spatial dims up to multiples of `m` with `value`; returns
/// the padded var and the original size.
fn pad_to_multiple<T: Float>(g: &mut Graph<T>, x: Var, m: usize, value: f64) -> Result<(Var, usize, usize)> {
    let s = g.shape(x);
    if s.len() != 4 {
        return Err(Error::Contract(format!("expected an NCHW input, got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    let (ph, pw) = ((m - h % m) % m, (m - w % m) % m);
    if ph == 0 && pw == 0 {
        return Ok((x, h, w));
    }
    Ok((g.pad2d(x, 0, ph, 0, pw, T::lit(value))?, h, w))
}

fn crop_back<T: Float>(g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x);
    if s[2] == h && s[3] == w {
        return Ok(x);
    }
    Ok(g.crop2d(x, 0, 0, h, w)?)
}

fn meta_record(name: &str, values: &[f64]) -> Record {
    Record {
        name: name.to_string(),
        shape: vec![values.len()],
        data: values.iter().map(|&v| v as f32).collect(),
    }
}

fn read_meta(records: &[Record], name: &str, len: usize) -> Result<Vec<f64>> {
    let r = records
        .iter()
        .find(|r| r.name == name)
        .ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")))?;
    if r.data.len() != len {
        return Err(Error::Config(format!("{name}: expected {len} values, found {}", r.data.len())));
    }
    Ok(r.data.iter().map(|&v| v as f64).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub base_width: usize,
    pub residual_blocks: usize,
    pub dropout: f64,
    /// Parameter-free pass-through used as a test stub.
    pub identity: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_width: 16,
            residual_blocks: 9,
            dropout: 0.5,
            identity: false,
        }
    }
}

/// ResNet image translator: 7x7 stem, two stride-2 downsampling convs,
/// residual blocks, two fractional-stride upsampling convs and a 7x7 tanh
/// head.
pub struct Generator<T> {
    pub cfg: GeneratorConfig,
    pub store: ParamStore<T>,
    stem: Option<Conv>,
    down: Vec<Conv>,
    blocks: Vec<[Conv; 2]>,
    up: Vec<ConvT>,
    head: Option<Conv>,
}

impl<T: Float> Generator<T> {
    pub fn new(cfg: GeneratorConfig, std: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Config(format!("generator dropout {} outside [0, 1)", cfg.dropout)));
        }
        let mut store = ParamStore::new();
        let mut net = Self {
            cfg: cfg.clone(),
            store: ParamStore::new(),
            stem: None,
            down: Vec::new(),
            blocks: Vec::new(),
            up: Vec::new(),
            head: None,
        };
        if cfg.identity {
            return Ok(net);
        }
        if cfg.base_width == 0 {
            return Err(Error::Config("generator base_width must be positive".into()));
        }
        let b = cfg.base_width;
        net.stem = Some(Conv::new(&mut store, rng, "stem", 3, b, 7, ConvSpec::new(1, 3), false, std)?);
        net.down = vec![
            Conv::new(&mut store, rng, "down0", b, 2 * b, 3, ConvSpec::new(2, 1), false, std)?,
            Conv::new(&mut store, rng, "down1", 2 * b, 4 * b, 3, ConvSpec::new(2, 1), false, std)?,
        ];
        for i in 0..cfg.residual_blocks {
            net.blocks.push([
                Conv::new(&mut store, rng, &format!("res{i}.a"), 4 * b, 4 * b, 3, ConvSpec::new(1, 1), false, std)?,
                Conv::new(&mut store, rng, &format!("res{i}.b"), 4 * b, 4 * b, 3, ConvSpec::new(1, 1), false, std)?,
            ]);
        }
        net.up = vec![
            ConvT::new(&mut store, rng, "up0", 4 * b, 2 * b, std)?,
            ConvT::new(&mut store, rng, "up1", 2 * b, b, std)?,
        ];
        net.head = Some(Conv::new(&mut store, rng, "head", b, 3, 7, ConvSpec::new(1, 3), true, std)?);
        net.store = store;
        Ok(net)
    }

    pub fn identity() -> Self {
        let cfg = GeneratorConfig {
            identity: true,
            ..GeneratorConfig::default()
        };
        Self::new(cfg, 0.02, &mut crate::rng::stream(0, crate::rng::Stream::Init)).expect("identity generator")
    }

    /// Maps `[N, 3, H, W]` in network range to the same shape. Spatial dims
    /// are padded with -1 (empty) to a multiple of 4 and cropped back.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var, mode: &mut Mode) -> Result<Var> {
        if self.cfg.identity {
            return Ok(x);
        }
        let (mut h, oh, ow) = pad_to_multiple(g, x, 4, -1.0)?;
        h = self.stem.expect("built").apply(g, p, h)?;
        h = norm_relu(g, h)?;
        for c in &self.down {
            h = c.apply(g, p, h)?;
            h = norm_relu(g, h)?;
        }
        for [a, b] in &self.blocks {
            let mut r = a.apply(g, p, h)?;
            r = norm_relu(g, r)?;
            r = mode.dropout(g, r, self.cfg.dropout)?;
            r = b.apply(g, p, r)?;
            r = g.instance_norm(r)?;
            h = g.add(h, r)?;
        }
        for u in &self.up {
            h = u.apply(g, p, h)?;
            h = norm_relu(g, h)?;
        }
        h = self.head.expect("built").apply(g, p, h)?;
        h = g.tanh(h)?;
        crop_back(g, h, oh, ow)
    }

    pub fn to_records(&self, prefix: &str) -> Vec<Record> {
        let c = &self.cfg;
        let mut r = vec![meta_record(
            &format!("{prefix}meta"),
            &[c.base_width as f64, c.residual_blocks as f64, c.dropout, c.identity as u8 as f64],
        )];
        r.extend(self.store.to_records(prefix));
        r
    }

    pub fn from_records(records: &[Record], prefix: &str) -> Result<Self> {
        let m = read_meta(records, &format!("{prefix}meta"), 4)?;
        let cfg = GeneratorConfig {
            base_width: m[0] as usize,
            residual_blocks: m[1] as usize,
            dropout: m[2],
            identity: m[3] != 0.0,
        };
        let mut net = Self::new(cfg, 0.02, &mut crate::rng::stream(0, crate::rng::Stream::Init))?;
        net.store.load_records(records, prefix)?;
        Ok(net)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub base_width: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { base_width: 16 }
    }
}

/// PatchGAN: four kernel-4 blocks with strides 2, 2, 2, 1 (instance norm on
/// all but the first, LeakyReLU 0.2), then a kernel-4 stride-1 conv to one
/// channel.
pub struct Discriminator<T> {
    pub cfg: DiscriminatorConfig,
    pub store: ParamStore<T>,
    blocks: Vec<Conv>,
    head: Conv,
}

pub const DISCRIMINATOR_STRIDES: [usize; 4] = [2, 2, 2, 1];

impl<T: Float> Discriminator<T> {
    pub fn new(cfg: DiscriminatorConfig, std: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.base_width == 0 {
            return Err(Error::Config("discriminator base_width must be positive".into()));
        }
        let mut store = ParamStore::new();
        let b = cfg.base_width;
        let widths = [3, b, 2 * b, 4 * b, 8 * b];
        let mut blocks = Vec::new();
        for (i, &s) in DISCRIMINATOR_STRIDES.iter().enumerate() {
            // The first block keeps its bias because no normalization follows it.
            blocks.push(Conv::new(&mut store, rng, &format!("block{i}"), widths[i], widths[i + 1], 4, ConvSpec::new(s, 1), i == 0, std)?);
        }
        let head = Conv::new(&mut store, rng, "head", 8 * b, 1, 4, ConvSpec::new(1, 1), true, std)?;
        Ok(Self { cfg, store, blocks, head })
    }

    /// Kernel and stride of every layer from input to output.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut l: Vec<(usize, usize)> = DISCRIMINATOR_STRIDES.iter().map(|&s| (4, s)).collect();
        l.push((4, 1));
        l
    }

    /// Input pixels seen by one output unit.
    pub fn receptive_field(&self) -> usize {
        receptive_field(&self.layers())
    }

    /// Patch map `[N, 1, h, w]` of realness scores.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, c) in self.blocks.iter().enumerate() {
            h = c.apply(g, p, h)?;
            h = if i == 0 {
                g.leaky_relu(h, T::lit(LRELU))?
            } else {
                norm_lrelu(g, h)?
            };
        }
        self.head.apply(g, p, h)
    }

    pub fn to_records(&self, prefix: &str) -> Vec<Record> {
        let mut r = vec![meta_record(&format!("{prefix}meta"), &[self.cfg.base_width as f64])];
        r.extend(self.store.to_records(prefix));
        r
    }

    pub fn from_records(records: &[Record], prefix: &str) -> Result<Self> {
        let m = read_meta(records, &format!("{prefix}meta"), 1)?;
        let cfg = DiscriminatorConfig { base_width: m[0] as usize };
        let mut net = Self::new(cfg, 0.02, &mut crate::rng::stream(0, crate::rng::Stream::Init))?;
        net.store.load_records(records, prefix)?;
        Ok(net)
    }
}

/// Receptive field of a chain of `(kernel, stride)` layers.
pub fn receptive_field(layers: &[(usize, usize)]) -> usize {
    layers.iter().rev().fold(1, |rf, &(k, s)| (rf - 1) * s + k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmenterConfig {
    pub base_width: usize,
    pub dropout: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            base_width: 8,
            dropout: 0.2,
        }
    }
}

struct ContextBlock {
    shortcut: Conv,
    a: Conv,
    b: Conv,
}

struct EncoderBlock {
    shortcut: Conv,
    a: Conv,
    b: Conv,
    down: Option<Conv>,
}

struct DecoderBlock {
    a: Conv,
    b: Conv,
}

/// Encoder-decoder segmenter: three residual context blocks, residual
/// encoder blocks with stride-2 downsampling, pixel-shuffle decoder blocks
/// concatenating the matching encoder features, and a 1x1 class head.
pub struct Segmenter<T> {
    pub cfg: SegmenterConfig,
    pub store: ParamStore<T>,
    context: Vec<ContextBlock>,
    encoder: Vec<EncoderBlock>,
    decoder: Vec<DecoderBlock>,
    head: Conv,
}

/// Spatial dims must be a multiple of this.
const SEG_STRIDE: usize = 8;

impl<T: Float> Segmenter<T> {
    pub fn new(cfg: SegmenterConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let b = cfg.base_width;
        if b == 0 || b % 2 != 0 {
            return Err(Error::Config("segmenter base_width must be a positive even number".into()));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Config(format!("segmenter dropout {} outside [0, 1)", cfg.dropout)));
        }
        let mut st = ParamStore::new();
        let he = |cin: usize, k: usize| (2.0 / (cin * k * k) as f64).sqrt();
        let s1 = ConvSpec::new(1, 1);
        let mut context = Vec::new();
        let mut cin = 3;
        for i in 0..3 {
            context.push(ContextBlock {
                shortcut: Conv::new(&mut st, rng, &format!("ctx{i}.s"), cin, b, 1, ConvSpec::new(1, 0), true, he(cin, 1))?,
                a: Conv::new(&mut st, rng, &format!("ctx{i}.a"), b, b, 3, s1, false, he(b, 3))?,
                b: Conv::new(&mut st, rng, &format!("ctx{i}.b"), b, b, 3, ConvSpec::new(1, 2).dilated(2), false, he(b, 3))?,
            });
            cin = b;
        }
        // (in, out, downsample)
        let enc = [(b, 2 * b, true), (2 * b, 4 * b, true), (4 * b, 4 * b, true), (4 * b, 4 * b, false)];
        let mut encoder = Vec::new();
        for (i, &(ci, co, down)) in enc.iter().enumerate() {
            encoder.push(EncoderBlock {
                shortcut: Conv::new(&mut st, rng, &format!("enc{i}.s"), ci, co, 1, ConvSpec::new(1, 0), true, he(ci, 1))?,
                a: Conv::new(&mut st, rng, &format!("enc{i}.a"), ci, co, 3, s1, false, he(ci, 3))?,
                b: Conv::new(&mut st, rng, &format!("enc{i}.b"), co, co, 3, ConvSpec::new(1, 2).dilated(2), false, he(co, 3))?,
                down: if down {
                    Some(Conv::new(&mut st, rng, &format!("enc{i}.down"), co, co, 3, ConvSpec::new(2, 1), false, he(co, 3))?)
                } else {
                    None
                },
            });
        }
        // Input channels: shuffled (prev / 4) + skip.
        let dec = [(4 * b / 4 + 4 * b, 4 * b), (4 * b / 4 + 4 * b, 2 * b), (2 * b / 4 + 2 * b, b)];
        let mut decoder = Vec::new();
        for (i, &(ci, co)) in dec.iter().enumerate() {
            decoder.push(DecoderBlock {
                a: Conv::new(&mut st, rng, &format!("dec{i}.a"), ci, co, 3, s1, false, he(ci, 3))?,
                b: Conv::new(&mut st, rng, &format!("dec{i}.b"), co, co, 3, s1, false, he(co, 3))?,
            });
        }
        let head = Conv::new(&mut st, rng, "head", b, NUM_CLASSES, 1, ConvSpec::new(1, 0), true, he(b, 1))?;
        Ok(Self {
            cfg,
            store: st,
            context,
            encoder,
            decoder,
            head,
        })
    }

    /// Per-cell class logits `[N, 8, H, W]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var, mode: &mut Mode) -> Result<Var> {
        let (x, oh, ow) = pad_to_multiple(g, x, SEG_STRIDE, -1.0)?;
        let alpha = T::lit(LRELU);
        let mut h = x;
        for blk in &self.context {
            let s = blk.shortcut.apply(g, p, h)?;
            let s = g.leaky_relu(s, alpha)?;
            let mut r = blk.a.apply(g, p, s)?;
            r = norm_lrelu(g, r)?;
            r = blk.b.apply(g, p, r)?;
            r = norm_lrelu(g, r)?;
            h = g.add(s, r)?;
        }
        let mut skips = Vec::new();
        for blk in &self.encoder {
            let s = blk.shortcut.apply(g, p, h)?;
            let mut r = blk.a.apply(g, p, h)?;
            r = norm_lrelu(g, r)?;
            r = blk.b.apply(g, p, r)?;
            r = norm_lrelu(g, r)?;
            h = g.add(s, r)?;
            if let Some(d) = &blk.down {
                h = mode.dropout(g, h, self.cfg.dropout)?;
                skips.push(h);
                h = d.apply(g, p, h)?;
                h = norm_lrelu(g, h)?;
            }
        }
        for blk in &self.decoder {
            let up = g.pixel_shuffle(h, 2)?;
            let skip = skips.pop().expect("one skip per decoder block");
            let cat = g.concat(&[up, skip], 1)?;
            let mut r = blk.a.apply(g, p, cat)?;
            r = norm_lrelu(g, r)?;
            r = blk.b.apply(g, p, r)?;
            h = norm_lrelu(g, r)?;
        }
        let logits = self.head.apply(g, p, h)?;
        crop_back(g, logits, oh, ow)
    }

    pub fn to_records(&self, prefix: &str) -> Vec<Record> {
        let mut r = vec![meta_record(&format!("{prefix}meta"), &[self.cfg.base_width as f64, self.cfg.dropout])];
        r.extend(self.store.to_records(prefix));
        r
    }

    pub fn from_records(records: &[Record], prefix: &str) -> Result<Self> {
        let m = read_meta(records, &format!("{prefix}meta"), 2)?;
        let cfg = SegmenterConfig {
            base_width: m[0] as usize,
            dropout: m[1],
        };
        let mut net = Self::new(cfg, &mut crate::rng::stream(0, crate::rng::Stream::Init))?;
        net.store.load_records(records, prefix)?;
        Ok(net)
    }
}

/// Row-major argmax over the class axis of a `[1, C, H, W]` logit tensor.
pub fn argmax_classes<T: Float>(logits: &bevda_grad::Tensor<T>) -> Result<Vec<u8>> {
    let [n, c, h, w] = logits.dims4("argmax")?;
    if n != 1 {
        return Err(Error::Contract(format!("argmax expects batch 1, got {n}")));
    }
    let plane = h * w;
    let d = logits.data();
    Ok((0..plane)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if d[k * plane + i] > d[best * plane + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect())
}
