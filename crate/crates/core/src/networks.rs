//! Generator and discriminator networks, their parameters and checkpoints.
//!
//! The generator maps a `(floating, reference)` channel pair to a two-channel
//! displacement field bounded by `tanh * max_disp`; the registered image is
//! always the warp of the floating image by that field. The discriminator
//! maps a `(candidate, reference)` pair to a probability.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure_same_dims, Error, Result};
use crate::imaging::{warp, BorderPolicy, DeformationField, Image};
use crate::nn::{self, Backward, Graph, Mode, ParamBlock, Recorder, RunningStats, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_MOMENTUM: f64 = 0.1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"RGPT";
const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorArch {
    pub channels: usize,
    pub blocks: usize,
    /// Number of stride-2 stages before the residual trunk (0 to 2); the
    /// field is upsampled back by `2^down`.
    pub down: usize,
    pub width: usize,
    pub height: usize,
    pub max_disp: f64,
}

impl GeneratorArch {
    pub fn desk(width: usize, height: usize) -> Self {
        GeneratorArch {
            channels: 32,
            blocks: 4,
            down: 2,
            width,
            height,
            max_disp: 10.0,
        }
    }

    pub fn paper(width: usize, height: usize) -> Self {
        GeneratorArch {
            channels: 64,
            blocks: 4,
            down: 0,
            width,
            height,
            max_disp: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 8 {
            return Err(Error::InvalidArgument(format!(
                "generator needs >= 8 channels, got {}",
                self.channels
            )));
        }
        if self.blocks < 1 {
            return Err(Error::InvalidArgument(
                "generator needs at least one residual block".into(),
            ));
        }
        if self.down > 2 {
            return Err(Error::InvalidArgument(format!(
                "down must be 0, 1 or 2, got {}",
                self.down
            )));
        }
        let unit = 1 << self.down;
        if self.width < 2 * unit
            || self.height < 2 * unit
            || self.width % unit != 0
            || self.height % unit != 0
        {
            return Err(Error::InvalidArgument(format!(
                "{}x{} input is not divisible by {unit}",
                self.width, self.height
            )));
        }
        if !(self.max_disp.is_finite() && self.max_disp > 0.0) {
            return Err(Error::InvalidArgument("max_disp must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiscriminatorArch {
    /// Width of the first convolution; later layers use 1,1,2,2,4,4,8,8 times it.
    pub channels: usize,
    pub width: usize,
    pub height: usize,
}

impl DiscriminatorArch {
    pub fn desk(width: usize, height: usize) -> Self {
        DiscriminatorArch {
            channels: 8,
            width,
            height,
        }
    }

    pub fn paper(width: usize, height: usize) -> Self {
        DiscriminatorArch {
            channels: 64,
            width,
            height,
        }
    }

    pub fn conv_channels(&self) -> [usize; 8] {
        let c = self.channels;
        [c, c, 2 * c, 2 * c, 4 * c, 4 * c, 8 * c, 8 * c]
    }

    pub fn strides() -> [usize; 8] {
        [1, 2, 1, 2, 1, 2, 1, 2]
    }

    pub fn hidden(&self) -> usize {
        16 * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 1 {
            return Err(Error::InvalidArgument(
                "discriminator needs at least one channel".into(),
            ));
        }
        if self.width < 16 || self.height < 16 || self.width % 16 != 0 || self.height % 16 != 0 {
            return Err(Error::InvalidArgument(format!(
                "discriminator input {}x{} must be a multiple of 16",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Architecture {
    Generator(GeneratorArch),
    Discriminator(DiscriminatorArch),
}

impl Architecture {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            Architecture::Generator(g) => (g.width, g.height),
            Architecture::Discriminator(d) => (d.width, d.height),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Architecture::Generator(g) => g.validate(),
            Architecture::Discriminator(d) => d.validate(),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::Generator(g) => write!(
                f,
                "generator channels={} blocks={} down={} width={} height={} max_disp={}",
                g.channels, g.blocks, g.down, g.width, g.height, g.max_disp
            ),
            Architecture::Discriminator(d) => {
                write!(
                    f,
                    "discriminator channels={} width={} height={}",
                    d.channels, d.width, d.height
                )
            }
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::Format(format!("architecture descriptor `{s}`: {why}"));
        let mut parts = s.split_whitespace();
        let kind = parts.next().ok_or_else(|| bad("empty"))?;
        let mut kv = std::collections::BTreeMap::new();
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            kv.insert(k, v);
        }
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| bad(&format!("missing `{k}`")))
        };
        let int = |k: &str| {
            get(k)?
                .parse::<usize>()
                .map_err(|_| bad(&format!("bad `{k}`")))
        };
        let arch = match kind {
            "generator" => Architecture::Generator(GeneratorArch {
                channels: int("channels")?,
                blocks: int("blocks")?,
                down: int("down")?,
                width: int("width")?,
                height: int("height")?,
                max_disp: get("max_disp")?
                    .parse()
                    .map_err(|_| bad("bad `max_disp`"))?,
            }),
            "discriminator" => Architecture::Discriminator(DiscriminatorArch {
                channels: int("channels")?,
                width: int("width")?,
                height: int("height")?,
            }),
            other => return Err(bad(&format!("unknown network kind `{other}`"))),
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// Shapes of every parameter block and normalization layer, in order.
struct Layout {
    blocks: Vec<(String, Vec<usize>)>,
    norms: Vec<usize>,
}

impl Layout {
    fn of(arch: &Architecture) -> Layout {
        let mut blocks = Vec::new();
        let mut norms = Vec::new();
        let mut norm = |blocks: &mut Vec<(String, Vec<usize>)>, name: &str, c: usize| {
            blocks.push((format!("{name}.gamma"), vec![c]));
            blocks.push((format!("{name}.beta"), vec![c]));
            norms.push(c);
        };
        match arch {
            Architecture::Generator(g) => {
                let c = g.channels;
                blocks.push(("in.w".into(), vec![c, 2, 3, 3]));
                norm(&mut blocks, "in.bn", c);
                if g.down >= 2 {
                    blocks.push(("down.w".into(), vec![c, c, 3, 3]));
                    norm(&mut blocks, "down.bn", c);
                }
                for i in 0..g.blocks {
                    blocks.push((format!("res{i}.w1"), vec![c, c, 3, 3]));
                    norm(&mut blocks, &format!("res{i}.bn1"), c);
                    blocks.push((format!("res{i}.w2"), vec![c, c, 3, 3]));
                    norm(&mut blocks, &format!("res{i}.bn2"), c);
                }
                blocks.push(("out.w".into(), vec![2, c, 3, 3]));
                blocks.push(("out.b".into(), vec![2]));
            }
            Architecture::Discriminator(d) => {
                let mut prev = 2;
                for (i, &c) in d.conv_channels().iter().enumerate() {
                    blocks.push((format!("conv{i}.w"), vec![c, prev, 3, 3]));
                    blocks.push((format!("conv{i}.b"), vec![c]));
                    prev = c;
                }
                let flat = prev * (d.width / 16) * (d.height / 16);
                blocks.push(("fc1.w".into(), vec![d.hidden(), flat]));
                blocks.push(("fc1.b".into(), vec![d.hidden()]));
                blocks.push(("fc2.w".into(), vec![1, d.hidden()]));
                blocks.push(("fc2.b".into(), vec![1]));
            }
        }
        Layout { blocks, norms }
    }
}

/// Learnable parameters plus normalization running statistics of one network.
#[derive(Clone, PartialEq)]
pub struct NetworkParams {
    arch: Architecture,
    seed: u64,
    blocks: Vec<ParamBlock>,
    stats: Vec<RunningStats>,
}

impl fmt::Debug for NetworkParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NetworkParams")
            .field("arch", &self.arch.to_string())
            .field("seed", &self.seed)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

impl NetworkParams {
    /// Fan-in scaled normal initialization; weights feeding the field
    /// output are shrunk so a fresh generator starts near the identity.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::of(&arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = layout
            .blocks
            .into_iter()
            .map(|(name, shape)| {
                let len = shape.iter().product();
                let data = if name.ends_with(".gamma") {
                    vec![1.0; len]
                } else if shape.len() == 1 {
                    vec![0.0; len]
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let gain = if name == "out.w" { 0.01 } else { 1.0 };
                    let std = gain * (2.0 / fan_in as f64).sqrt();
                    (0..len)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            std * z
                        })
                        .collect::<Vec<f64>>()
                };
                ParamBlock::new(name, shape, data)
            })
            .collect();
        let stats = layout.norms.into_iter().map(RunningStats::new).collect();
        Ok(NetworkParams {
            arch,
            seed,
            blocks,
            stats,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len()).sum()
    }

    /// Text form of the architecture, as stored in checkpoints.
    pub fn descriptor(&self) -> String {
        format!("{} seed={}", self.arch, self.seed)
    }

    /// Identifies the parameter layout a graph was recorded against.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        };
        eat(self.descriptor().as_bytes());
        for b in &self.blocks {
            eat(b.name.as_bytes());
            for s in &b.shape {
                eat(&s.to_le_bytes());
            }
        }
        h
    }

    pub fn is_finite(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| b.data.iter().all(|v| v.is_finite()))
    }

    /// Folds batch statistics observed in a training-mode graph into the
    /// running statistics.
    pub fn absorb_batch_stats(&mut self, graph: &Graph) {
        for s in graph.batch_stats() {
            let run = &mut self.stats[s.layer];
            for c in 0..s.mean.len() {
                run.mean[c] = (1.0 - BN_MOMENTUM) * run.mean[c] + BN_MOMENTUM * s.mean[c];
                run.var[c] = (1.0 - BN_MOMENTUM) * run.var[c] + BN_MOMENTUM * s.var[c];
            }
        }
    }

    fn generator_arch(&self) -> Result<&GeneratorArch> {
        match &self.arch {
            Architecture::Generator(g) => Ok(g),
            _ => Err(Error::InvalidArgument(
                "expected generator parameters".into(),
            )),
        }
    }

    fn discriminator_arch(&self) -> Result<&DiscriminatorArch> {
        match &self.arch {
            Architecture::Discriminator(d) => Ok(d),
            _ => Err(Error::InvalidArgument(
                "expected discriminator parameters".into(),
            )),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let desc = self.descriptor();
        let mut out = Vec::with_capacity(9 + desc.len() + 8 * self.parameter_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
        out.extend_from_slice(desc.as_bytes());
        for b in &self.blocks {
            b.data
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        for s in &self.stats {
            s.mean
                .iter()
                .chain(&s.var)
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 9 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not an RGPT checkpoint".into()));
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedFormat(format!(
                "checkpoint version {}",
                bytes[4]
            )));
        }
        let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let desc = bytes
            .get(9..9 + len)
            .ok_or_else(|| Error::Format("truncated checkpoint descriptor".into()))?;
        let desc = std::str::from_utf8(desc)
            .map_err(|_| Error::Format("descriptor is not UTF-8".into()))?;
        let (arch_text, seed) = desc
            .rsplit_once(" seed=")
            .ok_or_else(|| Error::Format("descriptor lacks a seed".into()))?;
        let seed = seed
            .parse()
            .map_err(|_| Error::Format("bad seed in descriptor".into()))?;
        let arch: Architecture = arch_text.parse()?;
        let layout = Layout::of(&arch);
        let mut floats = bytes[9 + len..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let expected: usize = layout
            .blocks
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum::<usize>()
            + 2 * layout.norms.iter().sum::<usize>();
        if bytes.len() - 9 - len != 8 * expected {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameter bytes, architecture needs {}",
                bytes.len() - 9 - len,
                8 * expected
            )));
        }
        let blocks = layout
            .blocks
            .into_iter()
            .map(|(name, shape)| {
                let n = shape.iter().product();
                ParamBlock::new(name, shape, floats.by_ref().take(n).collect())
            })
            .collect();
        let stats = layout
            .norms
            .into_iter()
            .map(|c| RunningStats {
                mean: floats.by_ref().take(c).collect(),
                var: floats.by_ref().take(c).collect(),
            })
            .collect();
        Ok(NetworkParams {
            arch,
            seed,
            blocks,
            stats,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn build_generator(arch: GeneratorArch, seed: u64) -> Result<NetworkParams> {
    NetworkParams::init(Architecture::Generator(arch), seed)
}

pub fn build_discriminator(arch: DiscriminatorArch, seed: u64) -> Result<NetworkParams> {
    NetworkParams::init(Architecture::Discriminator(arch), seed)
}

/// Parameter count of a generator computed from its shape alone.
pub fn generator_parameter_count(arch: &GeneratorArch) -> usize {
    let c = arch.channels;
    let conv = |cin: usize, cout: usize| cin * cout * 9;
    let bn = 2 * c;
    let mut n = conv(2, c) + bn;
    if arch.down >= 2 {
        n += conv(c, c) + bn;
    }
    n + arch.blocks * 2 * (conv(c, c) + bn) + conv(c, 2) + 2
}

fn check_batch(
    what: &str,
    arch_dims: (usize, usize),
    images: &[&[f64]],
    dims: (usize, usize),
) -> Result<()> {
    ensure_same_dims(what, arch_dims, dims)?;
    if images.iter().any(|p| p.len() != dims.0 * dims.1) {
        return Err(Error::DimensionMismatch(format!(
            "{what}: plane size does not match {}x{}",
            dims.0, dims.1
        )));
    }
    if images.is_empty() {
        return Err(Error::InvalidArgument(format!("{what}: empty batch")));
    }
    Ok(())
}

/// Records a batched generator pass. Output node: `(n, 2, h, w)` holding
/// `dx` then `dy` per item.
pub fn generator_graph(
    params: &NetworkParams,
    mode: Mode,
    flts: &[&[f64]],
    refs: &[&[f64]],
    dims: (usize, usize),
) -> Result<Graph> {
    let g = params.generator_arch()?;
    check_batch("generator", (g.width, g.height), flts, dims)?;
    check_batch("generator", (g.width, g.height), refs, dims)?;
    if flts.len() != refs.len() {
        return Err(Error::DimensionMismatch(
            "generator: batch sizes differ".into(),
        ));
    }
    let (w, h) = dims;
    let items: Vec<Vec<&[f64]>> = flts.iter().zip(refs).map(|(f, r)| vec![*f, *r]).collect();
    let x = Tensor::from_planes(h, w, &items)?;

    let mut r = Recorder::new(params.fingerprint(), mode, &params.blocks, &params.stats);
    let mut block = 0usize;
    let mut layer = 0usize;
    let mut next = || {
        let b = block;
        block += 1;
        b
    };
    let input = r.input(x);
    let s1 = if g.down >= 1 { 2 } else { 1 };
    let wi = next();
    let mut t = r.conv2d(input, wi, None, s1, 1);
    let (gm, bt) = (next(), next());
    t = r.batch_norm(t, gm, bt, layer);
    layer += 1;
    t = r.relu(t);
    if g.down >= 2 {
        let wd = next();
        t = r.conv2d(t, wd, None, 2, 1);
        let (gm, bt) = (next(), next());
        t = r.batch_norm(t, gm, bt, layer);
        layer += 1;
        t = r.relu(t);
    }
    for _ in 0..g.blocks {
        let skip = t;
        let w1 = next();
        let mut u = r.conv2d(t, w1, None, 1, 1);
        let (gm, bt) = (next(), next());
        u = r.batch_norm(u, gm, bt, layer);
        u = r.relu(u);
        let w2 = next();
        u = r.conv2d(u, w2, None, 1, 1);
        let (gm, bt) = (next(), next());
        u = r.batch_norm(u, gm, bt, layer + 1);
        layer += 2;
        t = r.add(skip, u);
    }
    let (wo, bo) = (next(), next());
    t = r.conv2d(t, wo, Some(bo), 1, 1);
    t = r.tanh(t);
    t = r.scale(t, g.max_disp);
    r.upsample(t, 1 << g.down);
    r.finish()
}

/// Records a batched discriminator pass. Output node: `(n, 1, 1, 1)`
/// probabilities.
pub fn discriminator_graph(
    params: &NetworkParams,
    candidates: &[&[f64]],
    refs: &[&[f64]],
    dims: (usize, usize),
) -> Result<Graph> {
    let d = params.discriminator_arch()?;
    check_batch("discriminator", (d.width, d.height), candidates, dims)?;
    check_batch("discriminator", (d.width, d.height), refs, dims)?;
    if candidates.len() != refs.len() {
        return Err(Error::DimensionMismatch(
            "discriminator: batch sizes differ".into(),
        ));
    }
    let items: Vec<Vec<&[f64]>> = candidates
        .iter()
        .zip(refs)
        .map(|(c, r)| vec![*c, *r])
        .collect();
    let x = Tensor::from_planes(dims.1, dims.0, &items)?;
    let mut r = Recorder::new(
        params.fingerprint(),
        Mode::Eval,
        &params.blocks,
        &params.stats,
    );
    let mut t = r.input(x);
    for (i, s) in DiscriminatorArch::strides().iter().enumerate() {
        t = r.conv2d(t, 2 * i, Some(2 * i + 1), *s, 1);
        t = r.leaky_relu(t, LEAKY_SLOPE);
    }
    t = r.dense(t, 16, 17);
    t = r.leaky_relu(t, LEAKY_SLOPE);
    t = r.dense(t, 18, 19);
    r.sigmoid(t);
    r.finish()
}

/// Gradients of a scalar with respect to `params` and the graph inputs.
pub fn backward(params: &NetworkParams, graph: &Graph, upstream: &Tensor) -> Result<Backward> {
    nn::backward(graph, params.fingerprint(), &params.blocks, upstream)
}

/// The registration produced by one generator pass.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorOutput {
    pub field: DeformationField,
    pub trans: Image,
}

/// Single evaluation-mode pass registering `flt` onto `reference`.
pub fn generator_forward(
    params: &NetworkParams,
    reference: &Image,
    flt: &Image,
) -> Result<GeneratorOutput> {
    ensure_same_dims("generator_forward", reference.dims(), flt.dims())?;
    let graph = generator_graph(
        params,
        Mode::Eval,
        &[flt.data()],
        &[reference.data()],
        flt.dims(),
    )?;
    let out = graph.output();
    let (w, h) = flt.dims();
    let field = DeformationField::new(w, h, out.plane(0, 0).to_vec(), out.plane(0, 1).to_vec())?;
    let trans = warp(flt, &field, BorderPolicy::Clamp)?;
    Ok(GeneratorOutput { field, trans })
}

/// Probability that `img` is a real counterpart of `reference`.
pub fn discriminator_forward(
    params: &NetworkParams,
    img: &Image,
    reference: &Image,
) -> Result<f64> {
    ensure_same_dims("discriminator_forward", img.dims(), reference.dims())?;
    let graph = discriminator_graph(params, &[img.data()], &[reference.data()], img.dims())?;
    Ok(graph.output().data()[0])
}
