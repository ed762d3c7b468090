//! The optimization recipe: MSE pretraining of the generator, then
//! alternating discriminator / generator updates with adversarial, cycle and
//! content terms, all with Adam.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deformation::invert;
use crate::error::{Error, Result};
use crate::harness::{evaluate_field, INVERT_ITERATIONS};
use crate::imaging::{warp, warp_plane, warp_plane_backward, BorderPolicy, Image};
use crate::losses::{
    adv_loss_d_grad, adv_loss_g_grad, content_loss, cycle_loss_planes, total_objective, FeatureNet,
    LossWeights, ObjectiveParts,
};
use crate::networks::{
    backward, build_discriminator, build_generator, discriminator_graph, generator_forward,
    generator_graph, DiscriminatorArch, GeneratorArch, GeneratorOutput, NetworkParams,
};
use crate::nn::{Graph, Mode, Tensor};
use crate::seeds::derive_seed;
use crate::synthdata::RegistrationCase;

const BORDER: BorderPolicy = BorderPolicy::Clamp;

/// Named hyperparameter bundles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
    Ncyc,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            "ncyc" => Ok(Preset::Ncyc),
            other => Err(Error::InvalidArgument(format!(
                "unknown preset `{other}` (desk, paper, ncyc)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
            Preset::Ncyc => "ncyc",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_pretrain: f64,
    pub lr_gan: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub pretrain_iters: usize,
    pub gan_iters: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    /// Validation cadence in iterations (iteration 0 is always evaluated).
    pub eval_every: usize,
    /// Share of the training split held out for checkpoint selection.
    pub validation_fraction: f64,
    pub gen_channels: usize,
    pub gen_blocks: usize,
    pub gen_down: usize,
    pub max_disp: f64,
    pub disc_channels: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::preset(Preset::Desk)
    }
}

impl TrainConfig {
    pub fn preset(p: Preset) -> Self {
        let desk = TrainConfig {
            lr_pretrain: 1e-3,
            lr_gan: 1e-4,
            beta1: 0.93,
            beta2: 0.999,
            eps: 1e-8,
            pretrain_iters: 2000,
            gan_iters: 3000,
            batch_size: 4,
            weights: LossWeights::default(),
            eval_every: 200,
            validation_fraction: 0.1,
            gen_channels: 32,
            gen_blocks: 4,
            gen_down: 2,
            max_disp: 10.0,
            disc_channels: 8,
            seed: 0,
        };
        match p {
            Preset::Desk => desk,
            Preset::Ncyc => TrainConfig {
                weights: LossWeights {
                    lambda_cyc: 0.0,
                    ..desk.weights
                },
                ..desk
            },
            Preset::Paper => TrainConfig {
                lr_pretrain: 0.001,
                lr_gan: 1e-3,
                pretrain_iters: 100_000,
                gan_iters: 100_000,
                gen_channels: 64,
                gen_down: 0,
                disc_channels: 64,
                ..desk
            },
        }
    }

    pub fn lambda(&self) -> f64 {
        self.weights.lambda_cyc
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr_pretrain > 0.0 && self.lr_gan > 0.0) {
            return bad(format!(
                "learning rates must be > 0 ({}, {})",
                self.lr_pretrain, self.lr_gan
            ));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad(format!(
                "betas must lie in (0, 1) ({}, {})",
                self.beta1, self.beta2
            ));
        }
        if !(self.eps > 0.0) || self.batch_size == 0 || self.eval_every == 0 {
            return bad("eps, batch_size and eval_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!(
                "validation_fraction {} not in [0, 1)",
                self.validation_fraction
            ));
        }
        self.weights.validate()
    }

    pub fn generator_arch(&self, width: usize, height: usize) -> GeneratorArch {
        GeneratorArch {
            channels: self.gen_channels,
            blocks: self.gen_blocks,
            down: self.gen_down,
            width,
            height,
            max_disp: self.max_disp,
        }
    }

    pub fn discriminator_arch(&self, width: usize, height: usize) -> DiscriminatorArch {
        DiscriminatorArch {
            channels: self.disc_channels,
            width,
            height,
        }
    }

    fn adam(&self, lr: f64) -> AdamOptions {
        AdamOptions {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamOptions {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment estimates for every parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &NetworkParams) -> Self {
        Self::for_sizes(params.blocks().iter().map(|b| b.data.len()))
    }

    pub fn for_sizes(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes
            .into_iter()
            .map(|n| (vec![0.0; n], vec![0.0; n]))
            .unzip();
        AdamState { t: 0, m, v }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Bias-corrected Adam update of raw parameter arrays.
    pub fn update(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[Vec<f64>],
        opt: AdamOptions,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch(
                "adam: block count differs from state".into(),
            ));
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                iteration: 0,
                reason: "non-finite gradient".into(),
                last_good: None,
            });
        }
        self.t += 1;
        let c1 = 1.0 - opt.beta1.powi(self.t as i32);
        let c2 = 1.0 - opt.beta2.powi(self.t as i32);
        for (bi, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[bi], &mut self.v[bi], &grads[bi]);
            if p.len() != g.len() || m.len() != g.len() {
                return Err(Error::DimensionMismatch(format!(
                    "adam: block {bi} size mismatch"
                )));
            }
            for i in 0..g.len() {
                m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
                v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
                let (mh, vh) = (m[i] / c1, v[i] / c2);
                p[i] -= opt.lr * mh / (vh.sqrt() + opt.eps);
            }
        }
        Ok(())
    }
}

/// One Adam step on a network; fails if gradients or the result are not
/// finite.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut NetworkParams,
    grads: &[Vec<f64>],
    opt: AdamOptions,
) -> Result<()> {
    let mut slices: Vec<&mut [f64]> = params
        .blocks_mut()
        .iter_mut()
        .map(|b| b.data.as_mut_slice())
        .collect();
    state.update(&mut slices, grads, opt)?;
    if !params.is_finite() {
        return Err(Error::Divergence {
            iteration: 0,
            reason: "non-finite parameter after update".into(),
            last_good: None,
        });
    }
    Ok(())
}

/// One logged interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub phase: String,
    pub mse: Option<f64>,
    pub adv_d: Option<f64>,
    pub adv_g: Option<f64>,
    pub adv_f: Option<f64>,
    pub cycle: Option<f64>,
    pub content: Option<f64>,
    pub val_err_def: f64,
    pub val_dice: f64,
    pub wall_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r)?;
        }
        w.into_inner()
            .map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    fn push(&mut self, r: LogRecord) {
        debug_assert!(self
            .records
            .last()
            .is_none_or(|l| l.iteration < r.iteration));
        self.records.push(r);
    }
}

/// Training images of one case, with the real samples each discriminator
/// sees precomputed.
struct Prepared {
    flt: Vec<f64>,
    reference: Vec<f64>,
    /// Modality B in the reference frame, never resampled.
    aligned: Vec<f64>,
    /// The floating image registered by the inverse of the applied field:
    /// what a perfect generator produces, resampling artifacts included.
    /// This is the real sample for D_Y and the content target for G.
    real_y: Vec<f64>,
    /// Modality A resampled into the floating frame (real sample for D_X).
    real_x: Vec<f64>,
}

fn prepare(cases: &[&RegistrationCase]) -> Result<Vec<Prepared>> {
    cases
        .iter()
        .map(|c| {
            let ideal = invert(&c.applied_field, INVERT_ITERATIONS);
            Ok(Prepared {
                flt: c.flt.data().to_vec(),
                reference: c.reference.data().to_vec(),
                aligned: c.flt_aligned.data().to_vec(),
                real_y: warp(&c.flt, &ideal, BORDER)?.into_data(),
                real_x: warp(&c.reference, &c.applied_field, BORDER)?.into_data(),
            })
        })
        .collect()
}

/// Seeded split of the training cases into (fit, validation) subsets.
pub fn validation_split<'a>(
    cases: &[&'a RegistrationCase],
    fraction: f64,
    seed: u64,
) -> (Vec<&'a RegistrationCase>, Vec<&'a RegistrationCase>) {
    let n = cases.len();
    let n_val = if n >= 2 {
        ((fraction * n as f64).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x7a]));
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut val: Vec<usize> = order[..n_val].to_vec();
    val.sort_unstable();
    let fit = (0..n)
        .filter(|i| !val.contains(i))
        .map(|i| cases[i])
        .collect();
    (fit, val.into_iter().map(|i| cases[i]).collect())
}

/// Mean endpoint error and Dice of a generator over `cases`.
pub fn validate_generator(
    params: &NetworkParams,
    cases: &[&RegistrationCase],
) -> Result<(f64, f64)> {
    if cases.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (mut e, mut d) = (0.0, 0.0);
    for c in cases {
        let out = generator_forward(params, &c.reference, &c.flt)?;
        let m = evaluate_field(c, &out.field)?;
        e += m.err_def;
        d += m.dice;
    }
    Ok((e / cases.len() as f64, d / cases.len() as f64))
}

fn field_planes(out: &Tensor, b: usize) -> (&[f64], &[f64]) {
    (out.plane(b, 0), out.plane(b, 1))
}

fn warp_vec(src: &[f64], dims: (usize, usize), dx: &[f64], dy: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    warp_plane(src, dims.0, dims.1, dx, dy, BORDER, &mut out);
    out
}

fn image(dims: (usize, usize), data: Vec<f64>) -> Image {
    Image::from_clamped(dims.0, dims.1, data)
}

fn with_iteration(e: Error, iteration: usize, last_good: &NetworkParams) -> Error {
    match e {
        Error::Divergence { reason, .. } => Error::Divergence {
            iteration,
            reason,
            last_good: Some(Box::new(last_good.clone())),
        },
        other => other,
    }
}

fn check_dataset(
    cases: &[&RegistrationCase],
    arch_dims: Option<(usize, usize)>,
) -> Result<(usize, usize)> {
    let first = cases
        .first()
        .ok_or_else(|| Error::InvalidArgument("training dataset is empty".into()))?;
    let dims = first.reference.dims();
    if cases
        .iter()
        .any(|c| c.reference.dims() != dims || c.flt.dims() != dims)
    {
        return Err(Error::DimensionMismatch(
            "training cases differ in size".into(),
        ));
    }
    if let Some(a) = arch_dims {
        if a != dims {
            return Err(Error::DimensionMismatch(format!(
                "network expects {}x{}, dataset is {}x{}",
                a.0, a.1, dims.0, dims.1
            )));
        }
    }
    Ok(dims)
}

/// Tracks the best validation score and the parameters that achieved it.
struct Best {
    err_def: f64,
    iteration: usize,
    params: NetworkParams,
}

impl Best {
    fn offer(&mut self, err_def: f64, iteration: usize, params: &NetworkParams) {
        if err_def < self.err_def || self.err_def.is_nan() {
            *self = Best {
                err_def,
                iteration,
                params: params.clone(),
            };
        }
    }
}

/// Result of [`pretrain_generator`].
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub generator: NetworkParams,
    pub log: TrainLog,
    pub best_iteration: usize,
    pub initial_mse: f64,
    pub final_mse: f64,
}

/// Mean squared error between `warp(flt, G(flt, ref))` and the aligned
/// floating-modality image, averaged over `cases`.
pub fn generator_mse(params: &NetworkParams, cases: &[&RegistrationCase]) -> Result<f64> {
    let mut total = 0.0;
    for c in cases {
        let out = generator_forward(params, &c.reference, &c.flt)?;
        total += crate::metrics::mse(&out.trans, &c.flt_aligned)?;
    }
    Ok(total / cases.len().max(1) as f64)
}

/// Supervised warm start: minimizes the MSE between the registered floating
/// image and its aligned counterpart. Returns the best-validation generator.
pub fn pretrain_generator(
    config: &TrainConfig,
    cases: &[&RegistrationCase],
    generator: NetworkParams,
) -> Result<Pretrained> {
    config.validate()?;
    let dims = check_dataset(cases, Some(generator.arch().dims()))?;
    let (fit, val) = validation_split(cases, config.validation_fraction, config.seed);
    let val_set = if val.is_empty() { fit.clone() } else { val };
    let prepared = prepare(&fit)?;
    let mut g = generator;
    let mut state = AdamState::new(&g);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0x9e, 1]));
    let opt = config.adam(config.lr_pretrain);
    let started = Instant::now();
    let initial_mse = generator_mse(&g, &fit)?;
    let mut log = TrainLog::default();
    let (e0, d0) = validate_generator(&g, &val_set)?;
    let mut best = Best {
        err_def: e0,
        iteration: 0,
        params: g.clone(),
    };
    log.push(LogRecord {
        iteration: 0,
        phase: "pretrain".into(),
        mse: Some(initial_mse),
        adv_d: None,
        adv_g: None,
        adv_f: None,
        cycle: None,
        content: None,
        val_err_def: e0,
        val_dice: d0,
        wall_s: 0.0,
    });
    let mut running = (0.0, 0usize);
    for it in 1..=config.pretrain_iters {
        let idx: Vec<usize> = (0..config.batch_size)
            .map(|_| rng.random_range(0..prepared.len()))
            .collect();
        let loss = pretrain_step(&mut g, &mut state, &prepared, &idx, dims, opt)
            .map_err(|e| with_iteration(e, it, &best.params))?;
        running = (running.0 + loss, running.1 + 1);
        if it % config.eval_every == 0 || it == config.pretrain_iters {
            let (e, d) = validate_generator(&g, &val_set)?;
            best.offer(e, it, &g);
            log.push(LogRecord {
                iteration: it,
                phase: "pretrain".into(),
                mse: Some(running.0 / running.1 as f64),
                adv_d: None,
                adv_g: None,
                adv_f: None,
                cycle: None,
                content: None,
                val_err_def: e,
                val_dice: d,
                wall_s: started.elapsed().as_secs_f64(),
            });
            running = (0.0, 0);
        }
    }
    let final_mse = generator_mse(&best.params, &fit)?;
    Ok(Pretrained {
        generator: best.params,
        log,
        best_iteration: best.iteration,
        initial_mse,
        final_mse,
    })
}

fn pretrain_step(
    g: &mut NetworkParams,
    state: &mut AdamState,
    prepared: &[Prepared],
    idx: &[usize],
    dims: (usize, usize),
    opt: AdamOptions,
) -> Result<f64> {
    let n = dims.0 * dims.1;
    let flts: Vec<&[f64]> = idx.iter().map(|&i| prepared[i].flt.as_slice()).collect();
    let refs: Vec<&[f64]> = idx
        .iter()
        .map(|&i| prepared[i].reference.as_slice())
        .collect();
    let graph = generator_graph(g, Mode::Train, &flts, &refs, dims)?;
    let out = graph.output();
    let scale = 1.0 / (n * idx.len()) as f64;
    let mut up = vec![0.0; idx.len() * 2 * n];
    let mut loss = 0.0;
    for (b, &i) in idx.iter().enumerate() {
        let (dx, dy) = field_planes(out, b);
        let trans = warp_vec(&prepared[i].flt, dims, dx, dy);
        let resid: Vec<f64> = trans
            .iter()
            .zip(&prepared[i].aligned)
            .map(|(t, r)| t - r)
            .collect();
        loss += resid.iter().map(|r| r * r).sum::<f64>() * scale;
        let upstream: Vec<f64> = resid.iter().map(|r| 2.0 * r * scale).collect();
        let (gx, gy) = up[b * 2 * n..(b + 1) * 2 * n].split_at_mut(n);
        warp_plane_backward(
            &prepared[i].flt,
            dims.0,
            dims.1,
            dx,
            dy,
            BORDER,
            &upstream,
            None,
            gx,
            gy,
        );
    }
    if !loss.is_finite() {
        return Err(Error::Divergence {
            iteration: 0,
            reason: "non-finite pretraining loss".into(),
            last_good: None,
        });
    }
    let back = backward(g, &graph, &Tensor::new(idx.len(), 2, dims.1, dims.0, up)?)?;
    adam_step(state, g, &back.params, opt)?;
    g.absorb_batch_stats(&graph);
    Ok(loss)
}

/// The four networks of the adversarial stage.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleNets {
    /// Registers floating onto reference.
    pub g: NetworkParams,
    /// Registers reference onto floating.
    pub f: NetworkParams,
    /// Judges images in the floating frame.
    pub d_x: NetworkParams,
    /// Judges images in the reference frame.
    pub d_y: NetworkParams,
}

impl CycleNets {
    /// Fresh networks for `dims`; `g` may be replaced by a pretrained one.
    pub fn init(config: &TrainConfig, dims: (usize, usize)) -> Result<Self> {
        let s = config.seed;
        Ok(CycleNets {
            g: build_generator(
                config.generator_arch(dims.0, dims.1),
                derive_seed(s, &[0x6e, 0]),
            )?,
            f: build_generator(
                config.generator_arch(dims.0, dims.1),
                derive_seed(s, &[0x6e, 1]),
            )?,
            d_x: build_discriminator(
                config.discriminator_arch(dims.0, dims.1),
                derive_seed(s, &[0x6e, 2]),
            )?,
            d_y: build_discriminator(
                config.discriminator_arch(dims.0, dims.1),
                derive_seed(s, &[0x6e, 3]),
            )?,
        })
    }
}

/// Loss terms of one adversarial step, and how much gradient the cycle
/// term sent into the two generators' fields.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepTerms {
    pub adv_d: f64,
    pub adv_g: f64,
    pub adv_f: f64,
    pub cycle: f64,
    pub content: f64,
    pub objective: f64,
    pub cycle_grad_norm: f64,
    pub content_grad_norm: f64,
}

struct Optimizers {
    g: AdamState,
    f: AdamState,
    d_x: AdamState,
    d_y: AdamState,
}

/// Result of [`train_cyclegan`].
#[derive(Clone, Debug)]
pub struct Trained {
    /// Networks at the best validation checkpoint.
    pub nets: CycleNets,
    pub log: TrainLog,
    pub best_iteration: usize,
    pub best_err_def: f64,
}

/// Adversarial training with cycle consistency. Returns the networks at the
/// best validation checkpoint among the trained iterates (the input networks
/// when `gan_iters` is 0). `iteration_offset` shifts logged iteration
/// numbers so they continue after pretraining.
pub fn train_cyclegan(
    config: &TrainConfig,
    cases: &[&RegistrationCase],
    nets: CycleNets,
    iteration_offset: usize,
) -> Result<Trained> {
    config.validate()?;
    let dims = check_dataset(cases, Some(nets.g.arch().dims()))?;
    for p in [&nets.f, &nets.d_x, &nets.d_y] {
        if p.arch().dims() != dims {
            return Err(Error::DimensionMismatch(
                "networks disagree on input size".into(),
            ));
        }
    }
    let (fit, val) = validation_split(cases, config.validation_fraction, config.seed);
    let val_set = if val.is_empty() { fit.clone() } else { val };
    let prepared = prepare(&fit)?;
    let feat = FeatureNet::new(derive_seed(config.seed, &[0xfe]));
    let mut nets = nets;
    let mut opt = Optimizers {
        g: AdamState::new(&nets.g),
        f: AdamState::new(&nets.f),
        d_x: AdamState::new(&nets.d_x),
        d_y: AdamState::new(&nets.d_y),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0x9e, 2]));
    let started = Instant::now();
    let mut log = TrainLog::default();
    let (e0, d0) = validate_generator(&nets.g, &val_set)?;
    // Selection considers only adversarially trained iterates, so the
    // returned model always reflects the objective (and its lambda).
    let mut best = (e0, 0usize, nets.clone());
    let mut have_best = config.gan_iters == 0;
    // After pretraining, the starting point is already the last logged row.
    if iteration_offset == 0 {
        log.push(LogRecord {
            iteration: iteration_offset,
            phase: "gan".into(),
            mse: None,
            adv_d: None,
            adv_g: None,
            adv_f: None,
            cycle: None,
            content: None,
            val_err_def: e0,
            val_dice: d0,
            wall_s: 0.0,
        });
    }
    let mut acc = (StepTerms::default(), 0usize);
    for it in 1..=config.gan_iters {
        let idx: Vec<usize> = (0..config.batch_size)
            .map(|_| rng.random_range(0..prepared.len()))
            .collect();
        let t = gan_step(config, &feat, &mut nets, &mut opt, &prepared, &idx, dims)
            .map_err(|e| with_iteration(e, iteration_offset + it, &best.2.g))?;
        let a = &mut acc.0;
        a.adv_d += t.adv_d;
        a.adv_g += t.adv_g;
        a.adv_f += t.adv_f;
        a.cycle += t.cycle;
        a.content += t.content;
        acc.1 += 1;
        if it % config.eval_every == 0 || it == config.gan_iters {
            let (e, d) = validate_generator(&nets.g, &val_set)?;
            if !have_best || e < best.0 {
                best = (e, it, nets.clone());
                have_best = true;
            }
            let k = acc.1 as f64;
            log.push(LogRecord {
                iteration: iteration_offset + it,
                phase: "gan".into(),
                mse: None,
                adv_d: Some(acc.0.adv_d / k),
                adv_g: Some(acc.0.adv_g / k),
                adv_f: Some(acc.0.adv_f / k),
                cycle: Some(acc.0.cycle / k),
                content: Some(acc.0.content / k),
                val_err_def: e,
                val_dice: d,
                wall_s: started.elapsed().as_secs_f64(),
            });
            acc = (StepTerms::default(), 0);
        }
    }
    Ok(Trained {
        nets: best.2,
        log,
        best_iteration: iteration_offset + best.1,
        best_err_def: best.0,
    })
}

fn probabilities(graph: &Graph) -> Vec<f64> {
    graph.output().data().to_vec()
}

fn grad_tensor(values: Vec<f64>) -> Result<Tensor> {
    Tensor::new(values.len(), 1, 1, 1, values)
}

/// Updates one discriminator on a batch of real and fake candidates.
fn discriminator_update(
    d: &mut NetworkParams,
    state: &mut AdamState,
    reals: &[&[f64]],
    fakes: &[&[f64]],
    conds: &[&[f64]],
    dims: (usize, usize),
    opt: AdamOptions,
) -> Result<f64> {
    let gr = discriminator_graph(d, reals, conds, dims)?;
    let gf = discriminator_graph(d, fakes, conds, dims)?;
    let (loss, g_real, g_fake) = adv_loss_d_grad(&probabilities(&gr), &probabilities(&gf));
    let br = backward(d, &gr, &grad_tensor(g_real)?)?;
    let bf = backward(d, &gf, &grad_tensor(g_fake)?)?;
    let grads: Vec<Vec<f64>> = br
        .params
        .iter()
        .zip(&bf.params)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    adam_step(state, d, &grads, opt)?;
    Ok(loss)
}

/// Generator-side adversarial loss and its gradient with respect to each
/// fake candidate plane.
fn generator_adversarial(
    d: &NetworkParams,
    fakes: &[&[f64]],
    conds: &[&[f64]],
    dims: (usize, usize),
) -> Result<(f64, Vec<Vec<f64>>)> {
    let graph = discriminator_graph(d, fakes, conds, dims)?;
    let (loss, g) = adv_loss_g_grad(&probabilities(&graph));
    let back = backward(d, &graph, &grad_tensor(g)?)?;
    let input = &back.inputs[0];
    Ok((
        loss,
        (0..fakes.len())
            .map(|b| input.plane(b, 0).to_vec())
            .collect(),
    ))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn norm(v: &[Vec<f64>]) -> f64 {
    v.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

/// One adversarial step from fresh optimizer state, on `cases[idx]`.
pub fn gan_step_once(
    config: &TrainConfig,
    feat: &FeatureNet,
    nets: &mut CycleNets,
    cases: &[&RegistrationCase],
    idx: &[usize],
) -> Result<StepTerms> {
    let dims = check_dataset(cases, Some(nets.g.arch().dims()))?;
    let prepared = prepare(cases)?;
    let mut opt = Optimizers {
        g: AdamState::new(&nets.g),
        f: AdamState::new(&nets.f),
        d_x: AdamState::new(&nets.d_x),
        d_y: AdamState::new(&nets.d_y),
    };
    gan_step(config, feat, nets, &mut opt, &prepared, idx, dims)
}

fn gan_step(
    config: &TrainConfig,
    feat: &FeatureNet,
    nets: &mut CycleNets,
    opt: &mut Optimizers,
    prepared: &[Prepared],
    idx: &[usize],
    dims: (usize, usize),
) -> Result<StepTerms> {
    let n = dims.0 * dims.1;
    let bsz = idx.len();
    let adam = config.adam(config.lr_gan);
    let w = &config.weights;
    let xs: Vec<&[f64]> = idx.iter().map(|&i| prepared[i].flt.as_slice()).collect();
    let ys: Vec<&[f64]> = idx
        .iter()
        .map(|&i| prepared[i].reference.as_slice())
        .collect();
    let real_y: Vec<&[f64]> = idx.iter().map(|&i| prepared[i].real_y.as_slice()).collect();
    let real_x: Vec<&[f64]> = idx.iter().map(|&i| prepared[i].real_x.as_slice()).collect();

    let g_graph = generator_graph(&nets.g, Mode::Train, &xs, &ys, dims)?;
    let f_graph = generator_graph(&nets.f, Mode::Train, &ys, &xs, dims)?;
    let (g_out, f_out) = (g_graph.output(), f_graph.output());
    let fake_y: Vec<Vec<f64>> = (0..bsz)
        .map(|b| {
            let (dx, dy) = field_planes(g_out, b);
            warp_vec(xs[b], dims, dx, dy)
        })
        .collect();
    let fake_x: Vec<Vec<f64>> = (0..bsz)
        .map(|b| {
            let (dx, dy) = field_planes(f_out, b);
            warp_vec(ys[b], dims, dx, dy)
        })
        .collect();
    let fy: Vec<&[f64]> = fake_y.iter().map(Vec::as_slice).collect();
    let fx: Vec<&[f64]> = fake_x.iter().map(Vec::as_slice).collect();

    // Discriminators first, on the current fakes.
    let ld_y = discriminator_update(&mut nets.d_y, &mut opt.d_y, &real_y, &fy, &ys, dims, adam)?;
    let ld_x = discriminator_update(&mut nets.d_x, &mut opt.d_x, &real_x, &fx, &xs, dims, adam)?;

    // Generator side: gradients with respect to the fake images and, for the
    // cycle term, directly with respect to the fields.
    let (adv_g, mut grad_fy) = generator_adversarial(&nets.d_y, &fy, &ys, dims)?;
    let (adv_f, mut grad_fx) = generator_adversarial(&nets.d_x, &fx, &xs, dims)?;
    let inv_b = 1.0 / bsz as f64;

    let mut content = 0.0;
    let mut content_img_y = vec![vec![0.0; n]; bsz];
    let mut content_img_x = vec![vec![0.0; n]; bsz];
    if w.w_nmi > 0.0 || w.w_ssim > 0.0 || w.w_feat > 0.0 {
        for b in 0..bsz {
            let cy = content_loss(
                w,
                feat,
                &image(dims, fake_y[b].clone()),
                &image(dims, real_y[b].to_vec()),
            )?;
            let cx = content_loss(
                w,
                feat,
                &image(dims, fake_x[b].clone()),
                &image(dims, real_x[b].to_vec()),
            )?;
            content += (cy.value + cx.value) * inv_b;
            content_img_y[b]
                .iter_mut()
                .zip(&cy.grad_a)
                .for_each(|(d, g)| *d = g * inv_b);
            content_img_x[b]
                .iter_mut()
                .zip(&cx.grad_a)
                .for_each(|(d, g)| *d = g * inv_b);
        }
    }

    let mut cycle = 0.0;
    let mut cyc_img_y = vec![vec![0.0; n]; bsz];
    let mut cyc_img_x = vec![vec![0.0; n]; bsz];
    let mut cyc_field_g = vec![vec![0.0; 2 * n]; bsz];
    let mut cyc_field_f = vec![vec![0.0; 2 * n]; bsz];
    for b in 0..bsz {
        let (gdx, gdy) = field_planes(g_out, b);
        let (fdx, fdy) = field_planes(f_out, b);
        let x_rt = warp_vec(&fake_y[b], dims, fdx, fdy);
        let y_rt = warp_vec(&fake_x[b], dims, gdx, gdy);
        let c = cycle_loss_planes(xs[b], &x_rt, ys[b], &y_rt)?;
        cycle += c.value * inv_b;
        if w.lambda_cyc > 0.0 {
            let s = w.lambda_cyc * inv_b;
            let up_x: Vec<f64> = c.grad_x_roundtrip.iter().map(|g| g * s).collect();
            let up_y: Vec<f64> = c.grad_y_roundtrip.iter().map(|g| g * s).collect();
            let (ffx, ffy) = cyc_field_f[b].split_at_mut(n);
            warp_plane_backward(
                &fake_y[b],
                dims.0,
                dims.1,
                fdx,
                fdy,
                BORDER,
                &up_x,
                Some(&mut cyc_img_y[b]),
                ffx,
                ffy,
            );
            let (gfx, gfy) = cyc_field_g[b].split_at_mut(n);
            warp_plane_backward(
                &fake_x[b],
                dims.0,
                dims.1,
                gdx,
                gdy,
                BORDER,
                &up_y,
                Some(&mut cyc_img_x[b]),
                gfx,
                gfy,
            );
        }
    }
    let cycle_grad_norm =
        norm(&cyc_img_y) + norm(&cyc_img_x) + norm(&cyc_field_g) + norm(&cyc_field_f);
    let content_grad_norm = norm(&content_img_y) + norm(&content_img_x);
    let objective = total_objective(
        w,
        ObjectiveParts {
            adv_g,
            adv_f,
            cyc: cycle,
        },
    )? + content;

    let mut up_g = vec![0.0; bsz * 2 * n];
    let mut up_f = vec![0.0; bsz * 2 * n];
    for b in 0..bsz {
        add_into(&mut grad_fy[b], &content_img_y[b]);
        add_into(&mut grad_fy[b], &cyc_img_y[b]);
        add_into(&mut grad_fx[b], &content_img_x[b]);
        add_into(&mut grad_fx[b], &cyc_img_x[b]);
        let (gdx, gdy) = field_planes(g_out, b);
        let (fdx, fdy) = field_planes(f_out, b);
        let slot_g = &mut up_g[b * 2 * n..(b + 1) * 2 * n];
        add_into(slot_g, &cyc_field_g[b]);
        let (sgx, sgy) = slot_g.split_at_mut(n);
        warp_plane_backward(
            xs[b],
            dims.0,
            dims.1,
            gdx,
            gdy,
            BORDER,
            &grad_fy[b],
            None,
            sgx,
            sgy,
        );
        let slot_f = &mut up_f[b * 2 * n..(b + 1) * 2 * n];
        add_into(slot_f, &cyc_field_f[b]);
        let (sfx, sfy) = slot_f.split_at_mut(n);
        warp_plane_backward(
            ys[b],
            dims.0,
            dims.1,
            fdx,
            fdy,
            BORDER,
            &grad_fx[b],
            None,
            sfx,
            sfy,
        );
    }
    let back_g = backward(
        &nets.g,
        &g_graph,
        &Tensor::new(bsz, 2, dims.1, dims.0, up_g)?,
    )?;
    let back_f = backward(
        &nets.f,
        &f_graph,
        &Tensor::new(bsz, 2, dims.1, dims.0, up_f)?,
    )?;
    adam_step(&mut opt.g, &mut nets.g, &back_g.params, adam)?;
    adam_step(&mut opt.f, &mut nets.f, &back_f.params, adam)?;
    nets.g.absorb_batch_stats(&g_graph);
    nets.f.absorb_batch_stats(&f_graph);

    Ok(StepTerms {
        adv_d: ld_y + ld_x,
        adv_g,
        adv_f,
        cycle,
        content,
        objective,
        cycle_grad_norm,
        content_grad_norm,
    })
}

/// Everything produced by a full training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub nets: CycleNets,
    pub pretrain_log: TrainLog,
    pub gan_log: TrainLog,
    pub best_iteration: usize,
    pub best_err_def: f64,
}

impl TrainOutcome {
    pub fn log(&self) -> TrainLog {
        TrainLog {
            records: self
                .pretrain_log
                .records
                .iter()
                .chain(&self.gan_log.records)
                .cloned()
                .collect(),
        }
    }
}

/// Pretraining of G followed by adversarial training of all four networks.
pub fn train(config: &TrainConfig, cases: &[&RegistrationCase]) -> Result<TrainOutcome> {
    config.validate()?;
    let dims = check_dataset(cases, None)?;
    let mut nets = CycleNets::init(config, dims)?;
    let pre = pretrain_generator(config, cases, nets.g.clone())?;
    nets.g = pre.generator;
    let trained = train_cyclegan(config, cases, nets, config.pretrain_iters)?;
    Ok(TrainOutcome {
        nets: trained.nets,
        pretrain_log: pre.log,
        gan_log: trained.log,
        best_iteration: trained.best_iteration,
        best_err_def: trained.best_err_def,
    })
}

/// Single evaluation-mode generator pass, timed.
pub fn register(
    params: &NetworkParams,
    reference: &Image,
    flt: &Image,
) -> Result<(GeneratorOutput, Duration)> {
    let t = Instant::now();
    let out = generator_forward(params, reference, flt)?;
    Ok((out, t.elapsed()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deformation::DeformationTemplate;
    use crate::synthdata::{build_dataset, DatasetConfig};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            gen_channels: 8,
            gen_blocks: 1,
            disc_channels: 2,
            pretrain_iters: 4,
            gan_iters: 2,
            eval_every: 2,
            ..TrainConfig::preset(Preset::Desk)
        }
    }

    fn tiny_dataset(max_disp: f64) -> crate::synthdata::Dataset {
        let mut cfg = DatasetConfig::desk(4);
        cfg.width = 32;
        cfg.height = 32;
        cfg.phantoms = 2;
        cfg.deformations = 3;
        cfg.template = DeformationTemplate::elastic_only(max_disp);
        build_dataset(&cfg).unwrap()
    }

    #[test]
    fn adam_examples() {
        let opt = AdamOptions {
            lr: 0.01,
            beta1: 0.93,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut s = AdamState::for_sizes([1]);
        let mut p = [0.5];
        s.update(&mut [&mut p[..]], &[vec![1.0]], opt).unwrap();
        assert!((p[0] - (0.5 - 0.01 / (1.0 + 1e-8))).abs() < 1e-15);
        let mut s = AdamState::for_sizes([3]);
        let mut q = [0.1, -0.2, 0.3];
        s.update(&mut [&mut q[..]], &[vec![0.0; 3]], opt).unwrap();
        assert_eq!(q, [0.1, -0.2, 0.3]);
        assert!(s
            .update(&mut [&mut q[..]], &[vec![f64::NAN, 0.0, 0.0]], opt)
            .is_err());
    }

    #[test]
    fn presets_echo_hyperparameters() {
        let p = TrainConfig::preset(Preset::Paper);
        assert_eq!(
            (p.beta1, p.lambda(), p.lr_gan, p.lr_pretrain),
            (0.93, 10.0, 1e-3, 0.001)
        );
        assert_eq!((p.pretrain_iters, p.gan_iters), (100_000, 100_000));
        assert_eq!(TrainConfig::preset(Preset::Ncyc).lambda(), 0.0);
        assert_eq!("ncyc".parse::<Preset>().unwrap(), Preset::Ncyc);
        assert!("fast".parse::<Preset>().is_err());
    }

    #[test]
    fn zero_lambda_sends_no_cycle_gradient() {
        let ds = tiny_dataset(3.0);
        let cases: Vec<&RegistrationCase> = ds.cases.iter().collect();
        let mut cfg = tiny_config();
        cfg.weights = LossWeights {
            lambda_cyc: 0.0,
            w_nmi: 0.0,
            w_ssim: 0.0,
            w_feat: 0.0,
        };
        let feat = FeatureNet::new(1);
        let mut nets = CycleNets::init(&cfg, (32, 32)).unwrap();
        let t = gan_step_once(&cfg, &feat, &mut nets, &cases, &[0, 1]).unwrap();
        assert_eq!(t.cycle_grad_norm, 0.0);
        assert_eq!(t.content_grad_norm, 0.0);
        assert_eq!(t.objective, t.adv_g + t.adv_f);
        cfg.weights.lambda_cyc = 10.0;
        let mut nets = CycleNets::init(&cfg, (32, 32)).unwrap();
        let t = gan_step_once(&cfg, &feat, &mut nets, &cases, &[0, 1]).unwrap();
        assert!(t.cycle_grad_norm > 0.0);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let cfg = tiny_config();
        let g = build_generator(cfg.generator_arch(32, 32), 1).unwrap();
        assert!(pretrain_generator(&cfg, &[], g).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_dataset(3.0);
        let cases: Vec<&RegistrationCase> = ds.cases.iter().collect();
        let a = train(&tiny_config(), &cases).unwrap();
        let b = train(&tiny_config(), &cases).unwrap();
        assert_eq!(a.nets, b.nets);
        assert_eq!(a.best_iteration, b.best_iteration);
        let iters: Vec<usize> = a.log().records.iter().map(|r| r.iteration).collect();
        assert!(iters.windows(2).all(|w| w[0] < w[1]), "{iters:?}");
    }

    #[test]
    fn aligned_data_keeps_identity_generator() {
        let ds = tiny_dataset(0.0);
        let cases: Vec<&RegistrationCase> = ds.cases.iter().collect();
        let cfg = tiny_config();
        let g = build_generator(cfg.generator_arch(32, 32), 2).unwrap();
        let pre = pretrain_generator(&cfg, &cases, g).unwrap();
        assert!(pre.final_mse <= pre.initial_mse + 1e-6);
    }
}
