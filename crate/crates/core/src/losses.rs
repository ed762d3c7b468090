//! Differentiable training objectives.
//!
//! Image losses return their value together with gradients with respect to
//! both inputs. Similarities enter as `1 - similarity` so every content term
//! is minimized at perfect alignment.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_dims, Error, Result};
use crate::imaging::Image;
use crate::metrics::{
    box_spread, check_ssim_args, window_stats, DEFAULT_C1, DEFAULT_C2, DEFAULT_SSIM_WINDOW,
};
use crate::nn::{self, gemm, Mode, ParamBlock, Recorder, Tensor};

pub const PROB_EPS: f64 = 1e-7;
pub const DEFAULT_SOFT_BINS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub w_nmi: f64,
    pub w_ssim: f64,
    pub w_feat: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cyc: 10.0,
            w_nmi: 1.0,
            w_ssim: 1.0,
            w_feat: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_cyc, self.w_nmi, self.w_ssim, self.w_feat];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and >= 0: {all:?}"
            )));
        }
        Ok(())
    }
}

/// A scalar with its gradients with respect to the two image arguments.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
}

impl LossGrad {
    fn zero(n: usize) -> Self {
        LossGrad {
            value: 0.0,
            grad_a: vec![0.0; n],
            grad_b: vec![0.0; n],
        }
    }

    /// `self += w * other`.
    fn add_scaled(&mut self, w: f64, other: &LossGrad) {
        self.value += w * other.value;
        self.grad_a
            .iter_mut()
            .zip(&other.grad_a)
            .for_each(|(g, o)| *g += w * o);
        self.grad_b
            .iter_mut()
            .zip(&other.grad_b)
            .for_each(|(g, o)| *g += w * o);
    }
}

/// Normalized Gaussian bin memberships of every pixel (`n x bins`, row-major)
/// and their derivatives with respect to the pixel value.
fn parzen(values: &[f64], bins: usize, bandwidth: f64) -> (Vec<f64>, Vec<f64>) {
    let inv_var = 1.0 / (bandwidth * bandwidth);
    let mut phi = vec![0.0; values.len() * bins];
    let mut dphi = vec![0.0; values.len() * bins];
    let mut g = vec![0.0; bins];
    for (i, &v) in values.iter().enumerate() {
        let row = &mut phi[i * bins..(i + 1) * bins];
        // Shift exponents by their maximum so the largest weight is exp(0).
        let mut top = f64::NEG_INFINITY;
        for k in 0..bins {
            let d = v - (k as f64 + 0.5) / bins as f64;
            g[k] = -d * inv_var;
            row[k] = -0.5 * d * d * inv_var;
            top = top.max(row[k]);
        }
        let mut z = 0.0;
        for r in row.iter_mut() {
            *r = (*r - top).exp();
            z += *r;
        }
        let mut mean_g = 0.0;
        for k in 0..bins {
            row[k] /= z;
            mean_g += row[k] * g[k];
        }
        let drow = &mut dphi[i * bins..(i + 1) * bins];
        for k in 0..bins {
            drow[k] = row[k] * (g[k] - mean_g);
        }
    }
    (phi, dphi)
}

fn plogp_sum(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&q| q > 0.0)
        .map(|&q| q * q.ln())
        .sum::<f64>()
}

fn safe_ln(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        0.0
    }
}

/// Parzen-window NMI `2 I(A;B) / (H(A) + H(B))` with Gaussian kernels of
/// standard deviation `bandwidth` centred on `bins` uniform bins.
pub fn soft_nmi(a: &Image, b: &Image, bins: usize, bandwidth: f64) -> Result<LossGrad> {
    ensure_same_dims("soft_nmi", a.dims(), b.dims())?;
    if bins < 2 || !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "soft_nmi needs bins >= 2 and bandwidth > 0, got {bins}, {bandwidth}"
        )));
    }
    let n = a.len();
    let inv_n = 1.0 / n as f64;
    let (pa_i, da_i) = parzen(a.data(), bins, bandwidth);
    let (pb_i, db_i) = parzen(b.data(), bins, bandwidth);

    // Joint (bins x bins) = (1/n) Phi_a^T Phi_b.
    let mut joint = vec![0.0; bins * bins];
    gemm(
        bins,
        n,
        bins,
        &pa_i,
        (1, bins),
        &pb_i,
        (bins, 1),
        0.0,
        &mut joint,
        (bins, 1),
    );
    joint.iter_mut().for_each(|p| *p *= inv_n);
    let pa: Vec<f64> = (0..bins)
        .map(|k| joint[k * bins..(k + 1) * bins].iter().sum())
        .collect();
    let pb: Vec<f64> = (0..bins)
        .map(|l| (0..bins).map(|k| joint[k * bins + l]).sum())
        .collect();
    let (ha, hb, hab) = (plogp_sum(&pa), plogp_sum(&pb), plogp_sum(&joint));
    let s = ha + hb;
    if s <= 0.0 {
        return Ok(LossGrad {
            value: 1.0,
            ..LossGrad::zero(n)
        });
    }
    let value = 2.0 * (s - hab) / s;

    // dH_AB/da_i = -(1/n) sum_k phi'_k(a_i) sum_l ln p_kl phi_l(b_i);
    // dH_A/da_i  = -(1/n) sum_k phi'_k(a_i) ln pa_k.
    let ln_joint: Vec<f64> = joint.iter().map(|&p| safe_ln(p)).collect();
    let ln_pa: Vec<f64> = pa.iter().map(|&p| safe_ln(p)).collect();
    let ln_pb: Vec<f64> = pb.iter().map(|&p| safe_ln(p)).collect();
    // m_a[i][k] = sum_l phi_l(b_i) ln p_kl ; m_b[i][l] = sum_k phi_k(a_i) ln p_kl.
    let mut m_a = vec![0.0; n * bins];
    gemm(
        n,
        bins,
        bins,
        &pb_i,
        (bins, 1),
        &ln_joint,
        (1, bins),
        0.0,
        &mut m_a,
        (bins, 1),
    );
    let mut m_b = vec![0.0; n * bins];
    gemm(
        n,
        bins,
        bins,
        &pa_i,
        (bins, 1),
        &ln_joint,
        (bins, 1),
        0.0,
        &mut m_b,
        (bins, 1),
    );
    // dNMI = -2 dH_AB / S + 2 H_AB dS / S^2.
    let (c_joint, c_marg) = (-2.0 / s, 2.0 * hab / (s * s));
    let grad = |dphi: &[f64], m: &[f64], ln_marg: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let (d, mm) = (
                    &dphi[i * bins..(i + 1) * bins],
                    &m[i * bins..(i + 1) * bins],
                );
                let dhj: f64 = -inv_n * d.iter().zip(mm).map(|(x, y)| x * y).sum::<f64>();
                let dhm: f64 = -inv_n * d.iter().zip(ln_marg).map(|(x, y)| x * y).sum::<f64>();
                c_joint * dhj + c_marg * dhm
            })
            .collect()
    };
    Ok(LossGrad {
        value,
        grad_a: grad(&da_i, &m_a, &ln_pa),
        grad_b: grad(&db_i, &m_b, &ln_pb),
    })
}

/// `1 - ssim(a, b)` with the default window and constants, plus gradients.
pub fn ssim_loss(a: &Image, b: &Image) -> Result<LossGrad> {
    let (window, c1, c2) = (DEFAULT_SSIM_WINDOW, DEFAULT_C1, DEFAULT_C2);
    check_ssim_args(a, b, window, c1, c2)?;
    let (w, h) = a.dims();
    let st = window_stats(a.data(), b.data(), w, h, window);
    let count = st.mu_a.len();
    let nk = (window * window) as f64;
    let (mut alpha_a, mut alpha_b) = (vec![0.0; count], vec![0.0; count]);
    let (mut beta_a, mut beta_b, mut gamma) =
        (vec![0.0; count], vec![0.0; count], vec![0.0; count]);
    let mut total = 0.0;
    for i in 0..count {
        let (ma, mb, va, vb, cv) = (st.mu_a[i], st.mu_b[i], st.var_a[i], st.var_b[i], st.cov[i]);
        let n1 = 2.0 * ma * mb + c1;
        let n2 = 2.0 * cv + c2;
        let d1 = ma * ma + mb * mb + c1;
        let d2 = va + vb + c2;
        let s = (n1 * n2) / (d1 * d2);
        total += s;
        let (t1, t2) = (s / n2, s / d2);
        let ds_dma = s * (2.0 * mb / n1 - 2.0 * ma / d1);
        let ds_dmb = s * (2.0 * ma / n1 - 2.0 * mb / d1);
        // Per-window coefficients of d s / d x_j = alpha + beta x_j + gamma y_j.
        beta_a[i] = 2.0 * (-t2) / nk;
        beta_b[i] = 2.0 * (-t2) / nk;
        gamma[i] = 2.0 * t1 / nk;
        alpha_a[i] = (ds_dma - 2.0 * ma * (-t2) - mb * (2.0 * t1)) / nk;
        alpha_b[i] = (ds_dmb - 2.0 * mb * (-t2) - ma * (2.0 * t1)) / nk;
    }
    let value = 1.0 - total / count as f64;
    let scale = -1.0 / count as f64;
    let spread = |v: &[f64]| box_spread(v, w, h, window);
    let (sa, sb, sba, sbb, sg) = (
        spread(&alpha_a),
        spread(&alpha_b),
        spread(&beta_a),
        spread(&beta_b),
        spread(&gamma),
    );
    let (ad, bd) = (a.data(), b.data());
    let grad_a = (0..w * h)
        .map(|j| scale * (sa[j] + sba[j] * ad[j] + sg[j] * bd[j]))
        .collect();
    let grad_b = (0..w * h)
        .map(|j| scale * (sb[j] + sbb[j] * bd[j] + sg[j] * ad[j]))
        .collect();
    Ok(LossGrad {
        value,
        grad_a,
        grad_b,
    })
}

/// Fixed random convolutional feature extractor standing in for a
/// pretrained perceptual network.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNet {
    seed: u64,
    widths: Vec<usize>,
    blocks: Vec<ParamBlock>,
}

impl FeatureNet {
    pub const DESK_WIDTHS: [usize; 4] = [16, 32, 64, 128];

    pub fn new(seed: u64) -> Self {
        Self::with_widths(seed, &Self::DESK_WIDTHS).expect("desk widths are valid")
    }

    /// Stride-2 3x3 convolution + ReLU per stage, widths as given.
    pub fn with_widths(seed: u64, widths: &[usize]) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("feature widths {widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prev = 1;
        let blocks = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let std = (2.0 / (prev * 9) as f64).sqrt();
                let data = (0..c * prev * 9)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        std * z
                    })
                    .collect();
                let block = ParamBlock::new(format!("feat{i}.w"), vec![c, prev, 3, 3], data);
                prev = c;
                block
            })
            .collect();
        Ok(FeatureNet {
            seed,
            widths: widths.to_vec(),
            blocks,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Smallest accepted side length: one pixel per stage halving.
    pub fn min_size(&self) -> usize {
        1 << self.widths.len()
    }

    fn check(&self, dims: (usize, usize)) -> Result<()> {
        let m = self.min_size();
        if dims.0 < m || dims.1 < m {
            return Err(Error::DimensionMismatch(format!(
                "feature net needs images of at least {m}x{m}, got {}x{}",
                dims.0, dims.1
            )));
        }
        Ok(())
    }

    fn graph(&self, images: &[&[f64]], dims: (usize, usize)) -> Result<nn::Graph> {
        let items: Vec<Vec<&[f64]>> = images.iter().map(|p| vec![*p]).collect();
        let x = Tensor::from_planes(dims.1, dims.0, &items)?;
        let mut r = Recorder::new(self.seed, Mode::Eval, &self.blocks, &[]);
        let mut t = r.input(x);
        for i in 0..self.blocks.len() {
            t = r.conv2d(t, i, None, 2, 1);
            t = r.relu(t);
        }
        r.finish()
    }

    /// Final-stage activations of one image.
    pub fn features(&self, img: &Image) -> Result<Vec<f64>> {
        self.check(img.dims())?;
        Ok(self
            .graph(&[img.data()], img.dims())?
            .output()
            .data()
            .to_vec())
    }
}

/// Mean squared difference of the final-stage activations of `a` and `b`.
pub fn feature_loss(net: &FeatureNet, a: &Image, b: &Image) -> Result<LossGrad> {
    ensure_same_dims("feature_loss", a.dims(), b.dims())?;
    net.check(a.dims())?;
    let graph = net.graph(&[a.data(), b.data()], a.dims())?;
    let out = graph.output();
    let half = out.data().len() / 2;
    let (fa, fb) = out.data().split_at(half);
    let m = half as f64;
    let value = fa
        .iter()
        .zip(fb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / m;
    let mut up = Tensor::zeros(2, out.shape()[1], out.shape()[2], out.shape()[3]);
    {
        let u = up.data_mut();
        for i in 0..half {
            let d = 2.0 * (fa[i] - fb[i]) / m;
            u[i] = d;
            u[half + i] = -d;
        }
    }
    let back = nn::backward(&graph, net.seed, &net.blocks, &up)?;
    let g = back.inputs[0].data();
    let plane = a.len();
    Ok(LossGrad {
        value,
        grad_a: g[..plane].to_vec(),
        grad_b: g[plane..].to_vec(),
    })
}

/// Weighted sum of the NMI, SSIM and feature terms comparing a registered
/// image with its target.
///
/// The NMI term is `1 - soft_nmi(trans, target) / soft_nmi(target, target)`
/// so it vanishes exactly at `trans == target` despite kernel smoothing.
pub fn content_loss(
    weights: &LossWeights,
    feat: &FeatureNet,
    trans: &Image,
    target: &Image,
) -> Result<LossGrad> {
    ensure_same_dims("content_loss", trans.dims(), target.dims())?;
    weights.validate()?;
    let mut total = LossGrad::zero(trans.len());
    if weights.w_nmi > 0.0 {
        let bins = DEFAULT_SOFT_BINS;
        let bw = 2.0 / bins as f64;
        let self_nmi = soft_nmi(target, target, bins, bw)?;
        if self_nmi.value > 1e-12 {
            let cross = soft_nmi(trans, target, bins, bw)?;
            let r = self_nmi.value;
            let value = 1.0 - cross.value / r;
            let grad_a = cross.grad_a.iter().map(|g| -g / r).collect();
            let grad_b = (0..trans.len())
                .map(|i| {
                    let d_self = self_nmi.grad_a[i] + self_nmi.grad_b[i];
                    -(cross.grad_b[i] * r - cross.value * d_self) / (r * r)
                })
                .collect();
            total.add_scaled(
                weights.w_nmi,
                &LossGrad {
                    value,
                    grad_a,
                    grad_b,
                },
            );
        }
    }
    if weights.w_ssim > 0.0 {
        total.add_scaled(weights.w_ssim, &ssim_loss(trans, target)?);
    }
    if weights.w_feat > 0.0 {
        total.add_scaled(weights.w_feat, &feature_loss(feat, trans, target)?);
    }
    Ok(total)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Discriminator loss `-(mean ln d_real + mean ln(1 - d_fake))`.
pub fn adv_loss_d(d_real: &[f64], d_fake: &[f64]) -> f64 {
    adv_loss_d_grad(d_real, d_fake).0
}

/// [`adv_loss_d`] with its gradients with respect to each probability.
pub fn adv_loss_d_grad(d_real: &[f64], d_fake: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (nr, nf) = (d_real.len() as f64, d_fake.len() as f64);
    let real: f64 = d_real.iter().map(|&p| clamp_prob(p).ln()).sum::<f64>() / nr;
    let fake: f64 = d_fake
        .iter()
        .map(|&p| (1.0 - clamp_prob(p)).ln())
        .sum::<f64>()
        / nf;
    let g_real = d_real
        .iter()
        .map(|&p| -1.0 / (nr * clamp_prob(p)))
        .collect();
    let g_fake = d_fake
        .iter()
        .map(|&p| 1.0 / (nf * (1.0 - clamp_prob(p))))
        .collect();
    (-(real + fake), g_real, g_fake)
}

/// Non-saturating generator loss `-mean ln d_fake`.
pub fn adv_loss_g(d_fake: &[f64]) -> f64 {
    adv_loss_g_grad(d_fake).0
}

pub fn adv_loss_g_grad(d_fake: &[f64]) -> (f64, Vec<f64>) {
    let n = d_fake.len() as f64;
    let v = -d_fake.iter().map(|&p| clamp_prob(p).ln()).sum::<f64>() / n;
    (
        v,
        d_fake.iter().map(|&p| -1.0 / (n * clamp_prob(p))).collect(),
    )
}

/// Round-trip L1 error in both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleGrad {
    pub value: f64,
    pub grad_x_roundtrip: Vec<f64>,
    pub grad_y_roundtrip: Vec<f64>,
}

/// `mean|x_rt - x| + mean|y_rt - y|` on raw planes.
pub fn cycle_loss_planes(x: &[f64], x_rt: &[f64], y: &[f64], y_rt: &[f64]) -> Result<CycleGrad> {
    if x.len() != x_rt.len() || y.len() != y_rt.len() || x.is_empty() || y.is_empty() {
        return Err(Error::DimensionMismatch(
            "cycle_loss: round trips must match their originals".into(),
        ));
    }
    let side = |o: &[f64], r: &[f64]| {
        let n = o.len() as f64;
        let v = o.iter().zip(r).map(|(a, b)| (b - a).abs()).sum::<f64>() / n;
        let g = o
            .iter()
            .zip(r)
            .map(|(a, b)| {
                let d = b - a;
                if d > 0.0 {
                    1.0 / n
                } else if d < 0.0 {
                    -1.0 / n
                } else {
                    0.0
                }
            })
            .collect::<Vec<_>>();
        (v, g)
    };
    let (vx, gx) = side(x, x_rt);
    let (vy, gy) = side(y, y_rt);
    Ok(CycleGrad {
        value: vx + vy,
        grad_x_roundtrip: gx,
        grad_y_roundtrip: gy,
    })
}

pub fn cycle_loss(
    x: &Image,
    x_roundtrip: &Image,
    y: &Image,
    y_roundtrip: &Image,
) -> Result<CycleGrad> {
    ensure_same_dims("cycle_loss", x.dims(), x_roundtrip.dims())?;
    ensure_same_dims("cycle_loss", y.dims(), y_roundtrip.dims())?;
    cycle_loss_planes(x.data(), x_roundtrip.data(), y.data(), y_roundtrip.data())
}

/// Adversarial terms of both generators and the cycle term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveParts {
    pub adv_g: f64,
    pub adv_f: f64,
    pub cyc: f64,
}

/// `adv_g + adv_f + lambda * cyc`.
pub fn total_objective(weights: &LossWeights, parts: ObjectiveParts) -> Result<f64> {
    let ObjectiveParts { adv_g, adv_f, cyc } = parts;
    if !(adv_g.is_finite() && adv_f.is_finite() && cyc.is_finite()) {
        return Err(Error::Divergence {
            iteration: 0,
            reason: format!("non-finite objective part {parts:?}"),
            last_good: None,
        });
    }
    Ok(adv_g + adv_f + weights.lambda_cyc * cyc)
}
