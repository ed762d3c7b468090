//! Iterative intensity-based registration: a cubic B-spline transform
//! optimized by gradient ascent on Parzen NMI, coarse to fine.

use serde::{Deserialize, Serialize};

use crate::bspline::GridSampler;
use crate::error::{ensure_same_dims, Error, Result};
use crate::imaging::{sample_bilinear, warp, warp_gradient, BorderPolicy, DeformationField, Image};
use crate::losses::{soft_nmi, DEFAULT_SOFT_BINS};

const BORDER: BorderPolicy = BorderPolicy::Clamp;
/// Maximum number of step halvings per iteration.
const MAX_BACKTRACK: usize = 8;

/// Control-point displacements (pixels) on a uniform grid spanning the image.
#[derive(Clone, Debug, PartialEq)]
pub struct BsplineTransform {
    nx: usize,
    ny: usize,
    cx: Vec<f64>,
    cy: Vec<f64>,
}

impl BsplineTransform {
    pub fn zeros(nx: usize, ny: usize) -> Result<Self> {
        Self::new(nx, ny, vec![0.0; nx * ny], vec![0.0; nx * ny])
    }

    /// `cx`, `cy` are row-major `ny`x`nx`.
    pub fn new(nx: usize, ny: usize, cx: Vec<f64>, cy: Vec<f64>) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::InvalidArgument(format!(
                "control grid must be at least 2x2, got {nx}x{ny}"
            )));
        }
        if cx.len() != nx * ny || cy.len() != nx * ny {
            return Err(Error::DimensionMismatch(format!(
                "control grid {nx}x{ny} needs {} coefficients per axis, got {} and {}",
                nx * ny,
                cx.len(),
                cy.len()
            )));
        }
        if cx.iter().chain(&cy).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "non-finite control displacement".into(),
            ));
        }
        Ok(BsplineTransform { nx, ny, cx, cy })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    /// Control-point spacing in pixels for an image of the given size.
    pub fn spacing(&self, width: usize, height: usize) -> (f64, f64) {
        (
            (width.max(1) - 1) as f64 / (self.nx - 1) as f64,
            (height.max(1) - 1) as f64 / (self.ny - 1) as f64,
        )
    }

    pub fn coefficients(&self) -> (&[f64], &[f64]) {
        (&self.cx, &self.cy)
    }

    pub fn to_field(&self, width: usize, height: usize) -> Result<DeformationField> {
        let s = GridSampler::new(self.nx, self.ny, width, height)?;
        DeformationField::new(width, height, s.evaluate(&self.cx), s.evaluate(&self.cy))
    }

    /// A finer grid whose control points take the current field's values
    /// at their own positions.
    fn refined(&self, nx: usize, ny: usize, width: usize, height: usize) -> Result<Self> {
        let field = self.to_field(width, height)?;
        let (sx, sy) = (
            (width - 1) as f64 / (nx - 1) as f64,
            (height - 1) as f64 / (ny - 1) as f64,
        );
        let mut cx = Vec::with_capacity(nx * ny);
        let mut cy = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let (x, y) = (i as f64 * sx, j as f64 * sy);
                cx.push(sample_bilinear(field.dx(), width, height, x, y, BORDER));
                cy.push(sample_bilinear(field.dy(), width, height, x, y, BORDER));
            }
        }
        BsplineTransform::new(nx, ny, cx, cy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub grid: (usize, usize),
    pub iters: usize,
    /// Initial step: the largest control displacement change, in pixels.
    pub step: f64,
    pub bins: usize,
    pub bandwidth: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            grid: (6, 6),
            iters: 200,
            step: 1.0,
            bins: DEFAULT_SOFT_BINS,
            bandwidth: 2.0 / DEFAULT_SOFT_BINS as f64,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.0 < 2 || self.grid.1 < 2 {
            return Err(Error::InvalidArgument(format!(
                "baseline grid must be at least 2x2, got {:?}",
                self.grid
            )));
        }
        if !(self.step > 0.0 && self.step.is_finite()) || self.bins < 2 || !(self.bandwidth > 0.0) {
            return Err(Error::InvalidArgument(
                "baseline step, bins and bandwidth must be positive".into(),
            ));
        }
        Ok(())
    }

    /// The three grid levels: 2x2, 4x4 (capped by the request), requested.
    pub fn levels(&self) -> [(usize, usize); 3] {
        let (nx, ny) = self.grid;
        [(2, 2), (nx.min(4), ny.min(4)), (nx, ny)]
    }
}

/// One optimizer iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub level: usize,
    pub nmi: f64,
    pub step: f64,
    pub accepted: bool,
}

/// Objective history; within a level, `nmi` never decreases.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTrace {
    pub initial_nmi: f64,
    pub points: Vec<TracePoint>,
}

impl MetricsTrace {
    pub fn final_nmi(&self) -> f64 {
        self.points.last().map_or(self.initial_nmi, |p| p.nmi)
    }
}

struct Objective<'a> {
    reference: &'a Image,
    flt: &'a Image,
    bins: usize,
    bandwidth: f64,
}

impl Objective<'_> {
    fn value(&self, field: &DeformationField) -> Result<f64> {
        let moved = warp(self.flt, field, BORDER)?;
        finite(soft_nmi(&moved, self.reference, self.bins, self.bandwidth)?.value)
    }

    /// Value and gradient with respect to the per-pixel field.
    fn value_grad(&self, field: &DeformationField) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let moved = warp(self.flt, field, BORDER)?;
        let lg = soft_nmi(&moved, self.reference, self.bins, self.bandwidth)?;
        let wg = warp_gradient(self.flt, field, &lg.grad_a, BORDER)?;
        Ok((finite(lg.value)?, wg.dx, wg.dy))
    }
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence {
            iteration: 0,
            reason: "non-finite NMI objective".into(),
            last_good: None,
        })
    }
}

/// Maximizes `soft_nmi(warp(flt, field), reference)` over control-point
/// displacements, splitting `iters` across three grid levels.
pub fn baseline_register(
    reference: &Image,
    flt: &Image,
    config: &BaselineConfig,
) -> Result<(DeformationField, MetricsTrace)> {
    ensure_same_dims("baseline_register", reference.dims(), flt.dims())?;
    config.validate()?;
    let (w, h) = reference.dims();
    let obj = Objective {
        reference,
        flt,
        bins: config.bins,
        bandwidth: config.bandwidth,
    };
    let levels = config.levels();
    let mut t = BsplineTransform::zeros(levels[0].0, levels[0].1)?;
    let mut field = t.to_field(w, h)?;
    let initial_nmi = obj.value(&field)?;
    let mut trace = MetricsTrace {
        initial_nmi,
        points: Vec::with_capacity(config.iters),
    };
    let mut iteration = 0;
    for (li, &(nx, ny)) in levels.iter().enumerate() {
        let budget = config.iters / 3 + usize::from(li < config.iters % 3);
        if li > 0 && t.grid() != (nx, ny) {
            t = t.refined(nx, ny, w, h)?;
            field = t.to_field(w, h)?;
        }
        let sampler = GridSampler::new(nx, ny, w, h)?;
        let mut step = config.step;
        for _ in 0..budget {
            iteration += 1;
            let (mut current, gdx, gdy) = obj.value_grad(&field)?;
            let (gx, gy) = (sampler.adjoint(&gdx), sampler.adjoint(&gdy));
            let gmax = gx.iter().chain(&gy).fold(0.0f64, |m, v| m.max(v.abs()));
            let mut accepted = false;
            if gmax > 0.0 {
                let mut s = step;
                for _ in 0..=MAX_BACKTRACK {
                    let k = s / gmax;
                    let cand = BsplineTransform::new(
                        nx,
                        ny,
                        t.cx.iter().zip(&gx).map(|(c, g)| c + k * g).collect(),
                        t.cy.iter().zip(&gy).map(|(c, g)| c + k * g).collect(),
                    )?;
                    let cand_field = cand.to_field(w, h)?;
                    let v = obj.value(&cand_field)?;
                    if v > current {
                        (t, field, current, accepted) = (cand, cand_field, v, true);
                        step = (s * 1.5).min(config.step);
                        break;
                    }
                    s *= 0.5;
                }
                if !accepted {
                    step = s;
                }
            }
            trace.points.push(TracePoint {
                iteration,
                level: li,
                nmi: current,
                step,
                accepted,
            });
        }
    }
    Ok((field, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bspline::cubic_weights;
    use crate::deformation::{err_def, invert, simulate, DeformationSpec};
    use crate::metrics::{dice, Mask};
    use crate::synthdata::{make_phantom, to_modality_b};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct per-pixel evaluation of the clamped-tap cubic B-spline.
    fn direct(coeffs: &[f64], nx: usize, ny: usize, w: usize, h: usize, x: usize, y: usize) -> f64 {
        let u = x as f64 * (nx - 1) as f64 / (w - 1) as f64;
        let v = y as f64 * (ny - 1) as f64 / (h - 1) as f64;
        let (wu, wv) = (cubic_weights(u - u.floor()), cubic_weights(v - v.floor()));
        let mut s = 0.0;
        for (a, wa) in wv.iter().enumerate() {
            for (b, wb) in wu.iter().enumerate() {
                let j = (v.floor() as isize - 1 + a as isize).clamp(0, ny as isize - 1) as usize;
                let i = (u.floor() as isize - 1 + b as isize).clamp(0, nx as isize - 1) as usize;
                s += wa * wb * coeffs[j * nx + i];
            }
        }
        s
    }

    #[test]
    fn to_field_examples() {
        let z = BsplineTransform::zeros(3, 3)
            .unwrap()
            .to_field(9, 7)
            .unwrap();
        assert_eq!(z.max_magnitude(), 0.0);
        let c = BsplineTransform::new(2, 2, vec![2.0; 4], vec![0.0; 4])
            .unwrap()
            .to_field(9, 7)
            .unwrap();
        assert!(
            c.dx().iter().all(|&v| (v - 2.0).abs() < 1e-12) && c.dy().iter().all(|&v| v == 0.0)
        );
        assert!(BsplineTransform::zeros(1, 3).is_err());
        assert!(BsplineTransform::new(2, 2, vec![0.0; 3], vec![0.0; 4]).is_err());
    }

    #[test]
    fn to_field_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let cx: Vec<f64> = (0..9).map(|_| rng.random_range(-3.0..3.0)).collect();
            let cy: Vec<f64> = (0..9).map(|_| rng.random_range(-3.0..3.0)).collect();
            let f = BsplineTransform::new(3, 3, cx.clone(), cy.clone())
                .unwrap()
                .to_field(11, 13)
                .unwrap();
            for y in 0..13 {
                for x in 0..11 {
                    let (dx, dy) = f.get(x, y);
                    assert!((dx - direct(&cx, 3, 3, 11, 13, x, y)).abs() < 1e-10);
                    assert!((dy - direct(&cy, 3, 3, 11, 13, x, y)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn zero_iterations_is_identity() {
        let (img, _) = make_phantom(1, 32, 32).unwrap();
        let cfg = BaselineConfig {
            iters: 0,
            ..BaselineConfig::default()
        };
        let (f, trace) = baseline_register(&img, &img, &cfg).unwrap();
        assert_eq!(f.max_magnitude(), 0.0);
        assert!(trace.points.is_empty());
    }

    #[test]
    fn identical_images_stay_near_identity() {
        let (img, _) = make_phantom(2, 48, 48).unwrap();
        let (f, _) = baseline_register(&img, &img, &BaselineConfig::default()).unwrap();
        assert!(f.mean_magnitude() < 0.5, "{}", f.mean_magnitude());
    }

    #[test]
    fn accepted_steps_never_lower_nmi() {
        let (img, _) = make_phantom(5, 48, 48).unwrap();
        let spec = DeformationSpec::elastic((4, 4), 4.0, 9);
        let flt = warp(&img, &simulate(&spec, 48, 48).unwrap(), BORDER).unwrap();
        let cfg = BaselineConfig {
            iters: 30,
            ..BaselineConfig::default()
        };
        let (_, trace) = baseline_register(&img, &flt, &cfg).unwrap();
        for w in trace.points.windows(2) {
            if w[0].level == w[1].level {
                assert!(w[1].nmi >= w[0].nmi);
            }
        }
        assert!(trace.final_nmi() > trace.initial_nmi);
    }

    #[test]
    fn recovers_translation() {
        let (img, _) = make_phantom(11, 64, 64).unwrap();
        let applied = DeformationField::constant(64, 64, 3.0, 0.0).unwrap();
        let flt = warp(&img, &applied, BORDER).unwrap();
        let (f, _) = baseline_register(&img, &flt, &BaselineConfig::default()).unwrap();
        let e = err_def(&applied, &invert(&f, 30)).unwrap();
        assert!(e < 1.0, "err_def {e}");
    }

    #[test]
    fn improves_multimodal_dice() {
        let (img, mask) = make_phantom(21, 64, 64).unwrap();
        let b = to_modality_b(&img, 4);
        let applied = simulate(&DeformationSpec::elastic((4, 4), 5.0, 17), 64, 64).unwrap();
        let flt = warp(&b, &applied, BORDER).unwrap();
        let mflt = Mask::from_threshold(
            &warp(&mask.to_image(), &applied, BorderPolicy::Zero).unwrap(),
            0.5,
        );
        let (f, _) = baseline_register(&img, &flt, &BaselineConfig::default()).unwrap();
        let after = Mask::from_threshold(
            &warp(&mflt.to_image(), &f, BorderPolicy::Zero).unwrap(),
            0.5,
        );
        let (d0, d1) = (dice(&mflt, &mask).unwrap(), dice(&after, &mask).unwrap());
        assert!(d1 > d0, "{d0} -> {d1}");
    }
}
