//! Synthetic multimodal registration data: vessel-tree phantoms, a second
//! modality by intensity remapping, and deformed floating images with
//! ground-truth fields and structure masks.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::deformation::{simulate, DeformationSpec, DeformationTemplate};
use crate::error::{Error, Result};
use crate::imaging::{
    load_field, load_image, load_mask, save_field, save_image, save_mask, warp, BorderPolicy,
    DeformationField, Image,
};
use crate::metrics::Mask;
use crate::seeds::derive_seed;

pub const MIN_PHANTOM_SIZE: usize = 32;
pub const MODALITY_NOISE: f64 = 0.02;
pub const GAMMA_RANGE: (f64, f64) = (0.7, 1.4);
pub const MANIFEST: &str = "manifest.json";

/// Rounds through `f32`, the precision of the on-disk containers, so a
/// dataset read back from disk equals the one generated in memory.
fn to_storage(v: f64) -> f64 {
    v as f32 as f64
}

fn stored_image(w: usize, h: usize, data: Vec<f64>) -> Image {
    Image::from_clamped(w, h, data.into_iter().map(to_storage).collect())
}

fn stored_field(f: DeformationField) -> DeformationField {
    let (w, h) = f.dims();
    let (dx, dy) = f.into_planes();
    DeformationField::new(
        w,
        h,
        dx.into_iter().map(to_storage).collect(),
        dy.into_iter().map(to_storage).collect(),
    )
    .expect("rounded finite field stays finite")
}

struct Branch {
    x: f64,
    y: f64,
    angle: f64,
    radius: f64,
    depth: usize,
}

/// Procedural vessel-tree image on a smooth background, with the vessel mask.
///
/// Trees grow from a disc-like hub by random walks whose radius decays along
/// the way and which occasionally fork. Vessels are darker than the
/// background, as in a fundus photograph.
pub fn make_phantom(seed: u64, width: usize, height: usize) -> Result<(Image, Mask)> {
    if width < MIN_PHANTOM_SIZE || height < MIN_PHANTOM_SIZE {
        return Err(Error::InvalidArgument(format!(
            "phantom must be at least {MIN_PHANTOM_SIZE}x{MIN_PHANTOM_SIZE}, got {width}x{height}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (wf, hf) = (width as f64, height as f64);
    let scale = wf.min(hf) / 64.0;

    // Background: a bright disc with a few soft blobs.
    let blobs: Vec<(f64, f64, f64, f64)> = (0..5)
        .map(|_| {
            (
                rng.random_range(0.0..wf),
                rng.random_range(0.0..hf),
                rng.random_range(6.0..16.0) * scale,
                rng.random_range(-0.12..0.12),
            )
        })
        .collect();
    let (cx, cy) = (
        wf / 2.0 + rng.random_range(-0.1..0.1) * wf,
        hf / 2.0 + rng.random_range(-0.1..0.1) * hf,
    );
    let reach = 0.75 * wf.max(hf);
    let background = |x: f64, y: f64| {
        let r = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() / reach;
        let mut v = 0.72 - 0.3 * r * r;
        for &(bx, by, s, a) in &blobs {
            v += a * (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * s * s)).exp();
        }
        v
    };

    // Vessel trees from a hub near one side.
    let hub = (
        rng.random_range(0.3..0.7) * wf,
        rng.random_range(0.3..0.7) * hf,
    );
    let mut vessel = vec![0.0f64; width * height];
    let mut stack: Vec<Branch> = (0..rng.random_range(3..5))
        .map(|_| Branch {
            x: hub.0,
            y: hub.1,
            angle: rng.random_range(0.0..std::f64::consts::TAU),
            radius: rng.random_range(1.6..2.3) * scale,
            depth: 0,
        })
        .collect();
    let step = 0.5;
    let mut stamps = 0usize;
    while let Some(mut b) = stack.pop() {
        let mut travelled = 0.0;
        while b.radius >= 0.55 * scale && stamps < 200_000 {
            if b.x < -2.0 || b.y < -2.0 || b.x > wf + 1.0 || b.y > hf + 1.0 {
                break;
            }
            stamp_disc(&mut vessel, width, height, b.x, b.y, b.radius);
            stamps += 1;
            b.angle += rng.random_range(-0.12..0.12);
            b.x += step * b.angle.cos();
            b.y += step * b.angle.sin();
            b.radius *= 0.9965;
            travelled += step;
            if b.depth < 3 && travelled > 6.0 * scale && rng.random::<f64>() < 0.012 {
                let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
                stack.push(Branch {
                    x: b.x,
                    y: b.y,
                    angle: b.angle + side * rng.random_range(0.4..1.0),
                    radius: b.radius * 0.75,
                    depth: b.depth + 1,
                });
                travelled = 0.0;
            }
        }
    }

    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let v = vessel[y * width + x];
            data.push(background(x as f64, y as f64) * (1.0 - 0.65 * v));
        }
    }
    let image = stored_image(width, height, data);
    let mask = Mask::new(width, height, vessel.iter().map(|&v| v >= 0.5).collect())?;
    Ok((image, mask))
}

/// Anti-aliased disc: coverage falls from 1 to 0 over one pixel at radius `r`.
fn stamp_disc(grid: &mut [f64], w: usize, h: usize, cx: f64, cy: f64, r: f64) {
    let (x0, x1) = (
        (cx - r - 1.0).floor().max(0.0) as usize,
        ((cx + r + 1.0).ceil().max(0.0) as usize).min(w - 1),
    );
    let (y0, y1) = (
        (cy - r - 1.0).floor().max(0.0) as usize,
        ((cy + r + 1.0).ceil().max(0.0) as usize).min(h - 1),
    );
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let c = (r - d + 0.5).clamp(0.0, 1.0);
            let cell = &mut grid[y * w + x];
            *cell = cell.max(c);
        }
    }
}

/// `clamp((1 - img)^gamma + noise)`, with explicit parameters.
pub fn to_modality_b_with(img: &Image, gamma: f64, noise_sigma: f64, seed: u64) -> Result<Image> {
    if !(gamma > 0.0 && gamma.is_finite() && noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gamma {gamma}, noise {noise_sigma}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let data = img
        .data()
        .iter()
        .map(|&v| {
            let base = (1.0 - v).clamp(0.0, 1.0).powf(gamma);
            if noise_sigma > 0.0 {
                base + noise.sample(&mut rng)
            } else {
                base
            }
        })
        .collect();
    Ok(Image::from_clamped(img.width(), img.height(), data))
}

/// The seeded gamma used by [`to_modality_b`].
pub fn modality_gamma(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x6a]));
    rng.random_range(GAMMA_RANGE.0..=GAMMA_RANGE.1)
}

/// Second imaging modality: inverted, gamma-remapped and mildly noisy.
pub fn to_modality_b(img: &Image, seed: u64) -> Image {
    let out = to_modality_b_with(img, modality_gamma(seed), MODALITY_NOISE, seed)
        .expect("default parameters are valid");
    stored_image(out.width(), out.height(), out.into_data())
}

/// One registration problem with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationCase {
    pub id: String,
    /// Modality A, fixed.
    pub reference: Image,
    /// Modality B after the applied deformation.
    pub flt: Image,
    /// Modality B before deformation, aligned with `reference`.
    pub flt_aligned: Image,
    /// `flt = warp(flt_aligned, applied_field)`.
    pub applied_field: DeformationField,
    pub mask_ref: Mask,
    pub mask_flt: Mask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub phantoms: usize,
    pub deformations: usize,
    pub width: usize,
    pub height: usize,
    pub template: DeformationTemplate,
    /// Skip the modality change: floating images share the reference's
    /// intensities.
    pub unimodal: bool,
    pub eval_fraction: f64,
    pub seed: u64,
}

impl DatasetConfig {
    /// 10 phantoms x 20 deformations of 64x64.
    pub fn desk(seed: u64) -> Self {
        DatasetConfig {
            phantoms: 10,
            deformations: 20,
            width: 64,
            height: 64,
            template: DeformationTemplate::default(),
            unimodal: false,
            eval_fraction: 0.2,
            seed,
        }
    }

    /// 26 image pairs x 1500 deformations.
    pub fn paper(seed: u64) -> Self {
        DatasetConfig {
            phantoms: 26,
            deformations: 1500,
            ..Self::desk(seed)
        }
    }

    pub fn total_cases(&self) -> usize {
        self.phantoms * self.deformations
    }

    pub fn validate(&self) -> Result<()> {
        if self.phantoms < 1 || self.deformations < 1 {
            return Err(Error::InvalidArgument(
                "dataset needs at least one phantom and one deformation".into(),
            ));
        }
        if self.width < MIN_PHANTOM_SIZE || self.height < MIN_PHANTOM_SIZE {
            return Err(Error::InvalidArgument(format!(
                "dataset images must be at least {MIN_PHANTOM_SIZE} px"
            )));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::InvalidArgument(format!(
                "eval_fraction {} not in [0, 1)",
                self.eval_fraction
            )));
        }
        self.template.validate()
    }
}

/// Manifest entry for one case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseInfo {
    pub id: String,
    pub phantom: usize,
    pub deformation: usize,
    pub split: Split,
    pub spec: DeformationSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub cases: Vec<CaseInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub cases: Vec<RegistrationCase>,
}

impl Dataset {
    pub fn split(&self, which: Split) -> Vec<&RegistrationCase> {
        self.cases
            .iter()
            .zip(&self.manifest.cases)
            .filter(|(_, i)| i.split == which)
            .map(|(c, _)| c)
            .collect()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.manifest.config.width, self.manifest.config.height)
    }
}

pub fn case_id(phantom: usize, deformation: usize) -> String {
    format!("p{phantom:03}_d{deformation:04}")
}

/// Deforms an aligned pair by `field`: the floating image and the floating
/// mask (bilinear transport, then threshold at 0.5).
pub fn deform_case(
    id: String,
    reference: &Image,
    aligned_b: &Image,
    mask: &Mask,
    field: DeformationField,
) -> Result<RegistrationCase> {
    let flt = warp(aligned_b, &field, BorderPolicy::Clamp)?;
    let flt = stored_image(flt.width(), flt.height(), flt.into_data());
    let moved = warp(&mask.to_image(), &field, BorderPolicy::Zero)?;
    Ok(RegistrationCase {
        id,
        reference: reference.clone(),
        flt,
        flt_aligned: aligned_b.clone(),
        applied_field: field,
        mask_ref: mask.clone(),
        mask_flt: Mask::from_threshold(&moved, 0.5),
    })
}

/// Seeded train/eval assignment: a shuffled `eval_fraction` share of all
/// cases goes to evaluation.
fn assign_splits(n: usize, eval_fraction: f64, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5e]));
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let n_eval = (eval_fraction * n as f64).round() as usize;
    let mut splits = vec![Split::Train; n];
    for &i in &order[..n_eval] {
        splits[i] = Split::Eval;
    }
    splits
}

pub fn build_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let (w, h) = (config.width, config.height);
    let splits = assign_splits(config.total_cases(), config.eval_fraction, config.seed);
    let mut cases = Vec::with_capacity(config.total_cases());
    let mut infos = Vec::with_capacity(config.total_cases());
    for p in 0..config.phantoms {
        let (reference, mask) = make_phantom(derive_seed(config.seed, &[0, p as u64]), w, h)?;
        let aligned_b = if config.unimodal {
            reference.clone()
        } else {
            to_modality_b(&reference, derive_seed(config.seed, &[1, p as u64]))
        };
        for d in 0..config.deformations {
            let spec = config
                .template
                .instantiate(d, derive_seed(config.seed, &[2, p as u64]));
            let field = stored_field(simulate(&spec, w, h)?);
            let id = case_id(p, d);
            infos.push(CaseInfo {
                id: id.clone(),
                phantom: p,
                deformation: d,
                split: splits[cases.len()],
                spec,
            });
            cases.push(deform_case(id, &reference, &aligned_b, &mask, field)?);
        }
    }
    Ok(Dataset {
        manifest: Manifest {
            config: config.clone(),
            cases: infos,
        },
        cases,
    })
}

/// Writes `cases/<id>/{ref,flt,flt_aligned}.rimg`, `field.rfld`,
/// `mask_ref.pgm`, `mask_flt.pgm` and the JSON manifest.
pub fn write_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for case in &dataset.cases {
        let cd = dir.join("cases").join(&case.id);
        std::fs::create_dir_all(&cd)?;
        save_image(&case.reference, cd.join("ref.rimg"))?;
        save_image(&case.flt, cd.join("flt.rimg"))?;
        save_image(&case.flt_aligned, cd.join("flt_aligned.rimg"))?;
        save_field(&case.applied_field, cd.join("field.rfld"))?;
        save_mask(&case.mask_ref, cd.join("mask_ref.pgm"))?;
        save_mask(&case.mask_flt, cd.join("mask_flt.pgm"))?;
    }
    let text = serde_json::to_string_pretty(&dataset.manifest)?;
    std::fs::write(dir.join(MANIFEST), text + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_case(dir: impl AsRef<Path>, id: &str) -> Result<RegistrationCase> {
    let cd = dir.as_ref().join("cases").join(id);
    Ok(RegistrationCase {
        id: id.to_string(),
        reference: load_image(cd.join("ref.rimg"))?,
        flt: load_image(cd.join("flt.rimg"))?,
        flt_aligned: load_image(cd.join("flt_aligned.rimg"))?,
        applied_field: load_field(cd.join("field.rfld"))?,
        mask_ref: load_mask(cd.join("mask_ref.pgm"))?,
        mask_flt: load_mask(cd.join("mask_flt.pgm"))?,
    })
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let manifest = read_manifest(&dir)?;
    let cases = manifest
        .cases
        .iter()
        .map(|c| read_case(&dir, &c.id))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, cases })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deformation::err_def;
    use crate::metrics::{dice, nmi};

    #[test]
    fn phantom_is_deterministic_and_sized() {
        let (a, m) = make_phantom(5, 64, 64).unwrap();
        let (b, n) = make_phantom(5, 64, 64).unwrap();
        assert_eq!(a, b);
        assert_eq!(m, n);
        assert!(make_phantom(5, 8, 64).is_err());
        let (c, _) = make_phantom(6, 64, 64).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn phantom_mask_coverage_envelope() {
        for seed in 0..100 {
            let (_, m) = make_phantom(seed, 64, 64).unwrap();
            let f = m.fraction();
            assert!((0.02..=0.30).contains(&f), "seed {seed}: coverage {f}");
        }
    }

    #[test]
    fn modality_b_boundaries() {
        let (a, _) = make_phantom(1, 32, 32).unwrap();
        let inv = to_modality_b_with(&a, 1.0, 0.0, 3).unwrap();
        for (x, y) in a.data().iter().zip(inv.data()) {
            assert_eq!(*y, 1.0 - x);
        }
        let b = to_modality_b(&a, 9);
        assert!(b.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let g = modality_gamma(9);
        assert!((GAMMA_RANGE.0..=GAMMA_RANGE.1).contains(&g));
    }

    #[test]
    fn modality_b_keeps_more_information_than_an_unrelated_phantom() {
        let mut wins = 0;
        for seed in 0..100 {
            let (a, _) = make_phantom(seed, 32, 32).unwrap();
            let (other, _) = make_phantom(seed + 1000, 32, 32).unwrap();
            let b = to_modality_b_with(&a, modality_gamma(seed), 0.0, seed).unwrap();
            wins += usize::from(nmi(&a, &b, 32).unwrap() > nmi(&a, &other, 32).unwrap());
        }
        assert!(wins >= 95, "{wins}/100");
    }

    #[test]
    fn zero_deformation_dataset_is_aligned() {
        let mut cfg = DatasetConfig::desk(3);
        cfg.phantoms = 2;
        cfg.deformations = 1;
        cfg.template = DeformationTemplate::elastic_only(0.0);
        let ds = build_dataset(&cfg).unwrap();
        for c in &ds.cases {
            assert_eq!(c.flt, c.flt_aligned);
            assert_eq!(dice(&c.mask_ref, &c.mask_flt).unwrap(), 1.0);
            assert_eq!(err_def(&c.applied_field, &c.applied_field).unwrap(), 0.0);
        }
    }

    #[test]
    fn desk_counts_and_unique_ids() {
        let cfg = DatasetConfig::desk(1);
        assert_eq!(cfg.total_cases(), 200);
        assert_eq!(DatasetConfig::paper(1).total_cases(), 39000);
        let splits = assign_splits(200, 0.2, 1);
        assert_eq!(splits.iter().filter(|s| **s == Split::Eval).count(), 40);
        let mut ids: Vec<String> = (0..10)
            .flat_map(|p| (0..20).map(move |d| case_id(p, d)))
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 200);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = DatasetConfig::desk(1);
        cfg.deformations = 0;
        assert!(build_dataset(&cfg).is_err());
        let mut cfg = DatasetConfig::desk(1);
        cfg.template.kinds.clear();
        assert!(build_dataset(&cfg).is_err());
    }
}
