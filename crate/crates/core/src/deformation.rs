//! Ground-truth deformation simulation (rigid, affine, elastic), field
//! composition and inversion, and the endpoint-error metric `err_def`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bspline::GridSampler;
use crate::error::{ensure_same_dims, Error, Result};
use crate::imaging::{sample_bilinear, BorderPolicy, DeformationField};
use crate::seeds::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeformationKind {
    Rigid,
    Affine,
    Elastic,
}

impl std::str::FromStr for DeformationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rigid" => Ok(DeformationKind::Rigid),
            "affine" => Ok(DeformationKind::Affine),
            "elastic" => Ok(DeformationKind::Elastic),
            other => Err(Error::InvalidArgument(format!(
                "unknown deformation kind `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for DeformationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DeformationKind::Rigid => "rigid",
            DeformationKind::Affine => "affine",
            DeformationKind::Elastic => "elastic",
        })
    }
}

/// Parameters of one simulated deformation. Only the fields relevant to
/// `kind` are read; rigid and affine transforms act about the image centre.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformationSpec {
    pub kind: DeformationKind,
    /// Radians, rigid only.
    pub rotation: f64,
    /// Pixels, rigid and affine.
    pub translation: (f64, f64),
    /// Row-major linear part, affine only.
    pub affine_matrix: [[f64; 2]; 2],
    /// Control-point counts, elastic only.
    pub control_grid: (usize, usize),
    /// Upper bound on every realized displacement magnitude, pixels.
    pub max_displacement: f64,
    pub seed: u64,
}

impl DeformationSpec {
    pub fn rigid(rotation: f64, translation: (f64, f64), max_displacement: f64) -> Self {
        DeformationSpec {
            kind: DeformationKind::Rigid,
            rotation,
            translation,
            affine_matrix: [[1.0, 0.0], [0.0, 1.0]],
            control_grid: (4, 4),
            max_displacement,
            seed: 0,
        }
    }

    pub fn affine(matrix: [[f64; 2]; 2], translation: (f64, f64), max_displacement: f64) -> Self {
        DeformationSpec {
            kind: DeformationKind::Affine,
            affine_matrix: matrix,
            translation,
            ..DeformationSpec::rigid(0.0, (0.0, 0.0), max_displacement)
        }
    }

    pub fn elastic(control_grid: (usize, usize), max_displacement: f64, seed: u64) -> Self {
        DeformationSpec {
            kind: DeformationKind::Elastic,
            control_grid,
            seed,
            ..DeformationSpec::rigid(0.0, (0.0, 0.0), max_displacement)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_displacement >= 0.0 && self.max_displacement.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "max_displacement must be finite and non-negative, got {}",
                self.max_displacement
            )));
        }
        match self.kind {
            DeformationKind::Elastic => {
                let (nx, ny) = self.control_grid;
                if nx < 2 || ny < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "elastic control grid must be at least 2x2, got {nx}x{ny}"
                    )));
                }
            }
            DeformationKind::Affine => {
                let [[a, b], [c, d]] = self.affine_matrix;
                if a * d - b * c == 0.0 {
                    return Err(Error::InvalidArgument("affine matrix is singular".into()));
                }
            }
            DeformationKind::Rigid => {}
        }
        let finite = self.rotation.is_finite()
            && self.translation.0.is_finite()
            && self.translation.1.is_finite()
            && self.affine_matrix.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidArgument(
                "non-finite transform parameter".into(),
            ));
        }
        Ok(())
    }
}

/// Seeded control-point displacements of an elastic spec, before upsampling:
/// `(dx, dy)` planes of `ny`x`nx` values uniform in `[-max, max]`.
pub fn elastic_control_points(spec: &DeformationSpec) -> (Vec<f64>, Vec<f64>) {
    let (nx, ny) = spec.control_grid;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m = spec.max_displacement;
    let mut cx = Vec::with_capacity(nx * ny);
    let mut cy = Vec::with_capacity(nx * ny);
    for _ in 0..nx * ny {
        cx.push(m * (2.0 * rng.random::<f64>() - 1.0));
        cy.push(m * (2.0 * rng.random::<f64>() - 1.0));
    }
    (cx, cy)
}

/// Realizes `spec` as a dense field. Any field whose largest displacement
/// magnitude exceeds `max_displacement` is scaled down uniformly to meet it.
pub fn simulate(spec: &DeformationSpec, width: usize, height: usize) -> Result<DeformationField> {
    if width < 2 || height < 2 {
        return Err(Error::InvalidArgument(format!(
            "deformation target must be at least 2x2, got {width}x{height}"
        )));
    }
    spec.validate()?;
    let (cx, cy) = ((width - 1) as f64 / 2.0, (height - 1) as f64 / 2.0);
    let (tx, ty) = spec.translation;
    let linear = |m: [[f64; 2]; 2]| {
        DeformationField::from_fn(width, height, |x, y| {
            let (px, py) = (x as f64 - cx, y as f64 - cy);
            (
                m[0][0] * px + m[0][1] * py + tx - px,
                m[1][0] * px + m[1][1] * py + ty - py,
            )
        })
    };
    let field = match spec.kind {
        DeformationKind::Rigid => {
            let (s, c) = spec.rotation.sin_cos();
            linear([[c, -s], [s, c]])?
        }
        DeformationKind::Affine => linear(spec.affine_matrix)?,
        DeformationKind::Elastic => {
            let (nx, ny) = spec.control_grid;
            let sampler = GridSampler::new(nx, ny, width, height)?;
            let (px, py) = elastic_control_points(spec);
            DeformationField::new(width, height, sampler.evaluate(&px), sampler.evaluate(&py))?
        }
    };
    Ok(enforce_bound(field, spec.max_displacement))
}

fn enforce_bound(field: DeformationField, bound: f64) -> DeformationField {
    let peak = field.max_magnitude();
    if peak <= bound {
        return field;
    }
    let scaled = field.scaled(bound / peak);
    // Rounding in the rescale can leave a magnitude an ulp above the bound.
    if scaled.max_magnitude() <= bound {
        scaled
    } else {
        scaled.scaled(1.0 - 1e-12)
    }
}

/// Recipe for drawing many specs: kinds are cycled by case index and every
/// parameter is drawn from a per-case seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeformationTemplate {
    pub kinds: Vec<DeformationKind>,
    pub max_displacement: f64,
    pub control_grid: (usize, usize),
    /// Largest rigid rotation drawn, radians.
    pub max_rotation: f64,
    /// Largest perturbation of each affine matrix entry away from identity.
    pub affine_jitter: f64,
}

impl Default for DeformationTemplate {
    fn default() -> Self {
        DeformationTemplate {
            kinds: vec![
                DeformationKind::Elastic,
                DeformationKind::Rigid,
                DeformationKind::Affine,
            ],
            max_displacement: 10.0,
            control_grid: (4, 4),
            max_rotation: 0.2,
            affine_jitter: 0.1,
        }
    }
}

impl DeformationTemplate {
    pub fn elastic_only(max_displacement: f64) -> Self {
        DeformationTemplate {
            kinds: vec![DeformationKind::Elastic],
            max_displacement,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() {
            return Err(Error::InvalidArgument(
                "deformation template lists no kinds".into(),
            ));
        }
        let probe = DeformationSpec::elastic(self.control_grid, self.max_displacement, 0);
        probe.validate()?;
        if !(self.max_rotation >= 0.0 && self.affine_jitter >= 0.0 && self.affine_jitter < 1.0) {
            return Err(Error::InvalidArgument(
                "template rotation/jitter out of range".into(),
            ));
        }
        Ok(())
    }

    pub fn instantiate(&self, index: usize, seed: u64) -> DeformationSpec {
        let kind = self.kinds[index % self.kinds.len()];
        let case_seed = derive_seed(seed, &[index as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
        let m = self.max_displacement;
        let mut sym = |r: f64| {
            if r > 0.0 {
                rng.random_range(-r..=r)
            } else {
                0.0
            }
        };
        let translation = (sym(m / 2.0), sym(m / 2.0));
        match kind {
            DeformationKind::Rigid => {
                let mut spec = DeformationSpec::rigid(sym(self.max_rotation), translation, m);
                spec.seed = case_seed;
                spec
            }
            DeformationKind::Affine => {
                let j = self.affine_jitter;
                let matrix = [[1.0 + sym(j), sym(j)], [sym(j), 1.0 + sym(j)]];
                let mut spec = DeformationSpec::affine(matrix, translation, m);
                spec.seed = case_seed;
                spec
            }
            DeformationKind::Elastic => DeformationSpec::elastic(self.control_grid, m, case_seed),
        }
    }
}

/// `result(p) = outer(p) + inner(p + outer(p))`: warping by the result equals
/// warping by `inner` and then by `outer`.
pub fn compose(outer: &DeformationField, inner: &DeformationField) -> Result<DeformationField> {
    ensure_same_dims("compose", outer.dims(), inner.dims())?;
    let (w, h) = outer.dims();
    DeformationField::from_fn(w, h, |x, y| {
        let (ox, oy) = outer.get(x, y);
        let (sx, sy) = (x as f64 + ox, y as f64 + oy);
        let ix = sample_bilinear(inner.dx(), w, h, sx, sy, BorderPolicy::Clamp);
        let iy = sample_bilinear(inner.dy(), w, h, sx, sy, BorderPolicy::Clamp);
        (ox + ix, oy + iy)
    })
}

/// Approximate inverse by fixed-point iteration of `v(p) = -f(p + v(p))`.
/// Converges for smooth fields whose Jacobian stays away from folding.
pub fn invert(field: &DeformationField, iterations: usize) -> DeformationField {
    let (w, h) = field.dims();
    let mut vx: Vec<f64> = field.dx().iter().map(|v| -v).collect();
    let mut vy: Vec<f64> = field.dy().iter().map(|v| -v).collect();
    for _ in 0..iterations {
        let mut nx = vec![0.0; w * h];
        let mut ny = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (sx, sy) = (x as f64 + vx[i], y as f64 + vy[i]);
                nx[i] = -sample_bilinear(field.dx(), w, h, sx, sy, BorderPolicy::Clamp);
                ny[i] = -sample_bilinear(field.dy(), w, h, sx, sy, BorderPolicy::Clamp);
            }
        }
        vx = nx;
        vy = ny;
    }
    DeformationField::new(w, h, vx, vy).expect("inverse of a finite field is finite")
}

/// Mean Euclidean endpoint error between two fields, in pixels.
pub fn err_def(applied: &DeformationField, recovered: &DeformationField) -> Result<f64> {
    ensure_same_dims("err_def", applied.dims(), recovered.dims())?;
    let total: f64 = applied
        .dx()
        .iter()
        .zip(applied.dy())
        .zip(recovered.dx().iter().zip(recovered.dy()))
        .map(|((ax, ay), (rx, ry))| (ax - rx).hypot(ay - ry))
        .sum();
    Ok(total / applied.dx().len() as f64)
}
