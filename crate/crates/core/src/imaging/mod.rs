//! Images, dense deformation fields, and differentiable backward warping.
//!
//! Warping is backward: every output pixel `p` samples the source at
//! `p + d(p)` with bilinear interpolation. Both the sampled intensities and
//! the displacements receive exact analytic gradients, which is what lets a
//! network be trained through the warp.
//!
//! The plane-level functions (`warp_plane`, `warp_plane_backward`) work on
//! raw row-major slices so training code can warp batch elements in place;
//! [`warp`] and [`warp_gradient`] are the checked wrappers around them.

mod io;

pub use io::{load_field, load_image, load_mask, save_field, save_image, save_mask};

use crate::error::{ensure_same_dims, Error, Result};

/// Single-channel 2-D intensity grid, row-major, every value in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Image({}x{})", self.width, self.height)
    }
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::InvalidImage(format!(
                "image must be at least 2x2, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "expected {} intensities, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!(
                "intensity {bad} outside [0, 1]"
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Image::new(width, height, data)
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Image::new(width, height, vec![value; width * height])
    }

    /// Builds an image from values that are in range up to rounding; anything
    /// outside `[0, 1]` is clamped. Panics on a length mismatch.
    pub(crate) fn from_clamped(width: usize, height: usize, mut data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height);
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Image {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Dense per-pixel displacement, in pixels. `(dx, dy)` at output pixel `p`
/// points at the source location `p + (dx, dy)` that the warp samples.
#[derive(Clone, PartialEq)]
pub struct DeformationField {
    width: usize,
    height: usize,
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl std::fmt::Debug for DeformationField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "DeformationField({}x{}, max |d| = {:.3})",
            self.width,
            self.height,
            self.max_magnitude()
        )
    }
}

impl DeformationField {
    pub fn new(width: usize, height: usize, dx: Vec<f64>, dy: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidField("field has zero size".into()));
        }
        let n = width * height;
        if dx.len() != n || dy.len() != n {
            return Err(Error::InvalidField(format!(
                "expected {n} displacements per plane, got {} and {}",
                dx.len(),
                dy.len()
            )));
        }
        if dx.iter().chain(dy.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidField("non-finite displacement".into()));
        }
        Ok(DeformationField {
            width,
            height,
            dx,
            dy,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        DeformationField {
            width,
            height,
            dx: vec![0.0; n],
            dy: vec![0.0; n],
        }
    }

    pub fn constant(width: usize, height: usize, dx: f64, dy: f64) -> Result<Self> {
        let n = width * height;
        DeformationField::new(width, height, vec![dx; n], vec![dy; n])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> (f64, f64),
    ) -> Result<Self> {
        let n = width * height;
        let (mut dx, mut dy) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for y in 0..height {
            for x in 0..width {
                let (u, v) = f(x, y);
                dx.push(u);
                dy.push(v);
            }
        }
        DeformationField::new(width, height, dx, dy)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    pub fn dy(&self) -> &[f64] {
        &self.dy
    }

    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.dx[i], self.dy[i])
    }

    pub fn into_planes(self) -> (Vec<f64>, Vec<f64>) {
        (self.dx, self.dy)
    }

    pub fn magnitudes(&self) -> impl Iterator<Item = f64> + '_ {
        self.dx.iter().zip(&self.dy).map(|(u, v)| u.hypot(*v))
    }

    pub fn max_magnitude(&self) -> f64 {
        self.magnitudes().fold(0.0, f64::max)
    }

    pub fn mean_magnitude(&self) -> f64 {
        self.magnitudes().sum::<f64>() / (self.width * self.height) as f64
    }

    pub fn max_component(&self) -> f64 {
        self.dx
            .iter()
            .chain(&self.dy)
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Multiplies every displacement by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        DeformationField {
            width: self.width,
            height: self.height,
            dx: self.dx.iter().map(|v| v * factor).collect(),
            dy: self.dy.iter().map(|v| v * factor).collect(),
        }
    }
}

/// What a sample outside the image grid reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BorderPolicy {
    /// Out-of-range neighbours read the nearest edge pixel.
    #[default]
    Clamp,
    /// Out-of-range neighbours read zero.
    Zero,
}

/// Neighbour index and validity along one axis under a border policy.
#[inline]
fn tap(i: isize, n: usize, border: BorderPolicy) -> Option<usize> {
    if i >= 0 && (i as usize) < n {
        Some(i as usize)
    } else {
        match border {
            BorderPolicy::Clamp => Some(i.clamp(0, n as isize - 1) as usize),
            BorderPolicy::Zero => None,
        }
    }
}

#[inline]
fn fetch(src: &[f64], w: usize, x: Option<usize>, y: Option<usize>) -> f64 {
    match (x, y) {
        (Some(x), Some(y)) => src[y * w + x],
        _ => 0.0,
    }
}

/// Bilinear sample of a `w`x`h` plane at continuous coordinates `(x, y)`.
pub fn sample_bilinear(
    src: &[f64],
    w: usize,
    h: usize,
    x: f64,
    y: f64,
    border: BorderPolicy,
) -> f64 {
    let (x0f, y0f) = (x.floor(), y.floor());
    let (tx, ty) = (x - x0f, y - y0f);
    let (x0, y0) = (x0f as isize, y0f as isize);
    let (xa, xb) = (tap(x0, w, border), tap(x0 + 1, w, border));
    let (ya, yb) = (tap(y0, h, border), tap(y0 + 1, h, border));
    let top = (1.0 - tx) * fetch(src, w, xa, ya) + tx * fetch(src, w, xb, ya);
    let bottom = (1.0 - tx) * fetch(src, w, xa, yb) + tx * fetch(src, w, xb, yb);
    (1.0 - ty) * top + ty * bottom
}

/// Backward-warps one plane: `out[p] = sample(src, p + (dx[p], dy[p]))`.
pub fn warp_plane(
    src: &[f64],
    w: usize,
    h: usize,
    dx: &[f64],
    dy: &[f64],
    border: BorderPolicy,
    out: &mut [f64],
) {
    debug_assert!(src.len() == w * h && dx.len() == w * h && dy.len() == w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            out[i] = sample_bilinear(src, w, h, x as f64 + dx[i], y as f64 + dy[i], border);
        }
    }
}

/// Reverse-mode companion of [`warp_plane`]. Gradients are *accumulated*
/// into `grad_src`, `grad_dx` and `grad_dy`.
#[allow(clippy::too_many_arguments)]
pub fn warp_plane_backward(
    src: &[f64],
    w: usize,
    h: usize,
    dx: &[f64],
    dy: &[f64],
    border: BorderPolicy,
    upstream: &[f64],
    grad_src: Option<&mut [f64]>,
    grad_dx: &mut [f64],
    grad_dy: &mut [f64],
) {
    let mut grad_src = grad_src;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let g = upstream[i];
            if g == 0.0 {
                continue;
            }
            let (sx, sy) = (x as f64 + dx[i], y as f64 + dy[i]);
            let (x0f, y0f) = (sx.floor(), sy.floor());
            let (tx, ty) = (sx - x0f, sy - y0f);
            let (x0, y0) = (x0f as isize, y0f as isize);
            let (xa, xb) = (tap(x0, w, border), tap(x0 + 1, w, border));
            let (ya, yb) = (tap(y0, h, border), tap(y0 + 1, h, border));
            let v00 = fetch(src, w, xa, ya);
            let v10 = fetch(src, w, xb, ya);
            let v01 = fetch(src, w, xa, yb);
            let v11 = fetch(src, w, xb, yb);

            grad_dx[i] += g * ((1.0 - ty) * (v10 - v00) + ty * (v11 - v01));
            grad_dy[i] += g * ((1.0 - tx) * (v01 - v00) + tx * (v11 - v10));

            if let Some(gs) = grad_src.as_deref_mut() {
                let mut put = |xi: Option<usize>, yi: Option<usize>, wgt: f64| {
                    if let (Some(xi), Some(yi)) = (xi, yi) {
                        gs[yi * w + xi] += g * wgt;
                    }
                };
                put(xa, ya, (1.0 - tx) * (1.0 - ty));
                put(xb, ya, tx * (1.0 - ty));
                put(xa, yb, (1.0 - tx) * ty);
                put(xb, yb, tx * ty);
            }
        }
    }
}

/// Backward-warps `img` through `field` with bilinear interpolation.
pub fn warp(img: &Image, field: &DeformationField, border: BorderPolicy) -> Result<Image> {
    ensure_same_dims("warp", img.dims(), field.dims())?;
    let (w, h) = img.dims();
    let mut out = vec![0.0; w * h];
    warp_plane(img.data(), w, h, field.dx(), field.dy(), border, &mut out);
    Ok(Image::from_clamped(w, h, out))
}

/// Gradients of a scalar objective with respect to the inputs of [`warp`].
#[derive(Clone, Debug, PartialEq)]
pub struct WarpGradient {
    pub image: Vec<f64>,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

/// Pulls an upstream per-pixel gradient back through [`warp`].
pub fn warp_gradient(
    img: &Image,
    field: &DeformationField,
    upstream: &[f64],
    border: BorderPolicy,
) -> Result<WarpGradient> {
    ensure_same_dims("warp_gradient", img.dims(), field.dims())?;
    let (w, h) = img.dims();
    if upstream.len() != w * h {
        return Err(Error::DimensionMismatch(format!(
            "upstream gradient has {} entries, image has {}",
            upstream.len(),
            w * h
        )));
    }
    let mut grad = WarpGradient {
        image: vec![0.0; w * h],
        dx: vec![0.0; w * h],
        dy: vec![0.0; w * h],
    };
    warp_plane_backward(
        img.data(),
        w,
        h,
        field.dx(),
        field.dy(),
        border,
        upstream,
        Some(&mut grad.image),
        &mut grad.dx,
        &mut grad.dy,
    );
    Ok(grad)
}
