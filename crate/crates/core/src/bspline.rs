//! Uniform cubic B-spline control grids spanning an image.
//!
//! Control point `(i, j)` sits at pixel `(i * (w-1)/(nx-1), j * (h-1)/(ny-1))`.
//! Evaluation uses the four-tap local form; taps that fall off the grid
//! reuse the nearest edge coefficient, which keeps the basis a partition of
//! unity everywhere.

use crate::error::{Error, Result};

/// Cubic B-spline weights for the taps `i-1, i, i+1, i+2` at fraction `t`.
#[inline]
pub fn cubic_weights(t: f64) -> [f64; 4] {
    let s = 1.0 - t;
    let t2 = t * t;
    let t3 = t2 * t;
    [
        s * s * s / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

/// Per-pixel taps along one axis: control indices and their weights.
#[derive(Clone, Debug)]
struct AxisTaps {
    index: Vec<[usize; 4]>,
    weight: Vec<[f64; 4]>,
}

impl AxisTaps {
    fn new(pixels: usize, controls: usize) -> Self {
        let scale = if pixels > 1 {
            (controls - 1) as f64 / (pixels - 1) as f64
        } else {
            0.0
        };
        let last = controls as isize - 1;
        let (mut index, mut weight) = (Vec::with_capacity(pixels), Vec::with_capacity(pixels));
        for p in 0..pixels {
            let u = p as f64 * scale;
            let base = u.floor();
            let i = base as isize;
            let w = cubic_weights(u - base);
            let idx = [
                (i - 1).clamp(0, last) as usize,
                i.clamp(0, last) as usize,
                (i + 1).clamp(0, last) as usize,
                (i + 2).clamp(0, last) as usize,
            ];
            index.push(idx);
            weight.push(w);
        }
        AxisTaps { index, weight }
    }
}

/// Linear map from an `nx`x`ny` coefficient grid to a `width`x`height` plane.
#[derive(Clone, Debug)]
pub struct GridSampler {
    nx: usize,
    ny: usize,
    width: usize,
    height: usize,
    xs: AxisTaps,
    ys: AxisTaps,
}

impl GridSampler {
    pub fn new(nx: usize, ny: usize, width: usize, height: usize) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::InvalidArgument(format!(
                "control grid must be at least 2x2, got {nx}x{ny}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("zero-sized output plane".into()));
        }
        Ok(GridSampler {
            nx,
            ny,
            width,
            height,
            xs: AxisTaps::new(width, nx),
            ys: AxisTaps::new(height, ny),
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    /// Interpolates `coeffs` (row-major `ny`x`nx`) to every pixel.
    pub fn evaluate(&self, coeffs: &[f64]) -> Vec<f64> {
        assert_eq!(coeffs.len(), self.nx * self.ny);
        // Along x first: one row of `width` samples per control row.
        let mut rows = vec![0.0; self.ny * self.width];
        for j in 0..self.ny {
            let c = &coeffs[j * self.nx..(j + 1) * self.nx];
            for x in 0..self.width {
                let (idx, w) = (&self.xs.index[x], &self.xs.weight[x]);
                rows[j * self.width + x] =
                    w[0] * c[idx[0]] + w[1] * c[idx[1]] + w[2] * c[idx[2]] + w[3] * c[idx[3]];
            }
        }
        let mut out = vec![0.0; self.width * self.height];
        for y in 0..self.height {
            let (idx, w) = (&self.ys.index[y], &self.ys.weight[y]);
            let dst = &mut out[y * self.width..(y + 1) * self.width];
            for k in 0..4 {
                let src = &rows[idx[k] * self.width..(idx[k] + 1) * self.width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w[k] * s;
                }
            }
        }
        out
    }

    /// Adjoint of [`evaluate`](Self::evaluate): maps a per-pixel gradient to
    /// a per-coefficient gradient.
    pub fn adjoint(&self, pixel_grad: &[f64]) -> Vec<f64> {
        assert_eq!(pixel_grad.len(), self.width * self.height);
        let mut rows = vec![0.0; self.ny * self.width];
        for y in 0..self.height {
            let (idx, w) = (&self.ys.index[y], &self.ys.weight[y]);
            let src = &pixel_grad[y * self.width..(y + 1) * self.width];
            for k in 0..4 {
                let dst = &mut rows[idx[k] * self.width..(idx[k] + 1) * self.width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w[k] * s;
                }
            }
        }
        let mut out = vec![0.0; self.nx * self.ny];
        for j in 0..self.ny {
            for x in 0..self.width {
                let g = rows[j * self.width + x];
                let (idx, w) = (&self.xs.index[x], &self.xs.weight[x]);
                for k in 0..4 {
                    out[j * self.nx + idx[k]] += w[k] * g;
                }
            }
        }
        out
    }
}
