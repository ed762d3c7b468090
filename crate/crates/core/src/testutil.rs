//! Shared helpers for unit tests: random instances and a finite-difference oracle.

use crate::imaging::{DeformationField, Image};
use crate::metrics::Mask;
use rand::Rng;

/// Central differences of `f` with respect to every entry of `at`.
pub fn central_difference(at: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = at.to_vec();
    (0..at.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest per-entry relative disagreement; entries whose magnitude is below
/// `1e-6` are compared absolutely against that floor.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

pub fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> Image {
    Image::new(w, h, (0..w * h).map(|_| rng.random::<f64>()).collect()).unwrap()
}

pub fn random_field(rng: &mut impl Rng, w: usize, h: usize, amp: f64) -> DeformationField {
    let n = w * h;
    DeformationField::new(
        w,
        h,
        (0..n).map(|_| rng.random_range(-amp..amp)).collect(),
        (0..n).map(|_| rng.random_range(-amp..amp)).collect(),
    )
    .unwrap()
}

pub fn random_mask(rng: &mut impl Rng, w: usize, h: usize, p: f64) -> Mask {
    loop {
        let data: Vec<bool> = (0..w * h).map(|_| rng.random::<f64>() < p).collect();
        if data.iter().any(|&b| b) {
            return Mask::new(w, h, data).unwrap();
        }
    }
}
