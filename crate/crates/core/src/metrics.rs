//! Evaluation metrics: NMI, SSIM and MSE on images; Dice, HD95 and MAD on
//! binary masks.

use crate::error::{ensure_same_dims, Error, Result};
use crate::imaging::Image;

pub const DEFAULT_BINS: usize = 32;
pub const DEFAULT_SSIM_WINDOW: usize = 7;
pub const DEFAULT_C1: f64 = 0.01 * 0.01;
pub const DEFAULT_C2: f64 = 0.03 * 0.03;

/// Hard bin of an intensity in `[0, 1]` among `bins` uniform bins.
#[inline]
pub(crate) fn hard_bin(v: f64, bins: usize) -> usize {
    ((v * bins as f64).floor() as usize).min(bins - 1)
}

/// Entropy (nats) of a probability vector; zero cells contribute nothing.
fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&q| q > 0.0)
        .map(|&q| q * q.ln())
        .sum::<f64>()
}

/// Normalized mutual information `2 I(A;B) / (H(A) + H(B))` over a
/// `bins`x`bins` joint histogram. Two constant images score 1.
pub fn nmi(a: &Image, b: &Image, bins: usize) -> Result<f64> {
    ensure_same_dims("nmi", a.dims(), b.dims())?;
    if bins < 2 {
        return Err(Error::InvalidArgument(format!(
            "nmi needs at least 2 bins, got {bins}"
        )));
    }
    let n = a.len() as f64;
    let mut joint = vec![0.0; bins * bins];
    for (&u, &v) in a.data().iter().zip(b.data()) {
        joint[hard_bin(u, bins) * bins + hard_bin(v, bins)] += 1.0;
    }
    joint.iter_mut().for_each(|c| *c /= n);
    let pa: Vec<f64> = joint.chunks(bins).map(|row| row.iter().sum()).collect();
    let pb: Vec<f64> = (0..bins)
        .map(|l| (0..bins).map(|k| joint[k * bins + l]).sum())
        .collect();
    Ok(nmi_from_entropies(
        entropy(&pa),
        entropy(&pb),
        entropy(&joint),
    ))
}

pub(crate) fn nmi_from_entropies(ha: f64, hb: f64, hab: f64) -> f64 {
    let s = ha + hb;
    if s <= 0.0 {
        return 1.0;
    }
    (2.0 * (s - hab) / s).clamp(0.0, 1.0)
}

/// First and second moments of every fully contained `window`x`window`
/// patch, in row-major window order.
#[derive(Clone, Debug)]
pub(crate) struct WindowStats {
    pub mu_a: Vec<f64>,
    pub mu_b: Vec<f64>,
    pub var_a: Vec<f64>,
    pub var_b: Vec<f64>,
    pub cov: Vec<f64>,
}

/// Sums over every valid `k`x`k` window of a `w`x`h` plane.
pub(crate) fn box_sums(src: &[f64], w: usize, h: usize, k: usize) -> Vec<f64> {
    let (cols, rows) = (w - k + 1, h - k + 1);
    let mut horiz = vec![0.0; cols * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..cols {
            horiz[y * cols + x] = row[x..x + k].iter().sum();
        }
    }
    let mut out = vec![0.0; cols * rows];
    for y in 0..rows {
        for x in 0..cols {
            out[y * cols + x] = (0..k).map(|d| horiz[(y + d) * cols + x]).sum();
        }
    }
    out
}

/// Adjoint of [`box_sums`]: every pixel receives the total of the window
/// values whose windows contain it.
pub(crate) fn box_spread(win: &[f64], w: usize, h: usize, k: usize) -> Vec<f64> {
    let (cols, rows) = (w - k + 1, h - k + 1);
    let mut vert = vec![0.0; cols * h];
    for y in 0..rows {
        for x in 0..cols {
            let v = win[y * cols + x];
            for d in 0..k {
                vert[(y + d) * cols + x] += v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..cols {
            let v = vert[y * cols + x];
            for d in 0..k {
                out[y * w + x + d] += v;
            }
        }
    }
    out
}

pub(crate) fn window_stats(a: &[f64], b: &[f64], w: usize, h: usize, k: usize) -> WindowStats {
    let n = (k * k) as f64;
    let sq = |s: &[f64]| s.iter().map(|v| v * v).collect::<Vec<_>>();
    let prod: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let sa = box_sums(a, w, h, k);
    let sb = box_sums(b, w, h, k);
    let saa = box_sums(&sq(a), w, h, k);
    let sbb = box_sums(&sq(b), w, h, k);
    let sab = box_sums(&prod, w, h, k);
    let mu_a: Vec<f64> = sa.iter().map(|s| s / n).collect();
    let mu_b: Vec<f64> = sb.iter().map(|s| s / n).collect();
    let var_a = saa.iter().zip(&mu_a).map(|(s, m)| s / n - m * m).collect();
    let var_b = sbb.iter().zip(&mu_b).map(|(s, m)| s / n - m * m).collect();
    let cov = sab
        .iter()
        .zip(mu_a.iter().zip(&mu_b))
        .map(|(s, (ma, mb))| s / n - ma * mb)
        .collect();
    WindowStats {
        mu_a,
        mu_b,
        var_a,
        var_b,
        cov,
    }
}

pub(crate) fn check_ssim_args(a: &Image, b: &Image, window: usize, c1: f64, c2: f64) -> Result<()> {
    ensure_same_dims("ssim", a.dims(), b.dims())?;
    if window < 3 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "ssim window must be odd and >= 3, got {window}"
        )));
    }
    if window > a.width() || window > a.height() {
        return Err(Error::InvalidArgument(format!(
            "ssim window {window} larger than {}x{} image",
            a.width(),
            a.height()
        )));
    }
    if !(c1 > 0.0 && c2 > 0.0) {
        return Err(Error::InvalidArgument(
            "ssim constants must be positive".into(),
        ));
    }
    Ok(())
}

/// SSIM of one window from its moments.
#[inline]
pub(crate) fn ssim_window(
    mu_a: f64,
    mu_b: f64,
    var_a: f64,
    var_b: f64,
    cov: f64,
    c1: f64,
    c2: f64,
) -> f64 {
    let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
    let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
    num / den
}

/// Mean SSIM over every fully contained square window (uniform weights,
/// population moments).
pub fn ssim(a: &Image, b: &Image, window: usize, c1: f64, c2: f64) -> Result<f64> {
    check_ssim_args(a, b, window, c1, c2)?;
    let st = window_stats(a.data(), b.data(), a.width(), a.height(), window);
    let total: f64 = (0..st.mu_a.len())
        .map(|i| {
            ssim_window(
                st.mu_a[i],
                st.mu_b[i],
                st.var_a[i],
                st.var_b[i],
                st.cov[i],
                c1,
                c2,
            )
        })
        .sum();
    Ok(total / st.mu_a.len() as f64)
}

/// [`ssim`] with the default window and constants.
pub fn ssim_default(a: &Image, b: &Image) -> Result<f64> {
    ssim(a, b, DEFAULT_SSIM_WINDOW, DEFAULT_C1, DEFAULT_C2)
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    ensure_same_dims("mse", a.dims(), b.dims())?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.len() as f64)
}

/// Binary structure mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "mask of {} entries does not fit {width}x{height}",
                data.len()
            )));
        }
        Ok(Mask {
            width,
            height,
            data,
        })
    }

    /// Pixels of `img` at or above `threshold` are members.
    pub fn from_threshold(img: &Image, threshold: f64) -> Self {
        Mask {
            width: img.width(),
            height: img.height(),
            data: img.data().iter().map(|&v| v >= threshold).collect(),
        }
    }

    /// Membership as a 0/1 image, for warping.
    pub fn to_image(&self) -> Image {
        Image::from_clamped(
            self.width,
            self.height,
            self.data
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        )
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

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    /// Members with at least one 4-neighbour outside the mask; the image
    /// border counts as outside.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let (w, h) = (self.width, self.height);
        let inside = |x: isize, y: isize| {
            x >= 0
                && y >= 0
                && (x as usize) < w
                && (y as usize) < h
                && self.get(x as usize, y as usize)
        };
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !self.get(x, y) {
                    continue;
                }
                let (xi, yi) = (x as isize, y as isize);
                if !(inside(xi - 1, yi)
                    && inside(xi + 1, yi)
                    && inside(xi, yi - 1)
                    && inside(xi, yi + 1))
                {
                    out.push((x, y));
                }
            }
        }
        out
    }
}

/// `2|A∩B| / (|A|+|B|)`; two empty masks agree perfectly.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    ensure_same_dims("dice", a.dims(), b.dims())?;
    let (na, nb) = (a.count(), b.count());
    if na + nb == 0 {
        return Ok(1.0);
    }
    let both = a
        .data
        .iter()
        .zip(&b.data)
        .filter(|(x, y)| **x && **y)
        .count();
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

const FAR: f64 = 1e20;

/// One-dimensional squared Euclidean distance transform of a sampled
/// function (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let fq = f[q] + (q * q) as f64;
        let mut s;
        loop {
            let p = v[k];
            s = (fq - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                break;
            }
        }
        if s <= z[k] {
            // k == 0 and the new parabola dominates everywhere.
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            continue;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared distance from every pixel to the nearest seed pixel.
fn squared_distance_map(w: usize, h: usize, seeds: &[(usize, usize)]) -> Vec<f64> {
    let mut grid = vec![FAR; w * h];
    for &(x, y) in seeds {
        grid[y * w + x] = 0.0;
    }
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut col_out);
        for y in 0..h {
            grid[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; w];
    for y in 0..h {
        edt_1d(&grid[y * w..(y + 1) * w], &mut row_out);
        grid[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    grid
}

/// Symmetric boundary-to-boundary nearest distances (A to B, then B to A),
/// sorted ascending.
pub fn surface_distances(a: &Mask, b: &Mask) -> Result<Vec<f64>> {
    ensure_same_dims("surface_distances", a.dims(), b.dims())?;
    if a.count() == 0 || b.count() == 0 {
        return Err(Error::EmptyMask);
    }
    let (w, h) = a.dims();
    let (ba, bb) = (a.boundary(), b.boundary());
    let to_b = squared_distance_map(w, h, &bb);
    let to_a = squared_distance_map(w, h, &ba);
    let mut out: Vec<f64> = ba
        .iter()
        .map(|&(x, y)| to_b[y * w + x].sqrt())
        .chain(bb.iter().map(|&(x, y)| to_a[y * w + x].sqrt()))
        .collect();
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Nearest-rank percentile (`0 < pct <= 100`) of an ascending list.
pub fn nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    let rank = ((pct / 100.0) * n as f64).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

/// 95th-percentile symmetric Hausdorff distance.
pub fn hd95(a: &Mask, b: &Mask) -> Result<f64> {
    Ok(nearest_rank(&surface_distances(a, b)?, 95.0))
}

/// Mean absolute symmetric surface distance.
pub fn mad(a: &Mask, b: &Mask) -> Result<f64> {
    let d = surface_distances(a, b)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_image, random_mask};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_nmi(a: &[f64], b: &[f64], bins: usize) -> f64 {
        let n = a.len() as f64;
        let mut joint = vec![vec![0.0; bins]; bins];
        for i in 0..a.len() {
            let ka = ((a[i] * bins as f64) as usize).min(bins - 1);
            let kb = ((b[i] * bins as f64) as usize).min(bins - 1);
            joint[ka][kb] += 1.0 / n;
        }
        let h = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
        let mut ha = 0.0;
        let mut hb = 0.0;
        let mut hab = 0.0;
        for k in 0..bins {
            ha += h(joint[k].iter().sum());
            hb += h((0..bins).map(|j| joint[j][k]).sum());
            for l in 0..bins {
                hab += h(joint[k][l]);
            }
        }
        if ha + hb == 0.0 {
            1.0
        } else {
            2.0 * (ha + hb - hab) / (ha + hb)
        }
    }

    fn brute_ssim(a: &Image, b: &Image, k: usize, c1: f64, c2: f64) -> f64 {
        let (w, h) = a.dims();
        let n = (k * k) as f64;
        let mut total = 0.0;
        let mut count = 0.0;
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let mut ma = 0.0;
                let mut mb = 0.0;
                for y in y0..y0 + k {
                    for x in x0..x0 + k {
                        ma += a.get(x, y);
                        mb += b.get(x, y);
                    }
                }
                ma /= n;
                mb /= n;
                let (mut va, mut vb, mut cv) = (0.0, 0.0, 0.0);
                for y in y0..y0 + k {
                    for x in x0..x0 + k {
                        let (da, db) = (a.get(x, y) - ma, b.get(x, y) - mb);
                        va += da * da;
                        vb += db * db;
                        cv += da * db;
                    }
                }
                let (va, vb, cv) = (va / n, vb / n, cv / n);
                total += ((2.0 * ma * mb + c1) * (2.0 * cv + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        total / count
    }

    #[test]
    fn self_nmi_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 8, 8);
        assert!((nmi(&a, &a, 16).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn swapped_two_level_images() {
        let a = Image::new(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let b = Image::new(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((nmi(&a, &b, 2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_images_nmi_is_one() {
        let a = Image::constant(3, 3, 0.2).unwrap();
        assert_eq!(nmi(&a, &a, 8).unwrap(), 1.0);
        assert!(nmi(&a, &a, 1).is_err());
    }

    #[test]
    fn nmi_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let a = random_image(&mut rng, 2, 2);
            let b = random_image(&mut rng, 2, 2);
            let bins = rng.random_range(2..6);
            let got = nmi(&a, &b, bins).unwrap();
            assert!((got - brute_nmi(a.data(), b.data(), bins)).abs() < 1e-12);
        }
    }

    #[test]
    fn nmi_invariant_under_bin_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bins = 6;
        let perm = [3usize, 0, 5, 1, 4, 2];
        let a = random_image(&mut rng, 7, 7);
        let b = random_image(&mut rng, 7, 7);
        let relabel = |img: &Image| {
            let data = img
                .data()
                .iter()
                .map(|&v| (perm[hard_bin(v, bins)] as f64 + 0.5) / bins as f64)
                .collect();
            Image::new(img.width(), img.height(), data).unwrap()
        };
        let base = nmi(&a, &b, bins).unwrap();
        let moved = nmi(&relabel(&a), &relabel(&b), bins).unwrap();
        assert!((base - moved).abs() < 1e-12);
    }

    #[test]
    fn ssim_identity_and_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_image(&mut rng, 9, 9);
        assert_eq!(ssim_default(&a, &a).unwrap(), 1.0);
        let p = Image::constant(5, 5, 0.3).unwrap();
        let q = Image::constant(5, 5, 0.7).unwrap();
        let (c1, c2) = (DEFAULT_C1, DEFAULT_C2);
        let expected = ((2.0 * 0.21 + c1) * c2) / ((0.09 + 0.49 + c1) * c2);
        assert!((ssim(&p, &q, 3, c1, c2).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ssim_argument_errors() {
        let a = Image::constant(5, 5, 0.3).unwrap();
        assert!(ssim(&a, &a, 7, DEFAULT_C1, DEFAULT_C2).is_err());
        assert!(ssim(&a, &a, 4, DEFAULT_C1, DEFAULT_C2).is_err());
        assert!(ssim(&a, &a, 3, 0.0, DEFAULT_C2).is_err());
        assert!(ssim(
            &a,
            &Image::constant(5, 6, 0.3).unwrap(),
            3,
            DEFAULT_C1,
            DEFAULT_C2
        )
        .is_err());
    }

    #[test]
    fn ssim_brute_force_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = random_image(&mut rng, 8, 8);
            let b = random_image(&mut rng, 8, 8);
            let s = ssim(&a, &b, 3, DEFAULT_C1, DEFAULT_C2).unwrap();
            assert!((s - brute_ssim(&a, &b, 3, DEFAULT_C1, DEFAULT_C2)).abs() < 1e-9);
            assert!((s - ssim(&b, &a, 3, DEFAULT_C1, DEFAULT_C2).unwrap()).abs() < 1e-15);
            assert!((-1.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn box_spread_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (w, h, k) = (9, 7, 3);
        let x: Vec<f64> = (0..w * h).map(|_| rng.random()).collect();
        let y: Vec<f64> = (0..(w - k + 1) * (h - k + 1))
            .map(|_| rng.random())
            .collect();
        let lhs: f64 = box_sums(&x, w, h, k)
            .iter()
            .zip(&y)
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = box_spread(&y, w, h, k)
            .iter()
            .zip(&x)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn mse_examples() {
        let z = Image::constant(3, 3, 0.0).unwrap();
        let o = Image::constant(3, 3, 1.0).unwrap();
        assert_eq!(mse(&z, &o).unwrap(), 1.0);
        assert_eq!(mse(&o, &o).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_image(&mut rng, 3, 3);
        let b = random_image(&mut rng, 3, 3);
        let mut s = 0.0;
        for y in 0..3 {
            for x in 0..3 {
                s += (a.get(x, y) - b.get(x, y)).powi(2);
            }
        }
        assert!((mse(&a, &b).unwrap() - s / 9.0).abs() < 1e-15);
    }

    #[test]
    fn dice_examples() {
        let a = Mask::new(2, 2, vec![true, true, false, false]).unwrap();
        let b = Mask::new(2, 2, vec![false, true, true, false]).unwrap();
        let c = Mask::new(2, 2, vec![false, false, true, true]).unwrap();
        let e = Mask::new(2, 2, vec![false; 4]).unwrap();
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &c).unwrap(), 0.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(dice(&e, &a).unwrap(), 0.0);
    }

    fn single(w: usize, h: usize, x: usize, y: usize) -> Mask {
        let mut d = vec![false; w * h];
        d[y * w + x] = true;
        Mask::new(w, h, d).unwrap()
    }

    #[test]
    fn single_pixel_distances() {
        let a = single(6, 6, 0, 0);
        let b = single(6, 6, 3, 4);
        assert_eq!(surface_distances(&a, &b).unwrap(), vec![5.0, 5.0]);
        assert_eq!(hd95(&a, &b).unwrap(), 5.0);
        assert_eq!(mad(&a, &b).unwrap(), 5.0);
        assert!(matches!(
            hd95(&a, &Mask::new(6, 6, vec![false; 36]).unwrap()),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn identical_masks_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random_mask(&mut rng, 10, 10, 0.3);
        assert!(surface_distances(&m, &m).unwrap().iter().all(|&d| d == 0.0));
        assert_eq!(hd95(&m, &m).unwrap(), 0.0);
        assert_eq!(mad(&m, &m).unwrap(), 0.0);
    }

    #[test]
    fn surface_distances_match_all_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            let (w, h) = (rng.random_range(3..12), rng.random_range(3..12));
            let a = random_mask(&mut rng, w, h, 0.3);
            let b = random_mask(&mut rng, w, h, 0.3);
            let nearest = |from: &[(usize, usize)], to: &[(usize, usize)]| {
                from.iter()
                    .map(|&(x, y)| {
                        to.iter()
                            .map(|&(u, v)| {
                                ((x as f64 - u as f64).powi(2) + (y as f64 - v as f64).powi(2))
                                    .sqrt()
                            })
                            .fold(f64::INFINITY, f64::min)
                    })
                    .collect::<Vec<_>>()
            };
            let (ba, bb) = (a.boundary(), b.boundary());
            let mut expected = nearest(&ba, &bb);
            expected.extend(nearest(&bb, &ba));
            expected.sort_by(f64::total_cmp);
            let got = surface_distances(&a, &b).unwrap();
            assert_eq!(got.len(), expected.len());
            for (g, e) in got.iter().zip(&expected) {
                assert!((g - e).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn nearest_rank_of_twenty() {
        let d: Vec<f64> = (1..=20).map(|v| v as f64).collect();
        // ceil(0.95 * 20) = 19th smallest.
        assert_eq!(nearest_rank(&d, 95.0), 19.0);
        assert_eq!(nearest_rank(&d[..1], 95.0), 1.0);
    }
}
