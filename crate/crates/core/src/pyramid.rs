//! Gaussian and Laplacian pyramids over channel-planar rasters.
//!
//! `downsample` smooths with the 5-tap binomial kernel `[1, 4, 6, 4, 1] / 16` (applied
//! separably, reflect borders) and keeps every second row and column. `upsample` is a
//! bilinear resize to twice the side. Band `l` of the Laplacian stack is
//! `g[l] - upsample(g[l + 1])`; the last level holds the coarsest Gaussian level, so
//! reconstruction is exact up to rounding.

use ndarray::Array3;

use crate::image_io::resize_bilinear;
use crate::{Error, Result};

pub const BINOMIAL_5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
pub const DEFAULT_LEVELS: usize = 4;

/// Mirror index into `0..n` without repeating the edge sample (`-1 -> 1`, `n -> n - 2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Separable correlation with a symmetric odd-length kernel and reflect borders.
pub fn convolve_separable(raster: &Array3<f64>, kernel: &[f64]) -> Array3<f64> {
    let (c, h, w) = raster.dim();
    let r = (kernel.len() / 2) as isize;
    let mut tmp = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, wgt) in kernel.iter().enumerate() {
                    let xx = reflect_index(x as isize + k as isize - r, w);
                    acc += wgt * raster[[ch, y, xx]];
                }
                tmp[[ch, y, x]] = acc;
            }
        }
    }
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for (k, wgt) in kernel.iter().enumerate() {
                let yy = reflect_index(y as isize + k as isize - r, h);
                for x in 0..w {
                    out[[ch, y, x]] += wgt * tmp[[ch, yy, x]];
                }
            }
        }
    }
    out
}

/// 5×5 binomial smoothing.
pub fn gaussian_blur(raster: &Array3<f64>) -> Result<Array3<f64>> {
    let (_, h, w) = raster.dim();
    if h < BINOMIAL_5.len() || w < BINOMIAL_5.len() {
        return Err(Error::Dimension(format!(
            "raster {h}x{w} is smaller than the 5x5 smoothing kernel"
        )));
    }
    Ok(convolve_separable(raster, &BINOMIAL_5))
}

/// Smooth, then keep even rows and columns.
pub fn downsample(raster: &Array3<f64>) -> Result<Array3<f64>> {
    let (_, h, w) = raster.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "cannot halve a {h}x{w} raster: sides must be even"
        )));
    }
    let blurred = gaussian_blur(raster)?;
    Ok(blurred.slice(ndarray::s![.., ..;2, ..;2]).to_owned())
}

/// Bilinear resize of a square raster to `target_side`, which must be twice its side.
pub fn upsample(raster: &Array3<f64>, target_side: usize) -> Result<Array3<f64>> {
    let (_, h, w) = raster.dim();
    if h != w || target_side != 2 * h {
        return Err(Error::Dimension(format!(
            "upsample target {target_side} must be twice the input side ({h}x{w})"
        )));
    }
    Ok(resize_bilinear(raster, target_side, target_side))
}

fn check_pyramid_shape(h: usize, w: usize, depth: usize) -> Result<()> {
    if depth == 0 {
        return Err(Error::Parameter("pyramid depth must be at least 1".into()));
    }
    if h != w {
        return Err(Error::Dimension(format!("pyramid input must be square, got {h}x{w}")));
    }
    let factor = 1usize
        .checked_shl(depth as u32)
        .ok_or_else(|| Error::Parameter(format!("pyramid depth {depth} too large")))?;
    if h % factor != 0 || h / factor == 0 {
        return Err(Error::Dimension(format!(
            "side {h} is not divisible by 2^{depth}"
        )));
    }
    Ok(())
}

/// `g[0] = raster`, `g[l + 1] = downsample(g[l])`.
pub fn gaussian_pyramid(raster: &Array3<f64>, depth: usize) -> Result<Vec<Array3<f64>>> {
    let (_, h, w) = raster.dim();
    check_pyramid_shape(h, w, depth)?;
    let mut levels = Vec::with_capacity(depth + 1);
    levels.push(raster.clone());
    for l in 0..depth {
        let next = downsample(&levels[l])?;
        levels.push(next);
    }
    Ok(levels)
}

/// Laplacian pyramid: `depth` band-pass levels followed by the low-pass residual.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianStack {
    pub levels: Vec<Array3<f64>>,
    pub depth: usize,
    pub base_side: usize,
}

impl LaplacianStack {
    /// Checks the level count and the halving shape law.
    pub fn validate(&self) -> Result<()> {
        if self.levels.len() != self.depth + 1 {
            return Err(Error::Dimension(format!(
                "stack of depth {} must hold {} levels, found {}",
                self.depth,
                self.depth + 1,
                self.levels.len()
            )));
        }
        let channels = self.levels[0].dim().0;
        for (l, level) in self.levels.iter().enumerate() {
            let expected = self.base_side >> l;
            let (c, h, w) = level.dim();
            if c != channels || h != expected || w != expected {
                return Err(Error::Dimension(format!(
                    "level {l} has shape {c}x{h}x{w}, expected {channels}x{expected}x{expected}"
                )));
            }
        }
        Ok(())
    }

    pub fn sides(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.dim().1).collect()
    }

    pub fn scaled(&self, factor: f64) -> LaplacianStack {
        LaplacianStack {
            levels: self.levels.iter().map(|l| l * factor).collect(),
            depth: self.depth,
            base_side: self.base_side,
        }
    }
}

pub fn laplacian_decompose(raster: &Array3<f64>, depth: usize) -> Result<LaplacianStack> {
    let gaussian = gaussian_pyramid(raster, depth)?;
    let mut levels = Vec::with_capacity(depth + 1);
    for l in 0..depth {
        let side = gaussian[l].dim().1;
        let up = upsample(&gaussian[l + 1], side)?;
        levels.push(&gaussian[l] - &up);
    }
    levels.push(gaussian[depth].clone());
    Ok(LaplacianStack {
        levels,
        depth,
        base_side: raster.dim().1,
    })
}

/// Inverse of [`laplacian_decompose`]: `g[L] = p[L]`, `g[l] = p[l] + upsample(g[l + 1])`.
pub fn laplacian_reconstruct(stack: &LaplacianStack) -> Result<Array3<f64>> {
    stack.validate()?;
    let mut current = stack.levels[stack.depth].clone();
    for l in (0..stack.depth).rev() {
        let side = stack.levels[l].dim().1;
        current = &stack.levels[l] + &upsample(&current, side)?;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_raster(c: usize, side: usize, seed: u64) -> Array3<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((c, side, side), |_| rng.gen::<f64>())
    }

    fn total_variation(r: &Array3<f64>) -> f64 {
        let (c, h, w) = r.dim();
        let mut tv = 0.0;
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    if x + 1 < w {
                        tv += (r[[ch, y, x + 1]] - r[[ch, y, x]]).abs();
                    }
                    if y + 1 < h {
                        tv += (r[[ch, y + 1, x]] - r[[ch, y, x]]).abs();
                    }
                }
            }
        }
        tv
    }

    #[test]
    fn reflect_index_folds() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        assert_eq!(reflect_index(-9, 3), 1);
    }

    #[test]
    fn blur_keeps_constants() {
        let r = Array3::from_elem((3, 9, 9), 0.37);
        let b = gaussian_blur(&r).unwrap();
        assert!(b.iter().all(|v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn blur_impulse_center() {
        let mut r = Array3::zeros((1, 9, 9));
        r[[0, 4, 4]] = 1.0;
        let b = gaussian_blur(&r).unwrap();
        // direct evaluation of the 5x5 outer product kernel
        let mut expected = Array3::zeros((1, 9, 9));
        for (i, wi) in BINOMIAL_5.iter().enumerate() {
            for (j, wj) in BINOMIAL_5.iter().enumerate() {
                expected[[0, 2 + i, 2 + j]] = wi * wj;
            }
        }
        assert_eq!(b[[0, 4, 4]], 0.140625);
        for (a, e) in b.iter().zip(expected.iter()) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn blur_rejects_small_rasters() {
        let r = Array3::zeros((1, 4, 8));
        assert!(matches!(gaussian_blur(&r), Err(Error::Dimension(_))));
    }

    #[test]
    fn blur_reduces_total_variation() {
        for seed in 0..20 {
            let r = random_raster(1, 16, seed);
            let b = gaussian_blur(&r).unwrap();
            assert!(total_variation(&b) < total_variation(&r));
        }
    }

    #[test]
    fn downsample_shapes() {
        let r = Array3::from_elem((3, 256, 256), 0.2);
        let d = downsample(&r).unwrap();
        assert_eq!(d.dim(), (3, 128, 128));
        assert!(d.iter().all(|v| (v - 0.2).abs() < 1e-15));
        let mut g = r;
        for _ in 0..4 {
            g = downsample(&g).unwrap();
        }
        assert_eq!(g.dim(), (3, 16, 16));
        assert!(matches!(
            downsample(&Array3::zeros((1, 9, 9))),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn upsample_contract() {
        let r = Array3::from_elem((3, 16, 16), 0.61);
        let u = upsample(&r, 32).unwrap();
        assert_eq!(u.dim(), (3, 32, 32));
        assert!(u.iter().all(|v| (v - 0.61).abs() < 1e-15));
        assert_eq!(
            upsample(&Array3::zeros((1, 128, 128)), 256).unwrap().dim(),
            (1, 256, 256)
        );
        assert!(matches!(upsample(&r, 48), Err(Error::Dimension(_))));
    }

    #[test]
    fn up_of_down_approximates_band_limited() {
        for seed in 0..5 {
            let mut r = random_raster(1, 64, seed);
            for _ in 0..24 {
                r = gaussian_blur(&r).unwrap();
            }
            let back = upsample(&downsample(&r).unwrap(), 64).unwrap();
            let worst = (&back - &r).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(worst < 1e-2, "worst {worst}");
        }
    }

    #[test]
    fn decompose_shapes_and_constants() {
        let r = Array3::from_elem((3, 256, 256), 0.4);
        let stack = laplacian_decompose(&r, 4).unwrap();
        assert_eq!(stack.sides(), vec![256, 128, 64, 32, 16]);
        for band in &stack.levels[..4] {
            assert!(band.iter().all(|&v| v == 0.0));
        }
        assert!(stack.levels[4].iter().all(|v| (v - 0.4).abs() < 1e-15));
        assert!(matches!(
            laplacian_decompose(&Array3::zeros((3, 40, 40)), 4),
            Err(Error::Dimension(_))
        ));
        assert!(laplacian_decompose(&r, 0).is_err());
    }

    #[test]
    fn band_energy_sits_on_edges() {
        let side = 64;
        let c = (side as f64 - 1.0) / 2.0;
        let disc = Array3::from_shape_fn((1, side, side), |(_, y, x)| {
            let d = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
            if d <= 20.0 {
                0.8
            } else {
                0.1
            }
        });
        let stack = laplacian_decompose(&disc, 3).unwrap();
        let (mut edge, mut edge_n, mut flat, mut flat_n) = (0.0, 0, 0.0, 0);
        for y in 0..side {
            for x in 0..side {
                let d = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
                let v = stack.levels[0][[0, y, x]].abs();
                if (d - 20.0).abs() < 1.5 {
                    edge += v;
                    edge_n += 1;
                } else if d < 12.0 {
                    flat += v;
                    flat_n += 1;
                }
            }
        }
        assert!(edge / edge_n as f64 > 20.0 * (flat / flat_n as f64 + 1e-12));
    }

    #[test]
    fn reconstruct_of_zeros_and_malformed() {
        let zero = laplacian_decompose(&Array3::zeros((3, 32, 32)), 2).unwrap();
        assert!(laplacian_reconstruct(&zero).unwrap().iter().all(|&v| v == 0.0));
        let mut bad = zero.clone();
        bad.levels[1] = Array3::zeros((3, 15, 15));
        assert!(matches!(laplacian_reconstruct(&bad), Err(Error::Dimension(_))));
        bad.levels.pop();
        assert!(laplacian_reconstruct(&bad).is_err());
    }

    #[test]
    fn reconstruct_scaled_stack_is_scaled_image() {
        let r = random_raster(3, 64, 9);
        let stack = laplacian_decompose(&r, 4).unwrap();
        let doubled = laplacian_reconstruct(&stack.scaled(2.0)).unwrap();
        let worst = (&doubled - &(&r * 2.0)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn roundtrip_exact(seed in any::<u64>(), depth in 1usize..4) {
            let r = random_raster(3, 32, seed);
            let stack = laplacian_decompose(&r, depth).unwrap();
            let back = laplacian_reconstruct(&stack).unwrap();
            let worst = (&back - &r).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(worst < 1e-5);
        }

        #[test]
        fn decomposition_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let i = random_raster(3, 32, seed);
            let j = random_raster(3, 32, seed ^ 0xABCD);
            let mixed = laplacian_decompose(&(&i * a + &j * b), 2).unwrap();
            let si = laplacian_decompose(&i, 2).unwrap();
            let sj = laplacian_decompose(&j, 2).unwrap();
            for l in 0..3 {
                let expect = &si.levels[l] * a + &sj.levels[l] * b;
                let worst = (&mixed.levels[l] - &expect).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                prop_assert!(worst < 1e-5);
            }
        }
    }
}
