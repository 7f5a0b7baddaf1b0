//! Synthetic degradations and sequences of low-quality variants sharing one clean source.
//!
//! Three interference classes are modelled:
//!
//! * **transmission**: `clamp(gain * field * img^gamma)` where `field` is a smooth
//!   multiplicative illumination map obtained by bilinearly upsampling a small random grid;
//! * **blur**: Gaussian blur truncated at three standard deviations;
//! * **artifact**: additive Gaussian light or dark spots.
//!
//! A variant applies a random non-empty subset in the order transmission, blur, artifact
//! and only inside the field of view; the exterior keeps the clean values. Every variant
//! records the [`Recipe`] it was drawn with, so it can be replayed exactly.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image_io::{clamp01, make_fov_mask, resize_bilinear, Image, Mask, DEFAULT_FOV_RADIUS};
use crate::pyramid::convolve_separable;
use crate::seed::rng_for;
use crate::{Error, Result};

/// Side length at which `blur_sigma_range` is expressed.
pub const REFERENCE_SIDE: f64 = 256.0;
pub const DEFAULT_SEQ_LEN: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationConfig {
    pub enable_blur: bool,
    pub enable_artifact: bool,
    pub enable_transmission: bool,
    /// Chance that an enabled interference is drawn for a variant.
    pub apply_probability: f64,
    /// Blur standard deviation in pixels at side 256; scaled with the image side.
    pub blur_sigma_range: (f64, f64),
    pub artifact_count_range: (usize, usize),
    /// Spot radius as a fraction of the side.
    pub artifact_radius_range: (f64, f64),
    pub artifact_strength_range: (f64, f64),
    pub transmission_gamma_range: (f64, f64),
    pub transmission_gain_range: (f64, f64),
    /// Range of the coarse illumination grid values.
    pub field_range: (f64, f64),
    /// The illumination grid is `illumination_field_scale × illumination_field_scale`.
    pub illumination_field_scale: usize,
    /// Field-of-view radius used when the clean image carries no mask.
    pub fov_radius_fraction: f64,
    pub seed: u64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig {
            enable_blur: true,
            enable_artifact: true,
            enable_transmission: true,
            apply_probability: 0.8,
            blur_sigma_range: (1.0, 5.0),
            artifact_count_range: (1, 8),
            artifact_radius_range: (0.05, 0.25),
            artifact_strength_range: (0.1, 0.5),
            transmission_gamma_range: (0.6, 1.8),
            transmission_gain_range: (0.6, 1.3),
            field_range: (0.5, 1.5),
            illumination_field_scale: 4,
            fov_radius_fraction: DEFAULT_FOV_RADIUS,
            seed: 0,
        }
    }
}

impl DegradationConfig {
    /// Every interference enabled but with parameters that leave the image untouched.
    pub fn identity() -> Self {
        DegradationConfig {
            blur_sigma_range: (0.0, 0.0),
            artifact_count_range: (0, 0),
            transmission_gamma_range: (1.0, 1.0),
            transmission_gain_range: (1.0, 1.0),
            field_range: (1.0, 1.0),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.enable_blur || self.enable_artifact || self.enable_transmission) {
            return Err(Error::Config("all interferences are disabled".into()));
        }
        if !(self.apply_probability > 0.0 && self.apply_probability <= 1.0) {
            return Err(Error::Config(format!(
                "apply_probability {} must lie in (0, 1]",
                self.apply_probability
            )));
        }
        let ranges = [
            ("blur_sigma_range", self.blur_sigma_range),
            ("artifact_radius_range", self.artifact_radius_range),
            ("artifact_strength_range", self.artifact_strength_range),
            ("transmission_gamma_range", self.transmission_gamma_range),
            ("transmission_gain_range", self.transmission_gain_range),
            ("field_range", self.field_range),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("{name}: need lo <= hi, got [{lo}, {hi}]")));
            }
        }
        let (clo, chi) = self.artifact_count_range;
        if clo > chi {
            return Err(Error::Config(format!(
                "artifact_count_range: need lo <= hi, got [{clo}, {chi}]"
            )));
        }
        if self.blur_sigma_range.0 < 0.0 {
            return Err(Error::Config("blur sigma must be non-negative".into()));
        }
        if self.artifact_radius_range.0 <= 0.0 {
            return Err(Error::Config("artifact radius must be positive".into()));
        }
        let (slo, shi) = self.artifact_strength_range;
        if slo < 0.0 || shi > 1.0 {
            return Err(Error::Config("artifact strength must lie in [0, 1]".into()));
        }
        if self.transmission_gamma_range.0 <= 0.0 {
            return Err(Error::Config("transmission gamma must be positive".into()));
        }
        if self.transmission_gain_range.0 < 0.0 {
            return Err(Error::Config("transmission gain must be non-negative".into()));
        }
        let (flo, fhi) = self.field_range;
        if flo < 0.5 || fhi > 1.5 {
            return Err(Error::Config("illumination field must lie in [0.5, 1.5]".into()));
        }
        if self.illumination_field_scale == 0 {
            return Err(Error::Config("illumination_field_scale must be >= 1".into()));
        }
        if !(self.fov_radius_fraction > 0.0 && self.fov_radius_fraction <= 1.0) {
            return Err(Error::Config("fov_radius_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Bright,
    Dark,
}

impl Polarity {
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Bright => 1.0,
            Polarity::Dark => -1.0,
        }
    }
}

/// One Gaussian spot; `center` is `(row, col)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spot {
    pub center: (f64, f64),
    pub radius: f64,
    pub strength: f64,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transmission {
    pub gamma: f64,
    pub gain: f64,
    pub grid_size: usize,
    /// Row-major `grid_size × grid_size` illumination values.
    pub grid: Vec<f64>,
}

impl Transmission {
    pub fn field(&self, height: usize, width: usize) -> Array2<f64> {
        let g = self.grid_size;
        let coarse = Array3::from_shape_vec((1, g, g), self.grid.clone())
            .expect("grid holds grid_size^2 values");
        resize_bilinear(&coarse, height, width).index_axis_move(Axis(0), 0)
    }
}

/// The sampled parameters of one degraded variant; `None` means the interference was skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub transmission: Option<Transmission>,
    pub blur_sigma: Option<f64>,
    pub artifacts: Option<Vec<Spot>>,
}

impl Recipe {
    pub fn identity() -> Self {
        Recipe {
            transmission: None,
            blur_sigma: None,
            artifacts: None,
        }
    }
}

/// One clean image and `K` degraded variants of it.
#[derive(Debug, Clone)]
pub struct SeqLC {
    pub clean: Image,
    pub variants: Vec<Image>,
    pub recipes: Vec<Recipe>,
    pub image_id: u64,
}

impl SeqLC {
    pub fn len(&self) -> usize {
        self.variants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variants.is_empty()
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

pub fn apply_blur(img: &Image, sigma: f64) -> Result<Image> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("blur sigma {sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let pixels = convolve_separable(&img.pixels, &gaussian_kernel(sigma));
    Ok(Image {
        pixels: pixels.mapv(clamp01),
        fov_mask: img.fov_mask.clone(),
    })
}

pub fn apply_artifact(img: &Image, spots: &[Spot]) -> Image {
    if spots.is_empty() {
        return img.clone();
    }
    let (h, w) = (img.height(), img.width());
    let mut field = Array2::<f64>::zeros((h, w));
    for spot in spots {
        let s = spot.radius / 2.0;
        let denom = 2.0 * s * s;
        let amp = spot.polarity.sign() * spot.strength;
        for ((y, x), v) in field.indexed_iter_mut() {
            let dy = y as f64 - spot.center.0;
            let dx = x as f64 - spot.center.1;
            *v += amp * (-(dy * dy + dx * dx) / denom).exp();
        }
    }
    let mut pixels = img.pixels.clone();
    for mut plane in pixels.outer_iter_mut() {
        plane.zip_mut_with(&field, |p, f| *p = clamp01(*p + f));
    }
    Image {
        pixels,
        fov_mask: img.fov_mask.clone(),
    }
}

pub fn apply_transmission(img: &Image, gamma: f64, gain: f64, field: &Array2<f64>) -> Result<Image> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Parameter(format!("gamma {gamma} must be positive")));
    }
    if field.dim() != (img.height(), img.width()) {
        return Err(Error::Dimension(format!(
            "illumination field {:?} does not match image {}x{}",
            field.dim(),
            img.height(),
            img.width()
        )));
    }
    let mut pixels = img.pixels.clone();
    for mut plane in pixels.outer_iter_mut() {
        plane.zip_mut_with(field, |p, f| *p = clamp01(gain * f * p.powf(gamma)));
    }
    Ok(Image {
        pixels,
        fov_mask: img.fov_mask.clone(),
    })
}

fn effective_mask(clean: &Image, fov_radius_fraction: f64) -> Result<Mask> {
    match &clean.fov_mask {
        Some(m) if m.dim() == (clean.height(), clean.width()) => Ok(m.clone()),
        Some(m) => Err(Error::Dimension(format!(
            "fov mask {:?} does not match image {}x{}",
            m.dim(),
            clean.height(),
            clean.width()
        ))),
        None => {
            let side = clean.side().ok_or_else(|| {
                Error::Dimension("a square image is required to derive a field-of-view mask".into())
            })?;
            Ok(make_fov_mask(side, fov_radius_fraction))
        }
    }
}

/// Applies a recipe in the order transmission, blur, artifact and restores the
/// exterior of `mask` from `clean`.
pub fn apply_recipe(clean: &Image, recipe: &Recipe, mask: &Mask) -> Result<Image> {
    let mut out = clean.clone();
    if let Some(t) = &recipe.transmission {
        let field = t.field(clean.height(), clean.width());
        out = apply_transmission(&out, t.gamma, t.gain, &field)?;
    }
    if let Some(sigma) = recipe.blur_sigma {
        out = apply_blur(&out, sigma)?;
    }
    if let Some(spots) = &recipe.artifacts {
        out = apply_artifact(&out, spots);
    }
    for (mut deg, src) in out.pixels.outer_iter_mut().zip(clean.pixels.outer_iter()) {
        ndarray::Zip::from(&mut deg)
            .and(&src)
            .and(mask)
            .for_each(|d, &s, &inside| {
                if !inside {
                    *d = s;
                }
            });
    }
    out.fov_mask = clean.fov_mask.clone();
    Ok(out)
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Draws one recipe for an image of the given size.
pub fn sample_recipe<R: Rng>(cfg: &DegradationConfig, height: usize, width: usize, rng: &mut R) -> Recipe {
    let enabled = [cfg.enable_transmission, cfg.enable_blur, cfg.enable_artifact];
    let active = loop {
        let draw = enabled.map(|on| on && rng.gen_bool(cfg.apply_probability));
        if draw.iter().any(|&b| b) {
            break draw;
        }
    };
    let side = height.min(width) as f64;
    let transmission = active[0].then(|| {
        let gamma = uniform(rng, cfg.transmission_gamma_range);
        let gain = uniform(rng, cfg.transmission_gain_range);
        let g = cfg.illumination_field_scale;
        let grid = (0..g * g).map(|_| uniform(rng, cfg.field_range)).collect();
        Transmission {
            gamma,
            gain,
            grid_size: g,
            grid,
        }
    });
    let blur_sigma = active[1].then(|| uniform(rng, cfg.blur_sigma_range) * side / REFERENCE_SIDE);
    let artifacts = active[2].then(|| {
        let (lo, hi) = cfg.artifact_count_range;
        let count = rng.gen_range(lo..=hi);
        (0..count)
            .map(|_| Spot {
                center: (
                    rng.gen_range(0.0..height as f64),
                    rng.gen_range(0.0..width as f64),
                ),
                radius: uniform(rng, cfg.artifact_radius_range) * side,
                strength: uniform(rng, cfg.artifact_strength_range),
                polarity: if rng.gen_bool(0.5) {
                    Polarity::Bright
                } else {
                    Polarity::Dark
                },
            })
            .collect()
    });
    Recipe {
        transmission,
        blur_sigma,
        artifacts,
    }
}

/// Generates `k` independently degraded variants of `clean`.
///
/// Variant `i` draws from a generator seeded by `(cfg.seed, image_id, i)`, so the result
/// is a pure function of its arguments.
pub fn make_seqlc(clean: &Image, cfg: &DegradationConfig, k: usize, image_id: u64) -> Result<SeqLC> {
    cfg.validate()?;
    if k == 0 {
        return Err(Error::Parameter("sequence length K must be >= 1".into()));
    }
    let mask = effective_mask(clean, cfg.fov_radius_fraction)?;
    let mut variants = Vec::with_capacity(k);
    let mut recipes = Vec::with_capacity(k);
    for i in 0..k {
        let mut rng = rng_for(&[cfg.seed, image_id, i as u64]);
        let recipe = sample_recipe(cfg, clean.height(), clean.width(), &mut rng);
        variants.push(apply_recipe(clean, &recipe, &mask)?);
        recipes.push(recipe);
    }
    Ok(SeqLC {
        clean: clean.clone(),
        variants,
        recipes,
        image_id,
    })
}

/// Replays a recorded recipe against the clean image.
pub fn replay(clean: &Image, recipe: &Recipe, cfg: &DegradationConfig) -> Result<Image> {
    let mask = effective_mask(clean, cfg.fov_radius_fraction)?;
    apply_recipe(clean, recipe, &mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::psnr;
    use crate::synthetic::{synthetic_fundus, SyntheticConfig};

    fn sample_image(side: usize) -> Image {
        synthetic_fundus(&SyntheticConfig { side, ..Default::default() }, 11)
    }

    #[test]
    fn blur_identity_and_constants() {
        let img = sample_image(32);
        assert_eq!(apply_blur(&img, 0.0).unwrap(), img);
        let flat = Image::filled(20, 0.3);
        let b = apply_blur(&flat, 2.3).unwrap();
        assert!(b.pixels.iter().all(|v| (v - 0.3).abs() < 1e-12));
        assert!(matches!(apply_blur(&img, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn blur_impulse_matches_brute_force_kernel() {
        let mut px = Array3::zeros((3, 15, 15));
        px[[0, 7, 7]] = 1.0;
        let img = Image::clamped(px);
        let out = apply_blur(&img, 1.0).unwrap();
        // brute-force 2D truncated Gaussian, normalized over the 7x7 support
        let mut total = 0.0;
        for y in -3i32..=3 {
            for x in -3i32..=3 {
                total += (-((x * x + y * y) as f64) / 2.0).exp();
            }
        }
        let expected = 1.0 / total;
        assert!((out.pixels[[0, 7, 7]] - expected).abs() < 1e-12);
    }

    #[test]
    fn artifact_examples() {
        let img = Image::filled(33, 0.0);
        assert_eq!(apply_artifact(&img, &[]), img);
        let spot = Spot {
            center: (16.0, 16.0),
            radius: 8.0,
            strength: 0.4,
            polarity: Polarity::Bright,
        };
        let out = apply_artifact(&img, &[spot]);
        assert!((out.pixels[[1, 16, 16]] - 0.4).abs() < 1e-15);

        let base = Image::filled(33, 0.5);
        let other = Spot {
            center: (10.0, 20.0),
            radius: 12.0,
            strength: 0.45,
            polarity: Polarity::Bright,
        };
        let dark = Spot {
            polarity: Polarity::Dark,
            ..spot
        };
        let both = apply_artifact(&base, &[spot, other, dark]);
        for y in 0..33 {
            for x in 0..33 {
                let field = |s: &Spot| {
                    let d2 = (y as f64 - s.center.0).powi(2) + (x as f64 - s.center.1).powi(2);
                    s.polarity.sign() * s.strength * (-d2 / (2.0 * (s.radius / 2.0).powi(2))).exp()
                };
                let expect = (0.5 + field(&spot) + field(&other) + field(&dark)).clamp(0.0, 1.0);
                assert!((both.pixels[[2, y, x]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transmission_examples() {
        let ones = Array2::from_elem((16, 16), 1.0);
        let img = sample_image(16);
        let same = apply_transmission(&img, 1.0, 1.0, &ones).unwrap();
        assert_eq!(same, img);
        let quarter = Image::filled(16, 0.25);
        let sq = apply_transmission(&quarter, 2.0, 1.0, &ones).unwrap();
        assert!(sq.pixels.iter().all(|v| (v - 0.0625).abs() < 1e-15));
        let bright = Image::filled(16, 0.9);
        let clipped = apply_transmission(&bright, 1.0, 1.2, &ones).unwrap();
        assert!(clipped.pixels.iter().all(|&v| v == 1.0));
        assert!(matches!(
            apply_transmission(&img, 0.0, 1.0, &ones),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn field_is_smooth_and_bounded() {
        let t = Transmission {
            gamma: 1.0,
            gain: 1.0,
            grid_size: 4,
            grid: vec![0.5, 1.5, 0.7, 1.1, 1.0, 0.9, 1.3, 0.6, 0.8, 1.2, 1.4, 0.5, 1.0, 1.0, 0.7, 1.5],
        };
        let f = t.field(64, 64);
        assert!(f.iter().all(|&v| (0.5..=1.5).contains(&v)));
    }

    #[test]
    fn seqlc_is_deterministic_and_shaped() {
        let img = sample_image(64);
        let cfg = DegradationConfig {
            seed: 42,
            ..Default::default()
        };
        let a = make_seqlc(&img, &cfg, 3, 5).unwrap();
        let b = make_seqlc(&img, &cfg, 3, 5).unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.variants.iter().zip(&b.variants) {
            assert_eq!(x.pixels.dim(), img.pixels.dim());
            assert!(x.pixels.iter().zip(y.pixels.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        assert_ne!(a.variants[0], a.variants[1]);
        let other_image = make_seqlc(&img, &cfg, 3, 6).unwrap();
        assert_ne!(a.recipes, other_image.recipes);
    }

    #[test]
    fn seqlc_replays_and_preserves_exterior() {
        let img = sample_image(64);
        let cfg = DegradationConfig {
            seed: 9,
            ..Default::default()
        };
        let seq = make_seqlc(&img, &cfg, 4, 1).unwrap();
        let mask = make_fov_mask(64, cfg.fov_radius_fraction);
        for (variant, recipe) in seq.variants.iter().zip(&seq.recipes) {
            assert_eq!(&replay(&img, recipe, &cfg).unwrap(), variant);
            for c in 0..3 {
                for ((y, x), &inside) in mask.indexed_iter() {
                    if !inside {
                        assert_eq!(variant.pixels[[c, y, x]], img.pixels[[c, y, x]]);
                    }
                }
            }
        }
    }

    #[test]
    fn recipes_roundtrip_through_json() {
        let img = sample_image(32);
        let seq = make_seqlc(&img, &DegradationConfig::default(), 2, 3).unwrap();
        for r in &seq.recipes {
            let text = serde_json::to_string(r).unwrap();
            let back: Recipe = serde_json::from_str(&text).unwrap();
            assert_eq!(&back, r);
        }
    }

    #[test]
    fn identity_config_leaves_image_untouched() {
        let img = sample_image(32);
        let seq = make_seqlc(&img, &DegradationConfig::identity(), 3, 0).unwrap();
        for v in &seq.variants {
            assert_eq!(v, &img);
        }
    }

    #[test]
    fn disabled_config_is_rejected() {
        let cfg = DegradationConfig {
            enable_blur: false,
            enable_artifact: false,
            enable_transmission: false,
            ..Default::default()
        };
        let err = make_seqlc(&sample_image(16), &cfg, 2, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn stronger_blur_never_raises_psnr() {
        let img = sample_image(64);
        let mut last = f64::INFINITY;
        for sigma in [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0] {
            let p = psnr(&img, &apply_blur(&img, sigma).unwrap()).unwrap();
            assert!(p <= last + 1e-12, "sigma {sigma}: {p} > {last}");
            last = p;
        }
    }
}
