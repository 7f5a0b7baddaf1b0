//! Loading, saving, resizing and masking of RGB fundus images.

use std::path::Path;

use image::{ColorType, ImageFormat, RgbImage};
use ndarray::{Array2, Array3, Axis};

use crate::{Error, Result};

/// Binary raster, `true` inside the region of interest.
pub type Mask = Array2<bool>;

pub const DEFAULT_SIDE: usize = 256;
pub const DEFAULT_FOV_RADIUS: f64 = 0.97;

/// RGB image with values in `[0, 1]`, stored as `(3, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub pixels: Array3<f64>,
    pub fov_mask: Option<Mask>,
}

impl Image {
    /// Wraps a 3-channel raster, rejecting non-finite or out-of-range values.
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        if pixels.len_of(Axis(0)) != 3 {
            return Err(Error::Dimension(format!(
                "expected 3 channels, got {}",
                pixels.len_of(Axis(0))
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Format(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image {
            pixels,
            fov_mask: None,
        })
    }

    /// Wraps a raster after clamping into `[0, 1]`; NaN becomes 0.
    pub fn clamped(mut pixels: Array3<f64>) -> Self {
        pixels.mapv_inplace(clamp01);
        Image {
            pixels,
            fov_mask: None,
        }
    }

    pub fn filled(side: usize, value: f64) -> Self {
        Image::clamped(Array3::from_elem((3, side, side), value))
    }

    pub fn with_mask(mut self, mask: Mask) -> Self {
        self.fov_mask = Some(mask);
        self
    }

    pub fn height(&self) -> usize {
        self.pixels.len_of(Axis(1))
    }

    pub fn width(&self) -> usize {
        self.pixels.len_of(Axis(2))
    }

    /// Side length of a square image.
    pub fn side(&self) -> Option<usize> {
        (self.height() == self.width()).then(|| self.height())
    }
}

pub fn clamp01(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Loads an 8-bit PNG/JPEG, center-crops it to a square and resizes it to `side`.
pub fn load_image(path: impl AsRef<Path>, side: usize) -> Result<Image> {
    let raw = load_raw(path.as_ref())?;
    let cropped = center_crop_square(&raw);
    Ok(Image::clamped(resize_bilinear(&cropped, side, side)))
}

/// Loads an 8-bit image at its native resolution.
pub fn load_raw(path: &Path) -> Result<Array3<f64>> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    match decoded.color() {
        ColorType::L8 | ColorType::La8 | ColorType::Rgb8 | ColorType::Rgba8 => {}
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported pixel type {other:?}, expected 8-bit RGB",
                path.display()
            )))
        }
    }
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = Array3::zeros((3, h, w));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Writes an 8-bit RGB file; the format follows the extension (`png`, `jpg`, `jpeg`).
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    save_raster(&img.pixels, path.as_ref())
}

/// Writes a raster (1 or 3 channels, values clamped to `[0, 1]`) as 8-bit RGB.
pub fn save_raster(raster: &Array3<f64>, path: &Path) -> Result<()> {
    let format = match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => ImageFormat::Png,
        Some("jpg") | Some("jpeg") => ImageFormat::Jpeg,
        _ => {
            return Err(Error::Format(format!(
                "{}: output must end in .png, .jpg or .jpeg",
                path.display()
            )))
        }
    };
    let (c, h, w) = raster.dim();
    if c != 1 && c != 3 {
        return Err(Error::Dimension(format!("cannot save {c}-channel raster")));
    }
    let mut out = RgbImage::new(w as u32, h as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        for ch in 0..3 {
            let v = raster[[ch.min(c - 1), y as usize, x as usize]];
            px[ch] = to_u8(v);
        }
    }
    out.save_with_format(path, format).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })
}

pub fn to_u8(v: f64) -> u8 {
    (clamp01(v) * 255.0).round() as u8
}

/// Crops the largest centered square.
pub fn center_crop_square(raster: &Array3<f64>) -> Array3<f64> {
    let (_, h, w) = raster.dim();
    let s = h.min(w);
    let (y0, x0) = ((h - s) / 2, (w - s) / 2);
    raster
        .slice(ndarray::s![.., y0..y0 + s, x0..x0 + s])
        .to_owned()
}

/// Source taps for one output coordinate of a bilinear resize.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearTap {
    pub lo: usize,
    pub hi: usize,
    /// Weight of `hi`; `lo` receives `1 - frac`.
    pub frac: f64,
}

/// Half-pixel-centred bilinear taps (`align_corners = false`) with edge clamping.
pub fn linear_taps(src: usize, dst: usize) -> Vec<LinearTap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            LinearTap {
                lo,
                hi,
                frac: x - lo as f64,
            }
        })
        .collect()
}

/// Separable bilinear resize of every channel.
pub fn resize_bilinear(raster: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = raster.dim();
    if h == out_h && w == out_w {
        return raster.clone();
    }
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let mut rows = Array3::zeros((c, out_h, w));
    for ch in 0..c {
        for (oy, t) in ty.iter().enumerate() {
            for x in 0..w {
                rows[[ch, oy, x]] =
                    raster[[ch, t.lo, x]] * (1.0 - t.frac) + raster[[ch, t.hi, x]] * t.frac;
            }
        }
    }
    let mut out = Array3::zeros((c, out_h, out_w));
    for ch in 0..c {
        for y in 0..out_h {
            for (ox, t) in tx.iter().enumerate() {
                out[[ch, y, ox]] =
                    rows[[ch, y, t.lo]] * (1.0 - t.frac) + rows[[ch, y, t.hi]] * t.frac;
            }
        }
    }
    out
}

/// Centered disc of radius `radius_fraction * side / 2`, measured from pixel centres.
pub fn make_fov_mask(side: usize, radius_fraction: f64) -> Mask {
    let center = (side as f64 - 1.0) / 2.0;
    let radius = radius_fraction * side as f64 / 2.0;
    Array2::from_shape_fn((side, side), |(y, x)| {
        let (dy, dx) = (y as f64 - center, x as f64 - center);
        (dy * dy + dx * dx).sqrt() <= radius
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_image(side: usize, seed: u64) -> Image {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Image::clamped(Array3::from_shape_fn((3, side, side), |_| rng.gen::<f64>()))
    }

    #[test]
    fn byte_extremes_normalize() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let mut img = RgbImage::new(4, 4);
        img.put_pixel(0, 0, image::Rgb([255, 0, 255]));
        img.save(&path).unwrap();
        let loaded = load_image(&path, 4).unwrap();
        assert_eq!(loaded.pixels[[0, 0, 0]], 1.0);
        assert_eq!(loaded.pixels[[1, 0, 0]], 0.0);
        assert_eq!(loaded.pixels[[0, 3, 3]], 0.0);
    }

    #[test]
    fn load_resizes_and_crops() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.png");
        RgbImage::from_pixel(512, 512, image::Rgb([10, 20, 30]))
            .save(&path)
            .unwrap();
        let img = load_image(&path, 256).unwrap();
        assert_eq!(img.pixels.dim(), (3, 256, 256));

        let wide = dir.path().join("wide.png");
        RgbImage::from_pixel(300, 200, image::Rgb([10, 20, 30]))
            .save(&wide)
            .unwrap();
        let img = load_image(&wide, 64).unwrap();
        assert_eq!(img.side(), Some(64));
        assert!((img.pixels[[2, 5, 5]] - 30.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_image("/nonexistent/definitely/missing.png", 8).unwrap_err();
        assert_eq!(err.kind(), "io");
    }

    #[test]
    fn garbage_payload_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"\x89PNG\r\n\x1a\nthis is not a png").unwrap();
        assert_eq!(load_image(&path, 8).unwrap_err().kind(), "format");
    }

    #[test]
    fn sixteen_bit_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.png");
        let img: image::ImageBuffer<image::Rgb<u16>, Vec<u16>> =
            image::ImageBuffer::from_pixel(4, 4, image::Rgb([1000u16, 2000, 3000]));
        img.save(&path).unwrap();
        assert_eq!(load_image(&path, 4).unwrap_err().kind(), "format");
    }

    #[test]
    fn save_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.png");
        save_image(&Image::filled(256, 0.5), &path).unwrap();
        let back = load_image(&path, 256).unwrap();
        assert_eq!(back.pixels.dim(), (3, 256, 256));
        assert!(back.pixels.iter().all(|v| (v - 0.5).abs() <= 1.0 / 255.0));

        save_image(&Image::filled(16, 0.0), &path).unwrap();
        let back = load_image(&path, 16).unwrap();
        assert!(back.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = save_image(&Image::filled(4, 0.5), "/nonexistent/dir/out.png").unwrap_err();
        assert_eq!(err.kind(), "io");
    }

    #[test]
    fn fov_mask_examples() {
        let m = make_fov_mask(256, 1.0);
        assert!(m[[128, 128]]);
        assert!(!m[[0, 0]]);
        assert!(!m[[255, 255]]);
        // brute-force area against pi/4
        let area = m.iter().filter(|&&b| b).count() as f64 / (256.0 * 256.0);
        let quarter_pi = std::f64::consts::FRAC_PI_4;
        assert!((area - quarter_pi).abs() / quarter_pi < 0.02, "area {area}");
    }

    #[test]
    fn fov_mask_covers_majority_for_large_radius() {
        for side in [16usize, 33, 64, 256] {
            for rf in [0.9, 0.97, 1.0] {
                let m = make_fov_mask(side, rf);
                assert!(m.iter().filter(|&&b| b).count() * 2 > side * side);
            }
        }
    }

    #[test]
    fn resize_to_same_side_is_identity() {
        let img = random_image(17, 3);
        assert_eq!(resize_bilinear(&img.pixels, 17, 17), img.pixels);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn png_roundtrip_within_quantization(seed in any::<u64>(), side in 2usize..24) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("r.png");
            let img = random_image(side, seed);
            save_image(&img, &path).unwrap();
            let back = load_image(&path, side).unwrap();
            let worst = img.pixels.iter().zip(back.pixels.iter())
                .map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(worst <= 1.0 / 255.0);
        }

        #[test]
        fn resize_idempotent_at_target(seed in any::<u64>(), src in 4usize..40, side in 2usize..32) {
            let img = random_image(src, seed);
            let once = resize_bilinear(&img.pixels, side, side);
            let twice = resize_bilinear(&once, side, side);
            prop_assert_eq!(once, twice);
        }
    }
}
