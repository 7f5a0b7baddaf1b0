//! Procedural fundus-like images: a vignetted retinal disc, an optic disc, a darker
//! macula and a tree of dark vessel curves. Used as a clean corpus for tests and
//! desk-scale training runs.

use ndarray::Array3;
use rand::Rng;

use crate::image_io::{make_fov_mask, Image, DEFAULT_FOV_RADIUS};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub side: usize,
    pub fov_radius_fraction: f64,
    pub vessel_count: (usize, usize),
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            side: 64,
            fov_radius_fraction: DEFAULT_FOV_RADIUS,
            vessel_count: (5, 9),
        }
    }
}

struct Segment {
    a: (f64, f64),
    b: (f64, f64),
    width: f64,
}

fn distance_to_segment(p: (f64, f64), s: &Segment) -> f64 {
    let (dx, dy) = (s.b.0 - s.a.0, s.b.1 - s.a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - s.a.0) * dx + (p.1 - s.a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (s.a.0 + t * dx, s.a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Draws image number `seed` of the synthetic corpus. The field-of-view mask is attached.
pub fn synthetic_fundus(cfg: &SyntheticConfig, seed: u64) -> Image {
    let mut rng = rng_for(&[0xF0_4D05, seed]);
    let side = cfg.side;
    let s = side as f64;
    let center = (s - 1.0) / 2.0;
    let radius = cfg.fov_radius_fraction * s / 2.0;

    let base = [
        rng.gen_range(0.65..0.85),
        rng.gen_range(0.28..0.42),
        rng.gen_range(0.10..0.20),
    ];
    let vignette = rng.gen_range(0.25..0.45);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let disc_offset = radius * rng.gen_range(0.25..0.4);
    let disc = (
        center + disc_offset * angle.sin(),
        center + disc_offset * angle.cos(),
    );
    let disc_r = radius * rng.gen_range(0.10..0.15);
    let macula = (
        center - 0.6 * disc_offset * angle.sin(),
        center - 0.6 * disc_offset * angle.cos(),
    );
    let macula_r = radius * 0.18;

    let mut segments = Vec::new();
    let n_vessels = rng.gen_range(cfg.vessel_count.0..=cfg.vessel_count.1);
    for v in 0..n_vessels {
        let mut heading =
            v as f64 / n_vessels as f64 * std::f64::consts::TAU + rng.gen_range(-0.3..0.3);
        let mut p = disc;
        let mut width = s * rng.gen_range(0.012..0.022);
        let step = s * 0.04;
        for _ in 0..40 {
            heading += rng.gen_range(-0.35..0.35);
            let q = (p.0 + step * heading.sin(), p.1 + step * heading.cos());
            segments.push(Segment { a: p, b: q, width });
            if ((q.0 - center).powi(2) + (q.1 - center).powi(2)).sqrt() > radius {
                break;
            }
            if rng.gen_bool(0.08) {
                // short side branch
                let mut h2 = heading + rng.gen_range(0.5..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let mut b = q;
                for _ in 0..6 {
                    h2 += rng.gen_range(-0.3..0.3);
                    let c = (b.0 + step * h2.sin(), b.1 + step * h2.cos());
                    segments.push(Segment { a: b, b: c, width: width * 0.6 });
                    b = c;
                }
            }
            p = q;
            width *= 0.97;
        }
    }

    let mask = make_fov_mask(side, cfg.fov_radius_fraction);
    let mut pixels = Array3::zeros((3, side, side));
    for y in 0..side {
        for x in 0..side {
            if !mask[[y, x]] {
                continue;
            }
            let p = (y as f64, x as f64);
            let r = ((p.0 - center).powi(2) + (p.1 - center).powi(2)).sqrt() / radius;
            let shade = 1.0 - vignette * r * r;
            let d_disc = ((p.0 - disc.0).powi(2) + (p.1 - disc.1).powi(2)).sqrt();
            let disc_w = (-(d_disc / disc_r).powi(2)).exp();
            let d_mac = ((p.0 - macula.0).powi(2) + (p.1 - macula.1).powi(2)).sqrt();
            let mac_w = 0.35 * (-(d_mac / macula_r).powi(2)).exp();
            let vessel = segments
                .iter()
                .map(|seg| {
                    let d = distance_to_segment(p, seg);
                    (-(d * d) / (2.0 * seg.width * seg.width)).exp()
                })
                .fold(0.0, f64::max);
            for c in 0..3 {
                let mut v = base[c] * shade * (1.0 - mac_w);
                v = v * (1.0 - disc_w) + [0.98, 0.85, 0.55][c] * disc_w;
                v *= 1.0 - 0.55 * vessel;
                pixels[[c, y, x]] = v;
            }
        }
    }
    Image::clamped(pixels).with_mask(mask)
}

/// `count` images with consecutive seeds starting at `first_seed`.
pub fn synthetic_corpus(cfg: &SyntheticConfig, count: usize, first_seed: u64) -> Vec<Image> {
    (0..count as u64).map(|i| synthetic_fundus(cfg, first_seed + i)).collect()
}
