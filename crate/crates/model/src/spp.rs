//! Spatial pyramid pooling: adaptive average pooling onto several square grids,
//! flattened channel-major with row-major cells, concatenated in scale order.

use ndarray::Array3;

use crate::{Error, Result};

pub const SPP_SCALES: [usize; 3] = [2, 4, 8];

/// Half-open input ranges covered by each of `cells` adaptive-pooling bins.
pub fn adaptive_bins(len: usize, cells: usize) -> Vec<(usize, usize)> {
    (0..cells)
        .map(|i| {
            let start = i * len / cells;
            let end = ((i + 1) * len).div_ceil(cells);
            (start, end)
        })
        .collect()
}

/// Descriptor length for `channels` channels pooled at `scales`.
pub fn descriptor_len(channels: usize, scales: &[usize]) -> usize {
    channels * scales.iter().map(|s| s * s).sum::<usize>()
}

/// The pooling scales used on a feature map of the given side: every standard scale
/// that does not exceed the side.
pub fn scales_for_side(side: usize) -> Vec<usize> {
    let scales: Vec<usize> = SPP_SCALES.iter().copied().filter(|&s| s <= side).collect();
    if scales.is_empty() {
        vec![1]
    } else {
        scales
    }
}

/// Pools a flat `(C, H, W)` buffer into `out`, which must hold `descriptor_len(C, scales)` values.
pub fn pool_into(data: &[f64], c: usize, h: usize, w: usize, scales: &[usize], out: &mut [f64]) {
    let mut o = 0;
    for &s in scales {
        let rows = adaptive_bins(h, s);
        let cols = adaptive_bins(w, s);
        for ch in 0..c {
            let plane = &data[ch * h * w..(ch + 1) * h * w];
            for &(y0, y1) in &rows {
                for &(x0, x1) in &cols {
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        acc += plane[y * w + x0..y * w + x1].iter().sum::<f64>();
                    }
                    out[o] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                    o += 1;
                }
            }
        }
    }
}

/// Adjoint of [`pool_into`]: spreads descriptor gradients back over the feature map.
pub fn unpool_add(grad: &[f64], c: usize, h: usize, w: usize, scales: &[usize], dx: &mut [f64]) {
    let mut o = 0;
    for &s in scales {
        let rows = adaptive_bins(h, s);
        let cols = adaptive_bins(w, s);
        for ch in 0..c {
            let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
            for &(y0, y1) in &rows {
                for &(x0, x1) in &cols {
                    let g = grad[o] / ((y1 - y0) * (x1 - x0)) as f64;
                    for y in y0..y1 {
                        plane[y * w + x0..y * w + x1].iter_mut().for_each(|v| *v += g);
                    }
                    o += 1;
                }
            }
        }
    }
}

/// Pools at explicit scales; every scale must fit inside the map.
pub fn spp_with_scales(feature: &Array3<f64>, scales: &[usize]) -> Result<Vec<f64>> {
    let (c, h, w) = feature.dim();
    if let Some(&s) = scales.iter().find(|&&s| s == 0 || s > h || s > w) {
        return Err(Error::Dimension(format!(
            "pooling scale {s} does not fit a {h}x{w} feature map"
        )));
    }
    let data = feature.as_standard_layout();
    let mut out = vec![0.0; descriptor_len(c, scales)];
    pool_into(data.as_slice().expect("standard layout"), c, h, w, scales, &mut out);
    Ok(out)
}

/// Pyramid pooling at 2×2, 4×4 and 8×8; the map must be at least 8×8.
pub fn spp(feature: &Array3<f64>) -> Result<Vec<f64>> {
    spp_with_scales(feature, &SPP_SCALES)
}
