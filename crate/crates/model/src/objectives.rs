//! Training objectives.
//!
//! * enhancement loss: mean over the `K` variants of the per-pixel mean absolute error
//!   between the clean target and each enhanced variant;
//! * layer consistency loss: with `M̄ = (1/K) Σ M_k`, the mean over `k` of
//!   `1 - cos(M_k, M̄)`; the mean participates in the gradient;
//! * feature pyramid consistency: the layer loss summed over encoder layers, each layer
//!   first pooled with spatial pyramid pooling;
//! * total: `L_E + λ_C · L_C`.

use serde::{Deserialize, Serialize};

use crate::network::FeatureTaps;
use crate::spp::{scales_for_side, spp_with_scales};
use crate::{Error, Result};
use fundus_core::Image;

pub const DEFAULT_LAMBDA_C: f64 = 0.1;
/// Lower bound on `‖M_k‖·‖M̄‖` in the cosine denominator.
pub const COSINE_EPS: f64 = 1e-8;

fn check_equal_lengths(name: &str, target_len: usize, items: &[&[f64]]) -> Result<()> {
    if let Some((k, v)) = items.iter().enumerate().find(|(_, v)| v.len() != target_len) {
        return Err(Error::Dimension(format!(
            "{name}: item {k} has {} values, expected {target_len}",
            v.len()
        )));
    }
    Ok(())
}

/// Enhancement loss on flat buffers.
pub fn enhancement_loss_flat(target: &[f64], outputs: &[&[f64]]) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::Parameter("enhancement loss needs at least one output".into()));
    }
    check_equal_lengths("enhancement loss", target.len(), outputs)?;
    let k = outputs.len() as f64;
    let n = target.len() as f64;
    Ok(outputs
        .iter()
        .map(|o| o.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
        .sum::<f64>()
        / k)
}

/// Gradient of [`enhancement_loss_flat`] with respect to each output (sign convention `sign(0) = 0`).
pub fn enhancement_loss_grad_flat(target: &[f64], outputs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    if outputs.is_empty() {
        return Err(Error::Parameter("enhancement loss needs at least one output".into()));
    }
    check_equal_lengths("enhancement loss", target.len(), outputs)?;
    let scale = 1.0 / (outputs.len() * target.len()) as f64;
    Ok(outputs
        .iter()
        .map(|o| {
            o.iter()
                .zip(target)
                .map(|(a, b)| {
                    let d = a - b;
                    if d > 0.0 {
                        scale
                    } else if d < 0.0 {
                        -scale
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect())
}

pub fn enhancement_loss(target: &Image, outputs: &[Image]) -> Result<f64> {
    if let Some(o) = outputs.iter().find(|o| o.pixels.dim() != target.pixels.dim()) {
        return Err(Error::Dimension(format!(
            "output {:?} does not match target {:?}",
            o.pixels.dim(),
            target.pixels.dim()
        )));
    }
    let t = target.pixels.as_standard_layout();
    let owned: Vec<_> = outputs.iter().map(|o| o.pixels.as_standard_layout()).collect();
    let flat: Vec<&[f64]> = owned.iter().map(|o| o.as_slice().expect("standard layout")).collect();
    enhancement_loss_flat(t.as_slice().expect("standard layout"), &flat)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Value and (optionally) gradient of the layer consistency loss. Inputs are assumed validated.
pub(crate) fn consistency_value_grad(descriptors: &[&[f64]], want_grad: bool) -> (f64, Vec<Vec<f64>>) {
    let k = descriptors.len();
    let d = descriptors.first().map_or(0, |v| v.len());
    if k < 2 {
        let grads = if want_grad { vec![vec![0.0; d]; k] } else { Vec::new() };
        return (0.0, grads);
    }
    let kf = k as f64;
    let mut mean = vec![0.0; d];
    for v in descriptors {
        for (m, x) in mean.iter_mut().zip(v.iter()) {
            *m += x / kf;
        }
    }
    let mean_norm = dot(&mean, &mean).sqrt();
    let mut loss = 0.0;
    let mut grads = Vec::new();
    let mut mean_grad = vec![0.0; d];
    for v in descriptors {
        let norm = dot(v, v).sqrt();
        let prod = norm * mean_norm;
        let denom = prod.max(COSINE_EPS);
        let cos = dot(v, &mean) / denom;
        loss += (1.0 - cos) / kf;
        if want_grad {
            // d(-cos/K)/dv and d(-cos/K)/dmean
            let mut g = vec![0.0; d];
            for i in 0..d {
                let (gv, gm) = if prod > COSINE_EPS {
                    (
                        mean[i] / denom - cos * v[i] / (norm * norm),
                        v[i] / denom - cos * mean[i] / (mean_norm * mean_norm),
                    )
                } else {
                    (mean[i] / denom, v[i] / denom)
                };
                g[i] = -gv / kf;
                mean_grad[i] -= gm / kf;
            }
            grads.push(g);
        }
    }
    if want_grad {
        for g in &mut grads {
            for (gi, mg) in g.iter_mut().zip(&mean_grad) {
                *gi += mg / kf;
            }
        }
    }
    (loss, grads)
}

fn check_descriptors(descriptors: &[&[f64]]) -> Result<()> {
    if descriptors.is_empty() {
        return Err(Error::Parameter("consistency loss needs at least one descriptor".into()));
    }
    check_equal_lengths("consistency loss", descriptors[0].len(), descriptors)
}

/// `(1/K) Σ_k (1 - cos(M_k, M̄))`; zero for a single descriptor.
pub fn layer_consistency_loss(descriptors: &[&[f64]]) -> Result<f64> {
    check_descriptors(descriptors)?;
    Ok(consistency_value_grad(descriptors, false).0)
}

/// Gradient of [`layer_consistency_loss`] with respect to every descriptor.
pub fn layer_consistency_grad(descriptors: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    check_descriptors(descriptors)?;
    Ok(consistency_value_grad(descriptors, true).1)
}

/// Feature pyramid consistency over the taps of `K` variants: returns the sum and the
/// per-layer values.
pub fn fpc_loss(taps_per_variant: &[FeatureTaps]) -> Result<(f64, Vec<f64>)> {
    let first = taps_per_variant
        .first()
        .ok_or_else(|| Error::Parameter("feature pyramid consistency needs at least one variant".into()))?;
    for (k, t) in taps_per_variant.iter().enumerate() {
        if t.taps.len() != first.taps.len()
            || t.taps.iter().zip(&first.taps).any(|(a, b)| a.dim() != b.dim())
        {
            return Err(Error::Dimension(format!(
                "variant {k} has tap shapes inconsistent with variant 0"
            )));
        }
    }
    let mut per_layer = Vec::with_capacity(first.taps.len());
    for l in 0..first.taps.len() {
        let side = first.taps[l].dim().1.min(first.taps[l].dim().2);
        let scales = scales_for_side(side);
        let descriptors = taps_per_variant
            .iter()
            .map(|t| spp_with_scales(&t.taps[l], &scales))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[f64]> = descriptors.iter().map(|d| d.as_slice()).collect();
        per_layer.push(layer_consistency_loss(&refs)?);
    }
    Ok((per_layer.iter().sum(), per_layer))
}

/// Scalar losses of one step or evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(rename = "L_E")]
    pub enhancement: f64,
    #[serde(rename = "L_C_per_layer")]
    pub consistency_per_layer: Vec<f64>,
    #[serde(rename = "L_C")]
    pub consistency: f64,
    #[serde(rename = "lambda_C")]
    pub lambda_c: f64,
    #[serde(rename = "L_total")]
    pub total: f64,
}

/// Combines the parts into `L_total = L_E + λ_C · Σ_l L_C^l`.
pub fn total_loss(enhancement: f64, consistency_per_layer: &[f64], lambda_c: f64) -> Result<LossReport> {
    if !(lambda_c >= 0.0) {
        return Err(Error::Parameter(format!("lambda_C {lambda_c} must be >= 0")));
    }
    let consistency: f64 = consistency_per_layer.iter().sum();
    Ok(LossReport {
        enhancement,
        consistency_per_layer: consistency_per_layer.to_vec(),
        consistency,
        lambda_c,
        total: enhancement + lambda_c * consistency,
    })
}

impl LossReport {
    /// Field-wise mean of equally shaped reports; the total is recomputed from the means.
    pub fn mean(reports: &[LossReport]) -> Option<LossReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let layers = first.consistency_per_layer.len();
        let enhancement = reports.iter().map(|r| r.enhancement).sum::<f64>() / n;
        let per_layer: Vec<f64> = (0..layers)
            .map(|l| reports.iter().map(|r| r.consistency_per_layer[l]).sum::<f64>() / n)
            .collect();
        total_loss(enhancement, &per_layer, first.lambda_c).ok()
    }

    pub fn is_finite(&self) -> bool {
        self.enhancement.is_finite() && self.consistency.is_finite() && self.total.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn enhancement_examples() {
        let target = vec![0.2, 0.4, 0.6, 0.8];
        assert_eq!(enhancement_loss_flat(&target, &[&target, &target]).unwrap(), 0.0);
        let shifted: Vec<f64> = target.iter().map(|v| v + 0.1).collect();
        let l = enhancement_loss_flat(&target, &[&target, &shifted]).unwrap();
        assert!((l - 0.05).abs() < 1e-12);
        let l2 = enhancement_loss_flat(&target, &[&shifted, &target]).unwrap();
        assert_eq!(l, l2);
        assert!(matches!(
            enhancement_loss_flat(&target, &[&target[..3]]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn consistency_examples() {
        let v = [0.3, -1.2, 2.0];
        assert!(layer_consistency_loss(&[&v, &v, &v]).unwrap().abs() < 1e-15);
        let l = layer_consistency_loss(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert!((l - (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-12);
        assert_eq!(layer_consistency_loss(&[&v]).unwrap(), 0.0);
        let zero = [0.0, 0.0, 0.0];
        let guarded = layer_consistency_loss(&[&zero, &zero]).unwrap();
        assert!(guarded.is_finite());
        assert!(layer_consistency_grad(&[&zero, &v]).unwrap().iter().flatten().all(|g| g.is_finite()));
        assert!(matches!(
            layer_consistency_loss(&[&v, &[1.0]]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn total_examples() {
        let r = total_loss(0.05, &[0.3], 0.1).unwrap();
        assert!((r.total - 0.08).abs() < 1e-15);
        assert_eq!(r.total, r.enhancement + r.lambda_c * r.consistency);
        assert_eq!(total_loss(0.05, &[0.3], 0.0).unwrap().total, 0.05);
        assert_eq!(total_loss(0.0, &[0.0, 0.0], 0.1).unwrap().total, 0.0);
        assert!(total_loss(0.1, &[0.2], -1.0).is_err());
    }

    #[test]
    fn report_serializes_with_symbolic_keys() {
        let r = total_loss(0.05, &[0.1, 0.2], 0.1).unwrap();
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"L_E\"") && text.contains("\"L_C_per_layer\"") && text.contains("\"L_total\""));
        let back: LossReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn noisier_variant_is_less_consistent_on_average() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let amplitudes = [0.0, 0.1, 0.3, 1.0, 3.0];
        let mut means = vec![0.0; amplitudes.len()];
        for _ in 0..100 {
            let base: Vec<f64> = (0..16).map(|_| rng.gen_range(0.5..1.5)).collect();
            let other: Vec<f64> = base.iter().map(|v| v + rng.gen_range(-0.05..0.05)).collect();
            let noise: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for (i, a) in amplitudes.iter().enumerate() {
                let noisy: Vec<f64> = base.iter().zip(&noise).map(|(b, n)| b + a * n).collect();
                means[i] += layer_consistency_loss(&[&other, &base, &noisy]).unwrap() / 100.0;
            }
        }
        for w in means.windows(2) {
            assert!(w[1] >= w[0], "{means:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn consistency_is_scale_invariant_and_bounded(
            values in proptest::collection::vec(-3.0f64..3.0, 24),
            scale in 0.01f64..100.0,
        ) {
            let (a, rest) = values.split_at(8);
            let (b, c) = rest.split_at(8);
            let base = layer_consistency_loss(&[a, b, c]).unwrap();
            let sa: Vec<f64> = a.iter().map(|v| v * scale).collect();
            let sb: Vec<f64> = b.iter().map(|v| v * scale).collect();
            let sc: Vec<f64> = c.iter().map(|v| v * scale).collect();
            let scaled = layer_consistency_loss(&[&sa, &sb, &sc]).unwrap();
            prop_assert!((base - scaled).abs() < 1e-9);
            prop_assert!((0.0..=2.0).contains(&base));
        }

        #[test]
        fn enhancement_is_permutation_invariant(
            t in proptest::collection::vec(0.0f64..1.0, 12),
            a in proptest::collection::vec(0.0f64..1.0, 12),
            b in proptest::collection::vec(0.0f64..1.0, 12),
        ) {
            let x = enhancement_loss_flat(&t, &[&a, &b]).unwrap();
            let y = enhancement_loss_flat(&t, &[&b, &a]).unwrap();
            prop_assert!((x - y).abs() < 1e-15);
            prop_assert!(x >= 0.0);
        }
    }
}
