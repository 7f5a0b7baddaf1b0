//! A small reverse-mode tape covering exactly the operations the enhancement network
//! and its objectives need. Feature maps are `(N, C, H, W)` tensors.

use fundus_core::image_io::{linear_taps, LinearTap};

use crate::objectives::{consistency_value_grad, enhancement_loss_flat, enhancement_loss_grad_flat};
use crate::spp::{descriptor_len, pool_into, unpool_add};
use crate::tensor::{gemm, gemm_strided, MatView, Tensor};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3x3 { input: Var, weight: Var, bias: Var },
    InstanceNorm { input: Var, inv_std: Vec<f64> },
    LeakyRelu { input: Var, slope: f64 },
    Sigmoid { input: Var },
    AvgPool2 { input: Var },
    Upsample2 { input: Var },
    Concat { first: Var, second: Var },
    Spp { input: Var, scales: Vec<usize> },
    L1 { input: Var, target: Vec<f64> },
    Consistency { input: Var },
    WeightedSum { terms: Vec<(Var, f64)> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` where nothing flowed.
#[derive(Debug)]
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0[v.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// 3×3 convolution, stride 1, zero padding 1. `weight: (Cout, Cin, 3, 3)`, `bias: (Cout)`.
    pub fn conv3x3(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let x = self.value(input);
        let (n, cin, h, w) = x.dims4();
        let wt = self.value(weight);
        let cout = wt.shape()[0];
        assert_eq!(wt.shape(), &[cout, cin, 3, 3], "conv weight shape");
        let b = self.value(bias);
        assert_eq!(b.shape(), &[cout], "conv bias shape");
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, cout, h, w]);
        let mut shifted = vec![0.0; cin * hw];
        for i in 0..n {
            let src = &x.data()[i * cin * hw..(i + 1) * cin * hw];
            let dst = &mut out.data_mut()[i * cout * hw..(i + 1) * cout * hw];
            for (co, bv) in b.data().iter().enumerate() {
                dst[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v = *bv);
            }
            for t in 0..9 {
                shift_into(src, cin, h, w, t, &mut shifted);
                gemm(cout, cin, hw, &wt.data()[t..], tap_view(cin), &shifted, MatView::row_major(hw), 1.0, dst);
            }
        }
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push(out, Op::Conv3x3 { input, weight, bias }, rg)
    }

    /// Per-sample, per-channel normalization without affine parameters.
    pub fn instance_norm(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(n * c);
        for plane in out.data_mut().chunks_mut(hw) {
            let mean = plane.iter().sum::<f64>() / hw as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let is = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
            plane.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let _ = (n, c);
        let rg = self.needs(input);
        self.push(out, Op::InstanceNorm { input, inv_std }, rg)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let mut out = self.value(input).clone();
        out.data_mut().iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v *= slope
            }
        });
        let rg = self.needs(input);
        self.push(out, Op::LeakyRelu { input, slope }, rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let mut out = self.value(input).clone();
        out.data_mut().iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
        let rg = self.needs(input);
        self.push(out, Op::Sigmoid { input }, rg)
    }

    /// 2×2 average pooling with stride 2; sides must be even.
    pub fn avg_pool2(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even sides, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let src = x.data();
        for (p, dst) in out.data_mut().chunks_mut(oh * ow).enumerate() {
            let s = &src[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * ow + xx] = 0.25 * (s[i] + s[i + 1] + s[i + w] + s[i + w + 1]);
                }
            }
        }
        let rg = self.needs(input);
        self.push(out, Op::AvgPool2 { input }, rg)
    }

    /// Bilinear ×2 upsampling (half-pixel centres, clamped edges), as used by the pyramid.
    pub fn upsample2(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4();
        let (oh, ow) = (2 * h, 2 * w);
        let (ty, tx) = (linear_taps(h, oh), linear_taps(w, ow));
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let src = x.data();
        let mut rows = vec![0.0; oh * w];
        for (p, dst) in out.data_mut().chunks_mut(oh * ow).enumerate() {
            resize_plane(&src[p * h * w..(p + 1) * h * w], w, &ty, &tx, &mut rows, dst);
        }
        let rg = self.needs(input);
        self.push(out, Op::Upsample2 { input }, rg)
    }

    /// Channel concatenation `[first, second]`.
    pub fn concat(&mut self, first: Var, second: Var) -> Var {
        let (a, b) = (self.value(first), self.value(second));
        let (n, ca, h, w) = a.dims4();
        let (nb, cb, hb, wb) = b.dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat operands differ in batch or spatial size");
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            data.extend_from_slice(&a.data()[i * ca * hw..(i + 1) * ca * hw]);
            data.extend_from_slice(&b.data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        let out = Tensor::from_vec(&[n, ca + cb, h, w], data);
        let rg = self.needs(first) || self.needs(second);
        self.push(out, Op::Concat { first, second }, rg)
    }

    /// Spatial pyramid pooling of every sample into a `(N, D)` descriptor matrix.
    pub fn spp(&mut self, input: Var, scales: &[usize]) -> Var {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4();
        let d = descriptor_len(c, scales);
        let mut out = Tensor::zeros(&[n, d]);
        for i in 0..n {
            pool_into(
                &x.data()[i * c * h * w..(i + 1) * c * h * w],
                c,
                h,
                w,
                scales,
                &mut out.data_mut()[i * d..(i + 1) * d],
            );
        }
        let rg = self.needs(input);
        self.push(
            out,
            Op::Spp {
                input,
                scales: scales.to_vec(),
            },
            rg,
        )
    }

    /// Enhancement loss of the `N` samples of `input` against one shared `target` sample.
    pub fn l1_against(&mut self, input: Var, target: &[f64]) -> Var {
        let x = self.value(input);
        let per = x.len() / x.shape()[0];
        assert_eq!(per, target.len(), "target size does not match one sample");
        let outputs: Vec<&[f64]> = x.data().chunks(per).collect();
        let v = enhancement_loss_flat(target, &outputs).expect("validated shapes");
        let rg = self.needs(input);
        self.push(
            Tensor::scalar(v),
            Op::L1 {
                input,
                target: target.to_vec(),
            },
            rg,
        )
    }

    /// Layer consistency loss over the rows of an `(N, D)` descriptor matrix.
    pub fn consistency(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let d = x.shape()[1];
        let rows: Vec<&[f64]> = x.data().chunks(d).collect();
        let (v, _) = consistency_value_grad(&rows, false);
        let rg = self.needs(input);
        self.push(Tensor::scalar(v), Op::Consistency { input }, rg)
    }

    /// `Σ weight · scalar`.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let v = terms.iter().map(|(t, wgt)| wgt * self.value(*t).item()).sum();
        let rg = terms.iter().any(|(t, _)| self.needs(*t));
        self.push(Tensor::scalar(v), Op::WeightedSum { terms: terms.to_vec() }, rg)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, make: impl FnOnce(&mut Tensor)) {
        if !self.needs(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        make(slot.as_mut().expect("just filled"));
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv3x3 { input, weight, bias } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (n, cin, h, w) = x.dims4();
                let cout = wt.shape()[0];
                let hw = h * w;
                let mut shifted = vec![0.0; cin * hw];
                let mut dshifted = vec![0.0; cin * hw];
                let need_w = self.needs(*weight);
                let need_x = self.needs(*input);
                if self.needs(*bias) {
                    self.accumulate(grads, *bias, |db| {
                        for i in 0..n {
                            let go = &g.data()[i * cout * hw..(i + 1) * cout * hw];
                            for (co, d) in db.data_mut().iter_mut().enumerate() {
                                *d += go[co * hw..(co + 1) * hw].iter().sum::<f64>();
                            }
                        }
                    });
                }
                for i in 0..n {
                    let go = &g.data()[i * cout * hw..(i + 1) * cout * hw];
                    let src = &x.data()[i * cin * hw..(i + 1) * cin * hw];
                    for t in 0..9 {
                        if need_w {
                            shift_into(src, cin, h, w, t, &mut shifted);
                            self.accumulate(grads, *weight, |dw| {
                                gemm_strided(
                                    cout,
                                    hw,
                                    cin,
                                    go,
                                    MatView::row_major(hw),
                                    &shifted,
                                    MatView::transposed(hw),
                                    1.0,
                                    &mut dw.data_mut()[t..],
                                    tap_view(cin),
                                );
                            });
                        }
                        if need_x {
                            let wt_t = MatView {
                                row_stride: 9,
                                col_stride: (cin * 9) as isize,
                            };
                            gemm(cin, cout, hw, &wt.data()[t..], wt_t, go, MatView::row_major(hw), 0.0, &mut dshifted);
                            self.accumulate(grads, *input, |dx| {
                                unshift_add(&dshifted, cin, h, w, t, &mut dx.data_mut()[i * cin * hw..(i + 1) * cin * hw]);
                            });
                        }
                    }
                }
            }
            Op::InstanceNorm { input, inv_std } => {
                let y = &node.value;
                let (_, _, h, w) = y.dims4();
                let hw = h * w;
                self.accumulate(grads, *input, |dx| {
                    for (p, is) in inv_std.iter().enumerate() {
                        let ys = &y.data()[p * hw..(p + 1) * hw];
                        let gs = &g.data()[p * hw..(p + 1) * hw];
                        let mean_g = gs.iter().sum::<f64>() / hw as f64;
                        let mean_gy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / hw as f64;
                        for ((d, gv), yv) in dx.data_mut()[p * hw..(p + 1) * hw].iter_mut().zip(gs).zip(ys) {
                            *d += is * (gv - mean_g - yv * mean_gy);
                        }
                    }
                });
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(*input);
                self.accumulate(grads, *input, |dx| {
                    for ((d, gv), xv) in dx.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        *d += if *xv < 0.0 { slope * gv } else { *gv };
                    }
                });
            }
            Op::Sigmoid { input } => {
                let y = &node.value;
                self.accumulate(grads, *input, |dx| {
                    for ((d, gv), yv) in dx.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::AvgPool2 { input } => {
                let (_, _, h, w) = self.value(*input).dims4();
                let (oh, ow) = (h / 2, w / 2);
                self.accumulate(grads, *input, |dx| {
                    for (p, gs) in g.data().chunks(oh * ow).enumerate() {
                        let d = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
                        for y in 0..oh {
                            for xx in 0..ow {
                                let v = 0.25 * gs[y * ow + xx];
                                let i = 2 * y * w + 2 * xx;
                                d[i] += v;
                                d[i + 1] += v;
                                d[i + w] += v;
                                d[i + w + 1] += v;
                            }
                        }
                    }
                });
            }
            Op::Upsample2 { input } => {
                let (_, _, h, w) = self.value(*input).dims4();
                let (oh, ow) = (2 * h, 2 * w);
                let (ty, tx) = (linear_taps(h, oh), linear_taps(w, ow));
                let mut rows = vec![0.0; oh * w];
                self.accumulate(grads, *input, |dx| {
                    for (p, gs) in g.data().chunks(oh * ow).enumerate() {
                        resize_plane_adjoint(gs, w, &ty, &tx, &mut rows, &mut dx.data_mut()[p * h * w..(p + 1) * h * w]);
                    }
                });
            }
            Op::Concat { first, second } => {
                let (n, ca, h, w) = self.value(*first).dims4();
                let cb = self.value(*second).dims4().1;
                let hw = h * w;
                let stride = (ca + cb) * hw;
                self.accumulate(grads, *first, |da| {
                    for i in 0..n {
                        let src = &g.data()[i * stride..i * stride + ca * hw];
                        for (d, s) in da.data_mut()[i * ca * hw..(i + 1) * ca * hw].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
                self.accumulate(grads, *second, |db| {
                    for i in 0..n {
                        let src = &g.data()[i * stride + ca * hw..(i + 1) * stride];
                        for (d, s) in db.data_mut()[i * cb * hw..(i + 1) * cb * hw].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Spp { input, scales } => {
                let (n, c, h, w) = self.value(*input).dims4();
                let d = descriptor_len(c, scales);
                self.accumulate(grads, *input, |dx| {
                    for i in 0..n {
                        unpool_add(
                            &g.data()[i * d..(i + 1) * d],
                            c,
                            h,
                            w,
                            scales,
                            &mut dx.data_mut()[i * c * h * w..(i + 1) * c * h * w],
                        );
                    }
                });
            }
            Op::L1 { input, target } => {
                let x = self.value(*input);
                let per = target.len();
                let outputs: Vec<&[f64]> = x.data().chunks(per).collect();
                let local = enhancement_loss_grad_flat(target, &outputs).expect("validated shapes");
                let scale = g.item();
                self.accumulate(grads, *input, |dx| {
                    for (chunk, lg) in dx.data_mut().chunks_mut(per).zip(&local) {
                        for (d, v) in chunk.iter_mut().zip(lg) {
                            *d += scale * v;
                        }
                    }
                });
            }
            Op::Consistency { input } => {
                let x = self.value(*input);
                let d = x.shape()[1];
                let rows: Vec<&[f64]> = x.data().chunks(d).collect();
                let (_, local) = consistency_value_grad(&rows, true);
                let scale = g.item();
                self.accumulate(grads, *input, |dx| {
                    for (chunk, lg) in dx.data_mut().chunks_mut(d).zip(&local) {
                        for (dv, v) in chunk.iter_mut().zip(lg) {
                            *dv += scale * v;
                        }
                    }
                });
            }
            Op::WeightedSum { terms } => {
                let gv = g.item();
                for (t, wgt) in terms {
                    self.accumulate(grads, *t, |dt| dt.data_mut()[0] += wgt * gv);
                }
            }
        }
    }
}

/// View of the `(Cout, Cin)` slice of a `(Cout, Cin, 3, 3)` weight at one kernel tap.
fn tap_view(cin: usize) -> MatView {
    MatView {
        row_stride: (cin * 9) as isize,
        col_stride: 9,
    }
}

/// Row/column ranges where kernel tap `t` reads inside the map: output index `o` reads
/// input `o + d` with `d = tap - 1`.
fn tap_ranges(t: usize, h: usize, w: usize) -> (isize, isize, std::ops::Range<usize>, std::ops::Range<usize>) {
    let (dy, dx) = ((t / 3) as isize - 1, (t % 3) as isize - 1);
    let ys = (-dy).max(0) as usize..(h as isize - dy).min(h as isize) as usize;
    let xs = (-dx).max(0) as usize..(w as isize - dx).min(w as isize) as usize;
    (dy, dx, ys, xs)
}

/// `buf[c, y, x] = x[c, y + dy, x + dx]`, zero outside the map.
fn shift_into(src: &[f64], cin: usize, h: usize, w: usize, t: usize, buf: &mut [f64]) {
    let hw = h * w;
    let (dy, dx, ys, xs) = tap_ranges(t, h, w);
    if dy != 0 || dx != 0 {
        buf.iter_mut().for_each(|v| *v = 0.0);
    }
    for c in 0..cin {
        for y in ys.clone() {
            let sy = (y as isize + dy) as usize;
            let so = c * hw + sy * w;
            let d = c * hw + y * w;
            let sx0 = (xs.start as isize + dx) as usize;
            buf[d + xs.start..d + xs.end].copy_from_slice(&src[so + sx0..so + sx0 + xs.len()]);
        }
    }
}

/// Adjoint of [`shift_into`], accumulating into `dx`.
fn unshift_add(buf: &[f64], cin: usize, h: usize, w: usize, t: usize, dst: &mut [f64]) {
    let hw = h * w;
    let (dy, dx, ys, xs) = tap_ranges(t, h, w);
    for c in 0..cin {
        for y in ys.clone() {
            let sy = (y as isize + dy) as usize;
            let so = c * hw + sy * w;
            let d = c * hw + y * w;
            let sx0 = (xs.start as isize + dx) as usize;
            dst[so + sx0..so + sx0 + xs.len()]
                .iter_mut()
                .zip(&buf[d + xs.start..d + xs.end])
                .for_each(|(a, b)| *a += b);
        }
    }
}

fn resize_plane(src: &[f64], w: usize, ty: &[LinearTap], tx: &[LinearTap], rows: &mut [f64], dst: &mut [f64]) {
    let ow = tx.len();
    for (oy, t) in ty.iter().enumerate() {
        let (a, b) = (&src[t.lo * w..(t.lo + 1) * w], &src[t.hi * w..(t.hi + 1) * w]);
        for x in 0..w {
            rows[oy * w + x] = a[x] * (1.0 - t.frac) + b[x] * t.frac;
        }
    }
    for oy in 0..ty.len() {
        let r = &rows[oy * w..(oy + 1) * w];
        for (ox, t) in tx.iter().enumerate() {
            dst[oy * ow + ox] = r[t.lo] * (1.0 - t.frac) + r[t.hi] * t.frac;
        }
    }
}

fn resize_plane_adjoint(g: &[f64], w: usize, ty: &[LinearTap], tx: &[LinearTap], rows: &mut [f64], dx: &mut [f64]) {
    let ow = tx.len();
    rows.iter_mut().for_each(|v| *v = 0.0);
    for oy in 0..ty.len() {
        let r = &mut rows[oy * w..(oy + 1) * w];
        for (ox, t) in tx.iter().enumerate() {
            let gv = g[oy * ow + ox];
            r[t.lo] += gv * (1.0 - t.frac);
            r[t.hi] += gv * t.frac;
        }
    }
    for (oy, t) in ty.iter().enumerate() {
        for x in 0..w {
            let gv = rows[oy * w + x];
            dx[t.lo * w + x] += gv * (1.0 - t.frac);
            dx[t.hi * w + x] += gv * t.frac;
        }
    }
}
