//! U-Net style encoder-decoder whose encoder stages consume the Laplacian pyramid:
//! stage 0 sees `p^0`, stage `l+1` sees `[p^{l+1}, pool(f^l)]`. Taps `f^l` are the
//! post-activation outputs of each encoder block.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use fundus_core::pyramid::{laplacian_decompose, LaplacianStack};
use fundus_core::Image;

use crate::autograd::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;
const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder stages; one per pyramid level, so the pyramid depth is `depth - 1`.
    pub depth: usize,
    pub base_channels: usize,
    pub channel_cap: usize,
    pub instance_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 5,
            base_channels: 64,
            channel_cap: 512,
            instance_norm: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.base_channels == 0 || self.channel_cap == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Pyramid depth `L` matching this network.
    pub fn levels(&self) -> usize {
        self.depth - 1
    }

    pub fn channels(&self, stage: usize) -> usize {
        let wide = self.base_channels.saturating_mul(1usize.checked_shl(stage as u32).unwrap_or(usize::MAX));
        wide.min(self.channel_cap)
    }

    /// Names and shapes of every parameter tensor, in canonical order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut block = |prefix: String, cin: usize, cout: usize| {
            specs.push(ParamSpec::conv(format!("{prefix}.conv1"), cin, cout));
            specs.push(ParamSpec::bias(format!("{prefix}.conv1"), cout));
            specs.push(ParamSpec::conv(format!("{prefix}.conv2"), cout, cout));
            specs.push(ParamSpec::bias(format!("{prefix}.conv2"), cout));
        };
        for l in 0..self.depth {
            let cin = if l == 0 {
                IMAGE_CHANNELS
            } else {
                IMAGE_CHANNELS + self.channels(l - 1)
            };
            block(format!("enc{l}"), cin, self.channels(l));
        }
        for l in (0..self.depth - 1).rev() {
            block(format!("dec{l}"), self.channels(l + 1) + self.channels(l), self.channels(l));
        }
        specs.push(ParamSpec::conv("head".into(), self.channels(0), IMAGE_CHANNELS));
        specs.push(ParamSpec::bias("head".into(), IMAGE_CHANNELS));
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    /// Checks that a pyramid fits this network.
    pub fn check_stack(&self, stack: &LaplacianStack) -> Result<()> {
        stack.validate()?;
        if stack.depth + 1 != self.depth {
            return Err(Error::Dimension(format!(
                "network with {} stages needs a pyramid of depth {}, got {}",
                self.depth,
                self.depth - 1,
                stack.depth
            )));
        }
        if stack.levels[0].dim().0 != IMAGE_CHANNELS {
            return Err(Error::Dimension(format!(
                "pyramid levels must have {IMAGE_CHANNELS} channels, got {}",
                stack.levels[0].dim().0
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Inputs feeding one output unit; zero for biases.
    pub fan_in: usize,
}

impl ParamSpec {
    fn conv(prefix: String, cin: usize, cout: usize) -> Self {
        ParamSpec {
            name: format!("{prefix}.weight"),
            shape: vec![cout, cin, 3, 3],
            fan_in: cin * 9,
        }
    }

    fn bias(prefix: String, cout: usize) -> Self {
        ParamSpec {
            name: format!("{prefix}.bias"),
            shape: vec![cout],
            fan_in: 0,
        }
    }
}

/// Encoder activations `f^0..f^L` of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTaps {
    pub taps: Vec<Array3<f64>>,
}

impl FeatureTaps {
    pub fn sides(&self) -> Vec<usize> {
        self.taps.iter().map(|t| t.dim().1).collect()
    }
}

/// Output and taps of a forward pass recorded on a tape.
#[derive(Debug, Clone)]
pub struct Graph {
    /// `(N, 3, s, s)` in `[0, 1]`.
    pub output: Var,
    /// `(N, C_l, s/2^l, s/2^l)` per stage.
    pub taps: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: ModelConfig,
    params: Vec<Tensor>,
}

impl Network {
    /// Fresh parameters: He-uniform weights, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .param_specs()
            .iter()
            .map(|spec| {
                let n = spec.shape.iter().product();
                if spec.fan_in == 0 {
                    Tensor::zeros(&spec.shape)
                } else {
                    let bound = (6.0 / spec.fan_in as f64).sqrt();
                    Tensor::from_vec(&spec.shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
                }
            })
            .collect();
        Ok(Network { config, params })
    }

    /// Rebuilds a network from named tensors, which must match the canonical specs.
    pub fn from_params(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != named.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        for (spec, (name, t)) in specs.iter().zip(named) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::Dimension(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
            params.push(t);
        }
        Ok(Network { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (String, &Tensor)> {
        self.config.param_specs().into_iter().map(|s| s.name).zip(&self.params)
    }

    /// Places every parameter on the tape, trainable or not.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { tape.param(p.clone()) } else { tape.constant(p.clone()) })
            .collect()
    }

    /// Records the forward pass of a batch of pyramids given as per-level `(N, 3, s_l, s_l)` tensors.
    pub fn build(&self, tape: &mut Tape, params: &[Var], levels: &[Var]) -> Result<Graph> {
        let depth = self.config.depth;
        if levels.len() != depth {
            return Err(Error::Dimension(format!(
                "network with {depth} stages got {} pyramid levels",
                levels.len()
            )));
        }
        let (n, _, side, _) = tape.value(levels[0]).dims4();
        for (l, v) in levels.iter().enumerate() {
            let expected = (n, IMAGE_CHANNELS, side >> l, side >> l);
            if tape.value(*v).dims4() != expected || (side >> l) << l != side {
                return Err(Error::Dimension(format!(
                    "pyramid level {l} has shape {:?}, expected {expected:?}",
                    tape.value(*v).shape()
                )));
            }
        }
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("parameter list matches specs");
        let mut taps = Vec::with_capacity(depth);
        for l in 0..depth {
            let input = if l == 0 {
                levels[0]
            } else {
                let pooled = tape.avg_pool2(taps[l - 1]);
                tape.concat(levels[l], pooled)
            };
            let f = self.block(tape, input, &mut next);
            taps.push(f);
        }
        let mut d = taps[depth - 1];
        for l in (0..depth - 1).rev() {
            let up = tape.upsample2(d);
            let cat = tape.concat(up, taps[l]);
            d = self.block(tape, cat, &mut next);
        }
        let (w, b) = (next(), next());
        let logits = tape.conv3x3(d, w, b);
        let output = tape.sigmoid(logits);
        Ok(Graph { output, taps })
    }

    fn block(&self, tape: &mut Tape, mut x: Var, next: &mut impl FnMut() -> Var) -> Var {
        for _ in 0..2 {
            let (w, b) = (next(), next());
            x = tape.conv3x3(x, w, b);
            if self.config.instance_norm {
                x = tape.instance_norm(x);
            }
            x = tape.leaky_relu(x, LEAKY_SLOPE);
        }
        x
    }

    /// Inference on a batch of pyramids; returns outputs and taps per image.
    pub fn forward_batch(&self, stacks: &[&LaplacianStack]) -> Result<Vec<(Array3<f64>, FeatureTaps)>> {
        if stacks.is_empty() {
            return Ok(Vec::new());
        }
        for s in stacks {
            self.config.check_stack(s)?;
            if s.base_side != stacks[0].base_side {
                return Err(Error::Dimension("pyramids in a batch must share a side".into()));
            }
        }
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let levels = level_tensors(stacks)
            .into_iter()
            .map(|t| tape.constant(t))
            .collect::<Vec<_>>();
        let graph = self.build(&mut tape, &params, &levels)?;
        let out = tape.value(graph.output);
        Ok((0..stacks.len())
            .map(|i| {
                let taps = graph.taps.iter().map(|t| tape.value(*t).raster(i)).collect();
                (out.raster(i), FeatureTaps { taps })
            })
            .collect())
    }

    /// Enhanced image and encoder taps for one pyramid.
    pub fn forward(&self, stack: &LaplacianStack) -> Result<(Image, FeatureTaps)> {
        let (out, taps) = self.forward_batch(&[stack])?.pop().expect("one result per stack");
        Ok((Image::clamped(out), taps))
    }

    /// Decomposes an image and enhances it; the field-of-view mask is carried over.
    pub fn enhance(&self, img: &Image) -> Result<Image> {
        let stack = laplacian_decompose(&img.pixels, self.config.levels())?;
        let (mut out, _) = self.forward(&stack)?;
        out.fov_mask = img.fov_mask.clone();
        Ok(out)
    }
}

/// Stacks level `l` of every pyramid into one `(N, 3, s_l, s_l)` tensor per level.
pub fn level_tensors(stacks: &[&LaplacianStack]) -> Vec<Tensor> {
    (0..stacks[0].levels.len())
        .map(|l| Tensor::stack(&stacks.iter().map(|s| &s.levels[l]).collect::<Vec<_>>()))
        .collect()
}
