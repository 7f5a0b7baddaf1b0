//! Training: per-group forward/backward over `K` degraded variants, batch averaging,
//! Adam updates under a step-then-linear learning-rate schedule, metrics and checkpoints.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use fundus_core::degradation::{make_seqlc, DegradationConfig, SeqLC};
use fundus_core::pyramid::laplacian_decompose;
use fundus_core::seed::{mix, rng_for};
use fundus_core::Image;

use crate::autograd::Tape;
use crate::checkpoint;
use crate::network::{level_tensors, ModelConfig, Network};
use crate::objectives::{fpc_loss, total_loss, LossReport, DEFAULT_LAMBDA_C};
use crate::optim::{Adam, AdamConfig};
use crate::spp::scales_for_side;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Stream tag for the per-epoch shuffle, kept apart from degradation streams.
const SHUFFLE_TAG: u64 = 0x5348_5546;
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const NONFINITE_DUMP_FILE: &str = "nonfinite_batch.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub decay_start_epoch: usize,
    pub base_lr: f64,
    /// SeqLC groups per optimizer step.
    pub batch_size: usize,
    pub lambda_c: f64,
    /// Degraded variants per clean image (`K`).
    pub seq_len: usize,
    pub seed: u64,
    pub side: usize,
    /// Pyramid depth `L`; the network gets `L + 1` stages.
    pub levels: usize,
    pub base_channels: usize,
    pub channel_cap: usize,
    /// Epochs between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub degradation: DegradationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            decay_start_epoch: 150,
            base_lr: 0.001,
            batch_size: 16,
            lambda_c: DEFAULT_LAMBDA_C,
            seq_len: 2,
            seed: 0,
            side: 256,
            levels: 4,
            base_channels: 64,
            channel_cap: 512,
            checkpoint_every: 10,
            degradation: DegradationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.decay_start_epoch == 0 || self.decay_start_epoch > self.epochs {
            return Err(Error::Config(format!(
                "need 0 < decay_start_epoch ({}) <= epochs ({})",
                self.decay_start_epoch, self.epochs
            )));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr {} must be positive", self.base_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.seq_len == 0 {
            return Err(Error::Config("seq_len (K) must be >= 1".into()));
        }
        if !(self.lambda_c >= 0.0 && self.lambda_c.is_finite()) {
            return Err(Error::Config(format!("lambda_c {} must be >= 0", self.lambda_c)));
        }
        if self.levels >= usize::BITS as usize || self.side == 0 || self.side % (1 << self.levels) != 0 {
            return Err(Error::Config(format!(
                "side {} must be a positive multiple of 2^levels ({})",
                self.side, self.levels
            )));
        }
        self.degradation.validate()?;
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            depth: self.levels + 1,
            base_channels: self.base_channels,
            channel_cap: self.channel_cap,
            instance_norm: true,
        }
    }

    /// Degradation settings for one epoch: the configured ranges under an epoch-mixed seed.
    pub fn degradation_for_epoch(&self, epoch: usize) -> DegradationConfig {
        DegradationConfig {
            seed: mix(&[self.seed, epoch as u64]),
            ..self.degradation.clone()
        }
    }
}

/// Constant `base_lr` before `decay_start_epoch`, then linear decay reaching 0 at `epochs`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Parameter(format!(
            "epoch {epoch} outside [0, {})",
            cfg.epochs
        )));
    }
    if epoch < cfg.decay_start_epoch {
        Ok(cfg.base_lr)
    } else {
        let remaining = (cfg.epochs - epoch) as f64;
        let span = (cfg.epochs - cfg.decay_start_epoch) as f64;
        Ok(cfg.base_lr * remaining / span)
    }
}

/// Loss and parameter gradients of one SeqLC group.
pub fn group_loss_grad(net: &Network, group: &SeqLC, lambda_c: f64) -> Result<(LossReport, Vec<Tensor>)> {
    let levels = net.config().levels();
    let stacks = group
        .variants
        .iter()
        .map(|v| laplacian_decompose(&v.pixels, levels))
        .collect::<fundus_core::Result<Vec<_>>>()?;
    for s in &stacks {
        net.config().check_stack(s)?;
    }
    let refs: Vec<_> = stacks.iter().collect();
    let mut tape = Tape::new();
    let params = net.bind(&mut tape, true);
    let inputs: Vec<_> = level_tensors(&refs).into_iter().map(|t| tape.constant(t)).collect();
    let graph = net.build(&mut tape, &params, &inputs)?;
    let target: Vec<f64> = group.clean.pixels.iter().copied().collect();
    let l_e = tape.l1_against(graph.output, &target);
    let mut terms = vec![(l_e, 1.0)];
    let mut per_layer = Vec::with_capacity(graph.taps.len());
    for &tap in &graph.taps {
        let side = tape.value(tap).dims4().2;
        let desc = tape.spp(tap, &scales_for_side(side));
        let l_c = tape.consistency(desc);
        per_layer.push(tape.value(l_c).item());
        terms.push((l_c, lambda_c));
    }
    let root = tape.weighted_sum(&terms);
    let report = total_loss(tape.value(l_e).item(), &per_layer, lambda_c)?;
    let mut grads = tape.backward(root);
    let grads = params
        .iter()
        .zip(net.params())
        .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((report, grads))
}

/// Everything a run needs to continue: parameters, optimizer state and progress.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub network: Network,
    pub adam: Adam,
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let network = Network::init(config.model_config(), mix(&[config.seed, 0x1417]))?;
        let adam = Adam::new(AdamConfig::default(), network.params());
        Ok(TrainState {
            config,
            network,
            adam,
            epoch: 0,
            step: 0,
        })
    }
}

/// One optimizer update from a batch of groups. Group gradients are computed on `pool`
/// and summed in batch order, so the result does not depend on the worker count.
pub fn train_step(state: &mut TrainState, batch: &[SeqLC], lr: f64, pool: &rayon::ThreadPool) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    let net = &state.network;
    let lambda_c = state.config.lambda_c;
    let results: Vec<Result<(LossReport, Vec<Tensor>)>> =
        pool.install(|| batch.par_iter().map(|g| group_loss_grad(net, g, lambda_c)).collect());
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let reports: Vec<LossReport> = results.iter().map(|(r, _)| r.clone()).collect();
    let ids: Vec<usize> = batch.iter().map(|g| g.image_id as usize).collect();
    let grads_finite = results.iter().all(|(_, g)| g.iter().all(Tensor::is_finite));
    let report = LossReport::mean(&reports).expect("non-empty batch");
    if !report.is_finite() || !grads_finite {
        let dump = serde_json::json!({ "batch_ids": ids, "reports": reports, "step": state.step });
        return Err(Error::NonFinite {
            batch_ids: ids,
            dump: dump.to_string(),
        });
    }
    let inv = 1.0 / batch.len() as f64;
    let mut sum: Vec<Tensor> = net.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    for (_, grads) in &results {
        for (s, g) in sum.iter_mut().zip(grads) {
            s.add_assign(g);
        }
    }
    sum.iter_mut().for_each(|s| s.scale(inv));
    state.adam.update(state.network.params_mut(), &sum, lr);
    state.step += 1;
    Ok(report)
}

/// Builds one worker pool with `workers` threads (0 means one per core).
pub fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))
}

/// Corpus indices for each step of `epoch`.
pub fn epoch_batches(corpus_len: usize, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..corpus_len).collect();
    order.shuffle(&mut rng_for(&[cfg.seed, epoch as u64, SHUFFLE_TAG]));
    order.chunks(cfg.batch_size).map(|c| c.to_vec()).collect()
}

/// Fresh SeqLC groups for the given corpus indices.
pub fn synthesize_batch(
    corpus: &[Image],
    ids: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
    pool: &rayon::ThreadPool,
) -> Result<Vec<SeqLC>> {
    let deg = cfg.degradation_for_epoch(epoch);
    pool.install(|| {
        ids.par_iter()
            .map(|&i| make_seqlc(&corpus[i], &deg, cfg.seq_len, i as u64).map_err(Error::from))
            .collect()
    })
}

#[derive(Debug, Clone, Default)]
pub struct LoopOptions {
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    pub workers: usize,
    /// Suppresses per-step progress lines on stderr.
    pub quiet: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub state: TrainState,
    /// Mean report of each epoch run by this call.
    pub epoch_means: Vec<LossReport>,
    pub steps_run: u64,
}

#[derive(Serialize)]
struct StepRecord<'a> {
    kind: &'static str,
    epoch: usize,
    step: u64,
    lr: f64,
    batch_ids: &'a [usize],
    #[serde(flatten)]
    losses: &'a LossReport,
}

fn write_record<T: Serialize>(out: &mut BufWriter<File>, path: &Path, record: &T) -> Result<()> {
    let line = serde_json::to_string(record).map_err(|e| Error::Config(e.to_string()))?;
    writeln!(out, "{line}")
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

/// Runs training from scratch or from `opts.resume` up to `cfg.epochs`.
pub fn train_loop(corpus: &[Image], cfg: &TrainConfig, opts: &LoopOptions) -> Result<TrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    cfg.validate()?;
    for (i, img) in corpus.iter().enumerate() {
        if img.height() != cfg.side || img.width() != cfg.side {
            return Err(Error::Config(format!(
                "corpus image {i} is {}x{}, expected {}x{}",
                img.height(),
                img.width(),
                cfg.side,
                cfg.side
            )));
        }
    }
    std::fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let mut state = match &opts.resume {
        Some(path) => {
            let mut s = checkpoint::load(path)?;
            if s.network.config() != &cfg.model_config() {
                return Err(Error::Config(format!(
                    "checkpoint model {:?} differs from configured {:?}",
                    s.network.config(),
                    cfg.model_config()
                )));
            }
            s.config = cfg.clone();
            s
        }
        None => TrainState::new(cfg.clone())?,
    };
    let pool = worker_pool(opts.workers)?;
    let metrics_path = opts.out_dir.join(METRICS_FILE);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let ckpt_path = opts.out_dir.join(CHECKPOINT_FILE);
    let mut epoch_means = Vec::new();
    let mut steps_run = 0;
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let lr = lr_schedule(epoch, cfg)?;
        let mut reports = Vec::new();
        for ids in epoch_batches(corpus.len(), cfg, epoch) {
            let batch = synthesize_batch(corpus, &ids, cfg, epoch, &pool)?;
            let report = match train_step(&mut state, &batch, lr, &pool) {
                Ok(r) => r,
                Err(Error::NonFinite { batch_ids, dump }) => {
                    let dump_path = opts.out_dir.join(NONFINITE_DUMP_FILE);
                    std::fs::write(&dump_path, &dump).map_err(|e| Error::io(&dump_path, e))?;
                    return Err(Error::NonFinite {
                        batch_ids,
                        dump: dump_path.display().to_string(),
                    });
                }
                Err(e) => return Err(e),
            };
            steps_run += 1;
            let record = StepRecord {
                kind: "step",
                epoch,
                step: state.step,
                lr,
                batch_ids: &ids,
                losses: &report,
            };
            write_record(&mut metrics, &metrics_path, &record)?;
            reports.push(report);
        }
        let mean = LossReport::mean(&reports).expect("at least one batch per epoch");
        let record = StepRecord {
            kind: "epoch",
            epoch,
            step: state.step,
            lr,
            batch_ids: &[],
            losses: &mean,
        };
        write_record(&mut metrics, &metrics_path, &record)?;
        if !opts.quiet {
            eprintln!(
                "epoch {}/{} lr={lr:.6} L_total={:.6} L_E={:.6} L_C={:.6}",
                epoch + 1,
                cfg.epochs,
                mean.total,
                mean.enhancement,
                mean.consistency
            );
        }
        epoch_means.push(mean);
        state.epoch += 1;
        let due = cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0;
        if due || state.epoch == cfg.epochs {
            checkpoint::save(&state, &ckpt_path)?;
        }
    }
    if steps_run == 0 {
        checkpoint::save(&state, &ckpt_path)?;
    }
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        state,
        epoch_means,
        steps_run,
    })
}

/// Degradation sensitivity of a trained network on held-out images.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvarianceReport {
    /// Mean absolute difference between enhanced variants of the same image, averaged
    /// over all variant pairs and images.
    pub mean_pairwise_l1: f64,
    /// Layer consistency loss per encoder layer, averaged over images.
    pub consistency_per_layer: Vec<f64>,
}

/// Enhances `k` fresh degradations of every image and measures how much the outputs and
/// encoder features disagree.
pub fn invariance_probe(net: &Network, images: &[Image], deg: &DegradationConfig, k: usize) -> Result<InvarianceReport> {
    if images.is_empty() || k < 2 {
        return Err(Error::Parameter("probe needs at least one image and K >= 2".into()));
    }
    let mut l1_sum = 0.0;
    let mut layer_sum = vec![0.0; net.config().depth];
    for (i, img) in images.iter().enumerate() {
        let group = make_seqlc(img, deg, k, i as u64)?;
        let stacks = group
            .variants
            .iter()
            .map(|v| laplacian_decompose(&v.pixels, net.config().levels()))
            .collect::<fundus_core::Result<Vec<_>>>()?;
        let outs = net.forward_batch(&stacks.iter().collect::<Vec<_>>())?;
        let mut pair_sum = 0.0;
        let mut pairs = 0;
        for a in 0..k {
            for b in a + 1..k {
                let (x, y) = (&outs[a].0, &outs[b].0);
                pair_sum += (x - y).mapv(f64::abs).mean().expect("non-empty output");
                pairs += 1;
            }
        }
        l1_sum += pair_sum / pairs as f64;
        let taps: Vec<_> = outs.into_iter().map(|(_, t)| t).collect();
        let (_, per_layer) = fpc_loss(&taps)?;
        for (s, v) in layer_sum.iter_mut().zip(per_layer) {
            *s += v;
        }
    }
    let n = images.len() as f64;
    Ok(InvarianceReport {
        mean_pairwise_l1: l1_sum / n,
        consistency_per_layer: layer_sum.into_iter().map(|s| s / n).collect(),
    })
}
