use std::cell::OnceCell;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{macro_f1, mean_iou};
use super::{ExperimentConfig, OptimizerKind, ResultRow, SplitData, Task};
use crate::costmodel::flops_for_retained;
use crate::masking::{ms1_uniform, ms2_diversity, ms3_plan, similarity_matrix, SampleSeed, SimilarityMatrix, Strategy};
use crate::model::{HeadConfig, HeadParams, Network, NetworkConfig};
use crate::numkernel::{Tape, Tensor, Var};
use crate::patching::{gather_patches, partition, ImageSample, PatchGrid};
use crate::{Error, Result};

/// A trained network and its loss trace.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network,
    /// Mean minibatch loss before each step.
    pub losses: Vec<f64>,
    /// Evaluation on the eval split at full input and at the configured
    /// inference ratio.
    pub rows: Vec<ResultRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metric_name: String,
    pub value: f64,
    /// Mean number of retained patches per sample.
    pub mean_retained: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Which patches a sample keeps.
#[derive(Clone, Copy, Debug)]
enum Selection {
    Full,
    Ratio { strategy: Strategy, r: f64, epoch: usize },
    Threshold(f64),
}

impl Selection {
    fn new(strategy: Strategy, r: f64, tau: Option<f64>, epoch: usize) -> Result<Self> {
        Ok(match strategy {
            Strategy::Ms3 => Selection::Threshold(
                tau.ok_or_else(|| Error::Config("ms3 needs a threshold tau".into()))?,
            ),
            _ if r >= 1.0 => Selection::Full,
            _ => Selection::Ratio { strategy, r, epoch },
        })
    }
}

struct Prepared<'a> {
    sample: &'a ImageSample,
    grid: PatchGrid,
    sim: OnceCell<SimilarityMatrix>,
    /// Deterministic plans cached by selection parameters.
    fixed: OnceCell<(u64, Vec<usize>)>,
}

impl<'a> Prepared<'a> {
    fn new(sample: &'a ImageSample, patch: usize) -> Result<Self> {
        Ok(Self {
            sample,
            grid: partition(sample, patch)?,
            sim: OnceCell::new(),
            fixed: OnceCell::new(),
        })
    }

    fn sim(&self) -> &SimilarityMatrix {
        self.sim.get_or_init(|| similarity_matrix(&self.grid))
    }

    fn indices(&self, sel: Selection) -> Result<Vec<usize>> {
        let n = self.grid.len();
        match sel {
            Selection::Full => Ok((0..n).collect()),
            Selection::Ratio {
                strategy: Strategy::Ms1,
                r,
                epoch,
            } => Ok(ms1_uniform(&SampleSeed::for_epoch(&self.sample.key, epoch), r, n)?.indices),
            Selection::Ratio { r, .. } => self.cached(r.to_bits(), || Ok(ms2_diversity(self.sim(), r)?.indices)),
            Selection::Threshold(tau) => {
                self.cached(!tau.to_bits(), || Ok(ms3_plan(self.sim(), tau)?.indices))
            }
        }
    }

    fn cached(&self, key: u64, make: impl FnOnce() -> Result<Vec<usize>>) -> Result<Vec<usize>> {
        if let Some((k, v)) = self.fixed.get() {
            if *k == key {
                return Ok(v.clone());
            }
        }
        let v = make()?;
        // Only the first deterministic plan is cached; runs use one setting.
        let _ = self.fixed.set((key, v.clone()));
        Ok(v)
    }
}

fn prepare<'a>(samples: &'a [ImageSample], config: &NetworkConfig) -> Result<Vec<Prepared<'a>>> {
    let enc = &config.encoder;
    samples
        .iter()
        .map(|s| {
            if (s.height, s.width, s.channels) != (enc.image_height, enc.image_width, enc.channels) {
                return Err(Error::Invalid(format!(
                    "shape mismatch: sample {} is {}x{}x{}, network expects {}x{}x{}",
                    s.key, s.height, s.width, s.channels, enc.image_height, enc.image_width, enc.channels
                )));
            }
            let p = Prepared::new(s, enc.patch)?;
            match config.head {
                HeadConfig::Classification { labels } if s.labels.presence.len() != labels => Err(Error::Invalid(
                    format!("sample {} has {} labels, head has {labels}", s.key, s.labels.presence.len()),
                )),
                HeadConfig::Segmentation { .. } if s.labels.segmentation.len() != s.height * s.width => Err(
                    Error::Invalid(format!("sample {} has no segmentation map", s.key)),
                ),
                _ => Ok(p),
            }
        })
        .collect()
}

fn batch_loss(
    net: &Network,
    tape: &mut Tape,
    train_encoder: bool,
    items: &[&Prepared],
    sel: Selection,
) -> Result<(Var, Vec<Var>)> {
    let vars = net.bind(tape, train_encoder, true);
    let grids: Vec<&PatchGrid> = items.iter().map(|p| &p.grid).collect();
    let plans = items.iter().map(|p| p.indices(sel)).collect::<Result<Vec<_>>>()?;
    let batch = gather_patches(&grids, &plans)?;
    let logits = net.logits_on_tape(tape, &vars, &batch)?;
    let loss = match net.config.head {
        HeadConfig::Classification { .. } => {
            let targets: Vec<f64> = items
                .iter()
                .flat_map(|p| p.sample.labels.presence.iter().map(|&v| v as f64))
                .collect();
            tape.bce_with_logits(logits, &targets)?
        }
        HeadConfig::Segmentation { .. } => {
            let labels: Vec<usize> = items
                .iter()
                .flat_map(|p| p.sample.labels.segmentation.iter().map(|&v| v as usize))
                .collect();
            tape.ce_pixelwise(logits, &labels)?
        }
    };
    let mut params = Vec::new();
    if train_encoder {
        vars.encoder.visit(&mut |_, v| params.push(*v));
    }
    vars.head.visit(&mut |_, v| params.push(*v));
    Ok((loss, params))
}

/// Update rule over the trainable tensors, in visiting order.
struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: i32,
}

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    fn new(kind: OptimizerKind, lr: f64, momentum: f64) -> Self {
        Self {
            kind,
            lr,
            momentum,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr, 0.0)
    }

    fn apply(&mut self, tensors: Vec<&mut Tensor>, grads: Vec<Option<&[f64]>>) {
        if self.first.is_empty() {
            self.first = tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
            if self.kind == OptimizerKind::Adam {
                self.second = self.first.clone();
            }
        }
        self.steps += 1;
        for (i, (t, g)) in tensors.into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let w = t.data_mut();
            match self.kind {
                OptimizerKind::Sgd if self.momentum == 0.0 => {
                    for (w, gi) in w.iter_mut().zip(g) {
                        *w -= self.lr * gi;
                    }
                }
                OptimizerKind::Sgd => {
                    for ((w, v), gi) in w.iter_mut().zip(self.first[i].iter_mut()).zip(g) {
                        *v = self.momentum * *v + gi;
                        *w -= self.lr * *v;
                    }
                }
                OptimizerKind::Adam => {
                    let b1 = self.momentum;
                    let c1 = 1.0 - b1.powi(self.steps);
                    let c2 = 1.0 - ADAM_BETA2.powi(self.steps);
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (((w, m), v), gi) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                        *m = b1 * *m + (1.0 - b1) * gi;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * gi * gi;
                        *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

fn step(
    net: &mut Network,
    opt: &mut Optimizer,
    train_encoder: bool,
    items: &[&Prepared],
    sel: Selection,
    step_index: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, params) = batch_loss(net, &mut tape, train_encoder, items, sel)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Diverged {
            step: step_index,
            loss: value,
        });
    }
    tape.backward(loss)?;
    let grads: Vec<Option<&[f64]>> = params.iter().map(|&v| tape.grad(v)).collect();
    let mut tensors: Vec<&mut Tensor> = Vec::with_capacity(params.len());
    let Network { encoder, head, .. } = net;
    if train_encoder {
        push_mut_encoder(encoder, &mut tensors);
    }
    push_mut_head(head, &mut tensors);
    opt.apply(tensors, grads);
    Ok(value)
}

fn push_mut_encoder<'a>(e: &'a mut crate::model::EncoderParams<Tensor>, out: &mut Vec<&'a mut Tensor>) {
    out.push(&mut e.projection);
    out.push(&mut e.projection_bias);
    out.push(&mut e.class_token);
    for b in &mut e.blocks {
        out.extend(b.fields_mut());
    }
    out.push(&mut e.norm_gain);
    out.push(&mut e.norm_bias);
}

fn push_mut_head<'a>(h: &'a mut HeadParams<Tensor>, out: &mut Vec<&'a mut Tensor>) {
    match h {
        HeadParams::Classifier { weight, bias } => {
            out.push(weight);
            out.push(bias);
        }
        HeadParams::Decoder {
            stage_weights,
            stage_biases,
            out_weight,
            out_bias,
        } => {
            for (w, b) in stage_weights.iter_mut().zip(stage_biases.iter_mut()) {
                out.push(w);
                out.push(b);
            }
            out.push(out_weight);
            out.push(out_bias);
        }
    }
}

/// One SGD step of the whole network on `batch`, returning the loss before
/// the step. Masks follow the configured training strategy in `epoch`.
pub fn sgd_step(net: &mut Network, cfg: &ExperimentConfig, batch: &[ImageSample], epoch: usize) -> Result<f64> {
    let prepared = prepare(batch, &net.config)?;
    let items: Vec<&Prepared> = prepared.iter().collect();
    let sel = Selection::new(cfg.strategy, cfg.train_ratio, cfg.tau, epoch)?;
    let mut opt = Optimizer::sgd(cfg.optimizer.lr);
    step(net, &mut opt, true, &items, sel, 0)
}

/// Trains a fresh network on `samples` without evaluating it.
pub fn fit(cfg: &ExperimentConfig, samples: &[ImageSample]) -> Result<(Network, Vec<f64>)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no training samples".into()));
    }
    let mut net = Network::new(cfg.network_config()?, cfg.seed)?;
    let prepared = prepare(samples, &net.config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut opt = Optimizer::new(cfg.optimizer.kind, cfg.optimizer.lr, cfg.optimizer.momentum);
    let mut losses = Vec::with_capacity(cfg.optimizer.steps);
    let mut epoch = 0;
    while losses.len() < cfg.optimizer.steps {
        order.shuffle(&mut rng);
        let sel = Selection::new(cfg.strategy, cfg.train_ratio, cfg.tau, epoch)?;
        for chunk in order.chunks(cfg.optimizer.batch_size) {
            if losses.len() == cfg.optimizer.steps {
                break;
            }
            let items: Vec<&Prepared> = chunk.iter().map(|&i| &prepared[i]).collect();
            let loss = step(&mut net, &mut opt, true, &items, sel, losses.len())?;
            log::debug!("step {} epoch {epoch} loss {loss:.5}", losses.len());
            losses.push(loss);
        }
        epoch += 1;
    }
    Ok((net, losses))
}

/// Trains on the train split and evaluates on the eval split at full input
/// (Setting A) and at the configured inference ratio (Setting B).
pub fn train(cfg: &ExperimentConfig, data: &SplitData) -> Result<TrainOutcome> {
    let (network, losses) = fit(cfg, &data.train)?;
    let mut rows = Vec::new();
    let mut ratios = vec![1.0];
    if cfg.eval_ratio != 1.0 {
        ratios.push(cfg.eval_ratio);
    }
    for r in ratios {
        let eval = evaluate(&network, &data.eval, cfg.strategy, r, cfg.tau)?;
        rows.push(result_row(cfg, r, &network, &eval)?);
    }
    Ok(TrainOutcome {
        network,
        losses,
        rows,
    })
}

pub(crate) fn result_row(
    cfg: &ExperimentConfig,
    eval_ratio: f64,
    net: &Network,
    eval: &EvalResult,
) -> Result<ResultRow> {
    let enc = &net.config.encoder;
    let k = (eval.mean_retained.round() as usize).clamp(1, enc.num_patches());
    let cost = flops_for_retained(enc, (enc.image_height, enc.image_width), k, &net.config.head)?;
    let mut row = ResultRow::skeleton(cfg, eval_ratio);
    row.metric_name = eval.metric_name.clone();
    row.metric_value = Some(eval.value);
    row.gflops = cost.gflops;
    row.peak_mem_mb = cost.peak_mem_mb;
    Ok(row)
}

const EVAL_BATCH: usize = 64;

/// Metric of `net` on `samples` with inference-time retention.
///
/// MS1 uses each sample's epoch-0 mask; MS3 applies `tau` unless
/// `r_eval = 1`, which always means the full input.
pub fn evaluate(
    net: &Network,
    samples: &[ImageSample],
    strategy: Strategy,
    r_eval: f64,
    tau: Option<f64>,
) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no evaluation samples".into()));
    }
    if !(r_eval > 0.0 && r_eval <= 1.0) {
        return Err(Error::Invalid(format!("eval ratio {r_eval} outside (0, 1]")));
    }
    let sel = if r_eval >= 1.0 {
        Selection::Full
    } else {
        Selection::new(strategy, r_eval, tau, 0)?
    };
    let prepared = prepare(samples, &net.config)?;
    let mut predicted = Vec::new();
    let mut truth = Vec::new();
    let mut retained = 0usize;
    for chunk in prepared.chunks(EVAL_BATCH) {
        let grids: Vec<&PatchGrid> = chunk.iter().map(|p| &p.grid).collect();
        let plans = chunk.iter().map(|p| p.indices(sel)).collect::<Result<Vec<_>>>()?;
        retained += plans.iter().map(Vec::len).sum::<usize>();
        let batch = gather_patches(&grids, &plans)?;
        let logits = net.logits(&batch)?;
        match net.config.head {
            HeadConfig::Classification { .. } => {
                predicted.extend(logits.data().iter().map(|&z| u8::from(z >= 0.0)));
                for p in chunk {
                    truth.extend_from_slice(&p.sample.labels.presence);
                }
            }
            HeadConfig::Segmentation { classes, .. } => {
                for row in logits.data().chunks(classes) {
                    let best = row
                        .iter()
                        .enumerate()
                        .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
                    predicted.push(best as u8);
                }
                for p in chunk {
                    truth.extend_from_slice(&p.sample.labels.segmentation);
                }
            }
        }
    }
    let (task, value) = match net.config.head {
        HeadConfig::Classification { labels } => (Task::Classification, macro_f1(&predicted, &truth, labels)),
        HeadConfig::Segmentation { classes, .. } => (Task::Segmentation, mean_iou(&predicted, &truth, classes)),
    };
    Ok(EvalResult {
        metric_name: task.metric_name().to_string(),
        value,
        mean_retained: retained as f64 / samples.len() as f64,
        samples: samples.len(),
    })
}

fn class_embeddings(net: &Network, prepared: &[Prepared]) -> Result<Tensor> {
    let d = net.config.encoder.dim;
    let mut data = Vec::with_capacity(prepared.len() * d);
    for chunk in prepared.chunks(EVAL_BATCH) {
        let grids: Vec<&PatchGrid> = chunk.iter().map(|p| &p.grid).collect();
        let plans = chunk
            .iter()
            .map(|p| p.indices(Selection::Full))
            .collect::<Result<Vec<_>>>()?;
        let batch = gather_patches(&grids, &plans)?;
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape, false, false);
        let trace = net.encode_on_tape(&mut tape, &vars.encoder, &batch)?;
        data.extend_from_slice(tape.value(trace.class_embedding).data());
    }
    Ok(Tensor::new(vec![prepared.len(), d], data)?)
}

/// Fits a fresh linear classifier on the frozen encoder's class embeddings.
///
/// Returns the probed network (the frozen encoder with the new head) and
/// its metric on `eval` at full input.
pub fn linear_probe(
    frozen: &Network,
    train: &[ImageSample],
    eval: &[ImageSample],
    cfg: &ProbeConfig,
) -> Result<(Network, EvalResult)> {
    let labels = train
        .first()
        .ok_or_else(|| Error::EmptyDataset("no probe training samples".into()))?
        .labels
        .presence
        .len();
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("probe needs a positive step size and batch size".into()));
    }
    let config = NetworkConfig {
        encoder: frozen.config.encoder.clone(),
        head: HeadConfig::Classification { labels },
    };
    let fresh = Network::new(config.clone(), cfg.seed)?;
    let mut net = Network::from_parts(config, frozen.encoder.clone(), fresh.head)?;
    let prepared = prepare(train, &net.config)?;
    let features = class_embeddings(&net, &prepared)?;
    let d = features.last_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut opt = Optimizer::sgd(cfg.lr);
    let mut done = 0;
    while done < cfg.steps {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if done == cfg.steps {
                break;
            }
            let x: Vec<f64> = chunk.iter().flat_map(|&i| features.row(i).iter().copied()).collect();
            let targets: Vec<f64> = chunk
                .iter()
                .flat_map(|&i| train[i].labels.presence.iter().map(|&v| v as f64))
                .collect();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![chunk.len(), d], x)?);
            let head = net.head.map(|_, t| tape.leaf(t.clone()));
            let HeadParams::Classifier { weight, bias } = head else {
                unreachable!("probe head is a classifier")
            };
            let y = tape.matmul(x, weight)?;
            let y = tape.add_bias(y, bias)?;
            let loss = tape.bce_with_logits(y, &targets)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged { step: done, loss: value });
            }
            tape.backward(loss)?;
            let grads = vec![tape.grad(weight), tape.grad(bias)];
            let mut tensors = Vec::new();
            push_mut_head(&mut net.head, &mut tensors);
            opt.apply(tensors, grads);
            done += 1;
        }
    }
    let result = evaluate(&net, eval, Strategy::Ms1, 1.0, None)?;
    Ok((net, result))
}
