//! Training: composite BCE + soft-IoU loss with deep supervision, Adam,
//! evaluation on held-out samples, and best-mIoU checkpointing.

mod history;

pub use history::{HistoryEntry, History};

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, Sample};
use crate::error::{Error, Result};
use crate::metrics::{self, binarize, BinaryMask, FloodReport, ImageMetrics};
use crate::model::{Checkpoint, FloodTransformer, Forward, Params, Segmenter};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps in total, counting resumed ones.
    pub max_steps: Option<usize>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub w_bce: f64,
    pub w_iou: f64,
    /// Weights of the auxiliary heads on `f0` (H/8), `f1` (H/4), `f2` (H/2).
    pub aux_weights: [f64; 3],
    /// Evaluate on the test samples every this many steps; 0 disables.
    pub eval_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub seed: u64,
    pub augment: bool,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 4,
            max_steps: None,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            w_bce: 1.0,
            w_iou: 1.0,
            aux_weights: [0.2, 0.3, 0.5],
            eval_every: 50,
            checkpoint_path: None,
            seed: 0,
            augment: false,
            threshold: metrics::DEFAULT_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("eps", self.eps),
            ("w_bce", self.w_bce),
            ("w_iou", self.w_iou),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParam(format!("{name} must be positive, got {v}")));
            }
        }
        if self.aux_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidParam("aux weights must be non-negative".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidParam(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch_size must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidParam(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }
}

/// `1 − (I + 1) / (U + 1)` on sigmoid probabilities, with `I = Σ p·t` and `U = Σ p + Σ t − I`.
pub fn soft_iou_loss(tape: &mut Tape, logits: Var, target: &Tensor) -> Result<Var> {
    let p = tape.sigmoid(logits);
    let t = tape.constant(target.clone());
    let pt = tape.mul(p, t)?;
    let inter = tape.sum(pt);
    let sum_p = tape.sum(p);
    let sum_t: f64 = target.data().iter().sum();
    let minus_inter = tape.scale(inter, -1.0);
    let union = tape.add(sum_p, minus_inter)?;
    let num = tape.add_scalar(inter, 1.0);
    let den = tape.add_scalar(union, sum_t + 1.0);
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// `w_bce · BCE + w_iou · softIoU` for one head.
pub fn head_loss(tape: &mut Tape, logits: Var, target: &Tensor, cfg: &TrainConfig) -> Result<Var> {
    let bce = tape.bce_with_logits(logits, target)?;
    let iou = soft_iou_loss(tape, logits, target)?;
    let bce = tape.scale(bce, cfg.w_bce);
    let iou = tape.scale(iou, cfg.w_iou);
    tape.add(bce, iou)
}

/// Loss handles for one image.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    /// Main head plus weighted auxiliary heads; this is what gets differentiated.
    pub total: Var,
    /// Main head alone.
    pub main: Var,
}

pub fn loss(tape: &mut Tape, forward: &Forward, truth: &BinaryMask, cfg: &TrainConfig) -> Result<LossTerms> {
    let target = truth.to_tensor();
    let main = head_loss(tape, forward.logits, &target, cfg)?;
    let mut total = main;
    for (&aux, &w) in forward.aux_logits.iter().zip(&cfg.aux_weights) {
        if w == 0.0 {
            continue;
        }
        let l = head_loss(tape, aux, &target, cfg)?;
        let l = tape.scale(l, w);
        total = tape.add(total, l)?;
    }
    Ok(LossTerms { total, main })
}

/// Adam moments and progress counters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    pub best_miou: Option<f64>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl TrainState {
    pub fn new(params: &Params) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        TrainState {
            step: 0,
            epoch: 0,
            best_miou: None,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Writes the model, counters and moments as one checkpoint.
    pub fn checkpoint(&self, model: &FloodTransformer) -> Checkpoint {
        let mut ck = model.to_checkpoint();
        ck.meta.insert("step".into(), self.step.to_string());
        ck.meta.insert("epoch".into(), self.epoch.to_string());
        if let Some(b) = self.best_miou {
            ck.meta.insert("best_miou".into(), format!("{b:?}"));
        }
        for (name, (m, v)) in model.params().names().iter().zip(self.m.iter().zip(&self.v)) {
            ck.tensors.push((format!("adam.m.{name}"), m.clone()));
            ck.tensors.push((format!("adam.v.{name}"), v.clone()));
        }
        ck
    }

    /// Restores counters and moments; falls back to fresh moments when absent.
    pub fn from_checkpoint(ck: &Checkpoint, model: &FloodTransformer) -> Result<Self> {
        let mut state = TrainState::new(model.params());
        let meta = |k: &str| ck.meta.get(k);
        let parse = |k: &str| -> Result<usize> {
            meta(k)
                .map(|s| s.parse().map_err(|_| Error::format("checkpoint", format!("bad `{k}`"))))
                .unwrap_or(Ok(0))
        };
        state.step = parse("step")?;
        state.epoch = parse("epoch")?;
        state.best_miou = meta("best_miou").and_then(|s| s.parse().ok());
        for (i, name) in model.params().names().iter().enumerate() {
            if let (Some(m), Some(v)) = (
                ck.tensor(&format!("adam.m.{name}")),
                ck.tensor(&format!("adam.v.{name}")),
            ) {
                if m.shape() != state.m[i].shape() || v.shape() != state.v[i].shape() {
                    return Err(Error::ConfigMismatch(format!("moment shape for `{name}`")));
                }
                state.m[i] = m.clone();
                state.v[i] = v.clone();
            }
        }
        Ok(state)
    }
}

/// One bias-corrected Adam update; increments `state.step`.
pub fn adam_step(params: &mut Params, state: &mut TrainState, grads: &[Vec<f64>], cfg: &TrainConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (i, (p, g)) in params.tensors().iter().zip(grads).enumerate() {
        if p.numel() != g.len() || state.m[i].numel() != g.len() {
            return Err(Error::shape(
                "adam_step",
                format!("parameter {i}: {} values, gradient {}", p.numel(), g.len()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Loss values, gradients and the thresholded prediction for one image.
pub struct ImageStep {
    pub total: f64,
    pub main: f64,
    pub grads: Vec<Vec<f64>>,
    pub prediction: BinaryMask,
}

pub fn image_step(model: &FloodTransformer, sample: &Sample, cfg: &TrainConfig) -> Result<ImageStep> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let x = tape.constant(sample.image.clone());
    let forward = model.forward(&mut tape, &p, x)?;
    let terms = loss(&mut tape, &forward, &sample.mask, cfg)?;
    let total = tape.value(terms.total).item()?;
    let main = tape.value(terms.main).item()?;
    let probs = Tensor::from_fn(tape.shape(forward.logits).to_vec(), |i| {
        crate::tensor::kernels::sigmoid(tape.value(forward.logits).data()[i])
    });
    let prediction = binarize(&probs, cfg.threshold)?;
    let grads = tape.backward(terms.total)?;
    let grads = p
        .vars()
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, t)| grads.wrt(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    Ok(ImageStep {
        total,
        main,
        grads,
        prediction,
    })
}

/// Scores `model` on `samples`; parameters are never touched.
pub fn evaluate(model: &dyn Segmenter, samples: &[Sample], threshold: f64) -> Result<FloodReport> {
    if samples.is_empty() {
        return Err(Error::EmptySplit("test"));
    }
    let mut per_image = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = binarize(&model.probabilities(&s.image)?, threshold)?;
        per_image.push(ImageMetrics::score(s.id.clone(), &pred, &s.mask)?);
    }
    metrics::aggregate(per_image)
}

#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub step: usize,
    pub report: FloodReport,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub state: TrainState,
    pub history: History,
    pub evals: Vec<EvalRecord>,
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
}

/// Runs `cfg.epochs` further epochs over `train`, continuing from `state`.
///
/// Each optimizer step averages gradients over one shuffled mini-batch. When
/// `test` is non-empty it is evaluated every `eval_every` steps and after the
/// last step; the checkpoint is written whenever test mIoU improves. Without
/// test samples the checkpoint is written once at the end.
pub fn fit(
    model: &mut FloodTransformer,
    train: &[Sample],
    test: &[Sample],
    cfg: &TrainConfig,
    state: Option<TrainState>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    let mut state = state.unwrap_or_else(|| TrainState::new(model.params()));
    let mut history = History::default();
    let mut evals = Vec::new();
    let budget_left = |s: &TrainState| cfg.max_steps.is_none_or(|m| s.step < m);

    let run_eval = |model: &FloodTransformer, state: &mut TrainState, evals: &mut Vec<EvalRecord>| -> Result<()> {
        let report = evaluate(model, test, cfg.threshold)?;
        let miou = report.aggregate.miou_mean;
        let improved = state.best_miou.is_none_or(|b| miou > b);
        if improved {
            state.best_miou = Some(miou);
            if let Some(path) = &cfg.checkpoint_path {
                state.checkpoint(model).save(path)?;
            }
        }
        evals.push(EvalRecord {
            step: state.step,
            report,
            improved,
        });
        Ok(())
    };

    let mut last_eval = None;
    for _ in 0..cfg.epochs {
        if !budget_left(&state) {
            break;
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, state.epoch as u64, 0)));
        for batch in order.chunks(cfg.batch_size) {
            if !budget_left(&state) {
                break;
            }
            let mut sum: Option<Vec<Vec<f64>>> = None;
            let (mut total, mut main, mut miou, mut pa) = (0.0, 0.0, 0.0, 0.0);
            for &i in batch {
                let sample = if cfg.augment {
                    augment(&train[i], mix_seed(cfg.seed, state.step as u64 + 1, i as u64 + 1))
                } else {
                    train[i].clone()
                };
                let r = image_step(model, &sample, cfg)?;
                total += r.total;
                main += r.main;
                miou += metrics::miou(&r.prediction, &sample.mask)?.miou;
                pa += metrics::pixel_accuracy(&r.prediction, &sample.mask)?;
                match &mut sum {
                    None => sum = Some(r.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&r.grads) {
                            for (x, y) in a.iter_mut().zip(g) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let n = batch.len() as f64;
            let mut grads = sum.expect("batches are non-empty");
            for g in grads.iter_mut().flatten() {
                *g /= n;
            }
            adam_step(model.params_mut(), &mut state, &grads, cfg)?;
            history.push(HistoryEntry {
                step: state.step,
                loss: total / n,
                main_loss: main / n,
                miou: miou / n,
                pa: pa / n,
            });
            if !test.is_empty() && cfg.eval_every > 0 && state.step.is_multiple_of(cfg.eval_every) {
                run_eval(model, &mut state, &mut evals)?;
                last_eval = Some(state.step);
            }
        }
        state.epoch += 1;
    }

    if !history.entries.is_empty() {
        if test.is_empty() {
            if let Some(path) = &cfg.checkpoint_path {
                state.checkpoint(model).save(path)?;
            }
        } else if last_eval != Some(state.step) {
            run_eval(model, &mut state, &mut evals)?;
        }
    }
    Ok(FitOutcome {
        state,
        history,
        evals,
    })
}
