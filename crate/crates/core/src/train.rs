//! Cross-entropy objective, Adam, and the epoch loop.

use std::fmt;

use crate::autograd::{Graph, PROB_FLOOR};
use crate::error::{Error, Result};
use crate::model::{CaptionModel, PreparedSample};
use crate::tensor::{SeededRng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::Config("Adam betas must lie in (0, 1)".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("Adam eps must be positive".into()));
        }
        Ok(())
    }
}

/// `-(1/N) Σ_i log P[i, y_i]` over rows with a label; rows labelled `None`
/// are left out of both the sum and `N`. Probabilities are floored at
/// `1e-12`.
pub fn categorical_cross_entropy(probs: &Tensor, labels: &[Option<usize>]) -> Result<f64> {
    let g = Graph::new();
    let p = g.constant(probs.clone());
    Ok(p.cross_entropy(labels)?.value().item()?)
}

/// `-(1/N) Σ [y log ŷ + (1-y) log(1-ŷ)]`, with `ŷ` the predicted
/// probability of class 1.
pub fn binary_cross_entropy(predicted: &[f64], labels: &[bool]) -> f64 {
    let n = predicted.len() as f64;
    -predicted
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            if y {
                p.max(PROB_FLOOR).ln()
            } else {
                (1.0 - p).max(PROB_FLOOR).ln()
            }
        })
        .sum::<f64>()
        / n
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

/// One bias-corrected Adam update of `param` in place. `t` is the 1-based
/// step number.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, m: &mut Tensor, v: &mut Tensor, t: u64, cfg: &AdamConfig) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let (p, m, v) = (param.data_mut(), m.data_mut(), v.data_mut());
    for (((p, g), m), v) in p.iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Adam moments for every model parameter, in parameter visit order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(model: &CaptionModel) -> Self {
        let mut first = Vec::new();
        model.params.visit(&mut |_, t| first.push(Tensor::zeros(t.shape())));
        AdamState {
            step: 0,
            second: first.clone(),
            first,
        }
    }

    /// Applies one update with `grads` given in parameter visit order.
    pub fn apply(&mut self, model: &mut CaptionModel, grads: &[Tensor], cfg: &AdamConfig) -> Result<()> {
        let mut names = Vec::new();
        model.params.visit(&mut |n, _| names.push(n));
        if grads.len() != names.len() || self.first.len() != names.len() {
            return Err(Error::Numeric(format!(
                "gradient count {} does not match parameter count {}",
                grads.len(),
                names.len()
            )));
        }
        for (name, g) in names.iter().zip(grads) {
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for parameter {name}")));
            }
        }
        self.step += 1;
        let t = self.step;
        let mut i = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        model.params.visit_mut(&mut |_, p| {
            adam_step(p, &grads[i], &mut first[i], &mut second[i], t, cfg);
            i += 1;
        });
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub enum LogRecord {
    Batch { epoch: usize, batch: usize, loss: f64 },
    Epoch { epoch: usize, loss: f64, val_loss: f64 },
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LogRecord::Batch { epoch, batch, loss } => write!(f, "epoch={epoch} batch={batch} loss={loss}"),
            LogRecord::Epoch { epoch, loss, val_loss } => {
                write!(f, "epoch={epoch} loss={loss} val_loss={val_loss}")
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub best: CaptionModel,
    pub best_adam: AdamState,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Model after the last epoch.
    pub last: CaptionModel,
    pub log: Vec<LogRecord>,
}

/// Gradients of the batch loss in parameter visit order.
pub fn batch_gradients(model: &CaptionModel, batch: &[&PreparedSample]) -> Result<(f64, Vec<Tensor>)> {
    let graph = Graph::new();
    let p = model.bind(&graph);
    let loss = model.batch_loss(&p, batch)?;
    let value = loss.value().item()?;
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite batch loss".into()));
    }
    let grads = graph.backward(loss)?;
    let mut out = Vec::new();
    let mut missing = None;
    p.visit(&mut |name, v| match grads.get(*v) {
        Some(g) => out.push(g.clone()),
        None => missing = Some(name),
    });
    if let Some(name) = missing {
        return Err(Error::Numeric(format!("no gradient for parameter {name}")));
    }
    Ok((value, out))
}

/// Token-weighted mean cross-entropy of `model` over `samples`.
pub fn evaluate_loss(model: &CaptionModel, samples: &[PreparedSample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for sample in samples {
        let graph = Graph::new();
        let p = model.params.map(&mut |t| graph.constant(t.clone()));
        let (loss, n) = model.sample_loss(&p, sample)?;
        total += loss.value().item()? * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Input("cannot evaluate loss on an empty split".into()));
    }
    Ok(total / count as f64)
}

fn clip_gradients(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Trains `model` on `train_set` with Adam, evaluating `val_set` after each
/// epoch. Batch order comes from a [`SeededRng`] seeded with `cfg.seed`, so
/// identical inputs give bit-identical results. `on_record` sees every log
/// line as it is produced.
pub fn train(
    model: CaptionModel,
    train_set: &[PreparedSample],
    val_set: &[PreparedSample],
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Input("validation split is empty".into()));
    }
    let adam_cfg = AdamConfig::from(cfg);
    let batch_size = cfg.batch_size.min(train_set.len());
    let mut rng = SeededRng::new(cfg.seed);
    let mut model = model;
    let mut adam = AdamState::new(&model);
    let mut log = Vec::new();
    let mut best: Option<(CaptionModel, AdamState, usize, f64)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_total = 0.0;
        let mut epoch_tokens = 0usize;
        for (bi, chunk) in order.chunks(batch_size).enumerate() {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, mut grads) = batch_gradients(&model, &batch)?;
            if let Some(clip) = cfg.grad_clip {
                clip_gradients(&mut grads, clip);
            }
            adam.apply(&mut model, &grads, &adam_cfg)?;
            let tokens: usize = batch.iter().map(|s| s.caption.true_length - 1).sum();
            epoch_total += loss * tokens as f64;
            epoch_tokens += tokens;
            let rec = LogRecord::Batch {
                epoch,
                batch: bi,
                loss,
            };
            on_record(&rec);
            log.push(rec);
        }
        let val_loss = evaluate_loss(&model, val_set)?;
        let rec = LogRecord::Epoch {
            epoch,
            loss: epoch_total / epoch_tokens as f64,
            val_loss,
        };
        on_record(&rec);
        log.push(rec);
        if best.as_ref().is_none_or(|b| val_loss < b.3) {
            best = Some((model.clone(), adam.clone(), epoch, val_loss));
        }
    }

    let (best_model, best_adam, best_epoch, best_val_loss) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best: best_model,
        best_adam,
        best_epoch,
        best_val_loss,
        last: model,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_loss_is_log_classes() {
        let probs = Tensor::full(&[3, 4], 0.25);
        let loss = categorical_cross_entropy(&probs, &[Some(0), Some(3), Some(1)]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn one_hot_correct_loss_is_zero() {
        let probs = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(categorical_cross_entropy(&probs, &[Some(1), Some(0)]).unwrap(), 0.0);
    }

    #[test]
    fn zero_probability_is_floored() {
        let probs = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let loss = categorical_cross_entropy(&probs, &[Some(0)]).unwrap();
        assert!((loss - (-PROB_FLOOR.ln())).abs() < 1e-12);
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let cfg = AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut p = Tensor::vector(vec![1.0, -1.0, 0.5]).unwrap();
        let g = Tensor::vector(vec![0.3, -2.0, 1e-3]).unwrap();
        let mut m = Tensor::zeros(&[3]);
        let mut v = Tensor::zeros(&[3]);
        adam_step(&mut p, &g, &mut m, &mut v, 1, &cfg);
        let expected = [1.0 - 1e-3, -1.0 + 1e-3, 0.5 - 1e-3];
        for (a, b) in p.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let cfg = AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut p = Tensor::vector(vec![0.7, -0.2]).unwrap();
        let mut m = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let mut v = Tensor::vector(vec![0.0, 0.0]).unwrap();
        adam_step(&mut p, &Tensor::zeros(&[2]), &mut m, &mut v, 1, &cfg);
        assert_eq!(p.data(), &[0.7, -0.2]);

        let mut m = Tensor::vector(vec![1.0, -1.0]).unwrap();
        let mut v = Tensor::vector(vec![4.0, 4.0]).unwrap();
        let mut q = p.clone();
        adam_step(&mut q, &Tensor::zeros(&[2]), &mut m, &mut v, 3, &cfg);
        assert_eq!(m.data(), &[0.9, -0.9]);
        assert!((v.data()[0] - 4.0 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn adam_descends_a_parabola() {
        let cfg = AdamConfig {
            learning_rate: 5e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut x = Tensor::scalar(1.0);
        let mut m = Tensor::scalar(0.0);
        let mut v = Tensor::scalar(0.0);
        for t in 1..=200 {
            let g = x.scale(2.0);
            adam_step(&mut x, &g, &mut m, &mut v, t, &cfg);
        }
        assert!(x.data()[0].abs() < 1e-2, "x = {}", x.data()[0]);
    }

    #[test]
    fn log_records_are_key_value_lines() {
        let r = LogRecord::Batch {
            epoch: 1,
            batch: 0,
            loss: 0.5,
        };
        assert_eq!(r.to_string(), "epoch=1 batch=0 loss=0.5");
        let r = LogRecord::Epoch {
            epoch: 2,
            loss: 0.25,
            val_loss: 0.75,
        };
        assert_eq!(r.to_string(), "epoch=2 loss=0.25 val_loss=0.75");
    }
}
