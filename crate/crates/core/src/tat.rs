//! Targeted adversarial training and the unified trainer.
//!
//! The targeted variant keeps a running tally of which wrong label the model
//! predicts for each gold label, samples an attack target in proportion to
//! that error distribution, perturbs the input toward the target with
//! projected gradient descent, and regularizes the divergence between the
//! clean and perturbed posteriors. The same trainer also runs standard
//! training, the three smoothness regularizers, and untargeted adversarial
//! training, so trajectories are directly comparable under a fixed seed.

use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::MlpClassifier;
use crate::numcore::{self, Graph, Tensor};
use crate::regularizers::{
    self, jacobian_norm_node, pdm_term, vat_term, PerturbationConfig, RowWeighting,
};
use crate::streams::{stream, StreamId};

/// Running error distribution e(y, y_t): how often the model predicts y_t
/// when the gold label is y. Uniform-initialized; the per-epoch buffer is
/// folded into the active sampling weights at each epoch commit with Laplace
/// smoothing, so every row always has positive off-diagonal mass.
#[derive(Debug, Clone)]
pub struct ErrorTally {
    classes: usize,
    active: Vec<f64>,
    buffer: Vec<u64>,
    smoothing: f64,
    momentum: Option<f64>,
}

impl ErrorTally {
    pub fn uniform(classes: usize) -> Result<Self> {
        Self::with_smoothing(classes, 1.0)
    }

    pub fn with_smoothing(classes: usize, smoothing: f64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "error tally needs at least 2 classes, got {classes}"
            )));
        }
        if !smoothing.is_finite() || smoothing <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "tally smoothing must be > 0, got {smoothing}"
            )));
        }
        let mut active = vec![1.0; classes * classes];
        for i in 0..classes {
            active[i * classes + i] = 0.0;
        }
        Ok(ErrorTally {
            classes,
            active,
            buffer: vec![0; classes * classes],
            smoothing,
            momentum: None,
        })
    }

    /// Blend each commit into the previous active weights instead of
    /// replacing them: active ← μ·active + (1−μ)·fresh.
    pub fn with_momentum(mut self, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "tally momentum must be in [0, 1), got {momentum}"
            )));
        }
        self.momentum = Some(momentum);
        Ok(self)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Count one prediction. Correct predictions leave the buffer unchanged.
    pub fn record(&mut self, gold: usize, pred: usize) -> Result<()> {
        if gold >= self.classes {
            return Err(Error::InvalidClass {
                class: gold,
                classes: self.classes,
            });
        }
        if pred >= self.classes {
            return Err(Error::InvalidClass {
                class: pred,
                classes: self.classes,
            });
        }
        if gold != pred {
            self.buffer[gold * self.classes + pred] += 1;
        }
        Ok(())
    }

    /// Fold the epoch buffer into the active sampling weights (off-diagonal
    /// Laplace smoothing by λ) and zero the buffer. A row with no recorded
    /// errors becomes uniform.
    pub fn commit(&mut self) {
        let m = self.classes;
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                let fresh = self.buffer[i * m + j] as f64 + self.smoothing;
                self.active[i * m + j] = match self.momentum {
                    Some(mu) => mu * self.active[i * m + j] + (1.0 - mu) * fresh,
                    None => fresh,
                };
            }
        }
        self.buffer.fill(0);
    }

    /// Sample y_t ≠ gold in proportion to the active row weights.
    pub fn sample_target(&self, gold: usize, rng: &mut impl Rng) -> usize {
        let m = self.classes;
        debug_assert!(gold < m);
        let row = &self.active[gold * m..(gold + 1) * m];
        let total: f64 = numcore::sum(row);
        let mut u = rng.random_range(0.0..total);
        for (j, &w) in row.iter().enumerate() {
            if j == gold {
                continue;
            }
            if u < w {
                return j;
            }
            u -= w;
        }
        // Rounding pushed u past the last positive weight.
        (0..m)
            .rev()
            .find(|&j| j != gold && row[j] > 0.0)
            .expect("smoothed row has mass")
    }

    /// Normalized sampling distribution of a row (diagonal is zero).
    pub fn row_probabilities(&self, gold: usize) -> Vec<f64> {
        let m = self.classes;
        let row = &self.active[gold * m..(gold + 1) * m];
        let total: f64 = numcore::sum(row);
        row.iter().map(|&w| w / total).collect()
    }

    pub fn buffer(&self) -> &[u64] {
        &self.buffer
    }

    pub fn active(&self) -> &[f64] {
        &self.active
    }

    /// Total misclassifications recorded since the last commit.
    pub fn buffer_total(&self) -> u64 {
        self.buffer.iter().sum()
    }
}

/// Ten-bin quantizer for applying targeted attacks to regression outputs:
/// the value range maps onto class-like bins, and a bin maps back to a value
/// drawn uniformly within its sub-interval.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionBinner {
    lo: f64,
    hi: f64,
    bins: usize,
}

impl RegressionBinner {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(Error::InvalidArgument(format!(
                "need lo < hi, got [{lo}, {hi}]"
            )));
        }
        if bins < 2 {
            return Err(Error::InvalidArgument(format!("need ≥ 2 bins, got {bins}")));
        }
        Ok(RegressionBinner { lo, hi, bins })
    }

    pub fn ten(lo: f64, hi: f64) -> Result<Self> {
        Self::new(lo, hi, 10)
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Bin index of a value; out-of-range values clamp to the end bins, and
    /// the top boundary value lands in the top bin.
    pub fn quantize(&self, value: f64) -> usize {
        let t = ((value - self.lo) / (self.hi - self.lo) * self.bins as f64).floor();
        (t.max(0.0) as usize).min(self.bins - 1)
    }

    /// Uniform draw within a bin's sub-interval.
    pub fn sample_bin(&self, index: usize, rng: &mut impl Rng) -> f64 {
        debug_assert!(index < self.bins);
        let width = (self.hi - self.lo) / self.bins as f64;
        let start = self.lo + index as f64 * width;
        rng.random_range(start..start + width)
    }
}

/// Training objective selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Plain cross-entropy.
    Std,
    /// Cross-entropy + α·‖J‖²_F.
    Jr,
    /// Cross-entropy + α·(worst-case clean/perturbed KL).
    Vat,
    /// Cross-entropy + α·(mean clean/noisy KL).
    Pdm,
    /// Cross-entropy at the untargeted adversarial point.
    Adv,
    /// Cross-entropy + α·D(clean, targeted-adversarial posterior).
    Tat,
}

pub const METHOD_NAMES: &str = "std, jr, vat, pdm, adv, tat";

impl Method {
    pub fn all() -> [Method; 6] {
        [
            Method::Std,
            Method::Jr,
            Method::Vat,
            Method::Pdm,
            Method::Adv,
            Method::Tat,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Std => "std",
            Method::Jr => "jr",
            Method::Vat => "vat",
            Method::Pdm => "pdm",
            Method::Adv => "adv",
            Method::Tat => "tat",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "std" => Ok(Method::Std),
            "jr" => Ok(Method::Jr),
            "vat" => Ok(Method::Vat),
            "pdm" => Ok(Method::Pdm),
            "adv" => Ok(Method::Adv),
            "tat" => Ok(Method::Tat),
            other => Err(Error::UnknownMethod {
                got: other.into(),
                valid: METHOD_NAMES,
            }),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Divergence used between clean and targeted-adversarial posteriors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    /// KL(clean ‖ perturbed), gradients through both arguments.
    Kl,
    /// KL(clean ‖ perturbed) + KL(perturbed ‖ clean).
    SymmetricKl,
}

/// Which predictions feed the error tally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TallySource {
    /// Clean-input argmax on the training batches as they are processed.
    TrainBatch,
    /// Predictions over a held-out set, recorded at each epoch boundary
    /// (requires `Trainer::with_dev_set`).
    DevSet,
}

/// Per-run training hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    /// Weight α of the regularization term.
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global learning rate τ of plain minibatch SGD.
    pub learning_rate: f64,
    pub perturbation: PerturbationConfig,
    /// Divergence for the targeted objective.
    pub divergence: Divergence,
    /// Block gradient flow through the clean posterior in the targeted term.
    pub tat_detach_clean: bool,
    /// Laplace smoothing λ of the error tally.
    pub tally_smoothing: f64,
    /// Optional running-average tally commit (replacement when absent).
    pub tally_momentum: Option<f64>,
    pub tally_source: TallySource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Std,
            alpha: 1.0,
            epochs: 100,
            batch_size: 32,
            learning_rate: 0.1,
            perturbation: PerturbationConfig::default(),
            divergence: Divergence::Kl,
            tat_detach_clean: false,
            tally_smoothing: 1.0,
            tally_momentum: None,
            tally_source: TallySource::TrainBatch,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "alpha must be ≥ 0, got {}",
                self.alpha
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be ≥ 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be ≥ 0, got {}",
                self.learning_rate
            )));
        }
        if !self.tally_smoothing.is_finite() || self.tally_smoothing <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "tally_smoothing must be > 0, got {}",
                self.tally_smoothing
            )));
        }
        self.perturbation.validate()
    }
}

#[derive(Debug, Clone, Default)]
pub struct StepMetrics {
    /// Mean classification loss over the batch.
    pub loss: f64,
    /// Mean regularizer value over the batch.
    pub reg_value: f64,
    pub batch_size: usize,
    pub correct: usize,
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub reg_value: f64,
    pub train_accuracy: f64,
    pub wall_ms: u64,
}

/// Minibatch SGD driver holding the model, the error tally, and one named
/// rng stream per randomness consumer.
pub struct Trainer {
    model: MlpClassifier,
    cfg: TrainConfig,
    tally: ErrorTally,
    dev_set: Option<Vec<(Vec<f64>, usize)>>,
    data_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    adversary_rng: ChaCha8Rng,
    tally_rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: MlpClassifier, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut tally = ErrorTally::with_smoothing(model.class_count(), cfg.tally_smoothing)?;
        if let Some(mu) = cfg.tally_momentum {
            tally = tally.with_momentum(mu)?;
        }
        Ok(Trainer {
            model,
            cfg,
            tally,
            data_rng: stream(seed, StreamId::Data),
            noise_rng: stream(seed, StreamId::Noise),
            adversary_rng: stream(seed, StreamId::Adversary),
            tally_rng: stream(seed, StreamId::Tally),
            dev_set: None,
            epoch: 0,
        })
    }

    /// Supply the held-out set dev-set tallies are recorded from.
    pub fn with_dev_set(mut self, dev: Vec<(Vec<f64>, usize)>) -> Self {
        self.dev_set = Some(dev);
        self
    }

    pub fn model(&self) -> &MlpClassifier {
        &self.model
    }

    pub fn into_model(self) -> MlpClassifier {
        self.model
    }

    pub fn tally(&self) -> &ErrorTally {
        &self.tally
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One SGD step on a batch: accumulate per-example gradients of
    /// L(f(x), y) + α·R, average, and apply θ ← θ − τ·ḡ.
    pub fn train_step(&mut self, batch: &[(Vec<f64>, usize)]) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("batch must be nonempty".into()));
        }
        let mut grad_acc = vec![0.0; self.model.param_count()];
        let mut metrics = StepMetrics {
            batch_size: batch.len(),
            ..Default::default()
        };
        for (index, (x, y)) in batch.iter().enumerate() {
            if *y >= self.model.class_count() {
                return Err(Error::InvalidClass {
                    class: *y,
                    classes: self.model.class_count(),
                });
            }
            let example = self.example_gradient(x, *y)?;
            if example.grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    example_index: index,
                });
            }
            for (acc, g) in grad_acc.iter_mut().zip(example.grad.iter()) {
                *acc += g;
            }
            metrics.loss += example.loss;
            metrics.reg_value += example.reg;
            if example.clean_prediction == *y {
                metrics.correct += 1;
            }
            if self.cfg.method == Method::Tat && self.cfg.tally_source == TallySource::TrainBatch {
                self.tally.record(*y, example.clean_prediction)?;
            }
        }
        let scale = self.cfg.learning_rate / batch.len() as f64;
        let mut theta = self.model.params_flat();
        for (t, g) in theta.iter_mut().zip(grad_acc.iter()) {
            *t -= scale * g;
        }
        self.model.set_params_flat(&theta)?;
        metrics.loss /= batch.len() as f64;
        metrics.reg_value /= batch.len() as f64;
        Ok(metrics)
    }

    /// One pass over the data in a freshly shuffled order; commits the error
    /// tally at the epoch boundary for targeted training.
    pub fn run_epoch(&mut self, data: &[(Vec<f64>, usize)]) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::InvalidArgument(
                "training set must be nonempty".into(),
            ));
        }
        let start = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        // Fisher-Yates on the data stream.
        for i in (1..order.len()).rev() {
            let j = self.data_rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut loss = 0.0;
        let mut reg = 0.0;
        let mut correct = 0;
        let mut seen = 0;
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        for &idx in &order {
            batch.push(data[idx].clone());
            if batch.len() == self.cfg.batch_size {
                let m = self.train_step(&batch)?;
                loss += m.loss * m.batch_size as f64;
                reg += m.reg_value * m.batch_size as f64;
                correct += m.correct;
                seen += m.batch_size;
                batch.clear();
            }
        }
        if !batch.is_empty() {
            let m = self.train_step(&batch)?;
            loss += m.loss * m.batch_size as f64;
            reg += m.reg_value * m.batch_size as f64;
            correct += m.correct;
            seen += m.batch_size;
        }
        if self.cfg.method == Method::Tat {
            if self.cfg.tally_source == TallySource::DevSet {
                let dev = self.dev_set.take().ok_or_else(|| {
                    Error::InvalidArgument(
                        "tally_source = dev_set requires Trainer::with_dev_set".into(),
                    )
                })?;
                for (x, y) in &dev {
                    let pred = self.model.predict(x)?;
                    self.tally.record(*y, pred)?;
                }
                self.dev_set = Some(dev);
            }
            self.tally.commit();
        }
        self.epoch += 1;
        Ok(EpochStats {
            epoch: self.epoch,
            train_loss: loss / seen as f64,
            reg_value: reg / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            wall_ms: start.elapsed().as_millis() as u64,
        })
    }

    fn example_gradient(&mut self, x: &[f64], y: usize) -> Result<ExampleGradient> {
        let alpha = self.cfg.alpha;
        let mut g = Graph::new();
        let binding = self.model.bind(&mut g, true);
        match self.cfg.method {
            Method::Std => {
                let xn = g.constant(Tensor::vector(x.to_vec())?);
                let p = self.model.forward_bound(&mut g, &binding, xn)?;
                let ce = g.cross_entropy(p, y)?;
                g.backward(ce)?;
                Ok(ExampleGradient {
                    grad: binding.theta_grad(&g),
                    loss: g.value(ce).as_scalar()?,
                    reg: 0.0,
                    clean_prediction: numcore::argmax(g.value(p).values()),
                })
            }
            Method::Jr => {
                let xn = g.input(Tensor::vector(x.to_vec())?);
                let p = self.model.forward_bound(&mut g, &binding, xn)?;
                let ce = g.cross_entropy(p, y)?;
                let pred = numcore::argmax(g.value(p).values());
                let r = jacobian_norm_node(
                    &self.model,
                    &mut g,
                    &binding,
                    xn,
                    p,
                    RowWeighting::Uniform,
                )?;
                let reg = g.value(r).as_scalar()?;
                let total = if alpha == 0.0 {
                    ce
                } else {
                    let scaled = g.scale(r, alpha)?;
                    g.add(ce, scaled)?
                };
                g.double_backward(total)?;
                Ok(ExampleGradient {
                    grad: binding.theta_grad(&g),
                    loss: g.value(ce).as_scalar()?,
                    reg,
                    clean_prediction: pred,
                })
            }
            Method::Vat => {
                let term = vat_term(
                    &self.model,
                    &mut g,
                    &binding,
                    x,
                    &self.cfg.perturbation,
                    &mut self.adversary_rng,
                )?;
                let ce = g.cross_entropy(term.p_clean, y)?;
                let total = if alpha == 0.0 {
                    ce
                } else {
                    let scaled = g.scale(term.r, alpha)?;
                    g.add(ce, scaled)?
                };
                g.backward(total)?;
                Ok(ExampleGradient {
                    grad: binding.theta_grad(&g),
                    loss: g.value(ce).as_scalar()?,
                    reg: g.value(term.r).as_scalar()?,
                    clean_prediction: numcore::argmax(g.value(term.p_clean).values()),
                })
            }
            Method::Pdm => {
                let term = pdm_term(
                    &self.model,
                    &mut g,
                    &binding,
                    x,
                    &self.cfg.perturbation,
                    &mut self.noise_rng,
                )?;
                let ce = g.cross_entropy(term.p_clean, y)?;
                let total = if alpha == 0.0 {
                    ce
                } else {
                    let scaled = g.scale(term.r, alpha)?;
                    g.add(ce, scaled)?
                };
                g.backward(total)?;
                Ok(ExampleGradient {
                    grad: binding.theta_grad(&g),
                    loss: g.value(ce).as_scalar()?,
                    reg: g.value(term.r).as_scalar()?,
                    clean_prediction: numcore::argmax(g.value(term.p_clean).values()),
                })
            }
            Method::Adv => {
                let delta = regularizers::untargeted_pgd(
                    &self.model,
                    x,
                    y,
                    &self.cfg.perturbation,
                    &mut self.adversary_rng,
                )?;
                let x_adv: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, d)| a + d).collect();
                let xn = g.constant(Tensor::vector(x_adv)?);
                let p_adv = self.model.forward_bound(&mut g, &binding, xn)?;
                let ce = g.cross_entropy(p_adv, y)?;
                g.backward(ce)?;
                Ok(ExampleGradient {
                    grad: binding.theta_grad(&g),
                    loss: g.value(ce).as_scalar()?,
                    reg: 0.0,
                    clean_prediction: self.model.predict(x)?,
                })
            }
            Method::Tat => {
                let target = self.tally.sample_target(y, &mut self.tally_rng);
                let delta = regularizers::targeted_pgd(
                    &self.model,
                    x,
                    target,
                    &self.cfg.perturbation,
                    &mut self.adversary_rng,
                )?;
                let xn = g.constant(Tensor::vector(x.to_vec())?);
                let p_clean = self.model.forward_bound(&mut g, &binding, xn)?;
                let ce = g.cross_entropy(p_clean, y)?;
                let pred = numcore::argmax(g.value(p_clean).values());
                let x_adv: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, d)| a + d).collect();
                let xa = g.constant(Tensor::vector(x_adv)?);
                let p_adv = self.model.forward_bound(&mut g, &binding, xa)?;
                let p_ref = if self.cfg.tat_detach_clean {
                    g.detach(p_clean)
                } else {
                    p_clean
                };
                let div = match self.cfg.divergence {
                    Divergence::Kl => g.kl(p_ref, p_adv)?,
                    Divergence::SymmetricKl => {
                        let fwd = g.kl(p_ref, p_adv)?;
                        let rev = g.kl(p_adv, p_ref)?;
                        g.add(fwd, rev)?
                    }
                };
                let reg = g.value(div).as_scalar()?;
                let total = if alpha == 0.0 {
                    ce
                } else {
                    let scaled = g.scale(div, alpha)?;
                    g.add(ce, scaled)?
                };
                g.backward(total)?;
                Ok(ExampleGradient {
                    grad: binding.theta_grad(&g),
                    loss: g.value(ce).as_scalar()?,
                    reg,
                    clean_prediction: pred,
                })
            }
        }
    }
}

struct ExampleGradient {
    grad: Vec<f64>,
    loss: f64,
    reg: f64,
    clean_prediction: usize,
}

/// Run T epochs of minibatch SGD; `on_epoch` observes the model after each
/// epoch. Deterministic under a fixed seed.
pub fn train(
    model: MlpClassifier,
    data: &[(Vec<f64>, usize)],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&Trainer, &EpochStats),
) -> Result<(MlpClassifier, Vec<EpochStats>)> {
    let mut trainer = Trainer::new(model, cfg.clone(), seed)?;
    let mut stats = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let s = trainer.run_epoch(data)?;
        on_epoch(&trainer, &s);
        stats.push(s);
    }
    Ok((trainer.into_model(), stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::StandardNormal;

    fn random_model(dims: &[usize], seed: u64) -> MlpClassifier {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MlpClassifier::new(dims, &mut rng).unwrap()
    }

    /// Two Gaussian blobs at (±1, 0).
    fn blobs(n: usize, sigma: f64, seed: u64) -> Vec<(Vec<f64>, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let class = i % 2;
                let cx = if class == 0 { -1.0 } else { 1.0 };
                let x = vec![
                    cx + sigma * rng.sample::<f64, _>(StandardNormal),
                    sigma * rng.sample::<f64, _>(StandardNormal),
                ];
                (x, class)
            })
            .collect()
    }

    #[test]
    fn tally_uniform_rows() {
        let t = ErrorTally::uniform(3).unwrap();
        assert_eq!(t.row_probabilities(0), vec![0.0, 0.5, 0.5]);
        assert_eq!(t.row_probabilities(1), vec![0.5, 0.0, 0.5]);
        assert!(ErrorTally::uniform(1).is_err());
    }

    #[test]
    fn tally_two_classes_forces_the_other_label() {
        let t = ErrorTally::uniform(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(t.sample_target(0, &mut rng), 1);
            assert_eq!(t.sample_target(1, &mut rng), 0);
        }
    }

    #[test]
    fn tally_fresh_sampling_is_uniform() {
        let t = ErrorTally::uniform(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            counts[t.sample_target(0, &mut rng)] += 1;
        }
        assert_eq!(counts[0], 0);
        for &c in &counts[1..] {
            let freq = c as f64 / draws as f64;
            assert!((freq - 1.0 / 3.0).abs() <= 0.02, "freq {freq}");
        }
    }

    #[test]
    fn tally_record_bookkeeping() {
        let mut t = ErrorTally::uniform(3).unwrap();
        t.record(0, 0).unwrap();
        assert_eq!(t.buffer_total(), 0);
        t.record(0, 1).unwrap();
        t.record(0, 1).unwrap();
        t.record(2, 0).unwrap();
        assert_eq!(t.buffer()[1], 2);
        assert_eq!(t.buffer_total(), 3);
        let row0: u64 = t.buffer()[0..3].iter().sum();
        assert_eq!(row0, 2);
        assert!(t.record(5, 0).is_err());
    }

    #[test]
    fn tally_commit_proportional_sampling() {
        // Buffer row e(0,·) = [–, 2, 6] with λ = 1 → probabilities 3/10, 7/10.
        let mut t = ErrorTally::uniform(3).unwrap();
        for _ in 0..2 {
            t.record(0, 1).unwrap();
        }
        for _ in 0..6 {
            t.record(0, 2).unwrap();
        }
        t.commit();
        assert_eq!(t.row_probabilities(0), vec![0.0, 0.3, 0.7]);
        assert_eq!(t.buffer_total(), 0);
        // Rows without errors become uniform again.
        assert_eq!(t.row_probabilities(1), vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn tally_commit_is_deterministic() {
        let build = || {
            let mut t = ErrorTally::uniform(3).unwrap();
            t.record(1, 0).unwrap();
            t.record(1, 2).unwrap();
            t.record(1, 2).unwrap();
            t.commit();
            t.active().to_vec()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn tally_sampling_matches_committed_weights() {
        // Active row weights [–, 3, 1] → sampling frequencies 0.75 / 0.25.
        let mut t = ErrorTally::uniform(3).unwrap();
        for _ in 0..2 {
            t.record(0, 1).unwrap();
        }
        t.commit();
        assert_eq!(t.row_probabilities(0), vec![0.0, 0.75, 0.25]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 100_000;
        let mut n1 = 0;
        for _ in 0..draws {
            let y_t = t.sample_target(0, &mut rng);
            assert_ne!(y_t, 0);
            if y_t == 1 {
                n1 += 1;
            }
        }
        let freq = n1 as f64 / draws as f64;
        assert!((freq - 0.75).abs() <= 0.01, "freq {freq}");
    }

    #[test]
    fn tally_target_never_equals_gold() {
        let mut t = ErrorTally::uniform(4).unwrap();
        t.record(2, 0).unwrap();
        t.commit();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1_000_000 {
            assert_ne!(t.sample_target(2, &mut rng), 2);
        }
    }

    #[test]
    fn binner_quantization() {
        let b = RegressionBinner::ten(0.0, 5.0).unwrap();
        assert_eq!(b.quantize(2.4), 4);
        assert_eq!(b.quantize(5.0), 9);
        assert_eq!(b.quantize(-3.0), 0);
        assert_eq!(b.quantize(99.0), 9);
        assert!(RegressionBinner::new(1.0, 1.0, 10).is_err());
        assert!(RegressionBinner::new(0.0, 1.0, 1).is_err());
    }

    #[test]
    fn binner_sampling_stays_in_bin() {
        let b = RegressionBinner::ten(0.0, 5.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = 10_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let v = b.sample_bin(4, &mut rng);
            assert!((2.0..2.5).contains(&v));
            acc += v;
        }
        let mean = acc / draws as f64;
        assert!((mean - 2.25).abs() <= 0.01, "mean {mean}");
    }

    #[test]
    fn method_parsing() {
        assert_eq!("tat".parse::<Method>().unwrap(), Method::Tat);
        let err = "sgd".parse::<Method>().unwrap_err();
        let text = err.to_string();
        assert!(
            text.contains("sgd") && text.contains("std") && text.contains("tat"),
            "{text}"
        );
    }

    #[test]
    fn train_step_rejects_out_of_range_labels() {
        let model = random_model(&[2, 3, 2], 70);
        let cfg = TrainConfig {
            method: Method::Tat,
            ..Default::default()
        };
        let mut trainer = Trainer::new(model, cfg, 1).unwrap();
        let err = trainer.train_step(&[(vec![0.1, 0.2], 5)]).unwrap_err();
        assert!(matches!(
            err,
            Error::InvalidClass {
                class: 5,
                classes: 2
            }
        ));
    }

    #[test]
    fn tat_with_zero_alpha_steps_like_std() {
        let data = blobs(16, 0.4, 1);
        let model = random_model(&[2, 4, 2], 2);
        let step_with = |method: Method| {
            let cfg = TrainConfig {
                method,
                alpha: 0.0,
                ..Default::default()
            };
            let mut tr = Trainer::new(model.clone(), cfg, 7).unwrap();
            tr.train_step(&data).unwrap();
            tr.model().params_flat()
        };
        let std_params = step_with(Method::Std);
        let tat_params = step_with(Method::Tat);
        for (a, b) in std_params.iter().zip(tat_params.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn tat_step_matches_hand_trace() {
        // Single example, K = 1, σ = 0, m = 2 (target forced), linear model:
        // every quantity in the update has a closed form.
        let w = [0.6, -0.4, -0.2, 0.8];
        let b = [0.1, -0.1];
        let model = MlpClassifier::from_params(&[2, 2], &{
            let mut flat = w.to_vec();
            flat.extend_from_slice(&b);
            flat
        })
        .unwrap();
        let x = [0.7, -0.3];
        let y = 0usize;
        let tau = 0.05;
        let alpha = 0.8;
        let eta = 0.01;
        let eps = 0.5;
        let cfg = TrainConfig {
            method: Method::Tat,
            alpha,
            learning_rate: tau,
            perturbation: PerturbationConfig {
                step_size: eta,
                linf_bound: eps,
                init_sigma: 0.0,
                inner_steps: 1,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut trainer = Trainer::new(model.clone(), cfg, 3).unwrap();
        trainer.train_step(&[(x.to_vec(), y)]).unwrap();
        let got = trainer.model().params_flat();

        // Hand trace. Forward: p = softmax(Wx + b).
        let softmax2 = |z: [f64; 2]| {
            let m = z[0].max(z[1]);
            let e = [(z[0] - m).exp(), (z[1] - m).exp()];
            let s = e[0] + e[1];
            [e[0] / s, e[1] / s]
        };
        let matvec2 = |w: &[f64], v: [f64; 2]| {
            [
                w[0] * v[0] + w[1] * v[1] + b[0],
                w[2] * v[0] + w[3] * v[1] + b[1],
            ]
        };
        let p = softmax2(matvec2(&w, x));
        // y_t = 1 (only wrong label). δ = Π(−η·Wᵀ(p − e₁)).
        let residual_t = [p[0] - 0.0, p[1] - 1.0];
        let grad_x = [
            w[0] * residual_t[0] + w[2] * residual_t[1],
            w[1] * residual_t[0] + w[3] * residual_t[1],
        ];
        let delta = [
            (-eta * grad_x[0]).clamp(-eps, eps),
            (-eta * grad_x[1]).clamp(-eps, eps),
        ];
        let xa = [x[0] + delta[0], x[1] + delta[1]];
        let q = softmax2(matvec2(&w, xa));
        // ∂CE/∂z_p = p − e_y; ∂KL(p‖q)/∂z_p = p⊙u − p(uᵀp) with u = ln(p/q)+1;
        // ∂KL(p‖q)/∂z_q = q − p.
        let ce_z = [p[0] - 1.0, p[1]];
        let u = [(p[0] / q[0]).ln() + 1.0, (p[1] / q[1]).ln() + 1.0];
        let udotp = u[0] * p[0] + u[1] * p[1];
        let kl_zp = [p[0] * (u[0] - udotp), p[1] * (u[1] - udotp)];
        let kl_zq = [q[0] - p[0], q[1] - p[1]];
        let mut grad_w = [0.0; 4];
        let mut grad_b = [0.0; 2];
        for i in 0..2 {
            let gz = ce_z[i] + alpha * kl_zp[i];
            let gzq = alpha * kl_zq[i];
            grad_w[i * 2] += gz * x[0] + gzq * xa[0];
            grad_w[i * 2 + 1] += gz * x[1] + gzq * xa[1];
            grad_b[i] += gz + gzq;
        }
        let mut expect = Vec::new();
        for (i, wi) in w.iter().enumerate() {
            expect.push(wi - tau * grad_w[i]);
        }
        for (i, bi) in b.iter().enumerate() {
            expect.push(bi - tau * grad_b[i]);
        }
        for (g, e) in got.iter().zip(expect.iter()) {
            assert!((g - e).abs() <= 1e-10, "got {g}, expected {e}");
        }
    }

    #[test]
    fn tat_update_direction_converges_to_combined_gradient_as_step_vanishes() {
        // K=1, σ=0: as η → 0 the perturbation collapses to δ = 0, where the
        // divergence term's θ-gradient vanishes, so the update direction
        // converges to the plain cross-entropy gradient (closed form for a
        // linear model: (p − e_y) ⊗ x on weights, p − e_y on biases).
        let w = [0.5, -0.2, -0.7, 0.9];
        let b = [0.0, 0.1];
        let flat: Vec<f64> = w.iter().chain(b.iter()).copied().collect();
        let x = [0.6, -0.4];
        let y = 0usize;
        let tau = 0.1;

        let p = {
            let model = MlpClassifier::from_params(&[2, 2], &flat).unwrap();
            model.forward(&x).unwrap()
        };
        let residual = [p[0] - 1.0, p[1]];
        let ce_grad = [
            residual[0] * x[0],
            residual[0] * x[1],
            residual[1] * x[0],
            residual[1] * x[1],
            residual[0],
            residual[1],
        ];

        let update_dir = |eta: f64| -> Vec<f64> {
            let model = MlpClassifier::from_params(&[2, 2], &flat).unwrap();
            let cfg = TrainConfig {
                method: Method::Tat,
                alpha: 1.0,
                learning_rate: tau,
                perturbation: PerturbationConfig {
                    step_size: eta,
                    linf_bound: 1.0,
                    init_sigma: 0.0,
                    inner_steps: 1,
                    ..Default::default()
                },
                ..Default::default()
            };
            let mut trainer = Trainer::new(model, cfg, 1).unwrap();
            trainer.train_step(&[(x.to_vec(), y)]).unwrap();
            let after = trainer.model().params_flat();
            flat.iter()
                .zip(after.iter())
                .map(|(a, b)| (a - b) / tau)
                .collect()
        };

        let err_at = |eta: f64| {
            let dir = update_dir(eta);
            dir.iter()
                .zip(ce_grad.iter())
                .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
        };
        let errs = [err_at(1e-2), err_at(1e-4), err_at(1e-6)];
        assert!(
            errs[0] > errs[1] && errs[1] > errs[2],
            "errors not decreasing: {errs:?}"
        );
        assert!(errs[2] <= 1e-7, "residual at η=1e-6: {}", errs[2]);
    }

    #[test]
    fn dev_set_tally_records_held_out_predictions() {
        // Zero weights: the posterior is uniform, so argmax is class 0
        // everywhere. With τ = 0 the model never changes, so dev-set errors
        // are exactly predictable.
        let model = MlpClassifier::from_params(&[2, 3], &[0.0; 9]).unwrap();
        let cfg = TrainConfig {
            method: Method::Tat,
            learning_rate: 0.0,
            batch_size: 4,
            tally_source: TallySource::DevSet,
            perturbation: PerturbationConfig {
                step_size: 0.01,
                init_sigma: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let train: Vec<(Vec<f64>, usize)> =
            (0..8).map(|i| (vec![0.1 * i as f64, 0.2], 2)).collect();
        let dev: Vec<(Vec<f64>, usize)> = vec![
            (vec![1.0, 0.0], 1),
            (vec![0.5, 0.5], 1),
            (vec![0.0, 1.0], 1),
            (vec![0.3, 0.3], 1),
            (vec![0.9, 0.1], 2),
        ];
        let mut trainer = Trainer::new(model.clone(), cfg.clone(), 5)
            .unwrap()
            .with_dev_set(dev);
        trainer.run_epoch(&train).unwrap();
        // Dev errors: 1→0 four times, 2→0 once; train-batch errors (2→0,
        // eight of them) must NOT be recorded. With λ=1: row 1 weights
        // [5, –, 1]; row 2 weights [2, 1, –].
        assert_eq!(
            trainer.tally().row_probabilities(1),
            vec![5.0 / 6.0, 0.0, 1.0 / 6.0]
        );
        assert_eq!(
            trainer.tally().row_probabilities(2),
            vec![2.0 / 3.0, 1.0 / 3.0, 0.0]
        );

        // Without a dev set the mode is an error.
        let mut bare = Trainer::new(model, cfg, 5).unwrap();
        assert!(bare.run_epoch(&train).is_err());
    }

    #[test]
    fn tat_training_reduces_loss_on_separable_blobs() {
        let data = blobs(64, 0.3, 9);
        let model = random_model(&[2, 6, 2], 10);
        let cfg = TrainConfig {
            method: Method::Tat,
            alpha: 1.0,
            batch_size: 16,
            perturbation: PerturbationConfig {
                step_size: 0.1,
                linf_bound: 0.2,
                init_sigma: 0.01,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut trainer = Trainer::new(model, cfg, 19).unwrap();
        let initial = trainer.train_step(&data).unwrap().loss;
        for _ in 0..99 {
            trainer.train_step(&data).unwrap();
        }
        let mean_loss: f64 = {
            let m = trainer.model();
            data.iter()
                .map(|(x, y)| numcore::cross_entropy(&m.forward(x).unwrap(), *y).unwrap())
                .sum::<f64>()
                / data.len() as f64
        };
        assert!(mean_loss < initial, "loss went {initial} → {mean_loss}");
    }

    #[test]
    fn std_training_fits_easy_blobs() {
        let data = blobs(200, 0.3, 21);
        let model = random_model(&[2, 8, 2], 22);
        let cfg = TrainConfig {
            method: Method::Std,
            epochs: 200,
            batch_size: 32,
            learning_rate: 0.1,
            ..Default::default()
        };
        let (trained, stats) = train(model, &data, &cfg, 23, |_, _| {}).unwrap();
        let acc = stats.last().unwrap().train_accuracy;
        assert!(acc >= 0.95, "train accuracy {acc}");
        let correct = data
            .iter()
            .filter(|(x, y)| trained.predict(x).unwrap() == *y)
            .count();
        assert!(correct as f64 / data.len() as f64 >= 0.95);
    }

    #[test]
    fn pdm_with_zero_noise_matches_std_trajectory() {
        let data = blobs(48, 0.4, 31);
        let model = random_model(&[2, 5, 2], 32);
        let run = |method: Method, noise: f64| {
            let cfg = TrainConfig {
                method,
                alpha: 1.0,
                epochs: 5,
                batch_size: 16,
                perturbation: PerturbationConfig {
                    noise_scale: noise,
                    ..Default::default()
                },
                ..Default::default()
            };
            let (m, _) = train(model.clone(), &data, &cfg, 33, |_, _| {}).unwrap();
            m.params_flat()
        };
        let std_params = run(Method::Std, 0.0);
        let pdm_params = run(Method::Pdm, 0.0);
        for (a, b) in std_params.iter().zip(pdm_params.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn tat_with_zero_alpha_matches_std_trajectory() {
        let data = blobs(48, 0.4, 41);
        let model = random_model(&[2, 5, 2], 42);
        let run = |method: Method| {
            let cfg = TrainConfig {
                method,
                alpha: 0.0,
                epochs: 4,
                batch_size: 16,
                ..Default::default()
            };
            let (m, _) = train(model.clone(), &data, &cfg, 43, |_, _| {}).unwrap();
            m.params_flat()
        };
        let std_params = run(Method::Std);
        let tat_params = run(Method::Tat);
        for (a, b) in std_params.iter().zip(tat_params.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let data = blobs(40, 0.5, 51);
        let model = random_model(&[2, 4, 2], 52);
        let run = || {
            let cfg = TrainConfig {
                method: Method::Tat,
                epochs: 3,
                batch_size: 8,
                perturbation: PerturbationConfig {
                    step_size: 0.05,
                    linf_bound: 0.2,
                    init_sigma: 0.01,
                    ..Default::default()
                },
                ..Default::default()
            };
            let (m, stats) = train(model.clone(), &data, &cfg, 53, |_, _| {}).unwrap();
            let bits: Vec<u64> = m.params_flat().iter().map(|v| v.to_bits()).collect();
            let losses: Vec<u64> = stats.iter().map(|s| s.train_loss.to_bits()).collect();
            (bits, losses)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn tat_runs_with_published_hyperparameters() {
        // ε = 1e−5, η = 1e−4, α = 1, K = 1.
        let data = blobs(32, 0.4, 61);
        let model = random_model(&[2, 4, 2], 62);
        let cfg = TrainConfig {
            method: Method::Tat,
            alpha: 1.0,
            epochs: 2,
            batch_size: 8,
            perturbation: PerturbationConfig {
                linf_bound: 1e-5,
                step_size: 1e-4,
                inner_steps: 1,
                ..Default::default()
            },
            ..Default::default()
        };
        let (_, stats) = train(model, &data, &cfg, 63, |_, _| {}).unwrap();
        assert_eq!(stats.len(), 2);
        assert!(stats.iter().all(|s| s.train_loss.is_finite()));
    }
}
