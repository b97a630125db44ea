//! Margin loss with curriculum class weighting, Adam, augmentation and the
//! epoch loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Function, NormMode, Tape, Var};
use crate::data::Sample;
use crate::error::{invalid, Error, Result};
use crate::model::{Network, Param};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda_plus: f64,
    pub lambda_minus: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda_plus: 1.0,
            lambda_minus: 0.05,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.m_minus && self.m_minus < self.m_plus && self.m_plus <= 1.0) {
            return Err(Error::Config(format!(
                "margins must satisfy 0 <= m_minus < m_plus <= 1, got {} and {}",
                self.m_minus, self.m_plus
            )));
        }
        if !(self.lambda_plus > 0.0 && self.lambda_minus > 0.0) {
            return Err(Error::Config("lambdas must be positive".into()));
        }
        Ok(())
    }

    fn term_grad(&self, score: f64, positive: bool) -> (f64, f64) {
        if positive {
            let gap = (self.m_plus - score).max(0.0);
            (self.lambda_plus * gap * gap, -2.0 * self.lambda_plus * gap)
        } else {
            let gap = (score - self.m_minus).max(0.0);
            (self.lambda_minus * gap * gap, 2.0 * self.lambda_minus * gap)
        }
    }
}

fn check_loss_shapes(scores: &Tensor, labels: &Tensor) -> Result<(usize, usize)> {
    match scores.dims() {
        &[n, c] if labels.dims() == scores.dims() && n > 0 => Ok((n, c)),
        _ => Err(Error::ShapeMismatch {
            op: "margin_loss",
            lhs: scores.dims().to_vec(),
            rhs: labels.dims().to_vec(),
        }),
    }
}

/// Batch-mean of `sum_c l+ T max(0, m+ - s)^2 + l- (1 - T) max(0, s - m-)^2`.
pub fn margin_loss(scores: &Tensor, labels: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let (n, _) = check_loss_shapes(scores, labels)?;
    let total: f64 = scores
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&s, &t)| cfg.term_grad(s, t > 0.5).0)
        .sum();
    Ok(total / n as f64)
}

struct MarginLossFn {
    grad: Vec<f64>,
}

impl Function for MarginLossFn {
    fn name(&self) -> &'static str {
        "margin_loss"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(self.grad.iter().map(|g| g * grad_out[0]).collect())]
    }
}

impl Tape {
    /// Records [`margin_loss`] of `scores` against constant binary `labels`.
    pub fn margin_loss(&mut self, scores: Var, labels: &Tensor, cfg: &LossConfig) -> Result<Var> {
        let s = self.value(scores);
        let (n, _) = check_loss_shapes(s, labels)?;
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(s.numel());
        for (&sc, &t) in s.data().iter().zip(labels.data()) {
            let (l, g) = cfg.term_grad(sc, t > 0.5);
            total += l;
            grad.push(g / n as f64);
        }
        Ok(self.record(
            Tensor::scalar(total / n as f64),
            vec![scores],
            Box::new(MarginLossFn { grad }),
        ))
    }
}

/// Label-slot counts driving the class-balanced phase of the curriculum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurriculumSchedule {
    pub switch_epoch: usize,
    pub positives: usize,
    pub negatives: usize,
}

impl CurriculumSchedule {
    /// Counts positive and negative label slots over all classes jointly.
    pub fn from_samples(samples: &[Sample], n_classes: usize, switch_epoch: usize) -> Self {
        let positives: usize = samples.iter().map(|s| s.labels.len()).sum();
        Self {
            switch_epoch,
            positives,
            negatives: samples.len() * n_classes - positives,
        }
    }
}

/// `(1, 0.05)` before the switch epoch, then `(|N|, |P|) / (|P| + |N|)`.
pub fn curriculum_lambdas(epoch: usize, sched: &CurriculumSchedule) -> Result<(f64, f64)> {
    let total = sched.positives + sched.negatives;
    if total == 0 {
        return Err(invalid("curriculum needs at least one label slot"));
    }
    if epoch < sched.switch_epoch {
        return Ok((1.0, 0.05));
    }
    let t = total as f64;
    Ok((sched.negatives as f64 / t, sched.positives as f64 / t))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Param]) -> Self {
        Self {
            config,
            m: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            t: 0,
        }
    }
}

/// Bias-corrected Adam update of every parameter.
pub fn adam_step(params: &mut [Param], grads: &[Vec<f64>], state: &mut AdamState) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(invalid(format!(
            "adam_step got {} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if g.len() != p.value.numel() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.value.dims().to_vec(),
                rhs: vec![g.len()],
            });
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient {} at {}[{i}] (step {})",
                g[i], p.name, state.t
            )));
        }
    }
    state.t += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (k, w) in p.value.data_mut().iter_mut().enumerate() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Per-image standardization to zero mean and unit variance; images with
/// standard deviation below 1e-6 are only centered.
pub fn standardize(image: &[f64]) -> Vec<f64> {
    let n = image.len() as f64;
    let mean = image.iter().sum::<f64>() / n;
    let var = image.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    let scale = if sd < 1e-6 { 1.0 } else { sd };
    image.iter().map(|v| (v - mean) / scale).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            brightness: (-0.2, 0.2),
            contrast: (0.8, 1.25),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("flip probability must lie in [0, 1]".into()));
        }
        if self.brightness.0 > self.brightness.1 || self.contrast.0 > self.contrast.1 || self.contrast.0 < 0.0 {
            return Err(Error::Config("augmentation ranges must be ordered".into()));
        }
        Ok(())
    }
}

/// Optional horizontal flip, then `(x - mean) * contrast + mean + delta`,
/// clamped to [0, 1].
pub fn adjust_image(image: &[f64], width: usize, flip: bool, delta: f64, contrast: f64) -> Vec<f64> {
    let mut out = image.to_vec();
    if flip {
        for row in out.chunks_mut(width) {
            row.reverse();
        }
    }
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    for v in &mut out {
        *v = ((*v - mean) * contrast + mean + delta).clamp(0.0, 1.0);
    }
    out
}

/// Draws flip, brightness and contrast from `cfg` and applies them.
pub fn augment<R: Rng + ?Sized>(image: &[f64], width: usize, cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    let flip = rng.random::<f64>() < cfg.flip_prob;
    let delta = sample_range(rng, cfg.brightness);
    let contrast = sample_range(rng, cfg.contrast);
    adjust_image(image, width, flip, delta, contrast)
}

fn sample_range<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub switch_epoch: usize,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            switch_epoch: 50,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            augment: Some(AugmentConfig::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lambda_plus: f64,
    pub lambda_minus: f64,
    pub mean_loss: f64,
    /// Mean score on positive slots per class (NaN when the class never occurs).
    pub mean_positive_score: Vec<f64>,
    pub mean_negative_score: Vec<f64>,
}

/// Optimizer, schedule and shuffling state carried across epochs.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub adam: AdamState,
    pub schedule: CurriculumSchedule,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig, net: &Network, train: &[Sample], seed: u64) -> Result<Self> {
        config.loss.validate()?;
        if let Some(a) = &config.augment {
            a.validate()?;
        }
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let schedule = CurriculumSchedule::from_samples(train, net.config.n_classes, config.switch_epoch);
        Ok(Self {
            adam: AdamState::new(config.adam, net.params()),
            config,
            schedule,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

/// Stacks samples into an `N x 1 x S x S` batch and an `N x C` label matrix.
pub fn batch_tensors(samples: &[&Sample], n_classes: usize) -> Result<(Tensor, Tensor)> {
    let first = samples.first().ok_or_else(|| invalid("empty batch"))?;
    let (w, h) = (first.image.width, first.image.height);
    let mut pixels = Vec::with_capacity(samples.len() * w * h);
    let mut labels = vec![0.0; samples.len() * n_classes];
    for (n, s) in samples.iter().enumerate() {
        if (s.image.width, s.image.height) != (w, h) {
            return Err(invalid("batch images differ in size"));
        }
        pixels.extend_from_slice(&s.image.pixels);
        for &c in &s.labels {
            if c >= n_classes {
                return Err(invalid(format!("label {c} out of range for {n_classes} classes")));
            }
            labels[n * n_classes + c] = 1.0;
        }
    }
    Ok((
        Tensor::new(vec![samples.len(), 1, h, w], pixels)?,
        Tensor::new(vec![samples.len(), n_classes], labels)?,
    ))
}

/// One optimizer step on a prepared batch; returns the batch loss and scores.
pub fn train_step(
    net: &mut Network,
    images: &Tensor,
    labels: &Tensor,
    loss: &LossConfig,
    adam: &mut AdamState,
) -> Result<(f64, Tensor)> {
    let pass = net.forward(images, NormMode::Train)?;
    let mut tape = pass.tape;
    let l = tape.margin_loss(pass.scores, labels, loss)?;
    let grads = tape.backward(l)?;
    let per_param: Vec<Vec<f64>> = pass
        .params
        .iter()
        .zip(net.params())
        .map(|(&v, p)| grads.get_or_zeros(v, &p.value))
        .collect();
    adam_step(net.params_mut(), &per_param, adam)?;
    Ok((tape.value(l).data()[0], tape.value(pass.scores).clone()))
}

/// One shuffled pass over `data`. Lambdas are refreshed from the curriculum
/// at the start of the epoch; a batch size above the dataset size yields a
/// single smaller batch.
pub fn train_epoch(net: &mut Network, data: &[Sample], trainer: &mut Trainer) -> Result<EpochMetrics> {
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let n_classes = net.config.n_classes;
    let (lp, lm) = curriculum_lambdas(trainer.epoch, &trainer.schedule)?;
    let loss_cfg = LossConfig {
        lambda_plus: lp,
        lambda_minus: lm,
        ..trainer.config.loss
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut trainer.rng);
    let mut loss_sum = 0.0;
    let mut pos = vec![(0.0, 0usize); n_classes];
    let mut neg = vec![(0.0, 0usize); n_classes];
    for chunk in order.chunks(trainer.config.batch_size) {
        let mut samples: Vec<Sample> = chunk.iter().map(|&i| data[i].clone()).collect();
        if let Some(aug) = trainer.config.augment {
            for s in &mut samples {
                s.image.pixels = augment(&s.image.pixels, s.image.width, &aug, &mut trainer.rng);
            }
        }
        let refs: Vec<&Sample> = samples.iter().collect();
        let (images, labels) = batch_tensors(&refs, n_classes)?;
        let (l, scores) = train_step(net, &images, &labels, &loss_cfg, &mut trainer.adam)?;
        loss_sum += l * chunk.len() as f64;
        for (k, (&s, &t)) in scores.data().iter().zip(labels.data()).enumerate() {
            let acc = if t > 0.5 {
                &mut pos[k % n_classes]
            } else {
                &mut neg[k % n_classes]
            };
            acc.0 += s;
            acc.1 += 1;
        }
    }
    let mean = |(s, c): (f64, usize)| if c == 0 { f64::NAN } else { s / c as f64 };
    let metrics = EpochMetrics {
        epoch: trainer.epoch,
        lambda_plus: lp,
        lambda_minus: lm,
        mean_loss: loss_sum / data.len() as f64,
        mean_positive_score: pos.into_iter().map(mean).collect(),
        mean_negative_score: neg.into_iter().map(mean).collect(),
    };
    trainer.epoch += 1;
    Ok(metrics)
}

/// Eval-mode scores for every sample, in order.
pub fn predict(net: &Network, data: &[Sample], batch_size: usize) -> Result<Tensor> {
    let n_classes = net.config.n_classes;
    let mut out = Vec::with_capacity(data.len() * n_classes);
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, _) = batch_tensors(&refs, n_classes)?;
        out.extend_from_slice(net.forward_eval(&images)?.scores().data());
    }
    Tensor::new(vec![data.len(), n_classes], out)
}
