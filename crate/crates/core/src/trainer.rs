//! Stochastic class-tilted training.
//!
//! Each step draws a class from a categorical distribution, draws a minibatch
//! from the images containing that class, takes an SGD step on the plain
//! minibatch cross-entropy and folds `exp(t * loss)` into that class's running
//! tilted loss. Class probabilities are the running tilted losses normalised
//! over all classes. Running losses are stored as logarithms so that large
//! `t * loss` products never overflow.
//!
//! All randomness comes from one ChaCha8 stream seeded from the config. Draw
//! order: parameter initialisation, then per step one uniform variate for the
//! class followed by the minibatch indices.

use std::borrow::Borrow;
use std::io::Write;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffmodel::{loss_and_grad, Architecture, LossKind, ModelParams, Sample, Sgd};
use crate::error::{Error, Result};
use crate::tilt::{LabelMap, Tilt};

/// Tolerance on `sum(w) == 1` accepted by [`sample_class`].
pub const DISTRIBUTION_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// An image belongs to the subset of every class it contains.
    #[default]
    Overlapping,
    /// An image belongs only to the subset of its rarest present class.
    Disjoint,
}

/// Image index subsets, one per class that ended up with a nonempty subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPartition {
    mode: PartitionMode,
    classes: Vec<usize>,
    subsets: Vec<Vec<usize>>,
    excluded: Vec<usize>,
}

impl ClassPartition {
    pub fn mode(&self) -> PartitionMode {
        self.mode
    }

    /// Number of partition slots `C`.
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Dataset class index of each slot.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn subset(&self, slot: usize) -> &[usize] {
        &self.subsets[slot]
    }

    /// Image subset of a dataset class, if it has a slot.
    pub fn subset_of_class(&self, class: usize) -> Option<&[usize]> {
        self.classes
            .iter()
            .position(|&c| c == class)
            .map(|slot| self.subsets[slot].as_slice())
    }

    /// Dataset classes left out because their subset would be empty.
    pub fn excluded(&self) -> &[usize] {
        &self.excluded
    }
}

/// Splits images into per-class subsets.
///
/// Ignored pixels do not make a class present. In disjoint mode each image
/// goes to the present class with the smallest dataset-wide pixel count (ties
/// to the smaller index); images with no valid pixels are dropped. Classes
/// whose subset is empty are excluded and logged.
pub fn partition_by_class<'a, I>(
    labels: I,
    num_classes: usize,
    mode: PartitionMode,
) -> Result<ClassPartition>
where
    I: IntoIterator<Item = &'a LabelMap>,
{
    let mut present = Vec::new();
    let mut totals = vec![0u64; num_classes];
    for l in labels {
        let counts = l.class_counts(num_classes)?;
        for (t, &n) in totals.iter_mut().zip(&counts) {
            *t += n as u64;
        }
        present.push(
            counts
                .iter()
                .enumerate()
                .filter(|(_, &n)| n > 0)
                .map(|(c, _)| c)
                .collect::<Vec<_>>(),
        );
    }
    if present.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (m, classes) in present.iter().enumerate() {
        match mode {
            PartitionMode::Overlapping => {
                for &c in classes {
                    members[c].push(m);
                }
            }
            PartitionMode::Disjoint => {
                if let Some(&c) = classes.iter().min_by_key(|&&c| (totals[c], c)) {
                    members[c].push(m);
                }
            }
        }
    }

    let mut part = ClassPartition {
        mode,
        classes: Vec::new(),
        subsets: Vec::new(),
        excluded: Vec::new(),
    };
    for (c, subset) in members.into_iter().enumerate() {
        if subset.is_empty() {
            log::warn!("class {c} has no images in {mode:?} partition; excluded from sampling");
            part.excluded.push(c);
        } else {
            part.classes.push(c);
            part.subsets.push(subset);
        }
    }
    if part.classes.is_empty() {
        return Err(Error::NoValidPixels);
    }
    Ok(part)
}

fn check_distribution(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::InvalidDistribution("no classes".into()));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::InvalidDistribution(format!("weight {w}")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(Error::InvalidDistribution(format!(
            "weights sum to {total}"
        )));
    }
    Ok(())
}

/// Inverse-CDF lookup: first index whose cumulative weight exceeds `u`.
pub fn inverse_cdf(weights: &[f64], u: f64) -> Result<usize> {
    check_distribution(weights)?;
    let mut cum = 0.0;
    for (c, &w) in weights.iter().enumerate() {
        cum += w;
        if u < cum {
            return Ok(c);
        }
    }
    // u landed in the rounding gap above the final cumulative sum.
    Ok(weights.iter().rposition(|&w| w > 0.0).unwrap_or(0))
}

/// Draws a class index with probability `weights[c]` from one uniform variate.
pub fn sample_class<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<usize> {
    check_distribution(weights)?;
    let u: f64 = rng.random();
    inverse_cdf(weights, u)
}

/// `log((1 - rate) * exp(log_prev) + rate * exp(log_fresh))`.
///
/// Factoring out the larger exponent keeps both terms in `[0, 1]`; when the
/// two logs are equal the mixture is `(1 - rate) + rate`, which rounds to
/// exactly 1, so a constant stream leaves the accumulator bit-for-bit fixed.
pub fn ema_log(log_prev: f64, log_fresh: f64, rate: f64) -> f64 {
    let m = log_prev.max(log_fresh);
    m + ((1.0 - rate) * (log_prev - m).exp() + rate * (log_fresh - m).exp()).ln()
}

/// Running tilted class losses (log domain) and the derived sampling weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    log_tilted: Vec<f64>,
    weights: Vec<f64>,
}

impl ClassWeights {
    /// Every running tilted loss starts at 1, so the weights start uniform.
    pub fn uniform(num_classes: usize) -> Self {
        Self {
            log_tilted: vec![0.0; num_classes],
            weights: vec![1.0 / num_classes as f64; num_classes],
        }
    }

    pub fn from_log_tilted(log_tilted: Vec<f64>) -> Result<Self> {
        if log_tilted.is_empty() {
            return Err(Error::InvalidDistribution("no classes".into()));
        }
        if let Some(i) = log_tilted.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index: i,
                value: log_tilted[i],
            });
        }
        let mut w = Self {
            weights: vec![0.0; log_tilted.len()],
            log_tilted,
        };
        w.renormalize();
        Ok(w)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_tilted(&self) -> &[f64] {
        &self.log_tilted
    }

    fn renormalize(&mut self) {
        let m = self
            .log_tilted
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (w, &l) in self.weights.iter_mut().zip(&self.log_tilted) {
            *w = (l - m).exp();
            total += *w;
        }
        self.weights.iter_mut().for_each(|w| *w /= total);
    }

    /// `L_c <- (1 - rate) L_c + rate * exp(t * batch_loss)`, then
    /// `w_l <- L_l / sum_k L_k` for every class.
    pub fn update(&mut self, class: usize, batch_loss: f64, t: Tilt, ema_rate: f64) -> Result<()> {
        if class >= self.log_tilted.len() {
            return Err(Error::Shape(format!(
                "class slot {class} out of range for {} slots",
                self.log_tilted.len()
            )));
        }
        if !batch_loss.is_finite() {
            return Err(Error::Divergence(format!("batch loss {batch_loss}")));
        }
        if !(ema_rate > 0.0 && ema_rate <= 1.0) {
            return Err(Error::InvalidConfig {
                field: "gamma",
                reason: format!("EMA rate must be in (0, 1], got {ema_rate}"),
            });
        }
        self.log_tilted[class] =
            ema_log(self.log_tilted[class], t.value() * batch_loss, ema_rate);
        self.renormalize();
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    /// Tilt applied to the minibatch loss before it enters the running class loss.
    pub t: Tilt,
    /// EMA rate of the running class losses.
    pub ema_rate: f64,
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub partition: PartitionMode,
    /// Objective differentiated in the parameter update.
    pub loss: LossKind,
    pub architecture: Architecture,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            t: Tilt::new(1.0).expect("finite"),
            ema_rate: 0.1,
            lr: 0.01,
            momentum: 0.9,
            steps: 2000,
            batch_size: 8,
            partition: PartitionMode::Overlapping,
            loss: LossKind::Mcce,
            architecture: Architecture::Linear,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ema_rate > 0.0 && self.ema_rate <= 1.0) {
            return Err(Error::InvalidConfig {
                field: "gamma",
                reason: format!("EMA rate must be in (0, 1], got {}", self.ema_rate),
            });
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig {
                field: "eta",
                reason: format!("learning rate must be > 0, got {}", self.lr),
            });
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig {
                field: "momentum",
                reason: format!("must be in [0, 1), got {}", self.momentum),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig {
                field: "batch",
                reason: "minibatch size must be >= 1".into(),
            });
        }
        Ok(())
    }
}

/// One training step as observed from outside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    /// Dataset class the minibatch was drawn for; `None` for uniform sampling.
    pub class: Option<usize>,
    pub batch: Vec<usize>,
    /// Untilted minibatch loss.
    pub loss: f64,
    /// Class sampling weights after this step's update (partition slot order).
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub params: ModelParams,
    pub trace: Vec<TraceRecord>,
    /// Present for class-tilted runs only.
    pub partition: Option<ClassPartition>,
    pub final_weights: Vec<f64>,
}

/// Training failure, carrying every step completed before it.
#[derive(Debug, thiserror::Error)]
#[error("{error} (after {} completed steps)", trace.len())]
pub struct TrainError {
    #[source]
    pub error: Error,
    pub trace: Vec<TraceRecord>,
}

impl From<Error> for TrainError {
    fn from(error: Error) -> Self {
        TrainError {
            error,
            trace: Vec::new(),
        }
    }
}

fn data_dims<S: Borrow<Sample>>(samples: &[S]) -> Result<usize> {
    let first = samples.first().ok_or(Error::EmptyDataset)?.borrow();
    let d = first.features.dim();
    if let Some(other) = samples
        .iter()
        .map(|s| s.borrow().features.dim())
        .find(|&dim| dim != d)
    {
        return Err(Error::Shape(format!(
            "inconsistent feature dims {other} and {d}"
        )));
    }
    Ok(d)
}

/// Minibatch indices from `pool`: without replacement when the pool is
/// large enough, with replacement otherwise.
fn draw_batch<R: Rng + ?Sized>(pool: &[usize], size: usize, rng: &mut R) -> Vec<usize> {
    if pool.len() >= size {
        index::sample(rng, pool.len(), size)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else {
        (0..size)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect()
    }
}

/// Mutable state of a class-tilted run, advanced one step at a time.
pub struct TrainerState<'a, S: Borrow<Sample>> {
    samples: &'a [S],
    config: TrainerConfig,
    partition: ClassPartition,
    params: ModelParams,
    optimizer: Sgd,
    class_weights: ClassWeights,
    step: usize,
    rng: ChaCha8Rng,
}

impl<'a, S: Borrow<Sample>> TrainerState<'a, S> {
    pub fn new(samples: &'a [S], num_classes: usize, config: TrainerConfig) -> Result<Self> {
        config.validate()?;
        let d = data_dims(samples)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = ModelParams::init(config.architecture, d, num_classes, &mut rng)?;
        let partition = partition_by_class(
            samples.iter().map(|s| &s.borrow().labels),
            num_classes,
            config.partition,
        )?;
        let optimizer = Sgd::new(config.lr, config.momentum, params.len())?;
        let class_weights = ClassWeights::uniform(partition.len());
        Ok(Self {
            samples,
            config,
            partition,
            params,
            optimizer,
            class_weights,
            step: 0,
            rng,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn partition(&self) -> &ClassPartition {
        &self.partition
    }

    pub fn class_weights(&self) -> &ClassWeights {
        &self.class_weights
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn step(&mut self) -> Result<TraceRecord> {
        let slot = sample_class(self.class_weights.weights(), &mut self.rng)?;
        let batch_idx = draw_batch(
            self.partition.subset(slot),
            self.config.batch_size,
            &mut self.rng,
        );
        let batch: Vec<&Sample> = batch_idx.iter().map(|&i| self.samples[i].borrow()).collect();

        let (train_loss, grad) = loss_and_grad(&self.params, &batch, &self.config.loss)?;
        let batch_loss = if self.config.loss == LossKind::Mcce {
            train_loss
        } else {
            crate::diffmodel::loss(&self.params, &batch, &LossKind::Mcce)?
        };
        if !batch_loss.is_finite() || !train_loss.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite loss at step {}",
                self.step
            )));
        }
        self.class_weights
            .update(slot, batch_loss, self.config.t, self.config.ema_rate)?;
        self.optimizer.step(&mut self.params, &grad)?;

        let record = TraceRecord {
            step: self.step,
            class: Some(self.partition.classes()[slot]),
            batch: batch_idx,
            loss: batch_loss,
            weights: self.class_weights.weights().to_vec(),
        };
        self.step += 1;
        Ok(record)
    }

    fn finish(self, trace: Vec<TraceRecord>) -> TrainRun {
        TrainRun {
            params: self.params,
            trace,
            final_weights: self.class_weights.weights,
            partition: Some(self.partition),
        }
    }
}

/// Runs `config.steps` class-tilted steps.
pub fn stochastic_tce_train<S: Borrow<Sample>>(
    samples: &[S],
    num_classes: usize,
    config: &TrainerConfig,
) -> std::result::Result<TrainRun, TrainError> {
    let mut state = TrainerState::new(samples, num_classes, config.clone())?;
    let mut trace = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        match state.step() {
            Ok(r) => trace.push(r),
            Err(e) => return Err(TrainError { error: e, trace }),
        }
    }
    Ok(state.finish(trace))
}

/// Uniform minibatch sampling over the whole dataset with a gradient step on
/// `config.loss`. Trace records carry no class and no weights; their loss is
/// the training objective on the minibatch.
pub fn baseline_train<S: Borrow<Sample>>(
    samples: &[S],
    num_classes: usize,
    config: &TrainerConfig,
) -> std::result::Result<TrainRun, TrainError> {
    config.validate()?;
    let d = data_dims(samples)?;
    for s in samples {
        s.borrow().labels.validate(num_classes)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::init(config.architecture, d, num_classes, &mut rng)?;
    let mut opt = Sgd::new(config.lr, config.momentum, params.len())?;
    let pool: Vec<usize> = (0..samples.len()).collect();
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch_idx = draw_batch(&pool, config.batch_size, &mut rng);
        let batch: Vec<&Sample> = batch_idx.iter().map(|&i| samples[i].borrow()).collect();
        let outcome = loss_and_grad(&params, &batch, &config.loss).and_then(|(l, g)| {
            if !l.is_finite() {
                return Err(Error::Divergence(format!("non-finite loss at step {step}")));
            }
            opt.step(&mut params, &g)?;
            Ok(l)
        });
        match outcome {
            Ok(loss) => trace.push(TraceRecord {
                step,
                class: None,
                batch: batch_idx,
                loss,
                weights: Vec::new(),
            }),
            Err(error) => return Err(TrainError { error, trace }),
        }
    }
    Ok(TrainRun {
        params,
        trace,
        partition: None,
        final_weights: Vec::new(),
    })
}

/// Mean cross-entropy of `params` over every sample (unbatched).
pub fn dataset_loss<S: Borrow<Sample>>(params: &ModelParams, samples: &[S]) -> Result<f64> {
    let batch: Vec<&Sample> = samples.iter().map(Borrow::borrow).collect();
    crate::diffmodel::loss(params, &batch, &LossKind::Mcce)
}

/// Writes `step,class,loss,w_0..w_{C-1}`; baseline rows use class `-1`.
/// Each line of `comment` is emitted first, prefixed with `# `.
pub fn write_trace_csv<W: Write>(
    trace: &[TraceRecord],
    comment: Option<&str>,
    mut out: W,
) -> Result<()> {
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(out, "# {line}").map_err(|e| Error::io("trace.csv", e))?;
        }
    }
    let num_w = trace.first().map_or(0, |r| r.weights.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string(), "class".into(), "loss".into()];
    header.extend((0..num_w).map(|i| format!("w_{i}")));
    w.write_record(&header)?;
    for r in trace {
        let mut row = vec![
            r.step.to_string(),
            r.class.map_or_else(|| "-1".to_string(), |c| c.to_string()),
            format!("{:e}", r.loss),
        ];
        row.extend(r.weights.iter().map(|x| format!("{x:e}")));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("trace.csv", e))?;
    Ok(())
}

/// Run summary written next to the trace.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub config: TrainerConfig,
    pub num_classes: usize,
    pub steps_completed: usize,
    /// Dataset class of each weight entry.
    pub weight_classes: Vec<usize>,
    pub excluded_classes: Vec<usize>,
    pub final_weights: Vec<f64>,
    pub final_batch_loss: Option<f64>,
    pub wall_time_secs: f64,
}
