//! Tilted aggregation and the segmentation losses built on it.
//!
//! Everything here works on probability maps (already softmaxed) and label
//! maps. Pixels whose label equals the map's ignore value never contribute
//! to a loss or to a class pixel count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking a log.
pub const PROB_EPS: f64 = 1e-12;

/// Tolerance on the per-pixel probability sum accepted by [`ScoreMap::new`].
pub const SCORE_SUM_TOL: f64 = 1e-6;

/// An `H x W` grid of class indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u16>,
    ignore_value: Option<u16>,
}

impl LabelMap {
    pub fn new(
        height: usize,
        width: usize,
        labels: Vec<u16>,
        ignore_value: Option<u16>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "label map must be at least 1x1, got {height}x{width}"
            )));
        }
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
            ignore_value,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn ignore_value(&self) -> Option<u16> {
        self.ignore_value
    }

    pub fn is_ignored(&self, label: u16) -> bool {
        self.ignore_value == Some(label)
    }

    /// `(pixel index, label)` for every non-ignored pixel.
    pub fn valid_pixels(&self) -> impl Iterator<Item = (usize, u16)> + '_ {
        self.labels
            .iter()
            .copied()
            .enumerate()
            .filter(move |&(_, l)| !self.is_ignored(l))
    }

    pub fn valid_count(&self) -> usize {
        self.valid_pixels().count()
    }

    /// Checks that every non-ignored label is below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .valid_pixels()
            .find(|&(_, l)| usize::from(l) >= num_classes)
        {
            Some((_, label)) => Err(Error::LabelOutOfRange { label, num_classes }),
            None => Ok(()),
        }
    }

    /// Per-class pixel counts `n_c`, ignored pixels excluded.
    pub fn class_counts(&self, num_classes: usize) -> Result<Vec<usize>> {
        self.validate(num_classes)?;
        let mut counts = vec![0usize; num_classes];
        for (_, l) in self.valid_pixels() {
            counts[usize::from(l)] += 1;
        }
        Ok(counts)
    }

    /// Classes with at least one non-ignored pixel, ascending.
    pub fn present_classes(&self, num_classes: usize) -> Result<Vec<usize>> {
        Ok(self
            .class_counts(num_classes)?
            .into_iter()
            .enumerate()
            .filter(|&(_, n)| n > 0)
            .map(|(c, _)| c)
            .collect())
    }
}

/// Per-pixel class probabilities, stored pixel-major (`[pixel][class]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    num_classes: usize,
    probs: Vec<f64>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, num_classes: usize, probs: Vec<f64>) -> Result<Self> {
        let map = Self::from_raw(height, width, num_classes, probs)?;
        for (i, px) in map.probs.chunks_exact(num_classes).enumerate() {
            if let Some(p) = px.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(Error::InvalidScores(format!(
                    "pixel {i} has probability {p} outside [0, 1]"
                )));
            }
            let sum: f64 = px.iter().sum();
            if (sum - 1.0).abs() > SCORE_SUM_TOL {
                return Err(Error::InvalidScores(format!(
                    "pixel {i} probabilities sum to {sum}"
                )));
            }
        }
        Ok(map)
    }

    /// Shape-checked constructor that skips the probability checks. Used for
    /// model output, where a diverged model must still produce a map so the
    /// caller can observe the non-finite loss.
    pub(crate) fn from_raw(
        height: usize,
        width: usize,
        num_classes: usize,
        probs: Vec<f64>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || num_classes == 0 {
            return Err(Error::Shape(format!(
                "score map must be at least 1x1x1, got {height}x{width}x{num_classes}"
            )));
        }
        if probs.len() != height * width * num_classes {
            return Err(Error::Shape(format!(
                "score map {height}x{width}x{num_classes} needs {} values, got {}",
                height * width * num_classes,
                probs.len()
            )));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            probs,
        })
    }

    /// A map that puts probability `p_true` on `labels[i]` and spreads the
    /// rest evenly over the other classes. Handy for fixtures.
    pub fn from_true_class_probs(
        labels: &LabelMap,
        num_classes: usize,
        p_true: &[f64],
    ) -> Result<Self> {
        if p_true.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} true-class probabilities for {} pixels",
                p_true.len(),
                labels.len()
            )));
        }
        let mut probs = vec![0.0; labels.len() * num_classes];
        for (i, (&l, &p)) in labels.labels().iter().zip(p_true).enumerate() {
            let px = &mut probs[i * num_classes..(i + 1) * num_classes];
            let rest = if num_classes > 1 {
                (1.0 - p) / (num_classes - 1) as f64
            } else {
                0.0
            };
            px.fill(rest);
            let c = usize::from(l).min(num_classes - 1);
            px[c] = if num_classes > 1 { p } else { 1.0 };
        }
        Self::new(labels.height(), labels.width(), num_classes, probs)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.probs[i * self.num_classes..(i + 1) * self.num_classes]
    }

    /// Arg-max label per pixel (lowest index wins ties).
    pub fn predict(&self) -> LabelMap {
        let labels = self
            .probs
            .chunks_exact(self.num_classes)
            .map(|px| {
                let mut best = 0;
                for (c, &p) in px.iter().enumerate() {
                    if p > px[best] {
                        best = c;
                    }
                }
                best as u16
            })
            .collect();
        LabelMap {
            height: self.height,
            width: self.width,
            labels,
            ignore_value: None,
        }
    }
}

/// Tilt parameter `t`. Zero is the plain mean, positive values emphasise
/// large values, negative values suppress them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Tilt(f64);

impl Tilt {
    pub const ZERO: Tilt = Tilt(0.0);

    pub fn new(t: f64) -> Result<Self> {
        if !t.is_finite() {
            return Err(Error::InvalidConfig {
                field: "t",
                reason: format!("tilt must be finite, got {t}"),
            });
        }
        Ok(Tilt(t))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0.0
    }
}

fn check_values(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::EmptyAggregation);
    }
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// `(1/t) * log(mean(exp(t * v)))`, or the arithmetic mean when `t == 0`.
///
/// Values are shifted by the extreme that dominates the exponential so that
/// every exponent is non-positive; the remaining average is taken through
/// `exp_m1`/`ln_1p` which keeps the result accurate as `t` approaches zero.
pub fn tilt_aggregate(values: &[f64], t: Tilt) -> Result<f64> {
    check_values(values)?;
    let n = values.len() as f64;
    if t.is_zero() {
        return Ok(values.iter().sum::<f64>() / n);
    }
    let t = t.value();
    let (lo, hi) = min_max(values);
    let anchor = if t > 0.0 { hi } else { lo };
    let mean_expm1 = values
        .iter()
        .map(|&v| (t * (v - anchor)).exp_m1())
        .sum::<f64>()
        / n;
    let out = anchor + mean_expm1.ln_1p() / t;
    Ok(out.clamp(lo, hi))
}

/// Softmax weights `exp(t v_i) / sum_j exp(t v_j)`; uniform when `t == 0`.
///
/// These are the coefficients that turn per-item gradients into the gradient
/// of [`tilt_aggregate`].
pub fn tilt_weights(values: &[f64], t: Tilt) -> Result<Vec<f64>> {
    check_values(values)?;
    let n = values.len();
    if t.is_zero() {
        return Ok(vec![1.0 / n as f64; n]);
    }
    let t = t.value();
    let (lo, hi) = min_max(values);
    let anchor = if t > 0.0 { hi } else { lo };
    let mut w: Vec<f64> = values.iter().map(|&v| (t * (v - anchor)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    Ok(w)
}

/// `-log(p)` with `p` clamped to `[PROB_EPS, 1]`.
#[inline]
pub fn nll(p: f64) -> f64 {
    -p.clamp(PROB_EPS, 1.0).ln()
}

/// Focal term `-alpha * (1 - p)^gamma * log(p)` with the same clamp as [`nll`].
#[inline]
pub fn focal_term(p: f64, gamma: f64, alpha: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0);
    -alpha * (1.0 - p).powf(gamma) * p.ln()
}

pub(crate) fn check_pair(scores: &ScoreMap, labels: &LabelMap) -> Result<()> {
    if scores.height != labels.height || scores.width != labels.width {
        return Err(Error::Shape(format!(
            "score map is {}x{} but label map is {}x{}",
            scores.height, scores.width, labels.height, labels.width
        )));
    }
    labels.validate(scores.num_classes)
}

fn check_batch(scores: &[ScoreMap], labels: &[LabelMap]) -> Result<usize> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} score maps for {} label maps",
            scores.len(),
            labels.len()
        )));
    }
    let first = scores.first().ok_or(Error::EmptyBatch)?;
    let k = first.num_classes;
    for (s, l) in scores.iter().zip(labels) {
        if s.num_classes != k {
            return Err(Error::Shape(format!(
                "inconsistent class count in batch: {} vs {k}",
                s.num_classes
            )));
        }
        check_pair(s, l)?;
    }
    Ok(k)
}

fn true_class_prob(scores: &ScoreMap, pixel: usize, label: u16) -> f64 {
    scores.probs[pixel * scores.num_classes + usize::from(label)]
}

/// Pixel-wise multi-class cross-entropy: mean `-log p_true` over every
/// non-ignored pixel of the batch.
pub fn mcce_loss(scores: &[ScoreMap], labels: &[LabelMap]) -> Result<f64> {
    check_batch(scores, labels)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (s, l) in scores.iter().zip(labels) {
        for (i, y) in l.valid_pixels() {
            total += nll(true_class_prob(s, i, y));
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::NoValidPixels);
    }
    Ok(total / count as f64)
}

/// Per-image mean cross-entropy, each image normalised by its own valid
/// pixel count.
pub fn per_image_losses(scores: &[ScoreMap], labels: &[LabelMap]) -> Result<Vec<f64>> {
    check_batch(scores, labels)?;
    scores
        .iter()
        .zip(labels)
        .map(|(s, l)| {
            let mut total = 0.0;
            let mut count = 0usize;
            for (i, y) in l.valid_pixels() {
                total += nll(true_class_prob(s, i, y));
                count += 1;
            }
            if count == 0 {
                Err(Error::NoValidPixels)
            } else {
                Ok(total / count as f64)
            }
        })
        .collect()
}

/// Mean cross-entropy of each class present in one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassLosses {
    classes: Vec<usize>,
    losses: Vec<f64>,
    counts: Vec<usize>,
}

impl ClassLosses {
    /// Present classes, ascending.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    /// Losses aligned with [`classes`](Self::classes).
    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    /// Pixel counts aligned with [`classes`](Self::classes).
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, class: usize) -> Option<f64> {
        self.classes
            .binary_search(&class)
            .ok()
            .map(|i| self.losses[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.classes.iter().copied().zip(self.losses.iter().copied())
    }
}

pub fn per_class_losses(scores: &ScoreMap, labels: &LabelMap) -> Result<ClassLosses> {
    check_pair(scores, labels)?;
    let k = scores.num_classes;
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (i, y) in labels.valid_pixels() {
        let c = usize::from(y);
        sums[c] += nll(true_class_prob(scores, i, y));
        counts[c] += 1;
    }
    let mut out = ClassLosses {
        classes: Vec::new(),
        losses: Vec::new(),
        counts: Vec::new(),
    };
    for c in (0..k).filter(|&c| counts[c] > 0) {
        out.classes.push(c);
        out.losses.push(sums[c] / counts[c] as f64);
        out.counts.push(counts[c]);
    }
    Ok(out)
}

/// Image-level tilted cross-entropy: tilt over the per-image losses.
pub fn tce_image_loss(scores: &[ScoreMap], labels: &[LabelMap], t: Tilt) -> Result<f64> {
    tilt_aggregate(&per_image_losses(scores, labels)?, t)
}

/// Class-level tilted cross-entropy: within each image, tilt over the losses
/// of the classes present in that image, then average over images.
pub fn tce_class_loss(scores: &[ScoreMap], labels: &[LabelMap], t: Tilt) -> Result<f64> {
    check_batch(scores, labels)?;
    let mut total = 0.0;
    for (s, l) in scores.iter().zip(labels) {
        let cl = per_class_losses(s, l)?;
        if cl.is_empty() {
            return Err(Error::NoValidPixels);
        }
        total += tilt_aggregate(cl.losses(), t)?;
    }
    Ok(total / scores.len() as f64)
}

pub(crate) fn check_focal_params(gamma: f64, alpha: &[f64], num_classes: usize) -> Result<()> {
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::InvalidConfig {
            field: "focal_gamma",
            reason: format!("must be finite and >= 0, got {gamma}"),
        });
    }
    if alpha.len() != num_classes {
        return Err(Error::Shape(format!(
            "focal alpha has {} entries for {num_classes} classes",
            alpha.len()
        )));
    }
    if let Some(a) = alpha.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
        return Err(Error::InvalidConfig {
            field: "focal_alpha",
            reason: format!("weights must be finite and >= 0, got {a}"),
        });
    }
    Ok(())
}

/// Focal loss averaged over non-ignored pixels.
pub fn focal_loss(
    scores: &[ScoreMap],
    labels: &[LabelMap],
    gamma: f64,
    alpha: &[f64],
) -> Result<f64> {
    let k = check_batch(scores, labels)?;
    check_focal_params(gamma, alpha, k)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (s, l) in scores.iter().zip(labels) {
        for (i, y) in l.valid_pixels() {
            total += focal_term(true_class_prob(s, i, y), gamma, alpha[usize::from(y)]);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::NoValidPixels);
    }
    Ok(total / count as f64)
}

/// Class weights proportional to inverse pixel counts across `labels`,
/// scaled to sum to `num_classes`.
pub fn inverse_frequency_alpha<'a, I>(labels: I, num_classes: usize) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a LabelMap>,
{
    let mut counts = vec![0u64; num_classes];
    for l in labels {
        for (c, n) in l.class_counts(num_classes)?.into_iter().enumerate() {
            counts[c] += n as u64;
        }
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass(c));
    }
    let inv: Vec<f64> = counts.iter().map(|&n| 1.0 / n as f64).collect();
    let total: f64 = inv.iter().sum();
    Ok(inv
        .iter()
        .map(|x| x / total * num_classes as f64)
        .collect())
}
