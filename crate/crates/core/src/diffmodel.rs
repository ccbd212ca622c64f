//! Per-pixel softmax classifiers with hand-derived gradients.
//!
//! Two architectures are supported: a linear map from features to logits and
//! a single hidden ReLU layer. Every pixel is classified independently from
//! its own feature vector. Parameters live in one flat `Vec<f64>` so the
//! finite-difference checker can perturb them coordinate by coordinate.

use std::borrow::Borrow;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tilt::{
    self, check_focal_params, check_pair, per_class_losses, per_image_losses, tilt_weights,
    LabelMap, ScoreMap, Tilt, PROB_EPS,
};

/// `H x W x d` per-pixel features, pixel-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(Error::Shape(format!(
                "feature map must be at least 1x1x1, got {height}x{width}x{dim}"
            )));
        }
        if data.len() != height * width * dim {
            return Err(Error::Shape(format!(
                "feature map {height}x{width}x{dim} needs {} values, got {}",
                height * width * dim,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index: i,
                value: f64::from(data[i]),
            });
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// One training example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: FeatureMap,
    pub labels: LabelMap,
}

impl Sample {
    pub fn new(features: FeatureMap, labels: LabelMap) -> Result<Self> {
        if features.height != labels.height() || features.width != labels.width() {
            return Err(Error::Shape(format!(
                "features are {}x{} but labels are {}x{}",
                features.height,
                features.width,
                labels.height(),
                labels.width()
            )));
        }
        Ok(Self { features, labels })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Architecture {
    Linear,
    OneHidden { hidden: usize },
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Clone, Copy, Debug)]
struct Layout {
    d: usize,
    k: usize,
    hidden: Option<usize>,
}

impl Layout {
    fn len(&self) -> usize {
        match self.hidden {
            None => self.k * self.d + self.k,
            Some(h) => h * self.d + h + self.k * h + self.k,
        }
    }

    /// Input width of the output layer.
    fn out_in(&self) -> usize {
        self.hidden.unwrap_or(self.d)
    }

    // Flat order: [w1 (h x d), b1 (h)] then [w_out (k x out_in), b_out (k)].
    fn hidden_w(&self) -> std::ops::Range<usize> {
        let h = self.hidden.unwrap_or(0);
        0..h * self.d
    }

    fn hidden_b(&self) -> std::ops::Range<usize> {
        let h = self.hidden.unwrap_or(0);
        h * self.d..h * self.d + h
    }

    fn out_start(&self) -> usize {
        self.hidden.map_or(0, |h| h * self.d + h)
    }

    fn out_w(&self) -> std::ops::Range<usize> {
        let s = self.out_start();
        s..s + self.k * self.out_in()
    }

    fn out_b(&self) -> std::ops::Range<usize> {
        let s = self.out_w().end;
        s..s + self.k
    }
}

/// Model parameters, flattened.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    architecture: Architecture,
    input_dim: usize,
    num_classes: usize,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(architecture: Architecture, input_dim: usize, num_classes: usize) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::Shape(format!(
                "model needs input_dim >= 1 and num_classes >= 1, got {input_dim} and {num_classes}"
            )));
        }
        if architecture == (Architecture::OneHidden { hidden: 0 }) {
            return Err(Error::Shape("hidden layer width must be >= 1".into()));
        }
        let mut p = Self {
            architecture,
            input_dim,
            num_classes,
            values: Vec::new(),
        };
        p.values = vec![0.0; p.layout().len()];
        Ok(p)
    }

    /// Zero biases, weights uniform in `[-0.1, 0.1]`, drawn in flat order.
    pub fn init<R: Rng + ?Sized>(
        architecture: Architecture,
        input_dim: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(architecture, input_dim, num_classes)?;
        let layout = p.layout();
        for r in [layout.hidden_w(), layout.out_w()] {
            for v in &mut p.values[r] {
                *v = rng.random_range(-0.1..=0.1);
            }
        }
        Ok(p)
    }

    /// Wraps a flat vector; its length must match the architecture.
    pub fn from_flat(
        architecture: Architecture,
        input_dim: usize,
        num_classes: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        let mut p = Self::zeros(architecture, input_dim, num_classes)?;
        if values.len() != p.values.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                p.values.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index: i,
                value: values[i],
            });
        }
        p.values = values;
        Ok(p)
    }

    fn layout(&self) -> Layout {
        Layout {
            d: self.input_dim,
            k: self.num_classes,
            hidden: match self.architecture {
                Architecture::Linear => None,
                Architecture::OneHidden { hidden } => Some(hidden),
            },
        }
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Mutable views of the output layer: `(weights k x out_in, biases k)`.
    pub fn output_layer_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        let layout = self.layout();
        let (head, tail) = self.values.split_at_mut(layout.out_b().start);
        (&mut head[layout.out_w()], &mut tail[..layout.k])
    }
}

/// Gradient with the same flat ordering as [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient(Vec<f64>);

impl Gradient {
    pub fn new(values: Vec<f64>) -> Self {
        Gradient(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Which objective to differentiate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossKind {
    Mcce,
    TceImage { t: Tilt },
    TceClass { t: Tilt },
    Focal { gamma: f64, alpha: Vec<f64> },
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Mcce => "mcce",
            LossKind::TceImage { .. } => "tce_image",
            LossKind::TceClass { .. } => "tce_class",
            LossKind::Focal { .. } => "focal",
        }
    }
}

fn check_features(params: &ModelParams, features: &FeatureMap) -> Result<()> {
    if features.dim != params.input_dim {
        return Err(Error::Shape(format!(
            "model expects {} feature channels, got {}",
            params.input_dim, features.dim
        )));
    }
    Ok(())
}

/// Logits of one pixel, written into `logits`; `hidden` receives the
/// post-ReLU activations when the model has a hidden layer.
fn pixel_logits(
    params: &[f64],
    layout: &Layout,
    x: &[f32],
    hidden: &mut [f64],
    logits: &mut [f64],
) {
    let out_w = &params[layout.out_w()];
    let out_b = &params[layout.out_b()];
    let input: Vec<f64>;
    let layer_in: &[f64] = match layout.hidden {
        None => {
            input = x.iter().map(|&v| f64::from(v)).collect();
            &input
        }
        Some(h) => {
            let w1 = &params[layout.hidden_w()];
            let b1 = &params[layout.hidden_b()];
            for j in 0..h {
                let row = &w1[j * layout.d..(j + 1) * layout.d];
                let a = b1[j]
                    + row
                        .iter()
                        .zip(x)
                        .map(|(w, &v)| w * f64::from(v))
                        .sum::<f64>();
                hidden[j] = a.max(0.0);
            }
            hidden
        }
    };
    let n_in = layout.out_in();
    for (c, z) in logits.iter_mut().enumerate() {
        let row = &out_w[c * n_in..(c + 1) * n_in];
        *z = out_b[c] + row.iter().zip(layer_in).map(|(w, v)| w * v).sum::<f64>();
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    z.iter_mut().for_each(|v| *v /= total);
}

/// Per-pixel softmax class probabilities.
pub fn forward(params: &ModelParams, features: &FeatureMap) -> Result<ScoreMap> {
    check_features(params, features)?;
    let layout = params.layout();
    let k = params.num_classes;
    let mut hidden = vec![0.0; layout.hidden.unwrap_or(0)];
    let mut probs = vec![0.0; features.num_pixels() * k];
    for (i, px) in probs.chunks_exact_mut(k).enumerate() {
        pixel_logits(&params.values, &layout, features.pixel(i), &mut hidden, px);
        softmax_in_place(px);
    }
    ScoreMap::from_raw(features.height, features.width, k, probs)
}

fn forward_batch<S: Borrow<Sample>>(
    params: &ModelParams,
    batch: &[S],
) -> Result<(Vec<ScoreMap>, Vec<LabelMap>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut scores = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for s in batch {
        let s = s.borrow();
        let sm = forward(params, &s.features)?;
        check_pair(&sm, &s.labels)?;
        scores.push(sm);
        labels.push(s.labels.clone());
    }
    Ok((scores, labels))
}

fn loss_of(scores: &[ScoreMap], labels: &[LabelMap], kind: &LossKind) -> Result<f64> {
    match kind {
        LossKind::Mcce => tilt::mcce_loss(scores, labels),
        LossKind::TceImage { t } => tilt::tce_image_loss(scores, labels, *t),
        LossKind::TceClass { t } => tilt::tce_class_loss(scores, labels, *t),
        LossKind::Focal { gamma, alpha } => tilt::focal_loss(scores, labels, *gamma, alpha),
    }
}

/// Loss value only.
pub fn loss<S: Borrow<Sample>>(params: &ModelParams, batch: &[S], kind: &LossKind) -> Result<f64> {
    let (scores, labels) = forward_batch(params, batch)?;
    loss_of(&scores, &labels, kind)
}

/// `d loss_pixel / d p_true * p_true`, the scalar `h` such that the logit
/// gradient of one pixel is `h * (onehot - p)`.
fn pixel_scale(p: f64, kind: &LossKind, label: usize) -> f64 {
    if p < PROB_EPS {
        // Inside the clamp the loss is constant.
        return 0.0;
    }
    match kind {
        LossKind::Focal { gamma, alpha } => {
            let a = alpha[label];
            let q = 1.0 - p;
            let modulated = if *gamma == 0.0 || q == 0.0 {
                0.0
            } else {
                gamma * q.powf(gamma - 1.0) * p * p.ln()
            };
            a * (modulated - q.powf(*gamma))
        }
        _ => -1.0,
    }
}

/// Per-pixel weights multiplying each pixel's own loss gradient.
fn pixel_coefficients(
    scores: &[ScoreMap],
    labels: &[LabelMap],
    kind: &LossKind,
) -> Result<Vec<Vec<f64>>> {
    let mut coef: Vec<Vec<f64>> = labels.iter().map(|l| vec![0.0; l.len()]).collect();
    match kind {
        LossKind::Mcce | LossKind::Focal { .. } => {
            let total: usize = labels.iter().map(LabelMap::valid_count).sum();
            if total == 0 {
                return Err(Error::NoValidPixels);
            }
            let c = 1.0 / total as f64;
            for (l, out) in labels.iter().zip(&mut coef) {
                for (i, _) in l.valid_pixels() {
                    out[i] = c;
                }
            }
        }
        LossKind::TceImage { t } => {
            let w = tilt_weights(&per_image_losses(scores, labels)?, *t)?;
            for ((l, out), wm) in labels.iter().zip(&mut coef).zip(w) {
                let c = wm / l.valid_count() as f64;
                for (i, _) in l.valid_pixels() {
                    out[i] = c;
                }
            }
        }
        LossKind::TceClass { t } => {
            let m = scores.len() as f64;
            for ((s, l), out) in scores.iter().zip(labels).zip(&mut coef) {
                let cl = per_class_losses(s, l)?;
                if cl.is_empty() {
                    return Err(Error::NoValidPixels);
                }
                let w = tilt_weights(cl.losses(), *t)?;
                let mut per_class = vec![0.0; s.num_classes()];
                for (j, &c) in cl.classes().iter().enumerate() {
                    per_class[c] = w[j] / (cl.counts()[j] as f64 * m);
                }
                for (i, y) in l.valid_pixels() {
                    out[i] = per_class[usize::from(y)];
                }
            }
        }
    }
    Ok(coef)
}

/// Loss value and its exact gradient with respect to the flat parameters.
///
/// For the tilted kinds the gradient is assembled as the tilt-weighted sum
/// of the per-image (or per-class) cross-entropy gradients.
pub fn loss_and_grad<S: Borrow<Sample>>(
    params: &ModelParams,
    batch: &[S],
    kind: &LossKind,
) -> Result<(f64, Gradient)> {
    let (scores, labels) = forward_batch(params, batch)?;
    if let LossKind::Focal { gamma, alpha } = kind {
        check_focal_params(*gamma, alpha, params.num_classes)?;
    }
    let value = loss_of(&scores, &labels, kind)?;
    let coef = pixel_coefficients(&scores, &labels, kind)?;

    let layout = params.layout();
    let k = params.num_classes;
    let n_in = layout.out_in();
    let theta = &params.values;
    let mut grad = vec![0.0; theta.len()];
    let mut hidden = vec![0.0; layout.hidden.unwrap_or(0)];
    let mut logits = vec![0.0; k];
    let mut g = vec![0.0; k];
    let mut input = vec![0.0; layout.d];

    for ((sample, sm), cf) in batch.iter().zip(&scores).zip(&coef) {
        let sample = sample.borrow();
        for (i, y) in sample.labels.valid_pixels() {
            let y = usize::from(y);
            let p = sm.pixel(i);
            let scale = cf[i] * pixel_scale(p[y], kind, y);
            if scale == 0.0 {
                continue;
            }
            // d loss / d z_c = scale * (onehot_c - p_c)
            for c in 0..k {
                let onehot = if c == y { 1.0 } else { 0.0 };
                g[c] = scale * (onehot - p[c]);
            }
            let x = sample.features.pixel(i);
            for (dst, &v) in input.iter_mut().zip(x) {
                *dst = f64::from(v);
            }
            if layout.hidden.is_some() {
                pixel_logits(theta, &layout, x, &mut hidden, &mut logits);
            }
            let layer_in: &[f64] = if layout.hidden.is_some() {
                &hidden
            } else {
                &input
            };

            let (ow, ob) = (layout.out_w(), layout.out_b());
            for c in 0..k {
                let row = &mut grad[ow.start + c * n_in..ow.start + (c + 1) * n_in];
                for (r, v) in row.iter_mut().zip(layer_in) {
                    *r += g[c] * v;
                }
                grad[ob.start + c] += g[c];
            }

            if let Some(h) = layout.hidden {
                let w_out = &theta[ow.clone()];
                let (hw, hb) = (layout.hidden_w(), layout.hidden_b());
                for j in 0..h {
                    // ReLU subgradient at 0 is 0.
                    if hidden[j] <= 0.0 {
                        continue;
                    }
                    let da: f64 = (0..k).map(|c| w_out[c * n_in + j] * g[c]).sum();
                    let row = &mut grad[hw.start + j * layout.d..hw.start + (j + 1) * layout.d];
                    for (r, v) in row.iter_mut().zip(&input) {
                        *r += da * v;
                    }
                    grad[hb.start + j] += da;
                }
            }
        }
    }
    Ok((value, Gradient(grad)))
}

/// Central differences of `f` around `theta`, one coordinate at a time.
pub fn central_difference<F>(theta: &[f64], step: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidConfig {
            field: "step",
            reason: format!("finite-difference step must be > 0, got {step}"),
        });
    }
    let mut x = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x)?;
        x[i] = orig - step;
        let down = f(&x)?;
        x[i] = orig;
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

pub fn finite_diff_grad<S: Borrow<Sample>>(
    params: &ModelParams,
    batch: &[S],
    kind: &LossKind,
    step: f64,
) -> Result<Gradient> {
    let mut probe = params.clone();
    central_difference(params.as_slice(), step, |theta| {
        probe.values.copy_from_slice(theta);
        loss(&probe, batch, kind)
    })
    .map(Gradient)
}

/// Largest per-coordinate disagreement `|a - b| / max(1, |a|)`, with its
/// index. A NaN on either side counts as an infinite error.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> (usize, f64) {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let e = (a - n).abs() / a.abs().max(1.0);
            if e.is_nan() {
                f64::INFINITY
            } else {
                e
            }
        })
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best })
}

/// Worst analytic-vs-numeric disagreement over a set of random instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub loss: String,
    pub trials: usize,
    pub max_error: f64,
    pub worst_trial: usize,
    pub worst_coord: usize,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_error < tolerance
    }
}

/// Step used by [`gradient_check`] for central differences.
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Compares [`loss_and_grad`] with central differences on `trials` random
/// 4x4 instances (batch of 2, 2 feature channels, unit-Gaussian parameters).
/// The class count comes from the focal weights, or is 3.
pub fn gradient_check(
    kind: &LossKind,
    architecture: Architecture,
    trials: usize,
    seed: u64,
) -> Result<GradCheck> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    let (h, w, d) = (4, 4, 2);
    let k = match kind {
        LossKind::Focal { alpha, .. } => alpha.len(),
        _ => 3,
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck {
        loss: kind.name().to_string(),
        trials,
        max_error: 0.0,
        worst_trial: 0,
        worst_coord: 0,
    };
    for trial in 0..trials {
        let batch = (0..2)
            .map(|_| {
                let data = (0..h * w * d)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .map(|x: f64| x as f32)
                    .collect();
                let labels = (0..h * w).map(|_| rng.random_range(0..k as u16)).collect();
                Sample::new(FeatureMap::new(h, w, d, data)?, LabelMap::new(h, w, labels, None)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let n = ModelParams::zeros(architecture, d, k)?.len();
        let values = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let params = ModelParams::from_flat(architecture, d, k, values)?;
        let (_, analytic) = loss_and_grad(&params, &batch, kind)?;
        let numeric = finite_diff_grad(&params, &batch, kind, GRADCHECK_STEP)?;
        let (coord, err) = max_relative_error(analytic.as_slice(), numeric.as_slice());
        if err > out.max_error || trial == 0 {
            out.max_error = err;
            out.worst_trial = trial;
            out.worst_coord = coord;
        }
    }
    Ok(out)
}

/// Minibatch SGD with heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, num_params: usize) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidConfig {
                field: "eta",
                reason: format!("learning rate must be > 0, got {lr}"),
            });
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig {
                field: "momentum",
                reason: format!("momentum must be in [0, 1), got {momentum}"),
            });
        }
        Ok(Self {
            lr,
            momentum,
            velocity: vec![0.0; num_params],
        })
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    /// `v <- mu v + g; theta <- theta - eta v`.
    pub fn step(&mut self, params: &mut ModelParams, grad: &Gradient) -> Result<()> {
        if grad.len() != params.len() || self.velocity.len() != params.len() {
            return Err(Error::Shape(format!(
                "gradient has {} entries, parameters {}, velocity {}",
                grad.len(),
                params.len(),
                self.velocity.len()
            )));
        }
        if let Some(i) = grad.0.iter().position(|g| !g.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite gradient {} at coordinate {i}",
                grad.0[i]
            )));
        }
        for ((v, g), p) in self
            .velocity
            .iter_mut()
            .zip(&grad.0)
            .zip(params.values.iter_mut())
        {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
        Ok(())
    }
}
