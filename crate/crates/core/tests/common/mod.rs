#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tiltseg::diffmodel::{Architecture, FeatureMap, LossKind, ModelParams, Sample};
use tiltseg::tilt::{LabelMap, Tilt};

pub fn random_sample(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize, d: usize) -> Sample {
    let data: Vec<f32> = (0..h * w * d)
        .map(|_| StandardNormal.sample(rng))
        .map(|x: f64| x as f32)
        .collect();
    let labels: Vec<u16> = (0..h * w).map(|_| rng.random_range(0..k as u16)).collect();
    Sample::new(
        FeatureMap::new(h, w, d, data).unwrap(),
        LabelMap::new(h, w, labels, None).unwrap(),
    )
    .unwrap()
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, k: usize, d: usize) -> Vec<Sample> {
    (0..n).map(|_| random_sample(rng, h, w, k, d)).collect()
}

/// Parameters with unit-scale Gaussian entries, so softmax outputs are far from uniform.
pub fn random_params(rng: &mut ChaCha8Rng, arch: Architecture, d: usize, k: usize) -> ModelParams {
    let n = ModelParams::zeros(arch, d, k).unwrap().len();
    let values = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    ModelParams::from_flat(arch, d, k, values).unwrap()
}

pub fn loss_kinds(k: usize) -> Vec<LossKind> {
    let t = |x| Tilt::new(x).unwrap();
    vec![
        LossKind::Mcce,
        LossKind::TceImage { t: t(0.1) },
        LossKind::TceImage { t: t(1.0) },
        LossKind::TceClass { t: t(1.0) },
        LossKind::Focal {
            gamma: 2.0,
            alpha: (0..k).map(|c| 0.5 + c as f64 * 0.25).collect(),
        },
    ]
}
