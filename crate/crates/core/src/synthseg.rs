//! Imbalanced synthetic segmentation datasets and the SSEG1 file format.
//!
//! Each pixel's feature vector is its class mean plus isotropic Gaussian
//! noise. Labels come from a geometric layout: every sample is cut into the
//! same number of equal regions (horizontal stripes or grid rectangles), and
//! the regions of the whole dataset form one pool that is allocated to
//! classes in proportion to the target frequencies, shuffled and dealt out.
//! Rare classes therefore occupy only a few samples.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffmodel::{FeatureMap, Sample};
use crate::error::{Error, Result};
use crate::tilt::LabelMap;

pub const MAGIC: &[u8; 5] = b"SSEG1";
pub const FORMAT_VERSION: u16 = 1;
pub const FREQUENCY_TOL: f64 = 1e-9;
/// Fraction of the original distance a hard class keeps from its confuser.
pub const HARD_CLASS_SHRINK: f64 = 0.4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    #[default]
    Stripes,
    Rectangles,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub feature_dim: usize,
    pub num_samples: usize,
    /// Target pixel share per class; sums to 1.
    pub class_frequency: Vec<f64>,
    pub mean_separation: f64,
    pub noise_sigma: f64,
    #[serde(default)]
    pub hard_classes: Vec<usize>,
    #[serde(default)]
    pub layout: Layout,
    /// Regions per sample: stripes, or cells of a near-square grid.
    #[serde(default = "default_regions")]
    pub regions_per_sample: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub ignore_value: Option<u16>,
}

fn default_regions() -> usize {
    8
}

impl SynthConfig {
    /// Five classes on 32x32 grids: one class at a 3% pixel share and one
    /// hard class pulled towards the dominant class.
    pub fn default_task(seed: u64) -> Self {
        Self {
            num_classes: 5,
            height: 32,
            width: 32,
            feature_dim: 5,
            num_samples: 200,
            class_frequency: vec![0.45, 0.25, 0.17, 0.10, 0.03],
            mean_separation: 3.0,
            noise_sigma: 1.0,
            hard_classes: vec![3],
            layout: Layout::Stripes,
            regions_per_sample: 8,
            seed,
            ignore_value: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: String| Err(Error::InvalidConfig { field, reason });
        if self.num_classes < 2 {
            return bad("num_classes", format!("need at least 2, got {}", self.num_classes));
        }
        if self.num_classes > usize::from(u16::MAX) {
            return bad("num_classes", format!("at most {} supported", u16::MAX));
        }
        for (field, v) in [
            ("height", self.height),
            ("width", self.width),
            ("feature_dim", self.feature_dim),
            ("num_samples", self.num_samples),
        ] {
            if v == 0 {
                return bad(field, "must be >= 1".into());
            }
        }
        if self.class_frequency.len() != self.num_classes {
            return bad(
                "class_frequency",
                format!(
                    "{} entries for {} classes",
                    self.class_frequency.len(),
                    self.num_classes
                ),
            );
        }
        if let Some(f) = self
            .class_frequency
            .iter()
            .find(|f| !(f.is_finite() && **f >= 0.0))
        {
            return bad("class_frequency", format!("entries must be >= 0, got {f}"));
        }
        let sum: f64 = self.class_frequency.iter().sum();
        if (sum - 1.0).abs() > FREQUENCY_TOL {
            return bad("class_frequency", format!("must sum to 1, sums to {sum}"));
        }
        if !(self.mean_separation > 0.0 && self.mean_separation.is_finite()) {
            return bad("mean_separation", format!("must be > 0, got {}", self.mean_separation));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma", format!("must be > 0, got {}", self.noise_sigma));
        }
        if let Some(h) = self.hard_classes.iter().find(|&&h| h >= self.num_classes) {
            return bad("hard_classes", format!("class {h} out of range for {} classes", self.num_classes));
        }
        let max_regions = match self.layout {
            Layout::Stripes => self.height,
            Layout::Rectangles => self.height * self.width,
        };
        if self.regions_per_sample == 0 || self.regions_per_sample > max_regions {
            return bad(
                "regions_per_sample",
                format!("must be in 1..={max_regions}, got {}", self.regions_per_sample),
            );
        }
        if let Some(v) = self.ignore_value {
            if usize::from(v) < self.num_classes {
                return bad("ignore_value", format!("{v} collides with a class index"));
            }
        }
        Ok(())
    }

    /// Regions allotted to each class across the whole dataset.
    pub fn region_allocation(&self) -> Result<Vec<usize>> {
        self.validate()?;
        let pixels = (self.height * self.width) as f64;
        for (c, &f) in self.class_frequency.iter().enumerate() {
            if f * pixels < 1.0 {
                return Err(Error::DegenerateClass {
                    class: c,
                    reason: format!("share {f} of {pixels} pixels is below one pixel"),
                });
            }
        }
        let pool = self.num_samples * self.regions_per_sample;
        let alloc = largest_remainder(&self.class_frequency, pool);
        if let Some(c) = alloc.iter().position(|&n| n == 0) {
            return Err(Error::DegenerateClass {
                class: c,
                reason: format!(
                    "share {} of {pool} regions rounds to zero regions",
                    self.class_frequency[c]
                ),
            });
        }
        Ok(alloc)
    }
}

/// Apportions `total` units by `shares`; ties in remainders go to the lower index.
fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = shares.iter().map(|s| s * total as f64).collect();
    let mut alloc: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &c in order.iter().take(total.saturating_sub(assigned)) {
        alloc[c] += 1;
    }
    alloc
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    /// Generator config, when the data came from [`generate`].
    pub config: Option<SynthConfig>,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl SynthDataset {
    /// Realized pixel share per class over non-ignored pixels.
    pub fn class_shares(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.num_classes];
        for s in &self.samples {
            for (_, l) in s.labels.valid_pixels() {
                counts[usize::from(l)] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        counts
            .iter()
            .map(|&n| n as f64 / total.max(1) as f64)
            .collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.dim())
    }
}

/// Class feature means, `K x d` row-major.
pub fn class_means(config: &SynthConfig) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    Ok(place_means(config, &mut stream(config.seed, 0)))
}

fn place_means<R: Rng>(config: &SynthConfig, rng: &mut R) -> Vec<Vec<f64>> {
    let (k, d) = (config.num_classes, config.feature_dim);
    let radius = config.mean_separation / std::f64::consts::SQRT_2;
    let mut means: Vec<Vec<f64>> = if d >= k {
        (0..k)
            .map(|c| (0..d).map(|j| if j == c { radius } else { 0.0 }).collect())
            .collect()
    } else {
        (0..k)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| radius * x / norm).collect()
            })
            .collect()
    };
    for &h in &config.hard_classes {
        let c = confuser(config, h);
        let anchor = means[c].clone();
        for (m, a) in means[h].iter_mut().zip(&anchor) {
            *m = a + HARD_CLASS_SHRINK * (*m - a);
        }
    }
    means
}

/// The most frequent class other than `class` (lowest index on ties).
pub fn confuser(config: &SynthConfig, class: usize) -> usize {
    (0..config.num_classes)
        .filter(|&c| c != class)
        .max_by(|&a, &b| {
            config.class_frequency[a]
                .total_cmp(&config.class_frequency[b])
                .then(b.cmp(&a))
        })
        .expect("at least two classes")
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn grid_shape(regions: usize, height: usize, width: usize) -> (usize, usize) {
    let mut rows = (regions as f64).sqrt().floor() as usize;
    while rows > 1 && (regions % rows != 0 || rows > height || regions / rows > width) {
        rows -= 1;
    }
    (rows.max(1), regions / rows.max(1))
}

/// Region index of every pixel in one sample.
fn region_map(config: &SynthConfig) -> Vec<usize> {
    let (h, w, r) = (config.height, config.width, config.regions_per_sample);
    match config.layout {
        Layout::Stripes => (0..h * w).map(|i| (i / w) * r / h).collect(),
        Layout::Rectangles => {
            let (gr, gc) = grid_shape(r, h, w);
            (0..h * w)
                .map(|i| {
                    let (y, x) = (i / w, i % w);
                    (y * gr / h) * gc + (x * gc / w).min(gc - 1)
                })
                .collect()
        }
    }
}

/// Deterministic dataset from `config`.
///
/// Class means and the region shuffle use stream 0 of the seeded generator;
/// sample `i` draws its noise from stream `i + 1`.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    let alloc = config.region_allocation()?;
    if config.layout == Layout::Rectangles {
        let (gr, gc) = grid_shape(config.regions_per_sample, config.height, config.width);
        if gr * gc != config.regions_per_sample || gr > config.height || gc > config.width {
            return Err(Error::InvalidConfig {
                field: "regions_per_sample",
                reason: format!(
                    "{} regions do not tile a {}x{} grid",
                    config.regions_per_sample, config.height, config.width
                ),
            });
        }
    }
    let mut rng = stream(config.seed, 0);
    let means = place_means(config, &mut rng);
    let mut pool: Vec<u16> = alloc
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c as u16, n))
        .collect();
    pool.shuffle(&mut rng);

    let regions = region_map(config);
    let r = config.regions_per_sample;
    let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::InvalidConfig {
        field: "noise_sigma",
        reason: e.to_string(),
    })?;
    let d = config.feature_dim;
    let samples = pool
        .chunks(r)
        .enumerate()
        .map(|(i, classes)| {
            let labels: Vec<u16> = regions.iter().map(|&g| classes[g]).collect();
            let mut rng = stream(config.seed, i as u64 + 1);
            let mut data = Vec::with_capacity(labels.len() * d);
            for &l in &labels {
                for m in &means[usize::from(l)] {
                    data.push((m + noise.sample(&mut rng)) as f32);
                }
            }
            let features = FeatureMap::new(config.height, config.width, d, data)?;
            let labels = LabelMap::new(config.height, config.width, labels, config.ignore_value)?;
            Sample::new(features, labels)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthDataset {
        config: Some(config.clone()),
        num_classes: config.num_classes,
        samples,
    })
}

/// Seeded shuffle of `0..n` split into `(train, eval)`; `eval` gets
/// `round(n * eval_fraction)` indices, and both sides keep at least one
/// index when `n >= 2`.
pub fn train_eval_split(n: usize, eval_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&eval_fraction) {
        return Err(Error::InvalidConfig {
            field: "eval_fraction",
            reason: format!("must be in [0, 1), got {eval_fraction}"),
        });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_eval = (n as f64 * eval_fraction).round() as usize;
    if eval_fraction > 0.0 && n >= 2 {
        n_eval = n_eval.clamp(1, n - 1);
    }
    let eval = idx.split_off(n - n_eval);
    Ok((idx, eval))
}

fn put_u32(buf: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Malformed(format!("{what} {v} exceeds u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes to SSEG1 bytes.
pub fn to_bytes(dataset: &SynthDataset) -> Result<Vec<u8>> {
    let first = dataset.samples.first().ok_or(Error::EmptyDataset)?;
    let (h, w, d) = (
        first.labels.height(),
        first.labels.width(),
        first.features.dim(),
    );
    let ignore = first.labels.ignore_value();
    for s in &dataset.samples {
        if s.labels.height() != h
            || s.labels.width() != w
            || s.features.dim() != d
            || s.labels.ignore_value() != ignore
        {
            return Err(Error::Shape("SSEG1 needs samples of one shape".into()));
        }
    }
    let mut buf = Vec::with_capacity(dataset.samples.len() * h * w * (2 + 4 * d) + 64);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut buf, dataset.samples.len(), "sample count")?;
    put_u32(&mut buf, h, "height")?;
    put_u32(&mut buf, w, "width")?;
    put_u32(&mut buf, dataset.num_classes, "class count")?;
    put_u32(&mut buf, d, "feature dim")?;
    buf.push(u8::from(ignore.is_some()));
    buf.extend_from_slice(&ignore.unwrap_or(0).to_le_bytes());
    for s in &dataset.samples {
        for l in s.labels.labels() {
            buf.extend_from_slice(&l.to_le_bytes());
        }
        for f in s.features.data() {
            buf.extend_from_slice(&f.to_le_bytes());
        }
    }
    let json = match &dataset.config {
        Some(c) => serde_json::to_vec(c)?,
        None => Vec::new(),
    };
    put_u32(&mut buf, json.len(), "config length")?;
    buf.extend_from_slice(&json);
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::UnexpectedEof)?;
        let out = self.bytes.get(self.pos..end).ok_or(Error::UnexpectedEof)?;
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

/// Parses SSEG1 bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<SynthDataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(MAGIC.len()).map_err(|_| Error::BadMagic)?;
    if magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = cur.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let m = cur.u32()?;
    let h = cur.u32()?;
    let w = cur.u32()?;
    let k = cur.u32()?;
    let d = cur.u32()?;
    let has_ignore = cur.take(1)?[0];
    let ignore_raw = cur.u16()?;
    let ignore = match has_ignore {
        0 => None,
        1 => Some(ignore_raw),
        f => return Err(Error::Malformed(format!("ignore flag must be 0 or 1, got {f}"))),
    };
    if h == 0 || w == 0 || d == 0 || k == 0 {
        return Err(Error::Malformed(format!(
            "zero dimension in header: {h}x{w}, K={k}, d={d}"
        )));
    }
    let per_sample = h
        .checked_mul(w)
        .and_then(|p| p.checked_mul(2 + 4 * d))
        .ok_or_else(|| Error::Malformed("sample size overflows".into()))?;
    if m.checked_mul(per_sample).is_none_or(|n| n > bytes.len()) {
        return Err(Error::UnexpectedEof);
    }
    let mut samples = Vec::with_capacity(m);
    for _ in 0..m {
        let labels: Vec<u16> = cur
            .take(2 * h * w)?
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        if let Some(&l) = labels
            .iter()
            .find(|&&l| usize::from(l) >= k && Some(l) != ignore)
        {
            return Err(Error::Malformed(format!("label {l} out of range for {k} classes")));
        }
        let data: Vec<f32> = cur
            .take(4 * h * w * d)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let features =
            FeatureMap::new(h, w, d, data).map_err(|e| Error::Malformed(e.to_string()))?;
        samples.push(Sample::new(features, LabelMap::new(h, w, labels, ignore)?)?);
    }
    let len = cur.u32()?;
    let json = cur.take(len)?;
    if cur.pos != bytes.len() {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after config",
            bytes.len() - cur.pos
        )));
    }
    let config = if json.is_empty() {
        None
    } else {
        Some(serde_json::from_slice(json).map_err(|e| Error::Malformed(format!("config: {e}")))?)
    };
    Ok(SynthDataset {
        config,
        num_classes: k,
        samples,
    })
}

pub fn save(dataset: &SynthDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(dataset)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads the whole file, then parses; nothing is returned on a parse error.
pub fn load(path: impl AsRef<Path>) -> Result<SynthDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
