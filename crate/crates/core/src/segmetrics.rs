//! Per-class IoU and fairness summaries over class IoUs.
//!
//! The summaries are scale-agnostic: IoUs computed from a confusion matrix
//! are fractions in `[0, 1]`, while tables imported from CSV are usually in
//! percent. Undefined IoUs (class absent from both truth and prediction) are
//! left out of every aggregate.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::diffmodel::{forward, ModelParams, Sample};
use crate::error::{Error, Result};
use crate::tilt::LabelMap;

/// `K x K` pixel counts; row = ground truth, column = prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every pixel whose ground truth is not the ignore value.
    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.height() != truth.height() || pred.width() != truth.width() {
            return Err(Error::Shape(format!(
                "prediction is {}x{} but ground truth is {}x{}",
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            )));
        }
        truth.validate(self.num_classes)?;
        let k = self.num_classes;
        if let Some((_, &p)) = truth
            .valid_pixels()
            .map(|(i, _)| (i, &pred.labels()[i]))
            .find(|(_, &p)| usize::from(p) >= k)
        {
            return Err(Error::LabelOutOfRange {
                label: p,
                num_classes: k,
            });
        }
        for (i, g) in truth.valid_pixels() {
            let p = pred.labels()[i];
            self.counts[usize::from(g) * k + usize::from(p)] += 1;
        }
        Ok(())
    }

    /// Elementwise sum, for combining partial evaluations.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape(format!(
                "cannot merge {}-class and {}-class matrices",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Confusion matrix of a model's argmax predictions over `samples`.
pub fn evaluate_confusion<S: std::borrow::Borrow<Sample>>(
    params: &ModelParams,
    samples: &[S],
) -> Result<ConfusionMatrix> {
    let mut matrix = ConfusionMatrix::new(params.num_classes());
    for s in samples {
        let s = s.borrow();
        let pred = forward(params, &s.features)?.predict();
        matrix.accumulate(&pred, &s.labels)?;
    }
    Ok(matrix)
}

/// Per-class IoU; `None` marks an undefined class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassIoUs(Vec<Option<f64>>);

impl ClassIoUs {
    pub fn new(values: Vec<Option<f64>>) -> Self {
        ClassIoUs(values)
    }

    pub fn from_defined(values: &[f64]) -> Self {
        ClassIoUs(values.iter().copied().map(Some).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, class: usize) -> Option<f64> {
        self.0.get(class).copied().flatten()
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.0
    }

    /// `(class, iou)` for defined entries.
    pub fn defined(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(c, v)| v.map(|x| (c, x)))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        ClassIoUs(self.0.iter().map(|v| v.map(&f)).collect())
    }
}

/// `TP / (TP + FP + FN)` per class.
pub fn iou_per_class(matrix: &ConfusionMatrix) -> ClassIoUs {
    let k = matrix.num_classes;
    ClassIoUs(
        (0..k)
            .map(|c| {
                let tp = matrix.get(c, c);
                let row: u64 = (0..k).map(|p| matrix.get(c, p)).sum();
                let col: u64 = (0..k).map(|g| matrix.get(g, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect(),
    )
}

/// Mean over defined IoUs.
pub fn miou(ious: &ClassIoUs) -> Result<f64> {
    let (sum, n) = ious
        .defined()
        .fold((0.0, 0usize), |(s, n), (_, v)| (s + v, n + 1));
    if n == 0 {
        return Err(Error::NoDefinedIou);
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Bottom,
    Top,
}

fn check_fraction(k: f64) -> Result<()> {
    if !(k > 0.0 && k <= 0.5) {
        return Err(Error::Metric(format!(
            "group fraction must be in (0, 0.5], got {k}"
        )));
    }
    Ok(())
}

/// Number of classes in a `k` fraction of `n`, rounded half to even
/// (19 classes at 25% gives 5; 150 classes at 15% gives 22).
pub fn group_size(k: f64, n: usize) -> Result<usize> {
    check_fraction(k)?;
    let g = (k * n as f64).round_ties_even() as usize;
    if g == 0 {
        return Err(Error::Metric(format!(
            "a {k} fraction of {n} classes selects no class"
        )));
    }
    Ok(g)
}

/// Class indices with a defined reference IoU, ascending by reference
/// (ties broken by class index).
pub fn reference_order(reference: &ClassIoUs) -> Vec<usize> {
    let mut order: Vec<(usize, f64)> = reference.defined().collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    order.into_iter().map(|(c, _)| c).collect()
}

/// Mean of `ious` over the `group_size(k)` classes ranked lowest (or highest)
/// by `reference`.
pub fn sorted_group_miou(ious: &ClassIoUs, reference: &ClassIoUs, k: f64, side: Side) -> Result<f64> {
    if ious.len() != reference.len() {
        return Err(Error::Shape(format!(
            "{} IoUs against {} reference IoUs",
            ious.len(),
            reference.len()
        )));
    }
    let order = reference_order(reference);
    let g = group_size(k, order.len())?;
    let group = match side {
        Side::Bottom => &order[..g],
        Side::Top => &order[order.len() - g..],
    };
    let vals: Vec<f64> = group.iter().filter_map(|&c| ious.get(c)).collect();
    if vals.is_empty() {
        return Err(Error::NoDefinedIou);
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Linearly interpolated quantile of ascending `sorted` at rank `q (n - 1)`.
pub fn interpolated_percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PercentileSummary {
    pub threshold: f64,
    /// Mean of the IoUs strictly beyond the threshold; `None` if there are none.
    pub tail_miou: Option<f64>,
}

/// Percentile of a model's own IoUs and the mean of the tail beyond it.
pub fn percentile_summary(ious: &ClassIoUs, k: f64, side: Side) -> Result<PercentileSummary> {
    check_fraction(k)?;
    let mut vals: Vec<f64> = ious.defined().map(|(_, v)| v).collect();
    if vals.len() < 2 {
        return Err(Error::Metric(format!(
            "percentiles need at least 2 defined IoUs, got {}",
            vals.len()
        )));
    }
    vals.sort_by(f64::total_cmp);
    let q = match side {
        Side::Bottom => k,
        Side::Top => 1.0 - k,
    };
    let threshold = interpolated_percentile(&vals, q);
    let tail: Vec<f64> = vals
        .iter()
        .copied()
        .filter(|&v| match side {
            Side::Bottom => v < threshold,
            Side::Top => v > threshold,
        })
        .collect();
    let tail_miou = (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64);
    Ok(PercentileSummary {
        threshold,
        tail_miou,
    })
}

/// Sample standard deviation (`n - 1` denominator); 0 for a single value.
pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub k_fraction: f64,
    pub group_size: usize,
    pub num_defined: usize,
    pub miou: f64,
    pub sorted_bottom: f64,
    pub sorted_top: f64,
    /// Class indices ascending by the reference IoUs used for the sorted groups.
    pub reference_order: Vec<usize>,
    pub percentile_bottom: PercentileSummary,
    pub percentile_top: PercentileSummary,
    pub worst: f64,
    pub std: f64,
}

pub fn fairness_report(ious: &ClassIoUs, reference: &ClassIoUs, k: f64) -> Result<FairnessReport> {
    let defined: Vec<f64> = ious.defined().map(|(_, v)| v).collect();
    let miou = miou(ious)?;
    let order = reference_order(reference);
    Ok(FairnessReport {
        k_fraction: k,
        group_size: group_size(k, order.len())?,
        num_defined: defined.len(),
        miou,
        sorted_bottom: sorted_group_miou(ious, reference, k, Side::Bottom)?,
        sorted_top: sorted_group_miou(ious, reference, k, Side::Top)?,
        reference_order: order,
        percentile_bottom: percentile_summary(ious, k, Side::Bottom)?,
        percentile_top: percentile_summary(ious, k, Side::Top)?,
        worst: defined.iter().copied().fold(f64::INFINITY, f64::min),
        std: sample_std(&defined),
    })
}

/// Two decimals, ties away from zero on the decimal value: the value is
/// first rounded to 1e-9 so that 67.635 (stored as 67.63499999...) prints as
/// 67.64.
pub fn fmt2(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let nanos = (x.abs() * 1e9).round() as i128;
    let cents = (nanos + 5_000_000) / 10_000_000;
    let sign = if x < 0.0 && cents > 0 { "-" } else { "" };
    format!("{sign}{}.{:02}", cents / 100, cents % 100)
}

fn fmt_tail(p: &PercentileSummary) -> String {
    match p.tail_miou {
        Some(m) => format!("({}, {})", fmt2(p.threshold), fmt2(m)),
        None => format!("({}, -)", fmt2(p.threshold)),
    }
}

/// Aligned text table with one row per `(method, report)`, two decimals.
pub fn fairness_table(rows: &[(String, FairnessReport)]) -> String {
    let pct = rows
        .first()
        .map_or(25.0, |(_, r)| (r.k_fraction * 100.0 * 100.0).round() / 100.0);
    let name_w = rows
        .iter()
        .map(|(n, _)| n.len())
        .max()
        .unwrap_or(0)
        .max("method".len());
    let mut out = String::new();
    out.push_str(&format!(
        "{:name_w$}  {:^17}  {:^36}  {:^17}\n",
        "",
        format!("sorted {pct}%"),
        format!("({pct}th perc., mIoU)"),
        "overall"
    ));
    out.push_str(&format!(
        "{:name_w$}  {:>8} {:>8}  {:>17} {:>18}  {:>8} {:>8}  {:>8}\n",
        "method", "bottom", "top", "bottom", "top", "worst", "std.", "mIoU"
    ));
    for (name, r) in rows {
        out.push_str(&format!(
            "{:name_w$}  {:>8} {:>8}  {:>17} {:>18}  {:>8} {:>8}  {:>8}\n",
            name,
            fmt2(r.sorted_bottom),
            fmt2(r.sorted_top),
            fmt_tail(&r.percentile_bottom),
            fmt_tail(&r.percentile_top),
            fmt2(r.worst),
            fmt2(r.std),
            fmt2(r.miou)
        ));
    }
    out
}

/// A per-class IoU table with class names.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedIous {
    pub names: Vec<String>,
    pub ious: ClassIoUs,
}

impl NamedIous {
    /// Reorders `other` to follow this table's class names.
    pub fn align(&self, other: &NamedIous) -> Result<ClassIoUs> {
        if other.names.len() != self.names.len() {
            return Err(Error::Shape(format!(
                "{} classes against {} reference classes",
                self.names.len(),
                other.names.len()
            )));
        }
        self.names
            .iter()
            .map(|n| {
                other
                    .names
                    .iter()
                    .position(|m| m == n)
                    .map(|j| other.ious.values()[j])
                    .ok_or_else(|| Error::Metric(format!("class {n:?} missing from reference")))
            })
            .collect::<Result<Vec<_>>>()
            .map(ClassIoUs)
    }
}

#[derive(Debug, Deserialize)]
struct IouRow {
    class_name: String,
    iou: String,
}

/// Reads a `class_name,iou` CSV. Lines starting with `#` are skipped; an
/// empty, `nan` or `undefined` IoU marks the class undefined.
pub fn read_iou_csv<R: Read>(reader: R) -> Result<NamedIous> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut names = Vec::new();
    let mut values = Vec::new();
    for row in rdr.deserialize() {
        let row: IouRow = row?;
        let v = match row.iou.to_ascii_lowercase().as_str() {
            "" | "nan" | "undefined" => None,
            s => Some(s.parse::<f64>().map_err(|e| {
                Error::Metric(format!("IoU {s:?} for class {:?}: {e}", row.class_name))
            })?),
        };
        names.push(row.class_name);
        values.push(v);
    }
    if names.is_empty() {
        return Err(Error::Metric("IoU table has no rows".into()));
    }
    Ok(NamedIous {
        names,
        ious: ClassIoUs(values),
    })
}

/// Writes `class_name,iou` rows with full precision, after optional `# `
/// comment lines.
pub fn write_iou_csv<W: Write>(table: &NamedIous, comment: Option<&str>, mut out: W) -> Result<()> {
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(out, "# {line}").map_err(|e| Error::io("ious.csv", e))?;
        }
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["class_name", "iou"])?;
    for (name, v) in table.names.iter().zip(table.ious.values()) {
        let cell = v.map_or_else(String::new, |x| format!("{x}"));
        w.write_record([name.as_str(), cell.as_str()])?;
    }
    w.flush().map_err(|e| Error::io("ious.csv", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(labels: &[u16], ignore: Option<u16>) -> LabelMap {
        LabelMap::new(1, labels.len(), labels.to_vec(), ignore).unwrap()
    }

    #[test]
    fn accumulate_examples() {
        let mut m = ConfusionMatrix::new(3);
        m.accumulate(&lm(&[2; 10], None), &lm(&[2; 10], None)).unwrap();
        assert_eq!(m.get(2, 2), 10);
        assert_eq!(m.total(), 10);

        let mut m = ConfusionMatrix::new(2);
        m.accumulate(&lm(&[0, 1], None), &lm(&[0, 0], None)).unwrap();
        assert_eq!((m.get(0, 0), m.get(0, 1), m.get(1, 0), m.get(1, 1)), (1, 1, 0, 0));

        let before = m.clone();
        m.accumulate(&lm(&[1, 0], None), &lm(&[9, 9], Some(9))).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn accumulate_errors() {
        let mut m = ConfusionMatrix::new(2);
        assert!(m.accumulate(&lm(&[0], None), &lm(&[0, 1], None)).is_err());
        assert!(m.accumulate(&lm(&[0], None), &lm(&[3], None)).is_err());
        assert!(m.accumulate(&lm(&[3], None), &lm(&[0], None)).is_err());
        assert!(m.merge(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn iou_examples() {
        let mut m = ConfusionMatrix::new(3);
        m.accumulate(&lm(&[0, 1, 1, 0], None), &lm(&[0, 1, 1, 0], None))
            .unwrap();
        let ious = iou_per_class(&m);
        assert_eq!(ious.values(), &[Some(1.0), Some(1.0), None]);

        let mut m = ConfusionMatrix::new(2);
        m.accumulate(&lm(&[0, 1, 1, 1], None), &lm(&[0, 0, 1, 1], None))
            .unwrap();
        let ious = iou_per_class(&m);
        assert_eq!(ious.get(0), Some(0.5));
        assert_eq!(ious.get(1), Some(2.0 / 3.0));
    }

    #[test]
    fn miou_examples() {
        assert_eq!(miou(&ClassIoUs::from_defined(&[1.0, 1.0])).unwrap(), 1.0);
        let ious = ClassIoUs::new(vec![Some(0.5), None, Some(1.0)]);
        assert_eq!(miou(&ious).unwrap(), 0.75);
        assert!(matches!(
            miou(&ClassIoUs::new(vec![None, None])),
            Err(Error::NoDefinedIou)
        ));
    }

    #[test]
    fn group_sizes() {
        assert_eq!(group_size(0.25, 19).unwrap(), 5);
        assert_eq!(group_size(0.15, 150).unwrap(), 22);
        assert_eq!(group_size(0.5, 4).unwrap(), 2);
        assert!(group_size(0.1, 4).is_err());
        assert!(group_size(0.0, 10).is_err());
        assert!(group_size(0.6, 10).is_err());
    }

    #[test]
    fn percentile_uniform_example() {
        let ious = ClassIoUs::from_defined(&[10.0, 20.0, 30.0, 40.0, 50.0]);
        let p = percentile_summary(&ious, 0.25, Side::Bottom).unwrap();
        assert_eq!(p.threshold, 20.0);
        assert_eq!(p.tail_miou, Some(10.0));
        let p = percentile_summary(&ious, 0.25, Side::Top).unwrap();
        assert_eq!(p.threshold, 40.0);
        assert_eq!(p.tail_miou, Some(50.0));
        assert!(percentile_summary(&ClassIoUs::from_defined(&[1.0]), 0.25, Side::Top).is_err());
    }

    #[test]
    fn sorted_group_uses_reference_order() {
        let reference = ClassIoUs::from_defined(&[0.9, 0.1, 0.5, 0.3]);
        let ious = ClassIoUs::from_defined(&[0.2, 0.4, 0.6, 0.8]);
        // Lowest reference: class 1, then class 3.
        let b = sorted_group_miou(&ious, &reference, 0.5, Side::Bottom).unwrap();
        assert!((b - 0.6).abs() < 1e-15);
        let t = sorted_group_miou(&ious, &reference, 0.5, Side::Top).unwrap();
        assert!((t - 0.4).abs() < 1e-15);
        assert!(sorted_group_miou(&ious, &ClassIoUs::from_defined(&[1.0]), 0.5, Side::Top).is_err());
    }

    #[test]
    fn reference_ties_break_by_index() {
        let reference = ClassIoUs::from_defined(&[0.5, 0.5, 0.1, 0.5]);
        assert_eq!(reference_order(&reference), vec![2, 0, 1, 3]);
    }

    #[test]
    fn constant_ious_report() {
        let ious = ClassIoUs::from_defined(&[0.75; 8]);
        let r = fairness_report(&ious, &ious, 0.25).unwrap();
        assert_eq!(r.std, 0.0);
        assert_eq!(r.worst, r.miou);
        assert_eq!(r.percentile_bottom.tail_miou, None);
    }

    #[test]
    fn std_uses_sample_denominator() {
        assert!((sample_std(&[1.0, 2.0, 3.0, 4.0]) - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(sample_std(&[3.0]), 0.0);
    }

    #[test]
    fn csv_round_trip_with_comments() {
        let text = "# config_hash=abc\nclass_name,iou\nroad,98.06\nwall, 48.46\nghost,\n";
        let t = read_iou_csv(text.as_bytes()).unwrap();
        assert_eq!(t.names, vec!["road", "wall", "ghost"]);
        assert_eq!(t.ious.values(), &[Some(98.06), Some(48.46), None]);
        let mut buf = Vec::new();
        write_iou_csv(&t, Some("seed=1"), &mut buf).unwrap();
        let back = read_iou_csv(buf.as_slice()).unwrap();
        assert_eq!(back, t);
        assert!(read_iou_csv("class_name,iou\nroad,abc\n".as_bytes()).is_err());
        assert!(read_iou_csv("class_name,iou\n".as_bytes()).is_err());
    }

    #[test]
    fn align_by_name() {
        let a = read_iou_csv("class_name,iou\nx,1\ny,2\n".as_bytes()).unwrap();
        let b = read_iou_csv("class_name,iou\ny,20\nx,10\n".as_bytes()).unwrap();
        assert_eq!(a.align(&b).unwrap().values(), &[Some(10.0), Some(20.0)]);
        let c = read_iou_csv("class_name,iou\ny,20\nz,10\n".as_bytes()).unwrap();
        assert!(a.align(&c).is_err());
    }

    #[test]
    fn decimal_ties_round_up() {
        assert_eq!(fmt2(64.595), "64.60");
        assert_eq!(fmt2(88.735), "88.74");
        assert_eq!(fmt2(67.56 + 0.5 * (67.71 - 67.56)), "67.64");
        assert_eq!(fmt2(-0.004), "0.00");
        assert_eq!(fmt2(-1.005), "-1.01");
        assert_eq!(fmt2(0.0), "0.00");
        assert_eq!(fmt2(13.5666), "13.57");
    }

    #[test]
    fn table_has_one_row_per_method() {
        let ious = ClassIoUs::from_defined(&[10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0]);
        let r = fairness_report(&ious, &ious, 0.25).unwrap();
        let text = fairness_table(&[("A".into(), r.clone()), ("B".into(), r)]);
        assert_eq!(text.lines().count(), 4);
        assert!(text.contains("sorted 25%"));
        assert!(text.contains("(27.50, 15.00)"));
    }
}
