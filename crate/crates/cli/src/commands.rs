use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tiltseg::diffmodel::{gradient_check, Architecture, LossKind, ModelParams, Sample};
use tiltseg::segmetrics::{
    evaluate_confusion, fairness_report, fairness_table, iou_per_class, read_iou_csv,
    write_iou_csv, FairnessReport, NamedIous,
};
use tiltseg::synthseg::{self, train_eval_split, SynthConfig, SynthDataset};
use tiltseg::tilt::{LabelMap, Tilt};
use tiltseg::trainer::{
    baseline_train, dataset_loss, stochastic_tce_train, write_trace_csv, RunSummary, TrainRun,
};

use crate::config::{read_json, DatasetSource, ExperimentConfig, Method, Overrides};
use crate::UsageError;

#[derive(Serialize, Deserialize)]
struct ParamsArtifact {
    config_hash: String,
    seed: u64,
    experiment: ExperimentConfig,
    num_classes: usize,
    params: ModelParams,
}

#[derive(Serialize)]
struct SummaryArtifact<'a> {
    config_hash: &'a str,
    seed: u64,
    experiment: &'a ExperimentConfig,
    run: RunSummary,
    final_train_loss: f64,
    train_samples: usize,
    eval_samples: usize,
    eval_miou: f64,
}

#[derive(Serialize)]
struct FairnessArtifact<'a> {
    config_hash: &'a str,
    seed: Option<u64>,
    reports: Vec<MethodReport<'a>>,
}

#[derive(Serialize)]
struct MethodReport<'a> {
    method: &'a str,
    report: &'a FairnessReport,
}

fn stamp(hash: &str, seed: Option<u64>) -> String {
    match seed {
        Some(s) => format!("config_hash={hash}\nseed={s}"),
        None => format!("config_hash={hash}"),
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn load_ious(path: &Path) -> Result<NamedIous> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_iou_csv(f).with_context(|| format!("reading {}", path.display()))
}

fn class_names(k: usize) -> Vec<String> {
    (0..k).map(|c| format!("class_{c}")).collect()
}

pub fn generate(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg: SynthConfig = read_json(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let ds = synthseg::generate(&cfg)?;
    let bytes = synthseg::to_bytes(&ds)?;
    write_file(out, bytes)?;
    println!(
        "wrote {} samples ({} classes, {}x{}) to {}",
        ds.samples.len(),
        cfg.num_classes,
        cfg.height,
        cfg.width,
        out.display()
    );
    Ok(())
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<SynthDataset> {
    match (&cfg.dataset, cfg.synth_config()) {
        (Some(DatasetSource::Path(p)), _) => {
            synthseg::load(p).with_context(|| format!("loading {}", p.display()))
        }
        (_, Some(synth)) => Ok(synthseg::generate(&synth)?),
        _ => unreachable!("a dataset source is always resolvable"),
    }
}

struct Split<'a> {
    train: Vec<&'a Sample>,
    eval: Vec<&'a Sample>,
}

fn split<'a>(ds: &'a SynthDataset, cfg: &ExperimentConfig) -> Result<Split<'a>> {
    let (tr, ev) = train_eval_split(ds.samples.len(), cfg.eval_fraction, cfg.seed)?;
    let train = tr.iter().map(|&i| &ds.samples[i]).collect();
    let eval = ev.iter().map(|&i| &ds.samples[i]).collect();
    Ok(Split { train, eval })
}

fn reports_text(hash: &str, seed: Option<u64>, rows: &[(String, FairnessReport)]) -> String {
    let mut text = stamp(hash, seed)
        .lines()
        .map(|l| format!("# {l}\n"))
        .collect::<String>();
    text.push_str(&fairness_table(rows));
    text
}

fn fairness_json(hash: &str, seed: Option<u64>, rows: &[(String, FairnessReport)]) -> Result<String> {
    let art = FairnessArtifact {
        config_hash: hash,
        seed,
        reports: rows
            .iter()
            .map(|(m, r)| MethodReport { method: m, report: r })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&art)?)
}

fn write_reports(out: &Path, hash: &str, seed: Option<u64>, named: &NamedIous, rows: &[(String, FairnessReport)]) -> Result<()> {
    let mut w = create(&out.join("ious.csv"))?;
    write_iou_csv(named, Some(&stamp(hash, seed)), &mut w)?;
    write_file(&out.join("fairness.json"), fairness_json(hash, seed, rows)?)?;
    write_file(&out.join("fairness.txt"), reports_text(hash, seed, rows))
}

fn report_against(named: &NamedIous, reference: Option<&NamedIous>, k: f64) -> Result<FairnessReport> {
    let reference = match reference {
        Some(r) => named.align(r).context("aligning reference IoUs")?,
        None => named.ious.clone(),
    };
    Ok(fairness_report(&named.ious, &reference, k)?)
}

pub fn train(config: Option<&Path>, out: &Path, reference: Option<&Path>, o: &Overrides) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    cfg.apply(o);
    cfg.validate()?;
    let reference = reference.map(load_ious).transpose()?;
    let ds = load_dataset(&cfg)?;
    let k = ds.num_classes;
    let parts = split(&ds, &cfg)?;
    let eval = if parts.eval.is_empty() {
        log::warn!("eval_fraction gives no held-out samples; evaluating on the training split");
        parts.train.clone()
    } else {
        parts.eval.clone()
    };
    let train_labels: Vec<&LabelMap> = parts.train.iter().map(|s| &s.labels).collect();
    let tc = cfg.trainer_config(Some((&train_labels, k)))?;
    let hash = cfg.hash();
    let seed = cfg.seed;
    log::info!("training {} for {} steps, config {hash}", cfg.method.name(), tc.steps);

    let start = Instant::now();
    let outcome = match cfg.method {
        Method::TceStochastic => stochastic_tce_train(&parts.train, k, &tc),
        Method::Mcce | Method::Focal => baseline_train(&parts.train, k, &tc),
    };
    let wall_time_secs = start.elapsed().as_secs_f64();
    let run: TrainRun = match outcome {
        Ok(run) => run,
        Err(e) => {
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let path = out.join("trace.csv");
            write_trace_csv(&e.trace, Some(&stamp(&hash, Some(seed))), create(&path)?)?;
            return Err(anyhow!(e.error).context(format!(
                "training stopped after {} steps; partial trace in {}",
                e.trace.len(),
                path.display()
            )));
        }
    };

    let named = NamedIous {
        names: class_names(k),
        ious: iou_per_class(&evaluate_confusion(&run.params, &eval)?),
    };
    let report = report_against(&named, reference.as_ref(), cfg.k_fraction)?;
    let rows = vec![(cfg.method.name().to_string(), report)];
    let (weight_classes, excluded_classes) = run
        .partition
        .as_ref()
        .map(|p| (p.classes().to_vec(), p.excluded().to_vec()))
        .unwrap_or_default();
    let summary = SummaryArtifact {
        config_hash: &hash,
        seed,
        experiment: &cfg,
        run: RunSummary {
            method: cfg.method.name().to_string(),
            config: tc.clone(),
            num_classes: k,
            steps_completed: run.trace.len(),
            weight_classes,
            excluded_classes,
            final_weights: run.final_weights.clone(),
            final_batch_loss: run.trace.last().map(|r| r.loss),
            wall_time_secs,
        },
        final_train_loss: dataset_loss(&run.params, &parts.train)?,
        train_samples: parts.train.len(),
        eval_samples: eval.len(),
        eval_miou: rows[0].1.miou,
    };
    let params = ParamsArtifact {
        config_hash: hash.clone(),
        seed,
        experiment: cfg.clone(),
        num_classes: k,
        params: run.params.clone(),
    };

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_trace_csv(&run.trace, Some(&stamp(&hash, Some(seed))), create(&out.join("trace.csv"))?)?;
    write_file(&out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    write_file(&out.join("params.json"), serde_json::to_string_pretty(&params)?)?;
    write_reports(out, &hash, Some(seed), &named, &rows)?;
    print!("{}", fairness_table(&rows));
    println!(
        "{} steps in {:.2} s; artifacts in {}",
        run.trace.len(),
        wall_time_secs,
        out.display()
    );
    Ok(())
}

pub fn evaluate(
    params_path: &Path,
    data: Option<&Path>,
    eval_split: bool,
    reference: Option<&Path>,
    k_fraction: f64,
    out: &Path,
) -> Result<()> {
    let art: ParamsArtifact = read_json(params_path)?;
    let p = &art.params;
    let params = ModelParams::from_flat(p.architecture(), p.input_dim(), p.num_classes(), p.as_slice().to_vec())
        .with_context(|| format!("invalid parameters in {}", params_path.display()))?;
    let reference = reference.map(load_ious).transpose()?;
    let ds = match data {
        Some(path) => synthseg::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => load_dataset(&art.experiment)?,
    };
    if ds.num_classes != params.num_classes() {
        bail!(
            "parameters are for {} classes but the dataset has {}",
            params.num_classes(),
            ds.num_classes
        );
    }
    let samples: Vec<&Sample> = if eval_split {
        split(&ds, &art.experiment)?.eval
    } else {
        ds.samples.iter().collect()
    };
    if samples.is_empty() {
        bail!(UsageError("no samples to evaluate".into()));
    }
    let named = NamedIous {
        names: class_names(ds.num_classes),
        ious: iou_per_class(&evaluate_confusion(&params, &samples)?),
    };
    let report = report_against(&named, reference.as_ref(), k_fraction)?;
    let rows = vec![(art.experiment.method.name().to_string(), report)];
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_reports(out, &art.config_hash, Some(art.seed), &named, &rows)?;
    print!("{}", fairness_table(&rows));
    Ok(())
}

pub fn report_only(ious: &[PathBuf], reference: Option<&Path>, k_fraction: f64, out: Option<&Path>) -> Result<()> {
    let mut hasher = Sha256::new();
    hasher.update(k_fraction.to_le_bytes());
    for p in ious.iter().map(PathBuf::as_path).chain(reference) {
        hasher.update(fs::read(p).with_context(|| format!("reading {}", p.display()))?);
    }
    let hash = hex::encode(hasher.finalize());
    let tables: Vec<(String, NamedIous)> = ious
        .iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            Ok((name, load_ious(p)?))
        })
        .collect::<Result<_>>()?;
    let reference = match reference {
        Some(p) => load_ious(p)?,
        None => tables[0].1.clone(),
    };
    let rows: Vec<(String, FairnessReport)> = tables
        .iter()
        .map(|(name, t)| {
            let aligned = reference
                .align(t)
                .with_context(|| format!("{name}: class names differ from the reference"))?;
            let r = fairness_report(&aligned, &reference.ious, k_fraction)?;
            Ok((name.clone(), r))
        })
        .collect::<Result<_>>()?;
    print!("{}", fairness_table(&rows));
    if let Some(out) = out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        write_file(&out.join("fairness.json"), fairness_json(&hash, None, &rows)?)?;
        write_file(&out.join("fairness.txt"), reports_text(&hash, None, &rows))?;
    }
    Ok(())
}

pub fn gradcheck(
    kinds: &[&str],
    trials: usize,
    tolerance: f64,
    seed: u64,
    t: f64,
    gamma: f64,
    hidden: Option<usize>,
) -> Result<()> {
    if !(tolerance >= 0.0 && tolerance.is_finite()) {
        bail!(UsageError(format!("tolerance must be finite and >= 0, got {tolerance}")));
    }
    let t = Tilt::new(t).map_err(|e| UsageError(format!("t: {e}")))?;
    let arch = match hidden {
        Some(h) => Architecture::OneHidden { hidden: h },
        None => Architecture::Linear,
    };
    if trials == 0 {
        log::warn!("trials = 0: nothing was checked");
    }
    let mut failures = Vec::new();
    for &name in kinds {
        let kind = match name {
            "mcce" => LossKind::Mcce,
            "tce-image" => LossKind::TceImage { t },
            "tce-class" => LossKind::TceClass { t },
            _ => LossKind::Focal {
                gamma,
                alpha: vec![0.75, 1.0, 1.25],
            },
        };
        let r = gradient_check(&kind, arch, trials, seed)?;
        let ok = trials == 0 || r.passes(tolerance);
        println!(
            "{:<10} {} max rel. error {:.3e} (trial {}, coordinate {}), tolerance {:e}",
            name,
            if ok { "PASS" } else { "FAIL" },
            r.max_error,
            r.worst_trial,
            r.worst_coord,
            tolerance
        );
        if !ok {
            failures.push(format!(
                "{name}: error {:.3e} at trial {} coordinate {}",
                r.max_error, r.worst_trial, r.worst_coord
            ));
        }
    }
    if !failures.is_empty() {
        bail!("gradient check failed: {}", failures.join("; "));
    }
    Ok(())
}
