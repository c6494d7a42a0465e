//! End-to-end experiment: data, split, scenario masking, domain estimation,
//! adversarial training, evaluation and artifacts.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{stage_seed, ExperimentConfig};
use super::plots;
use super::scenario::apply_scenario;
use crate::dataset::{read_dataset, GdaDataset};
use crate::error::{GdaError, Result, StageExt};
use crate::estimator::{
    cluster_features, extract_features, nmi, train_ssl, DomainEstimate, SslLog,
};
use crate::image::Image;
use crate::metrics::{matched_agreement, ConfusionMatrix, MetricsReport};
use crate::problem::{classify_scenario, oracle_target, target_index, ClassSet, ScenarioName};
use crate::rng::stream;
use crate::synthgen::generate;
use crate::trainer::{train_dann, Prior, TrainConfig, TrainedModel};

pub fn load_data(cfg: &ExperimentConfig) -> Result<GdaDataset> {
    match &cfg.data.manifest {
        Some(m) => read_dataset(m).map(|(ds, _)| ds).stage("load"),
        None => generate(&cfg.data.synth).stage("generate"),
    }
}

/// Per (class, domain) cell, `round(test_fraction * n)` samples go to the
/// test side. Returns sorted `(train, test)` indices.
pub fn stratified_split(ds: &GdaDataset, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut cells: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.iter().enumerate() {
        cells.entry((s.domain_label, s.class_label)).or_default().push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (&(d, c), members) in &mut cells {
        members.shuffle(&mut stream(seed, &[u64::from(d), u64::from(c)]));
        let n_test = (test_fraction * members.len() as f64).round() as usize;
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Masked training set plus the held-out evaluation set.
pub struct Prepared {
    pub train: GdaDataset,
    pub test: GdaDataset,
    pub known: ClassSet,
    pub scenarios: BTreeSet<ScenarioName>,
    pub num_true_domains: usize,
}

/// `cfg` must already be [`ExperimentConfig::seeded`].
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate().stage("config")?;
    let ds = load_data(cfg)?;
    if ds.is_empty() {
        return Err(GdaError::EmptyDataset.at("load"));
    }
    let (tr, te) = stratified_split(&ds, cfg.data.test_fraction, cfg.stage_seed(stage_seed::SPLIT));
    let spec = cfg.scenario.spec().stage("scenario")?;
    let train = apply_scenario(
        &ds.subset(&tr),
        &spec,
        &cfg.scenario.domain_names,
        cfg.stage_seed(stage_seed::SCENARIO),
    )
    .stage("scenario")?;
    let known: ClassSet = train.iter().filter(|s| s.class_visible).map(|s| s.class_label).collect();
    if known.is_empty() {
        return Err(GdaError::invalid("scenario labels no training sample").at("scenario"));
    }
    let scenarios = classify_scenario(&train).stage("scenario")?;
    info!(
        "{} train / {} test samples, known classes {:?}, scenario {:?}",
        train.len(),
        te.len(),
        known,
        scenarios
    );
    Ok(Prepared {
        num_true_domains: ds.domains().len(),
        test: ds.subset(&te).stripped(),
        train,
        known,
        scenarios,
    })
}

/// Domain assignment used by training, with the estimator's by-products.
pub struct DomainStage {
    pub assignments: Vec<usize>,
    pub num_domains: usize,
    /// `None` when the true domain labels were visible.
    pub estimate: Option<DomainEstimate>,
    pub features: Option<Vec<Vec<f64>>>,
    pub ssl_log: Option<SslLog>,
    /// Evaluation only: agreement with the true domains.
    pub nmi_domain: Option<f64>,
    pub agreement: Option<f64>,
}

pub fn estimate_stage(cfg: &ExperimentConfig, prepared: &Prepared, out_dir: Option<&Path>) -> Result<DomainStage> {
    let train = &prepared.train;
    let view = train.blinded();
    if view.all_domains_visible() {
        let ids: Vec<u32> = (0..view.len())
            .map(|i| view.domain_label(i))
            .collect::<Result<_>>()
            .stage("estimate-domains")?;
        let distinct: Vec<u32> = ids.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let assignments = ids
            .iter()
            .map(|d| distinct.binary_search(d).expect("collected above"))
            .collect();
        info!("domain labels visible: using {} true domains", distinct.len());
        return Ok(DomainStage {
            assignments,
            num_domains: distinct.len(),
            estimate: None,
            features: None,
            ssl_log: None,
            nmi_domain: None,
            agreement: None,
        });
    }
    let k = cfg.cluster.k.unwrap_or(prepared.num_true_domains);
    let (mut encoder, ssl_log) = train_ssl(&view, &cfg.encoder, &cfg.ssl).stage("estimate-domains")?;
    let images: Vec<&Image> = (0..view.len()).map(|i| view.image(i)).collect();
    let features = extract_features(&mut encoder, &images, cfg.cluster.normalize_features);
    let estimate = cluster_features(&features, k, &cfg.cluster.gmm).stage("estimate-domains")?;
    let truth: Vec<usize> = train.iter().map(|s| s.domain_label as usize).collect();
    let nmi_domain = nmi(&estimate.assignments, &truth).stage("estimate-domains")?;
    let agreement = matched_agreement(&estimate.assignments, &truth).stage("estimate-domains")?;
    info!("domain estimate: k={k}, NMI {nmi_domain:.3}, matched agreement {agreement:.3}");
    if let Some(dir) = out_dir {
        encoder.save(&dir.join("encoder.ckpt")).stage("estimate-domains")?;
        estimate.write_csv(&dir.join("domains.csv")).stage("estimate-domains")?;
    }
    Ok(DomainStage {
        assignments: estimate.assignments.clone(),
        num_domains: k,
        estimate: Some(estimate),
        features: Some(features),
        ssl_log: Some(ssl_log),
        nmi_domain: Some(nmi_domain),
        agreement: Some(agreement),
    })
}

/// Ground-truth distribution over the `K + 1` targets of the training set,
/// with empty entries floored at 1e-3 before renormalising.
pub fn true_prior(train: &GdaDataset, known: &ClassSet) -> Vec<f64> {
    let mut counts = vec![0f64; known.len() + 1];
    for s in train.iter() {
        counts[target_index(oracle_target(s, known), known)] += 1.0;
    }
    let n = train.len() as f64;
    let floored: Vec<f64> = counts.iter().map(|c| (c / n).max(1e-3)).collect();
    let z: f64 = floored.iter().sum();
    floored.iter().map(|v| v / z).collect()
}

fn resolved_train_config(cfg: &ExperimentConfig, prepared: &Prepared) -> TrainConfig {
    let mut train = cfg.train.clone();
    if train.prior == Prior::TrueDistribution {
        train.prior = Prior::Weights(true_prior(&prepared.train, &prepared.known));
    }
    train
}

pub fn train_stage(cfg: &ExperimentConfig, prepared: &Prepared, domains: &DomainStage) -> Result<TrainedModel> {
    let view = prepared.train.blinded();
    train_dann(
        &view,
        &domains.assignments,
        domains.num_domains,
        &cfg.classifier,
        &resolved_train_config(cfg, prepared),
    )
    .stage("train")
}

/// Labeled-only model: no unlabeled samples, no adversarial term.
pub fn baseline_stage(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<TrainedModel> {
    let labeled: Vec<usize> = (0..prepared.train.len())
        .filter(|&i| prepared.train.get(i).class_visible)
        .collect();
    let subset = prepared.train.subset(&labeled);
    let tc = TrainConfig {
        adversarial: false,
        seed: cfg.stage_seed(stage_seed::BASELINE),
        ..cfg.train.clone()
    };
    train_dann(&subset.blinded(), &vec![0; subset.len()], 1, &cfg.classifier, &tc).stage("baseline")
}

fn confusion(model: &mut TrainedModel, test: &GdaDataset, known: &ClassSet, rejection: bool) -> Result<ConfusionMatrix> {
    let images: Vec<&Image> = test.iter().map(|s| &s.image).collect();
    let preds = if rejection {
        model.predict_with_entropy_rejection(&images)?
    } else {
        model.predict(&images)
    };
    ConfusionMatrix::from_pairs(
        known.len(),
        test.iter()
            .zip(&preds)
            .map(|(s, p)| (target_index(oracle_target(s, known), known), p.label)),
    )
}

pub fn evaluate(model: &mut TrainedModel, test: &GdaDataset, known: &ClassSet, nmi_domain: Option<f64>) -> Result<MetricsReport> {
    let cm = confusion(model, test, known, false).stage("evaluate")?;
    Ok(MetricsReport::from_confusion(&cm, nmi_domain))
}

pub fn evaluate_with_rejection(model: &mut TrainedModel, test: &GdaDataset, known: &ClassSet) -> Result<MetricsReport> {
    let cm = confusion(model, test, known, true).stage("evaluate")?;
    Ok(MetricsReport::from_confusion(&cm, None))
}

/// Run-level facts beyond the metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenarios: Vec<String>,
    pub known_classes: Vec<u32>,
    pub train_samples: usize,
    pub test_samples: usize,
    pub num_domains_used: usize,
    pub domains_estimated: bool,
    pub domain_agreement: Option<f64>,
    pub pseudo_labels: usize,
    pub pseudo_unknown: usize,
    pub hos: Option<f64>,
    pub baseline_hos: Option<f64>,
}

pub struct RunOutcome {
    pub report: MetricsReport,
    pub baseline: Option<MetricsReport>,
    pub summary: RunSummary,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Full pipeline. Writes `metrics.json`, `summary.json`, logs, checkpoints
/// and (when enabled) plots into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome> {
    let cfg = cfg.seeded();
    std::fs::create_dir_all(out_dir).stage("output")?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml()?).stage("output")?;
    let prepared = prepare(&cfg)?;
    let domains = estimate_stage(&cfg, &prepared, Some(out_dir))?;
    run_with_domains(&cfg, &prepared, &domains, out_dir)
}

/// Training, evaluation and artifacts for an already prepared run, so
/// variants can share one domain estimate. `cfg` must be seeded.
pub fn run_with_domains(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    domains: &DomainStage,
    out_dir: &Path,
) -> Result<RunOutcome> {
    std::fs::create_dir_all(out_dir).stage("output")?;
    let mut model = train_stage(cfg, prepared, domains)?;
    model.log.write_csv(&out_dir.join("train_log.csv")).stage("train")?;
    model.save(&out_dir.join("classifier.ckpt")).stage("train")?;
    let report = evaluate(&mut model, &prepared.test, &prepared.known, domains.nmi_domain)?;
    write_json(&out_dir.join("metrics.json"), &report).stage("evaluate")?;

    let baseline = if cfg.baseline {
        let mut base = baseline_stage(cfg, prepared)?;
        base.log.write_csv(&out_dir.join("baseline_train_log.csv")).stage("baseline")?;
        let r = evaluate_with_rejection(&mut base, &prepared.test, &prepared.known)?;
        write_json(&out_dir.join("baseline_metrics.json"), &r).stage("baseline")?;
        Some(r)
    } else {
        None
    };

    let k = prepared.known.len();
    let summary = RunSummary {
        scenarios: prepared.scenarios.iter().map(|s| s.to_string()).collect(),
        known_classes: prepared.known.iter().copied().collect(),
        train_samples: prepared.train.len(),
        test_samples: prepared.test.len(),
        num_domains_used: domains.num_domains,
        domains_estimated: domains.estimate.is_some(),
        domain_agreement: domains.agreement,
        pseudo_labels: model.pseudo_labels.len(),
        pseudo_unknown: model.pseudo_labels.values().filter(|p| p.label == k).count(),
        hos: report.hos,
        baseline_hos: baseline.as_ref().and_then(|b| b.hos),
    };
    write_json(&out_dir.join("summary.json"), &summary).stage("output")?;

    if let Some(features) = &domains.features {
        let dom: Vec<u32> = prepared.train.iter().map(|s| s.domain_label).collect();
        let cls: Vec<u32> = prepared.train.iter().map(|s| s.class_label).collect();
        plots::write_pca_csv(&out_dir.join("pca.csv"), features, &dom, &cls).stage("plot")?;
    }
    if cfg.plots {
        plots::plot_run(out_dir).stage("plot")?;
    }
    Ok(RunOutcome {
        report,
        baseline,
        summary,
    })
}
