//! Grid-size and cluster-count sweeps.

use std::path::Path;

use log::info;

use super::config::ExperimentConfig;
use super::pipeline::{evaluate, load_data, prepare, train_stage, DomainStage};
use super::plots::{cluster_sweep_plot, nmi_curve_plot, write_csv, ClusterSweepRow};
use crate::destructor::GridSpec;
use crate::error::{Result, StageExt};
use crate::estimator::{cluster_count_curve, extract_features, nmi_curve, train_ssl, NmiRow};
use crate::image::Image;

/// NMI of estimator features against true domains and classes, one encoder
/// per grid size, on the whole dataset (no labels are read for training).
pub fn grid_sweep(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<NmiRow>> {
    let cfg = cfg.seeded();
    cfg.validate().stage("config")?;
    std::fs::create_dir_all(out_dir).stage("output")?;
    let ds = load_data(&cfg)?;
    let grids: Vec<GridSpec> = cfg
        .sweep
        .grids
        .iter()
        .map(|&g| GridSpec::new(g))
        .collect::<Result<_>>()
        .stage("config")?;
    let rows = nmi_curve(&ds, &grids, &cfg.encoder, &cfg.ssl, &cfg.cluster).stage("sweep")?;
    for r in &rows {
        info!("grid {}: NMI domain {:.3}, class {:.3}", r.grid, r.nmi_domain, r.nmi_class);
    }
    write_csv(&out_dir.join("nmi_curve.csv"), &rows).stage("output")?;
    if cfg.plots {
        nmi_curve_plot(&rows, &out_dir.join("nmi_curve.png")).stage("plot")?;
    }
    Ok(rows)
}

/// One encoder on the training split, clustered at every configured count.
/// With `train_per_count`, a classifier is trained and evaluated per count.
pub fn cluster_sweep(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<ClusterSweepRow>> {
    let cfg = cfg.seeded();
    std::fs::create_dir_all(out_dir).stage("output")?;
    let prepared = prepare(&cfg)?;
    let view = prepared.train.blinded();
    let (mut enc, _) = train_ssl(&view, &cfg.encoder, &cfg.ssl).stage("estimate-domains")?;
    let images: Vec<&Image> = (0..view.len()).map(|i| view.image(i)).collect();
    let features = extract_features(&mut enc, &images, cfg.cluster.normalize_features);
    let truth: Vec<usize> = prepared.train.iter().map(|s| s.domain_label as usize).collect();
    let curve = cluster_count_curve(&features, &truth, &cfg.sweep.cluster_counts, &cfg.cluster.gmm)
        .stage("sweep")?;
    let mut rows = Vec::with_capacity(curve.len());
    for c in curve {
        let hos = if cfg.sweep.train_per_count {
            let est = crate::estimator::cluster_features(&features, c.k, &cfg.cluster.gmm).stage("sweep")?;
            let stage = DomainStage {
                assignments: est.assignments,
                num_domains: c.k,
                estimate: None,
                features: None,
                ssl_log: None,
                nmi_domain: Some(c.nmi_domain),
                agreement: None,
            };
            let mut model = train_stage(&cfg, &prepared, &stage)?;
            evaluate(&mut model, &prepared.test, &prepared.known, Some(c.nmi_domain))?.hos
        } else {
            None
        };
        info!("k={}: NMI {:.3}, HOS {:?}", c.k, c.nmi_domain, hos);
        rows.push(ClusterSweepRow {
            k: c.k,
            nmi_domain: c.nmi_domain,
            log_likelihood: c.log_likelihood,
            hos,
        });
    }
    write_csv(&out_dir.join("cluster_sweep.csv"), &rows).stage("output")?;
    if cfg.plots {
        cluster_sweep_plot(&rows, &out_dir.join("cluster_sweep.png")).stage("plot")?;
    }
    Ok(rows)
}
