//! Label-free domain estimation: contrastive pretraining on class-destroyed
//! views, then mixture clustering of clean-image features.

pub mod encoder;
pub mod gmm;
pub mod nmi;
pub mod ntxent;
pub mod ssl;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use encoder::{Encoder, EncoderSpec};
pub use gmm::{fit_gmm, GmmConfig, MixtureModel};
pub use nmi::nmi;
pub use ntxent::{nt_xent, NtXentOutput};
pub use ssl::{train_ssl, SslConfig, SslLog};

use crate::dataset::{BlindedView, GdaDataset};
use crate::destructor::GridSpec;
use crate::error::{GdaError, Result};
use crate::image::Image;

const EMBED_BATCH: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEstimate {
    pub assignments: Vec<usize>,
    pub responsibilities: Vec<Vec<f64>>,
    pub model: MixtureModel,
}

impl DomainEstimate {
    pub fn k(&self) -> usize {
        self.model.k
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sample_index", "cluster"])?;
        for (i, c) in self.assignments.iter().enumerate() {
            w.write_record([i.to_string(), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Assignments from a `sample_index,cluster` CSV.
    pub fn read_assignments(path: &Path) -> Result<Vec<usize>> {
        let mut r = csv::Reader::from_path(path)?;
        let mut out = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let idx: usize = rec
                .get(0)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| GdaError::invalid(format!("bad sample_index in row {row}")))?;
            let c: usize = rec
                .get(1)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| GdaError::invalid(format!("bad cluster in row {row}")))?;
            if idx != out.len() {
                return Err(GdaError::invalid("sample indices must be 0..n in order"));
            }
            out.push(c);
        }
        Ok(out)
    }
}

/// Clean-pass features for every sample, optionally L2-normalised.
pub fn extract_features(encoder: &mut Encoder, images: &[&Image], normalize: bool) -> Vec<Vec<f64>> {
    let mut feats = encoder.embed(images, EMBED_BATCH);
    if normalize {
        for f in &mut feats {
            let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                f.iter_mut().for_each(|v| *v /= n);
            }
        }
    }
    feats
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    /// Cluster count; `None` means "use the known domain count".
    pub k: Option<usize>,
    pub normalize_features: bool,
    pub gmm: GmmConfig,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: None,
            normalize_features: true,
            gmm: GmmConfig::default(),
        }
    }
}

pub fn cluster_features(features: &[Vec<f64>], k: usize, gmm: &GmmConfig) -> Result<DomainEstimate> {
    let model = fit_gmm(features, k, gmm)?;
    let responsibilities: Vec<Vec<f64>> = features.iter().map(|x| model.posterior(x).0).collect();
    let assignments = responsibilities
        .iter()
        .map(|r| crate::nn::loss::argmax(r))
        .collect();
    Ok(DomainEstimate {
        assignments,
        responsibilities,
        model,
    })
}

pub fn estimate_domains(
    view: &BlindedView<'_>,
    encoder: &mut Encoder,
    k: usize,
    cfg: &ClusterConfig,
) -> Result<DomainEstimate> {
    let images: Vec<&Image> = (0..view.len()).map(|i| view.image(i)).collect();
    let feats = extract_features(encoder, &images, cfg.normalize_features);
    cluster_features(&feats, k, &cfg.gmm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmiRow {
    pub grid: usize,
    pub nmi_domain: f64,
    pub nmi_class: f64,
}

fn labels(dataset: &GdaDataset) -> (Vec<usize>, Vec<usize>) {
    let d = dataset.iter().map(|s| s.domain_label as usize).collect();
    let c = dataset.iter().map(|s| s.class_label as usize).collect();
    (d, c)
}

/// One encoder per grid; features are clustered once with `k = #domains`
/// (scored against domains) and once with `k = #classes` (scored against
/// classes). Evaluation-only: reads ground truth directly.
pub fn nmi_curve(
    dataset: &GdaDataset,
    grids: &[GridSpec],
    spec: &EncoderSpec,
    ssl: &SslConfig,
    cluster: &ClusterConfig,
) -> Result<Vec<NmiRow>> {
    let (dom, cls) = labels(dataset);
    let nd = dataset.domains().len();
    let nc = dataset.classes().len();
    let blind = dataset.stripped();
    let view = blind.blinded();
    let images: Vec<&Image> = dataset.iter().map(|s| &s.image).collect();
    let mut rows = Vec::with_capacity(grids.len());
    for &grid in grids {
        let cfg = SslConfig {
            grid,
            ..ssl.clone()
        };
        let (mut enc, _) = train_ssl(&view, spec, &cfg)?;
        let feats = extract_features(&mut enc, &images, cluster.normalize_features);
        let by_domain = cluster_features(&feats, nd, &cluster.gmm)?;
        let by_class = cluster_features(&feats, nc, &cluster.gmm)?;
        rows.push(NmiRow {
            grid: grid.get(),
            nmi_domain: nmi(&by_domain.assignments, &dom)?,
            nmi_class: nmi(&by_class.assignments, &cls)?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterCountRow {
    pub k: usize,
    pub nmi_domain: f64,
    pub log_likelihood: f64,
}

/// NMI against true domains for each cluster count, on fixed features.
pub fn cluster_count_curve(
    features: &[Vec<f64>],
    domains: &[usize],
    ks: &[usize],
    gmm: &GmmConfig,
) -> Result<Vec<ClusterCountRow>> {
    ks.iter()
        .map(|&k| {
            let est = cluster_features(features, k, gmm)?;
            Ok(ClusterCountRow {
                k,
                nmi_domain: nmi(&est.assignments, domains)?,
                log_likelihood: est.model.final_log_likelihood,
            })
        })
        .collect()
}
