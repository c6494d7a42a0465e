//! Sample records, datasets, the on-disk manifest, and the blinded access
//! layer used by every training stage.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{GdaError, LabelKind, Result};
use crate::image::Image;

/// One observation: image, ground-truth labels and their training visibility.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub class_label: u32,
    pub domain_label: u32,
    pub class_visible: bool,
    pub domain_visible: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GdaDataset {
    samples: Vec<Sample>,
}

impl GdaDataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [Sample] {
        &mut self.samples
    }

    pub fn get(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn push(&mut self, s: Sample) {
        self.samples.push(s);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter()
    }

    pub fn subset(&self, indices: &[usize]) -> GdaDataset {
        GdaDataset::new(indices.iter().map(|&i| self.samples[i].clone()).collect())
    }

    pub fn domains(&self) -> BTreeSet<u32> {
        self.samples.iter().map(|s| s.domain_label).collect()
    }

    pub fn classes(&self) -> BTreeSet<u32> {
        self.samples.iter().map(|s| s.class_label).collect()
    }

    /// Same records with every visibility flag cleared.
    pub fn stripped(&self) -> GdaDataset {
        let mut out = self.clone();
        for s in &mut out.samples {
            s.class_visible = false;
            s.domain_visible = false;
        }
        out
    }

    pub fn blinded(&self) -> BlindedView<'_> {
        BlindedView::new(self)
    }
}

/// Read access to a dataset that refuses to reveal hidden labels.
///
/// Every label read attempt is counted, successful or not, so stages that
/// must stay unsupervised can be audited.
#[derive(Debug)]
pub struct BlindedView<'a> {
    dataset: &'a GdaDataset,
    label_reads: AtomicUsize,
}

impl<'a> BlindedView<'a> {
    pub fn new(dataset: &'a GdaDataset) -> Self {
        Self {
            dataset,
            label_reads: AtomicUsize::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    pub fn image(&self, i: usize) -> &'a Image {
        &self.dataset.samples[i].image
    }

    pub fn class_visible(&self, i: usize) -> bool {
        self.dataset.samples[i].class_visible
    }

    pub fn domain_visible(&self, i: usize) -> bool {
        self.dataset.samples[i].domain_visible
    }

    pub fn class_label(&self, i: usize) -> Result<u32> {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        let s = &self.dataset.samples[i];
        if s.class_visible {
            Ok(s.class_label)
        } else {
            Err(GdaError::HiddenLabel {
                index: i,
                kind: LabelKind::Class,
            })
        }
    }

    pub fn domain_label(&self, i: usize) -> Result<u32> {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        let s = &self.dataset.samples[i];
        if s.domain_visible {
            Ok(s.domain_label)
        } else {
            Err(GdaError::HiddenLabel {
                index: i,
                kind: LabelKind::Domain,
            })
        }
    }

    /// Visible class label, or `None` when hidden.
    pub fn class_label_opt(&self, i: usize) -> Option<u32> {
        self.class_label(i).ok()
    }

    /// Number of label reads attempted through this view.
    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::Relaxed)
    }

    pub fn all_domains_visible(&self) -> bool {
        self.dataset.samples.iter().all(|s| s.domain_visible)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestRow {
    pub path: String,
    pub class_label: u32,
    pub domain_label: u32,
    pub class_visible: u8,
    pub domain_visible: u8,
}

fn flag(v: u8, row: usize, name: &str) -> Result<bool> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(GdaError::invalid(format!(
            "manifest row {row}: {name} must be 0 or 1, got {other}"
        ))),
    }
}

pub const MANIFEST_HEADER: [&str; 5] = [
    "path",
    "class_label",
    "domain_label",
    "class_visible",
    "domain_visible",
];

/// Write `dataset` as PNG files under `dir/images/` plus `dir/<manifest_name>`.
pub fn write_dataset(dataset: &GdaDataset, dir: &Path, manifest_name: &str) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir)?;
    let mut paths = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.iter().enumerate() {
        let rel = format!("images/{i:06}.png");
        s.image.save_png(&dir.join(&rel))?;
        paths.push(rel);
    }
    let manifest = dir.join(manifest_name);
    write_manifest(dataset, &paths, &manifest)?;
    Ok(manifest)
}

/// Write manifest rows for already-stored images; `paths` are relative to
/// the manifest's directory.
pub fn write_manifest(dataset: &GdaDataset, paths: &[String], manifest: &Path) -> Result<()> {
    if paths.len() != dataset.len() {
        return Err(GdaError::invalid("one path per sample required"));
    }
    let mut w = csv::Writer::from_path(manifest)?;
    for (s, p) in dataset.iter().zip(paths) {
        w.serialize(ManifestRow {
            path: p.clone(),
            class_label: s.class_label,
            domain_label: s.domain_label,
            class_visible: u8::from(s.class_visible),
            domain_visible: u8::from(s.domain_visible),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Manifest rows, validated against the expected header.
pub fn read_manifest_rows(manifest: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(manifest)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != MANIFEST_HEADER {
        return Err(GdaError::invalid(format!(
            "manifest header must be `{}`, got `{}`",
            MANIFEST_HEADER.join(","),
            header.join(",")
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(GdaError::from))
        .collect()
}

/// Load a manifest and every image it references.
pub fn read_dataset(manifest: &Path) -> Result<(GdaDataset, Vec<String>)> {
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let rows = read_manifest_rows(manifest)?;
    let mut samples = Vec::with_capacity(rows.len());
    let mut paths = Vec::with_capacity(rows.len());
    for (i, row) in rows.into_iter().enumerate() {
        let image = Image::load_png(&base.join(&row.path))?;
        samples.push(Sample {
            image,
            class_label: row.class_label,
            domain_label: row.domain_label,
            class_visible: flag(row.class_visible, i, "class_visible")?,
            domain_visible: flag(row.domain_visible, i, "domain_visible")?,
        });
        paths.push(row.path);
    }
    Ok((GdaDataset::new(samples), paths))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample(y: u32, d: u32, vy: bool, vd: bool) -> Sample {
        Sample {
            image: Image::filled(1, 2, 2, 128.0 / 255.0).unwrap(),
            class_label: y,
            domain_label: d,
            class_visible: vy,
            domain_visible: vd,
        }
    }

    #[test]
    fn blinded_view_refuses_hidden_labels() {
        let ds = GdaDataset::new(vec![sample(3, 1, true, false), sample(4, 0, false, true)]);
        let v = ds.blinded();
        assert_eq!(v.class_label(0).unwrap(), 3);
        assert!(matches!(
            v.domain_label(0),
            Err(GdaError::HiddenLabel { index: 0, kind: LabelKind::Domain })
        ));
        assert!(v.class_label(1).is_err());
        assert_eq!(v.domain_label(1).unwrap(), 0);
        assert_eq!(v.label_reads(), 4);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = GdaDataset::new(vec![sample(0, 0, true, true), sample(7, 2, false, false)]);
        let m = write_dataset(&ds, dir.path(), "manifest.csv").unwrap();
        let text = fs::read_to_string(&m).unwrap();
        assert!(text.starts_with("path,class_label,domain_label,class_visible,domain_visible\n"));
        assert!(text.contains("images/000001.png,7,2,0,0"));
        let (back, paths) = read_dataset(&m).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(paths[0], "images/000000.png");
        assert_eq!(back.get(1).class_label, 7);
        assert!(!back.get(1).class_visible);
        assert_eq!(back.get(0).image, ds.get(0).image);
    }

    #[test]
    fn manifest_rejects_non_binary_flags() {
        let dir = tempfile::tempdir().unwrap();
        let ds = GdaDataset::new(vec![sample(0, 0, true, true)]);
        let m = write_dataset(&ds, dir.path(), "m.csv").unwrap();
        fs::write(
            &m,
            "path,class_label,domain_label,class_visible,domain_visible\nimages/000000.png,0,0,2,1\n",
        )
        .unwrap();
        assert!(read_dataset(&m).is_err());
    }
}
