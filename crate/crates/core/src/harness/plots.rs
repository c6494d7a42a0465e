//! PNG plots drawn directly into RGB buffers: confusion heatmap, NMI-vs-grid
//! curve, PCA scatter, and the cluster-count sweep curve.

use std::path::Path;

use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{GdaError, Result};
use crate::estimator::NmiRow;
use crate::metrics::MetricsReport;

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];
const WHITE: [u8; 3] = [255, 255, 255];
const BLACK: [u8; 3] = [0, 0, 0];
const GRID: [u8; 3] = [220, 220, 220];

/// 3x5 glyphs for tick labels; rows top to bottom, 3 bits each.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        _ => return None,
    })
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new(w: u32, h: u32) -> Self {
        Self {
            img: RgbImage::from_pixel(w, h, Rgb(WHITE)),
        }
    }

    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }

    fn rect(&mut self, x: i64, y: i64, w: i64, h: i64, c: [u8; 3]) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.put(xx, yy, c);
            }
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
        for s in 0..=steps {
            let x = x0 + (x1 - x0) * s / steps;
            let y = y0 + (y1 - y0) * s / steps;
            self.rect(x - 1, y - 1, 2, 2, c);
        }
    }

    /// Text at scale 2, top-left anchored; unsupported characters are skipped.
    fn text(&mut self, x: i64, y: i64, s: &str, c: [u8; 3]) {
        let mut cx = x;
        for ch in s.chars() {
            if let Some(rows) = glyph(ch) {
                for (r, bits) in rows.iter().enumerate() {
                    for b in 0..3 {
                        if bits & (4 >> b) != 0 {
                            self.rect(cx + 2 * b as i64, y + 2 * r as i64, 2, 2, c);
                        }
                    }
                }
            }
            cx += 8;
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.img.save(path)?;
        Ok(())
    }
}

fn text_width(s: &str) -> i64 {
    8 * s.chars().count() as i64
}

fn fmt_tick(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.2}")
    }
}

/// Cells shaded by row-normalised share, each labeled with its count.
pub fn confusion_heatmap(counts: &[Vec<u64>], path: &Path) -> Result<()> {
    let n = counts.len();
    if n == 0 {
        return Err(GdaError::invalid("empty confusion matrix"));
    }
    let cell = 40i64;
    let margin = 30i64;
    let size = (2 * margin + cell * n as i64) as u32;
    let mut c = Canvas::new(size, size);
    for (i, row) in counts.iter().enumerate() {
        let total: u64 = row.iter().sum();
        for (j, &v) in row.iter().enumerate() {
            let share = if total > 0 { v as f64 / total as f64 } else { 0.0 };
            let shade = |base: u8| (255.0 - share * (255.0 - f64::from(base))) as u8;
            let colour = [shade(8), shade(48), shade(107)];
            let (x, y) = (margin + j as i64 * cell, margin + i as i64 * cell);
            c.rect(x, y, cell - 1, cell - 1, colour);
            let label = v.to_string();
            let ink = if share > 0.5 { WHITE } else { BLACK };
            c.text(x + (cell - text_width(&label)) / 2, y + cell / 2 - 5, &label, ink);
        }
        let idx = i.to_string();
        c.text(margin - 4 - text_width(&idx), margin + i as i64 * cell + cell / 2 - 5, &idx, BLACK);
        c.text(margin + i as i64 * cell + cell / 2 - 4, margin - 14, &idx, BLACK);
    }
    c.save(path)
}

pub struct Series {
    pub points: Vec<(f64, f64)>,
    pub colour: usize,
}

/// Line chart with markers; x ticks at every data x, y ticks at 5 levels.
pub fn line_chart(series: &[Series], path: &Path) -> Result<()> {
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if pts.is_empty() {
        return Err(GdaError::invalid("nothing to plot"));
    }
    let (w, h, left, bottom, top, right) = (480i64, 320i64, 60i64, 40i64, 20i64, 20i64);
    let xmin = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let xmax = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let mut ymin = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).min(0.0);
    let mut ymax = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).max(1.0);
    if ymax - ymin < 1e-12 {
        ymin -= 0.5;
        ymax += 0.5;
    }
    let xspan = if xmax > xmin { xmax - xmin } else { 1.0 };
    let px = |x: f64| left + ((x - xmin) / xspan * (w - left - right) as f64) as i64;
    let py = |y: f64| h - bottom - ((y - ymin) / (ymax - ymin) * (h - bottom - top) as f64) as i64;
    let mut c = Canvas::new(w as u32, h as u32);
    for t in 0..=4 {
        let y = ymin + (ymax - ymin) * t as f64 / 4.0;
        c.line((left, py(y)), (w - right, py(y)), GRID);
        let label = fmt_tick(y);
        c.text(left - 6 - text_width(&label), py(y) - 5, &label, BLACK);
    }
    let mut xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    for &x in &xs {
        let label = fmt_tick(x);
        c.text(px(x) - text_width(&label) / 2, h - bottom + 8, &label, BLACK);
    }
    c.line((left, top), (left, h - bottom), BLACK);
    c.line((left, h - bottom), (w - right, h - bottom), BLACK);
    for s in series {
        let colour = PALETTE[s.colour % PALETTE.len()];
        for pair in s.points.windows(2) {
            c.line((px(pair[0].0), py(pair[0].1)), (px(pair[1].0), py(pair[1].1)), colour);
        }
        for &(x, y) in &s.points {
            c.rect(px(x) - 3, py(y) - 3, 7, 7, colour);
        }
    }
    c.save(path)
}

/// Top-two principal components of `features` (rows are samples).
pub fn pca_2d(features: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    let n = features.len();
    let d = features.first().map_or(0, Vec::len);
    if n < 2 || d == 0 {
        return Err(GdaError::invalid("PCA needs at least two non-empty rows"));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = x.row_mean();
    let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |k: usize| -> Vec<f64> {
        let Some(&col) = order.get(k) else {
            return vec![0.0; d];
        };
        let v: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
        // Fix the sign so the largest-magnitude entry is positive.
        let pivot = v.iter().copied().fold(0.0, |m: f64, x| if x.abs() > m.abs() { x } else { m });
        v.iter().map(|x| if pivot < 0.0 { -x } else { *x }).collect()
    };
    let (a, b) = (axis(0), axis(1));
    Ok((0..n)
        .map(|i| {
            let row = centred.row(i);
            let p = row.iter().zip(&a).map(|(x, w)| x * w).sum();
            let q = row.iter().zip(&b).map(|(x, w)| x * w).sum();
            (p, q)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaRow {
    pub sample_index: usize,
    pub pc1: f64,
    pub pc2: f64,
    pub domain: u32,
    pub class: u32,
}

pub fn write_pca_csv(path: &Path, features: &[Vec<f64>], domains: &[u32], classes: &[u32]) -> Result<()> {
    let pts = pca_2d(features)?;
    let mut w = csv::Writer::from_path(path)?;
    for (i, (p, q)) in pts.into_iter().enumerate() {
        w.serialize(PcaRow {
            sample_index: i,
            pc1: p,
            pc2: q,
            domain: domains[i],
            class: classes[i],
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Two panels: points coloured by domain (left) and by class (right).
pub fn pca_scatter(rows: &[PcaRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(GdaError::invalid("no PCA rows"));
    }
    let panel = 320i64;
    let pad = 10i64;
    let mut c = Canvas::new((2 * panel + 3 * pad) as u32, (panel + 2 * pad) as u32);
    let lo = |f: fn(&PcaRow) -> f64| rows.iter().map(f).fold(f64::INFINITY, f64::min);
    let hi = |f: fn(&PcaRow) -> f64| rows.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
    let (x0, x1, y0, y1) = (lo(|r| r.pc1), hi(|r| r.pc1), lo(|r| r.pc2), hi(|r| r.pc2));
    let scale = |v: f64, a: f64, b: f64| if b > a { (v - a) / (b - a) } else { 0.5 };
    for (p, colour_of) in [(0i64, (|r: &PcaRow| r.domain) as fn(&PcaRow) -> u32), (1, |r: &PcaRow| r.class)] {
        let ox = pad + p * (panel + pad);
        c.rect(ox, pad, panel, panel, [248, 248, 248]);
        for r in rows {
            let x = ox + 4 + (scale(r.pc1, x0, x1) * (panel - 8) as f64) as i64;
            let y = pad + 4 + ((1.0 - scale(r.pc2, y0, y1)) * (panel - 8) as f64) as i64;
            c.rect(x - 1, y - 1, 3, 3, PALETTE[colour_of(r) as usize % PALETTE.len()]);
        }
    }
    c.save(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSweepRow {
    pub k: usize,
    pub nmi_domain: f64,
    pub log_likelihood: f64,
    pub hos: Option<f64>,
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(GdaError::from)).collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn nmi_curve_plot(rows: &[NmiRow], path: &Path) -> Result<()> {
    line_chart(
        &[
            Series {
                points: rows.iter().map(|r| (r.grid as f64, r.nmi_domain)).collect(),
                colour: 0,
            },
            Series {
                points: rows.iter().map(|r| (r.grid as f64, r.nmi_class)).collect(),
                colour: 1,
            },
        ],
        path,
    )
}

/// NMI (blue) and, when present, HOS / 100 (orange) against cluster count.
pub fn cluster_sweep_plot(rows: &[ClusterSweepRow], path: &Path) -> Result<()> {
    let mut series = vec![Series {
        points: rows.iter().map(|r| (r.k as f64, r.nmi_domain)).collect(),
        colour: 0,
    }];
    let hos: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.hos.map(|h| (r.k as f64, h / 100.0)))
        .collect();
    if !hos.is_empty() {
        series.push(Series { points: hos, colour: 1 });
    }
    line_chart(&series, path)
}

/// Render every plot whose source artifact exists in `dir`. Errors when
/// none does.
pub fn plot_run(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut made = Vec::new();
    let metrics = dir.join("metrics.json");
    if metrics.exists() {
        let report: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&metrics)?)?;
        let out = dir.join("confusion.png");
        confusion_heatmap(&report.confusion, &out)?;
        made.push(out);
    }
    let pca = dir.join("pca.csv");
    if pca.exists() {
        let out = dir.join("pca.png");
        pca_scatter(&read_csv::<PcaRow>(&pca)?, &out)?;
        made.push(out);
    }
    let nmi = dir.join("nmi_curve.csv");
    if nmi.exists() {
        let out = dir.join("nmi_curve.png");
        nmi_curve_plot(&read_csv::<NmiRow>(&nmi)?, &out)?;
        made.push(out);
    }
    let sweep = dir.join("cluster_sweep.csv");
    if sweep.exists() {
        let out = dir.join("cluster_sweep.png");
        cluster_sweep_plot(&read_csv::<ClusterSweepRow>(&sweep)?, &out)?;
        made.push(out);
    }
    if made.is_empty() {
        return Err(GdaError::invalid(format!(
            "no plottable artifacts (metrics.json, pca.csv, nmi_curve.csv, cluster_sweep.csv) in {}",
            dir.display()
        )));
    }
    Ok(made)
}
