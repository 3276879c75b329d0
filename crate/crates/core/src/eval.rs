//! Normal-estimation and map-reconstruction metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::heightfield::HeightField;

/// Errors of lateral normal estimates. `REL` and the δ accuracies use the
/// shifted values `v + 1`, which stay positive for unit-normal components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalMetrics {
    pub count: usize,
    pub mae: f64,
    pub rel: f64,
    pub rmse: f64,
    /// Percent of pixels with `δ < 1.05^i`, `i = 1, 2, 3`.
    pub delta: [f64; 3],
}

pub fn normal_metrics(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<NormalMetrics> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(Error::invalid("prediction, target and mask lengths differ"));
    }
    let (mut abs, mut sq, mut rel, mut n) = (0.0, 0.0, 0.0, 0usize);
    let mut hits = [0usize; 3];
    for ((&p, &g), _) in pred.iter().zip(gt).zip(mask).filter(|(_, &m)| m) {
        let e = p - g;
        let (ps, gs) = (p + 1.0, g + 1.0);
        abs += e.abs();
        sq += e * e;
        rel += e.abs() / gs.abs();
        let d = (ps / gs).max(gs / ps);
        for (i, h) in hits.iter_mut().enumerate() {
            if d < 1.05f64.powi(i as i32 + 1) {
                *h += 1;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty { what: "normal metrics" });
    }
    let nf = n as f64;
    Ok(NormalMetrics {
        count: n,
        mae: abs / nf,
        rel: rel / nf,
        rmse: (sq / nf).sqrt(),
        delta: hits.map(|h| 100.0 * h as f64 / nf),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub density: Vec<f64>,
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_left,bin_right,density\n");
        for (i, d) in self.density.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", self.edges[i], self.edges[i + 1], d);
        }
        out
    }

    pub fn integral(&self) -> f64 {
        self.density.iter().enumerate().map(|(i, d)| d * (self.edges[i + 1] - self.edges[i])).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapMetrics {
    pub cells: usize,
    pub mae: f64,
    /// Standard deviation of the signed error.
    pub std: f64,
    /// `None` when no cell has non-degenerate gradients on both grids.
    pub cs: Option<f64>,
    pub cs_cells: usize,
    pub histogram: Histogram,
}

pub const HISTOGRAM_BINS: usize = 50;
const GRADIENT_FLOOR: f64 = 1e-8;

/// Central-difference gradient at a node; `None` on the border or next to nodata.
pub fn node_gradient(f: &HeightField, c: usize, r: usize) -> Option<(f64, f64)> {
    if c == 0 || r == 0 || c + 1 >= f.ncols() || r + 1 >= f.nrows() {
        return None;
    }
    let h = 2.0 * f.cell_size();
    let gx = (f.get(c + 1, r)? - f.get(c - 1, r)?) / h;
    let gy = (f.get(c, r + 1)? - f.get(c, r - 1)?) / h;
    Some((gx, gy))
}

fn check_lattice(recon: &HeightField, gt: &HeightField) -> Result<()> {
    if !recon.same_lattice(gt) {
        let (a, b) = (recon.origin(), gt.origin());
        return Err(Error::invalid(format!(
            "grids are not co-registered: origins ({}, {}) vs ({}, {}), offset ({}, {}); sizes {}x{} @ {} vs {}x{} @ {}",
            a.0,
            a.1,
            b.0,
            b.1,
            a.0 - b.0,
            a.1 - b.1,
            recon.ncols(),
            recon.nrows(),
            recon.cell_size(),
            gt.ncols(),
            gt.nrows(),
            gt.cell_size()
        )));
    }
    Ok(())
}

/// Signed errors `recon − gt` over masked cells present in both grids, row-major.
pub fn signed_errors(recon: &HeightField, gt: &HeightField, mask: Option<&[bool]>) -> Result<Vec<f64>> {
    check_lattice(recon, gt)?;
    let n = recon.ncols();
    let mut out = Vec::new();
    for r in 0..recon.nrows() {
        for c in 0..n {
            if mask.is_some_and(|m| !m[r * n + c]) {
                continue;
            }
            if let (Some(a), Some(b)) = (recon.get(c, r), gt.get(c, r)) {
                out.push(a - b);
            }
        }
    }
    Ok(out)
}

/// MAE, STD and gradient cosine similarity over `mask` (row-major, `None` = all cells).
pub fn map_metrics(recon: &HeightField, gt: &HeightField, mask: Option<&[bool]>) -> Result<MapMetrics> {
    check_lattice(recon, gt)?;
    if let Some(m) = mask {
        if m.len() != recon.ncols() * recon.nrows() {
            return Err(Error::invalid("mask size does not match the grid"));
        }
    }
    let errors = signed_errors(recon, gt, mask)?;
    if errors.is_empty() {
        return Err(Error::Empty { what: "overlapping cells" });
    }
    let nf = errors.len() as f64;
    let mae = errors.iter().map(|e| e.abs()).sum::<f64>() / nf;
    let mean = errors.iter().sum::<f64>() / nf;
    let std = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / nf).sqrt();

    let n = recon.ncols();
    let (mut cs_sum, mut cs_cells) = (0.0, 0usize);
    for r in 0..recon.nrows() {
        for c in 0..n {
            if mask.is_some_and(|m| !m[r * n + c]) {
                continue;
            }
            let (Some(a), Some(b)) = (node_gradient(recon, c, r), node_gradient(gt, c, r)) else {
                continue;
            };
            let (na, nb) = (a.0.hypot(a.1), b.0.hypot(b.1));
            if na < GRADIENT_FLOOR || nb < GRADIENT_FLOOR {
                continue;
            }
            cs_sum += (a.0 * b.0 + a.1 * b.1) / (na * nb);
            cs_cells += 1;
        }
    }
    let cs = (cs_cells > 0).then(|| cs_sum / cs_cells as f64);
    Ok(MapMetrics { cells: errors.len(), mae, std, cs, cs_cells, histogram: histogram(&errors, HISTOGRAM_BINS) })
}

/// Density histogram of `values`; a zero-width spread collapses to one bin.
pub fn histogram(values: &[f64], nbins: usize) -> Histogram {
    if values.is_empty() || nbins == 0 {
        return Histogram { edges: vec![0.0], density: vec![] };
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        let w = 1e-6;
        return Histogram { edges: vec![lo - 0.5 * w, lo + 0.5 * w], density: vec![1.0 / w] };
    }
    let width = (hi - lo) / nbins as f64;
    let mut counts = vec![0usize; nbins];
    for v in values {
        let i = (((v - lo) / width) as usize).min(nbins - 1);
        counts[i] += 1;
    }
    let total = values.len() as f64;
    Histogram {
        edges: (0..=nbins).map(|i| lo + i as f64 * width).collect(),
        density: counts.iter().map(|&c| c as f64 / (total * width)).collect(),
    }
}

pub fn error_pdf(recon: &HeightField, gt: &HeightField, nbins: usize) -> Result<Histogram> {
    let errors = signed_errors(recon, gt, None)?;
    if errors.is_empty() {
        return Err(Error::Empty { what: "overlapping cells" });
    }
    Ok(histogram(&errors, nbins))
}

pub fn map_metrics_csv(m: &MapMetrics) -> String {
    let cs = m.cs.map_or_else(|| "nan".to_string(), |v| format!("{v:.9}"));
    format!("cells,mae,std,cs,cs_cells\n{},{:.9},{:.9},{},{}\n", m.cells, m.mae, m.std, cs, m.cs_cells)
}

pub fn map_metrics_text(m: &MapMetrics) -> String {
    let cs = m.cs.map_or_else(|| "undefined (no cells with non-zero gradients)".to_string(), |v| format!("{v:.4}"));
    format!("cells evaluated : {}\nMAE             : {:.4} m\nSTD             : {:.4} m\nCS              : {cs} over {} cells\n", m.cells, m.mae, m.std, m.cs_cells)
}

pub fn normal_metrics_csv(m: &NormalMetrics) -> String {
    format!(
        "count,mae,rel,rmse,delta1,delta2,delta3\n{},{:.9},{:.9},{:.9},{:.6},{:.6},{:.6}\n",
        m.count, m.mae, m.rel, m.rmse, m.delta[0], m.delta[1], m.delta[2]
    )
}

/// Writes `<stem>.csv`, `<stem>.txt` and `<stem>_pdf.csv` next to each other.
pub fn write_map_report(m: &MapMetrics, stem: impl AsRef<Path>) -> Result<()> {
    let stem = stem.as_ref();
    let with = |suffix: &str| {
        let mut s = stem.as_os_str().to_owned();
        s.push(suffix);
        std::path::PathBuf::from(s)
    };
    fs::write(with(".csv"), map_metrics_csv(m))?;
    fs::write(with(".txt"), map_metrics_text(m))?;
    fs::write(with("_pdf.csv"), m.histogram.to_csv())?;
    Ok(())
}
