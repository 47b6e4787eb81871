//! Quantitative evaluation: PSNR, distribution statistics (skewness, PDF
//! histograms), the two-pass runtime/memory model checks, and the per-ray
//! importance export.

pub mod cost;

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::image::Image;
use crate::math::Vec3;
use cost::IterationCosts;

/// PSNR values above this are reported as the cap in CSV output (MSE = 0
/// yields +inf).
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    Shape(usize, usize, usize, usize),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("empty ledger")]
    EmptyLedger,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// 10*log10(1/MSE) for unit-range images; +inf when MSE = 0.
pub fn psnr(image: &Image, reference: &Image) -> Result<f64, EvalError> {
    if image.width != reference.width || image.height != reference.height {
        return Err(EvalError::Shape(
            image.width,
            image.height,
            reference.width,
            reference.height,
        ));
    }
    let mut sum = 0.0f64;
    for (a, b) in image.pixels.iter().zip(&reference.pixels) {
        for k in 0..3 {
            let d = a[k] as f64 - b[k] as f64;
            sum += d * d;
        }
    }
    let mse = sum / (image.pixels.len() as f64 * 3.0);
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

pub fn cap_psnr(db: f64) -> f64 {
    db.min(PSNR_CAP_DB)
}

/// Adjusted Fisher-Pearson sample skewness.
pub fn skewness(values: &[f64]) -> Result<f64, EvalError> {
    let n = values.len();
    if n < 3 {
        return Err(EvalError::Degenerate(format!("need n >= 3, got {n}")));
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    for &v in values {
        let d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
    }
    m2 /= nf;
    m3 /= nf;
    if m2 <= 0.0 {
        return Err(EvalError::Degenerate("zero variance".into()));
    }
    let g1 = m3 / m2.powf(1.5);
    Ok(g1 * (nf * (nf - 1.0)).sqrt() / (nf - 2.0))
}

/// Normalized PDF histogram; optional geometric bins for heavy-tailed data.
#[derive(Clone, Debug)]
pub struct Histogram {
    /// n_bins + 1 edges, increasing.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// count / (n * bin_width); integrates to 1 over the binned range.
    pub densities: Vec<f64>,
}

impl Histogram {
    pub fn integral(&self) -> f64 {
        self.densities
            .iter()
            .zip(self.edges.windows(2))
            .map(|(d, e)| d * (e[1] - e[0]))
            .sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "bin_left,bin_right,density")?;
        for (i, d) in self.densities.iter().enumerate() {
            writeln!(w, "{},{},{}", self.edges[i], self.edges[i + 1], d)?;
        }
        Ok(())
    }
}

pub fn pdf_histogram(values: &[f64], n_bins: usize, log_scale: bool) -> Histogram {
    assert!(!values.is_empty() && n_bins >= 1);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        if log_scale && v <= 0.0 {
            continue;
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        // log scale with no positive values: fall back to a unit bin at 0
        lo = 0.0;
        hi = 0.0;
    }
    let (edges, n_bins) = if hi <= lo {
        (vec![lo - 0.5, lo + 0.5], 1)
    } else if log_scale {
        let (l0, l1) = (lo.ln(), hi.ln());
        let edges = (0..=n_bins)
            .map(|i| (l0 + (l1 - l0) * i as f64 / n_bins as f64).exp())
            .collect();
        (edges, n_bins)
    } else {
        let edges = (0..=n_bins)
            .map(|i| lo + (hi - lo) * i as f64 / n_bins as f64)
            .collect();
        (edges, n_bins)
    };
    let mut counts = vec![0u64; n_bins];
    let (lo_edge, hi_edge) = (edges[0], edges[n_bins]);
    for &v in values {
        // out-of-range values (log-scale non-positives) clamp into end bins
        let idx = if v <= lo_edge {
            0
        } else if v >= hi_edge {
            n_bins - 1
        } else if log_scale {
            let t = (v.ln() - lo_edge.ln()) / (hi_edge.ln() - lo_edge.ln());
            ((t * n_bins as f64) as usize).min(n_bins - 1)
        } else {
            let t = (v - lo_edge) / (hi_edge - lo_edge);
            ((t * n_bins as f64) as usize).min(n_bins - 1)
        };
        counts[idx] += 1;
    }
    let n = values.len() as f64;
    let densities = counts
        .iter()
        .zip(edges.windows(2))
        .map(|(&c, e)| c as f64 / (n * (e[1] - e[0])))
        .collect();
    Histogram {
        edges,
        counts,
        densities,
    }
}

/// The two-pass cost model for network processing: inference pass over B at
/// one third of a full train step, plus forward+backward over b.
pub fn theoretical_runtime_fraction(batch: u64, hard_batch: u64) -> f64 {
    assert!(batch > 0 && hard_batch <= batch);
    (batch as f64 + 3.0 * hard_batch as f64) / (3.0 * batch as f64)
}

/// Same model with a measured backward/forward MAC multiplier instead of the
/// idealized 2x (backward = mu * forward, full step = (1 + mu) * forward).
pub fn model_runtime_fraction(batch: u64, hard_batch: u64, bwd_fwd_multiplier: f64) -> f64 {
    let m = 1.0 + bwd_fwd_multiplier;
    (batch as f64 + m * hard_batch as f64) / (m * batch as f64)
}

/// Per-iteration ratio of network-phase MACs, mined run over baseline run.
pub fn measured_network_fraction(
    ledger_hm: &[IterationCosts],
    ledger_base: &[IterationCosts],
) -> Result<Vec<f64>, EvalError> {
    if ledger_hm.is_empty() || ledger_base.is_empty() {
        return Err(EvalError::EmptyLedger);
    }
    let n = ledger_hm.len().min(ledger_base.len());
    Ok((0..n)
        .map(|i| ledger_hm[i].network_macs() as f64 / ledger_base[i].network_macs() as f64)
        .collect())
}

/// Writes one ray's sample positions as ASCII PLY with the importance value
/// mapped onto the red channel (and kept verbatim as a float property).
pub fn export_ray_importance(
    positions: &[Vec3<f64>],
    importance: &[f64],
    path: &Path,
) -> Result<(), EvalError> {
    assert_eq!(positions.len(), importance.len());
    let max_g = importance.iter().cloned().fold(0.0f64, f64::max);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", positions.len())?;
    writeln!(w, "property float x")?;
    writeln!(w, "property float y")?;
    writeln!(w, "property float z")?;
    writeln!(w, "property uchar red")?;
    writeln!(w, "property uchar green")?;
    writeln!(w, "property uchar blue")?;
    writeln!(w, "property float importance")?;
    writeln!(w, "end_header")?;
    for (p, &g) in positions.iter().zip(importance) {
        let red = if max_g > 0.0 {
            (g / max_g * 255.0).round() as u8
        } else {
            0
        };
        writeln!(w, "{} {} {} {} 40 40 {}", p[0], p[1], p[2], red, g)?;
    }
    Ok(())
}
