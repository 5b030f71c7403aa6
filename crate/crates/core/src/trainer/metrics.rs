use crate::geometry::ShapeVector;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 values, got {0}")]
    TooShort(usize),
}

fn check(xs: &[f64], ys: &[f64]) -> Result<(), MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(MetricsError::TooShort(xs.len()));
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    check(xs, ys)?;
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(MetricsError::ZeroVariance("first argument"));
    }
    if syy == 0.0 {
        return Err(MetricsError::ZeroVariance("second argument"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// `sum (pred - gt)^2 / sum (gt - mean(gt))^2`.
pub fn nmse(pred: &[f64], gt: &[f64]) -> Result<f64, MetricsError> {
    check(pred, gt)?;
    let m = mean(gt);
    let var: f64 = gt.iter().map(|g| (g - m).powi(2)).sum();
    if var == 0.0 {
        return Err(MetricsError::ZeroVariance("ground truth"));
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).powi(2)).sum::<f64>() / var)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasureMetrics {
    pub measure: &'static str,
    pub label: &'static str,
    pub r: f64,
    pub nmse: f64,
}

/// Per-measure scores plus their mean and population standard deviation
/// across the five measures.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub measures: Vec<MeasureMetrics>,
    pub r_mean: f64,
    pub r_std: f64,
    pub nmse_mean: f64,
    pub nmse_std: f64,
    pub n_clusters: usize,
}

pub const METRICS_CSV_HEADER: &str = "measure,pearson_r,nmse";

impl MetricsReport {
    pub fn from_predictions(pred: &[ShapeVector], gt: &[ShapeVector]) -> Result<Self, MetricsError> {
        check_len(pred.len(), gt.len())?;
        let mut measures = Vec::with_capacity(ShapeVector::LEN);
        for m in 0..ShapeVector::LEN {
            let p: Vec<f64> = pred.iter().map(|v| v.to_array()[m]).collect();
            let g: Vec<f64> = gt.iter().map(|v| v.to_array()[m]).collect();
            measures.push(MeasureMetrics {
                measure: ShapeVector::NAMES[m],
                label: ShapeVector::LABELS[m],
                r: pearson_r(&p, &g)?,
                nmse: nmse(&p, &g)?,
            });
        }
        let rs: Vec<f64> = measures.iter().map(|m| m.r).collect();
        let ns: Vec<f64> = measures.iter().map(|m| m.nmse).collect();
        let (r_mean, r_std) = super::mean_std(&rs);
        let (nmse_mean, nmse_std) = super::mean_std(&ns);
        Ok(Self {
            measures,
            r_mean,
            r_std,
            nmse_mean,
            nmse_std,
            n_clusters: pred.len(),
        })
    }

    pub fn measure(&self, name: &str) -> Option<&MeasureMetrics> {
        self.measures.iter().find(|m| m.measure == name)
    }

    /// `#`-prefixed `comments`, the header, one row per measure and an
    /// `average` row. The stds of the average go in a comment line.
    pub fn to_csv(&self, comments: &[String]) -> String {
        let mut out = String::new();
        for c in comments {
            writeln!(out, "# {c}").unwrap();
        }
        writeln!(out, "# n_clusters: {}", self.n_clusters).unwrap();
        writeln!(out, "# average std: pearson_r {:.6} nmse {:.6}", self.r_std, self.nmse_std).unwrap();
        writeln!(out, "{METRICS_CSV_HEADER}").unwrap();
        for m in &self.measures {
            writeln!(out, "{},{:.6},{:.6}", m.measure, m.r, m.nmse).unwrap();
        }
        writeln!(out, "average,{:.6},{:.6}", self.r_mean, self.nmse_mean).unwrap();
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<20} {:>18} {:>18}", "Measure", "Pearson r", "nMSE").unwrap();
        for m in &self.measures {
            writeln!(out, "{:<20} {:>18.3} {:>18.3}", m.label, m.r, m.nmse).unwrap();
        }
        let avg = |a: f64, s: f64| format!("{a:.3} ± {s:.3}");
        writeln!(
            out,
            "{:<20} {:>18} {:>18}",
            "Average",
            avg(self.r_mean, self.r_std),
            avg(self.nmse_mean, self.nmse_std)
        )
        .unwrap();
        out
    }
}

fn check_len(a: usize, b: usize) -> Result<(), MetricsError> {
    if a != b {
        Err(MetricsError::LengthMismatch(a, b))
    } else {
        Ok(())
    }
}
