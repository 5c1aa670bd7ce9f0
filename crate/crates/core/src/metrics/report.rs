use std::fmt::Write;

use super::wilcoxon::wilcoxon_signed_rank;
use super::SliceMetrics;
use crate::error::{Error, Result};

/// Mean and sample standard deviation over the finite values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl MeanStd {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
        let count = v.len();
        if count == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, count };
        }
        let mean = v.iter().sum::<f64>() / count as f64;
        let std = if count > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, count }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodSummary {
    pub name: String,
    pub n_slices: usize,
    /// SSIM as a fraction.
    pub ssim: MeanStd,
    pub psnr: MeanStd,
    pub rmse: MeanStd,
    /// Slices with identical prediction and reference (PSNR `+inf`).
    pub n_infinite_psnr: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseP {
    pub a: String,
    pub b: String,
    /// `None` when too few slices differ.
    pub p_value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub methods: Vec<MethodSummary>,
    /// One entry per unordered method pair, on per-slice PSNR.
    pub pairwise: Vec<PairwiseP>,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn build(per_method: &[(String, Vec<SliceMetrics>)]) -> Result<Self> {
        let Some((_, first)) = per_method.first() else {
            return Err(Error::Invalid("no methods to report".into()));
        };
        if first.is_empty() {
            return Err(Error::Invalid("no slices to report".into()));
        }
        let mut warnings = Vec::new();
        let mut methods = Vec::new();
        for (name, slices) in per_method {
            if slices.len() != first.len() {
                return Err(Error::Shape(format!("method {name} has {} slices, expected {}", slices.len(), first.len())));
            }
            let n_inf = slices.iter().filter(|s| s.psnr.is_infinite()).count();
            if n_inf > 0 {
                warnings.push(format!("{name}: {n_inf} slice(s) with infinite PSNR excluded from the PSNR mean"));
            }
            methods.push(MethodSummary {
                name: name.clone(),
                n_slices: slices.len(),
                ssim: MeanStd::of(slices.iter().map(|s| s.ssim)),
                psnr: MeanStd::of(slices.iter().map(|s| s.psnr)),
                rmse: MeanStd::of(slices.iter().map(|s| s.rmse)),
                n_infinite_psnr: n_inf,
            });
        }
        let mut pairwise = Vec::new();
        for i in 0..per_method.len() {
            for j in i + 1..per_method.len() {
                let a: Vec<f64> = per_method[i].1.iter().map(|s| s.psnr).collect();
                let b: Vec<f64> = per_method[j].1.iter().map(|s| s.psnr).collect();
                let p_value = match wilcoxon_signed_rank(&a, &b) {
                    Ok(p) => Some(p),
                    Err(Error::InsufficientSamples(n)) => {
                        warnings.push(format!("{} vs {}: only {n} differing slices, no p-value", per_method[i].0, per_method[j].0));
                        None
                    }
                    Err(e) => return Err(e),
                };
                pairwise.push(PairwiseP { a: per_method[i].0.clone(), b: per_method[j].0.clone(), p_value });
            }
        }
        Ok(Self { methods, pairwise, warnings })
    }

    /// Symmetric lookup; `None` on the diagonal or when no value exists.
    pub fn p_value(&self, a: &str, b: &str) -> Option<f64> {
        self.pairwise
            .iter()
            .find(|p| (p.a == a && p.b == b) || (p.a == b && p.b == a))
            .and_then(|p| p.p_value)
    }

    pub fn to_table(&self) -> String {
        let fmt = |m: &MeanStd, k: f64, prec: usize| {
            if m.count == 0 {
                "n/a".to_string()
            } else {
                format!("{:.prec$} ± {:.prec$}", m.mean * k, m.std * k)
            }
        };
        let width = self.methods.iter().map(|m| m.name.len()).max().unwrap_or(0).max(6);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>16}  {:>16}  {:>18}  {:>6}", "Method", "SSIM [%]", "PSNR [dB]", "RMSE [HU]", "slices");
        for m in &self.methods {
            let _ = writeln!(
                s,
                "{:<width$}  {:>16}  {:>16}  {:>18}  {:>6}",
                m.name,
                fmt(&m.ssim, 100.0, 2),
                fmt(&m.psnr, 1.0, 2),
                fmt(&m.rmse, 1.0, 2),
                m.n_slices
            );
        }
        if self.methods.len() > 1 {
            let _ = writeln!(s, "\nWilcoxon signed-rank p-values (two-sided, per-slice PSNR)");
            let _ = write!(s, "{:<width$}", "");
            for m in &self.methods {
                let _ = write!(s, "  {:>12}", m.name);
            }
            let _ = writeln!(s);
            for a in &self.methods {
                let _ = write!(s, "{:<width$}", a.name);
                for b in &self.methods {
                    let cell = if a.name == b.name {
                        "-".to_string()
                    } else {
                        self.p_value(&a.name, &b.name).map_or("n/a".into(), |p| format!("{p:.3e}"))
                    };
                    let _ = write!(s, "  {cell:>12}");
                }
                let _ = writeln!(s);
            }
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }

    /// The table's numbers as `key = value` lines.
    pub fn to_sidecar(&self) -> String {
        let mut s = String::new();
        for m in &self.methods {
            let n = &m.name;
            let _ = writeln!(s, "{n}.slices = {}", m.n_slices);
            for (metric, v, k) in [("ssim_percent", &m.ssim, 100.0), ("psnr_db", &m.psnr, 1.0), ("rmse_hu", &m.rmse, 1.0)] {
                let _ = writeln!(s, "{n}.{metric}.mean = {}", v.mean * k);
                let _ = writeln!(s, "{n}.{metric}.std = {}", v.std * k);
            }
            let _ = writeln!(s, "{n}.psnr_db.infinite = {}", m.n_infinite_psnr);
        }
        for a in &self.methods {
            for b in &self.methods {
                if a.name != b.name {
                    let v = self.p_value(&a.name, &b.name).map_or("nan".into(), |p| p.to_string());
                    let _ = writeln!(s, "pvalue.{}.{} = {v}", a.name, b.name);
                }
            }
        }
        s
    }
}
