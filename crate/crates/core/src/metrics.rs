//! PSNR and normalised error maps.

use std::fmt::Write as _;

use crate::grid::{Image, Sinogram};
use crate::{Error, Result};

/// Array types the error maps operate on.
pub trait Field: Clone {
    fn values(&self) -> &[f32];
    fn with_values(&self, values: Vec<f32>) -> Self;
    fn shape(&self) -> (usize, usize);
}

impl Field for Image {
    fn values(&self) -> &[f32] {
        self.data()
    }

    fn with_values(&self, values: Vec<f32>) -> Self {
        Image::from_vec(self.size(), self.size(), values).expect("same shape")
    }

    fn shape(&self) -> (usize, usize) {
        (self.size(), self.size())
    }
}

impl Field for Sinogram {
    fn values(&self) -> &[f32] {
        self.data()
    }

    fn with_values(&self, values: Vec<f32>) -> Self {
        Sinogram::from_vec(*self.geometry(), values).expect("same shape")
    }

    fn shape(&self) -> (usize, usize) {
        (self.geometry().n_angles(), self.geometry().n_bins())
    }
}

fn check_shapes<F: Field>(pred: &F, gt: &F) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!("{:?}", gt.shape()), format!("{:?}", pred.shape())));
    }
    Ok(())
}

/// `10·log10(range² / MSE)` with `range = max(gt) − min(gt)`.
/// Identical inputs give `+∞`.
pub fn psnr(pred: &[f32], gt: &[f32]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("{} values", gt.len()), format!("{}", pred.len())));
    }
    if gt.is_empty() {
        return Err(Error::invalid("PSNR of empty arrays"));
    }
    let (lo, hi) =
        gt.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
    let range = hi - lo;
    if range <= 0.0 {
        return Err(Error::invalid("PSNR undefined for a constant reference"));
    }
    let mse = pred.iter().zip(gt).map(|(&p, &g)| (p as f64 - g as f64).powi(2)).sum::<f64>() / gt.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / mse).log10())
}

/// `|pred − gt|` scaled by its own maximum; all zeros when identical.
pub fn abs_error_map<F: Field>(pred: &F, gt: &F) -> Result<F> {
    check_shapes(pred, gt)?;
    let err: Vec<f64> = pred.values().iter().zip(gt.values()).map(|(&p, &g)| (p as f64 - g as f64).abs()).collect();
    let max = err.iter().cloned().fold(0.0, f64::max);
    let out = err.iter().map(|&e| if max > 0.0 { (e / max) as f32 } else { 0.0 }).collect();
    Ok(gt.with_values(out))
}

/// `gt − pred` mapped affinely so that its minimum is 0 and maximum 1;
/// a constant difference maps to 0.5.
pub fn diff_map<F: Field>(pred: &F, gt: &F) -> Result<F> {
    check_shapes(pred, gt)?;
    let diff: Vec<f64> = pred.values().iter().zip(gt.values()).map(|(&p, &g)| g as f64 - p as f64).collect();
    let (lo, hi) = diff.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let out = diff.iter().map(|&d| if hi > lo { ((d - lo) / (hi - lo)) as f32 } else { 0.5 }).collect();
    Ok(gt.with_values(out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    /// MLEM from the complete sinogram.
    Full,
    /// Masked MLEM from the limited-angle sinogram.
    LimitedAngle,
    /// MLEM from the inpainted (merged) sinogram.
    Inpainted,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::LimitedAngle => "la",
            Method::Inpainted => "inpainted",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleScores {
    pub sample: String,
    pub full: f64,
    pub la: f64,
    pub inpainted: f64,
}

impl SampleScores {
    pub fn get(&self, m: Method) -> f64 {
        match m {
            Method::Full => self.full,
            Method::LimitedAngle => self.la,
            Method::Inpainted => self.inpainted,
        }
    }
}

/// Statistics over the finite PSNR values of one method.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub n_finite: usize,
    pub n_infinite: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub samples: Vec<SampleScores>,
}

impl EvalReport {
    /// `None` when no sample has a finite score.
    pub fn aggregate(&self, m: Method) -> Option<Aggregate> {
        let mut vals: Vec<f64> = self.samples.iter().map(|s| s.get(m)).filter(|v| v.is_finite()).collect();
        let n_infinite = self.samples.iter().filter(|s| s.get(m).is_infinite()).count();
        if vals.is_empty() {
            return None;
        }
        vals.sort_by(f64::total_cmp);
        let n = vals.len();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let median = if n % 2 == 1 { vals[n / 2] } else { 0.5 * (vals[n / 2 - 1] + vals[n / 2]) };
        let std =
            if n > 1 { (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Some(Aggregate { mean, median, std, n_finite: n, n_infinite })
    }

    /// `sample,method,psnr_db` rows for `methods`, followed by `mean`,
    /// `median` and `std` rows per method. Infinite scores print as `inf`.
    pub fn to_csv(&self, methods: &[Method]) -> String {
        let mut out = String::from("sample,method,psnr_db\n");
        for s in &self.samples {
            for &m in methods {
                let _ = writeln!(out, "{},{},{}", s.sample, m.name(), fmt_db(s.get(m)));
            }
        }
        for &m in methods {
            if let Some(a) = self.aggregate(m) {
                let _ = writeln!(out, "mean,{},{:.4}", m.name(), a.mean);
                let _ = writeln!(out, "median,{},{:.4}", m.name(), a.median);
                let _ = writeln!(out, "std,{},{:.4}", m.name(), a.std);
            }
        }
        out
    }

    pub fn summary(&self, title: &str, methods: &[Method]) -> String {
        let mut out = format!("{title} ({} samples)\n", self.samples.len());
        for &m in methods {
            match self.aggregate(m) {
                Some(a) => {
                    let _ = writeln!(
                        out,
                        "  {:<10} mean {:8.3} dB  median {:8.3} dB  std {:7.3} dB  ({} infinite)",
                        m.name(),
                        a.mean,
                        a.median,
                        a.std,
                        a.n_infinite
                    );
                }
                None => {
                    let _ = writeln!(out, "  {:<10} all scores infinite", m.name());
                }
            }
        }
        out
    }
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}
