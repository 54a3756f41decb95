//! Saliency evaluation: MAE, adaptive F-measure, PR curve, S-measure and
//! E-measure, with CSV reporting.
//!
//! Predictions are maps in `[0, 1]`, ground truths are binary `{0, 1}` maps,
//! both row-major.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BETA2: f64 = 0.3;
pub const ALPHA: f64 = 0.5;
pub const PR_THRESHOLDS: usize = 256;

fn check_pair(s: &[f64], g: &[f64]) -> Result<()> {
    if s.len() != g.len() {
        return Err(Error::dim(
            "metric",
            format!("prediction has {} cells, ground truth {}", s.len(), g.len()),
        ));
    }
    if s.is_empty() {
        return Err(Error::dim("metric", "empty maps"));
    }
    if let Some(v) = s.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("prediction value {v} outside [0, 1]")));
    }
    if let Some(v) = g.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Domain(format!("ground truth value {v} is not binary")));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Flattens a single-map tensor to `f64`.
pub fn map_values<S: Scalar>(t: &Tensor<S>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

pub fn mae(s: &[f64], g: &[f64]) -> Result<f64> {
    check_pair(s, g)?;
    Ok(s.iter().zip(g).map(|(a, b)| (a - b).abs()).sum::<f64>() / s.len() as f64)
}

/// `min(2 * mean(S), 1)`.
pub fn adaptive_threshold(s: &[f64]) -> f64 {
    (2.0 * mean(s)).min(1.0)
}

/// `(tp, fp, fn)` for the pixels selected by `positive`.
fn precision_recall(s: &[f64], g: &[f64], positive: impl Fn(f64) -> bool) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&sv, &gv) in s.iter().zip(g) {
        match (positive(sv), gv == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    (tp, fp, fn_)
}

fn ratio(num: usize, den: usize, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

fn f_from(p: f64, r: f64, beta2: f64) -> f64 {
    let den = beta2 * p + r;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * p * r / den
    }
}

/// F-measure at the adaptive threshold.
pub fn f_measure(s: &[f64], g: &[f64], beta2: f64) -> Result<f64> {
    check_pair(s, g)?;
    if !g.contains(&1.0) {
        return Err(Error::Domain("F-measure needs a non-empty ground truth".into()));
    }
    let tau = adaptive_threshold(s);
    let (tp, fp, fn_) = precision_recall(s, g, |v| v >= tau);
    Ok(f_from(ratio(tp, tp + fp, 1.0), ratio(tp, tp + fn_, 0.0), beta2))
}

/// Confusion counts at thresholds `t / 255`, `t = 0..=255`, accumulated
/// over a dataset. A pixel is positive when its score exceeds the threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct PrAccumulator {
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
}

impl Default for PrAccumulator {
    fn default() -> Self {
        Self {
            tp: vec![0; PR_THRESHOLDS],
            fp: vec![0; PR_THRESHOLDS],
            fn_: vec![0; PR_THRESHOLDS],
        }
    }
}

impl PrAccumulator {
    pub fn add(&mut self, s: &[f64], g: &[f64]) -> Result<()> {
        check_pair(s, g)?;
        for t in 0..PR_THRESHOLDS {
            let th = t as f64 / 255.0;
            let (tp, fp, fn_) = precision_recall(s, g, |v| v > th);
            self.tp[t] += tp as u64;
            self.fp[t] += fp as u64;
            self.fn_[t] += fn_ as u64;
        }
        Ok(())
    }

    /// `(precision, recall)` per threshold.
    pub fn curve(&self) -> Vec<(f64, f64)> {
        (0..PR_THRESHOLDS)
            .map(|t| {
                let (tp, fp, fn_) = (self.tp[t], self.fp[t], self.fn_[t]);
                let p = if tp + fp == 0 {
                    1.0
                } else {
                    tp as f64 / (tp + fp) as f64
                };
                let r = if tp + fn_ == 0 {
                    0.0
                } else {
                    tp as f64 / (tp + fn_) as f64
                };
                (p, r)
            })
            .collect()
    }
}

pub fn pr_curve<'a>(pairs: impl IntoIterator<Item = (&'a [f64], &'a [f64])>) -> Result<Vec<(f64, f64)>> {
    let mut acc = PrAccumulator::default();
    let mut any = false;
    for (s, g) in pairs {
        acc.add(s, g)?;
        any = true;
    }
    if !any {
        return Err(Error::Usage("PR curve of an empty dataset".into()));
    }
    Ok(acc.curve())
}

/// Structure measure `alpha * S_object + (1 - alpha) * S_region`.
pub fn s_measure(s: &[f64], g: &[f64], h: usize, w: usize, alpha: f64) -> Result<f64> {
    check_pair(s, g)?;
    if s.len() != h * w {
        return Err(Error::dim("s_measure", format!("{} cells for a {h}x{w} map", s.len())));
    }
    let y = mean(g);
    if y == 0.0 {
        return Ok(1.0 - mean(s));
    }
    if y == 1.0 {
        return Ok(mean(s));
    }
    let q = alpha * s_object(s, g) + (1.0 - alpha) * s_region(s, g, h, w);
    Ok(q.max(0.0))
}

fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let x = mean(values);
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - x).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sd + f64::EPSILON)
}

fn s_object(s: &[f64], g: &[f64]) -> f64 {
    let fg: Vec<f64> = s.iter().zip(g).filter(|(_, &gv)| gv == 1.0).map(|(&v, _)| v).collect();
    let bg: Vec<f64> = s
        .iter()
        .zip(g)
        .filter(|(_, &gv)| gv == 0.0)
        .map(|(&v, _)| 1.0 - v)
        .collect();
    let u = mean(g);
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// 1-based split point: columns `1..=x` and rows `1..=y` form the top-left block.
fn centroid(g: &[f64], h: usize, w: usize) -> (usize, usize) {
    let total: f64 = g.iter().sum();
    if total == 0.0 {
        return ((w as f64 / 2.0).round() as usize, (h as f64 / 2.0).round() as usize);
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            let v = g[r * w + c];
            sx += v * (c + 1) as f64;
            sy += v * (r + 1) as f64;
        }
    }
    ((sx / total).round() as usize, (sy / total).round() as usize)
}

fn block(m: &[f64], w: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Vec<f64> {
    rows.flat_map(|r| cols.clone().map(move |c| m[r * w + c])).collect()
}

fn ssim(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (mean(x), mean(y));
    let denom = n - 1.0 + f64::EPSILON;
    let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / denom;
    let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / denom;
    let cxy = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / denom;
    let a = 4.0 * mx * my * cxy;
    let b = (mx * mx + my * my) * (vx + vy);
    if a != 0.0 {
        a / (b + f64::EPSILON)
    } else if b == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(s: &[f64], g: &[f64], h: usize, w: usize) -> f64 {
    let (x, y) = centroid(g, h, w);
    let area = (h * w) as f64;
    let quads = [(0..y, 0..x), (0..y, x..w), (y..h, 0..x), (y..h, x..w)];
    quads
        .into_iter()
        .map(|(rows, cols)| {
            let weight = (rows.len() * cols.len()) as f64 / area;
            if weight == 0.0 {
                return 0.0;
            }
            let sb = block(s, w, rows.clone(), cols.clone());
            let gb = block(g, w, rows, cols);
            weight * ssim(&sb, &gb)
        })
        .sum()
}

/// Enhanced-alignment measure of the prediction binarized at the adaptive
/// threshold.
pub fn e_measure(s: &[f64], g: &[f64]) -> Result<f64> {
    check_pair(s, g)?;
    let tau = adaptive_threshold(s);
    let b: Vec<f64> = s.iter().map(|&v| if v >= tau { 1.0 } else { 0.0 }).collect();
    let mg = mean(g);
    if mg == 0.0 {
        return Ok(1.0 - mean(&b));
    }
    if mg == 1.0 {
        return Ok(mean(&b));
    }
    let mb = mean(&b);
    let total: f64 = b
        .iter()
        .zip(g)
        .map(|(&bv, &gv)| {
            let (pg, pb) = (gv - mg, bv - mb);
            let xi = 2.0 * pg * pb / (pg * pg + pb * pb + f64::EPSILON);
            (xi + 1.0).powi(2) / 4.0
        })
        .sum();
    Ok(total / s.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub id: String,
    pub mae: f64,
    pub f_beta: f64,
    pub s_alpha: f64,
    pub e_xi: f64,
}

impl SampleMetrics {
    pub fn compute(id: &str, s: &[f64], g: &[f64], h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            id: id.to_owned(),
            mae: mae(s, g)?,
            f_beta: f_measure(s, g, BETA2)?,
            s_alpha: s_measure(s, g, h, w, ALPHA)?,
            e_xi: e_measure(s, g)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<SampleMetrics>,
    /// Column means, with id `MEAN`.
    pub mean: SampleMetrics,
    pub pr_curve: Vec<(f64, f64)>,
}

/// Collects per-sample metrics and the dataset PR curve.
#[derive(Clone, Debug, Default)]
pub struct Evaluator {
    rows: Vec<SampleMetrics>,
    pr: PrAccumulator,
}

impl Evaluator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, id: &str, s: &[f64], g: &[f64], h: usize, w: usize) -> Result<&SampleMetrics> {
        let row = SampleMetrics::compute(id, s, g, h, w)?;
        self.pr.add(s, g)?;
        self.rows.push(row);
        Ok(self.rows.last().expect("pushed"))
    }

    pub fn finish(self) -> Result<MetricsReport> {
        if self.rows.is_empty() {
            return Err(Error::Usage("cannot evaluate an empty dataset".into()));
        }
        let n = self.rows.len() as f64;
        let avg = |f: fn(&SampleMetrics) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        let mean = SampleMetrics {
            id: "MEAN".into(),
            mae: avg(|r| r.mae),
            f_beta: avg(|r| r.f_beta),
            s_alpha: avg(|r| r.s_alpha),
            e_xi: avg(|r| r.e_xi),
        };
        Ok(MetricsReport {
            pr_curve: self.pr.curve(),
            rows: self.rows,
            mean,
        })
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const PR_FILE: &str = "pr_curve.csv";

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, 0, format!("{other:?}")),
    }
}

/// Writes `metrics.csv` and `pr_curve.csv` into `dir`.
pub fn write_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(METRICS_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    w.write_record(["id", "mae", "f_beta", "s_alpha", "e_xi"])
        .map_err(|e| csv_error(&path, e))?;
    for r in report.rows.iter().chain(std::iter::once(&report.mean)) {
        w.write_record([
            r.id.clone(),
            format!("{:.6}", r.mae),
            format!("{:.6}", r.f_beta),
            format!("{:.6}", r.s_alpha),
            format!("{:.6}", r.e_xi),
        ])
        .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(PR_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    w.write_record(["threshold", "precision", "recall"])
        .map_err(|e| csv_error(&path, e))?;
    for (t, (p, r)) in report.pr_curve.iter().enumerate() {
        w.write_record([t.to_string(), format!("{p:.6}"), format!("{r:.6}")])
            .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_examples() {
        assert!((mae(&[0.2, 0.8], &[0.0, 1.0]).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(mae(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(mae(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn f_measure_extremes() {
        let g = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(f_measure(&g, &g, BETA2).unwrap(), 1.0);
        assert_eq!(f_measure(&[0.0, 1.0, 1.0, 0.0], &g, BETA2).unwrap(), 0.0);
        assert!(matches!(f_measure(&g, &[0.0; 4], BETA2), Err(Error::Domain(_))));
    }

    #[test]
    fn perfect_prediction_scores_one_everywhere() {
        let g = [0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        assert!((s_measure(&g, &g, 3, 3, ALPHA).unwrap() - 1.0).abs() < 1e-6);
        assert!((e_measure(&g, &g).unwrap() - 1.0).abs() < 1e-6);
        let curve = pr_curve([(&g[..], &g[..])]).unwrap();
        assert!(curve.iter().all(|&(p, _)| p == 1.0));
        assert_eq!(curve[0].1, 1.0);
    }

    #[test]
    fn uniform_half_is_not_perfect() {
        let g = [0.0, 1.0, 1.0, 0.0];
        assert!(s_measure(&[0.5; 4], &g, 2, 2, ALPHA).unwrap() < 1.0);
    }

    #[test]
    fn anti_aligned_e_measure_is_near_zero() {
        let g = [0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        let inv: Vec<f64> = g.iter().map(|v| 1.0 - v).collect();
        assert!(e_measure(&inv, &g).unwrap() < 0.05);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(matches!(mae(&[0.1], &[0.5]), Err(Error::Domain(_))));
        assert!(matches!(mae(&[1.5], &[1.0]), Err(Error::Domain(_))));
        assert!(matches!(mae(&[0.1, 0.2], &[1.0]), Err(Error::Dimension { .. })));
        assert!(matches!(Evaluator::new().finish(), Err(Error::Usage(_))));
    }
}
