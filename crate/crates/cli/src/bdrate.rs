//! Rate-distortion curves and the Bjøntegaard rate difference.

use std::path::Path;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub quality: f64,
    pub metric: String,
}

/// Points of one codec setting sorted by rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RdCurve {
    pub label: String,
    pub points: Vec<RdPoint>,
}

impl RdCurve {
    pub fn new(label: impl Into<String>, mut points: Vec<RdPoint>) -> CliResult<Self> {
        let label = label.into();
        if points.iter().any(|p| !(p.bpp > 0.0 && p.bpp.is_finite() && p.quality.is_finite())) {
            return Err(input(format!("curve {label}: rates must be positive and qualities finite")));
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if points.windows(2).any(|w| w[0].bpp == w[1].bpp) {
            return Err(input(format!("curve {label}: repeated rate")));
        }
        Ok(RdCurve { label, points })
    }
}

fn input(msg: String) -> CliError {
    CliError::Core(ffabic::Error::Input(msg))
}

/// Monotone piecewise-cubic Hermite interpolant.
#[derive(Debug, Clone)]
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    /// `x` must be strictly increasing with at least two entries.
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        assert!(x.len() >= 2 && x.len() == y.len());
        let n = x.len();
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let m: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d = vec![m[0], m[0]];
        } else {
            for k in 1..n - 1 {
                if m[k - 1] * m[k] > 0.0 {
                    let (w1, w2) = (2.0 * h[k] + h[k - 1], h[k] + 2.0 * h[k - 1]);
                    d[k] = (w1 + w2) / (w1 / m[k - 1] + w2 / m[k]);
                }
            }
            d[0] = edge_slope(h[0], h[1], m[0], m[1]);
            d[n - 1] = edge_slope(h[n - 2], h[n - 3], m[n - 2], m[n - 3]);
        }
        Pchip { x, y, d }
    }

    /// Integral over `[lo, hi]`, both inside the knot range.
    pub fn integrate(&self, lo: f64, hi: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..self.x.len() - 1 {
            let (a, b) = (self.x[i].max(lo), self.x[i + 1].min(hi));
            if b > a {
                total += self.antiderivative(i, b - self.x[i]) - self.antiderivative(i, a - self.x[i]);
            }
        }
        total
    }

    pub fn eval(&self, x: f64) -> f64 {
        let i = self.x.partition_point(|&k| k <= x).clamp(1, self.x.len() - 1) - 1;
        let (c2, c3) = self.coefficients(i);
        let s = x - self.x[i];
        self.y[i] + self.d[i] * s + c2 * s * s + c3 * s * s * s
    }

    fn coefficients(&self, i: usize) -> (f64, f64) {
        let h = self.x[i + 1] - self.x[i];
        let m = (self.y[i + 1] - self.y[i]) / h;
        ((3.0 * m - 2.0 * self.d[i] - self.d[i + 1]) / h, (self.d[i] + self.d[i + 1] - 2.0 * m) / (h * h))
    }

    fn antiderivative(&self, i: usize, s: f64) -> f64 {
        let (c2, c3) = self.coefficients(i);
        self.y[i] * s + self.d[i] * s * s / 2.0 + c2 * s.powi(3) / 3.0 + c3 * s.powi(4) / 4.0
    }
}

fn edge_slope(h0: f64, h1: f64, m0: f64, m1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
    if d.signum() != m0.signum() || m0 == 0.0 {
        0.0
    } else if m0.signum() != m1.signum() && d.abs() > 3.0 * m0.abs() {
        3.0 * m0
    } else {
        d
    }
}

/// Log-rate as a function of quality.
fn log_rate_curve(c: &RdCurve) -> CliResult<(Pchip, f64, f64)> {
    if c.points.len() < 2 {
        return Err(input(format!("curve {} needs at least two points", c.label)));
    }
    let mut pts: Vec<(f64, f64)> = c.points.iter().map(|p| (p.quality, p.bpp.ln())).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(input(format!("curve {}: repeated quality value", c.label)));
    }
    let (lo, hi) = (pts[0].0, pts[pts.len() - 1].0);
    Ok((Pchip::new(pts.iter().map(|p| p.0).collect(), pts.iter().map(|p| p.1).collect()), lo, hi))
}

/// Average rate difference of `test` against `anchor` at equal quality, in percent.
/// Negative means the test codec needs fewer bits.
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve) -> CliResult<f64> {
    let (pa, alo, ahi) = log_rate_curve(anchor)?;
    let (pt, tlo, thi) = log_rate_curve(test)?;
    let (lo, hi) = (alo.max(tlo), ahi.min(thi));
    if hi <= lo {
        return Err(CliError::Range(format!(
            "quality ranges [{alo}, {ahi}] of {} and [{tlo}, {thi}] of {} do not overlap",
            anchor.label, test.label
        )));
    }
    let diff = (pt.integrate(lo, hi) - pa.integrate(lo, hi)) / (hi - lo);
    Ok((diff.exp() - 1.0) * 100.0)
}

/// Rows `label, bpp, metric, value` of a curve file.
pub const CURVE_HEADER: &str = "label\tbpp\tmetric\tvalue";

/// Reads every curve of `metric` from a curve TSV, one per label, in order of first appearance.
pub fn read_curves(path: &Path, metric: &str) -> CliResult<Vec<RdCurve>> {
    let text = std::fs::read_to_string(path)?;
    let mut labels: Vec<String> = Vec::new();
    let mut points: Vec<Vec<RdPoint>> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if n == 0 && line.starts_with("label") || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || {
            CliError::Core(ffabic::Error::Format { position: n + 1, message: format!("{}: malformed curve row {line:?}", path.display()) })
        };
        if f.len() != 4 {
            return Err(bad());
        }
        let bpp: f64 = f[1].parse().map_err(|_| bad())?;
        let value: f64 = f[3].parse().map_err(|_| bad())?;
        if f[2] != metric {
            continue;
        }
        let idx = match labels.iter().position(|l| l == f[0]) {
            Some(i) => i,
            None => {
                labels.push(f[0].to_string());
                points.push(Vec::new());
                labels.len() - 1
            }
        };
        points[idx].push(RdPoint { bpp, quality: value, metric: metric.to_string() });
    }
    labels.into_iter().zip(points).map(|(l, p)| RdCurve::new(l, p)).collect()
}

/// Merges every curve of a file into one, for files holding one point per model.
pub fn read_single_curve(path: &Path, metric: &str) -> CliResult<RdCurve> {
    let curves = read_curves(path, metric)?;
    if curves.is_empty() {
        return Err(input(format!("{} has no {metric} rows", path.display())));
    }
    let label = path.file_stem().and_then(|s| s.to_str()).unwrap_or("curve").to_string();
    RdCurve::new(label, curves.into_iter().flat_map(|c| c.points).collect())
}
