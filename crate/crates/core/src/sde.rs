//! Drift/diffusion recovery for the coefficient process `dY = F dt + G dW`,
//! its stationary density `f_s ~ exp(W)`, `W(y) = int_0^y 2F/G^2`, the
//! shifted-convolution density, and the two-sample Kolmogorov-Smirnov gate.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SdeError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate domain: all coefficient values equal")]
    DegenerateDomain,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("stationary density cannot be normalized")]
    NonNormalizable,
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
}

/// Probabilists' Hermite polynomials `He_0..=He_order` at `z`.
pub fn hermite_basis(z: f64, order: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(order + 1);
    out.push(1.0);
    if order >= 1 {
        out.push(z);
    }
    for k in 1..order {
        let next = z * out[k] - k as f64 * out[k - 1];
        out.push(next);
    }
    out
}

fn hermite_eval(coeffs: &[f64], z: f64) -> f64 {
    if coeffs.is_empty() {
        return 0.0;
    }
    hermite_basis(z, coeffs.len() - 1)
        .iter()
        .zip(coeffs)
        .map(|(b, c)| b * c)
        .sum()
}

/// `d/dz` of a Hermite expansion, using `He_k' = k He_{k-1}`.
fn hermite_eval_derivative(coeffs: &[f64], z: f64) -> f64 {
    if coeffs.len() < 2 {
        return 0.0;
    }
    let basis = hermite_basis(z, coeffs.len() - 2);
    coeffs[1..]
        .iter()
        .enumerate()
        .map(|(k, c)| (k + 1) as f64 * c * basis[k])
        .sum()
}

/// Estimation settings. The defaults are recorded in every fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub bins: usize,
    pub order_f: usize,
    pub order_g2: usize,
    /// Density support beyond the 1st..99th percentile range, as a fraction of
    /// that range on each side.
    pub tail_extension: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            bins: 32,
            order_f: 3,
            order_g2: 2,
            tail_extension: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub center: f64,
    pub count: usize,
    /// `mean(dy) / dtau`
    pub drift: f64,
    /// `mean(dy^2) / dtau`
    pub diffusion_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftDiffusionFit {
    pub hermite_f: Vec<f64>,
    pub hermite_g2: Vec<f64>,
    /// Standard errors of `hermite_f`.
    pub hermite_f_stderr: Vec<f64>,
    /// Support of the stationary density.
    pub domain: (f64, f64),
    /// 1st and 99th percentile of the observed values; the binned range.
    pub fit_range: (f64, f64),
    /// Standardization `z = (y - mean) / std` of the Hermite argument.
    pub y_mean: f64,
    pub y_std: f64,
    pub bin_stats: Vec<BinStat>,
    pub dtau: f64,
    /// Lower clamp applied to `G^2`.
    pub g2_floor: f64,
    pub config: FitConfig,
}

impl DriftDiffusionFit {
    /// Fit from known expansions, mostly for tests and what-if analysis.
    pub fn from_expansions(
        hermite_f: Vec<f64>,
        hermite_g2: Vec<f64>,
        y_mean: f64,
        y_std: f64,
        domain: (f64, f64),
    ) -> Self {
        let config = FitConfig {
            order_f: hermite_f.len().saturating_sub(1),
            order_g2: hermite_g2.len().saturating_sub(1),
            ..FitConfig::default()
        };
        DriftDiffusionFit {
            hermite_f_stderr: vec![0.0; hermite_f.len()],
            hermite_f,
            hermite_g2,
            domain,
            fit_range: domain,
            y_mean,
            y_std,
            bin_stats: Vec::new(),
            dtau: 1.0,
            g2_floor: f64::MIN_POSITIVE,
            config,
        }
    }

    fn z(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_std
    }

    pub fn drift(&self, y: f64) -> f64 {
        hermite_eval(&self.hermite_f, self.z(y))
    }

    pub fn drift_derivative(&self, y: f64) -> f64 {
        hermite_eval_derivative(&self.hermite_f, self.z(y)) / self.y_std
    }

    /// Fitted `G^2` without clamping.
    pub fn raw_diffusion_sq(&self, y: f64) -> f64 {
        hermite_eval(&self.hermite_g2, self.z(y))
    }

    /// `G^2` held constant outside the observed range and clamped to the floor.
    pub fn diffusion_sq(&self, y: f64) -> f64 {
        let y = y.clamp(self.fit_range.0, self.fit_range.1);
        self.raw_diffusion_sq(y).max(self.g2_floor)
    }

    /// CSV `bin_center,count,F_hat,G2_hat`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_center,count,F_hat,G2_hat\n");
        for b in &self.bin_stats {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                b.center, b.count, b.drift, b.diffusion_sq
            );
        }
        out
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

const MIN_BIN_COUNT: usize = 5;

/// Binned Kramers-Moyal moments fitted by count-weighted least squares in the
/// Hermite basis.
///
/// Pairs are sorted before accumulation, so the result is bit-identical for
/// any permutation of the input.
pub fn estimate_fg(
    pairs: &[(f64, f64)],
    dtau: f64,
    config: &FitConfig,
) -> Result<DriftDiffusionFit, SdeError> {
    let bins = config.bins;
    if bins < 5 {
        return Err(SdeError::InvalidArgument("bins must be at least 5".into()));
    }
    if config.order_f > 8 || config.order_g2 > 8 {
        return Err(SdeError::InvalidArgument("order must be at most 8".into()));
    }
    if !(dtau.is_finite() && dtau > 0.0) {
        return Err(SdeError::InvalidArgument("dtau must be positive".into()));
    }
    if !(config.tail_extension.is_finite() && config.tail_extension >= 0.0) {
        return Err(SdeError::InvalidArgument("tail_extension".into()));
    }
    if pairs.len() < 10 * bins {
        return Err(SdeError::InsufficientData(format!(
            "{} pairs for {} bins",
            pairs.len(),
            bins
        )));
    }
    if pairs
        .iter()
        .any(|(y, dy)| !y.is_finite() || !dy.is_finite())
    {
        return Err(SdeError::InvalidArgument("non-finite pair".into()));
    }

    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let ys: Vec<f64> = sorted.iter().map(|p| p.0).collect();
    let (p01, p99) = (quantile(&ys, 0.01), quantile(&ys, 0.99));
    if p99 - p01 <= 0.0 {
        return Err(SdeError::DegenerateDomain);
    }
    let n = ys.len() as f64;
    let y_mean = ys.iter().sum::<f64>() / n;
    let y_std = (ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n).sqrt();
    if y_std <= 0.0 {
        return Err(SdeError::DegenerateDomain);
    }

    let width = (p99 - p01) / bins as f64;
    let mut count = vec![0usize; bins];
    let mut sum_dy = vec![0.0; bins];
    let mut sum_dy2 = vec![0.0; bins];
    for &(y, dy) in &sorted {
        if y < p01 || y > p99 {
            continue;
        }
        let b = (((y - p01) / width) as usize).min(bins - 1);
        count[b] += 1;
        sum_dy[b] += dy;
        sum_dy2[b] += dy * dy;
    }
    let bin_stats: Vec<BinStat> = (0..bins)
        .map(|b| {
            let c = count[b].max(1) as f64;
            BinStat {
                center: p01 + (b as f64 + 0.5) * width,
                count: count[b],
                drift: sum_dy[b] / c / dtau,
                diffusion_sq: sum_dy2[b] / c / dtau,
            }
        })
        .collect();

    let used: Vec<&BinStat> = bin_stats
        .iter()
        .filter(|b| b.count >= MIN_BIN_COUNT)
        .collect();
    let needed = config.order_f.max(config.order_g2) + 1;
    if used.len() < needed.max(2) {
        return Err(SdeError::InsufficientData(format!(
            "{} populated bins, need {}",
            used.len(),
            needed.max(2)
        )));
    }

    let z: Vec<f64> = used.iter().map(|b| (b.center - y_mean) / y_std).collect();
    let w: Vec<f64> = used.iter().map(|b| b.count as f64).collect();
    let f_hat: Vec<f64> = used.iter().map(|b| b.drift).collect();
    let g_hat: Vec<f64> = used.iter().map(|b| b.diffusion_sq).collect();

    let (hermite_f, f_cov) = weighted_hermite_lsq(&z, &w, &f_hat, config.order_f)?;
    let (hermite_g2, _) = weighted_hermite_lsq(&z, &w, &g_hat, config.order_g2)?;

    // pooled within-bin variance of dy for drift standard errors
    let mut ss = 0.0;
    let mut used_n = 0usize;
    for &(y, dy) in &sorted {
        if y < p01 || y > p99 {
            continue;
        }
        let b = (((y - p01) / width) as usize).min(bins - 1);
        if count[b] >= MIN_BIN_COUNT {
            let m = sum_dy[b] / count[b] as f64;
            ss += (dy - m).powi(2);
            used_n += 1;
        }
    }
    let dof = used_n.saturating_sub(used.len()).max(1) as f64;
    let sd_dy = (ss / dof).sqrt();
    let hermite_f_stderr = (0..=config.order_f)
        .map(|k| sd_dy / dtau * f_cov[(k, k)].max(0.0).sqrt())
        .collect();

    let max_g2 = g_hat.iter().copied().fold(0.0, f64::max);
    let g2_floor = (1e-8 * max_g2).max(f64::MIN_POSITIVE);
    let ext = config.tail_extension * (p99 - p01);

    Ok(DriftDiffusionFit {
        hermite_f,
        hermite_g2,
        hermite_f_stderr,
        domain: (p01 - ext, p99 + ext),
        fit_range: (p01, p99),
        y_mean,
        y_std,
        bin_stats,
        dtau,
        g2_floor,
        config: *config,
    })
}

/// Solves `min sum_b w_b (v_b - sum_k c_k He_k(z_b))^2`. Returns the
/// coefficients and `(X^T W X)^{-1}`.
fn weighted_hermite_lsq(
    z: &[f64],
    w: &[f64],
    v: &[f64],
    order: usize,
) -> Result<(Vec<f64>, DMatrix<f64>), SdeError> {
    let k = order + 1;
    let x = DMatrix::from_fn(z.len(), k, |r, c| hermite_basis(z[r], order)[c]);
    let mut xtwx = DMatrix::<f64>::zeros(k, k);
    let mut xtwv = DVector::<f64>::zeros(k);
    for r in 0..z.len() {
        for i in 0..k {
            xtwv[i] += w[r] * x[(r, i)] * v[r];
            for j in 0..k {
                xtwx[(i, j)] += w[r] * x[(r, i)] * x[(r, j)];
            }
        }
    }
    let inv = xtwx
        .clone()
        .try_inverse()
        .ok_or_else(|| SdeError::InsufficientData("singular normal equations".into()))?;
    let coeffs = &inv * xtwv;
    Ok((coeffs.iter().copied().collect(), inv))
}

/// Gridded stationary density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryDensity {
    pub grid: Vec<f64>,
    pub pdf: Vec<f64>,
    pub log_weight: Vec<f64>,
}

pub fn trapezoid(x: &[f64], f: &[f64]) -> f64 {
    x.windows(2)
        .zip(f.windows(2))
        .map(|(xs, fs)| 0.5 * (xs[1] - xs[0]) * (fs[0] + fs[1]))
        .sum()
}

impl StationaryDensity {
    /// Normalizes nonnegative weights on a grid.
    pub fn from_weights(grid: Vec<f64>, weights: Vec<f64>) -> Result<Self, SdeError> {
        let z = trapezoid(&grid, &weights);
        if !z.is_finite() || z <= 0.0 {
            return Err(SdeError::NonNormalizable);
        }
        let pdf: Vec<f64> = weights.iter().map(|w| w / z).collect();
        let log_weight = pdf.iter().map(|p| p.ln()).collect();
        Ok(StationaryDensity {
            grid,
            pdf,
            log_weight,
        })
    }

    pub fn total_mass(&self) -> f64 {
        trapezoid(&self.grid, &self.pdf)
    }

    pub fn mean(&self) -> f64 {
        let yf: Vec<f64> = self
            .grid
            .iter()
            .zip(&self.pdf)
            .map(|(y, p)| y * p)
            .collect();
        trapezoid(&self.grid, &yf)
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let v: Vec<f64> = self
            .grid
            .iter()
            .zip(&self.pdf)
            .map(|(y, p)| (y - m).powi(2) * p)
            .collect();
        trapezoid(&self.grid, &v)
    }

    /// Density of `Y + offset`.
    pub fn shifted(&self, offset: f64) -> StationaryDensity {
        StationaryDensity {
            grid: self.grid.iter().map(|y| y + offset).collect(),
            pdf: self.pdf.clone(),
            log_weight: self.log_weight.clone(),
        }
    }

    /// Density of `-Y`.
    pub fn reflected(&self) -> StationaryDensity {
        StationaryDensity {
            grid: self.grid.iter().rev().map(|y| -y).collect(),
            pdf: self.pdf.iter().rev().copied().collect(),
            log_weight: self.log_weight.iter().rev().copied().collect(),
        }
    }

    /// Linear interpolation, zero outside the grid.
    pub fn pdf_at(&self, y: f64) -> f64 {
        let g = &self.grid;
        if g.is_empty() || y < g[0] || y > g[g.len() - 1] {
            return 0.0;
        }
        let i = g.partition_point(|&v| v <= y).min(g.len() - 1).max(1);
        let (x0, x1) = (g[i - 1], g[i]);
        let t = if x1 > x0 { (y - x0) / (x1 - x0) } else { 0.0 };
        self.pdf[i - 1] + t * (self.pdf[i] - self.pdf[i - 1])
    }

    fn uniform_spacing(&self) -> Result<f64, SdeError> {
        if self.grid.len() < 2 {
            return Err(SdeError::GridMismatch(
                "grid needs at least two points".into(),
            ));
        }
        let h = (self.grid[self.grid.len() - 1] - self.grid[0]) / (self.grid.len() - 1) as f64;
        let uniform = self
            .grid
            .windows(2)
            .all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h.abs().max(1e-300));
        if !uniform || h <= 0.0 {
            return Err(SdeError::GridMismatch("grid spacing is not uniform".into()));
        }
        Ok(h)
    }

    /// CSV `y,pdf,W`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("y,pdf,W\n");
        for ((y, p), w) in self.grid.iter().zip(&self.pdf).zip(&self.log_weight) {
            let _ = writeln!(out, "{y},{p},{w}");
        }
        out
    }
}

/// `f_s = exp(W) / Z` on a uniform grid over the fit domain (extended to
/// contain 0), `W` by cumulative trapezoid of `2F/G^2` from 0.
pub fn stationary_density(
    fit: &DriftDiffusionFit,
    grid_points: usize,
) -> Result<StationaryDensity, SdeError> {
    if grid_points < 64 {
        return Err(SdeError::InvalidArgument(
            "grid_points must be at least 64".into(),
        ));
    }
    let lo = fit.domain.0.min(0.0);
    let hi = fit.domain.1.max(0.0);
    if hi <= lo || !lo.is_finite() || !hi.is_finite() {
        return Err(SdeError::DegenerateDomain);
    }
    let h = (hi - lo) / (grid_points - 1) as f64;
    let grid: Vec<f64> = (0..grid_points).map(|i| lo + h * i as f64).collect();
    let integrand: Vec<f64> = grid
        .iter()
        .map(|&y| 2.0 * fit.drift(y) / fit.diffusion_sq(y))
        .collect();

    let mut cumulative = vec![0.0; grid_points];
    for i in 1..grid_points {
        cumulative[i] = cumulative[i - 1] + 0.5 * h * (integrand[i - 1] + integrand[i]);
    }
    // value of the cumulative integral at y = 0
    let j = (((0.0 - lo) / h).floor() as usize).min(grid_points - 2);
    let dx = 0.0 - grid[j];
    let q0 = integrand[j] + (integrand[j + 1] - integrand[j]) * dx / h;
    let c0 = cumulative[j] + 0.5 * dx * (integrand[j] + q0);
    let log_weight: Vec<f64> = cumulative.iter().map(|c| c - c0).collect();

    if log_weight.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
        return Err(SdeError::NonNormalizable);
    }
    let peak = log_weight.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !peak.is_finite() {
        return Err(SdeError::NonNormalizable);
    }
    let weights: Vec<f64> = log_weight.iter().map(|w| (w - peak).exp()).collect();
    let z = trapezoid(&grid, &weights);
    if !z.is_finite() || z <= 0.0 {
        return Err(SdeError::NonNormalizable);
    }
    let pdf = weights.iter().map(|w| w / z).collect();
    Ok(StationaryDensity {
        grid,
        pdf,
        log_weight,
    })
}

/// Mass of the density on `(-inf, 0]`, trapezoidal with linear interpolation
/// at the zero crossing.
pub fn prob_nonpositive(density: &StationaryDensity) -> f64 {
    let g = &density.grid;
    let p = &density.pdf;
    let mut mass = 0.0;
    for i in 0..g.len().saturating_sub(1) {
        let (x0, x1) = (g[i], g[i + 1]);
        if x1 <= 0.0 {
            mass += 0.5 * (x1 - x0) * (p[i] + p[i + 1]);
        } else if x0 < 0.0 {
            let p0 = p[i] + (p[i + 1] - p[i]) * (0.0 - x0) / (x1 - x0);
            mass += 0.5 * (0.0 - x0) * (p[i] + p0);
        } else {
            break;
        }
    }
    mass.clamp(0.0, 1.0)
}

fn resample_to(density: &StationaryDensity, h: f64) -> Vec<f64> {
    let lo = density.grid[0];
    let hi = density.grid[density.grid.len() - 1];
    let n = ((hi - lo) / h + 1e-9).floor() as usize + 1;
    (0..n).map(|k| density.pdf_at(lo + k as f64 * h)).collect()
}

/// Density of `z` in `f(z) = int f_now(y) f_later(y + z) dy`, i.e. of
/// `Y_later - Y_now` for independent draws. Both inputs are brought onto a
/// common lattice at the finer spacing.
pub fn convolve_shifted(
    d_now: &StationaryDensity,
    d_later: &StationaryDensity,
) -> Result<StationaryDensity, SdeError> {
    let h1 = d_now.uniform_spacing()?;
    let h2 = d_later.uniform_spacing()?;
    let h = h1.min(h2);
    let f1 = if h1 == h {
        d_now.pdf.clone()
    } else {
        resample_to(d_now, h)
    };
    let f2 = if h2 == h {
        d_later.pdf.clone()
    } else {
        resample_to(d_later, h)
    };
    let (n1, n2) = (f1.len() as isize, f2.len() as isize);
    let offset = d_later.grid[0] - d_now.grid[0];

    let mut grid = Vec::with_capacity((n1 + n2 - 1) as usize);
    let mut weights = Vec::with_capacity((n1 + n2 - 1) as usize);
    for m in -(n1 - 1)..n2 {
        let i_lo = 0.max(-m);
        let i_hi = n1.min(n2 - m);
        let mut acc = 0.0;
        for i in i_lo..i_hi {
            acc += f1[i as usize] * f2[(i + m) as usize];
        }
        grid.push(offset + m as f64 * h);
        weights.push(acc * h);
    }
    StationaryDensity::from_weights(grid, weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub threshold: f64,
    pub reject_equality: bool,
    pub n1: usize,
    pub n2: usize,
}

/// Asymptotic critical coefficient `c(alpha) = sqrt(-ln(alpha/2) / 2)`.
pub fn ks_critical_coefficient(alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt()
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic threshold.
pub fn ks_two_sample(a: &[f64], b: &[f64], alpha: f64) -> Result<KsResult, SdeError> {
    const MIN: usize = 8;
    for s in [a, b] {
        if s.len() < MIN {
            return Err(SdeError::TooFewSamples {
                needed: MIN,
                got: s.len(),
            });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(SdeError::InvalidArgument("non-finite sample".into()));
        }
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(SdeError::InvalidArgument("alpha must lie in (0, 1)".into()));
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (n1, n2) = (xs.len(), ys.len());

    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < n1 && j < n2 {
        let v = xs[i].min(ys[j]);
        while i < n1 && xs[i] <= v {
            i += 1;
        }
        while j < n2 && ys[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n1 as f64 - j as f64 / n2 as f64).abs());
    }
    let threshold =
        ks_critical_coefficient(alpha) * (((n1 + n2) as f64) / ((n1 * n2) as f64)).sqrt();
    Ok(KsResult {
        statistic: d,
        threshold,
        reject_equality: d > threshold,
        n1,
        n2,
    })
}
