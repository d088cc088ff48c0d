//! Periodic dyadic wavelet transform (Haar and Daubechies-4).
//!
//! Level `i` detail coefficients are the projections of the close path onto
//! `2^(-i/2) psi(2^(-i) t - tau)`. Cascaded filtering uses periodic extension,
//! so the analysis operator is orthogonal and energy is preserved exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_data::QuoteSeries;

#[derive(Debug, Error, PartialEq)]
pub enum WaveletError {
    #[error("series too short: needed {needed}, got {got}")]
    SeriesTooShort { needed: usize, got: usize },
    #[error("levels must be at least 1")]
    ZeroLevels,
    #[error("unknown wavelet family {0}")]
    UnknownFamily(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyName {
    Haar,
    Db4,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveletFamily {
    pub name: FamilyName,
    /// Low-pass analysis filter.
    pub filter_taps: Vec<f64>,
}

const DB4_TAPS: [f64; 8] = [
    0.230_377_813_308_855_23,
    0.714_846_570_552_541_5,
    0.630_880_767_929_590_4,
    -0.027_983_769_416_983_85,
    -0.187_034_811_718_881_14,
    0.030_841_381_835_986_965,
    0.032_883_011_666_982_945,
    -0.010_597_401_784_997_278,
];

impl WaveletFamily {
    pub fn haar() -> Self {
        WaveletFamily {
            name: FamilyName::Haar,
            filter_taps: vec![std::f64::consts::FRAC_1_SQRT_2; 2],
        }
    }

    /// Eight-tap Daubechies filter with four vanishing moments.
    pub fn db4() -> Self {
        WaveletFamily {
            name: FamilyName::Db4,
            filter_taps: DB4_TAPS.to_vec(),
        }
    }

    pub fn from_name(name: FamilyName) -> Self {
        match name {
            FamilyName::Haar => Self::haar(),
            FamilyName::Db4 => Self::db4(),
        }
    }

    /// High-pass analysis filter, `g[k] = (-1)^k h[L-1-k]`.
    pub fn high_pass(&self) -> Vec<f64> {
        let len = self.filter_taps.len();
        (0..len)
            .map(|k| {
                let h = self.filter_taps[len - 1 - k];
                if k % 2 == 0 {
                    h
                } else {
                    -h
                }
            })
            .collect()
    }

    /// Largest deviation from `sum h_k^2 = 1`, `sum h_k h_{k+2m} = 0`.
    pub fn orthonormality_defect(&self) -> f64 {
        let h = &self.filter_taps;
        let mut worst: f64 = 0.0;
        let mut m = 0;
        while 2 * m < h.len() {
            let dot: f64 = (0..h.len() - 2 * m).map(|k| h[k] * h[k + 2 * m]).sum();
            let target = if m == 0 { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
            m += 1;
        }
        worst
    }
}

impl std::str::FromStr for FamilyName {
    type Err = WaveletError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "haar" => Ok(FamilyName::Haar),
            "db4" => Ok(FamilyName::Db4),
            other => Err(WaveletError::UnknownFamily(other.to_string())),
        }
    }
}

/// Coefficients of one scale, indexed by shift.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffSeries {
    pub scale: u32,
    pub shifts: Vec<i64>,
    pub values: Vec<f64>,
}

impl CoeffSeries {
    fn new(scale: u32, values: Vec<f64>) -> Self {
        CoeffSeries {
            scale,
            shifts: (0..values.len() as i64).collect(),
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    /// Detail series for scales `1..=levels`.
    pub details: Vec<CoeffSeries>,
    /// Final approximation band (scale `levels`).
    pub approximation: Vec<f64>,
}

impl Decomposition {
    pub fn detail(&self, scale: u32) -> Option<&CoeffSeries> {
        self.details.iter().find(|c| c.scale == scale)
    }
}

/// One analysis step with periodic extension; `x.len()` must be even.
fn analysis_step(x: &[f64], lo: &[f64], hi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let half = n / 2;
    let mut approx = vec![0.0; half];
    let mut detail = vec![0.0; half];
    for k in 0..half {
        let (mut a, mut d) = (0.0, 0.0);
        for (j, (&h, &g)) in lo.iter().zip(hi).enumerate() {
            let v = x[(2 * k + j) % n];
            a += h * v;
            d += g * v;
        }
        approx[k] = a;
        detail[k] = d;
    }
    (approx, detail)
}

fn synthesis_step(approx: &[f64], detail: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let n = 2 * approx.len();
    let mut x = vec![0.0; n];
    for k in 0..approx.len() {
        for (j, (&h, &g)) in lo.iter().zip(hi).enumerate() {
            x[(2 * k + j) % n] += h * approx[k] + g * detail[k];
        }
    }
    x
}

/// Multi-level decomposition of raw samples.
///
/// An odd-length intermediate band drops its oldest sample before filtering,
/// so level `i` always holds `floor(n / 2^i)` coefficients and the newest
/// samples stay aligned with the last shift.
pub fn decompose_values(
    values: &[f64],
    levels: u32,
    family: &WaveletFamily,
) -> Result<Decomposition, WaveletError> {
    if levels == 0 {
        return Err(WaveletError::ZeroLevels);
    }
    let needed = 1usize << levels;
    if values.len() < needed {
        return Err(WaveletError::SeriesTooShort {
            needed,
            got: values.len(),
        });
    }
    let hi = family.high_pass();
    let lo = &family.filter_taps;
    let mut current = values.to_vec();
    let mut details = Vec::with_capacity(levels as usize);
    for scale in 1..=levels {
        if current.len() % 2 == 1 {
            current.remove(0);
        }
        let (approx, detail) = analysis_step(&current, lo, &hi);
        details.push(CoeffSeries::new(scale, detail));
        current = approx;
    }
    Ok(Decomposition {
        details,
        approximation: current,
    })
}

/// Decomposes the close path of a quote series.
pub fn decompose(
    series: &QuoteSeries,
    levels: u32,
    family: &WaveletFamily,
) -> Result<Decomposition, WaveletError> {
    decompose_values(&series.closes(), levels, family)
}

/// Inverse of [`decompose_values`] for lengths divisible by `2^levels`.
pub fn reconstruct(decomposition: &Decomposition, family: &WaveletFamily) -> Vec<f64> {
    let hi = family.high_pass();
    let lo = &family.filter_taps;
    let mut current = decomposition.approximation.clone();
    for detail in decomposition.details.iter().rev() {
        current = synthesis_step(&current, &detail.values, lo, &hi);
    }
    current
}

/// `(y_tau, y_{tau+1} - y_tau)` pairs over a coefficient series.
pub fn increments(coeffs: &CoeffSeries) -> Result<Vec<(f64, f64)>, WaveletError> {
    if coeffs.values.len() < 2 {
        return Err(WaveletError::SeriesTooShort {
            needed: 2,
            got: coeffs.values.len(),
        });
    }
    Ok(coeffs
        .values
        .windows(2)
        .map(|w| (w[0], w[1] - w[0]))
        .collect())
}

/// CSV dump `scale,tau,value` of every detail coefficient.
pub fn coefficients_csv(decomposition: &Decomposition) -> String {
    let mut out = String::from("scale,tau,value\n");
    for c in &decomposition.details {
        for (tau, v) in c.shifts.iter().zip(&c.values) {
            out.push_str(&format!("{},{},{}\n", c.scale, tau, v));
        }
    }
    out
}
