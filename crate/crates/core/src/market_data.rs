//! Quote series: CSV ingest, timeframe resampling and synthetic processes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Header line of the quote CSV format.
pub const CSV_HEADER: &str = "timestamp,open,high,low,close,spread";

/// 2011-04-28 00:00:00 UTC; first bar time of generated series.
pub const SYNTHETIC_EPOCH: i64 = 1_303_948_800;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("parse error at row {row}: {reason}")]
    ParseError { row: usize, reason: String },
    #[error("timestamps not strictly increasing at row {row}")]
    NonMonotonicTimestamps { row: usize },
    #[error("series is empty")]
    EmptySeries,
    #[error("invalid bar at index {index}: {reason}")]
    InvalidBar { index: usize, reason: String },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bar {
    /// Epoch seconds, UTC.
    pub timestamp: i64,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    /// Full bid/ask spread in price units.
    pub spread: f64,
}

impl Bar {
    pub fn flat(timestamp: i64, price: f64) -> Self {
        Bar {
            timestamp,
            open: price,
            high: price,
            low: price,
            close: price,
            spread: 0.0,
        }
    }

    fn check(&self) -> Result<(), String> {
        let fields = [self.open, self.high, self.low, self.close, self.spread];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err("non-finite value".into());
        }
        if self.low > self.open.min(self.close) {
            return Err("low above open/close".into());
        }
        if self.high < self.open.max(self.close) {
            return Err("high below open/close".into());
        }
        if self.spread < 0.0 {
            return Err("negative spread".into());
        }
        Ok(())
    }
}

/// Time-ascending bars of one symbol at one timeframe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuoteSeries {
    pub symbol: String,
    /// Bar length in minutes.
    pub timeframe: u32,
    bars: Vec<Bar>,
}

impl QuoteSeries {
    /// Builds a series, checking bar shape and strictly increasing timestamps.
    pub fn new(
        symbol: impl Into<String>,
        timeframe: u32,
        bars: Vec<Bar>,
    ) -> Result<Self, DataError> {
        if timeframe == 0 {
            return Err(DataError::InvalidParameter("timeframe".into()));
        }
        for (index, bar) in bars.iter().enumerate() {
            bar.check()
                .map_err(|reason| DataError::InvalidBar { index, reason })?;
            if index > 0 && bar.timestamp <= bars[index - 1].timestamp {
                return Err(DataError::NonMonotonicTimestamps { row: index + 1 });
            }
        }
        Ok(QuoteSeries {
            symbol: symbol.into(),
            timeframe,
            bars,
        })
    }

    pub fn bars(&self) -> &[Bar] {
        &self.bars
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    pub fn closes(&self) -> Vec<f64> {
        self.bars.iter().map(|b| b.close).collect()
    }

    /// Keeps only bars whose timestamps are in `keep` (sorted ascending).
    pub fn retain_timestamps(&self, keep: &[i64]) -> QuoteSeries {
        let bars = self
            .bars
            .iter()
            .filter(|b| keep.binary_search(&b.timestamp).is_ok())
            .copied()
            .collect();
        QuoteSeries {
            symbol: self.symbol.clone(),
            timeframe: self.timeframe,
            bars,
        }
    }

    /// Renders the series in the quote CSV format.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(48 * (self.bars.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for b in &self.bars {
            let _ = writeln!(
                out,
                "{},{:.5},{:.5},{:.5},{:.5},{:.5}",
                b.timestamp, b.open, b.high, b.low, b.close, b.spread
            );
        }
        out
    }
}

/// Parses quote CSV text. Row numbers in errors count data rows from 1.
pub fn parse_history(text: &str, symbol: &str, timeframe: u32) -> Result<QuoteSeries, DataError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(DataError::ParseError {
        row: 0,
        reason: "missing header".into(),
    })?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns != CSV_HEADER.split(',').collect::<Vec<_>>() {
        return Err(DataError::ParseError {
            row: 0,
            reason: format!("unexpected header {header:?}"),
        });
    }

    let mut bars = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 6 {
            return Err(DataError::ParseError {
                row,
                reason: format!("expected 6 fields, found {}", fields.len()),
            });
        }
        let timestamp = fields[0]
            .parse::<i64>()
            .map_err(|e| DataError::ParseError {
                row,
                reason: format!("timestamp: {e}"),
            })?;
        let mut values = [0.0; 5];
        for (slot, (name, raw)) in values.iter_mut().zip(
            ["open", "high", "low", "close", "spread"]
                .iter()
                .zip(&fields[1..]),
        ) {
            *slot = raw.parse::<f64>().map_err(|e| DataError::ParseError {
                row,
                reason: format!("{name}: {e}"),
            })?;
        }
        let bar = Bar {
            timestamp,
            open: values[0],
            high: values[1],
            low: values[2],
            close: values[3],
            spread: values[4],
        };
        bar.check()
            .map_err(|reason| DataError::ParseError { row, reason })?;
        if let Some(prev) = bars.last() {
            let prev: &Bar = prev;
            if bar.timestamp <= prev.timestamp {
                return Err(DataError::NonMonotonicTimestamps { row });
            }
        }
        bars.push(bar);
    }
    QuoteSeries::new(symbol, timeframe, bars)
}

/// Loads a quote CSV file.
pub fn load_history(path: &Path, symbol: &str, timeframe: u32) -> Result<QuoteSeries, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DataError::FileNotFound(path.display().to_string()),
        _ => DataError::Io(e),
    })?;
    parse_history(&text, symbol, timeframe)
}

/// Aggregates `factor` consecutive bars into one; a trailing partial group is dropped.
pub fn resample(series: &QuoteSeries, factor: usize) -> Result<QuoteSeries, DataError> {
    if factor < 2 {
        return Err(DataError::InvalidParameter("factor".into()));
    }
    if series.is_empty() {
        return Err(DataError::EmptySeries);
    }
    let bars = series
        .bars
        .chunks_exact(factor)
        .map(|group| {
            let first = group[0];
            let last = group[group.len() - 1];
            Bar {
                timestamp: first.timestamp,
                open: first.open,
                high: group
                    .iter()
                    .map(|b| b.high)
                    .fold(f64::NEG_INFINITY, f64::max),
                low: group.iter().map(|b| b.low).fold(f64::INFINITY, f64::min),
                close: last.close,
                spread: last.spread,
            }
        })
        .collect();
    Ok(QuoteSeries {
        symbol: series.symbol.clone(),
        timeframe: series.timeframe * factor as u32,
        bars,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    Wiener,
    OrnsteinUhlenbeck,
    Gbm,
    LogisticMap,
    LorenzX,
}

impl std::str::FromStr for SyntheticKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "wiener" => SyntheticKind::Wiener,
            "ornstein_uhlenbeck" | "ou" => SyntheticKind::OrnsteinUhlenbeck,
            "gbm" => SyntheticKind::Gbm,
            "logistic_map" => SyntheticKind::LogisticMap,
            "lorenz_x" => SyntheticKind::LorenzX,
            other => return Err(DataError::InvalidParameter(format!("kind {other}"))),
        })
    }
}

/// Recipe for a generated series. Recognised parameters: `theta`, `sigma`,
/// `mu`, `r`, `dt`, `y0`, `spread`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub parameters: BTreeMap<String, f64>,
    pub length: usize,
    pub seed: u64,
    pub symbol: String,
    pub timeframe: u32,
}

const KNOWN_PARAMETERS: [&str; 7] = ["theta", "sigma", "mu", "r", "dt", "y0", "spread"];

impl SyntheticSpec {
    pub fn new(kind: SyntheticKind, length: usize, seed: u64) -> Self {
        SyntheticSpec {
            kind,
            parameters: BTreeMap::new(),
            length,
            seed,
            symbol: "synth".into(),
            timeframe: 5,
        }
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.parameters.insert(name.to_string(), value);
        self
    }

    fn param(&self, name: &str, default: f64) -> f64 {
        self.parameters.get(name).copied().unwrap_or(default)
    }

    fn validate(&self) -> Result<(), DataError> {
        for (name, value) in &self.parameters {
            if !KNOWN_PARAMETERS.contains(&name.as_str()) || !value.is_finite() {
                return Err(DataError::InvalidParameter(name.clone()));
            }
        }
        if self.length < 2 {
            return Err(DataError::InvalidParameter("length".into()));
        }
        if self.param("dt", 0.01) <= 0.0 {
            return Err(DataError::InvalidParameter("dt".into()));
        }
        if self.param("sigma", 1.0) < 0.0 {
            return Err(DataError::InvalidParameter("sigma".into()));
        }
        if self.param("spread", 0.0) < 0.0 {
            return Err(DataError::InvalidParameter("spread".into()));
        }
        if self.timeframe == 0 {
            return Err(DataError::InvalidParameter("timeframe".into()));
        }
        Ok(())
    }
}

/// Generates a scalar path and wraps it as bars: each close is one path value,
/// open is the previous close, high/low bracket the pair.
pub fn generate(spec: &SyntheticSpec) -> Result<QuoteSeries, DataError> {
    spec.validate()?;
    let path = generate_path(spec);
    if path.iter().any(|v| !v.is_finite()) {
        return Err(DataError::InvalidParameter("path diverged".into()));
    }
    let spread = spec.param("spread", 0.0);
    let step = i64::from(spec.timeframe) * 60;
    let bars = path
        .iter()
        .enumerate()
        .map(|(i, &close)| {
            let open = if i == 0 { close } else { path[i - 1] };
            Bar {
                timestamp: SYNTHETIC_EPOCH + step * i as i64,
                open,
                high: open.max(close),
                low: open.min(close),
                close,
                spread,
            }
        })
        .collect();
    QuoteSeries::new(spec.symbol.clone(), spec.timeframe, bars)
}

/// Raw scalar path of a synthetic spec (no validation).
pub fn generate_path(spec: &SyntheticSpec) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.length;
    let dt = spec.param("dt", 0.01);
    let sigma = spec.param("sigma", 1.0);
    let mu = spec.param("mu", 0.0);
    let mut out = Vec::with_capacity(n);

    match spec.kind {
        SyntheticKind::Wiener => {
            let mut y = spec.param("y0", 0.0);
            let scale = sigma * dt.sqrt();
            out.push(y);
            for _ in 1..n {
                let z: f64 = StandardNormal.sample(&mut rng);
                y += scale * z;
                out.push(y);
            }
        }
        SyntheticKind::OrnsteinUhlenbeck => {
            // dY = theta (mu - Y) dt + sigma dW, Euler-Maruyama
            let theta = spec.param("theta", 1.0);
            let mut y = spec.param("y0", mu);
            let scale = sigma * dt.sqrt();
            out.push(y);
            for _ in 1..n {
                let z: f64 = StandardNormal.sample(&mut rng);
                y += theta * (mu - y) * dt + scale * z;
                out.push(y);
            }
        }
        SyntheticKind::Gbm => {
            let mut s = spec.param("y0", 1.0);
            let scale = sigma * dt.sqrt();
            out.push(s);
            for _ in 1..n {
                let z: f64 = StandardNormal.sample(&mut rng);
                s += mu * s * dt + scale * s * z;
                out.push(s);
            }
        }
        SyntheticKind::LogisticMap => {
            let r = spec.param("r", 4.0);
            let mut x = spec.param("y0", 0.3);
            out.push(x);
            for _ in 1..n {
                x = r * x * (1.0 - x);
                out.push(x);
            }
        }
        SyntheticKind::LorenzX => {
            // classical parameters sigma=10, rho=28, beta=8/3; RK4 steps of dt
            let mut state = [spec.param("y0", 1.0), 1.0, 1.0];
            out.push(state[0]);
            for _ in 1..n {
                state = lorenz_rk4(state, dt);
                out.push(state[0]);
            }
        }
    }
    out
}

fn lorenz_rhs(s: [f64; 3]) -> [f64; 3] {
    const SIGMA: f64 = 10.0;
    const RHO: f64 = 28.0;
    const BETA: f64 = 8.0 / 3.0;
    [
        SIGMA * (s[1] - s[0]),
        s[0] * (RHO - s[2]) - s[1],
        s[0] * s[1] - BETA * s[2],
    ]
}

fn lorenz_rk4(s: [f64; 3], h: f64) -> [f64; 3] {
    let add =
        |a: [f64; 3], b: [f64; 3], k: f64| [a[0] + k * b[0], a[1] + k * b[1], a[2] + k * b[2]];
    let k1 = lorenz_rhs(s);
    let k2 = lorenz_rhs(add(s, k1, h / 2.0));
    let k3 = lorenz_rhs(add(s, k2, h / 2.0));
    let k4 = lorenz_rhs(add(s, k3, h));
    [
        s[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        s[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        s[2] + h / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
    ]
}
