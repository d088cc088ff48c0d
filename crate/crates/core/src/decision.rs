//! Elementary decision generators: the dynamic criterion on the sign of the
//! coefficient increment, the statistical criterion on stationary-density
//! probabilities, the Kolmogorov-Smirnov gate, and classic indicators.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_data::QuoteSeries;
use crate::sde::KsResult;

#[derive(Debug, Error, PartialEq)]
pub enum DecisionError {
    #[error("series too short: needed {needed}, got {got}")]
    SeriesTooShort { needed: usize, got: usize },
    #[error("invalid risk configuration: {0}")]
    InvalidRisk(String),
    #[error("invalid indicator parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskConfig {
    pub alpha1: f64,
    pub ks_alpha: f64,
    /// Time shift `T` in bars.
    pub shift_t: usize,
}

impl RiskConfig {
    pub fn new(alpha1: f64, ks_alpha: f64, shift_t: usize) -> Result<Self, DecisionError> {
        if !(alpha1 > 0.0 && alpha1 < 0.5) {
            return Err(DecisionError::InvalidRisk(format!(
                "alpha1 = {alpha1} outside (0, 0.5)"
            )));
        }
        if !(ks_alpha > 0.0 && ks_alpha < 1.0) {
            return Err(DecisionError::InvalidRisk(format!(
                "ks_alpha = {ks_alpha} outside (0, 1)"
            )));
        }
        if shift_t == 0 {
            return Err(DecisionError::InvalidRisk(
                "shift_t must be positive".into(),
            ));
        }
        Ok(RiskConfig {
            alpha1,
            ks_alpha,
            shift_t,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    EnterLong,
    EnterShort,
    ExitLong,
    ExitShort,
    Hold,
}

impl Action {
    /// Directional pressure: entries long and short exits push up.
    pub fn direction(self) -> i8 {
        match self {
            Action::EnterLong | Action::ExitShort => 1,
            Action::EnterShort | Action::ExitLong => -1,
            Action::Hold => 0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Action::EnterLong => "enter_long",
            Action::EnterShort => "enter_short",
            Action::ExitLong => "exit_long",
            Action::ExitShort => "exit_short",
            Action::Hold => "hold",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Dynamic,
    Statistical,
    Convolution,
    Macd,
    Bollinger,
    Rsi,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Dynamic => "dynamic",
            Source::Statistical => "statistical",
            Source::Convolution => "convolution",
            Source::Macd => "macd",
            Source::Bollinger => "bollinger",
            Source::Rsi => "rsi",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    pub action: Action,
    pub source: Source,
    /// In `[0, 1]`; zero for holds.
    pub strength: f64,
}

impl Signal {
    pub fn hold(source: Source) -> Self {
        Signal {
            action: Action::Hold,
            source,
            strength: 0.0,
        }
    }

    fn new(action: Action, source: Source, strength: f64) -> Self {
        if action == Action::Hold {
            return Signal::hold(source);
        }
        Signal {
            action,
            source,
            strength: strength.clamp(0.0, 1.0),
        }
    }
}

/// Long entry when the coefficient is falling (`-dy > 0`) and `P_s > 1 - alpha1`;
/// short entry when rising and `P_s < alpha1`.
pub fn dynamic_signal(dy: f64, p_s: f64, cfg: &RiskConfig) -> Signal {
    let strength = (2.0 * p_s - 1.0).abs();
    let action = if -dy > 0.0 && p_s > 1.0 - cfg.alpha1 {
        Action::EnterLong
    } else if -dy < 0.0 && p_s < cfg.alpha1 {
        Action::EnterShort
    } else {
        Action::Hold
    };
    Signal::new(action, Source::Dynamic, strength)
}

/// Resale (`exit_long`) when `P_s > 1 - alpha1` on the shifted-convolution
/// density, repurchase (`exit_short`) when `P_s < alpha1`.
pub fn statistical_signal(p_s_conv: f64, cfg: &RiskConfig) -> Signal {
    let strength = (2.0 * p_s_conv - 1.0).abs();
    let action = if p_s_conv > 1.0 - cfg.alpha1 {
        Action::ExitLong
    } else if p_s_conv < cfg.alpha1 {
        Action::ExitShort
    } else {
        Action::Hold
    };
    Signal::new(action, Source::Statistical, strength)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    Dynamic,
    Convolution,
}

/// Stationary-density criteria need a shift-stable density; the convolution
/// criterion needs a detected shift.
pub fn stationarity_gate(ks: &KsResult, criterion: Criterion) -> bool {
    match criterion {
        Criterion::Dynamic => !ks.reject_equality,
        Criterion::Convolution => ks.reject_equality,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorKind {
    Macd,
    Bollinger,
    Rsi,
}

impl IndicatorKind {
    pub fn source(self) -> Source {
        match self {
            IndicatorKind::Macd => Source::Macd,
            IndicatorKind::Bollinger => Source::Bollinger,
            IndicatorKind::Rsi => Source::Rsi,
        }
    }
}

fn param(params: &BTreeMap<String, f64>, name: &str, default: f64) -> Result<f64, DecisionError> {
    let v = params.get(name).copied().unwrap_or(default);
    if !v.is_finite() || v <= 0.0 {
        return Err(DecisionError::InvalidParameter(name.to_string()));
    }
    Ok(v)
}

fn window(
    params: &BTreeMap<String, f64>,
    name: &str,
    default: usize,
) -> Result<usize, DecisionError> {
    let v = param(params, name, default as f64)?;
    if v.fract() != 0.0 || v < 1.0 {
        return Err(DecisionError::InvalidParameter(name.to_string()));
    }
    Ok(v as usize)
}

/// Exponential moving average seeded with the first value.
pub fn ema(values: &[f64], period: usize) -> Vec<f64> {
    let k = 2.0 / (period as f64 + 1.0);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = match values.first() {
        Some(v) => *v,
        None => return out,
    };
    for &v in values {
        acc += k * (v - acc);
        out.push(acc);
    }
    out
}

/// Wilder RSI at the last bar.
pub fn rsi(closes: &[f64], period: usize) -> Option<f64> {
    if closes.len() < period + 1 {
        return None;
    }
    let changes: Vec<f64> = closes.windows(2).map(|w| w[1] - w[0]).collect();
    let mut gain = changes[..period].iter().map(|c| c.max(0.0)).sum::<f64>() / period as f64;
    let mut loss = changes[..period].iter().map(|c| (-c).max(0.0)).sum::<f64>() / period as f64;
    for &c in &changes[period..] {
        gain = (gain * (period as f64 - 1.0) + c.max(0.0)) / period as f64;
        loss = (loss * (period as f64 - 1.0) + (-c).max(0.0)) / period as f64;
    }
    Some(if gain == 0.0 && loss == 0.0 {
        50.0
    } else if loss == 0.0 {
        100.0
    } else {
        100.0 - 100.0 / (1.0 + gain / loss)
    })
}

/// Textbook indicator rules: MACD(12,26,9) signal-line cross, Bollinger(20, 2)
/// band touch as mean reversion, RSI(14) outside 30/70.
///
/// Parameter keys: `fast`, `slow`, `signal` (MACD); `period`, `k` (Bollinger);
/// `period`, `lower`, `upper` (RSI).
pub fn indicator_signal(
    series: &QuoteSeries,
    kind: IndicatorKind,
    params: &BTreeMap<String, f64>,
) -> Result<Signal, DecisionError> {
    indicator_signal_on_closes(&series.closes(), kind, params)
}

pub fn indicator_signal_on_closes(
    closes: &[f64],
    kind: IndicatorKind,
    params: &BTreeMap<String, f64>,
) -> Result<Signal, DecisionError> {
    let too_short = |needed: usize| DecisionError::SeriesTooShort {
        needed,
        got: closes.len(),
    };
    match kind {
        IndicatorKind::Macd => {
            let fast = window(params, "fast", 12)?;
            let slow = window(params, "slow", 26)?;
            let signal_period = window(params, "signal", 9)?;
            let needed = slow + signal_period;
            if closes.len() < needed {
                return Err(too_short(needed));
            }
            let ef = ema(closes, fast);
            let es = ema(closes, slow);
            let macd: Vec<f64> = ef.iter().zip(&es).map(|(a, b)| a - b).collect();
            let sig = ema(&macd, signal_period);
            let n = closes.len();
            let prev = macd[n - 2] - sig[n - 2];
            let now = macd[n - 1] - sig[n - 1];
            let action = if prev <= 0.0 && now > 0.0 {
                Action::EnterLong
            } else if prev >= 0.0 && now < 0.0 {
                Action::EnterShort
            } else {
                Action::Hold
            };
            Ok(Signal::new(action, Source::Macd, 1.0))
        }
        IndicatorKind::Bollinger => {
            let period = window(params, "period", 20)?;
            let k = param(params, "k", 2.0)?;
            if closes.len() < period {
                return Err(too_short(period));
            }
            let tail = &closes[closes.len() - period..];
            let mean = tail.iter().sum::<f64>() / period as f64;
            let sd = (tail.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / period as f64).sqrt();
            let last = closes[closes.len() - 1];
            if sd <= 0.0 {
                return Ok(Signal::hold(Source::Bollinger));
            }
            let action = if last >= mean + k * sd {
                Action::EnterShort
            } else if last <= mean - k * sd {
                Action::EnterLong
            } else {
                Action::Hold
            };
            Ok(Signal::new(action, Source::Bollinger, 1.0))
        }
        IndicatorKind::Rsi => {
            let period = window(params, "period", 14)?;
            let lower = param(params, "lower", 30.0)?;
            let upper = param(params, "upper", 70.0)?;
            let value = rsi(closes, period).ok_or_else(|| too_short(period + 1))?;
            let action = if value < lower {
                Action::EnterLong
            } else if value > upper {
                Action::EnterShort
            } else {
                Action::Hold
            };
            Ok(Signal::new(
                action,
                Source::Rsi,
                (value - 50.0).abs() / 50.0,
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::Bar;
    use proptest::prelude::*;

    fn cfg() -> RiskConfig {
        RiskConfig::new(0.05, 0.05, 10).unwrap()
    }

    fn ks(reject: bool) -> KsResult {
        KsResult {
            statistic: 0.0,
            threshold: 0.1,
            reject_equality: reject,
            n1: 10,
            n2: 10,
        }
    }

    fn no_params() -> BTreeMap<String, f64> {
        BTreeMap::new()
    }

    #[test]
    fn risk_validation() {
        assert!(RiskConfig::new(0.7, 0.05, 10).is_err());
        assert!(RiskConfig::new(0.5, 0.05, 10).is_err());
        assert!(RiskConfig::new(0.05, 1.0, 10).is_err());
        assert!(RiskConfig::new(0.05, 0.05, 0).is_err());
    }

    #[test]
    fn dynamic_rule() {
        let s = dynamic_signal(-0.5, 0.97, &cfg());
        assert_eq!(s.action, Action::EnterLong);
        assert!((s.strength - 0.94).abs() < 1e-12);
        assert_eq!(dynamic_signal(0.5, 0.03, &cfg()).action, Action::EnterShort);
        for p in [0.0, 0.01, 0.5, 0.99, 1.0] {
            let s = dynamic_signal(0.0, p, &cfg());
            assert_eq!(s.action, Action::Hold);
            assert_eq!(s.strength, 0.0);
        }
    }

    #[test]
    fn statistical_rule() {
        assert_eq!(statistical_signal(0.99, &cfg()).action, Action::ExitLong);
        assert_eq!(statistical_signal(0.5, &cfg()).action, Action::Hold);
        assert_eq!(statistical_signal(0.01, &cfg()).action, Action::ExitShort);
    }

    #[test]
    fn gate_rule() {
        assert!(stationarity_gate(&ks(false), Criterion::Dynamic));
        assert!(!stationarity_gate(&ks(false), Criterion::Convolution));
        assert!(stationarity_gate(&ks(true), Criterion::Convolution));
        assert!(!stationarity_gate(&ks(true), Criterion::Dynamic));
    }

    #[test]
    fn rsi_all_gains_is_overbought() {
        let closes: Vec<f64> = (0..30).map(|i| 1.0 + i as f64 * 0.001).collect();
        assert_eq!(rsi(&closes, 14), Some(100.0));
        let s = indicator_signal_on_closes(&closes, IndicatorKind::Rsi, &no_params()).unwrap();
        assert_eq!(s.action, Action::EnterShort);
    }

    #[test]
    fn flat_bollinger_holds() {
        let s =
            indicator_signal_on_closes(&[1.2; 40], IndicatorKind::Bollinger, &no_params()).unwrap();
        assert_eq!(s.action, Action::Hold);
    }

    #[test]
    fn bollinger_touches() {
        let mut closes = vec![1.0, 1.01].repeat(15);
        closes.push(1.1);
        let s =
            indicator_signal_on_closes(&closes, IndicatorKind::Bollinger, &no_params()).unwrap();
        assert_eq!(s.action, Action::EnterShort);
        closes.pop();
        closes.push(0.9);
        let s =
            indicator_signal_on_closes(&closes, IndicatorKind::Bollinger, &no_params()).unwrap();
        assert_eq!(s.action, Action::EnterLong);
    }

    #[test]
    fn too_short_series() {
        let err =
            indicator_signal_on_closes(&[1.0; 10], IndicatorKind::Macd, &no_params()).unwrap_err();
        assert_eq!(
            err,
            DecisionError::SeriesTooShort {
                needed: 35,
                got: 10
            }
        );
        assert!(indicator_signal_on_closes(&[1.0; 14], IndicatorKind::Rsi, &no_params()).is_err());
    }

    // Independent EMA recursion used to place the MACD cross on the last bar.
    fn oracle_macd_gap(closes: &[f64]) -> Vec<f64> {
        let step = |prev: f64, x: f64, n: f64| prev + 2.0 / (n + 1.0) * (x - prev);
        let (mut f, mut s) = (closes[0], closes[0]);
        let mut line = Vec::new();
        for &c in closes {
            f = step(f, c, 12.0);
            s = step(s, c, 26.0);
            line.push(f - s);
        }
        let mut sig = line[0];
        line.iter()
            .map(|&m| {
                sig = step(sig, m, 9.0);
                m - sig
            })
            .collect()
    }

    #[test]
    fn macd_cross_on_final_bar() {
        let mut closes: Vec<f64> = (0..60).map(|i| 1.5 - i as f64 * 0.002).collect();
        let mut found = false;
        for step in 0..50 {
            closes.push(closes[closes.len() - 1] + 0.004 * (step + 1) as f64);
            let gap = oracle_macd_gap(&closes);
            let n = gap.len();
            if gap[n - 2] <= 0.0 && gap[n - 1] > 0.0 {
                found = true;
                break;
            }
        }
        assert!(found, "oracle never produced a cross");
        let s = indicator_signal_on_closes(&closes, IndicatorKind::Macd, &no_params()).unwrap();
        assert_eq!(s.action, Action::EnterLong);
        let mirrored: Vec<f64> = closes.iter().map(|c| 3.0 - c).collect();
        let s = indicator_signal_on_closes(&mirrored, IndicatorKind::Macd, &no_params()).unwrap();
        assert_eq!(s.action, Action::EnterShort);
    }

    #[test]
    fn indicator_signal_reads_series() {
        let bars = (0..30)
            .map(|i| Bar::flat(i * 300, 1.0 + i as f64 * 0.001))
            .collect();
        let series = QuoteSeries::new("eurusd", 5, bars).unwrap();
        let s = indicator_signal(&series, IndicatorKind::Rsi, &no_params()).unwrap();
        assert_eq!(s.action, Action::EnterShort);
    }

    proptest! {
        #[test]
        fn dynamic_entries_are_exclusive(dy in -1.0f64..1.0, p in 0.0f64..=1.0, a in 0.001f64..0.499) {
            let c = RiskConfig::new(a, 0.05, 5).unwrap();
            let s = dynamic_signal(dy, p, &c);
            let long = -dy > 0.0 && p > 1.0 - a;
            let short = -dy < 0.0 && p < a;
            prop_assert!(!(long && short));
            prop_assert!(s.action == Action::Hold || s.strength > 0.0 || p == 0.5);
        }

        #[test]
        fn statistical_mirror(p in 0.0f64..=1.0) {
            let a = statistical_signal(p, &cfg()).action;
            let b = statistical_signal(1.0 - p, &cfg()).action;
            let mirrored = match a {
                Action::ExitLong => Action::ExitShort,
                Action::ExitShort => Action::ExitLong,
                other => other,
            };
            prop_assert_eq!(b, mirrored);
        }

        #[test]
        fn rsi_flips_on_sign_reversal(steps in prop::collection::vec(-0.01f64..0.01, 20..60)) {
            let mut closes = vec![0.0];
            for s in steps {
                closes.push(closes[closes.len() - 1] + s);
            }
            let neg: Vec<f64> = closes.iter().map(|c| -c).collect();
            let a = indicator_signal_on_closes(&closes, IndicatorKind::Rsi, &no_params()).unwrap().action;
            let b = indicator_signal_on_closes(&neg, IndicatorKind::Rsi, &no_params()).unwrap().action;
            let flipped = match a {
                Action::EnterLong => Action::EnterShort,
                Action::EnterShort => Action::EnterLong,
                other => other,
            };
            prop_assert_eq!(b, flipped);
        }
    }
}
