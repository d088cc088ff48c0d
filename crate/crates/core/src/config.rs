//! Run configuration: a TOML file with top-level keys and one
//! `[symbols.<pair>]` table per traded pair.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decision::IndicatorKind;
use crate::ledger::{pair_kind, PairKind, PlConvention};
use crate::market_data::SyntheticKind;
use crate::wavelet::FamilyName;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("config value {key}: {reason}")]
    Invalid { key: String, reason: String },
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        reason: reason.into(),
    }
}

/// Generated quotes for one symbol; any extra keys are model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSource {
    pub kind: SyntheticKind,
    #[serde(flatten)]
    pub parameters: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SymbolConfig {
    #[serde(default)]
    pub spread: f64,
    #[serde(default)]
    pub swap_long: f64,
    #[serde(default)]
    pub swap_short: f64,
    /// Quote currency to USD, required for cross pairs.
    pub conversion_rate: Option<f64>,
    #[serde(default = "default_digits")]
    pub digits: usize,
    /// CSV quote file at the base timeframe, relative to the config file.
    pub data: Option<PathBuf>,
    pub synthetic: Option<SyntheticSource>,
}

fn default_digits() -> usize {
    5
}

macro_rules! defaults {
    ($($name:ident: $ty:ty = $value:expr;)*) => {
        $(fn $name() -> $ty { $value })*
    };
}

defaults! {
    d_seed: u64 = 1;
    d_base_timeframe: u32 = 5;
    d_factors: Vec<u32> = vec![3];
    d_k_max: usize = 1;
    d_true: bool = true;
    d_wavelet: FamilyName = FamilyName::Haar;
    d_scale: u32 = 1;
    d_window: usize = 512;
    d_alpha1: f64 = 0.1;
    d_ks_alpha: f64 = 0.05;
    d_shift_t: usize = 64;
    d_order_f: usize = 3;
    d_order_g2: usize = 2;
    d_bins: usize = 16;
    d_tail: f64 = 0.5;
    d_density_points: usize = 512;
    d_kappa: f64 = 0.5;
    d_q_hi: f64 = 0.55;
    d_q_lo: f64 = 0.45;
    d_state_window: usize = 48;
    d_train_window: usize = 200;
    d_reoptimize: usize = 12;
    d_perturb_rounds: usize = 20;
    d_temperature: f64 = 0.1;
    d_coupling_window: usize = 96;
    d_lambda: f64 = 1.0;
    d_effectiveness_window: usize = 288;
    d_reallocate_every: usize = 12;
    d_deposit: f64 = 5000.0;
    d_leverage: u32 = 100;
    d_margin_usage: f64 = 0.1;
    d_entry: f64 = 0.2;
    d_sl: f64 = 40.0;
    d_tp: f64 = 40.0;
    d_synthetic_bars: usize = 3000;
    d_out_dir: PathBuf = PathBuf::from("out");
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "d_seed")]
    pub seed: u64,
    /// Minutes.
    #[serde(default = "d_base_timeframe")]
    pub base_timeframe: u32,
    /// One homothetic layer per factor, innermost first.
    #[serde(default = "d_factors")]
    pub homothetic_factors: Vec<u32>,
    #[serde(default = "d_k_max")]
    pub k_max: usize,
    /// Homothetic nodes also run elementary generators at their timeframe.
    #[serde(default = "d_true")]
    pub homothetic_own_generators: bool,
    #[serde(default)]
    pub feedback_depth: usize,
    #[serde(default = "d_wavelet")]
    pub wavelet: FamilyName,
    #[serde(default = "d_scale")]
    pub scale: u32,
    /// Closes per estimation window.
    #[serde(default = "d_window")]
    pub window: usize,
    #[serde(default = "d_alpha1")]
    pub alpha1: f64,
    #[serde(default = "d_ks_alpha")]
    pub ks_alpha: f64,
    #[serde(default = "d_shift_t")]
    pub shift_t: usize,
    #[serde(default = "d_order_f")]
    pub order_f: usize,
    #[serde(default = "d_order_g2")]
    pub order_g2: usize,
    #[serde(default = "d_bins")]
    pub bins: usize,
    #[serde(default = "d_tail")]
    pub tail_extension: f64,
    #[serde(default = "d_density_points")]
    pub density_points: usize,
    #[serde(default)]
    pub indicators: Vec<IndicatorKind>,
    #[serde(default = "d_kappa")]
    pub kappa: f64,
    #[serde(default = "d_q_hi")]
    pub q_hi: f64,
    #[serde(default = "d_q_lo")]
    pub q_lo: f64,
    #[serde(default = "d_state_window")]
    pub state_window: usize,
    #[serde(default = "d_train_window")]
    pub train_window: usize,
    #[serde(default = "d_reoptimize")]
    pub reoptimize_every: usize,
    #[serde(default = "d_perturb_rounds")]
    pub perturb_rounds: usize,
    #[serde(default = "d_temperature")]
    pub temperature: f64,
    #[serde(default = "d_coupling_window")]
    pub coupling_window: usize,
    #[serde(default = "d_lambda")]
    pub lambda_risk: f64,
    #[serde(default)]
    pub floor: f64,
    /// Closed trades looked back on when scoring effectiveness, in base bars.
    #[serde(default = "d_effectiveness_window")]
    pub effectiveness_window: usize,
    #[serde(default = "d_reallocate_every")]
    pub reallocate_every: usize,
    #[serde(default = "d_deposit")]
    pub deposit: f64,
    #[serde(default = "d_leverage")]
    pub leverage: u32,
    /// Share of each symbol's margin budget actually committed per order.
    #[serde(default = "d_margin_usage")]
    pub margin_usage: f64,
    /// Minimum |score| for an entry.
    #[serde(default = "d_entry")]
    pub entry_threshold: f64,
    #[serde(default = "d_sl")]
    pub sl_pips: f64,
    #[serde(default = "d_tp")]
    pub tp_pips: f64,
    #[serde(default)]
    pub pl_convention: PlConvention,
    #[serde(default = "d_synthetic_bars")]
    pub synthetic_bars: usize,
    pub threads: Option<usize>,
    #[serde(default = "d_out_dir")]
    pub out_dir: PathBuf,
    pub symbols: BTreeMap<String, SymbolConfig>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates; relative data paths resolve against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for sym in cfg.symbols.values_mut() {
            if let Some(p) = &sym.data {
                if p.is_relative() {
                    sym.data = Some(base.join(p));
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let unit = |key: &str, v: f64, lo: f64, hi: f64| {
            if v.is_finite() && v >= lo && v <= hi {
                Ok(())
            } else {
                Err(invalid(key, format!("{v} outside [{lo}, {hi}]")))
            }
        };
        if !(self.alpha1 > 0.0 && self.alpha1 < 0.5) {
            return Err(invalid(
                "alpha1",
                format!("{} must lie in (0, 0.5)", self.alpha1),
            ));
        }
        if !(self.ks_alpha > 0.0 && self.ks_alpha < 1.0) {
            return Err(invalid("ks_alpha", "must lie in (0, 1)"));
        }
        if self.base_timeframe == 0 {
            return Err(invalid("base_timeframe", "must be positive"));
        }
        if self.homothetic_factors.iter().any(|f| *f < 2) {
            return Err(invalid("homothetic_factors", "factors must be >= 2"));
        }
        if self.homothetic_factors.len() > self.k_max {
            return Err(invalid(
                "homothetic_factors",
                format!("more layers than k_max = {}", self.k_max),
            ));
        }
        if self.scale == 0 || self.scale > 8 {
            return Err(invalid("scale", "must be in 1..=8"));
        }
        let span = 1usize << self.scale;
        if self.window < 32 * span {
            return Err(invalid(
                "window",
                format!(
                    "needs at least {} closes at scale {}",
                    32 * span,
                    self.scale
                ),
            ));
        }
        if self.shift_t == 0 {
            return Err(invalid("shift_t", "must be positive"));
        }
        if self.order_f > 8 || self.order_g2 > 8 {
            return Err(invalid("order_f", "orders above 8 are not supported"));
        }
        if self.bins < 5 {
            return Err(invalid("bins", "need at least 5"));
        }
        if (self.window >> self.scale).saturating_sub(1) < 10 * self.bins {
            return Err(invalid(
                "bins",
                "the window yields fewer than 10 coefficient pairs per bin",
            ));
        }
        unit("tail_extension", self.tail_extension, 0.0, 10.0)?;
        if self.density_points < 64 {
            return Err(invalid("density_points", "need at least 64"));
        }
        unit("kappa", self.kappa, 0.0, 1.0)?;
        unit("q_hi", self.q_hi, 0.0, 1.0)?;
        unit("q_lo", self.q_lo, 0.0, 1.0)?;
        if self.q_lo >= self.q_hi {
            return Err(invalid("q_lo", "must be below q_hi"));
        }
        for (key, v) in [
            ("state_window", self.state_window),
            ("train_window", self.train_window),
            ("reoptimize_every", self.reoptimize_every),
            ("coupling_window", self.coupling_window),
            ("effectiveness_window", self.effectiveness_window),
            ("reallocate_every", self.reallocate_every),
        ] {
            if v == 0 {
                return Err(invalid(key, "must be positive"));
            }
        }
        if self.train_window < 30 {
            return Err(invalid("train_window", "need at least 30 bars"));
        }
        unit("temperature", self.temperature, 0.0, 1.0)?;
        unit("lambda_risk", self.lambda_risk, 0.0, f64::MAX)?;
        unit("floor", self.floor, 0.0, 1.0)?;
        if self.floor * self.symbols.len() as f64 > 1.0 {
            return Err(invalid("floor", "floor times symbol count exceeds 1"));
        }
        if !(self.deposit > 0.0 && self.deposit.is_finite()) {
            return Err(invalid("deposit", "must be positive"));
        }
        if self.leverage == 0 || self.leverage > 1000 {
            return Err(invalid("leverage", "must be in 1..=1000"));
        }
        if !(self.margin_usage > 0.0 && self.margin_usage <= 1.0) {
            return Err(invalid("margin_usage", "must lie in (0, 1]"));
        }
        unit("entry_threshold", self.entry_threshold, 0.0, 1.0)?;
        unit("sl_pips", self.sl_pips, 0.0, 1e6)?;
        unit("tp_pips", self.tp_pips, 0.0, 1e6)?;
        if self.threads == Some(0) {
            return Err(invalid("threads", "must be positive"));
        }
        if self.symbols.is_empty() {
            return Err(invalid("symbols", "at least one symbol required"));
        }
        for (name, s) in &self.symbols {
            let key = format!("symbols.{name}");
            if name.len() != 6 || !name.chars().all(|c| c.is_ascii_lowercase()) {
                return Err(invalid(&key, "pair codes are six lowercase letters"));
            }
            unit(&format!("{key}.spread"), s.spread, 0.0, 1.0e3)?;
            if !s.swap_long.is_finite() || !s.swap_short.is_finite() {
                return Err(invalid(&key, "swap rates must be finite"));
            }
            if s.digits > 8 {
                return Err(invalid(&format!("{key}.digits"), "at most 8"));
            }
            match (pair_kind(name), s.conversion_rate) {
                (PairKind::Cross, None) => {
                    return Err(invalid(
                        &format!("{key}.conversion_rate"),
                        "required for cross pairs",
                    ))
                }
                (_, Some(r)) if !(r > 0.0 && r.is_finite()) => {
                    return Err(invalid(
                        &format!("{key}.conversion_rate"),
                        "must be positive",
                    ))
                }
                _ => {}
            }
            match (&s.data, &s.synthetic) {
                (Some(_), Some(_)) | (None, None) => {
                    return Err(invalid(
                        &key,
                        "exactly one of `data` or `synthetic` is required",
                    ))
                }
                _ => {}
            }
        }
        if self.synthetic_bars < self.window + self.shift_t + 2 {
            return Err(invalid(
                "synthetic_bars",
                "shorter than the estimation warmup",
            ));
        }
        Ok(())
    }

    pub fn symbol_names(&self) -> Vec<String> {
        self.symbols.keys().cloned().collect()
    }

    /// Pip size of a symbol: one unit of the second-to-last printed digit.
    pub fn pip(&self, symbol: &str) -> f64 {
        let digits = self.symbols.get(symbol).map_or(5, |s| s.digits);
        10f64.powi(-(digits as i32 - 1))
    }
}
