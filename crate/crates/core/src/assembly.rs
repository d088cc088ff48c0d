//! Fusion of elementary generators into per-symbol decisions.
//!
//! Boolean generator weights are chosen to minimize the count of bars where
//! the weighted vote disagrees with the realized quote-change sign, then
//! perturbed with random survival. Per-symbol scores are coupled through
//! return correlations, gated by unit states, and nested across timeframes
//! (a homothetic node treats each child's output as a generator).

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decision::{
    dynamic_signal, indicator_signal_on_closes, stationarity_gate, statistical_signal, Action,
    Criterion, IndicatorKind, RiskConfig, Signal, Source,
};
use crate::market_data::QuoteSeries;
use crate::sde::{
    convolve_shifted, estimate_fg, ks_two_sample, prob_nonpositive, stationary_density, FitConfig,
    KsResult, StationaryDensity,
};
use crate::wavelet::{decompose_values, increments, WaveletFamily};

#[derive(Debug, Error, PartialEq)]
pub enum AssemblyError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty history")]
    EmptyHistory,
    #[error("history too short: need {needed}, got {got}")]
    HistoryTooShort { needed: usize, got: usize },
    #[error("generator actions must be -1, 0 or +1")]
    InvalidAction,
    #[error("unknown symbol {0}")]
    UnknownSymbol(String),
    #[error("capacity overflows 128 bits")]
    Overflow,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid coupling matrix: {0}")]
    InvalidMatrix(String),
    #[error("invalid node: {0}")]
    InvalidNode(String),
    #[error("no data at timeframe {0}")]
    MissingTimeframeData(u32),
}

/// Minimum labeled bars for weight optimization.
pub const MIN_TRAINING_BARS: usize = 30;
/// Largest generator count searched exhaustively.
pub const EXHAUSTIVE_LIMIT: usize = 10;

/// Two Boolean slots per generator: slot `2g` gates its long votes, slot
/// `2g + 1` its short votes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorWeights {
    pub weights: Vec<u8>,
    pub mismatch_norm: u64,
}

impl GeneratorWeights {
    pub fn generators(&self) -> usize {
        self.weights.len() / 2
    }

    pub fn active_count(&self) -> usize {
        self.weights.iter().filter(|w| **w == 1).count()
    }
}

fn validate_history(history: &[Vec<i8>], realized: &[i8]) -> Result<usize, AssemblyError> {
    if history.is_empty() {
        return Err(AssemblyError::EmptyHistory);
    }
    if history.len() != realized.len() {
        return Err(AssemblyError::LengthMismatch(history.len(), realized.len()));
    }
    if history.len() < MIN_TRAINING_BARS {
        return Err(AssemblyError::HistoryTooShort {
            needed: MIN_TRAINING_BARS,
            got: history.len(),
        });
    }
    let m = history[0].len();
    if m == 0 {
        return Err(AssemblyError::EmptyHistory);
    }
    for row in history {
        if row.len() != m {
            return Err(AssemblyError::LengthMismatch(row.len(), m));
        }
        if row.iter().any(|a| !(-1..=1).contains(a)) {
            return Err(AssemblyError::InvalidAction);
        }
    }
    if realized.iter().any(|a| !(-1..=1).contains(a)) {
        return Err(AssemblyError::InvalidAction);
    }
    Ok(m)
}

/// Weighted vote of one bar.
pub fn vote(weights: &[u8], actions: &[i8]) -> i32 {
    actions
        .iter()
        .enumerate()
        .map(|(g, &a)| match a {
            1 => i32::from(weights[2 * g]),
            -1 => -i32::from(weights[2 * g + 1]),
            _ => 0,
        })
        .sum()
}

/// Bars with a nonzero realized sign where `sign(vote)` differs from it.
pub fn mismatch_norm(weights: &[u8], history: &[Vec<i8>], realized: &[i8]) -> u64 {
    history
        .iter()
        .zip(realized)
        .filter(|(_, &r)| r != 0)
        .filter(|(row, &r)| vote(weights, row).signum() as i8 != r)
        .count() as u64
}

/// Globally optimal weights for up to [`EXHAUSTIVE_LIMIT`] generators; ties go
/// to fewer active slots, then to the lexicographically smallest vector.
pub fn optimize_weights(
    history: &[Vec<i8>],
    realized: &[i8],
) -> Result<GeneratorWeights, AssemblyError> {
    optimize_weights_seeded(history, realized, 0)
}

/// As [`optimize_weights`]; `seed` drives the perturbation search used above
/// the exhaustive limit.
pub fn optimize_weights_seeded(
    history: &[Vec<i8>],
    realized: &[i8],
    seed: u64,
) -> Result<GeneratorWeights, AssemblyError> {
    let m = validate_history(history, realized)?;
    if m > EXHAUSTIVE_LIMIT {
        return Ok(greedy_search(history, realized, m, seed));
    }
    let slots = 2 * m;
    // Slot i maps to mask bit (slots - 1 - i): the integer order of masks is
    // the lexicographic order of weight vectors.
    let bit = |slot: usize| 1u32 << (slots - 1 - slot);
    let rows: Vec<(u32, u32, i8)> = history
        .iter()
        .zip(realized)
        .filter(|(_, &r)| r != 0)
        .map(|(row, &r)| {
            let mut up = 0u32;
            let mut down = 0u32;
            for (g, &a) in row.iter().enumerate() {
                match a {
                    1 => up |= bit(2 * g),
                    -1 => down |= bit(2 * g + 1),
                    _ => {}
                }
            }
            (up, down, r)
        })
        .collect();

    let mut best: Option<(u64, u32, u32)> = None;
    for mask in 0u32..(1u32 << slots) {
        let mut miss = 0u64;
        for &(up, down, r) in &rows {
            let v = (mask & up).count_ones() as i32 - (mask & down).count_ones() as i32;
            if v.signum() as i8 != r {
                miss += 1;
            }
        }
        let key = (miss, mask.count_ones(), mask);
        if best.is_none_or(|b| key < b) {
            best = Some(key);
        }
    }
    let (miss, _, mask) = best.expect("at least one mask");
    let weights = (0..slots).map(|s| u8::from(mask & bit(s) != 0)).collect();
    Ok(GeneratorWeights {
        weights,
        mismatch_norm: miss,
    })
}

fn greedy_search(history: &[Vec<i8>], realized: &[i8], m: usize, seed: u64) -> GeneratorWeights {
    let mut weights = vec![0u8; 2 * m];
    let mut norm = mismatch_norm(&weights, history, realized);
    loop {
        let mut best: Option<(u64, usize)> = None;
        for slot in 0..weights.len() {
            weights[slot] ^= 1;
            let n = mismatch_norm(&weights, history, realized);
            weights[slot] ^= 1;
            if n < norm && best.is_none_or(|b| n < b.0) {
                best = Some((n, slot));
            }
        }
        match best {
            Some((n, slot)) => {
                weights[slot] ^= 1;
                norm = n;
            }
            None => break,
        }
    }
    let mut incumbent = GeneratorWeights {
        weights,
        mismatch_norm: norm,
    };
    let temperature = 1.0 / (2 * m) as f64;
    for round in 0..200u64 {
        incumbent = perturb(
            &incumbent,
            history,
            realized,
            temperature,
            mix_seed(&[seed, round]),
        );
    }
    incumbent
}

/// Flips each slot with probability `temperature`; the candidate survives iff
/// its mismatch norm does not exceed the incumbent's.
pub fn perturb(
    weights: &GeneratorWeights,
    history: &[Vec<i8>],
    realized: &[i8],
    temperature: f64,
    seed: u64,
) -> GeneratorWeights {
    if temperature <= 0.0 {
        return weights.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = temperature.min(1.0);
    let candidate: Vec<u8> = weights
        .weights
        .iter()
        .map(|&w| if rng.random::<f64>() < p { w ^ 1 } else { w })
        .collect();
    let norm = mismatch_norm(&candidate, history, realized);
    if norm <= weights.mismatch_norm {
        GeneratorWeights {
            weights: candidate,
            mismatch_norm: norm,
        }
    } else {
        weights.clone()
    }
}

/// Weighted, strength-scaled vote in `[-1, 1]`, averaged over generators with
/// at least one active slot.
pub fn fuse_score(weights: &[u8], actions: &[i8], strengths: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut active = 0usize;
    for (g, (&a, &s)) in actions.iter().zip(strengths).enumerate() {
        if weights[2 * g] == 1 || weights[2 * g + 1] == 1 {
            active += 1;
        }
        let w = match a {
            1 => weights[2 * g],
            -1 => weights[2 * g + 1],
            _ => 0,
        };
        total += f64::from(w) * f64::from(a) * s;
    }
    (total / active.max(1) as f64).clamp(-1.0, 1.0)
}

/// SplitMix64 mixing of a seed path; used to derive independent RNG streams.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingMatrix {
    pub symbols: Vec<String>,
    pub rho: Vec<Vec<f64>>,
    pub window: usize,
}

impl CouplingMatrix {
    pub fn new(
        symbols: Vec<String>,
        rho: Vec<Vec<f64>>,
        window: usize,
    ) -> Result<Self, AssemblyError> {
        let n = symbols.len();
        if rho.len() != n || rho.iter().any(|r| r.len() != n) {
            return Err(AssemblyError::InvalidMatrix("shape".into()));
        }
        for i in 0..n {
            if (rho[i][i] - 1.0).abs() > 1e-12 {
                return Err(AssemblyError::InvalidMatrix("diagonal must be 1".into()));
            }
            for j in 0..n {
                if !(rho[i][j].abs() <= 1.0) || (rho[i][j] - rho[j][i]).abs() > 1e-12 {
                    return Err(AssemblyError::InvalidMatrix(format!("entry ({i}, {j})")));
                }
            }
        }
        Ok(CouplingMatrix {
            symbols,
            rho,
            window,
        })
    }

    pub fn identity(symbols: Vec<String>) -> Self {
        let n = symbols.len();
        let rho = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        CouplingMatrix {
            symbols,
            rho,
            window: 0,
        }
    }

    /// Pearson correlation of close-to-close changes over the last `window`
    /// changes of each series. Flat series correlate with nothing.
    pub fn from_closes(
        symbols: Vec<String>,
        closes: &[&[f64]],
        window: usize,
    ) -> Result<Self, AssemblyError> {
        if closes.len() != symbols.len() {
            return Err(AssemblyError::LengthMismatch(closes.len(), symbols.len()));
        }
        let changes: Vec<Vec<f64>> = closes
            .iter()
            .map(|c| {
                let start = c.len().saturating_sub(window + 1);
                c[start..].windows(2).map(|w| w[1] - w[0]).collect()
            })
            .collect();
        let n = symbols.len();
        let mut rho = vec![vec![0.0; n]; n];
        for i in 0..n {
            rho[i][i] = 1.0;
            for j in (i + 1)..n {
                let r = pearson(&changes[i], &changes[j]);
                rho[i][j] = r;
                rho[j][i] = r;
            }
        }
        Ok(CouplingMatrix {
            symbols,
            rho,
            window,
        })
    }

    fn index(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return 0.0;
    }
    let (a, b) = (&a[a.len() - n..], &b[b.len() - n..]);
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// `adjusted_a = clamp(raw_a + kappa * sum_{b != a} rho_ab raw_b / (n - 1), -1, 1)`.
pub fn couple(
    raw_scores: &[(String, f64)],
    rho: &CouplingMatrix,
    kappa: f64,
) -> Result<Vec<(String, f64)>, AssemblyError> {
    let idx: Vec<usize> = raw_scores
        .iter()
        .map(|(s, _)| {
            rho.index(s)
                .ok_or_else(|| AssemblyError::UnknownSymbol(s.clone()))
        })
        .collect::<Result<_, _>>()?;
    let n = raw_scores.len();
    if n <= 1 {
        return Ok(raw_scores.to_vec());
    }
    Ok(raw_scores
        .iter()
        .enumerate()
        .map(|(a, (sym, raw))| {
            let spill: f64 = raw_scores
                .iter()
                .enumerate()
                .filter(|(b, _)| *b != a)
                .map(|(b, (_, rb))| rho.rho[idx[a]][idx[b]] * rb)
                .sum();
            let adjusted = (raw + kappa * spill / (n - 1) as f64).clamp(-1.0, 1.0);
            (sym.clone(), adjusted)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitStateKind {
    Passive,
    SemiActive,
    Active,
}

impl UnitStateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            UnitStateKind::Passive => "passive",
            UnitStateKind::SemiActive => "semi_active",
            UnitStateKind::Active => "active",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitState {
    pub state: UnitStateKind,
    pub hit_rate: f64,
    pub window: usize,
}

impl UnitState {
    pub fn initial(window: usize) -> Self {
        UnitState {
            state: UnitStateKind::Active,
            hit_rate: 0.5,
            window,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateThresholds {
    pub q_hi: f64,
    pub q_lo: f64,
}

impl Default for StateThresholds {
    fn default() -> Self {
        StateThresholds {
            q_hi: 0.55,
            q_lo: 0.45,
        }
    }
}

impl StateThresholds {
    pub fn classify(&self, hit_rate: f64) -> UnitStateKind {
        if hit_rate >= self.q_hi {
            UnitStateKind::Active
        } else if hit_rate <= self.q_lo {
            UnitStateKind::Passive
        } else {
            UnitStateKind::SemiActive
        }
    }
}

/// Re-rates a unit from the fraction of its nonzero sign predictions that
/// came true. With no nonzero predictions the state is kept.
pub fn update_state(
    current: &UnitState,
    predicted: &[i8],
    realized: &[i8],
    thresholds: &StateThresholds,
) -> Result<UnitState, AssemblyError> {
    if predicted.len() != realized.len() {
        return Err(AssemblyError::LengthMismatch(
            predicted.len(),
            realized.len(),
        ));
    }
    let made = predicted.iter().filter(|p| **p != 0).count();
    if made == 0 {
        return Ok(UnitState {
            window: predicted.len(),
            ..*current
        });
    }
    let correct = predicted
        .iter()
        .zip(realized)
        .filter(|(p, r)| **p != 0 && p == r)
        .count();
    let hit_rate = correct as f64 / made as f64;
    Ok(UnitState {
        state: thresholds.classify(hit_rate),
        hit_rate,
        window: predicted.len(),
    })
}

/// Past decisions as a `{-1, 0, +1}` stream; empty when `depth` is 0.
pub fn vertical_feedback(decision_history: &[Action], depth: usize) -> Vec<i8> {
    if depth == 0 {
        return Vec::new();
    }
    decision_history.iter().map(|a| a.direction()).collect()
}

/// `(M! * N!)^(K + 1)`.
pub fn capacity(m: u32, n: u32, k: u32) -> Result<u128, AssemblyError> {
    if m == 0 || n == 0 {
        return Err(AssemblyError::InvalidArgument(
            "M and N must be at least 1".into(),
        ));
    }
    let fact = |x: u32| -> Result<u128, AssemblyError> {
        (1..=u128::from(x)).try_fold(1u128, |acc, v| {
            acc.checked_mul(v).ok_or(AssemblyError::Overflow)
        })
    };
    let base = fact(m)?
        .checked_mul(fact(n)?)
        .ok_or(AssemblyError::Overflow)?;
    base.checked_pow(k + 1).ok_or(AssemblyError::Overflow)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Elementary,
    Homothetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssemblyNode {
    pub kind: NodeKind,
    /// Minutes.
    pub timeframe: u32,
    pub children: Vec<AssemblyNode>,
    pub feedback_depth: usize,
    /// Whether a homothetic node also runs the elementary generators on its
    /// own timeframe, next to its children.
    pub own_generators: bool,
}

impl AssemblyNode {
    pub fn elementary(timeframe: u32) -> Self {
        AssemblyNode {
            kind: NodeKind::Elementary,
            timeframe,
            children: Vec::new(),
            feedback_depth: 0,
            own_generators: true,
        }
    }

    pub fn homothetic(timeframe: u32, children: Vec<AssemblyNode>, own_generators: bool) -> Self {
        AssemblyNode {
            kind: NodeKind::Homothetic,
            timeframe,
            children,
            feedback_depth: 0,
            own_generators,
        }
    }

    /// Elementary node at `base` wrapped once per factor, innermost first.
    pub fn nested(base: u32, factors: &[u32], own_generators: bool) -> Self {
        let mut node = AssemblyNode::elementary(base);
        let mut tf = base;
        for &f in factors {
            tf *= f;
            node = AssemblyNode::homothetic(tf, vec![node], own_generators);
        }
        node
    }

    pub fn depth(&self) -> usize {
        self.children
            .iter()
            .map(|c| c.depth() + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn validate(&self, max_depth: usize) -> Result<(), AssemblyError> {
        if self.timeframe == 0 {
            return Err(AssemblyError::InvalidNode("zero timeframe".into()));
        }
        if self.depth() > max_depth {
            return Err(AssemblyError::InvalidNode(format!(
                "nesting depth {} exceeds {max_depth}",
                self.depth()
            )));
        }
        match self.kind {
            NodeKind::Elementary if !self.children.is_empty() => Err(AssemblyError::InvalidNode(
                "elementary node with children".into(),
            )),
            NodeKind::Homothetic if self.children.is_empty() => Err(AssemblyError::InvalidNode(
                "homothetic node without children".into(),
            )),
            _ => {
                for c in &self.children {
                    if self.timeframe % c.timeframe != 0 || self.timeframe / c.timeframe < 2 {
                        return Err(AssemblyError::InvalidNode(format!(
                            "timeframe {} is not a multiple >= 2 of child {}",
                            self.timeframe, c.timeframe
                        )));
                    }
                    c.validate(max_depth)?;
                }
                Ok(())
            }
        }
    }
}

/// Settings of the elementary stochastic-wavelet unit.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitParams {
    pub family: WaveletFamily,
    pub scale: u32,
    /// Closes per estimation window.
    pub window: usize,
    pub fit: FitConfig,
    pub grid_points: usize,
    pub risk: RiskConfig,
    pub indicators: Vec<IndicatorKind>,
    pub indicator_params: std::collections::BTreeMap<String, f64>,
}

impl UnitParams {
    /// Generators emitted per bar: dynamic, convolution, then indicators.
    pub fn generator_count(&self) -> usize {
        2 + self.indicators.len()
    }

    pub fn sources(&self) -> Vec<Source> {
        let mut s = vec![Source::Dynamic, Source::Convolution];
        s.extend(self.indicators.iter().map(|k| k.source()));
        s
    }

    /// Closes needed before the unit emits anything but holds.
    pub fn warmup(&self) -> usize {
        self.window + self.risk.shift_t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitOutput {
    pub signals: Vec<Signal>,
    pub p_s: Option<f64>,
    pub p_conv: Option<f64>,
    pub ks: Option<KsResult>,
}

fn coefficient_density(
    closes: &[f64],
    params: &UnitParams,
) -> Option<(Vec<f64>, StationaryDensity)> {
    let d = decompose_values(closes, params.scale, &params.family).ok()?;
    let coeffs = d.detail(params.scale)?.clone();
    let pairs = increments(&coeffs).ok()?;
    let fit = estimate_fg(&pairs, 1.0, &params.fit).ok()?;
    let density = stationary_density(&fit, params.grid_points).ok()?;
    Some((coeffs.values, density))
}

/// Runs the elementary unit on the closes observed so far (last value = now).
/// Any numerical failure (flat window, singular fit) yields holds.
pub fn evaluate_unit(closes: &[f64], params: &UnitParams) -> UnitOutput {
    let mut signals: Vec<Signal> = params.sources().into_iter().map(Signal::hold).collect();
    let mut out = UnitOutput {
        signals: Vec::new(),
        p_s: None,
        p_conv: None,
        ks: None,
    };
    for (i, kind) in params.indicators.iter().enumerate() {
        if let Ok(s) = indicator_signal_on_closes(closes, *kind, &params.indicator_params) {
            signals[2 + i] = s;
        }
    }

    let n = closes.len();
    let shift = params.risk.shift_t;
    if n >= params.warmup() {
        let now_window = &closes[n - params.window..];
        let past_window = &closes[n - params.window - shift..n - shift];
        if let Some((now_coeffs, now_density)) = coefficient_density(now_window, params) {
            let m = (shift >> params.scale).max(8).min(now_coeffs.len());
            if let Some(past) = decompose_values(past_window, params.scale, &params.family)
                .ok()
                .and_then(|d| d.detail(params.scale).cloned())
            {
                let a = &now_coeffs[now_coeffs.len() - m..];
                let b = &past.values[past.values.len() - m..];
                out.ks = ks_two_sample(a, b, params.risk.ks_alpha).ok();
            }
            let y_now = now_coeffs[now_coeffs.len() - 1];
            let dy = y_now - now_coeffs[now_coeffs.len() - 2];
            let p_s = prob_nonpositive(&now_density.shifted(-y_now));
            out.p_s = Some(p_s);

            if let Some(ks) = out.ks {
                if stationarity_gate(&ks, Criterion::Dynamic) {
                    signals[0] = dynamic_signal(dy, p_s, &params.risk);
                }
                if stationarity_gate(&ks, Criterion::Convolution) {
                    if let Some((_, past_density)) = coefficient_density(past_window, params) {
                        if let Ok(conv) = convolve_shifted(&past_density, &now_density) {
                            let p_conv = prob_nonpositive(&conv);
                            out.p_conv = Some(p_conv);
                            let mut s = statistical_signal(p_conv, &params.risk);
                            s.source = Source::Convolution;
                            signals[1] = s;
                        }
                    }
                }
            }
        }
    }
    out.signals = signals;
    out
}

/// Knobs of the fusion layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub kappa: f64,
    pub thresholds: StateThresholds,
    pub train_window: usize,
    pub reoptimize_every: usize,
    pub perturb_rounds: usize,
    pub temperature: f64,
    pub state_window: usize,
    pub coupling_window: usize,
    pub seed: u64,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams {
            kappa: 0.5,
            thresholds: StateThresholds::default(),
            train_window: 200,
            reoptimize_every: 12,
            perturb_rounds: 20,
            temperature: 0.1,
            state_window: 48,
            coupling_window: 96,
            seed: 0,
        }
    }
}

/// Per-timeframe quote series of every symbol, in one symbol order.
#[derive(Debug, Clone)]
pub struct MarketSnapshot {
    pub symbols: Vec<String>,
    series: Vec<(u32, Vec<QuoteSeries>)>,
}

impl MarketSnapshot {
    /// `base` must share one symbol order; coarser timeframes are resampled
    /// from it.
    pub fn build(base: Vec<QuoteSeries>, timeframes: &[u32]) -> Result<Self, AssemblyError> {
        let first = base.first().ok_or(AssemblyError::EmptyHistory)?;
        let base_tf = first.timeframe;
        let symbols: Vec<String> = base.iter().map(|s| s.symbol.clone()).collect();
        let mut series = vec![(base_tf, base.clone())];
        for &tf in timeframes {
            if tf == base_tf || series.iter().any(|(t, _)| *t == tf) {
                continue;
            }
            if tf % base_tf != 0 {
                return Err(AssemblyError::MissingTimeframeData(tf));
            }
            let factor = (tf / base_tf) as usize;
            let resampled = base
                .iter()
                .map(|s| crate::market_data::resample(s, factor))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| AssemblyError::MissingTimeframeData(tf))?;
            series.push((tf, resampled));
        }
        Ok(MarketSnapshot { symbols, series })
    }

    pub fn at(&self, timeframe: u32) -> Result<&[QuoteSeries], AssemblyError> {
        self.series
            .iter()
            .find(|(t, _)| *t == timeframe)
            .map(|(_, s)| s.as_slice())
            .ok_or(AssemblyError::MissingTimeframeData(timeframe))
    }

    pub fn base_timeframe(&self) -> u32 {
        self.series[0].0
    }
}

#[derive(Debug, Clone)]
struct FlatNode {
    kind: NodeKind,
    timeframe: u32,
    children: Vec<usize>,
    feedback_depth: usize,
    own_generators: bool,
}

#[derive(Debug, Clone, Default)]
struct Track {
    actions: Vec<Vec<i8>>,
    strengths: Vec<Vec<f64>>,
    raw: Vec<f64>,
    output: Vec<f64>,
    weights: Option<GeneratorWeights>,
    state: Option<UnitState>,
    last_signals: Vec<Signal>,
}

/// One row of the decision journal.
#[derive(Debug, Clone, PartialEq)]
pub struct JournalRow {
    pub bar_time: i64,
    pub symbol: String,
    pub source: String,
    pub action: Action,
    pub strength: f64,
    pub state: UnitStateKind,
}

pub const JOURNAL_HEADER: &str = "bar_time,symbol,source,action,strength,state";

pub fn journal_csv(rows: &[JournalRow]) -> String {
    let mut out = String::with_capacity(48 * (rows.len() + 1));
    out.push_str(JOURNAL_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{}",
            r.bar_time,
            r.symbol,
            r.source,
            r.action,
            r.strength,
            r.state.as_str()
        );
    }
    out
}

/// Result of evaluating one node at one of its bars.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEvaluation {
    pub scores: Vec<f64>,
    pub states: Vec<UnitStateKind>,
    /// Exit actions raised by the node's own elementary generators.
    pub exits: Vec<Vec<Action>>,
    pub journal: Vec<JournalRow>,
}

/// A node tree with its per-symbol learning state.
#[derive(Debug, Clone)]
pub struct Assembly {
    nodes: Vec<FlatNode>,
    root: usize,
    tracks: Vec<Vec<Track>>,
    unit: UnitParams,
    fusion: FusionParams,
    symbols: Vec<String>,
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

impl Assembly {
    pub fn new(
        root: &AssemblyNode,
        max_depth: usize,
        unit: UnitParams,
        fusion: FusionParams,
        symbols: Vec<String>,
    ) -> Result<Self, AssemblyError> {
        root.validate(max_depth)?;
        let mut nodes = Vec::new();
        let root_id = flatten(root, &mut nodes);
        let tracks = nodes
            .iter()
            .map(|_| vec![Track::default(); symbols.len()])
            .collect();
        Ok(Assembly {
            nodes,
            root: root_id,
            tracks,
            unit,
            fusion,
            symbols,
        })
    }

    pub fn root(&self) -> usize {
        self.root
    }

    /// Node ids in evaluation order (children before parents).
    pub fn node_ids(&self) -> std::ops::Range<usize> {
        0..self.nodes.len()
    }

    pub fn timeframe(&self, node: usize) -> u32 {
        self.nodes[node].timeframe
    }

    /// Latest output score per symbol of a node (0 before its first bar).
    pub fn latest_scores(&self, node: usize) -> Vec<f64> {
        self.tracks[node]
            .iter()
            .map(|t| t.output.last().copied().unwrap_or(0.0))
            .collect()
    }

    pub fn states(&self, node: usize) -> Vec<UnitStateKind> {
        self.tracks[node]
            .iter()
            .map(|t| t.state.map_or(UnitStateKind::Active, |s| s.state))
            .collect()
    }

    pub fn weights(&self, node: usize, symbol: usize) -> Option<&GeneratorWeights> {
        self.tracks[node][symbol].weights.as_ref()
    }

    /// Evaluates `node` at its bar index `bar`. Children must already have been
    /// evaluated up to the same point in time. Deterministic in the node, the
    /// snapshot and the stored state; per-symbol work runs in parallel.
    pub fn evaluate_node(
        &mut self,
        node: usize,
        bar: usize,
        snapshot: &MarketSnapshot,
    ) -> Result<NodeEvaluation, AssemblyError> {
        let spec = self.nodes[node].clone();
        let series = snapshot.at(spec.timeframe)?;
        if series.len() != self.symbols.len() {
            return Err(AssemblyError::LengthMismatch(
                series.len(),
                self.symbols.len(),
            ));
        }
        if series.iter().any(|s| s.len() <= bar) {
            return Err(AssemblyError::MissingTimeframeData(spec.timeframe));
        }
        let child_scores: Vec<Vec<f64>> = spec
            .children
            .iter()
            .map(|&c| self.latest_scores(c))
            .collect();
        let run_unit = spec.kind == NodeKind::Elementary || spec.own_generators;
        let unit = &self.unit;
        let fusion = &self.fusion;

        let mut tracks = std::mem::take(&mut self.tracks[node]);
        let updates: Vec<(Vec<Signal>, f64)> = tracks
            .par_iter_mut()
            .enumerate()
            .map(|(s, track)| {
                let closes: Vec<f64> = series[s].bars()[..=bar].iter().map(|b| b.close).collect();
                let mut actions = Vec::new();
                let mut strengths = Vec::new();
                let mut signals = Vec::new();
                if run_unit {
                    signals = evaluate_unit(&closes, unit).signals;
                    for sig in &signals {
                        actions.push(sig.action.direction());
                        strengths.push(sig.strength);
                    }
                }
                for scores in &child_scores {
                    actions.push(sign(scores[s]));
                    strengths.push(scores[s].abs());
                }
                if spec.feedback_depth > 0 {
                    let lagged = track
                        .output
                        .len()
                        .checked_sub(spec.feedback_depth)
                        .map(|i| track.output[i]);
                    let stream = lagged.map(sign).unwrap_or(0);
                    actions.push(stream);
                    strengths.push(lagged.map_or(0.0, f64::abs));
                }
                track.actions.push(actions.clone());
                track.strengths.push(strengths.clone());

                // rows 0..bar have realized signs known at this bar
                let labeled = bar.min(track.actions.len() - 1);
                if labeled >= MIN_TRAINING_BARS && bar % fusion.reoptimize_every.max(1) == 0 {
                    let start = labeled.saturating_sub(fusion.train_window);
                    let offset = track.actions.len() - 1 - bar;
                    let rows: Vec<Vec<i8>> = (start..labeled)
                        .map(|i| track.actions[i + offset].clone())
                        .collect();
                    let realized: Vec<i8> = (start..labeled)
                        .map(|i| sign(closes[i + 1] - closes[i]))
                        .collect();
                    let (rows, realized): (Vec<Vec<i8>>, Vec<i8>) = rows
                        .into_iter()
                        .zip(realized)
                        .filter(|(r, _)| r.len() == actions.len())
                        .unzip();
                    if rows.len() >= MIN_TRAINING_BARS {
                        let seed = mix_seed(&[fusion.seed, node as u64, s as u64, bar as u64]);
                        if let Ok(mut w) = optimize_weights_seeded(&rows, &realized, seed) {
                            for round in 0..fusion.perturb_rounds {
                                let rs = mix_seed(&[seed, round as u64 + 1]);
                                w = perturb(&w, &rows, &realized, fusion.temperature, rs);
                            }
                            track.weights = Some(w);
                        }
                    }
                }
                let raw = match &track.weights {
                    Some(w) if w.weights.len() == 2 * actions.len() => {
                        fuse_score(&w.weights, &actions, &strengths)
                    }
                    _ => 0.0,
                };
                track.raw.push(raw);
                (signals, raw)
            })
            .collect();

        // synchronization point: unit states, coupling
        let closes_all: Vec<Vec<f64>> = series
            .iter()
            .map(|s| s.bars()[..=bar].iter().map(|b| b.close).collect())
            .collect();
        let mut states = Vec::with_capacity(self.symbols.len());
        for (s, track) in tracks.iter_mut().enumerate() {
            let closes = &closes_all[s];
            let n = track.raw.len();
            let window = fusion.state_window.min(n.saturating_sub(1)).min(bar);
            let current = track
                .state
                .unwrap_or_else(|| UnitState::initial(fusion.state_window));
            let next = if window > 0 {
                let predicted: Vec<i8> = (n - 1 - window..n - 1)
                    .map(|i| sign(track.raw[i]))
                    .collect();
                let realized: Vec<i8> = (bar - window..bar)
                    .map(|i| sign(closes[i + 1] - closes[i]))
                    .collect();
                update_state(&current, &predicted, &realized, &fusion.thresholds)?
            } else {
                current
            };
            track.state = Some(next);
            states.push(next.state);
        }

        let raw_in: Vec<(String, f64)> = self
            .symbols
            .iter()
            .zip(&updates)
            .zip(&states)
            .filter(|(_, st)| **st != UnitStateKind::Passive)
            .map(|((sym, u), _)| (sym.clone(), u.1))
            .collect();
        let closes_ref: Vec<&[f64]> = closes_all.iter().map(|c| c.as_slice()).collect();
        let rho =
            CouplingMatrix::from_closes(self.symbols.clone(), &closes_ref, fusion.coupling_window)?;
        let coupled = couple(&raw_in, &rho, fusion.kappa)?;

        let bar_time = series[0].bars()[bar].timestamp;
        let mut scores = vec![0.0; self.symbols.len()];
        let mut exits = vec![Vec::new(); self.symbols.len()];
        let mut journal = Vec::new();
        for (s, track) in tracks.iter_mut().enumerate() {
            let score = coupled
                .iter()
                .find(|(sym, _)| *sym == self.symbols[s])
                .map_or(0.0, |(_, v)| *v);
            scores[s] = score;
            track.output.push(score);
            let signals = &updates[s].0;
            for sig in signals {
                if matches!(sig.action, Action::ExitLong | Action::ExitShort) {
                    exits[s].push(sig.action);
                }
                if sig.action != Action::Hold {
                    journal.push(JournalRow {
                        bar_time,
                        symbol: self.symbols[s].clone(),
                        source: sig.source.to_string(),
                        action: sig.action,
                        strength: sig.strength,
                        state: states[s],
                    });
                }
            }
            track.last_signals = signals.clone();
        }
        self.tracks[node] = tracks;
        Ok(NodeEvaluation {
            scores,
            states,
            exits,
            journal,
        })
    }
}

fn flatten(node: &AssemblyNode, out: &mut Vec<FlatNode>) -> usize {
    let children = node.children.iter().map(|c| flatten(c, out)).collect();
    out.push(FlatNode {
        kind: node.kind,
        timeframe: node.timeframe,
        children,
        feedback_depth: node.feedback_depth,
        own_generators: node.own_generators,
    });
    out.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::{generate, SyntheticKind, SyntheticSpec};
    use proptest::prelude::*;
    use rand::Rng;

    fn constant_rows(rows: usize, pattern: &[i8]) -> Vec<Vec<i8>> {
        vec![pattern.to_vec(); rows]
    }

    #[test]
    fn perfect_generator() {
        let realized: Vec<i8> = (0..40).map(|i| if i % 3 == 0 { -1 } else { 1 }).collect();
        let history: Vec<Vec<i8>> = realized.iter().map(|&r| vec![r]).collect();
        let w = optimize_weights(&history, &realized).unwrap();
        assert_eq!(w.weights, vec![1, 1]);
        assert_eq!(w.mismatch_norm, 0);
    }

    #[test]
    fn dominance_zeroes_the_wrong_generator() {
        let realized: Vec<i8> = (0..40).map(|i| if i % 2 == 0 { -1 } else { 1 }).collect();
        let history: Vec<Vec<i8>> = realized.iter().map(|&r| vec![r, -r]).collect();
        let w = optimize_weights(&history, &realized).unwrap();
        assert_eq!(w.weights, vec![1, 1, 0, 0]);
        assert_eq!(w.mismatch_norm, 0);
    }

    #[test]
    fn zero_sign_bars_are_ignored() {
        let mut realized = vec![1i8; 30];
        realized.extend(vec![0i8; 10]);
        let history = constant_rows(40, &[1]);
        let w = optimize_weights(&history, &realized).unwrap();
        // long slot needed, short slot never used so tie-break clears it
        assert_eq!(w.weights, vec![1, 0]);
        assert_eq!(w.mismatch_norm, 0);
    }

    #[test]
    fn history_validation() {
        assert_eq!(optimize_weights(&[], &[]), Err(AssemblyError::EmptyHistory));
        let h = constant_rows(40, &[1]);
        assert_eq!(
            optimize_weights(&h, &[1; 39]),
            Err(AssemblyError::LengthMismatch(40, 39))
        );
        let h = constant_rows(10, &[1]);
        assert!(matches!(
            optimize_weights(&h, &[1; 10]),
            Err(AssemblyError::HistoryTooShort { .. })
        ));
        let h = constant_rows(40, &[2]);
        assert_eq!(
            optimize_weights(&h, &[1; 40]),
            Err(AssemblyError::InvalidAction)
        );
    }

    #[test]
    fn perturb_rules() {
        let realized: Vec<i8> = (0..60).map(|i| if i % 4 == 0 { -1 } else { 1 }).collect();
        let history: Vec<Vec<i8>> = realized.iter().map(|&r| vec![r, 1, -1]).collect();
        let best = optimize_weights(&history, &realized).unwrap();
        assert_eq!(perturb(&best, &history, &realized, 0.0, 1), best);
        // from the optimum no candidate can be strictly better; worse ones die
        for seed in 0..50 {
            let next = perturb(&best, &history, &realized, 0.5, seed);
            assert_eq!(next.mismatch_norm, best.mismatch_norm);
        }
    }

    #[test]
    fn greedy_search_is_reproducible() {
        let realized: Vec<i8> = (0..50)
            .map(|i| if (i * 7) % 5 < 2 { -1 } else { 1 })
            .collect();
        let history: Vec<Vec<i8>> = realized
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                (0..12)
                    .map(|g| if (i + g) % 3 == 0 { -r } else { r })
                    .collect()
            })
            .collect();
        let a = optimize_weights_seeded(&history, &realized, 4).unwrap();
        let b = optimize_weights_seeded(&history, &realized, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a.mismatch_norm,
            mismatch_norm(&a.weights, &history, &realized)
        );
    }

    #[test]
    fn coupling_signs() {
        let syms = vec!["eurusd".to_string(), "gbpusd".to_string()];
        let pos =
            CouplingMatrix::new(syms.clone(), vec![vec![1.0, 1.0], vec![1.0, 1.0]], 10).unwrap();
        let neg =
            CouplingMatrix::new(syms.clone(), vec![vec![1.0, -1.0], vec![-1.0, 1.0]], 10).unwrap();
        let raw = vec![("eurusd".to_string(), -0.8), ("gbpusd".to_string(), 0.0)];
        assert!(couple(&raw, &pos, 0.5).unwrap()[1].1 < 0.0);
        assert!(couple(&raw, &neg, 0.5).unwrap()[1].1 > 0.0);
        let zero = CouplingMatrix::identity(syms);
        assert_eq!(couple(&raw, &zero, 0.5).unwrap(), raw);
        let single = vec![("eurusd".to_string(), 0.3)];
        assert_eq!(couple(&single, &pos, 0.5).unwrap(), single);
        let unknown = vec![("usdjpy".to_string(), 0.3)];
        assert!(matches!(
            couple(&unknown, &pos, 0.5),
            Err(AssemblyError::UnknownSymbol(_))
        ));
    }

    #[test]
    fn coupling_matrix_validation() {
        let syms = vec!["a".to_string(), "b".to_string()];
        assert!(
            CouplingMatrix::new(syms.clone(), vec![vec![1.0, 0.5], vec![0.4, 1.0]], 1).is_err()
        );
        assert!(
            CouplingMatrix::new(syms.clone(), vec![vec![1.0, 1.5], vec![1.5, 1.0]], 1).is_err()
        );
        assert!(CouplingMatrix::new(syms, vec![vec![0.9, 0.0], vec![0.0, 1.0]], 1).is_err());
    }

    #[test]
    fn correlation_from_closes() {
        let a: Vec<f64> = (0..50).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = a.iter().map(|x| 2.0 * x + 1.0).collect();
        let c: Vec<f64> = a.iter().map(|x| -x).collect();
        let flat = vec![1.0; 50];
        let m = CouplingMatrix::from_closes(
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            &[&a, &b, &c, &flat],
            30,
        )
        .unwrap();
        assert!((m.rho[0][1] - 1.0).abs() < 1e-12);
        assert!((m.rho[0][2] + 1.0).abs() < 1e-12);
        assert_eq!(m.rho[0][3], 0.0);
    }

    #[test]
    fn unit_state_transitions() {
        let t = StateThresholds::default();
        let start = UnitState::initial(4);
        let s = update_state(&start, &[1, -1, 1, 1], &[1, -1, 1, 1], &t).unwrap();
        assert_eq!(s.state, UnitStateKind::Active);
        let s = update_state(&start, &[1, -1, 1, 1], &[-1, 1, -1, -1], &t).unwrap();
        assert_eq!(s.state, UnitStateKind::Passive);
        let s = update_state(&start, &[1, -1, 1, 1], &[1, 1, 1, -1], &t).unwrap();
        assert_eq!(s.hit_rate, 0.5);
        assert_eq!(s.state, UnitStateKind::SemiActive);
        assert!(update_state(&start, &[1], &[1, 1], &t).is_err());
        let kept = update_state(&s, &[0, 0], &[1, -1], &t).unwrap();
        assert_eq!(kept.state, UnitStateKind::SemiActive);
    }

    #[test]
    fn feedback_encoding() {
        assert!(vertical_feedback(&[Action::EnterLong], 0).is_empty());
        assert_eq!(
            vertical_feedback(&[Action::EnterLong, Action::Hold, Action::EnterShort], 1),
            vec![1, 0, -1]
        );
    }

    #[test]
    fn capacity_values() {
        assert_eq!(capacity(2, 8, 1), Ok(6_502_809_600));
        assert_eq!(capacity(1, 1, 0), Ok(1));
        assert_eq!(capacity(3, 2, 0), Ok(12));
        assert_eq!(capacity(30, 30, 3), Err(AssemblyError::Overflow));
        assert!(capacity(0, 2, 0).is_err());
    }

    #[test]
    fn node_validation() {
        assert!(AssemblyNode::nested(5, &[3], true).validate(1).is_ok());
        assert!(AssemblyNode::nested(5, &[3, 2], true).validate(1).is_err());
        let bad = AssemblyNode::homothetic(7, vec![AssemblyNode::elementary(5)], true);
        assert!(bad.validate(1).is_err());
        let same = AssemblyNode::homothetic(5, vec![AssemblyNode::elementary(5)], true);
        assert!(same.validate(1).is_err());
    }

    #[test]
    fn single_child_passes_through() {
        // a lone child generator with both slots on reproduces its score
        let w = [1u8, 1];
        for score in [-0.7, -0.1, 0.0, 0.4, 1.0] {
            let fused = fuse_score(&w, &[sign(score)], &[f64::abs(score)]);
            assert!((fused - score).abs() < 1e-15);
        }
    }

    fn unit_params() -> UnitParams {
        UnitParams {
            family: WaveletFamily::haar(),
            scale: 1,
            window: 128,
            fit: FitConfig {
                bins: 6,
                order_f: 1,
                order_g2: 0,
                tail_extension: 0.5,
            },
            grid_points: 64,
            risk: RiskConfig::new(0.1, 0.05, 16).unwrap(),
            indicators: vec![IndicatorKind::Rsi],
            indicator_params: Default::default(),
        }
    }

    fn snapshot(n: usize, seeds: &[u64], timeframes: &[u32]) -> MarketSnapshot {
        let base = seeds
            .iter()
            .enumerate()
            .map(|(i, &seed)| {
                let mut spec = SyntheticSpec::new(SyntheticKind::OrnsteinUhlenbeck, n, seed)
                    .with("theta", 0.05)
                    .with("sigma", 0.002)
                    .with("mu", 1.3)
                    .with("y0", 1.3)
                    .with("dt", 1.0);
                spec.symbol = format!("sym{i}");
                generate(&spec).unwrap()
            })
            .collect();
        MarketSnapshot::build(base, timeframes).unwrap()
    }

    #[test]
    fn elementary_node_matches_unit_pipeline() {
        let snap = snapshot(300, &[1], &[]);
        let params = unit_params();
        let fusion = FusionParams {
            perturb_rounds: 0,
            ..FusionParams::default()
        };
        let mut a = Assembly::new(
            &AssemblyNode::elementary(5),
            0,
            params.clone(),
            fusion,
            snap.symbols.clone(),
        )
        .unwrap();
        let closes = snap.at(5).unwrap()[0].closes();
        for bar in 0..300 {
            let eval = a.evaluate_node(a.root(), bar, &snap).unwrap();
            let direct = evaluate_unit(&closes[..=bar], &params);
            let from_journal: Vec<Action> = eval.journal.iter().map(|r| r.action).collect();
            let expected: Vec<Action> = direct
                .signals
                .iter()
                .map(|s| s.action)
                .filter(|a| *a != Action::Hold)
                .collect();
            assert_eq!(from_journal, expected, "bar {bar}");
            let w = a.weights(a.root(), 0);
            let raw = w.map_or(0.0, |w| {
                let acts: Vec<i8> = direct
                    .signals
                    .iter()
                    .map(|s| s.action.direction())
                    .collect();
                let st: Vec<f64> = direct.signals.iter().map(|s| s.strength).collect();
                fuse_score(&w.weights, &acts, &st)
            });
            // one symbol: coupling is the identity
            if eval.states[0] != UnitStateKind::Passive {
                assert_eq!(eval.scores[0], raw);
            }
        }
    }

    #[test]
    fn nested_evaluation_is_deterministic() {
        let run = || {
            let snap = snapshot(600, &[3, 4, 5], &[15]);
            let root = AssemblyNode::nested(5, &[3], true);
            let mut a = Assembly::new(
                &root,
                1,
                unit_params(),
                FusionParams::default(),
                snap.symbols.clone(),
            )
            .unwrap();
            let mut trace = Vec::new();
            for t in 0..600 {
                for node in a.node_ids() {
                    let f = (a.timeframe(node) / 5) as usize;
                    if (t + 1) % f == 0 {
                        let e = a.evaluate_node(node, (t + 1) / f - 1, &snap).unwrap();
                        trace.push(e.scores);
                    }
                }
            }
            trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn homothetic_single_child_tracks_child() {
        let snap = snapshot(600, &[8], &[10]);
        let root = AssemblyNode::nested(5, &[2], false);
        let fusion = FusionParams {
            perturb_rounds: 0,
            ..FusionParams::default()
        };
        let mut a = Assembly::new(&root, 1, unit_params(), fusion, snap.symbols.clone()).unwrap();
        let child = 0;
        for t in 0..600 {
            let child_eval = a.evaluate_node(child, t, &snap).unwrap();
            if (t + 1) % 2 == 0 {
                let parent = a.evaluate_node(a.root(), (t + 1) / 2 - 1, &snap).unwrap();
                if let Some(w) = a.weights(a.root(), 0) {
                    let c = child_eval.scores[0];
                    let expected = fuse_score(&w.weights, &[sign(c)], &[c.abs()]);
                    if parent.states[0] != UnitStateKind::Passive {
                        assert_eq!(parent.scores[0], expected);
                    }
                    if w.weights == [1, 1] && parent.states[0] != UnitStateKind::Passive {
                        assert_eq!(parent.scores[0], c);
                    }
                }
            }
        }
    }

    /// Independent brute force: enumerate every 0/1 vector in lexicographic
    /// order and keep the first with the best (mismatch, popcount).
    fn brute_force(history: &[Vec<i8>], realized: &[i8]) -> GeneratorWeights {
        let slots = 2 * history[0].len();
        let mut best: Option<(u64, usize, Vec<u8>)> = None;
        for code in 0..(1usize << slots) {
            let w: Vec<u8> = (0..slots)
                .map(|i| ((code >> (slots - 1 - i)) & 1) as u8)
                .collect();
            let mut miss = 0;
            for (row, &r) in history.iter().zip(realized) {
                if r == 0 {
                    continue;
                }
                let mut v = 0i32;
                for (g, &a) in row.iter().enumerate() {
                    if a > 0 && w[2 * g] == 1 {
                        v += 1;
                    }
                    if a < 0 && w[2 * g + 1] == 1 {
                        v -= 1;
                    }
                }
                let pred = v.signum() as i8;
                if pred != r {
                    miss += 1;
                }
            }
            let ones = w.iter().filter(|x| **x == 1).count();
            let better = match &best {
                None => true,
                Some((bm, bo, _)) => (miss, ones) < (*bm, *bo),
            };
            if better {
                best = Some((miss, ones, w));
            }
        }
        let (miss, _, weights) = best.unwrap();
        GeneratorWeights {
            weights,
            mismatch_norm: miss,
        }
    }

    fn instance(seed: u64, m: usize, bars: usize) -> (Vec<Vec<i8>>, Vec<i8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let realized: Vec<i8> = (0..bars).map(|_| rng.random_range(-1..=1)).collect();
        let history = (0..bars)
            .map(|i| {
                (0..m)
                    .map(|_| {
                        if rng.random::<f64>() < 0.6 {
                            realized[i]
                        } else {
                            rng.random_range(-1..=1)
                        }
                    })
                    .collect()
            })
            .collect();
        (history, realized)
    }

    #[test]
    fn four_generators_match_brute_force() {
        let (h, r) = instance(42, 4, 200);
        let w = optimize_weights(&h, &r).unwrap();
        assert_eq!(w, brute_force(&h, &r));
        let mut cur = w.clone();
        for seed in 0..100 {
            let next = perturb(&cur, &h, &r, 0.25, seed);
            assert!(next.mismatch_norm <= cur.mismatch_norm);
            cur = next;
        }
        assert!(cur.mismatch_norm <= w.mismatch_norm);
    }

    #[test]
    fn feedback_never_hurts() {
        for seed in 0..20 {
            let (h, r) = instance(seed, 3, 80);
            let base = optimize_weights(&h, &r).unwrap();
            let decisions: Vec<Action> = h
                .iter()
                .map(|row| match row[0] {
                    1 => Action::EnterLong,
                    -1 => Action::EnterShort,
                    _ => Action::Hold,
                })
                .collect();
            let stream = vertical_feedback(&decisions, 1);
            let mut with = h.clone();
            // lag-1 feedback
            for (i, row) in with.iter_mut().enumerate() {
                row.push(if i == 0 { 0 } else { stream[i - 1] });
            }
            let extended = optimize_weights(&with, &r).unwrap();
            assert!(extended.mismatch_norm <= base.mismatch_norm);
        }
    }

    proptest! {
        #[test]
        fn couple_identity_and_sign(scores in prop::collection::vec(-1.0f64..1.0, 2..6), kappa in 0.0f64..1.0, seed in 0u64..100) {
            let n = scores.len();
            let syms: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rho = vec![vec![0.0; n]; n];
            for i in 0..n {
                rho[i][i] = 1.0;
                for j in (i + 1)..n {
                    let r = rng.random_range(-1.0..=1.0);
                    rho[i][j] = r;
                    rho[j][i] = r;
                }
            }
            let m = CouplingMatrix::new(syms.clone(), rho, 10).unwrap();
            let raw: Vec<(String, f64)> = syms.into_iter().zip(scores).collect();
            prop_assert_eq!(couple(&raw, &m, 0.0).unwrap(), raw.clone());
            let adjusted = couple(&raw, &m, kappa).unwrap();
            for ((_, r), (_, a)) in raw.iter().zip(&adjusted) {
                if r.abs() > kappa {
                    prop_assert_eq!(r.signum(), a.signum());
                }
            }
        }

        #[test]
        fn state_is_monotone_in_hit_rate(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let t = StateThresholds::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(t.classify(lo) <= t.classify(hi));
        }
    }
}
