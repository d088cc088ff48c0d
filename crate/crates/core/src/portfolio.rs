//! Capital reallocation across pairs from realized effectiveness.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PortfolioError {
    #[error("no effectiveness records")]
    EmptyRecords,
    #[error("floor {floor} times {count} symbols exceeds 1")]
    InfeasibleFloor { floor: f64, count: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no price for {0}")]
    MissingPrice(String),
}

/// Fractions of equity per symbol plus an uninvested reserve; they sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub fractions: Vec<(String, f64)>,
    pub reserve: f64,
}

impl Allocation {
    pub fn all_reserve(symbols: &[String]) -> Self {
        Allocation {
            fractions: symbols.iter().map(|s| (s.clone(), 0.0)).collect(),
            reserve: 1.0,
        }
    }

    pub fn fraction(&self, symbol: &str) -> Option<f64> {
        self.fractions
            .iter()
            .find(|(s, _)| s == symbol)
            .map(|(_, f)| *f)
    }

    pub fn total(&self) -> f64 {
        self.fractions.iter().map(|(_, f)| f).sum::<f64>() + self.reserve
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectivenessRecord {
    pub symbol: String,
    pub timeframe: u32,
    pub window_pl: f64,
    pub pl_std: f64,
    pub trade_count: usize,
}

/// `score = window_pl - lambda * pl_std`, clipped at 0; fractions follow the
/// scores, then any fraction under `floor` is lifted to it and the rest
/// rescaled. All-nonpositive scores park everything in the reserve.
pub fn reallocate(
    records: &[EffectivenessRecord],
    lambda_risk: f64,
    floor: f64,
) -> Result<Allocation, PortfolioError> {
    if records.is_empty() {
        return Err(PortfolioError::EmptyRecords);
    }
    if !(lambda_risk >= 0.0) || !lambda_risk.is_finite() {
        return Err(PortfolioError::InvalidArgument(format!(
            "lambda_risk {lambda_risk}"
        )));
    }
    if !(floor >= 0.0) || floor * records.len() as f64 > 1.0 + 1e-12 {
        return Err(PortfolioError::InfeasibleFloor {
            floor,
            count: records.len(),
        });
    }
    if records
        .iter()
        .any(|r| !(r.pl_std >= 0.0) || !r.window_pl.is_finite())
    {
        return Err(PortfolioError::InvalidArgument(
            "pl_std must be >= 0 and P/L finite".into(),
        ));
    }
    let scores: Vec<f64> = records
        .iter()
        .map(|r| (r.window_pl - lambda_risk * r.pl_std).max(0.0))
        .collect();
    let total: f64 = scores.iter().sum();
    if total <= 0.0 {
        let symbols: Vec<String> = records.iter().map(|r| r.symbol.clone()).collect();
        return Ok(Allocation::all_reserve(&symbols));
    }

    // water-filling: pin the ones that would fall under the floor
    let n = scores.len();
    let mut pinned = vec![false; n];
    let mut fractions = vec![0.0; n];
    loop {
        let free_mass = 1.0 - floor * pinned.iter().filter(|p| **p).count() as f64;
        let free_score: f64 = scores
            .iter()
            .zip(&pinned)
            .filter(|(_, p)| !**p)
            .map(|(s, _)| s)
            .sum();
        let mut changed = false;
        for i in 0..n {
            fractions[i] = if pinned[i] {
                floor
            } else if free_score > 0.0 {
                free_mass * scores[i] / free_score
            } else {
                free_mass / pinned.iter().filter(|p| !**p).count() as f64
            };
        }
        for i in 0..n {
            if !pinned[i] && fractions[i] < floor {
                pinned[i] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let sum: f64 = fractions.iter().sum();
    Ok(Allocation {
        fractions: records
            .iter()
            .map(|r| r.symbol.clone())
            .zip(fractions)
            .collect(),
        reserve: (1.0 - sum).max(0.0),
    })
}

/// Lots per symbol, rounded down to 0.01, so that the margin of each stays
/// within its share of `equity * leverage`. `prices` are USD values of one
/// unit of each pair's base currency.
pub fn enforce_margin(
    alloc: &Allocation,
    equity: f64,
    leverage: u32,
    prices: &BTreeMap<String, f64>,
    lot_size: u32,
) -> Result<Vec<(String, f64)>, PortfolioError> {
    if !(equity > 0.0) || leverage == 0 || lot_size == 0 {
        return Err(PortfolioError::InvalidArgument(
            "equity > 0, leverage >= 1 and lot_size >= 1 required".into(),
        ));
    }
    let lev = f64::from(leverage);
    let lot = f64::from(lot_size);
    let mut hundredths = Vec::with_capacity(alloc.fractions.len());
    for (sym, n) in &alloc.fractions {
        let price = *prices
            .get(sym)
            .ok_or_else(|| PortfolioError::MissingPrice(sym.clone()))?;
        if !(price > 0.0) {
            return Err(PortfolioError::InvalidArgument(format!("price of {sym}")));
        }
        let lots = n * equity * lev / (lot * price);
        hundredths.push(((lots * 100.0).floor().max(0.0) as i64, price));
    }
    let margin = |h: &[(i64, f64)]| -> f64 {
        h.iter()
            .map(|(k, p)| *k as f64 / 100.0 * lot * p / lev)
            .sum()
    };
    while margin(&hundredths) > equity {
        // floating-point slack only; trim the biggest position by one step
        let i = (0..hundredths.len())
            .max_by(|&a, &b| {
                (hundredths[a].0 as f64 * hundredths[a].1)
                    .total_cmp(&(hundredths[b].0 as f64 * hundredths[b].1))
            })
            .expect("nonempty");
        hundredths[i].0 -= 1;
    }
    Ok(alloc
        .fractions
        .iter()
        .zip(hundredths)
        .map(|((s, _), (k, _))| (s.clone(), k as f64 / 100.0))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationRow {
    pub bar_time: i64,
    pub symbol: String,
    pub fraction: f64,
    pub lots: f64,
}

pub const ALLOCATION_HEADER: &str = "bar_time,symbol,fraction,lots";

pub fn allocation_csv(rows: &[AllocationRow]) -> String {
    let mut out = String::from(ALLOCATION_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.2}",
            r.bar_time, r.symbol, r.fraction, r.lots
        );
    }
    out
}
