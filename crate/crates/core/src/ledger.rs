//! Simulated broker and trade ledger in the statement's units: lots of
//! 100 000, profits in USD rounded to cents.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_data::Bar;

pub const CONTRACT_SIZE: f64 = 100_000.0;
pub const TIME_FORMAT: &str = "%Y.%m.%d %H:%M";
pub const FIRST_TICKET: u64 = 100_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum LedgerError {
    #[error("cross pair {0} needs a conversion rate")]
    MissingConversionRate(String),
    #[error("prices must be positive")]
    InvalidPrice,
    #[error("invalid lot size {0}")]
    InvalidLots(f64),
    #[error("insufficient margin: need {required:.2}, free {free:.2}")]
    InsufficientMargin { required: f64, free: f64 },
    #[error("unknown symbol {0}")]
    UnknownSymbol(String),
    #[error("unknown ticket {0}")]
    UnknownTicket(u64),
    #[error("timestamp {0} out of range")]
    BadTimestamp(i64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairKind {
    UsdQuoted,
    UsdBase,
    Cross,
}

/// Six-letter pair code, base currency first.
pub fn pair_kind(symbol: &str) -> PairKind {
    let s = symbol.to_ascii_lowercase();
    if s.len() >= 6 && &s[3..6] == "usd" {
        PairKind::UsdQuoted
    } else if s.starts_with("usd") {
        PairKind::UsdBase
    } else {
        PairKind::Cross
    }
}

/// Half away from zero, to 0.01. The nudge absorbs binary representation
/// error on values that are exact halves in decimal.
pub fn round_cents(x: f64) -> f64 {
    let y = x * 100.0;
    (y + y.signum() * 1e-6).round() / 100.0
}

pub fn round_lots(x: f64) -> f64 {
    round_cents(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Buy,
    Sell,
    Balance,
}

impl Side {
    pub fn sign(self) -> f64 {
        match self {
            Side::Buy => 1.0,
            Side::Sell => -1.0,
            Side::Balance => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Buy => "buy",
            Side::Sell => "sell",
            Side::Balance => "balance",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Side {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "buy" => Ok(Side::Buy),
            "sell" => Ok(Side::Sell),
            "balance" => Ok(Side::Balance),
            other => Err(format!("unknown side {other:?}")),
        }
    }
}

/// Profit in USD of a position closed at `close_price`.
pub fn fill_profit(
    side: Side,
    lots: f64,
    symbol: &str,
    open_price: f64,
    close_price: f64,
    conversion_rate: Option<f64>,
) -> Result<f64, LedgerError> {
    if !(open_price > 0.0) || !(close_price > 0.0) {
        return Err(LedgerError::InvalidPrice);
    }
    let raw = side.sign() * (close_price - open_price) * lots * CONTRACT_SIZE;
    let usd = match pair_kind(symbol) {
        PairKind::UsdQuoted => raw,
        PairKind::UsdBase => raw / close_price,
        PairKind::Cross => {
            let rate = conversion_rate
                .ok_or_else(|| LedgerError::MissingConversionRate(symbol.to_string()))?;
            raw * rate
        }
    };
    Ok(round_cents(usd))
}

/// USD value of one unit of the pair's base currency. For cross pairs
/// `conversion_rate` converts the quote currency to USD.
pub fn base_usd_value(
    symbol: &str,
    price: f64,
    conversion_rate: Option<f64>,
) -> Result<f64, LedgerError> {
    match pair_kind(symbol) {
        PairKind::UsdQuoted => Ok(price),
        PairKind::UsdBase => Ok(1.0),
        PairKind::Cross => conversion_rate
            .map(|r| price * r)
            .ok_or_else(|| LedgerError::MissingConversionRate(symbol.to_string())),
    }
}

pub fn timestamp_to_time(ts: i64) -> Result<NaiveDateTime, LedgerError> {
    DateTime::from_timestamp(ts, 0)
        .map(|d| d.naive_utc())
        .ok_or(LedgerError::BadTimestamp(ts))
}

/// One closed row of the statement. Balance rows carry their comment in
/// `symbol` and the amount in `profit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeRecord {
    pub ticket: u64,
    pub open_time: NaiveDateTime,
    pub close_time: NaiveDateTime,
    pub side: Side,
    pub lots: f64,
    pub symbol: String,
    pub open_price: f64,
    pub close_price: f64,
    pub sl: f64,
    pub tp: f64,
    pub commission: f64,
    pub taxes: f64,
    pub swap: f64,
    pub profit: f64,
    /// Decimals used when printing prices.
    pub digits: usize,
}

impl TradeRecord {
    pub fn is_balance(&self) -> bool {
        self.side == Side::Balance
    }

    pub fn net(&self, convention: PlConvention) -> f64 {
        convention.net(self.profit, self.swap, self.commission)
    }
}

/// A position still open at statement time, valued at `market_price`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenTrade {
    pub ticket: u64,
    pub open_time: NaiveDateTime,
    pub side: Side,
    pub lots: f64,
    pub symbol: String,
    pub open_price: f64,
    pub sl: f64,
    pub tp: f64,
    pub market_price: f64,
    pub commission: f64,
    pub taxes: f64,
    pub swap: f64,
    pub profit: f64,
    pub digits: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PlConvention {
    ProfitOnly,
    #[default]
    ProfitPlusSwap,
}

impl PlConvention {
    pub fn net(self, profit: f64, swap: f64, commission: f64) -> f64 {
        match self {
            PlConvention::ProfitOnly => profit,
            PlConvention::ProfitPlusSwap => profit + swap + commission,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PlConvention::ProfitOnly => "profit_only",
            PlConvention::ProfitPlusSwap => "profit_plus_swap",
        }
    }
}

impl FromStr for PlConvention {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "profit_only" => Ok(PlConvention::ProfitOnly),
            "profit_plus_swap" => Ok(PlConvention::ProfitPlusSwap),
            other => Err(format!("unknown pl_convention {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Account {
    pub deposit: f64,
    pub balance: f64,
    pub equity: f64,
    pub margin: f64,
    pub free_margin: f64,
}

/// Per-symbol trading terms of the simulated broker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolSpec {
    /// Full bid/ask spread in price units.
    pub spread: f64,
    /// USD per lot per calendar day held.
    pub swap_long: f64,
    pub swap_short: f64,
    pub conversion_rate: Option<f64>,
    pub digits: usize,
}

impl Default for SymbolSpec {
    fn default() -> Self {
        SymbolSpec {
            spread: 0.0,
            swap_long: 0.0,
            swap_short: 0.0,
            conversion_rate: None,
            digits: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Position {
    pub ticket: u64,
    pub symbol: String,
    pub side: Side,
    pub lots: f64,
    pub open_time: i64,
    pub open_price: f64,
    pub sl: f64,
    pub tp: f64,
    pub swap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloseReason {
    Signal,
    StopLoss,
    TakeProfit,
    EndOfRun,
}

fn round_to(x: f64, digits: usize) -> f64 {
    let p = 10f64.powi(digits as i32);
    (x * p).round() / p
}

/// Single-owner broker state. Every mutation happens at a bar boundary.
#[derive(Debug, Clone)]
pub struct SimBroker {
    specs: BTreeMap<String, SymbolSpec>,
    leverage: f64,
    convention: PlConvention,
    deposit: f64,
    balance: f64,
    positions: Vec<Position>,
    closed: Vec<TradeRecord>,
    next_ticket: u64,
    marks: BTreeMap<String, f64>,
    day: Option<i64>,
}

impl SimBroker {
    pub fn new(
        deposit: f64,
        leverage: u32,
        specs: BTreeMap<String, SymbolSpec>,
        convention: PlConvention,
        start_time: i64,
    ) -> Result<Self, LedgerError> {
        let t = timestamp_to_time(start_time)?;
        let deposit_row = TradeRecord {
            ticket: FIRST_TICKET,
            open_time: t,
            close_time: t,
            side: Side::Balance,
            lots: 0.0,
            symbol: "Deposit".into(),
            open_price: 0.0,
            close_price: 0.0,
            sl: 0.0,
            tp: 0.0,
            commission: 0.0,
            taxes: 0.0,
            swap: 0.0,
            profit: round_cents(deposit),
            digits: 5,
        };
        Ok(SimBroker {
            specs,
            leverage: f64::from(leverage.max(1)),
            convention,
            deposit: round_cents(deposit),
            balance: round_cents(deposit),
            positions: Vec::new(),
            closed: vec![deposit_row],
            next_ticket: FIRST_TICKET + 1,
            marks: BTreeMap::new(),
            day: Some(start_time.div_euclid(86_400)),
        })
    }

    fn spec(&self, symbol: &str) -> Result<&SymbolSpec, LedgerError> {
        self.specs
            .get(symbol)
            .ok_or_else(|| LedgerError::UnknownSymbol(symbol.to_string()))
    }

    pub fn positions(&self) -> &[Position] {
        &self.positions
    }

    pub fn closed(&self) -> &[TradeRecord] {
        &self.closed
    }

    pub fn convention(&self) -> PlConvention {
        self.convention
    }

    /// Records the latest mid close of `symbol` for valuation.
    pub fn mark(&mut self, symbol: &str, close: f64) {
        self.marks.insert(symbol.to_string(), close);
    }

    fn exit_price(&self, pos: &Position, mid: f64) -> Result<f64, LedgerError> {
        let spec = self.spec(&pos.symbol)?;
        Ok(round_to(
            mid - pos.side.sign() * spec.spread / 2.0,
            spec.digits,
        ))
    }

    fn position_profit(&self, pos: &Position, exit: f64) -> Result<f64, LedgerError> {
        let spec = self.spec(&pos.symbol)?;
        fill_profit(
            pos.side,
            pos.lots,
            &pos.symbol,
            pos.open_price,
            exit,
            spec.conversion_rate,
        )
    }

    fn position_margin(&self, symbol: &str, lots: f64, mid: f64) -> Result<f64, LedgerError> {
        let spec = self.spec(symbol)?;
        Ok(
            lots * CONTRACT_SIZE * base_usd_value(symbol, mid, spec.conversion_rate)?
                / self.leverage,
        )
    }

    /// Floating P/L of every open position, swap included.
    pub fn floating_pl(&self) -> Result<f64, LedgerError> {
        let mut total = 0.0;
        for pos in &self.positions {
            let mid = *self.marks.get(&pos.symbol).unwrap_or(&pos.open_price);
            let exit = self.exit_price(pos, mid)?;
            total += self.position_profit(pos, exit)? + pos.swap;
        }
        Ok(round_cents(total))
    }

    pub fn account(&self) -> Result<Account, LedgerError> {
        let mut margin = 0.0;
        for pos in &self.positions {
            let mid = *self.marks.get(&pos.symbol).unwrap_or(&pos.open_price);
            margin += self.position_margin(&pos.symbol, pos.lots, mid)?;
        }
        let equity = round_cents(self.balance + self.floating_pl()?);
        let margin = round_cents(margin);
        Ok(Account {
            deposit: self.deposit,
            balance: self.balance,
            equity,
            margin,
            free_margin: round_cents(equity - margin),
        })
    }

    /// Opens at the bar close plus (buy) or minus (sell) half the spread.
    pub fn open_position(
        &mut self,
        symbol: &str,
        side: Side,
        lots: f64,
        sl: f64,
        tp: f64,
        bar: &Bar,
    ) -> Result<u64, LedgerError> {
        if side == Side::Balance || !(lots > 0.0) {
            return Err(LedgerError::InvalidLots(lots));
        }
        let lots = round_lots(lots);
        let spec = self.spec(symbol)?.clone();
        self.mark(symbol, bar.close);
        let required = self.position_margin(symbol, lots, bar.close)?;
        let account = self.account()?;
        if account.margin + required > account.equity {
            return Err(LedgerError::InsufficientMargin {
                required,
                free: account.free_margin,
            });
        }
        let ticket = self.next_ticket;
        self.next_ticket += 1;
        self.positions.push(Position {
            ticket,
            symbol: symbol.to_string(),
            side,
            lots,
            open_time: bar.timestamp,
            open_price: round_to(bar.close + side.sign() * spec.spread / 2.0, spec.digits),
            sl: round_to(sl, spec.digits),
            tp: round_to(tp, spec.digits),
            swap: 0.0,
        });
        Ok(ticket)
    }

    fn close_at(
        &mut self,
        index: usize,
        price: f64,
        time: i64,
    ) -> Result<TradeRecord, LedgerError> {
        let pos = self.positions.remove(index);
        let spec = self.spec(&pos.symbol)?;
        let digits = spec.digits;
        let profit = self.position_profit(&pos, price)?;
        let record = TradeRecord {
            ticket: pos.ticket,
            open_time: timestamp_to_time(pos.open_time)?,
            close_time: timestamp_to_time(time)?,
            side: pos.side,
            lots: pos.lots,
            symbol: pos.symbol.clone(),
            open_price: pos.open_price,
            close_price: price,
            sl: pos.sl,
            tp: pos.tp,
            commission: 0.0,
            taxes: 0.0,
            swap: round_cents(pos.swap),
            profit,
            digits,
        };
        self.balance = round_cents(self.balance + record.net(self.convention));
        self.closed.push(record.clone());
        Ok(record)
    }

    /// Closes at the bar close on the exit side of the spread.
    pub fn close_position(&mut self, ticket: u64, bar: &Bar) -> Result<TradeRecord, LedgerError> {
        let index = self
            .positions
            .iter()
            .position(|p| p.ticket == ticket)
            .ok_or(LedgerError::UnknownTicket(ticket))?;
        let pos = self.positions[index].clone();
        self.mark(&pos.symbol, bar.close);
        let price = self.exit_price(&pos, bar.close)?;
        self.close_at(index, price, bar.timestamp)
    }

    /// Accrues swap for every calendar day boundary crossed up to `time`.
    pub fn advance_to(&mut self, time: i64) -> Result<(), LedgerError> {
        let day = time.div_euclid(86_400);
        let prev = self.day.unwrap_or(day);
        if day > prev {
            let days = (day - prev) as f64;
            for i in 0..self.positions.len() {
                let spec = self.spec(&self.positions[i].symbol)?;
                let rate = match self.positions[i].side {
                    Side::Buy => spec.swap_long,
                    _ => spec.swap_short,
                };
                let pos = &mut self.positions[i];
                pos.swap = round_cents(pos.swap + rate * pos.lots * days);
            }
        }
        self.day = Some(day.max(prev));
        Ok(())
    }

    /// Intrabar stop-loss and take-profit on `symbol`, stop-loss first.
    pub fn process_bar(
        &mut self,
        symbol: &str,
        bar: &Bar,
    ) -> Result<Vec<(TradeRecord, CloseReason)>, LedgerError> {
        self.spec(symbol)?;
        self.mark(symbol, bar.close);
        let mut out = Vec::new();
        let mut i = 0;
        while i < self.positions.len() {
            let pos = &self.positions[i];
            if pos.symbol != symbol {
                i += 1;
                continue;
            }
            let (sl_hit, tp_hit) = match pos.side {
                Side::Buy => (
                    pos.sl > 0.0 && bar.low <= pos.sl,
                    pos.tp > 0.0 && bar.high >= pos.tp,
                ),
                _ => (
                    pos.sl > 0.0 && bar.high >= pos.sl,
                    pos.tp > 0.0 && bar.low <= pos.tp,
                ),
            };
            if sl_hit {
                let price = pos.sl;
                out.push((
                    self.close_at(i, price, bar.timestamp)?,
                    CloseReason::StopLoss,
                ));
            } else if tp_hit {
                let price = pos.tp;
                out.push((
                    self.close_at(i, price, bar.timestamp)?,
                    CloseReason::TakeProfit,
                ));
            } else {
                i += 1;
            }
        }
        Ok(out)
    }

    /// Open positions valued at their last mark, in statement form.
    pub fn open_trades(&self) -> Result<Vec<OpenTrade>, LedgerError> {
        self.positions
            .iter()
            .map(|pos| {
                let mid = *self.marks.get(&pos.symbol).unwrap_or(&pos.open_price);
                let market = self.exit_price(pos, mid)?;
                Ok(OpenTrade {
                    ticket: pos.ticket,
                    open_time: timestamp_to_time(pos.open_time)?,
                    side: pos.side,
                    lots: pos.lots,
                    symbol: pos.symbol.clone(),
                    open_price: pos.open_price,
                    sl: pos.sl,
                    tp: pos.tp,
                    market_price: market,
                    commission: 0.0,
                    taxes: 0.0,
                    swap: round_cents(pos.swap),
                    profit: self.position_profit(pos, market)?,
                    digits: self.spec(&pos.symbol)?.digits,
                })
            })
            .collect()
    }
}
