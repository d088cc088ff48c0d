//! Statement parsing, summary statistics and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use chrono::NaiveDateTime;
use serde::Serialize;
use thiserror::Error;

use crate::ledger::{round_cents, OpenTrade, PlConvention, Side, TradeRecord, TIME_FORMAT};

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("format error at line {line}: {reason}")]
    FormatError { line: usize, reason: String },
    #[error("statement has no trades")]
    NoTrades,
    #[error("unparseable row {ticket}: {reason}")]
    UnparseableRow { ticket: u64, reason: String },
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
}

/// A parsed statement. `records` keeps balance rows in file order next to
/// the trades.
#[derive(Debug, Clone, PartialEq)]
pub struct Statement {
    pub deposit: f64,
    pub records: Vec<TradeRecord>,
    pub open_trades: Vec<OpenTrade>,
    /// Raw `label -> value` pairs of the Summary block and the P/L lines.
    pub summary: BTreeMap<String, String>,
}

impl Statement {
    /// Money value of a summary field, thousands spaces removed.
    pub fn reported(&self, label: &str) -> Option<f64> {
        self.summary.get(label).and_then(|v| parse_money(v).ok())
    }

    pub fn trades(&self) -> impl Iterator<Item = &TradeRecord> {
        self.records.iter().filter(|r| !r.is_balance())
    }
}

fn parse_money(s: &str) -> Result<f64, String> {
    let cleaned: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    if cleaned.is_empty() {
        return Ok(0.0);
    }
    cleaned
        .parse::<f64>()
        .map_err(|_| format!("bad number {s:?}"))
}

fn decimals(s: &str) -> usize {
    s.trim().split_once('.').map_or(0, |(_, f)| f.len())
}

fn parse_time(s: &str) -> Result<NaiveDateTime, String> {
    NaiveDateTime::parse_from_str(s.trim(), TIME_FORMAT).map_err(|_| format!("bad time {s:?}"))
}

fn is_date(s: &str) -> bool {
    let b = s.as_bytes();
    b.len() == 10
        && b[4] == b'.'
        && b[7] == b'.'
        && s.chars().filter(char::is_ascii_digit).count() == 8
}

fn is_clock(s: &str) -> bool {
    let b = s.as_bytes();
    b.len() == 5 && b[2] == b':' && s.chars().filter(char::is_ascii_digit).count() == 4
}

/// Splits a row into fields: on tabs when present, else on whitespace with
/// dates glued to their clock and thousands groups glued to their number.
fn split_fields(line: &str) -> Vec<String> {
    if line.contains('\t') {
        return line.split('\t').map(|f| f.trim().to_string()).collect();
    }
    let tokens: Vec<&str> = line.split_whitespace().collect();
    let mut out: Vec<String> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let t = tokens[i];
        if is_date(t) && i + 1 < tokens.len() && is_clock(tokens[i + 1]) {
            out.push(format!("{t} {}", tokens[i + 1]));
            i += 2;
            continue;
        }
        let group = |s: &str| {
            let d = s.trim_start_matches('-');
            !d.is_empty() && d.len() <= 3 && d.chars().all(|c| c.is_ascii_digit())
        };
        let tail = |s: &str| {
            let (int, frac) = s.split_once('.').unwrap_or((s, ""));
            int.len() == 3
                && int.chars().all(|c| c.is_ascii_digit())
                && frac.chars().all(|c| c.is_ascii_digit())
        };
        // only money columns follow the fourth field
        if out.len() >= 4 && group(t) && i + 1 < tokens.len() && tail(tokens[i + 1]) {
            out.push(format!("{t}{}", tokens[i + 1]));
            i += 2;
            continue;
        }
        out.push(t.to_string());
        i += 1;
    }
    out
}

fn is_row(fields: &[String]) -> bool {
    fields
        .first()
        .is_some_and(|f| f.len() >= 4 && f.chars().all(|c| c.is_ascii_digit()))
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    Preamble,
    Closed,
    Open,
    Working,
    Summary,
    Details,
}

fn parse_closed_row(f: &[String]) -> Result<TradeRecord, String> {
    let ticket: u64 = f[0].parse().map_err(|_| "bad ticket")?;
    let side: Side = f.get(2).ok_or("missing type")?.parse()?;
    if side == Side::Balance {
        let time = parse_time(&f[1])?;
        let amount = f
            .iter()
            .skip(4)
            .rev()
            .find(|v| !v.is_empty())
            .ok_or("balance row without amount")?;
        return Ok(TradeRecord {
            ticket,
            open_time: time,
            close_time: time,
            side,
            lots: 0.0,
            symbol: f.get(3).cloned().unwrap_or_default(),
            open_price: 0.0,
            close_price: 0.0,
            sl: 0.0,
            tp: 0.0,
            commission: 0.0,
            taxes: 0.0,
            swap: 0.0,
            profit: parse_money(amount)?,
            digits: 5,
        });
    }
    if f.len() < 14 {
        return Err(format!("expected 14 fields, got {}", f.len()));
    }
    Ok(TradeRecord {
        ticket,
        open_time: parse_time(&f[1])?,
        side,
        lots: parse_money(&f[3])?,
        symbol: f[4].clone(),
        open_price: parse_money(&f[5])?,
        sl: parse_money(&f[6])?,
        tp: parse_money(&f[7])?,
        close_time: parse_time(&f[8])?,
        close_price: parse_money(&f[9])?,
        commission: parse_money(&f[10])?,
        taxes: parse_money(&f[11])?,
        swap: parse_money(&f[12])?,
        profit: parse_money(&f[13])?,
        digits: decimals(&f[5]),
    })
}

fn parse_open_row(f: &[String]) -> Result<OpenTrade, String> {
    if f.len() < 13 {
        return Err(format!("expected 13 fields, got {}", f.len()));
    }
    Ok(OpenTrade {
        ticket: f[0].parse().map_err(|_| "bad ticket")?,
        open_time: parse_time(&f[1])?,
        side: f[2].parse()?,
        lots: parse_money(&f[3])?,
        symbol: f[4].clone(),
        open_price: parse_money(&f[5])?,
        sl: parse_money(&f[6])?,
        tp: parse_money(&f[7])?,
        market_price: parse_money(&f[8])?,
        commission: parse_money(&f[9])?,
        taxes: parse_money(&f[10])?,
        swap: parse_money(&f[11])?,
        profit: parse_money(&f[12])?,
        digits: decimals(&f[5]),
    })
}

fn collect_labels(fields: &[String], into: &mut BTreeMap<String, String>) {
    for pair in fields.windows(2) {
        if let Some(label) = pair[0].strip_suffix(':') {
            if !pair[1].is_empty() && !label.is_empty() {
                into.insert(label.trim().to_string(), pair[1].clone());
            }
        }
    }
}

/// Parses the closed-transactions, open-trades and summary blocks.
pub fn parse_statement(text: &str) -> Result<Statement, ReportError> {
    let mut section = Section::Preamble;
    let mut records = Vec::new();
    let mut open_trades = Vec::new();
    let mut summary = BTreeMap::new();
    let mut seen_header = false;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end();
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        match trimmed {
            "Closed Transactions:" => {
                section = Section::Closed;
                seen_header = true;
                continue;
            }
            "Open Trades:" => {
                section = Section::Open;
                continue;
            }
            "Working Orders:" => {
                section = Section::Working;
                continue;
            }
            "Summary:" => {
                section = Section::Summary;
                continue;
            }
            "Details:" => {
                section = Section::Details;
                continue;
            }
            _ => {}
        }
        if let Some((label, value)) = trimmed.split_once(':') {
            if matches!(label, "Closed P/L" | "Floating P/L") && !line.contains('\t') {
                summary.insert(label.to_string(), value.trim().to_string());
                continue;
            }
        }
        let fields = split_fields(line);
        let fail = |reason: String| ReportError::FormatError {
            line: line_no,
            reason,
        };
        match section {
            Section::Closed if is_row(&fields) => {
                records.push(parse_closed_row(&fields).map_err(fail)?)
            }
            Section::Open if is_row(&fields) => {
                open_trades.push(parse_open_row(&fields).map_err(fail)?)
            }
            Section::Summary => collect_labels(&fields, &mut summary),
            _ => {}
        }
    }
    if !seen_header {
        return Err(ReportError::FormatError {
            line: text.lines().count(),
            reason: "no \"Closed Transactions:\" block".into(),
        });
    }
    let deposit = round_cents(
        records
            .iter()
            .filter(|r| r.is_balance())
            .map(|r| r.profit)
            .sum(),
    );
    Ok(Statement {
        deposit,
        records,
        open_trades,
        summary,
    })
}

pub fn load_statement(path: &Path) -> Result<Statement, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|e| ReportError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse_statement(&text)
}

/// Money with a space between thousands groups: `-1 161.37`.
pub fn format_money(x: f64) -> String {
    let s = format!("{:.2}", round_cents(x) + 0.0);
    let (sign, body) = s.strip_prefix('-').map_or(("", s.as_str()), |b| ("-", b));
    let (int, frac) = body.split_once('.').expect("two decimals");
    let mut grouped = String::new();
    for (i, c) in int.chars().enumerate() {
        if i > 0 && (int.len() - i) % 3 == 0 {
            grouped.push(' ');
        }
        grouped.push(c);
    }
    format!("{sign}{grouped}.{frac}")
}

fn plain(x: f64) -> String {
    format!("{:.2}", round_cents(x) + 0.0)
}

fn price(x: f64, digits: usize) -> String {
    format!("{:.*}", digits, x + 0.0)
}

const CLOSED_HEADER: &str =
    "Ticket\tOpen Time\tType\tSize\tItem\tPrice\tS / L\tT / P\tClose Time\tPrice\tCommission\tTaxes\tSwap\tProfit";
const OPEN_HEADER: &str = "Ticket\tOpen Time\tType\tSize\tItem\tPrice\tS / L\tT / P\tPrice\tCommission\tTaxes\tSwap\tProfit";

pub fn render_closed_row(r: &TradeRecord) -> String {
    let t = |d: &NaiveDateTime| d.format(TIME_FORMAT).to_string();
    if r.is_balance() {
        return format!(
            "{}\t{}\tbalance\t{}\t\t\t\t\t\t\t\t\t\t{}",
            r.ticket,
            t(&r.open_time),
            r.symbol,
            plain(r.profit)
        );
    }
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        r.ticket,
        t(&r.open_time),
        r.side,
        plain(r.lots),
        r.symbol,
        price(r.open_price, r.digits),
        price(r.sl, r.digits),
        price(r.tp, r.digits),
        t(&r.close_time),
        price(r.close_price, r.digits),
        plain(r.commission),
        plain(r.taxes),
        plain(r.swap),
        plain(r.profit)
    )
}

pub fn render_open_row(o: &OpenTrade) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        o.ticket,
        o.open_time.format(TIME_FORMAT),
        o.side,
        plain(o.lots),
        o.symbol,
        price(o.open_price, o.digits),
        price(o.sl, o.digits),
        price(o.tp, o.digits),
        price(o.market_price, o.digits),
        plain(o.commission),
        plain(o.taxes),
        plain(o.swap),
        plain(o.profit)
    )
}

/// Statement text in the fixture layout. Summary and Details come from
/// `stats` when given.
pub fn render_statement(statement: &Statement, stats: Option<&SummaryStats>) -> String {
    let mut out = String::new();
    out.push_str("Closed Transactions:\n\n");
    out.push_str(CLOSED_HEADER);
    out.push('\n');
    for r in &statement.records {
        out.push_str(&render_closed_row(r));
        out.push('\n');
    }
    let closed_pl = stats
        .map(|s| s.closed_pl)
        .or_else(|| statement.reported("Closed P/L"));
    if let Some(pl) = closed_pl {
        let _ = writeln!(out, "\nClosed P/L: {}", format_money(pl));
    }
    out.push_str("\nOpen Trades:\n\n");
    out.push_str(OPEN_HEADER);
    out.push('\n');
    for o in &statement.open_trades {
        out.push_str(&render_open_row(o));
        out.push('\n');
    }
    let sum = |f: fn(&OpenTrade) -> f64| statement.open_trades.iter().map(f).sum::<f64>();
    let _ = writeln!(
        out,
        "\n{} {} {} {}",
        plain(sum(|o| o.commission)),
        plain(sum(|o| o.taxes)),
        plain(sum(|o| o.swap)),
        plain(sum(|o| o.profit))
    );
    let floating = round_cents(sum(|o| o.profit + o.swap));
    let _ = writeln!(out, "\nFloating P/L: {}", format_money(floating));
    out.push_str("\nWorking Orders:\n\n");
    out.push_str("Ticket\tOpen Time\tType\tSize\tItem\tPrice\tS / L\tT / P\tMarket Price\n\nNo transactions\n\n");
    if let Some(stats) = stats {
        out.push_str(&summary_blocks(stats));
    }
    out
}

/// The Summary / Details figures. Money rounded to cents, percents to 0.01.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryStats {
    pub pl_convention: PlConvention,
    pub deposit: f64,
    pub closed_pl: f64,
    pub floating_pl: f64,
    pub balance: f64,
    pub equity: f64,
    pub margin: Option<f64>,
    pub free_margin: Option<f64>,
    pub gross_profit: f64,
    /// Positive magnitude.
    pub gross_loss: f64,
    pub net_profit: f64,
    /// `f64::INFINITY` when there are no losing trades.
    pub profit_factor: f64,
    pub expected_payoff: f64,
    pub absolute_drawdown: f64,
    pub maximal_drawdown: f64,
    pub maximal_drawdown_pct: f64,
    pub relative_drawdown_pct: f64,
    pub relative_drawdown: f64,
    pub total_trades: usize,
    pub short_count: usize,
    pub short_won_pct: f64,
    pub long_count: usize,
    pub long_won_pct: f64,
    pub profit_trades: usize,
    pub profit_trades_pct: f64,
    pub loss_trades: usize,
    pub loss_trades_pct: f64,
    pub largest_profit: f64,
    pub largest_loss: f64,
    pub average_profit: f64,
    pub average_loss: f64,
    pub max_consecutive_wins: usize,
    pub max_consecutive_wins_money: f64,
    pub max_consecutive_losses: usize,
    pub max_consecutive_losses_money: f64,
    pub max_consecutive_profit: f64,
    pub max_consecutive_profit_count: usize,
    pub max_consecutive_loss: f64,
    pub max_consecutive_loss_count: usize,
    pub average_consecutive_wins: f64,
    pub average_consecutive_losses: f64,
}

impl SummaryStats {
    /// Attaches the used margin, which the trade rows cannot reproduce.
    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = Some(round_cents(margin));
        self.free_margin = Some(round_cents(self.equity - margin));
        self
    }
}

fn pct(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        round_cents(part as f64 * 100.0 / whole as f64)
    }
}

/// A trade counts as won when its net result is not negative.
pub fn summarize(
    records: &[TradeRecord],
    open_trades: &[OpenTrade],
    deposit: f64,
    convention: PlConvention,
) -> Result<SummaryStats, ReportError> {
    let mut trades: Vec<&TradeRecord> = records.iter().filter(|r| !r.is_balance()).collect();
    if trades.is_empty() {
        return Err(ReportError::NoTrades);
    }
    for t in &trades {
        let nums = [
            t.lots,
            t.open_price,
            t.close_price,
            t.profit,
            t.swap,
            t.commission,
        ];
        if nums.iter().any(|x| !x.is_finite()) || !(t.lots > 0.0) {
            return Err(ReportError::UnparseableRow {
                ticket: t.ticket,
                reason: "non-finite value or nonpositive size".into(),
            });
        }
        if t.close_time < t.open_time {
            return Err(ReportError::UnparseableRow {
                ticket: t.ticket,
                reason: "closed before it opened".into(),
            });
        }
    }
    trades.sort_by_key(|t| (t.close_time, t.ticket));
    let nets: Vec<f64> = trades
        .iter()
        .map(|t| round_cents(t.net(convention)))
        .collect();

    let mut gross_profit = 0.0;
    let mut gross_loss = 0.0;
    let (mut wins, mut losses) = (0usize, 0usize);
    let (mut largest_profit, mut largest_loss) = (0.0f64, 0.0f64);
    for &n in &nets {
        if n >= 0.0 {
            wins += 1;
            gross_profit += n;
            largest_profit = largest_profit.max(n);
        } else {
            losses += 1;
            gross_loss -= n;
            largest_loss = largest_loss.min(n);
        }
    }
    let gross_profit = round_cents(gross_profit);
    let gross_loss = round_cents(gross_loss);
    let net_profit = round_cents(gross_profit - gross_loss);
    let total = trades.len();

    let count_side = |side: Side| {
        let all = trades.iter().filter(|t| t.side == side).count();
        let won = trades
            .iter()
            .zip(&nets)
            .filter(|(t, n)| t.side == side && **n >= 0.0)
            .count();
        (all, pct(won, all))
    };
    let (short_count, short_won_pct) = count_side(Side::Sell);
    let (long_count, long_won_pct) = count_side(Side::Buy);

    // balance curve
    let mut bal = deposit;
    let mut peak = deposit;
    let mut min_bal = deposit;
    let (mut max_dd, mut max_dd_pct) = (0.0f64, 0.0f64);
    let (mut rel_pct, mut rel_dd) = (0.0f64, 0.0f64);
    for &n in &nets {
        bal = round_cents(bal + n);
        min_bal = min_bal.min(bal);
        if bal > peak {
            peak = bal;
        }
        let dd = peak - bal;
        let p = if peak > 0.0 { dd / peak * 100.0 } else { 0.0 };
        if dd > max_dd {
            max_dd = dd;
            max_dd_pct = p;
        }
        if p > rel_pct {
            rel_pct = p;
            rel_dd = dd;
        }
    }

    // streaks: (is_win, count, money)
    let mut streaks: Vec<(bool, usize, f64)> = Vec::new();
    for &n in &nets {
        let win = n >= 0.0;
        match streaks.last_mut() {
            Some(s) if s.0 == win => {
                s.1 += 1;
                s.2 += n;
            }
            _ => streaks.push((win, 1, n)),
        }
    }
    let pick = |win: bool, by_count: bool| -> (usize, f64) {
        let mut best: Option<(usize, f64)> = None;
        for &(_, c, m) in streaks.iter().filter(|s| s.0 == win) {
            let better = match best {
                None => true,
                Some((bc, _)) if by_count => c > bc,
                Some((_, bm)) if win => m > bm,
                Some((_, bm)) => m < bm,
            };
            if better {
                best = Some((c, m));
            }
        }
        best.map_or((0, 0.0), |(c, m)| (c, round_cents(m)))
    };
    let (mcw, mcw_money) = pick(true, true);
    let (mcl, mcl_money) = pick(false, true);
    let (mcp_count, mcp) = pick(true, false);
    let (mcloss_count, mcloss) = pick(false, false);
    let avg_streak = |win: bool| {
        let s: Vec<usize> = streaks.iter().filter(|s| s.0 == win).map(|s| s.1).collect();
        if s.is_empty() {
            0.0
        } else {
            round_cents(s.iter().sum::<usize>() as f64 / s.len() as f64)
        }
    };

    let closed_pl = round_cents(nets.iter().sum());
    let floating_pl = round_cents(open_trades.iter().map(|o| o.profit + o.swap).sum());
    let balance = round_cents(deposit + closed_pl);
    let profit_factor = if gross_loss > 0.0 {
        round_cents(gross_profit / gross_loss)
    } else if gross_profit > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    Ok(SummaryStats {
        pl_convention: convention,
        deposit: round_cents(deposit),
        closed_pl,
        floating_pl,
        balance,
        equity: round_cents(balance + floating_pl),
        margin: None,
        free_margin: None,
        gross_profit,
        gross_loss,
        net_profit,
        profit_factor,
        expected_payoff: round_cents(net_profit / total as f64),
        absolute_drawdown: round_cents((deposit - min_bal).max(0.0)),
        maximal_drawdown: round_cents(max_dd),
        maximal_drawdown_pct: round_cents(max_dd_pct),
        relative_drawdown_pct: round_cents(rel_pct),
        relative_drawdown: round_cents(rel_dd),
        total_trades: total,
        short_count,
        short_won_pct,
        long_count,
        long_won_pct,
        profit_trades: wins,
        profit_trades_pct: pct(wins, total),
        loss_trades: losses,
        loss_trades_pct: pct(losses, total),
        largest_profit,
        largest_loss,
        average_profit: if wins > 0 {
            round_cents(gross_profit / wins as f64)
        } else {
            0.0
        },
        average_loss: if losses > 0 {
            round_cents(-gross_loss / losses as f64)
        } else {
            0.0
        },
        max_consecutive_wins: mcw,
        max_consecutive_wins_money: mcw_money,
        max_consecutive_losses: mcl,
        max_consecutive_losses_money: mcl_money,
        max_consecutive_profit: mcp,
        max_consecutive_profit_count: mcp_count,
        max_consecutive_loss: mcloss,
        max_consecutive_loss_count: mcloss_count,
        average_consecutive_wins: avg_streak(true),
        average_consecutive_losses: avg_streak(false),
    })
}

/// Summary of a parsed statement, with the reported margin attached.
pub fn summarize_statement(
    statement: &Statement,
    convention: PlConvention,
) -> Result<SummaryStats, ReportError> {
    let stats = summarize(
        &statement.records,
        &statement.open_trades,
        statement.deposit,
        convention,
    )?;
    Ok(match statement.reported("Margin") {
        Some(m) => stats.with_margin(m),
        None => stats,
    })
}

/// The convention whose closed P/L matches the statement's own figure.
pub fn detect_convention(statement: &Statement) -> Option<PlConvention> {
    let target = statement
        .reported("Closed Trade P/L")
        .or_else(|| statement.reported("Closed P/L"))?;
    [PlConvention::ProfitPlusSwap, PlConvention::ProfitOnly]
        .into_iter()
        .find(|&c| {
            let total: f64 = statement.trades().map(|t| t.net(c)).sum();
            (round_cents(total) - target).abs() < 0.005
        })
}

fn factor_text(x: f64) -> String {
    if x.is_infinite() {
        "-".into()
    } else {
        plain(x)
    }
}

fn summary_blocks(s: &SummaryStats) -> String {
    let opt = |x: Option<f64>| x.map_or_else(|| "-".to_string(), format_money);
    let mut out = String::new();
    out.push_str("Summary:\n\n");
    let _ = writeln!(
        out,
        "Deposit/Withdrawal:\t{}\tCredit Facility:\t0.00\t\t",
        format_money(s.deposit)
    );
    let _ = writeln!(
        out,
        "Closed Trade P/L:\t{}\tFloating P/L:\t{}\tMargin:\t{}",
        format_money(s.closed_pl),
        format_money(s.floating_pl),
        opt(s.margin)
    );
    let _ = writeln!(
        out,
        "Balance:\t{}\tEquity:\t{}\tFree Margin:\t{}",
        format_money(s.balance),
        format_money(s.equity),
        opt(s.free_margin)
    );
    out.push_str("\nDetails:\n\n");
    let _ = writeln!(
        out,
        "Gross Profit:\t{}\tGross Loss:\t{}\tTotal Net Profit:\t{}",
        format_money(s.gross_profit),
        format_money(s.gross_loss),
        format_money(s.net_profit)
    );
    let _ = writeln!(
        out,
        "Profit Factor:\t{}\tExpected Payoff:\t{}\t\t",
        factor_text(s.profit_factor),
        plain(s.expected_payoff)
    );
    let _ = writeln!(
        out,
        "Absolute Drawdown:\t{}\tMaximal Drawdown:\t{} ({:.2}%)\tRelative Drawdown:\t{:.2}% ({})",
        format_money(s.absolute_drawdown),
        format_money(s.maximal_drawdown),
        s.maximal_drawdown_pct,
        s.relative_drawdown_pct,
        format_money(s.relative_drawdown)
    );
    let _ = writeln!(
        out,
        "Total Trades:\t{}\tShort Positions (won %):\t{} ({:.2}%)\tLong Positions (won %):\t{} ({:.2}%)",
        s.total_trades, s.short_count, s.short_won_pct, s.long_count, s.long_won_pct
    );
    let _ = writeln!(
        out,
        "\t\tProfit Trades (% of total):\t{} ({:.2}%)\tLoss trades (% of total):\t{} ({:.2}%)",
        s.profit_trades, s.profit_trades_pct, s.loss_trades, s.loss_trades_pct
    );
    let _ = writeln!(
        out,
        "Largest\t\tprofit trade:\t{}\tloss trade:\t{}",
        format_money(s.largest_profit),
        format_money(s.largest_loss)
    );
    let _ = writeln!(
        out,
        "Average\tprofit trade:\t{}\tloss trade:\t{}",
        format_money(s.average_profit),
        format_money(s.average_loss)
    );
    let _ = writeln!(
        out,
        "Maximum\tconsecutive wins ($):\t{} ({})\tconsecutive losses ($):\t{} ({})",
        s.max_consecutive_wins,
        format_money(s.max_consecutive_wins_money),
        s.max_consecutive_losses,
        format_money(s.max_consecutive_losses_money)
    );
    let _ = writeln!(
        out,
        "Maximal\tconsecutive profit (count):\t{} ({})\tconsecutive loss (count):\t{} ({})",
        format_money(s.max_consecutive_profit),
        s.max_consecutive_profit_count,
        format_money(s.max_consecutive_loss),
        s.max_consecutive_loss_count
    );
    let _ = writeln!(
        out,
        "Average\tconsecutive wins:\t{:.2}\tconsecutive losses:\t{:.2}",
        s.average_consecutive_wins, s.average_consecutive_losses
    );
    out
}

/// Human-readable Summary and Details text.
pub fn render_report(stats: &SummaryStats) -> Result<String, ReportError> {
    if stats.total_trades == 0 {
        return Err(ReportError::NoTrades);
    }
    let mut out = format!("P/L convention: {}\n\n", stats.pl_convention.as_str());
    out.push_str(&summary_blocks(stats));
    Ok(out)
}

/// Flat key/value view; every value is a decimal string.
pub fn stats_kv(s: &SummaryStats) -> BTreeMap<String, String> {
    let mut kv = BTreeMap::new();
    let mut money = |k: &str, v: f64| {
        kv.insert(k.to_string(), plain(v));
    };
    money("deposit", s.deposit);
    money("closed_pl", s.closed_pl);
    money("floating_pl", s.floating_pl);
    money("balance", s.balance);
    money("equity", s.equity);
    money("gross_profit", s.gross_profit);
    money("gross_loss", s.gross_loss);
    money("net_profit", s.net_profit);
    money("expected_payoff", s.expected_payoff);
    money("absolute_drawdown", s.absolute_drawdown);
    money("maximal_drawdown", s.maximal_drawdown);
    money("maximal_drawdown_pct", s.maximal_drawdown_pct);
    money("relative_drawdown_pct", s.relative_drawdown_pct);
    money("relative_drawdown", s.relative_drawdown);
    money("short_won_pct", s.short_won_pct);
    money("long_won_pct", s.long_won_pct);
    money("profit_trades_pct", s.profit_trades_pct);
    money("loss_trades_pct", s.loss_trades_pct);
    money("largest_profit", s.largest_profit);
    money("largest_loss", s.largest_loss);
    money("average_profit", s.average_profit);
    money("average_loss", s.average_loss);
    money("max_consecutive_wins_money", s.max_consecutive_wins_money);
    money(
        "max_consecutive_losses_money",
        s.max_consecutive_losses_money,
    );
    money("max_consecutive_profit", s.max_consecutive_profit);
    money("max_consecutive_loss", s.max_consecutive_loss);
    money("average_consecutive_wins", s.average_consecutive_wins);
    money("average_consecutive_losses", s.average_consecutive_losses);
    if let Some(m) = s.margin {
        money("margin", m);
    }
    if let Some(m) = s.free_margin {
        money("free_margin", m);
    }
    kv.insert(
        "profit_factor".into(),
        if s.profit_factor.is_infinite() {
            "inf".into()
        } else {
            plain(s.profit_factor)
        },
    );
    for (k, v) in [
        ("total_trades", s.total_trades),
        ("short_count", s.short_count),
        ("long_count", s.long_count),
        ("profit_trades", s.profit_trades),
        ("loss_trades", s.loss_trades),
        ("max_consecutive_wins", s.max_consecutive_wins),
        ("max_consecutive_losses", s.max_consecutive_losses),
        (
            "max_consecutive_profit_count",
            s.max_consecutive_profit_count,
        ),
        ("max_consecutive_loss_count", s.max_consecutive_loss_count),
    ] {
        kv.insert(k.to_string(), v.to_string());
    }
    kv.insert("pl_convention".into(), s.pl_convention.as_str().into());
    kv
}

pub fn stats_json(s: &SummaryStats) -> String {
    serde_json::to_string_pretty(&stats_kv(s)).expect("string map serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> NaiveDateTime {
        parse_time(s).unwrap()
    }

    fn trade(ticket: u64, close: &str, side: Side, profit: f64) -> TradeRecord {
        TradeRecord {
            ticket,
            open_time: t("2011.04.28 09:00"),
            close_time: t(close),
            side,
            lots: 0.1,
            symbol: "eurusd".into(),
            open_price: 1.4,
            close_price: 1.41,
            sl: 0.0,
            tp: 0.0,
            commission: 0.0,
            taxes: 0.0,
            swap: 0.0,
            profit,
            digits: 5,
        }
    }

    #[test]
    fn money_format() {
        assert_eq!(format_money(5683.62), "5 683.62");
        assert_eq!(format_money(-1161.37), "-1 161.37");
        assert_eq!(format_money(10683.62), "10 683.62");
        assert_eq!(format_money(1234567.0), "1 234 567.00");
        assert_eq!(format_money(-0.001), "0.00");
        assert_eq!(format_money(12.5), "12.50");
    }

    #[test]
    fn single_winner() {
        let s = summarize(
            &[trade(1, "2011.04.28 10:00", Side::Buy, 10.0)],
            &[],
            100.0,
            PlConvention::ProfitPlusSwap,
        )
        .unwrap();
        assert_eq!(s.net_profit, 10.0);
        assert!(s.profit_factor.is_infinite());
        assert_eq!(s.total_trades, 1);
        assert_eq!(s.maximal_drawdown, 0.0);
        let text = render_report(&s).unwrap();
        assert!(text.contains("Profit Factor:\t-\t"));
        assert_eq!(stats_kv(&s)["profit_factor"], "inf");
    }

    #[test]
    fn win_then_loss() {
        let recs = [
            trade(1, "2011.04.28 10:00", Side::Buy, 5.0),
            trade(2, "2011.04.28 11:00", Side::Sell, -3.0),
        ];
        let s = summarize(&recs, &[], 100.0, PlConvention::ProfitPlusSwap).unwrap();
        assert_eq!(
            (s.gross_profit, s.gross_loss, s.net_profit),
            (5.0, 3.0, 2.0)
        );
        assert_eq!(
            (s.max_consecutive_wins, s.max_consecutive_wins_money),
            (1, 5.0)
        );
        assert_eq!(s.maximal_drawdown, 3.0);
        assert_eq!(s.absolute_drawdown, 0.0);
        assert_eq!(s.short_won_pct, 0.0);
        assert_eq!(s.long_won_pct, 100.0);
    }

    #[test]
    fn absolute_drawdown_below_deposit() {
        let recs = [
            trade(1, "2011.04.28 10:00", Side::Buy, -7.0),
            trade(2, "2011.04.28 11:00", Side::Buy, 20.0),
        ];
        let s = summarize(&recs, &[], 100.0, PlConvention::ProfitOnly).unwrap();
        assert_eq!(s.absolute_drawdown, 7.0);
        assert_eq!(s.maximal_drawdown, 7.0);
        assert_eq!(s.maximal_drawdown_pct, 7.0);
    }

    #[test]
    fn no_trades() {
        let mut dep = trade(1, "2011.04.28 10:00", Side::Balance, 5000.0);
        dep.lots = 0.0;
        assert_eq!(
            summarize(&[dep], &[], 5000.0, PlConvention::ProfitOnly),
            Err(ReportError::NoTrades)
        );
        assert_eq!(
            summarize(&[], &[], 5000.0, PlConvention::ProfitOnly),
            Err(ReportError::NoTrades)
        );
    }

    #[test]
    fn empty_file_is_a_format_error() {
        assert!(matches!(
            parse_statement(""),
            Err(ReportError::FormatError { .. })
        ));
    }

    #[test]
    fn bad_row_reports_its_line() {
        let text = "Closed Transactions:\n\n123456\t2011.04.28 09:14\tbuy\t1.00\n";
        assert_eq!(
            parse_statement(text).unwrap_err(),
            ReportError::FormatError {
                line: 3,
                reason: "expected 14 fields, got 4".into()
            }
        );
    }

    #[test]
    fn whitespace_separated_rows() {
        let text = "Closed Transactions:\n\
            111018750 2011.04.01 11:19 balance Deposit 5 000.00\n\
            114266871 2011.04.28 09:14 sell 1.00 gbpusd 1.66839 0.00000 0.00000 2011.04.28 09:23 1.66819 0.00 0.00 0.00 1 020.00\n";
        let s = parse_statement(text).unwrap();
        assert_eq!(s.deposit, 5000.0);
        assert_eq!(s.records[1].profit, 1020.0);
        assert_eq!(s.records[1].close_time, t("2011.04.28 09:23"));
    }
}
