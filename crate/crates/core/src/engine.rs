//! Bar-by-bar backtest: assembly decisions, capital allocation and the
//! simulated broker, replayed over aligned quote series.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info};

use crate::assembly::{
    journal_csv, mix_seed, Assembly, AssemblyNode, FusionParams, JournalRow, MarketSnapshot,
    StateThresholds, UnitParams, UnitStateKind,
};
use crate::config::RunConfig;
use crate::decision::{Action, RiskConfig};
use crate::error::{Error, Result};
use crate::ledger::{
    base_usd_value, round_cents, LedgerError, Side, SimBroker, SymbolSpec, CONTRACT_SIZE,
};
use crate::market_data::{generate, load_history, DataError, QuoteSeries, SyntheticSpec};
use crate::portfolio::{
    allocation_csv, enforce_margin, reallocate, Allocation, AllocationRow, EffectivenessRecord,
};
use crate::report::{
    render_report, render_statement, stats_json, summarize, Statement, SummaryStats,
};
use crate::sde::FitConfig;
use crate::wavelet::WaveletFamily;

/// Score given to a symbol without closed trades in the effectiveness
/// window, so untried symbols get an equal share.
pub const UNTRIED_SCORE: f64 = 1.0;

/// Everything a backtest writes.
#[derive(Debug, Clone)]
pub struct BacktestOutput {
    pub statement: String,
    pub report: String,
    pub summary_json: String,
    pub decisions_csv: String,
    pub allocations_csv: String,
    pub equity_csv: String,
    pub stats: Option<SummaryStats>,
    pub parsed: Statement,
}

impl BacktestOutput {
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        for (name, body) in [
            ("statement.txt", &self.statement),
            ("report.txt", &self.report),
            ("summary.json", &self.summary_json),
            ("decisions.csv", &self.decisions_csv),
            ("allocations.csv", &self.allocations_csv),
            ("equity.csv", &self.equity_csv),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        Ok(())
    }
}

/// Base-timeframe quotes for every configured symbol, in config order.
pub fn load_market(cfg: &RunConfig) -> Result<Vec<QuoteSeries>> {
    cfg.symbols
        .iter()
        .enumerate()
        .map(|(i, (name, sym))| {
            if let Some(path) = &sym.data {
                Ok(load_history(path, name, cfg.base_timeframe)?)
            } else {
                let source = sym
                    .synthetic
                    .as_ref()
                    .expect("validated: data or synthetic");
                let mut spec = SyntheticSpec::new(
                    source.kind,
                    cfg.synthetic_bars,
                    mix_seed(&[cfg.seed, i as u64]),
                );
                spec.parameters = source.parameters.clone();
                spec.symbol = name.clone();
                spec.timeframe = cfg.base_timeframe;
                Ok(generate(&spec)?)
            }
        })
        .collect()
}

/// Keeps only timestamps present in every series.
pub fn align(series: &[QuoteSeries]) -> Result<Vec<QuoteSeries>> {
    let first = series.first().ok_or(DataError::EmptySeries)?;
    let mut common: Vec<i64> = first.bars().iter().map(|b| b.timestamp).collect();
    for s in &series[1..] {
        let ts: std::collections::BTreeSet<i64> = s.bars().iter().map(|b| b.timestamp).collect();
        common.retain(|t| ts.contains(t));
    }
    if common.is_empty() {
        return Err(DataError::EmptySeries.into());
    }
    Ok(series
        .iter()
        .map(|s| s.retain_timestamps(&common))
        .collect())
}

fn unit_params(cfg: &RunConfig) -> Result<UnitParams> {
    Ok(UnitParams {
        family: WaveletFamily::from_name(cfg.wavelet),
        scale: cfg.scale,
        window: cfg.window,
        fit: FitConfig {
            bins: cfg.bins,
            order_f: cfg.order_f,
            order_g2: cfg.order_g2,
            tail_extension: cfg.tail_extension,
        },
        grid_points: cfg.density_points,
        risk: RiskConfig::new(cfg.alpha1, cfg.ks_alpha, cfg.shift_t)?,
        indicators: cfg.indicators.clone(),
        indicator_params: BTreeMap::new(),
    })
}

fn fusion_params(cfg: &RunConfig) -> FusionParams {
    FusionParams {
        kappa: cfg.kappa,
        thresholds: StateThresholds {
            q_hi: cfg.q_hi,
            q_lo: cfg.q_lo,
        },
        train_window: cfg.train_window,
        reoptimize_every: cfg.reoptimize_every,
        perturb_rounds: cfg.perturb_rounds,
        temperature: cfg.temperature,
        state_window: cfg.state_window,
        coupling_window: cfg.coupling_window,
        seed: cfg.seed,
    }
}

/// Node tree of the configuration: an elementary node at the base timeframe
/// wrapped once per homothetic factor.
pub fn build_tree(cfg: &RunConfig) -> AssemblyNode {
    let mut root = AssemblyNode::nested(
        cfg.base_timeframe,
        &cfg.homothetic_factors,
        cfg.homothetic_own_generators,
    );
    root.feedback_depth = cfg.feedback_depth;
    root
}

fn effectiveness(
    broker: &SimBroker,
    symbols: &[String],
    timeframe: u32,
    since: chrono::NaiveDateTime,
) -> Vec<EffectivenessRecord> {
    symbols
        .iter()
        .map(|sym| {
            let nets: Vec<f64> = broker
                .closed()
                .iter()
                .filter(|r| !r.is_balance() && &r.symbol == sym && r.close_time >= since)
                .map(|r| r.net(broker.convention()))
                .collect();
            if nets.is_empty() {
                return EffectivenessRecord {
                    symbol: sym.clone(),
                    timeframe,
                    window_pl: UNTRIED_SCORE,
                    pl_std: 0.0,
                    trade_count: 0,
                };
            }
            let mean = nets.iter().sum::<f64>() / nets.len() as f64;
            let var = nets.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nets.len() as f64;
            EffectivenessRecord {
                symbol: sym.clone(),
                timeframe,
                window_pl: nets.iter().sum(),
                pl_std: var.sqrt(),
                trade_count: nets.len(),
            }
        })
        .collect()
}

/// Runs the configured backtest on base-timeframe series (one per symbol,
/// in config order).
pub fn run_backtest(cfg: &RunConfig, base: Vec<QuoteSeries>) -> Result<BacktestOutput> {
    cfg.validate()?;
    let threads = cfg.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::from(DataError::InvalidParameter(format!("thread pool: {e}"))))?;
    pool.install(|| run_inner(cfg, base))
}

fn run_inner(cfg: &RunConfig, base: Vec<QuoteSeries>) -> Result<BacktestOutput> {
    let symbols = cfg.symbol_names();
    if base.len() != symbols.len() || base.iter().zip(&symbols).any(|(s, n)| &s.symbol != n) {
        return Err(DataError::InvalidParameter(
            "series do not match the configured symbols".into(),
        )
        .into());
    }
    let base = align(&base)?;
    let bars = base[0].len();
    let tree = build_tree(cfg);
    let mut timeframes = Vec::new();
    let mut tf = cfg.base_timeframe;
    for f in &cfg.homothetic_factors {
        tf *= f;
        timeframes.push(tf);
    }
    let snapshot = MarketSnapshot::build(base.clone(), &timeframes)?;
    let mut assembly = Assembly::new(
        &tree,
        cfg.k_max,
        unit_params(cfg)?,
        fusion_params(cfg),
        symbols.clone(),
    )?;

    let specs: BTreeMap<String, SymbolSpec> = cfg
        .symbols
        .iter()
        .map(|(n, s)| {
            (
                n.clone(),
                SymbolSpec {
                    spread: s.spread,
                    swap_long: s.swap_long,
                    swap_short: s.swap_short,
                    conversion_rate: s.conversion_rate,
                    digits: s.digits,
                },
            )
        })
        .collect();
    let start = base[0].bars()[0].timestamp;
    let mut broker = SimBroker::new(cfg.deposit, cfg.leverage, specs, cfg.pl_convention, start)?;

    let mut journal: Vec<JournalRow> = Vec::new();
    let mut alloc_rows: Vec<AllocationRow> = Vec::new();
    let mut equity_csv = String::from("bar_time,balance,equity,margin,free_margin\n");
    let mut allocation = Allocation {
        fractions: symbols
            .iter()
            .map(|s| (s.clone(), 1.0 / symbols.len() as f64))
            .collect(),
        reserve: 0.0,
    };
    let root = assembly.root();
    let base_tf = cfg.base_timeframe;

    for t in 0..bars {
        let time = base[0].bars()[t].timestamp;
        broker.advance_to(time)?;
        for (s, sym) in symbols.iter().enumerate() {
            for (rec, reason) in broker.process_bar(sym, &base[s].bars()[t])? {
                debug!(
                    "{sym} ticket {} closed by {reason:?} at {}",
                    rec.ticket, rec.close_price
                );
            }
        }

        let mut exits: Vec<Vec<Action>> = vec![Vec::new(); symbols.len()];
        let mut root_eval = None;
        for node in assembly.node_ids() {
            let factor = (assembly.timeframe(node) / base_tf) as usize;
            if (t + 1) % factor != 0 {
                continue;
            }
            let eval = assembly.evaluate_node(node, (t + 1) / factor - 1, &snapshot)?;
            for (s, e) in eval.exits.iter().enumerate() {
                exits[s].extend(e.iter().copied());
            }
            journal.extend(eval.journal.iter().cloned());
            if node == root {
                root_eval = Some(eval);
            }
        }

        for (s, sym) in symbols.iter().enumerate() {
            let bar = base[s].bars()[t];
            for action in &exits[s] {
                let side = match action {
                    Action::ExitLong => Side::Buy,
                    _ => Side::Sell,
                };
                let tickets: Vec<u64> = broker
                    .positions()
                    .iter()
                    .filter(|p| &p.symbol == sym && p.side == side)
                    .map(|p| p.ticket)
                    .collect();
                for ticket in tickets {
                    broker.close_position(ticket, &bar)?;
                }
            }
        }

        if t % cfg.reallocate_every == 0 {
            let lookback = t.saturating_sub(cfg.effectiveness_window);
            let since = crate::ledger::timestamp_to_time(base[0].bars()[lookback].timestamp)?;
            let records = effectiveness(&broker, &symbols, base_tf, since);
            allocation = reallocate(&records, cfg.lambda_risk, cfg.floor)?;
            let lots = order_lots(cfg, &broker, &allocation, &base, t)?;
            for ((sym, fraction), (_, l)) in allocation.fractions.iter().zip(&lots) {
                alloc_rows.push(AllocationRow {
                    bar_time: time,
                    symbol: sym.clone(),
                    fraction: *fraction,
                    lots: *l,
                });
            }
        }

        if let Some(eval) = root_eval {
            let lots = order_lots(cfg, &broker, &allocation, &base, t)?;
            for (s, sym) in symbols.iter().enumerate() {
                let score = eval.scores[s];
                let state = eval.states[s];
                let desired = if score >= cfg.entry_threshold && score > 0.0 {
                    Some(Side::Buy)
                } else if score <= -cfg.entry_threshold && score < 0.0 {
                    Some(Side::Sell)
                } else {
                    None
                };
                let action = match desired {
                    Some(Side::Buy) => Action::EnterLong,
                    Some(Side::Sell) => Action::EnterShort,
                    _ => Action::Hold,
                };
                journal.push(JournalRow {
                    bar_time: time,
                    symbol: sym.clone(),
                    source: "fused".into(),
                    action,
                    strength: score.abs(),
                    state,
                });
                let (Some(side), UnitStateKind::Active) = (desired, state) else {
                    continue;
                };
                let bar = base[s].bars()[t];
                let held: Vec<(u64, Side)> = broker
                    .positions()
                    .iter()
                    .filter(|p| &p.symbol == sym)
                    .map(|p| (p.ticket, p.side))
                    .collect();
                if held.iter().any(|(_, sd)| *sd == side) {
                    continue;
                }
                for (ticket, _) in held {
                    broker.close_position(ticket, &bar)?;
                }
                let l = lots[s].1;
                if l < 0.01 {
                    continue;
                }
                let pip = cfg.pip(sym);
                let dir = side.sign();
                let sl = if cfg.sl_pips > 0.0 {
                    bar.close - dir * cfg.sl_pips * pip
                } else {
                    0.0
                };
                let tp = if cfg.tp_pips > 0.0 {
                    bar.close + dir * cfg.tp_pips * pip
                } else {
                    0.0
                };
                match broker.open_position(sym, side, l, sl, tp, &bar) {
                    Ok(ticket) => debug!("{sym} opened {side} {l:.2} ticket {ticket}"),
                    Err(LedgerError::InsufficientMargin { required, free }) => {
                        debug!("{sym} skipped: margin {required:.2} > free {free:.2}")
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }

        for (s, sym) in symbols.iter().enumerate() {
            broker.mark(sym, base[s].bars()[t].close);
        }
        let a = broker.account()?;
        let _ = writeln!(
            equity_csv,
            "{time},{:.2},{:.2},{:.2},{:.2}",
            a.balance, a.equity, a.margin, a.free_margin
        );
    }

    let account = broker.account()?;
    let open_trades = broker.open_trades()?;
    let parsed = Statement {
        deposit: account.deposit,
        records: broker.closed().to_vec(),
        open_trades,
        summary: BTreeMap::new(),
    };
    let stats = match summarize(
        &parsed.records,
        &parsed.open_trades,
        parsed.deposit,
        cfg.pl_convention,
    ) {
        Ok(s) => Some(s.with_margin(account.margin)),
        Err(crate::report::ReportError::NoTrades) => None,
        Err(e) => return Err(e.into()),
    };
    let statement = render_statement(&parsed, stats.as_ref());
    let (report, summary_json) = match &stats {
        Some(s) => (render_report(s)?, stats_json(s)),
        None => (
            format!(
                "P/L convention: {}\n\nNo closed trades.\n",
                cfg.pl_convention.as_str()
            ),
            "{}".to_string(),
        ),
    };
    info!(
        "backtest done: {bars} bars, {} closed trades, equity {:.2}",
        parsed.records.len() - 1,
        account.equity
    );
    Ok(BacktestOutput {
        statement,
        report,
        summary_json,
        decisions_csv: journal_csv(&journal),
        allocations_csv: allocation_csv(&alloc_rows),
        equity_csv,
        stats,
        parsed,
    })
}

fn order_lots(
    cfg: &RunConfig,
    broker: &SimBroker,
    allocation: &Allocation,
    base: &[QuoteSeries],
    t: usize,
) -> Result<Vec<(String, f64)>> {
    let equity = broker.account()?.equity;
    let mut prices = BTreeMap::new();
    for (s, (sym, spec)) in cfg.symbols.iter().enumerate() {
        prices.insert(
            sym.clone(),
            base_usd_value(sym, base[s].bars()[t].close, spec.conversion_rate)?,
        );
    }
    if equity <= 0.0 {
        return Ok(allocation
            .fractions
            .iter()
            .map(|(s, _)| (s.clone(), 0.0))
            .collect());
    }
    let used = Allocation {
        fractions: allocation
            .fractions
            .iter()
            .map(|(s, f)| (s.clone(), f * cfg.margin_usage))
            .collect(),
        reserve: 1.0
            - allocation
                .fractions
                .iter()
                .map(|(_, f)| f * cfg.margin_usage)
                .sum::<f64>(),
    };
    Ok(enforce_margin(
        &used,
        equity,
        cfg.leverage,
        &prices,
        CONTRACT_SIZE as u32,
    )?)
}

/// Convenience: load the market of `cfg` and run.
pub fn backtest(cfg: &RunConfig) -> Result<BacktestOutput> {
    let base = load_market(cfg)?;
    run_backtest(cfg, base)
}

/// Closed P/L and floating P/L of an output, re-derived from its rows.
pub fn resum(parsed: &Statement, cfg: &RunConfig) -> (f64, f64) {
    let closed = parsed
        .records
        .iter()
        .filter(|r| !r.is_balance())
        .map(|r| r.net(cfg.pl_convention))
        .sum::<f64>();
    let floating = parsed
        .open_trades
        .iter()
        .map(|o| o.profit + o.swap)
        .sum::<f64>();
    (round_cents(closed), round_cents(floating))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(threads: usize) -> RunConfig {
        let text = format!(
            r#"
seed = 11
threads = {threads}
synthetic_bars = 900
window = 128
shift_t = 32
bins = 6
order_f = 2
order_g2 = 1
density_points = 128
train_window = 60
reoptimize_every = 6
perturb_rounds = 4
state_window = 24
entry_threshold = 0.05
margin_usage = 0.2

[symbols.eurusd]
spread = 0.0001
swap_long = -0.3
swap_short = 0.1
synthetic = {{ kind = "ornstein_uhlenbeck", theta = 0.05, sigma = 0.0004, mu = 1.42, y0 = 1.42, dt = 1.0 }}

[symbols.usdjpy]
spread = 0.01
digits = 3
synthetic = {{ kind = "ornstein_uhlenbeck", theta = 0.05, sigma = 0.03, mu = 81.5, y0 = 81.5, dt = 1.0 }}

[symbols.euraud]
spread = 0.0002
conversion_rate = 1.06
synthetic = {{ kind = "ornstein_uhlenbeck", theta = 0.05, sigma = 0.0004, mu = 1.33, y0 = 1.33, dt = 1.0 }}
"#
        );
        RunConfig::from_toml(&text).unwrap()
    }

    #[test]
    fn small_run_is_consistent_and_deterministic() {
        let a = backtest(&small_config(1)).unwrap();
        let b = backtest(&small_config(3)).unwrap();
        assert_eq!(a.statement, b.statement);
        assert_eq!(a.decisions_csv, b.decisions_csv);
        assert_eq!(a.equity_csv, b.equity_csv);

        let reparsed = crate::report::parse_statement(&a.statement).unwrap();
        assert_eq!(reparsed.records, a.parsed.records);
        assert_eq!(reparsed.open_trades.len(), a.parsed.open_trades.len());
        if let Some(stats) = &a.stats {
            let cfg = small_config(1);
            let (closed, floating) = resum(&reparsed, &cfg);
            assert!((stats.closed_pl - closed).abs() < 0.005);
            assert!((stats.floating_pl - floating).abs() < 0.005);
            assert!((stats.balance - round_cents(reparsed.deposit + closed)).abs() < 0.005);
            assert!((stats.equity - round_cents(stats.balance + floating)).abs() < 0.005);
        }
        for line in a.equity_csv.lines().skip(1) {
            for v in line.split(',').skip(1) {
                assert!(v.parse::<f64>().unwrap().is_finite());
            }
        }
    }

    #[test]
    fn mismatched_series_are_rejected() {
        let cfg = small_config(1);
        let mut base = load_market(&cfg).unwrap();
        base.pop();
        assert!(run_backtest(&cfg, base).is_err());
    }

    #[test]
    fn alignment_keeps_common_bars() {
        let cfg = small_config(1);
        let base = load_market(&cfg).unwrap();
        let ts: Vec<i64> = base[1]
            .bars()
            .iter()
            .map(|b| b.timestamp)
            .step_by(2)
            .collect();
        let thinned = vec![base[0].clone(), base[1].retain_timestamps(&ts)];
        let aligned = align(&thinned).unwrap();
        assert_eq!(aligned[0].len(), ts.len());
        assert_eq!(
            aligned[0].bars()[3].timestamp,
            aligned[1].bars()[3].timestamp
        );
    }
}
