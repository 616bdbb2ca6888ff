//! CSV writers for paths, ledgers and reports.
//!
//! Floats are written with Rust's shortest round-trip formatting, so equal
//! values always produce equal bytes.

use std::collections::HashSet;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::filter::DiagnosticRow;
use crate::market::PathState;
use crate::measure::MeasureState;
use crate::scenario::{MartingaleRow, ProbeRow};
use crate::wealth::{LedgerEvent, WealthLedger};

fn fmt(x: f64) -> String {
    format!("{x}")
}

/// `time, F_1.., R_1.., beta_1..`; the drift columns are left out when the
/// path has no latent part.
pub fn write_path_csv<W: Write>(out: W, path: &PathState) -> Result<()> {
    let d = path.dim();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["time".to_string()];
    header.extend((1..=d).map(|i| format!("F_{i}")));
    header.extend((1..=d).map(|i| format!("R_{i}")));
    if path.latent.is_some() {
        header.extend((1..=d).map(|i| format!("beta_{i}")));
    }
    w.write_record(&header)?;
    for n in 0..=path.n_steps() {
        let mut row = vec![fmt(path.times[n])];
        row.extend((0..d).map(|i| fmt(path.prices[(n, i)])));
        row.extend((0..d).map(|i| fmt(path.returns[(n, i)])));
        if let Some(l) = &path.latent {
            row.extend((0..d).map(|i| fmt(l.beta[(n, i)])));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per step and asset.
pub fn write_position_ledger<W: Write>(
    out: W,
    ledger: &WealthLedger,
    path: &PathState,
) -> Result<()> {
    let clipped: HashSet<(usize, usize)> = ledger
        .events
        .iter()
        .filter_map(|e| match *e {
            LedgerEvent::Clip { step, asset } => Some((step, asset)),
            _ => None,
        })
        .collect();
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "time",
        "asset",
        "price",
        "contract_price",
        "weight",
        "position",
        "trade",
        "cost_relative",
        "cost_cash",
        "clipped",
    ])?;
    let (n_steps, d) = ledger.p_hist.shape();
    for n in 0..n_steps {
        for i in 0..d {
            w.write_record([
                fmt(ledger.times[n]),
                (i + 1).to_string(),
                fmt(path.prices[(n, i)]),
                fmt(ledger.contract_prices[(n, i)]),
                fmt(ledger.pi_hist[(n, i)]),
                fmt(ledger.p_hist[(n, i)]),
                fmt(ledger.trades[(n, i)]),
                fmt(ledger.cost_hist[(n, i)]),
                fmt(ledger.cash_cost_hist[(n, i)]),
                clipped.contains(&(n, i)).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `time, wealth, discounted_wealth, H_wealth, realized_vol, weight_i, position_i`.
/// The weight and position columns hold the decision taken at that time and
/// are empty on the terminal row.
pub fn write_wealth_ledger<W: Write>(
    out: W,
    ledger: &WealthLedger,
    measure: Option<&MeasureState>,
) -> Result<()> {
    let n_points = ledger.x.len();
    if let Some(m) = measure {
        if m.h.len() != n_points {
            return Err(Error::shape("measure and ledger grids differ"));
        }
    }
    let d = ledger.pi_hist.ncols();
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["time", "wealth", "discounted_wealth", "H_wealth", "realized_vol"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=d).map(|i| format!("weight_{i}")));
    header.extend((1..=d).map(|i| format!("position_{i}")));
    w.write_record(&header)?;
    for n in 0..n_points {
        let x = ledger.x[n];
        let (gx, hx) = match measure {
            Some(m) => (fmt(m.gamma[n] * x), fmt(m.h[n] * x)),
            None => (String::new(), String::new()),
        };
        let mut row = vec![fmt(ledger.times[n]), fmt(x), gx, hx, fmt(ledger.realized_vol[n])];
        let step = n < ledger.n_steps();
        row.extend((0..d).map(|i| if step { fmt(ledger.pi_hist[(n, i)]) } else { String::new() }));
        row.extend((0..d).map(|i| if step { fmt(ledger.p_hist[(n, i)]) } else { String::new() }));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Any slice of flat serializable rows, with a header from the field names.
pub fn write_rows<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_diagnostics<W: Write>(out: W, rows: &[DiagnosticRow]) -> Result<()> {
    write_rows(out, rows)
}

pub fn write_martingale_report<W: Write>(out: W, rows: &[MartingaleRow]) -> Result<()> {
    write_rows(out, rows)
}

pub fn write_probe<W: Write>(out: W, rows: &[ProbeRow]) -> Result<()> {
    write_rows(out, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{simulate_path, MarketParams};
    use crate::policy::ConstantPolicy;
    use crate::wealth::{run_backtest, BacktestConfig};
    use nalgebra::DVector;

    #[test]
    fn path_csv_layout() {
        let p = MarketParams::single_asset(0.2, 0.05, 3, 0.5);
        let path = simulate_path(&p, 1).unwrap();
        let mut buf = Vec::new();
        write_path_csv(&mut buf, &path).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "time,F_1,R_1,beta_1");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("0,100,0,0.05"));
    }

    #[test]
    fn ledger_csvs() {
        let p = MarketParams::single_asset(0.2, 0.05, 4, 0.25);
        let path = simulate_path(&p, 2).unwrap();
        let mut pol = ConstantPolicy { weights: DVector::from_element(1, 1.0) };
        let l = run_backtest(&path, None, &mut pol, &p, &BacktestConfig::default(), 1e4).unwrap();
        let mut buf = Vec::new();
        write_position_ledger(&mut buf, &l, &path).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().nth(1).unwrap().ends_with(",false"));

        let mut buf = Vec::new();
        write_wealth_ledger(&mut buf, &l, None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "time,wealth,discounted_wealth,H_wealth,realized_vol,weight_1,position_1");
        assert!(text.lines().last().unwrap().ends_with(",,"));
    }

    #[test]
    fn report_rows_have_headers() {
        let rows = vec![DiagnosticRow {
            metric: "innovation_mean".into(),
            component: "1".into(),
            value: 0.5,
            stderr: 0.25,
        }];
        let mut buf = Vec::new();
        write_diagnostics(&mut buf, &rows).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "metric,component,value,stderr\ninnovation_mean,1,0.5,0.25\n"
        );
    }
}
