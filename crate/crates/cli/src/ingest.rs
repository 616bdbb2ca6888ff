//! Observed price series as paths without a latent part.

use std::path::Path;

use futopt_core::market::PathState;
use nalgebra::{DMatrix, DVector};

use crate::error::CliError;

/// Relative tolerance on the spacing of the time column.
const GRID_TOLERANCE: f64 = 1e-9;

/// Reads `time, price_1..price_d` and derives returns from `dF = F dR`.
/// Times must be strictly increasing and equidistant; prices positive.
/// Returns the path and the observed grid spacing.
pub fn ingest_prices(path: &Path, d: usize) -> Result<(PathState, f64), CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    ingest_reader(file, d)
}

pub fn ingest_reader<R: std::io::Read>(reader: R, d: usize) -> Result<(PathState, f64), CliError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| CliError::Data(e.to_string()))?.clone();
    if headers.len() != d + 1 {
        return Err(CliError::Data(format!(
            "expected {} columns (time and {d} prices), found {}",
            d + 1,
            headers.len()
        )));
    }
    let mut times = Vec::new();
    let mut prices = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        // header is row 1
        let row = k + 2;
        let rec = rec.map_err(|e| CliError::Data(format!("row {row}: {e}")))?;
        let parse = |j: usize| -> Result<f64, CliError> {
            rec.get(j)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| CliError::Data(format!("row {row}: column {} is not a number", j + 1)))
        };
        times.push(parse(0)?);
        for j in 1..=d {
            let p = parse(j)?;
            if !(p > 0.0 && p.is_finite()) {
                return Err(CliError::Data(format!("row {row}: price {p} in column {} is not positive", j + 1)));
            }
            prices.push(p);
        }
    }
    if times.len() < 2 {
        return Err(CliError::Data("need at least two rows".into()));
    }
    let dt = times[1] - times[0];
    if !(dt > 0.0) {
        return Err(CliError::Data("row 3: times must be strictly increasing".into()));
    }
    for k in 1..times.len() {
        let step = times[k] - times[k - 1];
        if !(step > 0.0) {
            return Err(CliError::Data(format!("row {}: times must be strictly increasing", k + 2)));
        }
        if (step - dt).abs() > GRID_TOLERANCE * dt.max(times[k].abs()) {
            return Err(CliError::Data(format!(
                "row {}: time step {step} differs from {dt}; the grid must be equidistant",
                k + 2
            )));
        }
    }
    let n = times.len();
    let state = PathState::from_prices(
        DVector::from_vec(times),
        DMatrix::from_row_slice(n, d, &prices),
    )?;
    Ok((state, dt))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(text: &str, d: usize) -> Result<(PathState, f64), CliError> {
        ingest_reader(text.as_bytes(), d)
    }

    #[test]
    fn constant_prices_have_zero_returns() {
        let (p, dt) = read("time,price_1\n0,50\n1,50\n2,50\n", 1).unwrap();
        assert_eq!(dt, 1.0);
        assert!(p.returns.iter().all(|&r| r == 0.0));
        assert!(p.latent.is_none());
    }

    #[test]
    fn two_rows() {
        let (p, _) = read("time,price_1\n0,100\n0.5,101\n", 1).unwrap();
        assert!((p.delta_r(0)[0] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_input() {
        let err = read("time,price_1\n0,100\n1,101\n2.5,99\n", 1).unwrap_err().to_string();
        assert!(err.contains("equidistant"), "{err}");
        let err = read("time,price_1\n0,100\n1,-3\n", 1).unwrap_err().to_string();
        assert!(err.contains("row 3"), "{err}");
        assert!(read("time,price_1,price_2\n0,1,2\n1,1,2\n", 1).is_err());
    }
}
