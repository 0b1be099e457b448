use std::path::Path;

use crate::CliError;

/// 17 significant digits; empty for missing values.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn opt_int(v: Option<usize>) -> String {
    v.map(|k| k.to_string()).unwrap_or_default()
}

pub fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// `2^-k`, `2^k` or a decimal.
pub fn parse_h(s: &str) -> Result<f64, CliError> {
    let s = s.trim();
    let v = match s.strip_prefix("2^") {
        Some(e) => e.parse::<i32>().map(|e| 2f64.powi(e)).map_err(|_| CliError::Usage(format!("bad mesh width `{s}`")))?,
        None => s.parse::<f64>().map_err(|_| CliError::Usage(format!("bad mesh width `{s}`")))?,
    };
    if !(v > 0.0 && v < 1.0) {
        return Err(CliError::Usage(format!("mesh width `{s}` must lie in (0, 1)")));
    }
    Ok(v)
}

pub fn parse_h_list(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',').filter(|t| !t.trim().is_empty()).map(parse_h).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, 1.0 / 3.0, 6.02e23, -1e-300, std::f64::consts::PI] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(opt(None), "");
    }

    #[test]
    fn mesh_widths() {
        assert_eq!(parse_h("2^-8").unwrap(), 1.0 / 256.0);
        assert_eq!(parse_h_list("0.1, 2^-2").unwrap(), vec![0.1, 0.25]);
        assert!(parse_h("2").is_err());
        assert!(parse_h("x").is_err());
    }
}
