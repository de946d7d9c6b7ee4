//! CSV emission. Every file starts with a `# config_hash=<sha256>` line and a header row.

use std::path::Path;

use crate::error::{Error, Result};

pub const MISALIGNMENT_HEADER: [&str; 5] = ["format", "method", "layer", "test_nll", "layer_mse"];
pub const TRADEOFF_HEADER: [&str; 5] = ["model", "format", "method", "weight_bytes", "test_nll"];
pub const LANDSCAPE_HEADER: [&str; 8] = [
    "kind",
    "anchor_a",
    "anchor_b",
    "seed",
    "t_or_lambda",
    "distance",
    "train_nll",
    "val_nll",
];
pub const QAFT_TRACE_HEADER: [&str; 6] = ["format", "lr", "epoch", "train_nll", "val_nll", "test_nll"];
pub const QAFT_LR_HEADER: [&str; 5] = ["format", "lr", "best_val_nll", "best_epoch", "status"];
pub const GPTQ_DAMP_HEADER: [&str; 5] = ["format", "layer", "chosen_factor", "mse_rtn", "mse_gptq"];
pub const BASIN_HEADER: [&str; 7] = [
    "format",
    "method",
    "distance",
    "radius",
    "base_loss",
    "plateau_loss",
    "inside_basin",
];

/// Shortest representation that parses back to the same `f64`.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn write_csv<const N: usize>(
    path: &Path,
    config_hash: &str,
    header: &[&str; N],
    rows: &[Vec<String>],
) -> Result<()> {
    if let Some(bad) = rows.iter().find(|r| r.len() != N) {
        return Err(Error::contract(
            "write_csv",
            format!("row with {} fields for a {N}-column header: {bad:?}", bad.len()),
        ));
    }
    let mut buf = format!("# config_hash={config_hash}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a report back as `(config_hash, header, rows)`.
pub fn read_csv(path: &Path) -> Result<(String, Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
    let hash = first
        .strip_prefix("# config_hash=")
        .ok_or_else(|| Error::contract("read_csv", "missing config hash line"))?
        .to_string();
    let mut r = csv::Reader::from_reader(rest.as_bytes());
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|x| x.iter().map(String::from).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok((hash, header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_with_hash_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let rows = vec![vec![
            "int2".into(),
            "rtn".into(),
            "global".into(),
            num(1.25),
            String::new(),
        ]];
        write_csv(&p, "abc", &MISALIGNMENT_HEADER, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("# config_hash=abc\nformat,method,layer,test_nll,layer_mse\n"));
        let (h, header, back) = read_csv(&p).unwrap();
        assert_eq!(h, "abc");
        assert_eq!(header, MISALIGNMENT_HEADER);
        assert_eq!(back, rows);
    }

    #[test]
    fn ragged_rows_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![vec!["x".to_string()]];
        assert!(write_csv(&dir.path().join("r.csv"), "h", &TRADEOFF_HEADER, &rows).is_err());
    }

    #[test]
    fn numbers_roundtrip() {
        for v in [0.1, 1e-6, 5.549_f64.ln(), 123456.789] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
    }
}
