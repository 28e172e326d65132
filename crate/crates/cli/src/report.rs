//! CSV artifact formats. Every report uses '.' decimals, LF line endings,
//! UTF-8, and fixed-width float formatting ({:.6}, p-values {:.6e}) so two
//! identical runs produce byte-identical files.

use std::path::Path;

use anyhow::{bail, Context, Result};
use cfbase_core::io::write_atomic;
use cfbase_core::metrics::{AggregateCell, MetricRow};

pub fn fmt_value(v: f64) -> String {
    format!("{v:.6}")
}

pub fn fmt_p(p: f64) -> String {
    format!("{p:.6e}")
}

/// Writes header + rows with LF endings and a trailing newline, atomically.
pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(rows.len() * 64 + header.len() + 1);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Reads a CSV written by [`write_csv`]: no quoting, no embedded commas.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<String> = match lines.next() {
        Some(h) => h.split(',').map(str::to_string).collect(),
        None => bail!("{} is empty", path.display()),
    };
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<String> = line.split(',').map(str::to_string).collect();
        if fields.len() != header.len() {
            bail!(
                "{} row {}: {} fields, header has {}",
                path.display(),
                i + 2,
                fields.len(),
                header.len()
            );
        }
        rows.push(fields);
    }
    Ok((header, rows))
}

/// Column layout of per_sample.csv for a given imputer list.
pub fn per_sample_header(imputers: &[String]) -> String {
    let mut cols = vec![
        "sample_id".to_string(),
        "baseline".to_string(),
        "roc_auc".to_string(),
        "fpar".to_string(),
        "spread".to_string(),
    ];
    for protocol in ["topk", "masscenter"] {
        for imputer in imputers {
            cols.push(format!("auc_{protocol}_{imputer}"));
        }
    }
    cols.join(",")
}

/// Parses per_sample.csv back into metric rows for aggregation.
pub fn rows_from_per_sample(path: &Path) -> Result<Vec<MetricRow>> {
    let (header, rows) = read_csv(path)?;
    if header.len() < 3 || header[0] != "sample_id" || header[1] != "baseline" {
        bail!("{} does not look like a per-sample report", path.display());
    }
    let mut out = Vec::with_capacity(rows.len());
    for fields in rows {
        let sample_id: usize = fields[0]
            .parse()
            .with_context(|| format!("bad sample_id {:?}", fields[0]))?;
        let mut values = Vec::with_capacity(header.len() - 2);
        for (name, raw) in header.iter().zip(&fields).skip(2) {
            let v: f64 = raw.parse().with_context(|| format!("bad {name} value {raw:?}"))?;
            values.push((name.clone(), v));
        }
        out.push(MetricRow { sample_id, baseline: fields[1].clone(), values });
    }
    Ok(out)
}

pub fn write_aggregate_csv(path: &Path, cells: &[AggregateCell]) -> Result<()> {
    let rows: Vec<String> = cells
        .iter()
        .map(|c| {
            format!(
                "{},{},{},{},{},{},{}",
                c.metric,
                c.baseline,
                fmt_value(c.mean),
                fmt_value(c.sem),
                c.n,
                c.p_vs_best.map(fmt_p).unwrap_or_default(),
                c.test.unwrap_or("")
            )
        })
        .collect();
    write_csv(path, "metric,baseline,mean,sem,n,p_vs_best,test", &rows)
}

/// Averages per-sample curve points into the aggregate curves report.
/// Output keeps the order in which (baseline, imputer, protocol, x) groups
/// first appear, which is sample-independent because every sample emits the
/// same grid in the same order.
pub fn write_mean_curves(per_sample_curves: &Path, out: &Path) -> Result<()> {
    let (header, rows) = read_csv(per_sample_curves)?;
    let expected = ["sample_id", "baseline", "protocol", "imputer", "x", "confidence"];
    if header != expected {
        bail!("{} has unexpected columns {header:?}", per_sample_curves.display());
    }
    let mut order: Vec<(String, String, String, String)> = Vec::new();
    let mut sums: std::collections::HashMap<(String, String, String, String), (f64, usize)> =
        std::collections::HashMap::new();
    for fields in rows {
        let key = (
            fields[1].clone(), // baseline
            fields[3].clone(), // imputer
            fields[2].clone(), // protocol
            fields[4].clone(), // x, kept as emitted text
        );
        let confidence: f64 = fields[5].parse().context("bad confidence value")?;
        let entry = sums.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (0.0, 0)
        });
        entry.0 += confidence;
        entry.1 += 1;
    }
    let out_rows: Vec<String> = order
        .iter()
        .map(|key| {
            let (sum, n) = sums[key];
            format!(
                "{},{},{},{},{}",
                key.0,
                key.1,
                key.2,
                key.3,
                fmt_value(sum / n as f64)
            )
        })
        .collect();
    write_csv(out, "baseline,imputer,protocol,fraction,mean_confidence", &out_rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip_preserves_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_csv(&path, "a,b", &["1,x".into(), "2,y".into()]).unwrap();
        let (header, rows) = read_csv(&path).unwrap();
        assert_eq!(header, ["a", "b"]);
        assert_eq!(rows, vec![vec!["1", "x"], vec!["2", "y"]]);
        let bytes = std::fs::read(&path).unwrap();
        assert!(!bytes.contains(&b'\r'), "LF endings only");
        assert_eq!(bytes.last(), Some(&b'\n'));
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "a,b\n1\n").unwrap();
        assert!(read_csv(&path).is_err());
    }

    #[test]
    fn per_sample_roundtrip_feeds_aggregation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("per_sample.csv");
        let imputers = vec!["mean".to_string()];
        write_csv(
            &path,
            &per_sample_header(&imputers),
            &[
                format!("0,cf,{},{},{},{},{}", 0.9, 0.2, 1.5, 3.0, 4.0),
                format!("0,zeros,{},{},{},{},{}", 0.5, 0.8, 2.5, 5.0, 6.0),
            ],
        )
        .unwrap();
        let rows = rows_from_per_sample(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].baseline, "cf");
        assert_eq!(rows[0].values[0], ("roc_auc".to_string(), 0.9));
        assert_eq!(rows[1].values[4], ("auc_masscenter_mean".to_string(), 6.0));
    }

    #[test]
    fn mean_curves_average_over_samples() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("curves_per_sample.csv");
        write_csv(
            &src,
            "sample_id,baseline,protocol,imputer,x,confidence",
            &[
                "0,cf,topk,mean,0.000000,1.000000".into(),
                "0,cf,topk,mean,0.100000,0.400000".into(),
                "1,cf,topk,mean,0.000000,0.500000".into(),
                "1,cf,topk,mean,0.100000,0.200000".into(),
            ],
        )
        .unwrap();
        let out = dir.path().join("curves.csv");
        write_mean_curves(&src, &out).unwrap();
        let (_, rows) = read_csv(&out).unwrap();
        assert_eq!(rows[0], vec!["cf", "mean", "topk", "0.000000", "0.750000"]);
        assert_eq!(rows[1], vec!["cf", "mean", "topk", "0.100000", "0.300000"]);
    }
}
