use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentSpec;
use crate::error::{Error, Result};
use crate::model::{InjectionMode, ParamCounts, SpeakerId, Strategy};
use crate::synthgen::GenConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeenMetrics {
    pub train_rmse: f64,
    pub valid_rmse: f64,
    pub test_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptMetrics {
    /// Adaptation frames per unseen speaker.
    pub size: usize,
    pub valid_rmse: f64,
    pub test_rmse: f64,
    pub per_speaker_test_rmse: BTreeMap<SpeakerId, f64>,
}

/// One (strategy, injection mode, code size, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub strategy: Strategy,
    pub mode: InjectionMode,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ParamCounts>,
    #[serde(default)]
    pub epochs_run: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seen: Option<SeenMetrics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub adapted: Vec<AdaptMetrics>,
    /// Wall time; kept out of the serialized report so reruns are byte-identical.
    #[serde(skip)]
    pub train_seconds: f64,
    #[serde(skip)]
    pub adapt_seconds: f64,
}

impl CellResult {
    pub fn failed(strategy: Strategy, mode: InjectionMode, seed: u64, reason: String) -> Self {
        CellResult {
            strategy,
            mode,
            seed,
            failure: Some(reason),
            params: None,
            epochs_run: 0,
            seen: None,
            adapted: Vec::new(),
            train_seconds: 0.0,
            adapt_seconds: 0.0,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.failure.is_none()
    }

    pub fn adapted_at(&self, size: usize) -> Option<&AdaptMetrics> {
        self.adapted.iter().find(|a| a.size == size)
    }

    /// Strategy label including its sizes, e.g. `affine(p=8,q=8)`.
    pub fn label(&self) -> String {
        strategy_label(&self.strategy)
    }
}

pub fn strategy_label(s: &Strategy) -> String {
    match (s.scale_len(), s.bias_len(), s) {
        (_, _, Strategy::Bottle { p, q, n }) => format!("bottle(p={p},q={q},n={n})"),
        (Some(p), Some(q), _) => format!("{}(p={p},q={q})", s.name()),
        (Some(p), None, _) => format!("{}(p={p})", s.name()),
        (None, Some(q), _) => format!("{}(q={q})", s.name()),
        (None, None, _) => s.name().to_string(),
    }
}

/// Structured result of one harness command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub command: String,
    pub dataset_sha256: String,
    pub dataset: GenConfig,
    pub oracle_rmse_floor: f64,
    pub spec: ExperimentSpec,
    pub cells: Vec<CellResult>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::parse("<report>", e))
    }

    pub fn adapt_sizes(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = self.cells.iter().flat_map(|c| c.adapted.iter().map(|a| a.size)).collect();
        sizes.sort_unstable();
        sizes.dedup();
        sizes
    }

    /// Median of `metric` over successful cells matching `filter`.
    pub fn median(&self, filter: impl Fn(&CellResult) -> bool, metric: impl Fn(&CellResult) -> Option<f64>) -> Option<f64> {
        median(self.cells.iter().filter(|c| c.is_ok() && filter(c)).filter_map(metric).collect())
    }

    fn rows(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let sizes = self.adapt_sizes();
        let mut header: Vec<String> = [
            "strategy", "mode", "seed", "shared", "adapters", "per_speaker", "epochs", "train_rmse", "valid_rmse",
            "test_rmse",
        ]
        .map(String::from)
        .to_vec();
        header.extend(sizes.iter().map(|s| format!("adapt{s}_test_rmse")));
        header.push("failure".into());
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        let rows = self
            .cells
            .iter()
            .map(|c| {
                let count = |f: fn(&ParamCounts) -> usize| c.params.as_ref().map(|p| f(p).to_string()).unwrap_or_default();
                let mut row = vec![
                    c.label(),
                    c.mode.to_string(),
                    c.seed.to_string(),
                    count(|p| p.shared),
                    count(|p| p.adapters),
                    count(|p| p.per_speaker),
                    c.epochs_run.to_string(),
                    fmt(c.seen.as_ref().map(|s| s.train_rmse)),
                    fmt(c.seen.as_ref().map(|s| s.valid_rmse)),
                    fmt(c.seen.as_ref().map(|s| s.test_rmse)),
                ];
                row.extend(sizes.iter().map(|&s| fmt(c.adapted_at(s).map(|a| a.test_rmse))));
                row.push(c.failure.clone().unwrap_or_default());
                row
            })
            .collect();
        (header, rows)
    }

    /// Flat one-row-per-cell summary.
    pub fn to_csv(&self) -> Result<String> {
        let (header, rows) = self.rows();
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::parse("<report csv>", e);
        w.write_record(&header).map_err(err)?;
        for r in rows {
            w.write_record(&r).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::parse("<report csv>", e))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Aligned plain-text table of the same rows as the CSV.
    pub fn to_table(&self) -> String {
        let (header, rows) = self.rows();
        let keep: Vec<usize> = (0..header.len())
            .filter(|&i| header[i] != "failure" || rows.iter().any(|r| !r[i].is_empty()))
            .collect();
        let widths: Vec<usize> = keep
            .iter()
            .map(|&i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
            .collect();
        let line = |cells: &[String]| {
            keep.iter()
                .zip(&widths)
                .map(|(&i, &w)| format!("{:<w$}", cells[i]))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = format!("{} (dataset {})\n", self.command, &self.dataset_sha256[..12.min(self.dataset_sha256.len())]);
        out.push_str(&line(&header));
        out.push('\n');
        for r in &rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }

    pub fn timings_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::parse("<timings csv>", e);
        w.write_record(["strategy", "mode", "seed", "train_seconds", "adapt_seconds"]).map_err(err)?;
        for c in &self.cells {
            w.write_record([
                c.label(),
                c.mode.to_string(),
                c.seed.to_string(),
                format!("{:.3}", c.train_seconds),
                format!("{:.3}", c.adapt_seconds),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::parse("<timings csv>", e))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Writes `contents` under `dir` as `<stem>.<n>.<ext>` for the smallest `n`
/// where none of the extensions exist yet. Existing files are never touched.
pub fn write_numbered(dir: &Path, stem: &str, contents: &[(&str, String)]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut n = 1;
    loop {
        let paths: Vec<PathBuf> = contents.iter().map(|(ext, _)| dir.join(format!("{stem}.{n}.{ext}"))).collect();
        if paths.iter().all(|p| !p.exists()) {
            for (path, (_, body)) in paths.iter().zip(contents) {
                let mut f = OpenOptions::new()
                    .write(true)
                    .create_new(true)
                    .open(path)
                    .map_err(|e| match e.kind() {
                        std::io::ErrorKind::AlreadyExists => Error::WouldOverwrite(path.clone()),
                        _ => Error::io(path, e),
                    })?;
                f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))?;
            }
            return Ok(paths);
        }
        n += 1;
    }
}

/// Writes the report as JSON, CSV, text table and a separate timings CSV.
pub fn write_report(dir: &Path, report: &MetricsReport) -> Result<Vec<PathBuf>> {
    write_numbered(
        dir,
        &report.command,
        &[
            ("json", report.to_json()?),
            ("csv", report.to_csv()?),
            ("txt", report.to_table()),
            ("timings.csv", report.timings_csv()?),
        ],
    )
}

pub fn median(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    })
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of tie-averaged ranks).
/// `None` when fewer than two points or either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_examples() {
        assert_eq!(median(vec![]), None);
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[9.0, 7.0, 5.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 4.0, 9.0, 16.0]), Some(1.0));
        // One adjacent swap among four points: 1 - 6·2 / (4·15) = 0.8.
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 4.0, 3.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
        // Ties: ranks of [1, 2, 2, 3] are [1, 2.5, 2.5, 4].
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 2.0, 3.0]).unwrap();
        let expected = 4.5 / (5.0f64 * 4.5).sqrt();
        assert!((r - expected).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0], &[3.0, 3.0]), None);
        assert_eq!(spearman(&[1.0], &[1.0]), None);
    }

    #[test]
    fn numbered_writes_never_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_numbered(dir.path(), "compare", &[("json", "a".into()), ("csv", "a".into())]).unwrap();
        let b = write_numbered(dir.path(), "compare", &[("json", "b".into()), ("csv", "b".into())]).unwrap();
        assert_eq!(a[0].file_name().unwrap(), "compare.1.json");
        assert_eq!(b[0].file_name().unwrap(), "compare.2.json");
        assert_eq!(std::fs::read_to_string(&a[0]).unwrap(), "a");
        // A stray file with the next number pushes the index further.
        std::fs::write(dir.path().join("compare.3.csv"), "x").unwrap();
        let c = write_numbered(dir.path(), "compare", &[("json", "c".into()), ("csv", "c".into())]).unwrap();
        assert_eq!(c[0].file_name().unwrap(), "compare.4.json");
        assert_eq!(std::fs::read_to_string(dir.path().join("compare.3.csv")).unwrap(), "x");
    }

    #[test]
    fn labels_include_sizes() {
        assert_eq!(strategy_label(&Strategy::Affine { p: 8, q: 4 }), "affine(p=8,q=4)");
        assert_eq!(strategy_label(&Strategy::Bias { q: 16 }), "bias(q=16)");
        assert_eq!(strategy_label(&Strategy::Bottle { p: 1, q: 2, n: 3 }), "bottle(p=1,q=2,n=3)");
        assert_eq!(strategy_label(&Strategy::Lhuc), "lhuc");
    }
}
