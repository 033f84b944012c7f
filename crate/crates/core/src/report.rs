//! Result tables on disk: `results.csv`, the per-sweep seed summary, and SVG charts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::SweepAxis;
use crate::error::{Error, Result};
use crate::harness::{check_rows_nonempty, results_to_csv_string, ResultRow, Split, ARM_BASELINE, ARM_SIO, RESULTS_HEADER};
use crate::scoring::ScoreMethod;

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub arm: &'static str,
    pub scorer: ScoreMethod,
    pub split: Split,
    pub n_seeds: usize,
    pub auroc_mean: f64,
    pub auroc_std: f64,
    pub fpr95_mean: f64,
    pub fpr95_std: f64,
    pub id_acc_mean: f64,
    pub id_acc_std: f64,
    pub frechet_mean: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

type GroupKey = (u64, &'static str, ScoreMethod, Split);

/// Seed-aggregated view of the table, grouped by (value, arm, scorer, split).
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<GroupKey, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        // Order-preserving key for nonnegative sweep values.
        groups.entry((r.value.to_bits(), r.arm, r.scorer, r.split)).or_default().push(r);
    }
    let mut out: Vec<SummaryRow> = groups
        .into_values()
        .map(|g| {
            let col = |f: fn(&ResultRow) -> f64| g.iter().map(|r| f(r)).collect::<Vec<_>>();
            let (auroc_mean, auroc_std) = mean_std(&col(|r| r.auroc));
            let (fpr95_mean, fpr95_std) = mean_std(&col(|r| r.fpr95));
            let (id_acc_mean, id_acc_std) = mean_std(&col(|r| r.id_acc));
            let (frechet_mean, _) = mean_std(&col(|r| r.frechet));
            SummaryRow {
                axis: g[0].axis,
                value: g[0].value,
                arm: g[0].arm,
                scorer: g[0].scorer,
                split: g[0].split,
                n_seeds: g.len(),
                auroc_mean,
                auroc_std,
                fpr95_mean,
                fpr95_std,
                id_acc_mean,
                id_acc_std,
                frechet_mean,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        a.value
            .total_cmp(&b.value)
            .then(a.arm.cmp(b.arm))
            .then(a.scorer.cmp(&b.scorer))
            .then(a.split.cmp(&b.split))
    });
    out
}

pub fn summary_to_csv_string(rows: &[SummaryRow]) -> String {
    let mut out = String::from("axis,value,arm,scorer,split,n_seeds,auroc_mean,auroc_std,fpr95_mean,fpr95_std,id_acc_mean,id_acc_std,frechet_mean\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.axis.tag(),
            r.value,
            r.arm,
            r.scorer,
            r.split.tag(),
            r.n_seeds,
            r.auroc_mean,
            r.auroc_std,
            r.fpr95_mean,
            r.fpr95_std,
            r.id_acc_mean,
            r.id_acc_std,
            r.frechet_mean
        );
    }
    out
}

pub fn parse_results(text: &str, origin: &Path) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == RESULTS_HEADER => {}
        _ => return Err(Error::parse(origin, 1, format!("expected header `{RESULTS_HEADER}`"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let ln = i + 1;
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != 11 {
            return Err(Error::parse(origin, ln, format!("expected 11 cells, found {}", c.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::parse(origin, ln, format!("bad number `{s}`")));
        let arm = match c[3] {
            ARM_BASELINE => ARM_BASELINE,
            ARM_SIO => ARM_SIO,
            other => return Err(Error::parse(origin, ln, format!("unknown arm `{other}`"))),
        };
        let split = match c[5] {
            "near" => Split::Near,
            "far" => Split::Far,
            other => return Err(Error::parse(origin, ln, format!("unknown split `{other}`"))),
        };
        rows.push(ResultRow {
            axis: c[0].parse().map_err(|e: Error| Error::parse(origin, ln, e.to_string()))?,
            value: num(c[1])?,
            seed: c[2].parse().map_err(|_| Error::parse(origin, ln, "bad seed"))?,
            arm,
            scorer: c[4].parse().map_err(|e: Error| Error::parse(origin, ln, e.to_string()))?,
            split,
            auroc: num(c[6])?,
            fpr95: num(c[7])?,
            id_acc: num(c[8])?,
            frechet: num(c[9])?,
            steps: c[10].parse().map_err(|_| Error::parse(origin, ln, "bad step count"))?,
        });
    }
    Ok(rows)
}

pub fn load_results(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_results(&text, path)
}

const PALETTE: [&str; 11] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#393b79",
];

const W: f64 = 640.0;
const H: f64 = 420.0;
const PAD: f64 = 60.0;

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Frame {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
            if lo == hi {
                (lo - 0.5, hi + 0.5)
            } else {
                let m = 0.05 * (hi - lo);
                (lo - m, hi + m)
            }
        };
        Frame { x: span(&mut xs.clone()), y: span(&mut ys.clone()) }
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * PAD)
    }

    fn axes(&self, out: &mut String, title: &str, xlabel: &str, ylabel: &str) {
        let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
        let _ = writeln!(out, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{title}</text>"#, W / 2.0);
        let _ = writeln!(out, r#"<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - PAD, W - PAD, H - PAD);
        let _ = writeln!(out, r#"<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>"#, H - PAD);
        for (v, anchor) in [(self.x.0, "start"), (self.x.1, "end")] {
            let _ = writeln!(out, r#"<text x="{:.2}" y="{}" text-anchor="{anchor}" font-size="11">{v:.3}</text>"#, self.px(v), H - PAD + 16.0);
        }
        for v in [self.y.0, self.y.1] {
            let _ = writeln!(out, r#"<text x="{}" y="{:.2}" text-anchor="end" font-size="11">{v:.3}</text>"#, PAD - 6.0, self.py(v) + 4.0);
        }
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{xlabel}</text>"#, W / 2.0, H - 18.0);
        let _ = writeln!(
            out,
            r#"<text x="18" y="{}" text-anchor="middle" font-size="13" transform="rotate(-90 18 {})">{ylabel}</text>"#,
            H / 2.0,
            H / 2.0
        );
    }
}

/// Seed-mean near-OOD AUROC of the SIO arm versus the sweep value, one
/// polyline per scorer; the baseline level of each scorer is a dashed line.
pub fn sweep_chart(summary: &[SummaryRow], axis: SweepAxis) -> String {
    let sio: Vec<&SummaryRow> = summary.iter().filter(|r| r.arm == ARM_SIO && r.split == Split::Near).collect();
    let base: Vec<&SummaryRow> = summary.iter().filter(|r| r.arm == ARM_BASELINE && r.split == Split::Near).collect();
    let mut out = String::new();
    let frame = Frame::new(
        sio.iter().map(|r| r.value),
        sio.iter().chain(&base).map(|r| r.auroc_mean),
    );
    frame.axes(&mut out, &format!("near-OOD AUROC vs {}", axis.tag()), axis.tag(), "mean AUROC");
    let mut scorers: Vec<ScoreMethod> = sio.iter().map(|r| r.scorer).collect();
    scorers.sort();
    scorers.dedup();
    for (i, s) in scorers.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = sio
            .iter()
            .filter(|r| r.scorer == *s)
            .map(|r| format!("{:.2},{:.2}", frame.px(r.value), frame.py(r.auroc_mean)))
            .collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"><title>{s}</title></polyline>"#, pts.join(" "));
        if let Some(b) = base.iter().find(|r| r.scorer == *s) {
            let y = frame.py(b.auroc_mean);
            let _ = writeln!(
                out,
                r#"<line x1="{PAD}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="{color}" stroke-dasharray="4 3"/>"#,
                W - PAD
            );
        }
        let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="11" fill="{color}">{s}</text>"#, W - PAD + 4.0, PAD + 14.0 * i as f64);
    }
    out.push_str("</svg>\n");
    out
}

/// ID accuracy against near-OOD AUROC (scorer-averaged), one point per
/// (value, seed, arm).
pub fn scatter_chart(rows: &[ResultRow]) -> String {
    let mut pts: BTreeMap<(u64, u64, &'static str), (f64, f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.split == Split::Near) {
        let e = pts.entry((r.value.to_bits(), r.seed, r.arm)).or_insert((r.id_acc, 0.0, 0));
        e.1 += r.auroc;
        e.2 += 1;
    }
    let pts: Vec<(&'static str, f64, f64)> = pts.into_iter().map(|((_, _, arm), (acc, s, n))| (arm, acc, s / n as f64)).collect();
    let mut out = String::new();
    let frame = Frame::new(pts.iter().map(|p| p.1), pts.iter().map(|p| p.2));
    frame.axes(&mut out, "ID accuracy vs near-OOD AUROC", "ID accuracy", "mean near-OOD AUROC");
    for (arm, acc, au) in &pts {
        let color = if *arm == ARM_SIO { "#1f77b4" } else { "#d62728" };
        let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{color}"/>"#, frame.px(*acc), frame.py(*au));
    }
    out.push_str("</svg>\n");
    out
}

/// Write results.csv, summary.csv and the charts into `dir`; returns the paths written.
pub fn write_report(rows: &[ResultRow], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    check_rows_nonempty(rows)?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let summary = summarize(rows);
    let axis = rows[0].axis;
    let mut files = vec![
        (dir.join("results.csv"), results_to_csv_string(rows)),
        (dir.join(format!("summary_{}.csv", axis.tag())), summary_to_csv_string(&summary)),
        (dir.join("scatter_acc_auroc.svg"), scatter_chart(rows)),
    ];
    if axis != SweepAxis::None {
        files.push((dir.join(format!("sweep_{}.svg", axis.tag())), sweep_chart(&summary, axis)));
    }
    for (path, text) in &files {
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(value: f64, seed: u64, arm: &'static str, scorer: ScoreMethod, auroc: f64) -> ResultRow {
        ResultRow {
            axis: SweepAxis::Alpha,
            value,
            seed,
            arm,
            scorer,
            split: Split::Near,
            auroc,
            fpr95: 0.5,
            id_acc: 0.9,
            frechet: 0.1,
            steps: 10,
        }
    }

    #[test]
    fn single_row_summary() {
        let s = summarize(&[row(0.5, 1, ARM_SIO, ScoreMethod::Msp, 0.8)]);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].auroc_mean, 0.8);
        assert_eq!(s[0].auroc_std, 0.0);
        assert_eq!(s[0].n_seeds, 1);
    }

    #[test]
    fn summary_mean_is_arithmetic_mean() {
        let rows: Vec<_> = [0.6, 0.7, 0.95].iter().enumerate().map(|(i, &a)| row(0.5, i as u64, ARM_SIO, ScoreMethod::Mls, a)).collect();
        let s = summarize(&rows);
        assert!((s[0].auroc_mean - (0.6 + 0.7 + 0.95) / 3.0).abs() < 1e-15);
        let (_, sd) = mean_std(&[0.6, 0.7, 0.95]);
        assert_eq!(s[0].auroc_std, sd);
    }

    #[test]
    fn results_csv_round_trip() {
        let rows = vec![row(0.2, 1, ARM_BASELINE, ScoreMethod::Knn, 0.75), row(0.2, 1, ARM_SIO, ScoreMethod::Knn, 0.8125)];
        let text = results_to_csv_string(&rows);
        assert_eq!(parse_results(&text, Path::new("mem")).unwrap(), rows);
        assert!(parse_results("bad\n", Path::new("mem")).is_err());
    }

    #[test]
    fn empty_table_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_report(&[], dir.path()).is_err());
    }
}
