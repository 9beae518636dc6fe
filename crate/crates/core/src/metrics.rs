//! Run length, pixel-level precision/recall/F1, and per-(method, size) aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Frames from onset to the first alarm at or after onset.
pub fn run_length(alarm_frame: Option<usize>, onset: usize) -> Option<usize> {
    alarm_frame.map(|a| a.saturating_sub(onset))
}

/// Precision, recall and F1 of `detected` against `truth`, both sets of pixel indices.
///
/// Empty detections score precision 1 only when the truth is also empty; an empty truth
/// has recall 1. F1 is 0 when precision and recall are both 0.
pub fn precision_recall_f1(detected: &[usize], truth: &[usize]) -> (f64, f64, f64) {
    let mut d = detected.to_vec();
    d.sort_unstable();
    d.dedup();
    let mut t = truth.to_vec();
    t.sort_unstable();
    t.dedup();
    let hits = d.iter().filter(|i| t.binary_search(i).is_ok()).count() as f64;
    let p = match (d.is_empty(), t.is_empty()) {
        (true, true) => 1.0,
        (true, false) => 0.0,
        _ => hits / d.len() as f64,
    };
    let r = if t.is_empty() {
        1.0
    } else {
        hits / t.len() as f64
    };
    let f1 = if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    };
    (p, r, f1)
}

/// Outcome of one monitored replication.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub method: String,
    pub replication: String,
    pub size: usize,
    /// `None` when no alarm occurred at or after onset.
    pub run_length: Option<usize>,
    /// Alarms raised before onset.
    pub false_alarms: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RunResult {
    /// Scores a run from its first post-onset alarm and detected pixel set (empty when
    /// censored).
    #[allow(clippy::too_many_arguments)]
    pub fn score(
        method: impl Into<String>,
        replication: impl Into<String>,
        size: usize,
        onset: usize,
        alarm_frame: Option<usize>,
        false_alarms: usize,
        detected: &[usize],
        truth: &[usize],
    ) -> Self {
        let (precision, recall, f1) = precision_recall_f1(detected, truth);
        RunResult {
            method: method.into(),
            replication: replication.into(),
            size,
            run_length: run_length(alarm_frame, onset),
            false_alarms,
            precision,
            recall,
            f1,
        }
    }
}

/// Mean and sample standard deviation; `sd` is 0 for a single value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Summary {
            mean,
            sd,
            count: values.len(),
        })
    }
}

/// One row of the report: a method at a hot-spot size.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub size: usize,
    pub runs: usize,
    /// Over uncensored runs only; `None` if every run was censored.
    pub run_length: Option<Summary>,
    pub censored: usize,
    pub false_alarms: usize,
    pub precision: Summary,
    pub recall: Summary,
    pub f1: Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

pub const REPORT_FOOTER: &str =
    "sd is the sample (n-1) standard deviation; RL statistics exclude censored runs, counted separately.";

/// Groups by (method, size), sorted by method then size. Input order does not matter
/// beyond floating-point summation order, which is fixed by sorting each group.
pub fn aggregate(results: &[RunResult]) -> Result<Report> {
    if results.is_empty() {
        return Err(Error::NoData("no run results to aggregate".into()));
    }
    let mut groups: BTreeMap<(&str, usize), Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        groups
            .entry((r.method.as_str(), r.size))
            .or_default()
            .push(r);
    }
    let sorted = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v
    };
    let rows = groups
        .into_iter()
        .map(|((method, size), runs)| {
            let rl = sorted(
                runs.iter()
                    .filter_map(|r| r.run_length)
                    .map(|v| v as f64)
                    .collect(),
            );
            let of = |f: fn(&RunResult) -> f64| {
                Summary::of(&sorted(runs.iter().map(|r| f(r)).collect()))
                    .expect("groups are non-empty")
            };
            ReportRow {
                method: method.to_string(),
                size,
                runs: runs.len(),
                run_length: Summary::of(&rl),
                censored: runs.len() - rl.len(),
                false_alarms: runs.iter().map(|r| r.false_alarms).sum(),
                precision: of(|r| r.precision),
                recall: of(|r| r.recall),
                f1: of(|r| r.f1),
            }
        })
        .collect();
    Ok(Report { rows })
}

impl Report {
    pub fn row(&self, method: &str, size: usize) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.size == size)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "method",
            "size",
            "runs",
            "rl_mean",
            "rl_sd",
            "censored",
            "false_alarms",
            "precision_mean",
            "precision_sd",
            "recall_mean",
            "recall_sd",
            "f1_mean",
            "f1_sd",
        ])?;
        for r in &self.rows {
            let (rm, rs) = r.run_length.map_or((String::new(), String::new()), |s| {
                (s.mean.to_string(), s.sd.to_string())
            });
            w.write_record([
                r.method.clone(),
                r.size.to_string(),
                r.runs.to_string(),
                rm,
                rs,
                r.censored.to_string(),
                r.false_alarms.to_string(),
                r.precision.mean.to_string(),
                r.precision.sd.to_string(),
                r.recall.mean.to_string(),
                r.recall.sd.to_string(),
                r.f1.mean.to_string(),
                r.f1.sd.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Aligned table with sd in parentheses, followed by the footer note.
    pub fn to_text(&self) -> String {
        let cell = |s: &Summary| format!("{:.3} ({:.3})", s.mean, s.sd);
        let mut lines = vec![[
            "method".to_string(),
            "n".to_string(),
            "RL".to_string(),
            "censored".to_string(),
            "false alarms".to_string(),
            "precision".to_string(),
            "recall".to_string(),
            "F1".to_string(),
        ]];
        for r in &self.rows {
            lines.push([
                r.method.clone(),
                r.size.to_string(),
                r.run_length
                    .as_ref()
                    .map_or("-".to_string(), |s| format!("{:.2} ({:.2})", s.mean, s.sd)),
                format!("{}/{}", r.censored, r.runs),
                r.false_alarms.to_string(),
                cell(&r.precision),
                cell(&r.recall),
                cell(&r.f1),
            ]);
        }
        let widths: Vec<usize> = (0..8)
            .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for l in &lines {
            let parts: Vec<String> = l
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s:>w$}"))
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        }
        let _ = writeln!(out, "\n{REPORT_FOOTER}");
        out
    }
}

pub const RESULTS_HEADER: [&str; 8] = [
    "method",
    "replication",
    "size",
    "run_length",
    "false_alarms",
    "precision",
    "recall",
    "f1",
];

/// Per-run results; a censored run length is an empty field.
pub fn write_results(results: &[RunResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RESULTS_HEADER)?;
    for r in results {
        w.write_record([
            r.method.clone(),
            r.replication.clone(),
            r.size.to_string(),
            r.run_length.map_or(String::new(), |v| v.to_string()),
            r.false_alarms.to_string(),
            r.precision.to_string(),
            r.recall.to_string(),
            r.f1.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<RunResult>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(RESULTS_HEADER) {
        return Err(Error::Malformed(format!(
            "{}: unexpected results header",
            path.display()
        )));
    }
    let bad = |f: &str| Error::Malformed(format!("{}: bad {f}", path.display()));
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let real = |k: usize, f: &str| rec[k].parse::<f64>().map_err(|_| bad(f));
        out.push(RunResult {
            method: rec[0].to_string(),
            replication: rec[1].to_string(),
            size: rec[2].parse().map_err(|_| bad("size"))?,
            run_length: if rec[3].is_empty() {
                None
            } else {
                Some(rec[3].parse().map_err(|_| bad("run_length"))?)
            },
            false_alarms: rec[4].parse().map_err(|_| bad("false_alarms"))?,
            precision: real(5, "precision")?,
            recall: real(6, "recall")?,
            f1: real(7, "f1")?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn run_length_examples() {
        assert_eq!(run_length(Some(53), 50), Some(3));
        assert_eq!(run_length(None, 50), None);
        assert_eq!(run_length(Some(50), 50), Some(0));
    }

    #[test]
    fn precision_recall_examples() {
        let truth = [3, 4, 5, 6];
        assert_eq!(precision_recall_f1(&truth, &truth), (1.0, 1.0, 1.0));
        let (p, r, f) = precision_recall_f1(&[3, 4, 5, 6, 10, 11, 12, 13], &truth);
        assert_eq!((p, r), (0.5, 1.0));
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(precision_recall_f1(&[0, 1], &truth), (0.0, 0.0, 0.0));
    }

    #[test]
    fn empty_set_conventions() {
        assert_eq!(precision_recall_f1(&[], &[]), (1.0, 1.0, 1.0));
        assert_eq!(precision_recall_f1(&[], &[1]), (0.0, 0.0, 0.0));
        assert_eq!(precision_recall_f1(&[1], &[]), (0.0, 1.0, 0.0));
    }

    fn run(method: &str, size: usize, rl: Option<usize>, p: f64) -> RunResult {
        RunResult {
            method: method.into(),
            replication: "r".into(),
            size,
            run_length: rl,
            false_alarms: 0,
            precision: p,
            recall: p,
            f1: p,
        }
    }

    #[test]
    fn single_result_has_zero_sd() {
        let rep = aggregate(&[run("m", 4, Some(7), 0.25)]).unwrap();
        let row = rep.row("m", 4).unwrap();
        assert_eq!(row.run_length.unwrap().mean, 7.0);
        assert_eq!(row.run_length.unwrap().sd, 0.0);
        assert_eq!(row.precision.mean, 0.25);
        assert_eq!(row.precision.sd, 0.0);
    }

    #[test]
    fn two_results_use_sample_sd() {
        let rep = aggregate(&[run("m", 4, Some(2), 1.0), run("m", 4, Some(4), 1.0)]).unwrap();
        let s = rep.row("m", 4).unwrap().run_length.unwrap();
        assert_eq!(s.mean, 3.0);
        assert!((s.sd - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn censored_runs_are_counted_apart() {
        let rep = aggregate(&[
            run("m", 9, None, 0.0),
            run("m", 9, Some(5), 1.0),
            run("b", 9, None, 0.0),
        ])
        .unwrap();
        let row = rep.row("m", 9).unwrap();
        assert_eq!((row.runs, row.censored), (2, 1));
        assert_eq!(row.run_length.unwrap().mean, 5.0);
        assert_eq!(rep.row("b", 9).unwrap().run_length, None);
        assert!(rep.to_text().contains(REPORT_FOOTER));
    }

    #[test]
    fn empty_input_errors() {
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn results_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let rs = vec![
            run("ours", 4, None, 0.0),
            run("t2", 80, Some(12), 1.0 / 3.0),
        ];
        write_results(&rs, &path).unwrap();
        assert_eq!(read_results(&path).unwrap(), rs);
    }

    /// Spreadsheet-style recomputation from the raw CSV text: parse fields by splitting
    /// on commas and accumulate sums and sums of squares.
    #[test]
    fn report_matches_recomputation_from_raw_csv() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let rs: Vec<RunResult> = (0..100)
            .map(|i| {
                let p: f64 = rng.random();
                let r: f64 = rng.random();
                RunResult {
                    method: ["ours", "t2"][i % 2].into(),
                    replication: format!("rep{i}"),
                    size: [4, 20][(i / 2) % 2],
                    run_length: if rng.random_bool(0.1) {
                        None
                    } else {
                        Some(rng.random_range(0..30))
                    },
                    false_alarms: rng.random_range(0..3),
                    precision: p,
                    recall: r,
                    f1: if p + r == 0.0 {
                        0.0
                    } else {
                        2.0 * p * r / (p + r)
                    },
                }
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw.csv");
        write_results(&rs, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let rep = aggregate(&rs).unwrap();
        for (method, size) in [("ours", 4), ("ours", 20), ("t2", 4), ("t2", 20)] {
            let mut sums = [0.0f64; 4];
            let mut sq = [0.0f64; 4];
            let mut counts = [0usize; 4];
            for line in text.lines().skip(1) {
                let f: Vec<&str> = line.split(',').collect();
                if f[0] != method || f[2] != size.to_string() {
                    continue;
                }
                for (k, col) in [3, 5, 6, 7].into_iter().enumerate() {
                    if let Ok(v) = f[col].parse::<f64>() {
                        sums[k] += v;
                        sq[k] += v * v;
                        counts[k] += 1;
                    }
                }
            }
            let row = rep.row(method, size).unwrap();
            let got = [row.run_length.unwrap(), row.precision, row.recall, row.f1];
            for k in 0..4 {
                let n = counts[k] as f64;
                let mean = sums[k] / n;
                let sd = ((sq[k] - n * mean * mean) / (n - 1.0)).sqrt();
                assert_eq!(got[k].count, counts[k]);
                assert!(
                    (got[k].mean - mean).abs() < 1e-12,
                    "{method} {size} col {k}"
                );
                assert!((got[k].sd - sd).abs() < 1e-9, "{method} {size} col {k}");
            }
            assert_eq!(row.censored, row.runs - counts[0]);
        }
    }

    proptest! {
        #[test]
        fn scores_are_bounded_and_f1_is_bracketed(
            d in proptest::collection::vec(0usize..40, 0..20),
            t in proptest::collection::vec(0usize..40, 0..20),
        ) {
            let (p, r, f) = precision_recall_f1(&d, &t);
            for v in [p, r, f] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(f <= (p * r).sqrt() + 1e-12);
            prop_assert!(f >= p.min(r) - 1e-12);
        }

        #[test]
        fn aggregate_is_permutation_invariant(
            vals in proptest::collection::vec((0usize..3, proptest::option::of(0usize..50), 0.0f64..1.0), 1..30),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let rs: Vec<RunResult> = vals
                .iter()
                .map(|&(s, rl, p)| run(["a", "b", "c"][s], [4, 9][s % 2], rl, p))
                .collect();
            let mut shuffled = rs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(aggregate(&rs).unwrap(), aggregate(&shuffled).unwrap());
        }
    }
}
