//! Run, scatter, aggregate and summary CSV files.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::bench::stats::mean;
use crate::error::FormatError;
use crate::nn::QueryResult;
use crate::solver::IterationRecord;

pub const RUN_HEADER: &str = "iter,global_d2,t_assembly_s,t_rhs_s,t_solve_s,t_query_s,comparisons,hops,skips";
pub const SCATTER_HEADER: &str = "point_id,final_de2,comparisons";
pub const AGGREGATE_HEADER: &str =
    "group,iter,runs,global_d2,t_assembly_s,t_rhs_s,t_solve_s,t_query_s,comparisons,hops,skips";
pub const SUMMARY_HEADER: &str = "group,runs,iterations,final_global_d2,total_comparisons,total_hops,total_skips";

/// One parsed row of a run CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunRow {
    pub iter: usize,
    pub global_d2: f64,
    pub t_assembly_s: f64,
    pub t_rhs_s: f64,
    pub t_solve_s: f64,
    pub t_query_s: f64,
    pub comparisons: u64,
    pub hops: u64,
    pub skips: u64,
}

impl From<&IterationRecord> for RunRow {
    fn from(r: &IterationRecord) -> Self {
        RunRow {
            iter: r.iter,
            global_d2: r.global_d2,
            t_assembly_s: r.t_assembly.as_secs_f64(),
            t_rhs_s: r.t_rhs.as_secs_f64(),
            t_solve_s: r.t_solve.as_secs_f64(),
            t_query_s: r.t_query.as_secs_f64(),
            comparisons: r.comparisons,
            hops: r.hops,
            skips: r.skips,
        }
    }
}

pub fn run_csv(rows: &[RunRow]) -> String {
    let mut s = format!("{RUN_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{:?},{:?},{:?},{:?},{:?},{},{},{}",
            r.iter, r.global_d2, r.t_assembly_s, r.t_rhs_s, r.t_solve_s, r.t_query_s, r.comparisons, r.hops, r.skips
        )
        .unwrap();
    }
    s
}

pub fn records_csv(records: &[IterationRecord]) -> String {
    run_csv(&records.iter().map(RunRow::from).collect::<Vec<_>>())
}

fn fields(line: &str, lineno: usize, n: usize) -> Result<Vec<&str>, FormatError> {
    let f: Vec<&str> = line.split(',').map(str::trim).collect();
    if f.len() != n {
        return Err(FormatError::Record { line: lineno, msg: format!("expected {n} fields, found {}", f.len()) });
    }
    Ok(f)
}

fn num<T: std::str::FromStr>(s: &str, lineno: usize, name: &str) -> Result<T, FormatError> {
    s.parse().map_err(|_| FormatError::Record { line: lineno, msg: format!("bad {name} `{s}`") })
}

fn real(s: &str, lineno: usize, name: &str) -> Result<f64, FormatError> {
    let v: f64 = num(s, lineno, name)?;
    if !v.is_finite() || v < 0.0 {
        return Err(FormatError::Record { line: lineno, msg: format!("{name} must be finite and non-negative") });
    }
    Ok(v)
}

fn lines_after_header<'a>(text: &'a str, header: &str) -> Result<impl Iterator<Item = (usize, &'a str)>, FormatError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        Some((_, h)) => return Err(FormatError::Header(format!("unexpected header `{h}`"))),
        None => return Err(FormatError::Header("empty file".into())),
    }
    Ok(lines.filter(|(_, l)| !l.trim().is_empty()))
}

pub fn parse_run_csv(text: &str) -> Result<Vec<RunRow>, FormatError> {
    let mut rows = Vec::new();
    for (n, line) in lines_after_header(text, RUN_HEADER)? {
        let f = fields(line, n, 9)?;
        rows.push(RunRow {
            iter: num(f[0], n, "iter")?,
            global_d2: real(f[1], n, "global_d2")?,
            t_assembly_s: real(f[2], n, "t_assembly_s")?,
            t_rhs_s: real(f[3], n, "t_rhs_s")?,
            t_solve_s: real(f[4], n, "t_solve_s")?,
            t_query_s: real(f[5], n, "t_query_s")?,
            comparisons: num(f[6], n, "comparisons")?,
            hops: num(f[7], n, "hops")?,
            skips: num(f[8], n, "skips")?,
        });
    }
    for (k, r) in rows.iter().enumerate() {
        if r.iter != k + 1 {
            return Err(FormatError::Invalid(format!("iterations not consecutive from 1 at row {}", k + 1)));
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatterRow {
    pub point_id: usize,
    pub final_de2: f64,
    pub comparisons: u64,
}

pub fn scatter_rows(results: &[QueryResult]) -> Vec<ScatterRow> {
    results
        .iter()
        .enumerate()
        .map(|(p, r)| ScatterRow { point_id: p, final_de2: r.best_dist_sq, comparisons: r.comparisons })
        .collect()
}

pub fn scatter_csv(rows: &[ScatterRow]) -> String {
    let mut s = format!("{SCATTER_HEADER}\n");
    for r in rows {
        writeln!(s, "{},{:?},{}", r.point_id, r.final_de2, r.comparisons).unwrap();
    }
    s
}

pub fn parse_scatter_csv(text: &str) -> Result<Vec<ScatterRow>, FormatError> {
    lines_after_header(text, SCATTER_HEADER)?
        .map(|(n, line)| {
            let f = fields(line, n, 3)?;
            Ok(ScatterRow {
                point_id: num(f[0], n, "point_id")?,
                final_de2: real(f[1], n, "final_de2")?,
                comparisons: num(f[2], n, "comparisons")?,
            })
        })
        .collect()
}

/// Per-iteration means of a group of runs. Iterations missing from runs
/// that stopped early are averaged over the runs that reached them.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub group: String,
    pub iter: usize,
    pub runs: usize,
    pub global_d2: f64,
    pub t_assembly_s: f64,
    pub t_rhs_s: f64,
    pub t_solve_s: f64,
    pub t_query_s: f64,
    pub comparisons: f64,
    pub hops: f64,
    pub skips: f64,
}

/// Per-run totals averaged over a group.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub group: String,
    pub runs: usize,
    pub iterations: f64,
    pub final_global_d2: f64,
    pub total_comparisons: f64,
    pub total_hops: f64,
    pub total_skips: f64,
}

pub fn aggregate(groups: &BTreeMap<String, Vec<Vec<RunRow>>>) -> (Vec<AggregateRow>, Vec<SummaryRow>) {
    let mut agg = Vec::new();
    let mut summary = Vec::new();
    for (group, runs) in groups {
        let longest = runs.iter().map(Vec::len).max().unwrap_or(0);
        for i in 0..longest {
            let rows: Vec<&RunRow> = runs.iter().filter_map(|r| r.get(i)).collect();
            let m = |f: &dyn Fn(&RunRow) -> f64| mean(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
            agg.push(AggregateRow {
                group: group.clone(),
                iter: i + 1,
                runs: rows.len(),
                global_d2: m(&|r| r.global_d2),
                t_assembly_s: m(&|r| r.t_assembly_s),
                t_rhs_s: m(&|r| r.t_rhs_s),
                t_solve_s: m(&|r| r.t_solve_s),
                t_query_s: m(&|r| r.t_query_s),
                comparisons: m(&|r| r.comparisons as f64),
                hops: m(&|r| r.hops as f64),
                skips: m(&|r| r.skips as f64),
            });
        }
        let done: Vec<&Vec<RunRow>> = runs.iter().filter(|r| !r.is_empty()).collect();
        let m = |f: &dyn Fn(&[RunRow]) -> f64| mean(&done.iter().map(|r| f(r)).collect::<Vec<_>>());
        summary.push(SummaryRow {
            group: group.clone(),
            runs: done.len(),
            iterations: m(&|r| r.len() as f64),
            final_global_d2: m(&|r| r.last().unwrap().global_d2),
            total_comparisons: m(&|r| r.iter().map(|x| x.comparisons).sum::<u64>() as f64),
            total_hops: m(&|r| r.iter().map(|x| x.hops).sum::<u64>() as f64),
            total_skips: m(&|r| r.iter().map(|x| x.skips).sum::<u64>() as f64),
        });
    }
    (agg, summary)
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut s = format!("{AGGREGATE_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            r.group,
            r.iter,
            r.runs,
            r.global_d2,
            r.t_assembly_s,
            r.t_rhs_s,
            r.t_solve_s,
            r.t_query_s,
            r.comparisons,
            r.hops,
            r.skips
        )
        .unwrap();
    }
    s
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{:?},{:?},{:?},{:?},{:?}",
            r.group, r.runs, r.iterations, r.final_global_d2, r.total_comparisons, r.total_hops, r.total_skips
        )
        .unwrap();
    }
    s
}

pub fn parse_aggregate_csv(text: &str) -> Result<Vec<AggregateRow>, FormatError> {
    lines_after_header(text, AGGREGATE_HEADER)?
        .map(|(n, line)| {
            let f = fields(line, n, 11)?;
            Ok(AggregateRow {
                group: f[0].to_string(),
                iter: num(f[1], n, "iter")?,
                runs: num(f[2], n, "runs")?,
                global_d2: real(f[3], n, "global_d2")?,
                t_assembly_s: real(f[4], n, "t_assembly_s")?,
                t_rhs_s: real(f[5], n, "t_rhs_s")?,
                t_solve_s: real(f[6], n, "t_solve_s")?,
                t_query_s: real(f[7], n, "t_query_s")?,
                comparisons: real(f[8], n, "comparisons")?,
                hops: real(f[9], n, "hops")?,
                skips: real(f[10], n, "skips")?,
            })
        })
        .collect()
}

pub fn parse_summary_csv(text: &str) -> Result<Vec<SummaryRow>, FormatError> {
    lines_after_header(text, SUMMARY_HEADER)?
        .map(|(n, line)| {
            let f = fields(line, n, 7)?;
            Ok(SummaryRow {
                group: f[0].to_string(),
                runs: num(f[1], n, "runs")?,
                iterations: real(f[2], n, "iterations")?,
                final_global_d2: real(f[3], n, "final_global_d2")?,
                total_comparisons: real(f[4], n, "total_comparisons")?,
                total_hops: real(f[5], n, "total_hops")?,
                total_skips: real(f[6], n, "total_skips")?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(iter: usize, d: f64, c: u64) -> RunRow {
        RunRow {
            iter,
            global_d2: d,
            t_assembly_s: 0.0,
            t_rhs_s: 0.25,
            t_solve_s: 0.5,
            t_query_s: 1.0,
            comparisons: c,
            hops: 0,
            skips: 0,
        }
    }

    #[test]
    fn run_csv_round_trip() {
        let rows = vec![row(1, 1.0 / 3.0, 10), row(2, 0.1, 7)];
        assert_eq!(parse_run_csv(&run_csv(&rows)).unwrap(), rows);
    }

    #[test]
    fn run_csv_errors() {
        assert!(matches!(parse_run_csv(""), Err(FormatError::Header(_))));
        assert!(matches!(parse_run_csv("a,b\n"), Err(FormatError::Header(_))));
        let bad = format!("{RUN_HEADER}\n1,0.5,0,0,0,0,x,0,0\n");
        assert!(matches!(parse_run_csv(&bad), Err(FormatError::Record { line: 2, .. })));
        let gap = format!("{RUN_HEADER}\n2,0.5,0,0,0,0,1,0,0\n");
        assert!(matches!(parse_run_csv(&gap), Err(FormatError::Invalid(_))));
        let neg = format!("{RUN_HEADER}\n1,-0.5,0,0,0,0,1,0,0\n");
        assert!(parse_run_csv(&neg).is_err());
    }

    #[test]
    fn aggregate_is_arithmetic_mean() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), vec![vec![row(1, 1.0, 10), row(2, 0.5, 4)], vec![row(1, 3.0, 20)]]);
        let (agg, sum) = aggregate(&g);
        assert_eq!(agg.len(), 2);
        assert_eq!((agg[0].runs, agg[0].global_d2, agg[0].comparisons), (2, 2.0, 15.0));
        assert_eq!((agg[1].runs, agg[1].global_d2), (1, 0.5));
        assert_eq!(sum[0].final_global_d2, (0.5 + 3.0) / 2.0);
        assert_eq!(sum[0].total_comparisons, (14.0 + 20.0) / 2.0);
        assert_eq!(parse_aggregate_csv(&aggregate_csv(&agg)).unwrap(), agg);
        assert_eq!(parse_summary_csv(&summary_csv(&sum)).unwrap(), sum);
    }

    #[test]
    fn scatter_round_trip() {
        let rows = vec![ScatterRow { point_id: 0, final_de2: 0.125, comparisons: 40 }];
        assert_eq!(parse_scatter_csv(&scatter_csv(&rows)).unwrap(), rows);
    }
}
