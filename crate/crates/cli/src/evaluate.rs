//! Joining test labels with decisions, and the report tables.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mvpad_core::imaging::{AccessAudit, Partition};
use mvpad_core::metrics::{
    format_method_table, format_pct, overall_report, read_reports, reduction_rows, reports_to_csv, PartitionOutcome,
    ReportRow,
};
use mvpad_core::{Dataset, Label, ViewId};
use serde::Serialize;

use crate::config::{ExperimentConfig, Method};
use crate::fuse::{load_matrix, read_decisions, TEST_PARTITIONS};
use crate::store::{self, Layout};
use crate::transform::write_csv;
use crate::EVALUATE_STAGE;

pub const VIEW_PREFIX: &str = "view:";
pub const BEST_VIEW: &str = "best_view";

fn outcome(ids: Vec<String>, decisions: Vec<Label>, truth: &HashMap<String, Label>) -> Result<PartitionOutcome> {
    let labels = ids
        .iter()
        .map(|id| truth.get(id).copied().with_context(|| format!("sample {id} has no test label")))
        .collect::<Result<Vec<_>>>()?;
    Ok(PartitionOutcome { ids, decisions, labels })
}

fn rows_for(dataset: &str, method: &str, known: &PartitionOutcome, unknown: &PartitionOutcome) -> Result<Vec<ReportRow>> {
    let row = |report| ReportRow { dataset: dataset.to_string(), method: method.to_string(), report };
    Ok(vec![
        row(known.report(Partition::TestKnown.as_str())?),
        row(unknown.report(Partition::TestUnknown.as_str())?),
        row(overall_report(known, unknown)?),
    ])
}

/// Score every fused output and every single view on both test partitions
/// and pooled. This is the only stage that reads test labels.
pub fn run_evaluate(cfg: &ExperimentConfig, ds: &Dataset, layout: &Layout, audit: &AccessAudit) -> Result<Vec<ReportRow>> {
    let violations = store::audit_violations(layout)?;
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(|(s, p)| format!("{s} read {p} labels")).collect();
        bail!("protocol violation, test labels read before evaluation: {}", list.join("; "));
    }
    let mut truth = HashMap::new();
    for p in TEST_PARTITIONS {
        let labels = ds.labels(p, EVALUATE_STAGE, audit);
        truth.extend(ds.in_partition(p).map(|r| r.id.clone()).zip(labels));
    }

    let mut methods = cfg.methods.clone();
    methods.sort();
    methods.dedup();
    let mut rows = Vec::new();
    for m in methods {
        let [known, unknown] = TEST_PARTITIONS.map(|p| {
            let (ids, dec) = read_decisions(layout, m.name(), p)?;
            outcome(ids, dec, &truth)
        });
        rows.extend(rows_for(&ds.name, m.name(), &known?, &unknown?)?);
    }

    let [mk, mu] = TEST_PARTITIONS.map(|p| load_matrix(layout, p));
    let (mk, mu) = (mk?, mu?);
    for (j, v) in mk.views().iter().enumerate() {
        if mu.views().get(j) != Some(v) {
            bail!("test matrices disagree on view columns");
        }
        let known = outcome(mk.sample_ids().to_vec(), mk.decision_column(j), &truth)?;
        let unknown = outcome(mu.sample_ids().to_vec(), mu.decision_column(j), &truth)?;
        rows.extend(rows_for(&ds.name, &format!("{VIEW_PREFIX}{v}"), &known, &unknown)?);
    }

    store::write_atomic(&layout.reports_csv(), reports_to_csv(&rows).as_bytes())?;
    store::write_json(&layout.reports_json(), &rows)?;
    log::info!("evaluate: {} report rows", rows.len());
    Ok(rows)
}

fn method_rank(m: &str) -> (u8, usize) {
    if let Some(v) = m.strip_prefix(VIEW_PREFIX) {
        return (3, v.parse::<ViewId>().map(|v| v.index()).unwrap_or(usize::MAX));
    }
    if m == BEST_VIEW {
        return (2, 0);
    }
    match m.parse::<Method>() {
        Ok(x) => (0, Method::ALL.iter().position(|&y| y == x).expect("listed")),
        Err(_) => (1, 0),
    }
}

fn partition_rank(p: &str) -> usize {
    ["test_known", "test_unknown", "overall"].iter().position(|&x| x == p).unwrap_or(3)
}

/// Stable row order: dataset, then method, then partition.
pub fn sort_rows(rows: &mut [ReportRow]) {
    rows.sort_by(|a, b| {
        (a.dataset.as_str(), method_rank(&a.method), partition_rank(&a.report.partition), a.method.as_str()).cmp(&(
            b.dataset.as_str(),
            method_rank(&b.method),
            partition_rank(&b.report.partition),
            b.method.as_str(),
        ))
    });
}

/// Single view with the lowest known-attack HTER per dataset; earlier views
/// win ties.
pub fn best_views(rows: &[ReportRow]) -> Vec<(String, String)> {
    let mut best: Vec<(String, String, f64)> = Vec::new();
    for r in rows.iter().filter(|r| r.method.starts_with(VIEW_PREFIX) && r.report.partition == "test_known") {
        let Some(h) = r.report.hter else { continue };
        match best.iter_mut().find(|b| b.0 == r.dataset) {
            Some(b) if h < b.2 => *b = (r.dataset.clone(), r.method.clone(), h),
            Some(_) => {}
            None => best.push((r.dataset.clone(), r.method.clone(), h)),
        }
    }
    best.into_iter().map(|(d, m, _)| (d, m)).collect()
}

#[derive(Debug, Clone, Serialize)]
struct ReductionCsvRow<'a> {
    dataset: &'a str,
    partition: &'a str,
    baseline: &'a str,
    method: &'a str,
    baseline_hter: String,
    new_hter: String,
    reduction: String,
}

/// Read `reports.csv` from each results directory and write `report.md`
/// and `reduction.csv` into `out`. Returns the markdown.
pub fn run_report(dirs: &[PathBuf], out: &Path, baseline: &str, method: &str) -> Result<String> {
    let mut rows = Vec::new();
    for d in dirs {
        let p = Layout::new(d).reports_csv();
        if !p.is_file() {
            bail!("no results in {} (missing reports.csv)", d.display());
        }
        rows.extend(read_reports(&p).with_context(|| format!("reading {}", p.display()))?);
    }
    if rows.is_empty() {
        bail!("results are empty");
    }
    sort_rows(&mut rows);

    let best = best_views(&rows);
    let mut fused: Vec<ReportRow> = rows.iter().filter(|r| !r.method.starts_with(VIEW_PREFIX)).cloned().collect();
    for (ds, view) in &best {
        fused.extend(
            rows.iter()
                .filter(|r| &r.dataset == ds && &r.method == view)
                .map(|r| ReportRow { method: BEST_VIEW.to_string(), ..r.clone() }),
        );
    }
    sort_rows(&mut fused);

    let mut md = String::from("# Results\n\n## HTER (%) per fusion method\n\n");
    md.push_str(&format_method_table(&fused));
    if !best.is_empty() {
        md.push_str("\nBest single view (lowest test_known HTER):");
        for (ds, v) in &best {
            let _ = write!(md, " {ds}: `{}`;", v.trim_start_matches(VIEW_PREFIX));
        }
        md.pop();
        md.push('\n');
    }

    let mut csv_rows = Vec::new();
    for partition in ["overall", "test_known", "test_unknown"] {
        let red = reduction_rows(&fused, baseline, method, partition);
        if red.is_empty() {
            continue;
        }
        let _ = write!(md, "\n## Error reduction of {method} over {baseline}, {partition}\n\n");
        md.push_str(&mvpad_core::metrics::format_reduction_table(&red, baseline, method));
        for r in &red {
            csv_rows.push((r.dataset.clone(), partition, r.baseline_hter, r.new_hter, r.reduction));
        }
    }

    let views: Vec<&ReportRow> = rows.iter().filter(|r| r.method.starts_with(VIEW_PREFIX)).collect();
    if !views.is_empty() {
        md.push_str("\n## Single views, HTER (%)\n\n| Dataset | View | test_known | test_unknown | overall |\n|---|---|---:|---:|---:|\n");
        let mut i = 0;
        while i < views.len() {
            let (ds, m) = (&views[i].dataset, &views[i].method);
            let mut cells = ["n/a".to_string(), "n/a".to_string(), "n/a".to_string()];
            while i < views.len() && &views[i].dataset == ds && &views[i].method == m {
                let k = partition_rank(&views[i].report.partition);
                if k < 3 {
                    cells[k] = format_pct(views[i].report.hter);
                }
                i += 1;
            }
            let _ = writeln!(md, "| {ds} | {} | {} | {} | {} |", m.trim_start_matches(VIEW_PREFIX), cells[0], cells[1], cells[2]);
        }
    }

    std::fs::create_dir_all(out)?;
    store::write_atomic(&out.join("report.md"), md.as_bytes())?;
    let csv: Vec<ReductionCsvRow> = csv_rows
        .iter()
        .map(|(ds, p, b, n, r)| ReductionCsvRow {
            dataset: ds,
            partition: p,
            baseline,
            method,
            baseline_hter: format!("{b:.2}"),
            new_hter: format!("{n:.2}"),
            reduction: format_pct(*r),
        })
        .collect();
    write_csv(&out.join("reduction.csv"), &csv)?;
    Ok(md)
}
