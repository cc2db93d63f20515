//! Comparison tables built purely from run directories.

use std::collections::BTreeMap;
use std::path::Path;

use super::runner::{load_manifest, read_jsonl, RunManifest, TimingRecord, RECORDS_FILE, TIMINGS_FILE};
use crate::baselines::Method;
use crate::engine::Sampling;
use crate::error::{Error, Result};
use crate::metrics::{build_results_matrix, MetricRecord, ResultsMatrix};

#[derive(Clone, Debug, PartialEq)]
pub struct RunData {
    pub label: String,
    pub manifest: RunManifest,
    pub records: Vec<MetricRecord>,
    pub timings: Vec<TimingRecord>,
}

impl RunData {
    pub fn matrix(&self) -> Result<ResultsMatrix> {
        build_results_matrix(&self.records, &self.manifest.tasks)
    }

    fn final_scores(&self) -> Result<BTreeMap<String, f64>> {
        let m = self.matrix()?;
        Ok(self.manifest.tasks.iter().cloned().zip(m.final_row()).filter_map(|(t, v)| Some((t, v?))).collect())
    }
}

pub fn load_run(dir: &Path) -> Result<RunData> {
    let manifest = load_manifest(dir)?;
    let records = read_jsonl(&dir.join(RECORDS_FILE))?;
    let timings = match dir.join(TIMINGS_FILE) {
        p if p.exists() => read_jsonl(&p)?,
        _ => Vec::new(),
    };
    let label = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());
    Ok(RunData { label, manifest, records, timings })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub text: String,
    pub warnings: Vec<String>,
}

/// Relative change in percent, as shown in brackets.
pub fn degradation(after: f64, before: f64) -> Option<f64> {
    (before != 0.0).then(|| (after - before) / before * 100.0)
}

fn table(out: &mut String, header: Vec<String>, rows: Vec<Vec<String>>) {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    for r in std::iter::once(&header).chain(&rows) {
        let cells: Vec<String> = r.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out.push('\n');
}

fn score(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

fn pct(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.2}%")).unwrap_or_else(|| "-".into())
}

fn sampling_name(s: Sampling) -> &'static str {
    match s {
        Sampling::Relation => "relation",
        Sampling::Min => "min",
        Sampling::Full => "full",
    }
}

/// Renders the overall, transfer, noisy-task and sampling tables.
pub fn render_report(runs: &[RunData]) -> Result<Report> {
    if runs.is_empty() {
        return Err(Error::EmptyInput("render_report"));
    }
    let mut warnings = Vec::new();
    let mut columns: Vec<String> = Vec::new();
    for r in runs {
        for t in &r.manifest.tasks {
            if !columns.contains(t) {
                columns.push(t.clone());
            }
        }
    }
    let mut matrices = Vec::new();
    for r in runs {
        let m = r.matrix()?;
        let missing = m.missing();
        if !missing.is_empty() {
            let cells: Vec<String> = missing.iter().map(|(j, i)| format!("({j},{i})")).collect();
            warnings.push(format!("{}: missing results cells {}", r.label, cells.join(" ")));
        }
        matrices.push(m);
    }

    let mut text = String::from("next-item tasks are scored by MRR@5 on the final item of each sequence\n\n");
    let head = |first: &[&str]| -> Vec<String> {
        first.iter().map(|s| s.to_string()).chain(columns.iter().cloned()).collect()
    };

    text.push_str("overall: score on each task after the last stage\n");
    let rows = runs
        .iter()
        .zip(&matrices)
        .map(|(r, m)| {
            let fin: BTreeMap<&String, Option<f64>> = r.manifest.tasks.iter().zip(m.final_row()).collect();
            [r.label.clone(), r.manifest.method.name().into(), r.manifest.order.clone()]
                .into_iter()
                .chain(columns.iter().map(|c| score(fin.get(c).copied().flatten())))
                .collect()
        })
        .collect();
    table(&mut text, head(&["run", "method", "order"]), rows);

    text.push_str("transfer: BWT and FWT in percent, FWT against the sinmo run\n");
    let reference: BTreeMap<String, f64> = match runs.iter().zip(&matrices).find(|(r, _)| r.manifest.method == Method::Sinmo) {
        Some((r, m)) => r.manifest.tasks.iter().cloned().zip(m.diagonal()).filter_map(|(t, v)| Some((t, v?))).collect(),
        None => {
            warnings.push("no sinmo run: forward transfer omitted".into());
            BTreeMap::new()
        }
    };
    let mut rows = Vec::new();
    for (r, m) in runs.iter().zip(&matrices) {
        let refs: Vec<Option<f64>> = r.manifest.tasks.iter().map(|t| reference.get(t).copied()).collect();
        for (name, vals) in [("bwt", m.bwt_row()), ("fwt", m.fwt_row(&refs))] {
            let by: BTreeMap<&String, Option<f64>> = r.manifest.tasks.iter().zip(vals).collect();
            rows.push(
                [r.label.clone(), name.to_string()]
                    .into_iter()
                    .chain(columns.iter().map(|c| pct(by.get(c).copied().flatten())))
                    .collect(),
            );
        }
    }
    table(&mut text, head(&["run", "metric"]), rows);

    let noisy: Vec<&RunData> = runs.iter().filter(|r| r.manifest.tasks.iter().any(|t| t == "noise")).collect();
    if !noisy.is_empty() {
        text.push_str("noisy task: final score [change against the clean run]\n");
        let mut rows = Vec::new();
        for r in noisy {
            let clean_tasks: Vec<&String> = r.manifest.tasks.iter().filter(|t| *t != "noise").collect();
            let Some(clean) = runs.iter().find(|c| {
                c.manifest.method == r.manifest.method
                    && c.manifest.order == r.manifest.order
                    && c.manifest.tasks.iter().collect::<Vec<_>>() == clean_tasks
            }) else {
                warnings.push(format!("{}: no clean run of the same method and order", r.label));
                continue;
            };
            let (after, before) = (r.final_scores()?, clean.final_scores()?);
            let at = r.manifest.tasks.iter().position(|t| t == "noise").expect("filtered");
            let post: Vec<f64> = r.manifest.tasks[at + 1..]
                .iter()
                .filter_map(|t| degradation(*after.get(t)?, *before.get(t)?))
                .collect();
            let mean = (!post.is_empty()).then(|| post.iter().sum::<f64>() / post.len() as f64);
            let mut row = vec![r.label.clone(), clean.label.clone()];
            for c in &columns {
                row.push(match (after.get(c), before.get(c)) {
                    (Some(&a), Some(&b)) => format!("{a:.4} [{}]", pct(degradation(a, b))),
                    (Some(&a), None) => format!("{a:.4}"),
                    _ => "-".into(),
                });
            }
            row.push(pct(mean));
            rows.push(row);
        }
        let mut header = head(&["run", "clean"]);
        header.push("post-noise mean".into());
        table(&mut text, header, rows);
    }

    let sampled: Vec<&RunData> = runs
        .iter()
        .filter(|r| r.records.iter().any(|x| x.metric == "pseudo_users"))
        .collect();
    if !sampled.is_empty() {
        text.push_str("sampling: final-task score, pseudo-labelled users per epoch, seconds per epoch [in brackets]\n");
        let mut rows = Vec::new();
        for r in sampled {
            let last = r.manifest.tasks.last().expect("non-empty run");
            let fin = r.final_scores()?.get(last).copied();
            let full = runs
                .iter()
                .find(|c| {
                    c.manifest.sampling == Sampling::Full
                        && c.manifest.method == r.manifest.method
                        && c.manifest.order == r.manifest.order
                        && c.manifest.tasks == r.manifest.tasks
                })
                .and_then(|c| c.final_scores().ok()?.get(last).copied());
            let mut per_epoch: BTreeMap<(usize, usize), f64> = BTreeMap::new();
            for x in r.records.iter().filter(|x| x.metric == "pseudo_users") {
                *per_epoch.entry((x.stage, x.epoch.unwrap_or(0))).or_default() += x.value;
            }
            let users = per_epoch.values().sum::<f64>() / per_epoch.len() as f64;
            let secs: Vec<f64> = r.timings.iter().filter(|t| t.stage > 0).map(|t| t.seconds).collect();
            let secs = (!secs.is_empty()).then(|| secs.iter().sum::<f64>() / secs.len() as f64);
            rows.push(vec![
                r.label.clone(),
                sampling_name(r.manifest.sampling).into(),
                format!(
                    "{} [{}]",
                    score(fin),
                    secs.map(|s| format!("{s:.2}s")).unwrap_or_else(|| "-".into())
                ),
                format!("{users:.1}"),
                pct(fin.zip(full).and_then(|(a, b)| degradation(a, b))),
            ]);
        }
        table(
            &mut text,
            ["run", "sampling", "final task [s/epoch]", "pseudo users", "vs full"].map(String::from).to_vec(),
            rows,
        );
    }

    for w in &warnings {
        text.push_str(&format!("warning: {w}\n"));
    }
    Ok(Report { text, warnings })
}
