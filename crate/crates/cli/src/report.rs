//! Metric tables in CSV and aligned text.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Result;
use coordet::metrics_eval::MetricReport;

/// Metric columns aggregated across sweep runs.
const SUMMARY: [&str; 7] = ["ap", "auc", "max_f1", "f1", "precision", "recall", "macro_f1"];

fn summary_values(m: &MetricReport) -> [f64; 7] {
    [m.ap, m.auc, m.max_f1, m.f1, m.precision, m.recall, m.macro_f1]
}

pub fn write_metrics_csv(path: &Path, m: &MetricReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MetricReport::COLUMNS)?;
    w.write_record(m.values().iter().map(|v| v.to_string()))?;
    w.flush()?;
    Ok(())
}

pub fn print_metrics(m: &MetricReport) {
    println!("{:<10} {:>10}", "metric", "value");
    for (name, v) in MetricReport::COLUMNS.iter().zip(m.values()) {
        if *name == "n" || *name == "positives" {
            println!("{name:<10} {v:>10}");
        } else {
            println!("{name:<10} {v:>10.4}");
        }
    }
}

pub struct SweepRow {
    pub loops: String,
    pub seed: u64,
    pub metrics: MetricReport,
}

pub struct SummaryRow {
    pub loops: String,
    pub runs: usize,
    pub mean: [f64; 7],
    pub std: [f64; 7],
}

/// Mean and sample standard deviation per loop setting, in first-seen order.
pub fn summarize(rows: &[SweepRow]) -> Vec<SummaryRow> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<[f64; 7]>> = BTreeMap::new();
    for r in rows {
        if !groups.contains_key(&r.loops) {
            order.push(r.loops.clone());
        }
        groups
            .entry(r.loops.clone())
            .or_default()
            .push(summary_values(&r.metrics));
    }
    order
        .into_iter()
        .map(|loops| {
            let vals = &groups[&loops];
            let n = vals.len() as f64;
            let mut mean = [0.0; 7];
            let mut std = [0.0; 7];
            for k in 0..7 {
                mean[k] = vals.iter().map(|v| v[k]).sum::<f64>() / n;
                if vals.len() > 1 {
                    let ss: f64 = vals.iter().map(|v| (v[k] - mean[k]).powi(2)).sum();
                    std[k] = (ss / (n - 1.0)).sqrt();
                }
            }
            SummaryRow {
                loops,
                runs: vals.len(),
                mean,
                std,
            }
        })
        .collect()
}

pub fn write_sweep(dir: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("runs.csv"))?;
    let mut header = vec!["loops".to_string(), "seed".to_string()];
    header.extend(MetricReport::COLUMNS.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.loops.clone(), r.seed.to_string()];
        rec.extend(r.metrics.values().iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    let mut header = vec!["loops".to_string(), "runs".to_string()];
    for name in SUMMARY {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_std"));
    }
    w.write_record(&header)?;
    for s in summarize(rows) {
        let mut rec = vec![s.loops.clone(), s.runs.to_string()];
        for k in 0..7 {
            rec.push(s.mean[k].to_string());
            rec.push(s.std[k].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn print_sweep_summary(rows: &[SummaryRow]) {
    print!("{:<6} {:>4}", "loops", "runs");
    for name in SUMMARY {
        print!(" {name:>17}");
    }
    println!();
    for s in rows {
        print!("{:<6} {:>4}", s.loops, s.runs);
        for k in 0..7 {
            print!(" {:>17}", format!("{:.4} ± {:.4}", s.mean[k], s.std[k]));
        }
        println!();
    }
}
