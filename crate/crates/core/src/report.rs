//! Cross-run comparison: read manifests, group runs by label within task
//! family, and emit mean +/- std of the final metrics.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::config::TaskFamily;
use crate::error::Result;
use crate::manifest::RunManifest;

#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub family: String,
    pub label: String,
    pub runs: usize,
    pub final_loss_mean: f64,
    pub final_loss_std: f64,
    pub accuracy_mean: Option<f64>,
    pub allocated_params: usize,
    pub seeds: Vec<u64>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn build_report(manifests: &[RunManifest]) -> Result<Vec<ReportRow>> {
    let mut groups: BTreeMap<(String, String), Vec<&RunManifest>> = BTreeMap::new();
    for m in manifests {
        let family = match m.config.task.family {
            TaskFamily::Teacher => "teacher",
            TaskFamily::Cluster => "cluster",
        };
        groups
            .entry((family.to_string(), m.label.clone()))
            .or_default()
            .push(m);
    }

    let mut rows = Vec::new();
    for ((family, label), runs) in groups {
        let losses: Vec<f64> = runs.iter().map(|m| m.final_eval.loss).collect();
        let (final_loss_mean, final_loss_std) = mean_std(&losses);
        let accs: Vec<f64> = runs.iter().filter_map(|m| m.final_eval.accuracy).collect();
        let accuracy_mean = if accs.is_empty() {
            None
        } else {
            Some(accs.iter().sum::<f64>() / accs.len() as f64)
        };
        rows.push(ReportRow {
            family,
            label,
            runs: runs.len(),
            final_loss_mean,
            final_loss_std,
            accuracy_mean,
            allocated_params: runs[0].rank_plan.allocated_params(),
            seeds: runs.iter().map(|m| m.seed).collect(),
        });
    }
    Ok(rows)
}

/// Aligned text table, grouped by family.
pub fn format_report(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    let mut current_family = "";
    for row in rows {
        if row.family != current_family {
            current_family = &row.family;
            out.push_str(&format!("== {} ==\n", current_family));
            out.push_str(&format!(
                "{:<24} {:>5} {:>22} {:>10} {:>12}\n",
                "label", "runs", "final loss (mean+/-std)", "accuracy", "params"
            ));
        }
        let acc = row
            .accuracy_mean
            .map(|a| format!("{:.4}", a))
            .unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:<24} {:>5} {:>14.6e} +/- {:<9.2e} {:>6} {:>12}\n",
            row.label, row.runs, row.final_loss_mean, row.final_loss_std, acc, row.allocated_params
        ));
    }
    out
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out =
        String::from("family,label,runs,final_loss_mean,final_loss_std,accuracy_mean,allocated_params\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.12e},{:.12e},{},{}\n",
            r.family,
            r.label,
            r.runs,
            r.final_loss_mean,
            r.final_loss_std,
            r.accuracy_mean.map(|a| a.to_string()).unwrap_or_default(),
            r.allocated_params
        ));
    }
    out
}
