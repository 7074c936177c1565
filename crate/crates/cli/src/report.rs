//! Aggregation of `results.csv` files over seeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::runner::RESULTS_HEADER;
use crate::CliError;

pub const REPORT_HEADER: &str = "method,budget,seeds,worst_group_acc_mean,worst_group_acc_std,avg_acc_mean,avg_acc_std,reweighted_avg_acc_mean,reweighted_avg_acc_std";
pub const PLOT_HEADER: &str = "method,labels_per_group,worst_group_acc_mean,worst_group_acc_std";

const METRICS: [&str; 3] = ["worst_group_acc", "avg_acc", "reweighted_avg_acc"];

/// Budget ordering key: numeric budgets ascending, `inf` last.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum BudgetKey {
    Finite(u64),
    All,
}

impl BudgetKey {
    fn parse(s: &str) -> Option<Self> {
        if s == "inf" {
            Some(BudgetKey::All)
        } else {
            s.parse().ok().map(BudgetKey::Finite)
        }
    }

    fn label(&self) -> String {
        match self {
            BudgetKey::Finite(b) => b.to_string(),
            BudgetKey::All => "inf".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub method: String,
    pub budget: String,
    pub seeds: usize,
    /// `(mean, sample std)` for worst-group, average and reweighted accuracy.
    pub stats: [(f64, f64); 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<AggregateRow>,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn schema(path: &Path, message: impl Into<String>) -> CliError {
    CliError::Schema {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn aggregate(run_dirs: &[PathBuf]) -> Result<Report, CliError> {
    if run_dirs.is_empty() {
        return Err(CliError::Config("report needs at least one run directory".into()));
    }
    let columns: Vec<&str> = RESULTS_HEADER.split(',').collect();
    let col = |name: &str| columns.iter().position(|c| *c == name).expect("known column");
    let metric_cols: Vec<usize> = METRICS.iter().map(|m| col(m)).collect();
    let mut groups: BTreeMap<(String, BudgetKey), Vec<[f64; 3]>> = BTreeMap::new();
    for dir in run_dirs {
        let path = dir.join("results.csv");
        let text = fs::read_to_string(&path).map_err(CliError::io(format!("reading {}", path.display())))?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header != RESULTS_HEADER {
            return Err(schema(&path, format!("unexpected header `{header}`")));
        }
        for (n, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != columns.len() {
                return Err(schema(&path, format!("row {} has {} columns, expected {}", n + 2, cells.len(), columns.len())));
            }
            let budget = BudgetKey::parse(cells[col("budget")])
                .ok_or_else(|| schema(&path, format!("row {}: bad budget `{}`", n + 2, cells[col("budget")])))?;
            let mut values = [0.0; 3];
            for (slot, &c) in values.iter_mut().zip(&metric_cols) {
                *slot = cells[c]
                    .parse()
                    .map_err(|_| schema(&path, format!("row {}: bad number `{}`", n + 2, cells[c])))?;
            }
            groups.entry((cells[col("method")].to_string(), budget)).or_default().push(values);
        }
    }
    let rows = groups
        .into_iter()
        .map(|((method, budget), values)| {
            let stat = |k: usize| mean_std(&values.iter().map(|v| v[k]).collect::<Vec<_>>());
            AggregateRow {
                method,
                budget: budget.label(),
                seeds: values.len(),
                stats: [stat(0), stat(1), stat(2)],
            }
        })
        .collect();
    Ok(Report { rows })
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let stats: Vec<String> = r.stats.iter().map(|(m, s)| format!("{m:.6},{s:.6}")).collect();
            out.push_str(&format!("{},{},{},{}\n", r.method, r.budget, r.seeds, stats.join(",")));
        }
        out
    }

    /// Worst-group accuracy against the number of group labels per group.
    pub fn plot_csv(&self) -> String {
        let mut out = format!("{PLOT_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.6},{:.6}\n", r.method, r.budget, r.stats[0].0, r.stats[0].1));
        }
        out
    }

    /// Right-aligned columns, `mean ± std` cells.
    pub fn to_text(&self) -> String {
        let header = ["method", "budget", "seeds", "worst_group_acc", "avg_acc", "reweighted_avg_acc"];
        let mut table: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            let mut row = vec![r.method.clone(), r.budget.clone(), r.seeds.to_string()];
            row.extend(r.stats.iter().map(|(m, s)| format!("{m:.4} ± {s:.4}")));
            table.push(row);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| table.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &table {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, w)| format!("{}{cell}", " ".repeat(w - cell.chars().count())))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }

    pub fn write(&self, out_dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(out_dir).map_err(CliError::io(format!("creating {}", out_dir.display())))?;
        for (name, body) in [
            ("report.csv", self.to_csv()),
            ("report.txt", self.to_text()),
            ("plot_worst_group_vs_budget.csv", self.plot_csv()),
        ] {
            let path = out_dir.join(name);
            fs::write(&path, body).map_err(CliError::io(format!("writing {}", path.display())))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
    }

    #[test]
    fn budgets_sort_numerically_with_inf_last() {
        let mut keys = vec![
            BudgetKey::parse("inf").unwrap(),
            BudgetKey::parse("32").unwrap(),
            BudgetKey::parse("8").unwrap(),
        ];
        keys.sort();
        let labels: Vec<String> = keys.iter().map(BudgetKey::label).collect();
        assert_eq!(labels, ["8", "32", "inf"]);
        assert!(BudgetKey::parse("x").is_none());
    }
}
