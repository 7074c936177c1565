//! Confusion matrices and confusion-matched label flipping.

use std::io::Write;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{self, substream};

/// `counts[t][p]`: rows with true group `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn zeros(groups: usize) -> Self {
        Self {
            counts: vec![vec![0; groups]; groups],
        }
    }

    pub fn num_groups(&self) -> usize {
        self.counts.len()
    }

    pub fn row_totals(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Off-diagonal mass over row total, per true group. Empty rows give 0.
    pub fn error_rates(&self) -> Vec<f64> {
        self.counts
            .iter()
            .enumerate()
            .map(|(t, row)| {
                let total: usize = row.iter().sum();
                if total == 0 {
                    0.0
                } else {
                    (total - row[t]) as f64 / total as f64
                }
            })
            .collect()
    }

    pub fn max_error_rate(&self) -> f64 {
        self.error_rates().into_iter().fold(0.0, f64::max)
    }

    /// Rows scaled to probability vectors; an empty row becomes the identity row.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(t, row)| {
                let total: usize = row.iter().sum();
                if total == 0 {
                    (0..row.len()).map(|p| f64::from(u8::from(p == t))).collect()
                } else {
                    row.iter().map(|&c| c as f64 / total as f64).collect()
                }
            })
            .collect()
    }

    /// CSV with a header row and a leading column of group indices.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let g = self.num_groups();
        let header: Vec<String> = (0..g).map(|p| p.to_string()).collect();
        writeln!(w, "true\\pred,{}", header.join(","))?;
        for (t, row) in self.counts.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            writeln!(w, "{t},{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty confusion matrix".into()))?;
        let g = header.split(',').count() - 1;
        let mut counts = Vec::with_capacity(g);
        for (t, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != g + 1 || cells[0].trim() != t.to_string() {
                return Err(Error::Parse(format!("bad confusion row `{line}`")));
            }
            let row = cells[1..]
                .iter()
                .map(|c| {
                    c.trim()
                        .parse::<usize>()
                        .map_err(|e| Error::Parse(format!("bad count `{c}`: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            counts.push(row);
        }
        if counts.len() != g {
            return Err(Error::Parse(format!("expected {g} rows, found {}", counts.len())));
        }
        Ok(Self { counts })
    }
}

pub fn confusion(pred: &[usize], truth: &[usize], groups: usize) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions against {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut m = ConfusionMatrix::zeros(groups);
    for (&p, &t) in pred.iter().zip(truth) {
        if let Some(&bad) = [p, t].iter().find(|&&v| v >= groups) {
            return Err(Error::LabelRange { label: bad, groups });
        }
        m.counts[t][p] += 1;
    }
    Ok(m)
}

/// Largest-remainder rounding of `probs * total` to integers summing to
/// `total`. Equal remainders go to the lowest index.
pub fn largest_remainder(probs: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = probs.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Target counts that [`flip_to_confusion`] realises for a given truth vector.
pub fn rounded_target(truth: &[usize], target: &[Vec<f64>]) -> Result<ConfusionMatrix> {
    let g = target.len();
    validate_target(target)?;
    let mut totals = vec![0usize; g];
    for &t in truth {
        if t >= g {
            return Err(Error::LabelRange { label: t, groups: g });
        }
        totals[t] += 1;
    }
    Ok(ConfusionMatrix {
        counts: (0..g).map(|t| largest_remainder(&target[t], totals[t])).collect(),
    })
}

fn validate_target(target: &[Vec<f64>]) -> Result<()> {
    let g = target.len();
    for (t, row) in target.iter().enumerate() {
        if row.len() != g {
            return Err(Error::Shape(format!("target row {t} has {} entries, expected {g}", row.len())));
        }
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!("target row {t} is not a probability vector")));
        }
    }
    Ok(())
}

/// Replaces true groups with labels whose confusion against the truth equals
/// the largest-remainder rounding of `target` exactly. Within each true group
/// the rows receiving each label are chosen uniformly without replacement.
pub fn flip_to_confusion(truth: &[usize], target: &[Vec<f64>], seed: u64) -> Result<Vec<usize>> {
    let rounded = rounded_target(truth, target)?;
    let g = target.len();
    let mut members = vec![Vec::new(); g];
    for (i, &t) in truth.iter().enumerate() {
        members[t].push(i);
    }
    let mut r = rng::stream(seed, substream::FLIPS);
    let mut out = truth.to_vec();
    for (t, rows) in members.iter_mut().enumerate() {
        rows.shuffle(&mut r);
        let mut next = 0;
        for (p, &c) in rounded.counts[t].iter().enumerate() {
            for &i in &rows[next..next + c] {
                out[i] = p;
            }
            next += c;
        }
    }
    Ok(out)
}
