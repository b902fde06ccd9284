//! Per-method metric tables written as CSV.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean and sample standard deviation of the finite values; `(NaN, NaN)`
/// when there are none.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// One row of the summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub num_turn_on: f64,
    pub n: usize,
    /// Column name to value; `oc_score` holds the mean one-class score and
    /// every other metric `m` contributes `m_mean` and `m_std`.
    pub values: BTreeMap<String, f64>,
}

impl SummaryRow {
    pub fn from_reports<'r>(
        method: &str,
        num_turn_on: f64,
        reports: impl IntoIterator<Item = &'r BTreeMap<String, f64>>,
        extra: &BTreeMap<String, f64>,
    ) -> Self {
        let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut n = 0;
        for r in reports {
            n += 1;
            for (k, &v) in r {
                columns.entry(k.clone()).or_default().push(v);
            }
        }
        let mut values = BTreeMap::new();
        for (k, vals) in &columns {
            let (m, s) = mean_std(vals);
            if k == super::OC_SCORE {
                values.insert(k.clone(), m);
                values.insert(format!("{k}_std"), s);
            } else {
                values.insert(format!("{k}_mean"), m);
                values.insert(format!("{k}_std"), s);
            }
            let infinite = vals.iter().filter(|v| v.is_infinite()).count();
            if infinite > 0 {
                values.insert(format!("{k}_inf_count"), infinite as f64);
            }
        }
        values.extend(extra.iter().map(|(k, v)| (k.clone(), *v)));
        Self {
            method: method.to_string(),
            num_turn_on,
            n,
            values,
        }
    }
}

/// Write rows with a fixed leading layout `method,num_turn_on,n,oc_score,
/// regen_dist_mean,input_1nn_norm_mean,...` followed by the remaining columns
/// in name order.
pub fn write_csv(path: impl AsRef<Path>, rows: &[SummaryRow]) -> Result<()> {
    let path = path.as_ref();
    let mut names: Vec<String> = rows.iter().flat_map(|r| r.values.keys().cloned()).collect();
    names.sort();
    names.dedup();
    let lead = ["oc_score", "regen_dist_mean", "input_1nn_norm_mean", "latent_1nn_norm_mean"];
    let mut ordered: Vec<String> = lead.iter().filter(|l| names.iter().any(|n| n == *l)).map(|s| s.to_string()).collect();
    ordered.extend(names.into_iter().filter(|n| !lead.contains(&n.as_str())));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let mut header = vec!["method".to_string(), "num_turn_on".to_string(), "n".to_string()];
    header.extend(ordered.iter().cloned());
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.method.clone(), fmt(r.num_turn_on), r.n.to_string()];
        rec.extend(ordered.iter().map(|c| r.values.get(c).map_or_else(String::new, |v| fmt(*v))));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}
