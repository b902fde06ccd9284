//! Human-label analytics: consensus, per-method fraction tables, significance
//! tests, inter-rater agreement and the metric-based creativity classifier.

pub mod fleiss;
pub mod logistic;
pub mod stats;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fleiss::{fleiss_kappa, fleiss_kappa_counts};
pub use logistic::{train_creativity_classifier, CreativityReport, LogisticModel};
pub use stats::{categorical_tests, chi2_sf, CategoricalTest};

/// The four annotation options.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "L1", alias = "creative")]
    Creative,
    #[serde(rename = "L2", alias = "novel-not-creative")]
    NovelNotCreative,
    #[serde(rename = "L3", alias = "not-novel-or-creative")]
    NotNovelOrCreative,
    #[serde(rename = "L4", alias = "inconclusive")]
    Inconclusive,
}

impl Label {
    pub const ALL: [Label; 4] = [
        Label::Creative,
        Label::NovelNotCreative,
        Label::NotNovelOrCreative,
        Label::Inconclusive,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> &'static str {
        ["L1", "L2", "L3", "L4"][self.index()]
    }

    pub fn name(self) -> &'static str {
        ["creative", "novel-not-creative", "not-novel-or-creative", "inconclusive"][self.index()]
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Label::ALL
            .into_iter()
            .find(|l| l.code().eq_ignore_ascii_case(s) || l.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown label {s:?} (expected L1, L2, L3 or L4)")))
    }
}

/// One label given by one annotator to one sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub sample_id: String,
    pub annotator: String,
    pub label: Label,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    /// Decoding method; only present in evaluator exports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Evaluation(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

/// Keep only the last record of each (sample, annotator) pair, in log order.
pub fn latest_per_annotator(records: &[AnnotationRecord]) -> Vec<AnnotationRecord> {
    let mut last: HashMap<(&str, &str), usize> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        last.insert((&r.sample_id, &r.annotator), i);
    }
    let mut keep: Vec<usize> = last.into_values().collect();
    keep.sort_unstable();
    keep.into_iter().map(|i| records[i].clone()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConsensusRule {
    /// A label with at least this many votes and no tie for first place.
    Quorum(usize),
    /// A label with more than half of the votes.
    Majority,
}

impl Default for ConsensusRule {
    fn default() -> Self {
        ConsensusRule::Quorum(3)
    }
}

/// Votes per sample, rejecting conflicting duplicates.
pub fn votes_by_sample(records: &[AnnotationRecord]) -> Result<BTreeMap<String, [usize; 4]>> {
    let mut seen: HashMap<(&str, &str), Label> = HashMap::new();
    let mut votes: BTreeMap<String, [usize; 4]> = BTreeMap::new();
    for r in records {
        match seen.insert((&r.sample_id, &r.annotator), r.label) {
            Some(prev) if prev != r.label => {
                return Err(Error::Evaluation(format!(
                    "annotator {} labeled sample {} both {prev} and {}",
                    r.annotator, r.sample_id, r.label
                )))
            }
            Some(_) => continue,
            None => votes.entry(r.sample_id.clone()).or_default()[r.label.index()] += 1,
        }
    }
    Ok(votes)
}

pub fn consensus_of(votes: &[usize; 4], rule: ConsensusRule) -> Option<Label> {
    let top = *votes.iter().max()?;
    let total: usize = votes.iter().sum();
    let winners: Vec<usize> = (0..4).filter(|&i| votes[i] == top).collect();
    let ok = match rule {
        ConsensusRule::Quorum(k) => top >= k && winners.len() == 1,
        ConsensusRule::Majority => 2 * top > total,
    };
    ok.then(|| Label::ALL[winners[0]])
}

/// Consensus label (or `None`) of every sample that has at least one record.
pub fn consensus(records: &[AnnotationRecord], rule: ConsensusRule) -> Result<BTreeMap<String, Option<Label>>> {
    if let ConsensusRule::Quorum(0) = rule {
        return Err(Error::InvalidArgument("min_agree must be at least 1".into()));
    }
    Ok(votes_by_sample(records)?
        .into_iter()
        .map(|(id, v)| (id, consensus_of(&v, rule)))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub counts: [usize; 4],
    /// `counts` normalized over consensus-labeled samples.
    pub fractions: [f64; 4],
    pub n_samples: usize,
    /// Mean reconstruction distance over every sample of the method that has one.
    pub mean_regen_dist: f64,
}

impl TableRow {
    pub fn n_consensus(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationTable {
    pub rows: Vec<TableRow>,
}

/// Per-method label fractions. Samples without consensus count towards
/// `n_samples` and the mean distance but not the fractions.
pub fn fraction_table(
    consensus: &BTreeMap<String, Option<Label>>,
    methods: &BTreeMap<String, String>,
    regen_dist: &BTreeMap<String, f64>,
) -> Result<EvaluationTable> {
    struct Acc {
        counts: [usize; 4],
        n: usize,
        dr_sum: f64,
        dr_n: usize,
    }
    let mut groups: BTreeMap<&str, Acc> = BTreeMap::new();
    for (id, method) in methods {
        let acc = groups.entry(method).or_insert(Acc { counts: [0; 4], n: 0, dr_sum: 0.0, dr_n: 0 });
        acc.n += 1;
        if let Some(&d) = regen_dist.get(id) {
            if d.is_finite() {
                acc.dr_sum += d;
                acc.dr_n += 1;
            }
        }
    }
    for (id, label) in consensus {
        let method = methods
            .get(id)
            .ok_or_else(|| Error::Evaluation(format!("sample {id} has no method tag")))?;
        if let Some(l) = label {
            groups.get_mut(method.as_str()).expect("method group exists").counts[l.index()] += 1;
        }
    }
    let mut rows = Vec::with_capacity(groups.len());
    for (method, acc) in groups {
        let total: usize = acc.counts.iter().sum();
        if total == 0 {
            return Err(Error::Evaluation(format!("method {method} has no consensus-labeled samples")));
        }
        let fractions = acc.counts.map(|c| c as f64 / total as f64);
        rows.push(TableRow {
            method: method.to_string(),
            counts: acc.counts,
            fractions,
            n_samples: acc.n,
            mean_regen_dist: if acc.dr_n > 0 { acc.dr_sum / acc.dr_n as f64 } else { f64::NAN },
        });
    }
    Ok(EvaluationTable { rows })
}

impl EvaluationTable {
    pub fn row(&self, method: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Columns: method, the four fractions, mean distance, then counts.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["method".to_string()];
        header.extend(Label::ALL.iter().map(|l| l.name().to_string()));
        header.extend(["regen_dist_mean", "n_consensus", "n_samples"].map(String::from));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.method.clone()];
            rec.extend(r.fractions.iter().map(|f| format!("{f}")));
            rec.push(format!("{}", r.mean_regen_dist));
            rec.push(r.n_consensus().to_string());
            rec.push(r.n_samples.to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
