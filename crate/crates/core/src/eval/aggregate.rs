//! Cross-dataset aggregation: mean ranks, percent change against a
//! reference method, and the Friedman test.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::eval::sweep::{Attack, MetricRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ci,
    Ibs,
    Negll,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Ci, Metric::Ibs, Metric::Negll];

    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Ci => "ci",
            Metric::Ibs => "ibs",
            Metric::Negll => "negll",
        }
    }

    pub fn higher_is_better(&self) -> bool {
        matches!(self, Metric::Ci)
    }

    /// Value used for ranking: flagged cells rank last.
    pub fn score(&self, r: &MetricRecord) -> f64 {
        match self {
            Metric::Ci if r.ci_flag => f64::NEG_INFINITY,
            Metric::Ci => r.ci,
            Metric::Ibs if r.ibs_flag => f64::INFINITY,
            Metric::Ibs => r.ibs,
            Metric::Negll if r.negll_flag => f64::INFINITY,
            Metric::Negll => r.negll,
        }
    }

    fn flagged(&self, r: &MetricRecord) -> bool {
        match self {
            Metric::Ci => r.ci_flag,
            Metric::Ibs => r.ibs_flag,
            Metric::Negll => r.negll_flag,
        }
    }
}

/// Radii are compared on a 1e-9 lattice so that parsed and computed values
/// land in the same cell.
fn eps_key(eps: f64) -> i64 {
    (eps * 1e9).round() as i64
}

fn key_eps(key: i64) -> f64 {
    key as f64 / 1e9
}

/// Ascending ranks with ties sharing their mean rank (1-based).
pub fn rank_ascending(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mean;
        }
        i = j + 1;
    }
    ranks
}

/// Metric values per method for every (attack, eps, dataset) block, with
/// repeated seeds averaged. Flags survive the average: one flagged seed
/// makes the cell flagged.
#[derive(Debug, Clone)]
pub struct BlockTable {
    pub methods: Vec<String>,
    /// (attack, eps key, dataset) -> metric -> per-method score
    blocks: BTreeMap<(Attack, i64, String), BTreeMap<Metric, Vec<f64>>>,
}

impl BlockTable {
    pub fn build(records: &[MetricRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Aggregation("no metric records".into()));
        }
        let methods: Vec<String> = records
            .iter()
            .map(|r| r.method.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        type Acc = BTreeMap<Metric, (f64, usize, bool)>;
        let mut sums: BTreeMap<(Attack, i64, String), BTreeMap<String, Acc>> = BTreeMap::new();
        for r in records {
            let cell = sums
                .entry((r.attack, eps_key(r.eps), r.dataset.clone()))
                .or_default()
                .entry(r.method.clone())
                .or_default();
            for m in Metric::ALL {
                let e = cell.entry(m).or_insert((0.0, 0, false));
                e.0 += if m.flagged(r) { 0.0 } else { m.score(r) };
                e.1 += 1;
                e.2 |= m.flagged(r);
            }
        }
        let mut blocks = BTreeMap::new();
        for (key, per_method) in sums {
            let mut by_metric: BTreeMap<Metric, Vec<f64>> = BTreeMap::new();
            for method in &methods {
                let acc = per_method.get(method).ok_or_else(|| {
                    Error::Aggregation(format!(
                        "missing cell: method {method} has no record for dataset {}, attack {}, eps {}",
                        key.2,
                        key.0,
                        key_eps(key.1)
                    ))
                })?;
                for m in Metric::ALL {
                    let (sum, n, flagged) = acc[&m];
                    let v = if flagged {
                        if m.higher_is_better() {
                            f64::NEG_INFINITY
                        } else {
                            f64::INFINITY
                        }
                    } else {
                        sum / n as f64
                    };
                    by_metric.entry(m).or_default().push(v);
                }
            }
            blocks.insert(key, by_metric);
        }
        Ok(Self { methods, blocks })
    }

    pub fn datasets(&self) -> BTreeSet<String> {
        self.blocks.keys().map(|k| k.2.clone()).collect()
    }

    /// Per-method values of every block matching `attack`, `metric` and one
    /// of `eps` (all radii when `None`). Oriented so that lower is better.
    pub fn oriented_blocks(&self, attack: Attack, metric: Metric, eps: Option<&[f64]>) -> Vec<Vec<f64>> {
        let keys: Option<BTreeSet<i64>> = eps.map(|e| e.iter().map(|&v| eps_key(v)).collect());
        self.blocks
            .iter()
            .filter(|((a, e, _), _)| *a == attack && keys.as_ref().is_none_or(|k| k.contains(e)))
            .map(|(_, by_metric)| {
                by_metric[&metric]
                    .iter()
                    .map(|&v| if metric.higher_is_better() { -v } else { v })
                    .collect()
            })
            .collect()
    }

    /// Mean rank of each method over `blocks`, in `methods` order.
    pub fn mean_ranks(blocks: &[Vec<f64>]) -> Vec<f64> {
        let k = blocks.first().map_or(0, Vec::len);
        let mut sums = vec![0.0; k];
        for b in blocks {
            for (s, r) in sums.iter_mut().zip(rank_ascending(b)) {
                *s += r;
            }
        }
        sums.iter().map(|s| s / blocks.len() as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub attack: Attack,
    pub metric: Metric,
    pub eps: f64,
    pub method: String,
    pub mean_rank: f64,
    pub datasets: usize,
}

/// Mean rank (1 = best) of every method per (attack, eps, metric), averaged
/// across datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct RankTable {
    pub methods: Vec<String>,
    pub entries: Vec<RankEntry>,
}

impl RankTable {
    pub fn get(&self, attack: Attack, metric: Metric, eps: f64, method: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.attack == attack && e.metric == metric && eps_key(e.eps) == eps_key(eps) && e.method == method)
            .map(|e| e.mean_rank)
    }

    /// One row per (attack, metric, method); one column per radius,
    /// largest radius first.
    pub fn to_csv(&self) -> String {
        let mut eps: Vec<i64> = self.entries.iter().map(|e| eps_key(e.eps)).collect::<BTreeSet<_>>().into_iter().collect();
        eps.reverse();
        let mut out = String::from("attack,metric,method");
        for &e in &eps {
            let _ = write!(out, ",{:.2}", key_eps(e));
        }
        out.push('\n');
        let mut groups: Vec<(Attack, Metric)> =
            self.entries.iter().map(|e| (e.attack, e.metric)).collect::<BTreeSet<_>>().into_iter().collect();
        groups.sort();
        for (attack, metric) in groups {
            for method in &self.methods {
                let _ = write!(out, "{attack},{},{method}", metric.as_str());
                for &e in &eps {
                    match self.get(attack, metric, key_eps(e), method) {
                        Some(r) => {
                            let _ = write!(out, ",{r}");
                        }
                        None => out.push(','),
                    }
                }
                out.push('\n');
            }
        }
        out
    }
}

pub fn average_ranks(records: &[MetricRecord]) -> Result<RankTable> {
    let table = BlockTable::build(records)?;
    let mut cells: BTreeSet<(Attack, i64)> = BTreeSet::new();
    for (a, e, _) in table.blocks.keys() {
        cells.insert((*a, *e));
    }
    let mut entries = Vec::new();
    for (attack, e) in cells {
        for metric in Metric::ALL {
            let blocks = table.oriented_blocks(attack, metric, Some(&[key_eps(e)]));
            let ranks = BlockTable::mean_ranks(&blocks);
            for (method, r) in table.methods.iter().zip(ranks) {
                entries.push(RankEntry {
                    attack,
                    metric,
                    eps: key_eps(e),
                    method: method.clone(),
                    mean_rank: r,
                    datasets: blocks.len(),
                });
            }
        }
    }
    Ok(RankTable {
        methods: table.methods,
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentChange {
    pub attack: Attack,
    pub metric: Metric,
    pub eps: f64,
    pub method: String,
    /// Mean over datasets of `100 (method - reference) / reference`.
    pub percent: f64,
    /// Some dataset had a zero or flagged reference or a flagged method
    /// value; those datasets are left out of the mean.
    pub flagged: bool,
}

pub fn relative_percent_change(records: &[MetricRecord], reference: &str) -> Result<Vec<PercentChange>> {
    let table = BlockTable::build(records)?;
    let ref_idx = table
        .methods
        .iter()
        .position(|m| m == reference)
        .ok_or_else(|| Error::Aggregation(format!("reference method {reference} has no records")))?;
    let mut out = Vec::new();
    let mut cells: BTreeSet<(Attack, i64)> = BTreeSet::new();
    for (a, e, _) in table.blocks.keys() {
        cells.insert((*a, *e));
    }
    for (attack, e) in cells {
        for metric in Metric::ALL {
            let rows: Vec<&Vec<f64>> = table
                .blocks
                .iter()
                .filter(|((a, k, _), _)| *a == attack && *k == e)
                .map(|(_, m)| &m[&metric])
                .collect();
            for (j, method) in table.methods.iter().enumerate() {
                let mut sum = 0.0;
                let mut n = 0;
                let mut flagged = false;
                for vals in &rows {
                    let (base, v) = (vals[ref_idx], vals[j]);
                    if base == 0.0 || !base.is_finite() || !v.is_finite() {
                        flagged = true;
                        continue;
                    }
                    sum += 100.0 * (v - base) / base;
                    n += 1;
                }
                out.push(PercentChange {
                    attack,
                    metric,
                    eps: key_eps(e),
                    method: method.clone(),
                    percent: if n > 0 { sum / n as f64 } else { f64::NAN },
                    flagged,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FriedmanResult {
    pub statistic: f64,
    pub p_value: f64,
    pub blocks: usize,
    pub treatments: usize,
}

/// Friedman chi-square test on a blocks × treatments matrix of raw values;
/// values are ranked within each block (ties share their mean rank) and the
/// statistic carries the usual tie correction.
pub fn friedman_test(values: &[Vec<f64>]) -> Result<FriedmanResult> {
    let n = values.len();
    let k = values.first().map_or(0, Vec::len);
    if k < 2 {
        return Err(Error::Domain(format!("Friedman test needs at least 2 treatments, got {k}")));
    }
    if n < 2 {
        return Err(Error::Domain(format!("Friedman test needs at least 2 blocks, got {n}")));
    }
    if let Some(b) = values.iter().find(|b| b.len() != k) {
        return Err(Error::Shape { expected: k, got: b.len() });
    }
    if values.iter().flatten().any(|v| v.is_nan()) {
        return Err(Error::Input("Friedman test values must not be NaN".into()));
    }
    let (nf, kf) = (n as f64, k as f64);
    let mut rank_sums = vec![0.0; k];
    let mut ties = 0.0;
    for block in values {
        let ranks = rank_ascending(block);
        for (s, r) in rank_sums.iter_mut().zip(&ranks) {
            *s += r;
        }
        let mut sorted = block.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < k {
            let mut j = i;
            while j + 1 < k && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            ties += t * t * t - t;
            i = j + 1;
        }
    }
    let ssq: f64 = rank_sums.iter().map(|r| r * r).sum();
    let raw = 12.0 / (nf * kf * (kf + 1.0)) * ssq - 3.0 * nf * (kf + 1.0);
    let correction = 1.0 - ties / (nf * kf * (kf * kf - 1.0));
    let statistic = if correction <= 0.0 { 0.0 } else { (raw / correction).max(0.0) };
    let chi = ChiSquared::new(kf - 1.0).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(FriedmanResult {
        statistic,
        p_value: chi.sf(statistic),
        blocks: n,
        treatments: k,
    })
}
