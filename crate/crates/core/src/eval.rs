//! Mean average precision with junk handling, neighbor-count sweeps and
//! per-regime group analysis.

use std::collections::HashSet;
use std::fmt;
use std::hash::Hash;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expand::Expander;
use crate::index::EmbeddingMatrix;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryAnnotation {
    pub id: String,
    #[serde(default)]
    pub easy: Vec<String>,
    #[serde(default)]
    pub hard: Vec<String>,
    #[serde(default)]
    pub junk: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "E")]
    Easy,
    #[serde(rename = "M")]
    Medium,
    #[serde(rename = "H")]
    Hard,
}

impl Protocol {
    pub fn short(self) -> &'static str {
        match self {
            Protocol::Easy => "E",
            Protocol::Medium => "M",
            Protocol::Hard => "H",
        }
    }

    /// The protocols averaged into headline numbers.
    pub fn reported() -> [Protocol; 2] {
        [Protocol::Medium, Protocol::Hard]
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "E" | "EASY" => Ok(Protocol::Easy),
            "M" | "MEDIUM" => Ok(Protocol::Medium),
            "H" | "HARD" => Ok(Protocol::Hard),
            _ => Err(Error::Config(format!("unknown protocol `{s}`"))),
        }
    }
}

impl QueryAnnotation {
    /// `(positives, junk)` under a protocol.
    pub fn resolve(&self, protocol: Protocol) -> (Vec<&str>, Vec<&str>) {
        fn ids<'a>(v: &[&'a Vec<String>]) -> Vec<&'a str> {
            v.iter().flat_map(|l| l.iter().map(String::as_str)).collect()
        }
        match protocol {
            Protocol::Easy => (ids(&[&self.easy]), ids(&[&self.hard, &self.junk])),
            Protocol::Medium => (ids(&[&self.easy, &self.hard]), ids(&[&self.junk])),
            Protocol::Hard => (ids(&[&self.hard]), ids(&[&self.easy, &self.junk])),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self.easy.iter().chain(&self.hard).chain(&self.junk) {
            if id == &self.id {
                return Err(Error::Data(format!("query `{}` lists itself", self.id)));
            }
            if !seen.insert(id) {
                return Err(Error::Data(format!(
                    "query `{}` lists `{id}` in more than one set",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Trapezoidal average precision over `ranked` after removing junk.
/// `None` when there are no positives.
pub fn average_precision<T: Eq + Hash>(ranked: &[T], positives: &HashSet<T>, junk: &HashSet<T>) -> Option<f64> {
    if positives.is_empty() {
        return None;
    }
    let total = positives.len() as f64;
    let mut ap = 0.0;
    let mut found = 0usize;
    let mut rank = 0usize;
    for item in ranked {
        if junk.contains(item) {
            continue;
        }
        if positives.contains(item) {
            let j = found as f64;
            let r = rank as f64;
            let precision_before = if rank > 0 { j / r } else { 1.0 };
            let precision_after = (j + 1.0) / (r + 1.0);
            ap += (precision_before + precision_after) / 2.0 / total;
            found += 1;
        }
        rank += 1;
    }
    Some(ap)
}

/// Database rows relevant to one query under one protocol.
#[derive(Clone, Debug, Default)]
struct ResolvedQuery {
    positives: HashSet<usize>,
    junk: HashSet<usize>,
}

/// Queries, their annotations and the database they are searched against.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub name: String,
    pub database: EmbeddingMatrix,
    pub queries: EmbeddingMatrix,
    pub annotations: Vec<QueryAnnotation>,
    self_rows: Vec<Option<usize>>,
}

impl Benchmark {
    /// Annotations are matched to queries by id; every query needs one.
    pub fn new(
        name: impl Into<String>,
        database: EmbeddingMatrix,
        queries: EmbeddingMatrix,
        annotations: &[QueryAnnotation],
    ) -> Result<Self> {
        if database.dim() != queries.dim() && !queries.is_empty() {
            return Err(Error::Shape(format!(
                "queries have dimension {}, database has {}",
                queries.dim(),
                database.dim()
            )));
        }
        let by_id: std::collections::HashMap<&str, &QueryAnnotation> =
            annotations.iter().map(|a| (a.id.as_str(), a)).collect();
        let mut ordered = Vec::with_capacity(queries.len());
        for id in queries.ids() {
            let a = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::Data(format!("no annotation for query `{id}`")))?;
            a.validate()?;
            for item in a.easy.iter().chain(&a.hard).chain(&a.junk) {
                if database.position(item).is_none() {
                    return Err(Error::Data(format!(
                        "annotation of `{id}` references `{item}`, which is not in the database"
                    )));
                }
            }
            ordered.push((*a).clone());
        }
        let self_rows = queries.ids().iter().map(|id| database.position(id)).collect();
        Ok(Self {
            name: name.into(),
            database,
            queries,
            annotations: ordered,
            self_rows,
        })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Same queries against a replacement database with identical ids
    /// (for example a DBA-augmented one).
    pub fn with_database(&self, database: EmbeddingMatrix) -> Result<Self> {
        if database.ids() != self.database.ids() {
            return Err(Error::Data("replacement database has different ids".into()));
        }
        Ok(Self {
            database,
            ..self.clone()
        })
    }

    fn resolve(&self, query: usize, protocol: Protocol) -> ResolvedQuery {
        let (pos, junk) = self.annotations[query].resolve(protocol);
        let rows = |ids: Vec<&str>| -> HashSet<usize> {
            ids.into_iter().filter_map(|id| self.database.position(id)).collect()
        };
        ResolvedQuery {
            positives: rows(pos),
            junk: rows(junk),
        }
    }

    /// Number of positives of each query under a protocol.
    pub fn relevant_counts(&self, protocol: Protocol) -> Vec<usize> {
        (0..self.len())
            .map(|i| self.resolve(i, protocol).positives.len())
            .collect()
    }

    fn exclude(&self, query: usize) -> Vec<usize> {
        self.self_rows[query].into_iter().collect()
    }

    /// Ranking of every database row for one query after expansion.
    pub fn ranking(&self, query: usize, expander: &Expander) -> Result<Vec<usize>> {
        let exclude = self.exclude(query);
        let q = self.queries.row(query);
        let expanded = expander.expand(q, &self.database, &exclude)?;
        Ok(self.database.knn(&expanded, self.database.len(), &exclude)?.rows())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub protocol: Protocol,
    /// `None` for queries without positives under this protocol.
    pub per_query: Vec<Option<f64>>,
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub method: String,
    pub nqe: usize,
    pub ndba: usize,
    pub query_ids: Vec<String>,
    pub results: Vec<ProtocolResult>,
    /// Mean of the per-protocol mAPs.
    pub mean_map: f64,
}

impl EvalReport {
    pub fn map(&self, protocol: Protocol) -> Option<f64> {
        self.results.iter().find(|r| r.protocol == protocol).map(|r| r.map)
    }

    pub fn per_query(&self, protocol: Protocol) -> Option<&[Option<f64>]> {
        self.results
            .iter()
            .find(|r| r.protocol == protocol)
            .map(|r| r.per_query.as_slice())
    }

    pub fn csv_header() -> &'static str {
        "method,dataset,protocol,nqe,ndba,map"
    }

    /// One CSV line per protocol plus a `mean` line.
    pub fn csv_rows(&self) -> Vec<String> {
        let method = csv_field(&self.method);
        let mut rows: Vec<String> = self
            .results
            .iter()
            .map(|r| {
                format!(
                    "{method},{},{},{},{},{:.6}",
                    self.dataset, r.protocol, self.nqe, self.ndba, r.map
                )
            })
            .collect();
        rows.push(format!(
            "{method},{},mean,{},{},{:.6}",
            self.dataset, self.nqe, self.ndba, self.mean_map
        ));
        rows
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Expands and searches every query, then scores each requested protocol.
pub fn evaluate(bench: &Benchmark, expander: &Expander, protocols: &[Protocol], ndba: usize) -> Result<EvalReport> {
    if protocols.is_empty() {
        return Err(Error::Config("no protocols requested".into()));
    }
    let rankings: Vec<Vec<usize>> = (0..bench.len())
        .into_par_iter()
        .map(|i| bench.ranking(i, expander))
        .collect::<Result<_>>()?;
    let results = protocols
        .iter()
        .map(|&protocol| {
            let per_query: Vec<Option<f64>> = rankings
                .iter()
                .enumerate()
                .map(|(i, ranked)| {
                    let r = bench.resolve(i, protocol);
                    average_precision(ranked, &r.positives, &r.junk)
                })
                .collect();
            let map = mean(per_query.iter().flatten().copied());
            ProtocolResult {
                protocol,
                per_query,
                map,
            }
        })
        .collect::<Vec<_>>();
    let mean_map = mean(results.iter().map(|r| r.map));
    Ok(EvalReport {
        dataset: bench.name.clone(),
        method: expander.label(),
        nqe: expander.nqe(),
        ndba,
        query_ids: bench.queries.ids().to_vec(),
        results,
        mean_map,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub method: String,
    pub nqe: usize,
    pub mean_map: f64,
}

/// Mean mAP of every method at every neighbor count.
pub fn sweep_nqe(
    bench: &Benchmark,
    methods: &[Expander],
    nqes: &[usize],
    protocols: &[Protocol],
) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::with_capacity(methods.len() * nqes.len());
    for m in methods {
        for &n in nqes {
            let e = m.with_nqe(n)?;
            let report = evaluate(bench, &e, protocols, 0)?;
            cells.push(SweepCell {
                method: m.method().name().to_string(),
                nqe: n,
                mean_map: report.mean_map,
            });
        }
    }
    Ok(cells)
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    ByRelevantCount,
    ByPreQeAp,
}

impl FromStr for Grouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "by-n-relevants" | "relevants" | "n-relevants" => Ok(Grouping::ByRelevantCount),
            "by-preqe-ap" | "preqe-ap" | "ap" => Ok(Grouping::ByPreQeAp),
            _ => Err(Error::Config(format!("unknown grouping `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub group: usize,
    pub count: usize,
    pub mean_statistic: f64,
    pub map_before: f64,
    pub map_after: f64,
    /// `100 · (after − before) / before`; `None` for an empty group or a zero baseline.
    pub relative_improvement: Option<f64>,
}

/// Splits queries into three groups at the 33rd and 66th percentile of
/// `statistic` and reports the relative mAP change in each.
pub fn group_analysis(before: &[f64], after: &[f64], statistic: &[f64]) -> Result<Vec<GroupResult>> {
    if before.len() != after.len() || before.len() != statistic.len() {
        return Err(Error::Shape(format!(
            "group analysis over {} / {} / {} values",
            before.len(),
            after.len(),
            statistic.len()
        )));
    }
    if before.len() < 3 {
        return Err(Error::Config(format!(
            "group analysis needs at least 3 queries, got {}",
            before.len()
        )));
    }
    let p33 = percentile(statistic, 33.0);
    let p66 = percentile(statistic, 66.0);
    let group_of = |s: f64| -> usize {
        if s <= p33 {
            0
        } else if s <= p66 {
            1
        } else {
            2
        }
    };
    Ok((0..3)
        .map(|g| {
            let members: Vec<usize> = (0..statistic.len()).filter(|&i| group_of(statistic[i]) == g).collect();
            let map_before = mean(members.iter().map(|&i| before[i]));
            let map_after = mean(members.iter().map(|&i| after[i]));
            let relative_improvement = if members.is_empty() || map_before == 0.0 {
                None
            } else {
                Some(100.0 * (map_after - map_before) / map_before)
            };
            GroupResult {
                group: g,
                count: members.len(),
                mean_statistic: mean(members.iter().map(|&i| statistic[i])),
                map_before,
                map_after,
                relative_improvement,
            }
        })
        .collect())
}

/// Per-query APs of two reports restricted to queries scored in both.
pub fn paired_aps(
    before: &EvalReport,
    after: &EvalReport,
    protocol: Protocol,
) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>)> {
    if before.query_ids != after.query_ids {
        return Err(Error::Data("reports cover different queries".into()));
    }
    let (Some(b), Some(a)) = (before.per_query(protocol), after.per_query(protocol)) else {
        return Err(Error::Data(format!("protocol {protocol} missing from a report")));
    };
    let mut idx = Vec::new();
    let mut bs = Vec::new();
    let mut as_ = Vec::new();
    for (i, (x, y)) in b.iter().zip(a).enumerate() {
        if let (Some(x), Some(y)) = (x, y) {
            idx.push(i);
            bs.push(*x);
            as_.push(*y);
        }
    }
    Ok((idx, bs, as_))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[u32]) -> HashSet<u32> {
        v.iter().copied().collect()
    }

    #[test]
    fn ap_fixtures() {
        let ranked = [0u32, 1, 2, 3];
        assert_eq!(average_precision(&ranked, &set(&[0, 1]), &set(&[])), Some(1.0));
        // ranks below are 1-based positions in `ranked`
        assert_eq!(average_precision(&ranked, &set(&[1]), &set(&[])), Some(0.25));
        let ap = average_precision(&ranked, &set(&[0, 2]), &set(&[])).unwrap();
        assert!((ap - 0.7916666666666666).abs() < 1e-12);
        assert_eq!(average_precision(&ranked, &set(&[2]), &set(&[0, 1])), Some(1.0));
        assert_eq!(average_precision(&ranked, &set(&[]), &set(&[])), None);
    }

    #[test]
    fn unretrieved_positive_contributes_zero() {
        assert_eq!(average_precision(&[0u32], &set(&[0, 9]), &set(&[])), Some(0.5));
    }

    #[test]
    fn protocols_resolve_sets() {
        let a = QueryAnnotation {
            id: "q".into(),
            easy: vec!["e".into()],
            hard: vec!["h".into()],
            junk: vec!["j".into()],
        };
        assert_eq!(a.resolve(Protocol::Medium), (vec!["e", "h"], vec!["j"]));
        assert_eq!(a.resolve(Protocol::Hard), (vec!["h"], vec!["e", "j"]));
        assert_eq!(a.resolve(Protocol::Easy), (vec!["e"], vec!["h", "j"]));
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn percentile_matches_linear_interpolation() {
        let v: Vec<f64> = (1..=9).map(f64::from).collect();
        assert!((percentile(&v, 33.0) - 3.64).abs() < 1e-12);
        assert!((percentile(&v, 66.0) - 6.28).abs() < 1e-12);
        assert_eq!(percentile(&[5.0], 50.0), 5.0);
    }

    #[test]
    fn groups_of_three() {
        let stat: Vec<f64> = (1..=9).map(f64::from).collect();
        let ap = vec![0.5; 9];
        let g = group_analysis(&ap, &ap, &stat).unwrap();
        assert_eq!(g.iter().map(|g| g.count).collect::<Vec<_>>(), vec![3, 3, 3]);
        assert!(g.iter().all(|g| g.relative_improvement == Some(0.0)));
        assert!(matches!(group_analysis(&[0.1], &[0.1], &[1.0]), Err(Error::Config(_))));
    }

    #[test]
    fn missing_annotation_is_data_error() {
        let db = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let q = EmbeddingMatrix::new(2, vec![0.0, 1.0], vec!["q".into()]).unwrap();
        assert!(matches!(Benchmark::new("t", db, q, &[]), Err(Error::Data(_))));
    }
}
