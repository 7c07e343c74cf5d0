//! Threshold calibration, copy classification and Top-K retrieval rates.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::measures::{polarity_of, Polarity};
use crate::pipeline::{compare, CompareConfig, SimilarityReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDistance {
    pub value: f64,
    pub is_copy: bool,
    pub query: String,
    pub target: String,
}

impl LabeledDistance {
    pub fn new(value: f64, is_copy: bool) -> Self {
        Self {
            value,
            is_copy,
            query: String::new(),
            target: String::new(),
        }
    }
}

/// Whether `value` is on the copy side of `threshold`.
pub fn admits(polarity: Polarity, value: f64, threshold: f64) -> bool {
    match polarity {
        Polarity::LowerIsCopy => value <= threshold,
        Polarity::HigherIsCopy => value >= threshold,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationCurve {
    pub polarity: Polarity,
    /// Ascending candidate thresholds.
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub best_threshold: f64,
    pub best_tpr: f64,
    pub best_fpr: f64,
    pub best_gap: f64,
}

impl CalibrationCurve {
    /// `threshold,tpr,fpr` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,tpr,fpr\n");
        for ((t, tp), fp) in self.thresholds.iter().zip(&self.tpr).zip(&self.fpr) {
            out.push_str(&format!("{t},{tp},{fp}\n"));
        }
        out
    }
}

/// Number of sorted values admitted at `t`.
fn admitted(sorted: &[f64], polarity: Polarity, t: f64) -> usize {
    match polarity {
        Polarity::LowerIsCopy => sorted.partition_point(|&v| v <= t),
        Polarity::HigherIsCopy => sorted.len() - sorted.partition_point(|&v| v < t),
    }
}

/// Sweeps every distinct sample value and every midpoint between
/// neighbors, keeping the threshold with the largest `TPR − FPR`. Ties go
/// to the threshold admitting fewer positives, then to the stricter one.
pub fn calibrate(samples: &[LabeledDistance], polarity: Polarity) -> Result<CalibrationCurve> {
    if samples.iter().any(|s| !s.value.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mut pos: Vec<f64> = samples.iter().filter(|s| s.is_copy).map(|s| s.value).collect();
    let mut neg: Vec<f64> = samples.iter().filter(|s| !s.is_copy).map(|s| s.value).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::OneClassOnly);
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);

    let mut distinct: Vec<f64> = samples.iter().map(|s| s.value).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut thresholds = Vec::with_capacity(2 * distinct.len());
    for (i, &v) in distinct.iter().enumerate() {
        thresholds.push(v);
        if let Some(&next) = distinct.get(i + 1) {
            let mid = v + (next - v) / 2.0;
            if mid > v && mid < next {
                thresholds.push(mid);
            }
        }
    }

    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let mut tpr = Vec::with_capacity(thresholds.len());
    let mut fpr = Vec::with_capacity(thresholds.len());
    let mut best: Option<(usize, usize, f64)> = None;
    for (i, &t) in thresholds.iter().enumerate() {
        let tp = admitted(&pos, polarity, t);
        let fp = admitted(&neg, polarity, t);
        let gap = tp as f64 / np - fp as f64 / nn;
        tpr.push(tp as f64 / np);
        fpr.push(fp as f64 / nn);
        let better = match best {
            None => true,
            Some((_, best_tp, best_gap)) => {
                gap > best_gap
                    || (gap == best_gap && tp < best_tp)
                    || (gap == best_gap && tp == best_tp && polarity == Polarity::HigherIsCopy)
            }
        };
        // ascending sweep: for LowerIsCopy the first of equal candidates is
        // the stricter one, for HigherIsCopy the last
        if better {
            best = Some((i, tp, gap));
        }
    }
    let (bi, _, best_gap) = best.expect("at least one threshold");
    Ok(CalibrationCurve {
        polarity,
        best_threshold: thresholds[bi],
        best_tpr: tpr[bi],
        best_fpr: fpr[bi],
        best_gap,
        thresholds,
        tpr,
        fpr,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub t_corr: Option<f64>,
    pub t_lr: Option<f64>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            t_corr: Some(0.9951),
            t_lr: Some(0.0006),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Copy,
    NotCopy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Corr,
    Lr,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification {
    pub verdict: Verdict,
    /// Rules that had both a measure and a threshold.
    pub evaluated: Vec<Rule>,
    /// Rules that voted Copy.
    pub fired: Vec<Rule>,
}

/// Copy when `corr ≥ t_corr` or `lr ≤ t_lr`; a rule takes part only when
/// its measure and threshold are both present.
pub fn classify(report: &SimilarityReport, thresholds: &Thresholds) -> Result<Classification> {
    let rules = [
        (Rule::Corr, report.corr, thresholds.t_corr, Polarity::HigherIsCopy),
        (Rule::Lr, report.lr, thresholds.t_lr, Polarity::LowerIsCopy),
    ];
    let mut evaluated = Vec::new();
    let mut fired = Vec::new();
    for (rule, value, threshold, polarity) in rules {
        if let (Some(v), Some(t)) = (value, threshold) {
            evaluated.push(rule);
            if admits(polarity, v, t) {
                fired.push(rule);
            }
        }
    }
    if evaluated.is_empty() {
        return Err(Error::NoMeasures);
    }
    let verdict = if fired.is_empty() {
        Verdict::NotCopy
    } else {
        Verdict::Copy
    };
    Ok(Classification {
        verdict,
        evaluated,
        fired,
    })
}

/// A model taking part in retrieval, with the source it derives from.
#[derive(Debug, Clone)]
pub struct Model {
    pub id: String,
    pub source: String,
    pub cloud: PointCloud,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub query: String,
    pub target: String,
    pub measure: String,
    pub config_hash: String,
    pub value: f64,
}

type CacheKey = (String, String, String, String);

/// Append-only JSONL store of pair distances, so interrupted sweeps resume.
#[derive(Debug, Default)]
pub struct DistanceCache {
    path: Option<PathBuf>,
    entries: HashMap<CacheKey, f64>,
    writer: Option<BufWriter<File>>,
}

impl DistanceCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads existing records from `path` and appends new ones to it. A
    /// truncated final line from an interrupted run is ignored.
    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheRecord>(&line) {
                    Ok(r) => {
                        entries.insert((r.query, r.target, r.measure, r.config_hash), r.value);
                    }
                    Err(e) => log::warn!("{}:{}: skipping unreadable cache record: {e}", path.display(), i + 1),
                }
            }
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries,
            writer: None,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, query: &str, target: &str, measure: &str, config_hash: &str) -> Option<f64> {
        self.entries
            .get(&(query.into(), target.into(), measure.into(), config_hash.into()))
            .copied()
    }

    pub fn insert(&mut self, record: CacheRecord) -> Result<()> {
        if let Some(path) = &self.path {
            if self.writer.is_none() {
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| Error::io(path, e))?;
                self.writer = Some(BufWriter::new(file));
            }
            let w = self.writer.as_mut().expect("writer opened");
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(path, e))?;
        }
        self.entries.insert(
            (record.query, record.target, record.measure, record.config_hash),
            record.value,
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairScore {
    pub query: usize,
    pub target: usize,
    /// Measure name to distance.
    pub values: BTreeMap<String, f64>,
    /// Set when the comparison failed; the pair then ranks last.
    pub error: Option<String>,
}

/// Distances of every (query, target) pair, row-major by query.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreMatrix {
    pub queries: Vec<String>,
    pub query_sources: Vec<String>,
    pub targets: Vec<String>,
    pub target_sources: Vec<String>,
    pub scores: Vec<PairScore>,
}

#[derive(Debug, Clone)]
pub struct RetrievalOptions {
    pub workers: usize,
    /// Separates cache records made under different settings.
    pub config_hash: String,
}

impl Default for RetrievalOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            config_hash: String::new(),
        }
    }
}

/// Compares every query against every target on a pool of
/// `options.workers` threads. Results are ordered by (query, target)
/// regardless of completion order; cached distances are reused.
pub fn score_pairs(
    queries: &[Model],
    targets: &[Model],
    config: &CompareConfig,
    options: &RetrievalOptions,
    mut cache: Option<&mut DistanceCache>,
) -> Result<ScoreMatrix> {
    if queries.is_empty() || targets.is_empty() {
        return Err(Error::Invalid("retrieval needs at least one query and one target".into()));
    }
    let measures = &config.measures;
    let hash = options.config_hash.as_str();
    let nt = targets.len();
    let mut scores: Vec<PairScore> = (0..queries.len() * nt)
        .map(|i| PairScore {
            query: i / nt,
            target: i % nt,
            values: BTreeMap::new(),
            error: None,
        })
        .collect();

    let mut pending = Vec::new();
    for s in &mut scores {
        let (q, t) = (&queries[s.query].id, &targets[s.target].id);
        let cached: Option<BTreeMap<String, f64>> = cache.as_deref().and_then(|c| {
            measures
                .iter()
                .map(|m| c.get(q, t, m, hash).map(|v| (m.clone(), v)))
                .collect()
        });
        match cached {
            Some(values) => s.values = values,
            None => pending.push((s.query, s.target)),
        }
    }
    log::info!(
        "{} of {} pairs to compare ({} cached)",
        pending.len(),
        scores.len(),
        scores.len() - pending.len()
    );

    let next = AtomicUsize::new(0);
    let workers = options.workers.max(1).min(pending.len().max(1));
    let (tx, rx) = mpsc::channel::<(usize, Result<SimilarityReport>)>();
    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, pending) = (&next, &pending);
            scope.spawn(move || loop {
                let job = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(q, t)) = pending.get(job) else { break };
                let report = compare(&queries[q].cloud, &targets[t].cloud, config);
                if tx.send((job, report)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        // single writer: cache records and results are funneled through here
        for (job, report) in rx {
            let (q, t) = pending[job];
            let slot = &mut scores[q * nt + t];
            match report {
                Ok(r) => {
                    for m in measures {
                        if let Some(v) = r.value(m) {
                            slot.values.insert(m.clone(), v);
                            if let Some(c) = cache.as_deref_mut() {
                                c.insert(CacheRecord {
                                    query: queries[q].id.clone(),
                                    target: targets[t].id.clone(),
                                    measure: m.clone(),
                                    config_hash: hash.to_string(),
                                    value: v,
                                })?;
                            }
                        }
                    }
                }
                Err(e) => {
                    log::warn!("comparing {} against {} failed: {e}", queries[q].id, targets[t].id);
                    slot.error = Some(e.to_string());
                }
            }
        }
        Ok(())
    })?;

    Ok(ScoreMatrix {
        queries: queries.iter().map(|m| m.id.clone()).collect(),
        query_sources: queries.iter().map(|m| m.source.clone()).collect(),
        targets: targets.iter().map(|m| m.id.clone()).collect(),
        target_sources: targets.iter().map(|m| m.source.clone()).collect(),
        scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalResult {
    pub k: usize,
    pub measure: String,
    pub rate: f64,
    pub hits: Vec<bool>,
}

impl ScoreMatrix {
    pub fn failed_pairs(&self) -> usize {
        self.scores.iter().filter(|s| s.error.is_some()).count()
    }

    pub fn score(&self, query: usize, target: usize) -> &PairScore {
        &self.scores[query * self.targets.len() + target]
    }

    /// Target indices from most to least similar. Pairs without a value
    /// rank last; ties keep target order.
    pub fn ranking(&self, query: usize, measure: &str) -> Result<Vec<usize>> {
        let polarity = polarity_of(measure)?;
        let value = |t: usize| self.score(query, t).values.get(measure).copied();
        let mut order: Vec<usize> = (0..self.targets.len()).collect();
        order.sort_by(|&a, &b| match (value(a), value(b)) {
            (Some(va), Some(vb)) => match polarity {
                Polarity::HigherIsCopy => vb.total_cmp(&va),
                Polarity::LowerIsCopy => va.total_cmp(&vb),
            },
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        });
        Ok(order)
    }

    /// Whether a target sharing the query's source ranks within the top `k`.
    pub fn hit(&self, query: usize, k: usize, measure: &str) -> Result<bool> {
        Ok(self.ranking(query, measure)?
            .iter()
            .take(k)
            .any(|&t| self.target_sources[t] == self.query_sources[query]))
    }

    /// Fraction of queries with a same-source target among the top `k`.
    /// Each query counts at most once.
    pub fn top_k(&self, k: usize, measure: &str) -> Result<RetrievalResult> {
        if k == 0 || k > self.targets.len() {
            return Err(Error::param(
                "k",
                format!("must lie in 1..={} (number of targets)", self.targets.len()),
            ));
        }
        let hits = (0..self.queries.len())
            .map(|q| self.hit(q, k, measure))
            .collect::<Result<Vec<bool>>>()?;
        let rate = hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64;
        Ok(RetrievalResult {
            k,
            measure: measure.to_string(),
            rate,
            hits,
        })
    }
}

/// Scores all pairs, then the Top-`k` rate for `measure`.
pub fn top_k(
    queries: &[Model],
    targets: &[Model],
    k: usize,
    measure: &str,
    config: &CompareConfig,
    options: &RetrievalOptions,
) -> Result<RetrievalResult> {
    if k == 0 || k > targets.len() {
        return Err(Error::param("k", "must lie in 1..=number of targets"));
    }
    score_pairs(queries, targets, config, options, None)?.top_k(k, measure)
}
