//! Benchmark driver: attacked corpus against its sources, with per-pair
//! distances, Top-K tables and threshold calibration written as CSV.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::attacks::{
    csv_error, generate_homologous_set, table3_specs, AttackSpec, Manifest, ManifestEntry, MANIFEST_FILE,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::{calibrate, score_pairs, DistanceCache, LabeledDistance, Model, RetrievalOptions, ScoreMatrix};
use crate::geometry::PointCloud;
use crate::io::{load, load_dir, Format};
use crate::measures::polarity_of;

/// Fraction of failed pairs above which a run counts as failed.
pub const MAX_FAILURE_RATE: f64 = 0.10;

/// Measures that get a calibrated threshold.
const CALIBRATED: [&str; 2] = ["corr", "lr"];

#[derive(Debug, Clone)]
pub struct Corpus {
    pub sources: Vec<Model>,
    pub queries: Vec<Model>,
    /// Manifest rows, aligned with `queries`.
    pub entries: Vec<ManifestEntry>,
}

/// Writes the Table 3 attack set of every source into `out_dir` and one
/// merged manifest covering all of them.
pub fn generate_corpus(sources: &[PointCloud], out_dir: &Path, seed: u64, format: Format) -> Result<Manifest> {
    if sources.is_empty() {
        return Err(Error::Invalid("no source models".into()));
    }
    let mut merged = Manifest::default();
    for (i, cloud) in sources.iter().enumerate() {
        let specs = table3_specs(seed.wrapping_add(1000 * i as u64), cloud.faces().is_some());
        merged.entries.extend(generate_homologous_set(cloud, &specs, out_dir, format)?.entries);
    }
    merged.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(merged)
}

fn model(cloud: PointCloud, source: &str) -> Model {
    Model {
        id: cloud.name().to_string(),
        source: source.to_string(),
        cloud,
    }
}

/// Sources come from `sources_dir` (named by file stem); queries are the
/// manifest rows, resolved relative to the manifest's directory.
pub fn load_corpus(sources_dir: &Path, manifest_path: &Path) -> Result<Corpus> {
    let manifest = Manifest::read(manifest_path)?;
    if manifest.entries.is_empty() {
        return Err(Error::Invalid(format!("{}: manifest is empty", manifest_path.display())));
    }
    let sources: Vec<Model> = load_dir(sources_dir)?
        .into_iter()
        .map(|c| {
            let name = c.name().to_string();
            model(c, &name)
        })
        .collect();
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut queries = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        if !sources.iter().any(|s| s.id == e.source) {
            return Err(Error::Invalid(format!(
                "manifest source `{}` has no model in {}",
                e.source,
                sources_dir.display()
            )));
        }
        queries.push(model(load(&base.join(&e.file))?, &e.source));
    }
    Ok(Corpus {
        sources,
        queries,
        entries: manifest.entries,
    })
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub config: RunConfig,
    pub ks: Vec<usize>,
    /// Distance cache; `None` keeps distances in memory only.
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOutcome {
    pub pairs: usize,
    pub failed: usize,
    pub files: Vec<PathBuf>,
    /// Top-K rate over all queries, keyed by (measure, k).
    pub overall: BTreeMap<(String, usize), f64>,
}

impl BenchOutcome {
    pub fn failure_rate(&self) -> f64 {
        self.failed as f64 / self.pairs as f64
    }

    pub fn exceeded_failures(&self) -> bool {
        self.failure_rate() > MAX_FAILURE_RATE
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn label(e: &ManifestEntry) -> String {
    AttackSpec {
        kind: e.kind,
        intensity: e.intensity,
        seed: e.seed,
    }
    .label()
}

struct CsvOut<'a> {
    dir: &'a Path,
    files: Vec<PathBuf>,
}

impl CsvOut<'_> {
    fn write(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let path = self.dir.join(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        w.write_record(header).map_err(|e| csv_error(&path, e))?;
        for row in rows {
            w.write_record(row).map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        self.files.push(path);
        Ok(())
    }
}

/// Scores every query against every source and writes:
/// `pairs.csv` (all distances), `table2.csv` (each query against its own
/// source), `table5.csv` (Top-K per attack kind and measure),
/// `calibration_<measure>.csv` and `thresholds.csv`.
pub fn run_bench(corpus: &Corpus, options: &BenchOptions, out_dir: &Path) -> Result<BenchOutcome> {
    let config = &options.config;
    let compare = config.compare_config()?;
    let hash = config.hash();
    if corpus.queries.is_empty() {
        return Err(Error::Invalid("corpus has no queries".into()));
    }
    if options.ks.is_empty() {
        return Err(Error::param("k", "give at least one k"));
    }
    for &k in &options.ks {
        if k == 0 || k > corpus.sources.len() {
            return Err(Error::param(
                "k",
                format!("{k} is outside 1..={} (number of sources)", corpus.sources.len()),
            ));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut cache = match &options.cache {
        Some(path) => DistanceCache::open(path)?,
        None => DistanceCache::in_memory(),
    };
    let retrieval = RetrievalOptions {
        workers: config.workers,
        config_hash: hash.clone(),
    };
    let scores = score_pairs(&corpus.queries, &corpus.sources, &compare, &retrieval, Some(&mut cache))?;
    let measures = &compare.measures;
    let mut out = CsvOut { dir: out_dir, files: Vec::new() };

    write_pairs(&mut out, corpus, &scores, measures, &hash)?;
    let overall = write_top_k(&mut out, corpus, &scores, measures, &options.ks, &hash)?;
    write_calibration(&mut out, &scores, measures, &hash)?;

    let failed = scores.failed_pairs();
    let outcome = BenchOutcome {
        pairs: scores.scores.len(),
        failed,
        files: out.files,
        overall,
    };
    if failed > 0 {
        log::warn!("{failed} of {} pairs failed", outcome.pairs);
    }
    Ok(outcome)
}

fn write_pairs(out: &mut CsvOut, corpus: &Corpus, scores: &ScoreMatrix, measures: &[String], hash: &str) -> Result<()> {
    let mut header = vec!["query", "target", "query_source", "target_source", "attack"];
    header.extend(measures.iter().map(String::as_str));
    header.extend(["error", "config_hash"]);
    let mut pairs = Vec::new();
    let mut own = Vec::new();
    for s in &scores.scores {
        let q = &corpus.queries[s.query];
        let t = &corpus.sources[s.target];
        let mut row = vec![q.id.clone(), t.id.clone(), q.source.clone(), t.source.clone(), label(&corpus.entries[s.query])];
        row.extend(measures.iter().map(|m| fmt(s.values.get(m).copied())));
        row.push(s.error.clone().unwrap_or_default());
        row.push(hash.to_string());
        if q.source == t.source {
            let mut r = vec![q.source.clone(), row[4].clone(), q.id.clone()];
            r.extend_from_slice(&row[5..]);
            own.push(r);
        }
        pairs.push(row);
    }
    out.write("pairs.csv", &header, &pairs)?;
    let mut header2 = vec!["source", "attack", "query"];
    header2.extend(measures.iter().map(String::as_str));
    header2.extend(["error", "config_hash"]);
    out.write("table2.csv", &header2, &own)
}

fn write_top_k(
    out: &mut CsvOut,
    corpus: &Corpus,
    scores: &ScoreMatrix,
    measures: &[String],
    ks: &[usize],
    hash: &str,
) -> Result<BTreeMap<(String, usize), f64>> {
    // attack kinds in first-appearance order, then the overall row
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (q, e) in corpus.entries.iter().enumerate() {
        let code = e.kind.code().to_string();
        match groups.iter_mut().find(|(c, _)| *c == code) {
            Some((_, qs)) => qs.push(q),
            None => groups.push((code, vec![q])),
        }
    }
    groups.push(("ALL".to_string(), (0..corpus.queries.len()).collect()));

    let mut rows = Vec::new();
    let mut overall = BTreeMap::new();
    for (group, qs) in &groups {
        for m in measures {
            for &k in ks {
                let hits = qs
                    .iter()
                    .map(|&q| scores.hit(q, k, m))
                    .collect::<Result<Vec<bool>>>()?;
                let rate = hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64;
                if group == "ALL" {
                    overall.insert((m.clone(), k), rate);
                }
                rows.push(vec![
                    group.clone(),
                    m.clone(),
                    k.to_string(),
                    rate.to_string(),
                    qs.len().to_string(),
                    hash.to_string(),
                ]);
            }
        }
    }
    out.write("table5.csv", &["attack", "measure", "k", "rate", "queries", "config_hash"], &rows)?;
    Ok(overall)
}

fn write_calibration(out: &mut CsvOut, scores: &ScoreMatrix, measures: &[String], hash: &str) -> Result<()> {
    let mut rows = Vec::new();
    for m in CALIBRATED.iter().filter(|m| measures.iter().any(|x| x == *m)) {
        let samples: Vec<LabeledDistance> = scores
            .scores
            .iter()
            .filter_map(|s| {
                s.values.get(*m).map(|&value| LabeledDistance {
                    value,
                    is_copy: scores.query_sources[s.query] == scores.target_sources[s.target],
                    query: scores.queries[s.query].clone(),
                    target: scores.targets[s.target].clone(),
                })
            })
            .collect();
        let curve = match calibrate(&samples, polarity_of(m)?) {
            Ok(c) => c,
            Err(Error::OneClassOnly) => {
                log::warn!("no calibration for {m}: samples are all one class");
                continue;
            }
            Err(e) => return Err(e),
        };
        let path = out.dir.join(format!("calibration_{m}.csv"));
        std::fs::write(&path, curve.to_csv()).map_err(|e| Error::io(&path, e))?;
        out.files.push(path);
        let positives = samples.iter().filter(|s| s.is_copy).count();
        rows.push(vec![
            m.to_string(),
            curve.best_threshold.to_string(),
            curve.best_tpr.to_string(),
            curve.best_fpr.to_string(),
            curve.best_gap.to_string(),
            positives.to_string(),
            (samples.len() - positives).to_string(),
            hash.to_string(),
        ]);
    }
    out.write(
        "thresholds.csv",
        &["measure", "threshold", "tpr", "fpr", "gap", "positives", "negatives", "config_hash"],
        &rows,
    )
}
