use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::Args;
use serde::Serialize;

use pcdetect::attacks::{generate_homologous_set, AttackSpec, Manifest, MANIFEST_FILE};
use pcdetect::bench::{generate_corpus, load_corpus, run_bench, BenchOptions};
use pcdetect::evaluation::{
    calibrate as sweep, classify, score_pairs, Classification, DistanceCache, LabeledDistance, Model,
    RetrievalOptions, Verdict,
};
use pcdetect::io::{load, load_dir, Format};
use pcdetect::measures::polarity_of;
use pcdetect::pipeline::{compare as run_compare, SimilarityReport};
use pcdetect::Error;

use crate::ConfigArgs;

fn parse_format(s: &str) -> Result<Format, String> {
    Format::from_path(Path::new(&format!("x.{s}"))).map_err(|e| e.to_string())
}

#[derive(Args)]
pub struct CompareArgs {
    /// Reference model (moved onto the suspect).
    reference: PathBuf,
    /// Suspected copy.
    suspect: PathBuf,
    /// Also write the report line to this file.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Include per-stage wall times in the report.
    #[arg(long)]
    timings: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Serialize)]
struct CompareRecord<'a> {
    #[serde(flatten)]
    report: &'a SimilarityReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    classification: Option<Classification>,
}

pub fn compare(args: &CompareArgs) -> anyhow::Result<ExitCode> {
    let config = args.config.resolve()?;
    let reference = load(&args.reference)?;
    let suspect = load(&args.suspect)?;
    let mut report = run_compare(&suspect, &reference, &config.compare_config()?)?;
    report.config_hash = Some(config.hash());
    if !args.timings {
        report.timings = None;
    }
    let classification = match classify(&report, &config.thresholds()) {
        Ok(c) => Some(c),
        Err(Error::NoMeasures) => {
            log::info!("no thresholded measure available, reporting distances only");
            None
        }
        Err(e) => return Err(e.into()),
    };
    let code = match classification.as_ref().map(|c| c.verdict) {
        Some(Verdict::NotCopy) => 1,
        _ => 0,
    };
    let line = serde_json::to_string(&CompareRecord {
        report: &report,
        classification,
    })?;
    println!("{line}");
    if let Some(path) = &args.output {
        std::fs::write(path, format!("{line}\n")).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::from(code))
}

#[derive(Args)]
pub struct AttackArgs {
    /// Source models.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Output directory for attacked copies and manifest.csv.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated `kind:intensity` list, e.g. `noise:0.5,crop:0.1,reorder`.
    /// Without it the full benchmark set is generated.
    #[arg(long)]
    attacks: Option<String>,
    /// Base seed; every stochastic attack derives its own from it.
    #[arg(long, required = true)]
    seed: u64,
    /// Output format (ply, obj, xyz).
    #[arg(long, default_value = "ply", value_parser = parse_format)]
    format: Format,
}

pub fn attack(args: &AttackArgs) -> anyhow::Result<ExitCode> {
    let sources = args.inputs.iter().map(|p| load(p)).collect::<Result<Vec<_>, _>>()?;
    let manifest = match &args.attacks {
        None => generate_corpus(&sources, &args.out, args.seed, args.format)?,
        Some(list) => {
            let specs = list
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .enumerate()
                .map(|(i, s)| AttackSpec::parse(s, args.seed.wrapping_add(i as u64)))
                .collect::<Result<Vec<_>, _>>()?;
            let mut merged = Manifest::default();
            for cloud in &sources {
                merged
                    .entries
                    .extend(generate_homologous_set(cloud, &specs, &args.out, args.format)?.entries);
            }
            merged.write(&args.out.join(MANIFEST_FILE))?;
            merged
        }
    };
    eprintln!(
        "wrote {} attacked models and {}",
        manifest.entries.len(),
        args.out.join(MANIFEST_FILE).display()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
pub struct CalibrateArgs {
    /// Reports of copy pairs: a `compare --output` file or a directory of them.
    #[arg(long)]
    positives: PathBuf,
    /// Reports of unrelated pairs.
    #[arg(long)]
    negatives: PathBuf,
    /// corr or lr.
    #[arg(long, default_value = "corr")]
    measure: String,
    /// Write the threshold,tpr,fpr sweep here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn report_files(path: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    files.retain(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("json" | "jsonl")));
    files.sort();
    Ok(files)
}

fn read_samples(path: &Path, measure: &str, is_copy: bool) -> anyhow::Result<Vec<LabeledDistance>> {
    let mut out = Vec::new();
    for file in report_files(path)? {
        let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let report: SimilarityReport =
                serde_json::from_str(line).with_context(|| format!("{}:{}", file.display(), i + 1))?;
            match report.value(measure) {
                Some(value) => out.push(LabeledDistance {
                    value,
                    is_copy,
                    query: report.suspect,
                    target: report.reference,
                }),
                None => log::warn!("{}:{}: report has no {measure}", file.display(), i + 1),
            }
        }
    }
    Ok(out)
}

pub fn calibrate(args: &CalibrateArgs) -> anyhow::Result<ExitCode> {
    let measure = args.measure.to_ascii_lowercase();
    if measure != "corr" && measure != "lr" {
        bail!("calibration is defined for corr and lr, not `{measure}`");
    }
    let mut samples = read_samples(&args.positives, &measure, true)?;
    samples.extend(read_samples(&args.negatives, &measure, false)?);
    let curve = sweep(&samples, polarity_of(&measure)?)?;
    match &args.out {
        Some(path) => std::fs::write(path, curve.to_csv()).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{}", curve.to_csv()),
    }
    eprintln!(
        "best {measure} threshold {} (tpr {}, fpr {}, gap {})",
        curve.best_threshold, curve.best_tpr, curve.best_fpr, curve.best_gap
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
pub struct RetrieveArgs {
    /// Directory of query models.
    #[arg(long)]
    queries: PathBuf,
    /// Directory of target models; each target is its own source.
    #[arg(long)]
    targets: PathBuf,
    /// Maps query files to sources; defaults to `manifest.csv` in the query
    /// directory, else every query is its own source.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Comma-separated K values.
    #[arg(long, default_value = "1", value_delimiter = ',')]
    k: Vec<usize>,
    /// Ranking measure (must be among the configured measures).
    #[arg(long, default_value = "corr")]
    measure: String,
    /// Append-only distance cache for resuming.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Write rankings.csv and topk.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn retrieve(args: &RetrieveArgs) -> anyhow::Result<ExitCode> {
    let config = args.config.resolve()?;
    let measure = args.measure.to_ascii_lowercase();
    if !config.measures.contains(&measure) {
        bail!("measure `{measure}` is not among the configured measures {:?}", config.measures);
    }
    let ks: Vec<usize> = args.k.clone();
    let manifest_path = args
        .manifest
        .clone()
        .or_else(|| Some(args.queries.join(MANIFEST_FILE)).filter(|p| p.is_file()));
    let manifest = manifest_path.as_deref().map(Manifest::read).transpose()?;
    let queries: Vec<Model> = load_dir(&args.queries)?
        .into_iter()
        .map(|cloud| {
            let id = cloud.name().to_string();
            let source = manifest
                .as_ref()
                .and_then(|m| m.source_of(&id))
                .unwrap_or(&id)
                .to_string();
            Model { id, source, cloud }
        })
        .collect();
    let targets: Vec<Model> = load_dir(&args.targets)?
        .into_iter()
        .map(|cloud| Model {
            id: cloud.name().to_string(),
            source: cloud.name().to_string(),
            cloud,
        })
        .collect();
    if queries.is_empty() || targets.is_empty() {
        bail!("no models found in the query or target directory");
    }
    for &k in &ks {
        if k == 0 || k > targets.len() {
            bail!("k = {k} is outside 1..={} (number of targets)", targets.len());
        }
    }
    let hash = config.hash();
    let mut cache = match &args.cache {
        Some(p) => DistanceCache::open(p)?,
        None => DistanceCache::in_memory(),
    };
    let options = RetrievalOptions {
        workers: config.workers,
        config_hash: hash.clone(),
    };
    let scores = score_pairs(&queries, &targets, &config.compare_config()?, &options, Some(&mut cache))?;
    if scores.failed_pairs() > 0 {
        log::warn!("{} of {} pairs failed and rank last", scores.failed_pairs(), scores.scores.len());
    }

    let mut rates = Vec::new();
    for &k in &ks {
        let r = scores.top_k(k, &measure)?;
        rates.push(vec![
            measure.clone(),
            k.to_string(),
            r.rate.to_string(),
            queries.len().to_string(),
            hash.clone(),
        ]);
    }
    let header = ["measure", "k", "rate", "queries", "config_hash"];
    let mut stdout = csv::Writer::from_writer(std::io::stdout().lock());
    stdout.write_record(header)?;
    for r in &rates {
        stdout.write_record(r)?;
    }
    stdout.flush()?;

    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let mut rankings = Vec::new();
        for q in 0..queries.len() {
            for (rank, t) in scores.ranking(q, &measure)?.into_iter().enumerate() {
                let s = scores.score(q, t);
                rankings.push(vec![
                    queries[q].id.clone(),
                    (rank + 1).to_string(),
                    targets[t].id.clone(),
                    s.values.get(&measure).map(|v| v.to_string()).unwrap_or_default(),
                    (queries[q].source == targets[t].source).to_string(),
                    s.error.clone().unwrap_or_default(),
                ]);
            }
        }
        write_csv(
            &out.join("rankings.csv"),
            &["query", "rank", "target", &measure, "homologous", "error"],
            &rankings,
        )?;
        write_csv(&out.join("topk.csv"), &header, &rates)?;
    }
    std::io::stdout().flush()?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
pub struct BenchArgs {
    /// Directory of source models.
    #[arg(long)]
    sources: PathBuf,
    /// Existing attacked corpus manifest.
    #[arg(long, conflicts_with = "generate", required_unless_present = "generate")]
    manifest: Option<PathBuf>,
    /// Generate the benchmark attack set into this directory first (needs --seed).
    #[arg(long)]
    generate: Option<PathBuf>,
    /// Directory for the report CSVs.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated K values.
    #[arg(long, default_value = "1", value_delimiter = ',')]
    k: Vec<usize>,
    /// Distance cache; defaults to `cache.jsonl` in the output directory.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

pub fn bench(args: &BenchArgs) -> anyhow::Result<ExitCode> {
    let config = args.config.resolve()?;
    let manifest = match (&args.manifest, &args.generate) {
        (Some(m), _) => m.clone(),
        (None, Some(dir)) => {
            let seed = config
                .seed
                .context("--generate needs a seed (--seed or `seed` in the config)")?;
            let sources = load_dir(&args.sources)?;
            generate_corpus(&sources, dir, seed, Format::Ply)?;
            dir.join(MANIFEST_FILE)
        }
        (None, None) => unreachable!("clap requires one of --manifest and --generate"),
    };
    let corpus = load_corpus(&args.sources, &manifest)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let options = BenchOptions {
        ks: args.k.clone(),
        cache: Some(args.cache.clone().unwrap_or_else(|| args.out.join("cache.jsonl"))),
        config,
    };
    let outcome = run_bench(&corpus, &options, &args.out)?;
    for f in &outcome.files {
        eprintln!("wrote {}", f.display());
    }
    if outcome.exceeded_failures() {
        eprintln!(
            "error: {} of {} pairs failed (limit {:.0}%)",
            outcome.failed,
            outcome.pairs,
            100.0 * pcdetect::bench::MAX_FAILURE_RATE
        );
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}
