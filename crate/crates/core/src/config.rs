//! Flat `key = value` run configuration.
//!
//! Values are layered: defaults, then a config file, then `PCDETECT_*`
//! environment variables, then command-line flags. Unknown keys are errors.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::Thresholds;
use crate::measures::{measures, MeasureSettings};
use crate::pipeline::CompareConfig;
use crate::registration::RegistrationConfig;
use crate::rpca::RpcaConfig;

pub const ENV_PREFIX: &str = "PCDETECT_";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DownsampleMode {
    None,
    Hem,
    Random,
}

impl DownsampleMode {
    fn as_str(self) -> &'static str {
        match self {
            DownsampleMode::None => "none",
            DownsampleMode::Hem => "hem",
            DownsampleMode::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub omega: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub measures: Vec<String>,
    pub downsample: DownsampleMode,
    pub hem_layers: usize,
    pub hem_factor: f64,
    pub random_rate: f64,
    pub segment_t: Option<usize>,
    pub lr_max_elements: usize,
    pub rpca_lambda: Option<f64>,
    pub rpca_tol: f64,
    pub rpca_max_iters: usize,
    pub t_corr: Option<f64>,
    pub t_lr: Option<f64>,
    pub seed: Option<u64>,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let reg = RegistrationConfig::default();
        let settings = MeasureSettings::default();
        let thresholds = Thresholds::default();
        let cmp = CompareConfig::default();
        Self {
            omega: reg.omega,
            tol: reg.tol,
            max_iters: reg.max_iters,
            measures: cmp.measures,
            downsample: DownsampleMode::None,
            hem_layers: 1,
            hem_factor: 2.0,
            random_rate: 0.5,
            segment_t: settings.segment_t,
            lr_max_elements: settings.lr_max_elements,
            rpca_lambda: settings.rpca.lambda,
            rpca_tol: settings.rpca.tol,
            rpca_max_iters: settings.rpca.max_iters,
            t_corr: thresholds.t_corr,
            t_lr: thresholds.t_lr,
            seed: None,
            workers: 1,
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("omega", "outlier weight in [0, 1)"),
    ("tol", "relative change of the negative log-likelihood that stops EM"),
    ("max_iters", "EM iteration cap"),
    ("measures", "comma-separated subset of lr,kurt,corr"),
    ("downsample", "none | hem | random"),
    ("hem_layers", "HEM levels, each keeping about 1/3 of the points"),
    ("hem_factor", "HEM merge radius factor"),
    ("random_rate", "fraction kept by random downsampling (needs seed)"),
    ("segment_t", "block size for segmented LR, or none"),
    ("lr_max_elements", "unsegmented LR is skipped above this M*N"),
    ("rpca_lambda", "sparse weight, or auto for 1/sqrt(max(m, n))"),
    ("rpca_tol", "IALM relative residual tolerance"),
    ("rpca_max_iters", "IALM iteration cap"),
    ("t_corr", "CORR copy threshold, or none"),
    ("t_lr", "LR copy threshold, or none"),
    ("seed", "seed for stochastic steps, or none"),
    ("workers", "parallel pair comparisons"),
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::param(key, format!("cannot parse `{value}`")))
}

fn optional<T: std::str::FromStr>(key: &str, value: &str, none: &str) -> Result<Option<T>> {
    if value.eq_ignore_ascii_case(none) {
        Ok(None)
    } else {
        num(key, value).map(Some)
    }
}

fn show<T: ToString>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), T::to_string)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "omega" => self.omega = num(key, value)?,
            "tol" => self.tol = num(key, value)?,
            "max_iters" => self.max_iters = num(key, value)?,
            "measures" => {
                self.measures = value
                    .split(',')
                    .map(|s| s.trim().to_ascii_lowercase())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            "downsample" => {
                self.downsample = match value.to_ascii_lowercase().as_str() {
                    "none" => DownsampleMode::None,
                    "hem" => DownsampleMode::Hem,
                    "random" => DownsampleMode::Random,
                    other => return Err(Error::param(key, format!("expected none, hem or random, got `{other}`"))),
                }
            }
            "hem_layers" => self.hem_layers = num(key, value)?,
            "hem_factor" => self.hem_factor = num(key, value)?,
            "random_rate" => self.random_rate = num(key, value)?,
            "segment_t" => self.segment_t = optional(key, value, "none")?,
            "lr_max_elements" => self.lr_max_elements = num(key, value)?,
            "rpca_lambda" => self.rpca_lambda = optional(key, value, "auto")?,
            "rpca_tol" => self.rpca_tol = num(key, value)?,
            "rpca_max_iters" => self.rpca_max_iters = num(key, value)?,
            "t_corr" => self.t_corr = optional(key, value, "none")?,
            "t_lr" => self.t_lr = optional(key, value, "none")?,
            "seed" => self.seed = optional(key, value, "none")?,
            "workers" => self.workers = num(key, value)?,
            _ => {
                return Err(Error::param(
                    key,
                    format!(
                        "unknown key (expected one of: {})",
                        KEYS.iter().map(|(k, _)| *k).collect::<Vec<_>>().join(", ")
                    ),
                ))
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(key.trim(), value).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text).map_err(|e| match e {
            Error::Parse { line, message } => Error::Parse {
                line,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })
    }

    /// Applies every `PCDETECT_<KEY>` variable, e.g. `PCDETECT_OMEGA=0.2`.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut found: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                k.as_ref()
                    .strip_prefix(ENV_PREFIX)
                    .map(|key| (key.to_ascii_lowercase(), v.as_ref().to_string()))
            })
            .collect();
        found.sort();
        for (key, value) in found {
            self.set(&key, &value)
                .map_err(|e| Error::Invalid(format!("{ENV_PREFIX}{}: {e}", key.to_ascii_uppercase())))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.registration().validate()?;
        if self.max_iters == 0 {
            return Err(Error::param("max_iters", "must be at least 1"));
        }
        if self.measures.is_empty() {
            return Err(Error::param("measures", "select at least one measure"));
        }
        let registry = measures();
        for m in &self.measures {
            if !registry.contains(m) {
                return Err(Error::param("measures", format!("unknown measure `{m}`")));
            }
        }
        if self.hem_layers == 0 {
            return Err(Error::param("hem_layers", "must be at least 1"));
        }
        if !(self.hem_factor.is_finite() && self.hem_factor > 0.0) {
            return Err(Error::param("hem_factor", "must be positive"));
        }
        if !(self.random_rate > 0.0 && self.random_rate <= 1.0) {
            return Err(Error::param("random_rate", "must lie in (0, 1]"));
        }
        if self.downsample == DownsampleMode::Random && self.seed.is_none() {
            return Err(Error::param("seed", "random downsampling needs a seed"));
        }
        if matches!(self.segment_t, Some(t) if t < 2) {
            return Err(Error::param("segment_t", "must be at least 2"));
        }
        if matches!(self.rpca_lambda, Some(l) if !(l.is_finite() && l > 0.0)) {
            return Err(Error::param("rpca_lambda", "must be positive"));
        }
        if !(self.rpca_tol > 0.0) {
            return Err(Error::param("rpca_tol", "must be positive"));
        }
        if self.rpca_max_iters == 0 {
            return Err(Error::param("rpca_max_iters", "must be at least 1"));
        }
        for (key, t) in [("t_corr", self.t_corr), ("t_lr", self.t_lr)] {
            if matches!(t, Some(v) if !v.is_finite()) {
                return Err(Error::param(key, "must be finite"));
            }
        }
        if self.workers == 0 {
            return Err(Error::param("workers", "must be at least 1"));
        }
        Ok(())
    }

    /// All keys in declaration order, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, _) in KEYS {
            out.push_str(&format!("{key} = {}\n", self.get(key)));
        }
        out
    }

    fn get(&self, key: &str) -> String {
        match key {
            "omega" => self.omega.to_string(),
            "tol" => self.tol.to_string(),
            "max_iters" => self.max_iters.to_string(),
            "measures" => self.measures.join(","),
            "downsample" => self.downsample.as_str().to_string(),
            "hem_layers" => self.hem_layers.to_string(),
            "hem_factor" => self.hem_factor.to_string(),
            "random_rate" => self.random_rate.to_string(),
            "segment_t" => show(&self.segment_t, "none"),
            "lr_max_elements" => self.lr_max_elements.to_string(),
            "rpca_lambda" => show(&self.rpca_lambda, "auto"),
            "rpca_tol" => self.rpca_tol.to_string(),
            "rpca_max_iters" => self.rpca_max_iters.to_string(),
            "t_corr" => show(&self.t_corr, "none"),
            "t_lr" => show(&self.t_lr, "none"),
            "seed" => show(&self.seed, "none"),
            "workers" => self.workers.to_string(),
            _ => unreachable!("key list and getter disagree on `{key}`"),
        }
    }

    /// SHA-256 of the canonical text, leaving out `workers`, which cannot
    /// change any result.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for line in self.to_text().lines().filter(|l| !l.starts_with("workers ")) {
            hasher.update(line.as_bytes());
            hasher.update(b"\n");
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn registration(&self) -> RegistrationConfig {
        RegistrationConfig {
            omega: self.omega,
            max_iters: self.max_iters,
            tol: self.tol,
        }
    }

    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            t_corr: self.t_corr,
            t_lr: self.t_lr,
        }
    }

    pub fn compare_config(&self) -> Result<CompareConfig> {
        self.validate()?;
        let downsample = match self.downsample {
            DownsampleMode::None => None,
            DownsampleMode::Hem => Some(format!("hem:layers={},factor={}", self.hem_layers, self.hem_factor)),
            DownsampleMode::Random => Some(format!(
                "random:rate={},seed={}",
                self.random_rate,
                self.seed.expect("validated")
            )),
        };
        Ok(CompareConfig {
            registration: self.registration(),
            measures: self.measures.clone(),
            downsample,
            settings: MeasureSettings {
                rpca: RpcaConfig {
                    lambda: self.rpca_lambda,
                    tol: self.rpca_tol,
                    max_iters: self.rpca_max_iters,
                    ..RpcaConfig::default()
                },
                segment_t: self.segment_t,
                lr_max_elements: self.lr_max_elements,
            },
        })
    }
}
