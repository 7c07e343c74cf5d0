//! End-to-end comparison of a suspect cloud against a reference.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::acceleration::{builtin_downsamplers, Downsampler};
use crate::error::{Error, Result};
use crate::geometry::{rearrange, PointCloud};
use crate::measures::{builtin_measures, Measure, MeasureContext, MeasureSettings, DEFAULT_MEASURES};
use crate::registration::{
    e_step, register_rigid, GmmState, RegistrationConfig, RigidTransform, TransformSummary,
};
use crate::registry::Registry;

#[derive(Debug, Clone, PartialEq)]
pub struct CompareConfig {
    pub registration: RegistrationConfig,
    /// Registered measure names, computed in this order.
    pub measures: Vec<String>,
    /// Downsampler spec applied to both clouds, e.g. `hem:layers=2`.
    pub downsample: Option<String>,
    pub settings: MeasureSettings,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            registration: RegistrationConfig::default(),
            measures: DEFAULT_MEASURES.iter().map(|s| s.to_string()).collect(),
            downsample: None,
            settings: MeasureSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationSummary {
    pub iterations: usize,
    pub converged: bool,
    pub sigma2: f64,
    pub omega: f64,
    pub neg_log_likelihood: f64,
    pub transform: TransformSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub suspect: String,
    pub reference: String,
    /// Point counts after any downsampling.
    pub n_suspect: usize,
    pub n_reference: usize,
    pub lr: Option<f64>,
    pub kurt: Option<f64>,
    pub corr: Option<f64>,
    pub registration: RegistrationSummary,
    /// Acceleration steps that ran, e.g. `downsample:hem:factor=2,layers=3`.
    pub strategies: Vec<String>,
    /// Measures that were requested but not computed, with the reason.
    pub skipped: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    /// Wall time per stage in seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<BTreeMap<String, f64>>,
}

impl SimilarityReport {
    pub fn value(&self, measure: &str) -> Option<f64> {
        match measure {
            "lr" => self.lr,
            "kurt" => self.kurt,
            "corr" => self.corr,
            _ => None,
        }
    }

    fn set_value(&mut self, measure: &str, value: f64) {
        match measure {
            "lr" => self.lr = Some(value),
            "kurt" => self.kurt = Some(value),
            "corr" => self.corr = Some(value),
            _ => {}
        }
    }

    /// One JSON line. Wall times are dropped unless `with_timings`, so that
    /// reruns serialize identically.
    pub fn to_json_line(&self, with_timings: bool) -> String {
        let mut copy = self.clone();
        if !with_timings {
            copy.timings = None;
        }
        serde_json::to_string(&copy).expect("report serializes")
    }
}

/// Strategy registries consulted by [`Pipeline::compare`].
pub struct Pipeline {
    pub measures: Registry<dyn Measure>,
    pub downsamplers: Registry<dyn Downsampler>,
}

impl Default for Pipeline {
    fn default() -> Self {
        Self {
            measures: builtin_measures(),
            downsamplers: builtin_downsamplers(),
        }
    }
}

impl Pipeline {
    /// Downsample, register `y` onto `x`, rearrange both lexicographically,
    /// rebuild the posterior on that order and compute the measures.
    pub fn compare(&self, x: &PointCloud, y: &PointCloud, config: &CompareConfig) -> Result<SimilarityReport> {
        config.registration.validate()?;
        let measures = config
            .measures
            .iter()
            .map(|name| self.measures.create_from_spec(name))
            .collect::<Result<Vec<_>>>()?;
        if measures.is_empty() {
            return Err(Error::NoMeasures);
        }
        let mut timings = BTreeMap::new();
        let mut strategies = Vec::new();
        let start = Instant::now();

        let (x, y) = match &config.downsample {
            Some(spec) => {
                let d = self.downsamplers.create_from_spec(spec)?;
                let t = Instant::now();
                let pair = (d.downsample(x)?, d.downsample(y)?);
                timings.insert("downsample".to_string(), t.elapsed().as_secs_f64());
                strategies.push(format!("downsample:{}", d.describe()));
                pair
            }
            None => (x.clone(), y.clone()),
        };

        let t = Instant::now();
        let reg = register_rigid(&x, &y, &config.registration)?;
        timings.insert("registration".to_string(), t.elapsed().as_secs_f64());
        if !reg.converged {
            log::warn!(
                "registration of {} onto {} stopped at max_iters={}",
                y.name(),
                x.name(),
                config.registration.max_iters
            );
        }
        let state = reg.state.clone();
        let registration = RegistrationSummary {
            iterations: state.iteration,
            converged: reg.converged,
            sigma2: state.sigma2,
            omega: state.omega,
            neg_log_likelihood: state.neg_log_likelihood,
            transform: TransformSummary::from(&reg.transform),
        };
        drop(reg);

        let t = Instant::now();
        let xr = rearrange(&x);
        let yr = rearrange(&state.transform.apply_cloud(&y));
        let p = e_step(&xr, &yr, &state)?;
        timings.insert("posterior".to_string(), t.elapsed().as_secs_f64());

        let mut report = SimilarityReport {
            suspect: x.name().to_string(),
            reference: y.name().to_string(),
            n_suspect: x.len(),
            n_reference: y.len(),
            lr: None,
            kurt: None,
            corr: None,
            registration,
            strategies,
            skipped: BTreeMap::new(),
            config_hash: None,
            timings: None,
        };
        // the posterior is evaluated on already transformed points
        let local = GmmState::new(state.sigma2, state.omega, RigidTransform::identity());
        let ctx = MeasureContext {
            x: &xr,
            y: &yr,
            probability: &p,
            state: &local,
            settings: &config.settings,
        };
        for measure in &measures {
            let t = Instant::now();
            match measure.compute(&ctx) {
                Ok(m) => {
                    report.set_value(measure.name(), m.value);
                    report.strategies.extend(m.notes);
                }
                Err(Error::MeasureSkipped { measure, reason }) => {
                    log::info!("{measure} skipped: {reason}");
                    report.skipped.insert(measure.to_string(), reason);
                }
                Err(e) => return Err(e),
            }
            timings.insert(measure.name().to_string(), t.elapsed().as_secs_f64());
        }
        timings.insert("total".to_string(), start.elapsed().as_secs_f64());
        report.timings = Some(timings);
        Ok(report)
    }
}

fn builtin() -> &'static Pipeline {
    static PIPELINE: OnceLock<Pipeline> = OnceLock::new();
    PIPELINE.get_or_init(Pipeline::default)
}

/// [`Pipeline::compare`] with the built-in strategies. `x` is the suspect,
/// `y` the reference that gets moved onto it.
pub fn compare(x: &PointCloud, y: &PointCloud, config: &CompareConfig) -> Result<SimilarityReport> {
    builtin().compare(x, y, config)
}
