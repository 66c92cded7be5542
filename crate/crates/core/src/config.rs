//! Scenario files.
//!
//! Scenarios are TOML documents tagged with `schema = "adle-scenario/1"`.
//! Matrices are nested arrays of rows. A minimal file only names a preset:
//!
//! ```toml
//! schema = "adle-scenario/1"
//!
//! [model]
//! preset = "example1"
//!
//! [run]
//! horizon = 50000
//! num_trials = 500
//! master_seed = 7
//! ```
//!
//! See `README.md` for the full list of keys.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use thiserror::Error;

use crate::harness::{CheckpointGrid, ExperimentConfig, FitWindow, Thresholds};
use crate::model::{NoiseFamily, ObservationModel};
use crate::network::{Graph, LinkLaw, TopologyModel};
use crate::scalar::Scalar;
use crate::schedule::WeightSchedule;

pub const SCHEMA: &str = "adle-scenario/1";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid scenario:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub schema: String,
    pub model: ModelSpec,
    #[serde(default)]
    pub topology: TopologySpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    pub run: RunSpec,
    #[serde(default)]
    pub checkpoints: CheckpointSpec,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub flags: FlagSpec,
    #[serde(default)]
    pub thresholds: ThresholdSpec,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub preset: Option<String>,
    pub sensing: Option<Vec<Vec<Vec<f64>>>>,
    pub noise_cov: Option<Vec<Vec<Vec<f64>>>>,
    pub true_param: Option<Vec<f64>>,
    #[serde(default)]
    pub noise: NoiseFamily,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    /// `"pentagon"` (ring plus chord 0–2), `"ring"`, `"complete"` or `"path"`.
    pub preset: Option<String>,
    pub nodes: Option<usize>,
    pub edges: Option<Vec<(usize, usize)>>,
    pub link_law: Option<LinkLaw>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub a: f64,
    pub b: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub gamma0: f64,
    pub tau_gamma: f64,
    pub eps1: f64,
    /// Replace `b` by `min(b, 1/d_max)` with `d_max` the largest degree a
    /// sampled graph can have.
    pub cap_consensus_weight: bool,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        let d = WeightSchedule::<f64>::default();
        Self {
            a: d.a,
            b: d.b,
            tau1: d.tau1,
            tau2: d.tau2,
            gamma0: d.gamma0,
            tau_gamma: d.tau_gamma,
            eps1: d.eps1,
            cap_consensus_weight: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub horizon: u64,
    pub num_trials: u64,
    #[serde(default)]
    pub master_seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointSpec {
    pub start: u64,
    pub per_decade: f64,
    /// Fraction of late checkpoints used by the agreement rate fit.
    pub window: f64,
}

impl Default for CheckpointSpec {
    fn default() -> Self {
        Self {
            start: 10,
            per_decade: 8.0,
            window: 0.4,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlagSpec {
    pub require_efficiency: bool,
    pub run_ks_test: bool,
    pub parallelism: usize,
}

impl Default for FlagSpec {
    fn default() -> Self {
        Self {
            require_efficiency: true,
            run_ks_test: false,
            parallelism: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSpec {
    pub covariance_gap: Option<f64>,
    pub error_slope: Option<(f64, f64)>,
    pub tau0: Option<f64>,
    pub disagreement_ratio: Option<f64>,
    pub gain_fraction: Option<f64>,
    pub gain_trial_fraction: Option<f64>,
    pub ks_alpha: Option<f64>,
}

/// A parsed and validated scenario.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub file: ScenarioFile,
    pub model: ObservationModel<f64>,
    pub topology: TopologyModel,
    pub schedule: WeightSchedule<f64>,
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, String> {
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(format!("{what}: rows have different lengths"));
    }
    Ok(DMatrix::from_row_iterator(
        rows.len(),
        ncols,
        rows.iter().flatten().copied(),
    ))
}

fn build_model(spec: &ModelSpec) -> Result<ObservationModel<f64>, Vec<String>> {
    let model = match spec.preset.as_deref() {
        Some("example1") => {
            if spec.sensing.is_some() || spec.noise_cov.is_some() {
                return Err(vec![
                    "model: preset \"example1\" cannot be combined with explicit matrices".into(),
                ]);
            }
            let truth = spec
                .true_param
                .clone()
                .unwrap_or_else(|| vec![1.0; 5]);
            ObservationModel::example1(DVector::from_vec(truth)).map_err(|e| vec![format!("model: {e}")])?
        }
        Some(other) => return Err(vec![format!("model: unknown preset \"{other}\"")]),
        None => {
            let mut errs = Vec::new();
            let sensing = spec.sensing.as_ref();
            let cov = spec.noise_cov.as_ref();
            let truth = spec.true_param.as_ref();
            if sensing.is_none() {
                errs.push("model: missing `sensing` (or a preset)".to_string());
            }
            if cov.is_none() {
                errs.push("model: missing `noise_cov`".to_string());
            }
            if truth.is_none() {
                errs.push("model: missing `true_param`".to_string());
            }
            let (Some(sensing), Some(cov), Some(truth)) = (sensing, cov, truth) else {
                return Err(errs);
            };
            let mut hs = Vec::new();
            let mut rs = Vec::new();
            for (n, h) in sensing.iter().enumerate() {
                match matrix(h, &format!("model.sensing[{n}]")) {
                    Ok(m) => hs.push(m),
                    Err(e) => errs.push(e),
                }
            }
            for (n, r) in cov.iter().enumerate() {
                match matrix(r, &format!("model.noise_cov[{n}]")) {
                    Ok(m) => rs.push(m),
                    Err(e) => errs.push(e),
                }
            }
            if !errs.is_empty() {
                return Err(errs);
            }
            ObservationModel::new(hs, rs, DVector::from_vec(truth.clone()))
                .map_err(|e| vec![format!("model: {e}")])?
        }
    };
    Ok(model.with_noise(spec.noise))
}

fn build_graph(spec: &TopologySpec, num_agents: usize) -> Result<Graph, String> {
    if let Some(edges) = &spec.edges {
        let nodes = spec.nodes.unwrap_or(num_agents);
        return Graph::new(nodes, edges).map_err(|e| format!("topology: {e}"));
    }
    let nodes = spec.nodes.unwrap_or(num_agents);
    match spec.preset.as_deref().unwrap_or("pentagon") {
        "pentagon" if nodes == 5 => Ok(Graph::pentagon_with_chord()),
        "pentagon" => Err(format!("topology: preset \"pentagon\" needs 5 nodes, model has {nodes}")),
        "ring" => Ok(Graph::ring(nodes)),
        "complete" => Ok(Graph::complete(nodes)),
        "path" => Ok(Graph::path(nodes)),
        other => Err(format!("topology: unknown preset \"{other}\"")),
    }
}

/// Largest node degree a sampled graph can have under `law`.
fn max_sample_degree(graph: &Graph, law: LinkLaw) -> usize {
    match law {
        LinkLaw::Gossip => 1,
        _ => graph.max_degree(),
    }
}

impl ScenarioFile {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| {
            let (line, column) = e
                .span()
                .map(|s| line_col(text, s.start))
                .unwrap_or((0, 0));
            ConfigError::Parse {
                line,
                column,
                message: e.message().to_string(),
            }
        })
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map(|i| i + 1).unwrap_or(0) + 1;
    (line, column)
}

/// Reads and validates a scenario file, reporting every validation failure.
pub fn parse_config(path: impl AsRef<Path>) -> Result<ScenarioConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ScenarioConfig::from_file(ScenarioFile::from_toml(&text)?)
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Self::from_file(ScenarioFile::from_toml(text)?)
    }

    pub fn from_file(file: ScenarioFile) -> Result<Self, ConfigError> {
        let mut errs = Vec::new();
        if file.schema != SCHEMA {
            errs.push(format!("schema: expected \"{SCHEMA}\", got \"{}\"", file.schema));
        }
        let model = match build_model(&file.model) {
            Ok(m) => Some(m),
            Err(e) => {
                errs.extend(e);
                None
            }
        };
        let num_agents = model.as_ref().map(|m| m.num_agents()).unwrap_or(0);
        let law = file
            .topology
            .link_law
            .unwrap_or(LinkLaw::Bernoulli { p: 0.5 });
        let topology = match build_graph(&file.topology, num_agents) {
            Ok(g) => match TopologyModel::new(g, law) {
                Ok(t) => Some(t),
                Err(e) => {
                    errs.push(format!("topology: {e}"));
                    None
                }
            },
            Err(e) => {
                errs.push(e);
                None
            }
        };
        let s = &file.schedule;
        let mut schedule = WeightSchedule {
            a: s.a,
            b: s.b,
            tau1: s.tau1,
            tau2: s.tau2,
            gamma0: s.gamma0,
            tau_gamma: s.tau_gamma,
            eps1: s.eps1,
        };
        if s.cap_consensus_weight {
            if let Some(t) = &topology {
                let d = max_sample_degree(t.base(), t.law());
                if d > 0 {
                    schedule.b = schedule.b.min(1.0 / d as f64);
                }
            }
        }
        let cp = &file.checkpoints;
        if !(cp.per_decade > 0.0) {
            errs.push("checkpoints.per_decade must be positive".into());
        }
        if !(cp.window > 0.0 && cp.window <= 1.0) {
            errs.push("checkpoints.window must lie in (0, 1]".into());
        }
        let (Some(model), Some(topology)) = (model, topology) else {
            return Err(ConfigError::Validation(errs));
        };
        let cfg = ScenarioConfig {
            file,
            model,
            topology,
            schedule,
        };
        if let Err(v) = cfg.experiment::<f64>().validate() {
            errs.extend(v.into_iter().map(|e| e.to_string()));
        }
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError::Validation(errs))
        }
    }

    /// Builds the experiment in scalar type `T`.
    pub fn experiment<T: Scalar>(&self) -> ExperimentConfig<T> {
        let conv = |m: &DMatrix<f64>| m.map(T::lit);
        let model = ObservationModel::new(
            self.model.sensing().iter().map(conv).collect(),
            self.model.noise_cov().iter().map(conv).collect(),
            self.model.true_param().map(T::lit),
        )
        .expect("dimensions already checked")
        .with_noise(self.model.noise_family());
        let s = &self.schedule;
        let th = &self.file.thresholds;
        let d = Thresholds::default();
        ExperimentConfig {
            model,
            topology: self.topology.clone(),
            schedule: WeightSchedule {
                a: T::lit(s.a),
                b: T::lit(s.b),
                tau1: T::lit(s.tau1),
                tau2: T::lit(s.tau2),
                gamma0: T::lit(s.gamma0),
                tau_gamma: T::lit(s.tau_gamma),
                eps1: T::lit(s.eps1),
            },
            require_efficiency: self.file.flags.require_efficiency,
            horizon: self.file.run.horizon,
            num_trials: self.file.run.num_trials,
            master_seed: self.file.run.master_seed,
            grid: CheckpointGrid {
                start: self.file.checkpoints.start,
                ratio: 10f64.powf(1.0 / self.file.checkpoints.per_decade),
            },
            rate_window: FitWindow::LateFraction(self.file.checkpoints.window),
            thresholds: Thresholds {
                covariance_gap: th.covariance_gap.unwrap_or(d.covariance_gap),
                error_slope: th.error_slope.unwrap_or(d.error_slope),
                tau0: th.tau0.unwrap_or(d.tau0),
                disagreement_ratio: th.disagreement_ratio.unwrap_or(d.disagreement_ratio),
                gain_fraction: th.gain_fraction.unwrap_or(d.gain_fraction),
                gain_trial_fraction: th.gain_trial_fraction.unwrap_or(d.gain_trial_fraction),
                ks_alpha: th.ks_alpha.unwrap_or(d.ks_alpha),
            },
            run_ks_test: self.file.flags.run_ks_test,
            parallelism: self.file.flags.parallelism,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE1: &str = r#"
schema = "adle-scenario/1"
[model]
preset = "example1"
[schedule]
cap_consensus_weight = true
[run]
horizon = 1000
num_trials = 4
master_seed = 3
"#;

    #[test]
    fn example1_preset_expands() {
        let cfg = ScenarioConfig::from_toml(EXAMPLE1).unwrap();
        assert_eq!(cfg.model.num_agents(), 5);
        assert_eq!(cfg.topology.base(), &Graph::pentagon_with_chord());
        assert_eq!(cfg.topology.law(), LinkLaw::Bernoulli { p: 0.5 });
        assert!((cfg.schedule.b - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn schedule_violation_reports_slack() {
        let text = EXAMPLE1.replace(
            "cap_consensus_weight = true",
            "tau2 = 0.6\neps1 = 2.0",
        );
        let err = ScenarioConfig::from_toml(&text).unwrap_err();
        let ConfigError::Validation(v) = err else {
            panic!("expected validation error")
        };
        assert!(v.iter().any(|m| m.contains("1/(2+eps1)") && m.contains("-0.35")), "{v:?}");
    }

    #[test]
    fn all_errors_are_collected() {
        let text = r#"
schema = "adle-scenario/0"
[model]
preset = "nope"
[topology]
link_law = { kind = "bernoulli", p = 2.0 }
[schedule]
tau2 = 0.9
[run]
horizon = 5
num_trials = 0
"#;
        let ConfigError::Validation(v) = ScenarioConfig::from_toml(text).unwrap_err() else {
            panic!()
        };
        assert!(v.len() >= 2, "{v:?}");
        assert!(v.iter().any(|m| m.contains("schema")));
        assert!(v.iter().any(|m| m.contains("preset")));
    }

    #[test]
    fn parse_error_has_position() {
        let err = ScenarioConfig::from_toml("schema = \"adle-scenario/1\"\n[model\n").unwrap_err();
        match err {
            ConfigError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            parse_config("/nonexistent/scenario.toml"),
            Err(ConfigError::Io { .. })
        ));
    }

    #[test]
    fn explicit_model_and_graph() {
        let text = r#"
schema = "adle-scenario/1"
[model]
sensing = [[[1.0, 0.0]], [[0.0, 1.0]]]
noise_cov = [[[2.0]], [[0.5]]]
true_param = [1.0, -1.0]
noise = "laplace"
[topology]
edges = [[0, 1]]
link_law = { kind = "static" }
[run]
horizon = 100
num_trials = 2
"#;
        let cfg = ScenarioConfig::from_toml(text).unwrap();
        assert_eq!(cfg.model.num_agents(), 2);
        assert_eq!(cfg.model.noise_family(), NoiseFamily::Laplace);
        assert_eq!(cfg.topology.law(), LinkLaw::Static);
        let exp = cfg.experiment::<f32>();
        assert_eq!(exp.model.noise_cov()[0][(0, 0)], 2.0f32);
    }

    #[test]
    fn unobservable_model_rejected() {
        let text = r#"
schema = "adle-scenario/1"
[model]
sensing = [[[1.0, 0.0]], [[1.0, 0.0]]]
noise_cov = [[[1.0]], [[1.0]]]
true_param = [1.0, 1.0]
[topology]
edges = [[0, 1]]
[run]
horizon = 100
num_trials = 2
"#;
        let ConfigError::Validation(v) = ScenarioConfig::from_toml(text).unwrap_err() else {
            panic!()
        };
        assert!(v.iter().any(|m| m.contains("globally observable")));
    }
}
