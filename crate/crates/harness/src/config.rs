//! Run configuration: one TOML file per run, with `--set key=value`
//! overrides applied on top of the file and command-line flags on top of
//! both.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use filippov_core::scenarios::{Scenario, SmoothingParams};
use filippov_core::{BranchPolicy, IntegratorConfig};
use serde::{Deserialize, Serialize};

use crate::error::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunKind {
    #[default]
    Orbit,
    BundleGrazing,
    BundleDoubleTangency,
    Ensemble,
    Scan,
    SmoothedOrbit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryFormat {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub format: TrajectoryFormat,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("out"),
            format: TrajectoryFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BundleConfig {
    pub n_tau: usize,
}

impl Default for BundleConfig {
    fn default() -> Self {
        BundleConfig { n_tau: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub n_orbits: usize,
    /// Upper bound on each drawn sticking time.
    pub tau_max: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            n_orbits: 100,
            tau_max: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    pub parameter: String,
    pub lo: f64,
    pub hi: f64,
    #[serde(default = "default_scan_tol")]
    pub tol: f64,
}

fn default_scan_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: String,
    #[serde(default)]
    pub kind: RunKind,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    /// Defaults to the scenario's own starting point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    /// How single orbits continue through non-deterministic points.
    #[serde(default)]
    pub policy: BranchPolicy,
    #[serde(default)]
    pub bundle: BundleConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan: Option<ScanConfig>,
    #[serde(default)]
    pub smoothing: SmoothingParams,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ScenarioConfig {
    /// A config for `scenario` with every other field at its default.
    pub fn new(scenario: &str, kind: RunKind) -> Self {
        ScenarioConfig {
            scenario: scenario.to_string(),
            kind,
            params: BTreeMap::new(),
            initial: None,
            seed: 0,
            integrator: IntegratorConfig::default(),
            policy: BranchPolicy::default(),
            bundle: BundleConfig::default(),
            ensemble: EnsembleConfig::default(),
            scan: None,
            smoothing: SmoothingParams::default(),
            output: OutputConfig::default(),
        }
    }

    /// Parses a config file's text, then applies `key=value` overrides with
    /// dotted keys (`integrator.t_end=20`, `params.mu=1.5`).
    pub fn parse(text: &str, sets: &[String]) -> Result<Self, HarnessError> {
        if sets.is_empty() {
            return toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()));
        }
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        for s in sets {
            apply_set(&mut table, s)?;
        }
        ScenarioConfig::deserialize(toml::Value::Table(table))
            .map_err(|e| HarnessError::Config(format!("after --set overrides: {e}")))
    }

    pub fn load(path: &Path, sets: &[String]) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, sets)
            .map_err(|e| HarnessError::Config(format!("{}: {}", path.display(), e.message())))
    }

    /// Resolves the scenario with parameter overrides applied.
    pub fn build_scenario(&self) -> Result<Scenario, HarnessError> {
        Scenario::from_name(&self.scenario, &self.params)
            .map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Fills in every default that depends on the scenario, so the echoed
    /// config fully determines the run.
    pub fn resolved(&self) -> Result<Self, HarnessError> {
        let scenario = self.build_scenario()?;
        let mut out = self.clone();
        out.params = scenario.params();
        let initial = self
            .initial
            .clone()
            .unwrap_or_else(|| scenario.default_initial());
        let dim = scenario
            .system()
            .map_err(|e| HarnessError::Config(e.to_string()))?
            .dim();
        if initial.len() != dim {
            return Err(HarnessError::Config(format!(
                "initial condition has {} components, scenario '{}' has dimension {dim}",
                initial.len(),
                self.scenario
            )));
        }
        out.initial = Some(initial);
        out.integrator
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if matches!(self.kind, RunKind::Scan) && self.scan.is_none() {
            return Err(HarnessError::Config(
                "run kind 'scan' needs a [scan] section".into(),
            ));
        }
        Ok(out)
    }
}

/// Applies one `dotted.key=value` override. The value is read as a TOML
/// literal when possible and as a bare string otherwise.
pub fn apply_set(table: &mut toml::Table, assignment: &str) -> Result<(), HarnessError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("--set '{assignment}': expected key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(HarnessError::Config(format!(
            "--set '{assignment}': empty key"
        )));
    }
    let value = parse_value(raw);
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut node = table;
    for part in parts {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| {
            HarnessError::Config(format!("--set '{assignment}': '{part}' is not a table"))
        })?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("parsed key is present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sets_override_file_values() {
        let text = "scenario = \"resonator\"\n[integrator]\nt_end = 10.0\n";
        let sets = vec![
            "integrator.t_end=20".to_string(),
            "params.mu=1.5".to_string(),
            "kind=ensemble".to_string(),
        ];
        let c = ScenarioConfig::parse(text, &sets).unwrap();
        assert_eq!(c.integrator.t_end, 20.0);
        assert_eq!(c.params["mu"], 1.5);
        assert_eq!(c.kind, RunKind::Ensemble);
    }

    #[test]
    fn unknown_keys_are_rejected_with_context() {
        let err = ScenarioConfig::parse(
            "scenario = \"dbfold\"\n\n[integrator]\nrel_tl = 1e-8\n",
            &[],
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("rel_tl") && err.contains("line 4"), "{err}");
        let err = ScenarioConfig::parse("scenario = \"dbfold\"\n", &["integrator.foo=1".into()])
            .unwrap_err()
            .to_string();
        assert!(err.contains("foo"), "{err}");
        assert!(ScenarioConfig::parse("scenario = \"dbfold\"\n", &["noequals".into()]).is_err());
    }

    #[test]
    fn resolution_fills_parameters_and_initial_point() {
        let c = ScenarioConfig::new("mech", RunKind::Orbit)
            .resolved()
            .unwrap();
        assert_eq!(c.initial, Some(vec![0.5, 0.0, 0.1]));
        assert_eq!(c.params["r1"], 12.0);
        let mut bad = ScenarioConfig::new("dbfold", RunKind::Orbit);
        bad.initial = Some(vec![1.0]);
        assert!(bad.resolved().is_err());
        bad.initial = None;
        bad.params.insert("mu".into(), 1.0);
        assert!(bad.resolved().is_err());
    }

    #[test]
    fn policies_parse_from_tables() {
        let c = ScenarioConfig::parse(
            "scenario = \"dbfold\"\n[policy]\nmode = \"deterministic\"\nbranch = \"plus\"\ntau = 0.5\n",
            &[],
        )
        .unwrap();
        assert!(matches!(c.policy, BranchPolicy::Deterministic { tau, .. } if tau == 0.5));
    }
}
