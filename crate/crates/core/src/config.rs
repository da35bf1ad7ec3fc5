//! On-disk formats: feeder, partition and scenario files (TOML).
//!
//! Every key carries its unit in its name (`_w`, `_var`, `_v`, `_pu`, `_a`,
//! `_ohm`, `_s`). Unknown keys are rejected so that typos surface as errors
//! instead of silently falling back to defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::presets;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Feeder file
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FeederFile {
    #[serde(default)]
    pub name: String,
    pub buses: Vec<BusEntry>,
    pub lines: Vec<LineEntry>,
    #[serde(default)]
    pub loads: Vec<LoadEntry>,
    pub slack: SlackEntry,
    #[serde(default)]
    pub ders: Vec<DerSiteEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BusEntry {
    pub id: String,
    /// Phase letters, e.g. `"abc"` or `"b"`.
    pub phases: String,
    /// Phase-to-neutral base voltage.
    pub base_voltage_v: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LineEntry {
    pub id: String,
    pub from: String,
    pub to: String,
    /// Defaults to the phases of the receiving bus.
    #[serde(default)]
    pub phases: Option<String>,
    /// Full series resistance matrix (rows/columns follow `phases`).
    #[serde(default)]
    pub r_ohm: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub x_ohm: Option<Vec<Vec<f64>>>,
    /// Shorthand: self impedance `[r, x]` on the diagonal ...
    #[serde(default)]
    pub z_self_ohm: Option<[f64; 2]>,
    /// ... and mutual impedance `[r, x]` off the diagonal.
    #[serde(default)]
    pub z_mutual_ohm: Option<[f64; 2]>,
    pub ampacity_a: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LoadEntry {
    pub bus: String,
    /// Defaults to all phases of the bus; power is split equally.
    #[serde(default)]
    pub phases: Option<String>,
    pub p_w: f64,
    #[serde(default)]
    pub q_var: Option<f64>,
    /// Lagging power factor; used when `q_var` is absent.
    #[serde(default)]
    pub pf: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SlackEntry {
    pub bus: String,
    /// Balanced source magnitude (pu of the bus base); angles 0/-120/+120 deg.
    #[serde(default)]
    pub voltage_pu: Option<f64>,
    /// Explicit per-phase `[magnitude_v, angle_deg]`, one per bus phase.
    #[serde(default)]
    pub voltages_v: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DerSiteEntry {
    pub id: String,
    pub bus: String,
    #[serde(default)]
    pub phases: Option<String>,
}

// ---------------------------------------------------------------------------
// Partition file
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PartitionFile {
    pub areas: Vec<AreaEntry>,
    #[serde(default)]
    pub der_defaults: DerParams,
    #[serde(default)]
    pub der_params: Vec<DerParamEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AreaEntry {
    pub id: String,
    #[serde(default)]
    pub parent: Option<String>,
    pub interface_bus: String,
    #[serde(default)]
    pub ders: Vec<String>,
    #[serde(default)]
    pub monitored_buses: Vec<String>,
    #[serde(default)]
    pub monitored_lines: Vec<String>,
    /// Tracking switch `s_i`.
    #[serde(default = "default_true")]
    pub tracking: bool,
}

fn default_true() -> bool {
    true
}

/// Quadratic cost curvature: either a diagonal `[c_p, c_q]` or a full 2x2
/// matrix (accepted only when it is diagonal).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum CostCurvature {
    Diagonal([f64; 2]),
    Matrix([[f64; 2]; 2]),
}

impl CostCurvature {
    pub fn diagonal(&self) -> Result<[f64; 2]> {
        match self {
            CostCurvature::Diagonal(d) => Ok(*d),
            CostCurvature::Matrix(m) => {
                if m[0][1] != 0.0 || m[1][0] != 0.0 {
                    Err(Error::Unsupported(
                        "non-diagonal quadratic DER cost".to_string(),
                    ))
                } else {
                    Ok([m[0][0], m[1][1]])
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DerParams {
    #[serde(default = "DerParams::default_tau")]
    pub tau_s: f64,
    #[serde(default = "DerParams::default_c2")]
    pub cost_c2: CostCurvature,
    #[serde(default)]
    pub cost_c1: [f64; 2],
    #[serde(default = "DerParams::default_min")]
    pub p_min_w: f64,
    #[serde(default = "DerParams::default_max")]
    pub p_max_w: f64,
    #[serde(default = "DerParams::default_min")]
    pub q_min_var: f64,
    #[serde(default = "DerParams::default_max")]
    pub q_max_var: f64,
}

impl DerParams {
    fn default_tau() -> f64 {
        0.2
    }
    fn default_c2() -> CostCurvature {
        CostCurvature::Diagonal([20.0, 20.0])
    }
    fn default_min() -> f64 {
        -1.0e6
    }
    fn default_max() -> f64 {
        1.0e6
    }
}

impl Default for DerParams {
    fn default() -> Self {
        DerParams {
            tau_s: Self::default_tau(),
            cost_c2: Self::default_c2(),
            cost_c1: [0.0, 0.0],
            p_min_w: Self::default_min(),
            p_max_w: Self::default_max(),
            q_min_var: Self::default_min(),
            q_max_var: Self::default_max(),
        }
    }
}

/// Per-DER override of the partition-wide defaults.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct DerParamEntry {
    pub id: String,
    #[serde(default)]
    pub tau_s: Option<f64>,
    #[serde(default)]
    pub cost_c2: Option<CostCurvature>,
    #[serde(default)]
    pub cost_c1: Option<[f64; 2]>,
    #[serde(default)]
    pub p_min_w: Option<f64>,
    #[serde(default)]
    pub p_max_w: Option<f64>,
    #[serde(default)]
    pub q_min_var: Option<f64>,
    #[serde(default)]
    pub q_max_var: Option<f64>,
}

impl PartitionFile {
    /// Resolved parameters of one physical DER.
    pub fn params_for(&self, der_id: &str) -> DerParams {
        let mut p = self.der_defaults.clone();
        if let Some(o) = self.der_params.iter().find(|o| o.id == der_id) {
            if let Some(v) = o.tau_s {
                p.tau_s = v;
            }
            if let Some(v) = &o.cost_c2 {
                p.cost_c2 = v.clone();
            }
            if let Some(v) = o.cost_c1 {
                p.cost_c1 = v;
            }
            if let Some(v) = o.p_min_w {
                p.p_min_w = v;
            }
            if let Some(v) = o.p_max_w {
                p.p_max_w = v;
            }
            if let Some(v) = o.q_min_var {
                p.q_min_var = v;
            }
            if let Some(v) = o.q_max_var {
                p.q_max_var = v;
            }
        }
        p
    }
}

// ---------------------------------------------------------------------------
// Scenario file
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
pub enum PlantMode {
    #[default]
    Nonlinear,
    Linear,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
pub enum PidScope {
    /// PD-augmented duals drive every set-point.
    #[default]
    All,
    /// PD-augmented duals drive only VDER set-points.
    Vder,
}

/// Controller keys; every field optional so files can layer overrides.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct ControllerOverrides {
    pub alpha: Option<f64>,
    pub r_primal: Option<f64>,
    pub r_dual: Option<f64>,
    pub e_p_w: Option<f64>,
    pub e_q_var: Option<f64>,
    pub v_max_pu: Option<f64>,
    pub v_min_pu: Option<f64>,
    pub a_lambda: Option<f64>,
    pub a_mu: Option<f64>,
    pub a_eta: Option<f64>,
    pub a_psi: Option<f64>,
    pub a_gamma: Option<f64>,
    pub a_nu: Option<f64>,
    pub a_zeta: Option<f64>,
    pub c_lambda: Option<f64>,
    pub c_mu: Option<f64>,
    pub c_eta: Option<f64>,
    pub c_psi: Option<f64>,
    pub c_gamma: Option<f64>,
    pub c_nu: Option<f64>,
    pub c_zeta: Option<f64>,
    pub kp_lambda: Option<f64>,
    pub kp_mu: Option<f64>,
    pub kp_eta: Option<f64>,
    pub kp_psi: Option<f64>,
    pub kp_gamma: Option<f64>,
    pub kp_nu: Option<f64>,
    pub kp_zeta: Option<f64>,
    pub kd_lambda: Option<f64>,
    pub kd_mu: Option<f64>,
    pub kd_eta: Option<f64>,
    pub kd_psi: Option<f64>,
    pub kd_gamma: Option<f64>,
    pub kd_nu: Option<f64>,
    pub kd_zeta: Option<f64>,
    pub pid_scope: Option<PidScope>,
    pub lpf_tau_s: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ReferenceStep {
    pub time_s: f64,
    #[serde(default)]
    pub dp_w: f64,
    #[serde(default)]
    pub dq_var: f64,
}

/// `count` increments of `step_w` every `interval_s`, the first at `start_s`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ReferenceRamp {
    pub start_s: f64,
    pub interval_s: f64,
    pub count: usize,
    pub step_w: f64,
    #[serde(default)]
    pub step_var: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceEntry {
    pub on_s: f64,
    #[serde(default)]
    pub off_s: Option<f64>,
    pub bus: String,
    pub p_w: f64,
    #[serde(default = "DisturbanceEntry::default_pf")]
    pub pf: f64,
}

impl DisturbanceEntry {
    fn default_pf() -> f64 {
        1.0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct LimitOverride {
    #[serde(default)]
    pub bus: Option<String>,
    #[serde(default)]
    pub v_max_pu: Option<f64>,
    #[serde(default)]
    pub v_min_pu: Option<f64>,
    #[serde(default)]
    pub line: Option<String>,
    #[serde(default)]
    pub current_limit_a: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub feeder: String,
    pub partition: String,
    #[serde(default)]
    pub plant: PlantMode,
    #[serde(default = "ScenarioFile::default_ts")]
    pub sample_period_s: f64,
    #[serde(default = "ScenarioFile::default_dt")]
    pub plant_step_s: f64,
    pub duration_s: f64,
    #[serde(default)]
    pub comm_delay_ticks: usize,
    #[serde(default = "ScenarioFile::default_eps")]
    pub linearization_step_w: f64,
    #[serde(default)]
    pub sensitivities_file: Option<String>,
    #[serde(default)]
    pub controller: ControllerOverrides,
    #[serde(default)]
    pub controller_area: BTreeMap<String, ControllerOverrides>,
    #[serde(default)]
    pub reference: Vec<ReferenceStep>,
    #[serde(default)]
    pub reference_ramp: Vec<ReferenceRamp>,
    #[serde(default)]
    pub disturbance: Vec<DisturbanceEntry>,
    #[serde(default)]
    pub limit_override: Vec<LimitOverride>,
}

impl ScenarioFile {
    fn default_ts() -> f64 {
        0.1
    }
    fn default_dt() -> f64 {
        0.01
    }
    fn default_eps() -> f64 {
        1000.0
    }
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

/// Where a file's text came from; relative references resolve against it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    Preset,
    Dir(PathBuf),
}

impl Origin {
    fn read(&self, name: &str) -> Result<(PathBuf, String)> {
        if Path::new(name).is_absolute() {
            return read_text(Path::new(name));
        }
        match self {
            Origin::Preset => match presets::file(name) {
                Some(text) => Ok((PathBuf::from(format!("<preset>/{name}")), text.to_string())),
                None => Err(Error::FileNotFound(PathBuf::from(format!("<preset>/{name}")))),
            },
            Origin::Dir(dir) => read_text(&dir.join(name)),
        }
    }
}

pub fn read_text(path: &Path) -> Result<(PathBuf, String)> {
    match std::fs::read_to_string(path) {
        Ok(text) => Ok((path.to_path_buf(), text)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::FileNotFound(path.to_path_buf()))
        }
        Err(source) => Err(Error::Io {
            path: path.to_path_buf(),
            source,
        }),
    }
}

pub fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// A scenario with its referenced feeder and partition files.
#[derive(Debug, Clone)]
pub struct ScenarioBundle {
    pub scenario: ScenarioFile,
    pub feeder: FeederFile,
    pub partition: PartitionFile,
    pub sensitivities: Option<crate::feeder::SensitivityDump>,
    pub origin: Origin,
    pub scenario_path: PathBuf,
    /// `key=value` overrides applied on top of the scenario file, in order.
    pub overrides: Vec<String>,
}

impl ScenarioBundle {
    /// Loads a scenario by path, or by preset name when no such file exists.
    pub fn load(spec: &str, overrides: &[String]) -> Result<Self> {
        let path = Path::new(spec);
        let (origin, scenario_path, text) = if path.exists() {
            let (p, text) = read_text(path)?;
            let dir = path
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."));
            (Origin::Dir(dir), p, text)
        } else if let Some(name) = presets::scenario_file_name(spec) {
            let (p, text) = Origin::Preset.read(&name)?;
            (Origin::Preset, p, text)
        } else {
            return Err(Error::FileNotFound(path.to_path_buf()));
        };
        Self::from_text(origin, scenario_path, &text, overrides)
    }

    pub fn from_text(
        origin: Origin,
        scenario_path: PathBuf,
        text: &str,
        overrides: &[String],
    ) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
            path: scenario_path.clone(),
            message: e.to_string(),
        })?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        // Without overrides, parse the text directly so errors carry line numbers.
        let scenario: ScenarioFile = if overrides.is_empty() {
            parse_toml(&scenario_path, text)?
        } else {
            toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| Error::Parse {
                    path: scenario_path.clone(),
                    message: e.to_string(),
                })?
        };
        let (fp, ftext) = origin.read(&scenario.feeder)?;
        let feeder: FeederFile = parse_toml(&fp, &ftext)?;
        let (pp, ptext) = origin.read(&scenario.partition)?;
        let partition: PartitionFile = parse_toml(&pp, &ptext)?;
        let sensitivities = match &scenario.sensitivities_file {
            Some(name) => {
                let (sp, stext) = origin.read(name)?;
                Some(
                    serde_json::from_str(&stext).map_err(|e| Error::Parse {
                        path: sp,
                        message: e.to_string(),
                    })?,
                )
            }
            None => None,
        };
        Ok(ScenarioBundle {
            scenario,
            feeder,
            partition,
            sensitivities,
            origin,
            scenario_path,
            overrides: overrides.to_vec(),
        })
    }
}

/// Applies a dotted `key=value` override to a TOML table. The value is parsed
/// as a TOML literal when possible and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() {
        return Err(Error::config(format!("override `{assignment}` has an empty key")));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut cursor = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry.as_table_mut().ok_or_else(|| {
            Error::config(format!("override `{key}`: `{part}` is not a table"))
        })?;
    }
    cursor.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parses a phase string such as `"abc"` into sorted phase indices 0..3.
pub fn parse_phases(s: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for ch in s.chars() {
        let idx = match ch.to_ascii_lowercase() {
            'a' => 0,
            'b' => 1,
            'c' => 2,
            _ => return Err(Error::config(format!("invalid phase `{ch}` in `{s}`"))),
        };
        if out.contains(&idx) {
            return Err(Error::config(format!("duplicate phase `{ch}` in `{s}`")));
        }
        out.push(idx);
    }
    if out.is_empty() {
        return Err(Error::config("empty phase set"));
    }
    out.sort_unstable();
    Ok(out)
}

pub fn phase_name(p: usize) -> char {
    ['a', 'b', 'c'][p]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_sets_nested_numeric_key() {
        let mut t: toml::Table = "[controller]\nalpha = 0.002\n".parse().unwrap();
        apply_override(&mut t, "controller.alpha=0.003").unwrap();
        assert_eq!(t["controller"]["alpha"].as_float(), Some(0.003));
        apply_override(&mut t, "controller_area.CA2.a_lambda=5000.0").unwrap();
        assert_eq!(
            t["controller_area"]["CA2"]["a_lambda"].as_float(),
            Some(5000.0)
        );
        apply_override(&mut t, "plant=linear").unwrap();
        assert_eq!(t["plant"].as_str(), Some("linear"));
    }

    #[test]
    fn unknown_key_is_rejected_with_its_name() {
        let text = "buses = []\nlines = []\nbogus = 1\n[slack]\nbus = \"n1\"\n";
        let err = parse_toml::<FeederFile>(Path::new("f.toml"), text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus"), "{msg}");
        assert!(msg.contains("f.toml"), "{msg}");
    }

    #[test]
    fn phases_parse_and_reject_garbage() {
        assert_eq!(parse_phases("cab").unwrap(), vec![0, 1, 2]);
        assert!(parse_phases("ad").is_err());
        assert!(parse_phases("aa").is_err());
        assert!(parse_phases("").is_err());
    }

    #[test]
    fn off_diagonal_cost_is_unsupported() {
        let c = CostCurvature::Matrix([[20.0, 1.0], [1.0, 20.0]]);
        assert!(matches!(c.diagonal(), Err(Error::Unsupported(_))));
        let d = CostCurvature::Matrix([[20.0, 0.0], [0.0, 30.0]]);
        assert_eq!(d.diagonal().unwrap(), [20.0, 30.0]);
    }
}
