//! Named, reproducible experiments with machine-readable reports.
//!
//! A scenario takes a [`ScenarioConfig`] and a seed, runs its checks and
//! returns a [`ScenarioOutput`]: a JSON report of every asserted quantity
//! with its tolerance, a text summary, a training trajectory and any
//! scenario-specific CSV tables.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dynamics::TrainConfig;
use crate::error::{Error, Result};
use crate::teacher::{build_teacher, TeacherGraph, TeacherSpec};

mod bn;
mod disentangle;
mod exactness;
mod expressibility;
mod overfit;
mod recursion;
mod sgd;

pub use overfit::{overfit_teacher, OverfitParams};
pub use sgd::{perturb_tables, SgdParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Scenario {
    Exactness,
    Recursion,
    Bn,
    Expressibility,
    Disentangle,
    Overfit,
    Sgd,
}

impl Scenario {
    pub const ALL: [Scenario; 7] = [
        Scenario::Exactness,
        Scenario::Recursion,
        Scenario::Bn,
        Scenario::Expressibility,
        Scenario::Disentangle,
        Scenario::Overfit,
        Scenario::Sgd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Exactness => "exactness",
            Scenario::Recursion => "recursion",
            Scenario::Bn => "bn",
            Scenario::Expressibility => "expressibility",
            Scenario::Disentangle => "disentangle",
            Scenario::Overfit => "overfit",
            Scenario::Sgd => "sgd",
        }
    }

    /// The default configuration shipped with the crate.
    pub fn bundled_config(self) -> &'static str {
        match self {
            Scenario::Exactness => include_str!("../../configs/exactness.json"),
            Scenario::Recursion => include_str!("../../configs/recursion.json"),
            Scenario::Bn => include_str!("../../configs/bn.json"),
            Scenario::Expressibility => include_str!("../../configs/expressibility.json"),
            Scenario::Disentangle => include_str!("../../configs/disentangle.json"),
            Scenario::Overfit => include_str!("../../configs/overfit.json"),
            Scenario::Sgd => include_str!("../../configs/sgd.json"),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Scenario::ALL.iter().map(|s| s.name()).collect();
                Error::Config(format!("unknown scenario `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// Teacher files shipped with the crate, keyed by their path relative to
/// the `configs` directory.
pub fn bundled_teacher(path: &str) -> Option<&'static str> {
    Some(match path {
        "teachers/inj_pair.json" => include_str!("../../configs/teachers/inj_pair.json"),
        "teachers/inj_ladder.json" => include_str!("../../configs/teachers/inj_ladder.json"),
        "teachers/inj_mixed.json" => include_str!("../../configs/teachers/inj_mixed.json"),
        "teachers/inj_deep.json" => include_str!("../../configs/teachers/inj_deep.json"),
        "teachers/inj_chain.json" => include_str!("../../configs/teachers/inj_chain.json"),
        "teachers/inj_tee.json" => include_str!("../../configs/teachers/inj_tee.json"),
        "teachers/inj_chain2.json" => include_str!("../../configs/teachers/inj_chain2.json"),
        "teachers/xor.json" => include_str!("../../configs/teachers/xor.json"),
        "teachers/shared_leaf.json" => include_str!("../../configs/teachers/shared_leaf.json"),
        "teachers/allvert.json" => include_str!("../../configs/teachers/allvert.json"),
        "teachers/bottleneck.json" => include_str!("../../configs/teachers/bottleneck.json"),
        _ => return None,
    })
}

/// A teacher given by file path or written inline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TeacherRef {
    Path(String),
    Inline(Box<TeacherSpec>),
}

impl TeacherRef {
    /// Loads the spec. Paths are resolved against `base`; without a base
    /// only bundled teachers are available.
    pub fn load(&self, base: Option<&Path>) -> Result<TeacherSpec> {
        match self {
            TeacherRef::Inline(spec) => Ok((**spec).clone()),
            TeacherRef::Path(p) => match base {
                Some(dir) => TeacherSpec::from_path(dir.join(p)),
                None => {
                    let text = bundled_teacher(p)
                        .ok_or_else(|| Error::Config(format!("no bundled teacher `{p}`")))?;
                    TeacherSpec::from_json(text)
                }
            },
        }
    }

    pub fn label(&self, index: usize) -> String {
        match self {
            TeacherRef::Path(p) => Path::new(p)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.clone()),
            TeacherRef::Inline(_) => format!("inline{index}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossyParams {
    pub per_event: usize,
    pub noise: f64,
}

impl Default for LossyParams {
    fn default() -> Self {
        LossyParams {
            per_event: 2,
            noise: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Optional; when present it must name the scenario being run.
    pub scenario: Option<String>,
    pub teachers: Vec<TeacherRef>,
    pub train: TrainConfig,
    /// Whether student weights carry a bias row.
    pub bias: bool,
    pub lossy: LossyParams,
    /// Number of seeded instances for per-instance checks.
    pub instances: usize,
    /// Size of the backward-obstruction ensemble.
    pub ensemble: usize,
    pub overfit: OverfitParams,
    pub sgd: SgdParams,
    /// Overrides for check tolerances, keyed by check name.
    pub tolerances: BTreeMap<String, f64>,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            scenario: None,
            teachers: Vec::new(),
            train: TrainConfig::default(),
            bias: true,
            lossy: LossyParams::default(),
            instances: 20,
            ensemble: 100,
            overfit: OverfitParams::default(),
            sgd: SgdParams::default(),
            tolerances: BTreeMap::new(),
            base_dir: None,
        }
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a config file; teacher paths resolve against its directory.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.base_dir = Some(path.parent().map(Path::to_path_buf).unwrap_or_default());
        Ok(cfg)
    }

    pub fn bundled(scenario: Scenario) -> Self {
        Self::from_json(scenario.bundled_config()).expect("bundled configs parse")
    }

    pub fn load_teachers(&self) -> Result<Vec<(String, TeacherGraph)>> {
        self.teachers
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let spec = t.load(self.base_dir.as_deref())?;
                Ok((t.label(i), build_teacher(&spec)?))
            })
            .collect()
    }

    fn teachers_or_err(&self, scenario: Scenario) -> Result<Vec<(String, TeacherGraph)>> {
        let ts = self.load_teachers()?;
        if ts.is_empty() {
            return Err(Error::Config(format!("scenario `{scenario}` needs at least one teacher")));
        }
        Ok(ts)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

impl Comparison {
    pub fn holds(self, value: f64, tol: f64) -> bool {
        match self {
            Comparison::Lt => value < tol,
            Comparison::Le => value <= tol,
            Comparison::Gt => value > tol,
            Comparison::Ge => value >= tol,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Comparison::Lt => "<",
            Comparison::Le => "<=",
            Comparison::Gt => ">",
            Comparison::Ge => ">=",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub comparison: Comparison,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub seed: u64,
    pub pass: bool,
    pub checks: Vec<Check>,
    pub metrics: BTreeMap<String, serde_json::Value>,
}

impl ScenarioReport {
    fn new(scenario: Scenario, seed: u64) -> Self {
        ScenarioReport {
            scenario: scenario.name().into(),
            seed,
            pass: true,
            checks: Vec::new(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failed(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.pass)
    }

    /// One line per check.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "scenario {} seed {}: {}\n",
            self.scenario,
            self.seed,
            if self.pass { "PASS" } else { "FAIL" }
        );
        for c in &self.checks {
            s.push_str(&format!(
                "{} {} = {:.6e} {} {:.3e}\n",
                if c.pass { "PASS" } else { "FAIL" },
                c.name,
                c.value,
                c.comparison.symbol(),
                c.tolerance
            ));
        }
        s
    }
}

/// Collects checks, applying tolerance overrides from the config.
struct Recorder<'a> {
    report: ScenarioReport,
    overrides: &'a BTreeMap<String, f64>,
}

impl<'a> Recorder<'a> {
    fn new(scenario: Scenario, seed: u64, overrides: &'a BTreeMap<String, f64>) -> Self {
        Recorder {
            report: ScenarioReport::new(scenario, seed),
            overrides,
        }
    }

    fn check(&mut self, name: impl Into<String>, value: f64, comparison: Comparison, tolerance: f64) -> bool {
        let name = name.into();
        let tolerance = self.overrides.get(&name).copied().unwrap_or(tolerance);
        let pass = comparison.holds(value, tolerance);
        self.report.pass &= pass;
        self.report.checks.push(Check {
            name,
            value,
            comparison,
            tolerance,
            pass,
        });
        pass
    }

    fn metric(&mut self, name: impl Into<String>, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.report.metrics.insert(name.into(), v);
    }

    fn finish(self) -> ScenarioReport {
        self.report
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioOutput {
    pub report: ScenarioReport,
    /// Contents of `trajectory.csv`.
    pub trajectory: String,
    /// Extra CSV files by name.
    pub files: BTreeMap<String, String>,
}

impl ScenarioOutput {
    pub fn report_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.report).expect("report serializes");
        s.push('\n');
        s
    }

    /// Writes `report.json`, `summary.txt`, `trajectory.csv` and the
    /// scenario's own CSV files into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: &str| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("report.json", &self.report_json())?;
        write("summary.txt", &self.report.summary())?;
        write("trajectory.csv", &self.trajectory)?;
        for (name, text) in &self.files {
            write(name, text)?;
        }
        Ok(())
    }
}

fn csv_string(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<String> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Config(e.to_string()))
}

fn csv_table(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    csv_string(|buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    })
}

/// Runs `scenario` with `config`; the seed overrides `config.train.seed`.
pub fn run_scenario(scenario: Scenario, config: &ScenarioConfig, seed: u64) -> Result<ScenarioOutput> {
    if let Some(name) = &config.scenario {
        if name != scenario.name() {
            return Err(Error::Config(format!(
                "config is for scenario `{name}`, not `{scenario}`"
            )));
        }
    }
    let mut config = config.clone();
    config.train.seed = seed;
    match scenario {
        Scenario::Exactness => exactness::run(&config),
        Scenario::Recursion => recursion::run(&config),
        Scenario::Bn => bn::run(&config),
        Scenario::Expressibility => expressibility::run(&config),
        Scenario::Disentangle => disentangle::run(&config),
        Scenario::Overfit => overfit::run(&config),
        Scenario::Sgd => sgd::run(&config),
    }
}
