//! Run configuration files (TOML or JSON).
//!
//! ```toml
//! schema_version = 1
//! model = "ac"
//! seed = 7
//!
//! [grid]                  # or `grid_file = "feeder.toml"`
//! nodes = 1
//! w00 = 1.0
//! v_lo = 0.81
//! v_hi = 1.0
//! m = 1.0
//! k = 10
//! c_max = 1.0
//! edges = [{ from = 0, to = 1, r = 0.01, x = 0.01 }]
//!
//! [utility]
//! kind = "weighted_log"
//!
//! [arrivals]
//! kind = "poisson_const"
//! rate = 2.0
//!
//! [laws]
//! kind = "indep_exp"
//! mean_b = 0.5
//! mean_d = 1.0
//! ```
//!
//! `arrivals`, `laws` and `utility.w` take either one value for every class
//! or a list of per-node lists.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alloc::{UtilityKind, UtilitySpec};
use crate::error::{Error, Result};
use crate::grid::{load_grid, GridFile, GridSpec, NodeTypeTable};
use crate::law::{ArrivalProcess, ArrivalSpec, JointLaw, JointLawSpec, PerClass};
use crate::power_flow::FlowModel;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassValues<T> {
    All(T),
    PerClass(Vec<Vec<T>>),
}

impl<T: Clone> ClassValues<T> {
    pub fn expand(&self, nodes: usize, types: usize, name: &str) -> Result<PerClass<T>> {
        match self {
            ClassValues::All(v) => Ok(PerClass::broadcast(nodes, types, v.clone())),
            ClassValues::PerClass(rows) => {
                if rows.len() != nodes || rows.iter().any(|r| r.len() != types) {
                    return Err(Error::config(format!("`{name}` must be {nodes} lists of {types} entries")));
                }
                Ok(PerClass::from_fn(nodes, types, |i, j| rows[i - 1][j].clone()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityName {
    WeightedLog,
    WeightedAlphaFair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilityConfig {
    pub kind: UtilityName,
    pub alpha: Option<f64>,
    pub w: Option<ClassValues<f64>>,
}

impl Default for UtilityConfig {
    fn default() -> Self {
        UtilityConfig { kind: UtilityName::WeightedLog, alpha: None, w: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocateConfig {
    /// Uncharged counts, one list per node.
    pub z: Option<Vec<Vec<f64>>>,
    #[serde(default = "yes")]
    pub voltage_constrained: bool,
}

impl Default for AllocateConfig {
    fn default() -> Self {
        AllocateConfig { z: None, voltage_constrained: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub horizon: f64,
    pub snap_every: f64,
    pub n: u64,
    pub replications: u64,
    pub keep_atoms: bool,
    pub record_events: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig { horizon: 10.0, snap_every: 1.0, n: 1, replications: 1, keep_atoms: false, record_events: false }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FluidConfig {
    /// Defaults to `20 max E[D]`.
    pub horizon: Option<f64>,
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InvariantConfig {
    pub theta: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for InvariantConfig {
    fn default() -> Self {
        InvariantConfig { theta: 0.5, tol: 1e-8, max_iter: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergeConfig {
    pub n: Vec<u64>,
    pub replications: u64,
    pub horizon: f64,
    pub snap_every: f64,
    /// Bin width of the distance grid; defaults to `min E[D] / 20`.
    pub bin_width: Option<f64>,
    /// Significance level of the one-sided sign test.
    pub alpha: f64,
}

impl Default for ConvergeConfig {
    fn default() -> Self {
        ConvergeConfig { n: vec![10, 100], replications: 20, horizon: 10.0, snap_every: 0.5, bin_width: None, alpha: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub models: Vec<FlowModel>,
    pub tol: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig { models: vec![FlowModel::Ac, FlowModel::Linearized], tol: 1e-3 }
    }
}

fn yes() -> bool {
    true
}

fn default_model() -> FlowModel {
    FlowModel::Ac
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default = "default_model")]
    pub model: FlowModel,
    pub grid: Option<GridFile>,
    /// Relative to the directory of the config file.
    pub grid_file: Option<PathBuf>,
    #[serde(default)]
    pub utility: UtilityConfig,
    pub arrivals: Option<ClassValues<ArrivalProcess>>,
    pub laws: Option<ClassValues<JointLaw>>,
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub allocate: AllocateConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub fluid: FluidConfig,
    #[serde(default)]
    pub invariant: InvariantConfig,
    #[serde(default)]
    pub converge: ConvergeConfig,
    #[serde(default)]
    pub verify_tables: VerifyConfig,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str, json: bool, name: &str) -> Result<Self> {
        let cfg: RunConfig = if json {
            serde_json::from_str(text).map_err(|e| Error::config(format!("{name}:{}: {e}", e.line())))?
        } else {
            toml::from_str(text).map_err(|e| Error::config(format!("{name}: {e}")))?
        };
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "{name}: schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        if cfg.grid.is_some() == cfg.grid_file.is_some() {
            return Err(Error::config(format!("{name}: give exactly one of `grid` and `grid_file`")));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let json = path.extension().and_then(|e| e.to_str()) == Some("json");
        let mut cfg = Self::parse(&text, json, &path.display().to_string())?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn grid(&self) -> Result<GridSpec<f64>> {
        match (&self.grid, &self.grid_file) {
            (Some(g), _) => g.build(None),
            (None, Some(p)) => {
                let path = match &self.base_dir {
                    Some(d) if p.is_relative() => d.join(p),
                    _ => p.clone(),
                };
                load_grid(&path)
            }
            (None, None) => Err(Error::config("no grid given")),
        }
    }

    pub fn utility(&self, g: &GridSpec<f64>) -> Result<UtilitySpec<f64>> {
        let kind = match self.utility.kind {
            UtilityName::WeightedLog => UtilityKind::WeightedLog,
            UtilityName::WeightedAlphaFair => UtilityKind::WeightedAlphaFair {
                alpha: self.utility.alpha.ok_or_else(|| Error::config("`utility.alpha` is required"))?,
            },
        };
        let w = match &self.utility.w {
            None => NodeTypeTable::zeros(g.nodes(), g.types()).map(|_: f64| 1.0),
            Some(v) => {
                let pc = v.expand(g.nodes(), g.types(), "utility.w")?;
                let mut t = NodeTypeTable::zeros(g.nodes(), g.types());
                for ((i, j), &x) in pc.iter() {
                    t.set(i, j, x);
                }
                t
            }
        };
        UtilitySpec::new(kind, w)
    }

    pub fn arrivals(&self, g: &GridSpec<f64>) -> Result<ArrivalSpec> {
        let a = self.arrivals.as_ref().ok_or_else(|| Error::config("`arrivals` is required for this command"))?;
        let a = a.expand(g.nodes(), g.types(), "arrivals")?;
        for (_, p) in a.iter() {
            p.validate().map_err(|e| Error::config(format!("arrivals: {e}")))?;
        }
        Ok(a)
    }

    pub fn laws(&self, g: &GridSpec<f64>) -> Result<JointLawSpec> {
        let l = self.laws.as_ref().ok_or_else(|| Error::config("`laws` is required for this command"))?;
        let l = l.expand(g.nodes(), g.types(), "laws")?;
        for (_, law) in l.iter() {
            law.validate().map_err(|e| Error::config(format!("laws: {e}")))?;
        }
        Ok(l)
    }
}
