//! JSON scenario files for the command line.
//!
//! ```json
//! {
//!   "network": "net.json",
//!   "horizon": 6,
//!   "epsilon": 0.05,
//!   "capacity_scale": 1.0,
//!   "seed": 7,
//!   "agents": [
//!     { "start": 0, "destination": 4 },
//!     { "start": 2, "destination": 5, "local_cost": { "kind": "quadratic", "weights": [...] } }
//!   ],
//!   "receding": { "horizon": 3, "steps": 20, "vehicles": 1000, "mode": "sampled" }
//! }
//! ```
//!
//! `network` is either a path (relative paths resolve against the scenario
//! file's directory) or an inline network object. `n_agents`, when present,
//! must match the number of agents.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{AgentSpec, FeasibleSet, Game, GameError, LocalCost};
use crate::network::{NetworkError, NetworkFile, NodeId, RoadNetwork};
use crate::receding::UpdateMode;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid scenario {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("scenario lists {listed} agents but n_agents is {declared}")]
    AgentCount { declared: usize, listed: usize },
    #[error("scenario has no agents")]
    NoAgents,
    #[error("scenario has no receding section")]
    NoReceding,
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Game(#[from] GameError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkSource {
    Path(PathBuf),
    Inline(NetworkFile),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioAgent {
    pub start: NodeId,
    pub destination: NodeId,
    #[serde(default)]
    pub local_cost: LocalCost,
}

/// Closed-loop settings; the terminal gain is derived from the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecedingSection {
    pub horizon: usize,
    pub steps: usize,
    #[serde(default = "default_vehicles")]
    pub vehicles: usize,
    #[serde(default)]
    pub mode: UpdateMode,
    /// Lipschitz constant of the stage cost; 0 for no stage cost.
    #[serde(default)]
    pub stage_lipschitz: f64,
    #[serde(default)]
    pub stage_weight: f64,
    /// Applies the best iterate when a solve hits its iteration limit.
    #[serde(default = "yes")]
    pub accept_unconverged: bool,
}

fn default_vehicles() -> usize {
    1000
}

fn yes() -> bool {
    true
}

fn default_epsilon() -> f64 {
    0.05
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub network: NetworkSource,
    #[serde(default)]
    pub n_agents: Option<usize>,
    pub horizon: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "one")]
    pub capacity_scale: f64,
    #[serde(default)]
    pub seed: u64,
    pub agents: Vec<ScenarioAgent>,
    #[serde(default)]
    pub receding: Option<RecedingSection>,
    /// Directory that relative network paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.into(), source })?;
        let mut cfg = Self::parse(&text).map_err(|source| ScenarioError::Parse { path: path.into(), source })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.agents.is_empty() {
            return Err(ScenarioError::NoAgents);
        }
        match self.n_agents {
            Some(declared) if declared != self.agents.len() => Err(ScenarioError::AgentCount {
                declared,
                listed: self.agents.len(),
            }),
            _ => Ok(()),
        }
    }

    pub fn network(&self) -> Result<RoadNetwork, ScenarioError> {
        Ok(match &self.network {
            NetworkSource::Path(p) => RoadNetwork::load(&self.base_dir.join(p))?,
            NetworkSource::Inline(file) => RoadNetwork::from_file(file)?,
        })
    }

    pub fn pairs(&self) -> Vec<(NodeId, NodeId)> {
        self.agents.iter().map(|a| (a.start, a.destination)).collect()
    }

    /// The open-loop game with the shared capacity constraint.
    pub fn game(&self, net: Arc<RoadNetwork>) -> Result<Game, ScenarioError> {
        let agents = self
            .agents
            .iter()
            .map(|a| AgentSpec {
                feasible: FeasibleSet::OpenLoop {
                    start: a.start,
                    destination: a.destination,
                    epsilon: self.epsilon,
                },
                local_cost: a.local_cost.clone(),
            })
            .collect();
        Ok(Game::new(net, self.horizon, agents, self.capacity_scale)?)
    }
}
