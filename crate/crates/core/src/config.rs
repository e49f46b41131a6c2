//! TOML configuration.
//!
//! ```toml
//! [network]
//! capacity_kbps = 1000
//! delta = 1e-4
//! mode = "shaped"
//!
//! [sim]
//! tick_s = 0.1
//! duration_s = 4000
//! seed = 1
//!
//! [[users]]
//! ue_id = "ue1"
//! [[users.apps]]
//! app_id = "yt1"
//! alpha = 1.0
//! utility = { kind = "sigmoidal", a = 0.148, b = 470 }
//! traffic = { kind = "streaming", bitrate_kbps = 400, media_s = 3600 }
//! ```
//!
//! Unknown keys are reported as warnings, not errors.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::ids::{AppId, UeId};
use crate::simnet::{
    self, DownloadModel, Flow, Mode, Scenario, SimError, SimUser, StreamingModel, Traffic,
};
use crate::solver::{default_rate_cap, AllocationProblem, AppDescriptor, SolverError, UserProfile};
use crate::utility::UtilityFunction;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ConfigFile {
    pub network: Network,
    #[serde(default)]
    pub sim: Sim,
    #[serde(default)]
    pub output: Output,
    #[serde(default)]
    pub users: Vec<UserEntry>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct Network {
    pub capacity_kbps: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub mode: Mode,
    /// Download window for unshaped sources, seconds of capacity.
    #[serde(default = "one")]
    pub queue_s: f64,
    /// Token bucket depth, seconds of assigned rate.
    #[serde(default = "one")]
    pub burst_s: f64,
    /// Broker listen address.
    #[serde(default = "default_listen")]
    pub listen: String,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default)]
pub struct Sim {
    pub tick_s: f64,
    pub duration_s: f64,
    pub seed: u64,
    pub stop_when_downloads_complete: bool,
}

impl Default for Sim {
    fn default() -> Self {
        let s = Scenario::default();
        Self {
            tick_s: s.tick,
            duration_s: s.duration,
            seed: s.seed,
            stop_when_downloads_complete: s.stop_when_downloads_complete,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default)]
pub struct Output {
    pub dir: PathBuf,
}

impl Default for Output {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct UserEntry {
    pub ue_id: UeId,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default)]
    pub apps: Vec<AppEntry>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct AppEntry {
    pub app_id: AppId,
    pub alpha: f64,
    pub rate_cap_kbps: Option<f64>,
    pub utility: UtilityFunction,
    pub traffic: Option<TrafficEntry>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TrafficEntry {
    Streaming(StreamingModel),
    /// Give either the size or the unshaped completion time to calibrate it from.
    Download {
        size_kbit: Option<f64>,
        complete_unshaped_s: Option<f64>,
    },
}

fn default_delta() -> f64 {
    crate::solver::DEFAULT_TOLERANCE
}

fn one() -> f64 {
    1.0
}

fn default_listen() -> String {
    "127.0.0.1:7878".into()
}

impl ConfigFile {
    /// Parses TOML text. Returns the config and the paths of ignored keys.
    pub fn parse(text: &str) -> Result<(Self, Vec<String>), ConfigError> {
        let mut unknown = Vec::new();
        let de = toml::Deserializer::parse(text)?;
        let cfg = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))?;
        Ok((cfg, unknown))
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<String>), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::parse(&text)
    }

    /// The allocation problem the users describe. Traffic models are ignored.
    pub fn problem(&self) -> Result<AllocationProblem, ConfigError> {
        let capacity = self.network.capacity_kbps;
        let users = self
            .users
            .iter()
            .map(|u| UserProfile {
                ue_id: u.ue_id.clone(),
                beta: u.beta,
                apps: u
                    .apps
                    .iter()
                    .map(|a| AppDescriptor {
                        app_id: a.app_id.clone(),
                        ue_id: u.ue_id.clone(),
                        utility: a.utility,
                        alpha: a.alpha,
                        rate_cap: a
                            .rate_cap_kbps
                            .unwrap_or_else(|| default_rate_cap(&a.utility, capacity)),
                    })
                    .collect(),
            })
            .collect();
        let problem = AllocationProblem {
            users,
            capacity,
            tolerance: self.network.delta,
        };
        problem.validate()?;
        Ok(problem)
    }

    /// The simulation scenario. Every app needs a traffic model; download
    /// sizes given as `complete_unshaped_s` are calibrated here.
    pub fn scenario(&self) -> Result<Scenario, ConfigError> {
        // the same checks the broker will apply, reported up front
        self.problem()?;
        let mut calibrate = Vec::new();
        let mut users = Vec::new();
        for u in &self.users {
            let mut flows = Vec::new();
            for a in &u.apps {
                let field = format!("users.{}.apps.{}.traffic", u.ue_id, a.app_id);
                let traffic = match &a.traffic {
                    None => return Err(invalid(field, "missing (needed to simulate)")),
                    Some(TrafficEntry::Streaming(m)) => Traffic::Streaming(m.clone()),
                    Some(TrafficEntry::Download {
                        size_kbit,
                        complete_unshaped_s,
                    }) => match (size_kbit, complete_unshaped_s) {
                        (Some(size), None) => Traffic::Download(DownloadModel { size: *size }),
                        (None, Some(t)) => {
                            calibrate.push((a.app_id.clone(), *t));
                            Traffic::Download(DownloadModel {
                                size: f64::INFINITY,
                            })
                        }
                        _ => {
                            return Err(invalid(
                                field,
                                "give exactly one of size_kbit and complete_unshaped_s",
                            ))
                        }
                    },
                };
                flows.push(Flow {
                    app_id: a.app_id.clone(),
                    utility: a.utility,
                    alpha: a.alpha,
                    rate_cap: a.rate_cap_kbps,
                    traffic,
                });
            }
            users.push(SimUser {
                ue_id: u.ue_id.clone(),
                beta: u.beta,
                flows,
            });
        }
        let mut scenario = Scenario {
            capacity: self.network.capacity_kbps,
            tolerance: self.network.delta,
            tick: self.sim.tick_s,
            duration: self.sim.duration_s,
            mode: self.network.mode,
            queue_s: self.network.queue_s,
            burst_s: self.network.burst_s,
            seed: self.sim.seed,
            stop_when_downloads_complete: self.sim.stop_when_downloads_complete,
            users,
        };
        scenario.validate()?;
        for (app, target) in calibrate {
            let size = simnet::calibrate_download_size(&scenario, &app, target)?;
            log::info!("{app}: calibrated download size {size:.1} kbit for {target} s unshaped");
            for f in scenario.users.iter_mut().flat_map(|u| &mut u.flows) {
                if f.app_id == app {
                    f.traffic = Traffic::Download(DownloadModel { size });
                }
            }
        }
        Ok(scenario)
    }
}
