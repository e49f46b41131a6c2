//! Tick-driven simulation of streaming and download flows over one bottleneck.
//!
//! In unshaped mode every flow feeds the shared [`LinkFifo`] directly. Sources
//! are window-limited: a download keeps `queue_s * R` kbit outstanding, a
//! streaming client at most `pull_factor * bitrate * tick`. In shaped mode an
//! in-process [`BrokerState`] assigns rates and a [`TokenBucket`] per flow
//! limits what each source may hand to the link.
//!
//! A flow's usage share is live while it wants data: a download until its
//! last kbit arrives, a streaming client while its buffer (counting data in
//! flight) is below the cap and media remains. When the set of live flows of
//! a UE changes, the UE re-registers with the broker with its configured
//! shares renormalized over the live flows.

mod player;
mod report;

pub use player::{Phase, Player};
pub use report::{qoe_report, write_summary_csv, write_trace_csv, FlowReport, QoeReport};

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::wire::{AppParams, RegisterMessage, Rejection};
use crate::broker::BrokerState;
use crate::ids::{AppId, UeId};
use crate::shaper::{LinkFifo, ShaperError, TokenBucket};
use crate::solver::SolverError;
use crate::utility::UtilityFunction;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scenario: {field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("broker rejected {}: {} ({})", .0.ue_id, .0.field, .0.reason)]
    Rejected(Rejection),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Shaper(#[from] ShaperError),
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> SimError {
    SimError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Shaped,
    #[default]
    Unshaped,
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "shaped" => Ok(Self::Shaped),
            "unshaped" => Ok(Self::Unshaped),
            other => Err(format!("expected `shaped` or `unshaped`, got `{other}`")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Shaped => "shaped",
            Self::Unshaped => "unshaped",
        })
    }
}

/// Streaming video client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamingModel {
    /// Playback consumption, kbps.
    #[serde(rename = "bitrate_kbps")]
    pub bitrate: f64,
    /// Length of the media, seconds.
    pub media_s: f64,
    /// Media buffered before playback first starts, seconds.
    #[serde(rename = "startup_s", default = "defaults::startup")]
    pub startup_buffer: f64,
    /// Media buffered before a stalled player resumes, seconds.
    #[serde(rename = "rebuffer_s", default = "defaults::rebuffer")]
    pub rebuffer_threshold: f64,
    #[serde(rename = "buffer_cap_s", default = "defaults::buffer_cap")]
    pub buffer_cap: f64,
    /// Per-tick pull limit as a multiple of the bitrate.
    #[serde(default = "defaults::pull_factor")]
    pub pull_factor: f64,
}

mod defaults {
    pub fn startup() -> f64 {
        5.0
    }
    pub fn rebuffer() -> f64 {
        2.0
    }
    pub fn buffer_cap() -> f64 {
        30.0
    }
    pub fn pull_factor() -> f64 {
        2.0
    }
}

impl Default for StreamingModel {
    fn default() -> Self {
        Self {
            bitrate: 400.0,
            media_s: 3600.0,
            startup_buffer: defaults::startup(),
            rebuffer_threshold: defaults::rebuffer(),
            buffer_cap: defaults::buffer_cap(),
            pull_factor: defaults::pull_factor(),
        }
    }
}

impl StreamingModel {
    pub fn total_kbit(&self) -> f64 {
        self.bitrate * self.media_s
    }

    fn validate(&self, field: &str) -> Result<(), SimError> {
        let checks = [
            ("bitrate_kbps", self.bitrate),
            ("media_s", self.media_s),
            ("pull_factor", self.pull_factor),
            ("rebuffer_s", self.rebuffer_threshold),
        ];
        for (name, v) in checks {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(
                    format!("{field}.{name}"),
                    format!("must be finite and > 0, got {v}"),
                ));
            }
        }
        if !(self.rebuffer_threshold <= self.startup_buffer
            && self.startup_buffer <= self.buffer_cap)
            || !self.buffer_cap.is_finite()
        {
            return Err(invalid(
                field,
                "need 0 < rebuffer_s <= startup_s <= buffer_cap_s",
            ));
        }
        Ok(())
    }
}

/// File download of a fixed size.
#[derive(Debug, Clone, PartialEq)]
pub struct DownloadModel {
    /// Kbit. May be infinite, which only makes sense for calibration runs.
    pub size: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Traffic {
    Streaming(StreamingModel),
    Download(DownloadModel),
}

impl Traffic {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Streaming(_) => "streaming",
            Self::Download(_) => "download",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    pub app_id: AppId,
    pub utility: UtilityFunction,
    /// Configured usage share while the flow is live.
    pub alpha: f64,
    pub rate_cap: Option<f64>,
    pub traffic: Traffic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimUser {
    pub ue_id: UeId,
    pub beta: f64,
    pub flows: Vec<Flow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Bottleneck capacity `R`, kbps.
    pub capacity: f64,
    /// Solver residual tolerance, kbps.
    pub tolerance: f64,
    pub tick: f64,
    /// Upper bound on simulated time, seconds.
    pub duration: f64,
    pub mode: Mode,
    /// Download window, seconds of link capacity.
    pub queue_s: f64,
    /// Token bucket depth, seconds of assigned rate.
    pub burst_s: f64,
    pub seed: u64,
    /// End the run at the tick the last download finishes.
    pub stop_when_downloads_complete: bool,
    pub users: Vec<SimUser>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            capacity: 1000.0,
            tolerance: 1e-4,
            tick: 0.1,
            duration: 3600.0,
            mode: Mode::Unshaped,
            queue_s: 1.0,
            burst_s: crate::shaper::DEFAULT_BURST_S,
            seed: 0,
            stop_when_downloads_complete: true,
            users: Vec::new(),
        }
    }
}

impl Scenario {
    pub fn flows(&self) -> impl Iterator<Item = &Flow> {
        self.users.iter().flat_map(|u| &u.flows)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("network.capacity_kbps", self.capacity),
            ("network.delta", self.tolerance),
            ("network.queue_s", self.queue_s),
            ("sim.tick_s", self.tick),
            ("sim.duration_s", self.duration),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(field, format!("must be finite and > 0, got {v}")));
            }
        }
        if !(self.burst_s >= 0.0 && self.burst_s.is_finite()) {
            return Err(invalid("network.burst_s", "must be finite and >= 0"));
        }
        let mut ues = HashSet::new();
        let mut apps = HashSet::new();
        for u in &self.users {
            if !ues.insert(&u.ue_id) {
                return Err(invalid(format!("users.{}", u.ue_id), "duplicate ue_id"));
            }
            for f in &u.flows {
                let field = format!("users.{}.apps.{}", u.ue_id, f.app_id);
                if !apps.insert(&f.app_id) {
                    return Err(invalid(field, "duplicate app_id"));
                }
                match &f.traffic {
                    Traffic::Streaming(m) => m.validate(&format!("{field}.traffic"))?,
                    Traffic::Download(d) => {
                        if !(d.size > 0.0) {
                            return Err(invalid(
                                format!("{field}.traffic.size_kbit"),
                                format!("must be > 0, got {}", d.size),
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Throughput of one flow over one tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSample {
    /// End of the tick, seconds.
    pub time: f64,
    pub flow_id: AppId,
    pub throughput: f64,
    /// Seconds of media buffered at the end of the tick (streaming only).
    pub buffer: Option<f64>,
}

enum FlowState {
    Streaming(Player),
    Download { size: f64, delivered: f64 },
}

impl FlowState {
    fn delivered(&self) -> f64 {
        match self {
            Self::Streaming(p) => p.downloaded(),
            Self::Download { delivered, .. } => *delivered,
        }
    }

    fn live(&self, outstanding: f64) -> bool {
        match self {
            Self::Streaming(p) => p.is_filling(outstanding),
            Self::Download { size, delivered } => !download_done(*delivered, *size),
        }
    }
}

fn download_done(delivered: f64, size: f64) -> bool {
    delivered >= size - player::completion_slack(size)
}

/// Runs a scenario to completion. Identical scenarios give identical traces.
pub fn run(scenario: &Scenario) -> Result<(Vec<TraceSample>, QoeReport), SimError> {
    scenario.validate()?;
    let flows: Vec<&Flow> = scenario.flows().collect();
    let tick = scenario.tick;
    let mut states: Vec<FlowState> = flows
        .iter()
        .map(|f| match &f.traffic {
            Traffic::Streaming(m) => FlowState::Streaming(Player::new(m.clone())),
            Traffic::Download(d) => FlowState::Download {
                size: d.size,
                delivered: 0.0,
            },
        })
        .collect();
    let mut link = LinkFifo::new(scenario.capacity, flows.len(), scenario.seed)?;
    let mut shaping = match scenario.mode {
        Mode::Shaped => Some(Shaping::new(scenario)?),
        Mode::Unshaped => None,
    };
    let has_downloads = flows
        .iter()
        .any(|f| matches!(f.traffic, Traffic::Download(_)));
    let window = scenario.queue_s * scenario.capacity;

    let mut trace = Vec::new();
    let max_ticks = (scenario.duration / tick * (1.0 + 1e-12)).floor() as u64;
    for i in 0..max_ticks {
        if flows.is_empty() {
            break;
        }
        let start = i as f64 * tick;
        let end = (i + 1) as f64 * tick;
        let live: Vec<bool> = states
            .iter()
            .enumerate()
            .map(|(k, s)| s.live(link.backlog(k)))
            .collect();
        if let Some(sh) = shaping.as_mut() {
            sh.update(scenario, &live, start)?;
        }

        let mut demands: Vec<f64> = states
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let outstanding = link.backlog(k);
                match s {
                    FlowState::Streaming(p) => p.wanted(outstanding, tick),
                    FlowState::Download { size, delivered } => (window - outstanding)
                        .min(size - delivered - outstanding)
                        .max(0.0),
                }
            })
            .collect();
        if let Some(sh) = shaping.as_mut() {
            for (d, bucket) in demands.iter_mut().zip(&mut sh.buckets) {
                *d = bucket.admit(end, *d)?;
            }
        }

        let grants = link.serve(&demands, tick)?;
        for ((state, flow), g) in states.iter_mut().zip(&flows).zip(&grants) {
            let buffer = match state {
                FlowState::Streaming(p) => {
                    p.step(*g, tick);
                    Some(p.buffer())
                }
                FlowState::Download { delivered, .. } => {
                    *delivered += g;
                    None
                }
            };
            trace.push(TraceSample {
                time: end,
                flow_id: flow.app_id.clone(),
                throughput: g / tick,
                buffer,
            });
        }

        let downloads_done = states.iter().all(|s| match s {
            FlowState::Download { size, delivered } => download_done(*delivered, *size),
            FlowState::Streaming(_) => true,
        });
        if scenario.stop_when_downloads_complete && has_downloads && downloads_done {
            break;
        }
    }

    let report = qoe_report(&trace, scenario);
    debug_assert!(states.iter().zip(&report.flows).all(|(s, r)| {
        let stalls_agree = match s {
            FlowState::Streaming(p) => p.stalls() == r.buffering_count,
            FlowState::Download { .. } => true,
        };
        stalls_agree && (s.delivered() - r.delivered).abs() <= 1e-6 * s.delivered().max(1.0)
    }));
    Ok((trace, report))
}

/// Broker, buckets and the last registered live set, for shaped runs.
struct Shaping {
    broker: BrokerState,
    buckets: Vec<TokenBucket>,
    registered: Option<Vec<bool>>,
}

impl Shaping {
    fn new(scenario: &Scenario) -> Result<Self, SimError> {
        let n = scenario.flows().count();
        Ok(Self {
            broker: BrokerState::new(scenario.capacity, scenario.tolerance)?,
            buckets: (0..n)
                .map(|_| TokenBucket::with_burst_seconds(0.0, scenario.burst_s, 0.0))
                .collect::<Result<_, _>>()?,
            registered: None,
        })
    }

    /// Re-registers every UE whose live set changed and pushes the new rates
    /// into the buckets.
    fn update(&mut self, scenario: &Scenario, live: &[bool], now: f64) -> Result<(), SimError> {
        let mut offset = 0;
        let mut changed = false;
        for u in &scenario.users {
            let range = offset..offset + u.flows.len();
            offset = range.end;
            let same = self
                .registered
                .as_ref()
                .is_some_and(|prev| prev[range.clone()] == live[range.clone()]);
            if same {
                continue;
            }
            let live_u = &live[range];
            let share: f64 = u
                .flows
                .iter()
                .zip(live_u)
                .filter(|(_, &l)| l)
                .map(|(f, _)| f.alpha)
                .sum();
            let msg = RegisterMessage {
                ue_id: u.ue_id.clone(),
                beta: u.beta,
                apps: u
                    .flows
                    .iter()
                    .zip(live_u)
                    .map(|(f, &l)| AppParams {
                        app_id: f.app_id.clone(),
                        utility: f.utility,
                        alpha: if l && share > 0.0 {
                            f.alpha / share
                        } else {
                            0.0
                        },
                        rate_cap: f.rate_cap,
                    })
                    .collect(),
            };
            self.broker
                .handle_register(&msg)
                .map_err(SimError::Rejected)?;
            changed = true;
        }
        self.registered = Some(live.to_vec());
        if changed {
            for (bucket, flow) in self.buckets.iter_mut().zip(scenario.flows()) {
                let rate = self.broker.rate(&flow.app_id).unwrap_or(0.0);
                bucket.set_rate(now, rate)?;
            }
            log::debug!(
                "t={now:.1}s epoch {} rates {:?}",
                self.broker.epoch(),
                self.broker.last_epoch().map(|e| &e.rates)
            );
        }
        Ok(())
    }
}

/// Download size that finishes in `target_s` seconds when the scenario runs
/// unshaped: the amount the flow receives by then with an unlimited file.
pub fn calibrate_download_size(
    scenario: &Scenario,
    flow: &AppId,
    target_s: f64,
) -> Result<f64, SimError> {
    if !(target_s > 0.0 && target_s.is_finite()) {
        return Err(invalid(
            format!("{flow}.complete_unshaped_s"),
            "must be finite and > 0",
        ));
    }
    let mut probe = scenario.clone();
    probe.mode = Mode::Unshaped;
    probe.duration = target_s;
    probe.stop_when_downloads_complete = false;
    let mut found = false;
    for f in probe.users.iter_mut().flat_map(|u| &mut u.flows) {
        if let Traffic::Download(d) = &mut f.traffic {
            if &f.app_id == flow {
                found = true;
                d.size = f64::INFINITY;
            }
        }
    }
    if !found {
        return Err(invalid(format!("{flow}"), "no download flow with this id"));
    }
    let (_, report) = run(&probe)?;
    let size = report.flow(flow).map(|r| r.delivered).unwrap_or_default();
    if !(size > 0.0) {
        return Err(invalid(
            format!("{flow}.complete_unshaped_s"),
            "flow receives nothing in the unshaped run",
        ));
    }
    Ok(size)
}
