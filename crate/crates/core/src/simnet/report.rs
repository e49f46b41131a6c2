//! QoE summaries and CSV output.

use std::io::{self, Write};

use super::player::{media_complete, Phase};
use super::{download_done, Scenario, TraceSample, Traffic};
use crate::fmt::sig9;
use crate::ids::AppId;

pub const TRACE_HEADER: &str = "time_s,flow_id,throughput_kbps,buffer_s";
pub const SUMMARY_HEADER: &str =
    "flow_id,kind,delivered_kbit,avg_throughput_kbps,buffering_count,buffering_s,completion_s";

#[derive(Debug, Clone, PartialEq)]
pub struct FlowReport {
    pub flow_id: AppId,
    pub kind: &'static str,
    /// Kbit received over the run.
    pub delivered: f64,
    /// `delivered / elapsed`, kbps.
    pub avg_throughput: f64,
    /// Stalls after playback first started (streaming only).
    pub buffering_count: u32,
    pub buffering_s: f64,
    /// When the last kbit arrived (downloads only; `None` if unfinished).
    pub completion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QoeReport {
    pub flows: Vec<FlowReport>,
    /// Simulated seconds covered by the trace.
    pub elapsed: f64,
    pub delivered: f64,
    /// Total kbit delivered over elapsed seconds.
    pub avg_throughput: f64,
}

impl QoeReport {
    pub fn flow(&self, id: &AppId) -> Option<&FlowReport> {
        self.flows.iter().find(|f| &f.flow_id == id)
    }
}

/// Rebuilds per-flow QoE from a trace. Playback state is replayed from the
/// buffer column using the scenario's player parameters.
pub fn qoe_report(trace: &[TraceSample], scenario: &Scenario) -> QoeReport {
    let tick = scenario.tick;
    let elapsed = trace.iter().map(|s| s.time).fold(0.0, f64::max);
    let mut flows = Vec::new();
    for flow in scenario.flows() {
        let samples = trace.iter().filter(|s| s.flow_id == flow.app_id);
        let mut delivered = 0.0;
        let mut report = FlowReport {
            flow_id: flow.app_id.clone(),
            kind: flow.traffic.kind(),
            delivered: 0.0,
            avg_throughput: 0.0,
            buffering_count: 0,
            buffering_s: 0.0,
            completion: None,
        };
        match &flow.traffic {
            Traffic::Download(d) => {
                for s in samples {
                    delivered += s.throughput * tick;
                    if report.completion.is_none() && download_done(delivered, d.size) {
                        report.completion = Some(s.time);
                    }
                }
            }
            Traffic::Streaming(m) => {
                let mut phase = Phase::Startup;
                let mut prev_buffer = 0.0;
                for s in samples {
                    let got = s.throughput * tick;
                    delivered += got;
                    let buffer = s.buffer.unwrap_or(0.0);
                    let complete = media_complete(delivered, m);
                    match phase {
                        Phase::Startup => {
                            if buffer >= m.startup_buffer || complete {
                                phase = Phase::Playing;
                            }
                        }
                        Phase::Playing => {
                            if buffer <= 0.0 {
                                if complete {
                                    phase = Phase::Finished;
                                } else {
                                    let play = (prev_buffer + got / m.bitrate).min(tick);
                                    phase = Phase::Stalled;
                                    report.buffering_count += 1;
                                    report.buffering_s += tick - play;
                                }
                            }
                        }
                        Phase::Stalled => {
                            report.buffering_s += tick;
                            if buffer >= m.rebuffer_threshold || complete {
                                phase = Phase::Playing;
                            }
                        }
                        Phase::Finished => {}
                    }
                    prev_buffer = buffer;
                }
            }
        }
        report.delivered = delivered;
        report.avg_throughput = if elapsed > 0.0 {
            delivered / elapsed
        } else {
            0.0
        };
        flows.push(report);
    }
    let delivered: f64 = flows.iter().map(|f| f.delivered).sum();
    QoeReport {
        flows,
        elapsed,
        delivered,
        avg_throughput: if elapsed > 0.0 {
            delivered / elapsed
        } else {
            0.0
        },
    }
}

pub fn write_trace_csv<W: Write>(trace: &[TraceSample], mut out: W) -> io::Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for s in trace {
        let buffer = s.buffer.map(sig9).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{}",
            sig9(s.time),
            s.flow_id,
            sig9(s.throughput),
            buffer
        )?;
    }
    out.flush()
}

/// One row per flow plus a final `network` row.
pub fn write_summary_csv<W: Write>(report: &QoeReport, mut out: W) -> io::Result<()> {
    writeln!(out, "{SUMMARY_HEADER}")?;
    for f in &report.flows {
        let (count, stall) = if f.kind == "streaming" {
            (f.buffering_count.to_string(), sig9(f.buffering_s))
        } else {
            (String::new(), String::new())
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            f.flow_id,
            f.kind,
            sig9(f.delivered),
            sig9(f.avg_throughput),
            count,
            stall,
            f.completion.map(sig9).unwrap_or_default()
        )?;
    }
    writeln!(
        out,
        "network,network,{},{},,,",
        sig9(report.delivered),
        sig9(report.avg_throughput)
    )?;
    out.flush()
}
