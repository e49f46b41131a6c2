//! `qoealloc`: solve, simulate, serve and fit from the command line.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use qoealloc_core::broker::service::Service;
use qoealloc_core::broker::BrokerState;
use qoealloc_core::config::ConfigFile;
use qoealloc_core::fmt::sig9;
use qoealloc_core::simnet::{self, Mode};
use qoealloc_core::solver;
use qoealloc_core::utility::{fit_sigmoidal, QoeObservation};

#[derive(Parser)]
#[command(
    name = "qoealloc",
    version,
    about = "Utility-proportional-fair bandwidth allocation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file (TOML).
    #[arg(long, env = "QOEALLOC_CONFIG")]
    config: PathBuf,
    /// Output directory; overrides `[output] dir`.
    #[arg(long, env = "QOEALLOC_OUT")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the allocation once, or across a capacity sweep.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Capacities LO:HI:STEP in kbps, inclusive.
        #[arg(long, env = "QOEALLOC_SWEEP", value_parser = parse_sweep)]
        sweep: Option<Sweep>,
    },
    /// Run the bottleneck simulation.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Overrides `[network] mode`.
        #[arg(long, env = "QOEALLOC_MODE")]
        mode: Option<Mode>,
        /// Overrides `[sim] seed`.
        #[arg(long, env = "QOEALLOC_SEED")]
        seed: Option<u64>,
    },
    /// Serve the rate broker protocol over TCP.
    Broker {
        #[command(flatten)]
        common: Common,
        /// Overrides `[network] listen`.
        #[arg(long, env = "QOEALLOC_LISTEN")]
        listen: Option<String>,
    },
    /// Fit sigmoid parameters to two (rate cap, satisfaction) observations.
    Fit {
        /// Lower observation, CAP_KBPS:SATISFACTION.
        #[arg(long, value_parser = parse_observation)]
        low: QoeObservation,
        /// Higher observation, CAP_KBPS:SATISFACTION.
        #[arg(long, value_parser = parse_observation)]
        high: QoeObservation,
    },
}

/// Capacities from a `--sweep` range.
#[derive(Debug, Clone)]
struct Sweep(Vec<f64>);

fn parse_sweep(s: &str) -> Result<Sweep, String> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    let [lo, hi, step] = parts[..] else {
        return Err("expected LO:HI:STEP".into());
    };
    if !(lo > 0.0 && hi >= lo && step > 0.0 && hi.is_finite()) {
        return Err("need 0 < LO <= HI and STEP > 0".into());
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    Ok(Sweep((0..n).map(|i| lo + i as f64 * step).collect()))
}

fn parse_observation(s: &str) -> Result<QoeObservation, String> {
    let (cap, sat) = s.split_once(':').ok_or("expected CAP:SATISFACTION")?;
    let cap = cap.trim().parse().map_err(|e| format!("cap: {e}"))?;
    let sat = sat
        .trim()
        .parse()
        .map_err(|e| format!("satisfaction: {e}"))?;
    QoeObservation::new(cap, sat).map_err(|e| e.to_string())
}

fn load(common: &Common) -> Result<(ConfigFile, PathBuf)> {
    let (cfg, unknown) = ConfigFile::load(&common.config)?;
    for key in unknown {
        log::warn!("{}: ignoring unknown key `{key}`", common.config.display());
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    Ok((cfg, out))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn cmd_solve(common: &Common, sweep: Option<&[f64]>) -> Result<()> {
    let (cfg, out_dir) = load(common)?;
    let problem = cfg.problem()?;
    let stdout = io::stdout();
    let mut stdout = stdout.lock();

    if let Some(capacities) = sweep {
        let rows = solver::sweep(&problem.users, capacities, problem.tolerance)?;
        let mut out = create(&out_dir, "sweep.csv")?;
        let apps: Vec<String> = problem.apps().map(|(_, a)| a.app_id.to_string()).collect();
        write!(out, "capacity_kbps")?;
        for a in &apps {
            write!(out, ",{a}_kbps")?;
        }
        writeln!(out, ",total_kbps")?;
        for row in &rows {
            write!(out, "{}", sig9(row.capacity))?;
            for r in &row.rates {
                write!(out, ",{}", sig9(*r))?;
            }
            writeln!(out, ",{}", sig9(row.total))?;
        }
        out.flush()?;
        writeln!(
            stdout,
            "{:>12} {}",
            "R (kbps)",
            apps.iter().map(|a| format!("{a:>12}")).collect::<String>()
        )?;
        for row in &rows {
            let rates: String = row.rates.iter().map(|r| format!("{r:>12.3}")).collect();
            writeln!(stdout, "{:>12.1} {rates}", row.capacity)?;
        }
        writeln!(stdout, "wrote {}", out_dir.join("sweep.csv").display())?;
        return Ok(());
    }

    let result = solver::solve(&problem)?;
    let mut out = create(&out_dir, "allocation.csv")?;
    writeln!(
        out,
        "ue_id,app_id,rate_kbps,shadow_price,iterations,residual_kbps"
    )?;
    for r in &result.rates {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.ue_id,
            r.app_id,
            sig9(r.rate),
            sig9(result.shadow_price),
            result.iterations,
            sig9(result.residual)
        )?;
    }
    out.flush()?;
    writeln!(
        stdout,
        "{:<16} {:<16} {:>14}",
        "ue_id", "app_id", "rate (kbps)"
    )?;
    for r in &result.rates {
        writeln!(
            stdout,
            "{:<16} {:<16} {:>14.4}",
            r.ue_id.as_str(),
            r.app_id.as_str(),
            r.rate
        )?;
    }
    writeln!(
        stdout,
        "total {:.4} kbps of {} | price {:.6e} | iterations {} | residual {:.2e}{}",
        result.total(),
        problem.capacity,
        result.shadow_price,
        result.iterations,
        result.residual,
        if result.binding {
            ""
        } else {
            " | capacity not binding"
        }
    )?;
    writeln!(stdout, "wrote {}", out_dir.join("allocation.csv").display())?;
    Ok(())
}

fn cmd_simulate(common: &Common, mode: Option<Mode>, seed: Option<u64>) -> Result<()> {
    let (mut cfg, out_dir) = load(common)?;
    if let Some(m) = mode {
        cfg.network.mode = m;
    }
    if let Some(s) = seed {
        cfg.sim.seed = s;
    }
    let scenario = cfg.scenario()?;
    let (trace, report) = simnet::run(&scenario)?;

    let mode = scenario.mode;
    let trace_name = format!("trace_{mode}.csv");
    let summary_name = format!("summary_{mode}.csv");
    simnet::write_trace_csv(&trace, create(&out_dir, &trace_name)?)?;
    simnet::write_summary_csv(&report, create(&out_dir, &summary_name)?)?;

    let stdout = io::stdout();
    let mut stdout = stdout.lock();
    writeln!(stdout, "{mode} run, {:.1} s simulated", report.elapsed)?;
    writeln!(
        stdout,
        "{:<16} {:<10} {:>12} {:>10} {:>12} {:>12}",
        "flow", "kind", "avg kbps", "stalls", "stalled s", "done at s"
    )?;
    for f in &report.flows {
        let (stalls, stalled) = if f.kind == "streaming" {
            (
                f.buffering_count.to_string(),
                format!("{:.1}", f.buffering_s),
            )
        } else {
            ("-".into(), "-".into())
        };
        let done = f.completion.map_or("-".into(), |t| format!("{t:.1}"));
        writeln!(
            stdout,
            "{:<16} {:<10} {:>12.1} {:>10} {:>12} {:>12}",
            f.flow_id.as_str(),
            f.kind,
            f.avg_throughput,
            stalls,
            stalled,
            done
        )?;
    }
    writeln!(
        stdout,
        "{:<16} {:<10} {:>12.1}",
        "network", "", report.avg_throughput
    )?;
    writeln!(
        stdout,
        "wrote {} and {}",
        out_dir.join(&trace_name).display(),
        out_dir.join(&summary_name).display()
    )?;
    Ok(())
}

fn cmd_broker(common: &Common, listen: Option<String>) -> Result<()> {
    let (cfg, out_dir) = load(common)?;
    let addr = listen.unwrap_or_else(|| cfg.network.listen.clone());
    let broker = BrokerState::new(cfg.network.capacity_kbps, cfg.network.delta)?;
    let listener = TcpListener::bind(&addr).with_context(|| format!("binding {addr}"))?;
    let log = create(&out_dir, "epochs.csv")?;
    let service = Service::new(broker, Some(Box::new(log)))?;
    // announce the bound address so callers using port 0 can find it
    let local = listener.local_addr()?;
    println!("listening on {local}");
    io::stdout().flush()?;
    log::info!("epoch log at {}", out_dir.join("epochs.csv").display());
    service.serve(listener)?;
    Ok(())
}

fn cmd_fit(low: QoeObservation, high: QoeObservation) -> Result<()> {
    let fitted = fit_sigmoidal(low, high)?;
    let qoealloc_core::UtilityFunction::Sigmoidal { a, b } = fitted else {
        bail!("fit returned a non-sigmoidal utility");
    };
    println!("a = {a}");
    println!("b = {b}");
    println!("utility = {{ kind = \"sigmoidal\", a = {a}, b = {b} }}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Solve { common, sweep } => {
            cmd_solve(common, sweep.as_ref().map(|s| s.0.as_slice()))
        }
        Command::Simulate { common, mode, seed } => cmd_simulate(common, *mode, *seed),
        Command::Broker { common, listen } => cmd_broker(common, listen.clone()),
        Command::Fit { low, high } => cmd_fit(*low, *high),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
