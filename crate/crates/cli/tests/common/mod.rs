#![allow(dead_code)]

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdout, Command, Output, Stdio};
use std::time::Duration;

use qoealloc_core::broker::wire::{decode, encode, AppParams, Message, RegisterMessage};
use qoealloc_core::{AppId, UeId, UtilityFunction};

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_qoealloc"));
    for (k, _) in std::env::vars() {
        if k.starts_with("QOEALLOC_") {
            c.env_remove(k);
        }
    }
    c.env("RUST_LOG", "warn");
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn video_download_config() -> PathBuf {
    workspace_root().join("configs/video_download.toml")
}

/// The two-app instance: a video client and a file download on 1 Mbps.
pub const TWO_APPS: &str = r#"
[network]
capacity_kbps = 1000
delta = 1e-4

[sim]
duration_s = 900
seed = 4

[[users]]
ue_id = "ue1"
[[users.apps]]
app_id = "yt1"
alpha = 1.0
utility = { kind = "sigmoidal", a = 0.148, b = 470 }
traffic = { kind = "streaming", bitrate_kbps = 400, media_s = 600 }

[[users]]
ue_id = "ue2"
[[users.apps]]
app_id = "http1"
alpha = 1.0
rate_cap_kbps = 1000
utility = { kind = "logarithmic", k = 17, r_max = 1000 }
traffic = { kind = "download", complete_unshaped_s = 300 }
"#;

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p
}

/// Rows of a CSV file as string fields, header first.
pub fn read_csv(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

/// Summary row for `flow` as (buffering_count, completion_s, avg_throughput_kbps).
pub fn summary_row(rows: &[Vec<String>], flow: &str) -> (Option<u32>, Option<f64>, f64) {
    let r = rows
        .iter()
        .find(|r| r[0] == flow)
        .unwrap_or_else(|| panic!("no row {flow}"));
    (r[4].parse().ok(), r[6].parse().ok(), r[3].parse().unwrap())
}

/// A broker process killed on drop.
pub struct BrokerProcess {
    pub child: Child,
    pub addr: SocketAddr,
    _stdout: BufReader<ChildStdout>,
}

impl BrokerProcess {
    pub fn spawn(config: &Path, out: &Path) -> Self {
        let mut child = bin()
            .args(["broker", "--config"])
            .arg(config)
            .arg("--out")
            .arg(out)
            .args(["--listen", "127.0.0.1:0"])
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut stdout = BufReader::new(child.stdout.take().unwrap());
        let mut line = String::new();
        stdout.read_line(&mut line).unwrap();
        let addr = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected banner {line:?}"))
            .parse()
            .unwrap();
        Self {
            child,
            addr,
            _stdout: stdout,
        }
    }
}

impl Drop for BrokerProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    pub fn connect(addr: SocketAddr) -> Self {
        let s = TcpStream::connect(addr).unwrap();
        s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
        Self {
            reader: BufReader::new(s.try_clone().unwrap()),
            writer: s,
        }
    }

    pub fn send(&mut self, m: &Message) {
        self.writer.write_all(encode(m).as_bytes()).unwrap();
    }

    pub fn send_raw(&mut self, line: &str) {
        self.writer.write_all(line.as_bytes()).unwrap();
    }

    pub fn recv(&mut self) -> Message {
        let mut line = String::new();
        self.reader.read_line(&mut line).unwrap();
        decode(&line).unwrap_or_else(|e| panic!("{line:?}: {e}"))
    }
}

pub fn register(ue: &str, apps: &[(&str, UtilityFunction, f64, Option<f64>)]) -> RegisterMessage {
    RegisterMessage {
        ue_id: UeId::new(ue).unwrap(),
        beta: 1.0,
        apps: apps
            .iter()
            .map(|&(id, utility, alpha, rate_cap)| AppParams {
                app_id: AppId::new(id).unwrap(),
                utility,
                alpha,
                rate_cap,
            })
            .collect(),
    }
}
