mod common;

use common::*;
use qoealloc_core::broker::wire::Message;
use qoealloc_core::UtilityFunction;

fn ok(o: &std::process::Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status,
        stdout(o),
        stderr(o)
    );
}

#[test]
fn solve_prints_and_writes_the_allocation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TWO_APPS);
    let out = dir.path().join("out");
    let o = run(&[
        "solve",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    ok(&o);
    let text = stdout(&o);
    assert!(
        text.contains("yt1") && text.contains("http1") && text.contains("price"),
        "{text}"
    );

    let rows = read_csv(&out.join("allocation.csv"));
    assert_eq!(
        rows[0].join(","),
        "ue_id,app_id,rate_kbps,shadow_price,iterations,residual_kbps"
    );
    assert_eq!(rows.len(), 3);
    let yt: f64 = rows[1][2].parse().unwrap();
    let http: f64 = rows[2][2].parse().unwrap();
    assert!(yt > http && yt > 470.0, "{yt} {http}");
    assert!((yt + http - 1000.0).abs() <= 1e-4 + 1e-6);
}

#[test]
fn sweep_writes_one_row_per_capacity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TWO_APPS);
    let o = run(&[
        "solve",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--sweep",
        "100:1000:100",
    ]);
    ok(&o);
    let rows = read_csv(&dir.path().join("sweep.csv"));
    assert_eq!(
        rows[0].join(","),
        "capacity_kbps,yt1_kbps,http1_kbps,total_kbps"
    );
    assert_eq!(rows.len(), 11);
    let caps: Vec<f64> = rows[1..].iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(caps.first(), Some(&100.0));
    assert_eq!(caps.last(), Some(&1000.0));
}

#[test]
fn bad_alpha_exits_nonzero_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = TWO_APPS.replacen("alpha = 1.0", "alpha = 0.6", 1);
    let cfg = write_config(dir.path(), &text);
    let o = run(&[
        "solve",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(
        err.starts_with("error:") && err.contains("users.ue1") && err.contains("alpha"),
        "{err}"
    );
    assert!(!dir.path().join("allocation.csv").exists());
}

#[test]
fn missing_config_is_an_error() {
    let o = run(&["solve", "--config", "/nonexistent/qoealloc.toml"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/nonexistent/qoealloc.toml"));
}

#[test]
fn unknown_keys_are_warned_about() {
    let dir = tempfile::tempdir().unwrap();
    let text = TWO_APPS.replace("delta = 1e-4", "delta = 1e-4\nlatency_ms = 3");
    let cfg = write_config(dir.path(), &text);
    let o = run(&[
        "solve",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    ok(&o);
    assert!(stderr(&o).contains("network.latency_ms"), "{}", stderr(&o));
}

#[test]
fn shaping_removes_stalls_and_delays_the_download() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TWO_APPS);
    for mode in ["shaped", "unshaped"] {
        let o = run(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
            "--mode",
            mode,
        ]);
        ok(&o);
        assert!(stdout(&o).contains(&format!("{mode} run")));
    }
    let shaped = read_csv(&dir.path().join("summary_shaped.csv"));
    let unshaped = read_csv(&dir.path().join("summary_unshaped.csv"));
    let (s_stalls, _, _) = summary_row(&shaped, "yt1");
    let (u_stalls, _, _) = summary_row(&unshaped, "yt1");
    assert_eq!(s_stalls, Some(0));
    assert!(u_stalls.unwrap() >= 1);
    let (_, s_done, _) = summary_row(&shaped, "http1");
    let (_, u_done, _) = summary_row(&unshaped, "http1");
    assert!((u_done.unwrap() - 300.0).abs() <= 1.0, "{u_done:?}");
    assert!(s_done.unwrap() > u_done.unwrap());

    let trace = read_csv(&dir.path().join("trace_shaped.csv"));
    assert_eq!(
        trace[0].join(","),
        "time_s,flow_id,throughput_kbps,buffer_s"
    );
    assert!(trace[1..].iter().all(|r| r.len() == 4));
}

#[test]
fn same_seed_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TWO_APPS);
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let out = out.to_str().unwrap();
        ok(&run(&[
            "simulate", "--config", cfg, "--out", out, "--mode", "unshaped", "--seed", "9",
        ]));
        ok(&run(&["solve", "--config", cfg, "--out", out]));
        ok(&run(&[
            "solve",
            "--config",
            cfg,
            "--out",
            out,
            "--sweep",
            "100:2000:50",
        ]));
    }
    for name in [
        "trace_unshaped.csv",
        "summary_unshaped.csv",
        "allocation.csv",
        "sweep.csv",
    ] {
        let x = std::fs::read(a.join(name)).unwrap();
        let y = std::fs::read(b.join(name)).unwrap();
        assert!(x == y, "{name} differs");
    }
}

#[test]
fn environment_overrides_flags_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TWO_APPS);
    let out = dir.path().join("env-out");
    let o = bin()
        .arg("simulate")
        .env("QOEALLOC_CONFIG", &cfg)
        .env("QOEALLOC_OUT", &out)
        .env("QOEALLOC_MODE", "unshaped")
        .output()
        .unwrap();
    ok(&o);
    assert!(out.join("trace_unshaped.csv").exists());
    assert!(!out.join("trace_shaped.csv").exists());

    // an explicit flag beats the environment
    let o = bin()
        .args(["simulate", "--mode", "shaped"])
        .env("QOEALLOC_CONFIG", &cfg)
        .env("QOEALLOC_OUT", &out)
        .env("QOEALLOC_MODE", "unshaped")
        .output()
        .unwrap();
    ok(&o);
    assert!(out.join("trace_shaped.csv").exists());
}

#[test]
fn fit_prints_parameters() {
    let o = run(&["fit", "--low", "200:0.1", "--high", "740:0.9"]);
    ok(&o);
    let text = stdout(&o);
    let get = |key: &str| -> f64 {
        text.lines()
            .find_map(|l| l.strip_prefix(&format!("{key} = ")))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert_eq!(get("b"), 470.0);
    assert!((get("a") - 0.148).abs() <= 1e-3);
    assert!(text.contains("kind = \"sigmoidal\""));

    let o = run(&["fit", "--low", "740:0.9", "--high", "200:0.1"]);
    assert!(!o.status.success());
}

#[test]
fn broker_serves_two_ues_and_logs_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TWO_APPS);
    let mut broker = BrokerProcess::spawn(&cfg, dir.path());

    let video = UtilityFunction::sigmoidal(0.148, 470.0);
    let file = UtilityFunction::logarithmic(17.0, 1000.0);
    let mut a = Client::connect(broker.addr);
    let mut b = Client::connect(broker.addr);

    a.send(&Message::Register(register(
        "ue1",
        &[("yt1", video, 1.0, None)],
    )));
    assert!(matches!(a.recv(), Message::Ack { epoch: 1, .. }));
    let Message::Rate(r) = a.recv() else { panic!() };
    // alone, the video's demand at the floor price is below capacity
    let alone = r.apps[0].rate;
    assert!(r.epoch == 1 && alone > 470.0 && alone < 1000.0, "{r:?}");

    b.send(&Message::Register(register(
        "ue2",
        &[("http1", file, 1.0, Some(1000.0))],
    )));
    assert!(matches!(b.recv(), Message::Ack { epoch: 2, .. }));
    let Message::Rate(rb) = b.recv() else {
        panic!()
    };
    let Message::Rate(ra) = a.recv() else {
        panic!()
    };
    assert_eq!((ra.epoch, rb.epoch), (2, 2));
    assert_eq!(ra.shadow_price, rb.shadow_price);
    assert!((ra.apps[0].rate + rb.apps[0].rate - 1000.0).abs() <= 1e-4);

    // alphas summing to 1.5: rejected, no new epoch
    b.send(&Message::Register(register(
        "ue2",
        &[("http1", file, 1.0, None), ("http2", file, 0.5, None)],
    )));
    let Message::Reject(rej) = b.recv() else {
        panic!()
    };
    assert_eq!(
        (rej.field.as_str(), rej.reason.as_str()),
        ("alpha", "alpha_sum")
    );

    b.send_raw("type=bogus\n");
    assert!(matches!(b.recv(), Message::Reject(_)));

    b.send(&Message::Depart {
        ue_id: "ue2".parse().unwrap(),
    });
    let Message::Rate(ra) = a.recv() else {
        panic!()
    };
    assert_eq!((ra.epoch, ra.apps[0].rate), (3, alone));
    assert!(matches!(b.recv(), Message::Ack { epoch: 3, .. }));

    broker.child.kill().unwrap();
    broker.child.wait().unwrap();
    let rows = read_csv(&dir.path().join("epochs.csv"));
    assert_eq!(
        rows[0].join(","),
        "epoch,shadow_price,ue_id,app_id,rate_kbps"
    );
    let epochs: Vec<&str> = rows[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(epochs, ["1", "2", "2", "3"]);
    assert!(rows.iter().all(|r| r.len() == 5));
}
