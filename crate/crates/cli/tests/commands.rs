mod common;

use std::fs;
use std::net::TcpListener;

use aerolog_core::storage::Store;
use common::{bin, run, stderr, stdout, Server, FIFTEEN_MINUTES};
use serde_json::Value;

const MINUTE: &str = r#"
schema = 1
name = "minute"
seed = 3

[[segments]]
duration = 60
co2 = 450
temperature = 25
humidity = 50
"#;

const FRESH_AIR_HOUR: &str = r#"
schema = 1
name = "fresh air"
seed = 11

[noise]
adc_sigma = 1.5

[[segments]]
duration = 3600
co2 = 397.13
temperature = [19, 23]
humidity = [40, 55]
"#;

fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> String {
    let p = dir.path().join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn version_is_json() {
    let out = run(&["--version"]);
    assert!(out.status.success());
    let v: Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(v["name"], "aerolog");
    assert_eq!(v["version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["simulate"]).status.code(), Some(2));
    assert_eq!(
        run(&["export", "--channel", "1", "--field", "9"]).status.code(),
        Some(2)
    );
}

#[test]
fn offline_minute_gives_thirty_ticks() {
    let dir = tempfile::tempdir().unwrap();
    let s = write(&dir, "s.toml", MINUTE);
    let out = run(&["simulate", &s, "--offline", "--accelerated"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let ticks: Vec<Value> = stdout(&out).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(ticks.len(), 30);
    assert_eq!(ticks[1]["at"], "2023-06-01T00:00:02Z");
    assert!(
        stderr(&out).contains("ticks=30 uploads_attempted=4 uploads_accepted=0"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn simulate_out_file_matches_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let s = write(&dir, "s.toml", MINUTE);
    let file = dir.path().join("ticks.jsonl");
    let a = run(&[
        "simulate",
        &s,
        "--offline",
        "--accelerated",
        "--out",
        file.to_str().unwrap(),
    ]);
    assert!(a.status.success());
    assert!(a.stdout.is_empty());
    let b = run(&["simulate", &s, "--offline", "--accelerated"]);
    assert_eq!(fs::read(&file).unwrap(), b.stdout);
}

#[test]
fn closed_stdout_is_not_an_error() {
    use std::io::Read;
    use std::process::Stdio;
    let dir = tempfile::tempdir().unwrap();
    let s = write(&dir, "s.toml", FRESH_AIR_HOUR);
    let mut child = bin()
        .args(["simulate", &s, "--offline", "--accelerated"])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut first = [0u8; 16];
    child.stdout.take().unwrap().read_exact(&mut first).unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(!stderr(&out).contains("Broken pipe"), "{}", stderr(&out));
}

#[test]
fn seed_flag_changes_noise() {
    let dir = tempfile::tempdir().unwrap();
    let s = write(&dir, "s.toml", FIFTEEN_MINUTES);
    let a = run(&["simulate", &s, "--offline", "--accelerated", "--seed", "1"]);
    let b = run(&["simulate", &s, "--offline", "--accelerated", "--seed", "2"]);
    assert_ne!(a.stdout, b.stdout);
}

#[test]
fn bad_schema_version_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let s = write(&dir, "s.toml", &MINUTE.replace("schema = 1", "schema = 9"));
    let out = run(&["simulate", &s, "--offline", "--accelerated"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("schema version 9"), "{}", stderr(&out));
    assert!(out.stdout.is_empty());
}

#[test]
fn invalid_scenario_names_line_and_field() {
    let dir = tempfile::tempdir().unwrap();
    let s = write(
        &dir,
        "syntax.toml",
        "schema = 1\nname = \"x\"\n[[segments]]\nduration = \n",
    );
    let out = run(&["simulate", &s, "--offline"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 4"), "{}", stderr(&out));
    let s = write(&dir, "range.toml", &MINUTE.replace("humidity = 50", "humidity = 150"));
    let out = run(&["simulate", &s, "--offline"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("segments[0].humidity"), "{}", stderr(&out));
}

#[test]
fn bad_device_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let s = write(&dir, "s.toml", MINUTE);
    let d = write(&dir, "d.toml", "[[devices]]\nsample_period = -1.0\n");
    let out = run(&["simulate", &s, &d, "--offline", "--accelerated"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("devices[0]"), "{}", stderr(&out));
    let d = write(&dir, "typo.toml", "[[devices]]\nsample_perod = 1.0\n");
    assert_eq!(run(&["simulate", &s, &d, "--offline"]).status.code(), Some(2));
}

#[test]
fn r_zero_from_config_reaches_firmware() {
    let dir = tempfile::tempdir().unwrap();
    let s = write(&dir, "s.toml", MINUTE);
    let c = write(&dir, "c.toml", "r-zero = 20000.0\n");
    let out = run(&["--config", &c, "simulate", &s, "--offline", "--accelerated"]);
    let first: Value = serde_json::from_str(stdout(&out).lines().next().unwrap()).unwrap();
    assert_eq!(first["reading"]["r_zero"], 20000.0);
    let out = bin()
        .args(["simulate", &s, "--offline", "--accelerated"])
        .env("AEROLOG_CONFIG", &c)
        .output()
        .unwrap();
    let first: Value = serde_json::from_str(stdout(&out).lines().next().unwrap()).unwrap();
    assert_eq!(first["reading"]["r_zero"], 20000.0);
}

#[test]
fn calibrate_constant_input_has_zero_dispersion() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("at,adc,temperature_c,humidity_pct\n");
    for i in 0..10 {
        csv.push_str(&format!("2023-06-01T00:00:{i:02}Z,300,20,33\n"));
    }
    let f = write(&dir, "s.csv", &csv);
    let out = run(&["calibrate", &f]);
    assert!(out.status.success(), "{}", stderr(&out));
    let est: Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(est["dispersion"], 0.0);
    assert_eq!(est["sample_count"], 10);
}

#[test]
fn calibrate_three_sample_median() {
    // adc_max 4080 makes each per-sample estimate a round number:
    // rs = (4080/adc - 1) * 10000 and, at 20 C / 33 %, f = 0.99178
    let dir = tempfile::tempdir().unwrap();
    let c = write(&dir, "c.toml", "[sensor]\nadc_max = 4080\n");
    let csv = "at,adc,temperature_c,humidity_pct\n\
               2023-06-01T00:00:00Z,272,20,33\n\
               2023-06-01T00:00:01Z,240,20,33\n\
               2023-06-01T00:00:02Z,255,20,33\n";
    let f = write(&dir, "s.csv", csv);
    let out = run(&["--config", &c, "calibrate", &f]);
    assert!(out.status.success(), "{}", stderr(&out));
    let est: Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    let r0 = est["r_zero"].as_f64().unwrap();
    // independent: median rs is adc 255 -> 150000 ohm; R0 = rs / f / baseline ratio
    let f = 0.00035 * 400.0 - 0.02718 * 20.0 + 1.39538;
    let ratio = (397.13f64 / 116.6020682).powf(-1.0 / 2.769034857);
    let want = 150_000.0 / f / ratio;
    assert!((r0 - want).abs() / want < 1e-12, "{r0} vs {want}");
}

#[test]
fn calibrate_rejects_empty_and_corrupt_input() {
    let dir = tempfile::tempdir().unwrap();
    let empty = write(&dir, "e.csv", "at,adc,temperature_c,humidity_pct\n");
    assert_eq!(run(&["calibrate", &empty]).status.code(), Some(2));
    let corrupt = write(&dir, "c.jsonl", "{\"reading\": 3}\n");
    let out = run(&["calibrate", &corrupt]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 1"), "{}", stderr(&out));
    assert_eq!(run(&["calibrate", "/nonexistent/file.csv"]).status.code(), Some(2));
}

#[test]
fn fresh_air_hour_recovers_device_r_zero() {
    let dir = tempfile::tempdir().unwrap();
    let s = write(&dir, "fresh.toml", FRESH_AIR_HOUR);
    let d = write(
        &dir,
        "d.toml",
        "[[devices]]\ndevice_r_zero = 21000.0\nfirmware_r_zero = 15000.0\n",
    );
    let cfg = dir.path().join("calibrated.toml");
    let out = run(&[
        "calibrate",
        "--from-simulation",
        &s,
        "--devices",
        &d,
        "--seed",
        "5",
        "--write-config",
        cfg.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let est: Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    let r0 = est["r_zero"].as_f64().unwrap();
    assert!((r0 - 21000.0).abs() / 21000.0 < 0.01, "r_zero {r0}");
    assert_eq!(est["sample_count"], 1800);

    // the written config is usable and carries the estimate
    let text = fs::read_to_string(&cfg).unwrap();
    let m = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "simulate",
        &write(&dir, "m.toml", MINUTE),
        "--offline",
        "--accelerated",
    ]);
    assert!(m.status.success(), "{}\n{text}", stderr(&m));
    let first: Value = serde_json::from_str(stdout(&m).lines().next().unwrap()).unwrap();
    assert_eq!(first["reading"]["r_zero"].as_f64().unwrap(), r0);

    // byte-reproducible for a fixed seed
    let again = run(&["calibrate", "--from-simulation", &s, "--devices", &d, "--seed", "5"]);
    assert_eq!(again.stdout, out.stdout);
}

#[test]
fn calibrate_accepts_tick_stream() {
    let dir = tempfile::tempdir().unwrap();
    let s = write(&dir, "fresh.toml", &FRESH_AIR_HOUR.replace("3600", "600"));
    let ticks = dir.path().join("ticks.jsonl");
    let out = run(&[
        "simulate",
        &s,
        "--offline",
        "--accelerated",
        "--out",
        ticks.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let from_file = run(&["calibrate", ticks.to_str().unwrap()]);
    let from_sim = run(&["calibrate", "--from-simulation", &s]);
    assert!(from_file.status.success(), "{}", stderr(&from_file));
    assert_eq!(from_file.stdout, from_sim.stdout);
}

#[test]
fn export_unknown_channel_and_missing_store_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = run(&[
        "--data-dir",
        data.to_str().unwrap(),
        "export",
        "--channel",
        "1",
        "--field",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    Store::open(&data).unwrap();
    let out = run(&[
        "--data-dir",
        data.to_str().unwrap(),
        "export",
        "--channel",
        "7",
        "--field",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("channel 7 not found"), "{}", stderr(&out));
}

#[test]
fn export_empty_channel_is_header_only_and_label_header_quotes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    {
        let server = Server::start(&data, &[]);
        server.create_channel("c", &["CO2, ppm"]);
    }
    let d = data.to_str().unwrap();
    let out = run(&["--data-dir", d, "export", "--channel", "1", "--field", "1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out), "created_at,entry_id,value\n");
    let out = run(&[
        "--data-dir",
        d,
        "export",
        "--channel",
        "1",
        "--field",
        "1",
        "--label-header",
    ]);
    assert_eq!(stdout(&out), "created_at,entry_id,\"CO2, ppm\"\n");
}

#[test]
fn plot_without_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    {
        let server = Server::start(&data, &["--rate-window", "0"]);
        let (_, key) = server.create_channel("c", &[]);
        assert_eq!(server.update(&[("api_key", &key), ("field2", "1")]).0, 200);
    }
    let svg = dir.path().join("x.svg");
    let out = run(&[
        "--data-dir",
        data.to_str().unwrap(),
        "plot",
        "--channel",
        "1",
        "--field",
        "1",
        "--out",
        svg.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no parseable field1"), "{}", stderr(&out));
    assert!(!svg.exists());
}

#[test]
fn serve_healthz_and_feed() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(dir.path(), &["--test-mode"]);
    let health = server.client.get(format!("{}/healthz", server.base)).send().unwrap();
    assert_eq!(health.status().as_u16(), 200);
    let (id, key) = server.create_channel("c", &["t"]);
    assert_eq!(key, "7HWYIS3YWBQOVR8B");
    let (status, body) = server.update(&[("api_key", &key), ("field1", "412.50")]);
    assert_eq!((status, body.as_str()), (200, "1"));
    let feed = server.feed(id, "");
    assert_eq!(feed["feeds"][0]["field1"], "412.50");
    assert_eq!(feed["channel"]["field1"], "t");
}

#[test]
fn serve_on_occupied_port_exits_1() {
    let holder = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = holder.local_addr().unwrap().to_string();
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["--data-dir", dir.path().to_str().unwrap(), "--addr", &addr, "serve"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains(&format!("cannot bind {addr}")),
        "{}",
        stderr(&out)
    );
}

#[test]
fn serve_addr_from_env() {
    let holder = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = holder.local_addr().unwrap().to_string();
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["--data-dir", dir.path().to_str().unwrap(), "serve"])
        .env("AEROLOG_ADDR", &addr)
        .output()
        .unwrap();
    assert!(
        stderr(&out).contains(&format!("cannot bind {addr}")),
        "{}",
        stderr(&out)
    );
}

#[cfg(unix)]
#[test]
fn serve_unwritable_dir_exits_1() {
    use std::os::unix::fs::PermissionsExt;
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    Store::open(&data).unwrap();
    let channels = data.join("channels");
    fs::set_permissions(&channels, fs::Permissions::from_mode(0o555)).unwrap();
    // root ignores permission bits; nothing to observe then
    let writable = fs::write(channels.join("probe"), b"").is_ok();
    let out = bin()
        .args(["--data-dir", data.to_str().unwrap(), "--addr", "127.0.0.1:0", "serve"])
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    if writable {
        let mut out = out;
        let _ = out.kill();
        let _ = out.wait();
    } else {
        let out = out.wait_with_output().unwrap();
        assert_eq!(out.status.code(), Some(1));
        assert!(stderr(&out).contains("not writable"), "{}", stderr(&out));
    }
    fs::set_permissions(&channels, fs::Permissions::from_mode(0o755)).unwrap();
}

#[cfg(unix)]
#[test]
fn interrupt_mid_write_leaves_no_torn_records() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let mut server = Server::start(&data, &["--rate-window", "0"]);
    let (id, key) = server.create_channel("c", &[]);
    let base = server.base.clone();
    let writer = std::thread::spawn(move || {
        let client = reqwest::blocking::Client::new();
        let mut acked = Vec::new();
        for i in 0.. {
            let sent = client
                .post(format!("{base}/update"))
                .form(&[("api_key", key.as_str()), ("field1", &i.to_string())])
                .send();
            match sent.and_then(|r| r.text()) {
                Ok(body) => acked.push(body.parse::<u64>().unwrap()),
                Err(_) => break,
            }
        }
        acked
    });
    std::thread::sleep(std::time::Duration::from_millis(300));
    let status = server.interrupt();
    assert!(status.success(), "serve exited with {status:?}");
    let acked = writer.join().unwrap();
    assert!(!acked.is_empty());

    let log = fs::read(data.join(format!("channels/{id}.jsonl"))).unwrap();
    assert_eq!(log.last(), Some(&b'\n'), "log ends mid-record");
    let store = Store::open(&data).unwrap();
    let entries = store.query(id, None, None, usize::MAX).unwrap();
    let ids: Vec<u64> = entries.iter().map(|e| e.entry_id).collect();
    assert_eq!(ids, (1..=entries.len() as u64).collect::<Vec<_>>());
    assert!(
        acked.iter().all(|a| ids.contains(a)),
        "an acknowledged write is missing"
    );
}

#[test]
fn simulate_against_server_lands_in_feed() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(&dir.path().join("data"), &["--test-mode"]);
    let (id, key) = server.create_channel("room", &[]);
    let s = write(&dir, "s.toml", MINUTE);
    let d = write(
        &dir,
        "d.toml",
        &format!("[[devices]]\nchannel_id = {id}\nwrite_key = \"{key}\"\n"),
    );
    let out = run(&["simulate", &s, &d, "--target", &server.base, "--accelerated"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(
        stderr(&out).contains("uploads_attempted=4 uploads_accepted=4"),
        "{}",
        stderr(&out)
    );
    let feed = server.feed(id, "");
    let times: Vec<&str> = feed["feeds"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["created_at"].as_str().unwrap())
        .collect();
    assert_eq!(
        times,
        [
            "2023-06-01T00:00:00Z",
            "2023-06-01T00:00:16Z",
            "2023-06-01T00:00:32Z",
            "2023-06-01T00:00:48Z"
        ]
    );
}

#[test]
fn wrong_key_uploads_are_counted_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(&dir.path().join("data"), &[]);
    let s = write(&dir, "s.toml", MINUTE);
    let d = write(&dir, "d.toml", "[[devices]]\nwrite_key = \"NOPE\"\n");
    let out = run(&["simulate", &s, &d, "--target", &server.base, "--accelerated"]);
    assert!(out.status.success());
    assert!(
        stderr(&out).contains("uploads_attempted=4 uploads_accepted=0"),
        "{}",
        stderr(&out)
    );
    let first: Value = serde_json::from_str(stdout(&out).lines().next().unwrap()).unwrap();
    assert_eq!(first["upload"]["outcome"]["http_status"], 401);
}

#[test]
fn shipped_samples_are_valid() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let p = |n: &str| root.join(n).to_str().unwrap().to_string();
    let out = run(&[
        "--config",
        &p("aerolog.example.toml"),
        "simulate",
        &p("meeting-room.toml"),
        &p("fleet.toml"),
        "--offline",
        "--accelerated",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("devices=3"), "{}", stderr(&out));
    let out = run(&["calibrate", "--from-simulation", &p("fresh-air.toml")]);
    assert!(out.status.success(), "{}", stderr(&out));
    let est: Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert!((est["r_zero"].as_f64().unwrap() - 15_568.0).abs() < 156.0);
}

#[test]
fn fleet_keys_match_test_mode_keygen() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(dir.path(), &["--test-mode"]);
    let keys: Vec<String> = (0..3).map(|i| server.create_channel(&format!("c{i}"), &[]).1).collect();
    let fleet = fs::read_to_string(std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/fleet.toml"))
        .unwrap();
    for k in keys {
        assert!(fleet.contains(&format!("write_key = \"{k}\"")), "{k}");
    }
}
