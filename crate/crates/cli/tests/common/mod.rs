//! Helpers shared by the binary-level tests.
#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::Duration;

use serde_json::Value;

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_aerolog"));
    for var in ["AEROLOG_ADDR", "AEROLOG_DATA_DIR", "AEROLOG_CONFIG", "AEROLOG_LOG"] {
        c.env_remove(var);
    }
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn aerolog")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

/// A `serve` child process on an ephemeral port; killed on drop.
pub struct Server {
    pub child: Child,
    pub base: String,
    pub client: reqwest::blocking::Client,
}

impl Server {
    pub fn start(data_dir: &Path, extra: &[&str]) -> Server {
        let mut child = bin()
            .arg("--data-dir")
            .arg(data_dir)
            .args(["--addr", "127.0.0.1:0", "--log-level", "warn", "serve"])
            .args(extra)
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .expect("spawn serve");
        let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
        let addr = loop {
            let line = lines
                .next()
                .expect("serve exited before listening")
                .expect("read serve stderr");
            if let Some(a) = line.strip_prefix("listening on ") {
                break a.trim().to_string();
            }
        };
        // keep draining so the child never blocks on a full pipe
        std::thread::spawn(move || for _ in lines {});
        Server {
            child,
            base: format!("http://{addr}"),
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(30))
                .build()
                .unwrap(),
        }
    }

    /// Creates a channel; returns `(id, write_key)`.
    pub fn create_channel(&self, name: &str, labels: &[&str]) -> (u64, String) {
        let resp = self
            .client
            .post(format!("{}/channels", self.base))
            .json(&serde_json::json!({ "name": name, "field_labels": labels }))
            .send()
            .unwrap();
        assert_eq!(resp.status().as_u16(), 201);
        let v: Value = resp.json().unwrap();
        (v["id"].as_u64().unwrap(), v["write_key"].as_str().unwrap().to_string())
    }

    /// `(status, body)` of one form-encoded write.
    pub fn update(&self, form: &[(&str, &str)]) -> (u16, String) {
        let resp = self
            .client
            .post(format!("{}/update", self.base))
            .form(form)
            .send()
            .unwrap();
        (resp.status().as_u16(), resp.text().unwrap())
    }

    pub fn feed(&self, channel: u64, query: &str) -> Value {
        let resp = self
            .client
            .get(format!("{}/channels/{channel}/feeds.json?{query}", self.base))
            .send()
            .unwrap();
        assert_eq!(resp.status().as_u16(), 200);
        resp.json().unwrap()
    }

    pub fn interrupt(&mut self) -> std::process::ExitStatus {
        let pid = self.child.id().to_string();
        let ok = Command::new("kill").args(["-INT", &pid]).status().unwrap();
        assert!(ok.success());
        self.child.wait().unwrap()
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub const FIFTEEN_MINUTES: &str = r#"
schema = 1
name = "meeting"
seed = 42

[noise]
adc_sigma = 2.0

[[segments]]
duration = 300
co2 = [420, 650]
temperature = [23, 24]
humidity = 45

[[segments]]
duration = 300
co2 = [650, 480]
temperature = 24
humidity = [45, 55]

[[segments]]
duration = 300
co2 = 430
temperature = [24, 22]
humidity = 50
"#;
