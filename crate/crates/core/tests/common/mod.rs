#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_t3ctl");

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    pub fn ok(self) -> Self {
        assert_eq!(
            self.code, 0,
            "stdout: {}\nstderr: {}",
            self.stdout, self.stderr
        );
        self
    }

    pub fn json(&self) -> serde_json::Value {
        serde_json::from_str(&self.stdout).unwrap_or_else(|e| panic!("{e}: {}", self.stdout))
    }
}

fn finish(out: Output) -> Run {
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Runs `t3ctl --json <args>` without inheriting a store from the caller.
pub fn t3ctl(args: &[&str]) -> Run {
    let out = Command::new(BIN)
        .arg("--json")
        .args(args)
        .env_remove("T3_STORE")
        .env_remove("T3_BACKEND")
        .output()
        .expect("t3ctl runs");
    finish(out)
}

pub fn t3ctl_in(store: &Path, args: &[&str]) -> Run {
    let out = Command::new(BIN)
        .arg("--json")
        .args(args)
        .env("T3_STORE", store)
        .env_remove("T3_BACKEND")
        .output()
        .expect("t3ctl runs");
    finish(out)
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A 600-subject cohort and split manifest written through the CLI.
pub fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let cohort = dir.join("cohort.csv");
    let manifest = dir.join("split.csv");
    t3ctl(&[
        "cohort",
        "gen",
        "--n",
        "600",
        "--seed",
        "21",
        "--out",
        s(&cohort),
    ])
    .ok();
    t3ctl(&[
        "split",
        "sample",
        "--cohort",
        s(&cohort),
        "--seed",
        "3",
        "--ta",
        "150",
        "--a1",
        "60",
        "--a2",
        "60",
        "--tb",
        "150",
        "--out",
        s(&manifest),
    ])
    .ok();
    (cohort, manifest)
}

/// Teams in the shared scenario and the adapters they submit.
pub const TEAMS: [(&str, &str); 4] = [
    ("alpha", "logistic"),
    ("beta", "naive-bayes"),
    ("gamma", "fail-above:200"),
    ("delta", "noise"),
];

pub mod api {
    use std::collections::BTreeMap;
    use std::sync::atomic::{AtomicI64, Ordering};
    use std::sync::Arc;

    use serde_json::Value;
    use t3_core::platform::Platform;
    use t3_core::service::{serve, AppState, ServiceConfig, ServiceHandle};

    pub const ORGANIZER: &str = "tok-org";

    pub fn team_token(team: &str) -> String {
        format!("tok-{team}")
    }

    /// A live service on an ephemeral port with a settable clock.
    pub struct Api {
        pub base: String,
        pub clock: Arc<AtomicI64>,
        pub platform: Arc<Platform>,
        runtime: tokio::runtime::Runtime,
        handle: Option<ServiceHandle>,
        agent: ureq::Agent,
    }

    impl Api {
        pub fn start(platform: Platform, teams: &[&str], auto_run: bool) -> Self {
            let mut tokens =
                BTreeMap::from([(ORGANIZER.to_owned(), "organizer:organizer".to_owned())]);
            for t in teams {
                tokens.insert(team_token(t), format!("team:{t}"));
            }
            let config = ServiceConfig {
                bind: "127.0.0.1:0".parse().unwrap(),
                auto_run,
                tokens,
            };
            let clock = Arc::new(AtomicI64::new(0));
            let c = clock.clone();
            let platform = Arc::new(platform);
            let state = AppState::new(
                platform.clone(),
                &config,
                Arc::new(move || c.load(Ordering::SeqCst)),
            )
            .unwrap();
            let runtime = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .unwrap();
            let handle = runtime.block_on(serve(state, config.bind)).unwrap();
            let agent: ureq::Agent = ureq::Agent::config_builder()
                .http_status_as_error(false)
                .build()
                .into();
            Self {
                base: format!("http://{}", handle.local_addr),
                clock,
                platform,
                runtime,
                handle: Some(handle),
                agent,
            }
        }

        pub fn set_now(&self, t: i64) {
            self.clock.store(t, Ordering::SeqCst);
        }

        fn finish(
            resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>,
        ) -> (u16, Value, String) {
            let mut resp = resp.expect("http round trip");
            let status = resp.status().as_u16();
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            let json = serde_json::from_str(&text).unwrap_or(Value::Null);
            (status, json, text)
        }

        /// Returns status, parsed body and raw body text.
        pub fn get(&self, path: &str, token: Option<&str>) -> (u16, Value, String) {
            let mut req = self.agent.get(format!("{}{path}", self.base));
            if let Some(t) = token {
                req = req.header("Authorization", format!("Bearer {t}"));
            }
            Self::finish(req.call())
        }

        pub fn get_header(&self, path: &str, header: &str) -> Option<String> {
            let resp = self
                .agent
                .get(format!("{}{path}", self.base))
                .call()
                .unwrap();
            resp.headers()
                .get(header)
                .and_then(|v| v.to_str().ok())
                .map(str::to_owned)
        }

        pub fn post_json(
            &self,
            path: &str,
            token: Option<&str>,
            body: &Value,
        ) -> (u16, Value, String) {
            let mut req = self.agent.post(format!("{}{path}", self.base));
            if let Some(t) = token {
                req = req.header("Authorization", format!("Bearer {t}"));
            }
            Self::finish(req.send_json(body))
        }

        pub fn submit(&self, token: &str, metadata: &Value, payload: &str) -> (u16, Value, String) {
            let boundary = "t3-boundary-7d1a";
            let body = format!(
                "--{boundary}\r\nContent-Disposition: form-data; name=\"metadata\"\r\nContent-Type: application/json\r\n\r\n{metadata}\r\n\
                 --{boundary}\r\nContent-Disposition: form-data; name=\"payload\"; filename=\"adapter.txt\"\r\nContent-Type: text/plain\r\n\r\n{payload}\r\n\
                 --{boundary}--\r\n"
            );
            let req = self
                .agent
                .post(format!("{}/submissions", self.base))
                .header("Authorization", format!("Bearer {token}"))
                .header(
                    "Content-Type",
                    format!("multipart/form-data; boundary={boundary}"),
                );
            Self::finish(req.send(body.as_bytes()))
        }

        pub fn stop(mut self) -> Arc<Platform> {
            if let Some(h) = self.handle.take() {
                self.runtime.block_on(h.shutdown()).unwrap();
            }
            self.platform.clone()
        }
    }
}
