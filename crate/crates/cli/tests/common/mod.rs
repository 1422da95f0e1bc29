#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdout, Command, Output, Stdio};
use std::time::Duration;

use reqwest::Method;
use serde_json::Value;

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_stranglerkit")
}

pub fn fixture_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env_remove("STRANGLERKIT_SEED")
        .output()
        .expect("spawn stranglerkit")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

pub fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout)))
}

/// A long-running child that announced its address on its first stdout line.
pub struct Spawned {
    pub child: Child,
    pub addr: SocketAddr,
    _stdout: BufReader<ChildStdout>,
}

impl Spawned {
    pub fn start(args: &[&str]) -> Spawned {
        let mut child = Command::new(bin())
            .args(args)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .expect("spawn stranglerkit");
        let mut stdout = BufReader::new(child.stdout.take().unwrap());
        let mut line = String::new();
        stdout.read_line(&mut line).expect("announce line");
        let addr = line
            .split_whitespace()
            .find_map(|w| w.parse().ok())
            .unwrap_or_else(|| panic!("no address in {line:?}"));
        Spawned {
            child,
            addr,
            _stdout: stdout,
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }

    pub fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Spawned {
    fn drop(&mut self) {
        self.kill();
    }
}

pub struct Reply {
    pub status: u16,
    pub provenance: Option<String>,
    pub service: Option<String>,
    pub body: String,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_str(&self.body).unwrap_or(Value::Null)
    }
}

/// Blocking HTTP client for driving the gateway from plain test code.
pub struct Http {
    rt: tokio::runtime::Runtime,
    client: reqwest::Client,
}

impl Http {
    pub fn new() -> Http {
        Http {
            rt: tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap(),
            client: reqwest::Client::builder().timeout(Duration::from_secs(20)).build().unwrap(),
        }
    }

    pub fn send(&self, method: Method, url: &str, key: Option<&str>, body: Option<Value>) -> Reply {
        self.request(method, url, key, None, body)
    }

    pub fn request(
        &self,
        method: Method,
        url: &str,
        key: Option<&str>,
        token: Option<&str>,
        body: Option<Value>,
    ) -> Reply {
        self.rt.block_on(async {
            let mut req = self.client.request(method, url);
            if let Some(k) = key {
                req = req.header("x-routing-key", k);
            }
            if let Some(t) = token {
                req = req.bearer_auth(t);
            }
            if let Some(b) = body {
                req = req.json(&b);
            }
            let resp = req.send().await.unwrap_or_else(|e| panic!("{url}: {e}"));
            let header = |n: &str| resp.headers().get(n).and_then(|v| v.to_str().ok()).map(str::to_string);
            let (provenance, service) = (header("x-provenance"), header("x-upstream-service"));
            let status = resp.status().as_u16();
            Reply {
                status,
                provenance,
                service,
                body: resp.text().await.unwrap(),
            }
        })
    }

    pub fn get(&self, url: &str) -> Reply {
        self.send(Method::GET, url, None, None)
    }

    pub fn keyed(&self, url: &str, key: &str) -> Reply {
        self.send(Method::GET, url, Some(key), None)
    }

    pub fn with_token(&self, url: &str, key: &str, token: &str) -> Reply {
        self.request(Method::GET, url, Some(key), Some(token), None)
    }

    pub fn put(&self, url: &str, body: Value) -> Reply {
        self.send(Method::PUT, url, None, Some(body))
    }
}

/// fig3 migrated up to and including its gateway route, written to `dir`.
pub fn routed_fixture(dir: &Path) -> PathBuf {
    let plan = dir.join("plan.json");
    let model = dir.join("routed.json");
    let m = fixture_path("fig3.model");
    let out = run(&["plan", "--model", m.to_str().unwrap(), "--target", "A", "-o", plan.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&[
        "apply",
        "--model",
        m.to_str().unwrap(),
        "--plan",
        plan.to_str().unwrap(),
        "--step",
        "1,2,3,4,5",
        "--state",
        dir.join("state.json").to_str().unwrap(),
        "-o",
        model.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    model
}
