//! Fixture files, a child `tinylora serve` process and a small HTTP/SSE client.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tinylora::data::Tokenizer;
use tinylora::lora::{self, LoraAdapter, LoraConfig};
use tinylora::model::{self, init_weights, ModelConfig, ModelWeights};

pub const BIN: &str = env!("CARGO_BIN_EXE_tinylora");

pub fn toy_config() -> ModelConfig {
    ModelConfig { max_seq_len: 256, ..ModelConfig::toy(Tokenizer::bytes_only().vocab_size()) }
}

/// Big enough that a long greedy reply takes around a second.
pub fn slow_config() -> ModelConfig {
    ModelConfig { dim: 128, n_layers: 4, n_heads: 4, max_seq_len: 1024, ..toy_config() }
}

pub fn noisy_adapter(base: &ModelWeights, seed: u64) -> LoraAdapter {
    let mut scratch = base.clone();
    let mut adapter = lora::attach(&mut scratch, &LoraConfig::default(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in adapter.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    adapter
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub cfg: ModelConfig,
    pub weights: ModelWeights,
    pub tokenizer: Tokenizer,
}

impl Fixture {
    /// Tokenizer, a toy base, a slow base and two adapters on the toy base.
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let tokenizer = Tokenizer::bytes_only();
        tokenizer.save(dir.path().join("tokenizer.txt")).unwrap();
        let cfg = toy_config();
        let weights = init_weights(&cfg, 31).unwrap();
        model::save_model(dir.path().join("toy.bin"), &cfg, &weights).unwrap();
        let slow = slow_config();
        model::save_model(dir.path().join("slow.bin"), &slow, &init_weights(&slow, 0).unwrap()).unwrap();
        for (id, seed) in [("medical", 1u64), ("legal", 2)] {
            let sub = dir.path().join("adapters").join(id);
            std::fs::create_dir_all(&sub).unwrap();
            lora::save_adapter(&noisy_adapter(&weights, seed), sub.join("adapter.bin")).unwrap();
        }
        let f = Self { dir, cfg, weights, tokenizer };
        f.write_registry(&["medical", "legal"]);
        f
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn registry(&self) -> PathBuf {
        self.path("registry.toml")
    }

    pub fn write_registry(&self, adapters: &[&str]) {
        let mut text = String::from(
            "[[model]]\nid = \"toy\"\npath = \"toy.bin\"\ntokenizer = \"tokenizer.txt\"\n\n\
             [[model]]\nid = \"slow\"\npath = \"slow.bin\"\ntokenizer = \"tokenizer.txt\"\n",
        );
        for id in adapters {
            text.push_str(&format!(
                "\n[[adapter]]\nid = \"{id}\"\nbase = \"toy\"\npath = \"adapters/{id}\"\ndomain = \"{id}\"\n"
            ));
        }
        std::fs::write(self.registry(), text).unwrap();
    }

    pub fn adapter(&self, id: &str) -> LoraAdapter {
        lora::load_adapter(self.path(&format!("adapters/{id}/adapter.bin"))).unwrap()
    }
}

pub struct Server {
    child: Child,
    pub base: String,
}

impl Server {
    pub fn start(registry: Option<&Path>) -> Self {
        let mut cmd = Command::new(BIN);
        cmd.arg("serve").arg("--bind").arg("127.0.0.1:0");
        if let Some(r) = registry {
            cmd.arg("--registry").arg(r);
        }
        let mut child = cmd.stdout(Stdio::piped()).stderr(Stdio::inherit()).spawn().unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let base = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected banner {line:?}"))
            .to_string();
        Self { child, base }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub fn get(&self, path: &str) -> (u16, Value) {
        json_reply(agent().get(&self.url(path)).call().unwrap())
    }

    pub fn delete(&self, path: &str) -> u16 {
        agent().delete(&self.url(path)).call().unwrap().status().as_u16()
    }

    pub fn post(&self, path: &str, body: &Value) -> (u16, Value) {
        json_reply(self.post_raw(path, &body.to_string()))
    }

    pub fn post_raw(&self, path: &str, body: &str) -> ureq::http::Response<ureq::Body> {
        agent()
            .post(&self.url(path))
            .header("content-type", "application/json")
            .send(body)
            .unwrap()
    }

    /// Posts and returns the parsed event stream.
    pub fn stream(&self, path: &str, body: &Value) -> SseReply {
        let resp = self.post_raw(path, &body.to_string());
        assert_eq!(resp.status().as_u16(), 200, "{}", read_body(resp));
        parse_sse(&read_body(resp))
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

pub fn read_body(resp: ureq::http::Response<ureq::Body>) -> String {
    let mut s = String::new();
    resp.into_body().into_reader().read_to_string(&mut s).unwrap();
    s
}

fn json_reply(resp: ureq::http::Response<ureq::Body>) -> (u16, Value) {
    let status = resp.status().as_u16();
    let body = read_body(resp);
    (status, if body.is_empty() { Value::Null } else { serde_json::from_str(&body).unwrap() })
}

#[derive(Debug, Default)]
pub struct SseReply {
    /// `(index, token)` of each data event in arrival order.
    pub tokens: Vec<(u64, String)>,
    /// Name and payload of every named event.
    pub terminal: Vec<(String, Value)>,
}

impl SseReply {
    pub fn text(&self) -> String {
        self.tokens.iter().map(|(_, t)| t.as_str()).collect()
    }

    pub fn done(&self) -> &Value {
        assert_eq!(self.terminal.len(), 1, "{:?}", self.terminal);
        let (name, v) = &self.terminal[0];
        assert_eq!(name, "done", "{v}");
        v
    }
}

pub fn parse_sse(body: &str) -> SseReply {
    let mut out = SseReply::default();
    for frame in body.split("\n\n").filter(|f| !f.trim().is_empty()) {
        let mut event = None;
        let mut data = Vec::new();
        for line in frame.lines() {
            if let Some(v) = line.strip_prefix("event:") {
                event = Some(v.trim().to_string());
            } else if let Some(v) = line.strip_prefix("data:") {
                data.push(v.strip_prefix(' ').unwrap_or(v).to_string());
            }
        }
        if data.is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&data.join("\n")).unwrap();
        match event {
            None => {
                assert!(out.terminal.is_empty(), "data after the terminal event");
                out.tokens.push((v["index"].as_u64().unwrap(), v["token"].as_str().unwrap().to_string()));
            }
            Some(name) => out.terminal.push((name, v)),
        }
    }
    out
}

pub fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).output().unwrap()
}

pub fn stdout_of(out: &std::process::Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}
