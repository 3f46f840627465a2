//! Starts the HTTP service in-process on an ephemeral port with a random toy
//! model, then talks to it the way a browser client would: list models, ask
//! for a completion, and read a chat reply as server-sent events.

use std::io::{BufRead, BufReader};
use std::path::PathBuf;
use std::sync::Arc;

use serde_json::{json, Value};
use tinylora::data::Tokenizer;
use tinylora::model::{init_weights, ModelConfig};
use tinylora::quant::BaseQuant;
use tinylora_serve::http::{self, AppState};
use tinylora_serve::registry::{BaseModel, ModelRegistry};

fn get(agent: &ureq::Agent, url: String) -> Result<Value, Box<dyn std::error::Error>> {
    Ok(serde_json::from_str(&agent.get(url).call()?.body_mut().read_to_string()?)?)
}

fn post(agent: &ureq::Agent, url: String, body: Value) -> Result<ureq::http::Response<ureq::Body>, ureq::Error> {
    agent.post(url).header("content-type", "application/json").send(body.to_string())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tokenizer = Tokenizer::bytes_only();
    let cfg = ModelConfig::toy(tokenizer.vocab_size());
    let weights = init_weights(&cfg, 5)?;
    let mut registry = ModelRegistry::new();
    registry.add_model(BaseModel { id: "toy".into(), path: PathBuf::from("toy.bin"), cfg, weights, tokenizer, quant: BaseQuant::None })?;
    let state = Arc::new(AppState::new(registry, None));

    let rt = tokio::runtime::Runtime::new()?;
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))?;
    let base = format!("http://{}", listener.local_addr()?);
    rt.spawn(http::serve(listener, state, std::future::pending()));
    println!("serving on {base}");

    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let models = get(&agent, format!("{base}/v1/models"))?;
    println!("models: {models}");

    let body = json!({"model_id": "toy", "prompt": "hello", "max_new_tokens": 12, "seed": 3});
    let reply: Value = serde_json::from_str(&post(&agent, format!("{base}/v1/generate"), body)?.body_mut().read_to_string()?)?;
    println!("generate: {reply}");

    let mut resp = post(&agent, format!("{base}/v1/chat"), json!({"model_id": "toy", "prompt": "你好", "max_new_tokens": 12, "seed": 3}))?;
    let reader = BufReader::new(resp.body_mut().as_reader());
    let mut event = String::from("message");
    let mut session = None;
    for line in reader.lines() {
        let line = line?;
        if let Some(name) = line.strip_prefix("event: ") {
            event = name.to_string();
        } else if let Some(data) = line.strip_prefix("data: ") {
            let v: Value = serde_json::from_str(data)?;
            println!("{event:>6} {v}");
            if event == "done" {
                session = v["session_id"].as_str().map(String::from);
                break;
            }
            event = String::from("message");
        }
    }
    if let Some(id) = session {
        let view = get(&agent, format!("{base}/v1/chat/{id}"))?;
        println!("session after one exchange: {view}");
    }
    Ok(())
}
