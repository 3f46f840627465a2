mod support;

use serde_json::{json, Value};
use support::{read_body, Fixture, Server};
use tinylora::data::{render_chat_prompt, Turn};
use tinylora::infer::{self, GenParams};
use tinylora::model::ModelRef;
use tinylora_serve::http::{chat_params, chat_prompt};

fn fields(body: &Value) -> Vec<String> {
    body["error"]["fields"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["field"].as_str().unwrap().to_string())
        .collect()
}

fn sampling(seed: u64) -> Value {
    json!({"max_new_tokens": 24, "temperature": 0.9, "top_k": 40, "top_p": 0.9, "repetition_penalty": 1.3, "seed": seed})
}

fn with(mut base: Value, extra: Value) -> Value {
    for (k, v) in extra.as_object().unwrap() {
        base[k] = v.clone();
    }
    base
}

fn params_of(v: &Value) -> GenParams {
    serde_json::from_value(v.clone()).unwrap()
}

#[test]
fn empty_service_lists_nothing_and_needs_a_model() {
    let server = Server::start(None);
    let (status, listing) = server.get("/v1/models");
    assert_eq!(status, 200);
    assert_eq!(listing, json!({"models": [], "adapters": []}));
    let (status, body) = server.post("/v1/generate", &json!({"prompt": "hi"}));
    assert_eq!(status, 400);
    assert_eq!(fields(&body), ["model_id"]);
    assert_eq!(server.post("/v1/reload", &json!({})).0, 409);
}

#[test]
fn malformed_requests_get_field_diagnostics() {
    let f = Fixture::new();
    let server = Server::start(Some(&f.registry()));
    let cases = [
        (json!({"model_id": "toy", "prompt": "x", "temperature": "hot"}), vec!["temperature"]),
        (json!({"model_id": "toy", "prompt": "x", "bogus": 1}), vec!["bogus"]),
        (json!({"model_id": "toy"}), vec!["prompt"]),
        (json!({"model_id": "toy", "prompt": "x", "top_p": 1.5, "repetition_penalty": 0.5}), vec!["top_p", "repetition_penalty"]),
        (json!({"model_id": "toy", "prompt": "x", "stop": [""]}), vec!["stop"]),
        (json!({"model_id": "toy", "prompt": "x".repeat(400)}), vec!["prompt"]),
        (json!({"adapter_id": "medical", "model_id": "slow", "prompt": "x"}), vec!["adapter_id"]),
        (json!(["not", "an", "object"]), vec!["body"]),
    ];
    for (req, want) in cases {
        let (status, body) = server.post("/v1/generate", &req);
        assert_eq!(status, 400, "{req} -> {body}");
        assert_eq!(body["error"]["code"], "invalid_request");
        assert_eq!(fields(&body), want, "{req} -> {body}");
    }
    let resp = server.post_raw("/v1/chat", "{not json");
    assert_eq!(resp.status().as_u16(), 400);
    let (status, body) = server.post("/v1/chat", &json!({"prompt": "x", "model_id": "toy", "session_id": ""}));
    assert_eq!(status, 400);
    assert_eq!(fields(&body), ["session_id"]);
}

#[test]
fn unknown_ids_are_not_found() {
    let f = Fixture::new();
    let server = Server::start(Some(&f.registry()));
    for req in [json!({"prompt": "x", "model_id": "nope"}), json!({"prompt": "x", "adapter_id": "nope"})] {
        let (status, body) = server.post("/v1/generate", &req);
        assert_eq!(status, 404, "{body}");
        assert_eq!(body["error"]["code"], "not_found");
        assert_eq!(server.post("/v1/chat", &req).0, 404);
    }
    assert_eq!(server.get("/v1/chat/missing").0, 404);
    assert_eq!(server.delete("/v1/chat/missing"), 404);
    assert_eq!(server.get("/v1/models").1["adapters"].as_array().unwrap().len(), 2);
}

#[test]
fn streamed_text_concatenates_to_the_completion() {
    let f = Fixture::new();
    let server = Server::start(Some(&f.registry()));
    for seed in 0..20u64 {
        let adapter = (seed % 2 == 1).then_some("medical");
        let mut req = with(sampling(seed), json!({"model_id": "toy", "prompt": "你好", "session_id": format!("eq{seed}")}));
        if let Some(a) = adapter {
            req["adapter_id"] = json!(a);
        }
        let chat = server.stream("/v1/chat", &req);
        let done = chat.done().clone();
        let indices: Vec<u64> = chat.tokens.iter().map(|t| t.0).collect();
        assert_eq!(indices, (0..chat.tokens.len() as u64).collect::<Vec<_>>());
        assert_eq!(done["session_id"], format!("eq{seed}"));

        // the same decode through the completion endpoint
        let params = chat_params(&params_of(&sampling(seed)));
        let prompt = chat_prompt(&[], "你好").unwrap();
        let mut plain = with(serde_json::to_value(&params).unwrap(), json!({"model_id": "toy", "prompt": prompt}));
        if let Some(a) = adapter {
            plain["adapter_id"] = json!(a);
        }
        let (status, full) = server.post("/v1/generate", &plain);
        assert_eq!(status, 200, "{full}");
        assert_eq!(chat.text(), full["text"].as_str().unwrap(), "seed {seed}");
        assert_eq!(done["completion_tokens"], full["completion_tokens"]);
        assert_eq!(done["finish_reason"], full["finish_reason"]);

        plain["stream"] = json!(true);
        let streamed = server.stream("/v1/generate", &plain);
        assert_eq!(streamed.text(), chat.text());
        assert!(streamed.done().get("session_id").is_none());

        // and in process, against the files the service loaded
        let ad = adapter.map(|a| f.adapter(a));
        let m = ModelRef::new(&f.cfg, &f.weights).with_adapter(ad.as_ref());
        let local = infer::generate(m, &f.tokenizer, &prompt, &params).unwrap();
        assert_eq!(local.text, chat.text());
    }
}

#[test]
fn session_transcript_replays_the_conversation() {
    let f = Fixture::new();
    let server = Server::start(Some(&f.registry()));
    let mut turns: Vec<Turn> = Vec::new();
    for (i, user) in ["你好", "请介绍一下你自己", "谢谢"].iter().enumerate() {
        let req = with(sampling(i as u64), json!({"model_id": "toy", "prompt": user, "session_id": "talk"}));
        let reply = server.stream("/v1/chat", &req);
        reply.done();
        // each reply is decoded from the full rendered history
        let expected_prompt = chat_prompt(&turns, user).unwrap();
        let local = infer::generate(
            ModelRef::new(&f.cfg, &f.weights),
            &f.tokenizer,
            &expected_prompt,
            &chat_params(&params_of(&sampling(i as u64))),
        )
        .unwrap();
        assert_eq!(reply.text(), local.text);
        turns.push(Turn::user(*user));
        turns.push(Turn::assistant(reply.text()));

        let (status, view) = server.get("/v1/chat/talk");
        assert_eq!(status, 200);
        let got: Vec<Turn> = serde_json::from_value(view["turns"].clone()).unwrap();
        assert_eq!(got, turns);
        assert_eq!(view["prompt"], render_chat_prompt(&turns).unwrap());
        assert_eq!(view["busy"], false);
        assert_eq!(view["model_id"], "toy");
    }

    let (status, body) = server.post("/v1/chat", &json!({"prompt": "x", "session_id": "talk", "model_id": "slow"}));
    assert_eq!(status, 400);
    assert_eq!(fields(&body), ["model_id"]);

    assert_eq!(server.delete("/v1/chat/talk"), 204);
    assert_eq!(server.get("/v1/chat/talk").0, 404);
}

#[test]
fn sessions_get_generated_ids() {
    let f = Fixture::new();
    let server = Server::start(Some(&f.registry()));
    let a = server.stream("/v1/chat", &json!({"prompt": "hi", "model_id": "toy", "max_new_tokens": 3}));
    let b = server.stream("/v1/chat", &json!({"prompt": "hi", "model_id": "toy", "max_new_tokens": 3}));
    let (ida, idb) = (a.done()["session_id"].as_str().unwrap(), b.done()["session_id"].as_str().unwrap());
    assert_ne!(ida, idb);
    assert_eq!(ida.len(), 32);
    assert_eq!(server.get(&format!("/v1/chat/{ida}")).1["turns"].as_array().unwrap().len(), 2);
}

#[test]
fn busy_session_conflicts_until_its_reply_finishes() {
    let f = Fixture::new();
    let server = Server::start(Some(&f.registry()));
    let long = json!({"model_id": "slow", "prompt": "hi", "session_id": "busy", "temperature": 0, "max_new_tokens": 600});
    // response headers arrive at once; the body is left unread while decoding runs
    let pending = server.post_raw("/v1/chat", &long.to_string());
    assert_eq!(pending.status().as_u16(), 200);

    let (status, body) = server.post("/v1/chat", &json!({"prompt": "again", "session_id": "busy"}));
    assert_eq!(status, 409, "{body}");
    assert_eq!(body["error"]["code"], "session_busy");
    assert_eq!(server.delete("/v1/chat/busy"), 409);
    assert_eq!(server.get("/v1/chat/busy").1["busy"], true);

    let other = server.stream("/v1/chat", &json!({"prompt": "hi", "model_id": "toy", "session_id": "free", "max_new_tokens": 4}));
    other.done();

    let first = support::parse_sse(&read_body(pending));
    assert_eq!(first.done()["completion_tokens"], 600, "the long reply must still be running during the checks");
    let view = server.get("/v1/chat/busy").1;
    assert_eq!(view["busy"], false);
    assert_eq!(view["turns"].as_array().unwrap().len(), 2);
    let next = server.stream("/v1/chat", &json!({"prompt": "again", "session_id": "busy", "max_new_tokens": 2}));
    next.done();

    // a history that no longer fits is refused up front and the session stays usable
    let (status, body) = server.post("/v1/chat", &json!({"prompt": "x".repeat(500), "session_id": "busy"}));
    assert_eq!(status, 400, "{body}");
    assert_eq!(fields(&body), ["prompt"]);
    assert_eq!(server.get("/v1/chat/busy").1["busy"], false);
}

#[test]
fn adapter_swaps_change_outputs_but_not_the_listing() {
    let f = Fixture::new();
    let server = Server::start(Some(&f.registry()));
    let listing = server.get("/v1/models").1;
    let req = |adapter: Option<&str>| {
        let mut r = json!({"model_id": "toy", "prompt": "User: 天气\n\nAssistant: ", "temperature": 0, "max_new_tokens": 16});
        if let Some(a) = adapter {
            r["adapter_id"] = json!(a);
        }
        let (status, body) = server.post("/v1/generate", &r);
        assert_eq!(status, 200, "{body}");
        body["text"].as_str().unwrap().to_string()
    };
    let plain = req(None);
    let medical = req(Some("medical"));
    let legal = req(Some("legal"));
    assert_ne!(medical, legal);
    assert_ne!(plain, medical);
    assert_eq!(req(Some("medical")), medical);
    assert_eq!(req(None), plain);
    assert_eq!(server.get("/v1/models").1, listing);

    // one session switching adapters between turns
    let turn = |adapter: &str, prompt: &str| {
        server.stream("/v1/chat", &json!({"session_id": "swap", "adapter_id": adapter, "prompt": prompt, "temperature": 0, "max_new_tokens": 8}))
    };
    turn("medical", "a").done();
    turn("legal", "b").done();
    assert_eq!(server.get("/v1/chat/swap").1["adapter_id"], "legal");
    assert_eq!(server.get("/v1/models").1, listing);

    // registry reload drops an adapter; the base stays byte-identical
    f.write_registry(&["medical"]);
    let (status, reloaded) = server.post("/v1/reload", &json!({}));
    assert_eq!(status, 200);
    assert_eq!(reloaded["adapters"].as_array().unwrap().len(), 1);
    assert_eq!(reloaded["models"], listing["models"]);
    assert_eq!(server.post("/v1/generate", &json!({"prompt": "x", "adapter_id": "legal"})).0, 404);
    assert_eq!(req(Some("medical")), medical);
}

#[test]
fn tampered_adapters_are_rejected() {
    let f = Fixture::new();
    let server = Server::start(Some(&f.registry()));
    let listing = server.get("/v1/models").1;
    let path = f.path("adapters/legal/adapter.bin");
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    std::fs::write(&path, &bytes).unwrap();

    let (status, body) = server.post("/v1/reload", &json!({}));
    assert_eq!(status, 422, "{body}");
    assert_eq!(server.get("/v1/models").1, listing, "the previous registry keeps serving");

    let out = support::run_cli(&["serve", "--registry", f.registry().to_str().unwrap(), "--bind", "127.0.0.1:0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}
