use std::collections::HashMap;
use std::sync::Arc;

use lara_core::simulation::{generate_collection, SyntheticConfig};
use lara_core::trec_io::parse_qrels;
use lara_core::Collection;
use lara_service::*;
use serde_json::{json, Value};

struct Server {
    base: String,
    _dir: tempfile::TempDir,
    collection: Arc<Collection>,
}

fn start(token: Option<&str>) -> Server {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig {
        topics: 4,
        docs_per_topic: 25,
        systems: 4,
        seed: 11,
        ..Default::default()
    };
    let collection = Arc::new(generate_collection(&cfg).unwrap().to_collection().unwrap());
    let manager = Manager::with_system_clock(
        ServiceConfig::new(dir.path()),
        HashMap::from([("syn".to_string(), collection.clone())]),
    )
    .unwrap();
    let state = AppState {
        manager: Arc::new(manager),
        token: token.map(String::from),
    };
    let std_listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", std_listener.local_addr().unwrap());
    std_listener.set_nonblocking(true).unwrap();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(std_listener).unwrap();
            serve(listener, state).await.unwrap();
        });
    });
    Server {
        base,
        _dir: dir,
        collection,
    }
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

fn call(method: &str, url: &str, body: Option<Value>, token: Option<&str>) -> (u16, String) {
    let a = agent();
    let auth = token.map(|t| format!("Bearer {t}"));
    let mut resp = match method {
        "GET" => {
            let mut r = a.get(url);
            if let Some(h) = &auth {
                r = r.header("Authorization", h);
            }
            r.call().unwrap()
        }
        _ => {
            let mut r = a.post(url).header("Content-Type", "application/json");
            if let Some(h) = &auth {
                r = r.header("Authorization", h);
            }
            r.send(body.unwrap_or(json!({})).to_string().as_str()).unwrap()
        }
    };
    (resp.status().as_u16(), resp.body_mut().read_to_string().unwrap())
}

fn json_of(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn full_session_over_http() {
    let s = start(None);
    let (code, body) = call("GET", &format!("{}/health", s.base), None, None);
    assert_eq!((code, body.as_str()), (200, "ok"));

    let create = json!({
        "id": "web",
        "collection": "syn",
        "strategy": {"kind": "lara"},
        "budget": 10,
        "seed": 1
    });
    let (code, body) = call("POST", &format!("{}/sessions", s.base), Some(create), None);
    assert_eq!(code, 201, "{body}");
    assert_eq!(json_of(&body)["status"], "active");

    let (code, body) = call("POST", &format!("{}/sessions/web/finalize", s.base), None, None);
    assert_eq!(code, 409);
    assert_eq!(json_of(&body)["error"], "SessionNotFinalizable");

    for i in 0..10 {
        let (code, body) = call("GET", &format!("{}/sessions/web/next?assessor=ann", s.base), None, None);
        assert_eq!(code, 200, "{body}");
        let item = json_of(&body);
        let key = lara_core::trec_io::PairKey::new(item["topic"].as_str().unwrap(), item["doc"].as_str().unwrap());
        let grade = s.collection.truth(s.collection.lookup(&key).unwrap());
        if i == 0 {
            let bad = json!({"assessor": "ann", "topic": key.topic, "doc": key.doc, "grade": 5});
            let (code, body) = call("POST", &format!("{}/sessions/web/judgments", s.base), Some(bad), None);
            assert_eq!(code, 422);
            assert_eq!(json_of(&body)["error"], "GradeOutOfRange");
        }
        let j = json!({"assessor": "ann", "topic": key.topic, "doc": key.doc, "grade": grade});
        let (code, body) = call("POST", &format!("{}/sessions/web/judgments", s.base), Some(j), None);
        assert_eq!(code, 200, "{body}");
        assert_eq!(json_of(&body)["judged"], i + 1);
    }
    let (_, body) = call("GET", &format!("{}/sessions/web", s.base), None, None);
    assert_eq!(json_of(&body)["status"], "exhausted");
    let (code, body) = call("GET", &format!("{}/sessions/web/next?assessor=ann", s.base), None, None);
    assert_eq!((code, json_of(&body)["error"].as_str()), (409, Some("Exhausted")));

    let (code, body) = call("GET", &format!("{}/sessions/web/calibration?points=3", s.base), None, None);
    assert_eq!(code, 200);
    assert_eq!(json_of(&body)["curves"]["1"].as_array().unwrap().len(), 3);

    let (code, body) = call("POST", &format!("{}/sessions/web/finalize", s.base), None, None);
    assert_eq!(code, 200, "{body}");
    assert_eq!(json_of(&body)["human"], 10);
    let (code, export) = call("GET", &format!("{}/sessions/web/export", s.base), None, None);
    assert_eq!(code, 200);
    assert_eq!(parse_qrels(export.as_bytes()).unwrap().len(), 100);

    let (code, _) = call("GET", &format!("{}/sessions/nope", s.base), None, None);
    assert_eq!(code, 404);
}

#[test]
fn token_is_enforced() {
    let s = start(Some("hunter2"));
    let url = format!("{}/sessions", s.base);
    assert_eq!(call("GET", &url, None, None).0, 401);
    assert_eq!(call("GET", &url, None, Some("wrong")).0, 401);
    let (code, body) = call("GET", &url, None, Some("hunter2"));
    assert_eq!(code, 200);
    assert_eq!(json_of(&body)["collections"], json!(["syn"]));
    assert_eq!(call("GET", &format!("{}/health", s.base), None, None).0, 200);
}

#[test]
fn malformed_requests_are_rejected() {
    let s = start(None);
    let url = format!("{}/sessions", s.base);
    let (code, _) = call("POST", &url, Some(json!({"collection": "syn"})), None);
    assert_eq!(code, 422);
    let (code, body) = call(
        "POST",
        &url,
        Some(json!({"collection": "syn", "strategy": {"kind": "lara"}, "budget": 5, "n": 9})),
        None,
    );
    assert_eq!(code, 400, "{body}");
    assert_eq!(json_of(&body)["error"], "InvalidConfig");
}
