use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use persona_audit::backend::{Backend, BackendError, GenerationRequest, HttpBackend, RetryPolicy};
use tiny_http::{Header, Response, Server};

struct Scripted {
    url: String,
    hits: Arc<AtomicUsize>,
    bodies: Arc<Mutex<Vec<serde_json::Value>>>,
    auth: Arc<Mutex<Vec<String>>>,
}

/// Serves `script` in order, repeating the last entry once exhausted.
fn serve(script: Vec<(u16, String)>) -> Scripted {
    let server = Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}", server.server_addr().to_ip().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let auth = Arc::new(Mutex::new(Vec::new()));
    let (h, b, a) = (hits.clone(), bodies.clone(), auth.clone());
    thread::spawn(move || {
        for mut req in server.incoming_requests() {
            let n = h.fetch_add(1, Ordering::SeqCst);
            let mut body = String::new();
            req.as_reader().read_to_string(&mut body).unwrap();
            b.lock().unwrap().push(serde_json::from_str(&body).unwrap_or(serde_json::Value::Null));
            if let Some(v) = req.headers().iter().find(|h| h.field.equiv("Authorization")) {
                a.lock().unwrap().push(v.value.to_string());
            }
            let (status, text) = script[n.min(script.len() - 1)].clone();
            let resp = Response::from_string(text)
                .with_status_code(status)
                .with_header(Header::from_bytes("Content-Type", "application/json").unwrap());
            let _ = req.respond(resp);
        }
    });
    Scripted { url, hits, bodies, auth }
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        attempts: 5,
        base_delay_ms: 1,
        max_delay_ms: 4,
        jitter: false,
    }
}

fn request() -> GenerationRequest {
    GenerationRequest {
        model: "m".into(),
        system: "sys".into(),
        user: "usr".into(),
        temperature: 0.1,
        max_tokens: 8,
        trial_index: 0,
    }
}

fn chat(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

#[test]
fn retries_server_errors_then_succeeds() {
    let s = serve(vec![(500, "{}".into()), (429, "{}".into()), (200, chat("B"))]);
    let b = HttpBackend::new("m", &s.url, Some("secret".into())).with_retry(fast_retry());
    assert_eq!(b.generate(&request()).unwrap(), "B");
    assert_eq!(s.hits.load(Ordering::SeqCst), 3);
    assert_eq!(s.auth.lock().unwrap()[0], "Bearer secret");
    let body = &s.bodies.lock().unwrap()[2];
    assert_eq!(body["messages"][0]["content"], "sys");
    assert_eq!(body["max_tokens"], 8);
}

#[test]
fn gives_up_after_the_attempt_budget() {
    let s = serve(vec![(503, "{}".into())]);
    let b = HttpBackend::new("m", &s.url, None).with_retry(fast_retry());
    match b.generate(&request()) {
        Err(BackendError::Unavailable { attempts, .. }) => assert_eq!(attempts, 5),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(s.hits.load(Ordering::SeqCst), 5);
}

#[test]
fn client_errors_are_not_retried() {
    let s = serve(vec![(400, "{\"error\":\"bad model\"}".into())]);
    let b = HttpBackend::new("m", &s.url, None).with_retry(fast_retry());
    match b.generate(&request()) {
        Err(BackendError::Rejected { status, body }) => {
            assert_eq!(status, 400);
            assert!(body.contains("bad model"));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(s.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn malformed_chat_response_is_reported() {
    let s = serve(vec![(200, "{\"choices\":[]}".into())]);
    let b = HttpBackend::new("m", &s.url, None).with_retry(fast_retry());
    assert!(matches!(b.generate(&request()), Err(BackendError::MalformedResponse(_))));
}

#[test]
fn scoring_contract() {
    let tokens = serde_json::json!({"tokens": [
        {"text": "<s>", "logprob": -9.0, "special": true},
        {"text": "A", "logprob": -0.5, "special": false}
    ]});
    let s = serve(vec![(200, tokens.to_string())]);
    let b = HttpBackend::new("m", &s.url, None).with_scoring(true).with_retry(fast_retry());
    let scores = b.score_sequence("m", "Answer: A").unwrap();
    assert_eq!(scores.tokens.len(), 2);
    assert!(scores.tokens[0].special);
    let body = &s.bodies.lock().unwrap()[0];
    assert_eq!(body, &serde_json::json!({"model": "m", "text": "Answer: A"}));
}
