//! The HTTP backend against a local stub endpoint.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use permgate_core::backend::{
    BackendErrorKind, CompletionRequest, DecisionBackend, RemoteBackend, RemoteConfig,
};
use permgate_core::engine::{decide, DecisionInput, OutcomeStatus, ThresholdConfig};
use permgate_core::model::{AccessRequest, AppProfile, ModelConfig, Permission, TaskType};
use permgate_core::prompt::assemble;
use serde_json::{json, Value};

struct Captured {
    headers: Vec<String>,
    body: Value,
}

enum Reply {
    Json(u16, Value),
    Stall(Duration),
}

/// Serves one reply per connection, in order, and reports what it received.
fn serve(replies: Vec<Reply>) -> (String, mpsc::Receiver<Captured>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!(
        "http://{}/v1/chat/completions",
        listener.local_addr().unwrap()
    );
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for reply in replies {
            let (stream, _) = listener.accept().unwrap();
            let captured = read_request(&stream);
            let _ = tx.send(captured);
            respond(stream, reply);
        }
    });
    (url, rx)
}

fn read_request(stream: &TcpStream) -> Captured {
    let mut reader = BufReader::new(stream);
    let mut headers = Vec::new();
    let mut length = 0;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        let line = line.trim_end().to_owned();
        if line.is_empty() {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            length = v.trim().parse().unwrap();
        }
        headers.push(line);
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).unwrap();
    Captured {
        headers,
        body: serde_json::from_slice(&body).unwrap(),
    }
}

fn respond(mut stream: TcpStream, reply: Reply) {
    match reply {
        Reply::Json(status, body) => {
            let text = body.to_string();
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{text}",
                text.len()
            );
        }
        Reply::Stall(d) => thread::sleep(d),
    }
}

fn completion(content: &str, tokens: Option<Vec<(&str, f64)>>) -> Value {
    let mut choice = json!({"index": 0, "message": {"role": "assistant", "content": content}});
    if let Some(tokens) = tokens {
        choice["logprobs"] = json!({
            "content": tokens.iter().map(|(t, l)| json!({"token": t, "logprob": l})).collect::<Vec<_>>()
        });
    }
    json!({"choices": [choice]})
}

fn tokens_for(content: &str, decision_logprob: f64) -> Vec<(&str, f64)> {
    // split `{"decision":"deny",...}` so that `deny` is its own token
    let at = content.find("deny").unwrap();
    vec![
        (&content[..at], -0.01),
        ("deny", decision_logprob),
        (&content[at + 4..], -0.2),
    ]
}

fn request() -> AccessRequest {
    AccessRequest::with_scenario(
        "foodguide-location",
        AppProfile::new("FoodGuide", "Food & Drink", "Recipe guide.").unwrap(),
        Permission::Location,
        TaskType::Discretionary,
        "You open the app to browse recipes.",
    )
    .unwrap()
}

fn backend(
    url: String,
    timeout_secs: u64,
    require_logprobs: bool,
    key_env: Option<&str>,
) -> RemoteBackend {
    RemoteBackend::new(RemoteConfig {
        endpoint: url,
        api_key_env: key_env.map(str::to_owned),
        timeout_secs,
        require_logprobs,
    })
    .unwrap()
}

fn call(
    b: &RemoteBackend,
    model: &ModelConfig,
) -> Result<permgate_core::backend::RawCompletion, permgate_core::backend::BackendError> {
    let req = request();
    let messages = assemble(None, &req, &[], None);
    b.complete(&CompletionRequest {
        messages: &messages,
        model,
        user_id: &"alice".into(),
        task_id: &req.id,
    })
}

#[test]
fn decision_and_logprob_are_extracted() {
    let content = r#"{"decision":"deny","justification":"Recipes do not need location."}"#;
    let (url, rx) = serve(vec![Reply::Json(
        200,
        completion(content, Some(tokens_for(content, 0.76f64.ln()))),
    )]);
    std::env::set_var("PERMGATE_TEST_KEY_A", "sk-test");
    let b = backend(url, 5, true, Some("PERMGATE_TEST_KEY_A"));
    let raw = call(&b, &ModelConfig::personalized("gpt-4o")).unwrap();
    assert_eq!(raw.decision_token, "deny");
    assert!((raw.decision_token_logprob.unwrap().exp() - 0.76).abs() < 1e-9);

    let seen = rx.recv().unwrap();
    assert!(seen
        .headers
        .iter()
        .any(|h| h.eq_ignore_ascii_case("authorization: Bearer sk-test")));
    assert_eq!(seen.body["model"], "gpt-4o");
    assert_eq!(seen.body["logprobs"], true);
    assert_eq!(seen.body["temperature"], 0.0);
    assert_eq!(seen.body["messages"][0]["role"], "system");
    assert_eq!(
        seen.body["response_format"]["json_schema"]["schema"]["properties"]["decision"]["enum"],
        json!(["allow", "once", "deny"])
    );
}

#[test]
fn no_logprobs_requested_when_confidence_is_off() {
    let content = r#"{"decision":"allow","justification":"ok"}"#;
    let (url, rx) = serve(vec![Reply::Json(200, completion(content, None))]);
    let b = backend(url, 5, false, None);
    let model = ModelConfig {
        request_confidence: false,
        ..ModelConfig::generic("mistral")
    };
    let raw = call(&b, &model).unwrap();
    assert_eq!(raw.decision_token_logprob, None);
    let seen = rx.recv().unwrap();
    assert!(seen.body.get("logprobs").is_none());
    assert!(!seen
        .headers
        .iter()
        .any(|h| h.to_ascii_lowercase().starts_with("authorization")));
}

#[test]
fn missing_logprobs_is_an_error_when_required() {
    let content = r#"{"decision":"allow","justification":"ok"}"#;
    let (url, _rx) = serve(vec![Reply::Json(200, completion(content, None))]);
    let err = call(&backend(url, 5, true, None), &ModelConfig::generic("m")).unwrap_err();
    assert_eq!(err.kind, BackendErrorKind::MissingLogprobs);
}

#[test]
fn server_error_and_timeout_defer() {
    let (url, _rx) = serve(vec![
        Reply::Json(500, json!({"error": "boom"})),
        Reply::Json(500, json!({"error": "boom"})),
        Reply::Json(500, json!({"error": "boom"})),
    ]);
    let b = backend(url, 5, false, None);
    let req = request();
    let model = ModelConfig::generic("m");
    let outcome = decide(
        &b,
        Default::default(),
        &DecisionInput {
            user_id: &"alice".into(),
            request: &req,
            statement: None,
            thresholds: ThresholdConfig::new(0.0, 0.0).unwrap(),
            model: &model,
            examples: &[],
            general_feedback: None,
        },
    );
    assert_eq!(outcome.status, OutcomeStatus::Deferred);
    assert_eq!(outcome.error.unwrap().kind, BackendErrorKind::Transport);

    let (url, _rx) = serve(vec![Reply::Stall(Duration::from_secs(3))]);
    let err = call(&backend(url, 1, false, None), &model).unwrap_err();
    assert_eq!(err.kind, BackendErrorKind::Timeout);
}

#[test]
fn unstructured_content_is_invalid_output() {
    let (url, _rx) = serve(vec![Reply::Json(
        200,
        completion("I would deny this.", None),
    )]);
    let err = call(&backend(url, 5, false, None), &ModelConfig::generic("m")).unwrap_err();
    assert_eq!(err.kind, BackendErrorKind::InvalidOutput);
}
