use std::sync::{Arc, Mutex};

use mica_core::agents::{
    AgentRole, Backend, BackendError, CallPurpose, GenerationRequest, QueryContext, RemoteBackend,
    RemoteConfig, TemplateHint,
};

fn request() -> GenerationRequest {
    GenerationRequest {
        role: AgentRole::PartsAdvisor,
        purpose: CallPurpose::Propose,
        system: "You are the Parts Advisor.".into(),
        user: "Question: what is the shaft made of?".into(),
        hint: TemplateHint::Answer {
            evidence: vec![],
            context: QueryContext::default(),
        },
    }
}

/// Serves `replies` in order, then stops; returns the port and the bodies seen.
fn stub(
    replies: Vec<(u16, String)>,
) -> (
    u16,
    Arc<Mutex<Vec<serde_json::Value>>>,
    std::thread::JoinHandle<()>,
) {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let port = server.server_addr().to_ip().unwrap().port();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    let handle = std::thread::spawn(move || {
        for (status, body) in replies {
            let mut req = server.recv().unwrap();
            let mut raw = String::new();
            req.as_reader().read_to_string(&mut raw).unwrap();
            log.lock()
                .unwrap()
                .push(serde_json::from_str(&raw).unwrap());
            req.respond(tiny_http::Response::from_string(body).with_status_code(status))
                .unwrap();
        }
    });
    (port, seen, handle)
}

fn backend(port: u16, retries: u32) -> RemoteBackend {
    RemoteBackend::new(RemoteConfig {
        endpoint: format!("http://127.0.0.1:{port}/v1/chat/completions"),
        model: "stub".into(),
        timeout_s: 5.0,
        retries,
        ..RemoteConfig::default()
    })
}

#[test]
fn sends_greedy_chat_request_and_reads_usage() {
    let reply = r#"{"choices":[{"message":{"role":"assistant","content":"42CrMo4 steel."}}],"usage":{"completion_tokens":9}}"#;
    let (port, seen, handle) = stub(vec![(200, reply.into())]);
    let out = backend(port, 0).complete(&request()).unwrap();
    handle.join().unwrap();
    assert_eq!(out.text, "42CrMo4 steel.");
    assert_eq!(out.tokens, 9);
    let body = &seen.lock().unwrap()[0];
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["model"], "stub");
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(
        body["messages"][1]["content"],
        "Question: what is the shaft made of?"
    );
}

#[test]
fn missing_usage_falls_back_to_whitespace_count() {
    let reply = r#"{"choices":[{"message":{"content":"one two three"}}]}"#;
    let (port, _, handle) = stub(vec![(200, reply.into())]);
    let out = backend(port, 0).complete(&request()).unwrap();
    handle.join().unwrap();
    assert_eq!(out.tokens, 3);
}

#[test]
fn server_error_is_retried_then_reported() {
    let ok = r#"{"choices":[{"message":{"content":"fine"}}],"usage":{"completion_tokens":1}}"#;
    let (port, seen, handle) = stub(vec![(500, "boom".into()), (200, ok.into())]);
    assert_eq!(backend(port, 1).complete(&request()).unwrap().text, "fine");
    handle.join().unwrap();
    assert_eq!(seen.lock().unwrap().len(), 2);

    let (port, _, handle) = stub(vec![(500, "boom".into())]);
    let err = backend(port, 0).complete(&request()).unwrap_err();
    handle.join().unwrap();
    assert!(
        matches!(err, BackendError::Transport { attempts: 1, .. }),
        "{err}"
    );
}

#[test]
fn malformed_reply_is_an_error() {
    let (port, _, handle) = stub(vec![(200, r#"{"choices":[]}"#.into())]);
    assert!(backend(port, 0).complete(&request()).is_err());
    handle.join().unwrap();
}
