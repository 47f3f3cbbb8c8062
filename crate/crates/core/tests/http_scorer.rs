use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chill_core::scorer::{HttpScorer, HttpScorerConfig, ScorerError};
use chill_core::{ScoreRequest, Scorer};

#[derive(Debug, Clone)]
struct Seen {
    authorization: Option<String>,
    body: String,
}

/// Serves the canned `(status, body)` replies in order, one per connection,
/// and records each request.
fn fake_server(replies: Vec<(u16, &'static str)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    std::thread::spawn(move || {
        for (status, body) in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            let mut authorization = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                if let Some((name, value)) = line.split_once(':') {
                    match name.to_ascii_lowercase().as_str() {
                        "content-length" => length = value.trim().parse().unwrap(),
                        "authorization" => authorization = Some(value.trim().to_string()),
                        _ => {}
                    }
                }
            }
            let mut raw = vec![0; length];
            reader.read_exact(&mut raw).unwrap();
            log.lock().unwrap().push(Seen {
                authorization,
                body: String::from_utf8(raw).unwrap(),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen)
}

fn scorer(url: &str) -> HttpScorer {
    let mut config = HttpScorerConfig::new(url);
    config.initial_backoff = Duration::from_millis(5);
    config.token = Some("secret".into());
    HttpScorer::new(config).unwrap()
}

const OK: &str = r#"{"logprobs":{"yes":-0.25,"no":-1.5},"prompt_token_count":12}"#;

#[test]
fn sends_wire_request_with_bearer_token() {
    let (url, seen) = fake_server(vec![(200, OK)]);
    let r = scorer(&url).score(&ScoreRequest::for_query("Is it? ", "q1")).unwrap();
    assert_eq!((r.logprob_yes, r.logprob_no, r.prompt_token_count), (-0.25, -1.5, Some(12)));
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer secret"));
    let body: serde_json::Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(body, serde_json::json!({"prompt": "Is it? ", "candidates": ["yes", "no"]}));
}

#[test]
fn three_unavailable_responses_exhaust_retries() {
    let (url, seen) = fake_server(vec![(503, "busy"), (503, "busy"), (503, "busy")]);
    match scorer(&url).score(&ScoreRequest::new("p")) {
        Err(ScorerError::Unavailable { attempts, message }) => {
            assert_eq!(attempts, 3);
            assert!(message.contains("503"), "{message}");
        }
        other => panic!("expected Unavailable, got {other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn transient_failure_then_success() {
    let (url, seen) = fake_server(vec![(429, "slow down"), (500, "oops"), (200, OK)]);
    let r = scorer(&url).score(&ScoreRequest::new("p")).unwrap();
    assert_eq!(r.logprob_yes, -0.25);
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_error_is_not_retried() {
    let (url, seen) = fake_server(vec![(400, "bad prompt"), (200, OK)]);
    match scorer(&url).score(&ScoreRequest::new("p")) {
        Err(ScorerError::Status { status: 400, body }) => assert_eq!(body, "bad prompt"),
        other => panic!("expected Status, got {other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn malformed_body_is_schema_error() {
    let (url, _) = fake_server(vec![(200, r#"{"logprobs":{"no":-1}}"#)]);
    match scorer(&url).score(&ScoreRequest::new("p")) {
        Err(ScorerError::Schema { body, .. }) => assert!(body.contains("logprobs")),
        other => panic!("expected Schema, got {other:?}"),
    }
}

#[test]
fn refused_connection_is_unavailable() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let r = scorer(&format!("http://127.0.0.1:{port}")).score(&ScoreRequest::new("p"));
    assert!(matches!(r, Err(ScorerError::Unavailable { attempts: 3, .. })), "{r:?}");
}

#[test]
fn bad_candidates_rejected_before_sending() {
    let mut req = ScoreRequest::new("p");
    req.candidates = vec!["Yes".into(), "No".into()];
    let r = scorer("http://127.0.0.1:9").score(&req);
    assert!(matches!(r, Err(ScorerError::InvalidRequest(_))));
}
