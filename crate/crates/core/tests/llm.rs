//! Closed-loop plan-selection checks with the mock transport, plus the
//! HTTP retry contract against a local server.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use prosotag::corpus::{generate_corpus, split_by_instruction, Label, RenderMode, SplitSpec};
use prosotag::llm::{
    eval_plan_selection, http_llm, query_from_sample, DisambiguationQuery, HttpConfig, LlmError,
    Transport,
};

fn queries_and_examples() -> (Vec<DisambiguationQuery>, Vec<DisambiguationQuery>) {
    let samples = generate_corpus(8, 2, 5, &RenderMode::Features).unwrap();
    let spec = SplitSpec::new(0.5, 0.25, 0.25, 5).unwrap();
    let (train, _, test) = split_by_instruction(&samples, &spec).unwrap();
    let mut examples = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for s in &train {
        if examples.len() == 3 {
            break;
        }
        if seen.insert(s.instruction_id) {
            examples.push(query_from_sample(s, s.labels.clone()).unwrap());
        }
    }
    let queries = test
        .iter()
        .map(|s| query_from_sample(s, s.labels.clone()).unwrap())
        .collect();
    (queries, examples)
}

#[test]
fn gold_tags_reach_perfect_accuracy() {
    let (queries, examples) = queries_and_examples();
    let result = eval_plan_selection(&queries, &examples, &Transport::Mock, "gold").unwrap();
    assert_eq!(result.accuracy, 1.0);
    assert!(result.rows.iter().all(|r| r.correct));
}

#[test]
fn all_o_tags_score_exactly_half_on_balanced_set() {
    let (queries, examples) = queries_and_examples();
    // Both interpretations of every instruction are present, so the
    // tie-break to PLAN 1 is right exactly half the time.
    let blank: Vec<DisambiguationQuery> = queries
        .iter()
        .map(|q| DisambiguationQuery {
            intent_tags: vec![Label::O; q.intent_tags.len()],
            ..q.clone()
        })
        .collect();
    let result = eval_plan_selection(&blank, &examples, &Transport::Mock, "none").unwrap();
    assert_eq!(result.accuracy, 0.5);
}

/// Minimal HTTP server: status codes per request from `plan`, then a valid
/// chat-completion body for the final entry.
fn spawn_server(plan: Vec<u16>) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    std::thread::spawn(move || {
        for status in plan {
            let (mut stream, _) = listener.accept().unwrap();
            counter.fetch_add(1, Ordering::SeqCst);
            // Drain the request head + body enough to respond.
            let mut buf = [0u8; 65536];
            let _ = stream.read(&mut buf);
            let body = if status == 200 {
                r#"{"choices":[{"message":{"content":"ANSWER: PLAN 2"}}]}"#
            } else {
                "oops"
            };
            let reason = if status == 200 { "OK" } else { "Internal Server Error" };
            let response = format!(
                "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            let _ = stream.write_all(response.as_bytes());
        }
    });
    (format!("http://{addr}"), hits)
}

fn fast_config(endpoint: &str, env: &str) -> HttpConfig {
    HttpConfig {
        backoff_base_ms: 1,
        api_key_env: env.to_string(),
        ..HttpConfig::new(endpoint, "test-model")
    }
}

#[test]
fn http_retries_through_two_failures() {
    let (endpoint, hits) = spawn_server(vec![500, 500, 200]);
    std::env::set_var("LLM_TEST_KEY_RETRY", "k");
    let config = fast_config(&endpoint, "LLM_TEST_KEY_RETRY");
    let response = http_llm("prompt", &config).unwrap();
    assert_eq!(response, "ANSWER: PLAN 2");
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn http_gives_up_after_max_retries() {
    let (endpoint, hits) = spawn_server(vec![500, 500, 500, 500]);
    std::env::set_var("LLM_TEST_KEY_FAIL", "k");
    let config = fast_config(&endpoint, "LLM_TEST_KEY_FAIL");
    match http_llm("prompt", &config) {
        Err(LlmError::Transport(m)) => assert!(m.contains("3"), "message: {m}"),
        other => panic!("expected transport error, got {other:?}"),
    }
    assert_eq!(hits.load(Ordering::SeqCst), 4); // initial try + 3 retries
}

#[test]
fn missing_credential_fails_before_any_request() {
    let (endpoint, hits) = spawn_server(vec![200]);
    let config = fast_config(&endpoint, "LLM_TEST_KEY_UNSET");
    match http_llm("prompt", &config) {
        Err(LlmError::Config(m)) => assert!(m.contains("LLM_TEST_KEY_UNSET")),
        other => panic!("expected config error, got {other:?}"),
    }
    assert_eq!(hits.load(Ordering::SeqCst), 0);
}
