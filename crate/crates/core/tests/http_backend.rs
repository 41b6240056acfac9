//! Contract tests for the HTTP completion backend against an in-process stub
//! server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use powerllm_core::backend::{build_backend, BackendConfig, BackendError, BackendKind, CompletionRequest};
use powerllm_core::harness::{run_experiment, RunConfig, Strategy};
use powerllm_core::solvers::GridSpec;

#[derive(Debug, Clone)]
struct Captured {
    path: String,
    authorization: Option<String>,
    body: serde_json::Value,
}

/// What the stub answers for the n-th request (0-based).
type Responder = dyn Fn(usize, &serde_json::Value) -> (u16, String) + Send + Sync;

struct Stub {
    url: String,
    requests: Arc<Mutex<Vec<Captured>>>,
    peak_inflight: Arc<AtomicUsize>,
}

fn spawn_stub(delay: Duration, responder: Arc<Responder>) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
    let requests = Arc::new(Mutex::new(Vec::new()));
    let inflight = Arc::new(AtomicUsize::new(0));
    let peak_inflight = Arc::new(AtomicUsize::new(0));
    let counter = Arc::new(AtomicUsize::new(0));
    {
        let requests = requests.clone();
        let peak = peak_inflight.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let (requests, inflight, peak, counter, responder) =
                    (requests.clone(), inflight.clone(), peak.clone(), counter.clone(), responder.clone());
                thread::spawn(move || {
                    serve(stream, delay, &requests, &inflight, &peak, &counter, responder.as_ref())
                });
            }
        });
    }
    Stub { url, requests, peak_inflight }
}

fn serve(
    stream: TcpStream,
    delay: Duration,
    requests: &Mutex<Vec<Captured>>,
    inflight: &AtomicUsize,
    peak: &AtomicUsize,
    counter: &AtomicUsize,
    responder: &Responder,
) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    loop {
        let mut request_line = String::new();
        if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
            return;
        }
        let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
        let mut content_length = 0;
        let mut authorization = None;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let line = line.trim_end();
            if line.is_empty() {
                break;
            }
            let (name, value) = line.split_once(':').unwrap();
            match name.to_ascii_lowercase().as_str() {
                "content-length" => content_length = value.trim().parse().unwrap(),
                "authorization" => authorization = Some(value.trim().to_string()),
                _ => {}
            }
        }
        let mut body = vec![0; content_length];
        reader.read_exact(&mut body).unwrap();
        let body: serde_json::Value = serde_json::from_slice(&body).unwrap();

        let now = inflight.fetch_add(1, Ordering::SeqCst) + 1;
        peak.fetch_max(now, Ordering::SeqCst);
        thread::sleep(delay);
        let n = counter.fetch_add(1, Ordering::SeqCst);
        let (status, payload) = responder(n, &body);
        requests.lock().unwrap().push(Captured { path, authorization, body });
        inflight.fetch_sub(1, Ordering::SeqCst);

        let reason = if status == 200 { "OK" } else { "Error" };
        let response = format!(
            "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{payload}",
            payload.len()
        );
        if writer.write_all(response.as_bytes()).is_err() {
            return;
        }
    }
}

fn completion_json(text: &str) -> String {
    serde_json::json!({ "choices": [{ "text": text, "index": 0 }] }).to_string()
}

fn http_config(url: &str) -> BackendConfig {
    BackendConfig {
        kind: BackendKind::HttpCompletion,
        endpoint_url: Some(url.to_string()),
        model: "test-model".into(),
        backoff_base_ms: 5,
        timeout_secs: 5.0,
        ..Default::default()
    }
}

#[test]
fn sends_completion_body_and_reads_first_choice() {
    let stub = spawn_stub(Duration::ZERO, Arc::new(|_, _| (200, completion_json(" 12, 88"))));
    std::env::set_var("POWERLLM_STUB_KEY", "sekret");
    let cfg = BackendConfig { api_key_env: Some("POWERLLM_STUB_KEY".into()), ..http_config(&stub.url) };
    let backend = build_backend(&cfg).unwrap();
    let text = backend.complete(&cfg.request("If A is 1, 2, 3, 4, then B is ")).unwrap();
    assert_eq!(text, " 12, 88");

    let captured = stub.requests.lock().unwrap().clone();
    assert_eq!(captured.len(), 1);
    let req = &captured[0];
    assert_eq!(req.path, "/v1/completions");
    assert_eq!(req.authorization.as_deref(), Some("Bearer sekret"));
    assert_eq!(
        req.body,
        serde_json::json!({
            "model": "test-model",
            "prompt": "If A is 1, 2, 3, 4, then B is ",
            "max_tokens": 16,
            "temperature": 0.0,
            "stop": ["."],
        })
    );
}

#[test]
fn no_auth_header_without_credential_variable() {
    let stub = spawn_stub(Duration::ZERO, Arc::new(|_, _| (200, completion_json("1, 2"))));
    let backend = build_backend(&http_config(&stub.url)).unwrap();
    backend.complete(&CompletionRequest::new("p")).unwrap();
    assert_eq!(stub.requests.lock().unwrap()[0].authorization, None);
}

#[test]
fn retries_server_errors_then_succeeds() {
    let stub = spawn_stub(
        Duration::ZERO,
        Arc::new(|n, _| if n < 2 { (503, "busy".into()) } else { (200, completion_json("7, 9")) }),
    );
    let backend = build_backend(&http_config(&stub.url)).unwrap();
    assert_eq!(backend.complete(&CompletionRequest::new("p")).unwrap(), "7, 9");
    assert_eq!(stub.requests.lock().unwrap().len(), 3);
}

#[test]
fn gives_up_after_configured_retries() {
    let stub = spawn_stub(Duration::ZERO, Arc::new(|_, _| (500, "boom".into())));
    let cfg = BackendConfig { retries: 1, ..http_config(&stub.url) };
    let backend = build_backend(&cfg).unwrap();
    let err = backend.complete(&CompletionRequest::new("p")).unwrap_err();
    assert!(matches!(err, BackendError::Status { status: 500, .. }), "{err}");
    assert!(!err.is_fatal());
    assert_eq!(stub.requests.lock().unwrap().len(), 2);
}

#[test]
fn response_without_choices_is_an_error() {
    let stub = spawn_stub(Duration::ZERO, Arc::new(|_, _| (200, "{\"choices\": []}".into())));
    let cfg = BackendConfig { retries: 0, ..http_config(&stub.url) };
    let err = build_backend(&cfg).unwrap().complete(&CompletionRequest::new("p")).unwrap_err();
    assert!(matches!(err, BackendError::InvalidResponse(_)));
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = BackendConfig { retries: 1, ..http_config(&format!("http://127.0.0.1:{port}/v1/completions")) };
    let err = build_backend(&cfg).unwrap().complete(&CompletionRequest::new("p")).unwrap_err();
    assert!(matches!(err, BackendError::Transport(_)), "{err}");
}

#[test]
fn batch_respects_max_inflight() {
    let stub = spawn_stub(Duration::from_millis(40), Arc::new(|_, _| (200, completion_json("1, 1"))));
    let cfg = BackendConfig { max_inflight: 3, ..http_config(&stub.url) };
    let backend = build_backend(&cfg).unwrap();
    let reqs: Vec<_> = (0..12).map(|i| CompletionRequest::new(format!("prompt {i}"))).collect();
    let results = backend.complete_batch(&reqs);
    assert!(results.iter().all(|r| matches!(r.as_deref(), Ok("1, 1"))));
    let peak = stub.peak_inflight.load(Ordering::SeqCst);
    assert!(peak <= 3, "peak in-flight {peak}");
    assert!(peak >= 2, "batch was not concurrent (peak {peak})");
}

#[test]
fn experiment_over_http_echoes_prompt_labels() {
    // The stub answers every prompt with its first shot's label, or garbage
    // for every fourth request, which must degrade to parse failures.
    let stub = spawn_stub(
        Duration::ZERO,
        Arc::new(|n, body| {
            if n % 4 == 3 {
                return (200, completion_json(" no idea"));
            }
            let prompt = body["prompt"].as_str().unwrap();
            let label = prompt.split("then B is ").nth(1).unwrap().split('.').next().unwrap();
            (200, completion_json(&format!(" {label}")))
        }),
    );
    let cfg = RunConfig {
        n_shots_list: vec![5],
        n_trials: 8,
        grid: GridSpec::new(11).unwrap(),
        backend: BackendConfig { max_inflight: 2, ..http_config(&stub.url) },
        ..Default::default()
    };
    let backend = build_backend(&cfg.backend).unwrap();
    let out = run_experiment(&cfg, backend.as_ref()).unwrap();
    assert_eq!(out.records.len(), 8);
    let failures = out.records.iter().filter(|r| !r.parse_ok).count();
    assert_eq!(failures, 2);
    for r in out.records.iter().filter(|r| !r.parse_ok) {
        assert_eq!(r.outcome(Strategy::Prop1).value, 0.0);
    }
}

#[test]
fn missing_credential_is_a_config_error() {
    let cfg = BackendConfig { api_key_env: Some("POWERLLM_NOT_SET_ANYWHERE".into()), ..http_config("http://127.0.0.1:1/") };
    assert!(matches!(build_backend(&cfg), Err(BackendError::Config(_))));
}
