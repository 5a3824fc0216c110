use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use scene_novelty::embedding::SceneRecord;
use scene_novelty::providers::{
    caption_image, complete_text, embed_image, Captioner, ClientConfig, ImageEmbedder, ProviderError, SecretString, TextCompleter,
    WireCaptioner, WireCompleter, WireEmbedder,
};

#[derive(Debug, Clone)]
struct Seen {
    method: String,
    path: String,
    auth: Option<String>,
    body: serde_json::Value,
}

/// Serves scripted `(status, body)` responses in order, one per connection,
/// and records what it was sent.
fn serve(script: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body) in script {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let mut parts = line.split_whitespace();
            let method = parts.next().unwrap_or_default().to_string();
            let path = parts.next().unwrap_or_default().to_string();
            let (mut len, mut auth) = (0, None);
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                if h.trim().is_empty() {
                    break;
                }
                let (k, v) = h.split_once(':').unwrap();
                match k.to_ascii_lowercase().as_str() {
                    "content-length" => len = v.trim().parse().unwrap(),
                    "authorization" => auth = Some(v.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            let body_json = serde_json::from_slice(&buf).unwrap_or(serde_json::Value::Null);
            log.lock().unwrap().push(Seen { method, path, auth, body: body_json });
            let mut stream = stream;
            let resp = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        }
    });
    (format!("http://{addr}"), seen)
}

fn config(endpoint: &str) -> ClientConfig {
    let mut c = ClientConfig::new(endpoint);
    c.timeout_secs = 5.0;
    c.backoff.initial_ms = 1;
    c.model_name = "test-model".into();
    c
}

#[test]
fn embed_request_shape_and_health() {
    let (url, seen) = serve(vec![
        (200, r#"{"id":"scene-1","dim":3,"vec":[0.0,0.6,0.8]}"#.into()),
        (200, r#"{"status":"ok","dim":3,"model":"enc"}"#.into()),
    ]);
    let mut c = config(&url);
    c.auth_token = Some(SecretString::new("tok123"));
    let e = WireEmbedder::new(c).unwrap();
    let v = embed_image(&e, "scene-1", b"\x89PNG", Some(3)).unwrap();
    assert_eq!(v.components(), &[0.0, 0.6, 0.8]);
    let h = e.health().unwrap();
    assert_eq!((h.status.as_str(), h.dim), ("ok", 3));
    let seen = seen.lock().unwrap();
    assert_eq!((seen[0].method.as_str(), seen[0].path.as_str()), ("POST", "/embed"));
    assert_eq!(seen[0].body["id"], "scene-1");
    assert_eq!(seen[0].body["image_b64"], "iVBORw==");
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer tok123"));
    assert_eq!((seen[1].method.as_str(), seen[1].path.as_str()), ("GET", "/health"));
}

#[test]
fn embed_dim_mismatch_and_bad_payload() {
    let (url, _) = serve(vec![
        (200, r#"{"id":"a","dim":2,"vec":[1.0,0.0]}"#.into()),
        (200, r#"{"id":"a","dim":3,"vec":[1.0,0.0]}"#.into()),
        (200, r#"{"id":"other","dim":2,"vec":[1.0,0.0]}"#.into()),
    ]);
    let e = WireEmbedder::new(config(&url)).unwrap();
    assert_eq!(embed_image(&e, "a", b"x", Some(4)), Err(ProviderError::DimMismatch { expected: 4, found: 2 }));
    assert!(matches!(e.embed("a", b"x"), Err(ProviderError::Protocol(_))));
    assert!(matches!(e.embed("a", b"x"), Err(ProviderError::Protocol(_))));
}

#[test]
fn transient_failures_are_retried() {
    let (url, seen) = serve(vec![
        (503, "busy".into()),
        (429, "slow down".into()),
        (200, r#"{"text":"fog"}"#.into()),
    ]);
    let mut c = config(&url);
    c.temperature = 0.0;
    c.max_tokens = 64;
    let llm = WireCompleter::new(c).unwrap();
    assert_eq!(complete_text(&llm, "what is new?").unwrap(), "fog");
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert_eq!(seen[2].path, "/complete");
    assert_eq!(seen[2].body["prompt"], "what is new?");
    assert_eq!(seen[2].body["max_tokens"], 64);
    assert_eq!(seen[2].body["temperature"], 0.0);
}

#[test]
fn status_and_body_excerpt_are_surfaced() {
    let long = "x".repeat(1000);
    let (url, _) = serve(vec![(400, format!("bad request: {long}"))]);
    let llm = WireCompleter::new(config(&url)).unwrap();
    match llm.complete("p") {
        Err(ProviderError::Status { status, body_excerpt }) => {
            assert_eq!(status, 400);
            assert!(body_excerpt.starts_with("bad request: "));
            assert!(body_excerpt.chars().count() < 300);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn exhausted_retries_report_attempts() {
    let (url, seen) = serve(vec![(500, "e1".into()), (500, "e2".into())]);
    let mut c = config(&url);
    c.max_retries = 1;
    let llm = WireCompleter::new(c).unwrap();
    let err = llm.complete("p").unwrap_err();
    assert!(matches!(err, ProviderError::Exhausted { attempts: 2, .. }), "{err:?}");
    assert!(err.is_transport());
    assert_eq!(seen.lock().unwrap().len(), 2);
}

#[test]
fn unreachable_endpoint_is_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut c = config(&format!("http://127.0.0.1:{port}"));
    c.max_retries = 1;
    let llm = WireCompleter::new(c).unwrap();
    let err = llm.complete("p").unwrap_err();
    assert!(err.is_transport(), "{err:?}");
}

#[test]
fn caption_reads_source_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("img.png"), b"abc").unwrap();
    let (url, seen) = serve(vec![(200, r#"{"id":"s1","text":"a foggy road"}"#.into()), (200, r#"{"id":"s1","text":"  "}"#.into())]);
    let vlm = WireCaptioner::new(config(&url), Some(dir.path().to_path_buf())).unwrap();
    let scene = SceneRecord::new("s1").with_source("img.png");
    assert_eq!(caption_image(&vlm, &scene, "describe").unwrap(), "a foggy road");
    assert_eq!(caption_image(&vlm, &scene, "describe"), Err(ProviderError::EmptyResponse));
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/caption");
    assert_eq!(seen[0].body["image_b64"], "YWJj");
    assert_eq!(seen[0].body["prompt"], "describe");
    let missing = SceneRecord::new("s2").with_source("nope.png");
    assert!(matches!(vlm.caption(&missing, "p"), Err(ProviderError::InvalidInput(_))));
}

#[test]
fn endpoint_path_prefix_is_kept() {
    let (url, seen) = serve(vec![(200, r#"{"text":"ok"}"#.into())]);
    let llm = WireCompleter::new(config(&format!("{url}/v1"))).unwrap();
    llm.complete("p").unwrap();
    assert_eq!(seen.lock().unwrap()[0].path, "/v1/complete");
}
