//! Minimal HTTP/1.1 server speaking the backend wire protocol on top of the
//! mock backends, with fault injection keyed on the model tag:
//!
//! - `flaky-N`: the first N requests fail with a retryable 503
//! - `reject`: every request fails with a non-retryable 400
//! - `slow`: each request takes 30 ms (for concurrency accounting)
//! - `wrongdim`: embeddings come back with one value too many

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use lavad_core::backends::{
    BackendKind, Captioner, FrameRef, ImageEncoder, Llm, MockBackend, MockFixture, SnippetRef, TextEncoder,
    VideoEncoder,
};
use lavad_core::model::TemporalWindow;
use serde_json::{json, Value};

#[derive(Default)]
pub struct Stats {
    pub requests: AtomicUsize,
    pub inflight: AtomicUsize,
    pub max_inflight: AtomicUsize,
    pub auth_headers: Mutex<Vec<Option<String>>>,
}

pub struct MockServer {
    pub url: String,
    pub stats: Arc<Stats>,
}

struct State {
    fixture: Arc<MockFixture>,
    stats: Arc<Stats>,
    per_model: Mutex<BTreeMap<String, usize>>,
}

impl MockServer {
    pub fn start(fixture: MockFixture) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let stats = Arc::new(Stats::default());
        let state = Arc::new(State {
            fixture: Arc::new(fixture),
            stats: stats.clone(),
            per_model: Mutex::new(BTreeMap::new()),
        });
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let state = state.clone();
                std::thread::spawn(move || serve(stream, &state));
            }
        });
        Self { url, stats }
    }
}

fn serve(stream: TcpStream, state: &State) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    loop {
        let mut request_line = String::new();
        if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
            return;
        }
        let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
        let mut length = 0;
        let mut auth = None;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let line = line.trim_end();
            if line.is_empty() {
                break;
            }
            let (k, v) = line.split_once(':').unwrap();
            match k.to_ascii_lowercase().as_str() {
                "content-length" => length = v.trim().parse().unwrap(),
                "authorization" => auth = Some(v.trim().to_string()),
                _ => {}
            }
        }
        let mut body = vec![0u8; length];
        reader.read_exact(&mut body).unwrap();
        state.stats.auth_headers.lock().unwrap().push(auth);

        let now = state.stats.inflight.fetch_add(1, Ordering::SeqCst) + 1;
        state.stats.max_inflight.fetch_max(now, Ordering::SeqCst);
        state.stats.requests.fetch_add(1, Ordering::SeqCst);
        let (status, reply) = handle(state, &path, &body);
        state.stats.inflight.fetch_sub(1, Ordering::SeqCst);

        let text = reply.to_string();
        let head = format!(
            "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n",
            text.len()
        );
        if writer.write_all(head.as_bytes()).and_then(|_| writer.write_all(text.as_bytes())).is_err() {
            return;
        }
    }
}

fn error(status: u16, retryable: bool, message: &str) -> (u16, Value) {
    (status, json!({"error": {"retryable": retryable, "message": message}}))
}

/// `.../{video_id}/{frame}.jpg` or `.../{frame}.jpg`.
fn frame_from_uri(uri: &str) -> FrameRef {
    let mut parts = uri.rsplit('/');
    let file = parts.next().unwrap_or("");
    let frame_index = file.split('.').next().unwrap_or("0").parse().unwrap_or(0);
    let video_id = parts.next().unwrap_or("video").to_string();
    FrameRef {
        video_id,
        frame_index,
        uri: uri.to_string(),
    }
}

/// `{root}#t={start},{end}&frames=a,b,c` with root `.../{video_id}.mp4`.
fn snippet_from_input(input: &str) -> Option<SnippetRef> {
    let (root, fragment) = input.split_once('#')?;
    let (t, frames) = fragment.split_once("&frames=")?;
    let (s, e) = t.strip_prefix("t=")?.split_once(',')?;
    let members: Vec<usize> = frames.split(',').map(|f| f.parse().ok()).collect::<Option<_>>()?;
    let video_id = root.rsplit('/').next()?.trim_end_matches(".mp4").to_string();
    Some(SnippetRef {
        video_id,
        root_uri: root.to_string(),
        window: TemporalWindow {
            center_frame: members[members.len() / 2],
            start_s: s.parse().ok()?,
            end_s: e.parse().ok()?,
            member_frames: members,
        },
    })
}

fn handle(state: &State, path: &str, body: &[u8]) -> (u16, Value) {
    let Ok(req) = serde_json::from_slice::<Value>(body) else {
        return error(400, false, "body is not JSON");
    };
    let Some(model) = req.get("model").and_then(Value::as_str).map(str::to_string) else {
        return error(400, false, "missing model");
    };
    let seen = {
        let mut m = state.per_model.lock().unwrap();
        let c = m.entry(model.clone()).or_default();
        *c += 1;
        *c
    };
    if let Some(n) = model.strip_prefix("flaky-").and_then(|n| n.parse::<usize>().ok()) {
        if seen <= n {
            return error(503, true, "warming up");
        }
    }
    if model == "reject" {
        return error(400, false, "rejected by policy");
    }
    if model == "slow" {
        std::thread::sleep(Duration::from_millis(30));
    }
    if model.starts_with("no-such") {
        return error(404, false, &format!("unknown model {model}"));
    }
    let kind = match path {
        "/v1/caption" => BackendKind::Captioner,
        "/v1/complete" => BackendKind::Llm,
        "/v1/embed" => match req.get("modality").and_then(Value::as_str) {
            Some("text") => BackendKind::TextEncoder,
            Some("image") => BackendKind::ImageEncoder,
            Some("video") => BackendKind::VideoEncoder,
            _ => return error(400, false, "bad modality"),
        },
        _ => return error(404, false, "no such route"),
    };
    let mock = MockBackend::of_kind(kind, &model, state.fixture.clone());
    let field = |k: &str| req.get(k).and_then(Value::as_str).map(str::to_string);
    let result = match kind {
        BackendKind::Captioner => match field("uri") {
            Some(uri) => mock.caption(&frame_from_uri(&uri)).map(|t| json!({"text": t})),
            None => return error(400, false, "missing uri"),
        },
        BackendKind::Llm => match field("prompt") {
            Some(p) => mock.complete(&p).map(|t| json!({"text": t})),
            None => return error(400, false, "missing prompt"),
        },
        _ => {
            let Some(input) = field("input") else {
                return error(400, false, "missing input");
            };
            let v = match kind {
                BackendKind::TextEncoder => mock.embed_text(&input),
                BackendKind::ImageEncoder => mock.embed_image(&frame_from_uri(&input)),
                _ => match snippet_from_input(&input) {
                    Some(s) => mock.embed_video(&s),
                    None => return error(400, false, "bad snippet input"),
                },
            };
            v.map(|e| {
                let mut values = e.values().to_vec();
                if model == "wrongdim" {
                    values.push(0.0);
                }
                json!({"embedding": values, "dim": values.len()})
            })
        }
    };
    match result {
        Ok(v) => (200, v),
        Err(e) => error(422, false, &e.to_string()),
    }
}
