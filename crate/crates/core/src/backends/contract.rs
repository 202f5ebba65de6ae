//! Protocol conformance checks for a backend service.
//!
//! Any adapter serving the wire protocol should pass every check for each
//! model it hosts. The suite talks to the service only through a
//! [`Transport`], so it runs unchanged against a live URL or an in-process
//! server.

use serde::Serialize;
use serde_json::{json, Value};

use super::http::{HttpBackend, Transport};
use super::limit::RetryPolicy;
use super::wire::{ErrorEnvelope, CAPTION_PATH, COMPLETE_PATH, EMBED_PATH};
use super::{BackendDescriptor, BackendKind, Captioner, FrameRef, ImageEncoder, Llm, SnippetRef, TextEncoder, VideoEncoder};
use crate::model::TemporalWindow;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, result: Result<String, String>) -> ContractCheck {
    let (passed, detail) = match result {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    ContractCheck {
        name: name.to_string(),
        passed,
        detail,
    }
}

const PROBE_FRAME: &str = "contract://frame/000000.jpg";

fn probe_frame() -> FrameRef {
    FrameRef {
        video_id: "contract".into(),
        frame_index: 0,
        uri: PROBE_FRAME.into(),
    }
}

fn probe_snippet() -> SnippetRef {
    SnippetRef {
        video_id: "contract".into(),
        root_uri: "contract://video.mp4".into(),
        window: TemporalWindow {
            center_frame: 16,
            start_s: 0.0,
            end_s: 1.0,
            member_frames: vec![0, 16],
        },
    }
}

/// Runs every check applicable to `descriptor.kind`. The transport must be
/// bound to the service under test.
pub fn run_contract<T: Transport + Clone>(descriptor: &BackendDescriptor, transport: T) -> Vec<ContractCheck> {
    let mut out = Vec::new();
    let backend = match HttpBackend::with_transport(descriptor.clone(), transport.clone(), RetryPolicy::no_wait(0)) {
        Ok(b) => b,
        Err(e) => {
            out.push(check("descriptor", Err(e.to_string())));
            return out;
        }
    };
    let tag = descriptor.model_tag.as_str();

    match descriptor.kind {
        BackendKind::Captioner => {
            let a = backend.caption(&probe_frame());
            out.push(check("caption returns text", a.clone().map(|t| format!("{t:?}")).map_err(|e| e.to_string())));
            let b = backend.caption(&probe_frame());
            out.push(check(
                "caption is deterministic",
                match (a, b) {
                    (Ok(x), Ok(y)) if x == y => Ok("identical".into()),
                    (x, y) => Err(format!("{x:?} vs {y:?}")),
                },
            ));
        }
        BackendKind::Llm => {
            let a = backend.complete("Reply with [0.5].");
            out.push(check("completion returns text", a.map(|t| format!("{} chars", t.len())).map_err(|e| e.to_string())));
        }
        kind => {
            let embed = || match kind {
                BackendKind::TextEncoder => backend.embed_text("a person walking on a street"),
                BackendKind::ImageEncoder => backend.embed_image(&probe_frame()),
                _ => backend.embed_video(&probe_snippet()),
            };
            let a = embed();
            out.push(check(
                "embedding matches declared dim",
                a.as_ref().map(|v| format!("dim {}", v.dim())).map_err(|e| e.to_string()),
            ));
            let b = embed();
            out.push(check(
                "embedding is deterministic",
                match (a, b) {
                    (Ok(x), Ok(y)) if x == y => Ok("identical".into()),
                    (Ok(_), Ok(_)) => Err("two calls returned different vectors".into()),
                    (x, y) => Err(format!("{:?} / {:?}", x.err(), y.err())),
                },
            ));
        }
    }

    // An unknown model must be refused with the error envelope.
    let (path, body) = match descriptor.kind {
        BackendKind::Captioner => (CAPTION_PATH, json!({"model": "no-such-model", "uri": PROBE_FRAME})),
        BackendKind::Llm => (
            COMPLETE_PATH,
            json!({"model": "no-such-model", "prompt": "x", "temperature": 0.0, "max_tokens": 8}),
        ),
        _ => (EMBED_PATH, json!({"model": "no-such-model", "modality": "text", "input": "x"})),
    };
    out.push(check("unknown model yields error envelope", envelope_check(&transport, path, &body)));

    // Malformed bodies must be refused as non-retryable.
    let malformed = json!({"model": tag});
    out.push(check(
        "malformed request is non-retryable",
        envelope_check(&transport, path, &malformed).and_then(|d| {
            if d.contains("retryable=false") {
                Ok(d)
            } else {
                Err(format!("expected a non-retryable error, got {d}"))
            }
        }),
    ));
    out
}

fn envelope_check<T: Transport>(transport: &T, path: &str, body: &Value) -> Result<String, String> {
    let raw = transport.post(path, body).map_err(|e| e.to_string())?;
    if raw.status == 200 {
        return Err("request succeeded".into());
    }
    let env: ErrorEnvelope =
        serde_json::from_str(&raw.body).map_err(|e| format!("status {} without envelope: {e}", raw.status))?;
    Ok(format!("status {} retryable={}", raw.status, env.error.retryable))
}
