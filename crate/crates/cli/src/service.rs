//! HTTP service feeding samples to annotators and collecting their labels.
//!
//! Sample data is immutable after startup. Labels go through one mutex-held
//! writer that appends to a JSON-lines log and syncs it before acknowledging.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use axum::body::Body;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use creadec::evaluation::{latest_per_annotator, read_annotations, AnnotationRecord, Label};
use creadec::store::{SampleStore, IMAGE_SIDE};
use creadec::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use crate::image::gray_png;

pub struct ServedSample {
    pub id: String,
    pub method: String,
    pub pixels: Vec<u8>,
}

/// Load every sample of the given stores; ids must be unique across stores.
pub fn load_samples(stores: &[PathBuf]) -> anyhow::Result<Vec<ServedSample>> {
    let mut out = Vec::new();
    let mut seen = HashMap::new();
    for dir in stores {
        let store = SampleStore::open(dir)?;
        for s in store.load()? {
            if let Some(prev) = seen.insert(s.record.id.clone(), dir.clone()) {
                anyhow::bail!("sample id {} appears in {} and {}", s.record.id, prev.display(), dir.display());
            }
            out.push(ServedSample {
                id: s.record.id,
                method: s.record.intervention.method.as_str().to_string(),
                pixels: s.image,
            });
        }
    }
    Ok(out)
}

struct Session {
    order: Vec<usize>,
    cursor: usize,
    primed: bool,
}

struct Log {
    path: PathBuf,
    file: File,
    records: Vec<AnnotationRecord>,
    /// annotator → sample index → latest label.
    labels: HashMap<String, HashMap<usize, Label>>,
    sessions: HashMap<String, Session>,
}

pub struct AppState {
    samples: Vec<ServedSample>,
    index: HashMap<String, usize>,
    priming: Vec<Vec<u8>>,
    seed: u64,
    log: Mutex<Log>,
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(m: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, m.into())
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn check_annotator(a: &str) -> Result<(), ApiError> {
    let ok = !a.is_empty() && a.len() <= 64 && a.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
    if ok {
        Ok(())
    } else {
        Err(bad_request(format!("invalid annotator id {a:?}")))
    }
}

impl AppState {
    /// Build the state, replaying any labels already in `log_path`.
    pub fn new(samples: Vec<ServedSample>, priming: Vec<Vec<u8>>, log_path: &Path, seed: u64) -> anyhow::Result<Self> {
        let index: HashMap<String, usize> = samples.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect();
        if index.len() != samples.len() {
            anyhow::bail!("duplicate sample ids");
        }
        let records = if log_path.exists() { read_annotations(log_path)? } else { Vec::new() };
        let mut labels: HashMap<String, HashMap<usize, Label>> = HashMap::new();
        for r in &records {
            let &i = index
                .get(&r.sample_id)
                .with_context(|| format!("{} labels unknown sample {}", log_path.display(), r.sample_id))?;
            labels.entry(r.annotator.clone()).or_default().insert(i, r.label);
        }
        if let Some(parent) = log_path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(log_path)
            .with_context(|| format!("opening {}", log_path.display()))?;
        Ok(Self {
            samples,
            index,
            priming,
            seed,
            log: Mutex::new(Log {
                path: log_path.to_path_buf(),
                file,
                records,
                labels,
                sessions: HashMap::new(),
            }),
        })
    }

    fn session<'l>(&self, log: &'l mut Log, annotator: &str) -> &'l mut Session {
        let n = self.samples.len();
        let seed = self.seed;
        let session = log.sessions.entry(annotator.to_string()).or_insert_with(|| {
            let mut order: Vec<usize> = (0..n).collect();
            Rng::new(seed ^ fnv1a(annotator)).shuffle(&mut order);
            Session { order, cursor: 0, primed: false }
        });
        let done = log.labels.get(annotator);
        while session.cursor < n && done.is_some_and(|d| d.contains_key(&session.order[session.cursor])) {
            session.cursor += 1;
        }
        session
    }

    fn progress(&self, log: &Log, annotator: &str) -> Value {
        let labeled = log.labels.get(annotator).map_or(0, |m| m.len());
        json!({ "labeled": labeled, "total": self.samples.len() })
    }

    pub fn next(&self, annotator: &str) -> Result<Value, ApiError> {
        check_annotator(annotator)?;
        let mut log = self.log.lock().expect("label log poisoned");
        let session = self.session(&mut log, annotator);
        let (cursor, primed) = (session.cursor, session.primed);
        let current = session.order.get(cursor).copied();
        let progress = self.progress(&log, annotator);
        Ok(match current {
            Some(i) => json!({
                "annotator": annotator,
                "done": false,
                "primed": primed,
                "sample": { "sample_id": self.samples[i].id, "image_url": format!("/api/image/{}", self.samples[i].id) },
                "progress": progress,
            }),
            None => json!({ "annotator": annotator, "done": true, "primed": primed, "sample": null, "progress": progress }),
        })
    }

    /// Record a label. Only the sample currently offered to the annotator,
    /// or one they labeled before, may be labeled.
    pub fn submit(&self, annotator: &str, body: &Value) -> Result<Value, ApiError> {
        check_annotator(annotator)?;
        let sample_id = body
            .get("sample_id")
            .and_then(Value::as_str)
            .ok_or_else(|| bad_request("body needs a string sample_id"))?;
        let label: Label = body
            .get("label")
            .cloned()
            .ok_or_else(|| bad_request("body needs a label"))
            .and_then(|v| {
                serde_json::from_value(v.clone()).map_err(|_| bad_request(format!("invalid label {v}; expected L1, L2, L3 or L4")))
            })?;
        let &i = self
            .index
            .get(sample_id)
            .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown sample {sample_id}")))?;
        let mut log = self.log.lock().expect("label log poisoned");
        let current = {
            let s = self.session(&mut log, annotator);
            s.order.get(s.cursor).copied()
        };
        let relabel = log.labels.get(annotator).is_some_and(|m| m.contains_key(&i));
        if current != Some(i) && !relabel {
            return Err(ApiError(
                StatusCode::CONFLICT,
                format!("sample {sample_id} has not been served to {annotator}"),
            ));
        }
        let record = AnnotationRecord {
            sample_id: sample_id.to_string(),
            annotator: annotator.to_string(),
            label,
            timestamp: now_ms(),
            method: None,
        };
        let mut line = serde_json::to_string(&record).map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        line.push('\n');
        let io_err = |e: std::io::Error| ApiError(StatusCode::INTERNAL_SERVER_ERROR, format!("label log write failed: {e}"));
        log.file.write_all(line.as_bytes()).map_err(io_err)?;
        log.file.sync_data().map_err(io_err)?;
        log.records.push(record);
        log.labels.entry(annotator.to_string()).or_default().insert(i, label);
        let progress = self.progress(&log, annotator);
        Ok(json!({ "ok": true, "sample_id": sample_id, "label": label, "progress": progress }))
    }

    pub fn mark_primed(&self, annotator: &str) -> Result<Value, ApiError> {
        check_annotator(annotator)?;
        let mut log = self.log.lock().expect("label log poisoned");
        self.session(&mut log, annotator).primed = true;
        Ok(json!({ "ok": true, "primed": true }))
    }

    pub fn overall_progress(&self) -> Value {
        let log = self.log.lock().expect("label log poisoned");
        let annotators: BTreeMap<&String, usize> = log.labels.iter().map(|(a, m)| (a, m.len())).collect();
        json!({
            "total_samples": self.samples.len(),
            "total_records": log.records.len(),
            "annotators": annotators,
        })
    }

    /// Latest record per (sample, annotator); the method only for evaluators.
    pub fn export(&self, evaluator: bool) -> Vec<AnnotationRecord> {
        let log = self.log.lock().expect("label log poisoned");
        let mut out = latest_per_annotator(&log.records);
        for r in &mut out {
            r.method = evaluator.then(|| self.samples[self.index[&r.sample_id]].method.clone());
        }
        out
    }

    pub fn log_path(&self) -> PathBuf {
        self.log.lock().expect("label log poisoned").path.clone()
    }
}

fn png_response(pixels: &[u8]) -> Result<Response, ApiError> {
    let bytes = gray_png(IMAGE_SIDE as u32, IMAGE_SIDE as u32, pixels)
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

#[derive(Deserialize)]
struct ExportQuery {
    #[serde(default)]
    role: Option<String>,
}

#[derive(Serialize)]
struct PrimingImage {
    index: usize,
    url: String,
}

pub fn router(state: Arc<AppState>, cors_origin: Option<&str>) -> anyhow::Result<Router> {
    let cors = match cors_origin {
        Some(o) => CorsLayer::new().allow_origin(AllowOrigin::exact(HeaderValue::from_str(o)?)),
        None => CorsLayer::new().allow_origin(Any),
    }
    .allow_methods(Any)
    .allow_headers(Any);

    Ok(Router::new()
        .route(
            "/api/session/{annotator}/next",
            get(|State(s): State<Arc<AppState>>, UrlPath(a): UrlPath<String>| async move { s.next(&a).map(Json) }),
        )
        .route(
            "/api/session/{annotator}/label",
            post(
                |State(s): State<Arc<AppState>>, UrlPath(a): UrlPath<String>, body: axum::body::Bytes| async move {
                    let v: Value = serde_json::from_slice(&body).map_err(|e| bad_request(format!("invalid JSON body: {e}")))?;
                    s.submit(&a, &v).map(Json)
                },
            ),
        )
        .route(
            "/api/session/{annotator}/primed",
            post(|State(s): State<Arc<AppState>>, UrlPath(a): UrlPath<String>| async move { s.mark_primed(&a).map(Json) }),
        )
        .route(
            "/api/priming",
            get(|State(s): State<Arc<AppState>>| async move {
                let images: Vec<PrimingImage> = (0..s.priming.len())
                    .map(|index| PrimingImage { index, url: format!("/api/priming/{index}") })
                    .collect();
                Json(json!({ "images": images }))
            }),
        )
        .route(
            "/api/priming/{index}",
            get(|State(s): State<Arc<AppState>>, UrlPath(i): UrlPath<usize>| async move {
                let px = s
                    .priming
                    .get(i)
                    .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no priming image {i}")))?;
                png_response(px)
            }),
        )
        .route(
            "/api/image/{sample_id}",
            get(|State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>| async move {
                let &i = s
                    .index
                    .get(&id)
                    .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown sample {id}")))?;
                png_response(&s.samples[i].pixels)
            }),
        )
        .route(
            "/api/progress",
            get(|State(s): State<Arc<AppState>>| async move { Json(s.overall_progress()) }),
        )
        .route(
            "/api/export",
            get(|State(s): State<Arc<AppState>>, Query(q): Query<ExportQuery>| async move {
                let evaluator = match q.role.as_deref() {
                    None | Some("annotator") => false,
                    Some("evaluator") => true,
                    Some(other) => return Err(bad_request(format!("unknown role {other:?}"))),
                };
                let mut body = String::new();
                for r in s.export(evaluator) {
                    body.push_str(&serde_json::to_string(&r).expect("records serialize"));
                    body.push('\n');
                }
                Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], Body::from(body)).into_response())
            }),
        )
        .layer(cors)
        .with_state(state))
}
