//! HTTP endpoints consumed by the annotator UI.
//!
//! `GET /packets/next?annotator=ID`, `GET /packets/{id}`, `POST /ratings`,
//! `GET /adjudication/queue`, `GET /report?group=...`.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use super::{AnnotationError, Study, StudyGrouping, SubmitRating};

pub type SharedStudy = Arc<Mutex<Study>>;

#[derive(Debug, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
}

fn error(status: StatusCode, code: &str, message: impl Into<String>) -> Response {
    (
        status,
        Json(ApiError {
            code: code.into(),
            message: message.into(),
        }),
    )
        .into_response()
}

fn from_annotation(e: AnnotationError) -> Response {
    let (status, code) = match &e {
        AnnotationError::UnknownPacket(_) => (StatusCode::NOT_FOUND, "unknown_packet"),
        AnnotationError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
        AnnotationError::AnnotatorCollision(_) => (StatusCode::CONFLICT, "annotator_collision"),
        AnnotationError::IncompleteRatings(_) => (StatusCode::CONFLICT, "incomplete_ratings"),
        AnnotationError::AdjudicatorRequired(_) => (StatusCode::CONFLICT, "adjudicator_required"),
        AnnotationError::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "io"),
        _ => (StatusCode::UNPROCESSABLE_ENTITY, "invalid"),
    };
    error(status, code, e.to_string())
}

#[derive(Debug, Deserialize)]
struct NextQuery {
    annotator: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ReportQuery {
    group: Option<String>,
}

async fn next_packet(State(state): State<SharedStudy>, Query(q): Query<NextQuery>) -> Response {
    let Some(annotator) = q.annotator.filter(|a| !a.is_empty()) else {
        return error(StatusCode::BAD_REQUEST, "bad_request", "missing `annotator`");
    };
    let study = state.lock().expect("study lock");
    match study.next_packet(&annotator) {
        Some(p) => Json(p.clone()).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn get_packet(State(state): State<SharedStudy>, Path(id): Path<String>) -> Response {
    let study = state.lock().expect("study lock");
    match study.packet(&id) {
        Some(p) => Json(p.clone()).into_response(),
        None => from_annotation(AnnotationError::UnknownPacket(id)),
    }
}

async fn post_rating(
    State(state): State<SharedStudy>,
    body: Result<Json<SubmitRating>, axum::extract::rejection::JsonRejection>,
) -> Response {
    let body = match body {
        Ok(Json(b)) => b,
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, "invalid_body", e.body_text()),
    };
    if body.annotator_id.trim().is_empty() {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "invalid_body", "empty annotator_id");
    }
    let mut study = state.lock().expect("study lock");
    match study.submit(body) {
        Ok(r) => Json(r).into_response(),
        Err(e) => from_annotation(e),
    }
}

async fn queue(State(state): State<SharedStudy>) -> Response {
    let study = state.lock().expect("study lock");
    Json(study.adjudication_queue()).into_response()
}

async fn report(State(state): State<SharedStudy>, Query(q): Query<ReportQuery>) -> Response {
    let grouping = match q.group.as_deref().map(str::parse::<StudyGrouping>) {
        None => StudyGrouping::ModelEnv,
        Some(Ok(g)) => g,
        Some(Err(e)) => return error(StatusCode::BAD_REQUEST, "bad_request", e),
    };
    let study = state.lock().expect("study lock");
    match study.report(grouping) {
        Ok(r) => Json(r).into_response(),
        Err(e) => from_annotation(e),
    }
}

pub fn router(state: SharedStudy) -> Router {
    Router::new()
        .route("/packets/next", get(next_packet))
        .route("/packets/{id}", get(get_packet))
        .route("/ratings", post(post_rating))
        .route("/adjudication/queue", get(queue))
        .route("/report", get(report))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: SharedStudy) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// Blocks the calling thread serving `study` on `addr`. `on_bound` receives
/// the actual bound address (useful with port 0).
pub fn serve_blocking(
    addr: SocketAddr,
    state: SharedStudy,
    on_bound: impl FnOnce(SocketAddr),
) -> std::io::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        on_bound(listener.local_addr()?);
        serve(listener, state).await
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{AnnotationPacket, RatingStore};
    use crate::task::{QaFormat, Task};
    use axum::body::Body;
    use axum::http::Request;
    use http_body_util::BodyExt;
    use tower::ServiceExt;

    fn study(n: usize) -> SharedStudy {
        let packets = (1..=n)
            .map(|i| AnnotationPacket {
                packet_id: format!("p{i:06}"),
                item_id: format!("clip@{i:06}/AR/oe"),
                clip_id: format!("clip@{i:06}"),
                model_tag: "m".into(),
                environment: "A".into(),
                task: Task::AR,
                format: QaFormat::Oe,
                frames: vec!["f0.png".into()],
                question: "what is happening".into(),
                model_answer: "jumping".into(),
                reference_hints: None,
            })
            .collect();
        Arc::new(Mutex::new(Study::new(packets, RatingStore::in_memory())))
    }

    async fn call(app: &Router, req: Request<Body>) -> (StatusCode, serde_json::Value) {
        let resp = app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let value = if bytes.is_empty() {
            serde_json::Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap()
        };
        (status, value)
    }

    fn get_req(uri: &str) -> Request<Body> {
        Request::get(uri).body(Body::empty()).unwrap()
    }

    fn rate(packet: &str, who: &str, value: &str, extra: &str) -> Request<Body> {
        let body = format!(
            r#"{{"packet_id":"{packet}","annotator_id":"{who}","value":"{value}","timestamp":1{extra}}}"#
        );
        Request::post("/ratings")
            .header("content-type", "application/json")
            .body(Body::from(body))
            .unwrap()
    }

    #[tokio::test]
    async fn full_workflow() {
        let app = router(study(2));
        let (s, v) = call(&app, get_req("/packets/next?annotator=a")).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["packet_id"], "p000001");

        let (s, v) = call(&app, rate("p000001", "a", "correct", "")).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["role"], "primary");
        let (s, v) = call(&app, rate("p000001", "a", "partial", "")).await;
        assert_eq!(s, StatusCode::CONFLICT);
        assert_eq!(v["code"], "conflict");
        let (s, _) = call(&app, rate("p000001", "a", "partial", r#","supersede":true"#)).await;
        assert_eq!(s, StatusCode::OK);

        call(&app, rate("p000001", "b", "incorrect", "")).await;
        call(&app, rate("p000002", "a", "correct", "")).await;
        call(&app, rate("p000002", "b", "correct", "")).await;
        let (s, _) = call(&app, get_req("/packets/next?annotator=c")).await;
        assert_eq!(s, StatusCode::NO_CONTENT);

        let (s, v) = call(&app, get_req("/report")).await;
        assert_eq!(s, StatusCode::CONFLICT);
        assert_eq!(v["code"], "adjudicator_required");

        let (_, v) = call(&app, get_req("/adjudication/queue")).await;
        assert_eq!(v.as_array().unwrap().len(), 1);
        assert_eq!(v[0]["packet"]["packet_id"], "p000001");

        let (s, _) = call(&app, rate("p000001", "boss", "partial", r#","role":"adjudicator""#)).await;
        assert_eq!(s, StatusCode::OK);
        let (s, v) = call(&app, get_req("/report?group=overall")).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v[0]["n_packets"], 2);
        assert_eq!(v[0]["graded"], 0.75);
    }

    #[tokio::test]
    async fn error_statuses() {
        let app = router(study(1));
        let (s, _) = call(&app, get_req("/packets/p999999")).await;
        assert_eq!(s, StatusCode::NOT_FOUND);
        let (s, v) = call(&app, get_req("/packets/p000001")).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["item_id"], "clip@000001/AR/oe");
        let (s, _) = call(&app, get_req("/packets/next")).await;
        assert_eq!(s, StatusCode::BAD_REQUEST);
        let (s, _) = call(&app, rate("p999999", "a", "correct", "")).await;
        assert_eq!(s, StatusCode::NOT_FOUND);
        let (s, v) = call(&app, rate("p000001", "a", "great", "")).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!(v["code"], "invalid_body");
        let (s, _) = call(&app, get_req("/report?group=bogus")).await;
        assert_eq!(s, StatusCode::BAD_REQUEST);
        let (s, v) = call(&app, get_req("/report")).await;
        assert_eq!(s, StatusCode::CONFLICT);
        assert_eq!(v["code"], "incomplete_ratings");
    }

    #[test]
    fn serves_over_tcp() {
        use std::io::{Read, Write};
        let state = study(1);
        let (tx, rx) = std::sync::mpsc::channel();
        std::thread::spawn(move || {
            serve_blocking("127.0.0.1:0".parse().unwrap(), state, |a| tx.send(a).unwrap())
        });
        let addr = rx.recv().unwrap();
        let mut s = std::net::TcpStream::connect(addr).unwrap();
        s.write_all(b"GET /packets/p000001 HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n")
            .unwrap();
        let mut out = String::new();
        s.read_to_string(&mut out).unwrap();
        assert!(out.starts_with("HTTP/1.1 200"), "{out}");
        assert!(out.contains("\"packet_id\":\"p000001\""));
    }
}
