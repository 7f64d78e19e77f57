//! Evaluator bridge: a line-delimited JSON request/response protocol over TCP,
//! majority voting over sampled answers, and a ground-truth mock server.
//!
//! Each connection carries exactly one exchange: the client writes one JSON
//! request followed by `\n`, the server answers with one JSON line holding
//! either a response or `{"error": {"code": .., "message": ..}}`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qa::{QaItem, ANSWER_NO, ANSWER_YES};
use crate::task::{QaFormat, Task};
use crate::util::rng_for;

pub const DEFAULT_NUM_SAMPLES: usize = 5;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BridgeError {
    #[error("request {0} timed out")]
    Timeout(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("server error {code}: {message}")]
    Server { code: String, message: String },
    #[error("no texts to vote over")]
    EmptyInput,
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FrameRef {
    Path(String),
    Inline { base64: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoding {
    #[default]
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub request_id: String,
    pub frames: Vec<FrameRef>,
    pub question: String,
    pub num_samples: usize,
    #[serde(default)]
    pub decoding: Decoding,
    /// Client-side deadline; not sent on the wire.
    #[serde(skip, default = "default_timeout")]
    pub timeout_ms: u64,
}

fn default_timeout() -> u64 {
    10_000
}

impl GenerationRequest {
    pub fn new(request_id: &str, frames: Vec<String>, question: &str, num_samples: usize) -> Self {
        Self {
            request_id: request_id.to_string(),
            frames: frames.into_iter().map(FrameRef::Path).collect(),
            question: question.to_string(),
            num_samples,
            decoding: Decoding::Greedy,
            timeout_ms: default_timeout(),
        }
    }

    pub fn validate(&self) -> Result<(), BridgeError> {
        if self.num_samples == 0 {
            return Err(BridgeError::InvalidRequest("num_samples must be at least 1".into()));
        }
        if self.frames.is_empty() {
            return Err(BridgeError::InvalidRequest("frame list is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub request_id: String,
    pub texts: Vec<String>,
    pub model_tag: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireError {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WireReply {
    Ok(GenerationResponse),
    Err { error: WireError },
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub retries: usize,
    pub retry_backoff: Duration,
    pub max_in_flight: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            retries: 2,
            retry_backoff: Duration::from_millis(20),
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BridgeClient {
    pub endpoint: String,
    pub config: ClientConfig,
}

fn is_timeout(e: &std::io::Error) -> bool {
    matches!(
        e.kind(),
        std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock
    )
}

impl BridgeClient {
    pub fn new(endpoint: &str) -> Self {
        Self {
            endpoint: endpoint.to_string(),
            config: ClientConfig::default(),
        }
    }

    fn exchange(&self, req: &GenerationRequest) -> Result<GenerationResponse, BridgeError> {
        let timeout = Duration::from_millis(req.timeout_ms.max(1));
        let map_io = |e: std::io::Error| {
            if is_timeout(&e) {
                BridgeError::Timeout(req.request_id.clone())
            } else {
                BridgeError::Transport(format!("{}: {e}", self.endpoint))
            }
        };
        let addrs: Vec<SocketAddr> = self
            .endpoint
            .to_socket_addrs()
            .map_err(|e| BridgeError::Transport(format!("{}: {e}", self.endpoint)))?
            .collect();
        let addr = addrs
            .first()
            .ok_or_else(|| BridgeError::Transport(format!("{}: no address", self.endpoint)))?;
        let mut stream = TcpStream::connect_timeout(addr, timeout).map_err(map_io)?;
        stream.set_read_timeout(Some(timeout)).map_err(map_io)?;
        stream.set_write_timeout(Some(timeout)).map_err(map_io)?;
        let mut body = serde_json::to_vec(req).expect("request serializes");
        body.push(b'\n');
        stream.write_all(&body).map_err(map_io)?;
        let mut line = String::new();
        BufReader::new(stream).read_line(&mut line).map_err(map_io)?;
        if line.is_empty() {
            return Err(BridgeError::Transport("connection closed without reply".into()));
        }
        let reply: WireReply = serde_json::from_str(line.trim())
            .map_err(|e| BridgeError::Protocol(format!("unparseable reply: {e}")))?;
        match reply {
            WireReply::Err { error } => Err(BridgeError::Server {
                code: error.code,
                message: error.message,
            }),
            WireReply::Ok(resp) => {
                if resp.request_id != req.request_id {
                    return Err(BridgeError::Protocol(format!(
                        "reply for `{}` to request `{}`",
                        resp.request_id, req.request_id
                    )));
                }
                if resp.texts.len() != req.num_samples {
                    return Err(BridgeError::Protocol(format!(
                        "expected {} texts, got {}",
                        req.num_samples,
                        resp.texts.len()
                    )));
                }
                Ok(resp)
            }
        }
    }

    /// One round trip, retried on transport failures and timeouts.
    pub fn query(&self, req: &GenerationRequest) -> Result<GenerationResponse, BridgeError> {
        req.validate()?;
        let mut attempt = 0;
        loop {
            match self.exchange(req) {
                Err(e @ (BridgeError::Transport(_) | BridgeError::Timeout(_)))
                    if attempt < self.config.retries =>
                {
                    log::debug!("retrying {} after: {e}", req.request_id);
                    attempt += 1;
                    std::thread::sleep(self.config.retry_backoff);
                }
                other => return other,
            }
        }
    }

    /// Queries every request with at most `max_in_flight` concurrent
    /// exchanges. Results are in request order, each with its latency in ms.
    pub fn query_all(
        &self,
        reqs: &[GenerationRequest],
    ) -> Vec<Result<(GenerationResponse, u64), BridgeError>> {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<(GenerationResponse, u64), BridgeError>>>> =
            reqs.iter().map(|_| Mutex::new(None)).collect();
        let workers = self.config.max_in_flight.clamp(1, reqs.len().max(1));
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= reqs.len() {
                        break;
                    }
                    let started = Instant::now();
                    let result = self
                        .query(&reqs[i])
                        .map(|resp| (resp, started.elapsed().as_millis() as u64));
                    *slots[i].lock().unwrap() = Some(result);
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().unwrap().expect("every slot filled"))
            .collect()
    }
}

/// Most frequent trimmed text; ties among the most frequent are broken
/// uniformly at random from `seed`.
pub fn majority_vote(texts: &[String], seed: u64) -> Result<String, BridgeError> {
    if texts.is_empty() {
        return Err(BridgeError::EmptyInput);
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in texts {
        *counts.entry(t.trim()).or_insert(0) += 1;
    }
    let best = *counts.values().max().expect("non-empty");
    // BTreeMap order keeps the candidate list independent of input order
    let tied: Vec<&str> = counts
        .iter()
        .filter(|(_, c)| **c == best)
        .map(|(t, _)| *t)
        .collect();
    let pick = if tied.len() == 1 {
        0
    } else {
        rng_for(seed, &["vote"]).random_range(0..tied.len())
    };
    Ok(tied[pick].to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub item_id: String,
    pub texts: Vec<String>,
    pub answer: String,
    pub model_tag: String,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockOracleConfig {
    /// Probability of answering wrong.
    pub epsilon: f64,
    pub seed: u64,
}

/// Answers from ground truth, corrupting each item with probability epsilon.
#[derive(Debug, Clone)]
pub struct MockOracle {
    pub config: MockOracleConfig,
    pub model_tag: String,
    items: HashMap<String, QaItem>,
    labels: BTreeMap<Task, Vec<String>>,
}

impl MockOracle {
    pub fn new(items: Vec<QaItem>, config: MockOracleConfig) -> Result<Self, BridgeError> {
        if !(0.0..=1.0).contains(&config.epsilon) {
            return Err(BridgeError::InvalidRequest(format!(
                "epsilon {} outside [0, 1]",
                config.epsilon
            )));
        }
        let mut labels: BTreeMap<Task, BTreeSet<String>> = BTreeMap::new();
        for item in &items {
            let set = labels.entry(item.task).or_default();
            match item.format {
                QaFormat::Mc => set.extend(item.options.iter().flatten().cloned()),
                QaFormat::Oe => {
                    set.insert(item.answer.clone());
                }
                QaFormat::Binary => set.extend(item.distractor.iter().cloned()),
            }
        }
        Ok(Self {
            model_tag: format!("mock-oracle-eps{}", config.epsilon),
            config,
            items: items.into_iter().map(|i| (i.item_id.clone(), i)).collect(),
            labels: labels
                .into_iter()
                .map(|(t, s)| (t, s.into_iter().collect()))
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn answer_for(&self, item_id: &str) -> Result<String, BridgeError> {
        let item = self
            .items
            .get(item_id)
            .ok_or_else(|| BridgeError::UnknownItem(item_id.to_string()))?;
        Ok(self.mock_answer(item))
    }

    /// Deterministic per `(seed, item_id)`, independent of call order.
    pub fn mock_answer(&self, item: &QaItem) -> String {
        let mut rng = rng_for(self.config.seed, &[&item.item_id, "mock"]);
        let corrupt = rng.random::<f64>() < self.config.epsilon;
        if !corrupt {
            return item.answer.clone();
        }
        let wrong_from = |pool: &[String], rng: &mut rand_chacha::ChaCha8Rng| {
            let candidates: Vec<&String> = pool.iter().filter(|l| **l != item.answer).collect();
            if candidates.is_empty() {
                "unknown".to_string()
            } else {
                candidates[rng.random_range(0..candidates.len())].clone()
            }
        };
        match item.format {
            QaFormat::Binary => {
                if item.answer == ANSWER_YES {
                    ANSWER_NO.to_string()
                } else {
                    ANSWER_YES.to_string()
                }
            }
            QaFormat::Mc => wrong_from(item.options.as_deref().unwrap_or_default(), &mut rng),
            QaFormat::Oe => wrong_from(
                self.labels.get(&item.task).map(Vec::as_slice).unwrap_or_default(),
                &mut rng,
            ),
        }
    }

    pub fn handle(&self, req: &GenerationRequest) -> Result<GenerationResponse, BridgeError> {
        req.validate()?;
        let answer = self.answer_for(&req.request_id)?;
        Ok(GenerationResponse {
            request_id: req.request_id.clone(),
            texts: vec![answer; req.num_samples],
            model_tag: self.model_tag.clone(),
        })
    }

    fn reply_to_line(&self, line: &str) -> WireReply {
        let err = |code: &str, message: String| WireReply::Err {
            error: WireError {
                code: code.to_string(),
                message,
            },
        };
        let req: GenerationRequest = match serde_json::from_str(line.trim()) {
            Ok(r) => r,
            Err(e) => return err("bad_request", e.to_string()),
        };
        match self.handle(&req) {
            Ok(resp) => WireReply::Ok(resp),
            Err(BridgeError::UnknownItem(id)) => err("unknown_item", format!("no item `{id}`")),
            Err(e) => err("invalid_request", e.to_string()),
        }
    }
}

fn serve_connection(oracle: &MockOracle, stream: TcpStream) -> std::io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(30)))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let reply = oracle.reply_to_line(&line);
    let mut out = serde_json::to_vec(&reply).expect("reply serializes");
    out.push(b'\n');
    let mut stream = stream;
    stream.write_all(&out)
}

/// A running mock server; dropping the handle does not stop it, call
/// [`MockServer::shutdown`].
pub struct MockServer {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn spawn(addr: &str, oracle: MockOracle) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let oracle = Arc::new(oracle);
        let flag = stop.clone();
        let thread = std::thread::spawn(move || serve_loop(listener, oracle, flag));
        Ok(Self {
            addr,
            stop,
            thread: Some(thread),
        })
    }

    pub fn endpoint(&self) -> String {
        self.addr.to_string()
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // unblock accept()
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Accept loop: one thread per connection until `stop` is raised.
pub fn serve_loop(listener: TcpListener, oracle: Arc<MockOracle>, stop: Arc<AtomicBool>) {
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        match stream {
            Ok(stream) => {
                let oracle = oracle.clone();
                std::thread::spawn(move || {
                    if let Err(e) = serve_connection(&oracle, stream) {
                        log::warn!("mock connection failed: {e}");
                    }
                });
            }
            Err(e) => log::warn!("accept failed: {e}"),
        }
    }
}

/// Queries the evaluator for every item and votes over the sampled texts.
/// `frames_for` supplies the frame paths sent with each item.
pub fn collect_predictions<F>(
    client: &BridgeClient,
    items: &[QaItem],
    frames_for: F,
    num_samples: usize,
    seed: u64,
) -> Result<Vec<Prediction>, BridgeError>
where
    F: Fn(&QaItem) -> Option<Vec<String>>,
{
    let reqs = items
        .iter()
        .map(|item| {
            let frames = frames_for(item).ok_or_else(|| {
                BridgeError::InvalidRequest(format!("no frames for item `{}`", item.item_id))
            })?;
            Ok(GenerationRequest::new(&item.item_id, frames, &item.question, num_samples))
        })
        .collect::<Result<Vec<_>, BridgeError>>()?;
    client
        .query_all(&reqs)
        .into_iter()
        .zip(items)
        .map(|(result, item)| {
            let (resp, latency_ms) = result?;
            let answer = majority_vote(
                &resp.texts,
                crate::util::derive_seed(seed, &[&item.item_id]),
            )?;
            Ok(Prediction {
                item_id: item.item_id.clone(),
                texts: resp.texts,
                answer,
                model_tag: resp.model_tag,
                latency_ms,
            })
        })
        .collect()
}
