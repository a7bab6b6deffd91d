//! HTTP API over a running manager, with a server-sent event stream.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::mpsc::RecvTimeoutError;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{Stream, StreamExt};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::{oneshot, watch};

use edgrid_core::demand::{Context, Geer, Value};
use edgrid_core::marf::{build_marf_geer, MarfParams, ResultSet, SampleSource, ToneSynth, DEFAULT_SUBJECTS, SYNTH_RATE};
use edgrid_core::tiers::{
    Configuration, EvalRecord, EvalStatus, Fault, Gmt, NodeAction, NodeRegistration, TierError, TierKind,
    TierRegistration, DEFAULT_INSTANCE,
};

use crate::network::{load_network, save_network, NetworkDocument, NetworkError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
            },
        }
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "InvalidBody", message)
    }
}

impl From<TierError> for ApiError {
    fn from(e: TierError) -> Self {
        let status = match &e {
            TierError::UnknownInstance(_)
            | TierError::UnknownNode(_)
            | TierError::UnknownTier(_)
            | TierError::UnknownEvaluation(_) => StatusCode::NOT_FOUND,
            TierError::IllegalTransition { .. }
            | TierError::NodeNotStarted(_)
            | TierError::NoDstAvailable
            | TierError::NoReplacementNode(_)
            | TierError::RecoveryFailed(_)
            | TierError::Cancelled => StatusCode::CONFLICT,
            TierError::BadAddress(_)
            | TierError::BadColor(_)
            | TierError::InvalidConfig(_)
            | TierError::WrongKind { .. }
            | TierError::Integrity(_) => StatusCode::BAD_REQUEST,
            TierError::EvaluationTimeout { .. } | TierError::StageFailed { .. } | TierError::StoreUnavailable(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        Self::new(status, e.code(), e.to_string())
    }
}

impl From<NetworkError> for ApiError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::Tier(t) => t.into(),
            NetworkError::NotEmpty => Self::new(StatusCode::CONFLICT, e.code(), e.to_string()),
            NetworkError::Integrity(_) | NetworkError::Malformed(_) => {
                Self::new(StatusCode::BAD_REQUEST, e.code(), e.to_string())
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRequest {
    pub node_name: String,
    pub address: String,
    pub color: String,
    #[serde(default = "default_instance")]
    pub instance_id: String,
}

fn default_instance() -> String {
    DEFAULT_INSTANCE.into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierRequest {
    pub node_id: String,
    pub kind: TierKind,
    #[serde(default = "one")]
    pub instance_count: u32,
    #[serde(default)]
    pub config: Configuration,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultRequest {
    pub fault: Fault,
}

/// Speaker identification with synthetic training tones.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarfRequest {
    #[serde(default)]
    pub seed: u64,
    /// Subject ids and their tone frequencies in Hz.
    #[serde(default)]
    pub subjects: Option<Vec<(i64, f64)>>,
    #[serde(default = "five")]
    pub instances: usize,
    /// A noisy tone at this frequency is the sample to classify.
    #[serde(default)]
    pub sine_hz: Option<f64>,
    /// A sample source in its value form, such as WAV bytes.
    #[serde(default)]
    pub sample: Option<Value>,
}

fn five() -> usize {
    5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationRequest {
    pub dgt_id: String,
    #[serde(default)]
    pub geer: Option<Geer>,
    #[serde(default)]
    pub input: Option<Value>,
    #[serde(default)]
    pub context: Context,
    #[serde(default)]
    pub marf: Option<MarfRequest>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationStarted {
    pub eval_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedSubject {
    pub subject: i64,
    pub distance: f64,
}

/// An evaluation record plus, for classification results, the ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationView {
    #[serde(flatten)]
    pub record: EvalRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranking: Option<Vec<RankedSubject>>,
}

impl From<EvalRecord> for EvaluationView {
    fn from(record: EvalRecord) -> Self {
        let ranking = match (&record.status, &record.result) {
            (EvalStatus::Completed, Some(v)) => ResultSet::from_value(v).ok().map(|rs| {
                rs.ranked
                    .into_iter()
                    .map(|(subject, distance)| RankedSubject { subject, distance })
                    .collect()
            }),
            _ => None,
        };
        Self { record, ranking }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CancelReply {
    pub cancelled: bool,
}

impl MarfRequest {
    /// The plan and input this shorthand stands for.
    pub fn expand(&self) -> Result<(Geer, Value), String> {
        let params = MarfParams::default();
        let subjects = self.subjects.clone().unwrap_or_else(|| DEFAULT_SUBJECTS.to_vec());
        if subjects.is_empty() || self.instances == 0 {
            return Err("at least one subject and one training instance are needed".into());
        }
        let mut synth = ToneSynth::new(self.seed);
        let training = synth.train(&params, &subjects, self.instances).map_err(|e| e.to_string())?;
        let geer = build_marf_geer(&params, &training).map_err(|e| e.to_string())?;
        let input = match (&self.sample, self.sine_hz) {
            (Some(v), None) => {
                SampleSource::from_value(v).map_err(|e| e.to_string())?;
                v.clone()
            }
            (None, Some(hz)) if hz.is_finite() && hz > 0.0 && hz < SYNTH_RATE as f64 / 2.0 => {
                synth.tone(hz).to_value().map_err(|e| e.to_string())?
            }
            (None, Some(hz)) => return Err(format!("sine frequency {hz} is out of range")),
            _ => return Err("give exactly one of `sample` and `sine_hz`".into()),
        };
        Ok((geer, input))
    }
}

#[derive(Clone)]
struct AppState {
    gmt: Gmt,
    closing: watch::Receiver<bool>,
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::invalid(e.to_string()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?
}

async fn topology(State(s): State<AppState>) -> impl IntoResponse {
    Json(s.gmt.gmt_snapshot())
}

async fn register_node(State(s): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<NodeRegistration>)> {
    let req: NodeRequest = parse(&body)?;
    let reg = blocking(move || Ok(s.gmt.register_node(&req.node_name, &req.address, &req.color, &req.instance_id)?)).await?;
    Ok((StatusCode::CREATED, Json(reg)))
}

async fn node_action(State(s): State<AppState>, Path((id, action)): Path<(String, String)>, body: Bytes) -> ApiResult<Response> {
    let gmt = s.gmt;
    match action.as_str() {
        "start" | "stop" => {
            let act = if action == "start" { NodeAction::Start } else { NodeAction::Stop };
            let reg = blocking(move || Ok(gmt.node_lifecycle(&id, act)?)).await?;
            Ok(Json(reg).into_response())
        }
        "heartbeat" => {
            blocking(move || Ok(gmt.heartbeat(&id)?)).await?;
            Ok(StatusCode::NO_CONTENT.into_response())
        }
        "faults" => {
            let req: FaultRequest = parse(&body)?;
            blocking(move || Ok(gmt.inject_fault(&id, req.fault)?)).await?;
            Ok(StatusCode::NO_CONTENT.into_response())
        }
        other => Err(ApiError::new(StatusCode::NOT_FOUND, "UnknownAction", format!("no node action `{other}`"))),
    }
}

async fn allocate_tier(State(s): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<TierRegistration>)> {
    let req: TierRequest = parse(&body)?;
    let reg = blocking(move || Ok(s.gmt.allocate_tier(&req.node_id, req.kind, req.instance_count, &req.config)?)).await?;
    Ok((StatusCode::CREATED, Json(reg)))
}

async fn deallocate_tier(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    let gmt = s.gmt;
    let tid = id.clone();
    if blocking(move || Ok(gmt.deallocate_tier(&tid))).await? {
        Ok(StatusCode::NO_CONTENT)
    } else {
        Err(TierError::UnknownTier(id).into())
    }
}

async fn start_evaluation(State(s): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<EvaluationStarted>)> {
    let req: EvaluationRequest = parse(&body)?;
    let eval_id = blocking(move || {
        let (geer, input) = match (req.marf, req.geer) {
            (Some(m), None) if req.input.is_none() => m.expand().map_err(ApiError::invalid)?,
            (None, Some(geer)) => {
                geer.validate().map_err(|e| ApiError::invalid(e.to_string()))?;
                (geer, req.input.unwrap_or(Value::Nested(Vec::new())))
            }
            _ => return Err(ApiError::invalid("give either `marf`, or `geer` with an optional `input`")),
        };
        Ok(s.gmt.start_evaluation(&req.dgt_id, geer, req.context, input)?)
    })
    .await?;
    Ok((StatusCode::ACCEPTED, Json(EvaluationStarted { eval_id })))
}

async fn list_evaluations(State(s): State<AppState>) -> Json<Vec<EvaluationView>> {
    Json(s.gmt.evaluations().into_iter().map(EvaluationView::from).collect())
}

async fn get_evaluation(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<EvaluationView>> {
    let rec = s.gmt.evaluation(&id).ok_or(TierError::UnknownEvaluation(id))?;
    Ok(Json(rec.into()))
}

async fn cancel_evaluation(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<CancelReply>> {
    Ok(Json(CancelReply {
        cancelled: s.gmt.cancel_evaluation(&id)?,
    }))
}

async fn get_network(State(s): State<AppState>) -> Response {
    let text = save_network(&s.gmt).to_canonical();
    ([(header::CONTENT_TYPE, "application/json")], text).into_response()
}

async fn put_network(State(s): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let text = std::str::from_utf8(&body).map_err(|e| ApiError::invalid(e.to_string()))?;
    let doc = NetworkDocument::parse(text)?;
    let topo = blocking(move || Ok(load_network(&s.gmt, &doc)?)).await?;
    Ok(Json(topo).into_response())
}

async fn events(State(s): State<AppState>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = s.gmt.bus().subscribe();
    let (tx, out) = tokio::sync::mpsc::channel(256);
    // A full channel blocks this thread, which fills the bus subscription,
    // which makes the bus drop it.
    std::thread::spawn(move || loop {
        match rx.recv_timeout(Duration::from_millis(200)) {
            Ok(ev) => {
                if tx.blocking_send(ev).is_err() {
                    return;
                }
            }
            Err(RecvTimeoutError::Timeout) if !tx.is_closed() => {}
            Err(_) => return,
        }
    });
    let mut closing = s.closing.clone();
    let stream = futures::stream::unfold(out, |mut out| async move { out.recv().await.map(|ev| (ev, out)) })
        .map(|ev| {
            let data = serde_json::to_string(&ev).expect("events serialize");
            Ok(Event::default().event(ev.name.clone()).id(ev.seq.to_string()).data(data))
        })
        .take_until(async move {
            let _ = closing.wait_for(|c| *c).await;
        });
    Sse::new(stream).keep_alive(KeepAlive::default())
}

pub fn router(gmt: Gmt, closing: watch::Receiver<bool>) -> Router {
    Router::new()
        .route("/v1/topology", get(topology))
        .route("/v1/nodes", post(register_node))
        .route("/v1/nodes/{id}/{action}", post(node_action))
        .route("/v1/tiers", post(allocate_tier))
        .route("/v1/tiers/{id}", axum::routing::delete(deallocate_tier))
        .route("/v1/evaluations", post(start_evaluation).get(list_evaluations))
        .route("/v1/evaluations/{id}", get(get_evaluation).delete(cancel_evaluation))
        .route("/v1/events", get(events))
        .route("/v1/network", get(get_network).put(put_network))
        .with_state(AppState { gmt, closing })
}

/// Serves `router` on `listener` until `stop` resolves, then gives open
/// connections a moment to finish.
pub async fn serve(gmt: Gmt, listener: tokio::net::TcpListener, stop: impl std::future::Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
    let (closing_tx, closing) = watch::channel(false);
    let (stopped_tx, stopped_rx) = oneshot::channel::<()>();
    let app = router(gmt, closing);
    let server = axum::serve(listener, app).with_graceful_shutdown(async move {
        stop.await;
        let _ = closing_tx.send(true);
        let _ = stopped_tx.send(());
    });
    tokio::select! {
        r = server => r,
        _ = async {
            let _ = stopped_rx.await;
            tokio::time::sleep(Duration::from_secs(2)).await;
        } => Ok(()),
    }
}

/// An API server on its own runtime thread.
pub struct ApiServer {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl ApiServer {
    pub fn start(gmt: Gmt, bind: SocketAddr) -> std::io::Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        let std_listener = std::net::TcpListener::bind(bind)?;
        std_listener.set_nonblocking(true)?;
        let addr = std_listener.local_addr()?;
        let (stop, stop_rx) = oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener)?;
                serve(gmt, listener, async move {
                    let _ = stop_rx.await;
                })
                .await
            })
        });
        Ok(Self {
            addr,
            stop: Some(stop),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(mut self) -> std::io::Result<()> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> std::io::Result<()> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ApiServer {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}
