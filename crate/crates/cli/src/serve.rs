use std::io::Write as _;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use axum::body::{to_bytes, Body, Bytes};
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use stranglerkit_core::discovery::DiscoveryError;
use stranglerkit_core::resilience::{Admission, Served};
use stranglerkit_core::{
    Breaker, BreakerConfig, CallFailure, Clock, Filter, FilterBehavior, Gateway, GatewayError, MonotonicClock, Phase,
    Provenance, Registry, RegistryConfig, Request, RouteTable,
};
use tokio::net::TcpListener;

use crate::commands::read_model;
use crate::{ServeArgs, Status, UsageError};

const MAX_BODY: usize = 16 << 20;

/// Upstream response as proxied and cached.
#[derive(Debug, Clone)]
struct Upstream {
    status: u16,
    content_type: Option<HeaderValue>,
    body: Bytes,
}

struct App {
    gateway: Gateway<Upstream>,
    client: reqwest::Client,
    call_timeout: Duration,
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

async fn bind(addr: SocketAddr) -> Result<TcpListener> {
    TcpListener::bind(addr)
        .await
        .map_err(|e| UsageError(format!("cannot listen on {addr}: {e}")).into())
}

async fn shutdown() {
    let _ = tokio::signal::ctrl_c().await;
}

fn announce(line: String) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

pub fn gateway(args: ServeArgs) -> Result<Status> {
    let model = read_model(&args.model)?;
    if args.time_unit_ms == 0 {
        return Err(UsageError("--time-unit-ms must be positive".into()).into());
    }
    let table = RouteTable::new(model.routes.clone()).context("model routes")?;
    let unit = Duration::from_millis(args.time_unit_ms);
    let clock: Arc<dyn Clock> = Arc::new(MonotonicClock::new(unit));
    let registry = Arc::new(Registry::new(
        clock.clone(),
        RegistryConfig {
            heartbeat_interval: args.heartbeat_interval,
            missed_beats: args.missed_beats,
        },
    ));
    let breaker_config = BreakerConfig {
        failure_threshold: args.failure_threshold,
        cooldown: args.cooldown,
        call_timeout: args.call_timeout,
        cache_capacity: args.cache_capacity,
    };
    let breaker = Arc::new(Breaker::new(breaker_config, clock));
    let mut filters = vec![
        Filter::new("access-log", Phase::Pre, FilterBehavior::RequestLogging),
        Filter::new("count-requests", Phase::Pre, FilterBehavior::MetricsCount),
    ];
    if let Some(token) = &args.token {
        filters.push(Filter::new(
            "bearer-auth",
            Phase::Pre,
            FilterBehavior::RejectUnauthenticated { token: token.clone() },
        ));
    }
    filters.push(Filter::new("count-responses", Phase::Post, FilterBehavior::MetricsCount));
    filters.push(Filter::new("access-log", Phase::Post, FilterBehavior::RequestLogging));
    let app = Arc::new(App {
        gateway: Gateway::new(table, filters, registry.clone(), breaker),
        client: reqwest::Client::builder().build()?,
        call_timeout: unit * args.call_timeout.max(1) as u32,
    });

    runtime()?.block_on(async move {
        let admin = admin_router().with_state(app.clone());
        let proxy = Router::new().fallback(proxy).with_state(app.clone());
        let listener = bind(args.listen).await?;
        let local = listener.local_addr()?;
        let sweep_every = unit * args.heartbeat_interval.max(1) as u32;
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(sweep_every);
            loop {
                tick.tick().await;
                for change in registry.sweep_now() {
                    log::warn!("{}/{} is now {:?}", change.service_id, change.instance_id, change.status);
                }
            }
        });
        match args.admin_listen {
            None => {
                announce(format!("gateway listening on {local}"));
                axum::serve(listener, admin.merge(proxy))
                    .with_graceful_shutdown(shutdown())
                    .await?;
            }
            Some(addr) => {
                let admin_listener = bind(addr).await?;
                announce(format!(
                    "gateway listening on {local} admin on {}",
                    admin_listener.local_addr()?
                ));
                let a = tokio::spawn(async move { axum::serve(admin_listener, admin).await });
                axum::serve(listener, proxy).with_graceful_shutdown(shutdown()).await?;
                a.abort();
            }
        }
        Ok(Status::Clean)
    })
}

fn admin_router() -> Router<Arc<App>> {
    Router::new()
        .route("/admin/routes", get(list_routes))
        .route("/admin/routes/{prefix}/shift", put(put_shift))
        .route("/admin/metrics", get(metrics))
        .route("/registry/{service}", get(list_instances))
        .route("/registry/{service}/instances", post(register))
        .route("/registry/{service}/instances/{id}", axum::routing::delete(deregister))
        .route("/registry/{service}/instances/{id}/heartbeat", put(heartbeat))
}

fn error(status: StatusCode, msg: impl ToString) -> Response {
    (status, Json(json!({ "error": msg.to_string() }))).into_response()
}

fn discovery_status(e: &DiscoveryError) -> StatusCode {
    match e {
        DiscoveryError::DuplicateInstance { .. } => StatusCode::CONFLICT,
        DiscoveryError::UnknownInstance { .. } | DiscoveryError::UnknownService(_) => StatusCode::NOT_FOUND,
        DiscoveryError::NoHealthyInstance(_) => StatusCode::SERVICE_UNAVAILABLE,
    }
}

fn gateway_status(e: &GatewayError) -> StatusCode {
    match e {
        GatewayError::NoRouteMatched(_) | GatewayError::UnknownRoute(_) => StatusCode::NOT_FOUND,
        GatewayError::InvalidPercent { .. } | GatewayError::InvalidTable(_) => StatusCode::BAD_REQUEST,
        GatewayError::Unauthenticated(_) => StatusCode::UNAUTHORIZED,
        GatewayError::Discovery(d) => match d {
            DiscoveryError::NoHealthyInstance(_) | DiscoveryError::UnknownService(_) => {
                StatusCode::SERVICE_UNAVAILABLE
            }
            other => discovery_status(other),
        },
        GatewayError::Upstream(_) => StatusCode::BAD_GATEWAY,
    }
}

async fn list_routes(State(app): State<Arc<App>>) -> Response {
    Json(app.gateway.table().entries().to_vec()).into_response()
}

#[derive(Deserialize)]
struct ShiftBody {
    percent: u32,
}

async fn put_shift(State(app): State<Arc<App>>, Path(prefix): Path<String>, Json(body): Json<ShiftBody>) -> Response {
    let prefix = if prefix.starts_with('/') { prefix } else { format!("/{prefix}") };
    match app.gateway.set_shift(&prefix, body.percent) {
        Ok(entry) => {
            log::info!("shift {prefix} -> {}", body.percent);
            Json(entry).into_response()
        }
        Err(e) => error(gateway_status(&e), e),
    }
}

async fn metrics(State(app): State<Arc<App>>) -> Response {
    let registry = app.gateway.registry();
    let instances: serde_json::Map<String, serde_json::Value> = registry
        .services()
        .into_iter()
        .map(|s| {
            let list = registry.instances(&s).unwrap_or_default();
            (s, json!(list))
        })
        .collect();
    Json(json!({
        "gateway": app.gateway.metrics(),
        "breakers": app.gateway.breaker().snapshot(),
        "registry": instances,
    }))
    .into_response()
}

async fn list_instances(State(app): State<Arc<App>>, Path(service): Path<String>) -> Response {
    match app.gateway.registry().instances(&service) {
        Ok(list) => Json(list).into_response(),
        Err(e) => error(discovery_status(&e), e),
    }
}

#[derive(Deserialize)]
struct RegisterBody {
    instance_id: String,
    address: String,
}

async fn register(
    State(app): State<Arc<App>>,
    Path(service): Path<String>,
    Json(body): Json<RegisterBody>,
) -> Response {
    match app.gateway.registry().register(&service, &body.instance_id, &body.address) {
        Ok(rec) => (StatusCode::CREATED, Json(rec)).into_response(),
        Err(e) => error(discovery_status(&e), e),
    }
}

async fn deregister(State(app): State<Arc<App>>, Path((service, id)): Path<(String, String)>) -> Response {
    match app.gateway.registry().deregister(&service, &id) {
        Ok(()) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => error(discovery_status(&e), e),
    }
}

async fn heartbeat(State(app): State<Arc<App>>, Path((service, id)): Path<(String, String)>) -> Response {
    let registry = app.gateway.registry();
    match registry.heartbeat_now(&service, &id) {
        Ok(()) => {
            let rec = registry
                .instances(&service)
                .ok()
                .and_then(|l| l.into_iter().find(|r| r.instance_id == id));
            Json(rec).into_response()
        }
        Err(e) => error(discovery_status(&e), e),
    }
}

fn routing_request(headers: &HeaderMap, uri: &axum::http::Uri) -> Request {
    let path = uri.path().to_string();
    let key = headers
        .get("x-routing-key")
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
        .unwrap_or_else(|| uri.path_and_query().map(|p| p.as_str().to_string()).unwrap_or_else(|| path.clone()));
    let token = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::to_string);
    Request { path, key, token }
}

async fn call_upstream(
    app: &App,
    address: &str,
    parts: &axum::http::request::Parts,
    body: Bytes,
) -> Result<Upstream, CallFailure> {
    let pq = parts.uri.path_and_query().map(|p| p.as_str()).unwrap_or("/");
    let url = format!("http://{address}{pq}");
    let mut headers = parts.headers.clone();
    headers.remove(header::HOST);
    let send = async {
        let resp = app
            .client
            .request(parts.method.clone(), &url)
            .headers(headers)
            .body(body)
            .send()
            .await
            .map_err(|e| CallFailure::Error(e.to_string()))?;
        let status = resp.status();
        let content_type = resp.headers().get(header::CONTENT_TYPE).cloned();
        let body = resp.bytes().await.map_err(|e| CallFailure::Error(e.to_string()))?;
        if status.is_server_error() {
            return Err(CallFailure::Error(format!("upstream answered {status}")));
        }
        Ok(Upstream {
            status: status.as_u16(),
            content_type,
            body,
        })
    };
    match tokio::time::timeout(app.call_timeout, send).await {
        Ok(r) => r,
        Err(_) => Err(CallFailure::Timeout),
    }
}

async fn proxy(State(app): State<Arc<App>>, req: axum::extract::Request) -> Response {
    let (parts, body) = req.into_parts();
    let request = routing_request(&parts.headers, &parts.uri);
    let gw = &app.gateway;
    let dispatch = match gw.prepare(&request) {
        Ok(d) => d,
        Err(e) => {
            if !matches!(e, GatewayError::Unauthenticated(_)) {
                gw.finish::<()>(&request, &Err(e.clone()));
            }
            return error(gateway_status(&e), e);
        }
    };
    let body = match to_bytes(body, MAX_BODY).await {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    let service = dispatch.decision.target.clone();
    let breaker = gw.breaker();
    let result: Result<Served<Upstream>, GatewayError> = match breaker.admit(&service) {
        Admission::Call(permit) => {
            let outcome = call_upstream(&app, &dispatch.instance.address, &parts, body).await;
            if let Err(e) = &outcome {
                log::warn!("{service}/{}: {e}", dispatch.instance.instance_id);
            }
            breaker.complete(permit, dispatch.digest, outcome).map_err(Into::into)
        }
        Admission::Blocked => breaker.fallback(&service, dispatch.digest, "circuit open").map_err(Into::into),
    };
    gw.finish(&request, &result);
    match result {
        Ok(served) => {
            let up = served.response;
            let mut resp = Response::new(Body::from(up.body));
            *resp.status_mut() = StatusCode::from_u16(up.status).unwrap_or(StatusCode::OK);
            let h = resp.headers_mut();
            if let Some(ct) = up.content_type {
                h.insert(header::CONTENT_TYPE, ct);
            }
            let provenance = match served.provenance {
                Provenance::Live => "live",
                Provenance::Cached => "cached",
            };
            h.insert("x-provenance", HeaderValue::from_static(provenance));
            if let Ok(v) = HeaderValue::from_str(&service) {
                h.insert("x-upstream-service", v);
            }
            if served.provenance == Provenance::Live {
                if let Ok(v) = HeaderValue::from_str(&dispatch.instance.instance_id) {
                    h.insert("x-served-by", v);
                }
            }
            resp
        }
        Err(e) => error(gateway_status(&e), e),
    }
}

struct Stub {
    name: String,
    served: AtomicU64,
}

/// Echo server: answers every request with its name and a running count.
pub fn stub(listen: SocketAddr, name: String) -> Result<Status> {
    let stub = Arc::new(Stub {
        name,
        served: AtomicU64::new(0),
    });
    runtime()?.block_on(async move {
        let router = Router::new()
            .route("/__count", get(stub_count))
            .fallback(stub_echo)
            .with_state(stub.clone());
        let listener = bind(listen).await?;
        announce(format!("{} listening on {}", stub.name, listener.local_addr()?));
        axum::serve(listener, router).with_graceful_shutdown(shutdown()).await?;
        Ok(Status::Clean)
    })
}

async fn stub_count(State(stub): State<Arc<Stub>>) -> Response {
    Json(json!({ "name": stub.name, "count": stub.served.load(Ordering::SeqCst) })).into_response()
}

async fn stub_echo(State(stub): State<Arc<Stub>>, req: axum::extract::Request) -> Response {
    let n = stub.served.fetch_add(1, Ordering::SeqCst) + 1;
    let key = req
        .headers()
        .get("x-routing-key")
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    Json(json!({
        "upstream": stub.name,
        "method": req.method().as_str(),
        "path": req.uri().path(),
        "key": key,
        "n": n,
    }))
    .into_response()
}
