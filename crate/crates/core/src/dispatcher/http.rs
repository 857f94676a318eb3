use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{HeaderMap, HeaderName, HeaderValue, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response as AxumResponse};
use axum::Router;

use super::Dispatcher;
use crate::isc::envelope::MAX_BODY_BYTES;

/// Router for the user-facing listener: every request goes through
/// [`Dispatcher::dispatch`].
pub fn edge_router(dispatcher: Arc<Dispatcher>) -> Router {
    Router::new()
        .fallback(edge)
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(dispatcher)
}

async fn edge(
    State(d): State<Arc<Dispatcher>>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> AxumResponse {
    let path = uri.path_and_query().map(|p| p.as_str()).unwrap_or("/");
    let mut req = d.new_request(method.as_str(), path, body.to_vec());
    for (k, v) in headers.iter() {
        if let Ok(v) = v.to_str() {
            req.headers.insert(k.as_str().to_string(), v.to_string());
        }
    }
    let resp = d.dispatch(req).await;
    let status = StatusCode::from_u16(resp.status).unwrap_or(StatusCode::BAD_GATEWAY);
    let mut out = (status, resp.body).into_response();
    let h = out.headers_mut();
    for (k, v) in &resp.headers {
        if let (Ok(k), Ok(v)) = (HeaderName::try_from(k.as_str()), HeaderValue::from_str(v)) {
            h.insert(k, v);
        }
    }
    if let Ok(v) = HeaderValue::from_str(&resp.request_id) {
        h.insert("x-muk-request-id", v);
    }
    if let Some(Ok(v)) = resp.served_by.as_deref().map(HeaderValue::from_str) {
        h.insert("x-muk-instance", v);
    }
    out
}
