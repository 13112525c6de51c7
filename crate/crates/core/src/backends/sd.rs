//! Stable Diffusion WebUI driver (`/sdapi/v1/txt2img`, `/sdapi/v1/img2img`).

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde_json::{json, Value};

use super::{BackendError, BackendSpec, Health};
use crate::llm::excerpt;
use crate::router::{GenerationKind, GenerationRequest};

fn endpoint(spec: &BackendSpec, path: &str) -> String {
    format!("{}{path}", spec.base_url.as_deref().unwrap_or_default().trim_end_matches('/'))
}

fn map_transport(e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::BackendTimeout
    } else {
        BackendError::Unreachable(e.to_string())
    }
}

pub(super) async fn generate(
    http: &reqwest::Client,
    spec: &BackendSpec,
    request: &GenerationRequest,
    parent: Option<&[u8]>,
) -> Result<Vec<u8>, BackendError> {
    // the WebUI treats seeds as signed 32-bit values
    let mut body = json!({
        "prompt": request.refined.positive,
        "negative_prompt": request.refined.negative,
        "seed": request.seed & 0xFFFF_FFFF,
        "width": request.width,
        "height": request.height,
        "steps": spec.steps,
    });
    let path = match (request.kind, parent) {
        (GenerationKind::New, _) => "/sdapi/v1/txt2img",
        (_, Some(parent)) => {
            body["init_images"] = json!([STANDARD.encode(parent)]);
            body["denoising_strength"] = json!(spec.strength_for(request.kind, request.change_class));
            "/sdapi/v1/img2img"
        }
        (_, None) => return Err(BackendError::MissingParent),
    };
    let response = http
        .post(endpoint(spec, path))
        .timeout(spec.timeout_duration())
        .json(&body)
        .send()
        .await
        .map_err(map_transport)?;
    let status = response.status();
    let text = response.text().await.map_err(map_transport)?;
    if !status.is_success() {
        return Err(BackendError::BackendHttpError {
            status: status.as_u16(),
            body: excerpt(&text),
        });
    }
    let payload: Value =
        serde_json::from_str(&text).map_err(|e| BackendError::DecodeError(format!("response is not JSON: {e}")))?;
    let encoded = payload["images"][0]
        .as_str()
        .ok_or_else(|| BackendError::DecodeError("response has no images[0] string".into()))?;
    let bytes = STANDARD
        .decode(encoded.trim())
        .map_err(|e| BackendError::DecodeError(format!("bad base64: {e}")))?;
    super::png_dimensions(&bytes)?;
    Ok(bytes)
}

pub(super) async fn health(http: &reqwest::Client, spec: &BackendSpec) -> Health {
    let probe = http
        .get(endpoint(spec, "/sdapi/v1/progress"))
        .timeout(spec.timeout_duration())
        .send()
        .await;
    match probe {
        Ok(r) if r.status().is_success() => Health::Ok,
        Ok(r) => Health::Degraded(format!("progress probe returned HTTP {}", r.status().as_u16())),
        Err(e) => Health::Down(e.to_string()),
    }
}
