//! JSON-over-HTTP client for model services.
//!
//! Every endpoint takes a `POST` with a JSON body and answers with JSON.
//! Rasters travel as `{"width", "height", "rgb"}` with `rgb` the base64 of the
//! packed 8-bit RGB bytes. Boxes are normalized `[x, y, w, h]` arrays.
//!
//! | endpoint           | request                                  | response                               |
//! |--------------------|------------------------------------------|----------------------------------------|
//! | `/embed_text`      | `{"text"}`                               | `{"dim", "embedding": [f64]}`          |
//! | `/embed_image`     | `{"image"}`                              | `{"dim", "embedding": [f64]}`          |
//! | `/caption`         | `{"image", "prompt"}`                    | `{"caption"}`                          |
//! | `/inpaint`         | `{"image", "box", "text"}`               | `{"image"}` or `{"failed": reason}`    |
//! | `/propose`         | `{"image", "prompts": [str]}`            | `{"boxes": [{"box", "score"}]}`        |
//! | `/extract_phrases` | `{"caption", "template"}`                | `{"phrases": [str]}`                   |
//! | `/aesthetic`       | `{"image"}`                              | `{"score"}`                            |

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::synth::models::PROPOSAL_PROMPTS;
use super::{
    AestheticScorer, Captioner, Embedding, Image, Inpainter, PhraseExtractor, ProposalGenerator,
    ProviderError, ProviderResult, ProviderSuite, TextEncoder, VisionEncoder, RENORMALIZE_TOL,
};
use crate::geometry::{BBox, ScoredBox};

/// Default prompt template for the phrase extraction service.
pub const EXTRACTION_TEMPLATE: &str = include_str!("../../data/extraction_prompt.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    /// Base URL every endpoint path is appended to.
    pub base_url: String,
    /// Embedding width the services must return.
    pub dim: usize,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Extra attempts after a transient failure.
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_retries() -> u32 {
    1
}

fn default_in_flight() -> usize {
    4
}

/// Moves one JSON request to a service and back.
pub trait Transport: Send + Sync {
    fn post(&self, endpoint: &str, body: &Value) -> ProviderResult<Value>;
}

/// Blocking HTTP transport.
pub struct HttpTransport {
    agent: ureq::Agent,
    base_url: String,
}

impl HttpTransport {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            base_url: base_url.trim_end_matches('/').to_owned(),
        }
    }
}

impl Transport for HttpTransport {
    fn post(&self, endpoint: &str, body: &Value) -> ProviderResult<Value> {
        let url = format!("{}{}", self.base_url, endpoint);
        let transport = |e: ureq::Error| match e {
            ureq::Error::Timeout(_) => ProviderError::Timeout { endpoint: endpoint.into() },
            other => ProviderError::Transport {
                endpoint: endpoint.into(),
                message: other.to_string(),
            },
        };
        let mut resp = self
            .agent
            .post(&url)
            .header("content-type", "application/json")
            .send(body.to_string())
            .map_err(transport)?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(ProviderError::Status { endpoint: endpoint.into(), status });
        }
        let text = resp.body_mut().read_to_string().map_err(transport)?;
        serde_json::from_str(&text).map_err(|e| ProviderError::Malformed {
            endpoint: endpoint.into(),
            message: e.to_string(),
        })
    }
}

/// Shared request machinery: retries and response validation.
pub struct RemoteClient {
    transport: Arc<dyn Transport>,
    config: RemoteConfig,
    retries_used: AtomicU64,
}

impl RemoteClient {
    pub fn new(transport: Arc<dyn Transport>, config: RemoteConfig) -> Self {
        Self {
            transport,
            config,
            retries_used: AtomicU64::new(0),
        }
    }

    /// Retries performed so far across all endpoints.
    pub fn retries_used(&self) -> u64 {
        self.retries_used.load(Ordering::Relaxed)
    }

    fn call(&self, endpoint: &str, body: &Value) -> ProviderResult<Value> {
        let mut attempt = 0;
        loop {
            match self.transport.post(endpoint, body) {
                Err(e) if e.is_transient() && attempt < self.config.retries => {
                    attempt += 1;
                    self.retries_used.fetch_add(1, Ordering::Relaxed);
                    log::warn!("{e}; retry {attempt}/{}", self.config.retries);
                }
                Err(e) => {
                    log::warn!("{e}");
                    return Err(e);
                }
                Ok(v) => return Ok(v),
            }
        }
    }

    fn field<T: serde::de::DeserializeOwned>(endpoint: &str, v: &Value, key: &str) -> ProviderResult<T> {
        let raw = v.get(key).ok_or_else(|| ProviderError::Malformed {
            endpoint: endpoint.into(),
            message: format!("missing `{key}`"),
        })?;
        T::deserialize(raw).map_err(|e| ProviderError::Malformed {
            endpoint: endpoint.into(),
            message: format!("`{key}`: {e}"),
        })
    }

    fn embedding(&self, endpoint: &str, body: Value) -> ProviderResult<Embedding> {
        let v = self.call(endpoint, &body)?;
        let dim: usize = Self::field(endpoint, &v, "dim")?;
        let values: Vec<f64> = Self::field(endpoint, &v, "embedding")?;
        if dim != values.len() {
            return Err(ProviderError::Malformed {
                endpoint: endpoint.into(),
                message: format!("`dim` is {dim} but embedding has {} entries", values.len()),
            });
        }
        if dim != self.config.dim {
            return Err(ProviderError::DimensionMismatch { expected: self.config.dim, got: dim });
        }
        let n = crate::tinynn::tensor::norm(&values);
        if !n.is_finite() || (n - 1.0).abs() >= RENORMALIZE_TOL {
            return Err(ProviderError::NotUnitNorm { norm: n });
        }
        Embedding::normalized(values)
    }
}

pub fn encode_image(image: &Image) -> Value {
    json!({
        "width": image.width(),
        "height": image.height(),
        "rgb": STANDARD.encode(image.rgb()),
    })
}

pub fn decode_image(endpoint: &str, v: &Value) -> ProviderResult<Image> {
    let bad = |message: String| ProviderError::Malformed { endpoint: endpoint.into(), message };
    let width: u32 = RemoteClient::field(endpoint, v, "width")?;
    let height: u32 = RemoteClient::field(endpoint, v, "height")?;
    let rgb: String = RemoteClient::field(endpoint, v, "rgb")?;
    let rgb = STANDARD.decode(rgb).map_err(|e| bad(e.to_string()))?;
    if rgb.len() as u64 != width as u64 * height as u64 * 3 {
        return Err(bad(format!("{} rgb bytes for {width}x{height}", rgb.len())));
    }
    Ok(Image::new(width, height, rgb))
}

struct Remote(Arc<RemoteClient>);

impl TextEncoder for Remote {
    fn dim(&self) -> usize {
        self.0.config.dim
    }

    fn embed_text(&self, text: &str) -> ProviderResult<Embedding> {
        self.0.embedding("/embed_text", json!({ "text": text }))
    }
}

impl VisionEncoder for Remote {
    fn dim(&self) -> usize {
        self.0.config.dim
    }

    fn embed_image(&self, image: &Image) -> ProviderResult<Embedding> {
        self.0.embedding("/embed_image", json!({ "image": encode_image(image) }))
    }
}

impl Captioner for Remote {
    fn caption(&self, crop: &Image, prompt: &str) -> ProviderResult<String> {
        let v = self.0.call("/caption", &json!({ "image": encode_image(crop), "prompt": prompt }))?;
        RemoteClient::field("/caption", &v, "caption")
    }
}

impl Inpainter for Remote {
    fn inpaint(&self, image: &Image, region: &BBox, text: &str) -> ProviderResult<Image> {
        const EP: &str = "/inpaint";
        let body = json!({ "image": encode_image(image), "box": region.to_array(), "text": text });
        let v = self.0.call(EP, &body)?;
        if let Some(reason) = v.get("failed") {
            return Err(ProviderError::FailedRegion(reason.as_str().unwrap_or("unspecified").into()));
        }
        let out = decode_image(EP, v.get("image").unwrap_or(&Value::Null))?;
        if (out.width(), out.height()) != (image.width(), image.height()) {
            return Err(ProviderError::Malformed {
                endpoint: EP.into(),
                message: "inpainted image changed size".into(),
            });
        }
        Ok(out)
    }
}

#[derive(Deserialize)]
struct WireBox {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    score: f64,
}

impl ProposalGenerator for Remote {
    fn propose(&self, image: &Image) -> ProviderResult<Vec<ScoredBox>> {
        const EP: &str = "/propose";
        let v = self.0.call(EP, &json!({ "image": encode_image(image), "prompts": PROPOSAL_PROMPTS }))?;
        let boxes: Vec<WireBox> = RemoteClient::field(EP, &v, "boxes")?;
        boxes
            .into_iter()
            .map(|w| {
                let [x, y, bw, bh] = w.bbox;
                BBox::new(x, y, bw, bh)
                    .and_then(|b| ScoredBox::new(b, w.score))
                    .map_err(|e| ProviderError::Malformed { endpoint: EP.into(), message: e.to_string() })
            })
            .collect()
    }
}

impl PhraseExtractor for Remote {
    fn extract(&self, caption: &str) -> ProviderResult<Vec<String>> {
        const EP: &str = "/extract_phrases";
        let template: Value = serde_json::from_str(EXTRACTION_TEMPLATE).expect("bundled template is JSON");
        let v = self.0.call(EP, &json!({ "caption": caption, "template": template }))?;
        RemoteClient::field(EP, &v, "phrases")
    }
}

impl AestheticScorer for Remote {
    fn score(&self, image: &Image) -> ProviderResult<f64> {
        const EP: &str = "/aesthetic";
        let v = self.0.call(EP, &json!({ "image": encode_image(image) }))?;
        let s: f64 = RemoteClient::field(EP, &v, "score")?;
        if !s.is_finite() {
            return Err(ProviderError::Malformed { endpoint: EP.into(), message: "non-finite score".into() });
        }
        Ok(s)
    }
}

/// Suite whose providers all talk to services under `config.base_url`.
pub fn remote_suite(config: RemoteConfig) -> ProviderSuite {
    let transport = Arc::new(HttpTransport::new(&config.base_url, Duration::from_millis(config.timeout_ms)));
    suite_over(transport, config)
}

/// Suite over an arbitrary transport.
pub fn suite_over(transport: Arc<dyn Transport>, config: RemoteConfig) -> ProviderSuite {
    let max_in_flight = config.max_in_flight.max(1);
    let client = Arc::new(RemoteClient::new(transport, config));
    let r = || Arc::new(Remote(client.clone()));
    ProviderSuite {
        text_encoder: r(),
        vision_encoder: r(),
        captioner: r(),
        inpainter: r(),
        proposal_gen: r(),
        phrase_extractor: r(),
        aesthetic_scorer: r(),
        max_in_flight,
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Mutex;

    use super::*;

    /// Replays canned responses in order and records requests.
    struct Scripted {
        replies: Mutex<Vec<ProviderResult<Value>>>,
        seen: Mutex<Vec<String>>,
    }

    impl Scripted {
        fn new(mut replies: Vec<ProviderResult<Value>>) -> Arc<Self> {
            replies.reverse();
            Arc::new(Self { replies: Mutex::new(replies), seen: Mutex::new(vec![]) })
        }
    }

    impl Transport for Scripted {
        fn post(&self, endpoint: &str, _body: &Value) -> ProviderResult<Value> {
            self.seen.lock().unwrap().push(endpoint.into());
            self.replies.lock().unwrap().pop().expect("scripted reply")
        }
    }

    fn cfg(retries: u32) -> RemoteConfig {
        RemoteConfig {
            base_url: "http://localhost:0".into(),
            dim: 2,
            timeout_ms: 10,
            retries,
            max_in_flight: 2,
        }
    }

    #[test]
    fn near_unit_vectors_are_renormalized() {
        let t = Scripted::new(vec![
            Ok(json!({"dim": 2, "embedding": [0.6, 0.8005]})),
            Ok(json!({"dim": 2, "embedding": [0.6, 0.81]})),
        ]);
        let s = suite_over(t, cfg(0));
        let e = s.text_encoder.embed_text("x").unwrap();
        assert!((crate::tinynn::tensor::norm(e.as_slice()) - 1.0).abs() < 1e-12);
        assert!(matches!(s.text_encoder.embed_text("x"), Err(ProviderError::NotUnitNorm { .. })));
    }

    #[test]
    fn transient_status_is_retried() {
        let t = Scripted::new(vec![
            Err(ProviderError::Status { endpoint: "/caption".into(), status: 503 }),
            Ok(json!({"caption": "a dog"})),
        ]);
        let client = Arc::new(RemoteClient::new(t.clone(), cfg(1)));
        let img = Image::new(1, 1, vec![0, 0, 0]);
        assert_eq!(Remote(client.clone()).caption(&img, "p").unwrap(), "a dog");
        assert_eq!(client.retries_used(), 1);
        assert_eq!(t.seen.lock().unwrap().len(), 2);
    }

    #[test]
    fn retries_are_bounded() {
        let err = || Err(ProviderError::Timeout { endpoint: "/aesthetic".into() });
        let t = Scripted::new(vec![err(), err(), err()]);
        let s = suite_over(t, cfg(1));
        let img = Image::new(1, 1, vec![0, 0, 0]);
        assert!(matches!(s.aesthetic_scorer.score(&img), Err(ProviderError::Timeout { .. })));
    }

    #[test]
    fn wrong_dimension_is_typed() {
        let t = Scripted::new(vec![Ok(json!({"dim": 3, "embedding": [1.0, 0.0, 0.0]}))]);
        let s = suite_over(t, cfg(0));
        let img = Image::new(1, 1, vec![0, 0, 0]);
        assert_eq!(
            s.vision_encoder.embed_image(&img),
            Err(ProviderError::DimensionMismatch { expected: 2, got: 3 })
        );
    }

    #[test]
    fn malformed_and_failed_responses() {
        let img = Image::new(2, 1, vec![1, 2, 3, 4, 5, 6]);
        let b = BBox::full();
        let t = Scripted::new(vec![
            Ok(json!({"nope": 1})),
            Ok(json!({"failed": "nsfw"})),
            Ok(json!({"image": encode_image(&img)})),
            Ok(json!({"boxes": [{"box": [0.1, 0.1, 0.2, 0.2], "score": 0.5}]})),
        ]);
        let s = suite_over(t, cfg(0));
        assert!(matches!(s.inpainter.inpaint(&img, &b, "x"), Err(ProviderError::Malformed { .. })));
        assert!(matches!(s.inpainter.inpaint(&img, &b, "x"), Err(ProviderError::FailedRegion(_))));
        assert_eq!(s.inpainter.inpaint(&img, &b, "x").unwrap(), img);
        assert_eq!(s.proposal_gen.propose(&img).unwrap().len(), 1);
    }

    #[test]
    fn template_is_valid_json() {
        let v: Value = serde_json::from_str(EXTRACTION_TEMPLATE).unwrap();
        assert_eq!(v["exemplars"].as_array().unwrap().len(), 4);
    }
}
