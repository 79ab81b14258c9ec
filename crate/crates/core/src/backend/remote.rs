//! HTTP client for the inference sidecar.

use std::time::Duration;

use image::RgbImage;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tracing::warn;

use super::wire::*;
use super::{
    softmax, Backend, BackendError, DrawSpec, FeatureVector, LatentMap, LossMap, PromptSpec,
    Teacher, TeacherInput,
};

const MAX_ATTEMPTS: u32 = 3;
const BASE_BACKOFF: Duration = Duration::from_millis(100);

#[derive(Debug, Clone)]
struct Http {
    base: String,
    agent: ureq::Agent,
}

impl Http {
    fn new(endpoint: &str) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(300)))
            .build()
            .into();
        Self {
            base: endpoint.trim_end_matches('/').to_string(),
            agent,
        }
    }

    fn once<R: DeserializeOwned>(
        &self,
        path: &str,
        body: Option<&serde_json::Value>,
    ) -> Result<R, BackendError> {
        let url = format!("{}{}", self.base, path);
        let result = match body {
            Some(b) => self.agent.post(&url).send_json(b),
            None => self.agent.get(&url).call(),
        };
        let mut resp = result.map_err(|e| BackendError::Unavailable(format!("{url}: {e}")))?;
        let status = resp.status().as_u16();
        if status >= 400 {
            let text = resp
                .body_mut()
                .read_to_string()
                .unwrap_or_default();
            let msg = serde_json::from_str::<ErrorBody>(&text)
                .map(|b| b.error)
                .unwrap_or(text);
            return Err(if status >= 500 {
                BackendError::Unavailable(format!("{url}: HTTP {status}: {msg}"))
            } else {
                BackendError::InvalidRequest(format!("{url}: HTTP {status}: {msg}"))
            });
        }
        resp.body_mut()
            .with_config()
            .limit(1 << 30)
            .read_json::<R>()
            .map_err(|e| BackendError::Protocol(format!("{url}: bad response body: {e}")))
    }

    /// Request with up to three attempts and exponential backoff on
    /// transient failures.
    fn request<B: Serialize, R: DeserializeOwned>(
        &self,
        path: &str,
        body: Option<&B>,
    ) -> Result<R, BackendError> {
        let body = body
            .map(serde_json::to_value)
            .transpose()
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let mut attempt = 0;
        loop {
            match self.once(path, body.as_ref()) {
                Err(e) if e.is_transient() && attempt + 1 < MAX_ATTEMPTS => {
                    let wait = BASE_BACKOFF * 2u32.pow(attempt);
                    warn!(path, attempt, error = %e, "retrying sidecar request");
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

fn wire_prompt(prompt: &PromptSpec) -> Option<String> {
    match prompt {
        PromptSpec::Label(_) => Some(prompt.render()),
        PromptSpec::Null => None,
    }
}

/// [`Backend`] speaking the sidecar protocol.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    http: Http,
}

impl RemoteBackend {
    pub fn new(endpoint: &str) -> Self {
        Self {
            http: Http::new(endpoint),
        }
    }

    pub fn health(&self) -> Result<HealthResponse, BackendError> {
        self.http.request::<(), _>(HEALTH_PATH, None)
    }
}

impl Backend for RemoteBackend {
    fn encode(&self, image: &RgbImage, source_id: &str) -> Result<LatentMap, BackendError> {
        let req = EncodeRequest {
            image: encode_png(image)?,
        };
        let resp: EncodeResponse = self.http.request(ENCODE_PATH, Some(&req))?;
        LatentMap::new(resp.latent.to_latent_array()?, resp.downsample_factor, source_id)
    }

    fn loss_maps(
        &self,
        latent: &LatentMap,
        prompt: &PromptSpec,
        draws: &[DrawSpec],
    ) -> Result<Vec<LossMap>, BackendError> {
        for d in draws {
            d.validate()?;
        }
        let req = LossMapRequest {
            latent: TensorPayload::from_array(&latent.data),
            prompt: wire_prompt(prompt),
            draws: draws.to_vec(),
        };
        let resp: LossMapResponse = self.http.request(LOSS_MAP_PATH, Some(&req))?;
        let arr = resp.loss_maps.to_array()?;
        let (h, w) = (latent.height(), latent.width());
        if arr.shape() != [draws.len(), h, w] {
            return Err(BackendError::ShapeMismatch(format!(
                "loss maps {:?}, expected [{}, {h}, {w}]",
                arr.shape(),
                draws.len()
            )));
        }
        let arr: ndarray::Array3<f32> = arr.into_dimensionality().expect("checked shape");
        Ok(draws
            .iter()
            .zip(arr.outer_iter())
            .map(|(d, m)| LossMap {
                data: m.to_owned(),
                draw: *d,
                prompt: prompt.clone(),
            })
            .collect())
    }

    fn features(
        &self,
        latents: &[LatentMap],
        prompt: &PromptSpec,
        feature_t: f64,
        layer: &str,
    ) -> Result<Vec<FeatureVector>, BackendError> {
        if latents.is_empty() {
            return Ok(Vec::new());
        }
        let req = FeaturesRequest {
            latents: latents.iter().map(|l| TensorPayload::from_array(&l.data)).collect(),
            prompt: wire_prompt(prompt),
            t: feature_t,
            layer: layer.to_string(),
        };
        let resp: FeaturesResponse = self.http.request(FEATURES_PATH, Some(&req))?;
        if resp.features.len() != latents.len() {
            return Err(BackendError::ShapeMismatch(format!(
                "{} feature vectors for {} latents",
                resp.features.len(),
                latents.len()
            )));
        }
        resp.features
            .iter()
            .map(|f| {
                Ok(FeatureVector {
                    values: f.to_vec()?,
                    feature_t,
                    layer_tag: layer.to_string(),
                })
            })
            .collect()
    }
}

/// Teacher backed by the sidecar's logits endpoint; logits are softmaxed.
#[derive(Debug, Clone)]
pub struct RemoteTeacher {
    http: Http,
    class_names: Vec<String>,
}

impl RemoteTeacher {
    /// Connects lazily; the class list is fetched with an empty batch.
    pub fn connect(endpoint: &str) -> Result<Self, BackendError> {
        let http = Http::new(endpoint);
        let resp: TeacherLogitsResponse = http.request(
            TEACHER_LOGITS_PATH,
            Some(&TeacherLogitsRequest { images: Vec::new() }),
        )?;
        Ok(Self {
            http,
            class_names: resp.class_names,
        })
    }
}

impl Teacher for RemoteTeacher {
    fn class_names(&self) -> Vec<String> {
        self.class_names.clone()
    }

    fn probabilities(&self, inputs: &[TeacherInput<'_>]) -> Result<Vec<Vec<f32>>, BackendError> {
        let images = inputs
            .iter()
            .map(|i| encode_png(i.image))
            .collect::<Result<Vec<_>, _>>()?;
        let resp: TeacherLogitsResponse = self
            .http
            .request(TEACHER_LOGITS_PATH, Some(&TeacherLogitsRequest { images }))?;
        if resp.logits.len() != inputs.len() {
            return Err(BackendError::ShapeMismatch(format!(
                "{} logit vectors for {} images",
                resp.logits.len(),
                inputs.len()
            )));
        }
        resp.logits
            .iter()
            .map(|l| {
                let z: Vec<f64> = l.to_vec()?.into_iter().map(f64::from).collect();
                if z.len() != self.class_names.len() {
                    return Err(BackendError::ShapeMismatch(format!(
                        "logit dim {} but {} class names",
                        z.len(),
                        self.class_names.len()
                    )));
                }
                Ok(softmax(&z).into_iter().map(|p| p as f32).collect())
            })
            .collect()
    }
}
