//! Sidecar wire protocol: JSON bodies with base64 little-endian f32 tensors.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{BackendError, DrawSpec};

pub const ENCODE_PATH: &str = "/v1/encode";
pub const LOSS_MAP_PATH: &str = "/v1/loss_map";
pub const FEATURES_PATH: &str = "/v1/features";
pub const TEACHER_LOGITS_PATH: &str = "/v1/teacher_logits";
pub const HEALTH_PATH: &str = "/v1/health";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorPayload {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub data: String,
}

impl TensorPayload {
    pub fn from_slice(shape: Vec<usize>, values: &[f32]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            shape,
            dtype: "f32".to_string(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn from_array<D: ndarray::Dimension>(array: &ndarray::Array<f32, D>) -> Self {
        let values: Vec<f32> = array.iter().copied().collect();
        Self::from_slice(array.shape().to_vec(), &values)
    }

    pub fn to_vec(&self) -> Result<Vec<f32>, BackendError> {
        if self.dtype != "f32" {
            return Err(BackendError::Protocol(format!("unsupported dtype {}", self.dtype)));
        }
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| BackendError::Protocol(format!("bad base64 tensor: {e}")))?;
        let expected: usize = self.shape.iter().product();
        if bytes.len() != expected * 4 {
            return Err(BackendError::Protocol(format!(
                "tensor payload holds {} bytes, shape {:?} needs {}",
                bytes.len(),
                self.shape,
                expected * 4
            )));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn to_array(&self) -> Result<ArrayD<f32>, BackendError> {
        let values = self.to_vec()?;
        ArrayD::from_shape_vec(IxDyn(&self.shape), values)
            .map_err(|e| BackendError::Protocol(e.to_string()))
    }

    pub fn to_array2(&self) -> Result<Array2<f32>, BackendError> {
        self.to_array()?
            .into_dimensionality()
            .map_err(|_| BackendError::ShapeMismatch(format!("expected 2-D tensor, got {:?}", self.shape)))
    }

    /// Latents travel as `[C, H, W]` or `[H, W]` (one channel).
    pub fn to_latent_array(&self) -> Result<Array3<f32>, BackendError> {
        let arr = self.to_array()?;
        match arr.ndim() {
            2 => {
                let (h, w) = (self.shape[0], self.shape[1]);
                Ok(arr.into_shape_with_order((1, h, w)).map_err(|e| BackendError::Protocol(e.to_string()))?)
            }
            3 => Ok(arr.into_dimensionality().expect("checked ndim")),
            n => Err(BackendError::ShapeMismatch(format!("latent tensor must be 2-D or 3-D, got {n}-D"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncodeRequest {
    /// base64 PNG.
    pub image: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncodeResponse {
    pub latent: TensorPayload,
    pub downsample_factor: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossMapRequest {
    pub latent: TensorPayload,
    /// Rendered label template, or null for the unconditional prompt.
    pub prompt: Option<String>,
    pub draws: Vec<DrawSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossMapResponse {
    /// `[D, H', W']`, one map per draw in request order.
    pub loss_maps: TensorPayload,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeaturesRequest {
    pub latents: Vec<TensorPayload>,
    pub prompt: Option<String>,
    pub t: f64,
    pub layer: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeaturesResponse {
    pub features: Vec<TensorPayload>,
    /// Scheduler-convention mapping of `t` chosen by the sidecar, if reported.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherLogitsRequest {
    pub images: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherLogitsResponse {
    pub logits: Vec<TensorPayload>,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    #[serde(default)]
    pub model_ids: Vec<String>,
    pub downsample_factor: u32,
    #[serde(rename = "T_total", default)]
    pub t_total: u32,
}

/// Error body returned with 4xx/5xx statuses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

pub fn encode_png(image: &image::RgbImage) -> Result<String, BackendError> {
    let mut buf = std::io::Cursor::new(Vec::new());
    image
        .write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| BackendError::InvalidRequest(format!("png encode: {e}")))?;
    Ok(STANDARD.encode(buf.into_inner()))
}

pub fn decode_png(data: &str) -> Result<image::RgbImage, BackendError> {
    let bytes = STANDARD
        .decode(data)
        .map_err(|e| BackendError::InvalidRequest(format!("bad base64 image: {e}")))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| BackendError::InvalidRequest(format!("undecodable image: {e}")))?;
    Ok(img.to_rgb8())
}
