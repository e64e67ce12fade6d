use std::collections::HashMap;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DeviceId, Digest, ImageBlob, ImageError, LabelId, ProjectState, Split};

use super::features::{extractor_by_id, FeatureExtractor, FeatureVector, HistPool};
use super::softmax::{argmax, fit, softmax, Hyper, Params};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("need at least 2 labels with training data, found {0}")]
    InsufficientData(usize),
    #[error("image {0} is not available locally")]
    MissingBlob(Digest),
}

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error(transparent)]
    MalformedImage(#[from] ImageError),
    #[error("model uses feature extractor {0:?}, which this engine does not provide")]
    UnknownExtractor(String),
}

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("model file is missing its {0} line")]
    MissingLine(&'static str),
    #[error("bad model header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("bad model payload: {0}")]
    Payload(String),
}

/// Probabilities aligned with a model's `label_order`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfidenceVector(pub Vec<f64>);

impl ConfidenceVector {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    /// Position of the top-1 label; ties go to the earlier label.
    pub fn top1(&self) -> usize {
        argmax(&self.0)
    }
}

/// Looks up decoded images by digest.
pub trait BlobSource {
    fn blob(&self, digest: &Digest) -> Option<&ImageBlob>;
}

impl BlobSource for HashMap<Digest, ImageBlob> {
    fn blob(&self, digest: &Digest) -> Option<&ImageBlob> {
        self.get(digest)
    }
}

impl BlobSource for std::collections::BTreeMap<Digest, ImageBlob> {
    fn blob(&self, digest: &Digest) -> Option<&ImageBlob> {
        self.get(digest)
    }
}

/// A trained classifier. Lives on the device that trained it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub version: u64,
    pub device: DeviceId,
    pub label_order: Vec<LabelId>,
    pub params: Params,
    pub extractor_id: String,
    pub trained_at: u64,
    pub train_sample_count: usize,
}

impl TrainedModel {
    pub fn classify(&self, image: &ImageBlob) -> Result<ConfidenceVector, ClassifyError> {
        let extractor = extractor_by_id(&self.extractor_id)
            .ok_or_else(|| ClassifyError::UnknownExtractor(self.extractor_id.clone()))?;
        Ok(self.classify_features(&extractor.extract(image)))
    }

    pub fn classify_ppm(&self, bytes: &[u8]) -> Result<ConfidenceVector, ClassifyError> {
        self.classify(&ImageBlob::from_ppm(bytes)?)
    }

    pub fn classify_features(&self, features: &FeatureVector) -> ConfidenceVector {
        ConfidenceVector(softmax(&self.params.logits(features.values())))
    }

    pub fn label_at(&self, index: usize) -> LabelId {
        self.label_order[index]
    }

    pub fn position(&self, label: LabelId) -> Option<usize> {
        self.label_order.iter().position(|l| *l == label)
    }

    /// Two-line model file: a JSON header, then base64 of the little-endian
    /// f64 weights (row-major) followed by the biases.
    pub fn to_file_string(&self) -> String {
        let header = ModelHeader {
            format: MODEL_FORMAT.into(),
            version: self.version,
            device: self.device,
            label_order: self.label_order.clone(),
            extractor_id: self.extractor_id.clone(),
            shapes: Shapes {
                weights: [self.params.classes, self.params.dim],
                bias: [self.params.classes],
            },
            trained_at: self.trained_at,
            train_sample_count: self.train_sample_count,
        };
        let mut raw = Vec::with_capacity(8 * (self.params.weights.len() + self.params.bias.len()));
        for v in self.params.weights.iter().chain(&self.params.bias) {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        format!(
            "{}\n{}\n",
            serde_json::to_string(&header).expect("header serializes"),
            BASE64.encode(raw)
        )
    }

    pub fn from_file_str(text: &str) -> Result<Self, ModelFileError> {
        let mut lines = text.lines();
        let header: ModelHeader =
            serde_json::from_str(lines.next().ok_or(ModelFileError::MissingLine("header"))?)?;
        if header.format != MODEL_FORMAT {
            return Err(ModelFileError::Payload(format!(
                "unknown format {:?}",
                header.format
            )));
        }
        let raw = BASE64
            .decode(lines.next().ok_or(ModelFileError::MissingLine("payload"))?.trim())
            .map_err(|e| ModelFileError::Payload(e.to_string()))?;
        let [classes, dim] = header.shapes.weights;
        if header.shapes.bias != [classes] || header.label_order.len() != classes {
            return Err(ModelFileError::Payload("inconsistent shapes".into()));
        }
        if raw.len() != 8 * (classes * dim + classes) {
            return Err(ModelFileError::Payload(format!(
                "expected {} payload bytes, got {}",
                8 * (classes * dim + classes),
                raw.len()
            )));
        }
        let mut values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let weights: Vec<f64> = values.by_ref().take(classes * dim).collect();
        let bias: Vec<f64> = values.collect();
        Ok(TrainedModel {
            version: header.version,
            device: header.device,
            label_order: header.label_order,
            params: Params {
                classes,
                dim,
                weights,
                bias,
            },
            extractor_id: header.extractor_id,
            trained_at: header.trained_at,
            train_sample_count: header.train_sample_count,
        })
    }
}

const MODEL_FORMAT: &str = "coml-model-v1";

#[derive(Serialize, Deserialize)]
struct Shapes {
    weights: [usize; 2],
    bias: [usize; 1],
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    version: u64,
    device: DeviceId,
    label_order: Vec<LabelId>,
    extractor_id: String,
    shapes: Shapes,
    trained_at: u64,
    train_sample_count: usize,
}

/// Trains models for one device. Versions increase by one per successful
/// training run; extracted features are cached by image digest.
pub struct TrainingEngine {
    device: DeviceId,
    last_version: u64,
    extractor: Box<dyn FeatureExtractor>,
    hyper: Hyper,
    cache: HashMap<Digest, FeatureVector>,
}

impl TrainingEngine {
    pub fn new(device: DeviceId) -> Self {
        TrainingEngine {
            device,
            last_version: 0,
            extractor: Box::new(HistPool),
            hyper: Hyper::default(),
            cache: HashMap::new(),
        }
    }

    pub fn with_hyper(mut self, hyper: Hyper) -> Self {
        self.hyper = hyper;
        self
    }

    /// Continue numbering after a previously issued version.
    pub fn resume_after(mut self, version: u64) -> Self {
        self.last_version = version;
        self
    }

    pub fn hyper(&self) -> &Hyper {
        &self.hyper
    }

    pub fn last_version(&self) -> u64 {
        self.last_version
    }

    pub fn extractor(&self) -> &dyn FeatureExtractor {
        self.extractor.as_ref()
    }

    pub fn features(&mut self, image: &ImageBlob) -> FeatureVector {
        if let Some(f) = self.cache.get(&image.digest()) {
            return f.clone();
        }
        let f = self.extractor.extract(image);
        self.cache.insert(image.digest(), f.clone());
        f
    }

    /// Labels a model trained on `state` would predict: live labels with at
    /// least one live training sample, in id order.
    pub fn trainable_labels(state: &ProjectState) -> Vec<LabelId> {
        state
            .live_counts()
            .into_iter()
            .filter(|(_, (train, _))| *train > 0)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn train(
        &mut self,
        state: &ProjectState,
        blobs: &dyn BlobSource,
        seed: u64,
        trained_at: u64,
    ) -> Result<TrainedModel, TrainError> {
        let label_order = Self::trainable_labels(state);
        if label_order.len() < 2 {
            return Err(TrainError::InsufficientData(label_order.len()));
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        // live_samples iterates in SampleId order.
        for s in state.live_samples().filter(|s| s.split == Split::Training) {
            let y = label_order
                .iter()
                .position(|l| *l == s.label)
                .expect("trainable label");
            let image = blobs.blob(&s.blob).ok_or(TrainError::MissingBlob(s.blob))?;
            xs.push(self.features(image).into_inner());
            ys.push(y);
        }
        let params = fit(&xs, &ys, label_order.len(), self.extractor.dim(), &self.hyper, seed);
        self.last_version += 1;
        Ok(TrainedModel {
            version: self.last_version,
            device: self.device,
            label_order,
            params,
            extractor_id: self.extractor.id().to_string(),
            trained_at,
            train_sample_count: xs.len(),
        })
    }
}
