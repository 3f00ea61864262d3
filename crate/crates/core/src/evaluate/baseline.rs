use super::{normalized, rank, EvalError, GalleryIndex};
use crate::image::decode_uri;
use crate::synthetic::AttributeSchema;
use crate::types::ImageRef;

/// Separate image and text encoders sharing one embedding space.
pub trait UnimodalBackend: Sync {
    fn embed_image(&self, image: &ImageRef) -> Result<Vec<f64>, EvalError>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, EvalError>;
}

/// Idealized encoder pair over an attribute schema: images map to their
/// one-hot attribute code, texts to the bag of attribute values they mention.
#[derive(Debug, Clone, Default)]
pub struct AttributeBackend {
    pub schema: AttributeSchema,
}

impl AttributeBackend {
    pub fn new(schema: AttributeSchema) -> Self {
        Self { schema }
    }
}

impl UnimodalBackend for AttributeBackend {
    fn embed_image(&self, image: &ImageRef) -> Result<Vec<f64>, EvalError> {
        let raw = decode_uri(&image.uri, &self.schema).map_err(|e| EvalError::Backend(e.to_string()))?;
        Ok(raw.pooled_unit())
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, EvalError> {
        let mut v = vec![0.0; self.schema.total_values()];
        let lower = text.to_lowercase();
        for word in lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            if let Some(i) = self.schema.value_index(word) {
                v[i] = 1.0;
            }
        }
        Ok(normalized(&v))
    }
}

pub fn baseline_text_only(
    text: &str,
    backend: &dyn UnimodalBackend,
    index: &GalleryIndex,
) -> Result<Vec<String>, EvalError> {
    rank(&backend.embed_text(text)?, index)
}

pub fn baseline_image_only(
    reference: &ImageRef,
    backend: &dyn UnimodalBackend,
    index: &GalleryIndex,
) -> Result<Vec<String>, EvalError> {
    rank(&backend.embed_image(reference)?, index)
}

/// Ranks by the normalized sum of the normalized image and text embeddings.
pub fn baseline_image_plus_text(
    reference: &ImageRef,
    text: &str,
    backend: &dyn UnimodalBackend,
    index: &GalleryIndex,
) -> Result<Vec<String>, EvalError> {
    let img = normalized(&backend.embed_image(reference)?);
    let txt = normalized(&backend.embed_text(text)?);
    if img.len() != txt.len() {
        return Err(EvalError::Dimension {
            query: txt.len(),
            gallery: img.len(),
        });
    }
    let fused: Vec<f64> = img.iter().zip(&txt).map(|(a, b)| a + b).collect();
    rank(&normalized(&fused), index)
}
