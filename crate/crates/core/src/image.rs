//! Toy image inputs addressed by URI.
//!
//! Two schemes are understood:
//!
//! * `vec:0.1,0.2|0.3,0.4`: explicit patch vectors, patches separated by `|`.
//! * `attr:shape=circle;color=red;...`: an attribute tuple under an
//!   [`AttributeSchema`]; each slot becomes one patch holding a one-hot code
//!   over the schema's full value list.
//!
//! Anything else is a decode failure; real pixel backends plug in behind the
//! encoder traits instead.

use crate::synthetic::AttributeSchema;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ImageError {
    #[error("unsupported image uri {0:?}")]
    UnsupportedScheme(String),
    #[error("malformed image uri {uri:?}: {reason}")]
    Malformed { uri: String, reason: String },
}

/// Decoded patch matrix of a toy image: C rows of equal width.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub patches: Vec<Vec<f64>>,
}

impl RawImage {
    pub fn channels(&self) -> usize {
        self.patches.len()
    }

    pub fn width(&self) -> usize {
        self.patches.first().map_or(0, Vec::len)
    }

    /// Mean over patches, scaled to unit length (zero stays zero).
    pub fn pooled_unit(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.width()];
        for p in &self.patches {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v;
            }
        }
        let n = self.patches.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        crate::evaluate::normalized(&mean)
    }
}

pub fn decode_uri(uri: &str, schema: &AttributeSchema) -> Result<RawImage, ImageError> {
    let malformed = |reason: String| ImageError::Malformed {
        uri: uri.to_string(),
        reason,
    };
    if let Some(body) = uri.strip_prefix("vec:") {
        let mut patches = Vec::new();
        for part in body.split('|') {
            let row = part
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| malformed(e.to_string()))?;
            if row.iter().any(|x| !x.is_finite()) {
                return Err(malformed("non-finite value".into()));
            }
            patches.push(row);
        }
        let width = patches[0].len();
        if patches.iter().any(|p| p.len() != width) {
            return Err(malformed("patches differ in width".into()));
        }
        return Ok(RawImage { patches });
    }
    if let Some(body) = uri.strip_prefix("attr:") {
        let values = schema.parse_assignment(body).map_err(malformed)?;
        return Ok(schema.encode(&values));
    }
    Err(ImageError::UnsupportedScheme(uri.to_string()))
}
