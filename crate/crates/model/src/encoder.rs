//! Image and text encoders behind a backend contract, plus the toy backend.

use candle_core::{Tensor, D};
use cirlab_core::image::RawImage;
use cirlab_core::{fnv1a64, Tokenizer, WordPunctTokenizer};
use serde::{Deserialize, Serialize};

use crate::nn::{apply_linear, create_linear, masked_mean, Result};
use crate::params::{Decay, Init, ParamStore};
use crate::ModelError;

/// Declared encoder dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderDims {
    /// Visual tokens per image.
    pub channels: usize,
    /// Width of a raw input patch.
    pub patch_width: usize,
    pub image_dim: usize,
    /// Text sequence length after padding or truncation.
    pub seq_len: usize,
    pub text_dim: usize,
    /// Hashed vocabulary size; index 0 is padding.
    pub vocab: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            channels: 4,
            patch_width: 19,
            image_dim: 32,
            seq_len: 16,
            text_dim: 32,
            vocab: 2048,
        }
    }
}

/// Encoded text: per-token features, padding mask and a summary token.
#[derive(Debug, Clone)]
pub struct TextFeatures {
    /// `[N, S, D_T]`, zero at padded positions.
    pub tokens: Tensor,
    /// `[N, S]`, 1 for real tokens.
    pub mask: Tensor,
    /// `[N, D_T]`.
    pub summary: Tensor,
}

pub trait EncoderBackend: Send + Sync {
    fn dims(&self) -> EncoderDims;

    /// `[N, C, D_I]` visual features.
    fn encode_images(&self, store: &ParamStore, images: &[&RawImage]) -> Result<Tensor>;

    fn encode_texts(&self, store: &ParamStore, texts: &[&str]) -> Result<TextFeatures>;
}

/// Learnable toy encoders.
///
/// Images: each patch goes through a shared linear map, plus a learned
/// per-position embedding. Texts: hashed word embeddings plus position
/// embeddings; the summary token is `tanh(W · mean(valid rows) + b)`.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    dims: EncoderDims,
    trainable: bool,
}

impl ToyEncoder {
    pub fn new(store: &mut ParamStore, dims: EncoderDims, trainable: bool) -> Result<Self> {
        create_linear(store, "enc.image.proj", dims.patch_width, dims.image_dim)?;
        store.create("enc.image.pos", &[dims.channels, dims.image_dim], Init::Uniform(0.1), Decay::No)?;
        let emb_bound = (3.0 / dims.text_dim as f64).sqrt();
        store.create("enc.text.embed", &[dims.vocab, dims.text_dim], Init::Uniform(emb_bound), Decay::Yes)?;
        store.create("enc.text.pos", &[dims.seq_len, dims.text_dim], Init::Uniform(0.1), Decay::No)?;
        create_linear(store, "enc.text.summary", dims.text_dim, dims.text_dim)?;
        Ok(Self { dims, trainable })
    }

    /// Hashed word ids, truncated to the sequence length. Never contains 0.
    pub fn token_ids(&self, text: &str) -> Vec<u32> {
        WordPunctTokenizer
            .tokenize(&text.to_lowercase())
            .iter()
            .take(self.dims.seq_len)
            .map(|w| 1 + (fnv1a64(w.as_bytes()) % (self.dims.vocab as u64 - 1)) as u32)
            .collect()
    }

    fn finish(&self, t: Tensor) -> Tensor {
        if self.trainable {
            t
        } else {
            t.detach()
        }
    }
}

impl EncoderBackend for ToyEncoder {
    fn dims(&self) -> EncoderDims {
        self.dims
    }

    fn encode_images(&self, store: &ParamStore, images: &[&RawImage]) -> Result<Tensor> {
        let (c, w) = (self.dims.channels, self.dims.patch_width);
        let mut flat = Vec::with_capacity(images.len() * c * w);
        for img in images {
            if img.channels() != c || img.width() != w {
                return Err(ModelError::Shape(format!(
                    "image has {}x{} patches, encoder expects {c}x{w}",
                    img.channels(),
                    img.width()
                )));
            }
            for p in &img.patches {
                flat.extend_from_slice(p);
            }
        }
        let x = Tensor::from_vec(flat, (images.len(), c, w), store.device())?;
        let y = apply_linear(store, "enc.image.proj", &x)?.broadcast_add(store.get("enc.image.pos")?)?;
        Ok(self.finish(y))
    }

    fn encode_texts(&self, store: &ParamStore, texts: &[&str]) -> Result<TextFeatures> {
        let (n, s, d) = (texts.len(), self.dims.seq_len, self.dims.text_dim);
        let mut ids = vec![0u32; n * s];
        let mut mask = vec![0.0f64; n * s];
        for (i, t) in texts.iter().enumerate() {
            for (j, id) in self.token_ids(t).into_iter().enumerate() {
                ids[i * s + j] = id;
                mask[i * s + j] = 1.0;
            }
        }
        let dev = store.device();
        let ids = Tensor::from_vec(ids, n * s, dev)?;
        let mask = Tensor::from_vec(mask, (n, s), dev)?;
        let emb = store.get("enc.text.embed")?.index_select(&ids, 0)?.reshape((n, s, d))?;
        let tokens = emb
            .broadcast_add(store.get("enc.text.pos")?)?
            .broadcast_mul(&mask.unsqueeze(D::Minus1)?)?;
        let pooled = masked_mean(&tokens, &mask)?;
        let summary = apply_linear(store, "enc.text.summary", &pooled)?.tanh()?;
        Ok(TextFeatures {
            tokens: self.finish(tokens),
            mask,
            summary: self.finish(summary),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(seed: u64) -> (ParamStore, ToyEncoder) {
        let mut store = ParamStore::new(seed);
        let dims = EncoderDims {
            channels: 4,
            patch_width: 3,
            image_dim: 8,
            seq_len: 16,
            text_dim: 8,
            vocab: 64,
        };
        let enc = ToyEncoder::new(&mut store, dims, true).unwrap();
        (store, enc)
    }

    fn image() -> RawImage {
        RawImage {
            patches: vec![vec![1.0, 0.0, 0.5]; 4],
        }
    }

    #[test]
    fn image_shape_and_determinism() {
        let (store, enc) = toy(1);
        let img = image();
        let a = enc.encode_images(&store, &[&img]).unwrap();
        assert_eq!(a.dims(), &[1, 4, 8]);
        let b = enc.encode_images(&store, &[&img]).unwrap();
        assert_eq!(a.to_vec3::<f64>().unwrap(), b.to_vec3::<f64>().unwrap());
        let (store2, enc2) = toy(1);
        let c = enc2.encode_images(&store2, &[&img]).unwrap();
        assert_eq!(a.to_vec3::<f64>().unwrap(), c.to_vec3::<f64>().unwrap());
        let wrong = RawImage {
            patches: vec![vec![1.0; 5]; 4],
        };
        assert!(enc.encode_images(&store, &[&wrong]).is_err());
    }

    #[test]
    fn text_shape_mask_and_padding() {
        let (store, enc) = toy(2);
        let f = enc.encode_texts(&store, &["make the object blue.", "."]).unwrap();
        assert_eq!(f.tokens.dims(), &[2, 16, 8]);
        let mask = f.mask.to_vec2::<f64>().unwrap();
        assert_eq!(mask[0].iter().sum::<f64>(), 5.0);
        // "." is one punctuation token
        assert_eq!(mask[1].iter().sum::<f64>(), 1.0);
        let empty = enc.encode_texts(&store, &[""]).unwrap();
        assert_eq!(empty.mask.to_vec2::<f64>().unwrap()[0].iter().sum::<f64>(), 0.0);
        let rows = empty.tokens.to_vec3::<f64>().unwrap();
        assert!(rows[0].iter().flatten().all(|x| *x == 0.0));
        let (store2, enc2) = toy(2);
        let g = enc2.encode_texts(&store2, &["make the object blue.", "."]).unwrap();
        assert_eq!(f.summary.to_vec2::<f64>().unwrap(), g.summary.to_vec2::<f64>().unwrap());
    }

    #[test]
    fn long_texts_truncate() {
        let (_, enc) = toy(0);
        let long = "word ".repeat(40);
        assert_eq!(enc.token_ids(&long).len(), 16);
        assert!(enc.token_ids("a b c").iter().all(|id| *id > 0 && *id < 64));
    }
}
