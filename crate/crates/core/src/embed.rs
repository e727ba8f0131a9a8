//! Deterministic desk-scale embedders standing in for CLIP/DINO towers and
//! the frozen text encoder, plus a remote-embedder plug-in.

use std::hash::Hasher;
use std::time::Duration;

use base64::Engine;
use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::scene::{tokenize, Color};

pub const EMBED_DIM: usize = 64;

pub trait ImageEmbedder: Send + Sync {
    /// Unit-norm embedding.
    fn embed(&self, image: &Image) -> Result<Vec<f64>>;
    fn tag(&self) -> String;
}

pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    /// Unit-norm embedding.
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
    fn tag(&self) -> String;
}

pub fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Numeric(
            "cannot normalize a zero or non-finite vector".into(),
        ));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// Cosine similarity in `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn gaussian_vector(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Hashed bag of unigrams and bigrams, each feature mapped to a seeded
/// Gaussian direction. Bigrams make it sensitive to token order.
#[derive(Debug, Clone)]
pub struct HashedTextEmbedder {
    dim: usize,
    seed: u64,
}

impl HashedTextEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0);
        Self { dim, seed }
    }

    fn feature_seed(&self, feature: &str) -> u64 {
        let mut h = FnvHasher::default();
        h.write(feature.as_bytes());
        h.finish() ^ self.seed.rotate_left(17)
    }
}

impl TextEmbedder for HashedTextEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::validation("cannot embed text without tokens"));
        }
        let mut acc = vec![0.0; self.dim];
        let mut add = |feature: &str| {
            for (a, g) in acc
                .iter_mut()
                .zip(gaussian_vector(self.feature_seed(feature), self.dim))
            {
                *a += g;
            }
        };
        for t in &tokens {
            add(t);
        }
        for pair in tokens.windows(2) {
            add(&format!("{} {}", pair[0], pair[1]));
        }
        normalize(acc)
    }

    fn tag(&self) -> String {
        format!("hashed-bow{}-seed{}", self.dim, self.seed)
    }
}

/// Box-averages an image onto a `side x side` grid (nearest cell when the
/// source is smaller than the grid). Single-channel images are replicated to RGB.
pub fn downsample(image: &Image, side: usize) -> Vec<f64> {
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let span = |i: usize, n: usize| {
        let lo = i * n / side;
        let hi = ((i + 1) * n / side).max(lo + 1);
        lo..hi
    };
    let mut out = Vec::with_capacity(side * side * 3);
    for i in 0..side {
        for j in 0..side {
            let mut sum = [0.0; 3];
            let mut count = 0.0;
            for r in span(i, h) {
                for c in span(j, w) {
                    let px = image.pixel(r, c);
                    for (k, s) in sum.iter_mut().enumerate() {
                        *s += px[if ch == 1 { 0 } else { k.min(ch - 1) }];
                    }
                    count += 1.0;
                }
            }
            out.extend(sum.iter().map(|s| s / count));
        }
    }
    out
}

/// Seeded Gaussian random projection of the mean-centered, downsampled image.
/// A constant bias feature keeps flat gray images away from the zero vector.
#[derive(Debug, Clone)]
pub struct RandomProjectionEmbedder {
    seed: u64,
    side: usize,
    matrix: Vec<f64>,
}

const PROJECTION_BIAS: f64 = 0.05;

impl RandomProjectionEmbedder {
    pub fn new(seed: u64) -> Self {
        Self::with_side(seed, 16)
    }

    pub fn with_side(seed: u64, side: usize) -> Self {
        let inputs = side * side * 3 + 1;
        Self {
            seed,
            side,
            matrix: gaussian_vector(seed, EMBED_DIM * inputs),
        }
    }
}

impl ImageEmbedder for RandomProjectionEmbedder {
    fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        let mut x: Vec<f64> = downsample(image, self.side)
            .into_iter()
            .map(|v| v - 0.5)
            .collect();
        x.push(PROJECTION_BIAS);
        let out = self
            .matrix
            .chunks_exact(x.len())
            .map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum())
            .collect();
        normalize(out)
    }

    fn tag(&self) -> String {
        format!("randproj-seed{}", self.seed)
    }
}

/// Embedder served over HTTP: `POST <url>` with `{"image": <base64 PNG>}`,
/// answered by `{"embedding": [..]}`.
#[derive(Debug, Clone)]
pub struct RemoteImageEmbedder {
    url: String,
    timeout: Duration,
}

impl RemoteImageEmbedder {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        Self {
            url: url.into(),
            timeout,
        }
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    embedding: Vec<f64>,
}

impl ImageEmbedder for RemoteImageEmbedder {
    fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        let png = crate::io::encode_png(image)?;
        let body =
            serde_json::json!({ "image": base64::engine::general_purpose::STANDARD.encode(png) });
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        let resp = agent
            .post(&self.url)
            .send_json(body)
            .map_err(|e| Error::Backend {
                attempts: 1,
                message: e.to_string(),
            })?;
        let parsed: EmbeddingResponse =
            resp.into_json().map_err(|e| Error::Schema(e.to_string()))?;
        normalize(parsed.embedding)
    }

    fn tag(&self) -> String {
        format!("remote:{}", self.url)
    }
}

/// Shared image/text space built from color statistics: a region's mean
/// color and a description's named colors both map through one isometry
/// into 64 dimensions.
#[derive(Debug, Clone)]
pub struct ColorJointSpace {
    seed: u64,
    /// Four orthonormal 64-dim columns, stored column by column.
    basis: Vec<f64>,
}

const NEUTRAL_COMPONENT: f64 = 0.25;

impl ColorJointSpace {
    pub fn new(seed: u64) -> Self {
        let mut cols: Vec<Vec<f64>> = Vec::new();
        let mut k = 0;
        while cols.len() < 4 {
            let mut v = gaussian_vector(seed.wrapping_add(k), EMBED_DIM);
            k += 1;
            for c in &cols {
                let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
            }
            if let Ok(v) = normalize(v) {
                cols.push(v);
            }
        }
        Self {
            seed,
            basis: cols.concat(),
        }
    }

    pub fn embed_color(&self, rgb: [f64; 3]) -> Result<Vec<f64>> {
        let coords = [rgb[0] - 0.5, rgb[1] - 0.5, rgb[2] - 0.5, NEUTRAL_COMPONENT];
        let mut out = vec![0.0; EMBED_DIM];
        for (col, &a) in self.basis.chunks_exact(EMBED_DIM).zip(&coords) {
            out.iter_mut().zip(col).for_each(|(o, c)| *o += a * c);
        }
        normalize(out)
    }

    /// Mean color of the masked region (the whole image when `mask` is
    /// `None` or empty).
    pub fn embed_region(&self, image: &Image, mask: Option<&Mask>) -> Result<Vec<f64>> {
        let mean = image
            .region_mean(mask)
            .or_else(|| image.region_mean(None))
            .expect("images are nonempty");
        let rgb = match mean.len() {
            1 => [mean[0]; 3],
            _ => [mean[0], mean[1], mean[2.min(mean.len() - 1)]],
        };
        self.embed_color(rgb)
    }

    /// Mean of the colors named in the text; neutral gray when none are named.
    pub fn embed_description(&self, text: &str) -> Result<Vec<f64>> {
        let colors: Vec<[f64; 3]> = tokenize(text)
            .iter()
            .filter_map(|t| Color::from_word(t))
            .map(Color::rgb)
            .collect();
        let rgb = if colors.is_empty() {
            [0.5; 3]
        } else {
            let n = colors.len() as f64;
            let mut s = [0.0; 3];
            for c in &colors {
                for k in 0..3 {
                    s[k] += c[k] / n;
                }
            }
            s
        };
        self.embed_color(rgb)
    }

    pub fn tag(&self) -> String {
        format!("color-joint-seed{}", self.seed)
    }
}
