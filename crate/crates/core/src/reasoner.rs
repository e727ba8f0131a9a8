//! Toy editing-region reasoner: two 3x3 conv layers over the image with the
//! prompt's keyword embedding broadcast as extra input channels, trained
//! with per-pixel binary cross-entropy.
//!
//! The second layer is dilated by the scene's shape size so that a single
//! 3x3 kernel can look exactly one object-width sideways, which is what an
//! "add beside" region requires.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask, SoftMask};
use crate::nn::{relu_backward, relu_inplace, sigmoid, softplus, Conv2d, Tensor3};
use crate::plan::SubPrompt;
use crate::scene::{parse_request, Color, ShapeKind, SyntheticScene};
use crate::weights::{self, WeightHeader};

pub const EMBED_DIM: usize = 8;
pub const HIDDEN: usize = 8;
pub const IMAGE_CHANNELS: usize = 3;

pub fn scene_vocabulary() -> Vec<String> {
    let mut v: Vec<String> = ["recolor", "remove", "add"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    v.extend(Color::ALL.iter().map(|c| c.name().to_string()));
    v.extend(ShapeKind::ALL.iter().map(|k| k.name().to_string()));
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyReasonerModel {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    /// `vocab.len() x EMBED_DIM`, row-major.
    pub embedding: Vec<f64>,
    pub vocab: Vec<String>,
    pub seed: u64,
}

/// One supervised example: image, keyword rows, ground-truth mask.
#[derive(Debug, Clone)]
pub struct RegionExample {
    pub image: Image,
    pub keywords: Vec<usize>,
    pub target: Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub examples: usize,
    /// Mean training BCE after each epoch.
    pub loss_history: Vec<f64>,
    pub final_loss: f64,
}

struct Forward {
    input: Tensor3,
    prompt: Vec<f64>,
    pre1: Tensor3,
    act1: Tensor3,
    logits: Tensor3,
}

impl ToyReasonerModel {
    pub fn zeros(dilation: usize) -> Self {
        let vocab = scene_vocabulary();
        Self {
            conv1: Conv2d::zeros(IMAGE_CHANNELS + EMBED_DIM, HIDDEN, 1),
            conv2: Conv2d::zeros(HIDDEN, 1, dilation),
            embedding: vec![0.0; vocab.len() * EMBED_DIM],
            vocab,
            seed: 0,
        }
    }

    pub fn random(dilation: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Self::zeros(dilation);
        m.seed = seed;
        m.conv1 = Conv2d::random(IMAGE_CHANNELS + EMBED_DIM, HIDDEN, 1, 1.0, &mut rng);
        m.conv2 = Conv2d::random(HIDDEN, 1, dilation, 1.0, &mut rng);
        for e in &mut m.embedding {
            *e = rng.sample::<f64, _>(StandardNormal);
        }
        m
    }

    pub fn dilation(&self) -> usize {
        self.conv2.dilation
    }

    /// Maps the region-relevant keywords of a prompt to embedding rows.
    pub fn keywords(&self, prompt: &str) -> Result<Vec<usize>> {
        let request = parse_request(prompt)?;
        request
            .region_keywords()
            .into_iter()
            .map(|k| {
                self.vocab
                    .iter()
                    .position(|v| v == k)
                    .ok_or_else(|| Error::Vocabulary(k.to_string()))
            })
            .collect()
    }

    fn prompt_vector(&self, keywords: &[usize]) -> Vec<f64> {
        let mut e = vec![0.0; EMBED_DIM];
        for &k in keywords {
            for (d, v) in e
                .iter_mut()
                .zip(&self.embedding[k * EMBED_DIM..(k + 1) * EMBED_DIM])
            {
                *d += v;
            }
        }
        e
    }

    fn forward(&self, image: &Image, keywords: &[usize]) -> Forward {
        let input = Tensor3 {
            height: image.height(),
            width: image.width(),
            channels: image.channels(),
            data: image.data().to_vec(),
        };
        let prompt = self.prompt_vector(keywords);
        let pre1 = self.conv1.forward_with_constant(&input, &prompt);
        let mut act1 = pre1.clone();
        relu_inplace(&mut act1);
        let logits = self.conv2.forward(&act1);
        Forward {
            input,
            prompt,
            pre1,
            act1,
            logits,
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count() + self.conv2.param_count() + self.embedding.len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.conv1.write_params(&mut out);
        self.conv2.write_params(&mut out);
        out.extend_from_slice(&self.embedding);
        out
    }

    pub fn set_params(&mut self, src: &[f64]) {
        assert_eq!(src.len(), self.param_count());
        let mut at = self.conv1.read_params(src);
        at += self.conv2.read_params(&src[at..]);
        self.embedding.copy_from_slice(&src[at..]);
    }

    /// Mean per-pixel BCE and its gradient with respect to [`Self::params`].
    pub fn loss_and_grad(&self, example: &RegionExample) -> Result<(f64, Vec<f64>)> {
        check_example(example)?;
        let fwd = self.forward(&example.image, &example.keywords);
        let n = fwd.logits.data.len() as f64;
        let mut loss = 0.0;
        let mut dlogits = fwd.logits.clone();
        for ((g, &l), &y) in dlogits
            .data
            .iter_mut()
            .zip(&fwd.logits.data)
            .zip(example.target.data())
        {
            let y = f64::from(y);
            loss += softplus(l) - y * l;
            *g = (sigmoid(l) - y) / n;
        }
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::Training(format!("loss became {loss}")));
        }
        let (g2, dact1) = self.conv2.backward(&fwd.act1, &dlogits, true);
        let mut dpre1 = dact1.expect("requested input gradient");
        relu_backward(&fwd.pre1, &mut dpre1);
        let (g1, demb) = self
            .conv1
            .backward_with_constant(&fwd.input, &fwd.prompt, &dpre1);
        let mut grad = Vec::with_capacity(self.param_count());
        grad.extend_from_slice(&g1.weight);
        grad.extend_from_slice(&g1.bias);
        grad.extend_from_slice(&g2.weight);
        grad.extend_from_slice(&g2.bias);
        let mut gemb = vec![0.0; self.embedding.len()];
        for &k in &example.keywords {
            for (g, d) in gemb[k * EMBED_DIM..(k + 1) * EMBED_DIM]
                .iter_mut()
                .zip(&demb)
            {
                *g += d;
            }
        }
        grad.extend_from_slice(&gemb);
        Ok((loss, grad))
    }

    pub fn loss(&self, example: &RegionExample) -> Result<f64> {
        check_example(example)?;
        let fwd = self.forward(&example.image, &example.keywords);
        let n = fwd.logits.data.len() as f64;
        Ok(fwd
            .logits
            .data
            .iter()
            .zip(example.target.data())
            .map(|(&l, &y)| softplus(l) - f64::from(y) * l)
            .sum::<f64>()
            / n)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = WeightHeader {
            kind: "toy-reasoner".into(),
            layers: vec![
                (
                    "conv1".into(),
                    self.conv1.shape().to_vec(),
                    self.conv1.dilation,
                ),
                (
                    "conv2".into(),
                    self.conv2.shape().to_vec(),
                    self.conv2.dilation,
                ),
                ("embedding".into(), vec![self.vocab.len(), EMBED_DIM], 1),
            ],
            seed: self.seed,
            vocab: Some(self.vocab.clone()),
            schedule: None,
            extra: serde_json::Value::Null,
        };
        weights::write(path, &header, &self.params())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (header, values) = weights::read(path)?;
        if header.kind != "toy-reasoner" {
            return Err(Error::Schema(format!(
                "expected toy-reasoner weights, got `{}`",
                header.kind
            )));
        }
        let dilation = header
            .layers
            .iter()
            .find(|l| l.0 == "conv2")
            .map(|l| l.2)
            .ok_or_else(|| Error::Schema("missing conv2 layer".into()))?;
        let mut model = Self::zeros(dilation);
        if header.vocab.as_deref() != Some(model.vocab.as_slice()) {
            return Err(Error::Schema(
                "reasoner vocabulary does not match the scene vocabulary".into(),
            ));
        }
        if values.len() != model.param_count() {
            return Err(Error::Schema(format!(
                "expected {} weights, found {}",
                model.param_count(),
                values.len()
            )));
        }
        model.set_params(&values);
        model.seed = header.seed;
        Ok(model)
    }
}

fn check_example(example: &RegionExample) -> Result<()> {
    if example.image.channels() != IMAGE_CHANNELS {
        return Err(Error::shape("reasoner expects RGB images"));
    }
    if !example.image.same_size(&example.target) {
        return Err(Error::shape("image and target mask differ in size"));
    }
    Ok(())
}

pub fn predict_region(
    model: &ToyReasonerModel,
    image: &Image,
    sub_prompt: &SubPrompt,
) -> Result<SoftMask> {
    if image.channels() != IMAGE_CHANNELS {
        return Err(Error::shape("reasoner expects RGB images"));
    }
    let keywords = model.keywords(&sub_prompt.text)?;
    let fwd = model.forward(image, &keywords);
    SoftMask::new(
        image.height(),
        image.width(),
        fwd.logits.data.iter().map(|&l| sigmoid(l)).collect(),
    )
}

/// All (scene, request) pairs as supervised examples.
pub fn examples_from_scenes(
    model: &ToyReasonerModel,
    scenes: &[SyntheticScene],
) -> Result<Vec<RegionExample>> {
    let mut out = Vec::new();
    for scene in scenes {
        for req in &scene.requests {
            out.push(RegionExample {
                image: scene.image.clone(),
                keywords: model.keywords(&req.prompt)?,
                target: scene.region(&req.request)?,
            });
        }
    }
    Ok(out)
}

pub const MIN_TRAINING_SCENES: usize = 32;

/// Plain per-example gradient descent over every request of every scene,
/// visiting examples in a seeded shuffled order each epoch.
pub fn train_toy_reasoner(
    scenes: &[SyntheticScene],
    epochs: usize,
    lr: f64,
    seed: u64,
    mut progress: impl FnMut(usize, f64),
) -> Result<(ToyReasonerModel, TrainReport)> {
    if scenes.len() < MIN_TRAINING_SCENES {
        return Err(Error::validation(format!(
            "need at least {MIN_TRAINING_SCENES} training scenes, got {}",
            scenes.len()
        )));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::validation("learning rate must be positive"));
    }
    let dilation = scenes[0].config.shape_size;
    let mut model = ToyReasonerModel::random(dilation, seed);
    let examples = examples_from_scenes(&model, scenes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut params = model.params();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (loss, grad) = model.loss_and_grad(&examples[i])?;
            total += loss;
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= lr * g;
            }
            model.set_params(&params);
        }
        let mean = total / examples.len() as f64;
        if !mean.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Training(format!("epoch {epoch} loss is {mean}")));
        }
        history.push(mean);
        progress(epoch, mean);
    }
    let final_loss = examples
        .iter()
        .map(|e| model.loss(e))
        .sum::<Result<f64>>()?
        / examples.len() as f64;
    Ok((
        model,
        TrainReport {
            epochs,
            examples: examples.len(),
            loss_history: history,
            final_loss,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scenes, SceneConfig};

    #[test]
    fn zero_model_predicts_one_half() {
        let model = ToyReasonerModel::zeros(4);
        let scene = &generate_scenes(&SceneConfig::default(), 1, 0).unwrap()[0];
        let soft = predict_region(
            &model,
            &scene.image,
            &SubPrompt::new(1, &scene.requests[0].prompt),
        )
        .unwrap();
        assert!(soft.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn unknown_keyword_is_rejected() {
        let model = ToyReasonerModel::zeros(4);
        let img = Image::filled(16, 16, 3, 0.5).unwrap();
        let err =
            predict_region(&model, &img, &SubPrompt::new(1, "make the hexagon red")).unwrap_err();
        assert!(matches!(err, Error::Vocabulary(_)));
    }

    #[test]
    fn bce_is_nonnegative_and_vanishes_on_confident_truth() {
        let scene = &generate_scenes(&SceneConfig::default(), 1, 5).unwrap()[0];
        let model = ToyReasonerModel::random(4, 1);
        let ex = &examples_from_scenes(&model, std::slice::from_ref(scene)).unwrap()[0];
        assert!(model.loss(ex).unwrap() > 0.0);
        // Large logits that agree with the target drive the loss to ~0.
        let mut sure = ToyReasonerModel::zeros(4);
        sure.conv2.bias[0] = -40.0;
        let empty = RegionExample {
            image: ex.image.clone(),
            keywords: ex.keywords.clone(),
            target: Mask::empty(16, 16).unwrap(),
        };
        assert!(sure.loss(&empty).unwrap() < 1e-15);
        assert!(sure.loss(&empty).unwrap() >= 0.0);
    }

    #[test]
    fn too_few_scenes_is_a_validation_error() {
        let scenes = generate_scenes(&SceneConfig::default(), 3, 0).unwrap();
        assert!(matches!(
            train_toy_reasoner(&scenes, 1, 0.05, 7, |_, _| {}),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            train_toy_reasoner(&[], 1, 0.05, 7, |_, _| {}),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn exploding_learning_rate_reports_training_error() {
        let scenes = generate_scenes(&SceneConfig::default(), 32, 2).unwrap();
        let r = train_toy_reasoner(&scenes, 3, 1e200, 7, |_, _| {});
        assert!(matches!(r, Err(Error::Training(_))), "{r:?}");
    }

    #[test]
    fn weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.bin");
        let model = ToyReasonerModel::random(4, 9);
        model.save(&path).unwrap();
        assert_eq!(ToyReasonerModel::load(&path).unwrap(), model);
    }
}
