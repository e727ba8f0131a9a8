//! Tiny trainable ε-network. The first convolution sees the noisy latent
//! stacked with the foreground and background latents, plus broadcast time
//! and text embedding channels; absent conditions are zero tensors.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    forward_noise, gaussian_latent, sample_dropout, ConditionSet, Denoiser, DiffusionSchedule,
    DropoutPolicy,
};
use crate::error::{Error, Result};
use crate::image::Latent;
use crate::nn::{relu_backward, relu_inplace, Conv2d, Tensor3};
use crate::weights::{self, WeightHeader};

pub const TIME_DIM: usize = 8;
pub const TEXT_DIM: usize = 8;
pub const WIDTH: usize = 16;

/// Sinusoidal embedding of the integer timestep.
pub fn time_embedding(t: usize) -> [f64; TIME_DIM] {
    let mut out = [0.0; TIME_DIM];
    let half = TIME_DIM / 2;
    for i in 0..half {
        let freq = 10_000f64.powf(-(i as f64) / half as f64);
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyDenoiser {
    pub latent_channels: usize,
    pub conv_in: Conv2d,
    pub conv_mid: Conv2d,
    pub conv_out: Conv2d,
    pub seed: u64,
}

struct Forward {
    input: Tensor3,
    constant: Vec<f64>,
    pre1: Tensor3,
    act1: Tensor3,
    pre2: Tensor3,
    act2: Tensor3,
    out: Tensor3,
}

fn latent_tensor(l: &Latent) -> Tensor3 {
    Tensor3 {
        height: l.height(),
        width: l.width(),
        channels: l.channels(),
        data: l.data().to_vec(),
    }
}

impl TinyDenoiser {
    pub fn input_channels(latent_channels: usize) -> usize {
        3 * latent_channels + TIME_DIM + TEXT_DIM
    }

    pub fn zeros(latent_channels: usize) -> Self {
        Self {
            latent_channels,
            conv_in: Conv2d::zeros(Self::input_channels(latent_channels), WIDTH, 1),
            conv_mid: Conv2d::zeros(WIDTH, WIDTH, 1),
            conv_out: Conv2d::zeros(WIDTH, latent_channels, 1),
            seed: 0,
        }
    }

    pub fn random(latent_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            latent_channels,
            conv_in: Conv2d::random(
                Self::input_channels(latent_channels),
                WIDTH,
                1,
                1.0,
                &mut rng,
            ),
            conv_mid: Conv2d::random(WIDTH, WIDTH, 1, 1.0, &mut rng),
            conv_out: Conv2d::random(WIDTH, latent_channels, 1, 0.5, &mut rng),
            seed,
        }
    }

    fn layers(&self) -> [&Conv2d; 3] {
        [&self.conv_in, &self.conv_mid, &self.conv_out]
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.layers() {
            l.write_params(&mut out);
        }
        out
    }

    pub fn set_params(&mut self, src: &[f64]) {
        assert_eq!(src.len(), self.param_count());
        let mut at = self.conv_in.read_params(src);
        at += self.conv_mid.read_params(&src[at..]);
        self.conv_out.read_params(&src[at..]);
    }

    fn assemble(&self, z_t: &Latent, t: usize, cond: &ConditionSet) -> Result<(Tensor3, Vec<f64>)> {
        cond.presence()?;
        if z_t.channels() != self.latent_channels {
            return Err(Error::shape(format!(
                "denoiser expects {} latent channels, got {}",
                self.latent_channels,
                z_t.channels()
            )));
        }
        let (h, w) = (z_t.height(), z_t.width());
        let zero = Latent::zeros(h, w, self.latent_channels);
        let fg = cond.fg.as_ref().unwrap_or(&zero);
        let bg = cond.bg.as_ref().unwrap_or(&zero);
        z_t.ensure_same_shape(fg, "foreground condition")?;
        z_t.ensure_same_shape(bg, "background condition")?;
        let text = match &cond.text {
            Some(v) if v.len() != TEXT_DIM => {
                return Err(Error::shape(format!(
                    "text embedding must have {TEXT_DIM} dims, got {}",
                    v.len()
                )))
            }
            Some(v) => v.clone(),
            None => vec![0.0; TEXT_DIM],
        };
        let mut constant = time_embedding(t).to_vec();
        constant.extend_from_slice(&text);
        let spatial = Tensor3::concat_channels(&[
            &latent_tensor(z_t),
            &latent_tensor(fg),
            &latent_tensor(bg),
        ]);
        Ok((spatial, constant))
    }

    fn forward(&self, (input, constant): (Tensor3, Vec<f64>)) -> Forward {
        let pre1 = self.conv_in.forward_with_constant(&input, &constant);
        let mut act1 = pre1.clone();
        relu_inplace(&mut act1);
        let pre2 = self.conv_mid.forward(&act1);
        let mut act2 = pre2.clone();
        relu_inplace(&mut act2);
        let out = self.conv_out.forward(&act2);
        Forward {
            input,
            constant,
            pre1,
            act1,
            pre2,
            act2,
            out,
        }
    }

    /// Mean squared error between `eps` and the prediction on
    /// `forward_noise(z0, t, eps)`, and its gradient with respect to
    /// [`Self::params`].
    pub fn training_loss(
        &self,
        z0: &Latent,
        cond: &ConditionSet,
        t: usize,
        eps: &Latent,
        sched: &DiffusionSchedule,
    ) -> Result<(f64, Vec<f64>)> {
        let z_t = forward_noise(z0, t, eps, sched)?;
        let fwd = self.forward(self.assemble(&z_t, t, cond)?);
        let n = eps.len() as f64;
        let mut loss = 0.0;
        let mut dout = fwd.out.clone();
        for ((g, &p), &e) in dout.data.iter_mut().zip(&fwd.out.data).zip(eps.data()) {
            let r = p - e;
            loss += r * r;
            *g = 2.0 * r / n;
        }
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("denoiser loss is {loss}")));
        }
        let (g3, dact2) = self.conv_out.backward(&fwd.act2, &dout, true);
        let mut dpre2 = dact2.expect("requested input gradient");
        relu_backward(&fwd.pre2, &mut dpre2);
        let (g2, dact1) = self.conv_mid.backward(&fwd.act1, &dpre2, true);
        let mut dpre1 = dact1.expect("requested input gradient");
        relu_backward(&fwd.pre1, &mut dpre1);
        let (g1, _) = self
            .conv_in
            .backward_with_constant(&fwd.input, &fwd.constant, &dpre1);
        let mut grad = Vec::with_capacity(self.param_count());
        for g in [g1, g2, g3] {
            grad.extend_from_slice(&g.weight);
            grad.extend_from_slice(&g.bias);
        }
        Ok((loss, grad))
    }

    pub fn save(&self, path: impl AsRef<Path>, sched: &DiffusionSchedule) -> Result<()> {
        let header = WeightHeader {
            kind: "tiny-denoiser".into(),
            layers: vec![
                ("conv_in".into(), self.conv_in.shape().to_vec(), 1),
                ("conv_mid".into(), self.conv_mid.shape().to_vec(), 1),
                ("conv_out".into(), self.conv_out.shape().to_vec(), 1),
            ],
            seed: self.seed,
            vocab: None,
            schedule: Some(sched.params()),
            extra: serde_json::json!({ "latent_channels": self.latent_channels }),
        };
        weights::write(path, &header, &self.params())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, DiffusionSchedule)> {
        let (header, values) = weights::read(path)?;
        if header.kind != "tiny-denoiser" {
            return Err(Error::Schema(format!(
                "expected tiny-denoiser weights, got `{}`",
                header.kind
            )));
        }
        let channels = header
            .extra
            .get("latent_channels")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Schema("missing latent_channels".into()))?
            as usize;
        let sched = DiffusionSchedule::from_params(
            header
                .schedule
                .ok_or_else(|| Error::Schema("denoiser weights carry no schedule".into()))?,
        )?;
        let mut model = Self::zeros(channels);
        if values.len() != model.param_count() {
            return Err(Error::Schema(format!(
                "expected {} weights, found {}",
                model.param_count(),
                values.len()
            )));
        }
        model.set_params(&values);
        model.seed = header.seed;
        Ok((model, sched))
    }
}

impl Denoiser for TinyDenoiser {
    fn predict_noise(&self, z_t: &Latent, t: usize, cond: &ConditionSet) -> Result<Latent> {
        let fwd = self.forward(self.assemble(z_t, t, cond)?);
        Latent::new(z_t.height(), z_t.width(), z_t.channels(), fwd.out.data)
            .map_err(|_| Error::Numeric("denoiser produced non-finite output".into()))
    }
}

/// One training pair: clean target latent and its full condition set.
#[derive(Debug, Clone)]
pub struct DenoiserExample {
    pub z0: Latent,
    pub cond: ConditionSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserReport {
    pub epochs: usize,
    pub examples: usize,
    pub loss_history: Vec<f64>,
}

/// Per-example gradient descent with random timesteps, fresh noise and the
/// condition dropout policy applied to every visit.
pub fn train_denoiser(
    examples: &[DenoiserExample],
    epochs: usize,
    lr: f64,
    seed: u64,
    policy: &DropoutPolicy,
    sched: &DiffusionSchedule,
    mut progress: impl FnMut(usize, f64),
) -> Result<(TinyDenoiser, DenoiserReport)> {
    let first = examples
        .first()
        .ok_or_else(|| Error::validation("denoiser training needs at least one example"))?;
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::validation("learning rate must be positive"));
    }
    policy.validate()?;
    let mut model = TinyDenoiser::random(first.z0.channels(), seed);
    let mut params = model.params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1ff);
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut total = 0.0;
        for ex in examples {
            let t = rng.gen_range(1..=sched.train_steps());
            let eps = gaussian_latent(ex.z0.height(), ex.z0.width(), ex.z0.channels(), &mut rng);
            let cond = ex.cond.restrict(sample_dropout(policy, rng.gen::<f64>()))?;
            let (loss, grad) = model.training_loss(&ex.z0, &cond, t, &eps, sched)?;
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
    Ok((
        model,
        DenoiserReport {
            epochs,
            examples: examples.len(),
            loss_history: history,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(seed: u64) -> (TinyDenoiser, Latent, ConditionSet, Latent) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = TinyDenoiser::random(3, seed);
        let z0 = gaussian_latent(5, 4, 3, &mut rng);
        let fg = gaussian_latent(5, 4, 3, &mut rng);
        let bg = gaussian_latent(5, 4, 3, &mut rng);
        let text = (0..TEXT_DIM).map(|i| (i as f64 * 0.3).sin()).collect();
        let eps = gaussian_latent(5, 4, 3, &mut rng);
        (model, z0, ConditionSet::full(fg, bg, text), eps)
    }

    #[test]
    fn zero_model_with_zero_noise_has_zero_loss() {
        let (_, z0, cond, _) = setup(1);
        let sched = DiffusionSchedule::default();
        let (loss, grad) = TinyDenoiser::zeros(3)
            .training_loss(&z0, &cond, 10, &Latent::zeros(5, 4, 3), &sched)
            .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn input_channel_count() {
        assert_eq!(
            TinyDenoiser::zeros(3).conv_in.in_channels,
            9 + TIME_DIM + TEXT_DIM
        );
    }

    #[test]
    fn rejects_wrong_text_dim() {
        let (model, z0, mut cond, _) = setup(2);
        cond.text = Some(vec![1.0; 3]);
        assert!(model.predict_noise(&z0, 3, &cond).is_err());
    }

    #[test]
    fn short_training_reduces_loss() {
        let (_, z0, cond, _) = setup(3);
        let sched = DiffusionSchedule::default();
        let ex = vec![DenoiserExample { z0, cond }; 4];
        let (_, report) = train_denoiser(
            &ex,
            30,
            0.01,
            5,
            &DropoutPolicy::default(),
            &sched,
            |_, _| {},
        )
        .unwrap();
        let h = &report.loss_history;
        let head: f64 = h[..5].iter().sum();
        let tail: f64 = h[h.len() - 5..].iter().sum();
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn weights_round_trip() {
        let (model, ..) = setup(4);
        let sched = DiffusionSchedule::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        model.save(&path, &sched).unwrap();
        let (back, s) = TinyDenoiser::load(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(s, sched);
    }
}
