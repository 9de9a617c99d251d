use std::any::Any;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{AdamState, ClassContext, FunctionClass, MinibatchSettings, RegressionSet, Sample, StepModel};
use crate::envs::Observation;
use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Width of the softmax state representation.
pub const LATENT_WIDTH: usize = 3;

/// `q(x, a) = <decoder, softmax(encoder x) (x) e_a>`.
///
/// Parameters are flattened encoder-first: `encoder[i * D + j]`, then
/// `decoder[i * A + a]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LockNet {
    pub obs_dim: usize,
    pub n_actions: usize,
    pub encoder: Vec<f64>,
    pub decoder: Vec<f64>,
}

impl LockNet {
    pub fn zeros(obs_dim: usize, n_actions: usize) -> Self {
        Self {
            obs_dim,
            n_actions,
            encoder: vec![0.0; LATENT_WIDTH * obs_dim],
            decoder: vec![0.0; LATENT_WIDTH * n_actions],
        }
    }

    /// Entries iid uniform in `[-1/sqrt(D), 1/sqrt(D)]`.
    pub fn random<R: Rng + ?Sized>(obs_dim: usize, n_actions: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (obs_dim as f64).sqrt();
        let mut net = Self::zeros(obs_dim, n_actions);
        for w in net.encoder.iter_mut().chain(net.decoder.iter_mut()) {
            *w = rng.random_range(-bound..=bound);
        }
        net
    }

    pub fn n_params(&self) -> usize {
        self.encoder.len() + self.decoder.len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.encoder.clone();
        p.extend_from_slice(&self.decoder);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let (e, d) = p.split_at(self.encoder.len());
        self.encoder.copy_from_slice(e);
        self.decoder.copy_from_slice(d);
    }

    /// Softmax state representation of `obs`.
    pub fn encode(&self, obs: &[f64]) -> [f64; LATENT_WIDTH] {
        debug_assert_eq!(obs.len(), self.obs_dim);
        let mut z = [0.0; LATENT_WIDTH];
        for (i, zi) in z.iter_mut().enumerate() {
            let row = &self.encoder[i * self.obs_dim..(i + 1) * self.obs_dim];
            *zi = row.iter().zip(obs).map(|(w, x)| w * x).sum();
        }
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for zi in z.iter_mut() {
            *zi = (*zi - m).exp();
            total += *zi;
        }
        z.map(|e| e / total)
    }

    pub fn q_all(&self, obs: &[f64], out: &mut [f64]) {
        let p = self.encode(obs);
        let na = self.n_actions;
        for (a, q) in out.iter_mut().enumerate() {
            *q = (0..LATENT_WIDTH).map(|i| p[i] * self.decoder[i * na + a]).sum();
        }
    }

    /// Adds the gradient of `(1/B) sum (q - y)^2` over `batch` into `grad`
    /// (length `n_params`); returns the mean loss.
    fn accumulate_grad<'b>(
        &self,
        batch: impl ExactSizeIterator<Item = (&'b [f64], usize, f64)>,
        grad: &mut [f64],
    ) -> f64 {
        let n = batch.len() as f64;
        let (d, na) = (self.obs_dim, self.n_actions);
        let (g_enc, g_dec) = grad.split_at_mut(self.encoder.len());
        let mut loss = 0.0;
        for (x, a, y) in batch {
            let p = self.encode(x);
            let q: f64 = (0..LATENT_WIDTH).map(|i| p[i] * self.decoder[i * na + a]).sum();
            let r = q - y;
            loss += r * r;
            let delta = 2.0 * r / n;
            for i in 0..LATENT_WIDTH {
                let v = self.decoder[i * na + a];
                g_dec[i * na + a] += delta * p[i];
                let dz = delta * p[i] * (v - q);
                if dz != 0.0 {
                    g_enc[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(x)
                        .for_each(|(g, xj)| *g += dz * xj);
                }
            }
        }
        loss / n
    }

    pub fn to_json(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("net serializes");
        v["kind"] = Value::from("locknet");
        v
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let net: LockNet = serde_json::from_value(v.clone())?;
        if net.encoder.len() != LATENT_WIDTH * net.obs_dim || net.decoder.len() != LATENT_WIDTH * net.n_actions {
            return Err(Error::InvalidArgument("locknet checkpoint has inconsistent shapes".into()));
        }
        Ok(net)
    }
}

pub fn locknet_forward(net: &LockNet, obs: &[f64], a: usize) -> f64 {
    let p = net.encode(obs);
    (0..LATENT_WIDTH).map(|i| p[i] * net.decoder[i * net.n_actions + a]).sum()
}

/// Gradient of the mean squared error over `(obs, action, target)` triples,
/// in the flattened parameter order of [`LockNet::params`].
pub fn locknet_grad(net: &LockNet, batch: &[(&[f64], usize, f64)]) -> Vec<f64> {
    assert!(!batch.is_empty(), "gradient needs a nonempty minibatch");
    let mut g = vec![0.0; net.n_params()];
    net.accumulate_grad(batch.iter().copied(), &mut g);
    g
}

/// Encoder of the current-iteration step-`h` net, decoder of the
/// previous-iteration step-`(h - 1)` net.
pub fn warm_start(current_next: &LockNet, previous_same: &LockNet) -> LockNet {
    LockNet {
        obs_dim: current_next.obs_dim,
        n_actions: previous_same.n_actions,
        encoder: current_next.encoder.clone(),
        decoder: previous_same.decoder.clone(),
    }
}

fn obs_vector<'a>(obs: &'a Observation) -> &'a [f64] {
    obs.vector().expect("locknet needs vector observations")
}

#[derive(Clone, Debug)]
pub struct LockNetStep {
    pub net: LockNet,
    pub settings: MinibatchSettings,
    pub warm_start: bool,
    adam: AdamState,
    grad: Vec<f64>,
}

impl LockNetStep {
    pub fn new(net: LockNet, settings: MinibatchSettings, warm_start: bool) -> Self {
        let n = net.n_params();
        Self {
            net,
            settings,
            warm_start,
            adam: AdamState::new(n, settings.lr),
            grad: vec![0.0; n],
        }
    }

    fn adam_step(&mut self, batch: &[(&[f64], usize, f64)], lr: f64) -> f64 {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
        let loss = self.net.accumulate_grad(batch.iter().copied(), &mut self.grad);
        let mut p = self.net.params();
        self.adam.lr = lr;
        self.adam.step(&mut p, &self.grad);
        self.net.set_params(&p);
        loss
    }
}

impl StepModel for LockNetStep {
    fn kind(&self) -> &'static str {
        "locknet"
    }

    fn n_actions(&self) -> usize {
        self.net.n_actions
    }

    fn q_values(&self, obs: &Observation, out: &mut [f64]) {
        self.net.q_all(obs_vector(obs), out);
    }

    /// `n_updates` Adam steps on minibatches drawn uniformly from the
    /// union of offline and online examples. Moments restart each fit.
    fn fit(&mut self, data: &RegressionSet<'_>, rng: &mut SimRng) -> Result<()> {
        if data.is_empty() {
            return Ok(());
        }
        self.adam.reset();
        let mut batch: Vec<(&[f64], usize, f64)> = Vec::with_capacity(self.settings.batch_size);
        for _ in 0..self.settings.n_updates {
            batch.clear();
            for _ in 0..self.settings.batch_size {
                let x = data.draw(rng);
                batch.push((obs_vector(x.obs), x.action, x.target));
            }
            self.adam_step(&batch, self.settings.lr);
        }
        Ok(())
    }

    fn gradient_step(&mut self, batch: &[Sample<'_>], lr: f64) {
        if batch.is_empty() {
            return;
        }
        let b: Vec<(&[f64], usize, f64)> = batch.iter().map(|x| (obs_vector(x.obs), x.action, x.target)).collect();
        self.adam_step(&b, lr);
    }

    fn warm_start_from(&mut self, next: &dyn StepModel) {
        if !self.warm_start {
            return;
        }
        if let Some(donor) = next.as_any().downcast_ref::<LockNetStep>() {
            // own decoder is still the previous iteration's
            self.net = warm_start(&donor.net, &self.net);
        }
    }

    fn clone_box(&self) -> Box<dyn StepModel> {
        Box::new(self.clone())
    }

    fn checkpoint(&self) -> Value {
        self.net.to_json()
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LockNetParams {
    pub lr: f64,
    pub n_updates: usize,
    pub batch_size: usize,
    pub warm_start: bool,
}

impl Default for LockNetParams {
    fn default() -> Self {
        let s = MinibatchSettings::default();
        Self {
            lr: s.lr,
            n_updates: s.n_updates,
            batch_size: s.batch_size,
            warm_start: true,
        }
    }
}

pub struct LockNetClass {
    obs_dim: usize,
    n_actions: usize,
    settings: MinibatchSettings,
    warm_start: bool,
}

impl LockNetClass {
    pub fn new(ctx: &ClassContext, p: LockNetParams) -> Result<Self> {
        let obs_dim = ctx
            .obs_dim
            .ok_or_else(|| Error::config("function_class", "locknet needs vector observations"))?;
        if p.batch_size == 0 || !(p.lr > 0.0) {
            return Err(Error::config("function_class.locknet", "batch_size and lr must be positive"));
        }
        Ok(Self {
            obs_dim,
            n_actions: ctx.n_actions,
            settings: MinibatchSettings {
                lr: p.lr,
                n_updates: p.n_updates,
                batch_size: p.batch_size,
            },
            warm_start: p.warm_start,
        })
    }
}

impl FunctionClass for LockNetClass {
    fn name(&self) -> &'static str {
        "locknet"
    }

    fn build(&self, _h: usize, rng: &mut SimRng) -> Result<Box<dyn StepModel>> {
        let net = LockNet::random(self.obs_dim, self.n_actions, rng);
        Ok(Box::new(LockNetStep::new(net, self.settings, self.warm_start)))
    }

    fn is_exact(&self) -> bool {
        false
    }
}
