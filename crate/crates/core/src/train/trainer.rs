use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::loss;
use super::optim::{Adam, AdamConfig};
use crate::data::{augment, derive_seed, stack, Sample};
use crate::error::{Error, Result};
use crate::net::{build_model, ForwardOptions, Model, ModelConfig};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Random flips and color jitter on every training draw.
    pub augment: bool,
    /// Save a checkpoint every this many epochs (0 disables intermediate saves).
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            epochs: 10,
            batch_size: 4,
            adam: AdamConfig::default(),
            seed: 0,
            augment: true,
            checkpoint_interval: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", a.lr)));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(a.eps > 0.0) {
            return Err(Error::Config("adam eps must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub iteration: u64,
    pub loss: f64,
}

impl LossRecord {
    /// `epoch<TAB>iteration<TAB>loss` with a round-trippable loss value.
    pub fn line(&self) -> String {
        format!("{}\t{}\t{:e}", self.epoch, self.iteration, self.loss)
    }
}

/// Serializable generator position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_word_pos(self.word_pos);
        r
    }
}

/// One forward, backward and Adam update on a batch. Returns the loss
/// measured before the update.
pub fn step(model: &mut Model, adam: &mut Adam, images: &Tensor, mask: &[u8]) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let x = g.constant(images.detached());
    let out = model.forward(&mut g, &bound, x, ForwardOptions::train())?;
    let l = loss(&mut g, out.logits, mask)?;
    let value = g.data(l)[0];
    g.backward(l)?;
    let mut grads = Vec::with_capacity(bound.vars().len());
    for (p, &v) in model.store().iter().zip(bound.vars()) {
        let grad = match g.grad(v) {
            Some(d) => d.to_vec(),
            None => vec![0.0; p.value.numel()],
        };
        if let Some(i) = grad.iter().position(|d| !d.is_finite()) {
            return Err(Error::Numeric(format!(
                "gradient of {} is {} at index {i} (loss {value})",
                p.name, grad[i]
            )));
        }
        grads.push(grad);
    }
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value} with finite gradients")));
    }
    adam.step(model.store_mut(), &grads)?;
    model.absorb_stats(&out.batch_stats);
    Ok(value)
}

/// Model, optimizer and data-order state of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub iteration: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = build_model(&config.model, config.seed)?;
        let adam = Adam::new(config.adam, model.store());
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));
        Ok(Trainer {
            config,
            model,
            adam,
            rng,
            epoch: 0,
            iteration: 0,
        })
    }

    /// Reassembles a trainer from checkpointed parts.
    pub fn from_parts(
        config: TrainConfig,
        model: Model,
        adam: Adam,
        rng: RngState,
        epoch: usize,
        iteration: u64,
    ) -> Result<Self> {
        config.validate()?;
        if model.config() != &config.model {
            return Err(Error::Config("model does not match the training config".into()));
        }
        Ok(Trainer {
            config,
            model,
            adam,
            rng: rng.restore(),
            epoch,
            iteration,
        })
    }

    pub fn rng_state(&self) -> RngState {
        RngState::of(&self.rng)
    }

    /// One pass over `data` in a seeded random order.
    pub fn train_epoch(&mut self, data: &[Sample]) -> Result<Vec<LossRecord>> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut log = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let owned: Vec<Sample> = if self.config.augment {
                chunk
                    .iter()
                    .map(|&i| augment(&data[i], self.rng.next_u64()))
                    .collect()
            } else {
                chunk.iter().map(|&i| data[i].clone()).collect()
            };
            let refs: Vec<&Sample> = owned.iter().collect();
            let (images, mask) = stack(&refs)?;
            let l = step(&mut self.model, &mut self.adam, &images, &mask)?;
            self.iteration += 1;
            log.push(LossRecord {
                epoch: self.epoch + 1,
                iteration: self.iteration,
                loss: l,
            });
        }
        self.epoch += 1;
        Ok(log)
    }

    /// Trains until `config.epochs` epochs are complete, calling `after_epoch`
    /// with each epoch's records.
    pub fn fit<F>(&mut self, data: &[Sample], mut after_epoch: F) -> Result<Vec<LossRecord>>
    where
        F: FnMut(&Trainer, &[LossRecord]) -> Result<()>,
    {
        let mut all = Vec::new();
        while self.epoch < self.config.epochs {
            let log = self.train_epoch(data)?;
            after_epoch(self, &log)?;
            all.extend(log);
        }
        Ok(all)
    }
}
