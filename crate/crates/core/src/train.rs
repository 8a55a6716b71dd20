//! Joint training of the segmentor and knowledge learner with batches drawn
//! deterministically from `(seed, step)`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::ckler::translation_loss;
use crate::config::{Mode, RunConfig};
use crate::error::{Error, Result};
use crate::losses::total_seg_loss;
use crate::model::Model;
use crate::nn::Ctx;
use crate::optim::Adam;
use crate::synth::{stack, Dataset, SyntheticSample};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub lr: f64,
    /// Segmentation loss.
    pub l_s: f64,
    /// Translation loss, when the knowledge learner is trained.
    pub l_l: Option<f64>,
    /// Objective actually minimized.
    pub l_t: f64,
}

/// Model, optimizer and step counter; everything a resumed run needs.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: RunConfig,
    pub model: Model,
    pub adam: Adam,
    pub step: usize,
}

#[derive(Clone, Copy, Debug)]
enum Stream {
    Cos = 0,
    Translation = 1,
}

/// Indices of the batch used at `step`; a pure function of its arguments.
pub fn batch_indices(seed: u64, step: usize, stream: usize, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(stream as u64 + 1);
    let mut idx = sample(&mut rng, n, batch.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// Stacked rgb, aux, mask and edge tensors of a batch.
pub struct Batch {
    pub rgb: Tensor,
    pub aux: Tensor,
    pub mask: Tensor,
    pub edge: Tensor,
}

impl Batch {
    pub fn gather(samples: &[SyntheticSample], idx: &[usize]) -> Result<Self> {
        let pick = |f: fn(&SyntheticSample) -> &Tensor| -> Result<Tensor> {
            stack(&idx.iter().map(|&i| f(&samples[i])).collect::<Vec<_>>())
        };
        Ok(Self {
            rgb: pick(|s| &s.rgb)?,
            aux: pick(|s| &s.aux)?,
            mask: pick(|s| &s.mask)?,
            edge: pick(|s| &s.edge)?,
        })
    }
}

impl TrainState {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model, config.seed)?;
        let adam = Adam::new(&model.store);
        Ok(Self {
            config: config.clone(),
            model,
            adam,
            step: 0,
        })
    }

    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let model = ckpt.model()?;
        let adam = ckpt
            .adam(&model)?
            .ok_or_else(|| Error::Config("checkpoint has no optimizer state to resume from".into()))?;
        Ok(Self {
            config: ckpt.config.clone(),
            model,
            adam,
            step: ckpt.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.config, &self.model, Some(&self.adam), self.step)
    }

    pub fn total_steps(&self, data: &Dataset) -> usize {
        self.config.train.total_steps(data.train.len())
    }

    /// One optimizer step on `L_t = L_S + w·L_L`.
    pub fn step(&mut self, data: &Dataset) -> Result<LogEntry> {
        if data.train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let t = &self.config.train;
        let seed = self.config.seed;
        let total = self.total_steps(data);
        let lr = t.lr_at(self.step, total);
        let cos = Batch::gather(
            &data.train,
            &batch_indices(seed, self.step, Stream::Cos as usize, data.train.len(), t.batch_size),
        )?;
        let joint = self.model.ckler.is_some() && t.translation_weight > 0.0 && !data.translation.is_empty();
        let translation = if joint {
            let idx = batch_indices(
                seed,
                self.step,
                Stream::Translation as usize,
                data.translation.len(),
                t.batch_size,
            );
            Some(Batch::gather(&data.translation, &idx)?)
        } else {
            None
        };

        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.model.store, true);
        let x_i = tape.constant(cos.rgb);
        let x_u = (self.model.config.mode == Mode::Dual).then(|| tape.constant(cos.aux));
        let pred = self.model.forward(&ctx, x_i, x_u, t.aux_source)?;
        let l_s = total_seg_loss(&pred.seg, &cos.mask, &cos.edge)?;
        let (l_l, l_t) = match translation {
            Some(b) => {
                let out = self.model.translate(&ctx, tape.constant(b.rgb))?;
                let l_l = translation_loss(out.x_u, tape.constant(b.aux))?;
                (Some(l_l), l_s.add(l_l.scale(t.translation_weight))?)
            }
            None => (None, l_s),
        };
        let grads = tape.backward(l_t)?;
        let grads = ctx.param_grads(&grads);
        let stats = ctx.take_stats();
        let entry = LogEntry {
            step: self.step,
            lr,
            l_s: l_s.item(),
            l_l: l_l.map(|v| v.item()),
            l_t: l_t.item(),
        };
        if !entry.l_t.is_finite() {
            return Err(Error::DomainError(format!("non-finite loss at step {}", self.step)));
        }
        self.adam.step(&mut self.model.store, &grads, lr)?;
        stats.apply(&mut self.model.store);
        self.step += 1;
        Ok(entry)
    }

    /// Runs until `total_steps`, calling `on_step` after every step.
    pub fn run(&mut self, data: &Dataset, mut on_step: impl FnMut(&LogEntry)) -> Result<Vec<LogEntry>> {
        let total = self.total_steps(data);
        let mut log = Vec::with_capacity(total.saturating_sub(self.step));
        while self.step < total {
            let e = self.step(data)?;
            on_step(&e);
            log.push(e);
        }
        Ok(log)
    }
}

/// Trains a fresh model for the configured number of steps.
pub fn train(config: &RunConfig, data: &Dataset) -> Result<(TrainState, Vec<LogEntry>)> {
    let mut state = TrainState::new(config)?;
    let log = state.run(data, |_| {})?;
    Ok((state, log))
}

/// Mean translation loss of the knowledge learner over `samples`.
pub fn translation_eval(model: &Model, samples: &[SyntheticSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no translation samples".into()));
    }
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(8) {
        let b = Batch::gather(samples, chunk)?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &model.store, false);
        let out = model.translate(&ctx, tape.constant(b.rgb))?;
        total += translation_loss(out.x_u, tape.constant(b.aux))?.item() * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}
