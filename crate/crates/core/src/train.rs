//! Optimization: Adam, dev-WER plateau decay, scheduled sampling, and the
//! epoch loop.
//!
//! A minibatch is split into fixed-size chunks whose gradients are computed on
//! separate tapes in parallel and summed in chunk order, so results depend on
//! `chunk_size` but never on the number of threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Batch, LexiconEntry};
use crate::decode::decode_words;
use crate::error::{G2pError, Result};
use crate::eval::evaluate;
use crate::layers::ParamGroup;
use crate::model::Model;
use crate::rng::{Purpose, SeedStreams};
use crate::scalar::Scalar;
use crate::tape::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: u64,
    pub lr0: f64,
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Lowest teacher-forcing probability.
    pub sampling_floor: f64,
    /// Epoch at which the floor is reached; `None` means `epochs`.
    pub sampling_horizon: Option<u64>,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Rows per parallel gradient worker.
    pub chunk_size: usize,
    /// Batch size for greedy decoding of the dev set.
    pub decode_batch: usize,
    pub p_drop_grid: Vec<f64>,
    pub feeding_grid: Vec<bool>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            epochs: 100,
            lr0: 0.001,
            lr_decay: 0.8,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            sampling_floor: 0.8,
            sampling_horizon: None,
            clip_norm: Some(5.0),
            chunk_size: 32,
            decode_batch: 256,
            p_drop_grid: vec![0.0, 0.1, 0.2, 0.3, 0.4],
            feeding_grid: vec![false, true],
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(G2pError::Config(m.to_string()));
        if self.batch_size == 0 || self.chunk_size == 0 || self.decode_batch == 0 {
            return fail("batch sizes must be at least 1");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return fail("lr_decay must lie in (0, 1)");
        }
        if !(self.lr0 > 0.0) {
            return fail("lr0 must be positive");
        }
        if !(0.0..=1.0).contains(&self.sampling_floor) {
            return fail("sampling_floor must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return fail("invalid Adam constants");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return fail("clip_norm must be positive");
        }
        Ok(())
    }

    pub fn horizon(&self) -> u64 {
        self.sampling_horizon.unwrap_or(self.epochs)
    }
}

/// Teacher-forcing probability for zero-based `epoch`:
/// `max(floor, 1 - epoch * (1 - floor) / horizon)`.
pub fn sampling_prob(epoch: u64, floor: f64, horizon: u64) -> f64 {
    if epoch >= horizon {
        return floor;
    }
    (1.0 - epoch as f64 * (1.0 - floor) / horizon as f64).max(floor)
}

/// Adam with bias correction. Moments are kept per parameter tensor in the
/// model's canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<P: ParamGroup<T>>(params: &P, beta1: f64, beta2: f64, eps: f64) -> Self {
        let mut m = Vec::new();
        params.visit("", &mut |_, t| m.push(vec![T::zero(); t.numel()]));
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// One update with learning rate `lr`; `grads` follow the visiting order.
    pub fn update<P: ParamGroup<T>>(&mut self, params: &mut P, grads: &[Vec<T>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(G2pError::Contract(format!(
                "{} gradients for {} parameter tensors",
                grads.len(),
                self.m.len()
            )));
        }
        for (k, g) in grads.iter().enumerate() {
            if g.len() != self.m[k].len() {
                return Err(G2pError::Contract(format!("gradient {k} has the wrong length")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (c1, c2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let corr1 = T::of(1.0 - self.beta1.powi(t));
        let corr2 = T::of(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        let mut k = 0;
        params.visit_mut("", &mut |_, p| {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for (((x, m), v), &g) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *m = b1 * *m + c1 * g;
                *v = b2 * *v + c2 * g * g;
                let m_hat = *m / corr1;
                let v_hat = *v / corr2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            k += 1;
        });
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}

/// Learning-rate decay on dev-WER plateaus. After `k` non-improving epochs
/// the rate is `lr0 * decay^k`, computed directly rather than by repeated
/// multiplication so it carries no accumulated rounding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub lr0: f64,
    pub decay: f64,
    pub plateaus: u32,
    pub lr: f64,
    pub best: Option<f64>,
}

impl PlateauSchedule {
    pub fn new(lr0: f64, decay: f64) -> Self {
        PlateauSchedule {
            lr0,
            decay,
            plateaus: 0,
            lr: lr0,
            best: None,
        }
    }

    /// Records an epoch's dev WER. Returns true (save) on strict improvement,
    /// otherwise decays the learning rate for the next epoch.
    pub fn observe(&mut self, wer: f64) -> bool {
        if self.best.is_none_or(|b| wer < b) {
            self.best = Some(wer);
            true
        } else {
            self.plateaus += 1;
            self.lr = self.lr0 * self.decay.powf(f64::from(self.plateaus));
            false
        }
    }
}

/// Everything besides the parameters that a resumed run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    /// Completed epochs.
    pub epoch: u64,
    pub schedule: PlateauSchedule,
    pub adam: Adam<T>,
    /// Teacher-forcing probability used by the most recent epoch.
    pub sampling_prob: f64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: &Model<T>, config: &TrainConfig) -> Self {
        TrainState {
            epoch: 0,
            schedule: PlateauSchedule::new(config.lr0, config.lr_decay),
            adam: Adam::new(&model.params, config.beta1, config.beta2, config.adam_eps),
            sampling_prob: 1.0,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based epoch number.
    pub epoch: u64,
    pub train_loss: f64,
    pub dev_wer: f64,
    /// Learning rate after this epoch's schedule update.
    pub lr: f64,
    pub sampling_prob: f64,
    pub saved: bool,
}

impl EpochRecord {
    pub const TSV_HEADER: &'static str = "epoch\ttrain_loss\tdev_wer\tlr\tsampling_prob\tsaved";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.2}\t{:e}\t{:.4}\t{}",
            self.epoch, self.train_loss, self.dev_wer, self.lr, self.sampling_prob, self.saved as u8
        )
    }
}

fn chunk_stream_index(epoch: u64, batch: u64, chunk: u64) -> u64 {
    (epoch << 40) ^ (batch << 16) ^ chunk
}

/// Summed loss, target token count and summed gradients for one minibatch.
pub fn batch_gradients<T: Scalar>(
    model: &Model<T>,
    batch: &Batch,
    sampling_prob: f64,
    seeds: SeedStreams,
    position: (u64, u64),
    chunk_size: usize,
    dropout: bool,
) -> Result<(f64, usize, Vec<Vec<T>>)> {
    let rows: Vec<usize> = (0..batch.len()).collect();
    let parts = rows
        .par_chunks(chunk_size.max(1))
        .enumerate()
        .map(|(c, rows)| {
            let sub = Batch::from_ids(
                rows.iter().map(|&r| batch.words[r].clone()).collect(),
                rows.iter()
                    .map(|&r| batch.sources[r][..batch.source_lengths[r]].to_vec())
                    .collect(),
                rows.iter()
                    .map(|&r| batch.targets[r][..batch.target_lengths[r]].to_vec())
                    .collect(),
            );
            let index = chunk_stream_index(position.0, position.1, c as u64);
            let mut drop_rng = seeds.stream_at(Purpose::Dropout, index);
            let mut sample_rng = seeds.stream_at(Purpose::Sampling, index);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let loss = model.batch_nll(
                &mut tape,
                &bound,
                &sub,
                sampling_prob,
                dropout.then_some(&mut drop_rng),
                &mut sample_rng,
            )?;
            let value = tape.value(loss)[0].as_f64();
            let grads = tape.backward(loss)?;
            Ok((value, sub.target_tokens(), model.collect_grads(&bound, &grads)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut parts = parts.into_iter();
    let (mut loss, mut tokens, mut grads) = parts
        .next()
        .ok_or_else(|| G2pError::Input("empty minibatch".into()))?;
    for (l, n, g) in parts {
        loss += l;
        tokens += n;
        for (acc, x) in grads.iter_mut().zip(g) {
            acc.iter_mut().zip(x).for_each(|(a, b)| *a += b);
        }
    }
    Ok((loss, tokens, grads))
}

/// One pass over the training set; returns the mean per-token loss.
pub fn run_epoch<T: Scalar>(
    model: &mut Model<T>,
    state: &mut TrainState<T>,
    train: &[LexiconEntry],
    config: &TrainConfig,
) -> Result<f64> {
    if train.is_empty() {
        return Err(G2pError::Input("empty training set".into()));
    }
    let p = sampling_prob(state.epoch, config.sampling_floor, config.horizon());
    state.sampling_prob = p;
    let batches = make_batches(
        train,
        &model.graphemes,
        &model.phonemes,
        config.batch_size,
        config.seed,
        state.epoch,
    )?;
    let seeds = SeedStreams::new(config.seed);
    let dropout = model.config.p_drop > 0.0;
    let (mut loss_sum, mut token_sum) = (0.0, 0usize);
    for (b, batch) in batches.iter().enumerate() {
        let (loss, tokens, mut grads) =
            batch_gradients(model, batch, p, seeds, (state.epoch, b as u64), config.chunk_size, dropout)?;
        let scale = T::of(1.0 / tokens as f64);
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= scale);
        if let Some(c) = config.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        if grads.iter().flatten().any(|x| !x.is_finite()) || !loss.is_finite() {
            return Err(G2pError::NonFinite(format!(
                "gradients at epoch {} batch {}",
                state.epoch + 1,
                b + 1
            )));
        }
        state.adam.update(&mut model.params, &grads, state.schedule.lr)?;
        loss_sum += loss;
        token_sum += tokens;
    }
    state.epoch += 1;
    Ok(loss_sum / token_sum as f64)
}

/// Greedy-decodes `entries` and returns the WER in percent.
pub fn word_error_rate<T: Scalar>(model: &Model<T>, entries: &[LexiconEntry], batch: usize) -> Result<f64> {
    let words: Vec<&str> = entries.iter().map(|e| e.word.as_str()).collect();
    let preds = decode_words(model, &words, batch)?;
    let symbols: Vec<Vec<String>> = preds.iter().map(|p| p.symbols(model)).collect();
    Ok(evaluate(&symbols, entries)?.wer)
}

/// Scores the dev set and applies the plateau rule. Returns `(saved, wer)`.
pub fn end_of_epoch<T: Scalar>(
    model: &Model<T>,
    state: &mut TrainState<T>,
    dev: &[LexiconEntry],
    config: &TrainConfig,
) -> Result<(bool, f64)> {
    if dev.is_empty() {
        return Err(G2pError::Input("empty development set".into()));
    }
    let wer = word_error_rate(model, dev, config.decode_batch)?;
    Ok((state.schedule.observe(wer), wer))
}

/// Trains until `config.epochs`, scoring the development set by greedy WER.
/// `on_epoch` sees every record; a record with `saved` set marks a new best
/// model that the caller should persist.
pub fn fit<T, F>(
    model: &mut Model<T>,
    state: &mut TrainState<T>,
    train: &[LexiconEntry],
    dev: &[LexiconEntry],
    config: &TrainConfig,
    on_epoch: F,
) -> Result<Vec<EpochRecord>>
where
    T: Scalar,
    F: FnMut(&EpochRecord, &Model<T>) -> Result<()>,
{
    if dev.is_empty() {
        return Err(G2pError::Input("empty development set".into()));
    }
    fit_with(
        model,
        state,
        train,
        config,
        |m| word_error_rate(m, dev, config.decode_batch),
        on_epoch,
    )
}

/// [`fit`] with a caller-supplied development score (lower is better).
pub fn fit_with<T, S, F>(
    model: &mut Model<T>,
    state: &mut TrainState<T>,
    train: &[LexiconEntry],
    config: &TrainConfig,
    mut score: S,
    mut on_epoch: F,
) -> Result<Vec<EpochRecord>>
where
    T: Scalar,
    S: FnMut(&Model<T>) -> Result<f64>,
    F: FnMut(&EpochRecord, &Model<T>) -> Result<()>,
{
    config.validate()?;
    let mut log = Vec::new();
    while state.epoch < config.epochs {
        let train_loss = run_epoch(model, state, train, config)?;
        let dev_wer = score(model)?;
        let saved = state.schedule.observe(dev_wer);
        let record = EpochRecord {
            epoch: state.epoch,
            train_loss,
            dev_wer,
            lr: state.schedule.lr,
            sampling_prob: state.sampling_prob,
            saved,
        };
        log::info!("{}", record.to_tsv());
        on_epoch(&record, model)?;
        log.push(record);
    }
    Ok(log)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub p_drop: f64,
    pub input_feeding: bool,
}

pub fn grid_points(config: &TrainConfig) -> Vec<GridPoint> {
    config
        .p_drop_grid
        .iter()
        .flat_map(|&p_drop| {
            config.feeding_grid.iter().map(move |&input_feeding| GridPoint { p_drop, input_feeding })
        })
        .collect()
}

/// Lowest dev WER wins; ties go to the smaller dropout, then to feeding off.
pub fn select_best(scored: &[(GridPoint, f64)]) -> Result<GridPoint> {
    scored
        .iter()
        .min_by(|(a, wa), (b, wb)| {
            wa.total_cmp(wb)
                .then(a.p_drop.total_cmp(&b.p_drop))
                .then(a.input_feeding.cmp(&b.input_feeding))
        })
        .map(|(g, _)| *g)
        .ok_or_else(|| G2pError::Config("empty hyperparameter grid".into()))
}

/// Scores every grid point with `run` (in parallel) and selects the best.
pub fn grid_search<F>(points: &[GridPoint], run: F) -> Result<(GridPoint, Vec<(GridPoint, f64)>)>
where
    F: Fn(&GridPoint) -> Result<f64> + Sync,
{
    let scored = points
        .par_iter()
        .map(|g| run(g).map(|w| (*g, w)))
        .collect::<Result<Vec<_>>>()?;
    Ok((select_best(&scored)?, scored))
}
