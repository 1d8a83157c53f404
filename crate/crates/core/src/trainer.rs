//! Optimization loop: Adam, shuffled mini-batches, early stopping with
//! best-weight restore and an optional mixed-precision mode.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::EncodedDataset;
use crate::error::{Error, Result};
use crate::netcore::layers::bce_loss;
use crate::netcore::{save_checkpoint, ModelParams, Network, Pass, Precision, Real, Weights};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Initial static loss scale for [`Precision::Mixed`].
    pub loss_scale: f64,
    /// Written with the current weights whenever validation loss improves.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            batch_size: 256,
            max_epochs: 34,
            patience: 5,
            seed: 42,
            precision: Precision::Full,
            loss_scale: 1024.0,
            checkpoint: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::Config("training.patience must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("training.batch_size must be at least 2".into()));
        }
        if self.max_epochs < 1 {
            return Err(Error::Config("training.max_epochs must be at least 1".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        if self.precision == Precision::Mixed && (self.loss_scale.is_nan() || self.loss_scale < 1.0) {
            return Err(Error::Config("training.loss_scale must be at least 1".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Weights<T>,
    pub v: Weights<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(like: &Weights<T>) -> Self {
        AdamState {
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of a flat tensor at step `t >= 1`.
pub fn adam_update<T: Real>(theta: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], t: u64, cfg: &TrainingConfig) {
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let one = T::one();
    let c1 = T::of(1.0 - cfg.beta1.powi(t as i32));
    let c2 = T::of(1.0 - cfg.beta2.powi(t as i32));
    let lr = T::of(cfg.lr);
    let eps = T::of(cfg.epsilon);
    for (((p, &g), m), v) in theta.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Applies Adam to every trainable tensor. Frozen tensors are not part of
/// [`Weights`] and so are never touched.
pub fn adam_step<T: Real>(
    weights: &mut Weights<T>,
    grads: &Weights<T>,
    state: &mut AdamState<T>,
    cfg: &TrainingConfig,
) -> Result<()> {
    state.t += 1;
    let t = state.t;
    let gv = grads.views(1);
    let mut pv = weights.views_mut();
    let mut mv = state.m.views_mut();
    let mut vv = state.v.views_mut();
    if gv.len() != pv.len() || mv.len() != pv.len() || vv.len() != pv.len() {
        return Err(Error::Shape("gradient set does not match the parameters".into()));
    }
    for (((p, g), m), v) in pv.iter_mut().zip(&gv).zip(mv.iter_mut()).zip(vv.iter_mut()) {
        if p.1.shape().iter().product::<usize>() != g.1.len() || p.1.len() != m.1.len() || p.1.len() != v.1.len() {
            return Err(Error::Shape(format!("gradient for `{}` has the wrong size", p.0)));
        }
        let g = g.1.as_slice().expect("contiguous gradient");
        adam_update(
            p.1.as_slice_mut().expect("contiguous parameter"),
            g,
            m.1.as_slice_mut().expect("contiguous moment"),
            v.1.as_slice_mut().expect("contiguous moment"),
            t,
            cfg,
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    NoImprovement,
    Stop,
}

/// Tracks validation loss; "improved" means strictly lower than every
/// earlier epoch.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        let improved = match self.best {
            None => !val_loss.is_nan(),
            Some((_, best)) => val_loss < best,
        };
        if improved {
            self.best = Some((epoch, val_loss));
            self.since_best = 0;
            StopDecision::Improved
        } else {
            self.since_best += 1;
            if self.since_best >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::NoImprovement
            }
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.best.map(|(_, l)| l)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    /// Mixed precision: batches skipped because of non-finite gradients.
    pub skipped_batches: usize,
    pub final_loss_scale: f64,
}

impl TrainingHistory {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_loss).collect()
    }

    /// `epoch,train_loss,val_loss,seconds`, one row per completed epoch.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "epoch,train_loss,val_loss,seconds")?;
        for e in &self.epochs {
            writeln!(w, "{},{},{},{:.3}", e.epoch, e.train_loss, e.val_loss, e.seconds)?;
        }
        Ok(())
    }
}

/// Epoch driver shared by [`train`]: runs `epoch_fn` until early stopping
/// fires or `max_epochs` is reached and returns the state snapshot taken at
/// the best epoch.
pub fn run_with_early_stopping<S: Clone>(
    state: &mut S,
    max_epochs: usize,
    patience: usize,
    mut epoch_fn: impl FnMut(&mut S, usize) -> Result<(f64, f64)>,
    mut on_improve: impl FnMut(&S, usize) -> Result<()>,
) -> Result<(S, TrainingHistory)> {
    let mut stopper = EarlyStopping::new(patience);
    let mut best = state.clone();
    let mut history = TrainingHistory::default();
    for epoch in 1..=max_epochs {
        let start = Instant::now();
        let (train_loss, val_loss) = epoch_fn(state, epoch)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            seconds: start.elapsed().as_secs_f64(),
        });
        history.stopped_epoch = epoch;
        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => {
                best = state.clone();
                on_improve(state, epoch)?;
            }
            StopDecision::NoImprovement => {}
            StopDecision::Stop => break,
        }
    }
    history.best_epoch = stopper.best_epoch().unwrap_or(0);
    Ok((best, history))
}

/// Mini-batch row groups for one epoch. A trailing single-row batch is
/// merged into the previous batch because batch norm needs two rows.
pub fn batch_indices(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("nonempty");
        batches.last_mut().expect("nonempty").extend(last);
    }
    batches
}

struct LoopState {
    net: Network<f32>,
    adam: AdamState<f32>,
    shuffle_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    loss_scale: f64,
    skipped: usize,
}

impl Clone for LoopState {
    fn clone(&self) -> Self {
        LoopState {
            net: self.net.clone(),
            adam: self.adam.clone(),
            shuffle_rng: self.shuffle_rng.clone(),
            dropout_rng: self.dropout_rng.clone(),
            loss_scale: self.loss_scale,
            skipped: self.skipped,
        }
    }
}

fn train_epoch(s: &mut LoopState, train: &EncodedDataset, cfg: &TrainingConfig) -> Result<f64> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut s.shuffle_rng);
    let mixed = s.net.precision == Precision::Mixed;
    let mut loss_sum = 0.0;
    for rows in batch_indices(&order, cfg.batch_size) {
        let ids = train.sequences.select(ndarray::Axis(0), &rows);
        let y: Array2<f32> = train.labels.select(ndarray::Axis(0), &rows).mapv(f32::from);
        let cache = s.net.forward(&ids, Pass::Train(&mut s.dropout_rng))?;
        loss_sum += bce_loss(cache.probs.view(), y.view()) * rows.len() as f64;
        let scale = if mixed { s.loss_scale } else { 1.0 };
        let mut grads = s.net.backward(&cache, y.view(), scale)?;
        if mixed {
            grads.scale((1.0 / scale) as f32);
        }
        if !grads.all_finite() {
            if !mixed {
                return Err(Error::Numeric("non-finite gradient".into()));
            }
            s.skipped += 1;
            s.loss_scale /= 2.0;
            if s.loss_scale < 1.0 {
                return Err(Error::Numeric("mixed precision diverged".into()));
            }
            continue;
        }
        adam_step(&mut s.net.params.weights, &grads, &mut s.adam, cfg)?;
        s.net.update_moving_stats(&cache);
    }
    Ok(loss_sum / train.len() as f64)
}

/// Trains `params` and returns the weights of the best validation epoch.
pub fn train(
    params: ModelParams<f32>,
    train_ds: &EncodedDataset,
    val_ds: &EncodedDataset,
    cfg: &TrainingConfig,
) -> Result<(ModelParams<f32>, TrainingHistory)> {
    cfg.validate()?;
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    if train_ds.len() < 2 {
        return Err(Error::Data("training needs at least 2 rows".into()));
    }
    for ds in [train_ds, val_ds] {
        if ds.max_id_bound() > params.vocab_size() {
            return Err(Error::Data(format!(
                "{} split contains token ids beyond the embedding matrix",
                ds.split
            )));
        }
        if ds.labels.ncols() != params.config.num_labels {
            return Err(Error::Shape(format!(
                "{} split has {} label columns, model has {}",
                ds.split,
                ds.labels.ncols(),
                params.config.num_labels
            )));
        }
    }
    let adam = AdamState::new(&params.weights);
    let mut state = LoopState {
        net: Network::new(params).with_precision(cfg.precision),
        adam,
        shuffle_rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        dropout_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d209_0000_0001),
        loss_scale: cfg.loss_scale,
        skipped: 0,
    };
    let (best, mut history) = run_with_early_stopping(
        &mut state,
        cfg.max_epochs,
        cfg.patience,
        |s, _epoch| {
            let train_loss = train_epoch(s, train_ds, cfg)?;
            let val_loss = s.net.evaluate_loss(&val_ds.sequences, &val_ds.labels, cfg.batch_size)?;
            if !val_loss.is_finite() {
                return Err(Error::Numeric("non-finite validation loss".into()));
            }
            Ok((train_loss, val_loss))
        },
        |s, _epoch| match &cfg.checkpoint {
            Some(path) => save_checkpoint(&s.net.params, path),
            None => Ok(()),
        },
    )?;
    history.skipped_batches = state.skipped;
    history.final_loss_scale = state.loss_scale;
    Ok((best.net.params, history))
}

/// [`train`] with [`Precision::Mixed`].
pub fn train_mixed(
    params: ModelParams<f32>,
    train_ds: &EncodedDataset,
    val_ds: &EncodedDataset,
    cfg: &TrainingConfig,
) -> Result<(ModelParams<f32>, TrainingHistory)> {
    let cfg = TrainingConfig {
        precision: Precision::Mixed,
        ..cfg.clone()
    };
    train(params, train_ds, val_ds, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_fixed_point_and_first_step() {
        let cfg = TrainingConfig::default();
        let mut theta = [0.5f64, -2.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        adam_update(&mut theta, &[0.0, 0.0], &mut m, &mut v, 1, &cfg);
        assert_eq!(theta, [0.5, -2.0]);

        let mut theta = [0.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_update(&mut theta, &[1.0], &mut m, &mut v, 1, &cfg);
        // lr * 1 / (1 + 1e-7)
        assert!((theta[0] + 1e-3 / (1.0 + 1e-7)).abs() < 1e-15);
        assert!((theta[0] + 9.999999e-4).abs() < 1e-12);
    }

    #[test]
    fn early_stopping_script() {
        let losses = [1.0, 0.9, 0.91, 0.92, 0.93, 0.94, 0.95, 0.5, 0.4];
        let mut weights = 0usize;
        let (best, h) = run_with_early_stopping(
            &mut weights,
            34,
            5,
            |w, epoch| {
                *w = epoch;
                Ok((0.0, losses[epoch - 1]))
            },
            |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(h.stopped_epoch, 7);
        assert_eq!(h.best_epoch, 2);
        assert_eq!(best, 2);
        assert_eq!(h.epochs.len(), 7);
    }

    #[test]
    fn decreasing_losses_run_to_max() {
        let mut s = ();
        let (_, h) = run_with_early_stopping(&mut s, 34, 5, |_, e| Ok((0.0, 1.0 / e as f64)), |_, _| Ok(())).unwrap();
        assert_eq!(h.stopped_epoch, 34);
        assert_eq!(h.best_epoch, 34);
    }

    #[test]
    fn equal_loss_is_not_improvement() {
        let mut es = EarlyStopping::new(2);
        assert_eq!(es.observe(1, 1.0), StopDecision::Improved);
        assert_eq!(es.observe(2, 1.0), StopDecision::NoImprovement);
        assert_eq!(es.observe(3, 1.0), StopDecision::Stop);
        assert_eq!(es.best_epoch(), Some(1));
    }

    #[test]
    fn singleton_tail_batch_is_merged() {
        let order: Vec<usize> = (0..9).collect();
        let b = batch_indices(&order, 4);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        let b = batch_indices(&order[..6], 4);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 2]);
    }

    #[test]
    fn history_csv_rows() {
        let h = TrainingHistory {
            epochs: vec![
                EpochRecord { epoch: 1, train_loss: 0.5, val_loss: 0.4, seconds: 1.0 },
                EpochRecord { epoch: 2, train_loss: 0.3, val_loss: 0.35, seconds: 1.0 },
            ],
            best_epoch: 2,
            stopped_epoch: 2,
            ..Default::default()
        };
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + h.stopped_epoch);
        assert!(text.starts_with("epoch,train_loss,val_loss,seconds\n1,0.5,0.4,"));
    }

    #[test]
    fn config_validation() {
        assert!(TrainingConfig { patience: 0, ..Default::default() }.validate().is_err());
        assert!(TrainingConfig { batch_size: 1, ..Default::default() }.validate().is_err());
        assert!(TrainingConfig::default().validate().is_ok());
    }
}
