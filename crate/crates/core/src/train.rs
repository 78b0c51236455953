//! Mini-batch training with AdamW and early stopping on dev span F1.
//!
//! Batch gradients are summed over fixed chunks of utterances, chunk sums
//! are added in order, and dropout draws from a stream keyed by epoch and
//! utterance index. A run is therefore bit-reproducible from its seed
//! whether or not worker threads are used.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::AnyModel;
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::layers::DropoutSite;
use crate::model::{Example, ModelConfig, OptimizerConfig, SlotModel};
use crate::parallel::map_chunks;
use crate::params::{rng_for, Gradients, ParameterStore};
use crate::tensor::{DType, Real, Tensor};

/// Utterances per unit of parallel gradient work.
pub const GRAD_CHUNK: usize = 4;

/// Adam with decoupled weight decay; parameters flagged `decay = false`
/// (biases, CRF transition and boundary scores) skip the decay term.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: OptimizerConfig,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParameterStore<T>, config: OptimizerConfig, weight_decay: f64) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            config,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies `grads · scale`. Parameters without a gradient are untouched.
    pub fn step(
        &mut self,
        store: &mut ParameterStore<T>,
        grads: &Gradients<T>,
        scale: f64,
    ) -> Result<()> {
        self.step += 1;
        let (b1, b2) = self.config.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let lr = self.config.lr;
        let (tb1, tb2, teps, tscale) = (T::of(b1), T::of(b2), T::of(self.config.eps), T::of(scale));
        let (one, tc1, tc2, tlr) = (T::one(), T::of(c1), T::of(c2), T::of(lr));
        for (id, grad) in grads.iter() {
            let i = id.index();
            let param = store.get_mut(id);
            let decay = if param.decay {
                T::of(lr * self.weight_decay)
            } else {
                T::zero()
            };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((p, &g), m), v) in param
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let g = g * tscale;
                *m = tb1 * *m + (one - tb1) * g;
                *v = tb2 * *v + (one - tb2) * g * g;
                let update = (*m / tc1) / ((*v / tc2).sqrt() + teps);
                *p = *p - tlr * update - decay * *p;
            }
        }
        Ok(())
    }
}

/// Summed NLL and summed gradients over `indices`.
pub fn batch_gradients<T: Real>(
    model: &SlotModel<T>,
    examples: &[Example],
    indices: &[usize],
    epoch: usize,
    training: bool,
) -> Result<(f64, Gradients<T>)> {
    let seed = model.config.seed;
    let chunks = map_chunks(indices, GRAD_CHUNK, model.config.parallel, |chunk| {
        let mut loss = 0.0;
        let mut acc: Option<Gradients<T>> = None;
        for &i in chunk {
            let site = DropoutSite {
                seed,
                path: format!("dropout/e{epoch}/u{i}"),
            };
            let mut g = Graph::new(&model.store);
            let l = model.nll(&mut g, &examples[i], training.then_some(&site))?;
            loss += g.value(l).item()?.as_f64();
            let grads = g.backward(l)?;
            match acc.as_mut() {
                Some(a) => a.merge(grads)?,
                None => acc = Some(grads),
            }
        }
        Ok::<_, Error>((loss, acc))
    });
    let mut loss = 0.0;
    let mut total: Option<Gradients<T>> = None;
    for c in chunks {
        let (l, grads) = c?;
        loss += l;
        if let Some(grads) = grads {
            match total.as_mut() {
                Some(t) => t.merge(grads)?,
                None => total = Some(grads),
            }
        }
    }
    let total = total.ok_or_else(|| Error::Contract("empty batch".into()))?;
    Ok((loss, total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean NLL per utterance over the epoch, with dropout active.
    pub train_loss: f64,
    pub dev_f1: Option<f64>,
    /// Seconds since training started.
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct Trained<M> {
    pub model: M,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_f1: Option<f64>,
}

/// Builds a model from the training data and fits it.
pub fn train<T: Real>(
    train: &[Utterance],
    dev: &[Utterance],
    config: &ModelConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Trained<SlotModel<T>>> {
    let model = SlotModel::<T>::for_dataset(config.clone(), train)?;
    fit(model, train, dev, on_epoch)
}

/// [`train`] in the precision named by `config.dtype`.
pub fn train_any(
    train_set: &[Utterance],
    dev: &[Utterance],
    config: &ModelConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Trained<AnyModel>> {
    fn wrap<M>(t: Trained<M>, f: impl FnOnce(M) -> AnyModel) -> Trained<AnyModel> {
        Trained {
            model: f(t.model),
            log: t.log,
            best_epoch: t.best_epoch,
            best_dev_f1: t.best_dev_f1,
        }
    }
    Ok(match config.dtype {
        DType::F32 => wrap(
            train::<f32>(train_set, dev, config, on_epoch)?,
            AnyModel::F32,
        ),
        DType::F64 => wrap(
            train::<f64>(train_set, dev, config, on_epoch)?,
            AnyModel::F64,
        ),
    })
}

fn non_finite(store: &ParameterStore<impl Real>, grads: Option<&Gradients<impl Real>>) -> Error {
    let param = grads
        .and_then(|g| {
            g.iter()
                .find(|(_, t)| !t.all_finite())
                .map(|(id, _)| store.get(id).name.clone())
        })
        .or_else(|| store.first_non_finite().map(str::to_string))
        .unwrap_or_else(|| "<loss>".into());
    Error::NonFinite { param }
}

/// Trains `model` in place of its current parameters. With a dev set, the
/// returned model is the best-dev snapshot.
pub fn fit<T: Real>(
    mut model: SlotModel<T>,
    train: &[Utterance],
    dev: &[Utterance],
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Trained<SlotModel<T>>> {
    if train.is_empty() {
        return Err(Error::data("training set", "no utterances"));
    }
    let examples = train
        .iter()
        .enumerate()
        .map(|(i, u)| {
            model
                .example(u)
                .map_err(|e| Error::data(format!("training utterance {i}"), e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = model.config.clone();
    let mut opt = AdamW::new(&model.store, cfg.optimizer.clone(), cfg.weight_decay);
    let start = Instant::now();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor<T>>)> = None;
    let mut order: Vec<usize> = (0..examples.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_for(cfg.seed, &format!("shuffle/epoch{epoch}")));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = batch_gradients(&model, &examples, batch, epoch, true)?;
            if !loss.is_finite() {
                return Err(non_finite(&model.store, Some(&grads)));
            }
            epoch_loss += loss;
            opt.step(&mut model.store, &grads, 1.0 / batch.len() as f64)?;
            if model.store.first_non_finite().is_some() {
                return Err(non_finite(&model.store, None::<&Gradients<T>>));
            }
        }
        let dev_f1 = if dev.is_empty() {
            None
        } else {
            Some(evaluate(&model, dev, cfg.parallel)?.micro.f1)
        };
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / examples.len() as f64,
            dev_f1,
            wall_time: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.push(record);

        let Some(f1) = dev_f1 else { continue };
        if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
            best = Some((f1, epoch, model.store.snapshot()));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if cfg.target_dev_f1.is_some_and(|t| f1 >= t) || epoch - best_epoch >= cfg.patience.max(1) {
            break;
        }
    }

    let (best_epoch, best_dev_f1) = match best {
        Some((f1, epoch, values)) => {
            model.store.restore(&values)?;
            (epoch, Some(f1))
        }
        None => (log.len(), None),
    };
    Ok(Trained {
        model,
        log,
        best_epoch,
        best_dev_f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Variant;
    use crate::data::SlotSpan;
    use crate::tensor::DType;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            char_embed_dim: 8,
            lstm_units: 16,
            d_model: 16,
            num_heads: 2,
            head_size: 8,
            num_blocks: 2,
            block_min_dim: 16,
            max_relative_distance: 3,
            batch_size: 4,
            max_epochs: 3,
            dtype: DType::F64,
            ..ModelConfig::default()
        }
    }

    fn tiny_data() -> Vec<Utterance> {
        let rows: [(&[&str], usize); 6] = [
            (&["book", "at", "noon"], 2),
            (&["table", "at", "six"], 2),
            (&["at", "seven", "please"], 1),
            (&["noon", "works"], 0),
            (&["we", "come", "at", "eight"], 3),
            (&["at", "nine"], 1),
        ];
        rows.iter()
            .map(|(w, t)| {
                Utterance::from_tokens(w, vec![SlotSpan::new(*t, *t, "time")], None).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let data = tiny_data();
        let mut cfg = tiny_config();
        cfg.optimizer.lr = 0.0;
        cfg.max_epochs = 1;
        let model = SlotModel::<f64>::for_dataset(cfg, &data).unwrap();
        let before = model.store.snapshot();
        let out = fit(model, &data, &[], &mut |_| {}).unwrap();
        assert_eq!(out.model.store.snapshot(), before);
    }

    #[test]
    fn same_seed_same_losses_with_or_without_threads() {
        let data = tiny_data();
        let run = |parallel: bool| {
            let cfg = ModelConfig {
                parallel,
                max_epochs: 2,
                ..tiny_config()
            };
            train::<f64>(&data, &[], &cfg, &mut |_| {}).unwrap().log
        };
        let a = run(true);
        let b = run(true);
        let c = run(false);
        for ((x, y), z) in a.iter().zip(&b).zip(&c) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
            assert_eq!(x.train_loss.to_bits(), z.train_loss.to_bits());
        }
    }

    #[test]
    fn loss_decreases_on_fixed_batch() {
        let data = tiny_data();
        let cfg = ModelConfig {
            dropout: 0.0,
            attention_dropout: 0.0,
            batch_size: 6,
            max_epochs: 1,
            optimizer: OptimizerConfig {
                lr: 1e-2,
                ..OptimizerConfig::default()
            },
            ..tiny_config()
        };
        let mut model = SlotModel::<f64>::for_dataset(cfg.clone(), &data).unwrap();
        let examples: Vec<Example> = data.iter().map(|u| model.example(u).unwrap()).collect();
        let all: Vec<usize> = (0..examples.len()).collect();
        let mut opt = AdamW::new(&model.store, cfg.optimizer.clone(), cfg.weight_decay);
        let mut losses = Vec::new();
        for _ in 0..5 {
            let (loss, grads) = batch_gradients(&model, &examples, &all, 1, false).unwrap();
            losses.push(loss);
            opt.step(&mut model.store, &grads, 1.0 / all.len() as f64)
                .unwrap();
        }
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn empty_training_set_is_data_error() {
        let err = train::<f64>(&[], &[], &tiny_config(), &mut |_| {}).unwrap_err();
        assert!(matches!(err, Error::Data { .. }));
    }

    #[test]
    fn nan_is_reported_with_a_parameter_name() {
        let data = tiny_data();
        let mut model = SlotModel::<f64>::for_dataset(tiny_config(), &data).unwrap();
        model
            .store
            .by_name_mut("gate.bias")
            .unwrap()
            .value
            .data_mut()[0] = f64::NAN;
        let err = fit(model, &data, &[], &mut |_| {}).unwrap_err();
        match err {
            Error::NonFinite { param } => {
                assert!(!param.is_empty() && param != "<loss>", "{param}")
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn early_stopping_restores_best_snapshot() {
        let data = tiny_data();
        let cfg = ModelConfig {
            max_epochs: 6,
            patience: 2,
            variant: Variant::None,
            ..tiny_config()
        };
        let out = train::<f64>(&data, &data, &cfg, &mut |_| {}).unwrap();
        let f1 = evaluate(&out.model, &data, false).unwrap().micro.f1;
        assert_eq!(Some(f1), out.best_dev_f1);
        assert!(out.log.len() <= 6);
    }

    #[test]
    fn weight_decay_skips_flagged_parameters() {
        let mut store = ParameterStore::<f64>::new(0);
        let w = store.add("w", Tensor::filled(&[2], 1.0), true).unwrap();
        let b = store.add("b", Tensor::filled(&[2], 1.0), false).unwrap();
        let mut g = Graph::new(&store);
        let (wv, bv) = (g.param(w), g.param(b));
        let s = g.add(wv, bv).unwrap();
        let s = g.scale(s, 0.0);
        let l = g.sum(s);
        let grads = g.backward(l).unwrap();
        let mut opt = AdamW::new(&store, OptimizerConfig::default(), 0.5);
        opt.step(&mut store, &grads, 1.0).unwrap();
        assert!((store.value(w).data()[0] - (1.0 - 1e-3 * 0.5)).abs() < 1e-15);
        assert_eq!(store.value(b).data()[0], 1.0);
    }
}
