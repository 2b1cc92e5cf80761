//! Mini-batch training with Adam and best-validation model selection.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, TransWfModel};
use crate::aggregate::FeatureVector;
use crate::error::{ModelError, TensorError};
use crate::metrics::{map_at_k, EvalRecord};
use crate::seed::{rng_from_seed, SeededRng};
use crate::tensor::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;
use crate::trace::LabelVector;

/// Feature vectors with their label vectors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledSet {
    pub features: Vec<FeatureVector>,
    pub labels: Vec<LabelVector>,
}

impl LabeledSet {
    pub fn new(features: Vec<FeatureVector>, labels: Vec<LabelVector>) -> Result<Self, ModelError> {
        if features.len() != labels.len() {
            return Err(ModelError::BadConfig(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    fn targets(&self, idx: &[usize], n_labels: usize) -> Result<Tensor, ModelError> {
        let mut data = Vec::with_capacity(idx.len() * n_labels);
        for &i in idx {
            let y = &self.labels[i];
            if y.len() != n_labels {
                return Err(TensorError::shape("labels", &[y.len()], &[n_labels]).into());
            }
            data.extend(y.as_f64());
        }
        Ok(Tensor::new(&[idx.len(), n_labels], data)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Stop after this many epochs without a better validation MAP.
    pub patience: usize,
    /// `k` of the validation MAP@k used for model selection.
    pub select_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig::default(),
            patience: 5,
            select_k: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_map: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were returned.
    pub best_epoch: usize,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_MAP\n");
        for e in &self.epochs {
            writeln!(
                s,
                "{},{},{},{}",
                e.epoch, e.train_loss, e.val_loss, e.val_map
            )
            .expect("write to string");
        }
        s
    }
}

/// Validation loss and mean MAP@k.
fn validate(
    model: &TransWfModel,
    set: &LabeledSet,
    rows: &[Vec<f64>],
    k: usize,
) -> Result<(f64, f64), ModelError> {
    let n = model.config().n_labels;
    let mut loss = 0.0;
    for (chunk_idx, chunk) in rows.chunks(64).enumerate() {
        let idx: Vec<usize> = (chunk_idx * 64..chunk_idx * 64 + chunk.len()).collect();
        loss += model.eval_loss(chunk, &set.targets(&idx, n)?)? * chunk.len() as f64;
    }
    let preds = model.predict(&set.features)?;
    let mut map = 0.0;
    for (y, p) in set.labels.iter().zip(preds) {
        let rec =
            EvalRecord::new(y.clone(), p).map_err(|e| ModelError::BadConfig(e.to_string()))?;
        map += map_at_k(&rec, k).map_err(|e| ModelError::BadConfig(e.to_string()))?;
    }
    Ok((loss / rows.len() as f64, map / set.len() as f64))
}

/// Trains a fresh model. The returned weights are those of the epoch with
/// the best validation MAP@k (earliest on ties).
pub fn train(
    train_set: &LabeledSet,
    val_set: &LabeledSet,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<(TransWfModel, History), ModelError> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(ModelError::BadConfig(
            "epochs and batch_size must be positive".into(),
        ));
    }
    let k = cfg.select_k.clamp(1, model_cfg.n_labels);
    let mut model = TransWfModel::new(model_cfg.clone(), rng.random())?;
    model.fit_scaler(&train_set.features);
    let scale = |set: &LabeledSet| {
        set.features
            .iter()
            .map(|f| model.scale_features(f))
            .collect::<Result<Vec<_>, _>>()
    };
    let train_rows = scale(train_set)?;
    let val_rows = scale(val_set)?;
    let mut dropout_rng = rng_from_seed(rng.random());

    let mut adam = Adam::new(cfg.adam.clone());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = History::default();
    let mut best: Option<(f64, TransWfModel)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let rows: Vec<Vec<f64>> = batch.iter().map(|&i| train_rows[i].clone()).collect();
            let targets = train_set.targets(batch, model_cfg.n_labels)?;
            let (loss, grads, stats) = model.loss_and_grads(&rows, &targets, &mut dropout_rng)?;
            loss_sum += loss * batch.len() as f64;
            let mut params: Vec<&mut Tensor> = model.params_mut().iter_mut().collect();
            adam.step(&mut params, &grads)?;
            model.update_running(&stats);
        }
        let (val_loss, val_map) = validate(&model, val_set, &val_rows, k)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss,
            val_map,
        });
        if best.as_ref().is_none_or(|(b, _)| val_map > *b) {
            best = Some((val_map, model.clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (_, model) = best.expect("at least one epoch ran");
    Ok((model, history))
}
