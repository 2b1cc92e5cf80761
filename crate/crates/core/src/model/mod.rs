//! The multi-tab classifier.
//!
//! A convolutional local profiler turns the aggregated feature vector into
//! a short sequence of local feature vectors. A stack of top-m attention
//! blocks mixes that sequence, it is mean-pooled, and a linear layer gives
//! one logit per label (N monitored sites plus the unmonitored slot). Each
//! logit goes through its own sigmoid, so several labels can fire at once.
//!
//! With [`ModelConfig::ensemble`] set, every label gets its own trunk and a
//! single-logit head instead of sharing one trunk.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::{FeatureVector, FIELDS_PER_SEGMENT};
use crate::error::{ModelError, TensorError};
use crate::seed::{rng_from_seed, SeededRng};
use crate::tensor::{checkpoint, BatchNormMode, BatchStats, Graph, Padding, Tensor, Var};

pub mod attention;
mod train;

pub use attention::{multihead_topm, sinusoidal_encoding, topm_attention, MultiHeadWeights};
pub use train::{train, EpochRecord, History, LabeledSet, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalProfilerConfig {
    pub blocks: usize,
    pub kernel: usize,
    pub pool_window: usize,
    pub pool_stride: usize,
    /// Output channels of every block; also the attention width.
    pub channels: usize,
    pub dropout: f64,
}

impl Default for LocalProfilerConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            kernel: 7,
            pool_window: 8,
            pool_stride: 4,
            channels: 256,
            dropout: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub heads: usize,
    pub layers: usize,
    pub m: usize,
    pub mask_value: f64,
    pub dropout: f64,
    pub drop_path: f64,
    pub ln_eps: f64,
    /// Hidden width of the block MLP as a multiple of the model width.
    pub mlp_ratio: usize,
    pub positional_encoding: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            heads: 2,
            layers: 4,
            m: 20,
            mask_value: -1e9,
            dropout: 0.1,
            drop_path: 0.1,
            ln_eps: 1e-5,
            mlp_ratio: 4,
            positional_encoding: false,
        }
    }
}

/// Input transform applied before the profiler.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureScaling {
    None,
    /// `ln(1 + x)` on every value.
    #[default]
    Log1p,
    /// Per-field `(x - mean) / std`, fitted on the training set.
    Standardize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub feature_len: usize,
    /// N + 1.
    pub n_labels: usize,
    pub profiler: LocalProfilerConfig,
    pub attention: AttentionConfig,
    pub scaling: FeatureScaling,
    pub ensemble: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_len: 8000,
            n_labels: 2,
            profiler: LocalProfilerConfig::default(),
            attention: AttentionConfig::default(),
            scaling: FeatureScaling::default(),
            ensemble: false,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Length of the sequence handed to the attention stack.
    pub fn seq_len(&self) -> Result<usize, ModelError> {
        let p = &self.profiler;
        let mut len = self.feature_len;
        for b in 0..p.blocks {
            if len < p.pool_window {
                return Err(ModelError::BadConfig(format!(
                    "length {len} before block {b} is below the pool window"
                )));
            }
            len = (len - p.pool_window) / p.pool_stride + 1;
        }
        Ok(len)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::BadConfig(m.to_string()));
        let (p, a) = (&self.profiler, &self.attention);
        if self.feature_len == 0 || !self.feature_len.is_multiple_of(FIELDS_PER_SEGMENT) {
            return bad("feature_len must be a positive multiple of 8");
        }
        if self.n_labels < 2 {
            return bad("need at least one monitored label plus the unmonitored slot");
        }
        if p.blocks == 0
            || p.kernel == 0
            || p.pool_window == 0
            || p.pool_stride == 0
            || p.channels == 0
        {
            return bad("profiler sizes must be positive");
        }
        if a.heads == 0 || p.channels % a.heads != 0 {
            return bad("channels must be divisible by heads");
        }
        if a.m == 0 || a.mlp_ratio == 0 {
            return bad("m and mlp_ratio must be positive");
        }
        if !(0.0..1.0).contains(&p.dropout)
            || !(0.0..1.0).contains(&a.dropout)
            || !(0.0..=1.0).contains(&a.drop_path)
        {
            return bad("dropout rates out of range");
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0)
            || self.bn_eps <= 0.0
            || a.ln_eps <= 0.0
        {
            return bad("normalization constants out of range");
        }
        self.seq_len().map(|_| ())
    }

    fn trunk_count(&self) -> usize {
        if self.ensemble {
            self.n_labels
        } else {
            1
        }
    }
}

/// Independent per-label probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PredictionVector(Vec<f64>);

impl PredictionVector {
    pub fn new(probs: Vec<f64>) -> Result<Self, ModelError> {
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(ModelError::BadConfig(format!(
                "probability {p} outside [0, 1]"
            )));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Labels whose probability reaches `theta`, ascending.
pub fn predict_set(pred: &PredictionVector, theta: f64) -> Result<Vec<usize>, ModelError> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(ModelError::BadThreshold(theta));
    }
    Ok(pred
        .0
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= theta)
        .map(|(i, _)| i)
        .collect())
}

#[derive(Clone, Debug)]
struct Bn {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Debug)]
struct ConvBlock {
    w1: usize,
    bn1: Bn,
    w2: usize,
    bn2: Bn,
    proj: Option<usize>,
}

#[derive(Clone, Debug)]
struct AttnLayer {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln_g: usize,
    ln_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct Trunk {
    blocks: Vec<ConvBlock>,
    layers: Vec<AttnLayer>,
    head_w: usize,
    head_b: usize,
}

/// Running batch-norm statistics of one layer.
#[derive(Clone, Debug, PartialEq)]
struct Running {
    mean: Vec<f64>,
    var: Vec<f64>,
}

struct Builder<'r> {
    names: Vec<String>,
    params: Vec<Tensor>,
    running: Vec<Running>,
    rng: &'r mut SeededRng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> usize {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        self.add(name, t)
    }

    fn bn(&mut self, prefix: &str, c: usize) -> Bn {
        let gamma = self.add(format!("{prefix}.gamma"), Tensor::ones(&[c]));
        let beta = self.add(format!("{prefix}.beta"), Tensor::zeros(&[c]));
        self.running.push(Running {
            mean: vec![0.0; c],
            var: vec![1.0; c],
        });
        Bn {
            gamma,
            beta,
            stats: self.running.len() - 1,
        }
    }

    fn conv(&mut self, name: String, cout: usize, cin: usize, k: usize) -> usize {
        self.uniform(name, &[cout, cin, k], (6.0 / (cin * k) as f64).sqrt())
    }

    fn linear(&mut self, name: String, fan_in: usize, fan_out: usize) -> usize {
        self.uniform(
            name,
            &[fan_in, fan_out],
            (6.0 / (fan_in + fan_out) as f64).sqrt(),
        )
    }

    fn trunk(&mut self, t: usize, cfg: &ModelConfig, outputs: usize) -> Trunk {
        let (p, a) = (&cfg.profiler, &cfg.attention);
        let c = p.channels;
        let mut blocks = Vec::with_capacity(p.blocks);
        for b in 0..p.blocks {
            let cin = if b == 0 { 1 } else { c };
            let pre = format!("t{t}.block{b}");
            blocks.push(ConvBlock {
                w1: self.conv(format!("{pre}.conv1"), c, cin, p.kernel),
                bn1: self.bn(&format!("{pre}.bn1"), c),
                w2: self.conv(format!("{pre}.conv2"), c, c, p.kernel),
                bn2: self.bn(&format!("{pre}.bn2"), c),
                proj: (cin != c).then(|| self.conv(format!("{pre}.proj"), c, cin, 1)),
            });
        }
        let hidden = c * a.mlp_ratio;
        let mut layers = Vec::with_capacity(a.layers);
        for l in 0..a.layers {
            let pre = format!("t{t}.attn{l}");
            layers.push(AttnLayer {
                wq: self.linear(format!("{pre}.wq"), c, c),
                wk: self.linear(format!("{pre}.wk"), c, c),
                wv: self.linear(format!("{pre}.wv"), c, c),
                wo: self.linear(format!("{pre}.wo"), c, c),
                ln_g: self.add(format!("{pre}.ln.gain"), Tensor::ones(&[c])),
                ln_b: self.add(format!("{pre}.ln.bias"), Tensor::zeros(&[c])),
                w1: self.linear(format!("{pre}.mlp.w1"), c, hidden),
                b1: self.add(format!("{pre}.mlp.b1"), Tensor::zeros(&[hidden])),
                w2: self.linear(format!("{pre}.mlp.w2"), hidden, c),
                b2: self.add(format!("{pre}.mlp.b2"), Tensor::zeros(&[c])),
            });
        }
        let head_w = self.linear(format!("t{t}.head.w"), c, outputs);
        let head_b = self.add(format!("t{t}.head.b"), Tensor::zeros(&[outputs]));
        Trunk {
            blocks,
            layers,
            head_w,
            head_b,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TransWfModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    running: Vec<Running>,
    trunks: Vec<Trunk>,
    /// Per-field (mean, std) when scaling is `Standardize`.
    scaler: Option<Vec<(f64, f64)>>,
}

/// Forward-pass state: parameter vars, mode, dropout RNG and the batch
/// statistics gathered for the running averages.
struct Pass<'g, 'r> {
    vars: Vec<Var<'g>>,
    training: bool,
    rng: Option<&'r mut SeededRng>,
    stats: Vec<(usize, BatchStats)>,
}

impl<'g> Pass<'g, '_> {
    fn dropout(&mut self, x: Var<'g>, rate: f64) -> Result<Var<'g>, TensorError> {
        match (&mut self.rng, self.training) {
            (Some(rng), true) => x.dropout(rate, rng, true),
            _ => Ok(x),
        }
    }

    fn drop_path(&mut self, x: Var<'g>, rate: f64) -> Result<Var<'g>, TensorError> {
        match (&mut self.rng, self.training) {
            (Some(rng), true) => x.drop_path(rate, rng, true),
            _ => Ok(x),
        }
    }
}

impl TransWfModel {
    /// Fresh model with weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut b = Builder {
            names: Vec::new(),
            params: Vec::new(),
            running: Vec::new(),
            rng: &mut rng,
        };
        let outputs = if config.ensemble { 1 } else { config.n_labels };
        let trunks = (0..config.trunk_count())
            .map(|t| b.trunk(t, &config, outputs))
            .collect();
        let (names, params, running) = (b.names, b.params, b.running);
        Ok(Self {
            config,
            names,
            params,
            running,
            trunks,
            scaler: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Fits the standardization statistics; a no-op for other scalings.
    pub fn fit_scaler(&mut self, features: &[FeatureVector]) {
        if self.config.scaling != FeatureScaling::Standardize {
            return;
        }
        let mut stats = Vec::with_capacity(FIELDS_PER_SEGMENT);
        for field in 0..FIELDS_PER_SEGMENT {
            let values = || {
                features
                    .iter()
                    .flat_map(|f| f.0.iter().skip(field).step_by(FIELDS_PER_SEGMENT))
            };
            let n = values().count().max(1) as f64;
            let mean = values().sum::<f64>() / n;
            let var = values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = if var > 0.0 { var.sqrt() } else { 1.0 };
            stats.push((mean, std));
        }
        self.scaler = Some(stats);
    }

    /// The model input for one feature vector.
    pub fn scale_features(&self, f: &FeatureVector) -> Result<Vec<f64>, ModelError> {
        if f.0.len() != self.config.feature_len {
            return Err(
                TensorError::shape("features", &[f.0.len()], &[self.config.feature_len]).into(),
            );
        }
        Ok(match (self.config.scaling, &self.scaler) {
            (FeatureScaling::None, _) => f.0.clone(),
            (FeatureScaling::Log1p, _) => f.0.iter().map(|v| v.ln_1p()).collect(),
            (FeatureScaling::Standardize, Some(s)) => {
                f.0.iter()
                    .enumerate()
                    .map(|(i, v)| (v - s[i % FIELDS_PER_SEGMENT].0) / s[i % FIELDS_PER_SEGMENT].1)
                    .collect()
            }
            (FeatureScaling::Standardize, None) => {
                return Err(ModelError::BadConfig(
                    "standardization used before fit_scaler".into(),
                ))
            }
        })
    }

    fn batch_tensor(&self, rows: &[Vec<f64>]) -> Result<Tensor, ModelError> {
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Ok(Tensor::new(
            &[rows.len(), 1, self.config.feature_len],
            data,
        )?)
    }

    fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> Vec<Var<'g>> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect()
    }

    fn batch_norm<'g>(
        &self,
        pass: &mut Pass<'g, '_>,
        x: Var<'g>,
        bn: &Bn,
    ) -> Result<Var<'g>, TensorError> {
        let (gamma, beta) = (pass.vars[bn.gamma], pass.vars[bn.beta]);
        let run = &self.running[bn.stats];
        let mode = if pass.training {
            BatchNormMode::Train
        } else {
            BatchNormMode::Eval {
                mean: &run.mean,
                var: &run.var,
            }
        };
        let (y, stats) = x.batch_norm(&gamma, &beta, mode, self.config.bn_eps)?;
        if let Some(s) = stats {
            pass.stats.push((bn.stats, s));
        }
        Ok(y)
    }

    /// `[B, 1, L]` → `[B, S, C]`.
    fn profile<'g>(
        &self,
        pass: &mut Pass<'g, '_>,
        trunk: &Trunk,
        x: Var<'g>,
    ) -> Result<Var<'g>, TensorError> {
        let p = &self.config.profiler;
        let mut h = x;
        for blk in &trunk.blocks {
            let y = h.conv1d(&pass.vars[blk.w1], Padding::Same)?;
            let y = self.batch_norm(pass, y, &blk.bn1)?.relu();
            let y = y.conv1d(&pass.vars[blk.w2], Padding::Same)?;
            let y = self.batch_norm(pass, y, &blk.bn2)?;
            let skip = match blk.proj {
                Some(w) => h.conv1d(&pass.vars[w], Padding::Same)?,
                None => h,
            };
            let y = y
                .add(&skip)?
                .relu()
                .maxpool1d(p.pool_window, p.pool_stride)?;
            h = pass.dropout(y, p.dropout)?;
        }
        h.transpose()
    }

    fn attend<'g>(
        &self,
        pass: &mut Pass<'g, '_>,
        trunk: &Trunk,
        x: Var<'g>,
    ) -> Result<Var<'g>, TensorError> {
        let a = &self.config.attention;
        let mut x = x;
        if a.positional_encoding {
            let s = x.shape();
            let pe = sinusoidal_encoding(s[1], s[2]);
            let tiled = Tensor::from_fn(&s, |i| pe.data()[i % pe.numel()]);
            x = x.add(&x.graph().constant(tiled))?;
        }
        for l in &trunk.layers {
            let v = &pass.vars;
            let w = MultiHeadWeights {
                wq: v[l.wq],
                wk: v[l.wk],
                wv: v[l.wv],
                wo: v[l.wo],
            };
            let (ln_g, ln_b) = (v[l.ln_g], v[l.ln_b]);
            let (w1, b1, w2, b2) = (v[l.w1], v[l.b1], v[l.w2], v[l.b2]);
            let branch = multihead_topm(&x, &w, a.heads, a.m, a.mask_value)?;
            let branch = pass.dropout(branch, a.dropout)?;
            let branch = pass.drop_path(branch, a.drop_path)?;
            let x1 = x.add(&branch)?.layer_norm(&ln_g, &ln_b, a.ln_eps)?;
            let mlp = x1
                .matmul(&w1)?
                .add_bias(&b1)?
                .relu()
                .matmul(&w2)?
                .add_bias(&b2)?;
            let mlp = pass.drop_path(mlp, a.drop_path)?;
            x = x1.add(&mlp)?;
        }
        Ok(x)
    }

    fn logits<'g>(&self, pass: &mut Pass<'g, '_>, x: Var<'g>) -> Result<Var<'g>, TensorError> {
        let mut outs = Vec::with_capacity(self.trunks.len());
        for trunk in &self.trunks {
            let h = self.profile(pass, trunk, x)?;
            let h = self.attend(pass, trunk, h)?;
            let pooled = h.mean_dim(1)?;
            outs.push(
                pooled
                    .matmul(&pass.vars[trunk.head_w])?
                    .add_bias(&pass.vars[trunk.head_b])?,
            );
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            Var::concat_last(&outs)
        }
    }

    /// Local feature sequence `[S, C]` of one input, inference mode, first
    /// trunk.
    pub fn local_profile(&self, features: &FeatureVector) -> Result<Tensor, ModelError> {
        let g = Graph::new();
        let mut pass = Pass {
            vars: self.bind(&g, false),
            training: false,
            rng: None,
            stats: Vec::new(),
        };
        let x = g.constant(self.batch_tensor(&[self.scale_features(features)?])?);
        let h = self.profile(&mut pass, &self.trunks[0], x)?;
        let s = h.shape();
        Ok(h.to_tensor().reshaped(&s[1..])?)
    }

    /// Inference-mode probabilities for a batch.
    pub fn predict(&self, features: &[FeatureVector]) -> Result<Vec<PredictionVector>, ModelError> {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(features.len());
        for chunk in features.chunks(CHUNK) {
            let rows = chunk
                .iter()
                .map(|f| self.scale_features(f))
                .collect::<Result<Vec<_>, _>>()?;
            let g = Graph::new();
            let mut pass = Pass {
                vars: self.bind(&g, false),
                training: false,
                rng: None,
                stats: Vec::new(),
            };
            let z = self
                .logits(&mut pass, g.constant(self.batch_tensor(&rows)?))?
                .to_tensor();
            for row in z.data().chunks_exact(self.config.n_labels) {
                out.push(PredictionVector(
                    row.iter().map(|&v| crate::tensor::sigmoid(v)).collect(),
                ));
            }
        }
        Ok(out)
    }

    pub fn identify(&self, features: &FeatureVector) -> Result<PredictionVector, ModelError> {
        Ok(self.predict(std::slice::from_ref(features))?.remove(0))
    }

    /// Mean per-label BCE of a training-mode forward pass on already scaled
    /// rows, and its gradient for every parameter. Batch statistics are
    /// returned for [`TransWfModel::update_running`].
    pub fn loss_and_grads(
        &self,
        rows: &[Vec<f64>],
        targets: &Tensor,
        rng: &mut SeededRng,
    ) -> Result<(f64, Vec<Tensor>, Vec<(usize, BatchStats)>), ModelError> {
        let g = Graph::new();
        let mut pass = Pass {
            vars: self.bind(&g, true),
            training: true,
            rng: Some(rng),
            stats: Vec::new(),
        };
        let z = self.logits(&mut pass, g.constant(self.batch_tensor(rows)?))?;
        let loss = z.bce_with_logits(targets)?;
        let value = loss.value().item();
        let mut grads = g.backward(loss)?;
        let vars = std::mem::take(&mut pass.vars);
        Ok((
            value,
            vars.into_iter().map(|v| grads.take(v)).collect(),
            pass.stats,
        ))
    }

    /// Mean per-label BCE in inference mode.
    pub fn eval_loss(&self, rows: &[Vec<f64>], targets: &Tensor) -> Result<f64, ModelError> {
        let g = Graph::new();
        let mut pass = Pass {
            vars: self.bind(&g, false),
            training: false,
            rng: None,
            stats: Vec::new(),
        };
        let z = self.logits(&mut pass, g.constant(self.batch_tensor(rows)?))?;
        let loss = z.bce_with_logits(targets)?.value().item();
        Ok(loss)
    }

    pub fn update_running(&mut self, stats: &[(usize, BatchStats)]) {
        let mom = self.config.bn_momentum;
        for (i, s) in stats {
            let run = &mut self.running[*i];
            for (r, b) in run.mean.iter_mut().zip(&s.mean) {
                *r = (1.0 - mom) * *r + mom * b;
            }
            for (r, b) in run.var.iter_mut().zip(&s.var) {
                *r = (1.0 - mom) * *r + mom * b;
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let meta = serde_json::json!({ "model": self.config, "scaler": self.scaler });
        let mut named: Vec<(String, &Tensor)> =
            self.names.iter().cloned().zip(&self.params).collect();
        let running: Vec<(String, Tensor)> = self
            .running
            .iter()
            .enumerate()
            .flat_map(|(i, r)| {
                [
                    (
                        format!("running{i}.mean"),
                        Tensor::new(&[r.mean.len()], r.mean.clone()).expect("1-d"),
                    ),
                    (
                        format!("running{i}.var"),
                        Tensor::new(&[r.var.len()], r.var.clone()).expect("1-d"),
                    ),
                ]
            })
            .collect();
        named.extend(running.iter().map(|(n, t)| (n.clone(), t)));
        checkpoint::save(path, meta, &named)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let (meta, tensors) = checkpoint::load(path)?;
        let config: ModelConfig = serde_json::from_value(meta["model"].clone())?;
        let scaler: Option<Vec<(f64, f64)>> = serde_json::from_value(meta["scaler"].clone())?;
        let mut model = Self::new(config, 0)?;
        let expected = model.params.len() + 2 * model.running.len();
        if tensors.len() != expected {
            return Err(ModelError::Checkpoint(format!(
                "expected {expected} tensors, found {}",
                tensors.len()
            )));
        }
        let (params, running) = tensors.split_at(model.params.len());
        for ((name, slot), (got_name, t)) in model.names.iter().zip(&mut model.params).zip(params) {
            if name != got_name || slot.shape() != t.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {got_name} does not match {name}"
                )));
            }
            *slot = t.clone();
        }
        for (r, pair) in model.running.iter_mut().zip(running.chunks_exact(2)) {
            if pair[0].1.numel() != r.mean.len() || pair[1].1.numel() != r.var.len() {
                return Err(ModelError::Checkpoint(format!(
                    "running stats {} have the wrong size",
                    pair[0].0
                )));
            }
            r.mean = pair[0].1.data().to_vec();
            r.var = pair[1].1.data().to_vec();
        }
        model.scaler = scaler;
        Ok(model)
    }
}
