//! Toy multimodal encoder: one small tower per modality mapping raw features
//! into a shared `out_dim` space, trained with a symmetric InfoNCE loss on
//! aligned pairs.
//!
//! Parameters are flattened in a fixed order (per tower: hidden weights,
//! hidden bias, output weights, output bias; then `log_tau`) so gradients can
//! be checked coordinate by coordinate.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingBatch, RecordId};
use crate::error::{Error, Result};
use crate::world::{read_f64_file, write_f64_file, AnnotationSet, UnalignedPool};

pub const DEFAULT_TEMPERATURE: f64 = 1.0 / 0.07;
pub const MIN_TEMPERATURE: f64 = 1e-2;
pub const MAX_TEMPERATURE: f64 = 1e2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub out_dim: usize,
    /// 0: affine tower; 1: tanh hidden layer followed by an affine output.
    #[serde(default)]
    pub depth: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_temperature")]
    pub init_temperature: f64,
}

fn default_hidden() -> usize {
    32
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.out_dim == 0 {
            return Err(Error::InvalidConfig("model out_dim must be positive".into()));
        }
        if self.depth > 1 {
            return Err(Error::InvalidConfig("model depth must be 0 or 1".into()));
        }
        if self.depth == 1 && self.hidden_dim == 0 {
            return Err(Error::InvalidConfig("hidden_dim must be positive".into()));
        }
        if !(MIN_TEMPERATURE..=MAX_TEMPERATURE).contains(&self.init_temperature) {
            return Err(Error::InvalidConfig(format!(
                "init_temperature must lie in [{MIN_TEMPERATURE}, {MAX_TEMPERATURE}]"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub learn_temperature: bool,
}

fn yes() -> bool {
    true
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "batch_size must be at least 2 (the loss needs negatives)".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Affine layer `y = W x + b`, `W` stored row-major as `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
        }
    }

    fn random(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (in_dim as f64).sqrt();
        Self {
            in_dim,
            out_dim,
            w: (0..in_dim * out_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                .collect(),
            b: vec![0.0; out_dim],
        }
    }

    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for (o, y) in out.iter_mut().enumerate() {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            *y = self.b[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    /// Accumulates parameter gradients into `grad` and writes the input gradient.
    fn backward(&self, x: &[f64], gy: &[f64], grad: &mut Dense, gx: Option<&mut [f64]>) {
        for (o, &g) in gy.iter().enumerate() {
            let row = &mut grad.w[o * self.in_dim..(o + 1) * self.in_dim];
            for (gw, v) in row.iter_mut().zip(x) {
                *gw += g * v;
            }
            grad.b[o] += g;
        }
        if let Some(gx) = gx {
            gx.fill(0.0);
            for (o, &g) in gy.iter().enumerate() {
                let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
                for (acc, w) in gx.iter_mut().zip(row) {
                    *acc += w * g;
                }
            }
        }
    }

    fn len(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    pub hidden: Option<Dense>,
    pub output: Dense,
}

impl Tower {
    pub fn raw_dim(&self) -> usize {
        self.hidden.as_ref().unwrap_or(&self.output).in_dim
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.hidden.iter().chain(std::iter::once(&self.output))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.hidden.iter_mut().chain(std::iter::once(&mut self.output))
    }

    fn zeros_like(&self) -> Self {
        Self {
            hidden: self.hidden.as_ref().map(|h| Dense::zeros(h.in_dim, h.out_dim)),
            output: Dense::zeros(self.output.in_dim, self.output.out_dim),
        }
    }

    /// Returns (hidden activations, output).
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut y = vec![0.0; self.output.out_dim];
        match &self.hidden {
            Some(h) => {
                let mut a = vec![0.0; h.out_dim];
                h.forward(x, &mut a);
                a.iter_mut().for_each(|v| *v = v.tanh());
                self.output.forward(&a, &mut y);
                (a, y)
            }
            None => {
                self.output.forward(x, &mut y);
                (Vec::new(), y)
            }
        }
    }

    fn backward(&self, x: &[f64], hidden_act: &[f64], gy: &[f64], grad: &mut Tower) {
        match (&self.hidden, &mut grad.hidden) {
            (Some(h), Some(gh)) => {
                let mut ga = vec![0.0; h.out_dim];
                self.output
                    .backward(hidden_act, gy, &mut grad.output, Some(&mut ga));
                for (g, a) in ga.iter_mut().zip(hidden_act) {
                    *g *= 1.0 - a * a;
                }
                h.backward(x, &ga, gh, None);
            }
            _ => self.output.backward(x, gy, &mut grad.output, None),
        }
    }
}

/// One encoder tower per modality plus a learnable logit scale `tau`
/// (stored as `log_tau`).
#[derive(Debug, Clone, PartialEq)]
pub struct TwoTowerModel {
    pub towers: Vec<Tower>,
    pub log_tau: f64,
}

impl TwoTowerModel {
    /// Gaussian init scaled by `1/sqrt(fan_in)`, zero biases.
    pub fn random(raw_dims: &[usize], config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let towers = raw_dims
            .iter()
            .map(|&raw| match config.depth {
                0 => Tower {
                    hidden: None,
                    output: Dense::random(raw, config.out_dim, &mut rng),
                },
                _ => Tower {
                    hidden: Some(Dense::random(raw, config.hidden_dim, &mut rng)),
                    output: Dense::random(config.hidden_dim, config.out_dim, &mut rng),
                },
            })
            .collect();
        Ok(Self {
            towers,
            log_tau: config.init_temperature.ln(),
        })
    }

    /// All-zero parameters; useful as a starting point for hand-built models.
    pub fn zeros(raw_dims: &[usize], config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let towers = raw_dims
            .iter()
            .map(|&raw| Tower {
                hidden: (config.depth == 1).then(|| Dense::zeros(raw, config.hidden_dim)),
                output: Dense::zeros(
                    if config.depth == 1 { config.hidden_dim } else { raw },
                    config.out_dim,
                ),
            })
            .collect();
        Ok(Self {
            towers,
            log_tau: config.init_temperature.ln(),
        })
    }

    pub fn num_modalities(&self) -> usize {
        self.towers.len()
    }

    pub fn out_dim(&self) -> usize {
        self.towers[0].output.out_dim
    }

    pub fn depth(&self) -> usize {
        usize::from(self.towers[0].hidden.is_some())
    }

    pub fn raw_dims(&self) -> Vec<usize> {
        self.towers.iter().map(Tower::raw_dim).collect()
    }

    pub fn temperature(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn param_count(&self) -> usize {
        self.towers
            .iter()
            .flat_map(Tower::layers)
            .map(Dense::len)
            .sum::<usize>()
            + 1
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in self.towers.iter().flat_map(Tower::layers) {
            out.extend_from_slice(&layer.w);
            out.extend_from_slice(&layer.b);
        }
        out.push(self.log_tau);
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                found: params.len(),
            });
        }
        let mut rest = params;
        for layer in self.towers.iter_mut().flat_map(Tower::layers_mut) {
            let (w, tail) = rest.split_at(layer.w.len());
            layer.w.copy_from_slice(w);
            let (b, tail) = tail.split_at(layer.b.len());
            layer.b.copy_from_slice(b);
            rest = tail;
        }
        self.log_tau = rest[0];
        Ok(())
    }

    /// Mask over [`params`](Self::params): true for weight matrices (the
    /// coordinates weight decay applies to).
    fn weight_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.param_count());
        for layer in self.towers.iter().flat_map(Tower::layers) {
            mask.extend(std::iter::repeat_n(true, layer.w.len()));
            mask.extend(std::iter::repeat_n(false, layer.b.len()));
        }
        mask.push(false);
        mask
    }

    fn tower(&self, modality: usize) -> Result<&Tower> {
        self.towers.get(modality).ok_or(Error::InvalidArgument(format!(
            "model has no modality {modality}"
        )))
    }

    /// Embeds raw rows (flat, row-major) of `modality`. Rows are not normalized.
    pub fn encode(&self, modality: usize, ids: Vec<RecordId>, raw: &[f64]) -> Result<EmbeddingBatch> {
        let tower = self.tower(modality)?;
        let raw_dim = tower.raw_dim();
        if raw.len() != ids.len() * raw_dim {
            return Err(Error::DimensionMismatch {
                expected: ids.len() * raw_dim,
                found: raw.len(),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * self.out_dim());
        for x in raw.chunks_exact(raw_dim) {
            data.extend(tower.forward(x).1);
        }
        EmbeddingBatch::from_flat(ids, self.out_dim(), data)
    }

    /// Embeds the given records of a pool modality.
    pub fn encode_records(
        &self,
        pool: &UnalignedPool,
        modality: usize,
        ids: &[RecordId],
    ) -> Result<EmbeddingBatch> {
        let feats = pool.modality(modality);
        let mut raw = Vec::with_capacity(ids.len() * feats.raw_dim());
        for &r in ids {
            if r >= feats.len() {
                return Err(Error::UnknownRecord { modality, id: r });
            }
            raw.extend_from_slice(feats.row(r));
        }
        self.encode(modality, ids.to_vec(), &raw)
    }

    pub fn save(&self, json_path: &Path) -> Result<()> {
        let blob = json_path.with_extension("bin");
        let header = CheckpointHeader {
            format_version: 1,
            raw_dims: self.raw_dims(),
            out_dim: self.out_dim(),
            depth: self.depth(),
            hidden_dim: self.towers[0].hidden.as_ref().map_or(0, |h| h.out_dim),
            log_tau: self.log_tau,
            param_count: self.param_count(),
            params_file: blob
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
        };
        write_f64_file(&blob, &self.params())?;
        let text = serde_json::to_string_pretty(&header)?;
        fs::write(json_path, text).map_err(|e| Error::io(json_path, e))
    }

    pub fn load(json_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
        let header: CheckpointHeader = serde_json::from_str(&text)?;
        let blob: PathBuf = json_path.with_file_name(&header.params_file);
        let params = read_f64_file(&blob)?;
        let config = ModelConfig {
            out_dim: header.out_dim,
            depth: header.depth,
            hidden_dim: header.hidden_dim.max(1),
            init_temperature: DEFAULT_TEMPERATURE,
        };
        let mut model = Self::zeros(&header.raw_dims, &config)?;
        if params.len() != header.param_count {
            return Err(Error::DimensionMismatch {
                expected: header.param_count,
                found: params.len(),
            });
        }
        model.set_params(&params)?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("checkpoint parameters"));
        }
        Ok(model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    raw_dims: Vec<usize>,
    out_dim: usize,
    depth: usize,
    hidden_dim: usize,
    log_tau: f64,
    param_count: usize,
    params_file: String,
}

/// Aligned training tuples: row `i` of every modality belongs to pair `ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPairs {
    ids: Vec<usize>,
    raw_dims: Vec<usize>,
    features: Vec<Vec<f64>>,
}

impl TrainingPairs {
    pub fn new(ids: Vec<usize>, raw_dims: Vec<usize>, features: Vec<Vec<f64>>) -> Result<Self> {
        if raw_dims.len() != features.len() || raw_dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "training pairs need one feature block per modality (at least 2)".into(),
            ));
        }
        for (d, f) in raw_dims.iter().zip(&features) {
            if f.len() != d * ids.len() {
                return Err(Error::DimensionMismatch {
                    expected: d * ids.len(),
                    found: f.len(),
                });
            }
        }
        Ok(Self {
            ids,
            raw_dims,
            features,
        })
    }

    /// Pairs for every annotated tuple, in annotation order.
    pub fn from_annotations(pool: &UnalignedPool, annotations: &AnnotationSet) -> Result<Self> {
        let m = pool.num_modalities();
        let tuples = annotations.tuples();
        let mut features = vec![Vec::new(); m];
        for t in tuples {
            for (k, f) in features.iter_mut().enumerate() {
                f.extend_from_slice(pool.modality(k).row(t.records[k]));
            }
        }
        Self::new((0..tuples.len()).collect(), pool.raw_dims(), features)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn num_modalities(&self) -> usize {
        self.raw_dims.len()
    }

    pub fn modality_rows(&self, k: usize) -> &[f64] {
        &self.features[k]
    }

    pub fn subset(&self, positions: &[usize]) -> Self {
        let features = self
            .features
            .iter()
            .zip(&self.raw_dims)
            .map(|(f, &d)| {
                positions
                    .iter()
                    .flat_map(|&p| f[p * d..(p + 1) * d].iter().copied())
                    .collect()
            })
            .collect();
        Self {
            ids: positions.iter().map(|&p| self.ids[p]).collect(),
            raw_dims: self.raw_dims.clone(),
            features,
        }
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Symmetric InfoNCE over the `tau`-scaled cosine-similarity matrix of each
/// modality pair, averaged over all unordered pairs; returns the loss and its
/// gradient in [`TwoTowerModel::params`] order.
pub fn contrastive_loss(model: &TwoTowerModel, pairs: &TrainingPairs) -> Result<(f64, Vec<f64>)> {
    let n = pairs.len();
    if n < 2 {
        return Err(Error::TooFewPairs(n));
    }
    let mut seen = HashSet::with_capacity(n);
    for &id in pairs.ids() {
        if !seen.insert(id) {
            return Err(Error::DuplicateId(id));
        }
    }
    let m = model.num_modalities();
    if pairs.num_modalities() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            found: pairs.num_modalities(),
        });
    }
    for k in 0..m {
        if pairs.raw_dims[k] != model.towers[k].raw_dim() {
            return Err(Error::DimensionMismatch {
                expected: model.towers[k].raw_dim(),
                found: pairs.raw_dims[k],
            });
        }
    }
    let d = model.out_dim();
    let tau = model.temperature();

    // forward: hidden activations, norms and unit embeddings per modality
    let mut hidden = vec![Vec::with_capacity(n); m];
    let mut norms = vec![Vec::with_capacity(n); m];
    let mut units = vec![Vec::with_capacity(n * d); m];
    for k in 0..m {
        let dim = pairs.raw_dims[k];
        for x in pairs.features[k].chunks_exact(dim) {
            let (a, y) = model.towers[k].forward(x);
            let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::ZeroNorm);
            }
            units[k].extend(y.iter().map(|v| v / norm));
            norms[k].push(norm);
            hidden[k].push(a);
        }
    }

    let pair_count = m * (m - 1) / 2;
    let pair_weight = 1.0 / pair_count as f64;
    let mut loss = 0.0;
    let mut g_units = vec![vec![0.0; n * d]; m];
    let mut g_log_tau = 0.0;
    let mut sims = vec![0.0; n * n];
    let mut g_logits = vec![0.0; n * n];
    for a in 0..m {
        for b in a + 1..m {
            let (ua, ub) = (&units[a], &units[b]);
            for i in 0..n {
                for j in 0..n {
                    sims[i * n + j] = ua[i * d..(i + 1) * d]
                        .iter()
                        .zip(&ub[j * d..(j + 1) * d])
                        .map(|(x, y)| x * y)
                        .sum();
                }
            }
            let scale = pair_weight / (2.0 * n as f64);
            g_logits.fill(0.0);
            let mut pair_loss = 0.0;
            for i in 0..n {
                let row = (0..n).map(|j| tau * sims[i * n + j]);
                let lse = log_sum_exp(row);
                pair_loss += lse - tau * sims[i * n + i];
                for j in 0..n {
                    g_logits[i * n + j] += scale * (tau * sims[i * n + j] - lse).exp();
                }
                g_logits[i * n + i] -= scale;
            }
            for j in 0..n {
                let col = (0..n).map(|i| tau * sims[i * n + j]);
                let lse = log_sum_exp(col);
                pair_loss += lse - tau * sims[j * n + j];
                for i in 0..n {
                    g_logits[i * n + j] += scale * (tau * sims[i * n + j] - lse).exp();
                }
                g_logits[j * n + j] -= scale;
            }
            loss += pair_weight * pair_loss / (2.0 * n as f64);

            for i in 0..n {
                for j in 0..n {
                    let g = g_logits[i * n + j];
                    if g == 0.0 {
                        continue;
                    }
                    g_log_tau += g * sims[i * n + j];
                    for c in 0..d {
                        g_units[a][i * d + c] += tau * g * ub[j * d + c];
                        g_units[b][j * d + c] += tau * g * ua[i * d + c];
                    }
                }
            }
        }
    }
    // d logit / d log_tau = tau * sim
    g_log_tau *= tau;

    let mut grads: Vec<Tower> = model.towers.iter().map(Tower::zeros_like).collect();
    for k in 0..m {
        let dim = pairs.raw_dims[k];
        for i in 0..n {
            let u = &units[k][i * d..(i + 1) * d];
            let gu = &g_units[k][i * d..(i + 1) * d];
            let proj: f64 = u.iter().zip(gu).map(|(x, y)| x * y).sum();
            let gy: Vec<f64> = u
                .iter()
                .zip(gu)
                .map(|(x, g)| (g - x * proj) / norms[k][i])
                .collect();
            let x = &pairs.features[k][i * dim..(i + 1) * dim];
            model.towers[k].backward(x, &hidden[k][i], &gy, &mut grads[k]);
        }
    }
    let mut flat = Vec::with_capacity(model.param_count());
    for layer in grads.iter().flat_map(Tower::layers) {
        flat.extend_from_slice(&layer.w);
        flat.extend_from_slice(&layer.b);
    }
    flat.push(g_log_tau);
    Ok((loss, flat))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TwoTowerModel,
    /// Full-set loss before training (index 0) and after each epoch.
    pub loss_history: Vec<f64>,
}

/// Minibatch SGD with weight decay on the weight matrices; `log_tau` is
/// clamped so the temperature stays in `[1e-2, 1e2]`. The input model is
/// left untouched.
pub fn train(model: &TwoTowerModel, pairs: &TrainingPairs, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if pairs.len() < 2 {
        return Err(Error::TooFewPairs(pairs.len()));
    }
    let mut model = model.clone();
    let mut params = model.params();
    let mask = model.weight_mask();
    let tau_index = params.len() - 1;
    let (lo, hi) = (MIN_TEMPERATURE.ln(), MAX_TEMPERATURE.ln());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut loss_history = Vec::with_capacity(config.epochs + 1);
    loss_history.push(contrastive_loss(&model, pairs)?.0);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in minibatches(&order, config.batch_size) {
            let sub = pairs.subset(batch);
            let (_, grad) = contrastive_loss(&model, &sub)?;
            for (i, (p, g)) in params.iter_mut().zip(&grad).enumerate() {
                if i == tau_index && !config.learn_temperature {
                    continue;
                }
                let decay = if mask[i] { config.weight_decay * *p } else { 0.0 };
                *p -= config.learning_rate * (g + decay);
            }
            params[tau_index] = params[tau_index].clamp(lo, hi);
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::NonFinite("parameters after SGD step"));
            }
            model.set_params(&params)?;
        }
        loss_history.push(contrastive_loss(&model, pairs)?.0);
    }
    Ok(TrainOutcome {
        model,
        loss_history,
    })
}

/// Chunks of `size`; a trailing singleton is folded into the previous chunk.
fn minibatches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = (start + size).min(order.len());
        if order.len() - end == 1 {
            end = order.len();
        }
        out.push(&order[start..end]);
        start = end;
    }
    out
}
