//! Conditional variational sequence models.
//!
//! Two roles share one architecture: the forward model generates the
//! current-step perception slice, the inverse model the current-step control
//! slice. Both condition on a ten-step window in which the generated slice is
//! masked out at the current step, and are trained with a reconstruction loss
//! plus a KL term computed at the current step only.

use std::ops::Range;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{self, ParameterSet, TapeParams};
use crate::preprocess::{ConditionWindow, Dataset, TargetSlice, CONTROL_DIM, STEP_DIM, WINDOW_LEN};
use crate::rng::derive_rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Which slice of a step vector the model generates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Generates the perception slice (environment plus vehicle state).
    Forward,
    /// Generates the control slice.
    Inverse,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Forward => "forward",
            Role::Inverse => "inverse",
        }
    }

    /// Columns of the generated slice within a step vector of `per_step` dims.
    /// The control slice is always the trailing pair; the perception slice is
    /// everything before it.
    pub fn target_range(self, per_step: usize) -> Range<usize> {
        match self {
            Role::Forward => 0..per_step - CONTROL_DIM,
            Role::Inverse => per_step - CONTROL_DIM..per_step,
        }
    }

    /// The dataset slice a model of this role trains against.
    pub fn dataset_target(self) -> TargetSlice {
        match self {
            Role::Forward => TargetSlice::Perception,
            Role::Inverse => TargetSlice::Control,
        }
    }
}

/// How the latent is conditioned during training and sampled at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvaeMode {
    /// Standard-normal noise is injected into the encoder input during
    /// training and inference; the latent always comes from the encoder heads.
    NoiseInput,
    /// The ground-truth target slice is injected into the encoder input during
    /// training; inference skips the encoder and samples the latent from the
    /// standard-normal prior.
    Standard,
}

impl CvaeMode {
    pub fn name(self) -> &'static str {
        match self {
            CvaeMode::NoiseInput => "noise_input",
            CvaeMode::Standard => "standard",
        }
    }
}

/// Architecture hyperparameters. The latent width always equals the generated
/// slice width, so it is derived from `role` and `per_step_dim` rather than
/// stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvaeConfig {
    pub role: Role,
    pub per_step_dim: usize,
    pub window_len: usize,
    pub linear_width: usize,
    pub hidden_size: usize,
    pub beta: f64,
    pub mode: CvaeMode,
    /// Scale the reparameterization noise by the variance instead of the
    /// standard deviation.
    pub variance_scaled_noise: bool,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            role: Role::Inverse,
            per_step_dim: STEP_DIM,
            window_len: WINDOW_LEN,
            linear_width: 256,
            hidden_size: 256,
            beta: 0.01,
            mode: CvaeMode::NoiseInput,
            variance_scaled_noise: false,
        }
    }
}

impl CvaeConfig {
    pub fn for_role(role: Role) -> Self {
        Self {
            role,
            ..Self::default()
        }
    }

    /// Width of the generated slice, which is also the latent width.
    pub fn generated_dim(&self) -> usize {
        self.role.target_range(self.per_step_dim).len()
    }

    /// Per-step input width: condition plus the injected slot.
    pub fn input_dim(&self) -> usize {
        self.per_step_dim + self.generated_dim()
    }

    pub fn target_range(&self) -> Range<usize> {
        self.role.target_range(self.per_step_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_step_dim <= CONTROL_DIM {
            return Err(Error::Config(format!(
                "per_step_dim must exceed {CONTROL_DIM}, got {}",
                self.per_step_dim
            )));
        }
        if self.window_len < 2 {
            return Err(Error::Config(format!(
                "window_len must be at least 2, got {}",
                self.window_len
            )));
        }
        if self.linear_width == 0 || self.hidden_size == 0 {
            return Err(Error::Config(
                "linear_width and hidden_size must be positive".into(),
            ));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::Config(format!(
                "beta must be finite and non-negative, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// A batch of condition windows held as contiguous f64 rows, one step vector
/// per (window, step) pair.
#[derive(Clone, Debug)]
pub struct WindowBatch {
    per_step: usize,
    window_len: usize,
    count: usize,
    data: Vec<f64>,
}

impl WindowBatch {
    pub fn from_flat(per_step: usize, window_len: usize, data: Vec<f64>) -> Self {
        assert!(per_step > 0 && window_len > 0);
        assert_eq!(data.len() % (per_step * window_len), 0);
        let count = data.len() / (per_step * window_len);
        Self {
            per_step,
            window_len,
            count,
            data,
        }
    }

    /// Gather the given dataset rows into one batch, widening to f64.
    pub fn from_dataset(dataset: &Dataset, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * WINDOW_LEN * STEP_DIM);
        for &i in indices {
            data.extend(dataset.window(i).iter().map(|&v| f64::from(v)));
        }
        Self::from_flat(STEP_DIM, WINDOW_LEN, data)
    }

    pub fn from_windows(windows: &[&ConditionWindow]) -> Self {
        let mut data = Vec::with_capacity(windows.len() * WINDOW_LEN * STEP_DIM);
        for w in windows {
            data.extend_from_slice(w.flat());
        }
        Self::from_flat(STEP_DIM, WINDOW_LEN, data)
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn per_step(&self) -> usize {
        self.per_step
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn step_values(&self, window: usize, step: usize) -> &[f64] {
        let off = (window * self.window_len + step) * self.per_step;
        &self.data[off..off + self.per_step]
    }

    fn step_values_mut(&mut self, window: usize, step: usize) -> &mut [f64] {
        let off = (window * self.window_len + step) * self.per_step;
        &mut self.data[off..off + self.per_step]
    }

    /// Copy the given columns of every window's current step, one row each.
    pub fn current_slice(&self, range: &Range<usize>) -> Tensor {
        let last = self.window_len - 1;
        let mut data = Vec::with_capacity(self.count * range.len());
        for b in 0..self.count {
            data.extend_from_slice(&self.step_values(b, last)[range.clone()]);
        }
        Tensor::new(vec![self.count, range.len()], data).expect("slice geometry")
    }

    /// Extract the full per-step target history for the loss contract.
    pub fn target_rows(&self, range: &Range<usize>) -> TargetSequence {
        let n = range.len();
        let mut data = Vec::with_capacity(self.count * self.window_len * n);
        for b in 0..self.count {
            for k in 0..self.window_len {
                data.extend_from_slice(&self.step_values(b, k)[range.clone()]);
            }
        }
        TargetSequence {
            n,
            window_len: self.window_len,
            count: self.count,
            data,
        }
    }

    /// Overwrite the given columns of every window's current step, e.g. to
    /// condition the inverse model on generated perception.
    pub fn replace_current_slice(&mut self, range: &Range<usize>, values: &Tensor) {
        assert_eq!(values.shape(), [self.count, range.len()]);
        let last = self.window_len - 1;
        for b in 0..self.count {
            let row = &values.data()[b * range.len()..(b + 1) * range.len()];
            self.step_values_mut(b, last)[range.clone()].copy_from_slice(row);
        }
    }
}

/// Target-slice values for every step of a window batch. The training loss
/// reads only the current step; earlier rows exist so that contract can be
/// checked.
#[derive(Clone, Debug)]
pub struct TargetSequence {
    n: usize,
    window_len: usize,
    count: usize,
    data: Vec<f64>,
}

impl TargetSequence {
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn width(&self) -> usize {
        self.n
    }

    /// Current-step rows as a [batch, n] tensor.
    pub fn current(&self) -> Tensor {
        let last = self.window_len - 1;
        let stride = self.window_len * self.n;
        let mut data = Vec::with_capacity(self.count * self.n);
        for b in 0..self.count {
            let off = b * stride + last * self.n;
            data.extend_from_slice(&self.data[off..off + self.n]);
        }
        Tensor::new(vec![self.count, self.n], data).expect("sequence geometry")
    }

    /// Mutable view over all rows, earlier steps included.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Node ids of the pieces of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub mse: NodeId,
    pub kl: NodeId,
    pub generated: NodeId,
}

/// Draw a standard-normal tensor from the given stream.
pub fn standard_normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape geometry")
}

/// Encoder, decoder and their shared assembly logic.
#[derive(Debug)]
pub struct CvaeModel {
    config: CvaeConfig,
    params: ParameterSet,
}

impl CvaeModel {
    /// Fresh parameters drawn from the model-init stream of `seed`.
    pub fn init(config: CvaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = derive_rng(seed, "model-init", 0);
        let n = config.generated_dim();
        let w = config.linear_width;
        let h = config.hidden_size;
        let d = config.input_dim();

        let mut params = ParameterSet::new();
        params.init_linear("enc.lin1", d, w, &mut rng);
        params.init_lstm("enc.lstm", w, h, &mut rng);
        params.init_linear("enc.lin2", h, w, &mut rng);
        params.init_linear("enc.mu", w, n, &mut rng);
        params.init_linear("enc.logvar", w, n, &mut rng);
        params.init_lstm("dec.lstm", d, h, &mut rng);
        params.init_linear("dec.lin1", h, w, &mut rng);
        params.init_linear("dec.lin2", w, w, &mut rng);
        params.init_linear("dec.lin3", w, w, &mut rng);
        params.init_linear("dec.out", w, n, &mut rng);
        Ok(Self { config, params })
    }

    /// Adopt existing parameters, checking they match the config's layout.
    pub fn from_parts(config: CvaeConfig, params: ParameterSet) -> Result<Self> {
        let reference = Self::init(config.clone(), 0)?;
        if !reference.params.same_layout(&params) {
            return Err(Error::Config(
                "checkpoint parameters do not match the model layout".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &CvaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    fn check_batch(&self, batch: &WindowBatch) -> Result<()> {
        if batch.per_step != self.config.per_step_dim || batch.window_len != self.config.window_len
        {
            return Err(Error::ShapeMismatch {
                context: "window batch geometry",
                left: vec![batch.window_len, batch.per_step],
                right: vec![self.config.window_len, self.config.per_step_dim],
            });
        }
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(())
    }

    fn check_latent(&self, name: &'static str, t: &Tensor, batch: usize) -> Result<()> {
        if t.shape() != [batch, self.config.generated_dim()] {
            return Err(Error::ShapeMismatch {
                context: name,
                left: t.shape().to_vec(),
                right: vec![batch, self.config.generated_dim()],
            });
        }
        Ok(())
    }

    /// Condition values of one step as a [batch, per_step] tensor. The
    /// generated slice is zeroed at the current step so the model never sees
    /// what it must produce.
    fn condition_step(&self, batch: &WindowBatch, step: usize) -> Tensor {
        let per_step = self.config.per_step_dim;
        let mask = step == self.config.window_len - 1;
        let range = self.config.target_range();
        let mut data = Vec::with_capacity(batch.len() * per_step);
        for b in 0..batch.len() {
            let start = data.len();
            data.extend_from_slice(batch.step_values(b, step));
            if mask {
                data[start + range.start..start + range.end].fill(0.0);
            }
        }
        Tensor::new(vec![batch.len(), per_step], data).expect("step geometry")
    }

    /// Full encoder input for one step: condition columns, then the injected
    /// slot, which carries `injected` at the current step and zeros before it.
    fn assembled_step(&self, batch: &WindowBatch, step: usize, injected: &Tensor) -> Tensor {
        let per_step = self.config.per_step_dim;
        let n = self.config.generated_dim();
        let d = self.config.input_dim();
        let cond = self.condition_step(batch, step);
        let current = step == self.config.window_len - 1;
        let mut data = vec![0.0; batch.len() * d];
        for b in 0..batch.len() {
            let row = &mut data[b * d..(b + 1) * d];
            row[..per_step].copy_from_slice(&cond.data()[b * per_step..(b + 1) * per_step]);
            if current {
                row[per_step..].copy_from_slice(&injected.data()[b * n..(b + 1) * n]);
            }
        }
        Tensor::new(vec![batch.len(), d], data).expect("assembled geometry")
    }

    /// Record the whole assembled window on the tape as constant leaves.
    fn assembled_leaves(&self, tape: &mut Tape, batch: &WindowBatch, injected: &Tensor) -> Vec<NodeId> {
        (0..self.config.window_len)
            .map(|k| tape.leaf(self.assembled_step(batch, k, injected)))
            .collect()
    }

    /// Run the encoder over an assembled window. Returns the per-step mean and
    /// log-variance heads, one [batch, n] node per step, no output activation.
    pub fn encode(
        &self,
        tape: &mut Tape,
        ids: &TapeParams,
        steps: &[NodeId],
    ) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
        let batch = tape.value(steps[0]).rows();
        let h = self.config.hidden_size;
        let mut hidden = tape.leaf(Tensor::zeros(&[batch, h]));
        let mut cell = tape.leaf(Tensor::zeros(&[batch, h]));
        let mut mus = Vec::with_capacity(steps.len());
        let mut logvars = Vec::with_capacity(steps.len());
        for &step in steps {
            let a1 = nn::linear_forward(tape, ids, "enc.lin1", step)?;
            let g1 = tape.gelu(a1);
            let (next_hidden, next_cell) = nn::lstm_step(tape, ids, "enc.lstm", g1, hidden, cell)?;
            hidden = next_hidden;
            cell = next_cell;
            let a2 = nn::linear_forward(tape, ids, "enc.lin2", hidden)?;
            let g2 = tape.gelu(a2);
            mus.push(nn::linear_forward(tape, ids, "enc.mu", g2)?);
            logvars.push(nn::linear_forward(tape, ids, "enc.logvar", g2)?);
        }
        Ok((mus, logvars))
    }

    /// z = mu + scale(logvar) * eps, where the scale is the standard deviation
    /// or, with `variance_scaled_noise`, the variance.
    pub fn reparameterize(
        &self,
        tape: &mut Tape,
        mu: NodeId,
        logvar: NodeId,
        eps: NodeId,
    ) -> Result<NodeId> {
        let scale = if self.config.variance_scaled_noise {
            tape.exp(logvar)
        } else {
            let half = tape.scale(logvar, 0.5);
            tape.exp(half)
        };
        let noise = tape.mul(scale, eps)?;
        tape.add(mu, noise)
    }

    /// Run the decoder over the condition window with `z` injected at the
    /// current step and return the generated [batch, n] slice, sigmoid range.
    pub fn decode_current(
        &self,
        tape: &mut Tape,
        ids: &TapeParams,
        batch: &WindowBatch,
        z: NodeId,
    ) -> Result<NodeId> {
        let rows = batch.len();
        let h = self.config.hidden_size;
        let last = self.config.window_len - 1;
        let mut hidden = tape.leaf(Tensor::zeros(&[rows, h]));
        let mut cell = tape.leaf(Tensor::zeros(&[rows, h]));
        let zero_slot = Tensor::zeros(&[rows, self.config.generated_dim()]);
        for k in 0..self.config.window_len {
            let x = if k == last {
                let cond = tape.leaf(self.condition_step(batch, k));
                tape.concat_cols(cond, z)?
            } else {
                tape.leaf(self.assembled_step(batch, k, &zero_slot))
            };
            let (next_hidden, next_cell) = nn::lstm_step(tape, ids, "dec.lstm", x, hidden, cell)?;
            hidden = next_hidden;
            cell = next_cell;
        }
        let a1 = nn::linear_forward(tape, ids, "dec.lin1", hidden)?;
        let g1 = tape.gelu(a1);
        let a2 = nn::linear_forward(tape, ids, "dec.lin2", g1)?;
        let g2 = tape.gelu(a2);
        let a3 = nn::linear_forward(tape, ids, "dec.lin3", g2)?;
        let g3 = tape.gelu(a3);
        let out = nn::linear_forward(tape, ids, "dec.out", g3)?;
        Ok(tape.sigmoid(out))
    }

    /// Reconstruction-plus-KL loss against an explicit current-step target.
    /// `noise` fills the encoder's injected slot in noise-input mode and is
    /// ignored in standard mode, where the ground-truth target is injected.
    pub fn loss_with_current_target(
        &self,
        tape: &mut Tape,
        ids: &TapeParams,
        batch: &WindowBatch,
        target: &Tensor,
        noise: &Tensor,
        eps: &Tensor,
        beta: f64,
    ) -> Result<LossNodes> {
        self.check_batch(batch)?;
        self.check_latent("loss target", target, batch.len())?;
        self.check_latent("loss noise", noise, batch.len())?;
        self.check_latent("loss eps", eps, batch.len())?;

        let injected = match self.config.mode {
            CvaeMode::NoiseInput => noise,
            CvaeMode::Standard => target,
        };
        let steps = self.assembled_leaves(tape, batch, injected);
        let (mus, logvars) = self.encode(tape, ids, &steps)?;
        let last = self.config.window_len - 1;
        let (mu_t, logvar_t) = (mus[last], logvars[last]);

        let eps_leaf = tape.leaf(eps.clone());
        let z = self.reparameterize(tape, mu_t, logvar_t, eps_leaf)?;
        let generated = self.decode_current(tape, ids, batch, z)?;

        let target_leaf = tape.leaf(target.clone());
        let mse = nn::mse_loss(tape, generated, target_leaf)?;
        let kl = nn::kl_divergence(tape, mu_t, logvar_t)?;
        let weighted = tape.scale(kl, beta);
        let total = tape.add(mse, weighted)?;
        Ok(LossNodes {
            total,
            mse,
            kl,
            generated,
        })
    }

    /// Training loss over a batch. Only the current-step rows of `targets`
    /// enter the computation; earlier rows are carried solely so that contract
    /// is observable.
    pub fn training_loss(
        &self,
        tape: &mut Tape,
        ids: &TapeParams,
        batch: &WindowBatch,
        targets: &TargetSequence,
        noise: &Tensor,
        eps: &Tensor,
        beta: f64,
    ) -> Result<LossNodes> {
        if targets.count != batch.len()
            || targets.n != self.config.generated_dim()
            || targets.window_len != self.config.window_len
        {
            return Err(Error::ShapeMismatch {
                context: "target sequence geometry",
                left: vec![targets.count, targets.window_len, targets.n],
                right: vec![
                    batch.len(),
                    self.config.window_len,
                    self.config.generated_dim(),
                ],
            });
        }
        let current = targets.current();
        self.loss_with_current_target(tape, ids, batch, &current, noise, eps, beta)
    }

    /// Deterministic generation from explicit noise draws. In noise-input mode
    /// `noise` feeds the encoder and `eps` the reparameterization; in standard
    /// mode the encoder is skipped and `eps` is the prior draw itself.
    pub fn generate_batch(
        &self,
        batch: &WindowBatch,
        noise: &Tensor,
        eps: &Tensor,
    ) -> Result<Tensor> {
        self.check_batch(batch)?;
        self.check_latent("generate noise", noise, batch.len())?;
        self.check_latent("generate eps", eps, batch.len())?;

        let mut tape = Tape::new();
        let ids = TapeParams::leaf_all(&mut tape, &self.params);
        let z = match self.config.mode {
            CvaeMode::NoiseInput => {
                let steps = self.assembled_leaves(&mut tape, batch, noise);
                let (mus, logvars) = self.encode(&mut tape, &ids, &steps)?;
                let last = self.config.window_len - 1;
                let eps_leaf = tape.leaf(eps.clone());
                self.reparameterize(&mut tape, mus[last], logvars[last], eps_leaf)?
            }
            CvaeMode::Standard => tape.leaf(eps.clone()),
        };
        let generated = self.decode_current(&mut tape, &ids, batch, z)?;
        let out = tape.value(generated).clone();
        out.ensure_finite("generated slice")?;
        Ok(out)
    }

    /// Stochastic generation; draws every needed noise tensor from `rng`.
    pub fn generate(&self, batch: &WindowBatch, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let shape = [batch.len(), self.config.generated_dim()];
        let (noise, eps) = match self.config.mode {
            CvaeMode::NoiseInput => (
                standard_normal(rng, &shape),
                standard_normal(rng, &shape),
            ),
            CvaeMode::Standard => (Tensor::zeros(&shape), standard_normal(rng, &shape)),
        };
        self.generate_batch(batch, &noise, &eps)
    }
}

pub const META_FORMAT: &str = "TDGMETA1";

/// Sidecar describing a saved model: architecture, training provenance and
/// the fingerprint of the dataset it was fitted to.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub format: String,
    pub config: CvaeConfig,
    pub dataset_fingerprint: String,
    pub epochs_trained: u64,
    pub best_val_loss: f64,
}

impl ModelMeta {
    pub fn new(config: CvaeConfig, dataset_fingerprint: String) -> Self {
        Self {
            format: META_FORMAT.to_string(),
            config,
            dataset_fingerprint,
            epochs_trained: 0,
            best_val_loss: f64::INFINITY,
        }
    }

    pub fn expect_role(&self, role: Role) -> Result<()> {
        if self.config.role != role {
            return Err(Error::RoleMismatch {
                expected: role.name().to_string(),
                found: self.config.role.name().to_string(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let meta: ModelMeta =
            serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        if meta.format != META_FORMAT {
            return Err(Error::Format(format!(
                "unsupported model meta format {:?}",
                meta.format
            )));
        }
        meta.config.validate()?;
        Ok(meta)
    }
}

/// Write parameters and sidecar next to each other.
pub fn save_model(model: &CvaeModel, meta: &ModelMeta, ckpt: &Path, meta_path: &Path) -> Result<()> {
    checkpoint::save(ckpt, model.params(), None)?;
    meta.save(meta_path)
}

/// Load a model whose architecture is described by its sidecar.
pub fn load_model(ckpt: &Path, meta_path: &Path) -> Result<(CvaeModel, ModelMeta)> {
    let meta = ModelMeta::load(meta_path)?;
    let (params, _) = checkpoint::load(ckpt)?;
    let model = CvaeModel::from_parts(meta.config.clone(), params)?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng;

    fn toy_config(role: Role) -> CvaeConfig {
        CvaeConfig {
            role,
            per_step_dim: 8,
            window_len: 10,
            linear_width: 4,
            hidden_size: 4,
            beta: 0.01,
            mode: CvaeMode::NoiseInput,
            variance_scaled_noise: false,
        }
    }

    fn toy_batch(config: &CvaeConfig, rows: usize, seed: u64) -> WindowBatch {
        let mut rng = derive_rng(seed, "toy-batch", 0);
        let len = rows * config.window_len * config.per_step_dim;
        let data = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
        WindowBatch::from_flat(config.per_step_dim, config.window_len, data)
    }

    fn noise_pair(config: &CvaeConfig, rows: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = derive_rng(seed, "toy-noise", 0);
        let shape = [rows, config.generated_dim()];
        let noise = standard_normal(&mut rng, &shape);
        let eps = standard_normal(&mut rng, &shape);
        (noise, eps)
    }

    #[test]
    fn init_is_deterministic_and_layout_checked() {
        let config = toy_config(Role::Inverse);
        let a = CvaeModel::init(config.clone(), 7).unwrap();
        let b = CvaeModel::init(config.clone(), 7).unwrap();
        for ((name_a, ta), (name_b, tb)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(name_a, name_b);
            assert_eq!(ta.data(), tb.data());
        }
        let c = CvaeModel::init(config.clone(), 8).unwrap();
        let differs = a
            .params()
            .iter()
            .zip(c.params().iter())
            .any(|((_, ta), (_, tc))| ta.data() != tc.data());
        assert!(differs, "different seeds should give different parameters");

        assert!(CvaeModel::from_parts(config, a.params().clone()).is_ok());
        let forward_config = toy_config(Role::Forward);
        let err = CvaeModel::from_parts(forward_config, a.params().clone()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn roles_pin_slice_and_latent_widths() {
        let inverse = toy_config(Role::Inverse);
        assert_eq!(inverse.generated_dim(), 2);
        assert_eq!(inverse.target_range(), 6..8);
        assert_eq!(inverse.input_dim(), 10);

        let forward = toy_config(Role::Forward);
        assert_eq!(forward.generated_dim(), 6);
        assert_eq!(forward.target_range(), 0..6);
        assert_eq!(forward.input_dim(), 14);

        let real = CvaeConfig::for_role(Role::Forward);
        assert_eq!(real.generated_dim(), 184);
        let real_inv = CvaeConfig::for_role(Role::Inverse);
        assert_eq!(real_inv.generated_dim(), 2);
    }

    #[test]
    fn encoder_returns_per_step_heads() {
        let config = toy_config(Role::Inverse);
        let model = CvaeModel::init(config.clone(), 3).unwrap();
        let batch = toy_batch(&config, 3, 11);
        let (noise, _) = noise_pair(&config, 3, 12);

        let mut tape = Tape::new();
        let ids = TapeParams::leaf_all(&mut tape, model.params());
        let steps = model.assembled_leaves(&mut tape, &batch, &noise);
        assert_eq!(steps.len(), 10);
        assert_eq!(tape.value(steps[0]).shape(), [3, 10]);
        let (mus, logvars) = model.encode(&mut tape, &ids, &steps).unwrap();
        assert_eq!(mus.len(), 10);
        assert_eq!(logvars.len(), 10);
        for (&m, &l) in mus.iter().zip(&logvars) {
            assert_eq!(tape.value(m).shape(), [3, 2]);
            assert_eq!(tape.value(l).shape(), [3, 2]);
        }
    }

    #[test]
    fn injected_slot_is_zero_before_current_step() {
        let config = toy_config(Role::Inverse);
        let model = CvaeModel::init(config.clone(), 3).unwrap();
        let batch = toy_batch(&config, 2, 5);
        let injected = Tensor::full(&[2, 2], 0.75);
        for k in 0..9 {
            let step = model.assembled_step(&batch, k, &injected);
            for b in 0..2 {
                assert_eq!(&step.data()[b * 10 + 8..b * 10 + 10], &[0.0, 0.0]);
            }
        }
        let current = model.assembled_step(&batch, 9, &injected);
        for b in 0..2 {
            // Condition's generated slice masked, injected slot filled.
            assert_eq!(&current.data()[b * 10 + 6..b * 10 + 8], &[0.0, 0.0]);
            assert_eq!(&current.data()[b * 10 + 8..b * 10 + 10], &[0.75, 0.75]);
        }
    }

    #[test]
    fn zeroed_parameters_give_zero_loss_on_half_targets() {
        let config = toy_config(Role::Inverse);
        let mut model = CvaeModel::init(config.clone(), 3).unwrap();
        for (_, tensor) in model.params_mut().iter_mut() {
            tensor.data_mut().fill(0.0);
        }
        let batch = toy_batch(&config, 4, 21);
        let (noise, eps) = noise_pair(&config, 4, 22);
        let target = Tensor::full(&[4, 2], 0.5);

        let mut tape = Tape::new();
        let ids = TapeParams::leaf_all(&mut tape, model.params());
        let loss = model
            .loss_with_current_target(&mut tape, &ids, &batch, &target, &noise, &eps, 0.3)
            .unwrap();
        assert_eq!(tape.value(loss.mse).data()[0], 0.0);
        assert_eq!(tape.value(loss.kl).data()[0], 0.0);
        assert_eq!(tape.value(loss.total).data()[0], 0.0);
    }

    #[test]
    fn reparameterize_matches_hand_values() {
        let mut config = toy_config(Role::Inverse);
        let model = CvaeModel::init(config.clone(), 3).unwrap();
        let mut tape = Tape::new();
        let mu = tape.leaf(Tensor::full(&[1, 1], 1.0));
        let logvar = tape.leaf(Tensor::full(&[1, 1], 4.0f64.ln()));
        let eps = tape.leaf(Tensor::full(&[1, 1], 0.5));
        let z = model.reparameterize(&mut tape, mu, logvar, eps).unwrap();
        // sd = exp(ln(4)/2) = 2, so z = 1 + 2 * 0.5.
        assert!((tape.value(z).data()[0] - 2.0).abs() < 1e-12);

        config.variance_scaled_noise = true;
        let model = CvaeModel::init(config, 3).unwrap();
        let mut tape = Tape::new();
        let mu = tape.leaf(Tensor::full(&[1, 1], 1.0));
        let logvar = tape.leaf(Tensor::full(&[1, 1], 4.0f64.ln()));
        let eps = tape.leaf(Tensor::full(&[1, 1], 0.5));
        let z = model.reparameterize(&mut tape, mu, logvar, eps).unwrap();
        // Variance scaling multiplies eps by exp(ln(4)) = 4 instead.
        assert!((tape.value(z).data()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_eps_collapses_to_the_mean() {
        let config = toy_config(Role::Inverse);
        let model = CvaeModel::init(config.clone(), 9).unwrap();
        let mut rng = derive_rng(4, "test", 0);
        let mu_t = Tensor::rand_uniform(&mut rng, &[3, 2], -1.0, 1.0);
        let lv_t = Tensor::rand_uniform(&mut rng, &[3, 2], -1.0, 1.0);
        let mut tape = Tape::new();
        let mu = tape.leaf(mu_t.clone());
        let logvar = tape.leaf(lv_t);
        let eps = tape.leaf(Tensor::zeros(&[3, 2]));
        let z = model.reparameterize(&mut tape, mu, logvar, eps).unwrap();
        assert_eq!(tape.value(z).data(), mu_t.data());
    }

    #[test]
    fn generated_output_lies_strictly_inside_unit_interval() {
        let config = toy_config(Role::Forward);
        let model = CvaeModel::init(config.clone(), 17).unwrap();
        let batch = toy_batch(&config, 5, 31);
        let mut rng = derive_rng(32, "gen", 0);
        let out = model.generate(&batch, &mut rng).unwrap();
        assert_eq!(out.shape(), [5, 6]);
        for &v in out.data() {
            assert!(v > 0.0 && v < 1.0, "sigmoid output escaped (0,1): {v}");
        }
    }

    #[test]
    fn generation_is_deterministic_given_the_stream() {
        let config = toy_config(Role::Inverse);
        let model = CvaeModel::init(config.clone(), 17).unwrap();
        let batch = toy_batch(&config, 2, 31);
        let a = model.generate(&batch, &mut derive_rng(9, "gen", 0)).unwrap();
        let b = model.generate(&batch, &mut derive_rng(9, "gen", 0)).unwrap();
        assert_eq!(a.data(), b.data());
        let c = model.generate(&batch, &mut derive_rng(9, "gen", 1)).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn masked_current_target_never_reaches_generation() {
        let config = toy_config(Role::Inverse);
        let model = CvaeModel::init(config.clone(), 23).unwrap();
        let mut batch = toy_batch(&config, 3, 41);
        let (noise, eps) = noise_pair(&config, 3, 42);
        let before = model.generate_batch(&batch, &noise, &eps).unwrap();

        // Scribble over the control slice at the current step only.
        let garbage = Tensor::full(&[3, 2], 123.456);
        batch.replace_current_slice(&(6..8), &garbage);
        let after = model.generate_batch(&batch, &noise, &eps).unwrap();

        let before_bits: Vec<u64> = before.data().iter().map(|v| v.to_bits()).collect();
        let after_bits: Vec<u64> = after.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before_bits, after_bits);
    }

    #[test]
    fn training_loss_reads_only_current_step_targets() {
        let config = toy_config(Role::Inverse);
        let model = CvaeModel::init(config.clone(), 29).unwrap();
        let batch = toy_batch(&config, 4, 51);
        let (noise, eps) = noise_pair(&config, 4, 52);
        let targets = batch.target_rows(&config.target_range());

        let eval = |t: &TargetSequence| -> u64 {
            let mut tape = Tape::new();
            let ids = TapeParams::leaf_all(&mut tape, model.params());
            let loss = model
                .training_loss(&mut tape, &ids, &batch, t, &noise, &eps, config.beta)
                .unwrap();
            tape.value(loss.total).data()[0].to_bits()
        };

        let baseline = eval(&targets);
        let mut scrambled = targets.clone();
        let n = scrambled.width();
        let per_window = 10 * n;
        for b in 0..4 {
            // Overwrite every step except the last.
            for v in &mut scrambled.data_mut()[b * per_window..b * per_window + 9 * n] {
                *v = -77.0;
            }
        }
        assert_eq!(eval(&scrambled), baseline);
    }

    #[test]
    fn self_target_with_zero_beta_gives_zero_loss() {
        let config = toy_config(Role::Inverse);
        let model = CvaeModel::init(config.clone(), 37).unwrap();
        let batch = toy_batch(&config, 3, 61);
        let (noise, eps) = noise_pair(&config, 3, 62);

        let placeholder = batch.current_slice(&config.target_range());
        let mut tape = Tape::new();
        let ids = TapeParams::leaf_all(&mut tape, model.params());
        let first = model
            .loss_with_current_target(&mut tape, &ids, &batch, &placeholder, &noise, &eps, 0.0)
            .unwrap();
        let own = tape.value(first.generated).clone();

        let mut tape = Tape::new();
        let ids = TapeParams::leaf_all(&mut tape, model.params());
        let second = model
            .loss_with_current_target(&mut tape, &ids, &batch, &own, &noise, &eps, 0.0)
            .unwrap();
        assert_eq!(tape.value(second.total).data()[0], 0.0);
    }

    #[test]
    fn standard_mode_inference_skips_the_encoder() {
        let mut config = toy_config(Role::Inverse);
        config.mode = CvaeMode::Standard;
        let model = CvaeModel::init(config.clone(), 43).unwrap();
        let batch = toy_batch(&config, 2, 71);
        let (noise_a, eps) = noise_pair(&config, 2, 72);
        let (noise_b, _) = noise_pair(&config, 2, 73);
        let a = model.generate_batch(&batch, &noise_a, &eps).unwrap();
        let b = model.generate_batch(&batch, &noise_b, &eps).unwrap();
        assert_eq!(a.data(), b.data(), "prior sampling must ignore encoder noise");
    }

    #[test]
    fn condition_changes_propagate_through_the_window() {
        let config = toy_config(Role::Inverse);
        let model = CvaeModel::init(config.clone(), 47).unwrap();
        let batch = toy_batch(&config, 1, 81);
        let (noise, eps) = noise_pair(&config, 1, 82);
        let before = model.generate_batch(&batch, &noise, &eps).unwrap();

        let mut altered = batch.clone();
        altered.step_values_mut(0, 0)[0] += 0.25;
        let after = model.generate_batch(&altered, &noise, &eps).unwrap();
        assert_ne!(before.data(), after.data(), "earliest step should still matter");
    }

    #[test]
    fn batch_helpers_roundtrip_slices() {
        let config = toy_config(Role::Inverse);
        let mut batch = toy_batch(&config, 2, 91);
        let range = config.target_range();

        let current = batch.current_slice(&range);
        assert_eq!(current.shape(), [2, 2]);
        assert_eq!(current.data()[0], batch.step_values(0, 9)[6]);
        assert_eq!(current.data()[3], batch.step_values(1, 9)[7]);

        let targets = batch.target_rows(&range);
        assert_eq!(targets.current().data(), current.data());

        let replacement = Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        batch.replace_current_slice(&range, &replacement);
        assert_eq!(&batch.step_values(0, 9)[6..8], &[0.1, 0.2]);
        assert_eq!(&batch.step_values(1, 9)[6..8], &[0.3, 0.4]);
        // Earlier steps untouched.
        let fresh = toy_batch(&config, 2, 91);
        assert_eq!(batch.step_values(0, 8), fresh.step_values(0, 8));
    }

    #[test]
    fn config_validation_names_bad_fields() {
        let mut config = toy_config(Role::Inverse);
        config.per_step_dim = 2;
        assert!(matches!(config.validate(), Err(Error::Config(_))));

        let mut config = toy_config(Role::Inverse);
        config.window_len = 1;
        assert!(matches!(config.validate(), Err(Error::Config(_))));

        let mut config = toy_config(Role::Inverse);
        config.beta = f64::NAN;
        assert!(matches!(config.validate(), Err(Error::Config(_))));

        let mut config = toy_config(Role::Inverse);
        config.linear_width = 0;
        assert!(matches!(config.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn model_files_roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let config = toy_config(Role::Inverse);
        let model = CvaeModel::init(config.clone(), 53).unwrap();
        let mut meta = ModelMeta::new(config.clone(), "sha256:feedbeef".into());
        meta.epochs_trained = 12;
        meta.best_val_loss = 0.125;

        let ckpt = dir.path().join("inverse.ckpt");
        let meta_path = dir.path().join("inverse.meta.json");
        save_model(&model, &meta, &ckpt, &meta_path).unwrap();

        let (loaded, loaded_meta) = load_model(&ckpt, &meta_path).unwrap();
        assert_eq!(loaded_meta.config, config);
        assert_eq!(loaded_meta.epochs_trained, 12);
        assert_eq!(loaded_meta.best_val_loss, 0.125);
        loaded_meta.expect_role(Role::Inverse).unwrap();
        assert!(matches!(
            loaded_meta.expect_role(Role::Forward),
            Err(Error::RoleMismatch { .. })
        ));

        let batch = toy_batch(&config, 2, 99);
        let (noise, eps) = noise_pair(&config, 2, 98);
        let a = model.generate_batch(&batch, &noise, &eps).unwrap();
        let b = loaded.generate_batch(&batch, &noise, &eps).unwrap();
        let a_bits: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
        let b_bits: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a_bits, b_bits);
    }
}
