//! Masked VQ-VAE over FVTC matrices.
//!
//! A flattened `[36 x (D+1)]` matrix passes through a two-layer encoder to a
//! `[G x L]` latent grid. Each of the `G` rows snaps to its nearest codebook
//! entry and a mirrored decoder reconstructs the unmasked matrix. The loss is
//!
//! ```text
//! total = recon + beta * commit + codebook
//! recon    = mean((x_hat - x)^2)                  over every entry
//! commit   = mean_rows ||z_e - sg(e)||^2
//! codebook = mean_rows ||sg(z_e) - e||^2
//! ```
//!
//! Gradients reach the encoder through the straight-through estimator.

use ndarray::Array2;
use rand::seq::{index::sample, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fvtc::FvtcMatrix;
use crate::seed;
use crate::tensor::nn::{exact_count_mask, init_linear, linear, uniform_fan_in};
use crate::tensor::{
    adam_step, AdamConfig, Checkpoint, OptimizerState, ParameterSet, PlateauConfig, PlateauScheduler, Tape, Var,
};

pub const CODEBOOK: &str = "codebook";
pub const EMBEDDING_DIM: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqvaeConfig {
    /// Rows of the input matrix (channel pairs).
    pub pairs: usize,
    #[serde(rename = "D")]
    pub max_delay: usize,
    pub hidden: usize,
    #[serde(rename = "G")]
    pub groups: usize,
    #[serde(rename = "L")]
    pub latent_dim: usize,
    #[serde(rename = "K")]
    pub codes: usize,
    pub beta: f64,
    #[serde(rename = "p")]
    pub mask_fraction: f64,
}

impl Default for VqvaeConfig {
    fn default() -> Self {
        Self {
            pairs: 36,
            max_delay: 50,
            hidden: 256,
            groups: 16,
            latent_dim: 64,
            codes: 256,
            beta: 0.25,
            mask_fraction: 0.25,
        }
    }
}

impl VqvaeConfig {
    pub fn input_len(&self) -> usize {
        self.pairs * (self.max_delay + 1)
    }

    pub fn embedding_len(&self) -> usize {
        self.groups * self.latent_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs == 0 || self.hidden == 0 || self.groups == 0 || self.latent_dim == 0 {
            return Err(Error::invalid("VQ-VAE sizes must be positive"));
        }
        if self.codes < 2 {
            return Err(Error::invalid(format!("codebook needs at least 2 codes, got {}", self.codes)));
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(Error::invalid(format!("mask fraction {} outside [0, 1)", self.mask_fraction)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta {} must be non-negative", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VqLossBreakdown {
    pub reconstruction: f64,
    pub commitment: f64,
    pub codebook: f64,
    pub total: f64,
}

impl VqLossBreakdown {
    fn scaled_sum(items: &[VqLossBreakdown]) -> VqLossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = VqLossBreakdown::default();
        for b in items {
            acc.reconstruction += b.reconstruction / n;
            acc.commitment += b.commitment / n;
            acc.codebook += b.codebook / n;
            acc.total += b.total / n;
        }
        acc
    }
}

/// Codebook entries `[K x L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Array2<f64>,
}

impl Codebook {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if entries.nrows() == 0 {
            return Err(Error::invalid("empty codebook"));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook entries".into()));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.nrows() == 0
    }

    /// Index of the nearest entry by squared distance; ties go to the lowest.
    pub fn nearest(&self, z: &[f64]) -> usize {
        nearest_code(self.entries.as_slice().expect("standard layout"), self.entries.ncols(), z)
    }

    pub fn usage(&self, indices: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.len()];
        indices.iter().for_each(|&i| counts[i] += 1);
        counts
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_code(table: &[f64], l: usize, z: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, row) in table.chunks_exact(l).enumerate() {
        let d = squared_distance(z, row);
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub values: Array2<f64>,
    pub indices: Vec<usize>,
    pub codebook_loss: f64,
    pub commitment_loss: f64,
}

/// Snaps every row of `latents` to its nearest codebook entry.
pub fn quantize(latents: &Array2<f64>, codebook: &Codebook) -> Result<Quantized> {
    if latents.ncols() != codebook.entries.ncols() {
        return Err(Error::shape(
            "quantize",
            format!("latent dim {} vs codebook dim {}", latents.ncols(), codebook.entries.ncols()),
        ));
    }
    let mut values = Array2::zeros(latents.raw_dim());
    let mut indices = Vec::with_capacity(latents.nrows());
    let mut sq = 0.0;
    for (r, z) in latents.rows().into_iter().enumerate() {
        let z = z.to_vec();
        let k = codebook.nearest(&z);
        let e = codebook.entries.row(k);
        sq += squared_distance(&z, e.as_slice().expect("standard layout"));
        values.row_mut(r).assign(&e);
        indices.push(k);
    }
    let loss = sq / latents.nrows().max(1) as f64;
    Ok(Quantized {
        values,
        indices,
        codebook_loss: loss,
        commitment_loss: loss,
    })
}

/// Zeroes exactly `round(p * M)` entries chosen by `seed`; the mask marks them.
pub fn mask_input(matrix: &Array2<f64>, p: f64, seed: u64) -> Result<(Array2<f64>, Vec<bool>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("mask fraction {p} outside [0, 1)")));
    }
    let mask = exact_count_mask(matrix.len(), p, seed);
    let mut out = matrix.as_standard_layout().to_owned();
    for (v, &m) in out.iter_mut().zip(&mask) {
        if m {
            *v = 0.0;
        }
    }
    Ok((out, mask))
}

/// `exp(H)` of the empirical code distribution.
pub fn codebook_perplexity(indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::invalid("perplexity of an empty index list"));
    }
    let max = indices.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; max + 1];
    indices.iter().for_each(|&i| counts[i] += 1);
    let n = indices.len() as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    Ok(h.exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqvaeModel {
    pub config: VqvaeConfig,
    pub params: ParameterSet,
}

/// Tape nodes of one batched forward pass.
pub struct ForwardVars {
    pub latents: Var,
    pub quantized: Var,
    pub reconstruction: Var,
    pub total: Var,
    pub indices: Vec<usize>,
    pub losses: VqLossBreakdown,
}

impl VqvaeModel {
    /// Random fan-in initialization; the codebook starts uniform in
    /// `+-1/sqrt(L)` until [`VqvaeModel::init_codebook_from_data`].
    pub fn new(config: VqvaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let (m, h, e) = (config.input_len(), config.hidden, config.embedding_len());
        init_linear(&mut params, "encoder.fc0", m, h, &mut rng)?;
        init_linear(&mut params, "encoder.fc1", h, e, &mut rng)?;
        params.insert(
            CODEBOOK,
            uniform_fan_in(vec![config.codes, config.latent_dim], config.latent_dim, &mut rng),
        )?;
        init_linear(&mut params, "decoder.fc0", e, h, &mut rng)?;
        init_linear(&mut params, "decoder.fc1", h, m, &mut rng)?;
        Ok(Self { config, params })
    }

    pub fn codebook(&self) -> Codebook {
        let t = self.params.get(CODEBOOK).expect("model has a codebook");
        Codebook {
            entries: Array2::from_shape_vec((t.shape()[0], t.shape()[1]), t.data().to_vec())
                .expect("codebook is 2-D"),
        }
    }

    pub fn check_input(&self, matrix: &Array2<f64>) -> Result<()> {
        let want = (self.config.pairs, self.config.max_delay + 1);
        if matrix.dim() != want {
            return Err(Error::shape(
                "vqvae",
                format!("input {:?}, model expects {want:?}", matrix.dim()),
            ));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("VQ-VAE input".into()));
        }
        Ok(())
    }

    /// Encoder output `[B*G x L]` for flattened inputs `[B x M]`.
    pub fn encode_vars(&self, tape: &mut Tape, inputs: Var) -> Result<Var> {
        let h = linear(tape, &self.params, "encoder.fc0", inputs)?;
        let h = tape.relu(h);
        let z = linear(tape, &self.params, "encoder.fc1", h)?;
        let rows = tape.value(z).len() / self.config.latent_dim;
        tape.reshape(z, vec![rows, self.config.latent_dim])
    }

    /// Reconstruction `[B x M]` from a quantized grid `[B*G x L]`.
    pub fn decode_vars(&self, tape: &mut Tape, quantized: Var) -> Result<Var> {
        let batch = tape.value(quantized).len() / self.config.embedding_len();
        let flat = tape.reshape(quantized, vec![batch, self.config.embedding_len()])?;
        let h = linear(tape, &self.params, "decoder.fc0", flat)?;
        let h = tape.relu(h);
        linear(tape, &self.params, "decoder.fc1", h)
    }

    /// Full forward pass for already-masked `inputs` and unmasked `targets`
    /// (both `[B x M]`, flattened row-major).
    pub fn forward_vars(&self, tape: &mut Tape, inputs: &[f64], targets: &[f64]) -> Result<ForwardVars> {
        let m = self.config.input_len();
        if inputs.len() != targets.len() || inputs.is_empty() || inputs.len() % m != 0 {
            return Err(Error::shape(
                "vqvae",
                format!("{} inputs / {} targets for rows of {m}", inputs.len(), targets.len()),
            ));
        }
        let batch = inputs.len() / m;
        let x = tape.constant(vec![batch, m], inputs.to_vec())?;
        let z_e = self.encode_vars(tape, x)?;
        let codebook = tape.param(&self.params, CODEBOOK)?;
        let l = self.config.latent_dim;
        let table = tape.value(codebook).to_vec();
        let indices: Vec<usize> = tape.value(z_e).chunks_exact(l).map(|z| nearest_code(&table, l, z)).collect();
        let e = tape.gather_rows(codebook, &indices)?;
        let rows = indices.len() as f64;

        let e_sg = tape.stop_grad(e);
        let diff = tape.sub(z_e, e_sg)?;
        let sq = tape.mul(diff, diff)?;
        let commit = tape.sum_all(sq);
        let commit = tape.scale(commit, 1.0 / rows);

        let z_sg = tape.stop_grad(z_e);
        let diff = tape.sub(z_sg, e)?;
        let sq = tape.mul(diff, diff)?;
        let cb = tape.sum_all(sq);
        let cb = tape.scale(cb, 1.0 / rows);

        let e_values = tape.value(e).to_vec();
        let z_q = tape.straight_through(z_e, e_values)?;
        let recon = self.decode_vars(tape, z_q)?;
        let target = tape.constant(vec![batch, m], targets.to_vec())?;
        let diff = tape.sub(recon, target)?;
        let sq = tape.mul(diff, diff)?;
        let rec = tape.mean_all(sq);

        let weighted = tape.scale(commit, self.config.beta);
        let partial = tape.add(rec, weighted)?;
        let total = tape.add(partial, cb)?;
        let losses = VqLossBreakdown {
            reconstruction: tape.scalar(rec),
            commitment: tape.scalar(commit),
            codebook: tape.scalar(cb),
            total: tape.scalar(total),
        };
        Ok(ForwardVars {
            latents: z_e,
            quantized: z_q,
            reconstruction: recon,
            total,
            indices,
            losses,
        })
    }

    /// Latent grids `[G x L]` of unmasked matrices.
    pub fn latents(&self, matrices: &[&Array2<f64>]) -> Result<Vec<Array2<f64>>> {
        let mut tape = Tape::new();
        let flat: Vec<f64> = matrices.iter().flat_map(|m| m.iter().copied()).collect();
        let x = tape.constant(vec![matrices.len(), self.config.input_len()], flat)?;
        let z = self.encode_vars(&mut tape, x)?;
        let per = self.config.embedding_len();
        Ok(tape
            .value(z)
            .chunks_exact(per)
            .map(|c| Array2::from_shape_vec((self.config.groups, self.config.latent_dim), c.to_vec()).unwrap())
            .collect())
    }

    /// Replaces the codebook with `K` encoder output rows sampled without
    /// replacement from `data` (with repetition when fewer rows exist).
    pub fn init_codebook_from_data(&mut self, data: &[&Array2<f64>], seed: u64) -> Result<()> {
        if data.is_empty() {
            return Err(Error::invalid("codebook initialization needs data"));
        }
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for chunk in data.chunks(32) {
            for grid in self.latents(chunk)? {
                rows.extend(grid.rows().into_iter().map(|r| r.to_vec()));
            }
        }
        let k = self.config.codes;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks: Vec<usize> = if rows.len() >= k {
            sample(&mut rng, rows.len(), k).into_vec()
        } else {
            let mut p: Vec<usize> = (0..k).map(|i| i % rows.len()).collect();
            p.shuffle(&mut rng);
            p
        };
        let table = self.params.get_mut(CODEBOOK).expect("model has a codebook");
        let l = self.config.latent_dim;
        for (slot, &r) in picks.iter().enumerate() {
            table.data_mut()[slot * l..(slot + 1) * l].copy_from_slice(&rows[r]);
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, epoch: usize, seed: u64, optimizer: Option<AdamConfig>) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            optimizer,
            epoch,
            seed,
            model: serde_json::to_value(self.config).expect("config serializes"),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: VqvaeConfig =
            serde_json::from_value(ckpt.model.clone()).map_err(|e| Error::invalid(format!("VQ-VAE checkpoint: {e}")))?;
        let template = VqvaeModel::new(config, 0)?;
        for (name, t) in template.params.iter() {
            let got = ckpt.params.require(name)?;
            if got.shape() != t.shape() {
                return Err(Error::shape(
                    "vqvae checkpoint",
                    format!("{name}: {:?} vs {:?}", got.shape(), t.shape()),
                ));
            }
        }
        Ok(Self {
            config,
            params: ckpt.params.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqOutput {
    pub reconstruction: Array2<f64>,
    pub losses: VqLossBreakdown,
    pub indices: Vec<usize>,
}

/// One matrix through the model. With `training`, the input is masked at the
/// configured fraction using `seed`; otherwise it passes unmasked.
pub fn vqvae_forward(model: &VqvaeModel, matrix: &Array2<f64>, training: bool, seed: u64) -> Result<VqOutput> {
    model.check_input(matrix)?;
    let p = if training { model.config.mask_fraction } else { 0.0 };
    let (masked, _) = mask_input(matrix, p, seed)?;
    let target = matrix.as_standard_layout();
    let mut tape = Tape::new();
    let fw = model.forward_vars(&mut tape, masked.as_slice().unwrap(), target.as_slice().unwrap())?;
    Ok(VqOutput {
        reconstruction: Array2::from_shape_vec(matrix.raw_dim(), tape.value(fw.reconstruction).to_vec())
            .expect("decoder output matches input shape"),
        losses: fw.losses,
        indices: fw.indices,
    })
}

/// Quantized latent grid flattened row-major, `G * L` values, unmasked.
pub fn concise_representation(model: &VqvaeModel, matrix: &Array2<f64>) -> Result<Vec<f64>> {
    model.check_input(matrix)?;
    let grid = model.latents(&[matrix])?.remove(0);
    let q = quantize(&grid, &model.codebook())?;
    Ok(q.values.into_iter().collect())
}

/// Concise representations of several matrices as rows of `[n x G*L]`.
pub fn encode_matrices(model: &VqvaeModel, matrices: &[FvtcMatrix]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((matrices.len(), model.config.embedding_len()));
    for (i, m) in matrices.iter().enumerate() {
        let v = concise_representation(model, m.values())?;
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&v));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub patience: usize,
    pub batch_size: usize,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 5e-5,
            patience: 25,
            batch_size: 8,
        }
    }
}

/// What a training step saw, for invariant checks.
#[derive(Debug)]
pub struct StepInfo<'a> {
    pub epoch: usize,
    pub step: usize,
    /// Encoder rows `[B*G x L]`, row-major.
    pub latents: &'a [f64],
    /// Codebook used for this step, `[K x L]`.
    pub codebook: &'a [f64],
    pub indices: &'a [usize],
    pub masked_counts: &'a [usize],
    pub entries_per_matrix: usize,
    pub losses: VqLossBreakdown,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqEpoch {
    pub epoch: usize,
    pub train: VqLossBreakdown,
    pub val: VqLossBreakdown,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct VqTrainResult {
    pub model: VqvaeModel,
    pub history: Vec<VqEpoch>,
    pub best_epoch: usize,
}

/// Builds a model, initializes its codebook from the training data and fits it.
pub fn train_vqvae(
    train: &[FvtcMatrix],
    val: &[FvtcMatrix],
    config: VqvaeConfig,
    hyper: VqTrainConfig,
    seed: u64,
) -> Result<VqTrainResult> {
    if train.is_empty() {
        return Err(Error::invalid("VQ-VAE training set is empty"));
    }
    let mut model = VqvaeModel::new(config, seed::derive(seed, &[10]))?;
    let data: Vec<&Array2<f64>> = train.iter().map(|m| m.values()).collect();
    for m in &data {
        model.check_input(m)?;
    }
    model.init_codebook_from_data(&data, seed::derive(seed, &[11]))?;
    fit_vqvae(model, train, val, hyper, seed, &mut |_| {})
}

fn batch_losses(model: &VqvaeModel, data: &[&Array2<f64>], seeds: &[u64]) -> Result<VqLossBreakdown> {
    let mut items = Vec::with_capacity(data.len());
    for (m, &s) in data.iter().zip(seeds) {
        items.push(vqvae_forward(model, m, true, s)?.losses);
    }
    Ok(VqLossBreakdown::scaled_sum(&items))
}

/// Adam with reduce-on-plateau on the validation total loss (the training
/// loss when `val` is empty). Returns the parameters of the best epoch.
pub fn fit_vqvae(
    mut model: VqvaeModel,
    train: &[FvtcMatrix],
    val: &[FvtcMatrix],
    hyper: VqTrainConfig,
    seed: u64,
    observer: &mut dyn FnMut(&StepInfo),
) -> Result<VqTrainResult> {
    if train.is_empty() {
        return Err(Error::invalid("VQ-VAE training set is empty"));
    }
    if hyper.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let data: Vec<&Array2<f64>> = train.iter().map(|m| m.values()).collect();
    let val_data: Vec<&Array2<f64>> = val.iter().map(|m| m.values()).collect();
    for m in data.iter().chain(&val_data) {
        model.check_input(m)?;
    }
    let val_seeds: Vec<u64> = (0..val_data.len()).map(|i| seed::derive(seed, &[12, i as u64])).collect();
    let cfg = model.config;
    let m_len = cfg.input_len();

    let mut opt = OptimizerState::new(
        AdamConfig {
            lr: hyper.lr,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let mut sched = PlateauScheduler::new(
        hyper.lr,
        PlateauConfig {
            patience: hyper.patience,
            ..PlateauConfig::default()
        },
    )?;
    let mut best = (f64::INFINITY, 0usize, model.params.clone());
    let mut history = Vec::with_capacity(hyper.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=hyper.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[13, epoch as u64]));
        order.shuffle(&mut rng);
        let mut step_losses = Vec::new();
        for (step, batch) in order.chunks(hyper.batch_size).enumerate() {
            let mut inputs = Vec::with_capacity(batch.len() * m_len);
            let mut targets = Vec::with_capacity(batch.len() * m_len);
            let mut counts = Vec::with_capacity(batch.len());
            for (j, &i) in batch.iter().enumerate() {
                let mseed = seed::derive(seed, &[14, epoch as u64, step as u64, j as u64]);
                let (masked, mask) = mask_input(data[i], cfg.mask_fraction, mseed)?;
                counts.push(mask.iter().filter(|&&b| b).count());
                inputs.extend(masked.iter().copied());
                targets.extend(data[i].iter().copied());
            }
            let mut tape = Tape::new();
            let fw = model.forward_vars(&mut tape, &inputs, &targets)?;
            if !fw.losses.total.is_finite() {
                return Err(Error::NonFinite(format!("VQ-VAE loss at epoch {epoch}, step {step}")));
            }
            observer(&StepInfo {
                epoch,
                step,
                latents: tape.value(fw.latents),
                codebook: model.params.require(CODEBOOK)?.data(),
                indices: &fw.indices,
                masked_counts: &counts,
                entries_per_matrix: m_len,
                losses: fw.losses,
                beta: cfg.beta,
            });
            let grads = tape.backward(fw.total)?;
            model.params.clear_grads();
            tape.accumulate_param_grads(&grads, &mut model.params)?;
            adam_step(&mut model.params, &mut opt)?;
            // weight each batch by its size so the epoch figure is a per-matrix mean
            for _ in 0..batch.len() {
                step_losses.push(fw.losses);
            }
        }
        let train_loss = VqLossBreakdown::scaled_sum(&step_losses);
        let val_loss = if val_data.is_empty() {
            train_loss
        } else {
            batch_losses(&model, &val_data, &val_seeds)?
        };
        if val_loss.total < best.0 {
            best = (val_loss.total, epoch, model.params.clone());
        }
        let lr = sched.step(val_loss.total)?;
        opt.set_lr(lr);
        log::debug!(
            "vqvae epoch {epoch}: train {:.6} val {:.6} lr {lr:e}",
            train_loss.total,
            val_loss.total
        );
        history.push(VqEpoch {
            epoch,
            train: train_loss,
            val: val_loss,
            lr,
        });
    }
    if hyper.epochs > 0 {
        model.params.copy_values_from(&best.2)?;
    }
    model.params.clear_grads();
    Ok(VqTrainResult {
        model,
        history,
        best_epoch: best.1,
    })
}
