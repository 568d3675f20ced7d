//! Two-branch CNN + attention severity regressor and its variants.
//!
//! Each branch treats a session stack `[S x E]` as an `E`-channel sequence
//! of length `S`, runs a conv stack (ReLU and dropout after every layer) and,
//! when enabled, self-attention over segments. Branch outputs are averaged
//! over segments, concatenated and passed through a fully connected head to
//! one score.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Prediction;
use crate::seed;
use crate::tensor::nn::{dropout_forward, init_conv1d, init_linear, init_mha, linear, mha_forward, mha_param_names};
use crate::tensor::{
    adam_step, AdamConfig, Checkpoint, OptimizerState, ParameterSet, PlateauConfig, PlateauScheduler, Tape, Var,
};

pub const SPEECH: &str = "speech";
pub const ARTIC: &str = "artic";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn output_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        (self.kernel <= padded && self.stride > 0).then(|| (padded - self.kernel) / self.stride + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BranchConfig {
    pub input_dim: usize,
    pub convs: Vec<ConvSpec>,
    pub dropout: f64,
    pub mha_heads: usize,
    pub mha_enabled: bool,
}

impl Default for BranchConfig {
    fn default() -> Self {
        let conv = |channels| ConvSpec {
            channels,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        Self {
            input_dim: 1024,
            convs: vec![conv(64), conv(32)],
            dropout: 0.2,
            mha_heads: 4,
            mha_enabled: true,
        }
    }
}

impl BranchConfig {
    pub fn with_input_dim(input_dim: usize) -> Self {
        Self {
            input_dim,
            ..Self::default()
        }
    }

    pub fn output_dim(&self) -> usize {
        self.convs.last().map_or(self.input_dim, |c| c.channels)
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("{name} branch: {m}")));
        if self.input_dim == 0 {
            return bad("input dim must be positive".into());
        }
        if self.convs.is_empty() {
            return bad("needs at least one conv layer".into());
        }
        if self.convs.iter().any(|c| c.channels == 0 || c.kernel == 0 || c.stride == 0) {
            return bad("conv channels, kernel and stride must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.mha_enabled && (self.mha_heads == 0 || self.output_dim() % self.mha_heads != 0) {
            return bad(format!(
                "attention dim {} not divisible by {} heads",
                self.output_dim(),
                self.mha_heads
            ));
        }
        Ok(())
    }

    /// Sequence length after the conv stack, or `None` if some kernel does
    /// not fit.
    pub fn output_len(&self, segments: usize) -> Option<usize> {
        self.convs.iter().try_fold(segments, |len, c| c.output_len(len))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    FusionMha,
    FusionNomha,
    UnimodalArtic,
    UnimodalSsl,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::FusionMha,
        Variant::FusionNomha,
        Variant::UnimodalArtic,
        Variant::UnimodalSsl,
    ];

    pub fn uses_speech(self) -> bool {
        self != Variant::UnimodalArtic
    }

    pub fn uses_artic(self) -> bool {
        self != Variant::UnimodalSsl
    }

    /// Row labels in report tables.
    pub fn model_label(self) -> &'static str {
        match self {
            Variant::FusionMha => "Feature-Fusion with MHA",
            Variant::FusionNomha => "Feature-Fusion without MHA",
            Variant::UnimodalArtic => "Unimodal",
            Variant::UnimodalSsl => "Unimodal",
        }
    }

    pub fn features_label(self) -> &'static str {
        match self {
            Variant::FusionMha | Variant::FusionNomha => "FVTC + SSL",
            Variant::UnimodalArtic => "FVTC",
            Variant::UnimodalSsl => "SSL",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::FusionMha => "fusion-mha",
            Variant::FusionNomha => "fusion-nomha",
            Variant::UnimodalArtic => "unimodal-artic",
            Variant::UnimodalSsl => "unimodal-ssl",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))
    }
}

/// Affine map between the regression target and the network output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: f64,
    pub sd: f64,
}

impl Default for TargetScaler {
    fn default() -> Self {
        Self { mean: 0.0, sd: 1.0 }
    }
}

impl TargetScaler {
    pub fn fit(targets: &[f64]) -> Self {
        if targets.is_empty() {
            return Self::default();
        }
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let sd = (targets.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n).sqrt();
        Self {
            mean,
            sd: if sd > 1e-12 { sd } else { 1.0 },
        }
    }

    pub fn to_network(&self, y: f64) -> f64 {
        (y - self.mean) / self.sd
    }

    pub fn from_network(&self, z: f64) -> f64 {
        self.mean + self.sd * z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub speech: Option<BranchConfig>,
    pub artic: Option<BranchConfig>,
    /// Hidden widths of the head before its single output.
    pub head_hidden: Vec<usize>,
    /// Each branch attends to the other branch's sequence instead of its own.
    pub cross_attention: bool,
    pub scaler: TargetScaler,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

/// One session's inputs: `[S x E]` stacks per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionInputs {
    pub id: String,
    pub severity: f64,
    pub speech: Option<Array2<f64>>,
    pub artic: Option<Array2<f64>>,
}

fn init_branch(params: &mut ParameterSet, name: &str, cfg: &BranchConfig, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[u64::from(name == ARTIC), 0]));
    let mut c_in = cfg.input_dim;
    for (i, c) in cfg.convs.iter().enumerate() {
        init_conv1d(params, &format!("{name}.conv{i}"), c_in, c.channels, c.kernel, &mut rng)?;
        c_in = c.channels;
    }
    if cfg.mha_enabled {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[u64::from(name == ARTIC), 1]));
        init_mha(params, &format!("{name}.mha"), c_in, &mut rng)?;
    }
    Ok(())
}

/// Builds a model. Each parameter group draws from its own stream of
/// `seed`, so variants built with one seed share the values of every group
/// they have in common.
pub fn build_model(
    variant: Variant,
    speech: Option<BranchConfig>,
    artic: Option<BranchConfig>,
    head_hidden: &[usize],
    seed: u64,
) -> Result<FusionModel> {
    let with_mha = variant != Variant::FusionNomha;
    let prep = |cfg: Option<BranchConfig>, used: bool, name: &str| -> Result<Option<BranchConfig>> {
        if !used {
            return Ok(None);
        }
        let mut cfg = cfg.ok_or_else(|| Error::invalid(format!("variant {variant} needs a {name} branch config")))?;
        if matches!(variant, Variant::FusionMha | Variant::FusionNomha) {
            cfg.mha_enabled = with_mha;
        }
        cfg.validate(name)?;
        Ok(Some(cfg))
    };
    let config = ModelConfig {
        variant,
        speech: prep(speech, variant.uses_speech(), SPEECH)?,
        artic: prep(artic, variant.uses_artic(), ARTIC)?,
        head_hidden: head_hidden.to_vec(),
        cross_attention: false,
        scaler: TargetScaler::default(),
    };
    FusionModel::from_config(config, seed)
}

/// The two-branch model, with or without attention.
pub fn build_fusion(speech: &BranchConfig, artic: &BranchConfig, with_mha: bool, seed: u64) -> Result<FusionModel> {
    let variant = if with_mha {
        Variant::FusionMha
    } else {
        Variant::FusionNomha
    };
    build_model(variant, Some(speech.clone()), Some(artic.clone()), &[32], seed)
}

impl FusionModel {
    pub fn from_config(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.head_hidden.contains(&0) {
            return Err(Error::invalid("head layer widths must be positive"));
        }
        let mut params = ParameterSet::new();
        let mut fused = 0;
        for (name, cfg) in config.branches() {
            cfg.validate(name)?;
            init_branch(&mut params, name, cfg, seed)?;
            fused += cfg.output_dim();
        }
        if fused == 0 {
            return Err(Error::invalid("model has no branches"));
        }
        if config.cross_attention {
            match (&config.speech, &config.artic) {
                (Some(s), Some(a)) if s.output_dim() == a.output_dim() && s.mha_enabled && a.mha_enabled => {}
                _ => {
                    return Err(Error::invalid(
                        "cross attention needs two attention branches of equal output width",
                    ))
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[2]));
        let mut width = fused;
        for (i, &h) in config.head_hidden.iter().enumerate() {
            init_linear(&mut params, &format!("head.fc{i}"), width, h, &mut rng)?;
            width = h;
        }
        init_linear(&mut params, &format!("head.fc{}", config.head_hidden.len()), width, 1, &mut rng)?;
        Ok(Self { config, params })
    }

    /// MHA parameter names of this model.
    pub fn mha_params(&self) -> Vec<String> {
        self.config
            .branches()
            .filter(|(_, c)| c.mha_enabled)
            .flat_map(|(n, _)| mha_param_names(&format!("{n}.mha")))
            .collect()
    }

    pub fn to_checkpoint(&self, epoch: usize, seed: u64, optimizer: Option<AdamConfig>) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            optimizer,
            epoch,
            seed,
            model: serde_json::to_value(&self.config).expect("config serializes"),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(ckpt.model.clone())
            .map_err(|e| Error::invalid(format!("regressor checkpoint: {e}")))?;
        let template = FusionModel::from_config(config.clone(), 0)?;
        let names: Vec<&str> = template.params.names().collect();
        if names != ckpt.params.names().collect::<Vec<_>>() {
            return Err(Error::invalid("checkpoint parameters do not match the model config"));
        }
        for (name, t) in template.params.iter() {
            if ckpt.params.require(name)?.shape() != t.shape() {
                return Err(Error::shape("regressor checkpoint", format!("parameter {name}")));
            }
        }
        Ok(Self {
            config,
            params: ckpt.params.clone(),
        })
    }
}

impl ModelConfig {
    pub fn branches(&self) -> impl Iterator<Item = (&'static str, &BranchConfig)> {
        [(SPEECH, self.speech.as_ref()), (ARTIC, self.artic.as_ref())]
            .into_iter()
            .filter_map(|(n, c)| c.map(|c| (n, c)))
    }
}

/// Conv stack of one branch over a `[S x E]` stack; returns `[S' x C]`
/// before attention.
fn branch_convs(
    tape: &mut Tape,
    params: &ParameterSet,
    name: &str,
    cfg: &BranchConfig,
    stack: &Array2<f64>,
    training: bool,
    seed: u64,
) -> Result<Var> {
    let (s, e) = stack.dim();
    if e != cfg.input_dim {
        return Err(Error::shape(
            "branch",
            format!("{name} stack has dim {e}, branch expects {}", cfg.input_dim),
        ));
    }
    if cfg.output_len(s).is_none_or(|l| l == 0) {
        return Err(Error::shape(
            "branch",
            format!("{name}: {s} segments are fewer than the conv stack's receptive field"),
        ));
    }
    let values: Vec<f64> = stack.t().iter().copied().collect();
    let mut x = tape.constant(vec![1, e, s], values)?;
    for (i, c) in cfg.convs.iter().enumerate() {
        let w = tape.param(params, &format!("{name}.conv{i}.weight"))?;
        let b = tape.param(params, &format!("{name}.conv{i}.bias"))?;
        x = tape.conv1d(x, w, Some(b), c.stride, c.padding)?;
        x = tape.relu(x);
        x = dropout_forward(tape, x, cfg.dropout, training, seed::derive(seed, &[i as u64]))?;
    }
    let (c, l) = (tape.shape(x)[1], tape.shape(x)[2]);
    let flat = tape.reshape(x, vec![c, l])?;
    tape.transpose(flat)
}

fn attend(tape: &mut Tape, params: &ParameterSet, name: &str, heads: usize, query: Var, context: Var) -> Result<Var> {
    let (sq, c) = (tape.shape(query)[0], tape.shape(query)[1]);
    let sk = tape.shape(context)[0];
    let q = tape.reshape(query, vec![1, sq, c])?;
    let kv = tape.reshape(context, vec![1, sk, c])?;
    let out = mha_forward(tape, params, &format!("{name}.mha"), q, kv, kv, heads, None)?;
    tape.reshape(out, vec![sq, c])
}

/// Branch output `[S' x C]`: conv stack, then self-attention when enabled.
pub fn branch_forward(
    tape: &mut Tape,
    params: &ParameterSet,
    name: &str,
    cfg: &BranchConfig,
    stack: &Array2<f64>,
    training: bool,
    seed: u64,
) -> Result<Var> {
    let x = branch_convs(tape, params, name, cfg, stack, training, seed)?;
    if cfg.mha_enabled {
        attend(tape, params, name, cfg.mha_heads, x, x)
    } else {
        Ok(x)
    }
}

fn stack_for<'a>(model: &FusionModel, input: &'a SessionInputs, name: &str) -> Result<&'a Array2<f64>> {
    let stack = if name == SPEECH { &input.speech } else { &input.artic };
    stack.as_ref().ok_or_else(|| Error::Validation {
        record: format!("session {}", input.id),
        reason: format!("{} model needs {name} inputs", model.config.variant),
    })
}

/// Network output (in scaled target units) as a `[1 x 1]` node.
pub fn predict_var(
    tape: &mut Tape,
    model: &FusionModel,
    input: &SessionInputs,
    training: bool,
    seed: u64,
) -> Result<Var> {
    let cfg = &model.config;
    if let (Some(_), Some(_)) = (&cfg.speech, &cfg.artic) {
        let (s, a) = (stack_for(model, input, SPEECH)?, stack_for(model, input, ARTIC)?);
        if s.nrows() != a.nrows() {
            return Err(Error::shape(
                "fuse",
                format!("session {}: {} speech vs {} articulatory segments", input.id, s.nrows(), a.nrows()),
            ));
        }
    }
    let mut convs = Vec::new();
    for (bi, (name, bc)) in cfg.branches().enumerate() {
        let stack = stack_for(model, input, name)?;
        let x = branch_convs(tape, &model.params, name, bc, stack, training, seed::derive(seed, &[bi as u64]))?;
        convs.push((name, bc, x));
    }
    let mut pooled = Vec::new();
    for (i, &(name, bc, x)) in convs.iter().enumerate() {
        let out = if !bc.mha_enabled {
            x
        } else if cfg.cross_attention {
            let other = convs[1 - i].2;
            attend(tape, &model.params, name, bc.mha_heads, x, other)?
        } else {
            attend(tape, &model.params, name, bc.mha_heads, x, x)?
        };
        pooled.push(tape.mean_rows(out, None)?);
    }
    let fused = tape.concat(&pooled, 1)?;
    let width = tape.value(fused).len();
    let mut h = tape.reshape(fused, vec![1, width])?;
    for i in 0..cfg.head_hidden.len() {
        h = linear(tape, &model.params, &format!("head.fc{i}"), h)?;
        h = tape.relu(h);
    }
    linear(tape, &model.params, &format!("head.fc{}", cfg.head_hidden.len()), h)
}

/// Severity estimate for one session (eval mode unless `training`).
pub fn fuse_and_predict(model: &FusionModel, input: &SessionInputs, training: bool, seed: u64) -> Result<f64> {
    let mut tape = Tape::new();
    let out = predict_var(&mut tape, model, input, training, seed)?;
    let z = tape.value(out)[0];
    if !z.is_finite() {
        return Err(Error::NonFinite(format!("prediction for session {}", input.id)));
    }
    Ok(model.config.scaler.from_network(z))
}

/// Eval-mode predictions, unclipped, in input order.
pub fn predict_dataset(model: &FusionModel, sessions: &[SessionInputs]) -> Result<Vec<Prediction>> {
    sessions
        .iter()
        .map(|s| {
            Ok(Prediction {
                session: s.id.clone(),
                predicted: fuse_and_predict(model, s, false, 0)?,
                actual: s.severity,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressorTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub patience: usize,
    /// Train on standardized targets (mean and sd of the training fold).
    pub standardize_target: bool,
}

impl Default for RegressorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            lr: 5e-4,
            patience: 100,
            standardize_target: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorEpoch {
    pub epoch: usize,
    /// Mean squared error in scaled target units.
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct RegressorTrainResult {
    pub model: FusionModel,
    pub history: Vec<RegressorEpoch>,
    pub best_epoch: usize,
}

fn squared_error(tape: &mut Tape, out: Var, target: f64) -> Result<Var> {
    let t = tape.constant(vec![1, 1], vec![target])?;
    let d = tape.sub(out, t)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean_all(sq))
}

fn val_mse(model: &FusionModel, sessions: &[SessionInputs]) -> Result<f64> {
    let mut sum = 0.0;
    for s in sessions {
        let mut tape = Tape::new();
        let out = predict_var(&mut tape, model, s, false, 0)?;
        let d = tape.value(out)[0] - model.config.scaler.to_network(s.severity);
        sum += d * d;
    }
    Ok(sum / sessions.len() as f64)
}

/// Adam on per-session MSE (batch size 1, shuffled each epoch), plateau
/// scheduling on validation MSE, best-validation parameters returned.
pub fn train_regressor(
    mut model: FusionModel,
    train: &[SessionInputs],
    val: &[SessionInputs],
    hyper: RegressorTrainConfig,
    seed: u64,
) -> Result<RegressorTrainResult> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid(format!(
            "regressor needs nonempty folds (train {}, val {})",
            train.len(),
            val.len()
        )));
    }
    if hyper.standardize_target {
        let targets: Vec<f64> = train.iter().map(|s| s.severity).collect();
        model.config.scaler = TargetScaler::fit(&targets);
    }
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
    let mut best = (val_mse(&model, val)?, 0usize, model.params.clone());
    let mut history = Vec::with_capacity(hyper.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=hyper.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[20, epoch as u64]));
        order.shuffle(&mut rng);
        let mut train_sum = 0.0;
        for (step, &i) in order.iter().enumerate() {
            let mut tape = Tape::new();
            let dseed = seed::derive(seed, &[21, epoch as u64, step as u64]);
            let out = predict_var(&mut tape, &model, &train[i], true, dseed)?;
            let loss = squared_error(&mut tape, out, model.config.scaler.to_network(train[i].severity))?;
            let l = tape.scalar(loss);
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("regressor loss at epoch {epoch}")));
            }
            train_sum += l;
            let grads = tape.backward(loss)?;
            model.params.clear_grads();
            tape.accumulate_param_grads(&grads, &mut model.params)?;
            adam_step(&mut model.params, &mut opt)?;
        }
        let v = val_mse(&model, val)?;
        if v < best.0 {
            best = (v, epoch, model.params.clone());
        }
        let lr = sched.step(v)?;
        opt.set_lr(lr);
        history.push(RegressorEpoch {
            epoch,
            train_mse: train_sum / train.len() as f64,
            val_mse: v,
            lr,
        });
        if epoch % 50 == 0 {
            log::debug!("regressor epoch {epoch}: train {:.5} val {v:.5} lr {lr:e}", train_sum / train.len() as f64);
        }
    }
    model.params.copy_values_from(&best.2)?;
    model.params.clear_grads();
    Ok(RegressorTrainResult {
        model,
        history,
        best_epoch: best.1,
    })
}
