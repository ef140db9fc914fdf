//! Training loop shared by every method, with ε scheduling, guarded early
//! stopping and JSON checkpoints.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureCodec, SplitDataset, SurvivalDataset};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, Matrix, Network, DEFAULT_LEAKY_SLOPE};
use crate::objectives::{
    certified_upper_loss, combined_loss, combined_loss_grad, fgsm_perturb, noise_perturb, pgd_perturb, sawar_loss,
    sawar_loss_grad, Batch, LossBreakdown, LossGrad, LossParams, StepRule,
};
use crate::output::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Clean combined objective only.
    #[default]
    Baseline,
    /// Combined objective on randomly jittered covariates.
    Noise,
    Fgsm,
    Pgd,
    /// Clean objective mixed with its certified upper bound.
    Sawar,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Baseline, Method::Noise, Method::Fgsm, Method::Pgd, Method::Sawar];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Noise => "noise",
            Method::Fgsm => "fgsm",
            Method::Pgd => "pgd",
            Method::Sawar => "sawar",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (expected baseline|noise|fgsm|pgd|sawar)")))
    }
}

/// Validation quantity watched by early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Monitor {
    #[default]
    Clean,
    /// Certified upper bound at the current ε.
    Certified,
}

/// Adam step size used for training unless configured otherwise.
pub const DEFAULT_LEARNING_RATE: f64 = 5e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub kappa: f64,
    pub eps_max: f64,
    pub warmup_epochs: usize,
    pub ramp_epochs: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub pgd_steps: usize,
    pub sigma: f64,
    /// Ranking weight; `1 / batch_size` when absent.
    pub rank_weight: Option<f64>,
    pub seed: u64,
    pub fgsm_sign_mode: bool,
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub monitor: Monitor,
    /// Standardize one-hot columns as well as numeric ones.
    pub normalize_all: bool,
    /// Adam step size.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Adam denominator offset.
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            method: Method::Baseline,
            kappa: 0.5,
            eps_max: 0.5,
            warmup_epochs: 10,
            ramp_epochs: 30,
            max_epochs: 500,
            batch_size: 128,
            patience: 20,
            pgd_steps: 10,
            sigma: 1.0,
            rank_weight: None,
            seed: 0,
            fgsm_sign_mode: false,
            hidden: vec![50, 50],
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            monitor: Monitor::Clean,
            normalize_all: true,
            lr: DEFAULT_LEARNING_RATE,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.kappa) {
            return bad(format!("kappa must lie in [0, 1], got {}", self.kappa));
        }
        if !(self.eps_max >= 0.0) || !self.eps_max.is_finite() {
            return bad(format!("eps_max must be finite and >= 0, got {}", self.eps_max));
        }
        if self.ramp_epochs == 0 {
            return bad("ramp_epochs must be >= 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.pgd_steps == 0 {
            return bad("pgd_steps must be >= 1".into());
        }
        if !(self.sigma > 0.0) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if let Some(w) = self.rank_weight {
            if !(w >= 0.0) {
                return bad(format!("rank_weight must be >= 0, got {w}"));
            }
        }
        if self.max_epochs <= self.warmup_epochs + self.ramp_epochs {
            return bad(format!(
                "max_epochs ({}) must exceed warmup_epochs + ramp_epochs ({}) so that some epoch runs at eps_max",
                self.max_epochs,
                self.warmup_epochs + self.ramp_epochs
            ));
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be >= 1".into());
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky_slope must lie in [0, 1), got {}", self.leaky_slope));
        }
        if !(self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("Adam betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        Ok(())
    }

    pub fn loss_params(&self) -> LossParams {
        LossParams {
            w: self.rank_weight.unwrap_or(1.0 / self.batch_size as f64),
            sigma: self.sigma,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn step_rule(&self) -> StepRule {
        if self.fgsm_sign_mode {
            StepRule::Sign
        } else {
            StepRule::Raw
        }
    }

    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(&self.hidden);
        dims.push(1);
        dims
    }

    /// First epoch that runs at `eps_max`.
    pub fn first_full_eps_epoch(&self) -> usize {
        self.warmup_epochs + self.ramp_epochs
    }
}

/// Zero during warm-up, then a linear ramp to `eps_max` over `ramp_epochs`.
pub fn eps_schedule(config: &TrainConfig, epoch: usize) -> f64 {
    if epoch < config.warmup_epochs {
        return 0.0;
    }
    let k = (epoch - config.warmup_epochs).min(config.ramp_epochs);
    if k == config.ramp_epochs {
        config.eps_max
    } else {
        config.eps_max * k as f64 / config.ramp_epochs as f64
    }
}

/// The batch a method's loss is evaluated on. Adversarial and noisy
/// perturbations are computed at the current parameters and then held
/// fixed, so the parameter gradient is that of the clean loss at the
/// perturbed inputs.
pub fn method_batch(net: &Network, batch: &Batch, config: &TrainConfig, eps: f64, noise_seed: u64) -> Result<Batch> {
    let params = config.loss_params();
    Ok(match config.method {
        Method::Baseline | Method::Sawar => batch.clone(),
        Method::Noise => noise_perturb(batch, eps, noise_seed)?,
        Method::Fgsm => fgsm_perturb(net, batch, eps, params, config.step_rule())?.batch,
        Method::Pgd => pgd_perturb(net, batch, eps, config.pgd_steps, params, config.step_rule())?.batch,
    })
}

/// Loss of `config.method` on a batch already produced by [`method_batch`].
pub fn method_loss(net: &Network, batch: &Batch, config: &TrainConfig, eps: f64) -> Result<LossBreakdown> {
    let params = config.loss_params();
    match config.method {
        Method::Sawar => sawar_loss(net, batch, eps, config.kappa, params),
        _ => {
            let clean = combined_loss(net, batch, params)?;
            Ok(LossBreakdown {
                neg_ll: f64::NAN,
                rank: f64::NAN,
                clean_combined: clean,
                certified_upper: f64::NAN,
                total: clean,
            })
        }
    }
}

pub fn method_loss_grad(
    net: &Network,
    batch: &Batch,
    config: &TrainConfig,
    eps: f64,
) -> Result<(LossBreakdown, LossGrad)> {
    let params = config.loss_params();
    match config.method {
        Method::Sawar => sawar_loss_grad(net, batch, eps, config.kappa, params),
        _ => {
            let grad = combined_loss_grad(net, batch, params)?;
            let clean = grad.value;
            Ok((
                LossBreakdown {
                    neg_ll: f64::NAN,
                    rank: f64::NAN,
                    clean_combined: clean,
                    certified_upper: f64::NAN,
                    total: clean,
                },
                grad,
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub eps: f64,
    /// Sums over the epoch's batches.
    pub train_clean: f64,
    pub train_certified: f64,
    pub train_total: f64,
    pub val_loss: f64,
    pub skipped_batches: usize,
    /// Early stopping may pick this epoch.
    pub eligible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_epoch: usize,
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Codec(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Codec(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_csv()?.as_bytes())
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn validation_loss(net: &Network, data: &SurvivalDataset, config: &TrainConfig, eps: f64) -> Result<f64> {
    let batch = Batch::full(data)?;
    let params = config.loss_params();
    let total = match config.monitor {
        Monitor::Clean => combined_loss(net, &batch, params)?,
        Monitor::Certified => certified_upper_loss(net, &batch, eps, params)?.value,
    };
    Ok(total / data.len() as f64)
}

/// Trains `config.method` on `split.train` and returns the network with the
/// best validation loss among epochs run at `eps_max`.
pub fn train(config: &TrainConfig, split: &SplitDataset) -> Result<(Network, TrainReport)> {
    config.validate()?;
    let started = Instant::now();
    let train_set = &split.train;
    if train_set.is_empty() || split.validation.is_empty() {
        return Err(Error::Input("train and validation splits must be nonempty".into()));
    }
    let mut net = Network::init(&config.layer_dims(train_set.dim()), config.leaky_slope, config.seed)?;
    let mut adam = AdamState::new(&net, config.adam());
    let mut rows = Vec::new();
    let mut best: Option<(f64, usize, Network)> = None;
    let mut since_best = 0;
    let mut last_finite = net.clone();
    let mut stopped_epoch = config.max_epochs.saturating_sub(1);

    for epoch in 0..config.max_epochs {
        let eps = eps_schedule(config, epoch);
        let mut rng = epoch_rng(config.seed, epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);

        let (mut clean, mut certified, mut total) = (0.0, 0.0, 0.0);
        let mut skipped = 0;
        let n_batches = order.len().div_ceil(config.batch_size);
        for chunk in order.chunks(config.batch_size) {
            let noise_seed: u64 = rng.gen();
            let batch = Batch::from_dataset(train_set, chunk)?;
            let eval_batch = method_batch(&net, &batch, config, eps, noise_seed)?;
            let (parts, grad) = method_loss_grad(&net, &eval_batch, config, eps)?;
            if !parts.total.is_finite() || !grad.params.is_finite() {
                skipped += 1;
                continue;
            }
            adam.step(&mut net, &grad.params)?;
            clean += parts.clean_combined;
            certified += parts.certified_upper;
            total += parts.total;
        }
        if skipped == n_batches {
            let last_good = best.map(|b| b.2).unwrap_or(last_finite);
            return Err(Error::Divergence {
                reason: format!("every batch of epoch {epoch} produced a non-finite loss or gradient"),
                last_good: Some(Box::new(last_good)),
            });
        }
        if skipped > 0 {
            warn!("epoch {epoch}: skipped {skipped} non-finite batches");
        }
        last_finite = net.clone();

        let val = validation_loss(&net, &split.validation, config, eps)?;
        let eligible = eps == config.eps_max && epoch >= config.first_full_eps_epoch();
        rows.push(EpochRow {
            epoch,
            eps,
            train_clean: clean,
            train_certified: certified,
            train_total: total,
            val_loss: val,
            skipped_batches: skipped,
            eligible,
        });
        debug!("epoch {epoch} eps {eps:.3} train {total:.4} val {val:.5}");
        if !eligible {
            continue;
        }
        let improved = val.is_finite() && best.as_ref().is_none_or(|(b, _, _)| val < *b);
        if improved {
            best = Some((val, epoch, net.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stopped_epoch = epoch;
                break;
            }
        }
    }

    let (best_val_loss, best_epoch, best_net) = match best {
        Some(b) => b,
        None => {
            return Err(Error::Divergence {
                reason: "no epoch at eps_max produced a finite validation loss".into(),
                last_good: Some(Box::new(last_finite)),
            })
        }
    };
    info!(
        "{} on {}: best epoch {best_epoch} (val {best_val_loss:.5}), stopped at {stopped_epoch}",
        config.method, split.name
    );
    Ok((
        best_net,
        TrainReport {
            rows,
            best_epoch,
            best_val_loss,
            stopped_epoch,
            wall_time_secs: started.elapsed().as_secs_f64(),
        },
    ))
}

// ---- checkpoints ----

pub const CHECKPOINT_SCHEMA: &str = "robust-surv/checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    schema: String,
    version: u32,
    layer_dims: Vec<usize>,
    leaky_slope: f64,
    /// Row-major, one array per layer.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    codec: FeatureCodec,
    config: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub net: Network,
    pub codec: FeatureCodec,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            schema: CHECKPOINT_SCHEMA.into(),
            version: CHECKPOINT_VERSION,
            layer_dims: self.net.layer_dims().to_vec(),
            leaky_slope: self.net.leaky_slope(),
            weights: self.net.weights().iter().map(|w| w.as_slice().to_vec()).collect(),
            biases: self.net.biases().to_vec(),
            codec: self.codec.clone(),
            config: self.config.clone(),
        };
        serde_json::to_string_pretty(&file).expect("checkpoint is serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        if file.schema != CHECKPOINT_SCHEMA || file.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{} (expected {CHECKPOINT_SCHEMA} v{CHECKPOINT_VERSION})",
                file.schema, file.version
            )));
        }
        let dims = &file.layer_dims;
        if dims.len() < 2 || file.weights.len() != dims.len() - 1 {
            return Err(Error::Checkpoint("layer_dims inconsistent with weight arrays".into()));
        }
        let weights = file
            .weights
            .into_iter()
            .enumerate()
            .map(|(l, w)| Matrix::from_row_major(dims[l + 1], dims[l], w))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let net = Network::from_parts(weights, file.biases, file.leaky_slope)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if net.input_dim() != file.codec.dim() {
            return Err(Error::Checkpoint(format!(
                "codec produces {} features but the network expects {}",
                file.codec.dim(),
                net.input_dim()
            )));
        }
        Ok(Self {
            net,
            codec: file.codec,
            config: file.config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

pub fn save_checkpoint(net: &Network, codec: &FeatureCodec, config: &TrainConfig, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint {
        net: net.clone(),
        codec: codec.clone(),
        config: config.clone(),
    }
    .save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Network, FeatureCodec, TrainConfig)> {
    let c = Checkpoint::load(path)?;
    Ok((c.net, c.codec, c.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{stratified_split, RawDataset};
    use crate::objectives::combined_loss_grad;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_config(method: Method) -> TrainConfig {
        TrainConfig {
            method,
            warmup_epochs: 2,
            ramp_epochs: 3,
            max_epochs: 12,
            batch_size: 16,
            patience: 3,
            hidden: vec![6],
            lr: 0.01,
            ..TrainConfig::default()
        }
    }

    /// Exponential times with log-hazard `1.5 x0 - x1`, random censoring.
    fn planted(n: usize, seed: u64) -> RawDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut time = Vec::new();
        let mut event = Vec::new();
        for _ in 0..n {
            let row: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let rate = (1.5 * row[0] - row[1]).exp();
            let t_event = -rng.gen::<f64>().ln() / rate;
            let t_cens = -rng.gen::<f64>().ln() / 0.3;
            time.push(t_event.min(t_cens).max(1e-6));
            event.push(t_event <= t_cens);
            x.push(row);
        }
        RawDataset::from_numeric("planted", &x, &time, &event).unwrap()
    }

    #[test]
    fn schedule_anchors() {
        let cfg = TrainConfig::default();
        assert_eq!(eps_schedule(&cfg, 0), 0.0);
        assert_eq!(eps_schedule(&cfg, cfg.warmup_epochs - 1), 0.0);
        assert_eq!(eps_schedule(&cfg, cfg.warmup_epochs), 0.0);
        assert_eq!(eps_schedule(&cfg, cfg.warmup_epochs + 15), 0.25);
        assert_eq!(eps_schedule(&cfg, cfg.warmup_epochs + 30), 0.5);
        assert_eq!(eps_schedule(&cfg, 499), 0.5);
    }

    proptest! {
        #[test]
        fn schedule_is_monotone_and_clamped(warm in 0usize..20, ramp in 1usize..50, eps in 0.0f64..2.0) {
            let cfg = TrainConfig { warmup_epochs: warm, ramp_epochs: ramp, eps_max: eps, ..TrainConfig::default() };
            let mut prev = 0.0;
            for e in 0..(warm + ramp + 10) {
                let v = eps_schedule(&cfg, e);
                prop_assert!(v >= prev && v <= eps);
                prev = v;
            }
            prop_assert_eq!(eps_schedule(&cfg, warm + ramp), eps);
        }
    }

    #[test]
    fn config_validation_and_toml() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            ramp_epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let short = TrainConfig {
            max_epochs: 40,
            ..TrainConfig::default()
        };
        assert!(short.validate().is_err());
        let cfg = TrainConfig::from_toml_str("method = \"sawar\"\nkappa = 0.25\nlr = 0.002\n").unwrap();
        assert_eq!(cfg.method, Method::Sawar);
        assert_eq!(cfg.kappa, 0.25);
        assert_eq!(cfg.adam().lr, 0.002);
        assert_eq!(cfg.adam().beta1, 0.9);
        assert!(TrainConfig::from_toml_str("kapa = 1").is_err());
        let round = TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(round, cfg);
        assert_eq!(TrainConfig::default().loss_params().w, 1.0 / 128.0);
    }

    #[test]
    fn method_parsing() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("draft".parse::<Method>().is_err());
    }

    #[test]
    fn sawar_kappa_one_matches_baseline_batch_loss() {
        let raw = planted(60, 1);
        let split = stratified_split(&raw, 0, false).unwrap();
        let net = Network::init(&[2, 5, 1], 0.01, 5).unwrap();
        let batch = Batch::full(&split.train).unwrap();
        let base = small_config(Method::Baseline);
        let sawar = TrainConfig {
            kappa: 1.0,
            ..small_config(Method::Sawar)
        };
        let a = method_loss(&net, &batch, &base, 0.3).unwrap().total;
        let b = method_loss(&net, &batch, &sawar, 0.3).unwrap().total;
        assert_eq!(a, b);
        let g = combined_loss_grad(&net, &batch, base.loss_params()).unwrap();
        let (_, gs) = method_loss_grad(&net, &batch, &sawar, 0.3).unwrap();
        assert_eq!(g.params.flat(), gs.params.flat());
    }

    #[test]
    fn sawar_with_zero_eps_tracks_baseline_exactly() {
        let split = stratified_split(&planted(80, 2), 0, false).unwrap();
        let base = small_config(Method::Baseline);
        let sawar = TrainConfig {
            eps_max: 0.0,
            ..small_config(Method::Sawar)
        };
        let (na, ra) = train(&base, &split).unwrap();
        let (nb, rb) = train(&sawar, &split).unwrap();
        assert_eq!(na.flat_params(), nb.flat_params());
        let va: Vec<f64> = ra.rows.iter().map(|r| r.val_loss).collect();
        let vb: Vec<f64> = rb.rows.iter().map(|r| r.val_loss).collect();
        assert_eq!(va, vb);
    }

    #[test]
    fn training_is_deterministic() {
        let split = stratified_split(&planted(80, 3), 1, false).unwrap();
        for method in Method::ALL {
            let cfg = small_config(method);
            let (a, ra) = train(&cfg, &split).unwrap();
            let (b, rb) = train(&cfg, &split).unwrap();
            assert_eq!(a.flat_params(), b.flat_params(), "{method}");
            assert_eq!(ra.to_csv().unwrap(), rb.to_csv().unwrap());
        }
    }

    #[test]
    fn guard_never_selects_ramp_epochs() {
        let split = stratified_split(&planted(80, 4), 0, false).unwrap();
        for method in Method::ALL {
            let cfg = small_config(method);
            let (_, report) = train(&cfg, &split).unwrap();
            assert!(report.best_epoch >= cfg.first_full_eps_epoch());
            assert_eq!(eps_schedule(&cfg, report.best_epoch), cfg.eps_max);
            for row in &report.rows {
                assert_eq!(row.eps, eps_schedule(&cfg, row.epoch));
                assert_eq!(row.eligible, row.eps == cfg.eps_max);
            }
        }
    }

    #[test]
    fn divergence_reports_last_good_network() {
        let split = stratified_split(&planted(40, 5), 0, false).unwrap();
        let cfg = TrainConfig {
            lr: 1e6,
            max_epochs: 60,
            ..small_config(Method::Baseline)
        };
        match train(&cfg, &split) {
            Err(Error::Divergence { last_good, .. }) => {
                let net = last_good.expect("a last good network");
                assert!(net.flat_params().iter().all(|v| v.is_finite()));
            }
            Ok(_) => {} // very large steps can still land somewhere finite
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let raw = planted(40, 6);
        let split = stratified_split(&raw, 0, false).unwrap();
        let net = Network::init(&[2, 7, 4, 1], 0.01, 9).unwrap();
        let cfg = small_config(Method::Sawar);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&net, &split.codec, &cfg, &path).unwrap();
        let (back, codec, cfg_back) = load_checkpoint(&path).unwrap();
        assert_eq!(codec, split.codec);
        assert_eq!(cfg_back, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let x = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            assert_eq!(net.forward(&x).unwrap().to_bits(), back.forward(&x).unwrap().to_bits());
        }
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let split = stratified_split(&planted(40, 7), 0, false).unwrap();
        let net = Network::init(&[2, 3, 1], 0.01, 1).unwrap();
        let ck = Checkpoint {
            net,
            codec: split.codec.clone(),
            config: TrainConfig::default(),
        };
        let text = ck.to_json();
        assert!(matches!(Checkpoint::from_json(&text[..text.len() / 2]), Err(Error::Checkpoint(_))));
        let wrong_version = text.replace("\"version\": 1", "\"version\": 99");
        assert!(matches!(Checkpoint::from_json(&wrong_version), Err(Error::Checkpoint(_))));
        let wrong_dims = text.replacen("\"layer_dims\": [\n    2,", "\"layer_dims\": [\n    5,", 1);
        assert!(matches!(Checkpoint::from_json(&wrong_dims), Err(Error::Checkpoint(_))));
    }
}
