//! Pipeline configuration and its `key = value` file form.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::parse_key_values;
use crate::sampler::PairingStrategy;

/// How the centroids memory is seeded before the first epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bootstrap {
    /// Per-pid mean over every single-camera image.
    Full,
    /// Per-pid mean over the first epoch's K-image subset.
    Subset,
}

impl FromStr for Bootstrap {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Bootstrap::Full),
            "subset" => Ok(Bootstrap::Subset),
            _ => Err(Error::InvalidConfig(format!("unknown bootstrap `{s}`"))),
        }
    }
}

impl Bootstrap {
    pub fn name(self) -> &'static str {
        match self {
            Bootstrap::Full => "full",
            Bootstrap::Subset => "subset",
        }
    }
}

/// Weights of the four loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_ins: f64,
    pub w_aug: f64,
    pub w_cen: f64,
    pub w_cc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_ins: 1.0,
            w_aug: 1.0,
            w_cen: 1.0,
            w_cc: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Relabel when the best foreign centroid is above this.
    pub tau_rel: f64,
    /// Remove when the best centroid is below this.
    pub tau_remove: f64,
    /// Centroid similarity at or above which two pids are linked.
    pub tau_merge: f64,
    /// Smoothing factor of the centroid EMA.
    pub alpha: f64,
    /// Images drawn per single-camera pid each epoch.
    pub k_per_pid: usize,
    /// Momentum encoder coefficient.
    pub lambda_momentum: f64,
    pub n_p: usize,
    pub n_k: usize,
    pub queue_epochs: usize,
    pub iterations_per_epoch: usize,
    pub loss_weights: LossWeights,
    pub strategy: PairingStrategy,
    pub seed: u64,

    pub epochs: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub aug_sigma: f64,
    /// Output dimension of the toy encoder; 0 keeps the input dimension.
    pub embed_dim: usize,
    pub bootstrap: Bootstrap,
    /// Run the pid merge before the centroid EMA instead of after it.
    pub merge_before_ema: bool,
    /// Recompute multi-camera centroids every iteration instead of once per epoch.
    pub fresh_centroids: bool,
    /// Apply the momentum update every iteration (true) or once per epoch.
    pub momentum_per_iteration: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            tau_rel: 0.6,
            tau_remove: 0.5,
            tau_merge: 0.8,
            alpha: 0.3,
            k_per_pid: 4,
            lambda_momentum: 0.999,
            n_p: 8,
            n_k: 4,
            queue_epochs: 30,
            iterations_per_epoch: 400,
            loss_weights: LossWeights::default(),
            strategy: PairingStrategy::Median,
            seed: 0,
            epochs: 100,
            learning_rate: 0.05,
            temperature: 0.1,
            aug_sigma: 0.05,
            embed_dim: 0,
            bootstrap: Bootstrap::Full,
            merge_before_ema: false,
            fresh_centroids: false,
            momentum_per_iteration: true,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value `{value}` for `{key}`")))
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(0.0 <= self.tau_remove && self.tau_remove <= self.tau_rel && self.tau_rel <= 1.0) {
            return bad("need 0 <= tau_remove <= tau_rel <= 1");
        }
        if !(-1.0..=1.0).contains(&self.tau_merge) {
            return bad("tau_merge must lie in [-1, 1]");
        }
        // Zero is admitted for alpha and lambda: both degenerate to a plain copy.
        if !(0.0..1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.lambda_momentum) {
            return bad("lambda_momentum must lie in [0, 1)");
        }
        if self.n_p == 0 || self.n_k == 0 || self.k_per_pid == 0 {
            return bad("n_p, n_k and k_per_pid must be at least 1");
        }
        if !(self.temperature > 0.0) || !(self.learning_rate >= 0.0) || !(self.aug_sigma >= 0.0) {
            return bad("temperature must be positive; learning_rate and aug_sigma non-negative");
        }
        let w = self.loss_weights;
        if [w.w_ins, w.w_aug, w.w_cen, w.w_cc].iter().any(|x| !x.is_finite()) {
            return bad("loss weights must be finite");
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "tau_rel" => self.tau_rel = parse_value(key, value)?,
            "tau_remove" => self.tau_remove = parse_value(key, value)?,
            "tau_merge" => self.tau_merge = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "k_per_pid" => self.k_per_pid = parse_value(key, value)?,
            "lambda_momentum" => self.lambda_momentum = parse_value(key, value)?,
            "n_p" => self.n_p = parse_value(key, value)?,
            "n_k" => self.n_k = parse_value(key, value)?,
            "queue_epochs" => self.queue_epochs = parse_value(key, value)?,
            "iterations_per_epoch" => self.iterations_per_epoch = parse_value(key, value)?,
            "w_ins" => self.loss_weights.w_ins = parse_value(key, value)?,
            "w_aug" => self.loss_weights.w_aug = parse_value(key, value)?,
            "w_cen" => self.loss_weights.w_cen = parse_value(key, value)?,
            "w_cc" => self.loss_weights.w_cc = parse_value(key, value)?,
            "strategy" => self.strategy = value.parse()?,
            "seed" => self.seed = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "temperature" => self.temperature = parse_value(key, value)?,
            "aug_sigma" => self.aug_sigma = parse_value(key, value)?,
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "bootstrap" => self.bootstrap = value.parse()?,
            "merge_before_ema" => self.merge_before_ema = parse_value(key, value)?,
            "fresh_centroids" => self.fresh_centroids = parse_value(key, value)?,
            "momentum_per_iteration" => self.momentum_per_iteration = parse_value(key, value)?,
            _ => return Err(Error::InvalidConfig(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` text on top of the defaults.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (line, k, v) in parse_key_values(text, origin)? {
            cfg.set(&k, &v).map_err(|e| match e {
                Error::InvalidConfig(message) => Error::Parse {
                    path: origin.to_string(),
                    line,
                    message,
                },
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Every key in a fixed order; `parse` of the output reproduces `self`.
    pub fn to_text(&self) -> String {
        let w = self.loss_weights;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("tau_rel", self.tau_rel.to_string());
        kv("tau_remove", self.tau_remove.to_string());
        kv("tau_merge", self.tau_merge.to_string());
        kv("alpha", self.alpha.to_string());
        kv("k_per_pid", self.k_per_pid.to_string());
        kv("lambda_momentum", self.lambda_momentum.to_string());
        kv("n_p", self.n_p.to_string());
        kv("n_k", self.n_k.to_string());
        kv("queue_epochs", self.queue_epochs.to_string());
        kv("iterations_per_epoch", self.iterations_per_epoch.to_string());
        kv("w_ins", w.w_ins.to_string());
        kv("w_aug", w.w_aug.to_string());
        kv("w_cen", w.w_cen.to_string());
        kv("w_cc", w.w_cc.to_string());
        kv("strategy", self.strategy.name().to_string());
        kv("seed", self.seed.to_string());
        kv("epochs", self.epochs.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("temperature", self.temperature.to_string());
        kv("aug_sigma", self.aug_sigma.to_string());
        kv("embed_dim", self.embed_dim.to_string());
        kv("bootstrap", self.bootstrap.name().to_string());
        kv("merge_before_ema", self.merge_before_ema.to_string());
        kv("fresh_centroids", self.fresh_centroids.to_string());
        kv("momentum_per_iteration", self.momentum_per_iteration.to_string());
        s
    }
}
