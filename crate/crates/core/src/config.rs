//! Experiment configuration: defaults, strict JSON parsing and validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aoa::{ChannelConfig, Fading, Partition};
use crate::error::{Error, Result};
use crate::lowrank_opt::{AdamBiasMode, AdamParams};
use crate::model::Head;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Low-rank local training, superposed upload, quantized both ways.
    Cocofed,
    /// Same local training, full-precision full-matrix exchange.
    Fedavg,
    /// Same local training, one quantized `r x r` payload per layer.
    Perlayer,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cocofed" => Ok(Mode::Cocofed),
            "fedavg" => Ok(Mode::Fedavg),
            "perlayer" => Ok(Mode::Perlayer),
            _ => Err(Error::Config { key: "mode".into(), message: format!("unknown mode '{s}'") }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    /// Number of base stations.
    #[serde(rename = "K")]
    pub k: usize,
    /// UEs (angles) per block.
    #[serde(rename = "U")]
    pub u: usize,
    /// Snapshots per block.
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "N_NB")]
    pub n_nb: usize,
    pub r: usize,
    pub r_a: usize,
    #[serde(rename = "q_U")]
    pub q_u: u8,
    #[serde(rename = "q_D")]
    pub q_d: u8,
    #[serde(rename = "N_loc")]
    pub n_loc: usize,
    pub rounds: usize,
    pub buffer_capacity: usize,
    pub mode: Mode,
    pub partition: Partition,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub adam_bias: AdamBiasMode,
    pub reset_moments_each_round: bool,
    pub gamma: f64,
    pub eta: f64,
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    /// `[input width, output width]` per layer. Defaults to
    /// `[[64, 48], [48, 48], [48, 8 U]]`.
    pub layer_dims: Option<Vec<[usize; 2]>>,
    pub head: Head,
    /// Blocks per local gradient step.
    pub minibatch: usize,
    /// New blocks arriving in each local step.
    pub arrivals_per_step: usize,
    pub test_size: usize,
    pub n_paths: usize,
    pub rician_rho: [f64; 2],
    pub snr_db: [f64; 2],
    pub fading: Fading,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            k: 6,
            u: 3,
            t: 32,
            n_nb: 64,
            r: 24,
            r_a: 60,
            q_u: 2,
            q_d: 8,
            n_loc: 20,
            rounds: 50,
            buffer_capacity: 2048,
            mode: Mode::Cocofed,
            partition: Partition::Iid,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-3,
            adam_bias: AdamBiasMode::Fixed,
            reset_moments_each_round: false,
            gamma: 1e-2,
            eta: 1e-3,
            warmup_steps: 0,
            warmup_lr: 1e-3,
            layer_dims: None,
            head: Head::default(),
            minibatch: 16,
            arrivals_per_step: 1,
            test_size: 2048,
            n_paths: 9,
            rician_rho: [0.0, 15.0],
            snr_db: [0.0, 20.0],
            fading: Fading::default(),
        }
    }
}

fn bad(key: &str, message: impl Into<String>) -> Error {
    Error::Config { key: key.into(), message: message.into() }
}

impl ExperimentConfig {
    /// Layer shapes as `(input width, output width)`.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        match &self.layer_dims {
            Some(d) => d.iter().map(|&[i, o]| (i, o)).collect(),
            None => vec![(64, 48), (48, 48), (48, 8 * self.u)],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layer_shapes().len()
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams { beta1: self.beta1, beta2: self.beta2, epsilon: self.epsilon, bias_mode: self.adam_bias }
    }

    pub fn channel(&self) -> ChannelConfig {
        ChannelConfig {
            n_antennas: self.n_nb,
            n_paths: self.n_paths,
            rician_rho: (self.rician_rho[0], self.rician_rho[1]),
            snr_db: (self.snr_db[0], self.snr_db[1]),
            fading: self.fading,
            ..ChannelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("K", self.k),
            ("U", self.u),
            ("T", self.t),
            ("N_NB", self.n_nb),
            ("r", self.r),
            ("r_a", self.r_a),
            ("buffer_capacity", self.buffer_capacity),
            ("minibatch", self.minibatch),
            ("test_size", self.test_size),
            ("n_paths", self.n_paths),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(bad(key, "must be at least 1"));
            }
        }
        for (key, q) in [("q_U", self.q_u), ("q_D", self.q_d)] {
            if !(1..=32).contains(&q) {
                return Err(bad(key, format!("{q} is outside 1..=32")));
            }
        }
        if self.r_a > u16::MAX as usize {
            return Err(bad("r_a", "must fit the 16-bit payload header"));
        }
        let shapes = self.layer_shapes();
        if shapes.is_empty() {
            return Err(bad("layer_dims", "needs at least one layer"));
        }
        for (l, w) in shapes.windows(2).enumerate() {
            if w[0].1 != w[1].0 {
                return Err(bad(
                    "layer_dims",
                    format!("layer {l} output {} does not feed layer {} input {}", w[0].1, l + 1, w[1].0),
                ));
            }
        }
        if shapes.iter().any(|&(i, o)| i == 0 || o == 0) {
            return Err(bad("layer_dims", "zero width"));
        }
        let last = shapes[shapes.len() - 1].1;
        if !last.is_multiple_of(self.u) {
            return Err(bad("layer_dims", format!("last width {last} is not a multiple of U={}", self.u)));
        }
        let min_dim = shapes.iter().map(|&(i, o)| i.min(o)).min().unwrap_or(0);
        if self.r > min_dim {
            return Err(bad("r", format!("{} exceeds the smallest layer dimension {min_dim}", self.r)));
        }
        if self.u >= self.n_nb {
            return Err(bad("U", "must be smaller than N_NB"));
        }
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(bad(key, format!("{v} is outside [0, 1)")));
            }
        }
        for (key, v) in
            [("epsilon", self.epsilon), ("gamma", self.gamma), ("eta", self.eta), ("warmup_lr", self.warmup_lr)]
        {
            if !(v.is_finite() && v > 0.0) {
                return Err(bad(key, format!("{v} must be positive")));
            }
        }
        if !(self.rician_rho[0] >= 0.0 && self.rician_rho[0] <= self.rician_rho[1]) {
            return Err(bad("rician_rho", "must be a non-negative ordered range"));
        }
        if self.snr_db.iter().any(|x| x.is_nan()) || self.snr_db[0] > self.snr_db[1] {
            return Err(bad("snr_db", "must be an ordered range"));
        }
        Ok(())
    }

    /// Parses JSON text. Keys beginning with `_` are comments.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: serde_json::Value = serde_json::from_str(text)?;
        let obj = value.as_object_mut().ok_or_else(|| bad("<root>", "config must be a JSON object"))?;
        obj.retain(|k, _| !k.starts_with('_'));
        let cfg: Self = serde_json::from_value(value).map_err(|e| {
            let msg = e.to_string();
            let key = msg.split('`').nth(1).map(str::to_string).unwrap_or_else(|| "<config>".into());
            bad(&key, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the canonical JSON form, truncated to 16 characters.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}
