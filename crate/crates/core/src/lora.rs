//! Low-rank adaptation of frozen linear projections.
//!
//! A frozen base weight `W0 [d_out × k]` is augmented with a trainable
//! update `ΔW = s · B · A`, `A [r × k]`, `B [d_out × r]`, where the scale
//! `s` is `alpha / r` (standard) or `alpha / √r` (rank-stabilised). `B`
//! starts at zero so a fresh adapter leaves the base function unchanged.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Node, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    Standard,
    RankStabilised,
}

/// Which attention projections receive adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraTargets {
    pub q: bool,
    pub v: bool,
}

impl Default for LoraTargets {
    fn default() -> Self {
        LoraTargets { q: true, v: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub scaling_mode: ScalingMode,
    #[serde(default)]
    pub targets: LoraTargets,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            alpha: 8.0,
            dropout: 0.2,
            scaling_mode: ScalingMode::RankStabilised,
            targets: LoraTargets::default(),
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be >= 1".into()));
        }
        if self.alpha <= 0.0 {
            return Err(Error::Config("LoRA alpha must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "LoRA dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !self.targets.q && !self.targets.v {
            return Err(Error::Config("LoRA target set is empty".into()));
        }
        Ok(())
    }

    /// Low-rank path scale: alpha/r, or alpha/√r when rank-stabilised.
    pub fn scale(&self) -> f64 {
        match self.scaling_mode {
            ScalingMode::Standard => self.alpha / self.rank as f64,
            ScalingMode::RankStabilised => self.alpha / (self.rank as f64).sqrt(),
        }
    }
}

/// Trainable low-rank factors around one frozen projection.
///
/// The base weight is shared (`Arc`) with the encoder that owns it; it
/// never receives gradients.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    base: Arc<Tensor>,
    pub a: Tensor,
    pub b: Tensor,
    pub config: LoraConfig,
}

impl LoraAdapter {
    /// Fresh adapter: `A ~ N(0, 1/r)`, `B = 0`, so `ΔW = 0` at start.
    pub fn new(base: Arc<Tensor>, config: LoraConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if base.shape().len() != 2 {
            return Err(Error::Config(format!(
                "LoRA base must be 2-D, got {:?}",
                base.shape()
            )));
        }
        let (d_out, k) = (base.shape()[0], base.shape()[1]);
        let max_rank = d_out.min(k) / 2;
        if config.rank > max_rank {
            return Err(Error::Config(format!(
                "LoRA rank {} exceeds min({d_out},{k})/2 = {max_rank}",
                config.rank
            )));
        }
        let std = (1.0 / config.rank as f64).sqrt();
        let a_data: Vec<f64> = (0..config.rank * k)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let a = Tensor::new(vec![config.rank, k], a_data)?.with_grad();
        let b = {
            let mut t = Tensor::zeros(vec![d_out, config.rank]);
            t.set_requires_grad(true);
            t
        };
        Ok(LoraAdapter { base, a, b, config })
    }

    pub fn from_parts(base: Arc<Tensor>, a: Tensor, b: Tensor, config: LoraConfig) -> Result<Self> {
        config.validate()?;
        let (d_out, k) = (base.shape()[0], base.shape()[1]);
        if a.shape() != [config.rank, k] || b.shape() != [d_out, config.rank] {
            return Err(Error::Config(format!(
                "adapter factor shapes A {:?} / B {:?} do not fit base {:?} at rank {}",
                a.shape(),
                b.shape(),
                base.shape(),
                config.rank
            )));
        }
        let mut a = a;
        let mut b = b;
        a.set_requires_grad(true);
        b.set_requires_grad(true);
        Ok(LoraAdapter { base, a, b, config })
    }

    pub fn base(&self) -> &Arc<Tensor> {
        &self.base
    }

    pub fn in_dim(&self) -> usize {
        self.base.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.base.shape()[0]
    }

    /// `s · B · A`, the effective weight update.
    pub fn delta_weight(&self) -> Result<Tensor> {
        let ba = crate::autodiff::matmul(&self.b, &self.a)?;
        let s = self.config.scale();
        Tensor::new(
            ba.shape().to_vec(),
            ba.data().iter().map(|v| s * v).collect(),
        )
    }

    /// `W0 + s · B · A`; forwarding through the merged weight equals the
    /// adapted forward with dropout disabled.
    pub fn merge(&self) -> Result<Tensor> {
        let delta = self.delta_weight()?;
        Tensor::new(
            self.base.shape().to_vec(),
            self.base
                .data()
                .iter()
                .zip(delta.data().iter())
                .map(|(w, d)| w + d)
                .collect(),
        )
    }

    /// Graph forward against a row-major activation `x [T × k]`:
    /// `x·W0ᵀ + s·dropout(x)·Aᵀ·Bᵀ`. Dropout touches only the low-rank
    /// path input and only when `training` is set.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Node,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Node> {
        let base = g.constant(&self.base);
        let a = g.leaf(&self.a);
        let b = g.leaf(&self.b);
        self.forward_bound(g, x, base, a, b, training, rng)
    }

    /// Same as [`LoraAdapter::forward`] but over already-inserted leaves,
    /// so one graph can reuse the parameter nodes across samples.
    pub fn forward_bound(
        &self,
        g: &mut Graph,
        x: Node,
        base: Node,
        a: Node,
        b: Node,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Node> {
        let base_t = g.transpose(base)?;
        let frozen = g.matmul(x, base_t)?;
        let low_in = if training && self.config.dropout > 0.0 {
            g.dropout(x, self.config.dropout, rng)?
        } else {
            x
        };
        let a_t = g.transpose(a)?;
        let b_t = g.transpose(b)?;
        let xa = g.matmul(low_in, a_t)?;
        let xab = g.matmul(xa, b_t)?;
        let delta = g.scale(xab, self.config.scale())?;
        g.add(frozen, delta)
    }
}

// ── parameter accounting ─────────────────────────────────────────────

/// One named weight group with its element count and freeze status.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub count: usize,
    pub trainable: bool,
}

/// Registry of every weight in a model, frozen and trainable alike.
#[derive(Debug, Clone, Default)]
pub struct ParamRegistry {
    entries: Vec<ParamEntry>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, count: usize, trainable: bool) {
        self.entries.push(ParamEntry {
            name: name.into(),
            count,
            trainable,
        });
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|e| e.count).sum()
    }

    pub fn trainable_params(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.count)
            .sum()
    }
}

/// Fraction of all parameters that are trainable, in [0, 1].
pub fn trainable_fraction(registry: &ParamRegistry) -> Result<f64> {
    let total = registry.total_params();
    if registry.entries().is_empty() || total == 0 {
        return Err(Error::Contract(
            "trainable_fraction over an empty parameter registry".into(),
        ));
    }
    Ok(registry.trainable_params() as f64 / total as f64)
}
