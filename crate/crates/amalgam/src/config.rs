//! Run configuration: model dimensions, variant flags, training schedule.
//!
//! Configs are TOML files with unknown keys rejected, so a typo fails fast
//! instead of silently training the wrong model. The six ablation variants
//! are derived from a base config by [`apply_variant`], which is the single
//! source of truth for the component matrix:
//!
//! | variant   | fusion      | peripheral | foveal | consistency | spatial |
//! |-----------|-------------|------------|--------|-------------|---------|
//! | a2rnn     | none        | -          | -      | -           | -       |
//! | v1        | transformer | x          | -      | -           | -       |
//! | v2        | transformer | x          | x      | -           | -       |
//! | v3        | transformer | x          | x      | x           | -       |
//! | v4        | mlp         | x          | x      | x           | x       |
//! | proposed  | transformer | x          | x      | x           | x       |

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::EnvConfig;
use crate::{Error, Result};

/// How TD queries and BU pseudo-queries are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Transformer encoder-decoder cross-attention (the full model).
    Transformer,
    /// MLP pooling baseline.
    Mlp,
    /// No fusion: TD queries drive point estimation directly.
    None,
}

/// Architecture and loss-toggle configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of top-down attention points / queries.
    pub n_td: usize,
    /// Number of bottom-up attention channels.
    pub n_bu: usize,
    /// TD feature dimension (channels of `f_td`, query width).
    pub d_td: usize,
    /// Feature grid side (square).
    pub grid: usize,
    /// Input frame side (square); must be `4 * grid`.
    pub image: usize,
    /// Joint vector width.
    pub d_joint: usize,
    /// Modality LSTM width.
    pub modality_width: usize,
    /// Shared LSTM width.
    pub shared_width: usize,
    /// Shared-state projection width fed back to modality LSTMs.
    pub proj_width: usize,
    /// Hidden width of the TD query MLP.
    pub td_mlp_hidden: usize,
    /// Attention heads in the fusion transformer.
    pub fusion_heads: usize,
    /// Query fusion mode.
    pub fusion: FusionMode,
    /// Use a single cross-attention block instead of the full
    /// encoder-decoder stack (config alternative; off by default).
    pub fusion_cross_only: bool,
    /// Enable peripheral reconstruction loss.
    pub peripheral: bool,
    /// Enable foveal reconstruction losses.
    pub foveal: bool,
    /// Enable consistency regularizers (BU coordinate + foveal agreement).
    pub consistency: bool,
    /// Enable spatial regularizers (displacement hinge + bounds penalty).
    pub spatial: bool,
    /// Reconstruction loss weight.
    pub alpha: f64,
    /// Regularization loss weight.
    pub beta: f64,
    /// Spatial softmax temperature for BU maps.
    pub tau_bu: f64,
    /// Spatial softmax temperature for TD similarity maps.
    pub tau_td: f64,
    /// Encoder trunk channels (patchify + mixing convs).
    pub enc_mid: usize,
    /// Peripheral decoder mid / narrow channels.
    pub per_mid: usize,
    /// Peripheral decoder channels before the RGB head.
    pub per_narrow: usize,
    /// Foveal decoder mid channels.
    pub fov_mid: usize,
    /// Parameter init / episode shuffling seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_td: 4,
            n_bu: 16,
            d_td: 32,
            grid: 16,
            image: 64,
            d_joint: crate::env::D_JOINT,
            modality_width: 64,
            shared_width: 32,
            proj_width: 16,
            td_mlp_hidden: 64,
            fusion_heads: 2,
            fusion: FusionMode::Transformer,
            fusion_cross_only: false,
            peripheral: true,
            foveal: true,
            consistency: true,
            spatial: true,
            alpha: 0.1,
            beta: 0.1,
            tau_bu: 1.0,
            tau_td: 1.0,
            enc_mid: 12,
            per_mid: 8,
            per_narrow: 4,
            fov_mid: 6,
            seed: 1,
        }
    }
}

impl ModelConfig {
    /// Validate field ranges and cross-field consistency.
    pub fn validate(&self) -> Result<()> {
        let bail = |msg: String| Err(Error::Config(msg));
        if self.n_td < 1 || self.n_bu < 1 {
            return bail(format!("n_td and n_bu must be >= 1, got {} / {}", self.n_td, self.n_bu));
        }
        if self.image != 4 * self.grid {
            return bail(format!(
                "image side must be 4 * grid (patchify stride), got image={} grid={}",
                self.image, self.grid
            ));
        }
        if self.d_td == 0 || self.d_td % self.fusion_heads != 0 {
            return bail(format!(
                "d_td must be a positive multiple of fusion_heads, got d_td={} heads={}",
                self.d_td, self.fusion_heads
            ));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return bail(format!(
                "loss weights must be non-negative, got alpha={} beta={}",
                self.alpha, self.beta
            ));
        }
        if self.tau_bu <= 0.0 || self.tau_td <= 0.0 {
            return bail(format!(
                "temperatures must be positive, got tau_bu={} tau_td={}",
                self.tau_bu, self.tau_td
            ));
        }
        if self.consistency && !self.foveal {
            return bail(
                "consistency regularization requires the foveal pathway (its second term \
                 compares encoder- and decoder-side foveal reconstructions)"
                    .to_string(),
            );
        }
        if self.grid < 2 {
            return bail(format!("grid must be at least 2, got {}", self.grid));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON serialization (embedded in
    /// checkpoints so a snapshot can refuse a mismatched architecture).
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// The six ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    /// Baseline: no fusion, no auxiliary losses.
    A2rnn,
    /// + query fusion + peripheral reconstruction.
    V1,
    /// + foveal reconstruction.
    V2,
    /// + consistency regularization.
    V3,
    /// Full model with MLP fusion instead of the transformer.
    V4,
    /// Full model with transformer fusion.
    Proposed,
}

impl VariantKind {
    /// All six variants in results-table order.
    pub fn all() -> [VariantKind; 6] {
        [
            VariantKind::Proposed,
            VariantKind::A2rnn,
            VariantKind::V1,
            VariantKind::V2,
            VariantKind::V3,
            VariantKind::V4,
        ]
    }

    /// Display name used in the results table.
    pub fn name(&self) -> &'static str {
        match self {
            VariantKind::A2rnn => "A2RNN",
            VariantKind::V1 => "(1)",
            VariantKind::V2 => "(2)",
            VariantKind::V3 => "(3)",
            VariantKind::V4 => "(4)",
            VariantKind::Proposed => "Proposed",
        }
    }

    /// Stable token used in file names and configs.
    pub fn token(&self) -> &'static str {
        match self {
            VariantKind::A2rnn => "a2rnn",
            VariantKind::V1 => "v1",
            VariantKind::V2 => "v2",
            VariantKind::V3 => "v3",
            VariantKind::V4 => "v4",
            VariantKind::Proposed => "proposed",
        }
    }
}

/// Overwrite the variant-controlled flags of `base` for the given variant.
/// All other fields (dimensions, weights, seed) are left untouched.
pub fn apply_variant(base: &ModelConfig, kind: VariantKind) -> ModelConfig {
    let mut cfg = base.clone();
    let (fusion, peripheral, foveal, consistency, spatial) = match kind {
        VariantKind::A2rnn => (FusionMode::None, false, false, false, false),
        VariantKind::V1 => (FusionMode::Transformer, true, false, false, false),
        VariantKind::V2 => (FusionMode::Transformer, true, true, false, false),
        VariantKind::V3 => (FusionMode::Transformer, true, true, true, false),
        VariantKind::V4 => (FusionMode::Mlp, true, true, true, true),
        VariantKind::Proposed => (FusionMode::Transformer, true, true, true, true),
    };
    cfg.fusion = fusion;
    cfg.peripheral = peripheral;
    cfg.foveal = foveal;
    cfg.consistency = consistency;
    cfg.spatial = spatial;
    cfg
}

/// Optimizer and schedule configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Training epochs.
    pub epochs: usize,
    /// Learning rate.
    pub lr: f64,
    /// Global gradient-norm clip (0 disables).
    pub grad_clip: f64,
    /// Epochs at which to write checkpoints (the final epoch is always
    /// checkpointed as well).
    pub checkpoint_epochs: Vec<usize>,
    /// Record a full train record (with query similarity) every N epochs.
    pub record_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            lr: 1e-3,
            grad_clip: 1.0,
            checkpoint_epochs: vec![10, 100, 500],
            record_every: 1,
        }
    }
}

impl TrainConfig {
    /// Validate field ranges.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::Config(format!(
                "grad_clip must be >= 0 (0 disables), got {}",
                self.grad_clip
            )));
        }
        if self.record_every == 0 {
            return Err(Error::Config("record_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Everything one `train` invocation needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Model architecture and loss toggles.
    pub model: ModelConfig,
    /// Optimizer and schedule.
    pub train: TrainConfig,
    /// Scene parameters (for rollouts and success metrics).
    pub env: EnvConfig,
    /// Dataset directory (as written by `gen-data`).
    pub data_dir: String,
    /// Output directory for metrics and checkpoints.
    pub out_dir: String,
}

impl RunConfig {
    /// Validate all sections.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.env.validate()?;
        if self.model.image != self.env.image {
            return Err(Error::Config(format!(
                "model image size {} does not match env image size {}",
                self.model.image, self.env.image
            )));
        }
        if self.model.d_joint != crate::env::D_JOINT {
            return Err(Error::Config(format!(
                "model d_joint {} does not match the arm ({})",
                self.model.d_joint,
                crate::env::D_JOINT
            )));
        }
        Ok(())
    }
}

/// Ablation suite: a base run config fanned out over variants and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    /// Base configuration; each job overrides the variant flags and seed.
    pub base: RunConfig,
    /// Variants to run (default: all six).
    pub variants: Vec<VariantKind>,
    /// Seeds per variant (default: 3 trials).
    pub seeds: Vec<u64>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            base: RunConfig::default(),
            variants: VariantKind::all().to_vec(),
            seeds: vec![1, 2, 3],
        }
    }
}

impl SuiteConfig {
    /// Validate the base config and fan-out lists.
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.variants.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config(
                "ablation suite needs at least one variant and one seed".into(),
            ));
        }
        Ok(())
    }
}

/// Parse a TOML file into any of the config types.
pub fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        SuiteConfig::default().validate().unwrap();
    }

    #[test]
    fn variant_matrix_matches_the_component_table() {
        let base = ModelConfig::default();
        // (fusion, peripheral, foveal, consistency, spatial) per variant.
        let expect = [
            (VariantKind::A2rnn, FusionMode::None, false, false, false, false),
            (VariantKind::V1, FusionMode::Transformer, true, false, false, false),
            (VariantKind::V2, FusionMode::Transformer, true, true, false, false),
            (VariantKind::V3, FusionMode::Transformer, true, true, true, false),
            (VariantKind::V4, FusionMode::Mlp, true, true, true, true),
            (VariantKind::Proposed, FusionMode::Transformer, true, true, true, true),
        ];
        for (kind, fusion, per, fov, cons, spat) in expect {
            let cfg = apply_variant(&base, kind);
            assert_eq!(cfg.fusion, fusion, "{kind:?} fusion");
            assert_eq!(cfg.peripheral, per, "{kind:?} peripheral");
            assert_eq!(cfg.foveal, fov, "{kind:?} foveal");
            assert_eq!(cfg.consistency, cons, "{kind:?} consistency");
            assert_eq!(cfg.spatial, spat, "{kind:?} spatial");
            cfg.validate().unwrap_or_else(|e| panic!("{kind:?} invalid: {e}"));
        }
        assert_eq!(VariantKind::all().len(), 6);
    }

    #[test]
    fn inconsistent_flag_combinations_are_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.consistency = true;
        cfg.foveal = false;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::default();
        cfg.image = 128; // grid stays 16
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::default();
        cfg.alpha = -0.5;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::default();
        cfg.d_td = 33; // not a multiple of fusion_heads = 2
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toml_round_trip_preserves_the_config() {
        let mut cfg = RunConfig::default();
        cfg.model.n_td = 3;
        cfg.train.epochs = 42;
        cfg.data_dir = "data".into();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "epochs = 5\nlerning_rate = 0.1\n";
        let res: std::result::Result<TrainConfig, _> = toml::from_str(text);
        assert!(res.is_err(), "typo silently accepted");
    }

    #[test]
    fn config_hash_tracks_architecture_changes() {
        let a = ModelConfig::default().hash();
        let mut cfg = ModelConfig::default();
        cfg.n_td = 5;
        assert_ne!(a, cfg.hash());
        assert_eq!(a, ModelConfig::default().hash());
    }

    #[test]
    fn variant_serde_tokens_are_stable() {
        let json = serde_json::to_string(&VariantKind::A2rnn).unwrap();
        assert_eq!(json, "\"a2rnn\"");
        let back: VariantKind = serde_json::from_str("\"proposed\"").unwrap();
        assert_eq!(back, VariantKind::Proposed);
    }
}
