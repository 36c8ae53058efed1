//! Run configuration: one struct holding every knob the trainer, evaluator,
//! and CLI understand, loadable from a TOML file in which any subset of
//! keys may appear (missing keys take the documented defaults, unknown keys
//! are rejected as typos).

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::blocks::StevoDims;
use crate::loss::LossWeights;
use crate::model::ModelDims;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Frames per input window; must be odd so a center frame exists.
    pub n_frames: usize,
    /// Stacked sequence/pair blocks.
    pub blocks: usize,
    /// Attention heads; must divide both `d_s` and `d_p`.
    pub heads: usize,
    /// Per-frame-per-joint feature width.
    pub d_s: usize,
    /// Pair feature width.
    pub d_p: usize,
    /// Hidden width of the pair-product and gated pair updates.
    pub d_o: usize,
    /// Refinement rounds through the shared head.
    pub rounds: usize,
    pub loss: LossWeights,
    /// Switch the coordinate loss from mean distance to mean squared
    /// distance per joint.
    pub squared_coord_loss: bool,
    pub lr0: f64,
    pub epochs: usize,
    /// Sequences per optimizer step; gradients are averaged over the batch.
    pub batch_size: usize,
    pub seed: u64,
    /// Dropout rate on residual branches during training; 0 disables.
    pub dropout: f64,
    /// Mirror each training sample with 50% probability per visit.
    pub flip_augment: bool,
    /// Feed kinematic pair features into the stack (ablation axis).
    pub use_spr: bool,
    /// Run the multi-round refinement head with pose feedback
    /// (ablation axis).
    pub use_recursion: bool,
    pub train_data: PathBuf,
    /// Held-out split for the per-epoch report; falls back to the training
    /// split when absent (the overfit-monitoring setup).
    pub eval_data: Option<PathBuf>,
    pub checkpoint: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let desk = StevoDims::desk(9);
        TrainConfig {
            n_frames: 9,
            blocks: desk.blocks,
            heads: desk.heads,
            d_s: desk.d_s,
            d_p: desk.d_p,
            d_o: desk.d_o,
            rounds: 2,
            loss: LossWeights::default(),
            squared_coord_loss: false,
            lr0: 0.001,
            epochs: 30,
            batch_size: 1,
            seed: 0,
            dropout: 0.0,
            flip_augment: true,
            use_spr: true,
            use_recursion: true,
            train_data: PathBuf::from("train.jsonl"),
            eval_data: None,
            checkpoint: PathBuf::from("model.ckpt"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_frames == 0 || self.n_frames % 2 == 0 {
            return Err(format!("n_frames must be odd and positive, got {}", self.n_frames));
        }
        for (name, v) in [
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("d_s", self.d_s),
            ("d_p", self.d_p),
            ("d_o", self.d_o),
            ("rounds", self.rounds),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(format!("{name} must be positive"));
            }
        }
        if self.d_s % self.heads != 0 || self.d_p % self.heads != 0 {
            return Err(format!(
                "heads ({}) must divide d_s ({}) and d_p ({})",
                self.heads, self.d_s, self.d_p
            ));
        }
        if !self.lr0.is_finite() || self.lr0 <= 0.0 {
            return Err(format!("lr0 must be finite and positive, got {}", self.lr0));
        }
        if !self.dropout.is_finite() || !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        self.loss.validate()
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            stevo: StevoDims {
                blocks: self.blocks,
                heads: self.heads,
                d_s: self.d_s,
                d_p: self.d_p,
                d_o: self.d_o,
                n_max: self.n_frames,
            },
            rounds: self.rounds,
        }
    }

    /// Parses a TOML file and validates the result.
    pub fn load(path: &Path) -> anyhow::Result<TrainConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn from_toml(text: &str) -> anyhow::Result<TrainConfig> {
        let cfg: TrainConfig = toml::from_str(text)?;
        cfg.validate().map_err(anyhow::Error::msg)?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }
}
