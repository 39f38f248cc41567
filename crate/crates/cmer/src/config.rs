//! Flat run configuration: one JSON object covering model dims, data
//! handling, loss constants, and trainer settings. CLI flags override file
//! values; the effective config is echoed into every report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which parameters train. `side_branch` is the memory-efficient setup: both
/// backbones frozen, gradients confined to the side ladder, LoRA text
/// adapters, and projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum Strategy {
    SideBranch,
    LoraBackbone,
    FullFinetune,
}

impl Strategy {
    pub fn tag(self) -> &'static str {
        match self {
            Strategy::SideBranch => "side_branch",
            Strategy::LoraBackbone => "lora_backbone",
            Strategy::FullFinetune => "full_finetune",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Attention head width of the side-branch focus layer, fixed by design;
/// `focus_hidden` must equal `focus_heads * FOCUS_HEAD_DIM`.
pub const FOCUS_HEAD_DIM: usize = 32;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // vision backbone
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub vision_width: usize,
    pub vision_depth: usize,
    pub vision_heads: usize,
    pub vision_mlp_ratio: usize,

    // text backbone
    pub max_len: usize,
    pub text_width: usize,
    pub text_depth: usize,
    pub text_heads: usize,
    pub text_mlp_ratio: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,

    // shared retrieval space
    pub embed_dim: usize,

    // side branch (0 adapters per block sentinel: focus_depth == 0 means one
    // adapter per backbone block)
    pub focus_hidden: usize,
    pub focus_heads: usize,
    pub focus_field: usize,
    pub focus_depth: usize,

    // data
    pub scene_prompt: bool,
    pub min_freq: usize,

    // loss
    pub margin: f64,
    pub beta: f64,
    pub temperature: f64,
    pub learnable_temperature: bool,
    pub queue_mult: usize,

    // trainer
    pub strategy: Strategy,
    pub epochs: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            vision_width: 64,
            vision_depth: 4,
            vision_heads: 4,
            vision_mlp_ratio: 4,

            max_len: 32,
            text_width: 64,
            text_depth: 4,
            text_heads: 4,
            text_mlp_ratio: 4,
            lora_rank: 4,
            lora_alpha: 8.0,

            embed_dim: 32,

            focus_hidden: 64,
            focus_heads: 2,
            focus_field: 2,
            focus_depth: 0,

            scene_prompt: true,
            min_freq: 1,

            margin: 0.2,
            beta: 20.0,
            temperature: 0.07,
            learnable_temperature: true,
            queue_mult: 4,

            strategy: Strategy::SideBranch,
            epochs: 20,
            steps: 0,
            batch_size: 32,
            learning_rate: 5e-4,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            warmup_steps: 0,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Patch-grid side length.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Sequence length of the visual backbone (patches plus CLS).
    pub fn vision_seq(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    /// Adapter count: `focus_depth` or, when 0, one per backbone block.
    pub fn adapters(&self) -> usize {
        if self.focus_depth == 0 {
            self.vision_depth
        } else {
            self.focus_depth
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.channels == 0 {
            return fail("channels must be positive".into());
        }
        if self.vision_heads == 0 || self.vision_width % self.vision_heads != 0 {
            return fail(format!(
                "vision_width {} not divisible by vision_heads {}",
                self.vision_width, self.vision_heads
            ));
        }
        if self.text_heads == 0 || self.text_width % self.text_heads != 0 {
            return fail(format!(
                "text_width {} not divisible by text_heads {}",
                self.text_width, self.text_heads
            ));
        }
        if self.vision_depth == 0 || self.text_depth == 0 {
            return fail("encoder depth must be at least 1".into());
        }
        if self.max_len < 3 {
            return fail(format!("max_len {} < 3 (BOS + token + EOS)", self.max_len));
        }
        if self.lora_rank == 0 || self.lora_rank > self.text_width {
            return fail(format!(
                "lora_rank {} outside [1, {}]",
                self.lora_rank, self.text_width
            ));
        }
        if self.embed_dim == 0 {
            return fail("embed_dim must be positive".into());
        }
        if self.focus_hidden != self.focus_heads * FOCUS_HEAD_DIM {
            return fail(format!(
                "focus_hidden {} != focus_heads {} * head_dim {}",
                self.focus_hidden, self.focus_heads, FOCUS_HEAD_DIM
            ));
        }
        let n = self.grid();
        if self.focus_field == 0 || n % self.focus_field != 0 {
            return fail(format!(
                "focus_field {} does not divide patch grid {}",
                self.focus_field, n
            ));
        }
        let d_f = self.adapters();
        if d_f > self.vision_depth || self.vision_depth % d_f != 0 {
            return fail(format!(
                "focus_depth {} incompatible with vision_depth {}",
                d_f, self.vision_depth
            ));
        }
        if self.batch_size < 2 {
            return fail(format!(
                "batch_size {} < 2 (in-batch negatives required)",
                self.batch_size
            ));
        }
        if self.learning_rate <= 0.0 {
            return fail("learning_rate must be positive".into());
        }
        if self.epochs == 0 && self.steps == 0 {
            return fail("one of epochs/steps must be positive".into());
        }
        if self.margin <= 0.0 {
            return fail("margin must be positive".into());
        }
        if self.beta < 0.0 {
            return fail("beta must be non-negative".into());
        }
        if self.temperature <= 0.0 {
            return fail("temperature must be positive".into());
        }
        Ok(())
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }
}
