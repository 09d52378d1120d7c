//! Run configuration: one JSON file holding every dimension and training knob.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{config_err, Result, SeedError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_size: usize,
    pub heldout_size: usize,
    /// ±1 px center jitter, giving several distinct images per caption.
    pub jitter: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_size: 2048, heldout_size: 128, jitter: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VitConfig {
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self { patch: 8, width: 64, depth: 1, heads: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextEncoderConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    /// Dimension of the shared image-text contrastive space.
    pub embed_dim: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self { width: 32, depth: 1, heads: 4, embed_dim: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    /// Number of generation-space tokens per caption.
    pub tokens: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub decoder_hidden: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { tokens: 16, width: 32, depth: 1, heads: 4, decoder_hidden: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QFormerConfig {
    pub queries: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub tau_init: f64,
    pub tau_min: f64,
    pub tau_max: f64,
}

impl Default for QFormerConfig {
    fn default() -> Self {
        Self { queries: 8, width: 32, depth: 2, heads: 4, tau_init: 0.07, tau_min: 0.01, tau_max: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VqMetric {
    L2,
    Cosine,
}

/// What the reverse Q-Former cross-attends to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RevqInput {
    Entries,
    Reconstructed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqConfig {
    pub codebook_size: usize,
    pub decay: f64,
    pub commitment: f64,
    pub lambda_gen: f64,
    pub dead_threshold: f64,
    pub metric: VqMetric,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub revq_depth: usize,
    pub revq_heads: usize,
    pub revq_input: RevqInput,
    /// Also update the causal Q-Former during stage II.
    pub tune_qformer: bool,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            codebook_size: 64,
            decay: 0.99,
            commitment: 0.25,
            lambda_gen: 1.0,
            dead_threshold: 1e-3,
            metric: VqMetric::L2,
            decoder_depth: 2,
            decoder_heads: 4,
            revq_depth: 2,
            revq_heads: 4,
            revq_input: RevqInput::Entries,
            tune_qformer: false,
        }
    }
}

/// How visual tokens enter the language model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualInput {
    /// Codebook entry of the code, projected by a fully-connected layer.
    CodebookEntry,
    /// Fresh learned embedding per code id, projected the same way.
    LearnedEmbedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub context: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub visual_input: VisualInput,
    /// Epochs of caption-only (image-to-text) training before joint training.
    pub warmup_epochs: usize,
    /// Train a separate output head for the visual-code rows of the vocabulary.
    pub train_visual_head: bool,
    pub max_caption_tokens: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            width: 64,
            depth: 2,
            heads: 4,
            context: 32,
            lora_rank: 4,
            lora_alpha: 8.0,
            visual_input: VisualInput::CodebookEntry,
            warmup_epochs: 1,
            train_visual_head: true,
            max_caption_tokens: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
}

impl OptimConfig {
    fn new(lr: f64, epochs: usize, batch_size: usize) -> Self {
        Self { lr, epochs, batch_size, clip_norm: Some(1.0) }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self::new(1e-3, 10, 64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub backbone_contrastive: OptimConfig,
    /// Fixed temperature of the backbone image-text alignment.
    pub backbone_tau: f64,
    pub backbone_decoder: OptimConfig,
    pub stage1: OptimConfig,
    pub stage2: OptimConfig,
    pub lm_pretrain: OptimConfig,
    pub multimodal: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            backbone_contrastive: OptimConfig::new(2e-3, 30, 64),
            backbone_tau: 0.07,
            backbone_decoder: OptimConfig::new(2e-3, 80, 32),
            stage1: OptimConfig::new(2e-3, 12, 64),
            stage2: OptimConfig::new(3e-3, 30, 32),
            lm_pretrain: OptimConfig::new(3e-3, 10, 32),
            multimodal: OptimConfig::new(1e-2, 12, 32),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub workdir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { workdir: PathBuf::from("runs/default") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub vit: VitConfig,
    pub text: TextEncoderConfig,
    pub generation: GenerationConfig,
    pub qformer: QFormerConfig,
    pub vq: VqConfig,
    pub lm: LmConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 1234,
            data: DataConfig::default(),
            vit: VitConfig::default(),
            text: TextEncoderConfig::default(),
            generation: GenerationConfig::default(),
            qformer: QFormerConfig::default(),
            vq: VqConfig::default(),
            lm: LmConfig::default(),
            train: TrainConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn check_heads(errs: &mut Vec<String>, field: &str, width: usize, heads: usize) {
    if width == 0 {
        errs.push(format!("{field}.width must be positive"));
    } else if heads == 0 || !width.is_multiple_of(heads) {
        errs.push(format!("{field}.width ({width}) must be divisible by {field}.heads ({heads})"));
    }
}

impl Config {
    /// Number of ViT tokens (grid side squared).
    pub fn vit_tokens(&self) -> usize {
        let side = crate::data::IMAGE_SIDE / self.vit.patch;
        side * side
    }

    /// Every violated constraint, each naming its field.
    pub fn violations(&self) -> Vec<String> {
        let mut e = Vec::new();
        if self.data.train_size == 0 {
            e.push("data.train_size must be positive".into());
        }
        if self.data.heldout_size == 0 || self.data.heldout_size >= crate::data::NUM_SPECS {
            e.push("data.heldout_size must be in 1..270".into());
        }
        if self.vit.patch == 0 || !crate::data::IMAGE_SIDE.is_multiple_of(self.vit.patch) {
            e.push("vit.patch must divide the 32-pixel image side".into());
        }
        check_heads(&mut e, "vit", self.vit.width, self.vit.heads);
        check_heads(&mut e, "text", self.text.width, self.text.heads);
        if self.text.embed_dim == 0 {
            e.push("text.embed_dim must be positive".into());
        }
        check_heads(&mut e, "generation", self.generation.width, self.generation.heads);
        if self.generation.tokens == 0 {
            e.push("generation.tokens must be positive".into());
        }
        if self.generation.decoder_hidden == 0 {
            e.push("generation.decoder_hidden must be positive".into());
        }
        check_heads(&mut e, "qformer", self.qformer.width, self.qformer.heads);
        if self.qformer.queries < 2 {
            e.push("qformer.queries must be ≥ 2".into());
        }
        let q = &self.qformer;
        if !(q.tau_min > 0.0 && q.tau_min <= q.tau_init && q.tau_init <= q.tau_max) {
            e.push("qformer.tau_init must lie in [tau_min, tau_max] with tau_min > 0".into());
        }
        if self.vq.codebook_size < 2 {
            e.push("codebook size must be ≥ 2 (vq.codebook_size)".into());
        }
        if !(0.0..=1.0).contains(&self.vq.decay) {
            e.push("vq.decay must be in [0, 1]".into());
        }
        if !self.qformer.width.is_multiple_of(self.vq.decoder_heads.max(1)) || self.vq.decoder_heads == 0 {
            e.push("vq.decoder_heads must divide qformer.width".into());
        }
        if !self.generation.width.is_multiple_of(self.vq.revq_heads.max(1)) || self.vq.revq_heads == 0 {
            e.push("vq.revq_heads must divide generation.width".into());
        }
        check_heads(&mut e, "lm", self.lm.width, self.lm.heads);
        if self.lm.lora_rank == 0 {
            e.push("lm.lora_rank must be ≥ 1".into());
        }
        let longest = 1 + 1 + self.qformer.queries + 1 + 3 + crate::data::CAPTION_LEN + 1;
        if self.lm.context < longest {
            e.push(format!("lm.context ({}) must hold the longest sequence ({longest})", self.lm.context));
        }
        let t = &self.train;
        for (name, o) in [
            ("train.backbone_contrastive", &t.backbone_contrastive),
            ("train.backbone_decoder", &t.backbone_decoder),
            ("train.stage1", &t.stage1),
            ("train.stage2", &t.stage2),
            ("train.lm_pretrain", &t.lm_pretrain),
            ("train.multimodal", &t.multimodal),
        ] {
            if o.lr <= 0.0 || o.batch_size == 0 {
                e.push(format!("{name}: lr and batch_size must be positive"));
            }
        }
        e
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(config_err("load_config", v.join("; ")))
        }
    }
}

/// Dotted paths present in `given` but absent from `reference`.
fn unknown_keys(given: &Value, reference: &Value, path: &str, out: &mut Vec<String>) {
    if let (Value::Object(g), Value::Object(r)) = (given, reference) {
        for (k, v) in g {
            let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
            match r.get(k) {
                Some(rv) => unknown_keys(v, rv, &p, out),
                None => out.push(p),
            }
        }
    }
}

/// Parses and validates a config. Returns the config plus one warning per unknown key.
pub fn parse_config(text: &str) -> Result<(Config, Vec<String>)> {
    let value: Value = serde_json::from_str(text)?;
    let reference = serde_json::to_value(Config::default())?;
    let mut unknown = Vec::new();
    unknown_keys(&value, &reference, "", &mut unknown);
    let cfg: Config = serde_json::from_value(value)?;
    cfg.validate()?;
    let warnings = unknown.into_iter().map(|k| format!("unknown config key ignored: {k}")).collect();
    Ok((cfg, warnings))
}

pub fn load_config(path: &Path) -> Result<(Config, Vec<String>)> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => config_err("load_config", format!("config file not found: {}", path.display())),
        _ => SeedError::Io(e),
    })?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        let text = serde_json::to_string_pretty(&Config::default()).unwrap();
        let (cfg, warnings) = parse_config(&text).unwrap();
        assert_eq!(cfg, Config::default());
        assert!(warnings.is_empty());
        assert_eq!(cfg.vit_tokens(), 16);
    }

    #[test]
    fn codebook_of_one_is_rejected() {
        let err = parse_config(r#"{"vq": {"codebook_size": 1}}"#).unwrap_err().to_string();
        assert!(err.contains("codebook size must be ≥ 2"), "{err}");
    }

    #[test]
    fn unknown_keys_warn_and_proceed() {
        let (cfg, warnings) = parse_config(r#"{"seed": 5, "colour": 1, "vq": {"speed": 2}}"#).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(warnings.len(), 2);
        assert!(warnings.iter().any(|w| w.contains("vq.speed")));
    }

    #[test]
    fn all_violations_are_reported() {
        let err = parse_config(r#"{"qformer": {"queries": 1, "heads": 3}, "vq": {"codebook_size": 0}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("qformer.queries") && err.contains("qformer.width") && err.contains("codebook size"), "{err}");
    }

    #[test]
    fn parse_and_missing_file_errors_differ() {
        let parse = parse_config("{not json").unwrap_err().to_string();
        let missing = load_config(Path::new("/no/such/config.json")).unwrap_err().to_string();
        assert_ne!(parse, missing);
        assert!(missing.contains("not found"));
    }
}
