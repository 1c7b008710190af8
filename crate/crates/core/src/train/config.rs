use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{EncoderTag, Vocab};
use crate::error::{Result, SituError};
use crate::heads::{ModelKind, ModelSpec, RoleTokens};
use crate::losses::LossMode;
use crate::metrics::{Aggregation, ValueMode};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub frames: Option<PathBuf>,
    pub dev_frames: Option<PathBuf>,
    pub store: Option<PathBuf>,
    /// Fixed vocabulary; built from the training frames when absent.
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
    /// Verb checkpoint whose ranking feeds top-1 / top-5 evaluation.
    pub verb_checkpoint: Option<PathBuf>,
}

/// Training and evaluation settings. Architecture sizes left as `None`
/// take per-model defaults in [`Config::resolved`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelKind,
    pub encoder: EncoderTag,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub hidden: Option<usize>,
    pub width: usize,
    pub ff: usize,
    pub max_roles: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_gamma: f64,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossMode,
    pub role_tokens: RoleTokens,
    pub value_mode: ValueMode,
    pub aggregation: Aggregation,
    pub positional: bool,
    pub boxes: bool,
    pub box_hidden: usize,
    pub box_weight: f64,
    pub classifier_dropout: f64,
    pub block_dropout: f64,
    /// L2-normalise every embedding before use.
    pub normalize: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Log every n-th optimizer step (0 disables step logging).
    pub log_every: usize,
    pub paths: Paths,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            model: ModelKind::Mlp,
            encoder: EncoderTag::B32,
            layers: None,
            heads: None,
            hidden: None,
            width: 512,
            ff: 2048,
            max_roles: 6,
            batch_size: 64,
            lr: 0.001,
            lr_gamma: 0.95,
            epochs: 40,
            seed: 0,
            loss: LossMode::Maxe,
            role_tokens: RoleTokens::Fixed,
            value_mode: ValueMode::AnyRole,
            aggregation: Aggregation::Micro,
            positional: false,
            boxes: false,
            box_hidden: 1024,
            box_weight: 1.0,
            classifier_dropout: 0.5,
            block_dropout: 0.2,
            normalize: false,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            log_every: 1,
            paths: Paths::default(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SituError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| SituError::Config(format!("{}: {}", path.display(), e)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| SituError::io(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Applies one `key=value` override. Dotted keys reach nested fields
    /// (`paths.store=...`); values parse as JSON, falling back to a string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| SituError::Config(format!("override {:?} is not key=value", assignment)))?;
        let value: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut tree = serde_json::to_value(&*self).expect("config serialises");
        let mut slot = &mut tree;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| SituError::Config(format!("unknown config key {:?}", key)))?;
        }
        *slot = value;
        *self = serde_json::from_value(tree)
            .map_err(|e| SituError::Config(format!("override {:?}: {}", assignment, e)))?;
        Ok(())
    }

    /// Copy with every per-model default filled in.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let (layers, heads, hidden) = match self.model {
            ModelKind::VerbMlp => (1, 0, 1024),
            ModelKind::Mlp => (3, 0, 1024),
            ModelKind::Tf => (4, 8, 1024),
            ModelKind::Xtf => (4, 1, 1024),
        };
        c.layers.get_or_insert(layers);
        c.heads.get_or_insert(heads);
        c.hidden.get_or_insert(hidden);
        c
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_roles", self.max_roles),
            ("width", self.width),
            ("ff", self.ff),
        ] {
            if v == 0 {
                return Err(SituError::Config(format!("{} must be positive", name)));
            }
        }
        if !(self.lr > 0.0) {
            return Err(SituError::Config("lr must be positive".into()));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return Err(SituError::Config("lr_gamma must lie in (0,1]".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(SituError::Config("beta1, beta2 must lie in [0,1) and eps be positive".into()));
        }
        if self.box_weight < 0.0 {
            return Err(SituError::Config("box_weight must be nonnegative".into()));
        }
        Ok(())
    }

    /// Model layout for a dataset with the given vocabulary and embedding geometry.
    pub fn model_spec(&self, vocab: &Vocab, dim: usize, patch_count: usize) -> Result<ModelSpec> {
        self.validate()?;
        let c = self.resolved();
        if c.model.predicts_nouns() && vocab.max_frame_len() > c.max_roles {
            return Err(SituError::Config(format!(
                "a verb frame has {} roles but max_roles is {}",
                vocab.max_frame_len(),
                c.max_roles
            )));
        }
        let spec = ModelSpec {
            kind: c.model,
            dim,
            patch_count,
            n_verbs: vocab.n_verbs(),
            n_roles: vocab.n_roles(),
            n_nouns: vocab.n_nouns(),
            layers: c.layers.unwrap_or_default(),
            heads: c.heads.unwrap_or_default(),
            hidden: c.hidden.unwrap_or_default(),
            width: c.width,
            ff: c.ff,
            max_roles: c.max_roles,
            role_tokens: c.role_tokens,
            positional: c.positional,
            boxes: c.boxes,
            box_hidden: c.box_hidden,
            classifier_dropout: c.classifier_dropout,
            block_dropout: c.block_dropout,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let mut c = Config::default();
        assert_eq!((c.batch_size, c.lr, c.max_roles), (64, 0.001, 6));
        c.set("model=tf").unwrap();
        c.set("lr=0.01").unwrap();
        c.set("paths.store=/tmp/x.bin").unwrap();
        c.set("encoder=L14_336").unwrap();
        assert_eq!(c.model, ModelKind::Tf);
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.paths.store.as_deref(), Some(Path::new("/tmp/x.bin")));
        assert_eq!(c.encoder, EncoderTag::L14At336);
        let r = c.resolved();
        assert_eq!((r.layers, r.heads), (Some(4), Some(8)));
        assert!(c.set("nope=1").is_err());
        assert!(c.set("lr").is_err());
        assert!(c.set("lr=\"fast\"").is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = Config::default().resolved();
        let back: Config = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert!(serde_json::from_str::<Config>(r#"{"bogus": 1}"#).is_err());
    }
}
