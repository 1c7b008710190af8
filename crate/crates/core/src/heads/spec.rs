use serde::{Deserialize, Serialize};

use crate::error::{Result, SituError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    VerbMlp,
    Mlp,
    Tf,
    Xtf,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::VerbMlp => "verb_mlp",
            ModelKind::Mlp => "mlp",
            ModelKind::Tf => "tf",
            ModelKind::Xtf => "xtf",
        }
    }

    pub fn predicts_nouns(self) -> bool {
        self != ModelKind::VerbMlp
    }
}

impl std::str::FromStr for ModelKind {
    type Err = SituError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "verb_mlp" => Ok(ModelKind::VerbMlp),
            "mlp" => Ok(ModelKind::Mlp),
            "tf" => Ok(ModelKind::Tf),
            "xtf" => Ok(ModelKind::Xtf),
            other => Err(SituError::Config(format!("unknown model {:?}", other))),
        }
    }
}

/// Source of the role vectors fed to the heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTokens {
    /// Text embeddings from the store, frozen.
    Fixed,
    /// A trainable `[roles × dim]` table.
    Learned,
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Width of image and text embeddings.
    pub dim: usize,
    /// Tokens per image including the class token (used by `xtf`).
    pub patch_count: usize,
    pub n_verbs: usize,
    pub n_roles: usize,
    pub n_nouns: usize,
    /// Hidden layers (verb MLP), MLP blocks, or encoder / cross-attention layers.
    pub layers: usize,
    pub heads: usize,
    /// Hidden width of the verb MLP and MLP blocks.
    pub hidden: usize,
    /// Model width of `tf` / `xtf` tokens.
    pub width: usize,
    /// Feed-forward width inside `tf` / `xtf` layers.
    pub ff: usize,
    pub max_roles: usize,
    pub role_tokens: RoleTokens,
    pub positional: bool,
    pub boxes: bool,
    pub box_hidden: usize,
    pub classifier_dropout: f64,
    pub block_dropout: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("n_verbs", self.n_verbs),
            ("n_nouns", self.n_nouns),
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("max_roles", self.max_roles),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(SituError::Config(format!("{} must be positive", name)));
            }
        }
        if matches!(self.kind, ModelKind::Tf | ModelKind::Xtf) {
            if self.heads == 0 || self.width == 0 || self.ff == 0 {
                return Err(SituError::Config("heads, width and ff must be positive".into()));
            }
            if self.width % self.heads != 0 {
                return Err(SituError::Config(format!(
                    "width {} not divisible by {} heads",
                    self.width, self.heads
                )));
            }
        }
        if self.kind == ModelKind::Xtf && self.patch_count == 0 {
            return Err(SituError::Config("xtf needs patch tokens".into()));
        }
        if self.boxes {
            if self.kind != ModelKind::Xtf {
                return Err(SituError::Config(
                    "the box decoder reads cross-attention scores and needs model xtf".into(),
                ));
            }
            if self.box_hidden == 0 {
                return Err(SituError::Config("box_hidden must be positive".into()));
            }
        }
        for (name, r) in [
            ("classifier_dropout", self.classifier_dropout),
            ("block_dropout", self.block_dropout),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(SituError::Config(format!("{} must lie in [0,1)", name)));
            }
        }
        Ok(())
    }
}
