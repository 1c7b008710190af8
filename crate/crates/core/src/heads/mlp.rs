use rand::Rng;

use super::layers::{Classifier, Init, LayerNorm, Linear, MlpBlock};
use super::params::ParamStore;
use crate::error::Result;
use crate::kernel::{Mode, Tape, Var};
use crate::scalar::Scalar;

/// Per-role noun classifier over `[image; verb; role]`.
///
/// Block 1 is Linear + LayerNorm; blocks 2..l are Linear, Dropout, ReLU,
/// LayerNorm.
#[derive(Debug, Clone)]
pub struct MlpHead {
    pub project: Linear,
    pub project_norm: LayerNorm,
    pub blocks: Vec<MlpBlock>,
    pub classifier: Classifier,
}

impl MlpHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        dim: usize,
        layers: usize,
        hidden: usize,
        nouns: usize,
        block_dropout: f64,
        classifier_dropout: f64,
        rng: &mut R,
    ) -> Self {
        let project = Linear::new(store, "mlp.block0.linear", 3 * dim, hidden, Init::Xavier, rng);
        let project_norm = LayerNorm::new(store, "mlp.block0.norm", hidden);
        let blocks = (1..layers)
            .map(|i| MlpBlock::new(store, &format!("mlp.block{}", i), hidden, hidden, block_dropout, rng))
            .collect();
        let classifier = Classifier::new(store, "mlp.classifier", hidden, nouns, classifier_dropout, rng);
        Self {
            project,
            project_norm,
            blocks,
            classifier,
        }
    }

    pub fn input_width(dim: usize) -> usize {
        3 * dim
    }

    /// `x` is `[n × 3d]`; returns `[n × nouns]`.
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let h = self.project.forward(tape, p, x)?;
        let mut h = self.project_norm.forward(tape, p, h)?;
        for block in &self.blocks {
            h = block.forward(tape, p, h, mode, rng)?;
        }
        self.classifier.forward(tape, p, h, mode, rng)
    }
}
