use rand::Rng;

use super::layers::{Init, Linear, MlpBlock};
use super::params::ParamStore;
use crate::error::Result;
use crate::kernel::{Mode, Tape, Var};
use crate::scalar::Scalar;

/// Regresses one box per role from `[verb; role; head-averaged layer-1
/// cross-attention scores]`. Output rows are `(cx, cy, h, w)` in `[0,1]`.
#[derive(Debug, Clone)]
pub struct BoxDecoder {
    pub block: MlpBlock,
    pub out: Linear,
}

impl BoxDecoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        dim: usize,
        patch_count: usize,
        hidden: usize,
        block_dropout: f64,
        rng: &mut R,
    ) -> Self {
        let block = MlpBlock::new(store, "boxes.block", 2 * dim + patch_count, hidden, block_dropout, rng);
        let out = Linear::new(store, "boxes.out", hidden, 4, Init::Xavier, rng);
        Self { block, out }
    }

    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        verb_role: Var,
        scores: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let x = tape.concat_cols(&[verb_role, scores])?;
        let h = self.block.forward(tape, p, x, mode, rng)?;
        let o = self.out.forward(tape, p, h)?;
        Ok(tape.sigmoid(o))
    }
}
