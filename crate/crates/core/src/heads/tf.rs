use rand::Rng;

use super::layers::{Classifier, FeedForward, Init, LayerNorm, Linear};
use super::params::{ParamId, ParamStore};
use crate::error::Result;
use crate::kernel::init::xavier_uniform;
use crate::kernel::{Mode, Tape, Var};
use crate::scalar::Scalar;

/// Pre-norm encoder layer: self-attention and feed-forward, each residual.
/// The key projection has no bias: a key offset shifts every score of a
/// query equally and cancels in the softmax.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub norm_attn: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

/// Jointly predicts the nouns of all roles of a frame.
#[derive(Debug, Clone)]
pub struct TfHead {
    pub project: Linear,
    pub positional: Option<ParamId>,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNorm,
    pub classifier: Classifier,
    pub heads: usize,
}

impl TfHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        dim: usize,
        width: usize,
        layers: usize,
        heads: usize,
        ff: usize,
        nouns: usize,
        max_roles: usize,
        positional: bool,
        classifier_dropout: f64,
        rng: &mut R,
    ) -> Self {
        let project = Linear::new(store, "tf.project", 3 * dim, width, Init::Xavier, rng);
        let positional = positional
            .then(|| store.add("tf.positional", xavier_uniform(max_roles, width, rng)));
        let layers = (0..layers)
            .map(|i| {
                let n = format!("tf.layer{}", i);
                EncoderLayer {
                    norm_attn: LayerNorm::new(store, &format!("{}.norm_attn", n), width),
                    query: Linear::new(store, &format!("{}.query", n), width, width, Init::Xavier, rng),
                    key: Linear::without_bias(store, &format!("{}.key", n), width, width, Init::Xavier, rng),
                    value: Linear::new(store, &format!("{}.value", n), width, width, Init::Xavier, rng),
                    output: Linear::new(store, &format!("{}.output", n), width, width, Init::Xavier, rng),
                    norm_ff: LayerNorm::new(store, &format!("{}.norm_ff", n), width),
                    ff: FeedForward::new(store, &format!("{}.ff", n), width, ff, rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(store, "tf.final_norm", width);
        let classifier = Classifier::new(store, "tf.classifier", width, nouns, classifier_dropout, rng);
        Self {
            project,
            positional,
            layers,
            final_norm,
            classifier,
            heads,
        }
    }

    /// `x` is `[batch*slots × 3d]`; `mask` marks real slots. Returns the
    /// logits for every slot and the self-attention weights of each layer.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        x: Var,
        batch: usize,
        slots: usize,
        mask: &[bool],
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Var, Vec<Var>)> {
        let mut h = self.project.forward(tape, p, x)?;
        if let Some(pos) = self.positional {
            let idx: Vec<usize> = (0..batch * slots).map(|s| s % slots).collect();
            let pe = tape.gather_rows(p[pos.0], &idx)?;
            h = tape.add(h, pe)?;
        }
        let mut attn = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let n = layer.norm_attn.forward(tape, p, h)?;
            let q = layer.query.forward(tape, p, n)?;
            let k = layer.key.forward(tape, p, n)?;
            let v = layer.value.forward(tape, p, n)?;
            let w = tape.attention_weights(q, k, batch, self.heads, Some(mask))?;
            attn.push(w);
            let a = tape.attention_apply(w, v, batch, self.heads)?;
            let o = layer.output.forward(tape, p, a)?;
            h = tape.add(h, o)?;
            let n = layer.norm_ff.forward(tape, p, h)?;
            let f = layer.ff.forward(tape, p, n)?;
            h = tape.add(h, f)?;
        }
        let h = self.final_norm.forward(tape, p, h)?;
        let logits = self.classifier.forward(tape, p, h, mode, rng)?;
        Ok((logits, attn))
    }
}
