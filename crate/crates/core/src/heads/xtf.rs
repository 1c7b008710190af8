use rand::Rng;

use super::layers::{Classifier, FeedForward, Init, LayerNorm, Linear};
use super::params::ParamStore;
use crate::error::Result;
use crate::kernel::{Mode, Tape, Var};
use crate::scalar::Scalar;

/// Cross-attention from the verb-role query stream to projected patch
/// tokens (keys equal values), then a feed-forward; both residual.
#[derive(Debug, Clone)]
pub struct CrossLayer {
    pub norm_query: LayerNorm,
    pub query: Linear,
    /// Patch projection shared by keys and values.
    pub patch: Linear,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct XtfHead {
    pub project: Linear,
    pub layers: Vec<CrossLayer>,
    pub final_norm: LayerNorm,
    pub classifier: Classifier,
    pub heads: usize,
}

impl XtfHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        dim: usize,
        patch_dim: usize,
        width: usize,
        layers: usize,
        heads: usize,
        ff: usize,
        nouns: usize,
        classifier_dropout: f64,
        rng: &mut R,
    ) -> Self {
        let project = Linear::new(store, "xtf.project", 2 * dim, width, Init::Xavier, rng);
        let layers = (0..layers)
            .map(|i| {
                let n = format!("xtf.layer{}", i);
                CrossLayer {
                    norm_query: LayerNorm::new(store, &format!("{}.norm_query", n), width),
                    query: Linear::new(store, &format!("{}.query", n), width, width, Init::Xavier, rng),
                    patch: Linear::new(store, &format!("{}.patch", n), patch_dim, width, Init::Xavier, rng),
                    norm_ff: LayerNorm::new(store, &format!("{}.norm_ff", n), width),
                    ff: FeedForward::new(store, &format!("{}.ff", n), width, ff, rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(store, "xtf.final_norm", width);
        let classifier = Classifier::new(store, "xtf.classifier", width, nouns, classifier_dropout, rng);
        Self {
            project,
            layers,
            final_norm,
            classifier,
            heads,
        }
    }

    /// `verb_role` is `[batch*slots × 2d]`, `patches` is
    /// `[batch*p × patch_dim]`. Returns per-slot logits and each layer's
    /// cross-attention weights (`[batch*heads*slots × p]`).
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        verb_role: Var,
        patches: Var,
        batch: usize,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Var, Vec<Var>)> {
        let mut h = self.project.forward(tape, p, verb_role)?;
        let mut attn = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let n = layer.norm_query.forward(tape, p, h)?;
            let q = layer.query.forward(tape, p, n)?;
            let kv = layer.patch.forward(tape, p, patches)?;
            let w = tape.attention_weights(q, kv, batch, self.heads, None)?;
            attn.push(w);
            let a = tape.attention_apply(w, kv, batch, self.heads)?;
            h = tape.add(h, a)?;
            let n = layer.norm_ff.forward(tape, p, h)?;
            let f = layer.ff.forward(tape, p, n)?;
            h = tape.add(h, f)?;
        }
        let h = self.final_norm.forward(tape, p, h)?;
        let logits = self.classifier.forward(tape, p, h, mode, rng)?;
        Ok((logits, attn))
    }
}
