use rand::Rng;

use super::layers::{Classifier, Init, Linear};
use super::params::ParamStore;
use crate::error::Result;
use crate::kernel::{Mode, Tape, Var};
use crate::scalar::Scalar;

/// `l` ReLU layers of width `w` over the pooled image embedding, then
/// dropout and a linear verb classifier.
#[derive(Debug, Clone)]
pub struct VerbMlp {
    pub hidden: Vec<Linear>,
    pub classifier: Classifier,
}

impl VerbMlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        dim: usize,
        layers: usize,
        width: usize,
        verbs: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let hidden = (0..layers)
            .map(|i| {
                let fan_in = if i == 0 { dim } else { width };
                Linear::new(store, &format!("verb.hidden{}", i), fan_in, width, Init::Kaiming, rng)
            })
            .collect();
        let classifier = Classifier::new(store, "verb.classifier", width, verbs, dropout, rng);
        Self { hidden, classifier }
    }

    /// Closed-form parameter count.
    pub fn param_count(dim: usize, layers: usize, width: usize, verbs: usize) -> usize {
        let first = dim * width + width;
        let rest = layers.saturating_sub(1) * (width * width + width);
        first + rest + width * verbs + verbs
    }

    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        image: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let mut h = image;
        for layer in &self.hidden {
            h = layer.forward(tape, p, h)?;
            h = tape.relu(h);
        }
        self.classifier.forward(tape, p, h, mode, rng)
    }
}
