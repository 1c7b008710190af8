use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::features::Features;
use crate::data::{BBox, Frame, Vocab};
use crate::error::{Result, SituError};
use crate::heads::{frame_attention, ModelKind, NounBatch, Model};
use crate::kernel::{argmax, rank_descending, Mode, Tape, Tensor};
use crate::metrics::Prediction;
use crate::scalar::Scalar;

/// Verb rankings (best first) for the first `n` images of `feats`.
pub fn rank_verbs<T: Scalar>(
    model: &Model<T>,
    feats: &Features<T>,
    n: usize,
    batch: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(n);
    let d = feats.dim;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let mut data = Vec::with_capacity(chunk.len() * d);
        for &i in chunk {
            data.extend_from_slice(feats.image(i));
        }
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let x = tape.constant(Tensor::matrix(chunk.len(), d, data)?);
        let y = model.forward_verbs(&mut tape, &p, x, Mode::Eval, &mut rng)?;
        let logits = tape.value(y);
        for r in 0..chunk.len() {
            out.push(rank_descending(logits.row(r)));
        }
    }
    Ok(out)
}

/// Role slots a noun head is fed with for frames of at most `longest` roles.
pub fn slot_count(model: &Model<impl Scalar>, longest: usize) -> usize {
    match model.kind() {
        ModelKind::Tf | ModelKind::Xtf => model.spec.max_roles.max(longest),
        _ => longest,
    }
}

/// Argmax nouns (and boxes) for `(image row, conditioning verb)` pairs.
pub fn predict_nouns<T: Scalar>(
    model: &Model<T>,
    feats: &Features<T>,
    vocab: &Vocab,
    items: &[(usize, usize)],
    batch: usize,
) -> Result<Vec<(Vec<usize>, Vec<Option<BBox>>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch.max(1)) {
        let examples: Vec<_> = chunk
            .iter()
            .map(|&(i, v)| feats.example(i, v, vocab))
            .collect();
        let longest = examples.iter().map(|e| e.roles.len()).max().unwrap_or(1);
        let nb = NounBatch::new(&examples, slot_count(model, longest))?;
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let head = model.forward_nouns(&mut tape, &p, &nb, Mode::Eval, &mut rng)?;
        let logits = tape.value(head.logits);
        for rows in &head.rows {
            let nouns = rows.iter().map(|&r| argmax(logits.row(r))).collect();
            let boxes = match head.boxes {
                Some(b) => {
                    let bt = tape.value(b);
                    rows.iter()
                        .map(|&r| {
                            let row = bt.row(r);
                            let a = [0, 1, 2, 3].map(|k| row[k].to_f64_value());
                            Some(BBox::from_decoder_order(a))
                        })
                        .collect()
                }
                None => Vec::new(),
            };
            out.push((nouns, boxes));
        }
    }
    Ok(out)
}

/// Which verb's frame the role predictions are made under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    /// Always the annotated verb (the gt setting).
    GroundTruth,
    /// The annotated verb when the verb model ranks it in its top five,
    /// the top-1 verb otherwise (the top-1 / top-5 settings).
    Predicted,
}

/// Full predictions for labelled frames. Without a verb model the roles are
/// always predicted under the annotated verb and rankings are empty.
#[allow(clippy::too_many_arguments)]
pub fn predict<T: Scalar>(
    noun_model: &Model<T>,
    verb_model: Option<&Model<T>>,
    feats: &Features<T>,
    vocab: &Vocab,
    frames: &[Frame],
    batch: usize,
    conditioning: Conditioning,
) -> Result<Vec<Prediction>> {
    if feats.len() != frames.len() {
        return Err(SituError::InvalidArgument("features do not match the frame list".into()));
    }
    let rankings = match verb_model {
        Some(v) => rank_verbs(v, feats, frames.len(), batch)?,
        None => vec![Vec::new(); frames.len()],
    };
    let items: Vec<(usize, usize)> = frames
        .iter()
        .zip(&rankings)
        .enumerate()
        .map(|(i, (f, r))| {
            let gt = conditioning == Conditioning::GroundTruth;
            let verb = if gt || r.is_empty() || r.iter().take(5).any(|&v| v == f.verb) {
                f.verb
            } else {
                r[0]
            };
            (i, verb)
        })
        .collect();
    let nouns = predict_nouns(noun_model, feats, vocab, &items, batch)?;
    Ok(frames
        .iter()
        .zip(rankings)
        .zip(items.iter().zip(nouns))
        .map(|((f, verb_ranking), (&(_, verb), (nouns, boxes)))| Prediction {
            image_id: f.image_id.clone(),
            verb_ranking,
            conditioning_verb: verb,
            nouns,
            boxes,
        })
        .collect())
}

/// Per-layer `[heads × m × p]` cross-attention of image row `i` under `verb`.
pub fn cross_attention<T: Scalar>(
    model: &Model<T>,
    feats: &Features<T>,
    vocab: &Vocab,
    i: usize,
    verb: usize,
) -> Result<Vec<Tensor<T>>> {
    if model.kind() != ModelKind::Xtf {
        return Err(SituError::Config(format!(
            "attention maps need an xtf checkpoint, got {}",
            model.kind().name()
        )));
    }
    let ex = feats.example(i, verb, vocab);
    let m = ex.roles.len();
    let nb = NounBatch::new(&[ex], m)?;
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let head = model.forward_nouns(&mut tape, &p, &nb, Mode::Eval, &mut rng)?;
    head.attention
        .iter()
        .map(|&a| frame_attention(tape.value(a), 0, 1, model.spec.heads, m))
        .collect()
}
