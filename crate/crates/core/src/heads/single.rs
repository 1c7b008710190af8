//! One-frame convenience wrappers around [`Model`].

use rand::Rng;

use super::batch::{NounBatch, NounExample};
use super::model::{frame_attention, Model};
use crate::error::{Result, SituError};
use crate::kernel::{Mode, Tape, Tensor};
use crate::scalar::Scalar;

fn example<'a, T: Scalar>(
    image: &'a [T],
    verb: &'a [T],
    roles: &[&'a [T]],
    role_ids: &[usize],
    patches: Option<&'a [T]>,
) -> Result<NounExample<'a, T>> {
    if roles.is_empty() {
        return Err(SituError::InvalidArgument("at least one role is required".into()));
    }
    if role_ids.len() != roles.len() {
        return Err(SituError::shape("forward", "role id count differs from role count"));
    }
    Ok(NounExample {
        image,
        verb,
        roles: roles.to_vec(),
        role_ids: role_ids.to_vec(),
        patches,
    })
}

/// Verb logits for one pooled image embedding.
pub fn verb_forward<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    image: &[T],
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let x = tape.constant(Tensor::matrix(1, image.len(), image.to_vec())?);
    let y = model.forward_verbs(&mut tape, &p, x, mode, rng)?;
    Ok(tape.value(y).data().to_vec())
}

/// Noun logits for a single role.
#[allow(clippy::too_many_arguments)]
pub fn mlp_forward<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    image: &[T],
    verb: &[T],
    role: &[T],
    role_id: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<T>> {
    let ex = example(image, verb, &[role], &[role_id], None)?;
    let batch = NounBatch::new(&[ex], 1)?;
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let out = model.forward_nouns(&mut tape, &p, &batch, mode, rng)?;
    Ok(tape.value(out.logits).data().to_vec())
}

/// `[m × nouns]` logits for all roles of a frame, packed into `slots`
/// role positions (`slots >= m`).
#[allow(clippy::too_many_arguments)]
pub fn tf_forward<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    image: &[T],
    verb: &[T],
    roles: &[&[T]],
    role_ids: &[usize],
    slots: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let m = roles.len();
    if m > model.spec.max_roles {
        return Err(SituError::InvalidArgument(format!(
            "{} roles exceed capacity {}",
            m, model.spec.max_roles
        )));
    }
    let ex = example(image, verb, roles, role_ids, None)?;
    let batch = NounBatch::new(&[ex], slots.max(m))?;
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let out = model.forward_nouns(&mut tape, &p, &batch, mode, rng)?;
    let logits = tape.value(out.logits);
    let rows: Vec<Vec<T>> = out.rows[0].iter().map(|&r| logits.row(r).to_vec()).collect();
    Tensor::from_rows(&rows)
}

/// Logits plus each layer's `[heads × m × p]` cross-attention weights.
pub fn xtf_forward<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    patches: &Tensor<T>,
    verb: &[T],
    roles: &[&[T]],
    role_ids: &[usize],
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    if patches.shape().len() != 2 || patches.cols() != verb.len() {
        return Err(SituError::shape(
            "xtf_forward",
            format!("patch matrix {:?} does not match width {}", patches.shape(), verb.len()),
        ));
    }
    let m = roles.len();
    let image = vec![T::zero(); verb.len()];
    let ex = example(&image, verb, roles, role_ids, Some(patches.data()))?;
    let batch = NounBatch::new(&[ex], m)?;
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let out = model.forward_nouns(&mut tape, &p, &batch, mode, rng)?;
    let logits = tape.value(out.logits).clone();
    let heads = model.spec.heads;
    let attn = out
        .attention
        .iter()
        .map(|&a| frame_attention(tape.value(a), 0, 1, heads, m))
        .collect::<Result<Vec<_>>>()?;
    Ok((logits, attn))
}

/// `[m × 4]` boxes in `(cx, cy, h, w)` order from layer-1 attention.
pub fn localize<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    attn_layer1: &Tensor<T>,
    verb: &[T],
    roles: &[&[T]],
    role_ids: &[usize],
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let m = roles.len();
    let shape = attn_layer1.shape();
    if shape.len() != 3 || shape[0] != model.spec.heads || shape[1] != m {
        return Err(SituError::shape(
            "localize",
            format!("attention {:?} but expected [{}, {}, p]", shape, model.spec.heads, m),
        ));
    }
    let image = vec![T::zero(); verb.len()];
    let ex = example(&image, verb, roles, role_ids, None)?;
    let batch = NounBatch::new(&[ex], m)?;
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let w = attn_layer1.clone().reshape(vec![shape[0] * m, shape[2]])?;
    let w = tape.constant(w);
    let boxes = model.forward_boxes(&mut tape, &p, &batch, w, mode, rng)?;
    Ok(tape.value(boxes).clone())
}
