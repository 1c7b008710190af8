use crate::error::{Result, SituError};
use crate::kernel::Tensor;
use crate::scalar::Scalar;

/// Embeddings for one frame, borrowed from wherever they live.
#[derive(Debug, Clone)]
pub struct NounExample<'a, T> {
    pub image: &'a [T],
    pub verb: &'a [T],
    pub roles: Vec<&'a [T]>,
    /// Role vocabulary indices; used by learned role tokens.
    pub role_ids: Vec<usize>,
    /// `patch_count × dim`, required by `xtf`.
    pub patches: Option<&'a [T]>,
}

/// Frames packed into fixed-capacity role slots. Slot `f * slots + i` holds
/// role `i` of frame `f`; slots past a frame's role count are padding.
#[derive(Debug, Clone)]
pub struct NounBatch<T> {
    pub batch: usize,
    pub slots: usize,
    pub dim: usize,
    /// `[batch × dim]`
    pub image: Tensor<T>,
    /// `[batch × dim]`
    pub verb: Tensor<T>,
    /// `[batch*slots × dim]`, zero rows at padding.
    pub roles: Tensor<T>,
    pub role_ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub lens: Vec<usize>,
    /// `[batch*patch_count × dim]`
    pub patches: Option<Tensor<T>>,
    pub patch_count: usize,
}

impl<T: Scalar> NounBatch<T> {
    pub fn new(examples: &[NounExample<'_, T>], slots: usize) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| SituError::InvalidArgument("empty batch".into()))?;
        let dim = first.image.len();
        let batch = examples.len();
        let patch_count = first.patches.map_or(0, |p| p.len() / dim.max(1));
        let mut image = Vec::with_capacity(batch * dim);
        let mut verb = Vec::with_capacity(batch * dim);
        let mut roles = vec![T::zero(); batch * slots * dim];
        let mut role_ids = vec![0; batch * slots];
        let mut mask = vec![false; batch * slots];
        let mut lens = Vec::with_capacity(batch);
        let mut patches = first.patches.map(|_| Vec::with_capacity(batch * patch_count * dim));
        for (f, ex) in examples.iter().enumerate() {
            let m = ex.roles.len();
            if m == 0 {
                return Err(SituError::InvalidArgument(format!("frame {} has no roles", f)));
            }
            if m > slots {
                return Err(SituError::InvalidArgument(format!(
                    "frame {} has {} roles, capacity is {}",
                    f, m, slots
                )));
            }
            if ex.image.len() != dim || ex.verb.len() != dim || ex.roles.iter().any(|r| r.len() != dim) {
                return Err(SituError::shape("noun_batch", format!("frame {} width differs from {}", f, dim)));
            }
            if ex.role_ids.len() != m {
                return Err(SituError::shape("noun_batch", "role id count differs from role count"));
            }
            image.extend_from_slice(ex.image);
            verb.extend_from_slice(ex.verb);
            for (i, r) in ex.roles.iter().enumerate() {
                let s = f * slots + i;
                roles[s * dim..(s + 1) * dim].copy_from_slice(r);
                role_ids[s] = ex.role_ids[i];
                mask[s] = true;
            }
            lens.push(m);
            match (&mut patches, ex.patches) {
                (Some(buf), Some(p)) if p.len() == patch_count * dim => buf.extend_from_slice(p),
                (None, None) => {}
                _ => {
                    return Err(SituError::shape(
                        "noun_batch",
                        format!("frame {} patch matrix does not match the batch", f),
                    ))
                }
            }
        }
        Ok(Self {
            batch,
            slots,
            dim,
            image: Tensor::matrix(batch, dim, image)?,
            verb: Tensor::matrix(batch, dim, verb)?,
            roles: Tensor::matrix(batch * slots, dim, roles)?,
            role_ids,
            mask,
            lens,
            patches: patches
                .map(|p| Tensor::matrix(batch * patch_count, dim, p))
                .transpose()?,
            patch_count,
        })
    }

    /// Flat indices of the real (unpadded) slots, frame-major.
    pub fn real_slots(&self) -> Vec<usize> {
        (0..self.batch * self.slots).filter(|&s| self.mask[s]).collect()
    }
}
