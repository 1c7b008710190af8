use crate::data::{EmbeddingStore, Frame, Vocab};
use crate::error::{Result, SituError};
use crate::heads::NounExample;
use crate::scalar::Scalar;

/// Embedding tables aligned with a frame list and a vocabulary, converted
/// to the working precision.
#[derive(Debug, Clone)]
pub struct Features<T> {
    pub dim: usize,
    pub patch_count: usize,
    images: Vec<T>,
    patches: Option<Vec<T>>,
    verbs: Vec<T>,
    roles: Vec<T>,
}

fn convert<T: Scalar>(src: &[f32], normalize: bool, out: &mut Vec<T>) {
    let scale = if normalize {
        let n = src.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if n > 0.0 {
            1.0 / n
        } else {
            1.0
        }
    } else {
        1.0
    };
    out.extend(src.iter().map(|&v| T::lit(v as f64 * scale)));
}

fn table<'s, T: Scalar>(
    kind: &str,
    names: &[String],
    lookup: impl Fn(&str) -> Option<&'s [f32]>,
    normalize: bool,
) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for n in names {
        let row = lookup(n).ok_or_else(|| {
            SituError::Store(format!("embedding store has no {} entry {:?}", kind, n))
        })?;
        convert(row, normalize, &mut out);
    }
    Ok(out)
}

impl<T: Scalar> Features<T> {
    /// `frames[i]` maps to row `i`. Patch tokens are copied only when
    /// `with_patches` is set.
    pub fn new(
        store: &EmbeddingStore,
        vocab: &Vocab,
        frames: &[Frame],
        normalize: bool,
        with_patches: bool,
    ) -> Result<Self> {
        let d = store.dim();
        let mut images = Vec::with_capacity(frames.len() * d);
        let mut patches = with_patches.then(|| Vec::with_capacity(frames.len() * store.patch_count() * d));
        for f in frames {
            let pos = store.image_position(&f.image_id).ok_or_else(|| {
                SituError::frame(&f.image_id, "image is missing from the embedding store")
            })?;
            convert(store.pooled(pos), normalize, &mut images);
            if let Some(buf) = &mut patches {
                for row in store.patches(pos).chunks_exact(d) {
                    convert(row, normalize, buf);
                }
            }
        }
        Ok(Self {
            dim: d,
            patch_count: store.patch_count(),
            images,
            patches,
            verbs: table("verb", vocab.verbs(), |n| store.verb(n), normalize)?,
            roles: table("role", vocab.roles(), |n| store.role(n), normalize)?,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &[T] {
        &self.images[i * self.dim..(i + 1) * self.dim]
    }

    pub fn patches(&self, i: usize) -> Option<&[T]> {
        let n = self.patch_count * self.dim;
        self.patches.as_ref().map(|p| &p[i * n..(i + 1) * n])
    }

    pub fn verb(&self, v: usize) -> &[T] {
        &self.verbs[v * self.dim..(v + 1) * self.dim]
    }

    pub fn role(&self, r: usize) -> &[T] {
        &self.roles[r * self.dim..(r + 1) * self.dim]
    }

    /// Noun-head input for image `i` under `verb`'s frame.
    pub fn example(&self, i: usize, verb: usize, vocab: &Vocab) -> NounExample<'_, T> {
        let roles = vocab.frame(verb);
        NounExample {
            image: self.image(i),
            verb: self.verb(verb),
            roles: roles.iter().map(|&r| self.role(r)).collect(),
            role_ids: roles.to_vec(),
            patches: self.patches(i),
        }
    }
}
