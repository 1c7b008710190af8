use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::batch::NounBatch;
use super::boxes::BoxDecoder;
use super::mlp::MlpHead;
use super::params::{ParamId, ParamStore};
use super::spec::{ModelKind, ModelSpec, RoleTokens};
use super::tf::TfHead;
use super::verb_mlp::VerbMlp;
use super::xtf::XtfHead;
use crate::error::{Result, SituError};
use crate::kernel::init::xavier_uniform;
use crate::kernel::{Mode, Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub enum Arch {
    Verb(VerbMlp),
    Mlp(MlpHead),
    Tf(TfHead),
    Xtf(XtfHead),
}

/// Tape handles produced by a noun head.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// One row of noun logits per predicted slot.
    pub logits: Var,
    /// `rows[f][i]` is the logits / box row of role `i` of frame `f`.
    pub rows: Vec<Vec<usize>>,
    /// Per-layer attention weights (`tf`: self, `xtf`: cross).
    pub attention: Vec<Var>,
    /// `[rows × 4]` decoder-order boxes when a box decoder is attached.
    pub boxes: Option<Var>,
}

/// A head plus its parameters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub params: ParamStore<T>,
    pub arch: Arch,
    pub role_table: Option<ParamId>,
    pub boxes: Option<BoxDecoder>,
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialised model; the same spec and seed always
    /// give the same parameters.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let s = &spec;
        let role_table = (s.kind.predicts_nouns() && s.role_tokens == RoleTokens::Learned)
            .then(|| params.add("role_tokens", xavier_uniform(s.n_roles, s.dim, &mut rng)));
        let arch = match s.kind {
            ModelKind::VerbMlp => Arch::Verb(VerbMlp::new(
                &mut params,
                s.dim,
                s.layers,
                s.hidden,
                s.n_verbs,
                s.classifier_dropout,
                &mut rng,
            )),
            ModelKind::Mlp => Arch::Mlp(MlpHead::new(
                &mut params,
                s.dim,
                s.layers,
                s.hidden,
                s.n_nouns,
                s.block_dropout,
                s.classifier_dropout,
                &mut rng,
            )),
            ModelKind::Tf => Arch::Tf(TfHead::new(
                &mut params,
                s.dim,
                s.width,
                s.layers,
                s.heads,
                s.ff,
                s.n_nouns,
                s.max_roles,
                s.positional,
                s.classifier_dropout,
                &mut rng,
            )),
            ModelKind::Xtf => Arch::Xtf(XtfHead::new(
                &mut params,
                s.dim,
                s.dim,
                s.width,
                s.layers,
                s.heads,
                s.ff,
                s.n_nouns,
                s.classifier_dropout,
                &mut rng,
            )),
        };
        let boxes = s.boxes.then(|| {
            BoxDecoder::new(&mut params, s.dim, s.patch_count, s.box_hidden, s.block_dropout, &mut rng)
        });
        Ok(Self {
            spec,
            params,
            arch,
            role_table,
            boxes,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self.params.cast(),
            arch: self.arch.clone(),
            role_table: self.role_table,
            boxes: self.boxes.clone(),
        }
    }

    /// `images` is `[batch × dim]`; returns `[batch × verbs]`.
    pub fn forward_verbs<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        images: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let Arch::Verb(head) = &self.arch else {
            return Err(SituError::Config(format!(
                "model {} does not predict verbs",
                self.kind().name()
            )));
        };
        let w = tape.value(images).cols();
        if w != self.spec.dim {
            return Err(SituError::shape(
                "verb_forward",
                format!("image width {} but model expects {}", w, self.spec.dim),
            ));
        }
        head.forward(tape, p, images, mode, rng)
    }

    fn frame_rows(t: &Tensor<T>, slots: usize, selected: &[usize]) -> Result<Tensor<T>> {
        let d = t.cols();
        let mut data = Vec::with_capacity(selected.len() * d);
        for &s in selected {
            data.extend_from_slice(t.row(s / slots));
        }
        Tensor::matrix(selected.len(), d, data)
    }

    fn role_rows(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        batch: &NounBatch<T>,
        selected: &[usize],
    ) -> Result<Var> {
        match self.role_table {
            Some(table) => {
                let ids: Vec<usize> = selected.iter().map(|&s| batch.role_ids[s]).collect();
                tape.gather_rows(p[table.0], &ids)
            }
            None => {
                let d = batch.dim;
                let mut data = Vec::with_capacity(selected.len() * d);
                for &s in selected {
                    data.extend_from_slice(batch.roles.row(s));
                }
                Ok(tape.constant(Tensor::matrix(selected.len(), d, data)?))
            }
        }
    }

    fn check_batch(&self, batch: &NounBatch<T>) -> Result<()> {
        if batch.dim != self.spec.dim {
            return Err(SituError::shape(
                "noun_forward",
                format!("embedding width {} but model expects {}", batch.dim, self.spec.dim),
            ));
        }
        if batch.slots > self.spec.max_roles && self.kind() != ModelKind::Mlp {
            return Err(SituError::InvalidArgument(format!(
                "{} role slots exceed capacity {}",
                batch.slots, self.spec.max_roles
            )));
        }
        if self.kind() == ModelKind::Xtf {
            if batch.patches.is_none() {
                return Err(SituError::InvalidArgument("xtf needs patch tokens".into()));
            }
            if batch.patch_count != self.spec.patch_count {
                return Err(SituError::shape(
                    "xtf_forward",
                    format!(
                        "{} patch tokens but model expects {}",
                        batch.patch_count, self.spec.patch_count
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn forward_nouns<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        batch: &NounBatch<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<HeadOutput> {
        self.check_batch(batch)?;
        let slots = batch.slots;
        let padded_rows = || -> Vec<Vec<usize>> {
            batch
                .lens
                .iter()
                .enumerate()
                .map(|(f, &m)| (0..m).map(|i| f * slots + i).collect())
                .collect()
        };
        let all: Vec<usize> = (0..batch.batch * slots).collect();
        match &self.arch {
            Arch::Verb(_) => Err(SituError::Config("verb_mlp does not predict nouns".into())),
            Arch::Mlp(head) => {
                let selected = batch.real_slots();
                let image = tape.constant(Self::frame_rows(&batch.image, slots, &selected)?);
                let verb = tape.constant(Self::frame_rows(&batch.verb, slots, &selected)?);
                let role = self.role_rows(tape, p, batch, &selected)?;
                let x = tape.concat_cols(&[image, verb, role])?;
                let logits = head.forward(tape, p, x, mode, rng)?;
                let mut rows = Vec::with_capacity(batch.batch);
                let mut next = 0;
                for &m in &batch.lens {
                    rows.push((next..next + m).collect());
                    next += m;
                }
                Ok(HeadOutput {
                    logits,
                    rows,
                    attention: Vec::new(),
                    boxes: None,
                })
            }
            Arch::Tf(head) => {
                let image = tape.constant(Self::frame_rows(&batch.image, slots, &all)?);
                let verb = tape.constant(Self::frame_rows(&batch.verb, slots, &all)?);
                let role = self.role_rows(tape, p, batch, &all)?;
                let x = tape.concat_cols(&[image, verb, role])?;
                let (logits, attention) =
                    head.forward(tape, p, x, batch.batch, slots, &batch.mask, mode, rng)?;
                Ok(HeadOutput {
                    logits,
                    rows: padded_rows(),
                    attention,
                    boxes: None,
                })
            }
            Arch::Xtf(head) => {
                let verb = tape.constant(Self::frame_rows(&batch.verb, slots, &all)?);
                let role = self.role_rows(tape, p, batch, &all)?;
                let verb_role = tape.concat_cols(&[verb, role])?;
                let patches = tape.constant(batch.patches.clone().expect("checked"));
                let (logits, attention) =
                    head.forward(tape, p, verb_role, patches, batch.batch, mode, rng)?;
                let boxes = match &self.boxes {
                    Some(dec) => {
                        let scores = tape.head_mean(attention[0], batch.batch, head.heads)?;
                        Some(dec.forward(tape, p, verb_role, scores, mode, rng)?)
                    }
                    None => None,
                };
                Ok(HeadOutput {
                    logits,
                    rows: padded_rows(),
                    attention,
                    boxes,
                })
            }
        }
    }

    /// Runs the box decoder on externally supplied layer-1 attention,
    /// `[batch*heads*slots × p]` rows.
    pub fn forward_boxes<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        batch: &NounBatch<T>,
        attention: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let dec = self
            .boxes
            .as_ref()
            .ok_or_else(|| SituError::Config("model has no box decoder".into()))?;
        if batch.dim != self.spec.dim {
            return Err(SituError::shape("localize", "embedding width mismatch"));
        }
        let all: Vec<usize> = (0..batch.batch * batch.slots).collect();
        let verb = tape.constant(Self::frame_rows(&batch.verb, batch.slots, &all)?);
        let role = self.role_rows(tape, p, batch, &all)?;
        let verb_role = tape.concat_cols(&[verb, role])?;
        let scores = tape.head_mean(attention, batch.batch, self.spec.heads)?;
        if tape.value(scores).cols() != self.spec.patch_count {
            return Err(SituError::shape(
                "localize",
                format!(
                    "attention over {} patches but decoder expects {}",
                    tape.value(scores).cols(),
                    self.spec.patch_count
                ),
            ));
        }
        dec.forward(tape, p, verb_role, scores, mode, rng)
    }
}

/// Slices frame `f`'s `[heads × m × kv]` block out of batched attention rows.
pub fn frame_attention<T: Scalar>(
    weights: &Tensor<T>,
    frame: usize,
    batch: usize,
    heads: usize,
    m: usize,
) -> Result<Tensor<T>> {
    let rows = weights.rows();
    let kv = weights.cols();
    let slots = rows / (batch * heads);
    let mut data = Vec::with_capacity(heads * m * kv);
    for h in 0..heads {
        for i in 0..m {
            data.extend_from_slice(weights.row((frame * heads + h) * slots + i));
        }
    }
    Tensor::new(vec![heads, m, kv], data)
}
