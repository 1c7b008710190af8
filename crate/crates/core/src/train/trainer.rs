use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::Config;
use super::features::Features;
use super::optim::{adamax_step, lr_schedule, AdamaxParams, AdamaxState};
use super::predict::{predict, rank_verbs, slot_count, Conditioning};
use crate::data::{load_embedding_store, load_frames, EmbeddingStore, EncoderTag, Frame, Vocab, VocabMode};
use crate::error::{Result, SituError};
use crate::heads::{header_value, Checkpoint, Model, ModelKind, ModelSpec, NounBatch};
use crate::kernel::{Mode, Tape, Tensor, Var};
use crate::losses::{noun_loss, verb_loss};
use crate::metrics::{evaluate, MetricsReport, Setting};
use crate::scalar::Scalar;

/// Frames, vocabulary and embeddings for one run.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocab,
    pub train: Vec<Frame>,
    pub dev: Option<Vec<Frame>>,
    pub store: EmbeddingStore,
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| SituError::Config(format!("paths.{} is not set", key)))
}

/// Fails unless the store was written by the encoder the config names.
pub fn check_encoder(expected: EncoderTag, store: &EmbeddingStore) -> Result<()> {
    if store.encoder() != expected {
        return Err(SituError::Store(format!(
            "encoder tag conflict: config expects {} but the embedding store holds {} ({}-d, {} patch tokens)",
            expected,
            store.encoder(),
            store.dim(),
            store.patch_count()
        )));
    }
    expected.check(store.dim(), store.patch_count())
}

impl Dataset {
    pub fn load(config: &Config) -> Result<Self> {
        let store = load_embedding_store(required(&config.paths.store, "store")?)?;
        check_encoder(config.encoder, &store)?;
        let frames_path = required(&config.paths.frames, "frames")?;
        let (vocab, train) = match &config.paths.vocab {
            Some(v) => {
                let vocab = Vocab::load(v)?;
                let (_, frames) = load_frames(frames_path, VocabMode::Given(&vocab))?;
                (vocab, frames)
            }
            None => load_frames(frames_path, VocabMode::Build)?,
        };
        let dev = match &config.paths.dev_frames {
            Some(p) => Some(load_frames(p, VocabMode::Given(&vocab))?.1),
            None => None,
        };
        Ok(Self {
            vocab,
            train,
            dev,
            store,
        })
    }

    /// Frames used for model selection: dev if present, else train.
    pub fn selection_frames(&self) -> &[Frame] {
        self.dev.as_deref().unwrap_or(&self.train)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    /// Best selection score so far (gt-verb value, or verb top-1 accuracy).
    pub best: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub selection: f64,
    pub report: Option<MetricsReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: Vec<EpochRecord>,
}

/// Path of the most recent (not necessarily best) checkpoint.
pub fn last_checkpoint_path(best: &Path) -> PathBuf {
    let mut s = best.as_os_str().to_owned();
    s.push(".last");
    PathBuf::from(s)
}

/// Rebuilds a model from a checkpoint, returning it with the stored config
/// and vocabulary.
pub fn load_model<T: Scalar>(ck: &Checkpoint) -> Result<(Model<T>, Config, Vocab)> {
    let spec: ModelSpec = ck.header_field("spec")?;
    let config: Config = ck.header_field("config")?;
    let vocab: Vocab = ck.header_field("vocab")?;
    let mut model = Model::new(spec, 0)?;
    let names = model.params.names().to_vec();
    let named: Vec<(String, Tensor<T>)> = names
        .iter()
        .map(|n| {
            ck.get(n)
                .map(|t| (n.clone(), t.cast()))
                .ok_or_else(|| SituError::Checkpoint(format!("missing tensor {:?}", n)))
        })
        .collect::<Result<_>>()?;
    model.params.assign(&named)?;
    Ok((model, config, vocab))
}

/// Verifies a checkpoint's model fits a dataset.
pub fn check_compatible(spec: &ModelSpec, config: &Config, ck_vocab: &Vocab, data: &Dataset) -> Result<()> {
    check_encoder(config.encoder, &data.store)?;
    if spec.dim != data.store.dim() || spec.patch_count != data.store.patch_count() {
        return Err(SituError::Checkpoint(format!(
            "checkpoint expects {}-d embeddings with {} patch tokens, store has {}-d with {}",
            spec.dim,
            spec.patch_count,
            data.store.dim(),
            data.store.patch_count()
        )));
    }
    if ck_vocab != &data.vocab {
        return Err(SituError::Checkpoint(
            "checkpoint vocabulary differs from the dataset vocabulary".into(),
        ));
    }
    Ok(())
}

pub struct Trainer<'a, T> {
    pub config: Config,
    pub model: Model<T>,
    pub optim: AdamaxState<T>,
    pub state: TrainState,
    data: &'a Dataset,
    train_feats: Features<T>,
    select_feats: Option<Features<T>>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(config: &Config, data: &'a Dataset) -> Result<Self> {
        let config = config.resolved();
        let spec = config.model_spec(&data.vocab, data.store.dim(), data.store.patch_count())?;
        let model = Model::new(spec, config.seed)?;
        let optim = AdamaxState::new(model.params.tensors());
        let with_patches = config.model == ModelKind::Xtf;
        let train_feats = Features::new(&data.store, &data.vocab, &data.train, config.normalize, with_patches)?;
        let select_feats = match &data.dev {
            Some(dev) => Some(Features::new(&data.store, &data.vocab, dev, config.normalize, with_patches)?),
            None => None,
        };
        let state = TrainState {
            epoch: 0,
            step: 0,
            lr: config.lr,
            best: None,
        };
        Ok(Self {
            config,
            model,
            optim,
            state,
            data,
            train_feats,
            select_feats,
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    /// Only `epochs`, `log_every` and `paths` may differ from the stored config.
    pub fn resume(config: &Config, data: &'a Dataset, ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(config, data)?;
        let stored: Config = ck.header_field("config")?;
        let mut a = stored.resolved();
        let mut b = t.config.clone();
        for c in [&mut a, &mut b] {
            c.epochs = 0;
            c.log_every = 0;
            c.paths = Default::default();
        }
        if a != b {
            return Err(SituError::Checkpoint(
                "checkpoint was trained with a different configuration".into(),
            ));
        }
        let spec: ModelSpec = ck.header_field("spec")?;
        if spec != t.model.spec {
            return Err(SituError::Checkpoint("checkpoint model layout differs".into()));
        }
        let vocab: Vocab = ck.header_field("vocab")?;
        check_compatible(&spec, &t.config, &vocab, data)?;
        t.state = ck.header_field("state")?;
        let names = t.model.params.names().to_vec();
        let fetch = |prefix: &str| -> Result<Vec<(String, Tensor<T>)>> {
            names
                .iter()
                .map(|n| {
                    ck.get(&format!("{}{}", prefix, n))
                        .map(|x| (n.clone(), x.cast()))
                        .ok_or_else(|| SituError::Checkpoint(format!("missing tensor {}{}", prefix, n)))
                })
                .collect()
        };
        t.model.params.assign(&fetch("")?)?;
        t.optim.m = fetch("adamax.m/")?.into_iter().map(|(_, x)| x).collect();
        t.optim.u = fetch("adamax.u/")?.into_iter().map(|(_, x)| x).collect();
        t.optim.step = t.state.step;
        Ok(t)
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    pub fn train_features(&self) -> &Features<T> {
        &self.train_feats
    }

    /// Shuffling and dropout randomness for one epoch, independent of how
    /// many epochs ran before in this process.
    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        rng
    }

    fn hp(&self) -> AdamaxParams {
        AdamaxParams {
            beta1: self.config.beta1,
            beta2: self.config.beta2,
            eps: self.config.eps,
        }
    }

    /// Builds the loss of frames `idx` (rows of `feats` / `frames`).
    fn batch_loss<R: rand::Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        feats: &Features<T>,
        frames: &[Frame],
        idx: &[usize],
        mode: Mode,
        with_boxes: bool,
        rng: &mut R,
    ) -> Result<(Var, Vec<Var>)> {
        let p = self.model.params.bind(tape);
        if self.model.kind() == ModelKind::VerbMlp {
            let d = feats.dim;
            let mut data = Vec::with_capacity(idx.len() * d);
            for &i in idx {
                data.extend_from_slice(feats.image(i));
            }
            let x = tape.constant(Tensor::matrix(idx.len(), d, data)?);
            let logits = self.model.forward_verbs(tape, &p, x, mode, rng)?;
            let verbs: Vec<usize> = idx.iter().map(|&i| frames[i].verb).collect();
            return Ok((verb_loss(tape, logits, &verbs)?, p));
        }
        let examples: Vec<_> = idx
            .iter()
            .map(|&i| feats.example(i, frames[i].verb, &self.data.vocab))
            .collect();
        let longest = examples.iter().map(|e| e.roles.len()).max().unwrap_or(1);
        let nb = NounBatch::new(&examples, slot_count(&self.model, longest))?;
        let head = self.model.forward_nouns(tape, &p, &nb, mode, rng)?;
        let refs: Vec<&Frame> = idx.iter().map(|&i| &frames[i]).collect();
        let boxes = if with_boxes { head.boxes } else { None };
        let loss = noun_loss(
            tape,
            head.logits,
            &head.rows,
            boxes,
            &refs,
            self.config.loss,
            self.config.box_weight,
        )?;
        Ok((loss, p))
    }

    /// One pass over the training frames; returns the mean batch loss.
    pub fn run_epoch(&mut self, log: &mut dyn Write) -> Result<f64> {
        let epoch = self.state.epoch;
        let lr = lr_schedule(epoch, self.config.lr, self.config.lr_gamma);
        let mut rng = self.epoch_rng(epoch);
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        let bs = self.config.batch_size;
        for chunk in order.chunks(bs) {
            let mut tape = Tape::new();
            let (loss, p) = self
                .batch_loss(&mut tape, &self.train_feats, &self.data.train, chunk, Mode::Train, true, &mut rng)
                .map_err(|e| {
                    let first = &self.data.train[chunk[0]].image_id;
                    e.context(format!("step {} (batch starting at {})", self.state.step + 1, first))
                })?;
            let value = tape.value(loss).data()[0].to_f64_value();
            if !value.is_finite() {
                return Err(SituError::InvalidArgument(format!(
                    "non-finite loss at step {}",
                    self.state.step + 1
                )));
            }
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor<T>> = p.iter().map(|&v| grads.wrt(v)).collect();
            let hp = self.hp();
            adamax_step(self.model.params.tensors_mut(), &g, &mut self.optim, lr, hp)?;
            self.state.step += 1;
            total += value;
            batches += 1;
            if self.config.log_every > 0 && self.state.step % self.config.log_every as u64 == 0 {
                writeln!(log, "step={} loss={:.6} lr={}", self.state.step, value, lr)
                    .map_err(|e| SituError::io("<log>", e))?;
            }
        }
        self.state.epoch += 1;
        self.state.lr = lr_schedule(self.state.epoch, self.config.lr, self.config.lr_gamma);
        Ok(if batches == 0 { 0.0 } else { total / batches as f64 })
    }

    /// Eval-mode loss over the training frames (`with_boxes = false` gives
    /// the noun term alone).
    pub fn train_loss(&self, with_boxes: bool) -> Result<f64> {
        let n = self.data.train.len();
        let idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut total = 0.0;
        for chunk in idx.chunks(self.config.batch_size) {
            let mut tape = Tape::new();
            let (loss, _) = self.batch_loss(
                &mut tape,
                &self.train_feats,
                &self.data.train,
                chunk,
                Mode::Eval,
                with_boxes,
                &mut rng,
            )?;
            total += tape.value(loss).data()[0].to_f64_value() * chunk.len() as f64;
        }
        Ok(total / n.max(1) as f64)
    }

    /// Score used for checkpoint selection, plus the gt-verb report for
    /// noun models.
    pub fn selection(&self) -> Result<(f64, Option<MetricsReport>)> {
        let frames = self.data.selection_frames();
        let feats = self.select_feats.as_ref().unwrap_or(&self.train_feats);
        if self.model.kind() == ModelKind::VerbMlp {
            let ranks = rank_verbs(&self.model, feats, frames.len(), self.config.batch_size)?;
            let hits = frames.iter().zip(&ranks).filter(|(f, r)| r[0] == f.verb).count();
            return Ok((hits as f64 / frames.len().max(1) as f64, None));
        }
        let preds = predict(
            &self.model,
            None,
            feats,
            &self.data.vocab,
            frames,
            self.config.batch_size,
            Conditioning::GroundTruth,
        )?;
        let report = evaluate(
            &preds,
            frames,
            Setting::Gt,
            self.config.value_mode,
            self.config.aggregation,
            Some(&self.data.vocab),
        )?;
        Ok((report.value, Some(report)))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let header = serde_json::json!({
            "config": header_value(&self.config)?,
            "spec": header_value(&self.model.spec)?,
            "vocab": header_value(&self.data.vocab)?,
            "state": header_value(&self.state)?,
        });
        let names = self.model.params.names();
        let mut ck = Checkpoint::from_params(header, names, self.model.params.tensors());
        for (prefix, moments) in [("adamax.m/", &self.optim.m), ("adamax.u/", &self.optim.u)] {
            for (n, t) in names.iter().zip(moments) {
                ck.tensors.push((format!("{}{}", prefix, n), t.cast()));
            }
        }
        Ok(ck)
    }

    /// Trains until `config.epochs` epochs are complete. After every epoch
    /// the latest state goes to `<checkpoint>.last` and, when the selection
    /// score improves, to `<checkpoint>` itself.
    pub fn train(&mut self, log: &mut dyn Write) -> Result<TrainSummary> {
        let mut summary = TrainSummary::default();
        let target = self.config.epochs;
        let ck_path = self.config.paths.checkpoint.clone();
        if self.state.epoch == 0 && target == 0 {
            if let Some(p) = &ck_path {
                let ck = self.checkpoint()?;
                ck.save(p)?;
                ck.save(&last_checkpoint_path(p))?;
            }
        }
        while self.state.epoch < target {
            let lr = self.state.lr;
            let loss = self.run_epoch(log)?;
            let (selection, report) = self.selection()?;
            let improved = self.state.best.is_none_or(|b| selection > b);
            if improved {
                self.state.best = Some(selection);
            }
            if let Some(p) = &ck_path {
                let ck = self.checkpoint()?;
                ck.save(&last_checkpoint_path(p))?;
                if improved {
                    ck.save(p)?;
                }
            }
            summary.epochs.push(EpochRecord {
                epoch: self.state.epoch,
                loss,
                lr,
                selection,
                report,
            });
        }
        Ok(summary)
    }
}
