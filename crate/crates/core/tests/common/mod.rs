//! Straight-line reference implementations used as test oracles. They work
//! on nested `Vec`s and share no code with the library kernels.
#![allow(dead_code)]

use situ_core::heads::{Model, ModelKind, RoleTokens};
use situ_core::kernel::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn param(model: &Model<f64>, name: &str) -> Mat {
    let i = model
        .params
        .names()
        .iter()
        .position(|n| n == name)
        .unwrap_or_else(|| panic!("no parameter {}", name));
    let t = &model.params.tensors()[i];
    let shape = t.shape();
    if shape.len() == 1 {
        vec![t.data().to_vec()]
    } else {
        t.data().chunks(shape[1]).map(<[f64]>::to_vec).collect()
    }
}

pub fn vecp(model: &Model<f64>, name: &str) -> Vec<f64> {
    param(model, name).remove(0)
}

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    t.data().chunks(t.cols()).map(<[f64]>::to_vec).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| {
                    let mut s = 0.0;
                    for (k, &x) in row.iter().enumerate() {
                        s += x * b[k][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn linear(x: &Mat, model: &Model<f64>, name: &str) -> Mat {
    let w = param(model, &format!("{}.weight", name));
    let bias = format!("{}.bias", name);
    if !model.params.names().contains(&bias) {
        return matmul(x, &w);
    }
    let b = vecp(model, &bias);
    matmul(x, &w)
        .into_iter()
        .map(|r| r.iter().zip(&b).map(|(v, c)| v + c).collect())
        .collect()
}

pub fn relu(x: &Mat) -> Mat {
    x.iter().map(|r| r.iter().map(|&v| v.max(0.0)).collect()).collect()
}

pub fn sigmoid(x: &Mat) -> Mat {
    x.iter()
        .map(|r| r.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect())
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn layer_norm(x: &Mat, model: &Model<f64>, name: &str) -> Mat {
    let g = vecp(model, &format!("{}.gamma", name));
    let b = vecp(model, &format!("{}.beta", name));
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
                .collect()
        })
        .collect()
}

pub fn softmax_row(r: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = r.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Multi-head scaled dot-product attention; masked keys are dropped from
/// the softmax. Returns the output and `[head][query][key]` weights.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize, key_mask: Option<&[bool]>) -> (Mat, Vec<Mat>) {
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    let mut weights = Vec::new();
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut wh = Vec::new();
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| qi[cols.clone()].iter().zip(&kj[cols.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let keep: Vec<usize> = (0..k.len()).filter(|&j| key_mask.is_none_or(|m| m[j])).collect();
            let sub: Vec<f64> = keep.iter().map(|&j| scores[j]).collect();
            let p = softmax_row(&sub);
            let mut w = vec![0.0; k.len()];
            for (&j, &pj) in keep.iter().zip(&p) {
                w[j] = pj;
            }
            for (j, &wj) in w.iter().enumerate() {
                for c in cols.clone() {
                    out[i][c] += wj * v[j][c];
                }
            }
            wh.push(w);
        }
        weights.push(wh);
    }
    (out, weights)
}

fn ff(x: &Mat, model: &Model<f64>, name: &str) -> Mat {
    linear(&relu(&linear(x, model, &format!("{}.up", name))), model, &format!("{}.down", name))
}

pub fn naive_verb(model: &Model<f64>, image: &[f64]) -> Vec<f64> {
    let mut h = vec![image.to_vec()];
    for i in 0..model.spec.layers {
        h = relu(&linear(&h, model, &format!("verb.hidden{}", i)));
    }
    linear(&h, model, "verb.classifier").remove(0)
}

pub fn naive_mlp(model: &Model<f64>, image: &[f64], verb: &[f64], role: &[f64]) -> Vec<f64> {
    let x = vec![[image, verb, role].concat()];
    let mut h = layer_norm(&linear(&x, model, "mlp.block0.linear"), model, "mlp.block0.norm");
    for i in 1..model.spec.layers {
        let n = format!("mlp.block{}", i);
        h = layer_norm(&relu(&linear(&h, model, &format!("{}.linear", n))), model, &format!("{}.norm", n));
    }
    linear(&h, model, "mlp.classifier").remove(0)
}

fn role_rows(model: &Model<f64>, roles: &[Vec<f64>], role_ids: &[usize]) -> Mat {
    match model.spec.role_tokens {
        RoleTokens::Fixed => roles.to_vec(),
        RoleTokens::Learned => {
            let t = param(model, "role_tokens");
            role_ids.iter().map(|&r| t[r].clone()).collect()
        }
    }
}

/// Unpadded encoder over the `m` real role tokens.
pub fn naive_tf(model: &Model<f64>, image: &[f64], verb: &[f64], roles: &[Vec<f64>], role_ids: &[usize]) -> Mat {
    assert_eq!(model.spec.kind, ModelKind::Tf);
    let roles = role_rows(model, roles, role_ids);
    let x: Mat = roles.iter().map(|r| [image, verb, r.as_slice()].concat()).collect();
    let mut h = linear(&x, model, "tf.project");
    if model.spec.positional {
        let pe = param(model, "tf.positional");
        h = add(&h, &pe[..h.len()].to_vec());
    }
    for l in 0..model.spec.layers {
        let n = format!("tf.layer{}", l);
        let z = layer_norm(&h, model, &format!("{}.norm_attn", n));
        let q = linear(&z, model, &format!("{}.query", n));
        let k = linear(&z, model, &format!("{}.key", n));
        let v = linear(&z, model, &format!("{}.value", n));
        let (a, _) = attention(&q, &k, &v, model.spec.heads, None);
        h = add(&h, &linear(&a, model, &format!("{}.output", n)));
        let z = layer_norm(&h, model, &format!("{}.norm_ff", n));
        h = add(&h, &ff(&z, model, &format!("{}.ff", n)));
    }
    let h = layer_norm(&h, model, "tf.final_norm");
    linear(&h, model, "tf.classifier")
}

/// Returns logits and per-layer `[head][role][patch]` weights.
pub fn naive_xtf(
    model: &Model<f64>,
    patches: &Mat,
    verb: &[f64],
    roles: &[Vec<f64>],
    role_ids: &[usize],
) -> (Mat, Vec<Vec<Mat>>) {
    let roles = role_rows(model, roles, role_ids);
    let x: Mat = roles.iter().map(|r| [verb, r.as_slice()].concat()).collect();
    let mut h = linear(&x, model, "xtf.project");
    let mut attn = Vec::new();
    for l in 0..model.spec.layers {
        let n = format!("xtf.layer{}", l);
        let z = layer_norm(&h, model, &format!("{}.norm_query", n));
        let q = linear(&z, model, &format!("{}.query", n));
        let kv = linear(patches, model, &format!("{}.patch", n));
        let (a, w) = attention(&q, &kv, &kv, model.spec.heads, None);
        attn.push(w);
        h = add(&h, &a);
        let z = layer_norm(&h, model, &format!("{}.norm_ff", n));
        h = add(&h, &ff(&z, model, &format!("{}.ff", n)));
    }
    let h = layer_norm(&h, model, "xtf.final_norm");
    (linear(&h, model, "xtf.classifier"), attn)
}

/// Boxes from layer-1 weights `[head][role][patch]`.
pub fn naive_localize(model: &Model<f64>, attn1: &[Mat], verb: &[f64], roles: &[Vec<f64>], role_ids: &[usize]) -> Mat {
    let roles = role_rows(model, roles, role_ids);
    let heads = attn1.len() as f64;
    let x: Mat = roles
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let p = attn1[0][i].len();
            let score: Vec<f64> = (0..p).map(|j| attn1.iter().map(|a| a[i][j]).sum::<f64>() / heads).collect();
            [verb, r.as_slice(), score.as_slice()].concat()
        })
        .collect();
    let h = layer_norm(&relu(&linear(&x, model, "boxes.block.linear")), model, "boxes.block.norm");
    sigmoid(&linear(&h, model, "boxes.out"))
}

pub fn max_abs(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn rand_vec(rng: &mut impl rand::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn rand_mat(rng: &mut impl rand::Rng, r: usize, c: usize) -> Mat {
    (0..r).map(|_| rand_vec(rng, c)).collect()
}

use situ_core::data::{BBox, Frame};
use situ_core::heads::ModelSpec;
use situ_core::metrics::{Prediction, Setting, ValueMode};

/// Small layout for exhaustive checks.
pub fn tiny_spec(kind: ModelKind) -> ModelSpec {
    ModelSpec {
        kind,
        dim: 4,
        patch_count: 3,
        n_verbs: 3,
        n_roles: 4,
        n_nouns: 5,
        layers: 2,
        heads: 2,
        hidden: 6,
        width: 4,
        ff: 6,
        max_roles: 6,
        role_tokens: RoleTokens::Fixed,
        positional: false,
        boxes: kind == ModelKind::Xtf,
        box_hidden: 5,
        classifier_dropout: 0.5,
        block_dropout: 0.2,
    }
}

/// A random frame with `m` roles, `q` annotators and some grounded roles.
pub fn rand_frame(rng: &mut impl rand::Rng, id: usize, verbs: usize, nouns: usize, m: usize, q: usize) -> Frame {
    Frame {
        image_id: format!("f{}", id),
        verb: rng.random_range(0..verbs),
        role_annotations: (0..m).map(|_| (0..q).map(|_| rng.random_range(0..nouns)).collect()).collect(),
        boxes: (0..m).map(|_| rng.random_bool(0.6).then(|| rand_box(rng))).collect(),
    }
}

pub fn rand_box(rng: &mut impl rand::Rng) -> BBox {
    BBox::new(
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
        rng.random_range(0.05..0.5),
        rng.random_range(0.05..0.5),
    )
}

/// A prediction near `frame`: the gt verb sits at a random rank, nouns and
/// boxes are right with some probability.
pub fn rand_prediction(rng: &mut impl rand::Rng, frame: &Frame, verbs: usize, nouns: usize) -> Prediction {
    use rand::seq::SliceRandom;
    let mut ranking: Vec<usize> = (0..verbs).collect();
    ranking.shuffle(rng);
    let m = frame.num_roles();
    let noun_list = (0..m)
        .map(|i| {
            if rng.random_bool(0.6) {
                let a = &frame.role_annotations[i];
                a[rng.random_range(0..a.len())]
            } else {
                rng.random_range(0..nouns)
            }
        })
        .collect();
    let boxes = (0..m)
        .map(|i| match (frame.boxes[i], rng.random_range(0..4)) {
            (Some(b), 0) => Some(b),
            (Some(b), 1) => Some(BBox::new(b.cx + rng.random_range(-0.1..0.1), b.cy, b.w, b.h)),
            (_, 2) => None,
            _ => Some(rand_box(rng)),
        })
        .collect();
    Prediction {
        image_id: frame.image_id.clone(),
        verb_ranking: ranking,
        conditioning_verb: frame.verb,
        nouns: noun_list,
        boxes,
    }
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

pub fn naive_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = overlap(a.cx - a.w / 2.0, a.cx + a.w / 2.0, b.cx - b.w / 2.0, b.cx + b.w / 2.0);
    let iy = overlap(a.cy - a.h / 2.0, a.cy + a.h / 2.0, b.cy - b.h / 2.0, b.cy + b.h / 2.0);
    let inter = ix * iy;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// `[verb_top1, verb_top5, value, value_all, grnd_value, grnd_value_all]`,
/// micro-averaged, read straight off the metric definitions.
pub fn brute_force_scores(preds: &[Prediction], frames: &[Frame], setting: Setting, mode: ValueMode) -> [f64; 6] {
    let mut sums = [0.0; 6];
    let mut grounded_frames = 0usize;
    for f in frames {
        let p = preds.iter().find(|p| p.image_id == f.image_id).expect("prediction");
        let rank = p.verb_ranking.iter().position(|&v| v == f.verb);
        let in_top1 = rank == Some(0);
        let in_top5 = matches!(rank, Some(r) if r < 5);
        if in_top1 {
            sums[0] += 1.0;
        }
        if in_top5 {
            sums[1] += 1.0;
        }
        let gate = match setting {
            Setting::Gt => true,
            Setting::Top1 => in_top1,
            Setting::Top5 => in_top5,
        };
        let m = f.role_annotations.len();
        let mut right = 0usize;
        let mut grounded = 0usize;
        let mut grounded_right = 0usize;
        for i in 0..m {
            let noun_ok = f.role_annotations[i].contains(&p.nouns[i]);
            if noun_ok {
                right += 1;
            }
            if let Some(gt) = f.boxes[i] {
                grounded += 1;
                let box_ok = matches!(p.boxes.get(i), Some(Some(b)) if naive_iou(b, &gt) >= 0.5);
                if noun_ok && box_ok {
                    grounded_right += 1;
                }
            }
        }
        if grounded > 0 {
            grounded_frames += 1;
        }
        if !gate {
            continue;
        }
        sums[2] += match mode {
            ValueMode::AnyRole => (right >= 1) as u8 as f64,
            ValueMode::PerRole => right as f64 / m as f64,
        };
        if right == m {
            sums[3] += 1.0;
        }
        if grounded > 0 {
            sums[4] += match mode {
                ValueMode::AnyRole => (grounded_right >= 1) as u8 as f64,
                ValueMode::PerRole => grounded_right as f64 / grounded as f64,
            };
            if grounded_right == grounded {
                sums[5] += 1.0;
            }
        }
    }
    let n = frames.len() as f64;
    let g = grounded_frames as f64;
    let share = |x: f64, d: f64| if d == 0.0 { 0.0 } else { x / d };
    [
        share(sums[0], n),
        share(sums[1], n),
        share(sums[2], n),
        share(sums[3], n),
        share(sums[4], g),
        share(sums[5], g),
    ]
}

use rand::{Rng, SeedableRng};
use situ_core::heads::{NounBatch, NounExample};
use situ_core::kernel::{grad_check, Mode, Tape};
use situ_core::losses::{noun_loss, verb_loss, LossMode};

/// Owned embeddings for a handful of frames.
pub struct Inputs {
    pub images: Vec<Vec<f64>>,
    pub verbs: Vec<Vec<f64>>,
    pub roles: Vec<Vec<Vec<f64>>>,
    pub role_ids: Vec<Vec<usize>>,
    pub patches: Vec<Vec<f64>>,
}

impl Inputs {
    pub fn random(rng: &mut impl rand::Rng, spec: &ModelSpec, lens: &[usize]) -> Self {
        let d = spec.dim;
        Self {
            images: lens.iter().map(|_| rand_vec(rng, d)).collect(),
            verbs: lens.iter().map(|_| rand_vec(rng, d)).collect(),
            roles: lens.iter().map(|&m| rand_mat(rng, m, d)).collect(),
            role_ids: lens.iter().map(|&m| (0..m).map(|i| (i * 3 + 1) % spec.n_roles).collect()).collect(),
            patches: lens.iter().map(|_| rand_vec(rng, spec.patch_count * d)).collect(),
        }
    }

    pub fn examples(&self, with_patches: bool) -> Vec<NounExample<'_, f64>> {
        (0..self.images.len())
            .map(|f| NounExample {
                image: &self.images[f],
                verb: &self.verbs[f],
                roles: self.roles[f].iter().map(Vec::as_slice).collect(),
                role_ids: self.role_ids[f].clone(),
                patches: with_patches.then_some(self.patches[f].as_slice()),
            })
            .collect()
    }

    pub fn patch_mat(&self, f: usize, d: usize) -> Mat {
        self.patches[f].chunks(d).map(<[f64]>::to_vec).collect()
    }
}

/// Shifts every parameter by seeded noise so that biases, gains and
/// offsets all carry gradient signal.
pub fn jitter(model: &mut Model<f64>, seed: u64, scale: f64) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    for t in model.params.tensors_mut() {
        for v in t.data_mut() {
            *v += scale * rng.random_range(-1.0..1.0);
        }
    }
}

/// Worst relative error of the head's analytic gradient against central
/// differences; dropout is in eval mode.
pub fn head_grad_error(kind: ModelKind, seed: u64) -> f64 {
    head_grad_report(kind, seed).max_rel_error
}

pub fn head_grad_report(kind: ModelKind, seed: u64) -> situ_core::kernel::GradCheckReport {
    let spec = tiny_spec(kind);
    let mut model = Model::<f64>::new(spec.clone(), seed).unwrap();
    jitter(&mut model, seed, 0.1);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let params = model.params.tensors().to_vec();
    let report = if kind == ModelKind::VerbMlp {
        let images: Vec<f64> = rand_vec(&mut rng, 3 * spec.dim);
        let verbs = [0usize, 2, 1];
        grad_check(&params, 1e-5, |t: &mut Tape<f64>, p| {
            let x = t.constant(situ_core::kernel::Tensor::matrix(3, spec.dim, images.clone())?);
            let logits = model.forward_verbs(t, p, x, Mode::Eval, &mut rand::rng())?;
            verb_loss(t, logits, &verbs)
        })
    } else {
        let lens = [2usize, 3];
        let inputs = Inputs::random(&mut rng, &spec, &lens);
        let frames: Vec<Frame> = lens
            .iter()
            .enumerate()
            .map(|(i, &m)| rand_frame(&mut rng, i, spec.n_verbs, spec.n_nouns, m, 2))
            .collect();
        let refs: Vec<&Frame> = frames.iter().collect();
        let batch = NounBatch::new(&inputs.examples(kind == ModelKind::Xtf), 3).unwrap();
        grad_check(&params, 1e-5, |t: &mut Tape<f64>, p| {
            let out = model.forward_nouns(t, p, &batch, Mode::Eval, &mut rand::rng())?;
            noun_loss(t, out.logits, &out.rows, out.boxes, &refs, LossMode::Maxe, 1.0)
        })
    };
    report.unwrap()
}

use situ_core::data::{synth_dataset, EncoderTag, SynthConfig};
use situ_core::train::{Config, Dataset};

/// The default synthetic set held in memory.
pub fn synth_data(seed: u64) -> Dataset {
    let d = synth_dataset(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    Dataset {
        vocab: d.vocab,
        train: d.frames,
        dev: None,
        store: d.store,
    }
}

/// The small MLP memorisation setup.
pub fn overfit_config() -> Config {
    Config {
        model: ModelKind::Mlp,
        encoder: EncoderTag::Custom,
        layers: Some(2),
        hidden: Some(256),
        epochs: 300,
        lr_gamma: 1.0,
        log_every: 0,
        ..Config::default()
    }
}

/// XTF with a box decoder, sized for fast box memorisation.
pub fn box_config() -> Config {
    Config {
        model: ModelKind::Xtf,
        encoder: EncoderTag::Custom,
        layers: Some(1),
        heads: Some(1),
        width: 64,
        ff: 128,
        boxes: true,
        box_hidden: 128,
        batch_size: 8,
        lr: 0.005,
        lr_gamma: 1.0,
        block_dropout: 0.0,
        log_every: 0,
        ..Config::default()
    }
}

/// Mean IoU over grounded roles of gt-verb predictions on the training frames.
pub fn mean_train_iou(model: &Model<f32>, data: &Dataset) -> f64 {
    use situ_core::train::{predict, Conditioning, Features};
    let feats = Features::<f32>::new(&data.store, &data.vocab, &data.train, false, true).unwrap();
    let preds = predict(model, None, &feats, &data.vocab, &data.train, 32, Conditioning::GroundTruth).unwrap();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, f) in preds.iter().zip(&data.train) {
        for (pb, gb) in p.boxes.iter().zip(&f.boxes) {
            if let (Some(a), Some(b)) = (pb, gb) {
                sum += naive_iou(a, b);
                n += 1;
            }
        }
    }
    sum / n as f64
}
