mod common;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use situ_core::heads::{
    localize, mlp_forward, tf_forward, verb_forward, xtf_forward, Checkpoint, Model, ModelKind, MlpHead, NounBatch,
    RoleTokens, VerbMlp,
};
use situ_core::kernel::{argmax, Mode, Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn model(kind: ModelKind, seed: u64) -> Model<f64> {
    let mut m = Model::<f64>::new(tiny_spec(kind), seed).unwrap();
    jitter(&mut m, seed, 0.2);
    m
}

fn slices(rows: &[Vec<f64>]) -> Vec<&[f64]> {
    rows.iter().map(Vec::as_slice).collect()
}

#[test]
fn verb_mlp_matches_straight_line_forward() {
    for seed in 0..5 {
        let m = model(ModelKind::VerbMlp, seed);
        let x = rand_vec(&mut rng(seed + 100), m.spec.dim);
        let got = verb_forward(&m, &x, Mode::Eval, &mut rng(0)).unwrap();
        let want = naive_verb(&m, &x);
        assert!(max_abs(&vec![got], &vec![want]) < 1e-6);
    }
}

#[test]
fn verb_mlp_zero_weights_tie_to_lowest_index() {
    let mut m = model(ModelKind::VerbMlp, 1);
    for t in m.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let x = rand_vec(&mut rng(2), m.spec.dim);
    let logits = verb_forward(&m, &x, Mode::Eval, &mut rng(0)).unwrap();
    assert!(logits.iter().all(|&v| v == logits[0]));
    assert_eq!(argmax(&logits), 0);
}

#[test]
fn verb_mlp_default_parameter_count() {
    let mut spec = tiny_spec(ModelKind::VerbMlp);
    spec.dim = 768;
    spec.layers = 1;
    spec.hidden = 1024;
    spec.n_verbs = 504;
    let m = Model::<f32>::new(spec, 0).unwrap();
    let formula = 768 * 1024 + 1024 + 1024 * 504 + 504;
    assert_eq!(formula, 1_304_056);
    assert_eq!(m.param_count(), formula);
    assert_eq!(VerbMlp::param_count(768, 1, 1024, 504), formula);
    assert!((m.param_count() as f64 / 1.3e6 - 1.0).abs() < 0.05);
}

#[test]
fn mlp_matches_straight_line_forward() {
    for seed in 0..5 {
        let m = model(ModelKind::Mlp, seed);
        let mut r = rng(seed + 7);
        let (x, v, role) = (rand_vec(&mut r, 4), rand_vec(&mut r, 4), rand_vec(&mut r, 4));
        let got = mlp_forward(&m, &x, &v, &role, 1, Mode::Eval, &mut rng(0)).unwrap();
        assert!(max_abs(&vec![got], &vec![naive_mlp(&m, &x, &v, &role)]) < 1e-6);
    }
}

#[test]
fn mlp_input_width_for_512() {
    assert_eq!(MlpHead::input_width(512), 1536);
    let mut spec = tiny_spec(ModelKind::Mlp);
    spec.dim = 512;
    spec.hidden = 8;
    let m = Model::<f32>::new(spec, 0).unwrap();
    let i = m.params.names().iter().position(|n| n == "mlp.block0.linear.weight").unwrap();
    assert_eq!(m.params.tensors()[i].shape(), &[1536, 8]);
}

#[test]
fn mlp_is_sensitive_to_concat_order() {
    let m = model(ModelKind::Mlp, 3);
    let mut r = rng(8);
    let (x, v, role) = (rand_vec(&mut r, 4), rand_vec(&mut r, 4), rand_vec(&mut r, 4));
    let a = mlp_forward(&m, &x, &v, &role, 0, Mode::Eval, &mut rng(0)).unwrap();
    let b = mlp_forward(&m, &v, &x, &role, 0, Mode::Eval, &mut rng(0)).unwrap();
    let c = mlp_forward(&m, &role, &v, &x, 0, Mode::Eval, &mut rng(0)).unwrap();
    assert_ne!(a, b);
    assert_ne!(a, c);
}

#[test]
fn mlp_zero_input_zero_bias_gives_equal_logits() {
    let mut m = Model::<f64>::new(tiny_spec(ModelKind::Mlp), 4).unwrap();
    for (name, t) in m.params.names().to_vec().iter().zip(m.params.tensors_mut()) {
        if name.ends_with(".bias") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let z = vec![0.0; 4];
    let logits = mlp_forward(&m, &z, &z, &z, 0, Mode::Eval, &mut rng(0)).unwrap();
    assert!(logits.iter().all(|&v| v == logits[0]));
}

#[test]
fn tf_matches_straight_line_encoder() {
    for (seed, positional, learned) in [(0, false, false), (1, true, false), (2, false, true)] {
        let mut spec = tiny_spec(ModelKind::Tf);
        spec.positional = positional;
        if learned {
            spec.role_tokens = RoleTokens::Learned;
        }
        let mut m = Model::<f64>::new(spec, seed).unwrap();
        jitter(&mut m, seed, 0.2);
        let mut r = rng(seed + 50);
        let (x, v, roles) = (rand_vec(&mut r, 4), rand_vec(&mut r, 4), rand_mat(&mut r, 4, 4));
        let ids = [0, 3, 1, 2];
        let got = tf_forward(&m, &x, &v, &slices(&roles), &ids, 4, Mode::Eval, &mut rng(0)).unwrap();
        let want = naive_tf(&m, &x, &v, &roles, &ids);
        assert!(max_abs(&to_mat(&got), &want) < 1e-5, "seed {}", seed);
    }
}

#[test]
fn tf_single_role_attends_to_itself() {
    let m = model(ModelKind::Tf, 5);
    let mut r = rng(9);
    let (x, v, role) = (rand_vec(&mut r, 4), rand_vec(&mut r, 4), rand_vec(&mut r, 4));
    let inputs = Inputs {
        images: vec![x],
        verbs: vec![v],
        roles: vec![vec![role]],
        role_ids: vec![vec![0]],
        patches: vec![vec![]],
    };
    let batch = NounBatch::new(&inputs.examples(false), 6).unwrap();
    let mut tape = Tape::new();
    let p = m.params.bind(&mut tape);
    let out = m.forward_nouns(&mut tape, &p, &batch, Mode::Eval, &mut rng(0)).unwrap();
    for &a in &out.attention {
        let w = tape.value(a);
        for h in 0..m.spec.heads {
            let row = w.row(h * 6);
            assert_eq!(row[0], 1.0);
            assert!(row[1..].iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn tf_padding_leaves_real_positions_unchanged() {
    let m = model(ModelKind::Tf, 6);
    let mut r = rng(10);
    let (x, v, roles) = (rand_vec(&mut r, 4), rand_vec(&mut r, 4), rand_mat(&mut r, 3, 4));
    let ids = [1, 2, 3];
    let tight = tf_forward(&m, &x, &v, &slices(&roles), &ids, 3, Mode::Eval, &mut rng(0)).unwrap();
    let padded = tf_forward(&m, &x, &v, &slices(&roles), &ids, 6, Mode::Eval, &mut rng(0)).unwrap();
    assert!(tight.max_abs_diff(&padded) < 1e-5);
}

fn padded_logits(m: &Model<f64>, inputs: &Inputs, slots: usize) -> Tensor<f64> {
    let batch = NounBatch::new(&inputs.examples(m.kind() == ModelKind::Xtf), slots).unwrap();
    let mut tape = Tape::new();
    let p = m.params.bind(&mut tape);
    let out = m.forward_nouns(&mut tape, &p, &batch, Mode::Eval, &mut rng(0)).unwrap();
    let t = tape.value(out.logits);
    let rows: Vec<Vec<f64>> = out.rows.iter().flatten().map(|&r| t.row(r).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn masked_positions_do_not_leak() {
    for kind in [ModelKind::Tf, ModelKind::Xtf] {
        let m = model(kind, 7);
        let mut r = rng(11);
        let inputs = Inputs::random(&mut r, &m.spec, &[2, 3]);
        let mut batch = NounBatch::new(&inputs.examples(kind == ModelKind::Xtf), 5).unwrap();
        let run = |b: &NounBatch<f64>| {
            let mut tape = Tape::new();
            let p = m.params.bind(&mut tape);
            let out = m.forward_nouns(&mut tape, &p, b, Mode::Eval, &mut rng(0)).unwrap();
            let t = tape.value(out.logits).clone();
            out.rows.iter().flatten().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()
        };
        let before = run(&batch);
        for s in 0..batch.batch * batch.slots {
            if !batch.mask[s] {
                batch.roles.row_mut(s).iter_mut().for_each(|v| *v = 7.5);
            }
        }
        assert_eq!(before, run(&batch), "{:?}", kind);
    }
}

#[test]
fn batching_matches_single_frames() {
    for kind in [ModelKind::Mlp, ModelKind::Tf, ModelKind::Xtf] {
        let m = model(kind, 8);
        let mut r = rng(12);
        let inputs = Inputs::random(&mut r, &m.spec, &[2, 3]);
        let both = padded_logits(&m, &inputs, 6);
        let mut singles = Vec::new();
        for f in 0..2 {
            let one = Inputs {
                images: vec![inputs.images[f].clone()],
                verbs: vec![inputs.verbs[f].clone()],
                roles: vec![inputs.roles[f].clone()],
                role_ids: vec![inputs.role_ids[f].clone()],
                patches: vec![inputs.patches[f].clone()],
            };
            let t = padded_logits(&m, &one, 6);
            singles.extend((0..t.rows()).map(|i| t.row(i).to_vec()));
        }
        let singles = Tensor::from_rows(&singles).unwrap();
        assert!(both.max_abs_diff(&singles) < 1e-5, "{:?}", kind);
    }
}

#[test]
fn xtf_matches_straight_line_decoder() {
    for seed in 0..3 {
        let m = model(ModelKind::Xtf, seed);
        let mut r = rng(seed + 30);
        let inputs = Inputs::random(&mut r, &m.spec, &[3]);
        let patches = inputs.patch_mat(0, 4);
        let pt = Tensor::from_rows(&patches).unwrap();
        let (logits, attn) =
            xtf_forward(&m, &pt, &inputs.verbs[0], &slices(&inputs.roles[0]), &inputs.role_ids[0], Mode::Eval, &mut rng(0))
                .unwrap();
        let (want, want_attn) = naive_xtf(&m, &patches, &inputs.verbs[0], &inputs.roles[0], &inputs.role_ids[0]);
        assert!(max_abs(&to_mat(&logits), &want) < 1e-6);
        for (a, w) in attn.iter().zip(&want_attn) {
            assert_eq!(a.shape(), &[2, 3, 3]);
            let flat: Vec<f64> = w.iter().flatten().flatten().copied().collect();
            for (x, y) in a.data().iter().zip(&flat) {
                assert!((x - y).abs() < 1e-6);
            }
            for row in a.data().chunks(3) {
                assert!(row.iter().all(|&x| x >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn xtf_identical_patches_attend_uniformly() {
    let m = model(ModelKind::Xtf, 9);
    let mut r = rng(13);
    let row = rand_vec(&mut r, 4);
    let patches = Tensor::from_rows(&vec![row; 3]).unwrap();
    let (v, roles) = (rand_vec(&mut r, 4), rand_mat(&mut r, 2, 4));
    let (logits, attn) = xtf_forward(&m, &patches, &v, &slices(&roles), &[0, 1], Mode::Eval, &mut rng(0)).unwrap();
    assert!(attn[0].data().iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-12));
    let other = Tensor::from_rows(&vec![rand_vec(&mut r, 4); 3]).unwrap();
    let (moved, attn2) = xtf_forward(&m, &other, &v, &slices(&roles), &[0, 1], Mode::Eval, &mut rng(0)).unwrap();
    assert!(attn2[0].data().iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-12));
    assert_ne!(logits, moved);
}

#[test]
fn xtf_b32_geometry() {
    let mut spec = tiny_spec(ModelKind::Xtf);
    spec.dim = 512;
    spec.width = 512;
    spec.patch_count = 50;
    spec.layers = 1;
    spec.heads = 1;
    spec.ff = 8;
    spec.box_hidden = 4;
    let m = Model::<f32>::new(spec, 0).unwrap();
    let shape = |n: &str| {
        let i = m.params.names().iter().position(|x| x == n).unwrap();
        m.params.tensors()[i].shape().to_vec()
    };
    assert_eq!(shape("xtf.layer0.query.weight"), vec![512, 512]);
    assert_eq!(shape("xtf.layer0.patch.weight"), vec![512, 512]);
    let mut r = rng(14);
    let data: Vec<f32> = (0..50 * 512).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
    let patches = Tensor::matrix(50, 512, data).unwrap();
    let v = vec![0.1f32; 512];
    let roles = [vec![0.2f32; 512], vec![-0.3f32; 512]];
    let rs: Vec<&[f32]> = roles.iter().map(Vec::as_slice).collect();
    let (logits, attn) = xtf_forward(&m, &patches, &v, &rs, &[0, 1], Mode::Eval, &mut rng(0)).unwrap();
    assert_eq!(logits.shape(), &[2, 5]);
    assert_eq!(attn[0].shape(), &[1, 2, 50]);
}

#[test]
fn localize_matches_straight_line_decoder() {
    for seed in 0..3 {
        let m = model(ModelKind::Xtf, seed);
        let mut r = rng(seed + 40);
        let attn: Vec<Mat> = (0..2)
            .map(|_| (0..3).map(|_| softmax_row(&rand_vec(&mut r, 3))).collect())
            .collect();
        let (v, roles) = (rand_vec(&mut r, 4), rand_mat(&mut r, 3, 4));
        let flat: Vec<f64> = attn.iter().flatten().flatten().copied().collect();
        let at = Tensor::new(vec![2, 3, 3], flat).unwrap();
        let got = localize(&m, &at, &v, &slices(&roles), &[0, 1, 2], Mode::Eval, &mut rng(0)).unwrap();
        let want = naive_localize(&m, &attn, &v, &roles, &[0, 1, 2]);
        assert!(max_abs(&to_mat(&got), &want) < 1e-6);
        assert!(got.data().iter().all(|&c| (0.0..=1.0).contains(&c)));
    }
}

#[test]
fn localize_zero_output_layer_gives_centre_boxes() {
    let mut m = model(ModelKind::Xtf, 3);
    for (name, t) in m.params.names().to_vec().iter().zip(m.params.tensors_mut()) {
        if name.starts_with("boxes.out") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let at = Tensor::full(&[2, 2, 3], 1.0 / 3.0);
    let roles = [vec![1.0; 4], vec![-1.0; 4]];
    let rs: Vec<&[f64]> = roles.iter().map(Vec::as_slice).collect();
    let b = localize(&m, &at, &[0.3; 4], &rs, &[0, 1], Mode::Eval, &mut rng(0)).unwrap();
    assert!(b.data().iter().all(|&c| c == 0.5));
}

#[test]
fn every_head_passes_gradient_check() {
    for kind in [ModelKind::VerbMlp, ModelKind::Mlp, ModelKind::Tf, ModelKind::Xtf] {
        let err = head_grad_error(kind, 5);
        assert!(err < 1e-4, "{:?}: {}", kind, err);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for kind in [ModelKind::VerbMlp, ModelKind::Mlp, ModelKind::Tf, ModelKind::Xtf] {
        let m64 = model(kind, 2);
        let m: Model<f32> = m64.cast();
        let ck = Checkpoint::from_params(serde_json::json!({"kind": kind}), m.params.names(), m.params.tensors());
        let path = dir.path().join(format!("{}.ckpt", kind.name()));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.header, ck.header);
        let mut fresh = Model::<f32>::new(m.spec.clone(), 99).unwrap();
        fresh.params.assign(&back.tensors).unwrap();
        let x: Vec<f32> = (0..4).map(|i| i as f32 * 0.25 - 0.4).collect();
        match kind {
            ModelKind::VerbMlp => {
                let a = verb_forward(&m, &x, Mode::Eval, &mut rng(0)).unwrap();
                let b = verb_forward(&fresh, &x, Mode::Eval, &mut rng(0)).unwrap();
                assert_eq!(a, b);
            }
            ModelKind::Mlp => {
                let a = mlp_forward(&m, &x, &x, &x, 0, Mode::Eval, &mut rng(0)).unwrap();
                let b = mlp_forward(&fresh, &x, &x, &x, 0, Mode::Eval, &mut rng(0)).unwrap();
                assert_eq!(a, b);
            }
            ModelKind::Tf => {
                let a = tf_forward(&m, &x, &x, &[&x, &x], &[0, 1], 6, Mode::Eval, &mut rng(0)).unwrap();
                let b = tf_forward(&fresh, &x, &x, &[&x, &x], &[0, 1], 6, Mode::Eval, &mut rng(0)).unwrap();
                assert_eq!(a, b);
            }
            ModelKind::Xtf => {
                let p = Tensor::matrix(3, 4, (0..12).map(|i| (i as f32).sin()).collect()).unwrap();
                let a = xtf_forward(&m, &p, &x, &[&x], &[2], Mode::Eval, &mut rng(0)).unwrap();
                let b = xtf_forward(&fresh, &p, &x, &[&x], &[2], Mode::Eval, &mut rng(0)).unwrap();
                assert_eq!(a, b);
            }
        }
    }
}

#[test]
fn checkpoint_rejects_corruption() {
    let m = Model::<f32>::new(tiny_spec(ModelKind::Mlp), 0).unwrap();
    let bytes = Checkpoint::from_params(serde_json::json!({}), m.params.names(), m.params.tensors())
        .to_bytes()
        .unwrap();
    assert!(Checkpoint::from_bytes(&bytes).is_ok());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    let mut long = bytes;
    long.push(0);
    assert!(Checkpoint::from_bytes(&long).is_err());
}

#[test]
fn same_seed_same_parameters() {
    let a = Model::<f64>::new(tiny_spec(ModelKind::Tf), 17).unwrap();
    let b = Model::<f64>::new(tiny_spec(ModelKind::Tf), 17).unwrap();
    let c = Model::<f64>::new(tiny_spec(ModelKind::Tf), 18).unwrap();
    assert_eq!(a.params.tensors(), b.params.tensors());
    assert_ne!(a.params.tensors(), c.params.tensors());
}

#[test]
fn shape_errors_are_reported() {
    let m = model(ModelKind::VerbMlp, 0);
    assert!(verb_forward(&m, &[0.0; 3], Mode::Eval, &mut rng(0)).is_err());
    let t = model(ModelKind::Tf, 0);
    let x = [0.0; 4];
    let seven: Vec<&[f64]> = vec![&x; 7];
    assert!(tf_forward(&t, &x, &x, &seven, &[0; 7], 7, Mode::Eval, &mut rng(0)).is_err());
    let xt = model(ModelKind::Xtf, 0);
    let wrong = Tensor::zeros(&[4, 4]);
    assert!(xtf_forward(&xt, &wrong, &x, &[&x], &[0], Mode::Eval, &mut rng(0)).is_err());
}
