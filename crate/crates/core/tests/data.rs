use situ_core::data::{
    load_embedding_store, load_frames, parse_frames, save_frames, synth_dataset, EmbeddingStore, EncoderTag,
    StoreParts, SynthConfig, VocabMode, BLANK_NOUN, STORE_MAGIC,
};
use situ_core::SituError;

#[test]
fn encoder_geometry_table() {
    let rows: Vec<_> = EncoderTag::ALL.iter().map(|t| (t.name(), t.geometry().unwrap())).collect();
    assert_eq!(
        rows,
        vec![
            ("B32", (512, 50, 224)),
            ("B16", (512, 197, 224)),
            ("L14", (768, 257, 224)),
            ("L14_336", (768, 577, 336)),
        ]
    );
    for t in EncoderTag::ALL {
        let (_, p, res) = t.geometry().unwrap();
        let side = res / t.patch_size().unwrap();
        assert_eq!(p, side * side + 1);
    }
}

#[test]
fn synth_dataset_shape() {
    let cfg = SynthConfig::default();
    let d = synth_dataset(&cfg).unwrap();
    assert_eq!(d.frames.len(), 32);
    assert_eq!(d.vocab.n_verbs(), 8);
    assert_eq!(d.vocab.n_nouns(), 64);
    assert_eq!(d.vocab.nouns()[0], BLANK_NOUN);
    assert!(d.vocab.max_frame_len() <= 6);
    assert!(d.frames.iter().all(|f| f.annotators() == 3 && f.num_roles() <= 6));
    let roles: usize = d.frames.iter().map(|f| f.num_roles()).sum();
    let split = d
        .frames
        .iter()
        .flat_map(|f| &f.role_annotations)
        .filter(|a| a.iter().any(|&n| n != a[0]))
        .count();
    let rate = split as f64 / roles as f64;
    assert!(rate > 0.05 && rate < 0.4, "disagreement rate {}", rate);
    assert_eq!(d.store.patch_count(), 50);
    assert_eq!(synth_dataset(&cfg).unwrap(), d);
}

#[test]
fn store_file_round_trip() {
    let d = synth_dataset(&SynthConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.bin");
    d.store.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], STORE_MAGIC);
    let back = load_embedding_store(&path).unwrap();
    assert_eq!(back, d.store);
    assert_eq!(back.to_bytes(), bytes);
    assert!(EmbeddingStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[1] = b'?';
    assert!(EmbeddingStore::from_bytes(&bad).is_err());
}

fn parts(n: usize, dim: usize, p: usize) -> StoreParts {
    StoreParts {
        image_ids: (0..n).map(|i| format!("i{}", i)).collect(),
        pooled: vec![0.5; n * dim],
        patches: vec![0.25; n * p * dim],
        verb_names: vec!["run".into()],
        verb_emb: vec![1.0; dim],
        role_names: vec!["agent".into()],
        role_emb: vec![1.0; dim],
        noun_names: vec![BLANK_NOUN.into(), "dog".into()],
        noun_emb: vec![1.0; 2 * dim],
    }
}

#[test]
fn store_validation() {
    assert!(EmbeddingStore::new(EncoderTag::B32, 512, 50, parts(2, 512, 50)).is_ok());
    assert!(EmbeddingStore::new(EncoderTag::B32, 512, 49, parts(2, 512, 49)).is_err());
    assert!(EmbeddingStore::new(EncoderTag::L14, 512, 257, parts(1, 512, 257)).is_err());
    let mut nan = parts(2, 8, 3);
    nan.pooled[9] = f32::NAN;
    let err = EmbeddingStore::new(EncoderTag::Custom, 8, 3, nan).unwrap_err();
    assert!(err.to_string().contains("i1"), "{}", err);
    let mut dup = parts(2, 8, 3);
    dup.image_ids[1] = "i0".into();
    assert!(EmbeddingStore::new(EncoderTag::Custom, 8, 3, dup).is_err());
    let mut short = parts(2, 8, 3);
    short.patches.pop();
    assert!(EmbeddingStore::new(EncoderTag::Custom, 8, 3, short).is_err());
}

#[test]
fn frames_file_round_trip() {
    let d = synth_dataset(&SynthConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("frames.json");
    save_frames(&path, &d.vocab, &d.frames).unwrap();
    let (_, frames) = load_frames(&path, VocabMode::Given(&d.vocab)).unwrap();
    assert_eq!(frames, d.frames);
    let vpath = dir.path().join("vocab.json");
    d.vocab.save(&vpath).unwrap();
    assert_eq!(situ_core::data::Vocab::load(&vpath).unwrap(), d.vocab);
}

#[test]
fn frame_errors_name_the_image() {
    let text = r#"[
        {"image_id": "a.jpg", "verb": "jump", "frames": [
            {"role": "agent", "annotations": ["dog", "dog", "cat"], "bbox": [0.5, 0.5, 0.2, 0.2]},
            {"role": "place", "annotations": ["", "", ""], "bbox": null}]},
        {"image_id": "b.jpg", "verb": "jump", "frames": [
            {"role": "agent", "annotations": ["dog", "dog"], "bbox": null},
            {"role": "place", "annotations": ["", "", ""], "bbox": null}]}
    ]"#;
    let err = parse_frames(text, "mem", VocabMode::Build).unwrap_err();
    assert!(matches!(err, SituError::Frame { .. }), "{:?}", err);
    assert!(err.to_string().contains("b.jpg"), "{}", err);
    let ok = text.replace(r#"["dog", "dog"]"#, r#"["dog", "dog", "dog"]"#);
    let (vocab, frames) = parse_frames(&ok, "mem", VocabMode::Build).unwrap();
    assert_eq!(vocab.nouns(), &["", "cat", "dog"]);
    assert_eq!(frames[0].role_annotations[1], vec![0, 0, 0]);
    assert!(frames[0].is_grounded());
    assert!(!frames[1].is_grounded());
    assert!(parse_frames("{", "mem", VocabMode::Build).is_err());
}
