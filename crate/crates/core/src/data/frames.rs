//! Annotated frames and the dataset JSON reader/writer.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use super::vocab::{Vocab, BLANK_NOUN};
use crate::error::{Result, SituError};

/// Box in relative `(cx, cy, w, h)` form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn is_normalized(&self) -> bool {
        self.to_array().iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Coordinate order produced by the box decoder: `(cx, cy, h, w)`.
    pub fn to_decoder_order(self) -> [f64; 4] {
        [self.cx, self.cy, self.h, self.w]
    }

    pub fn from_decoder_order(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[3], a[2])
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }
}

/// One annotated image. `role_annotations[i]` and `boxes[i]` follow the
/// verb's frame order; `None` marks an ungrounded role.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image_id: String,
    pub verb: usize,
    pub role_annotations: Vec<Vec<usize>>,
    pub boxes: Vec<Option<BBox>>,
}

impl Frame {
    pub fn num_roles(&self) -> usize {
        self.role_annotations.len()
    }

    pub fn annotators(&self) -> usize {
        self.role_annotations.first().map_or(0, Vec::len)
    }

    pub fn is_grounded(&self) -> bool {
        self.boxes.iter().any(Option::is_some)
    }
}

pub enum VocabMode<'a> {
    /// Construct the vocabulary from the file, names sorted.
    Build,
    /// Resolve names against an existing vocabulary.
    Given(&'a Vocab),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoleRecord {
    pub role: String,
    pub annotations: Vec<String>,
    pub bbox: Option<[f64; 4]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameRecord {
    pub image_id: String,
    pub verb: String,
    pub frames: Vec<RoleRecord>,
}

fn parse_err(context: &str, e: impl std::fmt::Display) -> SituError {
    SituError::Parse {
        context: context.to_string(),
        message: e.to_string(),
    }
}

pub fn load_frames(path: &Path, mode: VocabMode<'_>) -> Result<(Vocab, Vec<Frame>)> {
    let text = std::fs::read_to_string(path).map_err(|e| SituError::io(path, e))?;
    parse_frames(&text, &path.display().to_string(), mode)
}

pub fn parse_frames(text: &str, context: &str, mode: VocabMode<'_>) -> Result<(Vocab, Vec<Frame>)> {
    let records: Vec<FrameRecord> = serde_json::from_str(text).map_err(|e| parse_err(context, e))?;
    frames_from_records(&records, mode)
}

fn build_vocab(records: &[FrameRecord]) -> Result<Vocab> {
    let mut verbs = BTreeSet::new();
    let mut roles = BTreeSet::new();
    let mut nouns = BTreeSet::new();
    let mut frames: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for rec in records {
        verbs.insert(rec.verb.as_str());
        let order: Vec<&str> = rec.frames.iter().map(|r| r.role.as_str()).collect();
        match frames.get(rec.verb.as_str()) {
            Some(existing) if *existing != order => {
                return Err(SituError::frame(
                    &rec.image_id,
                    format!(
                        "roles {:?} do not match frame {:?} of verb {:?}",
                        order, existing, rec.verb
                    ),
                ));
            }
            Some(_) => {}
            None => {
                frames.insert(rec.verb.as_str(), order);
            }
        }
        for r in &rec.frames {
            roles.insert(r.role.as_str());
            for n in &r.annotations {
                if n != BLANK_NOUN {
                    nouns.insert(n.as_str());
                }
            }
        }
    }
    let verbs: Vec<String> = verbs.into_iter().map(String::from).collect();
    let roles: Vec<String> = roles.into_iter().map(String::from).collect();
    let role_ix: HashMap<&str, usize> =
        roles.iter().enumerate().map(|(i, r)| (r.as_str(), i)).collect();
    let mut noun_list = vec![BLANK_NOUN.to_string()];
    noun_list.extend(nouns.into_iter().map(String::from));
    let verb_frames = verbs
        .iter()
        .map(|v| frames[v.as_str()].iter().map(|r| role_ix[r]).collect())
        .collect();
    Vocab::new(verbs, roles, noun_list, verb_frames)
}

pub fn frames_from_records(records: &[FrameRecord], mode: VocabMode<'_>) -> Result<(Vocab, Vec<Frame>)> {
    let vocab = match mode {
        VocabMode::Build => build_vocab(records)?,
        VocabMode::Given(v) => v.clone(),
    };
    let mut annotators: Option<usize> = None;
    let mut seen = HashSet::new();
    let mut frames = Vec::with_capacity(records.len());
    for rec in records {
        let id = rec.image_id.as_str();
        if !seen.insert(id) {
            return Err(SituError::frame(id, "duplicate image_id"));
        }
        let verb = vocab
            .verb_index(&rec.verb)
            .ok_or_else(|| SituError::frame(id, format!("unknown verb {:?}", rec.verb)))?;
        let frame_roles = vocab.frame(verb);
        if rec.frames.len() != frame_roles.len() {
            return Err(SituError::frame(
                id,
                format!(
                    "verb {:?} has {} roles but the record lists {}",
                    rec.verb,
                    frame_roles.len(),
                    rec.frames.len()
                ),
            ));
        }
        let mut by_role: HashMap<usize, &RoleRecord> = HashMap::new();
        for r in &rec.frames {
            let ri = vocab
                .role_index(&r.role)
                .ok_or_else(|| SituError::frame(id, format!("unknown role {:?}", r.role)))?;
            if by_role.insert(ri, r).is_some() {
                return Err(SituError::frame(id, format!("role {:?} listed twice", r.role)));
            }
        }
        let mut role_annotations = Vec::with_capacity(frame_roles.len());
        let mut boxes = Vec::with_capacity(frame_roles.len());
        for &ri in frame_roles {
            let r = by_role.get(&ri).ok_or_else(|| {
                SituError::frame(
                    id,
                    format!("role {:?} of verb {:?} missing", vocab.roles()[ri], rec.verb),
                )
            })?;
            let q = r.annotations.len();
            if q == 0 {
                return Err(SituError::frame(id, format!("role {:?} has no annotations", r.role)));
            }
            match annotators {
                None => annotators = Some(q),
                Some(expected) if expected != q => {
                    return Err(SituError::frame(
                        id,
                        format!(
                            "role {:?} has {} annotations, dataset uses {}",
                            r.role, q, expected
                        ),
                    ));
                }
                Some(_) => {}
            }
            let ann = r
                .annotations
                .iter()
                .map(|n| {
                    vocab
                        .noun_index(n)
                        .ok_or_else(|| SituError::frame(id, format!("unknown noun {:?}", n)))
                })
                .collect::<Result<Vec<_>>>()?;
            role_annotations.push(ann);
            let b = match r.bbox {
                Some(a) => {
                    let b = BBox::from_array(a);
                    if !b.is_normalized() {
                        return Err(SituError::frame(
                            id,
                            format!("box {:?} for role {:?} outside [0,1]", a, r.role),
                        ));
                    }
                    Some(b)
                }
                None => None,
            };
            boxes.push(b);
        }
        frames.push(Frame {
            image_id: rec.image_id.clone(),
            verb,
            role_annotations,
            boxes,
        });
    }
    Ok((vocab, frames))
}

pub fn frames_to_records(vocab: &Vocab, frames: &[Frame]) -> Vec<FrameRecord> {
    frames
        .iter()
        .map(|f| FrameRecord {
            image_id: f.image_id.clone(),
            verb: vocab.verbs()[f.verb].clone(),
            frames: vocab
                .frame(f.verb)
                .iter()
                .zip(&f.role_annotations)
                .zip(&f.boxes)
                .map(|((&r, ann), b)| RoleRecord {
                    role: vocab.roles()[r].clone(),
                    annotations: ann.iter().map(|&n| vocab.nouns()[n].clone()).collect(),
                    bbox: b.map(BBox::to_array),
                })
                .collect(),
        })
        .collect()
}

pub fn save_frames(path: &Path, vocab: &Vocab, frames: &[Frame]) -> Result<()> {
    let text = serde_json::to_string_pretty(&frames_to_records(vocab, frames))
        .map_err(|e| parse_err(&path.display().to_string(), e))?;
    std::fs::write(path, text).map_err(|e| SituError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPRAYING: &str = r#"[{
        "image_id": "spraying_1.jpg",
        "verb": "spraying",
        "frames": [
            {"role": "agent", "annotations": ["firefighter", "firefighter", "man"], "bbox": [0.3, 0.5, 0.2, 0.6]},
            {"role": "source", "annotations": ["hose", "hose", "hose"], "bbox": null},
            {"role": "substance", "annotations": ["water", "water", "water"], "bbox": [0.6, 0.4, 0.3, 0.2]},
            {"role": "destination", "annotations": ["fire", "fire", "fire"], "bbox": [0.8, 0.5, 0.2, 0.4]},
            {"role": "place", "annotations": ["", "", "outdoors"], "bbox": null}
        ]
    }]"#;

    #[test]
    fn spraying_frame_has_five_roles() {
        let (vocab, frames) = parse_frames(SPRAYING, "test", VocabMode::Build).unwrap();
        assert_eq!(frames.len(), 1);
        let f = &frames[0];
        assert_eq!(f.num_roles(), 5);
        assert_eq!(f.annotators(), 3);
        assert_eq!(vocab.verbs(), &["spraying".to_string()]);
        assert_eq!(vocab.nouns()[0], BLANK_NOUN);
        assert!(f.boxes[1].is_none());
        assert_eq!(f.boxes[0], Some(BBox::new(0.3, 0.5, 0.2, 0.6)));
        // frame order follows the record, vocab order is sorted
        let roles: Vec<&str> = vocab.frame(f.verb).iter().map(|&r| vocab.roles()[r].as_str()).collect();
        assert_eq!(roles, ["agent", "source", "substance", "destination", "place"]);
        assert_eq!(f.role_annotations[4][0], 0);
    }

    #[test]
    fn empty_list_is_fine() {
        let (vocab, frames) = parse_frames("[]", "test", VocabMode::Build).unwrap();
        assert!(frames.is_empty());
        assert_eq!(vocab.n_verbs(), 0);
        assert_eq!(vocab.nouns(), &[BLANK_NOUN.to_string()]);
    }

    #[test]
    fn identical_annotations_walk_matches_json() {
        let text = r#"[{"image_id": "a", "verb": "eating", "frames": [
            {"role": "agent", "annotations": ["man", "man", "man"], "bbox": null},
            {"role": "food", "annotations": ["pizza", "pizza", "pizza"], "bbox": null}]}]"#;
        let (vocab, frames) = parse_frames(text, "test", VocabMode::Build).unwrap();
        // independent walk over the raw JSON
        let raw: serde_json::Value = serde_json::from_str(text).unwrap();
        for (role_json, ann) in raw[0]["frames"].as_array().unwrap().iter().zip(&frames[0].role_annotations) {
            let names: Vec<&str> = role_json["annotations"]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_str().unwrap())
                .collect();
            assert_eq!(ann.len(), 3);
            assert!(ann.iter().all(|&n| n == ann[0]));
            assert_eq!(vocab.nouns()[ann[0]], names[0]);
        }
    }

    #[test]
    fn rejects_bad_records() {
        let bad_box = SPRAYING.replace("[0.3, 0.5, 0.2, 0.6]", "[0.3, 1.5, 0.2, 0.6]");
        assert!(parse_frames(&bad_box, "t", VocabMode::Build).is_err());

        let bad_q = SPRAYING.replace(r#"["hose", "hose", "hose"]"#, r#"["hose", "hose"]"#);
        assert!(parse_frames(&bad_q, "t", VocabMode::Build).is_err());

        assert!(parse_frames("{not json", "t", VocabMode::Build).is_err());

        let (vocab, _) = parse_frames(SPRAYING, "t", VocabMode::Build).unwrap();
        let unknown = SPRAYING.replace("\"hose\", \"hose\", \"hose\"", "\"hose\", \"hose\", \"bucket\"");
        assert!(parse_frames(&unknown, "t", VocabMode::Given(&vocab)).is_err());

        let missing_role = r#"[{"image_id": "b", "verb": "spraying", "frames": [
            {"role": "agent", "annotations": ["man", "man", "man"], "bbox": null}]}]"#;
        let err = parse_frames(missing_role, "t", VocabMode::Given(&vocab)).unwrap_err();
        assert!(err.to_string().contains("5 roles"), "{}", err);
    }

    #[test]
    fn given_mode_reorders_roles_to_frame_order() {
        let (vocab, original) = parse_frames(SPRAYING, "t", VocabMode::Build).unwrap();
        let mut recs: Vec<FrameRecord> = serde_json::from_str(SPRAYING).unwrap();
        recs[0].frames.reverse();
        let (_, frames) = frames_from_records(&recs, VocabMode::Given(&vocab)).unwrap();
        assert_eq!(frames, original);
    }

    #[test]
    fn save_load_round_trip() {
        let (vocab, frames) = parse_frames(SPRAYING, "t", VocabMode::Build).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.json");
        save_frames(&p, &vocab, &frames).unwrap();
        let (v2, f2) = load_frames(&p, VocabMode::Build).unwrap();
        assert_eq!(v2, vocab);
        assert_eq!(f2, frames);
    }
}
