use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Result, SituError};

/// Name of the noun class meaning "no entity fills this role". Always index 0.
pub const BLANK_NOUN: &str = "";

/// Verb, role and noun vocabularies plus the ordered role frame of each verb.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    verbs: Vec<String>,
    roles: Vec<String>,
    nouns: Vec<String>,
    verb_frames: Vec<Vec<usize>>,
    #[serde(skip)]
    verb_ix: HashMap<String, usize>,
    #[serde(skip)]
    role_ix: HashMap<String, usize>,
    #[serde(skip)]
    noun_ix: HashMap<String, usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabFile {
    verbs: Vec<String>,
    roles: Vec<String>,
    nouns: Vec<String>,
    verb_frames: BTreeMap<String, Vec<String>>,
}

fn index_of(kind: &str, names: &[String]) -> Result<HashMap<String, usize>> {
    let mut ix = HashMap::with_capacity(names.len());
    for (i, n) in names.iter().enumerate() {
        if ix.insert(n.clone(), i).is_some() {
            return Err(SituError::Vocab(format!("duplicate {} name {:?}", kind, n)));
        }
    }
    Ok(ix)
}

impl Vocab {
    /// `verb_frames[v]` lists role indices of verb `v` in frame order.
    pub fn new(
        verbs: Vec<String>,
        roles: Vec<String>,
        nouns: Vec<String>,
        verb_frames: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let verb_ix = index_of("verb", &verbs)?;
        let role_ix = index_of("role", &roles)?;
        let noun_ix = index_of("noun", &nouns)?;
        if nouns.first().map(String::as_str) != Some(BLANK_NOUN) {
            return Err(SituError::Vocab("noun 0 must be the blank noun".into()));
        }
        if verb_frames.len() != verbs.len() {
            return Err(SituError::Vocab(format!(
                "{} verb frames for {} verbs",
                verb_frames.len(),
                verbs.len()
            )));
        }
        for (v, frame) in verb_frames.iter().enumerate() {
            for (i, &r) in frame.iter().enumerate() {
                if r >= roles.len() {
                    return Err(SituError::Vocab(format!(
                        "verb {:?} references role index {}",
                        verbs[v], r
                    )));
                }
                if frame[..i].contains(&r) {
                    return Err(SituError::Vocab(format!(
                        "verb {:?} lists role {:?} twice",
                        verbs[v], roles[r]
                    )));
                }
            }
        }
        Ok(Self {
            verbs,
            roles,
            nouns,
            verb_frames,
            verb_ix,
            role_ix,
            noun_ix,
        })
    }

    pub fn verbs(&self) -> &[String] {
        &self.verbs
    }

    pub fn roles(&self) -> &[String] {
        &self.roles
    }

    pub fn nouns(&self) -> &[String] {
        &self.nouns
    }

    pub fn n_verbs(&self) -> usize {
        self.verbs.len()
    }

    pub fn n_roles(&self) -> usize {
        self.roles.len()
    }

    pub fn n_nouns(&self) -> usize {
        self.nouns.len()
    }

    pub fn verb_index(&self, name: &str) -> Option<usize> {
        self.verb_ix.get(name).copied()
    }

    pub fn role_index(&self, name: &str) -> Option<usize> {
        self.role_ix.get(name).copied()
    }

    pub fn noun_index(&self, name: &str) -> Option<usize> {
        self.noun_ix.get(name).copied()
    }

    /// Ordered role indices of `verb`.
    pub fn frame(&self, verb: usize) -> &[usize] {
        &self.verb_frames[verb]
    }

    pub fn verb_frames(&self) -> &[Vec<usize>] {
        &self.verb_frames
    }

    pub fn max_frame_len(&self) -> usize {
        self.verb_frames.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| SituError::Parse {
            context: path.display().to_string(),
            message: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|e| SituError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SituError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| SituError::Parse {
            context: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

impl TryFrom<VocabFile> for Vocab {
    type Error = SituError;

    fn try_from(f: VocabFile) -> Result<Self> {
        let role_ix = index_of("role", &f.roles)?;
        let mut frames = Vec::with_capacity(f.verbs.len());
        for v in &f.verbs {
            let names = f.verb_frames.get(v).ok_or_else(|| {
                SituError::Vocab(format!("verb {:?} has no frame", v))
            })?;
            let frame = names
                .iter()
                .map(|r| {
                    role_ix
                        .get(r)
                        .copied()
                        .ok_or_else(|| SituError::Vocab(format!("unknown role {:?}", r)))
                })
                .collect::<Result<Vec<_>>>()?;
            frames.push(frame);
        }
        if f.verb_frames.len() != f.verbs.len() {
            return Err(SituError::Vocab("verb_frames names unknown verbs".into()));
        }
        Vocab::new(f.verbs, f.roles, f.nouns, frames)
    }
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        let verb_frames = v
            .verbs
            .iter()
            .zip(&v.verb_frames)
            .map(|(name, fr)| {
                (
                    name.clone(),
                    fr.iter().map(|&r| v.roles[r].clone()).collect(),
                )
            })
            .collect();
        VocabFile {
            verbs: v.verbs,
            roles: v.roles,
            nouns: v.nouns,
            verb_frames,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn json_round_trip() {
        let v = Vocab::new(
            s(&["eating", "spraying"]),
            s(&["agent", "food", "place"]),
            s(&["", "man", "pizza"]),
            vec![vec![0, 1, 2], vec![2, 0]],
        )
        .unwrap();
        let text = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.frame(1), &[2, 0]);
        assert_eq!(back.noun_index("pizza"), Some(2));
    }

    #[test]
    fn rejects_duplicates_and_missing_blank() {
        assert!(Vocab::new(s(&["a", "a"]), s(&[]), s(&[""]), vec![vec![], vec![]]).is_err());
        assert!(Vocab::new(s(&["a"]), s(&["r"]), s(&["x"]), vec![vec![0]]).is_err());
        assert!(Vocab::new(s(&["a"]), s(&["r"]), s(&[""]), vec![vec![0, 0]]).is_err());
        assert!(Vocab::new(s(&["a"]), s(&["r"]), s(&[""]), vec![vec![1]]).is_err());
    }
}
