//! Binary embedding store.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SITUEMB1"
//! u32 dim, u32 patch_count, u32 images, u32 verbs, u32 roles, u32 nouns
//! u32 index_len, index_len bytes of UTF-8 JSON
//!     {"encoder": tag, "images": [...], "verbs": [...], "roles": [...], "nouns": [...]}
//! f32 payload:
//!     per image: pooled[dim], then patches[patch_count * dim]
//!     verbs[verbs * dim], roles[roles * dim], nouns[nouns * dim]
//! ```

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, SituError};

pub const STORE_MAGIC: &[u8; 8] = b"SITUEMB1";

/// Image encoder identity. Fixes embedding width and patch-token count
/// (patch grid plus one class token).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EncoderTag {
    B32,
    B16,
    L14,
    #[serde(rename = "L14_336")]
    L14At336,
    /// Arbitrary widths, used by synthetic data.
    #[serde(rename = "custom")]
    Custom,
}

impl EncoderTag {
    pub const ALL: [EncoderTag; 4] = [
        EncoderTag::B32,
        EncoderTag::B16,
        EncoderTag::L14,
        EncoderTag::L14At336,
    ];

    /// `(dim, patch_count, resolution)`; `None` for [`EncoderTag::Custom`].
    pub fn geometry(self) -> Option<(usize, usize, usize)> {
        match self {
            EncoderTag::B32 => Some((512, 50, 224)),
            EncoderTag::B16 => Some((512, 197, 224)),
            EncoderTag::L14 => Some((768, 257, 224)),
            EncoderTag::L14At336 => Some((768, 577, 336)),
            EncoderTag::Custom => None,
        }
    }

    pub fn dim(self) -> Option<usize> {
        self.geometry().map(|g| g.0)
    }

    pub fn patch_count(self) -> Option<usize> {
        self.geometry().map(|g| g.1)
    }

    pub fn resolution(self) -> Option<usize> {
        self.geometry().map(|g| g.2)
    }

    /// Patch side length in pixels.
    pub fn patch_size(self) -> Option<usize> {
        match self {
            EncoderTag::B32 => Some(32),
            EncoderTag::B16 => Some(16),
            EncoderTag::L14 | EncoderTag::L14At336 => Some(14),
            EncoderTag::Custom => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EncoderTag::B32 => "B32",
            EncoderTag::B16 => "B16",
            EncoderTag::L14 => "L14",
            EncoderTag::L14At336 => "L14_336",
            EncoderTag::Custom => "custom",
        }
    }

    pub fn check(self, dim: usize, patch_count: usize) -> Result<()> {
        if let Some((d, p, _)) = self.geometry() {
            if d != dim {
                return Err(SituError::Store(format!(
                    "encoder {} has dim {}, store declares {}",
                    self, d, dim
                )));
            }
            if p != patch_count {
                return Err(SituError::Store(format!(
                    "patch_count mismatch: encoder {} has {} tokens, store declares {}",
                    self, p, patch_count
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for EncoderTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncoderTag {
    type Err = SituError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "B32" | "ViT-B32" | "ViT-B/32" => Ok(EncoderTag::B32),
            "B16" | "ViT-B16" | "ViT-B/16" => Ok(EncoderTag::B16),
            "L14" | "ViT-L14" | "ViT-L/14" => Ok(EncoderTag::L14),
            "L14_336" | "L14@336" | "ViT-L14@336px" | "ViT-L/14@336px" => Ok(EncoderTag::L14At336),
            "custom" => Ok(EncoderTag::Custom),
            other => Err(SituError::InvalidArgument(format!("unknown encoder tag {:?}", other))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct NameIndex {
    encoder: EncoderTag,
    images: Vec<String>,
    verbs: Vec<String>,
    roles: Vec<String>,
    nouns: Vec<String>,
}

/// A named table of equal-width vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    names: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(names: Vec<String>, data: Vec<f32>, width: usize) -> Result<Self> {
        if data.len() != names.len() * width {
            return Err(SituError::Store(format!(
                "table with {} names needs {} values, got {}",
                names.len(),
                names.len() * width,
                data.len()
            )));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(SituError::Store(format!("duplicate name {:?}", n)));
            }
        }
        Ok(Self { names, data, index })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Precomputed image and text embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    encoder: EncoderTag,
    dim: usize,
    patch_count: usize,
    image_ids: Vec<String>,
    image_index: HashMap<String, usize>,
    pooled: Vec<f32>,
    patches: Vec<f32>,
    verbs: EmbeddingTable,
    roles: EmbeddingTable,
    nouns: EmbeddingTable,
}

/// Owned inputs to [`EmbeddingStore::new`].
#[derive(Debug, Clone, Default)]
pub struct StoreParts {
    pub image_ids: Vec<String>,
    /// `images × dim`
    pub pooled: Vec<f32>,
    /// `images × patch_count × dim`
    pub patches: Vec<f32>,
    pub verb_names: Vec<String>,
    pub verb_emb: Vec<f32>,
    pub role_names: Vec<String>,
    pub role_emb: Vec<f32>,
    pub noun_names: Vec<String>,
    pub noun_emb: Vec<f32>,
}

fn check_finite(what: &str, data: &[f32], width: usize, names: &[String]) -> Result<()> {
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        let owner = names.get(pos / width.max(1)).map_or("?", String::as_str);
        return Err(SituError::Store(format!(
            "non-finite value (NaN/Inf) in {} entry {:?}",
            what, owner
        )));
    }
    Ok(())
}

impl EmbeddingStore {
    pub fn new(encoder: EncoderTag, dim: usize, patch_count: usize, parts: StoreParts) -> Result<Self> {
        if dim == 0 {
            return Err(SituError::Store("dim must be positive".into()));
        }
        encoder.check(dim, patch_count)?;
        let n = parts.image_ids.len();
        if parts.pooled.len() != n * dim {
            return Err(SituError::Store(format!(
                "pooled table has {} values for {} images of dim {}",
                parts.pooled.len(),
                n,
                dim
            )));
        }
        if parts.patches.len() != n * patch_count * dim {
            return Err(SituError::Store(format!(
                "patch table has {} values, expected {} images × {} patches × {}",
                parts.patches.len(),
                n,
                patch_count,
                dim
            )));
        }
        check_finite("image", &parts.pooled, dim, &parts.image_ids)?;
        check_finite("patch", &parts.patches, patch_count * dim, &parts.image_ids)?;
        check_finite("verb", &parts.verb_emb, dim, &parts.verb_names)?;
        check_finite("role", &parts.role_emb, dim, &parts.role_names)?;
        check_finite("noun", &parts.noun_emb, dim, &parts.noun_names)?;
        let mut image_index = HashMap::with_capacity(n);
        for (i, id) in parts.image_ids.iter().enumerate() {
            if image_index.insert(id.clone(), i).is_some() {
                return Err(SituError::Store(format!("duplicate image id {:?}", id)));
            }
        }
        Ok(Self {
            encoder,
            dim,
            patch_count,
            image_ids: parts.image_ids,
            image_index,
            pooled: parts.pooled,
            patches: parts.patches,
            verbs: EmbeddingTable::new(parts.verb_names, parts.verb_emb, dim)?,
            roles: EmbeddingTable::new(parts.role_names, parts.role_emb, dim)?,
            nouns: EmbeddingTable::new(parts.noun_names, parts.noun_emb, dim)?,
        })
    }

    pub fn encoder(&self) -> EncoderTag {
        self.encoder
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patch_count(&self) -> usize {
        self.patch_count
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn n_images(&self) -> usize {
        self.image_ids.len()
    }

    pub fn image_position(&self, id: &str) -> Option<usize> {
        self.image_index.get(id).copied()
    }

    pub fn pooled(&self, image: usize) -> &[f32] {
        &self.pooled[image * self.dim..(image + 1) * self.dim]
    }

    /// `patch_count × dim`, class token first.
    pub fn patches(&self, image: usize) -> &[f32] {
        let n = self.patch_count * self.dim;
        &self.patches[image * n..(image + 1) * n]
    }

    pub fn verbs(&self) -> &EmbeddingTable {
        &self.verbs
    }

    pub fn roles(&self) -> &EmbeddingTable {
        &self.roles
    }

    pub fn nouns(&self) -> &EmbeddingTable {
        &self.nouns
    }

    pub fn verb(&self, name: &str) -> Option<&[f32]> {
        self.verbs.position(name).map(|i| self.row(&self.verbs, i))
    }

    pub fn role(&self, name: &str) -> Option<&[f32]> {
        self.roles.position(name).map(|i| self.row(&self.roles, i))
    }

    pub fn noun(&self, name: &str) -> Option<&[f32]> {
        self.nouns.position(name).map(|i| self.row(&self.nouns, i))
    }

    fn row<'a>(&self, t: &'a EmbeddingTable, i: usize) -> &'a [f32] {
        &t.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let index = NameIndex {
            encoder: self.encoder,
            images: self.image_ids.clone(),
            verbs: self.verbs.names.clone(),
            roles: self.roles.names.clone(),
            nouns: self.nouns.names.clone(),
        };
        let json = serde_json::to_vec(&index).expect("name index serialises");
        let floats = self.pooled.len()
            + self.patches.len()
            + self.verbs.data.len()
            + self.roles.data.len()
            + self.nouns.data.len();
        let mut out = Vec::with_capacity(8 + 28 + json.len() + 4 * floats);
        out.extend_from_slice(STORE_MAGIC);
        for v in [
            self.dim,
            self.patch_count,
            self.image_ids.len(),
            self.verbs.len(),
            self.roles.len(),
            self.nouns.len(),
            json.len(),
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&json);
        let push = |out: &mut Vec<u8>, vals: &[f32]| {
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        let per = self.patch_count * self.dim;
        for i in 0..self.image_ids.len() {
            push(&mut out, self.pooled(i));
            push(&mut out, &self.patches[i * per..(i + 1) * per]);
        }
        push(&mut out, &self.verbs.data);
        push(&mut out, &self.roles.data);
        push(&mut out, &self.nouns.data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic header")?;
        if magic != STORE_MAGIC {
            return Err(SituError::Store("bad magic: not a SITUEMB1 file".into()));
        }
        let dim = r.u32("dim")? as usize;
        let patch_count = r.u32("patch_count")? as usize;
        let n_images = r.u32("image count")? as usize;
        let n_verbs = r.u32("verb count")? as usize;
        let n_roles = r.u32("role count")? as usize;
        let n_nouns = r.u32("noun count")? as usize;
        let index_len = r.u32("index length")? as usize;
        let index: NameIndex = serde_json::from_slice(r.take(index_len, "name index")?)
            .map_err(|e| SituError::Store(format!("name index: {}", e)))?;
        let counts = [
            ("images", index.images.len(), n_images),
            ("verbs", index.verbs.len(), n_verbs),
            ("roles", index.roles.len(), n_roles),
            ("nouns", index.nouns.len(), n_nouns),
        ];
        for (what, got, declared) in counts {
            if got != declared {
                return Err(SituError::Store(format!(
                    "name index lists {} {}, header declares {}",
                    got, what, declared
                )));
            }
        }
        index.encoder.check(dim, patch_count)?;

        let mut pooled = Vec::with_capacity(n_images * dim);
        let mut patches = Vec::with_capacity(n_images * patch_count * dim);
        for id in &index.images {
            let what = format!("image {:?}", id);
            r.floats(dim, &what, &mut pooled)?;
            r.floats(patch_count * dim, &what, &mut patches)?;
        }
        let mut verb_emb = Vec::new();
        r.floats(n_verbs * dim, "verb table", &mut verb_emb)?;
        let mut role_emb = Vec::new();
        r.floats(n_roles * dim, "role table", &mut role_emb)?;
        let mut noun_emb = Vec::new();
        r.floats(n_nouns * dim, "noun table", &mut noun_emb)?;
        if r.pos != bytes.len() {
            return Err(SituError::Store(format!(
                "{} trailing bytes after payload",
                bytes.len() - r.pos
            )));
        }
        Self::new(
            index.encoder,
            dim,
            patch_count,
            StoreParts {
                image_ids: index.images,
                pooled,
                patches,
                verb_names: index.verbs,
                verb_emb,
                role_names: index.roles,
                role_emb,
                noun_names: index.nouns,
                noun_emb,
            },
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| SituError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| SituError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| e.context(path.display().to_string()))
    }
}

pub fn load_embedding_store(path: &Path) -> Result<EmbeddingStore> {
    EmbeddingStore::load(path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(SituError::Store(format!("truncated payload in {}", what)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn floats(&mut self, n: usize, what: &str, out: &mut Vec<f32>) -> Result<()> {
        let b = self.take(n * 4, what)?;
        out.extend(
            b.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
        );
        Ok(())
    }
}
