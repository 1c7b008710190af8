//! Seeded synthetic datasets shaped like the real ones.
//!
//! Image embeddings are built to carry the frame content: the pooled vector
//! mixes the verb and the ground-truth nouns, and the patch tokens covering a
//! grounded role's box mix that role's and noun's text embeddings. Patches
//! beyond the class token form a `g×g` grid with `g = floor(sqrt(p - 1))`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::frames::{BBox, Frame};
use super::store::{EmbeddingStore, EncoderTag, StoreParts};
use super::vocab::{Vocab, BLANK_NOUN};
use crate::error::{Result, SituError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_verbs: usize,
    pub n_roles: usize,
    /// Includes the blank noun.
    pub n_nouns: usize,
    pub n_images: usize,
    pub annotators: usize,
    pub dim: usize,
    pub patch_count: usize,
    pub seed: u64,
    pub max_roles: usize,
    /// Fraction of roles on which one annotator disagrees.
    pub disagreement: f64,
    /// Probability that a non-blank role carries a box.
    pub grounded: f64,
    /// Probability that a role's ground truth is the blank noun.
    pub blank_rate: f64,
    /// Scale of the per-image noise mixed into image embeddings.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_verbs: 8,
            n_roles: 12,
            n_nouns: 64,
            n_images: 32,
            annotators: 3,
            dim: 32,
            patch_count: 50,
            seed: 0,
            max_roles: 6,
            disagreement: 0.2,
            grounded: 1.0,
            blank_rate: 0.1,
            noise: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub vocab: Vocab,
    pub frames: Vec<Frame>,
    pub store: EmbeddingStore,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| unit(gaussian(rng, dim))).collect()
}

fn flatten(rows: &[Vec<f64>]) -> Vec<f32> {
    rows.iter().flatten().map(|&v| v as f32).collect()
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    let counts = [
        ("n_verbs", cfg.n_verbs),
        ("n_roles", cfg.n_roles),
        ("n_nouns", cfg.n_nouns),
        ("n_images", cfg.n_images),
        ("annotators", cfg.annotators),
        ("dim", cfg.dim),
        ("patch_count", cfg.patch_count),
        ("max_roles", cfg.max_roles),
    ];
    for (name, v) in counts {
        if v == 0 {
            return Err(SituError::InvalidArgument(format!("{} must be at least 1", name)));
        }
    }
    for (name, v) in [
        ("disagreement", cfg.disagreement),
        ("grounded", cfg.grounded),
        ("blank_rate", cfg.blank_rate),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(SituError::InvalidArgument(format!("{} must lie in [0,1]", name)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim;

    let verbs: Vec<String> = (0..cfg.n_verbs).map(|i| format!("verb{:03}", i)).collect();
    let roles: Vec<String> = (0..cfg.n_roles).map(|i| format!("role{:03}", i)).collect();
    let mut nouns = vec![BLANK_NOUN.to_string()];
    nouns.extend((1..cfg.n_nouns).map(|i| format!("noun{:04}", i)));

    let max_m = cfg.max_roles.min(cfg.n_roles);
    let mut all_roles: Vec<usize> = (0..cfg.n_roles).collect();
    let verb_frames: Vec<Vec<usize>> = (0..cfg.n_verbs)
        .map(|_| {
            let m = rng.random_range(1..=max_m);
            all_roles.shuffle(&mut rng);
            all_roles[..m].to_vec()
        })
        .collect();
    let vocab = Vocab::new(verbs.clone(), roles.clone(), nouns.clone(), verb_frames)?;

    let verb_emb = unit_rows(&mut rng, cfg.n_verbs, d);
    let role_emb = unit_rows(&mut rng, cfg.n_roles, d);
    let noun_emb = unit_rows(&mut rng, cfg.n_nouns, d);

    let grid = if cfg.patch_count > 1 {
        ((cfg.patch_count - 1) as f64).sqrt().floor() as usize
    } else {
        0
    };

    let mut frames = Vec::with_capacity(cfg.n_images);
    let mut pooled = Vec::with_capacity(cfg.n_images * d);
    let mut patches = Vec::with_capacity(cfg.n_images * cfg.patch_count * d);
    let mut image_ids = Vec::with_capacity(cfg.n_images);
    for img in 0..cfg.n_images {
        let image_id = format!("img{:05}", img);
        let verb = rng.random_range(0..cfg.n_verbs);
        let frame_roles = vocab.frame(verb).to_vec();
        let mut role_annotations = Vec::with_capacity(frame_roles.len());
        let mut boxes = Vec::with_capacity(frame_roles.len());
        let mut cells: Vec<Vec<f64>> = vec![vec![0.0; d]; cfg.patch_count];
        let mut content = verb_emb[verb].clone();
        for &role in &frame_roles {
            let noun = if cfg.n_nouns == 1 || rng.random::<f64>() < cfg.blank_rate {
                0
            } else {
                rng.random_range(1..cfg.n_nouns)
            };
            let mut ann = vec![noun; cfg.annotators];
            if cfg.annotators > 1 && cfg.n_nouns > 1 && rng.random::<f64>() < cfg.disagreement {
                let j = rng.random_range(0..cfg.annotators);
                let mut other = rng.random_range(0..cfg.n_nouns - 1);
                if other >= noun {
                    other += 1;
                }
                ann[j] = other;
            }
            role_annotations.push(ann);
            for (c, &v) in content.iter_mut().zip(&noun_emb[noun]) {
                *c += v;
            }

            let grounded = noun != 0 && grid > 0 && rng.random::<f64>() < cfg.grounded;
            if grounded {
                let span = (grid / 2).max(1);
                let wc = rng.random_range(1..=span);
                let hc = rng.random_range(1..=span);
                let x0 = rng.random_range(0..=grid - wc);
                let y0 = rng.random_range(0..=grid - hc);
                let g = grid as f64;
                boxes.push(Some(BBox::new(
                    (x0 as f64 + wc as f64 / 2.0) / g,
                    (y0 as f64 + hc as f64 / 2.0) / g,
                    wc as f64 / g,
                    hc as f64 / g,
                )));
                for y in y0..y0 + hc {
                    for x in x0..x0 + wc {
                        let cell = &mut cells[1 + y * grid + x];
                        for ((c, &r), &n) in cell.iter_mut().zip(&role_emb[role]).zip(&noun_emb[noun]) {
                            *c += r + n;
                        }
                    }
                }
            } else {
                boxes.push(None);
            }
        }
        let noise = gaussian(&mut rng, d);
        let pooled_vec = unit(
            content
                .iter()
                .zip(&noise)
                .map(|(c, n)| c + cfg.noise * n)
                .collect(),
        );
        for (i, cell) in cells.iter_mut().enumerate() {
            if i == 0 {
                cell.copy_from_slice(&pooled_vec);
                continue;
            }
            let noise = gaussian(&mut rng, d);
            for (c, n) in cell.iter_mut().zip(noise) {
                *c += cfg.noise * n;
            }
            let normed = unit(cell.clone());
            cell.copy_from_slice(&normed);
        }
        pooled.extend(pooled_vec.iter().map(|&v| v as f32));
        patches.extend(flatten(&cells));
        image_ids.push(image_id.clone());
        frames.push(Frame {
            image_id,
            verb,
            role_annotations,
            boxes,
        });
    }

    let store = EmbeddingStore::new(
        EncoderTag::Custom,
        d,
        cfg.patch_count,
        StoreParts {
            image_ids,
            pooled,
            patches,
            verb_names: verbs,
            verb_emb: flatten(&verb_emb),
            role_names: roles,
            role_emb: flatten(&role_emb),
            noun_names: nouns,
            noun_emb: flatten(&noun_emb),
        },
    )?;
    Ok(SynthDataset {
        vocab,
        frames,
        store,
    })
}
