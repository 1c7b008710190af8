//! Annotator-aware noun losses and the box regression term.

use serde::{Deserialize, Serialize};

use crate::data::Frame;
use crate::error::{Result, SituError};
use crate::kernel::{cross_entropy, AnnotatorReduction, CeRow, L1Row, Tape, Var};
use crate::scalar::Scalar;

/// Noun supervision when several annotators disagree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Minimum over annotators.
    #[default]
    Maxe,
    /// Plain cross-entropy averaged over every annotator label.
    CeAllAnnotators,
}

impl LossMode {
    pub fn reduction(self) -> AnnotatorReduction {
        match self {
            LossMode::Maxe => AnnotatorReduction::Min,
            LossMode::CeAllAnnotators => AnnotatorReduction::Mean,
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = SituError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maxe" => Ok(LossMode::Maxe),
            "ce_all_annotators" => Ok(LossMode::CeAllAnnotators),
            other => Err(SituError::Config(format!("unknown loss {:?}", other))),
        }
    }
}

/// Smallest cross-entropy over the annotator targets.
pub fn maxe_loss<T: Scalar>(logits: &[T], targets: &[usize]) -> Result<T> {
    let (&first, rest) = targets
        .split_first()
        .ok_or_else(|| SituError::InvalidArgument("maxe_loss: empty target list".into()))?;
    let mut best = cross_entropy(logits, first)?;
    for &t in rest {
        let l = cross_entropy(logits, t)?;
        if l < best {
            best = l;
        }
    }
    Ok(best)
}

/// Mean L1 distance over grounded roles, `0` if none is grounded.
pub fn box_l1_loss<T: Scalar>(pred: &[[T; 4]], gt: &[Option<[T; 4]>]) -> Result<T> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(SituError::shape(
            "box_l1_loss",
            format!("{} predicted boxes for {} roles", pred.len(), gt.len()),
        ));
    }
    let mut sum = T::zero();
    let mut n = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        if let Some(g) = g {
            sum += p.iter().zip(g).map(|(&a, &b)| (a - b).abs()).sum::<T>();
            n += 1;
        }
    }
    Ok(if n == 0 { T::zero() } else { sum / T::lit(n as f64) })
}

/// One frame's objective: mean per-role MAXE plus `lambda` times the box term.
pub fn combined_loss<T: Scalar>(
    noun_logits: &[Vec<T>],
    targets: &[Vec<usize>],
    pred_boxes: Option<&[[T; 4]]>,
    gt_boxes: &[Option<[T; 4]>],
    lambda: T,
) -> Result<T> {
    if noun_logits.len() != targets.len() || noun_logits.is_empty() {
        return Err(SituError::shape(
            "combined_loss",
            format!("{} logit rows for {} roles", noun_logits.len(), targets.len()),
        ));
    }
    let mut nouns = T::zero();
    for (l, t) in noun_logits.iter().zip(targets) {
        nouns += maxe_loss(l, t)?;
    }
    let nouns = nouns / T::lit(targets.len() as f64);
    match pred_boxes {
        Some(p) => {
            if gt_boxes.len() != targets.len() {
                return Err(SituError::shape("combined_loss", "box and role counts differ"));
            }
            Ok(nouns + lambda * box_l1_loss(p, gt_boxes)?)
        }
        None => Ok(nouns),
    }
}

/// Batch noun objective on the tape: the mean over frames of
/// [`combined_loss`]. `rows[f][i]` addresses role `i` of `frames[f]`; boxes
/// are compared in decoder order.
pub fn noun_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    rows: &[Vec<usize>],
    boxes: Option<Var>,
    frames: &[&Frame],
    mode: LossMode,
    lambda: f64,
) -> Result<Var> {
    if rows.len() != frames.len() || frames.is_empty() {
        return Err(SituError::shape("noun_loss", "row map and frame count differ"));
    }
    let b = frames.len() as f64;
    let mut ce_rows = Vec::new();
    let mut l1_rows = Vec::new();
    for (f, (frame, r)) in frames.iter().zip(rows).enumerate() {
        if r.len() != frame.num_roles() {
            return Err(SituError::frame(
                &frame.image_id,
                format!("{} predicted roles but the frame has {}", r.len(), frame.num_roles()),
            ));
        }
        let w = T::lit(1.0 / (b * r.len() as f64));
        for (i, &row) in r.iter().enumerate() {
            ce_rows.push(CeRow {
                row,
                targets: frame.role_annotations[i].clone(),
                weight: w,
            });
        }
        let grounded = frame.boxes.iter().filter(|x| x.is_some()).count();
        if grounded > 0 {
            let w = T::lit(lambda / (b * grounded as f64));
            for (i, bx) in frame.boxes.iter().enumerate() {
                if let Some(bx) = bx {
                    l1_rows.push(L1Row {
                        row: rows[f][i],
                        target: bx.to_decoder_order().map(T::lit),
                        weight: w,
                    });
                }
            }
        }
    }
    let ce = tape.cross_entropy(logits, ce_rows, mode.reduction())?;
    match boxes {
        Some(bx) if !l1_rows.is_empty() => {
            let l1 = tape.l1(bx, l1_rows)?;
            tape.add(ce, l1)
        }
        _ => Ok(ce),
    }
}

/// Mean verb cross-entropy over a batch.
pub fn verb_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, verbs: &[usize]) -> Result<Var> {
    if verbs.is_empty() {
        return Err(SituError::InvalidArgument("verb_loss: empty batch".into()));
    }
    let w = T::lit(1.0 / verbs.len() as f64);
    let rows = verbs
        .iter()
        .enumerate()
        .map(|(row, &v)| CeRow {
            row,
            targets: vec![v],
            weight: w,
        })
        .collect();
    tape.cross_entropy(logits, rows, AnnotatorReduction::Min)
}
