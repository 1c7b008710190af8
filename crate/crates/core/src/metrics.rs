//! Verb accuracy and (grounded) value / value-all scoring.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{BBox, Frame, Vocab};
use crate::error::{Result, SituError};

/// Box overlap needed for a grounded role to count.
pub const IOU_THRESHOLD: f64 = 0.5;

/// Intersection over union of two `(cx, cy, w, h)` boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    for x in [a, b] {
        if x.w < 0.0 || x.h < 0.0 {
            return Err(SituError::InvalidArgument(format!(
                "box has negative extent: {:?}",
                x
            )));
        }
    }
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let area_a = (ax1 - ax0) * (ay1 - ay0);
    let area_b = (bx1 - bx0) * (by1 - by0);
    let union = area_a + area_b - inter;
    Ok(if union <= 0.0 { 0.0 } else { (inter / union).clamp(0.0, 1.0) })
}

pub fn role_correct(pred: usize, annotators: &[usize]) -> bool {
    annotators.contains(&pred)
}

/// Model output for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    /// Verbs by decreasing score; may be empty when only nouns were predicted.
    #[serde(default)]
    pub verb_ranking: Vec<usize>,
    /// Verb whose frame the role predictions below belong to.
    pub conditioning_verb: usize,
    pub nouns: Vec<usize>,
    #[serde(default)]
    pub boxes: Vec<Option<BBox>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Gt,
    Top1,
    Top5,
}

impl Setting {
    pub const ALL: [Setting; 3] = [Setting::Gt, Setting::Top1, Setting::Top5];

    pub fn name(self) -> &'static str {
        match self {
            Setting::Gt => "gt",
            Setting::Top1 => "top1",
            Setting::Top5 => "top5",
        }
    }

    fn depth(self) -> Option<usize> {
        match self {
            Setting::Gt => None,
            Setting::Top1 => Some(1),
            Setting::Top5 => Some(5),
        }
    }
}

impl std::str::FromStr for Setting {
    type Err = SituError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt" => Ok(Setting::Gt),
            "top1" => Ok(Setting::Top1),
            "top5" => Ok(Setting::Top5),
            other => Err(SituError::Config(format!("unknown setting {:?}", other))),
        }
    }
}

/// How role correctness turns into a frame's value score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueMode {
    /// 1 if at least one role is correct.
    #[default]
    AnyRole,
    /// Fraction of roles correct.
    PerRole,
}

impl std::str::FromStr for ValueMode {
    type Err = SituError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "any_role" => Ok(ValueMode::AnyRole),
            "per_role" => Ok(ValueMode::PerRole),
            other => Err(SituError::Config(format!("unknown value mode {:?}", other))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean over frames.
    #[default]
    Micro,
    /// Mean over verbs of the per-verb frame means.
    PerVerbMacro,
}

impl std::str::FromStr for Aggregation {
    type Err = SituError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(Aggregation::Micro),
            "per_verb_macro" => Ok(Aggregation::PerVerbMacro),
            other => Err(SituError::Config(format!("unknown aggregation {:?}", other))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub setting: Setting,
    pub value_mode: ValueMode,
    pub aggregation: Aggregation,
    pub frames: usize,
    /// Frames with at least one grounded role; the grounded metrics average
    /// over these only.
    pub grounded_frames: usize,
    /// `None` when the predictions carry no verb ranking.
    pub verb_top1: Option<f64>,
    pub verb_top5: Option<f64>,
    pub value: f64,
    pub value_all: f64,
    pub grnd_value: f64,
    pub grnd_value_all: f64,
}

impl MetricsReport {
    /// Verb accuracy matching the setting (`None` for gt).
    pub fn verb(&self) -> Option<f64> {
        match self.setting {
            Setting::Gt => None,
            Setting::Top1 => self.verb_top1,
            Setting::Top5 => self.verb_top5,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct FrameScore {
    top1: f64,
    top5: f64,
    value: f64,
    value_all: f64,
    grnd: Option<(f64, f64)>,
}

fn score_frame(
    frame: &Frame,
    pred: &Prediction,
    setting: Setting,
    mode: ValueMode,
    vocab: Option<&Vocab>,
) -> Result<FrameScore> {
    let ranking = &pred.verb_ranking;
    let top1 = ranking.first() == Some(&frame.verb);
    let top5 = ranking.iter().take(5).any(|&v| v == frame.verb);
    let credited = match setting.depth() {
        None => true,
        Some(1) => top1,
        Some(_) => top5,
    };
    let grounded: Vec<usize> = (0..frame.num_roles())
        .filter(|&i| frame.boxes[i].is_some())
        .collect();
    let mut s = FrameScore {
        top1: top1 as u8 as f64,
        top5: top5 as u8 as f64,
        grnd: (!grounded.is_empty()).then_some((0.0, 0.0)),
        ..FrameScore::default()
    };
    if let Some(v) = vocab {
        if pred.conditioning_verb >= v.n_verbs() {
            return Err(SituError::frame(&frame.image_id, "conditioning verb out of range"));
        }
        if pred.nouns.len() != v.frame(pred.conditioning_verb).len() {
            return Err(SituError::frame(
                &frame.image_id,
                "noun count differs from the conditioning verb's frame",
            ));
        }
    }
    if !credited {
        return Ok(s);
    }
    if pred.conditioning_verb != frame.verb {
        return Err(SituError::frame(
            &frame.image_id,
            format!(
                "roles were predicted for verb {} but the frame's verb is {}",
                pred.conditioning_verb, frame.verb
            ),
        ));
    }
    let m = frame.num_roles();
    if pred.nouns.len() != m {
        return Err(SituError::frame(
            &frame.image_id,
            format!("{} predicted nouns for {} roles", pred.nouns.len(), m),
        ));
    }
    if !pred.boxes.is_empty() && pred.boxes.len() != m {
        return Err(SituError::frame(
            &frame.image_id,
            format!("{} predicted boxes for {} roles", pred.boxes.len(), m),
        ));
    }
    let correct: Vec<bool> = (0..m)
        .map(|i| role_correct(pred.nouns[i], &frame.role_annotations[i]))
        .collect();
    let n_correct = correct.iter().filter(|&&c| c).count();
    s.value = match mode {
        ValueMode::AnyRole => (n_correct > 0) as u8 as f64,
        ValueMode::PerRole => n_correct as f64 / m as f64,
    };
    s.value_all = (n_correct == m) as u8 as f64;
    if !grounded.is_empty() {
        let mut hits = 0usize;
        for &i in &grounded {
            let gt = frame.boxes[i].expect("grounded");
            let ok = match pred.boxes.get(i).copied().flatten() {
                Some(b) => correct[i] && iou(&b, &gt)? >= IOU_THRESHOLD,
                None => false,
            };
            hits += ok as usize;
        }
        let gv = match mode {
            ValueMode::AnyRole => (hits > 0) as u8 as f64,
            ValueMode::PerRole => hits as f64 / grounded.len() as f64,
        };
        s.grnd = Some((gv, (hits == grounded.len()) as u8 as f64));
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    n: usize,
    ng: usize,
    top1: f64,
    top5: f64,
    value: f64,
    value_all: f64,
    grnd_value: f64,
    grnd_value_all: f64,
}

impl Sums {
    fn add(&mut self, s: &FrameScore) {
        self.n += 1;
        self.top1 += s.top1;
        self.top5 += s.top5;
        self.value += s.value;
        self.value_all += s.value_all;
        if let Some((a, b)) = s.grnd {
            self.ng += 1;
            self.grnd_value += a;
            self.grnd_value_all += b;
        }
    }

    fn means(&self) -> [f64; 6] {
        let d = |x: f64, n: usize| if n == 0 { 0.0 } else { x / n as f64 };
        [
            d(self.top1, self.n),
            d(self.top5, self.n),
            d(self.value, self.n),
            d(self.value_all, self.n),
            d(self.grnd_value, self.ng),
            d(self.grnd_value_all, self.ng),
        ]
    }
}

/// Scores predictions (matched by image id) against annotated frames.
/// `vocab`, when given, is used to check each prediction's role count
/// against its conditioning verb's frame.
pub fn evaluate(
    preds: &[Prediction],
    frames: &[Frame],
    setting: Setting,
    value_mode: ValueMode,
    aggregation: Aggregation,
    vocab: Option<&Vocab>,
) -> Result<MetricsReport> {
    let mut by_id: HashMap<&str, &Prediction> = HashMap::with_capacity(preds.len());
    for p in preds {
        if by_id.insert(p.image_id.as_str(), p).is_some() {
            return Err(SituError::frame(&p.image_id, "duplicate prediction"));
        }
    }
    let has_ranking = preds.iter().all(|p| !p.verb_ranking.is_empty()) && !preds.is_empty();
    if setting != Setting::Gt && !has_ranking {
        return Err(SituError::InvalidArgument(format!(
            "setting {} needs verb rankings in every prediction",
            setting.name()
        )));
    }
    let mut total = Sums::default();
    let mut per_verb: BTreeMap<usize, Sums> = BTreeMap::new();
    for f in frames {
        let p = by_id
            .get(f.image_id.as_str())
            .ok_or_else(|| SituError::frame(&f.image_id, "missing prediction"))?;
        let s = score_frame(f, p, setting, value_mode, vocab)?;
        total.add(&s);
        per_verb.entry(f.verb).or_default().add(&s);
    }
    let [top1, top5, value, value_all, grnd_value, grnd_value_all] = match aggregation {
        Aggregation::Micro => total.means(),
        Aggregation::PerVerbMacro => {
            let mut acc = [0.0; 6];
            let nv = per_verb.len();
            let ngv = per_verb.values().filter(|s| s.ng > 0).count();
            for s in per_verb.values() {
                let m = s.means();
                for (a, v) in acc.iter_mut().zip(m) {
                    *a += v;
                }
            }
            let d = |x: f64, n: usize| if n == 0 { 0.0 } else { x / n as f64 };
            [
                d(acc[0], nv),
                d(acc[1], nv),
                d(acc[2], nv),
                d(acc[3], nv),
                d(acc[4], ngv),
                d(acc[5], ngv),
            ]
        }
    };
    Ok(MetricsReport {
        setting,
        value_mode,
        aggregation,
        frames: total.n,
        grounded_frames: total.ng,
        verb_top1: has_ranking.then_some(top1),
        verb_top5: has_ranking.then_some(top5),
        value,
        value_all,
        grnd_value,
        grnd_value_all,
    })
}

/// Aligned text table, one row per report, values in percent.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let header = ["setting", "verb", "value", "value-all", "grnd value", "grnd value-all"];
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    let rows: Vec<[String; 6]> = reports
        .iter()
        .map(|r| {
            [
                r.setting.name().to_string(),
                r.verb().map_or_else(|| "-".to_string(), pct),
                pct(r.value),
                pct(r.value_all),
                pct(r.grnd_value),
                pct(r.grnd_value_all),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{:<w$}", c) } else { format!("{:>w$}", c) })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, &header);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    let _ = writeln!(out, "{}", rule.join("  "));
    for r in &rows {
        let cells: Vec<&str> = r.iter().map(String::as_str).collect();
        line(&mut out, &cells);
    }
    out
}
