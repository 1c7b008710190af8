use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::Config;
use super::trainer::{Dataset, Trainer};
use crate::error::{Result, SituError};
use crate::heads::ModelKind;

pub const ABLATION_HEADS: [usize; 4] = [1, 2, 4, 8];
pub const ABLATION_LAYERS: [usize; 4] = [1, 2, 4, 6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub heads: usize,
    pub layers: usize,
    pub params: usize,
    pub final_loss: f64,
    pub value: f64,
    pub value_all: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub model: ModelKind,
    pub heads: Vec<usize>,
    pub layers: Vec<usize>,
    pub cells: Vec<SweepCell>,
}

/// Trains one in-memory model per `(heads, layers)` pair and records its
/// gt-verb value metrics on the selection frames.
pub fn sweep(base: &Config, data: &Dataset, heads: &[usize], layers: &[usize]) -> Result<SweepReport> {
    if !matches!(base.model, ModelKind::Tf | ModelKind::Xtf) {
        return Err(SituError::Config("the heads x layers sweep needs model tf or xtf".into()));
    }
    let mut cells = Vec::with_capacity(heads.len() * layers.len());
    for &h in heads {
        for &l in layers {
            let mut cfg = base.clone();
            cfg.heads = Some(h);
            cfg.layers = Some(l);
            cfg.paths.checkpoint = None;
            let mut t: Trainer<'_, f32> = Trainer::new(&cfg, data)
                .map_err(|e| e.context(format!("sweep cell heads={} layers={}", h, l)))?;
            let summary = t.train(&mut std::io::sink())?;
            let (_, report) = t.selection()?;
            let report = report.expect("noun model");
            cells.push(SweepCell {
                heads: h,
                layers: l,
                params: t.model.param_count(),
                final_loss: summary.epochs.last().map_or(f64::NAN, |e| e.loss),
                value: report.value,
                value_all: report.value_all,
            });
        }
    }
    Ok(SweepReport {
        model: base.model,
        heads: heads.to_vec(),
        layers: layers.to_vec(),
        cells,
    })
}

impl SweepReport {
    pub fn cell(&self, heads: usize, layers: usize) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.heads == heads && c.layers == layers)
    }

    /// Heads down, layers across; each entry is `value / value-all` in percent.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} value / value-all", self.model.name());
        let cols: Vec<String> = self.layers.iter().map(|l| format!("l={}", l)).collect();
        let body: Vec<Vec<String>> = self
            .heads
            .iter()
            .map(|&h| {
                self.layers
                    .iter()
                    .map(|&l| match self.cell(h, l) {
                        Some(c) => format!("{:.2} / {:.2}", 100.0 * c.value, 100.0 * c.value_all),
                        None => "-".into(),
                    })
                    .collect()
            })
            .collect();
        let w = body
            .iter()
            .flatten()
            .chain(&cols)
            .map(String::len)
            .max()
            .unwrap_or(0);
        let _ = writeln!(
            out,
            "{:<5}{}",
            "",
            cols.iter().map(|c| format!("  {:>w$}", c)).collect::<String>()
        );
        for (h, row) in self.heads.iter().zip(&body) {
            let _ = writeln!(
                out,
                "{:<5}{}",
                format!("h={}", h),
                row.iter().map(|c| format!("  {:>w$}", c)).collect::<String>()
            );
        }
        out
    }
}
