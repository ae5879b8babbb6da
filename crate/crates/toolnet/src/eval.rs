//! Per-frame evaluation report.

use std::fmt::Write as _;

use rayon::prelude::*;
use toolnet_core::metrics::{confusion, FrameMetrics};

use crate::data::{Manifest, Split};
use crate::infer::Predictor;
use crate::Result;

pub const COLUMNS: [&str; 8] = ["frame", "iou_fg", "iou_bg", "mean_iou", "dsc_fg", "dsc_bg", "mean_dsc", "balanced_acc"];

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub frames: Vec<(String, FrameMetrics)>,
    /// Frames that could not be read, with the reason.
    pub skipped: Vec<(String, String)>,
    /// Mean of the per-frame values; `None` when no frame was evaluated.
    pub mean: Option<FrameMetrics>,
}

impl Report {
    pub fn from_frames(frames: Vec<(String, FrameMetrics)>, skipped: Vec<(String, String)>) -> Self {
        let values: Vec<FrameMetrics> = frames.iter().map(|f| f.1).collect();
        Report {
            mean: FrameMetrics::mean(&values),
            frames,
            skipped,
        }
    }

    /// Tab-separated table, one row per frame then a `mean` row.
    pub fn to_table(&self) -> String {
        let mut out = COLUMNS.join("\t");
        out.push('\n');
        let row = |out: &mut String, id: &str, m: &FrameMetrics| {
            out.push_str(id);
            for v in m.as_array() {
                let _ = write!(out, "\t{v:.6}");
            }
            out.push('\n');
        };
        for (id, m) in &self.frames {
            row(&mut out, id, m);
        }
        if let Some(m) = &self.mean {
            row(&mut out, "mean", m);
        }
        out
    }
}

/// Evaluates every frame of `split`. Frames that fail to load or run are
/// skipped and listed in the report.
pub fn evaluate(predictor: &Predictor, manifest: &Manifest, split: Split) -> Result<Report> {
    let entries: Vec<_> = manifest.split(split).collect();
    let results: Vec<(String, std::result::Result<FrameMetrics, String>)> = entries
        .par_iter()
        .map(|e| {
            let r = (|| -> Result<FrameMetrics> {
                let s = manifest.load_sample(e)?;
                let pred = predictor.predict_mask(&s.image)?;
                let gt = s.mask.to_mask()?;
                Ok(FrameMetrics::from_counts(&confusion(&pred, &gt)?))
            })();
            (e.id.clone(), r.map_err(|err| err.to_string()))
        })
        .collect();
    let mut frames = Vec::new();
    let mut skipped = Vec::new();
    for (id, r) in results {
        match r {
            Ok(m) => frames.push((id, m)),
            Err(reason) => skipped.push((id, reason)),
        }
    }
    Ok(Report::from_frames(frames, skipped))
}
