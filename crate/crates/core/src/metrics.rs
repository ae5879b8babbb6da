//! Confusion counts and overlap metrics for binary tool/background masks.
//!
//! Class 0 is background, class 1 is foreground (instrument). A class absent
//! from both masks (`TP + FP + FN = 0`) contributes 1 to the class means.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{arg_err, shape_err, Result};
use crate::kernels::Scalar;
use crate::tensor::Tensor;

/// Binary mask with values in `{0, 1}`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err("mask", format!("{} values for {height}x{width}", data.len())));
        }
        if let Some(bad) = data.iter().find(|v| **v > 1) {
            return Err(arg_err("mask", format!("mask values must be 0 or 1, found {bad}")));
        }
        Ok(Mask { height, width, data })
    }

    pub fn foreground(&self) -> usize {
        self.data.iter().filter(|v| **v == 1).count()
    }
}

/// Per-pixel argmax of a `1 x K x H x W` probability map; class 1 becomes
/// foreground. Ties resolve to the lowest class index (background).
pub fn argmax_mask<T: Scalar>(probs: &Tensor<T>) -> Result<Mask> {
    let s = probs.shape();
    if s.n != 1 || s.c < 2 {
        return Err(shape_err("argmax_mask", format!("expected 1xKxHxW with K >= 2, got {s}")));
    }
    let plane = s.plane();
    let d = probs.data();
    let data = (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..s.c {
                if d[c * plane + p] > d[best * plane + p] {
                    best = c;
                }
            }
            u8::from(best == 1)
        })
        .collect();
    Ok(Mask {
        height: s.h,
        width: s.w,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn iou(&self) -> f64 {
        let d = self.tp + self.fp + self.fn_;
        if d == 0 {
            1.0
        } else {
            self.tp as f64 / d as f64
        }
    }

    pub fn dsc(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / d as f64
        }
    }
}

/// Tallies for background (index 0) and foreground (index 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub classes: [ClassCounts; 2],
}

impl ConfusionCounts {
    pub fn background(&self) -> ClassCounts {
        self.classes[0]
    }

    pub fn foreground(&self) -> ClassCounts {
        self.classes[1]
    }

    pub fn pixels(&self) -> u64 {
        self.classes[1].total()
    }
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(shape_err(
            "confusion",
            format!("prediction {}x{} vs ground truth {}x{}", pred.height, pred.width, gt.height, gt.width),
        ));
    }
    let mut fg = ClassCounts::default();
    for (p, g) in pred.data.iter().zip(&gt.data) {
        match (*p == 1, *g == 1) {
            (true, true) => fg.tp += 1,
            (true, false) => fg.fp += 1,
            (false, true) => fg.fn_ += 1,
            (false, false) => fg.tn += 1,
        }
    }
    let bg = ClassCounts {
        tp: fg.tn,
        fp: fg.fn_,
        fn_: fg.fp,
        tn: fg.tp,
    };
    Ok(ConfusionCounts { classes: [bg, fg] })
}

/// Mean over classes of `TP / (TP + FP + FN)`.
pub fn mean_iou(c: &ConfusionCounts) -> f64 {
    c.classes.iter().map(ClassCounts::iou).sum::<f64>() / c.classes.len() as f64
}

/// Mean over classes of `2TP / (2TP + FP + FN)`.
pub fn mean_dsc(c: &ConfusionCounts) -> f64 {
    c.classes.iter().map(ClassCounts::dsc).sum::<f64>() / c.classes.len() as f64
}

/// Mean of foreground sensitivity and specificity; an empty denominator counts as 1.
pub fn balanced_accuracy_fg(c: &ConfusionCounts) -> f64 {
    let fg = c.foreground();
    let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    0.5 * (ratio(fg.tp, fg.tp + fg.fn_) + ratio(fg.tn, fg.tn + fg.fp))
}

/// Metrics of one frame, in report column order.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FrameMetrics {
    pub iou_fg: f64,
    pub iou_bg: f64,
    pub mean_iou: f64,
    pub dsc_fg: f64,
    pub dsc_bg: f64,
    pub mean_dsc: f64,
    pub balanced_accuracy: f64,
}

impl FrameMetrics {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        FrameMetrics {
            iou_fg: c.foreground().iou(),
            iou_bg: c.background().iou(),
            mean_iou: mean_iou(c),
            dsc_fg: c.foreground().dsc(),
            dsc_bg: c.background().dsc(),
            mean_dsc: mean_dsc(c),
            balanced_accuracy: balanced_accuracy_fg(c),
        }
    }

    pub fn as_array(&self) -> [f64; 7] {
        [
            self.iou_fg,
            self.iou_bg,
            self.mean_iou,
            self.dsc_fg,
            self.dsc_bg,
            self.mean_dsc,
            self.balanced_accuracy,
        ]
    }

    /// Column-wise mean over frames; `None` for an empty slice.
    pub fn mean(frames: &[FrameMetrics]) -> Option<FrameMetrics> {
        if frames.is_empty() {
            return None;
        }
        let mut acc = [0.0; 7];
        for f in frames {
            for (a, v) in acc.iter_mut().zip(f.as_array()) {
                *a += v;
            }
        }
        let n = frames.len() as f64;
        let [iou_fg, iou_bg, mean_iou, dsc_fg, dsc_bg, mean_dsc, balanced_accuracy] = acc.map(|v| v / n);
        Some(FrameMetrics {
            iou_fg,
            iou_bg,
            mean_iou,
            dsc_fg,
            dsc_bg,
            mean_dsc,
            balanced_accuracy,
        })
    }
}
