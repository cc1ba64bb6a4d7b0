//! Per-class IoU, common mIoU over known classes, private (unknown) IoU,
//! and their harmonic mean (H-Score). Evaluation runs full-channel argmax
//! inference and accumulates a confusion matrix; ignore pixels never count.

use crate::datamodel::{ClassSpace, Dataset, LabelMap, IGNORE_INDEX};
use crate::netcore::{forward, NetworkParams};
use crate::pseudolabel::closed_set_pseudo_label;
use crate::{Error, Result};

/// Square pixel-count matrix, rows = ground truth, cols = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    num_classes: usize,
}

impl ConfusionMatrix {
    /// Matrix over K known classes plus the unknown class.
    pub fn new(cs: &ClassSpace) -> Self {
        let n = cs.num_channels_expanded();
        ConfusionMatrix {
            counts: vec![0; n * n],
            num_classes: n,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn at(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tally one image pair. Ignore pixels in the ground truth are skipped;
    /// predictions must be total (no ignore).
    pub fn accumulate(&mut self, gt: &LabelMap, pred: &LabelMap) -> Result<()> {
        if gt.width != pred.width || gt.height != pred.height {
            return Err(Error::DimensionMismatch(format!(
                "ground truth is {}x{} but prediction is {}x{}",
                gt.width, gt.height, pred.width, pred.height
            )));
        }
        for (&g, &p) in gt.values.iter().zip(&pred.values) {
            if g == IGNORE_INDEX {
                continue;
            }
            if p == IGNORE_INDEX {
                return Err(Error::validation(
                    "prediction contains the ignore sentinel",
                ));
            }
            let (g, p) = (usize::from(g), usize::from(p));
            if g >= self.num_classes || p >= self.num_classes {
                return Err(Error::validation(format!(
                    "label {} outside the {}-class matrix",
                    g.max(p),
                    self.num_classes
                )));
            }
            self.counts[g * self.num_classes + p] += 1;
        }
        Ok(())
    }

    /// Merge another matrix; accumulation is associative and commutative.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        debug_assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Harmonic mean of the common and private scores; zero when either is zero.
pub fn h_score(common: f64, private: f64) -> f64 {
    if common + private > 0.0 {
        2.0 * common * private / (common + private)
    } else {
        0.0
    }
}

/// Evaluation summary. All values are fractions in [0,1]; the CLI renders
/// percentages.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// IoU per class index 0..=K; `None` when the class never appears in
    /// ground truth or prediction.
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean IoU over known classes with a defined IoU.
    pub common_miou: f64,
    /// IoU of the single unknown class (0 when undefined).
    pub private_iou: f64,
    pub h_score: f64,
    /// Known classes left out of the common mean for having no pixels.
    pub excluded_classes: Vec<u8>,
}

/// Per-class IoU = TP / (TP + FP + FN); undefined classes are excluded from
/// the common mean rather than counted as zero.
pub fn compute_report(cm: &ConfusionMatrix, cs: &ClassSpace) -> MetricsReport {
    let n = cm.num_classes();
    let mut per_class_iou = Vec::with_capacity(n);
    for c in 0..n {
        let tp = cm.at(c, c);
        let mut fp = 0;
        let mut fn_ = 0;
        for other in 0..n {
            if other != c {
                fp += cm.at(other, c);
                fn_ += cm.at(c, other);
            }
        }
        let denom = tp + fp + fn_;
        per_class_iou.push((denom > 0).then(|| tp as f64 / denom as f64));
    }

    let mut excluded_classes = Vec::new();
    let mut sum = 0.0;
    let mut counted = 0usize;
    for (c, iou) in per_class_iou.iter().take(cs.num_known).enumerate() {
        match iou {
            Some(iou) => {
                sum += iou;
                counted += 1;
            }
            None => excluded_classes.push(c as u8),
        }
    }
    let common_miou = if counted > 0 { sum / counted as f64 } else { 0.0 };
    let private_iou = per_class_iou[usize::from(cs.unknown_index())].unwrap_or(0.0);

    MetricsReport {
        per_class_iou,
        common_miou,
        private_iou,
        h_score: h_score(common_miou, private_iou),
        excluded_classes,
    }
}

/// Run full-channel argmax inference over a labeled validation set and
/// report IoU metrics. The model head must carry the unknown channel.
pub fn evaluate(model: &NetworkParams, val: &Dataset) -> Result<MetricsReport> {
    if val.is_empty() {
        return Err(Error::validation("validation set is empty"));
    }
    let cs = &val.class_space;
    if model.head_channels() != cs.num_channels_expanded() {
        return Err(Error::validation(format!(
            "model head has {} channels, evaluation needs {}",
            model.head_channels(),
            cs.num_channels_expanded()
        )));
    }
    let mut cm = ConfusionMatrix::new(cs);
    for item in &val.items {
        let probs = forward(model, item)?;
        let pred = closed_set_pseudo_label(&probs, cs)?;
        cm.accumulate(&item.label, &pred)?;
    }
    Ok(compute_report(&cm, cs))
}

/// Render a report as `class,iou` rows plus a summary block.
pub fn report_to_csv(report: &MetricsReport, cs: &ClassSpace) -> String {
    let mut out = String::from("class,iou_percent\n");
    for (c, iou) in report.per_class_iou.iter().enumerate() {
        let name = if c == usize::from(cs.unknown_index()) {
            "unknown".to_string()
        } else {
            format!("class_{c}")
        };
        match iou {
            Some(v) => out.push_str(&format!("{name},{:.2}\n", v * 100.0)),
            None => out.push_str(&format!("{name},\n")),
        }
    }
    out.push_str(&format!("common,{:.2}\n", report.common_miou * 100.0));
    out.push_str(&format!("private,{:.2}\n", report.private_iou * 100.0));
    out.push_str(&format!("h_score,{:.2}\n", report.h_score * 100.0));
    if !report.excluded_classes.is_empty() {
        let list = report
            .excluded_classes
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(";");
        out.push_str(&format!("excluded_from_common,{list}\n"));
    }
    out
}

/// Minimal SVG bar chart of per-class IoU plus the three summary scores.
pub fn report_to_svg(report: &MetricsReport, cs: &ClassSpace) -> String {
    let mut bars: Vec<(String, f64)> = Vec::new();
    for (c, iou) in report.per_class_iou.iter().enumerate() {
        let name = if c == usize::from(cs.unknown_index()) {
            "unknown".to_string()
        } else {
            format!("c{c}")
        };
        bars.push((name, iou.unwrap_or(0.0)));
    }
    bars.push(("common".into(), report.common_miou));
    bars.push(("private".into(), report.private_iou));
    bars.push(("h".into(), report.h_score));

    let bar_w = 40;
    let gap = 12;
    let chart_h = 160;
    let width = bars.len() * (bar_w + gap) + gap;
    let height = chart_h + 40;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\">\n"
    );
    for (i, (name, value)) in bars.iter().enumerate() {
        let h = (value * chart_h as f64).round() as usize;
        let x = gap + i * (bar_w + gap);
        let y = chart_h - h + 10;
        svg.push_str(&format!(
            "  <rect x=\"{x}\" y=\"{y}\" width=\"{bar_w}\" height=\"{h}\" fill=\"#4a78b0\"/>\n"
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{name}</text>\n",
            x + bar_w / 2,
            chart_h + 24
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-size=\"9\" text-anchor=\"middle\">{:.1}</text>\n",
            x + bar_w / 2,
            y.saturating_sub(2).max(8),
            value * 100.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
