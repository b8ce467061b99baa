//! Confusion statistics, ROC curve and AUC with glaucoma as the positive class.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Label;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no scores given")]
    Empty,
    #[error("AUC needs both classes, got only {0:?}")]
    SingleClass(Label),
    #[error("score {0} is not finite")]
    NonFinite(f64),
}

fn check(scores: &[(f64, Label)]) -> Result<(), MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    match scores.iter().find(|(s, _)| !s.is_finite()) {
        Some(&(s, _)) => Err(MetricsError::NonFinite(s)),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// Sensitivity and whether its denominator was zero (then 1.0).
    pub fn sensitivity(&self) -> (f64, bool) {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Specificity and whether its denominator was zero (then 1.0).
    pub fn specificity(&self) -> (f64, bool) {
        ratio(self.tn, self.tn + self.fp)
    }
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (1.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Predicted positive iff `score >= threshold`.
pub fn confusion(scores: &[(f64, Label)], threshold: f64) -> Result<Confusion, MetricsError> {
    check(scores)?;
    let mut c = Confusion::default();
    for &(s, label) in scores {
        match (s >= threshold, label) {
            (true, Label::Glaucoma) => c.tp += 1,
            (true, Label::Normal) => c.fp += 1,
            (false, Label::Glaucoma) => c.fn_ += 1,
            (false, Label::Normal) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Distinct scores in descending order with (positives, negatives) at each.
fn score_groups(scores: &[(f64, Label)]) -> Result<(Vec<(usize, usize)>, usize, usize), MetricsError> {
    check(scores)?;
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut last = None;
    for (s, label) in sorted {
        if last != Some(s) {
            groups.push((0, 0));
            last = Some(s);
        }
        let g = groups.last_mut().expect("pushed above");
        match label {
            Label::Glaucoma => g.0 += 1,
            Label::Normal => g.1 += 1,
        }
    }
    let pos: usize = groups.iter().map(|g| g.0).sum();
    let neg: usize = groups.iter().map(|g| g.1).sum();
    if pos == 0 {
        return Err(MetricsError::SingleClass(Label::Normal));
    }
    if neg == 0 {
        return Err(MetricsError::SingleClass(Label::Glaucoma));
    }
    Ok((groups, pos, neg))
}

/// Mann-Whitney statistic: correctly ordered positive/negative pairs plus
/// half the tied pairs, over all pairs.
pub fn auc(scores: &[(f64, Label)]) -> Result<f64, MetricsError> {
    let (groups, pos, neg) = score_groups(scores)?;
    // Twice the pair count keeps the half-ties integral.
    let mut twice: u128 = 0;
    let mut neg_below = neg as u128;
    for &(p, n) in &groups {
        neg_below -= n as u128;
        twice += 2 * p as u128 * neg_below + p as u128 * n as u128;
    }
    Ok(twice as f64 / (2.0 * pos as f64 * neg as f64))
}

/// (fpr, tpr) after lowering the threshold past each distinct score, from
/// (0, 0) to (1, 1).
pub fn roc_curve(scores: &[(f64, Label)]) -> Result<Vec<(f64, f64)>, MetricsError> {
    let (groups, pos, neg) = score_groups(scores)?;
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0, 0);
    for (p, n) in groups {
        tp += p;
        fp += n;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub model: String,
    pub train_dataset: String,
    pub test_dataset: String,
    pub seed: u64,
}

/// `auc` and `roc` are absent when the test set holds a single class;
/// `degenerate` is set whenever a statistic had a zero denominator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub auc: Option<f64>,
    pub roc: Vec<(f64, f64)>,
    pub provenance: Provenance,
    pub degenerate: bool,
}

impl MetricsReport {
    pub fn from_scores(scores: &[(f64, Label)], threshold: f64, provenance: Provenance) -> Result<Self, MetricsError> {
        let c = confusion(scores, threshold)?;
        let (sen, sen_deg) = c.sensitivity();
        let (spe, spe_deg) = c.specificity();
        let (auc, roc) = match (auc(scores), roc_curve(scores)) {
            (Ok(a), Ok(r)) => (Some(a), r),
            (Err(MetricsError::SingleClass(_)), _) => (None, Vec::new()),
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        Ok(Self {
            tp: c.tp,
            tn: c.tn,
            fp: c.fp,
            fn_: c.fn_,
            acc: c.accuracy(),
            sen,
            spe,
            degenerate: sen_deg || spe_deg || auc.is_none(),
            auc,
            roc,
            provenance,
        })
    }

    pub fn confusion(&self) -> Confusion {
        Confusion {
            tp: self.tp,
            tn: self.tn,
            fp: self.fp,
            fn_: self.fn_,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain data")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.to_json() + "\n")
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// Standalone SVG of a ROC curve.
pub fn roc_svg(points: &[(f64, f64)], auc: Option<f64>) -> String {
    const SIZE: f64 = 320.0;
    const PAD: f64 = 40.0;
    let sx = |x: f64| PAD + x * SIZE;
    let sy = |y: f64| PAD + (1.0 - y) * SIZE;
    let total = SIZE + 2.0 * PAD;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}" font-family="sans-serif" font-size="12">"##
    );
    let _ = writeln!(svg, r##"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="#888"/>"##);
    let _ = writeln!(
        svg,
        r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#bbb" stroke-dasharray="4 4"/>"##,
        sx(0.0),
        sy(0.0),
        sx(1.0),
        sy(1.0)
    );
    let path: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
    let _ = writeln!(svg, r##"<polyline points="{}" fill="none" stroke="#c0392b" stroke-width="2"/>"##, path.join(" "));
    let _ = writeln!(svg, r##"<text x="{}" y="{}" text-anchor="middle">false positive rate</text>"##, sx(0.5), total - 10.0);
    let _ = writeln!(
        svg,
        r##"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">true positive rate</text>"##,
        sy(0.5),
        sy(0.5)
    );
    if let Some(a) = auc {
        let _ = writeln!(svg, r##"<text x="{}" y="{}">AUC = {a:.4}</text>"##, sx(0.55), sy(0.08));
    }
    svg.push_str("</svg>\n");
    svg
}
