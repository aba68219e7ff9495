//! Multi-label evaluation: per-label precision/recall/F1/accuracy with
//! confusion counts, ROC curves (per label, micro- and macro-averaged) with
//! trapezoidal AUC, the slide-level tumor-to-stroma ratio, averaging across
//! repeated split rounds, and CSV/SVG exports of the curves.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{INTERSTITIAL, LABEL_NAMES, TUMOR};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Binary confusion counts for one label. For every label the four counts sum
/// to the number of evaluated tiles.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Scalar metrics for one label. Metrics with a zero denominator are reported
/// as 0 with `zero_denominator` set, so averaging over rounds stays total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub zero_denominator: bool,
}

/// A receiver-operating-characteristic curve: `(fpr, tpr)` points from (0,0)
/// to (1,1), nondecreasing in both coordinates, with its trapezoidal area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Everything measured on one evaluation set. Vectors are indexed in the
/// canonical label order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub labels: Vec<String>,
    pub counts: Vec<ConfusionCounts>,
    pub metrics: Vec<LabelMetrics>,
    /// Fraction of tiles whose full 4-bit prediction matches the truth.
    pub subset_accuracy: f64,
    /// Per-label curves; `None` where the truth was single-class.
    pub per_label_roc: Vec<Option<RocCurve>>,
    pub micro_roc: Option<RocCurve>,
    pub macro_roc: Option<RocCurve>,
    pub tumor_stroma_ratio: Option<f64>,
    pub warnings: Vec<String>,
}

/// Turn `[N, 4]` logits into per-row sigmoid scores.
pub fn sigmoid_scores<E: Element>(logits: &Tensor<E>) -> Result<Vec<[f64; 4]>> {
    let s = logits.shape();
    if s.len() != 2 || s[1] != 4 {
        return Err(Error::shape("sigmoid_scores", format!("need [N, 4] logits, got {s:?}")));
    }
    let v = logits.to_f64_vec();
    Ok(v
        .chunks_exact(4)
        .map(|row| {
            std::array::from_fn(|i| {
                let z = row[i];
                if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (1.0 + e)
                }
            })
        })
        .collect())
}

/// Threshold sigmoid scores into per-label decisions with the inclusive
/// `score ≥ threshold` rule. Scores must lie in `[0, 1]`.
pub fn binarize(scores: &[[f64; 4]], threshold: f64) -> Result<Vec<[bool; 4]>> {
    for row in scores {
        for &s in row {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Data(format!("score {s} outside [0, 1]")));
            }
        }
    }
    Ok(scores
        .iter()
        .map(|row| std::array::from_fn(|i| row[i] >= threshold))
        .collect())
}

/// Confusion counts, per-label binary metrics and subset accuracy.
pub fn per_label_metrics(
    pred: &[[bool; 4]],
    truth: &[[bool; 4]],
) -> Result<(Vec<ConfusionCounts>, Vec<LabelMetrics>, f64)> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Data(format!(
            "prediction/truth size mismatch or empty: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len();
    let mut counts = vec![ConfusionCounts::default(); 4];
    let mut exact = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        if p == t {
            exact += 1;
        }
        for l in 0..4 {
            match (p[l], t[l]) {
                (true, true) => counts[l].tp += 1,
                (true, false) => counts[l].fp += 1,
                (false, true) => counts[l].fn_ += 1,
                (false, false) => counts[l].tn += 1,
            }
        }
    }
    let metrics = counts
        .iter()
        .map(|c| {
            let mut flagged = false;
            let mut ratio = |num: usize, den: usize| {
                if den == 0 {
                    flagged = true;
                    0.0
                } else {
                    num as f64 / den as f64
                }
            };
            let precision = ratio(c.tp, c.tp + c.fp);
            let recall = ratio(c.tp, c.tp + c.fn_);
            let f1 = if precision + recall == 0.0 {
                flagged = true;
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            let accuracy = (c.tp + c.tn) as f64 / n as f64;
            LabelMetrics { precision, recall, f1, accuracy, zero_denominator: flagged }
        })
        .collect();
    Ok((counts, metrics, exact as f64 / n as f64))
}

/// ROC by sweeping a decision threshold across every distinct score; tied
/// scores advance the curve in one combined step. Errors when the truth is
/// single-class, where the curve is undefined.
pub fn roc_curve(scores: &[f64], truth: &[bool]) -> Result<RocCurve> {
    if scores.len() != truth.len() || scores.is_empty() {
        return Err(Error::Data("score/truth size mismatch or empty".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Data("non-finite score".into()));
    }
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data(
            "undefined ROC: truth contains a single class".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    let mut points = Vec::with_capacity(scores.len() + 1);
    points.push((0.0, 0.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if truth[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    let auc = trapezoid(&points);
    Ok(RocCurve { points, auc })
}

fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// TPR of a curve at a given FPR: exact vertices use the topmost point of any
/// vertical jump, positions in between interpolate linearly.
fn interp_tpr(points: &[(f64, f64)], x: f64) -> f64 {
    let mut last_le = None;
    for (i, p) in points.iter().enumerate() {
        if p.0 <= x {
            last_le = Some(i);
        } else {
            break;
        }
    }
    let Some(i) = last_le else { return points[0].1 };
    if points[i].0 == x || i + 1 == points.len() {
        return points[i].1;
    }
    let (x0, y0) = points[i];
    let (x1, y1) = points[i + 1];
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// Micro- and macro-averaged ROC over the four labels. Micro pools all
/// `4·N` (score, truth) pairs into one curve; macro averages per-label TPR on
/// the union of their FPR breakpoints. Labels with single-class truth are
/// skipped by the macro average, with a warning naming them.
pub fn micro_macro_roc(
    scores: &[[f64; 4]],
    truth: &[[bool; 4]],
) -> Result<(RocCurve, Option<RocCurve>, Vec<String>)> {
    if scores.len() != truth.len() || scores.is_empty() {
        return Err(Error::Data("score/truth size mismatch or empty".into()));
    }
    let pooled_scores: Vec<f64> = scores.iter().flatten().copied().collect();
    let pooled_truth: Vec<bool> = truth.iter().flatten().copied().collect();
    let micro = roc_curve(&pooled_scores, &pooled_truth)?;

    let mut warnings = Vec::new();
    let mut curves = Vec::new();
    for l in 0..4 {
        let s: Vec<f64> = scores.iter().map(|r| r[l]).collect();
        let t: Vec<bool> = truth.iter().map(|r| r[l]).collect();
        match roc_curve(&s, &t) {
            Ok(c) => curves.push(c),
            Err(_) => warnings.push(format!(
                "label {} excluded from macro average: single-class truth",
                LABEL_NAMES[l]
            )),
        }
    }
    let macro_curve = if curves.is_empty() {
        None
    } else {
        Some(vertical_mean_on_union_grid(&curves.iter().collect::<Vec<_>>()))
    };
    Ok((micro, macro_curve, warnings))
}

/// How many consecutive points of a sorted curve sit at each grid value.
fn vertex_counts(points: &[(f64, f64)], xs: &[f64]) -> Vec<usize> {
    let mut out = Vec::with_capacity(xs.len());
    let mut j = 0;
    for &x in xs {
        while j < points.len() && points[j].0 < x {
            j += 1;
        }
        let start = j;
        while j < points.len() && points[j].0 == x {
            j += 1;
        }
        out.push(j - start);
    }
    out
}

/// Resample one curve onto the union grid. Grid values that are vertices of
/// the curve replay its own ascending TPRs (repeating the top when the grid
/// asks for more); values in between take the linear interpolation. The
/// resampled polyline retraces the original, so its trapezoid area is the
/// curve's own AUC.
fn sample_on_grid(points: &[(f64, f64)], xs: &[f64], mult: &[usize]) -> Vec<f64> {
    let mut out = Vec::new();
    let mut j = 0;
    for (&x, &m) in xs.iter().zip(mult) {
        while j < points.len() && points[j].0 < x {
            j += 1;
        }
        let start = j;
        while j < points.len() && points[j].0 == x {
            j += 1;
        }
        if start == j {
            let v = if start == 0 {
                points[0].1
            } else if start == points.len() {
                points[points.len() - 1].1
            } else {
                let (x0, y0) = points[start - 1];
                let (x1, y1) = points[start];
                y0 + (y1 - y0) * (x - x0) / (x1 - x0)
            };
            out.extend(std::iter::repeat(v).take(m));
        } else {
            for r in 0..m {
                out.push(points[(start + r).min(j - 1)].1);
            }
        }
    }
    out
}

/// Mean TPR across curves on the union of their FPR breakpoints. The grid
/// keeps each value with the largest vertex multiplicity any curve has there,
/// so vertical jumps survive averaging; identical inputs reproduce themselves
/// and the macro AUC is the mean of the member AUCs.
fn vertical_mean_on_union_grid(curves: &[&RocCurve]) -> RocCurve {
    let mut xs: Vec<f64> = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.0))
        .collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let counts: Vec<Vec<usize>> =
        curves.iter().map(|c| vertex_counts(&c.points, &xs)).collect();
    let mult: Vec<usize> = (0..xs.len())
        .map(|i| counts.iter().map(|c| c[i]).max().unwrap_or(0).max(1))
        .collect();
    let samples: Vec<Vec<f64>> =
        curves.iter().map(|c| sample_on_grid(&c.points, &xs, &mult)).collect();
    let mut points = Vec::with_capacity(mult.iter().sum());
    let mut k = 0;
    for (i, &x) in xs.iter().enumerate() {
        for _ in 0..mult[i] {
            let mean =
                samples.iter().map(|s| s[k]).sum::<f64>() / samples.len() as f64;
            points.push((x, mean));
            k += 1;
        }
    }
    let auc = trapezoid(&points);
    RocCurve { points, auc }
}

/// Tumor-to-stroma ratio over one slide's predicted tiles: the fraction of
/// stroma (interstitial-positive) tiles among stroma + tumor tiles.
/// Dual-labeled tiles count on both sides. `inverse` reports the tumor
/// fraction instead.
pub fn tumor_stroma_ratio(pred: &[[bool; 4]], inverse: bool) -> Result<f64> {
    let stroma = pred.iter().filter(|p| p[INTERSTITIAL]).count();
    let tumor = pred.iter().filter(|p| p[TUMOR]).count();
    if stroma + tumor == 0 {
        return Err(Error::Data(
            "tumor-to-stroma ratio undefined: no stroma and no tumor tiles".into(),
        ));
    }
    let num = if inverse { tumor } else { stroma };
    Ok(num as f64 / (stroma + tumor) as f64)
}

/// Run the full evaluation: threshold the scores, compute per-label metrics
/// and all ROC variants, and optionally the tumor-to-stroma ratio.
pub fn evaluate(
    scores: &[[f64; 4]],
    truth: &[[bool; 4]],
    threshold: f64,
    with_tsr: bool,
) -> Result<EvalReport> {
    let pred = binarize(scores, threshold)?;
    let (counts, metrics, subset_accuracy) = per_label_metrics(&pred, truth)?;
    let mut warnings = Vec::new();

    let mut per_label_roc = Vec::with_capacity(4);
    for l in 0..4 {
        let s: Vec<f64> = scores.iter().map(|r| r[l]).collect();
        let t: Vec<bool> = truth.iter().map(|r| r[l]).collect();
        per_label_roc.push(roc_curve(&s, &t).ok());
    }
    let (micro_roc, macro_roc, mut roc_warnings) = match micro_macro_roc(scores, truth) {
        Ok((micro, macro_c, w)) => (Some(micro), macro_c, w),
        Err(e) => {
            warnings.push(format!("micro ROC unavailable: {e}"));
            (None, None, Vec::new())
        }
    };
    warnings.append(&mut roc_warnings);
    if metrics.iter().any(|m| m.zero_denominator) {
        warnings.push("some metrics had zero denominators and were reported as 0".into());
    }

    let tumor_stroma = if with_tsr {
        match tumor_stroma_ratio(&pred, false) {
            Ok(r) => Some(r),
            Err(e) => {
                warnings.push(e.to_string());
                None
            }
        }
    } else {
        None
    };

    Ok(EvalReport {
        labels: LABEL_NAMES.iter().map(|s| s.to_string()).collect(),
        counts,
        metrics,
        subset_accuracy,
        per_label_roc,
        micro_roc,
        macro_roc,
        tumor_stroma_ratio: tumor_stroma,
        warnings,
    })
}

/// Mean report over rounds plus per-metric population standard deviations,
/// keyed like `tumor.precision` or `micro_auc`. Confusion counts are summed;
/// curves are vertically averaged on a fixed 1001-point FPR grid.
pub struct AggregateReport {
    pub mean: EvalReport,
    pub std: BTreeMap<String, f64>,
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Vertically average curves from several rounds on the fixed grid.
fn average_curves(curves: &[&RocCurve]) -> RocCurve {
    let points: Vec<(f64, f64)> = (0..=1000)
        .map(|i| {
            let x = i as f64 / 1000.0;
            let mean = curves.iter().map(|c| interp_tpr(&c.points, x)).sum::<f64>()
                / curves.len() as f64;
            (x, mean)
        })
        .collect();
    let auc = trapezoid(&points);
    RocCurve { points, auc }
}

pub fn aggregate_rounds(reports: &[EvalReport]) -> Result<AggregateReport> {
    let Some(first) = reports.first() else {
        return Err(Error::Data("no reports to aggregate".into()));
    };
    if reports.iter().any(|r| r.labels != first.labels) {
        return Err(Error::Data("reports disagree on the label set".into()));
    }
    let n = reports.len();
    let mut std = BTreeMap::new();

    let mut counts = vec![ConfusionCounts::default(); 4];
    let mut metrics = vec![LabelMetrics::default(); 4];
    for l in 0..4 {
        for r in reports {
            counts[l].tp += r.counts[l].tp;
            counts[l].fp += r.counts[l].fp;
            counts[l].fn_ += r.counts[l].fn_;
            counts[l].tn += r.counts[l].tn;
        }
        let name = &first.labels[l];
        let mut field = |key: &str, get: &dyn Fn(&LabelMetrics) -> f64| -> f64 {
            let vals: Vec<f64> = reports.iter().map(|r| get(&r.metrics[l])).collect();
            let (m, s) = mean_and_std(&vals);
            std.insert(format!("{name}.{key}"), s);
            m
        };
        metrics[l] = LabelMetrics {
            precision: field("precision", &|m| m.precision),
            recall: field("recall", &|m| m.recall),
            f1: field("f1", &|m| m.f1),
            accuracy: field("accuracy", &|m| m.accuracy),
            zero_denominator: reports.iter().any(|r| r.metrics[l].zero_denominator),
        };
        let aucs: Vec<f64> = reports
            .iter()
            .filter_map(|r| r.per_label_roc[l].as_ref().map(|c| c.auc))
            .collect();
        if aucs.len() == n {
            std.insert(format!("{name}.auc"), mean_and_std(&aucs).1);
        }
    }

    let subsets: Vec<f64> = reports.iter().map(|r| r.subset_accuracy).collect();
    let (subset_mean, subset_std) = mean_and_std(&subsets);
    std.insert("subset_accuracy".into(), subset_std);

    let mut average_optional = |key: &str, curves: Vec<Option<&RocCurve>>| -> Option<RocCurve> {
        let present: Vec<&RocCurve> = curves.into_iter().flatten().collect();
        if present.len() != n {
            return None;
        }
        let aucs: Vec<f64> = present.iter().map(|c| c.auc).collect();
        std.insert(format!("{key}_auc"), mean_and_std(&aucs).1);
        Some(average_curves(&present))
    };
    let micro = average_optional("micro", reports.iter().map(|r| r.micro_roc.as_ref()).collect());
    let macro_c = average_optional("macro", reports.iter().map(|r| r.macro_roc.as_ref()).collect());
    let per_label_roc = (0..4)
        .map(|l| {
            average_optional(
                &first.labels[l].clone(),
                reports.iter().map(|r| r.per_label_roc[l].as_ref()).collect(),
            )
        })
        .collect();

    let tsrs: Vec<f64> = reports.iter().filter_map(|r| r.tumor_stroma_ratio).collect();
    let tsr = if tsrs.len() == n {
        let (m, s) = mean_and_std(&tsrs);
        std.insert("tumor_stroma_ratio".into(), s);
        Some(m)
    } else {
        None
    };

    Ok(AggregateReport {
        mean: EvalReport {
            labels: first.labels.clone(),
            counts,
            metrics,
            subset_accuracy: subset_mean,
            per_label_roc,
            micro_roc: micro,
            macro_roc: macro_c,
            tumor_stroma_ratio: tsr,
            warnings: Vec::new(),
        },
        std,
    })
}

/// `fpr,tpr` rows for one curve.
pub fn roc_csv(curve: &RocCurve) -> String {
    let mut out = String::from("fpr,tpr\n");
    for (x, y) in &curve.points {
        out.push_str(&format!("{x},{y}\n"));
    }
    out
}

const CURVE_COLORS: [(&str, &str); 6] = [
    ("interstitial_area", "#1f77b4"),
    ("necrosis", "#ff7f0e"),
    ("non_tumor", "#2ca02c"),
    ("tumor", "#d62728"),
    ("micro", "#9467bd"),
    ("macro", "#8c564b"),
];

/// Self-contained SVG with the four per-label curves, the micro and macro
/// averages, and the chance diagonal. Byte-deterministic for a given report.
pub fn roc_svg(report: &EvalReport) -> String {
    const W: f64 = 640.0;
    const H: f64 = 480.0;
    const L: f64 = 60.0;
    const T: f64 = 20.0;
    const PW: f64 = 400.0;
    const PH: f64 = 400.0;
    let px = |x: f64| L + x * PW;
    let py = |y: f64| T + (1.0 - y) * PH;

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    s.push_str(&format!(
        "<rect x=\"{L}\" y=\"{T}\" width=\"{PW}\" height=\"{PH}\" fill=\"white\" stroke=\"black\"/>\n"
    ));
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.1}</text>\n",
            px(f),
            T + PH + 16.0,
            f
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{:.1}</text>\n",
            L - 6.0,
            py(f) + 4.0,
            f
        ));
        s.push_str(&format!(
            "<line x1=\"{0:.1}\" y1=\"{1:.1}\" x2=\"{0:.1}\" y2=\"{2:.1}\" stroke=\"#dddddd\"/>\n",
            px(f),
            py(0.0),
            py(1.0)
        ));
        s.push_str(&format!(
            "<line x1=\"{1:.1}\" y1=\"{0:.1}\" x2=\"{2:.1}\" y2=\"{0:.1}\" stroke=\"#dddddd\"/>\n",
            py(f),
            px(0.0),
            px(1.0)
        ));
    }
    s.push_str(&format!(
        "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"gray\" stroke-dasharray=\"6,4\"/>\n",
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">False positive rate</text>\n",
        px(0.5),
        T + PH + 38.0
    ));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">True positive rate</text>\n",
        py(0.5),
        py(0.5)
    ));

    let mut legend_y = T + 14.0;
    let curve_for = |name: &str| -> Option<&RocCurve> {
        match name {
            "micro" => report.micro_roc.as_ref(),
            "macro" => report.macro_roc.as_ref(),
            _ => report
                .labels
                .iter()
                .position(|l| l == name)
                .and_then(|i| report.per_label_roc[i].as_ref()),
        }
    };
    for (name, color) in CURVE_COLORS {
        let Some(curve) = curve_for(name) else { continue };
        let pts: Vec<String> = curve
            .points
            .iter()
            .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
            .collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            color,
            pts.join(" ")
        ));
        let lx = L + PW + 16.0;
        s.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"{}\" stroke-width=\"3\"/>\n",
            lx,
            legend_y - 4.0,
            lx + 22.0,
            legend_y - 4.0,
            color
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\">{} (AUC {:.4})</text>\n",
            lx + 28.0,
            legend_y,
            name,
            curve.auc
        ));
        legend_y += 18.0;
    }
    s.push_str("</svg>\n");
    s
}
