//! Coordinate-level inspection metrics (count error/accuracy, localization
//! and overhang error), pixel segmentation scores and split aggregation.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::annotation::{is_sorted, Difficulty, EndpointAnnotation, Point, Polarity, StackAxis};
use crate::error::{Error, Result};
use crate::labels::BinaryMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How coordinate errors are scaled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizationMode {
    /// Errors divided by the image area `H * W`.
    Paper,
    /// Raw native-resolution pixels.
    #[default]
    Pixel,
    /// Pixels after a corner-aligned resize of both point sets to a fixed frame.
    Reference { width: u32, height: u32 },
}

impl NormalizationMode {
    fn frame(self, gt: &EndpointAnnotation) -> (f64, f64, f64) {
        match self {
            NormalizationMode::Paper => (1.0, 1.0, 1.0 / (gt.width as f64 * gt.height as f64)),
            NormalizationMode::Pixel => (1.0, 1.0, 1.0),
            NormalizationMode::Reference { width, height } => (
                crate::annotation::corner_scale(gt.width, width),
                crate::annotation::corner_scale(gt.height, height),
                1.0,
            ),
        }
    }
}

impl fmt::Display for NormalizationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormalizationMode::Paper => f.write_str("paper"),
            NormalizationMode::Pixel => f.write_str("pixel"),
            NormalizationMode::Reference { width, height } => write!(f, "pixel@{width}x{height}"),
        }
    }
}

/// Predicted and ground-truth point maps of one image, for pixel scores.
#[derive(Clone, Debug)]
pub struct PointMaps {
    /// Anode and cathode probability maps, `[H, W]` each.
    pub pred: [Tensor<f64>; 2],
    pub gt: [BinaryMask; 2],
}

/// Prediction for one image next to its ground truth.
#[derive(Clone, Debug)]
pub struct ImageResult {
    pub pred_anode: Vec<Point>,
    pub pred_cathode: Vec<Point>,
    pub gt: EndpointAnnotation,
    pub point_maps: Option<PointMaps>,
}

impl ImageResult {
    pub fn new(pred_anode: Vec<Point>, pred_cathode: Vec<Point>, gt: EndpointAnnotation) -> Self {
        ImageResult {
            pred_anode,
            pred_cathode,
            gt,
            point_maps: None,
        }
    }

    pub fn pred(&self, polarity: Polarity) -> &[Point] {
        match polarity {
            Polarity::Anode => &self.pred_anode,
            Polarity::Cathode => &self.pred_cathode,
        }
    }

    pub fn count_correct(&self, polarity: Polarity) -> bool {
        self.pred(polarity).len() == self.gt.points(polarity).len()
    }

    pub fn pair_correct(&self) -> bool {
        self.count_correct(Polarity::Anode) && self.count_correct(Polarity::Cathode)
    }

    fn count_pair(&self, polarity: Polarity) -> (usize, usize) {
        (self.pred(polarity).len(), self.gt.points(polarity).len())
    }
}

/// Mean of `|pred - gt|` over `(pred, gt)` count pairs.
pub fn count_mae(pairs: &[(usize, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("count pairs"));
    }
    let total: f64 = pairs.iter().map(|&(p, g)| p.abs_diff(g) as f64).sum();
    Ok(total / pairs.len() as f64)
}

/// Fraction of exact count matches.
pub fn count_acc(pairs: &[(usize, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("count pairs"));
    }
    let hits = pairs.iter().filter(|&&(p, g)| p == g).count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Fraction of images whose anode and cathode counts are both exact.
pub fn pair_acc(results: &[ImageResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().filter(|r| r.pair_correct()).count() as f64 / results.len() as f64
}

fn check_sorted(pts: &[Point], axis: StackAxis, what: &str, id: &str) -> Result<()> {
    if is_sorted(pts, axis) {
        Ok(())
    } else {
        Err(Error::Unsorted(format!("{what} of `{id}`")))
    }
}

/// Mean Euclidean endpoint error over images whose `polarity` count is exact;
/// points are paired by index after sorting. `None` when no image qualifies.
pub fn localization_mae(results: &[ImageResult], polarity: Polarity, mode: NormalizationMode) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut qualifying = 0usize;
    for r in results {
        if !r.count_correct(polarity) {
            continue;
        }
        let (pred, gt) = (r.pred(polarity), r.gt.points(polarity));
        let axis = r.gt.stack_axis;
        check_sorted(pred, axis, "prediction", &r.gt.image_id)?;
        check_sorted(gt, axis, "ground truth", &r.gt.image_id)?;
        qualifying += 1;
        if gt.is_empty() {
            continue;
        }
        let (sx, sy, norm) = mode.frame(&r.gt);
        let sum: f64 = pred
            .iter()
            .zip(gt)
            .map(|(p, g)| ((p.x - g.x) * sx).hypot((p.y - g.y) * sy))
            .sum();
        total += norm * sum / gt.len() as f64;
    }
    Ok((qualifying > 0).then(|| total / qualifying as f64))
}

/// Overhang of each cathode `j`: `|c_j - a_j| + |c_j - a_{j+1}|` on the
/// plate-length axis (perpendicular to the stack axis).
pub fn overhangs(anode: &[Point], cathode: &[Point], axis: StackAxis, scale: f64) -> Option<Vec<f64>> {
    if anode.len() != cathode.len() + 1 {
        return None;
    }
    Some(
        cathode
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let cv = axis.across(*c) * scale;
                (cv - axis.across(anode[j]) * scale).abs() + (cv - axis.across(anode[j + 1]) * scale).abs()
            })
            .collect(),
    )
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OverhangOutcome {
    pub value: Option<f64>,
    pub qualifying: usize,
    /// Images with exact counts that violate `n_anode = n_cathode + 1`.
    pub excluded: Vec<String>,
}

/// Mean absolute overhang error over images with both counts exact.
pub fn overhang_mae(results: &[ImageResult], mode: NormalizationMode) -> Result<OverhangOutcome> {
    let mut out = OverhangOutcome::default();
    let mut total = 0.0;
    for r in results {
        if !r.pair_correct() {
            continue;
        }
        let axis = r.gt.stack_axis;
        for pol in Polarity::BOTH {
            check_sorted(r.pred(pol), axis, "prediction", &r.gt.image_id)?;
            check_sorted(r.gt.points(pol), axis, "ground truth", &r.gt.image_id)?;
        }
        let (sx, sy, norm) = mode.frame(&r.gt);
        let scale = match axis {
            StackAxis::X => sy,
            StackAxis::Y => sx,
        };
        let (Some(pred), Some(gt)) = (
            overhangs(&r.pred_anode, &r.pred_cathode, axis, scale),
            overhangs(&r.gt.anode_points, &r.gt.cathode_points, axis, scale),
        ) else {
            log::warn!("{}: anode count is not cathode count + 1, excluded from OH-MAE", r.gt.image_id);
            out.excluded.push(r.gt.image_id.clone());
            continue;
        };
        let sum: f64 = pred.iter().zip(&gt).map(|(o, g)| (o - g).abs()).sum();
        total += norm * sum / gt.len() as f64;
        out.qualifying += 1;
    }
    out.value = (out.qualifying > 0).then(|| total / out.qualifying as f64);
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub pa: f64,
    pub miou: f64,
    pub mdice: f64,
    pub ber: f64,
    pub mae: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegFlags {
    /// No foreground in prediction or ground truth; foreground skipped.
    pub empty_foreground: bool,
    /// No background in prediction or ground truth; background skipped.
    pub empty_background: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

pub fn confusion<T: Scalar>(pred: &Tensor<T>, gt: &BinaryMask) -> Result<Confusion> {
    if pred.len() != gt.data().len() {
        return Err(Error::shape(&[gt.height(), gt.width()], pred.shape()));
    }
    let half = T::lit(0.5);
    let mut c = Confusion::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p >= half, g != 0) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn mean_of(vals: &[Option<f64>]) -> f64 {
    let xs: Vec<f64> = vals.iter().flatten().copied().collect();
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// PA, class-averaged IoU and Dice (threshold 0.5), balanced error rate and
/// mean absolute error of a probability map against a binary mask.
pub fn seg_metrics<T: Scalar>(pred: &Tensor<T>, gt: &BinaryMask) -> Result<(SegMetrics, SegFlags)> {
    let c = confusion(pred, gt)?;
    let n = (c.tp + c.tn + c.fp + c.fn_) as f64;
    if n == 0.0 {
        return Err(Error::EmptyInput("segmentation map"));
    }
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    let fg_union = c.tp + c.fp + c.fn_;
    let bg_union = c.tn + c.fp + c.fn_;
    let flags = SegFlags {
        empty_foreground: fg_union == 0,
        empty_background: bg_union == 0,
    };
    let iou = [ratio(c.tp, fg_union), ratio(c.tn, bg_union)];
    let dice = [ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_), ratio(2 * c.tn, 2 * c.tn + c.fp + c.fn_)];
    let rates = [ratio(c.tp, c.tp + c.fn_), ratio(c.tn, c.tn + c.fp)];
    let mae = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (p.to_f64_lossy() - g as f64).abs())
        .sum::<f64>()
        / n;
    Ok((
        SegMetrics {
            pa: (c.tp + c.tn) as f64 / n,
            miou: mean_of(&iou),
            mdice: mean_of(&dice),
            ber: 1.0 - mean_of(&rates),
            mae,
        },
        flags,
    ))
}

/// Scores for one split (or the average of splits).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub an_mae: f64,
    pub cn_mae: f64,
    pub an_acc: f64,
    pub cn_acc: f64,
    pub pn_acc: f64,
    pub al_mae: Option<f64>,
    pub cl_mae: Option<f64>,
    pub oh_mae: Option<f64>,
    /// Images evaluated.
    pub n: usize,
    /// Images with both counts exact.
    pub n_p: usize,
    pub seg: Option<SegMetrics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded: Vec<String>,
}

impl MetricReport {
    pub fn evaluate(results: &[ImageResult], mode: NormalizationMode) -> Result<Self> {
        let an: Vec<_> = results.iter().map(|r| r.count_pair(Polarity::Anode)).collect();
        let cn: Vec<_> = results.iter().map(|r| r.count_pair(Polarity::Cathode)).collect();
        let oh = overhang_mae(results, mode)?;
        let seg = if results.iter().all(|r| r.point_maps.is_some()) && !results.is_empty() {
            let mut per = Vec::new();
            for r in results {
                let maps = r.point_maps.as_ref().unwrap();
                for k in 0..2 {
                    per.push(seg_metrics(&maps.pred[k], &maps.gt[k])?.0);
                }
            }
            Some(mean_seg(&per))
        } else {
            None
        };
        Ok(MetricReport {
            an_mae: count_mae(&an)?,
            cn_mae: count_mae(&cn)?,
            an_acc: count_acc(&an)?,
            cn_acc: count_acc(&cn)?,
            pn_acc: pair_acc(results),
            al_mae: localization_mae(results, Polarity::Anode, mode)?,
            cl_mae: localization_mae(results, Polarity::Cathode, mode)?,
            oh_mae: oh.value,
            n: results.len(),
            n_p: results.iter().filter(|r| r.pair_correct()).count(),
            seg,
            excluded: oh.excluded,
        })
    }

    /// `(name, value, higher_is_better)` for the eight coordinate metrics.
    pub fn rows(&self) -> [(&'static str, Option<f64>, bool); 8] {
        [
            ("AN-MAE", Some(self.an_mae), false),
            ("CN-MAE", Some(self.cn_mae), false),
            ("AN-ACC", Some(self.an_acc), true),
            ("CN-ACC", Some(self.cn_acc), true),
            ("PN-ACC", Some(self.pn_acc), true),
            ("AL-MAE", self.al_mae, false),
            ("CL-MAE", self.cl_mae, false),
            ("OH-MAE", self.oh_mae, false),
        ]
    }
}

fn mean_seg(items: &[SegMetrics]) -> SegMetrics {
    let n = items.len() as f64;
    let sum = |f: fn(&SegMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
    SegMetrics {
        pa: sum(|s| s.pa),
        miou: sum(|s| s.miou),
        mdice: sum(|s| s.mdice),
        ber: sum(|s| s.ber),
        mae: sum(|s| s.mae),
    }
}

/// How the average row combines splits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitWeighting {
    #[default]
    Unweighted,
    /// Weighted by the number of images per split.
    ByImages,
}

/// Combines the regular/difficult/tough reports metric by metric. An
/// undefined entry in any split makes the combined entry undefined.
pub fn aggregate_splits(reports: &BTreeMap<Difficulty, MetricReport>, weighting: SplitWeighting) -> Result<MetricReport> {
    let mut parts = Vec::with_capacity(3);
    for d in Difficulty::ALL {
        parts.push(reports.get(&d).ok_or_else(|| Error::MissingSplit(d.name().into()))?);
    }
    let weights: Vec<f64> = match weighting {
        SplitWeighting::Unweighted => vec![1.0 / 3.0; 3],
        SplitWeighting::ByImages => {
            let total: usize = parts.iter().map(|r| r.n).sum();
            if total == 0 {
                return Err(Error::EmptyInput("split reports"));
            }
            parts.iter().map(|r| r.n as f64 / total as f64).collect()
        }
    };
    let avg = |f: &dyn Fn(&MetricReport) -> f64| -> f64 {
        match weighting {
            SplitWeighting::Unweighted => parts.iter().map(|r| f(r)).sum::<f64>() / 3.0,
            SplitWeighting::ByImages => parts.iter().zip(&weights).map(|(r, w)| w * f(r)).sum(),
        }
    };
    let avg_opt = |f: &dyn Fn(&MetricReport) -> Option<f64>| -> Option<f64> {
        let vals: Option<Vec<f64>> = parts.iter().map(|r| f(r)).collect();
        let vals = vals?;
        Some(match weighting {
            SplitWeighting::Unweighted => vals.iter().sum::<f64>() / 3.0,
            SplitWeighting::ByImages => vals.iter().zip(&weights).map(|(v, w)| v * w).sum(),
        })
    };
    let seg = avg_opt(&|r| r.seg.map(|s| s.pa)).map(|pa| SegMetrics {
        pa,
        miou: avg(&|r| r.seg.unwrap().miou),
        mdice: avg(&|r| r.seg.unwrap().mdice),
        ber: avg(&|r| r.seg.unwrap().ber),
        mae: avg(&|r| r.seg.unwrap().mae),
    });
    Ok(MetricReport {
        an_mae: avg(&|r| r.an_mae),
        cn_mae: avg(&|r| r.cn_mae),
        an_acc: avg(&|r| r.an_acc),
        cn_acc: avg(&|r| r.cn_acc),
        pn_acc: avg(&|r| r.pn_acc),
        al_mae: avg_opt(&|r| r.al_mae),
        cl_mae: avg_opt(&|r| r.cl_mae),
        oh_mae: avg_opt(&|r| r.oh_mae),
        n: parts.iter().map(|r| r.n).sum(),
        n_p: parts.iter().map(|r| r.n_p).sum(),
        seg,
        excluded: parts.iter().flat_map(|r| r.excluded.iter().cloned()).collect(),
    })
}

pub fn format_value(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "—".to_string(),
    }
}

/// Metric rows by split columns, undefined entries shown as a dash.
pub fn format_table(columns: &[(String, MetricReport)]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<10}", "Metric");
    for (name, _) in columns {
        let _ = write!(out, "{name:>12}");
    }
    out.push('\n');
    for row in 0..8 {
        let (label, _, up) = columns.first().map(|c| c.1.rows()[row]).unwrap_or(("", None, true));
        let _ = write!(out, "{:<10}", format!("{label}{}", if up { "↑" } else { "↓" }));
        for (_, r) in columns {
            let _ = write!(out, "{:>12}", format_value(r.rows()[row].1));
        }
        out.push('\n');
    }
    if columns.iter().all(|(_, r)| r.seg.is_some()) && !columns.is_empty() {
        for (label, f) in [
            ("PA↑", (|s: &SegMetrics| s.pa) as fn(&SegMetrics) -> f64),
            ("mIoU↑", |s| s.miou),
            ("mDice↑", |s| s.mdice),
            ("BER↓", |s| s.ber),
            ("MAE↓", |s| s.mae),
        ] {
            let _ = write!(out, "{label:<10}");
            for (_, r) in columns {
                let _ = write!(out, "{:>12}", format_value(r.seg.as_ref().map(f)));
            }
            out.push('\n');
        }
    }
    let _ = write!(out, "{:<10}", "N / Np");
    for (_, r) in columns {
        let _ = write!(out, "{:>12}", format!("{}/{}", r.n, r.n_p));
    }
    out.push('\n');
    out
}
