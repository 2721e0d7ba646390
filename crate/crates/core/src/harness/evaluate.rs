//! Prediction and per-split evaluation.

use std::collections::{BTreeMap, HashMap};

use image::GrayImage;
use serde::{Deserialize, Serialize};

use super::train::{network_input, Sample};
use crate::annotation::{corner_scale, sort_points, Difficulty, EndpointAnnotation, Point, Polarity, StackAxis};
use crate::error::{Error, Result};
use crate::labels::{extract_points, generate_point_mask, RadiusPolicy};
use crate::metrics::{aggregate_splits, format_table, ImageResult, MetricReport, NormalizationMode, PointMaps, SplitWeighting};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub mode: NormalizationMode,
    pub weighting: SplitWeighting,
    pub threshold: f64,
    /// Score the refined map (otherwise the coarse map).
    pub use_refined: bool,
    /// Mask policy for pixel scores; `None` skips them.
    #[serde(with = "optional_policy")]
    pub seg_policy: Option<RadiusPolicy>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            mode: NormalizationMode::Pixel,
            weighting: SplitWeighting::Unweighted,
            threshold: 0.5,
            use_refined: true,
            seg_policy: Some(RadiusPolicy::default()),
        }
    }
}

mod optional_policy {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::labels::RadiusPolicy;

    pub fn serialize<S: Serializer>(p: &Option<RadiusPolicy>, s: S) -> Result<S::Ok, S::Error> {
        match p {
            Some(p) => s.collect_str(p),
            None => s.serialize_str("none"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<RadiusPolicy>, D::Error> {
        let text = String::deserialize(d)?;
        if text == "none" {
            Ok(None)
        } else {
            text.parse().map(Some).map_err(serde::de::Error::custom)
        }
    }
}

/// Endpoints predicted for one image, in native pixel coordinates.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub anode: Vec<Point>,
    pub cathode: Vec<Point>,
    /// Scored `[2, S, S]` probability map at network resolution.
    pub map: Tensor<f32>,
    pub counts: [f32; 2],
}

/// Runs the network on an image. Only the pixels and the stack axis are
/// used, never an annotation.
pub fn predict_image(model: &Model<f32>, prompt: &Tensor<f32>, image: &GrayImage, axis: StackAxis, settings: &EvalSettings) -> Result<Prediction> {
    let size = model.config().input_size;
    let x = network_input(image, size);
    let out = model.predict(prompt, &x)?;
    let map = if settings.use_refined { out.refined_points } else { out.coarse_points };
    let sx = corner_scale(size as u32, image.width());
    let sy = corner_scale(size as u32, image.height());
    let mut pts: [Vec<Point>; 2] = Default::default();
    for pol in Polarity::BOTH {
        let mut p = extract_points(&map.channel(pol.channel()), settings.threshold, axis)?;
        for q in p.iter_mut() {
            *q = Point::new(q.x * sx, q.y * sy);
        }
        sort_points(&mut p, axis);
        pts[pol.channel()] = p;
    }
    let [anode, cathode] = pts;
    Ok(Prediction {
        anode,
        cathode,
        map,
        counts: out.counts,
    })
}

/// Metric reports per difficulty split plus the average row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub mode: NormalizationMode,
    pub per_split: BTreeMap<Difficulty, MetricReport>,
    pub overall: MetricReport,
    pub average: Option<MetricReport>,
    pub flags: Vec<String>,
}

#[derive(Serialize)]
struct Record<'a> {
    split: &'a str,
    mode: String,
    #[serde(flatten)]
    report: &'a MetricReport,
}

fn title(d: Difficulty) -> String {
    let n = d.name();
    n[..1].to_uppercase() + &n[1..]
}

impl EvaluationReport {
    pub fn columns(&self) -> Vec<(String, MetricReport)> {
        let mut cols: Vec<(String, MetricReport)> = self.per_split.iter().map(|(d, r)| (title(*d), r.clone())).collect();
        if let Some(a) = &self.average {
            cols.push(("Average".into(), a.clone()));
        }
        cols.push(("All".into(), self.overall.clone()));
        cols
    }

    pub fn table(&self) -> String {
        let mut s = format!("mode: {}\n", self.mode);
        s.push_str(&format_table(&self.columns()));
        for f in &self.flags {
            s.push_str(&format!("note: {f}\n"));
        }
        s
    }

    /// One JSON object per column.
    pub fn records(&self) -> String {
        let mut out = String::new();
        for (name, r) in self.columns() {
            let rec = Record {
                split: &name.to_lowercase(),
                mode: self.mode.to_string(),
                report: &r,
            };
            out.push_str(&serde_json::to_string(&rec).expect("report serializes"));
            out.push('\n');
        }
        out
    }
}

/// Scores predictions against ground truth matched by `image_id`. Missing
/// predictions count as empty; missing splits are flagged and suppress the
/// average row.
pub fn evaluate_predictions(
    preds: &[EndpointAnnotation],
    gts: &[EndpointAnnotation],
    maps: Option<&HashMap<String, PointMaps>>,
    settings: &EvalSettings,
) -> Result<EvaluationReport> {
    if gts.is_empty() {
        return Err(Error::EmptyInput("ground-truth manifest"));
    }
    let by_id: HashMap<&str, &EndpointAnnotation> = preds.iter().map(|p| (p.image_id.as_str(), p)).collect();
    let mut flags = Vec::new();
    let mut groups: BTreeMap<Difficulty, Vec<ImageResult>> = BTreeMap::new();
    let mut all = Vec::with_capacity(gts.len());
    for gt in gts {
        let mut r = match by_id.get(gt.image_id.as_str()) {
            Some(p) => ImageResult::new(p.anode_points.clone(), p.cathode_points.clone(), gt.clone()),
            None => {
                flags.push(format!("no prediction for `{}`", gt.image_id));
                ImageResult::new(Vec::new(), Vec::new(), gt.clone())
            }
        };
        r.point_maps = maps.and_then(|m| m.get(&gt.image_id)).cloned();
        groups.entry(gt.difficulty).or_default().push(r.clone());
        all.push(r);
    }
    let mut per_split = BTreeMap::new();
    for (d, results) in &groups {
        per_split.insert(*d, MetricReport::evaluate(results, settings.mode)?);
    }
    for d in Difficulty::ALL {
        if !per_split.contains_key(&d) {
            flags.push(format!("missing split `{}`", d.name()));
        }
    }
    let average = if per_split.len() == Difficulty::ALL.len() {
        Some(aggregate_splits(&per_split, settings.weighting)?)
    } else {
        None
    };
    Ok(EvaluationReport {
        mode: settings.mode,
        overall: MetricReport::evaluate(&all, settings.mode)?,
        per_split,
        average,
        flags,
    })
}

/// Predicts every sample and scores the predictions. Returns the report and
/// the predictions as manifest records.
pub fn evaluate_model(
    model: &Model<f32>,
    prompt: &Tensor<f32>,
    samples: &[Sample],
    settings: &EvalSettings,
) -> Result<(EvaluationReport, Vec<EndpointAnnotation>)> {
    let size = model.config().input_size as u32;
    let mut preds = Vec::with_capacity(samples.len());
    let mut maps = HashMap::new();
    for s in samples {
        let p = predict_image(model, prompt, &s.image, s.annotation.stack_axis, settings)?;
        if let Some(policy) = settings.seg_policy {
            let gt = s.annotation.rescaled(size, size);
            let pred: [Tensor<f64>; 2] = [0, 1].map(|k| p.map.channel(k).cast());
            let masks = [
                generate_point_mask(&gt, policy, Polarity::Anode)?.mask,
                generate_point_mask(&gt, policy, Polarity::Cathode)?.mask,
            ];
            maps.insert(s.annotation.image_id.clone(), PointMaps { pred, gt: masks });
        }
        preds.push(EndpointAnnotation {
            anode_points: p.anode,
            cathode_points: p.cathode,
            ..s.annotation.clone()
        });
    }
    let gts: Vec<EndpointAnnotation> = samples.iter().map(|s| s.annotation.clone()).collect();
    let report = evaluate_predictions(&preds, &gts, settings.seg_policy.map(|_| &maps), settings)?;
    Ok((report, preds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{Clarity, Shot};

    fn gt(id: &str, d: Difficulty) -> EndpointAnnotation {
        EndpointAnnotation {
            image_id: id.into(),
            width: 50,
            height: 40,
            anode_points: vec![Point::new(5.0, 5.0), Point::new(25.0, 6.0)],
            cathode_points: vec![Point::new(15.0, 9.0)],
            shot: Shot::MS,
            clarity: Clarity::Clear,
            attributes: Default::default(),
            difficulty: d,
            stack_axis: StackAxis::X,
        }
    }

    #[test]
    fn oracle_predictions_score_perfectly() {
        let gts: Vec<_> = Difficulty::ALL.iter().enumerate().map(|(i, &d)| gt(&format!("g{i}"), d)).collect();
        let rep = evaluate_predictions(&gts, &gts, None, &EvalSettings::default()).unwrap();
        let avg = rep.average.unwrap();
        assert_eq!(avg.pn_acc, 1.0);
        assert_eq!(avg.oh_mae, Some(0.0));
        assert!(rep.flags.is_empty());
    }

    #[test]
    fn empty_predictions_give_dashes() {
        let gts = vec![gt("a", Difficulty::Regular)];
        let preds = vec![EndpointAnnotation {
            anode_points: vec![],
            cathode_points: vec![],
            ..gts[0].clone()
        }];
        let rep = evaluate_predictions(&preds, &gts, None, &EvalSettings::default()).unwrap();
        let r = &rep.per_split[&Difficulty::Regular];
        assert_eq!((r.an_acc, r.cn_acc), (0.0, 0.0));
        assert_eq!((r.al_mae, r.cl_mae, r.oh_mae), (None, None, None));
        assert!(rep.average.is_none());
        assert_eq!(rep.flags.len(), 2);
        assert!(rep.table().contains('—'));
        assert_eq!(rep.records().lines().count(), 2);
    }
}
