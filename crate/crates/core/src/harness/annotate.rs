//! Annotation utilities: near-duplicate removal, uncertainty routing and
//! multi-annotator fusion.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::annotation::{sort_points, EndpointAnnotation, Point, Polarity};
use crate::error::{Error, Result};
use crate::imaging::resize_to_tensor;
use crate::model::Model;
use crate::tensor::Tensor;

/// Maps an image to a fixed-length feature vector.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, image: &GrayImage) -> Result<Vec<f64>>;
}

/// Downsampled intensities, mean-centred. `32 x 16` gives 512 values.
#[derive(Clone, Copy, Debug)]
pub struct ThumbnailEmbedder {
    pub width: usize,
    pub height: usize,
}

impl Default for ThumbnailEmbedder {
    fn default() -> Self {
        ThumbnailEmbedder { width: 32, height: 16 }
    }
}

impl Embedder for ThumbnailEmbedder {
    fn dim(&self) -> usize {
        self.width * self.height
    }

    fn embed(&self, image: &GrayImage) -> Result<Vec<f64>> {
        let t: Tensor<f64> = resize_to_tensor(image, self.width, self.height);
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        Ok(t.data().iter().map(|v| v - mean).collect())
    }
}

/// Global average pool over the deepest encoder level.
pub struct EncoderEmbedder<'a> {
    pub model: &'a Model<f32>,
}

impl Embedder for EncoderEmbedder<'_> {
    fn dim(&self) -> usize {
        self.model.config().encoder.widths[4]
    }

    fn embed(&self, image: &GrayImage) -> Result<Vec<f64>> {
        let s = self.model.config().input_size;
        self.model.embed(&resize_to_tensor(image, s, s))
    }
}

/// Connected components of the "closer than threshold" graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DedupResult {
    /// Member indices per cluster, ascending; clusters ordered by first member.
    pub clusters: Vec<Vec<usize>>,
    /// Index of the smallest id in each cluster.
    pub representatives: Vec<usize>,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Groups images whose features lie within `threshold` of each other,
/// transitively. `ids` picks the representative of each group.
pub fn dedup(ids: &[String], features: &[Vec<f64>], threshold: f64) -> Result<DedupResult> {
    if ids.len() != features.len() {
        return Err(Error::shape(&[ids.len()], &[features.len()]));
    }
    if let Some(first) = features.first() {
        for f in features {
            if f.len() != first.len() {
                return Err(Error::shape(&[first.len()], &[f.len()]));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("feature vector"));
            }
        }
    }
    Ok(cluster(ids, threshold, |i, j| euclidean(&features[i], &features[j])))
}

/// [`dedup`] over a precomputed symmetric `n x n` distance matrix.
pub fn dedup_distances(ids: &[String], distances: &[Vec<f64>], threshold: f64) -> Result<DedupResult> {
    let n = ids.len();
    if distances.len() != n || distances.iter().any(|r| r.len() != n) {
        return Err(Error::shape(&[n, n], &[distances.len(), distances.first().map_or(0, Vec::len)]));
    }
    Ok(cluster(ids, threshold, |i, j| distances[i][j].min(distances[j][i])))
}

fn cluster(ids: &[String], threshold: f64, dist: impl Fn(usize, usize) -> f64) -> DedupResult {
    let n = ids.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if dist(i, j) < threshold {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let clusters: Vec<Vec<usize>> = groups.into_values().collect();
    let representatives = clusters
        .iter()
        .map(|c| *c.iter().min_by(|&&a, &&b| ids[a].cmp(&ids[b]).then(a.cmp(&b))).expect("non-empty"))
        .collect();
    DedupResult { clusters, representatives }
}

/// Spread of a probability map, `max - min`. Low spread marks a sample the
/// model is unsure about.
pub fn uncertainty(map: &[f64]) -> Result<f64> {
    if map.is_empty() {
        return Err(Error::EmptyInput("prediction map"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in map {
        if !v.is_finite() {
            return Err(Error::NonFinite("prediction map"));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok(hi - lo)
}

/// Splits indices into `(uncertain, confident)`; a spread above `tau` goes
/// back to joint review.
pub fn route_by_uncertainty(scores: &[f64], tau: f64) -> (Vec<usize>, Vec<usize>) {
    (0..scores.len()).partition(|&i| scores[i] > tau)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountRule {
    /// Every annotator must report the same counts.
    #[default]
    Unanimous,
    /// A strict majority with identical counts is fused; the rest are dropped.
    Majority,
}

/// Expert annotations of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationBundle {
    pub image_id: String,
    pub annotations: Vec<EndpointAnnotation>,
    #[serde(default)]
    pub flags: Vec<String>,
    #[serde(default)]
    pub fused: Option<EndpointAnnotation>,
}

impl AnnotationBundle {
    pub fn new(annotations: Vec<EndpointAnnotation>) -> Result<Self> {
        let first = annotations.first().ok_or(Error::EmptyInput("annotation bundle"))?;
        let image_id = first.image_id.clone();
        if let Some(a) = annotations.iter().find(|a| a.image_id != image_id) {
            return Err(Error::InvalidAnnotation {
                image_id: a.image_id.clone(),
                reason: format!("bundled with `{image_id}`"),
            });
        }
        Ok(AnnotationBundle {
            image_id,
            annotations,
            flags: Vec::new(),
            fused: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteRequest {
    pub image_id: String,
    pub candidates: Vec<EndpointAnnotation>,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "lowercase")]
pub enum FuseOutcome {
    Fused(EndpointAnnotation),
    Vote(VoteRequest),
    Single { annotation: EndpointAnnotation, flag: String },
}

fn counts(a: &EndpointAnnotation) -> (usize, usize) {
    (a.anode_points.len(), a.cathode_points.len())
}

fn sorted_points(a: &EndpointAnnotation, pol: Polarity) -> Vec<Point> {
    let mut p = a.points(pol).to_vec();
    sort_points(&mut p, a.stack_axis);
    p
}

/// Order-free tie-break between annotations.
fn canonical_key(a: &EndpointAnnotation) -> String {
    serde_json::to_string(a).expect("annotation serializes")
}

fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v.into_iter().sum()
}

/// Coordinate mean per sorted index, or the first offending deviation.
fn average(group: &[&EndpointAnnotation], eps: f64) -> std::result::Result<EndpointAnnotation, String> {
    let n = group.len() as f64;
    let mut out = (*group.iter().min_by_key(|a| canonical_key(a)).expect("non-empty group")).clone();
    for pol in Polarity::BOTH {
        let sets: Vec<Vec<Point>> = group.iter().map(|a| sorted_points(a, pol)).collect();
        let mut fused = Vec::with_capacity(sets[0].len());
        for k in 0..sets[0].len() {
            for i in 0..sets.len() {
                for j in i + 1..sets.len() {
                    let d = sets[i][k].dist(sets[j][k]);
                    if d >= eps {
                        return Err(format!("{} point {k} deviates by {d:.2} px", pol.name()));
                    }
                }
            }
            let x = sorted_sum(sets.iter().map(|s| s[k].x).collect()) / n;
            let y = sorted_sum(sets.iter().map(|s| s[k].y).collect()) / n;
            fused.push(Point::new(x, y));
        }
        *out.points_mut(pol) = fused;
    }
    Ok(out)
}

/// Fuses consistent annotations by coordinate averaging; inconsistent ones
/// become a vote request. A lone annotation is passed through with a flag.
pub fn fuse_annotations(bundle: &AnnotationBundle, eps_px: f64, rule: CountRule) -> Result<FuseOutcome> {
    let anns = &bundle.annotations;
    match anns.len() {
        0 => return Err(Error::EmptyInput("annotation bundle")),
        1 => {
            return Ok(FuseOutcome::Single {
                annotation: anns[0].clone(),
                flag: "single annotation, not cross-checked".into(),
            })
        }
        _ => {}
    }
    if !(eps_px > 0.0) {
        return Err(Error::Config(format!("deviation threshold must be positive, got {eps_px}")));
    }
    let vote = |reason: String| {
        Ok(FuseOutcome::Vote(VoteRequest {
            image_id: bundle.image_id.clone(),
            candidates: anns.clone(),
            reason,
        }))
    };
    let mut tally: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for a in anns {
        *tally.entry(counts(a)).or_default() += 1;
    }
    let group: Vec<&EndpointAnnotation> = match rule {
        CountRule::Unanimous if tally.len() == 1 => anns.iter().collect(),
        CountRule::Majority => match tally.iter().find(|(_, &c)| 2 * c > anns.len()) {
            Some((&key, _)) => anns.iter().filter(|a| counts(a) == key).collect(),
            None => return vote("no majority on counts".into()),
        },
        _ => return vote("annotators disagree on counts".into()),
    };
    if group.len() < 2 {
        return vote("no two annotators agree on counts".into());
    }
    match average(&group, eps_px) {
        Ok(f) => Ok(FuseOutcome::Fused(f)),
        Err(reason) => vote(reason),
    }
}

/// Deviation between two annotations: summed distance of index-paired points,
/// plus `count_penalty` per unmatched point.
pub fn annotation_deviation(a: &EndpointAnnotation, b: &EndpointAnnotation, count_penalty: f64) -> f64 {
    let mut d = Vec::new();
    for pol in Polarity::BOTH {
        let (pa, pb) = (sorted_points(a, pol), sorted_points(b, pol));
        d.extend(pa.iter().zip(&pb).map(|(p, q)| p.dist(*q)));
        d.push(count_penalty * pa.len().abs_diff(pb.len()) as f64);
    }
    sorted_sum(d)
}

fn coords(a: &EndpointAnnotation) -> Vec<f64> {
    Polarity::BOTH
        .iter()
        .flat_map(|&p| sorted_points(a, p))
        .flat_map(|p| [p.x, p.y])
        .collect()
}

/// Single voting round: the candidate with the least total deviation to the
/// others wins. Ties go to the lexicographically smallest coordinates, then
/// to the smallest serialized record.
pub fn resolve_vote(request: &VoteRequest) -> Result<EndpointAnnotation> {
    let c = &request.candidates;
    if c.is_empty() {
        return Err(Error::EmptyInput("vote candidates"));
    }
    let diag = (c[0].width as f64).hypot(c[0].height as f64);
    let score = |i: usize| sorted_sum((0..c.len()).filter(|&j| j != i).map(|j| annotation_deviation(&c[i], &c[j], diag)).collect());
    let best = (0..c.len())
        .map(|i| (score(i), coords(&c[i]), i))
        .min_by(|a, b| {
            a.0.total_cmp(&b.0).then_with(|| {
                a.1.iter()
                    .zip(&b.1)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| *o != Ordering::Equal)
                    .unwrap_or(a.1.len().cmp(&b.1.len()))
            })
            .then_with(|| canonical_key(&c[a.2]).cmp(&canonical_key(&c[b.2])))
        })
        .expect("non-empty");
    Ok(c[best.2].clone())
}

/// Fuses a bundle, falling back to one voting round. Records the route taken.
pub fn settle(bundle: &mut AnnotationBundle, eps_px: f64, rule: CountRule) -> Result<EndpointAnnotation> {
    let fused = match fuse_annotations(bundle, eps_px, rule)? {
        FuseOutcome::Fused(a) => {
            bundle.flags.push("fused".into());
            a
        }
        FuseOutcome::Vote(req) => {
            bundle.flags.push(format!("voted: {}", req.reason));
            resolve_vote(&req)?
        }
        FuseOutcome::Single { annotation, flag } => {
            bundle.flags.push(flag);
            annotation
        }
    };
    bundle.fused = Some(fused.clone());
    Ok(fused)
}
