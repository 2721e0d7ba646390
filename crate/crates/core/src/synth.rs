//! Deterministic synthetic X-ray battery scenes with exact endpoint
//! annotations, and split-level dataset generation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotation::{sort_points, Attribute, Clarity, Difficulty, EndpointAnnotation, Point, Shot, StackAxis};
use crate::error::{Error, Result};

/// Recipe for one scene. Plates are vertical strokes stacked along x,
/// alternating anode, cathode, ..., anode; annotated endpoints are the upper
/// tips. Lengths are in native pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub n_cathode: usize,
    /// Distance between adjacent plates.
    pub plate_spacing: f64,
    pub plate_length: f64,
    /// How far each cathode tip sits below the anode tips.
    pub overhang_mean: f64,
    pub overhang_std: f64,
    pub tilt_deg: f64,
    pub interference: BTreeSet<Attribute>,
    pub noise_std: f64,
    pub blur_sigma: f64,
    pub clarity: Clarity,
    pub shot: Shot,
}

impl SceneSpec {
    pub fn n_anode(&self) -> usize {
        self.n_cathode + 1
    }

    pub fn plate_count(&self) -> usize {
        2 * self.n_cathode + 1
    }

    fn overflow(&self, what: String) -> Error {
        Error::GeometryOverflow(format!("scene {}: {what}", self.seed))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cathode < 1 {
            return Err(Error::Config("a scene needs at least one cathode".into()));
        }
        if let Some(a) = self.interference.iter().find(|a| !Attribute::INTERFERENCE.contains(a)) {
            return Err(Error::Config(format!("{a:?} is not an interference attribute")));
        }
        let finite = [
            self.plate_spacing,
            self.plate_length,
            self.overhang_mean,
            self.overhang_std,
            self.tilt_deg,
            self.noise_std,
            self.blur_sigma,
        ];
        if finite.iter().any(|v| !v.is_finite()) || self.noise_std < 0.0 || self.blur_sigma < 0.0 || self.overhang_std < 0.0 {
            return Err(Error::Config("scene parameters must be finite and non-negative".into()));
        }
        if self.overhang_mean <= 0.0 || self.plate_spacing < 2.0 {
            return Err(Error::Config("overhang mean must be positive and spacing at least 2 px".into()));
        }
        if self.width < 16 || self.height < 16 {
            return Err(self.overflow(format!("image {}x{} too small", self.width, self.height)));
        }
        let stack = self.plate_count().saturating_sub(1) as f64 * self.plate_spacing;
        let room = self.width as f64 - 1.0 - 2.0 * self.side_margin();
        if stack > room {
            return Err(self.overflow(format!("stack of {} plates needs {stack:.1} px, {room:.1} available", self.plate_count())));
        }
        if self.plate_length < self.max_overhang() + 2.0 {
            return Err(self.overflow("plates shorter than the overhang".into()));
        }
        if self.top_margin() + 0.1 * self.height as f64 + self.plate_length > self.height as f64 - 1.0 {
            return Err(self.overflow(format!("plate length {:.1} exceeds image height {}", self.plate_length, self.height)));
        }
        Ok(())
    }

    fn side_margin(&self) -> f64 {
        if self.interference.contains(&Attribute::PI) {
            self.plate_spacing + 2.0
        } else {
            (0.8 * self.plate_spacing).max(3.0)
        }
    }

    fn top_margin(&self) -> f64 {
        (0.12 * self.height as f64).max(5.0)
    }

    fn max_overhang(&self) -> f64 {
        self.overhang_mean + 2.5 * self.overhang_std
    }

    fn min_overhang(&self) -> f64 {
        (0.3 * self.overhang_mean).max(0.5).min(self.overhang_mean)
    }
}

#[derive(Clone, Copy, Debug)]
struct Stroke {
    tip: (f64, f64),
    end: (f64, f64),
    half_width: f64,
    intensity: f64,
}

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<f64>,
}

impl Canvas {
    /// Anti-aliased segment with a flat cap at `tip`: coverage is one half
    /// exactly at the tip.
    fn stroke(&mut self, s: &Stroke) {
        let (dx, dy) = (s.end.0 - s.tip.0, s.end.1 - s.tip.1);
        let len = dx.hypot(dy);
        if len == 0.0 {
            return;
        }
        let (ux, uy) = (dx / len, dy / len);
        let pad = s.half_width + 1.5;
        let x0 = (s.tip.0.min(s.end.0) - pad).floor().max(0.0) as usize;
        let x1 = ((s.tip.0.max(s.end.0) + pad).ceil().max(0.0) as usize).min(self.w - 1);
        let y0 = (s.tip.1.min(s.end.1) - pad).floor().max(0.0) as usize;
        let y1 = ((s.tip.1.max(s.end.1) + pad).ceil().max(0.0) as usize).min(self.h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (px, py) = (x as f64 - s.tip.0, y as f64 - s.tip.1);
                let t = px * ux + py * uy;
                let d = (px * uy - py * ux).abs();
                let along = (t + 0.5).clamp(0.0, 1.0) * (len - t + 0.5).clamp(0.0, 1.0);
                let across = (s.half_width + 0.5 - d).clamp(0.0, 1.0);
                let v = s.intensity * along * across;
                let p = &mut self.px[y * self.w + x];
                *p = p.max(v);
            }
        }
    }

    fn add_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, v: f64) {
        let xa = x0.max(0.0).round() as usize;
        let ya = y0.max(0.0).round() as usize;
        let xb = (x1.round().max(0.0) as usize).min(self.w);
        let yb = (y1.round().max(0.0) as usize).min(self.h);
        for y in ya..yb {
            for x in xa..xb {
                self.px[y * self.w + x] += v;
            }
        }
    }

    fn blur(&mut self, sigma: f64) {
        if sigma <= 0.0 {
            return;
        }
        let r = (3.0 * sigma).ceil() as i64;
        let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let norm: f64 = k.iter().sum();
        let (w, h) = (self.w as i64, self.h as i64);
        let mut tmp = vec![0.0; self.px.len()];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let xx = (x + j as i64 - r).clamp(0, w - 1);
                    s += kv * self.px[(y * w + xx) as usize];
                }
                tmp[(y * w + x) as usize] = s / norm;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let yy = (y + j as i64 - r).clamp(0, h - 1);
                    s += kv * tmp[(yy * w + x) as usize];
                }
                self.px[(y * w + x) as usize] = s / norm;
            }
        }
    }
}

fn rotate(p: (f64, f64), c: (f64, f64), cos: f64, sin: f64) -> (f64, f64) {
    let (dx, dy) = (p.0 - c.0, p.1 - c.1);
    (c.0 + dx * cos - dy * sin, c.1 + dx * sin + dy * cos)
}

fn clipped_normal<R: Rng>(rng: &mut R, mean: f64, std: f64, lo: f64, hi: f64) -> f64 {
    if std == 0.0 {
        return mean.clamp(lo, hi);
    }
    Normal::new(mean, std).expect("positive std").sample(rng).clamp(lo, hi)
}

/// Renders a scene and its exact annotation. The annotation id is
/// `scene-<seed>` and its difficulty is `Regular`; dataset generation
/// overwrites both.
pub fn render(spec: &SceneSpec) -> Result<(GrayImage, EndpointAnnotation)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width as usize, spec.height as usize);
    let (wf, hf) = (w as f64, h as f64);
    let pitch = spec.plate_spacing;
    let m = spec.plate_count();
    let stack = (m - 1) as f64 * pitch;
    let margin = spec.side_margin();
    let slack = wf - 1.0 - 2.0 * margin - stack;
    let x0 = margin + slack * rng.random_range(0.25..=0.75);
    let y_top = spec.top_margin() + rng.random_range(0.0..=0.1) * hf;
    let bottom = y_top + spec.plate_length;
    let center = ((wf - 1.0) / 2.0, (hf - 1.0) / 2.0);
    let theta = spec.tilt_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let rot = |p: (f64, f64)| rotate(p, center, cos, sin);

    let mut strokes = Vec::with_capacity(m);
    let mut anode = Vec::with_capacity(spec.n_anode());
    let mut cathode = Vec::with_capacity(spec.n_cathode);
    for k in 0..m {
        let x = x0 + k as f64 * pitch;
        let is_anode = k % 2 == 0;
        let tip_y = if is_anode {
            y_top + clipped_normal(&mut rng, 0.0, 0.35, -0.8, 0.8)
        } else {
            y_top + clipped_normal(&mut rng, spec.overhang_mean, spec.overhang_std, spec.min_overhang(), spec.max_overhang())
        };
        let tip = rot((x, tip_y));
        let end = rot((x, bottom));
        let (hw, inten) = if is_anode {
            (0.16 * pitch, 0.85 + rng.random_range(-0.04..=0.04))
        } else {
            (0.13 * pitch, 0.6 + rng.random_range(-0.04..=0.04))
        };
        strokes.push(Stroke {
            tip,
            end,
            half_width: hw.max(0.45),
            intensity: inten,
        });
        let p = Point::new(tip.0, tip.1);
        if is_anode {
            anode.push(p);
        } else {
            cathode.push(p);
        }
    }
    for p in anode.iter().chain(&cathode) {
        if !(p.x >= 1.0 && p.x <= wf - 2.0 && p.y >= 1.0 && p.y <= hf - 2.0) {
            return Err(spec.overflow(format!("endpoint ({:.1}, {:.1}) leaves the image after tilt", p.x, p.y)));
        }
    }
    let mut merged: Vec<(f64, bool)> = anode.iter().map(|p| (p.x, true)).chain(cathode.iter().map(|p| (p.x, false))).collect();
    merged.sort_by(|a, b| a.0.total_cmp(&b.0));
    if merged.iter().enumerate().any(|(i, &(_, a))| a != (i % 2 == 0)) {
        return Err(spec.overflow("tilt breaks anode/cathode alternation".into()));
    }
    sort_points(&mut anode, StackAxis::X);
    sort_points(&mut cathode, StackAxis::X);

    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut canvas = Canvas {
        w,
        h,
        px: (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                0.12 + 0.03 * (x / wf * 3.0 + phase).sin() * (y / hf * 2.0 + phase).cos()
            })
            .collect(),
    };
    for s in &strokes {
        canvas.stroke(s);
    }

    let min_tip_y = anode.iter().chain(&cathode).map(|p| p.y).fold(f64::INFINITY, f64::min);
    let side: bool = rng.random();
    for attr in &spec.interference {
        match attr {
            Attribute::II => {
                let amp = rng.random_range(0.12..=0.22) * if rng.random::<bool>() { 1.0 } else { -1.0 };
                for (i, p) in canvas.px.iter_mut().enumerate() {
                    *p += amp * (2.0 * (i % w) as f64 / (wf - 1.0) - 1.0);
                }
            }
            Attribute::BI => {
                let k = rng.random_range(0..m);
                let s = strokes[k];
                let (dx, dy) = (s.end.0 - s.tip.0, s.end.1 - s.tip.1);
                let len = dx.hypot(dy);
                let (ux, uy) = (dx / len, dy / len);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let (vx, vy) = (-uy * sign, ux * sign);
                let start = (s.tip.0 + ux * 0.9 * pitch, s.tip.1 + uy * 0.9 * pitch);
                let fork = (s.tip.0 + ux * 0.25 * pitch + vx * 0.4 * pitch, s.tip.1 + uy * 0.25 * pitch + vy * 0.4 * pitch);
                canvas.stroke(&Stroke {
                    tip: fork,
                    end: start,
                    half_width: (0.6 * s.half_width).max(0.4),
                    intensity: 0.8 * s.intensity,
                });
            }
            Attribute::TRI => {
                canvas.add_rect(0.0, hf * 0.86, wf, hf, 0.3);
                let (xa, xb) = if side { (0.0, 0.6 * margin) } else { (wf - 0.6 * margin, wf) };
                canvas.add_rect(xa, y_top + 0.35 * spec.plate_length, xb, hf, 0.3);
            }
            Attribute::TAI => {
                let band_bottom = min_tip_y - 0.5 * pitch - 1.0;
                if band_bottom >= 1.0 {
                    let span = 0.4 * stack.max(pitch);
                    let start = x0 + rng.random_range(0.0..=(stack - span).max(0.0));
                    canvas.add_rect(start, 0.0, start + span, band_bottom, 0.35);
                }
            }
            Attribute::SI => {
                let lift = rng.random_range(0.3..=0.6) * pitch;
                for k in 0..m - 1 {
                    let x = x0 + (k as f64 + 0.5) * pitch;
                    canvas.stroke(&Stroke {
                        tip: rot((x, y_top - lift)),
                        end: rot((x, bottom)),
                        half_width: 0.4,
                        intensity: 0.17,
                    });
                }
            }
            Attribute::PI => {
                let dy = rng.random_range(-0.15..=0.1) * hf;
                for j in 0..3 {
                    let off = 1.0 + j as f64 * 0.8 * pitch;
                    let x = if side { off } else { wf - 1.0 - off };
                    let tip_y = (y_top + dy + j as f64).max(1.0);
                    canvas.stroke(&Stroke {
                        tip: rot((x, tip_y)),
                        end: rot((x, bottom)),
                        half_width: (0.14 * pitch).max(0.45),
                        intensity: 0.55,
                    });
                }
            }
            _ => unreachable!("validated"),
        }
    }

    canvas.blur(spec.blur_sigma);
    if spec.noise_std > 0.0 {
        let n = Normal::new(0.0, spec.noise_std).expect("positive std");
        for p in canvas.px.iter_mut() {
            *p += n.sample(&mut rng);
        }
    }
    let img = GrayImage::from_raw(
        spec.width,
        spec.height,
        canvas.px.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
    )
    .expect("sized buffer");

    let mut attributes: BTreeSet<Attribute> = spec.interference.clone();
    if spec.tilt_deg != 0.0 {
        attributes.insert(Attribute::T);
    }
    if attributes.is_empty() && spec.clarity == Clarity::Clear {
        attributes.insert(Attribute::P);
    }
    let ann = EndpointAnnotation {
        image_id: format!("scene-{}", spec.seed),
        width: spec.width,
        height: spec.height,
        anode_points: anode,
        cathode_points: cathode,
        shot: spec.shot,
        clarity: spec.clarity,
        attributes,
        difficulty: Difficulty::Regular,
        stack_axis: StackAxis::X,
    };
    Ok((img, ann))
}

/// Difficulty by interference count and plate count. Scenes without
/// interference are always regular.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifficultyThresholds {
    /// Interference types that make a scene tough on their own.
    pub tough_interference: usize,
    /// Plate count at which an interfered scene becomes tough.
    pub tough_plates: usize,
}

impl Default for DifficultyThresholds {
    fn default() -> Self {
        DifficultyThresholds {
            tough_interference: 2,
            tough_plates: 11,
        }
    }
}

impl DifficultyThresholds {
    pub fn classify(&self, interference: usize, plates: usize) -> Difficulty {
        if interference == 0 {
            Difficulty::Regular
        } else if interference >= self.tough_interference || plates >= self.tough_plates {
            Difficulty::Tough
        } else {
            Difficulty::Difficult
        }
    }
}

/// Dataset recipe. Geometric ranges are expressed in pixels of a
/// `reference_size` frame and scaled to each image's native size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train: usize,
    pub test: usize,
    pub reference_size: u32,
    pub size_range: [u32; 2],
    pub n_cathode_range: [usize; 2],
    pub spacing_range: [f64; 2],
    pub plate_length_range: [f64; 2],
    pub overhang_mean_range: [f64; 2],
    pub overhang_std: f64,
    pub tilt_max_deg: f64,
    pub noise_range: [f64; 2],
    pub blur_range: [f64; 2],
    pub clear_blur_max: f64,
    /// Fraction of images that are pure plates (no interference, no tilt).
    pub pure_fraction: f64,
    pub tilt_fraction: f64,
    pub blur_fraction: f64,
    /// Fraction of each split carrying each interference attribute.
    pub interference_mix: BTreeMap<Attribute, f64>,
    pub thresholds: DifficultyThresholds,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            train: 60,
            test: 40,
            reference_size: 64,
            size_range: [80, 112],
            n_cathode_range: [3, 5],
            spacing_range: [4.6, 6.0],
            plate_length_range: [30.0, 38.0],
            overhang_mean_range: [2.5, 4.0],
            overhang_std: 0.6,
            tilt_max_deg: 4.0,
            noise_range: [0.005, 0.03],
            blur_range: [0.7, 1.0],
            clear_blur_max: 0.3,
            pure_fraction: 0.25,
            tilt_fraction: 0.15,
            blur_fraction: 0.2,
            interference_mix: [
                (Attribute::II, 0.12),
                (Attribute::PI, 0.1),
                (Attribute::BI, 0.15),
                (Attribute::TRI, 0.1),
                (Attribute::TAI, 0.1),
                (Attribute::SI, 0.2),
            ]
            .into_iter()
            .collect(),
            thresholds: DifficultyThresholds::default(),
        }
    }
}

fn ordered(r: [f64; 2], what: &str) -> Result<()> {
    if r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} range {r:?} must be finite and ordered")))
    }
}

impl DatasetConfig {
    /// `total` images split 6:4 into train and test.
    pub fn with_total(total: usize, seed: u64) -> Self {
        let train = (total as f64 * 0.6).round() as usize;
        DatasetConfig {
            seed,
            train,
            test: total - train,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train == 0 || self.test == 0 {
            return Err(Error::Config("split sizes must be positive".into()));
        }
        if self.size_range[0] < 16 || self.size_range[0] > self.size_range[1] {
            return Err(Error::Config(format!("size range {:?} invalid", self.size_range)));
        }
        if self.n_cathode_range[0] < 1 || self.n_cathode_range[0] > self.n_cathode_range[1] {
            return Err(Error::Config(format!("cathode range {:?} invalid", self.n_cathode_range)));
        }
        ordered(self.spacing_range, "spacing")?;
        ordered(self.plate_length_range, "plate length")?;
        ordered(self.overhang_mean_range, "overhang")?;
        ordered(self.noise_range, "noise")?;
        ordered(self.blur_range, "blur")?;
        if self.overhang_mean_range[0] <= 0.0 {
            return Err(Error::Config("overhang mean must be positive".into()));
        }
        let fractions = [self.pure_fraction, self.tilt_fraction, self.blur_fraction];
        if fractions.iter().chain(self.interference_mix.values()).any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config("fractions must lie in [0, 1]".into()));
        }
        if let Some(a) = self.interference_mix.keys().find(|a| !Attribute::INTERFERENCE.contains(a)) {
            return Err(Error::Config(format!("{a:?} is not an interference attribute")));
        }
        let max_q = self.interference_mix.values().copied().fold(self.tilt_fraction, f64::max);
        if max_q + self.pure_fraction > 1.0 + 1e-12 {
            return Err(Error::Config("pure fraction leaves too few images for the attribute mix".into()));
        }
        if self.thresholds.tough_interference == 0 {
            return Err(Error::Config("tough interference threshold must be at least 1".into()));
        }
        Ok(())
    }

    fn scale(&self, native: u32) -> f64 {
        crate::annotation::corner_scale(self.reference_size, native)
    }
}

/// Per-image plan before rendering.
#[derive(Clone, Debug)]
struct Plan {
    pure: bool,
    tilt: bool,
    interference: BTreeSet<Attribute>,
}

fn plan_split(cfg: &DatasetConfig, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Plan>> {
    let quota = |q: f64| (q * n as f64).round() as usize;
    let n_pure = quota(cfg.pure_fraction);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut plans: Vec<Plan> = (0..n)
        .map(|_| Plan {
            pure: false,
            tilt: false,
            interference: BTreeSet::new(),
        })
        .collect();
    for &i in &order[..n_pure.min(n)] {
        plans[i].pure = true;
    }
    let mut others: Vec<usize> = order[n_pure.min(n)..].to_vec();
    others.sort_unstable();
    let assign = |count: usize, rng: &mut ChaCha8Rng, what: &str| -> Result<Vec<usize>> {
        if count > others.len() {
            return Err(Error::Config(format!("{what}: {count} images requested, {} non-pure available", others.len())));
        }
        let mut pool = others.clone();
        pool.shuffle(rng);
        Ok(pool[..count].to_vec())
    };
    for i in assign(quota(cfg.tilt_fraction), rng, "tilt")? {
        plans[i].tilt = true;
    }
    for (&attr, &q) in &cfg.interference_mix {
        for i in assign(quota(q), rng, &format!("{attr:?}"))? {
            plans[i].interference.insert(attr);
        }
    }
    Ok(plans)
}

fn sample_spec<R: Rng>(cfg: &DatasetConfig, plan: &Plan, seed: u64, rng: &mut R) -> SceneSpec {
    let u = |rng: &mut R, r: [f64; 2]| if r[0] == r[1] { r[0] } else { rng.random_range(r[0]..=r[1]) };
    let width = rng.random_range(cfg.size_range[0]..=cfg.size_range[1]);
    let height = rng.random_range(cfg.size_range[0]..=cfg.size_range[1]);
    let s = cfg.scale(width.min(height));
    let mut shot = [Shot::CS, Shot::MS, Shot::LS][rng.random_range(0..3)];
    if plan.interference.contains(&Attribute::II) {
        shot = Shot::CS;
    } else if plan.interference.contains(&Attribute::SI) && shot == Shot::CS {
        shot = Shot::MS;
    }
    let [lo, hi] = cfg.spacing_range;
    let third = (hi - lo) / 3.0;
    let spacing_ref = match shot {
        Shot::CS => u(rng, [lo + 2.0 * third, hi]),
        Shot::MS => u(rng, [lo + third, lo + 2.0 * third]),
        Shot::LS => u(rng, [lo, lo + third]),
    };
    let blur = !plan.pure && rng.random_bool(cfg.blur_fraction);
    let tilt = if plan.tilt {
        let t = u(rng, [0.4 * cfg.tilt_max_deg, cfg.tilt_max_deg]);
        if rng.random::<bool>() {
            t
        } else {
            -t
        }
    } else {
        0.0
    };
    SceneSpec {
        seed,
        width,
        height,
        n_cathode: rng.random_range(cfg.n_cathode_range[0]..=cfg.n_cathode_range[1]),
        plate_spacing: spacing_ref * s,
        plate_length: u(rng, cfg.plate_length_range) * s,
        overhang_mean: u(rng, cfg.overhang_mean_range) * s,
        overhang_std: cfg.overhang_std * s,
        tilt_deg: tilt,
        interference: plan.interference.clone(),
        noise_std: u(rng, cfg.noise_range),
        blur_sigma: if blur { u(rng, cfg.blur_range) } else { u(rng, [0.0, cfg.clear_blur_max]) },
        clarity: if blur { Clarity::Blur } else { Clarity::Clear },
        shot,
    }
}

/// Draws specs until one fits, shrinking the stack when it does not.
fn render_planned(cfg: &DatasetConfig, plan: &Plan, seed: u64) -> Result<(GrayImage, EndpointAnnotation)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = None;
    for attempt in 0..64u64 {
        let mut spec = sample_spec(cfg, plan, seed.wrapping_add(attempt << 40), &mut rng);
        while spec.n_cathode > cfg.n_cathode_range[0] && matches!(spec.validate(), Err(Error::GeometryOverflow(_))) {
            spec.n_cathode -= 1;
        }
        match render(&spec) {
            Ok(r) => return Ok(r),
            Err(e @ Error::GeometryOverflow(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<EndpointAnnotation>,
    pub test: Vec<EndpointAnnotation>,
}

/// Paths of a generated dataset.
#[derive(Clone, Debug)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetLayout { root: root.into() }
    }

    pub fn images(&self) -> PathBuf {
        self.root.join("images")
    }

    pub fn image(&self, id: &str) -> PathBuf {
        self.images().join(format!("{id}.png"))
    }

    pub fn manifest(&self, split: &str) -> PathBuf {
        self.root.join(format!("{split}.jsonl"))
    }
}

/// Renders both splits in memory.
pub fn generate(cfg: &DatasetConfig) -> Result<(Dataset, Vec<(String, GrayImage)>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut images = Vec::with_capacity(cfg.train + cfg.test);
    let mut splits = Vec::with_capacity(2);
    for (split, n) in [("train", cfg.train), ("test", cfg.test)] {
        let plans = plan_split(cfg, n, &mut rng)?;
        let mut anns = Vec::with_capacity(n);
        for (i, plan) in plans.iter().enumerate() {
            let seed = rng.random::<u64>();
            let (img, mut ann) = render_planned(cfg, plan, seed)?;
            ann.image_id = format!("{split}-{i:04}");
            let k = plan.interference.len();
            ann.difficulty = cfg.thresholds.classify(k, ann.anode_points.len() + ann.cathode_points.len());
            images.push((ann.image_id.clone(), img));
            anns.push(ann);
        }
        splits.push(anns);
    }
    let test = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok((Dataset { train, test }, images))
}

/// Writes `images/<id>.png`, `train.jsonl` and `test.jsonl` under `out`.
pub fn make_dataset(cfg: &DatasetConfig, out: impl AsRef<Path>) -> Result<Dataset> {
    let (ds, images) = generate(cfg)?;
    let layout = DatasetLayout::new(out.as_ref());
    fs::create_dir_all(layout.images()).map_err(|e| Error::io(layout.images(), e))?;
    for (id, img) in &images {
        crate::imaging::save_gray(layout.image(id), img)?;
    }
    crate::annotation::write_manifest(layout.manifest("train"), &ds.train)?;
    crate::annotation::write_manifest(layout.manifest("test"), &ds.test)?;
    Ok(ds)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn spec() -> SceneSpec {
        SceneSpec {
            seed: 42,
            width: 96,
            height: 96,
            n_cathode: 3,
            plate_spacing: 8.0,
            plate_length: 50.0,
            overhang_mean: 4.0,
            overhang_std: 1.0,
            tilt_deg: 0.0,
            interference: BTreeSet::new(),
            noise_std: 0.0,
            blur_sigma: 0.0,
            clarity: Clarity::Clear,
            shot: Shot::MS,
        }
    }

    #[test]
    fn alternating_counts() {
        let (_, ann) = render(&spec()).unwrap();
        assert_eq!(ann.anode_points.len(), 4);
        assert_eq!(ann.cathode_points.len(), 3);
        ann.validate().unwrap();
        assert!(ann.is_pure());
        for j in 0..3 {
            assert!(ann.anode_points[j].x < ann.cathode_points[j].x);
            assert!(ann.cathode_points[j].x < ann.anode_points[j + 1].x);
        }
    }

    #[test]
    fn deterministic() {
        let mut s = spec();
        s.interference = Attribute::INTERFERENCE.into_iter().collect();
        s.noise_std = 0.02;
        s.blur_sigma = 0.7;
        s.tilt_deg = 3.0;
        let a = render(&s).unwrap();
        let b = render(&s).unwrap();
        assert_eq!(a.0.as_raw(), b.0.as_raw());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn tips_sit_on_stroke_ends() {
        let s = spec();
        let (img, ann) = render(&s).unwrap();
        let v = |x: f64, y: f64| img.get_pixel(x.round() as u32, y.round() as u32)[0] as f64 / 255.0;
        for p in ann.anode_points.iter().chain(&ann.cathode_points) {
            // one pixel inside the stroke is bright, one pixel beyond the tip is background
            assert!(v(p.x, p.y + 1.0) > 0.4, "{p:?}");
            assert!(v(p.x, p.y - 1.5) < 0.2, "{p:?}");
        }
    }

    #[test]
    fn overflow_is_reported() {
        let mut s = spec();
        s.n_cathode = 20;
        assert!(matches!(render(&s), Err(Error::GeometryOverflow(_))));
        let mut s = spec();
        s.plate_length = 200.0;
        assert!(matches!(render(&s), Err(Error::GeometryOverflow(_))));
    }

    #[test]
    fn difficulty_thresholds() {
        let t = DifficultyThresholds::default();
        assert_eq!(t.classify(0, 40), Difficulty::Regular);
        assert_eq!(t.classify(1, 7), Difficulty::Difficult);
        assert_eq!(t.classify(1, 11), Difficulty::Tough);
        assert_eq!(t.classify(2, 7), Difficulty::Tough);
    }
}
