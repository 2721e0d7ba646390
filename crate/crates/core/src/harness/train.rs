//! Training loop: Adam with value clipping and L2 decay, step learning-rate
//! schedule, per-epoch prompt resampling and flip/scale/brightness
//! augmentation. Fully sequential, so a fixed seed gives a fixed curve.

use std::collections::HashMap;
use std::path::Path;

use image::GrayImage;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{read_manifest, sort_points, EndpointAnnotation, Polarity};
use crate::error::{Error, Result};
use crate::imaging::{hflip, load_gray, resize_to_tensor};
use crate::labels::{LabelSet, RadiusPolicy};
use crate::model::loss::{LossComponents, LossWeights};
use crate::model::{Model, ModelConfig, Targets};
use crate::nn::Ctx;
use crate::synth::DatasetLayout;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_iterations: Option<usize>,
    pub batch_size: usize,
    pub input_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Every gradient entry is clamped to `[-grad_clip, grad_clip]`.
    pub grad_clip: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub hflip: bool,
    pub scales: Vec<f64>,
    pub brightness_jitter: f64,
    #[serde(with = "policy_text")]
    pub label_policy: RadiusPolicy,
    pub line_thickness: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            max_iterations: None,
            batch_size: 4,
            input_size: 512,
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-3,
            grad_clip: 0.5,
            lr_decay: 0.9,
            lr_decay_every: 120,
            hflip: true,
            scales: vec![0.75, 1.0, 1.25],
            brightness_jitter: 0.1,
            label_policy: RadiusPolicy::default(),
            line_thickness: 1,
            loss_weights: LossWeights::default(),
            seed: 0,
        }
    }
}

pub(crate) mod policy_text {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::labels::RadiusPolicy;

    pub fn serialize<S: Serializer>(p: &RadiusPolicy, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(p)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<RadiusPolicy, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.adam_eps,
            self.grad_clip,
            self.lr_decay,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.weight_decay < 0.0 {
            return Err(Error::Config("training rates must be positive".into()));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::Config("Adam betas must be below 1".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.lr_decay_every == 0 || self.input_size == 0 {
            return Err(Error::Config("epochs, batch size, decay period and input size must be positive".into()));
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config("scale set must be non-empty and positive".into()));
        }
        if self.brightness_jitter < 0.0 {
            return Err(Error::Config("brightness jitter must be non-negative".into()));
        }
        self.label_policy.validate()
    }

    /// Learning rate during `epoch` (zero-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }

    /// Network input side for an augmentation scale, rounded to the
    /// coarsest stride.
    pub fn scaled_size(&self, scale: f64, stride: usize) -> usize {
        let s = (self.input_size as f64 * scale / stride as f64).round().max(1.0) as usize;
        s * stride
    }
}

/// An annotated training image.
#[derive(Clone, Debug)]
pub struct Sample {
    pub annotation: EndpointAnnotation,
    pub image: GrayImage,
}

/// Loads a split manifest and its images from a generated dataset.
pub fn load_split(root: impl AsRef<Path>, split: &str) -> Result<Vec<Sample>> {
    let layout = DatasetLayout::new(root.as_ref());
    let manifest = layout.manifest(split);
    if !manifest.exists() {
        return Err(Error::MissingSplit(format!("{} (no {})", split, manifest.display())));
    }
    read_manifest(&manifest)?
        .into_iter()
        .map(|annotation| {
            let image = load_gray(layout.image(&annotation.image_id))?;
            if (image.width(), image.height()) != (annotation.width, annotation.height) {
                return Err(Error::InvalidAnnotation {
                    image_id: annotation.image_id.clone(),
                    reason: format!("image is {}x{}, annotation says {}x{}", image.width(), image.height(), annotation.width, annotation.height),
                });
            }
            Ok(Sample { annotation, image })
        })
        .collect()
}

/// Mirror of an annotation across the vertical image axis.
pub fn flip_annotation(ann: &EndpointAnnotation) -> EndpointAnnotation {
    let mut out = ann.clone();
    let w = ann.width as f64 - 1.0;
    for pol in Polarity::BOTH {
        let pts = out.points_mut(pol);
        for p in pts.iter_mut() {
            p.x = w - p.x;
        }
        sort_points(pts, ann.stack_axis);
    }
    out
}

/// Network input `[1, S, S]` for an image.
pub fn network_input(image: &GrayImage, size: usize) -> Tensor<f32> {
    resize_to_tensor(image, size, size)
}

/// Input tensor and targets of one sample under one augmentation.
pub fn prepare(sample: &Sample, size: usize, flip: bool, policy: RadiusPolicy, line_thickness: usize) -> Result<(Tensor<f32>, Targets<f32>)> {
    let mut x = network_input(&sample.image, size);
    let mut ann = sample.annotation.rescaled(size as u32, size as u32);
    if flip {
        x = hflip(&x);
        ann = flip_annotation(&ann);
    }
    let labels = LabelSet::build(&ann, policy, line_thickness)?;
    Ok((x, Targets::from_labels(&labels)))
}

/// Pure-plate images usable as prompts.
pub fn prompt_pool(samples: &[Sample]) -> Vec<usize> {
    samples.iter().enumerate().filter(|(_, s)| s.annotation.is_pure()).map(|(i, _)| i).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub components: LossComponents,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub curve: Vec<IterationLog>,
    /// First pure-plate image of the training set at network resolution;
    /// stored with the checkpoint as the default inference prompt.
    pub default_prompt: Tensor<f32>,
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    fn new(model: &Model<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = model.store().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Model<f32>, grads: &[Tensor<f32>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (clip, wd, eps, lr) = (cfg.grad_clip as f32, cfg.weight_decay as f32, cfg.adam_eps as f32, lr as f32);
        let ids: Vec<_> = model.store().ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = model.store_mut().get_mut(id).data_mut();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (&g, w)) in grads[k].data().iter().zip(p.iter_mut()).enumerate() {
                let g = g.clamp(-clip, clip) + wd * *w;
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Trains a fresh model on `samples`; `progress` receives every iteration.
pub fn train(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    samples: &[Sample],
    mut progress: impl FnMut(&IterationLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("training manifest"));
    }
    let pool = prompt_pool(samples);
    if pool.is_empty() {
        return Err(Error::NoPromptImage);
    }
    let mut model_cfg = model_cfg.clone();
    model_cfg.input_size = cfg.input_size;
    let mut model = Model::<f32>::new(model_cfg.clone(), cfg.seed)?;
    let stride = model_cfg.encoder.strides[crate::model::LEVELS - 1];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a11);
    let mut adam = Adam::new(&model);
    let mut cache: HashMap<(usize, usize, bool), (Tensor<f32>, Targets<f32>)> = HashMap::new();
    let mut prompts: HashMap<usize, Tensor<f32>> = HashMap::new();
    let default_prompt = network_input(&samples[pool[0]].image, cfg.input_size);
    let per_epoch = samples.len().div_ceil(cfg.batch_size);
    let budget = cfg.max_iterations.unwrap_or(usize::MAX).min(cfg.epochs * per_epoch);
    let mut curve = Vec::with_capacity(budget.min(1 << 16));
    let mut iteration = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let pick = *pool.choose(&mut rng).expect("non-empty pool");
        let prompt = prompts
            .entry(pick)
            .or_insert_with(|| network_input(&samples[pick].image, cfg.input_size))
            .clone();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if iteration >= budget {
                break 'epochs;
            }
            let mut grads: Option<Vec<Tensor<f32>>> = None;
            let mut loss = 0.0;
            let mut comps = LossComponents::default();
            for &i in batch {
                let si = rng.random_range(0..cfg.scales.len());
                let flip = cfg.hflip && rng.random::<bool>();
                let shift = if cfg.brightness_jitter > 0.0 {
                    rng.random_range(-cfg.brightness_jitter..=cfg.brightness_jitter) as f32
                } else {
                    0.0
                };
                let size = cfg.scaled_size(cfg.scales[si], stride);
                let key = (i, size, flip);
                if !cache.contains_key(&key) {
                    cache.insert(key, prepare(&samples[i], size, flip, cfg.label_policy, cfg.line_thickness)?);
                }
                let (x, targets) = &cache[&key];
                let x = x.map(|v| v + shift);
                let mut ctx = Ctx::train(model.store());
                let out = model.forward(&mut ctx, &prompt, &x)?;
                let (total, c) = model.loss(&mut ctx, &out, targets, &cfg.loss_weights)?;
                loss += ctx.g.value(total).data()[0] as f64;
                comps.refine += c.refine;
                comps.coarse += c.coarse;
                comps.count += c.count;
                comps.line += c.line;
                let g = ctx.param_grads(total);
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
                }
            }
            let n = batch.len() as f32;
            let mut grads = grads.expect("non-empty batch");
            for g in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|v| *v /= n);
            }
            adam.step(&mut model, &grads, lr, cfg);
            let nf = batch.len() as f64;
            let log = IterationLog {
                iteration,
                epoch,
                lr,
                loss: loss / nf,
                components: LossComponents {
                    refine: comps.refine / nf,
                    coarse: comps.coarse / nf,
                    count: comps.count / nf,
                    line: comps.line / nf,
                },
            };
            progress(&log);
            curve.push(log);
            iteration += 1;
        }
    }
    Ok(TrainOutcome {
        model,
        curve,
        default_prompt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps_every_period() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 1e-4);
        assert_eq!(c.lr_at(119), 1e-4);
        assert!((c.lr_at(120) - 0.9e-4).abs() < 1e-18);
        assert!((c.lr_at(240) - 0.81e-4).abs() < 1e-18);
    }

    #[test]
    fn invalid_configs() {
        let mut c = TrainConfig::default();
        c.scales.clear();
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn scaled_sizes_respect_stride() {
        let c = TrainConfig {
            input_size: 64,
            ..Default::default()
        };
        assert_eq!(c.scaled_size(0.75, 16), 48);
        assert_eq!(c.scaled_size(1.25, 16), 80);
        assert_eq!(c.scaled_size(1.0, 32), 64);
    }

    #[test]
    fn flip_keeps_points_sorted() {
        let (_, ann) = crate::synth::render(&crate::synth::tests::spec()).unwrap();
        let f = flip_annotation(&ann);
        f.validate().unwrap();
        let back = flip_annotation(&f);
        for pol in Polarity::BOTH {
            for (a, b) in back.points(pol).iter().zip(ann.points(pol)) {
                assert!(a.dist(*b) < 1e-9);
            }
        }
    }
}
