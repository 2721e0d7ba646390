//! Supervision targets rendered from annotations (point disks, polylines,
//! counts) and the inverse: endpoint extraction from probability maps.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::annotation::{sort_points, EndpointAnnotation, Point, Polarity, StackAxis};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RadiusKind {
    Const,
    Adaptive,
}

/// How large a disk each endpoint gets in the point mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusPolicy {
    pub kind: RadiusKind,
    /// Radius in pixels (`Const`) or fraction of the neighbour spacing used
    /// as the disk diameter (`Adaptive`).
    pub value: f64,
}

impl RadiusPolicy {
    pub fn constant(radius: f64) -> Self {
        RadiusPolicy {
            kind: RadiusKind::Const,
            value: radius,
        }
    }

    pub fn adaptive(fraction: f64) -> Self {
        RadiusPolicy {
            kind: RadiusKind::Adaptive,
            value: fraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.value > 0.0) || !self.value.is_finite() {
            return Err(Error::Config(format!("radius policy value must be > 0, got {}", self.value)));
        }
        if self.kind == RadiusKind::Adaptive && self.value >= 1.0 {
            return Err(Error::Config(format!("adaptive fraction must be < 1, got {}", self.value)));
        }
        Ok(())
    }
}

impl Default for RadiusPolicy {
    fn default() -> Self {
        RadiusPolicy::adaptive(0.3)
    }
}

impl fmt::Display for RadiusPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            RadiusKind::Const => write!(f, "Const-{}", self.value),
            RadiusKind::Adaptive => write!(f, "Ada-{}", self.value),
        }
    }
}

/// Parses `Const-3` / `Ada-0.3`.
impl FromStr for RadiusPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("radius policy `{s}` is not Const-<px> or Ada-<fraction>"));
        let (kind, value) = s.split_once('-').ok_or_else(bad)?;
        let value: f64 = value.parse().map_err(|_| bad())?;
        let p = match kind.to_ascii_lowercase().as_str() {
            "const" => RadiusPolicy::constant(value),
            "ada" | "adaptive" => RadiusPolicy::adaptive(value),
            _ => return Err(bad()),
        };
        p.validate()?;
        Ok(p)
    }
}

/// `H x W` array of `{0, 1}`.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BinaryMask({}x{}, {} set)", self.width, self.height, self.count_ones())
    }
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(x, y) as u8;
            }
        }
        m
    }

    /// Binarizes a map at `value >= threshold`. Accepts `[H, W]` or `[1, H, W]`.
    pub fn threshold<T: Scalar>(map: &Tensor<T>, threshold: f64) -> Result<Self> {
        let (h, w) = plane_dims(map)?;
        let t = T::lit(threshold);
        Ok(BinaryMask {
            width: w,
            height: h,
            data: map.data().iter().map(|&v| (v >= t) as u8).collect(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize) {
        self.data[y * self.width + x] = 1;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, self.height, self.width], |i| if self.data[i] != 0 { T::one() } else { T::zero() })
    }

    /// Single-channel 8-bit PNG, foreground 255.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let img = image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(x as usize, y as usize) { 255 } else { 0 }])
        });
        img.save(path).map_err(|source| Error::Image {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.display().to_string(),
                source,
            })?
            .into_luma8();
        let (w, h) = img.dimensions();
        Ok(BinaryMask {
            width: w as usize,
            height: h as usize,
            data: img.pixels().map(|p| (p.0[0] >= 128) as u8).collect(),
        })
    }
}

fn plane_dims<T>(map: &Tensor<T>) -> Result<(usize, usize)>
where
    T: Scalar,
{
    match *map.shape() {
        [h, w] | [1, h, w] => Ok((h, w)),
        _ => Err(Error::shape(&[1, 0, 0], map.shape())),
    }
}

/// Warnings raised while rendering a point mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelFlags {
    /// Adaptive policy with a single point of this polarity; radius 1 used.
    pub single_point_fallback: bool,
    /// Some points are too close for even single-pixel disks to stay apart.
    pub crowded: bool,
}

#[derive(Clone, Debug)]
pub struct PointMask {
    pub mask: BinaryMask,
    /// Radius actually drawn for each endpoint, after capping.
    pub radii: Vec<f64>,
    pub flags: LabelFlags,
}

/// Radius below which a disk degenerates to its nearest pixel.
const MIN_DISK_RADIUS: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// One filled disk per endpoint of `polarity`.
///
/// Adaptive diameter: `f * min(distance to previous, distance to next)` over
/// same-polarity neighbours, radius `max(1, round(d / 2))`. Every radius is
/// then capped at `(nearest same-polarity distance - sqrt 2) / 2` so no two
/// disks are 8-adjacent, which keeps the component count equal to the point
/// count.
pub fn generate_point_mask(ann: &EndpointAnnotation, policy: RadiusPolicy, polarity: Polarity) -> Result<PointMask> {
    policy.validate()?;
    let pts = ann.points(polarity);
    if pts.is_empty() {
        return Err(Error::EmptyPointList(polarity.name()));
    }
    let mut flags = LabelFlags::default();
    let requested: Vec<f64> = match policy.kind {
        RadiusKind::Const => vec![policy.value; pts.len()],
        RadiusKind::Adaptive if pts.len() == 1 => {
            flags.single_point_fallback = true;
            log::warn!("{}: single {} point, adaptive radius falls back to 1", ann.image_id, polarity.name());
            vec![1.0]
        }
        RadiusKind::Adaptive => (0..pts.len())
            .map(|j| {
                let prev = (j > 0).then(|| pts[j].dist(pts[j - 1]));
                let next = (j + 1 < pts.len()).then(|| pts[j].dist(pts[j + 1]));
                let spacing = match (prev, next) {
                    (Some(a), Some(b)) => a.min(b),
                    (Some(a), None) | (None, Some(a)) => a,
                    (None, None) => unreachable!(),
                };
                (policy.value * spacing / 2.0).round().max(1.0)
            })
            .collect(),
    };

    let radii: Vec<f64> = (0..pts.len())
        .map(|j| {
            let nearest = pts
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != j)
                .map(|(_, q)| pts[j].dist(*q))
                .fold(f64::INFINITY, f64::min);
            let cap = (nearest - std::f64::consts::SQRT_2) / 2.0 - 1e-9;
            if cap < MIN_DISK_RADIUS {
                flags.crowded = true;
            }
            requested[j].min(cap).max(0.0)
        })
        .collect();

    let (w, h) = (ann.width as usize, ann.height as usize);
    let mut mask = BinaryMask::new(w, h);
    for (p, &r) in pts.iter().zip(&radii) {
        draw_disk(&mut mask, *p, r);
    }
    Ok(PointMask { mask, radii, flags })
}

/// Pixels within `r` of `c`, plus the nearest in-bounds pixel so the disk is
/// never empty; clipped to the image.
fn draw_disk(mask: &mut BinaryMask, c: Point, r: f64) {
    let (w, h) = (mask.width as i64, mask.height as i64);
    let nx = (c.x.round() as i64).clamp(0, w - 1);
    let ny = (c.y.round() as i64).clamp(0, h - 1);
    mask.set(nx as usize, ny as usize);
    let x0 = ((c.x - r).floor() as i64).max(0);
    let x1 = ((c.x + r).ceil() as i64).min(w - 1);
    let y0 = ((c.y - r).floor() as i64).max(0);
    let y1 = ((c.y + r).ceil() as i64).min(h - 1);
    let r2 = r * r;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 - c.x, y as f64 - c.y);
            if dx * dx + dy * dy <= r2 {
                mask.set(x as usize, y as usize);
            }
        }
    }
}

/// Integer line from `a` to `b` (Bresenham), endpoints included.
pub fn rasterize_line(a: (i64, i64), b: (i64, i64)) -> Vec<(i64, i64)> {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx - dy + 1) as usize);
    loop {
        out.push((x, y));
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out
}

/// Polyline through the ordered endpoints, dilated to `thickness` pixels.
pub fn generate_line_mask(ann: &EndpointAnnotation, polarity: Polarity, thickness: usize) -> Result<BinaryMask> {
    let pts = ann.points(polarity);
    if pts.is_empty() {
        return Err(Error::EmptyPointList(polarity.name()));
    }
    let (w, h) = (ann.width as usize, ann.height as usize);
    let snap = |p: &Point| {
        (
            (p.x.round() as i64).clamp(0, w as i64 - 1),
            (p.y.round() as i64).clamp(0, h as i64 - 1),
        )
    };
    let mut mask = BinaryMask::new(w, h);
    let mut pixels = vec![snap(&pts[0])];
    for seg in pts.windows(2) {
        pixels.extend(rasterize_line(snap(&seg[0]), snap(&seg[1])));
    }
    let t = thickness.max(1) as i64;
    let (lo, hi) = (-(t - 1) / 2, t / 2);
    for (x, y) in pixels {
        for oy in lo..=hi {
            for ox in lo..=hi {
                let (px, py) = (x + ox, y + oy);
                if px >= 0 && py >= 0 && px < w as i64 && py < h as i64 {
                    mask.set(px as usize, py as usize);
                }
            }
        }
    }
    Ok(mask)
}

/// Axis-aligned bounding box of one component, inclusive pixel bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Component {
    pub min_x: usize,
    pub min_y: usize,
    pub max_x: usize,
    pub max_y: usize,
    pub area: usize,
}

impl Component {
    pub fn center(&self) -> Point {
        Point::new((self.min_x + self.max_x) as f64 / 2.0, (self.min_y + self.max_y) as f64 / 2.0)
    }
}

fn find(parent: &mut [u32], mut i: u32) -> u32 {
    while parent[i as usize] != i {
        parent[i as usize] = parent[parent[i as usize] as usize];
        i = parent[i as usize];
    }
    i
}

/// 8-connected components, in raster order of their first pixel.
pub fn connected_components(mask: &BinaryMask) -> Vec<Component> {
    let (w, h) = (mask.width, mask.height);
    let mut labels = vec![0u32; w * h];
    let mut parent: Vec<u32> = vec![0];
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let mut neighbours = [0u32; 4];
            let mut k = 0;
            if x > 0 {
                neighbours[k] = labels[y * w + x - 1];
                k += 1;
            }
            if y > 0 {
                let up = (y - 1) * w;
                if x > 0 {
                    neighbours[k] = labels[up + x - 1];
                    k += 1;
                }
                neighbours[k] = labels[up + x];
                k += 1;
                if x + 1 < w {
                    neighbours[k] = labels[up + x + 1];
                    k += 1;
                }
            }
            let mut label = 0;
            for &n in neighbours[..k].iter().filter(|&&n| n != 0) {
                let root = find(&mut parent, n);
                if label == 0 {
                    label = root;
                } else if root != label {
                    let (lo, hi) = (label.min(root), label.max(root));
                    parent[hi as usize] = lo;
                    label = lo;
                }
            }
            if label == 0 {
                label = parent.len() as u32;
                parent.push(label);
            }
            labels[y * w + x] = label;
        }
    }
    let mut slot = vec![usize::MAX; parent.len()];
    let mut comps: Vec<Component> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x];
            if l == 0 {
                continue;
            }
            let root = find(&mut parent, l) as usize;
            if slot[root] == usize::MAX {
                slot[root] = comps.len();
                comps.push(Component {
                    min_x: x,
                    min_y: y,
                    max_x: x,
                    max_y: y,
                    area: 0,
                });
            }
            let c = &mut comps[slot[root]];
            c.min_x = c.min_x.min(x);
            c.max_x = c.max_x.max(x);
            c.min_y = c.min_y.min(y);
            c.max_y = c.max_y.max(y);
            c.area += 1;
        }
    }
    comps
}

/// Number of 8-connected components.
pub fn derive_count_label(mask: &BinaryMask) -> usize {
    connected_components(mask).len()
}

/// Centres of the bounding rectangles of the components of `map >= threshold`,
/// sorted along `axis` (ties on the other axis).
pub fn extract_points<T: Scalar>(prob_map: &Tensor<T>, threshold: f64, axis: StackAxis) -> Result<Vec<Point>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("extraction threshold must be in (0, 1), got {threshold}")));
    }
    let mask = BinaryMask::threshold(prob_map, threshold)?;
    Ok(extract_points_from_mask(&mask, axis))
}

pub fn extract_points_from_mask(mask: &BinaryMask, axis: StackAxis) -> Vec<Point> {
    let mut pts: Vec<Point> = connected_components(mask).iter().map(Component::center).collect();
    sort_points(&mut pts, axis);
    pts
}

/// Every supervision target for one annotated image.
#[derive(Clone, Debug)]
pub struct LabelSet {
    pub point_mask_anode: BinaryMask,
    pub point_mask_cathode: BinaryMask,
    pub line_mask_anode: BinaryMask,
    pub line_mask_cathode: BinaryMask,
    pub count_anode: usize,
    pub count_cathode: usize,
    pub flags: LabelFlags,
}

impl LabelSet {
    pub fn build(ann: &EndpointAnnotation, policy: RadiusPolicy, line_thickness: usize) -> Result<Self> {
        let pa = generate_point_mask(ann, policy, Polarity::Anode)?;
        let pc = generate_point_mask(ann, policy, Polarity::Cathode)?;
        let count_anode = derive_count_label(&pa.mask);
        let count_cathode = derive_count_label(&pc.mask);
        Ok(LabelSet {
            line_mask_anode: generate_line_mask(ann, Polarity::Anode, line_thickness)?,
            line_mask_cathode: generate_line_mask(ann, Polarity::Cathode, line_thickness)?,
            flags: LabelFlags {
                single_point_fallback: pa.flags.single_point_fallback || pc.flags.single_point_fallback,
                crowded: pa.flags.crowded || pc.flags.crowded,
            },
            point_mask_anode: pa.mask,
            point_mask_cathode: pc.mask,
            count_anode,
            count_cathode,
        })
    }

    pub fn point_mask(&self, polarity: Polarity) -> &BinaryMask {
        match polarity {
            Polarity::Anode => &self.point_mask_anode,
            Polarity::Cathode => &self.point_mask_cathode,
        }
    }

    pub fn line_mask(&self, polarity: Polarity) -> &BinaryMask {
        match polarity {
            Polarity::Anode => &self.line_mask_anode,
            Polarity::Cathode => &self.line_mask_cathode,
        }
    }

    pub fn count(&self, polarity: Polarity) -> usize {
        match polarity {
            Polarity::Anode => self.count_anode,
            Polarity::Cathode => self.count_cathode,
        }
    }
}
