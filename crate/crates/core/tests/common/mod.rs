//! Random instance generators and brute-force oracles shared by the
//! integration tests.
#![allow(dead_code)]

use pbd_core::annotation::{Clarity, Difficulty, EndpointAnnotation, Point, Shot, StackAxis};
use rand::Rng;

pub fn annotation(id: &str, width: u32, height: u32, anode: Vec<Point>, cathode: Vec<Point>, axis: StackAxis) -> EndpointAnnotation {
    EndpointAnnotation {
        image_id: id.into(),
        width,
        height,
        anode_points: anode,
        cathode_points: cathode,
        shot: Shot::MS,
        clarity: Clarity::Clear,
        attributes: Default::default(),
        difficulty: Difficulty::Regular,
        stack_axis: axis,
    }
}

fn place(axis: StackAxis, along: f64, across: f64) -> Point {
    match axis {
        StackAxis::X => Point::new(along, across),
        StackAxis::Y => Point::new(across, along),
    }
}

/// Alternating stack `a, c, a, ..., a` with `n_cathode` cathodes, adjacent
/// pitch in `pitch`, tips jittered across the stack, kept `margin` px from
/// every border.
pub fn random_stack<R: Rng>(rng: &mut R, id: &str, n_cathode: usize, pitch: (f64, f64), margin: f64) -> EndpointAnnotation {
    let axis = if rng.random::<bool>() { StackAxis::X } else { StackAxis::Y };
    let n = 2 * n_cathode + 1;
    let mut along = Vec::with_capacity(n);
    let mut pos = margin + rng.random_range(0.0..3.0);
    for _ in 0..n {
        along.push(pos);
        pos += rng.random_range(pitch.0..pitch.1);
    }
    let span_along = along[n - 1] + margin + 1.0;
    let base = margin + rng.random_range(4.0..12.0);
    let mut anode = Vec::new();
    let mut cathode = Vec::new();
    for (k, &a) in along.iter().enumerate() {
        if k % 2 == 0 {
            anode.push(place(axis, a, base + rng.random_range(-1.5..1.5)));
        } else {
            cathode.push(place(axis, a, base + rng.random_range(2.0..6.0)));
        }
    }
    let span_across = base + 6.0 + margin + rng.random_range(1.0..20.0);
    let (w, h) = match axis {
        StackAxis::X => (span_along, span_across),
        StackAxis::Y => (span_across, span_along),
    };
    annotation(id, w.ceil() as u32, h.ceil() as u32, anode, cathode, axis)
}

/// Points sorted along the axis with ties broken on the other coordinate.
pub fn sorted(points: &[Point], axis: StackAxis) -> Vec<Point> {
    let mut p = points.to_vec();
    p.sort_by(|a, b| {
        let (ka, kb) = match axis {
            StackAxis::X => ((a.x, a.y), (b.x, b.y)),
            StackAxis::Y => ((a.y, a.x), (b.y, b.x)),
        };
        ka.partial_cmp(&kb).unwrap()
    });
    p
}

pub fn oracle_count_mae(pairs: &[(usize, usize)]) -> f64 {
    let mut s = 0.0;
    for &(p, g) in pairs {
        s += if p > g { (p - g) as f64 } else { (g - p) as f64 };
    }
    s / pairs.len() as f64
}

pub fn oracle_count_acc(pairs: &[(usize, usize)]) -> f64 {
    let mut hits = 0usize;
    for &(p, g) in pairs {
        if p == g {
            hits += 1;
        }
    }
    hits as f64 / pairs.len() as f64
}

/// Localization error of one polarity; `paper` divides by `H * W`.
pub fn oracle_loc(items: &[(Vec<Point>, EndpointAnnotation)], anode: bool, paper: bool) -> Option<f64> {
    let mut acc = Vec::new();
    for (pred, gt) in items {
        let g = if anode { &gt.anode_points } else { &gt.cathode_points };
        if pred.len() != g.len() {
            continue;
        }
        if g.is_empty() {
            acc.push(0.0);
            continue;
        }
        let mut e = 0.0;
        for j in 0..g.len() {
            let (dx, dy) = (pred[j].x - g[j].x, pred[j].y - g[j].y);
            e += (dx * dx + dy * dy).sqrt();
        }
        e /= g.len() as f64;
        if paper {
            e /= gt.width as f64 * gt.height as f64;
        }
        acc.push(e);
    }
    if acc.is_empty() {
        None
    } else {
        Some(acc.iter().sum::<f64>() / acc.len() as f64)
    }
}

/// Coordinate across the stack (along the plate length).
pub fn across(axis: StackAxis, p: Point) -> f64 {
    match axis {
        StackAxis::X => p.y,
        StackAxis::Y => p.x,
    }
}

/// Overhang error over images with both counts right and a well-formed
/// stack.
pub fn oracle_overhang(items: &[(Vec<Point>, Vec<Point>, EndpointAnnotation)], paper: bool) -> Option<f64> {
    let mut acc = Vec::new();
    for (pa, pc, gt) in items {
        if pa.len() != gt.anode_points.len() || pc.len() != gt.cathode_points.len() {
            continue;
        }
        if gt.anode_points.len() != gt.cathode_points.len() + 1 {
            continue;
        }
        let ax = gt.stack_axis;
        let mut e = 0.0;
        for j in 0..pc.len() {
            let o_hat = (across(ax, pc[j]) - across(ax, pa[j])).abs() + (across(ax, pc[j]) - across(ax, pa[j + 1])).abs();
            let (ga, gc) = (&gt.anode_points, &gt.cathode_points);
            let o = (across(ax, gc[j]) - across(ax, ga[j])).abs() + (across(ax, gc[j]) - across(ax, ga[j + 1])).abs();
            e += (o_hat - o).abs();
        }
        e /= pc.len() as f64;
        if paper {
            e /= gt.width as f64 * gt.height as f64;
        }
        acc.push(e);
    }
    if acc.is_empty() {
        None
    } else {
        Some(acc.iter().sum::<f64>() / acc.len() as f64)
    }
}

/// `(PA, mIoU, mDice, BER, MAE)` from explicit counting.
pub fn oracle_seg(pred: &[f64], gt: &[bool]) -> (f64, f64, f64, f64, f64) {
    let (mut tp, mut tn, mut fp, mut fn_) = (0.0, 0.0, 0.0, 0.0);
    let mut abs = 0.0;
    for (p, &g) in pred.iter().zip(gt) {
        let hit = *p >= 0.5;
        match (hit, g) {
            (true, true) => tp += 1.0,
            (false, false) => tn += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
        }
        abs += (p - if g { 1.0 } else { 0.0 }).abs();
    }
    let n = pred.len() as f64;
    let mean = |xs: Vec<Option<f64>>| {
        let v: Vec<f64> = xs.into_iter().flatten().collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let frac = |a: f64, b: f64| if b > 0.0 { Some(a / b) } else { None };
    let miou = mean(vec![frac(tp, tp + fp + fn_), frac(tn, tn + fp + fn_)]);
    let mdice = mean(vec![frac(2.0 * tp, 2.0 * tp + fp + fn_), frac(2.0 * tn, 2.0 * tn + fp + fn_)]);
    let ber = 1.0 - mean(vec![frac(tp, tp + fn_), frac(tn, tn + fp)]);
    ((tp + tn) / n, miou, mdice, ber, abs / n)
}

/// Naive selective scan on an `L x C` sequence with plain loops over the
/// projections and the recurrence.
pub fn oracle_scan(x: &[f64], l: usize, c: usize, p: &pbd_core::ss2d::SelectiveScanParams<f64>) -> Vec<f64> {
    let n = p.b_bias.len();
    let a = p.a.data();
    let mut h = vec![vec![0.0; n]; c];
    let mut y = vec![0.0; l * c];
    for t in 0..l {
        let xt = &x[t * c..(t + 1) * c];
        let mut bt = vec![0.0; n];
        let mut ct = vec![0.0; n];
        for k in 0..n {
            bt[k] = p.b_bias.data()[k];
            ct[k] = p.c_bias.data()[k];
            for j in 0..c {
                bt[k] += p.b_weight.data()[k * c + j] * xt[j];
                ct[k] += p.c_weight.data()[k * c + j] * xt[j];
            }
        }
        for ch in 0..c {
            let mut z = p.delta_bias.data()[ch];
            for j in 0..c {
                z += p.delta_weight.data()[ch * c + j] * xt[j];
            }
            let delta = (1.0 + z.exp()).ln();
            let mut out = p.d.data()[ch] * xt[ch];
            for k in 0..n {
                h[ch][k] = (delta * a[ch * n + k]).exp() * h[ch][k] + delta * bt[k] * xt[ch];
                out += ct[k] * h[ch][k];
            }
            y[t * c + ch] = out;
        }
    }
    y
}

/// Four-direction scan of an `H x W x C` map with one shared parameter set.
pub fn oracle_ss2d(x: &[f64], h: usize, w: usize, c: usize, p: &pbd_core::ss2d::SelectiveScanParams<f64>) -> Vec<f64> {
    let raster: Vec<usize> = (0..h * w).collect();
    let column: Vec<usize> = (0..w).flat_map(|xx| (0..h).map(move |yy| yy * w + xx)).collect();
    let orders = [
        raster.clone(),
        raster.iter().rev().copied().collect::<Vec<_>>(),
        column.clone(),
        column.iter().rev().copied().collect::<Vec<_>>(),
    ];
    let mut out = vec![0.0; h * w * c];
    for order in &orders {
        let seq: Vec<f64> = order.iter().flat_map(|&pos| x[pos * c..(pos + 1) * c].to_vec()).collect();
        let y = oracle_scan(&seq, order.len(), c, p);
        for (step, &pos) in order.iter().enumerate() {
            for ch in 0..c {
                out[pos * c + ch] += y[step * c + ch];
            }
        }
    }
    out
}

pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}
