//! Selective state-space scan and its four-direction 2-D extension.
//!
//! The recurrence per channel `c` and state `n` is
//! `h_t = exp(delta_t * A[c,n]) * h_{t-1} + delta_t * B_t[n] * x_t`,
//! `y_t = sum_n C_t[n] * h_t + D[c] * x_t`, with `h_0 = 0`.
//! `delta`, `B` and `C` are produced from the input by learned projections.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{uniform, Ctx, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanShape {
    pub channels: usize,
    pub len: usize,
    pub state: usize,
}

fn transpose<T: Copy>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for c in 0..cols {
        out.extend((0..rows).map(|r| src[r * cols + c]));
    }
    out
}

/// Sequential reference scan. `b`, `c` are `[N, L]`; when `states` is given
/// the hidden states are recorded as `[C, L, N]` for the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn scan_forward<T: Scalar>(
    shape: &ScanShape,
    x: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d: &[T],
    mut states: Option<&mut [T]>,
) -> Vec<T> {
    let ScanShape { channels, len, state: n } = *shape;
    let bt = transpose(b, n, len);
    let ct = transpose(c, n, len);
    let mut y = vec![T::zero(); channels * len];
    let mut h = vec![T::zero(); n];
    for ch in 0..channels {
        h.iter_mut().for_each(|v| *v = T::zero());
        let arow = &a[ch * n..(ch + 1) * n];
        for t in 0..len {
            let (xv, dt) = (x[ch * len + t], delta[ch * len + t]);
            let dx = dt * xv;
            let brow = &bt[t * n..(t + 1) * n];
            let crow = &ct[t * n..(t + 1) * n];
            let mut acc = T::zero();
            for k in 0..n {
                h[k] = (dt * arow[k]).exp() * h[k] + dx * brow[k];
                acc += crow[k] * h[k];
            }
            y[ch * len + t] = acc + d[ch] * xv;
            if let Some(s) = states.as_deref_mut() {
                s[(ch * len + t) * n..(ch * len + t + 1) * n].copy_from_slice(&h);
            }
        }
    }
    y
}

pub struct ScanGrads<T> {
    pub x: Vec<T>,
    pub delta: Vec<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub d: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn scan_backward<T: Scalar>(
    shape: &ScanShape,
    x: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d: &[T],
    states: &[T],
    gy: &[T],
) -> ScanGrads<T> {
    let ScanShape { channels, len, state: n } = *shape;
    let bt = transpose(b, n, len);
    let ct = transpose(c, n, len);
    let mut g = ScanGrads {
        x: vec![T::zero(); channels * len],
        delta: vec![T::zero(); channels * len],
        a: vec![T::zero(); channels * n],
        b: vec![T::zero(); n * len],
        c: vec![T::zero(); n * len],
        d: vec![T::zero(); channels],
    };
    // transposed accumulators, [L, N]
    let mut gbt = vec![T::zero(); len * n];
    let mut gct = vec![T::zero(); len * n];
    let mut gh = vec![T::zero(); n];
    for ch in 0..channels {
        gh.iter_mut().for_each(|v| *v = T::zero());
        let arow = &a[ch * n..(ch + 1) * n];
        let mut next_decay = vec![T::zero(); n];
        for t in (0..len).rev() {
            let idx = ch * len + t;
            let (xv, dt, gyv) = (x[idx], delta[idx], gy[idx]);
            g.d[ch] += gyv * xv;
            let mut gx = gyv * d[ch];
            let mut gdt = T::zero();
            let h_t = &states[idx * n..(idx + 1) * n];
            let brow = &bt[t * n..(t + 1) * n];
            let crow = &ct[t * n..(t + 1) * n];
            for k in 0..n {
                gct[t * n + k] += gyv * h_t[k];
                gh[k] = gyv * crow[k] + next_decay[k] * gh[k];
                let decay = (dt * arow[k]).exp();
                let h_prev = if t == 0 { T::zero() } else { states[(idx - 1) * n + k] };
                let g_decay = gh[k] * h_prev * decay;
                gdt += g_decay * arow[k] + gh[k] * brow[k] * xv;
                g.a[ch * n + k] += g_decay * dt;
                gbt[t * n + k] += gh[k] * dt * xv;
                gx += gh[k] * dt * brow[k];
                next_decay[k] = decay;
            }
            g.x[idx] += gx;
            g.delta[idx] += gdt;
        }
    }
    g.b = transpose(&gbt, len, n);
    g.c = transpose(&gct, len, n);
    g
}

/// Chunked scan: each block is scanned from a zero state while tracking the
/// cumulative decay, then blocks are stitched with the carried-in state.
/// Equivalent to [`scan_forward`] up to rounding.
#[allow(clippy::too_many_arguments)]
pub fn scan_forward_blocked<T: Scalar>(
    shape: &ScanShape,
    x: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d: &[T],
    block: usize,
) -> Vec<T> {
    let ScanShape { channels, len, state: n } = *shape;
    let block = block.max(1);
    let bt = transpose(b, n, len);
    let ct = transpose(c, n, len);
    let mut y = vec![T::zero(); channels * len];
    let mut local = vec![T::zero(); block * n];
    let mut decay = vec![T::zero(); block * n];
    for ch in 0..channels {
        let arow = &a[ch * n..(ch + 1) * n];
        let mut carry = vec![T::zero(); n];
        let mut start = 0;
        while start < len {
            let end = (start + block).min(len);
            for t in start..end {
                let j = t - start;
                let (xv, dt) = (x[ch * len + t], delta[ch * len + t]);
                for k in 0..n {
                    let dk = (dt * arow[k]).exp();
                    let (prev_h, prev_p) = if j == 0 {
                        (T::zero(), T::one())
                    } else {
                        (local[(j - 1) * n + k], decay[(j - 1) * n + k])
                    };
                    local[j * n + k] = dk * prev_h + dt * bt[t * n + k] * xv;
                    decay[j * n + k] = dk * prev_p;
                }
            }
            for t in start..end {
                let j = t - start;
                let mut acc = T::zero();
                for k in 0..n {
                    acc += ct[t * n + k] * (local[j * n + k] + decay[j * n + k] * carry[k]);
                }
                y[ch * len + t] = acc + d[ch] * x[ch * len + t];
            }
            let j = end - start - 1;
            for k in 0..n {
                carry[k] = local[j * n + k] + decay[j * n + k] * carry[k];
            }
            start = end;
        }
    }
    y
}

/// Plain-value parameters of one selective scan over `C` channels with
/// state size `N`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveScanParams<T> {
    /// `[C, N]`, strictly negative.
    pub a: Tensor<T>,
    /// `[C]` skip gain.
    pub d: Tensor<T>,
    /// `[C, C]` and `[C]`: `delta = softplus(W x + b)`.
    pub delta_weight: Tensor<T>,
    pub delta_bias: Tensor<T>,
    /// `[N, C]` and `[N]`: `B = W x + b`.
    pub b_weight: Tensor<T>,
    pub b_bias: Tensor<T>,
    /// `[N, C]` and `[N]`: `C = W x + b`.
    pub c_weight: Tensor<T>,
    pub c_bias: Tensor<T>,
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl<T: Scalar> SelectiveScanParams<T> {
    /// `A[c, n] = -(n + 1)`, `D = 1`, step-size bias drawn log-uniformly in
    /// `[1e-3, 1e-1]`, projections uniform in `±1/sqrt(C)`.
    pub fn init<R: Rng>(channels: usize, state: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (channels as f64).sqrt();
        SelectiveScanParams {
            a: Tensor::from_fn(&[channels, state], |i| T::lit(-((i % state) as f64 + 1.0))),
            d: Tensor::full(&[channels], T::one()),
            delta_weight: uniform(rng, &[channels, channels], bound),
            delta_bias: Tensor::from_fn(&[channels], |_| {
                let u: f64 = rng.random_range(0.0..1.0);
                let dt = (1e-3f64.ln() + u * (1e-1f64.ln() - 1e-3f64.ln())).exp();
                T::lit(inverse_softplus(dt))
            }),
            b_weight: uniform(rng, &[state, channels], bound),
            b_bias: Tensor::zeros(&[state]),
            c_weight: uniform(rng, &[state, channels], bound),
            c_bias: Tensor::zeros(&[state]),
        }
    }

    pub fn channels(&self) -> usize {
        self.d.len()
    }

    pub fn state_dim(&self) -> usize {
        self.b_bias.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (c, n) = (self.channels(), self.state_dim());
        self.a.ensure_shape(&[c, n])?;
        self.delta_weight.ensure_shape(&[c, c])?;
        self.delta_bias.ensure_shape(&[c])?;
        self.b_weight.ensure_shape(&[n, c])?;
        self.c_weight.ensure_shape(&[n, c])?;
        self.c_bias.ensure_shape(&[n])?;
        if self.a.data().iter().any(|&v| !(v < T::zero())) {
            return Err(Error::Config("state matrix A must be strictly negative".into()));
        }
        Ok(())
    }

    fn constants(&self, g: &mut Graph<T>) -> ScanVars {
        ScanVars {
            a: g.constant(self.a.clone()),
            d: g.constant(self.d.clone()),
            delta_weight: g.constant(self.delta_weight.clone()),
            delta_bias: g.constant(self.delta_bias.clone()),
            b_weight: g.constant(self.b_weight.clone()),
            b_bias: g.constant(self.b_bias.clone()),
            c_weight: g.constant(self.c_weight.clone()),
            c_bias: g.constant(self.c_bias.clone()),
        }
    }
}

/// Tape handles for one scan's parameters.
#[derive(Clone, Copy, Debug)]
pub struct ScanVars {
    pub a: Var,
    pub d: Var,
    pub delta_weight: Var,
    pub delta_bias: Var,
    pub b_weight: Var,
    pub b_bias: Var,
    pub c_weight: Var,
    pub c_bias: Var,
}

/// Projections plus recurrence on a `[C, L]` sequence.
pub fn scan_graph<T: Scalar>(g: &mut Graph<T>, x: Var, p: &ScanVars) -> Result<Var> {
    let dl = g.matmul(p.delta_weight, x);
    let dl = g.add_channel_bias(dl, p.delta_bias);
    let delta = g.unary(dl, crate::autodiff::Unary::Softplus);
    let b = g.matmul(p.b_weight, x);
    let b = g.add_channel_bias(b, p.b_bias);
    let c = g.matmul(p.c_weight, x);
    let c = g.add_channel_bias(c, p.c_bias);
    g.selective_scan(x, delta, p.a, b, c, p.d)
}

/// Selective scan of an `L x C` sequence.
pub fn selective_scan_1d<T: Scalar>(x: &Tensor<T>, params: &SelectiveScanParams<T>) -> Result<Tensor<T>> {
    params.validate()?;
    let (l, c) = match *x.shape() {
        [l, c] if c == params.channels() => (l, c),
        _ => return Err(Error::shape(&[x.shape().first().copied().unwrap_or(0), params.channels()], x.shape())),
    };
    if l == 0 {
        return Err(Error::EmptyInput("scan sequence"));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("scan input"));
    }
    let mut g = Graph::new();
    let xs = g.constant(Tensor::from_vec(&[c, l], transpose(x.data(), l, c))?);
    let vars = params.constants(&mut g);
    let y = scan_graph(&mut g, xs, &vars)?;
    Tensor::from_vec(&[l, c], transpose(g.value(y).data(), c, l))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScanDirection {
    RowForward,
    RowBackward,
    ColForward,
    ColBackward,
}

impl ScanDirection {
    /// Fixed merge order.
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::RowForward,
        ScanDirection::RowBackward,
        ScanDirection::ColForward,
        ScanDirection::ColBackward,
    ];
}

/// Flatten order of an `H x W` grid for one direction, with its inverse.
#[derive(Clone, Debug)]
pub struct ScanArrangement {
    pub direction: ScanDirection,
    pub height: usize,
    pub width: usize,
    /// `flatten[step]` = row-major grid position visited at `step`.
    pub flatten: Arc<[usize]>,
    /// `inverse[position]` = step at which `position` is visited.
    pub inverse: Arc<[usize]>,
}

impl ScanArrangement {
    pub fn new(direction: ScanDirection, height: usize, width: usize) -> Self {
        let raster: Vec<usize> = (0..height * width).collect();
        let column: Vec<usize> = (0..width).flat_map(|x| (0..height).map(move |y| y * width + x)).collect();
        let flatten: Vec<usize> = match direction {
            ScanDirection::RowForward => raster,
            ScanDirection::RowBackward => raster.into_iter().rev().collect(),
            ScanDirection::ColForward => column,
            ScanDirection::ColBackward => column.into_iter().rev().collect(),
        };
        let inverse = invert_permutation(&flatten);
        ScanArrangement {
            direction,
            height,
            width,
            flatten: flatten.into(),
            inverse: inverse.into(),
        }
    }

    pub fn all(height: usize, width: usize) -> [ScanArrangement; 4] {
        ScanDirection::ALL.map(|d| ScanArrangement::new(d, height, width))
    }
}

pub(crate) fn invert_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

/// Four-direction scan of a `[C, H, W]` tape value. `vars` holds either one
/// shared parameter set or one per direction in [`ScanDirection::ALL`] order.
pub fn ss2d_graph<T: Scalar>(g: &mut Graph<T>, x: Var, vars: &[ScanVars]) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (c, h, w) = match *shape {
        [c, h, w] if h * w >= 1 => (c, h, w),
        _ => return Err(Error::shape(&[0, 1, 1], &shape)),
    };
    if vars.len() != 1 && vars.len() != 4 {
        return Err(Error::Config(format!("ss2d needs 1 or 4 parameter sets, got {}", vars.len())));
    }
    let mut total: Option<Var> = None;
    for (k, arr) in ScanArrangement::all(h, w).iter().enumerate() {
        let p = &vars[if vars.len() == 1 { 0 } else { k }];
        let seq = g.gather(x, arr.flatten.clone());
        let y = scan_graph(g, seq, p)?;
        let back = g.gather(y, arr.inverse.clone());
        total = Some(match total {
            None => back,
            Some(t) => g.add(t, back),
        });
    }
    Ok(g.reshape(total.unwrap(), &[c, h, w]))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Ss2dParams<T> {
    Shared(SelectiveScanParams<T>),
    PerDirection(Box<[SelectiveScanParams<T>; 4]>),
}

impl<T: Scalar> Ss2dParams<T> {
    pub fn init<R: Rng>(channels: usize, state: usize, share_params: bool, rng: &mut R) -> Self {
        if share_params {
            Ss2dParams::Shared(SelectiveScanParams::init(channels, state, rng))
        } else {
            Ss2dParams::PerDirection(Box::new(std::array::from_fn(|_| SelectiveScanParams::init(channels, state, rng))))
        }
    }

    fn sets(&self) -> &[SelectiveScanParams<T>] {
        match self {
            Ss2dParams::Shared(p) => std::slice::from_ref(p),
            Ss2dParams::PerDirection(ps) => &ps[..],
        }
    }
}

/// Four-direction selective scan of an `H x W x C` feature map, merged by sum.
pub fn ss2d<T: Scalar>(feature: &Tensor<T>, params: &Ss2dParams<T>) -> Result<Tensor<T>> {
    let (h, w, c) = match *feature.shape() {
        [h, w, c] if h * w >= 1 => (h, w, c),
        _ => return Err(Error::shape(&[1, 1, 0], feature.shape())),
    };
    if !feature.all_finite() {
        return Err(Error::NonFinite("ss2d input"));
    }
    let mut g = Graph::new();
    let mut vars = Vec::new();
    for p in params.sets() {
        p.validate()?;
        if p.channels() != c {
            return Err(Error::shape(&[h, w, p.channels()], feature.shape()));
        }
        vars.push(p.constants(&mut g));
    }
    let chw = transpose(feature.data(), h * w, c);
    let x = g.constant(Tensor::from_vec(&[c, h, w], chw)?);
    let y = ss2d_graph(&mut g, x, &vars)?;
    Tensor::from_vec(&[h, w, c], transpose(g.value(y).data(), c, h * w))
}

/// Trainable selective scan; `A` is stored as `log(-A)` so it stays negative.
#[derive(Clone, Debug)]
pub struct SelectiveScan {
    pub a_log: ParamId,
    pub d: ParamId,
    pub delta_weight: ParamId,
    pub delta_bias: ParamId,
    pub b_weight: ParamId,
    pub b_bias: ParamId,
    pub c_weight: ParamId,
    pub c_bias: ParamId,
}

impl SelectiveScan {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, channels: usize, state: usize, rng: &mut R) -> Self {
        let p = SelectiveScanParams::<T>::init(channels, state, rng);
        SelectiveScan {
            a_log: store.add(format!("{name}.a_log"), p.a.map(|v| (-v).ln())),
            d: store.add(format!("{name}.d"), p.d),
            delta_weight: store.add(format!("{name}.delta_weight"), p.delta_weight),
            delta_bias: store.add(format!("{name}.delta_bias"), p.delta_bias),
            b_weight: store.add(format!("{name}.b_weight"), p.b_weight),
            b_bias: store.add(format!("{name}.b_bias"), p.b_bias),
            c_weight: store.add(format!("{name}.c_weight"), p.c_weight),
            c_bias: store.add(format!("{name}.c_bias"), p.c_bias),
        }
    }

    pub fn bind<T: Scalar>(&self, ctx: &mut Ctx<'_, T>) -> ScanVars {
        let a_log = ctx.p(self.a_log);
        let e = ctx.g.unary(a_log, crate::autodiff::Unary::Exp);
        let a = ctx.g.scale(e, -T::one());
        ScanVars {
            a,
            d: ctx.p(self.d),
            delta_weight: ctx.p(self.delta_weight),
            delta_bias: ctx.p(self.delta_bias),
            b_weight: ctx.p(self.b_weight),
            b_bias: ctx.p(self.b_bias),
            c_weight: ctx.p(self.c_weight),
            c_bias: ctx.p(self.c_bias),
        }
    }

    /// Current values as plain parameters.
    pub fn params<T: Scalar>(&self, store: &ParamStore<T>) -> SelectiveScanParams<T> {
        SelectiveScanParams {
            a: store.get(self.a_log).map(|v| -v.exp()),
            d: store.get(self.d).clone(),
            delta_weight: store.get(self.delta_weight).clone(),
            delta_bias: store.get(self.delta_bias).clone(),
            b_weight: store.get(self.b_weight).clone(),
            b_bias: store.get(self.b_bias).clone(),
            c_weight: store.get(self.c_weight).clone(),
            c_bias: store.get(self.c_bias).clone(),
        }
    }
}

/// Trainable four-direction scan over `[C, H, W]` features.
#[derive(Clone, Debug)]
pub struct Ss2d {
    pub scans: Vec<SelectiveScan>,
}

impl Ss2d {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, channels: usize, state: usize, share_params: bool, rng: &mut R) -> Self {
        let n = if share_params { 1 } else { 4 };
        let scans = (0..n)
            .map(|k| SelectiveScan::new(store, &format!("{name}.dir{k}"), channels, state, rng))
            .collect();
        Ss2d { scans }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let vars: Vec<ScanVars> = self.scans.iter().map(|s| s.bind(ctx)).collect();
        ss2d_graph(&mut ctx.g, x, &vars)
    }
}
