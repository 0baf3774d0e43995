//! A deliberately small convolutional detector with manual backpropagation.
//!
//! ```text
//! image -> conv3x3(1->C) -> relu -> dropout -> conv3x3(C->C) -> relu -> dropout
//!       -> per level: cell pooling -> linear head -> [z (K), s = log sigma^2 (K), deltas (2D)]
//! ```
//!
//! Cell pooling gives each cell 5C features: the channel mean over the cell,
//! the mean weighted by the normalised x and y offsets from the cell centre,
//! the channel mean over a context window twice the stride wide, and the
//! channel maximum over the cell (peak response, independent of blob size). Dropout
//! uses inverted scaling so an inactive pass is the expectation network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GridSpec;
use crate::synth::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub channels: usize,
    pub dropout: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            dropout: 0.1,
        }
    }
}

/// Raw head outputs of one level: `width` values per cell laid out as
/// `[z.., s.., deltas..]`, cells in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct RawLevel {
    pub shape: Vec<usize>,
    pub num_classes: usize,
    pub values: Vec<f64>,
}

impl RawLevel {
    pub fn width(&self) -> usize {
        self.values.len() / self.cell_count()
    }

    pub fn cell_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn cell(&self, idx: usize) -> &[f64] {
        let w = self.width();
        &self.values[idx * w..(idx + 1) * w]
    }

    pub fn z(&self, idx: usize) -> &[f64] {
        &self.cell(idx)[..self.num_classes]
    }

    pub fn s(&self, idx: usize) -> &[f64] {
        &self.cell(idx)[self.num_classes..2 * self.num_classes]
    }

    pub fn deltas(&self, idx: usize) -> &[f64] {
        &self.cell(idx)[2 * self.num_classes..]
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    conv1_w: usize,
    conv1_b: usize,
    conv2_w: usize,
    conv2_b: usize,
    /// (weight offset, bias offset) per level
    heads: Vec<(usize, usize)>,
    total: usize,
}

impl Layout {
    fn new(channels: usize, levels: usize, features: usize, outputs: usize) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let conv1_w = take(channels * 9);
        let conv1_b = take(channels);
        let conv2_w = take(channels * channels * 9);
        let conv2_b = take(channels);
        let heads = (0..levels).map(|_| (take(outputs * features), take(outputs))).collect();
        Layout {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            heads,
            total: at,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MicroNet {
    grid: GridSpec,
    arch: ArchConfig,
    layout: Layout,
    pub(crate) params: Vec<f64>,
}

/// Everything backpropagation needs from one forward pass.
pub(crate) struct ForwardCache {
    input: Vec<f64>,
    pre1: Vec<f64>,
    h1: Vec<f64>,
    pre2: Vec<f64>,
    mask1: Option<Vec<f64>>,
    mask2: Option<Vec<f64>>,
    features: Vec<Vec<f64>>,
    /// Per level, per (cell, channel): pixel index of the cell maximum.
    argmax: Vec<Vec<usize>>,
}

struct CellWindow {
    x: (usize, usize),
    y: (usize, usize),
    ctx_x: (usize, usize),
    ctx_y: (usize, usize),
    center: (f64, f64),
}

impl MicroNet {
    pub fn new(grid: &GridSpec, arch: &ArchConfig, seed: u64) -> Result<Self> {
        grid.validate()?;
        if grid.dims != 2 {
            return Err(Error::Config("the micro detector takes 2D images".into()));
        }
        if arch.channels == 0 {
            return Err(Error::Config("channels must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&arch.dropout) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", arch.dropout)));
        }
        let c = arch.channels;
        let features = 5 * c;
        let outputs = 2 * grid.num_classes + 2 * grid.dims;
        let layout = Layout::new(c, grid.levels.len(), features, outputs);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let he1 = Normal::new(0.0, (2.0f64 / 9.0).sqrt()).expect("valid std");
        let he2 = Normal::new(0.0, (2.0 / (9.0 * c as f64)).sqrt()).expect("valid std");
        let head = Normal::new(0.0, 0.1 / (features as f64).sqrt()).expect("valid std");
        for p in &mut params[layout.conv1_w..layout.conv1_b] {
            *p = he1.sample(&mut rng);
        }
        for p in &mut params[layout.conv2_w..layout.conv2_b] {
            *p = he2.sample(&mut rng);
        }
        let k = grid.num_classes;
        for &(w, b) in &layout.heads {
            for p in &mut params[w..b] {
                *p = head.sample(&mut rng);
            }
            // sparse foreground prior; the background variance starts lower
            // so the foreground channel carries most of the learned noise
            for cls in 1..k {
                params[b + cls] = -2.0;
                params[b + k + cls] = -1.0;
            }
            params[b + k] = -3.0;
        }
        Ok(Self {
            grid: grid.clone(),
            arch: arch.clone(),
            layout,
            params,
        })
    }

    /// Rebuild from a flat parameter vector.
    pub fn from_params(grid: &GridSpec, arch: &ArchConfig, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::new(grid, arch, 0)?;
        if params.len() != net.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                net.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("checkpoint parameters".into()));
        }
        net.params = params;
        Ok(net)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn output_width(&self) -> usize {
        2 * self.grid.num_classes + 2 * self.grid.dims
    }

    /// Run the network. With `dropout_active` the masks are drawn from `seed`.
    pub fn forward(&self, image: &Image, dropout_active: bool, seed: u64) -> Result<Vec<RawLevel>> {
        Ok(self.forward_cached(image, dropout_active, seed)?.0)
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.width != self.grid.image_size[0] || image.height != self.grid.image_size[1] {
            return Err(Error::Config(format!(
                "image {}x{} does not match grid {:?}",
                image.width, image.height, self.grid.image_size
            )));
        }
        Ok(())
    }

    fn windows(&self, level: usize) -> Vec<CellWindow> {
        let (w, h) = (self.grid.image_size[0], self.grid.image_size[1]);
        let s = self.grid.levels[level].stride;
        let shape = self.grid.level_shape(level);
        let mut out = Vec::with_capacity(shape[0] * shape[1]);
        for j in 0..shape[1] {
            for i in 0..shape[0] {
                let clip = |lo: isize, hi: isize, max: usize| (lo.max(0) as usize, (hi as usize).min(max));
                let half = (s / 2) as isize;
                out.push(CellWindow {
                    x: (i * s, (i + 1) * s),
                    y: (j * s, (j + 1) * s),
                    ctx_x: clip((i * s) as isize - half, ((i + 1) * s) as isize + half, w),
                    ctx_y: clip((j * s) as isize - half, ((j + 1) * s) as isize + half, h),
                    center: ((i as f64 + 0.5) * s as f64, (j as f64 + 0.5) * s as f64),
                });
            }
        }
        out
    }

    fn dropout_masks(&self, dropout_active: bool, seed: u64) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let p = self.arch.dropout;
        if !dropout_active || p == 0.0 {
            return (None, None);
        }
        let n = self.arch.channels * self.grid.image_size[0] * self.grid.image_size[1];
        let keep = 1.0 / (1.0 - p);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || -> Vec<f64> {
            (0..n)
                .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                .collect()
        };
        let m1 = draw();
        let m2 = draw();
        (Some(m1), Some(m2))
    }

    pub(crate) fn forward_cached(
        &self,
        image: &Image,
        dropout_active: bool,
        seed: u64,
    ) -> Result<(Vec<RawLevel>, ForwardCache)> {
        self.check_image(image)?;
        let (w, h) = (image.width, image.height);
        let c = self.arch.channels;
        let lay = &self.layout;
        let p = &self.params;
        let (mask1, mask2) = self.dropout_masks(dropout_active, seed);

        let mut pre1 = vec![0.0; c * w * h];
        conv3x3_forward(
            &image.data,
            1,
            &p[lay.conv1_w..lay.conv1_b],
            &p[lay.conv1_b..lay.conv2_w],
            c,
            w,
            h,
            &mut pre1,
        );
        let h1 = activate(&pre1, mask1.as_deref());
        let mut pre2 = vec![0.0; c * w * h];
        conv3x3_forward(
            &h1,
            c,
            &p[lay.conv2_w..lay.conv2_b],
            &p[lay.conv2_b..lay.conv2_b + c],
            c,
            w,
            h,
            &mut pre2,
        );
        let h2 = activate(&pre2, mask2.as_deref());

        let k = self.grid.num_classes;
        let width = self.output_width();
        let nf = 5 * c;
        let plane = w * h;
        let mut outputs = Vec::with_capacity(self.grid.levels.len());
        let mut features = Vec::with_capacity(self.grid.levels.len());
        let mut argmax = Vec::with_capacity(self.grid.levels.len());
        for (l, &(hw, hb)) in lay.heads.iter().enumerate() {
            let stride = self.grid.levels[l].stride as f64;
            let wins = self.windows(l);
            let mut feats = vec![0.0; wins.len() * nf];
            let mut amax = vec![0usize; wins.len() * c];
            for (ci, win) in wins.iter().enumerate() {
                let f = &mut feats[ci * nf..(ci + 1) * nf];
                let n_cell = ((win.x.1 - win.x.0) * (win.y.1 - win.y.0)) as f64;
                let n_ctx = ((win.ctx_x.1 - win.ctx_x.0) * (win.ctx_y.1 - win.ctx_y.0)) as f64;
                for ch in 0..c {
                    let map = &h2[ch * plane..(ch + 1) * plane];
                    let (mut m, mut mx, mut my, mut ctx) = (0.0, 0.0, 0.0, 0.0);
                    let mut best = win.y.0 * w + win.x.0;
                    for y in win.y.0..win.y.1 {
                        let dy = (y as f64 + 0.5 - win.center.1) / stride;
                        for x in win.x.0..win.x.1 {
                            let dx = (x as f64 + 0.5 - win.center.0) / stride;
                            let v = map[y * w + x];
                            if v > map[best] {
                                best = y * w + x;
                            }
                            m += v;
                            mx += v * dx;
                            my += v * dy;
                        }
                    }
                    for y in win.ctx_y.0..win.ctx_y.1 {
                        ctx += map[y * w + win.ctx_x.0..y * w + win.ctx_x.1].iter().sum::<f64>();
                    }
                    f[ch] = m / n_cell;
                    f[c + ch] = mx / n_cell;
                    f[2 * c + ch] = my / n_cell;
                    f[3 * c + ch] = ctx / n_ctx;
                    f[4 * c + ch] = map[best];
                    amax[ci * c + ch] = best;
                }
            }
            let mut values = vec![0.0; wins.len() * width];
            for ci in 0..wins.len() {
                let f = &feats[ci * nf..(ci + 1) * nf];
                for o in 0..width {
                    let row = &p[hw + o * nf..hw + (o + 1) * nf];
                    values[ci * width + o] = p[hb + o] + row.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            outputs.push(RawLevel {
                shape: self.grid.level_shape(l),
                num_classes: k,
                values,
            });
            features.push(feats);
            argmax.push(amax);
        }
        let cache = ForwardCache {
            input: image.data.clone(),
            pre1,
            h1,
            pre2,
            mask1,
            mask2,
            features,
            argmax,
        };
        Ok((outputs, cache))
    }

    /// Parameter gradient given the gradient of the loss with respect to
    /// every raw output (same layout as [`RawLevel::values`]).
    pub(crate) fn backward(&self, cache: &ForwardCache, grad_out: &[Vec<f64>]) -> Vec<f64> {
        let (w, h) = (self.grid.image_size[0], self.grid.image_size[1]);
        let c = self.arch.channels;
        let lay = &self.layout;
        let p = &self.params;
        let width = self.output_width();
        let nf = 5 * c;
        let plane = w * h;
        let mut grad = vec![0.0; p.len()];
        let mut d_h2 = vec![0.0; c * plane];

        for (l, &(hw, hb)) in lay.heads.iter().enumerate() {
            let stride = self.grid.levels[l].stride as f64;
            let wins = self.windows(l);
            let feats = &cache.features[l];
            let g_level = &grad_out[l];
            for (ci, win) in wins.iter().enumerate() {
                let g = &g_level[ci * width..(ci + 1) * width];
                if g.iter().all(|v| *v == 0.0) {
                    continue;
                }
                let f = &feats[ci * nf..(ci + 1) * nf];
                let mut d_f = vec![0.0; nf];
                for (o, &go) in g.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    grad[hb + o] += go;
                    let row = hw + o * nf;
                    for j in 0..nf {
                        grad[row + j] += go * f[j];
                        d_f[j] += go * p[row + j];
                    }
                }
                let n_cell = ((win.x.1 - win.x.0) * (win.y.1 - win.y.0)) as f64;
                let n_ctx = ((win.ctx_x.1 - win.ctx_x.0) * (win.ctx_y.1 - win.ctx_y.0)) as f64;
                for ch in 0..c {
                    let dm = &mut d_h2[ch * plane..(ch + 1) * plane];
                    let (gm, gx, gy, gc) = (
                        d_f[ch] / n_cell,
                        d_f[c + ch] / n_cell,
                        d_f[2 * c + ch] / n_cell,
                        d_f[3 * c + ch] / n_ctx,
                    );
                    for y in win.y.0..win.y.1 {
                        let dy = (y as f64 + 0.5 - win.center.1) / stride;
                        for x in win.x.0..win.x.1 {
                            let dx = (x as f64 + 0.5 - win.center.0) / stride;
                            dm[y * w + x] += gm + gx * dx + gy * dy;
                        }
                    }
                    for y in win.ctx_y.0..win.ctx_y.1 {
                        for v in &mut dm[y * w + win.ctx_x.0..y * w + win.ctx_x.1] {
                            *v += gc;
                        }
                    }
                    dm[cache.argmax[l][ci * c + ch]] += d_f[4 * c + ch];
                }
            }
        }

        let d_pre2 = deactivate(&d_h2, &cache.pre2, cache.mask2.as_deref());
        let mut d_h1 = vec![0.0; c * plane];
        {
            let (gw, rest) = grad[lay.conv2_w..].split_at_mut(lay.conv2_b - lay.conv2_w);
            conv3x3_backward(
                &cache.h1,
                c,
                &p[lay.conv2_w..lay.conv2_b],
                c,
                w,
                h,
                &d_pre2,
                gw,
                &mut rest[..c],
                Some(&mut d_h1),
            );
        }
        let d_pre1 = deactivate(&d_h1, &cache.pre1, cache.mask1.as_deref());
        {
            let (gw, rest) = grad[lay.conv1_w..].split_at_mut(lay.conv1_b - lay.conv1_w);
            conv3x3_backward(
                &cache.input,
                1,
                &p[lay.conv1_w..lay.conv1_b],
                c,
                w,
                h,
                &d_pre1,
                gw,
                &mut rest[..c],
                None,
            );
        }
        grad
    }
}

fn activate(pre: &[f64], mask: Option<&[f64]>) -> Vec<f64> {
    match mask {
        Some(m) => pre.iter().zip(m).map(|(v, m)| v.max(0.0) * m).collect(),
        None => pre.iter().map(|v| v.max(0.0)).collect(),
    }
}

fn deactivate(d_out: &[f64], pre: &[f64], mask: Option<&[f64]>) -> Vec<f64> {
    match mask {
        Some(m) => d_out
            .iter()
            .zip(pre)
            .zip(m)
            .map(|((g, v), m)| if *v > 0.0 { g * m } else { 0.0 })
            .collect(),
        None => d_out
            .iter()
            .zip(pre)
            .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
            .collect(),
    }
}

/// Valid output range along one axis for kernel offset `k` in {0,1,2}
/// under zero padding of 1.
fn span(k: usize, n: usize) -> (usize, usize) {
    match k {
        0 => (1, n),
        1 => (0, n),
        _ => (0, n - 1),
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_forward(
    input: &[f64],
    c_in: usize,
    weights: &[f64],
    bias: &[f64],
    c_out: usize,
    w: usize,
    h: usize,
    out: &mut [f64],
) {
    let plane = w * h;
    for co in 0..c_out {
        let o = &mut out[co * plane..(co + 1) * plane];
        o.fill(bias[co]);
        for ci in 0..c_in {
            let inp = &input[ci * plane..(ci + 1) * plane];
            for ky in 0..3 {
                let (y0, y1) = span(ky, h);
                for kx in 0..3 {
                    let wt = weights[((co * c_in + ci) * 3 + ky) * 3 + kx];
                    let (x0, x1) = span(kx, w);
                    for y in y0..y1 {
                        let src = (y + ky - 1) * w + x0 + kx - 1;
                        let orow = &mut o[y * w + x0..y * w + x1];
                        let irow = &inp[src..src + x1 - x0];
                        for (a, b) in orow.iter_mut().zip(irow) {
                            *a += wt * b;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    c_in: usize,
    weights: &[f64],
    c_out: usize,
    w: usize,
    h: usize,
    d_out: &[f64],
    d_weights: &mut [f64],
    d_bias: &mut [f64],
    mut d_input: Option<&mut [f64]>,
) {
    let plane = w * h;
    for co in 0..c_out {
        let g = &d_out[co * plane..(co + 1) * plane];
        d_bias[co] += g.iter().sum::<f64>();
        for ci in 0..c_in {
            let inp = &input[ci * plane..(ci + 1) * plane];
            for ky in 0..3 {
                let (y0, y1) = span(ky, h);
                for kx in 0..3 {
                    let wi = ((co * c_in + ci) * 3 + ky) * 3 + kx;
                    let wt = weights[wi];
                    let (x0, x1) = span(kx, w);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let src = (y + ky - 1) * w + x0 + kx - 1;
                        let grow = &g[y * w + x0..y * w + x1];
                        let irow = &inp[src..src + x1 - x0];
                        acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(di) = d_input.as_deref_mut() {
                            let drow = &mut di[ci * plane + src..ci * plane + src + x1 - x0];
                            for (d, a) in drow.iter_mut().zip(grow) {
                                *d += wt * a;
                            }
                        }
                    }
                    d_weights[wi] += acc;
                }
            }
        }
    }
}
