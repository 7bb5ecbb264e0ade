use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Classifier, ClassifierConfig, DuqConfig};
use crate::linalg::{axpy, dot};
use crate::{Error, Result, RgbImage};

/// Flat gradient, laid out like [`Classifier::params`].
pub type Gradient = Vec<f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct ConvShape {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    weight: usize,
    bias: usize,
}

impl ConvShape {
    fn pooled(&self) -> (usize, usize) {
        (self.h / 2, self.w / 2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Shapes {
    input: usize,
    convs: Vec<ConvShape>,
    flat: usize,
    width: usize,
    classes: usize,
    dense_w: usize,
    dense_b: usize,
    head_w: usize,
    head_b: usize,
    duq_m: Option<usize>,
}

impl Shapes {
    pub(crate) fn new(config: &ClassifierConfig, duq: Option<&DuqConfig>) -> Self {
        let layout = Classifier::layout_for(config, duq);
        let offset = |name: &str| layout.iter().find(|b| b.name == name).map_or(0, |b| b.offset);
        let mut convs = Vec::new();
        let (mut cin, mut h, mut w) = (config.channels, config.height, config.width);
        for (i, &cout) in config.conv_channels.iter().enumerate() {
            convs.push(ConvShape {
                cin,
                cout,
                h,
                w,
                weight: offset(&format!("conv{i}.weight")),
                bias: offset(&format!("conv{i}.bias")),
            });
            cin = cout;
            h /= 2;
            w /= 2;
        }
        Self {
            input: config.input_len(),
            convs,
            flat: cin * h * w,
            width: config.dense_width,
            classes: config.classes,
            dense_w: offset("dense.weight"),
            dense_b: offset("dense.bias"),
            head_w: if duq.is_some() { offset("duq.weight") } else { offset("output.weight") },
            head_b: offset("output.bias"),
            duq_m: duq.map(|d| d.embedding),
        }
    }

    fn head_out(&self) -> usize {
        self.classes * self.duq_m.unwrap_or(1)
    }
}

/// Reusable activation and gradient buffers for one sample.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub(crate) input: Vec<f64>,
    conv: Vec<Vec<f64>>,
    pooled: Vec<Vec<f64>>,
    pool_idx: Vec<Vec<u32>>,
    /// Feature vector (post-ReLU dense activations).
    pub(crate) hidden: Vec<f64>,
    pub(crate) dropped: Vec<f64>,
    pub(crate) mask: Vec<f64>,
    /// Logits for the softmax head, stacked embeddings `W_c f` for DUQ.
    pub(crate) out: Vec<f64>,
    pub(crate) g_out: Vec<f64>,
    g_hidden: Vec<f64>,
    g_flat: Vec<f64>,
    g_pooled: Vec<Vec<f64>>,
    g_conv: Vec<Vec<f64>>,
}

impl Workspace {
    pub(crate) fn new(s: &Shapes) -> Self {
        let conv: Vec<Vec<f64>> = s.convs.iter().map(|c| vec![0.0; c.cout * c.h * c.w]).collect();
        let pooled: Vec<Vec<f64>> = s
            .convs
            .iter()
            .map(|c| {
                let (ph, pw) = c.pooled();
                vec![0.0; c.cout * ph * pw]
            })
            .collect();
        Self {
            input: vec![0.0; s.input],
            pool_idx: pooled.iter().map(|p| vec![0u32; p.len()]).collect(),
            g_conv: conv.clone(),
            g_pooled: pooled.clone(),
            conv,
            pooled,
            hidden: vec![0.0; s.width],
            dropped: vec![0.0; s.width],
            mask: vec![1.0; s.width],
            out: vec![0.0; s.head_out()],
            g_out: vec![0.0; s.head_out()],
            g_hidden: vec![0.0; s.width],
            g_flat: vec![0.0; s.flat],
        }
    }

    pub fn features(&self) -> &[f64] {
        &self.hidden
    }

    pub fn outputs(&self) -> &[f64] {
        &self.out
    }
}

/// Features and head outputs of one deterministic forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub features: Vec<f64>,
    /// Logits (softmax head) or `W_c f` stacked class-major (DUQ head).
    pub logits: Vec<f64>,
}

/// Maps bytes to `v/255 - 0.5`.
pub fn encode_input(image: &RgbImage, out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(image.data()) {
        *o = f64::from(v) / 255.0 - 0.5;
    }
}

fn conv_forward(inp: &[f64], c: &ConvShape, params: &[f64], out: &mut [f64]) {
    let (h, w) = (c.h, c.w);
    let hw = h * w;
    for co in 0..c.cout {
        let plane = &mut out[co * hw..(co + 1) * hw];
        plane.fill(params[c.bias + co]);
        for ci in 0..c.cin {
            let src = &inp[ci * hw..(ci + 1) * hw];
            let wbase = c.weight + (co * c.cin + ci) * 9;
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = (usize::from(dy < 0), if dy > 0 { h - 1 } else { h });
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = (usize::from(dx < 0), if dx > 0 { w - 1 } else { w });
                    let wv = params[wbase + ky * 3 + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let srow = &src[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
                        axpy(wv, srow, &mut plane[y * w + x0..y * w + x1]);
                    }
                }
            }
        }
    }
}

/// Accumulates weight/bias gradients; writes the input gradient when given.
fn conv_backward(
    inp: &[f64],
    c: &ConvShape,
    params: &[f64],
    g_out: &[f64],
    grad: &mut [f64],
    mut g_in: Option<&mut [f64]>,
) {
    let (h, w) = (c.h, c.w);
    let hw = h * w;
    if let Some(g) = g_in.as_deref_mut() {
        g.fill(0.0);
    }
    for co in 0..c.cout {
        let gplane = &g_out[co * hw..(co + 1) * hw];
        grad[c.bias + co] += gplane.iter().sum::<f64>();
        for ci in 0..c.cin {
            let src = &inp[ci * hw..(ci + 1) * hw];
            let wbase = c.weight + (co * c.cin + ci) * 9;
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = (usize::from(dy < 0), if dy > 0 { h - 1 } else { h });
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = (usize::from(dx < 0), if dx > 0 { w - 1 } else { w });
                    let wv = params[wbase + ky * 3 + kx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = sy * w + (x0 as isize + dx) as usize;
                        let s1 = sy * w + (x1 as isize + dx) as usize;
                        let grow = &gplane[y * w + x0..y * w + x1];
                        acc += dot(grow, &src[s0..s1]);
                        if let Some(g) = g_in.as_deref_mut() {
                            axpy(wv, grow, &mut g[ci * hw + s0..ci * hw + s1]);
                        }
                    }
                    grad[wbase + ky * 3 + kx] += acc;
                }
            }
        }
    }
}

fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn maxpool(inp: &[f64], c: &ConvShape, out: &mut [f64], idx: &mut [u32]) {
    let (ph, pw) = c.pooled();
    let w = c.w;
    for ch in 0..c.cout {
        let base = ch * c.h * w;
        for y in 0..ph {
            for x in 0..pw {
                let mut best = base + 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * y + dy) * w + 2 * x + dx;
                    if inp[j] > inp[best] {
                        best = j;
                    }
                }
                let o = ch * ph * pw + y * pw + x;
                out[o] = inp[best];
                idx[o] = best as u32;
            }
        }
    }
}

impl Classifier {
    /// Runs the convolutional trunk and the feature layer on `ws.input`.
    pub(crate) fn trunk_forward(&self, ws: &mut Workspace) {
        let s = &self.shapes;
        let p = &self.params;
        for (i, c) in s.convs.iter().enumerate() {
            let (before, after) = ws.conv.split_at_mut(i);
            let _ = before;
            let out = &mut after[0];
            if i == 0 {
                conv_forward(&ws.input, c, p, out);
            } else {
                conv_forward(&ws.pooled[i - 1], c, p, out);
            }
            relu(out);
            maxpool(out, c, &mut ws.pooled[i], &mut ws.pool_idx[i]);
        }
        let flat: &[f64] = match ws.pooled.last() {
            Some(v) => v,
            None => &ws.input,
        };
        for r in 0..s.width {
            let row = &p[s.dense_w + r * s.flat..s.dense_w + (r + 1) * s.flat];
            ws.hidden[r] = (dot(row, flat) + p[s.dense_b + r]).max(0.0);
        }
    }

    /// Output layer of the softmax head. `ws.mask` holds inverted-dropout
    /// scale factors (all ones when dropout is off).
    pub(crate) fn softmax_head_forward(&self, ws: &mut Workspace) {
        let s = &self.shapes;
        let p = &self.params;
        for ((d, h), m) in ws.dropped.iter_mut().zip(&ws.hidden).zip(&ws.mask) {
            *d = h * m;
        }
        for c in 0..s.classes {
            let row = &p[s.head_w + c * s.width..s.head_w + (c + 1) * s.width];
            ws.out[c] = dot(row, &ws.dropped) + p[s.head_b + c];
        }
    }

    /// Per-class embeddings `W_c f` of the DUQ head.
    pub(crate) fn duq_head_forward(&self, ws: &mut Workspace) {
        let s = &self.shapes;
        let p = &self.params;
        for r in 0..ws.out.len() {
            let row = &p[s.head_w + r * s.width..s.head_w + (r + 1) * s.width];
            ws.out[r] = dot(row, &ws.hidden);
        }
    }

    /// Backpropagates `ws.g_out` through the head and trunk, accumulating
    /// into `grad`.
    pub(crate) fn backward(&self, ws: &mut Workspace, grad: &mut [f64]) {
        let s = &self.shapes;
        let p = &self.params;
        ws.g_hidden.fill(0.0);
        if self.duq.is_some() {
            for r in 0..ws.out.len() {
                let g = ws.g_out[r];
                let row = s.head_w + r * s.width;
                axpy(g, &ws.hidden, &mut grad[row..row + s.width]);
                axpy(g, &p[row..row + s.width], &mut ws.g_hidden);
            }
        } else {
            for c in 0..s.classes {
                let g = ws.g_out[c];
                grad[s.head_b + c] += g;
                let row = s.head_w + c * s.width;
                axpy(g, &ws.dropped, &mut grad[row..row + s.width]);
                axpy(g, &p[row..row + s.width], &mut ws.g_hidden);
            }
            for (g, m) in ws.g_hidden.iter_mut().zip(&ws.mask) {
                *g *= m;
            }
        }
        for (g, h) in ws.g_hidden.iter_mut().zip(&ws.hidden) {
            if *h <= 0.0 {
                *g = 0.0;
            }
        }

        let flat: &[f64] = match ws.pooled.last() {
            Some(v) => v,
            None => &ws.input,
        };
        ws.g_flat.fill(0.0);
        for r in 0..s.width {
            let g = ws.g_hidden[r];
            if g == 0.0 {
                continue;
            }
            grad[s.dense_b + r] += g;
            let row = s.dense_w + r * s.flat;
            axpy(g, flat, &mut grad[row..row + s.flat]);
            axpy(g, &p[row..row + s.flat], &mut ws.g_flat);
        }
        if s.convs.is_empty() {
            return;
        }
        let last = s.convs.len() - 1;
        ws.g_pooled[last].copy_from_slice(&ws.g_flat);
        for i in (0..s.convs.len()).rev() {
            let c = &s.convs[i];
            let gc = &mut ws.g_conv[i];
            gc.fill(0.0);
            for (&j, &g) in ws.pool_idx[i].iter().zip(&ws.g_pooled[i]) {
                gc[j as usize] += g;
            }
            for (g, a) in gc.iter_mut().zip(&ws.conv[i]) {
                if *a <= 0.0 {
                    *g = 0.0;
                }
            }
            if i == 0 {
                conv_backward(&ws.input, c, p, &ws.g_conv[0], grad, None);
            } else {
                let (lower, upper) = ws.g_pooled.split_at_mut(i);
                let _ = upper;
                conv_backward(&ws.pooled[i - 1], c, p, &ws.g_conv[i], grad, Some(&mut lower[i - 1]));
            }
        }
    }

    pub(crate) fn check_image(&self, image: &RgbImage) -> Result<()> {
        let c = &self.config;
        if image.height() != c.height || image.width() != c.width || c.channels != RgbImage::CHANNELS {
            return Err(Error::Validation(format!(
                "image is {}x{}x3, model expects {}x{}x{}",
                image.height(),
                image.width(),
                c.height,
                c.width,
                c.channels
            )));
        }
        Ok(())
    }

    /// Loads `image` into the workspace and runs the trunk.
    pub fn compute_features(&self, image: &RgbImage, ws: &mut Workspace) -> Result<()> {
        self.check_image(image)?;
        encode_input(image, &mut ws.input);
        self.trunk_forward(ws);
        Ok(())
    }

    /// Deterministic forward pass with dropout disabled.
    pub fn forward(&self, image: &RgbImage) -> Result<Forward> {
        let mut ws = self.workspace();
        self.compute_features(image, &mut ws)?;
        self.head_eval(&mut ws);
        Ok(Forward { features: ws.hidden.clone(), logits: ws.out.clone() })
    }

    /// Head outputs for the features already in `ws`, dropout off.
    pub(crate) fn head_eval(&self, ws: &mut Workspace) {
        if self.duq.is_some() {
            self.duq_head_forward(ws);
        } else {
            ws.mask.fill(1.0);
            self.softmax_head_forward(ws);
        }
    }

    /// Training loss of one example on a raw input tensor (layout of
    /// [`encode_input`]), accumulating its gradient into `grad`.
    ///
    /// Softmax head: cross-entropy, with `mask` as inverted-dropout factors
    /// (`None` = dropout off). DUQ head: sum over classes of binary
    /// cross-entropy between kernel values and the one-hot target.
    pub fn example_loss_and_grad(
        &self,
        input: &[f64],
        label: usize,
        mask: Option<&[f64]>,
        ws: &mut Workspace,
        grad: &mut [f64],
    ) -> f64 {
        ws.input.copy_from_slice(input);
        self.trunk_forward(ws);
        let loss = self.head_loss(label, mask, ws);
        self.backward(ws, grad);
        loss
    }

    /// Head forward plus loss and `ws.g_out` for the trunk already in `ws`.
    pub(crate) fn head_loss(&self, label: usize, mask: Option<&[f64]>, ws: &mut Workspace) -> f64 {
        match &self.duq {
            None => {
                match mask {
                    Some(m) => ws.mask.copy_from_slice(m),
                    None => ws.mask.fill(1.0),
                }
                self.softmax_head_forward(ws);
                let probs = super::softmax(&ws.out);
                for (g, (c, p)) in ws.g_out.iter_mut().zip(probs.iter().enumerate()) {
                    *g = p - if c == label { 1.0 } else { 0.0 };
                }
                let max = ws.out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + libm::log(ws.out.iter().map(|v| libm::exp(v - max)).sum::<f64>());
                lse - ws.out[label]
            }
            Some(state) => {
                self.duq_head_forward(ws);
                let m = state.config.embedding;
                let denom = 2.0 * m as f64 * state.config.length_scale * state.config.length_scale;
                let mut loss = 0.0;
                for c in 0..self.config.classes {
                    let mut dist = 0.0;
                    for j in 0..m {
                        let e = state.sums[c * m + j] / state.counts[c];
                        let d = ws.out[c * m + j] - e;
                        dist += d * d;
                    }
                    let log_k = -dist / denom;
                    let k = libm::exp(log_k);
                    let one_minus = (1.0 - k).max(1e-12);
                    // dL/dD for L = -[y log K + (1-y) log(1-K)]
                    let g_dist = if c == label {
                        loss -= log_k;
                        1.0 / denom
                    } else {
                        loss -= libm::log(one_minus);
                        -(k / one_minus) / denom
                    };
                    for j in 0..m {
                        let e = state.sums[c * m + j] / state.counts[c];
                        ws.g_out[c * m + j] = 2.0 * g_dist * (ws.out[c * m + j] - e);
                    }
                }
                loss
            }
        }
    }
}
