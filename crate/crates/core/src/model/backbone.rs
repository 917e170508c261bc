//! Per-pixel multilayer perceptron backbone.
//!
//! Each pixel's input is its channel vector, optionally concatenated with the
//! channel vectors of a `k x k` neighborhood (edge pixels replicate the
//! border). Hidden layers use `tanh`; the output layer is affine and produces
//! a `D`-dimensional pixel embedding.

use std::hash::{DefaultHasher, Hasher};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::{FeatureGrid, Grid, Image};

/// One affine layer, `out = W in + b` with `W` row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub out_dim: usize,
    pub in_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            out_dim,
            in_dim,
            weights: vec![0.0; out_dim * in_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn apply(&self, input: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.in_dim).zip(&self.bias))
        {
            *o = b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        }
    }
}

/// Trainable backbone parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    in_channels: usize,
    window: usize,
    layers: Vec<Dense>,
}

/// Gradient buffers with the same layout as [`BackboneParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|g| g == 0.0)
    }
}

impl BackboneParams {
    pub fn new(in_channels: usize, window: usize, layers: Vec<Dense>) -> Result<Self> {
        if in_channels == 0 {
            return Err(Error::Shape("backbone needs at least one input channel".into()));
        }
        if window == 0 || window.is_multiple_of(2) {
            return Err(Error::Shape(format!("window size {window} must be odd")));
        }
        if layers.is_empty() {
            return Err(Error::Shape("backbone needs at least one layer".into()));
        }
        let mut expected = in_channels * window * window;
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim != expected || l.out_dim == 0 {
                return Err(Error::Shape(format!(
                    "layer {i} is {}x{}, expected input dimension {expected}",
                    l.out_dim, l.in_dim
                )));
            }
            if l.weights.len() != l.out_dim * l.in_dim || l.bias.len() != l.out_dim {
                return Err(Error::Shape(format!("layer {i} buffers do not match its shape")));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("layer {i} has non-finite parameters")));
            }
            expected = l.out_dim;
        }
        Ok(Self {
            in_channels,
            window,
            layers,
        })
    }

    /// Random initialization: weights `N(0, 1/fan_in)`, zero biases.
    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        window: usize,
        hidden: &[usize],
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![in_channels * window * window];
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = 1.0 / (fan_in as f64).sqrt();
                let mut layer = Dense::zeros(fan_out, fan_in);
                for v in &mut layer.weights {
                    let z: f64 = StandardNormal.sample(rng);
                    *v = scale * z;
                }
                layer
            })
            .collect();
        Self::new(in_channels, window, layers)
    }

    /// Single affine layer copying the input channels into the output,
    /// truncated or zero-padded to `out_dim`.
    pub fn identity(in_channels: usize, out_dim: usize) -> Self {
        let mut layer = Dense::zeros(out_dim, in_channels);
        for i in 0..out_dim.min(in_channels) {
            layer.weights[i * in_channels + i] = 1.0;
        }
        Self::new(in_channels, 1, vec![layer]).expect("identity layer is well-formed")
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.out_dim, l.in_dim))
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Hash of the exact parameter bits, used to tag pseudo-label provenance.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        h.write_usize(self.in_channels);
        h.write_usize(self.window);
        for l in &self.layers {
            h.write_usize(l.out_dim);
            h.write_usize(l.in_dim);
            for v in l.weights.iter().chain(&l.bias) {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    pub(crate) fn check_image(&self, image: &Image) -> Result<()> {
        if image.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "image has {} channels, backbone expects {}",
                image.channels(),
                self.in_channels
            )));
        }
        if !image.is_finite() {
            return Err(Error::Numeric("image has non-finite values".into()));
        }
        Ok(())
    }

    /// Writes the backbone input vector of pixel `(n, m)` into `out`.
    pub(crate) fn gather_input(&self, image: &Image, n: usize, m: usize, out: &mut [f64]) {
        let c = self.in_channels;
        if self.window == 1 {
            out.copy_from_slice(image.pixel(n, m));
            return;
        }
        let r = (self.window / 2) as isize;
        let (h, w) = (image.height() as isize, image.width() as isize);
        let mut k = 0;
        for dn in -r..=r {
            let nn = (n as isize + dn).clamp(0, h - 1) as usize;
            for dm in -r..=r {
                let mm = (m as isize + dm).clamp(0, w - 1) as usize;
                out[k * c..(k + 1) * c].copy_from_slice(image.pixel(nn, mm));
                k += 1;
            }
        }
    }

    /// Scratch buffers for a single pixel's forward pass: `acts[0]` is the
    /// input, `acts[l + 1]` the (activated) output of layer `l`.
    pub(crate) fn scratch(&self) -> Vec<Vec<f64>> {
        let mut acts = vec![vec![0.0; self.input_dim()]];
        acts.extend(self.layers.iter().map(|l| vec![0.0; l.out_dim]));
        acts
    }

    /// Runs the MLP on `acts[0]`, filling every later entry of `acts`.
    pub(crate) fn forward_pixel(&self, acts: &mut [Vec<f64>]) {
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (head, tail) = acts.split_at_mut(l + 1);
            let out = &mut tail[0];
            layer.apply(&head[l], out);
            if l < last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
    }

    /// Accumulates parameter gradients for one pixel given `d_out`, the
    /// gradient of the loss with respect to the pixel embedding. `acts` must
    /// come from [`Self::forward_pixel`].
    pub(crate) fn backward_pixel(&self, acts: &[Vec<f64>], d_out: &[f64], grads: &mut Gradients) {
        let mut delta = d_out.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let g = &mut grads.layers[l];
            let input = &acts[l];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                row.iter_mut().zip(input).for_each(|(gw, x)| *gw += d * x);
            }
            if l == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.in_dim];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                prev.iter_mut().zip(row).for_each(|(p, w)| *p += d * w);
            }
            // tanh'(z) = 1 - tanh(z)^2, and acts[l] already holds tanh(z).
            prev.iter_mut()
                .zip(&acts[l])
                .for_each(|(p, a)| *p *= 1.0 - a * a);
            delta = prev;
        }
    }
}

/// Maps every pixel of `image` to its `D`-dimensional embedding.
pub fn forward_backbone(image: &Image, params: &BackboneParams) -> Result<FeatureGrid> {
    params.check_image(image)?;
    let d = params.output_dim();
    let mut data = Vec::with_capacity(image.pixel_count() * d);
    let mut acts = params.scratch();
    for n in 0..image.height() {
        for m in 0..image.width() {
            params.gather_input(image, n, m, &mut acts[0]);
            params.forward_pixel(&mut acts);
            data.extend_from_slice(acts.last().expect("non-empty"));
        }
    }
    let feat = Grid::new(d, image.height(), image.width(), data)?;
    if !feat.is_finite() {
        return Err(Error::Numeric("backbone produced non-finite features".into()));
    }
    Ok(feat)
}
