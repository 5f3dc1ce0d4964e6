//! Per-example kernels for the dense network: forward pass, reverse-mode
//! gradient and the forward-over-reverse (R-operator) Hessian-vector product.
//!
//! All routines accumulate `weight * result` into a caller-provided buffer so
//! objective-level sums never allocate per example.

use super::{Activation, ModelSpec};

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub w_offset: usize,
    pub b_offset: usize,
}

impl LayerShape {
    #[inline]
    fn weights<'a>(&self, theta: &'a [f64]) -> &'a [f64] {
        &theta[self.w_offset..self.w_offset + self.fan_in * self.fan_out]
    }

    #[inline]
    fn biases<'a>(&self, theta: &'a [f64]) -> &'a [f64] {
        &theta[self.b_offset..self.b_offset + self.fan_out]
    }
}

pub(crate) fn layer_shapes(spec: &ModelSpec) -> Vec<LayerShape> {
    let mut dims = Vec::with_capacity(spec.hidden_widths.len() + 2);
    dims.push(spec.input_dim);
    dims.extend_from_slice(&spec.hidden_widths);
    dims.push(spec.num_classes);
    let mut offset = 0;
    dims.windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let shape = LayerShape {
                fan_in,
                fan_out,
                w_offset: offset,
                b_offset: offset + fan_in * fan_out,
            };
            offset += fan_in * fan_out + fan_out;
            shape
        })
        .collect()
}

#[inline]
fn activate(act: Activation, a: f64) -> f64 {
    match act {
        Activation::Tanh => a.tanh(),
        Activation::Relu => a.max(0.0),
    }
}

/// First derivative given the pre-activation `a` and the activation `h`.
#[inline]
fn d_activate(act: Activation, a: f64, h: f64) -> f64 {
    match act {
        Activation::Tanh => 1.0 - h * h,
        Activation::Relu => {
            if a > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

#[inline]
fn d2_activate(act: Activation, h: f64) -> f64 {
    match act {
        Activation::Tanh => -2.0 * h * (1.0 - h * h),
        Activation::Relu => 0.0,
    }
}

/// Scratch buffers for one example. `acts[0]` is the input, `acts[l + 1]` the
/// output of layer `l` (post-activation for hidden layers, logits for the
/// last one). `pre[l]` holds pre-activations of hidden layer `l`.
pub(crate) struct Workspace {
    pub shapes: Vec<LayerShape>,
    activation: Activation,
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    probs: Vec<f64>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
    // tangent (R-pass) buffers
    r_acts: Vec<Vec<f64>>,
    r_pre: Vec<Vec<f64>>,
    r_delta: Vec<f64>,
    r_delta_prev: Vec<f64>,
}

impl Workspace {
    pub fn new(spec: &ModelSpec) -> Self {
        let shapes = layer_shapes(spec);
        let mut acts = vec![vec![0.0; spec.input_dim]];
        acts.extend(shapes.iter().map(|s| vec![0.0; s.fan_out]));
        let pre: Vec<Vec<f64>> = spec.hidden_widths.iter().map(|&w| vec![0.0; w]).collect();
        let widest = shapes
            .iter()
            .map(|s| s.fan_out.max(s.fan_in))
            .max()
            .unwrap_or(1);
        Workspace {
            activation: spec.activation,
            r_acts: acts.clone(),
            r_pre: pre.clone(),
            acts,
            pre,
            probs: vec![0.0; spec.num_classes],
            delta: Vec::with_capacity(widest),
            delta_prev: Vec::with_capacity(widest),
            r_delta: Vec::with_capacity(widest),
            r_delta_prev: Vec::with_capacity(widest),
            shapes,
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Runs the forward pass and returns the softmax cross-entropy loss.
    /// Leaves softmax probabilities in `self.probs`.
    pub fn forward(&mut self, theta: &[f64], x: &[f64], label: usize) -> f64 {
        self.acts[0].copy_from_slice(x);
        let depth = self.shapes.len();
        for (l, shape) in self.shapes.iter().enumerate() {
            let (head, tail) = self.acts.split_at_mut(l + 1);
            let input = &head[l];
            let out = &mut tail[0];
            let w = shape.weights(theta);
            let b = shape.biases(theta);
            for o in 0..shape.fan_out {
                let row = &w[o * shape.fan_in..(o + 1) * shape.fan_in];
                let mut acc = b[o];
                for (wi, xi) in row.iter().zip(input.iter()) {
                    acc += wi * xi;
                }
                out[o] = acc;
            }
            if l + 1 < depth {
                let pre = &mut self.pre[l];
                pre.copy_from_slice(out);
                for v in out.iter_mut() {
                    *v = activate(self.activation, *v);
                }
            }
        }
        let logits = &self.acts[depth];
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        for (p, z) in self.probs.iter_mut().zip(logits.iter()) {
            *p = (z - lse).exp();
        }
        lse - logits[label]
    }

    /// Accumulates `weight * grad(loss)` into `grad`. Requires a preceding
    /// [`Workspace::forward`] on the same example.
    pub fn backward(&mut self, theta: &[f64], label: usize, weight: f64, grad: &mut [f64]) {
        self.delta.clear();
        self.delta.extend_from_slice(&self.probs);
        self.delta[label] -= 1.0;
        for l in (0..self.shapes.len()).rev() {
            let shape = self.shapes[l];
            let input = &self.acts[l];
            for o in 0..shape.fan_out {
                let d = weight * self.delta[o];
                if d != 0.0 {
                    let g = &mut grad[shape.w_offset + o * shape.fan_in
                        ..shape.w_offset + (o + 1) * shape.fan_in];
                    for (gi, xi) in g.iter_mut().zip(input.iter()) {
                        *gi += d * xi;
                    }
                }
                grad[shape.b_offset + o] += d;
            }
            if l == 0 {
                break;
            }
            let w = shape.weights(theta);
            self.delta_prev.clear();
            self.delta_prev.resize(shape.fan_in, 0.0);
            for o in 0..shape.fan_out {
                let d = self.delta[o];
                let row = &w[o * shape.fan_in..(o + 1) * shape.fan_in];
                for (dp, wi) in self.delta_prev.iter_mut().zip(row) {
                    *dp += wi * d;
                }
            }
            let pre = &self.pre[l - 1];
            let post = &self.acts[l];
            for i in 0..shape.fan_in {
                self.delta_prev[i] *= d_activate(self.activation, pre[i], post[i]);
            }
            std::mem::swap(&mut self.delta, &mut self.delta_prev);
        }
    }

    /// Accumulates `weight * (Hessian of loss) * v` into `out`, where the
    /// Hessian is taken at `theta` for the example last passed to
    /// [`Workspace::forward`].
    pub fn hvp(&mut self, theta: &[f64], v: &[f64], label: usize, weight: f64, out: &mut [f64]) {
        let depth = self.shapes.len();

        // Tangent forward pass.
        self.r_acts[0].iter_mut().for_each(|x| *x = 0.0);
        for (l, shape) in self.shapes.iter().enumerate() {
            let (head, tail) = self.r_acts.split_at_mut(l + 1);
            let r_in = &head[l];
            let r_out = &mut tail[0];
            let input = &self.acts[l];
            let w = shape.weights(theta);
            let dw = shape.weights(v);
            let db = shape.biases(v);
            for o in 0..shape.fan_out {
                let row = &w[o * shape.fan_in..(o + 1) * shape.fan_in];
                let drow = &dw[o * shape.fan_in..(o + 1) * shape.fan_in];
                let mut acc = db[o];
                for i in 0..shape.fan_in {
                    acc += drow[i] * input[i] + row[i] * r_in[i];
                }
                r_out[o] = acc;
            }
            if l + 1 < depth {
                let pre = &self.pre[l];
                let post = &self.acts[l + 1];
                self.r_pre[l].copy_from_slice(r_out);
                for o in 0..shape.fan_out {
                    r_out[o] *= d_activate(self.activation, pre[o], post[o]);
                }
            }
        }

        // Output layer: delta = p - e_y, R(delta) = J_softmax * R(logits).
        let r_logits = &self.r_acts[depth];
        let p_dot_r: f64 = self.probs.iter().zip(r_logits).map(|(p, r)| p * r).sum();
        self.delta.clear();
        self.delta.extend_from_slice(&self.probs);
        self.delta[label] -= 1.0;
        self.r_delta.clear();
        self.r_delta
            .extend(self.probs.iter().zip(r_logits).map(|(p, r)| p * (r - p_dot_r)));

        for l in (0..depth).rev() {
            let shape = self.shapes[l];
            let input = &self.acts[l];
            let r_input = &self.r_acts[l];
            for o in 0..shape.fan_out {
                let d = weight * self.delta[o];
                let rd = weight * self.r_delta[o];
                let g = &mut out
                    [shape.w_offset + o * shape.fan_in..shape.w_offset + (o + 1) * shape.fan_in];
                for i in 0..shape.fan_in {
                    g[i] += rd * input[i] + d * r_input[i];
                }
                out[shape.b_offset + o] += rd;
            }
            if l == 0 {
                break;
            }
            let w = shape.weights(theta);
            let dw = shape.weights(v);
            self.delta_prev.clear();
            self.delta_prev.resize(shape.fan_in, 0.0);
            self.r_delta_prev.clear();
            self.r_delta_prev.resize(shape.fan_in, 0.0);
            for o in 0..shape.fan_out {
                let d = self.delta[o];
                let rd = self.r_delta[o];
                let row = &w[o * shape.fan_in..(o + 1) * shape.fan_in];
                let drow = &dw[o * shape.fan_in..(o + 1) * shape.fan_in];
                for i in 0..shape.fan_in {
                    self.delta_prev[i] += row[i] * d;
                    self.r_delta_prev[i] += drow[i] * d + row[i] * rd;
                }
            }
            let pre = &self.pre[l - 1];
            let r_pre = &self.r_pre[l - 1];
            let post = &self.acts[l];
            for i in 0..shape.fan_in {
                let s1 = d_activate(self.activation, pre[i], post[i]);
                let s2 = d2_activate(self.activation, post[i]);
                let dh = self.delta_prev[i];
                self.r_delta_prev[i] = s2 * r_pre[i] * dh + s1 * self.r_delta_prev[i];
                self.delta_prev[i] = s1 * dh;
            }
            std::mem::swap(&mut self.delta, &mut self.delta_prev);
            std::mem::swap(&mut self.r_delta, &mut self.r_delta_prev);
        }
    }
}
