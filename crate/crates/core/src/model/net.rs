//! Forward and reverse passes for fully connected networks, generic over the
//! scalar type. Running the reverse pass on [`Dual`](super::Dual) parameters
//! `θ + ε·v` yields `H·v` in the tangent part of the gradient.

use super::scalar::Scalar;
use super::Activation;

/// Layer geometry: `sizes[0]` is the input dimension, the last entry the
/// number of output units. Parameters are stored layer by layer as a
/// row-major `out × in` weight block followed by `out` biases.
#[derive(Debug, Clone)]
pub(crate) struct Shape {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub weight_offsets: Vec<usize>,
    pub bias_offsets: Vec<usize>,
    pub total: usize,
}

impl Shape {
    pub fn new(sizes: Vec<usize>, activation: Activation) -> Self {
        let mut weight_offsets = Vec::new();
        let mut bias_offsets = Vec::new();
        let mut off = 0;
        for w in sizes.windows(2) {
            weight_offsets.push(off);
            off += w[0] * w[1];
            bias_offsets.push(off);
            off += w[1];
        }
        Self {
            sizes,
            activation,
            weight_offsets,
            bias_offsets,
            total: off,
        }
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }
}

/// Scratch buffers reused across points.
pub(crate) struct Workspace<S> {
    /// `acts[l]` is the input of layer `l`; `acts[0]` is the data point.
    acts: Vec<Vec<S>>,
    /// Pre-activations of each layer; the last entry holds the logits.
    pre: Vec<Vec<S>>,
    delta: Vec<S>,
    back: Vec<S>,
}

impl<S: Scalar> Workspace<S> {
    pub fn new(shape: &Shape) -> Self {
        let acts = shape.sizes[..shape.layers()]
            .iter()
            .map(|&n| vec![S::zero(); n])
            .collect();
        let pre = shape.sizes[1..].iter().map(|&n| vec![S::zero(); n]).collect();
        let widest = shape.sizes.iter().copied().max().unwrap_or(1);
        Self {
            acts,
            pre,
            delta: Vec::with_capacity(widest),
            back: Vec::with_capacity(widest),
        }
    }

    pub fn logits(&self) -> &[S] {
        self.pre.last().expect("at least one layer")
    }

    /// Input of the output layer: the final hidden representation, or `x`
    /// itself for a single-layer model.
    pub fn representation(&self) -> &[S] {
        self.acts.last().expect("at least one layer")
    }
}

#[inline]
fn activate<S: Scalar>(a: Activation, v: S) -> S {
    match a {
        Activation::Tanh => v.tanh(),
        Activation::Relu => {
            if v.re() > 0.0 {
                v
            } else {
                S::zero()
            }
        }
    }
}

/// Derivative of the activation expressed through its pre-activation and output.
#[inline]
fn activate_deriv<S: Scalar>(a: Activation, pre: S, out: S) -> S {
    match a {
        Activation::Tanh => S::from_f64(1.0) - out * out,
        Activation::Relu => S::from_f64(if pre.re() > 0.0 { 1.0 } else { 0.0 }),
    }
}

pub(crate) fn forward<S: Scalar>(shape: &Shape, theta: &[S], x: &[f64], ws: &mut Workspace<S>) {
    for (dst, &src) in ws.acts[0].iter_mut().zip(x) {
        *dst = S::from_f64(src);
    }
    let layers = shape.layers();
    for l in 0..layers {
        let n_in = shape.sizes[l];
        let n_out = shape.sizes[l + 1];
        let w = &theta[shape.weight_offsets[l]..shape.weight_offsets[l] + n_in * n_out];
        let b = &theta[shape.bias_offsets[l]..shape.bias_offsets[l] + n_out];
        let (before, after) = ws.acts.split_at_mut(l + 1);
        let input = &before[l];
        let pre = &mut ws.pre[l];
        for o in 0..n_out {
            let row = &w[o * n_in..(o + 1) * n_in];
            let mut acc = b[o];
            for (wi, ai) in row.iter().zip(input.iter()) {
                acc += *wi * *ai;
            }
            pre[o] = acc;
        }
        if l + 1 < layers {
            let next = &mut after[0];
            for (dst, &p) in next.iter_mut().zip(pre.iter()) {
                *dst = activate(shape.activation, p);
            }
        }
    }
}

/// Cross-entropy of the logits against `y`, writing `dL/dlogits` into `dz`.
///
/// A single output unit is a sigmoid over class 1; more outputs use softmax.
pub(crate) fn cross_entropy<S: Scalar>(logits: &[S], y: usize, dz: &mut Vec<S>) -> S {
    dz.clear();
    if logits.len() == 1 {
        let z = logits[0];
        let one = S::from_f64(1.0);
        let yf = S::from_f64(y as f64);
        let (softplus, sig) = if z.re() > 0.0 {
            let e = (-z).exp();
            (z + (one + e).ln(), one / (one + e))
        } else {
            let e = z.exp();
            ((one + e).ln(), e / (one + e))
        };
        dz.push(sig - yf);
        softplus - yf * z
    } else {
        let m = logits.iter().map(|v| v.re()).fold(f64::NEG_INFINITY, f64::max);
        let mshift = S::from_f64(m);
        let mut sum = S::zero();
        for &z in logits {
            let e = (z - mshift).exp();
            dz.push(e);
            sum += e;
        }
        for d in dz.iter_mut() {
            *d = *d / sum;
        }
        dz[y] = dz[y] - S::from_f64(1.0);
        sum.ln() + mshift - logits[y]
    }
}

/// Data loss of one point; when `grad` is given, adds `weight · ∇θ loss` into it.
pub(crate) fn point_loss_grad<S: Scalar>(
    shape: &Shape,
    theta: &[S],
    x: &[f64],
    y: usize,
    weight: f64,
    grad: Option<&mut [S]>,
    ws: &mut Workspace<S>,
) -> S {
    forward(shape, theta, x, ws);
    let mut delta = std::mem::take(&mut ws.delta);
    let loss = cross_entropy(ws.logits(), y, &mut delta);
    let Some(grad) = grad else {
        ws.delta = delta;
        return loss;
    };
    for d in delta.iter_mut() {
        *d = d.scale(weight);
    }
    let mut back = std::mem::take(&mut ws.back);
    for l in (0..shape.layers()).rev() {
        let n_in = shape.sizes[l];
        let n_out = shape.sizes[l + 1];
        let w_off = shape.weight_offsets[l];
        let b_off = shape.bias_offsets[l];
        let input = &ws.acts[l];
        for o in 0..n_out {
            let d = delta[o];
            let g_row = &mut grad[w_off + o * n_in..w_off + (o + 1) * n_in];
            for (g, &a) in g_row.iter_mut().zip(input.iter()) {
                *g += d * a;
            }
            grad[b_off + o] += d;
        }
        if l == 0 {
            break;
        }
        let w = &theta[w_off..w_off + n_in * n_out];
        back.clear();
        back.resize(n_in, S::zero());
        for o in 0..n_out {
            let d = delta[o];
            let row = &w[o * n_in..(o + 1) * n_in];
            for (bk, &wi) in back.iter_mut().zip(row.iter()) {
                *bk += wi * d;
            }
        }
        let pre_prev = &ws.pre[l - 1];
        delta.clear();
        for i in 0..n_in {
            delta.push(back[i] * activate_deriv(shape.activation, pre_prev[i], input[i]));
        }
    }
    ws.delta = delta;
    ws.back = back;
    loss
}
