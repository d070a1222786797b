//! Dense feed-forward blocks shared by all driver architectures.

use super::activation::{sigmoid, softplus, Activation};

/// How a raw parameter maps to its effective value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Transform {
    Free,
    /// `softplus(raw)`, strictly non-negative.
    Pos,
    /// `-softplus(raw)`, non-positive.
    Neg,
}

impl Transform {
    #[inline]
    pub(crate) fn apply(self, raw: f64) -> f64 {
        match self {
            Transform::Free => raw,
            Transform::Pos => softplus(raw),
            Transform::Neg => -softplus(raw),
        }
    }

    #[inline]
    pub(crate) fn derivative(self, raw: f64) -> f64 {
        match self {
            Transform::Free => 1.0,
            Transform::Pos => sigmoid(raw),
            Transform::Neg => -sigmoid(raw),
        }
    }
}

/// Role of a weight inside a block, used to assign transforms.
#[derive(Debug, Clone, Copy)]
pub(crate) enum WeightRole {
    /// Weight from selected input `index` (position in `Mlp::inputs`) in layer `layer`.
    Input { layer: usize, index: usize },
    /// Weight from the previous hidden layer (layers after the first).
    Hidden,
}

/// A scalar-output block. Layer 0 reads the selected inputs; later layers
/// read the previous activations and, when `skip` is set, the selected
/// inputs again. The output layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Mlp {
    pub inputs: Vec<usize>,
    pub widths: Vec<usize>,
    pub act: Activation,
    pub skip: bool,
    pub offset: usize,
}

#[derive(Debug, Default)]
pub(crate) struct Tape {
    ins: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    fn layer_shape(&self, l: usize) -> (usize, usize, usize) {
        let ni = self.inputs.len();
        let n_in = if l == 0 {
            ni
        } else {
            self.widths[l - 1] + if self.skip { ni } else { 0 }
        };
        let n_out = if l < self.widths.len() { self.widths[l] } else { 1 };
        let hidden_in = if l == 0 { 0 } else { self.widths[l - 1] };
        (n_in, n_out, hidden_in)
    }

    pub(crate) fn n_layers(&self) -> usize {
        self.widths.len() + 1
    }

    pub(crate) fn n_params(&self) -> usize {
        (0..self.n_layers())
            .map(|l| {
                let (i, o, _) = self.layer_shape(l);
                o * i + o
            })
            .sum()
    }

    /// Transform of every parameter of this block, in storage order. Biases
    /// are always free.
    pub(crate) fn transforms(&self, rule: impl Fn(WeightRole) -> Transform) -> Vec<Transform> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in 0..self.n_layers() {
            let (n_in, n_out, hidden_in) = self.layer_shape(l);
            for _ in 0..n_out {
                for c in 0..n_in {
                    let role = if c < hidden_in {
                        WeightRole::Hidden
                    } else {
                        WeightRole::Input {
                            layer: l,
                            index: c - hidden_in,
                        }
                    };
                    out.push(rule(role));
                }
            }
            out.extend(std::iter::repeat_n(Transform::Free, n_out));
        }
        out
    }

    fn input_vector(&self, u: &[f64], prev: Option<&[f64]>) -> Vec<f64> {
        let mut v = Vec::new();
        match prev {
            None => v.extend(self.inputs.iter().map(|&i| u[i])),
            Some(h) => {
                v.extend_from_slice(h);
                if self.skip {
                    v.extend(self.inputs.iter().map(|&i| u[i]));
                }
            }
        }
        v
    }

    pub(crate) fn forward(&self, eff: &[f64], u: &[f64], tape: Option<&mut Tape>) -> f64 {
        if tape.is_none() {
            return self.value(eff, u);
        }
        let mut o = self.offset;
        let mut h: Option<Vec<f64>> = None;
        let mut tape = tape;
        if let Some(t) = tape.as_deref_mut() {
            t.ins.clear();
            t.pre.clear();
        }
        let mut out = 0.0;
        for l in 0..self.n_layers() {
            let (n_in, n_out, _) = self.layer_shape(l);
            let input = self.input_vector(u, h.as_deref());
            let w = &eff[o..o + n_in * n_out];
            let b = &eff[o + n_in * n_out..o + n_in * n_out + n_out];
            o += n_in * n_out + n_out;
            let mut pre = vec![0.0; n_out];
            for j in 0..n_out {
                let row = &w[j * n_in..(j + 1) * n_in];
                let mut s = b[j];
                for (wi, xi) in row.iter().zip(&input) {
                    s += wi * xi;
                }
                pre[j] = s;
            }
            if l + 1 == self.n_layers() {
                out = pre[0];
            } else {
                h = Some(pre.iter().map(|&s| self.act.apply(s)).collect());
            }
            if let Some(t) = tape.as_deref_mut() {
                t.ins.push(input);
                t.pre.push(pre);
            }
        }
        out
    }

    /// Back-propagates `g = d(loss)/d(output)` through a recorded forward
    /// pass, accumulating effective-parameter gradients into `grad_eff` and
    /// input gradients into `grad_u`.
    /// Forward pass without recording, with two scratch buffers.
    fn value(&self, eff: &[f64], u: &[f64]) -> f64 {
        let ni = self.inputs.len();
        let cap = self.widths.iter().max().copied().unwrap_or(0) + ni;
        let mut cur = Vec::with_capacity(cap);
        let mut next = Vec::with_capacity(cap);
        cur.extend(self.inputs.iter().map(|&i| u[i]));
        let mut o = self.offset;
        for l in 0..self.n_layers() {
            let (n_in, n_out, _) = self.layer_shape(l);
            let w = &eff[o..o + n_in * n_out];
            let b = &eff[o + n_in * n_out..o + n_in * n_out + n_out];
            o += n_in * n_out + n_out;
            next.clear();
            for j in 0..n_out {
                let mut s = b[j];
                for (wi, xi) in w[j * n_in..(j + 1) * n_in].iter().zip(&cur) {
                    s += wi * xi;
                }
                if l + 1 == self.n_layers() {
                    return s;
                }
                next.push(self.act.apply(s));
            }
            if self.skip {
                next.extend(self.inputs.iter().map(|&i| u[i]));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        unreachable!("the output layer returns")
    }

    pub(crate) fn backward(&self, eff: &[f64], tape: &Tape, g: f64, grad_eff: &mut [f64], grad_u: &mut [f64]) {
        let mut offsets = Vec::with_capacity(self.n_layers());
        let mut o = self.offset;
        for l in 0..self.n_layers() {
            offsets.push(o);
            let (i, n, _) = self.layer_shape(l);
            o += i * n + n;
        }
        let mut delta = vec![g];
        for l in (0..self.n_layers()).rev() {
            let (n_in, n_out, hidden_in) = self.layer_shape(l);
            let o = offsets[l];
            let input = &tape.ins[l];
            let mut g_in = vec![0.0; n_in];
            for j in 0..n_out {
                let dj = delta[j];
                if dj == 0.0 {
                    continue;
                }
                let row = o + j * n_in;
                for c in 0..n_in {
                    grad_eff[row + c] += dj * input[c];
                    g_in[c] += eff[row + c] * dj;
                }
                grad_eff[o + n_in * n_out + j] += dj;
            }
            for (k, &i) in self.inputs.iter().enumerate() {
                if l == 0 || self.skip {
                    grad_u[i] += g_in[hidden_in + k];
                }
            }
            if l > 0 {
                let pre = &tape.pre[l - 1];
                delta = (0..hidden_in).map(|j| g_in[j] * self.act.derivative(pre[j])).collect();
            }
        }
    }
}
