use crate::error::{Error, Result};
use crate::lattice::PosteriorMatrix;
use crate::matrix::{softmax_into, Matrix};

use super::{CellKind, NetworkSpec, ParameterSet};

/// Activations kept from a forward pass, sufficient for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input_len: usize,
    frames: usize,
    layers: Vec<LayerCache>,
    /// Output of the last recurrent layer, `input_len x dim`.
    top: Matrix,
    /// Pre-softmax activations, `frames x K`; rows past `input_len` are zero.
    pub logits: Matrix,
}

impl ForwardCache {
    pub fn input_len(&self) -> usize {
        self.input_len
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Matrix,
    directions: Vec<DirectionCache>,
}

#[derive(Debug, Clone)]
struct DirectionCache {
    reverse: bool,
    /// Hidden states indexed by frame.
    hidden: Matrix,
    /// LSTM only: post-activation gates `[i, f, g, o]` and cell states, by frame.
    gates: Matrix,
    cells: Matrix,
}

fn tensor_base(spec: &NetworkSpec, layer: usize, direction: usize) -> usize {
    let before: usize = spec.layers[..layer].iter().map(|l| 3 * l.directions()).sum();
    before + 3 * direction
}

/// `out += w x` for row-major `w` of shape `out.len() x x.len()`.
#[inline]
fn gemv_acc(out: &mut [f64], w: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        *o += acc;
    }
}

/// `out += w^T v` for row-major `w` of shape `v.len() x out.len()`.
#[inline]
fn gemv_t_acc(out: &mut [f64], w: &[f64], v: &[f64]) {
    let cols = out.len();
    for (r, &vr) in v.iter().enumerate() {
        if vr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * vr;
        }
    }
}

/// `dw += v x^T`.
#[inline]
fn outer_acc(dw: &mut [f64], v: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, &vr) in v.iter().enumerate() {
        if vr == 0.0 {
            continue;
        }
        let row = &mut dw[r * cols..(r + 1) * cols];
        for (d, &xc) in row.iter_mut().zip(x) {
            *d += vr * xc;
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn run_direction(
    kind: CellKind,
    units: usize,
    input: &Matrix,
    w_in: &[f64],
    w_rec: &[f64],
    bias: &[f64],
    reverse: bool,
) -> DirectionCache {
    let n = input.rows();
    let rows = kind.gates() * units;
    let mut hidden = Matrix::zeros(n, units);
    let (mut gates, mut cells) = match kind {
        CellKind::Rnn => (Matrix::zeros(0, 0), Matrix::zeros(0, 0)),
        CellKind::Lstm => (Matrix::zeros(n, rows), Matrix::zeros(n, units)),
    };
    let mut h_prev = vec![0.0; units];
    let mut c_prev = vec![0.0; units];
    let mut z = vec![0.0; rows];
    for step in 0..n {
        let t = if reverse { n - 1 - step } else { step };
        z.copy_from_slice(bias);
        gemv_acc(&mut z, w_in, input.row(t));
        gemv_acc(&mut z, w_rec, &h_prev);
        match kind {
            CellKind::Rnn => {
                let h = hidden.row_mut(t);
                for (h, &zi) in h.iter_mut().zip(&z) {
                    *h = zi.tanh();
                }
                h_prev.copy_from_slice(h);
            }
            CellKind::Lstm => {
                let g = gates.row_mut(t);
                for j in 0..units {
                    g[j] = sigmoid(z[j]);
                    g[units + j] = sigmoid(z[units + j]);
                    g[2 * units + j] = z[2 * units + j].tanh();
                    g[3 * units + j] = sigmoid(z[3 * units + j]);
                }
                let c = cells.row_mut(t);
                for j in 0..units {
                    c[j] = g[units + j] * c_prev[j] + g[j] * g[2 * units + j];
                }
                let h = hidden.row_mut(t);
                for j in 0..units {
                    h[j] = g[3 * units + j] * c[j].tanh();
                }
                h_prev.copy_from_slice(h);
                c_prev.copy_from_slice(c);
            }
        }
    }
    DirectionCache {
        reverse,
        hidden,
        gates,
        cells,
    }
}

/// Runs the network over the first `input_len` frames of `features`.
///
/// The returned posterior matrix has one row per frame of `features`. Rows at
/// or past `input_len` are masked: they are never computed from the input and
/// hold the uniform distribution.
pub fn forward(
    spec: &NetworkSpec,
    params: &ParameterSet,
    features: &Matrix,
    input_len: usize,
) -> Result<(PosteriorMatrix, ForwardCache)> {
    params.audit(spec)?;
    if features.cols() != spec.feature_dim {
        return Err(Error::domain(format!(
            "features have {} columns, the network expects {}",
            features.cols(),
            spec.feature_dim
        )));
    }
    if input_len > features.rows() {
        return Err(Error::domain(format!(
            "input length {input_len} exceeds the {} feature frames",
            features.rows()
        )));
    }

    let mut input = features.head_rows(input_len);
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (l, layer) in spec.layers.iter().enumerate() {
        let mut directions = Vec::with_capacity(layer.directions());
        for d in 0..layer.directions() {
            let base = tensor_base(spec, l, d);
            directions.push(run_direction(
                layer.kind,
                layer.units,
                &input,
                &params.tensors[base].data,
                &params.tensors[base + 1].data,
                &params.tensors[base + 2].data,
                d == 1,
            ));
        }
        let mut output = Matrix::zeros(input_len, layer.output_dim());
        for t in 0..input_len {
            let row = output.row_mut(t);
            for (d, dir) in directions.iter().enumerate() {
                row[d * layer.units..(d + 1) * layer.units].copy_from_slice(dir.hidden.row(t));
            }
        }
        layers.push(LayerCache {
            input: std::mem::replace(&mut input, output),
            directions,
        });
    }

    let classes = spec.num_classes();
    let n_out = params.tensors.len();
    let w_out = &params.tensors[n_out - 2].data;
    let b_out = &params.tensors[n_out - 1].data;
    let frames = features.rows();
    let mut logits = Matrix::zeros(frames, classes);
    let mut probs = Matrix::filled(frames, classes, 1.0 / classes as f64);
    for t in 0..input_len {
        let z = logits.row_mut(t);
        z.copy_from_slice(b_out);
        gemv_acc(z, w_out, input.row(t));
        softmax_into(logits.row(t), probs.row_mut(t));
    }
    let posteriors = PosteriorMatrix::new(probs)
        .map_err(|e| Error::domain(format!("network produced invalid posteriors: {e}")))?;
    Ok((
        posteriors,
        ForwardCache {
            input_len,
            frames,
            layers,
            top: input,
            logits,
        },
    ))
}

#[allow(clippy::too_many_arguments)]
fn backward_direction(
    kind: CellKind,
    units: usize,
    input: &Matrix,
    cache: &DirectionCache,
    d_hidden: &Matrix,
    w_in: &[f64],
    w_rec: &[f64],
    grads: [&mut [f64]; 3],
    d_input: &mut Matrix,
) {
    let [g_in, g_rec, g_bias] = grads;
    let n = input.rows();
    let rows = kind.gates() * units;
    let mut dh_next = vec![0.0; units];
    let mut dc_next = vec![0.0; units];
    let mut dz = vec![0.0; rows];
    let zeros = vec![0.0; units];
    for step in (0..n).rev() {
        let t = if cache.reverse { n - 1 - step } else { step };
        let prev = if step == 0 {
            None
        } else if cache.reverse {
            Some(t + 1)
        } else {
            Some(t - 1)
        };
        let h_prev = prev.map_or(&zeros[..], |p| cache.hidden.row(p));
        match kind {
            CellKind::Rnn => {
                let h = cache.hidden.row(t);
                for j in 0..units {
                    let dh = d_hidden.get(t, j) + dh_next[j];
                    dz[j] = dh * (1.0 - h[j] * h[j]);
                }
            }
            CellKind::Lstm => {
                let g = cache.gates.row(t);
                let c = cache.cells.row(t);
                let c_prev = prev.map_or(&zeros[..], |p| cache.cells.row(p));
                for j in 0..units {
                    let (i, f, cand, o) = (g[j], g[units + j], g[2 * units + j], g[3 * units + j]);
                    let dh = d_hidden.get(t, j) + dh_next[j];
                    let tc = c[j].tanh();
                    let dc = dh * o * (1.0 - tc * tc) + dc_next[j];
                    dz[j] = dc * cand * i * (1.0 - i);
                    dz[units + j] = dc * c_prev[j] * f * (1.0 - f);
                    dz[2 * units + j] = dc * i * (1.0 - cand * cand);
                    dz[3 * units + j] = dh * tc * o * (1.0 - o);
                    dc_next[j] = dc * f;
                }
            }
        }
        outer_acc(g_in, &dz, input.row(t));
        outer_acc(g_rec, &dz, h_prev);
        for (b, d) in g_bias.iter_mut().zip(&dz) {
            *b += d;
        }
        gemv_t_acc(d_input.row_mut(t), w_in, &dz);
        dh_next.fill(0.0);
        gemv_t_acc(&mut dh_next, w_rec, &dz);
    }
}

/// Backpropagation through time.
///
/// `grad_logits` is the gradient of a scalar loss with respect to the
/// forward pass's logits; rows at or past `input_len` must be zero.
pub fn backward(
    spec: &NetworkSpec,
    params: &ParameterSet,
    cache: &ForwardCache,
    grad_logits: &Matrix,
) -> Result<ParameterSet> {
    params.audit(spec)?;
    if cache.layers.len() != spec.layers.len()
        || cache
            .layers
            .iter()
            .zip(&spec.layers)
            .any(|(c, l)| c.directions.len() != l.directions())
        || cache.top.cols() != spec.layers.last().map_or(0, |l| l.output_dim())
    {
        return Err(Error::domain("forward cache does not match the network spec"));
    }
    let classes = spec.num_classes();
    if grad_logits.rows() != cache.frames || grad_logits.cols() != classes {
        return Err(Error::domain(format!(
            "logit gradient is {}x{}, expected {}x{classes}",
            grad_logits.rows(),
            grad_logits.cols(),
            cache.frames
        )));
    }
    let n = cache.input_len;
    if (n..cache.frames).any(|t| grad_logits.row(t).iter().any(|&g| g != 0.0)) {
        return Err(Error::domain("logit gradient is nonzero on masked frames"));
    }

    let mut grads = params.zeros_like();
    let n_out = params.tensors.len();
    let w_out = &params.tensors[n_out - 2].data;
    let mut d_top = Matrix::zeros(n, cache.top.cols());
    {
        let (head, tail) = grads.tensors.split_at_mut(n_out - 1);
        let g_w = &mut head[n_out - 2].data;
        let g_b = &mut tail[0].data;
        for t in 0..n {
            let g = grad_logits.row(t);
            outer_acc(g_w, g, cache.top.row(t));
            for (b, d) in g_b.iter_mut().zip(g) {
                *b += d;
            }
            gemv_t_acc(d_top.row_mut(t), w_out, g);
        }
    }

    for (l, layer) in spec.layers.iter().enumerate().rev() {
        let lc = &cache.layers[l];
        let mut d_input = Matrix::zeros(n, lc.input.cols());
        for (d, dir) in lc.directions.iter().enumerate() {
            let mut d_hidden = Matrix::zeros(n, layer.units);
            for t in 0..n {
                d_hidden
                    .row_mut(t)
                    .copy_from_slice(&d_top.row(t)[d * layer.units..(d + 1) * layer.units]);
            }
            let base = tensor_base(spec, l, d);
            let (_, rest) = grads.tensors.split_at_mut(base);
            let (g_in, rest) = rest.split_first_mut().expect("input weights");
            let (g_rec, rest) = rest.split_first_mut().expect("recurrent weights");
            let g_bias = &mut rest[0];
            backward_direction(
                layer.kind,
                layer.units,
                &lc.input,
                dir,
                &d_hidden,
                &params.tensors[base].data,
                &params.tensors[base + 1].data,
                [&mut g_in.data, &mut g_rec.data, &mut g_bias.data],
                &mut d_input,
            );
        }
        d_top = d_input;
    }
    Ok(grads)
}
