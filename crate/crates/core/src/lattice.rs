//! CTC negative log-likelihood and its gradient.
//!
//! The lattice runs over the blank-extended label sequence
//! `[b, y1, b, y2, ..., yL, b]` of length `2L + 1`. All arithmetic is done in
//! the log domain. `alpha[t][s]` includes the emission at frame `t`,
//! `beta[t][s]` covers frames `t + 1 .. input_len`, so that
//! `logsumexp_s(alpha[t][s] + beta[t][s])` is the sequence log-likelihood for
//! every `t`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::{log_softmax_into, Matrix};

/// Maximum deviation of a posterior row sum from 1.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

/// Per-frame class probabilities, `T x K`, with the blank in the last column.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    probs: Matrix,
}

impl PosteriorMatrix {
    pub fn new(probs: Matrix) -> Result<Self> {
        if probs.cols() == 0 {
            return Err(Error::domain("posterior matrix needs at least the blank class"));
        }
        for t in 0..probs.rows() {
            let row = probs.row(t);
            if let Some(k) = row.iter().position(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::domain(format!(
                    "posterior[{t}][{k}] = {} is not a probability",
                    row[k]
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
                return Err(Error::domain(format!("posterior row {t} sums to {sum}")));
            }
        }
        Ok(PosteriorMatrix { probs })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    /// Row-wise softmax of `logits`.
    pub fn from_logits(logits: &Matrix) -> Self {
        let mut probs = Matrix::zeros(logits.rows(), logits.cols());
        for t in 0..logits.rows() {
            crate::matrix::softmax_into(logits.row(t), probs.row_mut(t));
        }
        PosteriorMatrix { probs }
    }

    pub fn uniform(num_frames: usize, num_classes: usize) -> Self {
        PosteriorMatrix {
            probs: Matrix::filled(num_frames, num_classes, 1.0 / num_classes as f64),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.probs.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.cols()
    }

    pub fn blank(&self) -> usize {
        self.probs.cols() - 1
    }

    pub fn get(&self, t: usize, k: usize) -> f64 {
        self.probs.get(t, k)
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.probs.row(t)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.probs
    }

    /// First `n` frames.
    pub fn truncated(&self, n: usize) -> PosteriorMatrix {
        PosteriorMatrix {
            probs: self.probs.head_rows(n),
        }
    }

    /// Frames `start..end` as a new matrix.
    pub fn frames(&self, start: usize, end: usize) -> PosteriorMatrix {
        let k = self.num_classes();
        let data = self.probs.as_slice()[start * k..end * k].to_vec();
        PosteriorMatrix {
            probs: Matrix::from_vec(end - start, k, data).expect("slice of a valid matrix"),
        }
    }

    fn log_probs(&self, input_len: usize) -> Matrix {
        let k = self.num_classes();
        let data = self.probs.as_slice()[..input_len * k]
            .iter()
            .map(|p| p.ln())
            .collect();
        Matrix::from_vec(input_len, k, data).expect("slice of a valid matrix")
    }
}

/// Labels over the non-blank alphabet `[0, K - 1)`.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LabelSequence(pub Vec<usize>);

impl LabelSequence {
    pub fn new(labels: Vec<usize>) -> Self {
        LabelSequence(labels)
    }

    pub fn empty() -> Self {
        LabelSequence(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Checks every label against an alphabet of `num_labels` non-blank classes.
    pub fn validate(&self, num_labels: usize) -> Result<()> {
        match self.0.iter().position(|&l| l >= num_labels) {
            Some(i) => Err(Error::domain(format!(
                "label {} at position {i} is outside [0, {num_labels})",
                self.0[i]
            ))),
            None => Ok(()),
        }
    }

    /// Minimum number of frames that can emit this sequence: one per label
    /// plus one separating blank per adjacent repeat.
    pub fn min_frames(&self) -> usize {
        let repeats = self.0.windows(2).filter(|w| w[0] == w[1]).count();
        self.0.len() + repeats
    }
}

impl From<Vec<usize>> for LabelSequence {
    fn from(labels: Vec<usize>) -> Self {
        LabelSequence(labels)
    }
}

/// One class per frame, blanks included.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Path(pub Vec<usize>);

/// Merges adjacent repeats, then removes blanks.
pub fn collapse(path: &Path, blank: usize) -> Result<LabelSequence> {
    if let Some(&s) = path.0.iter().find(|&&s| s > blank) {
        return Err(Error::domain(format!(
            "path symbol {s} exceeds the blank index {blank}"
        )));
    }
    Ok(collapse_unchecked(&path.0, blank))
}

pub(crate) fn collapse_unchecked(symbols: &[usize], blank: usize) -> LabelSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in symbols {
        if Some(s) != prev && s != blank {
            out.push(s);
        }
        prev = Some(s);
    }
    LabelSequence(out)
}

/// `[b, y1, b, ..., yL, b]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtendedLabels {
    symbols: Vec<usize>,
    blank: usize,
}

impl ExtendedLabels {
    pub fn symbols(&self) -> &[usize] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn blank(&self) -> usize {
        self.blank
    }

    pub fn num_labels(&self) -> usize {
        self.symbols.len() / 2
    }

    /// Whether state `s` may be entered directly from `s - 2`.
    #[inline]
    fn skip_allowed(&self, s: usize) -> bool {
        s >= 2 && self.symbols[s] != self.blank && self.symbols[s] != self.symbols[s - 2]
    }

    fn min_frames(&self) -> usize {
        let labels: Vec<usize> = self.symbols.iter().skip(1).step_by(2).copied().collect();
        LabelSequence(labels).min_frames()
    }
}

pub fn extend_with_blanks(labels: &LabelSequence, blank: usize) -> ExtendedLabels {
    let mut symbols = Vec::with_capacity(2 * labels.len() + 1);
    symbols.push(blank);
    for &l in labels.as_slice() {
        symbols.push(l);
        symbols.push(blank);
    }
    ExtendedLabels { symbols, blank }
}

/// `log(exp(a) + exp(b))` without a NaN check, for inner loops.
#[inline]
pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `log(sum(exp(v)))` with a max shift. Empty or all `-inf` input gives `-inf`.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::domain("log_sum_exp of NaN"));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    if max == f64::INFINITY {
        return Ok(f64::INFINITY);
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// `T x S` table of log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LogTable {
    frames: usize,
    states: usize,
    data: Vec<f64>,
}

impl LogTable {
    fn new(frames: usize, states: usize) -> Self {
        LogTable {
            frames,
            states,
            data: vec![f64::NEG_INFINITY; frames * states],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn states(&self) -> usize {
        self.states
    }

    #[inline]
    pub fn get(&self, t: usize, s: usize) -> f64 {
        self.data[t * self.states + s]
    }

    #[inline]
    fn set(&mut self, t: usize, s: usize, v: f64) {
        self.data[t * self.states + s] = v;
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.states..(t + 1) * self.states]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub alpha: LogTable,
    pub log_likelihood: f64,
}

/// Forward and backward tables of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    pub alpha: LogTable,
    pub beta: LogTable,
    pub log_likelihood: f64,
}

impl Lattice {
    pub fn compute(probs: &PosteriorMatrix, ext: &ExtendedLabels, input_len: usize) -> Result<Self> {
        check_lattice_inputs(probs.num_frames(), probs.num_classes(), ext, input_len)?;
        let log_probs = probs.log_probs(input_len);
        Ok(lattice_from_log_probs(&log_probs, ext))
    }

    /// `logsumexp_s(alpha[t][s] + beta[t][s])` for every frame.
    pub fn frame_log_totals(&self) -> Vec<f64> {
        (0..self.alpha.frames)
            .map(|t| {
                (0..self.alpha.states).fold(f64::NEG_INFINITY, |acc, s| {
                    log_add(acc, self.alpha.get(t, s) + self.beta.get(t, s))
                })
            })
            .collect()
    }
}

fn check_lattice_inputs(
    frames: usize,
    classes: usize,
    ext: &ExtendedLabels,
    input_len: usize,
) -> Result<()> {
    if ext.blank != classes - 1 {
        return Err(Error::domain(format!(
            "extended labels use blank {} but the matrix has {classes} classes",
            ext.blank
        )));
    }
    if input_len > frames {
        return Err(Error::domain(format!(
            "input length {input_len} exceeds the {frames} available frames"
        )));
    }
    // Odd positions hold the labels; the blank is not a valid label.
    if let Some(&s) = ext.symbols.iter().skip(1).step_by(2).find(|&&s| s >= ext.blank) {
        return Err(Error::domain(format!(
            "label {s} is outside [0, {})",
            ext.blank
        )));
    }
    let required = ext.min_frames();
    if input_len < required {
        return Err(Error::InfeasibleAlignment {
            frames: input_len,
            labels: ext.num_labels(),
            required,
        });
    }
    Ok(())
}

fn forward_from_log_probs(log_probs: &Matrix, ext: &ExtendedLabels) -> ForwardPass {
    let frames = log_probs.rows();
    let states = ext.len();
    let mut alpha = LogTable::new(frames, states);
    if frames == 0 {
        // Only the empty label sequence reaches this point.
        return ForwardPass {
            alpha,
            log_likelihood: 0.0,
        };
    }
    let sym = &ext.symbols;
    alpha.set(0, 0, log_probs.get(0, sym[0]));
    if states > 1 {
        alpha.set(0, 1, log_probs.get(0, sym[1]));
    }
    for t in 1..frames {
        let emit = log_probs.row(t);
        for s in 0..states {
            let mut acc = alpha.get(t - 1, s);
            if s >= 1 {
                acc = log_add(acc, alpha.get(t - 1, s - 1));
            }
            if ext.skip_allowed(s) {
                acc = log_add(acc, alpha.get(t - 1, s - 2));
            }
            alpha.set(t, s, acc + emit[sym[s]]);
        }
    }
    let last = frames - 1;
    let mut log_likelihood = alpha.get(last, states - 1);
    if states > 1 {
        log_likelihood = log_add(log_likelihood, alpha.get(last, states - 2));
    }
    ForwardPass {
        alpha,
        log_likelihood,
    }
}

fn backward_from_log_probs(log_probs: &Matrix, ext: &ExtendedLabels) -> LogTable {
    let frames = log_probs.rows();
    let states = ext.len();
    let mut beta = LogTable::new(frames, states);
    if frames == 0 {
        return beta;
    }
    let sym = &ext.symbols;
    beta.set(frames - 1, states - 1, 0.0);
    if states > 1 {
        beta.set(frames - 1, states - 2, 0.0);
    }
    for t in (0..frames - 1).rev() {
        let emit = log_probs.row(t + 1);
        for s in 0..states {
            let mut acc = beta.get(t + 1, s) + emit[sym[s]];
            if s + 1 < states {
                acc = log_add(acc, beta.get(t + 1, s + 1) + emit[sym[s + 1]]);
            }
            if s + 2 < states && ext.skip_allowed(s + 2) {
                acc = log_add(acc, beta.get(t + 1, s + 2) + emit[sym[s + 2]]);
            }
            beta.set(t, s, acc);
        }
    }
    beta
}

fn lattice_from_log_probs(log_probs: &Matrix, ext: &ExtendedLabels) -> Lattice {
    let ForwardPass {
        alpha,
        log_likelihood,
    } = forward_from_log_probs(log_probs, ext);
    let beta = backward_from_log_probs(log_probs, ext);
    Lattice {
        alpha,
        beta,
        log_likelihood,
    }
}

/// Forward variables and the sequence log-likelihood over the first `input_len` frames.
pub fn ctc_forward(probs: &PosteriorMatrix, ext: &ExtendedLabels, input_len: usize) -> Result<ForwardPass> {
    check_lattice_inputs(probs.num_frames(), probs.num_classes(), ext, input_len)?;
    Ok(forward_from_log_probs(&probs.log_probs(input_len), ext))
}

/// Backward variables over the first `input_len` frames.
pub fn ctc_backward(probs: &PosteriorMatrix, ext: &ExtendedLabels, input_len: usize) -> Result<LogTable> {
    check_lattice_inputs(probs.num_frames(), probs.num_classes(), ext, input_len)?;
    Ok(backward_from_log_probs(&probs.log_probs(input_len), ext))
}

fn trimmed_labels(labels: &LabelSequence, label_len: usize) -> Result<LabelSequence> {
    if label_len > labels.len() {
        return Err(Error::domain(format!(
            "label length {label_len} exceeds the {} stored labels",
            labels.len()
        )));
    }
    Ok(LabelSequence(labels.0[..label_len].to_vec()))
}

/// `-ln p(labels | x)` using the first `input_len` frames and `label_len` labels.
pub fn ctc_loss(
    probs: &PosteriorMatrix,
    labels: &LabelSequence,
    input_len: usize,
    label_len: usize,
) -> Result<f64> {
    let labels = trimmed_labels(labels, label_len)?;
    let ext = extend_with_blanks(&labels, probs.blank());
    let forward = ctc_forward(probs, &ext, input_len)?;
    Ok(0.0 - forward.log_likelihood)
}

/// Loss and its gradient with respect to pre-softmax activations.
///
/// Rows at or beyond `input_len` get an all-zero gradient.
pub fn ctc_gradient(
    logits: &Matrix,
    labels: &LabelSequence,
    input_len: usize,
    label_len: usize,
) -> Result<(f64, Matrix)> {
    let classes = logits.cols();
    if classes == 0 {
        return Err(Error::domain("logits need at least the blank class"));
    }
    let labels = trimmed_labels(labels, label_len)?;
    let ext = extend_with_blanks(&labels, classes - 1);
    check_lattice_inputs(logits.rows(), classes, &ext, input_len)?;

    let mut log_probs = Matrix::zeros(input_len, classes);
    for t in 0..input_len {
        let row = logits.row(t);
        if row.iter().any(|z| !z.is_finite()) {
            return Err(Error::domain(format!("non-finite logit in frame {t}")));
        }
        log_softmax_into(row, log_probs.row_mut(t));
    }
    let lattice = lattice_from_log_probs(&log_probs, &ext);
    let ll = lattice.log_likelihood;
    if !ll.is_finite() {
        return Err(Error::domain("sequence has zero probability under the logits"));
    }

    let mut grad = Matrix::zeros(logits.rows(), classes);
    let mut occupancy = vec![f64::NEG_INFINITY; classes];
    for t in 0..input_len {
        occupancy.fill(f64::NEG_INFINITY);
        for (s, &k) in ext.symbols.iter().enumerate() {
            occupancy[k] = log_add(occupancy[k], lattice.alpha.get(t, s) + lattice.beta.get(t, s));
        }
        let g = grad.row_mut(t);
        for k in 0..classes {
            g[k] = log_probs.get(t, k).exp() - (occupancy[k] - ll).exp();
        }
    }
    Ok((0.0 - ll, grad))
}

/// Per-sequence losses over a padded batch of posteriors.
///
/// Errors carry the index of the first failing sequence.
pub fn ctc_loss_batch(
    posteriors: &[PosteriorMatrix],
    labels: &[LabelSequence],
    input_lengths: &[usize],
    label_lengths: &[usize],
) -> Result<Vec<f64>> {
    let n = posteriors.len();
    if labels.len() != n || input_lengths.len() != n || label_lengths.len() != n {
        return Err(Error::domain(format!(
            "batch inputs disagree in size: {n} posteriors, {} labels, {} input lengths, {} label lengths",
            labels.len(),
            input_lengths.len(),
            label_lengths.len()
        )));
    }
    let results: Vec<Result<f64>> = (0..n)
        .into_par_iter()
        .map(|i| ctc_loss(&posteriors[i], &labels[i], input_lengths[i], label_lengths[i]))
        .collect();
    results
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| e.at_sequence(i)))
        .collect()
}
