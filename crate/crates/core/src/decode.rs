//! Decoders mapping a posterior matrix to label sequences.
//!
//! Scores are natural-log probabilities. Results are ranked by score, with
//! equal scores ordered by the lexicographically smaller label sequence.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{log_add, LabelSequence, PosteriorMatrix};

/// Upper bound on the number of paths `exact_decode` will enumerate.
pub const DEFAULT_ENUMERATION_BUDGET: u64 = 1 << 22;
pub const DEFAULT_BEAM_WIDTH: usize = 100;
pub const DEFAULT_TOP_PATHS: usize = 1;
pub const DEFAULT_BLANK_THRESHOLD: f64 = 0.999;
pub const DEFAULT_NODE_BUDGET: usize = 100_000;
/// Beam width used when prefix search runs out of node budget on a segment.
pub const FALLBACK_BEAM_WIDTH: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredLabels {
    pub labels: LabelSequence,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    /// Best first.
    pub paths: Vec<ScoredLabels>,
    /// Set when part of the result came from a fallback approximation.
    pub approximate: bool,
}

impl DecodeResult {
    fn exact(paths: Vec<ScoredLabels>) -> Self {
        DecodeResult {
            paths,
            approximate: false,
        }
    }

    pub fn best(&self) -> &ScoredLabels {
        &self.paths[0]
    }

    pub fn best_labels(&self) -> &LabelSequence {
        &self.paths[0].labels
    }
}

/// Decoding parameters fixed on a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub greedy: bool,
    pub beam_width: usize,
    pub top_paths: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            greedy: true,
            beam_width: DEFAULT_BEAM_WIDTH,
            top_paths: DEFAULT_TOP_PATHS,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.greedy {
            return Ok(());
        }
        check_beam_params(self.beam_width, self.top_paths)
    }

    pub fn decode(&self, probs: &PosteriorMatrix, input_len: usize) -> Result<DecodeResult> {
        if self.greedy {
            best_path_decode(probs, input_len)
        } else {
            beam_search_decode(probs, input_len, self.beam_width, self.top_paths)
        }
    }
}

fn rank(a_score: f64, a_labels: &[usize], b_score: f64, b_labels: &[usize]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_labels.cmp(b_labels))
}

fn check_input_len(probs: &PosteriorMatrix, input_len: usize) -> Result<()> {
    if input_len > probs.num_frames() {
        return Err(Error::domain(format!(
            "input length {input_len} exceeds the {} available frames",
            probs.num_frames()
        )));
    }
    Ok(())
}

fn log_probs(probs: &PosteriorMatrix, input_len: usize) -> Vec<Vec<f64>> {
    (0..input_len)
        .map(|t| probs.row(t).iter().map(|p| p.ln()).collect())
        .collect()
}

/// Exhaustive decoding: sums the probability of every path per collapsed
/// sequence and returns the `top_paths` most probable sequences.
pub fn exact_decode(probs: &PosteriorMatrix, input_len: usize, top_paths: usize) -> Result<DecodeResult> {
    exact_decode_with_budget(probs, input_len, top_paths, DEFAULT_ENUMERATION_BUDGET)
}

pub fn exact_decode_with_budget(
    probs: &PosteriorMatrix,
    input_len: usize,
    top_paths: usize,
    budget: u64,
) -> Result<DecodeResult> {
    check_input_len(probs, input_len)?;
    if top_paths == 0 {
        return Err(Error::domain("top_paths must be at least 1"));
    }
    let classes = probs.num_classes();
    let paths = (classes as f64).powi(input_len as i32);
    if paths > budget as f64 {
        return Err(Error::BudgetExceeded { paths, budget });
    }

    struct Enumeration<'a> {
        log_probs: &'a [Vec<f64>],
        blank: usize,
        index: HashMap<Vec<usize>, usize>,
        totals: Vec<(Vec<usize>, f64)>,
        prefix: Vec<usize>,
    }

    impl Enumeration<'_> {
        fn visit(&mut self, t: usize, prev: Option<usize>, score: f64) {
            if t == self.log_probs.len() {
                match self.index.get(&self.prefix) {
                    Some(&i) => self.totals[i].1 = log_add(self.totals[i].1, score),
                    None => {
                        self.index.insert(self.prefix.clone(), self.totals.len());
                        self.totals.push((self.prefix.clone(), score));
                    }
                }
                return;
            }
            for k in 0..=self.blank {
                let s = score + self.log_probs[t][k];
                let emits = k != self.blank && Some(k) != prev;
                if emits {
                    self.prefix.push(k);
                }
                self.visit(t + 1, Some(k), s);
                if emits {
                    self.prefix.pop();
                }
            }
        }
    }

    let lp = log_probs(probs, input_len);
    let mut e = Enumeration {
        log_probs: &lp,
        blank: probs.blank(),
        index: HashMap::new(),
        totals: Vec::new(),
        prefix: Vec::new(),
    };
    e.visit(0, None, 0.0);
    let mut totals = e.totals;
    totals.sort_by(|a, b| rank(a.1, &a.0, b.1, &b.0));
    totals.truncate(top_paths);
    Ok(DecodeResult::exact(
        totals
            .into_iter()
            .map(|(labels, score)| ScoredLabels {
                labels: LabelSequence(labels),
                score,
            })
            .collect(),
    ))
}

/// Per-frame argmax (lowest class index on ties) followed by collapse.
pub fn best_path_decode(probs: &PosteriorMatrix, input_len: usize) -> Result<DecodeResult> {
    check_input_len(probs, input_len)?;
    let blank = probs.blank();
    let mut labels = Vec::new();
    let mut prev = None;
    let mut score = 0.0;
    for t in 0..input_len {
        let row = probs.row(t);
        let mut best = 0;
        for k in 1..row.len() {
            if row[k] > row[best] {
                best = k;
            }
        }
        score += row[best].ln();
        if best != blank && Some(best) != prev {
            labels.push(best);
        }
        prev = Some(best);
    }
    Ok(DecodeResult::exact(vec![ScoredLabels {
        labels: LabelSequence(labels),
        score,
    }]))
}

fn check_beam_params(beam_width: usize, top_paths: usize) -> Result<()> {
    if beam_width == 0 {
        return Err(Error::domain("beam_width must be at least 1"));
    }
    if top_paths == 0 {
        return Err(Error::domain("top_paths must be at least 1"));
    }
    if top_paths > beam_width {
        return Err(Error::domain(format!(
            "top_paths {top_paths} exceeds beam_width {beam_width}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct Beam {
    prefix: Vec<usize>,
    /// Log-probability of the prefix with the last frame emitting blank.
    blank: f64,
    /// Log-probability of the prefix with the last frame emitting its last label.
    non_blank: f64,
}

impl Beam {
    fn total(&self) -> f64 {
        log_add(self.blank, self.non_blank)
    }
}

#[derive(Default)]
struct BeamSet {
    beams: Vec<Beam>,
    index: HashMap<Vec<usize>, usize>,
}

impl BeamSet {
    fn entry(&mut self, prefix: Vec<usize>) -> &mut Beam {
        let i = match self.index.get(&prefix) {
            Some(&i) => i,
            None => {
                self.index.insert(prefix.clone(), self.beams.len());
                self.beams.push(Beam {
                    prefix,
                    blank: f64::NEG_INFINITY,
                    non_blank: f64::NEG_INFINITY,
                });
                self.beams.len() - 1
            }
        };
        &mut self.beams[i]
    }
}

fn sort_beams(beams: &mut [Beam]) {
    beams.sort_by(|a, b| rank(a.total(), &a.prefix, b.total(), &b.prefix));
}

/// Time-synchronous prefix beam search with separate blank / non-blank mass.
pub fn beam_search_decode(
    probs: &PosteriorMatrix,
    input_len: usize,
    beam_width: usize,
    top_paths: usize,
) -> Result<DecodeResult> {
    check_input_len(probs, input_len)?;
    check_beam_params(beam_width, top_paths)?;
    let blank = probs.blank();
    let mut beams = vec![Beam {
        prefix: Vec::new(),
        blank: 0.0,
        non_blank: f64::NEG_INFINITY,
    }];

    for t in 0..input_len {
        let lp: Vec<f64> = probs.row(t).iter().map(|p| p.ln()).collect();
        let mut next = BeamSet::default();
        for beam in &beams {
            let total = beam.total();
            let last = beam.prefix.last().copied();

            let stay_blank = total + lp[blank];
            if stay_blank > f64::NEG_INFINITY {
                let e = next.entry(beam.prefix.clone());
                e.blank = log_add(e.blank, stay_blank);
            }
            if let Some(last) = last {
                let repeat = beam.non_blank + lp[last];
                if repeat > f64::NEG_INFINITY {
                    let e = next.entry(beam.prefix.clone());
                    e.non_blank = log_add(e.non_blank, repeat);
                }
            }
            for (k, &lpk) in lp.iter().enumerate().take(blank) {
                // A repeated label only starts a new symbol after a blank.
                let source = if Some(k) == last { beam.blank } else { total };
                let extend = source + lpk;
                if extend == f64::NEG_INFINITY {
                    continue;
                }
                let mut prefix = beam.prefix.clone();
                prefix.push(k);
                let e = next.entry(prefix);
                e.non_blank = log_add(e.non_blank, extend);
            }
        }
        beams = next.beams;
        sort_beams(&mut beams);
        beams.truncate(beam_width);
    }

    Ok(DecodeResult::exact(
        beams
            .into_iter()
            .take(top_paths)
            .map(|b| ScoredLabels {
                score: b.total(),
                labels: LabelSequence(b.prefix),
            })
            .collect(),
    ))
}

struct PrefixNode {
    prefix: Vec<usize>,
    /// Log-probability that frames `0..=t` emit exactly `prefix`, ending in a label.
    gamma_label: Vec<f64>,
    /// Same, ending in a blank.
    gamma_blank: Vec<f64>,
    /// Log-probability that the output starts with `prefix`.
    prefix_prob: f64,
}

impl PartialEq for PrefixNode {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for PrefixNode {}

impl PartialOrd for PrefixNode {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for PrefixNode {
    // Max-heap order: higher prefix probability first, then smaller prefix.
    fn cmp(&self, other: &Self) -> Ordering {
        self.prefix_prob
            .total_cmp(&other.prefix_prob)
            .then_with(|| other.prefix.cmp(&self.prefix))
    }
}

/// Best-first search for the most probable labelling of a segment.
/// Returns `None` when more than `node_budget` prefixes would need expanding.
fn best_first_search(lp: &[Vec<f64>], blank: usize, node_budget: usize) -> Option<(Vec<usize>, f64)> {
    let n = lp.len();
    debug_assert!(n > 0);

    let mut root_blank = Vec::with_capacity(n);
    let mut acc = 0.0;
    for row in lp {
        acc += row[blank];
        root_blank.push(acc);
    }
    let mut best = (Vec::new(), root_blank[n - 1]);
    let mut heap = BinaryHeap::new();
    heap.push(PrefixNode {
        prefix: Vec::new(),
        gamma_label: vec![f64::NEG_INFINITY; n],
        gamma_blank: root_blank,
        prefix_prob: 0.0,
    });

    let mut expansions = 0usize;
    while let Some(node) = heap.pop() {
        if node.prefix_prob < best.1 {
            break;
        }
        if expansions == node_budget {
            return None;
        }
        expansions += 1;
        let last = node.prefix.last().copied();
        for k in 0..blank {
            let mut gamma_label = vec![f64::NEG_INFINITY; n];
            let mut gamma_blank = vec![f64::NEG_INFINITY; n];
            if node.prefix.is_empty() {
                gamma_label[0] = lp[0][k];
            }
            let mut prefix_prob = gamma_label[0];
            for t in 1..n {
                let from_parent = if Some(k) == last {
                    node.gamma_blank[t - 1]
                } else {
                    log_add(node.gamma_blank[t - 1], node.gamma_label[t - 1])
                };
                gamma_label[t] = lp[t][k] + log_add(from_parent, gamma_label[t - 1]);
                gamma_blank[t] = lp[t][blank] + log_add(gamma_blank[t - 1], gamma_label[t - 1]);
                prefix_prob = log_add(prefix_prob, lp[t][k] + from_parent);
            }
            let full = log_add(gamma_label[n - 1], gamma_blank[n - 1]);
            let mut prefix = node.prefix.clone();
            prefix.push(k);
            if rank(full, &prefix, best.1, &best.0) == Ordering::Less {
                best = (prefix.clone(), full);
            }
            if prefix_prob > f64::NEG_INFINITY && prefix_prob >= best.1 {
                heap.push(PrefixNode {
                    prefix,
                    gamma_label,
                    gamma_blank,
                    prefix_prob,
                });
            }
        }
    }
    Some(best)
}

/// Prefix search decoding.
///
/// Frames whose blank probability exceeds `blank_threshold` split the input
/// into segments; each is decoded by an exact best-first prefix search and
/// the results are concatenated. Boundary frames contribute their blank
/// log-probability to the score. A segment that exhausts `node_budget` is
/// decoded with beam search instead and the result is marked approximate.
pub fn prefix_search_decode(
    probs: &PosteriorMatrix,
    input_len: usize,
    blank_threshold: f64,
    node_budget: usize,
) -> Result<DecodeResult> {
    check_input_len(probs, input_len)?;
    if !(blank_threshold > 0.5 && blank_threshold <= 1.0) {
        return Err(Error::domain(format!(
            "blank threshold {blank_threshold} is outside (0.5, 1]"
        )));
    }
    let blank = probs.blank();
    let mut labels = Vec::new();
    let mut score = 0.0;
    let mut approximate = false;

    let mut decode_segment = |start: usize, end: usize| -> Result<()> {
        if start == end {
            return Ok(());
        }
        let segment = probs.frames(start, end);
        let lp = log_probs(&segment, end - start);
        match best_first_search(&lp, blank, node_budget) {
            Some((seg_labels, seg_score)) => {
                labels.extend(seg_labels);
                score += seg_score;
            }
            None => {
                let beam = beam_search_decode(&segment, end - start, FALLBACK_BEAM_WIDTH, 1)?;
                let best = beam.best();
                labels.extend_from_slice(best.labels.as_slice());
                score += best.score;
                approximate = true;
            }
        }
        Ok(())
    };

    let mut start = 0;
    let mut boundary_score = 0.0;
    for t in 0..input_len {
        let p_blank = probs.get(t, blank);
        if p_blank > blank_threshold {
            decode_segment(start, t)?;
            boundary_score += p_blank.ln();
            start = t + 1;
        }
    }
    decode_segment(start, input_len)?;

    Ok(DecodeResult {
        paths: vec![ScoredLabels {
            labels: LabelSequence(labels),
            score: score + boundary_score,
        }],
        approximate,
    })
}
