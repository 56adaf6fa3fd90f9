//! Reference implementations used as test oracles. They favour obviousness
//! over speed and share no code with the library.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;

/// Removes repeats, then blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in path {
        if Some(s) != prev && s != blank {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// Calls `f` on every length-`frames` path over `classes` symbols.
pub fn for_each_path(frames: usize, classes: usize, mut f: impl FnMut(&[usize])) {
    let mut path = vec![0usize; frames];
    loop {
        f(&path);
        let mut t = frames;
        loop {
            if t == 0 {
                return;
            }
            t -= 1;
            path[t] += 1;
            if path[t] < classes {
                break;
            }
            path[t] = 0;
        }
    }
}

pub fn path_probability(probs: &[Vec<f64>], path: &[usize]) -> f64 {
    path.iter().enumerate().map(|(t, &k)| probs[t][k]).product()
}

/// Sum of the probabilities of every path that collapses to `labels`.
pub fn sequence_probability(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let classes = probs.first().map_or(1, Vec::len);
    let blank = classes - 1;
    let mut total = 0.0;
    for_each_path(probs.len(), classes, |p| {
        if collapse(p, blank) == labels {
            total += path_probability(probs, p);
        }
    });
    total
}

/// Probability of every label sequence reachable from the posteriors.
pub fn sequence_distribution(probs: &[Vec<f64>]) -> BTreeMap<Vec<usize>, f64> {
    let classes = probs.first().map_or(1, Vec::len);
    let blank = classes - 1;
    let mut dist = BTreeMap::new();
    for_each_path(probs.len(), classes, |p| {
        *dist.entry(collapse(p, blank)).or_insert(0.0) += path_probability(probs, p);
    });
    dist
}

/// Most probable label sequence; ties go to the lexicographically smaller.
pub fn exact_top1(probs: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    for (labels, p) in sequence_distribution(probs) {
        if best.as_ref().is_none_or(|(_, q)| p > *q) {
            best = Some((labels, p));
        }
    }
    best.expect("at least one path")
}

/// Levenshtein distance with the full (|a|+1) x (|b|+1) table.
pub fn edit_distance_table(a: &[usize], b: &[usize]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

/// Row-stochastic matrix with entries bounded away from zero.
pub fn random_posteriors(rng: &mut impl Rng, frames: usize, classes: usize) -> Vec<Vec<f64>> {
    (0..frames)
        .map(|_| {
            let row: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.01..1.0)).collect();
            let sum: f64 = row.iter().sum();
            row.into_iter().map(|x| x / sum).collect()
        })
        .collect()
}

pub fn random_labels(rng: &mut impl Rng, len: usize, num_labels: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(0..num_labels)).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central difference of `f` at `x[i]` with step `h`.
pub fn central_difference(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let plus = f(x);
    x[i] = orig - h;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * h)
}
