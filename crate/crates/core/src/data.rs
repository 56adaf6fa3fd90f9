//! Datasets, padded batches and the synthetic sequence generator.
//!
//! Datasets are stored as JSON Lines: a header object
//! `{"feature_dim": F, "num_labels": N}` followed by one record per sequence,
//! `{"features": [[f64; F]; T], "labels": [usize; L]}`.

use std::borrow::Cow;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::LabelSequence;
use crate::matrix::Matrix;

/// Label value used to pad label rows of a [`PaddedBatch`].
pub const LABEL_PADDING: i64 = -1;

/// Observation sequences with their valid lengths.
pub trait Observations: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn feature_dim(&self) -> usize;

    /// Feature rows of sequence `i`; may include padding past `input_len(i)`.
    fn features(&self, i: usize) -> Cow<'_, Matrix>;

    fn input_len(&self, i: usize) -> usize;
}

/// Observations paired with reference labels.
pub trait LabeledObservations: Observations {
    /// The first `label_len(i)` labels of sequence `i`.
    fn labels(&self, i: usize) -> LabelSequence;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    /// `T x feature_dim`.
    pub features: Matrix,
    pub labels: LabelSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_dim: usize,
    pub num_labels: usize,
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn new(feature_dim: usize, num_labels: usize, sequences: Vec<Sequence>) -> Result<Self> {
        let d = Dataset {
            feature_dim,
            num_labels,
            sequences,
        };
        for (i, s) in d.sequences.iter().enumerate() {
            d.check_sequence(s).map_err(|e| e.at_sequence(i))?;
        }
        Ok(d)
    }

    fn check_sequence(&self, s: &Sequence) -> Result<()> {
        if s.features.rows() == 0 {
            return Err(Error::domain("sequence has no frames"));
        }
        if s.features.cols() != self.feature_dim {
            return Err(Error::Shape(format!(
                "frames have {} features, expected {}",
                s.features.cols(),
                self.feature_dim
            )));
        }
        s.labels.validate(self.num_labels)
    }

    pub fn total_frames(&self) -> usize {
        self.sequences.iter().map(|s| s.features.rows()).sum()
    }

    /// Sub-dataset with the given sequence indices, in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            feature_dim: self.feature_dim,
            num_labels: self.num_labels,
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
        }
    }
}

impl Observations for Dataset {
    fn len(&self) -> usize {
        self.sequences.len()
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn features(&self, i: usize) -> Cow<'_, Matrix> {
        Cow::Borrowed(&self.sequences[i].features)
    }

    fn input_len(&self, i: usize) -> usize {
        self.sequences[i].features.rows()
    }
}

impl LabeledObservations for Dataset {
    fn labels(&self, i: usize) -> LabelSequence {
        self.sequences[i].labels.clone()
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    feature_dim: usize,
    num_labels: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    features: Vec<Vec<f64>>,
    #[serde(default)]
    labels: Vec<usize>,
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_error(path, e))?;
    parse_dataset(BufReader::new(file), path)
}

/// Parses dataset JSON Lines; `path` is only used in error messages.
pub fn parse_dataset(reader: impl BufRead, path: &Path) -> Result<Dataset> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut header: Option<Header> = None;
    let mut sequences = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| io_error(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let Some(h) = &header else {
            let h: Header = serde_json::from_str(&line)
                .map_err(|e| parse_err(line_no, format!("invalid header: {e}")))?;
            if h.feature_dim == 0 || h.num_labels == 0 {
                return Err(parse_err(line_no, "feature_dim and num_labels must be positive".into()));
            }
            header = Some(h);
            continue;
        };
        let record: Record = serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
        if record.features.is_empty() {
            return Err(parse_err(line_no, "sequence has no frames".into()));
        }
        if let Some(t) = record.features.iter().position(|r| r.len() != h.feature_dim) {
            return Err(parse_err(
                line_no,
                format!(
                    "frame {t} has {} features, expected {}",
                    record.features[t].len(),
                    h.feature_dim
                ),
            ));
        }
        if let Some(&l) = record.labels.iter().find(|&&l| l >= h.num_labels) {
            return Err(parse_err(
                line_no,
                format!("label {l} is outside [0, {})", h.num_labels),
            ));
        }
        let features = Matrix::from_rows(&record.features).map_err(|e| parse_err(line_no, e.to_string()))?;
        sequences.push(Sequence {
            features,
            labels: LabelSequence(record.labels),
        });
    }
    let h = header.ok_or_else(|| parse_err(1, "missing header line".into()))?;
    Ok(Dataset {
        feature_dim: h.feature_dim,
        num_labels: h.num_labels,
        sequences,
    })
}

pub fn write_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| io_error(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset_to(&mut w, dataset).map_err(|e| io_error(path, e))?;
    w.flush().map_err(|e| io_error(path, e))
}

pub fn write_dataset_to(w: &mut impl Write, dataset: &Dataset) -> std::io::Result<()> {
    let header = Header {
        feature_dim: dataset.feature_dim,
        num_labels: dataset.num_labels,
    };
    serde_json::to_writer(&mut *w, &header)?;
    writeln!(w)?;
    for s in &dataset.sequences {
        let record = Record {
            features: s.features.to_rows(),
            labels: s.labels.0.clone(),
        };
        serde_json::to_writer(&mut *w, &record)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Fixed-size batch: features `B x T_max x F` (zero padded), labels
/// `B x L_max` (padded with [`LABEL_PADDING`]), and the true lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    feature_dim: usize,
    max_frames: usize,
    max_labels: usize,
    features: Vec<f64>,
    labels: Vec<i64>,
    input_lengths: Vec<usize>,
    label_lengths: Vec<usize>,
}

impl PaddedBatch {
    pub fn from_sequences(sequences: &[&Sequence], feature_dim: usize) -> Result<Self> {
        let max_frames = sequences.iter().map(|s| s.features.rows()).max().unwrap_or(0);
        let max_labels = sequences.iter().map(|s| s.labels.len()).max().unwrap_or(0);
        Self::padded_to(sequences, feature_dim, max_frames, max_labels)
    }

    fn padded_to(
        sequences: &[&Sequence],
        feature_dim: usize,
        max_frames: usize,
        max_labels: usize,
    ) -> Result<Self> {
        let b = sequences.len();
        let mut features = vec![0.0; b * max_frames * feature_dim];
        let mut labels = vec![LABEL_PADDING; b * max_labels];
        let mut input_lengths = Vec::with_capacity(b);
        let mut label_lengths = Vec::with_capacity(b);
        for (i, s) in sequences.iter().enumerate() {
            let t = s.features.rows();
            if s.features.cols() != feature_dim {
                return Err(Error::Shape(format!(
                    "sequence {i} has {} features per frame, expected {feature_dim}",
                    s.features.cols()
                )));
            }
            if t > max_frames || s.labels.len() > max_labels {
                return Err(Error::domain(format!("sequence {i} does not fit the padding")));
            }
            let start = i * max_frames * feature_dim;
            features[start..start + t * feature_dim].copy_from_slice(s.features.as_slice());
            for (j, &l) in s.labels.as_slice().iter().enumerate() {
                labels[i * max_labels + j] = l as i64;
            }
            input_lengths.push(t);
            label_lengths.push(s.labels.len());
        }
        Ok(PaddedBatch {
            feature_dim,
            max_frames,
            max_labels,
            features,
            labels,
            input_lengths,
            label_lengths,
        })
    }

    /// The same sequences re-padded to larger maxima.
    pub fn with_padding(&self, max_frames: usize, max_labels: usize) -> Result<Self> {
        let seqs: Vec<Sequence> = (0..self.len()).map(|i| self.sequence(i)).collect();
        let refs: Vec<&Sequence> = seqs.iter().collect();
        Self::padded_to(&refs, self.feature_dim, max_frames, max_labels)
    }

    /// Sequence `i` with padding removed.
    pub fn sequence(&self, i: usize) -> Sequence {
        Sequence {
            features: self.features(i).head_rows(self.input_lengths[i]),
            labels: LabeledObservations::labels(self, i),
        }
    }

    pub fn max_frames(&self) -> usize {
        self.max_frames
    }

    pub fn max_labels(&self) -> usize {
        self.max_labels
    }

    pub fn input_lengths(&self) -> &[usize] {
        &self.input_lengths
    }

    pub fn label_lengths(&self) -> &[usize] {
        &self.label_lengths
    }

    /// Raw padded feature buffer, `B x T_max x F`.
    pub fn feature_buffer(&self) -> &[f64] {
        &self.features
    }

    /// Raw padded label buffer, `B x L_max`.
    pub fn label_buffer(&self) -> &[i64] {
        &self.labels
    }
}

impl Observations for PaddedBatch {
    fn len(&self) -> usize {
        self.input_lengths.len()
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn features(&self, i: usize) -> Cow<'_, Matrix> {
        let stride = self.max_frames * self.feature_dim;
        let data = self.features[i * stride..(i + 1) * stride].to_vec();
        Cow::Owned(Matrix::from_vec(self.max_frames, self.feature_dim, data).expect("batch layout"))
    }

    fn input_len(&self, i: usize) -> usize {
        self.input_lengths[i]
    }
}

impl LabeledObservations for PaddedBatch {
    fn labels(&self, i: usize) -> LabelSequence {
        let row = &self.labels[i * self.max_labels..i * self.max_labels + self.label_lengths[i]];
        LabelSequence(
            row.iter()
                .map(|&l| usize::try_from(l).expect("label padding inside the label length"))
                .collect(),
        )
    }
}

/// Shuffles sequence order with `seed`, then cuts consecutive batches.
pub fn make_batches(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<Vec<PaddedBatch>> {
    if batch_size == 0 {
        return Err(Error::domain("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..dataset.sequences.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .chunks(batch_size)
        .map(|chunk| {
            let seqs: Vec<&Sequence> = chunk.iter().map(|&i| &dataset.sequences[i]).collect();
            PaddedBatch::from_sequences(&seqs, dataset.feature_dim)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_sequences: usize,
    pub num_labels: usize,
    pub feature_dim: usize,
    /// Inclusive range of frames emitted per label.
    pub frames_per_label: (usize, usize),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_sequences: 500,
            num_labels: 4,
            feature_dim: 4,
            frames_per_label: (2, 4),
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

pub const SYNTHETIC_MAX_LABELS: usize = 5;

/// Unsegmented toy data: each label emits a run of noisy one-hot frames.
///
/// Label sequences have length uniform in `[1, 5]` and never repeat a label
/// back to back, so runs of frames are always separable.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Dataset> {
    let (lo, hi) = config.frames_per_label;
    if config.num_labels == 0 || config.feature_dim < config.num_labels {
        return Err(Error::domain(format!(
            "feature_dim {} must be at least num_labels {} (and num_labels positive)",
            config.feature_dim, config.num_labels
        )));
    }
    if lo == 0 || lo > hi {
        return Err(Error::domain(format!("invalid frames-per-label range [{lo}, {hi}]")));
    }
    if !(config.noise_sigma.is_finite() && config.noise_sigma >= 0.0) {
        return Err(Error::domain(format!("invalid noise sigma {}", config.noise_sigma)));
    }
    let noise = Normal::new(0.0, config.noise_sigma).expect("checked sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sequences = Vec::with_capacity(config.num_sequences);
    for _ in 0..config.num_sequences {
        let len = rng.gen_range(1..=SYNTHETIC_MAX_LABELS);
        let mut labels = Vec::with_capacity(len);
        while labels.len() < len {
            let l = rng.gen_range(0..config.num_labels);
            if config.num_labels == 1 || labels.last() != Some(&l) {
                labels.push(l);
            }
        }
        if config.num_labels == 1 {
            labels.truncate(1);
        }
        let mut rows = Vec::new();
        for &l in &labels {
            let k = rng.gen_range(lo..=hi);
            for _ in 0..k {
                let mut row = vec![0.0; config.feature_dim];
                row[l] = 1.0;
                if config.noise_sigma > 0.0 {
                    for x in &mut row {
                        *x += noise.sample(&mut rng);
                    }
                }
                rows.push(row);
            }
        }
        sequences.push(Sequence {
            features: Matrix::from_rows(&rows)?,
            labels: LabelSequence(labels),
        });
    }
    Dataset::new(config.feature_dim, config.num_labels, sequences)
}
