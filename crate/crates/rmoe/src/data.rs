//! Event vocabularies, sliding-window segmentation, the synthetic
//! heterogeneous-population generator with its exact conditional oracle, and
//! dataset (de)serialization.
//!
//! Dataset file format (JSON lines):
//!   line 1: `{"format_version":1,"vocab":{...},"window_hours":24.0,"seed":7,
//!            "n_train":8,"n_test":2}`
//!   then one line per sequence, train block first, then test block:
//!   `{"id":"seq-00000","windows":[[0,3],[1],[0,1,2]]}`
//! Windows are sorted set-bit indices (sparse), not dense vectors. The last
//! partially filled time window of a stream is kept.

use crate::tensor::{affine, derive_seed, sigmoid, sigmoid_vec, Matrix, Rng};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error("vocabulary hash mismatch: expected {expected:016x}, found {found:016x}")]
    VocabHashMismatch { expected: u64, found: u64 },
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Ordered set of input event types and the target subset to predict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventVocabulary {
    pub input_names: Vec<String>,
    pub target_indices: Vec<usize>,
}

impl EventVocabulary {
    /// Synthetic-mode vocabulary: generated names, all events are targets.
    pub fn synthetic(n_events: usize) -> Self {
        EventVocabulary {
            input_names: (0..n_events).map(|i| format!("event_{i:03}")).collect(),
            target_indices: (0..n_events).collect(),
        }
    }

    pub fn n_events(&self) -> usize {
        self.input_names.len()
    }

    pub fn n_targets(&self) -> usize {
        self.target_indices.len()
    }

    pub fn target_names(&self) -> Vec<&str> {
        self.target_indices
            .iter()
            .map(|&i| self.input_names[i].as_str())
            .collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.input_names.is_empty() {
            return Err(DataError::Invalid("vocabulary has no events".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for name in &self.input_names {
            if !seen.insert(name) {
                return Err(DataError::Invalid(format!("duplicate event name {name:?}")));
            }
        }
        if self.target_indices.is_empty() {
            return Err(DataError::Invalid("target set is empty".into()));
        }
        if !self.target_indices.windows(2).all(|w| w[0] < w[1]) {
            return Err(DataError::Invalid(
                "target indices must be sorted and unique".into(),
            ));
        }
        if *self.target_indices.last().unwrap() >= self.input_names.len() {
            return Err(DataError::Invalid(format!(
                "target index {} out of range for {} events",
                self.target_indices.last().unwrap(),
                self.input_names.len()
            )));
        }
        Ok(())
    }

    /// FNV-1a over names and target indices; used to pair checkpoints with
    /// the datasets they were trained on.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        };
        for name in &self.input_names {
            eat(name.as_bytes());
            eat(&[0xFF]);
        }
        for &t in &self.target_indices {
            eat(&(t as u64).to_le_bytes());
        }
        h
    }

    pub fn parse_json(text: &str) -> Result<Self, DataError> {
        let vocab: EventVocabulary =
            serde_json::from_str(text).map_err(|e| DataError::Invalid(e.to_string()))?;
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::parse_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).expect("vocab serializes");
        std::fs::write(path, text).map_err(|e| io_err(path, e))
    }
}

/// One admission as raw (timestamp in hours, event index) pairs.
#[derive(Debug, Clone)]
pub struct RawStream {
    pub id: String,
    pub events: Vec<(f64, usize)>,
}

/// One admission segmented into binary event vectors, one per time window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowedSequence {
    pub id: String,
    pub windows: Vec<Vec<u8>>,
}

impl WindowedSequence {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Segment a raw stream into binary window vectors. Window i covers
/// [i·W, (i+1)·W); a bit is set iff the event occurred at least once in the
/// interval; the trailing partial window is kept.
pub fn window_segment(
    stream: &RawStream,
    window_hours: f64,
    vocab: &EventVocabulary,
) -> Result<WindowedSequence, DataError> {
    assert!(window_hours > 0.0, "window must be positive, got {window_hours}");
    let n_events = vocab.n_events();
    let mut max_ts: f64 = -1.0;
    for &(ts, idx) in &stream.events {
        if !ts.is_finite() || ts < 0.0 {
            return Err(DataError::Invalid(format!(
                "stream {}: bad timestamp {ts}",
                stream.id
            )));
        }
        if idx >= n_events {
            return Err(DataError::Invalid(format!(
                "stream {}: event index {idx} out of vocabulary (|E| = {n_events})",
                stream.id
            )));
        }
        max_ts = max_ts.max(ts);
    }
    if stream.events.is_empty() {
        return Ok(WindowedSequence {
            id: stream.id.clone(),
            windows: Vec::new(),
        });
    }
    const MAX_WINDOWS: f64 = 1e7;
    if max_ts / window_hours >= MAX_WINDOWS {
        return Err(DataError::Invalid(format!(
            "stream {}: timestamp {max_ts} spans more than {MAX_WINDOWS} windows of {window_hours}h",
            stream.id
        )));
    }
    let n_windows = (max_ts / window_hours).floor() as usize + 1;
    let mut windows = vec![vec![0u8; n_events]; n_windows];
    for &(ts, idx) in &stream.events {
        let w = (ts / window_hours).floor() as usize;
        windows[w][idx] = 1;
    }
    Ok(WindowedSequence {
        id: stream.id.clone(),
        windows,
    })
}

/// Generator parameters for a population of K latent subpopulations with
/// first-order logistic dynamics, plus everything needed for the exact
/// conditional oracle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub n_events: usize,
    /// Per-subpopulation transition weights, each |E| x |E|.
    pub transition: Vec<Matrix>,
    /// Per-subpopulation per-event bias.
    pub bias: Vec<Vec<f64>>,
    /// Mixing weights over subpopulations (simplex).
    pub mixing: Vec<f64>,
    /// Per-subpopulation Bernoulli rates for the first window.
    pub init_rates: Vec<Vec<f64>>,
}

impl SyntheticWorld {
    pub fn n_subpops(&self) -> usize {
        self.mixing.len()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let k = self.mixing.len();
        if k == 0 {
            return Err(DataError::Invalid("world has no subpopulations".into()));
        }
        if self.n_events == 0 {
            return Err(DataError::Invalid("world has no events".into()));
        }
        if self.transition.len() != k || self.bias.len() != k || self.init_rates.len() != k {
            return Err(DataError::Invalid(format!(
                "world arrays disagree on K: mixing {k}, transition {}, bias {}, init_rates {}",
                self.transition.len(),
                self.bias.len(),
                self.init_rates.len()
            )));
        }
        let sum: f64 = self.mixing.iter().sum();
        if self.mixing.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) || (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::Invalid(format!(
                "mixing weights must be a simplex (sum {sum})"
            )));
        }
        for i in 0..k {
            let a = &self.transition[i];
            if a.rows() != self.n_events || a.cols() != self.n_events {
                return Err(DataError::Invalid(format!(
                    "transition[{i}] is {}x{}, expected {n}x{n}",
                    a.rows(),
                    a.cols(),
                    n = self.n_events
                )));
            }
            if !a.is_finite() {
                return Err(DataError::Invalid(format!("transition[{i}] not finite")));
            }
            if self.bias[i].len() != self.n_events || self.init_rates[i].len() != self.n_events {
                return Err(DataError::Invalid(format!("vectors of subpop {i} have wrong length")));
            }
            if self.bias[i].iter().any(|v| !v.is_finite()) {
                return Err(DataError::Invalid(format!("bias[{i}] not finite")));
            }
            if self.init_rates[i].iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(DataError::Invalid(format!("init_rates[{i}] outside [0,1]")));
            }
        }
        Ok(())
    }

    /// Sample a random heterogeneous world in a rare-event regime.
    ///
    /// The dynamics decompose into a rich population-common part plus small
    /// contradictory subpopulation-specific deltas. Every subpopulation
    /// shares the same dense common couplings and baseline rates — learning
    /// them takes real model capacity — while a handful of delta couplings
    /// per event reuse the same source positions with independently drawn
    /// signed weights, so the same observable context leads to different
    /// next-window distributions across subpopulations. The subpopulation
    /// identifies itself through a high-rate marker block in the first
    /// window and a persistently elevated marker rate afterwards. Balanced
    /// signs keep bursts subcritical and occurrence ratios low.
    pub fn sample(k_subpops: usize, n_events: usize, rng: &mut Rng) -> Self {
        const COMMON_FAN: usize = 8;
        const DELTA_FAN: usize = 3;
        const MARKER_WIDTH: usize = 3;

        // population-common structure, drawn once and shared by every subpopulation
        let mut common = Matrix::zeros(n_events, n_events);
        for j in 0..n_events {
            for _ in 0..COMMON_FAN.min(n_events) {
                let s = rng.below(n_events);
                let mag = rng.uniform(1.0, 3.0);
                common.set(j, s, if rng.bernoulli(0.5) { mag } else { -mag });
            }
        }
        let common_bias: Vec<f64> = (0..n_events).map(|_| rng.uniform(-4.0, -2.0)).collect();
        let delta_sources: Vec<Vec<usize>> = (0..n_events)
            .map(|_| (0..DELTA_FAN.min(n_events)).map(|_| rng.below(n_events)).collect())
            .collect();

        let mut transition = Vec::with_capacity(k_subpops);
        let mut bias = Vec::with_capacity(k_subpops);
        let mut init_rates = Vec::with_capacity(k_subpops);
        for k in 0..k_subpops {
            let block = (k * MARKER_WIDTH) % n_events;
            let in_block = |j: usize| j >= block && j < block + MARKER_WIDTH;
            let mut a = common.clone();
            for (j, srcs) in delta_sources.iter().enumerate() {
                for &s in srcs {
                    let mag = rng.uniform(2.0, 4.0);
                    let w = if rng.bernoulli(0.5) { mag } else { -mag };
                    a.set(j, s, a.get(j, s) + w);
                }
            }
            let b: Vec<f64> = (0..n_events)
                .map(|j| {
                    if in_block(j) {
                        -1.1 // persistent ~25% marker rate identifying the subpopulation
                    } else {
                        common_bias[j]
                    }
                })
                .collect();
            let rho: Vec<f64> = (0..n_events)
                .map(|j| if in_block(j) { 0.8 } else { rng.uniform(0.02, 0.08) })
                .collect();
            transition.push(a);
            bias.push(b);
            init_rates.push(rho);
        }
        SyntheticWorld {
            n_events,
            transition,
            bias,
            mixing: vec![1.0 / k_subpops as f64; k_subpops],
            init_rates,
        }
    }

    pub fn parse_json(text: &str) -> Result<Self, DataError> {
        let world: SyntheticWorld =
            serde_json::from_str(text).map_err(|e| DataError::Invalid(e.to_string()))?;
        world.validate()?;
        Ok(world)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::parse_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string(self).expect("world serializes");
        std::fs::write(path, text).map_err(|e| io_err(path, e))
    }
}

/// Exact conditional probabilities the generator samples from:
/// σ(A_k·y_t + b_k), computed through the shared linear-algebra path (the
/// generator deliberately uses its own scalar loop instead).
pub fn oracle_predict(world: &SyntheticWorld, k: usize, y_t: &[u8]) -> Vec<f64> {
    assert!(k < world.n_subpops(), "subpopulation {k} out of range");
    let y_f: Vec<f64> = y_t.iter().map(|&b| b as f64).collect();
    sigmoid_vec(&affine(&world.transition[k], &y_f, &world.bias[k]))
}

/// Sample the next window given the previous one. Scalar-loop implementation,
/// kept independent of `oracle_predict`'s path on purpose so the two can be
/// cross-checked.
pub fn sample_next(world: &SyntheticWorld, k: usize, y_t: &[u8], rng: &mut Rng) -> Vec<u8> {
    let n = world.n_events;
    let a = &world.transition[k];
    let mut next = vec![0u8; n];
    for j in 0..n {
        let mut logit = world.bias[k][j];
        let row = a.row(j);
        for (w, &bit) in row.iter().zip(y_t) {
            if bit == 1 {
                logit += w;
            }
        }
        next[j] = rng.bernoulli(sigmoid(logit)) as u8;
    }
    next
}

/// Generate sequences from the world. Each sequence derives its own child
/// seed, so generation is order-independent and parallelizable. Labels are
/// the latent subpopulation of each sequence, returned for oracle evaluation
/// only — never fed to models.
pub fn generate_synthetic(
    world: &SyntheticWorld,
    n_sequences: usize,
    length_range: (usize, usize),
    seed: u64,
) -> (Vec<WindowedSequence>, Vec<usize>) {
    let (lo, hi) = length_range;
    assert!(lo >= 2, "sequences need at least 2 windows, got min length {lo}");
    assert!(lo <= hi, "length range {lo}..={hi} is empty");
    let mut seqs = Vec::with_capacity(n_sequences);
    let mut labels = Vec::with_capacity(n_sequences);
    for i in 0..n_sequences {
        let mut rng = Rng::new(derive_seed(seed, i as u64));
        let len = lo + rng.below(hi - lo + 1);
        let k = rng.categorical(&world.mixing);
        let mut windows = Vec::with_capacity(len);
        let first: Vec<u8> = world.init_rates[k]
            .iter()
            .map(|&p| rng.bernoulli(p) as u8)
            .collect();
        windows.push(first);
        for t in 1..len {
            let prev = &windows[t - 1];
            let next = sample_next(world, k, prev, &mut rng);
            windows.push(next);
        }
        seqs.push(WindowedSequence {
            id: format!("seq-{i:05}"),
            windows,
        });
        labels.push(k);
    }
    (seqs, labels)
}

/// Train/test partition of a set of sequences.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<WindowedSequence>,
    pub test: Vec<WindowedSequence>,
    pub test_fraction: f64,
    pub seed: u64,
}

/// Stable shuffle under the seed, then split with floor semantics on the
/// test size (at least one test sequence).
pub fn split_train_test(
    mut sequences: Vec<WindowedSequence>,
    test_fraction: f64,
    seed: u64,
) -> DatasetSplit {
    assert!(sequences.len() >= 2, "need at least 2 sequences to split");
    assert!((0.0..1.0).contains(&test_fraction));
    let mut rng = Rng::new(derive_seed(seed, 0x5A11));
    rng.shuffle(&mut sequences);
    let n_test = ((sequences.len() as f64 * test_fraction).floor() as usize).max(1);
    let test = sequences.split_off(sequences.len() - n_test);
    DatasetSplit {
        train: sequences,
        test,
        test_fraction,
        seed,
    }
}

/// A dataset file in memory: vocabulary, segmentation metadata, split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: EventVocabulary,
    pub window_hours: f64,
    pub seed: u64,
    pub split: DatasetSplit,
}

impl Dataset {
    pub fn check_vocab_hash(&self, expected: u64) -> Result<(), DataError> {
        let found = self.vocab.hash();
        if found != expected {
            return Err(DataError::VocabHashMismatch { expected, found });
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format_version: u32,
    vocab: EventVocabulary,
    window_hours: f64,
    seed: u64,
    n_train: usize,
    n_test: usize,
}

#[derive(Serialize, Deserialize)]
struct DatasetLine {
    id: String,
    windows: Vec<Vec<usize>>,
}

fn sequence_to_line(seq: &WindowedSequence) -> DatasetLine {
    DatasetLine {
        id: seq.id.clone(),
        windows: seq
            .windows
            .iter()
            .map(|w| {
                w.iter()
                    .enumerate()
                    .filter(|(_, &b)| b == 1)
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect(),
    }
}

fn line_to_sequence(
    line: DatasetLine,
    n_events: usize,
    line_no: usize,
) -> Result<WindowedSequence, DataError> {
    let mut windows = Vec::with_capacity(line.windows.len());
    for sparse in &line.windows {
        let mut dense = vec![0u8; n_events];
        let mut prev: Option<usize> = None;
        for &idx in sparse {
            if idx >= n_events {
                return Err(DataError::Line {
                    line: line_no,
                    msg: format!("event index {idx} out of vocabulary (|E| = {n_events})"),
                });
            }
            if prev.is_some_and(|p| p >= idx) {
                return Err(DataError::Line {
                    line: line_no,
                    msg: "window indices must be sorted and unique".into(),
                });
            }
            prev = Some(idx);
            dense[idx] = 1;
        }
        windows.push(dense);
    }
    Ok(WindowedSequence {
        id: line.id,
        windows,
    })
}

pub fn dataset_to_jsonl(ds: &Dataset) -> String {
    let header = DatasetHeader {
        format_version: 1,
        vocab: ds.vocab.clone(),
        window_hours: ds.window_hours,
        seed: ds.seed,
        n_train: ds.split.train.len(),
        n_test: ds.split.test.len(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for seq in ds.split.train.iter().chain(&ds.split.test) {
        let line = serde_json::to_string(&sequence_to_line(seq)).expect("line serializes");
        let _ = writeln!(out, "{line}");
    }
    out
}

/// Parse a dataset from JSON-lines text. Errors carry 1-based line numbers.
pub fn parse_dataset(text: &str) -> Result<Dataset, DataError> {
    let mut lines = text.lines().enumerate();
    let (_, header_line) = lines.next().ok_or(DataError::Line {
        line: 1,
        msg: "empty file, expected header".into(),
    })?;
    let header: DatasetHeader =
        serde_json::from_str(header_line).map_err(|e| DataError::Line {
            line: 1,
            msg: format!("bad header: {e}"),
        })?;
    if header.format_version != 1 {
        return Err(DataError::Line {
            line: 1,
            msg: format!("unsupported format_version {}", header.format_version),
        });
    }
    header.vocab.validate()?;
    if !header.window_hours.is_finite() || header.window_hours <= 0.0 {
        return Err(DataError::Line {
            line: 1,
            msg: format!("bad window_hours {}", header.window_hours),
        });
    }
    let n_events = header.vocab.n_events();
    let mut sequences = Vec::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let line: DatasetLine = serde_json::from_str(raw).map_err(|e| DataError::Line {
            line: line_no,
            msg: e.to_string(),
        })?;
        sequences.push(line_to_sequence(line, n_events, line_no)?);
    }
    let expected = header.n_train + header.n_test;
    if sequences.len() != expected {
        return Err(DataError::Line {
            line: sequences.len() + 1,
            msg: format!(
                "expected {} sequences ({} train + {} test), found {}",
                expected,
                header.n_train,
                header.n_test,
                sequences.len()
            ),
        });
    }
    let test = sequences.split_off(header.n_train);
    let n_total = header.n_train + header.n_test;
    Ok(Dataset {
        vocab: header.vocab,
        window_hours: header.window_hours,
        seed: header.seed,
        split: DatasetSplit {
            train: sequences,
            test,
            test_fraction: if n_total > 0 {
                header.n_test as f64 / n_total as f64
            } else {
                0.0
            },
            seed: header.seed,
        },
    })
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<(), DataError> {
    std::fs::write(path, dataset_to_jsonl(ds)).map_err(|e| io_err(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_dataset(&text)
}

/// Extract the per-step target vectors (restricted to E′) for a sequence:
/// entry t is the target for the prediction made after consuming window t.
pub fn targets_of(seq: &WindowedSequence, vocab: &EventVocabulary) -> Vec<Vec<u8>> {
    (1..seq.windows.len())
        .map(|t| {
            vocab
                .target_indices
                .iter()
                .map(|&j| seq.windows[t][j])
                .collect()
        })
        .collect()
}
