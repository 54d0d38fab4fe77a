//! Sequential task construction and supersample bookkeeping.
//!
//! A [`TaskSequence`] holds `T` supersample datasets: for every task `t` and
//! pair index `j` there are two i.i.d. samples (columns 0 and 1). A fair
//! membership bit per cell ([`MembershipVectors`]) selects which column
//! trains and which tests. The replay buffer is addressed by a
//! [`BufferIndex`]: `k` distinct previous-task ids and `l` distinct sample
//! ids, giving `k·l` exemplar cells. Buffers store indices into the sequence,
//! never copies, so training and test halves stay aligned with the bits.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{tags, RngStream};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("task {task} needs {needed} samples but only {available} are available")]
    InsufficientSamples {
        task: usize,
        needed: usize,
        available: usize,
    },
    #[error("buffer wants k={k} of {prev_tasks} previous tasks")]
    BufferTasksExceeded { k: usize, prev_tasks: usize },
    #[error("buffer wants l={l} of {n} sample slots")]
    BufferSamplesExceeded { l: usize, n: usize },
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error("serialization: {0}")]
    Serialization(String),
}

/// One feature vector with its class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// Supersample data for one task: `n` pairs, two columns each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub pairs: Vec<[Sample; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub generator: String,
    pub t_count: usize,
    pub n: usize,
    pub dim: usize,
    /// Original class ids assigned to each task (split-class sequences);
    /// synthetic generators use the within-task labels directly.
    pub task_classes: Vec<Vec<usize>>,
    /// Number of within-task label values.
    pub class_count: usize,
    /// Label-noise level this sequence was built with.
    pub noise_delta: f64,
}

/// `T` supersample datasets plus their generator descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSequence {
    pub tasks: Vec<TaskData>,
    pub meta: SequenceMeta,
}

impl TaskSequence {
    pub fn t_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn n(&self) -> usize {
        self.meta.n
    }

    pub fn dim(&self) -> usize {
        self.meta.dim
    }

    pub fn sample(&self, task: usize, pair: usize, column: usize) -> &Sample {
        &self.tasks[task].pairs[pair][column]
    }

    /// Copy with one cell's columns swapped (supersample symmetry tests pair
    /// this with flipping the matching membership bit).
    pub fn with_swapped_columns(&self, task: usize, pair: usize) -> Self {
        let mut out = self.clone();
        out.tasks[task].pairs[pair].swap(0, 1);
        out
    }

    fn validate(&self) -> Result<(), TaskError> {
        if self.tasks.len() < 2 {
            return Err(TaskError::InvalidConfig("T >= 2 required".into()));
        }
        if self.meta.n < 1 {
            return Err(TaskError::InvalidConfig("n >= 1 required".into()));
        }
        for (t, task) in self.tasks.iter().enumerate() {
            if task.pairs.len() != self.meta.n {
                return Err(TaskError::InvalidConfig(format!(
                    "task {t} has {} pairs, expected {}",
                    task.pairs.len(),
                    self.meta.n
                )));
            }
            for pair in &task.pairs {
                for col in pair {
                    if col.features.len() != self.meta.dim {
                        return Err(TaskError::InvalidConfig(format!(
                            "feature dimension {} != {} in task {t}",
                            col.features.len(),
                            self.meta.dim
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// The `T×n` matrix of fair membership bits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipVectors {
    t_count: usize,
    n: usize,
    bits: Vec<u8>,
}

impl MembershipVectors {
    pub fn from_bits(t_count: usize, n: usize, bits: Vec<u8>) -> Self {
        assert_eq!(bits.len(), t_count * n);
        assert!(bits.iter().all(|&b| b <= 1));
        Self { t_count, n, bits }
    }

    pub fn bit(&self, task: usize, pair: usize) -> u8 {
        self.bits[task * self.n + pair]
    }

    pub fn t_count(&self) -> usize {
        self.t_count
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn with_flipped(&self, task: usize, pair: usize) -> Self {
        let mut out = self.clone();
        out.bits[task * self.n + pair] ^= 1;
        out
    }
}

/// The random subsets `(U, V)` addressing the replay buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferIndex {
    pub task_ids: Vec<usize>,
    pub sample_ids: Vec<usize>,
}

impl BufferIndex {
    pub fn empty() -> Self {
        Self {
            task_ids: Vec::new(),
            sample_ids: Vec::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.task_ids.len()
    }

    pub fn l(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn capacity(&self) -> usize {
        self.k() * self.l()
    }

    /// Buffer cells in canonical (task-major, then sample) order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.task_ids
            .iter()
            .flat_map(move |&u| self.sample_ids.iter().map(move |&v| (u, v)))
    }

    /// Restrict to tasks strictly before `task`, for intermediate steps of a
    /// fixed-buffer policy.
    pub fn restricted_to(&self, task: usize) -> Self {
        Self {
            task_ids: self
                .task_ids
                .iter()
                .copied()
                .filter(|&u| u < task)
                .collect(),
            sample_ids: self.sample_ids.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferSampling {
    Uniform,
    Balanced,
}

/// Config for the two-Gaussian rotating synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCfg {
    pub t_count: usize,
    pub n: usize,
    pub dim: usize,
    pub class_sep: f64,
    pub rotation_per_task: f64,
}

/// Task `t` holds two unit-covariance Gaussian classes whose mean pair is
/// `(±class_sep/2, 0, …)` rotated by `t·rotation_per_task` in the first two
/// coordinates. Both supersample columns are i.i.d. draws from that task
/// distribution, balanced across classes in expectation.
pub fn gen_synthetic_sequence(
    cfg: &SyntheticCfg,
    stream: &RngStream,
) -> Result<TaskSequence, TaskError> {
    if cfg.t_count < 2 {
        return Err(TaskError::InvalidConfig("T >= 2 required".into()));
    }
    if cfg.n < 1 {
        return Err(TaskError::InvalidConfig("n >= 1 required".into()));
    }
    if cfg.dim < 2 {
        return Err(TaskError::InvalidConfig("dim >= 2 required".into()));
    }
    if !(cfg.class_sep > 0.0) {
        return Err(TaskError::InvalidConfig(format!(
            "class_sep must be positive, got {}",
            cfg.class_sep
        )));
    }
    let mut tasks = Vec::with_capacity(cfg.t_count);
    for t in 0..cfg.t_count {
        let mut rng = stream.descend(&[tags::DATA, tags::TASK, t as u64]).rng();
        let angle = t as f64 * cfg.rotation_per_task;
        let (cos_a, sin_a) = (angle.cos(), angle.sin());
        let draw = |rng: &mut rand_chacha::ChaCha12Rng| {
            let label = usize::from(rng.random_bool(0.5));
            let offset = if label == 0 { -1.0 } else { 1.0 } * cfg.class_sep / 2.0;
            let mut features = vec![0.0f64; cfg.dim];
            for f in features.iter_mut() {
                *f = StandardNormal.sample(rng);
            }
            features[0] += cos_a * offset;
            features[1] += sin_a * offset;
            Sample { features, label }
        };
        let pairs = (0..cfg.n)
            .map(|_| [draw(&mut rng), draw(&mut rng)])
            .collect();
        tasks.push(TaskData { pairs });
    }
    let seq = TaskSequence {
        tasks,
        meta: SequenceMeta {
            generator: format!(
                "synthetic(sep={}, rot={})",
                cfg.class_sep, cfg.rotation_per_task
            ),
            t_count: cfg.t_count,
            n: cfg.n,
            dim: cfg.dim,
            task_classes: (0..cfg.t_count).map(|_| vec![0, 1]).collect(),
            class_count: 2,
            noise_delta: 0.0,
        },
    };
    seq.validate()?;
    Ok(seq)
}

/// Partition the distinct labels of `data` into `t_count` consecutive groups
/// of `classes_per_task` (lowest labels first), relabel to within-task
/// indices, and arrange `2n` without-replacement draws per task as `n`
/// supersample pairs.
pub fn split_classes(
    data: &[Sample],
    classes_per_task: usize,
    t_count: usize,
    n: usize,
    stream: &RngStream,
) -> Result<TaskSequence, TaskError> {
    if t_count < 2 {
        return Err(TaskError::InvalidConfig("T >= 2 required".into()));
    }
    if classes_per_task < 1 || n < 1 {
        return Err(TaskError::InvalidConfig(
            "classes_per_task >= 1 and n >= 1 required".into(),
        ));
    }
    if data.is_empty() {
        return Err(TaskError::InvalidConfig("empty dataset".into()));
    }
    let dim = data[0].features.len();
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in data.iter().enumerate() {
        by_label.entry(s.label).or_default().push(i);
    }
    let labels: Vec<usize> = by_label.keys().copied().collect();
    if labels.len() < t_count * classes_per_task {
        return Err(TaskError::InvalidConfig(format!(
            "{} distinct labels cannot fill {} tasks x {} classes",
            labels.len(),
            t_count,
            classes_per_task
        )));
    }
    let per_class_needed = (2 * n).div_ceil(classes_per_task);
    let mut tasks = Vec::with_capacity(t_count);
    let mut task_classes = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let chunk: Vec<usize> = labels[t * classes_per_task..(t + 1) * classes_per_task].to_vec();
        let mut pool: Vec<usize> = Vec::new();
        for class in &chunk {
            let members = &by_label[class];
            if members.len() < per_class_needed {
                return Err(TaskError::InsufficientSamples {
                    task: t,
                    needed: per_class_needed,
                    available: members.len(),
                });
            }
            pool.extend_from_slice(members);
        }
        if pool.len() < 2 * n {
            return Err(TaskError::InsufficientSamples {
                task: t,
                needed: 2 * n,
                available: pool.len(),
            });
        }
        let mut rng = stream.descend(&[tags::SPLIT, tags::TASK, t as u64]).rng();
        pool.shuffle(&mut rng);
        let relabel = |i: usize| -> Sample {
            let s = &data[i];
            let within = chunk.iter().position(|&c| c == s.label).expect("in chunk");
            Sample {
                features: s.features.clone(),
                label: within,
            }
        };
        let pairs = (0..n)
            .map(|j| [relabel(pool[j]), relabel(pool[n + j])])
            .collect();
        tasks.push(TaskData { pairs });
        task_classes.push(chunk);
    }
    let seq = TaskSequence {
        tasks,
        meta: SequenceMeta {
            generator: format!("split_classes(cpt={classes_per_task})"),
            t_count,
            n,
            dim,
            task_classes,
            class_count: classes_per_task,
            noise_delta: 0.0,
        },
    };
    seq.validate()?;
    Ok(seq)
}

/// Replace each sample's label, independently per column with probability
/// `delta`, by a uniformly random different within-task label.
pub fn flip_labels(
    seq: &TaskSequence,
    delta: f64,
    stream: &RngStream,
) -> Result<TaskSequence, TaskError> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(TaskError::InvalidConfig(format!(
            "delta = {delta} outside [0, 1]"
        )));
    }
    let classes = seq.meta.class_count;
    let mut out = seq.clone();
    out.meta.noise_delta = delta;
    if delta == 0.0 || classes < 2 {
        return Ok(out);
    }
    for (t, task) in out.tasks.iter_mut().enumerate() {
        let mut rng = stream.descend(&[tags::FLIP, tags::TASK, t as u64]).rng();
        for pair in task.pairs.iter_mut() {
            for col in pair.iter_mut() {
                if rng.random_bool(delta) {
                    let r = rng.random_range(0..classes - 1);
                    col.label = r + usize::from(r >= col.label);
                }
            }
        }
    }
    Ok(out)
}

/// Draw the `T×n` matrix of i.i.d. fair membership bits.
pub fn draw_membership(t_count: usize, n: usize, stream: &RngStream) -> MembershipVectors {
    assert!(t_count >= 1 && n >= 1);
    let mut rng = stream.child(tags::MEMBERSHIP).rng();
    let bits = (0..t_count * n)
        .map(|_| u8::from(rng.random_bool(0.5)))
        .collect();
    MembershipVectors::from_bits(t_count, n, bits)
}

fn sorted_subset(
    rng: &mut rand_chacha::ChaCha12Rng,
    population: usize,
    amount: usize,
) -> Vec<usize> {
    let mut picked = rand::seq::index::sample(rng, population, amount).into_vec();
    picked.sort_unstable();
    picked
}

/// Uniform `(U, V)`: `U` over k-subsets of the `prev_tasks` previous tasks,
/// `V` over l-subsets of `[n]`.
pub fn draw_buffer_index(
    prev_tasks: usize,
    n: usize,
    k: usize,
    l: usize,
    stream: &RngStream,
) -> Result<BufferIndex, TaskError> {
    if k > prev_tasks {
        return Err(TaskError::BufferTasksExceeded { k, prev_tasks });
    }
    if l > n {
        return Err(TaskError::BufferSamplesExceeded { l, n });
    }
    if k == 0 || l == 0 {
        return Ok(BufferIndex::empty());
    }
    let mut rng = stream.child(tags::BUFFER).rng();
    Ok(BufferIndex {
        task_ids: sorted_subset(&mut rng, prev_tasks, k),
        sample_ids: sorted_subset(&mut rng, n, l),
    })
}

/// Balanced `(U, V)`: `U` uniform, `V` chosen greedily so the train-column
/// class counts across the selected tasks stay as even as possible. Ties are
/// broken by the stream's shuffle order.
pub fn draw_buffer_index_balanced(
    prev_tasks: usize,
    n: usize,
    k: usize,
    l: usize,
    seq: &TaskSequence,
    s: &MembershipVectors,
    stream: &RngStream,
) -> Result<BufferIndex, TaskError> {
    if k > prev_tasks {
        return Err(TaskError::BufferTasksExceeded { k, prev_tasks });
    }
    if l > n {
        return Err(TaskError::BufferSamplesExceeded { l, n });
    }
    if k == 0 || l == 0 {
        return Ok(BufferIndex::empty());
    }
    let mut rng = stream.child(tags::BUFFER).rng();
    let task_ids = sorted_subset(&mut rng, prev_tasks, k);
    let classes = seq.meta.class_count;
    let mut candidates: Vec<usize> = (0..n).collect();
    candidates.shuffle(&mut rng);
    let mut class_counts = vec![0u64; classes];
    let mut chosen: Vec<usize> = Vec::with_capacity(l);
    let mut used = vec![false; n];
    for _ in 0..l {
        let mut best: Option<(u64, usize)> = None;
        for &j in &candidates {
            if used[j] {
                continue;
            }
            let mut counts = class_counts.clone();
            for &u in &task_ids {
                let bit = s.bit(u, j) as usize;
                counts[seq.sample(u, j, bit).label] += 1;
            }
            let imbalance = counts.iter().max().unwrap() - counts.iter().min().unwrap();
            if best.is_none_or(|(b, _)| imbalance < b) {
                best = Some((imbalance, j));
            }
        }
        let (_, j) = best.expect("l <= n leaves a candidate");
        used[j] = true;
        for &u in &task_ids {
            let bit = s.bit(u, j) as usize;
            class_counts[seq.sample(u, j, bit).label] += 1;
        }
        chosen.push(j);
    }
    chosen.sort_unstable();
    Ok(BufferIndex {
        task_ids,
        sample_ids: chosen,
    })
}

// ---------------------------------------------------------------------------
// IDX ingestion (bit-exact big-endian format)
// ---------------------------------------------------------------------------

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("image count {images} != label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
}

fn read_exact_or_truncated(
    reader: &mut impl Read,
    buf: &mut [u8],
    path: &Path,
    expected: usize,
) -> Result<(), IdxError> {
    let mut filled = 0;
    while filled < buf.len() {
        let got = reader
            .read(&mut buf[filled..])
            .map_err(|source| IdxError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        if got == 0 {
            return Err(IdxError::Truncated {
                path: path.to_path_buf(),
                expected,
                found: filled,
            });
        }
        filled += got;
    }
    Ok(())
}

fn read_u32_be(reader: &mut impl Read, path: &Path) -> Result<u32, IdxError> {
    let mut b = [0u8; 4];
    read_exact_or_truncated(reader, &mut b, path, 4)?;
    Ok(u32::from_be_bytes(b))
}

/// Load an IDX image/label file pair into pixel vectors scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<Sample>, IdxError> {
    let open = |path: &Path| {
        std::fs::File::open(path).map_err(|source| IdxError::Io {
            path: path.to_path_buf(),
            source,
        })
    };
    let mut images = std::io::BufReader::new(open(images_path)?);
    let magic = read_u32_be(&mut images, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(IdxError::BadMagic {
            path: images_path.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_u32_be(&mut images, images_path)? as usize;
    let rows = read_u32_be(&mut images, images_path)? as usize;
    let cols = read_u32_be(&mut images, images_path)? as usize;
    let pixel_count = count * rows * cols;
    let mut pixels = vec![0u8; pixel_count];
    read_exact_or_truncated(&mut images, &mut pixels, images_path, pixel_count)?;

    let mut labels = std::io::BufReader::new(open(labels_path)?);
    let magic = read_u32_be(&mut labels, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(IdxError::BadMagic {
            path: labels_path.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let label_count = read_u32_be(&mut labels, labels_path)? as usize;
    if label_count != count {
        return Err(IdxError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let mut label_bytes = vec![0u8; label_count];
    read_exact_or_truncated(&mut labels, &mut label_bytes, labels_path, label_count)?;

    let dim = rows * cols;
    Ok((0..count)
        .map(|i| Sample {
            features: pixels[i * dim..(i + 1) * dim]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect(),
            label: label_bytes[i] as usize,
        })
        .collect())
}

/// Write an IDX image/label fixture pair (inverse of [`load_idx`]).
pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    samples: &[Sample],
    rows: u32,
    cols: u32,
) -> Result<(), IdxError> {
    let create = |path: &Path| {
        std::fs::File::create(path).map_err(|source| IdxError::Io {
            path: path.to_path_buf(),
            source,
        })
    };
    let write_all = |file: &mut std::fs::File, bytes: &[u8], path: &Path| {
        file.write_all(bytes).map_err(|source| IdxError::Io {
            path: path.to_path_buf(),
            source,
        })
    };
    let mut img = create(images_path)?;
    write_all(&mut img, &IDX_IMAGES_MAGIC.to_be_bytes(), images_path)?;
    write_all(&mut img, &(samples.len() as u32).to_be_bytes(), images_path)?;
    write_all(&mut img, &rows.to_be_bytes(), images_path)?;
    write_all(&mut img, &cols.to_be_bytes(), images_path)?;
    for s in samples {
        assert_eq!(s.features.len(), (rows * cols) as usize);
        let bytes: Vec<u8> = s
            .features
            .iter()
            .map(|&f| (f * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        write_all(&mut img, &bytes, images_path)?;
    }
    let mut lab = create(labels_path)?;
    write_all(&mut lab, &IDX_LABELS_MAGIC.to_be_bytes(), labels_path)?;
    write_all(&mut lab, &(samples.len() as u32).to_be_bytes(), labels_path)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label as u8).collect();
    write_all(&mut lab, &labels, labels_path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Versioned JSON serialization with base64 feature payloads
// ---------------------------------------------------------------------------

pub(crate) fn encode_f64s(values: &[f64]) -> String {
    use base64::Engine;
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub(crate) fn decode_f64s(encoded: &str) -> Result<Vec<f64>, String> {
    use base64::Engine;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(encoded)
        .map_err(|e| e.to_string())?;
    if bytes.len() % 8 != 0 {
        return Err(format!(
            "payload length {} not a multiple of 8",
            bytes.len()
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct SampleWire {
    f: String,
    label: usize,
}

#[derive(Serialize, Deserialize)]
struct TaskWire {
    pairs: Vec<[SampleWire; 2]>,
}

#[derive(Serialize, Deserialize)]
struct SequenceWire {
    version: u32,
    meta: SequenceMeta,
    tasks: Vec<TaskWire>,
}

pub const SEQUENCE_FORMAT_VERSION: u32 = 1;

pub fn sequence_to_json(seq: &TaskSequence) -> String {
    let wire = SequenceWire {
        version: SEQUENCE_FORMAT_VERSION,
        meta: seq.meta.clone(),
        tasks: seq
            .tasks
            .iter()
            .map(|t| TaskWire {
                pairs: t
                    .pairs
                    .iter()
                    .map(|p| {
                        [
                            SampleWire {
                                f: encode_f64s(&p[0].features),
                                label: p[0].label,
                            },
                            SampleWire {
                                f: encode_f64s(&p[1].features),
                                label: p[1].label,
                            },
                        ]
                    })
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_string(&wire).expect("sequence serializes")
}

pub fn sequence_from_json(json: &str) -> Result<TaskSequence, TaskError> {
    let wire: SequenceWire =
        serde_json::from_str(json).map_err(|e| TaskError::Serialization(e.to_string()))?;
    if wire.version != SEQUENCE_FORMAT_VERSION {
        return Err(TaskError::Serialization(format!(
            "unsupported sequence format version {}",
            wire.version
        )));
    }
    let decode = |w: &SampleWire| -> Result<Sample, TaskError> {
        Ok(Sample {
            features: decode_f64s(&w.f).map_err(TaskError::Serialization)?,
            label: w.label,
        })
    };
    let tasks = wire
        .tasks
        .iter()
        .map(|t| {
            let pairs = t
                .pairs
                .iter()
                .map(|p| Ok([decode(&p[0])?, decode(&p[1])?]))
                .collect::<Result<Vec<_>, TaskError>>()?;
            Ok(TaskData { pairs })
        })
        .collect::<Result<Vec<_>, TaskError>>()?;
    let seq = TaskSequence {
        tasks,
        meta: wire.meta,
    };
    seq.validate()?;
    Ok(seq)
}
