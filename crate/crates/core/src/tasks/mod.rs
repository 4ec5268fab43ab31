//! Task streams: disjoint class splits, shared-label-space streams with input
//! shift, synthetic generators, and seeded batching.

mod idx;

pub use idx::{load_idx, load_idx_dir, DATA_DIR_ENV};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Labeled examples stored as an `n x dim` feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    x: Tensor,
    y: Vec<usize>,
    num_classes: usize,
    image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, num_classes: usize) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows vs {} labels",
                x.rows(),
                y.len()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= num_classes) {
            return Err(Error::InvalidLabel {
                label: bad,
                classes: num_classes,
            });
        }
        if !x.is_finite() {
            return Err(Error::NonFiniteActivation("dataset features".into()));
        }
        Ok(Self {
            x,
            y,
            num_classes,
            image_shape: None,
        })
    }

    pub fn with_image_shape(mut self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "image {rows}x{cols} does not match feature dim {}",
                self.dim()
            )));
        }
        self.image_shape = Some((rows, cols));
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.image_shape
    }

    pub fn features(&self) -> &Tensor {
        &self.x
    }

    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    pub fn example(&self, i: usize) -> (&[f64], usize) {
        (self.x.row_slice(i), self.y[i])
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let dim = self.dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            data.extend_from_slice(self.x.row_slice(i));
        }
        Dataset {
            x: Tensor::new(vec![indices.len(), dim], data).expect("subset shape"),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            num_classes: self.num_classes,
            image_shape: self.image_shape,
        }
    }

    /// Same examples with labels passed through `map` and a new class count.
    fn relabel(&self, map: impl Fn(usize) -> usize, num_classes: usize) -> Dataset {
        Dataset {
            x: self.x.clone(),
            y: self.y.iter().map(|&c| map(c)).collect(),
            num_classes,
            image_shape: self.image_shape,
        }
    }

    fn map_features(&self, f: impl Fn(usize, &[f64]) -> Vec<f64>) -> Dataset {
        let dim = self.dim();
        let mut data = Vec::with_capacity(self.x.len());
        for i in 0..self.len() {
            let row = f(i, self.x.row_slice(i));
            debug_assert_eq!(row.len(), dim);
            data.extend(row);
        }
        Dataset {
            x: Tensor::new(vec![self.len(), dim], data).expect("map shape"),
            y: self.y.clone(),
            num_classes: self.num_classes,
            image_shape: self.image_shape,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &y in &self.y {
            c[y] += 1;
        }
        c
    }
}

/// A raw dataset with its own train/test partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledData {
    pub train: Dataset,
    pub test: Dataset,
}

impl LabeledData {
    pub fn num_classes(&self) -> usize {
        self.train.num_classes().max(self.test.num_classes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Pairwise-disjoint class sets, labels remapped per task.
    Disjoint,
    /// Every task shares the full label space.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub train: Dataset,
    pub test: Dataset,
    /// Original class ids covered by this task, in local-label order.
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<TaskData>,
    pub regime: Regime,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.tasks[0].train.dim()
    }

    /// Output classes the shared decoder must cover.
    pub fn num_outputs(&self) -> usize {
        self.tasks
            .iter()
            .map(|t| t.train.num_classes())
            .max()
            .unwrap_or(0)
    }

    pub fn label_map(&self) -> Vec<Vec<usize>> {
        self.tasks.iter().map(|t| t.classes.clone()).collect()
    }

    /// Checks the regime's class-set invariant.
    pub fn check_regime(&self) -> Result<()> {
        match self.regime {
            Regime::Disjoint => {
                let mut seen = std::collections::HashSet::new();
                for t in &self.tasks {
                    for c in &t.classes {
                        if !seen.insert(*c) {
                            return Err(Error::Config(format!("class {c} appears in two tasks")));
                        }
                    }
                }
            }
            Regime::Joint => {
                if let Some(first) = self.tasks.first() {
                    if self.tasks.iter().any(|t| t.classes != first.classes) {
                        return Err(Error::Config("joint stream with differing class sets".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Partition a dataset's classes into `n_tasks` disjoint groups.
///
/// Classes are shuffled with `seed`; each task keeps the examples of its
/// classes and relabels them to `0..classes_per_task` in group order.
pub fn make_split_stream(
    data: &LabeledData,
    n_tasks: usize,
    classes_per_task: usize,
    seed: u64,
) -> Result<TaskStream> {
    let available = data.num_classes();
    let needed = n_tasks * classes_per_task;
    if needed > available || n_tasks == 0 || classes_per_task == 0 {
        return Err(Error::InsufficientClasses { needed, available });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<usize> = (0..available).collect();
    classes.shuffle(&mut rng);

    let tasks = classes
        .chunks(classes_per_task)
        .take(n_tasks)
        .map(|group| {
            let pick = |d: &Dataset| {
                let idx: Vec<usize> = (0..d.len()).filter(|&i| group.contains(&d.y[i])).collect();
                let local = d.subset(&idx);
                local.relabel(
                    |c| group.iter().position(|&g| g == c).expect("class in group"),
                    classes_per_task,
                )
            };
            TaskData {
                train: pick(&data.train),
                test: pick(&data.test),
                classes: group.to_vec(),
            }
        })
        .collect();
    Ok(TaskStream {
        tasks,
        regime: Regime::Disjoint,
    })
}

/// Input transformation distinguishing the tasks of a joint stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ShiftKind {
    /// Task `t` rotates images by `t * max_degrees / (n_tasks - 1)`.
    Rotation { max_degrees: f64 },
    /// Task `t > 0` applies its own fixed random feature permutation.
    PixelPermutation,
    /// Task `t` adds a fixed Gaussian noise field of std `t * max_std / (n_tasks - 1)`.
    NoiseLevel { max_std: f64 },
}

/// Per-task transform of a joint stream. Task 0 is always the identity.
#[derive(Debug, Clone)]
pub enum TaskTransform {
    Identity,
    Rotate { degrees: f64, rows: usize, cols: usize },
    Permute(Vec<usize>),
    Noise { std: f64, seed: u64 },
}

impl TaskTransform {
    pub fn for_task(
        shift: ShiftKind,
        task: usize,
        n_tasks: usize,
        dim: usize,
        image_shape: Option<(usize, usize)>,
        seed: u64,
    ) -> Result<Self> {
        if task == 0 {
            return Ok(TaskTransform::Identity);
        }
        let frac = task as f64 / (n_tasks.max(2) - 1) as f64;
        Ok(match shift {
            ShiftKind::Rotation { max_degrees } => {
                let (rows, cols) = image_shape.ok_or_else(|| {
                    Error::InvalidShift("rotation needs image-shaped features".into())
                })?;
                if !max_degrees.is_finite() {
                    return Err(Error::InvalidShift(format!("rotation {max_degrees}")));
                }
                TaskTransform::Rotate {
                    degrees: frac * max_degrees,
                    rows,
                    cols,
                }
            }
            ShiftKind::PixelPermutation => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(task as u64)));
                let mut p: Vec<usize> = (0..dim).collect();
                p.shuffle(&mut rng);
                TaskTransform::Permute(p)
            }
            ShiftKind::NoiseLevel { max_std } => {
                if !(max_std >= 0.0) || !max_std.is_finite() {
                    return Err(Error::InvalidShift(format!("noise std {max_std}")));
                }
                TaskTransform::Noise {
                    std: frac * max_std,
                    seed: seed.wrapping_add(task as u64 * 7919),
                }
            }
        })
    }

    /// Transform example `index` (the index keys the fixed noise field).
    pub fn apply(&self, index: usize, x: &[f64]) -> Vec<f64> {
        match self {
            TaskTransform::Identity => x.to_vec(),
            TaskTransform::Rotate { degrees, rows, cols } => rotate_nearest(x, *rows, *cols, *degrees),
            TaskTransform::Permute(p) => p.iter().map(|&j| x[j]).collect(),
            TaskTransform::Noise { std, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ index as u64);
                x.iter()
                    .map(|v| v + std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect()
            }
        }
    }
}

/// Nearest-neighbour rotation about the image centre; uncovered pixels are 0.
fn rotate_nearest(x: &[f64], rows: usize, cols: usize, degrees: f64) -> Vec<f64> {
    let (s, c) = degrees.to_radians().sin_cos();
    let cy = (rows as f64 - 1.0) / 2.0;
    let cx = (cols as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for q in 0..cols {
            let (dy, dx) = (r as f64 - cy, q as f64 - cx);
            // inverse map: source = R(-theta) * target
            let sy = c * dy + s * dx + cy;
            let sx = -s * dy + c * dx + cx;
            let (iy, ix) = (sy.round(), sx.round());
            if iy >= 0.0 && ix >= 0.0 && (iy as usize) < rows && (ix as usize) < cols {
                out[r * cols + q] = x[iy as usize * cols + ix as usize];
            }
        }
    }
    out
}

/// Shared-label-space stream: every task sees all classes under its own input shift.
pub fn make_joint_stream(
    data: &LabeledData,
    n_tasks: usize,
    shift: ShiftKind,
    seed: u64,
) -> Result<TaskStream> {
    if n_tasks == 0 {
        return Err(Error::InvalidShift("a stream needs at least one task".into()));
    }
    let classes: Vec<usize> = (0..data.num_classes()).collect();
    let tasks = (0..n_tasks)
        .map(|t| {
            let tf = TaskTransform::for_task(shift, t, n_tasks, data.train.dim(), data.train.image_shape(), seed)?;
            let n_train = data.train.len();
            Ok(TaskData {
                train: data.train.map_features(|i, x| tf.apply(i, x)),
                test: data.test.map_features(|i, x| tf.apply(n_train + i, x)),
                classes: classes.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskStream {
        tasks,
        regime: Regime::Joint,
    })
}

/// Parameters of the Gaussian-mixture generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub dim: usize,
    pub n_tasks: usize,
    pub classes: usize,
    /// 1 = identical class means across tasks, 0 = independent means.
    pub coherence: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Norm scale of the class means relative to unit within-class noise.
    pub separation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            n_tasks: 5,
            classes: 10,
            coherence: 0.5,
            train_per_class: 200,
            test_per_class: 100,
            separation: 3.0,
            seed: 0,
        }
    }
}

fn gaussian_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn sample_mixture<R: Rng>(rng: &mut R, means: &[Vec<f64>], per_class: usize) -> Dataset {
    let classes = means.len();
    let dim = means[0].len();
    let mut order: Vec<usize> = (0..classes * per_class).map(|i| i % classes).collect();
    order.shuffle(rng);
    let mut data = Vec::with_capacity(order.len() * dim);
    for &c in &order {
        data.extend(means[c].iter().map(|m| m + Distribution::<f64>::sample(&StandardNormal, rng)));
    }
    Dataset::new(Tensor::new(vec![order.len(), dim], data).expect("mixture shape"), order, classes)
        .expect("mixture labels valid")
}

/// Class means scaled so the expected distance between two means is about `separation * sqrt(2)`.
fn random_means<R: Rng>(rng: &mut R, classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    let scale = separation / (dim as f64).sqrt();
    (0..classes)
        .map(|_| gaussian_vec(rng, dim).into_iter().map(|v| v * scale).collect())
        .collect()
}

/// Joint stream of Gaussian-mixture classification tasks.
///
/// Task `t`'s class-`c` mean is `coherence * shared_c + sqrt(1 - coherence^2) * own_{t,c}`.
pub fn synth_gaussian_tasks(cfg: &SynthConfig) -> Result<TaskStream> {
    if cfg.dim < 2 {
        return Err(Error::Config("synthetic tasks need dim >= 2".into()));
    }
    if !(0.0..=1.0).contains(&cfg.coherence) {
        return Err(Error::Config(format!("coherence {} outside [0, 1]", cfg.coherence)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shared = random_means(&mut rng, cfg.classes, cfg.dim, cfg.separation);
    let own_w = (1.0 - cfg.coherence * cfg.coherence).max(0.0).sqrt();
    let tasks = (0..cfg.n_tasks)
        .map(|_| {
            let own = random_means(&mut rng, cfg.classes, cfg.dim, cfg.separation);
            let means: Vec<Vec<f64>> = shared
                .iter()
                .zip(&own)
                .map(|(s, o)| s.iter().zip(o).map(|(a, b)| cfg.coherence * a + own_w * b).collect())
                .collect();
            TaskData {
                train: sample_mixture(&mut rng, &means, cfg.train_per_class),
                test: sample_mixture(&mut rng, &means, cfg.test_per_class),
                classes: (0..cfg.classes).collect(),
            }
        })
        .collect();
    Ok(TaskStream {
        tasks,
        regime: Regime::Joint,
    })
}

/// A single Gaussian-mixture dataset, the source for desk-scale split streams.
pub fn synth_mixture_dataset(cfg: &SynthConfig) -> Result<LabeledData> {
    if cfg.dim < 2 || cfg.classes == 0 {
        return Err(Error::Config("synthetic data needs dim >= 2 and >= 1 class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means = random_means(&mut rng, cfg.classes, cfg.dim, cfg.separation);
    Ok(LabeledData {
        train: sample_mixture(&mut rng, &means, cfg.train_per_class),
        test: sample_mixture(&mut rng, &means, cfg.test_per_class),
    })
}

/// One epoch of shuffled minibatch index lists covering `0..n` exactly once.
pub fn batches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be >= 1");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Endless minibatch stream: consecutive seeded epochs.
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
    pending: std::collections::VecDeque<Vec<usize>>,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        assert!(n > 0, "cannot sample batches from an empty split");
        Self {
            n,
            batch_size: batch_size.max(1),
            rng: ChaCha8Rng::seed_from_u64(seed),
            pending: Default::default(),
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pending.is_empty() {
            self.pending = batches(self.n, self.batch_size, &mut self.rng).into();
        }
        self.pending.pop_front().expect("non-empty epoch")
    }
}
