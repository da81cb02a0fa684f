//! Synthetic labelled image sets built around known class prototypes.
//!
//! Each class owns one structured prototype image (stripes, blobs or rings);
//! samples are brightness-jittered, noisy, clamped copies of it. Because the
//! prototypes are known, claims about linear classifiers acting as class
//! templates can be checked directly.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{cosine_similarity, order_free_mean, RngStream, Tensor};

const PROTOTYPE_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const VAL_STREAM: u64 = 2;
const TEST_STREAM: u64 = 3;

/// Pairwise cosine similarity every pair of prototypes must stay below.
pub const MAX_PROTOTYPE_COSINE: f64 = 0.9;
const MAX_PROTOTYPE_ATTEMPTS: usize = 10_000;
// prototypes live in [LO, HI] so moderate noise rarely hits the clamp
const PROTOTYPE_LO: f64 = 0.1;
const PROTOTYPE_HI: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub noise_std: f64,
    pub brightness_jitter: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            height: 16,
            width: 16,
            channels: 1,
            train_per_class: 100,
            val_per_class: 30,
            test_per_class: 50,
            noise_std: 0.05,
            brightness_jitter: 0.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// Noise-free preset: every sample is exactly its class prototype.
    pub fn zero_noise() -> Self {
        Self {
            noise_std: 0.0,
            brightness_jitter: 0.0,
            ..Self::default()
        }
    }

    /// Same geometry and counts with a different prototype draw, for merging
    /// models trained on unrelated tasks.
    pub fn cross_task(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::domain(format!("n_classes must be >= 2, got {}", self.n_classes)));
        }
        let counts = [
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("train_per_class", self.train_per_class),
            ("val_per_class", self.val_per_class),
            ("test_per_class", self.test_per_class),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::domain(format!("{name} must be >= 1")));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::domain(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if !(self.brightness_jitter >= 0.0 && self.brightness_jitter.is_finite()) {
            return Err(Error::domain(format!(
                "brightness_jitter must be >= 0, got {}",
                self.brightness_jitter
            )));
        }
        Ok(())
    }
}

/// Flattened images (`n × dim`, row-major, pixel layout `(y, x, channel)`)
/// with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    dim: usize,
    n_classes: usize,
    images: Vec<f64>,
    labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(dim: usize, n_classes: usize, images: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::domain("image dimension must be >= 1"));
        }
        if images.len() != dim * labels.len() {
            return Err(Error::shape(
                "LabeledSet::new",
                format!("{} pixels for {} labels of dim {dim}", images.len(), labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::domain(format!("label {bad} outside [0, {n_classes})")));
        }
        Ok(Self {
            dim,
            n_classes,
            images,
            labels,
        })
    }

    pub fn from_tensor(images: &Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        Self::new(images.cols(), n_classes, images.data().to_vec(), labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i * self.dim..(i + 1) * self.dim]
    }

    pub fn pixels(&self) -> &[f64] {
        &self.images
    }

    /// All images as an `n × dim` matrix.
    pub fn images(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::domain("labeled set is empty"));
        }
        Tensor::matrix(self.len(), self.dim, self.images.clone())
    }

    /// Images at `indices` as a matrix, plus their labels.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::domain("cannot gather an empty batch"));
        }
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Ok((Tensor::matrix(indices.len(), self.dim, data)?, labels))
    }

    /// Contiguous slice `[start, end)` as a new set.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        let end = end.min(self.len());
        Self::new(
            self.dim,
            self.n_classes,
            self.images[start * self.dim..end * self.dim].to_vec(),
            self.labels[start..end].to_vec(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub test: LabeledSet,
    /// `n_classes × dim`; row `k` is the prototype of class `k`.
    pub prototypes: Tensor,
}

/// Draws prototypes and the three splits. Each split uses its own RNG stream
/// under `spec.seed`; sample `i` of a split belongs to class `i mod n_classes`.
pub fn generate(spec: &DatasetSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let prototypes = generate_prototypes(spec)?;
    let split = |stream, per_class| sample_split(spec, &prototypes, stream, per_class);
    Ok(SyntheticData {
        train: split(TRAIN_STREAM, spec.train_per_class)?,
        val: split(VAL_STREAM, spec.val_per_class)?,
        test: split(TEST_STREAM, spec.test_per_class)?,
        prototypes,
    })
}

fn sample_split(spec: &DatasetSpec, prototypes: &Tensor, stream: u64, per_class: usize) -> Result<LabeledSet> {
    let mut rng = RngStream::new(spec.seed, stream);
    let n = per_class * spec.n_classes;
    let dim = spec.dim();
    let mut images = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.n_classes;
        let gain = 1.0 + rng.uniform(-1.0, 1.0) * spec.brightness_jitter;
        for &p in prototypes.row(class) {
            let noise = if spec.noise_std > 0.0 {
                spec.noise_std * rng.standard_normal()
            } else {
                0.0
            };
            images.push((p * gain + noise).clamp(0.0, 1.0));
        }
        labels.push(class);
    }
    LabeledSet::new(dim, spec.n_classes, images, labels)
}

fn generate_prototypes(spec: &DatasetSpec) -> Result<Tensor> {
    let mut rng = RngStream::new(spec.seed, PROTOTYPE_STREAM);
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(spec.n_classes);
    for class in 0..spec.n_classes {
        let family = Family::ALL[class % Family::ALL.len()];
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > MAX_PROTOTYPE_ATTEMPTS {
                return Err(Error::domain(format!(
                    "could not draw a prototype for class {class} with cosine < {MAX_PROTOTYPE_COSINE} \
                     to the others after {MAX_PROTOTYPE_ATTEMPTS} attempts"
                )));
            }
            let candidate = draw_pattern(family, spec, &mut rng);
            if accepted
                .iter()
                .all(|p| cosine_similarity(p, &candidate) < MAX_PROTOTYPE_COSINE)
            {
                accepted.push(candidate);
                break;
            }
        }
    }
    Tensor::from_rows(&accepted)
}

#[derive(Debug, Clone, Copy)]
enum Family {
    Stripes,
    Blobs,
    Rings,
}

impl Family {
    const ALL: [Family; 3] = [Family::Stripes, Family::Blobs, Family::Rings];
}

fn draw_pattern(family: Family, spec: &DatasetSpec, rng: &mut RngStream) -> Vec<f64> {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let size = h.max(w);
    let field: Box<dyn Fn(f64, f64) -> f64> = match family {
        Family::Stripes => {
            let angle = rng.uniform(0.0, PI);
            let freq = rng.uniform(1.0, 3.5);
            let phase = rng.uniform(0.0, 2.0 * PI);
            let (c, s) = (angle.cos(), angle.sin());
            Box::new(move |y, x| (2.0 * PI * freq * (x * c + y * s) / size + phase).sin())
        }
        Family::Blobs => {
            let count = 1 + rng.below(3);
            let blobs: Vec<(f64, f64, f64)> = (0..count)
                .map(|_| {
                    (
                        rng.uniform(0.0, h),
                        rng.uniform(0.0, w),
                        rng.uniform(0.08, 0.25) * size,
                    )
                })
                .collect();
            Box::new(move |y, x| {
                blobs
                    .iter()
                    .map(|&(cy, cx, r)| (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * r * r)).exp())
                    .sum()
            })
        }
        Family::Rings => {
            let (cy, cx) = (rng.uniform(0.0, h), rng.uniform(0.0, w));
            let period = rng.uniform(0.2, 0.6) * size;
            Box::new(move |y, x| (2.0 * PI * ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() / period).cos())
        }
    };
    let gains: Vec<f64> = (0..spec.channels).map(|_| rng.uniform(0.4, 1.0)).collect();
    let mut raw = Vec::with_capacity(spec.dim());
    for y in 0..spec.height {
        for x in 0..spec.width {
            let v = field(y as f64 + 0.5, x as f64 + 0.5);
            raw.extend(gains.iter().map(|g| g * v));
        }
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    raw.into_iter()
        .map(|v| {
            let unit = if span > 0.0 { (v - lo) / span } else { 0.5 };
            PROTOTYPE_LO + (PROTOTYPE_HI - PROTOTYPE_LO) * unit
        })
        .collect()
}

/// Per-class mean image; independent of sample order.
pub fn class_means(set: &LabeledSet) -> Result<Tensor> {
    let k = set.n_classes();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in set.labels().iter().enumerate() {
        members[l].push(i);
    }
    let missing: Vec<usize> = (0..k).filter(|&c| members[c].is_empty()).collect();
    if !missing.is_empty() {
        return Err(Error::domain(format!("classes without samples: {missing:?}")));
    }
    let dim = set.dim();
    let mut out = Vec::with_capacity(k * dim);
    let mut column = Vec::new();
    for idx in &members {
        for p in 0..dim {
            column.clear();
            column.extend(idx.iter().map(|&i| set.image(i)[p]));
            out.push(order_free_mean(&mut column));
        }
    }
    Tensor::matrix(k, dim, out)
}
