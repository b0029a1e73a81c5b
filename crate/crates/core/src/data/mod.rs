//! Seeded synthetic classification tasks.
//!
//! Each world class owns a fixed prototype grid of image tokens drawn from the base
//! vocabulary `0..BASE_IMAGE_VOCAB`. Samples corrupt prototype tokens independently;
//! captions place the class token inside one of a few template word sequences. Ids
//! `BASE_IMAGE_VOCAB..IMAGE_VOCAB` never occur in clean data and are the targets of
//! [`domain_shift`].

mod io;

pub use io::{dataset_from_bytes, dataset_to_bytes, read_dataset, write_dataset, DSET_MAGIC, DSET_VERSION};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Batch, ModelConfig, TokenMatrix};
use crate::seed;

pub const IMAGE_PATCHES: usize = 16;
pub const CAPTION_LEN: usize = 8;
pub const BASE_IMAGE_VOCAB: usize = 48;
pub const IMAGE_VOCAB: usize = 64;
pub const TEXT_VOCAB: usize = 64;
pub const PAD: usize = 0;
/// Text id of world class 0; class `c` is `CLASS_TOKEN_BASE + c`.
pub const CLASS_TOKEN_BASE: usize = 8;
pub const MAX_WORLD_CLASSES: usize = TEXT_VOCAB - CLASS_TOKEN_BASE;

const CLASS_SLOT: usize = usize::MAX;
const TEMPLATES: [&[usize]; 4] = [
    &[1, 2, 3, CLASS_SLOT],
    &[4, 5, CLASS_SLOT],
    &[1, 6, CLASS_SLOT, 7],
    &[CLASS_SLOT, 2, 7],
];

const STREAM_PROTOTYPE: u64 = 1;
const STREAM_SAMPLES: u64 = 2;
const STREAM_SHIFT: u64 = 3;
const STREAM_SHIFT_NOISE: u64 = 4;
const STREAM_FEW_SHOT: u64 = 5;

fn default_world_seed() -> u64 {
    0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    /// Per-token corruption probability.
    pub noise: f64,
    /// Domain shift severity applied on generation.
    #[serde(default)]
    pub shift: f64,
    pub seed: u64,
    /// World id of local class 0.
    #[serde(default)]
    pub first_class: usize,
    /// Selects the prototype world; tasks sharing it share class prototypes.
    #[serde(default = "default_world_seed")]
    pub world_seed: u64,
}

impl TaskSpec {
    pub fn new(classes: usize, samples_per_class: usize, noise: f64, seed: u64) -> Self {
        Self {
            classes,
            samples_per_class,
            noise,
            shift: 0.0,
            seed,
            first_class: 0,
            world_seed: default_world_seed(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("task needs at least 2 classes, got {}", self.classes)));
        }
        if self.first_class + self.classes > MAX_WORLD_CLASSES {
            return Err(Error::Config(format!(
                "classes {}..{} exceed the {MAX_WORLD_CLASSES} world classes",
                self.first_class,
                self.first_class + self.classes
            )));
        }
        if self.samples_per_class < 3 {
            return Err(Error::Config(format!(
                "samples_per_class {} cannot form train, val and test splits (need >= 3)",
                self.samples_per_class
            )));
        }
        for (name, p) in [("noise", self.noise), ("shift", self.shift)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }

    /// World ids of this task's classes.
    pub fn world_classes(&self) -> std::ops::Range<usize> {
        self.first_class..self.first_class + self.classes
    }
}

/// Post-generation transformations, kept for provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Transform {
    Shift { sigma: f64, seed: u64 },
    FewShot { k: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub images: TokenMatrix,
    pub captions: TokenMatrix,
    /// Local class index per row.
    pub labels: Vec<usize>,
}

impl Split {
    pub fn new(images: TokenMatrix, captions: TokenMatrix, labels: Vec<usize>) -> Result<Self> {
        if images.rows() != labels.len() || captions.rows() != labels.len() {
            return Err(Error::Input(format!(
                "split parts disagree: {} images, {} captions, {} labels",
                images.rows(),
                captions.rows(),
                labels.len()
            )));
        }
        Ok(Self { images, captions, labels })
    }

    fn empty() -> Self {
        Self {
            images: TokenMatrix::new(0, IMAGE_PATCHES, vec![]).unwrap(),
            captions: TokenMatrix::new(0, CAPTION_LEN, vec![]).unwrap(),
            labels: vec![],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select(indices),
            captions: self.captions.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn batch(&self) -> Batch {
        Batch {
            image_tokens: self.images.clone(),
            text_tokens: self.captions.clone(),
            class_labels: self.labels.clone(),
        }
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    fn indices_of(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    fn append(&mut self, other: &Split, indices: &[usize]) {
        let mut img = self.images.ids().to_vec();
        let mut cap = self.captions.ids().to_vec();
        for &i in indices {
            img.extend_from_slice(other.images.row(i));
            cap.extend_from_slice(other.captions.row(i));
            self.labels.push(other.labels[i]);
        }
        self.images = TokenMatrix::new(self.labels.len(), IMAGE_PATCHES, img).unwrap();
        self.captions = TokenMatrix::new(self.labels.len(), CAPTION_LEN, cap).unwrap();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub transforms: Vec<Transform>,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl Dataset {
    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// World class id of each local class.
    pub fn class_ids(&self) -> Vec<u32> {
        self.spec.world_classes().map(|c| c as u32).collect()
    }

    /// One prompt per class, in local class order.
    pub fn class_prompts(&self) -> TokenMatrix {
        let rows: Vec<Vec<usize>> = self.spec.world_classes().map(|c| caption(0, c)).collect();
        TokenMatrix::from_rows(&rows).unwrap()
    }

    pub fn split(&self, name: SplitName) -> &Split {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    /// Hex SHA-256 of the spec and transform history.
    pub fn provenance_hash(&self) -> String {
        let json = serde_json::to_vec(&(&self.spec, &self.transforms)).expect("spec serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Whether the token layout fits `config`.
    pub fn check_model(&self, config: &ModelConfig) -> Result<()> {
        if config.image_patches() != IMAGE_PATCHES
            || config.text_seq_len != CAPTION_LEN + 1
            || config.image_vocab < IMAGE_VOCAB
            || config.text_vocab < TEXT_VOCAB
        {
            return Err(Error::Config(format!(
                "model layout does not fit synthetic data ({IMAGE_PATCHES} patches, {CAPTION_LEN} caption tokens, \
                 vocab {IMAGE_VOCAB}/{TEXT_VOCAB})"
            )));
        }
        Ok(())
    }
}

/// Prototype grid of a world class.
pub fn prototype(world_seed: u64, class: usize) -> Vec<usize> {
    let mut rng = seed::rng(world_seed, &[STREAM_PROTOTYPE, class as u64]);
    (0..IMAGE_PATCHES).map(|_| rng.random_range(0..BASE_IMAGE_VOCAB)).collect()
}

/// Caption for world class `class` under template `template`, padded to [`CAPTION_LEN`].
pub fn caption(template: usize, class: usize) -> Vec<usize> {
    let mut out: Vec<usize> = TEMPLATES[template % TEMPLATES.len()]
        .iter()
        .map(|&w| if w == CLASS_SLOT { CLASS_TOKEN_BASE + class } else { w })
        .collect();
    out.resize(CAPTION_LEN, PAD);
    out
}

fn different_token(rng: &mut impl Rng, current: usize, vocab: usize) -> usize {
    let t = rng.random_range(0..vocab - 1);
    if t >= current {
        t + 1
    } else {
        t
    }
}

/// Split sizes for `n` samples of one class: `(train, val, test)`.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let test = (n / 5).max(1);
    let val = ((n - test) / 10).max(1);
    (n - test - val, val, test)
}

pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut train = Split::empty();
    let mut val = Split::empty();
    let mut test = Split::empty();
    let (n_train, n_val, _) = split_sizes(spec.samples_per_class);
    for (local, class) in spec.world_classes().enumerate() {
        let proto = prototype(spec.world_seed, class);
        let mut rng = seed::rng(spec.seed, &[STREAM_SAMPLES, spec.world_seed, class as u64]);
        let mut images = Vec::with_capacity(spec.samples_per_class * IMAGE_PATCHES);
        let mut captions = Vec::with_capacity(spec.samples_per_class * CAPTION_LEN);
        for _ in 0..spec.samples_per_class {
            for &t in &proto {
                let corrupt = rng.random_bool(spec.noise);
                images.push(if corrupt { different_token(&mut rng, t, BASE_IMAGE_VOCAB) } else { t });
            }
            captions.extend(caption(rng.random_range(0..TEMPLATES.len()), class));
        }
        let n = spec.samples_per_class;
        let block = Split {
            images: TokenMatrix::new(n, IMAGE_PATCHES, images)?,
            captions: TokenMatrix::new(n, CAPTION_LEN, captions)?,
            labels: vec![local; n],
        };
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        train.append(&block, &order[..n_train]);
        val.append(&block, &order[n_train..n_train + n_val]);
        test.append(&block, &order[n_train + n_val..]);
    }
    let mut ds = Dataset {
        spec: spec.clone(),
        transforms: vec![],
        train,
        val,
        test,
    };
    if spec.shift > 0.0 {
        apply_shift(&mut ds, spec.shift, seed::derive(spec.seed, &[STREAM_SHIFT]));
    }
    Ok(ds)
}

/// Remap table of a shift: entry `v` is the held-out id that base token `v` maps to.
pub fn shift_plan(sigma: f64, seed: u64) -> Vec<Option<usize>> {
    let mut rng = seed::rng(seed, &[STREAM_SHIFT]);
    let mut ids: Vec<usize> = (0..BASE_IMAGE_VOCAB).collect();
    ids.shuffle(&mut rng);
    let n = (sigma * BASE_IMAGE_VOCAB as f64).round() as usize;
    let mut plan = vec![None; BASE_IMAGE_VOCAB];
    for &v in &ids[..n] {
        plan[v] = Some(BASE_IMAGE_VOCAB + rng.random_range(0..IMAGE_VOCAB - BASE_IMAGE_VOCAB));
    }
    plan
}

fn apply_shift(ds: &mut Dataset, sigma: f64, seed: u64) {
    let plan = shift_plan(sigma, seed);
    for (k, split) in [&mut ds.train, &mut ds.val, &mut ds.test].into_iter().enumerate() {
        let mut rng = seed::rng(seed, &[STREAM_SHIFT_NOISE, k as u64]);
        let ids: Vec<usize> = split
            .images
            .ids()
            .iter()
            .map(|&t| {
                let t = plan.get(t).copied().flatten().unwrap_or(t);
                if rng.random_bool(sigma / 2.0) {
                    different_token(&mut rng, t, IMAGE_VOCAB)
                } else {
                    t
                }
            })
            .collect();
        split.images = TokenMatrix::new(split.len(), IMAGE_PATCHES, ids).unwrap();
    }
}

/// Remaps a `sigma` fraction of the base image vocabulary to held-out ids and adds
/// token noise at rate `sigma / 2`. Labels and captions are untouched.
pub fn domain_shift(dataset: &Dataset, sigma: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::Config(format!("shift severity must lie in [0, 1], got {sigma}")));
    }
    let mut out = dataset.clone();
    if sigma > 0.0 {
        apply_shift(&mut out, sigma, seed);
        out.transforms.push(Transform::Shift { sigma, seed });
    }
    Ok(out)
}

/// Splits the class range of `spec` into `n_tasks` consecutive, disjoint tasks.
pub fn disjoint_tasks(spec: &TaskSpec, n_tasks: usize) -> Result<Vec<Dataset>> {
    if n_tasks == 0 || spec.classes % n_tasks != 0 {
        return Err(Error::Config(format!(
            "{} classes cannot be split into {n_tasks} equal tasks",
            spec.classes
        )));
    }
    let per = spec.classes / n_tasks;
    (0..n_tasks)
        .map(|i| {
            let mut s = spec.clone();
            s.classes = per;
            s.first_class = spec.first_class + i * per;
            generate(&s)
        })
        .collect()
}

/// Keeps `k` training samples per class. Validation is resampled, class-balanced, from
/// the unused training samples (topped up from the old validation split when short).
pub fn few_shot(dataset: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    let classes = dataset.classes();
    let counts = dataset.train.class_counts(classes);
    let min = counts.iter().copied().min().unwrap_or(0);
    if k == 0 || k > min {
        return Err(Error::Config(format!("few-shot k = {k} must lie in 1..={min}")));
    }
    let val_counts = dataset.val.class_counts(classes);
    let mut train = Split::empty();
    let mut val = Split::empty();
    for c in 0..classes {
        let mut rng = seed::rng(seed, &[STREAM_FEW_SHOT, c as u64]);
        let mut idx = dataset.train.indices_of(c);
        idx.shuffle(&mut rng);
        train.append(&dataset.train, &idx[..k]);
        let rest = &idx[k..];
        let want = val_counts[c];
        let take = want.min(rest.len());
        val.append(&dataset.train, &rest[..take]);
        if take < want {
            let mut old = dataset.val.indices_of(c);
            old.shuffle(&mut rng);
            val.append(&dataset.val, &old[..want - take]);
        }
    }
    let mut out = dataset.clone();
    out.train = train;
    out.val = val;
    out.transforms.push(Transform::FewShot { k, seed });
    Ok(out)
}
