//! Dataset ingestion, splits, labeled-subset selection, the synthetic corpus
//! and mixed-batch scheduling.
//!
//! On disk a dataset is a directory with same-stem files in `images/` and
//! `masks/` (single-channel, pixel value = class index), an optional
//! `unlabeled/` directory of images without masks, and an optional
//! `dataset.toml` describing the layout and split.

pub mod batch;
pub mod io;
pub mod synth;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::types::{LabeledSample, UnlabeledSample};

pub use batch::{batch_stream, epoch_schedule, labeled_schedule, BatchIndices, MixedBatch};
pub use synth::make_synthetic_corpus;

pub const SPEC_FILE: &str = "dataset.toml";

/// How labeled images are divided into train/val/test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SplitPlan {
    /// Validation and test fractions; train takes the rest.
    Fractions { val: f64, test: f64 },
    /// Exact sizes; images beyond their sum are left out.
    Counts { train: usize, val: usize, test: usize },
    /// Line-oriented id lists, relative to the dataset root.
    Manifests { train: PathBuf, val: PathBuf, test: PathBuf },
}

impl SplitPlan {
    /// 1000 / 400 / 400 as used for CAMUS.
    pub fn camus() -> Self {
        SplitPlan::Counts {
            train: 1000,
            val: 400,
            test: 400,
        }
    }
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan::Fractions { val: 0.2, test: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    #[serde(skip)]
    pub root: PathBuf,
    pub image_dir: String,
    pub mask_dir: String,
    /// Images without masks, added to the unlabeled pool. Missing is fine.
    pub unlabeled_dir: String,
    /// File extension of images and masks.
    pub extension: String,
    pub num_classes: usize,
    /// 1 converts to grayscale, 3 to RGB.
    pub channels: usize,
    pub split: SplitPlan,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            root: PathBuf::new(),
            image_dir: "images".into(),
            mask_dir: "masks".into(),
            unlabeled_dir: "unlabeled".into(),
            extension: "png".into(),
            num_classes: 2,
            channels: 1,
            split: SplitPlan::default(),
        }
    }
}

impl DatasetSpec {
    /// Reads `root/dataset.toml` when present, otherwise uses defaults with
    /// `num_classes` taken from the caller.
    pub fn open(root: &Path, num_classes: usize) -> Result<Self> {
        let path = root.join(SPEC_FILE);
        let mut spec = if path.exists() {
            toml::from_str::<DatasetSpec>(&std::fs::read_to_string(&path)?)
                .map_err(|e| Error::ConfigParse(format!("{}: {e}", path.display())))?
        } else {
            DatasetSpec {
                num_classes,
                ..Default::default()
            }
        };
        spec.root = root.to_path_buf();
        Ok(spec)
    }

    pub fn save(&self) -> Result<()> {
        let text = toml::to_string(self).expect("dataset spec serializes");
        std::fs::write(self.root.join(SPEC_FILE), text)?;
        Ok(())
    }
}

/// Train/val/test id lists.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Labeled train pool, unlabeled pool, validation and test sets.
#[derive(Debug, Clone, Default)]
pub struct Pools {
    pub train: Vec<LabeledSample>,
    pub unlabeled: Vec<UnlabeledSample>,
    pub val: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

/// Sorted file stems with the given extension; a missing directory is empty.
pub fn list_stems(dir: &Path, extension: &str) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext_ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case(extension));
        if path.is_file() && ext_ok {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push(stem.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

pub fn write_manifest(path: &Path, ids: &[String]) -> Result<()> {
    let mut text = ids.join("\n");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Deterministic, disjoint split of `ids` (sorted first, then shuffled by seed).
pub fn split_ids(ids: &[String], plan: &SplitPlan, root: &Path, seed: u64) -> Result<Split> {
    let mut ids = ids.to_vec();
    ids.sort();
    let n = ids.len();
    let (n_train, n_val, n_test) = match plan {
        SplitPlan::Manifests { train, val, test } => {
            let known: HashSet<&String> = ids.iter().collect();
            let split = Split {
                train: read_manifest(&root.join(train))?,
                val: read_manifest(&root.join(val))?,
                test: read_manifest(&root.join(test))?,
            };
            let mut seen = HashSet::new();
            for id in split.train.iter().chain(&split.val).chain(&split.test) {
                if !known.contains(id) {
                    return Err(Error::Dataset(format!("manifest id {id} has no labeled image")));
                }
                if !seen.insert(id) {
                    return Err(Error::Dataset(format!("id {id} appears in more than one split")));
                }
            }
            return Ok(split);
        }
        SplitPlan::Fractions { val, test } => {
            if !(*val >= 0.0 && *test >= 0.0 && val + test <= 1.0) {
                return Err(Error::Dataset(format!("bad split fractions val={val} test={test}")));
            }
            let nv = (val * n as f64).round() as usize;
            let nt = ((test * n as f64).round() as usize).min(n - nv);
            (n - nv - nt, nv, nt)
        }
        SplitPlan::Counts { train, val, test } => {
            if train + val + test > n {
                return Err(Error::Dataset(format!(
                    "split {train}/{val}/{test} needs {} images, found {n}",
                    train + val + test
                )));
            }
            (*train, *val, *test)
        }
    };
    ids.shuffle(&mut rng::stream(seed, &[tag::SPLIT]));
    let mut it = ids.into_iter();
    Ok(Split {
        train: it.by_ref().take(n_train).collect(),
        val: it.by_ref().take(n_val).collect(),
        test: it.take(n_test).collect(),
    })
}

fn load_labeled(spec: &DatasetSpec, ids: &[String], resize: (usize, usize)) -> Result<Vec<LabeledSample>> {
    ids.iter()
        .map(|id| {
            let file = format!("{id}.{}", spec.extension);
            let img_path = spec.root.join(&spec.image_dir).join(&file);
            let mask_path = spec.root.join(&spec.mask_dir).join(&file);
            if !mask_path.is_file() {
                return Err(Error::MissingMask(img_path));
            }
            let image = io::read_image(&img_path, spec.channels, Some(resize))?;
            let mask = io::read_mask(&mask_path, spec.num_classes, Some(resize))?;
            LabeledSample::new(id.clone(), image, mask)
        })
        .collect()
}

/// Loads and resizes every split. The split is a pure function of the
/// dataset contents, the plan and `cfg.seed`.
pub fn load_dataset(spec: &DatasetSpec, cfg: &TrainConfig) -> Result<Pools> {
    if spec.num_classes != cfg.num_classes {
        return Err(Error::Dataset(format!(
            "dataset has {} classes, config expects {}",
            spec.num_classes, cfg.num_classes
        )));
    }
    let image_dir = spec.root.join(&spec.image_dir);
    if !image_dir.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", image_dir.display())));
    }
    let ids = list_stems(&image_dir, &spec.extension)?;
    let split = split_ids(&ids, &spec.split, &spec.root, cfg.seed)?;
    let unl_dir = spec.root.join(&spec.unlabeled_dir);
    let unlabeled = list_stems(&unl_dir, &spec.extension)?
        .into_iter()
        .map(|id| {
            let image = io::read_image(&unl_dir.join(format!("{id}.{}", spec.extension)), spec.channels, Some(cfg.resize_hw))?;
            Ok(UnlabeledSample { id, image })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Pools {
        train: load_labeled(spec, &split.train, cfg.resize_hw)?,
        unlabeled,
        val: load_labeled(spec, &split.val, cfg.resize_hw)?,
        test: load_labeled(spec, &split.test, cfg.resize_hw)?,
    })
}

/// Drops masks; ids get a suffix so they never collide with labeled ids.
pub fn strip_labels(labeled: &[LabeledSample]) -> Vec<UnlabeledSample> {
    labeled
        .iter()
        .map(|s| UnlabeledSample {
            id: format!("{}~u", s.id),
            image: s.image.clone(),
        })
        .collect()
}

/// Picks `count` samples with a seeded shuffle, first greedily taking
/// samples that add a class not yet covered so the subset contains every
/// class when the pool allows it. Returns `(chosen, rest)`.
pub fn select_labeled_subset(pool: &[LabeledSample], count: usize, seed: u64) -> (Vec<LabeledSample>, Vec<LabeledSample>) {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng::stream(seed, &[tag::SUBSET, count as u64]));
    let count = count.min(pool.len());
    let mut taken = vec![false; pool.len()];
    let mut chosen = Vec::with_capacity(count);
    let mut covered: HashSet<u8> = HashSet::new();
    for &i in &order {
        if chosen.len() == count {
            break;
        }
        let classes = pool[i].mask.classes_present();
        if classes.iter().any(|c| !covered.contains(c)) {
            covered.extend(classes);
            taken[i] = true;
            chosen.push(i);
        }
    }
    for &i in &order {
        if chosen.len() == count {
            break;
        }
        if !taken[i] {
            taken[i] = true;
            chosen.push(i);
        }
    }
    let rest = order.iter().filter(|i| !taken[**i]).map(|&i| pool[i].clone()).collect();
    (chosen.into_iter().map(|i| pool[i].clone()).collect(), rest)
}

/// Semi-supervised pools from a fully labeled train split: `count` labeled
/// samples, and every train image (the labeled ones included) without its
/// mask, followed by `extra` unlabeled images.
pub fn semi_supervised_pools(
    train: &[LabeledSample],
    count: usize,
    extra: &[UnlabeledSample],
    seed: u64,
) -> (Vec<LabeledSample>, Vec<UnlabeledSample>) {
    let (labeled, rest) = select_labeled_subset(train, count, seed);
    let mut unlabeled = strip_labels(&rest);
    unlabeled.extend(strip_labels(&labeled));
    unlabeled.extend(extra.iter().cloned());
    (labeled, unlabeled)
}

/// Writes samples in the dataset layout plus a `dataset.toml`.
pub fn write_corpus(root: &Path, samples: &[LabeledSample], num_classes: usize, split: SplitPlan) -> Result<DatasetSpec> {
    let spec = DatasetSpec {
        root: root.to_path_buf(),
        num_classes,
        channels: samples.first().map_or(1, |s| s.image.channels()),
        split,
        ..Default::default()
    };
    let (img_dir, mask_dir) = (root.join(&spec.image_dir), root.join(&spec.mask_dir));
    std::fs::create_dir_all(&img_dir)?;
    std::fs::create_dir_all(&mask_dir)?;
    for s in samples {
        let file = format!("{}.{}", s.id, spec.extension);
        io::write_image(&img_dir.join(&file), &s.image)?;
        io::write_mask(&mask_dir.join(&file), &s.mask)?;
    }
    spec.save()?;
    Ok(spec)
}
