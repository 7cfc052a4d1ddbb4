//! Datasets and episode sampling.
//!
//! A dataset is a list of multi-modal items (raw image tensor plus n
//! caption sentences) with disjoint class splits for meta-train, meta-val
//! and meta-test. The synthetic generator produces desk-scale data with a
//! controllable image signal-to-noise ratio and text signal rate, so the
//! value of each modality can be dialed up or down by construction.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{gen_index, normal_f64, sample_distinct, stream, uniform_f64};

/// One sample: raw image buffer, its captions, and the class label.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MultiModalItem {
    pub class: String,
    /// `[C, H, W]`.
    pub image_shape: [usize; 3],
    /// Row-major pixel buffer, `C*H*W` long.
    pub image: Vec<f64>,
    pub sentences: Vec<String>,
}

/// Disjoint class partition plus the per-item sentence count.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SplitSpec {
    pub meta_train: Vec<String>,
    pub meta_val: Vec<String>,
    pub meta_test: Vec<String>,
    pub n_sentences: usize,
}

/// Which class partition an operation draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    MetaTrain,
    MetaVal,
    MetaTest,
}

impl Split {
    pub fn token(self) -> &'static str {
        match self {
            Split::MetaTrain => "meta_train",
            Split::MetaVal => "meta_val",
            Split::MetaTest => "meta_test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "meta_train" => Ok(Split::MetaTrain),
            "meta_val" => Ok(Split::MetaVal),
            "meta_test" => Ok(Split::MetaTest),
            other => Err(Error::Config(format!(
                "unknown split '{other}' (expected meta_train | meta_val | meta_test)"
            ))),
        }
    }
}

/// Validated dataset: items, class registry, and the split partition.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub items: Vec<MultiModalItem>,
    pub splits: SplitSpec,
    /// Class name -> indices of its items, in manifest order.
    pub class_items: BTreeMap<String, Vec<usize>>,
    pub image_shape: [usize; 3],
}

impl DatasetManifest {
    /// Build from parts, enforcing every load-time invariant.
    pub fn new(items: Vec<MultiModalItem>, splits: SplitSpec) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Data("manifest holds no items".to_string()));
        }
        let n = splits.n_sentences;
        if n == 0 {
            return Err(Error::Data("n_sentences must be at least 1".to_string()));
        }
        let image_shape = items[0].image_shape;
        let mut class_items: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, item) in items.iter().enumerate() {
            let line = i + 1;
            if item.sentences.len() != n {
                return Err(Error::Data(format!(
                    "line {line}: item of class '{}' has {} sentences, manifest declares {n}",
                    item.class,
                    item.sentences.len()
                )));
            }
            if item.image_shape != image_shape {
                return Err(Error::Data(format!(
                    "line {line}: image shape {:?} differs from {:?}",
                    item.image_shape, image_shape
                )));
            }
            let numel = item.image_shape.iter().product::<usize>();
            if item.image.len() != numel {
                return Err(Error::Data(format!(
                    "line {line}: image buffer holds {} values, shape {:?} needs {numel}",
                    item.image.len(),
                    item.image_shape
                )));
            }
            class_items.entry(item.class.clone()).or_default().push(i);
        }
        // Split classes must be pairwise disjoint and present in the data.
        let lists = [
            (Split::MetaTrain, &splits.meta_train),
            (Split::MetaVal, &splits.meta_val),
            (Split::MetaTest, &splits.meta_test),
        ];
        let mut owner: BTreeMap<&str, Split> = BTreeMap::new();
        for (split, classes) in &lists {
            for class in classes.iter() {
                if let Some(previous) = owner.insert(class.as_str(), *split) {
                    return Err(Error::Data(format!(
                        "split overlap: class '{class}' appears in both {previous} and {split}"
                    )));
                }
                if !class_items.contains_key(class) {
                    return Err(Error::Data(format!(
                        "split {split} lists class '{class}' but the manifest has no such items"
                    )));
                }
            }
        }
        Ok(DatasetManifest { items, splits, class_items, image_shape })
    }

    pub fn split_classes(&self, split: Split) -> &[String] {
        match split {
            Split::MetaTrain => &self.splits.meta_train,
            Split::MetaVal => &self.splits.meta_val,
            Split::MetaTest => &self.splits.meta_test,
        }
    }

    pub fn n_sentences(&self) -> usize {
        self.splits.n_sentences
    }
}

/// Path of the split sidecar belonging to a manifest path.
pub fn sidecar_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("splits.json")
}

/// Write a manifest as JSON-lines plus its split sidecar. Floats go through
/// the standard shortest-round-trip decimal encoding, so loading restores
/// them bit-exactly.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in &manifest.items {
        serde_json::to_writer(&mut out, item)
            .map_err(|e| Error::Data(format!("encoding manifest item: {e}")))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    let sidecar = File::create(sidecar_path(path))?;
    serde_json::to_writer_pretty(BufWriter::new(sidecar), &manifest.splits)
        .map_err(|e| Error::Data(format!("encoding split sidecar: {e}")))?;
    Ok(())
}

/// Load and validate a manifest; invariant violations carry line numbers.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let reader = BufReader::new(File::open(path).map_err(|e| {
        Error::Data(format!("cannot open manifest {}: {e}", path.display()))
    })?);
    let mut items = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: MultiModalItem = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
        items.push(item);
    }
    let sidecar = sidecar_path(path);
    let splits: SplitSpec = serde_json::from_reader(BufReader::new(
        File::open(&sidecar).map_err(|e| {
            Error::Data(format!("cannot open split sidecar {}: {e}", sidecar.display()))
        })?,
    ))
    .map_err(|e| Error::Data(format!("split sidecar {}: {e}", sidecar.display())))?;
    DatasetManifest::new(items, splits)
}

/// Parameters of the synthetic multi-modal generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Classes in meta-train / meta-val / meta-test.
    pub classes_per_split: [usize; 3],
    pub items_per_class: usize,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    /// Image noise level; 0 makes every image of a class identical.
    pub image_noise: f64,
    /// Fraction of class-specific tokens per sentence, in `[0, 1]`.
    pub text_signal_rate: f64,
    /// `[C, H, W]`.
    #[serde(default = "default_image_shape")]
    pub image_shape: [usize; 3],
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "default_n_sentences")]
    pub n_sentences: usize,
    #[serde(default = "default_sentence_len")]
    pub sentence_len: usize,
    pub seed: u64,
}

fn default_latent_dim() -> usize {
    8
}

fn default_image_shape() -> [usize; 3] {
    [3, 16, 16]
}

fn default_vocab_size() -> usize {
    512
}

fn default_n_sentences() -> usize {
    3
}

fn default_sentence_len() -> usize {
    8
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.image_noise < 0.0 {
            return Err(Error::Config("image_noise must be non-negative".to_string()));
        }
        if !(0.0..=1.0).contains(&self.text_signal_rate) {
            return Err(Error::Config("text_signal_rate must lie in [0, 1]".to_string()));
        }
        if self.items_per_class == 0 || self.latent_dim == 0 || self.sentence_len == 0 {
            return Err(Error::Config("synthetic sizes must be positive".to_string()));
        }
        if self.classes_per_split.iter().sum::<usize>() == 0 {
            return Err(Error::Config("synthetic spec declares no classes".to_string()));
        }
        Ok(())
    }
}

/// Generate a synthetic dataset.
///
/// Per class, a latent vector is rendered to a base image through a fixed
/// seeded linear map; items add gaussian pixel noise on top. Sentences mix
/// class-owned tokens (rate `text_signal_rate`) with tokens from a shared
/// noise pool, over a single vocabulary `w0..w{V-1}` whose first half is
/// partitioned among classes.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    let [c, h, w] = spec.image_shape;
    let pixels = c * h * w;
    let total_classes: usize = spec.classes_per_split.iter().sum();

    // Fixed render map: pixels x latent, entries N(0, 1/latent).
    let mut render_rng = stream(spec.seed, "synthetic/render", 0);
    let scale = 1.0 / (spec.latent_dim as f64).sqrt();
    let render: Vec<f64> = (0..pixels * spec.latent_dim)
        .map(|_| normal_f64(&mut render_rng) * scale)
        .collect();

    // Vocabulary partition: each class owns `class_pool` ids, the rest are
    // shared noise.
    let class_pool = (spec.vocab_size / (2 * total_classes)).max(1);
    let noise_start = total_classes * class_pool;
    let noise_pool = spec.vocab_size.saturating_sub(noise_start).max(1);

    let mut items = Vec::new();
    let mut split_lists: [Vec<String>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let split_names = ["train", "val", "test"];
    let mut global_class = 0usize;
    for (si, &count) in spec.classes_per_split.iter().enumerate() {
        for local in 0..count {
            let name = format!("synth_{}_{:03}", split_names[si], local);
            split_lists[si].push(name.clone());

            let mut latent_rng = stream(spec.seed, "synthetic/class-latent", global_class as u64);
            let latent: Vec<f64> =
                (0..spec.latent_dim).map(|_| normal_f64(&mut latent_rng)).collect();
            let mut base = vec![0.0f64; pixels];
            for (p, row) in base.iter_mut().zip(render.chunks(spec.latent_dim)) {
                *p = row.iter().zip(&latent).map(|(r, l)| r * l).sum();
            }

            let mut item_rng = stream(spec.seed, "synthetic/items", global_class as u64);
            for _ in 0..spec.items_per_class {
                let image: Vec<f64> = base
                    .iter()
                    .map(|&v| v + spec.image_noise * normal_f64(&mut item_rng))
                    .collect();
                let sentences: Vec<String> = (0..spec.n_sentences)
                    .map(|_| {
                        (0..spec.sentence_len)
                            .map(|_| {
                                if uniform_f64(&mut item_rng) < spec.text_signal_rate {
                                    let t = gen_index(&mut item_rng, class_pool);
                                    format!("w{}", global_class * class_pool + t)
                                } else {
                                    let t = gen_index(&mut item_rng, noise_pool);
                                    format!("w{}", noise_start + t)
                                }
                            })
                            .collect::<Vec<_>>()
                            .join(" ")
                    })
                    .collect();
                items.push(MultiModalItem {
                    class: name.clone(),
                    image_shape: spec.image_shape,
                    image,
                    sentences,
                });
            }
            global_class += 1;
        }
    }
    let [meta_train, meta_val, meta_test] = split_lists;
    DatasetManifest::new(
        items,
        SplitSpec { meta_train, meta_val, meta_test, n_sentences: spec.n_sentences },
    )
}

/// One sampled N-way K-shot episode: manifest item indices with labels
/// remapped to `0..N-1` in sampled-class order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<String>,
    pub support_items: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query_items: Vec<usize>,
    pub query_labels: Vec<usize>,
    pub n_way: usize,
    pub k_shot: usize,
    pub t_query: usize,
}

/// Sample an episode from `split`: `n` distinct classes, `k + t` distinct
/// items per class (first `k` as support), labels remapped in sampled order.
/// Fully determined by the RNG stream handed in.
pub fn sample_episode(
    manifest: &DatasetManifest,
    split: Split,
    n: usize,
    k: usize,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let classes = manifest.split_classes(split);
    if classes.len() < n {
        return Err(Error::Data(format!(
            "split {split} has {} classes, {n}-way episodes need {n}",
            classes.len()
        )));
    }
    if k == 0 || t == 0 {
        return Err(Error::Config("episodes need k >= 1 and t >= 1".to_string()));
    }
    let picked = sample_distinct(rng, classes.len(), n);
    let mut episode = Episode {
        classes: picked.iter().map(|&i| classes[i].clone()).collect(),
        support_items: Vec::with_capacity(n * k),
        support_labels: Vec::with_capacity(n * k),
        query_items: Vec::with_capacity(n * t),
        query_labels: Vec::with_capacity(n * t),
        n_way: n,
        k_shot: k,
        t_query: t,
    };
    for (label, class) in episode.classes.iter().enumerate() {
        let pool = &manifest.class_items[class];
        if pool.len() < k + t {
            return Err(Error::Data(format!(
                "class '{class}' has {} items, episodes need {}",
                pool.len(),
                k + t
            )));
        }
        let chosen = sample_distinct(rng, pool.len(), k + t);
        for (j, &pick) in chosen.iter().enumerate() {
            if j < k {
                episode.support_items.push(pool[pick]);
                episode.support_labels.push(label);
            } else {
                episode.query_items.push(pool[pick]);
                episode.query_labels.push(label);
            }
        }
    }
    Ok(episode)
}
