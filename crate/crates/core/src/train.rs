//! Training loop, evaluation protocol, and embedding export.
//!
//! Each training episode runs the full pipeline: encode both modalities,
//! fuse support and query, compute the episode classification loss plus the
//! bidirectional matching loss on the raw modal embeddings, back-propagate,
//! and take an Adam step under the step-decay schedule. Every validation
//! period the model is scored on meta-val and the best checkpoint kept.
//!
//! Episode sampling and dropout streams are keyed by the episode index
//! within the epoch, so a frozen run (lr = 0) sees identical losses each
//! epoch and equal-seed runs are byte-identical.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::autodiff::{backward, Tensor};
use crate::checkpoint::{load_into, read_header, save_checkpoint};
use crate::config::{DataSource, Precision, RunConfig};
use crate::episodes::{
    generate_synthetic, load_manifest, sample_episode, DatasetManifest, Episode, Split,
};
use crate::error::{Error, Result};
use crate::metrics::{mean_ci95, MetricsRecord, MetricsWriter};
use crate::model::{episode_accuracy, EpisodeTensors, Model};
use crate::optim::{lr_schedule, Adam};
use crate::rng::{sample_distinct, stream};
use crate::scalar::{Dtype, Scalar};

/// Load or generate the dataset a config points at.
pub fn load_dataset(config: &RunConfig) -> Result<DatasetManifest> {
    match &config.data {
        DataSource::Synthetic(spec) => generate_synthetic(spec),
        DataSource::Manifest(path) => load_manifest(path),
    }
}

/// Model + dataset + the per-item frozen text-projection cache.
pub struct Harness<S: Scalar> {
    pub config: RunConfig,
    pub manifest: DatasetManifest,
    pub model: Model<S>,
    /// Per item: `n_sentences * hidden` frozen-projection features.
    text_cache: Option<Vec<Vec<f64>>>,
}

/// Mean accuracy and loss statistics over an evaluation run.
pub struct EvalResult {
    pub accuracy_pct: f64,
    pub ci95_pct: f64,
    pub per_episode: Vec<f64>,
    pub mean_cls: f64,
    pub mean_matching: f64,
    pub mean_total: f64,
}

impl<S: Scalar> Harness<S> {
    pub fn new(config: RunConfig) -> Result<Self> {
        let manifest = load_dataset(&config)?;
        let model = Model::build(&config, manifest.image_shape, manifest.n_sentences())?;
        let text_cache = model.text_encoder.as_ref().map(|enc| {
            manifest
                .items
                .iter()
                .map(|item| {
                    let mut v = Vec::with_capacity(item.sentences.len() * enc.hidden_size());
                    for s in &item.sentences {
                        v.extend(enc.project_sentence(s));
                    }
                    v
                })
                .collect()
        });
        Ok(Harness { config, manifest, model, text_cache })
    }

    /// Image batch and projected-text batch for a list of item indices.
    fn item_tensors(&self, ids: &[usize]) -> Result<(Option<Tensor<S>>, Option<Tensor<S>>)> {
        let images = if self.model.image_encoder.is_some() {
            let [c, h, w] = self.manifest.image_shape;
            let mut buf = Vec::with_capacity(ids.len() * c * h * w);
            for &id in ids {
                buf.extend_from_slice(&self.manifest.items[id].image);
            }
            Some(Tensor::from_f64_slice(&buf, &[ids.len(), c, h, w])?)
        } else {
            None
        };
        let text = if let (Some(cache), Some(enc)) = (&self.text_cache, &self.model.text_encoder) {
            let n = self.manifest.n_sentences();
            let hidden = enc.hidden_size();
            let mut buf = Vec::with_capacity(ids.len() * n * hidden);
            for &id in ids {
                buf.extend_from_slice(&cache[id]);
            }
            Some(Tensor::from_f64_slice(&buf, &[ids.len() * n, hidden])?)
        } else {
            None
        };
        Ok((images, text))
    }

    pub fn episode_tensors(&self, ep: &Episode) -> Result<EpisodeTensors<S>> {
        let ids: Vec<usize> = ep
            .support_items
            .iter()
            .chain(ep.query_items.iter())
            .copied()
            .collect();
        let (images, text_hidden) = self.item_tensors(&ids)?;
        Ok(EpisodeTensors {
            images,
            text_hidden,
            support_labels: ep.support_labels.clone(),
            query_labels: ep.query_labels.clone(),
            n_way: ep.n_way,
            k_shot: ep.k_shot,
            t_query: ep.t_query,
        })
    }

    /// Evaluation protocol: `episodes` freshly sampled episodes from `split`,
    /// per-episode argmax accuracy, mean and 95% confidence half-width in
    /// percent. Fully determined by `seed`.
    pub fn evaluate(&self, split: Split, episodes: usize, seed: u64) -> Result<EvalResult> {
        let config = &self.config;
        let tag = format!("eval-{split}");
        let mut accs = Vec::with_capacity(episodes);
        let (mut cls, mut matching, mut total) = (0.0, 0.0, 0.0);
        for i in 0..episodes {
            let mut rng = stream(seed, &tag, i as u64);
            let ep = sample_episode(
                &self.manifest,
                split,
                config.n_way,
                config.k_shot,
                config.t_query,
                &mut rng,
            )?;
            let tensors = self.episode_tensors(&ep)?;
            let mut eval_rng = stream(seed, "eval-dropout-unused", i as u64);
            let out = self.model.forward_episode(&tensors, false, &mut eval_rng)?;
            accs.push(episode_accuracy(&out.query_logits, &tensors.query_labels));
            cls += out.breakdown.cls;
            matching += out.breakdown.matching;
            total += out.breakdown.total;
        }
        let (mean, ci) = mean_ci95(&accs);
        let e = episodes as f64;
        Ok(EvalResult {
            accuracy_pct: 100.0 * mean,
            ci95_pct: 100.0 * ci,
            per_episode: accs,
            mean_cls: cls / e,
            mean_matching: matching / e,
            mean_total: total / e,
        })
    }

    /// Export joint embeddings for `n_classes` randomly chosen classes of
    /// `split`, `per_class` items each, as a CSV of (class, item, d floats).
    pub fn export_embeddings(
        &self,
        split: Split,
        n_classes: usize,
        per_class: usize,
        seed: u64,
        out: &Path,
    ) -> Result<usize> {
        let classes = self.manifest.split_classes(split);
        if classes.len() < n_classes {
            return Err(Error::Data(format!(
                "split {split} has {} classes, export needs {n_classes}",
                classes.len()
            )));
        }
        let mut rng = stream(seed, "export", 0);
        let picked = sample_distinct(&mut rng, classes.len(), n_classes);
        let mut rows: Vec<(String, usize)> = Vec::with_capacity(n_classes * per_class);
        for &ci in &picked {
            let class = &classes[ci];
            let pool = &self.manifest.class_items[class];
            if pool.len() < per_class {
                return Err(Error::Data(format!(
                    "class '{class}' has {} items, export needs {per_class}",
                    pool.len()
                )));
            }
            let chosen = sample_distinct(&mut rng, pool.len(), per_class);
            for &pi in &chosen {
                rows.push((class.clone(), pool[pi]));
            }
        }
        let ids: Vec<usize> = rows.iter().map(|(_, id)| *id).collect();
        let (images, text_hidden) = self.item_tensors(&ids)?;
        let mut dummy = stream(0, "export-eval", 0);
        let (joint, _) = self.model.joint_embeddings(
            images.as_ref(),
            text_hidden.as_ref(),
            ids.len(),
            false,
            &mut dummy,
        )?;
        let d = joint.shape()[1];
        let data = joint.data();
        let mut file = std::io::BufWriter::new(fs::File::create(out)?);
        let header: Vec<String> = (0..d).map(|j| format!("e{j}")).collect();
        writeln!(file, "class,item,{}", header.join(","))?;
        for (r, (class, id)) in rows.iter().enumerate() {
            let values: Vec<String> =
                data[r * d..(r + 1) * d].iter().map(|v| format!("{v}")).collect();
            writeln!(file, "{class},{id},{}", values.join(","))?;
        }
        file.flush()?;
        Ok(rows.len())
    }
}

/// Paths and summary of a finished training run.
pub struct TrainReport {
    pub best_val_accuracy: f64,
    pub best_epoch: u64,
    pub param_count: usize,
    pub param_names: Vec<String>,
    pub metrics_path: PathBuf,
    pub timings_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub config_path: PathBuf,
}

/// Train per the config, writing `config.json`, `metrics.csv`,
/// `timings.csv`, and `best.ckpt` into `out_dir`.
pub fn run_training(config: &RunConfig, out_dir: &Path) -> Result<TrainReport> {
    config.validate()?;
    match config.precision {
        Precision::F32 => train_typed::<f32>(config, out_dir),
        Precision::F64 => train_typed::<f64>(config, out_dir),
    }
}

fn train_typed<S: Scalar>(config: &RunConfig, out_dir: &Path) -> Result<TrainReport> {
    fs::create_dir_all(out_dir)?;
    let config_json = config.to_json_pretty();
    let config_path = out_dir.join("config.json");
    fs::write(&config_path, &config_json)?;

    let harness = Harness::<S>::new(config.clone())?;
    let params = harness.model.params();
    let param_names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let param_count = harness.model.param_count();
    println!(
        "model: {} | fusion: {} | modality: {:?} | {} parameters in {} tensors",
        match config.model {
            crate::config::ModelKind::Protonet => "protonet",
            crate::config::ModelKind::Maml => "maml",
        },
        config.fusion.token(),
        config.modality,
        param_count,
        params.len()
    );

    let mut optimizer = Adam::new(config.optimizer.adam(), params.clone());
    let metrics_path = out_dir.join("metrics.csv");
    let timings_path = out_dir.join("timings.csv");
    let checkpoint_path = out_dir.join("best.ckpt");
    let mut writer = MetricsWriter::create(&metrics_path, &timings_path)?;

    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0u64;
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = lr_schedule(
            epoch,
            config.optimizer.lr,
            config.optimizer.lr_decay_period,
            config.optimizer.lr_decay_factor,
        );
        let mut accs = Vec::with_capacity(config.episodes_per_epoch);
        let (mut cls, mut matching, mut total) = (0.0, 0.0, 0.0);
        for i in 0..config.episodes_per_epoch {
            let mut sample_rng = stream(config.seed, "train-sample", i as u64);
            let ep = sample_episode(
                &harness.manifest,
                Split::MetaTrain,
                config.n_way,
                config.k_shot,
                config.t_query,
                &mut sample_rng,
            )?;
            let tensors = harness.episode_tensors(&ep)?;
            let mut dropout_rng = stream(config.seed, "train-dropout", i as u64);
            let out = harness.model.forward_episode(&tensors, true, &mut dropout_rng)?;
            if !out.breakdown.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at epoch {epoch}, episode {i}"
                )));
            }
            backward(&out.total)?;
            optimizer.step(lr)?;
            accs.push(episode_accuracy(&out.query_logits, &tensors.query_labels));
            cls += out.breakdown.cls;
            matching += out.breakdown.matching;
            total += out.breakdown.total;
        }
        let e = config.episodes_per_epoch as f64;
        let (acc_mean, acc_ci) = mean_ci95(&accs);
        writer.append(&MetricsRecord {
            epoch,
            split: "train",
            accuracy_pct: 100.0 * acc_mean,
            ci95: 100.0 * acc_ci,
            cls_loss: cls / e,
            matching_loss: matching / e,
            total_loss: total / e,
            wall_seconds: started.elapsed().as_secs_f64(),
        })?;

        let validate_now = (epoch + 1) % config.val_period == 0 || epoch + 1 == config.epochs;
        if validate_now {
            let val_started = Instant::now();
            let val = harness.evaluate(Split::MetaVal, config.val_episodes, config.seed)?;
            writer.append(&MetricsRecord {
                epoch,
                split: "meta_val",
                accuracy_pct: val.accuracy_pct,
                ci95: val.ci95_pct,
                cls_loss: val.mean_cls,
                matching_loss: val.mean_matching,
                total_loss: val.mean_total,
                wall_seconds: val_started.elapsed().as_secs_f64(),
            })?;
            if val.accuracy_pct > best_val {
                best_val = val.accuracy_pct;
                best_epoch = epoch;
                save_checkpoint(
                    &checkpoint_path,
                    &config_json,
                    config.embedding_dim,
                    &harness.model.params(),
                )?;
            }
            println!(
                "epoch {epoch}: train {:.2}% | val {:.2}% +- {:.2} (best {:.2}% @ {best_epoch})",
                100.0 * acc_mean,
                val.accuracy_pct,
                val.ci95_pct,
                best_val
            );
        }
    }
    Ok(TrainReport {
        best_val_accuracy: best_val,
        best_epoch,
        param_count,
        param_names,
        metrics_path,
        timings_path,
        checkpoint_path,
        config_path,
    })
}

/// Rebuild the model a checkpoint was trained with, pointed at `data`.
fn harness_from_checkpoint_f<S: Scalar>(
    checkpoint: &Path,
    data: &Path,
) -> Result<Harness<S>> {
    let header = read_header(checkpoint)?;
    let mut config: RunConfig = serde_json::from_str(&header.config_json)
        .map_err(|e| Error::Data(format!("checkpoint config: {e}")))?;
    config.data = DataSource::Manifest(data.to_path_buf());
    let harness = Harness::<S>::new(config)?;
    load_into(checkpoint, &harness.model.params())?;
    Ok(harness)
}

/// Evaluate a checkpoint on a manifest split. Returns (mean accuracy %,
/// ci95 %).
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    data: &Path,
    split: Split,
    episodes: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let header = read_header(checkpoint)?;
    match header.dtype {
        Dtype::F32 => {
            let harness = harness_from_checkpoint_f::<f32>(checkpoint, data)?;
            let result = harness.evaluate(split, episodes, seed)?;
            Ok((result.accuracy_pct, result.ci95_pct))
        }
        Dtype::F64 => {
            let harness = harness_from_checkpoint_f::<f64>(checkpoint, data)?;
            let result = harness.evaluate(split, episodes, seed)?;
            Ok((result.accuracy_pct, result.ci95_pct))
        }
    }
}

/// Export embeddings from a checkpointed model. Returns the row count.
#[allow(clippy::too_many_arguments)]
pub fn export_checkpoint_embeddings(
    checkpoint: &Path,
    data: &Path,
    split: Split,
    n_classes: usize,
    per_class: usize,
    seed: u64,
    out: &Path,
) -> Result<usize> {
    let header = read_header(checkpoint)?;
    match header.dtype {
        Dtype::F32 => harness_from_checkpoint_f::<f32>(checkpoint, data)?
            .export_embeddings(split, n_classes, per_class, seed, out),
        Dtype::F64 => harness_from_checkpoint_f::<f64>(checkpoint, data)?
            .export_embeddings(split, n_classes, per_class, seed, out),
    }
}
