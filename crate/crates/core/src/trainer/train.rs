//! Episodic SGD training with poly decay and the metric-learning warmup gate.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::prepare;
use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::{AugmentConfig, DatasetKind, OptimizerConfig, TrainConfig};
use crate::autograd::Graph;
use crate::episodes::{
    build_fold_split, load_folder, remap_labels, sample_episode, synth_shapes, ClassId, Dataset,
    Episode, FoldSpec, LabelMask, DEFAULT_MAX_RETRIES,
};
use crate::error::{config_err, Error, Result};
use crate::losses::{build_pools, focal_seg_loss_grad, pml_weight, select_triplets, triplet_loss_grad};
use crate::network::Model;
use crate::params::{Binder, ParamStore};
use crate::tensor::Tensor;

pub fn open_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    match cfg.dataset.kind {
        DatasetKind::Synthetic => synth_shapes(&cfg.dataset.synth, cfg.dataset.synth_seed),
        DatasetKind::Folder => {
            let path = cfg
                .dataset
                .path
                .as_ref()
                .ok_or_else(|| config_err!("dataset.path is required for folder datasets"))?;
            load_folder(path)
        }
    }
}

/// Fold split from explicit `fold<k>.txt` lists when present, otherwise
/// contiguous class blocks.
pub fn fold_split(ds: &Dataset, fold_id: usize, num_folds: usize) -> Result<FoldSpec> {
    if let Some(test) = ds.fold_lists.get(&fold_id) {
        let train = ds
            .index
            .class_ids()
            .into_iter()
            .filter(|c| !test.contains(c))
            .collect();
        return Ok(FoldSpec {
            dataset_name: ds.index.name.clone(),
            fold_id,
            num_folds,
            train_classes: train,
            test_classes: test.clone(),
        });
    }
    build_fold_split(&ds.index.name, &ds.index.class_ids(), fold_id, num_folds)
}

/// Network-ready tensors for one episode.
#[derive(Clone, Debug)]
pub struct EpisodeData {
    pub query: Tensor,
    /// Episode-local labels at the prepared query resolution.
    pub gt: LabelMask,
    /// `supports[n][k] = (image, binary mask)`.
    pub supports: Vec<Vec<(Tensor, LabelMask)>>,
}

pub fn load_episode<R: Rng + ?Sized>(
    ds: &Dataset,
    ep: &Episode,
    size: usize,
    aug: Option<&AugmentConfig>,
    rng: &mut R,
) -> Result<EpisodeData> {
    let q = ds.sample(ep.query)?;
    let (query, raw) = prepare(&q.image, &q.mask, size, aug, rng);
    let gt = remap_labels(&raw, &ep.classes);
    let mut supports = Vec::with_capacity(ep.n_way());
    for (&class, shots) in ep.classes.iter().zip(&ep.support) {
        let mut v = Vec::with_capacity(shots.len());
        for &pos in shots {
            let s = ds.sample(pos)?;
            let (img, m) = prepare(&s.image, &s.mask, size, aug, rng);
            v.push((img, m.binary(class)));
        }
        supports.push(v);
    }
    Ok(EpisodeData { query, gt, supports })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub l_seg: f64,
    pub l_pml: f64,
    pub triplets: usize,
}

/// Loss terms and gradients of every bound (non-backbone) parameter for one
/// episode. `l_pml` is always measured; it only enters the gradient when
/// `w_pml > 0`.
pub fn episode_gradients<R: Rng + ?Sized>(
    model: &Model,
    data: &EpisodeData,
    cfg: &TrainConfig,
    w_pml: f64,
    rng: &mut R,
) -> Result<(StepStats, BTreeMap<String, Tensor>)> {
    let enc = model.encode_inputs(&data.query, &data.supports)?;
    let mut g = Graph::new();
    let mut b = Binder::new(&model.params, true);
    let out_hw = (data.gt.height, data.gt.width);
    let v = model.forward_graph(&mut g, &mut b, &enc, out_hw)?;

    let (l_seg, grad_p) = focal_seg_loss_grad(g.value(v.probs), &data.gt, &cfg.focal)?;
    let seg = g.custom_scalar(v.probs, l_seg, grad_p);
    let mut terms = vec![(seg, 1.0)];
    let mut stats = StepStats {
        l_seg,
        ..Default::default()
    };
    if cfg.pml.enabled {
        let logits = g.value(v.logits);
        let (h, w, _) = logits.dims3();
        let pred = LabelMask::new(h, w, logits.argmax_last().into_iter().map(|l| l as u8).collect());
        let gt_small = data.gt.resize_nearest(h, w);
        let pools = build_pools(&pred, &gt_small, model.cfg.n_way)?;
        let emb = g.value(v.pml);
        let triplets = select_triplets(&pools, &cfg.pml.selection(), Some(emb), rng);
        let (l_pml, grad_e) = triplet_loss_grad(&triplets, emb, cfg.pml.alpha);
        stats.l_pml = l_pml;
        stats.triplets = triplets.len();
        if w_pml > 0.0 {
            let pml = g.custom_scalar(v.pml, l_pml, grad_e);
            terms.push((pml, w_pml));
        }
    }
    stats.loss = stats.l_seg + w_pml * stats.l_pml;
    let total = g.lin_comb(&terms);
    let mut grads = g.backward(total);
    let out = b
        .bound()
        .into_iter()
        .filter_map(|(name, var)| grads.take(var).map(|t| (name, t)))
        .collect();
    Ok((stats, out))
}

/// `lr₀ · (1 − iter/max_iter)^power`.
pub fn poly_lr(lr0: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if max_iter == 0 {
        return lr0;
    }
    let frac = (iter.min(max_iter) as f64) / max_iter as f64;
    lr0 * (1.0 - frac).powf(power)
}

/// SGD with momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub cfg: OptimizerConfig,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Sgd {
            cfg,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        let scale = match self.cfg.clip_norm {
            Some(max) => {
                let norm = grads
                    .values()
                    .flat_map(|g| g.data())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        for (name, grad) in grads {
            let w = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let (mu, wd) = (self.cfg.momentum, self.cfg.weight_decay);
            for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
                *vi = mu * *vi + scale * gi + wd * *wi;
                *wi -= lr * *vi;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub l_seg: f64,
    pub l_pml: f64,
    pub pml_weight: f64,
    pub triplets: usize,
}

pub struct TrainOutcome {
    pub model: Model,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub records: Vec<IterRecord>,
    /// Fixed training episodes when `episode_pool` is set.
    pub pool: Vec<Episode>,
    pub params_hash: String,
}

pub fn iters_per_epoch(cfg: &TrainConfig, ds: &Dataset, split: &FoldSpec) -> usize {
    cfg.iters_per_epoch.unwrap_or_else(|| {
        let mut imgs: Vec<usize> = split
            .train_classes
            .iter()
            .flat_map(|&c| ds.index.images_with(c).iter().copied())
            .collect();
        imgs.sort_unstable();
        imgs.dedup();
        imgs.len().div_ceil(cfg.batch_size).max(1)
    })
}

pub fn sample_pool<R: Rng + ?Sized>(
    ds: &Dataset,
    classes: &[ClassId],
    cfg: &TrainConfig,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Episode>> {
    (0..count)
        .map(|_| {
            sample_episode(
                &ds.index,
                classes,
                cfg.n_way,
                cfg.k_shot,
                cfg.episode_mode,
                DEFAULT_MAX_RETRIES,
                rng,
            )
        })
        .collect()
}

fn init_model(cfg: &TrainConfig) -> Result<Model> {
    let mut model = Model::new(cfg.model_config(), cfg.seed)?;
    if let Some(path) = &cfg.backbone.weights {
        let ck = load_checkpoint(path)?;
        let src = ck.params.group("backbone");
        let dst = model.params.group("backbone");
        if src.manifest() != dst.manifest() {
            return Err(Error::Load(format!(
                "backbone weights in {} do not match the configured backbone",
                path.display()
            )));
        }
        model.params.extend(src);
    }
    Ok(model)
}

fn dump_episode(dir: &Path, ds: &Dataset, ep: &Episode, iter: usize) -> PathBuf {
    let path = dir.join(format!("nonfinite_iter{iter}.json"));
    let rec = ep.to_record(&ds.index);
    if let Ok(s) = serde_json::to_string_pretty(&rec) {
        let _ = fs::write(&path, s);
    }
    path
}

/// Trains on `ds` and writes the log and checkpoints under `cfg.output_dir`.
pub fn train_on(cfg: &TrainConfig, ds: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let split = fold_split(ds, cfg.fold_id, cfg.dataset.num_folds)?;
    let mut model = init_model(cfg)?;
    // stream 0: episodes and augmentation; stream 1: triplet selection
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pml_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    pml_rng.set_stream(1);
    let pool = match cfg.episode_pool {
        Some(n) => sample_pool(ds, &split.train_classes, cfg, n, &mut rng)?,
        None => Vec::new(),
    };
    let ipe = iters_per_epoch(cfg, ds, &split);
    let max_iter = cfg.epochs * ipe;

    fs::create_dir_all(&cfg.output_dir)?;
    let log_path = cfg.output_dir.join("train_log.jsonl");
    let mut log = BufWriter::new(fs::File::create(&log_path)?);
    let mut sgd = Sgd::new(cfg.optimizer);
    let mut records = Vec::with_capacity(max_iter);
    let aug = cfg.augment.enabled.then_some(&cfg.augment);
    let mut drawn = 0usize;

    for iter in 0..max_iter {
        let epoch = iter / ipe;
        let lr = poly_lr(cfg.optimizer.lr, iter, max_iter, cfg.optimizer.poly_power);
        let w_pml = if cfg.pml.enabled {
            pml_weight(cfg.pml.lambda, epoch, cfg.pml.start_epoch)
        } else {
            0.0
        };
        let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut sum = StepStats::default();
        let inv_b = 1.0 / cfg.batch_size as f64;
        for _ in 0..cfg.batch_size {
            let ep = if pool.is_empty() {
                sample_episode(
                    &ds.index,
                    &split.train_classes,
                    cfg.n_way,
                    cfg.k_shot,
                    cfg.episode_mode,
                    DEFAULT_MAX_RETRIES,
                    &mut rng,
                )?
            } else {
                pool[drawn % pool.len()].clone()
            };
            drawn += 1;
            let data = load_episode(ds, &ep, cfg.input_size, aug, &mut rng)?;
            let (stats, grads) = episode_gradients(&model, &data, cfg, w_pml, &mut pml_rng)?;
            let finite = stats.loss.is_finite() && grads.values().all(Tensor::is_finite);
            if !finite {
                log.flush()?;
                let dump = dump_episode(&cfg.output_dir, ds, &ep, iter);
                return Err(Error::Numerical(format!(
                    "non-finite loss at iteration {iter} (query {}); episode written to {}",
                    ds.index.entries[ep.query].name,
                    dump.display()
                )));
            }
            sum.loss += stats.loss * inv_b;
            sum.l_seg += stats.l_seg * inv_b;
            sum.l_pml += stats.l_pml * inv_b;
            sum.triplets += stats.triplets;
            for (name, gr) in grads {
                match acc.get_mut(&name) {
                    Some(a) => a.add_assign(&gr.scaled(inv_b)),
                    None => {
                        acc.insert(name, gr.scaled(inv_b));
                    }
                }
            }
        }
        sgd.step(&mut model.params, &acc, lr);
        let rec = IterRecord {
            iter,
            epoch,
            lr,
            loss: sum.loss,
            l_seg: sum.l_seg,
            l_pml: sum.l_pml,
            pml_weight: w_pml,
            triplets: sum.triplets,
        };
        serde_json::to_writer(&mut log, &rec).map_err(|e| Error::Io(e.into()))?;
        log.write_all(b"\n")?;
        log::debug!(
            "iter {iter} epoch {epoch} lr {lr:.5} loss {:.5} seg {:.5} pml {:.5}",
            rec.loss,
            rec.l_seg,
            rec.l_pml
        );
        records.push(rec);
        if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 && iter + 1 < max_iter {
            save_checkpoint(
                &cfg.output_dir.join(format!("checkpoint_iter{}.bin", iter + 1)),
                cfg,
                &model.params,
            )?;
        }
    }
    log.flush()?;
    let checkpoint = cfg.output_dir.join("checkpoint.bin");
    save_checkpoint(&checkpoint, cfg, &model.params)?;
    let params_hash = model.params.hash_hex();
    log::info!("trained {max_iter} iterations; checkpoint {}", checkpoint.display());
    Ok(TrainOutcome {
        model,
        checkpoint,
        log: log_path,
        records,
        pool,
        params_hash,
    })
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let ds = open_dataset(cfg)?;
    train_on(cfg, &ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_endpoints() {
        assert_eq!(poly_lr(0.01, 0, 100, 0.9), 0.01);
        assert_eq!(poly_lr(0.01, 100, 100, 0.9), 0.0);
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let lr = poly_lr(0.01, i, 100, 0.9);
            assert!(lr < prev);
            prev = lr;
        }
    }

    #[test]
    fn sgd_matches_hand_update() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_vec(&[1], vec![1.0]));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::from_vec(&[1], vec![0.5]));
        let mut sgd = Sgd::new(OptimizerConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.1,
            poly_power: 0.9,
            clip_norm: None,
        });
        sgd.step(&mut p, &g, 0.1);
        // v = 0.5 + 0.1 = 0.6; w = 1 - 0.06
        assert!((p.get("w").item() - 0.94).abs() < 1e-15);
        sgd.step(&mut p, &g, 0.1);
        // v = 0.54 + 0.5 + 0.094 = 1.134
        assert!((p.get("w").item() - (0.94 - 0.1134)).abs() < 1e-15);
    }

    #[test]
    fn clipping_rescales_the_global_norm() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::from_vec(&[1], vec![0.0]));
        p.insert("b", Tensor::from_vec(&[1], vec![0.0]));
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::from_vec(&[1], vec![3.0]));
        g.insert("b".to_string(), Tensor::from_vec(&[1], vec![4.0]));
        let cfg = OptimizerConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
            ..OptimizerConfig::default()
        };
        Sgd::new(cfg).step(&mut p, &g, 1.0);
        assert!((p.get("a").item() + 0.6).abs() < 1e-15);
        assert!((p.get("b").item() + 0.8).abs() < 1e-15);
    }
}
